//! Multi-layer perceptron with per-layer quantization schemes.
//!
//! Each trainable layer keeps `f32` shadow weights. After every update the
//! shadow is re-quantized into a [`QuantizedLayer`] and an inference kernel;
//! the forward pass only ever reads the kernel, so what is trained is what
//! is stored. Gradients reach the shadow through a straight-through
//! estimator: the quantizer is treated as identity except where a code was
//! clipped, where the gradient is zero.

use crate::bitwise::{self, BitVector, DEFAULT_THRESHOLD};
use crate::error::{Error, Result};
use crate::quant::{bitlinear_raw, ternary_code, QuantScheme, QuantizedLayer};
use crate::tensor::{Matrix, Rng};

/// Width of the sigmoid surrogate used for the ternary threshold gradient.
pub const TERNARY_SURROGATE_WIDTH: f32 = 0.01;

/// Ternary threshold at initialisation, as a fraction of `mean|W|`.
pub const TERNARY_INIT_RATIO: f32 = 0.7;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ForwardMode {
    Eval,
    DropoutOn,
}

#[derive(Clone, Debug)]
struct Shadow {
    weight: Matrix,
    bias: Vec<f32>,
    /// Ternary per-channel scales.
    alphas: Vec<f32>,
    /// Ternary threshold.
    tau: f32,
    /// Mean magnitude of active inputs, measured when a binarized layer is
    /// calibrated.
    act_level: f32,
}

#[derive(Clone, Debug)]
enum Kernel {
    Dense {
        w: Matrix,
        wt: Matrix,
        bias: Vec<f32>,
    },
    Bitwise {
        rows: Vec<BitVector>,
        scales: Vec<f32>,
        bias: Vec<f32>,
        threshold: f32,
    },
}

impl Kernel {
    fn dense(w: Matrix, bias: Vec<f32>) -> Kernel {
        let wt = w.transpose();
        let bias = if bias.is_empty() { vec![0.0; w.rows()] } else { bias };
        Kernel::Dense { w, wt, bias }
    }

    fn from_stored(stored: &QuantizedLayer) -> Result<Kernel> {
        match stored.scheme {
            QuantScheme::BitwiseBinary => {
                let codes = stored.packed.unpack()?;
                let rows = codes
                    .chunks(stored.in_dim.max(1))
                    .take(stored.out_dim)
                    .map(|r| BitVector::from_bits(&r.iter().map(|&c| c > 0).collect::<Vec<_>>()))
                    .collect();
                let bias = if stored.bias.is_empty() {
                    vec![0.0; stored.out_dim]
                } else {
                    stored.bias.clone()
                };
                Ok(Kernel::Bitwise {
                    rows,
                    scales: stored.scales.clone(),
                    bias,
                    threshold: stored.threshold,
                })
            }
            _ => Ok(Kernel::dense(stored.dequantize()?, stored.bias.clone())),
        }
    }

    fn forward(&self, x: &Matrix) -> Result<Matrix> {
        match self {
            Kernel::Dense { wt, bias, .. } => {
                let mut out = x.matmul(wt)?;
                for r in 0..out.rows() {
                    for (o, b) in out.row_mut(r).iter_mut().zip(bias) {
                        *o += b;
                    }
                }
                Ok(out)
            }
            Kernel::Bitwise {
                rows,
                scales,
                bias,
                threshold,
            } => {
                let in_dim = rows.first().map_or(x.cols(), BitVector::len);
                if x.cols() != in_dim {
                    return Err(Error::shape(
                        format!("input {}x{}", x.rows(), x.cols()),
                        format!("binary layer of width {in_dim}"),
                    ));
                }
                let mut out = Matrix::zeros(x.rows(), rows.len());
                for r in 0..x.rows() {
                    let xb = bitwise::binarize(x.row(r), *threshold);
                    let y = bitwise::scaled_bitwise_affine(&xb, rows, scales, bias)?;
                    out.row_mut(r).copy_from_slice(&y);
                }
                Ok(out)
            }
        }
    }
}

/// One affine layer.
#[derive(Clone, Debug)]
pub struct Layer {
    scheme: QuantScheme,
    in_dim: usize,
    out_dim: usize,
    shadow: Option<Shadow>,
    stored: QuantizedLayer,
    kernel: Kernel,
    /// Float kernel used while training binarized (post-training) layers.
    float_kernel: Option<Kernel>,
    /// `false` where the straight-through gradient is blocked.
    ste_mask: Option<Vec<bool>>,
}

impl Layer {
    /// Xavier-uniform weights, zero bias.
    pub fn xavier(in_dim: usize, out_dim: usize, scheme: QuantScheme, rng: &mut Rng) -> Result<Layer> {
        let bound = (6.0 / (in_dim + out_dim) as f32).sqrt();
        let data = (0..in_dim * out_dim)
            .map(|_| rng.uniform_range(-bound, bound))
            .collect();
        Layer::from_weights(Matrix::from_vec(out_dim, in_dim, data)?, vec![0.0; out_dim], scheme)
    }

    /// Trainable layer from explicit `out × in` weights.
    pub fn from_weights(weight: Matrix, bias: Vec<f32>, scheme: QuantScheme) -> Result<Layer> {
        let (out_dim, in_dim) = weight.shape();
        if bias.len() != out_dim {
            return Err(Error::shape(format!("{out_dim} outputs"), format!("bias of {}", bias.len())));
        }
        let mean_abs = if weight.is_empty() {
            0.0
        } else {
            weight.as_slice().iter().map(|v| v.abs()).sum::<f32>() / weight.len() as f32
        };
        let tau = TERNARY_INIT_RATIO * mean_abs;
        let alphas = (0..out_dim)
            .map(|r| {
                let active: Vec<f32> = weight.row(r).iter().map(|v| v.abs()).filter(|&a| a > tau).collect();
                if active.is_empty() {
                    tau.max(1e-8)
                } else {
                    active.iter().sum::<f32>() / active.len() as f32
                }
            })
            .collect();
        let shadow = Shadow {
            weight,
            bias,
            alphas,
            tau,
            act_level: 1.0,
        };
        let mut layer = Layer {
            scheme,
            in_dim,
            out_dim,
            stored: QuantizedLayer::float32(&Matrix::zeros(0, 0), vec![])?,
            kernel: Kernel::dense(Matrix::zeros(0, 0), vec![]),
            float_kernel: None,
            ste_mask: None,
            shadow: Some(shadow),
        };
        layer.refresh()?;
        Ok(layer)
    }

    /// Inference-only layer restored from its stored form.
    pub fn frozen(stored: QuantizedLayer) -> Result<Layer> {
        stored.validate()?;
        let kernel = Kernel::from_stored(&stored)?;
        Ok(Layer {
            scheme: stored.scheme,
            in_dim: stored.in_dim,
            out_dim: stored.out_dim,
            shadow: None,
            stored,
            kernel,
            float_kernel: None,
            ste_mask: None,
        })
    }

    pub fn scheme(&self) -> QuantScheme {
        self.scheme
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn stored(&self) -> &QuantizedLayer {
        &self.stored
    }

    pub fn is_trainable(&self) -> bool {
        self.shadow.is_some()
    }

    /// Weights the forward pass actually uses (`out × in`), for dense kernels.
    pub fn effective_weights(&self) -> Option<&Matrix> {
        match &self.kernel {
            Kernel::Dense { w, .. } => Some(w),
            Kernel::Bitwise { .. } => None,
        }
    }

    pub fn shadow_weights(&self) -> Option<&Matrix> {
        self.shadow.as_ref().map(|s| &s.weight)
    }

    /// Re-quantizes the shadow parameters into the stored form and kernel.
    pub fn refresh(&mut self) -> Result<()> {
        let Some(sh) = &self.shadow else {
            return Ok(());
        };
        self.ste_mask = None;
        self.float_kernel = None;
        self.stored = match self.scheme {
            QuantScheme::Float32 => QuantizedLayer::float32(&sh.weight, sh.bias.clone())?,
            QuantScheme::BitLinear(k) => {
                let q = QuantizedLayer::bitlinear(&sh.weight, k, sh.bias.clone())?;
                if k.get() > 1 {
                    let (s, mu) = (q.scales[0], q.mean);
                    let (lo, hi) = (k.qmin(), k.qmax());
                    let codes = q.packed.unpack()?;
                    // Only codes at the range ends can have been clipped.
                    let mask: Vec<bool> = sh
                        .weight
                        .as_slice()
                        .iter()
                        .zip(&codes)
                        .map(|(&v, &c)| (c != lo && c != hi) || bitlinear_raw(v, mu, s) == c as f64)
                        .collect();
                    if mask.iter().any(|m| !m) {
                        self.ste_mask = Some(mask);
                    }
                }
                q
            }
            QuantScheme::Ternary => {
                QuantizedLayer::ternary(&sh.weight, sh.tau, sh.alphas.clone(), sh.bias.clone())?
            }
            QuantScheme::BitwiseBinary => {
                self.float_kernel = Some(Kernel::dense(sh.weight.clone(), sh.bias.clone()));
                binarized_layer(&sh.weight, &sh.bias, sh.act_level, DEFAULT_THRESHOLD)?
            }
        };
        self.kernel = match self.scheme {
            // Dense kernels reuse the shadow directly for float layers.
            QuantScheme::Float32 => Kernel::dense(sh.weight.clone(), sh.bias.clone()),
            _ => Kernel::from_stored(&self.stored)?,
        };
        Ok(())
    }

    fn set_act_level(&mut self, level: f32) -> Result<()> {
        if let Some(sh) = &mut self.shadow {
            sh.act_level = level;
        }
        self.refresh()
    }

    fn train_kernel_ref(&self, bypass: bool) -> TrainKernel<'_> {
        if let Some(k) = &self.float_kernel {
            return TrainKernel::Borrowed(k);
        }
        if bypass {
            if let Some(sh) = &self.shadow {
                return TrainKernel::Owned(Kernel::dense(sh.weight.clone(), sh.bias.clone()));
            }
        }
        TrainKernel::Borrowed(&self.kernel)
    }

    /// Parameter tensors in a fixed order: weight, bias, then for ternary
    /// layers the channel scales and the threshold.
    fn param_count_tensors(&self) -> usize {
        if self.scheme == QuantScheme::Ternary {
            4
        } else {
            2
        }
    }
}

enum TrainKernel<'a> {
    Borrowed(&'a Kernel),
    Owned(Kernel),
}

impl TrainKernel<'_> {
    fn get(&self) -> &Kernel {
        match self {
            TrainKernel::Borrowed(k) => k,
            TrainKernel::Owned(k) => k,
        }
    }
}

/// Post-training binarization of `w` (`out × in`): weight bits are signs,
/// inputs are active above `threshold` and approximated as `level` when
/// active. Folding `W x ≈ α β (dot(s_w, s_x) + Σ s_w) / 2` with
/// `dot = −2 y` gives a per-channel scale `−α_j β` and a bias offset
/// `α_j β Σ_k s_{w,jk} / 2`.
pub fn binarized_layer(w: &Matrix, bias: &[f32], level: f32, threshold: f32) -> Result<QuantizedLayer> {
    let (out_dim, in_dim) = w.shape();
    let mut codes = Vec::with_capacity(out_dim * in_dim);
    let mut scales = Vec::with_capacity(out_dim);
    let mut folded = Vec::with_capacity(out_dim);
    for j in 0..out_dim {
        let row = w.row(j);
        let alpha = if in_dim == 0 {
            0.0
        } else {
            row.iter().map(|v| v.abs()).sum::<f32>() / in_dim as f32
        };
        let mut signed_sum = 0i64;
        for &v in row {
            let c = if v >= 0.0 { 1 } else { -1 };
            signed_sum += c as i64;
            codes.push(c);
        }
        scales.push(-alpha * level);
        let b = bias.get(j).copied().unwrap_or(0.0);
        folded.push(b + alpha * level * signed_sum as f32 / 2.0);
    }
    let stored = QuantizedLayer {
        in_dim,
        out_dim,
        scheme: QuantScheme::BitwiseBinary,
        packed: crate::quant::PackedWeights::pack(&codes, 1)?,
        scales,
        mean: 0.0,
        threshold,
        bias: folded,
    };
    stored.validate()?;
    Ok(stored)
}

/// Gradients, one flat vector per parameter tensor (see
/// [`Mlp::parameters`]).
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients(pub Vec<Vec<f32>>);

impl Gradients {
    pub fn global_norm(&self) -> f64 {
        self.0
            .iter()
            .flat_map(|g| g.iter())
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales so the global norm is at most `max_norm`; returns the norm
    /// after clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            let factor = (max_norm / norm) as f32;
            for g in &mut self.0 {
                for v in g.iter_mut() {
                    *v *= factor;
                }
            }
            self.global_norm()
        } else {
            norm
        }
    }

    pub fn extend(&mut self, other: Gradients) {
        self.0.extend(other.0);
    }
}

/// Activations recorded during a training forward pass.
pub struct Trace {
    /// Input to each layer (after ReLU and dropout of the previous one).
    inputs: Vec<Matrix>,
    /// Pre-activation output of each hidden layer.
    pre: Vec<Matrix>,
    /// Inverted-dropout multipliers applied after each hidden ReLU.
    masks: Vec<Option<Vec<f32>>>,
    pub logits: Matrix,
}

/// Stack of affine layers with ReLU between them. `dropout[i]` is applied
/// after the ReLU of hidden layer `i`.
#[derive(Clone, Debug)]
pub struct Mlp {
    layers: Vec<Layer>,
    dropout: Vec<f32>,
}

impl Mlp {
    pub fn new(layers: Vec<Layer>, dropout: Vec<f32>) -> Result<Mlp> {
        if layers.is_empty() {
            return Err(Error::param("layers", "at least one layer required"));
        }
        for pair in layers.windows(2) {
            if pair[0].out_dim != pair[1].in_dim {
                return Err(Error::shape(
                    format!("layer out {}", pair[0].out_dim),
                    format!("next layer in {}", pair[1].in_dim),
                ));
            }
        }
        if dropout.len() != layers.len() - 1 {
            return Err(Error::param(
                "dropout",
                format!("{} rates for {} hidden layers", dropout.len(), layers.len() - 1),
            ));
        }
        if let Some(p) = dropout.iter().find(|p| !(0.0..1.0).contains(*p)) {
            return Err(Error::param("dropout", format!("rate {p} outside [0, 1)")));
        }
        Ok(Mlp { layers, dropout })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn dropout(&self) -> &[f32] {
        &self.dropout
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    pub fn is_trainable(&self) -> bool {
        self.layers.iter().all(Layer::is_trainable)
    }

    pub fn stored_layers(&self) -> Vec<QuantizedLayer> {
        self.layers.iter().map(|l| l.stored.clone()).collect()
    }

    pub fn refresh(&mut self) -> Result<()> {
        self.layers.iter_mut().try_for_each(Layer::refresh)
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.in_dim() {
            return Err(Error::shape(
                format!("input {}x{}", x.rows(), x.cols()),
                format!("network input width {}", self.in_dim()),
            ));
        }
        Ok(())
    }

    /// Batched forward pass. `DropoutOn` requires `rng`.
    pub fn forward_batch(&self, x: &Matrix, mode: ForwardMode, mut rng: Option<&mut Rng>) -> Result<Matrix> {
        self.check_input(x)?;
        if mode == ForwardMode::DropoutOn && rng.is_none() {
            return Err(Error::param("rng", "dropout forward needs a generator"));
        }
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.kernel.forward(&h)?;
            if i < last {
                relu_in_place(&mut h);
                if mode == ForwardMode::DropoutOn {
                    let r = rng.as_deref_mut().expect("checked above");
                    if let Some(mask) = dropout_mask(h.len(), self.dropout[i], r) {
                        apply_mask(&mut h, &mask);
                    }
                }
            }
        }
        Ok(h)
    }

    /// Training forward pass recording what backprop needs.
    pub fn train_forward(&self, x: &Matrix, rng: Option<&mut Rng>, bypass_quantization: bool) -> Result<Trace> {
        self.check_input(x)?;
        let mut rng = rng;
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(last);
        let mut masks = Vec::with_capacity(last);
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.train_kernel_ref(bypass_quantization).get().forward(&h)?;
            inputs.push(h);
            if i == last {
                return Ok(Trace {
                    inputs,
                    pre,
                    masks,
                    logits: z,
                });
            }
            let mut a = z.clone();
            relu_in_place(&mut a);
            let mask = match rng.as_deref_mut() {
                Some(r) => dropout_mask(a.len(), self.dropout[i], r),
                None => None,
            };
            if let Some(m) = &mask {
                apply_mask(&mut a, m);
            }
            pre.push(z);
            masks.push(mask);
            h = a;
        }
        unreachable!("loop returns at the last layer")
    }

    /// Backpropagates `dlogits` through a recorded trace.
    pub fn backward(&self, trace: &Trace, dlogits: &Matrix, bypass_quantization: bool) -> Result<Gradients> {
        if dlogits.shape() != trace.logits.shape() {
            return Err(Error::shape(
                format!("logits {:?}", trace.logits.shape()),
                format!("dlogits {:?}", dlogits.shape()),
            ));
        }
        let mut per_layer: Vec<Vec<Vec<f32>>> = vec![Vec::new(); self.layers.len()];
        let mut dz = dlogits.clone();
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            let sh = layer
                .shadow
                .as_ref()
                .ok_or_else(|| Error::Config("cannot train a frozen (loaded) network".into()))?;
            let x = &trace.inputs[i];
            let dw_eff = dz.matmul_tn(x)?; // out × in
            let mut db = vec![0.0f32; layer.out_dim];
            for r in 0..dz.rows() {
                for (d, g) in db.iter_mut().zip(dz.row(r)) {
                    *d += g;
                }
            }
            if i > 0 {
                let train_kernel = layer.train_kernel_ref(bypass_quantization);
                let w = match train_kernel.get() {
                    Kernel::Dense { w, .. } => w,
                    Kernel::Bitwise { .. } => unreachable!("binarized layers train in float"),
                };
                let mut dx = dz.matmul(w)?;
                let z = &trace.pre[i - 1];
                for (d, &zv) in dx.as_mut_slice().iter_mut().zip(z.as_slice()) {
                    if zv <= 0.0 {
                        *d = 0.0;
                    }
                }
                if let Some(m) = &trace.masks[i - 1] {
                    apply_mask(&mut dx, m);
                }
                dz = dx;
            }
            let quantized = !bypass_quantization;
            let mut grads = Vec::with_capacity(layer.param_count_tensors());
            let mut dw = dw_eff.as_slice().to_vec();
            if quantized && layer.scheme == QuantScheme::Ternary {
                let cols = layer.in_dim;
                let mut dalpha = vec![0.0f32; layer.out_dim];
                let mut dtau = 0.0f64;
                let width = TERNARY_SURROGATE_WIDTH;
                for (idx, (&g, &w)) in dw_eff.as_slice().iter().zip(sh.weight.as_slice()).enumerate() {
                    let row = idx / cols;
                    let t = ternary_code(w, sh.tau) as f32;
                    dalpha[row] += g * t;
                    // d/dτ of sign(w)·σ((|w| − τ)/width)
                    let u = (w.abs() - sh.tau) / width;
                    let sig = 1.0 / (1.0 + (-u).exp());
                    let sign = if w >= 0.0 { 1.0 } else { -1.0 };
                    dtau += (g * sh.alphas[row] * -sign * sig * (1.0 - sig) / width) as f64;
                }
                grads.push(dw);
                grads.push(db);
                grads.push(dalpha);
                grads.push(vec![dtau as f32]);
            } else {
                if quantized {
                    if let Some(mask) = &layer.ste_mask {
                        for (d, &keep) in dw.iter_mut().zip(mask) {
                            if !keep {
                                *d = 0.0;
                            }
                        }
                    }
                }
                grads.push(dw);
                grads.push(db);
                if layer.scheme == QuantScheme::Ternary {
                    grads.push(vec![0.0; layer.out_dim]);
                    grads.push(vec![0.0]);
                }
            }
            per_layer[i] = grads;
        }
        Ok(Gradients(per_layer.into_iter().flatten().collect()))
    }

    /// Mutable views of every parameter tensor, in gradient order, paired
    /// with whether weight decay applies.
    pub fn parameters_mut(&mut self) -> Result<Vec<(&mut [f32], bool)>> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            let ternary = layer.scheme == QuantScheme::Ternary;
            let sh = layer
                .shadow
                .as_mut()
                .ok_or_else(|| Error::Config("cannot train a frozen (loaded) network".into()))?;
            out.push((sh.weight.as_mut_slice(), true));
            out.push((sh.bias.as_mut_slice(), true));
            if ternary {
                out.push((sh.alphas.as_mut_slice(), false));
                out.push((std::slice::from_mut(&mut sh.tau), false));
            }
        }
        Ok(out)
    }

    /// Copies of every parameter tensor, in gradient order.
    pub fn parameters(&self) -> Result<Vec<Vec<f32>>> {
        let mut out = Vec::new();
        for layer in &self.layers {
            let sh = layer
                .shadow
                .as_ref()
                .ok_or_else(|| Error::Config("frozen network has no trainable parameters".into()))?;
            out.push(sh.weight.as_slice().to_vec());
            out.push(sh.bias.clone());
            if layer.scheme == QuantScheme::Ternary {
                out.push(sh.alphas.clone());
                out.push(vec![sh.tau]);
            }
        }
        Ok(out)
    }

    pub fn set_parameters(&mut self, params: &[Vec<f32>]) -> Result<()> {
        {
            let mut views = self.parameters_mut()?;
            if views.len() != params.len() {
                return Err(Error::shape(format!("{} tensors", views.len()), format!("{} given", params.len())));
            }
            for ((dst, _), src) in views.iter_mut().zip(params) {
                if dst.len() != src.len() {
                    return Err(Error::shape(format!("tensor of {}", dst.len()), format!("{}", src.len())));
                }
                dst.copy_from_slice(src);
            }
        }
        self.sanitize();
        self.refresh()
    }

    /// Keeps ternary thresholds non-negative and channel scales positive.
    pub(crate) fn sanitize(&mut self) {
        for layer in &mut self.layers {
            if let Some(sh) = &mut layer.shadow {
                sh.tau = sh.tau.max(0.0);
                for a in &mut sh.alphas {
                    *a = a.max(1e-8);
                }
            }
        }
    }

    /// Sets the activation level of binarized layers from data: for each such
    /// layer, the mean of its inputs above the binarization threshold,
    /// measured through the already-calibrated preceding layers.
    pub fn calibrate_binarized(&mut self, x: &Matrix) -> Result<()> {
        self.check_input(x)?;
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for i in 0..self.layers.len() {
            if self.layers[i].scheme == QuantScheme::BitwiseBinary && self.layers[i].is_trainable() {
                let active: Vec<f64> = h
                    .as_slice()
                    .iter()
                    .filter(|&&v| v > DEFAULT_THRESHOLD)
                    .map(|&v| v as f64)
                    .collect();
                let level = if active.is_empty() {
                    1.0
                } else {
                    (active.iter().sum::<f64>() / active.len() as f64) as f32
                };
                self.layers[i].set_act_level(level)?;
            }
            h = self.layers[i].kernel.forward(&h)?;
            if i < last {
                relu_in_place(&mut h);
            }
        }
        Ok(())
    }
}

fn relu_in_place(m: &mut Matrix) {
    for v in m.as_mut_slice() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Inverted dropout multipliers: `0` with probability `p`, else `1/(1−p)`.
fn dropout_mask(n: usize, p: f32, rng: &mut Rng) -> Option<Vec<f32>> {
    if p <= 0.0 {
        return None;
    }
    let keep = 1.0 / (1.0 - p);
    Some(
        (0..n)
            .map(|_| if rng.uniform_f32() < p { 0.0 } else { keep })
            .collect(),
    )
}

fn apply_mask(m: &mut Matrix, mask: &[f32]) {
    for (v, k) in m.as_mut_slice().iter_mut().zip(mask) {
        *v *= k;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerKind {
    /// Decoupled weight decay.
    AdamW { lr: f32, weight_decay: f32 },
    /// L2 penalty added to the gradient.
    Adam { lr: f32, weight_decay: f32 },
}

impl OptimizerKind {
    pub fn lr(&self) -> f32 {
        match *self {
            OptimizerKind::AdamW { lr, .. } | OptimizerKind::Adam { lr, .. } => lr,
        }
    }
}

/// Adam / AdamW with `β = (0.9, 0.999)`, `ε = 1e-8`.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    step: u32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Optimizer {
    const BETA1: f32 = 0.9;
    const BETA2: f32 = 0.999;
    const EPS: f32 = 1e-8;

    pub fn new(kind: OptimizerKind) -> Self {
        Optimizer {
            kind,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, params: Vec<(&mut [f32], bool)>, grads: &Gradients) -> Result<()> {
        if params.len() != grads.0.len() {
            return Err(Error::Invariant(format!(
                "{} parameter tensors but {} gradients",
                params.len(),
                grads.0.len()
            )));
        }
        if self.m.is_empty() {
            self.m = grads.0.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - Self::BETA1.powi(t);
        let bc2 = 1.0 - Self::BETA2.powi(t);
        let (lr, wd, decoupled) = match self.kind {
            OptimizerKind::AdamW { lr, weight_decay } => (lr, weight_decay, true),
            OptimizerKind::Adam { lr, weight_decay } => (lr, weight_decay, false),
        };
        for (((p, decay), g), (m, v)) in params
            .into_iter()
            .zip(&grads.0)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            if p.len() != g.len() {
                return Err(Error::Invariant("gradient shape drifted from parameters".into()));
            }
            for i in 0..p.len() {
                let mut gi = g[i];
                if decay && !decoupled {
                    gi += wd * p[i];
                }
                if decay && decoupled {
                    p[i] -= lr * wd * p[i];
                }
                m[i] = Self::BETA1 * m[i] + (1.0 - Self::BETA1) * gi;
                v[i] = Self::BETA2 * v[i] + (1.0 - Self::BETA2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= lr * mhat / (vhat.sqrt() + Self::EPS);
            }
        }
        Ok(())
    }
}

/// Class-weighted mean cross-entropy and its gradient w.r.t. the logits:
/// `L = Σ_b w_{y_b} · CE_b / Σ_b w_{y_b}`.
pub fn weighted_cross_entropy(logits: &Matrix, labels: &[usize], class_weights: &[f32]) -> Result<(f32, Matrix)> {
    if logits.rows() != labels.len() {
        return Err(Error::shape(format!("{} logit rows", logits.rows()), format!("{} labels", labels.len())));
    }
    let c = logits.cols();
    if class_weights.len() != c {
        return Err(Error::shape(format!("{c} classes"), format!("{} class weights", class_weights.len())));
    }
    let total_w: f64 = labels.iter().map(|&y| class_weights[y] as f64).sum();
    if total_w <= 0.0 {
        return Err(Error::Data("batch carries zero total class weight".into()));
    }
    let mut loss = 0.0f64;
    let mut grad = Matrix::zeros(logits.rows(), c);
    for (r, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(Error::Data(format!("label {y} outside 0..{c}")));
        }
        let row = logits.row(r);
        let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
        let exps: Vec<f64> = row.iter().map(|&v| (v as f64 - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        let w = class_weights[y] as f64;
        loss += w * (sum.ln() - (row[y] as f64 - max));
        let g = grad.row_mut(r);
        for k in 0..c {
            let p = exps[k] / sum;
            let target = if k == y { 1.0 } else { 0.0 };
            g[k] = (w * (p - target) / total_w) as f32;
        }
    }
    Ok(((loss / total_w) as f32, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_mlp(scheme: QuantScheme, seed: u64) -> Mlp {
        let mut rng = Rng::new(seed);
        let layers = vec![
            Layer::xavier(6, 5, scheme, &mut rng).unwrap(),
            Layer::xavier(5, 3, scheme, &mut rng).unwrap(),
        ];
        Mlp::new(layers, vec![0.5]).unwrap()
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let net = small_mlp(QuantScheme::bitlinear(4).unwrap(), 1);
        let x = Matrix::from_vec(2, 6, (0..12).map(|i| i as f32 * 0.1 - 0.5).collect()).unwrap();
        let a = net.forward_batch(&x, ForwardMode::Eval, None).unwrap();
        let b = net.forward_batch(&x, ForwardMode::Eval, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn dropout_forward_requires_rng() {
        let net = small_mlp(QuantScheme::Float32, 1);
        let x = Matrix::zeros(1, 6);
        assert!(net.forward_batch(&x, ForwardMode::DropoutOn, None).is_err());
    }

    #[test]
    fn clipping_bounds_global_norm() {
        let mut g = Gradients(vec![vec![3.0, 4.0], vec![12.0]]);
        assert!((g.global_norm() - 13.0).abs() < 1e-9);
        let after = g.clip_global_norm(1.0);
        assert!(after <= 1.0 + 1e-6);
        let mut small = Gradients(vec![vec![0.1]]);
        assert!((small.clip_global_norm(1.0) - 0.1).abs() < 1e-7);
        assert_eq!(small.0[0][0], 0.1);
    }

    #[test]
    fn cross_entropy_at_uniform_logits_is_ln_c() {
        let logits = Matrix::zeros(4, 5);
        let (loss, grad) = weighted_cross_entropy(&logits, &[0, 1, 2, 3], &[1.0, 2.0, 0.5, 1.0, 1.0]).unwrap();
        assert!((loss - 5f32.ln()).abs() < 1e-6);
        // each row's gradient sums to zero
        for r in 0..4 {
            assert!(grad.row(r).iter().sum::<f32>().abs() < 1e-6);
        }
    }

    #[test]
    fn binarized_layer_matches_float_on_two_level_inputs() {
        // Inputs exactly in {0, β} and weights exactly ±α are reproduced.
        let w = Matrix::from_rows(&[vec![0.5, -0.5, 0.5, 0.5], vec![-0.5, -0.5, 0.5, -0.5]]).unwrap();
        let bias = vec![0.1, -0.2];
        let layer = binarized_layer(&w, &bias, 2.0, DEFAULT_THRESHOLD).unwrap();
        let kernel = Kernel::from_stored(&layer).unwrap();
        let x = Matrix::from_rows(&[vec![2.0, 0.0, 2.0, 0.0], vec![0.0, 2.0, 2.0, 2.0]]).unwrap();
        let got = kernel.forward(&x).unwrap();
        let want = Kernel::dense(w, bias).forward(&x).unwrap();
        for (a, b) in got.as_slice().iter().zip(want.as_slice()) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn ste_is_identity_for_float_layers() {
        let net = small_mlp(QuantScheme::Float32, 3);
        let x = Matrix::from_vec(3, 6, (0..18).map(|i| (i as f32 * 0.37).sin()).collect()).unwrap();
        let t1 = net.train_forward(&x, None, false).unwrap();
        let t2 = net.train_forward(&x, None, true).unwrap();
        assert_eq!(t1.logits, t2.logits);
        let d = Matrix::from_vec(3, 3, vec![0.1; 9]).unwrap();
        assert_eq!(net.backward(&t1, &d, false).unwrap(), net.backward(&t2, &d, true).unwrap());
    }

    #[test]
    fn frozen_layers_reject_training() {
        let net = small_mlp(QuantScheme::Ternary, 4);
        let frozen = Mlp::new(
            net.stored_layers().into_iter().map(|l| Layer::frozen(l).unwrap()).collect(),
            vec![0.5],
        )
        .unwrap();
        let x = Matrix::zeros(1, 6);
        assert_eq!(
            net.forward_batch(&x, ForwardMode::Eval, None).unwrap(),
            frozen.forward_batch(&x, ForwardMode::Eval, None).unwrap()
        );
        let t = frozen.train_forward(&x, None, false).unwrap();
        assert!(frozen.backward(&t, &Matrix::zeros(1, 3), false).is_err());
    }
}
