//! Gating network, top-k routing, Monte Carlo dropout uncertainty and the
//! curiosity bonus.

use serde::{Deserialize, Serialize};

use crate::audio::EMBEDDING_DIM;
use crate::bench::Inference;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::expert::{calibrate_if_binarized, check_training_data, macro_f1, EpochRecord, ExpertNet, TrainConfig, TrainHistory};
use crate::nn::{weighted_cross_entropy, ForwardMode, Gradients, Layer, Mlp, Optimizer};
use crate::quant::{QuantScheme, QuantizedLayer};
use crate::tensor::{argmax, entropy, kl_divergence, softmax_temp, Matrix, ProbVector, Rng};

pub const ROUTER_HIDDEN: [usize; 2] = [128, 64];
pub const ROUTER_DROPOUT: f32 = 0.2;
pub const DEFAULT_MC_SAMPLES: usize = 10;
pub const DEFAULT_BALANCE: f32 = 1e-3;
/// Additive smoothing applied to expert class distributions when a KL term
/// would otherwise be infinite.
pub const KL_SMOOTHING: f64 = 1e-9;

/// `1024 → 128 → ReLU → dropout → 64 → ReLU → N`, float weights.
#[derive(Clone, Debug)]
pub struct RouterNet {
    mlp: Mlp,
}

impl RouterNet {
    pub fn new(num_experts: usize, rng: &mut Rng) -> Result<Self> {
        Self::with_dropout(num_experts, ROUTER_DROPOUT, rng)
    }

    pub fn with_dropout(num_experts: usize, dropout: f32, rng: &mut Rng) -> Result<Self> {
        if num_experts == 0 {
            return Err(Error::param("num_experts", "need at least one expert"));
        }
        let dims = [EMBEDDING_DIM, ROUTER_HIDDEN[0], ROUTER_HIDDEN[1], num_experts];
        let layers = dims
            .windows(2)
            .map(|d| Layer::xavier(d[0], d[1], QuantScheme::Float32, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(RouterNet {
            mlp: Mlp::new(layers, vec![dropout, 0.0])?,
        })
    }

    /// Router from explicit layers (any widths).
    pub fn from_layers(layers: Vec<Layer>, dropout: Vec<f32>) -> Result<Self> {
        Ok(RouterNet {
            mlp: Mlp::new(layers, dropout)?,
        })
    }

    pub fn from_stored(stored: Vec<QuantizedLayer>, dropout: Vec<f32>) -> Result<Self> {
        let layers = stored.into_iter().map(Layer::frozen).collect::<Result<Vec<_>>>()?;
        Self::from_layers(layers, dropout)
    }

    pub fn num_experts(&self) -> usize {
        self.mlp.out_dim()
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn mlp_mut(&mut self) -> &mut Mlp {
        &mut self.mlp
    }

    pub fn logits(&self, z: &[f32]) -> Result<Vec<f32>> {
        let x = Matrix::from_vec(1, z.len(), z.to_vec())?;
        Ok(self.mlp.forward_batch(&x, ForwardMode::Eval, None)?.into_vec())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoutingMode {
    #[default]
    Uniform,
    Curious,
}

impl std::str::FromStr for RoutingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(RoutingMode::Uniform),
            "curious" | "curiosity" => Ok(RoutingMode::Curious),
            _ => Err(Error::Config(format!("unknown routing mode `{s}` (uniform | curious)"))),
        }
    }
}

/// What the curiosity KL is measured on.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CuriosityTarget {
    /// `KL(d_i ‖ p̄)` between each expert's class distribution and their mean.
    #[default]
    ClassDistributions,
    /// Per expert, the Bernoulli KL between each MC-dropout gate probability
    /// and the MC mean, averaged over samples.
    GateSamples,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RoutingConfig {
    pub k: usize,
    pub temperature: f64,
    pub alpha_curiosity: f64,
    pub alpha_balance: f32,
    pub mc_samples: usize,
    pub curiosity_target: CuriosityTarget,
    /// When set, the bonus only applies if the MC gate entropy reaches this
    /// value.
    pub entropy_gate: Option<f64>,
}

impl Default for RoutingConfig {
    fn default() -> Self {
        RoutingConfig {
            k: 1,
            temperature: 1.0,
            alpha_curiosity: 1.0,
            alpha_balance: DEFAULT_BALANCE,
            mc_samples: DEFAULT_MC_SAMPLES,
            curiosity_target: CuriosityTarget::ClassDistributions,
            entropy_gate: None,
        }
    }
}

impl RoutingConfig {
    pub fn validate(&self, num_experts: usize) -> Result<()> {
        if self.k < 1 || self.k > num_experts {
            return Err(Error::param("k", format!("{} outside 1..={num_experts}", self.k)));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::param("temperature", "must be positive"));
        }
        if !(self.alpha_curiosity >= 0.0) {
            return Err(Error::param("alpha_curiosity", "must be non-negative"));
        }
        if !(self.alpha_balance >= 0.0) {
            return Err(Error::param("alpha_balance", "must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct MoEModel {
    experts: Vec<ExpertNet>,
    router: RouterNet,
    config: RoutingConfig,
}

/// Selected experts in descending probability order with their weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub experts: Vec<usize>,
    pub weights: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingDecision {
    pub mode: RoutingMode,
    pub gate_logits: Vec<f32>,
    pub base_probs: ProbVector,
    /// Curiosity fields are `None` on the uniform path.
    pub expert_class_dists: Option<Vec<ProbVector>>,
    pub mean_dist: Option<ProbVector>,
    /// Entropy of the mean expert class distribution.
    pub predictive_entropy: Option<f64>,
    /// Entropy of the MC-dropout mean gate distribution.
    pub epistemic_entropy: Option<f64>,
    pub kl_per_expert: Option<Vec<f64>>,
    pub curious_probs: Option<ProbVector>,
    pub selected: Selection,
    pub mc_samples: usize,
    /// Whether class distributions were smoothed to keep KL finite.
    pub kl_smoothed: bool,
    /// Whether the entropy gate switched the bonus off.
    pub bonus_gated: bool,
}

impl RoutingDecision {
    /// The probabilities selection was made from.
    pub fn active_probs(&self) -> &ProbVector {
        self.curious_probs.as_ref().unwrap_or(&self.base_probs)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Uncertainty {
    pub mean_probs: ProbVector,
    pub entropy: f64,
    pub samples: Vec<ProbVector>,
}

/// Indices of the `k` largest values, descending; ties go to the lower index.
pub fn top_k(p: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..p.len()).collect();
    idx.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

fn select(p: &ProbVector, k: usize) -> Selection {
    let experts = top_k(p.as_slice(), k);
    let weights = experts.iter().map(|&i| p[i]).collect();
    Selection { experts, weights }
}

/// `p_i ∝ p_base,i · exp(α · kl_i)`. Returns `p_base` unchanged when every
/// multiplier is exactly 1.
pub fn curiosity_probs(p_base: &ProbVector, kl: &[f64], alpha: f64) -> Result<ProbVector> {
    if kl.len() != p_base.len() {
        return Err(Error::shape(format!("{} experts", p_base.len()), format!("{} KL terms", kl.len())));
    }
    if !(alpha >= 0.0) {
        return Err(Error::param("alpha_curiosity", "must be non-negative"));
    }
    let bonus: Vec<f64> = kl.iter().map(|&d| (alpha * d).exp()).collect();
    if bonus.iter().all(|&b| b == 1.0) {
        return Ok(p_base.clone());
    }
    // Work in log space so large bonuses cannot overflow.
    let logs: Vec<f64> = p_base
        .as_slice()
        .iter()
        .zip(kl)
        .map(|(&p, &d)| if p > 0.0 { p.ln() + alpha * d } else { f64::NEG_INFINITY })
        .collect();
    let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::Invariant("curiosity weights are not finite".into()));
    }
    let u: Vec<f64> = logs.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = u.iter().sum();
    ProbVector::new(u.iter().map(|v| v / sum).collect())
}

/// `N · Σ_i (importance_i − 1/N)²` with importance the mean probability.
pub fn load_balance_from_probs(probs: &[&ProbVector]) -> Result<f64> {
    let first = probs.first().ok_or_else(|| Error::Data("load balance of an empty batch".into()))?;
    let n = first.len();
    let mut imp = vec![0.0; n];
    for p in probs {
        if p.len() != n {
            return Err(Error::shape(format!("{n} experts"), format!("{} experts", p.len())));
        }
        for (a, v) in imp.iter_mut().zip(p.as_slice()) {
            *a += v;
        }
    }
    let target = 1.0 / n as f64;
    Ok(n as f64
        * imp
            .iter()
            .map(|s| (s / probs.len() as f64 - target).powi(2))
            .sum::<f64>())
}

pub fn load_balance_loss(decisions: &[RoutingDecision]) -> Result<f64> {
    let probs: Vec<&ProbVector> = decisions.iter().map(RoutingDecision::active_probs).collect();
    load_balance_from_probs(&probs)
}

fn class_dist(logits: &[f32]) -> Result<ProbVector> {
    softmax_temp(logits, 1.0)
}

fn smooth(p: &ProbVector) -> Result<ProbVector> {
    let c = p.len() as f64;
    ProbVector::new(p.as_slice().iter().map(|v| (v + KL_SMOOTHING) / (1.0 + c * KL_SMOOTHING)).collect())
}

fn bernoulli_kl(p: f64, q: f64) -> f64 {
    let term = |a: f64, b: f64| if a <= 0.0 { 0.0 } else { a * (a / b).ln() };
    (term(p, q) + term(1.0 - p, 1.0 - q)).max(0.0)
}

/// `y = Σ_{i ∈ selection} w_i · E_i`, accumulated in f64 in selection order.
fn combine(selection: &Selection, outputs: &[Option<Vec<f32>>], classes: usize) -> Result<Vec<f32>> {
    let mut y = vec![0.0f64; classes];
    for (&i, &w) in selection.experts.iter().zip(&selection.weights) {
        let e = outputs[i]
            .as_ref()
            .ok_or_else(|| Error::Invariant(format!("expert {i} selected but not evaluated")))?;
        for (a, &v) in y.iter_mut().zip(e) {
            *a += w * v as f64;
        }
    }
    Ok(y.into_iter().map(|v| v as f32).collect())
}

impl MoEModel {
    pub fn new(experts: Vec<ExpertNet>, router: RouterNet, config: RoutingConfig) -> Result<Self> {
        if experts.is_empty() {
            return Err(Error::param("experts", "need at least one expert"));
        }
        if router.num_experts() != experts.len() {
            return Err(Error::shape(
                format!("{} router outputs", router.num_experts()),
                format!("{} experts", experts.len()),
            ));
        }
        let classes = experts[0].num_classes();
        let in_dim = router.mlp.in_dim();
        for e in &experts {
            if e.num_classes() != classes {
                return Err(Error::shape(format!("{classes} classes"), format!("expert with {}", e.num_classes())));
            }
            if e.mlp().in_dim() != in_dim {
                return Err(Error::shape(format!("router input {in_dim}"), format!("expert input {}", e.mlp().in_dim())));
            }
        }
        config.validate(experts.len())?;
        Ok(MoEModel { experts, router, config })
    }

    pub fn experts(&self) -> &[ExpertNet] {
        &self.experts
    }

    pub fn router(&self) -> &RouterNet {
        &self.router
    }

    pub fn config(&self) -> &RoutingConfig {
        &self.config
    }

    pub fn set_config(&mut self, config: RoutingConfig) -> Result<()> {
        config.validate(self.experts.len())?;
        self.config = config;
        Ok(())
    }

    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn num_classes(&self) -> usize {
        self.experts[0].num_classes()
    }

    pub fn in_dim(&self) -> usize {
        self.router.mlp.in_dim()
    }

    fn check_input(&self, z: &[f32]) -> Result<()> {
        if z.len() != self.in_dim() {
            return Err(Error::shape(format!("input of {}", z.len()), format!("model input {}", self.in_dim())));
        }
        Ok(())
    }

    fn base_probs(&self, z: &[f32]) -> Result<(Vec<f32>, ProbVector)> {
        let logits = self.router.logits(z)?;
        let p = softmax_temp(&logits, self.config.temperature)?;
        Ok((logits, p))
    }

    /// Top-k routing on the deterministic gate probabilities; only the
    /// selected experts run.
    pub fn route_uniform(&self, z: &[f32]) -> Result<(Vec<f32>, RoutingDecision)> {
        self.check_input(z)?;
        let (gate_logits, base_probs) = self.base_probs(z)?;
        let selected = select(&base_probs, self.config.k);
        let mut outputs = vec![None; self.num_experts()];
        for &i in &selected.experts {
            outputs[i] = Some(self.experts[i].forward(z, ForwardMode::Eval, None)?);
        }
        let y = combine(&selected, &outputs, self.num_classes())?;
        Ok((
            y,
            RoutingDecision {
                mode: RoutingMode::Uniform,
                gate_logits,
                base_probs,
                expert_class_dists: None,
                mean_dist: None,
                predictive_entropy: None,
                epistemic_entropy: None,
                kl_per_expert: None,
                curious_probs: None,
                selected,
                mc_samples: 0,
                kl_smoothed: false,
                bonus_gated: false,
            },
        ))
    }

    /// MC-dropout gate distribution: mean of `mc_samples` stochastic passes
    /// and its entropy.
    pub fn estimate_uncertainty(&self, z: &[f32], rng: &mut Rng) -> Result<Uncertainty> {
        self.check_input(z)?;
        let m = self.config.mc_samples;
        if m < 2 {
            return Err(Error::param("mc_samples", format!("need at least 2, got {m}")));
        }
        let mut rows = Vec::with_capacity(m * z.len());
        for _ in 0..m {
            rows.extend_from_slice(z);
        }
        let x = Matrix::from_vec(m, z.len(), rows)?;
        let logits = self.router.mlp.forward_batch(&x, ForwardMode::DropoutOn, Some(rng))?;
        let samples = (0..m)
            .map(|r| softmax_temp(logits.row(r), self.config.temperature))
            .collect::<Result<Vec<_>>>()?;
        let n = self.num_experts();
        let mut mean = vec![0.0f64; n];
        for s in &samples {
            for (a, v) in mean.iter_mut().zip(s.as_slice()) {
                *a += v;
            }
        }
        let mean_probs = ProbVector::new(mean.iter().map(|v| v / m as f64).collect())?;
        Ok(Uncertainty {
            entropy: entropy(&mean_probs),
            mean_probs,
            samples,
        })
    }

    /// Evaluates every expert, applies the curiosity bonus to the gate
    /// probabilities, then selects top-k from the adjusted distribution.
    pub fn route_curious(&self, z: &[f32], rng: &mut Rng) -> Result<(Vec<f32>, RoutingDecision)> {
        self.check_input(z)?;
        let (gate_logits, base_probs) = self.base_probs(z)?;
        let outputs: Vec<Vec<f32>> = self
            .experts
            .iter()
            .map(|e| e.forward(z, ForwardMode::Eval, None))
            .collect::<Result<_>>()?;
        let mut dists = outputs.iter().map(|o| class_dist(o)).collect::<Result<Vec<_>>>()?;
        let n = self.num_experts();
        let classes = self.num_classes();
        // Accumulated as offsets from the first distribution, so that
        // identical distributions average to exactly themselves.
        let base = dists[0].as_slice();
        let mut offset = vec![0.0f64; classes];
        for d in &dists[1..] {
            for ((a, v), b) in offset.iter_mut().zip(d.as_slice()).zip(base) {
                *a += v - b;
            }
        }
        let mean_dist = ProbVector::new(base.iter().zip(&offset).map(|(b, o)| (b + o / n as f64).max(0.0)).collect())?;
        let uncertainty = self.estimate_uncertainty(z, rng)?;

        let mut kl_smoothed = false;
        let kl: Vec<f64> = match self.config.curiosity_target {
            CuriosityTarget::ClassDistributions => {
                let mut out = Vec::with_capacity(n);
                for d in &mut dists {
                    match kl_divergence(d, &mean_dist) {
                        Ok(v) => out.push(v),
                        Err(Error::InfiniteDivergence { .. }) => {
                            *d = smooth(d)?;
                            kl_smoothed = true;
                            out.push(kl_divergence(d, &smooth(&mean_dist)?)?);
                        }
                        Err(e) => return Err(e),
                    }
                }
                out
            }
            CuriosityTarget::GateSamples => (0..n)
                .map(|i| {
                    let q = uncertainty.mean_probs[i];
                    uncertainty.samples.iter().map(|s| bernoulli_kl(s[i], q)).sum::<f64>()
                        / uncertainty.samples.len() as f64
                })
                .collect(),
        };
        let bonus_gated = self.config.entropy_gate.is_some_and(|h| uncertainty.entropy < h);
        let alpha = if bonus_gated { 0.0 } else { self.config.alpha_curiosity };
        let curious = curiosity_probs(&base_probs, &kl, alpha)?;
        let selected = select(&curious, self.config.k);
        let outputs: Vec<Option<Vec<f32>>> = outputs.into_iter().map(Some).collect();
        let y = combine(&selected, &outputs, classes)?;
        Ok((
            y,
            RoutingDecision {
                mode: RoutingMode::Curious,
                gate_logits,
                base_probs,
                predictive_entropy: Some(entropy(&mean_dist)),
                epistemic_entropy: Some(uncertainty.entropy),
                expert_class_dists: Some(dists),
                mean_dist: Some(mean_dist),
                kl_per_expert: Some(kl),
                curious_probs: Some(curious),
                selected,
                mc_samples: self.config.mc_samples,
                kl_smoothed,
                bonus_gated,
            },
        ))
    }

    pub fn route(&self, z: &[f32], mode: RoutingMode, rng: &mut Rng) -> Result<(Vec<f32>, RoutingDecision)> {
        match mode {
            RoutingMode::Uniform => self.route_uniform(z),
            RoutingMode::Curious => self.route_curious(z, rng),
        }
    }

    /// Batched uniform routing; row results equal [`Self::route_uniform`].
    pub fn forward_uniform_batch(&self, x: &Matrix) -> Result<(Matrix, Vec<Selection>)> {
        let logits = self.router.mlp.forward_batch(x, ForwardMode::Eval, None)?;
        let selections = (0..x.rows())
            .map(|r| Ok(select(&softmax_temp(logits.row(r), self.config.temperature)?, self.config.k)))
            .collect::<Result<Vec<_>>>()?;
        let n = self.num_experts();
        let classes = self.num_classes();
        let mut rows_of: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (r, s) in selections.iter().enumerate() {
            for &i in &s.experts {
                rows_of[i].push(r);
            }
        }
        // Position of each row inside its expert's gathered batch.
        let mut outputs: Vec<Option<Matrix>> = vec![None; n];
        for (i, rows) in rows_of.iter().enumerate() {
            if !rows.is_empty() {
                outputs[i] = Some(self.experts[i].forward_batch(&x.select_rows(rows), ForwardMode::Eval, None)?);
            }
        }
        let mut cursor = vec![0usize; n];
        let mut out = Matrix::zeros(x.rows(), classes);
        for (r, s) in selections.iter().enumerate() {
            let mut y = vec![0.0f64; classes];
            for (&i, &w) in s.experts.iter().zip(&s.weights) {
                let e = outputs[i].as_ref().expect("gathered above").row(cursor[i]);
                cursor[i] += 1;
                for (a, &v) in y.iter_mut().zip(e) {
                    *a += w * v as f64;
                }
            }
            for (o, v) in out.row_mut(r).iter_mut().zip(y) {
                *o = v as f32;
            }
        }
        Ok((out, selections))
    }

    pub fn predict(&self, x: &Matrix) -> Result<Vec<usize>> {
        let (y, _) = self.forward_uniform_batch(x)?;
        Ok((0..y.rows()).map(|r| argmax(y.row(r))).collect())
    }

    fn parameters(&self) -> Result<Vec<Vec<f32>>> {
        let mut p = self.router.mlp.parameters()?;
        for e in &self.experts {
            p.extend(e.mlp().parameters()?);
        }
        Ok(p)
    }

    fn set_parameters(&mut self, params: &[Vec<f32>]) -> Result<()> {
        let mut at = self.router.mlp.parameters()?.len();
        self.router.mlp.set_parameters(&params[..at])?;
        for e in &mut self.experts {
            let n = e.mlp().parameters()?.len();
            e.mlp_mut().set_parameters(&params[at..at + n])?;
            at += n;
        }
        Ok(())
    }
}

/// One joint training step over a batch; returns `(total loss, post-clip
/// gradient norm)`.
fn moe_step(
    model: &mut MoEModel,
    x: &Matrix,
    y: &[usize],
    weights: &[f32],
    cfg: &TrainConfig,
    opt: &mut Optimizer,
    rng: &mut Rng,
) -> Result<(f32, f64)> {
    let b = x.rows();
    let n = model.num_experts();
    let classes = model.num_classes();
    let t = model.config.temperature;
    let k = model.config.k;
    let router_trace = model.router.mlp.train_forward(x, Some(rng), false)?;
    let probs: Vec<Vec<f64>> = (0..b)
        .map(|r| Ok(softmax_temp(router_trace.logits.row(r), t)?.into_vec()))
        .collect::<Result<_>>()?;
    let selections: Vec<Vec<usize>> = probs.iter().map(|p| top_k(p, k)).collect();
    let mut rows_of: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (r, s) in selections.iter().enumerate() {
        for &i in s {
            rows_of[i].push(r);
        }
    }
    let mut traces = Vec::with_capacity(n);
    for (i, rows) in rows_of.iter().enumerate() {
        traces.push(if rows.is_empty() {
            None
        } else {
            Some(model.experts[i].mlp().train_forward(&x.select_rows(rows), Some(rng), cfg.bypass_quantization)?)
        });
    }
    let mut combined = Matrix::zeros(b, classes);
    for (i, rows) in rows_of.iter().enumerate() {
        if let Some(tr) = &traces[i] {
            for (pos, &r) in rows.iter().enumerate() {
                let p = probs[r][i] as f32;
                for (o, &v) in combined.row_mut(r).iter_mut().zip(tr.logits.row(pos)) {
                    *o += p * v;
                }
            }
        }
    }
    let (ce, dy) = weighted_cross_entropy(&combined, y, weights)?;
    let prob_refs: Vec<ProbVector> = probs.iter().map(|p| ProbVector::new(p.clone())).collect::<Result<_>>()?;
    let lb = load_balance_from_probs(&prob_refs.iter().collect::<Vec<_>>())?;
    let alpha_b = model.config.alpha_balance as f64;
    let total = ce as f64 + alpha_b * lb;
    if !total.is_finite() {
        return Err(Error::Invariant("non-finite mixture loss".into()));
    }

    // dL/dp for every gate probability.
    let mut dp = vec![vec![0.0f64; n]; b];
    let mut expert_grads = Vec::with_capacity(n);
    for (i, rows) in rows_of.iter().enumerate() {
        match &traces[i] {
            Some(tr) => {
                let mut de = Matrix::zeros(rows.len(), classes);
                for (pos, &r) in rows.iter().enumerate() {
                    let p = probs[r][i] as f32;
                    let g = dy.row(r);
                    let e = tr.logits.row(pos);
                    dp[r][i] = g.iter().zip(e).map(|(a, b)| *a as f64 * *b as f64).sum();
                    for (d, &gv) in de.row_mut(pos).iter_mut().zip(g) {
                        *d = p * gv;
                    }
                }
                expert_grads.push(model.experts[i].mlp().backward(tr, &de, cfg.bypass_quantization)?);
            }
            None => {
                let zeros = model.experts[i].mlp().parameters()?.iter().map(|t| vec![0.0; t.len()]).collect();
                expert_grads.push(Gradients(zeros));
            }
        }
    }
    if alpha_b > 0.0 {
        let mut imp = vec![0.0f64; n];
        for p in &probs {
            for (a, v) in imp.iter_mut().zip(p) {
                *a += v / b as f64;
            }
        }
        for row in dp.iter_mut() {
            for (i, d) in row.iter_mut().enumerate() {
                *d += alpha_b * 2.0 * n as f64 * (imp[i] - 1.0 / n as f64) / b as f64;
            }
        }
    }
    let mut dg = Matrix::zeros(b, n);
    for r in 0..b {
        let dot: f64 = probs[r].iter().zip(&dp[r]).map(|(p, d)| p * d).sum();
        for (j, g) in dg.row_mut(r).iter_mut().enumerate() {
            *g = (probs[r][j] * (dp[r][j] - dot) / t) as f32;
        }
    }
    let mut grads = model.router.mlp.backward(&router_trace, &dg, false)?;
    for g in expert_grads {
        grads.extend(g);
    }
    let norm = grads.clip_global_norm(cfg.grad_clip_norm as f64);
    {
        let mut views = model.router.mlp.parameters_mut()?;
        for e in &mut model.experts {
            views.extend(e.mlp_mut().parameters_mut()?);
        }
        opt.step(views, &grads)?;
    }
    model.router.mlp.sanitize();
    model.router.mlp.refresh()?;
    for e in &mut model.experts {
        e.mlp_mut().sanitize();
        e.mlp_mut().refresh()?;
    }
    Ok((total as f32, norm))
}

/// Joint router and expert training on the deterministic gate path, with the
/// same early stopping contract as [`crate::expert::train_expert`].
pub fn train_moe(model: &mut MoEModel, train: &Dataset, val: &Dataset, cfg: &TrainConfig) -> Result<TrainHistory> {
    cfg.validate()?;
    if !model.router.mlp.is_trainable() || model.experts.iter().any(|e| !e.mlp().is_trainable()) {
        return Err(Error::Config("cannot train a frozen (loaded) model".into()));
    }
    check_training_data(train, val, model.in_dim(), model.num_classes())?;
    let weights = cfg.class_weights.resolve(train)?;
    let root = Rng::new(cfg.seed);
    let mut order_rng = root.fork(1);
    let mut dropout_rng = root.fork(2);
    let mut opt = Optimizer::new(cfg.optimizer);
    let mut history = TrainHistory {
        best_val_f1: -1.0,
        ..Default::default()
    };
    let mut best = model.parameters()?;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.max_epochs {
        order_rng.shuffle(&mut order);
        let (mut loss_sum, mut seen, mut max_norm) = (0.0f64, 0usize, 0.0f64);
        for batch in order.chunks(cfg.batch_size) {
            let x = train.features().select_rows(batch);
            let y: Vec<usize> = batch.iter().map(|&i| train.labels()[i]).collect();
            let (loss, norm) = moe_step(model, &x, &y, &weights, cfg, &mut opt, &mut dropout_rng)?;
            if epoch == 1 && seen == 0 {
                history.initial_loss = loss;
            }
            max_norm = max_norm.max(norm);
            loss_sum += loss as f64 * batch.len() as f64;
            seen += batch.len();
        }
        for e in &mut model.experts {
            calibrate_if_binarized(e, train)?;
        }
        let val_f1 = macro_f1(&model.predict(val.features())?, val.labels(), model.num_classes())?;
        history.epochs.push(EpochRecord {
            epoch,
            train_loss: (loss_sum / seen as f64) as f32,
            val_f1,
            lr: cfg.optimizer.lr(),
            max_grad_norm: max_norm,
        });
        if val_f1 > history.best_val_f1 {
            history.best_val_f1 = val_f1;
            history.best_epoch = epoch;
            best = model.parameters()?;
        } else if epoch - history.best_epoch >= cfg.early_stop_patience {
            break;
        }
    }
    model.set_parameters(&best)?;
    for e in &mut model.experts {
        calibrate_if_binarized(e, train)?;
    }
    Ok(history)
}

impl Inference for ExpertNet {
    fn infer(&self, x: &Matrix) -> Result<Matrix> {
        self.forward_batch(x, ForwardMode::Eval, None)
    }
}

/// A mixture routed one input at a time, so each input pays its own routing
/// cost. Curious routing draws MC-dropout masks from a generator seeded per
/// call.
pub struct RoutedModel<'a> {
    pub model: &'a MoEModel,
    pub mode: RoutingMode,
    pub seed: u64,
}

impl Inference for RoutedModel<'_> {
    fn infer(&self, x: &Matrix) -> Result<Matrix> {
        let mut rng = Rng::new(self.seed);
        let mut out = Vec::with_capacity(x.rows() * self.model.num_classes());
        for r in 0..x.rows() {
            out.extend(self.model.route(x.row(r), self.mode, &mut rng)?.0);
        }
        Matrix::from_vec(x.rows(), self.model.num_classes(), out)
    }
}
