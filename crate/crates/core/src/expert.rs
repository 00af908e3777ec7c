//! MLP experts over 1024-dimensional embeddings and their training loop.

use serde::{Deserialize, Serialize};

use crate::audio::EMBEDDING_DIM;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::nn::{weighted_cross_entropy, ForwardMode, Layer, Mlp, Optimizer, OptimizerKind};
use crate::quant::{QuantScheme, QuantizedLayer};
use crate::tensor::{argmax, Matrix, Rng};

pub const DEFAULT_HIDDEN: [usize; 2] = [640, 320];
pub const ALTERNATE_HIDDEN: [usize; 3] = [256, 128, 64];
pub const DEFAULT_DROPOUT: f32 = 0.195;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpertConfig {
    pub in_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub num_classes: usize,
    pub dropout_p: f32,
    /// One scheme per affine layer (`hidden_dims.len() + 1`).
    pub schemes: Vec<QuantScheme>,
}

impl ExpertConfig {
    /// Default `[640, 320]` expert with every layer under `scheme`.
    pub fn new(num_classes: usize, scheme: QuantScheme) -> Self {
        Self::with_hidden(num_classes, &DEFAULT_HIDDEN, scheme)
    }

    pub fn with_hidden(num_classes: usize, hidden: &[usize], scheme: QuantScheme) -> Self {
        ExpertConfig {
            in_dim: EMBEDDING_DIM,
            hidden_dims: hidden.to_vec(),
            num_classes,
            dropout_p: DEFAULT_DROPOUT,
            schemes: vec![scheme; hidden.len() + 1],
        }
    }

    /// The primary scheme: the one applied to the first layer.
    pub fn scheme(&self) -> QuantScheme {
        self.schemes[0]
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_dim != EMBEDDING_DIM {
            return Err(Error::param("in_dim", format!("experts take {EMBEDDING_DIM}-dim embeddings, got {}", self.in_dim)));
        }
        if self.num_classes < 2 {
            return Err(Error::param("num_classes", "need at least 2 classes"));
        }
        if self.hidden_dims.contains(&0) {
            return Err(Error::param("hidden_dims", "zero-width layer"));
        }
        if self.schemes.len() != self.hidden_dims.len() + 1 {
            return Err(Error::param(
                "schemes",
                format!("{} schemes for {} layers", self.schemes.len(), self.hidden_dims.len() + 1),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::param("dropout_p", format!("{} outside [0, 1)", self.dropout_p)));
        }
        Ok(())
    }

    fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.in_dim];
        d.extend(&self.hidden_dims);
        d.push(self.num_classes);
        d
    }
}

#[derive(Clone, Debug)]
pub struct ExpertNet {
    config: ExpertConfig,
    mlp: Mlp,
}

impl ExpertNet {
    /// Xavier-initialized, trainable.
    pub fn new(config: ExpertConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let dims = config.dims();
        let layers = dims
            .windows(2)
            .zip(&config.schemes)
            .map(|(d, &s)| Layer::xavier(d[0], d[1], s, rng))
            .collect::<Result<Vec<_>>>()?;
        let mlp = Mlp::new(layers, vec![config.dropout_p; config.hidden_dims.len()])?;
        Ok(ExpertNet { config, mlp })
    }

    /// Trainable net from explicit layers (input width is not restricted).
    pub fn from_layers(layers: Vec<Layer>, dropout_p: f32) -> Result<Self> {
        let hidden = layers.len().saturating_sub(1);
        let mlp = Mlp::new(layers, vec![dropout_p; hidden])?;
        let config = ExpertConfig {
            in_dim: mlp.in_dim(),
            hidden_dims: mlp.layers()[..hidden].iter().map(Layer::out_dim).collect(),
            num_classes: mlp.out_dim(),
            dropout_p,
            schemes: mlp.layers().iter().map(Layer::scheme).collect(),
        };
        Ok(ExpertNet { config, mlp })
    }

    /// Inference-only net restored from stored layers.
    pub fn from_stored(stored: Vec<QuantizedLayer>, dropout_p: f32) -> Result<Self> {
        let layers = stored.into_iter().map(Layer::frozen).collect::<Result<Vec<_>>>()?;
        let net = Self::from_layers(layers, dropout_p)?;
        net.config.validate()?;
        Ok(net)
    }

    pub fn config(&self) -> &ExpertConfig {
        &self.config
    }

    pub fn scheme(&self) -> QuantScheme {
        self.config.scheme()
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn mlp_mut(&mut self) -> &mut Mlp {
        &mut self.mlp
    }

    pub fn stored_layers(&self) -> Vec<QuantizedLayer> {
        self.mlp.stored_layers()
    }

    pub fn forward(&self, z: &[f32], mode: ForwardMode, rng: Option<&mut Rng>) -> Result<Vec<f32>> {
        let x = Matrix::from_vec(1, z.len(), z.to_vec())?;
        Ok(self.mlp.forward_batch(&x, mode, rng)?.into_vec())
    }

    pub fn forward_batch(&self, x: &Matrix, mode: ForwardMode, rng: Option<&mut Rng>) -> Result<Matrix> {
        self.mlp.forward_batch(x, mode, rng)
    }

    pub fn predict(&self, x: &Matrix) -> Result<Vec<usize>> {
        let logits = self.forward_batch(x, ForwardMode::Eval, None)?;
        Ok((0..logits.rows()).map(|r| argmax(logits.row(r))).collect())
    }

    pub fn has_binarized_layers(&self) -> bool {
        self.mlp.layers().iter().any(|l| l.scheme() == QuantScheme::BitwiseBinary)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassWeights {
    Uniform,
    /// `n / (C · count_c)`; absent classes get weight 0.
    Balanced,
    Explicit(Vec<f32>),
}

impl ClassWeights {
    pub fn resolve(&self, data: &Dataset) -> Result<Vec<f32>> {
        let c = data.num_classes();
        match self {
            ClassWeights::Uniform => Ok(vec![1.0; c]),
            ClassWeights::Balanced => {
                let counts = data.class_counts();
                let present = counts.iter().filter(|&&n| n > 0).count();
                if present < 2 {
                    return Err(Error::Data(format!(
                        "class weighting needs at least 2 classes, training data has {present}"
                    )));
                }
                let n = data.len() as f32;
                Ok(counts
                    .iter()
                    .map(|&k| if k == 0 { 0.0 } else { n / (c as f32 * k as f32) })
                    .collect())
            }
            ClassWeights::Explicit(w) => {
                if w.len() != c {
                    return Err(Error::shape(format!("{c} classes"), format!("{} weights", w.len())));
                }
                if w.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
                    return Err(Error::param("class_weights", "weights must be finite and non-negative"));
                }
                Ok(w.clone())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub batch_size: usize,
    pub grad_clip_norm: f32,
    pub early_stop_patience: usize,
    pub max_epochs: usize,
    pub class_weights: ClassWeights,
    pub seed: u64,
    /// Train on the float shadow weights directly. Only meaningful as a
    /// reference path for checking the straight-through estimator.
    #[serde(default)]
    pub bypass_quantization: bool,
}

impl TrainConfig {
    /// Single-expert preset.
    pub fn individual(seed: u64) -> Self {
        TrainConfig {
            optimizer: OptimizerKind::AdamW {
                lr: 5.79e-4,
                weight_decay: 5.13e-3,
            },
            batch_size: 64,
            grad_clip_norm: 1.0,
            early_stop_patience: 19,
            max_epochs: 200,
            class_weights: ClassWeights::Balanced,
            seed,
            bypass_quantization: false,
        }
    }

    /// Mixture-of-experts preset.
    pub fn moe(seed: u64) -> Self {
        TrainConfig {
            optimizer: OptimizerKind::Adam {
                lr: 1e-3,
                weight_decay: 1e-4,
            },
            batch_size: 256,
            early_stop_patience: 30,
            ..Self::individual(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.optimizer.lr() > 0.0) {
            return Err(Error::param("lr", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::param("batch_size", "must be positive"));
        }
        if !(self.grad_clip_norm > 0.0) {
            return Err(Error::param("grad_clip_norm", "must be positive"));
        }
        if self.early_stop_patience == 0 {
            return Err(Error::param("early_stop_patience", "must be at least 1"));
        }
        if self.max_epochs == 0 {
            return Err(Error::param("max_epochs", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f32,
    pub val_f1: f64,
    pub lr: f32,
    /// Largest global gradient norm after clipping.
    pub max_grad_norm: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_f1: f64,
    /// Loss of the very first batch, before any update.
    pub initial_loss: f32,
}

impl TrainHistory {
    pub fn to_json_lines(&self) -> Result<String> {
        let mut s = String::new();
        for e in &self.epochs {
            s.push_str(&serde_json::to_string(e)?);
            s.push('\n');
        }
        Ok(s)
    }
}

pub(crate) fn check_training_data(train: &Dataset, val: &Dataset, in_dim: usize, classes: usize) -> Result<()> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::Data("training and validation sets must be non-empty".into()));
    }
    if train.classes_present() < 2 {
        return Err(Error::Data("training data needs at least 2 classes".into()));
    }
    if train.dim() != in_dim || val.dim() != in_dim {
        return Err(Error::shape(format!("input width {in_dim}"), format!("data width {}", train.dim())));
    }
    if train.num_classes() != classes || val.num_classes() != classes {
        return Err(Error::shape(format!("{classes} outputs"), format!("{} classes in data", train.num_classes())));
    }
    Ok(())
}

/// Rows used to calibrate binarized layers.
const CALIBRATION_ROWS: usize = 512;

pub(crate) fn calibrate_if_binarized(net: &mut ExpertNet, train: &Dataset) -> Result<()> {
    if net.has_binarized_layers() {
        let n = train.len().min(CALIBRATION_ROWS);
        let idx: Vec<usize> = (0..n).collect();
        net.mlp.calibrate_binarized(&train.features().select_rows(&idx))?;
    }
    Ok(())
}

/// Mini-batch training with early stopping on validation macro F1. The best
/// weights are restored before returning.
pub fn train_expert(net: &mut ExpertNet, train: &Dataset, val: &Dataset, cfg: &TrainConfig) -> Result<TrainHistory> {
    cfg.validate()?;
    if !net.mlp.is_trainable() {
        return Err(Error::Config("cannot train a frozen (loaded) network".into()));
    }
    check_training_data(train, val, net.mlp.in_dim(), net.num_classes())?;
    let weights = cfg.class_weights.resolve(train)?;
    let root = Rng::new(cfg.seed);
    let mut order_rng = root.fork(1);
    let mut dropout_rng = root.fork(2);
    let mut opt = Optimizer::new(cfg.optimizer);
    let mut history = TrainHistory {
        best_val_f1: -1.0,
        ..Default::default()
    };
    let mut best_params = net.mlp.parameters()?;
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=cfg.max_epochs {
        order_rng.shuffle(&mut order);
        let (mut loss_sum, mut seen, mut max_norm) = (0.0f64, 0usize, 0.0f64);
        for batch in order.chunks(cfg.batch_size) {
            let x = train.features().select_rows(batch);
            let y: Vec<usize> = batch.iter().map(|&i| train.labels()[i]).collect();
            let trace = net.mlp.train_forward(&x, Some(&mut dropout_rng), cfg.bypass_quantization)?;
            let (loss, dlogits) = weighted_cross_entropy(&trace.logits, &y, &weights)?;
            if !loss.is_finite() {
                return Err(Error::Invariant(format!("non-finite loss at epoch {epoch}")));
            }
            if epoch == 1 && seen == 0 {
                history.initial_loss = loss;
            }
            let mut grads = net.mlp.backward(&trace, &dlogits, cfg.bypass_quantization)?;
            max_norm = max_norm.max(grads.clip_global_norm(cfg.grad_clip_norm as f64));
            opt.step(net.mlp.parameters_mut()?, &grads)?;
            net.mlp.sanitize();
            net.mlp.refresh()?;
            loss_sum += loss as f64 * batch.len() as f64;
            seen += batch.len();
        }
        calibrate_if_binarized(net, train)?;
        let preds = net.predict(val.features())?;
        let val_f1 = macro_f1(&preds, val.labels(), net.num_classes())?;
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
            best_params = net.mlp.parameters()?;
        } else if epoch - history.best_epoch >= cfg.early_stop_patience {
            break;
        }
    }
    net.mlp.set_parameters(&best_params)?;
    calibrate_if_binarized(net, train)?;
    Ok(history)
}

/// Unweighted mean of per-class F1. Classes absent from both predictions and
/// labels score 0 and still count towards the mean.
pub fn macro_f1(preds: &[usize], labels: &[usize], num_classes: usize) -> Result<f64> {
    if preds.len() != labels.len() {
        return Err(Error::shape(format!("{} predictions", preds.len()), format!("{} labels", labels.len())));
    }
    if preds.is_empty() {
        return Err(Error::Data("macro F1 of an empty set".into()));
    }
    if num_classes == 0 {
        return Err(Error::param("num_classes", "must be positive"));
    }
    let mut tp = vec![0usize; num_classes];
    let mut fp = vec![0usize; num_classes];
    let mut fneg = vec![0usize; num_classes];
    for (&p, &y) in preds.iter().zip(labels) {
        if p >= num_classes || y >= num_classes {
            return Err(Error::Data(format!("class id {} outside 0..{num_classes}", p.max(y))));
        }
        if p == y {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fneg[y] += 1;
        }
    }
    let sum: f64 = (0..num_classes)
        .map(|c| {
            let denom = 2 * tp[c] + fp[c] + fneg[c];
            if denom == 0 {
                0.0
            } else {
                2.0 * tp[c] as f64 / denom as f64
            }
        })
        .sum();
    Ok(sum / num_classes as f64)
}
