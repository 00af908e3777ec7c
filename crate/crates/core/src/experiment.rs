//! End-to-end commands: each takes a [`RunConfig`] and produces a JSON
//! report. Every random draw derives from `cfg.seed`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::audio::{load_embeddings, load_wav, melspectrogram, save_embeddings, EmbeddingTable, MelSpectrogram, EMBEDDING_DIM};
use crate::bench::{
    run_latency_bench, synth_dataset, time_runs, variance_reduction_report, BenchReport, CostTable, EnergyProxy, F1Summary,
    Inference, LatencySample, LatencySummary, OpCounts, SizeSummary, StatEntry, VarianceReport, TIMING_FIELDS,
};
use crate::config::{Experiment, RunConfig};
use crate::container::{encode_model, load_model, save_model, Model};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::expert::{macro_f1, train_expert, EpochRecord, ExpertConfig, ExpertNet, TrainConfig, TrainHistory};
use crate::io_util::atomic_write;
use crate::moe::{train_moe, MoEModel, RoutedModel, RouterNet, RoutingConfig, RoutingMode, Selection};
use crate::nn::Layer;
use crate::quant::{model_size_report, Bits, QuantScheme, QuantizedLayer, SizeReport};
use crate::stats::{bonferroni, levene_test, paired_t_test, spearman_test, StatResult};
use crate::tensor::{argmax, Matrix, Rng};

/// Bit widths swept by the ablation.
pub const ABLATION_BITS: [u8; 5] = [1, 2, 4, 8, 16];

/// The labeled dataset: the configured embedding file, or a synthetic table.
pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    match &cfg.data {
        Some(path) => Dataset::from_table(&load_embeddings(path)?, None),
        None => {
            let s = &cfg.synth;
            let table = synth_dataset(s.num_classes, s.samples_per_class, s.spread, cfg.seed)?;
            Dataset::from_table(&table, Some(s.num_classes))
        }
    }
}

pub fn expert_config(cfg: &RunConfig, scheme: QuantScheme, num_classes: usize) -> ExpertConfig {
    let mut c = ExpertConfig::with_hidden(num_classes, &cfg.hidden_dims, scheme);
    c.dropout_p = cfg.dropout;
    if let (Some(head), Some(last)) = (cfg.head_scheme, c.schemes.last_mut()) {
        *last = head;
    }
    c
}

fn train_config(cfg: &RunConfig, mut base: TrainConfig) -> TrainConfig {
    if let Some(e) = cfg.max_epochs {
        base.max_epochs = e;
    }
    base.class_weights = cfg.class_weights.clone();
    base
}

fn scheme_list(schemes: &[QuantScheme]) -> String {
    schemes.iter().map(ToString::to_string).collect::<Vec<_>>().join("+")
}

fn config_id(label: &str, schemes: &[QuantScheme], seed: u64) -> String {
    format!("{label}:{}:seed{seed}", scheme_list(schemes))
}

fn predictions(y: &Matrix) -> Vec<usize> {
    (0..y.rows()).map(|r| argmax(y.row(r))).collect()
}

fn model_params(model: &Model) -> usize {
    let experts = |m: &MoEModel| -> usize {
        m.experts().iter().flat_map(|e| e.stored_layers()).map(|l| l.param_count()).sum::<usize>()
            + m.router().mlp().stored_layers().iter().map(QuantizedLayer::param_count).sum::<usize>()
    };
    match model {
        Model::Expert(e) => e.stored_layers().iter().map(QuantizedLayer::param_count).sum(),
        Model::Mixture(m) => experts(m),
    }
}

/// Container bytes and the reduction against `param_count × 4`.
pub fn size_summary(model: &Model) -> Result<SizeSummary> {
    let bytes = encode_model(model)?.len();
    Ok(SizeSummary {
        bytes,
        reduction: (model_params(model) * 4) as f64 / bytes as f64,
    })
}

/// Operations for `calls` inferences of a single expert.
pub fn expert_energy(net: &ExpertNet, calls: usize, costs: &CostTable) -> Result<EnergyProxy> {
    EnergyProxy::new(OpCounts::for_layers(&net.stored_layers()).scaled(calls as u64), costs.clone())
}

/// Operations actually performed by routed inference. Uniform routing pays
/// the router once plus the selected experts; curious routing pays the
/// router `1 + mc_samples` times plus every expert.
pub fn routing_energy(model: &MoEModel, mode: RoutingMode, selections: &[Selection], costs: &CostTable) -> Result<EnergyProxy> {
    let router = OpCounts::for_layers(&model.router().mlp().stored_layers());
    let per_expert: Vec<OpCounts> = model.experts().iter().map(|e| OpCounts::for_layers(&e.stored_layers())).collect();
    let mut total = OpCounts::default();
    match mode {
        RoutingMode::Uniform => {
            total.add(&router.scaled(selections.len() as u64));
            for s in selections {
                for &i in &s.experts {
                    total.add(&per_expert[i]);
                }
            }
        }
        RoutingMode::Curious => {
            let calls = selections.len() as u64;
            total.add(&router.scaled(calls * (1 + model.config().mc_samples as u64)));
            for e in &per_expert {
                total.add(&e.scaled(calls));
            }
        }
    }
    EnergyProxy::new(total, costs.clone())
}

/// Inference over a loaded model; mixtures route row by row.
pub fn model_inference(model: &Model, mode: RoutingMode, seed: u64) -> Box<dyn Inference + '_> {
    match model {
        Model::Expert(e) => Box::new(e.clone()),
        Model::Mixture(m) => Box::new(RoutedModel { model: m, mode, seed }),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config_id: String,
    pub kind: String,
    pub schemes: Vec<QuantScheme>,
    pub fold: usize,
    pub train_rows: usize,
    pub val_rows: usize,
    pub initial_loss: f32,
    pub best_epoch: usize,
    pub best_val_f1: f64,
    /// Macro F1 of the restored best weights on the validation fold.
    pub val_f1: f64,
    pub epochs: Vec<EpochRecord>,
    pub size: SizeSummary,
    /// Operations for one pass over the validation fold.
    pub energy_proxy: EnergyProxy,
    /// Fraction of validation inputs sent to each expert (mixtures only).
    pub expert_usage: Option<Vec<f64>>,
}

fn train_report(
    cfg: &RunConfig,
    kind: &str,
    schemes: &[QuantScheme],
    history: &TrainHistory,
    val: &Dataset,
    train_rows: usize,
    val_f1: f64,
    model: &Model,
    energy_proxy: EnergyProxy,
    expert_usage: Option<Vec<f64>>,
) -> Result<TrainReport> {
    Ok(TrainReport {
        config_id: config_id(kind, schemes, cfg.seed),
        kind: kind.to_string(),
        schemes: schemes.to_vec(),
        fold: cfg.fold,
        train_rows,
        val_rows: val.len(),
        initial_loss: history.initial_loss,
        best_epoch: history.best_epoch,
        best_val_f1: history.best_val_f1,
        val_f1,
        epochs: history.epochs.clone(),
        size: size_summary(model)?,
        energy_proxy,
        expert_usage,
    })
}

/// Trains one expert with `scheme` on fold `fold` and returns it with its
/// validation macro F1.
pub fn train_expert_fold(
    cfg: &RunConfig,
    data: &Dataset,
    scheme: QuantScheme,
    fold: usize,
) -> Result<(ExpertNet, TrainHistory, f64)> {
    let (train, val) = data.split(fold, cfg.fold_count, cfg.seed)?;
    let mut rng = Rng::new(cfg.seed).fork(0x1000 + fold as u64);
    let mut net = ExpertNet::new(expert_config(cfg, scheme, data.num_classes()), &mut rng)?;
    let tc = train_config(cfg, TrainConfig::individual(cfg.seed.wrapping_add(fold as u64)));
    let history = train_expert(&mut net, &train, &val, &tc)?;
    let f1 = macro_f1(&net.predict(val.features())?, val.labels(), val.num_classes())?;
    Ok((net, history, f1))
}

pub fn cmd_train_expert(cfg: &RunConfig) -> Result<(ExpertNet, TrainReport)> {
    cfg.validate_for(Experiment::TrainExpert)?;
    let data = load_dataset(cfg)?;
    let scheme = cfg.schemes[0];
    let (net, history, f1) = train_expert_fold(cfg, &data, scheme, cfg.fold)?;
    let (train, val) = data.split(cfg.fold, cfg.fold_count, cfg.seed)?;
    let energy = expert_energy(&net, val.len(), &cfg.costs)?;
    let model = Model::Expert(net);
    let report = train_report(cfg, "expert", &model_schemes(&model), &history, &val, train.len(), f1, &model, energy, None)?;
    if let Some(path) = &cfg.model_out {
        save_model(&model, path)?;
    }
    let Model::Expert(net) = model else { unreachable!() };
    Ok((net, report))
}

fn model_schemes(model: &Model) -> Vec<QuantScheme> {
    match model {
        Model::Expert(e) => e.config().schemes.clone(),
        Model::Mixture(m) => m.experts().iter().map(ExpertNet::scheme).collect(),
    }
}

/// A mixture with one freshly initialized expert per configured scheme.
pub fn build_moe(cfg: &RunConfig, num_classes: usize) -> Result<MoEModel> {
    let mut rng = Rng::new(cfg.seed).fork(0x2000);
    let experts = cfg
        .schemes
        .iter()
        .map(|&s| ExpertNet::new(expert_config(cfg, s, num_classes), &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let router = RouterNet::new(experts.len(), &mut rng)?;
    MoEModel::new(experts, router, cfg.routing_config())
}

fn usage(selections: &[Selection], n: usize) -> Vec<f64> {
    let mut u = vec![0.0; n];
    for s in selections {
        for &i in &s.experts {
            u[i] += 1.0 / selections.len() as f64;
        }
    }
    u
}

pub fn cmd_train_moe(cfg: &RunConfig) -> Result<(MoEModel, TrainReport)> {
    cfg.validate_for(Experiment::TrainMoe)?;
    let data = load_dataset(cfg)?;
    let (train, val) = data.split(cfg.fold, cfg.fold_count, cfg.seed)?;
    let mut model = build_moe(cfg, data.num_classes())?;
    let tc = train_config(cfg, TrainConfig::moe(cfg.seed));
    let history = train_moe(&mut model, &train, &val, &tc)?;
    let (y, selections) = model.forward_uniform_batch(val.features())?;
    let f1 = macro_f1(&predictions(&y), val.labels(), val.num_classes())?;
    let energy = routing_energy(&model, RoutingMode::Uniform, &selections, &cfg.costs)?;
    let used = usage(&selections, model.num_experts());
    let wrapped = Model::Mixture(model);
    let report = train_report(cfg, "moe", &cfg.schemes, &history, &val, train.len(), f1, &wrapped, energy, Some(used))?;
    if let Some(path) = &cfg.model_out {
        save_model(&wrapped, path)?;
    }
    let Model::Mixture(model) = wrapped else { unreachable!() };
    Ok((model, report))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_id: String,
    pub model_kind: String,
    pub routing: RoutingMode,
    pub rows: usize,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub size: SizeSummary,
}

/// Evaluates the configured model on validation fold `cfg.fold`.
pub fn cmd_eval(cfg: &RunConfig) -> Result<EvalReport> {
    cfg.validate_for(Experiment::Eval)?;
    let model = load_model(cfg.model.as_deref().expect("validated"))?;
    let data = load_dataset(cfg)?;
    let (_, val) = data.split(cfg.fold, cfg.fold_count, cfg.seed)?;
    let y = model_inference(&model, cfg.routing, cfg.seed).infer(val.features())?;
    if y.cols() != val.num_classes() {
        return Err(Error::Data(format!("model predicts {} classes, data has {}", y.cols(), val.num_classes())));
    }
    let preds = predictions(&y);
    let correct = preds.iter().zip(val.labels()).filter(|(p, l)| p == l).count();
    Ok(EvalReport {
        config_id: config_id("eval", &model_schemes(&model), cfg.seed),
        model_kind: model.kind().to_string(),
        routing: cfg.routing,
        rows: val.len(),
        accuracy: correct as f64 / val.len() as f64,
        macro_f1: macro_f1(&preds, val.labels(), val.num_classes())?,
        size: size_summary(&model)?,
    })
}

/// The first `size` dataset rows, wrapping around if needed.
fn workload_table(data: &Dataset, size: usize) -> Result<EmbeddingTable> {
    if data.is_empty() || size == 0 {
        return Err(Error::Data("empty workload".into()));
    }
    let idx: Vec<usize> = (0..size).map(|i| i % data.len()).collect();
    EmbeddingTable::new(data.features().select_rows(&idx).into_vec(), None)
}

/// Latency, energy proxy and size of one model over a fixed workload. Without
/// a configured model, an untrained expert of the first scheme is timed.
pub fn cmd_bench(cfg: &RunConfig) -> Result<BenchReport> {
    cfg.validate_for(Experiment::Bench)?;
    let data = load_dataset(cfg)?;
    let model = match &cfg.model {
        Some(p) => load_model(p)?,
        None => {
            let mut rng = Rng::new(cfg.seed).fork(0x3000);
            Model::Expert(ExpertNet::new(expert_config(cfg, cfg.schemes[0], data.num_classes()), &mut rng)?)
        }
    };
    let workload = workload_table(&data, cfg.bench.workload)?;
    let id = config_id("bench", &model_schemes(&model), cfg.seed);
    let energy = match &model {
        Model::Expert(e) => expert_energy(e, workload.rows(), &cfg.costs)?,
        Model::Mixture(m) => {
            let (_, sel) = m.forward_uniform_batch(&workload.to_matrix())?;
            routing_energy(m, cfg.routing, &sel, &cfg.costs)?
        }
    };
    let infer = model_inference(&model, cfg.routing, cfg.seed);
    let samples = run_latency_bench(&id, infer.as_ref(), &workload, cfg.bench.runs, cfg.bench.warmup)?;
    let mut report = BenchReport::new(id);
    report.latency = Some(LatencySummary::from_samples(&samples)?);
    report.energy_proxy = Some(energy);
    report.size = Some(size_summary(&model)?);
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub bits: u8,
    pub scheme: QuantScheme,
    pub f1: F1Summary,
    pub pct_of_16bit: f64,
    /// Fold-0 model over its validation fold.
    pub latency: Option<LatencySummary>,
    /// Operations for one inference.
    pub energy_proxy: EnergyProxy,
    pub size: SizeSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub config_id: String,
    pub folds_run: usize,
    pub rows: Vec<AblationRow>,
    /// Set when a fold failed; `rows` then holds only completed widths.
    pub partial: bool,
    pub failure: Option<String>,
}

fn ablation_row(cfg: &RunConfig, data: &Dataset, bits: u8, folds: usize) -> Result<AblationRow> {
    let scheme = QuantScheme::bitlinear(bits)?;
    let mut f1s = Vec::with_capacity(folds);
    let mut first: Option<(ExpertNet, Dataset)> = None;
    for fold in 0..folds {
        let (net, _, f1) = train_expert_fold(cfg, data, scheme, fold)?;
        f1s.push(f1);
        if first.is_none() {
            first = Some((net, data.split(fold, cfg.fold_count, cfg.seed)?.1));
        }
    }
    let (net, val) = first.expect("at least one fold");
    let id = format!("ablation:{scheme}:seed{}", cfg.seed);
    let table = EmbeddingTable::new(val.features().as_slice().to_vec(), None)?;
    let samples = run_latency_bench(&id, &net, &table, cfg.bench.runs, cfg.bench.warmup)?;
    let model = Model::Expert(net);
    let Model::Expert(net) = &model else { unreachable!() };
    Ok(AblationRow {
        bits,
        scheme,
        f1: F1Summary::from_folds(f1s),
        pct_of_16bit: 0.0,
        latency: Some(LatencySummary::from_samples(&samples)?),
        energy_proxy: expert_energy(net, 1, &cfg.costs)?,
        size: size_summary(&model)?,
    })
}

/// Trains every bit width on every configured fold. A failure writes the
/// completed rows to the report path marked `partial` before returning.
pub fn cmd_ablation(cfg: &RunConfig) -> Result<AblationReport> {
    cfg.validate_for(Experiment::Ablation)?;
    let data = load_dataset(cfg)?;
    let folds = cfg.folds.unwrap_or(cfg.fold_count);
    let mut report = AblationReport {
        config_id: format!("ablation:seed{}", cfg.seed),
        folds_run: folds,
        rows: Vec::new(),
        partial: false,
        failure: None,
    };
    for bits in ABLATION_BITS {
        match ablation_row(cfg, &data, bits, folds) {
            Ok(row) => report.rows.push(row),
            Err(e) => {
                report.partial = true;
                report.failure = Some(format!("{bits}-bit: {e}"));
                if let Some(path) = &cfg.report {
                    write_json(&report, path)?;
                }
                return Err(e);
            }
        }
    }
    let reference = report.rows.iter().find(|r| r.bits == 16).map(|r| r.f1.mean).unwrap_or(0.0);
    for row in &mut report.rows {
        row.pct_of_16bit = if row.bits == 16 {
            100.0
        } else if reference > 0.0 {
            100.0 * row.f1.mean / reference
        } else {
            0.0
        };
    }
    Ok(report)
}

/// Share of a burst drawn from its dominant half of the classes.
pub const BURST_SHARE: f64 = 0.95;

/// Per-run workloads: each run is a burst dominated by one half of the
/// classes (lower or upper, equally likely), which supplies `BURST_SHARE` of
/// its inputs; the rest come from the other half.
pub fn bursty_workloads(data: &Dataset, runs: usize, size: usize, seed: u64) -> Result<Vec<Matrix>> {
    let half = data.num_classes().div_ceil(2);
    let (low, high): (Vec<usize>, Vec<usize>) = (0..data.len()).partition(|&i| data.labels()[i] < half);
    if low.is_empty() || high.is_empty() {
        return Err(Error::Data("bursty workload needs rows in both halves of the classes".into()));
    }
    let root = Rng::new(seed).fork(0xb0b);
    (0..runs)
        .map(|r| {
            let mut rng = root.fork(r as u64);
            let pi = if rng.uniform_f64() < 0.5 { BURST_SHARE } else { 1.0 - BURST_SHARE };
            let idx: Vec<usize> = (0..size)
                .map(|_| {
                    let pool = if rng.uniform_f64() < pi { &low } else { &high };
                    pool[rng.below(pool.len())]
                })
                .collect();
            Ok(data.features().select_rows(&idx))
        })
        .collect()
}

/// Three experts of very different cost behind a small hand-set router
/// (`1024 → 8 → 4 → 3`, MC dropout on the first hidden layer): inputs near
/// `+3u` go to a 16-bit `[640, 320]` expert, inputs near `−3u` to a 1-bit
/// `[64]` expert. Returns the model and a two-class dataset of such inputs
/// (class 0 expensive, class 1 cheap).
pub fn variance_scenario(seed: u64, samples_per_class: usize) -> Result<(MoEModel, Dataset)> {
    const GAIN: f32 = 5.0;
    let root = Rng::new(seed);
    let mut rng = root.fork(1);
    let u: Vec<f32> = {
        let v: Vec<f64> = (0..EMBEDDING_DIM).map(|_| rng.normal()).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter().map(|x| (x / n) as f32).collect()
    };
    let mut w1 = Matrix::zeros(8, EMBEDDING_DIM);
    w1.row_mut(0).copy_from_slice(&u);
    for (d, &s) in w1.row_mut(1).iter_mut().zip(&u) {
        *d = -s;
    }
    let mut w2 = Matrix::zeros(4, 8);
    w2.set(0, 0, 1.0);
    w2.set(1, 1, 1.0);
    let mut w3 = Matrix::zeros(3, 4);
    w3.set(0, 1, GAIN);
    w3.set(1, 0, GAIN);
    let router = RouterNet::from_layers(
        vec![
            Layer::from_weights(w1, vec![0.0; 8], QuantScheme::Float32)?,
            Layer::from_weights(w2, vec![0.0; 4], QuantScheme::Float32)?,
            Layer::from_weights(w3, vec![0.0; 3], QuantScheme::Float32)?,
        ],
        vec![crate::moe::ROUTER_DROPOUT, 0.0],
    )?;
    let specs: [(QuantScheme, &[usize]); 3] = [
        (QuantScheme::BitwiseBinary, &[64]),
        (QuantScheme::BitLinear(Bits::new(16)?), &[640, 320]),
        (QuantScheme::Ternary, &[128]),
    ];
    let mut erng = root.fork(2);
    let experts = specs
        .iter()
        .map(|&(s, h)| ExpertNet::new(ExpertConfig::with_hidden(2, h, s), &mut erng))
        .collect::<Result<Vec<_>>>()?;
    let model = MoEModel::new(experts, router, RoutingConfig::default())?;

    let mut nrng = root.fork(3);
    let mut data = Vec::with_capacity(2 * samples_per_class * EMBEDDING_DIM);
    let mut labels = Vec::with_capacity(2 * samples_per_class);
    for (class, sign) in [(0usize, 3.0f32), (1, -3.0)] {
        for _ in 0..samples_per_class {
            data.extend(u.iter().map(|&v| sign * v + 0.05 * nrng.normal() as f32));
            labels.push(class);
        }
    }
    let features = Matrix::from_vec(labels.len(), EMBEDDING_DIM, data)?;
    Ok((model, Dataset::new(features, labels, 2)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingBenchReport {
    pub config_id: String,
    pub workload_size: usize,
    pub runs: usize,
    pub uniform: BenchReport,
    pub curious: BenchReport,
    /// Timing comparison of the two modes, with the Levene test.
    pub latency: VarianceReport,
    pub warning: Option<String>,
}

fn homogeneity_warning(model: &MoEModel) -> Option<String> {
    if model.num_experts() == 1 {
        return Some("single-expert model: routing cannot change cost, variance comparison is meaningless".into());
    }
    let layout = |e: &ExpertNet| -> Vec<(QuantScheme, usize, usize)> {
        e.stored_layers().iter().map(|l| (l.scheme, l.in_dim, l.out_dim)).collect()
    };
    let first = layout(&model.experts()[0]);
    model
        .experts()
        .iter()
        .all(|e| layout(e) == first)
        .then(|| "all experts share one scheme and layout: variance comparison is meaningless".into())
}

/// Times uniform and curious routing on identical seeded bursty workloads.
pub fn bench_routing(model: &MoEModel, data: &Dataset, cfg: &RunConfig) -> Result<RoutingBenchReport> {
    let b = &cfg.bench;
    let workloads = bursty_workloads(data, b.runs, b.workload, cfg.seed)?;
    let schemes: Vec<QuantScheme> = model.experts().iter().map(ExpertNet::scheme).collect();
    let id = config_id("bench-routing", &schemes, cfg.seed);
    let timed = |mode: RoutingMode| -> Result<Vec<LatencySample>> {
        let label = format!("{id}:{mode:?}");
        time_runs(&label, b.workload, b.runs, b.warmup, |i| {
            let routed = RoutedModel {
                model,
                mode,
                seed: cfg.seed.wrapping_add(i as u64),
            };
            std::hint::black_box(routed.infer(&workloads[i % workloads.len()])?);
            Ok(())
        })
    };
    let uniform_samples = timed(RoutingMode::Uniform)?;
    let curious_samples = timed(RoutingMode::Curious)?;

    let mut selections = Vec::with_capacity(b.runs * b.workload);
    for w in &workloads {
        selections.extend(model.forward_uniform_batch(w)?.1);
    }
    let mut uniform = BenchReport::new(format!("{id}:uniform"));
    uniform.latency = Some(LatencySummary::from_samples(&uniform_samples)?);
    uniform.energy_proxy = Some(routing_energy(model, RoutingMode::Uniform, &selections, &cfg.costs)?);
    let mut curious = BenchReport::new(format!("{id}:curious"));
    curious.latency = Some(LatencySummary::from_samples(&curious_samples)?);
    curious.energy_proxy = Some(routing_energy(model, RoutingMode::Curious, &selections, &cfg.costs)?);
    let size = size_summary(&Model::Mixture(model.clone()))?;
    uniform.size = Some(size.clone());
    curious.size = Some(size);
    Ok(RoutingBenchReport {
        config_id: id,
        workload_size: b.workload,
        runs: b.runs,
        uniform,
        curious,
        latency: variance_reduction_report(&uniform_samples, &curious_samples)?,
        warning: homogeneity_warning(model),
    })
}

/// Routing bench on the configured mixture, or on [`variance_scenario`]
/// when no model is given.
pub fn cmd_bench_routing(cfg: &RunConfig) -> Result<RoutingBenchReport> {
    cfg.validate_for(Experiment::BenchRouting)?;
    match &cfg.model {
        Some(path) => {
            let Model::Mixture(mut model) = load_model(path)? else {
                return Err(Error::Config("bench-routing needs a mixture model, got a single expert".into()));
            };
            model.set_config(cfg.routing_config())?;
            let data = load_dataset(cfg)?;
            bench_routing(&model, &data, cfg)
        }
        None => {
            let (model, data) = variance_scenario(cfg.seed, 200)?;
            bench_routing(&model, &data, cfg)
        }
    }
}

#[derive(Serialize)]
struct TraceLine<'a> {
    row: usize,
    label: usize,
    prediction: usize,
    decision: &'a crate::moe::RoutingDecision,
}

/// One JSON line per validation row with the full routing decision.
pub fn cmd_route_trace(cfg: &RunConfig) -> Result<String> {
    cfg.validate_for(Experiment::RouteTrace)?;
    let Model::Mixture(mut model) = load_model(cfg.model.as_deref().expect("validated"))? else {
        return Err(Error::Config("route-trace needs a mixture model, got a single expert".into()));
    };
    model.set_config(cfg.routing_config())?;
    let data = load_dataset(cfg)?;
    let (_, val) = data.split(cfg.fold, cfg.fold_count, cfg.seed)?;
    let mut rng = Rng::new(cfg.seed).fork(0x7ace);
    let mut out = String::new();
    for r in 0..val.len() {
        let (y, decision) = model.route(val.features().row(r), cfg.routing, &mut rng)?;
        let line = TraceLine {
            row: r,
            label: val.labels()[r],
            prediction: argmax(&y),
            decision: &decision,
        };
        out.push_str(&serde_json::to_string(&line)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn cmd_melspec(cfg: &RunConfig) -> Result<MelSpectrogram> {
    cfg.validate_for(Experiment::Melspec)?;
    let clip = load_wav(cfg.audio.as_deref().expect("validated"))?;
    melspectrogram(&clip, cfg.mel.window, cfg.mel.hop, cfg.mel.mel_bins)
}

/// Xavier-initialized stored layers for `1024 → hidden → classes`.
pub fn layout_layers(
    hidden: &[usize],
    num_classes: usize,
    scheme: QuantScheme,
    head: Option<QuantScheme>,
    seed: u64,
) -> Result<Vec<QuantizedLayer>> {
    let mut c = ExpertConfig::with_hidden(num_classes, hidden, scheme);
    if let (Some(h), Some(last)) = (head, c.schemes.last_mut()) {
        *last = h;
    }
    Ok(ExpertNet::new(c, &mut Rng::new(seed))?.stored_layers())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SizeReportOutput {
    /// One entry per scheme (layout mode) or per expert (model mode).
    pub reports: Vec<SizeReport>,
    /// Exact file size when a model was given.
    pub container_bytes: Option<usize>,
}

pub fn cmd_size_report(cfg: &RunConfig) -> Result<SizeReportOutput> {
    cfg.validate_for(Experiment::SizeReport)?;
    if let Some(path) = &cfg.model {
        let model = load_model(path)?;
        let reports = match &model {
            Model::Expert(e) => vec![model_size_report(&e.stored_layers())],
            Model::Mixture(m) => m.experts().iter().map(|e| model_size_report(&e.stored_layers())).collect(),
        };
        return Ok(SizeReportOutput {
            reports,
            container_bytes: Some(encode_model(&model)?.len()),
        });
    }
    let reports = cfg
        .schemes
        .iter()
        .map(|&s| Ok(model_size_report(&layout_layers(&cfg.hidden_dims, cfg.synth.num_classes, s, cfg.head_scheme, cfg.seed)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(SizeReportOutput {
        reports,
        container_bytes: None,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairedScores {
    pub name: String,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupedScores {
    pub name: String,
    pub groups: Vec<Vec<f64>>,
}

/// Input of the `stats` command.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StatsInput {
    pub paired: Vec<PairedScores>,
    pub levene: Vec<GroupedScores>,
    pub spearman: Vec<PairedScores>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedStat {
    pub name: String,
    #[serde(flatten)]
    pub entry: StatEntry,
}

/// Runs every listed test with Bonferroni correction over all of them.
pub fn run_stats(input: &StatsInput) -> Result<Vec<NamedStat>> {
    let n = input.paired.len() + input.levene.len() + input.spearman.len();
    let alpha = bonferroni(crate::stats::DEFAULT_ALPHA, n)?;
    let mut results: Vec<(String, StatResult)> = Vec::with_capacity(n);
    for p in &input.paired {
        results.push((p.name.clone(), paired_t_test(&p.a, &p.b)?));
    }
    for g in &input.levene {
        results.push((g.name.clone(), levene_test(&g.groups)?));
    }
    for s in &input.spearman {
        results.push((s.name.clone(), spearman_test(&s.a, &s.b)?));
    }
    Ok(results
        .into_iter()
        .map(|(name, mut r)| {
            r.corrected_alpha = alpha;
            NamedStat {
                name,
                entry: StatEntry::from(&r),
            }
        })
        .collect())
}

pub fn cmd_stats(cfg: &RunConfig) -> Result<Vec<NamedStat>> {
    cfg.validate_for(Experiment::Stats)?;
    let path = cfg.stats_input.as_deref().expect("validated");
    let text = std::fs::read_to_string(path)?;
    let input: StatsInput = serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    run_stats(&input)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSummary {
    pub rows: usize,
    pub num_classes: usize,
    pub dim: usize,
    pub bytes: usize,
}

pub fn cmd_synth_data(cfg: &RunConfig) -> Result<SynthSummary> {
    cfg.validate_for(Experiment::SynthData)?;
    let s = &cfg.synth;
    let table = synth_dataset(s.num_classes, s.samples_per_class, s.spread, cfg.seed)?;
    save_embeddings(&table, cfg.embeddings_out.as_deref().expect("validated"))?;
    Ok(SynthSummary {
        rows: table.rows(),
        num_classes: s.num_classes,
        dim: table.dim(),
        bytes: table.to_bytes().len(),
    })
}

/// `value` with every timing field removed, at any depth.
pub fn strip_timing(value: &mut Value) {
    match value {
        Value::Object(map) => {
            for f in TIMING_FIELDS {
                map.remove(f);
            }
            map.values_mut().for_each(strip_timing);
        }
        Value::Array(items) => items.iter_mut().for_each(strip_timing),
        _ => {}
    }
}

/// The deterministic part of a report, as canonical JSON text.
pub fn deterministic_json<T: Serialize>(report: &T) -> Result<String> {
    let mut v = serde_json::to_value(report)?;
    strip_timing(&mut v);
    Ok(serde_json::to_string(&v)?)
}

pub fn write_json<T: Serialize>(report: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(report)?;
    text.push('\n');
    atomic_write(path, text.as_bytes())
}

fn pretty<T: Serialize>(report: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(report)?;
    s.push('\n');
    Ok(s)
}

/// Runs `experiment` and returns its report text, also written atomically to
/// `cfg.report` when set.
pub fn run(experiment: Experiment, cfg: &RunConfig) -> Result<String> {
    cfg.validate_for(experiment)?;
    let text = match experiment {
        Experiment::TrainExpert => pretty(&cmd_train_expert(cfg)?.1)?,
        Experiment::TrainMoe => pretty(&cmd_train_moe(cfg)?.1)?,
        Experiment::Eval => pretty(&cmd_eval(cfg)?)?,
        Experiment::Bench => pretty(&cmd_bench(cfg)?)?,
        Experiment::BenchRouting => pretty(&cmd_bench_routing(cfg)?)?,
        Experiment::Ablation => pretty(&cmd_ablation(cfg)?)?,
        Experiment::RouteTrace => cmd_route_trace(cfg)?,
        Experiment::Melspec => pretty(&cmd_melspec(cfg)?)?,
        Experiment::SizeReport => pretty(&cmd_size_report(cfg)?)?,
        Experiment::Stats => pretty(&cmd_stats(cfg)?)?,
        Experiment::SynthData => pretty(&cmd_synth_data(cfg)?)?,
    };
    if let Some(path) = &cfg.report {
        atomic_write(path, text.as_bytes())?;
    }
    Ok(text)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> RunConfig {
        let mut c = RunConfig::default();
        c.hidden_dims = vec![16];
        c.synth.num_classes = 3;
        c.synth.samples_per_class = 20;
        c.max_epochs = Some(3);
        c
    }

    #[test]
    fn head_scheme_overrides_last_layer() {
        let mut c = tiny();
        c.head_scheme = Some(QuantScheme::Float32);
        let e = expert_config(&c, QuantScheme::Ternary, 3);
        assert_eq!(e.schemes, vec![QuantScheme::Ternary, QuantScheme::Float32]);
    }

    #[test]
    fn strip_timing_removes_nested_latency() {
        let mut v: Value = serde_json::json!({"a": {"latency": 3, "b": [{"latency": 1, "c": 2}]}, "latency": 0});
        strip_timing(&mut v);
        assert_eq!(v, serde_json::json!({"a": {"b": [{"c": 2}]}}));
    }

    #[test]
    fn bursty_workloads_are_seeded_and_mixed() {
        let (_, data) = variance_scenario(1, 20).unwrap();
        let a = bursty_workloads(&data, 6, 50, 9).unwrap();
        let b = bursty_workloads(&data, 6, 50, 9).unwrap();
        assert_eq!(a, b);
        let c = bursty_workloads(&data, 6, 50, 10).unwrap();
        assert_ne!(a, c);
        assert_eq!(a[0].shape(), (50, EMBEDDING_DIM));
    }

    #[test]
    fn scenario_router_separates_classes() {
        let (model, data) = variance_scenario(4, 10).unwrap();
        let (_, sel) = model.forward_uniform_batch(data.features()).unwrap();
        for (s, &y) in sel.iter().zip(data.labels()) {
            assert_eq!(s.experts[0], if y == 0 { 1 } else { 0 });
        }
        assert!(homogeneity_warning(&model).is_none());
    }

    #[test]
    fn stats_correct_over_all_comparisons() {
        let input = StatsInput {
            paired: vec![PairedScores {
                name: "d".into(),
                a: vec![1.0, 2.0, 3.0, 4.0, 5.0],
                b: vec![0.0; 5],
            }],
            levene: vec![],
            spearman: vec![PairedScores {
                name: "r".into(),
                a: vec![1.0, 2.0, 3.0, 4.0],
                b: vec![1.0, 3.0, 2.0, 4.0],
            }],
        };
        let out = run_stats(&input).unwrap();
        assert_eq!(out.len(), 2);
        assert!(out.iter().all(|s| s.entry.corrected_alpha == 0.025));
        assert!(out[0].entry.verdict.starts_with("significant"));
    }

    #[test]
    fn train_expert_is_deterministic() {
        let c = tiny();
        let a = deterministic_json(&cmd_train_expert(&c).unwrap().1).unwrap();
        let b = deterministic_json(&cmd_train_expert(&c).unwrap().1).unwrap();
        assert_eq!(a, b);
    }
}
