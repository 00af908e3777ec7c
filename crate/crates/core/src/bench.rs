//! Latency harness, operation-count energy proxy, synthetic workloads and
//! the JSON bench report.

use std::collections::BTreeMap;
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::audio::{EmbeddingTable, EMBEDDING_DIM};
use crate::bitwise::popcount_words;
use crate::error::{Error, Result};
use crate::quant::{QuantScheme, QuantizedLayer};
use crate::stats::{levene_test, mean, sample_sd, significance_label, StatResult};
use crate::tensor::{Matrix, Rng};

/// Held for the whole of every timed bench so two configurations never
/// interleave their timed regions.
static BENCH_LOCK: Mutex<()> = Mutex::new(());

/// Anything the harness can time over a batch of embeddings.
pub trait Inference {
    fn infer(&self, x: &Matrix) -> Result<Matrix>;
}

/// Platform adapter for peak resident memory. The portable core ships no
/// implementation that reads OS counters.
pub trait PeakMemoryProbe {
    fn peak_bytes(&self) -> Option<u64>;
}

/// Probe for platforms without a memory adapter.
pub struct NoMemoryProbe;

impl PeakMemoryProbe for NoMemoryProbe {
    fn peak_bytes(&self) -> Option<u64> {
        None
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencySample {
    pub config_id: String,
    pub run_index: usize,
    pub wall_ms: f64,
    pub batch_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencySummary {
    pub mean_ms: f64,
    pub sd_ms: f64,
    pub min: f64,
    pub max: f64,
    pub runs: usize,
}

impl LatencySummary {
    pub fn from_samples(samples: &[LatencySample]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Data("no latency samples".into()));
        }
        let ms: Vec<f64> = samples.iter().map(|s| s.wall_ms).collect();
        Ok(LatencySummary {
            mean_ms: mean(&ms),
            sd_ms: sample_sd(&ms),
            min: ms.iter().cloned().fold(f64::INFINITY, f64::min),
            max: ms.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            runs: ms.len(),
        })
    }
}

pub const MIN_RUNS: usize = 5;

/// Times `run` once per run after `warmup` discarded calls. The closure
/// receives the run index (warmup calls see indices past the timed ones).
pub fn time_runs<F>(config_id: &str, batch_size: usize, runs: usize, warmup: usize, mut run: F) -> Result<Vec<LatencySample>>
where
    F: FnMut(usize) -> Result<()>,
{
    if runs < MIN_RUNS {
        return Err(Error::param("runs", format!("need at least {MIN_RUNS}, got {runs}")));
    }
    if warmup < 1 {
        return Err(Error::param("warmup", "need at least 1 warmup run"));
    }
    let _guard = BENCH_LOCK.lock().unwrap_or_else(|p| p.into_inner());
    for w in 0..warmup {
        run(runs + w)?;
    }
    let mut out = Vec::with_capacity(runs);
    for i in 0..runs {
        let start = Instant::now();
        run(i)?;
        let ms = start.elapsed().as_secs_f64() * 1e3;
        out.push(LatencySample {
            config_id: config_id.to_string(),
            run_index: i,
            wall_ms: ms.max(1e-6),
            batch_size,
        });
    }
    Ok(out)
}

/// Wall time of `model` over the whole workload, per run.
pub fn run_latency_bench(
    config_id: &str,
    model: &dyn Inference,
    workload: &EmbeddingTable,
    runs: usize,
    warmup: usize,
) -> Result<Vec<LatencySample>> {
    if workload.rows() == 0 {
        return Err(Error::Data("empty workload".into()));
    }
    let x = workload.to_matrix();
    time_runs(config_id, workload.rows(), runs, warmup, |_| {
        std::hint::black_box(model.infer(std::hint::black_box(&x))?);
        Ok(())
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceReport {
    pub uniform: LatencySummary,
    pub curious: LatencySummary,
    /// `1 − sd_curious / sd_uniform`.
    pub sd_reduction: f64,
    /// `1 − var_curious / var_uniform`.
    pub variance_reduction: f64,
    pub levene: StatResult,
}

pub fn variance_reduction_report(uniform: &[LatencySample], curious: &[LatencySample]) -> Result<VarianceReport> {
    let u = LatencySummary::from_samples(uniform)?;
    let c = LatencySummary::from_samples(curious)?;
    let (sd_reduction, variance_reduction) = if u.sd_ms == 0.0 {
        (0.0, 0.0)
    } else {
        (1.0 - c.sd_ms / u.sd_ms, 1.0 - (c.sd_ms / u.sd_ms).powi(2))
    };
    let groups = [
        uniform.iter().map(|s| s.wall_ms).collect::<Vec<_>>(),
        curious.iter().map(|s| s.wall_ms).collect::<Vec<_>>(),
    ];
    Ok(VarianceReport {
        uniform: u,
        curious: c,
        sd_reduction,
        variance_reduction,
        levene: levene_test(&groups)?,
    })
}

/// Cost units per operation. Defaults are order-of-magnitude figures and can
/// be overridden from configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostTable {
    pub fp32_mac: f64,
    /// Integer MAC cost keyed by bit width.
    pub int_mac: BTreeMap<u8, f64>,
    pub ternary_add: f64,
    pub popcount_word: f64,
}

impl Default for CostTable {
    fn default() -> Self {
        CostTable {
            fp32_mac: 4.6,
            int_mac: [(1, 0.05), (2, 0.07), (4, 0.12), (8, 0.23), (16, 0.8)].into_iter().collect(),
            ternary_add: 0.03,
            popcount_word: 0.1,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCounts {
    pub fp32_macs: u64,
    pub int_macs: BTreeMap<u8, u64>,
    pub ternary_adds: u64,
    pub popcount_words: u64,
}

impl OpCounts {
    /// Per-inference counts of one layer.
    pub fn for_layer(layer: &QuantizedLayer) -> Self {
        let dense = (layer.in_dim * layer.out_dim) as u64;
        let mut c = OpCounts::default();
        match layer.scheme {
            QuantScheme::Float32 => c.fp32_macs = dense,
            QuantScheme::BitLinear(k) => {
                c.int_macs.insert(k.get(), dense);
            }
            QuantScheme::Ternary => c.ternary_adds = dense,
            QuantScheme::BitwiseBinary => c.popcount_words = popcount_words(layer.in_dim, layer.out_dim),
        }
        c
    }

    pub fn add(&mut self, other: &OpCounts) {
        self.fp32_macs += other.fp32_macs;
        for (k, v) in &other.int_macs {
            *self.int_macs.entry(*k).or_insert(0) += v;
        }
        self.ternary_adds += other.ternary_adds;
        self.popcount_words += other.popcount_words;
    }

    pub fn scaled(&self, times: u64) -> OpCounts {
        OpCounts {
            fp32_macs: self.fp32_macs * times,
            int_macs: self.int_macs.iter().map(|(k, v)| (*k, v * times)).collect(),
            ternary_adds: self.ternary_adds * times,
            popcount_words: self.popcount_words * times,
        }
    }

    pub fn for_layers(layers: &[QuantizedLayer]) -> Self {
        let mut c = OpCounts::default();
        for l in layers {
            c.add(&OpCounts::for_layer(l));
        }
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyProxy {
    pub counts: OpCounts,
    pub costs: CostTable,
    pub total_units: f64,
}

impl EnergyProxy {
    pub fn new(counts: OpCounts, costs: CostTable) -> Result<Self> {
        let mut total = counts.fp32_macs as f64 * costs.fp32_mac;
        for (k, n) in &counts.int_macs {
            let c = costs
                .int_mac
                .get(k)
                .ok_or_else(|| Error::Config(format!("cost table has no entry for {k}-bit MACs")))?;
            total += *n as f64 * c;
        }
        total += counts.ternary_adds as f64 * costs.ternary_add;
        total += counts.popcount_words as f64 * costs.popcount_word;
        Ok(EnergyProxy {
            counts,
            costs,
            total_units: total,
        })
    }
}

/// Labeled table: a random unit-norm 1024-dim centre per class plus
/// isotropic Gaussian noise of standard deviation `spread`. Rows are grouped
/// by class.
pub fn synth_dataset(num_classes: usize, samples_per_class: usize, spread: f32, seed: u64) -> Result<EmbeddingTable> {
    if num_classes < 2 {
        return Err(Error::param("num_classes", "need at least 2 classes"));
    }
    if !(spread >= 0.0) {
        return Err(Error::param("spread", "must be non-negative"));
    }
    let root = Rng::new(seed);
    let mut center_rng = root.fork(1);
    let mut noise_rng = root.fork(2);
    let centers: Vec<Vec<f32>> = (0..num_classes)
        .map(|_| {
            let v: Vec<f64> = (0..EMBEDDING_DIM).map(|_| center_rng.normal()).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter().map(|x| (x / norm) as f32).collect()
        })
        .collect();
    let mut data = Vec::with_capacity(num_classes * samples_per_class * EMBEDDING_DIM);
    let mut labels = Vec::with_capacity(num_classes * samples_per_class);
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..samples_per_class {
            data.extend(center.iter().map(|&m| m + spread * noise_rng.normal() as f32));
            labels.push(c as u32);
        }
    }
    EmbeddingTable::new(data, Some(labels))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SizeSummary {
    pub bytes: usize,
    pub reduction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct F1Summary {
    pub mean: f64,
    pub sd: f64,
    pub folds: Vec<f64>,
}

impl F1Summary {
    pub fn from_folds(folds: Vec<f64>) -> Self {
        F1Summary {
            mean: if folds.is_empty() { 0.0 } else { mean(&folds) },
            sd: sample_sd(&folds),
            folds,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatEntry {
    pub test: crate::stats::StatTest,
    pub statistic: f64,
    pub p: f64,
    pub effect_size: Option<f64>,
    pub corrected_alpha: f64,
    pub verdict: String,
}

impl From<&StatResult> for StatEntry {
    fn from(r: &StatResult) -> Self {
        let verdict = if r.significant() {
            format!("significant {}", significance_label(r.p_value))
        } else {
            "not significant".to_string()
        };
        StatEntry {
            test: r.test,
            statistic: r.statistic,
            p: r.p_value,
            effect_size: r.effect_size,
            corrected_alpha: r.corrected_alpha,
            verdict,
        }
    }
}

/// Fields whose values depend on wall-clock timing.
pub const TIMING_FIELDS: [&str; 1] = ["latency"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub config_id: String,
    /// Wall-clock timing; the only non-deterministic field.
    pub latency: Option<LatencySummary>,
    pub energy_proxy: Option<EnergyProxy>,
    pub size: Option<SizeSummary>,
    pub f1: Option<F1Summary>,
    pub stats: Vec<StatEntry>,
}

impl BenchReport {
    pub fn new(config_id: impl Into<String>) -> Self {
        BenchReport {
            config_id: config_id.into(),
            latency: None,
            energy_proxy: None,
            size: None,
            f1: None,
            stats: Vec::new(),
        }
    }

    /// The report with timing fields removed.
    pub fn deterministic(&self) -> BenchReport {
        BenchReport {
            latency: None,
            ..self.clone()
        }
    }
}
