//! Hypothesis tests used to compare configurations.

use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;

use crate::error::{Error, Result};

pub const DEFAULT_ALPHA: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatTest {
    PairedT,
    Levene,
    Spearman,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatResult {
    pub test: StatTest,
    pub statistic: f64,
    pub p_value: f64,
    /// Cohen's d for paired tests.
    pub effect_size: Option<f64>,
    pub corrected_alpha: f64,
}

impl StatResult {
    pub fn significant(&self) -> bool {
        self.p_value < self.corrected_alpha
    }

    pub fn with_comparisons(mut self, n: usize) -> Result<Self> {
        self.corrected_alpha = bonferroni(DEFAULT_ALPHA, n)?;
        Ok(self)
    }
}

pub fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Sample standard deviation (`n − 1` denominator); 0 for fewer than 2 values.
pub fn sample_sd(x: &[f64]) -> f64 {
    if x.len() < 2 {
        return 0.0;
    }
    let m = mean(x);
    (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() - 1) as f64).sqrt()
}

/// Student-t CDF with `dof` degrees of freedom.
pub fn t_cdf(t: f64, dof: f64) -> f64 {
    let tail = 0.5 * beta_reg(dof / 2.0, 0.5, dof / (dof + t * t));
    if t >= 0.0 {
        1.0 - tail
    } else {
        tail
    }
}

/// Two-sided p-value for a t statistic.
pub fn t_two_sided_p(t: f64, dof: f64) -> f64 {
    if t.is_infinite() {
        return 0.0;
    }
    beta_reg(dof / 2.0, 0.5, dof / (dof + t * t)).clamp(0.0, 1.0)
}

/// F-distribution CDF.
pub fn f_cdf(f: f64, d1: f64, d2: f64) -> f64 {
    if f <= 0.0 {
        return 0.0;
    }
    if f.is_infinite() {
        return 1.0;
    }
    beta_reg(d1 / 2.0, d2 / 2.0, d1 * f / (d1 * f + d2)).clamp(0.0, 1.0)
}

/// Upper tail of the F distribution, computed directly so tiny p-values do
/// not cancel to zero.
pub fn f_sf(f: f64, d1: f64, d2: f64) -> f64 {
    if f <= 0.0 {
        return 1.0;
    }
    if f.is_infinite() {
        return 0.0;
    }
    beta_reg(d2 / 2.0, d1 / 2.0, d2 / (d2 + d1 * f)).clamp(0.0, 1.0)
}

/// Paired two-sided t-test on `a − b`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<StatResult> {
    if a.len() != b.len() {
        return Err(Error::shape(format!("{} samples", a.len()), format!("{} samples", b.len())));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::Degenerate(format!("paired t-test needs n >= 2, got {n}")));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let (m, sd) = (mean(&d), sample_sd(&d));
    if sd == 0.0 {
        return Err(Error::Degenerate("paired differences have zero variance".into()));
    }
    let t = m / (sd / (n as f64).sqrt());
    Ok(StatResult {
        test: StatTest::PairedT,
        statistic: t,
        p_value: t_two_sided_p(t, (n - 1) as f64),
        effect_size: Some(m / sd),
        corrected_alpha: DEFAULT_ALPHA,
    })
}

/// One-way ANOVA `(F, p)`. Zero spread everywhere gives `F = 0, p = 1`;
/// zero within-group spread with differing means gives `F = ∞, p = 0`.
pub fn anova_oneway(groups: &[Vec<f64>]) -> Result<(f64, f64)> {
    if groups.len() < 2 {
        return Err(Error::Degenerate("need at least 2 groups".into()));
    }
    if let Some(g) = groups.iter().find(|g| g.len() < 2) {
        return Err(Error::Degenerate(format!("group of size {} (need >= 2)", g.len())));
    }
    let k = groups.len();
    let total: usize = groups.iter().map(Vec::len).sum();
    let grand = groups.iter().flatten().sum::<f64>() / total as f64;
    let mut between = 0.0;
    let mut within = 0.0;
    for g in groups {
        let m = mean(g);
        between += g.len() as f64 * (m - grand).powi(2);
        within += g.iter().map(|v| (v - m).powi(2)).sum::<f64>();
    }
    let (d1, d2) = ((k - 1) as f64, (total - k) as f64);
    // Treat rounding-level spread as exact ties.
    let scale = groups.iter().flatten().map(|v| v.abs()).fold(0.0, f64::max).max(1e-300);
    let tiny = (scale * 1e-12).powi(2) * total as f64;
    if between <= tiny {
        return Ok((0.0, 1.0));
    }
    if within <= tiny {
        return Ok((f64::INFINITY, 0.0));
    }
    let f = (between / d1) / (within / d2);
    Ok((f, f_sf(f, d1, d2)))
}

/// Mean-centered Levene test for equal variances.
pub fn levene_test(groups: &[Vec<f64>]) -> Result<StatResult> {
    if let Some(g) = groups.iter().find(|g| g.len() < 2) {
        return Err(Error::Degenerate(format!("Levene group of size {} (need >= 2)", g.len())));
    }
    let deviations: Vec<Vec<f64>> = groups
        .iter()
        .map(|g| {
            let m = mean(g);
            g.iter().map(|v| (v - m).abs()).collect()
        })
        .collect();
    let (f, p) = anova_oneway(&deviations)?;
    Ok(StatResult {
        test: StatTest::Levene,
        statistic: f,
        p_value: p,
        effect_size: None,
        corrected_alpha: DEFAULT_ALPHA,
    })
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&i, &j| x[i].total_cmp(&x[j]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    let (ma, mb) = (mean(a), mean(b));
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        return Err(Error::Degenerate("correlation of a constant sequence".into()));
    }
    Ok((cov / (va * vb).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman's rank correlation.
pub fn spearman_rho(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(format!("{} values", a.len()), format!("{} values", b.len())));
    }
    if a.len() < 3 {
        return Err(Error::Degenerate(format!("need at least 3 pairs, got {}", a.len())));
    }
    pearson(&average_ranks(a), &average_ranks(b))
}

/// Spearman's rho with a two-sided p from the t approximation.
pub fn spearman_test(a: &[f64], b: &[f64]) -> Result<StatResult> {
    let rho = spearman_rho(a, b)?;
    let dof = (a.len() - 2) as f64;
    let p = if rho.abs() >= 1.0 {
        0.0
    } else {
        t_two_sided_p(rho * (dof / (1.0 - rho * rho)).sqrt(), dof)
    };
    Ok(StatResult {
        test: StatTest::Spearman,
        statistic: rho,
        p_value: p,
        effect_size: None,
        corrected_alpha: DEFAULT_ALPHA,
    })
}

pub fn bonferroni(alpha: f64, n_comparisons: usize) -> Result<f64> {
    if n_comparisons < 1 {
        return Err(Error::param("n_comparisons", "must be at least 1"));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::param("alpha", format!("{alpha} outside [0, 1]")));
    }
    Ok(alpha / n_comparisons as f64)
}

/// `***` below 0.001, `**` below 0.01, `*` below 0.05, otherwise `ns`.
pub fn significance_label(p: f64) -> &'static str {
    if p < 0.001 {
        "***"
    } else if p < 0.01 {
        "**"
    } else if p < 0.05 {
        "*"
    } else {
        "ns"
    }
}
