//! Paired comparison of two experimental conditions: Shapiro–Wilk normality
//! gate, paired t-test or Wilcoxon signed-rank, paired Cohen's d.

use std::io::Read;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::gamma::ln_gamma;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("invalid input: {0}")]
    Input(String),
    #[error("degenerate sample: {0}")]
    Degenerate(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, StatsError>;

/// Paired per-run outcomes. Differences are taken as `b - a`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedSamples {
    pub condition_a: Vec<f64>,
    pub condition_b: Vec<f64>,
}

impl PairedSamples {
    pub fn new(condition_a: Vec<f64>, condition_b: Vec<f64>) -> Result<Self> {
        if condition_a.len() != condition_b.len() {
            return Err(StatsError::Input(format!("{} vs {} observations", condition_a.len(), condition_b.len())));
        }
        if condition_a.len() < 2 {
            return Err(StatsError::Input("need at least two pairs".into()));
        }
        if condition_a.iter().chain(&condition_b).any(|v| !v.is_finite()) {
            return Err(StatsError::Input("non-finite observation".into()));
        }
        Ok(Self { condition_a, condition_b })
    }

    pub fn n(&self) -> usize {
        self.condition_a.len()
    }

    pub fn differences(&self) -> Vec<f64> {
        self.condition_a.iter().zip(&self.condition_b).map(|(a, b)| b - a).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    PairedT,
    Wilcoxon,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::PairedT => "paired t-test",
            Method::Wilcoxon => "Wilcoxon signed-rank",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub method: Method,
    pub n: usize,
    /// t for the paired t-test, `min(W+, W-)` for Wilcoxon.
    pub statistic: f64,
    pub df: Option<f64>,
    pub p_value: f64,
    /// Paired Cohen's d; absent when the differences have zero spread.
    pub effect_size_d: Option<f64>,
    pub mean_diff: f64,
    pub sd_diff: f64,
    pub normality_w: Option<f64>,
    pub normality_p: Option<f64>,
}

fn mean_sd(d: &[f64]) -> (f64, f64) {
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let ss: f64 = d.iter().map(|x| (x - mean).powi(2)).sum();
    (mean, (ss / (n - 1.0)).sqrt())
}

// ---------------------------------------------------------------------------
// Special functions

/// Continued fraction for the incomplete beta (modified Lentz).
fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let (qab, qap, qam) = (a + b, a + 1.0, a - 1.0);
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=10_000 {
        let m = f64::from(m);
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < 1e-16 {
            break;
        }
    }
    h
}

/// Regularized incomplete beta `I_x(a, b)`.
pub fn reg_inc_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (-x).ln_1p();
    if x < (a + 1.0) / (a + b + 2.0) {
        ln_front.exp() * beta_cf(a, b, x) / a
    } else {
        1.0 - ln_front.exp() * beta_cf(b, a, 1.0 - x) / b
    }
}

/// `P(|T| >= |t|)` for Student's t with `df` degrees of freedom.
pub fn student_t_two_sided_p(t: f64, df: f64) -> f64 {
    reg_inc_beta(df / 2.0, 0.5, df / (df + t * t)).clamp(0.0, 1.0)
}

pub fn student_t_cdf(t: f64, df: f64) -> f64 {
    let tail = student_t_two_sided_p(t, df) / 2.0;
    if t >= 0.0 {
        1.0 - tail
    } else {
        tail
    }
}

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("standard normal")
}

// ---------------------------------------------------------------------------
// Hypothesis tests

/// Paired Cohen's d: mean difference over the sample standard deviation of
/// the differences.
pub fn cohens_d_paired(samples: &PairedSamples) -> Result<f64> {
    let (mean, sd) = mean_sd(&samples.differences());
    if sd == 0.0 {
        return Err(StatsError::Degenerate("differences have zero variance".into()));
    }
    Ok(mean / sd)
}

pub fn paired_t_test(samples: &PairedSamples) -> Result<TestResult> {
    let d = samples.differences();
    let (mean, sd) = mean_sd(&d);
    if sd == 0.0 {
        return Err(StatsError::Degenerate("differences have zero variance".into()));
    }
    let n = d.len() as f64;
    let t = mean / (sd / n.sqrt());
    let df = n - 1.0;
    Ok(TestResult {
        method: Method::PairedT,
        n: d.len(),
        statistic: t,
        df: Some(df),
        p_value: student_t_two_sided_p(t, df),
        effect_size_d: Some(mean / sd),
        mean_diff: mean,
        sd_diff: sd,
        normality_w: None,
        normality_p: None,
    })
}

/// Average ranks of `values` (1-based), ties sharing their midrank.
fn midranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Exact enumeration is used up to this many nonzero differences.
pub const WILCOXON_EXACT_MAX: usize = 20;

/// Two-sided Wilcoxon signed-rank test on the paired differences. Zero
/// differences are dropped; tied magnitudes share midranks.
pub fn wilcoxon_signed_rank(samples: &PairedSamples) -> Result<TestResult> {
    let all = samples.differences();
    let d: Vec<f64> = all.iter().copied().filter(|&x| x != 0.0).collect();
    if d.is_empty() {
        return Err(StatsError::Degenerate("all differences are zero".into()));
    }
    let m = d.len();
    let ranks = midranks(&d.iter().map(|x| x.abs()).collect::<Vec<_>>());
    let w_plus: f64 = d.iter().zip(&ranks).filter(|(x, _)| **x > 0.0).map(|(_, r)| r).sum();
    let total = (m * (m + 1)) as f64 / 2.0;
    let w = w_plus.min(total - w_plus);
    let p = if m <= WILCOXON_EXACT_MAX {
        // Midranks are multiples of 1/2, so doubled ranks are integers and the
        // null distribution over all 2^m sign patterns is a subset-sum count.
        let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
        let t2: usize = doubled.iter().sum();
        let mut counts = vec![0u64; t2 + 1];
        counts[0] = 1;
        for &r in &doubled {
            for s in (r..=t2).rev() {
                counts[s] += counts[s - r];
            }
        }
        let w2 = (2.0 * w).round() as usize;
        let extreme: u64 = (0..=t2).filter(|&s| s.min(t2 - s) <= w2).map(|s| counts[s]).sum();
        extreme as f64 / (1u64 << m) as f64
    } else {
        let mf = m as f64;
        let mean = mf * (mf + 1.0) / 4.0;
        let mut tie_term = 0.0;
        let mut sorted = ranks.clone();
        sorted.sort_by(f64::total_cmp);
        let mut i = 0;
        while i < sorted.len() {
            let j = sorted[i..].iter().take_while(|&&r| r == sorted[i]).count();
            let t = j as f64;
            tie_term += t * t * t - t;
            i += j;
        }
        let var = mf * (mf + 1.0) * (2.0 * mf + 1.0) / 24.0 - tie_term / 48.0;
        let z = ((mean - w).abs() - 0.5).max(0.0) / var.sqrt();
        2.0 * std_normal().sf(z)
    };
    let (mean, sd) = mean_sd(&all);
    Ok(TestResult {
        method: Method::Wilcoxon,
        n: all.len(),
        statistic: w,
        df: None,
        p_value: p.clamp(0.0, 1.0),
        effect_size_d: (sd > 0.0).then(|| mean / sd),
        mean_diff: mean,
        sd_diff: sd,
        normality_w: None,
        normality_p: None,
    })
}

fn poly(c: &[f64], x: f64) -> f64 {
    c.iter().rev().fold(0.0, |acc, &k| acc * x + k)
}

/// Shapiro–Wilk W and p-value by Royston's AS R94 approximation.
pub fn shapiro_wilk(values: &[f64]) -> Result<(f64, f64)> {
    const C1: [f64; 6] = [0.0, 0.221157, -0.147981, -2.071190, 4.434685, -2.706056];
    const C2: [f64; 6] = [0.0, 0.042981, -0.293762, -1.752461, 5.682633, -3.582633];
    const C3: [f64; 4] = [0.5440, -0.39978, 0.025054, -6.714e-4];
    const C4: [f64; 4] = [1.3822, -0.77857, 0.062767, -0.0020322];
    const C5: [f64; 4] = [-1.5861, -0.31082, -0.083751, 0.0038915];
    const C6: [f64; 3] = [-0.4803, -0.082676, 0.0030302];
    const G: [f64; 2] = [-2.273, 0.459];

    let n = values.len();
    if !(3..=5000).contains(&n) {
        return Err(StatsError::Input(format!("shapiro-wilk needs 3..=5000 values, got {n}")));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(StatsError::Input("non-finite value".into()));
    }
    let mut x = values.to_vec();
    x.sort_by(f64::total_cmp);
    if x[n - 1] - x[0] <= 0.0 {
        return Err(StatsError::Degenerate("all values are equal".into()));
    }
    let nf = n as f64;
    let half = n / 2;
    let normal = std_normal();

    // Coefficients for the lower half, stored positive.
    let mut a = vec![0f64; half];
    if n == 3 {
        a[0] = std::f64::consts::FRAC_1_SQRT_2;
    } else {
        let an25 = nf + 0.25;
        let m: Vec<f64> = (0..half).map(|i| normal.inverse_cdf((i as f64 + 1.0 - 0.375) / an25)).collect();
        let summ2 = 2.0 * m.iter().map(|v| v * v).sum::<f64>();
        let ssumm2 = summ2.sqrt();
        let rsn = 1.0 / nf.sqrt();
        let a1 = poly(&C1, rsn) - m[0] / ssumm2;
        let (first, fac) = if n > 5 {
            let a2 = -m[1] / ssumm2 + poly(&C2, rsn);
            let fac = ((summ2 - 2.0 * m[0] * m[0] - 2.0 * m[1] * m[1]) / (1.0 - 2.0 * a1 * a1 - 2.0 * a2 * a2)).sqrt();
            a[1] = a2;
            (2, fac)
        } else {
            let fac = ((summ2 - 2.0 * m[0] * m[0]) / (1.0 - 2.0 * a1 * a1)).sqrt();
            (1, fac)
        };
        a[0] = a1;
        for i in first..half {
            a[i] = -m[i] / fac;
        }
    }

    let mean = x.iter().sum::<f64>() / nf;
    let ss: f64 = x.iter().map(|v| (v - mean).powi(2)).sum();
    let num: f64 = (0..half).map(|i| a[i] * (x[n - 1 - i] - x[i])).sum();
    let w = (num * num / ss).min(1.0);

    if n == 3 {
        let p = (6.0 / std::f64::consts::PI) * (w.sqrt().asin() - std::f64::consts::FRAC_PI_3);
        return Ok((w, p.clamp(0.0, 1.0)));
    }
    let w1 = 1.0 - w;
    if w1 <= 0.0 {
        return Ok((w, 1.0));
    }
    let mut y = w1.ln();
    let (m, s) = if n <= 11 {
        let gamma = poly(&G, nf);
        if y >= gamma {
            return Ok((w, 0.0));
        }
        y = -(gamma - y).ln();
        (poly(&C3, nf), poly(&C4, nf).exp())
    } else {
        let ln_n = nf.ln();
        (poly(&C5, ln_n), poly(&C6, ln_n).exp())
    };
    Ok((w, normal.sf((y - m) / s)))
}

/// Normality gate on the differences, then the paired t-test when the
/// Shapiro–Wilk p-value is at least `alpha`, otherwise Wilcoxon.
pub fn compare_conditions(samples: &PairedSamples, alpha: f64) -> Result<TestResult> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(StatsError::Input(format!("alpha {alpha} outside (0, 1)")));
    }
    let d = samples.differences();
    let (w, p) = shapiro_wilk(&d)?;
    let mut result = if p >= alpha { paired_t_test(samples)? } else { wilcoxon_signed_rank(samples)? };
    result.effect_size_d = Some(cohens_d_paired(samples)?);
    result.normality_w = Some(w);
    result.normality_p = Some(p);
    Ok(result)
}

// ---------------------------------------------------------------------------
// I/O

/// Per-run values of `metric` from a run table CSV, skipping the `mean` and
/// `std` summary rows.
pub fn read_metric_column<R: Read>(reader: R, metric: &str) -> Result<Vec<f64>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = headers.iter().position(|h| h == metric).ok_or_else(|| StatsError::Input(format!("no column `{metric}`")))?;
    let run_col = headers.iter().position(|h| h == "run").ok_or_else(|| StatsError::Input("no `run` column".into()))?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        if matches!(&rec[run_col], "mean" | "std") {
            continue;
        }
        let v: f64 = rec[col].parse().map_err(|_| StatsError::Input(format!("bad {metric} value `{}`", &rec[col])))?;
        out.push(v);
    }
    Ok(out)
}

/// One row of a comparison table.
pub fn markdown_row(metric: &str, r: &TestResult) -> String {
    let stat = match (r.method, r.df) {
        (Method::PairedT, Some(df)) => format!("{:.2} ({df})", r.statistic),
        _ => format!("W = {}", r.statistic),
    };
    let d = r.effect_size_d.map_or_else(|| "n/a".to_string(), |d| format!("{d:.2}"));
    format!("| {metric} | {:+.2} | {stat} | {:.4} | {d} |", r.mean_diff * 100.0, r.p_value)
}

pub fn markdown_table(rows: &[(String, TestResult)]) -> String {
    let mut out = String::from("| Metric | Diff. (pp) | t (df) | p | Cohen's d |\n|---|---|---|---|---|\n");
    for (metric, r) in rows {
        out.push_str(&markdown_row(metric, r));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;
    use proptest::prelude::*;

    fn pairs(d: &[f64]) -> PairedSamples {
        PairedSamples::new(vec![0.0; d.len()], d.to_vec()).unwrap()
    }

    /// Closed-form two-sided tail for integer df (finite trigonometric series).
    fn t_tail_series(t: f64, df: u32) -> f64 {
        let theta = (t.abs() / f64::from(df).sqrt()).atan();
        let (s, c) = theta.sin_cos();
        let inside = if df % 2 == 1 {
            let mut sum = 0.0;
            if df > 1 {
                let mut term = c;
                sum = term;
                let mut k = 3;
                while k <= df - 2 {
                    term *= c * c * f64::from(k - 1) / f64::from(k);
                    sum += term;
                    k += 2;
                }
            }
            2.0 / std::f64::consts::PI * (theta + s * sum)
        } else {
            let mut term = 1.0;
            let mut sum = 1.0;
            let mut k = 2;
            while k <= df - 2 {
                term *= c * c * f64::from(k - 1) / f64::from(k);
                sum += term;
                k += 2;
            }
            s * sum
        };
        1.0 - inside
    }

    #[test]
    fn t_tail_matches_series() {
        let mut worst: f64 = 0.0;
        for df in 1..=50 {
            for i in 0..=100 {
                let t = -10.0 + 0.2 * f64::from(i);
                let err = (student_t_two_sided_p(t, f64::from(df)) - t_tail_series(t, df)).abs();
                worst = worst.max(err);
            }
        }
        assert!(worst < 1e-10, "{worst:e}");
        assert!((student_t_cdf(0.0, 7.0) - 0.5).abs() < 1e-15);
        assert!((student_t_cdf(1.3, 4.0) + student_t_cdf(-1.3, 4.0) - 1.0).abs() < 1e-14);
    }

    #[test]
    fn incomplete_beta_closed_forms() {
        // I_x(1, b) = 1 - (1 - x)^b and I_x(a, 1) = x^a.
        for &x in &[0.01, 0.3, 0.5, 0.77, 0.999] {
            assert!((reg_inc_beta(1.0, 3.5, x) - (1.0 - (1.0f64 - x).powf(3.5))).abs() < 1e-13);
            assert!((reg_inc_beta(2.5, 1.0, x) - x.powf(2.5)).abs() < 1e-13);
        }
    }

    #[test]
    fn paired_t_worked_example() {
        let r = paired_t_test(&pairs(&[1.0, 2.0, 3.0])).unwrap();
        assert!((r.statistic - 2.0 * 3f64.sqrt()).abs() < 1e-12);
        assert_eq!(r.df, Some(2.0));
        assert!((r.p_value - 0.0742).abs() < 1e-3);
        // Exact: for df 2, p = 1 - t / sqrt(t^2 + 2) = 1 - sqrt(12/14).
        assert!((r.p_value - (1.0 - (12.0f64 / 14.0).sqrt())).abs() < 1e-12);
        assert_eq!(r.effect_size_d, Some(2.0));
        assert_eq!((r.mean_diff, r.sd_diff), (2.0, 1.0));
        assert!((r.effect_size_d.unwrap() - r.statistic / 3f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn degenerate_inputs() {
        let same = PairedSamples::new(vec![0.8, 0.9, 0.7], vec![0.8, 0.9, 0.7]).unwrap();
        assert!(matches!(paired_t_test(&same), Err(StatsError::Degenerate(_))));
        assert!(matches!(wilcoxon_signed_rank(&same), Err(StatsError::Degenerate(_))));
        assert!(matches!(cohens_d_paired(&pairs(&[0.5, 0.5, 0.5])), Err(StatsError::Degenerate(_))));
        assert!(PairedSamples::new(vec![1.0], vec![2.0]).is_err());
        assert!(PairedSamples::new(vec![1.0, 2.0], vec![2.0]).is_err());
        assert!(PairedSamples::new(vec![1.0, f64::NAN], vec![2.0, 3.0]).is_err());
    }

    #[test]
    fn reported_d_and_t_are_consistent() {
        // With n = 10 runs, d = 1.80 implies t = d·√10.
        let t = 1.80 * 10f64.sqrt();
        assert!((t - 5.72).abs() < 0.05, "{t}");
    }

    #[test]
    fn wilcoxon_examples() {
        let r = wilcoxon_signed_rank(&pairs(&[1.0, 2.0, 3.0, 4.0, 5.0])).unwrap();
        assert_eq!(r.statistic, 0.0);
        assert_eq!(r.p_value, 0.0625);
        let r = wilcoxon_signed_rank(&pairs(&[-1.0, 1.0])).unwrap();
        assert_eq!(r.p_value, 1.0);
        let r = wilcoxon_signed_rank(&pairs(&[1.0, -2.0, 3.0, 4.0])).unwrap();
        assert_eq!(r.statistic, 2.0);
        // W+ <= 2 for {}, {1}, {2}; mirrored for W-: 6 of 16 patterns.
        assert_eq!(r.p_value, 6.0 / 16.0);
        // Zeros are dropped before ranking.
        let r0 = wilcoxon_signed_rank(&pairs(&[0.0, 1.0, -2.0, 0.0, 3.0, 4.0])).unwrap();
        assert_eq!(r0.p_value, r.p_value);
    }

    /// Brute force over all 2^m sign patterns.
    fn enumeration_p(d: &[f64]) -> f64 {
        let nz: Vec<f64> = d.iter().copied().filter(|&x| x != 0.0).collect();
        let m = nz.len();
        let ranks = midranks(&nz.iter().map(|x| x.abs()).collect::<Vec<_>>());
        let total: f64 = ranks.iter().sum();
        let wp: f64 = nz.iter().zip(&ranks).filter(|(x, _)| **x > 0.0).map(|(_, r)| r).sum();
        let obs = wp.min(total - wp);
        let mut hits = 0u64;
        for mask in 0u64..(1 << m) {
            let s: f64 = (0..m).filter(|i| mask >> i & 1 == 1).map(|i| ranks[i]).sum();
            if s.min(total - s) <= obs + 1e-9 {
                hits += 1;
            }
        }
        hits as f64 / (1u64 << m) as f64
    }

    #[test]
    fn wilcoxon_exact_matches_enumeration() {
        let mut rng = SplitMix64::new(2024);
        for _ in 0..200 {
            let m = 2 + rng.below(11) as usize;
            // Coarse values so that ties and zeros occur.
            let d: Vec<f64> = (0..m).map(|_| (rng.below(9) as f64 - 4.0) * 0.5).collect();
            if d.iter().all(|&x| x == 0.0) {
                continue;
            }
            let r = wilcoxon_signed_rank(&pairs(&d)).unwrap();
            assert_eq!(r.p_value, enumeration_p(&d), "{d:?}");
        }
    }

    #[test]
    fn wilcoxon_normal_approximation_beyond_twenty() {
        // m = 25 all positive, no ties: z = (162.5 - 0.5) / sqrt(1381.25).
        let d: Vec<f64> = (1..=25).map(f64::from).collect();
        let r = wilcoxon_signed_rank(&pairs(&d)).unwrap();
        let z = (162.5 - 0.5) / 1381.25f64.sqrt();
        assert!((r.p_value - 2.0 * std_normal().sf(z)).abs() < 1e-15);
        assert!(r.p_value < 1e-4);
        // Near the threshold the approximation tracks the exact answer.
        let d21: Vec<f64> = (1..=21).map(|i| if i % 3 == 0 { -f64::from(i) } else { f64::from(i) }).collect();
        let approx = wilcoxon_signed_rank(&pairs(&d21)).unwrap().p_value;
        let exact = enumeration_p(&d21);
        assert!((approx - exact).abs() < 0.01, "{approx} {exact}");
    }

    // Reference values from scipy.stats.shapiro (1.15.3), which wraps AS R94.
    const SW_REFERENCE: &[(&[f64], f64, f64)] = &[
        (&[148.0, 154.0, 158.0, 160.0, 161.0, 162.0, 166.0, 170.0, 182.0, 195.0, 236.0, 250.0], 0.7846581748, 0.0063029130),
        (&[2.1, 3.5, 1.2, 7.8], 0.8866120465, 0.3676451940),
        (&[0.5, 1.1, 1.9, 2.2, 3.7, 4.0, 9.5], 0.8271271015, 0.0751444059),
        (&[3.1, 2.7, 4.4, 5.0, 3.3, 2.9, 3.8, 4.1, 6.2, 3.0, 3.6], 0.8958540935, 0.1644071035),
        (
            &[
                -8.0, -5.7303, -3.9364, -2.5625, -1.5524, -0.8503, -0.4001, -0.1458, -0.0315, -0.0012, 0.0012, 0.0315, 0.1458, 0.4001, 0.8503,
                1.5524, 2.5625, 3.9364, 5.7303, 8.0,
            ],
            0.9448643257,
            0.2957658800,
        ),
    ];

    #[test]
    fn shapiro_wilk_reference_values() {
        for (x, w, p) in SW_REFERENCE {
            let (gw, gp) = shapiro_wilk(x).unwrap();
            assert!((gw - w).abs() < 1e-3, "W {gw} vs {w}");
            assert!((gp - p).abs() < 1e-3, "p {gp} vs {p}");
        }
    }

    #[test]
    fn shapiro_wilk_edge_cases() {
        let (w, p) = shapiro_wilk(&[1.0, 2.0, 3.0]).unwrap();
        assert!((w - 1.0).abs() < 1e-12);
        assert!((p - 1.0).abs() < 1e-6);
        let bimodal: Vec<f64> = (0..20).map(|i| if i < 10 { 0.0 } else { 1.0 } + 1e-6 * f64::from(i % 10)).collect();
        assert!(shapiro_wilk(&bimodal).unwrap().1 < 0.01);
        assert!(shapiro_wilk(&[1.0, 2.0]).is_err());
        assert!(matches!(shapiro_wilk(&[4.0; 6]), Err(StatsError::Degenerate(_))));
    }

    #[test]
    fn gate_picks_the_test() {
        let mut rng = SplitMix64::new(17);
        let normal: Vec<f64> = (0..30).map(|_| 0.01 + 0.005 * rng.normal()).collect();
        let r = compare_conditions(&pairs(&normal), 0.05).unwrap();
        assert_eq!(r.method, Method::PairedT);
        assert!(r.normality_p.unwrap() >= 0.05);
        let cauchy: Vec<f64> = (0..30).map(|_| (std::f64::consts::PI * (rng.next_f64() - 0.5)).tan()).collect();
        let r = compare_conditions(&pairs(&cauchy), 0.05).unwrap();
        assert_eq!(r.method, Method::Wilcoxon);
        assert!(r.effect_size_d.is_some() && r.normality_w.is_some());
    }

    #[test]
    fn csv_column_and_markdown() {
        let csv = "run,accuracy,precision,recall,f1\n0,0.9,0.8,0.8,0.8\n1,0.95,0.9,0.9,0.9\nmean,0.925,0.85,0.85,0.85\nstd,0.03,0.07,0.07,0.07\n";
        assert_eq!(read_metric_column(csv.as_bytes(), "accuracy").unwrap(), vec![0.9, 0.95]);
        assert!(read_metric_column(csv.as_bytes(), "auc").is_err());
        let r = paired_t_test(&pairs(&[0.01, 0.02, 0.03])).unwrap();
        let table = markdown_table(&[("Accuracy".into(), r)]);
        assert!(table.starts_with("| Metric | Diff. (pp) | t (df) | p | Cohen's d |"));
        assert!(table.contains("| Accuracy | +2.00 | 3.46 (2) | 0.0742 | 2.00 |"), "{table}");
    }

    fn arb_pairs() -> impl Strategy<Value = PairedSamples> {
        (3usize..15, any::<u64>()).prop_map(|(n, seed)| {
            let mut rng = SplitMix64::new(seed);
            let a: Vec<f64> = (0..n).map(|_| rng.uniform(0.7, 0.95)).collect();
            let b: Vec<f64> = a.iter().map(|x| x + rng.uniform(-0.02, 0.05)).collect();
            PairedSamples::new(a, b).unwrap()
        })
    }

    proptest! {
        #[test]
        fn swapping_conditions_negates(s in arb_pairs()) {
            let swapped = PairedSamples::new(s.condition_b.clone(), s.condition_a.clone()).unwrap();
            let (x, y) = (paired_t_test(&s).unwrap(), paired_t_test(&swapped).unwrap());
            prop_assert!((x.statistic + y.statistic).abs() < 1e-9);
            prop_assert!((x.effect_size_d.unwrap() + y.effect_size_d.unwrap()).abs() < 1e-12);
            prop_assert!((x.mean_diff + y.mean_diff).abs() < 1e-15);
            prop_assert!((x.p_value - y.p_value).abs() < 1e-12);
            let (wx, wy) = (wilcoxon_signed_rank(&s).unwrap(), wilcoxon_signed_rank(&swapped).unwrap());
            prop_assert_eq!(wx.p_value, wy.p_value);
        }

        #[test]
        fn location_and_scale_invariance(s in arb_pairs(), shift in -5.0f64..5.0, scale in 0.1f64..10.0) {
            let moved = PairedSamples::new(
                s.condition_a.iter().map(|v| (v + shift) * scale).collect(),
                s.condition_b.iter().map(|v| (v + shift) * scale).collect(),
            ).unwrap();
            let (x, y) = (paired_t_test(&s).unwrap(), paired_t_test(&moved).unwrap());
            prop_assert!((x.statistic - y.statistic).abs() < 1e-6 * x.statistic.abs().max(1.0));
            prop_assert!((x.p_value - y.p_value).abs() < 1e-6);
            prop_assert!((x.effect_size_d.unwrap() - y.effect_size_d.unwrap()).abs() < 1e-6 * x.effect_size_d.unwrap().abs().max(1.0));
        }

        #[test]
        fn d_times_sd_is_mean_and_d_is_t_over_root_n(s in arb_pairs()) {
            let r = paired_t_test(&s).unwrap();
            let d = cohens_d_paired(&s).unwrap();
            prop_assert!((d * r.sd_diff - r.mean_diff).abs() < 1e-9);
            prop_assert!((d - r.statistic / (s.n() as f64).sqrt()).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&r.p_value));
        }
    }
}
