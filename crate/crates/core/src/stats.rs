//! Two-sided paired t-test with Bonferroni correction.

use std::fmt::{self, Write as _};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::MetricReport;

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("need at least 2 paired observations, got {0}")]
    TooFewPairs(usize),
    #[error("paired vectors differ in length ({a} vs {b}, {labels} labels)")]
    Misaligned { a: usize, b: usize, labels: usize },
    #[error("incomplete beta argument out of domain: x={x}, a={a}, b={b}")]
    Domain { x: f64, a: f64, b: f64 },
    #[error("incomplete beta continued fraction did not converge (x={x}, a={a}, b={b})")]
    NoConvergence { x: f64, a: f64, b: f64 },
    #[error("alpha must lie in (0,1), got {0}")]
    BadAlpha(f64),
    #[error("comparison count m={m} is smaller than the {tests} tests")]
    BadFamily { m: usize, tests: usize },
    #[error("topic sets differ; only in A: [{}], only in B: [{}]", only_a.join(", "), only_b.join(", "))]
    TopicMismatch {
        only_a: Vec<String>,
        only_b: Vec<String>,
    },
    #[error("metric {0} missing from one of the reports")]
    MissingMetric(String),
}

const LANCZOS_G: f64 = 7.0;
const LANCZOS: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

/// `ln Γ(x)` for `x > 0` (Lanczos, g = 7).
pub fn ln_gamma(x: f64) -> f64 {
    if x < 0.5 {
        // reflection
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = LANCZOS[0];
    for (i, &c) in LANCZOS.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + LANCZOS_G + 0.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

const MAX_ITER: usize = 10_000;
const EPS: f64 = 1e-16;
const TINY: f64 = 1e-300;

/// Continued fraction for `I_x(a,b)` by the modified Lentz method.
fn beta_cf(x: f64, a: f64, b: f64) -> Result<f64, StatsError> {
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=MAX_ITER {
        let m = m as f64;
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
        if (del - 1.0).abs() < EPS {
            return Ok(h);
        }
    }
    Err(StatsError::NoConvergence { x, a, b })
}

/// Regularized incomplete beta function `I_x(a, b)`.
pub fn incomplete_beta(x: f64, a: f64, b: f64) -> Result<f64, StatsError> {
    if !(0.0..=1.0).contains(&x) || a.is_nan() || b.is_nan() || a <= 0.0 || b <= 0.0 {
        return Err(StatsError::Domain { x, a, b });
    }
    if x == 0.0 {
        return Ok(0.0);
    }
    if x == 1.0 {
        return Ok(1.0);
    }
    let ln_front =
        ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    // The fraction converges fast on this side of the mean; use symmetry otherwise.
    if x < (a + 1.0) / (a + b + 2.0) {
        Ok((front * beta_cf(x, a, b)? / a).clamp(0.0, 1.0))
    } else {
        Ok((1.0 - front * beta_cf(1.0 - x, b, a)? / b).clamp(0.0, 1.0))
    }
}

/// Two-sided tail probability `P(|T| ≥ |t|)` for Student's t with `df` degrees of freedom.
pub fn t_two_sided_p(t: f64, df: f64) -> Result<f64, StatsError> {
    if t.is_infinite() {
        return Ok(0.0);
    }
    incomplete_beta(df / (df + t * t), df / 2.0, 0.5)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairedSample {
    pub labels: Vec<String>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

impl PairedSample {
    pub fn new(labels: Vec<String>, a: Vec<f64>, b: Vec<f64>) -> Result<Self, StatsError> {
        if a.len() != b.len() || a.len() != labels.len() {
            return Err(StatsError::Misaligned {
                a: a.len(),
                b: b.len(),
                labels: labels.len(),
            });
        }
        if a.len() < 2 {
            return Err(StatsError::TooFewPairs(a.len()));
        }
        Ok(Self { labels, a, b })
    }

    /// Unlabelled sample; labels are the positions.
    pub fn from_vectors(a: Vec<f64>, b: Vec<f64>) -> Result<Self, StatsError> {
        let labels = (0..a.len()).map(|i| i.to_string()).collect();
        Self::new(labels, a, b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub df: usize,
    pub p: f64,
    /// Every difference was identical and nonzero.
    pub degenerate: bool,
}

pub fn paired_t(sample: &PairedSample) -> Result<TTest, StatsError> {
    let n = sample.a.len();
    if n < 2 {
        return Err(StatsError::TooFewPairs(n));
    }
    let d: Vec<f64> = sample.a.iter().zip(&sample.b).map(|(a, b)| a - b).collect();
    let nf = n as f64;
    let mean = d.iter().sum::<f64>() / nf;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (nf - 1.0);
    let sd = var.sqrt();
    let df = n - 1;
    // Differences equal up to rounding count as zero variance.
    let scale = d.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if sd <= 1e-14 * scale.max(f64::MIN_POSITIVE) || sd == 0.0 {
        if mean == 0.0 || scale == 0.0 {
            return Ok(TTest { t: 0.0, df, p: 1.0, degenerate: false });
        }
        let t = if mean > 0.0 { f64::INFINITY } else { f64::NEG_INFINITY };
        return Ok(TTest { t, df, p: 0.0, degenerate: true });
    }
    let t = mean * nf.sqrt() / sd;
    let p = t_two_sided_p(t, df as f64)?;
    Ok(TTest { t, df, p, degenerate: false })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    SigGain,
    SigLoss,
    NotSig,
}

impl Decision {
    pub fn marker(self) -> &'static str {
        match self {
            Decision::SigGain => "▲",
            Decision::SigLoss => "▼",
            Decision::NotSig => "",
        }
    }
}

/// `p < alpha / m` for each p-value.
pub fn bonferroni_decide(p_values: &[f64], alpha: f64, m: usize) -> Result<Vec<bool>, StatsError> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(StatsError::BadAlpha(alpha));
    }
    if m < p_values.len() || m == 0 {
        return Err(StatsError::BadFamily { m, tests: p_values.len() });
    }
    let threshold = alpha / m as f64;
    Ok(p_values.iter().map(|&p| p < threshold).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricComparison {
    pub metric: String,
    pub mean_a: f64,
    pub mean_b: f64,
    /// `(mean_a - mean_b) / mean_b`; `None` when `mean_b` is zero.
    pub relative_gain: Option<f64>,
    pub t_stat: f64,
    pub df: usize,
    pub p_value: f64,
    pub corrected_alpha: f64,
    pub degenerate: bool,
    pub decision: Decision,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignificanceReport {
    pub system_a: String,
    pub system_b: String,
    pub alpha: f64,
    pub m: usize,
    pub topic_count: usize,
    pub metrics: Vec<MetricComparison>,
}

fn topic_mismatch(a: &MetricReport, b: &MetricReport) -> Option<StatsError> {
    let only_a: Vec<String> = a
        .per_topic
        .keys()
        .filter(|q| !b.per_topic.contains_key(*q))
        .cloned()
        .collect();
    let only_b: Vec<String> = b
        .per_topic
        .keys()
        .filter(|q| !a.per_topic.contains_key(*q))
        .cloned()
        .collect();
    (!only_a.is_empty() || !only_b.is_empty()).then_some(StatsError::TopicMismatch { only_a, only_b })
}

/// One paired test per metric shared by both reports, A against baseline B.
pub fn compare_systems(
    a: &MetricReport,
    b: &MetricReport,
    alpha: f64,
    m: usize,
) -> Result<SignificanceReport, StatsError> {
    if let Some(err) = topic_mismatch(a, b) {
        return Err(err);
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(StatsError::BadAlpha(alpha));
    }
    if m == 0 {
        return Err(StatsError::BadFamily { m, tests: 1 });
    }
    let corrected_alpha = alpha / m as f64;
    let mut metrics = Vec::new();
    for metric in &a.metrics {
        if !b.metrics.contains(metric) {
            return Err(StatsError::MissingMetric(metric.clone()));
        }
        let va = a.metric_vector(metric);
        let vb = b.metric_vector(metric);
        let labels: Vec<String> = va.keys().filter(|q| vb.contains_key(*q)).cloned().collect();
        if labels.len() != va.len() || labels.len() != vb.len() {
            let only_a = va.keys().filter(|q| !vb.contains_key(*q)).cloned().collect();
            let only_b = vb.keys().filter(|q| !va.contains_key(*q)).cloned().collect();
            return Err(StatsError::TopicMismatch { only_a, only_b });
        }
        let xs: Vec<f64> = labels.iter().map(|q| va[q]).collect();
        let ys: Vec<f64> = labels.iter().map(|q| vb[q]).collect();
        let mean_a = a.means.get(metric).copied().unwrap_or(0.0);
        let mean_b = b.means.get(metric).copied().unwrap_or(0.0);
        let test = paired_t(&PairedSample::new(labels, xs, ys)?)?;
        let decision = if test.p < corrected_alpha {
            if test.t > 0.0 {
                Decision::SigGain
            } else {
                Decision::SigLoss
            }
        } else {
            Decision::NotSig
        };
        metrics.push(MetricComparison {
            metric: metric.clone(),
            mean_a,
            mean_b,
            relative_gain: (mean_b != 0.0).then(|| (mean_a - mean_b) / mean_b),
            t_stat: test.t,
            df: test.df,
            p_value: test.p,
            corrected_alpha,
            degenerate: test.degenerate,
            decision,
        });
    }
    Ok(SignificanceReport {
        system_a: a.run_tag.clone(),
        system_b: b.run_tag.clone(),
        alpha,
        m,
        topic_count: a.per_topic.len(),
        metrics,
    })
}

impl SignificanceReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

impl fmt::Display for SignificanceReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "# {} vs {}", self.system_a, self.system_b)?;
        writeln!(
            f,
            "# alpha: {}  m: {}  corrected alpha: {}  topics: {}",
            self.alpha,
            self.m,
            self.alpha / self.m as f64,
            self.topic_count
        )?;
        writeln!(
            f,
            "{:<8}  {:>8}  {:>8}  {:>8}  {:>9}  {:>4}  {:>10}",
            "metric", "A", "B", "gain", "t", "df", "p"
        )?;
        for c in &self.metrics {
            let gain = c
                .relative_gain
                .map_or_else(|| "n/a".to_string(), |g| format!("{:+.1}%", g * 100.0));
            writeln!(
                f,
                "{:<8}  {:>8.4}  {:>8.4}  {:>8}  {:>9.4}  {:>4}  {:>10.6} {}",
                c.metric,
                c.mean_a,
                c.mean_b,
                gain,
                c.t_stat,
                c.df,
                c.p_value,
                c.decision.marker()
            )?;
        }
        Ok(())
    }
}

/// Several A-vs-baseline comparisons rendered as one grid, one row per system.
pub fn comparison_grid(reports: &[SignificanceReport]) -> String {
    let mut out = String::new();
    let Some(first) = reports.first() else {
        return out;
    };
    writeln!(out, "# baseline: {}  alpha: {}  m: {}", first.system_b, first.alpha, first.m).unwrap();
    let metric_names: Vec<&str> = first.metrics.iter().map(|c| c.metric.as_str()).collect();
    let width = reports
        .iter()
        .map(|r| r.system_a.len())
        .chain([first.system_b.len(), 6])
        .max()
        .unwrap_or(6);
    write!(out, "{:<width$}", "system").unwrap();
    for m in &metric_names {
        write!(out, "  {m:>10}").unwrap();
    }
    out.push('\n');
    write!(out, "{:<width$}", first.system_b).unwrap();
    for c in &first.metrics {
        write!(out, "  {:>10.4}", c.mean_b).unwrap();
    }
    out.push('\n');
    for r in reports {
        write!(out, "{:<width$}", r.system_a).unwrap();
        let by_name: IndexMap<&str, &MetricComparison> =
            r.metrics.iter().map(|c| (c.metric.as_str(), c)).collect();
        for m in &metric_names {
            match by_name.get(m) {
                Some(c) => {
                    let cell = format!("{:.4}{}", c.mean_a, c.decision.marker());
                    write!(out, "  {cell:>10}").unwrap();
                }
                None => write!(out, "  {:>10}", "-").unwrap(),
            }
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ln_gamma_known_values() {
        assert!((ln_gamma(1.0)).abs() < 1e-14);
        assert!((ln_gamma(2.0)).abs() < 1e-14);
        assert!((ln_gamma(5.0) - 24f64.ln()).abs() < 1e-13);
        assert!((ln_gamma(0.5) - std::f64::consts::PI.sqrt().ln()).abs() < 1e-13);
    }

    #[test]
    fn incomplete_beta_edges() {
        assert_eq!(incomplete_beta(0.0, 2.0, 3.0).unwrap(), 0.0);
        assert_eq!(incomplete_beta(1.0, 2.0, 3.0).unwrap(), 1.0);
        for x in [0.1, 0.37, 0.5, 0.93] {
            assert!((incomplete_beta(x, 1.0, 1.0).unwrap() - x).abs() < 1e-14);
        }
        assert!((incomplete_beta(0.5, 2.0, 2.0).unwrap() - 0.5).abs() < 1e-14);
        assert!(incomplete_beta(1.5, 1.0, 1.0).is_err());
        assert!(incomplete_beta(0.5, 0.0, 1.0).is_err());
    }

    #[test]
    fn df_two_closed_form() {
        let s = PairedSample::from_vectors(vec![1.0, 2.0, 3.0], vec![1.0, 1.0, 1.0]).unwrap();
        let r = paired_t(&s).unwrap();
        assert!((r.t - 3f64.sqrt()).abs() < 1e-12);
        assert_eq!(r.df, 2);
        let closed = 1.0 - r.t / (r.t * r.t + 2.0).sqrt();
        assert!((r.p - closed).abs() < 1e-12);
        assert!((r.p - 0.2254).abs() < 1e-4);
    }

    #[test]
    fn degenerate_cases() {
        let same = PairedSample::from_vectors(vec![0.3, 0.9], vec![0.3, 0.9]).unwrap();
        let r = paired_t(&same).unwrap();
        assert_eq!((r.t, r.p, r.degenerate), (0.0, 1.0, false));
        let shifted = PairedSample::from_vectors(vec![1.0, 2.0], vec![0.5, 1.5]).unwrap();
        let r = paired_t(&shifted).unwrap();
        assert_eq!(r.p, 0.0);
        assert!(r.degenerate && r.t > 0.0);
        assert!(PairedSample::from_vectors(vec![1.0], vec![1.0]).is_err());
    }

    #[test]
    fn antisymmetry() {
        let a = vec![0.1, 0.5, 0.7, 0.2];
        let b = vec![0.3, 0.4, 0.9, 0.0];
        let ab = paired_t(&PairedSample::from_vectors(a.clone(), b.clone()).unwrap()).unwrap();
        let ba = paired_t(&PairedSample::from_vectors(b, a).unwrap()).unwrap();
        assert_eq!(ab.t, -ba.t);
        assert_eq!(ab.p, ba.p);
    }

    #[test]
    fn bonferroni() {
        assert_eq!(bonferroni_decide(&[0.009, 0.02], 0.05, 5).unwrap(), vec![true, false]);
        assert_eq!(bonferroni_decide(&[0.04], 0.05, 1).unwrap(), vec![true]);
        assert!(bonferroni_decide(&[0.01, 0.02], 0.05, 1).is_err());
        assert!(bonferroni_decide(&[0.01], 1.0, 1).is_err());
    }
}
