//! Classification metrics, t intervals, Friedman ranks with the Nemenyi
//! critical distance, Tukey HSD and drift diagnostics.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, StudentsT};
use statrs::function::erf::erfc;
use statrs::function::gamma::ln_gamma;

use crate::dataio::Dataset;
use crate::flowpic::build_flowpic;

#[derive(Debug, thiserror::Error)]
pub enum StatsError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
}

fn invalid<T>(msg: impl Into<String>) -> Result<T, StatsError> {
    Err(StatsError::InvalidInput(msg.into()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub accuracy: f64,
    pub weighted_f1: f64,
    pub macro_f1: f64,
    pub per_class: Vec<ClassMetrics>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<u64>>,
}

impl MetricSet {
    /// Confusion matrix with each nonempty row scaled to sum to 1.
    pub fn row_normalized_confusion(&self) -> Vec<Vec<f64>> {
        self.confusion
            .iter()
            .map(|row| {
                let total: u64 = row.iter().sum();
                row.iter()
                    .map(|&c| if total == 0 { 0.0 } else { c as f64 / total as f64 })
                    .collect()
            })
            .collect()
    }
}

/// Accuracy, per-class and support-weighted F1 and the confusion matrix.
/// Precision of a never-predicted class is 0.
pub fn compute_metrics(y_true: &[usize], y_pred: &[usize], num_classes: usize) -> Result<MetricSet, StatsError> {
    if y_true.is_empty() || y_true.len() != y_pred.len() {
        return invalid(format!(
            "need equal nonempty label lists, got {} and {}",
            y_true.len(),
            y_pred.len()
        ));
    }
    let mut confusion = vec![vec![0u64; num_classes]; num_classes];
    for (&t, &p) in y_true.iter().zip(y_pred) {
        if t >= num_classes || p >= num_classes {
            return invalid(format!("label outside 0..{num_classes}: true {t}, predicted {p}"));
        }
        confusion[t][p] += 1;
    }
    let n = y_true.len() as f64;
    let correct: u64 = (0..num_classes).map(|c| confusion[c][c]).sum();
    let mut per_class = Vec::with_capacity(num_classes);
    for c in 0..num_classes {
        let tp = confusion[c][c] as f64;
        let support: u64 = confusion[c].iter().sum();
        let predicted: u64 = confusion.iter().map(|r| r[c]).sum();
        let precision = if predicted == 0 { 0.0 } else { tp / predicted as f64 };
        let recall = if support == 0 { 0.0 } else { tp / support as f64 };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        per_class.push(ClassMetrics {
            precision,
            recall,
            f1,
            support,
        });
    }
    let weighted_f1 = per_class.iter().map(|m| m.f1 * m.support as f64).sum::<f64>() / n;
    let macro_f1 = per_class.iter().map(|m| m.f1).sum::<f64>() / num_classes as f64;
    Ok(MetricSet {
        accuracy: correct as f64 / n,
        weighted_f1,
        macro_f1,
        per_class,
        confusion,
    })
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (`n - 1` denominator).
pub fn std_dev(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() as f64 - 1.0)).sqrt()
}

/// Quantile of the Student t distribution with `df` degrees of freedom.
pub fn t_quantile(p: f64, df: f64) -> Result<f64, StatsError> {
    let t = StudentsT::new(0.0, 1.0, df).map_err(|e| StatsError::InvalidInput(e.to_string()))?;
    Ok(t.inverse_cdf(p))
}

/// `(mean, half_width)` of the two-sided t interval at `level`.
pub fn t_confidence_interval(samples: &[f64], level: f64) -> Result<(f64, f64), StatsError> {
    if samples.len() < 2 {
        return invalid("a confidence interval needs at least 2 samples");
    }
    if !(level > 0.0 && level < 1.0) {
        return invalid(format!("level must lie in (0, 1), got {level}"));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return invalid("non-finite sample");
    }
    let n = samples.len() as f64;
    let m = mean(samples);
    let s = std_dev(samples);
    if s == 0.0 {
        return Ok((m, 0.0));
    }
    let t = t_quantile((1.0 + level) / 2.0, n - 1.0)?;
    Ok((m, t * s / n.sqrt()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankTable {
    pub methods: Vec<String>,
    /// `observations[method][trial]`; higher is better.
    pub observations: Vec<Vec<f64>>,
    /// `ranks[method][trial]`, 1 = best, ties share their average rank.
    pub ranks: Vec<Vec<f64>>,
    pub average_ranks: Vec<f64>,
}

impl RankTable {
    pub fn num_methods(&self) -> usize {
        self.methods.len()
    }

    pub fn num_trials(&self) -> usize {
        self.observations.first().map_or(0, Vec::len)
    }

    /// `method,avg_rank` rows in method order.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,avg_rank\n");
        for (m, r) in self.methods.iter().zip(&self.average_ranks) {
            let _ = writeln!(out, "{},{r:.6}", csv_field(m));
        }
        out
    }

    /// Method indices ordered from best (lowest average rank) to worst.
    pub fn order(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.methods.len()).collect();
        idx.sort_by(|&a, &b| self.average_ranks[a].total_cmp(&self.average_ranks[b]).then(a.cmp(&b)));
        idx
    }
}

pub(crate) fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Ranks of one trial: the highest value gets rank 1, and values equal after
/// rounding to 6 decimals share the mean of their positions.
pub fn rank_trial(values: &[f64]) -> Vec<f64> {
    let key: Vec<f64> = values.iter().map(|v| (v * 1e6).round()).collect();
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| key[b].total_cmp(&key[a]).then(a.cmp(&b)));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && key[idx[j + 1]] == key[idx[i]] {
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

pub fn rank_methods(methods: Vec<String>, observations: Vec<Vec<f64>>) -> Result<RankTable, StatsError> {
    let k = methods.len();
    if k < 2 || observations.len() != k {
        return invalid(format!(
            "need >= 2 methods with one observation row each, got {k} methods and {} rows",
            observations.len()
        ));
    }
    let n = observations[0].len();
    if n == 0 || observations.iter().any(|r| r.len() != n) {
        return invalid("every method needs the same nonzero number of trials");
    }
    if observations.iter().flatten().any(|v| !v.is_finite()) {
        return invalid("non-finite observation");
    }
    let mut ranks = vec![vec![0.0; n]; k];
    for t in 0..n {
        let col: Vec<f64> = observations.iter().map(|r| r[t]).collect();
        for (m, r) in rank_trial(&col).into_iter().enumerate() {
            ranks[m][t] = r;
        }
    }
    let average_ranks = ranks.iter().map(|r| mean(r)).collect();
    Ok(RankTable {
        methods,
        observations,
        ranks,
        average_ranks,
    })
}

/// Friedman chi-square statistic on average ranks and its p-value.
pub fn friedman(table: &RankTable) -> (f64, f64) {
    let k = table.num_methods() as f64;
    let n = table.num_trials() as f64;
    let sum_sq: f64 = table.average_ranks.iter().map(|r| r * r).sum();
    let chi2 = 12.0 * n / (k * (k + 1.0)) * (sum_sq - k * (k + 1.0).powi(2) / 4.0);
    let p = ChiSquared::new(k - 1.0).map_or(f64::NAN, |d| d.sf(chi2.max(0.0)));
    (chi2, p)
}

/// Studentized range critical values divided by sqrt(2), k = 2..=20.
/// Entries up to k = 10 are the classical two-decimal-place table; larger k
/// come from the infinite-df studentized range quantile.
const Q_005: [f64; 19] = [
    1.960, 2.343, 2.569, 2.728, 2.850, 2.949, 3.031, 3.102, 3.164, 3.219, 3.268, 3.313, 3.354, 3.391, 3.426, 3.458,
    3.489, 3.517, 3.544,
];
const Q_010: [f64; 19] = [
    1.645, 2.052, 2.291, 2.459, 2.589, 2.693, 2.780, 2.855, 2.920, 2.978, 3.030, 3.077, 3.120, 3.159, 3.196, 3.230,
    3.261, 3.291, 3.319,
];

pub fn nemenyi_q(k: usize, alpha: f64) -> Result<f64, StatsError> {
    let table = if (alpha - 0.05).abs() < 1e-12 {
        &Q_005
    } else if (alpha - 0.10).abs() < 1e-12 {
        &Q_010
    } else {
        return Err(StatsError::Unsupported(format!(
            "alpha {alpha} (supported: 0.05, 0.10)"
        )));
    };
    if !(2..=20).contains(&k) {
        return Err(StatsError::Unsupported(format!("{k} methods (supported: 2..=20)")));
    }
    Ok(table[k - 2])
}

/// `q_alpha * sqrt(k (k + 1) / (6 N))`.
pub fn nemenyi_cd(k: usize, n: usize, alpha: f64) -> Result<f64, StatsError> {
    if n == 0 {
        return invalid("N must be >= 1");
    }
    let q = nemenyi_q(k, alpha)?;
    Ok(q * ((k * (k + 1)) as f64 / (6.0 * n as f64)).sqrt())
}

/// Maximal runs of methods (in rank order) whose average ranks all lie
/// within `cd` of each other. Returned as method indices, best first.
pub fn cd_groups(table: &RankTable, cd: f64) -> Vec<Vec<usize>> {
    let order = table.order();
    let r = |i: usize| table.average_ranks[order[i]];
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut last_end = None;
    for start in 0..order.len() {
        let mut end = start;
        while end + 1 < order.len() && r(end + 1) - r(start) < cd {
            end += 1;
        }
        if last_end.is_none_or(|e| end > e) {
            groups.push(order[start..=end].to_vec());
            last_end = Some(end);
        }
    }
    groups
}

/// Critical-distance diagram: methods placed on the average-rank axis with
/// bars joining groups that are not significantly different.
pub fn cd_diagram_svg(table: &RankTable, cd: f64) -> String {
    let k = table.num_methods();
    let order = table.order();
    let width = 640.0;
    let (left, right) = (120.0, width - 120.0);
    let axis_y = 60.0;
    let x = |rank: f64| left + (rank - 1.0) / ((k.max(2) - 1) as f64) * (right - left);
    let half = k.div_ceil(2);
    let groups: Vec<Vec<usize>> = cd_groups(table, cd).into_iter().filter(|g| g.len() > 1).collect();
    let height = axis_y + 40.0 + 18.0 * (half as f64 + groups.len() as f64) + 20.0;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<line x1="{left}" y1="{axis_y}" x2="{right}" y2="{axis_y}" stroke="black"/>"#
    );
    for r in 1..=k {
        let xr = x(r as f64);
        let _ = writeln!(
            s,
            r#"<line x1="{xr:.1}" y1="{}" x2="{xr:.1}" y2="{axis_y}" stroke="black"/><text x="{xr:.1}" y="{}" text-anchor="middle">{r}</text>"#,
            axis_y - 5.0,
            axis_y - 10.0
        );
    }
    let (cx0, cx1) = (x(1.0), x(1.0 + cd));
    let _ = writeln!(
        s,
        r#"<line x1="{cx0:.1}" y1="20" x2="{cx1:.1}" y2="20" stroke="black" stroke-width="2"/><text x="{:.1}" y="14" text-anchor="middle">CD = {cd:.3}</text>"#,
        (cx0 + cx1) / 2.0
    );
    for (pos, &m) in order.iter().enumerate() {
        let r = table.average_ranks[m];
        let xr = x(r);
        let (row, anchor, tx) = if pos < half {
            (pos, "end", left - 10.0)
        } else {
            (k - 1 - pos, "start", right + 10.0)
        };
        let y = axis_y + 30.0 + 18.0 * row as f64;
        let _ = writeln!(
            s,
            r#"<polyline points="{xr:.1},{axis_y} {xr:.1},{y:.1} {tx:.1},{y:.1}" fill="none" stroke="black"/><text x="{:.1}" y="{:.1}" text-anchor="{anchor}">{} ({r:.2})</text>"#,
            if anchor == "end" { tx - 2.0 } else { tx + 2.0 },
            y + 4.0,
            xml_escape(&table.methods[m])
        );
    }
    for (i, g) in groups.iter().enumerate() {
        let lo = table.average_ranks[g[0]];
        let hi = table.average_ranks[*g.last().expect("nonempty group")];
        let y = axis_y + 12.0 + 6.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<line x1="{:.1}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="black" stroke-width="3"/>"#,
            x(lo) - 3.0,
            x(hi) + 3.0
        );
    }
    s.push_str("</svg>\n");
    s
}

pub(crate) fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn phi(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

fn simpson(a: f64, b: f64, intervals: usize, f: impl Fn(f64) -> f64) -> f64 {
    let n = intervals + intervals % 2;
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

/// CDF of the range of `k` standard normals.
fn range_cdf_normal(w: f64, k: usize) -> f64 {
    if w <= 0.0 {
        return 0.0;
    }
    let kf = k as f64;
    let inv_sqrt_2pi = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
    let v = kf
        * simpson(-8.5, 8.5, 340, |z| {
            let d = (phi(z) - phi(z - w)).max(0.0);
            inv_sqrt_2pi * (-0.5 * z * z).exp() * d.powi(k as i32 - 1)
        });
    v.clamp(0.0, 1.0)
}

/// CDF of the studentized range with `k` groups and `df` error degrees of
/// freedom, by numeric integration over the chi distribution of the scale.
pub fn studentized_range_cdf(q: f64, k: usize, df: f64) -> f64 {
    if q <= 0.0 {
        return 0.0;
    }
    if !df.is_finite() || df > 25_000.0 {
        return range_cdf_normal(q, k);
    }
    // Density of s = sqrt(chi2_df / df).
    let log_c = 0.5 * df * df.ln() - ln_gamma(df / 2.0) - (df / 2.0 - 1.0) * std::f64::consts::LN_2;
    let dens = |s: f64| {
        if s <= 0.0 {
            0.0
        } else {
            (log_c + (df - 1.0) * s.ln() - 0.5 * df * s * s).exp()
        }
    };
    let spread = 1.0 / (2.0 * df).sqrt();
    let lo = (1.0 - 9.0 * spread).max(0.0);
    let hi = 1.0 + 12.0 * spread.max(0.25);
    simpson(lo, hi, 600, |s| dens(s) * range_cdf_normal(q * s, k)).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TukeyComparison {
    pub group_a: usize,
    pub group_b: usize,
    pub mean_diff: f64,
    pub p_value: f64,
    pub different: bool,
}

/// Tukey(-Kramer) HSD over all group pairs with the pooled within-group
/// variance. With zero pooled variance, p is 0 for unequal and 1 for equal
/// means.
pub fn tukey_hsd(groups: &[Vec<f64>], alpha: f64) -> Result<Vec<TukeyComparison>, StatsError> {
    let k = groups.len();
    if k < 2 {
        return invalid("Tukey HSD needs at least 2 groups");
    }
    if groups.iter().any(|g| g.len() < 2) {
        return invalid("every group needs at least 2 observations");
    }
    if groups.iter().flatten().any(|v| !v.is_finite()) {
        return invalid("non-finite observation");
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return invalid(format!("alpha must lie in (0, 1), got {alpha}"));
    }
    let means: Vec<f64> = groups.iter().map(|g| mean(g)).collect();
    let total: usize = groups.iter().map(Vec::len).sum();
    let df = (total - k) as f64;
    let ss: f64 = groups
        .iter()
        .zip(&means)
        .map(|(g, m)| g.iter().map(|v| (v - m).powi(2)).sum::<f64>())
        .sum();
    let mse = ss / df;
    let mut out = Vec::new();
    for a in 0..k {
        for b in a + 1..k {
            let diff = means[b] - means[a];
            let p_value = if mse == 0.0 {
                if diff == 0.0 {
                    1.0
                } else {
                    0.0
                }
            } else {
                let se = (mse / 2.0 * (1.0 / groups[a].len() as f64 + 1.0 / groups[b].len() as f64)).sqrt();
                let q = diff.abs() / se;
                (1.0 - studentized_range_cdf(q, k, df)).clamp(0.0, 1.0)
            };
            out.push(TukeyComparison {
                group_a: a,
                group_b: b,
                mean_diff: diff,
                p_value,
                different: p_value < alpha,
            });
        }
    }
    Ok(out)
}

/// `group_a,group_b,p_value,different` rows.
pub fn tukey_csv(names: &[String], results: &[TukeyComparison]) -> String {
    let mut out = String::from("group_a,group_b,p_value,different\n");
    for r in results {
        let _ = writeln!(
            out,
            "{},{},{:e},{}",
            csv_field(&names[r.group_a]),
            csv_field(&names[r.group_b]),
            r.p_value,
            r.different
        );
    }
    out
}

pub const KDE_GRID_POINTS: usize = 256;
pub const KDE_MAX_SIZE: f64 = 1500.0;

pub fn kde_grid() -> Vec<f64> {
    (0..KDE_GRID_POINTS)
        .map(|i| KDE_MAX_SIZE * i as f64 / (KDE_GRID_POINTS - 1) as f64)
        .collect()
}

/// Linear-interpolation quantile of sorted data.
fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Silverman's rule `0.9 min(sd, IQR / 1.34) n^(-1/5)`. Falls back to the sd
/// when the IQR vanishes and to the grid spacing when both do.
pub fn silverman_bandwidth(values: &[f64]) -> f64 {
    let spacing = KDE_MAX_SIZE / (KDE_GRID_POINTS - 1) as f64;
    if values.len() < 2 {
        return spacing;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let sd = std_dev(values);
    let iqr = quantile_sorted(&sorted, 0.75) - quantile_sorted(&sorted, 0.25);
    let mut a = sd.min(iqr / 1.34);
    if a <= 0.0 {
        a = sd;
    }
    let h = 0.9 * a * (values.len() as f64).powf(-0.2);
    if h > 0.0 {
        h
    } else {
        spacing
    }
}

/// Gaussian KDE evaluated on `grid`.
pub fn gaussian_kde(values: &[f64], bandwidth: f64, grid: &[f64]) -> Vec<f64> {
    let norm = 1.0 / (values.len() as f64 * bandwidth * (2.0 * std::f64::consts::PI).sqrt());
    grid.iter()
        .map(|&g| {
            norm * values
                .iter()
                .map(|&v| {
                    let u = (g - v) / bandwidth;
                    (-0.5 * u * u).exp()
                })
                .sum::<f64>()
        })
        .collect()
}

pub fn trapezoid(xs: &[f64], ys: &[f64]) -> f64 {
    xs.windows(2)
        .zip(ys.windows(2))
        .map(|(x, y)| (x[1] - x[0]) * (y[0] + y[1]) / 2.0)
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftEntry {
    pub partition: String,
    pub label: String,
    pub flows: usize,
    /// Row-major `resolution x resolution` elementwise mean of the flows' flowpics.
    pub mean_flowpic: Vec<f64>,
    pub bandwidth: f64,
    /// Packet-size density on [`DriftReport::grid`].
    pub density: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftReport {
    pub resolution: usize,
    pub window: f64,
    pub grid: Vec<f64>,
    pub entries: Vec<DriftEntry>,
}

impl DriftReport {
    /// Long-format densities: `partition,label,size,density`.
    pub fn kde_csv(&self) -> String {
        let mut out = String::from("partition,label,size,density\n");
        for e in &self.entries {
            for (g, d) in self.grid.iter().zip(&e.density) {
                let _ = writeln!(out, "{},{},{g},{d:e}", csv_field(&e.partition), csv_field(&e.label));
            }
        }
        out
    }

    /// Mean flowpic of one entry as a CSV matrix (row 0 = smallest sizes).
    pub fn mean_flowpic_csv(&self, entry: &DriftEntry) -> String {
        let mut out = String::new();
        for row in entry.mean_flowpic.chunks(self.resolution) {
            let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }
}

/// Per-partition, per-class mean flowpics and packet-size KDEs. Classes
/// missing from a partition are skipped with a warning.
pub fn drift_diagnostics(
    partitions: &[(String, &Dataset)],
    resolution: usize,
    window: f64,
) -> Result<DriftReport, StatsError> {
    if partitions.is_empty() {
        return invalid("at least one partition is required");
    }
    if resolution < 2 || !(window > 0.0) {
        return invalid("resolution must be >= 2 and window positive");
    }
    let labels: BTreeSet<String> = partitions.iter().flat_map(|(_, d)| d.labels()).collect();
    let grid = kde_grid();
    let mut entries = Vec::new();
    for (name, d) in partitions {
        for label in &labels {
            let Some(idx) = d.class_index().get(label).filter(|v| !v.is_empty()) else {
                log::warn!("partition {name}: class {label} has no flows, skipped");
                continue;
            };
            let mut sum = vec![0.0; resolution * resolution];
            let mut sizes = Vec::new();
            for &i in idx {
                let s = &d.records()[i].series;
                let fp = build_flowpic(s, resolution, window);
                for (acc, &c) in sum.iter_mut().zip(fp.counts()) {
                    *acc += c as f64;
                }
                sizes.extend(s.sizes().iter().map(|&v| v as f64));
            }
            let n = idx.len() as f64;
            sum.iter_mut().for_each(|v| *v /= n);
            let (bandwidth, density) = if sizes.is_empty() {
                log::warn!("partition {name}: class {label} has no packets, density left at zero");
                (0.0, vec![0.0; grid.len()])
            } else {
                let h = silverman_bandwidth(&sizes);
                (h, gaussian_kde(&sizes, h, &grid))
            };
            entries.push(DriftEntry {
                partition: name.clone(),
                label: label.clone(),
                flows: idx.len(),
                mean_flowpic: sum,
                bandwidth,
                density,
            });
        }
    }
    Ok(DriftReport {
        resolution,
        window,
        grid,
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_correct_metrics() {
        let m = compute_metrics(&[0, 1, 2, 1], &[0, 1, 2, 1], 3).unwrap();
        assert_eq!(m.accuracy, 1.0);
        assert_eq!(m.weighted_f1, 1.0);
        assert_eq!(m.confusion, vec![vec![1, 0, 0], vec![0, 2, 0], vec![0, 0, 1]]);
        assert!(compute_metrics(&[0, 3], &[0, 0], 3).is_err());
        assert!(compute_metrics(&[], &[], 3).is_err());
    }

    #[test]
    fn binary_fixture() {
        // TP=2, FP=1, FN=1, TN=2 with class 1 as positive.
        let t = [1, 1, 1, 0, 0, 0];
        let p = [1, 1, 0, 1, 0, 0];
        let m = compute_metrics(&t, &p, 2).unwrap();
        assert!((m.accuracy - 4.0 / 6.0).abs() < 1e-12);
        for c in &m.per_class {
            assert!((c.f1 - 2.0 / 3.0).abs() < 1e-12);
        }
        assert!((m.weighted_f1 - 2.0 / 3.0).abs() < 1e-12);
        let rows = m.row_normalized_confusion();
        assert!(rows.iter().all(|r| (r.iter().sum::<f64>() - 1.0).abs() < 1e-12));
    }

    #[test]
    fn single_class_predictions() {
        let t: Vec<usize> = (0..50).map(|i| i % 5).collect();
        let m = compute_metrics(&t, &[0; 50], 5).unwrap();
        assert!((m.accuracy - 0.2).abs() < 1e-12);
    }

    #[test]
    fn ci_edge_cases() {
        assert_eq!(t_confidence_interval(&[3.0, 3.0, 3.0], 0.95).unwrap(), (3.0, 0.0));
        assert!(t_confidence_interval(&[1.0], 0.95).is_err());
        let (m1, h1) = t_confidence_interval(&[1.0, 2.0, 4.0], 0.95).unwrap();
        let (m2, h2) = t_confidence_interval(&[2.0, 4.0, 8.0], 0.95).unwrap();
        assert!((m2 - 2.0 * m1).abs() < 1e-12 && (h2 - 2.0 * h1).abs() < 1e-9);
    }

    #[test]
    fn ranking_examples() {
        let names = |k: usize| (0..k).map(|i| format!("m{i}")).collect::<Vec<_>>();
        let t = rank_methods(names(3), vec![vec![0.9], vec![0.7], vec![0.8]]).unwrap();
        assert_eq!(t.average_ranks, vec![1.0, 3.0, 2.0]);
        let t = rank_methods(names(3), vec![vec![0.9], vec![0.9], vec![0.8]]).unwrap();
        assert_eq!(t.average_ranks, vec![1.5, 1.5, 3.0]);
        let t = rank_methods(names(4), vec![vec![0.5]; 4]).unwrap();
        assert!(t.average_ranks.iter().all(|&r| r == 2.5));
        assert!(rank_methods(names(2), vec![vec![f64::NAN], vec![1.0]]).is_err());
    }

    #[test]
    fn nemenyi_values() {
        assert!((nemenyi_cd(7, 30, 0.05).unwrap() - 1.644).abs() < 1e-3);
        let a = nemenyi_cd(5, 10, 0.05).unwrap();
        let b = nemenyi_cd(5, 40, 0.05).unwrap();
        assert!((a / b - 2.0).abs() < 1e-12);
        assert!((nemenyi_cd(2, 1, 0.05).unwrap() - 1.96).abs() < 1e-12);
        for k in 3..=20 {
            assert!(nemenyi_cd(k, 30, 0.05).unwrap() > nemenyi_cd(k - 1, 30, 0.05).unwrap());
            assert!(nemenyi_cd(k, 30, 0.10).unwrap() > nemenyi_cd(k - 1, 30, 0.10).unwrap());
        }
        assert!(nemenyi_cd(21, 30, 0.05).is_err());
        assert!(nemenyi_cd(5, 30, 0.01).is_err());
    }

    fn table(ranks: &[f64]) -> RankTable {
        RankTable {
            methods: (0..ranks.len()).map(|i| format!("m{i}")).collect(),
            observations: vec![vec![0.0]; ranks.len()],
            ranks: ranks.iter().map(|&r| vec![r]).collect(),
            average_ranks: ranks.to_vec(),
        }
    }

    #[test]
    fn cd_group_examples() {
        assert_eq!(cd_groups(&table(&[1.0, 1.5]), 1.644), vec![vec![0, 1]]);
        assert_eq!(cd_groups(&table(&[1.0, 3.0]), 1.644), vec![vec![0], vec![1]]);
        assert_eq!(cd_groups(&table(&[3.0, 1.0, 2.0]), 1.644), vec![vec![1, 2], vec![2, 0]]);
        let svg = cd_diagram_svg(&table(&[3.0, 1.0, 2.0]), 1.644);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    }

    #[test]
    fn tukey_degenerate_and_identical() {
        let r = tukey_hsd(&[vec![1.0, 2.0, 3.0], vec![1.0, 2.0, 3.0]], 0.05).unwrap();
        assert!((r[0].p_value - 1.0).abs() < 1e-9 && !r[0].different);
        let r = tukey_hsd(&[vec![1.0, 1.0], vec![2.0, 2.0]], 0.05).unwrap();
        assert_eq!(r[0].p_value, 0.0);
        let r = tukey_hsd(&[vec![1.0, 1.0], vec![1.0, 1.0]], 0.05).unwrap();
        assert_eq!(r[0].p_value, 1.0);
    }

    #[test]
    fn kde_integrates_to_one() {
        let sizes: Vec<f64> = (0..200).map(|i| 500.0 + (i % 37) as f64 * 7.0).collect();
        let h = silverman_bandwidth(&sizes);
        let grid = kde_grid();
        let d = gaussian_kde(&sizes, h, &grid);
        assert!((trapezoid(&grid, &d) - 1.0).abs() < 1e-2);
        assert_eq!(silverman_bandwidth(&[100.0]), 1500.0 / 255.0);
    }
}
