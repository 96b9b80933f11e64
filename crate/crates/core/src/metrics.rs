//! Displacement metrics over ranked prediction sets.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::geometry::Point;

pub const DEFAULT_MISS_THRESHOLD: f64 = 2.0;

fn dist(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

fn check(a: &[Point], b: &[Point]) -> Result<()> {
    check_len(a.len(), b.len())?;
    if a.is_empty() {
        return Err(Error::Invalid("empty trajectory".into()));
    }
    Ok(())
}

/// Mean Euclidean distance over all steps.
pub fn ade(truth: &[Point], pred: &[Point]) -> Result<f64> {
    check(truth, pred)?;
    Ok(truth.iter().zip(pred).map(|(a, b)| dist(*a, *b)).sum::<f64>() / truth.len() as f64)
}

/// Euclidean distance at the last step.
pub fn fde(truth: &[Point], pred: &[Point]) -> Result<f64> {
    check(truth, pred)?;
    Ok(dist(truth[truth.len() - 1], pred[pred.len() - 1]))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KMetrics {
    pub k: usize,
    pub min_ade: f64,
    pub min_fde: f64,
    /// 1 when every top-K endpoint misses by more than the threshold.
    pub miss: f64,
}

/// Metrics of the first `k` members of `set` for every `k` in `ks`.
pub fn evaluate_set(truth: &[Point], set: &[Vec<Point>], ks: &[usize], miss_threshold: f64) -> Result<Vec<KMetrics>> {
    let need = ks.iter().copied().max().unwrap_or(0);
    if ks.contains(&0) {
        return Err(Error::Invalid("K values must be positive".into()));
    }
    if set.len() < need {
        return Err(Error::Invalid(format!(
            "prediction set has {} trajectories, K = {need} requested",
            set.len()
        )));
    }
    let per: Vec<(f64, f64)> = set[..need]
        .iter()
        .map(|p| Ok((ade(truth, p)?, fde(truth, p)?)))
        .collect::<Result<_>>()?;
    Ok(ks
        .iter()
        .map(|&k| {
            let top = &per[..k];
            let min_ade = top.iter().map(|v| v.0).fold(f64::INFINITY, f64::min);
            let min_fde = top.iter().map(|v| v.1).fold(f64::INFINITY, f64::min);
            KMetrics {
                k,
                min_ade,
                min_fde,
                miss: if min_fde > miss_threshold { 1.0 } else { 0.0 },
            }
        })
        .collect())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p90_ms: f64,
    pub max_ms: f64,
}

impl LatencyStats {
    pub fn from_ms(samples: &[f64]) -> Self {
        if samples.is_empty() {
            return LatencyStats::default();
        }
        let mut v = samples.to_vec();
        v.sort_by(f64::total_cmp);
        let rank = |q: f64| v[((q * v.len() as f64).ceil() as usize).clamp(1, v.len()) - 1];
        LatencyStats {
            mean_ms: v.iter().sum::<f64>() / v.len() as f64,
            p50_ms: rank(0.5),
            p90_ms: rank(0.9),
            max_ms: v[v.len() - 1],
        }
    }
}

/// Median of a non-empty sample.
pub fn median(samples: &[f64]) -> f64 {
    let mut v = samples.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        // ties share their mean rank
        let mean = (i + j) as f64 / 2.0;
        for &k in &idx[i..=j] {
            r[k] = mean;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation; 0 when either input is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    check_len(a.len(), b.len())?;
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return Ok(0.0);
    }
    Ok(cov / (va * vb).sqrt())
}

/// Per-scene evaluation record (one line of the structured report).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub scene_id: String,
    pub agent_id: i64,
    pub method: String,
    pub metrics: Vec<KMetrics>,
    #[serde(default)]
    pub latency_ms: Option<f64>,
    #[serde(default)]
    pub fills: usize,
    #[serde(default)]
    pub failed_samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub scenes: usize,
    /// Scene-averaged minADE/minFDE/MR per K.
    pub metrics: Vec<KMetrics>,
    pub latency: LatencyStats,
    pub fills: usize,
    pub failed_samples: usize,
}

/// Averages records that share the same K values.
pub fn aggregate(method: &str, records: &[SceneRecord]) -> Result<EvalReport> {
    let first = records
        .first()
        .ok_or_else(|| Error::Invalid("no scenes to aggregate".into()))?;
    let ks: Vec<usize> = first.metrics.iter().map(|m| m.k).collect();
    let mut sums = vec![(0.0, 0.0, 0.0); ks.len()];
    for r in records {
        let rk: Vec<usize> = r.metrics.iter().map(|m| m.k).collect();
        if rk != ks {
            return Err(Error::Invalid(format!("scene {} has K values {rk:?}, expected {ks:?}", r.scene_id)));
        }
        for (s, m) in sums.iter_mut().zip(&r.metrics) {
            s.0 += m.min_ade;
            s.1 += m.min_fde;
            s.2 += m.miss;
        }
    }
    let n = records.len() as f64;
    let latencies: Vec<f64> = records.iter().filter_map(|r| r.latency_ms).collect();
    Ok(EvalReport {
        method: method.to_string(),
        scenes: records.len(),
        metrics: ks
            .iter()
            .zip(&sums)
            .map(|(&k, s)| KMetrics {
                k,
                min_ade: s.0 / n,
                min_fde: s.1 / n,
                miss: s.2 / n,
            })
            .collect(),
        latency: LatencyStats::from_ms(&latencies),
        fills: records.iter().map(|r| r.fills).sum(),
        failed_samples: records.iter().map(|r| r.failed_samples).sum(),
    })
}

/// Aligned plain-text table, one row per report.
pub fn format_table(reports: &[EvalReport]) -> String {
    let mut header = vec!["method".to_string(), "scenes".to_string()];
    if let Some(r) = reports.first() {
        for m in &r.metrics {
            header.push(format!("minADE_{}", m.k));
            header.push(format!("minFDE_{}", m.k));
            header.push(format!("MR_{}", m.k));
        }
    }
    header.push("lat_mean_ms".into());
    header.push("lat_p90_ms".into());
    header.push("fills".into());
    let mut rows = vec![header];
    for r in reports {
        let mut row = vec![r.method.clone(), r.scenes.to_string()];
        for m in &r.metrics {
            row.push(format!("{:.3}", m.min_ade));
            row.push(format!("{:.3}", m.min_fde));
            row.push(format!("{:.3}", m.miss));
        }
        row.push(format!("{:.2}", r.latency.mean_ms));
        row.push(format!("{:.2}", r.latency.p90_ms));
        row.push(r.fills.to_string());
        rows.push(row);
    }
    render(&rows)
}

/// Left-aligned first column, right-aligned others.
pub fn render(rows: &[Vec<String>]) -> String {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols)
        .map(|c| rows.iter().filter_map(|r| r.get(c)).map(String::len).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in rows {
        let cells: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(c, v)| {
                if c == 0 {
                    format!("{v:<w$}", w = widths[c])
                } else {
                    format!("{v:>w$}", w = widths[c])
                }
            })
            .collect();
        out.push_str(cells.join("  ").trim_end());
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ade_fde_examples() {
        let a = vec![[0.0, 0.0], [1.0, 1.0], [2.0, 0.0]];
        assert_eq!(ade(&a, &a).unwrap(), 0.0);
        assert_eq!(fde(&a, &a).unwrap(), 0.0);
        let shifted: Vec<Point> = a.iter().map(|p| [p[0] + 3.0, p[1] + 4.0]).collect();
        assert!((ade(&a, &shifted).unwrap() - 5.0).abs() < 1e-15);
        assert_eq!(fde(&[[0.0, 0.0]], &[[0.0, 2.0]]).unwrap(), 2.0);
        assert!(ade(&a, &a[..2]).is_err());
        assert!(fde(&[], &[]).is_err());
    }

    #[test]
    fn evaluate_set_examples() {
        let truth = vec![[0.0, 0.0], [1.0, 0.0]];
        let set = vec![vec![[5.0, 5.0], [6.0, 5.0]], truth.clone()];
        let m = evaluate_set(&truth, &set, &[2], 2.0).unwrap();
        assert_eq!(m[0].min_ade, 0.0);
        assert_eq!(m[0].min_fde, 0.0);
        assert_eq!(m[0].miss, 0.0);
        let far = vec![vec![[0.0, 2.5], [1.0, 2.5]], vec![[0.0, -2.5], [1.0, -2.5]]];
        assert_eq!(evaluate_set(&truth, &far, &[1, 2], 2.0).unwrap()[1].miss, 1.0);
        assert!(evaluate_set(&truth, &far, &[3], 2.0).is_err());
        assert!(evaluate_set(&truth, &far, &[0], 2.0).is_err());
    }

    #[test]
    fn latency_percentiles() {
        let s = LatencyStats::from_ms(&[4.0, 1.0, 3.0, 2.0]);
        assert_eq!(s.mean_ms, 2.5);
        assert_eq!(s.p50_ms, 2.0);
        assert_eq!(s.p90_ms, 4.0);
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]), 2.5);
    }

    #[test]
    fn spearman_examples() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 100.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(spearman(&[1.0, 1.0], &[1.0, 2.0]).unwrap(), 0.0);
        // ranks [0.5, 0.5, 2] against [0, 1, 2]: cov 1.5, var 1.5 and 2
        let r = spearman(&[1.0, 1.0, 2.0], &[1.0, 2.0, 3.0]).unwrap();
        assert!((r - 1.5 / (1.5f64 * 2.0).sqrt()).abs() < 1e-15);
    }
}
