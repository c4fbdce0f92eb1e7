//! Ranking metrics, confounder-recovery MCC, paired t-tests and reports.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::datasets::Triple;
use crate::error::{Error, Result};
use crate::numerics::DenseMatrix;

/// Sort candidate items by descending score; ties go to the lower item id.
pub fn rank(candidates: &[(usize, f64)]) -> Vec<usize> {
    let mut v = candidates.to_vec();
    v.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    v.into_iter().map(|(i, _)| i).collect()
}

/// NDCG@k for relevance labels listed in ranked order. `None` when the
/// list is empty or holds no positive.
pub fn ndcg_at_k(ranked_labels: &[u8], k: usize) -> Option<f64> {
    let positives = ranked_labels.iter().filter(|&&l| l > 0).count();
    if positives == 0 || k == 0 {
        return None;
    }
    let disc = |r: usize| 1.0 / ((r + 2) as f64).log2();
    let dcg: f64 = ranked_labels.iter().take(k).enumerate().filter(|(_, &l)| l > 0).map(|(r, _)| disc(r)).sum();
    let idcg: f64 = (0..positives.min(k)).map(disc).sum();
    Some(dcg / idcg)
}

/// Hits in the top k over `min(k, #positives)`.
pub fn recall_at_k(ranked_labels: &[u8], k: usize) -> Option<f64> {
    let positives = ranked_labels.iter().filter(|&&l| l > 0).count();
    if positives == 0 || k == 0 {
        return None;
    }
    let hits = ranked_labels.iter().take(k).filter(|&&l| l > 0).count();
    Some(hits as f64 / positives.min(k) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankingMetrics {
    pub ndcg: f64,
    pub recall: f64,
    /// Users that contributed (at least one positive test item).
    pub n_users: usize,
}

/// Per-user metrics averaged over users. `test` holds binary labels; the
/// candidate set for a user is all of that user's test items.
pub fn evaluate_ranking(test: &[Triple], k: usize, mut score: impl FnMut(usize, usize) -> f64) -> Result<RankingMetrics> {
    if test.is_empty() {
        return Err(Error::Validation("empty test split".into()));
    }
    let mut by_user: BTreeMap<usize, Vec<(usize, u8)>> = BTreeMap::new();
    for t in test {
        by_user.entry(t.user).or_default().push((t.item, t.rating));
    }
    let (mut ndcg, mut recall, mut n) = (0.0, 0.0, 0usize);
    for (u, items) in by_user {
        let labels: BTreeMap<usize, u8> = items.iter().copied().collect();
        let scored: Vec<(usize, f64)> = items.iter().map(|&(i, _)| (i, score(u, i))).collect();
        let ranked: Vec<u8> = rank(&scored).iter().map(|i| labels[i]).collect();
        if let (Some(a), Some(b)) = (ndcg_at_k(&ranked, k), recall_at_k(&ranked, k)) {
            ndcg += a;
            recall += b;
            n += 1;
        }
    }
    if n == 0 {
        return Ok(RankingMetrics { ndcg: 0.0, recall: 0.0, n_users: 0 });
    }
    Ok(RankingMetrics { ndcg: ndcg / n as f64, recall: recall / n as f64, n_users: n })
}

/// Pearson correlation; 0 when either side has no variance.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va <= 0.0 || vb <= 0.0 {
        return 0.0;
    }
    cov / (va * vb).sqrt()
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

/// Mean absolute Pearson correlation under the best matching of estimated
/// to true coordinates (brute force over permutations).
pub fn mcc(est: &DenseMatrix, truth: &DenseMatrix) -> Result<f64> {
    if est.shape() != truth.shape() {
        return Err(Error::Shape(format!("mcc {:?} vs {:?}", est.shape(), truth.shape())));
    }
    let (n, d) = est.shape();
    if n < 3 {
        return Err(Error::Validation(format!("mcc needs at least 3 rows, got {n}")));
    }
    if d > 6 {
        return Err(Error::Validation(format!("mcc brute force limited to 6 dims, got {d}")));
    }
    let ec: Vec<Vec<f64>> = (0..d).map(|j| est.column(j)).collect();
    let tc: Vec<Vec<f64>> = (0..d).map(|j| truth.column(j)).collect();
    let corr: Vec<Vec<f64>> = ec.iter().map(|e| tc.iter().map(|t| pearson(e, t).abs()).collect()).collect();
    let best = permutations(d)
        .iter()
        .map(|p| p.iter().enumerate().map(|(i, &j)| corr[i][j]).sum::<f64>())
        .fold(0.0, f64::max);
    Ok(best / d as f64)
}

/// Two-sided paired t-test p-value.
pub fn paired_ttest(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::Validation(format!("paired t-test needs equal lengths >= 2, got {} and {}", a.len(), b.len())));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    if var <= 0.0 {
        return Ok(if mean == 0.0 { 1.0 } else { 0.0 });
    }
    let t = mean / (var / n).sqrt();
    let dist = StudentsT::new(0.0, 1.0, n - 1.0).map_err(|e| Error::Numeric(e.to_string()))?;
    Ok((2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0))
}

/// Sample mean and standard deviation (n - 1 denominator; 0 for n < 2).
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, 0.0);
    }
    if v.iter().all(|x| *x == v[0]) {
        return (v[0], 0.0);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (m, 0.0);
    }
    (m, (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt())
}

/// True when every adjacent pair satisfies `a >= b - tol`.
pub fn chain_holds(chain: &[f64], tol: f64) -> bool {
    chain.windows(2).all(|w| w[0] >= w[1] - tol)
}

/// True when the values strictly decrease.
pub fn strictly_decreasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[0] > w[1])
}

/// Does the best interior point reach at least both endpoints?
/// Needs three or more points.
pub fn interior_peak(series: &[f64]) -> bool {
    let n = series.len();
    if n < 3 {
        return false;
    }
    let best = series[1..n - 1].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    best >= series[0] && best >= series[n - 1]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub seed: u64,
    pub variant: String,
    pub metric: String,
    pub value: f64,
    /// Free-form cell label such as `gamma=10` or `rho=0.4`.
    #[serde(default)]
    pub setting: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub variant: String,
    pub metric: String,
    pub setting: String,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
    /// Paired p-value against the baseline variant, when one is named.
    pub p_value: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: Vec<MetricRow>,
    pub aggregates: Vec<Aggregate>,
    pub baseline: Option<String>,
}

impl MetricsReport {
    pub fn push(&mut self, seed: u64, variant: &str, setting: &str, metric: &str, value: f64) {
        self.rows.push(MetricRow {
            seed,
            variant: variant.into(),
            metric: metric.into(),
            value,
            setting: setting.into(),
        });
    }

    /// Values for one `(variant, setting, metric)` ordered by seed.
    pub fn series(&self, variant: &str, setting: &str, metric: &str) -> Vec<(u64, f64)> {
        let mut v: Vec<(u64, f64)> = self
            .rows
            .iter()
            .filter(|r| r.variant == variant && r.metric == metric && r.setting == setting)
            .map(|r| (r.seed, r.value))
            .collect();
        v.sort_by_key(|p| p.0);
        v
    }

    /// Fill `aggregates`: mean/std per group, p-value vs `baseline` over
    /// shared seeds.
    pub fn aggregate(&mut self, baseline: Option<&str>) {
        self.baseline = baseline.map(str::to_owned);
        let mut keys: Vec<(String, String, String)> =
            self.rows.iter().map(|r| (r.variant.clone(), r.setting.clone(), r.metric.clone())).collect();
        keys.sort();
        keys.dedup();
        self.aggregates = keys
            .into_iter()
            .map(|(variant, setting, metric)| {
                let vals: Vec<f64> = self.series(&variant, &setting, &metric).iter().map(|p| p.1).collect();
                let (mean, std) = mean_std(&vals);
                let p_value = baseline.filter(|b| *b != variant).and_then(|b| {
                    let ours: BTreeMap<u64, f64> = self.series(&variant, &setting, &metric).into_iter().collect();
                    let (xs, ys): (Vec<f64>, Vec<f64>) = self
                        .series(b, &setting, &metric)
                        .into_iter()
                        .filter_map(|(s, y)| ours.get(&s).map(|&x| (x, y)))
                        .unzip();
                    paired_ttest(&xs, &ys).ok()
                });
                Aggregate { variant, metric, setting, mean, std, n: vals.len(), p_value }
            })
            .collect();
    }

    pub fn find(&self, variant: &str, setting: &str, metric: &str) -> Option<&Aggregate> {
        self.aggregates.iter().find(|a| a.variant == variant && a.setting == setting && a.metric == metric)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("seed,variant,setting,metric,value\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{},{},{:?}\n", r.seed, r.variant, r.setting, r.metric, r.value));
        }
        s
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}
