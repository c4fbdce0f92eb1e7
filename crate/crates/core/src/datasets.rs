//! Interaction datasets: loading explicit-feedback files, binarizing,
//! deriving exposure and proxy variables, and splitting.
//!
//! Two on-disk layouts are understood:
//!
//! * TSV triples, one `user<TAB>item<TAB>rating<TAB>split` per line with
//!   `split` one of `biased` / `unbiased`;
//! * dense rating matrices (whitespace separated, `0` = unobserved), the
//!   layout Coat ships in, one file per split.
//!
//! Generator bundles (see [`crate::datagen`]) reuse the TSV layout and add
//! proxy, feature and exposure side files.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{DenseMatrix, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    /// Logged, self-selected feedback (training side).
    Biased,
    /// Feedback on uniformly assigned items (test side).
    Unbiased,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Biased => "biased",
            Split::Unbiased => "unbiased",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "biased" => Some(Split::Biased),
            "unbiased" => Some(Split::Unbiased),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triple {
    pub user: usize,
    pub item: usize,
    /// 1..=5 for explicit feedback, 0/1 once binarized.
    pub rating: u8,
    pub split: Split,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Feedback {
    Explicit,
    Binary,
}

/// Bijection between external ids and dense indices.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IdMap {
    ids: Vec<String>,
    #[serde(skip)]
    lookup: HashMap<String, usize>,
}

impl IdMap {
    /// Dense indices `0..n` with ids `"0".."n-1"`.
    pub fn identity(n: usize) -> Self {
        Self::from_sorted((0..n).map(|i| i.to_string()).collect())
    }

    /// Sorted numerically when every id is an integer, lexicographically
    /// otherwise, so generator bundles keep their original indices.
    pub fn from_ids<'a>(ids: impl IntoIterator<Item = &'a str>) -> Self {
        let mut uniq: Vec<String> = ids.into_iter().map(str::to_owned).collect();
        uniq.sort_unstable();
        uniq.dedup();
        if uniq.iter().all(|s| s.parse::<u64>().is_ok()) {
            uniq.sort_by_key(|s| s.parse::<u64>().unwrap_or(0));
        }
        Self::from_sorted(uniq)
    }

    fn from_sorted(ids: Vec<String>) -> Self {
        let lookup = ids.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
        Self { ids, lookup }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        if self.lookup.len() != self.ids.len() {
            // Deserialized maps carry only the id list.
            return self.ids.iter().position(|s| s == id);
        }
        self.lookup.get(id).copied()
    }

    pub fn id_of(&self, index: usize) -> Option<&str> {
        self.ids.get(index).map(String::as_str)
    }
}

/// Row-major 0/1 matrix, one byte per entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMatrix {
    rows: usize,
    cols: usize,
    data: Vec<u8>,
}

impl BinaryMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0; rows * cols] }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> bool {
        self.data[r * self.cols + c] != 0
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: bool) {
        self.data[r * self.cols + c] = v as u8;
    }

    pub fn row(&self, r: usize) -> &[u8] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn density(&self) -> f64 {
        if self.data.is_empty() {
            0.0
        } else {
            self.count_ones() as f64 / self.data.len() as f64
        }
    }

    /// Row as `f64` 0/1 values.
    pub fn row_f64(&self, r: usize) -> Vec<f64> {
        self.row(r).iter().map(|&v| v as f64).collect()
    }

    pub fn to_dense(&self) -> DenseMatrix {
        DenseMatrix::from_fn(self.rows, self.cols, |r, c| self.data[r * self.cols + c] as f64)
    }

    /// Row-major bits, least-significant bit first within each byte, no
    /// per-row padding.
    pub fn to_packed(&self) -> Vec<u8> {
        let mut out = vec![0u8; self.data.len().div_ceil(8)];
        for (i, &v) in self.data.iter().enumerate() {
            if v != 0 {
                out[i / 8] |= 1 << (i % 8);
            }
        }
        out
    }

    pub fn from_packed(rows: usize, cols: usize, bytes: &[u8]) -> Result<Self> {
        let n = rows * cols;
        if bytes.len() != n.div_ceil(8) {
            return Err(Error::Validation(format!(
                "packed {rows}x{cols} matrix needs {} bytes, got {}",
                n.div_ceil(8),
                bytes.len()
            )));
        }
        let data = (0..n).map(|i| (bytes[i / 8] >> (i % 8)) & 1).collect();
        Ok(Self { rows, cols, data })
    }
}

#[derive(Debug, Clone)]
pub struct InteractionDataset {
    pub n_users: usize,
    pub n_items: usize,
    pub triples: Vec<Triple>,
    pub feedback: Feedback,
    /// One categorical proxy per user; empty until attached.
    pub proxies: Vec<usize>,
    /// Raw user features, `n_users x d_f` (may have zero columns).
    pub features: DenseMatrix,
    pub users: IdMap,
    pub items: IdMap,
    /// Duplicate `(user, item, split)` lines overwritten during loading.
    pub duplicates: usize,
}

impl InteractionDataset {
    pub fn empty() -> Self {
        Self {
            n_users: 0,
            n_items: 0,
            triples: Vec::new(),
            feedback: Feedback::Explicit,
            proxies: Vec::new(),
            features: DenseMatrix::zeros(0, 0),
            users: IdMap::default(),
            items: IdMap::default(),
            duplicates: 0,
        }
    }

    pub fn count(&self, split: Split) -> usize {
        self.triples.iter().filter(|t| t.split == split).count()
    }

    pub fn n_proxy_categories(&self) -> usize {
        self.proxies.iter().max().map_or(0, |m| m + 1)
    }

    pub fn validate(&self) -> Result<()> {
        for t in &self.triples {
            if t.user >= self.n_users || t.item >= self.n_items {
                return Err(Error::Validation(format!("triple {t:?} outside {}x{}", self.n_users, self.n_items)));
            }
            let ok = match self.feedback {
                Feedback::Explicit => (1..=5).contains(&t.rating),
                Feedback::Binary => t.rating <= 1,
            };
            if !ok {
                return Err(Error::Validation(format!("rating {} invalid for {:?} feedback", t.rating, self.feedback)));
            }
        }
        if !self.proxies.is_empty() && self.proxies.len() != self.n_users {
            return Err(Error::Validation("proxy count differs from user count".into()));
        }
        if self.features.cols() > 0 && self.features.rows() != self.n_users {
            return Err(Error::Validation("feature rows differ from user count".into()));
        }
        Ok(())
    }

    /// Features standardized to zero mean / unit variance with statistics
    /// from `train_users` only. Constant columns become zero.
    pub fn standardized_features(&self, train_users: &[usize]) -> DenseMatrix {
        let (n, d) = self.features.shape();
        let mut out = self.features.clone();
        if d == 0 || train_users.is_empty() {
            return out;
        }
        for c in 0..d {
            let vals: Vec<f64> = train_users.iter().map(|&u| self.features.get(u, c)).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            let sd = var.sqrt();
            for r in 0..n {
                let v = if sd > 1e-12 { (self.features.get(r, c) - mean) / sd } else { 0.0 };
                out.set(r, c, v);
            }
        }
        out
    }

    /// Audit record with counts.
    pub fn meta(&self) -> DatasetMeta {
        DatasetMeta {
            n_users: self.n_users,
            n_items: self.n_items,
            n_biased: self.count(Split::Biased),
            n_unbiased: self.count(Split::Unbiased),
            feedback: self.feedback,
            n_proxy_categories: self.n_proxy_categories(),
            feature_dim: self.features.cols(),
            duplicates: self.duplicates,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub n_users: usize,
    pub n_items: usize,
    pub n_biased: usize,
    pub n_unbiased: usize,
    pub feedback: Feedback,
    pub n_proxy_categories: usize,
    pub feature_dim: usize,
    pub duplicates: usize,
}

pub fn write_dataset_meta(ds: &InteractionDataset, path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(&ds.meta())?;
    fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FileFormat {
    TsvTriples,
    /// Dense rating matrix for a single split.
    DenseMatrix(Split),
}

struct RawTriple {
    user: String,
    item: String,
    rating: u8,
    split: Split,
}

fn parse_rating(s: &str, path: &Path, line: usize) -> Result<u8> {
    let v: f64 = s.parse().map_err(|_| Error::Parse {
        path: path.into(),
        line,
        msg: format!("rating {s:?} is not a number"),
    })?;
    if v.fract() != 0.0 || !(0.0..=255.0).contains(&v) {
        return Err(Error::Validation(format!("{}:{line}: rating {v} out of range 1..=5", path.display())));
    }
    Ok(v as u8)
}

fn read_raw(path: &Path, format: FileFormat) -> Result<Vec<RawTriple>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    match format {
        FileFormat::TsvTriples => {
            for (i, line) in text.lines().enumerate() {
                let ln = i + 1;
                let line = line.trim_end_matches('\r');
                if line.trim().is_empty() || line.starts_with('#') {
                    continue;
                }
                let fields: Vec<&str> = line.split('\t').collect();
                if fields.len() != 4 {
                    return Err(Error::Parse {
                        path: path.into(),
                        line: ln,
                        msg: format!("expected 4 tab-separated fields, got {}", fields.len()),
                    });
                }
                let rating = parse_rating(fields[2], path, ln)?;
                if !(1..=5).contains(&rating) {
                    return Err(Error::Validation(format!(
                        "{}:{ln}: rating {rating} out of range 1..=5",
                        path.display()
                    )));
                }
                let split = Split::parse(fields[3]).ok_or_else(|| Error::Parse {
                    path: path.into(),
                    line: ln,
                    msg: format!("unknown split {:?}", fields[3]),
                })?;
                out.push(RawTriple { user: fields[0].to_owned(), item: fields[1].to_owned(), rating, split });
            }
        }
        FileFormat::DenseMatrix(split) => {
            for (u, line) in text.lines().enumerate() {
                for (i, tok) in line.split_whitespace().enumerate() {
                    let rating = parse_rating(tok, path, u + 1)?;
                    if rating == 0 {
                        continue;
                    }
                    if rating > 5 {
                        return Err(Error::Validation(format!(
                            "{}:{}: rating {rating} out of range 1..=5",
                            path.display(),
                            u + 1
                        )));
                    }
                    out.push(RawTriple { user: u.to_string(), item: i.to_string(), rating, split });
                }
            }
        }
    }
    Ok(out)
}

fn assemble(raw: Vec<RawTriple>, users: IdMap, items: IdMap) -> InteractionDataset {
    let mut seen: HashMap<(usize, usize, Split), usize> = HashMap::new();
    let mut triples: Vec<Triple> = Vec::with_capacity(raw.len());
    let mut duplicates = 0;
    for r in raw {
        let (Some(user), Some(item)) = (users.index_of(&r.user), items.index_of(&r.item)) else {
            continue;
        };
        let t = Triple { user, item, rating: r.rating, split: r.split };
        match seen.get(&(user, item, r.split)) {
            Some(&pos) => {
                triples[pos] = t;
                duplicates += 1;
            }
            None => {
                seen.insert((user, item, r.split), triples.len());
                triples.push(t);
            }
        }
    }
    if duplicates > 0 {
        log::warn!("{duplicates} duplicate (user, item) lines overwritten (last wins)");
    }
    InteractionDataset {
        n_users: users.len(),
        n_items: items.len(),
        triples,
        feedback: Feedback::Explicit,
        proxies: Vec::new(),
        features: DenseMatrix::zeros(0, 0),
        users,
        items,
        duplicates,
    }
}

/// Parse an explicit-feedback file and reindex ids densely.
pub fn load_explicit(path: &Path, format: FileFormat) -> Result<InteractionDataset> {
    let raw = read_raw(path, format)?;
    let users = IdMap::from_ids(raw.iter().map(|r| r.user.as_str()));
    let items = IdMap::from_ids(raw.iter().map(|r| r.item.as_str()));
    Ok(assemble(raw, users, items))
}

/// Load a Coat-style directory: `train.ascii` (biased) and `test.ascii`
/// (unbiased) dense matrices, plus `user_features.ascii` (or
/// `user_item_features/user_features.ascii`) when present.
pub fn load_coat_dir(dir: &Path) -> Result<InteractionDataset> {
    let mut raw = read_raw(&dir.join("train.ascii"), FileFormat::DenseMatrix(Split::Biased))?;
    raw.extend(read_raw(&dir.join("test.ascii"), FileFormat::DenseMatrix(Split::Unbiased))?);
    let n_users = count_rows(&dir.join("train.ascii"))?;
    let n_items = count_cols(&dir.join("train.ascii"))?;
    let mut ds = assemble(raw, IdMap::identity(n_users), IdMap::identity(n_items));
    for cand in ["user_features.ascii", "user_item_features/user_features.ascii"] {
        let p = dir.join(cand);
        if p.exists() {
            ds.features = read_numeric_rows(&p)?;
            break;
        }
    }
    ds.validate()?;
    Ok(ds)
}

fn count_rows(path: &Path) -> Result<usize> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().filter(|l| !l.trim().is_empty()).count())
}

fn count_cols(path: &Path) -> Result<usize> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(|l| l.split_whitespace().count()).max().unwrap_or(0))
}

fn read_numeric_rows(path: &Path) -> Result<DenseMatrix> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: std::result::Result<Vec<f64>, _> = line.split_whitespace().map(str::parse).collect();
        rows.push(row.map_err(|_| Error::Parse { path: path.into(), line: i + 1, msg: "bad number".into() })?);
    }
    DenseMatrix::from_rows(&rows)
}

/// Read a `user<TAB>v1<TAB>v2...` table into rows indexed through `users`.
pub(crate) fn read_user_table(path: &Path, users: &IdMap) -> Result<DenseMatrix> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut width = None;
    let mut rows: Vec<Option<Vec<f64>>> = vec![None; users.len()];
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields = line.split('\t');
        let id = fields.next().unwrap_or_default();
        let vals: std::result::Result<Vec<f64>, _> = fields.map(str::parse).collect();
        let vals = vals.map_err(|_| Error::Parse { path: path.into(), line: i + 1, msg: "bad number".into() })?;
        if *width.get_or_insert(vals.len()) != vals.len() {
            return Err(Error::Parse { path: path.into(), line: i + 1, msg: "ragged row".into() });
        }
        if let Some(u) = users.index_of(id) {
            rows[u] = Some(vals);
        }
    }
    let width = width.unwrap_or(0);
    let mut out = DenseMatrix::zeros(users.len(), width);
    for (u, r) in rows.into_iter().enumerate() {
        let r = r.ok_or_else(|| Error::Validation(format!("{}: no row for user {u}", path.display())))?;
        out.row_mut(u).copy_from_slice(&r);
    }
    Ok(out)
}

/// Feedback becomes 1 iff `rating >= threshold`.
pub fn binarize(ds: &InteractionDataset, threshold: u8) -> InteractionDataset {
    let mut out = ds.clone();
    if ds.feedback == Feedback::Binary {
        return out;
    }
    for t in &mut out.triples {
        t.rating = (t.rating >= threshold) as u8;
    }
    out.feedback = Feedback::Binary;
    out
}

/// Exposure over the biased (training-side) triples.
pub fn build_exposure(ds: &InteractionDataset) -> BinaryMatrix {
    let biased: Vec<Triple> = ds.triples.iter().copied().filter(|t| t.split == Split::Biased).collect();
    exposure_from(ds.n_users, ds.n_items, &biased)
}

pub fn exposure_from(n_users: usize, n_items: usize, triples: &[Triple]) -> BinaryMatrix {
    let mut a = BinaryMatrix::zeros(n_users, n_items);
    for t in triples {
        a.set(t.user, t.item, true);
    }
    a
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ProxyRule {
    /// Use the proxies already attached to the dataset (generator bundles).
    Given,
    /// Categories are the distinct values of a raw feature column.
    FeatureColumn(usize),
    /// Quartile of each user's mean training rating (4 categories).
    MeanRatingQuartile,
}

/// One categorical proxy per user. Statistics come from `train` only.
pub fn build_proxy(ds: &InteractionDataset, rule: ProxyRule, train: &[Triple]) -> Result<Vec<usize>> {
    match rule {
        ProxyRule::Given => {
            if ds.proxies.len() != ds.n_users {
                return Err(Error::Config("dataset carries no proxy values".into()));
            }
            Ok(ds.proxies.clone())
        }
        ProxyRule::FeatureColumn(c) => {
            if c >= ds.features.cols() {
                return Err(Error::Config(format!(
                    "proxy feature column {c} missing ({} feature columns)",
                    ds.features.cols()
                )));
            }
            let col = ds.features.column(c);
            let mut levels = col.clone();
            levels.sort_by(f64::total_cmp);
            levels.dedup();
            Ok(col.iter().map(|v| levels.partition_point(|l| l < v)).collect())
        }
        ProxyRule::MeanRatingQuartile => {
            let mut sums = vec![(0.0, 0usize); ds.n_users];
            for t in train {
                sums[t.user].0 += t.rating as f64;
                sums[t.user].1 += 1;
            }
            let means: Vec<Option<f64>> =
                sums.iter().map(|&(s, n)| if n > 0 { Some(s / n as f64) } else { None }).collect();
            let mut observed: Vec<f64> = means.iter().flatten().copied().collect();
            if observed.is_empty() {
                return Ok(vec![0; ds.n_users]);
            }
            observed.sort_by(f64::total_cmp);
            let cuts: Vec<f64> = [0.25, 0.5, 0.75].iter().map(|&q| quantile_sorted(&observed, q)).collect();
            let global = observed.iter().sum::<f64>() / observed.len() as f64;
            Ok(means
                .iter()
                .map(|m| {
                    let v = m.unwrap_or(global);
                    cuts.iter().filter(|&&c| c < v).count()
                })
                .collect())
        }
    }
}

/// Linear-interpolated quantile of sorted data.
pub(crate) fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SplitPolicy {
    /// Biased data for training (a validation slice carved out), unbiased
    /// data for testing.
    BiasedUnbiased { validation_fraction: f64, seed: u64 },
    /// Random holdout over all triples regardless of their tag.
    RandomHoldout { test_fraction: f64, validation_fraction: f64, seed: u64 },
}

impl SplitPolicy {
    pub fn biased_unbiased(seed: u64) -> Self {
        SplitPolicy::BiasedUnbiased { validation_fraction: 0.1, seed }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Splits {
    pub train: Vec<Triple>,
    pub validation: Vec<Triple>,
    pub test: Vec<Triple>,
}

pub fn split(ds: &InteractionDataset, policy: SplitPolicy) -> Result<Splits> {
    let check = |f: f64, what: &str| {
        if f > 0.0 && f < 1.0 {
            Ok(())
        } else {
            Err(Error::Validation(format!("{what} fraction must be in (0, 1), got {f}")))
        }
    };
    let (train_pool, test, val_fraction, seed) = match policy {
        SplitPolicy::BiasedUnbiased { validation_fraction, seed } => {
            check(validation_fraction, "validation")?;
            let biased: Vec<Triple> = ds.triples.iter().copied().filter(|t| t.split == Split::Biased).collect();
            let unbiased: Vec<Triple> = ds.triples.iter().copied().filter(|t| t.split == Split::Unbiased).collect();
            (biased, unbiased, validation_fraction, seed)
        }
        SplitPolicy::RandomHoldout { test_fraction, validation_fraction, seed } => {
            check(test_fraction, "test")?;
            check(validation_fraction, "validation")?;
            let mut all = ds.triples.clone();
            Rng::new(seed).substream(1).shuffle(&mut all);
            let n_test = (all.len() as f64 * test_fraction).round() as usize;
            let mut test = all.split_off(all.len() - n_test);
            test.sort_by_key(|t| (t.user, t.item));
            (all, test, validation_fraction, seed)
        }
    };
    let mut pool = train_pool;
    Rng::new(seed).substream(2).shuffle(&mut pool);
    let n_val = (pool.len() as f64 * val_fraction).round() as usize;
    let mut validation = pool.split_off(pool.len() - n_val);
    let mut train = pool;
    train.sort_by_key(|t| (t.user, t.item));
    validation.sort_by_key(|t| (t.user, t.item));
    if train.is_empty() || test.is_empty() {
        return Err(Error::Validation(format!(
            "empty split: {} train / {} test triples",
            train.len(),
            test.len()
        )));
    }
    Ok(Splits { train, validation, test })
}
