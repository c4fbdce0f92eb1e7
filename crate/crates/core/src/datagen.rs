//! Synthetic generator with ground-truth latent confounders.
//!
//! Users carry a 2-d confounder `C` drawn from a proxy-indexed Gaussian
//! mixture; items carry a mixed factor `V` the same way. Exposure is
//! Bernoulli in `alpha * sigmoid(LeakyReLU(C M V) + gamma * eps)`, and
//! ratings bin `e_u . e_i + beta * C . V + noise` into five equal-mass
//! levels.
//!
//! Every per-user draw comes from a substream keyed by the user index, so
//! rows can be generated in any order. Ground truth is stored beside the
//! dataset and never inside it.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::datasets::{
    self, BinaryMatrix, Feedback, IdMap, InteractionDataset, Split, Triple,
};
use crate::error::{Error, Result};
use crate::numerics::{dot, leaky_relu, sigmoid, DenseMatrix, Rng};

const TAG_USER_MIXTURE: u64 = 1;
const TAG_ITEM_MIXTURE: u64 = 2;
const TAG_USER_EMB: u64 = 3;
const TAG_ITEM_EMB: u64 = 4;
const TAG_MIX: u64 = 5;
const TAG_FEATURES: u64 = 6;
const TAG_ROWS: u64 = 7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub n_users: usize,
    pub n_items: usize,
    pub confounder_dim: usize,
    pub n_mixture_components: usize,
    /// Upper bound on the exposure probability.
    pub alpha: f64,
    /// Weight of the confounder on preference.
    pub beta: f64,
    /// Weight of the exposure noise.
    pub gamma: f64,
    pub rating_levels: usize,
    pub seed: u64,
    /// Per-component standard deviation of `C` and `V`.
    pub component_sd: f64,
    /// Dimension of `e_u` / `e_i`.
    pub embedding_dim: usize,
    /// Number of user feature columns `Z`.
    pub feature_dim: usize,
    /// Items per user in the uniformly exposed test split.
    pub test_items_per_user: usize,
    /// When set, each user is exposed to exactly this many items, drawn
    /// without replacement with weights `g_i(H_u)`. Used for fixed-count
    /// layouts such as Coat's 24 self-selected ratings per user.
    pub exposures_per_user: Option<usize>,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self::paper()
    }
}

impl GenConfig {
    /// Full-size setting: 10,000 users x 1,000 items.
    pub fn paper() -> Self {
        Self {
            n_users: 10_000,
            n_items: 1_000,
            confounder_dim: 2,
            n_mixture_components: 5,
            alpha: 0.1,
            beta: 2.0,
            gamma: 0.0,
            rating_levels: 5,
            seed: 0,
            component_sd: 0.3,
            embedding_dim: 4,
            feature_dim: 16,
            test_items_per_user: 50,
            exposures_per_user: None,
        }
    }

    /// Laptop-scale setting: 2,000 users x 300 items.
    pub fn desk() -> Self {
        Self { n_users: 2_000, n_items: 300, ..Self::paper() }
    }

    /// Coat-shaped stand-in: 290 x 300, 24 biased and 16 unbiased ratings
    /// per user.
    pub fn coat() -> Self {
        Self {
            n_users: 290,
            n_items: 300,
            test_items_per_user: 16,
            exposures_per_user: Some(24),
            ..Self::paper()
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_gamma(mut self, gamma: f64) -> Self {
        self.gamma = gamma;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return bad(format!("alpha must be in (0, 1], got {}", self.alpha));
        }
        if self.n_mixture_components == 0 {
            return bad("n_mixture_components must be >= 1".into());
        }
        if self.n_users == 0 || self.n_items == 0 || self.confounder_dim == 0 || self.embedding_dim == 0 {
            return bad("dimensions must be positive".into());
        }
        if self.rating_levels != 5 {
            return bad(format!("only 5 rating levels are supported, got {}", self.rating_levels));
        }
        if !(self.gamma >= 0.0) || !self.beta.is_finite() || !(self.component_sd >= 0.0) {
            return bad("gamma and component_sd must be >= 0, beta finite".into());
        }
        if let Some(k) = self.exposures_per_user {
            if k == 0 || k >= self.n_items {
                return bad(format!("exposures_per_user must be in 1..n_items, got {k}"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    /// Observable part: triples, proxies, features.
    pub dataset: InteractionDataset,
    /// Full exposure matrix (all biased pairs, before any validation carve).
    pub exposure: BinaryMatrix,
    pub c: DenseMatrix,
    pub v: DenseMatrix,
    pub w: Vec<usize>,
    pub m_proxy: Vec<usize>,
    pub e_u: DenseMatrix,
    pub e_i: DenseMatrix,
    /// Item confounder embeddings; equal to `v`.
    pub e_h: DenseMatrix,
    pub mix: DenseMatrix,
    pub config: GenConfig,
}

/// Component centres: `k` evenly spaced points on `[-2, 2]`.
pub fn component_grid(k: usize) -> Vec<f64> {
    if k == 1 {
        return vec![0.0];
    }
    (0..k).map(|i| -2.0 + 4.0 * i as f64 / (k - 1) as f64).collect()
}

/// Discretized normal over `0..k`, centred on the middle component with
/// standard deviation 1.2, renormalized.
pub fn component_probs(k: usize) -> Vec<f64> {
    let centre = (k as f64 - 1.0) / 2.0;
    let normal = Normal::new(centre, 1.2).expect("valid normal");
    let raw: Vec<f64> = (0..k).map(|i| normal.cdf(i as f64 + 0.5) - normal.cdf(i as f64 - 0.5)).collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|p| p / total).collect()
}

/// Draw a categorical label per row and a mixture sample whose every
/// coordinate is centred on the label's grid point.
fn sample_mixture(n: usize, cfg: &GenConfig, rng: &mut Rng) -> (DenseMatrix, Vec<usize>) {
    let grid = component_grid(cfg.n_mixture_components);
    let probs = component_probs(cfg.n_mixture_components);
    let mut labels = Vec::with_capacity(n);
    let mut out = DenseMatrix::zeros(n, cfg.confounder_dim);
    for r in 0..n {
        let k = rng.categorical(&probs);
        labels.push(k);
        for c in 0..cfg.confounder_dim {
            out.set(r, c, grid[k] + cfg.component_sd * rng.normal());
        }
    }
    (out, labels)
}

/// User confounders `C` and their proxy `W`.
pub fn sample_user_confounders(cfg: &GenConfig, rng: &mut Rng) -> (DenseMatrix, Vec<usize>) {
    sample_mixture(cfg.n_users, cfg, rng)
}

/// Item factors `V` and their proxy `M`.
pub fn sample_item_factors(cfg: &GenConfig, rng: &mut Rng) -> (DenseMatrix, Vec<usize>) {
    sample_mixture(cfg.n_items, cfg, rng)
}

fn standard_normal(rows: usize, cols: usize, rng: &mut Rng) -> DenseMatrix {
    DenseMatrix::from_fn(rows, cols, |_, _| rng.normal())
}

/// Exposure probability `alpha * sigmoid(LeakyReLU(h M e) + gamma * eps)`.
#[inline]
pub fn exposure_prob(h: &[f64], mix: &DenseMatrix, e: &[f64], alpha: f64, gamma: f64, eps: f64) -> f64 {
    let mut s = 0.0;
    for (a, ha) in h.iter().enumerate() {
        for (b, eb) in e.iter().enumerate() {
            s += ha * mix.get(a, b) * eb;
        }
    }
    alpha * sigmoid(leaky_relu(s) + gamma * eps)
}

/// Bernoulli exposure for every `(u, i)`; the noise is i.i.d. per pair and
/// drawn from the user's own substream.
pub fn gen_exposure(
    h: &DenseMatrix,
    e_h: &DenseMatrix,
    mix: &DenseMatrix,
    alpha: f64,
    gamma: f64,
    rng: &Rng,
) -> Result<BinaryMatrix> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::Config(format!("alpha must be in (0, 1], got {alpha}")));
    }
    check_dims(h, e_h, mix)?;
    let mut a = BinaryMatrix::zeros(h.rows(), e_h.rows());
    for u in 0..h.rows() {
        let mut r = rng.substream(u as u64);
        for i in 0..e_h.rows() {
            let g = exposure_prob(h.row(u), mix, e_h.row(i), alpha, gamma, r.normal());
            a.set(u, i, r.bernoulli(g));
        }
    }
    Ok(a)
}

fn check_dims(h: &DenseMatrix, e_h: &DenseMatrix, mix: &DenseMatrix) -> Result<()> {
    if mix.shape() != (h.cols(), e_h.cols()) {
        return Err(Error::Shape(format!(
            "mix is {:?}, expected ({}, {})",
            mix.shape(),
            h.cols(),
            e_h.cols()
        )));
    }
    Ok(())
}

/// Raw preference score for every pair plus `N(0, 0.1^2)` noise, then
/// five equal-mass bins over all pairs. Returns the `n_users x n_items`
/// rating table (1..=5).
pub fn gen_ratings(
    e_u: &DenseMatrix,
    e_i: &DenseMatrix,
    h: &DenseMatrix,
    e_h: &DenseMatrix,
    beta: f64,
    rng: &Rng,
) -> Result<Vec<u8>> {
    if e_u.cols() != e_i.cols() || h.cols() != e_h.cols() || e_u.rows() != h.rows() || e_i.rows() != e_h.rows() {
        return Err(Error::Shape("gen_ratings: inconsistent embedding shapes".into()));
    }
    let (n, m) = (e_u.rows(), e_i.rows());
    let mut raw = Vec::with_capacity(n * m);
    for u in 0..n {
        let mut r = rng.substream(u as u64);
        for i in 0..m {
            raw.push(raw_score(e_u.row(u), e_i.row(i), h.row(u), e_h.row(i), beta) + RATING_NOISE_SD * r.normal());
        }
    }
    Ok(bin_equal_mass(&raw, 5))
}

const RATING_NOISE_SD: f64 = 0.1;

#[inline]
fn raw_score(eu: &[f64], ei: &[f64], h: &[f64], eh: &[f64], beta: f64) -> f64 {
    dot(eu, ei) + beta * dot(h, eh)
}

/// Map values to `1..=levels` by global quantile cut points.
pub fn bin_equal_mass(values: &[f64], levels: usize) -> Vec<u8> {
    if values.is_empty() {
        return Vec::new();
    }
    let mut sorted = values.to_vec();
    sorted.sort_unstable_by(f64::total_cmp);
    let cuts: Vec<f64> = (1..levels)
        .map(|q| datasets::quantile_sorted(&sorted, q as f64 / levels as f64))
        .collect();
    values.iter().map(|v| 1 + cuts.iter().filter(|&&c| *v > c).count() as u8).collect()
}

/// Run the whole generative process.
pub fn generate(cfg: &GenConfig) -> Result<SyntheticDataset> {
    cfg.validate()?;
    let base = Rng::new(cfg.seed);
    let (c, w) = sample_user_confounders(cfg, &mut base.substream(TAG_USER_MIXTURE));
    let (v, m_proxy) = sample_item_factors(cfg, &mut base.substream(TAG_ITEM_MIXTURE));
    let e_u = standard_normal(cfg.n_users, cfg.embedding_dim, &mut base.substream(TAG_USER_EMB));
    let e_i = standard_normal(cfg.n_items, cfg.embedding_dim, &mut base.substream(TAG_ITEM_EMB));
    let mix = standard_normal(cfg.confounder_dim, cfg.confounder_dim, &mut base.substream(TAG_MIX));
    let features = standard_normal(cfg.n_users, cfg.feature_dim, &mut base.substream(TAG_FEATURES));
    let (h, e_h) = (&c, &v);

    // One pass per user: exposure noise, exposure draw and rating noise for
    // each item, then the test-item sample.
    let rows = base.substream(TAG_ROWS);
    let (n, m) = (cfg.n_users, cfg.n_items);
    let mut raw = Vec::with_capacity(n * m);
    let mut exposure = BinaryMatrix::zeros(n, m);
    let mut test_items: Vec<Vec<usize>> = Vec::with_capacity(n);
    for u in 0..n {
        let mut r = rows.substream(u as u64);
        let mut keys = Vec::with_capacity(m);
        for i in 0..m {
            let g = exposure_prob(h.row(u), &mix, e_h.row(i), cfg.alpha, cfg.gamma, r.normal());
            let draw = r.uniform();
            match cfg.exposures_per_user {
                None => exposure.set(u, i, draw < g),
                // Efraimidis-Spirakis key for weighted sampling without replacement.
                Some(_) => keys.push((draw.max(f64::MIN_POSITIVE).ln() / g.max(1e-300), i)),
            }
            raw.push(raw_score(e_u.row(u), e_i.row(i), h.row(u), e_h.row(i), cfg.beta) + RATING_NOISE_SD * r.normal());
        }
        if let Some(k) = cfg.exposures_per_user {
            keys.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            for &(_, i) in keys.iter().take(k) {
                exposure.set(u, i, true);
            }
        }
        let unexposed: Vec<usize> = (0..m).filter(|&i| !exposure.get(u, i)).collect();
        let picks = r.sample_indices(unexposed.len(), cfg.test_items_per_user);
        test_items.push(picks.into_iter().map(|p| unexposed[p]).collect());
    }
    let ratings = bin_equal_mass(&raw, cfg.rating_levels);

    let mut triples = Vec::new();
    for u in 0..n {
        for i in 0..m {
            if exposure.get(u, i) {
                triples.push(Triple { user: u, item: i, rating: ratings[u * m + i], split: Split::Biased });
            }
        }
        for &i in &test_items[u] {
            triples.push(Triple { user: u, item: i, rating: ratings[u * m + i], split: Split::Unbiased });
        }
    }
    let dataset = InteractionDataset {
        n_users: n,
        n_items: m,
        triples,
        feedback: Feedback::Explicit,
        proxies: w.clone(),
        features,
        users: IdMap::identity(n),
        items: IdMap::identity(m),
        duplicates: 0,
    };
    Ok(SyntheticDataset {
        dataset,
        exposure,
        e_h: v.clone(),
        c,
        v,
        w,
        m_proxy,
        e_u,
        e_i,
        mix,
        config: cfg.clone(),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BundleMeta {
    pub n_users: usize,
    pub n_items: usize,
    pub n_biased: usize,
    pub n_unbiased: usize,
    pub exposure_density: f64,
    pub seed: u64,
    pub config: GenConfig,
}

fn write_text(path: &Path, body: &str) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(body.as_bytes()).map_err(|e| Error::io(path, e))
}

fn table(ids: usize, m: &DenseMatrix) -> String {
    let mut s = String::new();
    for r in 0..ids {
        s.push_str(&r.to_string());
        for v in m.row(r) {
            s.push('\t');
            // Shortest round-trip representation.
            s.push_str(&format!("{v:?}"));
        }
        s.push('\n');
    }
    s
}

/// Write the bundle directory; creates `dir` if needed.
pub fn write_bundle(ds: &SyntheticDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut inter = String::new();
    for t in &ds.dataset.triples {
        inter.push_str(&format!("{}\t{}\t{}\t{}\n", t.user, t.item, t.rating, t.split.as_str()));
    }
    write_text(&dir.join("interactions.tsv"), &inter)?;
    let p = dir.join("exposure.bin");
    fs::write(&p, ds.exposure.to_packed()).map_err(|e| Error::io(&p, e))?;
    let proxies: String = ds.w.iter().enumerate().map(|(u, w)| format!("{u}\t{w}\n")).collect();
    write_text(&dir.join("proxies.tsv"), &proxies)?;
    write_text(&dir.join("features.tsv"), &table(ds.dataset.n_users, &ds.dataset.features))?;
    write_text(&dir.join("ground_truth_c.tsv"), &table(ds.dataset.n_users, &ds.c))?;
    let meta = BundleMeta {
        n_users: ds.dataset.n_users,
        n_items: ds.dataset.n_items,
        n_biased: ds.dataset.count(Split::Biased),
        n_unbiased: ds.dataset.count(Split::Unbiased),
        exposure_density: ds.exposure.density(),
        seed: ds.config.seed,
        config: ds.config.clone(),
    };
    write_text(&dir.join("meta.json"), &(serde_json::to_string_pretty(&meta)? + "\n"))?;
    datasets::write_dataset_meta(&ds.dataset, &dir.join("dataset.meta.json"))
}

/// A bundle read back from disk. Ground truth is kept apart from the
/// dataset so training code never sees it.
#[derive(Debug, Clone)]
pub struct LoadedBundle {
    pub dataset: InteractionDataset,
    pub exposure: BinaryMatrix,
    pub ground_truth_c: Option<DenseMatrix>,
    pub meta: BundleMeta,
}

pub fn read_bundle(dir: &Path) -> Result<LoadedBundle> {
    let meta_path = dir.join("meta.json");
    let meta_text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: BundleMeta = serde_json::from_str(&meta_text)?;
    let mut ds = datasets::load_explicit(&dir.join("interactions.tsv"), datasets::FileFormat::TsvTriples)?;
    // Users or items without any triple would be dropped by reindexing;
    // bundles use dense ids, so restore the full ranges.
    let all_users = IdMap::identity(meta.n_users);
    let all_items = IdMap::identity(meta.n_items);
    for t in &mut ds.triples {
        t.user = all_users.index_of(ds.users.id_of(t.user).unwrap_or_default()).unwrap_or(t.user);
        t.item = all_items.index_of(ds.items.id_of(t.item).unwrap_or_default()).unwrap_or(t.item);
    }
    ds.users = all_users;
    ds.items = all_items;
    ds.n_users = meta.n_users;
    ds.n_items = meta.n_items;
    let proxies = datasets::read_user_table(&dir.join("proxies.tsv"), &ds.users)?;
    ds.proxies = proxies.as_slice().iter().map(|&v| v as usize).collect();
    ds.features = datasets::read_user_table(&dir.join("features.tsv"), &ds.users)?;
    let exp_path = dir.join("exposure.bin");
    let bytes = fs::read(&exp_path).map_err(|e| Error::io(&exp_path, e))?;
    let exposure = BinaryMatrix::from_packed(meta.n_users, meta.n_items, &bytes)?;
    let gt = dir.join("ground_truth_c.tsv");
    let ground_truth_c = if gt.exists() { Some(datasets::read_user_table(&gt, &ds.users)?) } else { None };
    ds.validate()?;
    Ok(LoadedBundle { dataset: ds, exposure, ground_truth_c, meta })
}
