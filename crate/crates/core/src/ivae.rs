//! Conditional identifiable VAE over exposure rows.
//!
//! Prior `p(C | W)` is a per-category lookup table, the encoder maps
//! `[row, one_hot(W)]` to a diagonal Gaussian, and the decoder maps `C` to
//! per-item Bernoulli means. The reconstruction target is always the binary
//! exposure row, while the encoder input may be a real-valued debiased row.

use serde::{Deserialize, Serialize};

use crate::datasets::BinaryMatrix;
use crate::error::{shape_err, Error, Result};
use crate::numerics::{
    kl_gaussian_diag, sigmoid, Activation, Adam, AdamConfig, DenseMatrix, Mlp, ParamGroup, Rng, Trainable,
};

/// Decoder outputs are clamped into `[PROB_EPS, 1 - PROB_EPS]`.
pub const PROB_EPS: f64 = 1e-7;
const LOGVAR_MIN: f64 = -12.0;
const LOGVAR_MAX: f64 = 8.0;

const TAG_INIT: u64 = 11;
const TAG_VALIDATION: u64 = 12;
const TAG_HOLDOUT: u64 = 13;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IvaeConfig {
    pub latent_dim: usize,
    pub encoder_hidden: Vec<usize>,
    /// Empty gives a linear decoder.
    pub decoder_hidden: Vec<usize>,
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub validation_fraction: f64,
}

impl Default for IvaeConfig {
    fn default() -> Self {
        Self {
            latent_dim: 2,
            encoder_hidden: vec![64],
            decoder_hidden: vec![32],
            lr: 1e-3,
            batch_size: 64,
            max_epochs: 200,
            patience: 10,
            validation_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPosterior {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IvaeModel {
    latent_dim: usize,
    n_items: usize,
    n_categories: usize,
    prior_mean: Vec<f64>,
    prior_logvar: Vec<f64>,
    #[serde(skip)]
    grad_prior_mean: Vec<f64>,
    #[serde(skip)]
    grad_prior_logvar: Vec<f64>,
    encoder: Mlp,
    decoder: Mlp,
}

/// Bernoulli log-likelihood of a binary row under per-item means.
pub fn bernoulli_log_likelihood(target: &[u8], probs: &[f64]) -> f64 {
    target
        .iter()
        .zip(probs)
        .map(|(&a, &p)| if a != 0 { p.ln() } else { (1.0 - p).ln() })
        .sum()
}

#[inline]
fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

impl IvaeModel {
    pub fn new(n_items: usize, n_categories: usize, cfg: &IvaeConfig, rng: &mut Rng) -> Result<Self> {
        if cfg.latent_dim == 0 || n_items == 0 || n_categories == 0 {
            return Err(Error::Config("ivae dimensions must be positive".into()));
        }
        let d = cfg.latent_dim;
        let mut enc_sizes = vec![n_items + n_categories];
        enc_sizes.extend(&cfg.encoder_hidden);
        enc_sizes.push(2 * d);
        let mut dec_sizes = vec![d];
        dec_sizes.extend(&cfg.decoder_hidden);
        dec_sizes.push(n_items);
        let encoder = Mlp::new(&enc_sizes, Activation::Identity, rng)?;
        let decoder = Mlp::new(&dec_sizes, Activation::Identity, rng)?;
        Ok(Self {
            latent_dim: d,
            n_items,
            n_categories,
            prior_mean: vec![0.0; n_categories * d],
            prior_logvar: vec![0.0; n_categories * d],
            grad_prior_mean: vec![0.0; n_categories * d],
            grad_prior_logvar: vec![0.0; n_categories * d],
            encoder,
            decoder,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn n_categories(&self) -> usize {
        self.n_categories
    }

    pub fn encoder(&self) -> &Mlp {
        &self.encoder
    }

    pub fn decoder(&self) -> &Mlp {
        &self.decoder
    }

    /// Start decoder output biases at the per-item marginal log-odds.
    pub fn init_decoder_bias(&mut self, targets: &BinaryMatrix, users: &[usize]) {
        if users.is_empty() {
            return;
        }
        let last = self.decoder.layers_mut().last_mut().expect("decoder has a layer");
        for (i, b) in last.biases_mut().iter_mut().enumerate() {
            let rate = users.iter().filter(|&&u| targets.get(u, i)).count() as f64 / users.len() as f64;
            let p = rate.clamp(1e-3, 1.0 - 1e-3);
            *b = (p / (1.0 - p)).ln();
        }
    }

    /// Prior mean and variance for category `w`; unseen categories get
    /// `N(0, I)`.
    pub fn prior_params(&self, w: usize) -> (Vec<f64>, Vec<f64>) {
        let d = self.latent_dim;
        if w >= self.n_categories {
            log::warn!("proxy category {w} unseen in training; using N(0, I) prior");
            return (vec![0.0; d], vec![1.0; d]);
        }
        let mean = self.prior_mean[w * d..(w + 1) * d].to_vec();
        let var = self.prior_logvar[w * d..(w + 1) * d].iter().map(|lv| lv.exp()).collect();
        (mean, var)
    }

    /// Overwrite the prior table entry for `w` (tests and checkpoints).
    pub fn set_prior(&mut self, w: usize, mean: &[f64], logvar: &[f64]) {
        let d = self.latent_dim;
        self.prior_mean[w * d..(w + 1) * d].copy_from_slice(mean);
        self.prior_logvar[w * d..(w + 1) * d].copy_from_slice(logvar);
    }

    fn encoder_input(&self, row: &[f64], w: usize, out: &mut [f64]) {
        out[..self.n_items].copy_from_slice(row);
        out[self.n_items..].iter_mut().for_each(|v| *v = 0.0);
        if w < self.n_categories {
            out[self.n_items + w] = 1.0;
        }
    }

    pub fn encode(&self, row: &[f64], w: usize) -> Result<GaussianPosterior> {
        if row.len() != self.n_items {
            return Err(shape_err!("encoder expects {} items, got {}", self.n_items, row.len()));
        }
        let mut x = vec![0.0; self.n_items + self.n_categories];
        self.encoder_input(row, w, &mut x);
        let out = self.encoder.predict(&x)?;
        let d = self.latent_dim;
        Ok(GaussianPosterior {
            mean: out[..d].to_vec(),
            var: out[d..].iter().map(|lv| lv.clamp(LOGVAR_MIN, LOGVAR_MAX).exp()).collect(),
        })
    }

    /// Bernoulli means over items.
    pub fn decode(&self, c: &[f64]) -> Result<Vec<f64>> {
        if c.len() != self.latent_dim {
            return Err(shape_err!("decoder expects {} latents, got {}", self.latent_dim, c.len()));
        }
        Ok(self.decoder.predict(c)?.into_iter().map(|z| clamp_prob(sigmoid(z))).collect())
    }

    /// One-sample ELBO for a given posterior.
    pub fn elbo_with_posterior(&self, post: &GaussianPosterior, target: &[u8], w: usize, rng: &mut Rng) -> Result<f64> {
        let c: Vec<f64> = post.mean.iter().zip(&post.var).map(|(m, v)| m + v.sqrt() * rng.normal()).collect();
        let recon = bernoulli_log_likelihood(target, &self.decode(&c)?);
        let (pm, pv) = self.prior_params(w);
        Ok(recon - kl_gaussian_diag(&post.mean, &post.var, &pm, &pv)?)
    }

    /// `E_q[log p(A | C)] - KL(q(C | row, W) || p(C | W))`, one sample.
    pub fn elbo(&self, row: &[f64], target: &[u8], w: usize, rng: &mut Rng) -> Result<f64> {
        let post = self.encode(row, w)?;
        self.elbo_with_posterior(&post, target, w, rng)
    }

    /// Mean negative ELBO over `users` and its gradient in
    /// [`IvaeModel::params_flat`] order. Existing gradients are discarded.
    pub fn loss_and_gradient(
        &mut self,
        inputs: &DenseMatrix,
        targets: &BinaryMatrix,
        w: &[usize],
        users: &[usize],
        rng: &mut Rng,
    ) -> Result<(f64, Vec<f64>)> {
        for g in self.param_groups() {
            g.grads.iter_mut().for_each(|v| *v = 0.0);
        }
        let elbo = self.accumulate(inputs, targets, w, users, rng)?;
        let mut grad = Vec::new();
        for g in self.param_groups() {
            grad.extend_from_slice(g.grads);
        }
        Ok((-elbo, grad))
    }

    /// Accumulate gradients of the mean negative ELBO over `users` and
    /// return the mean ELBO.
    fn accumulate(
        &mut self,
        inputs: &DenseMatrix,
        targets: &BinaryMatrix,
        w: &[usize],
        users: &[usize],
        rng: &mut Rng,
    ) -> Result<f64> {
        let (b, d, n) = (users.len(), self.latent_dim, self.n_items);
        let inv_b = 1.0 / b as f64;
        let mut x = DenseMatrix::zeros(b, n + self.n_categories);
        for (r, &u) in users.iter().enumerate() {
            let row = inputs.row(u);
            self.encoder_input(row, w[u], x.row_mut(r));
        }
        let enc_out = self.encoder.forward_batch(&x)?;
        let mut z = DenseMatrix::zeros(b, d);
        let mut eps = DenseMatrix::zeros(b, d);
        for r in 0..b {
            for k in 0..d {
                let e = rng.normal();
                let lv = enc_out.get(r, d + k).clamp(LOGVAR_MIN, LOGVAR_MAX);
                eps.set(r, k, e);
                z.set(r, k, enc_out.get(r, k) + (0.5 * lv).exp() * e);
            }
        }
        let logits = self.decoder.forward_batch(&z)?;
        let mut g_logits = DenseMatrix::zeros(b, n);
        let mut total = 0.0;
        for (r, &u) in users.iter().enumerate() {
            let a = targets.row(u);
            let lrow = logits.row(r);
            let grow = g_logits.row_mut(r);
            for i in 0..n {
                let p = clamp_prob(sigmoid(lrow[i]));
                let y = a[i] as f64;
                total += if a[i] != 0 { p.ln() } else { (1.0 - p).ln() };
                grow[i] = (p - y) * inv_b;
            }
        }
        let g_z = self.decoder.backward_batch(&g_logits)?;
        let mut g_enc = DenseMatrix::zeros(b, 2 * d);
        for (r, &u) in users.iter().enumerate() {
            let cat = w[u];
            for k in 0..d {
                let m = enc_out.get(r, k);
                let raw_lv = enc_out.get(r, d + k);
                let lv = raw_lv.clamp(LOGVAR_MIN, LOGVAR_MAX);
                let v = lv.exp();
                let (mw, lvw) = if cat < self.n_categories {
                    (self.prior_mean[cat * d + k], self.prior_logvar[cat * d + k])
                } else {
                    (0.0, 0.0)
                };
                let vw = lvw.exp();
                let diff = m - mw;
                total -= 0.5 * (lvw - lv + (v + diff * diff) / vw - 1.0);
                let gz = g_z.get(r, k);
                g_enc.set(r, k, gz + diff / vw * inv_b);
                let in_range = (LOGVAR_MIN..=LOGVAR_MAX).contains(&raw_lv);
                let glv = gz * eps.get(r, k) * 0.5 * (0.5 * lv).exp() + 0.5 * (v / vw - 1.0) * inv_b;
                g_enc.set(r, d + k, if in_range { glv } else { 0.0 });
                if cat < self.n_categories {
                    self.grad_prior_mean[cat * d + k] -= diff / vw * inv_b;
                    self.grad_prior_logvar[cat * d + k] += 0.5 * (1.0 - (v + diff * diff) / vw) * inv_b;
                }
            }
        }
        self.encoder.backward_batch(&g_enc)?;
        let mean = total * inv_b;
        if !mean.is_finite() {
            return Err(Error::Numeric("ELBO became non-finite".into()));
        }
        Ok(mean)
    }

    /// Mean ELBO over `users` with a fixed sampling stream.
    pub fn mean_elbo(&self, inputs: &DenseMatrix, targets: &BinaryMatrix, w: &[usize], users: &[usize], rng: &mut Rng) -> Result<f64> {
        if users.is_empty() {
            return Ok(0.0);
        }
        let mut total = 0.0;
        for &u in users {
            total += self.elbo(inputs.row(u), targets.row(u), w[u], rng)?;
        }
        Ok(total / users.len() as f64)
    }

    /// Posterior parameters for every row of `inputs`.
    pub fn encode_all(&self, inputs: &DenseMatrix, w: &[usize]) -> Result<PosteriorSet> {
        let n = inputs.rows();
        let d = self.latent_dim;
        let mut mean = DenseMatrix::zeros(n, d);
        let mut var = DenseMatrix::zeros(n, d);
        for u in 0..n {
            let p = self.encode(inputs.row(u), w[u])?;
            mean.row_mut(u).copy_from_slice(&p.mean);
            var.row_mut(u).copy_from_slice(&p.var);
        }
        Ok(PosteriorSet { mean, var })
    }

    pub fn params_flat(&self) -> Vec<f64> {
        let mut v = self.prior_mean.clone();
        v.extend(&self.prior_logvar);
        v.extend(self.encoder.params_flat());
        v.extend(self.decoder.params_flat());
        v
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) -> Result<()> {
        let p = self.prior_mean.len();
        let e = self.encoder.num_params();
        if flat.len() != 2 * p + e + self.decoder.num_params() {
            return Err(shape_err!("ivae parameter blob has {} values", flat.len()));
        }
        self.prior_mean.copy_from_slice(&flat[..p]);
        self.prior_logvar.copy_from_slice(&flat[p..2 * p]);
        self.encoder.set_params_flat(&flat[2 * p..2 * p + e])?;
        self.decoder.set_params_flat(&flat[2 * p + e..])
    }

    fn ensure_prior_grads(&mut self) {
        if self.grad_prior_mean.len() != self.prior_mean.len() {
            self.grad_prior_mean = vec![0.0; self.prior_mean.len()];
            self.grad_prior_logvar = vec![0.0; self.prior_logvar.len()];
        }
    }
}

impl Trainable for IvaeModel {
    fn param_groups(&mut self) -> Vec<ParamGroup<'_>> {
        self.ensure_prior_grads();
        let mut g = vec![
            ParamGroup { params: &mut self.prior_mean, grads: &mut self.grad_prior_mean },
            ParamGroup { params: &mut self.prior_logvar, grads: &mut self.grad_prior_logvar },
        ];
        g.extend(self.encoder.param_groups());
        g.extend(self.decoder.param_groups());
        g
    }
}

/// Per-user posterior means and variances.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSet {
    pub mean: DenseMatrix,
    pub var: DenseMatrix,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_validation_elbo: f64,
    /// Mean training ELBO per optimizer step.
    pub step_elbo: Vec<f64>,
    /// Validation ELBO per epoch.
    pub validation_elbo: Vec<f64>,
}

/// Train on the rows of `inputs` (encoder side) against `targets`
/// (reconstruction side). Initialization depends on `seed` only; the
/// mini-batch and sampling stream on `(seed, stream)`.
pub fn train_ivae(
    inputs: &DenseMatrix,
    targets: &BinaryMatrix,
    w: &[usize],
    cfg: &IvaeConfig,
    seed: u64,
    stream: u64,
) -> Result<(IvaeModel, TrainLog)> {
    let n = inputs.rows();
    if targets.rows() != n || w.len() != n || targets.cols() != inputs.cols() {
        return Err(shape_err!("ivae inputs {:?}, targets {}x{}, proxies {}", inputs.shape(), targets.rows(), targets.cols(), w.len()));
    }
    if n < 2 {
        return Err(Error::Validation("ivae needs at least two users".into()));
    }
    let n_categories = w.iter().max().map_or(1, |m| m + 1);
    let base = Rng::new(seed);
    let model = IvaeModel::new(inputs.cols(), n_categories, cfg, &mut base.substream(TAG_INIT))?;
    fit(model, true, inputs, targets, w, cfg, seed, stream)
}

/// Continues training from `start` instead of a fresh initialization.
///
/// Fine-tuning a model fitted on one input keeps the latent coordinates of
/// the two posteriors in correspondence, which is what makes a weighted sum
/// of them meaningful.
pub fn fine_tune_ivae(
    start: &IvaeModel,
    inputs: &DenseMatrix,
    targets: &BinaryMatrix,
    w: &[usize],
    cfg: &IvaeConfig,
    seed: u64,
    stream: u64,
) -> Result<(IvaeModel, TrainLog)> {
    let n = inputs.rows();
    if targets.rows() != n || w.len() != n || targets.cols() != inputs.cols() || start.n_items() != inputs.cols() {
        return Err(shape_err!("ivae inputs {:?}, targets {}x{}, proxies {}", inputs.shape(), targets.rows(), targets.cols(), w.len()));
    }
    if n < 2 {
        return Err(Error::Validation("ivae needs at least two users".into()));
    }
    if w.iter().any(|&c| c >= start.n_categories()) {
        return Err(Error::Domain("proxy category outside the model's prior table".into()));
    }
    fit(start.clone(), false, inputs, targets, w, cfg, seed, stream)
}

#[allow(clippy::too_many_arguments)]
fn fit(
    mut model: IvaeModel,
    fresh: bool,
    inputs: &DenseMatrix,
    targets: &BinaryMatrix,
    w: &[usize],
    cfg: &IvaeConfig,
    seed: u64,
    stream: u64,
) -> Result<(IvaeModel, TrainLog)> {
    let n = inputs.rows();
    let base = Rng::new(seed);
    let mut order: Vec<usize> = (0..n).collect();
    base.substream(TAG_HOLDOUT).shuffle(&mut order);
    let n_val = ((n as f64 * cfg.validation_fraction).round() as usize).min(n - 1);
    let val_users: Vec<usize> = order[..n_val].to_vec();
    let mut train_users: Vec<usize> = order[n_val..].to_vec();
    if fresh {
        model.init_decoder_bias(targets, &train_users);
    }

    let mut opt = Adam::new(AdamConfig::with_lr(cfg.lr));
    let mut rng = base.substream(stream);
    let mut log = TrainLog { best_validation_elbo: f64::NEG_INFINITY, ..Default::default() };
    let mut best = model.params_flat();
    let mut since_best = 0;
    let batch = cfg.batch_size.max(1);
    for epoch in 0..cfg.max_epochs {
        rng.shuffle(&mut train_users);
        for chunk in train_users.chunks(batch) {
            let elbo = model.accumulate(inputs, targets, w, chunk, &mut rng)?;
            opt.step(model.param_groups())?;
            log.step_elbo.push(elbo);
        }
        let monitor = if val_users.is_empty() { &train_users } else { &val_users };
        let val = model.mean_elbo(inputs, targets, w, monitor, &mut base.substream(TAG_VALIDATION))?;
        if !val.is_finite() {
            return Err(Error::Numeric(format!("validation ELBO non-finite at epoch {epoch}")));
        }
        log.validation_elbo.push(val);
        log.epochs_run = epoch + 1;
        if val > log.best_validation_elbo {
            log.best_validation_elbo = val;
            log.best_epoch = epoch;
            best = model.params_flat();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    model.set_params_flat(&best)?;
    Ok((model, log))
}

/// `C = rho * C1 + tau * C2` over two posterior sets (the second optional).
#[derive(Debug, Clone)]
pub struct FusedConfounder {
    pub first: PosteriorSet,
    pub second: Option<PosteriorSet>,
    pub rho: f64,
    pub tau: f64,
}

pub fn fuse_confounders(first: PosteriorSet, second: Option<PosteriorSet>, rho: f64, tau: f64) -> Result<FusedConfounder> {
    if let Some(s) = &second {
        if s.mean.shape() != first.mean.shape() {
            return Err(shape_err!("fusing posteriors {:?} and {:?}", first.mean.shape(), s.mean.shape()));
        }
    }
    Ok(FusedConfounder { first, second, rho, tau })
}

impl FusedConfounder {
    pub fn latent_dim(&self) -> usize {
        self.first.mean.cols()
    }

    pub fn n_users(&self) -> usize {
        self.first.mean.rows()
    }

    /// Deterministic fused value `rho * mu1 + tau * mu2`.
    pub fn mean(&self, u: usize, out: &mut [f64]) {
        for (k, o) in out.iter_mut().enumerate() {
            *o = self.rho * self.first.mean.get(u, k);
            if let Some(s) = &self.second {
                *o += self.tau * s.mean.get(u, k);
            }
        }
    }

    /// Fused reparameterized sample.
    pub fn sample(&self, u: usize, rng: &mut Rng, out: &mut [f64]) {
        for (k, o) in out.iter_mut().enumerate() {
            let c1 = self.first.mean.get(u, k) + self.first.var.get(u, k).sqrt() * rng.normal();
            *o = self.rho * c1;
            if let Some(s) = &self.second {
                let c2 = s.mean.get(u, k) + s.var.get(u, k).sqrt() * rng.normal();
                *o += self.tau * c2;
            }
        }
    }

    pub fn mean_matrix(&self) -> DenseMatrix {
        let d = self.latent_dim();
        let mut m = DenseMatrix::zeros(self.n_users(), d);
        for u in 0..self.n_users() {
            self.mean(u, m.row_mut(u));
        }
        m
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_diff_check;

    fn toy_data(n: usize, m: usize, seed: u64) -> (DenseMatrix, BinaryMatrix, Vec<usize>) {
        let mut rng = Rng::new(seed);
        let w: Vec<usize> = (0..n).map(|_| rng.below(3)).collect();
        let mut a = BinaryMatrix::zeros(n, m);
        for u in 0..n {
            for i in 0..m {
                let p = if (i % 3) == w[u] { 0.7 } else { 0.1 };
                a.set(u, i, rng.bernoulli(p));
            }
        }
        (a.to_dense(), a, w)
    }

    fn small_cfg() -> IvaeConfig {
        IvaeConfig { encoder_hidden: vec![8], decoder_hidden: vec![6], max_epochs: 30, ..IvaeConfig::default() }
    }

    #[test]
    fn untrained_prior_is_standard_normal() {
        let m = IvaeModel::new(5, 3, &small_cfg(), &mut Rng::new(0)).unwrap();
        for w in 0..4 {
            assert_eq!(m.prior_params(w), (vec![0.0, 0.0], vec![1.0, 1.0]));
        }
    }

    #[test]
    fn encode_is_deterministic_with_positive_variance() {
        let m = IvaeModel::new(6, 2, &small_cfg(), &mut Rng::new(1)).unwrap();
        let mut rng = Rng::new(2);
        for _ in 0..20 {
            let row: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
            let a = m.encode(&row, 1).unwrap();
            assert_eq!(a, m.encode(&row, 1).unwrap());
            assert!(a.var.iter().all(|&v| v > 0.0));
        }
        assert!(m.encode(&[0.0; 3], 0).is_err());
    }

    #[test]
    fn decode_is_clamped_and_loglik_matches_pmf() {
        let m = IvaeModel::new(7, 2, &small_cfg(), &mut Rng::new(3)).unwrap();
        let probs = m.decode(&[50.0, -50.0]).unwrap();
        assert!(probs.iter().all(|&p| (PROB_EPS..=1.0 - PROB_EPS).contains(&p)));
        let probs = m.decode(&[0.3, -0.2]).unwrap();
        let target = [1u8, 0, 0, 1, 1, 0, 1];
        let mut want = 0.0;
        for (a, p) in target.iter().zip(&probs) {
            // Bernoulli pmf p^a (1-p)^(1-a), evaluated directly.
            want += (p.powi(*a as i32) * (1.0 - p).powi(1 - *a as i32)).ln();
        }
        assert!((bernoulli_log_likelihood(&target, &probs) - want).abs() < 1e-12);
    }

    #[test]
    fn elbo_equals_reconstruction_when_posterior_is_prior() {
        let m = IvaeModel::new(4, 2, &small_cfg(), &mut Rng::new(4)).unwrap();
        let post = GaussianPosterior { mean: vec![0.0, 0.0], var: vec![1.0, 1.0] };
        let target = [1u8, 0, 1, 0];
        let elbo = m.elbo_with_posterior(&post, &target, 0, &mut Rng::new(5)).unwrap();
        let mut rng = Rng::new(5);
        let c = [rng.normal(), rng.normal()];
        let recon = bernoulli_log_likelihood(&target, &m.decode(&c).unwrap());
        assert!((elbo - recon).abs() < 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (x, a, w) = toy_data(5, 6, 6);
        let mut m = IvaeModel::new(6, 3, &small_cfg(), &mut Rng::new(7)).unwrap();
        m.set_prior(1, &[0.3, -0.2], &[0.1, -0.3]);
        let users: Vec<usize> = (0..5).collect();
        m.accumulate(&x, &a, &w, &users, &mut Rng::new(8)).unwrap();
        let mut analytic = Vec::new();
        for g in m.param_groups() {
            analytic.extend(g.grads.iter().map(|v| -*v));
        }
        let params = m.params_flat();
        let base = m.clone();
        let err = finite_diff_check(
            |p| {
                let mut t = base.clone();
                t.set_params_flat(p).unwrap();
                t.encoder.zero_grad();
                t.decoder.zero_grad();
                t.accumulate(&x, &a, &w, &users, &mut Rng::new(8)).unwrap()
            },
            &params,
            &analytic,
        );
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn training_is_deterministic_and_improves() {
        let (x, a, w) = toy_data(120, 15, 9);
        let cfg = small_cfg();
        let (m1, log) = train_ivae(&x, &a, &w, &cfg, 3, 1).unwrap();
        let (m2, _) = train_ivae(&x, &a, &w, &cfg, 3, 1).unwrap();
        assert_eq!(m1.params_flat(), m2.params_flat());
        let first = log.step_elbo[..10].iter().sum::<f64>();
        let last = log.step_elbo[log.step_elbo.len() - 10..].iter().sum::<f64>();
        assert!(last > first);
    }

    #[test]
    fn fusion_modes() {
        let mut rng = Rng::new(10);
        let mk = |rng: &mut Rng| PosteriorSet {
            mean: DenseMatrix::from_fn(4, 2, |_, _| rng.normal()),
            var: DenseMatrix::from_fn(4, 2, |_, _| rng.uniform() + 0.1),
        };
        let (p1, p2) = (mk(&mut rng), mk(&mut rng));
        let f = fuse_confounders(p1.clone(), Some(p2.clone()), 1.0, 0.0).unwrap();
        assert_eq!(f.mean_matrix(), p1.mean);
        let f = fuse_confounders(p1.clone(), Some(p2.clone()), 0.9, 0.9).unwrap();
        let want = p1.mean.add(&p2.mean).unwrap().scale(0.9);
        assert!(f.mean_matrix().sub(&want).unwrap().max_abs() < 1e-15);
    }
}
