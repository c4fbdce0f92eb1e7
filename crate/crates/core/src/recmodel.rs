//! Final predictor: matrix factorization plus an additive confounder term,
//! `sigmoid(phi * c . e_Ci + lambda * (p_u . q_i + k_u + k_i + b))`,
//! trained with BCE on binarized feedback and sampled negatives.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::datasets::Triple;
use crate::error::{Error, Result};
use crate::eval::{evaluate_ranking, RankingMetrics};
use crate::ivae::FusedConfounder;
use crate::numerics::{dot, log_sigmoid, sigmoid, Activation, Adam, AdamConfig, Mlp, ParamGroup, Rng, Trainable};

const TAG_INIT: u64 = 21;
const TAG_EXAMPLES: u64 = 22;
const TAG_CONFOUNDER: u64 = 23;
const TAG_HEAD_INIT: u64 = 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "IViDR")]
    IviDr,
    #[serde(rename = "IViDR-T")]
    IviDrT,
    #[serde(rename = "IViDR-F")]
    IviDrF,
    #[serde(rename = "IViDR-R")]
    IviDrR,
    #[serde(rename = "MF")]
    Mf,
    #[serde(rename = "iDCF")]
    Idcf,
}

impl Variant {
    pub const ALL: [Variant; 6] =
        [Variant::IviDr, Variant::IviDrT, Variant::IviDrF, Variant::IviDrR, Variant::Mf, Variant::Idcf];

    pub fn name(self) -> &'static str {
        match self {
            Variant::IviDr => "IViDR",
            Variant::IviDrT => "IViDR-T",
            Variant::IviDrF => "IViDR-F",
            Variant::IviDrR => "IViDR-R",
            Variant::Mf => "MF",
            Variant::Idcf => "iDCF",
        }
    }

    pub fn parse(s: &str) -> Result<Variant> {
        let norm = s.trim().to_ascii_lowercase().replace('_', "-");
        Ok(match norm.as_str() {
            "ividr" => Variant::IviDr,
            "ividr-t" => Variant::IviDrT,
            "ividr-f" => Variant::IviDrF,
            "ividr-r" => Variant::IviDrR,
            "mf" => Variant::Mf,
            "idcf" | "idcf-baseline" => Variant::Idcf,
            _ => return Err(Error::Config(format!("unknown variant {s:?}"))),
        })
    }

    /// Whether the variant runs the treatment reconstruction stage.
    pub fn uses_iv(self) -> bool {
        matches!(self, Variant::IviDr | Variant::IviDrT | Variant::IviDrF | Variant::IviDrR)
    }

    pub fn uses_confounder(self) -> bool {
        self != Variant::Mf
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HeadKind {
    /// `c . e_Ci`
    Linear,
    /// Small MLP over `[c, e_Ci]`.
    Mlp { hidden: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RecConfig {
    pub dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    /// Sampled unobserved items per positive, redrawn every epoch.
    pub negatives: usize,
    pub phi: f64,
    pub lambda: f64,
    pub init_std: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub k: usize,
    pub head: HeadKind,
    /// `(learning rate, weight decay)` cells; the best validation NDCG wins.
    pub grid: Vec<(f64, f64)>,
}

/// Learning rates and weight decays searched by default.
pub fn default_grid() -> Vec<(f64, f64)> {
    let mut g = Vec::new();
    for lr in [1e-3, 5e-4, 1e-4, 5e-5, 1e-5] {
        for wd in [1e-5, 1e-6] {
            g.push((lr, wd));
        }
    }
    g
}

impl Default for RecConfig {
    fn default() -> Self {
        Self {
            dim: 16,
            epochs: 100,
            batch_size: 256,
            negatives: 4,
            phi: 1.0,
            lambda: 1.0,
            init_std: 0.1,
            patience: 10,
            k: 5,
            head: HeadKind::Linear,
            grid: default_grid(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MfModel {
    pub n_users: usize,
    pub n_items: usize,
    pub dim: usize,
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    pub user_bias: Vec<f64>,
    pub item_bias: Vec<f64>,
    pub global_bias: Vec<f64>,
}

impl MfModel {
    pub fn zeros(n_users: usize, n_items: usize, dim: usize) -> Self {
        Self {
            n_users,
            n_items,
            dim,
            p: vec![0.0; n_users * dim],
            q: vec![0.0; n_items * dim],
            user_bias: vec![0.0; n_users],
            item_bias: vec![0.0; n_items],
            global_bias: vec![0.0],
        }
    }

    pub fn random(n_users: usize, n_items: usize, dim: usize, std: f64, rng: &mut Rng) -> Self {
        let mut m = Self::zeros(n_users, n_items, dim);
        m.p.iter_mut().for_each(|v| *v = std * rng.normal());
        m.q.iter_mut().for_each(|v| *v = std * rng.normal());
        m
    }

    #[inline]
    pub fn user_vec(&self, u: usize) -> &[f64] {
        &self.p[u * self.dim..(u + 1) * self.dim]
    }

    #[inline]
    pub fn item_vec(&self, i: usize) -> &[f64] {
        &self.q[i * self.dim..(i + 1) * self.dim]
    }

    /// `p_u . q_i + k_u + k_i + b`
    #[inline]
    pub fn score(&self, u: usize, i: usize) -> f64 {
        dot(self.user_vec(u), self.item_vec(i)) + self.user_bias[u] + self.item_bias[i] + self.global_bias[0]
    }

    /// Item latent vectors as an `n_items x dim` matrix.
    pub fn item_matrix(&self) -> crate::numerics::DenseMatrix {
        crate::numerics::DenseMatrix::from_fn(self.n_items, self.dim, |i, k| self.q[i * self.dim + k])
    }

    fn params(&self) -> Vec<f64> {
        let mut v = self.p.clone();
        v.extend(&self.q);
        v.extend(&self.user_bias);
        v.extend(&self.item_bias);
        v.extend(&self.global_bias);
        v
    }

    fn set_params(&mut self, flat: &[f64]) {
        let mut off = 0;
        for dst in [&mut self.p, &mut self.q, &mut self.user_bias, &mut self.item_bias, &mut self.global_bias] {
            let n = dst.len();
            dst.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConfounderHead {
    pub latent_dim: usize,
    /// `n_items x latent_dim` item confounder embeddings.
    pub item_emb: Vec<f64>,
    pub mlp: Option<Mlp>,
}

impl ConfounderHead {
    pub fn new(n_items: usize, latent_dim: usize, kind: &HeadKind, std: f64, rng: &mut Rng) -> Result<Self> {
        let item_emb = (0..n_items * latent_dim).map(|_| std * rng.normal()).collect();
        let mlp = match kind {
            HeadKind::Linear => None,
            HeadKind::Mlp { hidden } => Some(Mlp::new(&[2 * latent_dim, *hidden, 1], Activation::Identity, rng)?),
        };
        Ok(Self { latent_dim, item_emb, mlp })
    }

    #[inline]
    pub fn item(&self, i: usize) -> &[f64] {
        &self.item_emb[i * self.latent_dim..(i + 1) * self.latent_dim]
    }

    /// Confounder contribution for latent `c` and item `i`.
    pub fn score(&self, c: &[f64], i: usize) -> f64 {
        match &self.mlp {
            None => dot(c, self.item(i)),
            Some(m) => {
                let mut x = c.to_vec();
                x.extend_from_slice(self.item(i));
                m.predict(&x).map(|v| v[0]).unwrap_or(f64::NAN)
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IviDrModel {
    pub mf: MfModel,
    pub head: Option<ConfounderHead>,
    pub phi: f64,
    pub lambda: f64,
    pub variant: Variant,
}

struct Grads {
    p: Vec<f64>,
    q: Vec<f64>,
    user_bias: Vec<f64>,
    item_bias: Vec<f64>,
    global_bias: Vec<f64>,
    item_emb: Vec<f64>,
}

impl Grads {
    fn for_model(m: &IviDrModel) -> Self {
        Self {
            p: vec![0.0; m.mf.p.len()],
            q: vec![0.0; m.mf.q.len()],
            user_bias: vec![0.0; m.mf.n_users],
            item_bias: vec![0.0; m.mf.n_items],
            global_bias: vec![0.0],
            item_emb: vec![0.0; m.head.as_ref().map_or(0, |h| h.item_emb.len())],
        }
    }
}

impl IviDrModel {
    pub fn new(n_users: usize, n_items: usize, latent_dim: usize, variant: Variant, cfg: &RecConfig, seed: u64) -> Result<Self> {
        if cfg.phi < 0.0 || cfg.lambda < 0.0 {
            return Err(Error::Config("phi and lambda must be non-negative".into()));
        }
        let base = Rng::new(seed);
        let mf = MfModel::random(n_users, n_items, cfg.dim, cfg.init_std, &mut base.substream(TAG_INIT));
        let head = if variant.uses_confounder() {
            Some(ConfounderHead::new(n_items, latent_dim, &cfg.head, cfg.init_std, &mut base.substream(TAG_HEAD_INIT))?)
        } else {
            None
        };
        Ok(Self { mf, head, phi: cfg.phi, lambda: cfg.lambda, variant })
    }

    pub fn mf_score(&self, u: usize, i: usize) -> f64 {
        self.mf.score(u, i)
    }

    pub fn confounder_score(&self, c: &[f64], i: usize) -> f64 {
        self.head.as_ref().map_or(0.0, |h| h.score(c, i))
    }

    /// Pre-sigmoid score.
    #[inline]
    pub fn logit(&self, u: usize, i: usize, c: &[f64]) -> f64 {
        self.phi * self.confounder_score(c, i) + self.lambda * self.mf_score(u, i)
    }

    pub fn predict(&self, u: usize, i: usize, c: &[f64]) -> f64 {
        sigmoid(self.logit(u, i, c))
    }

    /// Summed BCE over `examples` (user, item, label) with one confounder
    /// row per example, and its gradient in `params_flat` order.
    pub fn loss_and_gradient(&mut self, examples: &[(usize, usize, f64)], confounders: &[Vec<f64>]) -> Result<(f64, Vec<f64>)> {
        if confounders.len() != examples.len() {
            return Err(Error::Shape(format!("{} confounder rows for {} examples", confounders.len(), examples.len())));
        }
        let mut g = Grads::for_model(self);
        if let Some(m) = self.head.as_mut().and_then(|h| h.mlp.as_mut()) {
            m.zero_grad();
        }
        let mut loss = 0.0;
        for (&(u, i, y), c) in examples.iter().zip(confounders) {
            loss += self.example(u, i, y, c, 1.0, &mut g)?;
        }
        let mut grad = Vec::new();
        for grp in (Optimizable { model: self, grads: &mut g }).param_groups() {
            grad.extend_from_slice(grp.grads);
        }
        Ok((loss, grad))
    }

    /// BCE for one example; accumulates `scale * dLoss/dtheta` into `g`
    /// and the MLP head's own buffers.
    fn example(&mut self, u: usize, i: usize, y: f64, c: &[f64], scale: f64, g: &mut Grads) -> Result<f64> {
        let d = self.mf.dim;
        let mut conf = 0.0;
        if let Some(h) = self.head.as_mut() {
            conf = match h.mlp.as_mut() {
                None => dot(c, h.item(i)),
                Some(m) => {
                    let mut x_head = c.to_vec();
                    x_head.extend_from_slice(&h.item_emb[i * h.latent_dim..(i + 1) * h.latent_dim]);
                    m.forward(&x_head)?[0]
                }
            };
        }
        let s = self.phi * conf + self.lambda * self.mf.score(u, i);
        let loss = -(y * log_sigmoid(s) + (1.0 - y) * log_sigmoid(-s));
        let ds = (sigmoid(s) - y) * scale;
        let lm = self.lambda * ds;
        for k in 0..d {
            g.p[u * d + k] += lm * self.mf.q[i * d + k];
            g.q[i * d + k] += lm * self.mf.p[u * d + k];
        }
        g.user_bias[u] += lm;
        g.item_bias[i] += lm;
        g.global_bias[0] += lm;
        if let Some(h) = self.head.as_mut() {
            let dc = self.phi * ds;
            let l = h.latent_dim;
            match h.mlp.as_mut() {
                None => {
                    for k in 0..l {
                        g.item_emb[i * l + k] += dc * c[k];
                    }
                }
                Some(m) => {
                    let dx = m.backward(&[dc])?;
                    for k in 0..l {
                        g.item_emb[i * l + k] += dx[l + k];
                    }
                }
            }
        }
        Ok(loss)
    }

    pub fn params_flat(&self) -> Vec<f64> {
        let mut v = self.mf.params();
        if let Some(h) = &self.head {
            v.extend(&h.item_emb);
            if let Some(m) = &h.mlp {
                v.extend(m.params_flat());
            }
        }
        v
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) -> Result<()> {
        let n = self.mf.params().len();
        self.mf.set_params(&flat[..n]);
        if let Some(h) = self.head.as_mut() {
            let e = h.item_emb.len();
            h.item_emb.copy_from_slice(&flat[n..n + e]);
            if let Some(m) = h.mlp.as_mut() {
                m.set_params_flat(&flat[n + e..])?;
            }
        }
        Ok(())
    }

    /// Flat parameter blob for checkpoints.
    pub fn checkpoint_params(&self) -> Vec<f64> {
        self.params_flat()
    }

    pub fn restore_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.params_flat().len() {
            return Err(Error::Shape(format!("checkpoint holds {} values, model needs {}", flat.len(), self.params_flat().len())));
        }
        self.set_params_flat(flat)
    }

    /// Ranking metrics on `test` (binary labels) using fused posterior
    /// means.
    pub fn evaluate(&self, test: &[Triple], fused: Option<&FusedConfounder>, k: usize) -> Result<RankingMetrics> {
        let d = fused.map_or(0, |f| f.latent_dim());
        let mut c = vec![0.0; d];
        let mut last_user = usize::MAX;
        evaluate_ranking(test, k, |u, i| {
            if let Some(f) = fused {
                if u != last_user {
                    f.mean(u, &mut c);
                    last_user = u;
                }
            }
            self.logit(u, i, &c)
        })
    }
}

struct Optimizable<'a> {
    model: &'a mut IviDrModel,
    grads: &'a mut Grads,
}

impl Trainable for Optimizable<'_> {
    fn param_groups(&mut self) -> Vec<ParamGroup<'_>> {
        let m = &mut *self.model;
        let g = &mut *self.grads;
        let mut groups = vec![
            ParamGroup { params: &mut m.mf.p, grads: &mut g.p },
            ParamGroup { params: &mut m.mf.q, grads: &mut g.q },
            ParamGroup { params: &mut m.mf.user_bias, grads: &mut g.user_bias },
            ParamGroup { params: &mut m.mf.item_bias, grads: &mut g.item_bias },
            ParamGroup { params: &mut m.mf.global_bias, grads: &mut g.global_bias },
        ];
        if let Some(h) = m.head.as_mut() {
            groups.push(ParamGroup { params: &mut h.item_emb, grads: &mut g.item_emb });
            if let Some(mlp) = h.mlp.as_mut() {
                groups.extend(mlp.param_groups());
            }
        }
        groups
    }
}

/// Labelled examples for one epoch: every observed training pair with its
/// binary label, plus `negatives` uniformly drawn unobserved items per
/// positive. Shuffled.
pub fn epoch_examples(
    train: &[Triple],
    observed: &[HashSet<usize>],
    n_items: usize,
    negatives: usize,
    rng: &mut Rng,
) -> Vec<(usize, usize, f64)> {
    let mut out: Vec<(usize, usize, f64)> = Vec::with_capacity(train.len() * (1 + negatives));
    for t in train {
        out.push((t.user, t.item, t.rating as f64));
        if t.rating == 0 || observed[t.user].len() >= n_items {
            continue;
        }
        for _ in 0..negatives {
            let j = loop {
                let j = rng.below(n_items);
                if !observed[t.user].contains(&j) {
                    break j;
                }
            };
            out.push((t.user, j, 0.0));
        }
    }
    rng.shuffle(&mut out);
    out
}

pub fn observed_sets(train: &[Triple], n_users: usize) -> Vec<HashSet<usize>> {
    let mut sets = vec![HashSet::new(); n_users];
    for t in train {
        sets[t.user].insert(t.item);
    }
    sets
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitSummary {
    pub lr: f64,
    pub weight_decay: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub validation_ndcg: f64,
    pub final_train_loss: f64,
}

/// Train one `(lr, weight_decay)` cell with best-validation checkpointing.
pub fn train_cell(
    n_users: usize,
    n_items: usize,
    variant: Variant,
    train: &[Triple],
    validation: &[Triple],
    fused: Option<&FusedConfounder>,
    cfg: &RecConfig,
    lr: f64,
    weight_decay: f64,
    seed: u64,
) -> Result<(IviDrModel, FitSummary)> {
    if variant.uses_confounder() && fused.is_none() {
        return Err(Error::Config(format!("{} needs fused confounders", variant.name())));
    }
    if let Some(f) = fused {
        if f.n_users() != n_users {
            return Err(Error::Shape(format!("fused confounders cover {} users, dataset has {n_users}", f.n_users())));
        }
    }
    let latent = fused.map_or(0, |f| f.latent_dim());
    let fused = if variant.uses_confounder() { fused } else { None };
    let mut model = IviDrModel::new(n_users, n_items, latent, variant, cfg, seed)?;
    let mut grads = Grads::for_model(&model);
    let observed = observed_sets(train, n_users);
    let base = Rng::new(seed);
    let mut ex_rng = base.substream(TAG_EXAMPLES);
    let mut c_rng = base.substream(TAG_CONFOUNDER);
    let mut opt = Adam::new(AdamConfig { lr, weight_decay, ..AdamConfig::default() });
    let mut c = vec![0.0; latent];
    let mut best = (f64::NEG_INFINITY, model.params_flat(), 0usize);
    let mut since_best = 0;
    let mut summary = FitSummary { lr, weight_decay, best_epoch: 0, epochs_run: 0, validation_ndcg: 0.0, final_train_loss: 0.0 };
    for epoch in 0..cfg.epochs {
        let examples = epoch_examples(train, &observed, n_items, cfg.negatives, &mut ex_rng);
        let mut total = 0.0;
        for chunk in examples.chunks(cfg.batch_size.max(1)) {
            let scale = 1.0 / chunk.len() as f64;
            for &(u, i, y) in chunk {
                if let Some(f) = fused {
                    f.sample(u, &mut c_rng, &mut c);
                }
                total += model.example(u, i, y, &c, scale, &mut grads)?;
            }
            opt.step(Optimizable { model: &mut model, grads: &mut grads }.param_groups())?;
        }
        let loss = total / examples.len().max(1) as f64;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("training loss non-finite at epoch {epoch}")));
        }
        summary.final_train_loss = loss;
        summary.epochs_run = epoch + 1;
        let val = if validation.is_empty() {
            -loss
        } else {
            model.evaluate(validation, fused, cfg.k)?.ndcg
        };
        if val > best.0 {
            best = (val, model.params_flat(), epoch);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    model.set_params_flat(&best.1)?;
    summary.best_epoch = best.2;
    summary.validation_ndcg = if validation.is_empty() { 0.0 } else { best.0 };
    Ok((model, summary))
}

/// Grid search over `cfg.grid`; returns the best cell's model.
pub fn train(
    n_users: usize,
    n_items: usize,
    variant: Variant,
    train_split: &[Triple],
    validation: &[Triple],
    fused: Option<&FusedConfounder>,
    cfg: &RecConfig,
    seed: u64,
) -> Result<(IviDrModel, FitSummary)> {
    if cfg.grid.is_empty() {
        return Err(Error::Config("empty optimizer grid".into()));
    }
    let mut best: Option<(IviDrModel, FitSummary)> = None;
    for &(lr, wd) in &cfg.grid {
        let (m, s) = train_cell(n_users, n_items, variant, train_split, validation, fused, cfg, lr, wd, seed)?;
        log::debug!("{} lr={lr} wd={wd}: val ndcg {:.4} at epoch {}", variant.name(), s.validation_ndcg, s.best_epoch);
        if best.as_ref().is_none_or(|b| s.validation_ndcg > b.1.validation_ndcg) {
            best = Some((m, s));
        }
    }
    Ok(best.expect("grid is non-empty"))
}
