//! Treatment reconstruction with user-feature instruments.
//!
//! Each item's treatment `t0 = MLP0(T_j)` is regressed on the columns of
//! `Z_j`, the feature embeddings of users who interacted with the item.
//! The fitted part `P_j t0` and the residual `(I - P_j) t0` are recombined
//! with learned per-item weights, and a linear head turns the result into
//! a per-item scalar that reweights the exposure matrix.
//!
//! `P_j = Z_j Z_j^+` is computed once per item and held constant while the
//! networks train, so no gradient passes through the SVD.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::datasets::{BinaryMatrix, Triple};
use crate::error::{shape_err, Error, Result};
use crate::numerics::{
    default_rcond, dot, finite_diff_check, log_sigmoid, pinv, sigmoid, Activation, Adam, AdamConfig, DenseMatrix, Mlp,
    ParamGroup, Rng,
    Trainable,
};
use crate::recmodel::{epoch_examples, observed_sets};

const TAG_USER_PROJECTION: u64 = 31;
const TAG_SUBSAMPLE: u64 = 32;
const TAG_NETS: u64 = 33;
const TAG_TRAIN: u64 = 34;

/// Which part of the reconstructed treatment feeds the adjustment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TreatmentMode {
    /// `alpha1 * fitted + alpha2 * residual` with learned weights.
    Combined,
    /// `MLP0(T)` itself, no decomposition.
    Raw,
    /// Weights forced to `(1, 0)`.
    FittedOnly,
    /// Weights forced to `(0, 1)`.
    ResidualOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IvConfig {
    /// Column cap for `Z_j`.
    pub n_max: usize,
    /// Global scale `s` of the exposure adjustment.
    pub scale: f64,
    pub mlp0_hidden: Vec<usize>,
    pub alpha_hidden: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub negatives: usize,
}

impl Default for IvConfig {
    fn default() -> Self {
        Self {
            n_max: 64,
            scale: 1.0,
            mlp0_hidden: vec![16],
            alpha_hidden: 16,
            epochs: 10,
            lr: 1e-3,
            batch_size: 256,
            negatives: 4,
        }
    }
}

/// Treatment embeddings for a user's training items plus the target item.
#[derive(Debug, Clone, PartialEq)]
pub struct Treatment {
    pub items: Vec<usize>,
    pub embeddings: DenseMatrix,
}

/// `{T_j : j in I_u or j = i}`, keys sorted and unique.
pub fn build_treatment(train_items: &[usize], target: usize, item_embeddings: &DenseMatrix) -> Result<Treatment> {
    let keys: BTreeSet<usize> = train_items.iter().copied().chain(std::iter::once(target)).collect();
    if let Some(&bad) = keys.iter().find(|&&j| j >= item_embeddings.rows()) {
        return Err(shape_err!("item {bad} outside {} embeddings", item_embeddings.rows()));
    }
    let items: Vec<usize> = keys.into_iter().collect();
    Ok(Treatment { embeddings: item_embeddings.select_rows(&items), items })
}

/// Fixed random projection of standardized user features to `d_q` dims.
pub fn user_feature_embeddings(features: &DenseMatrix, d_q: usize, seed: u64) -> DenseMatrix {
    let (n, d_f) = features.shape();
    if d_f == 0 {
        return DenseMatrix::zeros(n, d_q);
    }
    let mut rng = Rng::new(seed).substream(TAG_USER_PROJECTION);
    let scale = 1.0 / (d_f as f64).sqrt();
    let proj = DenseMatrix::from_fn(d_f, d_q, |_, _| scale * rng.normal());
    features.matmul(&proj).expect("projection shapes agree")
}

/// `Z_j` as a `d_q x N` matrix whose columns are the embeddings of the
/// given users, subsampled uniformly to at most `n_max` columns. `None`
/// when no user interacted with the item.
pub fn build_iv_matrix(users: &[usize], user_emb: &DenseMatrix, n_max: usize, rng: &mut Rng) -> Option<DenseMatrix> {
    if users.is_empty() || n_max == 0 {
        return None;
    }
    let chosen: Vec<usize> = if users.len() > n_max {
        rng.sample_indices(users.len(), n_max).into_iter().map(|k| users[k]).collect()
    } else {
        users.to_vec()
    };
    Some(user_emb.select_rows(&chosen).transpose())
}

/// Split `t0` into its projection on the column space of `z` and the
/// remainder: `tau = z^+ t0`, `fitted = z tau`, `residual = t0 - fitted`.
pub fn decompose(t0: &[f64], z: &DenseMatrix) -> Result<(Vec<f64>, Vec<f64>)> {
    if z.rows() != t0.len() {
        return Err(shape_err!("Z_j has {} rows, treatment has {}", z.rows(), t0.len()));
    }
    let zp = pinv(z, default_rcond(z.rows(), z.cols()))?;
    let tau = zp.matvec(t0)?;
    let fitted = z.matvec(&tau)?;
    let residual = t0.iter().zip(&fitted).map(|(a, b)| a - b).collect();
    Ok((fitted, residual))
}

/// Orthogonal projector `Z Z^+` onto the column space of `z`.
pub fn projector(z: &DenseMatrix) -> Result<DenseMatrix> {
    let zp = pinv(z, default_rcond(z.rows(), z.cols()))?;
    z.matmul(&zp)
}

/// `MLP0` (treatment map) and `MLP1`, `MLP2` (combination weights).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IvNetworks {
    pub mlp0: Mlp,
    pub mlp1: Mlp,
    pub mlp2: Mlp,
}

/// Softplus output bias that starts the combination weights at 1.
const UNIT_SOFTPLUS_BIAS: f64 = 0.541_324_854_612_918_1;

impl IvNetworks {
    pub fn new(d_in: usize, d_q: usize, cfg: &IvConfig, rng: &mut Rng) -> Result<Self> {
        let mut s0 = vec![d_in];
        s0.extend(&cfg.mlp0_hidden);
        s0.push(d_q);
        let alpha_sizes = [2 * d_q, cfg.alpha_hidden, 1];
        let mut nets = Self {
            mlp0: Mlp::new(&s0, Activation::Identity, rng)?,
            mlp1: Mlp::new(&alpha_sizes, Activation::Softplus, rng)?,
            mlp2: Mlp::new(&alpha_sizes, Activation::Softplus, rng)?,
        };
        for m in [&mut nets.mlp1, &mut nets.mlp2] {
            let last = m.layers_mut().last_mut().expect("layer");
            last.biases_mut()[0] = UNIT_SOFTPLUS_BIAS;
        }
        Ok(nets)
    }
}

/// Reconstructed treatment for one item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reconstructed {
    pub fitted: Vec<f64>,
    pub residual: Vec<f64>,
    pub combined: Vec<f64>,
    pub alpha1: f64,
    pub alpha2: f64,
}

fn alpha_input(t0: &[f64], pool: &[f64]) -> Vec<f64> {
    let mut x = t0.to_vec();
    x.extend_from_slice(pool);
    x
}

/// `T_re = alpha1 * fitted + alpha2 * residual` with the weights read from
/// `MLP1`, `MLP2` over `[MLP0(T_j), mean column of Z_j]`.
pub fn combine(t_j: &[f64], z: &DenseMatrix, fitted: &[f64], residual: &[f64], nets: &IvNetworks) -> Result<Reconstructed> {
    let t0 = nets.mlp0.predict(t_j)?;
    let pool = z.transpose().column_means();
    let x = alpha_input(&t0, &pool);
    let a1 = nets.mlp1.predict(&x)?[0];
    let a2 = nets.mlp2.predict(&x)?[0];
    Ok(Reconstructed {
        fitted: fitted.to_vec(),
        residual: residual.to_vec(),
        combined: fitted.iter().zip(residual).map(|(f, r)| a1 * f + a2 * r).collect(),
        alpha1: a1,
        alpha2: a2,
    })
}

/// `X_re[u, j] = A[u, j] * (1 + s * proj_j)`: the adjustment touches only
/// the user's interacted items.
pub fn debias_interactions(a: &BinaryMatrix, proj: &[f64], scale: f64) -> Result<DenseMatrix> {
    if proj.len() != a.cols() {
        return Err(shape_err!("{} projections for {} items", proj.len(), a.cols()));
    }
    let mut x = DenseMatrix::zeros(a.rows(), a.cols());
    for u in 0..a.rows() {
        let row = a.row(u);
        let out = x.row_mut(u);
        for j in 0..row.len() {
            if row[j] != 0 {
                out[j] = 1.0 + scale * proj[j];
            }
        }
    }
    Ok(x)
}

/// Per-item instrument data: projector and pooled instrument, or nothing
/// for items without interacting users.
struct Instruments {
    projectors: Vec<Option<DenseMatrix>>,
    pools: Vec<Vec<f64>>,
    n_cols: Vec<usize>,
}

fn build_instruments(exposure: &BinaryMatrix, user_emb: &DenseMatrix, n_max: usize, seed: u64) -> Result<Instruments> {
    let (n_users, n_items) = (exposure.rows(), exposure.cols());
    let d_q = user_emb.cols();
    let mut by_item: Vec<Vec<usize>> = vec![Vec::new(); n_items];
    for u in 0..n_users {
        for (j, &a) in exposure.row(u).iter().enumerate() {
            if a != 0 {
                by_item[j].push(u);
            }
        }
    }
    let base = Rng::new(seed).substream(TAG_SUBSAMPLE);
    let mut inst = Instruments { projectors: Vec::new(), pools: Vec::new(), n_cols: Vec::new() };
    for (j, users) in by_item.iter().enumerate() {
        match build_iv_matrix(users, user_emb, n_max, &mut base.substream(j as u64)) {
            Some(z) => {
                inst.pools.push(z.transpose().column_means());
                inst.n_cols.push(z.cols());
                inst.projectors.push(Some(projector(&z)?));
            }
            None => {
                inst.pools.push(vec![0.0; d_q]);
                inst.n_cols.push(0);
                inst.projectors.push(None);
            }
        }
    }
    Ok(inst)
}

/// Everything the downstream stages and reports need from the IV stage.
#[derive(Debug, Clone)]
pub struct IvOutcome {
    pub x_re: DenseMatrix,
    pub items: Vec<Option<Reconstructed>>,
    /// Per-item scalar adjustment `proj(T_re)`.
    pub proj: Vec<f64>,
    pub report: IvReport,
    pub nets: IvNetworks,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IvReport {
    pub mode: TreatmentMode,
    pub n_items_decomposed: usize,
    pub n_items_excluded: usize,
    pub mean_instrument_columns: f64,
    pub mean_fitted_norm: f64,
    pub mean_residual_norm: f64,
    pub alpha1_mean: f64,
    pub alpha2_mean: f64,
    pub alpha1_std: f64,
    pub alpha2_std: f64,
    pub proj_max_abs: f64,
    pub final_train_loss: f64,
    pub residual_norms: Vec<f64>,
}

/// Forward state for all items in one batch.
struct ItemForward {
    fitted: Vec<Vec<f64>>,
    residual: Vec<Vec<f64>>,
    a1: Vec<f64>,
    a2: Vec<f64>,
    re: DenseMatrix,
}

/// Phase-1 model: `score(u, j) = p_u . T_re_j + h . T_re_j + b_u + b_j + b`.
struct Phase1<'a> {
    nets: IvNetworks,
    user: Vec<f64>,
    head: Vec<f64>,
    user_bias: Vec<f64>,
    item_bias: Vec<f64>,
    global_bias: Vec<f64>,
    g_user: Vec<f64>,
    g_head: Vec<f64>,
    g_user_bias: Vec<f64>,
    g_item_bias: Vec<f64>,
    g_global_bias: Vec<f64>,
    treatments: &'a DenseMatrix,
    inst: &'a Instruments,
    mode: TreatmentMode,
    d_q: usize,
}

impl Phase1<'_> {
    fn forward_items(&mut self, cache: bool) -> Result<ItemForward> {
        let n = self.treatments.rows();
        let d = self.d_q;
        let t0 = if cache { self.nets.mlp0.forward_batch(self.treatments)? } else { self.nets.mlp0.predict_batch(self.treatments)? };
        let mut fitted = Vec::with_capacity(n);
        let mut residual = Vec::with_capacity(n);
        let mut alpha_in = DenseMatrix::zeros(n, 2 * d);
        for j in 0..n {
            let t = t0.row(j);
            let f = match &self.inst.projectors[j] {
                Some(p) => p.matvec(t)?,
                None => vec![0.0; d],
            };
            residual.push(t.iter().zip(&f).map(|(a, b)| a - b).collect::<Vec<f64>>());
            fitted.push(f);
            let row = alpha_in.row_mut(j);
            row[..d].copy_from_slice(t);
            row[d..].copy_from_slice(&self.inst.pools[j]);
        }
        let (a1, a2): (Vec<f64>, Vec<f64>) = match self.mode {
            TreatmentMode::Combined => {
                let o1 = if cache { self.nets.mlp1.forward_batch(&alpha_in)? } else { self.nets.mlp1.predict_batch(&alpha_in)? };
                let o2 = if cache { self.nets.mlp2.forward_batch(&alpha_in)? } else { self.nets.mlp2.predict_batch(&alpha_in)? };
                (o1.into_vec(), o2.into_vec())
            }
            TreatmentMode::Raw => (vec![1.0; n], vec![1.0; n]),
            TreatmentMode::FittedOnly => (vec![1.0; n], vec![0.0; n]),
            TreatmentMode::ResidualOnly => (vec![0.0; n], vec![1.0; n]),
        };
        let mut re = DenseMatrix::zeros(n, d);
        for j in 0..n {
            if self.inst.projectors[j].is_none() {
                continue;
            }
            let out = re.row_mut(j);
            if self.mode == TreatmentMode::Raw {
                out.copy_from_slice(t0.row(j));
            } else {
                for k in 0..d {
                    out[k] = a1[j] * fitted[j][k] + a2[j] * residual[j][k];
                }
            }
        }
        Ok(ItemForward { fitted, residual, a1, a2, re })
    }

    /// Accumulate gradients of the mean BCE over `batch`; returns the sum
    /// of losses.
    fn step(&mut self, batch: &[(usize, usize, f64)]) -> Result<f64> {
        let d = self.d_q;
        let n_items = self.treatments.rows();
        let fw = self.forward_items(true)?;
        let scale = 1.0 / batch.len() as f64;
        let mut g_re = DenseMatrix::zeros(n_items, d);
        let mut total = 0.0;
        for &(u, j, y) in batch {
            let re = fw.re.row(j);
            let pu = &self.user[u * d..(u + 1) * d];
            let s = dot(pu, re) + dot(&self.head, re) + self.user_bias[u] + self.item_bias[j] + self.global_bias[0];
            total -= y * log_sigmoid(s) + (1.0 - y) * log_sigmoid(-s);
            let ds = (sigmoid(s) - y) * scale;
            let gr = g_re.row_mut(j);
            for k in 0..d {
                gr[k] += ds * (pu[k] + self.head[k]);
                self.g_user[u * d + k] += ds * re[k];
                self.g_head[k] += ds * re[k];
            }
            self.g_user_bias[u] += ds;
            self.g_item_bias[j] += ds;
            self.g_global_bias[0] += ds;
        }
        // Back through the recombination into t0 and the alpha networks.
        let mut g_t0 = DenseMatrix::zeros(n_items, d);
        let mut g_a1 = DenseMatrix::zeros(n_items, 1);
        let mut g_a2 = DenseMatrix::zeros(n_items, 1);
        for j in 0..n_items {
            let Some(p) = &self.inst.projectors[j] else { continue };
            let gr = g_re.row(j);
            if self.mode == TreatmentMode::Raw {
                g_t0.row_mut(j).copy_from_slice(gr);
                continue;
            }
            g_a1.set(j, 0, dot(gr, &fw.fitted[j]));
            g_a2.set(j, 0, dot(gr, &fw.residual[j]));
            // d/dt0 of a1 P t0 + a2 (I - P) t0 with P symmetric.
            let diff: Vec<f64> = gr.iter().map(|g| (fw.a1[j] - fw.a2[j]) * g).collect();
            let pd = p.matvec(&diff)?;
            let out = g_t0.row_mut(j);
            for k in 0..d {
                out[k] = pd[k] + fw.a2[j] * gr[k];
            }
        }
        if self.mode == TreatmentMode::Combined {
            let gx1 = self.nets.mlp1.backward_batch(&g_a1)?;
            let gx2 = self.nets.mlp2.backward_batch(&g_a2)?;
            for j in 0..n_items {
                let out = g_t0.row_mut(j);
                for k in 0..d {
                    out[k] += gx1.get(j, k) + gx2.get(j, k);
                }
            }
        }
        self.nets.mlp0.backward_batch(&g_t0)?;
        Ok(total)
    }
}

impl Trainable for Phase1<'_> {
    fn param_groups(&mut self) -> Vec<ParamGroup<'_>> {
        let mut g = vec![
            ParamGroup { params: &mut self.user, grads: &mut self.g_user },
            ParamGroup { params: &mut self.head, grads: &mut self.g_head },
            ParamGroup { params: &mut self.user_bias, grads: &mut self.g_user_bias },
            ParamGroup { params: &mut self.item_bias, grads: &mut self.g_item_bias },
            ParamGroup { params: &mut self.global_bias, grads: &mut self.g_global_bias },
        ];
        g.extend(self.nets.mlp0.param_groups());
        g.extend(self.nets.mlp1.param_groups());
        g.extend(self.nets.mlp2.param_groups());
        g
    }
}

/// Train the reconstruction networks on the training feedback, then emit
/// the reconstructed treatments and `X_re`.
///
/// `treatments` holds one warm-started embedding per item; `user_emb` the
/// user-feature instruments; `exposure` the training exposure matrix.
pub fn fit_iv_stage(
    train: &[Triple],
    exposure: &BinaryMatrix,
    treatments: &DenseMatrix,
    user_emb: &DenseMatrix,
    mode: TreatmentMode,
    cfg: &IvConfig,
    seed: u64,
) -> Result<IvOutcome> {
    let (n_users, n_items) = (exposure.rows(), exposure.cols());
    if treatments.rows() != n_items || user_emb.rows() != n_users {
        return Err(shape_err!(
            "treatments {:?} / instruments {:?} vs exposure {}x{}",
            treatments.shape(),
            user_emb.shape(),
            n_users,
            n_items
        ));
    }
    let d_q = user_emb.cols();
    let inst = build_instruments(exposure, user_emb, cfg.n_max, seed)?;
    let base = Rng::new(seed);
    let mut init = base.substream(TAG_NETS);
    let nets = IvNetworks::new(treatments.cols(), d_q, cfg, &mut init)?;
    let user = (0..n_users * d_q).map(|_| 0.1 * init.normal()).collect();
    let mut model = Phase1 {
        nets,
        user,
        head: vec![0.0; d_q],
        user_bias: vec![0.0; n_users],
        item_bias: vec![0.0; n_items],
        global_bias: vec![0.0],
        g_user: vec![0.0; n_users * d_q],
        g_head: vec![0.0; d_q],
        g_user_bias: vec![0.0; n_users],
        g_item_bias: vec![0.0; n_items],
        g_global_bias: vec![0.0],
        treatments,
        inst: &inst,
        mode,
        d_q,
    };
    let observed = observed_sets(train, n_users);
    let mut rng = base.substream(TAG_TRAIN);
    let mut opt = Adam::new(AdamConfig::with_lr(cfg.lr));
    let mut final_loss = f64::NAN;
    for epoch in 0..cfg.epochs {
        let examples = epoch_examples(train, &observed, n_items, cfg.negatives, &mut rng);
        let mut total = 0.0;
        for chunk in examples.chunks(cfg.batch_size.max(1)) {
            total += model.step(chunk)?;
            opt.step(model.param_groups())?;
        }
        final_loss = total / examples.len().max(1) as f64;
        if !final_loss.is_finite() {
            return Err(Error::Numeric(format!("IV stage loss non-finite at epoch {epoch}")));
        }
    }

    let fw = model.forward_items(false)?;
    let mut items = Vec::with_capacity(n_items);
    let mut proj = vec![0.0; n_items];
    for j in 0..n_items {
        if inst.projectors[j].is_none() {
            items.push(None);
            continue;
        }
        proj[j] = dot(&model.head, fw.re.row(j));
        items.push(Some(Reconstructed {
            fitted: fw.fitted[j].clone(),
            residual: fw.residual[j].clone(),
            combined: fw.re.row(j).to_vec(),
            alpha1: fw.a1[j],
            alpha2: fw.a2[j],
        }));
    }
    let x_re = debias_interactions(exposure, &proj, cfg.scale)?;
    let report = summarize(mode, &items, &inst, &proj, final_loss);
    Ok(IvOutcome { x_re, items, proj, report, nets: model.nets })
}

fn summarize(mode: TreatmentMode, items: &[Option<Reconstructed>], inst: &Instruments, proj: &[f64], loss: f64) -> IvReport {
    let present: Vec<&Reconstructed> = items.iter().flatten().collect();
    let n = present.len().max(1) as f64;
    let norm = |v: &[f64]| dot(v, v).sqrt();
    let stats = |f: &dyn Fn(&Reconstructed) -> f64| {
        let vals: Vec<f64> = present.iter().map(|r| f(r)).collect();
        crate::eval::mean_std(&vals)
    };
    let (a1m, a1s) = stats(&|r| r.alpha1);
    let (a2m, a2s) = stats(&|r| r.alpha2);
    let cols: Vec<usize> = inst.n_cols.iter().copied().filter(|&c| c > 0).collect();
    IvReport {
        mode,
        n_items_decomposed: present.len(),
        n_items_excluded: items.len() - present.len(),
        mean_instrument_columns: cols.iter().sum::<usize>() as f64 / cols.len().max(1) as f64,
        mean_fitted_norm: present.iter().map(|r| norm(&r.fitted)).sum::<f64>() / n,
        mean_residual_norm: present.iter().map(|r| norm(&r.residual)).sum::<f64>() / n,
        alpha1_mean: a1m,
        alpha2_mean: a2m,
        alpha1_std: a1s,
        alpha2_std: a2s,
        proj_max_abs: proj.iter().fold(0.0, |m, v| m.max(v.abs())),
        final_train_loss: loss,
        residual_norms: items.iter().map(|r| r.as_ref().map_or(0.0, |r| norm(&r.residual))).collect(),
    }
}

/// Largest relative error between the hand-written first-stage gradients
/// and central differences, on a fixed 12 x 6 toy problem.
pub fn first_stage_gradient_error(mode: TreatmentMode) -> Result<f64> {
    let (n, m, d) = (12, 6, 3);
    let mut rng = Rng::new(7);
    let mut train = Vec::new();
    let mut a = BinaryMatrix::zeros(n, m);
    for u in 0..n {
        for i in 0..m {
            if rng.bernoulli(0.4) {
                a.set(u, i, true);
                train.push((u, i, rng.bernoulli(0.5) as u8 as f64));
            }
        }
    }
    let mut r8 = Rng::new(8);
    let t = DenseMatrix::from_fn(m, d, |_, _| r8.normal());
    let mut r9 = Rng::new(9);
    let ue = DenseMatrix::from_fn(n, d, |_, _| r9.normal());
    let cfg = IvConfig { mlp0_hidden: vec![4], alpha_hidden: 3, n_max: 2, ..IvConfig::default() };
    let inst = build_instruments(&a, &ue, cfg.n_max, 0)?;
    let nets = IvNetworks::new(d, d, &cfg, &mut Rng::new(1))?;
    let mk = |nets: IvNetworks| Phase1 {
        nets,
        user: (0..n * d).map(|k| ((k * 7 % 11) as f64 - 5.0) * 0.1).collect(),
        head: vec![0.3, -0.2, 0.5],
        user_bias: vec![0.0; n],
        item_bias: vec![0.1; m],
        global_bias: vec![0.0],
        g_user: vec![0.0; n * d],
        g_head: vec![0.0; d],
        g_user_bias: vec![0.0; n],
        g_item_bias: vec![0.0; m],
        g_global_bias: vec![0.0],
        treatments: &t,
        inst: &inst,
        mode,
        d_q: d,
    };
    let batch: Vec<(usize, usize, f64)> = train.into_iter().take(15).collect();
    let mut p = mk(nets.clone());
    let scale = batch.len() as f64;
    p.step(&batch)?;
    let mut analytic = Vec::new();
    let mut params = Vec::new();
    for g in p.param_groups() {
        analytic.extend(g.grads.iter().map(|v| v * scale));
        params.extend_from_slice(g.params);
    }
    let mut failure = None;
    let err = finite_diff_check(
        |flat| {
            let mut q = mk(nets.clone());
            let mut off = 0;
            for g in q.param_groups() {
                let len = g.params.len();
                g.params.copy_from_slice(&flat[off..off + len]);
                off += len;
            }
            let fw = match q.forward_items(false) {
                Ok(fw) => fw,
                Err(e) => {
                    failure = Some(e);
                    return f64::NAN;
                }
            };
            batch
                .iter()
                .map(|&(u, j, y)| {
                    let re = fw.re.row(j);
                    let s = dot(&q.user[u * d..(u + 1) * d], re) + dot(&q.head, re) + q.user_bias[u] + q.item_bias[j] + q.global_bias[0];
                    -(y * log_sigmoid(s) + (1.0 - y) * log_sigmoid(-s))
                })
                .sum()
        },
        &params,
        &analytic,
    );
    match failure {
        Some(e) => Err(e),
        None => Ok(err),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::Split;

    fn randm(r: usize, c: usize, seed: u64) -> DenseMatrix {
        let mut rng = Rng::new(seed);
        DenseMatrix::from_fn(r, c, |_, _| rng.normal())
    }

    #[test]
    fn treatment_keys() {
        let emb = randm(10, 3, 0);
        assert_eq!(build_treatment(&[3, 7], 9, &emb).unwrap().items, vec![3, 7, 9]);
        assert_eq!(build_treatment(&[3, 7], 7, &emb).unwrap().items, vec![3, 7]);
        let cold = build_treatment(&[], 4, &emb).unwrap();
        assert_eq!(cold.items, vec![4]);
        assert_eq!(cold.embeddings.row(0), emb.row(4));
    }

    #[test]
    fn iv_matrix_shapes() {
        let emb = randm(100, 4, 1);
        let z = build_iv_matrix(&[5], &emb, 64, &mut Rng::new(0)).unwrap();
        assert_eq!(z.shape(), (4, 1));
        let users: Vec<usize> = (0..100).collect();
        let a = build_iv_matrix(&users, &emb, 64, &mut Rng::new(3)).unwrap();
        let b = build_iv_matrix(&users, &emb, 64, &mut Rng::new(3)).unwrap();
        assert_eq!(a.cols(), 64);
        assert_eq!(a, b);
        assert!(build_iv_matrix(&[], &emb, 64, &mut Rng::new(0)).is_none());
    }

    #[test]
    fn decompose_square_invertible_is_exact_fit() {
        let z = randm(3, 3, 2);
        let t = vec![0.4, -1.0, 2.0];
        let (f, r) = decompose(&t, &z).unwrap();
        for k in 0..3 {
            assert!((f[k] - t[k]).abs() < 1e-10 && r[k].abs() < 1e-10);
        }
    }

    #[test]
    fn decompose_orthogonal_instrument() {
        // Columns span the complement of t.
        let t = vec![1.0, 1.0, 0.0];
        let z = DenseMatrix::from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.0], vec![0.0, 2.0]]).unwrap();
        let (f, r) = decompose(&t, &z).unwrap();
        for k in 0..3 {
            assert!(f[k].abs() < 1e-12 && (r[k] - t[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn residual_orthogonal_to_instruments() {
        for seed in 0..20 {
            let z = randm(6, 3, seed);
            let t: Vec<f64> = randm(6, 1, 100 + seed).into_vec();
            let (f, r) = decompose(&t, &z).unwrap();
            let zr = z.transpose().matvec(&r).unwrap();
            assert!(zr.iter().all(|v| v.abs() < 1e-8));
            for k in 0..6 {
                assert!((f[k] + r[k] - t[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn combine_forced_weights() {
        let nets = IvNetworks::new(3, 3, &IvConfig::default(), &mut Rng::new(4)).unwrap();
        let z = randm(3, 2, 5);
        let t = vec![0.1, 0.2, 0.3];
        let t0 = nets.mlp0.predict(&t).unwrap();
        let (f, r) = decompose(&t0, &z).unwrap();
        let rec = combine(&t, &z, &f, &r, &nets).unwrap();
        let manual: Vec<f64> = f.iter().zip(&r).map(|(a, b)| rec.alpha1 * a + rec.alpha2 * b).collect();
        assert_eq!(rec.combined, manual);
        // Identity recombination returns MLP0(T).
        let sum: Vec<f64> = f.iter().zip(&r).map(|(a, b)| a + b).collect();
        for k in 0..3 {
            assert!((sum[k] - t0[k]).abs() < 1e-12);
        }
        assert!(rec.alpha1 > 0.0 && rec.alpha2 > 0.0);
    }

    #[test]
    fn debias_examples() {
        let mut a = BinaryMatrix::zeros(2, 3);
        a.set(0, 1, true);
        a.set(1, 2, true);
        assert_eq!(debias_interactions(&a, &[0.0; 3], 1.0).unwrap(), a.to_dense());
        assert_eq!(debias_interactions(&a, &[5.0, -2.0, 3.0], 0.0).unwrap(), a.to_dense());
        let proj = [0.5, -2.0, 3.0];
        let x = debias_interactions(&a, &proj, 0.7).unwrap();
        let bound = 0.7 * 3.0;
        assert!(x.sub(&a.to_dense()).unwrap().max_abs() <= bound + 1e-15);
        assert!(debias_interactions(&a, &[0.0; 2], 1.0).is_err());
    }

    fn toy_stage(_mode: TreatmentMode) -> (Vec<Triple>, BinaryMatrix, DenseMatrix, DenseMatrix) {
        let mut rng = Rng::new(7);
        let (n, m) = (12, 6);
        let mut train = Vec::new();
        let mut a = BinaryMatrix::zeros(n, m);
        for u in 0..n {
            for i in 0..m {
                if rng.bernoulli(0.4) {
                    a.set(u, i, true);
                    train.push(Triple { user: u, item: i, rating: rng.bernoulli(0.5) as u8, split: Split::Biased });
                }
            }
        }
        (train, a, randm(m, 3, 8), randm(n, 3, 9))
    }

    #[test]
    fn phase1_gradients_match_finite_differences() {
        for mode in [TreatmentMode::Combined, TreatmentMode::Raw, TreatmentMode::FittedOnly, TreatmentMode::ResidualOnly] {
            let err = first_stage_gradient_error(mode).unwrap();
            assert!(err < 1e-4, "{mode:?}: {err}");
        }
    }

    #[test]
    fn stage_outputs_respect_decomposition() {
        let (train, a, t, ue) = toy_stage(TreatmentMode::Combined);
        let cfg = IvConfig { n_max: 2, epochs: 3, ..IvConfig::default() };
        let out = fit_iv_stage(&train, &a, &t, &ue, TreatmentMode::Combined, &cfg, 3).unwrap();
        for (j, rec) in out.items.iter().enumerate() {
            let Some(rec) = rec else { continue };
            let t0 = out.nets.mlp0.predict(t.row(j)).unwrap();
            for k in 0..3 {
                assert!((rec.fitted[k] + rec.residual[k] - t0[k]).abs() < 1e-12);
            }
        }
        let forced = fit_iv_stage(&train, &a, &t, &ue, TreatmentMode::FittedOnly, &cfg, 3).unwrap();
        for rec in forced.items.iter().flatten() {
            assert_eq!((rec.alpha1, rec.alpha2), (1.0, 0.0));
            assert_eq!(rec.combined, rec.fitted);
        }
        let again = fit_iv_stage(&train, &a, &t, &ue, TreatmentMode::Combined, &cfg, 3).unwrap();
        assert_eq!(again.x_re, out.x_re);
    }
}
