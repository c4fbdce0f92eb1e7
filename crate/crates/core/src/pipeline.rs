//! End-to-end run for one seed: split, warm start, treatment
//! reconstruction, the two iVAEs, fusion and the final predictor.
//!
//! Intermediate artifacts are memoized per seed so that variants and
//! sweeps sharing a stage do not retrain it.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::datasets::{self, BinaryMatrix, InteractionDataset, ProxyRule, SplitPolicy, Triple};
use crate::error::{Error, Result};
use crate::eval::{mcc, RankingMetrics};
use crate::iv::{self, IvConfig, IvOutcome, IvReport, TreatmentMode};
use crate::ivae::{fine_tune_ivae, fuse_confounders, train_ivae, FusedConfounder, IvaeConfig, IvaeModel, PosteriorSet, TrainLog};
use crate::numerics::{DenseMatrix, Rng};
use crate::recmodel::{self, FitSummary, IviDrModel, RecConfig, Variant};

const TAG_SPLIT: u64 = 41;
const TAG_WARM: u64 = 42;
const TAG_IV: u64 = 43;
const TAG_IVAE: u64 = 44;
const TAG_REC: u64 = 45;
const TAG_FEATURES: u64 = 46;

/// iVAE training stream for the debiased input.
const STREAM_DEBIASED: u64 = 1;
/// iVAE training stream for the raw exposure input.
const STREAM_RAW: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProxyChoice {
    Given,
    FeatureColumn { column: usize },
    MeanRatingQuartile,
}

impl From<ProxyChoice> for ProxyRule {
    fn from(p: ProxyChoice) -> Self {
        match p {
            ProxyChoice::Given => ProxyRule::Given,
            ProxyChoice::FeatureColumn { column } => ProxyRule::FeatureColumn(column),
            ProxyChoice::MeanRatingQuartile => ProxyRule::MeanRatingQuartile,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub ivae: IvaeConfig,
    pub iv: IvConfig,
    pub rec: RecConfig,
    pub rho: f64,
    pub tau: f64,
    /// Dimension of the warm-started item treatments (and instruments).
    pub treatment_dim: usize,
    pub warm_start_epochs: usize,
    pub warm_start_lr: f64,
    pub binarize_threshold: u8,
    pub validation_fraction: f64,
    pub proxy: ProxyChoice,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            ivae: IvaeConfig::default(),
            iv: IvConfig { n_max: 8, ..IvConfig::default() },
            rec: RecConfig::default(),
            rho: 0.9,
            tau: 0.9,
            treatment_dim: 16,
            warm_start_epochs: 5,
            warm_start_lr: 1e-2,
            binarize_threshold: 4,
            validation_fraction: 0.1,
            proxy: ProxyChoice::Given,
        }
    }
}

impl PipelineConfig {
    /// Settings for Coat-shaped data: 32-d embeddings, 4-d latents,
    /// mean-rating quartile proxy.
    pub fn coat() -> Self {
        let mut c = Self::default();
        c.treatment_dim = 32;
        c.rec.dim = 32;
        c.ivae.latent_dim = 4;
        c.iv.n_max = 16;
        c.iv.mlp0_hidden = vec![32];
        c.proxy = ProxyChoice::MeanRatingQuartile;
        c
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rho) || !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::Config(format!("rho and tau must lie in [0, 1], got {} and {}", self.rho, self.tau)));
        }
        if self.treatment_dim == 0 || self.rec.dim == 0 {
            return Err(Error::Config("embedding dims must be positive".into()));
        }
        Ok(())
    }
}

/// Dataset split and derived inputs for one seed.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub n_users: usize,
    pub n_items: usize,
    /// Binary labels from here on.
    pub train: Vec<Triple>,
    pub validation: Vec<Triple>,
    pub test: Vec<Triple>,
    /// Exposure built from the training split only.
    pub exposure: BinaryMatrix,
    pub proxies: Vec<usize>,
    pub features: DenseMatrix,
}

pub fn prepare(ds: &InteractionDataset, cfg: &PipelineConfig, seed: u64) -> Result<Prepared> {
    let policy = SplitPolicy::BiasedUnbiased {
        validation_fraction: cfg.validation_fraction,
        seed: Rng::new(seed).substream(TAG_SPLIT).seed(),
    };
    let splits = datasets::split(ds, policy)?;
    let proxies = datasets::build_proxy(ds, cfg.proxy.into(), &splits.train)?;
    let mut train_users: Vec<usize> = splits.train.iter().map(|t| t.user).collect();
    train_users.dedup();
    let features = ds.standardized_features(&train_users);
    let bin = |ts: &[Triple]| -> Vec<Triple> {
        ts.iter()
            .map(|t| Triple { rating: (t.rating >= cfg.binarize_threshold) as u8, ..*t })
            .collect()
    };
    let (train, validation, test) = match ds.feedback {
        datasets::Feedback::Explicit => (bin(&splits.train), bin(&splits.validation), bin(&splits.test)),
        datasets::Feedback::Binary => (splits.train, splits.validation, splits.test),
    };
    let exposure = datasets::exposure_from(ds.n_users, ds.n_items, &train);
    Ok(Prepared { n_users: ds.n_users, n_items: ds.n_items, train, validation, test, exposure, proxies, features })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VariantResult {
    pub variant: Variant,
    pub seed: u64,
    pub rho: f64,
    pub tau: f64,
    pub test: RankingMetrics,
    pub fit: FitSummary,
    /// Against ground truth when it was supplied.
    pub mcc: Option<f64>,
    pub iv_report: Option<IvReport>,
}

/// Memoized per-seed state.
pub struct SeedRun<'a> {
    pub seed: u64,
    pub cfg: &'a PipelineConfig,
    pub prepared: Prepared,
    ground_truth: Option<&'a DenseMatrix>,
    treatments: Option<DenseMatrix>,
    iv: HashMap<TreatmentMode, IvOutcome>,
    raw_model: Option<IvaeModel>,
    raw_posterior: Option<(PosteriorSet, TrainLog)>,
    debiased_posterior: HashMap<TreatmentMode, (PosteriorSet, TrainLog)>,
    models: HashMap<String, IviDrModel>,
}

impl std::hash::Hash for TreatmentMode {
    fn hash<H: std::hash::Hasher>(&self, state: &mut H) {
        (*self as u8).hash(state)
    }
}

pub fn treatment_mode(v: Variant) -> Option<TreatmentMode> {
    match v {
        Variant::IviDr => Some(TreatmentMode::Combined),
        Variant::IviDrT => Some(TreatmentMode::Raw),
        Variant::IviDrF => Some(TreatmentMode::FittedOnly),
        Variant::IviDrR => Some(TreatmentMode::ResidualOnly),
        Variant::Mf | Variant::Idcf => None,
    }
}

fn derived(seed: u64, tag: u64) -> u64 {
    Rng::new(seed).substream(tag).seed()
}

impl<'a> SeedRun<'a> {
    /// `ground_truth` is only read when reporting MCC.
    pub fn new(ds: &InteractionDataset, cfg: &'a PipelineConfig, seed: u64, ground_truth: Option<&'a DenseMatrix>) -> Result<Self> {
        cfg.validate()?;
        let prepared = prepare(ds, cfg, seed)?;
        Ok(Self {
            seed,
            cfg,
            prepared,
            ground_truth,
            treatments: None,
            iv: HashMap::new(),
            raw_model: None,
            raw_posterior: None,
            debiased_posterior: HashMap::new(),
            models: HashMap::new(),
        })
    }

    /// Item embeddings from a short MF warm start.
    pub fn treatments(&mut self) -> Result<&DenseMatrix> {
        if self.treatments.is_none() {
            let p = &self.prepared;
            let rc = RecConfig {
                dim: self.cfg.treatment_dim,
                epochs: self.cfg.warm_start_epochs,
                patience: usize::MAX,
                grid: vec![(self.cfg.warm_start_lr, 0.0)],
                ..self.cfg.rec.clone()
            };
            let (m, _) = recmodel::train_cell(
                p.n_users,
                p.n_items,
                Variant::Mf,
                &p.train,
                &[],
                None,
                &rc,
                self.cfg.warm_start_lr,
                0.0,
                derived(self.seed, TAG_WARM),
            )?;
            self.treatments = Some(m.mf.item_matrix());
        }
        Ok(self.treatments.as_ref().expect("set above"))
    }

    pub fn iv_outcome(&mut self, mode: TreatmentMode) -> Result<&IvOutcome> {
        if !self.iv.contains_key(&mode) {
            let t = self.treatments()?.clone();
            let p = &self.prepared;
            let ue = iv::user_feature_embeddings(&p.features, self.cfg.treatment_dim, derived(self.seed, TAG_FEATURES));
            let out = iv::fit_iv_stage(&p.train, &p.exposure, &t, &ue, mode, &self.cfg.iv, derived(self.seed, TAG_IV))?;
            self.iv.insert(mode, out);
        }
        Ok(&self.iv[&mode])
    }

    /// iVAE on the raw exposure rows.
    pub fn raw_posterior(&mut self) -> Result<&(PosteriorSet, TrainLog)> {
        if self.raw_posterior.is_none() {
            let p = &self.prepared;
            let x = p.exposure.to_dense();
            let (model, log) = train_ivae(&x, &p.exposure, &p.proxies, &self.cfg.ivae, derived(self.seed, TAG_IVAE), STREAM_RAW)?;
            self.raw_posterior = Some((model.encode_all(&x, &p.proxies)?, log));
            self.raw_model = Some(model);
        }
        Ok(self.raw_posterior.as_ref().expect("set above"))
    }

    /// iVAE on the debiased rows produced by `mode`, fine-tuned from the
    /// raw-input model so both posteriors share latent axes.
    pub fn debiased_posterior(&mut self, mode: TreatmentMode) -> Result<&(PosteriorSet, TrainLog)> {
        if !self.debiased_posterior.contains_key(&mode) {
            let x = self.iv_outcome(mode)?.x_re.clone();
            self.raw_posterior()?;
            let start = self.raw_model.as_ref().expect("trained with the raw posterior");
            let p = &self.prepared;
            let (model, log) = fine_tune_ivae(start, &x, &p.exposure, &p.proxies, &self.cfg.ivae, derived(self.seed, TAG_IVAE), STREAM_DEBIASED)?;
            self.debiased_posterior.insert(mode, (model.encode_all(&x, &p.proxies)?, log));
        }
        Ok(&self.debiased_posterior[&mode])
    }

    /// Fused confounders for `variant`; `None` for MF.
    pub fn fused(&mut self, variant: Variant, rho: f64, tau: f64) -> Result<Option<FusedConfounder>> {
        match variant {
            Variant::Mf => Ok(None),
            Variant::Idcf => Ok(Some(fuse_confounders(self.raw_posterior()?.0.clone(), None, 1.0, 0.0)?)),
            v => {
                let mode = treatment_mode(v).expect("IV variant");
                let first = self.debiased_posterior(mode)?.0.clone();
                let second = self.raw_posterior()?.0.clone();
                Ok(Some(fuse_confounders(first, Some(second), rho, tau)?))
            }
        }
    }

    /// MCC of the variant's fused posterior means against ground truth.
    pub fn confounder_mcc(&mut self, variant: Variant, rho: f64, tau: f64) -> Result<Option<f64>> {
        let Some(truth) = self.ground_truth else { return Ok(None) };
        let Some(f) = self.fused(variant, rho, tau)? else { return Ok(None) };
        let est = f.mean_matrix();
        if est.cols() != truth.cols() {
            return Ok(None);
        }
        Ok(Some(mcc(&est, truth)?))
    }

    pub fn run_variant(&mut self, variant: Variant) -> Result<VariantResult> {
        self.run_variant_with(variant, self.cfg.rho, self.cfg.tau)
    }

    /// Train and test the final predictor with explicit fusion weights.
    pub fn run_variant_with(&mut self, variant: Variant, rho: f64, tau: f64) -> Result<VariantResult> {
        let fused = self.fused(variant, rho, tau)?;
        let mcc = self.confounder_mcc(variant, rho, tau)?;
        let p = &self.prepared;
        let (model, fit) = recmodel::train(
            p.n_users,
            p.n_items,
            variant,
            &p.train,
            &p.validation,
            fused.as_ref(),
            &self.cfg.rec,
            derived(self.seed, TAG_REC),
        )?;
        let test = model.evaluate(&p.test, fused.as_ref(), self.cfg.rec.k)?;
        let iv_report = treatment_mode(variant).and_then(|m| self.iv.get(&m)).map(|o| o.report.clone());
        self.models.insert(format!("{}_rho{rho}_tau{tau}", variant.name()), model);
        Ok(VariantResult { variant, seed: self.seed, rho, tau, test, fit, mcc, iv_report })
    }

    /// Trained predictor for `(variant, rho, tau)`, if it has been run.
    pub fn model(&self, variant: Variant, rho: f64, tau: f64) -> Option<&IviDrModel> {
        self.models.get(&format!("{}_rho{rho}_tau{tau}", variant.name()))
    }

    pub fn cached_iv(&self, mode: TreatmentMode) -> Option<&IvOutcome> {
        self.iv.get(&mode)
    }
}
