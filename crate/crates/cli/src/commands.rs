use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use ividr_core::checkpoint::{self, Manifest};
use ividr_core::datagen::{self, generate};
use ividr_core::datasets::{self, InteractionDataset};
use ividr_core::eval::{chain_holds, interior_peak, mean_std, strictly_decreasing, MetricRow, MetricsReport};
use ividr_core::numerics::DenseMatrix;
use ividr_core::pipeline::{SeedRun, VariantResult};
use ividr_core::recmodel::Variant;
use rayon::prelude::*;
use serde_json::{json, Value};

use crate::config::{DataSource, ExperimentConfig};
use crate::rundir::{CellRecord, RunDir};

/// Tolerance for adjacent ties in the ablation ordering.
const ABLATION_TIE: f64 = 0.003;

pub struct Loaded {
    pub dataset: InteractionDataset,
    pub truth: Option<DenseMatrix>,
}

pub fn load_data(cfg: &ExperimentConfig, seed: u64, gamma: Option<f64>) -> Result<Loaded> {
    match &cfg.data {
        DataSource::Synthetic { per_seed } => {
            let mut g = cfg.generator.clone();
            if *per_seed {
                g.seed = seed;
            }
            if let Some(gamma) = gamma {
                g.gamma = gamma;
            }
            let d = generate(&g)?;
            Ok(Loaded { dataset: d.dataset, truth: Some(d.c) })
        }
        DataSource::Bundle { path } => {
            if gamma.is_some() {
                bail!("noise levels need a synthetic data source");
            }
            let b = datagen::read_bundle(path)?;
            Ok(Loaded { dataset: b.dataset, truth: b.ground_truth_c })
        }
        DataSource::CoatDir { path } => {
            if gamma.is_some() {
                bail!("noise levels need a synthetic data source");
            }
            Ok(Loaded { dataset: datasets::load_coat_dir(path)?, truth: None })
        }
    }
}

pub fn cmd_generate(dir: &RunDir, seed: Option<u64>) -> Result<()> {
    let mut g = dir.config().generator.clone();
    if let Some(s) = seed {
        g.seed = s;
    }
    let d = generate(&g)?;
    let out = dir.root.join("bundle");
    datagen::write_bundle(&d, &out)?;
    stamp_bundle(dir, &out)?;
    log::info!(
        "wrote {} users x {} items ({} biased, {} unbiased) to {}",
        d.dataset.n_users,
        d.dataset.n_items,
        d.dataset.count(datasets::Split::Biased),
        d.dataset.count(datasets::Split::Unbiased),
        out.display()
    );
    Ok(())
}

/// Provenance header on text tables, `provenance` key on JSON files.
fn stamp_bundle(dir: &RunDir, bundle: &Path) -> Result<()> {
    let header = dir.provenance.comment_line()?;
    for entry in fs::read_dir(bundle)? {
        let path = entry?.path();
        match path.extension().and_then(|e| e.to_str()) {
            Some("tsv") => {
                let body = fs::read_to_string(&path)?;
                fs::write(&path, header.clone() + &body)?;
            }
            Some("json") => {
                let mut v: Value = serde_json::from_str(&fs::read_to_string(&path)?)?;
                if let Value::Object(m) = &mut v {
                    m.insert("provenance".into(), serde_json::to_value(&dir.provenance)?);
                }
                fs::write(&path, serde_json::to_string_pretty(&v)? + "\n")?;
            }
            _ => {}
        }
    }
    Ok(())
}

/// One predictor to train: a variant under specific fusion weights.
#[derive(Debug, Clone)]
pub struct Cell {
    pub seed: u64,
    pub variant: Variant,
    pub rho: f64,
    pub tau: f64,
    /// Report label, empty for the default weights.
    pub setting: String,
}

impl Cell {
    pub fn id(&self) -> String {
        let mut s = format!("seed{}_{}", self.seed, self.variant.name());
        if !self.setting.is_empty() {
            s.push('_');
            s.push_str(&self.setting);
        }
        s
    }
}

/// Cells for `run`/`ablate`, optionally sweeping one fusion weight for
/// the IV variants.
pub fn plan_cells(cfg: &ExperimentConfig, variants: &[Variant], sweep: Option<&(String, Vec<f64>)>) -> Vec<Cell> {
    let p = &cfg.pipeline;
    let mut cells = Vec::new();
    for &seed in &cfg.seeds {
        for &variant in variants {
            match sweep {
                Some((name, values)) if variant.uses_iv() => {
                    for &v in values {
                        let (rho, tau) = if name == "rho" { (v, p.tau) } else { (p.rho, v) };
                        cells.push(Cell { seed, variant, rho, tau, setting: format!("{name}={v}") });
                    }
                }
                _ => cells.push(Cell { seed, variant, rho: p.rho, tau: p.tau, setting: String::new() }),
            }
        }
    }
    cells
}

fn variant_rows(r: &VariantResult, setting: &str, k: usize) -> Vec<MetricRow> {
    let row = |metric: String, value: f64| MetricRow {
        seed: r.seed,
        variant: r.variant.name().into(),
        metric,
        value,
        setting: setting.into(),
    };
    let mut rows = vec![row(format!("ndcg@{k}"), r.test.ndcg), row(format!("recall@{k}"), r.test.recall)];
    if let Some(m) = r.mcc {
        rows.push(row("mcc".into(), m));
    }
    rows
}

fn train_cell(dir: &RunDir, run: &mut SeedRun, cell: &Cell) -> Result<(Vec<MetricRow>, Value)> {
    let cfg = dir.config();
    let r = run.run_variant_with(cell.variant, cell.rho, cell.tau)?;
    if cfg.checkpoints {
        let model = run.model(cell.variant, cell.rho, cell.tau).context("trained model missing")?;
        let params = model.checkpoint_params();
        let manifest = Manifest {
            kind: "ividr-predictor".into(),
            n_params: params.len(),
            seed: cell.seed,
            details: json!({
                "variant": cell.variant,
                "dim": cfg.pipeline.rec.dim,
                "latent_dim": model.head.as_ref().map_or(0, |h| h.latent_dim),
                "phi": model.phi,
                "lambda": model.lambda,
                "rho": cell.rho,
                "tau": cell.tau,
                "lr": r.fit.lr,
                "weight_decay": r.fit.weight_decay,
                "best_epoch": r.fit.best_epoch,
                "build": dir.provenance.build,
            }),
        };
        checkpoint::save(&dir.root.join("checkpoints"), &cell.id(), &params, &manifest)?;
    }
    Ok((variant_rows(&r, &cell.setting, cfg.pipeline.rec.k), serde_json::to_value(&r)?))
}

/// Runs every pending cell, sharing one `SeedRun` per seed so the
/// expensive stages are fitted once.
pub fn execute(dir: &RunDir, cells: &[Cell], jobs: usize) -> Result<Vec<CellRecord>> {
    let mut by_seed: BTreeMap<u64, Vec<&Cell>> = BTreeMap::new();
    for c in cells {
        by_seed.entry(c.seed).or_default().push(c);
    }
    let groups: Vec<(u64, Vec<&Cell>)> = by_seed.into_iter().collect();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build()?;
    let nested: Vec<Result<Vec<CellRecord>>> = pool.install(|| groups.par_iter().map(|(seed, cells)| run_group(dir, *seed, cells)).collect());
    let mut out = Vec::new();
    for r in nested {
        out.extend(r?);
    }
    Ok(out)
}

fn run_group(dir: &RunDir, seed: u64, cells: &[&Cell]) -> Result<Vec<CellRecord>> {
    let cfg = dir.config();
    let mut records = Vec::new();
    let mut pending = Vec::new();
    for c in cells {
        match dir.completed(&c.id()) {
            Some(r) => {
                log::info!("skipping completed cell {}", c.id());
                records.push(r);
            }
            None => pending.push(*c),
        }
    }
    if pending.is_empty() {
        return Ok(records);
    }
    let data = load_data(cfg, seed, None);
    let run = data.as_ref().map_err(|e| anyhow::anyhow!("{e:#}")).and_then(|d| {
        Ok(SeedRun::new(&d.dataset, &cfg.pipeline, seed, d.truth.as_ref())?)
    });
    match run {
        Err(e) => {
            for c in pending {
                records.push(dir.record(&c.id(), Err(anyhow::anyhow!("setup failed: {e:#}")))?);
            }
        }
        Ok(mut run) => {
            for c in pending {
                log::info!("training {}", c.id());
                let outcome = train_cell(dir, &mut run, c);
                records.push(dir.record(&c.id(), outcome)?);
            }
        }
    }
    Ok(records)
}

/// Aggregates records into `report.json` / `report.csv`; returns the
/// number of failed cells.
pub fn write_report(dir: &RunDir, records: &[CellRecord]) -> Result<(MetricsReport, usize)> {
    let mut report = MetricsReport::default();
    let mut failures = Vec::new();
    for r in records {
        if r.ok {
            report.rows.extend(r.rows.iter().cloned());
        } else {
            failures.push(json!({ "cell": r.cell, "error": r.error }));
        }
    }
    report.rows.sort_by(|a, b| (a.seed, &a.variant, &a.setting, &a.metric).cmp(&(b.seed, &b.variant, &b.setting, &b.metric)));
    report.aggregate(Some(dir.config().baseline.name()));
    dir.write_stamped_json("report.json", json!({ "report": report, "failures": failures }))?;
    dir.write_stamped_text("report.csv", &report.to_csv())?;
    let mut agg = String::from("variant,setting,metric,mean,std,n,p_value\n");
    for a in &report.aggregates {
        let p = a.p_value.map_or(String::new(), |p| format!("{p:?}"));
        agg.push_str(&format!("{},{},{},{:?},{:?},{},{}\n", a.variant, a.setting, a.metric, a.mean, a.std, a.n, p));
    }
    dir.write_stamped_text("aggregates.csv", &agg)?;
    for f in &failures {
        log::warn!("failed: {f}");
    }
    Ok((report, failures.len()))
}

pub fn cmd_run(dir: &RunDir, sweep: Option<&(String, Vec<f64>)>, jobs: usize) -> Result<usize> {
    let cfg = dir.config();
    let cells = plan_cells(cfg, &cfg.variants, sweep);
    let records = execute(dir, &cells, jobs)?;
    let (report, failed) = write_report(dir, &records)?;
    if let Some((name, values)) = sweep {
        write_sweep_series(dir, &report, name, values, &cfg.variants)?;
    }
    Ok(failed)
}

pub fn cmd_ablate(dir: &RunDir, jobs: usize) -> Result<usize> {
    let cfg = dir.config();
    let cells = plan_cells(cfg, &Variant::ALL, None);
    let records = execute(dir, &cells, jobs)?;
    let (report, failed) = write_report(dir, &records)?;
    let metric = format!("ndcg@{}", cfg.pipeline.rec.k);
    let mean = |v: Variant| report.find(v.name(), "", &metric).map(|a| a.mean);
    let check = match (
        mean(Variant::IviDr),
        mean(Variant::IviDrF),
        mean(Variant::IviDrR),
        mean(Variant::IviDrT),
        mean(Variant::Idcf),
    ) {
        (Some(full), Some(f), Some(r), Some(t), Some(idcf)) => {
            let chain = [full, f.max(r), t, idcf];
            json!({
                "metric": metric,
                "chain": ["IViDR", "max(IViDR-F, IViDR-R)", "IViDR-T", "iDCF"],
                "means": chain,
                "tolerance": ABLATION_TIE,
                "ordering_holds": chain_holds(&chain, ABLATION_TIE),
            })
        }
        _ => json!({ "ordering_holds": null, "reason": "missing variants" }),
    };
    dir.write_stamped_json("ablation_check.json", check)?;
    Ok(failed)
}

fn write_sweep_series(dir: &RunDir, report: &MetricsReport, name: &str, values: &[f64], variants: &[Variant]) -> Result<Value> {
    let k = dir.config().pipeline.rec.k;
    let (ndcg, recall) = (format!("ndcg@{k}"), format!("recall@{k}"));
    let mut csv = format!("variant,{name},ndcg_mean,ndcg_std,recall_mean,recall_std,n\n");
    let mut checks = serde_json::Map::new();
    for v in variants.iter().filter(|v| v.uses_iv()) {
        for &x in values {
            let setting = format!("{name}={x}");
            if let (Some(a), Some(b)) = (report.find(v.name(), &setting, &ndcg), report.find(v.name(), &setting, &recall)) {
                csv.push_str(&format!("{},{x},{:?},{:?},{:?},{:?},{}\n", v.name(), a.mean, a.std, b.mean, b.std, a.n));
            }
        }
        // Per seed: does the best interior point reach both endpoints?
        let seeds = &dir.config().seeds;
        let mut per_seed = serde_json::Map::new();
        for &s in seeds {
            let series: Vec<f64> = values
                .iter()
                .filter_map(|&x| report.series(v.name(), &format!("{name}={x}"), &ndcg).into_iter().find(|p| p.0 == s).map(|p| p.1))
                .collect();
            if series.len() == values.len() {
                per_seed.insert(s.to_string(), json!(interior_peak(&series)));
            }
        }
        let hits = per_seed.values().filter(|b| b.as_bool() == Some(true)).count();
        checks.insert(v.name().into(), json!({ "interior_peak_by_seed": per_seed, "seeds_with_interior_peak": hits }));
    }
    dir.write_stamped_text(&format!("sweep_{name}.csv"), &csv)?;
    Ok(Value::Object(checks))
}

pub fn cmd_sweep(dir: &RunDir, jobs: usize) -> Result<usize> {
    let cfg = dir.config();
    let points = cfg.sweep_points.clone();
    let mut cells = Vec::new();
    let mut sweeps = Vec::new();
    for name in ["rho", "tau"] {
        let s = (name.to_owned(), points.clone());
        cells.extend(plan_cells(cfg, &[Variant::IviDr], Some(&s)));
        sweeps.push(s);
    }
    let records = execute(dir, &cells, jobs)?;
    let (report, failed) = write_report(dir, &records)?;
    let mut checks = serde_json::Map::new();
    for (name, values) in &sweeps {
        checks.insert(name.clone(), write_sweep_series(dir, &report, name, values, &[Variant::IviDr])?);
    }
    dir.write_stamped_json("sweep_check.json", Value::Object(checks))?;
    Ok(failed)
}

pub fn cmd_mcc_study(dir: &RunDir, jobs: usize) -> Result<usize> {
    let cfg = dir.config();
    if !matches!(cfg.data, DataSource::Synthetic { .. }) {
        bail!("mcc-study needs a synthetic data source with known confounders");
    }
    let cells: Vec<(f64, u64)> = cfg.gammas.iter().flat_map(|&g| cfg.seeds.iter().map(move |&s| (g, s))).collect();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build()?;
    let records: Vec<Result<CellRecord>> = pool.install(|| {
        cells
            .par_iter()
            .map(|&(gamma, seed)| {
                let id = format!("gamma{gamma}_seed{seed}");
                if let Some(r) = dir.completed(&id) {
                    return Ok(r);
                }
                log::info!("mcc cell {id}");
                dir.record(&id, mcc_cell(cfg, gamma, seed))
            })
            .collect()
    });
    let records: Vec<CellRecord> = records.into_iter().collect::<Result<_>>()?;
    let (report, failed) = write_report(dir, &records)?;

    let mut csv = String::from("gamma,variant,mcc_mean,mcc_std,n\n");
    let mut ividr_means = Vec::new();
    for &g in &cfg.gammas {
        for v in [Variant::Idcf, Variant::IviDr] {
            let vals: Vec<f64> = report.series(v.name(), &format!("gamma={g}"), "mcc").iter().map(|p| p.1).collect();
            let (m, s) = mean_std(&vals);
            csv.push_str(&format!("{g},{},{m:?},{s:?},{}\n", v.name(), vals.len()));
            if v == Variant::IviDr {
                ividr_means.push(m);
            }
        }
    }
    dir.write_stamped_text("mcc_vs_gamma.csv", &csv)?;
    dir.write_stamped_json(
        "mcc_trend.json",
        json!({ "gammas": cfg.gammas, "ividr_mean_mcc": ividr_means, "monotone_degradation": strictly_decreasing(&ividr_means) }),
    )?;
    Ok(failed)
}

fn mcc_cell(cfg: &ExperimentConfig, gamma: f64, seed: u64) -> Result<(Vec<MetricRow>, Value)> {
    let data = load_data(cfg, seed, Some(gamma))?;
    let truth = data.truth.as_ref().context("synthetic data lost its ground truth")?;
    let mut run = SeedRun::new(&data.dataset, &cfg.pipeline, seed, Some(truth))?;
    let p = &cfg.pipeline;
    let idcf = run.confounder_mcc(Variant::Idcf, 1.0, 0.0)?.context("latent dim differs from ground truth")?;
    let ividr = run.confounder_mcc(Variant::IviDr, p.rho, p.tau)?.context("latent dim differs from ground truth")?;
    let setting = format!("gamma={gamma}");
    let row = |variant: Variant, value: f64| MetricRow { seed, variant: variant.name().into(), metric: "mcc".into(), value, setting: setting.clone() };
    Ok((vec![row(Variant::Idcf, idcf), row(Variant::IviDr, ividr)], json!({ "gamma": gamma, "seed": seed })))
}
