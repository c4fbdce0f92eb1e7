//! Acceptance report: one PASS/FAIL line per criterion.
//!
//! Unmet criteria are reported, not panicked on; a panic means the harness
//! itself could not run. `IVIDR_ACCEPTANCE_ONLY=1,5` restricts the run to
//! the listed criteria and `IVIDR_COAT_DIR` points at real Coat files.

use std::collections::BTreeSet;
use std::time::Instant;

use ividr_core::datagen::{generate, GenConfig};
use ividr_core::datasets::{load_coat_dir, BinaryMatrix, InteractionDataset, Split, Triple};
use ividr_core::eval::{chain_holds, evaluate_ranking, interior_peak, mcc, mean_std, paired_ttest, strictly_decreasing};
use ividr_core::iv::{decompose, first_stage_gradient_error, TreatmentMode};
use ividr_core::ivae::{train_ivae, IvaeConfig, IvaeModel};
use ividr_core::numerics::{
    default_rcond, finite_diff_check, kl_gaussian_diag, least_squares, pinv, Activation, DenseMatrix, Mlp, Rng,
};
use ividr_core::pipeline::{PipelineConfig, SeedRun};
use ividr_core::recmodel::{HeadKind, IviDrModel, RecConfig, Variant};

/// Learning rate and weight decay for the desk rec-model fits; the full
/// grid multiplies their runtime by ten.
const GRID: [(f64, f64); 1] = [(5e-4, 1e-5)];
const TIE: f64 = 0.003;

fn report(id: u32, pass: bool, what: &str, detail: String) -> bool {
    println!("criterion {id} {}: {what}: {detail}", if pass { "PASS" } else { "FAIL" });
    pass
}

fn desk_cfg() -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.rec.grid = GRID.to_vec();
    cfg
}

fn desk_data(seed: u64, gamma: f64) -> ividr_core::datagen::SyntheticDataset {
    let g = GenConfig { gamma, ..GenConfig::desk().with_seed(seed) };
    generate(&g).expect("desk data")
}

fn ndcg(run: &mut SeedRun, v: Variant, rho: f64, tau: f64) -> f64 {
    run.run_variant_with(v, rho, tau).expect("variant").test.ndcg
}

fn fmt(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.4}")).collect();
    format!("[{}]", parts.join(", "))
}

/// Everything that needs the desk data at gamma 0, one seed at a time so
/// the posteriors and treatments are built once.
#[derive(Default)]
struct DeskResults {
    mcc_ividr: Vec<f64>,
    mcc_idcf: Vec<f64>,
    ablation: Vec<[f64; 5]>,
    sweeps: Vec<(Vec<f64>, Vec<f64>)>,
    /// Wall time spent on the posteriors behind the MCC numbers.
    mcc_secs: f64,
}

fn desk_runs(want: &BTreeSet<u32>) -> DeskResults {
    let cfg = desk_cfg();
    let points: Vec<f64> = (0..=5).map(|k| k as f64 * 0.2).collect();
    let mut out = DeskResults::default();
    let n_seeds = if want.contains(&4) { 10 } else { 5 };
    for seed in 0..n_seeds {
        let t = Instant::now();
        let d = desk_data(seed, 0.0);
        let mut run = SeedRun::new(&d.dataset, &cfg, seed, Some(&d.c)).expect("seed run");
        if seed < 5 && want.contains(&1) {
            let m = Instant::now();
            out.mcc_ividr.push(run.confounder_mcc(Variant::IviDr, cfg.rho, cfg.tau).unwrap().unwrap());
            out.mcc_idcf.push(run.confounder_mcc(Variant::Idcf, 1.0, 0.0).unwrap().unwrap());
            out.mcc_secs += m.elapsed().as_secs_f64();
        }
        if want.contains(&4) {
            let r = [Variant::IviDr, Variant::IviDrF, Variant::IviDrR, Variant::IviDrT, Variant::Idcf]
                .map(|v| run.run_variant(v).expect("variant").test.ndcg);
            out.ablation.push(r);
        }
        if seed < 5 && want.contains(&7) {
            let rho: Vec<f64> = points.iter().map(|&p| ndcg(&mut run, Variant::IviDr, p, cfg.tau)).collect();
            let tau: Vec<f64> = points.iter().map(|&p| ndcg(&mut run, Variant::IviDr, cfg.rho, p)).collect();
            out.sweeps.push((rho, tau));
        }
        eprintln!("desk seed {seed} done in {:.0}s", t.elapsed().as_secs_f64());
    }
    out
}

fn criterion1(r: &DeskResults) -> bool {
    let secs = r.mcc_secs;
    let wins = r.mcc_ividr.iter().zip(&r.mcc_idcf).filter(|(a, b)| a >= b).count();
    let (mean, _) = mean_std(&r.mcc_ividr);
    let (base, _) = mean_std(&r.mcc_idcf);
    report(
        1,
        wins >= 4 && mean >= 0.75 && secs <= 900.0,
        "confounder recovery at gamma 0",
        format!(
            "IViDR >= iDCF on {wins}/5 seeds, IViDR mean MCC {mean:.4} (need >= 0.75), iDCF mean {base:.4}, per seed {} vs {}, {secs:.0}s of 900s budget",
            fmt(&r.mcc_ividr),
            fmt(&r.mcc_idcf)
        ),
    )
}

fn criterion2(gamma0: Option<&[f64]>) -> bool {
    let cfg = desk_cfg();
    let mut means = Vec::new();
    for gamma in [0.0, 10.0, 20.0] {
        let per_seed: Vec<f64> = match gamma0 {
            Some(v) if gamma == 0.0 => v.to_vec(),
            _ => (0..5)
                .map(|seed| {
                    let d = desk_data(seed, gamma);
                    let mut run = SeedRun::new(&d.dataset, &cfg, seed, Some(&d.c)).expect("seed run");
                    run.confounder_mcc(Variant::IviDr, cfg.rho, cfg.tau).unwrap().unwrap()
                })
                .collect(),
        };
        means.push(mean_std(&per_seed).0);
    }
    report(2, strictly_decreasing(&means), "MCC falls with exposure noise", format!("mean MCC at gamma 0/10/20 = {}", fmt(&means)))
}

fn coat_data() -> (InteractionDataset, &'static str) {
    match std::env::var_os("IVIDR_COAT_DIR") {
        Some(dir) => (load_coat_dir(dir.as_ref()).expect("coat files"), "real Coat"),
        None => (generate(&GenConfig::coat()).expect("coat stand-in").dataset, "290x300 stand-in"),
    }
}

fn criterion3() -> bool {
    let (ds, source) = coat_data();
    // Coat is small enough for the full learning-rate grid.
    let cfg = PipelineConfig::coat();
    let (mut ividr, mut mf) = (Vec::new(), Vec::new());
    for seed in 0..10 {
        let mut run = SeedRun::new(&ds, &cfg, seed, None).expect("seed run");
        ividr.push(run.run_variant(Variant::IviDr).expect("IViDR").test.ndcg);
        mf.push(run.run_variant(Variant::Mf).expect("MF").test.ndcg);
    }
    let (a, b) = (mean_std(&ividr).0, mean_std(&mf).0);
    let p = paired_ttest(&ividr, &mf).expect("t-test");
    report(
        3,
        a > b && p < 0.05,
        "Coat NDCG@5 over MF",
        format!("{source}: IViDR {a:.4} vs MF {b:.4}, paired p = {p:.4} (need IViDR > MF and p < 0.05)"),
    )
}

fn criterion4(r: &DeskResults) -> bool {
    let col = |k: usize| mean_std(&r.ablation.iter().map(|row| row[k]).collect::<Vec<_>>()).0;
    let (full, f, rr, t, idcf) = (col(0), col(1), col(2), col(3), col(4));
    let chain = [full, f.max(rr), t, idcf];
    report(
        4,
        chain_holds(&chain, TIE),
        "ablation ordering",
        format!(
            "{} seeds, IViDR {full:.4} >= max(F {f:.4}, R {rr:.4}) >= T {t:.4} >= iDCF {idcf:.4}, ties within {TIE}",
            r.ablation.len()
        ),
    )
}

fn mlp_error(sizes: &[usize], act: Activation, seed: u64) -> f64 {
    let mut rng = Rng::new(seed);
    let mut mlp = Mlp::new(sizes, act, &mut rng).unwrap();
    let x: Vec<f64> = (0..sizes[0]).map(|_| rng.normal()).collect();
    let w: Vec<f64> = (0..sizes[sizes.len() - 1]).map(|_| rng.normal()).collect();
    mlp.zero_grad();
    mlp.forward(&x).unwrap();
    mlp.backward(&w).unwrap();
    let base = mlp.clone();
    let loss = |p: &[f64]| {
        let mut m = base.clone();
        m.set_params_flat(p).unwrap();
        m.predict(&x).unwrap().iter().zip(&w).map(|(y, c)| y * c).sum()
    };
    finite_diff_check(loss, &mlp.params_flat(), &mlp.grads_flat())
}

fn ivae_error() -> f64 {
    let (n, m) = (6, 7);
    let mut rng = Rng::new(3);
    let w: Vec<usize> = (0..n).map(|_| rng.below(3)).collect();
    let mut a = BinaryMatrix::zeros(n, m);
    for u in 0..n {
        for i in 0..m {
            a.set(u, i, rng.bernoulli(if i % 3 == w[u] { 0.7 } else { 0.2 }));
        }
    }
    let x = a.to_dense();
    let cfg = IvaeConfig { encoder_hidden: vec![8], decoder_hidden: vec![5], ..IvaeConfig::default() };
    let mut model = IvaeModel::new(m, 3, &cfg, &mut Rng::new(4)).unwrap();
    model.set_prior(1, &[0.3, -0.2], &[0.1, -0.3]);
    let users: Vec<usize> = (0..n).collect();
    let (_, grad) = model.loss_and_gradient(&x, &a, &w, &users, &mut Rng::new(5)).unwrap();
    let base = model.clone();
    let loss = |p: &[f64]| {
        let mut t = base.clone();
        t.set_params_flat(p).unwrap();
        t.loss_and_gradient(&x, &a, &w, &users, &mut Rng::new(5)).unwrap().0
    };
    finite_diff_check(loss, &model.params_flat(), &grad)
}

fn rec_error(variant: Variant, head: HeadKind) -> f64 {
    let cfg = RecConfig { dim: 3, head, ..RecConfig::default() };
    let mut model = IviDrModel::new(5, 6, 2, variant, &cfg, 9).unwrap();
    let mut rng = Rng::new(10);
    let examples: Vec<(usize, usize, f64)> = (0..12).map(|_| (rng.below(5), rng.below(6), rng.bernoulli(0.5) as u8 as f64)).collect();
    let conf: Vec<Vec<f64>> = examples.iter().map(|_| vec![rng.normal(), rng.normal()]).collect();
    let (_, grad) = model.loss_and_gradient(&examples, &conf).unwrap();
    let base = model.clone();
    let loss = |p: &[f64]| {
        let mut t = base.clone();
        t.set_params_flat(p).unwrap();
        t.loss_and_gradient(&examples, &conf).unwrap().0
    };
    finite_diff_check(loss, &model.params_flat(), &grad)
}

fn pinv_error(seed: u64) -> f64 {
    let mut rng = Rng::new(seed);
    let (rows, cols) = (2 + rng.below(5), 2 + rng.below(5));
    let rank = 1 + rng.below(rows.min(cols));
    let l = DenseMatrix::from_fn(rows, rank, |_, _| rng.normal());
    let r = DenseMatrix::from_fn(rank, cols, |_, _| rng.normal());
    let a = l.matmul(&r).unwrap();
    let p = pinv(&a, default_rcond(rows, cols)).unwrap();
    let ap = a.matmul(&p).unwrap();
    let pa = p.matmul(&a).unwrap();
    let d = |x: &DenseMatrix, y: &DenseMatrix| x.sub(y).unwrap().max_abs();
    [
        d(&ap.matmul(&a).unwrap(), &a),
        d(&pa.matmul(&p).unwrap(), &p) / p.max_abs().max(1.0),
        d(&ap.transpose(), &ap),
        d(&pa.transpose(), &pa),
    ]
    .into_iter()
    .fold(0.0, f64::max)
}

fn kl_monte_carlo_gap() -> (f64, f64) {
    let (mq, vq) = ([0.3, -1.0, 2.0], [0.5, 1.5, 0.2]);
    let (mp, vp) = ([0.0, 0.5, 1.0], [1.0, 0.7, 2.0]);
    let closed = kl_gaussian_diag(&mq, &vq, &mp, &vp).unwrap();
    let log_n = |x: f64, m: f64, v: f64| -0.5 * ((2.0 * std::f64::consts::PI * v).ln() + (x - m).powi(2) / v);
    let mut rng = Rng::new(11);
    let n = 200_000;
    let draws: Vec<f64> = (0..n)
        .map(|_| {
            (0..3)
                .map(|k| {
                    let x = mq[k] + vq[k].sqrt() * rng.normal();
                    log_n(x, mq[k], vq[k]) - log_n(x, mp[k], vp[k])
                })
                .sum()
        })
        .collect();
    let (mean, sd) = mean_std(&draws);
    ((mean - closed).abs(), sd / (n as f64).sqrt())
}

fn ranking_mismatches(cases: usize) -> usize {
    let mut rng = Rng::new(12);
    let mut bad = 0;
    for _ in 0..cases {
        let n = 1 + rng.below(6);
        let k = 1 + rng.below(6);
        let labels: Vec<u8> = (0..n).map(|_| rng.bernoulli(0.4) as u8).collect();
        let scores: Vec<f64> = (0..n).map(|_| rng.below(4) as f64).collect();
        let test: Vec<Triple> = (0..n).map(|i| Triple { user: 0, item: i, rating: labels[i], split: Split::Unbiased }).collect();
        let got = evaluate_ranking(&test, k, |_, i| scores[i]).unwrap();
        let positives = labels.iter().filter(|&&l| l == 1).count();
        if positives == 0 {
            bad += (got.n_users != 0) as usize;
            continue;
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        let gain = |ranked: &[usize]| -> f64 { ranked.iter().take(k).enumerate().map(|(p, &i)| labels[i] as f64 / (p as f64 + 2.0).log2()).sum() };
        // Ideal DCG by trying every ordering.
        let mut best = 0.0f64;
        let mut perm: Vec<usize> = (0..n).collect();
        permute(&mut perm, 0, &mut |p| best = best.max(gain(p)));
        let hits = order.iter().take(k).filter(|&&i| labels[i] == 1).count();
        let ndcg_ok = (got.ndcg - gain(&order) / best).abs() < 1e-12;
        let recall_ok = (got.recall - hits as f64 / positives.min(k) as f64).abs() < 1e-12;
        bad += (!(ndcg_ok && recall_ok)) as usize;
    }
    bad
}

fn permute(v: &mut Vec<usize>, at: usize, f: &mut impl FnMut(&[usize])) {
    if at == v.len() {
        f(v);
        return;
    }
    for i in at..v.len() {
        v.swap(at, i);
        permute(v, at + 1, f);
        v.swap(at, i);
    }
}

fn mcc_invariance_gap(seed: u64) -> f64 {
    let mut rng = Rng::new(seed);
    let (n, d) = (30, 3);
    let truth = DenseMatrix::from_fn(n, d, |_, _| rng.normal());
    let est = DenseMatrix::from_fn(n, d, |_, _| rng.normal());
    let perm = [2, 0, 1];
    let moved = DenseMatrix::from_fn(n, d, |r, c| if c == 1 { -3.0 } else { 0.5 } * est.get(r, perm[c]) + 1.0);
    (mcc(&est, &truth).unwrap() - mcc(&moved, &truth).unwrap()).abs()
}

fn deterministic_report() -> bool {
    let gen = GenConfig { n_users: 150, n_items: 40, test_items_per_user: 10, alpha: 0.5, ..GenConfig::desk() };
    let mut cfg = PipelineConfig::default();
    cfg.ivae.max_epochs = 4;
    cfg.iv.epochs = 1;
    cfg.rec.epochs = 3;
    cfg.rec.grid = vec![(1e-2, 1e-6)];
    let once = || {
        let d = generate(&gen).unwrap();
        let mut run = SeedRun::new(&d.dataset, &cfg, 4, Some(&d.c)).unwrap();
        let rs: Vec<_> = Variant::ALL.iter().map(|&v| run.run_variant(v).unwrap()).collect();
        serde_json::to_string(&rs).unwrap()
    };
    once() == once()
}

fn criterion5() -> bool {
    let mut failures = Vec::new();
    let mut check = |name: &str, ok: bool, value: String| {
        if !ok {
            failures.push(format!("{name} ({value})"));
        }
    };

    let pinv_worst = (0..200).map(pinv_error).fold(0.0, f64::max);
    check("pinv axioms", pinv_worst < 1e-8, format!("{pinv_worst:.1e}"));

    let mut grad_worst: f64 = 0.0;
    for (s, act) in [Activation::Identity, Activation::Sigmoid, Activation::Softplus, Activation::LeakyRelu].into_iter().enumerate() {
        for sizes in [vec![3, 2], vec![4, 5, 3], vec![2, 6, 4, 1]] {
            grad_worst = grad_worst.max(mlp_error(&sizes, act, s as u64));
        }
    }
    grad_worst = grad_worst.max(ivae_error());
    for v in Variant::ALL {
        grad_worst = grad_worst.max(rec_error(v, HeadKind::Linear));
    }
    grad_worst = grad_worst.max(rec_error(Variant::IviDr, HeadKind::Mlp { hidden: 4 }));
    for mode in [TreatmentMode::Combined, TreatmentMode::Raw, TreatmentMode::FittedOnly, TreatmentMode::ResidualOnly] {
        grad_worst = grad_worst.max(first_stage_gradient_error(mode).unwrap());
    }
    check("gradients", grad_worst < 1e-4, format!("worst relative error {grad_worst:.1e}"));

    let mut rng = Rng::new(13);
    let kl_min = (0..500)
        .map(|_| {
            let v = |r: &mut Rng| (0..3).map(|_| r.normal()).collect::<Vec<f64>>();
            let (mq, mp) = (v(&mut rng), v(&mut rng));
            let (vq, vp): (Vec<f64>, Vec<f64>) = (v(&mut rng).iter().map(|x| x.exp()).collect(), v(&mut rng).iter().map(|x| x.exp()).collect());
            kl_gaussian_diag(&mq, &vq, &mp, &vp).unwrap()
        })
        .fold(f64::INFINITY, f64::min);
    check("KL >= 0", kl_min >= 0.0, format!("min {kl_min:.2e}"));
    let (gap, se) = kl_monte_carlo_gap();
    check("KL closed form vs Monte Carlo", gap < 4.0 * se, format!("gap {gap:.2e}, 4 SE {:.2e}", 4.0 * se));

    let mut dec_worst: f64 = 0.0;
    for seed in 0..200 {
        let mut r = Rng::new(seed);
        let (dq, n) = (1 + r.below(8), 1 + r.below(8));
        let z = DenseMatrix::from_fn(dq, n, |_, _| r.normal());
        let t0: Vec<f64> = (0..dq).map(|_| r.normal()).collect();
        let (fit, res) = decompose(&t0, &z).unwrap();
        for k in 0..dq {
            dec_worst = dec_worst.max((fit[k] + res[k] - t0[k]).abs());
        }
        for v in z.transpose().matvec(&res).unwrap() {
            dec_worst = dec_worst.max(v.abs());
        }
    }
    check("decomposition", dec_worst < 1e-8, format!("{dec_worst:.1e}"));

    let bad = ranking_mismatches(1000);
    check("ranking brute force", bad == 0, format!("{bad}/1000 mismatches"));

    let mcc_gap = (0..50).map(mcc_invariance_gap).fold(0.0, f64::max);
    check("MCC invariance", mcc_gap < 1e-12, format!("{mcc_gap:.1e}"));

    check("determinism", deterministic_report(), "reports differ".into());

    let detail = if failures.is_empty() {
        format!("pinv {pinv_worst:.1e}, gradients {grad_worst:.1e}, decomposition {dec_worst:.1e}, 1000 ranking cases, MCC, KL, determinism")
    } else {
        format!("failed: {}", failures.join("; "))
    };
    report(5, failures.is_empty(), "property battery", detail)
}

/// Coefficient of determination of the best affine map from `x` to each
/// column of `y`, averaged over columns.
fn affine_r2(x: &DenseMatrix, y: &DenseMatrix) -> f64 {
    let design = DenseMatrix::from_fn(x.rows(), x.cols() + 1, |r, c| if c == x.cols() { 1.0 } else { x.get(r, c) });
    let mut total = 0.0;
    for c in 0..y.cols() {
        let target = y.column(c);
        let coef = least_squares(&design, &target).unwrap();
        let fitted = design.matvec(&coef).unwrap();
        let mean = target.iter().sum::<f64>() / target.len() as f64;
        let ss_res: f64 = target.iter().zip(&fitted).map(|(t, f)| (t - f).powi(2)).sum();
        let ss_tot: f64 = target.iter().map(|t| (t - mean).powi(2)).sum();
        total += 1.0 - ss_res / ss_tot;
    }
    total / y.cols() as f64
}

fn criterion6() -> bool {
    // Latents drawn from a proxy-dependent Gaussian; every item's logit is
    // linear in the latent with no extra noise beyond the Bernoulli draw.
    let (n, m, d, k) = (3000, 60, 2, 5);
    let mut rng = Rng::new(21);
    let centers: Vec<[f64; 2]> = (0..k).map(|_| [1.5 * rng.normal(), 1.5 * rng.normal()]).collect();
    let scales: Vec<[f64; 2]> = (0..k).map(|_| [0.3 + rng.uniform(), 0.3 + rng.uniform()]).collect();
    let load = DenseMatrix::from_fn(d, m, |_, _| 1.5 * rng.normal());
    let w: Vec<usize> = (0..n).map(|_| rng.below(k)).collect();
    let z = DenseMatrix::from_fn(n, d, |u, j| centers[w[u]][j] + scales[w[u]][j] * rng.normal());
    let logits = z.matmul(&load).unwrap();
    let mut a = BinaryMatrix::zeros(n, m);
    for u in 0..n {
        for i in 0..m {
            a.set(u, i, rng.bernoulli(1.0 / (1.0 + (-logits.get(u, i)).exp())));
        }
    }
    let x = a.to_dense();
    let cfg = IvaeConfig { latent_dim: d, encoder_hidden: vec![32], decoder_hidden: vec![], lr: 5e-3, max_epochs: 150, ..IvaeConfig::default() };
    let fit = |seed: u64| train_ivae(&x, &a, &w, &cfg, seed, 1).expect("ivae").0.encode_all(&x, &w).expect("encode").mean;
    let (m1, m2) = (fit(100), fit(200));
    let r2 = affine_r2(&m1, &m2).min(affine_r2(&m2, &m1));
    let truth = mcc(&m1, &z).unwrap().min(mcc(&m2, &z).unwrap());
    report(
        6,
        r2 > 0.95,
        "two iVAE fits agree up to an affine map",
        format!("R^2 = {r2:.4} (need > 0.95), MCC against the true latents {truth:.3}"),
    )
}

fn criterion7(r: &DeskResults) -> bool {
    let peaks = |pick: fn(&(Vec<f64>, Vec<f64>)) -> &Vec<f64>| r.sweeps.iter().filter(|s| interior_peak(pick(s))).count();
    let (rho, tau) = (peaks(|s| &s.0), peaks(|s| &s.1));
    let all_six = r.sweeps.iter().all(|s| s.0.len() == 6 && s.1.len() == 6);
    let lines: Vec<String> = r.sweeps.iter().enumerate().map(|(i, s)| format!("seed {i} rho {} tau {}", fmt(&s.0), fmt(&s.1))).collect();
    report(
        7,
        all_six && rho >= 3 && tau >= 3,
        "fusion-weight sweeps peak inside the range",
        format!("interior peak in {rho}/5 seeds for rho, {tau}/5 for tau; {}", lines.join("; ")),
    )
}

fn main() {
    let want: BTreeSet<u32> = match std::env::var("IVIDR_ACCEPTANCE_ONLY") {
        Ok(s) => s.split(',').filter_map(|x| x.trim().parse().ok()).collect(),
        Err(_) => (1..=7).collect(),
    };
    let started = Instant::now();
    let mut passed = 0;
    if want.contains(&5) {
        passed += criterion5() as usize;
    }
    if want.contains(&6) {
        passed += criterion6() as usize;
    }
    if want.contains(&3) {
        passed += criterion3() as usize;
    }
    let desk = if want.iter().any(|c| [1, 4, 7].contains(c)) { Some(desk_runs(&want)) } else { None };
    if let Some(r) = &desk {
        if want.contains(&1) {
            passed += criterion1(r) as usize;
        }
    }
    if want.contains(&2) {
        let gamma0 = desk.as_ref().filter(|r| r.mcc_ividr.len() == 5).map(|r| r.mcc_ividr.as_slice());
        passed += criterion2(gamma0) as usize;
    }
    if let Some(r) = &desk {
        if want.contains(&4) {
            passed += criterion4(r) as usize;
        }
        if want.contains(&7) {
            passed += criterion7(r) as usize;
        }
    }
    println!("acceptance: {passed}/{} criteria met in {:.0}s", want.len(), started.elapsed().as_secs_f64());
}
