//! Fast property suite run by the `selftest` command.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::ParamStore;
use crate::autoencoder::{AeBatch, AeConfig, AeModel, LatentState, RegMode};
use crate::diffusion::{
    coord_score_target, make_schedule, mu_from_noise, mu_theta, posterior_mean_var, DiffusionConfig, ScheduleKind,
};
use crate::egnn::{egnn_forward, EgnnStack};
use crate::elements::ElementVocab;
use crate::geometry::{build_edges, project_zero_com, random_rotation, rigid_transform, rotate_rows, Molecule};
use crate::graph::GraphBatch;
use crate::metrics::{infer_bonds, molecule_checks, molecule_hash, ChemistryTables};
use crate::noise::{latent_noise, standard_normal};
use crate::score_network::{dual_score, DiffusionBatch, DualScoreModel, ScoreConfig};
use crate::tensor::Matrix;
use crate::trainer::grad_check;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, value: f64, limit: f64) -> CheckResult {
    CheckResult { name, passed: value <= limit, detail: format!("{value:.3e} (limit {limit:.0e})") }
}

fn rel(a: &Matrix<f64>, b: &Matrix<f64>) -> f64 {
    a.sub(b).max_abs() / (1.0 + b.max_abs())
}

fn random_coords(rng: &mut ChaCha8Rng, n: usize, spread: f64) -> Matrix<f64> {
    Matrix::from_fn(n, 3, |_, _| rng.random_range(-spread..spread))
}

fn egnn_equivariance() -> CheckResult {
    let mut worst: f64 = 0.0;
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let stack = EgnnStack::new(&mut store, "st", 4, 8, 2, &mut rng);
        let x = random_coords(&mut rng, 5, 1.5);
        let h = standard_normal(&mut rng, 5, 4);
        let (xo, ho) = egnn_forward(&store, &stack, &x, &h, &GraphBatch::single(&x, 2.0)).expect("forward");
        let r: Matrix<f64> = random_rotation(&mut rng);
        let shift = [0.7, -1.1, 2.3];
        let xr = rigid_transform(&x, &r, &shift);
        let (xro, hro) = egnn_forward(&store, &stack, &xr, &h, &GraphBatch::single(&xr, 2.0)).expect("forward");
        worst = worst.max(rel(&xro, &rigid_transform(&xo, &r, &shift))).max(rel(&hro, &ho));
    }
    check("egnn equivariance", worst, 1e-6)
}

fn dual_score_equivariance() -> CheckResult {
    let mut worst: f64 = 0.0;
    let sched = make_schedule(ScheduleKind::Linear, 100, 1e-4, 2e-2).expect("schedule");
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let mut store = ParamStore::new();
        let mut cfg = ScoreConfig::new(2);
        cfg.hidden = 8;
        let model = DualScoreModel::new(&mut store, cfg, &mut rng);
        let z = LatentState { z_x: project_zero_com(&random_coords(&mut rng, 5, 1.5)).expect("n ≥ 1"), z_h: standard_normal(&mut rng, 5, 2) };
        let eta = standard_normal(&mut rng, 5, 2);
        let (sx, sh) = dual_score(&store, &model, &z, &eta, 40, &sched, None).expect("score");
        let r: Matrix<f64> = random_rotation(&mut rng);
        let zr = LatentState { z_x: rotate_rows(&z.z_x, &r), z_h: z.z_h.clone() };
        let (sxr, shr) = dual_score(&store, &model, &zr, &eta, 40, &sched, None).expect("score");
        worst = worst.max(rel(&sxr, &rotate_rows(&sx, &r))).max(rel(&shr, &sh));
    }
    check("dual score equivariance", worst, 1e-6)
}

/// Stepwise forward chain against the closed-form marginal, in standard errors.
fn marginal_oracle() -> CheckResult {
    let sched = make_schedule(ScheduleKind::Linear, 50, 1e-4, 2e-2).expect("schedule");
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (z0, n, t) = (1.3, 4000, 37);
    let draws: Vec<f64> = (0..n)
        .map(|_| {
            let mut z = z0;
            for s in 1..=t {
                let e: f64 = rng.sample(StandardNormal);
                z = sched.alpha(s).sqrt() * z + sched.beta(s).sqrt() * e;
            }
            z
        })
        .collect();
    let mean = draws.iter().sum::<f64>() / n as f64;
    let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let (m_true, v_true) = (sched.alpha_bar(t).sqrt() * z0, 1.0 - sched.alpha_bar(t));
    let z_mean = (mean - m_true).abs() / (v_true / n as f64).sqrt();
    let z_var = (var - v_true).abs() / (v_true * (2.0 / (n - 1) as f64).sqrt());
    check("forward marginal (std errors)", z_mean.max(z_var), 3.0)
}

/// Posterior moments against brute-force normalization on a grid.
fn posterior_oracle() -> CheckResult {
    let sched = make_schedule(ScheduleKind::Linear, 50, 1e-4, 2e-2).expect("schedule");
    let (t, zt, z0) = (23, 0.4, -0.8);
    let (mean, var) = posterior_mean_var(&Matrix::filled(1, 1, zt), &Matrix::filled(1, 1, z0), t, &sched).expect("posterior");
    let prior_m = sched.alpha_bar(t - 1).sqrt() * z0;
    let prior_v = 1.0 - sched.alpha_bar(t - 1);
    let (lo, hi, n) = (prior_m - 12.0 * prior_v.sqrt(), prior_m + 12.0 * prior_v.sqrt(), 200_001);
    let dx = (hi - lo) / (n - 1) as f64;
    let (mut w0, mut w1, mut w2) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let x = lo + i as f64 * dx;
        let lik = (-(zt - sched.alpha(t).sqrt() * x).powi(2) / (2.0 * sched.beta(t))).exp();
        let pri = (-(x - prior_m).powi(2) / (2.0 * prior_v)).exp();
        let w = lik * pri;
        w0 += w;
        w1 += w * x;
        w2 += w * x * x;
    }
    let gm = w1 / w0;
    let gv = w2 / w0 - gm * gm;
    check("posterior grid-Bayes", (gm - mean.get(0, 0)).abs().max((gv - var).abs()), 1e-6)
}

fn parameterization_equivalence() -> CheckResult {
    let sched = make_schedule(ScheduleKind::Linear, 100, 1e-4, 2e-2).expect("schedule");
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let t = rng.random_range(1..=100);
        let z: Matrix<f64> = standard_normal(&mut rng, 3, 4);
        let eps: Matrix<f64> = standard_normal(&mut rng, 3, 4);
        let s = eps.scale(-1.0 / (1.0 - sched.alpha_bar(t)).sqrt());
        worst = worst.max(mu_theta(&z, &s, t, &sched).sub(&mu_from_noise(&z, &eps, t, &sched)).max_abs());
    }
    check("score/noise parameterization", worst, 1e-12)
}

fn ae_gradients() -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let vocab = ElementVocab::default();
    let mol: Molecule<f64> = Molecule::new(
        &vocab,
        &["O", "H", "H"],
        Matrix::from_f64_rows(&[[0.0, 0.0, 0.0], [0.96, 0.0, 0.0], [-0.24, 0.93, 0.0]]),
        &[0, 0, 0],
    )
    .expect("molecule");
    let mut cfg = AeConfig::new(vocab.len(), 2);
    cfg.hidden = 6;
    cfg.n_layers = 2;
    cfg.reg_mode = RegMode::Kl;
    let mut store = ParamStore::new();
    let model = AeModel::new(&mut store, cfg, &mut rng);
    jitter(&mut store, &mut rng);
    let batch = AeBatch::new(&[&mol], 2.0).expect("batch");
    let eps = latent_noise(&mut rng, 3, 2);
    let err = grad_check(&store, |tape| Ok(model.loss_var(tape, &batch, &eps).0), 30, &mut rng).unwrap_or(f64::INFINITY);
    check("autoencoder loss gradients", err, 1e-4)
}

fn jitter(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.get_mut(id).as_mut_slice() {
            *v += rng.random_range(-0.1..0.1);
        }
    }
}

fn diffusion_gradients() -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut cfg = ScoreConfig::new(1);
    cfg.hidden = 6;
    let mut store = ParamStore::new();
    let model = DualScoreModel::new(&mut store, cfg, &mut rng);
    jitter(&mut store, &mut rng);
    let sched = make_schedule(ScheduleKind::Linear, 50, 1e-4, 2e-2).expect("schedule");
    let z0 = LatentState::from_stacked(&Matrix::hstack(&[
        &project_zero_com(&Matrix::from_f64_rows(&[[0.0, 0.0, 0.0], [1.2, 0.0, 0.0], [-0.3, 1.1, 0.4], [0.2, -0.9, -1.6]])).expect("n ≥ 1"),
        &standard_normal(&mut rng, 4, 1),
    ]));
    let batch = DiffusionBatch {
        z0,
        sizes: vec![4],
        t: vec![15],
        eps: latent_noise(&mut rng, 4, 1),
        eta: standard_normal(&mut rng, 4, 2),
        cond: None,
    };
    let dcfg = DiffusionConfig { steps: 50, ..DiffusionConfig::default() };
    let err = grad_check(&store, |tape| Ok(model.loss_var(tape, &batch, &sched, &dcfg)?.0), 30, &mut rng)
        .unwrap_or(f64::INFINITY);
    check("diffusion loss gradients", err, 1e-4)
}

/// Coordinate target against the central-difference gradient of
/// `−Σ_{i<j} √ᾱ (d̃_ij − d_ij)² / (2(1 − ᾱ))`.
fn coord_target_chain_rule() -> CheckResult {
    let sched = make_schedule(ScheduleKind::Linear, 100, 1e-4, 2e-2).expect("schedule");
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (x0, xt) = (random_coords(&mut rng, 4, 1.5), random_coords(&mut rng, 4, 1.5));
    let t = 60;
    let ab = sched.alpha_bar(t);
    let edges: Vec<(usize, usize)> = (0..4).flat_map(|i| (0..4).filter(move |&j| j != i).map(move |j| (i, j))).collect();
    let target = coord_score_target(&xt, &x0, &edges, t, &sched).expect("target");
    let potential = |x: &Matrix<f64>| {
        let mut u = 0.0;
        for i in 0..4 {
            for j in i + 1..4 {
                let dt = crate::geometry::distance(x.row(i), x.row(j));
                let d0 = crate::geometry::distance(x0.row(i), x0.row(j));
                u -= ab.sqrt() * (dt - d0).powi(2) / (2.0 * (1.0 - ab));
            }
        }
        u
    };
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for i in 0..4 {
        for c in 0..3 {
            let (mut up, mut down) = (xt.clone(), xt.clone());
            up.set(i, c, xt.get(i, c) + h);
            down.set(i, c, xt.get(i, c) - h);
            let fd = (potential(&up) - potential(&down)) / (2.0 * h);
            worst = worst.max((fd - target.get(i, c)).abs() / (fd.abs() + 1e-8));
        }
    }
    check("coordinate target chain rule", worst, 1e-5)
}

fn metrics_sanity() -> CheckResult {
    let vocab = ElementVocab::default();
    let tables = ChemistryTables::default();
    let s = 1.09 / 3f64.sqrt();
    let methane: Molecule<f64> = Molecule::new(
        &vocab,
        &["C", "H", "H", "H", "H"],
        Matrix::from_f64_rows(&[[0.0; 3], [s, s, s], [s, -s, -s], [-s, s, -s], [-s, -s, s]]),
        &[0; 5],
    )
    .expect("methane");
    let r = 1.09;
    let penta: Molecule<f64> = Molecule::new(
        &vocab,
        &["C", "H", "H", "H", "H", "H"],
        Matrix::from_f64_rows(&[[0.0; 3], [r, 0.0, 0.0], [-r, 0.0, 0.0], [0.0, r, 0.0], [0.0, -r, 0.0], [0.0, 0.0, r]]),
        &[0; 6],
    )
    .expect("pentavalent");
    let ok_methane = infer_bonds(&methane, &tables)
        .and_then(|g| molecule_checks(&g, &tables, true))
        .is_ok_and(|c| c.valid && c.ion_free && c.stable_atoms == 5);
    let ok_penta = infer_bonds(&penta, &tables).and_then(|g| molecule_checks(&g, &tables, true)).is_ok_and(|c| !c.valid);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let h = molecule_hash(&methane, &tables).expect("hash");
    let ok_hash = (0..100).all(|_| {
        let mut p: Vec<usize> = (0..5).collect();
        p.shuffle(&mut rng);
        molecule_hash(&methane.permuted(&p), &tables).is_ok_and(|x| x == h)
    });
    let passed = ok_methane && ok_penta && ok_hash;
    CheckResult {
        name: "metrics sanity",
        passed,
        detail: format!("methane {ok_methane}, pentavalent rejected {ok_penta}, hash stable {ok_hash}"),
    }
}

fn edge_levels() -> CheckResult {
    let x = Matrix::from_f64_rows(&[[0.0, 0.0, 0.0], [2.0, 0.0, 0.0], [5.0, 0.0, 0.0]]);
    let e = build_edges(&x, 2.0);
    let passed = e.local == vec![(0, 1), (1, 0)] && e.global.len() == 4;
    CheckResult { name: "edge levels", passed, detail: format!("{} local, {} global", e.local.len(), e.global.len()) }
}

pub fn run_all() -> Vec<CheckResult> {
    vec![
        edge_levels(),
        egnn_equivariance(),
        dual_score_equivariance(),
        marginal_oracle(),
        posterior_oracle(),
        parameterization_equivalence(),
        ae_gradients(),
        diffusion_gradients(),
        coord_target_chain_rule(),
        metrics_sanity(),
    ]
}
