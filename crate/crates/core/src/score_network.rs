//! Dual local/global score model with the variational diversity noise encoder.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tape, Var};
use crate::autoencoder::{LatentState, SIGMA_FLOOR};
use crate::diffusion::{string_enum, NoiseSchedule};
use crate::error::{LmdmError, Result};
use crate::graph::{EdgeLevel, GraphBatch};
use crate::invariant_net::{InvariantNet, InvariantNetConfig};
use crate::nn::Linear;
use crate::scalar::Scalar;
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum VarNoiseScale {
    /// `η_v = μ_v + σ_v²·η`
    #[default]
    Squared,
    /// `η_v = μ_v + σ_v·η`
    Linear,
}
string_enum!(VarNoiseScale { Squared => "squared", Linear => "linear" });

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branches {
    Both,
    LocalOnly,
    GlobalOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreConfig {
    pub k: usize,
    pub hidden: usize,
    pub n_layers: usize,
    pub time_dim: usize,
    pub var_dim: usize,
    pub cond_dim: usize,
    pub tau: f64,
    pub var_noise_scale: VarNoiseScale,
}

impl ScoreConfig {
    pub fn new(k: usize) -> Self {
        Self { k, hidden: 32, n_layers: 2, time_dim: 8, var_dim: 2, cond_dim: 0, tau: 2.0, var_noise_scale: VarNoiseScale::Squared }
    }

    pub fn node_input_dim(&self) -> usize {
        self.k + self.time_dim + self.var_dim + self.cond_dim
    }
}

/// Sinusoidal features of `u = t/T ∈ [0, 1]`: `sin(π2^i u), cos(π2^i u)`.
pub fn time_embedding(u: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for i in 0..half {
        let w = std::f64::consts::PI * (1u64 << i) as f64;
        out.push((w * u).sin());
        out.push((w * u).cos());
    }
    if dim % 2 == 1 {
        out.push(u);
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct DualScoreModel {
    pub config: ScoreConfig,
    pub phi_l: InvariantNet,
    pub phi_g: InvariantNet,
    pub phi_v: InvariantNet,
    pub mu_v: Linear,
    pub sigma_v: Linear,
}

/// Everything the score model reads for one (possibly batched) state apart
/// from `η_v`.
#[derive(Clone, Debug)]
pub struct ScoreContext<T> {
    pub z_x: Matrix<T>,
    pub z_h: Matrix<T>,
    /// `N×time_dim`
    pub temb: Matrix<T>,
    /// `N×cond_dim`, already normalized.
    pub cond: Matrix<T>,
    /// Per-node output multiplier.
    pub scale: Matrix<T>,
    pub graph: GraphBatch,
}

impl<T: Scalar> ScoreContext<T> {
    /// Batched context; `t` and `cond` are per molecule.
    pub fn new(
        config: &ScoreConfig,
        z: &LatentState<T>,
        sizes: &[usize],
        t: &[usize],
        sched: &NoiseSchedule,
        cond: Option<&[Vec<f64>]>,
    ) -> Result<Self> {
        let n = z.n_atoms();
        if z.k() != config.k || sizes.iter().sum::<usize>() != n || t.len() != sizes.len() {
            return Err(LmdmError::Shape("score context inputs are inconsistent".into()));
        }
        for &ti in t {
            sched.check_t(ti)?;
        }
        if let Some(c) = cond {
            if c.len() != sizes.len() || c.iter().any(|row| row.len() != config.cond_dim) {
                return Err(LmdmError::Shape(format!("conditioning must have {} values per molecule", config.cond_dim)));
            }
        } else if config.cond_dim > 0 {
            return Err(LmdmError::Shape("model expects a conditioning vector".into()));
        }
        let graph = GraphBatch::new(&z.z_x, sizes, T::of(config.tau));
        let steps = sched.steps() as f64;
        let mut temb = Matrix::zeros(n, config.time_dim);
        let mut condm = Matrix::zeros(n, config.cond_dim);
        let mut scale = Matrix::zeros(n, 1);
        for i in 0..n {
            let m = graph.molecule_of(i);
            for (c, v) in time_embedding(t[m] as f64 / steps, config.time_dim).into_iter().enumerate() {
                temb.set(i, c, T::of(v));
            }
            if let Some(c) = cond {
                for (j, &v) in c[m].iter().enumerate() {
                    condm.set(i, j, T::of(v));
                }
            }
            scale.set(i, 0, T::of(sched.score_scale(t[m])));
        }
        Ok(Self { z_x: z.z_x.clone(), z_h: z.z_h.clone(), temb, cond: condm, scale, graph })
    }
}

impl DualScoreModel {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, config: ScoreConfig, rng: &mut R) -> Self {
        let net_cfg = |in_dim, out| InvariantNetConfig::new(in_dim, config.hidden, config.n_layers, out);
        let phi_l = InvariantNet::new(store, "score.local", net_cfg(config.node_input_dim(), config.k), rng);
        let phi_g = InvariantNet::new(store, "score.global", net_cfg(config.node_input_dim(), config.k), rng);
        let phi_v = InvariantNet::trunk(store, "score.var", net_cfg(config.k + config.time_dim, 0), rng);
        let mu_v = Linear::new(store, "score.var.mu", config.hidden, config.var_dim, true, rng);
        let sigma_v = Linear::new(store, "score.var.sigma", config.hidden, config.var_dim, true, rng);
        Self { config, phi_l, phi_g, phi_v, mu_v, sigma_v }
    }

    /// `(μ_v, σ_v)` from the noisy latent and the time embedding.
    pub fn var_noise_var<T: Scalar>(&self, tape: &mut Tape<'_, T>, ctx: &ScoreContext<T>) -> Result<(Var, Var)> {
        let z_h = tape.constant(ctx.z_h.clone());
        let temb = tape.constant(ctx.temb.clone());
        let input = tape.concat(&[z_h, temb]);
        let (d, _) = crate::graph::edge_geometry(&ctx.z_x, &ctx.graph.all)
            .map_err(|(i, j, distance)| LmdmError::DegenerateGeometry { i, j, distance })?;
        let h = self.phi_v.schnet_var(tape, input, &ctx.z_x, &ctx.graph.all, &d);
        let mu = self.mu_v.forward(tape, h);
        let raw = self.sigma_v.forward(tape, h);
        let sp = tape.softplus(raw);
        let sigma = tape.add_scalar(sp, T::of(SIGMA_FLOOR));
        Ok((mu, sigma))
    }

    pub fn eta_var<T: Scalar>(&self, tape: &mut Tape<'_, T>, mu: Var, sigma: Var, eta: &Matrix<T>) -> Var {
        let e = tape.constant(eta.clone());
        let s = match self.config.var_noise_scale {
            VarNoiseScale::Squared => tape.square(sigma),
            VarNoiseScale::Linear => sigma,
        };
        let n = tape.mul(s, e);
        tape.add(mu, n)
    }

    /// `s = Φ_l + Φ_g`, each branch scaled per node by `ctx.scale`.
    pub fn score_var<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        ctx: &ScoreContext<T>,
        eta_v: Var,
        branches: Branches,
    ) -> Result<(Var, Var)> {
        let z_h = tape.constant(ctx.z_h.clone());
        let temb = tape.constant(ctx.temb.clone());
        let cond = tape.constant(ctx.cond.clone());
        let input = tape.concat(&[z_h, temb, eta_v, cond]);
        let mut parts = Vec::with_capacity(2);
        if branches != Branches::GlobalOnly {
            parts.push(self.phi_l.score_var(tape, input, &ctx.z_x, &ctx.graph.local, EdgeLevel::Local)?);
        }
        if branches != Branches::LocalOnly {
            parts.push(self.phi_g.score_var(tape, input, &ctx.z_x, &ctx.graph.global, EdgeLevel::Global)?);
        }
        let (mut s_x, mut s_h) = parts[0];
        if let Some(&(gx, gh)) = parts.get(1) {
            s_x = tape.add(s_x, gx);
            s_h = tape.add(s_h, gh);
        }
        let scale = tape.constant(ctx.scale.clone());
        Ok((tape.mul_col(s_x, scale), tape.mul_col(s_h, scale)))
    }
}

/// `+KL(N(μ, σ²) ‖ N(0, I))` summed over nodes and dimensions, then divided
/// by `n_molecules`.
pub fn var_noise_kl_var<T: Scalar>(tape: &mut Tape<'_, T>, mu: Var, sigma: Var, n_molecules: usize) -> Var {
    let mu2 = tape.square(mu);
    let s2 = tape.square(sigma);
    let ln_s2 = tape.ln(s2);
    let a = tape.add(mu2, s2);
    let b = tape.sub(a, ln_s2);
    let c = tape.add_scalar(b, -T::one());
    let s = tape.sum(c);
    tape.scale(s, T::of(0.5) / T::of_usize(n_molecules.max(1)))
}

/// One stage-two training batch with all of its randomness drawn up front.
#[derive(Clone, Debug)]
pub struct DiffusionBatch<T> {
    pub z0: LatentState<T>,
    pub sizes: Vec<usize>,
    /// Per molecule.
    pub t: Vec<usize>,
    /// `N×(3+k)`; the coordinate block is centred per molecule.
    pub eps: Matrix<T>,
    /// `N×var_dim` standard normal draw feeding `η_v`.
    pub eta: Matrix<T>,
    /// Normalized conditioning per molecule.
    pub cond: Option<Vec<Vec<f64>>>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DiffusionLossParts {
    pub total: f64,
    pub score: f64,
    pub vae: f64,
}

impl<T: Scalar> DiffusionBatch<T> {
    /// Per-node `ᾱ_t`.
    fn alpha_bar_nodes(&self, sched: &NoiseSchedule) -> Vec<f64> {
        self.sizes.iter().zip(&self.t).flat_map(|(&n, &t)| std::iter::repeat_n(sched.alpha_bar(t), n)).collect()
    }

    /// `z_t = √ᾱ z0 + √(1 − ᾱ) ε`, row by row.
    pub fn noised(&self, sched: &NoiseSchedule) -> LatentState<T> {
        let ab = self.alpha_bar_nodes(sched);
        let z0 = self.z0.stacked();
        let zt = Matrix::from_fn(z0.rows(), z0.cols(), |i, c| {
            T::of(ab[i].sqrt()) * z0.get(i, c) + T::of((1.0 - ab[i]).sqrt()) * self.eps.get(i, c)
        });
        LatentState::from_stacked(&zt)
    }
}

impl DualScoreModel {
    /// Weighted score matching loss plus the `η_v` KL term.
    pub fn loss_var<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        batch: &DiffusionBatch<T>,
        sched: &NoiseSchedule,
        cfg: &crate::diffusion::DiffusionConfig,
    ) -> Result<(Var, [Var; 2])> {
        let n = batch.z0.n_atoms();
        if batch.eps.shape() != (n, 3 + self.config.k) || batch.eta.shape() != (n, self.config.var_dim) {
            return Err(LmdmError::Shape("diffusion batch noise has the wrong shape".into()));
        }
        let z_t = batch.noised(sched);
        let ctx = ScoreContext::new(&self.config, &z_t, &batch.sizes, &batch.t, sched, batch.cond.as_deref())?;
        let (mu, sigma) = self.var_noise_var(tape, &ctx)?;
        let eta_v = self.eta_var(tape, mu, sigma, &batch.eta);
        let (sx, sh) = self.score_var(tape, &ctx, eta_v, Branches::Both)?;

        let ab = batch.alpha_bar_nodes(sched);
        let g = &ctx.graph.all;
        let target_x = crate::diffusion::coord_score_target_with(&z_t.z_x, &batch.z0.z_x, &g.recv, &g.send, &ab)?
            .scale(T::of(cfg.coord_target_scale));
        let target_h = Matrix::from_fn(n, self.config.k, |i, c| {
            -(z_t.z_h.get(i, c) - T::of(ab[i].sqrt()) * batch.z0.z_h.get(i, c)) / T::of(1.0 - ab[i])
        });
        let s = tape.concat(&[sx, sh]);
        let target = tape.constant(Matrix::hstack(&[&target_x, &target_h]));
        let d = tape.sub(s, target);
        let d2 = tape.square(d);
        let weights: Vec<T> = batch
            .sizes
            .iter()
            .zip(&batch.t)
            .flat_map(|(&m, &t)| std::iter::repeat_n(T::of(sched.loss_weight(t, cfg)), m))
            .collect();
        let w = tape.constant(Matrix::from_vec(n, 1, weights));
        let wd2 = tape.mul_col(d2, w);
        let score = tape.mean(wd2);
        let vae = var_noise_kl_var(tape, mu, sigma, batch.sizes.len());
        let total = tape.add(score, vae);
        Ok((total, [score, vae]))
    }
}

pub fn diffusion_batch_loss<T: Scalar>(
    store: &ParamStore<T>,
    model: &DualScoreModel,
    batch: &DiffusionBatch<T>,
    sched: &NoiseSchedule,
    cfg: &crate::diffusion::DiffusionConfig,
) -> Result<DiffusionLossParts> {
    let mut tape = Tape::with_params(store);
    let (total, [score, vae]) = model.loss_var(&mut tape, batch, sched, cfg)?;
    let v = |x: Var| tape.value(x).get(0, 0).as_f64();
    Ok(DiffusionLossParts { total: v(total), score: v(score), vae: v(vae) })
}

fn single_context<T: Scalar>(
    model: &DualScoreModel,
    z: &LatentState<T>,
    t: usize,
    sched: &NoiseSchedule,
    cond: Option<&[f64]>,
) -> Result<ScoreContext<T>> {
    let cond_rows = cond.map(|c| vec![c.to_vec()]);
    ScoreContext::new(&model.config, z, &[z.n_atoms()], &[t], sched, cond_rows.as_deref())
}

/// `(μ_v, σ_v)` for one molecule at step `t`.
pub fn var_noise_encode<T: Scalar>(
    store: &ParamStore<T>,
    model: &DualScoreModel,
    z_t: &LatentState<T>,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<(Matrix<T>, Matrix<T>)> {
    if !(z_t.z_x.all_finite() && z_t.z_h.all_finite()) {
        return Err(LmdmError::NonFinite { stage: "var_noise", layer: 0 });
    }
    let ctx = single_context(model, z_t, t, sched, Some(&vec![0.0; model.config.cond_dim]))?;
    let mut tape = Tape::with_params(store);
    let (mu, sigma) = model.var_noise_var(&mut tape, &ctx)?;
    let out = (tape.value(mu).clone(), tape.value(sigma).clone());
    if !(out.0.all_finite() && out.1.all_finite()) {
        return Err(LmdmError::NonFinite { stage: "var_noise", layer: model.phi_v.convs.len() });
    }
    Ok(out)
}

pub fn sample_var_noise<T: Scalar>(mu: &Matrix<T>, sigma: &Matrix<T>, eta: &Matrix<T>, scale: VarNoiseScale) -> Matrix<T> {
    let spread = match scale {
        VarNoiseScale::Squared => sigma.hadamard(sigma),
        VarNoiseScale::Linear => sigma.clone(),
    };
    mu.add(&spread.hadamard(eta))
}

/// Closed-form KL of one molecule's noise posterior, summed over entries.
pub fn var_noise_kl<T: Scalar>(mu: &Matrix<T>, sigma: &Matrix<T>) -> T {
    let half = T::of(0.5);
    mu.as_slice()
        .iter()
        .zip(sigma.as_slice())
        .map(|(&m, &s)| half * (m * m + s * s - T::one() - (s * s).ln()))
        .sum()
}

/// Coordinate and feature scores of one molecule; edges are built on `z_t.z_x`.
pub fn dual_score<T: Scalar>(
    store: &ParamStore<T>,
    model: &DualScoreModel,
    z_t: &LatentState<T>,
    eta_v: &Matrix<T>,
    t: usize,
    sched: &NoiseSchedule,
    cond: Option<&[f64]>,
) -> Result<(Matrix<T>, Matrix<T>)> {
    dual_score_branches(store, model, z_t, eta_v, t, sched, cond, Branches::Both)
}

#[allow(clippy::too_many_arguments)]
pub fn dual_score_branches<T: Scalar>(
    store: &ParamStore<T>,
    model: &DualScoreModel,
    z_t: &LatentState<T>,
    eta_v: &Matrix<T>,
    t: usize,
    sched: &NoiseSchedule,
    cond: Option<&[f64]>,
    branches: Branches,
) -> Result<(Matrix<T>, Matrix<T>)> {
    if eta_v.shape() != (z_t.n_atoms(), model.config.var_dim) {
        return Err(LmdmError::Shape(format!("eta_v must be {}×{}", z_t.n_atoms(), model.config.var_dim)));
    }
    let ctx = single_context(model, z_t, t, sched, cond)?;
    let mut tape = Tape::with_params(store);
    let eta = tape.constant(eta_v.clone());
    let (sx, sh) = model.score_var(&mut tape, &ctx, eta, branches)?;
    Ok((tape.value(sx).clone(), tape.value(sh).clone()))
}
