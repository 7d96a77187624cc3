//! Two-stage training: the autoencoder first, then the latent score model on
//! a frozen encoder.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tape, Var};
use crate::autoencoder::{AeBatch, AeConfig, AeModel, LatentState};
use crate::diffusion::{DiffusionConfig, NoiseSchedule};
use crate::error::{LmdmError, Result};
use crate::geometry::Molecule;
use crate::hash::fnv1a64;
use crate::noise::{batch_latent_noise, standard_normal};
use crate::optim::Adam;
use crate::scalar::Scalar;
use crate::score_network::{DiffusionBatch, DualScoreModel, ScoreConfig};
use crate::tensor::Matrix;

/// Steps between validation checks.
pub const VALIDATION_EVERY: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub es_patience: usize,
    pub seed: u64,
    pub ae: AeConfig,
    pub score: ScoreConfig,
    pub diffusion: DiffusionConfig,
}

impl TrainConfig {
    pub fn new(vocab_size: usize, k: usize) -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 32,
            max_steps: 1000,
            es_patience: 5,
            seed: 0,
            ae: AeConfig::new(vocab_size, k),
            score: ScoreConfig::new(k),
            diffusion: DiffusionConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(LmdmError::Config(m.into()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.batch_size == 0 || self.es_patience == 0 {
            return bad("batch_size and es_patience must be positive");
        }
        if self.ae.k == 0 || self.ae.k != self.score.k {
            return bad("k must be positive and shared by both stages");
        }
        if !(self.ae.tau > 0.0 && self.score.tau > 0.0) {
            return bad("tau must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Ae,
    Diffusion,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Ae => "ae",
            Stage::Diffusion => "diffusion",
        })
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub stage: Stage,
    pub losses: BTreeMap<String, f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopReason {
    MaxSteps,
    EarlyStop,
    Diverged,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub store: ParamStore<T>,
    pub log: Vec<LogRecord>,
    pub stop: StopReason,
    pub steps_run: usize,
}

/// Deterministic 90/10 split on a hash of the molecule index. Falls back to
/// validating on the training set when the hash leaves one side empty.
pub fn split_indices(n: usize) -> (Vec<usize>, Vec<usize>) {
    let (val, train): (Vec<usize>, Vec<usize>) = (0..n).partition(|&i| fnv1a64(&(i as u64).to_le_bytes()) % 10 == 0);
    if val.is_empty() || train.is_empty() {
        ((0..n).collect(), (0..n).collect())
    } else {
        (train, val)
    }
}

/// Draws a batch of molecules sharing one atom count, choosing the count in
/// proportion to how many pool entries have it.
fn draw_batch<R: Rng + ?Sized>(rng: &mut R, pool: &[usize], sizes: &[usize], batch_size: usize) -> Vec<usize> {
    let anchor = pool[rng.random_range(0..pool.len())];
    let same: Vec<usize> = pool.iter().copied().filter(|&i| sizes[i] == sizes[anchor]).collect();
    let take = batch_size.min(same.len());
    let mut chosen: Vec<usize> = sample_indices(rng, same.len(), take).into_iter().map(|j| same[j]).collect();
    chosen.sort_unstable();
    chosen
}

fn record(step: usize, stage: Stage, parts: &[(&str, f64)]) -> LogRecord {
    LogRecord { step, stage, losses: parts.iter().map(|&(k, v)| (k.to_string(), v)).collect() }
}

/// Deterministic reconstruction loss (coordinates, types, charges) with the
/// latent fixed at the posterior mean, averaged over `idx`.
pub fn ae_validation_loss<T: Scalar>(
    store: &ParamStore<T>,
    model: &AeModel,
    mols: &[Molecule<T>],
    idx: &[usize],
) -> Result<f64> {
    let mut total = 0.0;
    for &i in idx {
        let batch = AeBatch::new(&[&mols[i]], model.config.tau)?;
        let eps = Matrix::zeros(batch.n_nodes(), 3 + model.config.k);
        let mut tape = Tape::with_params(store);
        let (_, [coord, ce, charge, _]) = model.loss_var(&mut tape, &batch, &eps);
        total += [coord, ce, charge].iter().map(|&v| tape.value(v).get(0, 0).as_f64()).sum::<f64>();
    }
    Ok(total / idx.len().max(1) as f64)
}

/// Stage one. Returns the parameters with the best validation loss.
pub fn train_autoencoder<T: Scalar>(
    mols: &[Molecule<T>],
    model: &AeModel,
    init: ParamStore<T>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if mols.is_empty() {
        return Err(LmdmError::Empty("training set"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let sizes: Vec<usize> = mols.iter().map(|m| m.n_atoms()).collect();
    let (train, val) = split_indices(mols.len());
    let mut store = init;
    let mut opt = Adam::new(&store, T::of(cfg.learning_rate));
    let mut log = Vec::new();
    let mut best = (f64::INFINITY, store.clone());
    let mut stale = 0;
    let mut stop = StopReason::MaxSteps;
    let mut steps_run = 0;

    for step in 1..=cfg.max_steps {
        let idx = draw_batch(&mut rng, &train, &sizes, cfg.batch_size);
        let refs: Vec<&Molecule<T>> = idx.iter().map(|&i| &mols[i]).collect();
        let batch = AeBatch::new(&refs, model.config.tau)?;
        let eps = batch_latent_noise(&mut rng, &batch.graph.sizes, model.config.k);
        let (vals, grads) = {
            let mut tape = Tape::with_params(&store);
            let (total, parts) = model.loss_var(&mut tape, &batch, &eps);
            let v = |x: Var| tape.value(x).get(0, 0).as_f64();
            let vals = [v(total), v(parts[0]), v(parts[1]), v(parts[2]), v(parts[3])];
            (vals, tape.backward(total))
        };
        if !(vals.iter().all(|v| v.is_finite()) && grads.all_finite()) {
            stop = StopReason::Diverged;
            break;
        }
        opt.step(&mut store, &grads);
        steps_run = step;
        log.push(record(
            step,
            Stage::Ae,
            &[("total", vals[0]), ("coord", vals[1]), ("type_ce", vals[2]), ("charge", vals[3]), ("kl", vals[4])],
        ));
        if step % VALIDATION_EVERY == 0 || step == cfg.max_steps {
            let v = ae_validation_loss(&store, model, mols, &val)?;
            log.push(record(step, Stage::Ae, &[("val_recon", v)]));
            if v < best.0 {
                best = (v, store.clone());
                stale = 0;
            } else {
                stale += 1;
                if model.config.reg_mode == crate::autoencoder::RegMode::Es && stale >= cfg.es_patience {
                    stop = StopReason::EarlyStop;
                    break;
                }
            }
        }
    }
    let store = if best.0.is_finite() {
        best.1
    } else if stop == StopReason::Diverged || steps_run == 0 {
        store
    } else {
        best.1
    };
    Ok(TrainOutcome { store, log, stop, steps_run })
}

/// FNV-1a over the names and values of every encoder parameter.
pub fn encoder_checksum<T: Scalar>(store: &ParamStore<T>) -> u64 {
    let mut bytes = Vec::new();
    for (name, m) in store.iter() {
        if name.starts_with(AeModel::encoder_param_prefix()) {
            bytes.extend_from_slice(name.as_bytes());
            for v in m.as_slice() {
                bytes.extend_from_slice(&v.as_f64().to_le_bytes());
            }
        }
    }
    fnv1a64(&bytes)
}

/// Mean and standard deviation of each conditioning column; a constant column
/// gets unit spread.
pub fn cond_stats(cond: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let dim = cond.first().map_or(0, Vec::len);
    let n = cond.len().max(1) as f64;
    let mean: Vec<f64> = (0..dim).map(|c| cond.iter().map(|r| r[c]).sum::<f64>() / n).collect();
    let std = (0..dim)
        .map(|c| {
            let var = cond.iter().map(|r| (r[c] - mean[c]).powi(2)).sum::<f64>() / n;
            if var > 0.0 {
                var.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    (mean, std)
}

pub fn normalize_cond(row: &[f64], mean: &[f64], std: &[f64]) -> Vec<f64> {
    row.iter().zip(mean).zip(std).map(|((v, m), s)| (v - m) / s).collect()
}

/// Posterior `(μ, σ)` of every molecule under the frozen encoder, stacked as
/// `N×(3+k)` matrices.
fn encode_all<T: Scalar>(ae_store: &ParamStore<T>, ae: &AeModel, mols: &[Molecule<T>]) -> Result<Vec<(Matrix<T>, Matrix<T>)>> {
    mols.iter()
        .map(|m| {
            let p = crate::autoencoder::encode(ae_store, ae, m)?;
            Ok((Matrix::hstack(&[&p.mu_x, &p.mu_h]), Matrix::hstack(&[&p.sigma_x, &p.sigma_h])))
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct DiffusionOutcome<T> {
    pub train: TrainOutcome<T>,
    pub cond_mean: Vec<f64>,
    pub cond_std: Vec<f64>,
}

/// Stage two. `cond`, when given, holds one raw property vector per molecule.
#[allow(clippy::too_many_arguments)]
pub fn train_diffusion<T: Scalar>(
    mols: &[Molecule<T>],
    cond: Option<&[Vec<f64>]>,
    ae: &AeModel,
    ae_store: &ParamStore<T>,
    model: &DualScoreModel,
    init: ParamStore<T>,
    cfg: &TrainConfig,
) -> Result<DiffusionOutcome<T>> {
    cfg.validate()?;
    if mols.is_empty() {
        return Err(LmdmError::Empty("training set"));
    }
    if let Some(c) = cond {
        if c.len() != mols.len() {
            return Err(LmdmError::Shape("one conditioning row per molecule is required".into()));
        }
    }
    let checksum = encoder_checksum(ae_store);
    let sched = cfg.diffusion.schedule()?;
    let (cond_mean, cond_std) = cond.map(cond_stats).unwrap_or_default();
    let posteriors = encode_all(ae_store, ae, mols)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let sizes: Vec<usize> = mols.iter().map(|m| m.n_atoms()).collect();
    let pool: Vec<usize> = (0..mols.len()).collect();
    let mut store = init;
    let mut opt = Adam::new(&store, T::of(cfg.learning_rate));
    let mut log = Vec::new();
    let mut stop = StopReason::MaxSteps;
    let mut steps_run = 0;

    for step in 1..=cfg.max_steps {
        let idx = draw_batch(&mut rng, &pool, &sizes, cfg.batch_size);
        let batch = draw_diffusion_batch(&mut rng, &idx, &posteriors, cond, &cond_mean, &cond_std, model, &sched);
        let (vals, grads) = {
            let mut tape = Tape::with_params(&store);
            let (total, [score, vae]) = model.loss_var(&mut tape, &batch, &sched, &cfg.diffusion)?;
            let v = |x: Var| tape.value(x).get(0, 0).as_f64();
            ([v(total), v(score), v(vae)], tape.backward(total))
        };
        if !(vals.iter().all(|v| v.is_finite()) && grads.all_finite()) {
            stop = StopReason::Diverged;
            break;
        }
        opt.step(&mut store, &grads);
        steps_run = step;
        log.push(record(step, Stage::Diffusion, &[("total", vals[0]), ("score", vals[1]), ("vae", vals[2])]));
    }
    if encoder_checksum(ae_store) != checksum {
        return Err(LmdmError::Config("encoder parameters changed during diffusion training".into()));
    }
    Ok(DiffusionOutcome { train: TrainOutcome { store, log, stop, steps_run }, cond_mean, cond_std })
}

#[allow(clippy::too_many_arguments)]
fn draw_diffusion_batch<T: Scalar, R: Rng + ?Sized>(
    rng: &mut R,
    idx: &[usize],
    posteriors: &[(Matrix<T>, Matrix<T>)],
    cond: Option<&[Vec<f64>]>,
    cond_mean: &[f64],
    cond_std: &[f64],
    model: &DualScoreModel,
    sched: &NoiseSchedule,
) -> DiffusionBatch<T> {
    let k = model.config.k;
    let sizes: Vec<usize> = idx.iter().map(|&i| posteriors[i].0.rows()).collect();
    let e0 = batch_latent_noise(rng, &sizes, k);
    let mu = Matrix::vstack(&idx.iter().map(|&i| &posteriors[i].0).collect::<Vec<_>>());
    let sigma = Matrix::vstack(&idx.iter().map(|&i| &posteriors[i].1).collect::<Vec<_>>());
    let z0 = LatentState::from_stacked(&mu.add(&sigma.hadamard(&e0)));
    let t: Vec<usize> = idx.iter().map(|_| rng.random_range(1..=sched.steps())).collect();
    let eps = batch_latent_noise(rng, &sizes, k);
    let eta = standard_normal(rng, mu.rows(), model.config.var_dim);
    let cond = cond.map(|c| idx.iter().map(|&i| normalize_cond(&c[i], cond_mean, cond_std)).collect());
    DiffusionBatch { z0, sizes, t, eps, eta, cond }
}

/// Probes skip entries whose analytic gradient is below this; one rounding
/// step of an O(1) loss already moves a central difference by ~2e-11.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Largest relative error `|analytic − numeric|/(|numeric| + 1e-8)` over
/// `n_probes` randomly chosen parameters, using central differences with step
/// `1e-5`. Returns 0 when no gradient clears [`GRAD_CHECK_FLOOR`].
pub fn grad_check<T, F, R>(store: &ParamStore<T>, loss: F, n_probes: usize, rng: &mut R) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut Tape<'_, T>) -> Result<Var>,
    R: Rng + ?Sized,
{
    let grads = {
        let mut tape = Tape::with_params(store);
        let out = loss(&mut tape)?;
        tape.backward(out)
    };
    let candidates: Vec<usize> = (0..store.num_scalars())
        .filter(|&k| {
            let (id, off) = store.flat_locate(k);
            grads.get(id).as_slice()[off].as_f64().abs() >= GRAD_CHECK_FLOOR
        })
        .collect();
    if candidates.is_empty() {
        return Ok(0.0);
    }
    let eval = |s: &ParamStore<T>| -> Result<f64> {
        let mut tape = Tape::with_params(s);
        let out = loss(&mut tape)?;
        Ok(tape.value(out).get(0, 0).as_f64())
    };
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut probe = store.clone();
    for _ in 0..n_probes {
        let (id, off) = store.flat_locate(candidates[rng.random_range(0..candidates.len())]);
        let orig = store.get(id).as_slice()[off];
        probe.get_mut(id).as_mut_slice()[off] = orig + T::of(h);
        let up = eval(&probe)?;
        probe.get_mut(id).as_mut_slice()[off] = orig - T::of(h);
        let down = eval(&probe)?;
        probe.get_mut(id).as_mut_slice()[off] = orig;
        let numeric = (up - down) / (2.0 * h);
        let analytic = grads.get(id).as_slice()[off].as_f64();
        worst = worst.max((analytic - numeric).abs() / (numeric.abs() + 1e-8));
    }
    Ok(worst)
}
