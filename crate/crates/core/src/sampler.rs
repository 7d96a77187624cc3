//! Ancestral reverse sampling in latent space followed by decoding.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::ParamStore;
use crate::autoencoder::{decode, AeModel, LatentState};
use crate::diffusion::{mu_theta, string_enum, NoiseSchedule, SigmaMode};
use crate::elements::ElementVocab;
use crate::error::{LmdmError, Result};
use crate::geometry::{project_zero_com, Molecule};
use crate::noise::{latent_noise, standard_normal};
use crate::scalar::Scalar;
use crate::score_network::{dual_score, sample_var_noise, var_noise_encode, DualScoreModel};
use crate::tensor::Matrix;
use crate::trainer::normalize_cond;

/// Latent norm above which a trajectory is abandoned.
pub const BLOWUP_NORM: f64 = 1e6;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum VarNoiseSource {
    #[default]
    Normal,
    Uniform,
    Encoder,
}
string_enum!(VarNoiseSource { Normal => "normal", Uniform => "uniform", Encoder => "encoder" });

#[derive(Clone, Debug, PartialEq)]
pub enum NodeCountSource {
    Fixed(usize),
    /// Atom count → number of training molecules with that count.
    Histogram(BTreeMap<usize, u64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleConfig {
    pub n_molecules: usize,
    pub node_count: NodeCountSource,
    pub var_noise_source: VarNoiseSource,
    pub sigma_mode: SigmaMode,
    /// Raw property values; normalized with the training statistics.
    pub cond: Option<Vec<f64>>,
    pub seed: u64,
    pub keep_trace: bool,
}

impl SampleConfig {
    pub fn new(n_molecules: usize, node_count: NodeCountSource, seed: u64) -> Self {
        Self {
            n_molecules,
            node_count,
            var_noise_source: VarNoiseSource::Normal,
            sigma_mode: SigmaMode::BetaTilde,
            cond: None,
            seed,
            keep_trace: false,
        }
    }
}

/// Everything frozen that sampling reads.
#[derive(Clone, Copy, Debug)]
pub struct SampleModels<'a, T> {
    pub ae: &'a AeModel,
    pub ae_store: &'a ParamStore<T>,
    pub score: &'a DualScoreModel,
    pub score_store: &'a ParamStore<T>,
    pub sched: &'a NoiseSchedule,
    pub vocab: &'a ElementVocab,
    pub cond_mean: &'a [f64],
    pub cond_std: &'a [f64],
}

/// Latent states of one trajectory: `z_T` first, `z_0` last.
pub type Trace<T> = Vec<LatentState<T>>;

#[derive(Clone, Debug)]
pub struct SampleOutput<T> {
    pub molecules: Vec<Molecule<T>>,
    /// Index of each molecule in the requested order.
    pub indices: Vec<usize>,
    /// `(index, reason)` of every abandoned trajectory.
    pub rejected: Vec<(usize, String)>,
    /// One per requested molecule when tracing, rejected ones included.
    pub traces: Vec<Trace<T>>,
}

pub fn histogram<T>(mols: &[Molecule<T>]) -> BTreeMap<usize, u64>
where
    T: Scalar,
{
    let mut h = BTreeMap::new();
    for m in mols {
        *h.entry(m.n_atoms()).or_insert(0) += 1;
    }
    h
}

pub fn sample_node_count<R: Rng + ?Sized>(hist: &BTreeMap<usize, u64>, rng: &mut R) -> Result<usize> {
    let total: u64 = hist.values().sum();
    if total == 0 {
        return Err(LmdmError::Empty("node-count histogram"));
    }
    let mut u = rng.random_range(0..total);
    for (&n, &c) in hist {
        if u < c {
            return Ok(n);
        }
        u -= c;
    }
    unreachable!("draw is below the total count")
}

/// Independent streams for molecule `index`: one for the node count and the
/// Gaussian latent draws, one for `η_v`.
pub fn molecule_streams(seed: u64, index: usize) -> (ChaCha8Rng, ChaCha8Rng) {
    let mut main = ChaCha8Rng::seed_from_u64(seed);
    main.set_stream(2 * index as u64);
    let mut eta = ChaCha8Rng::seed_from_u64(seed);
    eta.set_stream(2 * index as u64 + 1);
    (main, eta)
}

fn eta_draw<T: Scalar>(
    models: &SampleModels<'_, T>,
    cfg: &SampleConfig,
    z: &LatentState<T>,
    t: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Matrix<T>> {
    let (n, m) = (z.n_atoms(), models.score.config.var_dim);
    Ok(match cfg.var_noise_source {
        VarNoiseSource::Normal => standard_normal(rng, n, m),
        VarNoiseSource::Uniform => Matrix::from_fn(n, m, |_, _| T::of(rng.random_range(-1.0..1.0))),
        VarNoiseSource::Encoder => {
            let (mu, sigma) = var_noise_encode(models.score_store, models.score, z, t, models.sched)?;
            sample_var_noise(&mu, &sigma, &standard_normal(rng, n, m), models.score.config.var_noise_scale)
        }
    })
}

/// Runs the reverse chain from `z_T`; `eps(n, k)` supplies each step's
/// `N×(3+k)` noise. `Err` when the trajectory blows up or hits degenerate
/// geometry.
#[allow(clippy::too_many_arguments)]
pub fn reverse_chain<T: Scalar>(
    models: &SampleModels<'_, T>,
    cfg: &SampleConfig,
    z_start: LatentState<T>,
    cond: Option<&[f64]>,
    eps: &mut dyn FnMut(usize, usize) -> Matrix<T>,
    eta_rng: &mut ChaCha8Rng,
    trace: &mut Trace<T>,
) -> Result<LatentState<T>> {
    let sched = models.sched;
    let (n, k) = (z_start.n_atoms(), z_start.k());
    let mut z = z_start;
    if cfg.keep_trace {
        trace.push(z.clone());
    }
    for t in (1..=sched.steps()).rev() {
        let eta_v = eta_draw(models, cfg, &z, t, eta_rng)?;
        let (sx, sh) = dual_score(models.score_store, models.score, &z, &eta_v, t, sched, cond)?;
        let s = Matrix::hstack(&[&sx, &sh]);
        let mean = mu_theta(&z.stacked(), &s, t, sched);
        let next = if t > 1 {
            let sigma = T::of(sched.sigma(t, cfg.sigma_mode));
            mean.zip_map(&eps(n, k), |m, e| m + sigma * e)
        } else {
            mean
        };
        let mut state = LatentState::from_stacked(&next);
        state.z_x = project_zero_com(&state.z_x)?;
        let norm = state.stacked().frobenius().as_f64();
        if !(norm <= BLOWUP_NORM) {
            return Err(LmdmError::NonFinite { stage: "sampler", layer: t });
        }
        if cfg.keep_trace {
            trace.push(state.clone());
        }
        z = state;
    }
    Ok(z)
}

/// Decodes a final latent state: argmax element, rounded charge.
pub fn decode_molecule<T: Scalar>(models: &SampleModels<'_, T>, z0: &LatentState<T>) -> Result<Molecule<T>> {
    let out = decode(models.ae_store, models.ae, z0)?;
    let n = z0.n_atoms();
    let mut symbols = Vec::with_capacity(n);
    let mut charges = Vec::with_capacity(n);
    for i in 0..n {
        let row = out.type_logits.row(i);
        let best = (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b });
        symbols.push(models.vocab.symbol(best).to_string());
        charges.push(out.charge.get(i, 0).as_f64().round() as i32);
    }
    Molecule::new(models.vocab, &symbols, out.coords, &charges)
}

pub fn sample_molecules<T: Scalar>(models: &SampleModels<'_, T>, cfg: &SampleConfig) -> Result<SampleOutput<T>> {
    if cfg.n_molecules == 0 {
        return Err(LmdmError::Config("n_molecules must be at least 1".into()));
    }
    let cond = match (&cfg.cond, models.score.config.cond_dim) {
        (None, 0) => None,
        (Some(c), d) if c.len() == d => Some(normalize_cond(c, models.cond_mean, models.cond_std)),
        _ => {
            return Err(LmdmError::Config(format!(
                "model expects {} conditioning values",
                models.score.config.cond_dim
            )))
        }
    };
    let k = models.score.config.k;
    let mut out = SampleOutput { molecules: Vec::new(), indices: Vec::new(), rejected: Vec::new(), traces: Vec::new() };
    for index in 0..cfg.n_molecules {
        let (mut main, mut eta_rng) = molecule_streams(cfg.seed, index);
        let n = match &cfg.node_count {
            NodeCountSource::Fixed(n) if *n >= 1 => *n,
            NodeCountSource::Fixed(_) => return Err(LmdmError::Config("fixed node count must be at least 1".into())),
            NodeCountSource::Histogram(h) => sample_node_count(h, &mut main)?,
        };
        let z_t = LatentState::from_stacked(&latent_noise(&mut main, n, k));
        let mut trace = Vec::new();
        let mut eps = |n: usize, k: usize| latent_noise(&mut main, n, k);
        let result = reverse_chain(models, cfg, z_t, cond.as_deref(), &mut eps, &mut eta_rng, &mut trace)
            .and_then(|z0| decode_molecule(models, &z0));
        if cfg.keep_trace {
            out.traces.push(trace);
        }
        match result {
            Ok(m) => {
                out.molecules.push(m);
                out.indices.push(index);
            }
            Err(e @ (LmdmError::NonFinite { .. } | LmdmError::DegenerateGeometry { .. } | LmdmError::InvalidGeometry(_))) => {
                out.rejected.push((index, e.to_string()))
            }
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}
