//! Equivariant variational autoencoder mapping molecules to per-atom latent
//! points `(z_x, z_h)` and back.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softplus, ParamStore, Tape, Var};
use crate::diffusion::string_enum;
use crate::egnn::{egnn_forward, EgnnStack};
use crate::error::{LmdmError, Result};
use crate::geometry::{project_zero_com, Molecule};
use crate::graph::GraphBatch;
use crate::nn::Linear;
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Floor added to every softplus standard deviation.
pub const SIGMA_FLOOR: f64 = 1e-5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum RegMode {
    Kl,
    #[default]
    Es,
}
string_enum!(RegMode { Kl => "kl", Es => "es" });

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AeConfig {
    pub vocab_size: usize,
    pub k: usize,
    pub hidden: usize,
    pub n_layers: usize,
    pub tau: f64,
    pub reg_mode: RegMode,
    pub kl_weight: f64,
}

impl AeConfig {
    pub fn new(vocab_size: usize, k: usize) -> Self {
        Self { vocab_size, k, hidden: 32, n_layers: 3, tau: 2.0, reg_mode: RegMode::Es, kl_weight: 1.0 }
    }

    pub fn feature_dim(&self) -> usize {
        self.vocab_size + 1
    }
}

/// Per-atom latent points: equivariant `z_x` (`N×3`) and invariant `z_h` (`N×k`).
#[derive(Clone, Debug, PartialEq)]
pub struct LatentState<T> {
    pub z_x: Matrix<T>,
    pub z_h: Matrix<T>,
}

impl<T: Scalar> LatentState<T> {
    pub fn k(&self) -> usize {
        self.z_h.cols()
    }

    pub fn n_atoms(&self) -> usize {
        self.z_x.rows()
    }

    /// `[z_x | z_h]` as one `N×(3+k)` matrix.
    pub fn stacked(&self) -> Matrix<T> {
        Matrix::hstack(&[&self.z_x, &self.z_h])
    }

    pub fn from_stacked(m: &Matrix<T>) -> Self {
        Self { z_x: m.cols_range(0, 3), z_h: m.cols_range(3, m.cols()) }
    }
}

/// Posterior parameters produced by the encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct Posterior<T> {
    pub mu_x: Matrix<T>,
    pub mu_h: Matrix<T>,
    pub sigma_x: Matrix<T>,
    pub sigma_h: Matrix<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decoded<T> {
    pub coords: Matrix<T>,
    pub type_logits: Matrix<T>,
    pub charge: Matrix<T>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AeLossParts {
    pub total: f64,
    pub coord: f64,
    pub type_ce: f64,
    pub charge: f64,
    pub kl: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AeModel {
    pub config: AeConfig,
    pub encoder: EgnnStack,
    pub enc_mu_h: Linear,
    pub enc_sigma_h: Linear,
    pub enc_sigma_x: Linear,
    pub decoder: EgnnStack,
    pub dec_type: Linear,
    pub dec_charge: Linear,
}

pub struct EncodeVars {
    pub mu_x: Var,
    pub mu_h: Var,
    pub sigma_x: Var,
    pub sigma_h: Var,
}

pub struct DecodeVars {
    pub coords: Var,
    pub logits: Var,
    pub charge: Var,
}

impl AeModel {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, config: AeConfig, rng: &mut R) -> Self {
        let (f, h, k) = (config.feature_dim(), config.hidden, config.k);
        let encoder = EgnnStack::new(store, "ae.enc", f, h, config.n_layers, rng);
        let eh = encoder.out_dim();
        let enc_mu_h = Linear::new(store, "ae.enc.mu_h", eh, k, true, rng);
        let enc_sigma_h = Linear::new(store, "ae.enc.sigma_h", eh, k, true, rng);
        let enc_sigma_x = Linear::new(store, "ae.enc.sigma_x", eh, 1, true, rng);
        let decoder = EgnnStack::new(store, "ae.dec", k, h, config.n_layers, rng);
        let dh = decoder.out_dim();
        let dec_type = Linear::new(store, "ae.dec.type", dh, config.vocab_size, true, rng);
        let dec_charge = Linear::new(store, "ae.dec.charge", dh, 1, true, rng);
        Self { config, encoder, enc_mu_h, enc_sigma_h, enc_sigma_x, decoder, dec_type, dec_charge }
    }

    /// Names of every encoder parameter (stack and heads).
    pub fn encoder_param_prefix() -> &'static str {
        "ae.enc"
    }

    fn sigma_head<T: Scalar>(&self, tape: &mut Tape<'_, T>, head: &Linear, h: Var) -> Var {
        let raw = head.forward(tape, h);
        let sp = tape.softplus(raw);
        tape.add_scalar(sp, T::of(SIGMA_FLOOR))
    }

    fn encoder_heads<T: Scalar>(&self, tape: &mut Tape<'_, T>, xo: Var, ho: Var, graph: &GraphBatch) -> EncodeVars {
        let seg = graph.segments.clone();
        let mu_x = tape.center_segments(xo, seg.clone());
        let mu_h = self.enc_mu_h.forward(tape, ho);
        let sigma_h = self.sigma_head(tape, &self.enc_sigma_h, ho);
        let sx = self.sigma_head(tape, &self.enc_sigma_x, ho);
        let sx = tape.segment_mean(sx, seg.clone());
        let sx = tape.segment_broadcast(sx, seg);
        let sigma_x = tape.repeat_cols(sx, 3);
        EncodeVars { mu_x, mu_h, sigma_x, sigma_h }
    }

    /// `coords` must already be centred per molecule; `graph` is built on them.
    pub fn encode_var<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        coords: &Matrix<T>,
        features: &Matrix<T>,
        graph: &GraphBatch,
    ) -> EncodeVars {
        let x = tape.constant(coords.clone());
        let h = tape.constant(features.clone());
        let (xo, ho) = self.encoder.forward(tape, x, h, graph);
        self.encoder_heads(tape, xo, ho, graph)
    }

    pub fn decode_var<T: Scalar>(&self, tape: &mut Tape<'_, T>, z_x: Var, z_h: Var, sizes: &[usize]) -> DecodeVars {
        let graph = GraphBatch::new(tape.value(z_x), sizes, T::of(self.config.tau));
        let (xo, ho) = self.decoder.forward(tape, z_x, z_h, &graph);
        let logits = self.dec_type.forward(tape, ho);
        let charge = self.dec_charge.forward(tape, ho);
        DecodeVars { coords: xo, logits, charge }
    }

    /// Full training objective for a batch of centred molecules stacked
    /// row-wise; `eps` is `N×(3+k)` standard normal noise whose coordinate
    /// block is already centred per molecule.
    pub fn loss_var<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        batch: &AeBatch<T>,
        eps: &Matrix<T>,
    ) -> (Var, [Var; 4]) {
        let enc = self.encode_var(tape, &batch.coords, &batch.features, &batch.graph);
        let k = self.config.k;
        let ex = tape.constant(eps.cols_range(0, 3));
        let eh = tape.constant(eps.cols_range(3, 3 + k));
        let nx = tape.mul(enc.sigma_x, ex);
        let z_x = tape.add(enc.mu_x, nx);
        let nh = tape.mul(enc.sigma_h, eh);
        let z_h = tape.add(enc.mu_h, nh);
        let dec = self.decode_var(tape, z_x, z_h, &batch.graph.sizes);

        let target_x = tape.constant(batch.coords.clone());
        let dx = tape.sub(dec.coords, target_x);
        let dx2 = tape.square(dx);
        let coord = tape.mean(dx2);
        let ce = tape.cross_entropy(dec.logits, batch.types.clone());
        let type_ce = tape.mean(ce);
        let target_c = tape.constant(batch.charges.clone());
        let dc = tape.sub(dec.charge, target_c);
        let dc2 = tape.square(dc);
        let charge = tape.mean(dc2);
        let kl = kl_var(tape, &[(enc.mu_x, enc.sigma_x), (enc.mu_h, enc.sigma_h)]);

        let mut total = tape.add(coord, type_ce);
        total = tape.add(total, charge);
        if self.config.reg_mode == RegMode::Kl {
            let w = tape.scale(kl, T::of(self.config.kl_weight));
            total = tape.add(total, w);
        }
        (total, [coord, type_ce, charge, kl])
    }
}

/// Mean over all latent elements of `½(μ² + σ² − 1 − ln σ²)`.
fn kl_var<T: Scalar>(tape: &mut Tape<'_, T>, blocks: &[(Var, Var)]) -> Var {
    let mut total: Option<Var> = None;
    let mut count = 0;
    for &(mu, sigma) in blocks {
        count += tape.value(mu).len();
        let mu2 = tape.square(mu);
        let s2 = tape.square(sigma);
        let ln_s2 = tape.ln(s2);
        let a = tape.add(mu2, s2);
        let b = tape.sub(a, ln_s2);
        let c = tape.add_scalar(b, -T::one());
        let s = tape.sum(c);
        total = Some(match total {
            Some(t) => tape.add(t, s),
            None => s,
        });
    }
    let t = total.expect("at least one block");
    tape.scale(t, T::of(0.5) / T::of_usize(count.max(1)))
}

/// Molecules of a batch stacked row-wise with their targets.
#[derive(Clone, Debug)]
pub struct AeBatch<T> {
    pub coords: Matrix<T>,
    pub features: Matrix<T>,
    pub types: Rc<[usize]>,
    pub charges: Matrix<T>,
    pub graph: GraphBatch,
}

impl<T: Scalar> AeBatch<T> {
    /// Centres each molecule and stacks them.
    pub fn new(mols: &[&Molecule<T>], tau: f64) -> Result<Self> {
        if mols.is_empty() {
            return Err(LmdmError::Empty("batch"));
        }
        let centred: Vec<Matrix<T>> = mols.iter().map(|m| project_zero_com(&m.coords)).collect::<Result<_>>()?;
        let coords = Matrix::vstack(&centred.iter().collect::<Vec<_>>());
        let features = Matrix::vstack(&mols.iter().map(|m| &m.features).collect::<Vec<_>>());
        let types: Vec<usize> = mols.iter().flat_map(|m| m.type_indices()).collect();
        let charge_vals: Vec<T> = mols.iter().flat_map(|m| m.charges()).collect();
        let sizes: Vec<usize> = mols.iter().map(|m| m.n_atoms()).collect();
        let graph = GraphBatch::new(&coords, &sizes, T::of(tau));
        Ok(Self {
            coords,
            features,
            types: types.into(),
            charges: Matrix::from_vec(charge_vals.len(), 1, charge_vals),
            graph,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.coords.rows()
    }
}

fn check_finite<T: Scalar>(m: &Matrix<T>, stage: &'static str, layer: usize) -> Result<()> {
    if m.all_finite() {
        Ok(())
    } else {
        Err(LmdmError::NonFinite { stage, layer })
    }
}

/// Posterior parameters of one molecule; coordinates are centred first.
pub fn encode<T: Scalar>(store: &ParamStore<T>, model: &AeModel, mol: &Molecule<T>) -> Result<Posterior<T>> {
    if mol.features.cols() != model.config.feature_dim() {
        return Err(LmdmError::Shape(format!(
            "molecule feature width {} does not match the model's {}",
            mol.features.cols(),
            model.config.feature_dim()
        )));
    }
    let coords = project_zero_com(&mol.coords)?;
    let graph = GraphBatch::single(&coords, T::of(model.config.tau));
    let (xo, ho) = egnn_forward(store, &model.encoder, &coords, &mol.features, &graph)?;
    let mut tape = Tape::with_params(store);
    let (xv, hv) = (tape.constant(xo), tape.constant(ho));
    let e = model.encoder_heads(&mut tape, xv, hv, &graph);
    let post = Posterior {
        mu_x: tape.value(e.mu_x).clone(),
        mu_h: tape.value(e.mu_h).clone(),
        sigma_x: tape.value(e.sigma_x).clone(),
        sigma_h: tape.value(e.sigma_h).clone(),
    };
    let heads = model.encoder.n_layers();
    check_finite(&post.mu_h, "encode", heads)?;
    check_finite(&post.sigma_h, "encode", heads)?;
    check_finite(&post.sigma_x, "encode", heads)?;
    Ok(post)
}

/// `z = μ + σ ⊙ ε` with the coordinate block of `ε` centred first.
pub fn reparameterize<T: Scalar>(post: &Posterior<T>, eps: &Matrix<T>) -> Result<LatentState<T>> {
    let n = post.mu_x.rows();
    let k = post.mu_h.cols();
    if eps.shape() != (n, 3 + k) {
        return Err(LmdmError::Shape(format!("noise {:?} for latent {n}×{}", eps.shape(), 3 + k)));
    }
    let ex = project_zero_com(&eps.cols_range(0, 3))?;
    let eh = eps.cols_range(3, 3 + k);
    Ok(LatentState {
        z_x: post.mu_x.add(&post.sigma_x.hadamard(&ex)),
        z_h: post.mu_h.add(&post.sigma_h.hadamard(&eh)),
    })
}

pub fn decode<T: Scalar>(store: &ParamStore<T>, model: &AeModel, z: &LatentState<T>) -> Result<Decoded<T>> {
    if z.k() != model.config.k || z.z_h.rows() != z.z_x.rows() {
        return Err(LmdmError::Shape(format!("latent width {} does not match k = {}", z.k(), model.config.k)));
    }
    if !(z.z_x.all_finite() && z.z_h.all_finite()) {
        return Err(LmdmError::NonFinite { stage: "decode", layer: 0 });
    }
    let graph = GraphBatch::single(&z.z_x, T::of(model.config.tau));
    let (xo, ho) = egnn_forward(store, &model.decoder, &z.z_x, &z.z_h, &graph)?;
    let mut tape = Tape::with_params(store);
    let hv = tape.constant(ho);
    let logits = model.dec_type.forward(&mut tape, hv);
    let charge = model.dec_charge.forward(&mut tape, hv);
    let out = Decoded { coords: xo, type_logits: tape.value(logits).clone(), charge: tape.value(charge).clone() };
    check_finite(&out.type_logits, "decode", model.decoder.n_layers())?;
    Ok(out)
}

/// Closed-form `KL(N(μ, σ²) ‖ N(0, 1))` averaged over elements.
pub fn gaussian_kl_mean<T: Scalar>(mu: &[T], sigma: &[T]) -> T {
    let half = T::of(0.5);
    let total: T = mu
        .iter()
        .zip(sigma)
        .map(|(&m, &s)| half * (m * m + s * s - T::one() - (s * s).ln()))
        .sum();
    total / T::of_usize(mu.len().max(1))
}

/// Reconstruction loss plus the optional KL penalty; `mol` is compared after
/// centring.
pub fn ae_loss<T: Scalar>(
    mol: &Molecule<T>,
    decoded: &Decoded<T>,
    post: &Posterior<T>,
    reg_mode: RegMode,
    kl_weight: T,
) -> Result<(T, AeLossParts)> {
    let target = project_zero_com(&mol.coords)?;
    if decoded.coords.shape() != target.shape() || decoded.type_logits.rows() != mol.n_atoms() {
        return Err(LmdmError::Shape("decoded output does not match the molecule".into()));
    }
    let n = mol.n_atoms();
    let coord = decoded.coords.sub(&target).as_slice().iter().map(|&d| d * d).sum::<T>() / T::of_usize(3 * n);
    let types = mol.type_indices();
    let type_ce = (0..n)
        .map(|i| {
            let row = decoded.type_logits.row(i);
            crate::autodiff::log_sum_exp(row) - row[types[i]]
        })
        .sum::<T>()
        / T::of_usize(n);
    let charges = mol.charges();
    let charge = (0..n).map(|i| (decoded.charge.get(i, 0) - charges[i]).powi(2)).sum::<T>() / T::of_usize(n);
    let mu: Vec<T> = post.mu_x.as_slice().iter().chain(post.mu_h.as_slice()).copied().collect();
    let sigma: Vec<T> = post.sigma_x.as_slice().iter().chain(post.sigma_h.as_slice()).copied().collect();
    let kl = gaussian_kl_mean(&mu, &sigma);
    let mut total = coord + type_ce + charge;
    if reg_mode == RegMode::Kl {
        total += kl_weight * kl;
    }
    let parts = AeLossParts {
        total: total.as_f64(),
        coord: coord.as_f64(),
        type_ce: type_ce.as_f64(),
        charge: charge.as_f64(),
        kl: kl.as_f64(),
    };
    Ok((total, parts))
}

/// Softplus with the floor, for use outside a tape.
pub fn floored_softplus<T: Scalar>(x: T) -> T {
    softplus(x) + T::of(SIGMA_FLOOR)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::elements::ElementVocab;
    use crate::geometry::{random_rotation, rigid_transform, rotate_rows};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn perturb(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            for v in store.get_mut(id).as_mut_slice() {
                *v += rng.random_range(-0.2..0.2);
            }
        }
    }

    pub(crate) fn water_like() -> Molecule<f64> {
        let vocab = ElementVocab::default();
        let coords = Matrix::from_f64_rows(&[[0.0, 0.0, 0.1], [0.96, 0.0, 0.0], [-0.24, 0.93, 0.0]]);
        Molecule::new(&vocab, &["O", "H", "H"], coords, &[0, 0, 0]).unwrap()
    }

    fn model(seed: u64, k: usize) -> (ParamStore<f64>, AeModel) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut cfg = AeConfig::new(5, k);
        cfg.hidden = 8;
        cfg.n_layers = 2;
        let m = AeModel::new(&mut store, cfg, &mut rng);
        perturb(&mut store, &mut rng);
        (store, m)
    }

    #[test]
    fn encoder_is_equivariant_and_com_free() {
        let (store, m) = model(1, 2);
        let mol = water_like();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let post = encode(&store, &m, &mol).unwrap();
        assert!(post.mu_x.col_sums().max_abs() < 1e-12);
        let r: Matrix<f64> = random_rotation(&mut rng);
        let moved = mol.transformed(&r, &[1.0, 2.0, -3.0]);
        let p2 = encode(&store, &m, &moved).unwrap();
        assert!(p2.mu_x.sub(&rotate_rows(&post.mu_x, &r)).max_abs() < 1e-9);
        assert!(p2.mu_h.sub(&post.mu_h).max_abs() < 1e-9);
        assert!(p2.sigma_h.sub(&post.sigma_h).max_abs() < 1e-9);
        assert!(p2.sigma_x.sub(&post.sigma_x).max_abs() < 1e-9);
        assert!(post.sigma_h.as_slice().iter().all(|&s| s >= SIGMA_FLOOR));
    }

    #[test]
    fn encoder_is_permutation_equivariant() {
        let (store, m) = model(2, 1);
        let mol = water_like();
        let perm = [2, 0, 1];
        let a = encode(&store, &m, &mol).unwrap();
        let b = encode(&store, &m, &mol.permuted(&perm)).unwrap();
        assert!(b.mu_x.sub(&a.mu_x.gather_rows(&perm)).max_abs() < 1e-12);
        assert!(b.mu_h.sub(&a.mu_h.gather_rows(&perm)).max_abs() < 1e-12);
    }

    #[test]
    fn reparameterize_examples() {
        let (store, m) = model(3, 2);
        let post = encode(&store, &m, &water_like()).unwrap();
        let z = reparameterize(&post, &Matrix::zeros(3, 5)).unwrap();
        assert_eq!((z.z_x.clone(), z.z_h.clone()), (post.mu_x.clone(), post.mu_h.clone()));
        let zero_sigma = Posterior { sigma_x: Matrix::zeros(3, 3), sigma_h: Matrix::zeros(3, 2), ..post.clone() };
        let z = reparameterize(&zero_sigma, &Matrix::filled(3, 5, 0.7)).unwrap();
        assert_eq!(z.z_h, post.mu_h);
        assert!(z.z_x.sub(&post.mu_x).max_abs() == 0.0);
        let z = reparameterize(&post, &Matrix::from_fn(3, 5, |i, j| (i * 5 + j) as f64 * 0.1)).unwrap();
        assert!(z.z_x.col_sums().max_abs() < 1e-12);
    }

    #[test]
    fn reparameterize_monte_carlo_moments() {
        let post: Posterior<f64> = Posterior {
            mu_x: Matrix::zeros(1, 3),
            mu_h: Matrix::from_f64_rows(&[[0.7]]),
            sigma_x: Matrix::zeros(1, 3),
            sigma_h: Matrix::from_f64_rows(&[[1.3]]),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 100_000;
        let (mut s, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let eps = Matrix::from_fn(1, 4, |_, _| rng.sample(StandardNormal));
            let v = reparameterize(&post, &eps).unwrap().z_h.get(0, 0);
            s += v;
            s2 += v * v;
        }
        let mean = s / n as f64;
        let sd = (s2 / n as f64 - mean * mean).sqrt();
        assert!((mean - 0.7).abs() <= 3.0 * 1.3 / (n as f64).sqrt());
        assert!((sd - 1.3).abs() <= 3.0 * 1.3 / (2.0 * (n - 1) as f64).sqrt());
    }

    #[test]
    fn decoder_is_equivariant() {
        let (store, m) = model(5, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let z = LatentState {
            z_x: project_zero_com(&Matrix::from_fn(4, 3, |_, _| rng.random_range(-1.0..1.0))).unwrap(),
            z_h: Matrix::from_fn(4, 2, |_, _| rng.random_range(-1.0..1.0)),
        };
        let d = decode(&store, &m, &z).unwrap();
        let r: Matrix<f64> = random_rotation(&mut rng);
        let t = [0.5, -0.5, 2.0];
        let zr = LatentState { z_x: rigid_transform(&z.z_x, &r, &t), z_h: z.z_h.clone() };
        let dr = decode(&store, &m, &zr).unwrap();
        assert!(dr.coords.sub(&rigid_transform(&d.coords, &r, &t)).max_abs() < 1e-9);
        assert!(dr.type_logits.sub(&d.type_logits).max_abs() < 1e-9);
        assert!(dr.charge.sub(&d.charge).max_abs() < 1e-9);
    }

    #[test]
    fn single_atom_decodes_at_its_latent_position() {
        let (store, m) = model(6, 1);
        let z = LatentState { z_x: Matrix::from_f64_rows(&[[0.2, 0.1, -0.3]]), z_h: Matrix::from_f64_rows(&[[0.4]]) };
        let d = decode(&store, &m, &z).unwrap();
        assert_eq!(d.coords, z.z_x);
        assert_eq!(d.type_logits.shape(), (1, 5));
    }

    #[test]
    fn loss_examples() {
        let mol = water_like();
        let target = project_zero_com(&mol.coords).unwrap();
        let mut logits = Matrix::filled(3, 5, -1e4);
        for (i, t) in mol.type_indices().into_iter().enumerate() {
            logits.set(i, t, 1e4);
        }
        let perfect = Decoded { coords: target, type_logits: logits, charge: Matrix::zeros(3, 1) };
        let post: Posterior<f64> = Posterior {
            mu_x: Matrix::zeros(3, 3),
            mu_h: Matrix::zeros(3, 1),
            sigma_x: Matrix::filled(3, 3, 1.0),
            sigma_h: Matrix::filled(3, 1, 1.0),
        };
        let (l, parts) = ae_loss(&mol, &perfect, &post, RegMode::Es, 1.0).unwrap();
        assert_eq!(l, 0.0);
        assert_eq!(parts.kl, 0.0);
        let (l, _) = ae_loss(&mol, &perfect, &post, RegMode::Kl, 1.0).unwrap();
        assert_eq!(l, 0.0);
        assert_eq!(gaussian_kl_mean(&[1.0], &[1.0]), 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let mu: f64 = rng.random_range(-3.0..3.0);
            let s: f64 = rng.random_range(0.01..4.0);
            assert!(gaussian_kl_mean(&[mu], &[s]) >= 0.0);
        }
    }

    #[test]
    fn tape_loss_matches_plain_loss() {
        let (store, m) = model(8, 1);
        let mol = water_like();
        let batch = AeBatch::new(&[&mol], m.config.tau).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(80);
        let mut eps = Matrix::from_fn(3, 4, |_, _| rng.sample(StandardNormal));
        let ex = project_zero_com(&eps.cols_range(0, 3)).unwrap();
        for i in 0..3 {
            for c in 0..3 {
                eps.set(i, c, ex.get(i, c));
            }
        }
        for mode in [RegMode::Es, RegMode::Kl] {
            let mut mm = m.clone();
            mm.config.reg_mode = mode;
            let mut tape = Tape::with_params(&store);
            let (loss, _) = mm.loss_var(&mut tape, &batch, &eps);
            let post = encode(&store, &mm, &mol).unwrap();
            let z = reparameterize(&post, &eps).unwrap();
            let dec = decode(&store, &mm, &z).unwrap();
            let (plain, _) = ae_loss(&mol, &dec, &post, mode, 1.0).unwrap();
            assert!((tape.value(loss).get(0, 0) - plain).abs() < 1e-12);
        }
    }
}
