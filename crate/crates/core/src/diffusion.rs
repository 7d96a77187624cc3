//! Discrete-time Gaussian diffusion: schedules, closed-form marginals,
//! posterior statistics, the score-form reverse mean and training targets.
//!
//! Timesteps are 1-based: `t ∈ 1..=T`.

use serde::{Deserialize, Serialize};

use crate::error::{LmdmError, Result};
use crate::geometry::distance;
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Offset keeping the polynomial `ᾱ` away from 0 and 1.
pub const POLYNOMIAL_OFFSET: f64 = 1e-5;

macro_rules! string_enum {
    ($name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        impl ::std::fmt::Display for $name {
            fn fmt(&self, f: &mut ::std::fmt::Formatter<'_>) -> ::std::fmt::Result {
                f.write_str(match self { $($name::$variant => $text),+ })
            }
        }

        impl ::std::str::FromStr for $name {
            type Err = $crate::error::LmdmError;

            fn from_str(s: &str) -> $crate::error::Result<Self> {
                match s {
                    $($text => Ok($name::$variant),)+
                    other => Err($crate::error::LmdmError::Config(format!(
                        concat!("invalid ", stringify!($name), " '{}'"),
                        other
                    ))),
                }
            }
        }
    };
}
pub(crate) use string_enum;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScheduleKind {
    #[default]
    Linear,
    Polynomial,
}
string_enum!(ScheduleKind { Linear => "linear", Polynomial => "polynomial" });

/// Standard deviation of the noise added at each reverse step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum SigmaMode {
    #[default]
    BetaTilde,
    Beta,
    Unit,
}
string_enum!(SigmaMode { BetaTilde => "beta_tilde", Beta => "beta", Unit => "unit" });

/// Space in which the training regression is measured. `Noise` is the score
/// loss weighted by `1 − ᾱ_t`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossSpace {
    Score,
    #[default]
    Noise,
}
string_enum!(LossSpace { Score => "score", Noise => "noise" });

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionConfig {
    pub schedule_kind: ScheduleKind,
    pub steps: usize,
    pub sigma_mode: SigmaMode,
    pub gamma_weighting: bool,
    pub beta_start: f64,
    pub beta_end: f64,
    pub loss_space: LossSpace,
    /// Multiplier on the distance-based coordinate target during training.
    pub coord_target_scale: f64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            schedule_kind: ScheduleKind::Linear,
            steps: 1000,
            sigma_mode: SigmaMode::BetaTilde,
            gamma_weighting: false,
            beta_start: 1e-4,
            beta_end: 2e-2,
            loss_space: LossSpace::Noise,
            coord_target_scale: 0.5,
        }
    }
}

impl DiffusionConfig {
    pub fn schedule(&self) -> Result<NoiseSchedule> {
        make_schedule(self.schedule_kind, self.steps, self.beta_start, self.beta_end)
    }
}

/// Variance table and its derived products, stored for `t = 1..=T`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
    pub beta_tilde: Vec<f64>,
}

impl NoiseSchedule {
    /// Builds the derived tables from `β` and checks the invariants.
    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() {
            return Err(LmdmError::InvalidSchedule("no timesteps".into()));
        }
        if let Some((t, b)) = beta.iter().enumerate().find(|(_, &b)| !(b > 0.0 && b < 1.0)) {
            return Err(LmdmError::InvalidSchedule(format!("beta_{} = {b} outside (0, 1)", t + 1)));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(beta.len());
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        if !(alpha_bar[alpha_bar.len() - 1] > 0.0) {
            return Err(LmdmError::InvalidSchedule("cumulative alpha underflows to zero".into()));
        }
        let beta_tilde = (0..beta.len())
            .map(|i| if i == 0 { beta[0] } else { (1.0 - alpha_bar[i - 1]) / (1.0 - alpha_bar[i]) * beta[i] })
            .collect();
        Ok(Self { beta, alpha, alpha_bar, beta_tilde })
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(LmdmError::TimeOutOfRange { t, min: 1, max: self.steps() });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    pub fn beta_tilde(&self, t: usize) -> f64 {
        self.beta_tilde[t - 1]
    }

    pub fn sigma(&self, t: usize, mode: SigmaMode) -> f64 {
        match mode {
            SigmaMode::BetaTilde => self.beta_tilde(t).sqrt(),
            SigmaMode::Beta => self.beta(t).sqrt(),
            SigmaMode::Unit => 1.0,
        }
    }

    /// `γ_t = β_t² / (2(1 − β_t)(1 − ᾱ_t)σ_t²)`
    pub fn gamma(&self, t: usize, mode: SigmaMode) -> f64 {
        let b = self.beta(t);
        let s = self.sigma(t, mode);
        b * b / (2.0 * (1.0 - b) * (1.0 - self.alpha_bar(t)) * s * s)
    }

    /// Per-example multiplier applied to the squared score error.
    pub fn loss_weight(&self, t: usize, cfg: &DiffusionConfig) -> f64 {
        let mut w = if cfg.gamma_weighting { self.gamma(t, cfg.sigma_mode) } else { 1.0 };
        if cfg.loss_space == LossSpace::Noise {
            w *= 1.0 - self.alpha_bar(t);
        }
        w
    }

    /// Output multiplier that keeps raw network outputs at unit scale:
    /// `1/√(1 − ᾱ_t)`.
    pub fn score_scale(&self, t: usize) -> f64 {
        1.0 / (1.0 - self.alpha_bar(t)).sqrt()
    }
}

/// Linear `β` between `beta_start` and `beta_end`, or the polynomial
/// `ᾱ_t = (1 − 2s)(1 − (t/T)²)² + s`.
pub fn make_schedule(kind: ScheduleKind, steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(LmdmError::InvalidSchedule("T must be at least 1".into()));
    }
    let beta = match kind {
        ScheduleKind::Linear => {
            if steps == 1 {
                vec![beta_start]
            } else {
                (0..steps)
                    .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
                    .collect()
            }
        }
        ScheduleKind::Polynomial => {
            let s = POLYNOMIAL_OFFSET;
            let abar = |t: usize| {
                let u = t as f64 / steps as f64;
                (1.0 - 2.0 * s) * (1.0 - u * u).powi(2) + s
            };
            (1..=steps).map(|t| 1.0 - abar(t) / abar(t - 1)).collect()
        }
    };
    NoiseSchedule::from_betas(beta)
}

/// `z_t = √ᾱ_t z0 + √(1 − ᾱ_t) ε`
pub fn q_sample<T: Scalar>(z0: &Matrix<T>, t: usize, eps: &Matrix<T>, sched: &NoiseSchedule) -> Result<Matrix<T>> {
    sched.check_t(t)?;
    if z0.shape() != eps.shape() {
        return Err(LmdmError::Shape("noise must match the clean sample".into()));
    }
    let ab = sched.alpha_bar(t);
    let (a, b) = (T::of(ab.sqrt()), T::of((1.0 - ab).sqrt()));
    Ok(z0.zip_map(eps, |z, e| a * z + b * e))
}

/// Mean and variance of `q(z_{t−1} | z_t, z0)`; defined for `t ≥ 2`.
pub fn posterior_mean_var<T: Scalar>(
    z_t: &Matrix<T>,
    z0: &Matrix<T>,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<(Matrix<T>, f64)> {
    sched.check_t(t)?;
    if t < 2 {
        return Err(LmdmError::TimeOutOfRange { t, min: 2, max: sched.steps() });
    }
    if z_t.shape() != z0.shape() {
        return Err(LmdmError::Shape("z_t and z0 differ in shape".into()));
    }
    let (ab, ab_prev) = (sched.alpha_bar(t), sched.alpha_bar(t - 1));
    let c_t = T::of(sched.alpha(t).sqrt() * (1.0 - ab_prev) / (1.0 - ab));
    let c_0 = T::of(ab_prev.sqrt() * sched.beta(t) / (1.0 - ab));
    Ok((z_t.zip_map(z0, |zt, z| c_t * zt + c_0 * z), sched.beta_tilde(t)))
}

/// Reverse mean in score form, `(z_t + β_t s)/√α_t`. Under `s = −ε/√(1 − ᾱ_t)`
/// this is the noise form `(z_t − β_t ε/√(1 − ᾱ_t))/√α_t`.
pub fn mu_theta<T: Scalar>(z_t: &Matrix<T>, s: &Matrix<T>, t: usize, sched: &NoiseSchedule) -> Matrix<T> {
    let b = T::of(sched.beta(t));
    let inv = T::of(1.0 / sched.alpha(t).sqrt());
    z_t.zip_map(s, |z, sc| (z + b * sc) * inv)
}

/// Reverse mean in noise form.
pub fn mu_from_noise<T: Scalar>(z_t: &Matrix<T>, eps: &Matrix<T>, t: usize, sched: &NoiseSchedule) -> Matrix<T> {
    let c = T::of(sched.beta(t) / (1.0 - sched.alpha_bar(t)).sqrt());
    let inv = T::of(1.0 / sched.alpha(t).sqrt());
    z_t.zip_map(eps, |z, e| (z - c * e) * inv)
}

/// Distance-based coordinate target over directed edges, with `ᾱ` given per
/// node so batches may mix timesteps:
/// `s_i = Σ_j −√ᾱ(d̃_ij − d_ij)/(1 − ᾱ) · (x̃_i − x̃_j)/d̃_ij`.
pub fn coord_score_target_with<T: Scalar>(
    coords_t: &Matrix<T>,
    coords_0: &Matrix<T>,
    recv: &[usize],
    send: &[usize],
    alpha_bar: &[f64],
) -> Result<Matrix<T>> {
    if coords_t.shape() != coords_0.shape() || alpha_bar.len() != coords_t.rows() {
        return Err(LmdmError::Shape("coordinate target inputs differ in shape".into()));
    }
    let mut out = Matrix::zeros(coords_t.rows(), 3);
    for (&i, &j) in recv.iter().zip(send) {
        let dt = distance(coords_t.row(i), coords_t.row(j));
        if !(dt.as_f64() >= 1e-8) {
            return Err(LmdmError::DegenerateGeometry { i, j, distance: dt.as_f64() });
        }
        let d0 = distance(coords_0.row(i), coords_0.row(j));
        let ab = alpha_bar[i];
        let g = T::of(-ab.sqrt() / (1.0 - ab)) * (dt - d0) / dt;
        for c in 0..3 {
            let v = out.get(i, c) + g * (coords_t.get(i, c) - coords_t.get(j, c));
            out.set(i, c, v);
        }
    }
    Ok(out)
}

pub fn coord_score_target<T: Scalar>(
    coords_t: &Matrix<T>,
    coords_0: &Matrix<T>,
    edges: &[(usize, usize)],
    t: usize,
    sched: &NoiseSchedule,
) -> Result<Matrix<T>> {
    sched.check_t(t)?;
    let recv: Vec<usize> = edges.iter().map(|e| e.0).collect();
    let send: Vec<usize> = edges.iter().map(|e| e.1).collect();
    coord_score_target_with(coords_t, coords_0, &recv, &send, &vec![sched.alpha_bar(t); coords_t.rows()])
}

/// `−(z_t − √ᾱ_t z0)/(1 − ᾱ_t)`
pub fn feature_score_target<T: Scalar>(
    zh_t: &Matrix<T>,
    zh_0: &Matrix<T>,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<Matrix<T>> {
    sched.check_t(t)?;
    if zh_t.shape() != zh_0.shape() {
        return Err(LmdmError::Shape("feature target inputs differ in shape".into()));
    }
    let ab = sched.alpha_bar(t);
    let (a, inv) = (T::of(ab.sqrt()), T::of(1.0 / (1.0 - ab)));
    Ok(zh_t.zip_map(zh_0, |zt, z0| -(zt - a * z0) * inv))
}

/// Mean squared error, multiplied by `γ_t` when `gamma_weighting` is set.
pub fn diffusion_loss<T: Scalar>(
    s_pred: &Matrix<T>,
    target: &Matrix<T>,
    t: usize,
    sched: &NoiseSchedule,
    gamma_weighting: bool,
    sigma_mode: SigmaMode,
) -> Result<T> {
    sched.check_t(t)?;
    if s_pred.shape() != target.shape() {
        return Err(LmdmError::Shape("prediction and target differ in shape".into()));
    }
    let diff = s_pred.sub(target);
    let mse = diff.as_slice().iter().map(|&d| d * d).sum::<T>() / T::of_usize(diff.len().max(1));
    Ok(if gamma_weighting { mse * T::of(sched.gamma(t, sigma_mode)) } else { mse })
}
