//! Gaussian draws shaped for latent states.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::geometry::project_zero_com;
use crate::scalar::Scalar;
use crate::tensor::Matrix;

pub fn standard_normal<T: Scalar, R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Matrix<T> {
    Matrix::from_fn(rows, cols, |_, _| T::of(rng.sample::<f64, _>(StandardNormal)))
}

/// `N×(3+k)` standard normal draw whose first three columns are projected to
/// zero centre of mass.
pub fn latent_noise<T: Scalar, R: Rng + ?Sized>(rng: &mut R, n: usize, k: usize) -> Matrix<T> {
    let raw: Matrix<T> = standard_normal(rng, n, 3 + k);
    let x = project_zero_com(&raw.cols_range(0, 3)).expect("n ≥ 1");
    Matrix::hstack(&[&x, &raw.cols_range(3, 3 + k)])
}

/// [`latent_noise`] for each molecule in turn, stacked row-wise.
pub fn batch_latent_noise<T: Scalar, R: Rng + ?Sized>(rng: &mut R, sizes: &[usize], k: usize) -> Matrix<T> {
    let parts: Vec<Matrix<T>> = sizes.iter().map(|&n| latent_noise(rng, n, k)).collect();
    Matrix::vstack(&parts.iter().collect::<Vec<_>>())
}
