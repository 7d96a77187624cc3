//! Molecular point clouds, centre-of-mass handling, distances and the
//! two-level (local/global) edge partition.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::elements::ElementVocab;
use crate::error::{LmdmError, Result};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Default local-edge radius in Å.
pub const DEFAULT_TAU: f64 = 2.0;

/// A molecule as a point cloud: `coords` is `N×3` in Å and each feature row is
/// an element one-hot followed by the formal charge.
#[derive(Clone, Debug, PartialEq)]
pub struct Molecule<T> {
    pub coords: Matrix<T>,
    pub features: Matrix<T>,
    pub element_ids: Vec<String>,
}

impl<T: Scalar> Molecule<T> {
    pub fn new<S: AsRef<str>>(
        vocab: &ElementVocab,
        elements: &[S],
        coords: Matrix<T>,
        charges: &[i32],
    ) -> Result<Self> {
        let n = elements.len();
        if charges.len() != n {
            return Err(LmdmError::Shape(format!("{} charges for {n} atoms", charges.len())));
        }
        let mut features = Matrix::zeros(n, vocab.feature_dim());
        for (i, e) in elements.iter().enumerate() {
            let col = vocab.index_of(e.as_ref())?;
            features.set(i, col, T::one());
            features.set(i, vocab.len(), T::of(charges[i] as f64));
        }
        let element_ids = elements.iter().map(|e| e.as_ref().to_string()).collect();
        Self::from_parts(coords, features, element_ids)
    }

    /// Validates the invariants: at least one atom, finite coordinates and
    /// exactly one hot entry per feature row.
    pub fn from_parts(coords: Matrix<T>, features: Matrix<T>, element_ids: Vec<String>) -> Result<Self> {
        let n = coords.rows();
        if n == 0 {
            return Err(LmdmError::InvalidGeometry("molecule has no atoms".into()));
        }
        if coords.cols() != 3 {
            return Err(LmdmError::Shape(format!("coordinates must be N×3, got {}×{}", n, coords.cols())));
        }
        if features.rows() != n || element_ids.len() != n || features.cols() < 2 {
            return Err(LmdmError::Shape("features/element ids do not match coordinates".into()));
        }
        if !coords.all_finite() {
            return Err(LmdmError::InvalidGeometry("non-finite coordinate".into()));
        }
        let v = features.cols() - 1;
        for i in 0..n {
            let row = &features.row(i)[..v];
            let ones = row.iter().filter(|&&x| x == T::one()).count();
            let zeros = row.iter().filter(|&&x| x == T::zero()).count();
            if ones != 1 || ones + zeros != v {
                return Err(LmdmError::Shape(format!("feature row {i} is not a one-hot")));
            }
        }
        Ok(Self { coords, features, element_ids })
    }

    pub fn n_atoms(&self) -> usize {
        self.coords.rows()
    }

    pub fn vocab_size(&self) -> usize {
        self.features.cols() - 1
    }

    pub fn type_indices(&self) -> Vec<usize> {
        let v = self.vocab_size();
        (0..self.n_atoms())
            .map(|i| self.features.row(i)[..v].iter().position(|&x| x == T::one()).unwrap_or(0))
            .collect()
    }

    pub fn charges(&self) -> Vec<T> {
        let v = self.vocab_size();
        (0..self.n_atoms()).map(|i| self.features.get(i, v)).collect()
    }

    pub fn integer_charges(&self) -> Vec<i32> {
        self.charges().into_iter().map(|c| c.round().to_i32().unwrap_or(0)).collect()
    }

    pub fn centered(&self) -> Result<Self> {
        Ok(Self { coords: project_zero_com(&self.coords)?, ..self.clone() })
    }

    /// Applies `x ↦ R·x + t` to every atom.
    pub fn transformed(&self, rotation: &Matrix<T>, translation: &[T; 3]) -> Self {
        Self { coords: rigid_transform(&self.coords, rotation, translation), ..self.clone() }
    }

    /// Atom `i` of the result is atom `perm[i]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            coords: self.coords.gather_rows(perm),
            features: self.features.gather_rows(perm),
            element_ids: perm.iter().map(|&p| self.element_ids[p].clone()).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Molecule<U> {
        Molecule { coords: self.coords.cast(), features: self.features.cast(), element_ids: self.element_ids.clone() }
    }
}

/// Subtracts the coordinate mean so the rows sum to zero.
pub fn project_zero_com<T: Scalar>(coords: &Matrix<T>) -> Result<Matrix<T>> {
    if coords.rows() == 0 {
        return Err(LmdmError::InvalidGeometry("empty coordinate set".into()));
    }
    if !coords.all_finite() {
        return Err(LmdmError::InvalidGeometry("non-finite coordinate".into()));
    }
    let mean = coords.col_sums().scale(T::one() / T::of_usize(coords.rows()));
    Ok(Matrix::from_fn(coords.rows(), coords.cols(), |i, j| coords.get(i, j) - mean.get(0, j)))
}

/// Symmetric `N×N` Euclidean distance matrix.
pub fn pairwise_distances<T: Scalar>(coords: &Matrix<T>) -> Result<Matrix<T>> {
    if !coords.all_finite() {
        return Err(LmdmError::InvalidGeometry("non-finite coordinate".into()));
    }
    let n = coords.rows();
    let mut d = Matrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let dij = distance(coords.row(i), coords.row(j));
            d.set(i, j, dij);
            d.set(j, i, dij);
        }
    }
    Ok(d)
}

#[inline]
pub fn distance<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum::<T>().sqrt()
}

/// Directed edges split by the local radius.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct EdgeSet {
    pub local: Vec<(usize, usize)>,
    pub global: Vec<(usize, usize)>,
}

impl EdgeSet {
    /// Every ordered pair `(i, j)`, `i ≠ j`, tagged `true` when local, in
    /// lexicographic order.
    pub fn all_tagged(&self) -> Vec<((usize, usize), bool)> {
        let mut all: Vec<_> = self
            .local
            .iter()
            .map(|&e| (e, true))
            .chain(self.global.iter().map(|&e| (e, false)))
            .collect();
        all.sort_unstable();
        all
    }

    pub fn len(&self) -> usize {
        self.local.len() + self.global.len()
    }

    pub fn is_empty(&self) -> bool {
        self.local.is_empty() && self.global.is_empty()
    }
}

/// Pairs within `tau` (inclusive) are local, every other pair is global.
pub fn build_edges<T: Scalar>(coords: &Matrix<T>, tau: T) -> EdgeSet {
    assert!(tau > T::zero(), "local radius must be positive");
    let n = coords.rows();
    let mut edges = EdgeSet::default();
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            if distance(coords.row(i), coords.row(j)) <= tau {
                edges.local.push((i, j));
            } else {
                edges.global.push((i, j));
            }
        }
    }
    edges
}

/// Gaussian radial basis: centres and a shared width.
#[derive(Clone, Debug, PartialEq)]
pub struct RbfSpec<T> {
    pub centers: Vec<T>,
    pub width: T,
}

impl<T: Scalar> RbfSpec<T> {
    /// `count` centres evenly spaced on `[0, max]`, width equal to the spacing.
    pub fn evenly_spaced(count: usize, max: f64) -> Self {
        assert!(count >= 2, "need at least two centres");
        let spacing = max / (count - 1) as f64;
        Self { centers: (0..count).map(|k| T::of(k as f64 * spacing)).collect(), width: T::of(spacing) }
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }
}

impl<T: Scalar> Default for RbfSpec<T> {
    fn default() -> Self {
        Self::evenly_spaced(16, 10.0)
    }
}

pub fn rbf_expand<T: Scalar>(d: T, centers: &[T], width: T) -> Vec<T> {
    let denom = T::of(2.0) * width * width;
    centers.iter().map(|&c| (-(d - c) * (d - c) / denom).exp()).collect()
}

/// Uniformly random proper rotation: QR (Gram–Schmidt) of a Gaussian matrix
/// with the determinant fixed to +1.
pub fn random_rotation<T: Scalar, R: Rng + ?Sized>(rng: &mut R) -> Matrix<T> {
    loop {
        let mut cols = [[0.0f64; 3]; 3];
        for c in cols.iter_mut() {
            for v in c.iter_mut() {
                *v = rng.sample(StandardNormal);
            }
        }
        let mut q = [[0.0f64; 3]; 3];
        let mut ok = true;
        for k in 0..3 {
            let mut v = cols[k];
            for prev in q.iter().take(k) {
                let dot: f64 = v.iter().zip(prev).map(|(a, b)| a * b).sum();
                for (x, p) in v.iter_mut().zip(prev) {
                    *x -= dot * p;
                }
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-8 {
                ok = false;
                break;
            }
            q[k] = v.map(|x| x / norm);
        }
        if !ok {
            continue;
        }
        let det = q[0][0] * (q[1][1] * q[2][2] - q[1][2] * q[2][1])
            - q[1][0] * (q[0][1] * q[2][2] - q[0][2] * q[2][1])
            + q[2][0] * (q[0][1] * q[1][2] - q[0][2] * q[1][1]);
        if det < 0.0 {
            q[2] = q[2].map(|x| -x);
        }
        // q holds the columns of the rotation.
        return Matrix::from_fn(3, 3, |i, j| T::of(q[j][i]));
    }
}

/// Rows of `coords` mapped by `x ↦ R·x + t`.
pub fn rigid_transform<T: Scalar>(coords: &Matrix<T>, rotation: &Matrix<T>, translation: &[T; 3]) -> Matrix<T> {
    let mut out = coords.matmul_nt(rotation);
    for i in 0..out.rows() {
        for (o, &t) in out.row_mut(i).iter_mut().zip(translation) {
            *o += t;
        }
    }
    out
}

/// Rows of `m` (N×3) rotated by `R`.
pub fn rotate_rows<T: Scalar>(m: &Matrix<T>, rotation: &Matrix<T>) -> Matrix<T> {
    m.matmul_nt(rotation)
}
