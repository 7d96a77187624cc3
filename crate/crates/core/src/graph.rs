//! Batched graph index: several molecules stacked into one block-diagonal
//! graph so a single tape pass covers the whole batch.

use std::rc::Rc;

use crate::autodiff::Segments;
use crate::geometry::{build_edges, distance};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Directed edges as parallel receiver/sender lists in global node numbering.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeIndex {
    pub recv: Rc<[usize]>,
    pub send: Rc<[usize]>,
}

impl EdgeIndex {
    fn from_pairs(pairs: &[(usize, usize)]) -> Self {
        Self {
            recv: pairs.iter().map(|p| p.0).collect::<Vec<_>>().into(),
            send: pairs.iter().map(|p| p.1).collect::<Vec<_>>().into(),
        }
    }

    pub fn len(&self) -> usize {
        self.recv.len()
    }

    pub fn is_empty(&self) -> bool {
        self.recv.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GraphBatch {
    pub sizes: Vec<usize>,
    pub offsets: Vec<usize>,
    pub segments: Rc<Segments>,
    /// Every ordered pair within each molecule, lexicographic per molecule.
    pub all: EdgeIndex,
    /// Whether each entry of `all` is a local edge.
    pub all_is_local: Vec<bool>,
    /// `1/(N−1)` of the owning molecule, per entry of `all`.
    pub all_norm: Vec<f64>,
    pub local: EdgeIndex,
    pub global: EdgeIndex,
}

impl GraphBatch {
    /// `coords` stacks the molecules row-wise in the order of `sizes`; edge
    /// levels are decided per molecule against `tau`.
    pub fn new<T: Scalar>(coords: &Matrix<T>, sizes: &[usize], tau: T) -> Self {
        assert_eq!(coords.rows(), sizes.iter().sum::<usize>(), "sizes do not cover the coordinates");
        let mut offsets = Vec::with_capacity(sizes.len());
        let mut all = Vec::new();
        let mut all_is_local = Vec::new();
        let mut all_norm = Vec::new();
        let mut local = Vec::new();
        let mut global = Vec::new();
        let mut off = 0;
        for &n in sizes {
            offsets.push(off);
            let block = Matrix::from_fn(n, 3, |i, j| coords.get(off + i, j));
            let edges = build_edges(&block, tau);
            let norm = if n > 1 { 1.0 / (n - 1) as f64 } else { 0.0 };
            for ((i, j), is_local) in edges.all_tagged() {
                all.push((off + i, off + j));
                all_is_local.push(is_local);
                all_norm.push(norm);
            }
            local.extend(edges.local.iter().map(|&(i, j)| (off + i, off + j)));
            global.extend(edges.global.iter().map(|&(i, j)| (off + i, off + j)));
            off += n;
        }
        Self {
            sizes: sizes.to_vec(),
            offsets,
            segments: Rc::new(Segments::from_sizes(sizes)),
            all: EdgeIndex::from_pairs(&all),
            all_is_local,
            all_norm,
            local: EdgeIndex::from_pairs(&local),
            global: EdgeIndex::from_pairs(&global),
        }
    }

    pub fn single<T: Scalar>(coords: &Matrix<T>, tau: T) -> Self {
        Self::new(coords, &[coords.rows()], tau)
    }

    pub fn n_nodes(&self) -> usize {
        self.sizes.iter().sum()
    }

    pub fn n_molecules(&self) -> usize {
        self.sizes.len()
    }

    pub fn molecule_of(&self, node: usize) -> usize {
        self.segments.segment_of(node)
    }

    pub fn level(&self, level: EdgeLevel) -> &EdgeIndex {
        match level {
            EdgeLevel::Local => &self.local,
            EdgeLevel::Global => &self.global,
            EdgeLevel::All => &self.all,
        }
    }

    /// `E×2` one-hot `{local, global}` rows for the `all` edge list.
    pub fn all_indicator<T: Scalar>(&self) -> Matrix<T> {
        Matrix::from_fn(self.all.len(), 2, |e, c| {
            if (c == 0) == self.all_is_local[e] {
                T::one()
            } else {
                T::zero()
            }
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EdgeLevel {
    Local,
    Global,
    All,
}

impl EdgeLevel {
    /// Indicator row used as the edge-type input of invariant blocks.
    pub fn indicator<T: Scalar>(self) -> [T; 2] {
        match self {
            EdgeLevel::Local => [T::one(), T::zero()],
            EdgeLevel::Global => [T::zero(), T::one()],
            EdgeLevel::All => [T::one(), T::one()],
        }
    }
}

/// Per-edge distances and unit vectors `(x_i − x_j)/d_ij` for a fixed
/// geometry. Returns the offending pair when two atoms coincide.
pub fn edge_geometry<T: Scalar>(
    coords: &Matrix<T>,
    edges: &EdgeIndex,
) -> std::result::Result<(Matrix<T>, Matrix<T>), (usize, usize, f64)> {
    let e = edges.len();
    let mut d = Matrix::zeros(e, 1);
    let mut unit = Matrix::zeros(e, 3);
    let floor = T::of(1e-8);
    for k in 0..e {
        let (i, j) = (edges.recv[k], edges.send[k]);
        let dij = distance(coords.row(i), coords.row(j));
        if !(dij >= floor) {
            return Err((i, j, dij.as_f64()));
        }
        d.set(k, 0, dij);
        for c in 0..3 {
            unit.set(k, c, (coords.get(i, c) - coords.get(j, c)) / dij);
        }
    }
    Ok((d, unit))
}
