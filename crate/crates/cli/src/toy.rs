//! Small synthetic heavy-atom skeletons: zigzag chains and planar rings.

use std::f64::consts::PI;
use std::str::FromStr;

use lmdm_core::elements::ElementVocab;
use lmdm_core::geometry::Molecule;
use lmdm_core::metrics::ChemistryTables;
use lmdm_core::{LmdmError, Matrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Per-coordinate uniform jitter half-width in Å.
pub const JITTER: f64 = 0.01;
/// Atom counts of successive chains.
pub const CHAIN_LENGTHS: [usize; 6] = [4, 5, 6, 7, 8, 3];
/// Ring side length in Å, inside the single-bond window of C–C, C–N and N–N.
pub const RING_BOND: f64 = 1.50;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ToyKind {
    Chains,
    Rings,
    Mixed,
}

impl FromStr for ToyKind {
    type Err = LmdmError;

    fn from_str(s: &str) -> Result<Self, LmdmError> {
        match s {
            "chains" => Ok(ToyKind::Chains),
            "rings" => Ok(ToyKind::Rings),
            "mixed" => Ok(ToyKind::Mixed),
            other => Err(LmdmError::Config(format!("invalid toy kind '{other}'"))),
        }
    }
}

fn pick<'a, R: Rng>(rng: &mut R, weighted: &[(&'a str, u32)]) -> &'a str {
    let total: u32 = weighted.iter().map(|w| w.1).sum();
    let mut r = rng.random_range(0..total);
    for &(s, w) in weighted {
        if r < w {
            return s;
        }
        r -= w;
    }
    unreachable!()
}

fn chain<R: Rng>(rng: &mut R, n: usize, tables: &ChemistryTables) -> (Vec<&'static str>, Vec<[f64; 3]>) {
    let elements: Vec<&'static str> = (0..n).map(|_| pick(rng, &[("C", 6), ("N", 2), ("O", 2)])).collect();
    let mut pos = vec![[0.0; 3]];
    for i in 1..n {
        let r = tables.length(elements[i - 1], elements[i], 1).expect("single bond length for C/N/O");
        // Alternating ±30° about the chain axis gives 120° angles.
        let a = if i % 2 == 1 { PI / 6.0 } else { -PI / 6.0 };
        let p = pos[i - 1];
        pos.push([p[0] + r * a.cos(), p[1] + r * a.sin(), 0.0]);
    }
    (elements, pos)
}

fn ring<R: Rng>(rng: &mut R, n: usize) -> (Vec<&'static str>, Vec<[f64; 3]>) {
    let elements = (0..n).map(|_| pick(rng, &[("C", 4), ("N", 1)])).collect();
    let radius = RING_BOND / (2.0 * (PI / n as f64).sin());
    let pos = (0..n)
        .map(|i| {
            let a = 2.0 * PI * i as f64 / n as f64;
            [radius * a.cos(), radius * a.sin(), 0.0]
        })
        .collect();
    (elements, pos)
}

/// Deterministic in `(kind, n, seed)`. Every molecule is centred and valid
/// under the default chemistry tables.
pub fn make_toy_dataset(kind: ToyKind, n: usize, seed: u64) -> lmdm_core::Result<Vec<Molecule<f64>>> {
    if n == 0 {
        return Err(LmdmError::Config("toy dataset size must be at least 1".into()));
    }
    let vocab = ElementVocab::default();
    let tables = ChemistryTables::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let is_chain = match kind {
            ToyKind::Chains => true,
            ToyKind::Rings => false,
            ToyKind::Mixed => i % 2 == 0,
        };
        let j = if kind == ToyKind::Mixed { i / 2 } else { i };
        let (elements, pos) = if is_chain {
            chain(&mut rng, CHAIN_LENGTHS[j % CHAIN_LENGTHS.len()], &tables)
        } else {
            ring(&mut rng, 5 + j % 4)
        };
        let coords = Matrix::from_fn(pos.len(), 3, |a, c| pos[a][c] + rng.random_range(-JITTER..=JITTER));
        let mol = Molecule::new(&vocab, &elements, coords, &vec![0; elements.len()])?;
        out.push(mol.centered()?);
    }
    Ok(out)
}
