//! Bond inference from interatomic distances, valence checks and set-level
//! generation metrics.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{LmdmError, Result};
use crate::geometry::{distance, Molecule};
use crate::hash::{fnv1a64, fnv1a64_extend};
use crate::scalar::Scalar;

/// Slack added to the reference length of a single bond.
pub const SINGLE_MARGIN: f64 = 0.1;
/// Slack added to the reference length of a double or triple bond.
pub const MULTIPLE_MARGIN: f64 = 0.05;

/// Reference bond lengths in Å (single, double, triple) and allowed valences.
#[derive(Clone, Debug, PartialEq)]
pub struct ChemistryTables {
    lengths: BTreeMap<(String, String, u8), f64>,
    valences: BTreeMap<String, Vec<u32>>,
}

impl Default for ChemistryTables {
    fn default() -> Self {
        let mut t = Self { lengths: BTreeMap::new(), valences: BTreeMap::new() };
        let single = [
            ("H", "H", 0.74), ("H", "C", 1.09), ("H", "N", 1.01), ("H", "O", 0.96), ("H", "F", 0.92),
            ("C", "C", 1.54), ("C", "N", 1.47), ("C", "O", 1.43), ("C", "F", 1.35),
            ("N", "N", 1.45), ("N", "O", 1.40), ("N", "F", 1.36),
            ("O", "O", 1.48), ("O", "F", 1.42),
            ("F", "F", 1.42),
        ];
        let double = [("C", "C", 1.34), ("C", "N", 1.29), ("C", "O", 1.20), ("N", "N", 1.25), ("N", "O", 1.21), ("O", "O", 1.21)];
        let triple = [("C", "C", 1.20), ("C", "N", 1.16), ("C", "O", 1.13), ("N", "N", 1.10)];
        for (order, rows) in [(1u8, &single[..]), (2, &double[..]), (3, &triple[..])] {
            for &(a, b, r) in rows {
                t.set_length(a, b, order, r);
            }
        }
        for (e, v) in [("H", 1), ("C", 4), ("N", 3), ("O", 2), ("F", 1)] {
            t.valences.insert(e.to_string(), vec![v]);
        }
        t
    }
}

impl ChemistryTables {
    pub fn set_length(&mut self, a: &str, b: &str, order: u8, angstrom: f64) {
        let (x, y) = if a <= b { (a, b) } else { (b, a) };
        self.lengths.insert((x.to_string(), y.to_string(), order), angstrom);
    }

    pub fn length(&self, a: &str, b: &str, order: u8) -> Option<f64> {
        let (x, y) = if a <= b { (a, b) } else { (b, a) };
        self.lengths.get(&(x.to_string(), y.to_string(), order)).copied()
    }

    /// Adds an allowed valence for `element`.
    pub fn allow_valence(&mut self, element: &str, valence: u32) {
        let v = self.valences.entry(element.to_string()).or_default();
        if !v.contains(&valence) {
            v.push(valence);
            v.sort_unstable();
        }
    }

    pub fn valences(&self, element: &str) -> Result<&[u32]> {
        self.valences.get(element).map(Vec::as_slice).ok_or_else(|| LmdmError::UnsupportedElement(element.to_string()))
    }

    pub fn supports(&self, element: &str) -> bool {
        self.valences.contains_key(element)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BondGraph {
    pub n_atoms: usize,
    /// `(i, j, order)` with `i < j`, sorted.
    pub bonds: Vec<(usize, usize, u8)>,
    pub element_ids: Vec<String>,
    pub charges: Vec<i32>,
}

impl BondGraph {
    pub fn valence(&self, atom: usize) -> u32 {
        self.bonds.iter().filter(|b| b.0 == atom || b.1 == atom).map(|b| u32::from(b.2)).sum()
    }

    pub fn neighbors(&self) -> Vec<Vec<(usize, u8)>> {
        let mut adj = vec![Vec::new(); self.n_atoms];
        for &(i, j, o) in &self.bonds {
            adj[i].push((j, o));
            adj[j].push((i, o));
        }
        adj
    }

    pub fn n_components(&self) -> usize {
        let mut parent: Vec<usize> = (0..self.n_atoms).collect();
        fn find(p: &mut [usize], mut x: usize) -> usize {
            while p[x] != x {
                p[x] = p[p[x]];
                x = p[x];
            }
            x
        }
        let mut count = self.n_atoms;
        for &(i, j, _) in &self.bonds {
            let (a, b) = (find(&mut parent, i), find(&mut parent, j));
            if a != b {
                parent[a] = b;
                count -= 1;
            }
        }
        count
    }
}

/// Bonds every pair at the highest order whose reference length plus margin
/// covers the distance.
pub fn infer_bonds<T: Scalar>(mol: &Molecule<T>, tables: &ChemistryTables) -> Result<BondGraph> {
    let n = mol.n_atoms();
    for e in &mol.element_ids {
        if !tables.supports(e) {
            return Err(LmdmError::UnsupportedElement(e.clone()));
        }
    }
    let mut bonds = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let d = distance(mol.coords.row(i), mol.coords.row(j)).as_f64();
            let (a, b) = (&mol.element_ids[i], &mol.element_ids[j]);
            let order = (1..=3u8).rev().find(|&o| {
                let margin = if o == 1 { SINGLE_MARGIN } else { MULTIPLE_MARGIN };
                tables.length(a, b, o).is_some_and(|r| d <= r + margin)
            });
            if let Some(o) = order {
                bonds.push((i, j, o));
            }
        }
    }
    Ok(BondGraph { n_atoms: n, bonds, element_ids: mol.element_ids.clone(), charges: mol.integer_charges() })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MoleculeChecks {
    pub valid: bool,
    pub stable_atoms: usize,
    pub ion_free: bool,
    pub n_components: usize,
}

pub fn molecule_checks(g: &BondGraph, tables: &ChemistryTables, require_connected: bool) -> Result<MoleculeChecks> {
    let mut within = true;
    let mut stable = 0;
    for i in 0..g.n_atoms {
        let allowed = tables.valences(&g.element_ids[i])?;
        let v = g.valence(i);
        within &= v <= allowed.iter().copied().max().unwrap_or(0);
        stable += usize::from(allowed.contains(&v));
    }
    let n_components = g.n_components();
    let net_charge: i32 = g.charges.iter().sum();
    Ok(MoleculeChecks {
        valid: within && (!require_connected || n_components == 1),
        stable_atoms: stable,
        ion_free: stable == g.n_atoms && net_charge == 0,
        n_components,
    })
}

/// Morgan-style refinement over element and bond orders; the result ignores
/// atom order and geometry.
pub fn canonical_hash(g: &BondGraph) -> u64 {
    let adj = g.neighbors();
    let mut labels: Vec<u64> = (0..g.n_atoms)
        .map(|i| {
            let mut orders: Vec<u8> = adj[i].iter().map(|&(_, o)| o).collect();
            orders.sort_unstable();
            let h = fnv1a64(g.element_ids[i].as_bytes());
            let h = fnv1a64_extend(h, &[0xff]);
            let h = fnv1a64_extend(h, &g.charges[i].to_le_bytes());
            fnv1a64_extend(h, &orders)
        })
        .collect();
    for _ in 0..g.n_atoms.max(1) {
        let next: Vec<u64> = (0..g.n_atoms)
            .map(|i| {
                let mut nb: Vec<(u8, u64)> = adj[i].iter().map(|&(j, o)| (o, labels[j])).collect();
                nb.sort_unstable();
                let mut h = fnv1a64_extend(fnv1a64(b"morgan"), &labels[i].to_le_bytes());
                for (o, l) in nb {
                    h = fnv1a64_extend(h, &[o]);
                    h = fnv1a64_extend(h, &l.to_le_bytes());
                }
                h
            })
            .collect();
        labels = next;
    }
    labels.sort_unstable();
    let mut h = fnv1a64_extend(fnv1a64(b"graph"), &(g.n_atoms as u64).to_le_bytes());
    for l in labels {
        h = fnv1a64_extend(h, &l.to_le_bytes());
    }
    h
}

pub fn molecule_hash<T: Scalar>(mol: &Molecule<T>, tables: &ChemistryTables) -> Result<u64> {
    Ok(canonical_hash(&infer_bonds(mol, tables)?))
}

/// Hashes of every molecule in a reference corpus.
pub fn corpus_hashes<T: Scalar>(mols: &[Molecule<T>], tables: &ChemistryTables) -> Result<HashSet<u64>> {
    mols.iter().map(|m| molecule_hash(m, tables)).collect()
}

/// Percentages in `[0, 100]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n_molecules: usize,
    pub validity: f64,
    pub uniqueness: f64,
    pub novelty: f64,
    pub stability: f64,
    pub atom_stability: f64,
    pub n_unique: usize,
    /// Component count → number of molecules.
    pub components: BTreeMap<usize, usize>,
}

fn pct(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        100.0 * num as f64 / den as f64
    }
}

pub fn set_metrics<T: Scalar>(
    generated: &[Molecule<T>],
    train_hashes: &HashSet<u64>,
    tables: &ChemistryTables,
    require_connected: bool,
) -> Result<MetricsReport> {
    if generated.is_empty() {
        return Err(LmdmError::Empty("generated set"));
    }
    let mut valid = 0;
    let mut stable_mols = 0;
    let mut stable_atoms = 0;
    let mut atoms = 0;
    let mut unique = HashSet::new();
    let mut components = BTreeMap::new();
    for m in generated {
        let g = infer_bonds(m, tables)?;
        let c = molecule_checks(&g, tables, require_connected)?;
        atoms += g.n_atoms;
        stable_atoms += c.stable_atoms;
        *components.entry(c.n_components).or_insert(0) += 1;
        if c.ion_free && c.n_components == 1 {
            stable_mols += 1;
        }
        if c.valid {
            valid += 1;
            unique.insert(canonical_hash(&g));
        }
    }
    let novel = unique.iter().filter(|h| !train_hashes.contains(h)).count();
    Ok(MetricsReport {
        n_molecules: generated.len(),
        validity: pct(valid, generated.len()),
        uniqueness: pct(unique.len(), valid),
        novelty: pct(novel, unique.len()),
        stability: pct(stable_mols, generated.len()),
        atom_stability: pct(stable_atoms, atoms),
        n_unique: unique.len(),
        components,
    })
}

impl MetricsReport {
    /// Aligned two-column text table.
    pub fn table(&self) -> String {
        let mut rows = vec![
            ("molecules".to_string(), self.n_molecules.to_string()),
            ("validity %".to_string(), format!("{:.2}", self.validity)),
            ("uniqueness %".to_string(), format!("{:.2}", self.uniqueness)),
            ("novelty %".to_string(), format!("{:.2}", self.novelty)),
            ("stability %".to_string(), format!("{:.2}", self.stability)),
            ("atom stability %".to_string(), format!("{:.2}", self.atom_stability)),
            ("unique structures".to_string(), self.n_unique.to_string()),
        ];
        for (c, n) in &self.components {
            rows.push((format!("components = {c}"), n.to_string()));
        }
        let w = rows.iter().map(|r| r.0.len()).max().unwrap_or(0);
        let v = rows.iter().map(|r| r.1.len()).max().unwrap_or(0);
        let mut out = String::new();
        for (k, val) in rows {
            let _ = writeln!(out, "{k:<w$}  {val:>v$}");
        }
        out
    }
}
