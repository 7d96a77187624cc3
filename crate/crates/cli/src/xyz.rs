//! Multi-block XYZ files: a count line, a comment line, then one
//! `Element x y z [charge]` row per atom, coordinates in Å.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use lmdm_core::elements::ElementVocab;
use lmdm_core::geometry::Molecule;
use lmdm_core::{LmdmError, Matrix};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum XyzError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: unknown element {symbol:?}")]
    UnknownElement { line: usize, symbol: String },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Clone, Debug, PartialEq)]
pub struct XyzBlock {
    pub comment: String,
    pub molecule: Molecule<f64>,
}

fn parse_err(line: usize, message: impl Into<String>) -> XyzError {
    XyzError::Parse { line, message: message.into() }
}

pub fn parse_xyz(text: &str, vocab: &ElementVocab) -> Result<Vec<XyzBlock>, XyzError> {
    let lines: Vec<&str> = text.lines().collect();
    let mut blocks = Vec::new();
    let mut i = 0;
    while i < lines.len() {
        if lines[i].trim().is_empty() {
            i += 1;
            continue;
        }
        let count_line = i + 1;
        let n: usize = lines[i].trim().parse().map_err(|_| parse_err(count_line, format!("expected an atom count, found {:?}", lines[i].trim())))?;
        if n == 0 {
            return Err(parse_err(count_line, "atom count must be positive"));
        }
        let comment = lines.get(i + 1).map(|c| c.trim_end().to_string()).unwrap_or_default();
        let mut symbols = Vec::with_capacity(n);
        let mut coords = Vec::with_capacity(3 * n);
        let mut charges = Vec::with_capacity(n);
        for a in 0..n {
            let ln = i + 3 + a;
            let row = lines.get(ln - 1).ok_or_else(|| parse_err(ln, format!("expected {n} atom rows, file ended after {a}")))?;
            let fields: Vec<&str> = row.split_whitespace().collect();
            if !(4..=5).contains(&fields.len()) {
                return Err(parse_err(ln, format!("expected `Element x y z [charge]`, found {row:?}")));
            }
            if vocab.index_of(fields[0]).is_err() {
                return Err(XyzError::UnknownElement { line: ln, symbol: fields[0].to_string() });
            }
            symbols.push(fields[0].to_string());
            for f in &fields[1..4] {
                let v: f64 = f.parse().map_err(|_| parse_err(ln, format!("bad coordinate {f:?}")))?;
                if !v.is_finite() {
                    return Err(parse_err(ln, format!("non-finite coordinate {f:?}")));
                }
                coords.push(v);
            }
            charges.push(match fields.get(4) {
                Some(c) => c.parse().map_err(|_| parse_err(ln, format!("bad charge {c:?}")))?,
                None => 0,
            });
        }
        let molecule = Molecule::new(vocab, &symbols, Matrix::from_vec(n, 3, coords), &charges)
            .map_err(|e: LmdmError| parse_err(count_line, e.to_string()))?;
        blocks.push(XyzBlock { comment, molecule });
        i += 2 + n;
    }
    Ok(blocks)
}

pub fn read_xyz_blocks(path: &Path, vocab: &ElementVocab) -> Result<Vec<XyzBlock>, XyzError> {
    let text = fs::read_to_string(path).map_err(|source| XyzError::Io { path: path.display().to_string(), source })?;
    parse_xyz(&text, vocab)
}

pub fn read_xyz(path: &Path, vocab: &ElementVocab) -> Result<Vec<Molecule<f64>>, XyzError> {
    Ok(read_xyz_blocks(path, vocab)?.into_iter().map(|b| b.molecule).collect())
}

/// Six-decimal fixed point; a charge column is added only to blocks that
/// carry a nonzero charge.
pub fn format_xyz<'a>(blocks: impl IntoIterator<Item = (&'a str, &'a Molecule<f64>)>) -> String {
    let mut out = String::new();
    for (comment, m) in blocks {
        let charges = m.integer_charges();
        let with_charge = charges.iter().any(|&c| c != 0);
        let _ = writeln!(out, "{}", m.n_atoms());
        let _ = writeln!(out, "{comment}");
        for i in 0..m.n_atoms() {
            let r = m.coords.row(i);
            let _ = write!(out, "{} {:.6} {:.6} {:.6}", m.element_ids[i], r[0], r[1], r[2]);
            if with_charge {
                let _ = write!(out, " {}", charges[i]);
            }
            out.push('\n');
        }
    }
    out
}

pub fn write_xyz(mols: &[Molecule<f64>], path: &Path) -> Result<(), XyzError> {
    let comments: Vec<String> = (0..mols.len()).map(|i| format!("mol_{i}")).collect();
    let text = format_xyz(comments.iter().map(String::as_str).zip(mols));
    fs::write(path, text).map_err(|source| XyzError::Io { path: path.display().to_string(), source })
}
