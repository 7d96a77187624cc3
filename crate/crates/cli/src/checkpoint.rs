//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//! `"LMDM"`, `u32` version, `u8` stage (0 = ae, 1 = diffusion), `u64` seed,
//! `u32` length + UTF-8 config snapshot, `u32` array count, then per array
//! `u32` length + UTF-8 name, `u32` rank, `u64` per dimension and the `f64`
//! values in row-major order.

use std::fs;
use std::path::Path;

use lmdm_core::autodiff::ParamStore;
use lmdm_core::Matrix;
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"LMDM";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("unknown stage tag {0}")]
    Stage(u8),
    #[error("truncated checkpoint")]
    Truncated,
    #[error("{0} trailing bytes after the last array")]
    Trailing(usize),
    #[error("invalid UTF-8 in {0}")]
    Utf8(&'static str),
    #[error("array {name}: {message}")]
    Array { name: String, message: String },
    #[error("expected a {expected} checkpoint, found {found}")]
    WrongStage { expected: &'static str, found: &'static str },
    #[error("parameter mismatch: {0}")]
    Params(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckpointStage {
    Ae,
    Diffusion,
}

impl CheckpointStage {
    pub fn name(self) -> &'static str {
        match self {
            CheckpointStage::Ae => "ae",
            CheckpointStage::Diffusion => "diffusion",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub dims: Vec<u64>,
    pub values: Vec<f64>,
}

impl NamedArray {
    pub fn from_matrix(name: &str, m: &Matrix<f64>) -> Self {
        Self { name: name.to_string(), dims: vec![m.rows() as u64, m.cols() as u64], values: m.as_slice().to_vec() }
    }

    pub fn vector(name: &str, values: Vec<f64>) -> Self {
        Self { name: name.to_string(), dims: vec![values.len() as u64], values }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub stage: CheckpointStage,
    pub seed: u64,
    pub config: String,
    pub arrays: Vec<NamedArray>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(CheckpointError::Truncated)?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self, what: &'static str) -> Result<String, CheckpointError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| CheckpointError::Utf8(what))
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(match self.stage {
            CheckpointStage::Ae => 0,
            CheckpointStage::Diffusion => 1,
        });
        out.extend_from_slice(&self.seed.to_le_bytes());
        put_str(&mut out, &self.config);
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for a in &self.arrays {
            put_str(&mut out, &a.name);
            out.extend_from_slice(&(a.dims.len() as u32).to_le_bytes());
            for d in &a.dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            for v in &a.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4).map_err(|_| CheckpointError::BadMagic)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let stage = match r.u8()? {
            0 => CheckpointStage::Ae,
            1 => CheckpointStage::Diffusion,
            s => return Err(CheckpointError::Stage(s)),
        };
        let seed = r.u64()?;
        let config = r.string("config")?;
        let count = r.u32()?;
        let mut arrays = Vec::new();
        for _ in 0..count {
            let name = r.string("array name")?;
            let rank = r.u32()?;
            let dims = (0..rank).map(|_| r.u64()).collect::<Result<Vec<_>, _>>()?;
            let len = dims.iter().try_fold(1u64, |acc, &d| acc.checked_mul(d)).ok_or_else(|| CheckpointError::Array {
                name: name.clone(),
                message: "dimension product overflows".into(),
            })?;
            let raw = r.take(usize::try_from(len).ok().and_then(|l| l.checked_mul(8)).ok_or(CheckpointError::Truncated)?)?;
            let values = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            arrays.push(NamedArray { name, dims, values });
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::Trailing(bytes.len() - r.pos));
        }
        Ok(Self { stage, seed, config, arrays })
    }

    pub fn write(&self, path: &Path) -> Result<(), CheckpointError> {
        fs::write(path, self.to_bytes()).map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })
    }

    pub fn read(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = fs::read(path).map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })?;
        Self::from_bytes(&bytes)
    }

    pub fn expect_stage(&self, stage: CheckpointStage) -> Result<(), CheckpointError> {
        if self.stage == stage {
            Ok(())
        } else {
            Err(CheckpointError::WrongStage { expected: stage.name(), found: self.stage.name() })
        }
    }

    pub fn array(&self, name: &str) -> Option<&NamedArray> {
        self.arrays.iter().find(|a| a.name == name)
    }

    /// Every parameter of `store`, in registration order.
    pub fn params_to_arrays(store: &ParamStore<f64>) -> Vec<NamedArray> {
        store.iter().map(|(name, m)| NamedArray::from_matrix(name, m)).collect()
    }

    /// Overwrites every parameter of `store` from the arrays named `prefix*`;
    /// names and shapes must match exactly.
    pub fn load_params(&self, store: &mut ParamStore<f64>, prefix: &str) -> Result<(), CheckpointError> {
        let stored: Vec<&NamedArray> = self.arrays.iter().filter(|a| a.name.starts_with(prefix)).collect();
        if stored.len() != store.len() {
            return Err(CheckpointError::Params(format!(
                "checkpoint holds {} parameter arrays, model expects {}",
                stored.len(),
                store.len()
            )));
        }
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let name = store.name(id).to_string();
            let a = stored.iter().find(|a| a.name == name).ok_or_else(|| CheckpointError::Params(format!("missing {name}")))?;
            let m = store.get_mut(id);
            if a.dims != [m.rows() as u64, m.cols() as u64] {
                return Err(CheckpointError::Params(format!("{name}: shape {:?} vs {}×{}", a.dims, m.rows(), m.cols())));
            }
            m.as_mut_slice().copy_from_slice(&a.values);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            stage: CheckpointStage::Diffusion,
            seed: 42,
            config: "k = 1\n".into(),
            arrays: vec![
                NamedArray { name: "a.w".into(), dims: vec![2, 2], values: vec![1.0, -2.5, f64::MIN_POSITIVE, 3e300] },
                NamedArray::vector("meta.x", vec![]),
            ],
        }
    }

    #[test]
    fn byte_exact_round_trip() {
        let c = sample();
        let b = c.to_bytes();
        let back = Checkpoint::from_bytes(&b).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), b);
        assert_eq!(&b[..4], b"LMDM");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
        assert_eq!(b[8], 1);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let b = sample().to_bytes();
        assert!(matches!(Checkpoint::from_bytes(b"LMD"), Err(CheckpointError::BadMagic)));
        assert!(matches!(Checkpoint::from_bytes(&b[..b.len() - 1]), Err(CheckpointError::Truncated)));
        let mut extra = b.clone();
        extra.push(0);
        assert!(matches!(Checkpoint::from_bytes(&extra), Err(CheckpointError::Trailing(1))));
        let mut v = b.clone();
        v[4] = 9;
        assert!(matches!(Checkpoint::from_bytes(&v), Err(CheckpointError::Version(9))));
    }

    #[test]
    fn params_load_by_name() {
        let mut store = ParamStore::<f64>::new();
        store.add("m.a", Matrix::zeros(1, 2));
        store.add("m.b", Matrix::zeros(2, 1));
        let mut src = ParamStore::<f64>::new();
        src.add("m.b", Matrix::from_f64_rows(&[[3.0], [4.0]]));
        src.add("m.a", Matrix::from_f64_rows(&[[1.0, 2.0]]));
        let c = Checkpoint { stage: CheckpointStage::Ae, seed: 0, config: String::new(), arrays: Checkpoint::params_to_arrays(&src) };
        c.load_params(&mut store, "m.").unwrap();
        assert_eq!(store.get(store.find("m.b").unwrap()).as_slice(), &[3.0, 4.0]);
        let mut wrong = ParamStore::<f64>::new();
        wrong.add("m.a", Matrix::zeros(2, 1));
        wrong.add("m.b", Matrix::zeros(2, 1));
        assert!(c.load_params(&mut wrong, "m.").is_err());
    }
}
