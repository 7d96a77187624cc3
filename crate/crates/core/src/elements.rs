use crate::error::{LmdmError, Result};

/// Ordered element symbols; the position of a symbol is its one-hot column.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ElementVocab {
    symbols: Vec<String>,
}

impl Default for ElementVocab {
    fn default() -> Self {
        Self::new(["H", "C", "N", "O", "F"]).expect("default vocabulary is valid")
    }
}

impl ElementVocab {
    pub fn new<I, S>(symbols: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let symbols: Vec<String> = symbols.into_iter().map(Into::into).collect();
        if symbols.is_empty() {
            return Err(LmdmError::Empty("element vocabulary"));
        }
        for (i, s) in symbols.iter().enumerate() {
            if symbols[..i].contains(s) {
                return Err(LmdmError::Config(format!("duplicate element {s} in vocabulary")));
            }
        }
        Ok(Self { symbols })
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    /// Width of a feature row: one-hot block plus one charge column.
    pub fn feature_dim(&self) -> usize {
        self.symbols.len() + 1
    }

    pub fn index_of(&self, symbol: &str) -> Result<usize> {
        self.symbols
            .iter()
            .position(|s| s == symbol)
            .ok_or_else(|| LmdmError::UnsupportedElement(symbol.to_string()))
    }

    pub fn symbol(&self, index: usize) -> &str {
        &self.symbols[index]
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }
}
