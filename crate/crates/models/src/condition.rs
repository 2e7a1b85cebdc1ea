use serde::{Deserialize, Serialize};

use crate::error::{ModelError, Result};

/// One-hot selector among `len` conditions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Condition {
    index: usize,
    len: usize,
}

impl Condition {
    pub fn new(index: usize, len: usize) -> Result<Self> {
        if index >= len {
            return Err(ModelError::arg(format!(
                "condition {index} out of range for {len} entries"
            )));
        }
        Ok(Condition { index, len })
    }

    pub fn from_onehot(v: &[f32]) -> Result<Self> {
        let ones: Vec<usize> = (0..v.len()).filter(|&i| v[i] == 1.0).collect();
        if ones.len() != 1 || v.iter().any(|&x| x != 0.0 && x != 1.0) {
            return Err(ModelError::arg(
                "condition must contain exactly one 1 and zeros elsewhere",
            ));
        }
        Self::new(ones[0], v.len())
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn onehot(&self) -> Vec<f32> {
        (0..self.len).map(|i| if i == self.index { 1.0 } else { 0.0 }).collect()
    }
}
