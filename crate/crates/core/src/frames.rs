//! Plain row-major frame blocks (`frames × dim`).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frames {
    pub rows: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl Frames {
    pub fn new(rows: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * dim {
            return Err(Error::shape("frames", &[rows, dim], &[data.len()]));
        }
        Ok(Self { rows, dim, data })
    }

    pub fn zeros(rows: usize, dim: usize) -> Self {
        Self {
            rows,
            dim,
            data: vec![0.0; rows * dim],
        }
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.dim]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.dim..(r + 1) * self.dim]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.dim..(r + 1) * self.dim]
    }

    pub fn check_same(&self, other: &Frames, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(op, &self.shape(), &other.shape()));
        }
        Ok(())
    }

    /// Vertical concatenation.
    pub fn stack(parts: &[Frames]) -> Result<Frames> {
        let dim = parts.first().map(|p| p.dim).unwrap_or(0);
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.dim != dim {
                return Err(Error::shape("stack", &[rows, dim], &p.shape()));
            }
            rows += p.rows;
            data.extend_from_slice(&p.data);
        }
        Ok(Frames { rows, dim, data })
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Frames {
        Frames {
            rows: len,
            dim: self.dim,
            data: self.data[start * self.dim..(start + len) * self.dim].to_vec(),
        }
    }

    pub fn add(&self, other: &Frames) -> Result<Frames> {
        self.check_same(other, "add")?;
        Ok(Frames {
            rows: self.rows,
            dim: self.dim,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
