//! FIFO ring buffer of negative key embeddings.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// K x d ring buffer of L2-normalized rows with a write cursor.
#[derive(Debug, Clone, PartialEq)]
pub struct NegativeQueue {
    k: usize,
    dim: usize,
    data: Vec<f32>,
    cursor: usize,
}

impl NegativeQueue {
    /// Queue filled with random unit vectors.
    pub fn random(k: usize, dim: usize, seed: u64) -> Result<Self> {
        if k == 0 || dim == 0 {
            return Err(Error::Config(format!("queue {k}x{dim} must be non-empty")));
        }
        let mut rng = Rng::stream(seed, "moco.queue");
        let mut data = vec![0.0f32; k * dim];
        for row in data.chunks_mut(dim) {
            let mut sq = 0.0f64;
            for v in row.iter_mut() {
                *v = rng.normal_f64() as f32;
                sq += (*v as f64) * (*v as f64);
            }
            let inv = (1.0 / sq.sqrt()) as f32;
            for v in row.iter_mut() {
                *v *= inv;
            }
        }
        Ok(NegativeQueue { k, dim, data, cursor: 0 })
    }

    pub fn len(&self) -> usize {
        self.k
    }

    pub fn is_empty(&self) -> bool {
        self.k == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks(self.dim)
    }

    /// Snapshot as a `[K, d]` tensor in storage order.
    pub fn as_tensor(&self) -> Tensor<f32> {
        Tensor::new(vec![self.k, self.dim], self.data.clone()).expect("queue dims")
    }

    /// Replace the oldest `B` rows with a new key batch (FIFO).
    pub fn enqueue(&mut self, batch: &Tensor<f32>) -> Result<()> {
        if batch.rank() != 2 || batch.shape()[1] != self.dim {
            return Err(Error::shape(format!(
                "key batch {:?} does not match queue dim {}",
                batch.shape(),
                self.dim
            )));
        }
        let b = batch.shape()[0];
        if b > self.k {
            return Err(Error::Data(format!("batch of {b} larger than queue of {}", self.k)));
        }
        for (r, row) in batch.data().chunks(self.dim).enumerate() {
            let norm: f64 = row.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-3 {
                return Err(Error::Numeric(format!(
                    "enqueued row {r} has norm {norm:.6}, expected 1"
                )));
            }
            let slot = (self.cursor + r) % self.k;
            self.data[slot * self.dim..(slot + 1) * self.dim].copy_from_slice(row);
        }
        self.cursor = (self.cursor + b) % self.k;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.data.len() * 4);
        out.extend_from_slice(&(self.k as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.cursor as u32).to_le_bytes());
        for &v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 {
            return Err(Error::Format { offset: Some(0), msg: "queue blob too short".into() });
        }
        let k = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
        let dim = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let cursor = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let want = 12 + k * dim * 4;
        if bytes.len() != want || cursor >= k.max(1) {
            return Err(Error::Format {
                offset: Some(12),
                msg: format!("queue blob length {} != {want} or cursor {cursor} out of range", bytes.len()),
            });
        }
        let data = bytes[12..].chunks(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        Ok(NegativeQueue { k, dim, data, cursor })
    }
}
