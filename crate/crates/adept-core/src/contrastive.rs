//! Momentum-contrast objective: InfoNCE between an online query and its
//! momentum key, with negatives drawn from a FIFO queue of past keys.

use thiserror::Error;

use crate::tensor::{Tensor, TensorError};

pub type Result<T> = std::result::Result<T, ContrastError>;

#[derive(Debug, Error)]
pub enum ContrastError {
    #[error("temperature {value} must be positive")]
    BadTemperature { value: f64 },
    #[error("queue capacity must be nonzero")]
    ZeroCapacity,
    #[error("loss requested before any keys were enqueued")]
    EmptyQueue,
    #[error("batch of {batch} exceeds queue capacity {capacity}")]
    BatchTooLarge { batch: usize, capacity: usize },
    #[error("key norm {norm} deviates from 1 by more than 1e-6")]
    NotNormalized { norm: f64 },
    #[error("key width {got} does not match queue width {want}")]
    WidthMismatch { want: usize, got: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Fixed-capacity ring of unit-norm key vectors, oldest overwritten first.
#[derive(Debug, Clone)]
pub struct FeatureQueue {
    capacity: usize,
    dim: usize,
    /// Flat ring storage, `capacity * dim` once full.
    storage: Vec<f64>,
    cursor: usize,
    fill: usize,
}

impl FeatureQueue {
    pub fn new(capacity: usize, dim: usize) -> Result<FeatureQueue> {
        if capacity == 0 || dim == 0 {
            return Err(ContrastError::ZeroCapacity);
        }
        Ok(FeatureQueue {
            capacity,
            dim,
            storage: Vec::with_capacity(capacity * dim),
            cursor: 0,
            fill: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.fill
    }

    pub fn is_empty(&self) -> bool {
        self.fill == 0
    }

    fn check_key(&self, key: &[f64]) -> Result<()> {
        if key.len() != self.dim {
            return Err(ContrastError::WidthMismatch { want: self.dim, got: key.len() });
        }
        let norm = key.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(ContrastError::NotNormalized { norm });
        }
        Ok(())
    }

    /// Append a batch, overwriting the oldest entries once full.
    pub fn enqueue_dequeue(&mut self, batch: &[Vec<f64>]) -> Result<()> {
        if batch.len() > self.capacity {
            return Err(ContrastError::BatchTooLarge {
                batch: batch.len(),
                capacity: self.capacity,
            });
        }
        for key in batch {
            self.check_key(key)?;
        }
        for key in batch {
            if self.storage.len() < self.capacity * self.dim {
                self.storage.extend_from_slice(key);
            } else {
                self.storage[self.cursor * self.dim..(self.cursor + 1) * self.dim]
                    .copy_from_slice(key);
            }
            self.cursor = (self.cursor + 1) % self.capacity;
            self.fill = (self.fill + 1).min(self.capacity);
        }
        Ok(())
    }

    /// Entries oldest to newest.
    pub fn ordered(&self) -> Vec<Vec<f64>> {
        let mut out = Vec::with_capacity(self.fill);
        let start = if self.fill < self.capacity { 0 } else { self.cursor };
        for i in 0..self.fill {
            let idx = (start + i) % self.capacity;
            out.push(self.storage[idx * self.dim..(idx + 1) * self.dim].to_vec());
        }
        out
    }

    /// Constant `[fill, dim]` tensor of the current entries (storage order;
    /// the loss below does not depend on it).
    pub fn as_tensor(&self) -> Result<Tensor> {
        if self.fill == 0 {
            return Err(ContrastError::EmptyQueue);
        }
        Ok(Tensor::new(self.storage.clone(), &[self.fill, self.dim])?)
    }
}

/// `-log( exp(q·k+/tau) / (exp(q·k+/tau) + sum_i exp(q·S_i/tau)) )`.
///
/// The positive similarity appears in the denominator (the usual momentum-
/// contrast form); `info_nce_excluding_positive` gives the variant whose
/// denominator holds queue terms only. Gradients flow into `q`'s producing
/// path alone: the positive key is detached and queue entries are constants.
pub fn info_nce(q: &Tensor, k_pos: &Tensor, queue: &FeatureQueue, tau: f64) -> Result<Tensor> {
    let (pos, neg) = similarity_logits(q, k_pos, queue, tau)?;
    let logits = Tensor::concat_cols(&[pos, neg])?;
    Ok(logits.kl_div_onehot(&[0])?)
}

/// Literal-reading variant: `logsumexp(q·S/tau) - q·k+/tau`.
pub fn info_nce_excluding_positive(
    q: &Tensor,
    k_pos: &Tensor,
    queue: &FeatureQueue,
    tau: f64,
) -> Result<Tensor> {
    let (pos, neg) = similarity_logits(q, k_pos, queue, tau)?;
    Ok(neg.logsumexp_rows()?.reshape(&[])?.sub(&pos.reshape(&[])?)?)
}

fn similarity_logits(
    q: &Tensor,
    k_pos: &Tensor,
    queue: &FeatureQueue,
    tau: f64,
) -> Result<(Tensor, Tensor)> {
    if !(tau > 0.0) {
        return Err(ContrastError::BadTemperature { value: tau });
    }
    let negatives = queue.as_tensor()?;
    let pos = q.matmul_t(&k_pos.detach())?.scale(1.0 / tau);
    let neg = q.matmul_t(&negatives)?.scale(1.0 / tau);
    Ok((pos, neg))
}
