//! Transformer building blocks on the autodiff tensor: linear layers,
//! multi-head attention, feed-forward nets, and pre-norm encoder blocks.
//!
//! Every layer registers its tensors into a flat `(name, tensor)` list; that
//! ordered list is the unit of work for checkpoints, momentum pairing, and
//! the optimizer, so registration order must stay deterministic.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{Result, Tensor};

/// Ordered named parameters. Names are dotted paths ("f_i.block0.attn.wq.w").
pub type ParamList = Vec<(String, Tensor)>;

pub const LAYER_NORM_EPS: f64 = 1e-5;
const WEIGHT_STD: f64 = 0.02;

/// Deterministic parameter factory. `trainable = false` builds constant
/// tensors with the same values — used for momentum copies, which must never
/// enter the autodiff graph.
pub struct Init {
    rng: ChaCha8Rng,
    trainable: bool,
}

impl Init {
    pub fn new(seed: u64, trainable: bool) -> Init {
        Init { rng: ChaCha8Rng::seed_from_u64(seed), trainable }
    }

    fn tensor(&self, data: Vec<f64>, shape: &[usize]) -> Tensor {
        let made = if self.trainable {
            Tensor::param(data, shape)
        } else {
            Tensor::new(data, shape)
        };
        made.expect("init shapes are internally consistent")
    }

    pub fn normal(&mut self, shape: &[usize], std: f64) -> Tensor {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("finite std");
        let data: Vec<f64> = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        self.tensor(data, shape)
    }

    pub fn constant(&self, shape: &[usize], value: f64) -> Tensor {
        let n: usize = shape.iter().product();
        self.tensor(vec![value; n], shape)
    }
}

pub struct Linear {
    pub w: Tensor, // [d_in, d_out]
    pub b: Tensor, // [d_out]
}

impl Linear {
    pub fn new(init: &mut Init, d_in: usize, d_out: usize) -> Linear {
        Linear {
            w: init.normal(&[d_in, d_out], WEIGHT_STD),
            b: init.constant(&[d_out], 0.0),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.matmul(&self.w)?.add_row(&self.b)
    }

    pub fn params(&self, prefix: &str, out: &mut ParamList) {
        out.push((format!("{prefix}.w"), self.w.clone()));
        out.push((format!("{prefix}.b"), self.b.clone()));
    }
}

pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl LayerNorm {
    pub fn new(init: &mut Init, d: usize) -> LayerNorm {
        LayerNorm {
            gamma: init.constant(&[d], 1.0),
            beta: init.constant(&[d], 0.0),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.layer_norm(&self.gamma, &self.beta, LAYER_NORM_EPS)
    }

    pub fn params(&self, prefix: &str, out: &mut ParamList) {
        out.push((format!("{prefix}.gamma"), self.gamma.clone()));
        out.push((format!("{prefix}.beta"), self.beta.clone()));
    }
}

/// Dot-product attention over full rows; queries and keys/values may come
/// from different token sets (cross-attention).
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    heads: usize,
    head_dim: usize,
}

impl MultiHeadAttention {
    pub fn new(init: &mut Init, d: usize, heads: usize) -> MultiHeadAttention {
        assert!(heads > 0 && d % heads == 0, "head count must divide width");
        MultiHeadAttention {
            wq: Linear::new(init, d, d),
            wk: Linear::new(init, d, d),
            wv: Linear::new(init, d, d),
            wo: Linear::new(init, d, d),
            heads,
            head_dim: d / heads,
        }
    }

    /// `queries`: [n_q, d]; `keys_values`: [n_kv, d] → [n_q, d].
    pub fn forward(&self, queries: &Tensor, keys_values: &Tensor) -> Result<Tensor> {
        let q = self.wq.forward(queries)?;
        let k = self.wk.forward(keys_values)?;
        let v = self.wv.forward(keys_values)?;
        let scale = 1.0 / (self.head_dim as f64).sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let start = h * self.head_dim;
            let qh = q.narrow_cols(start, self.head_dim)?;
            let kh = k.narrow_cols(start, self.head_dim)?;
            let vh = v.narrow_cols(start, self.head_dim)?;
            let attn = qh.matmul_t(&kh)?.scale(scale).softmax_rows()?;
            heads.push(attn.matmul(&vh)?);
        }
        self.wo.forward(&Tensor::concat_cols(&heads)?)
    }

    pub fn params(&self, prefix: &str, out: &mut ParamList) {
        self.wq.params(&format!("{prefix}.wq"), out);
        self.wk.params(&format!("{prefix}.wk"), out);
        self.wv.params(&format!("{prefix}.wv"), out);
        self.wo.params(&format!("{prefix}.wo"), out);
    }
}

/// Position-wise MLP, d → 4d → d with GELU.
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn new(init: &mut Init, d: usize) -> FeedForward {
        FeedForward {
            fc1: Linear::new(init, d, 4 * d),
            fc2: Linear::new(init, 4 * d, d),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(x)?.gelu())
    }

    pub fn params(&self, prefix: &str, out: &mut ParamList) {
        self.fc1.params(&format!("{prefix}.fc1"), out);
        self.fc2.params(&format!("{prefix}.fc2"), out);
    }
}

/// Pre-norm encoder block: x + attn(ln1(x)), then x + ffn(ln2(x)).
pub struct EncoderBlock {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub ffn: FeedForward,
}

impl EncoderBlock {
    pub fn new(init: &mut Init, d: usize, heads: usize) -> EncoderBlock {
        EncoderBlock {
            ln1: LayerNorm::new(init, d),
            attn: MultiHeadAttention::new(init, d, heads),
            ln2: LayerNorm::new(init, d),
            ffn: FeedForward::new(init, d),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let normed = self.ln1.forward(x)?;
        let x = x.add(&self.attn.forward(&normed, &normed)?)?;
        x.add(&self.ffn.forward(&self.ln2.forward(&x)?)?)
    }

    pub fn params(&self, prefix: &str, out: &mut ParamList) {
        self.ln1.params(&format!("{prefix}.ln1"), out);
        self.attn.params(&format!("{prefix}.attn"), out);
        self.ln2.params(&format!("{prefix}.ln2"), out);
        self.ffn.params(&format!("{prefix}.ffn"), out);
    }
}

/// Zero every tensor in a list (test helper for bias-path probes and
/// ablation wiring; also used to blank positional tables).
pub fn zero_params(params: &[(String, Tensor)]) {
    for (_, t) in params {
        t.set_data(&vec![0.0; t.len()]).expect("same length");
    }
}
