//! Annotation denoising: corrupt annotation features with bounded uniform
//! noise, then reconstruct the clean annotations through single-layer
//! transformer decoders that cross-attend to image tokens. The losses here
//! are what forces the image encoder to carry fine-grained pose information.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::dct::DctMap;
use crate::encoders::{EncoderConfig, KeypointFeatures, SpatialFeatures};
use crate::nn::{FeedForward, Init, LayerNorm, Linear, MultiHeadAttention, ParamList};
use crate::synthdata::Keypoints;
use crate::tensor::{Tensor, TensorError};

pub type Result<T> = std::result::Result<T, DenoiseError>;

#[derive(Debug, Error)]
pub enum DenoiseError {
    #[error("invalid denoise config: {reason}")]
    Config { reason: &'static str },
    #[error("noise scale {value} must be finite and nonnegative")]
    BadScale { value: f64 },
    #[error("loss weight {value} must be finite and nonnegative")]
    BadWeight { value: f64 },
    #[error("expected {want} {what}, got {got}")]
    WrongCount {
        what: &'static str,
        want: usize,
        got: usize,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Bounded uniform corruption. `scale` multiplies the per-tensor amplitude
/// `mu = max|f|`; the ablation grid runs it from 0 (no-op) to 10.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    pub scale: f64,
    pub rng_seed: u64,
}

impl NoiseSpec {
    pub fn new(scale: f64, rng_seed: u64) -> Result<NoiseSpec> {
        if !scale.is_finite() || scale < 0.0 {
            return Err(DenoiseError::BadScale { value: scale });
        }
        Ok(NoiseSpec { scale, rng_seed })
    }
}

/// `f + u` with `u ~ iid Uniform(-scale*mu, scale*mu)`, `mu = max|f|`. The
/// noise is a constant leaf, so gradients pass through untouched. A zero
/// amplitude returns the input tensor itself: not just equal values but the
/// same graph node, keeping the scale-0 path bitwise identical to no noise.
pub fn inject_noise(f: &Tensor, spec: &NoiseSpec) -> Tensor {
    let data = f.to_vec();
    let mu = data.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()));
    let bound = spec.scale * mu;
    if bound == 0.0 {
        return f.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    let noise: Vec<f64> = (0..data.len()).map(|_| rng.gen_range(-bound..bound)).collect();
    let noise = Tensor::new(noise, f.shape()).expect("same shape");
    f.add(&noise).expect("same shape")
}

/// Pre-norm decoder layer: self-attention over the (noisy) queries, then
/// cross-attention with image tokens as keys/values, then a feed-forward.
/// The query token count is preserved end to end.
pub struct DecoderLayer {
    pub ln1: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub ln3: LayerNorm,
    pub ffn: FeedForward,
}

impl DecoderLayer {
    pub fn new(init: &mut Init, d: usize, heads: usize) -> DecoderLayer {
        DecoderLayer {
            ln1: LayerNorm::new(init, d),
            self_attn: MultiHeadAttention::new(init, d, heads),
            ln2: LayerNorm::new(init, d),
            cross_attn: MultiHeadAttention::new(init, d, heads),
            ln3: LayerNorm::new(init, d),
            ffn: FeedForward::new(init, d),
        }
    }

    pub fn forward(&self, queries: &Tensor, context: &Tensor) -> crate::tensor::Result<Tensor> {
        let normed = self.ln1.forward(queries)?;
        let x = queries.add(&self.self_attn.forward(&normed, &normed)?)?;
        let x = x.add(&self.cross_attn.forward(&self.ln2.forward(&x)?, context)?)?;
        x.add(&self.ffn.forward(&self.ln3.forward(&x)?)?)
    }

    pub fn params(&self, prefix: &str, out: &mut ParamList) {
        self.ln1.params(&format!("{prefix}.ln1"), out);
        self.self_attn.params(&format!("{prefix}.self_attn"), out);
        self.ln2.params(&format!("{prefix}.ln2"), out);
        self.cross_attn.params(&format!("{prefix}.cross_attn"), out);
        self.ln3.params(&format!("{prefix}.ln3"), out);
        self.ffn.params(&format!("{prefix}.ffn"), out);
    }
}

/// Reconstructs standardized coefficient stacks, one row per map cell.
pub struct DctDecoder {
    pub layer: DecoderLayer,
    pub ln_out: LayerNorm,
    pub head: Linear,
}

impl DctDecoder {
    pub fn new(cfg: &EncoderConfig, seed: u64, trainable: bool) -> Result<DctDecoder> {
        cfg.validate().map_err(|_| DenoiseError::Config { reason: "bad encoder config" })?;
        let mut init = Init::new(seed, trainable);
        Ok(DctDecoder {
            layer: DecoderLayer::new(&mut init, cfg.embed_dim, cfg.heads),
            ln_out: LayerNorm::new(&mut init, cfg.embed_dim),
            head: Linear::new(&mut init, cfg.embed_dim, cfg.token_input_dim()),
        })
    }

    /// `[cells, 3*patch^2]` prediction in standardized-coefficient space.
    pub fn decode(&self, noisy: &SpatialFeatures, img: &SpatialFeatures) -> Result<Tensor> {
        let mixed = self.layer.forward(&noisy.tokens, &img.tokens)?;
        Ok(self.head.forward(&self.ln_out.forward(&mixed)?)?)
    }

    pub fn params(&self, prefix: &str, out: &mut ParamList) {
        self.layer.params(&format!("{prefix}.layer"), out);
        self.ln_out.params(&format!("{prefix}.ln_out"), out);
        self.head.params(&format!("{prefix}.head"), out);
    }
}

/// Per-axis coordinate classification: joint token -> logits over `k*W`
/// horizontal and `k*H` vertical bins.
pub struct SimCCHead {
    pub hx: Linear,
    pub hy: Linear,
    pub k: usize,
}

impl SimCCHead {
    pub fn new(init: &mut Init, d: usize, k: usize, view_w: usize, view_h: usize) -> Result<SimCCHead> {
        if k < 2 {
            return Err(DenoiseError::Config { reason: "bin multiplier k must be at least 2" });
        }
        Ok(SimCCHead {
            hx: Linear::new(init, d, k * view_w),
            hy: Linear::new(init, d, k * view_h),
            k,
        })
    }

    pub fn params(&self, prefix: &str, out: &mut ParamList) {
        self.hx.params(&format!("{prefix}.hx"), out);
        self.hy.params(&format!("{prefix}.hy"), out);
    }
}

/// Reconstructs keypoint coordinates as per-axis bin logits.
pub struct KeypointDecoder {
    pub layer: DecoderLayer,
    pub ln_out: LayerNorm,
    pub head: SimCCHead,
}

impl KeypointDecoder {
    pub fn new(cfg: &EncoderConfig, k: usize, seed: u64, trainable: bool) -> Result<KeypointDecoder> {
        cfg.validate().map_err(|_| DenoiseError::Config { reason: "bad encoder config" })?;
        let mut init = Init::new(seed, trainable);
        Ok(KeypointDecoder {
            layer: DecoderLayer::new(&mut init, cfg.embed_dim, cfg.heads),
            ln_out: LayerNorm::new(&mut init, cfg.embed_dim),
            head: SimCCHead::new(&mut init, cfg.embed_dim, k, cfg.view_width(), cfg.view_height())?,
        })
    }

    /// `(logits_x [K, k*W], logits_y [K, k*H])`.
    pub fn decode(&self, noisy: &KeypointFeatures, img: &SpatialFeatures) -> Result<(Tensor, Tensor)> {
        let mixed = self.ln_out.forward(&self.layer.forward(&noisy.tokens, &img.tokens)?)?;
        Ok((self.head.hx.forward(&mixed)?, self.head.hy.forward(&mixed)?))
    }

    pub fn params(&self, prefix: &str, out: &mut ParamList) {
        self.layer.params(&format!("{prefix}.layer"), out);
        self.ln_out.params(&format!("{prefix}.ln_out"), out);
        self.head.params(&format!("{prefix}.head"), out);
    }
}

/// Target rows for the coefficient loss, in the token order the spatial
/// encoder uses (cells row-major, each row a full channel stack).
pub fn dct_target_tensor(map: &DctMap) -> Result<Tensor> {
    let mut rows = Vec::with_capacity(map.cells() * map.channels());
    for gy in 0..map.grid_h {
        for gx in 0..map.grid_w {
            rows.extend(map.patch_vector(gy, gx));
        }
    }
    Ok(Tensor::new(rows, &[map.cells(), map.channels()])?)
}

/// Mean absolute error between prediction and standardized target.
pub fn loss_dct(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    Ok(pred.l1_loss(target)?)
}

/// Classification bin for a coordinate: `round(coord * k)`, clamped.
pub fn bin_for(coord: f64, k: usize, extent_px: usize) -> usize {
    let top = (k * extent_px) as isize - 1;
    ((coord * k as f64).round() as isize).clamp(0, top) as usize
}

/// Mean over visible joints and both axes of the one-hot KL to the true
/// coordinate bins. No visible joints is defined as zero, flagged.
pub fn loss_keypoint(
    logits_x: &Tensor,
    logits_y: &Tensor,
    kp: &Keypoints,
    k: usize,
    view: (usize, usize),
) -> Result<(Tensor, bool)> {
    let (view_w, view_h) = view;
    let joints = kp.joints.len();
    if logits_x.shape()[0] != joints || logits_y.shape()[0] != joints {
        return Err(DenoiseError::WrongCount {
            what: "logit rows",
            want: joints,
            got: logits_x.shape()[0],
        });
    }
    let mut visible = Vec::new();
    let mut bins_x = Vec::new();
    let mut bins_y = Vec::new();
    for (j, joint) in kp.joints.iter().enumerate() {
        if joint.visible {
            visible.push(j);
            bins_x.push(bin_for(joint.x, k, view_w));
            bins_y.push(bin_for(joint.y, k, view_h));
        }
    }
    if visible.is_empty() {
        return Ok((Tensor::scalar(0.0), true));
    }
    let lx = logits_x.gather_rows(&visible)?.kl_div_onehot(&bins_x)?;
    let ly = logits_y.gather_rows(&visible)?.kl_div_onehot(&bins_y)?;
    Ok((lx.add(&ly)?.scale(0.5), false))
}

/// Weighted combination of the two reconstruction losses.
#[derive(Debug, Clone)]
pub struct DenoiseLosses {
    pub l_dct: Tensor,
    pub l_kp: Tensor,
    pub l_de: Tensor,
    pub lambda1: f64,
    pub lambda2: f64,
    /// Set when the keypoint term was skipped for lack of visible joints.
    pub no_visible_joints: bool,
}

impl DenoiseLosses {
    pub fn combine(
        l_kp: Tensor,
        l_dct: Tensor,
        lambda1: f64,
        lambda2: f64,
        no_visible_joints: bool,
    ) -> Result<DenoiseLosses> {
        for w in [lambda1, lambda2] {
            if !w.is_finite() || w < 0.0 {
                return Err(DenoiseError::BadWeight { value: w });
            }
        }
        let l_de = l_kp.scale(lambda1).add(&l_dct.scale(lambda2))?;
        Ok(DenoiseLosses { l_dct, l_kp, l_de, lambda1, lambda2, no_visible_joints })
    }
}
