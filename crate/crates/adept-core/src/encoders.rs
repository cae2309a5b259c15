//! The three feature encoders and their contrastive plumbing: a patch-token
//! transformer shared by image and frequency-map inputs, an embedding-table
//! encoder for keypoints, a pooled projection head, and the momentum pairing
//! that drives the key path.

use thiserror::Error;

use crate::dct::{DctMap, ImageRgb};
use crate::nn::{EncoderBlock, Init, LayerNorm, Linear, ParamList};
use crate::synthdata::Keypoints;
use crate::tensor::{Tensor, TensorError};

pub type Result<T> = std::result::Result<T, EncoderError>;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("invalid encoder config: {reason}")]
    Config { reason: &'static str },
    #[error("{what} is {got_h}x{got_w}, encoder expects {want_h}x{want_w}")]
    Geometry {
        what: &'static str,
        want_h: usize,
        want_w: usize,
        got_h: usize,
        got_w: usize,
    },
    #[error("expected {want} keypoints, got {got}")]
    KeypointCount { want: usize, got: usize },
    #[error("visible joint {joint} at ({x:.1}, {y:.1}) lies outside the {w}x{h} view")]
    KeypointOutOfView {
        joint: usize,
        x: f64,
        y: f64,
        w: usize,
        h: usize,
    },
    #[error("parameter lists disagree at index {index}: {left} vs {right}")]
    ParamMismatch {
        index: usize,
        left: String,
        right: String,
    },
    #[error("momentum factor {value} outside [0, 1]")]
    BadMomentum { value: f64 },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Pixel width of one coordinate-embedding bin in the keypoint encoder.
pub const KEYPOINT_BIN_PX: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncoderConfig {
    /// Token width d.
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    /// Token grid (rows, cols); one token per image patch / map cell.
    pub token_grid: (usize, usize),
    pub keypoint_count: usize,
    /// Pixels per token side; view is `token_grid * patch`.
    pub patch: usize,
    /// Contrastive projection width.
    pub proj_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> EncoderConfig {
        EncoderConfig {
            embed_dim: 64,
            depth: 2,
            heads: 4,
            token_grid: (8, 8),
            keypoint_count: 14,
            patch: 8,
            proj_dim: 32,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(EncoderError::Config {
                reason: "head count must divide a nonzero embed_dim",
            });
        }
        if self.depth == 0 {
            return Err(EncoderError::Config { reason: "depth must be at least 1" });
        }
        if self.token_grid.0 == 0 || self.token_grid.1 == 0 || self.patch == 0 {
            return Err(EncoderError::Config { reason: "token grid and patch must be nonzero" });
        }
        if self.keypoint_count == 0 || self.proj_dim == 0 {
            return Err(EncoderError::Config {
                reason: "keypoint count and projection width must be nonzero",
            });
        }
        Ok(())
    }

    pub fn tokens(&self) -> usize {
        self.token_grid.0 * self.token_grid.1
    }

    /// Flattened per-token input width (RGB patch or coefficient stack).
    pub fn token_input_dim(&self) -> usize {
        3 * self.patch * self.patch
    }

    pub fn view_height(&self) -> usize {
        self.token_grid.0 * self.patch
    }

    pub fn view_width(&self) -> usize {
        self.token_grid.1 * self.patch
    }
}

/// Token features for a spatial input, row-major over the token grid.
#[derive(Debug, Clone)]
pub struct SpatialFeatures {
    /// `[grid.0 * grid.1, d]`
    pub tokens: Tensor,
    pub grid: (usize, usize),
}

/// One token per joint.
#[derive(Debug, Clone)]
pub struct KeypointFeatures {
    /// `[K, d]`
    pub tokens: Tensor,
}

/// Patch-token transformer. The same architecture serves images (flattened
/// RGB patches, scaled to [0,1]) and frequency maps (per-cell coefficient
/// stacks, standardized upstream); the two uses get independent instances.
pub struct SpatialEncoder {
    pub cfg: EncoderConfig,
    pub patch_embed: Linear,
    /// Learned absolute positions, `[tokens, d]`.
    pub pos: Tensor,
    pub blocks: Vec<EncoderBlock>,
    pub ln_out: LayerNorm,
}

impl SpatialEncoder {
    pub fn new(cfg: &EncoderConfig, seed: u64, trainable: bool) -> Result<SpatialEncoder> {
        cfg.validate()?;
        let mut init = Init::new(seed, trainable);
        let d = cfg.embed_dim;
        let patch_embed = Linear::new(&mut init, cfg.token_input_dim(), d);
        let pos = init.normal(&[cfg.tokens(), d], 0.02);
        let blocks = (0..cfg.depth).map(|_| EncoderBlock::new(&mut init, d, cfg.heads)).collect();
        let ln_out = LayerNorm::new(&mut init, d);
        Ok(SpatialEncoder { cfg: *cfg, patch_embed, pos, blocks, ln_out })
    }

    fn forward_rows(&self, rows: Vec<f64>) -> Result<SpatialFeatures> {
        let x = Tensor::new(rows, &[self.cfg.tokens(), self.cfg.token_input_dim()])
            .map_err(EncoderError::Tensor)?;
        let mut x = self.patch_embed.forward(&x)?.add(&self.pos)?;
        for block in &self.blocks {
            x = block.forward(&x)?;
        }
        Ok(SpatialFeatures {
            tokens: self.ln_out.forward(&x)?,
            grid: self.cfg.token_grid,
        })
    }

    /// Tokenize an RGB image: one token per `patch x patch` tile, pixel
    /// triples flattened row-major and scaled to [0, 1].
    pub fn encode_image(&self, img: &ImageRgb) -> Result<SpatialFeatures> {
        let (h, w) = (self.cfg.view_height(), self.cfg.view_width());
        if img.height() != h || img.width() != w {
            return Err(EncoderError::Geometry {
                what: "image",
                want_h: h,
                want_w: w,
                got_h: img.height(),
                got_w: img.width(),
            });
        }
        let p = self.cfg.patch;
        let mut rows = Vec::with_capacity(self.cfg.tokens() * self.cfg.token_input_dim());
        for gy in 0..self.cfg.token_grid.0 {
            for gx in 0..self.cfg.token_grid.1 {
                for py in 0..p {
                    for px in 0..p {
                        let rgb = img.pixel(gy * p + py, gx * p + px);
                        rows.extend(rgb.iter().map(|v| v / 255.0));
                    }
                }
            }
        }
        self.forward_rows(rows)
    }

    /// Tokenize a coefficient map: one token per grid cell, using the cell's
    /// full channel stack. Expects standardized coefficients.
    pub fn encode_dct(&self, map: &DctMap) -> Result<SpatialFeatures> {
        if (map.grid_h, map.grid_w) != self.cfg.token_grid || map.patch != self.cfg.patch {
            return Err(EncoderError::Geometry {
                what: "coefficient map",
                want_h: self.cfg.token_grid.0,
                want_w: self.cfg.token_grid.1,
                got_h: map.grid_h,
                got_w: map.grid_w,
            });
        }
        let mut rows = Vec::with_capacity(self.cfg.tokens() * self.cfg.token_input_dim());
        for gy in 0..map.grid_h {
            for gx in 0..map.grid_w {
                rows.extend(map.patch_vector(gy, gx));
            }
        }
        self.forward_rows(rows)
    }

    pub fn params(&self, prefix: &str, out: &mut ParamList) {
        self.patch_embed.params(&format!("{prefix}.patch_embed"), out);
        out.push((format!("{prefix}.pos"), self.pos.clone()));
        for (i, block) in self.blocks.iter().enumerate() {
            block.params(&format!("{prefix}.block{i}"), out);
        }
        self.ln_out.params(&format!("{prefix}.ln_out"), out);
    }
}

/// Embedding-table encoder for keypoint sets: joint identity plus binned
/// x/y coordinate embeddings; invisible joints collapse to a shared mask
/// token that carries no identity or position.
pub struct KeypointEncoder {
    pub cfg: EncoderConfig,
    pub joint_embed: Tensor,
    pub x_embed: Tensor,
    pub y_embed: Tensor,
    pub mask: Tensor,
}

impl KeypointEncoder {
    pub fn new(cfg: &EncoderConfig, seed: u64, trainable: bool) -> Result<KeypointEncoder> {
        cfg.validate()?;
        let mut init = Init::new(seed, trainable);
        let d = cfg.embed_dim;
        Ok(KeypointEncoder {
            cfg: *cfg,
            joint_embed: init.normal(&[cfg.keypoint_count, d], 0.02),
            x_embed: init.normal(&[Self::bins(cfg.view_width()), d], 0.02),
            y_embed: init.normal(&[Self::bins(cfg.view_height()), d], 0.02),
            mask: init.normal(&[1, d], 0.02),
        })
    }

    fn bins(extent_px: usize) -> usize {
        (extent_px as f64 / KEYPOINT_BIN_PX).ceil() as usize
    }

    pub fn bin_index(coord: f64, extent_px: usize) -> usize {
        let b = (coord / KEYPOINT_BIN_PX).floor() as isize;
        b.clamp(0, Self::bins(extent_px) as isize - 1) as usize
    }

    pub fn encode(&self, kp: &Keypoints) -> Result<KeypointFeatures> {
        let k = self.cfg.keypoint_count;
        if kp.joints.len() != k {
            return Err(EncoderError::KeypointCount { want: k, got: kp.joints.len() });
        }
        let (h, w) = (self.cfg.view_height(), self.cfg.view_width());
        let mut rows = Vec::with_capacity(k);
        for (j, joint) in kp.joints.iter().enumerate() {
            if !joint.visible {
                rows.push(self.mask.clone());
                continue;
            }
            if !(0.0..w as f64).contains(&joint.x) || !(0.0..h as f64).contains(&joint.y) {
                return Err(EncoderError::KeypointOutOfView {
                    joint: j,
                    x: joint.x,
                    y: joint.y,
                    w,
                    h,
                });
            }
            let bx = Self::bin_index(joint.x, w);
            let by = Self::bin_index(joint.y, h);
            let row = self
                .joint_embed
                .gather_rows(&[j])?
                .add(&self.x_embed.gather_rows(&[bx])?)?
                .add(&self.y_embed.gather_rows(&[by])?)?;
            rows.push(row);
        }
        Ok(KeypointFeatures { tokens: Tensor::concat_rows(&rows)? })
    }

    pub fn params(&self, prefix: &str, out: &mut ParamList) {
        out.push((format!("{prefix}.joint_embed"), self.joint_embed.clone()));
        out.push((format!("{prefix}.x_embed"), self.x_embed.clone()));
        out.push((format!("{prefix}.y_embed"), self.y_embed.clone()));
        out.push((format!("{prefix}.mask"), self.mask.clone()));
    }
}

/// Mean-pool tokens, run a two-layer MLP, L2-normalize. Output lives on the
/// unit sphere in `proj_dim` dimensions.
pub struct ProjectionHead {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl ProjectionHead {
    pub fn new(cfg: &EncoderConfig, seed: u64, trainable: bool) -> Result<ProjectionHead> {
        cfg.validate()?;
        let mut init = Init::new(seed, trainable);
        Ok(ProjectionHead {
            fc1: Linear::new(&mut init, cfg.embed_dim, cfg.embed_dim),
            fc2: Linear::new(&mut init, cfg.embed_dim, cfg.proj_dim),
        })
    }

    /// MLP output before normalization, `[1, proj_dim]`.
    pub fn pre_norm(&self, feats: &SpatialFeatures) -> Result<Tensor> {
        let (n, d) = (feats.tokens.shape()[0], feats.tokens.shape()[1]);
        debug_assert_eq!(n, feats.grid.0 * feats.grid.1);
        let pooled = feats.tokens.mean_rows()?.reshape(&[1, d])?;
        Ok(self.fc2.forward(&self.fc1.forward(&pooled)?.relu())?)
    }

    /// Unit-norm projection, `[1, proj_dim]`.
    pub fn project(&self, feats: &SpatialFeatures) -> Result<Tensor> {
        Ok(self.pre_norm(feats)?.l2_normalize_rows(1e-12)?)
    }

    pub fn params(&self, prefix: &str, out: &mut ParamList) {
        self.fc1.params(&format!("{prefix}.fc1"), out);
        self.fc2.params(&format!("{prefix}.fc2"), out);
    }
}

/// Online/target parameter pairing for the key path. The target copy starts
/// as a bitwise clone of the online parameters and thereafter follows the
/// exponential moving average `m <- lambda*m + (1-lambda)*q`, outside the
/// autodiff graph.
pub struct MomentumPair {
    online: Vec<Tensor>,
    target: Vec<Tensor>,
    pub lambda: f64,
}

fn suffix(name: &str) -> &str {
    name.split_once('.').map_or(name, |(_, rest)| rest)
}

impl MomentumPair {
    /// Pairs two parameter lists (typically different name prefixes, same
    /// structure) and copies online values into the target, bit for bit.
    pub fn new(online: &ParamList, target: &ParamList, lambda: f64) -> Result<MomentumPair> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(EncoderError::BadMomentum { value: lambda });
        }
        if online.len() != target.len() {
            return Err(EncoderError::ParamMismatch {
                index: online.len().min(target.len()),
                left: format!("{} params", online.len()),
                right: format!("{} params", target.len()),
            });
        }
        for (i, ((qn, q), (mn, m))) in online.iter().zip(target).enumerate() {
            if suffix(qn) != suffix(mn) || q.shape() != m.shape() {
                return Err(EncoderError::ParamMismatch {
                    index: i,
                    left: format!("{qn} {:?}", q.shape()),
                    right: format!("{mn} {:?}", m.shape()),
                });
            }
            m.set_data(&q.to_vec())?;
        }
        Ok(MomentumPair {
            online: online.iter().map(|(_, t)| t.clone()).collect(),
            target: target.iter().map(|(_, t)| t.clone()).collect(),
            lambda,
        })
    }

    /// One EMA step.
    pub fn update(&self) -> Result<()> {
        for (q, m) in self.online.iter().zip(&self.target) {
            let qv = q.to_vec();
            let mut mv = m.to_vec();
            for (mi, qi) in mv.iter_mut().zip(&qv) {
                *mi = self.lambda * *mi + (1.0 - self.lambda) * qi;
            }
            m.set_data(&mv)?;
        }
        Ok(())
    }

    /// Largest elementwise |online - target| over all pairs.
    pub fn max_divergence(&self) -> f64 {
        let mut worst = 0.0_f64;
        for (q, m) in self.online.iter().zip(&self.target) {
            for (a, b) in q.to_vec().iter().zip(m.to_vec()) {
                worst = worst.max((a - b).abs());
            }
        }
        worst
    }
}
