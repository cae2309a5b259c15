//! Two-stage pretraining: momentum-contrastive warmup, then joint
//! contrastive + annotation-denoising training, plus checkpointing, JSONL
//! metrics, and a frozen linear probe for evaluation.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{self, CheckpointEntry, CheckpointError};
use crate::config::{ConfigError, RunConfig};
use crate::contrastive::{info_nce, ContrastError, FeatureQueue};
use crate::dct::{build_dct_map, DctError, DctMap, ImageRgb};
use crate::denoise::{
    dct_target_tensor, inject_noise, loss_dct, loss_keypoint, DctDecoder, DenoiseError,
    DenoiseLosses, KeypointDecoder, NoiseSpec,
};
use crate::encoders::{
    EncoderConfig, EncoderError, KeypointEncoder, KeypointFeatures, MomentumPair, ProjectionHead,
    SpatialEncoder, SpatialFeatures,
};
use crate::nn::{Init, Linear, ParamList};
use crate::seeds;
use crate::synthdata::{
    augment_two_views, Dataset, DatasetConfig, Keypoints, SynthError, SyntheticScene,
};
use crate::tensor::{sgd_momentum_step, Tensor, TensorError};

pub type Result<T> = std::result::Result<T, PipelineError>;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("non-finite {what} ({value}) at stage {stage} epoch {epoch} batch {batch}")]
    NonFinite { stage: usize, epoch: usize, batch: usize, what: &'static str, value: f64 },
    #[error("probe: {reason}")]
    Probe { reason: String },
    #[error("checkpoint is missing blob {name}")]
    MissingBlob { name: &'static str },
    #[error("coefficient stats hold {got} channels, model expects {want}")]
    StatsShape { want: usize, got: usize },
    #[error("metrics encoding: {0}")]
    Metrics(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Denoise(#[from] DenoiseError),
    #[error(transparent)]
    Contrast(#[from] ContrastError),
    #[error(transparent)]
    Dct(#[from] DctError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

// Seed stream tags: one per submodule / draw site, so adding or skipping a
// consumer never shifts another one's stream.
const TAG_IMAGE_ENC: u64 = 0x11;
const TAG_DCT_ENC: u64 = 0x12;
const TAG_KP_ENC: u64 = 0x13;
const TAG_PROJ_Q: u64 = 0x14;
const TAG_DCT_DEC: u64 = 0x15;
const TAG_KP_DEC: u64 = 0x16;
const TAG_KEY_IMAGE_ENC: u64 = 0x17;
const TAG_PROJ_K: u64 = 0x18;
const TAG_AUGMENT: u64 = 0xAA6;
const TAG_NOISE: u64 = 0x2015E;
const TAG_PROBE_DATA: u64 = 0x9086;
const TAG_PROBE_HEAD: u64 = 0x4EAD;
const TAG_PROBE_RANDOM: u64 = 0xBA5E;
const TAG_CONTROL_A: u64 = 0xA11CE;
const TAG_CONTROL_B: u64 = 0xB0B;

const STD_FLOOR: f64 = 1e-6;
const PROBE_STEPS: usize = 200;
const PROBE_LR: f64 = 0.3;
const PROBE_MOMENTUM: f64 = 0.9;

/// Per-channel statistics of coefficient maps, fitted once over the base
/// (unaugmented) training scenes and then frozen.
#[derive(Debug, Clone, PartialEq)]
pub struct DctStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

pub fn fit_dct_stats(maps: &[DctMap]) -> Result<DctStats> {
    let channels = maps
        .first()
        .map(|m| m.channels())
        .ok_or_else(|| PipelineError::Probe { reason: "no maps to fit stats on".into() })?;
    let mut sum = vec![0.0; channels];
    let mut sumsq = vec![0.0; channels];
    let mut count = 0usize;
    for map in maps {
        if map.channels() != channels {
            return Err(PipelineError::StatsShape { want: channels, got: map.channels() });
        }
        let cells = map.cells();
        for k in 0..channels {
            for c in 0..cells {
                let x = map.data[k * cells + c];
                sum[k] += x;
                sumsq[k] += x * x;
            }
        }
        count += cells;
    }
    let n = count as f64;
    let mut mean = vec![0.0; channels];
    let mut std = vec![0.0; channels];
    for k in 0..channels {
        mean[k] = sum[k] / n;
        let var = (sumsq[k] / n - mean[k] * mean[k]).max(0.0);
        std[k] = var.sqrt().max(STD_FLOOR);
    }
    Ok(DctStats { mean, std })
}

pub fn standardize_map(map: &DctMap, stats: &DctStats) -> Result<DctMap> {
    if stats.mean.len() != map.channels() || stats.std.len() != map.channels() {
        return Err(PipelineError::StatsShape { want: map.channels(), got: stats.mean.len() });
    }
    let cells = map.cells();
    let mut data = map.data.clone();
    for k in 0..map.channels() {
        for c in 0..cells {
            data[k * cells + c] = (data[k * cells + c] - stats.mean[k]) / stats.std[k];
        }
    }
    Ok(DctMap { patch: map.patch, grid_h: map.grid_h, grid_w: map.grid_w, data })
}

/// The full model: query-side encoders and decoders, plus a momentum copy of
/// the image tower for contrastive keys.
pub struct AdeptModel {
    pub cfg: EncoderConfig,
    pub simcc_k: usize,
    pub image_enc: SpatialEncoder,
    pub dct_enc: SpatialEncoder,
    pub kp_enc: KeypointEncoder,
    pub proj_q: ProjectionHead,
    pub dct_dec: DctDecoder,
    pub kp_dec: KeypointDecoder,
    pub key_image_enc: SpatialEncoder,
    pub proj_k: ProjectionHead,
    pub pair: MomentumPair,
}

impl AdeptModel {
    pub fn new(cfg: &EncoderConfig, simcc_k: usize, momentum: f64, seed: u64) -> Result<AdeptModel> {
        let image_enc = SpatialEncoder::new(cfg, seeds::derive(seed, &[TAG_IMAGE_ENC]), true)?;
        let dct_enc = SpatialEncoder::new(cfg, seeds::derive(seed, &[TAG_DCT_ENC]), true)?;
        let kp_enc = KeypointEncoder::new(cfg, seeds::derive(seed, &[TAG_KP_ENC]), true)?;
        let proj_q = ProjectionHead::new(cfg, seeds::derive(seed, &[TAG_PROJ_Q]), true)?;
        let dct_dec = DctDecoder::new(cfg, seeds::derive(seed, &[TAG_DCT_DEC]), true)?;
        let kp_dec =
            KeypointDecoder::new(cfg, simcc_k, seeds::derive(seed, &[TAG_KP_DEC]), true)?;
        let key_image_enc =
            SpatialEncoder::new(cfg, seeds::derive(seed, &[TAG_KEY_IMAGE_ENC]), false)?;
        let proj_k = ProjectionHead::new(cfg, seeds::derive(seed, &[TAG_PROJ_K]), false)?;

        let mut online = ParamList::new();
        image_enc.params("image_enc", &mut online);
        proj_q.params("proj_q", &mut online);
        let mut target = ParamList::new();
        key_image_enc.params("key_image_enc", &mut target);
        proj_k.params("proj_k", &mut target);
        let pair = MomentumPair::new(&online, &target, momentum)?;

        Ok(AdeptModel {
            cfg: cfg.clone(),
            simcc_k,
            image_enc,
            dct_enc,
            kp_enc,
            proj_q,
            dct_dec,
            kp_dec,
            key_image_enc,
            proj_k,
            pair,
        })
    }

    /// Parameters updated by the optimizer, in a fixed registry order.
    pub fn trainable_params(&self) -> ParamList {
        let mut out = ParamList::new();
        self.image_enc.params("image_enc", &mut out);
        self.dct_enc.params("dct_enc", &mut out);
        self.kp_enc.params("kp_enc", &mut out);
        self.proj_q.params("proj_q", &mut out);
        self.dct_dec.params("dct_dec", &mut out);
        self.kp_dec.params("kp_dec", &mut out);
        out
    }

    /// Every parameter, including the momentum copies; checkpoint order.
    pub fn all_params(&self) -> ParamList {
        let mut out = self.trainable_params();
        self.key_image_enc.params("key_image_enc", &mut out);
        self.proj_k.params("proj_k", &mut out);
        out
    }

    pub fn query_features(&self, view: &ImageRgb) -> Result<SpatialFeatures> {
        Ok(self.image_enc.encode_image(view)?)
    }

    pub fn project_query(&self, feats: &SpatialFeatures) -> Result<Tensor> {
        Ok(self.proj_q.project(feats)?)
    }

    /// Momentum-key embedding for the second view; carries no gradient.
    pub fn momentum_key(&self, view: &ImageRgb) -> Result<Tensor> {
        Ok(self.proj_k.project(&self.key_image_enc.encode_image(view)?)?)
    }

    /// The annotation-denoising losses for one sample: noisy coefficient-map
    /// and keypoint features are decoded against the image features.
    pub fn denoise_terms(
        &self,
        image_feats: &SpatialFeatures,
        map: &DctMap,
        kp: &Keypoints,
        noise_map: &NoiseSpec,
        noise_kp: &NoiseSpec,
        lambda1: f64,
        lambda2: f64,
    ) -> Result<DenoiseLosses> {
        let f_map = self.dct_enc.encode_dct(map)?;
        let f_kp = self.kp_enc.encode(kp)?;
        let noisy_map =
            SpatialFeatures { tokens: inject_noise(&f_map.tokens, noise_map), grid: f_map.grid };
        let noisy_kp = KeypointFeatures { tokens: inject_noise(&f_kp.tokens, noise_kp) };

        let pred = self.dct_dec.decode(&noisy_map, image_feats)?;
        let l_dct = loss_dct(&pred, &dct_target_tensor(map)?)?;

        let (logits_x, logits_y) = self.kp_dec.decode(&noisy_kp, image_feats)?;
        let view = (self.cfg.view_width(), self.cfg.view_height());
        let (l_kp, no_visible) = loss_keypoint(&logits_x, &logits_y, kp, self.simcc_k, view)?;

        Ok(DenoiseLosses::combine(l_kp, l_dct, lambda1, lambda2, no_visible)?)
    }
}

/// One epoch's aggregate losses; serialized as one JSON object per line.
/// `total` always equals `l_ctr + (lambda1 * l_kp + lambda2 * l_dct)` with
/// exactly that association.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub stage: usize,
    pub epoch: usize,
    pub l_ctr: f64,
    pub l_kp: f64,
    pub l_dct: f64,
    pub l_de: f64,
    pub total: f64,
    pub grad_norm: f64,
    /// Omitted in strict mode so reruns are byte-identical.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub wall_time_s: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct StageReport {
    pub stage: usize,
    pub epochs: Vec<EpochMetrics>,
}

pub struct PretrainOutcome {
    pub model: AdeptModel,
    pub stats: DctStats,
    pub stage1: StageReport,
    pub stage2: StageReport,
}

/// Cosine decay from `lr0` at epoch 0 towards zero past the last epoch.
pub fn cosine_lr(lr0: f64, epoch: usize, total: usize) -> f64 {
    if total == 0 {
        return lr0;
    }
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * epoch as f64 / total as f64).cos())
}

struct BatchStats {
    samples: usize,
    l_ctr: f64,
    l_kp: f64,
    l_dct: f64,
    grad_norm: f64,
}

pub struct Trainer {
    pub cfg: RunConfig,
    pub model: AdeptModel,
    pub stats: DctStats,
    scenes: Vec<SyntheticScene>,
    queue: FeatureQueue,
    trainables: ParamList,
    /// Per-parameter learning-rate factor: 1 for the image encoder and
    /// projection, `head_lr_mult` for annotation encoders and decoders.
    lr_mult: Vec<f64>,
    velocity: Vec<Vec<f64>>,
}

impl Trainer {
    pub fn new(cfg: &RunConfig) -> Result<Trainer> {
        cfg.validate()?;
        let enc_cfg = cfg.encoder_config();
        let dataset = Dataset::new(cfg.dataset_config());
        let mut scenes = Vec::with_capacity(cfg.dataset.train_samples);
        for i in 0..cfg.dataset.train_samples as u64 {
            scenes.push(dataset.scene(i)?);
        }
        let mut maps = Vec::with_capacity(scenes.len());
        for scene in &scenes {
            maps.push(build_dct_map(&scene.image, cfg.dataset.patch)?);
        }
        let stats = fit_dct_stats(&maps)?;
        let model =
            AdeptModel::new(&enc_cfg, cfg.train.simcc_k, cfg.train.momentum, cfg.train.seed)?;
        let trainables = model.trainable_params();
        let lr_mult = trainables
            .iter()
            .map(|(name, _)| {
                if name.starts_with("image_enc") || name.starts_with("proj_q") {
                    1.0
                } else {
                    cfg.train.head_lr_mult
                }
            })
            .collect();
        let velocity = trainables.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        let queue = FeatureQueue::new(cfg.train.queue_capacity, enc_cfg.proj_dim)?;
        Ok(Trainer { cfg: cfg.clone(), model, stats, scenes, queue, trainables, lr_mult, velocity })
    }

    /// Zero the optimizer's velocity buffers (used at the stage boundary).
    pub fn reset_optimizer(&mut self) {
        for v in &mut self.velocity {
            v.fill(0.0);
        }
    }

    pub fn queue_len(&self) -> usize {
        self.queue.len()
    }

    pub fn stage1_epoch(&mut self, epoch: usize) -> Result<EpochMetrics> {
        let lr = cosine_lr(self.cfg.train.learning_rate, epoch, self.cfg.train.stage1_epochs);
        self.run_epoch(1, epoch, epoch, lr, false)
    }

    pub fn stage2_epoch(&mut self, epoch: usize) -> Result<EpochMetrics> {
        let lr = cosine_lr(self.cfg.train.learning_rate, epoch, self.cfg.train.stage2_epochs);
        let global = self.cfg.train.stage1_epochs + epoch;
        // With both loss weights at zero the denoising path is skipped
        // entirely, which makes the step identical to a stage-1 step.
        let with_denoise = self.cfg.train.lambda1 > 0.0 || self.cfg.train.lambda2 > 0.0;
        self.run_epoch(2, epoch, global, lr, with_denoise)
    }

    fn run_epoch(
        &mut self,
        stage: usize,
        epoch: usize,
        global_epoch: usize,
        lr: f64,
        with_denoise: bool,
    ) -> Result<EpochMetrics> {
        let started = Instant::now();
        let n = self.scenes.len();
        let indices: Vec<usize> = (0..n).collect();
        let (mut ctr, mut kp, mut dct, mut norms) = (0.0, 0.0, 0.0, 0.0);
        let mut batches = 0usize;
        let chunk_size = self.cfg.train.batch_size;
        for (batch_idx, chunk) in indices.chunks(chunk_size).enumerate() {
            let st = self.step_batch(stage, epoch, global_epoch, batch_idx, chunk, lr, with_denoise)?;
            ctr += st.l_ctr * st.samples as f64;
            kp += st.l_kp * st.samples as f64;
            dct += st.l_dct * st.samples as f64;
            norms += st.grad_norm;
            batches += 1;
        }
        let nf = n as f64;
        let l_ctr = ctr / nf;
        let l_kp = kp / nf;
        let l_dct = dct / nf;
        let l_de = self.cfg.train.lambda1 * l_kp + self.cfg.train.lambda2 * l_dct;
        let total = l_ctr + l_de;
        Ok(EpochMetrics {
            stage,
            epoch,
            l_ctr,
            l_kp,
            l_dct,
            l_de,
            total,
            grad_norm: norms / batches as f64,
            wall_time_s: (!self.cfg.strict).then(|| started.elapsed().as_secs_f64()),
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn step_batch(
        &mut self,
        stage: usize,
        epoch: usize,
        global_epoch: usize,
        batch_idx: usize,
        chunk: &[usize],
        lr: f64,
        with_denoise: bool,
    ) -> Result<BatchStats> {
        let t = &self.cfg.train;
        let g = global_epoch as u64;

        // Encode both views of every sample; keys carry no gradient.
        let mut keys: Vec<Vec<f64>> = Vec::with_capacity(chunk.len());
        let mut pending = Vec::with_capacity(chunk.len());
        for &i in chunk {
            let spec = self.cfg.augment_spec(seeds::derive(t.seed, &[TAG_AUGMENT, g, i as u64]));
            let (view_a, view_b, kp_a) = augment_two_views(&self.scenes[i], &spec)?;
            let feats = self.model.query_features(&view_a)?;
            let q = self.model.project_query(&feats)?;
            let k = self.model.momentum_key(&view_b)?;
            keys.push(k.to_vec());
            pending.push((i, q, k, feats, view_a, kp_a));
        }

        // An empty queue (very first batch, or a cold-started stage) is
        // seeded with this batch's own keys before any loss is taken.
        let mut enqueued = false;
        if self.queue.is_empty() {
            self.queue.enqueue_dequeue(&keys)?;
            enqueued = true;
        }

        let mut ctr_terms = Vec::with_capacity(chunk.len());
        let mut kp_terms = Vec::with_capacity(chunk.len());
        let mut dct_terms = Vec::with_capacity(chunk.len());
        let mut any_warned = false;
        for (i, q, k, feats, view_a, kp_a) in &pending {
            ctr_terms.push(info_nce(q, k, &self.queue, t.tau)?);
            if with_denoise {
                let map = standardize_map(&build_dct_map(view_a, self.cfg.dataset.patch)?, &self.stats)?;
                let noise_map =
                    NoiseSpec::new(t.noise_scale, seeds::derive(t.seed, &[TAG_NOISE, g, *i as u64, 0]))?;
                let noise_kp =
                    NoiseSpec::new(t.noise_scale, seeds::derive(t.seed, &[TAG_NOISE, g, *i as u64, 1]))?;
                let losses = self.model.denoise_terms(
                    feats, &map, kp_a, &noise_map, &noise_kp, t.lambda1, t.lambda2,
                )?;
                any_warned |= losses.no_visible_joints;
                kp_terms.push(losses.l_kp);
                dct_terms.push(losses.l_dct);
            }
        }

        let l_ctr = mean_terms(&ctr_terms)?;
        let (total, l_kp_val, l_dct_val) = if with_denoise {
            let combined = DenoiseLosses::combine(
                mean_terms(&kp_terms)?,
                mean_terms(&dct_terms)?,
                t.lambda1,
                t.lambda2,
                any_warned,
            )?;
            let total = l_ctr.add(&combined.l_de)?;
            (total, combined.l_kp.value(), combined.l_dct.value())
        } else {
            (l_ctr.clone(), 0.0, 0.0)
        };

        let loss_value = total.value();
        if !loss_value.is_finite() {
            return Err(PipelineError::NonFinite {
                stage,
                epoch,
                batch: batch_idx,
                what: "loss",
                value: loss_value,
            });
        }
        total.backward()?;

        let grads: Vec<Option<Vec<f64>>> =
            self.trainables.iter().map(|(_, p)| p.grad()).collect();
        let mut sq = 0.0;
        for g in grads.iter().flatten() {
            sq += g.iter().map(|v| v * v).sum::<f64>();
        }
        let grad_norm = sq.sqrt();
        if !grad_norm.is_finite() {
            for (_, p) in &self.trainables {
                p.zero_grad();
            }
            return Err(PipelineError::NonFinite {
                stage,
                epoch,
                batch: batch_idx,
                what: "gradient norm",
                value: grad_norm,
            });
        }

        for (idx, (_, p)) in self.trainables.iter().enumerate() {
            if let Some(grad) = &grads[idx] {
                let step = lr * self.lr_mult[idx];
                sgd_momentum_step(p, grad, &mut self.velocity[idx], step, t.sgd_momentum)?;
            }
        }
        for (_, p) in &self.trainables {
            p.zero_grad();
        }
        self.model.pair.update()?;
        if !enqueued {
            self.queue.enqueue_dequeue(&keys)?;
        }

        Ok(BatchStats {
            samples: chunk.len(),
            l_ctr: l_ctr.value(),
            l_kp: l_kp_val,
            l_dct: l_dct_val,
            grad_norm,
        })
    }
}

fn mean_terms(terms: &[Tensor]) -> Result<Tensor> {
    let mut iter = terms.iter();
    let first = iter.next().ok_or_else(|| PipelineError::Probe {
        reason: "empty loss batch".into(),
    })?;
    let mut acc = first.clone();
    for t in iter {
        acc = acc.add(t)?;
    }
    Ok(acc.scale(1.0 / terms.len() as f64))
}

const STATS_MEAN_BLOB: &str = "dct_stats.mean";
const STATS_STD_BLOB: &str = "dct_stats.std";

pub fn save_model(path: &Path, model: &AdeptModel, stats: &DctStats) -> Result<()> {
    let mut entries = checkpoint::params_to_entries(&model.all_params());
    entries.push(CheckpointEntry {
        name: STATS_MEAN_BLOB.into(),
        shape: vec![stats.mean.len()],
        data: stats.mean.clone(),
    });
    entries.push(CheckpointEntry {
        name: STATS_STD_BLOB.into(),
        shape: vec![stats.std.len()],
        data: stats.std.clone(),
    });
    Ok(checkpoint::save_checkpoint(path, &entries)?)
}

pub fn load_model(path: &Path, cfg: &RunConfig) -> Result<(AdeptModel, DctStats)> {
    let entries = checkpoint::load_checkpoint(path)?;
    let (stats_entries, param_entries): (Vec<_>, Vec<_>) =
        entries.into_iter().partition(|e| e.name.starts_with("dct_stats."));
    let model = AdeptModel::new(
        &cfg.encoder_config(),
        cfg.train.simcc_k,
        cfg.train.momentum,
        cfg.train.seed,
    )?;
    checkpoint::load_into_params(&param_entries, &model.all_params())?;

    let want = cfg.encoder_config().token_input_dim();
    let pick = |name: &'static str| -> Result<Vec<f64>> {
        let e = stats_entries
            .iter()
            .find(|e| e.name == name)
            .ok_or(PipelineError::MissingBlob { name })?;
        if e.data.len() != want {
            return Err(PipelineError::StatsShape { want, got: e.data.len() });
        }
        Ok(e.data.clone())
    };
    let stats = DctStats { mean: pick(STATS_MEAN_BLOB)?, std: pick(STATS_STD_BLOB)? };
    Ok((model, stats))
}

fn emit_metrics(
    writer: &mut Option<std::io::BufWriter<std::fs::File>>,
    m: &EpochMetrics,
) -> Result<()> {
    if let Some(w) = writer {
        let line = serde_json::to_string(m).map_err(|e| PipelineError::Metrics(e.to_string()))?;
        writeln!(w, "{line}")?;
        w.flush()?;
    }
    Ok(())
}

fn run_stages(
    trainer: &mut Trainer,
    out: Option<&Path>,
    writer: &mut Option<std::io::BufWriter<std::fs::File>>,
) -> Result<(StageReport, StageReport)> {
    let (e1, e2) = (trainer.cfg.train.stage1_epochs, trainer.cfg.train.stage2_epochs);
    let mut stage1 = StageReport { stage: 1, epochs: Vec::with_capacity(e1) };
    for e in 0..e1 {
        let m = trainer.stage1_epoch(e)?;
        emit_metrics(writer, &m)?;
        stage1.epochs.push(m);
    }
    if let Some(dir) = out {
        save_model(&dir.join("checkpoint_stage1.ckpt"), &trainer.model, &trainer.stats)?;
    }
    trainer.reset_optimizer();
    let mut stage2 = StageReport { stage: 2, epochs: Vec::with_capacity(e2) };
    for e in 0..e2 {
        let m = trainer.stage2_epoch(e)?;
        emit_metrics(writer, &m)?;
        stage2.epochs.push(m);
    }
    if let Some(dir) = out {
        save_model(&dir.join("checkpoint_final.ckpt"), &trainer.model, &trainer.stats)?;
    }
    Ok((stage1, stage2))
}

/// Run both stages. With an output directory, writes `checkpoint_stage1.ckpt`
/// at the stage boundary, `checkpoint_final.ckpt` at the end, per-epoch
/// `metrics.jsonl`, and — if training hits a non-finite value — a
/// `checkpoint_diagnostic.ckpt` of the parameters just before the bad step.
pub fn pretrain(cfg: &RunConfig, out: Option<&Path>) -> Result<PretrainOutcome> {
    let mut trainer = Trainer::new(cfg)?;
    let mut writer = match out {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            Some(std::io::BufWriter::new(std::fs::File::create(dir.join("metrics.jsonl"))?))
        }
        None => None,
    };
    match run_stages(&mut trainer, out, &mut writer) {
        Ok((stage1, stage2)) => {
            Ok(PretrainOutcome { model: trainer.model, stats: trainer.stats, stage1, stage2 })
        }
        Err(err) => {
            if let (Some(dir), PipelineError::NonFinite { .. }) = (out, &err) {
                let _ = save_model(
                    &dir.join("checkpoint_diagnostic.ckpt"),
                    &trainer.model,
                    &trainer.stats,
                );
            }
            Err(err)
        }
    }
}

/// Frozen-encoder linear probe: train a single linear layer from flattened
/// image tokens to normalized joint coordinates, then report the mean pixel
/// error over visible joints on held-out scenes. Deterministic per seed.
pub fn linear_probe_error(
    cfg: &RunConfig,
    encoder: &SpatialEncoder,
    probe_seed: u64,
) -> Result<f64> {
    let enc_cfg = cfg.encoder_config();
    let canvas = cfg.dataset.canvas as f64;
    let joints = enc_cfg.keypoint_count;
    let feat_dim = enc_cfg.tokens() * enc_cfg.embed_dim;
    let n_train = cfg.dataset.probe_train_samples;
    let n_eval = cfg.dataset.probe_eval_samples;

    let dataset = Dataset::new(DatasetConfig {
        canvas: cfg.dataset.canvas,
        patch: cfg.dataset.patch,
        seed: seeds::derive(cfg.dataset.seed, &[TAG_PROBE_DATA, probe_seed]),
    });

    let mut feats = Vec::with_capacity(n_train + n_eval);
    let mut keypoints = Vec::with_capacity(n_train + n_eval);
    for i in 0..(n_train + n_eval) as u64 {
        let scene = dataset.scene(i)?;
        if scene.keypoints.joints.len() != joints {
            return Err(PipelineError::Probe {
                reason: format!(
                    "scene has {} joints, encoder config expects {joints}",
                    scene.keypoints.joints.len()
                ),
            });
        }
        let tokens = encoder.encode_image(&scene.image)?.tokens;
        // Scale so ||features|| is O(1) regardless of model size; this keeps
        // one fixed probe learning rate stable across configurations.
        let scale = 1.0 / (feat_dim as f64).sqrt();
        feats.push(tokens.reshape(&[1, feat_dim])?.detach().scale(scale));
        keypoints.push(scene.keypoints);
    }

    // Normalized-coordinate targets with a 0/1 visibility mask per coordinate.
    let rows: Vec<(Tensor, Tensor, usize)> = keypoints
        .iter()
        .map(|kp| {
            let mut target = vec![0.0; 2 * joints];
            let mut mask = vec![0.0; 2 * joints];
            let mut visible = 0usize;
            for (j, joint) in kp.joints.iter().enumerate() {
                if joint.visible {
                    target[2 * j] = joint.x / canvas;
                    target[2 * j + 1] = joint.y / canvas;
                    mask[2 * j] = 1.0;
                    mask[2 * j + 1] = 1.0;
                    visible += 1;
                }
            }
            Ok((
                Tensor::new(target, &[1, 2 * joints])?,
                Tensor::new(mask, &[1, 2 * joints])?,
                visible,
            ))
        })
        .collect::<std::result::Result<_, TensorError>>()?;

    let denom: usize = rows[..n_train].iter().map(|(_, _, v)| 2 * v).sum();
    if denom == 0 {
        return Err(PipelineError::Probe { reason: "no visible joints in probe training split".into() });
    }

    let mut init = Init::new(seeds::derive(probe_seed, &[TAG_PROBE_HEAD]), true);
    let head = Linear::new(&mut init, feat_dim, 2 * joints);
    let mut head_params = ParamList::new();
    head.params("probe_head", &mut head_params);
    let mut velocity: Vec<Vec<f64>> =
        head_params.iter().map(|(_, t)| vec![0.0; t.len()]).collect();

    for step in 0..PROBE_STEPS {
        let lr = cosine_lr(PROBE_LR, step, PROBE_STEPS);
        let mut acc: Option<Tensor> = None;
        for i in 0..n_train {
            let (target, mask, visible) = &rows[i];
            if *visible == 0 {
                continue;
            }
            let diff = head.forward(&feats[i])?.sub(target)?.mul(mask)?;
            let sq = diff.rowwise_dot(&diff)?;
            acc = Some(match acc {
                Some(a) => a.add(&sq)?,
                None => sq,
            });
        }
        let loss = acc
            .ok_or_else(|| PipelineError::Probe { reason: "empty probe batch".into() })?
            .scale(1.0 / denom as f64)
            .reshape(&[])?;
        loss.backward()?;
        for (idx, (_, p)) in head_params.iter().enumerate() {
            if let Some(grad) = p.grad() {
                sgd_momentum_step(p, &grad, &mut velocity[idx], lr, PROBE_MOMENTUM)?;
            }
            p.zero_grad();
        }
    }

    let mut dist_sum = 0.0;
    let mut count = 0usize;
    for i in n_train..n_train + n_eval {
        let pred = head.forward(&feats[i])?.to_vec();
        for (j, joint) in keypoints[i].joints.iter().enumerate() {
            if joint.visible {
                let dx = pred[2 * j] * canvas - joint.x;
                let dy = pred[2 * j + 1] * canvas - joint.y;
                dist_sum += dx.hypot(dy);
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(PipelineError::Probe { reason: "no visible joints in probe eval split".into() });
    }
    Ok(dist_sum / count as f64)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeReport {
    pub pretrained_error_px: f64,
    pub random_baseline_error_px: f64,
    pub seeds: Vec<u64>,
    pub win_rate: f64,
}

fn paired_probe(
    seeds_list: &[u64],
    mut error_a: impl FnMut(u64) -> Result<f64>,
    mut error_b: impl FnMut(u64) -> Result<f64>,
) -> Result<ProbeReport> {
    if seeds_list.is_empty() {
        return Err(PipelineError::Probe { reason: "no probe seeds given".into() });
    }
    let (mut sum_a, mut sum_b, mut wins) = (0.0, 0.0, 0usize);
    for &s in seeds_list {
        let ea = error_a(s)?;
        let eb = error_b(s)?;
        sum_a += ea;
        sum_b += eb;
        if ea < eb {
            wins += 1;
        }
    }
    let n = seeds_list.len() as f64;
    Ok(ProbeReport {
        pretrained_error_px: sum_a / n,
        random_baseline_error_px: sum_b / n,
        seeds: seeds_list.to_vec(),
        win_rate: wins as f64 / n,
    })
}

/// Paired comparison of a pretrained image encoder against a freshly
/// initialized one, probed on the same data with the same head init.
pub fn probe_report(
    cfg: &RunConfig,
    pretrained: &SpatialEncoder,
    seeds_list: &[u64],
) -> Result<ProbeReport> {
    let enc_cfg = cfg.encoder_config();
    paired_probe(
        seeds_list,
        |s| linear_probe_error(cfg, pretrained, s),
        |s| {
            let random =
                SpatialEncoder::new(&enc_cfg, seeds::derive(s, &[TAG_PROBE_RANDOM]), false)?;
            linear_probe_error(cfg, &random, s)
        },
    )
}

/// Negative control: two independently seeded random encoders. Neither side
/// should win systematically.
pub fn probe_random_control(cfg: &RunConfig, seeds_list: &[u64]) -> Result<ProbeReport> {
    let enc_cfg = cfg.encoder_config();
    paired_probe(
        seeds_list,
        |s| {
            let enc = SpatialEncoder::new(&enc_cfg, seeds::derive(s, &[TAG_CONTROL_A]), false)?;
            linear_probe_error(cfg, &enc, s)
        },
        |s| {
            let enc = SpatialEncoder::new(&enc_cfg, seeds::derive(s, &[TAG_CONTROL_B]), false)?;
            linear_probe_error(cfg, &enc, s)
        },
    )
}
