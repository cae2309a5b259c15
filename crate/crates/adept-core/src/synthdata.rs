//! Synthetic training data: articulated stick figures rendered over
//! band-limited procedural backgrounds, with ground-truth keypoints from 2-D
//! forward kinematics and a two-view augmentation for contrastive pairs.
//!
//! Generation is a pure function of (config, seed): sample `i` is identical
//! across runs and platforms.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dct::ImageRgb;
use crate::seeds;

pub use crate::imageio::load_image_file;

pub type Result<T> = std::result::Result<T, SynthError>;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("canvas {canvas} is not a positive multiple of patch size {patch}")]
    BadCanvas { canvas: usize, patch: usize },
    #[error("root position ({x}, {y}) lies off the {canvas}x{canvas} canvas")]
    RootOffCanvas { x: f64, y: f64, canvas: usize },
    #[error("limb length for joint {joint} must be positive, got {length}")]
    NonPositiveLength { joint: usize, length: f64 },
    #[error("pose parameter {what} is not finite")]
    NonFinitePose { what: &'static str },
    #[error("augmentation produced a view with no visible joints (after one resample)")]
    NoVisibleJoints,
    #[error("crop fraction {value} outside (0, 1]")]
    BadCropFraction { value: f64 },
    #[error("manifest: {0}")]
    BadManifest(String),
    #[error(transparent)]
    Image(#[from] crate::dct::DctError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub const JOINT_COUNT: usize = 14;

/// Joint order: head, neck (root), then left/right pairs of shoulder,
/// elbow, wrist, hip, knee, ankle. "Left" means image-left of the canonical
/// forward-facing pose.
pub const JOINT_NAMES: [&str; JOINT_COUNT] = [
    "head",
    "neck",
    "l_shoulder",
    "r_shoulder",
    "l_elbow",
    "r_elbow",
    "l_wrist",
    "r_wrist",
    "l_hip",
    "r_hip",
    "l_knee",
    "r_knee",
    "l_ankle",
    "r_ankle",
];

/// Parent of each joint; the root (neck) points at itself.
pub const PARENTS: [usize; JOINT_COUNT] = [1, 1, 1, 1, 2, 3, 4, 5, 1, 1, 8, 9, 10, 11];

pub const ROOT: usize = 1;

/// Left/right joint index pairs, swapped under horizontal flips.
pub const LEFT_RIGHT_PAIRS: [(usize, usize); 6] =
    [(2, 3), (4, 5), (6, 7), (8, 9), (10, 11), (12, 13)];

const HIP_SPLAY: f64 = 0.25;

/// Bone direction from the parent in the canonical pose, image coordinates
/// (x right, y down), radians.
const REST_ANGLES: [f64; JOINT_COUNT] = [
    -std::f64::consts::FRAC_PI_2,             // head: up
    0.0,                                      // root
    std::f64::consts::PI,                     // l_shoulder: left
    0.0,                                      // r_shoulder: right
    0.0,                                      // l_elbow: continues arm
    0.0,                                      // r_elbow
    0.0,                                      // l_wrist
    0.0,                                      // r_wrist
    std::f64::consts::FRAC_PI_2 + HIP_SPLAY,  // l_hip: down, splayed left
    std::f64::consts::FRAC_PI_2 - HIP_SPLAY,  // r_hip
    -HIP_SPLAY,                               // l_knee: cancels splay, hangs vertical
    HIP_SPLAY,                                // r_knee
    0.0,                                      // l_ankle
    0.0,                                      // r_ankle
];

/// Bone lengths parent→joint in canonical units (multiplied by pose scale).
pub const CANONICAL_LENGTHS: [f64; JOINT_COUNT] = [
    0.20, // neck -> head
    0.0,  // root
    0.22, // neck -> shoulder
    0.22,
    0.26, // shoulder -> elbow
    0.26,
    0.24, // elbow -> wrist
    0.24,
    0.42, // neck -> hip
    0.42,
    0.34, // hip -> knee
    0.34,
    0.32, // knee -> ankle
    0.32,
];

/// Joints in dependency order (every parent before its children).
const FK_ORDER: [usize; JOINT_COUNT] = [1, 0, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseParams {
    pub root_x: f64,
    pub root_y: f64,
    /// Pixels per canonical unit.
    pub scale: f64,
    /// Whole-figure rotation, radians.
    pub orientation: f64,
    /// Per-joint angle offsets from the rest direction (root slot unused).
    pub angles: [f64; JOINT_COUNT],
    /// Per-bone lengths in canonical units (root slot unused).
    pub lengths: [f64; JOINT_COUNT],
}

impl PoseParams {
    /// Canonical pose: zero angles, table lengths.
    pub fn canonical(root_x: f64, root_y: f64, scale: f64) -> PoseParams {
        PoseParams {
            root_x,
            root_y,
            scale,
            orientation: 0.0,
            angles: [0.0; JOINT_COUNT],
            lengths: CANONICAL_LENGTHS,
        }
    }

    fn validate(&self) -> Result<()> {
        let finite = |v: f64, what: &'static str| {
            if v.is_finite() {
                Ok(())
            } else {
                Err(SynthError::NonFinitePose { what })
            }
        };
        finite(self.root_x, "root_x")?;
        finite(self.root_y, "root_y")?;
        finite(self.scale, "scale")?;
        finite(self.orientation, "orientation")?;
        for j in 0..JOINT_COUNT {
            finite(self.angles[j], "angles")?;
            finite(self.lengths[j], "lengths")?;
            if j != ROOT && self.lengths[j] <= 0.0 {
                return Err(SynthError::NonPositiveLength {
                    joint: j,
                    length: self.lengths[j],
                });
            }
        }
        if self.scale <= 0.0 {
            return Err(SynthError::NonFinitePose { what: "scale" });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub visible: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Keypoints {
    pub joints: Vec<Keypoint>,
}

impl Keypoints {
    pub fn visible_count(&self) -> usize {
        self.joints.iter().filter(|j| j.visible).count()
    }
}

/// Chain the skeleton: each joint's global direction is its parent's plus
/// its rest offset plus its pose angle; positions accumulate scaled bone
/// vectors from the root.
pub fn forward_kinematics(pose: &PoseParams) -> [(f64, f64); JOINT_COUNT] {
    let mut pos = [(0.0, 0.0); JOINT_COUNT];
    let mut dir = [0.0; JOINT_COUNT];
    pos[ROOT] = (pose.root_x, pose.root_y);
    dir[ROOT] = pose.orientation;
    for &j in FK_ORDER.iter().skip(1) {
        let p = PARENTS[j];
        dir[j] = dir[p] + REST_ANGLES[j] + pose.angles[j];
        let len = pose.scale * pose.lengths[j];
        pos[j] = (
            pos[p].0 + len * dir[j].cos(),
            pos[p].1 + len * dir[j].sin(),
        );
    }
    pos
}

/// A rendered sample: pose, its image, and ground-truth keypoints.
#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub pose: PoseParams,
    pub background_seed: u64,
    pub image: ImageRgb,
    pub keypoints: Keypoints,
}

fn in_bounds(x: f64, y: f64, canvas: usize) -> bool {
    let hi = (canvas - 1) as f64;
    (0.0..=hi).contains(&x) && (0.0..=hi).contains(&y)
}

/// Smooth colored texture: a few low-frequency random-phase plane waves per
/// channel. Band-limited by construction, so its DCT energy sits in the low
/// frequencies like real photographs.
pub fn render_background(canvas: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base: [f64; 3] = [
        rng.gen_range(70.0..180.0),
        rng.gen_range(70.0..180.0),
        rng.gen_range(70.0..180.0),
    ];
    const WAVES: usize = 5;
    let mut waves = Vec::with_capacity(WAVES);
    for _ in 0..WAVES {
        let fx: f64 = rng.gen_range(0.5..4.0);
        let fy: f64 = rng.gen_range(0.5..4.0);
        let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let amp: f64 = rng.gen_range(5.0..22.0);
        let weights: [f64; 3] = [
            rng.gen_range(0.2..1.0),
            rng.gen_range(0.2..1.0),
            rng.gen_range(0.2..1.0),
        ];
        waves.push((fx, fy, phase, amp, weights));
    }
    let mut pixels = vec![0.0; canvas * canvas * 3];
    let inv = std::f64::consts::TAU / canvas as f64;
    for y in 0..canvas {
        for x in 0..canvas {
            let mut px = base;
            for &(fx, fy, phase, amp, w) in &waves {
                let s = (inv * (fx * x as f64 + fy * y as f64) + phase).cos() * amp;
                px[0] += s * w[0];
                px[1] += s * w[1];
                px[2] += s * w[2];
            }
            let o = (y * canvas + x) * 3;
            pixels[o] = px[0].clamp(0.0, 255.0);
            pixels[o + 1] = px[1].clamp(0.0, 255.0);
            pixels[o + 2] = px[2].clamp(0.0, 255.0);
        }
    }
    pixels
}

fn dist_to_segment(px: f64, py: f64, ax: f64, ay: f64, bx: f64, by: f64) -> f64 {
    let (dx, dy) = (bx - ax, by - ay);
    let len_sq = dx * dx + dy * dy;
    let t = if len_sq == 0.0 {
        0.0
    } else {
        (((px - ax) * dx + (py - ay) * dy) / len_sq).clamp(0.0, 1.0)
    };
    let (cx, cy) = (ax + t * dx, ay + t * dy);
    ((px - cx) * (px - cx) + (py - cy) * (py - cy)).sqrt()
}

/// Composite an antialiased capsule (segment with radius) over the canvas.
fn draw_capsule(
    pixels: &mut [f64],
    canvas: usize,
    a: (f64, f64),
    b: (f64, f64),
    radius: f64,
    color: [f64; 3],
) {
    let pad = radius + 1.0;
    let x0 = ((a.0.min(b.0) - pad).floor().max(0.0)) as usize;
    let x1 = ((a.0.max(b.0) + pad).ceil().min((canvas - 1) as f64)) as usize;
    let y0 = ((a.1.min(b.1) - pad).floor().max(0.0)) as usize;
    let y1 = ((a.1.max(b.1) + pad).ceil().min((canvas - 1) as f64)) as usize;
    for y in y0..=y1 {
        for x in x0..=x1 {
            let d = dist_to_segment(x as f64, y as f64, a.0, a.1, b.0, b.1);
            // 1-px antialiasing band around the capsule boundary
            let cov = (radius + 0.5 - d).clamp(0.0, 1.0);
            if cov > 0.0 {
                let o = (y * canvas + x) * 3;
                for c in 0..3 {
                    pixels[o + c] = pixels[o + c] * (1.0 - cov) + color[c] * cov;
                }
            }
        }
    }
}

/// Render a posed figure over a procedural background. Deterministic per
/// (pose, canvas, seed); keypoints come from forward kinematics and joints
/// outside the canvas are flagged invisible.
pub fn render_figure(
    pose: &PoseParams,
    canvas: usize,
    patch: usize,
    seed: u64,
) -> Result<SyntheticScene> {
    if patch == 0 || canvas == 0 || canvas % patch != 0 {
        return Err(SynthError::BadCanvas { canvas, patch });
    }
    pose.validate()?;
    if !in_bounds(pose.root_x, pose.root_y, canvas) {
        return Err(SynthError::RootOffCanvas {
            x: pose.root_x,
            y: pose.root_y,
            canvas,
        });
    }

    let positions = forward_kinematics(pose);
    let mut pixels = render_background(canvas, seeds::derive(seed, &[0x0B6]));

    let mut style = ChaCha8Rng::seed_from_u64(seeds::derive(seed, &[0xF16]));
    let color: [f64; 3] = [
        style.gen_range(10.0..70.0),
        style.gen_range(10.0..70.0),
        style.gen_range(10.0..70.0),
    ];
    let limb_radius = (0.035 * pose.scale).max(1.1);
    for j in 0..JOINT_COUNT {
        if j == ROOT {
            continue;
        }
        draw_capsule(
            &mut pixels,
            canvas,
            positions[PARENTS[j]],
            positions[j],
            limb_radius,
            color,
        );
    }
    // head disc on top of the neck->head bone
    draw_capsule(
        &mut pixels,
        canvas,
        positions[0],
        positions[0],
        (0.09 * pose.scale).max(1.6),
        color,
    );

    let joints = positions
        .iter()
        .map(|&(x, y)| Keypoint {
            x,
            y,
            visible: in_bounds(x, y, canvas),
        })
        .collect();
    Ok(SyntheticScene {
        pose: pose.clone(),
        background_seed: seed,
        image: ImageRgb::new(canvas, canvas, pixels)?,
        keypoints: Keypoints { joints },
    })
}

/// Random pose with the figure comfortably on canvas.
pub fn sample_pose(rng: &mut ChaCha8Rng, canvas: usize) -> PoseParams {
    let c = canvas as f64;
    let mut pose = PoseParams::canonical(
        c * rng.gen_range(0.40..0.60),
        c * rng.gen_range(0.30..0.44),
        c * rng.gen_range(0.30..0.42),
    );
    pose.orientation = rng.gen_range(-0.25..0.25);
    for j in 0..JOINT_COUNT {
        if j == ROOT {
            continue;
        }
        pose.angles[j] = match j {
            0 => rng.gen_range(-0.2..0.2),            // head
            2..=7 => rng.gen_range(-0.6..0.6),        // arms
            8 | 9 => rng.gen_range(-0.25..0.25),      // hips
            _ => rng.gen_range(-0.4..0.4),            // legs
        };
        pose.lengths[j] = CANONICAL_LENGTHS[j] * rng.gen_range(0.9..1.1);
    }
    pose
}

/// Two-view augmentation parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationSpec {
    /// Smallest crop side as a fraction of the canvas, in (0, 1].
    pub crop_min_frac: f64,
    pub flip_prob: f64,
    /// Max absolute brightness shift, pixel units.
    pub brightness: f64,
    /// Max relative per-channel gain deviation.
    pub color_jitter: f64,
    pub seed: u64,
}

impl AugmentationSpec {
    /// No-op augmentation: full crop, no flip, no photometric change.
    pub fn identity(seed: u64) -> AugmentationSpec {
        AugmentationSpec {
            crop_min_frac: 1.0,
            flip_prob: 0.0,
            brightness: 0.0,
            color_jitter: 0.0,
            seed,
        }
    }
}

/// Geometric part of one view: a square source crop resized to the full
/// canvas, optionally mirrored.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViewTransform {
    pub crop_x: usize,
    pub crop_y: usize,
    pub crop_size: usize,
    pub out_size: usize,
    pub flip: bool,
}

impl ViewTransform {
    pub fn identity(size: usize) -> ViewTransform {
        ViewTransform {
            crop_x: 0,
            crop_y: 0,
            crop_size: size,
            out_size: size,
            flip: false,
        }
    }

    fn scale(&self) -> f64 {
        self.out_size as f64 / self.crop_size as f64
    }

    /// Map a source-image point into the view's frame (pixel centers).
    pub fn apply_to_point(&self, x: f64, y: f64) -> (f64, f64) {
        let k = self.scale();
        let mut vx = (x - self.crop_x as f64 + 0.5) * k - 0.5;
        let vy = (y - self.crop_y as f64 + 0.5) * k - 0.5;
        if self.flip {
            vx = (self.out_size - 1) as f64 - vx;
        }
        (vx, vy)
    }

    /// Row-major 2×3 affine matrix equal to [`Self::apply_to_point`]:
    /// `[a, b, tx, c, d, ty]`.
    pub fn as_affine(&self) -> [f64; 6] {
        let k = self.scale();
        let tx = (0.5 - self.crop_x as f64) * k - 0.5;
        let ty = (0.5 - self.crop_y as f64) * k - 0.5;
        if self.flip {
            let w = (self.out_size - 1) as f64;
            [-k, 0.0, w - tx, 0.0, k, ty]
        } else {
            [k, 0.0, tx, 0.0, k, ty]
        }
    }
}

/// Photometric part of one view.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Photometric {
    pub brightness: f64,
    pub gains: [f64; 3],
}

impl Photometric {
    pub fn identity() -> Photometric {
        Photometric {
            brightness: 0.0,
            gains: [1.0; 3],
        }
    }
}

pub fn sample_view_transform(
    rng: &mut ChaCha8Rng,
    canvas: usize,
    spec: &AugmentationSpec,
) -> Result<ViewTransform> {
    if !(spec.crop_min_frac > 0.0 && spec.crop_min_frac <= 1.0) {
        return Err(SynthError::BadCropFraction {
            value: spec.crop_min_frac,
        });
    }
    let min_size = ((canvas as f64 * spec.crop_min_frac).round() as usize).clamp(1, canvas);
    let crop_size = rng.gen_range(min_size..=canvas);
    let crop_x = rng.gen_range(0..=canvas - crop_size);
    let crop_y = rng.gen_range(0..=canvas - crop_size);
    let flip = rng.gen_bool(spec.flip_prob.clamp(0.0, 1.0));
    Ok(ViewTransform {
        crop_x,
        crop_y,
        crop_size,
        out_size: canvas,
        flip,
    })
}

pub fn sample_photometric(rng: &mut ChaCha8Rng, spec: &AugmentationSpec) -> Photometric {
    let b = spec.brightness.abs();
    let c = spec.color_jitter.abs();
    let brightness = if b > 0.0 { rng.gen_range(-b..=b) } else { 0.0 };
    let mut gains = [1.0; 3];
    if c > 0.0 {
        for g in &mut gains {
            *g = rng.gen_range(1.0 - c..=1.0 + c);
        }
    }
    Photometric { brightness, gains }
}

/// Bilinear crop-resize followed by flip and photometric adjustment. The
/// identity transform reproduces the source exactly.
pub fn apply_view(img: &ImageRgb, view: &ViewTransform, photo: &Photometric) -> ImageRgb {
    let (h, w) = (img.height(), img.width());
    let out = view.out_size;
    let inv_k = view.crop_size as f64 / out as f64;
    let mut pixels = vec![0.0; out * out * 3];
    for oy in 0..out {
        let sy = view.crop_y as f64 + (oy as f64 + 0.5) * inv_k - 0.5;
        let y0 = sy.floor().clamp(0.0, (h - 1) as f64) as usize;
        let y1 = (y0 + 1).min(h - 1);
        let fy = (sy - y0 as f64).clamp(0.0, 1.0);
        for ox in 0..out {
            let sx = view.crop_x as f64 + (ox as f64 + 0.5) * inv_k - 0.5;
            let x0 = sx.floor().clamp(0.0, (w - 1) as f64) as usize;
            let x1 = (x0 + 1).min(w - 1);
            let fx = (sx - x0 as f64).clamp(0.0, 1.0);
            let dst_x = if view.flip { out - 1 - ox } else { ox };
            let o = (oy * out + dst_x) * 3;
            for c in 0..3 {
                let p00 = img.pixels()[(y0 * w + x0) * 3 + c];
                let p01 = img.pixels()[(y0 * w + x1) * 3 + c];
                let p10 = img.pixels()[(y1 * w + x0) * 3 + c];
                let p11 = img.pixels()[(y1 * w + x1) * 3 + c];
                let top = p00 * (1.0 - fx) + p01 * fx;
                let bottom = p10 * (1.0 - fx) + p11 * fx;
                let v = (top * (1.0 - fy) + bottom * fy) * photo.gains[c] + photo.brightness;
                pixels[o + c] = v.clamp(0.0, 255.0);
            }
        }
    }
    ImageRgb::new(out, out, pixels).expect("values clamped to range")
}

/// Map keypoints through a view's geometry: coordinates transform, joints
/// landing outside the view (or invisible before) are flagged invisible,
/// and flips swap left/right joint identities.
pub fn map_keypoints(kps: &Keypoints, view: &ViewTransform) -> Keypoints {
    let mut joints: Vec<Keypoint> = kps
        .joints
        .iter()
        .map(|kp| {
            let (x, y) = view.apply_to_point(kp.x, kp.y);
            Keypoint {
                x,
                y,
                visible: kp.visible && in_bounds(x, y, view.out_size),
            }
        })
        .collect();
    if view.flip {
        for &(l, r) in &LEFT_RIGHT_PAIRS {
            joints.swap(l, r);
        }
    }
    Keypoints { joints }
}

fn sample_view_with_joints(
    rng: &mut ChaCha8Rng,
    scene: &SyntheticScene,
    spec: &AugmentationSpec,
) -> Result<ViewTransform> {
    for _attempt in 0..2 {
        let view = sample_view_transform(rng, scene.image.height(), spec)?;
        if map_keypoints(&scene.keypoints, &view).visible_count() > 0 {
            return Ok(view);
        }
    }
    Err(SynthError::NoVisibleJoints)
}

/// Produce the two augmented views of a scene plus the keypoints mapped
/// into the first view's frame. Each view draws its geometric and
/// photometric parameters from its own stream of `spec.seed`; a crop that
/// hides every joint is resampled once, then rejected.
pub fn augment_two_views(
    scene: &SyntheticScene,
    spec: &AugmentationSpec,
) -> Result<(ImageRgb, ImageRgb, Keypoints)> {
    let mut rng_a = ChaCha8Rng::seed_from_u64(seeds::derive(spec.seed, &[0xA]));
    let mut rng_b = ChaCha8Rng::seed_from_u64(seeds::derive(spec.seed, &[0xB]));
    let view_a = sample_view_with_joints(&mut rng_a, scene, spec)?;
    let photo_a = sample_photometric(&mut rng_a, spec);
    let view_b = sample_view_with_joints(&mut rng_b, scene, spec)?;
    let photo_b = sample_photometric(&mut rng_b, spec);
    let img_a = apply_view(&scene.image, &view_a, &photo_a);
    let img_b = apply_view(&scene.image, &view_b, &photo_b);
    let kps_a = map_keypoints(&scene.keypoints, &view_a);
    Ok((img_a, img_b, kps_a))
}

/// One manifest record: everything needed to regenerate a sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub index: u64,
    pub seed: u64,
    pub pose: PoseParams,
    /// Per joint: [x, y, visible as 0.0/1.0].
    pub keypoints: Vec<[f64; 3]>,
}

impl ManifestEntry {
    pub fn from_scene(index: u64, seed: u64, scene: &SyntheticScene) -> ManifestEntry {
        ManifestEntry {
            index,
            seed,
            pose: scene.pose.clone(),
            keypoints: scene
                .keypoints
                .joints
                .iter()
                .map(|kp| [kp.x, kp.y, if kp.visible { 1.0 } else { 0.0 }])
                .collect(),
        }
    }

    pub fn keypoints(&self) -> Keypoints {
        Keypoints {
            joints: self
                .keypoints
                .iter()
                .map(|&[x, y, v]| Keypoint {
                    x,
                    y,
                    visible: v != 0.0,
                })
                .collect(),
        }
    }
}

pub fn to_manifest_line(entry: &ManifestEntry) -> String {
    serde_json::to_string(entry).expect("plain data serializes")
}

/// Parse and validate one JSONL manifest record.
pub fn parse_manifest_line(line: &str) -> Result<ManifestEntry> {
    let entry: ManifestEntry =
        serde_json::from_str(line).map_err(|e| SynthError::BadManifest(e.to_string()))?;
    if entry.keypoints.len() != JOINT_COUNT {
        return Err(SynthError::BadManifest(format!(
            "expected {JOINT_COUNT} keypoints, got {}",
            entry.keypoints.len()
        )));
    }
    for kp in &entry.keypoints {
        if !kp.iter().all(|v| v.is_finite()) {
            return Err(SynthError::BadManifest("non-finite keypoint".into()));
        }
        if kp[2] != 0.0 && kp[2] != 1.0 {
            return Err(SynthError::BadManifest(format!(
                "visibility flag must be 0 or 1, got {}",
                kp[2]
            )));
        }
    }
    entry
        .pose
        .validate()
        .map_err(|e| SynthError::BadManifest(e.to_string()))?;
    Ok(entry)
}

/// Deterministic synthetic dataset: sample `i` is a pure function of the
/// config and `i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub canvas: usize,
    pub patch: usize,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub config: DatasetConfig,
}

impl Dataset {
    pub fn new(config: DatasetConfig) -> Dataset {
        Dataset { config }
    }

    pub fn sample_seed(&self, index: u64) -> u64 {
        seeds::derive(self.config.seed, &[0xDA7A, index])
    }

    pub fn scene(&self, index: u64) -> Result<SyntheticScene> {
        let seed = self.sample_seed(index);
        let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(seed, &[0x905E]));
        let pose = sample_pose(&mut rng, self.config.canvas);
        render_figure(&pose, self.config.canvas, self.config.patch, seed)
    }

    pub fn entry(&self, index: u64) -> Result<ManifestEntry> {
        Ok(ManifestEntry::from_scene(
            index,
            self.sample_seed(index),
            &self.scene(index)?,
        ))
    }

    /// Write `count` manifest lines, and the images next to it when
    /// `image_dir` is given (as `sample_<index>.png`).
    pub fn materialize(
        &self,
        manifest_path: &std::path::Path,
        count: u64,
        image_dir: Option<&std::path::Path>,
    ) -> Result<()> {
        let mut lines = String::new();
        for i in 0..count {
            let scene = self.scene(i)?;
            let entry = ManifestEntry::from_scene(i, self.sample_seed(i), &scene);
            lines.push_str(&to_manifest_line(&entry));
            lines.push('\n');
            if let Some(dir) = image_dir {
                std::fs::create_dir_all(dir)?;
                crate::imageio::save_image_file(&dir.join(format!("sample_{i}.png")), &scene.image)
                    .map_err(|e| SynthError::BadManifest(e.to_string()))?;
            }
        }
        std::fs::write(manifest_path, lines)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dct::{build_dct_map, energy_compaction_stat};

    fn default_scene(seed: u64) -> SyntheticScene {
        let dataset = Dataset::new(DatasetConfig {
            canvas: 64,
            patch: 8,
            seed,
        });
        dataset.scene(0).unwrap()
    }

    #[test]
    fn canonical_pose_matches_closed_form() {
        let (rx, ry, s) = (32.0, 26.0, 20.0);
        let pose = PoseParams::canonical(rx, ry, s);
        let pos = forward_kinematics(&pose);
        let close = |got: (f64, f64), want: (f64, f64)| {
            assert!(
                (got.0 - want.0).abs() < 1e-9 && (got.1 - want.1).abs() < 1e-9,
                "got {got:?}, want {want:?}"
            );
        };
        close(pos[1], (rx, ry));
        close(pos[0], (rx, ry - 0.20 * s));
        close(pos[2], (rx - 0.22 * s, ry));
        close(pos[3], (rx + 0.22 * s, ry));
        close(pos[4], (rx - (0.22 + 0.26) * s, ry));
        close(pos[6], (rx - (0.22 + 0.26 + 0.24) * s, ry));
        close(pos[5], (rx + (0.22 + 0.26) * s, ry));
        close(pos[7], (rx + (0.22 + 0.26 + 0.24) * s, ry));
        // hips splay symmetrically off vertical
        let hip = 0.42 * s;
        close(
            pos[8],
            (rx - hip * HIP_SPLAY.sin(), ry + hip * HIP_SPLAY.cos()),
        );
        close(
            pos[9],
            (rx + hip * HIP_SPLAY.sin(), ry + hip * HIP_SPLAY.cos()),
        );
        // knees hang straight down from the hips, ankles below them
        close(pos[10], (pos[8].0, pos[8].1 + 0.34 * s));
        close(pos[12], (pos[10].0, pos[10].1 + 0.32 * s));
        close(pos[11], (pos[9].0, pos[9].1 + 0.34 * s));
        close(pos[13], (pos[11].0, pos[11].1 + 0.32 * s));
    }

    #[test]
    fn skeleton_topology_is_a_tree() {
        assert_eq!(PARENTS[ROOT], ROOT);
        for j in 0..JOINT_COUNT {
            // every joint reaches the root without cycles
            let (mut cur, mut steps) = (j, 0);
            while cur != ROOT {
                cur = PARENTS[cur];
                steps += 1;
                assert!(steps <= JOINT_COUNT, "cycle at joint {j}");
            }
        }
        assert_eq!(PARENTS.iter().filter(|&&p| p == ROOT).count(), 5 + 1); // head+2 shoulders+2 hips, plus root itself
    }

    #[test]
    fn rendering_is_deterministic() {
        let pose = PoseParams::canonical(32.0, 26.0, 20.0);
        let a = render_figure(&pose, 64, 8, 99).unwrap();
        let b = render_figure(&pose, 64, 8, 99).unwrap();
        assert_eq!(a.image, b.image);
        assert_eq!(a.keypoints, b.keypoints);
        let c = render_figure(&pose, 64, 8, 100).unwrap();
        assert_ne!(a.image, c.image);
    }

    #[test]
    fn stored_keypoints_match_independent_kinematics() {
        // independent chain evaluation, accumulated per joint from scratch
        fn chain_angle(pose: &PoseParams, j: usize) -> f64 {
            if j == ROOT {
                pose.orientation
            } else {
                chain_angle(pose, PARENTS[j]) + REST_ANGLES[j] + pose.angles[j]
            }
        }
        fn chain_pos(pose: &PoseParams, j: usize) -> (f64, f64) {
            if j == ROOT {
                (pose.root_x, pose.root_y)
            } else {
                let (px, py) = chain_pos(pose, PARENTS[j]);
                let a = chain_angle(pose, j);
                let l = pose.scale * pose.lengths[j];
                (px + l * a.cos(), py + l * a.sin())
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for t in 0..100 {
            let pose = sample_pose(&mut rng, 64);
            let scene = render_figure(&pose, 64, 8, t).unwrap();
            for j in 0..JOINT_COUNT {
                let (ex, ey) = chain_pos(&pose, j);
                let kp = scene.keypoints.joints[j];
                let err = ((kp.x - ex).powi(2) + (kp.y - ey).powi(2)).sqrt();
                assert!(err < 0.5, "joint {j} off by {err} px in pose {t}");
            }
        }
    }

    #[test]
    fn figure_ink_lands_at_joint_positions() {
        let scene = default_scene(3);
        let bg = render_background(
            64,
            seeds::derive(scene.background_seed, &[0x0B6]),
        );
        let mut touched = 0;
        let mut total = 0;
        for kp in &scene.keypoints.joints {
            if !kp.visible {
                continue;
            }
            total += 1;
            let (x, y) = (kp.x.round() as usize, kp.y.round() as usize);
            let o = (y * 64 + x) * 3;
            if (scene.image.pixels()[o] - bg[o]).abs() > 1.0 {
                touched += 1;
            }
        }
        assert!(total >= 10, "expected a mostly visible figure");
        assert!(
            touched * 10 >= total * 9,
            "figure ink missing at joints: {touched}/{total}"
        );
    }

    #[test]
    fn invalid_inputs_are_rejected() {
        let pose = PoseParams::canonical(-5.0, 20.0, 20.0);
        assert!(matches!(
            render_figure(&pose, 64, 8, 0),
            Err(SynthError::RootOffCanvas { .. })
        ));

        let mut bad_len = PoseParams::canonical(32.0, 26.0, 20.0);
        bad_len.lengths[4] = 0.0;
        assert!(matches!(
            render_figure(&bad_len, 64, 8, 0),
            Err(SynthError::NonPositiveLength { joint: 4, .. })
        ));

        let pose = PoseParams::canonical(32.0, 26.0, 20.0);
        assert!(matches!(
            render_figure(&pose, 60, 8, 0),
            Err(SynthError::BadCanvas { .. })
        ));
    }

    #[test]
    fn identity_augmentation_is_a_no_op() {
        let scene = default_scene(7);
        let spec = AugmentationSpec::identity(123);
        let (a, b, kps) = augment_two_views(&scene, &spec).unwrap();
        assert_eq!(a, scene.image);
        assert_eq!(b, scene.image);
        assert_eq!(kps, scene.keypoints);
    }

    #[test]
    fn horizontal_flip_mirrors_coordinates_and_labels() {
        let scene = default_scene(11);
        let view = ViewTransform {
            flip: true,
            ..ViewTransform::identity(64)
        };
        let flipped = apply_view(&scene.image, &view, &Photometric::identity());
        for y in 0..64 {
            for x in 0..64 {
                assert_eq!(flipped.pixel(y, x), scene.image.pixel(y, 63 - x));
            }
        }
        let kps = map_keypoints(&scene.keypoints, &view);
        for &(l, r) in &LEFT_RIGHT_PAIRS {
            let src_l = scene.keypoints.joints[l];
            let got_r = kps.joints[r];
            assert!((got_r.x - (63.0 - src_l.x)).abs() < 1e-9);
            assert!((got_r.y - src_l.y).abs() < 1e-9);
        }
        // head is unpaired: mirrored in place
        assert!((kps.joints[0].x - (63.0 - scene.keypoints.joints[0].x)).abs() < 1e-9);
    }

    #[test]
    fn view_transform_equals_its_affine_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let spec = AugmentationSpec {
            crop_min_frac: 0.5,
            flip_prob: 0.5,
            brightness: 0.0,
            color_jitter: 0.0,
            seed: 0,
        };
        for _ in 0..50 {
            let view = sample_view_transform(&mut rng, 64, &spec).unwrap();
            let m = view.as_affine();
            for _ in 0..10 {
                let (x, y) = (rng.gen_range(0.0..64.0), rng.gen_range(0.0..64.0));
                let (vx, vy) = view.apply_to_point(x, y);
                let mx = m[0] * x + m[1] * y + m[2];
                let my = m[3] * x + m[4] * y + m[5];
                assert!((vx - mx).abs() < 1e-6 && (vy - my).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn mapped_keypoints_match_rerendered_figure() {
        // crop + uniform rescale commutes with forward kinematics
        let scene = default_scene(17);
        let view = ViewTransform {
            crop_x: 8,
            crop_y: 4,
            crop_size: 48,
            out_size: 64,
            flip: false,
        };
        let mapped = map_keypoints(&scene.keypoints, &view);
        let mut pose = scene.pose.clone();
        let (rx, ry) = view.apply_to_point(pose.root_x, pose.root_y);
        pose.root_x = rx;
        pose.root_y = ry;
        pose.scale *= view.scale();
        let repositioned = forward_kinematics(&pose);
        for j in 0..JOINT_COUNT {
            let err = ((repositioned[j].0 - mapped.joints[j].x).powi(2)
                + (repositioned[j].1 - mapped.joints[j].y).powi(2))
            .sqrt();
            assert!(err < 1.0, "joint {j} drifted {err} px");
        }
    }

    #[test]
    fn augmentation_is_deterministic_per_seed() {
        let scene = default_scene(19);
        let spec = AugmentationSpec {
            crop_min_frac: 0.75,
            flip_prob: 0.5,
            brightness: 20.0,
            color_jitter: 0.2,
            seed: 55,
        };
        let (a1, b1, k1) = augment_two_views(&scene, &spec).unwrap();
        let (a2, b2, k2) = augment_two_views(&scene, &spec).unwrap();
        assert_eq!(a1, a2);
        assert_eq!(b1, b2);
        assert_eq!(k1, k2);
        // the two views differ from each other
        assert_ne!(a1, b1);
    }

    #[test]
    fn all_joints_hidden_is_an_error() {
        let mut scene = default_scene(23);
        for kp in &mut scene.keypoints.joints {
            kp.visible = false;
        }
        let spec = AugmentationSpec::identity(1);
        assert!(matches!(
            augment_two_views(&scene, &spec),
            Err(SynthError::NoVisibleJoints)
        ));
    }

    #[test]
    fn augmentation_succeeds_across_many_seeds() {
        let dataset = Dataset::new(DatasetConfig {
            canvas: 64,
            patch: 8,
            seed: 31,
        });
        for i in 0..50 {
            let scene = dataset.scene(i).unwrap();
            let spec = AugmentationSpec {
                crop_min_frac: 0.75,
                flip_prob: 0.5,
                brightness: 15.0,
                color_jitter: 0.15,
                seed: seeds::derive(31, &[i]),
            };
            let (a, b, kps) = augment_two_views(&scene, &spec).unwrap();
            assert_eq!(a.height(), 64);
            assert_eq!(b.height(), 64);
            assert!(kps.visible_count() > 0);
        }
    }

    #[test]
    fn manifest_roundtrip_preserves_entries() {
        let dataset = Dataset::new(DatasetConfig {
            canvas: 64,
            patch: 8,
            seed: 37,
        });
        for i in 0..5 {
            let entry = dataset.entry(i).unwrap();
            let line = to_manifest_line(&entry);
            let back = parse_manifest_line(&line).unwrap();
            assert_eq!(back, entry);
        }
    }

    #[test]
    fn manifest_rejects_malformed_lines() {
        assert!(parse_manifest_line("").is_err());
        assert!(parse_manifest_line("not json").is_err());
        assert!(parse_manifest_line("{\"index\":0}").is_err());
        // tamper with a valid line: wrong joint count
        let entry = Dataset::new(DatasetConfig {
            canvas: 64,
            patch: 8,
            seed: 41,
        })
        .entry(0)
        .unwrap();
        let mut short = entry.clone();
        short.keypoints.pop();
        assert!(parse_manifest_line(&to_manifest_line(&short)).is_err());
        let mut bad_flag = entry;
        bad_flag.keypoints[0][2] = 0.5;
        assert!(parse_manifest_line(&to_manifest_line(&bad_flag)).is_err());
    }

    #[test]
    fn materialize_writes_manifest_and_images() {
        let dir = tempfile::tempdir().unwrap();
        let dataset = Dataset::new(DatasetConfig {
            canvas: 32,
            patch: 8,
            seed: 43,
        });
        let manifest = dir.path().join("data.jsonl");
        let images = dir.path().join("imgs");
        dataset.materialize(&manifest, 3, Some(&images)).unwrap();
        let text = std::fs::read_to_string(&manifest).unwrap();
        let entries: Vec<ManifestEntry> = text
            .lines()
            .map(|l| parse_manifest_line(l).unwrap())
            .collect();
        assert_eq!(entries.len(), 3);
        for i in 0..3u64 {
            let img = load_image_file(&images.join(format!("sample_{i}.png"))).unwrap();
            assert_eq!(img.height(), 32);
        }
    }

    #[test]
    fn figure_renders_compact_energy_spectra() {
        // smooth renders concentrate energy far above the white-noise
        // baseline, which sits at the kept fraction
        let dataset = Dataset::new(DatasetConfig {
            canvas: 64,
            patch: 8,
            seed: 47,
        });
        let mut figure_stat = 0.0;
        let runs = 10;
        for i in 0..runs {
            let scene = dataset.scene(i).unwrap();
            let map = build_dct_map(&scene.image, 8).unwrap();
            figure_stat += energy_compaction_stat(&map, 0.25).unwrap();
        }
        figure_stat /= runs as f64;

        let mut rng = ChaCha8Rng::seed_from_u64(500);
        let mut noise_stat = 0.0;
        for _ in 0..runs {
            let pixels: Vec<f64> = (0..64 * 64 * 3).map(|_| rng.gen_range(0.0..=255.0)).collect();
            let img = ImageRgb::new(64, 64, pixels).unwrap();
            let map = build_dct_map(&img, 8).unwrap();
            noise_stat += energy_compaction_stat(&map, 0.25).unwrap();
        }
        noise_stat /= runs as f64;

        assert!(
            figure_stat > noise_stat + 0.2,
            "figure {figure_stat} vs noise {noise_stat}"
        );
    }
}
