//! Synthetic articulated-skeleton video clips.
//!
//! A 13-joint planar skeleton is animated with smooth sinusoidal joint
//! angles and rendered as anti-aliased capsules, one gray level per limb,
//! over a textured noise background.

use std::f64::consts::{FRAC_PI_2, PI};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rpstn_tensor::Tensor;

use crate::config::{DataConfig, ModelConfig};
use crate::error::{Error, Result};
use crate::heatmap::JointSet;

pub const JOINT_NAMES: [&str; 13] = [
    "head",
    "r_shoulder",
    "l_shoulder",
    "r_elbow",
    "l_elbow",
    "r_wrist",
    "l_wrist",
    "r_hip",
    "l_hip",
    "r_knee",
    "l_knee",
    "r_ankle",
    "l_ankle",
];

pub const LEFT_SHOULDER: usize = 2;
pub const RIGHT_HIP: usize = 7;

/// One node of the kinematic tree. Angles are relative to the parent bone;
/// zero points up the image.
#[derive(Debug, Clone, PartialEq)]
pub struct Bone {
    pub name: &'static str,
    pub parent: Option<usize>,
    /// Length in skeleton units.
    pub length: f64,
    pub rest_angle: f64,
    /// Maximum oscillation amplitude around the rest angle.
    pub angle_range: f64,
}

/// A capsule drawn between two nodes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Limb {
    pub from: usize,
    pub to: usize,
    pub radius: f64,
    pub gray: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonModel {
    /// Node 0 is the pelvis root.
    pub bones: Vec<Bone>,
    /// Node index of each annotated joint, in `JOINT_NAMES` order.
    pub keypoints: Vec<usize>,
    pub limbs: Vec<Limb>,
    pub head_node: usize,
    pub head_radius: f64,
    pub head_gray: f32,
}

impl Default for SkeletonModel {
    fn default() -> Self {
        Self::thirteen_joint()
    }
}

impl SkeletonModel {
    pub fn thirteen_joint() -> Self {
        let b = |name, parent: usize, length, rest_angle, angle_range| Bone {
            name,
            parent: Some(parent),
            length,
            rest_angle,
            angle_range,
        };
        let bones = vec![
            Bone {
                name: "pelvis",
                parent: None,
                length: 0.0,
                rest_angle: 0.0,
                angle_range: 0.12,
            },
            b("neck", 0, 0.30, 0.0, 0.12),
            b("head", 1, 0.13, 0.0, 0.25),
            b("r_shoulder", 1, 0.10, -FRAC_PI_2, 0.0),
            b("l_shoulder", 1, 0.10, FRAC_PI_2, 0.0),
            b("r_elbow", 3, 0.17, -FRAC_PI_2 + 0.3, 1.1),
            b("l_elbow", 4, 0.17, FRAC_PI_2 - 0.3, 1.1),
            b("r_wrist", 5, 0.15, 0.2, 0.9),
            b("l_wrist", 6, 0.15, -0.2, 0.9),
            b("r_hip", 0, 0.08, -FRAC_PI_2, 0.0),
            b("l_hip", 0, 0.08, FRAC_PI_2, 0.0),
            b("r_knee", 9, 0.24, -FRAC_PI_2 + 0.08, 0.45),
            b("l_knee", 10, 0.24, FRAC_PI_2 - 0.08, 0.45),
            b("r_ankle", 11, 0.24, 0.0, 0.5),
            b("l_ankle", 12, 0.24, 0.0, 0.5),
        ];
        let l = |from, to, radius, gray| Limb { from, to, radius, gray };
        let limbs = vec![
            l(0, 1, 0.07, 0.50),
            l(3, 4, 0.04, 0.50),
            l(9, 10, 0.04, 0.50),
            l(9, 11, 0.045, 0.65),
            l(11, 13, 0.035, 0.90),
            l(10, 12, 0.045, 0.55),
            l(12, 14, 0.035, 0.80),
            l(3, 5, 0.035, 0.70),
            l(5, 7, 0.03, 0.85),
            l(4, 6, 0.035, 0.60),
            l(6, 8, 0.03, 0.75),
        ];
        Self {
            bones,
            keypoints: (2..15).collect(),
            limbs,
            head_node: 2,
            head_radius: 0.07,
            head_gray: 1.0,
        }
    }

    pub fn joint_count(&self) -> usize {
        self.keypoints.len()
    }

    pub fn validate(&self) -> Result<()> {
        for (i, bone) in self.bones.iter().enumerate() {
            match bone.parent {
                None if i == 0 => {}
                Some(p) if p < i && i > 0 => {
                    if !(bone.length > 0.0) {
                        return Err(Error::Data(format!("bone '{}' has non-positive length", bone.name)));
                    }
                }
                _ => {
                    return Err(Error::Data(format!(
                        "bone '{}' breaks the tree ordering rooted at the pelvis",
                        bone.name
                    )))
                }
            }
        }
        Ok(())
    }

    /// Node positions (skeleton units, root at origin) for absolute root
    /// angle `root_angle` and relative joint angles `angles`.
    pub fn forward_kinematics(&self, root_angle: f64, angles: &[f64]) -> Vec<[f64; 2]> {
        let mut pos = vec![[0.0, 0.0]; self.bones.len()];
        let mut abs = vec![root_angle; self.bones.len()];
        for (i, bone) in self.bones.iter().enumerate().skip(1) {
            let p = bone.parent.expect("validated tree");
            abs[i] = abs[p] + angles[i];
            pos[i] = [
                pos[p][0] + bone.length * abs[i].sin(),
                pos[p][1] - bone.length * abs[i].cos(),
            ];
        }
        pos
    }

    /// Upper bound of a keypoint's per-frame displacement in pixels.
    pub fn displacement_bound(&self, data: &DataConfig) -> f64 {
        let w = data.angular_speed;
        let mut speed = vec![0.0; self.bones.len()];
        let mut bound = vec![0.0; self.bones.len()];
        speed[0] = self.bones[0].angle_range * w;
        for (i, bone) in self.bones.iter().enumerate().skip(1) {
            let p = bone.parent.expect("validated tree");
            speed[i] = speed[p] + bone.angle_range * w;
            bound[i] = bound[p] + bone.length * speed[i];
        }
        let worst = self.keypoints.iter().map(|&k| bound[k]).fold(0.0, f64::max);
        // pixel-center snapping moves each axis by under one pixel
        data.root_speed + worst * data.scale_max + 2f64.sqrt()
    }
}

/// One training/evaluation clip.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseSequenceSample {
    /// `[T, 3, H, W]`, values in `[0, 1]`.
    pub frames: Tensor<f32>,
    /// Per-frame joint coordinates and visibility.
    pub joints: Vec<JointSet>,
    /// Per-frame person box `(x0, y0, x1, y1)`.
    pub bbox: Vec<[f32; 4]>,
}

impl PoseSequenceSample {
    pub fn frame_count(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn frame(&self, t: usize) -> Tensor<f32> {
        self.frames.select_first(t).expect("frame index in range")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub frames: usize,
    pub joints: usize,
    pub height: usize,
    pub width: usize,
    pub samples: Vec<PoseSequenceSample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Check every sample against the header and annotation invariants.
    pub fn validate(&self) -> Result<()> {
        for (i, s) in self.samples.iter().enumerate() {
            if s.frames.shape() != [self.frames, 3, self.height, self.width]
                || s.joints.len() != self.frames
                || s.bbox.len() != self.frames
            {
                return Err(Error::Data(format!("sample {i} does not match dataset header")));
            }
            for (t, (js, b)) in s.joints.iter().zip(&s.bbox).enumerate() {
                if js.len() != self.joints {
                    return Err(Error::Data(format!("sample {i} frame {t}: joint count {}", js.len())));
                }
                if b[0] < 0.0 || b[1] < 0.0 || b[2] > self.width as f32 || b[3] > self.height as f32 {
                    return Err(Error::Data(format!("sample {i} frame {t}: bbox outside image")));
                }
                for (k, (&[x, y], &v)) in js.coords.iter().zip(&js.visible).enumerate() {
                    if v && !(x >= b[0] && x <= b[2] && y >= b[1] && y <= b[3]) {
                        return Err(Error::Data(format!(
                            "sample {i} frame {t}: visible joint {k} outside bbox"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Per-sample motion parameters.
struct Motion {
    origin: [f64; 2],
    velocity: [f64; 2],
    scale: f64,
    tilt: f64,
    amplitude: Vec<f64>,
    rate: Vec<f64>,
    phase: Vec<f64>,
}

impl Motion {
    fn sample(rng: &mut ChaCha8Rng, skel: &SkeletonModel, data: &DataConfig, h: usize, w: usize) -> Self {
        let n = skel.bones.len();
        let speed = rng.gen_range(0.0..=1.0) * data.root_speed;
        let dir = rng.gen_range(0.0..2.0 * PI);
        let mut amplitude = Vec::with_capacity(n);
        let mut rate = Vec::with_capacity(n);
        let mut phase = Vec::with_capacity(n);
        for bone in &skel.bones {
            amplitude.push(bone.angle_range * rng.gen_range(0.3..=1.0));
            rate.push(rng.gen_range(-1.0..=1.0) * data.angular_speed);
            phase.push(rng.gen_range(0.0..2.0 * PI));
        }
        Self {
            origin: [rng.gen_range(0.3..0.7) * w as f64, rng.gen_range(0.4..0.6) * h as f64],
            velocity: [speed * dir.cos(), speed * dir.sin()],
            scale: rng.gen_range(data.scale_min..=data.scale_max),
            tilt: rng.gen_range(-0.15..=0.15),
            amplitude,
            rate,
            phase,
        }
    }

    /// Node positions in pixels at frame `t`, snapped to pixel centers.
    fn pose(&self, skel: &SkeletonModel, t: usize) -> Vec<[f64; 2]> {
        let tf = t as f64;
        let angles: Vec<f64> = skel
            .bones
            .iter()
            .enumerate()
            .map(|(i, b)| b.rest_angle + self.amplitude[i] * (self.rate[i] * tf + self.phase[i]).sin())
            .collect();
        let root_angle = self.tilt + angles[0];
        let root = [
            self.origin[0] + self.velocity[0] * tf,
            self.origin[1] + self.velocity[1] * tf,
        ];
        skel.forward_kinematics(root_angle, &angles)
            .into_iter()
            .map(|[x, y]| {
                let px = root[0] + self.scale * x;
                let py = root[1] + self.scale * y;
                [px.floor() + 0.5, py.floor() + 0.5]
            })
            .collect()
    }
}

fn render_background(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Vec<f32> {
    let base: f64 = rng.gen_range(0.1..0.3);
    const GRID: usize = 9;
    let coarse: Vec<f64> = (0..GRID * GRID).map(|_| rng.gen_range(-0.08..0.08)).collect();
    let mut out = vec![0.0f32; h * w];
    for y in 0..h {
        let gy = y as f64 / (h - 1).max(1) as f64 * (GRID - 1) as f64;
        let (y0, fy) = ((gy.floor() as usize).min(GRID - 2), gy - gy.floor().min((GRID - 2) as f64));
        for x in 0..w {
            let gx = x as f64 / (w - 1).max(1) as f64 * (GRID - 1) as f64;
            let (x0, fx) = ((gx.floor() as usize).min(GRID - 2), gx - gx.floor().min((GRID - 2) as f64));
            let c = |yy: usize, xx: usize| coarse[yy * GRID + xx];
            let smooth = c(y0, x0) * (1.0 - fx) * (1.0 - fy)
                + c(y0, x0 + 1) * fx * (1.0 - fy)
                + c(y0 + 1, x0) * (1.0 - fx) * fy
                + c(y0 + 1, x0 + 1) * fx * fy;
            out[y * w + x] = (base + smooth + rng.gen_range(-0.03..0.03)) as f32;
        }
    }
    out
}

fn segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0)
    };
    let (cx, cy) = (a[0] + t * dx, a[1] + t * dy);
    ((p[0] - cx).powi(2) + (p[1] - cy).powi(2)).sqrt()
}

/// Blend an anti-aliased capsule of `radius` pixels into `img`.
fn draw_capsule(img: &mut [f32], h: usize, w: usize, a: [f64; 2], b: [f64; 2], radius: f64, gray: f32) {
    let pad = radius + 1.0;
    let x0 = (a[0].min(b[0]) - pad).floor().max(0.0) as usize;
    let x1 = ((a[0].max(b[0]) + pad).ceil() as usize).min(w);
    let y0 = (a[1].min(b[1]) - pad).floor().max(0.0) as usize;
    let y1 = ((a[1].max(b[1]) + pad).ceil() as usize).min(h);
    for y in y0..y1 {
        for x in x0..x1 {
            let d = segment_distance([x as f64 + 0.5, y as f64 + 0.5], a, b);
            let cover = (radius + 0.5 - d).clamp(0.0, 1.0) as f32;
            if cover > 0.0 {
                let px = &mut img[y * w + x];
                *px = *px * (1.0 - cover) + gray * cover;
            }
        }
    }
}

fn render_frame(skel: &SkeletonModel, pose: &[[f64; 2]], scale: f64, background: &[f32], rng: &mut ChaCha8Rng, h: usize, w: usize) -> Vec<f32> {
    let mut img: Vec<f32> = background
        .iter()
        .map(|&v| v + rng.gen_range(-0.01f32..0.01))
        .collect();
    for limb in &skel.limbs {
        draw_capsule(&mut img, h, w, pose[limb.from], pose[limb.to], limb.radius * scale, limb.gray);
    }
    let c = pose[skel.head_node];
    draw_capsule(&mut img, h, w, c, c, skel.head_radius * scale, skel.head_gray);
    img.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    img
}

const MAX_ATTEMPTS: usize = 64;
const MARGIN: f64 = 2.0;

fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Generate sample `index` of the stream defined by `seed`.
pub fn generate_sample(
    skel: &SkeletonModel,
    model: &ModelConfig,
    data: &DataConfig,
    seed: u64,
    index: u64,
) -> Result<PoseSequenceSample> {
    let (h, w, t_len) = (model.height, model.width, model.frames);
    let mut rng = sample_rng(seed, index);
    let background = render_background(&mut rng, h, w);
    for _ in 0..MAX_ATTEMPTS {
        let motion = Motion::sample(&mut rng, skel, data, h, w);
        let poses: Vec<_> = (0..t_len).map(|t| motion.pose(skel, t)).collect();
        let reach = skel.head_radius * motion.scale;
        let fits = poses.iter().flatten().all(|&[x, y]| {
            x >= MARGIN + reach
                && y >= MARGIN + reach
                && x <= w as f64 - MARGIN - reach
                && y <= h as f64 - MARGIN - reach
        });
        if !fits {
            continue;
        }
        let mut frames = Vec::with_capacity(t_len * 3 * h * w);
        let mut joints = Vec::with_capacity(t_len);
        let mut bbox = Vec::with_capacity(t_len);
        for pose in &poses {
            let gray = render_frame(skel, pose, motion.scale, &background, &mut rng, h, w);
            for _ in 0..3 {
                frames.extend_from_slice(&gray);
            }
            let coords: Vec<[f32; 2]> = skel
                .keypoints
                .iter()
                .map(|&n| [pose[n][0] as f32, pose[n][1] as f32])
                .collect();
            let (mut lo, mut hi) = ([f64::MAX; 2], [f64::MIN; 2]);
            for &n in &skel.keypoints {
                for a in 0..2 {
                    lo[a] = lo[a].min(pose[n][a]);
                    hi[a] = hi[a].max(pose[n][a]);
                }
            }
            bbox.push([
                (lo[0] - reach).max(0.0) as f32,
                (lo[1] - reach).max(0.0) as f32,
                (hi[0] + reach).min(w as f64) as f32,
                (hi[1] + reach).min(h as f64) as f32,
            ]);
            joints.push(JointSet::all_visible(coords));
        }
        return Ok(PoseSequenceSample {
            frames: Tensor::new(&[t_len, 3, h, w], frames)?,
            joints,
            bbox,
        });
    }
    Err(Error::Data(format!(
        "could not place the skeleton on a {w}x{h} frame for sample {index} after {MAX_ATTEMPTS} attempts; reduce scale or speed"
    )))
}

/// `data.samples` clips, each reproducible from `(seed, index)` alone.
pub fn generate(model: &ModelConfig, data: &DataConfig, seed: u64) -> Result<Dataset> {
    data.validate()?;
    let skel = SkeletonModel::thirteen_joint();
    skel.validate()?;
    if skel.joint_count() != model.joints {
        return Err(Error::Config(format!(
            "the synthetic skeleton has {} joints, config asks for {}",
            skel.joint_count(),
            model.joints
        )));
    }
    let samples = (0..data.samples as u64)
        .map(|i| generate_sample(&skel, model, data, seed, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        frames: model.frames,
        joints: model.joints,
        height: model.height,
        width: model.width,
        samples,
    })
}

/// A filled rectangle `[x0, x1) x [y0, y1)` on one frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Occluder {
    pub frame: usize,
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
    pub fill: [f32; 3],
}

impl Occluder {
    /// Square of side `side` centered on `(x, y)`, clipped to the image.
    pub fn centered(frame: usize, x: f32, y: f32, side: f64, height: usize, width: usize, fill: [f32; 3]) -> Self {
        let half = side / 2.0;
        let clip = |v: f64, hi: usize| v.round().clamp(0.0, hi as f64) as usize;
        Self {
            frame,
            x0: clip(x as f64 - half, width),
            y0: clip(y as f64 - half, height),
            x1: clip(x as f64 + half, width),
            y1: clip(y as f64 + half, height),
            fill,
        }
    }
}

/// Paint occluders onto `[T, 3, H, W]` frames.
pub fn apply_occluders(frames: &mut Tensor<f32>, occluders: &[Occluder]) {
    let (h, w) = (frames.shape()[2], frames.shape()[3]);
    let data = frames.data_mut();
    for o in occluders {
        for (c, &fill) in o.fill.iter().enumerate() {
            let plane = (o.frame * 3 + c) * h * w;
            for y in o.y0..o.y1 {
                data[plane + y * w + o.x0..plane + y * w + o.x1].fill(fill);
            }
        }
    }
}

/// Mean border color of frame `t`, used as the background fill.
pub fn border_color(frames: &Tensor<f32>, t: usize) -> [f32; 3] {
    let (h, w) = (frames.shape()[2], frames.shape()[3]);
    let d = frames.data();
    let mut out = [0.0f32; 3];
    for (c, o) in out.iter_mut().enumerate() {
        let plane = &d[(t * 3 + c) * h * w..(t * 3 + c + 1) * h * w];
        let mut sum = 0.0f64;
        let mut n = 0usize;
        for y in 0..h {
            for x in 0..w {
                if y == 0 || x == 0 || y == h - 1 || x == w - 1 {
                    sum += plane[y * w + x] as f64;
                    n += 1;
                }
            }
        }
        *o = (sum / n as f64) as f32;
    }
    out
}

/// The occluders `occlude` would paint, with the joints they hide.
pub fn draw_occluders(
    sample: &PoseSequenceSample,
    rate: f64,
    side: f64,
    seed: u64,
    index: u64,
) -> Result<Vec<(Occluder, usize)>> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::Data(format!("occlusion rate {rate} outside [0, 1]")));
    }
    let (h, w) = (sample.frames.shape()[2], sample.frames.shape()[3]);
    let mut rng = sample_rng(seed, index);
    let mut out = Vec::new();
    for t in 1..sample.frame_count() {
        let fill = border_color(&sample.frames, t);
        for (k, &[x, y]) in sample.joints[t].coords.iter().enumerate() {
            if rng.gen_bool(rate) {
                out.push((Occluder::centered(t, x, y, side, h, w, fill), k));
            }
        }
    }
    Ok(out)
}

/// Mask joints of frames 2..T with background-colored squares of side
/// `side` pixels, each independently with probability `rate`. Masked joints
/// keep their coordinates but are flagged invisible.
pub fn occlude(sample: &PoseSequenceSample, rate: f64, side: f64, seed: u64, index: u64) -> Result<PoseSequenceSample> {
    let masks = draw_occluders(sample, rate, side, seed, index)?;
    let mut out = sample.clone();
    let occ: Vec<Occluder> = masks.iter().map(|(o, _)| *o).collect();
    apply_occluders(&mut out.frames, &occ);
    for (o, k) in masks {
        out.joints[o.frame].visible[k] = false;
    }
    Ok(out)
}

/// Mask side used by the occlusion protocol: `3 * sigma * stride` pixels.
pub fn occluder_side(model: &ModelConfig) -> f64 {
    3.0 * model.sigma * model.stride as f64
}

/// Occlude every sample of a dataset (sample `i` uses stream `i`).
pub fn occlude_dataset(data: &Dataset, rate: f64, side: f64, seed: u64) -> Result<Dataset> {
    let samples = data
        .samples
        .iter()
        .enumerate()
        .map(|(i, s)| occlude(s, rate, side, seed, i as u64))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        samples,
        ..data.clone()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> (ModelConfig, DataConfig) {
        (
            ModelConfig::default(),
            DataConfig {
                samples: 6,
                ..DataConfig::default()
            },
        )
    }

    #[test]
    fn skeleton_is_a_tree_with_thirteen_joints() {
        let s = SkeletonModel::thirteen_joint();
        s.validate().unwrap();
        assert_eq!(s.joint_count(), JOINT_NAMES.len());
        for (&node, name) in s.keypoints.iter().zip(JOINT_NAMES) {
            assert_eq!(s.bones[node].name, name);
        }
    }

    #[test]
    fn broken_tree_is_rejected() {
        let mut s = SkeletonModel::thirteen_joint();
        s.bones[3].parent = Some(7);
        assert!(s.validate().is_err());
        let mut s = SkeletonModel::thirteen_joint();
        s.bones[5].length = 0.0;
        assert!(s.validate().is_err());
    }

    #[test]
    fn same_seed_and_index_is_bitwise_identical() {
        let (m, d) = small();
        let skel = SkeletonModel::thirteen_joint();
        let a = generate_sample(&skel, &m, &d, 11, 3).unwrap();
        let b = generate_sample(&skel, &m, &d, 11, 3).unwrap();
        assert_eq!(a, b);
        let c = generate_sample(&skel, &m, &d, 11, 4).unwrap();
        assert_ne!(a.frames, c.frames);
    }

    #[test]
    fn clean_samples_satisfy_annotation_invariants() {
        let (m, d) = small();
        let ds = generate(&m, &d, 5).unwrap();
        ds.validate().unwrap();
        for s in &ds.samples {
            assert!(s.joints.iter().all(|j| j.visible.iter().all(|&v| v)));
            assert!(s.frames.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn oversized_skeleton_fails_with_data_error() {
        let (m, mut d) = small();
        d.scale_min = 200.0;
        d.scale_max = 200.0;
        assert!(matches!(generate(&m, &d, 1), Err(Error::Data(_))));
    }

    #[test]
    fn zero_rate_is_identity_and_full_rate_masks_all_later_frames() {
        let (m, d) = small();
        let ds = generate(&m, &d, 2).unwrap();
        let side = occluder_side(&m);
        let s = &ds.samples[0];
        assert_eq!(&occlude(s, 0.0, side, 9, 0).unwrap(), s);
        let full = occlude(s, 1.0, side, 9, 0).unwrap();
        assert!(full.joints[0].visible.iter().all(|&v| v));
        for t in 1..s.frame_count() {
            assert!(full.joints[t].visible.iter().all(|&v| !v));
            assert_eq!(full.joints[t].coords, s.joints[t].coords);
        }
        assert_eq!(full.frame(0), s.frame(0));
        assert!(occlude(s, 1.5, side, 9, 0).is_err());
    }

    #[test]
    fn masked_fraction_concentrates_near_rate() {
        let (m, mut d) = small();
        d.samples = 20;
        let ds = generate(&m, &d, 3).unwrap();
        let occ = occlude_dataset(&ds, 0.3, occluder_side(&m), 17).unwrap();
        let (mut masked, mut total) = (0usize, 0usize);
        for s in &occ.samples {
            for js in &s.joints[1..] {
                total += js.len();
                masked += js.visible.iter().filter(|&&v| !v).count();
            }
        }
        assert!(total >= 1000);
        let frac = masked as f64 / total as f64;
        assert!((0.27..=0.33).contains(&frac), "masked fraction {frac}");
    }
}
