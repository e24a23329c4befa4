//! Deterministic synthetic vineyard.
//!
//! Two (or more) rows of vine trunks with buildings at the row ends. The
//! camera drives forward alongside the first row, U-turns, returns alongside
//! the last row and U-turns back to the start, closing the loop.
//!
//! World frame: x along the rows, y to the left, z up; the ground is `z = 0`.
//!
//! Trunk descriptors alias on purpose: every keypoint slot of a class shares
//! a base vector, and instances differ only by a small offset
//! (`aliasing_alpha`) under per-observation noise (`noise_sigma`). Masks are
//! exact ray-cast silhouettes, so the ground truth stays exact.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::descriptor::{l2_normalize, Descriptor, Keypoint};
use crate::error::{Error, Result};
use crate::geom::{
    project_camera_point, CameraIntrinsics, PoseSE3, Projection, RotationMatrix, Vec2, Vec3,
};
use crate::io::{derive_seed, task_id};
use crate::mask::{Bitmap, DepthMap};

pub type InstanceId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SemanticClass {
    Trunk,
    Building,
    Background,
}

impl SemanticClass {
    pub fn name(&self) -> &'static str {
        match self {
            SemanticClass::Trunk => "trunk",
            SemanticClass::Building => "building",
            SemanticClass::Background => "background",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceMask {
    pub instance_id: InstanceId,
    pub class: SemanticClass,
    pub bitmap: Bitmap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub n_trunks_per_row: usize,
    pub n_rows: usize,
    /// Length of each trunk row, meters.
    pub row_length: f64,
    /// Lateral distance between trunk rows, meters.
    pub row_spacing: f64,
    pub n_buildings: usize,
    /// Magnitude of the per-instance descriptor offset.
    pub aliasing_alpha: f64,
    /// Expected L2 norm of the per-observation descriptor noise.
    pub noise_sigma: f64,
    pub descriptor_dim: usize,
    /// Dimension of the subspace in which instance offsets and observation
    /// noise live. Trunks differ, and vary between views, along few modes.
    pub appearance_rank: usize,
    pub keypoints_per_instance: usize,
    /// Maximum background keypoints per frame.
    pub background_keypoints: usize,
    /// Probability that a visible instance keypoint is kept (foliage proxy).
    pub visibility_fraction: f64,
    /// Std-dev of keypoint position noise, pixels.
    pub pixel_noise: f64,
    /// Arc length between consecutive frames, meters.
    pub frame_step: f64,
    /// Amplitude of the lateral sway of the driven path, meters.
    pub path_wobble: f64,
    pub camera_height: f64,
    pub image_width: u32,
    pub image_height: u32,
    pub focal_length: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    /// Desk-scale scene: a ~44 m loop around two 12 m rows.
    fn default() -> Self {
        SceneConfig {
            n_trunks_per_row: 10,
            n_rows: 2,
            row_length: 12.0,
            row_spacing: 2.5,
            n_buildings: 2,
            aliasing_alpha: 0.05,
            noise_sigma: 0.02,
            descriptor_dim: 256,
            appearance_rank: 1,
            keypoints_per_instance: 8,
            background_keypoints: 48,
            visibility_fraction: 1.0,
            pixel_noise: 0.0,
            frame_step: 0.3,
            path_wobble: 0.05,
            camera_height: 1.0,
            image_width: 320,
            image_height: 240,
            focal_length: 200.0,
            seed: 1,
        }
    }
}

/// Straight-segment overrun past the trunk rows before the U-turn, meters.
const TURN_MARGIN: f64 = 1.0;

impl SceneConfig {
    /// Field-scale loop of about 153 m with 1.2 m trunk spacing.
    pub fn full_scale() -> Self {
        let base = SceneConfig::default();
        let turn_radius = base.row_spacing * base.n_rows as f64 / 2.0;
        let row_length = (153.0 - 2.0 * PI * turn_radius) / 2.0 - 2.0 * TURN_MARGIN;
        SceneConfig {
            row_length,
            n_trunks_per_row: (row_length / 1.2).round() as usize,
            ..base
        }
    }

    pub fn validate(&self) -> Result<()> {
        let count = |name: &str, v: usize| {
            if v >= 1 {
                Ok(())
            } else {
                Err(Error::validation(name, "must be >= 1"))
            }
        };
        count("n_trunks_per_row", self.n_trunks_per_row)?;
        count("n_rows", self.n_rows)?;
        count("n_buildings", self.n_buildings)?;
        count("keypoints_per_instance", self.keypoints_per_instance)?;
        count("background_keypoints", self.background_keypoints)?;
        if self.descriptor_dim < 8 || self.descriptor_dim % 2 != 0 {
            return Err(Error::validation("descriptor_dim", "must be even and >= 8"));
        }
        if self.appearance_rank == 0 || self.appearance_rank > self.descriptor_dim {
            return Err(Error::validation(
                "appearance_rank",
                "must lie in [1, descriptor_dim]",
            ));
        }
        let nonneg = |name: &str, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(Error::validation(name, "must be finite and >= 0"))
            }
        };
        nonneg("aliasing_alpha", self.aliasing_alpha)?;
        nonneg("noise_sigma", self.noise_sigma)?;
        nonneg("pixel_noise", self.pixel_noise)?;
        nonneg("path_wobble", self.path_wobble)?;
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::validation(name, "must be finite and > 0"))
            }
        };
        positive("row_length", self.row_length)?;
        positive("row_spacing", self.row_spacing)?;
        positive("frame_step", self.frame_step)?;
        positive("camera_height", self.camera_height)?;
        positive("focal_length", self.focal_length)?;
        if !(0.0..=1.0).contains(&self.visibility_fraction) {
            return Err(Error::validation(
                "visibility_fraction",
                "must lie in [0, 1]",
            ));
        }
        if self.image_width < 2 || self.image_height < 2 {
            return Err(Error::validation(
                "image_width",
                "image must be at least 2x2",
            ));
        }
        if self.path_wobble >= self.row_spacing / 4.0 {
            return Err(Error::validation(
                "path_wobble",
                "must stay below row_spacing / 4",
            ));
        }
        Ok(())
    }

    pub fn intrinsics(&self) -> Result<CameraIntrinsics> {
        CameraIntrinsics::new(
            self.focal_length,
            self.focal_length,
            f64::from(self.image_width) / 2.0,
            f64::from(self.image_height) / 2.0,
            self.image_width,
            self.image_height,
        )
    }

    fn turn_radius(&self) -> f64 {
        self.row_spacing * self.n_rows as f64 / 2.0
    }

    /// Closed-loop arc length of the driven path (without sway), meters.
    pub fn loop_length(&self) -> f64 {
        2.0 * (self.row_length + 2.0 * TURN_MARGIN) + 2.0 * PI * self.turn_radius()
    }
}

/// A static object: a convex footprint extruded to `height`, with the top
/// face scaled by `top_scale` about the footprint centroid and shifted by
/// `lean`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub id: InstanceId,
    pub class: SemanticClass,
    /// Counter-clockwise footprint polygon on the ground, meters.
    pub footprint: Vec<[f64; 2]>,
    pub height: f64,
    pub top_scale: f64,
    pub lean: [f64; 2],
}

impl Instance {
    fn centroid_2d(&self) -> [f64; 2] {
        let n = self.footprint.len() as f64;
        let (sx, sy) = self
            .footprint
            .iter()
            .fold((0.0, 0.0), |(ax, ay), p| (ax + p[0], ay + p[1]));
        [sx / n, sy / n]
    }

    fn bottom_vertex(&self, i: usize) -> Vec3 {
        let p = self.footprint[i % self.footprint.len()];
        Vec3::new(p[0], p[1], 0.0)
    }

    fn top_vertex(&self, i: usize) -> Vec3 {
        let c = self.centroid_2d();
        let p = self.footprint[i % self.footprint.len()];
        Vec3::new(
            c[0] + self.top_scale * (p[0] - c[0]) + self.lean[0],
            c[1] + self.top_scale * (p[1] - c[1]) + self.lean[1],
            self.height,
        )
    }

    pub fn vertices(&self) -> Vec<Vec3> {
        let n = self.footprint.len();
        (0..n)
            .map(|i| self.bottom_vertex(i))
            .chain((0..n).map(|i| self.top_vertex(i)))
            .collect()
    }

    /// Bounding half-spaces `n . x <= d` with outward normals.
    fn planes(&self) -> Vec<(Vec3, f64)> {
        let n = self.footprint.len();
        let c = self.centroid_2d();
        let interior = Vec3::new(
            c[0] + 0.5 * self.lean[0],
            c[1] + 0.5 * self.lean[1],
            0.5 * self.height,
        );
        let mut planes = vec![(Vec3::new(0.0, 0.0, -1.0), 0.0), (Vec3::z(), self.height)];
        for i in 0..n {
            let b0 = self.bottom_vertex(i);
            let b1 = self.bottom_vertex(i + 1);
            let t0 = self.top_vertex(i);
            let mut normal = (b1 - b0).cross(&(t0 - b0)).normalize();
            if normal.dot(&(interior - b0)) > 0.0 {
                normal = -normal;
            }
            planes.push((normal, normal.dot(&b0)));
        }
        planes
    }

    /// World position of keypoint anchor `slot`. Slots sit at the same
    /// relative place on every instance so that aliasing is geometric too.
    pub fn anchor(&self, slot: usize) -> Vec3 {
        let n = self.footprint.len();
        let face = slot % n;
        let k = slot as f64;
        let height_frac = 0.15 + 0.7 * (k * 0.618_033_988_75 + 0.31).fract();
        let along = 0.2 + 0.6 * (k * 0.381_966_011_25 + 0.5).fract();
        let bottom = self.bottom_vertex(face)
            + along * (self.bottom_vertex(face + 1) - self.bottom_vertex(face));
        let top =
            self.top_vertex(face) + along * (self.top_vertex(face + 1) - self.top_vertex(face));
        bottom + height_frac * (top - bottom)
    }
}

#[derive(Debug, Clone, Copy)]
struct Ray {
    origin: Vec3,
    dir: Vec3,
}

/// Convex solid prepared for ray casting.
#[derive(Debug, Clone)]
struct Solid {
    planes: Vec<(Vec3, f64)>,
    vertices: Vec<Vec3>,
}

impl Solid {
    fn new(inst: &Instance) -> Self {
        Solid {
            planes: inst.planes(),
            vertices: inst.vertices(),
        }
    }

    /// Smallest positive ray parameter at which the ray enters the solid.
    fn intersect(&self, ray: &Ray) -> Option<f64> {
        let mut t_enter = 0.0f64;
        let mut t_exit = f64::INFINITY;
        for (n, d) in &self.planes {
            let denom = n.dot(&ray.dir);
            let num = d - n.dot(&ray.origin);
            if denom.abs() < 1e-15 {
                if num < 0.0 {
                    return None;
                }
                continue;
            }
            let t = num / denom;
            if denom < 0.0 {
                t_enter = t_enter.max(t);
            } else {
                t_exit = t_exit.min(t);
            }
            if t_enter > t_exit {
                return None;
            }
        }
        (t_enter > 0.0 && t_enter <= t_exit).then_some(t_enter)
    }
}

/// Which persistent 3D point a keypoint observes. Two keypoints in different
/// frames are a correct match exactly when they share an anchor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Anchor {
    Instance { instance: InstanceId, slot: u32 },
    Background(u32),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseDescriptors {
    /// One unit vector per keypoint slot.
    pub trunk: Vec<Vec<f64>>,
    pub building: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub config: SceneConfig,
    pub intrinsics: CameraIntrinsics,
    pub instances: Vec<Instance>,
    /// Ground-truth world-to-camera poses, one per frame index.
    pub trajectory: Vec<PoseSE3>,
    pub base_descriptors: BaseDescriptors,
    /// Orthonormal basis of the appearance subspace.
    pub appearance_basis: Vec<Vec<f64>>,
    /// Unit offset vector per instance, indexed by instance id.
    pub instance_offsets: Vec<Vec<f64>>,
    #[serde(with = "vec3_list_serde")]
    pub background_anchors: Vec<Vec3>,
}

mod vec3_list_serde {
    use super::Vec3;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &[Vec3], s: S) -> Result<S::Ok, S::Error> {
        v.iter()
            .map(|p| [p.x, p.y, p.z])
            .collect::<Vec<_>>()
            .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Vec3>, D::Error> {
        let a = Vec::<[f64; 3]>::deserialize(d)?;
        Ok(a.into_iter().map(|p| Vec3::new(p[0], p[1], p[2])).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameObservation {
    pub frame_index: usize,
    pub keypoints: Vec<Keypoint>,
    pub masks: Vec<InstanceMask>,
    pub gt_instance_of_keypoint: Vec<Option<InstanceId>>,
    /// Camera-frame depth of the observed anchor, meters.
    pub gt_depth_of_keypoint: Vec<f64>,
    pub gt_anchor_of_keypoint: Vec<Anchor>,
    pub pose_gt: PoseSE3,
}

impl FrameObservation {
    pub fn mask_of(&self, id: InstanceId) -> Option<&InstanceMask> {
        self.masks.iter().find(|m| m.instance_id == id)
    }
}

/// Descriptor generator input: an instance slot or a background anchor.
#[derive(Debug, Clone, Copy)]
pub enum DescriptorSource {
    Instance { id: InstanceId, slot: usize },
    Background { anchor: u32 },
}

fn random_unit(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        if let Ok(u) = l2_normalize(&v) {
            return u;
        }
    }
}

/// `rank` orthonormal vectors in `dim` dimensions (Gram-Schmidt on Gaussians).
fn orthonormal_basis(rng: &mut impl Rng, dim: usize, rank: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(rank);
    while basis.len() < rank {
        let mut v = random_unit(rng, dim);
        for b in &basis {
            let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
        if let Ok(u) = l2_normalize(&v) {
            if crate::descriptor::norm(&v) > 1e-6 {
                basis.push(u);
            }
        }
    }
    basis
}

fn in_span(basis: &[Vec<f64>], coeffs: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; basis[0].len()];
    for (b, c) in basis.iter().zip(coeffs) {
        out.iter_mut().zip(b).for_each(|(o, x)| *o += c * x);
    }
    out
}

fn rect(x0: f64, y0: f64, x1: f64, y1: f64) -> Vec<[f64; 2]> {
    vec![[x0, y0], [x1, y0], [x1, y1], [x0, y1]]
}

pub fn generate_scene(config: &SceneConfig) -> Result<Scene> {
    config.validate()?;
    let intrinsics = config.intrinsics()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, task_id("scene")));

    let spacing = config.row_length / config.n_trunks_per_row as f64;
    let mut instances = Vec::new();
    for row in 0..config.n_rows {
        let y = row as f64 * config.row_spacing;
        for k in 0..config.n_trunks_per_row {
            let x = (k as f64 + 0.5) * spacing + rng.random_range(-0.05..0.05) * spacing;
            let width = rng.random_range(0.08..0.16);
            let depth = width * rng.random_range(0.8..1.25);
            let h = 0.5 * width;
            let d = 0.5 * depth;
            instances.push(Instance {
                id: instances.len() as InstanceId,
                class: SemanticClass::Trunk,
                footprint: rect(x - d, y - h, x + d, y + h),
                height: rng.random_range(0.8..1.3),
                top_scale: rng.random_range(0.5..1.0),
                lean: [rng.random_range(-0.12..0.12), rng.random_range(-0.12..0.12)],
            });
        }
    }

    let radius = config.turn_radius();
    let y_mid = (config.n_rows - 1) as f64 * config.row_spacing / 2.0;
    let far_x = config.row_length + TURN_MARGIN + radius + 2.5;
    let near_x = -(TURN_MARGIN + radius + 2.5);
    let per_end = [config.n_buildings.div_ceil(2), config.n_buildings / 2];
    for b in 0..config.n_buildings {
        let end = b % 2;
        let slot_at_end = b / 2;
        let width = rng.random_range(2.5..4.0);
        let depth = rng.random_range(1.5..2.5);
        let height = rng.random_range(2.0..3.0);
        let yc = y_mid + (slot_at_end as f64 - (per_end[end] as f64 - 1.0) / 2.0) * 5.0;
        let (x0, x1) = if end == 0 {
            (far_x, far_x + depth)
        } else {
            (near_x - depth, near_x)
        };
        instances.push(Instance {
            id: instances.len() as InstanceId,
            class: SemanticClass::Building,
            footprint: rect(x0, yc - width / 2.0, x1, yc + width / 2.0),
            height,
            top_scale: 1.0,
            lean: [0.0, 0.0],
        });
    }

    let dim = config.descriptor_dim;
    let slots = config.keypoints_per_instance;
    let base_descriptors = BaseDescriptors {
        trunk: (0..slots).map(|_| random_unit(&mut rng, dim)).collect(),
        building: (0..slots).map(|_| random_unit(&mut rng, dim)).collect(),
    };
    let appearance_basis = orthonormal_basis(&mut rng, dim, config.appearance_rank);
    let instance_offsets = (0..instances.len())
        .map(|_| {
            in_span(
                &appearance_basis,
                &random_unit(&mut rng, config.appearance_rank),
            )
        })
        .collect();

    let lane_low = -config.row_spacing / 2.0;
    let lane_high = (config.n_rows as f64 - 0.5) * config.row_spacing;
    let x_lo = near_x - 8.0;
    let x_hi = far_x + 8.0;
    let y_lo = lane_low - 4.0;
    let y_hi = lane_high + 4.0;
    let n_ground = ((x_hi - x_lo) * (y_hi - y_lo)).ceil() as usize;
    let mut background_anchors = Vec::with_capacity(n_ground);
    for _ in 0..n_ground {
        let x = rng.random_range(x_lo..x_hi);
        let y = rng.random_range(y_lo..y_hi);
        // Keep the driven lanes clear so nothing sits under the camera.
        if (y - lane_low).abs() < 0.4 || (y - lane_high).abs() < 0.4 {
            continue;
        }
        background_anchors.push(Vec3::new(x, y, 0.0));
    }
    // Canopy and wires above the trunks.
    for row in 0..config.n_rows {
        let y = row as f64 * config.row_spacing;
        for _ in 0..(4.0 * config.row_length).ceil() as usize {
            background_anchors.push(Vec3::new(
                rng.random_range(0.0..config.row_length),
                y + rng.random_range(-0.3..0.3),
                rng.random_range(1.35..1.9),
            ));
        }
    }
    // Hedges and shrubs along the field boundary.
    let perimeter = 2.0 * ((x_hi - x_lo) + (y_hi - y_lo));
    for _ in 0..(2.0 * perimeter).ceil() as usize {
        let (w, h) = (x_hi - x_lo, y_hi - y_lo);
        let s = rng.random_range(0.0..perimeter);
        let (x, y) = if s < w {
            (x_lo + s, y_lo)
        } else if s < w + h {
            (x_hi, y_lo + s - w)
        } else if s < 2.0 * w + h {
            (x_hi - (s - w - h), y_hi)
        } else {
            (x_lo, y_hi - (s - 2.0 * w - h))
        };
        background_anchors.push(Vec3::new(x, y, rng.random_range(0.2..2.5)));
    }
    // Per-frame selection takes anchors in list order.
    background_anchors.shuffle(&mut rng);

    let trajectory = generate_trajectory(config, &mut rng);

    Ok(Scene {
        config: config.clone(),
        intrinsics,
        instances,
        trajectory,
        base_descriptors,
        appearance_basis,
        instance_offsets,
        background_anchors,
    })
}

/// Point on the nominal loop at arc length `s`: position (x, y) and heading.
fn loop_point(config: &SceneConfig, s: f64) -> (f64, f64, f64) {
    let straight = config.row_length + 2.0 * TURN_MARGIN;
    let radius = config.turn_radius();
    let arc = PI * radius;
    let lane_low = -config.row_spacing / 2.0;
    let lane_high = (config.n_rows as f64 - 0.5) * config.row_spacing;
    let yc = (lane_low + lane_high) / 2.0;
    let x_start = -TURN_MARGIN;
    let x_end = config.row_length + TURN_MARGIN;
    let s = s.rem_euclid(config.loop_length());
    if s < straight {
        (x_start + s, lane_low, 0.0)
    } else if s < straight + arc {
        let theta = -PI / 2.0 + (s - straight) / radius;
        (
            x_end + radius * theta.cos(),
            yc + radius * theta.sin(),
            theta + PI / 2.0,
        )
    } else if s < 2.0 * straight + arc {
        (x_end - (s - straight - arc), lane_high, PI)
    } else {
        let theta = PI / 2.0 + (s - 2.0 * straight - arc) / radius;
        (
            x_start + radius * theta.cos(),
            yc + radius * theta.sin(),
            theta + PI / 2.0,
        )
    }
}

fn generate_trajectory(config: &SceneConfig, rng: &mut impl Rng) -> Vec<PoseSE3> {
    let total = config.loop_length();
    let n_frames = ((total / config.frame_step).floor() as usize).max(2);
    // Sway wavelength chosen to close exactly over the loop.
    let wavelength = total / (total / 3.7).round().max(1.0);
    let phase = rng.random_range(0.0..2.0 * PI);
    let yaw_phase = rng.random_range(0.0..2.0 * PI);
    let k = 2.0 * PI / wavelength;
    (0..n_frames)
        .map(|i| {
            let s = i as f64 * config.frame_step;
            let (x, y, heading) = loop_point(config, s);
            let sway = config.path_wobble * (k * s + phase).sin();
            let sway_slope = config.path_wobble * k * (k * s + phase).cos();
            let left = Vec3::new(-heading.sin(), heading.cos(), 0.0);
            let yaw_ripple = 0.3 * config.path_wobble * (2.3 * k * s + yaw_phase).sin();
            let psi = heading + sway_slope.atan() + yaw_ripple;
            let center = Vec3::new(x, y, config.camera_height) + sway * left;
            camera_pose(center, psi)
        })
        .collect()
}

/// World-to-camera pose of a level camera at `center` looking along heading `psi`.
fn camera_pose(center: Vec3, psi: f64) -> PoseSE3 {
    let right = Vec3::new(psi.sin(), -psi.cos(), 0.0);
    let down = Vec3::new(0.0, 0.0, -1.0);
    let forward = Vec3::new(psi.cos(), psi.sin(), 0.0);
    let cam_to_world =
        RotationMatrix::from_matrix(nalgebra::Matrix3::from_columns(&[right, down, forward]))
            .expect("orthonormal by construction");
    PoseSE3::from_camera_center(cam_to_world, center)
}

/// Camera-frame ray through a (sub-)pixel position, expressed in world
/// coordinates, with direction scaled so the ray parameter equals camera depth.
fn pixel_ray(intr: &CameraIntrinsics, cam_to_world: &PoseSE3, px: f64, py: f64) -> Ray {
    let n = intr.normalize(&Vec2::new(px, py));
    Ray {
        origin: cam_to_world.translation,
        dir: cam_to_world.rotation * Vec3::new(n.x, n.y, 1.0),
    }
}

struct RenderBuffers {
    /// Index into `scene.instances` of the nearest surface per pixel.
    labels: Vec<Option<u32>>,
    depth: DepthMap,
}

impl Scene {
    pub fn n_frames(&self) -> usize {
        self.trajectory.len()
    }

    pub fn instance(&self, id: InstanceId) -> Option<&Instance> {
        self.instances.get(id as usize).filter(|i| i.id == id)
    }

    /// Unit descriptor `normalize(base + alpha * offset + noise)` where the
    /// noise is Gaussian within the appearance subspace with expected squared
    /// norm `noise_sigma^2`.
    pub fn synth_descriptor(
        &self,
        source: DescriptorSource,
        config: &SceneConfig,
        rng: &mut impl Rng,
    ) -> Result<Descriptor> {
        let mut v = match source {
            DescriptorSource::Instance { id, slot } => {
                let inst = self.instance(id).ok_or_else(|| {
                    Error::validation("instance_id", format!("unknown instance {id}"))
                })?;
                let bases = match inst.class {
                    SemanticClass::Trunk => &self.base_descriptors.trunk,
                    SemanticClass::Building => &self.base_descriptors.building,
                    SemanticClass::Background => {
                        return Err(Error::validation("class", "instances cannot be background"))
                    }
                };
                let base = &bases[slot % bases.len()];
                let offset = &self.instance_offsets[id as usize];
                base.iter()
                    .zip(offset)
                    .map(|(b, o)| b + config.aliasing_alpha * o)
                    .collect::<Vec<f64>>()
            }
            DescriptorSource::Background { anchor } => self.background_base(anchor),
        };
        let rank = self.appearance_basis.len();
        let scale = config.noise_sigma / (rank as f64).sqrt();
        if scale > 0.0 {
            let g: Vec<f64> = (0..rank)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(rng);
                    scale * z
                })
                .collect();
            let noise = in_span(&self.appearance_basis, &g);
            v.iter_mut().zip(&noise).for_each(|(x, n)| *x += n);
        }
        Ok(Descriptor(l2_normalize(&v)?))
    }

    /// Per-anchor unique base, derived from the seed rather than stored.
    pub fn background_base(&self, anchor: u32) -> Vec<f64> {
        let seed = derive_seed(
            derive_seed(self.config.seed, task_id("background")),
            u64::from(anchor),
        );
        random_unit(
            &mut ChaCha8Rng::seed_from_u64(seed),
            self.config.descriptor_dim,
        )
    }

    fn render_buffers(&self, solids: &[Solid], frame_index: usize) -> RenderBuffers {
        let intr = &self.intrinsics;
        let (w, h) = (intr.width as usize, intr.height as usize);
        let pose = &self.trajectory[frame_index];
        let cam_to_world = pose.inverse();
        let mut labels = vec![None; w * h];
        let mut depth = DepthMap::new(w, h);
        for (idx, solid) in solids.iter().enumerate() {
            let Some((x0, y0, x1, y1)) = screen_bounds(intr, pose, &solid.vertices) else {
                continue;
            };
            for y in y0..y1 {
                for x in x0..x1 {
                    let ray = pixel_ray(intr, &cam_to_world, x as f64 + 0.5, y as f64 + 0.5);
                    if let Some(t) = solid.intersect(&ray) {
                        if t < depth.get(x, y) {
                            depth.set(x, y, t);
                            labels[y * w + x] = Some(idx as u32);
                        }
                    }
                }
            }
        }
        RenderBuffers { labels, depth }
    }

    fn first_hit(&self, solids: &[Solid], ray: &Ray) -> Option<(usize, f64)> {
        solids
            .iter()
            .enumerate()
            .filter_map(|(i, s)| s.intersect(ray).map(|t| (i, t)))
            .min_by(|a, b| a.1.total_cmp(&b.1))
    }

    /// Exact per-pixel depth of the instance surfaces seen in `frame_index`.
    pub fn render_depth(&self, frame_index: usize) -> Result<DepthMap> {
        self.check_frame(frame_index)?;
        let solids: Vec<Solid> = self.instances.iter().map(Solid::new).collect();
        Ok(self.render_buffers(&solids, frame_index).depth)
    }

    fn check_frame(&self, frame_index: usize) -> Result<()> {
        if frame_index >= self.trajectory.len() {
            return Err(Error::validation(
                "frame_index",
                format!(
                    "{frame_index} outside trajectory of {} frames",
                    self.trajectory.len()
                ),
            ));
        }
        Ok(())
    }
}

/// Clamped pixel rectangle covering the projection of `vertices`, or `None`
/// when the solid is entirely behind the camera or off-screen.
fn screen_bounds(
    intr: &CameraIntrinsics,
    pose: &PoseSE3,
    vertices: &[Vec3],
) -> Option<(usize, usize, usize, usize)> {
    let (w, h) = (f64::from(intr.width), f64::from(intr.height));
    let mut lo = Vec2::new(f64::INFINITY, f64::INFINITY);
    let mut hi = Vec2::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
    let mut any_front = false;
    let mut any_near = false;
    for v in vertices {
        let pc = pose.transform(v);
        if pc.z <= 1e-3 {
            any_near = true;
            continue;
        }
        any_front = true;
        if let Projection::InFront { pixel, .. } = project_camera_point(intr, &pc) {
            lo = lo.inf(&pixel);
            hi = hi.sup(&pixel);
        }
    }
    if !any_front {
        return None;
    }
    if any_near {
        // Straddles the image plane: fall back to the whole image.
        return Some((0, 0, intr.width as usize, intr.height as usize));
    }
    let x0 = (lo.x - 1.0).floor().max(0.0);
    let y0 = (lo.y - 1.0).floor().max(0.0);
    let x1 = (hi.x + 1.0).ceil().min(w);
    let y1 = (hi.y + 1.0).ceil().min(h);
    if x0 >= x1 || y0 >= y1 {
        return None;
    }
    Some((x0 as usize, y0 as usize, x1 as usize, y1 as usize))
}

/// Renders one frame: instance masks, instance keypoints at visible anchors,
/// and background keypoints, with the ground-truth maps filled.
///
/// `config` is the observation condition (aliasing, noise, visibility,
/// background budget); geometry comes from the scene.
pub fn render_frame(
    scene: &Scene,
    frame_index: usize,
    config: &SceneConfig,
) -> Result<FrameObservation> {
    render_frame_with_depth(scene, frame_index, config).map(|(obs, _)| obs)
}

pub fn render_frame_with_depth(
    scene: &Scene,
    frame_index: usize,
    config: &SceneConfig,
) -> Result<(FrameObservation, DepthMap)> {
    scene.check_frame(frame_index)?;
    config.validate()?;
    Error::check_dim(scene.config.descriptor_dim, config.descriptor_dim)?;
    let intr = &scene.intrinsics;
    let (w, h) = (intr.width as usize, intr.height as usize);
    let pose = scene.trajectory[frame_index];
    let cam_to_world = pose.inverse();
    let solids: Vec<Solid> = scene.instances.iter().map(Solid::new).collect();
    let RenderBuffers { labels, depth } = scene.render_buffers(&solids, frame_index);

    let mut masks = Vec::new();
    for (idx, inst) in scene.instances.iter().enumerate() {
        let bits: Vec<bool> = labels.iter().map(|l| *l == Some(idx as u32)).collect();
        if bits.iter().any(|&b| b) {
            masks.push(InstanceMask {
                instance_id: inst.id,
                class: inst.class,
                bitmap: Bitmap::from_bits(w, h, bits)?,
            });
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
        derive_seed(config.seed, task_id("frame")),
        frame_index as u64,
    ));
    let mut obs = FrameObservation {
        frame_index,
        keypoints: Vec::new(),
        masks,
        gt_instance_of_keypoint: Vec::new(),
        gt_depth_of_keypoint: Vec::new(),
        gt_anchor_of_keypoint: Vec::new(),
        pose_gt: pose,
    };

    let label_at = |p: &Vec2| -> Option<Option<u32>> {
        if !intr.contains(p) {
            return None;
        }
        Some(labels[(p.y.floor() as usize) * w + p.x.floor() as usize])
    };

    let jitter = |rng: &mut ChaCha8Rng, p: Vec2| -> Vec2 {
        if config.pixel_noise > 0.0 {
            let dx: f64 = StandardNormal.sample(rng);
            let dy: f64 = StandardNormal.sample(rng);
            p + config.pixel_noise * Vec2::new(dx, dy)
        } else {
            p
        }
    };

    for (idx, inst) in scene.instances.iter().enumerate() {
        if obs.mask_of(inst.id).is_none() {
            continue;
        }
        for slot in 0..scene.config.keypoints_per_instance {
            let anchor = inst.anchor(slot);
            let Projection::InFront { pixel, depth: z } =
                project_camera_point(intr, &pose.transform(&anchor))
            else {
                continue;
            };
            if label_at(&pixel) != Some(Some(idx as u32)) {
                continue;
            }
            let ray = pixel_ray(intr, &cam_to_world, pixel.x, pixel.y);
            match scene.first_hit(&solids, &ray) {
                Some((hit, t)) if hit == idx && (t - z).abs() <= 1e-7 * z.max(1.0) => {}
                _ => continue,
            }
            let keep: f64 = rng.random();
            let observed = jitter(&mut rng, pixel);
            if keep >= config.visibility_fraction || label_at(&observed) != Some(Some(idx as u32)) {
                continue;
            }
            let descriptor = scene.synth_descriptor(
                DescriptorSource::Instance { id: inst.id, slot },
                config,
                &mut rng,
            )?;
            obs.keypoints.push(Keypoint::new(observed, descriptor));
            obs.gt_instance_of_keypoint.push(Some(inst.id));
            obs.gt_depth_of_keypoint.push(z);
            obs.gt_anchor_of_keypoint.push(Anchor::Instance {
                instance: inst.id,
                slot: slot as u32,
            });
        }
    }

    let mut n_background = 0;
    for (i, point) in scene.background_anchors.iter().enumerate() {
        if n_background >= config.background_keypoints {
            break;
        }
        let Projection::InFront { pixel, depth: z } =
            project_camera_point(intr, &pose.transform(point))
        else {
            continue;
        };
        if z < 0.5 || label_at(&pixel) != Some(None) {
            continue;
        }
        let ray = pixel_ray(intr, &cam_to_world, pixel.x, pixel.y);
        if matches!(scene.first_hit(&solids, &ray), Some((_, t)) if t < z) {
            continue;
        }
        let observed = jitter(&mut rng, pixel);
        if label_at(&observed) != Some(None) {
            continue;
        }
        let descriptor = scene.synth_descriptor(
            DescriptorSource::Background { anchor: i as u32 },
            config,
            &mut rng,
        )?;
        obs.keypoints.push(Keypoint::new(observed, descriptor));
        obs.gt_instance_of_keypoint.push(None);
        obs.gt_depth_of_keypoint.push(z);
        obs.gt_anchor_of_keypoint.push(Anchor::Background(i as u32));
        n_background += 1;
    }

    Ok((obs, depth))
}
