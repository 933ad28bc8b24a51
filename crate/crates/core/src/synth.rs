//! Analytic test scenes and exact ground truth: sphere-traced depth, flow,
//! stereo disparity, flat-albedo images, surface samples and pose noise.

use std::collections::HashSet;

use nalgebra::UnitQuaternion;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    cast_ray, project, Aabb, CameraIntrinsics, Frame, Mat3, Ray, SE3Pose, Vec2, Vec3,
};
use crate::io::{Dataset, Image, PixelMap};

/// Convergence threshold of the sphere tracer.
pub const HIT_EPS: f64 = 1e-9;
const MAX_STEPS: usize = 20_000;
/// Depth agreement required for a reprojected point to count as visible.
pub const OCCLUSION_TOL: f64 = 1e-3;
pub const SKY: [f32; 3] = [0.6, 0.7, 0.9];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Shape {
    /// `{x : normal · x = offset}`, positive on the normal side.
    Plane { normal: [f64; 3], offset: f64 },
    Sphere { center: [f64; 3], radius: f64 },
    /// Axis-aligned box.
    Box { center: [f64; 3], half_extents: [f64; 3] },
}

impl Shape {
    pub fn sdf(&self, p: &Vec3) -> f64 {
        match *self {
            Shape::Plane { normal, offset } => {
                let n = Vec3::from(normal);
                (n.dot(p) - offset) / n.norm()
            }
            Shape::Sphere { center, radius } => (p - Vec3::from(center)).norm() - radius,
            Shape::Box {
                center,
                half_extents,
            } => {
                let q = (p - Vec3::from(center)).abs() - Vec3::from(half_extents);
                q.map(|v| v.max(0.0)).norm() + q.max().min(0.0)
            }
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            Shape::Plane { normal, offset } => {
                Vec3::from(normal).norm() > 0.0 && offset.is_finite()
            }
            Shape::Sphere { radius, .. } => radius > 0.0,
            Shape::Box { half_extents, .. } => half_extents.iter().all(|&h| h > 0.0),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("degenerate primitive {self:?}")))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    #[serde(flatten)]
    pub shape: Shape,
    #[serde(default = "default_albedo")]
    pub albedo: [f64; 3],
}

fn default_albedo() -> [f64; 3] {
    [0.5, 0.5, 0.5]
}

/// Union of primitives.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub primitives: Vec<Primitive>,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.primitives.is_empty() {
            return Err(Error::InvalidConfig("scene has no primitives".into()));
        }
        self.primitives.iter().try_for_each(|p| p.shape.validate())
    }

    /// Signed distance and the index of the closest primitive.
    pub fn sdf(&self, p: &Vec3) -> (f64, usize) {
        let mut best = (f64::INFINITY, 0);
        for (i, prim) in self.primitives.iter().enumerate() {
            let d = prim.shape.sdf(p);
            if d < best.0 {
                best = (d, i);
            }
        }
        best
    }

    pub fn distance(&self, p: &Vec3) -> f64 {
        self.sdf(p).0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub depth: f64,
    pub point: Vec3,
    pub primitive: usize,
}

/// Sphere tracing from the ray origin; `None` when nothing is hit before
/// `max_t`.
pub fn cast_scene(scene: &SceneSpec, ray: &Ray, max_t: f64) -> Option<Hit> {
    let mut t = 0.0;
    for _ in 0..MAX_STEPS {
        let p = ray.at(t);
        let (d, prim) = scene.sdf(&p);
        if d.abs() < HIT_EPS {
            return Some(Hit {
                depth: t,
                point: p,
                primitive: prim,
            });
        }
        t += d;
        if t > max_t || t < 0.0 {
            return None;
        }
    }
    None
}

/// Forward-moving camera path with optional stereo baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySpec {
    pub frames: usize,
    /// position step between frames (meters)
    pub step: f64,
    /// heading change per frame (rad)
    pub yaw_step: f64,
    pub camera_height: f64,
    /// downward tilt of the optical axis (degrees)
    pub pitch_deg: f64,
    pub start: [f64; 2],
    pub intrinsics: CameraIntrinsics,
}

impl TrajectorySpec {
    pub fn validate(&self) -> Result<()> {
        self.intrinsics.validate()?;
        if self.frames < 2 || !(self.step > 0.0) {
            return Err(Error::InvalidConfig(
                "trajectory needs ≥ 2 frames and a positive step".into(),
            ));
        }
        Ok(())
    }

    /// Frames along the path. The camera looks along the heading, tilted
    /// down by `pitch_deg`, with image x pointing to the right of travel.
    pub fn frames(&self) -> Vec<Frame> {
        let phi = self.pitch_deg.to_radians();
        let base = Mat3::from_columns(&[
            Vec3::new(0.0, -1.0, 0.0),
            Vec3::new(-phi.sin(), 0.0, -phi.cos()),
            Vec3::new(phi.cos(), 0.0, -phi.sin()),
        ]);
        let mut pos = Vec3::new(self.start[0], self.start[1], self.camera_height);
        let mut out = Vec::with_capacity(self.frames);
        for i in 0..self.frames {
            let yaw = i as f64 * self.yaw_step;
            let rz = UnitQuaternion::from_axis_angle(&Vec3::z_axis(), yaw);
            let r = rz.to_rotation_matrix().into_inner() * base;
            out.push(Frame::new(i, self.intrinsics, SE3Pose::from_rotation_matrix(&r, pos)));
            pos += self.step * Vec3::new(yaw.cos(), yaw.sin(), 0.0);
        }
        out
    }
}

/// A complete synthetic setup: scene, cameras and reconstruction volume.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub scene: SceneSpec,
    pub trajectory: TrajectorySpec,
    pub close_box: Aabb,
    pub octree_depth: u32,
    pub shell_count: usize,
    pub r_max: f64,
}

impl SceneConfig {
    pub const PRESETS: [&'static str; 2] = ["default", "plane"];

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.trajectory.validate()
    }

    /// Ground plane, three boxes and a sphere seen by 12 frames of 96×64
    /// pixels stepping 0.3 m forward.
    pub fn default_preset() -> Self {
        let intrinsics = CameraIntrinsics::new(80.0, 80.0, 48.0, 32.0, 96, 64, Some(0.3))
            .expect("preset intrinsics are valid");
        let prim = |shape, albedo| Primitive { shape, albedo };
        Self {
            scene: SceneSpec {
                primitives: vec![
                    prim(
                        Shape::Plane {
                            normal: [0.0, 0.0, 1.0],
                            offset: 0.0,
                        },
                        [0.45, 0.45, 0.42],
                    ),
                    prim(
                        Shape::Box {
                            center: [3.0, 0.8, 0.3],
                            half_extents: [0.3, 0.3, 0.3],
                        },
                        [0.8, 0.3, 0.2],
                    ),
                    prim(
                        Shape::Box {
                            center: [4.0, -0.9, 0.25],
                            half_extents: [0.35, 0.25, 0.25],
                        },
                        [0.2, 0.6, 0.3],
                    ),
                    prim(
                        Shape::Box {
                            center: [5.5, 0.3, 0.4],
                            half_extents: [0.4, 0.4, 0.4],
                        },
                        [0.3, 0.3, 0.8],
                    ),
                    prim(
                        Shape::Sphere {
                            center: [4.8, -0.2, 0.35],
                            radius: 0.35,
                        },
                        [0.9, 0.8, 0.2],
                    ),
                ],
            },
            trajectory: TrajectorySpec {
                frames: 12,
                step: 0.3,
                yaw_step: 0.01,
                camera_height: 1.0,
                pitch_deg: 35.0,
                start: [0.0, 0.0],
                intrinsics,
            },
            close_box: Aabb::new(Vec3::new(-1.0, -4.0, -0.5), Vec3::new(9.0, 4.0, 2.5))
                .expect("preset box is valid"),
            octree_depth: 6,
            shell_count: 32,
            r_max: 1000.0,
        }
    }

    /// The default trajectory over a bare ground plane.
    pub fn plane_preset() -> Self {
        let mut c = Self::default_preset();
        c.scene.primitives.truncate(1);
        c
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "default" => Some(Self::default_preset()),
            "plane" => Some(Self::plane_preset()),
            _ => None,
        }
    }

    pub fn frames(&self) -> Vec<Frame> {
        self.trajectory.frames()
    }

    /// Furthest distance any camera ray needs to be traced.
    pub fn max_t(&self) -> f64 {
        let e = self.close_box.extent().norm();
        let far = self
            .frames()
            .iter()
            .map(|f| (f.center() - self.close_box.center()).norm())
            .fold(0.0, f64::max);
        2.0 * (e + far)
    }
}

fn pixel_ray(frame: &Frame, col: usize, row: usize) -> Ray {
    cast_ray(frame, &CameraIntrinsics::pixel_center(col, row)).expect("pixel centers are in bounds")
}

fn strictly_inside(k: &CameraIntrinsics, p: &Vec2) -> bool {
    p.x >= 0.0 && p.y >= 0.0 && p.x < k.width as f64 && p.y < k.height as f64
}

/// First visible hit of every pixel center; hits outside `clip` are dropped.
pub fn first_hits(scene: &SceneSpec, frame: &Frame, clip: Option<&Aabb>, max_t: f64) -> Vec<Option<Hit>> {
    let k = frame.intrinsics;
    let mut out = Vec::with_capacity(k.width * k.height);
    for row in 0..k.height {
        for col in 0..k.width {
            let hit = cast_scene(scene, &pixel_ray(frame, col, row), max_t)
                .filter(|h| clip.map_or(true, |b| b.contains(&h.point)));
            out.push(hit);
        }
    }
    out
}

/// True when `p` is the first surface seen from `frame` along its ray.
pub fn is_visible(scene: &SceneSpec, frame: &Frame, p: &Vec3, max_t: f64) -> bool {
    let c = frame.center();
    let dist = (p - c).norm();
    let ray = Ray {
        origin: c,
        direction: (p - c) / dist,
        source_frame: frame.id,
        pixel: Vec2::zeros(),
    };
    match cast_scene(scene, &ray, max_t) {
        Some(h) => (h.depth - dist).abs() < OCCLUSION_TOL,
        None => false,
    }
}

/// Exact flow from `frame_j` to `frame_k`: valid where the surface is hit
/// (inside `clip` when given), reprojects inside the target image and is not
/// occluded there.
pub fn gt_flow(
    scene: &SceneSpec,
    frame_j: &Frame,
    frame_k: &Frame,
    clip: Option<&Aabb>,
    max_t: f64,
) -> PixelMap {
    let kj = frame_j.intrinsics;
    let mut map = PixelMap::new(kj.width, kj.height, 2);
    let hits = first_hits(scene, frame_j, clip, max_t);
    for row in 0..kj.height {
        for col in 0..kj.width {
            let Some(hit) = hits[row * kj.width + col] else {
                continue;
            };
            let Ok(q) = project(&hit.point, frame_k) else {
                continue;
            };
            if !strictly_inside(&frame_k.intrinsics, &q) {
                continue;
            }
            if !is_visible(scene, frame_k, &hit.point, max_t) {
                continue;
            }
            let p = CameraIntrinsics::pixel_center(col, row);
            map.set(col, row, &[(q.x - p.x) as f32, (q.y - p.y) as f32]);
        }
    }
    map
}

/// Stereo disparity `fx·b/z` with `z` the camera-axis depth.
pub fn gt_disparity(scene: &SceneSpec, frame: &Frame, clip: Option<&Aabb>, max_t: f64) -> Result<PixelMap> {
    let k = frame.intrinsics;
    let b = k.baseline.ok_or(Error::MissingBaseline)?;
    let axis = frame.principal_axis();
    let mut map = PixelMap::new(k.width, k.height, 1);
    for (i, hit) in first_hits(scene, frame, clip, max_t).into_iter().enumerate() {
        if let Some(h) = hit {
            let z = (h.point - frame.center()).dot(&axis);
            map.set(i % k.width, i / k.width, &[(k.fx * b / z) as f32]);
        }
    }
    Ok(map)
}

/// Ray-distance depth of the first hit per pixel.
pub fn gt_depth(scene: &SceneSpec, frame: &Frame, clip: Option<&Aabb>, max_t: f64) -> PixelMap {
    let k = frame.intrinsics;
    let mut map = PixelMap::new(k.width, k.height, 1);
    for (i, hit) in first_hits(scene, frame, clip, max_t).into_iter().enumerate() {
        if let Some(h) = hit {
            map.set(i % k.width, i / k.width, &[h.depth as f32]);
        }
    }
    map
}

/// Flat-albedo render scaled by `gain`; misses show a constant sky.
pub fn render_albedo(scene: &SceneSpec, frame: &Frame, gain: f64, max_t: f64) -> Image {
    let k = frame.intrinsics;
    let mut im = Image::new(k.width, k.height);
    for (i, hit) in first_hits(scene, frame, None, max_t).into_iter().enumerate() {
        let c = match hit {
            Some(h) => scene.primitives[h.primitive]
                .albedo
                .map(|a| (a * gain).clamp(0.0, 1.0) as f32),
            None => SKY,
        };
        im.set(i % k.width, i / k.width, c);
    }
    im
}

/// Per-frame exposure gain used for the biased renders.
pub fn exposure_bias(frame_id: usize) -> f64 {
    if frame_id % 2 == 0 {
        1.25
    } else {
        0.75
    }
}

/// Surface points visible from at least one frame, from `per_axis²` jittered
/// rays per pixel, thinned to at most one point per `spacing`-sized voxel.
pub fn surface_samples(
    scene: &SceneSpec,
    frames: &[Frame],
    clip: &Aabb,
    per_axis: usize,
    spacing: f64,
    seed: u64,
) -> Vec<Vec3> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    let max_t = 2.0 * clip.extent().norm()
        + frames
            .iter()
            .map(|f| (f.center() - clip.center()).norm())
            .fold(0.0, f64::max);
    for frame in frames {
        let k = frame.intrinsics;
        for row in 0..k.height {
            for col in 0..k.width {
                for a in 0..per_axis {
                    for b in 0..per_axis {
                        let u = col as f64 + (a as f64 + rng.random::<f64>()) / per_axis as f64;
                        let v = row as f64 + (b as f64 + rng.random::<f64>()) / per_axis as f64;
                        let Ok(ray) = cast_ray(frame, &Vec2::new(u, v)) else {
                            continue;
                        };
                        let Some(h) = cast_scene(scene, &ray, max_t) else {
                            continue;
                        };
                        if !clip.contains(&h.point) {
                            continue;
                        }
                        let key = (h.point / spacing).map(|x| x.floor() as i64);
                        if seen.insert((key.x, key.y, key.z)) {
                            out.push(h.point);
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adds i.i.d. Gaussian noise to every pose except frame 0: the center moves
/// by `N(0, σ_trans²)` per axis and the rotation is premultiplied by
/// `exp(ω)` with `ω ~ N(0, σ_rot²)` per axis. Returns `(noisy, ground truth)`.
pub fn perturb_poses(frames: &[Frame], sigma_trans: f64, sigma_rot: f64, seed: u64) -> Result<(Vec<Frame>, Vec<Frame>)> {
    if !(sigma_trans >= 0.0 && sigma_rot >= 0.0) {
        return Err(Error::InvalidConfig("noise levels must be non-negative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0, 1.0).unwrap();
    let mut noisy = frames.to_vec();
    for f in noisy.iter_mut().skip(1) {
        let w = Vec3::from_fn(|_, _| sigma_rot * unit.sample(&mut rng));
        let t = Vec3::from_fn(|_, _| sigma_trans * unit.sample(&mut rng));
        let pose = f.effective_pose();
        let rotation = UnitQuaternion::from_scaled_axis(w) * pose.rotation;
        f.pose = SE3Pose::new(rotation, pose.translation + t);
        f.pose_delta = [0.0; 6];
    }
    Ok((noisy, frames.to_vec()))
}

/// What [`synthesize`] writes besides flow and disparity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthOptions {
    /// Pose noise standard deviations (meters, radians).
    pub sigma_trans: f64,
    pub sigma_rot: f64,
    pub seed: u64,
    /// Also write `k → j` flow for every consecutive pair.
    pub bidirectional: bool,
    pub images: bool,
    /// Scale each image by the per-frame [`exposure_bias`].
    pub exposure_bias: bool,
    pub samples_per_axis: usize,
    pub sample_spacing: f64,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            sigma_trans: 0.0,
            sigma_rot: 0.0,
            seed: 0,
            bidirectional: false,
            images: true,
            exposure_bias: false,
            samples_per_axis: 3,
            sample_spacing: 0.02,
        }
    }
}

/// Ground truth for consecutive frame pairs, clipped to the close box, with
/// the (optionally perturbed) poses as the initial estimate.
pub fn synthesize(config: &SceneConfig, opts: &SynthOptions) -> Result<Dataset> {
    config.validate()?;
    let frames = config.frames();
    let (noisy, gt) = perturb_poses(&frames, opts.sigma_trans, opts.sigma_rot, opts.seed)?;
    let clip = Some(&config.close_box);
    let max_t = config.max_t();
    let mut flows = Vec::new();
    for w in gt.windows(2) {
        flows.push(((w[0].id, w[1].id), gt_flow(&config.scene, &w[0], &w[1], clip, max_t)));
        if opts.bidirectional {
            flows.push(((w[1].id, w[0].id), gt_flow(&config.scene, &w[1], &w[0], clip, max_t)));
        }
    }
    let disparities = if config.trajectory.intrinsics.baseline.is_some() {
        gt.iter()
            .map(|f| Ok((f.id, gt_disparity(&config.scene, f, clip, max_t)?)))
            .collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };
    let images = if opts.images {
        gt.iter()
            .map(|f| {
                let gain = if opts.exposure_bias { exposure_bias(f.id) } else { 1.0 };
                (f.id, render_albedo(&config.scene, f, gain, max_t))
            })
            .collect()
    } else {
        Vec::new()
    };
    let gt_samples = (opts.samples_per_axis > 0).then(|| {
        surface_samples(
            &config.scene,
            &gt,
            &config.close_box,
            opts.samples_per_axis,
            opts.sample_spacing,
            opts.seed,
        )
    });
    let traj = |fs: &[Frame]| fs.iter().map(|f| (f.id, f.effective_pose())).collect::<Vec<_>>();
    Ok(Dataset {
        config: config.clone(),
        poses: traj(&noisy),
        poses_gt: Some(traj(&gt)),
        flows,
        disparities,
        images,
        gt_samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::SE3Pose;

    fn down_ray(origin: Vec3, dir: Vec3) -> Ray {
        Ray {
            origin,
            direction: dir.normalize(),
            source_frame: 0,
            pixel: Vec2::zeros(),
        }
    }

    fn ground() -> SceneSpec {
        SceneSpec {
            primitives: vec![Primitive {
                shape: Shape::Plane {
                    normal: [0.0, 0.0, 1.0],
                    offset: 0.0,
                },
                albedo: default_albedo(),
            }],
        }
    }

    fn sphere() -> SceneSpec {
        SceneSpec {
            primitives: vec![Primitive {
                shape: Shape::Sphere {
                    center: [0.0; 3],
                    radius: 1.0,
                },
                albedo: default_albedo(),
            }],
        }
    }

    #[test]
    fn plane_hits_and_misses() {
        let h = cast_scene(&ground(), &down_ray(Vec3::new(0.0, 0.0, 5.0), -Vec3::z()), 100.0).unwrap();
        assert!((h.depth - 5.0).abs() < 1e-9);
        assert!(cast_scene(&ground(), &down_ray(Vec3::new(0.0, 0.0, 1.0), Vec3::x()), 100.0).is_none());
    }

    #[test]
    fn oblique_sphere_matches_quadratic_root() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let o = Vec3::new(-4.0, rng.random_range(-0.6..0.6), rng.random_range(-0.6..0.6));
            let target = Vec3::new(0.0, rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5));
            let ray = down_ray(o, target - o);
            let b = ray.origin.dot(&ray.direction);
            let c = ray.origin.norm_squared() - 1.0;
            let t = -b - (b * b - c).sqrt();
            let h = cast_scene(&sphere(), &ray, 100.0).unwrap();
            assert!((h.depth - t).abs() < 1e-5, "{} vs {t}", h.depth);
        }
    }

    #[test]
    fn union_depth_is_min_of_closed_forms() {
        let cfg = SceneConfig::default_preset();
        let frames = cfg.frames();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..300 {
            let f = &frames[rng.random_range(0..frames.len())];
            let px = Vec2::new(rng.random_range(0.0..96.0), rng.random_range(0.0..64.0));
            let ray = cast_ray(f, &px).unwrap();
            let plane_t = -ray.origin.z / ray.direction.z;
            let oc = ray.origin - Vec3::new(4.8, -0.2, 0.35);
            let b = oc.dot(&ray.direction);
            let disc = b * b - (oc.norm_squared() - 0.35 * 0.35);
            let sphere_t = if disc >= 0.0 { -b - disc.sqrt() } else { f64::INFINITY };
            let h = cast_scene(&cfg.scene, &ray, 100.0).unwrap();
            if h.primitive == 0 || h.primitive == 4 {
                assert!((h.depth - plane_t.min(sphere_t)).abs() < 1e-5);
            } else {
                assert!(h.depth <= plane_t.min(sphere_t) + 1e-9);
            }
        }
    }

    #[test]
    fn box_sdf_is_exact_outside() {
        let s = Shape::Box {
            center: [1.0, 0.0, 0.0],
            half_extents: [0.5, 0.5, 0.5],
        };
        assert!((s.sdf(&Vec3::new(3.0, 0.0, 0.0)) - 1.5).abs() < 1e-12);
        assert!((s.sdf(&Vec3::new(2.5, 1.5, 0.0)) - 2f64.sqrt()).abs() < 1e-12);
        assert!((s.sdf(&Vec3::new(1.0, 0.1, 0.0)) + 0.4).abs() < 1e-12);
    }

    fn facing_wall(pose: SE3Pose, fx: f64, baseline: Option<f64>) -> Frame {
        let k = CameraIntrinsics::new(fx, fx, 16.0, 12.0, 32, 24, baseline).unwrap();
        Frame::new(0, k, pose)
    }

    fn wall(depth: f64) -> SceneSpec {
        SceneSpec {
            primitives: vec![Primitive {
                shape: Shape::Plane {
                    normal: [0.0, 0.0, -1.0],
                    offset: -depth,
                },
                albedo: default_albedo(),
            }],
        }
    }

    #[test]
    fn identity_flow_is_zero() {
        let f = facing_wall(SE3Pose::identity(), 40.0, None);
        let m = gt_flow(&wall(5.0), &f, &f, None, 100.0);
        assert_eq!(m.valid_count(), 32 * 24);
        assert!(m.values.iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn lateral_translation_gives_uniform_flow() {
        let (d, tx, fx) = (4.0, 0.2, 40.0);
        let fj = facing_wall(SE3Pose::identity(), fx, None);
        let mut fk = fj.clone();
        fk.pose.translation.x = tx;
        let m = gt_flow(&wall(d), &fj, &fk, None, 100.0);
        assert!(m.valid_count() > 0);
        for (c, r) in m.valid_pixels() {
            let v = m.get(c, r).unwrap();
            assert!((v[0] as f64 + fx * tx / d).abs() < 1e-4);
            assert!(v[1].abs() < 1e-4);
        }
        // the leftmost column leaves the target image
        assert!(m.get(0, 5).is_none());
    }

    #[test]
    fn sky_is_invalid() {
        let up = SE3Pose::from_rotation_matrix(
            &Mat3::from_columns(&[-Vec3::x(), -Vec3::y(), Vec3::z()]),
            Vec3::new(0.0, 0.0, 1.0),
        );
        let f = facing_wall(up, 40.0, Some(0.5));
        let scene = ground();
        assert_eq!(gt_flow(&scene, &f, &f, None, 100.0).valid_count(), 0);
        assert_eq!(gt_disparity(&scene, &f, None, 100.0).unwrap().valid_count(), 0);
    }

    #[test]
    fn disparity_goldens() {
        let f = facing_wall(SE3Pose::identity(), 100.0, Some(0.5));
        let m = gt_disparity(&wall(10.0), &f, None, 100.0).unwrap();
        assert_eq!(m.valid_count(), 32 * 24);
        assert!(m.values.iter().all(|&v| (v as f64 - 5.0).abs() < 1e-5));
        let far = gt_disparity(&wall(20.0), &f, None, 100.0).unwrap();
        assert!(far.values.iter().all(|&v| (v as f64 - 2.5).abs() < 1e-5));
        let mono = facing_wall(SE3Pose::identity(), 100.0, None);
        assert!(matches!(
            gt_disparity(&wall(10.0), &mono, None, 100.0),
            Err(Error::MissingBaseline)
        ));
    }

    #[test]
    fn stereo_flow_equals_negative_disparity() {
        let cfg = SceneConfig::default_preset();
        let left = cfg.frames()[3].clone();
        let right = left.stereo_partner().unwrap();
        let max_t = cfg.max_t();
        let flow = gt_flow(&cfg.scene, &left, &right, None, max_t);
        let disp = gt_disparity(&cfg.scene, &left, None, max_t).unwrap();
        let mut checked = 0;
        for (c, r) in flow.valid_pixels() {
            if let Some(d) = disp.get(c, r) {
                let f = flow.get(c, r).unwrap();
                assert!((f[0] + d[0]).abs() < 1e-4, "{} vs {}", f[0], d[0]);
                assert!(f[1].abs() < 1e-4);
                checked += 1;
            }
        }
        assert!(checked > 1000);
    }

    #[test]
    fn preset_flow_masks_occlusions() {
        let cfg = SceneConfig::default_preset();
        let frames = cfg.frames();
        let m = gt_flow(&cfg.scene, &frames[4], &frames[5], Some(&cfg.close_box), cfg.max_t());
        let n = m.valid_count();
        assert!(n > 3000 && n < 96 * 64, "{n}");
    }

    #[test]
    fn perturbation_keeps_gauge_and_is_seeded() {
        let frames = SceneConfig::default_preset().frames();
        let (same, gt) = perturb_poses(&frames, 0.0, 0.0, 1).unwrap();
        assert_eq!(same, frames);
        assert_eq!(gt, frames);
        let (a, _) = perturb_poses(&frames, 0.05, 0.01, 7).unwrap();
        let (b, _) = perturb_poses(&frames, 0.05, 0.01, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a[0], frames[0]);
        assert!(a[1..].iter().zip(&frames[1..]).all(|(x, y)| x.pose != y.pose));
    }

    #[test]
    fn trajectory_moves_forward_looking_down() {
        let frames = SceneConfig::default_preset().frames();
        assert_eq!(frames.len(), 12);
        for w in frames.windows(2) {
            assert!(((w[1].center() - w[0].center()).norm() - 0.3).abs() < 1e-12);
        }
        let axis = frames[0].principal_axis();
        assert!((axis.z + 35f64.to_radians().sin()).abs() < 1e-12);
        let right = frames[0].effective_pose().rotation * Vec3::x();
        assert!((right - Vec3::new(0.0, -1.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn surface_samples_lie_on_surfaces() {
        let cfg = SceneConfig::default_preset();
        let frames = cfg.frames();
        let pts = surface_samples(&cfg.scene, &frames[..2], &cfg.close_box, 1, 0.05, 0);
        assert!(pts.len() > 500);
        assert!(pts.iter().all(|p| cfg.scene.distance(p).abs() < 1e-6));
    }
}
