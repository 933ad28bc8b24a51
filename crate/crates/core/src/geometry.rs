//! Rigid-body math, pinhole projection, the plane-induced homography,
//! two-view triangulation and RANSAC plane fitting.
//!
//! Poses are world-from-camera: `x_world = R * x_cam + t`. Cameras look down
//! their local +z axis with +x right and +y down. World up is +z.

use nalgebra::{Matrix3, SymmetricEigen, UnitQuaternion, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec2 = Vector2<f64>;
pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// se(3) tangent vector ordered `[ω (rotation, rad); ρ (translation, m)]`.
pub type Tangent = [f64; 6];

const SMALL_ANGLE: f64 = 1e-8;

/// Skew-symmetric cross-product matrix.
pub fn hat(w: &Vec3) -> Mat3 {
    Mat3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

/// Rigid transform mapping camera-frame points to world-frame points.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SE3Pose {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vec3,
}

impl Default for SE3Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl SE3Pose {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vec3) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_rotation_matrix(r: &Mat3, translation: Vec3) -> Self {
        let rot = nalgebra::Rotation3::from_matrix_unchecked(*r);
        Self::new(UnitQuaternion::from_rotation_matrix(&rot), translation)
    }

    pub fn rotation_matrix(&self) -> Mat3 {
        self.rotation.to_rotation_matrix().into_inner()
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &SE3Pose) -> SE3Pose {
        SE3Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> SE3Pose {
        let rinv = self.rotation.inverse();
        SE3Pose {
            rotation: rinv,
            translation: -(rinv * self.translation),
        }
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    /// Inverse of [`transform_point`](Self::transform_point).
    pub fn inverse_transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation.inverse() * (p - self.translation)
    }

    /// Logarithm map; inverse of [`se3_exp`].
    pub fn log(&self) -> Tangent {
        let omega = self.rotation.scaled_axis();
        let theta = omega.norm();
        let w = hat(&omega);
        let v_inv = if theta < SMALL_ANGLE {
            Mat3::identity() - 0.5 * w + (1.0 / 12.0) * w * w
        } else {
            let half = 0.5 * theta;
            let coef = (1.0 - half * half.cos() / half.sin()) / (theta * theta);
            Mat3::identity() - 0.5 * w + coef * w * w
        };
        let rho = v_inv * self.translation;
        [omega.x, omega.y, omega.z, rho.x, rho.y, rho.z]
    }

    /// Quaternion with non-negative `w`, so equal rotations compare equal.
    pub fn canonical_quaternion(&self) -> [f64; 4] {
        let q = self.rotation.quaternion();
        let s = if q.w < 0.0 { -1.0 } else { 1.0 };
        [s * q.i, s * q.j, s * q.k, s * q.w]
    }
}

/// The `V` matrix of the SE(3) exponential (left Jacobian of SO(3)).
fn left_jacobian(omega: &Vec3) -> Mat3 {
    let theta = omega.norm();
    let w = hat(omega);
    if theta < SMALL_ANGLE {
        Mat3::identity() + 0.5 * w + (1.0 / 6.0) * w * w
    } else {
        let t2 = theta * theta;
        Mat3::identity()
            + ((1.0 - theta.cos()) / t2) * w
            + ((theta - theta.sin()) / (t2 * theta)) * w * w
    }
}

/// Closed-form SE(3) exponential.
pub fn se3_exp(xi: &Tangent) -> SE3Pose {
    let omega = Vec3::new(xi[0], xi[1], xi[2]);
    let rho = Vec3::new(xi[3], xi[4], xi[5]);
    let rotation = if omega.norm() < SMALL_ANGLE {
        // first-order quaternion, renormalised
        UnitQuaternion::new_normalize(nalgebra::Quaternion::new(
            1.0,
            0.5 * omega.x,
            0.5 * omega.y,
            0.5 * omega.z,
        ))
    } else {
        UnitQuaternion::from_scaled_axis(omega)
    };
    SE3Pose {
        rotation,
        translation: left_jacobian(&omega) * rho,
    }
}

/// Axis-aligned box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn new(min: Vec3, max: Vec3) -> Result<Self> {
        let ext = max - min;
        if !(ext.x > 0.0 && ext.y > 0.0 && ext.z > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "bounding box needs positive extent, got {:?}",
                ext.as_slice()
            )));
        }
        Ok(Self { min, max })
    }

    pub fn extent(&self) -> Vec3 {
        self.max - self.min
    }

    pub fn center(&self) -> Vec3 {
        0.5 * (self.min + self.max)
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|k| p[k] >= self.min[k] && p[k] <= self.max[k])
    }

    pub fn clamp(&self, p: &Vec3) -> Vec3 {
        Vec3::new(
            p.x.clamp(self.min.x, self.max.x),
            p.y.clamp(self.min.y, self.max.y),
            p.z.clamp(self.min.z, self.max.z),
        )
    }

    /// Box scaled about `center` by `scale`.
    pub fn scaled_about(&self, center: &Vec3, scale: f64) -> Aabb {
        Aabb {
            min: center + (self.min - center) * scale,
            max: center + (self.max - center) * scale,
        }
    }

    pub fn corners(&self) -> [Vec3; 8] {
        let mut out = [Vec3::zeros(); 8];
        for (i, c) in out.iter_mut().enumerate() {
            *c = Vec3::new(
                if i & 1 == 0 { self.min.x } else { self.max.x },
                if i & 2 == 0 { self.min.y } else { self.max.y },
                if i & 4 == 0 { self.min.z } else { self.max.z },
            );
        }
        out
    }

    /// Slab test; returns the parametric interval `[t_near, t_far]` of the
    /// ray inside the box, clipped to `t ≥ 0`.
    pub fn ray_interval(&self, origin: &Vec3, dir: &Vec3) -> Option<(f64, f64)> {
        let mut t0 = 0.0f64;
        let mut t1 = f64::INFINITY;
        for k in 0..3 {
            if dir[k].abs() < 1e-300 {
                if origin[k] < self.min[k] || origin[k] > self.max[k] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / dir[k];
            let mut a = (self.min[k] - origin[k]) * inv;
            let mut b = (self.max[k] - origin[k]) * inv;
            if a > b {
                std::mem::swap(&mut a, &mut b);
            }
            t0 = t0.max(a);
            t1 = t1.min(b);
            if t0 > t1 {
                return None;
            }
        }
        Some((t0, t1))
    }
}

/// Pinhole intrinsics. `baseline` is present only for stereo rigs; the right
/// camera sits at `+baseline` along the left camera's x axis.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub baseline: Option<f64>,
}

impl CameraIntrinsics {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
        baseline: Option<f64>,
    ) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            baseline,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidIntrinsics(m.to_string()));
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return bad("focal lengths must be positive");
        }
        if !(self.cx > 0.0 && self.cx < self.width as f64) {
            return bad("cx must lie inside the image");
        }
        if !(self.cy > 0.0 && self.cy < self.height as f64) {
            return bad("cy must lie inside the image");
        }
        if let Some(b) = self.baseline {
            if !(b > 0.0) {
                return bad("baseline must be positive");
            }
        }
        Ok(())
    }

    pub fn matrix(&self) -> Mat3 {
        Mat3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn inverse_matrix(&self) -> Mat3 {
        Mat3::new(
            1.0 / self.fx,
            0.0,
            -self.cx / self.fx,
            0.0,
            1.0 / self.fy,
            -self.cy / self.fy,
            0.0,
            0.0,
            1.0,
        )
    }

    /// Camera-frame ray `K⁻¹ [u, v, 1]` (z component is 1, not normalised).
    pub fn unproject(&self, pixel: &Vec2) -> Vec3 {
        Vec3::new(
            (pixel.x - self.cx) / self.fx,
            (pixel.y - self.cy) / self.fy,
            1.0,
        )
    }

    pub fn in_bounds(&self, pixel: &Vec2) -> bool {
        pixel.x >= 0.0
            && pixel.y >= 0.0
            && pixel.x <= self.width as f64
            && pixel.y <= self.height as f64
    }

    /// Continuous coordinate of the center of pixel `(col, row)`.
    pub fn pixel_center(col: usize, row: usize) -> Vec2 {
        Vec2::new(col as f64 + 0.5, row as f64 + 0.5)
    }
}

/// A camera image with its (optimizable) pose.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub id: usize,
    pub intrinsics: CameraIntrinsics,
    pub pose: SE3Pose,
    pub pose_delta: Tangent,
}

impl Frame {
    pub fn new(id: usize, intrinsics: CameraIntrinsics, pose: SE3Pose) -> Self {
        Self {
            id,
            intrinsics,
            pose,
            pose_delta: [0.0; 6],
        }
    }

    /// `exp(pose_delta) ∘ pose`.
    pub fn effective_pose(&self) -> SE3Pose {
        se3_exp(&self.pose_delta).compose(&self.pose)
    }

    /// Fold the delta into the base pose and zero it.
    pub fn bake_delta(&mut self) {
        self.pose = self.effective_pose();
        self.pose_delta = [0.0; 6];
    }

    pub fn center(&self) -> Vec3 {
        self.effective_pose().translation
    }

    /// Principal axis in world coordinates.
    pub fn principal_axis(&self) -> Vec3 {
        self.effective_pose().rotation * Vec3::z()
    }

    /// The right camera of a stereo rig, if a baseline is set.
    pub fn stereo_partner(&self) -> Option<Frame> {
        let b = self.intrinsics.baseline?;
        let offset = SE3Pose::new(UnitQuaternion::identity(), Vec3::new(b, 0.0, 0.0));
        Some(Frame::new(
            self.id,
            self.intrinsics,
            self.effective_pose().compose(&offset),
        ))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
    pub source_frame: usize,
    pub pixel: Vec2,
}

impl Ray {
    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + t * self.direction
    }
}

/// `{x : normal · x = offset}`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Plane {
    pub normal: Vec3,
    pub offset: f64,
}

impl Plane {
    /// Normalises and orients the normal toward world up (+z); when the normal
    /// is horizontal the first non-zero component is made positive.
    pub fn new(normal: Vec3, offset: f64) -> Self {
        let n = normal.norm();
        let (mut normal, mut offset) = (normal / n, offset / n);
        let flip = if normal.z.abs() > 1e-12 {
            normal.z < 0.0
        } else if normal.x.abs() > 1e-12 {
            normal.x < 0.0
        } else {
            normal.y < 0.0
        };
        if flip {
            normal = -normal;
            offset = -offset;
        }
        Self { normal, offset }
    }

    pub fn signed_distance(&self, p: &Vec3) -> f64 {
        self.normal.dot(p) - self.offset
    }

    pub fn intersects_box(&self, b: &Aabb) -> bool {
        let d: Vec<f64> = b.corners().iter().map(|c| self.signed_distance(c)).collect();
        let lo = d.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = d.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        lo <= 0.0 && hi >= 0.0
    }
}

/// Pinhole projection of a world point into `frame`.
pub fn project(point_world: &Vec3, frame: &Frame) -> Result<Vec2> {
    let pose = frame.effective_pose();
    let pc = pose.inverse_transform_point(point_world);
    project_camera(&pc, &frame.intrinsics)
}

pub fn project_camera(pc: &Vec3, k: &CameraIntrinsics) -> Result<Vec2> {
    if pc.z <= 1e-9 {
        return Err(Error::NonPositiveDepth(pc.z));
    }
    Ok(Vec2::new(
        k.fx * pc.x / pc.z + k.cx,
        k.fy * pc.y / pc.z + k.cy,
    ))
}

/// Back-project a pixel into a world-space unit ray from the camera center.
pub fn cast_ray(frame: &Frame, pixel: &Vec2) -> Result<Ray> {
    if !frame.intrinsics.in_bounds(pixel) {
        return Err(Error::PixelOutOfBounds(pixel.x, pixel.y));
    }
    let pose = frame.effective_pose();
    let dir_cam = frame.intrinsics.unproject(pixel).normalize();
    Ok(Ray {
        origin: pose.translation,
        direction: (pose.rotation * dir_cam).normalize(),
        source_frame: frame.id,
        pixel: *pixel,
    })
}

/// Relative motion `(R_kj, t_kj)` taking reference-camera points into the
/// target camera: `X_k = R_kj X_j + t_kj`.
pub fn relative_motion(frame_j: &Frame, frame_k: &Frame) -> (Mat3, Vec3) {
    let pj = frame_j.effective_pose();
    let pk = frame_k.effective_pose();
    let rk_t = pk.rotation_matrix().transpose();
    (
        rk_t * pj.rotation_matrix(),
        rk_t * (pj.translation - pk.translation),
    )
}

/// Homography induced by the fronto-parallel plane `z = d` of the reference
/// camera `frame_j`, mapping its pixels into `frame_k`.
///
/// Written with camera centers `C` and world-frame rotations `R`:
/// `H(d) = K_k R_kᵀ (I + (C_j − C_k) n_jᵀ / d) R_j K_j⁻¹`, where `n_j` is
/// the world-frame principal axis of the reference camera.
pub fn homography(frame_j: &Frame, frame_k: &Frame, d: f64) -> Result<Mat3> {
    if !(d > 0.0) {
        return Err(Error::NonPositiveDepth(d));
    }
    let pj = frame_j.effective_pose();
    let pk = frame_k.effective_pose();
    let rj = pj.rotation_matrix();
    let rk = pk.rotation_matrix();
    let n_world = rj * Vec3::z();
    let c_diff = pj.translation - pk.translation;
    let inner = Mat3::identity() + c_diff * n_world.transpose() / d;
    Ok(frame_k.intrinsics.matrix() * rk.transpose() * inner * rj * frame_j.intrinsics.inverse_matrix())
}

/// Perspective division of `H · [p; 1]`.
pub fn warp_pixel(h: &Mat3, p: &Vec2) -> Result<Vec2> {
    let q = h * Vec3::new(p.x, p.y, 1.0);
    if q.z.abs() < 1e-12 {
        return Err(Error::DegenerateWarp(q.z));
    }
    Ok(Vec2::new(q.x / q.z, q.y / q.z))
}

/// Midpoint of the common perpendicular between the two back-projected rays.
pub fn triangulate(p_j: &Vec2, p_k: &Vec2, frame_j: &Frame, frame_k: &Frame) -> Result<Vec3> {
    let pose_j = frame_j.effective_pose();
    let pose_k = frame_k.effective_pose();
    let dj = (pose_j.rotation * frame_j.intrinsics.unproject(p_j)).normalize();
    let dk = (pose_k.rotation * frame_k.intrinsics.unproject(p_k)).normalize();
    let angle = dj.cross(&dk).norm().atan2(dj.dot(&dk));
    if angle <= 1e-4 {
        return Err(Error::DegenerateParallax(angle));
    }
    let oj = pose_j.translation;
    let ok = pose_k.translation;
    // minimise |oj + a dj − (ok + b dk)|²
    let w0 = oj - ok;
    let b_ = dj.dot(&dk);
    let d_ = dj.dot(&w0);
    let e_ = dk.dot(&w0);
    let denom = 1.0 - b_ * b_;
    let a = (b_ * e_ - d_) / denom;
    let b = (e_ - b_ * d_) / denom;
    Ok(0.5 * ((oj + a * dj) + (ok + b * dk)))
}

fn plane_through(a: &Vec3, b: &Vec3, c: &Vec3) -> Option<Plane> {
    let n = (b - a).cross(&(c - a));
    let scale = (b - a).norm() * (c - a).norm();
    if n.norm() <= 1e-12 * scale.max(1e-300) || n.norm() < 1e-300 {
        return None;
    }
    let n = n.normalize();
    Some(Plane::new(n, n.dot(a)))
}

/// Total-least-squares plane through `points`; `None` if they are collinear.
pub fn fit_plane_least_squares(points: &[Vec3]) -> Option<Plane> {
    if points.len() < 3 {
        return None;
    }
    let centroid = points.iter().fold(Vec3::zeros(), |acc, p| acc + p) / points.len() as f64;
    let mut cov = Mat3::zeros();
    for p in points {
        let d = p - centroid;
        cov += d * d.transpose();
    }
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let (lo, mid, hi) = (
        eig.eigenvalues[order[0]],
        eig.eigenvalues[order[1]],
        eig.eigenvalues[order[2]],
    );
    if hi <= 0.0 || mid <= 1e-12 * hi {
        return None;
    }
    let _ = lo;
    let n: Vec3 = eig.eigenvectors.column(order[0]).into_owned();
    Some(Plane::new(n, n.dot(&centroid)))
}

/// RANSAC over exact 3-point hypotheses, refined by least squares on the
/// winning inlier set. Ties keep the first hypothesis found.
pub fn ransac_plane(
    points: &[Vec3],
    inlier_threshold: f64,
    iterations: usize,
    seed: u64,
) -> Result<(Plane, Vec<usize>)> {
    if points.len() < 3 {
        return Err(Error::InsufficientPoints(points.len()));
    }
    if fit_plane_least_squares(points).is_none() {
        return Err(Error::DegenerateGeometry("all points collinear"));
    }
    let inliers_of = |plane: &Plane| -> Vec<usize> {
        points
            .iter()
            .enumerate()
            .filter(|(_, p)| plane.signed_distance(p).abs() <= inlier_threshold)
            .map(|(i, _)| i)
            .collect()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = points.len();
    let mut best: Option<(usize, Plane)> = None;
    for _ in 0..iterations {
        let i = rng.random_range(0..n);
        let mut j = rng.random_range(0..n - 1);
        if j >= i {
            j += 1;
        }
        let mut k = rng.random_range(0..n - 2);
        let (lo, hi) = (i.min(j), i.max(j));
        if k >= lo {
            k += 1;
        }
        if k >= hi {
            k += 1;
        }
        let Some(plane) = plane_through(&points[i], &points[j], &points[k]) else {
            continue;
        };
        let count = points
            .iter()
            .filter(|p| plane.signed_distance(p).abs() <= inlier_threshold)
            .count();
        if best.as_ref().map_or(true, |(c, _)| count > *c) {
            best = Some((count, plane));
        }
    }
    let Some((_, hypothesis)) = best else {
        return Err(Error::DegenerateGeometry("no non-degenerate hypothesis sampled"));
    };
    let support = inliers_of(&hypothesis);
    let support_pts: Vec<Vec3> = support.iter().map(|&i| points[i]).collect();
    let plane = fit_plane_least_squares(&support_pts).unwrap_or(hypothesis);
    let inliers = inliers_of(&plane);
    // refinement must not lose support relative to the hypothesis
    if inliers.len() < support.len() {
        return Ok((hypothesis, support));
    }
    Ok((plane, inliers))
}
