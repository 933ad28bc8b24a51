//! Evaluation metrics: trajectory error, mesh accuracy/completion and PSNR.

use kiddo::{ImmutableKdTree, SquaredEuclidean};
use nalgebra::{Matrix3, SVD};

use crate::error::{Error, Result};
use crate::geometry::{project, Frame, Mat3, SE3Pose, Vec3};
use crate::io::Image;
use crate::mesh::Mesh;

/// PSNR reported for a perfect match.
pub const PSNR_CAP: f64 = 99.0;
/// Minimum predicted-surface sampling density (points per square unit).
pub const MIN_SAMPLE_DENSITY: f64 = 10.0;

/// Rigid transform `x ↦ R x + t` minimising `Σ |R a_i + t − b_i|²`.
pub fn align_rigid(a: &[Vec3], b: &[Vec3]) -> Result<SE3Pose> {
    if a.len() != b.len() {
        return Err(Error::CountMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(Error::EmptySamples);
    }
    let n = a.len() as f64;
    let ca = a.iter().sum::<Vec3>() / n;
    let cb = b.iter().sum::<Vec3>() / n;
    let mut h = Matrix3::zeros();
    for (p, q) in a.iter().zip(b) {
        h += (q - cb) * (p - ca).transpose();
    }
    let svd = SVD::new(h, true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut d = Mat3::identity();
    if (u * vt).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let r = u * d * vt;
    Ok(SE3Pose::from_rotation_matrix(&r, cb - r * ca))
}

/// Position RMSE after rigid alignment of `estimated` onto `reference`.
/// Frames are matched by id.
pub fn ate(estimated: &[(usize, SE3Pose)], reference: &[(usize, SE3Pose)]) -> Result<f64> {
    if estimated.len() != reference.len() {
        return Err(Error::CountMismatch(estimated.len(), reference.len()));
    }
    let mut a = Vec::with_capacity(estimated.len());
    let mut b = Vec::with_capacity(estimated.len());
    for (id, p) in estimated {
        let q = reference
            .iter()
            .find(|(r, _)| r == id)
            .ok_or_else(|| Error::DimensionMismatch(format!("frame {id} missing from reference")))?;
        a.push(p.translation);
        b.push(q.1.translation);
    }
    let t = align_rigid(&a, &b)?;
    let sse: f64 = a
        .iter()
        .zip(&b)
        .map(|(p, q)| (t.transform_point(p) - q).norm_squared())
        .sum();
    Ok((sse / a.len() as f64).sqrt())
}

/// Rigid transform taking the estimated trajectory onto the reference, fitted
/// to camera centers and to points one unit along each camera's x and z axes
/// so that roll about a straight path stays determined.
pub fn trajectory_alignment(estimated: &[(usize, SE3Pose)], reference: &[(usize, SE3Pose)]) -> Result<SE3Pose> {
    if estimated.len() != reference.len() {
        return Err(Error::CountMismatch(estimated.len(), reference.len()));
    }
    let anchors = |p: &SE3Pose| [p.translation, p.transform_point(&Vec3::x()), p.transform_point(&Vec3::z())];
    let mut a = Vec::with_capacity(3 * estimated.len());
    let mut b = Vec::with_capacity(3 * estimated.len());
    for (id, p) in estimated {
        let q = reference
            .iter()
            .find(|(r, _)| r == id)
            .ok_or_else(|| Error::DimensionMismatch(format!("frame {id} missing from reference")))?;
        a.extend(anchors(p));
        b.extend(anchors(&q.1));
    }
    align_rigid(&a, &b)
}

pub fn trajectory_of(frames: &[Frame]) -> Vec<(usize, SE3Pose)> {
    frames.iter().map(|f| (f.id, f.effective_pose())).collect()
}

/// Nearest-neighbour index over a point set.
pub struct PointIndex {
    tree: ImmutableKdTree<f64, 3>,
}

impl PointIndex {
    pub fn new(points: &[Vec3]) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptySamples);
        }
        let entries: Vec<[f64; 3]> = points.iter().map(|p| [p.x, p.y, p.z]).collect();
        let tree = ImmutableKdTree::new_from_slice(&entries).map_err(|e| {
            Error::InvalidConfig(format!("cannot index points: {e:?}"))
        })?;
        Ok(Self { tree })
    }

    pub fn distance(&self, p: &Vec3) -> f64 {
        self.tree
            .query(&[p.x, p.y, p.z])
            .nearest_one::<SquaredEuclidean<f64>>()
            .execute()
            .distance
            .sqrt()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeshMetrics {
    pub accuracy: f64,
    pub completion: f64,
    pub completion_ratio: f64,
    pub predicted_samples: usize,
    pub reference_samples: usize,
}

/// Accuracy (predicted → reference), completion (reference → predicted) and
/// the fraction of reference points within `threshold` of the prediction.
/// The mesh is sampled area-uniformly at `density` points per square unit
/// (raised to at least [`MIN_SAMPLE_DENSITY`]).
pub fn mesh_metrics(
    mesh: &Mesh,
    reference: &[Vec3],
    threshold: f64,
    density: f64,
    seed: u64,
) -> Result<MeshMetrics> {
    if mesh.is_empty() {
        return Err(Error::EmptyMesh);
    }
    if reference.is_empty() {
        return Err(Error::EmptySamples);
    }
    let predicted = mesh.sample_surface(density.max(MIN_SAMPLE_DENSITY), seed);
    let ref_index = PointIndex::new(reference)?;
    let pred_index = PointIndex::new(&predicted)?;
    let acc: Vec<f64> = predicted.iter().map(|p| ref_index.distance(p)).collect();
    let comp: Vec<f64> = reference.iter().map(|p| pred_index.distance(p)).collect();
    let within = comp.iter().filter(|&&d| d <= threshold).count();
    Ok(MeshMetrics {
        accuracy: mean(&acc),
        completion: mean(&comp),
        completion_ratio: within as f64 / comp.len() as f64,
        predicted_samples: predicted.len(),
        reference_samples: reference.len(),
    })
}

fn mean(v: &[f64]) -> f64 {
    crate::losses::pairwise_sum(v) / v.len() as f64
}

/// True if `p` projects inside at least one frame's image in front of it.
pub fn in_any_frustum(frames: &[Frame], p: &Vec3) -> bool {
    frames.iter().any(|f| {
        project(p, f).is_ok_and(|q| {
            let k = &f.intrinsics;
            q.x >= 0.0 && q.y >= 0.0 && q.x < k.width as f64 && q.y < k.height as f64
        })
    })
}

/// `10·log10(1 / MSE)` over pixels where `mask` is set (all pixels when
/// `None`), capped at [`PSNR_CAP`].
pub fn psnr(rendered: &Image, reference: &Image, mask: Option<&[bool]>) -> Result<f64> {
    if rendered.width != reference.width || rendered.height != reference.height {
        return Err(Error::DimensionMismatch(format!(
            "{}x{} vs {}x{}",
            rendered.width, rendered.height, reference.width, reference.height
        )));
    }
    let n = rendered.width * rendered.height;
    if let Some(m) = mask {
        if m.len() != n {
            return Err(Error::DimensionMismatch("mask size".into()));
        }
    }
    let mut sq = Vec::with_capacity(3 * n);
    for i in 0..n {
        if mask.is_some_and(|m| !m[i]) {
            continue;
        }
        for c in 0..3 {
            let d = rendered.rgb[3 * i + c] as f64 - reference.rgb[3 * i + c] as f64;
            sq.push(d * d);
        }
    }
    if sq.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mse = mean(&sq);
    if mse <= 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{marching_cubes, CellGrid};
    use crate::geometry::{se3_exp, Aabb};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn line_trajectory(n: usize) -> Vec<(usize, SE3Pose)> {
        (0..n)
            .map(|i| {
                let f = i as f64;
                (i, SE3Pose::new(Default::default(), Vec3::new(f, 0.2 * (f * 0.7).sin(), 0.05 * f * f)))
            })
            .collect()
    }

    #[test]
    fn ate_identity_and_rigid_invariance() {
        let t = line_trajectory(10);
        assert!(ate(&t, &t).unwrap() < 1e-12);
        let g = se3_exp(&[0.3, -0.2, 1.1, 4.0, -2.0, 0.5]);
        let moved: Vec<_> = t.iter().map(|(i, p)| (*i, g.compose(p))).collect();
        assert!(ate(&moved, &t).unwrap() < 1e-9);
        assert!(matches!(ate(&t[..3], &t), Err(Error::CountMismatch(3, 10))));
    }

    #[test]
    fn single_offset_frame() {
        let reference = line_trajectory(10);
        let mut est = reference.clone();
        est[4].1.translation.y += 0.3;
        let e = ate(&est, &reference).unwrap();
        assert!(e <= 0.3 / 10f64.sqrt() + 1e-12);
        assert!(e > 0.08, "{e}");
    }

    #[test]
    fn alignment_recovers_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a: Vec<Vec3> = (0..30)
            .map(|_| Vec3::new(rng.random(), rng.random(), rng.random()))
            .collect();
        let g = se3_exp(&[-0.4, 0.9, 0.1, 1.0, 2.0, 3.0]);
        let b: Vec<Vec3> = a.iter().map(|p| g.transform_point(p)).collect();
        let est = align_rigid(&a, &b).unwrap();
        assert!((est.rotation_matrix() - g.rotation_matrix()).norm() < 1e-10);
        assert!((est.translation - g.translation).norm() < 1e-10);
    }

    fn plane_mesh(z: f64) -> Mesh {
        let bbox = Aabb::new(Vec3::new(0.0, 0.0, -1.0), Vec3::new(2.0, 2.0, 1.0)).unwrap();
        marching_cubes(&CellGrid::covering(&bbox, 8), |p| p.z - z, |_| true)
    }

    fn plane_samples() -> Vec<Vec3> {
        let mut pts = Vec::new();
        for i in 0..=80 {
            for j in 0..=80 {
                pts.push(Vec3::new(i as f64 * 0.025, j as f64 * 0.025, 0.0));
            }
        }
        pts
    }

    #[test]
    fn self_comparison_is_perfect() {
        let m = mesh_metrics(&plane_mesh(0.0), &plane_samples(), 0.2, 2000.0, 1).unwrap();
        assert!(m.accuracy < 0.02 && m.completion < 0.02);
        assert_eq!(m.completion_ratio, 1.0);
    }

    #[test]
    fn offset_plane_oracle() {
        let mesh = plane_mesh(0.1);
        let gt = plane_samples();
        let m = mesh_metrics(&mesh, &gt, 0.2, 4000.0, 1).unwrap();
        assert!((m.accuracy - 0.1).abs() < 2e-3, "{m:?}");
        assert!((m.completion - 0.1).abs() < 2e-3, "{m:?}");
        assert_eq!(m.completion_ratio, 1.0);
        assert_eq!(mesh_metrics(&mesh, &gt, 0.05, 4000.0, 1).unwrap().completion_ratio, 0.0);
        assert!(matches!(mesh_metrics(&Mesh::default(), &gt, 0.2, 100.0, 1), Err(Error::EmptyMesh)));
        assert!(matches!(mesh_metrics(&mesh, &[], 0.2, 100.0, 1), Err(Error::EmptySamples)));
    }

    #[test]
    fn ratio_is_monotone_in_threshold() {
        let mesh = plane_mesh(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let gt: Vec<Vec3> = (0..500)
            .map(|_| Vec3::new(rng.random_range(0.0..2.0), rng.random_range(0.0..2.0), rng.random_range(-0.5..0.5)))
            .collect();
        let mut last = 0.0;
        for k in 0..12 {
            let r = mesh_metrics(&mesh, &gt, 0.05 * k as f64, 500.0, 3).unwrap().completion_ratio;
            assert!(r >= last);
            last = r;
        }
    }

    #[test]
    fn psnr_goldens() {
        let mut a = Image::new(4, 3);
        a.rgb.iter_mut().enumerate().for_each(|(i, v)| *v = 0.05 * (i % 7) as f32);
        assert_eq!(psnr(&a, &a, None).unwrap(), PSNR_CAP);
        let mut b = a.clone();
        b.rgb.iter_mut().for_each(|v| *v += 0.1);
        assert!((psnr(&b, &a, None).unwrap() - 20.0).abs() < 1e-5);
        assert!(matches!(psnr(&a, &Image::new(3, 3), None), Err(Error::DimensionMismatch(_))));
        assert!(psnr(&a, &b, Some(&[false; 12])).is_err());
    }
}
