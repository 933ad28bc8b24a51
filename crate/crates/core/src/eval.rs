//! Evaluation of an optimization result against a synthetic dataset.

use std::fmt::Write as _;

use crate::dba::{extract_mesh, render_color_image, DbaConfig, DbaState, Problem};
use crate::error::Result;
use crate::geometry::{Frame, Vec3};
use crate::io::{Dataset, Trajectory};
use crate::mesh::Mesh;
use crate::metrics::{ate, in_any_frustum, mesh_metrics, psnr, trajectory_alignment, MeshMetrics, MIN_SAMPLE_DENSITY};

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    /// Completion-ratio distance threshold.
    pub threshold: f64,
    /// Marching-cubes cells along the longest side of the octree root.
    pub resolution: usize,
    pub sample_density: f64,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            threshold: 0.2,
            resolution: 160,
            sample_density: MIN_SAMPLE_DENSITY,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub frames: usize,
    pub ate: Option<f64>,
    /// ATE of the dataset's initial poses.
    pub initial_ate: Option<f64>,
    pub threshold: f64,
    pub mesh: Option<MeshMetrics>,
    pub psnr: Option<f64>,
}

impl EvalReport {
    /// `key=value` lines; absent metrics are reported as `n/a`.
    pub fn to_text(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.9}"));
        let mut s = String::new();
        let _ = writeln!(s, "frames={}", self.frames);
        let _ = writeln!(s, "ate={}", opt(self.ate));
        let _ = writeln!(s, "initial_ate={}", opt(self.initial_ate));
        let _ = writeln!(s, "accuracy={}", opt(self.mesh.map(|m| m.accuracy)));
        let _ = writeln!(s, "completion={}", opt(self.mesh.map(|m| m.completion)));
        let _ = writeln!(s, "completion_ratio={}", opt(self.mesh.map(|m| m.completion_ratio)));
        let _ = writeln!(s, "threshold={}", self.threshold);
        let _ = writeln!(s, "psnr={}", opt(self.psnr));
        let _ = writeln!(s, "ssim=omitted lpips=omitted");
        s
    }
}

/// Keeps mesh faces and reference samples that fall inside some camera's
/// viewing frustum.
pub fn crop_to_frusta(mesh: &Mesh, samples: &[Vec3], frames: &[Frame]) -> (Mesh, Vec<Vec3>) {
    let cropped = mesh.filter_faces(|c| in_any_frustum(frames, c));
    let kept = samples.iter().copied().filter(|p| in_any_frustum(frames, p)).collect();
    (cropped, kept)
}

/// Mesh metrics after cropping both sides to the reference frusta.
pub fn evaluate_mesh(
    mesh: &Mesh,
    samples: &[Vec3],
    reference: &[Frame],
    opts: &EvalOptions,
) -> Result<MeshMetrics> {
    let (mesh, samples) = crop_to_frusta(mesh, samples, reference);
    mesh_metrics(&mesh, &samples, opts.threshold, opts.sample_density, opts.seed)
}

fn frames_of(problem: &Problem, traj: &Trajectory) -> Vec<Frame> {
    let k = problem.frames[0].intrinsics;
    traj.iter().map(|(id, p)| Frame::new(*id, k, *p)).collect()
}

/// ATE of `poses`, mesh metrics of `mesh` (extracted from `state` when not
/// given, and aligned onto the reference trajectory) and mean PSNR of the color renders, each where inputs exist.
pub fn evaluate(
    dataset: &Dataset,
    poses: &Trajectory,
    state: Option<&DbaState>,
    mesh: Option<&Mesh>,
    config: &DbaConfig,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    let problem = Problem::from_dataset(dataset)?;
    let mut report = EvalReport {
        frames: poses.len(),
        threshold: opts.threshold,
        ..EvalReport::default()
    };
    if let Some(gt) = &dataset.poses_gt {
        report.ate = Some(ate(poses, gt)?);
        report.initial_ate = Some(ate(&dataset.poses, gt)?);
    }
    let reference = dataset
        .poses_gt
        .as_ref()
        .map(|gt| frames_of(&problem, gt))
        .unwrap_or_else(|| frames_of(&problem, poses));
    if let Some(samples) = &dataset.gt_samples {
        let extracted;
        let mesh = match (mesh, state) {
            (Some(m), _) => Some(m),
            (None, Some(s)) => {
                extracted = extract_mesh(&s.field, &s.store, &s.tree, opts.resolution)?;
                Some(&extracted)
            }
            (None, None) => None,
        };
        if let Some(mesh) = mesh {
            // the reconstruction lives in the estimated gauge
            let aligned = match &dataset.poses_gt {
                Some(gt) => mesh.transformed(&trajectory_alignment(poses, gt)?),
                None => mesh.clone(),
            };
            report.mesh = Some(evaluate_mesh(&aligned, samples, &reference, opts)?);
        }
    }
    if let Some(state) = state.filter(|s| s.color.is_some()) {
        let estimated = frames_of(&problem, poses);
        let mut values = Vec::new();
        for (id, img) in &dataset.images {
            let Some(frame) = estimated.iter().find(|f| f.id == *id) else {
                continue;
            };
            let rendered = render_color_image(&problem, state, frame, config)?;
            values.push(psnr(&rendered, img, None)?);
        }
        if !values.is_empty() {
            report.psnr = Some(values.iter().sum::<f64>() / values.len() as f64);
        }
    }
    Ok(report)
}
