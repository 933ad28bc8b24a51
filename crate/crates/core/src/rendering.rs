//! Volume rendering of flow, disparity, depth, opacity and color.
//!
//! Per-ray functions operate on plain values. [`render_chunk_graph`] records
//! the same quantities for a chunk of rays on an autodiff [`Graph`], batched
//! over every sample of the chunk.

use serde::{Deserialize, Serialize};

use crate::autodiff::{softplus, BlockId, Graph, ParamStore, Var};
use crate::error::{Error, Result};
use crate::field::{ColorHead, DistantField, FieldTape, SdfField};
use crate::geometry::{
    hat, homography, warp_pixel, CameraIntrinsics, Frame, Mat3, Ray, SE3Pose, Vec2, Vec3,
};
use crate::sampling::{RaySamples, ShellSamples};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderConfig {
    pub far_cap: f64,
    pub use_stereo: bool,
    pub use_color: bool,
    /// Flow targets flagged invalid are dropped from the loss.
    pub mask_invalid_flow: bool,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            far_cap: 20.0,
            use_stereo: true,
            use_color: false,
            mask_invalid_flow: true,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.far_cap > 0.0) {
            return Err(Error::InvalidConfig("far cap must be positive".into()));
        }
        Ok(())
    }
}

/// `Φ_s(x) = 1 / (1 + exp(−s·x))`.
pub fn logistic_cdf(x: f64, s: f64) -> f64 {
    crate::autodiff::sigmoid(s * x)
}

/// `s_{i+1}` for every sample; the value past the last sample continues the
/// slope of the last two samples, and a lone sample is held constant.
fn next_sdf(sdf: &[f64], deltas: &[f64]) -> Vec<f64> {
    let n = sdf.len();
    (0..n)
        .map(|i| {
            if i + 1 < n {
                sdf[i + 1]
            } else if n >= 2 {
                sdf[i] + (sdf[i] - sdf[i - 1]) * deltas[i] / deltas[i - 1]
            } else {
                sdf[i]
            }
        })
        .collect()
}

/// NeuS alphas `clamp((Φ(s_i) − Φ(s_{i+1})) / Φ(s_i), 0, 1)`, evaluated in
/// log space so that deep-interior samples stay finite.
pub fn sdf_to_alpha(sdf: &[f64], deltas: &[f64], sharpness: f64) -> Vec<f64> {
    assert_eq!(sdf.len(), deltas.len());
    next_sdf(sdf, deltas)
        .iter()
        .zip(sdf)
        .map(|(&b, &a)| {
            let log_ratio = softplus(-sharpness * a, 1.0) - softplus(-sharpness * b, 1.0);
            (1.0 - log_ratio.min(0.0).exp()).clamp(0.0, 1.0)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompositingWeights {
    pub alphas: Vec<f64>,
    pub transmittances: Vec<f64>,
    pub weights: Vec<f64>,
    pub opacity: f64,
    /// Transmittance left after the last sample.
    pub final_transmittance: f64,
}

/// Exclusive-product compositing: `T_i = ∏_{j<i} (1 − α_j)`, `w_i = T_i α_i`.
pub fn composite(alphas: &[f64]) -> CompositingWeights {
    let mut t = 1.0;
    let mut transmittances = Vec::with_capacity(alphas.len());
    let mut weights = Vec::with_capacity(alphas.len());
    for &a in alphas {
        transmittances.push(t);
        weights.push(t * a);
        t *= 1.0 - a;
    }
    let opacity = weights.iter().sum();
    CompositingWeights {
        alphas: alphas.to_vec(),
        transmittances,
        weights,
        opacity,
        final_transmittance: t,
    }
}

/// `Σ w_i p_k^i − p_j` with `p_k^i` the plane-induced warp of `p_j` at the
/// camera depth of sample `i`.
pub fn render_flow(
    ray: &Ray,
    samples: &RaySamples,
    weights: &[f64],
    frame_j: &Frame,
    frame_k: &Frame,
) -> Result<Vec2> {
    let cos = ray.direction.dot(&frame_j.principal_axis());
    let mut acc = Vec2::zeros();
    for (&d, &w) in samples.depths.iter().zip(weights) {
        let h = homography(frame_j, frame_k, d * cos)?;
        acc += w * warp_pixel(&h, &ray.pixel)?;
    }
    Ok(acc - ray.pixel)
}

/// `Σ w_i f·b / z_i` with `z_i` the camera depth of each sample.
pub fn render_disparity(samples: &RaySamples, weights: &[f64], intrinsics: &CameraIntrinsics) -> Result<f64> {
    let b = intrinsics.baseline.ok_or(Error::MissingBaseline)?;
    let fb = intrinsics.fx * b;
    Ok(samples
        .depths
        .iter()
        .zip(weights)
        .map(|(&d, &w)| w * fb / (d * samples.axial_cos))
        .sum())
}

pub fn render_depth(samples: &RaySamples, weights: &[f64]) -> f64 {
    samples.depths.iter().zip(weights).map(|(d, w)| d * w).sum()
}

pub fn render_opacity(weights: &[f64]) -> f64 {
    let o: f64 = weights.iter().sum();
    debug_assert!(o <= 1.0 + 1e-6);
    o.clamp(0.0, 1.0)
}

/// Close-range shading plus the distant shells behind it, weighted by the
/// transmittance the close range leaves.
#[allow(clippy::too_many_arguments)]
pub fn render_color(
    ray: &Ray,
    weights: &[f64],
    features: &[Vec<f64>],
    shells: &ShellSamples,
    color: Option<&ColorHead>,
    distant: Option<&DistantField>,
    store: &ParamStore,
) -> Result<[f64; 3]> {
    let (Some(color), Some(distant)) = (color, distant) else {
        return Err(Error::MissingColorModel);
    };
    let mut close = [0.0; 3];
    for (w, z) in weights.iter().zip(features) {
        let c = color.query(store, &ray.direction, z)?;
        for k in 0..3 {
            close[k] += w * c[k];
        }
    }
    let remaining = (1.0 - weights.iter().sum::<f64>()).max(0.0);
    let mut sig = Vec::with_capacity(shells.len());
    let mut rgb = Vec::with_capacity(shells.len());
    for x in &shells.warped {
        let (s, c) = distant.query(store, x);
        sig.push(s);
        rgb.push(c);
    }
    let alphas: Vec<f64> = sig
        .iter()
        .zip(&shells.deltas)
        .map(|(s, d)| 1.0 - (-s * d).exp())
        .collect();
    let far = composite(&alphas);
    let mut out = close;
    for (w, c) in far.weights.iter().zip(&rgb) {
        for k in 0..3 {
            out[k] += remaining * w * c[k];
        }
    }
    Ok(out.map(|c| c.clamp(0.0, 1.0)))
}

/// Field values and compositing weights along one ray.
pub fn shade_ray(
    field: &SdfField,
    store: &ParamStore,
    samples: &RaySamples,
) -> (CompositingWeights, Vec<Vec<f64>>) {
    let mut sdf = Vec::with_capacity(samples.len());
    let mut feats = Vec::with_capacity(samples.len());
    for p in &samples.points {
        let (s, f) = field.query(store, p);
        sdf.push(s);
        feats.push(f);
    }
    let alphas = sdf_to_alpha(&sdf, &samples.deltas, field.sharpness(store));
    (composite(&alphas), feats)
}

/// A camera pose on the tape: row-major world-from-camera rotation and
/// translation.
#[derive(Clone, Copy, Debug)]
pub struct PoseTape {
    pub rotation: Var,
    pub translation: Var,
}

/// Records `pose` on the tape. With `delta = Some(block)` the pose becomes a
/// function of the 6-vector block `[ω; ρ]` through the left perturbation
/// `exp(ε) ∘ pose` with `ε = block − current block value`, linearized at
/// `ε = 0`; derivatives are exact there.
pub fn pose_graph(g: &mut Graph<'_>, pose: &SE3Pose, delta: Option<BlockId>) -> PoseTape {
    let r = pose.rotation_matrix();
    let t = pose.translation;
    let r_rows: Vec<f64> = (0..3).flat_map(|a| (0..3).map(move |b| r[(a, b)])).collect();
    let r0 = g.constant(&r_rows);
    let t0 = g.constant(t.as_slice());
    let Some(block) = delta else {
        return PoseTape {
            rotation: r0,
            translation: t0,
        };
    };
    let current = g.params().values(block).to_vec();
    let p = g.param(block, 0, 6);
    let c = g.constant(&current);
    let eps = g.sub(p, c);
    let omega = g.slice(eps, 0, 3);
    let rho = g.slice(eps, 3, 3);
    // vec(hat(ω) R) = L ω and ω × t = −hat(t) ω
    let mut l = vec![0.0; 27];
    for k in 0..3 {
        let hr: Mat3 = hat(&Vec3::ith(k, 1.0)) * r;
        for a in 0..3 {
            for b in 0..3 {
                l[(a * 3 + b) * 3 + k] = hr[(a, b)];
            }
        }
    }
    let lm = g.constant(&l);
    let dr = g.mat_rows(lm, omega, 3);
    let ht = -hat(&t);
    let ht_rows: Vec<f64> = (0..3).flat_map(|a| (0..3).map(move |b| ht[(a, b)])).collect();
    let htm = g.constant(&ht_rows);
    let dt = g.mat_rows(htm, omega, 3);
    let rotation = g.add(r0, dr);
    let t1 = g.add(t0, dt);
    let translation = g.add(t1, rho);
    PoseTape {
        rotation,
        translation,
    }
}

/// Rays of one source frame, with their samples.
#[derive(Clone, Debug)]
pub struct RayChunk {
    pub intrinsics: CameraIntrinsics,
    pub pixels: Vec<Vec2>,
    pub samples: Vec<RaySamples>,
    /// Distant shell samples per ray; required only for color.
    pub shells: Vec<ShellSamples>,
}

impl RayChunk {
    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    /// Sample offsets: ray `r` owns samples `offsets[r]..offsets[r + 1]`.
    pub fn offsets(&self) -> Vec<usize> {
        let mut o = Vec::with_capacity(self.samples.len() + 1);
        o.push(0);
        for s in &self.samples {
            o.push(o.last().unwrap() + s.len());
        }
        o
    }
}

/// Which quantities [`render_chunk_graph`] records.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RenderRequest {
    pub flow: bool,
    pub disparity: bool,
    pub color: bool,
}

/// Graph-local handles for the fields used in rendering.
#[derive(Clone, Copy, Debug)]
pub struct RenderTape {
    pub field: FieldTape,
    pub distant_gather: Option<usize>,
}

impl RenderTape {
    pub fn new(g: &mut Graph<'_>, field: &SdfField, distant: Option<&DistantField>) -> Self {
        Self {
            field: field.tape(g),
            distant_gather: distant.map(|d| g.register_gather(d.layout.clone())),
        }
    }
}

/// Per-ray outputs of a chunk (one entry per ray in each node).
#[derive(Clone, Debug)]
pub struct ChunkOutputs {
    pub flow: Option<[Var; 2]>,
    pub disparity: Option<Var>,
    pub depth: Var,
    pub opacity: Var,
    pub color: Option<[Var; 3]>,
    /// World positions of all samples, in chunk order.
    pub points: Vec<Vec3>,
}

pub struct ChunkModels<'a> {
    pub field: &'a SdfField,
    pub color: Option<&'a ColorHead>,
    pub distant: Option<&'a DistantField>,
}

/// Records rendering of every ray in `chunk`. Sample depths are constants;
/// sample positions depend on the source pose. Flow is rendered into the
/// target camera `target = (pose, intrinsics)`.
pub fn render_chunk_graph(
    g: &mut Graph<'_>,
    tape: &RenderTape,
    models: &ChunkModels<'_>,
    chunk: &RayChunk,
    pose_j: &PoseTape,
    target: Option<(&PoseTape, &CameraIntrinsics)>,
    request: RenderRequest,
) -> Result<ChunkOutputs> {
    let rays = chunk.len();
    let offsets = chunk.offsets();
    let total = *offsets.last().unwrap();
    let kinv = chunk.intrinsics.inverse_matrix();

    let mut q_unit = Vec::with_capacity(3 * rays);
    let mut ray_of = Vec::with_capacity(total);
    let mut depth3 = Vec::with_capacity(3 * total);
    let mut depths = Vec::with_capacity(total);
    let mut inv_z = Vec::with_capacity(total);
    let mut next_a = Vec::with_capacity(total);
    let mut next_b = Vec::with_capacity(total);
    let mut next_c = Vec::with_capacity(total);
    let mut next_k = Vec::with_capacity(total);
    for (r, (px, s)) in chunk.pixels.iter().zip(&chunk.samples).enumerate() {
        let q = kinv * Vec3::new(px.x, px.y, 1.0);
        let norm = q.norm();
        q_unit.extend_from_slice((q / norm).as_slice());
        let cos = 1.0 / norm;
        let base = offsets[r];
        let n = s.len();
        for i in 0..n {
            ray_of.push(r);
            let d = s.depths[i];
            depth3.extend_from_slice(&[d, d, d]);
            depths.push(d);
            inv_z.push(1.0 / (d * cos));
            let idx = base + i;
            if i + 1 < n {
                next_a.push(idx + 1);
                next_b.push(idx);
                next_c.push(idx);
                next_k.push(0.0);
            } else if n >= 2 {
                next_a.push(idx);
                next_b.push(idx);
                next_c.push(idx - 1);
                next_k.push(s.deltas[i] / s.deltas[i - 1]);
            } else {
                next_a.push(idx);
                next_b.push(idx);
                next_c.push(idx);
                next_k.push(0.0);
            }
        }
    }

    let zero = g.constant(&vec![0.0; rays]);
    if total == 0 {
        return Ok(ChunkOutputs {
            flow: if request.flow {
                let pu: Vec<f64> = chunk.pixels.iter().map(|p| -p.x).collect();
                let pv: Vec<f64> = chunk.pixels.iter().map(|p| -p.y).collect();
                Some([g.constant(&pu), g.constant(&pv)])
            } else {
                None
            },
            disparity: request.disparity.then_some(zero),
            depth: zero,
            opacity: zero,
            color: None,
            points: Vec::new(),
        });
    }

    // sample positions x = C_j + d · R_j q̂
    let qv = g.constant(&q_unit);
    let dirs = g.mat_rows(pose_j.rotation, qv, 3);
    let dir_s = g.index(dirs, &ray_of, 3);
    let dconst = g.constant(&depth3);
    let along = g.mul(dir_s, dconst);
    let origin = g.tile(pose_j.translation, total);
    let x = g.add(origin, along);
    let points: Vec<Vec3> = g
        .value(x)
        .chunks_exact(3)
        .map(|c| Vec3::new(c[0], c[1], c[2]))
        .collect();

    let (sdf, feat) = models.field.query_graph(g, &tape.field, x);
    let sa = g.index(sdf, &next_a, 1);
    let sb = g.index(sdf, &next_b, 1);
    let sc = g.index(sdf, &next_c, 1);
    let slope = g.sub(sb, sc);
    let kc = g.constant(&next_k);
    let ext = g.mul(slope, kc);
    let s_next = g.add(sa, ext);

    let sharp = models.field.sharpness_graph(g);
    let sharp = g.tile(sharp, total);
    let a = g.mul(sharp, sdf);
    let b = g.mul(sharp, s_next);
    let na = g.neg(a);
    let nb = g.neg(b);
    let spa = g.softplus(na, 1.0);
    let spb = g.softplus(nb, 1.0);
    let log_ratio = g.sub(spa, spb);
    let log_ratio = g.clamp(log_ratio, f64::NEG_INFINITY, 0.0);
    let ratio = g.exp(log_ratio);
    let one_minus = g.neg(ratio);
    let alpha = g.offset(one_minus, 1.0);
    let alpha = g.clamp(alpha, 0.0, 1.0);
    let keep = g.neg(alpha);
    let keep = g.offset(keep, 1.0);
    let trans = g.seg_cumprod_exclusive(keep, &offsets);
    let w = g.mul(trans, alpha);
    let opacity = g.seg_sum(w, &offsets);
    let dc = g.constant(&depths);
    let wd = g.mul(w, dc);
    let depth = g.seg_sum(wd, &offsets);

    let disparity = if request.disparity {
        let b = chunk.intrinsics.baseline.ok_or(Error::MissingBaseline)?;
        let fb = chunk.intrinsics.fx * b;
        let disp: Vec<f64> = inv_z.iter().map(|iz| fb * iz).collect();
        let dv = g.constant(&disp);
        let wdisp = g.mul(w, dv);
        Some(g.seg_sum(wdisp, &offsets))
    } else {
        None
    };

    let flow = if request.flow {
        let (pose_k, k) = target.ok_or_else(|| Error::InvalidConfig("flow needs a target frame".into()))?;
        let rt = g.index(pose_k.rotation, &[0, 3, 6, 1, 4, 7, 2, 5, 8], 1);
        let ck = g.tile(pose_k.translation, total);
        let rel = g.sub(x, ck);
        let y = g.mat_rows(rt, rel, 3);
        let yx = g.columns(y, 3, 0, 1);
        let yy = g.columns(y, 3, 1, 1);
        let yz = g.columns(y, 3, 2, 1);
        let ux = g.div(yx, yz);
        let uy = g.div(yy, yz);
        let ux = g.scale(ux, k.fx);
        let ux = g.offset(ux, k.cx);
        let uy = g.scale(uy, k.fy);
        let uy = g.offset(uy, k.cy);
        let wx = g.mul(w, ux);
        let wy = g.mul(w, uy);
        let fx = g.seg_sum(wx, &offsets);
        let fy = g.seg_sum(wy, &offsets);
        let px: Vec<f64> = chunk.pixels.iter().map(|p| p.x).collect();
        let py: Vec<f64> = chunk.pixels.iter().map(|p| p.y).collect();
        let pxv = g.constant(&px);
        let pyv = g.constant(&py);
        Some([g.sub(fx, pxv), g.sub(fy, pyv)])
    } else {
        None
    };

    let color = if request.color {
        let (Some(head), Some(distant), Some(dg)) = (models.color, models.distant, tape.distant_gather) else {
            return Err(Error::MissingColorModel);
        };
        let c = head.query_graph(g, dir_s, feat);
        let mut close = [zero; 3];
        for (ch, out) in close.iter_mut().enumerate() {
            let cc = g.columns(c, 3, ch, 1);
            let wc = g.mul(w, cc);
            *out = g.seg_sum(wc, &offsets);
        }
        let remaining = g.neg(opacity);
        let remaining = g.offset(remaining, 1.0);
        let remaining = g.clamp(remaining, 0.0, 1.0);
        let mut shell_offsets = vec![0usize];
        let mut warped = Vec::new();
        let mut deltas = Vec::new();
        for s in &chunk.shells {
            warped.extend_from_slice(&s.warped);
            deltas.extend_from_slice(&s.deltas);
            shell_offsets.push(warped.len());
        }
        if chunk.shells.len() != rays {
            return Err(Error::DimensionMismatch(format!(
                "{} shell lists for {rays} rays",
                chunk.shells.len()
            )));
        }
        let mut out = close;
        if !warped.is_empty() {
            let (sigma, rgb) = distant.query_graph(g, dg, &warped);
            let dv = g.constant(&deltas);
            let sd = g.mul(sigma, dv);
            let nsd = g.neg(sd);
            let keep_far = g.exp(nsd);
            let one = g.neg(keep_far);
            let alpha_far = g.offset(one, 1.0);
            let t_far = g.seg_cumprod_exclusive(keep_far, &shell_offsets);
            let w_far = g.mul(t_far, alpha_far);
            for (ch, o) in out.iter_mut().enumerate() {
                let cc = g.columns(rgb, 3, ch, 1);
                let wc = g.mul(w_far, cc);
                let far = g.seg_sum(wc, &shell_offsets);
                let far = g.mul(remaining, far);
                let sum = g.add(*o, far);
                *o = g.clamp(sum, 0.0, 1.0);
            }
        }
        Some(out)
    } else {
        None
    };

    Ok(ChunkOutputs {
        flow,
        disparity,
        depth,
        opacity,
        color,
        points,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{check_gradients_at, Category, Gradients};
    use crate::field::{ColorHeadConfig, DistantFieldConfig, HashGridConfig, SdfFieldConfig};
    use crate::geometry::{cast_ray, se3_exp, Aabb};
    use crate::sampling::sample_distant;
    use approx::assert_abs_diff_eq;
    use nalgebra::UnitQuaternion;

    #[test]
    fn alpha_goldens() {
        let a = sdf_to_alpha(&[0.05, -0.05], &[0.1, 0.1], 10.0);
        let phi = |x: f64| 1.0 / (1.0 + (-x).exp());
        assert_abs_diff_eq!(a[0], (phi(0.5) - phi(-0.5)) / phi(0.5), epsilon = 1e-12);
        assert_abs_diff_eq!(a[0], 0.393469, epsilon = 1e-6);
        let inc = sdf_to_alpha(&[0.1, 0.2, 0.3], &[0.1; 3], 50.0);
        assert!(inc.iter().all(|&x| x == 0.0));
        let sat = sdf_to_alpha(&[0.1, -0.1], &[0.2, 0.2], 1e4);
        assert!(sat[0] > 1.0 - 1e-12);
        let deep = sdf_to_alpha(&[-50.0, -60.0, 40.0], &[0.1; 3], 1e3);
        assert!(deep.iter().all(|a| a.is_finite() && (0.0..=1.0).contains(a)));
        // a lone sample has no slope to extrapolate
        assert_eq!(sdf_to_alpha(&[0.0], &[0.1], 10.0), vec![0.0]);
    }

    #[test]
    fn composite_goldens() {
        let c = composite(&[1.0]);
        assert_eq!((c.weights.clone(), c.opacity), (vec![1.0], 1.0));
        let c = composite(&[0.5, 0.5]);
        assert_eq!(c.weights, vec![0.5, 0.25]);
        assert_eq!(c.opacity, 0.75);
        assert_eq!(c.final_transmittance, 0.25);
        assert_eq!(composite(&[]).opacity, 0.0);
        assert_eq!(render_opacity(&composite(&[0.5, 0.5]).weights), 0.75);
    }

    fn intr(baseline: Option<f64>) -> CameraIntrinsics {
        CameraIntrinsics::new(100.0, 100.0, 48.0, 32.0, 96, 64, baseline).unwrap()
    }

    fn samples_at(ray: &Ray, depths: &[f64]) -> RaySamples {
        RaySamples::from_depths(ray, depths.to_vec(), depths.last().unwrap() + 1.0)
    }

    #[test]
    fn depth_and_disparity_goldens() {
        let f = Frame::new(0, intr(Some(0.5)), SE3Pose::identity());
        let ray = cast_ray(&f, &Vec2::new(48.0, 32.0)).unwrap();
        let s = samples_at(&ray, &[10.0]);
        assert_abs_diff_eq!(render_disparity(&s, &[1.0], &f.intrinsics).unwrap(), 5.0, epsilon = 1e-12);
        assert_eq!(render_disparity(&s, &[0.0], &f.intrinsics).unwrap(), 0.0);
        assert!(matches!(
            render_disparity(&s, &[1.0], &intr(None)),
            Err(Error::MissingBaseline)
        ));
        assert_eq!(render_depth(&samples_at(&ray, &[3.0]), &[1.0]), 3.0);
        assert_eq!(render_depth(&samples_at(&ray, &[2.0, 4.0]), &[0.5, 0.25]), 2.0);
        let s2 = samples_at(&ray, &[4.0, 8.0]);
        let s1 = samples_at(&ray, &[2.0, 4.0]);
        let w = [0.3, 0.6];
        let d1 = render_disparity(&s1, &w, &f.intrinsics).unwrap();
        let d2 = render_disparity(&s2, &w, &f.intrinsics).unwrap();
        assert_abs_diff_eq!(d2, 0.5 * d1, epsilon = 1e-12);
        let depth = render_depth(&s, &[1.0]);
        assert_abs_diff_eq!(render_disparity(&s, &[1.0], &f.intrinsics).unwrap(), 50.0 / depth, epsilon = 1e-9);
    }

    fn pair() -> (Frame, Frame) {
        let fj = Frame::new(0, intr(None), SE3Pose::identity());
        let pk = se3_exp(&[0.01, -0.02, 0.015, 0.3, -0.05, 0.1]);
        (fj, Frame::new(1, intr(None), pk))
    }

    #[test]
    fn flow_identity_and_delta_weight() {
        let (fj, fk) = pair();
        let ray = cast_ray(&fj, &Vec2::new(20.5, 40.5)).unwrap();
        let s = samples_at(&ray, &[3.0, 4.0]);
        let f = render_flow(&ray, &s, &[1.0, 0.0], &fj, &fj).unwrap();
        assert!(f.norm() < 1e-9);
        let f = render_flow(&ray, &s, &[0.25, 0.25], &fj, &fj).unwrap();
        assert!((f - (0.5 - 1.0) * ray.pixel).norm() < 1e-9);
        let f = render_flow(&ray, &s, &[1.0, 0.0], &fj, &fk).unwrap();
        let pk = crate::geometry::project(&ray.at(3.0), &fk).unwrap();
        assert!((f - (pk - ray.pixel)).norm() < 1e-9);
    }

    #[test]
    fn flow_matches_per_sample_projection() {
        let (fj, fk) = pair();
        let ray = cast_ray(&fj, &Vec2::new(70.5, 10.5)).unwrap();
        let s = samples_at(&ray, &[2.0, 5.0]);
        let w = [0.5, 0.25];
        let f = render_flow(&ray, &s, &w, &fj, &fk).unwrap();
        let mut acc = Vec2::zeros();
        for (d, wi) in s.depths.iter().zip(&w) {
            acc += *wi * crate::geometry::project(&ray.at(*d), &fk).unwrap();
        }
        assert!((f - (acc - ray.pixel)).norm() < 1e-9);
    }

    struct Models {
        store: ParamStore,
        field: SdfField,
        color: ColorHead,
        distant: DistantField,
        poses: [BlockId; 2],
    }

    fn models() -> Models {
        let bbox = Aabb::new(Vec3::new(-2.0, -2.0, 0.5), Vec3::new(2.0, 2.0, 6.0)).unwrap();
        let mut cfg = SdfFieldConfig::new(bbox);
        cfg.grid = HashGridConfig {
            level_count: 3,
            base_resolution: 4,
            per_level_scale: 2.0,
            table_size_log2: 10,
            feature_dim: 2,
        };
        cfg.hidden_width = 16;
        cfg.feature_len = 4;
        let mut store = ParamStore::new();
        let field = SdfField::new(cfg, &mut store, 3).unwrap();
        let color = ColorHead::new(&ColorHeadConfig { hidden_width: 8 }, 4, &mut store, 4).unwrap();
        let dcfg = DistantFieldConfig {
            grid: HashGridConfig {
                level_count: 2,
                base_resolution: 4,
                per_level_scale: 2.0,
                table_size_log2: 10,
                feature_dim: 2,
            },
            hidden_width: 8,
        };
        let distant = DistantField::new(&dcfg, &mut store, 5).unwrap();
        let p0 = store.add("pose.0", Category::Pose, vec![6], vec![0.0; 6]).unwrap();
        let p1 = store.add("pose.1", Category::Pose, vec![6], vec![0.0; 6]).unwrap();
        let ls = store.id(SdfField::SHARPNESS).unwrap();
        store.values_mut(ls)[0] = 3.0f64.ln();
        Models {
            store,
            field,
            color,
            distant,
            poses: [p0, p1],
        }
    }

    fn chunk_for(fj: &Frame, m: &Models, pixels: &[Vec2], close: &Aabb) -> (RayChunk, Vec<Ray>) {
        let mut samples = Vec::new();
        let mut shells = Vec::new();
        let mut rays = Vec::new();
        for (i, p) in pixels.iter().enumerate() {
            let ray = cast_ray(fj, p).unwrap();
            let n = 3 + i % 4;
            let depths: Vec<f64> = (0..n).map(|k| 1.0 + 0.37 * k as f64 + 0.05 * i as f64).collect();
            let mut s = RaySamples::from_depths(&ray, depths, 4.0 + 0.05 * i as f64);
            s.axial_cos = ray.direction.dot(&fj.principal_axis());
            samples.push(s);
            shells.push(sample_distant(&ray, close, 3, 8.0).unwrap());
            rays.push(ray);
        }
        let _ = m;
        (
            RayChunk {
                intrinsics: fj.intrinsics,
                pixels: pixels.to_vec(),
                samples,
                shells,
            },
            rays,
        )
    }

    fn test_pixels() -> Vec<Vec2> {
        (0..7)
            .map(|i| Vec2::new(10.5 + 11.0 * i as f64, 5.5 + 8.0 * i as f64))
            .collect()
    }

    #[test]
    fn chunk_graph_matches_per_ray_rendering() {
        let m = models();
        let fj = Frame::new(
            0,
            intr(Some(0.4)),
            SE3Pose::new(UnitQuaternion::from_euler_angles(0.02, -0.01, 0.03), Vec3::new(0.1, 0.0, 0.0)),
        );
        let fk = Frame::new(1, intr(Some(0.4)), se3_exp(&[0.01, 0.02, -0.01, 0.25, 0.0, 0.1]));
        let close = Aabb::new(Vec3::new(-3.0, -3.0, -1.0), Vec3::new(3.0, 3.0, 7.0)).unwrap();
        let (chunk, rays) = chunk_for(&fj, &m, &test_pixels(), &close);
        let mut g = Graph::new(&m.store);
        let tape = RenderTape::new(&mut g, &m.field, Some(&m.distant));
        let pj = pose_graph(&mut g, &fj.effective_pose(), Some(m.poses[0]));
        let pk = pose_graph(&mut g, &fk.effective_pose(), Some(m.poses[1]));
        let models = ChunkModels {
            field: &m.field,
            color: Some(&m.color),
            distant: Some(&m.distant),
        };
        let req = RenderRequest {
            flow: true,
            disparity: true,
            color: true,
        };
        let out = render_chunk_graph(&mut g, &tape, &models, &chunk, &pj, Some((&pk, &fk.intrinsics)), req).unwrap();
        let [fu, fv] = out.flow.unwrap();
        let col = out.color.unwrap();
        let mut saw_opacity = false;
        for (r, ray) in rays.iter().enumerate() {
            let s = &chunk.samples[r];
            let (cw, feats) = shade_ray(&m.field, &m.store, s);
            saw_opacity |= cw.opacity > 0.05;
            let f = render_flow(ray, s, &cw.weights, &fj, &fk).unwrap();
            assert_abs_diff_eq!(g.value(fu)[r], f.x, epsilon = 1e-8);
            assert_abs_diff_eq!(g.value(fv)[r], f.y, epsilon = 1e-8);
            let d = render_disparity(s, &cw.weights, &fj.intrinsics).unwrap();
            assert_abs_diff_eq!(g.value(out.disparity.unwrap())[r], d, epsilon = 1e-9);
            assert_abs_diff_eq!(g.value(out.depth)[r], render_depth(s, &cw.weights), epsilon = 1e-9);
            assert_abs_diff_eq!(g.value(out.opacity)[r], cw.opacity, epsilon = 1e-12);
            let c = render_color(
                ray,
                &cw.weights,
                &feats,
                &chunk.shells[r],
                Some(&m.color),
                Some(&m.distant),
                &m.store,
            )
            .unwrap();
            for k in 0..3 {
                assert_abs_diff_eq!(g.value(col[k])[r], c[k], epsilon = 1e-9);
            }
        }
        assert!(saw_opacity);
    }

    #[test]
    fn color_composites_as_one_list() {
        let m = models();
        let f = Frame::new(0, intr(None), SE3Pose::identity());
        let ray = cast_ray(&f, &Vec2::new(30.5, 20.5)).unwrap();
        let close = Aabb::new(Vec3::new(-3.0, -3.0, -1.0), Vec3::new(3.0, 3.0, 7.0)).unwrap();
        let shells = sample_distant(&ray, &close, 4, 8.0).unwrap();
        let feats = vec![vec![0.1, -0.2, 0.3, 0.0]; 2];
        let alphas_close = [0.3, 0.4];
        let cw = composite(&alphas_close);
        let got = render_color(&ray, &cw.weights, &feats, &shells, Some(&m.color), Some(&m.distant), &m.store).unwrap();
        // joint list oracle
        let mut alphas = alphas_close.to_vec();
        let mut colors = Vec::new();
        for z in &feats {
            colors.push(m.color.query(&m.store, &ray.direction, z).unwrap());
        }
        for (x, d) in shells.warped.iter().zip(&shells.deltas) {
            let (s, c) = m.distant.query(&m.store, x);
            alphas.push(1.0 - (-s * d).exp());
            colors.push(c);
        }
        let joint = composite(&alphas);
        for k in 0..3 {
            let want: f64 = joint.weights.iter().zip(&colors).map(|(w, c)| w * c[k]).sum();
            assert_abs_diff_eq!(got[k], want, epsilon = 1e-12);
        }
        // opaque close range hides the distant shells
        let opaque = render_color(&ray, &[1.0, 0.0], &feats, &shells, Some(&m.color), Some(&m.distant), &m.store).unwrap();
        let c0 = m.color.query(&m.store, &ray.direction, &feats[0]).unwrap();
        for k in 0..3 {
            assert_abs_diff_eq!(opaque[k], c0[k], epsilon = 1e-15);
        }
        // no close samples: distant only
        let far = render_color(&ray, &[], &[], &shells, Some(&m.color), Some(&m.distant), &m.store).unwrap();
        let far_joint = composite(&alphas[2..]);
        for k in 0..3 {
            let want: f64 = far_joint.weights.iter().zip(&colors[2..]).map(|(w, c)| w * c[k]).sum();
            assert_abs_diff_eq!(far[k], want, epsilon = 1e-12);
        }
        assert!(matches!(
            render_color(&ray, &[], &[], &shells, None, Some(&m.distant), &m.store),
            Err(Error::MissingColorModel)
        ));
    }

    #[test]
    fn chunk_gradients_match_finite_differences() {
        let m = models();
        let fj = Frame::new(0, intr(Some(0.4)), SE3Pose::identity());
        let fk = Frame::new(1, intr(Some(0.4)), se3_exp(&[0.01, 0.02, -0.01, 0.25, 0.0, 0.1]));
        let close = Aabb::new(Vec3::new(-3.0, -3.0, -1.0), Vec3::new(3.0, 3.0, 7.0)).unwrap();
        let (chunk, _) = chunk_for(&fj, &m, &test_pixels(), &close);
        let [p0, p1] = m.poses;
        let weights: Vec<f64> = (0..chunk.len()).map(|i| 0.3 + 0.1 * i as f64).collect();
        let loss = |store: &ParamStore| -> Result<(f64, Gradients)> {
            // the forward pose is exp(δ) ∘ pose, evaluated exactly
            let mut fj2 = fj.clone();
            let mut fk2 = fk.clone();
            fj2.pose_delta.copy_from_slice(store.values(p0));
            fk2.pose_delta.copy_from_slice(store.values(p1));
            let mut g = Graph::new(store);
            let tape = RenderTape::new(&mut g, &m.field, Some(&m.distant));
            let pj = pose_graph(&mut g, &fj2.effective_pose(), Some(p0));
            let pk = pose_graph(&mut g, &fk2.effective_pose(), Some(p1));
            let models = ChunkModels {
                field: &m.field,
                color: Some(&m.color),
                distant: Some(&m.distant),
            };
            let req = RenderRequest {
                flow: true,
                disparity: true,
                color: true,
            };
            let out = render_chunk_graph(&mut g, &tape, &models, &chunk, &pj, Some((&pk, &fk.intrinsics)), req)?;
            let [fu, fv] = out.flow.unwrap();
            let wv = g.constant(&weights);
            let a = g.dot(fu, wv);
            let b = g.dot(fv, wv);
            let c = g.dot(out.disparity.unwrap(), wv);
            let d = g.dot(out.color.unwrap()[1], wv);
            let e = g.dot(out.depth, wv);
            let ab = g.add(a, b);
            let cd = g.add(c, d);
            let abcd = g.add(ab, cd);
            let total = g.add(abcd, e);
            Ok((g.scalar(total), g.backward(total)?))
        };
        let (_, grads) = loss(&m.store).unwrap();
        // the largest-gradient entries of every block, plus every pose coordinate
        let mut coords = Vec::new();
        for (id, blk) in m.store.blocks().iter().enumerate() {
            let gb = grads.get(id);
            let mut idx: Vec<usize> = (0..gb.len()).collect();
            idx.sort_by(|&a, &b| gb[b].abs().total_cmp(&gb[a].abs()));
            let take = if blk.category == Category::Pose { 6 } else { 3 };
            coords.extend(
                idx.into_iter()
                    .take(take)
                    .filter(|&i| gb[i].abs() > 1e-4)
                    .map(|i| (id, i)),
            );
        }
        assert!(coords.len() > 40);
        let rep = check_gradients_at(loss, &m.store, 1e-6, &coords).unwrap();
        assert!(rep.max_rel_error < 1e-4, "{rep:?}");
    }
}
