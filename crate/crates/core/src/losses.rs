//! Loss terms and their weighted combination.
//!
//! All terms use mean reduction. Plain functions evaluate on values; the
//! `*_graph` variants record per-chunk contributions already divided by the
//! batch-wide count, so chunk objectives add up to the batch objective.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamStore, Var};
use crate::error::{Error, Result};
use crate::field::{FieldTape, SdfField};
use crate::geometry::{Vec2, Vec3};

pub const ENTROPY_EPS: f64 = 1e-6;

/// Keeps `sqrt` differentiable at an exact-zero residual.
const NORM_EPS2: f64 = 1e-18;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub lambda_disparity: f64,
    pub lambda_eikonal: f64,
    pub lambda_sparsity: f64,
    pub lambda_entropy: f64,
    pub tau: f64,
    pub lambda_photo: f64,
    pub use_disparity: bool,
    pub use_photometric: bool,
    /// Also supervise `k → j` for every flow pair `j → k`.
    pub bidirectional_flow: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_disparity: 1.0,
            lambda_eikonal: 0.1,
            lambda_sparsity: 0.01,
            lambda_entropy: 0.01,
            tau: 10.0,
            lambda_photo: 1.0,
            use_disparity: true,
            use_photometric: false,
            bidirectional_flow: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let w = [
            self.lambda_disparity,
            self.lambda_eikonal,
            self.lambda_sparsity,
            self.lambda_entropy,
            self.lambda_photo,
        ];
        if w.iter().any(|x| !(*x >= 0.0)) {
            return Err(Error::InvalidConfig("loss weights must be nonnegative".into()));
        }
        if !(self.tau > 0.0) {
            return Err(Error::InvalidConfig("tau must be positive".into()));
        }
        Ok(())
    }
}

/// Deterministic pairwise (tree) summation.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    match values.len() {
        0 => 0.0,
        1 => values[0],
        n if n <= 8 => values.iter().sum(),
        n => {
            let (a, b) = values.split_at(n / 2);
            pairwise_sum(a) + pairwise_sum(b)
        }
    }
}

fn masked_mean(residuals: impl Iterator<Item = (f64, bool)>) -> Result<(f64, usize)> {
    let vals: Vec<f64> = residuals.filter(|(_, m)| *m).map(|(r, _)| r).collect();
    if vals.is_empty() {
        return Err(Error::EmptyBatch);
    }
    Ok((pairwise_sum(&vals) / vals.len() as f64, vals.len()))
}

fn check_counts(a: usize, b: usize, c: usize) -> Result<()> {
    if a != b || a != c {
        return Err(Error::DimensionMismatch(format!("{a} rendered, {b} targets, {c} masks")));
    }
    Ok(())
}

/// Mean Euclidean norm of the flow residual over valid rays.
pub fn flow_loss(rendered: &[Vec2], targets: &[Vec2], masks: &[bool]) -> Result<f64> {
    check_counts(rendered.len(), targets.len(), masks.len())?;
    masked_mean(
        rendered
            .iter()
            .zip(targets)
            .zip(masks)
            .map(|((r, t), &m)| ((r - t).norm(), m)),
    )
    .map(|x| x.0)
}

/// Mean absolute disparity residual over valid rays.
pub fn disparity_loss(rendered: &[f64], targets: &[f64], masks: &[bool]) -> Result<f64> {
    check_counts(rendered.len(), targets.len(), masks.len())?;
    masked_mean(
        rendered
            .iter()
            .zip(targets)
            .zip(masks)
            .map(|((r, t), &m)| ((r - t).abs(), m)),
    )
    .map(|x| x.0)
}

/// Mean Euclidean norm of the rgb residual over valid rays.
pub fn photometric_loss(rendered: &[[f64; 3]], targets: &[[f64; 3]], masks: &[bool]) -> Result<f64> {
    check_counts(rendered.len(), targets.len(), masks.len())?;
    masked_mean(rendered.iter().zip(targets).zip(masks).map(|((r, t), &m)| {
        let d: f64 = (0..3).map(|k| (r[k] - t[k]).powi(2)).sum();
        (d.sqrt(), m)
    }))
    .map(|x| x.0)
}

/// Mean of `(‖∇s(x)‖ − 1)²`.
pub fn eikonal_loss(field: &SdfField, store: &ParamStore, points: &[Vec3]) -> Result<f64> {
    if points.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let v: Vec<f64> = points
        .iter()
        .map(|p| (field.sdf_gradient(store, p).norm() - 1.0).powi(2))
        .collect();
    Ok(pairwise_sum(&v) / v.len() as f64)
}

/// Mean of `exp(−τ |s(x)|)`.
pub fn sparsity_loss(field: &SdfField, store: &ParamStore, points: &[Vec3], tau: f64) -> Result<f64> {
    if points.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let v: Vec<f64> = points
        .iter()
        .map(|p| (-tau * field.sdf(store, p).abs()).exp())
        .collect();
    Ok(pairwise_sum(&v) / v.len() as f64)
}

/// `−(x ln x + (1 − x) ln(1 − x))` on `x` clamped to `[ε, 1 − ε]`.
pub fn entropy(x: f64) -> f64 {
    let x = x.clamp(ENTROPY_EPS, 1.0 - ENTROPY_EPS);
    -(x * x.ln() + (1.0 - x) * (1.0 - x).ln())
}

/// Mean binary entropy of the ray opacities (0 for an empty batch).
pub fn entropy_loss(opacities: &[f64]) -> f64 {
    if opacities.is_empty() {
        return 0.0;
    }
    let v: Vec<f64> = opacities.iter().map(|&o| entropy(o)).collect();
    pairwise_sum(&v) / v.len() as f64
}

/// Unweighted term values. Disabled terms are `None`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossTerms {
    pub flow: f64,
    pub disparity: Option<f64>,
    pub eikonal: f64,
    pub sparsity: f64,
    pub entropy: f64,
    pub photometric: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossCounts {
    pub flow_rays: usize,
    pub disparity_rays: usize,
    pub regularizer_points: usize,
    pub entropy_rays: usize,
    pub color_rays: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossReport {
    pub terms: LossTerms,
    pub counts: LossCounts,
    pub total: f64,
}

/// `L_f + λ1 L_d + λ2 L_eik + λ3 L_spa + λ4 L_ent (+ λ_photo L_photo)`.
pub fn total_loss(terms: &LossTerms, counts: LossCounts, config: &LossConfig) -> Result<LossReport> {
    let named = [
        ("flow", Some(terms.flow)),
        ("disparity", terms.disparity),
        ("eikonal", Some(terms.eikonal)),
        ("sparsity", Some(terms.sparsity)),
        ("entropy", Some(terms.entropy)),
        ("photometric", terms.photometric),
    ];
    for (name, v) in named {
        if v.is_some_and(|x| !x.is_finite()) {
            return Err(Error::NonFiniteTerm(name));
        }
    }
    let mut total = terms.flow;
    if config.use_disparity {
        if let Some(d) = terms.disparity {
            total += config.lambda_disparity * d;
        }
    }
    total += config.lambda_eikonal * terms.eikonal;
    total += config.lambda_sparsity * terms.sparsity;
    total += config.lambda_entropy * terms.entropy;
    if config.use_photometric {
        if let Some(p) = terms.photometric {
            total += config.lambda_photo * p;
        }
    }
    Ok(LossReport {
        terms: terms.clone(),
        counts,
        total,
    })
}

impl LossReport {
    /// One structured log line.
    pub fn log_line(&self, iteration: usize) -> String {
        format!("iter={iteration} {self}")
    }
}

impl fmt::Display for LossReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let t = &self.terms;
        write!(f, "flow={:.6e}", t.flow)?;
        if let Some(d) = t.disparity {
            write!(f, " disparity={d:.6e}")?;
        }
        write!(
            f,
            " eikonal={:.6e} sparsity={:.6e} entropy={:.6e}",
            t.eikonal, t.sparsity, t.entropy
        )?;
        if let Some(p) = t.photometric {
            write!(f, " photometric={p:.6e}")?;
        }
        write!(f, " total={:.6e}", self.total)
    }
}

fn smooth_norm(g: &mut Graph<'_>, parts: &[Var]) -> Var {
    let mut acc = g.square(parts[0]);
    for &p in &parts[1..] {
        let sq = g.square(p);
        acc = g.add(acc, sq);
    }
    let acc = g.offset(acc, NORM_EPS2);
    g.sqrt(acc)
}

/// `scale · Σ_valid ‖(u, v) − target‖` for one chunk.
pub fn flow_loss_graph(
    g: &mut Graph<'_>,
    flow: [Var; 2],
    targets: &[Vec2],
    valid: &[usize],
    scale: f64,
) -> Option<Var> {
    if valid.is_empty() {
        return None;
    }
    let u = g.index(flow[0], valid, 1);
    let v = g.index(flow[1], valid, 1);
    let tu: Vec<f64> = valid.iter().map(|&i| targets[i].x).collect();
    let tv: Vec<f64> = valid.iter().map(|&i| targets[i].y).collect();
    let tu = g.constant(&tu);
    let tv = g.constant(&tv);
    let du = g.sub(u, tu);
    let dv = g.sub(v, tv);
    let n = smooth_norm(g, &[du, dv]);
    let s = g.sum(n);
    Some(g.scale(s, scale))
}

pub fn disparity_loss_graph(
    g: &mut Graph<'_>,
    disparity: Var,
    targets: &[f64],
    valid: &[usize],
    scale: f64,
) -> Option<Var> {
    if valid.is_empty() {
        return None;
    }
    let d = g.index(disparity, valid, 1);
    let t: Vec<f64> = valid.iter().map(|&i| targets[i]).collect();
    let t = g.constant(&t);
    let r = g.sub(d, t);
    let a = g.abs(r);
    let s = g.sum(a);
    Some(g.scale(s, scale))
}

pub fn photometric_loss_graph(
    g: &mut Graph<'_>,
    color: [Var; 3],
    targets: &[[f64; 3]],
    valid: &[usize],
    scale: f64,
) -> Option<Var> {
    if valid.is_empty() {
        return None;
    }
    let mut parts = [color[0]; 3];
    for (k, part) in parts.iter_mut().enumerate() {
        let c = g.index(color[k], valid, 1);
        let t: Vec<f64> = valid.iter().map(|&i| targets[i][k]).collect();
        let t = g.constant(&t);
        *part = g.sub(c, t);
    }
    let n = smooth_norm(g, &parts);
    let s = g.sum(n);
    Some(g.scale(s, scale))
}

pub fn entropy_loss_graph(g: &mut Graph<'_>, opacity: Var, scale: f64) -> Var {
    let x = g.clamp(opacity, ENTROPY_EPS, 1.0 - ENTROPY_EPS);
    let lx = g.ln(x);
    let a = g.mul(x, lx);
    let nx = g.neg(x);
    let y = g.offset(nx, 1.0);
    let ly = g.ln(y);
    let b = g.mul(y, ly);
    let ab = g.add(a, b);
    let s = g.sum(ab);
    g.scale(s, -scale)
}

/// Eikonal and sparsity sums over constant points, each scaled.
pub fn regularizers_graph(
    g: &mut Graph<'_>,
    field: &SdfField,
    tape: &FieldTape,
    points: &[Vec3],
    tau: f64,
    eik_scale: f64,
    spa_scale: f64,
) -> Option<(Var, Var)> {
    if points.is_empty() {
        return None;
    }
    let flat: Vec<f64> = points.iter().flat_map(|p| p.iter().copied()).collect();
    let x = g.constant(&flat);
    let grad = field.gradient_graph(g, tape, x);
    let n = smooth_norm(g, &grad);
    let d = g.offset(n, -1.0);
    let sq = g.square(d);
    let eik = g.sum(sq);
    let eik = g.scale(eik, eik_scale);
    let s = field.sdf_graph(g, tape, x);
    let a = g.abs(s);
    let e = g.scale(a, -tau);
    let e = g.exp(e);
    let spa = g.sum(e);
    let spa = g.scale(spa, spa_scale);
    Some((eik, spa))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{check_gradients_at, Gradients};
    use crate::field::{init_to_plane, HashGridConfig, SdfFieldConfig};
    use crate::geometry::{Aabb, Plane};
    use approx::assert_abs_diff_eq;

    #[test]
    fn flow_loss_goldens() {
        let z = Vec2::zeros();
        assert_eq!(flow_loss(&[Vec2::new(1.0, 2.0)], &[Vec2::new(1.0, 2.0)], &[true]).unwrap(), 0.0);
        assert_eq!(flow_loss(&[Vec2::new(3.0, 4.0)], &[z], &[true]).unwrap(), 5.0);
        assert_eq!(flow_loss(&[Vec2::new(3.0, 4.0), z], &[z, z], &[true, true]).unwrap(), 2.5);
        assert!(matches!(flow_loss(&[z], &[z], &[false]), Err(Error::EmptyBatch)));
        assert!(matches!(flow_loss(&[z], &[], &[true]), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn disparity_and_photometric_goldens() {
        assert_eq!(disparity_loss(&[1.0], &[1.0], &[true]).unwrap(), 0.0);
        assert_eq!(disparity_loss(&[-1.0], &[1.0], &[true]).unwrap(), 2.0);
        let r = [1.0, 2.0, -3.0, 0.5];
        let t = [0.0, 2.5, 1.0, 0.5];
        let m = [true, true, false, true];
        assert_abs_diff_eq!(
            disparity_loss(&r, &t, &m).unwrap(),
            (1.0 + 0.5 + 0.0) / 3.0,
            epsilon = 1e-15
        );
        assert_eq!(photometric_loss(&[[0.6, 0.0, 0.8]], &[[0.0; 3]], &[true]).unwrap(), 1.0);
        assert_eq!(photometric_loss(&[[0.2; 3]], &[[0.2; 3]], &[true]).unwrap(), 0.0);
    }

    #[test]
    fn entropy_goldens() {
        assert_abs_diff_eq!(entropy(0.5), std::f64::consts::LN_2, epsilon = 1e-12);
        assert!(entropy(0.0) < 2e-5 && entropy(1.0) < 2e-5);
        for x in [0.1, 0.27, 0.9] {
            assert_abs_diff_eq!(entropy(x), entropy(1.0 - x), epsilon = 1e-15);
        }
        assert_eq!(entropy_loss(&[]), 0.0);
    }

    #[test]
    fn total_loss_goldens() {
        let cfg = LossConfig {
            lambda_disparity: 0.0,
            lambda_eikonal: 0.0,
            lambda_sparsity: 0.0,
            lambda_entropy: 0.0,
            ..LossConfig::default()
        };
        let terms = LossTerms {
            flow: 1.0,
            disparity: Some(0.5),
            eikonal: 3.0,
            sparsity: 0.2,
            entropy: 0.6,
            photometric: None,
        };
        assert_eq!(total_loss(&terms, LossCounts::default(), &cfg).unwrap().total, 1.0);
        let cfg2 = LossConfig {
            lambda_disparity: 2.0,
            ..cfg.clone()
        };
        let t2 = LossTerms {
            eikonal: 0.0,
            sparsity: 0.0,
            entropy: 0.0,
            ..terms.clone()
        };
        assert_eq!(total_loss(&t2, LossCounts::default(), &cfg2).unwrap().total, 2.0);
        let bad = LossTerms {
            eikonal: f64::NAN,
            ..terms
        };
        assert!(matches!(
            total_loss(&bad, LossCounts::default(), &cfg),
            Err(Error::NonFiniteTerm("eikonal"))
        ));
    }

    #[test]
    fn pairwise_sum_is_exact_on_integers() {
        let v: Vec<f64> = (0..1000).map(|i| i as f64).collect();
        assert_eq!(pairwise_sum(&v), 499_500.0);
    }

    fn plane_field(store: &mut ParamStore) -> SdfField {
        let bbox = Aabb::new(Vec3::new(-1.0, -1.0, -1.0), Vec3::new(1.0, 1.0, 1.0)).unwrap();
        let mut cfg = SdfFieldConfig::new(bbox);
        cfg.grid = HashGridConfig {
            level_count: 4,
            base_resolution: 4,
            per_level_scale: 2.0,
            table_size_log2: 12,
            feature_dim: 2,
        };
        cfg.hidden_width = 32;
        let field = SdfField::new(cfg, store, 1).unwrap();
        init_to_plane(&field, store, &Plane::new(Vec3::z(), 0.0), &bbox, 600, 1).unwrap();
        field
    }

    #[test]
    fn regularizers_on_fitted_plane() {
        let mut store = ParamStore::new();
        let field = plane_field(&mut store);
        let pts: Vec<Vec3> = (0..50)
            .map(|i| Vec3::new(-0.6 + 0.024 * i as f64, 0.3 - 0.01 * i as f64, -0.5 + 0.02 * i as f64))
            .collect();
        let e = eikonal_loss(&field, &store, &pts).unwrap();
        assert!(e < 0.05, "eikonal {e}");
        let s = sparsity_loss(&field, &store, &pts, 10.0).unwrap();
        assert!(s > 0.0 && s <= 1.0);
        assert!(matches!(eikonal_loss(&field, &store, &[]), Err(Error::EmptyBatch)));
        // taped values equal plain values
        let mut g = Graph::new(&store);
        let tape = field.tape(&mut g);
        let n = pts.len() as f64;
        let (ev, sv) = regularizers_graph(&mut g, &field, &tape, &pts, 10.0, 1.0 / n, 1.0 / n).unwrap();
        assert_abs_diff_eq!(g.scalar(ev), e, epsilon = 1e-9);
        assert_abs_diff_eq!(g.scalar(sv), s, epsilon = 1e-12);
    }

    #[test]
    fn taped_losses_match_plain_and_differentiate() {
        let mut store = ParamStore::new();
        let field = plane_field(&mut store);
        let pts: Vec<Vec3> = (0..20)
            .map(|i| Vec3::new(0.3 - 0.03 * i as f64, 0.05 * i as f64 - 0.5, 0.2 - 0.02 * i as f64))
            .collect();
        let f = |p: &ParamStore| -> Result<(f64, Gradients)> {
            let mut g = Graph::new(p);
            let tape = field.tape(&mut g);
            let (e, s) = regularizers_graph(&mut g, &field, &tape, &pts, 10.0, 0.05, 0.05).unwrap();
            let flat: Vec<f64> = pts.iter().flat_map(|q| q.iter().copied()).collect();
            let x = g.constant(&flat);
            let sdf = field.sdf_graph(&mut g, &tape, x);
            let op = g.sigmoid(sdf);
            let ent = entropy_loss_graph(&mut g, op, 0.05);
            let es = g.add(e, s);
            let tot = g.add(es, ent);
            Ok((g.scalar(tot), g.backward(tot)?))
        };
        let (_, grads) = f(&store).unwrap();
        let mut coords = Vec::new();
        for id in 0..store.len() {
            let gb = grads.get(id);
            let mut idx: Vec<usize> = (0..gb.len()).filter(|&i| gb[i].abs() > 1e-4).collect();
            idx.sort_by(|&a, &b| gb[b].abs().total_cmp(&gb[a].abs()));
            coords.extend(idx.into_iter().take(4).map(|i| (id, i)));
        }
        let rep = check_gradients_at(f, &store, 1e-6, &coords).unwrap();
        assert!(rep.max_rel_error < 1e-4, "{rep:?}");

        let mut g = Graph::new(&store);
        let fl = g.constant(&[3.0, 0.0, 1.0]);
        let fv = g.constant(&[4.0, 0.0, 1.0]);
        let t = [Vec2::zeros(), Vec2::zeros(), Vec2::new(1.0, 1.0)];
        let l = flow_loss_graph(&mut g, [fl, fv], &t, &[0, 1, 2], 1.0 / 3.0).unwrap();
        let plain = flow_loss(
            &[Vec2::new(3.0, 4.0), Vec2::zeros(), Vec2::new(1.0, 1.0)],
            &t,
            &[true; 3],
        )
        .unwrap();
        assert_abs_diff_eq!(g.scalar(l), plain, epsilon = 1e-9);
    }

    #[test]
    fn report_line_lists_terms() {
        let r = total_loss(
            &LossTerms {
                flow: 1.0,
                ..LossTerms::default()
            },
            LossCounts::default(),
            &LossConfig::default(),
        )
        .unwrap();
        let line = r.log_line(7);
        assert!(line.starts_with("iter=7 flow=1.000000e0"));
        assert!(line.ends_with("total=1.000000e0"));
    }
}
