//! Occupancy octree, voxel-uniform ray sampling, SDF culling and the distant
//! cuboid-shell samples.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::ParamStore;
use crate::error::{Error, Result};
use crate::field::SdfField;
use crate::geometry::{Aabb, Ray, Vec3};

pub const MAX_OCTREE_DEPTH: u32 = 9;

/// Intersections shorter than this are treated as grazing and skipped.
const MIN_SEGMENT: f64 = 1e-9;

/// Leaf-level occupancy over a root box subdivided `2^max_depth` times per
/// axis. Leaf codes are `i + n·j + n²·k` with `n = 2^max_depth`.
#[derive(Clone, Debug, PartialEq)]
pub struct Octree {
    root: Aabb,
    max_depth: u32,
    bits: Vec<u64>,
    occupied: usize,
}

impl Octree {
    pub fn empty(root: Aabb, max_depth: u32) -> Result<Self> {
        if max_depth > MAX_OCTREE_DEPTH {
            return Err(Error::InvalidConfig(format!(
                "octree depth {max_depth} exceeds {MAX_OCTREE_DEPTH}"
            )));
        }
        let n = 1usize << (3 * max_depth);
        Ok(Self {
            root,
            max_depth,
            bits: vec![0; n.div_ceil(64)],
            occupied: 0,
        })
    }

    pub fn root(&self) -> &Aabb {
        &self.root
    }

    pub fn max_depth(&self) -> u32 {
        self.max_depth
    }

    pub fn cells_per_axis(&self) -> usize {
        1 << self.max_depth
    }

    pub fn leaf_size(&self) -> Vec3 {
        self.root.extent() / self.cells_per_axis() as f64
    }

    pub fn leaf_diagonal(&self) -> f64 {
        self.leaf_size().norm()
    }

    pub fn occupied_count(&self) -> usize {
        self.occupied
    }

    pub fn code(&self, ijk: [usize; 3]) -> u64 {
        let n = self.cells_per_axis();
        (ijk[0] + n * ijk[1] + n * n * ijk[2]) as u64
    }

    pub fn decode(&self, code: u64) -> [usize; 3] {
        let n = self.cells_per_axis() as u64;
        [
            (code % n) as usize,
            ((code / n) % n) as usize,
            (code / (n * n)) as usize,
        ]
    }

    pub fn is_occupied(&self, ijk: [usize; 3]) -> bool {
        let c = self.code(ijk) as usize;
        (self.bits[c / 64] >> (c % 64)) & 1 == 1
    }

    pub fn set_occupied(&mut self, ijk: [usize; 3]) {
        let c = self.code(ijk) as usize;
        let mask = 1u64 << (c % 64);
        if self.bits[c / 64] & mask == 0 {
            self.bits[c / 64] |= mask;
            self.occupied += 1;
        }
    }

    /// Leaf containing `p`, or `None` outside the root box.
    pub fn leaf_of(&self, p: &Vec3) -> Option<[usize; 3]> {
        if !self.root.contains(p) {
            return None;
        }
        let n = self.cells_per_axis();
        let size = self.leaf_size();
        let mut ijk = [0usize; 3];
        for k in 0..3 {
            ijk[k] = (((p[k] - self.root.min[k]) / size[k]).floor() as usize).min(n - 1);
        }
        Some(ijk)
    }

    pub fn contains_point(&self, p: &Vec3) -> bool {
        self.leaf_of(p).is_some_and(|ijk| self.is_occupied(ijk))
    }

    pub fn leaf_box(&self, ijk: [usize; 3]) -> Aabb {
        let s = self.leaf_size();
        let min = self.root.min
            + Vec3::new(ijk[0] as f64 * s.x, ijk[1] as f64 * s.y, ijk[2] as f64 * s.z);
        Aabb { min, max: min + s }
    }

    pub fn occupied_codes(&self) -> Vec<u64> {
        let mut out = Vec::with_capacity(self.occupied);
        for (w, &word) in self.bits.iter().enumerate() {
            let mut bits = word;
            while bits != 0 {
                let b = bits.trailing_zeros() as u64;
                out.push(w as u64 * 64 + b);
                bits &= bits - 1;
            }
        }
        out
    }

    pub fn occupied_leaves(&self) -> Vec<[usize; 3]> {
        self.occupied_codes().into_iter().map(|c| self.decode(c)).collect()
    }

    /// Occupied leaves pierced by the ray, in order, with their parametric
    /// intervals. Amanatides–Woo traversal of the leaf lattice.
    pub fn traverse(&self, origin: &Vec3, dir: &Vec3) -> Vec<([usize; 3], f64, f64)> {
        let mut out = Vec::new();
        let Some((t0, t1)) = self.root.ray_interval(origin, dir) else {
            return out;
        };
        if t1 - t0 <= MIN_SEGMENT {
            return out;
        }
        let n = self.cells_per_axis() as i64;
        let size = self.leaf_size();
        let entry = origin + dir * t0;
        let mut cell = [0i64; 3];
        let mut step = [0i64; 3];
        let mut t_next = [f64::INFINITY; 3];
        let mut t_delta = [f64::INFINITY; 3];
        for k in 0..3 {
            let rel = (entry[k] - self.root.min[k]) / size[k];
            let mut c = rel.floor() as i64;
            // on a boundary moving in −k, start in the lower cell
            if dir[k] < 0.0 && rel == rel.floor() {
                c -= 1;
            }
            cell[k] = c.clamp(0, n - 1);
            if dir[k] > 0.0 {
                step[k] = 1;
                let boundary = self.root.min[k] + (cell[k] + 1) as f64 * size[k];
                t_next[k] = (boundary - origin[k]) / dir[k];
                t_delta[k] = size[k] / dir[k];
            } else if dir[k] < 0.0 {
                step[k] = -1;
                let boundary = self.root.min[k] + cell[k] as f64 * size[k];
                t_next[k] = (boundary - origin[k]) / dir[k];
                t_delta[k] = -size[k] / dir[k];
            }
        }
        let mut t = t0;
        loop {
            let axis = if t_next[0] <= t_next[1] && t_next[0] <= t_next[2] {
                0
            } else if t_next[1] <= t_next[2] {
                1
            } else {
                2
            };
            let t_exit = t_next[axis].min(t1);
            let ijk = [cell[0] as usize, cell[1] as usize, cell[2] as usize];
            if t_exit - t > MIN_SEGMENT && self.is_occupied(ijk) {
                // exact slab interval guards against accumulated drift
                if let Some((a, b)) = self.leaf_box(ijk).ray_interval(origin, dir) {
                    if b - a > MIN_SEGMENT {
                        out.push((ijk, a, b));
                    }
                }
            }
            if t_exit >= t1 {
                break;
            }
            t = t_exit;
            cell[axis] += step[axis];
            t_next[axis] += t_delta[axis];
            if cell[axis] < 0 || cell[axis] >= n {
                break;
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BuildReport {
    pub inserted: usize,
    pub outside: usize,
}

/// A leaf is occupied iff at least one point falls in it.
pub fn build_octree(points: &[Vec3], root: Aabb, max_depth: u32) -> Result<(Octree, BuildReport)> {
    let mut tree = Octree::empty(root, max_depth)?;
    let mut outside = 0;
    for p in points {
        match tree.leaf_of(p) {
            Some(ijk) => tree.set_occupied(ijk),
            None => outside += 1,
        }
    }
    if tree.occupied == 0 {
        return Err(Error::EmptyPointCloud);
    }
    Ok((
        tree,
        BuildReport {
            inserted: points.len() - outside,
            outside,
        },
    ))
}

/// Rebuilds occupancy from the field: a leaf is kept iff
/// `|sdf(center)| ≤ band + leaf_diagonal / 2`.
///
/// Subtrees are skipped when `|sdf(node center)|` exceeds the leaf threshold
/// by more than twice the node half-diagonal, which is exact for fields with
/// `|∇s| ≤ 2`.
pub fn update_octree(tree: &Octree, field: &SdfField, store: &ParamStore, band: f64) -> Octree {
    let mut out = Octree::empty(tree.root, tree.max_depth).expect("valid depth");
    let threshold = band + 0.5 * tree.leaf_diagonal();
    let mut stack = vec![(0u32, [0usize; 3])];
    while let Some((depth, ijk)) = stack.pop() {
        let cells = 1usize << depth;
        let size = tree.root.extent() / cells as f64;
        let min = tree.root.min
            + Vec3::new(ijk[0] as f64 * size.x, ijk[1] as f64 * size.y, ijk[2] as f64 * size.z);
        let center = min + 0.5 * size;
        let s = field.sdf(store, &center).abs();
        if depth == tree.max_depth {
            if s <= threshold {
                out.set_occupied(ijk);
            }
            continue;
        }
        if s > threshold + size.norm() {
            continue;
        }
        for c in 0..8 {
            stack.push((
                depth + 1,
                [
                    2 * ijk[0] + (c & 1),
                    2 * ijk[1] + ((c >> 1) & 1),
                    2 * ijk[2] + ((c >> 2) & 1),
                ],
            ));
        }
    }
    out
}

/// Ordered samples along one ray.
#[derive(Clone, Debug, PartialEq)]
pub struct RaySamples {
    pub depths: Vec<f64>,
    pub deltas: Vec<f64>,
    pub points: Vec<Vec3>,
    pub valid: Vec<bool>,
    /// Ray distance at which the last interval is closed.
    pub far_cap: f64,
    /// `cos` between the ray and its camera's principal axis; converts ray
    /// distance to camera depth.
    pub axial_cos: f64,
}

impl RaySamples {
    pub fn empty() -> Self {
        Self {
            depths: Vec::new(),
            deltas: Vec::new(),
            points: Vec::new(),
            valid: Vec::new(),
            far_cap: 0.0,
            axial_cos: 1.0,
        }
    }

    /// Builds samples at the given sorted depths; deltas close with `far_cap`.
    pub fn from_depths(ray: &Ray, depths: Vec<f64>, far_cap: f64) -> Self {
        let points = depths.iter().map(|&d| ray.origin + d * ray.direction).collect();
        let deltas = deltas_for(&depths, far_cap);
        let valid = vec![true; depths.len()];
        Self {
            depths,
            deltas,
            points,
            valid,
            far_cap,
            axial_cos: 1.0,
        }
    }

    pub fn len(&self) -> usize {
        self.depths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.depths.is_empty()
    }
}

fn deltas_for(depths: &[f64], far_cap: f64) -> Vec<f64> {
    let n = depths.len();
    (0..n)
        .map(|i| {
            if i + 1 < n {
                depths[i + 1] - depths[i]
            } else {
                (far_cap - depths[i]).max(1e-6)
            }
        })
        .collect()
}

/// `N` stratified samples in every occupied leaf the ray crosses. The far cap
/// is the ray's exit from the octree root box.
pub fn sample_ray(ray: &Ray, tree: &Octree, samples_per_voxel: usize, seed: u64) -> RaySamples {
    let n = samples_per_voxel.max(1);
    let hits = tree.traverse(&ray.origin, &ray.direction);
    if hits.is_empty() {
        return RaySamples::empty();
    }
    let far_cap = tree
        .root()
        .ray_interval(&ray.origin, &ray.direction)
        .map(|(_, t1)| t1)
        .unwrap_or(hits.last().unwrap().2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut depths: Vec<f64> = Vec::with_capacity(hits.len() * n);
    for &(_, a, b) in &hits {
        let w = (b - a) / n as f64;
        for k in 0..n {
            let u: f64 = rng.random();
            let d = a + (k as f64 + u) * w;
            if depths.last().is_none_or(|&prev| d > prev) {
                depths.push(d);
            }
        }
    }
    RaySamples::from_depths(ray, depths, far_cap)
}

/// Keeps samples with `sdf ≤ threshold`, preserving order.
pub fn cull_samples(samples: &RaySamples, field: &SdfField, store: &ParamStore, threshold: f64) -> RaySamples {
    if threshold == f64::INFINITY {
        return samples.clone();
    }
    let keep: Vec<usize> = (0..samples.len())
        .filter(|&i| field.sdf(store, &samples.points[i]) <= threshold)
        .collect();
    let depths: Vec<f64> = keep.iter().map(|&i| samples.depths[i]).collect();
    RaySamples {
        deltas: deltas_for(&depths, samples.far_cap),
        points: keep.iter().map(|&i| samples.points[i]).collect(),
        valid: keep.iter().map(|&i| samples.valid[i]).collect(),
        depths,
        far_cap: samples.far_cap,
        axial_cos: samples.axial_cos,
    }
}

/// `r_i = 1 / ((1 − i/n) + (i/n)/r_max)`.
pub fn shell_scale(i: usize, n: usize, r_max: f64) -> Result<f64> {
    if i > n || n == 0 {
        return Err(Error::InvalidShellIndex { index: i, count: n });
    }
    if !(r_max > 1.0) {
        return Err(Error::InvalidConfig("r_max must exceed 1".into()));
    }
    let f = i as f64 / n as f64;
    Ok(1.0 / ((1.0 - f) + f / r_max))
}

/// `x' = [r_i·x, r_i]` for a point `x` on the unit close-range shell.
pub fn inverse_cuboid_warp(x: &Vec3, i: usize, n: usize, r_max: f64) -> Result<([f64; 4], f64)> {
    let r = shell_scale(i, n, r_max)?;
    Ok(([r * x.x, r * x.y, r * x.z, r], r))
}

/// One sample per distant shell.
#[derive(Clone, Debug, PartialEq)]
pub struct ShellSamples {
    pub indices: Vec<usize>,
    pub warped: Vec<[f64; 4]>,
    pub scales: Vec<f64>,
    /// ray distance of each shell crossing
    pub depths: Vec<f64>,
    /// distance since the previous shell (the first is measured from the
    /// close-range box exit)
    pub deltas: Vec<f64>,
}

impl ShellSamples {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Crossings of the ray with shells `1..=n`, each the close box scaled by
/// `r_i` about its center, expressed on the unit shell and warped.
pub fn sample_distant(ray: &Ray, close_box: &Aabb, n: usize, r_max: f64) -> Result<ShellSamples> {
    if ray.direction.norm() < 1e-12 {
        return Err(Error::RayInsideBoxOnly);
    }
    let c = close_box.center();
    let half = 0.5 * close_box.extent();
    let Some((_, t_close)) = close_box.ray_interval(&ray.origin, &ray.direction) else {
        return Err(Error::RayInsideBoxOnly);
    };
    let mut out = ShellSamples {
        indices: Vec::with_capacity(n),
        warped: Vec::with_capacity(n),
        scales: Vec::with_capacity(n),
        depths: Vec::with_capacity(n),
        deltas: Vec::with_capacity(n),
    };
    let mut prev = t_close;
    for i in 1..=n {
        let r = shell_scale(i, n, r_max)?;
        let shell = close_box.scaled_about(&c, r);
        let Some((_, t)) = shell.ray_interval(&ray.origin, &ray.direction) else {
            return Err(Error::RayInsideBoxOnly);
        };
        let x = ray.at(t);
        let unit = Vec3::new(
            (x.x - c.x) / (r * half.x),
            (x.y - c.y) / (r * half.y),
            (x.z - c.z) / (r * half.z),
        );
        let (w, _) = inverse_cuboid_warp(&unit, i, n, r_max)?;
        out.indices.push(i);
        out.warped.push(w);
        out.scales.push(r);
        out.depths.push(t);
        out.deltas.push((t - prev).max(1e-9));
        prev = t;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Vec2;
    use approx::assert_abs_diff_eq;

    fn ray(o: Vec3, d: Vec3) -> Ray {
        Ray {
            origin: o,
            direction: d.normalize(),
            source_frame: 0,
            pixel: Vec2::zeros(),
        }
    }

    fn unit_cube(n: f64) -> Aabb {
        Aabb::new(Vec3::zeros(), Vec3::new(n, n, n)).unwrap()
    }

    #[test]
    fn single_point_single_leaf() {
        let (t, rep) = build_octree(&[Vec3::new(0.3, 0.6, 0.9)], unit_cube(1.0), 3).unwrap();
        assert_eq!(t.occupied_count(), 1);
        assert!(t.contains_point(&Vec3::new(0.3, 0.6, 0.9)));
        assert_eq!(rep.outside, 0);
    }

    #[test]
    fn lattice_fills_all_leaves() {
        let mut pts = Vec::new();
        for i in 0..4 {
            for j in 0..4 {
                for k in 0..4 {
                    pts.push(Vec3::new(i as f64 + 0.5, j as f64 + 0.5, k as f64 + 0.5));
                }
            }
        }
        let (t, _) = build_octree(&pts, unit_cube(4.0), 2).unwrap();
        assert_eq!(t.occupied_count(), 64);
    }

    #[test]
    fn points_outside_box_are_rejected() {
        let r = build_octree(&[Vec3::new(5.0, 0.0, 0.0)], unit_cube(1.0), 2);
        assert!(matches!(r, Err(Error::EmptyPointCloud)));
    }

    #[test]
    fn samples_inside_single_voxel() {
        let mut t = Octree::empty(unit_cube(4.0), 2).unwrap();
        t.set_occupied([1, 1, 1]);
        let r = ray(Vec3::new(-1.0, 1.5, 1.5), Vec3::x());
        let s = sample_ray(&r, &t, 8, 3);
        assert_eq!(s.len(), 8);
        for &d in &s.depths {
            assert!(d > 2.0 && d < 3.0, "{d}");
        }
        let miss = ray(Vec3::new(-1.0, 0.5, 0.5), Vec3::x());
        assert!(sample_ray(&miss, &t, 8, 3).is_empty());
    }

    #[test]
    fn samples_across_two_voxels_sorted() {
        let mut t = Octree::empty(unit_cube(4.0), 2).unwrap();
        t.set_occupied([1, 1, 1]);
        t.set_occupied([3, 1, 1]);
        let r = ray(Vec3::new(-1.0, 1.5, 1.5), Vec3::x());
        let s = sample_ray(&r, &t, 4, 11);
        assert_eq!(s.len(), 8);
        assert!(s.depths.windows(2).all(|w| w[1] > w[0]));
        assert!(s.deltas.iter().all(|&d| d > 0.0));
        // far cap = exit of root box at t = 5
        assert_abs_diff_eq!(s.deltas[7], 5.0 - s.depths[7], epsilon = 1e-12);
        for (p, d) in s.points.iter().zip(&s.depths) {
            assert_eq!(*p, r.origin + *d * r.direction);
        }
    }

    #[test]
    fn warp_formula_goldens() {
        assert_eq!(shell_scale(0, 7, 10.0).unwrap(), 1.0);
        assert_abs_diff_eq!(shell_scale(7, 7, 10.0).unwrap(), 10.0, epsilon = 1e-12);
        assert_abs_diff_eq!(shell_scale(1, 2, 4.0).unwrap(), 1.6, epsilon = 1e-12);
        assert!(matches!(
            inverse_cuboid_warp(&Vec3::x(), 3, 2, 4.0),
            Err(Error::InvalidShellIndex { .. })
        ));
        let (w, r) = inverse_cuboid_warp(&Vec3::new(1.0, 0.5, -1.0), 1, 2, 4.0).unwrap();
        assert_abs_diff_eq!(r, 1.6, epsilon = 1e-12);
        assert_abs_diff_eq!(w[1], 0.8, epsilon = 1e-12);
        assert_abs_diff_eq!(w[3], 1.6, epsilon = 1e-12);
    }

    #[test]
    fn distant_shells_axis_aligned() {
        let close = Aabb::new(Vec3::new(-1.0, -2.0, -1.0), Vec3::new(1.0, 2.0, 1.0)).unwrap();
        let r = ray(Vec3::zeros(), Vec3::x());
        let s = sample_distant(&r, &close, 4, 16.0).unwrap();
        assert_eq!(s.len(), 4);
        assert!(s.scales.windows(2).all(|w| w[1] > w[0]));
        for (i, &t) in s.depths.iter().enumerate() {
            // shell i exits at x = r_i · half_x = r_i
            assert_abs_diff_eq!(t, shell_scale(i + 1, 4, 16.0).unwrap(), epsilon = 1e-12);
            assert_abs_diff_eq!(s.warped[i][0] / s.warped[i][3], 1.0, epsilon = 1e-12);
        }
        assert_abs_diff_eq!(s.deltas[0], s.depths[0] - 1.0, epsilon = 1e-12);
    }

    fn brute_force(t: &Octree, o: &Vec3, d: &Vec3) -> Vec<([usize; 3], f64, f64)> {
        let mut hits: Vec<_> = t
            .occupied_leaves()
            .into_iter()
            .filter_map(|ijk| {
                let (a, b) = t.leaf_box(ijk).ray_interval(o, d)?;
                (b - a > MIN_SEGMENT).then_some((ijk, a, b))
            })
            .collect();
        hits.sort_by(|x, y| x.1.total_cmp(&y.1));
        hits
    }

    #[test]
    fn traversal_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let root = Aabb::new(Vec3::new(-1.0, -2.0, 0.0), Vec3::new(3.0, 2.0, 1.5)).unwrap();
        let mut t = Octree::empty(root, 4).unwrap();
        for _ in 0..800 {
            t.set_occupied([rng.random_range(0..16), rng.random_range(0..16), rng.random_range(0..16)]);
        }
        for _ in 0..500 {
            let o = Vec3::new(
                rng.random_range(-3.0..5.0),
                rng.random_range(-4.0..4.0),
                rng.random_range(-1.0..2.5),
            );
            let d = Vec3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            )
            .normalize();
            let a = t.traverse(&o, &d);
            let b = brute_force(&t, &o, &d);
            assert_eq!(a.len(), b.len());
            for (x, y) in a.iter().zip(&b) {
                assert_eq!(x.0, y.0);
            }
        }
    }

    #[test]
    fn update_keeps_band_around_plane() {
        use crate::autodiff::ParamStore;
        use crate::field::{init_to_plane, SdfFieldConfig};
        use crate::geometry::Plane;
        let bbox = Aabb::new(Vec3::new(-1.0, -1.0, -1.0), Vec3::new(1.0, 1.0, 1.0)).unwrap();
        let mut store = ParamStore::new();
        let mut cfg = SdfFieldConfig::new(bbox);
        cfg.grid.table_size_log2 = 14;
        cfg.grid.level_count = 4;
        let field = SdfField::new(cfg, &mut store, 1).unwrap();
        let plane = Plane::new(Vec3::z(), 0.0);
        init_to_plane(&field, &mut store, &plane, &bbox, 300, 2).unwrap();
        let tree = Octree::empty(bbox, 4).unwrap();
        let band = 0.1;
        let up = update_octree(&tree, &field, &store, band);
        assert!(up.occupied_count() > 0);
        let thr = band + 0.5 * up.leaf_diagonal();
        let n = up.cells_per_axis();
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    let c = up.leaf_box([i, j, k]).center();
                    let s = field.sdf(&store, &c).abs();
                    assert_eq!(up.is_occupied([i, j, k]), s <= thr, "leaf {i} {j} {k} sdf {s}");
                }
            }
        }
        let all = update_octree(&tree, &field, &store, f64::INFINITY);
        assert_eq!(all.occupied_count(), n * n * n);
    }
}
