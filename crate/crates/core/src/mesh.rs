//! Indexed triangle meshes, marching-cubes extraction and surface sampling.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::geometry::{Aabb, SE3Pose, Vec3};
use crate::mc_tables::{EDGE_TABLE, TRI_TABLE};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<Vec3>,
    pub normals: Vec<Vec3>,
    pub faces: Vec<[u32; 3]>,
}

/// Edge-use statistics of a mesh.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ManifoldReport {
    pub edges: usize,
    /// edges used by exactly one face
    pub boundary: usize,
    /// edges used by three or more faces
    pub non_manifold: usize,
}

impl Mesh {
    pub fn is_empty(&self) -> bool {
        self.faces.is_empty()
    }

    pub fn triangle(&self, f: usize) -> [Vec3; 3] {
        let [a, b, c] = self.faces[f];
        [
            self.vertices[a as usize],
            self.vertices[b as usize],
            self.vertices[c as usize],
        ]
    }

    pub fn triangle_area(&self, f: usize) -> f64 {
        let [a, b, c] = self.triangle(f);
        0.5 * (b - a).cross(&(c - a)).norm()
    }

    pub fn area(&self) -> f64 {
        (0..self.faces.len()).map(|f| self.triangle_area(f)).sum()
    }

    pub fn manifold_report(&self) -> ManifoldReport {
        let mut uses: HashMap<(u32, u32), usize> = HashMap::new();
        for f in &self.faces {
            for e in 0..3 {
                let (a, b) = (f[e], f[(e + 1) % 3]);
                *uses.entry((a.min(b), a.max(b))).or_default() += 1;
            }
        }
        ManifoldReport {
            edges: uses.len(),
            boundary: uses.values().filter(|&&n| n == 1).count(),
            non_manifold: uses.values().filter(|&&n| n > 2).count(),
        }
    }

    /// Keeps faces whose centroid satisfies `keep`, dropping unused vertices.
    /// The mesh moved by a rigid transform.
    pub fn transformed(&self, t: &SE3Pose) -> Mesh {
        let r = t.rotation_matrix();
        Mesh {
            vertices: self.vertices.iter().map(|v| t.transform_point(v)).collect(),
            normals: self.normals.iter().map(|n| r * n).collect(),
            faces: self.faces.clone(),
        }
    }

    pub fn filter_faces(&self, keep: impl Fn(&Vec3) -> bool) -> Mesh {
        let mut remap = vec![u32::MAX; self.vertices.len()];
        let mut out = Mesh::default();
        for f in 0..self.faces.len() {
            let [a, b, c] = self.triangle(f);
            if !keep(&((a + b + c) / 3.0)) {
                continue;
            }
            let mut face = [0u32; 3];
            for (k, &v) in self.faces[f].iter().enumerate() {
                let v = v as usize;
                if remap[v] == u32::MAX {
                    remap[v] = out.vertices.len() as u32;
                    out.vertices.push(self.vertices[v]);
                    if let Some(n) = self.normals.get(v) {
                        out.normals.push(*n);
                    }
                }
                face[k] = remap[v];
            }
            out.faces.push(face);
        }
        out
    }

    /// Area-uniform random points, at least `density` per square unit and at
    /// least one per face.
    pub fn sample_surface(&self, density: f64, seed: u64) -> Vec<Vec3> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::new();
        for f in 0..self.faces.len() {
            let [a, b, c] = self.triangle(f);
            let expected = self.triangle_area(f) * density;
            let mut n = expected.floor() as usize;
            if rng.random::<f64>() < expected - n as f64 {
                n += 1;
            }
            n = n.max(1);
            for _ in 0..n {
                let (mut u, mut v) = (rng.random::<f64>(), rng.random::<f64>());
                if u + v > 1.0 {
                    u = 1.0 - u;
                    v = 1.0 - v;
                }
                out.push(a + u * (b - a) + v * (c - a));
            }
        }
        out
    }
}

/// Regular lattice of cubic cells covering a box.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CellGrid {
    pub origin: Vec3,
    pub cell: f64,
    pub counts: [usize; 3],
}

impl CellGrid {
    /// Cubic cells of edge `max extent / resolution`.
    pub fn covering(bbox: &Aabb, resolution: usize) -> Self {
        let e = bbox.extent();
        let cell = e.max() / resolution as f64;
        let counts = [0, 1, 2].map(|a| ((e[a] / cell) - 1e-9).ceil().max(1.0) as usize);
        Self {
            origin: bbox.min,
            cell,
            counts,
        }
    }

    pub fn vertex(&self, i: usize, j: usize, k: usize) -> Vec3 {
        self.origin + self.cell * Vec3::new(i as f64, j as f64, k as f64)
    }

    pub fn cell_box(&self, c: [usize; 3]) -> (Vec3, Vec3) {
        let lo = self.vertex(c[0], c[1], c[2]);
        (lo, lo + Vec3::repeat(self.cell))
    }

    fn vertex_id(&self, i: usize, j: usize, k: usize) -> usize {
        let (nx, ny) = (self.counts[0] + 1, self.counts[1] + 1);
        i + nx * (j + ny * k)
    }
}

const CORNERS: [[usize; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [1, 1, 0],
    [0, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [1, 1, 1],
    [0, 1, 1],
];

const EDGES: [[usize; 2]; 12] = [
    [0, 1],
    [1, 2],
    [2, 3],
    [3, 0],
    [4, 5],
    [5, 6],
    [6, 7],
    [7, 4],
    [0, 4],
    [1, 5],
    [2, 6],
    [3, 7],
];

/// Marching cubes of the zero level set of `sdf` over the cells of `grid`
/// accepted by `include`. Vertices shared between cells are welded; faces
/// are wound so their normal points toward positive values and vertex
/// normals are the normalised finite-difference gradient of `sdf`.
pub fn marching_cubes(
    grid: &CellGrid,
    sdf: impl Fn(&Vec3) -> f64,
    include: impl Fn([usize; 3]) -> bool,
) -> Mesh {
    let mut values: HashMap<usize, f64> = HashMap::new();
    let mut value_at = |i: usize, j: usize, k: usize| -> f64 {
        *values
            .entry(grid.vertex_id(i, j, k))
            .or_insert_with(|| sdf(&grid.vertex(i, j, k)))
    };
    let mut mesh = Mesh::default();
    let mut welded: HashMap<(usize, usize), u32> = HashMap::new();
    for k in 0..grid.counts[2] {
        for j in 0..grid.counts[1] {
            for i in 0..grid.counts[0] {
                if !include([i, j, k]) {
                    continue;
                }
                let idx = CORNERS.map(|c| (i + c[0], j + c[1], k + c[2]));
                let vals = idx.map(|(a, b, c)| value_at(a, b, c));
                if vals.iter().any(|v| !v.is_finite()) {
                    continue;
                }
                let mut case = 0usize;
                for (c, v) in vals.iter().enumerate() {
                    if *v < 0.0 {
                        case |= 1 << c;
                    }
                }
                if EDGE_TABLE[case] == 0 {
                    continue;
                }
                let mut edge_vertex = [u32::MAX; 12];
                for (e, &[a, b]) in EDGES.iter().enumerate() {
                    if EDGE_TABLE[case] & (1 << e) == 0 {
                        continue;
                    }
                    let ia = grid.vertex_id(idx[a].0, idx[a].1, idx[a].2);
                    let ib = grid.vertex_id(idx[b].0, idx[b].1, idx[b].2);
                    let key = (ia.min(ib), ia.max(ib));
                    edge_vertex[e] = *welded.entry(key).or_insert_with(|| {
                        let pa = grid.vertex(idx[a].0, idx[a].1, idx[a].2);
                        let pb = grid.vertex(idx[b].0, idx[b].1, idx[b].2);
                        let (va, vb) = (vals[a], vals[b]);
                        let t = if (va - vb).abs() > 1e-300 {
                            (va / (va - vb)).clamp(0.0, 1.0)
                        } else {
                            0.5
                        };
                        mesh.vertices.push(pa + t * (pb - pa));
                        (mesh.vertices.len() - 1) as u32
                    });
                }
                let row = &TRI_TABLE[case];
                let mut t = 0;
                while t < 16 && row[t] >= 0 {
                    let f = [
                        edge_vertex[row[t] as usize],
                        edge_vertex[row[t + 1] as usize],
                        edge_vertex[row[t + 2] as usize],
                    ];
                    if f[0] != f[1] && f[1] != f[2] && f[0] != f[2] {
                        mesh.faces.push(f);
                    }
                    t += 3;
                }
            }
        }
    }
    drop(value_at);
    let h = 0.25 * grid.cell;
    mesh.normals = mesh
        .vertices
        .iter()
        .map(|p| {
            let mut g = Vec3::zeros();
            for a in 0..3 {
                let mut e = Vec3::zeros();
                e[a] = h;
                g[a] = (sdf(&(p + e)) - sdf(&(p - e))) / (2.0 * h);
            }
            let n = g.norm();
            if n > 0.0 {
                g / n
            } else {
                g
            }
        })
        .collect();
    for f in mesh.faces.iter_mut() {
        let [a, b, c] = f.map(|v| mesh.vertices[v as usize]);
        let face_n = (b - a).cross(&(c - a));
        let avg: Vec3 = f.iter().map(|&v| mesh.normals[v as usize]).sum();
        if face_n.dot(&avg) < 0.0 {
            f.swap(1, 2);
        }
    }
    mesh
}
