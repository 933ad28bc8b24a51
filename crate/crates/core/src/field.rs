//! Close-range SDF map, distant radiance field and color head.
//!
//! The close-range field is a multiresolution hash grid feeding a small
//! softplus MLP; its first output is the signed distance (meters) and the rest
//! is a feature vector consumed by the color head. All parameters live in a
//! [`ParamStore`] so the optimizer sees one flat set of blocks.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{
    adam_step, dot, sigmoid, softplus, AdamState, BlockId, Category, GatherOp, Gradients, Graph,
    ParamStore, Var,
};
use crate::error::{Error, Result};
use crate::geometry::{Aabb, Plane, Vec3};

const PRIMES: [u32; 4] = [1, 2_654_435_761, 805_459_861, 3_674_653_429];

/// Finite-difference step used for `∇s`, in scene units.
pub const GRADIENT_STEP: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HashGridConfig {
    pub level_count: usize,
    pub base_resolution: usize,
    pub per_level_scale: f64,
    pub table_size_log2: u32,
    pub feature_dim: usize,
}

impl Default for HashGridConfig {
    fn default() -> Self {
        Self {
            level_count: 8,
            base_resolution: 16,
            per_level_scale: 1.5,
            table_size_log2: 19,
            feature_dim: 2,
        }
    }
}

impl HashGridConfig {
    pub fn validate(&self) -> Result<()> {
        if self.level_count < 1 {
            return Err(Error::InvalidConfig("hash grid needs ≥ 1 level".into()));
        }
        if !(self.per_level_scale > 1.0) {
            return Err(Error::InvalidConfig("per_level_scale must exceed 1".into()));
        }
        if ![2, 4, 8].contains(&self.feature_dim) {
            return Err(Error::InvalidConfig("feature_dim must be 2, 4 or 8".into()));
        }
        if self.base_resolution < 1 || self.table_size_log2 < 4 || self.table_size_log2 > 26 {
            return Err(Error::InvalidConfig("bad hash grid resolution/table size".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Level {
    resolution: usize,
    entries: usize,
    /// offset of the level's first entry, in entries
    offset: usize,
    dense: bool,
}

/// Resolved level geometry of a D-dimensional hash grid over a box `[lo, hi]`.
#[derive(Clone, Debug, PartialEq)]
pub struct HashGridLayout {
    dims: usize,
    lo: Vec<f64>,
    hi: Vec<f64>,
    feature_dim: usize,
    levels: Vec<Level>,
    table_size: usize,
}

impl HashGridLayout {
    pub fn new(config: &HashGridConfig, lo: &[f64], hi: &[f64]) -> Result<Self> {
        config.validate()?;
        let dims = lo.len();
        assert!(dims == 3 || dims == 4, "hash grids are 3D or 4D");
        assert_eq!(hi.len(), dims);
        if lo.iter().zip(hi).any(|(a, b)| !(b > a)) {
            return Err(Error::InvalidConfig("grid box needs positive extent".into()));
        }
        let table_size = 1usize << config.table_size_log2;
        let mut levels = Vec::with_capacity(config.level_count);
        let mut offset = 0;
        for l in 0..config.level_count {
            let resolution = (config.base_resolution as f64
                * config.per_level_scale.powi(l as i32))
            .floor() as usize;
            let vertices = (resolution + 1).checked_pow(dims as u32).unwrap_or(usize::MAX);
            let dense = vertices <= table_size;
            let entries = if dense { vertices } else { table_size };
            levels.push(Level {
                resolution,
                entries,
                offset,
                dense,
            });
            offset += entries;
        }
        Ok(Self {
            dims,
            lo: lo.to_vec(),
            hi: hi.to_vec(),
            feature_dim: config.feature_dim,
            levels,
            table_size,
        })
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn level_count(&self) -> usize {
        self.levels.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn level_resolution(&self, level: usize) -> usize {
        self.levels[level].resolution
    }

    pub fn level_is_dense(&self, level: usize) -> bool {
        self.levels[level].dense
    }

    /// Total number of table entries across levels.
    pub fn entry_count(&self) -> usize {
        self.levels.iter().map(|l| l.entries).sum()
    }

    pub fn param_count(&self) -> usize {
        self.entry_count() * self.feature_dim
    }

    pub fn output_len(&self) -> usize {
        self.levels.len() * self.feature_dim
    }

    /// Table entry (relative to the level offset) of an integer lattice vertex.
    pub fn vertex_index(&self, level: usize, coords: &[u32]) -> usize {
        let lv = &self.levels[level];
        if lv.dense {
            let stride = lv.resolution + 1;
            let mut idx = 0usize;
            let mut mul = 1usize;
            for &c in &coords[..self.dims] {
                idx += c as usize * mul;
                mul *= stride;
            }
            idx
        } else {
            let mut h = 0u32;
            for (k, &c) in coords[..self.dims].iter().enumerate() {
                h ^= c.wrapping_mul(PRIMES[k]);
            }
            (h as usize) & (self.table_size - 1)
        }
    }

    /// Position inside the box, clamped; returns whether clamping happened.
    pub fn clamp_input(&self, x: &[f64], out: &mut [f64]) -> bool {
        let mut clamped = false;
        for k in 0..self.dims {
            let v = x[k].clamp(self.lo[k], self.hi[k]);
            clamped |= v != x[k];
            out[k] = v;
        }
        clamped
    }

    /// Visits the 2^D corners of the cell containing `x` at `level`:
    /// `f(entry, weight, dweight/dx)`.
    fn for_each_corner(
        &self,
        level: usize,
        x: &[f64],
        mut f: impl FnMut(usize, f64, &[f64; 4]),
    ) {
        let lv = &self.levels[level];
        let res = lv.resolution as f64;
        let mut base = [0u32; 4];
        let mut frac = [0.0f64; 4];
        let mut inside = [true; 4];
        let mut scale = [0.0f64; 4];
        for k in 0..self.dims {
            let ext = self.hi[k] - self.lo[k];
            let raw = (x[k] - self.lo[k]) / ext * res;
            inside[k] = raw >= 0.0 && raw <= res;
            let p = raw.clamp(0.0, res);
            let i0 = (p.floor() as usize).min(lv.resolution - 1);
            base[k] = i0 as u32;
            frac[k] = p - i0 as f64;
            scale[k] = res / ext;
        }
        let mut coords = [0u32; 4];
        for corner in 0..(1usize << self.dims) {
            let mut w = 1.0;
            for k in 0..self.dims {
                let bit = (corner >> k) & 1;
                coords[k] = base[k] + bit as u32;
                w *= if bit == 1 { frac[k] } else { 1.0 - frac[k] };
            }
            let mut dw = [0.0f64; 4];
            for k in 0..self.dims {
                if !inside[k] {
                    continue;
                }
                let mut d = scale[k];
                for m in 0..self.dims {
                    let bit = (corner >> m) & 1;
                    if m == k {
                        d *= if bit == 1 { 1.0 } else { -1.0 };
                    } else {
                        d *= if bit == 1 { frac[m] } else { 1.0 - frac[m] };
                    }
                }
                dw[k] = d;
            }
            let entry = lv.offset + self.vertex_index(level, &coords);
            f(entry, w, &dw);
        }
    }

    /// Concatenated per-level interpolated features.
    pub fn encode(&self, table: &[f64], x: &[f64], out: &mut [f64]) {
        let fd = self.feature_dim;
        for l in 0..self.levels.len() {
            let o = &mut out[l * fd..(l + 1) * fd];
            o.iter_mut().for_each(|v| *v = 0.0);
            self.for_each_corner(l, x, |entry, w, _| {
                let feat = &table[entry * fd..(entry + 1) * fd];
                for c in 0..fd {
                    o[c] += w * feat[c];
                }
            });
        }
    }
}

impl GatherOp for HashGridLayout {
    fn input_len(&self) -> usize {
        self.dims
    }

    fn output_len(&self) -> usize {
        HashGridLayout::output_len(self)
    }

    fn forward(&self, table: &[f64], input: &[f64], out: &mut [f64]) {
        self.encode(table, input, out);
    }

    fn backward(
        &self,
        table: &[f64],
        input: &[f64],
        adj_out: &[f64],
        grad_table: &mut [f64],
        grad_input: &mut [f64],
    ) {
        let fd = self.feature_dim;
        for l in 0..self.levels.len() {
            let a = &adj_out[l * fd..(l + 1) * fd];
            if a.iter().all(|&v| v == 0.0) {
                continue;
            }
            self.for_each_corner(l, input, |entry, w, dw| {
                let feat = &table[entry * fd..(entry + 1) * fd];
                let g = &mut grad_table[entry * fd..(entry + 1) * fd];
                let mut fa = 0.0;
                for c in 0..fd {
                    g[c] += w * a[c];
                    fa += feat[c] * a[c];
                }
                for k in 0..grad_input.len() {
                    grad_input[k] += dw[k] * fa;
                }
            });
        }
    }
}

/// A dense softplus MLP stored as `(weight, bias)` block pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<(BlockId, BlockId)>,
    pub widths: Vec<usize>,
    pub beta: f64,
}

impl Mlp {
    /// Registers the blocks `{prefix}.l{i}.w/b`. Hidden layers use He-style
    /// normal init; the output layer is scaled by `out_std`.
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        category: Category,
        widths: &[usize],
        beta: f64,
        out_std: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let mut layers = Vec::new();
        for i in 0..widths.len() - 1 {
            let (n_in, n_out) = (widths[i], widths[i + 1]);
            let last = i + 2 == widths.len();
            let std = if last {
                out_std
            } else {
                (2.0 / n_out as f64).sqrt()
            };
            let normal = Normal::new(0.0, std).expect("finite std");
            let w: Vec<f64> = (0..n_in * n_out).map(|_| normal.sample(rng)).collect();
            let wid = store.add(format!("{prefix}.l{i}.w"), category, vec![n_out, n_in], w)?;
            let bid = store.add(format!("{prefix}.l{i}.b"), category, vec![n_out], vec![0.0; n_out])?;
            layers.push((wid, bid));
        }
        Ok(Self {
            layers,
            widths: widths.to_vec(),
            beta,
        })
    }

    pub fn from_store(store: &ParamStore, prefix: &str, widths: &[usize], beta: f64) -> Result<Self> {
        let mut layers = Vec::new();
        for i in 0..widths.len() - 1 {
            layers.push((
                store.id(&format!("{prefix}.l{i}.w"))?,
                store.id(&format!("{prefix}.l{i}.b"))?,
            ));
        }
        Ok(Self {
            layers,
            widths: widths.to_vec(),
            beta,
        })
    }

    pub fn output_len(&self) -> usize {
        *self.widths.last().unwrap()
    }

    /// Plain forward pass; the last layer has no activation.
    pub fn forward(&self, store: &ParamStore, input: &[f64], out: &mut Vec<f64>) {
        let mut cur: Vec<f64> = input.to_vec();
        let mut next = Vec::new();
        for (li, &(w, b)) in self.layers.iter().enumerate() {
            let w = store.values(w);
            let b = store.values(b);
            let n_in = cur.len();
            next.clear();
            for o in 0..b.len() {
                let v = b[o] + dot(&w[o * n_in..(o + 1) * n_in], &cur);
                next.push(if li + 1 < self.layers.len() {
                    softplus(v, self.beta)
                } else {
                    v
                });
            }
            std::mem::swap(&mut cur, &mut next);
        }
        *out = cur;
    }

    pub fn forward_graph(&self, g: &mut Graph<'_>, input: Var) -> Var {
        let mut cur = input;
        for (li, &(w, b)) in self.layers.iter().enumerate() {
            cur = g.linear(w, b, cur);
            if li + 1 < self.layers.len() {
                cur = g.softplus(cur, self.beta);
            }
        }
        cur
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SdfFieldConfig {
    pub grid: HashGridConfig,
    pub bbox: Aabb,
    pub hidden_layers: usize,
    pub hidden_width: usize,
    pub feature_len: usize,
    pub softplus_beta: f64,
    pub initial_sharpness: f64,
    /// radius of the geometric (sphere) initialisation, in normalised box units
    pub init_radius: f64,
}

impl SdfFieldConfig {
    pub fn new(bbox: Aabb) -> Self {
        Self {
            grid: HashGridConfig::default(),
            bbox,
            hidden_layers: 2,
            hidden_width: 64,
            feature_len: 15,
            softplus_beta: 100.0,
            initial_sharpness: 10.0,
            init_radius: 0.5,
        }
    }

    fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.grid.level_count * self.grid.feature_dim + 3];
        w.extend(std::iter::repeat(self.hidden_width).take(self.hidden_layers));
        w.push(1 + self.feature_len);
        w
    }
}

/// Close-range SDF field handle; parameter values live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct SdfField {
    pub config: SdfFieldConfig,
    pub layout: Arc<HashGridLayout>,
    pub grid: BlockId,
    pub decoder: Mlp,
    pub log_sharpness: BlockId,
}

impl SdfField {
    pub const GRID: &'static str = "sdf.grid";
    pub const DECODER: &'static str = "sdf.decoder";
    pub const SHARPNESS: &'static str = "sdf.log_sharpness";

    /// Registers the field's blocks with geometric (sphere) initialisation.
    pub fn new(config: SdfFieldConfig, store: &mut ParamStore, seed: u64) -> Result<Self> {
        let b = &config.bbox;
        let layout = HashGridLayout::new(&config.grid, b.min.as_slice(), b.max.as_slice())?;
        if !(config.initial_sharpness > 0.0) {
            return Err(Error::InvalidConfig("initial sharpness must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid_vals: Vec<f64> = (0..layout.param_count())
            .map(|_| rng.random_range(-1e-4..1e-4))
            .collect();
        let grid = store.add(
            Self::GRID,
            Category::HashGrid,
            vec![layout.entry_count(), layout.feature_dim()],
            grid_vals,
        )?;
        let widths = config.widths();
        let decoder = Mlp::new(
            store,
            Self::DECODER,
            Category::Decoder,
            &widths,
            config.softplus_beta,
            1e-3,
            &mut rng,
        )?;
        // geometric init: output ≈ |x_n| − r over the normalised position
        let (w_last, b_last) = *decoder.layers.last().unwrap();
        let n_in = widths[widths.len() - 2];
        let mean = (std::f64::consts::PI / n_in as f64).sqrt();
        let normal = Normal::new(mean, 1e-4).unwrap();
        for j in 0..n_in {
            store.values_mut(w_last)[j] = normal.sample(&mut rng);
        }
        store.values_mut(b_last)[0] = -config.init_radius;
        let (w_first, _) = decoder.layers[0];
        let enc = layout.output_len();
        let n0 = widths[0];
        for o in 0..widths[1] {
            for j in 0..enc {
                store.values_mut(w_first)[o * n0 + j] = 0.0;
            }
        }
        let log_sharpness = store.add(
            Self::SHARPNESS,
            Category::Sharpness,
            vec![1],
            vec![config.initial_sharpness.ln()],
        )?;
        Ok(Self {
            config,
            layout: Arc::new(layout),
            grid,
            decoder,
            log_sharpness,
        })
    }

    /// Rebinds a field to blocks already present in `store` (e.g. a checkpoint).
    pub fn from_store(config: SdfFieldConfig, store: &ParamStore) -> Result<Self> {
        let b = &config.bbox;
        let layout = HashGridLayout::new(&config.grid, b.min.as_slice(), b.max.as_slice())?;
        let grid = store.id(Self::GRID)?;
        if store.values(grid).len() != layout.param_count() {
            return Err(Error::DimensionMismatch("grid block size".into()));
        }
        let decoder = Mlp::from_store(store, Self::DECODER, &config.widths(), config.softplus_beta)?;
        Ok(Self {
            layout: Arc::new(layout),
            grid,
            decoder,
            log_sharpness: store.id(Self::SHARPNESS)?,
            config,
        })
    }

    pub fn sharpness(&self, store: &ParamStore) -> f64 {
        store.values(self.log_sharpness)[0].exp()
    }

    fn normalise(&self, x: &Vec3) -> [f64; 3] {
        let c = self.config.bbox.center();
        let h = 0.5 * self.config.bbox.extent();
        [(x.x - c.x) / h.x, (x.y - c.y) / h.y, (x.z - c.z) / h.z]
    }

    /// `(sdf, feature)` at `x`. Positions outside the box are clamped for the
    /// grid lookup; the positional input is not clamped.
    pub fn query(&self, store: &ParamStore, x: &Vec3) -> (f64, Vec<f64>) {
        let mut out = Vec::new();
        self.query_raw(store, x, &mut out);
        let sdf = out[0];
        out.remove(0);
        (sdf, out)
    }

    pub fn sdf(&self, store: &ParamStore, x: &Vec3) -> f64 {
        let mut out = Vec::new();
        self.query_raw(store, x, &mut out);
        out[0]
    }

    fn query_raw(&self, store: &ParamStore, x: &Vec3, out: &mut Vec<f64>) {
        let enc_len = self.layout.output_len();
        let mut input = vec![0.0; enc_len + 3];
        self.layout
            .encode(store.values(self.grid), x.as_slice(), &mut input[..enc_len]);
        input[enc_len..].copy_from_slice(&self.normalise(x));
        self.decoder.forward(store, &input, out);
    }

    /// Central-difference gradient with step [`GRADIENT_STEP`].
    pub fn sdf_gradient(&self, store: &ParamStore, x: &Vec3) -> Vec3 {
        let h = GRADIENT_STEP;
        let mut g = Vec3::zeros();
        for k in 0..3 {
            let mut e = Vec3::zeros();
            e[k] = h;
            g[k] = (self.sdf(store, &(x + e)) - self.sdf(store, &(x - e))) / (2.0 * h);
        }
        g
    }

    /// Prepares per-graph constants for taped queries.
    pub fn tape(&self, g: &mut Graph<'_>) -> FieldTape {
        let gather = g.register_gather(self.layout.clone());
        let c = self.config.bbox.center();
        let h = 0.5 * self.config.bbox.extent();
        FieldTape {
            gather,
            center: g.constant(c.as_slice()),
            inv_half: g.constant(&[1.0 / h.x, 1.0 / h.y, 1.0 / h.z]),
        }
    }

    /// Taped query over `x` holding one or more points as rows of 3.
    /// Returns `(sdf, feature)` nodes with one entry (row) per point.
    pub fn query_graph(&self, g: &mut Graph<'_>, tape: &FieldTape, x: Var) -> (Var, Var) {
        let rows = g.len(x) / 3;
        let enc = g.gather(tape.gather, self.grid, x);
        let (center, inv_half) = if rows == 1 {
            (tape.center, tape.inv_half)
        } else {
            (g.tile(tape.center, rows), g.tile(tape.inv_half, rows))
        };
        let shifted = g.sub(x, center);
        let xn = g.mul(shifted, inv_half);
        let input = g.hstack(&[enc, xn], rows);
        let out = self.decoder.forward_graph(g, input);
        let z = self.config.feature_len;
        let sdf = g.columns(out, 1 + z, 0, 1);
        let feat = g.columns(out, 1 + z, 1, z);
        (sdf, feat)
    }

    pub fn sdf_graph(&self, g: &mut Graph<'_>, tape: &FieldTape, x: Var) -> Var {
        self.query_graph(g, tape, x).0
    }

    /// Taped central-difference gradients; returns `(∂x, ∂y, ∂z)` nodes with
    /// one entry per point.
    pub fn gradient_graph(&self, g: &mut Graph<'_>, tape: &FieldTape, x: Var) -> [Var; 3] {
        let rows = g.len(x) / 3;
        let h = GRADIENT_STEP;
        let mut comps = [x; 3];
        for (k, comp) in comps.iter_mut().enumerate() {
            let mut e = [0.0; 3];
            e[k] = h;
            let ep = g.constant(&e);
            let ep = if rows == 1 { ep } else { g.tile(ep, rows) };
            let xp = g.add(x, ep);
            let xm = g.sub(x, ep);
            let sp = self.sdf_graph(g, tape, xp);
            let sm = self.sdf_graph(g, tape, xm);
            let d = g.sub(sp, sm);
            *comp = g.scale(d, 1.0 / (2.0 * h));
        }
        comps
    }

    pub fn sharpness_graph(&self, g: &mut Graph<'_>) -> Var {
        let p = g.param(self.log_sharpness, 0, 1);
        g.exp(p)
    }
}

/// Graph-local handles created by [`SdfField::tape`].
#[derive(Clone, Copy, Debug)]
pub struct FieldTape {
    gather: usize,
    center: Var,
    inv_half: Var,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PretrainReport {
    pub steps: usize,
    pub rmse: f64,
}

/// Fits the field to the signed distance of `plane` over uniform points in
/// `bbox`, then reports RMSE on 10k held-out points.
pub fn init_to_plane(
    field: &SdfField,
    store: &mut ParamStore,
    plane: &Plane,
    bbox: &Aabb,
    steps: usize,
    seed: u64,
) -> Result<PretrainReport> {
    if !plane.intersects_box(bbox) {
        return Err(Error::PlaneOutsideBox);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let uniform = |rng: &mut ChaCha8Rng| {
        Vec3::new(
            rng.random_range(bbox.min.x..bbox.max.x),
            rng.random_range(bbox.min.y..bbox.max.y),
            rng.random_range(bbox.min.z..bbox.max.z),
        )
    };
    let lrs = [(Category::HashGrid, 1e-2), (Category::Decoder, 5e-3)];
    let mut adam = AdamState::new(store, lrs.into_iter().collect());
    let batch = 256;
    let mut grads = Gradients::zeros_like(store);
    for step in 0..steps {
        let pts: Vec<Vec3> = (0..batch).map(|_| uniform(&mut rng)).collect();
        grads.fill_zero();
        {
            let mut g = Graph::new(store);
            let tape = field.tape(&mut g);
            let mut terms = Vec::with_capacity(batch);
            for p in &pts {
                let x = g.constant(p.as_slice());
                let s = field.sdf_graph(&mut g, &tape, x);
                let r = g.offset(s, -plane.signed_distance(p));
                terms.push(g.square(r));
            }
            let all = g.concat(&terms);
            let sum = g.sum(all);
            let loss = g.scale(sum, 1.0 / batch as f64);
            g.backward_into(loss, 1.0, &mut grads)?;
        }
        // cosine decay to 5% keeps the final fit from jittering
        let progress = step as f64 / steps as f64;
        let scale = 0.05 + 0.95 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        adam_step(store, &grads, &mut adam, scale)?;
    }
    let mut held = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let n = 10_000;
    let mut sse = 0.0;
    for _ in 0..n {
        let p = uniform(&mut held);
        let r = field.sdf(store, &p) - plane.signed_distance(&p);
        sse += r * r;
    }
    Ok(PretrainReport {
        steps,
        rmse: (sse / n as f64).sqrt(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColorHeadConfig {
    pub hidden_width: usize,
}

impl Default for ColorHeadConfig {
    fn default() -> Self {
        Self { hidden_width: 64 }
    }
}

/// `(view direction, feature) → rgb` shader for the close-range field.
#[derive(Clone, Debug)]
pub struct ColorHead {
    pub mlp: Mlp,
}

impl ColorHead {
    pub const PREFIX: &'static str = "color";

    pub fn new(
        config: &ColorHeadConfig,
        feature_len: usize,
        store: &mut ParamStore,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let widths = [3 + feature_len, config.hidden_width, 3];
        Ok(Self {
            mlp: Mlp::new(store, Self::PREFIX, Category::Color, &widths, 1.0, 0.1, &mut rng)?,
        })
    }

    pub fn from_store(config: &ColorHeadConfig, feature_len: usize, store: &ParamStore) -> Result<Self> {
        let widths = [3 + feature_len, config.hidden_width, 3];
        Ok(Self {
            mlp: Mlp::from_store(store, Self::PREFIX, &widths, 1.0)?,
        })
    }

    pub fn query(&self, store: &ParamStore, v: &Vec3, z: &[f64]) -> Result<[f64; 3]> {
        let n = v.norm();
        if (n - 1.0).abs() > 1e-6 {
            return Err(Error::NonUnitDirection(n));
        }
        let mut input = v.as_slice().to_vec();
        input.extend_from_slice(z);
        let mut out = Vec::new();
        self.mlp.forward(store, &input, &mut out);
        Ok([sigmoid(out[0]), sigmoid(out[1]), sigmoid(out[2])])
    }

    /// Rows of `v` (unit directions) and `z` are paired.
    pub fn query_graph(&self, g: &mut Graph<'_>, v: Var, z: Var) -> Var {
        let rows = g.len(v) / 3;
        let input = g.hstack(&[v, z], rows);
        let out = self.mlp.forward_graph(g, input);
        g.sigmoid(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistantFieldConfig {
    pub grid: HashGridConfig,
    pub hidden_width: usize,
}

impl Default for DistantFieldConfig {
    fn default() -> Self {
        Self {
            grid: HashGridConfig {
                level_count: 4,
                base_resolution: 32,
                per_level_scale: 1.5,
                table_size_log2: 17,
                feature_dim: 2,
            },
            hidden_width: 32,
        }
    }
}

/// 4D hash grid over inverse-warped shell samples, emitting density and rgb.
///
/// A warped sample `x' = [r·u, r]` is looked up at `(u, 1/r)`, which is bounded
/// to `[-1, 1]³ × (0, 1]`.
#[derive(Clone, Debug)]
pub struct DistantField {
    pub layout: Arc<HashGridLayout>,
    pub grid: BlockId,
    pub mlp: Mlp,
}

impl DistantField {
    pub const GRID: &'static str = "distant.grid";
    pub const DECODER: &'static str = "distant.decoder";

    fn layout(config: &DistantFieldConfig) -> Result<HashGridLayout> {
        HashGridLayout::new(&config.grid, &[-1.0, -1.0, -1.0, 0.0], &[1.0, 1.0, 1.0, 1.0])
    }

    pub fn new(config: &DistantFieldConfig, store: &mut ParamStore, seed: u64) -> Result<Self> {
        let layout = Self::layout(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vals: Vec<f64> = (0..layout.param_count())
            .map(|_| rng.random_range(-1e-4..1e-4))
            .collect();
        let grid = store.add(
            Self::GRID,
            Category::Distant,
            vec![layout.entry_count(), layout.feature_dim()],
            vals,
        )?;
        let widths = [layout.output_len(), config.hidden_width, 4];
        let mlp = Mlp::new(store, Self::DECODER, Category::Distant, &widths, 1.0, 0.1, &mut rng)?;
        Ok(Self {
            layout: Arc::new(layout),
            grid,
            mlp,
        })
    }

    pub fn from_store(config: &DistantFieldConfig, store: &ParamStore) -> Result<Self> {
        let layout = Self::layout(config)?;
        let widths = [layout.output_len(), config.hidden_width, 4];
        Ok(Self {
            layout: Arc::new(layout),
            grid: store.id(Self::GRID)?,
            mlp: Mlp::from_store(store, Self::DECODER, &widths, 1.0)?,
        })
    }

    fn lookup(x_warped: &[f64; 4]) -> [f64; 4] {
        let r = x_warped[3];
        [x_warped[0] / r, x_warped[1] / r, x_warped[2] / r, 1.0 / r]
    }

    /// `(density ≥ 0, rgb ∈ [0,1]³)`.
    pub fn query(&self, store: &ParamStore, x_warped: &[f64; 4]) -> (f64, [f64; 3]) {
        let inp = Self::lookup(x_warped);
        let mut enc = vec![0.0; self.layout.output_len()];
        self.layout.encode(store.values(self.grid), &inp, &mut enc);
        let mut out = Vec::new();
        self.mlp.forward(store, &enc, &mut out);
        (
            softplus(out[0], 1.0),
            [sigmoid(out[1]), sigmoid(out[2]), sigmoid(out[3])],
        )
    }

    /// Taped query over several warped points; returns `(density, rgb)`
    /// nodes with one entry (row) per point.
    pub fn query_graph(&self, g: &mut Graph<'_>, gather: usize, x_warped: &[[f64; 4]]) -> (Var, Var) {
        let flat: Vec<f64> = x_warped.iter().flat_map(Self::lookup).collect();
        let inp = g.constant(&flat);
        let enc = g.gather(gather, self.grid, inp);
        let out = self.mlp.forward_graph(g, enc);
        let raw_sigma = g.columns(out, 4, 0, 1);
        let sigma = g.softplus(raw_sigma, 1.0);
        let raw_rgb = g.columns(out, 4, 1, 3);
        (sigma, g.sigmoid(raw_rgb))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn unit_box() -> Aabb {
        Aabb::new(Vec3::new(-1.0, -1.0, -1.0), Vec3::new(1.0, 1.0, 1.0)).unwrap()
    }

    fn small_grid() -> HashGridConfig {
        HashGridConfig {
            level_count: 4,
            base_resolution: 4,
            per_level_scale: 2.0,
            table_size_log2: 10,
            feature_dim: 2,
        }
    }

    fn random_table(layout: &HashGridLayout, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..layout.param_count()).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn vertex_query_returns_stored_feature() {
        let b = unit_box();
        let layout = HashGridLayout::new(&small_grid(), b.min.as_slice(), b.max.as_slice()).unwrap();
        let table = random_table(&layout, 1);
        let mut out = vec![0.0; layout.output_len()];
        // level 0 has 4 cells per axis over [-1,1]: vertex (1,2,3) sits at (-0.5, 0, 0.5)
        layout.encode(&table, &[-0.5, 0.0, 0.5], &mut out);
        let e = layout.vertex_index(0, &[1, 2, 3]);
        assert_abs_diff_eq!(out[0], table[2 * e], epsilon = 1e-12);
        assert_abs_diff_eq!(out[1], table[2 * e + 1], epsilon = 1e-12);
    }

    #[test]
    fn cell_center_is_corner_mean() {
        let b = unit_box();
        let layout = HashGridLayout::new(&small_grid(), b.min.as_slice(), b.max.as_slice()).unwrap();
        let table = random_table(&layout, 2);
        let mut out = vec![0.0; layout.output_len()];
        // level 0 cell (0,0,0) spans [-1,-0.5]³
        layout.encode(&table, &[-0.75, -0.75, -0.75], &mut out);
        let mut mean = [0.0; 2];
        for c in 0..8u32 {
            let e = layout.vertex_index(0, &[c & 1, (c >> 1) & 1, (c >> 2) & 1]);
            mean[0] += table[2 * e] / 8.0;
            mean[1] += table[2 * e + 1] / 8.0;
        }
        assert_abs_diff_eq!(out[0], mean[0], epsilon = 1e-12);
        assert_abs_diff_eq!(out[1], mean[1], epsilon = 1e-12);
    }

    #[test]
    fn dense_levels_index_injectively() {
        let b = unit_box();
        let layout = HashGridLayout::new(&small_grid(), b.min.as_slice(), b.max.as_slice()).unwrap();
        for l in 0..layout.level_count() {
            if !layout.level_is_dense(l) {
                continue;
            }
            let n = layout.level_resolution(l) as u32 + 1;
            let mut seen = std::collections::HashSet::new();
            for x in 0..n {
                for y in 0..n {
                    for z in 0..n {
                        assert!(seen.insert(layout.vertex_index(l, &[x, y, z])));
                    }
                }
            }
        }
        assert!(layout.level_is_dense(0));
        assert!(!layout.level_is_dense(3)); // 33³ > 1024
    }

    #[test]
    fn gather_gradients_match_finite_differences() {
        let b = unit_box();
        let layout = Arc::new(HashGridLayout::new(&small_grid(), b.min.as_slice(), b.max.as_slice()).unwrap());
        let mut store = ParamStore::new();
        let tid = store
            .add("t", Category::HashGrid, vec![layout.param_count()], random_table(&layout, 5))
            .unwrap();
        let xid = store
            .add("x", Category::Pose, vec![3], vec![0.123, -0.377, 0.61])
            .unwrap();
        let weights: Vec<f64> = (0..layout.output_len()).map(|i| (i as f64 * 0.7).sin()).collect();
        let f = |p: &ParamStore| {
            let mut g = Graph::new(p);
            let op = g.register_gather(layout.clone());
            let x = g.param(xid, 0, 3);
            let e = g.gather(op, tid, x);
            let w = g.constant(&weights);
            let y = g.dot(e, w);
            let y2 = g.square(y);
            Ok((g.scalar(y2), g.backward(y2)?))
        };
        let (_, grads) = f(&store).unwrap();
        let mut coords: Vec<(BlockId, usize)> = (0..3).map(|i| (xid, i)).collect();
        coords.extend(
            grads.get(tid).iter().enumerate().filter(|(_, g)| **g != 0.0).map(|(i, _)| (tid, i)).take(20),
        );
        let rep = crate::autodiff::check_gradients_at(f, &store, 1e-7, &coords).unwrap();
        assert!(rep.max_rel_error < 1e-6, "{:?}", rep);
    }

    #[test]
    fn encode_is_continuous() {
        let b = unit_box();
        let layout = HashGridLayout::new(&small_grid(), b.min.as_slice(), b.max.as_slice()).unwrap();
        let table = random_table(&layout, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut a = vec![0.0; layout.output_len()];
        let mut c = vec![0.0; layout.output_len()];
        for _ in 0..500 {
            let x = [rng.random_range(-0.99..0.99), rng.random_range(-0.99..0.99), rng.random_range(-0.99..0.99)];
            let y = [x[0] + 1e-7, x[1] - 1e-7, x[2] + 1e-7];
            layout.encode(&table, &x, &mut a);
            layout.encode(&table, &y, &mut c);
            for (p, q) in a.iter().zip(&c) {
                assert!((p - q).abs() < 1e-5);
            }
        }
    }

    fn small_field(store: &mut ParamStore) -> SdfField {
        let b = Aabb::new(Vec3::new(-2.0, -2.0, -1.0), Vec3::new(2.0, 2.0, 1.0)).unwrap();
        let mut cfg = SdfFieldConfig::new(b);
        cfg.grid = HashGridConfig {
            level_count: 4,
            base_resolution: 8,
            per_level_scale: 1.5,
            table_size_log2: 12,
            feature_dim: 2,
        };
        cfg.hidden_width = 32;
        SdfField::new(cfg, store, 4).unwrap()
    }

    #[test]
    fn taped_query_matches_plain_query() {
        let mut store = ParamStore::new();
        let field = small_field(&mut store);
        let x = Vec3::new(0.3, -0.7, 0.2);
        let (s, feat) = field.query(&store, &x);
        let mut g = Graph::new(&store);
        let tape = field.tape(&mut g);
        let xv = g.constant(x.as_slice());
        let (sv, fv) = field.query_graph(&mut g, &tape, xv);
        assert_eq!(g.scalar(sv), s);
        assert_eq!(g.value(fv), feat.as_slice());
        // determinism
        assert_eq!(field.query(&store, &x).0.to_bits(), s.to_bits());
    }

    #[test]
    fn batched_query_matches_per_point() {
        let mut store = ParamStore::new();
        let field = small_field(&mut store);
        let pts = [
            Vec3::new(0.3, -0.7, 0.2),
            Vec3::new(-0.9, 0.1, 0.95),
            Vec3::new(1.4, 0.0, -0.3),
        ];
        let flat: Vec<f64> = pts.iter().flat_map(|p| p.iter().copied()).collect();
        let mut g = Graph::new(&store);
        let tape = field.tape(&mut g);
        let xv = g.constant(&flat);
        let (sv, fv) = field.query_graph(&mut g, &tape, xv);
        let z = field.config.feature_len;
        for (i, p) in pts.iter().enumerate() {
            let (s, feat) = field.query(&store, p);
            assert_eq!(g.value(sv)[i], s);
            assert_eq!(&g.value(fv)[i * z..(i + 1) * z], feat.as_slice());
        }
        let [gx, gy, gz] = field.gradient_graph(&mut g, &tape, xv);
        for (i, p) in pts.iter().enumerate() {
            let grad = field.sdf_gradient(&store, p);
            assert_eq!([g.value(gx)[i], g.value(gy)[i], g.value(gz)[i]], [grad.x, grad.y, grad.z]);
        }
    }

    #[test]
    fn plane_pretraining_fits_and_signs() {
        let mut store = ParamStore::new();
        let field = small_field(&mut store);
        let plane = Plane::new(Vec3::z(), 0.0);
        let bbox = field.config.bbox;
        let before = store.clone();
        init_to_plane(&field, &mut store, &plane, &bbox, 0, 1).unwrap();
        assert_eq!(store, before);
        let rep = init_to_plane(&field, &mut store, &plane, &bbox, 500, 1).unwrap();
        assert!(rep.rmse < 0.05, "rmse {}", rep.rmse);
        let up = field.sdf(&store, &Vec3::new(0.0, 0.0, 0.6));
        assert!(up > 0.5 && up < 0.7, "{up}");
        assert!(field.sdf(&store, &Vec3::new(0.0, 0.0, 0.0)).abs() < 0.05);
        let g = field.sdf_gradient(&store, &Vec3::new(0.5, 0.2, 0.1));
        assert!((g - Vec3::z()).norm() < 0.05, "{g:?}");
        let off = Plane::new(Vec3::z(), 5.0);
        assert!(matches!(
            init_to_plane(&field, &mut store, &off, &bbox, 1, 1),
            Err(Error::PlaneOutsideBox)
        ));
    }

    #[test]
    fn color_head_and_distant_ranges() {
        let mut store = ParamStore::new();
        let head = ColorHead::new(&ColorHeadConfig::default(), 15, &mut store, 1).unwrap();
        let distant = DistantField::new(&DistantFieldConfig::default(), &mut store, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z: Vec<f64> = (0..15).map(|_| rng.random_range(-3.0..3.0)).collect();
        let v = Vec3::new(0.3, -0.4, 0.8).normalize();
        let c = head.query(&store, &v, &z).unwrap();
        assert!(c.iter().all(|x| (0.0..=1.0).contains(x)));
        assert_eq!(c, head.query(&store, &v, &z).unwrap());
        assert!(matches!(
            head.query(&store, &Vec3::new(1.0, 1.0, 0.0), &z),
            Err(Error::NonUnitDirection(_))
        ));
        for _ in 0..1000 {
            let r = rng.random_range(1.0..1000.0);
            let x = [rng.random_range(-r..r), rng.random_range(-r..r), rng.random_range(-r..r), r];
            let (sigma, rgb) = distant.query(&store, &x);
            assert!(sigma >= 0.0);
            assert!(rgb.iter().all(|x| (0.0..=1.0).contains(x)));
            assert_eq!((sigma, rgb), distant.query(&store, &x));
        }
    }
}
