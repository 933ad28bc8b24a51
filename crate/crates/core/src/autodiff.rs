//! Reverse-mode differentiation over a recorded adjoint graph.
//!
//! Nodes hold short vectors of `f64` (scalars are length 1). Only the
//! primitive set the pipeline needs is supported; every variant of [`Op`] has
//! its adjoint in [`Graph::backward_into`], and an exhaustive `match` makes an
//! op without an adjoint a compile error. Parameter values live in a
//! [`ParamStore`]; the graph borrows it and reads weights in place.

use std::collections::HashMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub type BlockId = usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Category {
    HashGrid,
    Decoder,
    Sharpness,
    Pose,
    Color,
    Distant,
}

impl Category {
    pub const ALL: [Category; 6] = [
        Category::HashGrid,
        Category::Decoder,
        Category::Sharpness,
        Category::Pose,
        Category::Color,
        Category::Distant,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Category::HashGrid => "grid",
            Category::Decoder => "decoder",
            Category::Sharpness => "sharpness",
            Category::Pose => "pose",
            Category::Color => "color",
            Category::Distant => "distant",
        }
    }

    pub fn from_name(s: &str) -> Option<Category> {
        Category::ALL.into_iter().find(|c| c.name() == s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamBlock {
    pub name: String,
    pub category: Category,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Named parameter blocks with immutable shapes.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    blocks: Vec<ParamBlock>,
    index: HashMap<String, BlockId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        category: Category,
        shape: Vec<usize>,
        values: Vec<f64>,
    ) -> Result<BlockId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::InvalidConfig(format!("duplicate block `{name}`")));
        }
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(Error::DimensionMismatch(format!(
                "block `{name}`: shape {shape:?} holds {numel} values, got {}",
                values.len()
            )));
        }
        let id = self.blocks.len();
        self.index.insert(name.clone(), id);
        self.blocks.push(ParamBlock {
            name,
            category,
            shape,
            values,
        });
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Result<BlockId> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownBlock(name.to_string()))
    }

    pub fn block(&self, id: BlockId) -> &ParamBlock {
        &self.blocks[id]
    }

    pub fn blocks(&self) -> &[ParamBlock] {
        &self.blocks
    }

    pub fn values(&self, id: BlockId) -> &[f64] {
        &self.blocks[id].values
    }

    pub fn values_mut(&mut self, id: BlockId) -> &mut [f64] {
        &mut self.blocks[id].values
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.blocks.iter().map(|b| b.values.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.blocks
            .iter()
            .all(|b| b.values.iter().all(|v| v.is_finite()))
    }
}

/// Dense gradient buffers mirroring a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    blocks: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            blocks: store.blocks.iter().map(|b| vec![0.0; b.values.len()]).collect(),
        }
    }

    pub fn get(&self, id: BlockId) -> &[f64] {
        &self.blocks[id]
    }

    pub fn get_mut(&mut self, id: BlockId) -> &mut [f64] {
        &mut self.blocks[id]
    }

    pub fn fill_zero(&mut self) {
        for b in &mut self.blocks {
            b.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.blocks.iter_mut().zip(&other.blocks) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for b in &mut self.blocks {
            b.iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn check_finite(&self, store: &ParamStore) -> Result<()> {
        for (id, b) in self.blocks.iter().enumerate() {
            if b.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient(store.block(id).name.clone()));
            }
        }
        Ok(())
    }
}

/// A gather/scatter primitive such as multiresolution grid interpolation:
/// reads a parameter table at positions derived from a small input vector.
pub trait GatherOp: Send + Sync {
    fn input_len(&self) -> usize;
    fn output_len(&self) -> usize;
    fn forward(&self, table: &[f64], input: &[f64], out: &mut [f64]);
    /// Accumulates `∂L/∂table` and `∂L/∂input` given `∂L/∂out`.
    fn backward(
        &self,
        table: &[f64],
        input: &[f64],
        adj_out: &[f64],
        grad_table: &mut [f64],
        grad_input: &mut [f64],
    );
}

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(u32);

impl Var {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Clone, Copy, Debug)]
enum Op {
    Const,
    Param { block: BlockId, offset: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    Offset(Var),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    Square(Var),
    Abs(Var),
    Sigmoid(Var),
    Softplus(Var, f64),
    Clamp(Var, f64, f64),
    Max(Var, Var),
    Min(Var, Var),
    Sum(Var),
    Dot(Var, Var),
    Norm(Var),
    Broadcast(Var),
    Slice(Var, usize),
    Concat { start: usize, count: usize },
    CumProdExclusive(Var),
    Gather { op: usize, block: BlockId, input: Var },
    Linear { weight: BlockId, bias: BlockId, input: Var },
    Tile(Var),
    Columns { a: Var, cols: usize, start: usize },
    HStack { start: usize, count: usize, rows: usize },
    MatRows { m: Var, x: Var, n_in: usize },
    Index { a: Var, start: usize, count: usize, width: usize },
    SegSum { a: Var, start: usize },
    SegCumProdExclusive { a: Var, start: usize },
}

#[derive(Clone, Copy, Debug)]
struct Node {
    op: Op,
    start: usize,
    len: usize,
}

/// Recorded forward computation. Build with the op methods, then call
/// [`backward`](Graph::backward) on a scalar output.
pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    values: Vec<f64>,
    lists: Vec<Var>,
    indices: Vec<usize>,
    gathers: Vec<Arc<dyn GatherOp>>,
    adjoints: Vec<f64>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            values: Vec::new(),
            lists: Vec::new(),
            indices: Vec::new(),
            gathers: Vec::new(),
            adjoints: Vec::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    /// Drops all nodes but keeps allocations and registered gather ops.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.values.clear();
        self.lists.clear();
        self.indices.clear();
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn register_gather(&mut self, op: Arc<dyn GatherOp>) -> usize {
        self.gathers.push(op);
        self.gathers.len() - 1
    }

    pub fn value(&self, v: Var) -> &[f64] {
        let n = &self.nodes[v.index()];
        &self.values[n.start..n.start + n.len]
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    pub fn len(&self, v: Var) -> usize {
        self.nodes[v.index()].len
    }

    fn push(&mut self, op: Op, len: usize) -> (Var, usize) {
        let start = self.values.len();
        self.values.resize(start + len, 0.0);
        let id = self.nodes.len();
        self.nodes.push(Node { op, start, len });
        (Var(id as u32), start)
    }

    fn range(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.index()];
        (n.start, n.len)
    }

    pub fn constant(&mut self, values: &[f64]) -> Var {
        let (v, s) = self.push(Op::Const, values.len());
        self.values[s..s + values.len()].copy_from_slice(values);
        v
    }

    pub fn constant_scalar(&mut self, x: f64) -> Var {
        self.constant(&[x])
    }

    /// Differentiable view of `len` entries of a parameter block.
    pub fn param(&mut self, block: BlockId, offset: usize, len: usize) -> Var {
        let (v, s) = self.push(Op::Param { block, offset }, len);
        let src = &self.params.values(block)[offset..offset + len];
        self.values[s..s + len].copy_from_slice(src);
        v
    }

    fn unary(&mut self, op: Op, a: Var, f: impl Fn(f64) -> f64) -> Var {
        let (sa, n) = self.range(a);
        let (v, s) = self.push(op, n);
        for i in 0..n {
            self.values[s + i] = f(self.values[sa + i]);
        }
        v
    }

    fn binary(&mut self, op: Op, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Var {
        let (sa, na) = self.range(a);
        let (sb, nb) = self.range(b);
        assert_eq!(na, nb, "elementwise op on lengths {na} and {nb}");
        let (v, s) = self.push(op, na);
        for i in 0..na {
            self.values[s + i] = f(self.values[sa + i], self.values[sb + i]);
        }
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(Op::Add(a, b), a, b, |x, y| x + y)
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(Op::Sub(a, b), a, b, |x, y| x - y)
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(Op::Mul(a, b), a, b, |x, y| x * y)
    }
    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(Op::Div(a, b), a, b, |x, y| x / y)
    }
    pub fn max(&mut self, a: Var, b: Var) -> Var {
        self.binary(Op::Max(a, b), a, b, f64::max)
    }
    pub fn min(&mut self, a: Var, b: Var) -> Var {
        self.binary(Op::Min(a, b), a, b, f64::min)
    }
    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(Op::Neg(a), a, |x| -x)
    }
    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.unary(Op::Scale(a, k), a, |x| k * x)
    }
    pub fn offset(&mut self, a: Var, k: f64) -> Var {
        self.unary(Op::Offset(a), a, |x| x + k)
    }
    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(Op::Exp(a), a, f64::exp)
    }
    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(Op::Ln(a), a, f64::ln)
    }
    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(Op::Sqrt(a), a, f64::sqrt)
    }
    pub fn square(&mut self, a: Var) -> Var {
        self.unary(Op::Square(a), a, |x| x * x)
    }
    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(Op::Abs(a), a, f64::abs)
    }
    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(Op::Sigmoid(a), a, sigmoid)
    }
    /// `ln(1 + exp(βx)) / β`.
    pub fn softplus(&mut self, a: Var, beta: f64) -> Var {
        self.unary(Op::Softplus(a, beta), a, |x| softplus(x, beta))
    }
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(Op::Clamp(a, lo, hi), a, |x| x.clamp(lo, hi))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).iter().sum();
        let (v, st) = self.push(Op::Sum(a), 1);
        self.values[st] = s;
        v
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        let s: f64 = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .sum();
        assert_eq!(self.len(a), self.len(b));
        let (v, st) = self.push(Op::Dot(a, b), 1);
        self.values[st] = s;
        v
    }

    /// Euclidean norm; the subgradient at zero is taken as zero.
    pub fn norm(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().map(|x| x * x).sum::<f64>().sqrt();
        let (v, st) = self.push(Op::Norm(a), 1);
        self.values[st] = s;
        v
    }

    /// Repeats a scalar `n` times.
    pub fn broadcast(&mut self, a: Var, n: usize) -> Var {
        assert_eq!(self.len(a), 1);
        let x = self.scalar(a);
        let (v, s) = self.push(Op::Broadcast(a), n);
        self.values[s..s + n].iter_mut().for_each(|y| *y = x);
        v
    }

    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Var {
        let (sa, na) = self.range(a);
        assert!(start + len <= na);
        let (v, s) = self.push(Op::Slice(a, start), len);
        self.values.copy_within(sa + start..sa + start + len, s);
        v
    }

    pub fn element(&mut self, a: Var, i: usize) -> Var {
        self.slice(a, i, 1)
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let total: usize = parts.iter().map(|&p| self.len(p)).sum();
        let start = self.lists.len();
        self.lists.extend_from_slice(parts);
        let (v, mut s) = self.push(
            Op::Concat {
                start,
                count: parts.len(),
            },
            total,
        );
        for &p in parts {
            let (sp, np) = self.range(p);
            self.values.copy_within(sp..sp + np, s);
            s += np;
        }
        v
    }

    /// `out_i = ∏_{j<i} a_j` (so `out_0 = 1`).
    pub fn cumprod_exclusive(&mut self, a: Var) -> Var {
        let (sa, n) = self.range(a);
        let (v, s) = self.push(Op::CumProdExclusive(a), n);
        let mut acc = 1.0;
        for i in 0..n {
            self.values[s + i] = acc;
            acc *= self.values[sa + i];
        }
        v
    }

    /// Applies the gather row by row; `input` holds `rows × input_len` values.
    pub fn gather(&mut self, op: usize, block: BlockId, input: Var) -> Var {
        let g = self.gathers[op].clone();
        let (si, ni) = self.range(input);
        let (il, ol) = (g.input_len(), g.output_len());
        assert_eq!(ni % il, 0, "gather input length {ni} not a multiple of {il}");
        let rows = ni / il;
        let (v, s) = self.push(Op::Gather { op, block, input }, rows * ol);
        let table = self.params.values(block);
        let (head, tail) = self.values.split_at_mut(s);
        for r in 0..rows {
            g.forward(
                table,
                &head[si + r * il..si + (r + 1) * il],
                &mut tail[r * ol..(r + 1) * ol],
            );
        }
        v
    }

    /// `W x + b` with `W` stored row-major as `[out, in]`, applied to every
    /// row of a row-major `input`.
    pub fn linear(&mut self, weight: BlockId, bias: BlockId, input: Var) -> Var {
        let params = self.params;
        let w = params.values(weight);
        let b = params.values(bias);
        let n_out = b.len();
        let n_in = w.len() / n_out;
        let (si, len) = self.range(input);
        assert_eq!(w.len(), n_in * n_out, "linear layer shape mismatch");
        assert_eq!(len % n_in, 0, "linear input length {len} not a multiple of {n_in}");
        let rows = len / n_in;
        let (v, s) = self.push(
            Op::Linear {
                weight,
                bias,
                input,
            },
            rows * n_out,
        );
        let (head, tail) = self.values.split_at_mut(s);
        for r in 0..rows {
            let x = &head[si + r * n_in..si + (r + 1) * n_in];
            for (o, out) in tail[r * n_out..(r + 1) * n_out].iter_mut().enumerate() {
                *out = b[o] + dot(&w[o * n_in..(o + 1) * n_in], x);
            }
        }
        v
    }

    /// Repeats the whole vector `reps` times.
    pub fn tile(&mut self, a: Var, reps: usize) -> Var {
        let (sa, na) = self.range(a);
        let (v, s) = self.push(Op::Tile(a), na * reps);
        for r in 0..reps {
            self.values.copy_within(sa..sa + na, s + r * na);
        }
        v
    }

    /// Columns `start..start + width` of a row-major matrix with `cols` columns.
    pub fn columns(&mut self, a: Var, cols: usize, start: usize, width: usize) -> Var {
        let (sa, na) = self.range(a);
        assert!(na % cols == 0 && start + width <= cols);
        let rows = na / cols;
        let (v, s) = self.push(Op::Columns { a, cols, start }, rows * width);
        for r in 0..rows {
            self.values
                .copy_within(sa + r * cols + start..sa + r * cols + start + width, s + r * width);
        }
        v
    }

    /// Horizontal concatenation of row-major matrices sharing `rows`.
    pub fn hstack(&mut self, parts: &[Var], rows: usize) -> Var {
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let n = self.len(p);
                assert_eq!(n % rows, 0);
                n / rows
            })
            .collect();
        let total: usize = widths.iter().sum();
        let start = self.lists.len();
        self.lists.extend_from_slice(parts);
        let (v, s) = self.push(
            Op::HStack {
                start,
                count: parts.len(),
                rows,
            },
            rows * total,
        );
        for r in 0..rows {
            let mut pos = s + r * total;
            for (&p, &w) in parts.iter().zip(&widths) {
                let sp = self.range(p).0;
                self.values.copy_within(sp + r * w..sp + (r + 1) * w, pos);
                pos += w;
            }
        }
        v
    }

    /// `out_r = M x_r` for every row `x_r` of `x`, with `M` a row-major
    /// `[n_out, n_in]` node.
    pub fn mat_rows(&mut self, m: Var, x: Var, n_in: usize) -> Var {
        let (sm, nm) = self.range(m);
        let (sx, nx) = self.range(x);
        assert!(nm % n_in == 0 && nx % n_in == 0);
        let n_out = nm / n_in;
        let rows = nx / n_in;
        let (v, s) = self.push(Op::MatRows { m, x, n_in }, rows * n_out);
        for r in 0..rows {
            for o in 0..n_out {
                let mut acc = 0.0;
                for i in 0..n_in {
                    acc += self.values[sm + o * n_in + i] * self.values[sx + r * n_in + i];
                }
                self.values[s + r * n_out + o] = acc;
            }
        }
        v
    }

    /// Row gather: `out_r = a[idx_r]` with rows of `width` entries.
    pub fn index(&mut self, a: Var, idx: &[usize], width: usize) -> Var {
        let (sa, na) = self.range(a);
        assert!(idx.iter().all(|&i| (i + 1) * width <= na));
        let start = self.indices.len();
        self.indices.extend_from_slice(idx);
        let (v, s) = self.push(
            Op::Index {
                a,
                start,
                count: idx.len(),
                width,
            },
            idx.len() * width,
        );
        for (r, &i) in idx.iter().enumerate() {
            self.values
                .copy_within(sa + i * width..sa + (i + 1) * width, s + r * width);
        }
        v
    }

    fn push_segments(&mut self, a: Var, offsets: &[usize]) -> usize {
        assert!(offsets.len() >= 1 && offsets[0] == 0);
        assert_eq!(*offsets.last().unwrap(), self.len(a));
        assert!(offsets.windows(2).all(|w| w[0] <= w[1]));
        let start = self.indices.len();
        self.indices.push(offsets.len());
        self.indices.extend_from_slice(offsets);
        start
    }

    /// Per-segment sums; segment `k` spans `offsets[k]..offsets[k + 1]`.
    pub fn seg_sum(&mut self, a: Var, offsets: &[usize]) -> Var {
        let start = self.push_segments(a, offsets);
        let sa = self.range(a).0;
        let (v, s) = self.push(Op::SegSum { a, start }, offsets.len() - 1);
        for k in 0..offsets.len() - 1 {
            self.values[s + k] = self.values[sa + offsets[k]..sa + offsets[k + 1]].iter().sum();
        }
        v
    }

    /// [`cumprod_exclusive`](Graph::cumprod_exclusive) restarted at every
    /// segment.
    pub fn seg_cumprod_exclusive(&mut self, a: Var, offsets: &[usize]) -> Var {
        let start = self.push_segments(a, offsets);
        let (sa, n) = self.range(a);
        let (v, s) = self.push(Op::SegCumProdExclusive { a, start }, n);
        for k in 0..offsets.len() - 1 {
            let mut acc = 1.0;
            for i in offsets[k]..offsets[k + 1] {
                self.values[s + i] = acc;
                acc *= self.values[sa + i];
            }
        }
        v
    }

    /// Gradients of scalar `output` with respect to every parameter block.
    pub fn backward(&mut self, output: Var) -> Result<Gradients> {
        let mut grads = Gradients::zeros_like(self.params);
        self.backward_into(output, 1.0, &mut grads)?;
        Ok(grads)
    }

    /// Accumulates `seed · ∂output/∂θ` into `grads`. Nodes are visited in
    /// reverse creation order, which is a reverse topological order.
    pub fn backward_into(&mut self, output: Var, seed: f64, grads: &mut Gradients) -> Result<()> {
        if self.len(output) != 1 {
            return Err(Error::NonScalarOutput(output.index()));
        }
        let total = self.values.len();
        self.adjoints.clear();
        self.adjoints.resize(total, 0.0);
        let (so, _) = self.range(output);
        self.adjoints[so] = seed;

        let values = &self.values;
        let adj = &mut self.adjoints;
        for idx in (0..=output.index()).rev() {
            let node = self.nodes[idx];
            let (s, n) = (node.start, node.len);
            if adj[s..s + n].iter().all(|&a| a == 0.0) {
                continue;
            }
            let rng = |v: Var| {
                let m = &self.nodes[v.index()];
                (m.start, m.len)
            };
            match node.op {
                Op::Const => {}
                Op::Param { block, offset } => {
                    check_adjoint(&adj[s..s + n], self.params, block)?;
                    let g = &mut grads.blocks[block][offset..offset + n];
                    for i in 0..n {
                        g[i] += adj[s + i];
                    }
                }
                Op::Add(a, b) => {
                    let (sa, sb) = (rng(a).0, rng(b).0);
                    for i in 0..n {
                        let g = adj[s + i];
                        adj[sa + i] += g;
                        adj[sb + i] += g;
                    }
                }
                Op::Sub(a, b) => {
                    let (sa, sb) = (rng(a).0, rng(b).0);
                    for i in 0..n {
                        let g = adj[s + i];
                        adj[sa + i] += g;
                        adj[sb + i] -= g;
                    }
                }
                Op::Mul(a, b) => {
                    let (sa, sb) = (rng(a).0, rng(b).0);
                    for i in 0..n {
                        let g = adj[s + i];
                        adj[sa + i] += g * values[sb + i];
                        adj[sb + i] += g * values[sa + i];
                    }
                }
                Op::Div(a, b) => {
                    let (sa, sb) = (rng(a).0, rng(b).0);
                    for i in 0..n {
                        let g = adj[s + i];
                        let y = values[sb + i];
                        adj[sa + i] += g / y;
                        adj[sb + i] -= g * values[s + i] / y;
                    }
                }
                Op::Neg(a) => {
                    let sa = rng(a).0;
                    for i in 0..n {
                        adj[sa + i] -= adj[s + i];
                    }
                }
                Op::Scale(a, k) => {
                    let sa = rng(a).0;
                    for i in 0..n {
                        adj[sa + i] += k * adj[s + i];
                    }
                }
                Op::Offset(a) => {
                    let sa = rng(a).0;
                    for i in 0..n {
                        adj[sa + i] += adj[s + i];
                    }
                }
                Op::Exp(a) => {
                    let sa = rng(a).0;
                    for i in 0..n {
                        adj[sa + i] += adj[s + i] * values[s + i];
                    }
                }
                Op::Ln(a) => {
                    let sa = rng(a).0;
                    for i in 0..n {
                        adj[sa + i] += adj[s + i] / values[sa + i];
                    }
                }
                Op::Sqrt(a) => {
                    let sa = rng(a).0;
                    for i in 0..n {
                        adj[sa + i] += adj[s + i] * 0.5 / values[s + i];
                    }
                }
                Op::Square(a) => {
                    let sa = rng(a).0;
                    for i in 0..n {
                        adj[sa + i] += adj[s + i] * 2.0 * values[sa + i];
                    }
                }
                Op::Abs(a) => {
                    let sa = rng(a).0;
                    for i in 0..n {
                        let x = values[sa + i];
                        let sgn = if x > 0.0 {
                            1.0
                        } else if x < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        adj[sa + i] += adj[s + i] * sgn;
                    }
                }
                Op::Sigmoid(a) => {
                    let sa = rng(a).0;
                    for i in 0..n {
                        let y = values[s + i];
                        adj[sa + i] += adj[s + i] * y * (1.0 - y);
                    }
                }
                Op::Softplus(a, beta) => {
                    let sa = rng(a).0;
                    for i in 0..n {
                        adj[sa + i] += adj[s + i] * sigmoid(beta * values[sa + i]);
                    }
                }
                Op::Clamp(a, lo, hi) => {
                    let sa = rng(a).0;
                    for i in 0..n {
                        let x = values[sa + i];
                        if x > lo && x < hi {
                            adj[sa + i] += adj[s + i];
                        }
                    }
                }
                Op::Max(a, b) | Op::Min(a, b) => {
                    let is_max = matches!(node.op, Op::Max(..));
                    let (sa, sb) = (rng(a).0, rng(b).0);
                    for i in 0..n {
                        let (x, y) = (values[sa + i], values[sb + i]);
                        let pick_a = if is_max { x >= y } else { x <= y };
                        if pick_a {
                            adj[sa + i] += adj[s + i];
                        } else {
                            adj[sb + i] += adj[s + i];
                        }
                    }
                }
                Op::Sum(a) => {
                    let (sa, na) = rng(a);
                    let g = adj[s];
                    for i in 0..na {
                        adj[sa + i] += g;
                    }
                }
                Op::Dot(a, b) => {
                    let (sa, na) = rng(a);
                    let sb = rng(b).0;
                    let g = adj[s];
                    for i in 0..na {
                        adj[sa + i] += g * values[sb + i];
                        adj[sb + i] += g * values[sa + i];
                    }
                }
                Op::Norm(a) => {
                    let (sa, na) = rng(a);
                    let r = values[s];
                    if r > 0.0 {
                        let g = adj[s] / r;
                        for i in 0..na {
                            adj[sa + i] += g * values[sa + i];
                        }
                    }
                }
                Op::Broadcast(a) => {
                    let sa = rng(a).0;
                    let g: f64 = adj[s..s + n].iter().sum();
                    adj[sa] += g;
                }
                Op::Slice(a, off) => {
                    let sa = rng(a).0 + off;
                    for i in 0..n {
                        adj[sa + i] += adj[s + i];
                    }
                }
                Op::Concat { start, count } => {
                    let mut pos = s;
                    for &p in &self.lists[start..start + count] {
                        let (sp, np) = rng(p);
                        for i in 0..np {
                            adj[sp + i] += adj[pos + i];
                        }
                        pos += np;
                    }
                }
                Op::CumProdExclusive(a) => {
                    // grad a_j = out_j · S_j with S_j = adj_{j+1} + a_{j+1} S_{j+1}
                    let sa = rng(a).0;
                    let mut acc = 0.0;
                    for j in (0..n).rev() {
                        if j + 1 < n {
                            acc = adj[s + j + 1] + values[sa + j + 1] * acc;
                        }
                        adj[sa + j] += values[s + j] * acc;
                    }
                }
                Op::Gather { op, block, input } => {
                    check_adjoint(&adj[s..s + n], self.params, block)?;
                    let g = &self.gathers[op];
                    let (si, ni) = rng(input);
                    let (il, ol) = (g.input_len(), g.output_len());
                    let mut gin = [0.0f64; 8];
                    for r in 0..ni / il {
                        let gin = &mut gin[..il];
                        gin.fill(0.0);
                        g.backward(
                            self.params.values(block),
                            &values[si + r * il..si + (r + 1) * il],
                            &adj[s + r * ol..s + (r + 1) * ol],
                            &mut grads.blocks[block],
                            gin,
                        );
                        for i in 0..il {
                            adj[si + r * il + i] += gin[i];
                        }
                    }
                }
                Op::Linear {
                    weight,
                    bias,
                    input,
                } => {
                    check_adjoint(&adj[s..s + n], self.params, weight)?;
                    let w = self.params.values(weight);
                    let n_out = self.params.values(bias).len();
                    let n_in = w.len() / n_out;
                    let si = rng(input).0;
                    for r in 0..n / n_out {
                        let ao = s + r * n_out;
                        let xi = si + r * n_in;
                        {
                            let gb = &mut grads.blocks[bias];
                            for o in 0..n_out {
                                gb[o] += adj[ao + o];
                            }
                        }
                        let gw = &mut grads.blocks[weight];
                        for o in 0..n_out {
                            let g = adj[ao + o];
                            if g == 0.0 {
                                continue;
                            }
                            let row = &mut gw[o * n_in..(o + 1) * n_in];
                            for (rw, xv) in row.iter_mut().zip(&values[xi..xi + n_in]) {
                                *rw += g * xv;
                            }
                            let wrow = &w[o * n_in..(o + 1) * n_in];
                            for j in 0..n_in {
                                adj[xi + j] += g * wrow[j];
                            }
                        }
                    }
                }
                Op::Tile(a) => {
                    let (sa, na) = rng(a);
                    for r in 0..n / na {
                        for i in 0..na {
                            adj[sa + i] += adj[s + r * na + i];
                        }
                    }
                }
                Op::Columns { a, cols, start } => {
                    let (sa, na) = rng(a);
                    let rows = na / cols;
                    let width = n / rows;
                    for r in 0..rows {
                        for i in 0..width {
                            adj[sa + r * cols + start + i] += adj[s + r * width + i];
                        }
                    }
                }
                Op::HStack { start, count, rows } => {
                    let total = n / rows;
                    let mut col = 0;
                    for &p in &self.lists[start..start + count] {
                        let (sp, np) = rng(p);
                        let w = np / rows;
                        for r in 0..rows {
                            for i in 0..w {
                                adj[sp + r * w + i] += adj[s + r * total + col + i];
                            }
                        }
                        col += w;
                    }
                }
                Op::MatRows { m, x, n_in } => {
                    let (sm, nm) = rng(m);
                    let (sx, nx) = rng(x);
                    let n_out = nm / n_in;
                    for r in 0..nx / n_in {
                        for o in 0..n_out {
                            let g = adj[s + r * n_out + o];
                            if g == 0.0 {
                                continue;
                            }
                            for i in 0..n_in {
                                adj[sm + o * n_in + i] += g * values[sx + r * n_in + i];
                                adj[sx + r * n_in + i] += g * values[sm + o * n_in + i];
                            }
                        }
                    }
                }
                Op::Index {
                    a,
                    start,
                    count,
                    width,
                } => {
                    let sa = rng(a).0;
                    for (r, &i) in self.indices[start..start + count].iter().enumerate() {
                        for c in 0..width {
                            adj[sa + i * width + c] += adj[s + r * width + c];
                        }
                    }
                }
                Op::SegSum { a, start } => {
                    let sa = rng(a).0;
                    let offs = segments(&self.indices, start);
                    for k in 0..offs.len() - 1 {
                        let g = adj[s + k];
                        for i in offs[k]..offs[k + 1] {
                            adj[sa + i] += g;
                        }
                    }
                }
                Op::SegCumProdExclusive { a, start } => {
                    let sa = rng(a).0;
                    let offs = segments(&self.indices, start);
                    for k in 0..offs.len() - 1 {
                        let (lo, hi) = (offs[k], offs[k + 1]);
                        let mut acc = 0.0;
                        for j in (lo..hi).rev() {
                            if j + 1 < hi {
                                acc = adj[s + j + 1] + values[sa + j + 1] * acc;
                            }
                            adj[sa + j] += values[s + j] * acc;
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

fn segments(indices: &[usize], start: usize) -> &[usize] {
    let n = indices[start];
    &indices[start + 1..start + 1 + n]
}

fn check_adjoint(adj: &[f64], params: &ParamStore, block: BlockId) -> Result<()> {
    if adj.iter().all(|a| a.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteGradient(params.block(block).name.clone()))
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    // four accumulators let the compiler vectorise
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        for k in 0..4 {
            acc[k] += a[4 * c + k] * b[4 * c + k];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in 4 * chunks..a.len() {
        s += a[i] * b[i];
    }
    s
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn softplus(x: f64, beta: f64) -> f64 {
    let z = beta * x;
    if z > 30.0 {
        x
    } else {
        z.exp().ln_1p() / beta
    }
}

/// Adam moments and hyperparameters. Learning rates are per [`Category`];
/// a category without an entry is frozen.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub learning_rates: HashMap<Category, f64>,
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(store: &ParamStore, learning_rates: HashMap<Category, f64>) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            learning_rates,
            t: 0,
            m: store.blocks.iter().map(|b| vec![0.0; b.values.len()]).collect(),
            v: store.blocks.iter().map(|b| vec![0.0; b.values.len()]).collect(),
        }
    }

    pub fn first_moment(&self, id: BlockId) -> &[f64] {
        &self.m[id]
    }

    pub fn second_moment(&self, id: BlockId) -> &[f64] {
        &self.v[id]
    }
}

/// One bias-corrected Adam step; `lr_scale` multiplies every category rate
/// (used for schedules).
pub fn adam_step(
    params: &mut ParamStore,
    grads: &Gradients,
    state: &mut AdamState,
    lr_scale: f64,
) -> Result<()> {
    grads.check_finite(params)?;
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    for (id, block) in params.blocks.iter_mut().enumerate() {
        let lr = state
            .learning_rates
            .get(&block.category)
            .copied()
            .unwrap_or(0.0)
            * lr_scale;
        let g = &grads.blocks[id];
        let m = &mut state.m[id];
        let v = &mut state.v[id];
        for i in 0..g.len() {
            let gi = g[i];
            if gi == 0.0 && m[i] == 0.0 && v[i] == 0.0 {
                continue;
            }
            m[i] = b1 * m[i] + (1.0 - b1) * gi;
            v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
            if lr != 0.0 {
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                block.values[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }
    if !params.all_finite() {
        return Err(Error::NonFiniteGradient("parameter update".into()));
    }
    Ok(())
}

/// Per-coordinate outcome of a finite-difference check.
#[derive(Clone, Debug)]
pub struct GradientSample {
    pub block: BlockId,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradientCheckReport {
    pub samples: Vec<GradientSample>,
    pub max_rel_error: f64,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Central differences at explicit coordinates.
pub fn check_gradients_at<F>(
    loss_fn: F,
    params: &ParamStore,
    h: f64,
    coords: &[(BlockId, usize)],
) -> Result<GradientCheckReport>
where
    F: Fn(&ParamStore) -> Result<(f64, Gradients)>,
{
    let (_, grads) = loss_fn(params)?;
    let mut work = params.clone();
    let mut samples = Vec::with_capacity(coords.len());
    for &(block, index) in coords {
        let x0 = work.values(block)[index];
        work.values_mut(block)[index] = x0 + h;
        let fp = loss_fn(&work)?.0;
        work.values_mut(block)[index] = x0 - h;
        let fm = loss_fn(&work)?.0;
        work.values_mut(block)[index] = x0;
        let numeric = (fp - fm) / (2.0 * h);
        let analytic = grads.get(block)[index];
        samples.push(GradientSample {
            block,
            index,
            analytic,
            numeric,
            rel_error: relative_error(analytic, numeric),
        });
    }
    let max_rel_error = samples.iter().map(|s| s.rel_error).fold(0.0, f64::max);
    Ok(GradientCheckReport {
        samples,
        max_rel_error,
    })
}

/// Central differences on `sample_count` coordinates drawn uniformly over all
/// parameters. Returns the maximum relative error.
pub fn check_gradients<F>(
    loss_fn: F,
    params: &ParamStore,
    h: f64,
    sample_count: usize,
    seed: u64,
) -> Result<f64>
where
    F: Fn(&ParamStore) -> Result<(f64, Gradients)>,
{
    let total = params.numel();
    if total == 0 {
        return Ok(0.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut coords = Vec::with_capacity(sample_count);
    for _ in 0..sample_count {
        let mut flat = rng.random_range(0..total);
        for (id, b) in params.blocks().iter().enumerate() {
            if flat < b.values.len() {
                coords.push((id, flat));
                break;
            }
            flat -= b.values.len();
        }
    }
    Ok(check_gradients_at(loss_fn, params, h, &coords)?.max_rel_error)
}
