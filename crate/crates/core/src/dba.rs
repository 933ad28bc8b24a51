//! Dense bundle adjustment: joint optimization of the close-range SDF, the
//! optional color models and the camera poses against flow, disparity and
//! photometric observations.

use std::collections::{BTreeMap, HashMap};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{
    adam_step, check_gradients_at, AdamState, BlockId, Category, GradientCheckReport, Gradients, Graph, ParamStore, Var,
};
use crate::error::{Error, Result};
use crate::field::{
    init_to_plane, ColorHead, ColorHeadConfig, DistantField, DistantFieldConfig, HashGridConfig, PretrainReport,
    SdfField, SdfFieldConfig,
};
use crate::geometry::{cast_ray, ransac_plane, triangulate, Aabb, CameraIntrinsics, Frame, Plane, Vec2, Vec3};
use crate::io::{Checkpoint, CheckpointHeader, Dataset, Image, PixelMap};
use crate::losses::{
    disparity_loss_graph, entropy_loss_graph, flow_loss_graph, photometric_loss_graph, regularizers_graph,
    total_loss, LossConfig, LossCounts, LossReport, LossTerms,
};
use crate::mesh::{marching_cubes, CellGrid, Mesh};
use crate::metrics::{ate, trajectory_of};
use crate::rendering::{
    pose_graph, render_chunk_graph, render_depth, shade_ray, ChunkModels, PoseTape, RayChunk, RenderConfig,
    RenderRequest, RenderTape,
};
use crate::sampling::{build_octree, cull_samples, sample_distant, sample_ray, update_octree, Octree, RaySamples};

/// Environment variable overriding the worker thread count.
pub const THREADS_ENV: &str = "NUDBA_THREADS";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearningRates {
    pub grid: f64,
    pub decoder: f64,
    pub sharpness: f64,
    pub pose: f64,
    pub color: f64,
    pub distant: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            grid: 1e-2,
            decoder: 1e-3,
            sharpness: 1e-3,
            pose: 1e-4,
            color: 1e-3,
            distant: 1e-2,
        }
    }
}

impl LearningRates {
    fn by_category(&self) -> [(Category, f64); 6] {
        [
            (Category::HashGrid, self.grid),
            (Category::Decoder, self.decoder),
            (Category::Sharpness, self.sharpness),
            (Category::Pose, self.pose),
            (Category::Color, self.color),
            (Category::Distant, self.distant),
        ]
    }
}

/// Field architecture; the bounding box is taken from the problem.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FieldOptions {
    pub grid: HashGridConfig,
    pub hidden_layers: usize,
    pub hidden_width: usize,
    pub feature_len: usize,
    pub softplus_beta: f64,
    pub initial_sharpness: f64,
}

impl Default for FieldOptions {
    fn default() -> Self {
        let c = SdfFieldConfig::new(Aabb {
            min: Vec3::zeros(),
            max: Vec3::repeat(1.0),
        });
        Self {
            grid: c.grid,
            hidden_layers: c.hidden_layers,
            hidden_width: c.hidden_width,
            feature_len: c.feature_len,
            softplus_beta: c.softplus_beta,
            initial_sharpness: c.initial_sharpness,
        }
    }
}

impl FieldOptions {
    pub fn field_config(&self, bbox: Aabb) -> SdfFieldConfig {
        SdfFieldConfig {
            grid: self.grid.clone(),
            hidden_layers: self.hidden_layers,
            hidden_width: self.hidden_width,
            feature_len: self.feature_len,
            softplus_beta: self.softplus_beta,
            initial_sharpness: self.initial_sharpness,
            ..SdfFieldConfig::new(bbox)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InitConfig {
    /// Pixel stride of the correspondences used for triangulation.
    pub stride: usize,
    /// Minimum angle between the two viewing rays, radians.
    pub min_parallax: f64,
    /// Points farther out than this multiple of the close box are dropped.
    pub box_scale: f64,
    pub min_points: usize,
    pub ransac_threshold: f64,
    pub ransac_iterations: usize,
    pub pretrain_steps: usize,
    /// Occupied leaves are grown by this many leaves in every direction.
    pub dilation: usize,
    /// Triangulate stereo correspondences instead of flow when disparity
    /// maps are available.
    pub use_stereo: bool,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            stride: 8,
            min_parallax: 1e-3,
            box_scale: 3.0,
            min_points: 100,
            ransac_threshold: 0.05,
            ransac_iterations: 500,
            pretrain_steps: 300,
            dilation: 1,
            use_stereo: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DbaConfig {
    pub total_iterations: usize,
    pub rays_per_iteration: usize,
    pub learning_rates: LearningRates,
    /// Final fraction of every learning rate under the cosine schedule.
    pub lr_floor: f64,
    pub pose_opt_start_iteration: usize,
    pub optimize_poses: bool,
    /// Culling starts after this fraction of the iterations.
    pub cull_start_fraction: f64,
    /// Culling threshold in units of the largest leaf edge.
    pub cull_leaf_multiple: f64,
    pub octree_update_interval: usize,
    /// Occupancy band in units of the leaf diagonal.
    pub octree_band_leaf_multiple: f64,
    pub samples_per_voxel: usize,
    /// Ray samples per iteration used for the eikonal and sparsity terms;
    /// a further quarter as many uniform points in the close box are added.
    pub regularizer_points: usize,
    pub checkpoint_interval: usize,
    pub log_interval: usize,
    pub seed: u64,
    /// Worker threads; `None` reads `NUDBA_THREADS` and falls back to one
    /// thread per core.
    pub threads: Option<usize>,
    /// Single-threaded, bitwise reproducible execution.
    pub serial: bool,
    pub init: InitConfig,
    pub field: FieldOptions,
    pub color: ColorHeadConfig,
    pub distant: DistantFieldConfig,
    pub loss: LossConfig,
    pub render: RenderConfig,
}

impl Default for DbaConfig {
    fn default() -> Self {
        Self {
            total_iterations: 20_000,
            rays_per_iteration: 8192,
            learning_rates: LearningRates::default(),
            lr_floor: 0.1,
            pose_opt_start_iteration: 1000,
            optimize_poses: true,
            cull_start_fraction: 0.6,
            cull_leaf_multiple: 2.0,
            octree_update_interval: 1000,
            octree_band_leaf_multiple: 2.0,
            samples_per_voxel: 4,
            regularizer_points: 1024,
            checkpoint_interval: 1000,
            log_interval: 100,
            seed: 0,
            threads: None,
            serial: false,
            init: InitConfig::default(),
            field: FieldOptions::default(),
            color: ColorHeadConfig::default(),
            distant: DistantFieldConfig::default(),
            loss: LossConfig::default(),
            render: RenderConfig::default(),
        }
    }
}

impl DbaConfig {
    /// Sizes for the bundled synthetic scenes: a smaller field and batch that
    /// converge in minutes on one core.
    pub fn compact() -> Self {
        Self {
            total_iterations: 3000,
            rays_per_iteration: 256,
            pose_opt_start_iteration: 500,
            octree_update_interval: 0,
            octree_band_leaf_multiple: 0.0,
            samples_per_voxel: 2,
            learning_rates: LearningRates {
                sharpness: 1e-2,
                ..LearningRates::default()
            },
            checkpoint_interval: 500,
            regularizer_points: 128,
            init: InitConfig {
                stride: 4,
                pretrain_steps: 200,
                ..InitConfig::default()
            },
            field: FieldOptions {
                grid: HashGridConfig {
                    level_count: 8,
                    base_resolution: 16,
                    per_level_scale: 1.5,
                    table_size_log2: 15,
                    feature_dim: 2,
                },
                hidden_width: 32,
                ..FieldOptions::default()
            },
            color: ColorHeadConfig { hidden_width: 32 },
            distant: DistantFieldConfig {
                grid: HashGridConfig {
                    level_count: 4,
                    base_resolution: 16,
                    per_level_scale: 1.5,
                    table_size_log2: 14,
                    feature_dim: 2,
                },
                hidden_width: 16,
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.total_iterations == 0 {
            return bad("total_iterations must be positive");
        }
        if self.rays_per_iteration == 0 {
            return bad("rays_per_iteration must be positive");
        }
        if self.samples_per_voxel == 0 {
            return bad("samples_per_voxel must be positive");
        }
        if !(0.0..=1.0).contains(&self.cull_start_fraction) {
            return bad("cull_start_fraction must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.lr_floor) {
            return bad("lr_floor must lie in [0, 1]");
        }
        if self.init.stride == 0 {
            return bad("init.stride must be positive");
        }
        if self.threads == Some(0) {
            return bad("threads must be positive");
        }
        let lrs = self.learning_rates.by_category();
        if lrs.iter().any(|(_, v)| !(*v >= 0.0)) {
            return bad("learning rates must be nonnegative");
        }
        self.loss.validate()?;
        self.render.validate()?;
        self.field.grid.validate()
    }

    pub fn uses_color(&self) -> bool {
        self.loss.use_photometric || self.render.use_color
    }

    /// Effective worker count.
    pub fn thread_count(&self) -> usize {
        if self.serial {
            return 1;
        }
        self.threads
            .or_else(|| std::env::var(THREADS_ENV).ok().and_then(|v| v.parse().ok()))
            .filter(|&n| n > 0)
            .unwrap_or_else(rayon::current_num_threads)
    }

    /// Cosine decay from 1 to `lr_floor` over the run.
    pub fn lr_scale(&self, iteration: usize) -> f64 {
        let p = (iteration as f64 / self.total_iterations as f64).min(1.0);
        self.lr_floor + (1.0 - self.lr_floor) * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())
    }

    pub fn cull_start(&self) -> usize {
        (self.cull_start_fraction * self.total_iterations as f64).round() as usize
    }
}

/// Dense flow from `source` to `target` (indices into [`Problem::frames`]).
#[derive(Clone, Debug, PartialEq)]
pub struct FlowObservation {
    pub source: usize,
    pub target: usize,
    pub map: PixelMap,
}

/// Observations and cameras to optimize.
#[derive(Clone, Debug, PartialEq)]
pub struct Problem {
    pub frames: Vec<Frame>,
    /// Ground-truth cameras, when known; only used for reporting.
    pub reference: Option<Vec<Frame>>,
    pub flows: Vec<FlowObservation>,
    pub disparities: Vec<Option<PixelMap>>,
    pub images: Vec<Option<Image>>,
    pub close_box: Aabb,
    pub octree_depth: u32,
    pub shell_count: usize,
    pub r_max: f64,
}

impl Problem {
    pub fn from_dataset(ds: &Dataset) -> Result<Self> {
        let k = ds.config.trajectory.intrinsics;
        let frames: Vec<Frame> = ds.poses.iter().map(|(id, p)| Frame::new(*id, k, *p)).collect();
        let reference = ds
            .poses_gt
            .as_ref()
            .map(|t| t.iter().map(|(id, p)| Frame::new(*id, k, *p)).collect());
        let mut problem = Problem {
            disparities: vec![None; frames.len()],
            images: vec![None; frames.len()],
            frames,
            reference,
            flows: Vec::new(),
            close_box: ds.config.close_box,
            octree_depth: ds.config.octree_depth,
            shell_count: ds.config.shell_count,
            r_max: ds.config.r_max,
        };
        for ((j, kk), map) in &ds.flows {
            problem.flows.push(FlowObservation {
                source: problem.index_of(*j)?,
                target: problem.index_of(*kk)?,
                map: map.clone(),
            });
        }
        for (j, map) in &ds.disparities {
            let i = problem.index_of(*j)?;
            problem.disparities[i] = Some(map.clone());
        }
        for (j, img) in &ds.images {
            let i = problem.index_of(*j)?;
            problem.images[i] = Some(img.clone());
        }
        problem.validate()?;
        Ok(problem)
    }

    pub fn index_of(&self, id: usize) -> Result<usize> {
        self.frames
            .iter()
            .position(|f| f.id == id)
            .ok_or_else(|| Error::InvalidConfig(format!("no frame with id {id}")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames.is_empty() {
            return Err(Error::InvalidConfig("no frames".into()));
        }
        if let Some(r) = &self.reference {
            if r.len() != self.frames.len() || r.iter().zip(&self.frames).any(|(a, b)| a.id != b.id) {
                return Err(Error::CountMismatch(r.len(), self.frames.len()));
            }
        }
        for f in &self.flows {
            if f.source >= self.frames.len() || f.target >= self.frames.len() || f.source == f.target {
                return Err(Error::InvalidConfig("flow pair references invalid frames".into()));
            }
            if f.map.channels != 2 {
                return Err(Error::DimensionMismatch("flow maps need two channels".into()));
            }
            f.map.check_dims(&self.frames[f.source].intrinsics)?;
        }
        for (d, f) in self.disparities.iter().zip(&self.frames) {
            if let Some(d) = d {
                d.check_dims(&f.intrinsics)?;
                if f.intrinsics.baseline.is_none() {
                    return Err(Error::MissingBaseline);
                }
            }
        }
        for (img, f) in self.images.iter().zip(&self.frames) {
            if let Some(img) = img {
                if img.width != f.intrinsics.width || img.height != f.intrinsics.height {
                    return Err(Error::DimensionMismatch("image size differs from intrinsics".into()));
                }
            }
        }
        Ok(())
    }

    /// Flow observations used for supervision: forward pairs only unless
    /// bidirectional flow is enabled.
    pub fn active_flows(&self, bidirectional: bool) -> Vec<usize> {
        (0..self.flows.len())
            .filter(|&i| {
                let f = &self.flows[i];
                bidirectional || self.frames[f.source].id < self.frames[f.target].id
            })
            .collect()
    }

    /// The gauge frame (lowest id) is held fixed.
    pub fn gauge_index(&self) -> usize {
        (0..self.frames.len()).min_by_key(|&i| self.frames[i].id).unwrap_or(0)
    }
}

/// Everything the optimizer updates.
#[derive(Clone, Debug)]
pub struct DbaState {
    pub store: ParamStore,
    pub field: SdfField,
    pub color: Option<(ColorHeadConfig, ColorHead)>,
    pub distant: Option<(DistantFieldConfig, DistantField)>,
    pub frames: Vec<Frame>,
    pub pose_blocks: Vec<Option<BlockId>>,
    pub tree: Octree,
    /// Occupancy from the triangulated points.
    pub seed_tree: Octree,
    pub iteration: usize,
}

fn pose_block_name(id: usize) -> String {
    format!("pose.{id}")
}

impl DbaState {
    fn add_pose_blocks(store: &mut ParamStore, frames: &[Frame], gauge: usize) -> Result<Vec<Option<BlockId>>> {
        frames
            .iter()
            .enumerate()
            .map(|(i, f)| {
                if i == gauge {
                    Ok(None)
                } else {
                    store
                        .add(pose_block_name(f.id), Category::Pose, vec![6], vec![0.0; 6])
                        .map(Some)
                }
            })
            .collect()
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let header = CheckpointHeader {
            iteration: self.iteration,
            field: self.field.config.clone(),
            color: self.color.as_ref().map(|c| c.0.clone()),
            distant: self.distant.as_ref().map(|d| d.0.clone()),
            octree_root: *self.tree.root(),
            octree_depth: self.tree.max_depth(),
        };
        Checkpoint::new(header, &self.store, &self.tree)
    }

    /// Rebuilds a state from a checkpoint and the current camera poses.
    pub fn from_checkpoint(ck: &Checkpoint, frames: Vec<Frame>) -> Result<Self> {
        let h = &ck.header;
        let store = ck.store.clone();
        let field = SdfField::from_store(h.field.clone(), &store)?;
        let color = match &h.color {
            Some(c) => Some((c.clone(), ColorHead::from_store(c, h.field.feature_len, &store)?)),
            None => None,
        };
        let distant = match &h.distant {
            Some(c) => Some((c.clone(), DistantField::from_store(c, &store)?)),
            None => None,
        };
        let pose_blocks = frames.iter().map(|f| store.id(&pose_block_name(f.id)).ok()).collect();
        let tree = ck.octree()?;
        Ok(Self {
            store,
            field,
            color,
            distant,
            frames,
            pose_blocks,
            seed_tree: tree.clone(),
            tree,
            iteration: h.iteration,
        })
    }

    fn models(&self) -> ChunkModels<'_> {
        ChunkModels {
            field: &self.field,
            color: self.color.as_ref().map(|c| &c.1),
            distant: self.distant.as_ref().map(|d| &d.1),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InitReport {
    pub triangulated: usize,
    pub plane: Plane,
    pub inliers: usize,
    pub pretrain: PretrainReport,
    pub occupied_leaves: usize,
}

fn keep_point(x: &Vec3, a: (&Vec3, &Vec3), b: (&Vec3, &Vec3), keep_box: &Aabb) -> bool {
    (x - a.0).dot(a.1) > 0.0 && (x - b.0).dot(b.1) > 0.0 && keep_box.contains(x)
}

fn triangulate_pair(
    fj: &Frame,
    fk: &Frame,
    pixels: impl Iterator<Item = (Vec2, Vec2)>,
    init: &InitConfig,
    keep_box: &Aabb,
    out: &mut Vec<Vec3>,
) {
    let (pj, pk) = (fj.effective_pose(), fk.effective_pose());
    for (a, b) in pixels {
        let dj = (pj.rotation * fj.intrinsics.unproject(&a)).normalize();
        let dk = (pk.rotation * fk.intrinsics.unproject(&b)).normalize();
        if dj.cross(&dk).norm().atan2(dj.dot(&dk)) < init.min_parallax {
            continue;
        }
        let Ok(x) = triangulate(&a, &b, fj, fk) else {
            continue;
        };
        if keep_point(&x, (&pj.translation, &dj), (&pk.translation, &dk), keep_box) {
            out.push(x);
        }
    }
}

fn stride_grid(map: &PixelMap, stride: usize) -> impl Iterator<Item = (usize, usize, &[f32])> {
    (0..map.height).step_by(stride).flat_map(move |row| {
        (0..map.width)
            .step_by(stride)
            .filter_map(move |col| map.get(col, row).map(|v| (col, row, v)))
    })
}

/// Triangulates a sparse grid of correspondences, keeping points with enough
/// parallax, in front of both cameras and near the close box. Stereo pairs
/// are used when disparity maps exist (their relative pose is the fixed rig
/// baseline), consecutive flow pairs otherwise.
pub fn triangulate_flows(problem: &Problem, frames: &[Frame], init: &InitConfig) -> Vec<Vec3> {
    let keep_box = problem.close_box.scaled_about(&problem.close_box.center(), init.box_scale);
    let mut points = Vec::new();
    let stereo = init.use_stereo && problem.disparities.iter().any(Option::is_some);
    if stereo {
        for (frame, disp) in frames.iter().zip(&problem.disparities) {
            let (Some(disp), Some(right)) = (disp, frame.stereo_partner()) else {
                continue;
            };
            let pixels = stride_grid(disp, init.stride).map(|(col, row, d)| {
                let a = CameraIntrinsics::pixel_center(col, row);
                (a, a - Vec2::new(d[0] as f64, 0.0))
            });
            triangulate_pair(frame, &right, pixels, init, &keep_box, &mut points);
        }
        return points;
    }
    for obs in &problem.flows {
        let pixels = stride_grid(&obs.map, init.stride).map(|(col, row, f)| {
            let a = CameraIntrinsics::pixel_center(col, row);
            (a, a + Vec2::new(f[0] as f64, f[1] as f64))
        });
        triangulate_pair(&frames[obs.source], &frames[obs.target], pixels, init, &keep_box, &mut points);
    }
    points
}

fn dilate(tree: &Octree, radius: usize) -> Octree {
    let mut out = tree.clone();
    let n = tree.cells_per_axis() as isize;
    let r = radius as isize;
    for ijk in tree.occupied_leaves() {
        for dz in -r..=r {
            for dy in -r..=r {
                for dx in -r..=r {
                    let c = [ijk[0] as isize + dx, ijk[1] as isize + dy, ijk[2] as isize + dz];
                    if c.iter().all(|&v| (0..n).contains(&v)) {
                        out.set_occupied([c[0] as usize, c[1] as usize, c[2] as usize]);
                    }
                }
            }
        }
    }
    out
}

fn union(a: &Octree, b: &Octree) -> Octree {
    let mut out = a.clone();
    for ijk in b.occupied_leaves() {
        out.set_occupied(ijk);
    }
    out
}

/// Road-surface initialization: triangulate, fit the dominant plane, pretrain
/// the field to it and seed the occupancy grid.
pub fn initialize(problem: &Problem, config: &DbaConfig) -> Result<(DbaState, InitReport)> {
    problem.validate()?;
    config.validate()?;
    let init = &config.init;
    let points = triangulate_flows(problem, &problem.frames, init);
    if points.len() < init.min_points {
        return Err(Error::InsufficientCorrespondences(points.len()));
    }
    let (plane, inliers) = ransac_plane(&points, init.ransac_threshold, init.ransac_iterations, config.seed)?;

    let mut store = ParamStore::new();
    let field = SdfField::new(config.field.field_config(problem.close_box), &mut store, config.seed)?;
    let pretrain = init_to_plane(
        &field,
        &mut store,
        &plane,
        &problem.close_box,
        init.pretrain_steps,
        config.seed,
    )?;
    let color = if config.uses_color() {
        let head = ColorHead::new(&config.color, field.config.feature_len, &mut store, config.seed ^ 1)?;
        let distant = DistantField::new(&config.distant, &mut store, config.seed ^ 2)?;
        Some(((config.color.clone(), head), (config.distant.clone(), distant)))
    } else {
        None
    };
    let pose_blocks = DbaState::add_pose_blocks(&mut store, &problem.frames, problem.gauge_index())?;

    let (points_tree, _) = build_octree(&points, problem.close_box, problem.octree_depth)?;
    let seed_tree = dilate(&points_tree, init.dilation);
    let band = config.octree_band_leaf_multiple * seed_tree.leaf_diagonal();
    let tree = union(&seed_tree, &update_octree(&seed_tree, &field, &store, band));
    let report = InitReport {
        triangulated: points.len(),
        plane,
        inliers: inliers.len(),
        pretrain,
        occupied_leaves: tree.occupied_count(),
    };
    let (color, distant) = match color {
        Some((c, d)) => (Some(c), Some(d)),
        None => (None, None),
    };
    Ok((
        DbaState {
            store,
            field,
            color,
            distant,
            frames: problem.frames.clone(),
            pose_blocks,
            tree,
            seed_tree,
            iteration: 0,
        },
        report,
    ))
}

/// One supervised ray of a batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
struct Draw {
    flow: u32,
    pixel: u32,
}

/// All `(flow observation, valid pixel)` pairs, drawn from uniformly.
struct RayTable {
    entries: Vec<Draw>,
}

impl RayTable {
    fn new(problem: &Problem, active: &[usize]) -> Self {
        let mut entries = Vec::new();
        for &i in active {
            let m = &problem.flows[i].map;
            for (p, &ok) in m.mask.iter().enumerate() {
                if ok {
                    entries.push(Draw {
                        flow: i as u32,
                        pixel: p as u32,
                    });
                }
            }
        }
        Self { entries }
    }
}

struct BatchChunk {
    flow: usize,
    rays: RayChunk,
    flow_targets: Vec<Vec2>,
    flow_valid: Vec<usize>,
    disp_targets: Vec<f64>,
    disp_valid: Vec<usize>,
    color_targets: Vec<[f64; 3]>,
    color_valid: Vec<usize>,
    nonempty: Vec<usize>,
}

struct Batch {
    chunks: Vec<BatchChunk>,
    regularizer_points: Vec<Vec3>,
    counts: LossCounts,
}

fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn build_batch(
    problem: &Problem,
    state: &DbaState,
    config: &DbaConfig,
    table: &RayTable,
    iteration: usize,
) -> Result<Batch> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(config.seed, iteration as u64));
    let mut draws: Vec<Draw> = (0..config.rays_per_iteration)
        .map(|_| table.entries[rng.random_range(0..table.entries.len())])
        .collect();
    draws.sort();
    let mut grouped: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for d in &draws {
        grouped.entry(d.flow as usize).or_default().push(d.pixel as usize);
    }
    let culling = iteration >= config.cull_start();
    let cull_threshold = config.cull_leaf_multiple * state.tree.leaf_size().max();
    let with_color = config.loss.use_photometric;

    let mut counts = LossCounts::default();
    let mut chunks = Vec::with_capacity(grouped.len());
    let mut all_points = Vec::new();
    for (flow, pixels) in grouped {
        let obs = &problem.flows[flow];
        let frame = &state.frames[obs.source];
        let disparity = problem.disparities[obs.source].as_ref().filter(|_| config.loss.use_disparity);
        let image = problem.images[obs.source].as_ref().filter(|_| with_color);
        if with_color && image.is_none() {
            return Err(Error::InvalidConfig(format!(
                "photometric loss needs an image for frame {}",
                frame.id
            )));
        }
        let w = obs.map.width;
        let mut chunk = BatchChunk {
            flow,
            rays: RayChunk {
                intrinsics: frame.intrinsics,
                pixels: Vec::with_capacity(pixels.len()),
                samples: Vec::with_capacity(pixels.len()),
                shells: Vec::new(),
            },
            flow_targets: Vec::with_capacity(pixels.len()),
            flow_valid: Vec::new(),
            disp_targets: Vec::with_capacity(pixels.len()),
            disp_valid: Vec::new(),
            color_targets: Vec::new(),
            color_valid: Vec::new(),
            nonempty: Vec::new(),
        };
        for (r, &p) in pixels.iter().enumerate() {
            let (col, row) = (p % w, p / w);
            let px = CameraIntrinsics::pixel_center(col, row);
            let ray = cast_ray(frame, &px)?;
            let seed = mix(mix(config.seed, iteration as u64), (flow * w * obs.map.height + p) as u64 ^ (r as u64) << 40);
            let mut samples = sample_ray(&ray, &state.tree, config.samples_per_voxel, seed);
            if culling && !samples.is_empty() {
                samples = cull_samples(&samples, &state.field, &state.store, cull_threshold);
            }
            samples.axial_cos = ray.direction.dot(&frame.principal_axis());
            let f = obs.map.get(col, row).expect("drawn pixels are valid");
            chunk.flow_targets.push(Vec2::new(f[0] as f64, f[1] as f64));
            let d = disparity.and_then(|m| m.get(col, row));
            chunk.disp_targets.push(d.map_or(0.0, |d| d[0] as f64));
            if let Some(img) = image {
                let c = img.get(col, row);
                chunk.color_targets.push([c[0] as f64, c[1] as f64, c[2] as f64]);
                chunk
                    .rays
                    .shells
                    .push(sample_distant(&ray, &problem.close_box, problem.shell_count, problem.r_max)?);
            }
            if !samples.is_empty() {
                chunk.nonempty.push(r);
                chunk.flow_valid.push(r);
                if d.is_some() {
                    chunk.disp_valid.push(r);
                }
                if image.is_some() {
                    chunk.color_valid.push(r);
                }
                all_points.extend_from_slice(&samples.points);
            }
            chunk.rays.pixels.push(px);
            chunk.rays.samples.push(samples);
        }
        counts.flow_rays += chunk.flow_valid.len();
        counts.disparity_rays += chunk.disp_valid.len();
        counts.color_rays += chunk.color_valid.len();
        counts.entropy_rays += chunk.nonempty.len();
        chunks.push(chunk);
    }

    let m = config.regularizer_points.min(all_points.len());
    let mut regularizer_points: Vec<Vec3> = (0..m)
        .map(|_| all_points[rng.random_range(0..all_points.len())])
        .collect();
    let b = &problem.close_box;
    for _ in 0..m / 4 {
        regularizer_points.push(Vec3::from_fn(|a, _| rng.random_range(b.min[a]..b.max[a])));
    }
    counts.regularizer_points = regularizer_points.len();
    Ok(Batch {
        chunks,
        regularizer_points,
        counts,
    })
}

/// Forward values of one chunk's terms, already normalized by batch counts.
#[derive(Clone, Copy, Debug, Default)]
struct ChunkTerms {
    flow: f64,
    disparity: f64,
    entropy: f64,
    photometric: f64,
}

fn inv(n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        1.0 / n as f64
    }
}

fn chunk_objective(
    problem: &Problem,
    state: &DbaState,
    config: &DbaConfig,
    chunk: &BatchChunk,
    counts: &LossCounts,
    poses_live: bool,
    grads: Option<&mut Gradients>,
) -> Result<ChunkTerms> {
    let mut terms = ChunkTerms::default();
    if chunk.nonempty.is_empty() {
        return Ok(terms);
    }
    let obs = &problem.flows[chunk.flow];
    let mut g = Graph::new(&state.store);
    let tape = RenderTape::new(&mut g, &state.field, state.distant.as_ref().map(|d| &d.1));
    let pose_tape = |g: &mut Graph<'_>, i: usize| -> PoseTape {
        let block = if poses_live { state.pose_blocks[i] } else { None };
        pose_graph(g, &state.frames[i].effective_pose(), block)
    };
    let pj = pose_tape(&mut g, obs.source);
    let pk = pose_tape(&mut g, obs.target);
    let request = RenderRequest {
        flow: true,
        disparity: !chunk.disp_valid.is_empty(),
        color: !chunk.color_valid.is_empty(),
    };
    let target_k = state.frames[obs.target].intrinsics;
    let out = render_chunk_graph(
        &mut g,
        &tape,
        &state.models(),
        &chunk.rays,
        &pj,
        Some((&pk, &target_k)),
        request,
    )?;
    let mut parts: Vec<Var> = Vec::new();
    if let Some(f) = out.flow {
        if let Some(v) = flow_loss_graph(&mut g, f, &chunk.flow_targets, &chunk.flow_valid, inv(counts.flow_rays)) {
            terms.flow = g.scalar(v);
            parts.push(v);
        }
    }
    if let Some(d) = out.disparity {
        let scale = inv(counts.disparity_rays);
        if let Some(v) = disparity_loss_graph(&mut g, d, &chunk.disp_targets, &chunk.disp_valid, scale) {
            terms.disparity = g.scalar(v);
            parts.push(g.scale(v, config.loss.lambda_disparity));
        }
    }
    if let Some(c) = out.color {
        let scale = inv(counts.color_rays);
        if let Some(v) = photometric_loss_graph(&mut g, c, &chunk.color_targets, &chunk.color_valid, scale) {
            terms.photometric = g.scalar(v);
            parts.push(g.scale(v, config.loss.lambda_photo));
        }
    }
    let op = g.index(out.opacity, &chunk.nonempty, 1);
    let e = entropy_loss_graph(&mut g, op, inv(counts.entropy_rays));
    terms.entropy = g.scalar(e);
    parts.push(g.scale(e, config.loss.lambda_entropy));
    if let Some(grads) = grads {
        let all = g.concat(&parts);
        let total = g.sum(all);
        g.backward_into(total, 1.0, grads)?;
    }
    Ok(terms)
}

fn regularizer_objective(
    state: &DbaState,
    config: &DbaConfig,
    points: &[Vec3],
    grads: Option<&mut Gradients>,
) -> Result<(f64, f64)> {
    let mut g = Graph::new(&state.store);
    let tape = state.field.tape(&mut g);
    let s = inv(points.len());
    let Some((eik, spa)) = regularizers_graph(&mut g, &state.field, &tape, points, config.loss.tau, s, s) else {
        return Ok((0.0, 0.0));
    };
    let values = (g.scalar(eik), g.scalar(spa));
    if let Some(grads) = grads {
        let a = g.scale(eik, config.loss.lambda_eikonal);
        let b = g.scale(spa, config.loss.lambda_sparsity);
        let total = g.add(a, b);
        g.backward_into(total, 1.0, grads)?;
    }
    Ok(values)
}

fn poses_live(config: &DbaConfig, iteration: usize) -> bool {
    config.optimize_poses && config.learning_rates.pose > 0.0 && iteration >= config.pose_opt_start_iteration
}

/// Evaluates the batch objective (and optionally its gradient).
fn evaluate(
    problem: &Problem,
    state: &DbaState,
    config: &DbaConfig,
    batch: &Batch,
    iteration: usize,
    pool: Option<&rayon::ThreadPool>,
    mut grads: Option<&mut Gradients>,
) -> Result<LossReport> {
    let live = poses_live(config, iteration);
    let mut chunk_terms = Vec::with_capacity(batch.chunks.len());
    match (pool, grads.as_deref_mut()) {
        (Some(pool), Some(acc)) => {
            use rayon::prelude::*;
            let results: Vec<Result<(ChunkTerms, Gradients)>> = pool.install(|| {
                batch
                    .chunks
                    .par_iter()
                    .map(|c| {
                        let mut local = Gradients::zeros_like(&state.store);
                        let t = chunk_objective(problem, state, config, c, &batch.counts, live, Some(&mut local))?;
                        Ok((t, local))
                    })
                    .collect()
            });
            for r in results {
                let (t, local) = r?;
                acc.add_assign(&local);
                chunk_terms.push(t);
            }
        }
        (_, mut acc) => {
            for c in &batch.chunks {
                chunk_terms.push(chunk_objective(
                    problem,
                    state,
                    config,
                    c,
                    &batch.counts,
                    live,
                    acc.as_deref_mut(),
                )?);
            }
        }
    }
    let (eikonal, sparsity) = regularizer_objective(state, config, &batch.regularizer_points, grads)?;
    let sum = |f: fn(&ChunkTerms) -> f64| chunk_terms.iter().map(f).sum::<f64>();
    let terms = LossTerms {
        flow: sum(|t| t.flow),
        disparity: (config.loss.use_disparity && batch.counts.disparity_rays > 0).then(|| sum(|t| t.disparity)),
        eikonal,
        sparsity,
        entropy: sum(|t| t.entropy),
        photometric: (config.loss.use_photometric && batch.counts.color_rays > 0).then(|| sum(|t| t.photometric)),
    };
    if batch.counts.flow_rays == 0 {
        return Err(Error::EmptyBatch);
    }
    total_loss(&terms, batch.counts.clone(), &config.loss)
}

/// Loss of the batch drawn at `iteration`, without updating anything.
pub fn evaluate_batch(problem: &Problem, state: &DbaState, config: &DbaConfig, iteration: usize) -> Result<LossReport> {
    let active = problem.active_flows(config.loss.bidirectional_flow);
    let table = RayTable::new(problem, &active);
    if table.entries.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let batch = build_batch(problem, state, config, &table, iteration)?;
    evaluate(problem, state, config, &batch, iteration, None, None)
}

/// Loss and parameter gradients of the batch drawn at `iteration`, computed
/// serially.
pub fn batch_gradients(
    problem: &Problem,
    state: &DbaState,
    config: &DbaConfig,
    iteration: usize,
) -> Result<(LossReport, Gradients)> {
    let active = problem.active_flows(config.loss.bidirectional_flow);
    let table = RayTable::new(problem, &active);
    if table.entries.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let batch = build_batch(problem, state, config, &table, iteration)?;
    let mut grads = Gradients::zeros_like(&state.store);
    let report = evaluate(problem, state, config, &batch, iteration, None, Some(&mut grads))?;
    Ok((report, grads))
}

/// Central-difference check of [`batch_gradients`] on a fixed batch. Pose
/// coordinates are perturbed as `exp(δ) ∘ pose`, matching how steps are
/// applied.
pub fn check_batch_gradients(
    problem: &Problem,
    state: &DbaState,
    config: &DbaConfig,
    iteration: usize,
    h: f64,
    coords: &[(BlockId, usize)],
) -> Result<GradientCheckReport> {
    let active = problem.active_flows(config.loss.bidirectional_flow);
    let table = RayTable::new(problem, &active);
    if table.entries.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let batch = build_batch(problem, state, config, &table, iteration)?;
    let loss = |store: &ParamStore| -> Result<(f64, Gradients)> {
        let mut s = state.clone();
        s.store = store.clone();
        for (frame, block) in s.frames.iter_mut().zip(&state.pose_blocks) {
            if let Some(b) = *block {
                frame.pose_delta.copy_from_slice(s.store.values(b));
                frame.bake_delta();
                s.store.values_mut(b).fill(0.0);
            }
        }
        let mut grads = Gradients::zeros_like(&s.store);
        let report = evaluate(problem, &s, config, &batch, iteration, None, Some(&mut grads))?;
        Ok((report.total, grads))
    };
    check_gradients_at(loss, &state.store, h, coords)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceEntry {
    pub iteration: usize,
    pub report: LossReport,
    /// Trajectory error against the reference cameras, if known.
    pub ate: Option<f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizationTrace {
    pub entries: Vec<TraceEntry>,
}

impl OptimizationTrace {
    pub fn first(&self) -> Option<&TraceEntry> {
        self.entries.first()
    }

    pub fn last(&self) -> Option<&TraceEntry> {
        self.entries.last()
    }
}

/// Hooks called during [`optimize`].
pub trait Observer {
    fn log(&mut self, _entry: &TraceEntry) {}
    fn checkpoint(&mut self, _state: &DbaState) -> Result<()> {
        Ok(())
    }
}

pub struct Silent;

impl Observer for Silent {}

fn trajectory_error(problem: &Problem, frames: &[Frame]) -> Option<f64> {
    let r = problem.reference.as_ref()?;
    ate(&trajectory_of(frames), &trajectory_of(r)).ok()
}

/// Runs the optimizer from `state.iteration` to `config.total_iterations`.
///
/// Octree updates only add leaves: early in training the zero level set can
/// sit a few centimeters off the surface, and dropping leaves there starves
/// the rays that should terminate in them.
///
/// On a non-finite loss or update the state is restored to the last
/// checkpoint and [`Error::DivergedLoss`] is returned.
pub fn optimize(
    problem: &Problem,
    state: &mut DbaState,
    config: &DbaConfig,
    observer: &mut dyn Observer,
) -> Result<OptimizationTrace> {
    problem.validate()?;
    config.validate()?;
    if state.frames.len() != problem.frames.len() {
        return Err(Error::CountMismatch(state.frames.len(), problem.frames.len()));
    }
    if config.loss.use_photometric && state.color.is_none() {
        return Err(Error::MissingColorModel);
    }
    let active = problem.active_flows(config.loss.bidirectional_flow);
    let table = RayTable::new(problem, &active);
    if table.entries.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let threads = config.thread_count();
    let pool = if threads > 1 {
        Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .map_err(|e| Error::InvalidConfig(e.to_string()))?,
        )
    } else {
        None
    };

    let base: HashMap<Category, f64> = config.learning_rates.by_category().into_iter().collect();
    let mut adam = AdamState::new(&state.store, base.clone());
    let mut grads = Gradients::zeros_like(&state.store);
    let mut snapshot = state.clone();
    let mut trace = OptimizationTrace::default();
    let start = Instant::now();
    let band = config.octree_band_leaf_multiple * state.tree.leaf_diagonal();
    let last = config.total_iterations.saturating_sub(1);

    while state.iteration < config.total_iterations {
        let it = state.iteration;
        if it > 0 && config.octree_update_interval > 0 && it % config.octree_update_interval == 0 {
            let fresh = update_octree(&state.tree, &state.field, &state.store, band);
            state.tree = union(&state.tree, &fresh);
        }
        let batch = build_batch(problem, state, config, &table, it)?;
        grads.fill_zero();
        let report = match evaluate(problem, state, config, &batch, it, pool.as_ref(), Some(&mut grads)) {
            Ok(r) if r.total.is_finite() => r,
            Ok(_) | Err(Error::NonFiniteTerm(_)) | Err(Error::NonFiniteGradient(_)) => {
                *state = snapshot;
                return Err(Error::DivergedLoss(it));
            }
            Err(e) => return Err(e),
        };

        let scale = config.lr_scale(it);
        for (cat, lr) in &base {
            let lr = if *cat == Category::Pose && !poses_live(config, it) {
                0.0
            } else {
                lr * scale
            };
            adam.learning_rates.insert(*cat, lr);
        }
        if adam_step(&mut state.store, &grads, &mut adam, 1.0).is_err() {
            *state = snapshot;
            return Err(Error::DivergedLoss(it));
        }
        for (frame, block) in state.frames.iter_mut().zip(&state.pose_blocks) {
            if let Some(b) = block {
                let v = state.store.values_mut(*b);
                frame.pose_delta.copy_from_slice(v);
                v.fill(0.0);
                frame.bake_delta();
            }
        }
        state.iteration += 1;

        if it == 0 || it == last || (config.log_interval > 0 && it % config.log_interval == 0) {
            let entry = TraceEntry {
                iteration: it,
                report,
                ate: trajectory_error(problem, &state.frames),
                seconds: start.elapsed().as_secs_f64(),
            };
            observer.log(&entry);
            trace.entries.push(entry);
        }
        if config.checkpoint_interval > 0 && state.iteration % config.checkpoint_interval == 0 {
            snapshot = state.clone();
            observer.checkpoint(state)?;
        }
    }
    Ok(trace)
}

/// Initializes and optimizes in one call.
pub fn run(problem: &Problem, config: &DbaConfig, observer: &mut dyn Observer) -> Result<(DbaState, OptimizationTrace)> {
    let (mut state, _) = initialize(problem, config)?;
    let trace = optimize(problem, &mut state, config, observer)?;
    Ok((state, trace))
}

/// Marching cubes over the cells overlapping occupied leaves. `resolution`
/// is the cell count along the longest side of the octree root.
pub fn extract_mesh(field: &SdfField, store: &ParamStore, tree: &Octree, resolution: usize) -> Result<Mesh> {
    if resolution < 8 {
        return Err(Error::InvalidConfig("mesh resolution must be at least 8".into()));
    }
    if tree.occupied_count() == 0 {
        return Err(Error::EmptyField);
    }
    let grid = CellGrid::covering(tree.root(), resolution);
    let [nx, ny, nz] = grid.counts;
    let mut include = vec![false; nx * ny * nz];
    let to_cell = |x: f64, axis: usize| ((x - grid.origin[axis]) / grid.cell).floor();
    for ijk in tree.occupied_leaves() {
        let b = tree.leaf_box(ijk);
        let mut lo = [0usize; 3];
        let mut hi = [0usize; 3];
        for a in 0..3 {
            let n = grid.counts[a] as f64;
            lo[a] = to_cell(b.min[a], a).clamp(0.0, n - 1.0) as usize;
            hi[a] = to_cell(b.max[a] - 1e-12, a).clamp(0.0, n - 1.0) as usize;
        }
        for k in lo[2]..=hi[2] {
            for j in lo[1]..=hi[1] {
                for i in lo[0]..=hi[0] {
                    include[i + nx * (j + ny * k)] = true;
                }
            }
        }
    }
    let mesh = marching_cubes(&grid, |p: &Vec3| field.sdf(store, p), |c: [usize; 3]| {
        include[c[0] + nx * (c[1] + ny * c[2])]
    });
    if mesh.is_empty() {
        return Err(Error::EmptyField);
    }
    Ok(mesh)
}

/// Expected depth (ray distance) and opacity for every pixel of `frame`.
pub fn render_depth_map(state: &DbaState, frame: &Frame, cull: bool, config: &DbaConfig) -> Result<(Vec<f64>, Vec<f64>)> {
    let k = &frame.intrinsics;
    let mut depth = Vec::with_capacity(k.width * k.height);
    let mut opacity = Vec::with_capacity(k.width * k.height);
    let threshold = config.cull_leaf_multiple * state.tree.leaf_size().max();
    for row in 0..k.height {
        for col in 0..k.width {
            let px = CameraIntrinsics::pixel_center(col, row);
            let ray = cast_ray(frame, &px)?;
            let seed = mix(config.seed, (row * k.width + col) as u64);
            let mut s: RaySamples = sample_ray(&ray, &state.tree, config.samples_per_voxel, seed);
            if cull && !s.is_empty() {
                s = cull_samples(&s, &state.field, &state.store, threshold);
            }
            let (w, _) = shade_ray(&state.field, &state.store, &s);
            depth.push(render_depth(&s, &w.weights));
            opacity.push(w.opacity);
        }
    }
    Ok((depth, opacity))
}

/// Rendered color for every pixel of `frame`; needs the color models.
pub fn render_color_image(problem: &Problem, state: &DbaState, frame: &Frame, config: &DbaConfig) -> Result<Image> {
    let (Some((_, head)), Some((_, distant))) = (&state.color, &state.distant) else {
        return Err(Error::MissingColorModel);
    };
    let k = &frame.intrinsics;
    let mut img = Image::new(k.width, k.height);
    for row in 0..k.height {
        for col in 0..k.width {
            let px = CameraIntrinsics::pixel_center(col, row);
            let ray = cast_ray(frame, &px)?;
            let seed = mix(config.seed, (row * k.width + col) as u64);
            let s = sample_ray(&ray, &state.tree, config.samples_per_voxel, seed);
            let (w, feats) = shade_ray(&state.field, &state.store, &s);
            let shells = sample_distant(&ray, &problem.close_box, problem.shell_count, problem.r_max)?;
            let c = crate::rendering::render_color(
                &ray,
                &w.weights,
                &feats,
                &shells,
                Some(head),
                Some(distant),
                &state.store,
            )?;
            img.set(col, row, c.map(|v| v as f32));
        }
    }
    Ok(img)
}
