//! File formats: dense flow/disparity maps, TUM trajectories, PPM images,
//! ASCII PLY meshes, field checkpoints and the on-disk dataset layout.
//!
//! Binary map layout (all integers and reals little-endian):
//!
//! | offset | size | content |
//! |--------|------|---------|
//! | 0 | 4 | magic `NUFL` (flow) or `NUDP` (disparity) |
//! | 4 | 4 | `u32` version = 1 |
//! | 8 | 4 | `u32` width |
//! | 12 | 4 | `u32` height |
//! | 16 | 4·c·w·h | `f32` values, channels interleaved, row-major |
//! | … | w·h | validity bytes, 1 = valid |

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Category, ParamStore};
use crate::error::{Error, Result};
use crate::field::{ColorHeadConfig, DistantFieldConfig, SdfFieldConfig};
use crate::geometry::{Aabb, CameraIntrinsics, SE3Pose, Vec3};
use crate::mesh::Mesh;
use crate::sampling::Octree;
use crate::synth::SceneConfig;

pub const FLOW_MAGIC: &[u8; 4] = b"NUFL";
pub const DISPARITY_MAGIC: &[u8; 4] = b"NUDP";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"NUCK";
const VERSION: u32 = 1;

/// Dense per-pixel map with a validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelMap {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub values: Vec<f32>,
    pub mask: Vec<bool>,
}

impl PixelMap {
    /// All-invalid map filled with zeros.
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self {
            width,
            height,
            channels,
            values: vec![0.0; width * height * channels],
            mask: vec![false; width * height],
        }
    }

    pub fn get(&self, col: usize, row: usize) -> Option<&[f32]> {
        let i = row * self.width + col;
        self.mask[i].then(|| &self.values[i * self.channels..(i + 1) * self.channels])
    }

    pub fn set(&mut self, col: usize, row: usize, v: &[f32]) {
        let i = row * self.width + col;
        self.values[i * self.channels..(i + 1) * self.channels].copy_from_slice(v);
        self.mask[i] = true;
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Valid pixels as `(col, row)` in row-major order.
    pub fn valid_pixels(&self) -> Vec<(usize, usize)> {
        (0..self.mask.len())
            .filter(|&i| self.mask[i])
            .map(|i| (i % self.width, i / self.width))
            .collect()
    }

    pub fn check_dims(&self, k: &CameraIntrinsics) -> Result<()> {
        if self.width != k.width || self.height != k.height {
            return Err(Error::DimensionMismatch(format!(
                "map is {}x{}, camera is {}x{}",
                self.width, self.height, k.width, k.height
            )));
        }
        Ok(())
    }

    pub fn encode(&self, magic: &[u8; 4]) -> Vec<u8> {
        let n = self.width * self.height;
        let mut out = Vec::with_capacity(16 + 4 * self.channels * n + n);
        out.extend_from_slice(magic);
        for x in [VERSION, self.width as u32, self.height as u32] {
            out.extend_from_slice(&x.to_le_bytes());
        }
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend(self.mask.iter().map(|&m| m as u8));
        out
    }

    pub fn decode(bytes: &[u8], magic: &'static [u8; 4], channels: usize) -> Result<Self> {
        let expected_magic = std::str::from_utf8(magic).unwrap_or("?");
        if bytes.len() < 16 {
            if bytes.len() >= 4 && &bytes[..4] != magic {
                return Err(Error::BadMagic { expected: expected_magic });
            }
            return Err(Error::TruncatedFile {
                expected: 16,
                found: bytes.len(),
            });
        }
        if &bytes[..4] != magic {
            return Err(Error::BadMagic { expected: expected_magic });
        }
        let word = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        if word(4) != VERSION {
            return Err(Error::DimensionMismatch(format!("unsupported version {}", word(4))));
        }
        let (width, height) = (word(8) as usize, word(12) as usize);
        let n = width * height;
        let expected = 16 + 4 * channels * n + n;
        if bytes.len() != expected {
            return Err(Error::TruncatedFile {
                expected,
                found: bytes.len(),
            });
        }
        let payload = &bytes[16..16 + 4 * channels * n];
        let values = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let mask = bytes[16 + 4 * channels * n..].iter().map(|&b| b != 0).collect();
        Ok(Self {
            width,
            height,
            channels,
            values,
            mask,
        })
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn write_flow(path: &Path, map: &PixelMap) -> Result<()> {
    write_bytes(path, &map.encode(FLOW_MAGIC))
}

pub fn read_flow(path: &Path) -> Result<PixelMap> {
    PixelMap::decode(&read_bytes(path)?, FLOW_MAGIC, 2)
}

pub fn write_disparity(path: &Path, map: &PixelMap) -> Result<()> {
    write_bytes(path, &map.encode(DISPARITY_MAGIC))
}

pub fn read_disparity(path: &Path) -> Result<PixelMap> {
    PixelMap::decode(&read_bytes(path)?, DISPARITY_MAGIC, 1)
}

/// RGB image with intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            rgb: vec![0.0; 3 * width * height],
        }
    }

    pub fn get(&self, col: usize, row: usize) -> [f32; 3] {
        let i = 3 * (row * self.width + col);
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }

    pub fn set(&mut self, col: usize, row: usize, c: [f32; 3]) {
        let i = 3 * (row * self.width + col);
        self.rgb[i..i + 3].copy_from_slice(&c);
    }

    /// Binary 8-bit PPM (`P6`).
    pub fn encode_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(
            self.rgb
                .iter()
                .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
        );
        out
    }

    pub fn decode_ppm(bytes: &[u8]) -> Result<Self> {
        let mut fields = Vec::new();
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::TruncatedFile {
                    expected: pos + 1,
                    found: bytes.len(),
                });
            }
            fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        if fields[0] != "P6" {
            return Err(Error::BadMagic { expected: "P6" });
        }
        let num = |s: &str| {
            s.parse::<usize>().map_err(|_| Error::Parse {
                line: 1,
                msg: format!("bad PPM header field `{s}`"),
            })
        };
        let (width, height, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
        if maxval == 0 || maxval > 255 {
            return Err(Error::Parse {
                line: 1,
                msg: format!("unsupported maxval {maxval}"),
            });
        }
        pos += 1;
        let expected = pos + 3 * width * height;
        if bytes.len() < expected {
            return Err(Error::TruncatedFile {
                expected,
                found: bytes.len(),
            });
        }
        let rgb = bytes[pos..expected]
            .iter()
            .map(|&b| b as f32 / maxval as f32)
            .collect();
        Ok(Self { width, height, rgb })
    }
}

pub fn write_ppm(path: &Path, image: &Image) -> Result<()> {
    write_bytes(path, &image.encode_ppm())
}

pub fn read_ppm(path: &Path) -> Result<Image> {
    Image::decode_ppm(&read_bytes(path)?)
}

/// Poses keyed by frame id.
pub type Trajectory = Vec<(usize, SE3Pose)>;

/// TUM lines `id tx ty tz qx qy qz qw`; `#` comments and blank lines are
/// skipped and quaternions are normalised.
pub fn parse_tum(text: &str) -> Result<Trajectory> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line_no = n + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |msg: String| Error::Parse { line: line_no, msg };
        let tok: Vec<&str> = line.split_whitespace().collect();
        if tok.len() != 8 {
            return Err(err(format!("expected 8 fields, found {}", tok.len())));
        }
        let id = tok[0]
            .parse::<usize>()
            .map_err(|_| err(format!("bad frame id `{}`", tok[0])))?;
        let mut v = [0.0; 7];
        for (k, t) in tok[1..].iter().enumerate() {
            v[k] = t.parse::<f64>().map_err(|_| err(format!("bad number `{t}`")))?;
            if !v[k].is_finite() {
                return Err(err(format!("non-finite value `{t}`")));
            }
        }
        let q = nalgebra::Quaternion::new(v[6], v[3], v[4], v[5]);
        if q.norm() < 1e-12 {
            return Err(err("zero quaternion".into()));
        }
        let pose = SE3Pose::new(
            nalgebra::UnitQuaternion::from_quaternion(q),
            Vec3::new(v[0], v[1], v[2]),
        );
        out.push((id, pose));
    }
    Ok(out)
}

pub fn format_tum(traj: &[(usize, SE3Pose)]) -> String {
    let mut s = String::from("# id tx ty tz qx qy qz qw\n");
    for (id, p) in traj {
        let t = p.translation;
        let q = p.rotation.quaternion();
        s.push_str(&format!(
            "{id} {} {} {} {} {} {} {}\n",
            t.x, t.y, t.z, q.i, q.j, q.k, q.w
        ));
    }
    s
}

pub fn read_tum(path: &Path) -> Result<Trajectory> {
    parse_tum(&read_text(path)?)
}

pub fn write_tum(path: &Path, traj: &[(usize, SE3Pose)]) -> Result<()> {
    write_bytes(path, format_tum(traj).as_bytes())
}

/// ASCII PLY with `x y z` (and `nx ny nz` when normals are present) per
/// vertex and triangle faces.
pub fn format_ply(mesh: &Mesh) -> String {
    let with_normals = mesh.normals.len() == mesh.vertices.len() && !mesh.vertices.is_empty();
    let mut s = String::from("ply\nformat ascii 1.0\n");
    s.push_str(&format!("element vertex {}\n", mesh.vertices.len()));
    s.push_str("property float x\nproperty float y\nproperty float z\n");
    if with_normals {
        s.push_str("property float nx\nproperty float ny\nproperty float nz\n");
    }
    s.push_str(&format!("element face {}\n", mesh.faces.len()));
    s.push_str("property list uchar int vertex_indices\nend_header\n");
    for (i, v) in mesh.vertices.iter().enumerate() {
        s.push_str(&format!("{} {} {}", v.x, v.y, v.z));
        if with_normals {
            let n = mesh.normals[i];
            s.push_str(&format!(" {} {} {}", n.x, n.y, n.z));
        }
        s.push('\n');
    }
    for f in &mesh.faces {
        s.push_str(&format!("3 {} {} {}\n", f[0], f[1], f[2]));
    }
    s
}

pub fn parse_ply(text: &str) -> Result<Mesh> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    let perr = |line: usize, msg: &str| Error::Parse {
        line,
        msg: msg.to_string(),
    };
    match lines.next() {
        Some((_, "ply")) => {}
        _ => return Err(Error::BadMagic { expected: "ply" }),
    }
    let (mut n_vert, mut n_face) = (0usize, 0usize);
    let mut vert_props: Vec<String> = Vec::new();
    let mut current = "";
    loop {
        let Some((ln, l)) = lines.next() else {
            return Err(perr(0, "missing end_header"));
        };
        let tok: Vec<&str> = l.split_whitespace().collect();
        match tok.as_slice() {
            ["end_header"] => break,
            ["format", fmt, _] => {
                if *fmt != "ascii" {
                    return Err(perr(ln, "only ascii PLY is supported"));
                }
            }
            ["comment", ..] | ["obj_info", ..] => {}
            ["element", name, count] => {
                let count = count.parse().map_err(|_| perr(ln, "bad element count"))?;
                current = match *name {
                    "vertex" => {
                        n_vert = count;
                        "vertex"
                    }
                    "face" => {
                        n_face = count;
                        "face"
                    }
                    _ => return Err(perr(ln, "unsupported element")),
                };
            }
            ["property", "list", ..] if current == "face" => {}
            ["property", _, name] if current == "vertex" => vert_props.push(name.to_string()),
            _ => return Err(perr(ln, "unrecognised header line")),
        }
    }
    let col = |name: &str| vert_props.iter().position(|p| p == name);
    let (Some(ix), Some(iy), Some(iz)) = (col("x"), col("y"), col("z")) else {
        return Err(perr(0, "vertex element lacks x/y/z"));
    };
    let normal_cols = match (col("nx"), col("ny"), col("nz")) {
        (Some(a), Some(b), Some(c)) => Some([a, b, c]),
        _ => None,
    };
    let mut mesh = Mesh::default();
    for _ in 0..n_vert {
        let (ln, l) = lines.next().ok_or_else(|| perr(0, "missing vertex rows"))?;
        let v: Vec<f64> = l
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| perr(ln, "bad vertex value"))?;
        if v.len() != vert_props.len() {
            return Err(perr(ln, "wrong vertex field count"));
        }
        mesh.vertices.push(Vec3::new(v[ix], v[iy], v[iz]));
        if let Some([a, b, c]) = normal_cols {
            mesh.normals.push(Vec3::new(v[a], v[b], v[c]));
        }
    }
    for _ in 0..n_face {
        let (ln, l) = lines.next().ok_or_else(|| perr(0, "missing face rows"))?;
        let v: Vec<usize> = l
            .split_whitespace()
            .map(|t| t.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| perr(ln, "bad face index"))?;
        if v.len() != 4 || v[0] != 3 {
            return Err(perr(ln, "only triangle faces are supported"));
        }
        if v[1..].iter().any(|&i| i >= n_vert) {
            return Err(perr(ln, "face index out of range"));
        }
        mesh.faces.push([v[1] as u32, v[2] as u32, v[3] as u32]);
    }
    Ok(mesh)
}

pub fn write_ply(path: &Path, mesh: &Mesh) -> Result<()> {
    write_bytes(path, format_ply(mesh).as_bytes())
}

pub fn read_ply(path: &Path) -> Result<Mesh> {
    parse_ply(&read_text(path)?)
}

/// Everything needed to rebuild the field and its occupancy grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub iteration: usize,
    pub field: SdfFieldConfig,
    pub color: Option<ColorHeadConfig>,
    pub distant: Option<DistantFieldConfig>,
    pub octree_root: Aabb,
    pub octree_depth: u32,
}

/// Checkpoint layout (little-endian):
///
/// ```text
/// "NUCK" | u32 version | u32 header_len | header (TOML, UTF-8)
/// u32 block_count, then per block:
///   u32 name_len | name | u32 category_len | category | u32 ndim | u32 dims[ndim] | f32 values
/// u32 occupied_count | u64 leaf codes
/// ```
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub store: ParamStore,
    pub occupied: Vec<u64>,
}

impl Checkpoint {
    pub fn new(header: CheckpointHeader, store: &ParamStore, tree: &Octree) -> Self {
        Self {
            header,
            store: store.clone(),
            occupied: tree.occupied_codes(),
        }
    }

    pub fn octree(&self) -> Result<Octree> {
        let mut tree = Octree::empty(self.header.octree_root, self.header.octree_depth)?;
        let n = tree.cells_per_axis() as u64;
        for &c in &self.occupied {
            if c >= n * n * n {
                return Err(Error::DimensionMismatch(format!("leaf code {c} out of range")));
            }
            tree.set_occupied(tree.decode(c));
        }
        Ok(tree)
    }

    pub fn encode(&self) -> Vec<u8> {
        let header = toml::to_string(&self.header).expect("checkpoint header serialises");
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let put_str = |out: &mut Vec<u8>, s: &str| {
            out.extend_from_slice(&(s.len() as u32).to_le_bytes());
            out.extend_from_slice(s.as_bytes());
        };
        put_str(&mut out, &header);
        out.extend_from_slice(&(self.store.len() as u32).to_le_bytes());
        for b in self.store.blocks() {
            put_str(&mut out, &b.name);
            put_str(&mut out, b.category.name());
            out.extend_from_slice(&(b.shape.len() as u32).to_le_bytes());
            for &d in &b.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in &b.values {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out.extend_from_slice(&(self.occupied.len() as u32).to_le_bytes());
        for &c in &self.occupied {
            out.extend_from_slice(&c.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic { expected: "NUCK" });
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::DimensionMismatch(format!("unsupported version {version}")));
        }
        let header_text = r.string()?;
        let header: CheckpointHeader = toml::from_str(&header_text).map_err(|e| Error::Parse {
            line: 0,
            msg: format!("checkpoint header: {e}"),
        })?;
        let mut store = ParamStore::new();
        for _ in 0..r.u32()? {
            let name = r.string()?;
            let cat = r.string()?;
            let category = Category::from_name(&cat).ok_or_else(|| Error::Parse {
                line: 0,
                msg: format!("unknown category `{cat}`"),
            })?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(4 * n)?;
            let values = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            store.add(name, category, shape, values)?;
        }
        let count = r.u32()? as usize;
        let occupied = (0..count)
            .map(|_| r.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap())))
            .collect::<Result<Vec<_>>>()?;
        if r.pos != bytes.len() {
            return Err(Error::TruncatedFile {
                expected: r.pos,
                found: bytes.len(),
            });
        }
        Ok(Self {
            header,
            store,
            occupied,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::TruncatedFile {
                expected: self.pos + n,
                found: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Parse {
            line: 0,
            msg: "invalid UTF-8 string".into(),
        })
    }
}

pub fn write_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    write_bytes(path, &ck.encode())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::decode(&read_bytes(path)?)
}

/// Parses a TOML document into `T`, mapping errors to [`Error::Parse`].
pub fn parse_toml<T: serde::de::DeserializeOwned>(text: &str) -> Result<T> {
    toml::from_str(text).map_err(|e| {
        let line = e
            .span()
            .map(|s| text[..s.start.min(text.len())].lines().count().max(1))
            .unwrap_or(0);
        Error::Parse {
            line,
            msg: e.message().to_string(),
        }
    })
}

pub fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    parse_toml(&read_text(path)?)
}

pub fn write_toml<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = toml::to_string(value)
        .map_err(|e| Error::InvalidConfig(format!("cannot serialise: {e}")))?;
    write_bytes(path, text.as_bytes())
}

/// Paths of the on-disk dataset layout rooted at one directory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetLayout {
    pub root: PathBuf,
}

impl DatasetLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
    pub fn scene(&self) -> PathBuf {
        self.root.join("scene.cfg")
    }
    pub fn poses(&self) -> PathBuf {
        self.root.join("poses.txt")
    }
    pub fn poses_gt(&self) -> PathBuf {
        self.root.join("poses_gt.txt")
    }
    pub fn flow(&self, j: usize, k: usize) -> PathBuf {
        self.root.join("flow").join(format!("{j}_{k}.nufl"))
    }
    pub fn disparity(&self, j: usize) -> PathBuf {
        self.root.join("disp").join(format!("{j}.nudp"))
    }
    pub fn image(&self, j: usize) -> PathBuf {
        self.root.join("images").join(format!("{j}.ppm"))
    }
    pub fn gt_samples(&self) -> PathBuf {
        self.root.join("gt_samples.ply")
    }
}

/// A dataset held in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: SceneConfig,
    pub poses: Trajectory,
    pub poses_gt: Option<Trajectory>,
    pub flows: Vec<((usize, usize), PixelMap)>,
    pub disparities: Vec<(usize, PixelMap)>,
    pub images: Vec<(usize, Image)>,
    pub gt_samples: Option<Vec<Vec3>>,
}

impl Dataset {
    pub fn save(&self, dir: &Path) -> Result<()> {
        let layout = DatasetLayout::new(dir);
        write_toml(&layout.scene(), &self.config)?;
        write_tum(&layout.poses(), &self.poses)?;
        if let Some(gt) = &self.poses_gt {
            write_tum(&layout.poses_gt(), gt)?;
        }
        for ((j, k), m) in &self.flows {
            write_flow(&layout.flow(*j, *k), m)?;
        }
        for (j, m) in &self.disparities {
            write_disparity(&layout.disparity(*j), m)?;
        }
        for (j, im) in &self.images {
            write_ppm(&layout.image(*j), im)?;
        }
        if let Some(s) = &self.gt_samples {
            let cloud = Mesh {
                vertices: s.clone(),
                ..Mesh::default()
            };
            write_ply(&layout.gt_samples(), &cloud)?;
        }
        Ok(())
    }

    /// Loads a dataset, checking that every file references a known frame
    /// and matches the camera dimensions.
    pub fn load(dir: &Path) -> Result<Self> {
        let layout = DatasetLayout::new(dir);
        let config: SceneConfig = read_toml(&layout.scene())?;
        config.validate()?;
        let k = config.trajectory.intrinsics;
        let poses = read_tum(&layout.poses())?;
        let ids: Vec<usize> = poses.iter().map(|(i, _)| *i).collect();
        let poses_gt = if layout.poses_gt().exists() {
            let gt = read_tum(&layout.poses_gt())?;
            if gt.len() != poses.len() {
                return Err(Error::CountMismatch(poses.len(), gt.len()));
            }
            Some(gt)
        } else {
            None
        };
        let mut flows = Vec::new();
        for (j, k_id) in list_indexed(&dir.join("flow"), "nufl")? {
            let (j, kk) = k_id.ok_or_else(|| Error::Parse {
                line: 0,
                msg: format!("flow file for frame {j} lacks a target id"),
            })
            .map(|kk| (j, kk))?;
            if !ids.contains(&j) || !ids.contains(&kk) {
                return Err(Error::DimensionMismatch(format!(
                    "flow {j}_{kk} references an unknown frame"
                )));
            }
            let m = read_flow(&layout.flow(j, kk))?;
            m.check_dims(&k)?;
            flows.push(((j, kk), m));
        }
        let mut disparities = Vec::new();
        for (j, _) in list_indexed(&dir.join("disp"), "nudp")? {
            let m = read_disparity(&layout.disparity(j))?;
            m.check_dims(&k)?;
            disparities.push((j, m));
        }
        let mut images = Vec::new();
        for (j, _) in list_indexed(&dir.join("images"), "ppm")? {
            let im = read_ppm(&layout.image(j))?;
            if im.width != k.width || im.height != k.height {
                return Err(Error::DimensionMismatch(format!("image {j}")));
            }
            images.push((j, im));
        }
        let gt_samples = if layout.gt_samples().exists() {
            Some(read_ply(&layout.gt_samples())?.vertices)
        } else {
            None
        };
        Ok(Self {
            config,
            poses,
            poses_gt,
            flows,
            disparities,
            images,
            gt_samples,
        })
    }
}

/// Files named `J.ext` or `J_K.ext`, sorted by index.
fn list_indexed(dir: &Path, ext: &str) -> Result<Vec<(usize, Option<usize>)>> {
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) != Some(ext) {
            continue;
        }
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("");
        let bad = || Error::Parse {
            line: 0,
            msg: format!("unexpected file name {}", path.display()),
        };
        let mut parts = stem.split('_');
        let j = parts.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
        let k = match parts.next() {
            Some(s) => Some(s.parse().map_err(|_| bad())?),
            None => None,
        };
        out.push((j, k));
    }
    out.sort();
    Ok(out)
}
