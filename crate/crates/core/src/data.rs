//! Volume I/O, block partitioning, soft labels from SWC centerlines, and
//! synthetic tubular phantoms for desk-scale training.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::morpho::{SwcNode, SwcTree};
use crate::tensor::{Element, Tensor};

/// Default halo width of the soft labels, as a multiple of the local radius.
pub const DEFAULT_DECAY: f64 = 1.5;
/// Default foreground-ratio threshold for block selection.
pub const DEFAULT_FG_RATIO: f64 = 0.001;
/// Default in-plane partition stride (half-block overlap at 100×100).
pub const DEFAULT_STRIDE: usize = 50;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: invalid volume header: {reason}")]
    BadHeader { path: PathBuf, reason: String },
    #[error("{path}: payload holds {actual} bytes, header implies {expected}")]
    PayloadSize {
        path: PathBuf,
        expected: usize,
        actual: usize,
    },
    #[error("volume shape {shape:?} has a zero extent")]
    ZeroExtent { shape: [usize; 3] },
    #[error("volume contains non-finite voxels")]
    NonFinite,
    #[error("{0}")]
    InvalidArgument(String),
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch {
        left: [usize; 3],
        right: [usize; 3],
    },
    #[error(transparent)]
    Swc(#[from] crate::morpho::SwcError),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Scalar 3D image, z-major, intensities nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub shape: (usize, usize, usize),
    pub voxels: Vec<f32>,
    pub spacing: [f64; 3],
}

impl Volume {
    pub fn new(shape: (usize, usize, usize), voxels: Vec<f32>) -> Result<Self> {
        let (d, h, w) = shape;
        if d == 0 || h == 0 || w == 0 {
            return Err(DataError::ZeroExtent { shape: [d, h, w] });
        }
        if voxels.len() != d * h * w {
            return Err(DataError::InvalidArgument(format!(
                "shape {shape:?} implies {} voxels, got {}",
                d * h * w,
                voxels.len()
            )));
        }
        if voxels.iter().any(|v| !v.is_finite()) {
            return Err(DataError::NonFinite);
        }
        Ok(Volume {
            shape,
            voxels,
            spacing: [1.0, 1.0, 1.0],
        })
    }

    pub fn zeros(shape: (usize, usize, usize)) -> Self {
        let (d, h, w) = shape;
        Volume {
            shape,
            voxels: vec![0.0; d * h * w],
            spacing: [1.0, 1.0, 1.0],
        }
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.shape.1 + y) * self.shape.2 + x
    }

    pub fn at(&self, z: usize, y: usize, x: usize) -> f32 {
        self.voxels[self.index(z, y, x)]
    }

    pub fn set(&mut self, z: usize, y: usize, x: usize, v: f32) {
        let i = self.index(z, y, x);
        self.voxels[i] = v;
    }

    pub fn to_tensor<T: Element>(&self) -> Tensor<T> {
        let (d, h, w) = self.shape;
        Tensor::new(
            vec![d, h, w],
            self.voxels.iter().map(|&v| T::from_f64(v as f64)).collect(),
        )
        .expect("voxel count matches shape")
    }
}

// ── Volume container I/O ─────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct VolumeHeader {
    shape: [usize; 3],
    dtype: String,
    spacing: [f64; 3],
    data: String,
}

/// Writes `<stem>.vjson` + `<stem>.vraw` (little-endian f32, z-major).
/// `path` must be the `.vjson` sidecar path.
pub fn save_volume(path: &Path, vol: &Volume) -> Result<()> {
    let raw_name = path
        .file_stem()
        .map(|s| format!("{}.vraw", s.to_string_lossy()))
        .ok_or_else(|| DataError::InvalidArgument(format!("bad volume path {path:?}")))?;
    let header = VolumeHeader {
        shape: [vol.shape.0, vol.shape.1, vol.shape.2],
        dtype: "f32".into(),
        spacing: vol.spacing,
        data: raw_name.clone(),
    };
    let json = serde_json::to_string(&header)
        .map_err(|e| DataError::InvalidArgument(format!("header encoding failed: {e}")))?;
    let io_err = |source, p: &Path| DataError::Io {
        path: p.to_path_buf(),
        source,
    };
    std::fs::write(path, json).map_err(|e| io_err(e, path))?;
    let raw_path = path.with_file_name(raw_name);
    let mut bytes = Vec::with_capacity(vol.voxels.len() * 4);
    for v in &vol.voxels {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(&raw_path, bytes).map_err(|e| io_err(e, &raw_path))
}

pub fn load_volume(path: &Path) -> Result<Volume> {
    let io_err = |source, p: &Path| DataError::Io {
        path: p.to_path_buf(),
        source,
    };
    let text = std::fs::read_to_string(path).map_err(|e| io_err(e, path))?;
    let header: VolumeHeader = serde_json::from_str(&text).map_err(|e| DataError::BadHeader {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    if header.dtype != "f32" {
        return Err(DataError::BadHeader {
            path: path.to_path_buf(),
            reason: format!("unsupported dtype {:?}", header.dtype),
        });
    }
    let [d, h, w] = header.shape;
    if d == 0 || h == 0 || w == 0 {
        return Err(DataError::BadHeader {
            path: path.to_path_buf(),
            reason: format!("zero extent in shape {:?}", header.shape),
        });
    }
    let raw_path = path.with_file_name(&header.data);
    let bytes = std::fs::read(&raw_path).map_err(|e| io_err(e, &raw_path))?;
    let expected = d * h * w * 4;
    if bytes.len() != expected {
        return Err(DataError::PayloadSize {
            path: raw_path,
            expected,
            actual: bytes.len(),
        });
    }
    let voxels = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let mut vol = Volume::new((d, h, w), voxels)?;
    vol.spacing = header.spacing;
    Ok(vol)
}

// ── Block partitioning ───────────────────────────────────────────────

/// One training crop: a 5-slice stack and the soft label of its center
/// slice. Selected blocks satisfy `foreground_ratio >= threshold`.
#[derive(Debug, Clone)]
pub struct Block {
    pub origin: (usize, usize, usize),
    pub data: Tensor<f32>,
    pub soft_label: Tensor<f32>,
    pub foreground_ratio: f64,
}

/// Tiles `vol` into `(bd, bh, bw)` blocks (depth stride 1, in-plane stride
/// `stride`) and keeps those whose center-slice label, binarized at 0.5,
/// has foreground fraction ≥ `ratio_threshold`. Deterministic (z, y, x)
/// order.
pub fn partition_blocks(
    vol: &Volume,
    labels: &Volume,
    block_shape: (usize, usize, usize),
    stride: usize,
    ratio_threshold: f64,
) -> Result<Vec<Block>> {
    if vol.shape != labels.shape {
        return Err(DataError::ShapeMismatch {
            left: [vol.shape.0, vol.shape.1, vol.shape.2],
            right: [labels.shape.0, labels.shape.1, labels.shape.2],
        });
    }
    if !(0.0..=1.0).contains(&ratio_threshold) {
        return Err(DataError::InvalidArgument(format!(
            "ratio threshold must lie in [0,1], got {ratio_threshold}"
        )));
    }
    if stride == 0 {
        return Err(DataError::InvalidArgument("stride must be >= 1".into()));
    }
    let (d, h, w) = vol.shape;
    let (bd, bh, bw) = block_shape;
    if bd == 0 || bh == 0 || bw == 0 || bd % 2 == 0 {
        return Err(DataError::InvalidArgument(format!(
            "block shape {block_shape:?} must be positive with odd depth"
        )));
    }
    let mut blocks = Vec::new();
    if d < bd || h < bh || w < bw {
        return Ok(blocks);
    }
    let ys: Vec<usize> = (0..=h - bh).step_by(stride).collect();
    let xs: Vec<usize> = (0..=w - bw).step_by(stride).collect();
    for z0 in 0..=d - bd {
        for &y0 in &ys {
            for &x0 in &xs {
                let zc = z0 + bd / 2;
                let mut fg = 0usize;
                let mut label = Vec::with_capacity(bh * bw);
                for y in 0..bh {
                    for x in 0..bw {
                        let v = labels.at(zc, y0 + y, x0 + x);
                        label.push(v);
                        if v >= 0.5 {
                            fg += 1;
                        }
                    }
                }
                let ratio = fg as f64 / (bh * bw) as f64;
                if ratio < ratio_threshold {
                    continue;
                }
                let mut data = Vec::with_capacity(bd * bh * bw);
                for z in 0..bd {
                    for y in 0..bh {
                        for x in 0..bw {
                            data.push(vol.at(z0 + z, y0 + y, x0 + x));
                        }
                    }
                }
                blocks.push(Block {
                    origin: (z0, y0, x0),
                    data: Tensor::new(vec![bd, bh, bw], data).expect("sizes match"),
                    soft_label: Tensor::new(vec![bh, bw], label).expect("sizes match"),
                    foreground_ratio: ratio,
                });
            }
        }
    }
    Ok(blocks)
}

// ── Soft labels from SWC ─────────────────────────────────────────────

struct Segment {
    a: [f64; 3], // (z, y, x)
    b: [f64; 3],
    ra: f64,
    rb: f64,
}

/// Distance from `p` to the segment and the radius interpolated at the
/// nearest point.
fn point_segment(p: [f64; 3], s: &Segment) -> (f64, f64) {
    let ab = [s.b[0] - s.a[0], s.b[1] - s.a[1], s.b[2] - s.a[2]];
    let ap = [p[0] - s.a[0], p[1] - s.a[1], p[2] - s.a[2]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1] + ab[2] * ab[2];
    let t = if len2 > 0.0 {
        ((ap[0] * ab[0] + ap[1] * ab[1] + ap[2] * ab[2]) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let q = [
        s.a[0] + t * ab[0],
        s.a[1] + t * ab[1],
        s.a[2] + t * ab[2],
    ];
    let d = ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt();
    (d, s.ra + t * (s.rb - s.ra))
}

fn tree_segments(swc: &SwcTree) -> Vec<Segment> {
    let by_id: std::collections::HashMap<i64, &SwcNode> =
        swc.nodes().iter().map(|n| (n.id, n)).collect();
    let mut has_child: std::collections::HashSet<i64> = std::collections::HashSet::new();
    let mut segments = Vec::new();
    for n in swc.nodes() {
        if n.parent != -1 {
            let p = by_id[&n.parent];
            has_child.insert(p.id);
            segments.push(Segment {
                a: [p.z, p.y, p.x],
                b: [n.z, n.y, n.x],
                ra: p.radius,
                rb: n.radius,
            });
        }
    }
    // Isolated roots contribute a zero-length segment so they still render.
    for n in swc.nodes() {
        if n.parent == -1 && !has_child.contains(&n.id) {
            segments.push(Segment {
                a: [n.z, n.y, n.x],
                b: [n.z, n.y, n.x],
                ra: n.radius,
                rb: n.radius,
            });
        }
    }
    segments
}

/// Radius-normalized soft labels: for each voxel, with `d` the distance to
/// the nearest centerline segment and `r` the radius interpolated there,
/// `label = clamp(1 − d/(r·decay), 0, 1)`. Exact per voxel over segments.
pub fn dt_labels(vol_shape: (usize, usize, usize), swc: &SwcTree, decay: f64) -> Result<Volume> {
    if swc.is_empty() {
        return Err(DataError::InvalidArgument("empty SWC tree".into()));
    }
    if decay <= 0.0 {
        return Err(DataError::InvalidArgument(format!(
            "decay must be positive, got {decay}"
        )));
    }
    if let Some(bad) = swc.nodes().iter().find(|n| n.radius <= 0.0) {
        return Err(DataError::InvalidArgument(format!(
            "node {} has non-positive radius {}",
            bad.id, bad.radius
        )));
    }
    let (d, h, w) = vol_shape;
    if d == 0 || h == 0 || w == 0 {
        return Err(DataError::ZeroExtent { shape: [d, h, w] });
    }
    let segments = tree_segments(swc);
    let mut voxels = vec![0.0f32; d * h * w];
    voxels
        .par_chunks_mut(w)
        .enumerate()
        .for_each(|(row, chunk)| {
            let z = row / h;
            let y = row % h;
            for (x, out) in chunk.iter_mut().enumerate() {
                let p = [z as f64, y as f64, x as f64];
                let mut best = (f64::INFINITY, 1.0);
                for s in &segments {
                    let (dist, r) = point_segment(p, s);
                    if dist < best.0 {
                        best = (dist, r);
                    }
                }
                let label = (1.0 - best.0 / (best.1 * decay)).clamp(0.0, 1.0);
                *out = label as f32;
            }
        });
    Volume::new(vol_shape, voxels)
}

// ── Synthetic phantoms ───────────────────────────────────────────────

/// Generates a random branching tubular phantom: the soft-label rendering
/// of a random tree plus clipped Gaussian noise, together with the
/// ground-truth SWC. `branches == 1` yields a single straight tube. Pure
/// function of the seed.
pub fn gen_phantom(
    seed: u64,
    size: (usize, usize, usize),
    branches: usize,
    radius_range: (f64, f64),
    noise: f64,
) -> Result<(Volume, SwcTree)> {
    let (d, h, w) = size;
    if d < 8 || h < 32 || w < 32 {
        return Err(DataError::InvalidArgument(format!(
            "phantom size {size:?} too small (need >= 8x32x32)"
        )));
    }
    let (r_lo, r_hi) = radius_range;
    if !(r_lo > 0.0 && r_hi >= r_lo && r_hi.is_finite()) {
        return Err(DataError::InvalidArgument(format!(
            "degenerate radius range ({r_lo}, {r_hi})"
        )));
    }
    if branches == 0 {
        return Err(DataError::InvalidArgument("need at least one branch".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bounds = [d as f64 - 1.0, h as f64 - 1.0, w as f64 - 1.0];
    // Keep tubes clear of the in-plane faces; the depth margin is looser so
    // shallow stacks still fit a full tube.
    let margins = [
        (r_hi * 0.5 + 1.0).min(bounds[0] * 0.3),
        (r_hi + 1.5).min(bounds[1] * 0.4),
        (r_hi + 1.5).min(bounds[2] * 0.4),
    ];
    let inside =
        |p: [f64; 3]| (0..3).all(|ax| p[ax] >= margins[ax] && p[ax] <= bounds[ax] - margins[ax]);

    let mut nodes: Vec<SwcNode> = Vec::new();
    let mut next_id = 1i64;
    // Each pending branch: (attach parent id, start point, direction, radius).
    let mut pending: Vec<(i64, [f64; 3], [f64; 3], f64)> = Vec::new();

    let dir0 = random_unit(&mut rng);
    let start = [
        d as f64 / 2.0 + rng.random_range(-1.0..1.0),
        h as f64 / 2.0 + rng.random_range(-(h as f64) / 6.0..h as f64 / 6.0),
        w as f64 / 2.0 + rng.random_range(-(w as f64) / 6.0..w as f64 / 6.0),
    ];
    let r0 = rng.random_range(r_lo..=r_hi);
    pending.push((-1, start, dir0, r0));
    let mut created_branches = 0usize;

    while let Some((parent, start, dir, radius)) = pending.pop() {
        if created_branches >= branches {
            break;
        }
        created_branches += 1;
        let jitter = if branches == 1 { 0.0 } else { 0.12 };
        let step = 1.5;
        let mut p = start;
        let mut dcur = dir;
        let mut prev_id = parent;
        let mut branch_node_ids = Vec::new();
        // Extend backwards too so the first branch crosses the volume.
        if parent == -1 {
            let mut q = start;
            let back = [-dir[0], -dir[1], -dir[2]];
            loop {
                let cand = [q[0] + back[0] * step, q[1] + back[1] * step, q[2] + back[2] * step];
                if !inside(cand) {
                    break;
                }
                q = cand;
            }
            p = q;
        }
        loop {
            let id = next_id;
            next_id += 1;
            nodes.push(SwcNode {
                id,
                node_type: if prev_id == -1 { 1 } else { 3 },
                x: p[2],
                y: p[1],
                z: p[0],
                radius,
                parent: prev_id,
            });
            branch_node_ids.push(id);
            prev_id = id;
            let mut dnew = [
                dcur[0] + jitter * rng.random_range(-1.0..1.0),
                dcur[1] + jitter * rng.random_range(-1.0..1.0),
                dcur[2] + jitter * rng.random_range(-1.0..1.0),
            ];
            let n = (dnew[0] * dnew[0] + dnew[1] * dnew[1] + dnew[2] * dnew[2]).sqrt();
            for v in &mut dnew {
                *v /= n;
            }
            let cand = [p[0] + dnew[0] * step, p[1] + dnew[1] * step, p[2] + dnew[2] * step];
            dcur = dnew;
            if !inside(cand) {
                break;
            }
            p = cand;
        }
        // Spawn children from random interior nodes of this branch.
        if created_branches < branches && branch_node_ids.len() > 4 {
            let spawn = (branches - created_branches).min(2);
            for _ in 0..spawn {
                let k = rng.random_range(1..branch_node_ids.len() - 1);
                let nid = branch_node_ids[k];
                let attach = nodes.iter().find(|n| n.id == nid).copied().unwrap();
                let child_dir = random_unit(&mut rng);
                let child_r = (radius * rng.random_range(0.6..0.95)).max(r_lo);
                pending.push((
                    attach.id,
                    [attach.z, attach.y, attach.x],
                    child_dir,
                    child_r,
                ));
            }
        }
    }

    let tree = SwcTree::new(nodes)?;
    let mut vol = dt_labels(size, &tree, DEFAULT_DECAY)?;
    if noise > 0.0 {
        let gauss = Normal::new(0.0, noise).unwrap();
        for v in &mut vol.voxels {
            let n: f64 = gauss.sample(&mut rng);
            *v = ((*v as f64 + n).clamp(0.0, 1.0)) as f32;
        }
    }
    Ok((vol, tree))
}

/// Random direction, damped along z: microscopy stacks are shallow, so
/// neurites run mostly in-plane.
fn random_unit(rng: &mut ChaCha8Rng) -> [f64; 3] {
    loop {
        let v = [
            0.25 * rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 0.2 && n <= 1.0 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}
