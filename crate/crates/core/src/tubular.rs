//! Deformable tube sampling: per-view grids with iteratively accumulated
//! bounded offsets, volume sampling through the tubes, and multi-view
//! fusion into patch tokens.
//!
//! A tube holds 256 sample points. Along its own axis the coordinates are
//! fixed at unit spacing, `anchor + h` for `h ∈ {−127, …, 128}` (tube index
//! `t` maps to `h = t − 127`, so the center element `t = 127` sits at the
//! anchor). The two off-axis coordinates accumulate outward from the
//! center: each step adds an offset pair bounded to `[−1, 1]` to the
//! previous grid point. Offset step `s ∈ 0..128` is the forward step onto
//! `h = s+1`; step `s ∈ 128..255` is the backward step onto
//! `h = −(s−127)`. Within a pair, components follow ascending axis order
//! (z before y before x) of the two off-axes.

use std::fmt;

use crate::tensor::graph::{CustomOp, Graph, Var};
use crate::tensor::{ops, Element, Tensor, TensorError};
use crate::transfer::{TubularKernel, PATCH, TUBE_LEN};

/// Number of offset pairs per tube: one per step away from the center.
pub const STEPS: usize = TUBE_LEN - 1;
/// Tube index of the center element (h = 0).
pub const CENTER: usize = 127;

pub type Result<T> = std::result::Result<T, TensorError>;

/// View axis a tube runs along, in (z, y, x) volume order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Z,
    Y,
    X,
}

impl Axis {
    pub fn index(self) -> usize {
        match self {
            Axis::Z => 0,
            Axis::Y => 1,
            Axis::X => 2,
        }
    }

    /// The two remaining axes in ascending index order.
    pub fn off_axes(self) -> [usize; 2] {
        match self {
            Axis::Z => [1, 2],
            Axis::Y => [0, 2],
            Axis::X => [0, 1],
        }
    }

    pub const ALL: [Axis; 3] = [Axis::Z, Axis::Y, Axis::X];
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Axis::Z => write!(f, "z"),
            Axis::Y => write!(f, "y"),
            Axis::X => write!(f, "x"),
        }
    }
}

impl std::str::FromStr for Axis {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "z" => Ok(Axis::Z),
            "y" => Ok(Axis::Y),
            "x" => Ok(Axis::X),
            other => Err(format!("unknown axis {other:?} (expected z, y, or x)")),
        }
    }
}

/// One tube's 256 ordered sample coordinates for one view.
#[derive(Debug, Clone, PartialEq)]
pub struct TubeGrid {
    pub axis: Axis,
    /// Continuous (z, y, x) voxel coordinates of the center element.
    pub anchor: [f64; 3],
    /// 256 ordered (z, y, x) triples; index `t` holds `h = t − 127`.
    pub coords: Vec<[f64; 3]>,
}

impl TubeGrid {
    /// CSV dump, one `t,z,y,x` row per sample.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,z,y,x\n");
        for (t, c) in self.coords.iter().enumerate() {
            out.push_str(&format!("{t},{},{},{}\n", c[0], c[1], c[2]));
        }
        out
    }
}

/// Core recurrence shared by the value-level and graph-level paths.
/// Writes 256 coordinate triples into `out` (row-major `[256][3]`).
fn accumulate<T: Element>(
    anchor: [T; 3],
    axis: Axis,
    offsets: &[T],
    out: &mut [T],
) -> Result<()> {
    debug_assert_eq!(offsets.len(), 2 * STEPS);
    debug_assert_eq!(out.len(), 3 * TUBE_LEN);
    let one = T::ONE;
    for (s, pair) in offsets.chunks_exact(2).enumerate() {
        if pair[0].abs() > one || pair[1].abs() > one {
            return Err(TensorError::InvalidArgument {
                context: "build_tube",
                message: format!(
                    "offset step {s} = ({}, {}) outside [-1, 1]",
                    pair[0], pair[1]
                ),
            });
        }
    }
    let ax = axis.index();
    let [oa, ob] = axis.off_axes();

    out[CENTER * 3 + ax] = anchor[ax];
    out[CENTER * 3 + oa] = anchor[oa];
    out[CENTER * 3 + ob] = anchor[ob];

    // Forward: h = 1..=128, consuming offset steps 0..128.
    let mut a = anchor[oa];
    let mut b = anchor[ob];
    let mut axial = anchor[ax];
    for s in 0..TUBE_LEN - CENTER - 1 {
        a += offsets[2 * s];
        b += offsets[2 * s + 1];
        axial += one;
        let t = CENTER + 1 + s;
        out[t * 3 + ax] = axial;
        out[t * 3 + oa] = a;
        out[t * 3 + ob] = b;
    }
    // Backward: h = -1..=-127, consuming offset steps 128..255.
    a = anchor[oa];
    b = anchor[ob];
    axial = anchor[ax];
    for s in 0..CENTER {
        let k = TUBE_LEN - CENTER - 1 + s;
        a += offsets[2 * k];
        b += offsets[2 * k + 1];
        axial = axial - one;
        let t = CENTER - 1 - s;
        out[t * 3 + ax] = axial;
        out[t * 3 + oa] = a;
        out[t * 3 + ob] = b;
    }
    Ok(())
}

/// Builds one tube grid from an anchor and 255 offset pairs.
pub fn build_tube(anchor: [f64; 3], axis: Axis, offsets: &[[f64; 2]]) -> Result<TubeGrid> {
    if offsets.len() != STEPS {
        return Err(TensorError::InvalidArgument {
            context: "build_tube",
            message: format!("expected {STEPS} offset pairs, got {}", offsets.len()),
        });
    }
    let flat: Vec<f64> = offsets.iter().flat_map(|p| [p[0], p[1]]).collect();
    let mut out = vec![0.0f64; 3 * TUBE_LEN];
    accumulate(anchor, axis, &flat, &mut out)?;
    let coords = out.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
    Ok(TubeGrid {
        axis,
        anchor,
        coords,
    })
}

/// Anchor layout over a padded block: one anchor per 16×16 in-plane patch,
/// centered in the patch, at mid-depth.
pub fn anchor_grid(depth: usize, padded_h: usize, padded_w: usize) -> Vec<[f64; 3]> {
    debug_assert_eq!(padded_h % PATCH, 0);
    debug_assert_eq!(padded_w % PATCH, 0);
    let z0 = (depth - 1) as f64 / 2.0;
    let half = (PATCH - 1) as f64 / 2.0;
    let mut anchors = Vec::with_capacity((padded_h / PATCH) * (padded_w / PATCH));
    for i in 0..padded_h / PATCH {
        for j in 0..padded_w / PATCH {
            anchors.push([
                z0,
                (i * PATCH) as f64 + half,
                (j * PATCH) as f64 + half,
            ]);
        }
    }
    anchors
}

// ── Graph-level path ─────────────────────────────────────────────────

struct TubeAccumulateOp {
    anchors: Vec<[f64; 3]>,
    axis: Axis,
}

impl<T: Element> CustomOp<T> for TubeAccumulateOp {
    fn name(&self) -> &'static str {
        "tube_accumulate"
    }

    fn backward(&self, grad_out: &Tensor<T>, _inputs: &[&Tensor<T>]) -> Vec<Option<Tensor<T>>> {
        // grad_out: [A*256, 3]. The axial column is constant w.r.t. the
        // offsets; each off-axis offset receives the summed gradient of
        // every tube point it propagated to (reverse accumulation).
        let n_anchors = self.anchors.len();
        let [oa, ob] = self.axis.off_axes();
        let mut d_off = Tensor::zeros(&[n_anchors, STEPS, 2]);
        let g = grad_out.data();
        for ai in 0..n_anchors {
            let base = ai * TUBE_LEN;
            let dbase = ai * STEPS * 2;
            let mut acc_a = T::ZERO;
            let mut acc_b = T::ZERO;
            // Forward side: step s reaches tube points t >= 128 + s.
            for s in (0..TUBE_LEN - CENTER - 1).rev() {
                let t = CENTER + 1 + s;
                acc_a += g[(base + t) * 3 + oa];
                acc_b += g[(base + t) * 3 + ob];
                d_off.data_mut()[dbase + 2 * s] = acc_a;
                d_off.data_mut()[dbase + 2 * s + 1] = acc_b;
            }
            // Backward side: step k = 128 + s reaches tube points t <= 126 - s.
            acc_a = T::ZERO;
            acc_b = T::ZERO;
            for s in (0..CENTER).rev() {
                let t = CENTER - 1 - s;
                acc_a += g[(base + t) * 3 + oa];
                acc_b += g[(base + t) * 3 + ob];
                let k = TUBE_LEN - CENTER - 1 + s;
                d_off.data_mut()[dbase + 2 * k] = acc_a;
                d_off.data_mut()[dbase + 2 * k + 1] = acc_b;
            }
        }
        vec![Some(d_off)]
    }
}

/// Turns per-anchor offsets `[A, 255, 2]` into tube sample coordinates
/// `[A*256, 3]`, differentiable w.r.t. the offsets.
pub fn accumulate_tubes<T: Element>(
    g: &mut Graph<T>,
    offsets: Var,
    anchors: &[[f64; 3]],
    axis: Axis,
) -> Result<Var> {
    let v = g.value(offsets);
    if v.shape() != [anchors.len(), STEPS, 2] {
        return Err(TensorError::DimensionMismatch {
            context: "accumulate_tubes",
            left: v.shape().to_vec(),
            right: vec![anchors.len(), STEPS, 2],
        });
    }
    if anchors.is_empty() {
        return Err(TensorError::InvalidArgument {
            context: "accumulate_tubes",
            message: "empty anchor grid".into(),
        });
    }
    let mut out = vec![T::ZERO; anchors.len() * TUBE_LEN * 3];
    for (ai, anchor) in anchors.iter().enumerate() {
        let anchor_t = [
            T::from_f64(anchor[0]),
            T::from_f64(anchor[1]),
            T::from_f64(anchor[2]),
        ];
        let off = &v.data()[ai * STEPS * 2..(ai + 1) * STEPS * 2];
        accumulate(
            anchor_t,
            axis,
            off,
            &mut out[ai * TUBE_LEN * 3..(ai + 1) * TUBE_LEN * 3],
        )?;
    }
    let value = Tensor::new(vec![anchors.len() * TUBE_LEN, 3], out)?;
    let op = TubeAccumulateOp {
        anchors: anchors.to_vec(),
        axis,
    };
    Ok(g.custom(Box::new(op), &[offsets], value))
}

/// Offset predictor for one view: a single patch-aligned convolution over
/// the block producing 2×255 channels per anchor, tanh-bounded, reshaped
/// to `[A, 255, 2]`. Zero weights give straight tubes.
pub fn predict_offsets<T: Element>(
    g: &mut Graph<T>,
    block: Var,
    weight: Var,
    bias: Var,
) -> Result<Var> {
    let raw = g.patch_conv3(block, weight, PATCH, PATCH)?;
    let anchors = g.value(raw).shape()[0];
    let biased = g.row_add(raw, bias)?;
    let squashed = g.tanh(biased);
    g.reshape(squashed, &[anchors, STEPS, 2])
}

/// Samples the block through every tube and applies the tubular weights:
/// `token[a, e] = Σ_t weights[e, t] · sample(block, coords_a(t))`.
pub fn embed_view_var<T: Element>(
    g: &mut Graph<T>,
    block: Var,
    weights: Var,
    coords: Var,
    n_anchors: usize,
) -> Result<Var> {
    if n_anchors == 0 {
        return Err(TensorError::InvalidArgument {
            context: "embed_view",
            message: "empty anchor grid".into(),
        });
    }
    let samples = g.trilinear(block, coords)?;
    let rows = g.reshape(samples, &[n_anchors, TUBE_LEN])?;
    g.matmul_nt(rows, weights)
}

/// Value-level tubular embedding over explicit grids.
pub fn embed_view<T: Element>(
    block: &Tensor<T>,
    kernel: &TubularKernel<T>,
    grids: &[TubeGrid],
) -> Result<Tensor<T>> {
    if grids.is_empty() {
        return Err(TensorError::InvalidArgument {
            context: "embed_view",
            message: "empty anchor grid".into(),
        });
    }
    for grid in grids {
        if grid.axis != kernel.axis {
            return Err(TensorError::InvalidArgument {
                context: "embed_view",
                message: format!(
                    "kernel axis {} does not match grid axis {}",
                    kernel.axis, grid.axis
                ),
            });
        }
    }
    let mut cdata = Vec::with_capacity(grids.len() * TUBE_LEN * 3);
    for grid in grids {
        for c in &grid.coords {
            cdata.extend([T::from_f64(c[0]), T::from_f64(c[1]), T::from_f64(c[2])]);
        }
    }
    let coords = Tensor::new(vec![grids.len() * TUBE_LEN, 3], cdata)?;
    let samples = ops::trilinear_sample(block, &coords)?;
    let rows = samples.reshape(&[grids.len(), TUBE_LEN])?;
    ops::matmul_nt(&rows, &kernel.weights)
}

/// Element-wise mean of the three view tokens followed by layer norm.
pub fn fuse_views_var<T: Element>(
    g: &mut Graph<T>,
    tok_z: Var,
    tok_y: Var,
    tok_x: Var,
    gamma: Var,
    beta: Var,
    eps: f64,
) -> Result<Var> {
    let zy = g.add(tok_z, tok_y)?;
    let zyx = g.add(zy, tok_x)?;
    let mean = g.scale(zyx, 1.0 / 3.0);
    g.layernorm(mean, gamma, beta, eps)
}

/// Value-level fusion mirror of [`fuse_views_var`].
pub fn fuse_views<T: Element>(
    tok_z: &Tensor<T>,
    tok_y: &Tensor<T>,
    tok_x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    if tok_z.shape() != tok_y.shape() || tok_y.shape() != tok_x.shape() {
        return Err(TensorError::DimensionMismatch {
            context: "fuse_views",
            left: tok_z.shape().to_vec(),
            right: tok_y.shape().to_vec(),
        });
    }
    let third = T::from_f64(1.0 / 3.0);
    let mean = Tensor::new(
        tok_z.shape().to_vec(),
        tok_z
            .data()
            .iter()
            .zip(tok_y.data().iter().zip(tok_x.data()))
            .map(|(&a, (&b, &c))| (a + b + c) * third)
            .collect(),
    )?;
    ops::layernorm(&mean, gamma, beta, eps)
}
