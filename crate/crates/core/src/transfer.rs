//! Seeding the 3D model from 2D pre-trained weights.
//!
//! Three strategies move a 2D patch-embedding kernel into 3D:
//! average inflation (replicate and divide by depth), center inflation
//! (place the 2D kernel on the middle depth slice, zeros elsewhere), and
//! tubular flattening (unroll each 16×16 kernel row-major into a 1×1×256
//! line of weights applied along a sampling tube per axis view).

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::model::{EmbedStrategy, ModelConfig};
use crate::tensor::archive::{self, Archive, ArchiveError, ArchiveTensor};
use crate::tensor::{Element, Tensor, TensorError};
use crate::tubular::Axis;

/// Spatial extent of the source patch kernel; fixed by the checkpoint format.
pub const PATCH: usize = 16;
/// Tube length: one weight per source kernel cell.
pub const TUBE_LEN: usize = PATCH * PATCH;
/// Initial logit of the decoder output bias; sigmoid(-2) ~ 0.12 matches a
/// sparse-foreground prior and keeps early training out of the
/// all-background basin.
pub const FG_PRIOR_LOGIT: f64 = -2.0;

#[derive(Debug, Error)]
pub enum TransferError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Archive(#[from] ArchiveError),
    #[error("checkpoint missing tensor {name:?}")]
    MissingTensor { name: String },
    #[error("checkpoint tensor {name:?} has shape {found:?}, expected {expected:?}")]
    BadShape {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("inflation depth must be >= 1, got {depth}")]
    BadDepth { depth: usize },
    #[error("center inflation requires an odd depth, got {depth}")]
    EvenDepth { depth: usize },
    #[error("kernel spatial extent must be {PATCH}x{PATCH}, got {found:?}")]
    NotPatchKernel { found: Vec<usize> },
    #[error(
        "checkpoint (E={ck_dim}, layers={ck_layers}) incompatible with config \
         (E={cfg_dim}, layers={cfg_layers}); offending tensors: {tensors:?}"
    )]
    Incompatible {
        ck_dim: usize,
        cfg_dim: usize,
        ck_layers: usize,
        cfg_layers: usize,
        tensors: Vec<String>,
    },
}

pub type Result<T> = std::result::Result<T, TransferError>;

/// How the source channel axis was collapsed into the tube weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelReduction {
    Mean,
    Sum,
}

/// A 16×16 kernel unrolled into 256 weights applied along one tube view.
///
/// The unrolling is row-major: kernel cell (r, c) lands at tube index
/// `t = r*16 + c`, so the map is a bijection and tests can invert it.
#[derive(Debug, Clone, PartialEq)]
pub struct TubularKernel<T: Element> {
    /// `[E, 256]`: per output channel, one weight per tube sample.
    pub weights: Tensor<T>,
    pub axis: Axis,
    pub channel_reduction: ChannelReduction,
}

/// Per-layer transformer weights of the 2D checkpoint. Attention and MLP
/// matrices are bias-free; only the layer norms carry affine parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights<T: Element> {
    pub attn_q: Tensor<T>,
    pub attn_k: Tensor<T>,
    pub attn_v: Tensor<T>,
    pub attn_o: Tensor<T>,
    pub mlp_fc1: Tensor<T>,
    pub mlp_fc2: Tensor<T>,
    pub ln1_g: Tensor<T>,
    pub ln1_b: Tensor<T>,
    pub ln2_g: Tensor<T>,
    pub ln2_b: Tensor<T>,
}

/// The 2D pre-trained weight set, as read from a `.dtna` archive.
///
/// Tensor naming convention inside the archive:
/// `meta` (f64 `[4]` = E, C, layers, heads), `patch.kernel` `[E,C,16,16]`,
/// `pos.embed` `[tokens,E]`, `block{i}.attn.{q,k,v,o}` `[E,E]`,
/// `block{i}.mlp.fc1` `[4E,E]`, `block{i}.mlp.fc2` `[E,4E]`,
/// `block{i}.{ln1,ln2}.{g,b}` `[E]`, `final_ln.{g,b}` `[E]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint2D<T: Element> {
    pub embed_dim: usize,
    pub channels: usize,
    pub heads: usize,
    pub patch_kernel: Tensor<T>,
    pub pos_embed: Tensor<T>,
    pub blocks: Vec<BlockWeights<T>>,
    pub final_ln_g: Tensor<T>,
    pub final_ln_b: Tensor<T>,
}

impl<T: Element> Checkpoint2D<T> {
    pub fn layers(&self) -> usize {
        self.blocks.len()
    }

    /// Parses and validates a checkpoint archive against the naming
    /// convention and the `(E, C, layers, heads)` meta header.
    pub fn from_archive(ar: &Archive) -> Result<Self> {
        let get = |name: &str| -> Result<Tensor<T>> {
            ar.get(name)
                .map(ArchiveTensor::to_tensor)
                .ok_or_else(|| TransferError::MissingTensor { name: name.into() })
        };
        let expect_shape = |name: &str, t: &Tensor<T>, shape: &[usize]| -> Result<()> {
            if t.shape() != shape {
                return Err(TransferError::BadShape {
                    name: name.into(),
                    found: t.shape().to_vec(),
                    expected: shape.to_vec(),
                });
            }
            Ok(())
        };

        let meta = get("meta")?;
        if meta.numel() != 4 {
            return Err(TransferError::BadShape {
                name: "meta".into(),
                found: meta.shape().to_vec(),
                expected: vec![4],
            });
        }
        let e = meta.data()[0].to_f64() as usize;
        let c = meta.data()[1].to_f64() as usize;
        let layers = meta.data()[2].to_f64() as usize;
        let heads = meta.data()[3].to_f64() as usize;

        let patch_kernel = get("patch.kernel")?;
        expect_shape("patch.kernel", &patch_kernel, &[e, c, PATCH, PATCH])?;
        let pos_embed = get("pos.embed")?;
        if pos_embed.rank() != 2 || pos_embed.shape()[1] != e || pos_embed.shape()[0] == 0 {
            return Err(TransferError::BadShape {
                name: "pos.embed".into(),
                found: pos_embed.shape().to_vec(),
                expected: vec![0, e],
            });
        }

        let mut blocks = Vec::with_capacity(layers);
        for i in 0..layers {
            let n = |suffix: &str| format!("block{i}.{suffix}");
            let block = BlockWeights {
                attn_q: get(&n("attn.q"))?,
                attn_k: get(&n("attn.k"))?,
                attn_v: get(&n("attn.v"))?,
                attn_o: get(&n("attn.o"))?,
                mlp_fc1: get(&n("mlp.fc1"))?,
                mlp_fc2: get(&n("mlp.fc2"))?,
                ln1_g: get(&n("ln1.g"))?,
                ln1_b: get(&n("ln1.b"))?,
                ln2_g: get(&n("ln2.g"))?,
                ln2_b: get(&n("ln2.b"))?,
            };
            for (suffix, t, shape) in [
                ("attn.q", &block.attn_q, vec![e, e]),
                ("attn.k", &block.attn_k, vec![e, e]),
                ("attn.v", &block.attn_v, vec![e, e]),
                ("attn.o", &block.attn_o, vec![e, e]),
                ("mlp.fc1", &block.mlp_fc1, vec![4 * e, e]),
                ("mlp.fc2", &block.mlp_fc2, vec![e, 4 * e]),
                ("ln1.g", &block.ln1_g, vec![e]),
                ("ln1.b", &block.ln1_b, vec![e]),
                ("ln2.g", &block.ln2_g, vec![e]),
                ("ln2.b", &block.ln2_b, vec![e]),
            ] {
                expect_shape(&n(suffix), t, &shape)?;
            }
            blocks.push(block);
        }

        let final_ln_g = get("final_ln.g")?;
        let final_ln_b = get("final_ln.b")?;
        expect_shape("final_ln.g", &final_ln_g, &[e])?;
        expect_shape("final_ln.b", &final_ln_b, &[e])?;

        Ok(Checkpoint2D {
            embed_dim: e,
            channels: c,
            heads,
            patch_kernel,
            pos_embed,
            blocks,
            final_ln_g,
            final_ln_b,
        })
    }

    pub fn to_archive(&self) -> Archive {
        let mut ar = Archive::new();
        let meta = Tensor::<f64>::from_vec(vec![
            self.embed_dim as f64,
            self.channels as f64,
            self.layers() as f64,
            self.heads as f64,
        ]);
        ar.insert("meta".into(), ArchiveTensor::F64(meta));
        let mut put = |name: String, t: &Tensor<T>| {
            ar.insert(name, ArchiveTensor::from_tensor(t.clone()));
        };
        put("patch.kernel".into(), &self.patch_kernel);
        put("pos.embed".into(), &self.pos_embed);
        for (i, b) in self.blocks.iter().enumerate() {
            put(format!("block{i}.attn.q"), &b.attn_q);
            put(format!("block{i}.attn.k"), &b.attn_k);
            put(format!("block{i}.attn.v"), &b.attn_v);
            put(format!("block{i}.attn.o"), &b.attn_o);
            put(format!("block{i}.mlp.fc1"), &b.mlp_fc1);
            put(format!("block{i}.mlp.fc2"), &b.mlp_fc2);
            put(format!("block{i}.ln1.g"), &b.ln1_g);
            put(format!("block{i}.ln1.b"), &b.ln1_b);
            put(format!("block{i}.ln2.g"), &b.ln2_g);
            put(format!("block{i}.ln2.b"), &b.ln2_b);
        }
        put("final_ln.g".into(), &self.final_ln_g);
        put("final_ln.b".into(), &self.final_ln_b);
        ar
    }

    /// Deterministic synthetic checkpoint for tests and demos. The patch
    /// kernel mixes structured filters (DC, gradients, oriented waves) with
    /// noise so that transferred embeddings carry usable local statistics;
    /// transformer blocks are small-magnitude so residual paths dominate.
    pub fn synthetic(
        embed_dim: usize,
        channels: usize,
        layers: usize,
        heads: usize,
        tokens: usize,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 0.01).unwrap();
        let dist = Normal::new(0.0, 0.02).unwrap();

        // A bank of distinct L2-normalized filters. Under row-major tube
        // flattening, filter rows map to tube positions, so the
        // center-row bumps double as local line integrals around the tube
        // anchor while staying sensible 2D patch features.
        let mut kernel = Tensor::zeros(&[embed_dim, channels, PATCH, PATCH]);
        for e in 0..embed_dim {
            let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let freq: f64 = rng.random_range(1.0..3.0);
            let mut pattern = [[0.0f64; PATCH]; PATCH];
            let mut mean = 0.0;
            for (r, row) in pattern.iter_mut().enumerate() {
                for (col, cell) in row.iter_mut().enumerate() {
                    let u = (r as f64 / (PATCH - 1) as f64) - 0.5;
                    let v = (col as f64 / (PATCH - 1) as f64) - 0.5;
                    *cell = match e % 8 {
                        0 => 1.0,
                        1 => u,
                        2 => v,
                        // Wide and narrow center-row bumps.
                        3 => (-u * u / 0.045).exp(),
                        4 => (-u * u / 0.008).exp(),
                        5 => (std::f64::consts::TAU * freq * v + phase).sin(),
                        6 => (std::f64::consts::TAU * freq * (u + v) + phase).sin(),
                        _ => u * u + v * v,
                    };
                    mean += *cell;
                }
            }
            mean /= (PATCH * PATCH) as f64;
            if e % 8 != 0 {
                for row in pattern.iter_mut() {
                    for cell in row.iter_mut() {
                        *cell -= mean;
                    }
                }
            }
            let norm = pattern
                .iter()
                .flatten()
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt()
                .max(1e-9);
            for c in 0..channels {
                let chan_scale = (0.9 + 0.2 * rng.random::<f64>()) * 0.8 / norm;
                for (r, row) in pattern.iter().enumerate() {
                    for (col, &cell) in row.iter().enumerate() {
                        let val = chan_scale * cell + noise.sample(&mut rng);
                        kernel.set(&[e, c, r, col], T::from_f64(val));
                    }
                }
            }
        }

        let mut pos = Tensor::zeros(&[tokens, embed_dim]);
        for t in 0..tokens {
            for e in 0..embed_dim {
                let angle = t as f64 / (10_000f64).powf(e as f64 / embed_dim as f64);
                let val = 0.25 * if e % 2 == 0 { angle.sin() } else { angle.cos() };
                pos.set(&[t, e], T::from_f64(val + noise.sample(&mut rng)));
            }
        }

        let mut rand_mat = |rows: usize, cols: usize| -> Tensor<T> {
            let data = (0..rows * cols)
                .map(|_| T::from_f64(dist.sample(&mut rng)))
                .collect();
            Tensor::new(vec![rows, cols], data).expect("shape matches data")
        };
        let blocks = (0..layers)
            .map(|_| BlockWeights {
                attn_q: rand_mat(embed_dim, embed_dim),
                attn_k: rand_mat(embed_dim, embed_dim),
                attn_v: rand_mat(embed_dim, embed_dim),
                attn_o: rand_mat(embed_dim, embed_dim),
                mlp_fc1: rand_mat(4 * embed_dim, embed_dim),
                mlp_fc2: rand_mat(embed_dim, 4 * embed_dim),
                ln1_g: Tensor::full(&[embed_dim], T::ONE),
                ln1_b: Tensor::zeros(&[embed_dim]),
                ln2_g: Tensor::full(&[embed_dim], T::ONE),
                ln2_b: Tensor::zeros(&[embed_dim]),
            })
            .collect();

        Checkpoint2D {
            embed_dim,
            channels,
            heads,
            patch_kernel: kernel,
            pos_embed: pos,
            blocks,
            final_ln_g: Tensor::full(&[embed_dim], T::ONE),
            final_ln_b: Tensor::zeros(&[embed_dim]),
        }
    }
}

// ── Inflation ────────────────────────────────────────────────────────

/// Average inflation: every depth slice holds `k2d / depth`, so the 3D
/// response on a depth-constant input reproduces the 2D response.
pub fn inflate_average<T: Element>(k2d: &Tensor<T>, depth: usize) -> Result<Tensor<T>> {
    if depth < 1 {
        return Err(TransferError::BadDepth { depth });
    }
    let s = k2d.shape();
    if s.len() != 4 {
        return Err(TransferError::NotPatchKernel {
            found: s.to_vec(),
        });
    }
    let (e, c, kh, kw) = (s[0], s[1], s[2], s[3]);
    let inv = T::from_f64(1.0 / depth as f64);
    let mut out = Tensor::zeros(&[e, c, depth, kh, kw]);
    let plane = kh * kw;
    for ec in 0..e * c {
        for z in 0..depth {
            for p in 0..plane {
                out.data_mut()[(ec * depth + z) * plane + p] = k2d.data()[ec * plane + p] * inv;
            }
        }
    }
    Ok(out)
}

/// Center inflation: the middle depth slice holds `k2d`, all others zero.
pub fn inflate_center<T: Element>(k2d: &Tensor<T>, depth: usize) -> Result<Tensor<T>> {
    if depth < 1 {
        return Err(TransferError::BadDepth { depth });
    }
    if depth % 2 == 0 {
        return Err(TransferError::EvenDepth { depth });
    }
    let s = k2d.shape();
    if s.len() != 4 {
        return Err(TransferError::NotPatchKernel {
            found: s.to_vec(),
        });
    }
    let (e, c, kh, kw) = (s[0], s[1], s[2], s[3]);
    let mid = depth / 2;
    let mut out = Tensor::zeros(&[e, c, depth, kh, kw]);
    let plane = kh * kw;
    for ec in 0..e * c {
        for p in 0..plane {
            out.data_mut()[(ec * depth + mid) * plane + p] = k2d.data()[ec * plane + p];
        }
    }
    Ok(out)
}

// ── Tubular flattening ───────────────────────────────────────────────

/// Unrolls a `[E,C,16,16]` kernel into a [`TubularKernel`], collapsing the
/// channel axis with the given reduction.
pub fn flatten_tubular<T: Element>(
    k2d: &Tensor<T>,
    axis: Axis,
    reduction: ChannelReduction,
) -> Result<TubularKernel<T>> {
    let s = k2d.shape();
    if s.len() != 4 || s[2] != PATCH || s[3] != PATCH {
        return Err(TransferError::NotPatchKernel {
            found: s.to_vec(),
        });
    }
    let (e, c) = (s[0], s[1]);
    let norm = match reduction {
        ChannelReduction::Mean => T::from_f64(1.0 / c as f64),
        ChannelReduction::Sum => T::ONE,
    };
    let mut weights = Tensor::zeros(&[e, TUBE_LEN]);
    for ei in 0..e {
        for r in 0..PATCH {
            for col in 0..PATCH {
                let mut acc = T::ZERO;
                for ci in 0..c {
                    acc += k2d.at(&[ei, ci, r, col]);
                }
                weights.set(&[ei, r * PATCH + col], acc * norm);
            }
        }
    }
    Ok(TubularKernel {
        weights,
        axis,
        channel_reduction: reduction,
    })
}

// ── Model seeding ────────────────────────────────────────────────────

/// Resizes a `[tokens, E]` positional embedding to a new token count by
/// linear interpolation along the token axis. Endpoints are preserved
/// exactly.
pub fn resize_pos_embed<T: Element>(pos: &Tensor<T>, target: usize) -> Result<Tensor<T>> {
    let (t0, e) = (pos.shape()[0], pos.shape()[1]);
    if t0 == target {
        return Ok(pos.clone());
    }
    let mut out = Tensor::zeros(&[target, e]);
    for j in 0..target {
        let x = if target == 1 {
            0.0
        } else {
            j as f64 * (t0 - 1) as f64 / (target - 1) as f64
        };
        let i0 = x.floor() as usize;
        let i1 = (i0 + 1).min(t0 - 1);
        let f = T::from_f64(x - i0 as f64);
        let g = T::ONE - f;
        for k in 0..e {
            let v = g * pos.at(&[i0, k]) + f * pos.at(&[i1, k]);
            out.set(&[j, k], v);
        }
    }
    Ok(out)
}

/// Reduces the channel axis of an inflated `[E,C,D,kh,kw]` kernel to
/// `[E,D,kh,kw]` (single-channel volumes replicate gray values over C, so
/// the mean preserves the response scale).
fn collapse_channels<T: Element>(k: &Tensor<T>) -> Tensor<T> {
    let s = k.shape();
    let (e, c, d, kh, kw) = (s[0], s[1], s[2], s[3], s[4]);
    let inv = T::from_f64(1.0 / c as f64);
    let mut out = Tensor::zeros(&[e, d, kh, kw]);
    let vol = d * kh * kw;
    for ei in 0..e {
        for p in 0..vol {
            let mut acc = T::ZERO;
            for ci in 0..c {
                acc += k.data()[(ei * c + ci) * vol + p];
            }
            out.data_mut()[ei * vol + p] = acc * inv;
        }
    }
    out
}

/// Builds the full parameter map of the 3D model from a 2D checkpoint.
///
/// Patch embedding follows the configured strategy, transformer blocks and
/// the final norm are copied verbatim, positional embeddings are resized to
/// the target token count, and the decoder head (which has no 2D
/// counterpart) is drawn from a ChaCha stream seeded by `cfg.seed`.
pub fn seed_model<T: Element>(
    ck: &Checkpoint2D<T>,
    cfg: &ModelConfig,
) -> Result<BTreeMap<String, Tensor<T>>> {
    cfg.validate().map_err(TransferError::Tensor)?;
    if ck.embed_dim != cfg.embed_dim || cfg.layers > ck.layers() {
        let mut tensors = Vec::new();
        if ck.embed_dim != cfg.embed_dim {
            tensors.extend(["patch.kernel".to_string(), "pos.embed".to_string()]);
            for i in 0..ck.layers() {
                tensors.push(format!("block{i}.*"));
            }
        }
        if cfg.layers > ck.layers() {
            for i in ck.layers()..cfg.layers {
                tensors.push(format!("block{i}.* (absent)"));
            }
        }
        return Err(TransferError::Incompatible {
            ck_dim: ck.embed_dim,
            cfg_dim: cfg.embed_dim,
            ck_layers: ck.layers(),
            cfg_layers: cfg.layers,
            tensors,
        });
    }

    let e = cfg.embed_dim;
    let depth = cfg.block_depth;
    let mut params = BTreeMap::new();

    match cfg.strategy {
        EmbedStrategy::Average => {
            let k3 = inflate_average(&ck.patch_kernel, depth)?;
            params.insert("embed.kernel".into(), collapse_channels(&k3));
        }
        EmbedStrategy::Center => {
            let k3 = inflate_center(&ck.patch_kernel, depth)?;
            params.insert("embed.kernel".into(), collapse_channels(&k3));
        }
        EmbedStrategy::Tubular => {
            for axis in [Axis::Z, Axis::Y, Axis::X] {
                let tk = flatten_tubular(&ck.patch_kernel, axis, ChannelReduction::Mean)?;
                params.insert(format!("embed.tube.{axis}"), tk.weights);
                // Offset predictor starts at zero so training begins from
                // straight tubes.
                params.insert(
                    format!("embed.offs.{axis}.w"),
                    Tensor::zeros(&[2 * (TUBE_LEN - 1), depth, PATCH, PATCH]),
                );
                params.insert(
                    format!("embed.offs.{axis}.b"),
                    Tensor::zeros(&[2 * (TUBE_LEN - 1)]),
                );
            }
            params.insert("fuse.ln.g".into(), Tensor::full(&[e], T::ONE));
            params.insert("fuse.ln.b".into(), Tensor::zeros(&[e]));
        }
    }

    params.insert(
        "pos.embed".into(),
        resize_pos_embed(&ck.pos_embed, cfg.token_count())?,
    );

    for (i, b) in ck.blocks.iter().take(cfg.layers).enumerate() {
        params.insert(format!("block{i}.attn.q"), b.attn_q.clone());
        params.insert(format!("block{i}.attn.k"), b.attn_k.clone());
        params.insert(format!("block{i}.attn.v"), b.attn_v.clone());
        params.insert(format!("block{i}.attn.o"), b.attn_o.clone());
        params.insert(format!("block{i}.mlp.fc1"), b.mlp_fc1.clone());
        params.insert(format!("block{i}.mlp.fc2"), b.mlp_fc2.clone());
        params.insert(format!("block{i}.ln1.g"), b.ln1_g.clone());
        params.insert(format!("block{i}.ln1.b"), b.ln1_b.clone());
        params.insert(format!("block{i}.ln2.g"), b.ln2_g.clone());
        params.insert(format!("block{i}.ln2.b"), b.ln2_b.clone());
    }
    params.insert("final_ln.g".into(), ck.final_ln_g.clone());
    params.insert("final_ln.b".into(), ck.final_ln_b.clone());

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut he_tensor = |shape: &[usize]| -> Tensor<T> {
        let fan_in: usize = shape[1..].iter().product();
        let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::from_f64(dist.sample(&mut rng))).collect();
        Tensor::new(shape.to_vec(), data).expect("shape matches data")
    };
    params.insert("head.conv1.w".into(), he_tensor(&[e, e, 3, 3]));
    params.insert("head.conv1.b".into(), Tensor::zeros(&[e]));
    params.insert("head.conv2.w".into(), he_tensor(&[e, e, 3, 3]));
    params.insert("head.conv2.b".into(), Tensor::zeros(&[e]));
    params.insert("head.out.w".into(), he_tensor(&[1, e, 1, 1]));
    // Output bias starts at the background prior so early updates do not
    // collapse the foreground probabilities.
    params.insert("head.out.b".into(), Tensor::full(&[1], T::from_f64(FG_PRIOR_LOGIT)));

    Ok(params)
}

/// Convenience wrapper: read a checkpoint archive from disk.
pub fn load_checkpoint<T: Element>(path: &std::path::Path) -> Result<Checkpoint2D<T>> {
    let ar = archive::load(path)?;
    Checkpoint2D::from_archive(&ar)
}
