//! The 3D segmentation transformer: patch embedding (inflated-kernel or
//! deformable tubular), pre-norm encoder blocks, and a token-to-pixel
//! decoder head predicting the center slice of each 5-slice block.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::data::{Block, Volume};
use crate::tensor::archive::{self, ArchiveError};
use crate::tensor::graph::{Graph, Var};
use crate::tensor::{Element, Tensor, TensorError};
use crate::transfer::{seed_model, Checkpoint2D, TransferError, PATCH, TUBE_LEN};
use crate::tubular::{
    accumulate_tubes, anchor_grid, embed_view_var, fuse_views_var, predict_offsets, Axis,
};

/// Layer-norm epsilon used throughout the encoder.
pub const LN_EPS: f64 = 1e-6;
/// SGD momentum coefficient.
pub const MOMENTUM: f64 = 0.9;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Transfer(#[from] TransferError),
    #[error(transparent)]
    Archive(#[from] ArchiveError),
    #[error("block shape {found:?} does not match configured {expected:?}")]
    Geometry {
        found: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("soft label values must lie in [0, 1]")]
    LabelRange,
    #[error("training dataset is empty")]
    EmptyDataset,
    #[error("volume depth {depth} is below the block depth {min}")]
    DepthTooSmall { depth: usize, min: usize },
    #[error("volume in-plane extents ({h}, {w}) do not match configured block ({bh}, {bw})")]
    InPlaneMismatch {
        h: usize,
        w: usize,
        bh: usize,
        bw: usize,
    },
    #[error("parameter map missing {name:?}")]
    MissingParam { name: String },
    #[error("parameter map has unexpected entry {name:?}")]
    UnexpectedParam { name: String },
    #[error("parameter {name:?} has shape {found:?}, expected {expected:?}")]
    ParamShape {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("config: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// How the patch embedding is built.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbedStrategy {
    /// Inflated kernel, every depth slice = k2d / depth.
    Average,
    /// Inflated kernel, 2D kernel on the center depth slice only.
    Center,
    /// Three deformable tubular kernels fused across axis views.
    Tubular,
}

impl fmt::Display for EmbedStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EmbedStrategy::Average => write!(f, "average"),
            EmbedStrategy::Center => write!(f, "center"),
            EmbedStrategy::Tubular => write!(f, "tubular"),
        }
    }
}

impl FromStr for EmbedStrategy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "average" => Ok(EmbedStrategy::Average),
            "center" => Ok(EmbedStrategy::Center),
            "tubular" => Ok(EmbedStrategy::Tubular),
            other => Err(format!(
                "unknown strategy {other:?} (expected average, center, or tubular)"
            )),
        }
    }
}

/// Model geometry and seeding configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub block_depth: usize,
    pub block_h: usize,
    pub block_w: usize,
    pub strategy: EmbedStrategy,
    pub up1: usize,
    pub up2: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embed_dim: 16,
            layers: 2,
            heads: 2,
            block_depth: 5,
            block_h: 100,
            block_w: 100,
            strategy: EmbedStrategy::Center,
            up1: 4,
            up2: 4,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> std::result::Result<(), TensorError> {
        let fail = |message: String| TensorError::InvalidArgument {
            context: "model config",
            message,
        };
        if self.embed_dim == 0 || self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(fail(format!(
                "embed_dim {} must be a positive multiple of heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.block_depth % 2 == 0 || self.block_depth == 0 {
            return Err(fail(format!(
                "block depth {} must be odd",
                self.block_depth
            )));
        }
        if self.layers == 0 {
            return Err(fail("need at least one encoder layer".into()));
        }
        if self.block_h == 0 || self.block_w == 0 {
            return Err(fail("block extents must be positive".into()));
        }
        if self.up1 * self.up2 != PATCH {
            return Err(fail(format!(
                "head upsampling {}×{} must multiply to the patch extent {PATCH}",
                self.up1, self.up2
            )));
        }
        Ok(())
    }

    /// In-plane extents padded up to a multiple of the patch size.
    pub fn padded_hw(&self) -> (usize, usize) {
        (
            self.block_h.div_ceil(PATCH) * PATCH,
            self.block_w.div_ceil(PATCH) * PATCH,
        )
    }

    pub fn token_grid(&self) -> (usize, usize) {
        let (hp, wp) = self.padded_hw();
        (hp / PATCH, wp / PATCH)
    }

    pub fn token_count(&self) -> usize {
        let (gh, gw) = self.token_grid();
        gh * gw
    }

    /// Flat `key=value` encoding, one entry per line.
    pub fn to_kv(&self) -> String {
        format!(
            "embed_dim={}\nlayers={}\nheads={}\nblock_depth={}\nblock_h={}\nblock_w={}\n\
             strategy={}\nup1={}\nup2={}\nseed={}\n",
            self.embed_dim,
            self.layers,
            self.heads,
            self.block_depth,
            self.block_h,
            self.block_w,
            self.strategy,
            self.up1,
            self.up2,
            self.seed
        )
    }

    /// Applies `key=value` lines on top of `self`. Unknown keys error.
    pub fn apply_kv(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                ModelError::Config(format!("line {}: expected key=value", lineno + 1))
            })?;
            let bad = |e: String| ModelError::Config(format!("line {}: {e}", lineno + 1));
            let parse_usize =
                |v: &str| v.parse::<usize>().map_err(|e| bad(format!("{key}: {e}")));
            match key.trim() {
                "embed_dim" => self.embed_dim = parse_usize(value.trim())?,
                "layers" => self.layers = parse_usize(value.trim())?,
                "heads" => self.heads = parse_usize(value.trim())?,
                "block_depth" => self.block_depth = parse_usize(value.trim())?,
                "block_h" => self.block_h = parse_usize(value.trim())?,
                "block_w" => self.block_w = parse_usize(value.trim())?,
                "up1" => self.up1 = parse_usize(value.trim())?,
                "up2" => self.up2 = parse_usize(value.trim())?,
                "strategy" => self.strategy = value.trim().parse().map_err(bad)?,
                "seed" => {
                    self.seed = value
                        .trim()
                        .parse::<u64>()
                        .map_err(|e| bad(format!("seed: {e}")))?
                }
                other => return Err(bad(format!("unknown key {other:?}"))),
            }
        }
        Ok(())
    }
}

/// Parameter map plus config; the whole trainable state of the model.
#[derive(Debug, Clone)]
pub struct SegModel<T: Element> {
    pub cfg: ModelConfig,
    pub params: BTreeMap<String, Tensor<T>>,
    /// Names excluded from optimizer updates.
    pub frozen: BTreeSet<String>,
}

impl<T: Element> SegModel<T> {
    /// Seeds the model from a 2D checkpoint using the configured strategy.
    pub fn from_checkpoint(ck: &Checkpoint2D<T>, cfg: ModelConfig) -> Result<Self> {
        let params = seed_model(ck, &cfg)?;
        Ok(SegModel {
            cfg,
            params,
            frozen: BTreeSet::new(),
        })
    }

    /// Fully random initialization (no transfer) from the config seed.
    pub fn init_random(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let e = cfg.embed_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let dist = Normal::new(0.0, 0.02).unwrap();
        let mut rand_tensor = |shape: &[usize]| -> Tensor<T> {
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| T::from_f64(dist.sample(&mut rng))).collect();
            Tensor::new(shape.to_vec(), data).expect("shape matches data")
        };

        let mut params = BTreeMap::new();
        match cfg.strategy {
            EmbedStrategy::Average | EmbedStrategy::Center => {
                params.insert(
                    "embed.kernel".into(),
                    rand_tensor(&[e, cfg.block_depth, PATCH, PATCH]),
                );
            }
            EmbedStrategy::Tubular => {
                for axis in Axis::ALL {
                    params.insert(format!("embed.tube.{axis}"), rand_tensor(&[e, TUBE_LEN]));
                    params.insert(
                        format!("embed.offs.{axis}.w"),
                        Tensor::zeros(&[2 * (TUBE_LEN - 1), cfg.block_depth, PATCH, PATCH]),
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
        params.insert("pos.embed".into(), rand_tensor(&[cfg.token_count(), e]));
        for i in 0..cfg.layers {
            params.insert(format!("block{i}.attn.q"), rand_tensor(&[e, e]));
            params.insert(format!("block{i}.attn.k"), rand_tensor(&[e, e]));
            params.insert(format!("block{i}.attn.v"), rand_tensor(&[e, e]));
            params.insert(format!("block{i}.attn.o"), rand_tensor(&[e, e]));
            params.insert(format!("block{i}.mlp.fc1"), rand_tensor(&[4 * e, e]));
            params.insert(format!("block{i}.mlp.fc2"), rand_tensor(&[e, 4 * e]));
            params.insert(format!("block{i}.ln1.g"), Tensor::full(&[e], T::ONE));
            params.insert(format!("block{i}.ln1.b"), Tensor::zeros(&[e]));
            params.insert(format!("block{i}.ln2.g"), Tensor::full(&[e], T::ONE));
            params.insert(format!("block{i}.ln2.b"), Tensor::zeros(&[e]));
        }
        params.insert("final_ln.g".into(), Tensor::full(&[e], T::ONE));
        params.insert("final_ln.b".into(), Tensor::zeros(&[e]));
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
        params.insert(
            "head.out.b".into(),
            Tensor::full(&[1], T::from_f64(crate::transfer::FG_PRIOR_LOGIT)),
        );

        Ok(SegModel {
            cfg,
            params,
            frozen: BTreeSet::new(),
        })
    }

    /// Expected parameter names and shapes for a config.
    pub fn expected_params(cfg: &ModelConfig) -> BTreeMap<String, Vec<usize>> {
        let e = cfg.embed_dim;
        let mut m = BTreeMap::new();
        match cfg.strategy {
            EmbedStrategy::Average | EmbedStrategy::Center => {
                m.insert(
                    "embed.kernel".into(),
                    vec![e, cfg.block_depth, PATCH, PATCH],
                );
            }
            EmbedStrategy::Tubular => {
                for axis in Axis::ALL {
                    m.insert(format!("embed.tube.{axis}"), vec![e, TUBE_LEN]);
                    m.insert(
                        format!("embed.offs.{axis}.w"),
                        vec![2 * (TUBE_LEN - 1), cfg.block_depth, PATCH, PATCH],
                    );
                    m.insert(format!("embed.offs.{axis}.b"), vec![2 * (TUBE_LEN - 1)]);
                }
                m.insert("fuse.ln.g".into(), vec![e]);
                m.insert("fuse.ln.b".into(), vec![e]);
            }
        }
        m.insert("pos.embed".into(), vec![cfg.token_count(), e]);
        for i in 0..cfg.layers {
            m.insert(format!("block{i}.attn.q"), vec![e, e]);
            m.insert(format!("block{i}.attn.k"), vec![e, e]);
            m.insert(format!("block{i}.attn.v"), vec![e, e]);
            m.insert(format!("block{i}.attn.o"), vec![e, e]);
            m.insert(format!("block{i}.mlp.fc1"), vec![4 * e, e]);
            m.insert(format!("block{i}.mlp.fc2"), vec![e, 4 * e]);
            m.insert(format!("block{i}.ln1.g"), vec![e]);
            m.insert(format!("block{i}.ln1.b"), vec![e]);
            m.insert(format!("block{i}.ln2.g"), vec![e]);
            m.insert(format!("block{i}.ln2.b"), vec![e]);
        }
        m.insert("final_ln.g".into(), vec![e]);
        m.insert("final_ln.b".into(), vec![e]);
        m.insert("head.conv1.w".into(), vec![e, e, 3, 3]);
        m.insert("head.conv1.b".into(), vec![e]);
        m.insert("head.conv2.w".into(), vec![e, e, 3, 3]);
        m.insert("head.conv2.b".into(), vec![e]);
        m.insert("head.out.w".into(), vec![1, e, 1, 1]);
        m.insert("head.out.b".into(), vec![1]);
        m
    }

    /// Builds a model from an existing parameter map, validating that every
    /// expected name resolves to exactly one tensor of the right shape.
    pub fn from_params(cfg: ModelConfig, params: BTreeMap<String, Tensor<T>>) -> Result<Self> {
        cfg.validate()?;
        let expected = Self::expected_params(&cfg);
        for (name, shape) in &expected {
            match params.get(name) {
                None => {
                    return Err(ModelError::MissingParam { name: name.clone() });
                }
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(ModelError::ParamShape {
                        name: name.clone(),
                        found: t.shape().to_vec(),
                        expected: shape.clone(),
                    });
                }
                _ => {}
            }
        }
        for name in params.keys() {
            if !expected.contains_key(name) {
                return Err(ModelError::UnexpectedParam { name: name.clone() });
            }
        }
        Ok(SegModel {
            cfg,
            params,
            frozen: BTreeSet::new(),
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        archive::save_typed(path, &self.params)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path, cfg: ModelConfig) -> Result<Self> {
        let params = archive::load_typed(path)?;
        Self::from_params(cfg, params)
    }

    /// Marks transformer blocks (and optionally the embedding) frozen.
    pub fn freeze_blocks(&mut self, include_embedding: bool) {
        let names: Vec<String> = self
            .params
            .keys()
            .filter(|k| {
                k.starts_with("block")
                    || k.starts_with("final_ln")
                    || (include_embedding && (k.starts_with("embed.") || *k == "pos.embed"))
            })
            .cloned()
            .collect();
        self.frozen.extend(names);
    }

    fn param_vars(&self, g: &mut Graph<T>, train: bool) -> BTreeMap<String, Var> {
        self.params
            .iter()
            .map(|(k, v)| {
                let rg = train && !self.frozen.contains(k);
                (k.clone(), g.leaf(v.clone(), rg))
            })
            .collect()
    }

    /// Full forward pass on an existing graph; returns the center-slice
    /// logits `[H, W]`.
    pub fn forward_on(
        &self,
        g: &mut Graph<T>,
        vars: &BTreeMap<String, Var>,
        block: Var,
    ) -> Result<Var> {
        let cfg = &self.cfg;
        let expected = vec![cfg.block_depth, cfg.block_h, cfg.block_w];
        if g.value(block).shape() != expected.as_slice() {
            return Err(ModelError::Geometry {
                found: g.value(block).shape().to_vec(),
                expected,
            });
        }
        let v = |name: &str| -> Result<Var> {
            vars.get(name)
                .copied()
                .ok_or_else(|| ModelError::MissingParam { name: name.into() })
        };
        let (hp, wp) = cfg.padded_hw();
        let padded = g.pad_replicate_hw(block, hp, wp)?;
        let (gh, gw) = cfg.token_grid();

        let tokens = match cfg.strategy {
            EmbedStrategy::Average | EmbedStrategy::Center => {
                g.patch_conv3(padded, v("embed.kernel")?, PATCH, PATCH)?
            }
            EmbedStrategy::Tubular => {
                let anchors = anchor_grid(cfg.block_depth, hp, wp);
                let mut toks = Vec::with_capacity(3);
                for axis in Axis::ALL {
                    let w_off = v(&format!("embed.offs.{axis}.w"))?;
                    let b_off = v(&format!("embed.offs.{axis}.b"))?;
                    let offsets = predict_offsets(g, padded, w_off, b_off)?;
                    let coords = accumulate_tubes(g, offsets, &anchors, axis)?;
                    let weights = v(&format!("embed.tube.{axis}"))?;
                    toks.push(embed_view_var(g, padded, weights, coords, anchors.len())?);
                }
                fuse_views_var(
                    g,
                    toks[0],
                    toks[1],
                    toks[2],
                    v("fuse.ln.g")?,
                    v("fuse.ln.b")?,
                    LN_EPS,
                )?
            }
        };

        let mut x = g.add(tokens, v("pos.embed")?)?;
        for i in 0..cfg.layers {
            let name = |s: &str| format!("block{i}.{s}");
            let n1 = g.layernorm(x, v(&name("ln1.g"))?, v(&name("ln1.b"))?, LN_EPS)?;
            let attn = attention(
                g,
                n1,
                v(&name("attn.q"))?,
                v(&name("attn.k"))?,
                v(&name("attn.v"))?,
                v(&name("attn.o"))?,
                cfg.heads,
            )?;
            x = g.add(x, attn)?;
            let n2 = g.layernorm(x, v(&name("ln2.g"))?, v(&name("ln2.b"))?, LN_EPS)?;
            let h1 = g.matmul_nt(n2, v(&name("mlp.fc1"))?)?;
            let h2 = g.gelu(h1);
            let h3 = g.matmul_nt(h2, v(&name("mlp.fc2"))?)?;
            x = g.add(x, h3)?;
        }
        x = g.layernorm(x, v("final_ln.g")?, v("final_ln.b")?, LN_EPS)?;

        let grid = g.tokens_to_grid(x, gh, gw)?;
        let u1 = g.upsample2(grid, cfg.up1)?;
        let c1 = g.conv2d_same(u1, v("head.conv1.w")?, v("head.conv1.b")?)?;
        let a1 = g.gelu(c1);
        let u2 = g.upsample2(a1, cfg.up2)?;
        let c2 = g.conv2d_same(u2, v("head.conv2.w")?, v("head.conv2.b")?)?;
        let a2 = g.gelu(c2);
        let out = g.conv2d_same(a2, v("head.out.w")?, v("head.out.b")?)?;
        let cropped = g.crop_hw(out, cfg.block_h, cfg.block_w)?;
        Ok(g.reshape(cropped, &[cfg.block_h, cfg.block_w])?)
    }

    /// Inference forward: per-pixel foreground logits for the center slice.
    pub fn forward(&self, block: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let vars = self.param_vars(&mut g, false);
        let b = g.constant(block.clone());
        let logits = self.forward_on(&mut g, &vars, b)?;
        Ok(g.value(logits).clone())
    }

    /// Momentum-SGD training over randomly drawn blocks. Returns the
    /// per-step loss trace; a fixed seed fixes the trace.
    pub fn train(
        &mut self,
        dataset: &[Block],
        steps: usize,
        lr: f64,
        seed: u64,
    ) -> Result<Vec<f64>> {
        self.train_batched(dataset, steps, lr, 1, seed)
    }

    /// [`SegModel::train`] with `batch` blocks averaged per optimizer step.
    pub fn train_batched(
        &mut self,
        dataset: &[Block],
        steps: usize,
        lr: f64,
        batch: usize,
        seed: u64,
    ) -> Result<Vec<f64>> {
        if dataset.is_empty() {
            return Err(ModelError::EmptyDataset);
        }
        if batch == 0 {
            return Err(ModelError::Config("batch size must be >= 1".into()));
        }
        let mut velocity: BTreeMap<String, Tensor<T>> = self
            .params
            .iter()
            .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut trace = Vec::with_capacity(steps);
        let momentum = T::from_f64(MOMENTUM);
        let step_scale = T::from_f64(lr / batch as f64);
        for _ in 0..steps {
            let mut grads: BTreeMap<String, Tensor<T>> = BTreeMap::new();
            let mut loss_acc = 0.0;
            for _ in 0..batch {
                let block = &dataset[rng.random_range(0..dataset.len())];
                let mut g = Graph::new();
                let vars = self.param_vars(&mut g, true);
                let input = g.constant(block.data.cast::<T>());
                let logits = self.forward_on(&mut g, &vars, input)?;
                let label = block.soft_label.cast::<T>();
                let loss = seg_loss(&mut g, logits, &label)?;
                g.backward(loss.total)?;
                loss_acc += g.value(loss.total).item()?.to_f64();
                for (name, var) in &vars {
                    if self.frozen.contains(name) {
                        continue;
                    }
                    let Some(grad) = g.grad(*var) else { continue };
                    match grads.get_mut(name) {
                        Some(acc) => {
                            for (a, &gv) in acc.data_mut().iter_mut().zip(grad.data()) {
                                *a += gv;
                            }
                        }
                        None => {
                            grads.insert(name.clone(), grad.clone());
                        }
                    }
                }
            }
            trace.push(loss_acc / batch as f64);
            for (name, grad) in &grads {
                let vel = velocity.get_mut(name).expect("velocity mirrors params");
                let par = self.params.get_mut(name).expect("grad name from params");
                for ((vi, &gi), pi) in vel
                    .data_mut()
                    .iter_mut()
                    .zip(grad.data())
                    .zip(par.data_mut().iter_mut())
                {
                    *vi = momentum * *vi + gi;
                    *pi = *pi - step_scale * *vi;
                }
            }
        }
        Ok(trace)
    }

    /// Sliding depth-window inference: every slice is predicted as the
    /// center of its (edge-clamped) 5-slice window; outputs are sigmoid
    /// probabilities with the input's shape.
    pub fn segment_volume(&self, vol: &Volume) -> Result<Volume> {
        let (d, h, w) = vol.shape;
        let bd = self.cfg.block_depth;
        if d < bd {
            return Err(ModelError::DepthTooSmall { depth: d, min: bd });
        }
        if h != self.cfg.block_h || w != self.cfg.block_w {
            return Err(ModelError::InPlaneMismatch {
                h,
                w,
                bh: self.cfg.block_h,
                bw: self.cfg.block_w,
            });
        }
        let half = bd / 2;
        let mut out = Volume::zeros(vol.shape);
        for s in 0..d {
            let mut data: Vec<T> = Vec::with_capacity(bd * h * w);
            for k in 0..bd {
                let z = (s as isize + k as isize - half as isize).clamp(0, d as isize - 1) as usize;
                data.extend(
                    vol.voxels[z * h * w..(z + 1) * h * w]
                        .iter()
                        .map(|&v| T::from_f64(v as f64)),
                );
            }
            let block = Tensor::new(vec![bd, h, w], data)?;
            let logits = self.forward(&block)?;
            for (i, &z) in logits.data().iter().enumerate() {
                out.voxels[s * h * w + i] =
                    crate::tensor::ops::sigmoid_scalar(z).to_f64() as f32;
            }
        }
        Ok(out)
    }
}

/// Multi-head self-attention over `[A, E]` tokens (bias-free projections).
fn attention<T: Element>(
    g: &mut Graph<T>,
    x: Var,
    wq: Var,
    wk: Var,
    wv: Var,
    wo: Var,
    heads: usize,
) -> Result<Var> {
    let e = g.value(x).shape()[1];
    let dh = e / heads;
    let q = g.matmul_nt(x, wq)?;
    let k = g.matmul_nt(x, wk)?;
    let v = g.matmul_nt(x, wv)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(q, h * dh, dh)?;
        let kh = g.slice_cols(k, h * dh, dh)?;
        let vh = g.slice_cols(v, h * dh, dh)?;
        let scores = g.matmul_nt(qh, kh)?;
        let scaled = g.scale(scores, scale);
        let attn = g.softmax(scaled)?;
        outs.push(g.matmul(attn, vh)?);
    }
    let cat = g.concat_cols(&outs)?;
    Ok(g.matmul_nt(cat, wo)?)
}

/// The loss components of one prediction.
pub struct LossVars {
    pub total: Var,
    pub bce: Var,
    pub dice: Var,
}

/// 0.5·BCE(sigmoid(logits), label ≥ 0.5) + 0.5·(1 − soft Dice).
/// BCE uses the softplus form for stability; soft Dice smooths with +1.
pub fn seg_loss<T: Element>(
    g: &mut Graph<T>,
    logits: Var,
    soft_label: &Tensor<T>,
) -> Result<LossVars> {
    if g.value(logits).shape() != soft_label.shape() {
        return Err(ModelError::Geometry {
            found: g.value(logits).shape().to_vec(),
            expected: soft_label.shape().to_vec(),
        });
    }
    if soft_label
        .data()
        .iter()
        .any(|&v| v < T::ZERO || v > T::ONE)
    {
        return Err(ModelError::LabelRange);
    }
    let half = T::from_f64(0.5);
    let bin = soft_label.map(|v| if v >= half { T::ONE } else { T::ZERO });
    let mut bsum = T::ZERO;
    for &v in bin.data() {
        bsum += v;
    }
    let binv = g.constant(bin);

    let sp = g.softplus(logits);
    let zb = g.mul(logits, binv)?;
    let bce_el = g.sub(sp, zb)?;
    let bce = g.mean(bce_el)?;

    let p = g.sigmoid(logits);
    let pb = g.mul(p, binv)?;
    let inter = g.sum(pb);
    let num0 = g.scale(inter, 2.0);
    let num = g.add_scalar(num0, 1.0);
    let psum = g.sum(p);
    let den = g.add_scalar(psum, bsum.to_f64() + 1.0);
    let ratio = g.div(num, den)?;
    let neg = g.neg(ratio);
    let dice = g.add_scalar(neg, 1.0);

    let b_half = g.scale(bce, 0.5);
    let d_half = g.scale(dice, 0.5);
    let total = g.add(b_half, d_half)?;
    Ok(LossVars { total, bce, dice })
}
