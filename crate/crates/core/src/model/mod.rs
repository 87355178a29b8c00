//! The trainable pose refiner.
//!
//! Pipeline for one `(target, base crop)` pair: farthest point sampling of
//! both clouds, joint unit-cube normalization, a per-point linear lift,
//! a two-wide one-hot cloud tag, post-norm self-attention layers applied to
//! each cloud with shared weights, decoder layers in which target tokens
//! attend to base tokens, mean pooling over target tokens and a projection
//! back to `feature_dim`. The head concatenates a sinusoidal timestep
//! embedding and emits a translation and a 6D rotation.

pub mod checkpoint;
pub mod train;

use ndarray::array;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::diffusion::{Refiner, RefinerInput};
use crate::error::{Error, Result};
use crate::geometry::{RigidTransform, UnitQuaternion, Vec3};
use crate::pointcloud::{centroid_nearest_index, farthest_point_sample, normalize_unit_cube, NormalizationRecord, PointCloud};

pub const LAYER_NORM_EPS: f64 = 1e-5;
/// Clamp margin of the `acos` in the rotation loss.
pub const ACOS_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RotationParameterization {
    SixD,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub points_per_cloud: usize,
    pub feature_dim: usize,
    pub heads: usize,
    pub self_blocks: usize,
    pub cross_blocks: usize,
    pub decoder_hidden: Vec<usize>,
    pub rotation_parameterization: RotationParameterization,
    pub regression_mode: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            points_per_cloud: 128,
            feature_dim: 64,
            heads: 1,
            self_blocks: 2,
            cross_blocks: 2,
            decoder_hidden: vec![128, 64],
            rotation_parameterization: RotationParameterization::SixD,
            regression_mode: false,
        }
    }
}

impl ModelConfig {
    /// Full-scale layer sizes: 512 points per cloud, width 256.
    pub fn full_scale() -> Self {
        ModelConfig {
            points_per_cloud: 1024,
            feature_dim: 256,
            heads: 1,
            self_blocks: 4,
            cross_blocks: 4,
            ..ModelConfig::default()
        }
    }

    /// Width of a token: features plus the one-hot cloud tag.
    pub fn token_dim(&self) -> usize {
        self.feature_dim + 2
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("model.{m}")));
        if self.points_per_cloud == 0 || self.feature_dim == 0 || self.heads == 0 {
            return bad("points_per_cloud, feature_dim and heads must be at least 1".into());
        }
        if self.self_blocks == 0 || self.cross_blocks == 0 {
            return bad("self_blocks and cross_blocks must be at least 1".into());
        }
        if self.decoder_hidden.is_empty() || self.decoder_hidden.contains(&0) {
            return bad("decoder_hidden needs at least one non-zero width".into());
        }
        if self.feature_dim % self.heads != 0 || self.token_dim() % self.heads != 0 {
            return bad(format!(
                "heads ({}) must divide feature_dim ({}) and the token width ({})",
                self.heads,
                self.feature_dim,
                self.token_dim()
            ));
        }
        if self.feature_dim % 2 != 0 {
            return bad("feature_dim must be even for the sinusoidal embedding".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct LinearP {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct AttnP {
    q: LinearP,
    k: LinearP,
    v: LinearP,
    o: LinearP,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct NormP {
    gamma: usize,
    beta: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct EncoderP {
    attn: AttnP,
    norm1: NormP,
    ff1: LinearP,
    ff2: LinearP,
    norm2: NormP,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct DecoderP {
    self_attn: AttnP,
    norm1: NormP,
    cross_attn: AttnP,
    norm2: NormP,
    ff1: LinearP,
    ff2: LinearP,
    norm3: NormP,
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    lift: LinearP,
    encoder: Vec<EncoderP>,
    decoder: Vec<DecoderP>,
    pool: LinearP,
    head: Vec<LinearP>,
}

/// Named parameter tensors in creation order.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
}

impl Params {
    pub fn count(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Init {
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    FanIn(usize),
    /// Glorot uniform.
    Xavier,
    Zeros,
    Ones,
}

struct Builder<'a> {
    params: Params,
    rng: &'a mut ChaCha8Rng,
}

impl Builder<'_> {
    fn tensor(&mut self, name: String, shape: (usize, usize), init: Init) -> usize {
        let t = match init {
            Init::FanIn(fan_in) => {
                let a = 1.0 / (fan_in as f64).sqrt();
                Tensor::from_shape_simple_fn(shape, || self.rng.gen_range(-a..a))
            }
            Init::Xavier => {
                let a = (6.0 / (shape.0 + shape.1) as f64).sqrt();
                Tensor::from_shape_simple_fn(shape, || self.rng.gen_range(-a..a))
            }
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::ones(shape),
        };
        self.params.names.push(name);
        self.params.tensors.push(t);
        self.params.tensors.len() - 1
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> LinearP {
        LinearP {
            w: self.tensor(format!("{name}.weight"), (fan_in, fan_out), Init::FanIn(fan_in)),
            b: self.tensor(format!("{name}.bias"), (1, fan_out), Init::FanIn(fan_in)),
        }
    }

    fn zero_linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> LinearP {
        LinearP {
            w: self.tensor(format!("{name}.weight"), (fan_in, fan_out), Init::Zeros),
            b: self.tensor(format!("{name}.bias"), (1, fan_out), Init::Zeros),
        }
    }

    fn attention(&mut self, name: &str, d: usize) -> AttnP {
        let mut proj = |suffix: &str, init: Init| LinearP {
            w: self.tensor(format!("{name}.{suffix}.weight"), (d, d), init),
            b: self.tensor(format!("{name}.{suffix}.bias"), (1, d), Init::Zeros),
        };
        AttnP { q: proj("q", Init::Xavier), k: proj("k", Init::Xavier), v: proj("v", Init::Xavier), o: proj("o", Init::FanIn(d)) }
    }

    fn norm(&mut self, name: &str, d: usize) -> NormP {
        NormP {
            gamma: self.tensor(format!("{name}.gamma"), (1, d), Init::Ones),
            beta: self.tensor(format!("{name}.beta"), (1, d), Init::Zeros),
        }
    }
}

fn build_layout(config: &ModelConfig, rng: &mut ChaCha8Rng, zero_last: bool) -> (Layout, Params) {
    let f = config.feature_dim;
    let d = config.token_dim();
    let mut b = Builder { params: Params { names: Vec::new(), tensors: Vec::new() }, rng };
    let lift = b.linear("lift", 3, f);
    let encoder = (0..config.self_blocks)
        .map(|i| {
            let n = format!("encoder.{i}");
            EncoderP {
                attn: b.attention(&format!("{n}.attn"), d),
                norm1: b.norm(&format!("{n}.norm1"), d),
                ff1: b.linear(&format!("{n}.ff1"), d, f),
                ff2: b.linear(&format!("{n}.ff2"), f, d),
                norm2: b.norm(&format!("{n}.norm2"), d),
            }
        })
        .collect();
    let decoder = (0..config.cross_blocks)
        .map(|i| {
            let n = format!("decoder.{i}");
            DecoderP {
                self_attn: b.attention(&format!("{n}.self_attn"), d),
                norm1: b.norm(&format!("{n}.norm1"), d),
                cross_attn: b.attention(&format!("{n}.cross_attn"), d),
                norm2: b.norm(&format!("{n}.norm2"), d),
                ff1: b.linear(&format!("{n}.ff1"), d, f),
                ff2: b.linear(&format!("{n}.ff2"), f, d),
                norm3: b.norm(&format!("{n}.norm3"), d),
            }
        })
        .collect();
    let pool = b.linear("pool", d, f);
    let mut width = if config.regression_mode { f } else { 2 * f };
    let mut head = Vec::new();
    for (i, &h) in config.decoder_hidden.iter().enumerate() {
        head.push(b.linear(&format!("head.{i}"), width, h));
        width = h;
    }
    let out_name = format!("head.{}", config.decoder_hidden.len());
    head.push(if zero_last { b.zero_linear(&out_name, width, 9) } else { b.linear(&out_name, width, 9) });
    (Layout { lift, encoder, decoder, pool, head }, b.params)
}

/// Sinusoidal embedding of timestep `t` as a `1×dim` row: sines of the
/// geometric frequency ladder followed by the matching cosines.
pub fn timestep_embedding(t: usize, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut e = Tensor::zeros((1, dim));
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let a = t as f64 * freq;
        e[[0, i]] = a.sin();
        e[[0, half + i]] = a.cos();
    }
    e
}

/// Rotation with columns from Gram-Schmidt on two 3-vectors. Degenerate
/// inputs fall back to the identity axes.
pub fn gram_schmidt(a1: Vec3, a2: Vec3) -> UnitQuaternion {
    const EPS: f64 = 1e-12;
    let b1 = if a1.norm() > EPS { a1.normalized() } else { Vec3::X };
    let c = b1.cross(a2);
    let b3 = if c.norm() > EPS {
        c.normalized()
    } else {
        let fallback = b1.cross(Vec3::Y);
        if fallback.norm() > EPS { fallback.normalized() } else { Vec3::Z }
    };
    let b2 = b3.cross(b1);
    UnitQuaternion::from_matrix(&[[b1.x, b2.x, b3.x], [b1.y, b2.y, b3.y], [b1.z, b2.z, b3.z]])
}

/// One preprocessed `(target, base)` pair in the normalized frame.
#[derive(Debug, Clone, PartialEq)]
pub struct PairInput {
    pub target: Tensor,
    pub base: Tensor,
    pub record: NormalizationRecord,
}

fn fps(pc: &PointCloud, n: usize) -> Result<PointCloud> {
    let start = centroid_nearest_index(pc)?;
    Ok(pc.select(&farthest_point_sample(pc, n, start)?))
}

fn to_tensor(pc: &PointCloud, record: &NormalizationRecord) -> Tensor {
    let mut t = Tensor::zeros((pc.len(), 3));
    for (i, p) in pc.points.iter().enumerate() {
        let q = record.normalize(*p);
        t.row_mut(i).assign(&array![q.x, q.y, q.z]);
    }
    t
}

/// Normalization frame of one denoising run: joint unit cube of the
/// subsampled initial target and base crop.
pub fn sample_frame(initial: &PointCloud, base_crop: &PointCloud, n: usize) -> Result<NormalizationRecord> {
    let a = fps(initial, n)?;
    let b = fps(base_crop, n)?;
    Ok(normalize_unit_cube(&[&a, &b])?.1)
}

/// Subsamples both clouds to `n` points and maps them into `record`'s frame.
pub fn prepare_pair(current: &PointCloud, base_crop: &PointCloud, n: usize, record: NormalizationRecord) -> Result<PairInput> {
    Ok(PairInput { target: to_tensor(&fps(current, n)?, &record), base: to_tensor(&fps(base_crop, n)?, &record), record })
}

/// Raw head output decoded into a transform (normalized frame).
pub fn decode_output(out: &Tensor) -> RigidTransform {
    let o = |i: usize| out[[0, i]];
    let rotation = gram_schmidt(Vec3::new(o(3) + 1.0, o(4), o(5)), Vec3::new(o(6), o(7) + 1.0, o(8)));
    RigidTransform::new(rotation, Vec3::new(o(0), o(1), o(2)))
}

fn rt_tensor(q: &UnitQuaternion) -> Tensor {
    let m = q.to_matrix();
    Tensor::from_shape_fn((3, 3), |(i, j)| m[j][i])
}

/// Nodes of one forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    /// Parameter leaves in [`Params`] order.
    pub params: Vec<Var>,
    pub joint: Var,
    pub output: Var,
}

/// Loss nodes of one training sample.
#[derive(Debug, Clone, Copy)]
pub struct LossNodes {
    pub translation: Var,
    pub rotation: Var,
    pub chamfer: Var,
    pub total: Var,
}

/// Weights of the three loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub translation: f64,
    pub rotation: f64,
    pub chamfer: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { translation: 1.0, rotation: 1.0, chamfer: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseModel {
    pub config: ModelConfig,
    pub params: Params,
    layout: Layout,
}

impl PoseModel {
    /// Random initialization with a zeroed output layer, so a fresh model
    /// predicts the identity.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::with_init(config, seed, true)
    }

    /// Random initialization including the output layer.
    pub fn new_random_head(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::with_init(config, seed, false)
    }

    fn with_init(config: ModelConfig, seed: u64, zero_last: bool) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (layout, params) = build_layout(&config, &mut rng, zero_last);
        Ok(PoseModel { config, params, layout })
    }

    /// Rebuilds a model around stored tensors, checking names and shapes.
    pub fn from_params(config: ModelConfig, params: Params) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        if model.params.names != params.names {
            return Err(Error::Checkpoint("parameter names do not match the configuration".into()));
        }
        for (i, (a, b)) in model.params.tensors.iter().zip(&params.tensors).enumerate() {
            if a.dim() != b.dim() {
                return Err(Error::Checkpoint(format!(
                    "{}: shape {:?} does not match {:?}",
                    model.params.names[i],
                    b.dim(),
                    a.dim()
                )));
            }
        }
        model.params = params;
        Ok(model)
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    /// Builds the forward pass on `tape`. `timestep` is ignored in
    /// regression mode.
    pub fn forward(&self, tape: &mut Tape, input: &PairInput, timestep: usize) -> Result<Forward> {
        let n = self.config.points_per_cloud;
        for (name, t) in [("target", &input.target), ("base", &input.base)] {
            if t.nrows() != n {
                return Err(Error::InsufficientPoints { needed: n, available: t.nrows() });
            }
            if t.ncols() != 3 {
                return Err(Error::Invalid(format!("{name} cloud must have 3 columns")));
            }
        }
        let vars: Vec<Var> = self.params.tensors.iter().map(|t| tape.leaf(t.clone())).collect();
        let p = |i: usize| vars[i];
        let heads = self.config.heads;
        let l = &self.layout;
        let check = |tape: &Tape, v: Var, layer: &str| -> Result<Var> {
            if tape.value(v).iter().all(|x| x.is_finite()) {
                Ok(v)
            } else {
                Err(Error::NonFiniteActivation { layer: layer.to_string() })
            }
        };

        let mut tokens = Vec::new();
        for (cloud, tag) in [(&input.target, [1.0, 0.0]), (&input.base, [0.0, 1.0])] {
            let x = tape.leaf(cloud.clone());
            let h = linear(tape, x, l.lift, &p);
            let onehot = tape.leaf(Tensor::from_shape_fn((n, 2), |(_, j)| tag[j]));
            tokens.push(tape.concat_cols(&[h, onehot]));
        }
        let (mut tgt, mut base) = (tokens[0], tokens[1]);
        for (i, e) in l.encoder.iter().enumerate() {
            let v = encoder_layer(tape, tgt, e, heads, &p);
            tgt = check(tape, v, &format!("encoder.{i}"))?;
            let v = encoder_layer(tape, base, e, heads, &p);
            base = check(tape, v, &format!("encoder.{i}"))?;
        }
        for (i, dl) in l.decoder.iter().enumerate() {
            let v = decoder_layer(tape, tgt, base, dl, heads, &p);
            tgt = check(tape, v, &format!("decoder.{i}"))?;
        }
        let pooled = tape.mean_rows(tgt);
        let joint = linear(tape, pooled, l.pool, &p);
        let joint = check(tape, joint, "pool")?;
        let mut h = if self.config.regression_mode {
            joint
        } else {
            let emb = tape.leaf(timestep_embedding(timestep, self.config.feature_dim));
            tape.concat_cols(&[joint, emb])
        };
        let last = l.head.len() - 1;
        for (i, lp) in l.head.iter().enumerate() {
            h = linear(tape, h, *lp, &p);
            if i < last {
                h = tape.relu(h);
            }
            h = check(tape, h, &format!("head.{i}"))?;
        }
        Ok(Forward { params: vars, joint, output: h })
    }

    /// The joint feature of a pair (width `feature_dim`).
    pub fn encode_pair(&self, input: &PairInput) -> Result<Tensor> {
        let mut tape = Tape::new();
        let f = self.forward(&mut tape, input, 1)?;
        Ok(tape.value(f.joint).clone())
    }

    /// Predicted increment in the normalized frame.
    pub fn predict_normalized(&self, input: &PairInput, timestep: usize) -> Result<RigidTransform> {
        let mut tape = Tape::new();
        let f = self.forward(&mut tape, input, timestep)?;
        Ok(decode_output(tape.value(f.output)))
    }

    /// Predicted increment in the metric crop frame.
    pub fn refine_step(&self, input: &PairInput, timestep: usize) -> Result<RigidTransform> {
        let delta = input.record.motion_to_metric(&self.predict_normalized(input, timestep)?);
        if delta.is_finite() {
            Ok(delta)
        } else {
            Err(Error::NonFiniteActivation { layer: "output".into() })
        }
    }

    /// Appends the weighted training loss against the normalized target
    /// increment `gt`. The Chamfer term compares the target points moved
    /// by the prediction and by `gt`.
    pub fn loss(&self, tape: &mut Tape, input: &PairInput, fwd: &Forward, gt: &RigidTransform, weights: &LossWeights) -> LossNodes {
        let out = fwd.output;
        let t_pred = tape.slice_cols(out, 0, 3);
        let a1 = tape.slice_cols(out, 3, 6);
        let a2 = tape.slice_cols(out, 6, 9);
        let e1 = tape.leaf(array![[1.0, 0.0, 0.0]]);
        let e2 = tape.leaf(array![[0.0, 1.0, 0.0]]);
        let a1 = tape.add(a1, e1);
        let a2 = tape.add(a2, e2);
        let b1 = tape.normalize_rows(a1);
        let c = tape.cross_rows(b1, a2);
        let b3 = tape.normalize_rows(c);
        let b2 = tape.cross_rows(b3, b1);
        let rt_pred = tape.concat_rows(&[b1, b2, b3]);

        let rt_gt = rt_tensor(&gt.rotation);
        let t_gt = array![[gt.translation.x, gt.translation.y, gt.translation.z]];

        let t_gt_v = tape.leaf(t_gt.clone());
        let diff = tape.sub(t_pred, t_gt_v);
        let diff = tape.abs(diff);
        let translation = tape.sum_all(diff);

        let rt_gt_v = tape.leaf(rt_gt.clone());
        let prod = tape.mul(rt_pred, rt_gt_v);
        let trace = tape.sum_all(prod);
        let minus_one = tape.leaf(Tensor::from_elem((1, 1), -1.0));
        let cos = tape.add(trace, minus_one);
        let cos = tape.scale(cos, 0.5);
        let rotation = tape.acos_clamped(cos, ACOS_EPS);

        let pts = tape.leaf(input.target.clone());
        let moved = tape.matmul(pts, rt_pred);
        let moved = tape.add_row(moved, t_pred);
        let gt_cloud = input.target.dot(&rt_gt) + &t_gt;
        let chamfer = tape.chamfer(moved, &gt_cloud);

        let wt = tape.scale(translation, weights.translation);
        let wr = tape.scale(rotation, weights.rotation);
        let wc = tape.scale(chamfer, weights.chamfer);
        let s = tape.add(wt, wr);
        let total = tape.add(s, wc);
        LossNodes { translation, rotation, chamfer, total }
    }

    /// Preferred `(schedule_steps, total_steps)` override: regression mode
    /// runs a single shot.
    pub fn schedule_override(&self) -> Option<(usize, usize)> {
        self.config.regression_mode.then_some((1, 1))
    }
}

fn linear(tape: &mut Tape, x: Var, lp: LinearP, p: &impl Fn(usize) -> Var) -> Var {
    let y = tape.matmul(x, p(lp.w));
    tape.add_row(y, p(lp.b))
}

fn attention(tape: &mut Tape, queries: Var, memory: Var, ap: &AttnP, heads: usize, p: &impl Fn(usize) -> Var) -> Var {
    let q = linear(tape, queries, ap.q, p);
    let k = linear(tape, memory, ap.k, p);
    let v = linear(tape, memory, ap.v, p);
    let d = tape.value(q).ncols();
    let dh = d / heads;
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (tape.slice_cols(q, h * dh, (h + 1) * dh), tape.slice_cols(k, h * dh, (h + 1) * dh), tape.slice_cols(v, h * dh, (h + 1) * dh))
        };
        let scores = tape.matmul_nt(qh, kh);
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
        let a = tape.softmax_rows(scores);
        outs.push(tape.matmul(a, vh));
    }
    let o = if heads == 1 { outs[0] } else { tape.concat_cols(&outs) };
    linear(tape, o, ap.o, p)
}

fn feed_forward(tape: &mut Tape, x: Var, ff1: LinearP, ff2: LinearP, p: &impl Fn(usize) -> Var) -> Var {
    let h = linear(tape, x, ff1, p);
    let h = tape.relu(h);
    linear(tape, h, ff2, p)
}

fn add_norm(tape: &mut Tape, x: Var, y: Var, n: NormP, p: &impl Fn(usize) -> Var) -> Var {
    let s = tape.add(x, y);
    tape.layer_norm(s, p(n.gamma), p(n.beta), LAYER_NORM_EPS)
}

fn encoder_layer(tape: &mut Tape, x: Var, e: &EncoderP, heads: usize, p: &impl Fn(usize) -> Var) -> Var {
    let a = attention(tape, x, x, &e.attn, heads, p);
    let x = add_norm(tape, x, a, e.norm1, p);
    let f = feed_forward(tape, x, e.ff1, e.ff2, p);
    add_norm(tape, x, f, e.norm2, p)
}

fn decoder_layer(tape: &mut Tape, x: Var, memory: Var, d: &DecoderP, heads: usize, p: &impl Fn(usize) -> Var) -> Var {
    let a = attention(tape, x, x, &d.self_attn, heads, p);
    let x = add_norm(tape, x, a, d.norm1, p);
    let c = attention(tape, x, memory, &d.cross_attn, heads, p);
    let x = add_norm(tape, x, c, d.norm2, p);
    let f = feed_forward(tape, x, d.ff1, d.ff2, p);
    add_norm(tape, x, f, d.norm3, p)
}

/// Parameter counts of the attention core (lift, encoder and decoder
/// layers) and of the whole model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ParamCountReport {
    pub core: usize,
    pub pool: usize,
    pub head: usize,
    pub total: usize,
}

impl PoseModel {
    pub fn param_report(&self) -> ParamCountReport {
        let sum = |prefixes: &[&str]| -> usize {
            self.params
                .names
                .iter()
                .zip(&self.params.tensors)
                .filter(|(n, _)| prefixes.iter().any(|p| n.starts_with(p)))
                .map(|(_, t)| t.len())
                .sum()
        };
        let core = sum(&["lift.", "encoder.", "decoder."]);
        let pool = sum(&["pool."]);
        let head = sum(&["head."]);
        ParamCountReport { core, pool, head, total: self.param_count() }
    }
}

impl Refiner for PoseModel {
    fn refine(&self, input: &RefinerInput) -> Result<RigidTransform> {
        let n = self.config.points_per_cloud;
        let record = sample_frame(input.initial, input.base_crop, n)?;
        let pair = prepare_pair(input.current, input.base_crop, n, record)?;
        self.refine_step(&pair, input.timestep)
    }

    fn schedule_override(&self) -> Option<(usize, usize)> {
        PoseModel::schedule_override(self)
    }
}

/// Result of [`grad_check`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_relative_error: f64,
    pub checked: usize,
}

/// Compares tape gradients of the total loss with fourth-order central
/// differences on `samples` randomly chosen parameters. The wider stencil
/// keeps roundoff well below the relative-error floor for near-zero
/// gradients.
pub fn grad_check(
    model: &PoseModel,
    input: &PairInput,
    timestep: usize,
    gt: &RigidTransform,
    samples: usize,
    eps: f64,
    seed: u64,
) -> Result<GradCheck> {
    let weights = LossWeights::default();
    let eval = |m: &PoseModel| -> Result<f64> {
        let mut tape = Tape::new();
        let f = m.forward(&mut tape, input, timestep)?;
        let l = m.loss(&mut tape, input, &f, gt, &weights);
        Ok(tape.scalar(l.total))
    };
    let mut tape = Tape::new();
    let f = model.forward(&mut tape, input, timestep)?;
    let l = model.loss(&mut tape, input, &f, gt, &weights);
    let grads = tape.backward(l.total);
    let analytic: Vec<Tensor> = (0..model.params.tensors.len())
        .map(|i| grads.get_or_zeros(f.params[i], model.params.tensors[i].dim()))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total = model.param_count();
    let mut worst: f64 = 0.0;
    let mut probe = model.clone();
    for _ in 0..samples {
        let mut flat = rng.gen_range(0..total);
        let mut ti = 0;
        while flat >= model.params.tensors[ti].len() {
            flat -= model.params.tensors[ti].len();
            ti += 1;
        }
        let cols = model.params.tensors[ti].ncols();
        let (r, c) = (flat / cols, flat % cols);
        let orig = model.params.tensors[ti][[r, c]];
        let mut at = |h: f64| -> Result<f64> {
            probe.params.tensors[ti][[r, c]] = orig + h;
            eval(&probe)
        };
        let (p1, m1, p2, m2) = (at(eps)?, at(-eps)?, at(2.0 * eps)?, at(-2.0 * eps)?);
        probe.params.tensors[ti][[r, c]] = orig;
        let fd = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * eps);
        worst = worst.max(crate::autodiff::relative_error(analytic[ti][[r, c]], fd, 1e-6));
    }
    Ok(GradCheck { max_relative_error: worst, checked: samples })
}

/// Gradient of a single linear layer's squared-output loss checked over
/// all of its parameters.
pub fn grad_check_linear(fan_in: usize, fan_out: usize, rows: usize, eps: f64, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rand = |r: usize, c: usize| Tensor::from_shape_simple_fn((r, c), || rng.gen_range(-1.0..1.0));
    let x = rand(rows, fan_in);
    let w = rand(fan_in, fan_out);
    let b = rand(1, fan_out);
    let target = rand(rows, fan_out);
    let loss = |w: &Tensor, b: &Tensor| -> (Tape, Var, Var, Var) {
        let mut tape = Tape::new();
        let (xv, wv, bv) = (tape.leaf(x.clone()), tape.leaf(w.clone()), tape.leaf(b.clone()));
        let y = tape.matmul(xv, wv);
        let y = tape.add_row(y, bv);
        let t = tape.leaf(target.clone());
        let d = tape.sub(y, t);
        let sq = tape.mul(d, d);
        let out = tape.sum_all(sq);
        (tape, out, wv, bv)
    };
    let (tape, out, wv, bv) = loss(&w, &b);
    let g = tape.backward(out);
    let (gw, gb) = (g.get(wv).unwrap().clone(), g.get(bv).unwrap().clone());
    let mut worst: f64 = 0.0;
    for (is_w, analytic) in [(true, &gw), (false, &gb)] {
        for ((r, c), &a) in analytic.indexed_iter() {
            let (mut wp, mut bp) = (w.clone(), b.clone());
            let (mut wm, mut bm) = (w.clone(), b.clone());
            if is_w {
                wp[[r, c]] += eps;
                wm[[r, c]] -= eps;
            } else {
                bp[[r, c]] += eps;
                bm[[r, c]] -= eps;
            }
            let (tp, op, ..) = loss(&wp, &bp);
            let (tm, om, ..) = loss(&wm, &bm);
            let fd = (tp.scalar(op) - tm.scalar(om)) / (2.0 * eps);
            worst = worst.max(crate::autodiff::relative_error(a, fd, 1e-6));
        }
    }
    worst
}
