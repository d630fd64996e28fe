//! Small spatiotemporal transformer denoiser.
//!
//! Each agent's trajectory is cut into temporal patches of `P` steps. A
//! token carries the noisy values, the masked context, the mask itself,
//! validity and the per-step noise level. Blocks alternate attention along
//! time (within an agent), across agents (within a time patch) and into a
//! handful of pooled roadgraph tokens, each sublayer modulated by the noise
//! embedding of its time patch (scale, shift and a zero-initialized gate).

use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{ConditioningContext, Denoiser, NfeCounter, PolylineKind, RoadContext};
use crate::diffusion::NoiseVector;
use crate::error::{invalid, Result};
use crate::scene::{InpaintingSpec, SceneTensor, ValidityMask};

pub mod tape;
pub mod train;

use tape::{AttentionLayout, Mat, Tape, Var};
pub use train::{OptimizerKind, TrainConfig, Trainer, TrainingExample, StepReport};

const CHECKPOINT_VERSION: u32 = 1;
const SEGMENT_FEATURES: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SizePreset {
    S,
    M,
    L,
}

impl SizePreset {
    /// `(token dim, layers, heads)` at full width.
    pub fn dims(self) -> (usize, usize, usize) {
        match self {
            SizePreset::S => (128, 2, 2),
            SizePreset::M => (256, 4, 4),
            SizePreset::L => (512, 8, 8),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub agents: usize,
    pub history: usize,
    pub future: usize,
    pub features: usize,
    /// Temporal patch size, one of 1, 2, 4, 8.
    pub patch: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Upper bound on pooled roadgraph tokens.
    pub context_tokens: usize,
}

impl NetworkConfig {
    /// Preset dimensions scaled by `width_factor` (token dim rounded to a
    /// multiple of the head count, at least 4 per head).
    pub fn from_preset(
        preset: SizePreset,
        width_factor: f64,
        agents: usize,
        history: usize,
        future: usize,
        features: usize,
        patch: usize,
    ) -> Result<Self> {
        if !(width_factor > 0.0 && width_factor <= 1.0) {
            return invalid(format!("width factor {width_factor} outside (0, 1]"));
        }
        let (dim, layers, heads) = preset.dims();
        let scaled = ((dim as f64 * width_factor) / heads as f64).round().max(4.0) as usize * heads;
        let cfg = Self {
            agents,
            history,
            future,
            features,
            patch,
            dim: scaled,
            layers,
            heads,
            mlp_ratio: 2,
            context_tokens: 16,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if ![1, 2, 4, 8].contains(&self.patch) {
            return invalid(format!("patch size {} not in {{1, 2, 4, 8}}", self.patch));
        }
        if self.agents == 0 || self.features == 0 || self.history + self.future == 0 {
            return invalid("network shape must be nonempty");
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return invalid("heads must divide the token dimension");
        }
        if self.dim % 2 != 0 {
            return invalid("token dimension must be even");
        }
        if self.layers == 0 || self.mlp_ratio == 0 || self.context_tokens == 0 {
            return invalid("layers, mlp ratio and context tokens must be positive");
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        self.history + self.future
    }

    /// Number of temporal patches (steps padded up to a multiple of `P`).
    pub fn patches(&self) -> usize {
        self.steps().div_ceil(self.patch)
    }

    fn step_width(&self) -> usize {
        3 * self.features + 2
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BlockParams {
    ada_w: usize,
    ada_b: usize,
    // time, agent and road attention: q, k, v, o, o-bias each
    attn: [[usize; 5]; 3],
    mlp1_w: usize,
    mlp1_b: usize,
    mlp2_w: usize,
    mlp2_b: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ParamLayout {
    in_w: usize,
    in_b: usize,
    temb1_w: usize,
    temb1_b: usize,
    temb2_w: usize,
    temb2_b: usize,
    road1_w: usize,
    road1_b: usize,
    road2_w: usize,
    road2_b: usize,
    blocks: Vec<BlockParams>,
    final_ada_w: usize,
    final_ada_b: usize,
    out_w: usize,
    out_b: usize,
}

struct ParamBuilder<'a, R: Rng> {
    names: Vec<String>,
    mats: Vec<Mat>,
    rng: &'a mut R,
}

impl<R: Rng> ParamBuilder<'_, R> {
    fn dense(&mut self, name: &str, rows: usize, cols: usize) -> usize {
        let std = 1.0 / (rows as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| std * self.rng.sample::<f64, _>(StandardNormal))
            .collect();
        self.push(name, Mat::from_vec(rows, cols, data))
    }

    fn zeros(&mut self, name: &str, rows: usize, cols: usize) -> usize {
        self.push(name, Mat::zeros(rows, cols))
    }

    fn push(&mut self, name: &str, m: Mat) -> usize {
        self.names.push(name.to_string());
        self.mats.push(m);
        self.mats.len() - 1
    }
}

/// Trainable v-prediction network.
#[derive(Debug)]
pub struct TrainableDenoiser {
    config: NetworkConfig,
    layout: ParamLayout,
    names: Vec<String>,
    params: Vec<Mat>,
    counter: NfeCounter,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    config: NetworkConfig,
    params: Vec<NamedParam>,
}

#[derive(Serialize, Deserialize)]
struct NamedParam {
    name: String,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

/// Dense per-token inputs for one forward pass.
struct PackedInputs {
    tokens: Mat,
    /// Sinusoidal embedding of the mean noise level per patch.
    noise: Mat,
    token_valid: Vec<bool>,
    segments: Mat,
    segment_groups: Vec<Vec<usize>>,
}

impl TrainableDenoiser {
    /// Fresh parameters: dense weights ~ N(0, 1/fan_in), biases zero, and
    /// zero modulation and output heads so the initial prediction is 0.
    pub fn new<R: Rng>(config: NetworkConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let mut b = ParamBuilder {
            names: Vec::new(),
            mats: Vec::new(),
            rng,
        };
        let in_w = b.dense("embed.w", config.patch * config.step_width(), d);
        let in_b = b.zeros("embed.b", 1, d);
        let temb1_w = b.dense("noise.fc1.w", d, d);
        let temb1_b = b.zeros("noise.fc1.b", 1, d);
        let temb2_w = b.dense("noise.fc2.w", d, d);
        let temb2_b = b.zeros("noise.fc2.b", 1, d);
        let road1_w = b.dense("road.fc1.w", SEGMENT_FEATURES, d);
        let road1_b = b.zeros("road.fc1.b", 1, d);
        let road2_w = b.dense("road.fc2.w", d, d);
        let road2_b = b.zeros("road.fc2.b", 1, d);
        let mut blocks = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let p = format!("block{l}");
            let ada_w = b.zeros(&format!("{p}.ada.w"), d, 12 * d);
            let ada_b = b.zeros(&format!("{p}.ada.b"), 1, 12 * d);
            let mut attn = [[0; 5]; 3];
            for (k, kind) in ["time", "agent", "road"].iter().enumerate() {
                attn[k] = [
                    b.dense(&format!("{p}.{kind}.q"), d, d),
                    b.dense(&format!("{p}.{kind}.k"), d, d),
                    b.dense(&format!("{p}.{kind}.v"), d, d),
                    b.dense(&format!("{p}.{kind}.o"), d, d),
                    b.zeros(&format!("{p}.{kind}.o.b"), 1, d),
                ];
            }
            let hidden = config.mlp_ratio * d;
            blocks.push(BlockParams {
                ada_w,
                ada_b,
                attn,
                mlp1_w: b.dense(&format!("{p}.mlp.fc1.w"), d, hidden),
                mlp1_b: b.zeros(&format!("{p}.mlp.fc1.b"), 1, hidden),
                mlp2_w: b.dense(&format!("{p}.mlp.fc2.w"), hidden, d),
                mlp2_b: b.zeros(&format!("{p}.mlp.fc2.b"), 1, d),
            });
        }
        let final_ada_w = b.zeros("final.ada.w", d, 2 * d);
        let final_ada_b = b.zeros("final.ada.b", 1, 2 * d);
        let out_w = b.zeros("final.out.w", d, config.patch * config.features);
        let out_b = b.zeros("final.out.b", 1, config.patch * config.features);
        let layout = ParamLayout {
            in_w,
            in_b,
            temb1_w,
            temb1_b,
            temb2_w,
            temb2_b,
            road1_w,
            road1_b,
            road2_w,
            road2_b,
            blocks,
            final_ada_w,
            final_ada_b,
            out_w,
            out_b,
        };
        Ok(Self {
            config,
            layout,
            names: b.names,
            params: b.mats,
            counter: NfeCounter::default(),
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn parameters(&self) -> &[Mat] {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> &mut [Mat] {
        &mut self.params
    }

    pub fn parameter_names(&self) -> &[String] {
        &self.names
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|m| m.data.len()).sum()
    }

    /// Adds `N(0, scale^2)` noise to every parameter. Useful to leave the
    /// zero-initialized state, e.g. for gradient checks.
    pub fn perturb_parameters<R: Rng>(&mut self, scale: f64, rng: &mut R) {
        for m in &mut self.params {
            for v in &mut m.data {
                *v += scale * rng.sample::<f64, _>(StandardNormal);
            }
        }
    }

    fn check_inputs(&self, z: &SceneTensor, t: &NoiseVector, ctx: &ConditioningContext) -> Result<()> {
        let c = &self.config;
        if z.agents() != c.agents || z.steps() != c.steps() || z.features() != c.features {
            return invalid(format!(
                "scene shape ({}, {}, {}) does not match the network ({}, {}, {})",
                z.agents(),
                z.steps(),
                z.features(),
                c.agents,
                c.steps(),
                c.features
            ));
        }
        if t.len() != z.steps() {
            return invalid("noise vector length differs from the step count");
        }
        if !ctx.inpainting.context.same_shape(z) {
            return invalid("conditioning context shape differs from the scene");
        }
        if ctx.validity.agents() != z.agents() || ctx.validity.steps() != z.steps() {
            return invalid("validity shape differs from the scene");
        }
        Ok(())
    }

    fn pack(
        &self,
        z: &SceneTensor,
        t: &NoiseVector,
        spec: &InpaintingSpec,
        validity: &ValidityMask,
        road: &RoadContext,
    ) -> PackedInputs {
        let c = &self.config;
        let (na, ns, nf, p) = (c.agents, c.steps(), c.features, c.patch);
        let np = c.patches();
        let sw = c.step_width();
        let mut tokens = Mat::zeros(na * np, p * sw);
        let mut token_valid = vec![false; na * np];
        let ctx = &spec.context;
        for a in 0..na {
            for s in 0..ns {
                let row = a * np + s / p;
                let base = row * tokens.cols + (s % p) * sw;
                let dst = &mut tokens.data[base..base + sw];
                let valid = validity.get(a, s);
                for f in 0..nf {
                    let m = spec.mask.get(a, s, f);
                    dst[f] = z.get(a, s, f);
                    dst[nf + f] = if m { ctx.get(a, s, f) } else { 0.0 };
                    dst[2 * nf + f] = m as u8 as f64;
                }
                dst[3 * nf] = valid as u8 as f64;
                dst[3 * nf + 1] = t.level(s).t;
                token_valid[row] |= valid;
            }
        }
        let d = c.dim;
        let mut noise = Mat::zeros(np, d);
        for q in 0..np {
            let lo = q * p;
            let hi = ((q + 1) * p).min(ns);
            let mean = (lo..hi).map(|s| t.level(s).t).sum::<f64>() / (hi - lo) as f64;
            sinusoid(mean * 1000.0, &mut noise.data[q * d..(q + 1) * d]);
        }
        let mut seg = Vec::new();
        for line in &road.polylines {
            let kind = match line.kind {
                PolylineKind::LaneCenter => [1.0, 0.0],
                PolylineKind::RoadEdge => [0.0, 1.0],
            };
            for w in line.points.windows(2) {
                seg.extend_from_slice(&[w[0][0], w[0][1], w[1][0], w[1][1], kind[0], kind[1]]);
            }
        }
        let n_seg = seg.len() / SEGMENT_FEATURES;
        let groups = n_seg.min(c.context_tokens);
        let segment_groups = (0..groups)
            .map(|g| (g * n_seg / groups..(g + 1) * n_seg / groups).collect())
            .collect();
        PackedInputs {
            tokens,
            noise,
            token_valid,
            segments: Mat::from_vec(n_seg, SEGMENT_FEATURES, seg),
            segment_groups,
        }
    }

    /// Records the forward pass; returns the `(tokens, P * D)` output node.
    fn build(&self, tape: &mut Tape, inputs: &PackedInputs) -> Var {
        let c = &self.config;
        let (na, np, d) = (c.agents, c.patches(), c.dim);
        let n = na * np;
        let l = &self.layout;
        let p: Vec<Var> = self
            .params
            .iter()
            .enumerate()
            .map(|(i, m)| tape.param(i, m))
            .collect();

        let tokens = tape.leaf(inputs.tokens.clone());
        let mut h = tape.linear(tokens, p[l.in_w], p[l.in_b]);
        let mut pos = Mat::zeros(n, d);
        for row in 0..n {
            sinusoid((row % np) as f64, &mut pos.data[row * d..(row + 1) * d]);
        }
        let pos = tape.leaf(pos);
        h = tape.add(h, pos);

        // noise conditioning per time patch
        let noise = tape.leaf(inputs.noise.clone());
        let e = tape.linear(noise, p[l.temb1_w], p[l.temb1_b]);
        let e = tape.silu(e);
        let e = tape.linear(e, p[l.temb2_w], p[l.temb2_b]);
        let cond = tape.silu(e);
        let patch_of_token = Arc::new((0..n).map(|row| row % np).collect::<Vec<_>>());

        // road tokens
        let road = if inputs.segment_groups.is_empty() {
            None
        } else {
            let s = tape.leaf(inputs.segments.clone());
            let r = tape.linear(s, p[l.road1_w], p[l.road1_b]);
            let r = tape.gelu(r);
            let r = tape.linear(r, p[l.road2_w], p[l.road2_b]);
            Some(tape.mean_pool(r, Arc::new(inputs.segment_groups.clone())))
        };

        let layouts = self.attention_layouts(inputs);
        for blk in &l.blocks {
            let ada = tape.linear(cond, p[blk.ada_w], p[blk.ada_b]);
            let piece = |tape: &mut Tape, k: usize| {
                let s = tape.slice_cols(ada, k * d, d);
                tape.gather(s, patch_of_token.clone())
            };
            let mods: Vec<Var> = (0..12).map(|k| piece(tape, k)).collect();
            for (k, ids) in blk.attn.iter().enumerate() {
                let (shift, scale, gate) = (mods[3 * k], mods[3 * k + 1], mods[3 * k + 2]);
                let Some(layout) = layouts[k].clone() else { continue };
                let x = tape.layer_norm(h);
                let x = tape.modulate(x, shift, scale);
                let q = tape.matmul(x, p[ids[0]]);
                let src = if k == 2 { road.expect("layout implies road tokens") } else { x };
                let kk = tape.matmul(src, p[ids[1]]);
                let v = tape.matmul(src, p[ids[2]]);
                let a = tape.attention(q, kk, v, c.heads, layout);
                let o = tape.linear(a, p[ids[3]], p[ids[4]]);
                let o = tape.mul(o, gate);
                h = tape.add(h, o);
            }
            let x = tape.layer_norm(h);
            let x = tape.modulate(x, mods[9], mods[10]);
            let x = tape.linear(x, p[blk.mlp1_w], p[blk.mlp1_b]);
            let x = tape.gelu(x);
            let x = tape.linear(x, p[blk.mlp2_w], p[blk.mlp2_b]);
            let x = tape.mul(x, mods[11]);
            h = tape.add(h, x);
        }
        let ada = tape.linear(cond, p[l.final_ada_w], p[l.final_ada_b]);
        let shift = tape.slice_cols(ada, 0, d);
        let shift = tape.gather(shift, patch_of_token.clone());
        let scale = tape.slice_cols(ada, d, d);
        let scale = tape.gather(scale, patch_of_token);
        let x = tape.layer_norm(h);
        let x = tape.modulate(x, shift, scale);
        tape.linear(x, p[l.out_w], p[l.out_b])
    }

    fn attention_layouts(&self, inputs: &PackedInputs) -> [Option<Arc<AttentionLayout>>; 3] {
        let (na, np) = (self.config.agents, self.config.patches());
        let time = AttentionLayout {
            groups: (0..na)
                .map(|a| {
                    let rows: Vec<usize> = (0..np).map(|q| a * np + q).collect();
                    (rows.clone(), rows)
                })
                .collect(),
            key_valid: inputs.token_valid.clone(),
        };
        let agent = AttentionLayout {
            groups: (0..np)
                .map(|q| {
                    let rows: Vec<usize> = (0..na).map(|a| a * np + q).collect();
                    (rows.clone(), rows)
                })
                .collect(),
            key_valid: inputs.token_valid.clone(),
        };
        let nr = inputs.segment_groups.len();
        let road = (nr > 0).then(|| {
            Arc::new(AttentionLayout {
                groups: vec![((0..na * np).collect(), (0..nr).collect())],
                key_valid: vec![true; nr],
            })
        });
        [Some(Arc::new(time)), Some(Arc::new(agent)), road]
    }

    fn unpack(&self, out: &Mat) -> SceneTensor {
        let c = &self.config;
        let (np, nf, p) = (c.patches(), c.features, c.patch);
        let mut v = SceneTensor::zeros(c.agents, c.history, c.future, nf);
        for a in 0..c.agents {
            for s in 0..c.steps() {
                let row = out.row(a * np + s / p);
                v.row_mut(a, s).copy_from_slice(&row[(s % p) * nf..(s % p + 1) * nf]);
            }
        }
        v
    }

    /// Forward pass without touching the evaluation counter.
    pub fn forward(
        &self,
        z: &SceneTensor,
        t: &NoiseVector,
        ctx: &ConditioningContext,
    ) -> Result<SceneTensor> {
        self.check_inputs(z, t, ctx)?;
        let inputs = self.pack(z, t, &ctx.inpainting, &ctx.validity, &ctx.road);
        let mut tape = Tape::new();
        let out = self.build(&mut tape, &inputs);
        Ok(self.unpack(tape.value(out)))
    }

    /// Weighted squared error of the v-prediction against `target` and its
    /// parameter gradients. `weight` has one entry per scene element.
    pub fn loss_and_gradients(
        &self,
        z: &SceneTensor,
        t: &NoiseVector,
        ctx: &ConditioningContext,
        target: &SceneTensor,
        weight: &[f64],
    ) -> Result<(f64, Vec<Mat>)> {
        self.check_inputs(z, t, ctx)?;
        if !target.same_shape(z) || weight.len() != z.len() {
            return invalid("target or weight shape differs from the scene");
        }
        let inputs = self.pack(z, t, &ctx.inpainting, &ctx.validity, &ctx.road);
        let mut tape = Tape::new();
        let out = self.build(&mut tape, &inputs);
        let (tgt, w) = self.token_layout(target, weight);
        let loss = tape.masked_mse(out, tgt, w);
        let value = tape.value(loss).data[0];
        let mut grads: Vec<Mat> = self.params.iter().map(|m| Mat::zeros(m.rows, m.cols)).collect();
        tape.backward(loss, &mut grads);
        Ok((value, grads))
    }

    /// Loss only, for finite-difference checks.
    pub fn loss(
        &self,
        z: &SceneTensor,
        t: &NoiseVector,
        ctx: &ConditioningContext,
        target: &SceneTensor,
        weight: &[f64],
    ) -> Result<f64> {
        let v = self.forward(z, t, ctx)?;
        let total: f64 = weight.iter().sum::<f64>().max(1e-12);
        Ok(v
            .as_slice()
            .iter()
            .zip(target.as_slice())
            .zip(weight)
            .map(|((a, b), w)| w * (a - b) * (a - b))
            .sum::<f64>()
            / total)
    }

    /// Scene-ordered target and weight rearranged into the output token
    /// layout; padded steps get zero weight.
    fn token_layout(&self, target: &SceneTensor, weight: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let c = &self.config;
        let (np, nf, p) = (c.patches(), c.features, c.patch);
        let cols = p * nf;
        let mut tgt = vec![0.0; c.agents * np * cols];
        let mut w = vec![0.0; tgt.len()];
        for a in 0..c.agents {
            for s in 0..c.steps() {
                for f in 0..nf {
                    let dst = (a * np + s / p) * cols + (s % p) * nf + f;
                    let src = target.index(a, s, f);
                    tgt[dst] = target.as_slice()[src];
                    w[dst] = weight[src];
                }
            }
        }
        (tgt, w)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ck = Checkpoint {
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            params: self
                .names
                .iter()
                .zip(&self.params)
                .map(|(name, m)| NamedParam {
                    name: name.clone(),
                    rows: m.rows,
                    cols: m.cols,
                    data: m.data.clone(),
                })
                .collect(),
        };
        std::fs::write(path, serde_json::to_vec(&ck)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_slice(&std::fs::read(path)?)?;
        if ck.version != CHECKPOINT_VERSION {
            return invalid(format!("unsupported checkpoint version {}", ck.version));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut net = Self::new(ck.config, &mut rng)?;
        if ck.params.len() != net.params.len() {
            return invalid("checkpoint parameter count does not match its config");
        }
        for (i, p) in ck.params.into_iter().enumerate() {
            let m = &net.params[i];
            if p.name != net.names[i] || p.rows != m.rows || p.cols != m.cols || p.data.len() != p.rows * p.cols {
                return invalid(format!("checkpoint entry {} ({}) has the wrong shape", i, p.name));
            }
            net.params[i] = Mat::from_vec(p.rows, p.cols, p.data);
        }
        Ok(net)
    }
}

impl Denoiser for TrainableDenoiser {
    fn predict_v(
        &self,
        z: &SceneTensor,
        t: &NoiseVector,
        ctx: &ConditioningContext,
    ) -> Result<SceneTensor> {
        self.counter.bump();
        self.forward(z, t, ctx)
    }

    fn nfe(&self) -> u64 {
        self.counter.get()
    }
}

/// Transformer-style sinusoidal features of `x` written into `out`.
fn sinusoid(x: f64, out: &mut [f64]) {
    let half = out.len() / 2;
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        out[i] = (x * freq).sin();
        out[half + i] = (x * freq).cos();
    }
}
