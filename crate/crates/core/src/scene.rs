//! Scene tensor data model: agents x timesteps x features in normalized
//! space, plus validity, inpainting masks and the feature normalizer.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Channel layout of the scene tensor feature axis.
pub mod channel {
    pub const X: usize = 0;
    pub const Y: usize = 1;
    pub const Z: usize = 2;
    pub const COS_HEADING: usize = 3;
    pub const SIN_HEADING: usize = 4;
    pub const LENGTH: usize = 5;
    pub const WIDTH: usize = 6;
    pub const HEIGHT: usize = 7;
    /// First of the four one-hot type slots (AV, car, pedestrian, cyclist).
    pub const TYPE: usize = 8;
    pub const COUNT: usize = 12;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AgentType {
    Av,
    Car,
    Pedestrian,
    Cyclist,
}

impl AgentType {
    pub const ALL: [AgentType; 4] = [
        AgentType::Av,
        AgentType::Car,
        AgentType::Pedestrian,
        AgentType::Cyclist,
    ];

    pub fn slot(self) -> usize {
        match self {
            AgentType::Av => 0,
            AgentType::Car => 1,
            AgentType::Pedestrian => 2,
            AgentType::Cyclist => 3,
        }
    }

    pub fn from_slot(slot: usize) -> Self {
        Self::ALL[slot.min(3)]
    }
}

/// Normalized scene values indexed `(agent, step, feature)`, with steps
/// `0..history` holding the observed past and `history..history+future`
/// the future.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneTensor {
    agents: usize,
    history: usize,
    future: usize,
    features: usize,
    data: Vec<f64>,
}

impl SceneTensor {
    pub fn zeros(agents: usize, history: usize, future: usize, features: usize) -> Self {
        Self {
            agents,
            history,
            future,
            features,
            data: vec![0.0; agents * (history + future) * features],
        }
    }

    pub fn from_vec(
        agents: usize,
        history: usize,
        future: usize,
        features: usize,
        data: Vec<f64>,
    ) -> Result<Self> {
        if data.len() != agents * (history + future) * features {
            return invalid(format!(
                "scene data has {} entries, expected {}",
                data.len(),
                agents * (history + future) * features
            ));
        }
        Ok(Self {
            agents,
            history,
            future,
            features,
            data,
        })
    }

    pub fn zeros_like(other: &SceneTensor) -> Self {
        Self::zeros(other.agents, other.history, other.future, other.features)
    }

    pub fn agents(&self) -> usize {
        self.agents
    }
    pub fn history(&self) -> usize {
        self.history
    }
    pub fn future(&self) -> usize {
        self.future
    }
    pub fn features(&self) -> usize {
        self.features
    }
    pub fn steps(&self) -> usize {
        self.history + self.future
    }
    pub fn len(&self) -> usize {
        self.data.len()
    }
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn same_shape(&self, other: &SceneTensor) -> bool {
        self.agents == other.agents
            && self.steps() == other.steps()
            && self.features == other.features
    }

    #[inline]
    pub fn index(&self, agent: usize, step: usize, feature: usize) -> usize {
        (agent * self.steps() + step) * self.features + feature
    }

    #[inline]
    pub fn get(&self, agent: usize, step: usize, feature: usize) -> f64 {
        self.data[self.index(agent, step, feature)]
    }

    #[inline]
    pub fn set(&mut self, agent: usize, step: usize, feature: usize, value: f64) {
        let i = self.index(agent, step, feature);
        self.data[i] = value;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// Feature vector of one agent at one step.
    pub fn row(&self, agent: usize, step: usize) -> &[f64] {
        let i = self.index(agent, step, 0);
        &self.data[i..i + self.features]
    }

    pub fn row_mut(&mut self, agent: usize, step: usize) -> &mut [f64] {
        let i = self.index(agent, step, 0);
        let f = self.features;
        &mut self.data[i..i + f]
    }

    /// Same values reinterpreted with a different history/future split.
    pub fn with_split(mut self, history: usize, future: usize) -> Result<Self> {
        if history + future != self.steps() {
            return invalid("history + future must preserve the step count");
        }
        self.history = history;
        self.future = future;
        Ok(self)
    }

    /// Copies steps `start..start+history+future` into a new tensor.
    pub fn window(&self, start: usize, history: usize, future: usize) -> Result<Self> {
        let len = history + future;
        if start + len > self.steps() {
            return invalid(format!(
                "window {}..{} exceeds {} steps",
                start,
                start + len,
                self.steps()
            ));
        }
        let mut out = SceneTensor::zeros(self.agents, history, future, self.features);
        for a in 0..self.agents {
            for s in 0..len {
                out.row_mut(a, s).copy_from_slice(self.row(a, start + s));
            }
        }
        Ok(out)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Per-(agent, step) validity, broadcast over features.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidityMask {
    agents: usize,
    steps: usize,
    data: Vec<bool>,
}

impl ValidityMask {
    pub fn new(agents: usize, steps: usize, value: bool) -> Self {
        Self {
            agents,
            steps,
            data: vec![value; agents * steps],
        }
    }

    pub fn from_vec(agents: usize, steps: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != agents * steps {
            return invalid("validity length does not match agents x steps");
        }
        Ok(Self {
            agents,
            steps,
            data,
        })
    }

    /// First `valid_agents` rows valid on every step, the rest unused.
    pub fn leading_agents(agents: usize, steps: usize, valid_agents: usize) -> Self {
        let mut m = Self::new(agents, steps, false);
        for a in 0..valid_agents.min(agents) {
            m.set_agent(a, true);
        }
        m
    }

    pub fn agents(&self) -> usize {
        self.agents
    }
    pub fn steps(&self) -> usize {
        self.steps
    }

    #[inline]
    pub fn get(&self, agent: usize, step: usize) -> bool {
        self.data[agent * self.steps + step]
    }

    pub fn set(&mut self, agent: usize, step: usize, value: bool) {
        self.data[agent * self.steps + step] = value;
    }

    pub fn set_agent(&mut self, agent: usize, value: bool) {
        for s in 0..self.steps {
            self.set(agent, s, value);
        }
    }

    pub fn agent_any(&self, agent: usize) -> bool {
        (0..self.steps).any(|s| self.get(agent, s))
    }

    /// Agents with at least one valid step.
    pub fn agent_rows(&self) -> Vec<bool> {
        (0..self.agents).map(|a| self.agent_any(a)).collect()
    }

    pub fn valid_agent_count(&self) -> usize {
        self.agent_rows().iter().filter(|&&v| v).count()
    }

    pub fn window(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.steps {
            return invalid("validity window out of range");
        }
        let mut out = Self::new(self.agents, len, false);
        for a in 0..self.agents {
            for s in 0..len {
                out.set(a, s, self.get(a, start + s));
            }
        }
        Ok(out)
    }
}

/// Boolean mask broadcastable to `(agents, steps, features)`. Each stored
/// axis has either length 1 or the full extent.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask {
    dims: [usize; 3],
    full: [usize; 3],
    data: Vec<bool>,
}

impl Mask {
    pub fn new(dims: [usize; 3], full: [usize; 3], data: Vec<bool>) -> Result<Self> {
        for k in 0..3 {
            if dims[k] != 1 && dims[k] != full[k] {
                return invalid(format!(
                    "mask axis {k} has length {} but target extent {}",
                    dims[k], full[k]
                ));
            }
        }
        if data.len() != dims.iter().product::<usize>() {
            return invalid("mask data length does not match its dims");
        }
        Ok(Self { dims, full, data })
    }

    pub fn filled(full: [usize; 3], value: bool) -> Self {
        Self {
            dims: [1, 1, 1],
            full,
            data: vec![value],
        }
    }

    pub fn none(full: [usize; 3]) -> Self {
        Self::filled(full, false)
    }

    pub fn for_scene(scene: &SceneTensor, value: bool) -> Self {
        Self::filled([scene.agents(), scene.steps(), scene.features()], value)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }
    pub fn full_shape(&self) -> [usize; 3] {
        self.full
    }

    #[inline]
    pub fn get(&self, agent: usize, step: usize, feature: usize) -> bool {
        let a = if self.dims[0] == 1 { 0 } else { agent };
        let s = if self.dims[1] == 1 { 0 } else { step };
        let f = if self.dims[2] == 1 { 0 } else { feature };
        self.data[(a * self.dims[1] + s) * self.dims[2] + f]
    }

    pub fn set(&mut self, agent: usize, step: usize, feature: usize, value: bool) {
        if self.dims != self.full {
            *self = self.expand();
        }
        let i = (agent * self.full[1] + step) * self.full[2] + feature;
        self.data[i] = value;
    }

    /// Materializes the mask at its full `(agents, steps, features)` shape.
    pub fn expand(&self) -> Mask {
        let [na, ns, nf] = self.full;
        let mut data = Vec::with_capacity(na * ns * nf);
        for a in 0..na {
            for s in 0..ns {
                for f in 0..nf {
                    data.push(self.get(a, s, f));
                }
            }
        }
        Mask {
            dims: self.full,
            full: self.full,
            data,
        }
    }

    /// Elementwise AND after broadcasting.
    pub fn and(&self, other: &Mask) -> Result<Mask> {
        self.combine(other, |x, y| x && y)
    }

    pub fn or(&self, other: &Mask) -> Result<Mask> {
        self.combine(other, |x, y| x || y)
    }

    fn combine(&self, other: &Mask, op: impl Fn(bool, bool) -> bool) -> Result<Mask> {
        if self.full != other.full {
            return invalid("mask shapes differ");
        }
        let dims = [0, 1, 2].map(|k| self.dims[k].max(other.dims[k]));
        let mut data = Vec::with_capacity(dims.iter().product());
        for a in 0..dims[0] {
            for s in 0..dims[1] {
                for f in 0..dims[2] {
                    data.push(op(self.get(a, s, f), other.get(a, s, f)));
                }
            }
        }
        Mask::new(dims, self.full, data)
    }

    pub fn count_true(&self) -> usize {
        let [na, ns, nf] = self.full;
        let mut n = 0;
        for a in 0..na {
            for s in 0..ns {
                for f in 0..nf {
                    n += self.get(a, s, f) as usize;
                }
            }
        }
        n
    }

    /// Copies steps `start..start+len` of a full-shape view.
    pub fn window(&self, start: usize, len: usize) -> Result<Mask> {
        if start + len > self.full[1] {
            return invalid("mask window out of range");
        }
        let e = self.expand();
        let [na, _, nf] = self.full;
        let mut data = Vec::with_capacity(na * len * nf);
        for a in 0..na {
            for s in start..start + len {
                for f in 0..nf {
                    data.push(e.get(a, s, f));
                }
            }
        }
        Mask::new([na, len, nf], [na, len, nf], data)
    }
}

/// Inpainting conditioning: entries where `mask` is true are pinned to the
/// corresponding `context` value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InpaintingSpec {
    pub mask: Mask,
    pub context: SceneTensor,
}

impl InpaintingSpec {
    pub fn new(mask: Mask, context: SceneTensor) -> Result<Self> {
        let shape = [context.agents(), context.steps(), context.features()];
        if mask.full_shape() != shape {
            return invalid("inpainting mask and context shapes differ");
        }
        let [na, ns, nf] = shape;
        for a in 0..na {
            for s in 0..ns {
                for f in 0..nf {
                    if mask.get(a, s, f) && !context.get(a, s, f).is_finite() {
                        return Err(Error::NonFinite {
                            agent: a,
                            step: s,
                            feature: f,
                        });
                    }
                }
            }
        }
        Ok(Self { mask, context })
    }

    /// No entries conditioned.
    pub fn empty_like(scene: &SceneTensor) -> Self {
        Self {
            mask: Mask::for_scene(scene, false),
            context: SceneTensor::zeros_like(scene),
        }
    }
}

/// Feature normalization constants: positions scaled by 1/80 and size/type
/// channels mapped through `(f - mu) / (2 sigma)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureNormalizer {
    pub position_scale: f64,
    pub mu_length: f64,
    pub mu_width: f64,
    pub mu_height: f64,
    pub mu_type: f64,
    pub sigma_length: f64,
    pub sigma_width: f64,
    pub sigma_height: f64,
    pub sigma_type: f64,
}

impl Default for FeatureNormalizer {
    fn default() -> Self {
        Self {
            position_scale: 1.0 / 80.0,
            mu_length: 4.5,
            mu_width: 2.0,
            mu_height: 1.75,
            mu_type: 0.5,
            sigma_length: 2.5,
            sigma_width: 0.8,
            sigma_height: 0.6,
            sigma_type: 0.5,
        }
    }
}

/// Size/type channel a scalar belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SizeChannel {
    Length,
    Width,
    Height,
    Type,
}

impl FeatureNormalizer {
    fn moments(&self, ch: SizeChannel) -> (f64, f64) {
        match ch {
            SizeChannel::Length => (self.mu_length, self.sigma_length),
            SizeChannel::Width => (self.mu_width, self.sigma_width),
            SizeChannel::Height => (self.mu_height, self.sigma_height),
            SizeChannel::Type => (self.mu_type, self.sigma_type),
        }
    }

    pub fn norm_size(&self, ch: SizeChannel, value: f64) -> f64 {
        let (mu, sigma) = self.moments(ch);
        (value - mu) / (2.0 * sigma)
    }

    pub fn denorm_size(&self, ch: SizeChannel, value: f64) -> f64 {
        let (mu, sigma) = self.moments(ch);
        value * (2.0 * sigma) + mu
    }

    pub fn norm_position(&self, meters: f64) -> f64 {
        meters * self.position_scale
    }

    pub fn denorm_position(&self, value: f64) -> f64 {
        value / self.position_scale
    }

    /// Normalized value of a world-unit quantity for a channel of the
    /// standard layout (headings pass through as cos/sin directly).
    pub fn norm_channel(&self, channel: usize, value: f64) -> f64 {
        use self::channel as c;
        match channel {
            c::X | c::Y | c::Z => self.norm_position(value),
            c::LENGTH => self.norm_size(SizeChannel::Length, value),
            c::WIDTH => self.norm_size(SizeChannel::Width, value),
            c::HEIGHT => self.norm_size(SizeChannel::Height, value),
            ch if ch >= c::TYPE => self.norm_size(SizeChannel::Type, value),
            _ => value,
        }
    }

    pub fn denorm_channel(&self, channel: usize, value: f64) -> f64 {
        use self::channel as c;
        match channel {
            c::X | c::Y | c::Z => self.denorm_position(value),
            c::LENGTH => self.denorm_size(SizeChannel::Length, value),
            c::WIDTH => self.denorm_size(SizeChannel::Width, value),
            c::HEIGHT => self.denorm_size(SizeChannel::Height, value),
            ch if ch >= c::TYPE => self.denorm_size(SizeChannel::Type, value),
            _ => value,
        }
    }
}

/// World-frame state of one agent at one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub heading: f64,
    pub valid: bool,
}

/// World-frame track: per-step poses and per-agent box size and type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentTrack {
    pub kind: AgentType,
    pub length: f64,
    pub width: f64,
    pub height: f64,
    pub states: Vec<AgentState>,
}

/// World-frame scene in the scene-centric frame (AV pose at the last
/// history step is the origin).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawScene {
    pub history: usize,
    pub future: usize,
    pub agents: Vec<AgentTrack>,
}

impl RawScene {
    pub fn steps(&self) -> usize {
        self.history + self.future
    }
}

/// Encodes a world-frame scene into a normalized tensor with `capacity`
/// agent slots. Invalid steps are written as zeros.
pub fn normalize_scene(
    raw: &RawScene,
    normalizer: &FeatureNormalizer,
    capacity: usize,
) -> Result<(SceneTensor, ValidityMask)> {
    use self::channel as c;
    if raw.agents.len() > capacity {
        return invalid(format!(
            "{} agents exceed capacity {capacity}",
            raw.agents.len()
        ));
    }
    let steps = raw.steps();
    let mut scene = SceneTensor::zeros(capacity, raw.history, raw.future, c::COUNT);
    let mut validity = ValidityMask::new(capacity, steps, false);
    for (a, track) in raw.agents.iter().enumerate() {
        if track.states.len() != steps {
            return invalid(format!(
                "agent {a} has {} states, expected {steps}",
                track.states.len()
            ));
        }
        for (feature, v) in [
            (c::LENGTH, track.length),
            (c::WIDTH, track.width),
            (c::HEIGHT, track.height),
        ] {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    agent: a,
                    step: 0,
                    feature,
                });
            }
        }
        for (s, st) in track.states.iter().enumerate() {
            if !st.valid {
                continue;
            }
            for (feature, v) in [(c::X, st.x), (c::Y, st.y), (c::Z, st.z), (c::COS_HEADING, st.heading)] {
                if !v.is_finite() {
                    return Err(Error::NonFinite {
                        agent: a,
                        step: s,
                        feature,
                    });
                }
            }
            validity.set(a, s, true);
            let row = scene.row_mut(a, s);
            row[c::X] = normalizer.norm_position(st.x);
            row[c::Y] = normalizer.norm_position(st.y);
            row[c::Z] = normalizer.norm_position(st.z);
            let (sin, cos) = st.heading.sin_cos();
            row[c::COS_HEADING] = cos;
            row[c::SIN_HEADING] = sin;
            row[c::LENGTH] = normalizer.norm_size(SizeChannel::Length, track.length);
            row[c::WIDTH] = normalizer.norm_size(SizeChannel::Width, track.width);
            row[c::HEIGHT] = normalizer.norm_size(SizeChannel::Height, track.height);
            for k in 0..4 {
                let hot = if k == track.kind.slot() { 1.0 } else { 0.0 };
                row[c::TYPE + k] = normalizer.norm_size(SizeChannel::Type, hot);
            }
        }
    }
    Ok((scene, validity))
}

/// Heading angle from a (cos, sin) pair; the pair need not be unit length.
pub fn decode_heading(cos: f64, sin: f64) -> f64 {
    let norm = cos.hypot(sin);
    if norm == 0.0 {
        0.0
    } else {
        (sin / norm).atan2(cos / norm)
    }
}

/// Decodes a normalized tensor back to world-frame tracks. Agents without
/// any valid step are dropped; sizes are averaged over valid steps and the
/// type is the argmax of the averaged one-hot slots.
pub fn denormalize_scene(
    scene: &SceneTensor,
    validity: &ValidityMask,
    normalizer: &FeatureNormalizer,
) -> RawScene {
    use self::channel as c;
    let steps = scene.steps();
    let mut agents = Vec::new();
    for a in 0..scene.agents() {
        if !validity.agent_any(a) {
            continue;
        }
        let valid_steps: Vec<usize> = (0..steps).filter(|&s| validity.get(a, s)).collect();
        let n = valid_steps.len() as f64;
        let mean = |ch: usize| valid_steps.iter().map(|&s| scene.get(a, s, ch)).sum::<f64>() / n;
        let length = normalizer.denorm_size(SizeChannel::Length, mean(c::LENGTH));
        let width = normalizer.denorm_size(SizeChannel::Width, mean(c::WIDTH));
        let height = normalizer.denorm_size(SizeChannel::Height, mean(c::HEIGHT));
        let type_scores: Vec<f64> = (0..4).map(|k| mean(c::TYPE + k)).collect();
        let kind = AgentType::from_slot(argmax(&type_scores));
        let states = (0..steps)
            .map(|s| {
                let row = scene.row(a, s);
                AgentState {
                    x: normalizer.denorm_position(row[c::X]),
                    y: normalizer.denorm_position(row[c::Y]),
                    z: normalizer.denorm_position(row[c::Z]),
                    heading: decode_heading(row[c::COS_HEADING], row[c::SIN_HEADING]),
                    valid: validity.get(a, s),
                }
            })
            .collect();
        agents.push(AgentTrack {
            kind,
            length,
            width,
            height,
            states,
        });
    }
    RawScene {
        history: scene.history(),
        future: scene.future(),
        agents,
    }
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// History-step mask of shape `(1, steps, 1)`.
pub fn make_bp_mask(history: usize, steps: usize, agents: usize, features: usize) -> Result<Mask> {
    if history == 0 || history >= steps {
        return invalid(format!(
            "history {history} must be in 1..{steps} (total steps)"
        ));
    }
    let data = (0..steps).map(|s| s < history).collect();
    Mask::new([1, steps, 1], [agents, steps, features], data)
}

/// Per-agent scene-generation mask of shape `(agents, 1, 1)`: draws a
/// selection count uniformly from `0..=valid` and selects each valid agent
/// with probability `count / valid`.
pub fn sample_scenegen_mask<R: Rng + ?Sized>(
    agent_valid: &[bool],
    steps: usize,
    features: usize,
    rng: &mut R,
) -> Mask {
    let agents = agent_valid.len();
    let valid = agent_valid.iter().filter(|&&v| v).count();
    let mut data = vec![false; agents];
    if valid > 0 {
        let select = rng.gen_range(0..=valid);
        let p = select as f64 / valid as f64;
        for (a, &ok) in agent_valid.iter().enumerate() {
            data[a] = ok && rng.gen::<f64>() < p;
        }
    }
    Mask::new([agents, 1, 1], [agents, steps, features], data).expect("dims are consistent")
}

/// Control mask with agent and time rates drawn as count / extent.
pub fn sample_control_mask<R: Rng + ?Sized>(
    agent_valid: &[bool],
    steps: usize,
    feature_probs: &[f64],
    rng: &mut R,
) -> Result<Mask> {
    let valid = agent_valid.iter().filter(|&&v| v).count();
    let agent_rate = if valid == 0 {
        0.0
    } else {
        rng.gen_range(0..=valid) as f64 / valid as f64
    };
    let time_rate = rng.gen_range(0..=steps) as f64 / steps.max(1) as f64;
    sample_control_mask_with_rates(agent_valid, steps, feature_probs, agent_rate, time_rate, rng)
}

/// Outer product of independent agent, time and feature Bernoulli draws.
pub fn sample_control_mask_with_rates<R: Rng + ?Sized>(
    agent_valid: &[bool],
    steps: usize,
    feature_probs: &[f64],
    agent_rate: f64,
    time_rate: f64,
    rng: &mut R,
) -> Result<Mask> {
    for (d, p) in feature_probs.iter().enumerate() {
        if !(0.0..=1.0).contains(p) {
            return invalid(format!("feature probability {p} for channel {d} outside [0,1]"));
        }
    }
    let agents = agent_valid.len();
    let features = feature_probs.len();
    let ia: Vec<bool> = agent_valid
        .iter()
        .map(|&ok| ok && rng.gen::<f64>() < agent_rate)
        .collect();
    let it: Vec<bool> = (0..steps).map(|_| rng.gen::<f64>() < time_rate).collect();
    let id: Vec<bool> = feature_probs.iter().map(|&p| rng.gen::<f64>() < p).collect();
    let mut data = Vec::with_capacity(agents * steps * features);
    for a in 0..agents {
        for s in 0..steps {
            for d in 0..features {
                data.push(ia[a] && it[s] && id[d]);
            }
        }
    }
    Mask::new([agents, steps, features], [agents, steps, features], data)
}

/// Elementwise select: context where masked, `x` elsewhere.
pub fn apply_inpainting(x: &SceneTensor, spec: &InpaintingSpec) -> SceneTensor {
    let mut out = x.clone();
    apply_inpainting_in_place(&mut out, spec);
    out
}

pub fn apply_inpainting_in_place(x: &mut SceneTensor, spec: &InpaintingSpec) {
    let (na, ns, nf) = (x.agents(), x.steps(), x.features());
    debug_assert_eq!(spec.mask.full_shape(), [na, ns, nf]);
    let ctx = spec.context.as_slice();
    let data = x.as_mut_slice();
    let mut i = 0;
    for a in 0..na {
        for s in 0..ns {
            for f in 0..nf {
                if spec.mask.get(a, s, f) {
                    data[i] = ctx[i];
                }
                i += 1;
            }
        }
    }
}

/// Fills invalid steps by linear interpolation between the nearest valid
/// neighbours and linear extrapolation from the two nearest valid steps at
/// the boundaries (constant with a single valid step). Returns the imputed
/// scene and the agents skipped for having no valid step.
pub fn impute_invalid_steps(
    scene: &SceneTensor,
    validity: &ValidityMask,
) -> (SceneTensor, Vec<usize>) {
    let mut out = scene.clone();
    let mut skipped = Vec::new();
    let steps = scene.steps();
    for a in 0..scene.agents() {
        let valid: Vec<usize> = (0..steps).filter(|&s| validity.get(a, s)).collect();
        if valid.is_empty() {
            skipped.push(a);
            continue;
        }
        for s in 0..steps {
            if validity.get(a, s) {
                continue;
            }
            let next = valid.partition_point(|&v| v < s);
            let (lo, hi) = if valid.len() == 1 {
                (valid[0], valid[0])
            } else if next == 0 {
                (valid[0], valid[1])
            } else if next == valid.len() {
                (valid[valid.len() - 2], valid[valid.len() - 1])
            } else {
                (valid[next - 1], valid[next])
            };
            for f in 0..scene.features() {
                let v = if lo == hi {
                    scene.get(a, lo, f)
                } else {
                    let (y0, y1) = (scene.get(a, lo, f), scene.get(a, hi, f));
                    let w = (s as f64 - lo as f64) / (hi as f64 - lo as f64);
                    y0 + w * (y1 - y0)
                };
                out.set(a, s, f, v);
            }
        }
    }
    (out, skipped)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn one_agent_scene(length: f64, x: f64) -> RawScene {
        RawScene {
            history: 1,
            future: 1,
            agents: vec![AgentTrack {
                kind: AgentType::Car,
                length,
                width: 2.0,
                height: 1.5,
                states: vec![
                    AgentState {
                        x,
                        y: 0.0,
                        z: 0.0,
                        heading: 0.3,
                        valid: true,
                    };
                    2
                ],
            }],
        }
    }

    #[test]
    fn length_normalization_examples() {
        let n = FeatureNormalizer::default();
        let (s, _) = normalize_scene(&one_agent_scene(4.5, 0.0), &n, 1).unwrap();
        assert_eq!(s.get(0, 0, channel::LENGTH), 0.0);
        assert_eq!(s.get(0, 0, channel::X), 0.0);
        let (s, _) = normalize_scene(&one_agent_scene(9.5, 0.0), &n, 1).unwrap();
        assert_eq!(s.get(0, 0, channel::LENGTH), 1.0);
        assert_eq!(n.denorm_size(SizeChannel::Length, 0.0), 4.5);
    }

    #[test]
    fn non_finite_feature_reports_index() {
        let n = FeatureNormalizer::default();
        let mut raw = one_agent_scene(4.5, 0.0);
        raw.agents[0].states[1].y = f64::NAN;
        match normalize_scene(&raw, &n, 2) {
            Err(Error::NonFinite { agent, step, .. }) => assert_eq!((agent, step), (0, 1)),
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn type_decodes_by_argmax() {
        let n = FeatureNormalizer::default();
        let mut scene = SceneTensor::zeros(1, 1, 1, channel::COUNT);
        for s in 0..2 {
            for (k, v) in [0.9, 0.1, -0.2, 0.0].iter().enumerate() {
                scene.set(0, s, channel::TYPE + k, *v);
            }
            scene.set(0, s, channel::TYPE + 1, 1.2);
        }
        let raw = denormalize_scene(&scene, &ValidityMask::new(1, 2, true), &n);
        assert_eq!(raw.agents[0].kind, AgentType::Car);
    }

    #[test]
    fn bp_mask_marks_history() {
        let m = make_bp_mask(11, 91, 2, 3).unwrap();
        assert_eq!(m.dims(), [1, 91, 1]);
        for s in 0..91 {
            assert_eq!(m.get(1, s, 2), s < 11);
        }
        assert_eq!(m.count_true(), 11 * 2 * 3);
        let m = make_bp_mask(1, 2, 1, 1).unwrap();
        assert!(m.get(0, 0, 0) && !m.get(0, 1, 0));
        assert!(make_bp_mask(5, 5, 1, 1).is_err());
    }

    #[test]
    fn scenegen_mask_degenerate_and_invalid_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = sample_scenegen_mask(&[false, false], 4, 2, &mut rng);
        assert_eq!(m.count_true(), 0);
        for _ in 0..200 {
            let m = sample_scenegen_mask(&[true, false, true], 4, 2, &mut rng);
            assert!(!m.get(1, 0, 0));
        }
    }

    #[test]
    fn control_mask_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = sample_control_mask(&[true, true], 5, &[0.0, 0.0], &mut rng).unwrap();
        assert_eq!(m.count_true(), 0);
        let m =
            sample_control_mask_with_rates(&[true, false], 5, &[1.0, 1.0], 1.0, 1.0, &mut rng)
                .unwrap();
        assert_eq!(m.count_true(), 10);
        assert!(!m.get(1, 0, 0));
        assert!(sample_control_mask(&[true], 2, &[1.5], &mut rng).is_err());
    }

    #[test]
    fn inpainting_extremes() {
        let mut x = SceneTensor::zeros(2, 1, 2, 2);
        let mut ctx = SceneTensor::zeros(2, 1, 2, 2);
        for (i, v) in x.as_mut_slice().iter_mut().enumerate() {
            *v = i as f64;
        }
        for (i, v) in ctx.as_mut_slice().iter_mut().enumerate() {
            *v = -(i as f64) - 1.0;
        }
        let all = InpaintingSpec::new(Mask::for_scene(&x, true), ctx.clone()).unwrap();
        assert_eq!(apply_inpainting(&x, &all), ctx);
        let none = InpaintingSpec::new(Mask::for_scene(&x, false), ctx).unwrap();
        assert_eq!(apply_inpainting(&x, &none), x);
    }

    #[test]
    fn imputation_examples() {
        let mut s = SceneTensor::zeros(1, 2, 2, 1);
        s.set(0, 0, 0, 0.0);
        s.set(0, 2, 0, 2.0);
        let mut v = ValidityMask::new(1, 4, false);
        v.set(0, 0, true);
        v.set(0, 2, true);
        let (out, skipped) = impute_invalid_steps(&s, &v);
        assert!(skipped.is_empty());
        assert_eq!(out.get(0, 1, 0), 1.0);
        assert_eq!(out.get(0, 3, 0), 3.0);

        let mut s = SceneTensor::zeros(1, 2, 2, 1);
        s.set(0, 1, 0, 1.0);
        s.set(0, 0, 0, 0.0);
        let mut v = ValidityMask::new(1, 4, false);
        v.set(0, 0, true);
        v.set(0, 1, true);
        let (out, _) = impute_invalid_steps(&s, &v);
        assert_eq!(out.get(0, 2, 0), 2.0);
        assert_eq!(out.get(0, 3, 0), 3.0);

        let mut s = SceneTensor::zeros(2, 1, 2, 1);
        s.set(0, 1, 0, 7.0);
        let mut v = ValidityMask::new(2, 3, false);
        v.set(0, 1, true);
        let (out, skipped) = impute_invalid_steps(&s, &v);
        assert_eq!(skipped, vec![1]);
        assert!((0..3).all(|t| out.get(0, t, 0) == 7.0));
    }

    fn arb_raw_scene() -> impl Strategy<Value = RawScene> {
        let state = (
            -200.0..200.0f64,
            -200.0..200.0f64,
            -5.0..5.0f64,
            -3.14159..3.14159f64,
        );
        let track = (
            0usize..4,
            0.5..20.0f64,
            0.3..4.0f64,
            0.5..4.0f64,
            prop::collection::vec(state, 6),
        );
        prop::collection::vec(track, 1..4).prop_map(|tracks| RawScene {
            history: 2,
            future: 4,
            agents: tracks
                .into_iter()
                .map(|(k, l, w, h, st)| AgentTrack {
                    kind: AgentType::from_slot(k),
                    length: l,
                    width: w,
                    height: h,
                    states: st
                        .into_iter()
                        .map(|(x, y, z, heading)| AgentState {
                            x,
                            y,
                            z,
                            heading,
                            valid: true,
                        })
                        .collect(),
                })
                .collect(),
        })
    }

    fn rel_close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-300) || (a - b).abs() < 1e-14
    }

    proptest! {
        #[test]
        fn normalization_round_trip(raw in arb_raw_scene()) {
            let n = FeatureNormalizer::default();
            let (scene, validity) = normalize_scene(&raw, &n, 4).unwrap();
            let back = denormalize_scene(&scene, &validity, &n);
            prop_assert_eq!(back.agents.len(), raw.agents.len());
            for (orig, dec) in raw.agents.iter().zip(&back.agents) {
                prop_assert_eq!(orig.kind, dec.kind);
                prop_assert!(rel_close(orig.length, dec.length, 1e-12));
                prop_assert!(rel_close(orig.width, dec.width, 1e-12));
                prop_assert!(rel_close(orig.height, dec.height, 1e-12));
                for (a, b) in orig.states.iter().zip(&dec.states) {
                    prop_assert!(rel_close(a.x, b.x, 1e-12));
                    prop_assert!(rel_close(a.y, b.y, 1e-12));
                    prop_assert!(rel_close(a.z, b.z, 1e-12));
                    prop_assert!((a.heading - b.heading).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn heading_encode_decode(gamma in -std::f64::consts::PI..=std::f64::consts::PI) {
            let (s, c) = gamma.sin_cos();
            let back = decode_heading(c, s);
            let diff = (back - gamma).rem_euclid(2.0 * std::f64::consts::PI);
            prop_assert!(diff < 1e-9 || (2.0 * std::f64::consts::PI - diff) < 1e-9);
        }

        #[test]
        fn inpainting_idempotent_and_broadcast_equivalent(
            seed in 0u64..1000,
            agent_bits in prop::collection::vec(any::<bool>(), 3),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut x = SceneTensor::zeros(3, 2, 3, 4);
            let mut ctx = SceneTensor::zeros(3, 2, 3, 4);
            for v in x.as_mut_slice() { *v = rng.gen::<f64>(); }
            for v in ctx.as_mut_slice() { *v = rng.gen::<f64>(); }
            let mask = Mask::new([3, 1, 1], [3, 5, 4], agent_bits).unwrap();
            let spec = InpaintingSpec::new(mask.clone(), ctx.clone()).unwrap();
            let once = apply_inpainting(&x, &spec);
            prop_assert_eq!(&apply_inpainting(&once, &spec), &once);
            let expanded = InpaintingSpec::new(mask.expand(), ctx).unwrap();
            prop_assert_eq!(apply_inpainting(&x, &expanded), once);
        }
    }
}
