//! Latent-dynamics network: representation, dynamics ("generation"),
//! prediction and similarity projector/predictor, plus the training loss and
//! an Adam optimiser.
//!
//! Residual blocks are pre-activation bottlenecks
//! `h + conv3(relu(conv3(relu(h))))` going `channels -> bottleneck -> channels`.
//! Latent states are min-max scaled per sample into `[0, 1]`. The dynamics
//! function sees the latent concatenated with a one-hot action plane.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::experience::{TrainingBatch, TrainingSample};
use crate::game::{Action, Observation, CELLS, OBS_LEN, PLANES};
use crate::nn::{
    axpy, minmax_backward, minmax_forward, relu, relu_backward, Conv, Dense, MinMaxCache, Scalar,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("shape mismatch: expected {expected} values, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("non-finite {what}")]
    NonFinite { what: String },
    #[error("config mismatch in field `{field}`")]
    ConfigMismatch { field: &'static str },
    #[error("invalid config: `{field}` must be positive")]
    InvalidConfig { field: &'static str },
    #[error("model failure: {0}")]
    Other(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub residual_blocks: usize,
    pub channels: usize,
    pub bottleneck_channels: usize,
    pub projector_hidden: usize,
    pub projector_out: usize,
    pub predictor_hidden: usize,
    pub predictor_out: usize,
    pub unroll_steps: usize,
    /// policy loss weight
    pub c1: f64,
    /// value loss weight
    pub c2: f64,
    /// similarity loss weight
    pub c3: f64,
    /// weight decay, the `c4 ||θ||²` term
    pub weight_decay: f64,
    pub learning_rate: f64,
    /// gradient multiplier where the dynamics function is entered
    pub dynamics_grad_scale: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig::paper()
    }
}

impl NetworkConfig {
    pub fn paper() -> NetworkConfig {
        NetworkConfig {
            residual_blocks: 6,
            channels: 256,
            bottleneck_channels: 128,
            projector_hidden: 500,
            projector_out: 500,
            predictor_hidden: 250,
            predictor_out: 500,
            unroll_steps: 5,
            c1: 1.0,
            c2: 1.0,
            c3: 2.0,
            weight_decay: 1e-4,
            learning_rate: 1e-4,
            dynamics_grad_scale: 0.5,
        }
    }

    pub fn desk() -> NetworkConfig {
        NetworkConfig {
            residual_blocks: 2,
            channels: 32,
            bottleneck_channels: 16,
            projector_hidden: 64,
            projector_out: 64,
            predictor_hidden: 32,
            predictor_out: 64,
            ..NetworkConfig::paper()
        }
    }

    /// Tiny network for gradient checks and unit tests.
    pub fn micro() -> NetworkConfig {
        NetworkConfig {
            residual_blocks: 1,
            channels: 2,
            bottleneck_channels: 2,
            projector_hidden: 8,
            projector_out: 4,
            predictor_hidden: 8,
            predictor_out: 4,
            unroll_steps: 2,
            ..NetworkConfig::paper()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let positive = [
            ("channels", self.channels),
            ("bottleneck_channels", self.bottleneck_channels),
            ("projector_hidden", self.projector_hidden),
            ("projector_out", self.projector_out),
            ("predictor_hidden", self.predictor_hidden),
            ("predictor_out", self.predictor_out),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(ModelError::InvalidConfig { field });
            }
        }
        if self.projector_out != self.predictor_out {
            return Err(ModelError::ConfigMismatch { field: "predictor_out" });
        }
        Ok(())
    }

    /// Name of the first architecture field that differs, if any.
    pub fn architecture_mismatch(&self, other: &NetworkConfig) -> Option<&'static str> {
        let fields = [
            ("residual_blocks", self.residual_blocks, other.residual_blocks),
            ("channels", self.channels, other.channels),
            ("bottleneck_channels", self.bottleneck_channels, other.bottleneck_channels),
            ("projector_hidden", self.projector_hidden, other.projector_hidden),
            ("projector_out", self.projector_out, other.projector_out),
            ("predictor_hidden", self.predictor_hidden, other.predictor_hidden),
            ("predictor_out", self.predictor_out, other.predictor_out),
        ];
        fields.iter().find(|(_, a, b)| a != b).map(|(f, _, _)| *f)
    }

    pub fn latent_len(&self) -> usize {
        self.channels * CELLS
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Default)]
struct LayoutBuilder {
    entries: Vec<ParamEntry>,
    len: usize,
    output_layers: Vec<usize>,
}

impl LayoutBuilder {
    fn push(&mut self, name: String, shape: Vec<usize>) -> usize {
        let offset = self.len;
        self.len += shape.iter().product::<usize>();
        self.entries.push(ParamEntry { name, offset, shape });
        offset
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, kernel3: bool) -> Conv {
        let k = if kernel3 { 9 } else { 1 };
        let w = self.push(format!("{name}.weight"), vec![k, cin, cout]);
        let b = self.push(format!("{name}.bias"), vec![cout]);
        Conv { w, b, cin, cout, kernel3 }
    }

    fn dense(&mut self, name: &str, din: usize, dout: usize) -> Dense {
        let w = self.push(format!("{name}.weight"), vec![din, dout]);
        let b = self.push(format!("{name}.bias"), vec![dout]);
        Dense { w, b, din, dout }
    }

    fn output_dense(&mut self, name: &str, din: usize, dout: usize) -> Dense {
        self.output_layers.push(self.entries.len());
        self.dense(name, din, dout)
    }
}

#[derive(Debug, Clone)]
struct Tower {
    input: Conv,
    blocks: Vec<(Conv, Conv)>,
}

#[derive(Debug, Clone)]
struct Arch {
    repr: Tower,
    dynamics: Tower,
    policy_conv: Conv,
    policy_fc: Dense,
    value_conv: Conv,
    value_fc1: Dense,
    value_fc2: Dense,
    proj1: Dense,
    proj2: Dense,
    pred1: Dense,
    pred2: Dense,
}

fn tower(b: &mut LayoutBuilder, name: &str, cin: usize, cfg: &NetworkConfig) -> Tower {
    let input = b.conv(&format!("{name}.input"), cin, cfg.channels, true);
    let blocks = (0..cfg.residual_blocks)
        .map(|i| {
            let a = b.conv(&format!("{name}.block{i}.conv_a"), cfg.channels, cfg.bottleneck_channels, true);
            let c = b.conv(&format!("{name}.block{i}.conv_b"), cfg.bottleneck_channels, cfg.channels, true);
            (a, c)
        })
        .collect();
    Tower { input, blocks }
}

fn build_arch(cfg: &NetworkConfig) -> (Arch, Vec<ParamEntry>, usize, Vec<usize>) {
    let mut b = LayoutBuilder::default();
    let c = cfg.channels;
    let repr = tower(&mut b, "representation", PLANES, cfg);
    let dynamics = tower(&mut b, "dynamics", c + 1, cfg);
    let policy_conv = b.conv("prediction.policy_conv", c, 2, false);
    let policy_fc = b.output_dense("prediction.policy_fc", 2 * CELLS, CELLS);
    let value_conv = b.conv("prediction.value_conv", c, 1, false);
    let value_fc1 = b.dense("prediction.value_fc1", CELLS, c);
    let value_fc2 = b.output_dense("prediction.value_fc2", c, 1);
    let proj1 = b.dense("projector.fc1", c * CELLS, cfg.projector_hidden);
    let proj2 = b.output_dense("projector.fc2", cfg.projector_hidden, cfg.projector_out);
    let pred1 = b.dense("predictor.fc1", cfg.projector_out, cfg.predictor_hidden);
    let pred2 = b.output_dense("predictor.fc2", cfg.predictor_hidden, cfg.predictor_out);
    let arch = Arch {
        repr,
        dynamics,
        policy_conv,
        policy_fc,
        value_conv,
        value_fc1,
        value_fc2,
        proj1,
        proj2,
        pred1,
        pred2,
    };
    (arch, b.entries, b.len, b.output_layers)
}

/// In-mind state `s_t^τ`: `channels × 3 × 3` values in `[batch][cell][channel]`
/// order, tagged with its origin time `t` and in-mind time `τ`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    pub data: Vec<f32>,
    pub t: u32,
    pub tau: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkOutput {
    pub policy_logits: [f32; CELLS],
    /// tanh output in `[-1, 1]` for the player to move
    pub value: f32,
    pub latent: LatentState,
}

impl NetworkOutput {
    pub fn policy(&self) -> [f64; CELLS] {
        softmax(&self.policy_logits.map(|v| v as f64))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityVectors {
    pub projection: Vec<f32>,
    pub prediction: Vec<f32>,
}

/// Anything the planner can query: a trained network or a tabular stand-in.
pub trait Model {
    fn initial_inference(&self, obs: &Observation) -> Result<NetworkOutput, ModelError>;

    fn recurrent_inference(&self, latent: &LatentState, a: Action) -> Result<NetworkOutput, ModelError>;

    fn initial_inference_batch(&self, obs: &[Observation]) -> Result<Vec<NetworkOutput>, ModelError> {
        obs.iter().map(|o| self.initial_inference(o)).collect()
    }
}

impl<M: Model + ?Sized> Model for &M {
    fn initial_inference(&self, obs: &Observation) -> Result<NetworkOutput, ModelError> {
        (**self).initial_inference(obs)
    }
    fn recurrent_inference(&self, latent: &LatentState, a: Action) -> Result<NetworkOutput, ModelError> {
        (**self).recurrent_inference(latent, a)
    }
    fn initial_inference_batch(&self, obs: &[Observation]) -> Result<Vec<NetworkOutput>, ModelError> {
        (**self).initial_inference_batch(obs)
    }
}

pub fn softmax(logits: &[f64; CELLS]) -> [f64; CELLS] {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return [0.0; CELLS];
    }
    let mut out = logits.map(|l| libm::exp(l - max));
    let sum: f64 = out.iter().sum();
    for v in out.iter_mut() {
        *v /= sum;
    }
    out
}

/// `-cos(a, b)`, the similarity loss between a prediction and its target.
pub fn negative_cosine(a: &[f64], b: &[f64]) -> f64 {
    let (dot, na, nb) = cosine_parts(a, b);
    -dot / (na * nb)
}

const NORM_EPS: f64 = 1e-8;

fn cosine_parts<T: Scalar>(a: &[T], b: &[T]) -> (T, T, T) {
    let mut dot = T::zero();
    let mut na = T::zero();
    let mut nb = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    let eps = T::from_f64(NORM_EPS);
    (dot, na.sqrt().max(eps), nb.sqrt().max(eps))
}

/// Per-term loss, already averaged over the batch. `total` applies the
/// configured weights: `c1·policy + c2·value + c3·similarity + weight_decay`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub policy: f64,
    pub value: f64,
    pub similarity: f64,
    pub weight_decay: f64,
}

struct TowerCache<T> {
    input: Vec<T>,
    /// per block: (relu(h), relu(conv_a(relu(h))))
    blocks: Vec<(Vec<T>, Vec<T>)>,
    mm: MinMaxCache<T>,
    out: Vec<T>,
}

struct HeadsCache<T> {
    policy_act: Vec<T>,
    logits: Vec<T>,
    value_act: Vec<T>,
    value_hidden: Vec<T>,
    value: Vec<T>,
}

struct SimCache<T> {
    hidden1: Vec<T>,
    projection: Vec<T>,
    hidden2: Vec<T>,
    prediction: Vec<T>,
}

struct StepCache<T> {
    tower: TowerCache<T>,
    heads: HeadsCache<T>,
    sim: Option<SimCache<T>>,
}

/// Where the stop-gradient similarity targets come from.
enum TargetSource<'a, T: Scalar> {
    Online,
    Fixed(&'a Network<T>),
}

/// Samples processed together in one forward/backward pass.
const CHUNK: usize = 64;

#[derive(Debug, Clone)]
pub struct Network<T: Scalar> {
    cfg: NetworkConfig,
    arch: Arch,
    entries: Vec<ParamEntry>,
    params: Vec<T>,
}

impl<T: Scalar> Network<T> {
    pub fn new(cfg: NetworkConfig, seed: u64) -> Result<Network<T>, ModelError> {
        cfg.validate()?;
        let (arch, entries, len, outputs) = build_arch(&cfg);
        let mut params = vec![T::zero(); len];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (i, e) in entries.iter().enumerate() {
            if !e.name.ends_with(".weight") {
                continue;
            }
            let fan_in: usize = e.shape[..e.shape.len() - 1].iter().product();
            let gain = if outputs.contains(&i) { 1.0 } else { 2.0 };
            let std = libm::sqrt(gain / fan_in as f64);
            for p in &mut params[e.offset..e.offset + e.len()] {
                let z: f64 = StandardNormal.sample(&mut rng);
                *p = T::from_f64(z * std);
            }
        }
        Ok(Network { cfg, arch, entries, params })
    }

    pub fn from_params(cfg: NetworkConfig, params: Vec<T>) -> Result<Network<T>, ModelError> {
        cfg.validate()?;
        let (arch, entries, len, _) = build_arch(&cfg);
        if params.len() != len {
            return Err(ModelError::ShapeMismatch { expected: len, got: params.len() });
        }
        Ok(Network { cfg, arch, entries, params })
    }

    pub fn parameter_count(cfg: &NetworkConfig) -> usize {
        build_arch(cfg).2
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.cfg
    }

    /// Training hyperparameters may change; the architecture may not.
    pub fn set_training_config(&mut self, cfg: NetworkConfig) -> Result<(), ModelError> {
        if let Some(field) = self.cfg.architecture_mismatch(&cfg) {
            return Err(ModelError::ConfigMismatch { field });
        }
        self.cfg = cfg;
        Ok(())
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn squared_norm(&self) -> f64 {
        self.params.iter().map(|p| p.as_f64() * p.as_f64()).sum()
    }

    pub fn convert<U: Scalar>(&self) -> Network<U> {
        Network {
            cfg: self.cfg.clone(),
            arch: self.arch.clone(),
            entries: self.entries.clone(),
            params: self.params.iter().map(|p| U::from_f64(p.as_f64())).collect(),
        }
    }

    fn obs_input(obs: &[Observation]) -> Vec<T> {
        // planes are stored plane-major; the network wants [cell][plane]
        let mut x = vec![T::zero(); obs.len() * OBS_LEN];
        for (b, o) in obs.iter().enumerate() {
            for k in 0..PLANES {
                for c in 0..CELLS {
                    x[(b * CELLS + c) * PLANES + k] = T::from_f32(o.planes[k * CELLS + c]);
                }
            }
        }
        x
    }

    fn dynamics_input(&self, latent: &[T], actions: &[Action]) -> Vec<T> {
        let c = self.cfg.channels;
        let batch = actions.len();
        let mut x = vec![T::zero(); batch * CELLS * (c + 1)];
        for b in 0..batch {
            for pos in 0..CELLS {
                let dst = &mut x[(b * CELLS + pos) * (c + 1)..(b * CELLS + pos + 1) * (c + 1)];
                dst[..c].copy_from_slice(&latent[(b * CELLS + pos) * c..(b * CELLS + pos + 1) * c]);
                if actions[b].index() == pos {
                    dst[c] = T::one();
                }
            }
        }
        x
    }

    fn tower_forward(&self, tw: &Tower, input: Vec<T>, batch: usize) -> TowerCache<T> {
        let c = self.cfg.channels;
        let bn = self.cfg.bottleneck_channels;
        let p = &self.params;
        let mut h = vec![T::zero(); batch * CELLS * c];
        tw.input.forward(p, &input, batch, &mut h);
        let mut blocks = Vec::with_capacity(tw.blocks.len());
        for (ca, cb) in &tw.blocks {
            let a1 = relu(&h);
            let mut z = vec![T::zero(); batch * CELLS * bn];
            ca.forward(p, &a1, batch, &mut z);
            let a2 = relu(&z);
            let mut r = vec![T::zero(); batch * CELLS * c];
            cb.forward(p, &a2, batch, &mut r);
            let next: Vec<T> = h.iter().zip(&r).map(|(&x, &y)| x + y).collect();
            blocks.push((a1, a2));
            h = next;
        }
        let mut out = vec![T::zero(); h.len()];
        let mut mm = MinMaxCache::default();
        minmax_forward(&h, c * CELLS, &mut out, &mut mm);
        TowerCache { input, blocks, mm, out }
    }

    /// `dout` is the gradient with respect to the scaled tower output.
    fn tower_backward(
        &self,
        tw: &Tower,
        cache: &TowerCache<T>,
        mut dout: Vec<T>,
        batch: usize,
        g: &mut [T],
        want_dx: bool,
    ) -> Option<Vec<T>> {
        let c = self.cfg.channels;
        let bn = self.cfg.bottleneck_channels;
        let p = &self.params;
        minmax_backward(&cache.out, &mut dout, c * CELLS, &cache.mm);
        let mut dh = dout;
        for ((ca, cb), (a1, a2)) in tw.blocks.iter().zip(&cache.blocks).rev() {
            let mut da2 = vec![T::zero(); batch * CELLS * bn];
            cb.backward(p, a2, &dh, batch, g, Some(&mut da2));
            relu_backward(a2, &mut da2);
            let mut da1 = vec![T::zero(); batch * CELLS * c];
            ca.backward(p, a1, &da2, batch, g, Some(&mut da1));
            relu_backward(a1, &mut da1);
            for (d, &x) in dh.iter_mut().zip(&da1) {
                *d += x;
            }
        }
        if want_dx {
            let mut dx = vec![T::zero(); cache.input.len()];
            tw.input.backward(p, &cache.input, &dh, batch, g, Some(&mut dx));
            Some(dx)
        } else {
            tw.input.backward(p, &cache.input, &dh, batch, g, None);
            None
        }
    }

    fn heads_forward(&self, s: &[T], batch: usize) -> HeadsCache<T> {
        let a = &self.arch;
        let p = &self.params;
        let mut pc = vec![T::zero(); batch * CELLS * 2];
        a.policy_conv.forward(p, s, batch, &mut pc);
        let policy_act = relu(&pc);
        let mut logits = vec![T::zero(); batch * CELLS];
        a.policy_fc.forward(p, &policy_act, batch, &mut logits);
        let mut vc = vec![T::zero(); batch * CELLS];
        a.value_conv.forward(p, s, batch, &mut vc);
        let value_act = relu(&vc);
        let mut vh = vec![T::zero(); batch * self.cfg.channels];
        a.value_fc1.forward(p, &value_act, batch, &mut vh);
        let value_hidden = relu(&vh);
        let mut vo = vec![T::zero(); batch];
        a.value_fc2.forward(p, &value_hidden, batch, &mut vo);
        let value = vo.iter().map(|v| v.tanh()).collect();
        HeadsCache { policy_act, logits, value_act, value_hidden, value }
    }

    /// `dvalue` is with respect to the tanh output. Accumulates into `ds`.
    #[allow(clippy::too_many_arguments)]
    fn heads_backward(
        &self,
        s: &[T],
        cache: &HeadsCache<T>,
        dlogits: &[T],
        dvalue: &[T],
        batch: usize,
        g: &mut [T],
        ds: &mut [T],
    ) {
        let a = &self.arch;
        let p = &self.params;
        let mut dpa = vec![T::zero(); batch * CELLS * 2];
        a.policy_fc.backward(p, &cache.policy_act, dlogits, batch, g, Some(&mut dpa));
        relu_backward(&cache.policy_act, &mut dpa);
        a.policy_conv.backward(p, s, &dpa, batch, g, Some(ds));
        let dvo: Vec<T> = dvalue
            .iter()
            .zip(&cache.value)
            .map(|(&d, &v)| d * (T::one() - v * v))
            .collect();
        let mut dvh = vec![T::zero(); batch * self.cfg.channels];
        a.value_fc2.backward(p, &cache.value_hidden, &dvo, batch, g, Some(&mut dvh));
        relu_backward(&cache.value_hidden, &mut dvh);
        let mut dva = vec![T::zero(); batch * CELLS];
        a.value_fc1.backward(p, &cache.value_act, &dvh, batch, g, Some(&mut dva));
        relu_backward(&cache.value_act, &mut dva);
        a.value_conv.backward(p, s, &dva, batch, g, Some(ds));
    }

    fn project(&self, s: &[T], batch: usize) -> (Vec<T>, Vec<T>) {
        let a = &self.arch;
        let p = &self.params;
        let mut h1 = vec![T::zero(); batch * self.cfg.projector_hidden];
        a.proj1.forward(p, s, batch, &mut h1);
        let hidden1 = relu(&h1);
        let mut projection = vec![T::zero(); batch * self.cfg.projector_out];
        a.proj2.forward(p, &hidden1, batch, &mut projection);
        (hidden1, projection)
    }

    fn sim_forward(&self, s: &[T], batch: usize) -> SimCache<T> {
        let a = &self.arch;
        let p = &self.params;
        let (hidden1, projection) = self.project(s, batch);
        let mut h2 = vec![T::zero(); batch * self.cfg.predictor_hidden];
        a.pred1.forward(p, &projection, batch, &mut h2);
        let hidden2 = relu(&h2);
        let mut prediction = vec![T::zero(); batch * self.cfg.predictor_out];
        a.pred2.forward(p, &hidden2, batch, &mut prediction);
        SimCache { hidden1, projection, hidden2, prediction }
    }

    fn sim_backward(&self, s: &[T], cache: &SimCache<T>, dpred: &[T], batch: usize, g: &mut [T], ds: &mut [T]) {
        let a = &self.arch;
        let p = &self.params;
        let mut dh2 = vec![T::zero(); batch * self.cfg.predictor_hidden];
        a.pred2.backward(p, &cache.hidden2, dpred, batch, g, Some(&mut dh2));
        relu_backward(&cache.hidden2, &mut dh2);
        let mut dproj = vec![T::zero(); batch * self.cfg.projector_out];
        a.pred1.backward(p, &cache.projection, &dh2, batch, g, Some(&mut dproj));
        let mut dh1 = vec![T::zero(); batch * self.cfg.projector_hidden];
        a.proj2.backward(p, &cache.hidden1, &dproj, batch, g, Some(&mut dh1));
        relu_backward(&cache.hidden1, &mut dh1);
        a.proj1.backward(p, s, &dh1, batch, g, Some(ds));
    }

    fn represent(&self, obs: &[Observation]) -> TowerCache<T> {
        self.tower_forward(&self.arch.repr, Self::obs_input(obs), obs.len())
    }

    fn outputs(&self, latents: Vec<T>, heads: &HeadsCache<T>, batch: usize, tau: &[u32], t: &[u32]) -> Vec<NetworkOutput> {
        let width = self.cfg.latent_len();
        (0..batch)
            .map(|b| {
                let mut logits = [0.0f32; CELLS];
                for (i, l) in logits.iter_mut().enumerate() {
                    *l = heads.logits[b * CELLS + i].as_f32();
                }
                NetworkOutput {
                    policy_logits: logits,
                    value: heads.value[b].as_f32(),
                    latent: LatentState {
                        data: latents[b * width..(b + 1) * width].iter().map(|v| v.as_f32()).collect(),
                        t: t[b],
                        tau: tau[b],
                    },
                }
            })
            .collect()
    }

    pub fn initial_batch(&self, obs: &[Observation]) -> Vec<NetworkOutput> {
        let batch = obs.len();
        let tower = self.represent(obs);
        let heads = self.heads_forward(&tower.out, batch);
        self.outputs(tower.out, &heads, batch, &vec![0; batch], &vec![0; batch])
    }

    pub fn recurrent_batch(&self, latents: &[&LatentState], actions: &[Action]) -> Result<Vec<NetworkOutput>, ModelError> {
        let width = self.cfg.latent_len();
        let mut flat = Vec::with_capacity(latents.len() * width);
        for l in latents {
            if l.data.len() != width {
                return Err(ModelError::ShapeMismatch { expected: width, got: l.data.len() });
            }
            flat.extend(l.data.iter().map(|&v| T::from_f32(v)));
        }
        let batch = latents.len();
        let x = self.dynamics_input(&flat, actions);
        let tower = self.tower_forward(&self.arch.dynamics, x, batch);
        let heads = self.heads_forward(&tower.out, batch);
        let tau: Vec<u32> = latents.iter().map(|l| l.tau + 1).collect();
        let t: Vec<u32> = latents.iter().map(|l| l.t).collect();
        Ok(self.outputs(tower.out, &heads, batch, &tau, &t))
    }

    pub fn similarity_heads(&self, latent: &LatentState) -> Result<SimilarityVectors, ModelError> {
        let width = self.cfg.latent_len();
        if latent.data.len() != width {
            return Err(ModelError::ShapeMismatch { expected: width, got: latent.data.len() });
        }
        let s: Vec<T> = latent.data.iter().map(|&v| T::from_f32(v)).collect();
        let cache = self.sim_forward(&s, 1);
        Ok(SimilarityVectors {
            projection: cache.projection.iter().map(|v| v.as_f32()).collect(),
            prediction: cache.prediction.iter().map(|v| v.as_f32()).collect(),
        })
    }

    /// Batch-averaged loss without gradients.
    pub fn loss(&self, batch: &TrainingBatch) -> Result<LossBreakdown, ModelError> {
        self.loss_impl(batch, None, TargetSource::Online)
    }

    /// Batch-averaged loss; its gradient is added into `grad`.
    pub fn loss_and_grad(&self, batch: &TrainingBatch, grad: &mut [T]) -> Result<LossBreakdown, ModelError> {
        self.loss_impl(batch, Some(grad), TargetSource::Online)
    }

    /// As [`Network::loss_and_grad`] but with similarity targets produced by
    /// `target` instead of by `self`.
    pub fn loss_and_grad_with_target(
        &self,
        batch: &TrainingBatch,
        target: &Network<T>,
        grad: &mut [T],
    ) -> Result<LossBreakdown, ModelError> {
        self.loss_impl(batch, Some(grad), TargetSource::Fixed(target))
    }

    fn loss_impl(
        &self,
        batch: &TrainingBatch,
        mut grad: Option<&mut [T]>,
        targets: TargetSource<'_, T>,
    ) -> Result<LossBreakdown, ModelError> {
        if let Some(g) = grad.as_deref() {
            if g.len() != self.params.len() {
                return Err(ModelError::ShapeMismatch { expected: self.params.len(), got: g.len() });
            }
        }
        let k = batch.unroll_steps;
        let n = batch.samples.len();
        let mut parts = LossBreakdown::default();
        if n > 0 {
            for chunk in batch.samples.chunks(CHUNK) {
                let target_net = match targets {
                    TargetSource::Online => self,
                    TargetSource::Fixed(t) => t,
                };
                let c = self.chunk_loss(chunk, k, n, grad.as_deref_mut(), target_net)?;
                parts.policy += c.policy;
                parts.value += c.value;
                parts.similarity += c.similarity;
            }
        }
        let c4 = self.cfg.weight_decay;
        parts.weight_decay = c4 * self.squared_norm();
        if let Some(g) = grad {
            let two_c4 = T::from_f64(2.0 * c4);
            for (gi, &p) in g.iter_mut().zip(&self.params) {
                *gi += two_c4 * p;
            }
        }
        parts.total = self.cfg.c1 * parts.policy
            + self.cfg.c2 * parts.value
            + self.cfg.c3 * parts.similarity
            + parts.weight_decay;
        let terms = [
            ("total loss", parts.total),
            ("policy loss", parts.policy),
            ("value loss", parts.value),
            ("similarity loss", parts.similarity),
        ];
        for (what, v) in terms {
            if !v.is_finite() {
                return Err(ModelError::NonFinite { what: format!("{what} ({v})") });
            }
        }
        Ok(parts)
    }

    fn chunk_loss(
        &self,
        samples: &[TrainingSample],
        k: usize,
        total: usize,
        mut grad: Option<&mut [T]>,
        target_net: &Network<T>,
    ) -> Result<LossBreakdown, ModelError> {
        let batch = samples.len();
        let width = self.cfg.latent_len();
        let c = self.cfg.channels;
        for s in samples {
            if s.actions.len() != k
                || s.policy_targets.len() != k + 1
                || s.policy_mask.len() != k + 1
                || s.value_targets.len() != k + 1
                || s.target_observations.len() != k
            {
                return Err(ModelError::ShapeMismatch { expected: k, got: s.actions.len() });
            }
        }
        let obs: Vec<Observation> = samples.iter().map(|s| s.observation).collect();
        let mut steps: Vec<StepCache<T>> = Vec::with_capacity(k + 1);
        let tower = self.represent(&obs);
        let heads = self.heads_forward(&tower.out, batch);
        steps.push(StepCache { tower, heads, sim: None });
        for tau in 1..=k {
            let actions: Vec<Action> = samples.iter().map(|s| s.actions[tau - 1]).collect();
            let x = self.dynamics_input(&steps[tau - 1].tower.out, &actions);
            let tower = self.tower_forward(&self.arch.dynamics, x, batch);
            let heads = self.heads_forward(&tower.out, batch);
            let sim = self.sim_forward(&tower.out, batch);
            steps.push(StepCache { tower, heads, sim: Some(sim) });
        }
        // stop-gradient targets: forward only, never differentiated
        let mut sim_targets: Vec<Vec<T>> = Vec::with_capacity(k);
        for tau in 1..=k {
            let tobs: Vec<Observation> = samples.iter().map(|s| s.target_observations[tau - 1]).collect();
            let t = target_net.represent(&tobs);
            sim_targets.push(target_net.project(&t.out, batch).1);
        }

        let cfg = &self.cfg;
        let inv_n = 1.0 / total as f64;
        let step_weight = |tau: usize| if tau == 0 { 1.0 } else { 1.0 / k as f64 };
        let mut parts = LossBreakdown::default();
        let po = cfg.projector_out;

        // loss and output gradients per step
        let mut dlogits: Vec<Vec<T>> = Vec::with_capacity(k + 1);
        let mut dvalues: Vec<Vec<T>> = Vec::with_capacity(k + 1);
        let mut dpreds: Vec<Vec<T>> = Vec::with_capacity(k + 1);
        for (tau, step) in steps.iter().enumerate() {
            let w = step_weight(tau);
            let mut dl = vec![T::zero(); batch * CELLS];
            let mut dv = vec![T::zero(); batch];
            let mut dp = Vec::new();
            for (b, s) in samples.iter().enumerate() {
                if s.policy_mask[tau] {
                    let logits: Vec<f64> = step.heads.logits[b * CELLS..(b + 1) * CELLS].iter().map(|v| v.as_f64()).collect();
                    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let lse = max + libm::log(logits.iter().map(|l| libm::exp(l - max)).sum::<f64>());
                    let target = &s.policy_targets[tau];
                    let tsum: f64 = target.iter().map(|&p| p as f64).sum();
                    let mut ce = 0.0;
                    for i in 0..CELLS {
                        let pi = target[i] as f64;
                        if pi > 0.0 {
                            ce -= pi * (logits[i] - lse);
                        }
                        let p = libm::exp(logits[i] - lse);
                        dl[b * CELLS + i] = T::from_f64(w * cfg.c1 * inv_n * (tsum * p - pi));
                    }
                    parts.policy += w * ce * inv_n;
                }
                let v = step.heads.value[b].as_f64();
                let z = s.value_targets[tau] as f64;
                parts.value += w * (v - z) * (v - z) * inv_n;
                dv[b] = T::from_f64(w * cfg.c2 * inv_n * 2.0 * (v - z));
            }
            if let Some(sim) = &step.sim {
                dp = vec![T::zero(); batch * po];
                let targets = &sim_targets[tau - 1];
                for b in 0..batch {
                    let pred = &sim.prediction[b * po..(b + 1) * po];
                    let tgt = &targets[b * po..(b + 1) * po];
                    let (dot, na, nb) = cosine_parts(pred, tgt);
                    let cos = dot / (na * nb);
                    parts.similarity += -w * cos.as_f64() * inv_n;
                    // d(-cos)/dpred = -(tgt/(|p||t|) - cos * pred/|p|^2)
                    let scale = T::from_f64(w * cfg.c3 * inv_n);
                    for i in 0..po {
                        let d = -(tgt[i] / (na * nb) - cos * pred[i] / (na * na));
                        dp[b * po + i] = scale * d;
                    }
                }
            }
            dlogits.push(dl);
            dvalues.push(dv);
            dpreds.push(dp);
        }

        let Some(g) = grad.as_deref_mut() else { return Ok(parts) };
        let scale = T::from_f64(cfg.dynamics_grad_scale);
        let mut ds = vec![T::zero(); batch * width];
        for tau in (0..=k).rev() {
            let step = &steps[tau];
            let s = &step.tower.out;
            self.heads_backward(s, &step.heads, &dlogits[tau], &dvalues[tau], batch, g, &mut ds);
            if let Some(sim) = &step.sim {
                self.sim_backward(s, sim, &dpreds[tau], batch, g, &mut ds);
            }
            if tau > 0 {
                let dx = self
                    .tower_backward(&self.arch.dynamics, &step.tower, ds, batch, g, true)
                    .expect("dynamics input gradient");
                let mut prev = vec![T::zero(); batch * width];
                for r in 0..batch * CELLS {
                    let src = &dx[r * (c + 1)..r * (c + 1) + c];
                    axpy(&mut prev[r * c..(r + 1) * c], scale, src);
                }
                ds = prev;
            } else {
                self.tower_backward(&self.arch.repr, &step.tower, core::mem::take(&mut ds), batch, g, false);
            }
        }
        Ok(parts)
    }
}

impl Model for Network<f32> {
    fn initial_inference(&self, obs: &Observation) -> Result<NetworkOutput, ModelError> {
        Ok(self.initial_batch(core::slice::from_ref(obs)).remove(0))
    }

    fn recurrent_inference(&self, latent: &LatentState, a: Action) -> Result<NetworkOutput, ModelError> {
        Ok(self.recurrent_batch(&[latent], &[a])?.remove(0))
    }

    fn initial_inference_batch(&self, obs: &[Observation]) -> Result<Vec<NetworkOutput>, ModelError> {
        Ok(self.initial_batch(obs))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> AdamState {
        AdamState { m: vec![0.0; len], v: vec![0.0; len], step: 0 }
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Network weights, optimiser state and the epoch that produced them.
#[derive(Debug, Clone)]
pub struct ModelParameters {
    pub network: Network<f32>,
    pub optimizer: AdamState,
    pub epoch: u32,
}

impl ModelParameters {
    pub fn new(cfg: NetworkConfig, seed: u64) -> Result<ModelParameters, ModelError> {
        let network = Network::new(cfg, seed)?;
        let optimizer = AdamState::new(network.params().len());
        Ok(ModelParameters { network, optimizer, epoch: 0 })
    }

    /// One Adam step on the full loss. The `c4 ||θ||²` term is part of the
    /// differentiated loss, so decay is coupled to the adaptive update.
    pub fn train_step(&mut self, batch: &TrainingBatch) -> Result<LossBreakdown, ModelError> {
        let len = self.network.params.len();
        let mut grad = vec![0.0f32; len];
        let loss = self.network.loss_and_grad(batch, &mut grad)?;
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(ModelError::NonFinite { what: format!("gradient at parameter {i}") });
        }
        let st = &mut self.optimizer;
        st.step += 1;
        let lr = self.network.cfg.learning_rate;
        let bc1 = 1.0 - libm::pow(ADAM_BETA1, st.step as f64);
        let bc2 = 1.0 - libm::pow(ADAM_BETA2, st.step as f64);
        let (b1, b2) = (ADAM_BETA1 as f32, ADAM_BETA2 as f32);
        let step_size = (lr / bc1) as f32;
        let bc2_sqrt = libm::sqrt(bc2) as f32;
        let eps = ADAM_EPS as f32;
        for i in 0..len {
            let g = grad[i];
            st.m[i] = b1 * st.m[i] + (1.0 - b1) * g;
            st.v[i] = b2 * st.v[i] + (1.0 - b2) * g * g;
            let denom = libm::sqrtf(st.v[i]) / bc2_sqrt + eps;
            self.network.params[i] -= step_size * st.m[i] / denom;
        }
        Ok(loss)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experience::tests::random_batch;
    use crate::game::GameState;

    /// Parameter count written out layer by layer.
    fn counted(cfg: &NetworkConfig) -> usize {
        let conv = |k: usize, i: usize, o: usize| k * i * o + o;
        let dense = |i: usize, o: usize| i * o + o;
        let (c, b, r) = (cfg.channels, cfg.bottleneck_channels, cfg.residual_blocks);
        let blocks = r * (conv(9, c, b) + conv(9, b, c));
        let repr = conv(9, 3, c) + blocks;
        let dynamics = conv(9, c + 1, c) + blocks;
        let policy = conv(1, c, 2) + dense(18, 9);
        let value = conv(1, c, 1) + dense(9, c) + dense(c, 1);
        let projector = dense(9 * c, cfg.projector_hidden) + dense(cfg.projector_hidden, cfg.projector_out);
        let predictor = dense(cfg.projector_out, cfg.predictor_hidden) + dense(cfg.predictor_hidden, cfg.predictor_out);
        repr + dynamics + policy + value + projector + predictor
    }

    #[test]
    fn parameter_counts_are_stable() {
        for (cfg, frozen) in [
            (NetworkConfig::micro(), 731),
            (NetworkConfig::desk(), 74_959),
            (NetworkConfig::paper(), 9_339_557),
        ] {
            assert_eq!(Network::<f32>::parameter_count(&cfg), counted(&cfg));
            assert_eq!(Network::<f32>::parameter_count(&cfg), frozen);
        }
    }

    #[test]
    fn outputs_honor_contract() {
        let net = Network::<f32>::new(NetworkConfig::micro(), 1).unwrap();
        let mut s = GameState::new();
        for a in [4, 0, 8] {
            let out = net.initial_inference(&s.observe()).unwrap();
            let sum: f64 = out.policy().iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
            assert!(out.value.abs() <= 1.0);
            assert_eq!(out.latent.tau, 0);
            s = s.apply_action(Action::new(a).unwrap()).unwrap();
        }
    }

    #[test]
    fn recurrent_chain_stays_finite() {
        let net = Network::<f32>::new(NetworkConfig::desk(), 2).unwrap();
        let mut out = net.initial_inference(&GameState::new().observe()).unwrap();
        for step in 1..=5u32 {
            out = net.recurrent_inference(&out.latent, Action::new(step as usize).unwrap()).unwrap();
            assert_eq!(out.latent.tau, step);
            assert!(out.value.is_finite() && out.value.abs() <= 1.0);
            assert!(out.policy_logits.iter().all(|l| l.is_finite()));
            assert!(out.latent.data.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn recurrent_rejects_wrong_latent_shape() {
        let net = Network::<f32>::new(NetworkConfig::micro(), 1).unwrap();
        let bad = LatentState { data: vec![0.0; 3], t: 0, tau: 0 };
        assert!(matches!(
            net.recurrent_inference(&bad, Action::new(0).unwrap()),
            Err(ModelError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn batched_and_single_inference_agree_bitwise() {
        let net = Network::<f32>::new(NetworkConfig::micro(), 4).unwrap();
        let states: Vec<Observation> = [vec![], vec![4], vec![4, 0]]
            .iter()
            .map(|a: &Vec<usize>| {
                GameState::from_actions(&a.iter().map(|&c| Action::new(c).unwrap()).collect::<Vec<_>>())
                    .unwrap()
                    .observe()
            })
            .collect();
        let batch = net.initial_inference_batch(&states).unwrap();
        for (o, b) in states.iter().zip(&batch) {
            assert_eq!(&net.initial_inference(o).unwrap(), b);
        }
    }

    #[test]
    fn similarity_heads_are_deterministic() {
        let net = Network::<f32>::new(NetworkConfig::micro(), 5).unwrap();
        let l = net.initial_inference(&GameState::new().observe()).unwrap().latent;
        let a = net.similarity_heads(&l).unwrap();
        let b = net.similarity_heads(&l.clone()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.projection.len(), 4);
        assert!(a.prediction.iter().all(|v| v.is_finite()));
        let p = [0.3, -1.2, 0.7];
        assert!((negative_cosine(&p, &p) + 1.0).abs() < 1e-12);
        assert_eq!(negative_cosine(&[1.0, 0.0], &[0.0, 2.0]), 0.0);
    }

    #[test]
    fn zero_loss_weights_leave_weight_decay() {
        let mut cfg = NetworkConfig::micro();
        cfg.c1 = 0.0;
        cfg.c2 = 0.0;
        cfg.c3 = 0.0;
        let net = Network::<f64>::new(cfg, 3).unwrap();
        let batch = random_batch(4, 2, 17);
        let l = net.loss(&batch).unwrap();
        let expected = 1e-4 * net.squared_norm();
        assert!((l.total - expected).abs() < 1e-15);
    }

    #[test]
    fn self_consistent_targets_hit_entropy_floor() {
        let net = Network::<f64>::new(NetworkConfig::micro(), 8).unwrap();
        let mut batch = random_batch(3, 0, 21);
        let mut entropy = 0.0;
        for s in batch.samples.iter_mut() {
            let out = net.convert::<f32>().initial_inference(&s.observation).unwrap();
            let all = net.initial_batch(core::slice::from_ref(&s.observation));
            let p = all[0].policy();
            s.policy_targets[0] = p.map(|v| v as f32);
            s.policy_mask[0] = true;
            s.value_targets[0] = out.value;
            entropy += crate::oracle::entropy(&s.policy_targets[0].map(|v| v as f64));
        }
        let l = net.loss(&batch).unwrap();
        assert!((l.policy - entropy / 3.0).abs() < 1e-6, "{} vs {}", l.policy, entropy / 3.0);
        assert!(l.value < 1e-12);
    }

    #[test]
    fn zero_unroll_reduces_to_initial_terms() {
        let mut cfg = NetworkConfig::micro();
        cfg.unroll_steps = 0;
        let net = Network::<f64>::new(cfg, 3).unwrap();
        let batch = random_batch(4, 0, 5);
        let l = net.loss(&batch).unwrap();
        assert_eq!(l.similarity, 0.0);
        let l0 = l.total - l.weight_decay;
        assert!((l0 - (l.policy + l.value)).abs() < 1e-12);
    }

    #[test]
    fn lr_zero_leaves_parameters_bit_identical() {
        let mut cfg = NetworkConfig::micro();
        cfg.learning_rate = 0.0;
        let mut mp = ModelParameters::new(cfg, 9).unwrap();
        let before = mp.network.params().to_vec();
        mp.train_step(&random_batch(4, 2, 1)).unwrap();
        assert_eq!(before, mp.network.params());
    }

    #[test]
    fn identical_seeds_give_identical_trajectories() {
        let run = || {
            let mut mp = ModelParameters::new(NetworkConfig::micro(), 10).unwrap();
            for i in 0..3 {
                mp.train_step(&random_batch(6, 2, 100 + i)).unwrap();
            }
            mp.network.params().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn overfits_a_fixed_batch() {
        let mut cfg = NetworkConfig::micro();
        cfg.channels = 8;
        cfg.bottleneck_channels = 4;
        cfg.learning_rate = 1e-3;
        let mut mp = ModelParameters::new(cfg.clone(), 12).unwrap();
        let batch = random_batch(8, 2, 33);
        let mut supervised = Vec::new();
        let mut total = Vec::new();
        for _ in 0..200 {
            let l = mp.train_step(&batch).unwrap();
            supervised.push(cfg.c1 * l.policy + cfg.c2 * l.value + l.weight_decay);
            total.push(l.total);
        }
        // the similarity target moves with the weights, so only the
        // supervised part is a fixed objective
        for i in 21..200 {
            assert!(supervised[i] <= supervised[i - 1] + 1e-6, "rose at step {i}");
        }
        assert!(total[199] < 0.5 * total[20], "{} -> {}", total[20], total[199]);
    }

    #[test]
    fn nonfinite_loss_aborts() {
        let mut net = Network::<f64>::new(NetworkConfig::micro(), 3).unwrap();
        net.params_mut()[0] = f64::NAN;
        let batch = random_batch(2, 1, 1);
        assert!(matches!(net.loss(&batch), Err(ModelError::NonFinite { .. })));
    }

    #[test]
    fn training_config_change_rejects_architecture_change() {
        let mut net = Network::<f32>::new(NetworkConfig::micro(), 3).unwrap();
        let mut cfg = NetworkConfig::micro();
        cfg.learning_rate = 0.5;
        net.set_training_config(cfg.clone()).unwrap();
        cfg.channels = 5;
        assert_eq!(
            net.set_training_config(cfg),
            Err(ModelError::ConfigMismatch { field: "channels" })
        );
    }

    fn fd_check(cfg: NetworkConfig, seed: u64, unroll: usize) -> (f64, usize) {
        // zero biases put some ReLUs exactly on their kink; jitter them off
        let mut net = Network::<f64>::new(cfg, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        for p in net.params_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *p += 0.05 * z;
        }
        let net = net;
        let frozen = net.clone();
        let batch = random_batch(3, unroll, seed + 1);
        // cosine is not differentiable at a zero prediction
        for smp in &batch.samples {
            let mut l = net.convert::<f32>().initial_inference(&smp.observation).unwrap().latent;
            for &a in &smp.actions {
                l = net.convert::<f32>().recurrent_inference(&l, a).unwrap().latent;
                let p = net.convert::<f32>().similarity_heads(&l).unwrap().prediction;
                assert!(p.iter().map(|v| v * v).sum::<f32>() > 1e-6, "degenerate prediction");
            }
        }
        let mut grad = vec![0.0; net.params().len()];
        net.loss_and_grad_with_target(&batch, &frozen, &mut grad).unwrap();
        let h = 1e-6;
        let mut worst = 0.0f64;
        let mut worst_at = 0;
        for i in 0..grad.len() {
            let mut plus = net.clone();
            plus.params_mut()[i] += h;
            let mut minus = net.clone();
            minus.params_mut()[i] -= h;
            let lp = plus.loss_impl(&batch, None, TargetSource::Fixed(&frozen)).unwrap().total;
            let lm = minus.loss_impl(&batch, None, TargetSource::Fixed(&frozen)).unwrap().total;
            let numeric = (lp - lm) / (2.0 * h);
            let rel = (grad[i] - numeric).abs() / grad[i].abs().max(numeric.abs()).max(GRAD_FLOOR);
            if rel > worst {
                worst = rel;
                worst_at = i;
            }
        }
        (worst, worst_at)
    }

    /// Gradients smaller than this are compared absolutely.
    const GRAD_FLOOR: f64 = 1e-6;

    fn micro_unscaled() -> NetworkConfig {
        NetworkConfig { dynamics_grad_scale: 1.0, ..NetworkConfig::micro() }
    }

    #[test]
    fn gradient_matches_finite_differences_per_term() {
        let terms: [(&str, [f64; 4]); 5] = [
            ("total", [1.0, 1.0, 2.0, 1e-4]),
            ("policy", [1.0, 0.0, 0.0, 0.0]),
            ("value", [0.0, 1.0, 0.0, 0.0]),
            ("similarity", [0.0, 0.0, 1.0, 0.0]),
            ("weight decay", [0.0, 0.0, 0.0, 1e-2]),
        ];
        for (name, [c1, c2, c3, c4]) in terms {
            for seed in [1, 2, 3] {
                let cfg = NetworkConfig { c1, c2, c3, weight_decay: c4, ..micro_unscaled() };
                let (worst, at) = fd_check(cfg, seed, 2);
                assert!(worst < 1e-3, "{name} seed {seed}: relative error {worst} at parameter {at}");
            }
        }
    }

    #[test]
    fn dynamics_gradient_scaling_is_linear_for_one_step() {
        let batch = random_batch(4, 1, 7);
        let grad_at = |scale: f64| {
            let cfg = NetworkConfig { dynamics_grad_scale: scale, ..NetworkConfig::micro() };
            let net = Network::<f64>::new(cfg, 3).unwrap();
            let mut g = vec![0.0; net.params().len()];
            net.loss_and_grad(&batch, &mut g).unwrap();
            (net, g)
        };
        let (net, g_half) = grad_at(0.5);
        let (_, g_one) = grad_at(1.0);
        let (_, g_zero) = grad_at(0.0);
        for e in net.entries() {
            for i in e.offset..e.offset + e.len() {
                if e.name.starts_with("representation") {
                    let mid = 0.5 * (g_one[i] + g_zero[i]);
                    assert!((g_half[i] - mid).abs() <= 1e-12 * mid.abs().max(1.0), "{}", e.name);
                } else {
                    assert_eq!(g_half[i], g_one[i], "{}", e.name);
                }
            }
        }
        assert!(net.entries().iter().any(|e| e.name.starts_with("representation")));
    }

    #[test]
    fn similarity_target_branch_receives_no_gradient() {
        let cfg = NetworkConfig { c1: 0.0, c2: 0.0, c3: 1.0, weight_decay: 0.0, ..micro_unscaled() };
        let net = Network::<f64>::new(cfg, 4).unwrap();
        let batch = random_batch(3, 2, 9);
        let mut online = vec![0.0; net.params().len()];
        net.loss_and_grad(&batch, &mut online).unwrap();
        // targets from a separate copy: identical gradient for the online
        // weights, and the copy itself is never differentiated
        let copy = net.clone();
        let mut fixed = vec![0.0; net.params().len()];
        net.loss_and_grad_with_target(&batch, &copy, &mut fixed).unwrap();
        assert_eq!(online, fixed);
        // perturbing the target branch changes the loss but the gradient
        // still flows only through the prediction branch
        let mut shifted = net.clone();
        for p in shifted.params_mut() {
            *p *= 1.1;
        }
        let a = net.loss_impl(&batch, None, TargetSource::Fixed(&copy)).unwrap().similarity;
        let b = net.loss_impl(&batch, None, TargetSource::Fixed(&shifted)).unwrap().similarity;
        assert_ne!(a, b);
        // a full derivative that also moved the target would differ from the
        // stopped one on the projector weights
        let h = 1e-6;
        let proj = net.entries().iter().find(|e| e.name == "projector.fc1.weight").unwrap();
        let mut differs = false;
        for i in proj.offset..proj.offset + proj.len() {
            let mut plus = net.clone();
            plus.params_mut()[i] += h;
            let mut minus = net.clone();
            minus.params_mut()[i] -= h;
            let full = (plus.loss(&batch).unwrap().similarity - minus.loss(&batch).unwrap().similarity) / (2.0 * h);
            if (full - online[i]).abs() > 1e-4 {
                differs = true;
            }
        }
        assert!(differs);
    }
}
