//! Gumbel root search with sequential halving and deterministic non-root
//! selection over the model's in-mind states.

use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Gamma, Gumbel};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::game::{Action, ActionSet, Observation, CELLS};
use crate::model::{LatentState, Model, ModelError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PlanError {
    #[error("no legal actions at the root")]
    NoLegalActions,
    #[error("invalid plan config: {0}")]
    InvalidConfig(&'static str),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GumbelMode {
    /// i.i.d. standard Gumbel draws
    Sampled,
    /// `g = 0`, the eager playout
    Zero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanConfig {
    pub simulations: usize,
    pub candidates: usize,
    pub c_visit: f64,
    pub c_scale: f64,
    pub dirichlet_alpha: f64,
    pub dirichlet_fraction: f64,
    /// `0` stands for the limit `T -> 0`
    pub prior_temperature: f64,
    pub gumbel_mode: GumbelMode,
}

impl Default for PlanConfig {
    fn default() -> Self {
        PlanConfig {
            simulations: 20,
            candidates: 4,
            c_visit: 20.0,
            c_scale: 1.0,
            dirichlet_alpha: 1.2,
            dirichlet_fraction: 0.25,
            prior_temperature: 1.0,
            gumbel_mode: GumbelMode::Sampled,
        }
    }
}

impl PlanConfig {
    pub fn validate(&self) -> Result<(), PlanError> {
        if self.candidates < 2 {
            return Err(PlanError::InvalidConfig("candidates must be at least 2"));
        }
        if self.simulations < self.candidates {
            return Err(PlanError::InvalidConfig("simulations must be at least candidates"));
        }
        if !(0.0..=1.0).contains(&self.dirichlet_fraction) {
            return Err(PlanError::InvalidConfig("dirichlet_fraction must lie in [0, 1]"));
        }
        if !(self.dirichlet_alpha > 0.0) {
            return Err(PlanError::InvalidConfig("dirichlet_alpha must be positive"));
        }
        if self.prior_temperature.is_nan() || self.prior_temperature < 0.0 {
            return Err(PlanError::InvalidConfig("prior_temperature must be non-negative"));
        }
        if self.c_visit < 0.0 || self.c_scale < 0.0 {
            return Err(PlanError::InvalidConfig("c_visit and c_scale must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanResult {
    pub chosen_action: Action,
    /// softmax((logits + σ(Q_completed)) / T_prior) over legal actions
    pub improved_policy: [f64; CELLS],
    /// `(logits + σ) / T_prior`, `-inf` on illegal actions; its softmax is
    /// `improved_policy`
    pub improved_logits: [f64; CELLS],
    /// `v_mix` of the root
    pub improved_value: f64,
    /// `v^0` from initial inference
    pub root_value: f64,
    pub visit_counts: [u32; CELLS],
    pub completed_q: [f64; CELLS],
    /// root logits after masking and noise
    pub prior_logits: [f64; CELLS],
    pub gumbel: [f64; CELLS],
    pub legal: ActionSet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchNode {
    pub latent: LatentState,
    /// `-inf` marks masked actions
    pub logits: [f64; CELLS],
    pub prior: [f64; CELLS],
    pub value: f64,
    pub visits: [u32; CELLS],
    /// backed-up values from this node's perspective
    pub value_sums: [f64; CELLS],
    pub children: [Option<usize>; CELLS],
}

impl SearchNode {
    pub fn new(latent: LatentState, logits: [f64; CELLS], value: f64) -> SearchNode {
        SearchNode {
            latent,
            prior: softmax(&logits),
            logits,
            value,
            visits: [0; CELLS],
            value_sums: [0.0; CELLS],
            children: [None; CELLS],
        }
    }

    pub fn total_visits(&self) -> u32 {
        self.visits.iter().sum()
    }

    pub fn max_visits(&self) -> u32 {
        self.visits.iter().copied().max().unwrap_or(0)
    }

    pub fn q(&self, a: usize) -> Option<f64> {
        (self.visits[a] > 0).then(|| self.value_sums[a] / self.visits[a] as f64)
    }
}

pub fn softmax(logits: &[f64; CELLS]) -> [f64; CELLS] {
    crate::model::softmax(logits)
}

/// `σ(q) = (c_visit + max_visit) · c_scale · q` on a normalised `q`.
pub fn sigma(q: f64, max_visit: u32, cfg: &PlanConfig) -> f64 {
    (cfg.c_visit + max_visit as f64) * cfg.c_scale * q
}

/// `(v + ΣN · Σ_visited π q / Σ_visited π) / (1 + ΣN)`.
pub fn v_mix(node: &SearchNode) -> f64 {
    let total = node.total_visits();
    if total == 0 {
        return node.value;
    }
    let mut weighted = 0.0;
    let mut mass = 0.0;
    for a in 0..CELLS {
        if let Some(q) = node.q(a) {
            weighted += node.prior[a] * q;
            mass += node.prior[a];
        }
    }
    let avg = if mass > 0.0 {
        weighted / mass
    } else {
        // visited actions all carry zero prior
        (0..CELLS).filter_map(|a| node.q(a)).sum::<f64>() / (0..CELLS).filter(|&a| node.visits[a] > 0).count() as f64
    };
    (node.value + total as f64 * avg) / (1.0 + total as f64)
}

/// Empirical q for visited actions, `v_mix` for the rest.
pub fn completed_q(node: &SearchNode) -> [f64; CELLS] {
    let mix = v_mix(node);
    core::array::from_fn(|a| node.q(a).unwrap_or(mix))
}

/// Running bounds of every value estimate seen in one tree.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValueBounds {
    pub min: f64,
    pub max: f64,
}

impl Default for ValueBounds {
    fn default() -> Self {
        ValueBounds { min: f64::INFINITY, max: f64::NEG_INFINITY }
    }
}

impl ValueBounds {
    pub fn update(&mut self, v: f64) {
        self.min = self.min.min(v);
        self.max = self.max.max(v);
    }

    /// Maps into `[0, 1]`; a degenerate range maps everything to 0.
    pub fn normalize(&self, v: f64) -> f64 {
        let range = self.max - self.min;
        if range > 1e-12 {
            ((v - self.min) / range).clamp(0.0, 1.0)
        } else {
            0.0
        }
    }
}

/// `σ` of the node's completed q values, normalised over the tree bounds
/// widened by the node's own completed values.
pub fn sigma_completed(node: &SearchNode, tree: &ValueBounds, cfg: &PlanConfig) -> [f64; CELLS] {
    let cq = completed_q(node);
    let mut bounds = *tree;
    for (a, &q) in cq.iter().enumerate() {
        if node.logits[a] > f64::NEG_INFINITY {
            bounds.update(q);
        }
    }
    let max_visit = node.max_visits();
    cq.map(|q| sigma(bounds.normalize(q), max_visit, cfg))
}

/// softmax of `(logits + σ) / temperature`; temperature 0 gives the
/// point mass on the argmax (lowest index on ties).
pub fn improved_policy(logits: &[f64; CELLS], sigma: &[f64; CELLS], temperature: f64) -> [f64; CELLS] {
    softmax(&improved_logits(logits, sigma, temperature))
}

pub fn improved_logits(logits: &[f64; CELLS], sigma: &[f64; CELLS], temperature: f64) -> [f64; CELLS] {
    let z: [f64; CELLS] = core::array::from_fn(|a| logits[a] + sigma[a]);
    if temperature > 0.0 {
        z.map(|v| v / temperature)
    } else {
        let best = argmax(&z);
        core::array::from_fn(|a| if a == best { 0.0 } else { f64::NEG_INFINITY })
    }
}

/// Lowest index among the maxima.
pub fn argmax(v: &[f64; CELLS]) -> usize {
    let mut best = 0;
    for a in 1..CELLS {
        if v[a] > v[best] {
            best = a;
        }
    }
    best
}

/// `argmax_a π'(a) − N(a) / (1 + ΣN)`, ties to the lowest index.
pub fn non_root_select(improved: &[f64; CELLS], visits: &[u32; CELLS]) -> Action {
    let total: u32 = visits.iter().sum();
    let score: [f64; CELLS] = core::array::from_fn(|a| improved[a] - visits[a] as f64 / (1.0 + total as f64));
    Action::new(argmax(&score)).expect("cell index")
}

/// `(1 − f)·prior + f·Dir(α)` over the legal actions, renormalised.
pub fn mix_dirichlet<R: Rng + ?Sized>(
    prior: &[f64; CELLS],
    legal: ActionSet,
    alpha: f64,
    fraction: f64,
    rng: &mut R,
) -> [f64; CELLS] {
    let mut out = [0.0; CELLS];
    if fraction > 0.0 {
        let gamma = Gamma::new(alpha, 1.0).expect("positive alpha");
        let mut noise = [0.0; CELLS];
        let mut sum = 0.0;
        for a in legal.iter() {
            let x: f64 = gamma.sample(rng);
            noise[a.index()] = x;
            sum += x;
        }
        for a in legal.iter() {
            let i = a.index();
            let n = if sum > 0.0 { noise[i] / sum } else { 1.0 / legal.len() as f64 };
            out[i] = (1.0 - fraction) * prior[i] + fraction * n;
        }
    } else {
        for a in legal.iter() {
            out[a.index()] = prior[a.index()];
        }
    }
    let total: f64 = out.iter().sum();
    if (total - 1.0).abs() < 1e-12 {
        // already normalised up to rounding
    } else if total > 0.0 {
        out.iter_mut().for_each(|p| *p /= total);
    } else {
        for a in legal.iter() {
            out[a.index()] = 1.0 / legal.len() as f64;
        }
    }
    out
}

/// Gumbel perturbations for the legal actions; zero elsewhere.
pub fn gumbel_sample<R: Rng + ?Sized>(legal: ActionSet, mode: GumbelMode, rng: &mut R) -> [f64; CELLS] {
    let mut g = [0.0; CELLS];
    if mode == GumbelMode::Sampled {
        let dist = Gumbel::new(0.0, 1.0).expect("unit scale");
        for a in legal.iter() {
            g[a.index()] = dist.sample(rng);
        }
    }
    g
}

/// Number of halving phases for `m` candidates, `ceil(log2 m)`.
pub fn halving_phases(m: usize) -> usize {
    let mut phases = 0;
    let mut k = m;
    while k > 1 {
        k = k.div_ceil(2);
        phases += 1;
    }
    phases
}

/// Simulations per phase as `(candidates in phase, visits per candidate)`,
/// with any leftover spread over the last phase in rank order. Returns the
/// per-rank visit counts for each phase.
pub fn halving_schedule(n: usize, m: usize) -> Vec<Vec<usize>> {
    let phases = halving_phases(m);
    if phases == 0 {
        // a single candidate takes the whole budget
        return alloc::vec![alloc::vec![n]];
    }
    let per_phase = n / phases;
    let mut remaining = n;
    let mut k = m;
    let mut out = Vec::with_capacity(phases);
    for phase in 0..phases {
        let mut visits = alloc::vec![0usize; k];
        if phase + 1 < phases {
            let each = (per_phase / k).max(1);
            for v in visits.iter_mut() {
                let take = each.min(remaining);
                *v = take;
                remaining -= take;
            }
        } else {
            for i in 0..remaining {
                visits[i % k] += 1;
            }
            remaining = 0;
        }
        out.push(visits);
        k = k.div_ceil(2);
    }
    out
}

struct Tree {
    nodes: Vec<SearchNode>,
    bounds: ValueBounds,
}

/// Plans one move from `root_obs`. Exactly `cfg.simulations` recurrent
/// inferences are made, each expanding one new node.
pub fn plan<M: Model + ?Sized, R: Rng + ?Sized>(
    root_obs: &Observation,
    legal: ActionSet,
    model: &M,
    cfg: &PlanConfig,
    rng: &mut R,
) -> Result<PlanResult, PlanError> {
    cfg.validate()?;
    if legal.is_empty() {
        return Err(PlanError::NoLegalActions);
    }
    let out = model.initial_inference(root_obs)?;
    let raw: [f64; CELLS] = core::array::from_fn(|a| {
        if legal.contains(Action::new(a).expect("cell")) {
            out.policy_logits[a] as f64
        } else {
            f64::NEG_INFINITY
        }
    });
    let prior = mix_dirichlet(&softmax(&raw), legal, cfg.dirichlet_alpha, cfg.dirichlet_fraction, rng);
    let logits = prior.map(|p| if p > 0.0 { libm::log(p) } else { f64::NEG_INFINITY });
    let gumbel = gumbel_sample(legal, cfg.gumbel_mode, rng);

    let root_value = out.value as f64;
    let mut root = SearchNode::new(out.latent, logits, root_value);
    root.prior = prior;
    let mut tree = Tree { nodes: alloc::vec![root], bounds: ValueBounds::default() };

    // top-m by g + logits, ties to the lowest index
    let mut ranked: Vec<usize> = legal.iter().map(|a| a.index()).collect();
    ranked.sort_by(|&a, &b| (gumbel[b] + logits[b]).total_cmp(&(gumbel[a] + logits[a])).then(a.cmp(&b)));
    let m = cfg.candidates.min(ranked.len());
    let mut survivors: Vec<usize> = ranked[..m].to_vec();

    let t = cfg.prior_temperature;
    let score = |tree: &Tree, a: usize| {
        let s = sigma_completed(&tree.nodes[0], &tree.bounds, cfg)[a];
        if t > 0.0 {
            gumbel[a] + (logits[a] + s) / t
        } else {
            logits[a] + s
        }
    };
    for visits in halving_schedule(cfg.simulations, m) {
        let rounds = visits.iter().copied().max().unwrap_or(0);
        for r in 0..rounds {
            for (rank, &a) in survivors.iter().enumerate() {
                if visits[rank] > r {
                    simulate(&mut tree, a, model, cfg)?;
                }
            }
        }
        let mut order: Vec<(usize, f64)> = survivors.iter().map(|&a| (a, score(&tree, a))).collect();
        order.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
        let keep = survivors.len().div_ceil(2);
        survivors = order.into_iter().take(keep.max(1)).map(|(a, _)| a).collect();
    }
    let chosen = survivors[0];

    let root = &tree.nodes[0];
    let sig = sigma_completed(root, &tree.bounds, cfg);
    let il = improved_logits(&logits, &sig, t);
    Ok(PlanResult {
        chosen_action: Action::new(chosen).expect("cell"),
        improved_policy: softmax(&il),
        improved_logits: il,
        improved_value: v_mix(root),
        root_value,
        visit_counts: root.visits,
        completed_q: completed_q(root),
        prior_logits: logits,
        gumbel,
        legal,
    })
}

fn simulate<M: Model + ?Sized>(tree: &mut Tree, first: usize, model: &M, cfg: &PlanConfig) -> Result<(), PlanError> {
    let mut path: Vec<(usize, usize)> = Vec::with_capacity(CELLS);
    let mut node = 0;
    let mut action = first;
    loop {
        path.push((node, action));
        match tree.nodes[node].children[action] {
            Some(child) => {
                node = child;
                let n = &tree.nodes[node];
                let sig = sigma_completed(n, &tree.bounds, cfg);
                let pi = improved_policy(&n.logits, &sig, 1.0);
                action = non_root_select(&pi, &n.visits).index();
            }
            None => break,
        }
    }
    let parent = node;
    let out = model.recurrent_inference(&tree.nodes[parent].latent, Action::new(action).expect("cell"))?;
    let logits = out.policy_logits.map(|l| l as f64);
    let leaf_value = out.value as f64;
    tree.nodes.push(SearchNode::new(out.latent, logits, leaf_value));
    let child = tree.nodes.len() - 1;
    tree.nodes[parent].children[action] = Some(child);

    let mut g = leaf_value;
    for &(n, a) in path.iter().rev() {
        g = -g;
        let node = &mut tree.nodes[n];
        node.value_sums[a] += g;
        node.visits[a] += 1;
        let q = node.value_sums[a] / node.visits[a] as f64;
        tree.bounds.update(q);
    }
    Ok(())
}
