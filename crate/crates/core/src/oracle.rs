//! Exhaustive ground truth: the deduplicated decision graph of all reachable
//! positions, its minimax solution, and the bad-decision audit built on it.

use alloc::collections::VecDeque;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use alloc::format;

use crate::game::{Action, GameState, Observation, Player, TerminalResult, CELLS};
use crate::model::{LatentState, Model, ModelError, NetworkOutput};

const CODE_SPACE: usize = 19_683; // 3^9

#[derive(Debug, Clone)]
pub struct GraphNode {
    pub state: GameState,
    /// Child node index per legal action, in ascending action order.
    pub children: Vec<(Action, usize)>,
    /// Minimax value for the player to move: -1, 0 or +1.
    pub value: i8,
    pub relevant: bool,
    pub on_optimal_path: bool,
}

impl GraphNode {
    pub fn is_terminal(&self) -> bool {
        self.children.is_empty()
    }
}

/// Every reachable position exactly once (no symmetry reduction), root first.
#[derive(Debug, Clone)]
pub struct DecisionGraph {
    nodes: Vec<GraphNode>,
    index: Vec<u32>,
    solved: bool,
    classified: bool,
}

impl DecisionGraph {
    /// Breadth-first unfolding from the empty board with exact-state dedup.
    pub fn build() -> DecisionGraph {
        let mut index = vec![u32::MAX; CODE_SPACE];
        let mut nodes: Vec<GraphNode> = Vec::new();
        let root = GameState::new();
        index[root.code() as usize] = 0;
        nodes.push(GraphNode {
            state: root,
            children: Vec::new(),
            value: 0,
            relevant: false,
            on_optimal_path: false,
        });
        let mut queue = VecDeque::from([0usize]);
        while let Some(i) = queue.pop_front() {
            let state = nodes[i].state;
            let Ok(legal) = state.legal_actions() else { continue };
            let mut children = Vec::with_capacity(legal.len());
            for a in legal.iter() {
                let next = state.apply_action(a).expect("legal action");
                let code = next.code() as usize;
                if index[code] == u32::MAX {
                    index[code] = nodes.len() as u32;
                    nodes.push(GraphNode {
                        state: next,
                        children: Vec::new(),
                        value: 0,
                        relevant: false,
                        on_optimal_path: false,
                    });
                    queue.push_back(nodes.len() - 1);
                }
                children.push((a, index[code] as usize));
            }
            nodes[i].children = children;
        }
        DecisionGraph {
            nodes,
            index,
            solved: false,
            classified: false,
        }
    }

    /// Builds, solves and classifies in one go.
    pub fn solved() -> DecisionGraph {
        let mut g = DecisionGraph::build();
        g.solve();
        g.classify_nodes();
        g
    }

    /// Retrograde induction: deepest positions first.
    pub fn solve(&mut self) {
        let mut order: Vec<usize> = (0..self.nodes.len()).collect();
        order.sort_by_key(|&i| core::cmp::Reverse(self.nodes[i].state.move_count()));
        for i in order {
            let node = &self.nodes[i];
            let value = match node.state.terminal_result() {
                // the player to move at a won position is the loser
                Some(TerminalResult::Win(_)) => -1,
                Some(TerminalResult::Draw) => 0,
                None => node
                    .children
                    .iter()
                    .map(|&(_, c)| -self.nodes[c].value)
                    .max()
                    .expect("non-terminal node has children"),
            };
            self.nodes[i].value = value;
        }
        self.solved = true;
    }

    /// Flags relevant decision nodes (choice matters) and nodes reached by
    /// optimal play of both players.
    pub fn classify_nodes(&mut self) {
        assert!(self.solved, "classify_nodes requires a solved graph");
        for i in 0..self.nodes.len() {
            let vals: Vec<i8> = self.child_values(i).map(|(_, v)| v).collect();
            let relevant = vals.len() >= 2 && vals.iter().any(|&v| v != vals[0]);
            self.nodes[i].relevant = relevant;
            self.nodes[i].on_optimal_path = false;
        }
        let flags = self.optimal_path_flags(PathRule::BothPlayers);
        for (n, f) in self.nodes.iter_mut().zip(flags) {
            n.on_optimal_path = f;
        }
        self.classified = true;
    }

    /// States reachable from the root under `rule`. Requires a solved graph.
    pub fn optimal_path_flags(&self, rule: PathRule) -> Vec<bool> {
        assert!(self.solved, "optimal paths require a solved graph");
        let mut flags = vec![false; self.nodes.len()];
        let mut queue = VecDeque::from([0usize]);
        flags[0] = true;
        while let Some(i) = queue.pop_front() {
            let best = self.nodes[i].value;
            let free = match rule {
                PathRule::BothPlayers => false,
                PathRule::AgentOnly(p) => self.nodes[i].state.to_move() != p,
            };
            let next: Vec<usize> = self
                .child_values(i)
                .filter(|&(_, v)| free || v == best)
                .map(|(c, _)| c)
                .collect();
            for c in next {
                if !flags[c] {
                    flags[c] = true;
                    queue.push_back(c);
                }
            }
        }
        flags
    }

    /// (child index, child value from the mover's perspective).
    fn child_values(&self, i: usize) -> impl Iterator<Item = (usize, i8)> + '_ {
        self.nodes[i]
            .children
            .iter()
            .map(move |&(_, c)| (c, -self.nodes[c].value))
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[GraphNode] {
        &self.nodes
    }

    pub fn node(&self, i: usize) -> &GraphNode {
        &self.nodes[i]
    }

    pub fn root(&self) -> &GraphNode {
        &self.nodes[0]
    }

    pub fn is_solved(&self) -> bool {
        self.solved
    }

    pub fn find(&self, s: &GameState) -> Option<usize> {
        match self.index[s.code() as usize] {
            u32::MAX => None,
            i => Some(i as usize),
        }
    }

    /// Minimax value of a reachable state for its player to move.
    pub fn value(&self, s: &GameState) -> Option<i8> {
        self.find(s).map(|i| self.nodes[i].value)
    }

    /// Value of taking `a` in `s`, seen by the player to move in `s`.
    pub fn action_value(&self, s: &GameState, a: Action) -> Option<i8> {
        let next = s.apply_action(a).ok()?;
        self.value(&next).map(|v| -v)
    }

    /// Per-action values for the mover; `None` on illegal actions.
    pub fn action_values(&self, s: &GameState) -> [Option<i8>; CELLS] {
        let mut out = [None; CELLS];
        for a in Action::all() {
            out[a.index()] = self.action_value(s, a);
        }
        out
    }

    pub fn is_bad_action(&self, s: &GameState, a: Action) -> bool {
        match (self.value(s), self.action_value(s, a)) {
            (Some(best), Some(v)) => v < best,
            _ => false,
        }
    }

    pub fn relevant_nodes(&self) -> impl Iterator<Item = &GraphNode> + '_ {
        self.nodes.iter().filter(|n| n.relevant)
    }

    pub fn relevant_count(&self) -> usize {
        self.relevant_nodes().count()
    }

    pub fn optimal_path_relevant_count(&self) -> usize {
        self.relevant_nodes().filter(|n| n.on_optimal_path).count()
    }
}

/// Which moves may be taken along an "optimal path".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PathRule {
    /// both players play minimax-optimal moves (the default)
    BothPlayers,
    /// only the given player is restricted; the opponent may play anything
    AgentOnly(Player),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EvalMode {
    /// Argmax of the initial-inference policy, no search.
    Intuition,
    /// The planner's chosen action.
    Planning,
}

impl EvalMode {
    pub const ALL: [EvalMode; 2] = [EvalMode::Intuition, EvalMode::Planning];

    pub fn label(self) -> &'static str {
        match self {
            EvalMode::Intuition => "I",
            EvalMode::Planning => "P",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Scope {
    AllNodes,
    OptimalPath,
}

impl Scope {
    pub const ALL: [Scope; 2] = [Scope::AllNodes, Scope::OptimalPath];

    pub fn label(self) -> &'static str {
        match self {
            Scope::AllNodes => "all",
            Scope::OptimalPath => "optimal_path",
        }
    }
}

fn player_slot(p: Player) -> usize {
    match p {
        Player::X => 0,
        Player::O => 1,
    }
}

fn mode_slot(m: EvalMode) -> usize {
    match m {
        EvalMode::Intuition => 0,
        EvalMode::Planning => 1,
    }
}

fn scope_slot(s: Scope) -> usize {
    match s {
        Scope::AllNodes => 0,
        Scope::OptimalPath => 1,
    }
}

/// Bad decisions keyed by player × mode × scope.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct BadDecisionCount {
    cells: [[[u32; 2]; 2]; 2],
}

impl BadDecisionCount {
    pub fn get(&self, p: Player, m: EvalMode, s: Scope) -> u32 {
        self.cells[player_slot(p)][mode_slot(m)][scope_slot(s)]
    }

    pub fn set(&mut self, p: Player, m: EvalMode, s: Scope, v: u32) {
        self.cells[player_slot(p)][mode_slot(m)][scope_slot(s)] = v;
    }

    fn bump(&mut self, p: Player, m: EvalMode, s: Scope) {
        self.cells[player_slot(p)][mode_slot(m)][scope_slot(s)] += 1;
    }

    /// Builds a count from one table row laid out as
    /// `X:I, O:I, X:P, O:P` for all nodes, then the same for the optimal path.
    pub fn from_table_row(all: [u32; 4], optimal: [u32; 4]) -> BadDecisionCount {
        let mut c = BadDecisionCount::default();
        let keys = [
            (Player::X, EvalMode::Intuition),
            (Player::O, EvalMode::Intuition),
            (Player::X, EvalMode::Planning),
            (Player::O, EvalMode::Planning),
        ];
        for (k, &(p, m)) in keys.iter().enumerate() {
            c.set(p, m, Scope::AllNodes, all[k]);
            c.set(p, m, Scope::OptimalPath, optimal[k]);
        }
        c
    }

    /// Sum of the four all-node cells; intuition and planning are both
    /// counted, so a state can contribute twice.
    pub fn headline(&self) -> u32 {
        self.scope_total(Scope::AllNodes)
    }

    pub fn scope_total(&self, s: Scope) -> u32 {
        [Player::X, Player::O]
            .iter()
            .flat_map(|&p| EvalMode::ALL.iter().map(move |&m| (p, m)))
            .map(|(p, m)| self.get(p, m, s))
            .sum()
    }

    pub fn mode_total(&self, m: EvalMode, s: Scope) -> u32 {
        self.get(Player::X, m, s) + self.get(Player::O, m, s)
    }

    pub fn iter(&self) -> impl Iterator<Item = (Player, EvalMode, Scope, u32)> + '_ {
        [Player::X, Player::O].into_iter().flat_map(move |p| {
            EvalMode::ALL.into_iter().flat_map(move |m| {
                Scope::ALL
                    .into_iter()
                    .map(move |s| (p, m, s, self.get(p, m, s)))
            })
        })
    }

    pub fn add(&mut self, other: &BadDecisionCount) {
        for (p, m, s, v) in other.iter() {
            self.cells[player_slot(p)][mode_slot(m)][scope_slot(s)] += v;
        }
    }
}

impl fmt::Display for BadDecisionCount {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for s in Scope::ALL {
            write!(f, "{}:", s.label())?;
            for m in EvalMode::ALL {
                for p in [Player::X, Player::O] {
                    write!(f, " {}:{}={}", p, m.label(), self.get(p, m, s))?;
                }
            }
            f.write_str("; ")?;
        }
        write!(f, "headline={}", self.headline())
    }
}

/// Tabular stand-in for a network: uniform priors and exact minimax values.
/// The latent holds `[node index, absorbing flag, absorbing value]`. Moves
/// from a terminal state or onto an occupied cell enter an absorbing chain
/// whose value alternates sign each ply; an illegal move loses for its mover.
pub struct PerfectModel<'g> {
    graph: &'g DecisionGraph,
}

impl<'g> PerfectModel<'g> {
    pub fn new(graph: &'g DecisionGraph) -> PerfectModel<'g> {
        assert!(graph.is_solved(), "graph must be solved");
        PerfectModel { graph }
    }

    fn output(&self, data: Vec<f32>, value: f32, tau: u32) -> NetworkOutput {
        NetworkOutput { policy_logits: [0.0; CELLS], value, latent: LatentState { data, t: 0, tau } }
    }
}

impl Model for PerfectModel<'_> {
    fn initial_inference(&self, obs: &Observation) -> Result<NetworkOutput, ModelError> {
        let s = GameState::from_observation(obs).map_err(|e| ModelError::Other(format!("{e}")))?;
        let i = self.graph.find(&s).ok_or_else(|| ModelError::Other("unreachable state".into()))?;
        Ok(self.output(vec![i as f32, 0.0, 0.0], self.graph.node(i).value as f32, 0))
    }

    fn recurrent_inference(&self, latent: &LatentState, a: Action) -> Result<NetworkOutput, ModelError> {
        let [idx, absorbing, value] = latent.data[..] else {
            return Err(ModelError::ShapeMismatch { expected: 3, got: latent.data.len() });
        };
        let tau = latent.tau + 1;
        if absorbing != 0.0 {
            return Ok(self.output(vec![idx, 1.0, -value], -value, tau));
        }
        let node = self.graph.node(idx as usize);
        if node.is_terminal() {
            let v = -(node.value as f32);
            return Ok(self.output(vec![idx, 1.0, v], v, tau));
        }
        match node.children.iter().find(|(b, _)| *b == a) {
            Some(&(_, child)) => {
                Ok(self.output(vec![child as f32, 0.0, 0.0], self.graph.node(child).value as f32, tau))
            }
            None => Ok(self.output(vec![idx, 1.0, 1.0], 1.0, tau)),
        }
    }
}

/// Audits a decision rule on every relevant node of a classified graph.
///
/// `decide` is called once per (relevant state, mode). Each deduplicated
/// state is counted at most once per mode.
pub fn count_bad_decisions<E, F>(
    graph: &DecisionGraph,
    modes: &[EvalMode],
    mut decide: F,
) -> Result<BadDecisionCount, E>
where
    F: FnMut(&GameState, EvalMode) -> Result<Action, E>,
{
    assert!(graph.classified, "count_bad_decisions requires a classified graph");
    let mut count = BadDecisionCount::default();
    for node in graph.relevant_nodes() {
        for &mode in modes {
            let a = decide(&node.state, mode)?;
            if graph.is_bad_action(&node.state, a) {
                let p = node.state.to_move();
                count.bump(p, mode, Scope::AllNodes);
                if node.on_optimal_path {
                    count.bump(p, mode, Scope::OptimalPath);
                }
            }
        }
    }
    Ok(count)
}

/// Shannon entropy in nats with `0 ln 0 = 0`.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| x * libm::log(x))
        .sum::<f64>()
}
