//! Tic-Tac-Toe behind the agent-environment interface.
//!
//! Cells are indexed row-major, `0..9`. Rewards exist only at the end of an
//! episode and are always expressed for the player who made the last move.

use core::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const CELLS: usize = 9;
pub const PLANES: usize = 3;
pub const OBS_LEN: usize = PLANES * CELLS;
pub const SYMMETRIES: usize = 8;

const LINES: [[usize; 3]; 8] = [
    [0, 1, 2],
    [3, 4, 5],
    [6, 7, 8],
    [0, 3, 6],
    [1, 4, 7],
    [2, 5, 8],
    [0, 4, 8],
    [2, 4, 6],
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum GameError {
    #[error("cell index {0} is out of range")]
    InvalidCell(u8),
    #[error("cell {0} is already occupied")]
    CellOccupied(u8),
    #[error("no legal actions: the game is over")]
    NoLegalActions,
    #[error("observation does not encode a position")]
    InvalidObservation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Player {
    X,
    O,
}

impl Player {
    pub fn opponent(self) -> Player {
        match self {
            Player::X => Player::O,
            Player::O => Player::X,
        }
    }
}

impl fmt::Display for Player {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Player::X => f.write_str("x"),
            Player::O => f.write_str("o"),
        }
    }
}

/// A board cell, `0..9` in row-major order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct Action(u8);

impl Action {
    pub fn new(cell: usize) -> Result<Action, GameError> {
        if cell < CELLS {
            Ok(Action(cell as u8))
        } else {
            Err(GameError::InvalidCell(cell.min(255) as u8))
        }
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn all() -> impl Iterator<Item = Action> {
        (0..CELLS as u8).map(Action)
    }
}

impl TryFrom<u8> for Action {
    type Error = GameError;
    fn try_from(v: u8) -> Result<Self, Self::Error> {
        Action::new(v as usize)
    }
}

impl From<Action> for u8 {
    fn from(a: Action) -> u8 {
        a.0
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// A set of actions stored as a 9-bit mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct ActionSet(u16);

impl ActionSet {
    pub const EMPTY: ActionSet = ActionSet(0);
    pub const ALL: ActionSet = ActionSet(0x1ff);

    pub fn from_actions<I: IntoIterator<Item = Action>>(actions: I) -> ActionSet {
        let mut s = ActionSet::EMPTY;
        for a in actions {
            s.insert(a);
        }
        s
    }

    pub fn insert(&mut self, a: Action) {
        self.0 |= 1 << a.0;
    }

    pub fn contains(&self, a: Action) -> bool {
        self.0 & (1 << a.0) != 0
    }

    pub fn len(&self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(&self) -> bool {
        self.0 == 0
    }

    pub fn bits(&self) -> u16 {
        self.0
    }

    pub fn first(&self) -> Option<Action> {
        self.iter().next()
    }

    pub fn iter(&self) -> impl Iterator<Item = Action> + '_ {
        let bits = self.0;
        (0..CELLS as u8).filter(move |i| bits & (1 << i) != 0).map(Action)
    }
}

/// Outcome of a finished game.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TerminalResult {
    Win(Player),
    Draw,
}

impl TerminalResult {
    /// Reward received by the player who made the final move: +1 for a win,
    /// 0 for a draw. The last mover can never lose on their own move.
    pub fn reward_to_last_mover(&self) -> f32 {
        match self {
            TerminalResult::Win(_) => 1.0,
            TerminalResult::Draw => 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GameState {
    board: [Option<Player>; CELLS],
    to_move: Player,
    move_count: u8,
}

impl Default for GameState {
    fn default() -> Self {
        GameState::new()
    }
}

impl GameState {
    pub fn new() -> GameState {
        GameState {
            board: [None; CELLS],
            to_move: Player::X,
            move_count: 0,
        }
    }

    /// Replays `actions` from the empty board.
    pub fn from_actions(actions: &[Action]) -> Result<GameState, GameError> {
        actions
            .iter()
            .try_fold(GameState::new(), |s, &a| s.apply_action(a))
    }

    /// Inverse of [`GameState::observe`] for well-formed observations.
    pub fn from_observation(obs: &Observation) -> Result<GameState, GameError> {
        let to_move = match obs.plane(2) {
            p if p.iter().all(|&v| v == 1.0) => Player::X,
            p if p.iter().all(|&v| v == 0.0) => Player::O,
            _ => return Err(GameError::InvalidObservation),
        };
        let mut board = [None; CELLS];
        let (mut own, mut other) = (0u8, 0u8);
        for (c, cell) in board.iter_mut().enumerate() {
            match (obs.plane(0)[c], obs.plane(1)[c]) {
                (0.0, 0.0) => {}
                (1.0, 0.0) => {
                    *cell = Some(to_move);
                    own += 1;
                }
                (0.0, 1.0) => {
                    *cell = Some(to_move.opponent());
                    other += 1;
                }
                _ => return Err(GameError::InvalidObservation),
            }
        }
        let (x, o) = if to_move == Player::X { (own, other) } else { (other, own) };
        if !(x == o && to_move == Player::X || x == o + 1 && to_move == Player::O) {
            return Err(GameError::InvalidObservation);
        }
        Ok(GameState { board, to_move, move_count: x + o })
    }

    pub fn board(&self) -> &[Option<Player>; CELLS] {
        &self.board
    }

    pub fn cell(&self, a: Action) -> Option<Player> {
        self.board[a.index()]
    }

    pub fn to_move(&self) -> Player {
        self.to_move
    }

    pub fn move_count(&self) -> usize {
        self.move_count as usize
    }

    /// Base-3 encoding of the board (empty = 0, x = 1, o = 2), cell 0 least
    /// significant. The player to move is implied by the stone counts.
    pub fn code(&self) -> u16 {
        self.board.iter().rev().fold(0u16, |acc, c| {
            acc * 3
                + match c {
                    None => 0,
                    Some(Player::X) => 1,
                    Some(Player::O) => 2,
                }
        })
    }

    pub fn winner(&self) -> Option<Player> {
        LINES.iter().find_map(|l| match self.board[l[0]] {
            Some(p) if self.board[l[1]] == Some(p) && self.board[l[2]] == Some(p) => Some(p),
            _ => None,
        })
    }

    pub fn terminal_result(&self) -> Option<TerminalResult> {
        if let Some(p) = self.winner() {
            Some(TerminalResult::Win(p))
        } else if self.move_count as usize == CELLS {
            Some(TerminalResult::Draw)
        } else {
            None
        }
    }

    pub fn is_terminal(&self) -> bool {
        self.terminal_result().is_some()
    }

    pub fn legal_actions(&self) -> Result<ActionSet, GameError> {
        if self.is_terminal() {
            return Err(GameError::NoLegalActions);
        }
        Ok(self.empty_cells())
    }

    fn empty_cells(&self) -> ActionSet {
        ActionSet::from_actions(Action::all().filter(|a| self.board[a.index()].is_none()))
    }

    pub fn apply_action(&self, a: Action) -> Result<GameState, GameError> {
        if self.is_terminal() {
            return Err(GameError::NoLegalActions);
        }
        if self.board[a.index()].is_some() {
            return Err(GameError::CellOccupied(a.0));
        }
        let mut next = *self;
        next.board[a.index()] = Some(self.to_move);
        next.to_move = self.to_move.opponent();
        next.move_count += 1;
        Ok(next)
    }

    pub fn observe(&self) -> Observation {
        let mut planes = [0.0f32; OBS_LEN];
        for (i, c) in self.board.iter().enumerate() {
            match c {
                Some(p) if *p == self.to_move => planes[i] = 1.0,
                Some(_) => planes[CELLS + i] = 1.0,
                None => {}
            }
        }
        if self.to_move == Player::X {
            planes[2 * CELLS..].fill(1.0);
        }
        Observation { planes }
    }

    pub fn transform(&self, t: SymmetryTransform) -> GameState {
        let mut board = [None; CELLS];
        for (i, c) in self.board.iter().enumerate() {
            board[t.map_cell(i)] = *c;
        }
        GameState { board, ..*self }
    }
}

impl fmt::Display for GameState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for row in 0..3 {
            for col in 0..3 {
                let c = match self.board[row * 3 + col] {
                    None => '.',
                    Some(Player::X) => 'x',
                    Some(Player::O) => 'o',
                };
                write!(f, "{}", c)?;
            }
            if row < 2 {
                f.write_str("/")?;
            }
        }
        Ok(())
    }
}

/// Three 3×3 planes: stones of the player to move, stones of the opponent,
/// and a constant plane that is 1 when x is to move.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub planes: [f32; OBS_LEN],
}

impl Observation {
    pub fn plane(&self, k: usize) -> &[f32] {
        &self.planes[k * CELLS..(k + 1) * CELLS]
    }

    pub fn transform(&self, t: SymmetryTransform) -> Observation {
        let mut planes = [0.0f32; OBS_LEN];
        for k in 0..PLANES {
            for c in 0..CELLS {
                planes[k * CELLS + t.map_cell(c)] = self.planes[k * CELLS + c];
            }
        }
        Observation { planes }
    }
}

const fn build_perms() -> [[u8; CELLS]; SYMMETRIES] {
    let mut perms = [[0u8; CELLS]; SYMMETRIES];
    let mut id = 0;
    while id < SYMMETRIES {
        let rotations = id / 2;
        let reflect = id % 2 == 1;
        let mut c = 0;
        while c < CELLS {
            let mut row = c / 3;
            let mut col = c % 3;
            if reflect {
                col = 2 - col;
            }
            let mut r = 0;
            while r < rotations {
                let nr = col;
                let nc = 2 - row;
                row = nr;
                col = nc;
                r += 1;
            }
            perms[id][c] = (row * 3 + col) as u8;
            c += 1;
        }
        id += 1;
    }
    perms
}

const PERMS: [[u8; CELLS]; SYMMETRIES] = build_perms();

/// One of the 8 symmetries of the square: an optional reflection
/// (col -> 2 - col) followed by 0..4 clockwise quarter turns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SymmetryTransform(u8);

impl SymmetryTransform {
    pub const IDENTITY: SymmetryTransform = SymmetryTransform(0);

    pub fn new(id: usize) -> SymmetryTransform {
        assert!(id < SYMMETRIES, "symmetry id {id} out of range");
        SymmetryTransform(id as u8)
    }

    pub fn all() -> impl Iterator<Item = SymmetryTransform> {
        (0..SYMMETRIES as u8).map(SymmetryTransform)
    }

    pub fn id(self) -> usize {
        self.0 as usize
    }

    pub fn permutation(self) -> &'static [u8; CELLS] {
        &PERMS[self.0 as usize]
    }

    pub fn map_cell(self, c: usize) -> usize {
        PERMS[self.0 as usize][c] as usize
    }

    pub fn apply_action(self, a: Action) -> Action {
        Action(PERMS[self.0 as usize][a.index()])
    }

    /// `out[t(c)] = p[c]`; the sum is preserved.
    pub fn apply_policy(self, p: &[f32; CELLS]) -> [f32; CELLS] {
        let mut out = [0.0; CELLS];
        for c in 0..CELLS {
            out[self.map_cell(c)] = p[c];
        }
        out
    }

    pub fn apply_actions(self, s: ActionSet) -> ActionSet {
        ActionSet::from_actions(s.iter().map(|a| self.apply_action(a)))
    }

    /// `self` applied after `first`.
    pub fn compose(self, first: SymmetryTransform) -> SymmetryTransform {
        let mut perm = [0u8; CELLS];
        for c in 0..CELLS {
            perm[c] = self.map_cell(first.map_cell(c)) as u8;
        }
        Self::from_permutation(&perm).expect("symmetries are closed under composition")
    }

    pub fn inverse(self) -> SymmetryTransform {
        let mut perm = [0u8; CELLS];
        for c in 0..CELLS {
            perm[self.map_cell(c)] = c as u8;
        }
        Self::from_permutation(&perm).expect("symmetry inverse is a symmetry")
    }

    pub fn from_permutation(perm: &[u8; CELLS]) -> Option<SymmetryTransform> {
        PERMS
            .iter()
            .position(|p| p == perm)
            .map(|i| SymmetryTransform(i as u8))
    }
}
