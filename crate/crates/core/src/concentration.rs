//! Solitaire Concentration with continuous-valued card faces, and baseline agents.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{arg, Result};

pub const FACE_DIM: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Cell {
    Empty,
    FaceDown,
    FaceUp,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeckMode {
    /// Pair faces are drawn once and only the layout is reshuffled per game.
    #[default]
    Fixed,
    /// Faces are redrawn for every game.
    NewDeck,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rewards {
    pub pair: f64,
    pub flip_penalty: f64,
}

impl Default for Rewards {
    fn default() -> Self {
        Self { pair: 25.0, flip_penalty: 0.5 }
    }
}

/// What the agent sees after each flip.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub cells: Vec<Cell>,
    pub prev_action: Option<usize>,
    /// Face revealed by the previous flip; zero if it hit an empty cell or turned a card face down.
    pub prev_card: Vec<f64>,
}

pub fn observation_dim(n_pairs: usize) -> usize {
    2 * n_pairs * 3 + 2 * n_pairs + FACE_DIM
}

impl Observation {
    /// `[empty, face_down, face_up]` one-hot per cell, previous-action one-hot, previous card.
    pub fn to_vec(&self) -> Vec<f64> {
        let n = self.cells.len();
        let mut v = vec![0.0; 4 * n + FACE_DIM];
        for (i, c) in self.cells.iter().enumerate() {
            let k = match c {
                Cell::Empty => 0,
                Cell::FaceDown => 1,
                Cell::FaceUp => 2,
            };
            v[3 * i + k] = 1.0;
        }
        if let Some(a) = self.prev_action {
            v[3 * n + a] = 1.0;
        }
        v[4 * n..].copy_from_slice(&self.prev_card);
        v
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub observation: Observation,
    pub reward: f64,
    pub done: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConcentrationState {
    pub n_pairs: usize,
    /// Face of each cell.
    pub faces: Vec<Vec<f64>>,
    /// Pair index of each cell.
    pub pair_of: Vec<usize>,
    pub cells: Vec<Cell>,
    pub prev_action: Option<usize>,
    pub prev_revealed: Vec<f64>,
    pub flips_so_far: usize,
    pub rewards: Rewards,
}

impl ConcentrationState {
    pub fn observation(&self) -> Observation {
        Observation { cells: self.cells.clone(), prev_action: self.prev_action, prev_card: self.prev_revealed.clone() }
    }

    pub fn n_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn is_done(&self) -> bool {
        self.cells.iter().all(|&c| c == Cell::Empty)
    }

    /// Flip cell `action` (zero-based).
    pub fn step(&mut self, action: usize) -> Result<StepOutcome> {
        if action >= self.n_cells() {
            return arg(format!("action {action} outside 0..{}", self.n_cells()));
        }
        let mut reward = -self.rewards.flip_penalty;
        self.flips_so_far += 1;
        self.prev_action = Some(action);
        match self.cells[action] {
            Cell::Empty => self.prev_revealed = vec![0.0; FACE_DIM],
            Cell::FaceUp => {
                self.cells[action] = Cell::FaceDown;
                self.prev_revealed = vec![0.0; FACE_DIM];
            }
            Cell::FaceDown => {
                self.cells[action] = Cell::FaceUp;
                self.prev_revealed = self.faces[action].clone();
                let other = (0..self.n_cells()).find(|&i| i != action && self.cells[i] == Cell::FaceUp);
                if let Some(b) = other {
                    if self.pair_of[b] == self.pair_of[action] {
                        self.cells[b] = Cell::Empty;
                        self.cells[action] = Cell::Empty;
                        reward += self.rewards.pair;
                    } else {
                        self.cells[b] = Cell::FaceDown;
                        self.cells[action] = Cell::FaceDown;
                    }
                }
            }
        }
        Ok(StepOutcome { observation: self.observation(), reward, done: self.is_done() })
    }
}

/// An environment instance that owns its deck.
#[derive(Clone, Debug)]
pub struct Concentration {
    pub n_pairs: usize,
    pub mode: DeckMode,
    pub rewards: Rewards,
    pair_faces: Vec<Vec<f64>>,
    pub state: ConcentrationState,
}

fn draw_faces<R: Rng + ?Sized>(n_pairs: usize, rng: &mut R) -> Vec<Vec<f64>> {
    (0..n_pairs).map(|_| (0..FACE_DIM).map(|_| rng.random::<f64>()).collect()).collect()
}

impl Concentration {
    pub fn new<R: Rng + ?Sized>(n_pairs: usize, mode: DeckMode, rewards: Rewards, rng: &mut R) -> Result<Self> {
        if n_pairs == 0 {
            return arg("need at least one pair");
        }
        let pair_faces = draw_faces(n_pairs, rng);
        let mut env = Self {
            n_pairs,
            mode,
            rewards,
            pair_faces,
            state: ConcentrationState {
                n_pairs,
                faces: Vec::new(),
                pair_of: Vec::new(),
                cells: Vec::new(),
                prev_action: None,
                prev_revealed: vec![0.0; FACE_DIM],
                flips_so_far: 0,
                rewards,
            },
        };
        env.reset(rng);
        Ok(env)
    }

    /// Shuffle a fresh layout (redrawing faces in new-deck mode); all cards face down.
    pub fn reset<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Observation {
        if self.mode == DeckMode::NewDeck {
            self.pair_faces = draw_faces(self.n_pairs, rng);
        }
        let mut pair_of: Vec<usize> = (0..2 * self.n_pairs).map(|i| i / 2).collect();
        pair_of.shuffle(rng);
        self.state = ConcentrationState {
            n_pairs: self.n_pairs,
            faces: pair_of.iter().map(|&p| self.pair_faces[p].clone()).collect(),
            pair_of,
            cells: vec![Cell::FaceDown; 2 * self.n_pairs],
            prev_action: None,
            prev_revealed: vec![0.0; FACE_DIM],
            flips_so_far: 0,
            rewards: self.rewards,
        };
        self.state.observation()
    }

    pub fn step(&mut self, action: usize) -> Result<StepOutcome> {
        self.state.step(action)
    }
}

/// Result of one finished (or truncated) game.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GameRecord {
    pub game_index: usize,
    pub n_flips: usize,
    pub total_reward: f64,
}

/// Play one game with `policy(state) -> action`, stopping after `max_flips`.
pub fn play_game<F>(env: &mut Concentration, max_flips: usize, mut policy: F) -> Result<(usize, f64)>
where
    F: FnMut(&ConcentrationState) -> usize,
{
    let mut total = 0.0;
    while !env.state.is_done() && env.state.flips_so_far < max_flips {
        let a = policy(&env.state);
        total += env.step(a)?.reward;
    }
    Ok((env.state.flips_so_far, total))
}

/// Uniformly random flip over all cells; empty cells are legal and wasted.
pub fn random_action<R: Rng + ?Sized>(state: &ConcentrationState, rng: &mut R) -> usize {
    rng.random_range(0..state.n_cells())
}

/// Perfect-memory agent: remembers every face it has seen in the current game.
#[derive(Clone, Debug, Default)]
pub struct OptimalAgent {
    seen: Vec<Option<usize>>,
}

impl OptimalAgent {
    pub fn new(n_cells: usize) -> Self {
        Self { seen: vec![None; n_cells] }
    }

    /// Record what the last flip revealed.
    pub fn observe(&mut self, state: &ConcentrationState) {
        if let Some(a) = state.prev_action {
            if state.prev_revealed.iter().any(|&x| x != 0.0) || state.cells[a] == Cell::Empty {
                self.seen[a] = Some(state.pair_of[a]);
            }
        }
    }

    pub fn act(&self, state: &ConcentrationState) -> usize {
        let live = |i: usize| state.cells[i] != Cell::Empty;
        let n = state.n_cells();
        // a face-up card waiting for its partner
        let up: Vec<usize> = (0..n).filter(|&i| state.cells[i] == Cell::FaceUp).collect();
        if up.len() == 1 {
            let a = up[0];
            let p = self.seen[a].expect("face-up card has been seen");
            if let Some(b) = (0..n).find(|&i| i != a && live(i) && self.seen[i] == Some(p)) {
                return b;
            }
            return (0..n).find(|&i| live(i) && self.seen[i].is_none()).expect("an unseen card remains");
        }
        // a known pair: start it
        for i in (0..n).filter(|&i| live(i)) {
            if let Some(p) = self.seen[i] {
                if (0..n).any(|j| j != i && live(j) && self.seen[j] == Some(p)) {
                    return i;
                }
            }
        }
        (0..n).find(|&i| live(i) && self.seen[i].is_none()).expect("an unseen card remains")
    }
}

/// Mean flips of the random agent over `n_games`.
pub fn random_agent_eval<R: Rng + ?Sized>(n_pairs: usize, n_games: usize, rng: &mut R) -> Result<Vec<usize>> {
    let mut env = Concentration::new(n_pairs, DeckMode::NewDeck, Rewards::default(), rng)?;
    let mut flips = Vec::with_capacity(n_games);
    for _ in 0..n_games {
        env.reset(rng);
        let mut total = 0;
        while !env.state.is_done() {
            let a = random_action(&env.state, rng);
            env.step(a)?;
            total += 1;
        }
        flips.push(total);
    }
    Ok(flips)
}

/// Flips per game of the perfect-memory agent.
pub fn optimal_agent_eval<R: Rng + ?Sized>(n_pairs: usize, n_games: usize, rng: &mut R) -> Result<Vec<usize>> {
    let mut env = Concentration::new(n_pairs, DeckMode::NewDeck, Rewards::default(), rng)?;
    let mut flips = Vec::with_capacity(n_games);
    for _ in 0..n_games {
        env.reset(rng);
        let mut agent = OptimalAgent::new(2 * n_pairs);
        while !env.state.is_done() {
            let a = agent.act(&env.state);
            env.step(a)?;
            agent.observe(&env.state);
        }
        flips.push(env.state.flips_so_far);
    }
    Ok(flips)
}

/// Exact expected game length of the perfect-memory strategy, by recursion over
/// (unseen cards, known unmatched singles).
pub fn optimal_expected_flips(n_pairs: usize) -> f64 {
    let u0 = 2 * n_pairs;
    let mut e = vec![vec![0.0f64; u0 + 1]; u0 + 1];
    for u in 1..=u0 {
        for k in 0..=u {
            if (u - k) % 2 != 0 {
                continue;
            }
            let (uf, kf) = (u as f64, k as f64);
            let mut v = 0.0;
            if k > 0 {
                v += kf / uf * (2.0 + e[u - 1][k - 1]);
            }
            if u > k {
                let p_new = (uf - kf) / uf;
                let rest = uf - 1.0;
                let mut inner = 1.0 / rest * (2.0 + e[u - 2][k]);
                if k > 0 {
                    inner += kf / rest * (4.0 + e[u - 2][k]);
                }
                if u - 2 > k {
                    inner += (rest - 1.0 - kf) / rest * (2.0 + e[u - 2][k + 2]);
                }
                v += p_new * inner;
            }
            e[u][k] = v;
        }
    }
    e[u0][0]
}

pub fn mean(xs: &[usize]) -> f64 {
    xs.iter().sum::<usize>() as f64 / xs.len().max(1) as f64
}

/// CSV flip log with header `game_index,n_flips,total_reward`.
pub fn write_flip_log<W: Write>(out: W, games: &[GameRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for g in games {
        w.serialize(g)?;
    }
    w.flush()?;
    Ok(())
}
