use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{DatasetMeta, Env, EnvError, OfflineDataset, Step, Transition};
use crate::oracles::{Outcome, TabularMdp};
use crate::SeededRng;

/// The four moves, in action-index order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GridAction {
    Right,
    Left,
    Up,
    Down,
}

impl GridAction {
    pub const ALL: [GridAction; 4] = [Self::Right, Self::Left, Self::Up, Self::Down];

    pub fn delta(self) -> (i64, i64) {
        match self {
            Self::Right => (1, 0),
            Self::Left => (-1, 0),
            Self::Up => (0, 1),
            Self::Down => (0, -1),
        }
    }

    /// Unit action vector stored in datasets.
    pub fn vector(self) -> Vec<f64> {
        let (dx, dy) = self.delta();
        vec![dx as f64, dy as f64]
    }

    /// Move with the largest dot product with `a`; ties and NaN go to the
    /// lowest index.
    pub fn from_vector(a: &[f64]) -> Self {
        let mut best = (0, f64::NEG_INFINITY);
        for (i, m) in Self::ALL.iter().enumerate() {
            let (dx, dy) = m.delta();
            let dot = a[0] * dx as f64 + a[1] * dy as f64;
            if dot > best.1 {
                best = (i, dot);
            }
        }
        Self::ALL[best.0]
    }
}

/// Sparse-reward navigation on a rectangle. Every move costs `step_reward`;
/// any action taken in the goal cell pays `goal_reward` and ends the episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridWorld {
    pub width: usize,
    pub height: usize,
    pub start: (usize, usize),
    pub goal: (usize, usize),
    pub step_reward: f64,
    pub goal_reward: f64,
    pub gamma: f64,
    /// Probability that a move is replaced by a uniformly random one.
    pub slip: f64,
    pub max_steps: usize,
    #[serde(skip)]
    pos: (usize, usize),
    #[serde(skip)]
    t: usize,
}

impl Default for GridWorld {
    fn default() -> Self {
        Self::new(5, 5, (0, 0), (4, 4)).expect("valid default")
    }
}

impl GridWorld {
    pub fn new(
        width: usize,
        height: usize,
        start: (usize, usize),
        goal: (usize, usize),
    ) -> Result<Self, EnvError> {
        let g = Self {
            width,
            height,
            start,
            goal,
            step_reward: -0.01,
            goal_reward: 1.0,
            gamma: 0.99,
            slip: 0.0,
            max_steps: 100,
            pos: start,
            t: 0,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        let inside = |(x, y): (usize, usize)| x < self.width && y < self.height;
        if self.width == 0 || self.height == 0 {
            return Err(EnvError::Config("grid must be at least 1×1".into()));
        }
        if !inside(self.start) || !inside(self.goal) {
            return Err(EnvError::Config("start and goal must lie inside the grid".into()));
        }
        if self.start == self.goal {
            return Err(EnvError::Config("start must differ from goal".into()));
        }
        if !(0.0..=1.0).contains(&self.slip) {
            return Err(EnvError::Config(format!("slip {} outside [0, 1]", self.slip)));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(EnvError::Config(format!("gamma {} outside [0, 1)", self.gamma)));
        }
        if self.max_steps == 0 {
            return Err(EnvError::Config("max_steps must be positive".into()));
        }
        Ok(())
    }

    pub fn n_cells(&self) -> usize {
        self.width * self.height
    }

    pub fn index(&self, (x, y): (usize, usize)) -> usize {
        y * self.width + x
    }

    pub fn cell(&self, index: usize) -> (usize, usize) {
        (index % self.width, index / self.width)
    }

    pub fn one_hot(&self, cell: (usize, usize)) -> Vec<f64> {
        let mut s = vec![0.0; self.n_cells()];
        s[self.index(cell)] = 1.0;
        s
    }

    /// Cell a one-hot (or nearly one-hot) state vector refers to.
    pub fn decode(&self, state: &[f64]) -> (usize, usize) {
        let mut best = 0;
        for (i, &v) in state.iter().enumerate() {
            if v > state[best] {
                best = i;
            }
        }
        self.cell(best)
    }

    pub fn position(&self) -> (usize, usize) {
        self.pos
    }

    pub fn moved(&self, (x, y): (usize, usize), a: GridAction) -> (usize, usize) {
        let (dx, dy) = a.delta();
        let nx = (x as i64 + dx).clamp(0, self.width as i64 - 1) as usize;
        let ny = (y as i64 + dy).clamp(0, self.height as i64 - 1) as usize;
        (nx, ny)
    }

    pub fn manhattan(&self, (x, y): (usize, usize)) -> usize {
        x.abs_diff(self.goal.0) + y.abs_diff(self.goal.1)
    }

    /// Moves that bring `cell` strictly closer to the goal.
    pub fn improving_moves(&self, cell: (usize, usize)) -> Vec<GridAction> {
        let d = self.manhattan(cell);
        GridAction::ALL
            .into_iter()
            .filter(|&a| self.manhattan(self.moved(cell, a)) < d)
            .collect()
    }

    /// The exact MDP, for value iteration.
    pub fn to_tabular(&self) -> TabularMdp {
        let outcomes = (0..self.n_cells())
            .map(|s| {
                let cell = self.cell(s);
                GridAction::ALL
                    .into_iter()
                    .map(|a| {
                        if cell == self.goal {
                            return vec![Outcome {
                                prob: 1.0,
                                next: s,
                                reward: self.goal_reward,
                                done: true,
                            }];
                        }
                        let mut probs = [0.0; 4];
                        probs[a as usize] += 1.0 - self.slip;
                        for p in probs.iter_mut() {
                            *p += self.slip / 4.0;
                        }
                        let mut outs: Vec<Outcome> = Vec::new();
                        for (k, &p) in probs.iter().enumerate() {
                            if p == 0.0 {
                                continue;
                            }
                            let next = self.index(self.moved(cell, GridAction::ALL[k]));
                            match outs.iter_mut().find(|o| o.next == next) {
                                Some(o) => o.prob += p,
                                None => outs.push(Outcome {
                                    prob: p,
                                    next,
                                    reward: self.step_reward,
                                    done: false,
                                }),
                            }
                        }
                        outs
                    })
                    .collect()
            })
            .collect();
        TabularMdp {
            outcomes,
            gamma: self.gamma,
        }
    }

    fn step_move(&mut self, a: GridAction, rng: &mut SeededRng) -> Step {
        self.t += 1;
        if self.pos == self.goal {
            return Step {
                next_state: self.one_hot(self.pos),
                reward: self.goal_reward,
                done: true,
                truncated: false,
            };
        }
        let a = if self.slip > 0.0 && rng.random::<f64>() < self.slip {
            GridAction::ALL[rng.random_range(0..4)]
        } else {
            a
        };
        self.pos = self.moved(self.pos, a);
        Step {
            next_state: self.one_hot(self.pos),
            reward: self.step_reward,
            done: false,
            truncated: self.t >= self.max_steps,
        }
    }
}

impl Env for GridWorld {
    fn id(&self) -> String {
        format!("gridworld-{}x{}", self.width, self.height)
    }
    fn state_dim(&self) -> usize {
        self.n_cells()
    }
    fn action_dim(&self) -> usize {
        2
    }
    fn reset(&mut self, _rng: &mut SeededRng) -> Vec<f64> {
        self.pos = self.start;
        self.t = 0;
        self.one_hot(self.pos)
    }
    fn step(&mut self, action: &[f64], rng: &mut SeededRng) -> Step {
        self.step_move(GridAction::from_vector(action), rng)
    }
    fn action_bounds(&self) -> Option<(f64, f64)> {
        Some((-1.0, 1.0))
    }
    fn gamma(&self) -> f64 {
        self.gamma
    }
}

/// Scripted behavior policies for dataset generation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum GridPolicy {
    /// A uniformly chosen distance-reducing move, or with probability
    /// `epsilon` a uniformly random one.
    Optimal { epsilon: f64 },
    Random,
}

impl GridPolicy {
    pub fn act(&self, grid: &GridWorld, cell: (usize, usize), rng: &mut SeededRng) -> GridAction {
        let random = |rng: &mut SeededRng| GridAction::ALL[rng.random_range(0..4)];
        match *self {
            Self::Random => random(rng),
            Self::Optimal { epsilon } => {
                if epsilon > 0.0 && rng.random::<f64>() < epsilon {
                    return random(rng);
                }
                let moves = grid.improving_moves(cell);
                if moves.is_empty() {
                    // goal cell: every action exits
                    GridAction::Right
                } else {
                    moves[rng.random_range(0..moves.len())]
                }
            }
        }
    }
}

/// Per-trajectory mixture of a near-optimal and a random policy.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyMix {
    pub optimal_fraction: f64,
    pub epsilon: f64,
}

impl PolicyMix {
    pub fn new(optimal_fraction: f64, epsilon: f64) -> Result<Self, EnvError> {
        if !(0.0..=1.0).contains(&optimal_fraction) || !(0.0..=1.0).contains(&epsilon) {
            return Err(EnvError::Config(
                "policy mix fractions must lie in [0, 1]".into(),
            ));
        }
        Ok(Self {
            optimal_fraction,
            epsilon,
        })
    }
}

/// Rolls out whole trajectories until `n_steps` transitions are collected.
/// Returns of trajectories cut short by the `n_steps` budget are not
/// recorded in the metadata.
pub fn generate_gridworld_dataset(
    grid: &GridWorld,
    mix: PolicyMix,
    n_steps: usize,
    seed: u64,
    rng: &mut SeededRng,
) -> Result<OfflineDataset, EnvError> {
    grid.validate()?;
    if n_steps == 0 {
        return Err(EnvError::EmptyDataset);
    }
    let mut env = grid.clone();
    let mut ds = OfflineDataset::empty(&env.id(), seed, env.state_dim(), 2);
    let mut returns = Vec::new();
    let mut discounted = Vec::new();
    let mut optimal_episodes = 0usize;
    let mut episodes = 0usize;
    while ds.len() < n_steps {
        let policy = if rng.random::<f64>() < mix.optimal_fraction {
            optimal_episodes += 1;
            GridPolicy::Optimal {
                epsilon: mix.epsilon,
            }
        } else {
            GridPolicy::Random
        };
        episodes += 1;
        let mut s = env.reset(rng);
        let (mut ret, mut disc, mut g) = (0.0, 0.0, 1.0);
        loop {
            let a = policy.act(&env, env.position(), rng);
            let step = env.step_move(a, rng);
            ret += step.reward;
            disc += g * step.reward;
            g *= env.gamma;
            ds.push(Transition {
                state: s,
                action: a.vector(),
                reward: step.reward,
                next_state: step.next_state.clone(),
                done: step.done,
            })?;
            s = step.next_state;
            if step.done || step.truncated {
                returns.push(ret);
                discounted.push(disc);
                break;
            }
            if ds.len() >= n_steps {
                break;
            }
        }
    }
    ds.meta = DatasetMeta {
        generator: "gridworld policy mix".into(),
        details: serde_json::json!({
            "grid": grid,
            "mix": mix,
            "episodes": episodes,
            "optimal_episodes": optimal_episodes,
        }),
        episode_returns: returns,
        discounted_returns: discounted,
    };
    Ok(ds)
}
