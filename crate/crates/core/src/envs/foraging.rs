//! Simplified cooperative level-based foraging gridworld.
//!
//! Agents move on a grid and collect food by loading it together: a food is
//! collected when the agents next to it that chose `load` have summed levels
//! at least equal to the food's level. Dynamics are deterministic; randomness
//! only enters through entity placement at reset.
//!
//! Observation of agent `i` (raw grid coordinates):
//! `[own_row, own_col, (row, col, level) per agent, (row, col, level) per food]`,
//! with collected foods reported as `(-1, -1, 0)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::game::{Environment, GameSpec, JointAction, StepOutcome};
use crate::rng::SeededRng;

pub const NOOP: usize = 0;
pub const UP: usize = 1;
pub const DOWN: usize = 2;
pub const LEFT: usize = 3;
pub const RIGHT: usize = 4;
pub const LOAD: usize = 5;
pub const N_ACTIONS: usize = 6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForagingSpec {
    pub rows: usize,
    pub cols: usize,
    pub n_agents: usize,
    pub n_foods: usize,
    pub agent_levels: Vec<u32>,
    pub food_levels: Vec<u32>,
    /// Every food is heavier than any single agent can lift.
    pub cooperative_only: bool,
    pub max_steps: usize,
    /// When set, every reset reproduces the layout drawn from this seed.
    #[serde(default)]
    pub layout_seed: Option<u64>,
}

impl ForagingSpec {
    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::Config("empty grid".into()));
        }
        if self.n_agents < 2 {
            return Err(Error::Config("foraging needs at least 2 agents".into()));
        }
        if self.n_foods == 0 {
            return Err(Error::Config("foraging needs at least one food".into()));
        }
        if self.agent_levels.len() != self.n_agents || self.food_levels.len() != self.n_foods {
            return Err(Error::Config(
                "agent_levels / food_levels must match n_agents / n_foods".into(),
            ));
        }
        if self
            .agent_levels
            .iter()
            .chain(&self.food_levels)
            .any(|&l| l == 0)
        {
            return Err(Error::Config("levels must be positive".into()));
        }
        if self.n_agents + self.n_foods > self.rows * self.cols {
            return Err(Error::Config("entities do not fit on the grid".into()));
        }
        let total: u32 = self.agent_levels.iter().sum();
        if let Some(&l) = self.food_levels.iter().find(|&&l| l > total) {
            return Err(Error::Config(format!(
                "food level {l} exceeds the summed agent level {total}"
            )));
        }
        if self.cooperative_only {
            let strongest = *self.agent_levels.iter().max().unwrap_or(&0);
            if let Some(&l) = self.food_levels.iter().find(|&&l| l <= strongest) {
                return Err(Error::Config(format!(
                    "cooperative_only: food level {l} is liftable by a single agent of level {strongest}"
                )));
            }
        }
        if self.max_steps == 0 {
            return Err(Error::Config("max_steps must be positive".into()));
        }
        Ok(())
    }

    pub fn observation_dim(&self) -> usize {
        2 + 3 * self.n_agents + 3 * self.n_foods
    }

    fn total_food_level(&self) -> f64 {
        self.food_levels.iter().map(|&l| l as f64).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Cell {
    pub row: usize,
    pub col: usize,
}

impl Cell {
    fn adjacent(self, other: Cell) -> bool {
        self.row.abs_diff(other.row) + self.col.abs_diff(other.col) == 1
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Food {
    pub cell: Cell,
    pub level: u32,
    pub collected: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForagingState {
    pub agent_positions: Vec<Cell>,
    pub foods: Vec<Food>,
    pub step_count: usize,
}

impl ForagingState {
    pub fn validate(&self, spec: &ForagingSpec) -> Result<()> {
        if self.agent_positions.len() != spec.n_agents || self.foods.len() != spec.n_foods {
            return Err(Error::Input("state does not match spec".into()));
        }
        let on_grid = |c: &Cell| c.row < spec.rows && c.col < spec.cols;
        if !self.agent_positions.iter().all(on_grid) || !self.foods.iter().all(|f| on_grid(&f.cell))
        {
            return Err(Error::Input("entity off the grid".into()));
        }
        for (i, a) in self.agent_positions.iter().enumerate() {
            if self.agent_positions[..i].contains(a) {
                return Err(Error::Input("two agents share a cell".into()));
            }
            if self.foods.iter().any(|f| !f.collected && f.cell == *a) {
                return Err(Error::Input("agent stands on food".into()));
            }
        }
        Ok(())
    }

    pub fn all_collected(&self) -> bool {
        self.foods.iter().all(|f| f.collected)
    }

    fn occupied(&self, cell: Cell) -> bool {
        self.agent_positions.contains(&cell)
            || self.foods.iter().any(|f| !f.collected && f.cell == cell)
    }
}

fn target(cell: Cell, action: usize, spec: &ForagingSpec) -> Cell {
    let Cell { row, col } = cell;
    match action {
        UP if row > 0 => Cell { row: row - 1, col },
        DOWN if row + 1 < spec.rows => Cell { row: row + 1, col },
        LEFT if col > 0 => Cell { row, col: col - 1 },
        RIGHT if col + 1 < spec.cols => Cell { row, col: col + 1 },
        _ => cell,
    }
}

/// Apply one joint action. Returns `(next_state, reward, terminal)`.
///
/// Moves are resolved one agent at a time in ascending index order against
/// the positions updated so far; a move into a wall, food or another agent
/// is a no-op.
pub fn foraging_step(
    state: &ForagingState,
    joint: &[usize],
    spec: &ForagingSpec,
) -> Result<(ForagingState, f64, bool)> {
    if joint.len() != spec.n_agents {
        return Err(Error::Input(format!(
            "joint action of length {} for {} agents",
            joint.len(),
            spec.n_agents
        )));
    }
    if let Some(&a) = joint.iter().find(|&&a| a >= N_ACTIONS) {
        return Err(Error::Input(format!("malformed foraging action {a}")));
    }
    let mut next = state.clone();
    for (i, &action) in joint.iter().enumerate() {
        if !(UP..=RIGHT).contains(&action) {
            continue;
        }
        let to = target(next.agent_positions[i], action, spec);
        if to != next.agent_positions[i] && !next.occupied(to) {
            next.agent_positions[i] = to;
        }
    }
    let mut collected_level = 0.0;
    for f in 0..next.foods.len() {
        if next.foods[f].collected {
            continue;
        }
        let cell = next.foods[f].cell;
        let lifted: u32 = joint
            .iter()
            .enumerate()
            .filter(|&(i, &a)| a == LOAD && next.agent_positions[i].adjacent(cell))
            .map(|(i, _)| spec.agent_levels[i])
            .sum();
        if lifted > 0 && lifted >= next.foods[f].level {
            next.foods[f].collected = true;
            collected_level += next.foods[f].level as f64;
        }
    }
    next.step_count += 1;
    let reward = collected_level / spec.total_food_level();
    let terminal = next.all_collected() || next.step_count >= spec.max_steps;
    Ok((next, reward, terminal))
}

/// Foraging gridworld environment.
#[derive(Clone, Debug)]
pub struct Foraging {
    config: ForagingSpec,
    spec: GameSpec,
    state: ForagingState,
}

impl Foraging {
    pub fn new(config: ForagingSpec, discount: f64) -> Result<Self> {
        config.validate()?;
        let spec = GameSpec::new(
            vec![N_ACTIONS; config.n_agents],
            vec![config.observation_dim(); config.n_agents],
            discount,
            config.max_steps,
        )?;
        let mut env = Self {
            state: ForagingState {
                agent_positions: Vec::new(),
                foods: Vec::new(),
                step_count: 0,
            },
            config,
            spec,
        };
        env.reset(&mut SeededRng::new(0, 0));
        Ok(env)
    }

    pub fn config(&self) -> &ForagingSpec {
        &self.config
    }

    pub fn state(&self) -> &ForagingState {
        &self.state
    }

    pub fn set_state(&mut self, state: ForagingState) -> Result<()> {
        state.validate(&self.config)?;
        self.state = state;
        Ok(())
    }

    fn place(&self, rng: &mut SeededRng) -> ForagingState {
        let cells = self.config.rows * self.config.cols;
        let mut free: Vec<usize> = (0..cells).collect();
        let mut take = |rng: &mut SeededRng| {
            let k = rng.below(free.len());
            let idx = free.swap_remove(k);
            Cell {
                row: idx / self.config.cols,
                col: idx % self.config.cols,
            }
        };
        let foods = self
            .config
            .food_levels
            .iter()
            .map(|&level| Food {
                cell: take(rng),
                level,
                collected: false,
            })
            .collect();
        let agent_positions = (0..self.config.n_agents).map(|_| take(rng)).collect();
        ForagingState {
            agent_positions,
            foods,
            step_count: 0,
        }
    }
}

impl Environment for Foraging {
    fn spec(&self) -> &GameSpec {
        &self.spec
    }

    fn reset(&mut self, rng: &mut SeededRng) {
        self.state = match self.config.layout_seed {
            Some(seed) => self.place(&mut SeededRng::new(seed, 0)),
            None => self.place(rng),
        };
    }

    /// Normalised positions and levels of every entity plus elapsed time.
    fn state_features(&self) -> Vec<f64> {
        let rs = (self.config.rows.max(2) - 1) as f64;
        let cs = (self.config.cols.max(2) - 1) as f64;
        let max_level = self
            .config
            .agent_levels
            .iter()
            .chain(&self.config.food_levels)
            .copied()
            .max()
            .unwrap_or(1) as f64;
        let mut x = Vec::with_capacity(3 * (self.config.n_agents + self.config.n_foods) + 1);
        for (c, &l) in self
            .state
            .agent_positions
            .iter()
            .zip(&self.config.agent_levels)
        {
            x.extend([c.row as f64 / rs, c.col as f64 / cs, l as f64 / max_level]);
        }
        for f in &self.state.foods {
            if f.collected {
                x.extend([-1.0, -1.0, 0.0]);
            } else {
                x.extend([
                    f.cell.row as f64 / rs,
                    f.cell.col as f64 / cs,
                    f.level as f64 / max_level,
                ]);
            }
        }
        x.push(self.state.step_count as f64 / self.config.max_steps as f64);
        x
    }

    fn observations(&self) -> Vec<Vec<f64>> {
        let mut shared = Vec::with_capacity(3 * (self.config.n_agents + self.config.n_foods));
        for (c, &l) in self
            .state
            .agent_positions
            .iter()
            .zip(&self.config.agent_levels)
        {
            shared.extend([c.row as f64, c.col as f64, l as f64]);
        }
        for f in &self.state.foods {
            if f.collected {
                shared.extend([-1.0, -1.0, 0.0]);
            } else {
                shared.extend([f.cell.row as f64, f.cell.col as f64, f.level as f64]);
            }
        }
        self.state
            .agent_positions
            .iter()
            .map(|c| {
                let mut o = Vec::with_capacity(2 + shared.len());
                o.extend([c.row as f64, c.col as f64]);
                o.extend_from_slice(&shared);
                o
            })
            .collect()
    }

    fn step(&mut self, joint: &JointAction) -> Result<StepOutcome> {
        let (next, reward, terminal) = foraging_step(&self.state, joint.actions(), &self.config)?;
        self.state = next;
        Ok(StepOutcome { reward, terminal })
    }
}
