//! Porous gridworld maze with visitation, proximity and goal rewards.
//!
//! Walls sit on the edges between cells. A perfect maze is carved by
//! recursive backtracking and each remaining interior wall is then removed
//! independently with probability `porosity`.

use std::collections::VecDeque;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{EnvError, Environment, RewardBreakdown, Step};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MazeSpec {
    pub width: usize,
    pub height: usize,
    pub porosity: f64,
    pub time_limit: usize,
    /// Side of the square around the agent credited for exploration.
    pub blur: usize,
    pub prox_radius: f64,
    pub prox_mul: f64,
    pub goal_count: usize,
    /// Multiplies every reward component, including the baseline.
    pub reward_scale: f64,
    /// Radius of the egocentric local view, in blocks.
    pub view_radius: usize,
    /// Side of the downsampled visitation map in the observation.
    pub map_size: usize,
}

impl Default for MazeSpec {
    fn default() -> Self {
        Self {
            width: 8,
            height: 8,
            porosity: 0.2,
            time_limit: 512,
            blur: 1,
            prox_radius: 10.0,
            prox_mul: 0.03,
            goal_count: 3,
            reward_scale: 0.1,
            view_radius: 2,
            map_size: 16,
        }
    }
}

pub const GOAL_REWARD: f64 = 50.0;
pub const FINAL_GOAL_BONUS: f64 = 150.0;
pub const BASE_REWARD: f64 = -10.0;

/// Local-view channels: wall, floor, and one per goal colour.
const VIEW_CHANNELS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Heading {
    North,
    East,
    South,
    West,
}

impl Heading {
    pub const ALL: [Heading; 4] = [Heading::North, Heading::East, Heading::South, Heading::West];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Heading {
        Self::ALL[i % 4]
    }

    pub fn delta(self) -> (i64, i64) {
        match self {
            Heading::North => (0, -1),
            Heading::East => (1, 0),
            Heading::South => (0, 1),
            Heading::West => (-1, 0),
        }
    }

    pub fn rotate(self, quarter_turns_right: usize) -> Heading {
        Self::from_index(self.index() + quarter_turns_right)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MazeAction {
    Forward,
    Backward,
    StrafeLeft,
    StrafeRight,
    TurnLeft,
    TurnRight,
}

impl MazeAction {
    pub const COUNT: usize = 6;

    pub fn from_index(i: usize) -> Result<MazeAction, EnvError> {
        use MazeAction::*;
        [Forward, Backward, StrafeLeft, StrafeRight, TurnLeft, TurnRight]
            .get(i)
            .copied()
            .ok_or(EnvError::InvalidAction { action: i, num_actions: Self::COUNT })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Goal {
    pub cell: (usize, usize),
    pub found: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MazeState {
    pub width: usize,
    pub height: usize,
    /// Wall between `(x, y)` and `(x + 1, y)`, indexed `y * (width - 1) + x`.
    pub east_walls: Vec<bool>,
    /// Wall between `(x, y)` and `(x, y + 1)`, indexed `y * width + x`.
    pub south_walls: Vec<bool>,
    pub agent: (usize, usize),
    pub heading: Heading,
    /// Goals in colour order red, green, blue.
    pub goals: Vec<Goal>,
    /// Row-major visitation flags.
    pub visited: Vec<bool>,
    pub steps: usize,
}

impl MazeState {
    /// A maze with every interior wall present; used by tests and the generator.
    pub fn closed(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            east_walls: vec![true; (width - 1) * height],
            south_walls: vec![true; width * (height - 1)],
            agent: (0, 0),
            heading: Heading::North,
            goals: Vec::new(),
            visited: vec![false; width * height],
            steps: 0,
        }
    }

    pub fn cell_index(&self, (x, y): (usize, usize)) -> usize {
        y * self.width + x
    }

    /// Whether movement from `cell` one step in `dir` is blocked.
    pub fn blocked(&self, (x, y): (usize, usize), dir: Heading) -> bool {
        match dir {
            Heading::North => y == 0 || self.south_walls[(y - 1) * self.width + x],
            Heading::South => y + 1 >= self.height || self.south_walls[y * self.width + x],
            Heading::West => x == 0 || self.east_walls[y * (self.width - 1) + x - 1],
            Heading::East => x + 1 >= self.width || self.east_walls[y * (self.width - 1) + x],
        }
    }

    pub fn neighbor(&self, (x, y): (usize, usize), dir: Heading) -> Option<(usize, usize)> {
        if self.blocked((x, y), dir) {
            return None;
        }
        let (dx, dy) = dir.delta();
        Some(((x as i64 + dx) as usize, (y as i64 + dy) as usize))
    }

    fn remove_wall(&mut self, (x, y): (usize, usize), dir: Heading) {
        match dir {
            Heading::North => self.south_walls[(y - 1) * self.width + x] = false,
            Heading::South => self.south_walls[y * self.width + x] = false,
            Heading::West => self.east_walls[y * (self.width - 1) + x - 1] = false,
            Heading::East => self.east_walls[y * (self.width - 1) + x] = false,
        }
    }

    pub fn visited_count(&self) -> usize {
        self.visited.iter().filter(|v| **v).count()
    }

    pub fn all_goals_found(&self) -> bool {
        self.goals.iter().all(|g| g.found)
    }

    /// Block-grid view: `(2W+1) × (2H+1)`, cells at odd coordinates, wall
    /// segments between them, corner posts solid when any adjoining wall is.
    pub fn is_wall_block(&self, bx: i64, by: i64) -> bool {
        let (bw, bh) = (2 * self.width as i64 + 1, 2 * self.height as i64 + 1);
        if bx <= 0 || by <= 0 || bx >= bw - 1 || by >= bh - 1 {
            return true;
        }
        match (bx % 2, by % 2) {
            (1, 1) => false,
            (0, 1) => {
                let (x, y) = ((bx / 2 - 1) as usize, (by / 2) as usize);
                self.east_walls[y * (self.width - 1) + x]
            }
            (1, 0) => {
                let (x, y) = ((bx / 2) as usize, (by / 2 - 1) as usize);
                self.south_walls[y * self.width + x]
            }
            _ => [(bx - 1, by), (bx + 1, by), (bx, by - 1), (bx, by + 1)].iter().any(|&(x, y)| self.is_wall_block(x, y)),
        }
    }
}

pub fn interior_wall_slots(width: usize, height: usize) -> usize {
    (width - 1) * height + width * (height - 1)
}

pub fn interior_wall_count(state: &MazeState) -> usize {
    state.east_walls.iter().chain(&state.south_walls).filter(|w| **w).count()
}

/// Carves a perfect maze by randomized depth-first backtracking, removes
/// each remaining interior wall with probability `porosity`, then places
/// the agent and goals on distinct cells.
pub fn generate_maze(spec: &MazeSpec, seed: u64) -> MazeState {
    assert!(spec.width >= 2 && spec.height >= 2, "maze must be at least 2x2");
    assert!((0.0..=1.0).contains(&spec.porosity), "porosity must lie in [0, 1]");
    assert!(spec.goal_count < spec.width * spec.height, "not enough cells for goals and agent");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = MazeState::closed(spec.width, spec.height);

    let mut seen = vec![false; spec.width * spec.height];
    let start = (rng.random_range(0..spec.width), rng.random_range(0..spec.height));
    let mut stack = vec![start];
    seen[state.cell_index(start)] = true;
    while let Some(&cell) = stack.last() {
        let mut options: Vec<Heading> = Heading::ALL
            .into_iter()
            .filter(|&d| {
                let (dx, dy) = d.delta();
                let (nx, ny) = (cell.0 as i64 + dx, cell.1 as i64 + dy);
                nx >= 0 && ny >= 0 && (nx as usize) < spec.width && (ny as usize) < spec.height && !seen[ny as usize * spec.width + nx as usize]
            })
            .collect();
        if options.is_empty() {
            stack.pop();
            continue;
        }
        options.shuffle(&mut rng);
        let dir = options[0];
        state.remove_wall(cell, dir);
        let (dx, dy) = dir.delta();
        let next = ((cell.0 as i64 + dx) as usize, (cell.1 as i64 + dy) as usize);
        seen[state.cell_index(next)] = true;
        stack.push(next);
    }

    for w in state.east_walls.iter_mut().chain(state.south_walls.iter_mut()) {
        if *w && rng.random::<f64>() < spec.porosity {
            *w = false;
        }
    }

    let mut cells: Vec<(usize, usize)> = (0..spec.height).flat_map(|y| (0..spec.width).map(move |x| (x, y))).collect();
    cells.shuffle(&mut rng);
    state.agent = cells[0];
    state.goals = cells[1..=spec.goal_count].iter().map(|&cell| Goal { cell, found: false }).collect();
    state.heading = Heading::from_index(rng.random_range(0..4));
    let i = state.cell_index(state.agent);
    state.visited[i] = true;
    state
}

/// Flood fill from the agent; true when every goal is reachable.
pub fn connectivity_check(state: &MazeState) -> bool {
    let mut seen = vec![false; state.width * state.height];
    let mut queue = VecDeque::from([state.agent]);
    seen[state.cell_index(state.agent)] = true;
    while let Some(cell) = queue.pop_front() {
        for dir in Heading::ALL {
            if let Some(n) = state.neighbor(cell, dir) {
                let i = state.cell_index(n);
                if !seen[i] {
                    seen[i] = true;
                    queue.push_back(n);
                }
            }
        }
    }
    state.goals.iter().all(|g| seen[state.cell_index(g.cell)])
}

/// `(10 − Δ)² · mul` for `0 ≤ Δ ≤ 10`, where `Δ = dist − (agent_radius + box_radius + s)`.
pub fn proximity_reward(dist: f64, agent_radius: f64, box_radius: f64, s: f64, radius: f64, mul: f64) -> f64 {
    let delta = dist - (agent_radius + box_radius + s);
    if !(0.0..=radius).contains(&delta) {
        0.0
    } else {
        (radius - delta).powi(2) * mul
    }
}

fn cell_distance(a: (usize, usize), b: (usize, usize)) -> f64 {
    let dx = a.0 as f64 - b.0 as f64;
    let dy = a.1 as f64 - b.1 as f64;
    (dx * dx + dy * dy).sqrt()
}

/// The maze as an episodic environment; every reset draws a fresh layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Maze {
    pub spec: MazeSpec,
    pub state: MazeState,
    rng: ChaCha8Rng,
    finished: bool,
}

impl Maze {
    pub fn new(spec: MazeSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let state = generate_maze(&spec, rng.random());
        Self { spec, state, rng, finished: false }
    }

    /// Wraps an existing layout, e.g. a hand-built test fixture.
    pub fn from_state(spec: MazeSpec, state: MazeState, seed: u64) -> Self {
        Self { spec, state, rng: ChaCha8Rng::seed_from_u64(seed), finished: false }
    }

    /// Marks the blur square around the agent visited; returns how many
    /// cells were new.
    fn visit(&mut self) -> usize {
        let b = self.spec.blur.max(1) as i64;
        let (ax, ay) = (self.state.agent.0 as i64, self.state.agent.1 as i64);
        let lo = (b - 1) / 2;
        let mut fresh = 0;
        for y in ay - lo..ay - lo + b {
            for x in ax - lo..ax - lo + b {
                if x < 0 || y < 0 || x as usize >= self.state.width || y as usize >= self.state.height {
                    continue;
                }
                let i = y as usize * self.state.width + x as usize;
                if !self.state.visited[i] {
                    self.state.visited[i] = true;
                    fresh += 1;
                }
            }
        }
        fresh
    }

    fn exploration_reward(&self, fresh: usize) -> f64 {
        let b = self.spec.blur;
        if b > 1 {
            fresh as f64 / (b * b) as f64
        } else {
            fresh as f64
        }
    }

    fn proximity_total(&self) -> f64 {
        self.state
            .goals
            .iter()
            .filter(|g| !g.found)
            .map(|g| proximity_reward(cell_distance(self.state.agent, g.cell), 0.0, 0.0, 0.0, self.spec.prox_radius, self.spec.prox_mul))
            .sum()
    }

    /// Per-colour proximity intensity in `[0, 1]`.
    fn proximity_intensities(&self) -> [f32; 3] {
        let mut out = [0.0; 3];
        for (i, g) in self.state.goals.iter().take(3).enumerate() {
            if !g.found {
                let r = proximity_reward(cell_distance(self.state.agent, g.cell), 0.0, 0.0, 0.0, self.spec.prox_radius, 1.0);
                out[i] = (r / (self.spec.prox_radius * self.spec.prox_radius)) as f32;
            }
        }
        out
    }

    pub fn observation(&self) -> Vec<f32> {
        let s = &self.state;
        let mut obs = Vec::with_capacity(self.obs_dim());
        let r = self.spec.view_radius as i64;
        let forward = s.heading.delta();
        let right = s.heading.rotate(1).delta();
        let (bx, by) = (2 * s.agent.0 as i64 + 1, 2 * s.agent.1 as i64 + 1);
        for row in 0..(2 * r + 1) {
            let ahead = r - row;
            for col in 0..(2 * r + 1) {
                let side = col - r;
                let (x, y) = (bx + ahead * forward.0 + side * right.0, by + ahead * forward.1 + side * right.1);
                let mut channel = if s.is_wall_block(x, y) { 0 } else { 1 };
                if x % 2 == 1 && y % 2 == 1 && channel == 1 {
                    let cell = ((x / 2) as usize, (y / 2) as usize);
                    if let Some(k) = s.goals.iter().position(|g| !g.found && g.cell == cell) {
                        channel = 2 + k.min(2);
                    }
                }
                let mut one_hot = [0.0f32; VIEW_CHANNELS];
                one_hot[channel] = 1.0;
                obs.extend_from_slice(&one_hot);
            }
        }
        let m = self.spec.map_size;
        for py in 0..m {
            for px in 0..m {
                let (x, y) = (px * s.width / m, py * s.height / m);
                obs.push(if s.visited[y * s.width + x] { 1.0 } else { 0.0 });
            }
        }
        obs.extend_from_slice(&self.proximity_intensities());
        obs.extend((0..s.width).map(|x| if x == s.agent.0 { 1.0 } else { 0.0 }));
        obs.extend((0..s.height).map(|y| if y == s.agent.1 { 1.0 } else { 0.0 }));
        obs.extend((0..4).map(|h| if h == s.heading.index() { 1.0 } else { 0.0 }));
        obs
    }

    /// Applies one action and returns the raw reward breakdown.
    pub fn transition(&mut self, action: MazeAction) -> RewardBreakdown {
        let s = &mut self.state;
        let moved = match action {
            MazeAction::Forward => Some(s.heading),
            MazeAction::Backward => Some(s.heading.rotate(2)),
            MazeAction::StrafeLeft => Some(s.heading.rotate(3)),
            MazeAction::StrafeRight => Some(s.heading.rotate(1)),
            MazeAction::TurnLeft => {
                s.heading = s.heading.rotate(3);
                None
            }
            MazeAction::TurnRight => {
                s.heading = s.heading.rotate(1);
                None
            }
        };
        if let Some(dir) = moved {
            if let Some(next) = s.neighbor(s.agent, dir) {
                s.agent = next;
            }
        }
        s.steps += 1;
        let fresh = self.visit();
        let mut goal = 0.0;
        let agent = self.state.agent;
        for g in self.state.goals.iter_mut() {
            if !g.found && g.cell == agent {
                g.found = true;
                goal += GOAL_REWARD;
                if self.state.goals.iter().all(|g| g.found) {
                    goal += FINAL_GOAL_BONUS;
                }
                break;
            }
        }
        RewardBreakdown::new(self.exploration_reward(fresh), self.proximity_total(), goal, BASE_REWARD)
    }

    /// Top-down image as a binary PPM (P6).
    ///
    /// Each cell is `CELL_PX` pixels square with walls on its boundary
    /// lines. Pixel `(1, 1)` inside a cell shows only visitation shading.
    pub fn render_ppm(&self) -> Vec<u8> {
        let s = &self.state;
        let (w, h) = (s.width * CELL_PX + 1, s.height * CELL_PX + 1);
        let mut px = vec![COLOR_UNVISITED; w * h];
        for y in 0..s.height {
            for x in 0..s.width {
                if s.visited[y * s.width + x] {
                    for yy in y * CELL_PX + 1..(y + 1) * CELL_PX {
                        for xx in x * CELL_PX + 1..(x + 1) * CELL_PX {
                            px[yy * w + xx] = COLOR_VISITED;
                        }
                    }
                }
            }
        }
        // Wall segments, plus a post wherever a segment ends.
        let mut wall = |x0: usize, y0: usize, x1: usize, y1: usize| {
            for yy in y0..=y1 {
                for xx in x0..=x1 {
                    px[yy * w + xx] = COLOR_WALL;
                }
            }
        };
        wall(0, 0, w - 1, 0);
        wall(0, h - 1, w - 1, h - 1);
        wall(0, 0, 0, h - 1);
        wall(w - 1, 0, w - 1, h - 1);
        for y in 0..s.height {
            for x in 0..s.width - 1 {
                if s.east_walls[y * (s.width - 1) + x] {
                    let lx = (x + 1) * CELL_PX;
                    wall(lx, y * CELL_PX, lx, (y + 1) * CELL_PX);
                }
            }
        }
        for y in 0..s.height - 1 {
            for x in 0..s.width {
                if s.south_walls[y * s.width + x] {
                    let ly = (y + 1) * CELL_PX;
                    wall(x * CELL_PX, ly, (x + 1) * CELL_PX, ly);
                }
            }
        }
        for (k, g) in s.goals.iter().enumerate() {
            if !g.found {
                fill_box(&mut px, w, g.cell, 3, CELL_PX - 3, GOAL_COLORS[k.min(2)]);
            }
        }
        // Agent: a body square plus a nose pixel toward the heading.
        fill_box(&mut px, w, s.agent, 3, CELL_PX - 3, COLOR_AGENT);
        let c = CELL_PX / 2;
        let (dx, dy) = s.heading.delta();
        let nose = ((s.agent.0 * CELL_PX) as i64 + c as i64 + dx * 2, (s.agent.1 * CELL_PX) as i64 + c as i64 + dy * 2);
        px[nose.1 as usize * w + nose.0 as usize] = COLOR_NOSE;

        let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
        for p in px {
            out.extend_from_slice(&p);
        }
        out
    }

    /// Character grid: `#` wall, `.` visited, space unvisited, `R G B`
    /// unfound goals, `^ > v <` the agent.
    pub fn render_ascii(&self) -> String {
        let s = &self.state;
        let (bw, bh) = (2 * s.width + 1, 2 * s.height + 1);
        let mut out = String::with_capacity((bw + 1) * bh);
        for by in 0..bh as i64 {
            for bx in 0..bw as i64 {
                let ch = if s.is_wall_block(bx, by) {
                    '#'
                } else if bx % 2 == 1 && by % 2 == 1 {
                    let cell = ((bx / 2) as usize, (by / 2) as usize);
                    if cell == s.agent {
                        ['^', '>', 'v', '<'][s.heading.index()]
                    } else if let Some(k) = s.goals.iter().position(|g| !g.found && g.cell == cell) {
                        ['R', 'G', 'B'][k.min(2)]
                    } else if s.visited[s.cell_index(cell)] {
                        '.'
                    } else {
                        ' '
                    }
                } else {
                    ' '
                };
                out.push(ch);
            }
            out.push('\n');
        }
        out
    }
}

pub const CELL_PX: usize = 8;
pub const COLOR_WALL: [u8; 3] = [20, 20, 20];
pub const COLOR_VISITED: [u8; 3] = [200, 200, 200];
pub const COLOR_UNVISITED: [u8; 3] = [255, 255, 255];
const COLOR_AGENT: [u8; 3] = [240, 160, 0];
const COLOR_NOSE: [u8; 3] = [0, 0, 0];
const GOAL_COLORS: [[u8; 3]; 3] = [[220, 30, 30], [30, 180, 30], [30, 60, 220]];

fn fill_box(px: &mut [[u8; 3]], w: usize, cell: (usize, usize), from: usize, to: usize, color: [u8; 3]) {
    for yy in cell.1 * CELL_PX + from..cell.1 * CELL_PX + to {
        for xx in cell.0 * CELL_PX + from..cell.0 * CELL_PX + to {
            px[yy * w + xx] = color;
        }
    }
}

impl Environment for Maze {
    fn obs_dim(&self) -> usize {
        let v = 2 * self.spec.view_radius + 1;
        v * v * VIEW_CHANNELS + self.spec.map_size * self.spec.map_size + 3 + self.spec.width + self.spec.height + 4
    }

    fn num_actions(&self) -> usize {
        MazeAction::COUNT
    }

    fn time_limit(&self) -> usize {
        self.spec.time_limit
    }

    fn reset(&mut self) -> Vec<f32> {
        self.state = generate_maze(&self.spec, self.rng.random());
        self.finished = false;
        self.observation()
    }

    fn step(&mut self, action: usize) -> Result<Step, EnvError> {
        let action = MazeAction::from_index(action)?;
        if self.finished {
            return Err(EnvError::EpisodeOver);
        }
        let breakdown = self.transition(action);
        let terminated = self.state.all_goals_found();
        let truncated = !terminated && self.state.steps >= self.spec.time_limit;
        self.finished = terminated || truncated;
        Ok(Step { obs: self.observation(), reward: breakdown.total * self.spec.reward_scale, breakdown, terminated, truncated })
    }

    fn steps(&self) -> usize {
        self.state.steps
    }
}
