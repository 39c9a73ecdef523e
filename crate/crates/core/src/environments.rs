//! Desk-scale non-stationary environments: a 2-D particle maze with a
//! hidden goal and axis-aligned walls, Gaussian emission streams for pure
//! detection benchmarks, and the schedule that switches between contexts.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// Distance kept between a blocked particle and the wall it hit.
pub const WALL_MARGIN: f64 = 1e-6;
const MAX_COLLISION_PASSES: usize = 16;

/// Axis-aligned wall segment from `(x0, y0)` to `(x1, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Wall {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Wall {
    pub fn vertical(x: f64, y0: f64, y1: f64) -> Self {
        Self { x0: x, y0: y0.min(y1), x1: x, y1: y0.max(y1) }
    }

    pub fn horizontal(y: f64, x0: f64, x1: f64) -> Self {
        Self { x0: x0.min(x1), y0: y, x1: x0.max(x1), y1: y }
    }

    pub fn is_vertical(&self) -> bool {
        self.x0 == self.x1
    }

    fn is_axis_aligned(&self) -> bool {
        self.x0 == self.x1 || self.y0 == self.y1
    }

    /// Whether the closed segment `p -> q` touches this wall.
    pub fn blocks(&self, p: [f64; 2], q: [f64; 2]) -> bool {
        // Work in (along, across) coordinates where the wall sits at across = c.
        let (c, lo, hi, pa, pc, qa, qc) = if self.is_vertical() {
            (self.x0, self.y0.min(self.y1), self.y0.max(self.y1), p[1], p[0], q[1], q[0])
        } else {
            (self.y0, self.x0.min(self.x1), self.x0.max(self.x1), p[0], p[1], q[0], q[1])
        };
        let (dp, dq) = (pc - c, qc - c);
        if dp * dq > 0.0 {
            return false;
        }
        let along = if dp == dq {
            // Moving along the wall line itself.
            return pa.max(qa) >= lo && pa.min(qa) <= hi;
        } else {
            pa + (qa - pa) * dp / (dp - dq)
        };
        along >= lo && along <= hi
    }

    fn clip(&self, p: [f64; 2], mut q: [f64; 2]) -> [f64; 2] {
        let axis = if self.is_vertical() { 0 } else { 1 };
        let c = if self.is_vertical() { self.x0 } else { self.y0 };
        let side = if p[axis] < c { -1.0 } else { 1.0 };
        q[axis] = c + side * WALL_MARGIN;
        q
    }
}

/// One maze context: arena, walls and the latent goal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MazeSpec {
    pub name: String,
    /// `[x_min, x_max, y_min, y_max]`.
    pub bounds: [f64; 4],
    pub walls: Vec<Wall>,
    pub goal: [f64; 2],
    pub bonus_radius: f64,
    pub step_scale: f64,
    pub start: [f64; 2],
    pub episode_steps: usize,
}

impl Default for MazeSpec {
    fn default() -> Self {
        Self {
            name: "open".into(),
            bounds: [-5.0, 5.0, -5.0, 5.0],
            walls: Vec::new(),
            goal: [3.5, 3.5],
            bonus_radius: 0.5,
            step_scale: 0.5,
            start: [0.0, -3.5],
            episode_steps: 200,
        }
    }
}

impl MazeSpec {
    fn inside(&self, p: [f64; 2]) -> bool {
        let [x0, x1, y0, y1] = self.bounds;
        p[0] >= x0 && p[0] <= x1 && p[1] >= y0 && p[1] <= y1
    }

    pub fn validate(&self) -> Result<()> {
        let [x0, x1, y0, y1] = self.bounds;
        if !(x0 < x1 && y0 < y1) {
            return Err(Error::Config(format!("maze '{}': empty arena", self.name)));
        }
        if !self.inside(self.goal) || !self.inside(self.start) {
            return Err(Error::Config(format!("maze '{}': goal and start must lie in the arena", self.name)));
        }
        for w in &self.walls {
            if !w.is_axis_aligned() || !self.inside([w.x0, w.y0]) || !self.inside([w.x1, w.y1]) {
                return Err(Error::Config(format!(
                    "maze '{}': walls must be axis-aligned and inside the arena",
                    self.name
                )));
            }
        }
        if self.step_scale <= 0.0 || self.bonus_radius < 0.0 || self.episode_steps == 0 {
            return Err(Error::Config(format!(
                "maze '{}': step scale and episode length must be positive",
                self.name
            )));
        }
        Ok(())
    }

    pub fn reward(&self, s: [f64; 2]) -> f64 {
        let d = (s[0] - self.goal[0]).hypot(s[1] - self.goal[1]);
        -d + if d < self.bonus_radius { 1.0 } else { 0.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MazeOutcome {
    pub next: [f64; 2],
    pub reward: f64,
    pub terminal: bool,
}

/// Deterministic maze transition. Actions are clamped to `[-1, 1]^2`, the
/// target is clamped to the arena, and any wall on the way stops the motion
/// along the blocked axis.
pub fn maze_step(spec: &MazeSpec, s: [f64; 2], a: [f64; 2]) -> MazeOutcome {
    let [x0, x1, y0, y1] = spec.bounds;
    let a = a.map(|v| if v.is_nan() { 0.0 } else { v.clamp(-1.0, 1.0) });
    let mut q = [
        (s[0] + spec.step_scale * a[0]).clamp(x0, x1),
        (s[1] + spec.step_scale * a[1]).clamp(y0, y1),
    ];
    let mut resolved = false;
    for _ in 0..MAX_COLLISION_PASSES {
        match spec.walls.iter().find(|w| w.blocks(s, q)) {
            Some(w) => q = w.clip(s, q),
            None => {
                resolved = true;
                break;
            }
        }
    }
    if !resolved {
        q = s;
    }
    MazeOutcome {
        next: q,
        reward: spec.reward(q),
        terminal: false,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleEntry {
    pub start: u64,
    pub context: usize,
}

/// Change points `C_0 = 0 < C_1 < ...`, each naming the context id that is
/// active from that step on.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextSchedule {
    entries: Vec<ScheduleEntry>,
}

impl ContextSchedule {
    pub fn new(entries: Vec<ScheduleEntry>) -> Result<Self> {
        let s = Self { entries };
        s.validate()?;
        Ok(s)
    }

    pub fn constant(context: usize) -> Self {
        Self {
            entries: vec![ScheduleEntry { start: 0, context }],
        }
    }

    /// Scripted segments given as `(context, length)`.
    pub fn from_segments(segments: &[(usize, u64)]) -> Result<Self> {
        let mut entries = Vec::with_capacity(segments.len());
        let mut t = 0;
        for &(context, len) in segments {
            if len == 0 {
                return Err(Error::Config("schedule segments must be non-empty".into()));
            }
            entries.push(ScheduleEntry { start: t, context });
            t += len;
        }
        Self::new(entries)
    }

    /// Cycles through `contexts` every `period` steps until `horizon`.
    pub fn periodic(contexts: &[usize], period: u64, horizon: u64) -> Result<Self> {
        if contexts.is_empty() || period == 0 {
            return Err(Error::Config("periodic schedule needs contexts and a positive period".into()));
        }
        let entries = (0..horizon.max(1).div_ceil(period))
            .map(|i| ScheduleEntry {
                start: i * period,
                context: contexts[i as usize % contexts.len()],
            })
            .collect();
        Self::new(entries)
    }

    /// Random draws from a pool of `pool` contexts with segment lengths
    /// uniform in `[min_len, max_len]`; consecutive segments differ.
    pub fn random<R: Rng + ?Sized>(
        pool: usize,
        min_len: u64,
        max_len: u64,
        horizon: u64,
        rng: &mut R,
    ) -> Result<Self> {
        if pool < 2 || min_len == 0 || min_len > max_len {
            return Err(Error::Config("random schedule needs >= 2 contexts and 1 <= min_len <= max_len".into()));
        }
        let ids: Vec<usize> = (0..pool).collect();
        let mut entries = Vec::new();
        let mut t = 0;
        let mut current = *ids.choose(rng).expect("pool is non-empty");
        while t < horizon.max(1) {
            entries.push(ScheduleEntry { start: t, context: current });
            t += rng.gen_range(min_len..=max_len);
            let others: Vec<usize> = ids.iter().copied().filter(|&c| c != current).collect();
            current = *others.choose(rng).expect("pool has another context");
        }
        Self::new(entries)
    }

    pub fn validate(&self) -> Result<()> {
        match self.entries.first() {
            Some(e) if e.start == 0 => {}
            _ => return Err(Error::Config("schedule must start at step 0".into())),
        }
        if self.entries.windows(2).any(|w| w[0].start >= w[1].start) {
            return Err(Error::Config("schedule change points must be strictly increasing".into()));
        }
        Ok(())
    }

    pub fn entries(&self) -> &[ScheduleEntry] {
        &self.entries
    }

    /// Change points `C_i` for `i >= 1` that fall before `horizon`.
    pub fn change_points(&self, horizon: u64) -> Vec<u64> {
        self.entries
            .windows(2)
            .filter(|w| w[0].context != w[1].context)
            .map(|w| w[1].start)
            .filter(|&c| c < horizon)
            .collect()
    }

    pub fn max_context(&self) -> usize {
        self.entries.iter().map(|e| e.context).max().unwrap_or(0)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let s: Self = serde_json::from_str(text)?;
        s.validate()?;
        Ok(s)
    }
}

/// Context id active at step `t`: the entry with the largest `C_i <= t`.
pub fn schedule_context(schedule: &ContextSchedule, t: u64) -> usize {
    let i = schedule.entries.partition_point(|e| e.start <= t);
    schedule.entries[i - 1].context
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamContext {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

/// Observation-only stream whose emission Gaussian follows the schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianStreamSpec {
    pub contexts: Vec<StreamContext>,
    pub schedule: ContextSchedule,
}

impl GaussianStreamSpec {
    pub fn new(contexts: Vec<StreamContext>, schedule: ContextSchedule) -> Result<Self> {
        let spec = Self { contexts, schedule };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let dim = self.dim();
        for c in &self.contexts {
            check_dim("stream mean", dim, c.mean.len())?;
            check_dim("stream variance", dim, c.variance.len())?;
            if c.variance.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
                return Err(Error::Domain("stream variances must be positive".into()));
            }
        }
        if self.contexts.is_empty() || self.schedule.max_context() >= self.contexts.len() {
            return Err(Error::Config("schedule references an undefined stream context".into()));
        }
        self.schedule.validate()
    }

    pub fn dim(&self) -> usize {
        self.contexts.first().map_or(0, |c| c.mean.len())
    }
}

pub fn stream_emit<R: Rng + ?Sized>(spec: &GaussianStreamSpec, t: u64, rng: &mut R) -> Vec<f64> {
    let c = &spec.contexts[schedule_context(&spec.schedule, t)];
    c.mean
        .iter()
        .zip(&c.variance)
        .map(|(&m, &v)| m + v.sqrt() * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Result of one interaction with an [`Environment`].
#[derive(Debug, Clone, PartialEq)]
pub struct EnvStep {
    pub next_state: Vec<f64>,
    pub reward: f64,
    pub terminal: bool,
    /// Episode cut by the step limit; the next observation is a reset state.
    pub truncated: bool,
    /// Context id that generated this transition.
    pub context: usize,
}

pub trait Environment {
    fn state_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    /// Observation the agent should act on next.
    fn observation(&self) -> Vec<f64>;
    /// Global step counter `t` (not reset between episodes).
    fn time(&self) -> u64;
    fn context(&self) -> usize;
    fn step(&mut self, action: &[f64]) -> Result<EnvStep>;
}

/// Maze whose geometry and goal follow a [`ContextSchedule`]. Episodes reset
/// to the start position every `episode_steps` steps.
#[derive(Debug, Clone)]
pub struct NonStationaryMaze {
    pool: Vec<MazeSpec>,
    schedule: ContextSchedule,
    position: [f64; 2],
    t: u64,
    episode_t: usize,
}

impl NonStationaryMaze {
    pub fn new(pool: Vec<MazeSpec>, schedule: ContextSchedule) -> Result<Self> {
        if pool.is_empty() || schedule.max_context() >= pool.len() {
            return Err(Error::Config("schedule references an undefined maze".into()));
        }
        for spec in &pool {
            spec.validate()?;
        }
        schedule.validate()?;
        let start = pool[schedule_context(&schedule, 0)].start;
        Ok(Self {
            pool,
            schedule,
            position: start,
            t: 0,
            episode_t: 0,
        })
    }

    pub fn spec(&self, context: usize) -> &MazeSpec {
        &self.pool[context]
    }

    pub fn pool(&self) -> &[MazeSpec] {
        &self.pool
    }

    pub fn schedule(&self) -> &ContextSchedule {
        &self.schedule
    }

    pub fn position(&self) -> [f64; 2] {
        self.position
    }
}

impl Environment for NonStationaryMaze {
    fn state_dim(&self) -> usize {
        2
    }

    fn action_dim(&self) -> usize {
        2
    }

    fn observation(&self) -> Vec<f64> {
        self.position.to_vec()
    }

    fn time(&self) -> u64 {
        self.t
    }

    fn context(&self) -> usize {
        schedule_context(&self.schedule, self.t)
    }

    fn step(&mut self, action: &[f64]) -> Result<EnvStep> {
        check_dim("maze action", 2, action.len())?;
        let context = self.context();
        let spec = &self.pool[context];
        let out = maze_step(spec, self.position, [action[0], action[1]]);
        self.t += 1;
        self.episode_t += 1;
        let truncated = self.episode_t >= spec.episode_steps;
        if truncated {
            self.episode_t = 0;
            self.position = self.pool[self.context()].start;
        } else {
            self.position = out.next;
        }
        Ok(EnvStep {
            next_state: out.next.to_vec(),
            reward: out.reward,
            terminal: out.terminal,
            truncated,
            context,
        })
    }
}
