//! Desk-scale continuous environments and scripted behaviour policies.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{CtpError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    /// Point mass in `[-1, 1]²` with a central wall; reward 1 on reaching the goal disc.
    Maze,
    /// 1-D double integrator with a dense quadratic cost.
    Integrator,
}

/// Axis-aligned box obstacle.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Wall {
    pub x: [f64; 2],
    pub y: [f64; 2],
}

impl Wall {
    fn contains(&self, p: [f64; 2]) -> bool {
        p[0] >= self.x[0] && p[0] <= self.x[1] && p[1] >= self.y[0] && p[1] <= self.y[1]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvSpec {
    pub kind: EnvKind,
    pub state_dim: usize,
    pub action_dim: usize,
    pub dt: f64,
    pub max_steps: usize,
    /// Goal position (maze) or set point (integrator).
    pub goal: Vec<f64>,
    pub goal_radius: f64,
    /// Actions are clipped to `[-action_limit, action_limit]` per component.
    pub action_limit: f64,
    /// Positions and velocities are clipped to `[-bound, bound]`.
    pub position_bound: f64,
    pub velocity_bound: f64,
    pub walls: Vec<Wall>,
    /// Start positions are drawn uniformly from this box.
    pub start_x: [f64; 2],
    pub start_y: [f64; 2],
}

impl EnvSpec {
    pub fn maze() -> Self {
        Self {
            kind: EnvKind::Maze,
            state_dim: 4,
            action_dim: 2,
            dt: 0.1,
            max_steps: 100,
            goal: vec![0.75, 0.0],
            goal_radius: 0.2,
            action_limit: 1.0,
            position_bound: 1.0,
            velocity_bound: 1.0,
            walls: vec![Wall {
                x: [-0.25, 0.25],
                y: [-0.55, 0.55],
            }],
            start_x: [-0.9, -0.6],
            start_y: [-0.35, 0.35],
        }
    }

    pub fn integrator() -> Self {
        Self {
            kind: EnvKind::Integrator,
            state_dim: 2,
            action_dim: 1,
            dt: 0.1,
            max_steps: 50,
            goal: vec![0.0],
            goal_radius: 0.0,
            action_limit: 1.0,
            position_bound: 2.0,
            velocity_bound: 2.0,
            walls: Vec::new(),
            start_x: [-1.0, 1.0],
            start_y: [0.0, 0.0],
        }
    }

    pub fn for_kind(kind: EnvKind) -> Self {
        match kind {
            EnvKind::Maze => Self::maze(),
            EnvKind::Integrator => Self::integrator(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (d_s, d_a) = match self.kind {
            EnvKind::Maze => (4, 2),
            EnvKind::Integrator => (2, 1),
        };
        if self.state_dim != d_s || self.action_dim != d_a || self.goal.len() != d_a {
            return Err(CtpError::Config(format!("{:?} needs d_s={d_s}, d_a={d_a}", self.kind)));
        }
        if !(self.dt > 0.0 && self.action_limit > 0.0 && self.position_bound > 0.0 && self.velocity_bound > 0.0) {
            return Err(CtpError::Config("env dt and bounds must be positive".into()));
        }
        if self.max_steps == 0 {
            return Err(CtpError::Config("env max_steps must be positive".into()));
        }
        Ok(())
    }

    fn blocked(&self, p: [f64; 2]) -> bool {
        p.iter().any(|v| v.abs() > self.position_bound) || self.walls.iter().any(|w| w.contains(p))
    }

    pub fn in_goal(&self, s: &[f64]) -> bool {
        match self.kind {
            EnvKind::Maze => {
                let (dx, dy) = (s[0] - self.goal[0], s[1] - self.goal[1]);
                dx * dx + dy * dy <= self.goal_radius * self.goal_radius
            }
            EnvKind::Integrator => false,
        }
    }

    /// Draws an initial state.
    pub fn reset<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut draw = |r: [f64; 2]| if r[0] < r[1] { rng.random_range(r[0]..r[1]) } else { r[0] };
        match self.kind {
            EnvKind::Maze => vec![draw(self.start_x), draw(self.start_y), 0.0, 0.0],
            EnvKind::Integrator => vec![draw(self.start_x), 0.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub state: Vec<f64>,
    pub reward: f64,
    pub done: bool,
}

/// Deterministic transition; actions are clipped to the action box.
pub fn env_step(spec: &EnvSpec, s: &[f64], a: &[f64]) -> Result<StepOutcome> {
    if s.len() != spec.state_dim {
        return Err(CtpError::dim("env state", spec.state_dim, s.len()));
    }
    if a.len() != spec.action_dim {
        return Err(CtpError::dim("env action", spec.action_dim, a.len()));
    }
    let lim = spec.action_limit;
    let a: Vec<f64> = a.iter().map(|v| if v.is_nan() { 0.0 } else { v.clamp(-lim, lim) }).collect();
    let vb = spec.velocity_bound;
    match spec.kind {
        EnvKind::Integrator => {
            let pb = spec.position_bound;
            let p = (s[0] + s[1] * spec.dt).clamp(-pb, pb);
            let v = (s[1] + a[0] * spec.dt).clamp(-vb, vb);
            let err = p - spec.goal[0];
            Ok(StepOutcome {
                state: vec![p, v],
                reward: -(err * err + 0.01 * a[0] * a[0]),
                done: false,
            })
        }
        EnvKind::Maze => {
            let mut p = [s[0], s[1]];
            let mut v = [s[2], s[3]];
            // Move one axis at a time; a blocked axis keeps its position and stops.
            for axis in 0..2 {
                let mut trial = p;
                trial[axis] += v[axis] * spec.dt;
                if spec.blocked(trial) {
                    v[axis] = 0.0;
                } else {
                    p = trial;
                }
            }
            for axis in 0..2 {
                v[axis] = (v[axis] + a[axis] * spec.dt).clamp(-vb, vb);
            }
            let state = vec![p[0], p[1], v[0], v[1]];
            let done = spec.in_goal(&state);
            Ok(StepOutcome {
                state,
                reward: if done { 1.0 } else { 0.0 },
                done,
            })
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    /// PD controller toward the goal with Gaussian action noise.
    NoisyExpert,
    /// Uniform actions.
    Random,
    /// Each episode is expert with probability `expert_fraction`, else random.
    Mixture,
}

/// Scripted behaviour policy with per-episode state.
#[derive(Clone, Debug)]
pub struct ScriptedPolicy {
    spec: EnvSpec,
    expert: bool,
    noise: f64,
    route: Vec<[f64; 2]>,
    waypoint: usize,
}

/// Leading route points that count as reached once the agent is past them in x.
const CORRIDOR_WAYPOINTS: usize = 2;

/// Proportional and derivative gains of the expert controller.
pub const EXPERT_GAINS: (f64, f64) = (4.0, 2.5);

impl ScriptedPolicy {
    /// Starts an episode; the mixture decides expert vs random here.
    pub fn begin<R: Rng + ?Sized>(
        spec: &EnvSpec,
        kind: PolicyKind,
        expert_fraction: f64,
        noise: f64,
        rng: &mut R,
    ) -> Self {
        let expert = match kind {
            PolicyKind::NoisyExpert => true,
            PolicyKind::Random => false,
            PolicyKind::Mixture => rng.random::<f64>() < expert_fraction,
        };
        let route = match spec.kind {
            EnvKind::Maze => {
                // Pass the wall through the upper or lower corridor, then visit
                // a random point of the goal room so the data covers it.
                let side = if rng.random::<bool>() { 1.0 } else { -1.0 };
                let y = side * rng.random_range(0.65..0.9);
                let detour = [rng.random_range(0.45..0.98), rng.random_range(-0.9..0.9)];
                vec![[-0.4, y], [0.4, y], detour, [spec.goal[0], spec.goal[1]]]
            }
            EnvKind::Integrator => Vec::new(),
        };
        Self {
            spec: spec.clone(),
            expert,
            noise,
            route,
            waypoint: 0,
        }
    }

    pub fn is_expert(&self) -> bool {
        self.expert
    }

    pub fn act<R: Rng + ?Sized>(&mut self, s: &[f64], rng: &mut R) -> Vec<f64> {
        let lim = self.spec.action_limit;
        if !self.expert {
            return (0..self.spec.action_dim).map(|_| rng.random_range(-lim..lim)).collect();
        }
        let (kp, kd) = EXPERT_GAINS;
        let mut a = match self.spec.kind {
            EnvKind::Maze => {
                let last = self.route.len() - 1;
                while self.waypoint < last {
                    let w = self.route[self.waypoint];
                    let (dx, dy) = (w[0] - s[0], w[1] - s[1]);
                    let passed = self.waypoint < CORRIDOR_WAYPOINTS && s[0] > w[0] + 0.05;
                    if dx * dx + dy * dy < 0.15 * 0.15 || passed {
                        self.waypoint += 1;
                    } else {
                        break;
                    }
                }
                let w = self.route[self.waypoint];
                vec![kp * (w[0] - s[0]) - kd * s[2], kp * (w[1] - s[1]) - kd * s[3]]
            }
            EnvKind::Integrator => vec![kp * (self.spec.goal[0] - s[0]) - kd * s[1]],
        };
        if self.noise > 0.0 {
            let n = Normal::new(0.0, self.noise).expect("positive std");
            for v in &mut a {
                *v += n.sample(rng);
            }
        }
        a.iter().map(|v| v.clamp(-lim, lim)).collect()
    }
}
