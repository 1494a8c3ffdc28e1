//! A 2D tabletop with one agent, one object and one goal.
//!
//! Observation (9): agent xy, object xy, goal xy, gripper closed (0/1),
//! holding (0/1), elapsed fraction of the horizon. The task family is not
//! observed; a policy has to infer it from its prompt.
//!
//! Action (3): agent displacement (norm clamped to [`MAX_STEP`]) and a
//! gripper command (`> 0` closes).

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const OBS_DIM: usize = 9;
pub const ACT_DIM: usize = 3;
pub const HORIZON: usize = 50;
pub const MAX_STEP: f64 = 0.1;
/// Proximity for grasping, contact and success.
pub const THRESHOLD: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskFamily {
    Reach,
    PickPlace,
    Push,
}

impl TaskFamily {
    pub const ALL: [TaskFamily; 3] = [TaskFamily::Reach, TaskFamily::PickPlace, TaskFamily::Push];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskFamily::Reach => "reach",
            TaskFamily::PickPlace => "pick-place",
            TaskFamily::Push => "push",
        }
    }
}

impl fmt::Display for TaskFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskFamily::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown task family `{s}`")))
    }
}

pub type Point = [f64; 2];

fn dist(a: Point, b: Point) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn in_workspace(p: Point) -> bool {
    p.iter().all(|v| v.is_finite() && (-1.0..=1.0).contains(v))
}

/// Scales `d` down to norm [`MAX_STEP`] when longer.
pub fn clamp_step(d: Point) -> Point {
    let n = (d[0] * d[0] + d[1] * d[1]).sqrt();
    if n > MAX_STEP {
        [d[0] * MAX_STEP / n, d[1] * MAX_STEP / n]
    } else {
        d
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyEnvState {
    pub task: TaskFamily,
    pub agent: Point,
    pub object: Point,
    pub goal: Point,
    pub gripper_closed: bool,
    pub holding: bool,
    pub step: usize,
    pub horizon: usize,
}

impl ToyEnvState {
    pub fn new(task: TaskFamily, agent: Point, object: Point, goal: Point) -> Result<Self> {
        if ![agent, object, goal].into_iter().all(in_workspace) {
            return Err(Error::Input("positions must lie in [-1, 1]^2".into()));
        }
        Ok(ToyEnvState {
            task,
            agent,
            object,
            goal,
            gripper_closed: false,
            holding: false,
            step: 0,
            horizon: HORIZON,
        })
    }

    pub fn observation(&self) -> Vec<f64> {
        vec![
            self.agent[0],
            self.agent[1],
            self.object[0],
            self.object[1],
            self.goal[0],
            self.goal[1],
            f64::from(u8::from(self.gripper_closed)),
            f64::from(u8::from(self.holding)),
            self.step as f64 / self.horizon as f64,
        ]
    }

    pub fn is_success(&self) -> bool {
        match self.task {
            TaskFamily::Reach => {
                dist(self.agent, self.goal) < THRESHOLD && self.gripper_closed && !self.holding
            }
            TaskFamily::PickPlace => {
                dist(self.object, self.goal) < THRESHOLD && !self.gripper_closed && !self.holding
            }
            TaskFamily::Push => dist(self.object, self.goal) < THRESHOLD && !self.holding,
        }
    }

    pub fn is_done(&self) -> bool {
        self.is_success() || self.step >= self.horizon
    }

    /// Advances one step. Fails on a malformed action or after the horizon.
    pub fn step(&mut self, action: &[f64]) -> Result<()> {
        if action.len() != ACT_DIM {
            return Err(Error::dim("env step", &[action.len()], &[ACT_DIM]));
        }
        if action.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("non-finite action".into()));
        }
        if self.step >= self.horizon {
            return Err(Error::Usage("episode is over".into()));
        }
        let d = clamp_step([action[0], action[1]]);
        let in_contact = dist(self.agent, self.object) < THRESHOLD;
        self.agent = [
            (self.agent[0] + d[0]).clamp(-1.0, 1.0),
            (self.agent[1] + d[1]).clamp(-1.0, 1.0),
        ];
        self.gripper_closed = action[2] > 0.0;
        if !self.gripper_closed {
            self.holding = false;
            if in_contact {
                // An open gripper in contact drags the object along.
                self.object = [
                    (self.object[0] + d[0]).clamp(-1.0, 1.0),
                    (self.object[1] + d[1]).clamp(-1.0, 1.0),
                ];
            }
        } else if self.holding || dist(self.agent, self.object) < THRESHOLD {
            self.holding = true;
            self.object = self.agent;
        }
        self.step += 1;
        Ok(())
    }
}

/// Distance from `p` to the segment `a`–`b`.
fn segment_distance(p: Point, a: Point, b: Point) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p[0] - a[0]) * ab[0] + (p[1] - a[1]) * ab[1]) / len2).clamp(0.0, 1.0)
    };
    dist(p, [a[0] + t * ab[0], a[1] + t * ab[1]])
}

/// Range of sampled coordinates, `±SAMPLE_RANGE`.
pub const SAMPLE_RANGE: f64 = 0.5;
const MIN_SEPARATION: f64 = 0.2;
/// Reach layouts keep the object this far from the straight path.
const REACH_CLEARANCE: f64 = 0.15;

/// Random initial state; pairwise separations keep every task non-trivial.
pub fn sample_state<R: Rng>(task: TaskFamily, rng: &mut R) -> ToyEnvState {
    let mut p = || {
        [
            rng.gen_range(-SAMPLE_RANGE..=SAMPLE_RANGE),
            rng.gen_range(-SAMPLE_RANGE..=SAMPLE_RANGE),
        ]
    };
    loop {
        let (agent, object, goal) = (p(), p(), p());
        let spread = dist(agent, object) >= MIN_SEPARATION
            && dist(object, goal) >= MIN_SEPARATION
            && dist(agent, goal) >= MIN_SEPARATION;
        let clear = task != TaskFamily::Reach || segment_distance(object, agent, goal) >= REACH_CLEARANCE;
        if spread && clear {
            return ToyEnvState::new(task, agent, object, goal).expect("sampled inside workspace");
        }
    }
}

fn toward(from: Point, to: Point) -> Point {
    clamp_step([to[0] - from[0], to[1] - from[1]])
}

/// Deterministic proportional controller (unit gain, clamped step) toward
/// the current subgoal.
pub fn scripted_expert(s: &ToyEnvState) -> Vec<f64> {
    const OPEN: f64 = -1.0;
    const CLOSE: f64 = 1.0;
    let (d, grip) = match s.task {
        TaskFamily::Reach => {
            if dist(s.agent, s.goal) < THRESHOLD {
                ([0.0, 0.0], CLOSE)
            } else {
                (toward(s.agent, s.goal), OPEN)
            }
        }
        TaskFamily::PickPlace => {
            if s.holding {
                if dist(s.object, s.goal) < THRESHOLD {
                    ([0.0, 0.0], OPEN)
                } else {
                    (toward(s.agent, s.goal), CLOSE)
                }
            } else if dist(s.agent, s.object) < THRESHOLD {
                ([0.0, 0.0], CLOSE)
            } else {
                (toward(s.agent, s.object), OPEN)
            }
        }
        TaskFamily::Push => {
            if dist(s.agent, s.object) < THRESHOLD {
                (toward(s.object, s.goal), OPEN)
            } else {
                (toward(s.agent, s.object), OPEN)
            }
        }
    };
    vec![d[0], d[1], grip]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reach_moves_in_straight_steps() {
        let s = ToyEnvState::new(TaskFamily::Reach, [-0.5, 0.0], [0.0, 0.8], [0.5, 0.0]).unwrap();
        let a = scripted_expert(&s);
        assert!((a[0] - 0.1).abs() < 1e-15 && a[1] == 0.0 && a[2] < 0.0);
    }

    #[test]
    fn at_goal_reach_action_has_zero_motion() {
        let s = ToyEnvState::new(TaskFamily::Reach, [0.3, 0.3], [0.0, 0.8], [0.3, 0.3]).unwrap();
        let a = scripted_expert(&s);
        assert_eq!(&a[..2], &[0.0, 0.0]);
    }

    #[test]
    fn bad_positions_rejected() {
        assert!(ToyEnvState::new(TaskFamily::Push, [1.5, 0.0], [0.0; 2], [0.0; 2]).is_err());
    }

    #[test]
    fn family_names_round_trip() {
        for t in TaskFamily::ALL {
            assert_eq!(t.as_str().parse::<TaskFamily>().unwrap(), t);
        }
    }
}
