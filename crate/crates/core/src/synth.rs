//! Minimum-jerk 7-dim action sequences for standalone tokenizer training.
//!
//! Each episode moves a pose (3 position, 3 axis-angle, 1 gripper) through
//! random waypoints with the quintic minimum-jerk profile per segment. The
//! action at step `t` is the pose delta for the first six dimensions and the
//! blended gripper command for the last.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub const ACTION_DIM: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MinJerkConfig {
    pub episodes: usize,
    /// Actions per episode.
    pub horizon: usize,
    /// Waypoint-to-waypoint segments per episode.
    pub segments: usize,
    /// Waypoint position range, `±position_range` meters per axis.
    pub position_range: f64,
    /// Waypoint rotation range, `±rotation_range` radians per axis.
    pub rotation_range: f64,
}

impl Default for MinJerkConfig {
    fn default() -> Self {
        MinJerkConfig {
            episodes: 200,
            horizon: 50,
            segments: 3,
            position_range: 0.3,
            rotation_range: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionEpisode {
    pub id: usize,
    pub actions: Vec<Vec<f64>>,
}

/// `10τ³ − 15τ⁴ + 6τ⁵`: zero velocity and acceleration at both ends.
pub fn min_jerk_profile(tau: f64) -> f64 {
    let t = tau.clamp(0.0, 1.0);
    t * t * t * (10.0 + t * (-15.0 + 6.0 * t))
}

fn waypoint<R: Rng>(cfg: &MinJerkConfig, rng: &mut R) -> [f64; ACTION_DIM] {
    let mut w = [0.0; ACTION_DIM];
    for (i, v) in w.iter_mut().enumerate() {
        *v = match i {
            0..=2 => rng.gen_range(-cfg.position_range..=cfg.position_range),
            3..=5 => rng.gen_range(-cfg.rotation_range..=cfg.rotation_range),
            _ => {
                if rng.gen_bool(0.5) {
                    1.0
                } else {
                    -1.0
                }
            }
        };
    }
    w
}

/// Pose at each of `horizon + 1` knots.
fn pose_track<R: Rng>(cfg: &MinJerkConfig, rng: &mut R) -> Vec<[f64; ACTION_DIM]> {
    let points: Vec<_> = (0..=cfg.segments).map(|_| waypoint(cfg, rng)).collect();
    (0..=cfg.horizon)
        .map(|k| {
            let s = k as f64 * cfg.segments as f64 / cfg.horizon as f64;
            let seg = (s.floor() as usize).min(cfg.segments - 1);
            let w = min_jerk_profile(s - seg as f64);
            let (a, b) = (&points[seg], &points[seg + 1]);
            std::array::from_fn(|i| a[i] + (b[i] - a[i]) * w)
        })
        .collect()
}

pub fn minimum_jerk_episodes(cfg: &MinJerkConfig, seed: u64) -> Result<Vec<ActionEpisode>> {
    if cfg.episodes == 0 || cfg.segments == 0 || cfg.horizon < cfg.segments.max(3) {
        return Err(Error::Config(
            "need episodes > 0, segments > 0 and horizon >= max(segments, 3)".into(),
        ));
    }
    let mut rng = rng::stream(seed, "minimum-jerk");
    Ok((0..cfg.episodes)
        .map(|id| {
            let track = pose_track(cfg, &mut rng);
            let actions = track
                .windows(2)
                .map(|w| {
                    let mut a: Vec<f64> = (0..6).map(|i| w[1][i] - w[0][i]).collect();
                    a.push(w[1][6]);
                    a
                })
                .collect();
            ActionEpisode { id, actions }
        })
        .collect())
}

/// Pools every action of every episode.
pub fn flatten_actions(episodes: &[ActionEpisode]) -> Vec<Vec<f64>> {
    episodes.iter().flat_map(|e| e.actions.iter().cloned()).collect()
}
