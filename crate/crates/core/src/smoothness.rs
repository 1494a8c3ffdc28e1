//! Latent-trajectory smoothness.
//!
//! The score of a trajectory `z_1..z_T` is its discrete bending energy
//!
//! ```text
//! E = Σ_{t=2}^{T−1} ‖z_{t+1} − 2z_t + z_{t−1}‖² / s̄²
//! ```
//!
//! with `s̄` the mean distance between consecutive points. Dividing by `s̄²`
//! makes `E` invariant to translation and uniform scaling, so latents of
//! very different magnitudes (bin indices vs. encoder outputs) compare on
//! one axis. Lower is smoother.

use std::io::Write;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::synth::ActionEpisode;
use crate::tokenizer::Tokenizer;

/// Number of leading timesteps kept for projection plots.
pub const PROJECTION_STEPS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentTrajectory {
    /// Row-major `[T, dim]`.
    pub points: Vec<f64>,
    pub dim: usize,
    pub source: String,
    pub episode: usize,
}

impl LatentTrajectory {
    pub fn new(points: Vec<f64>, dim: usize, source: impl Into<String>, episode: usize) -> Result<Self> {
        if dim == 0 || points.len() % dim != 0 {
            return Err(Error::dim("latent trajectory", &[points.len()], &[dim]));
        }
        if points.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("trajectory has non-finite entries".into()));
        }
        Ok(LatentTrajectory {
            points,
            dim,
            source: source.into(),
            episode,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, t: usize) -> &[f64] {
        &self.points[t * self.dim..(t + 1) * self.dim]
    }

    /// The first `n` points (all of them when shorter).
    pub fn truncated(&self, n: usize) -> LatentTrajectory {
        let keep = n.min(self.len()) * self.dim;
        LatentTrajectory {
            points: self.points[..keep].to_vec(),
            ..self.clone()
        }
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

pub fn least_energy_score(traj: &LatentTrajectory) -> Result<f64> {
    let t = traj.len();
    if t < 3 {
        return Err(Error::Input(format!("curvature needs T >= 3 points, got {t}")));
    }
    let mean_step = (1..t)
        .map(|i| dist(traj.point(i), traj.point(i - 1)))
        .sum::<f64>()
        / (t - 1) as f64;
    if mean_step == 0.0 {
        return Ok(0.0);
    }
    let bend: f64 = (1..t - 1)
        .map(|i| {
            let (a, b, c) = (traj.point(i - 1), traj.point(i), traj.point(i + 1));
            (0..traj.dim)
                .map(|d| {
                    let s = c[d] - 2.0 * b[d] + a[d];
                    s * s
                })
                .sum::<f64>()
        })
        .sum();
    Ok(bend / (mean_step * mean_step))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothnessReport {
    pub tokenizer: String,
    /// Mean of `per_trajectory`.
    pub score: f64,
    pub trajectory_count: usize,
    pub per_trajectory: Vec<f64>,
    pub normalization: String,
    pub warnings: Vec<String>,
}

/// Latent trajectory of every episode through `tok`.
pub fn latent_trajectories(
    tok: &Tokenizer,
    name: &str,
    episodes: &[ActionEpisode],
) -> Result<Vec<LatentTrajectory>> {
    let dim = tok.latent_feature_dim();
    episodes
        .iter()
        .map(|ep| {
            let feats = tok.latent_features(&ep.actions.concat())?;
            LatentTrajectory::new(feats, dim, name, ep.id)
        })
        .collect()
}

/// Scores the first `n_trajectories` episodes through each tokenizer. The
/// same episodes are used for every tokenizer and reports keep input order.
pub fn compare_tokenizers(
    tokenizers: &[(String, &Tokenizer)],
    episodes: &[ActionEpisode],
    n_trajectories: usize,
) -> Result<Vec<SmoothnessReport>> {
    if episodes.len() < n_trajectories || n_trajectories == 0 {
        return Err(Error::Dataset(format!(
            "need {n_trajectories} episodes, dataset has {}",
            episodes.len()
        )));
    }
    let eps = &episodes[..n_trajectories];
    tokenizers
        .iter()
        .map(|(name, tok)| {
            let per_trajectory = latent_trajectories(tok, name, eps)?
                .iter()
                .map(least_energy_score)
                .collect::<Result<Vec<_>>>()?;
            let mut warnings = Vec::new();
            if !tok.is_trained() {
                warnings.push(format!("tokenizer `{name}` is untrained"));
            }
            Ok(SmoothnessReport {
                tokenizer: name.clone(),
                score: per_trajectory.iter().sum::<f64>() / per_trajectory.len() as f64,
                trajectory_count: per_trajectory.len(),
                per_trajectory,
                normalization: "mean over trajectories of sum |second difference|^2 / mean step^2"
                    .into(),
                warnings,
            })
        })
        .collect()
}

/// Largest `‖f(a) − f(b)‖_∞ / ‖a − b‖_∞` over `n_pairs` random pairs drawn
/// from `inputs`. Coincident pairs are skipped.
pub fn empirical_lipschitz_ratio<F>(
    f: F,
    inputs: &[Vec<f64>],
    n_pairs: usize,
    seed: u64,
) -> Result<f64>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    if n_pairs == 0 || inputs.len() < 2 {
        return Err(Error::Input("need n_pairs >= 1 and at least two inputs".into()));
    }
    let inf = |a: &[f64], b: &[f64]| {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    };
    let mut r = rng::stream(seed, "lipschitz-pairs");
    let mut worst: f64 = 0.0;
    for _ in 0..n_pairs {
        let a = &inputs[r.gen_range(0..inputs.len())];
        let b = &inputs[r.gen_range(0..inputs.len())];
        let din = inf(a, b);
        if din == 0.0 {
            continue;
        }
        worst = worst.max(inf(&f(a)?, &f(b)?) / din);
    }
    Ok(worst)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectedTrajectory {
    pub source: String,
    pub episode: usize,
    pub points: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    pub method: String,
    pub trajectories: Vec<ProjectedTrajectory>,
    /// Share of total variance captured by the two axes.
    pub explained_variance: f64,
}

/// PCA of the pooled points onto their top two principal axes. Axis signs
/// are fixed so each axis's largest-magnitude loading is positive.
pub fn project_2d(trajs: &[LatentTrajectory]) -> Result<Projection> {
    let first = trajs
        .first()
        .ok_or_else(|| Error::Input("nothing to project".into()))?;
    let d = first.dim;
    if let Some(t) = trajs.iter().find(|t| t.dim != d) {
        return Err(Error::dim("project_2d", &[t.dim], &[d]));
    }
    let n: usize = trajs.iter().map(LatentTrajectory::len).sum();
    if n == 0 {
        return Err(Error::Input("nothing to project".into()));
    }
    let mut mean = vec![0.0; d];
    for t in trajs {
        for p in t.points.chunks(d) {
            mean.iter_mut().zip(p).for_each(|(m, v)| *m += v / n as f64);
        }
    }
    let mut cov = DMatrix::<f64>::zeros(d, d);
    for t in trajs {
        for p in t.points.chunks(d) {
            for i in 0..d {
                for j in 0..d {
                    cov[(i, j)] += (p[i] - mean[i]) * (p[j] - mean[j]) / n as f64;
                }
            }
        }
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let total: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();
    let axes: Vec<Vec<f64>> = order
        .iter()
        .take(2)
        .map(|&k| {
            let mut v: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
            let big = v.iter().copied().fold(0.0, |m: f64, x| if x.abs() > m.abs() { x } else { m });
            if big < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
            v
        })
        .collect();
    let captured: f64 = order.iter().take(2).map(|&k| eig.eigenvalues[k].max(0.0)).sum();
    let project = |p: &[f64]| -> [f64; 2] {
        let mut out = [0.0; 2];
        for (o, axis) in out.iter_mut().zip(&axes) {
            *o = axis.iter().zip(p.iter().zip(&mean)).map(|(a, (x, m))| a * (x - m)).sum();
        }
        out
    };
    Ok(Projection {
        method: "pca".into(),
        trajectories: trajs
            .iter()
            .map(|t| ProjectedTrajectory {
                source: t.source.clone(),
                episode: t.episode,
                points: t.points.chunks(d).map(project).collect(),
            })
            .collect(),
        explained_variance: if total > 0.0 { captured / total } else { 1.0 },
    })
}

/// CSV with header `tokenizer,episode,t,dim0..dimN`.
pub fn write_latents_csv<W: Write>(mut w: W, trajs: &[LatentTrajectory]) -> Result<()> {
    let dim = trajs.iter().map(|t| t.dim).max().unwrap_or(0);
    write!(w, "tokenizer,episode,t")?;
    for d in 0..dim {
        write!(w, ",dim{d}")?;
    }
    writeln!(w)?;
    for tr in trajs {
        for t in 0..tr.len() {
            write!(w, "{},{},{t}", tr.source, tr.episode)?;
            for v in tr.point(t) {
                write!(w, ",{v}")?;
            }
            writeln!(w)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn traj(points: &[[f64; 2]]) -> LatentTrajectory {
        LatentTrajectory::new(points.concat(), 2, "t", 0).unwrap()
    }

    #[test]
    fn collinear_is_zero() {
        let t = traj(&[[0.0, 0.0], [1.0, 0.0], [2.0, 0.0], [3.0, 0.0]]);
        assert_eq!(least_energy_score(&t).unwrap(), 0.0);
    }

    #[test]
    fn constant_is_zero_and_short_fails() {
        assert_eq!(least_energy_score(&traj(&[[1.0, 1.0]; 5])).unwrap(), 0.0);
        assert!(least_energy_score(&traj(&[[0.0, 0.0], [1.0, 0.0]])).is_err());
    }

    #[test]
    fn bend_matches_hand_value() {
        let t = traj(&[[0.0, 0.0], [1.0, 0.0], [2.0, 1.0]]);
        let s = (1.0 + 2f64.sqrt()) / 2.0;
        assert!((least_energy_score(&t).unwrap() - 1.0 / (s * s)).abs() < 1e-15);
    }
}
