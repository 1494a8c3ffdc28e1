mod common;

use common::rng;
use liptok::smoothness::{
    compare_tokenizers, least_energy_score, project_2d, write_latents_csv, LatentTrajectory,
};
use liptok::synth::{minimum_jerk_episodes, MinJerkConfig};
use liptok::tokenizer::{Tokenizer, TokenizerConfig, TokenizerKind};
use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::Rng;

fn traj(points: &[&[f64]]) -> LatentTrajectory {
    LatentTrajectory::new(points.concat(), points[0].len(), "t", 0).unwrap()
}

fn energy(points: Vec<f64>, dim: usize) -> f64 {
    least_energy_score(&LatentTrajectory::new(points, dim, "t", 0).unwrap()).unwrap()
}

#[test]
fn analytic_cases() {
    assert_eq!(least_energy_score(&traj(&[&[0.0, 0.0], &[1.0, 0.0], &[2.0, 0.0], &[3.0, 0.0]])).unwrap(), 0.0);
    assert_eq!(least_energy_score(&traj(&[&[2.0, 2.0] as &[f64]; 5])).unwrap(), 0.0);
    // Δ² = (0, 1), mean step (1 + √2)/2.
    let s = (1.0 + 2f64.sqrt()) / 2.0;
    let e = least_energy_score(&traj(&[&[0.0, 0.0], &[1.0, 0.0], &[2.0, 1.0]])).unwrap();
    assert!((e - 1.0 / (s * s)).abs() < 1e-12);
    assert!(least_energy_score(&traj(&[&[0.0], &[1.0]])).is_err());
}

#[test]
fn scale_translation_and_reversal_invariance() {
    let mut r = rng(0);
    let pts: Vec<f64> = (0..60).map(|_| r.gen_range(-1.0..1.0)).collect();
    let base = energy(pts.clone(), 3);
    for a in [0.1, 10.0, 3.7] {
        let e = energy(pts.iter().map(|v| v * a).collect(), 3);
        assert!((e - base).abs() <= 1e-9 * base.max(1.0));
    }
    let shifted = energy(pts.iter().map(|v| v + 5.0).collect(), 3);
    assert!((shifted - base).abs() <= 1e-9 * base);
    let reversed: Vec<f64> = pts.chunks(3).rev().flatten().copied().collect();
    assert!((energy(reversed, 3) - base).abs() <= 1e-12 * base);
}

#[test]
fn shuffling_a_smooth_curve_raises_energy() {
    let n = 30;
    let smooth: Vec<[f64; 2]> = (0..n)
        .map(|i| {
            let t = i as f64 / (n - 1) as f64 * 1.5;
            [t.cos(), t.sin()]
        })
        .collect();
    let base = energy(smooth.concat(), 2);
    let mut r = rng(1);
    let mut higher = 0;
    for _ in 0..100 {
        let mut p = smooth.clone();
        p[1..n - 1].shuffle(&mut r);
        if energy(p.concat(), 2) > base {
            higher += 1;
        }
    }
    assert!(higher >= 99, "{higher}");
}

#[test]
fn projection_of_centered_2d_points_is_a_rotation() {
    let mut r = rng(2);
    let mut pts: Vec<f64> = (0..40).map(|_| r.gen_range(-1.0..1.0)).collect();
    let (mx, my) = (
        pts.iter().step_by(2).sum::<f64>() / 20.0,
        pts.iter().skip(1).step_by(2).sum::<f64>() / 20.0,
    );
    pts.chunks_mut(2).for_each(|p| {
        p[0] -= mx;
        p[1] -= my;
    });
    let t = LatentTrajectory::new(pts.clone(), 2, "a", 0).unwrap();
    let proj = project_2d(&[t]).unwrap();
    let q = &proj.trajectories[0].points;
    for i in 0..20 {
        for j in 0..20 {
            let d0 = ((pts[2 * i] - pts[2 * j]).powi(2) + (pts[2 * i + 1] - pts[2 * j + 1]).powi(2)).sqrt();
            let d1 = ((q[i][0] - q[j][0]).powi(2) + (q[i][1] - q[j][1]).powi(2)).sqrt();
            assert!((d0 - d1).abs() < 1e-9);
        }
    }
    assert!((proj.explained_variance - 1.0).abs() < 1e-12);
    assert_eq!(proj.method, "pca");
}

#[test]
fn duplicated_trajectories_project_identically() {
    let mut r = rng(3);
    let pts: Vec<f64> = (0..50).map(|_| r.gen_range(-1.0..1.0)).collect();
    let a = LatentTrajectory::new(pts.clone(), 5, "x", 0).unwrap();
    let b = LatentTrajectory::new(pts, 5, "x", 1).unwrap();
    let proj = project_2d(&[a, b]).unwrap();
    assert_eq!(proj.trajectories[0].points, proj.trajectories[1].points);
    assert_eq!(proj.trajectories[1].episode, 1);
}

#[test]
fn explained_variance_matches_eigen_oracle() {
    let mut r = rng(4);
    let (n, d) = (80, 4);
    let pts: Vec<f64> = (0..n * d).map(|i| r.gen_range(-1.0..1.0) * (1 + i % d) as f64).collect();
    let proj = project_2d(&[LatentTrajectory::new(pts.clone(), d, "x", 0).unwrap()]).unwrap();
    let m = DMatrix::from_row_slice(n, d, &pts);
    let mean = m.row_mean();
    let mut c = m.clone();
    for mut row in c.row_iter_mut() {
        row -= &mean;
    }
    let cov = c.transpose() * &c / (n as f64 - 1.0);
    let mut ev: Vec<f64> = SymmetricEigen::new(cov).eigenvalues.iter().copied().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    let oracle = (ev[0] + ev[1]) / ev.iter().sum::<f64>();
    assert!((proj.explained_variance - oracle).abs() < 1e-9);
}

#[test]
fn one_dimensional_latents_pad_a_zero_axis() {
    let t = LatentTrajectory::new(vec![0.0, 1.0, 3.0, 2.0], 1, "bin", 0).unwrap();
    let proj = project_2d(&[t]).unwrap();
    assert!(proj.trajectories[0].points.iter().all(|p| p[1] == 0.0));
}

#[test]
fn comparison_is_deterministic_and_keeps_order() {
    let eps = minimum_jerk_episodes(&MinJerkConfig { episodes: 12, ..MinJerkConfig::default() }, 0).unwrap();
    let cfg = TokenizerConfig::new(TokenizerKind::VqVae, 7).with_hidden(vec![16]);
    let a = Tokenizer::new(cfg.clone(), &mut rng(0)).unwrap();
    let b = Tokenizer::new(TokenizerConfig::new(TokenizerKind::Bin, 7), &mut rng(0)).unwrap();
    let toks = [("a".to_string(), &a), ("b".to_string(), &b), ("a2".to_string(), &a)];
    let r1 = compare_tokenizers(&toks, &eps, 10).unwrap();
    let r2 = compare_tokenizers(&toks, &eps, 10).unwrap();
    assert_eq!(r1, r2);
    assert_eq!(r1.iter().map(|r| r.tokenizer.as_str()).collect::<Vec<_>>(), ["a", "b", "a2"]);
    assert_eq!(r1[0].score, r1[2].score);
    assert_eq!(r1[0].trajectory_count, 10);
    assert!(r1[0].warnings.iter().any(|w| w.contains("untrained")));
    assert!(r1[1].warnings.is_empty());
    let mean = r1[1].per_trajectory.iter().sum::<f64>() / 10.0;
    assert!((r1[1].score - mean).abs() < 1e-12);
    assert!(compare_tokenizers(&toks, &eps, 13).is_err());
}

#[test]
fn latents_csv_header_and_rows() {
    let t = LatentTrajectory::new(vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0], 2, "mlp", 7).unwrap();
    let mut buf = Vec::new();
    write_latents_csv(&mut buf, &[t]).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "tokenizer,episode,t,dim0,dim1");
    assert_eq!(lines[3], "mlp,7,2,4,5");
}

#[test]
fn minimum_jerk_actions_are_smoother_than_shuffled_ones() {
    use liptok::cli::raw_smoothness;
    let eps = minimum_jerk_episodes(&MinJerkConfig { episodes: 20, ..MinJerkConfig::default() }, 1).unwrap();
    let smooth = raw_smoothness(&eps).unwrap();
    let mut r = rng(6);
    let shuffled: Vec<_> = eps
        .iter()
        .cloned()
        .map(|mut e| {
            e.actions.shuffle(&mut r);
            e
        })
        .collect();
    assert!(smooth < raw_smoothness(&shuffled).unwrap());
}
