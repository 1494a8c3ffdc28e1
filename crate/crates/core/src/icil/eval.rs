use std::collections::BTreeMap;
use std::sync::Mutex;

use log::{info, warn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::dataset::{expert_episode, generate_expert_dataset, to_action_episodes};
use super::env::{sample_state, TaskFamily, ToyEnvState};
use super::policy::{prompted_sequence, CausalPolicy, PolicyConfig};
use super::train::{train_policy, PolicyTrainOptions};
use super::Episode;
use crate::error::{Error, Result};
use crate::rng;
use crate::smoothness::{latent_trajectories, least_energy_score};
use crate::tokenizer::{Tokenizer, TokenizerConfig, TokenizerKind};

#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub episode: Episode,
    pub success: bool,
}

/// Closed-loop rollout: at each step the policy sees the prompt and every
/// query observation so far and its newest prediction is executed.
pub fn rollout_in_context(
    policy: &CausalPolicy,
    mut state: ToyEnvState,
    prompt: &Episode,
    max_steps: usize,
) -> Result<Rollout> {
    let task = state.task;
    let mut obs = Vec::new();
    let mut act = Vec::new();
    let mut faulted = false;
    while !state.is_done() && act.len() < max_steps {
        obs.push(state.observation());
        let seq = prompted_sequence(prompt, obs.clone())?;
        let a = policy.predict(&seq)?.pop().expect("one prediction per query step");
        if state.step(&a).is_err() {
            faulted = true;
            act.push(a);
            break;
        }
        act.push(a);
    }
    let success = !faulted && state.is_success();
    Ok(Rollout {
        episode: Episode {
            task_id: task.as_str().into(),
            obs,
            act,
            success,
        },
        success,
    })
}

/// Success rate over `n` fresh `task` layouts, each prompted with a
/// random demonstration from `prompts`.
pub fn success_rate(
    policy: &CausalPolicy,
    task: TaskFamily,
    prompts: &[Episode],
    n: usize,
    seed: u64,
) -> Result<f64> {
    if prompts.is_empty() || n == 0 {
        return Err(Error::Input("need prompts and at least one rollout".into()));
    }
    let mut r = rng::stream(seed, &format!("rollouts-{task}"));
    let mut wins = 0;
    for _ in 0..n {
        let state = sample_state(task, &mut r);
        let prompt = &prompts[r.gen_range(0..prompts.len())];
        let horizon = state.horizon;
        if rollout_in_context(policy, state, prompt, horizon)?.success {
            wins += 1;
        }
    }
    Ok(wins as f64 / n as f64)
}

/// Fresh expert demonstrations of `task`, disjoint from training data.
pub fn prompt_pool(task: TaskFamily, n: usize, seed: u64) -> Result<Vec<Episode>> {
    let mut r = rng::stream(seed, &format!("prompt-pool-{task}"));
    (0..n).map(|_| expert_episode(sample_state(task, &mut r))).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteOptions {
    pub tasks: Vec<TaskFamily>,
    pub seeds: Vec<u64>,
    pub train_episodes_per_task: usize,
    pub eval_rollouts: usize,
    pub prompt_pool: usize,
    /// Held-out expert episodes scored for smoothness.
    pub smoothness_episodes: usize,
    pub policy: PolicyConfig,
    pub train: PolicyTrainOptions,
    pub workers: usize,
    /// Train every cell on these episodes instead of generating them.
    #[serde(skip)]
    pub dataset: Option<Vec<Episode>>,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions {
            tasks: TaskFamily::ALL.to_vec(),
            seeds: vec![0, 1, 2],
            train_episodes_per_task: 100,
            eval_rollouts: 100,
            prompt_pool: 20,
            smoothness_episodes: 60,
            policy: PolicyConfig::default(),
            train: PolicyTrainOptions::default(),
            workers: 1,
            dataset: None,
        }
    }
}

/// Action tokenizer used inside the policy: smaller hidden layers than the
/// standalone default.
pub fn policy_tokenizer_config(kind: TokenizerKind) -> TokenizerConfig {
    TokenizerConfig::new(kind, super::env::ACT_DIM).with_hidden(vec![64, 64])
}

/// A named tokenizer configuration evaluated by the suite.
#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub label: String,
    pub tokenizer: TokenizerConfig,
}

impl Variant {
    pub fn of_kind(kind: TokenizerKind) -> Self {
        Variant {
            label: kind.to_string(),
            tokenizer: policy_tokenizer_config(kind),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub label: String,
    pub seed: u64,
    pub success: BTreeMap<TaskFamily, f64>,
    pub smoothness: f64,
    pub final_bc_loss: f64,
    pub diverged: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteRow {
    pub label: String,
    pub task: TaskFamily,
    /// Mean over non-diverged seeds (NaN when none remain).
    pub mean_success: f64,
    pub per_seed: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub labels: Vec<String>,
    pub seeds: Vec<u64>,
    pub rows: Vec<SuiteRow>,
    pub cells: Vec<CellResult>,
    pub diverged: usize,
}

impl SuiteReport {
    pub fn row(&self, label: &str, task: TaskFamily) -> Option<&SuiteRow> {
        self.rows.iter().find(|r| r.label == label && r.task == task)
    }

    /// Success averaged over tasks, then seeds.
    pub fn mean_success(&self, label: &str) -> f64 {
        let rows: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.label == label)
            .map(|r| r.mean_success)
            .collect();
        rows.iter().sum::<f64>() / rows.len() as f64
    }

    pub fn mean_smoothness(&self, label: &str) -> f64 {
        let v: Vec<f64> = self
            .cells
            .iter()
            .filter(|c| c.label == label && c.diverged.is_none())
            .map(|c| c.smoothness)
            .collect();
        v.iter().sum::<f64>() / v.len() as f64
    }

    pub fn cell(&self, label: &str, seed: u64) -> Option<&CellResult> {
        self.cells.iter().find(|c| c.label == label && c.seed == seed)
    }
}

/// Trains and evaluates one (variant, seed) cell. The dataset, evaluation
/// layouts, prompts and initial weights depend on the seed only, so cells
/// sharing a seed are paired.
pub fn run_cell(variant: &Variant, seed: u64, opts: &SuiteOptions) -> Result<CellResult> {
    let data = match &opts.dataset {
        Some(d) => d.clone(),
        None => generate_expert_dataset(&opts.tasks, opts.train_episodes_per_task, seed)?,
    };
    let tok = Tokenizer::new(variant.tokenizer.clone(), &mut rng::stream(seed, "tokenizer-init"))?;
    let mut policy = CausalPolicy::new(opts.policy.clone(), tok, &mut rng::stream(seed, "policy-init"))?;
    let train = PolicyTrainOptions {
        seed,
        ..opts.train
    };
    let report = match train_policy(&mut policy, &data, &train) {
        Ok(r) => r,
        Err(e @ (Error::Diverged(_) | Error::NonFiniteGradient { .. })) => {
            warn!("{} seed {seed} diverged: {e}", variant.label);
            return Ok(CellResult {
                label: variant.label.clone(),
                seed,
                success: BTreeMap::new(),
                smoothness: f64::NAN,
                final_bc_loss: f64::NAN,
                diverged: Some(e.to_string()),
            });
        }
        Err(e) => return Err(e),
    };
    let mut success = BTreeMap::new();
    for &task in &opts.tasks {
        let prompts = prompt_pool(task, opts.prompt_pool, seed)?;
        success.insert(task, success_rate(&policy, task, &prompts, opts.eval_rollouts, seed)?);
    }
    let held_out = generate_expert_dataset(
        &opts.tasks,
        opts.smoothness_episodes.div_ceil(opts.tasks.len().max(1)),
        rng::derive_seed(seed, "smoothness-episodes"),
    )?;
    let trajs = latent_trajectories(policy.tokenizer(), &variant.label, &to_action_episodes(&held_out))?;
    let scores = trajs
        .iter()
        .filter(|t| t.len() >= 3)
        .map(least_energy_score)
        .collect::<Result<Vec<_>>>()?;
    let smoothness = scores.iter().sum::<f64>() / scores.len().max(1) as f64;
    info!(
        "{} seed {seed}: success {:?}, smoothness {smoothness:.4}",
        variant.label, success
    );
    Ok(CellResult {
        label: variant.label.clone(),
        seed,
        success,
        smoothness,
        final_bc_loss: report.bc_loss.last().copied().unwrap_or(f64::NAN),
        diverged: None,
    })
}

/// Runs every (variant, seed) cell, up to `opts.workers` at a time.
pub fn evaluate_tokenizer_suite(variants: &[Variant], opts: &SuiteOptions) -> Result<SuiteReport> {
    if variants.is_empty() || opts.seeds.is_empty() || opts.tasks.is_empty() {
        return Err(Error::Config("suite needs variants, seeds and tasks".into()));
    }
    let jobs: Vec<(usize, u64)> = (0..variants.len())
        .flat_map(|v| opts.seeds.iter().map(move |&s| (v, s)))
        .collect();
    let results = run_parallel(&jobs, opts.workers, |&(v, s)| run_cell(&variants[v], s, opts))?;

    let mut rows = Vec::new();
    for v in variants {
        for &task in &opts.tasks {
            let per_seed: Vec<Option<f64>> = opts
                .seeds
                .iter()
                .map(|&s| {
                    results
                        .iter()
                        .find(|c| c.label == v.label && c.seed == s)
                        .and_then(|c| c.success.get(&task).copied())
                })
                .collect();
            let ok: Vec<f64> = per_seed.iter().flatten().copied().collect();
            rows.push(SuiteRow {
                label: v.label.clone(),
                task,
                mean_success: ok.iter().sum::<f64>() / ok.len() as f64,
                per_seed,
            });
        }
    }
    Ok(SuiteReport {
        labels: variants.iter().map(|v| v.label.clone()).collect(),
        seeds: opts.seeds.clone(),
        diverged: results.iter().filter(|c| c.diverged.is_some()).count(),
        rows,
        cells: results,
    })
}

/// Maps `f` over `jobs` on up to `workers` threads, keeping job order.
pub fn run_parallel<J: Sync, T: Send>(
    jobs: &[J],
    workers: usize,
    f: impl Fn(&J) -> Result<T> + Sync,
) -> Result<Vec<T>> {
    let next = Mutex::new(0usize);
    let slots: Vec<Mutex<Option<Result<T>>>> = jobs.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..workers.clamp(1, jobs.len().max(1)) {
            scope.spawn(|| loop {
                let i = {
                    let mut n = next.lock().expect("job counter");
                    let i = *n;
                    *n += 1;
                    i
                };
                if i >= jobs.len() {
                    break;
                }
                *slots[i].lock().expect("result slot") = Some(f(&jobs[i]));
            });
        }
    });
    slots
        .into_iter()
        .map(|s| s.into_inner().expect("result slot").expect("every job ran"))
        .collect()
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Input("spearman needs two equal-length series of length >= 2".into()));
    }
    let rank = |v: &[f64]| {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for k in i..=j {
                r[idx[k]] = avg;
            }
            i = j + 1;
        }
        r
    };
    let (rx, ry) = (rank(x), rank(y));
    let mean = (x.len() as f64 + 1.0) / 2.0;
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mean) * (b - mean)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mean).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - mean).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        return Ok(0.0);
    }
    Ok(cov / (vx * vy).sqrt())
}
