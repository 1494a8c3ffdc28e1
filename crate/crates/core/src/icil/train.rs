use std::collections::BTreeMap;

use log::{debug, info};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::dataset::{by_task, pick_other};
use super::env::TaskFamily;
use super::policy::{build_sequence, CausalPolicy, EpisodeSequence};
use super::Episode;
use crate::autodiff::{Adam, AdamConfig, Tape};
use crate::error::{Error, Result};
use crate::nn::Module;
use crate::rng;
use crate::tokenizer::ActionNormalizer;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyTrainOptions {
    pub steps: u64,
    /// Sequences per step.
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Keep the tokenizer fixed and drop its loss terms.
    pub freeze_tokenizer: bool,
    /// Fit the tokenizer's action normalizer to the dataset first.
    pub fit_normalizer: bool,
    pub log_every: u64,
}

impl Default for PolicyTrainOptions {
    fn default() -> Self {
        PolicyTrainOptions {
            steps: 20_000,
            batch_size: 16,
            adam: AdamConfig::default(),
            seed: 0,
            freeze_tokenizer: false,
            fit_normalizer: true,
            log_every: 100,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PolicyTrainReport {
    /// Total objective per step.
    pub loss: Vec<f64>,
    /// Behavior-cloning term per step.
    pub bc_loss: Vec<f64>,
}

/// Exponential moving average of `xs`.
pub fn ema(xs: &[f64], decay: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(xs.len());
    let mut acc = None;
    for &x in xs {
        let v = match acc {
            None => x,
            Some(a) => decay * a + (1.0 - decay) * x,
        };
        acc = Some(v);
        out.push(v);
    }
    out
}

/// Samples a same-family (prompt, query) pair; the prompt is a successful
/// episode other than the query.
pub(crate) fn sample_pair<'a, R: Rng>(
    families: &[(TaskFamily, Vec<&'a Episode>, Vec<usize>)],
    rng: &mut R,
) -> (&'a Episode, &'a Episode) {
    let (_, eps, good) = &families[rng.gen_range(0..families.len())];
    let q = rng.gen_range(0..eps.len());
    let pos = good.iter().position(|&g| g == q);
    let p = good[pick_other(good.len(), pos, rng)];
    (eps[p], eps[q])
}

pub(crate) fn families(episodes: &[Episode]) -> Result<Vec<(TaskFamily, Vec<&Episode>, Vec<usize>)>> {
    let grouped: BTreeMap<_, _> = by_task(episodes)?;
    if grouped.is_empty() {
        return Err(Error::Dataset("no episodes".into()));
    }
    grouped
        .into_iter()
        .map(|(t, eps)| {
            let good: Vec<usize> = (0..eps.len()).filter(|&i| eps[i].success).collect();
            if eps.len() < 2 || good.is_empty() || (good.len() == 1 && eps.len() == 1) {
                return Err(Error::Dataset(format!(
                    "task `{t}` needs at least two episodes including a successful prompt"
                )));
            }
            Ok((t, eps, good))
        })
        .collect()
}

/// Masked behavior cloning with joint tokenizer training.
pub fn train_policy(
    policy: &mut CausalPolicy,
    episodes: &[Episode],
    opts: &PolicyTrainOptions,
) -> Result<PolicyTrainReport> {
    let fams = families(episodes)?;
    if opts.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    if opts.fit_normalizer {
        let acts: Vec<Vec<f64>> = episodes.iter().flat_map(|e| e.act.iter().cloned()).collect();
        policy.tokenizer_mut().set_normalizer(ActionNormalizer::fit(&acts)?)?;
    }
    if opts.freeze_tokenizer {
        policy
            .tokenizer_mut()
            .visit_params_mut("", &mut |_, t| t.set_requires_grad(false));
    }
    let result = run(policy, &fams, opts);
    if opts.freeze_tokenizer {
        policy
            .tokenizer_mut()
            .visit_params_mut("", &mut |_, t| t.set_requires_grad(true));
    }
    result
}

fn run(
    policy: &mut CausalPolicy,
    fams: &[(TaskFamily, Vec<&Episode>, Vec<usize>)],
    opts: &PolicyTrainOptions,
) -> Result<PolicyTrainReport> {
    let mut sampler = rng::stream(opts.seed, "policy-batches");
    let mut adam = Adam::new(opts.adam);
    let mut report = PolicyTrainReport::default();
    let tcfg = policy.tokenizer().config().clone();
    for step in 1..=opts.steps {
        let seqs: Vec<EpisodeSequence> = (0..opts.batch_size)
            .map(|_| {
                let (p, q) = sample_pair(fams, &mut sampler);
                build_sequence(p, q)
            })
            .collect::<Result<_>>()?;
        let targets: Vec<f64> = seqs
            .iter()
            .flat_map(|s| s.query_act.iter().flatten().copied())
            .collect();
        let targets = policy.tokenizer().normalize_batch(&targets)?;

        let mut tape = Tape::new();
        let f = policy.forward(&mut tape, &seqs)?;
        let shape = tape.shape(f.actions).to_vec();
        let t = tape.constant(shape, targets)?;
        let diff = tape.sub(f.actions, t)?;
        let sq = tape.mul(diff, diff)?;
        let bc = tape.mean(sq);
        let loss = if opts.freeze_tokenizer {
            bc
        } else {
            let tok = f.tokenizer_losses.total(&mut tape, &tcfg)?;
            tape.add(bc, tok)?
        };
        let total = tape.item(loss);
        if !total.is_finite() {
            return Err(Error::Diverged(format!("policy loss {total} at step {step}")));
        }
        tape.backward(loss)?.store_into(policy);
        adam.step(policy)?;
        if !opts.freeze_tokenizer {
            policy.tokenizer_mut().add_trained_steps(1);
        }
        report.loss.push(total);
        report.bc_loss.push(tape.item(bc));
        if opts.log_every > 0 && step % opts.log_every == 0 {
            debug!("policy step {step}: loss {total:.5} bc {:.5}", tape.item(bc));
        }
    }
    if let Some(l) = report.bc_loss.last() {
        info!("policy trained {} steps, final bc loss {l:.5}", opts.steps);
    }
    Ok(report)
}
