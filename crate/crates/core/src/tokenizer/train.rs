use log::{debug, info};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ActionNormalizer, LossComponents, Tokenizer, TokenizerKind};
use crate::autodiff::{Adam, AdamConfig, Tape};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub steps: u64,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Refit the normalizer to the training actions before the first step.
    pub fit_normalizer: bool,
    /// Check the encoder's row-sum bound every this many steps (0 = never).
    pub lipschitz_check_every: u64,
    pub log_every: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            steps: 2000,
            batch_size: 32,
            adam: AdamConfig::default(),
            seed: 0,
            fit_normalizer: true,
            lipschitz_check_every: 1000,
            log_every: 100,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: u64,
    pub total: f64,
    pub reconstruction: f64,
    pub codebook: f64,
    pub commitment: f64,
    pub lipschitz: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub curve: Vec<CurvePoint>,
    /// Worst `‖Ŵ_i‖₁ / softplus(c)` seen at the periodic checks.
    pub max_row_sum_ratio: Option<f64>,
}

/// Trains `tok` on raw actions with minibatch Adam on the weighted objective.
/// The bin kind has nothing to learn for reconstruction but its embedding
/// table is untouched by this objective, so the loop is skipped for it.
pub fn train_tokenizer(
    tok: &mut Tokenizer,
    actions: &[Vec<f64>],
    opts: &TrainOptions,
) -> Result<TrainReport> {
    if actions.is_empty() {
        return Err(Error::Dataset("no actions to train on".into()));
    }
    let a = tok.config().action_dim;
    if let Some(bad) = actions.iter().find(|x| x.len() != a) {
        return Err(Error::dim("train_tokenizer", &[bad.len()], &[a]));
    }
    if opts.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    if opts.fit_normalizer {
        tok.set_normalizer(ActionNormalizer::fit(actions)?)?;
    }
    let data: Vec<f64> = tok.normalize_batch(&actions.concat())?;
    let mut report = TrainReport {
        curve: Vec::with_capacity(opts.steps as usize),
        max_row_sum_ratio: None,
    };
    if tok.kind() == TokenizerKind::Bin {
        return Ok(report);
    }

    let mut sampler = rng::stream(opts.seed, "tokenizer-batches");
    let mut adam = Adam::new(opts.adam);
    let n = actions.len();
    let cfg = tok.config().clone();
    for step in 1..=opts.steps {
        let mut batch = Vec::with_capacity(opts.batch_size * a);
        for _ in 0..opts.batch_size {
            let i = sampler.gen_range(0..n);
            batch.extend_from_slice(&data[i * a..(i + 1) * a]);
        }
        let mut tape = Tape::new();
        let x = tape.constant(vec![opts.batch_size, a], batch)?;
        let fwd = tok.forward(&mut tape, x)?;
        let loss = fwd.losses.total(&mut tape, &cfg)?;
        let parts = fwd.losses.values(&tape);
        let total = tape.item(loss);
        if !total.is_finite() {
            return Err(Error::Diverged(format!("loss {total} at step {step}")));
        }
        let grads = tape.backward(loss)?;
        grads.store_into(tok);
        adam.step(tok)?;
        if let (Some(cb), Some(ix)) = (tok.codebook_mut(), fwd.indices.as_ref()) {
            cb.record_usage(ix);
        }
        tok.add_trained_steps(1);
        report.curve.push(point(step, total, parts));

        let check = opts.lipschitz_check_every;
        if check > 0 && (step % check == 0 || step == opts.steps) {
            if let Some(r) = row_sum_ratio(tok) {
                report.max_row_sum_ratio = Some(report.max_row_sum_ratio.map_or(r, |m| m.max(r)));
            }
        }
        if opts.log_every > 0 && step % opts.log_every == 0 {
            debug!("{} step {step}: loss {total:.6}", tok.kind());
        }
    }
    if let Some(last) = report.curve.last() {
        info!(
            "{} trained {} steps, final loss {:.6}",
            tok.kind(),
            opts.steps,
            last.total
        );
    }
    Ok(report)
}

fn point(step: u64, total: f64, p: LossComponents) -> CurvePoint {
    CurvePoint {
        step,
        total,
        reconstruction: p.reconstruction,
        codebook: p.codebook,
        commitment: p.commitment,
        lipschitz: p.lipschitz,
    }
}

fn row_sum_ratio(tok: &Tokenizer) -> Option<f64> {
    use crate::nn::Layer;
    let enc = tok.encoder().filter(|e| e.is_lipschitz_constrained())?;
    let mut worst: f64 = 0.0;
    for layer in enc.layers() {
        if let Layer::Lipschitz(l) = layer {
            let mut tape = Tape::new();
            let w = l.normalized_weight(&mut tape).ok()?;
            let cols = tape.shape(w)[1];
            let bound = l.bound();
            for row in tape.value(w).chunks(cols) {
                let s: f64 = row.iter().map(|v| v.abs()).sum();
                worst = worst.max(s / bound);
            }
        }
    }
    Some(worst)
}

/// Mean squared reconstruction error per action element, measured in the
/// normalized space.
pub fn reconstruction_error(tok: &Tokenizer, actions: &[Vec<f64>]) -> Result<f64> {
    if actions.is_empty() {
        return Err(Error::Dataset("reconstruction error of an empty dataset".into()));
    }
    let a = tok.config().action_dim;
    let norm = tok.normalize_batch(&actions.concat())?;
    let mut total = 0.0;
    // Chunks bound the tape size on large datasets.
    for chunk in norm.chunks(1024 * a) {
        let mut tape = Tape::new();
        let x = tape.constant(vec![chunk.len() / a, a], chunk.to_vec())?;
        let f = tok.forward(&mut tape, x)?;
        total += tape
            .value(f.reconstruction)
            .iter()
            .zip(chunk)
            .map(|(r, v)| (r - v) * (r - v))
            .sum::<f64>();
    }
    Ok(total / norm.len() as f64)
}
