//! Causal transformer over interleaved observation and action tokens.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::env::{ACT_DIM, OBS_DIM};
use super::Episode;
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{join, Linear, MlpStack, Module};
use crate::tokenizer::{LossVars, Tokenizer, TokenizerKind};

/// How predicted action tokens become actions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecodeVia {
    /// A dedicated MLP head regresses normalized actions.
    Head,
    /// The head predicts a latent that the tokenizer's decoder maps back.
    TokenizerDecoder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub mlp_hidden: usize,
    /// Width of the observation, action-projection and head MLPs.
    pub embed_hidden: usize,
    pub decode: DecodeVia,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            d_model: 64,
            heads: 4,
            layers: 2,
            mlp_hidden: 128,
            embed_hidden: 64,
            decode: DecodeVia::Head,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config("d_model must be a positive multiple of heads".into()));
        }
        if self.layers == 0 || self.mlp_hidden == 0 || self.embed_hidden == 0 {
            return Err(Error::Config("layer counts and widths must be positive".into()));
        }
        Ok(())
    }
}

/// Token kinds of the interleaved stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenType {
    Observation,
    Action,
}

/// `[o_p1, a_p1, …, o_pM, a_pM, o_q1, …, o_qN]`; the policy predicts the
/// query action at every query observation.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeSequence {
    pub prompt_obs: Vec<Vec<f64>>,
    pub prompt_act: Vec<Vec<f64>>,
    pub query_obs: Vec<Vec<f64>>,
    /// Supervision targets (raw actions); empty during rollouts.
    pub query_act: Vec<Vec<f64>>,
}

impl EpisodeSequence {
    pub fn prompt_len(&self) -> usize {
        self.prompt_obs.len()
    }

    pub fn query_len(&self) -> usize {
        self.query_obs.len()
    }

    pub fn len(&self) -> usize {
        2 * self.prompt_len() + self.query_len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn token_types(&self) -> Vec<TokenType> {
        let mut t = Vec::with_capacity(self.len());
        for _ in 0..self.prompt_len() {
            t.push(TokenType::Observation);
            t.push(TokenType::Action);
        }
        t.extend(std::iter::repeat(TokenType::Observation).take(self.query_len()));
        t
    }

    /// True exactly at query positions, whose outputs are supervised.
    pub fn loss_mask(&self) -> Vec<bool> {
        (0..self.len()).map(|i| i >= 2 * self.prompt_len()).collect()
    }
}

/// Pairs a successful prompt demonstration with a query episode.
pub fn build_sequence(prompt: &Episode, query: &Episode) -> Result<EpisodeSequence> {
    if prompt.is_empty() || query.is_empty() {
        return Err(Error::Input("prompt and query must be non-empty".into()));
    }
    if !prompt.success {
        return Err(Error::Input("prompt demonstration must be successful".into()));
    }
    if prompt.task_id != query.task_id {
        return Err(Error::Input(format!(
            "prompt task `{}` differs from query task `{}`",
            prompt.task_id, query.task_id
        )));
    }
    Ok(EpisodeSequence {
        prompt_obs: prompt.obs.clone(),
        prompt_act: prompt.act.clone(),
        query_obs: query.obs.clone(),
        query_act: query.act.clone(),
    })
}

/// Stream for an arbitrary prompt, used for rollouts and probes where the
/// prompt may deliberately come from another task.
pub fn prompted_sequence(prompt: &Episode, query_obs: Vec<Vec<f64>>) -> Result<EpisodeSequence> {
    if prompt.is_empty() || query_obs.is_empty() {
        return Err(Error::Input("prompt and query must be non-empty".into()));
    }
    Ok(EpisodeSequence {
        prompt_obs: prompt.obs.clone(),
        prompt_act: prompt.act.clone(),
        query_obs,
        query_act: Vec::new(),
    })
}

/// Standard sinusoidal position encoding, `[len, d]`.
pub fn sinusoidal_positions(len: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; len * d];
    for p in 0..len {
        for i in 0..d {
            let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let a = p as f64 * freq;
            out[p * d + i] = if i % 2 == 0 { a.sin() } else { a.cos() };
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
struct LayerNorm {
    gain: Tensor,
    bias: Tensor,
}

impl LayerNorm {
    fn new(d: usize) -> Result<Self> {
        Ok(LayerNorm {
            gain: Tensor::new(vec![d], vec![1.0; d])?.into_param(),
            bias: Tensor::zeros(vec![d])?.into_param(),
        })
    }

    fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let g = tape.param(&self.gain);
        let b = tape.param(&self.bias);
        tape.layernorm(x, g, b)
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(join(prefix, "gain"), &self.gain);
        f(join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(join(prefix, "gain"), &mut self.gain);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Block {
    ln1: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

impl Block {
    fn new<R: Rng>(cfg: &PolicyConfig, rng: &mut R) -> Result<Self> {
        let d = cfg.d_model;
        Ok(Block {
            ln1: LayerNorm::new(d)?,
            q: Linear::new(d, d, rng)?,
            k: Linear::new(d, d, rng)?,
            v: Linear::new(d, d, rng)?,
            o: Linear::new(d, d, rng)?,
            ln2: LayerNorm::new(d)?,
            fc1: Linear::new(d, cfg.mlp_hidden, rng)?,
            fc2: Linear::new(cfg.mlp_hidden, d, rng)?,
        })
    }

    /// `x` stacks every sequence's tokens; `spans` gives (start, len) per
    /// sequence so attention never crosses sequences.
    fn forward(&self, tape: &mut Tape, x: Var, spans: &[(usize, usize)], heads: usize) -> Result<Var> {
        let d = tape.shape(x)[1];
        let dh = d / heads;
        let h = self.ln1.forward(tape, x)?;
        let q = self.q.forward(tape, h)?;
        let k = self.k.forward(tape, h)?;
        let v = self.v.forward(tape, h)?;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut per_seq = Vec::with_capacity(spans.len());
        for &(start, len) in spans {
            let (qs, ks, vs) = (
                tape.slice_rows(q, start, len)?,
                tape.slice_rows(k, start, len)?,
                tape.slice_rows(v, start, len)?,
            );
            let mut per_head = Vec::with_capacity(heads);
            for hd in 0..heads {
                let qh = tape.slice_cols(qs, hd * dh, dh)?;
                let kh = tape.slice_cols(ks, hd * dh, dh)?;
                let vh = tape.slice_cols(vs, hd * dh, dh)?;
                let scores = tape.matmul_nt(qh, kh)?;
                let scores = tape.scale(scores, scale);
                let attn = tape.softmax_causal(scores)?;
                per_head.push(tape.matmul(attn, vh)?);
            }
            per_seq.push(tape.concat_cols(&per_head)?);
        }
        let attn = tape.concat_rows(&per_seq)?;
        let attn = self.o.forward(tape, attn)?;
        let x = tape.add(x, attn)?;
        let h = self.ln2.forward(tape, x)?;
        let h = self.fc1.forward(tape, h)?;
        let h = tape.relu(h);
        let h = self.fc2.forward(tape, h)?;
        tape.add(x, h)
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        self.ln1.visit(&join(prefix, "ln1"), f);
        for (n, l) in [("q", &self.q), ("k", &self.k), ("v", &self.v), ("o", &self.o)] {
            l.visit_params(&join(prefix, n), f);
        }
        self.ln2.visit(&join(prefix, "ln2"), f);
        self.fc1.visit_params(&join(prefix, "fc1"), f);
        self.fc2.visit_params(&join(prefix, "fc2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.ln1.visit_mut(&join(prefix, "ln1"), f);
        for (n, l) in [
            ("q", &mut self.q),
            ("k", &mut self.k),
            ("v", &mut self.v),
            ("o", &mut self.o),
        ] {
            l.visit_params_mut(&join(prefix, n), f);
        }
        self.ln2.visit_mut(&join(prefix, "ln2"), f);
        self.fc1.visit_params_mut(&join(prefix, "fc1"), f);
        self.fc2.visit_params_mut(&join(prefix, "fc2"), f);
    }
}

/// Output of one batched forward pass.
#[derive(Debug, Clone)]
pub struct PolicyForward {
    /// Normalized action predictions at every query position, stacked over
    /// sequences, `[Σ N, A]`.
    pub actions: Var,
    /// Tokenizer loss terms over every action in the batch.
    pub tokenizer_losses: LossVars,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CausalPolicy {
    config: PolicyConfig,
    obs_encoder: MlpStack,
    tokenizer: Tokenizer,
    act_proj: MlpStack,
    type_embedding: Tensor,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
    head: MlpStack,
}

impl CausalPolicy {
    pub fn new<R: Rng>(config: PolicyConfig, tokenizer: Tokenizer, rng: &mut R) -> Result<Self> {
        config.validate()?;
        if tokenizer.config().action_dim != ACT_DIM {
            return Err(Error::dim("policy tokenizer", &[tokenizer.config().action_dim], &[ACT_DIM]));
        }
        if config.decode == DecodeVia::TokenizerDecoder && tokenizer.kind() == TokenizerKind::Bin {
            return Err(Error::Config("the bin tokenizer has no decoder to route through".into()));
        }
        let (d, e) = (config.d_model, config.embed_hidden);
        let latent = tokenizer.config().latent_dim;
        let head_out = match config.decode {
            DecodeVia::Head => ACT_DIM,
            DecodeVia::TokenizerDecoder => latent,
        };
        Ok(CausalPolicy {
            obs_encoder: MlpStack::new(&[OBS_DIM, e, d], false, rng)?,
            act_proj: MlpStack::new(&[latent, e, d], false, rng)?,
            type_embedding: Tensor::uniform(vec![2, d], 0.1, rng)?.into_param(),
            blocks: (0..config.layers)
                .map(|_| Block::new(&config, rng))
                .collect::<Result<_>>()?,
            ln_f: LayerNorm::new(d)?,
            head: MlpStack::new(&[d, e, head_out], false, rng)?,
            tokenizer,
            config,
        })
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.config
    }

    pub fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    pub fn tokenizer_mut(&mut self) -> &mut Tokenizer {
        &mut self.tokenizer
    }

    pub fn into_tokenizer(self) -> Tokenizer {
        self.tokenizer
    }

    fn check(&self, s: &EpisodeSequence) -> Result<()> {
        if s.prompt_len() == 0 || s.query_len() == 0 {
            return Err(Error::Input("sequence needs a prompt and a query".into()));
        }
        if s.prompt_act.len() != s.prompt_len() {
            return Err(Error::Input("prompt observations and actions differ in count".into()));
        }
        let bad_obs = s.prompt_obs.iter().chain(&s.query_obs).any(|o| o.len() != OBS_DIM);
        let bad_act = s.prompt_act.iter().chain(&s.query_act).any(|a| a.len() != ACT_DIM);
        if bad_obs || bad_act {
            return Err(Error::Input(format!(
                "observations must have {OBS_DIM} and actions {ACT_DIM} entries"
            )));
        }
        Ok(())
    }

    /// Records the policy for a batch of sequences. Query actions present in
    /// the sequences join the tokenizer loss but are never fed as tokens.
    pub fn forward(&self, tape: &mut Tape, seqs: &[EpisodeSequence]) -> Result<PolicyForward> {
        if seqs.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        for s in seqs {
            self.check(s)?;
        }
        let d = self.config.d_model;

        let obs: Vec<f64> = seqs
            .iter()
            .flat_map(|s| s.prompt_obs.iter().chain(&s.query_obs).flatten().copied())
            .collect();
        let n_obs = obs.len() / OBS_DIM;
        let obs = tape.constant(vec![n_obs, OBS_DIM], obs)?;
        let obs_tokens = self.obs_encoder.forward(tape, obs)?;

        let prompt_rows: usize = seqs.iter().map(EpisodeSequence::prompt_len).sum();
        let raw_act: Vec<f64> = seqs
            .iter()
            .flat_map(|s| s.prompt_act.iter().flatten().copied())
            .chain(seqs.iter().flat_map(|s| s.query_act.iter().flatten().copied()))
            .collect();
        let act = tape.constant(vec![raw_act.len() / ACT_DIM, ACT_DIM], self.tokenizer.normalize_batch(&raw_act)?)?;
        let tok = self.tokenizer.forward(tape, act)?;
        let prompt_emb = tape.slice_rows(tok.embedding, 0, prompt_rows)?;
        let act_tokens = self.act_proj.forward(tape, prompt_emb)?;

        // Row indices into [obs_tokens; act_tokens] in stream order.
        let mut order = Vec::new();
        let mut types = Vec::new();
        let mut positions = Vec::new();
        let mut spans = Vec::with_capacity(seqs.len());
        let mut query_rows = Vec::new();
        let (mut obs_at, mut act_at) = (0, n_obs);
        for s in seqs {
            spans.push((order.len(), s.len()));
            for i in 0..s.prompt_len() {
                order.extend([obs_at + i, act_at + i]);
                types.extend([0, 1]);
            }
            obs_at += s.prompt_len();
            act_at += s.prompt_len();
            for i in 0..s.query_len() {
                query_rows.push(order.len());
                order.push(obs_at + i);
                types.push(0);
            }
            obs_at += s.query_len();
            positions.extend(0..s.len());
        }
        let table = tape.concat_rows(&[obs_tokens, act_tokens])?;
        let x = tape.gather_rows(table, &order)?;
        let type_table = tape.param(&self.type_embedding);
        let type_rows = tape.gather_rows(type_table, &types)?;
        let x = tape.add(x, type_rows)?;
        let max_len = spans.iter().map(|s| s.1).max().unwrap_or(0);
        let pe = sinusoidal_positions(max_len, d);
        let pos: Vec<f64> = positions
            .iter()
            .flat_map(|&p| pe[p * d..(p + 1) * d].iter().copied())
            .collect();
        let pos = tape.constant(vec![order.len(), d], pos)?;
        let mut x = tape.add(x, pos)?;

        for b in &self.blocks {
            x = b.forward(tape, x, &spans, self.config.heads)?;
        }
        let x = self.ln_f.forward(tape, x)?;
        let q = tape.gather_rows(x, &query_rows)?;
        let mut out = self.head.forward(tape, q)?;
        if self.config.decode == DecodeVia::TokenizerDecoder {
            let dec = self.tokenizer.decoder().expect("checked at construction");
            out = dec.forward(tape, out)?;
        }
        Ok(PolicyForward {
            actions: out,
            tokenizer_losses: tok.losses,
        })
    }

    /// Raw-space action predicted at every query position of `seq`.
    pub fn predict(&self, seq: &EpisodeSequence) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let f = self.forward(&mut tape, std::slice::from_ref(seq))?;
        Ok(tape
            .value(f.actions)
            .chunks(ACT_DIM)
            .map(|a| self.tokenizer.normalizer().denormalize(a))
            .collect())
    }
}

impl Module for CausalPolicy {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        self.obs_encoder.visit_params(&join(prefix, "obs_encoder"), f);
        self.tokenizer.visit_params(&join(prefix, "tokenizer"), f);
        self.act_proj.visit_params(&join(prefix, "act_proj"), f);
        f(join(prefix, "type_embedding"), &self.type_embedding);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("block{i}")), f);
        }
        self.ln_f.visit(&join(prefix, "ln_f"), f);
        self.head.visit_params(&join(prefix, "head"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.obs_encoder.visit_params_mut(&join(prefix, "obs_encoder"), f);
        self.tokenizer.visit_params_mut(&join(prefix, "tokenizer"), f);
        self.act_proj.visit_params_mut(&join(prefix, "act_proj"), f);
        f(join(prefix, "type_embedding"), &mut self.type_embedding);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("block{i}")), f);
        }
        self.ln_f.visit_mut(&join(prefix, "ln_f"), f);
        self.head.visit_params_mut(&join(prefix, "head"), f);
    }
}
