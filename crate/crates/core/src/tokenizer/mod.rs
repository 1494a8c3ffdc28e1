//! Action tokenizers behind one interface.
//!
//! | kind       | encoder                    | bottleneck             | decoder |
//! |------------|----------------------------|------------------------|---------|
//! | `mlp`      | MLP                        | none                   | MLP     |
//! | `bin`      | none                       | 256 bins per dimension | centers |
//! | `vqvae`    | MLP                        | nearest codebook entry | MLP     |
//! | `lfqvae`   | MLP                        | per-dimension sign     | MLP     |
//! | `lipvqvae` | row-normalized MLP         | nearest codebook entry | MLP     |
//!
//! Actions are mapped to `[−1, 1]` per dimension by an [`ActionNormalizer`]
//! before tokenization; reconstructions are mapped back. Every loss is
//! computed in the normalized space.

mod checkpoint;
mod config;
mod normalize;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{TokenizerConfig, TokenizerKind};
pub use normalize::ActionNormalizer;
pub use train::{reconstruction_error, train_tokenizer, CurvePoint, TrainOptions, TrainReport};

use rand::Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{join, MlpStack, Module};
use crate::quantize::{lfq_quantize_tape, vq_quantize, BinSpec, Codebook};

/// Loss terms of one tokenization, each `>= 0`. Terms a kind does not
/// produce are zero.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossComponents {
    pub reconstruction: f64,
    pub codebook: f64,
    pub commitment: f64,
    pub lipschitz: f64,
}

impl LossComponents {
    /// `L_rec + α·L_codebook + β·L_commit + γ·L_Lipschitz`.
    pub fn total(&self, cfg: &TokenizerConfig) -> f64 {
        self.reconstruction
            + cfg.alpha * self.codebook
            + cfg.beta * self.commitment
            + cfg.gamma * self.lipschitz
    }
}

/// Weighted objective for a set of components.
pub fn total_loss(components: &LossComponents, cfg: &TokenizerConfig) -> f64 {
    components.total(cfg)
}

/// Loss terms recorded on a tape; `None` for terms the kind lacks.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossVars {
    pub reconstruction: Option<Var>,
    pub codebook: Option<Var>,
    pub commitment: Option<Var>,
    pub lipschitz: Option<Var>,
}

impl LossVars {
    pub fn values(&self, tape: &Tape) -> LossComponents {
        let v = |x: Option<Var>| x.map(|x| tape.item(x)).unwrap_or(0.0);
        LossComponents {
            reconstruction: v(self.reconstruction),
            codebook: v(self.codebook),
            commitment: v(self.commitment),
            lipschitz: v(self.lipschitz),
        }
    }

    /// Differentiable weighted sum. With no terms at all the result is a
    /// constant zero.
    pub fn total(&self, tape: &mut Tape, cfg: &TokenizerConfig) -> Result<Var> {
        let terms = [
            (self.reconstruction, 1.0),
            (self.codebook, cfg.alpha),
            (self.commitment, cfg.beta),
            (self.lipschitz, cfg.gamma),
        ];
        let mut acc: Option<Var> = None;
        for (term, w) in terms {
            let Some(t) = term else { continue };
            let scaled = if w == 1.0 { t } else { tape.scale(t, w) };
            acc = Some(match acc {
                None => scaled,
                Some(a) => tape.add(a, scaled)?,
            });
        }
        match acc {
            Some(a) => Ok(a),
            None => tape.constant(vec![1], vec![0.0]),
        }
    }
}

/// Everything a tokenizer records for one batch.
#[derive(Debug, Clone)]
pub struct TokenizerForward {
    /// Token embeddings `h^a`, `[batch, D]`.
    pub embedding: Var,
    /// Reconstruction in normalized action space, `[batch, A]`.
    pub reconstruction: Var,
    pub indices: Option<Vec<usize>>,
    pub losses: LossVars,
}

/// Result of tokenizing one action.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenizerOutput {
    pub embedding: Vec<f64>,
    pub index: Option<usize>,
    /// Reconstruction in the caller's (unnormalized) action space.
    pub reconstruction: Vec<f64>,
    pub losses: LossComponents,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tokenizer {
    config: TokenizerConfig,
    normalizer: ActionNormalizer,
    encoder: Option<MlpStack>,
    decoder: Option<MlpStack>,
    codebook: Option<Codebook>,
    bins: Option<BinSpec>,
    /// `[A · bins, D]`, one learned row per (dimension, bin) pair.
    bin_embedding: Option<Tensor>,
    trained_steps: u64,
}

impl Tokenizer {
    pub fn new<R: Rng>(config: TokenizerConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (a, d) = (config.action_dim, config.latent_dim);
        let dims = |inp: usize, hidden: &[usize], out: usize| {
            let mut v = vec![inp];
            v.extend_from_slice(hidden);
            v.push(out);
            v
        };
        let mut tok = Tokenizer {
            normalizer: ActionNormalizer::identity(a),
            encoder: None,
            decoder: None,
            codebook: None,
            bins: None,
            bin_embedding: None,
            trained_steps: 0,
            config,
        };
        let cfg = &tok.config;
        if cfg.kind.has_encoder() {
            tok.encoder = Some(MlpStack::new(
                &dims(a, &cfg.encoder_hidden, d),
                cfg.lipschitz,
                rng,
            )?);
            tok.decoder = Some(MlpStack::new(
                &dims(d, &cfg.decoder_hidden, a),
                false,
                rng,
            )?);
        }
        match cfg.kind {
            TokenizerKind::VqVae | TokenizerKind::LipVqVae => {
                tok.codebook = Some(Codebook::new(cfg.codebook_size, d, rng)?);
            }
            TokenizerKind::Bin => {
                let spec = BinSpec::new(cfg.bins_per_dim, vec![(-1.0, 1.0); a])?;
                let bound = 1.0 / a as f64;
                tok.bin_embedding =
                    Some(Tensor::uniform(vec![a * cfg.bins_per_dim, d], bound, rng)?.into_param());
                tok.bins = Some(spec);
            }
            TokenizerKind::Mlp | TokenizerKind::LfqVae => {}
        }
        Ok(tok)
    }

    pub fn config(&self) -> &TokenizerConfig {
        &self.config
    }

    pub fn kind(&self) -> TokenizerKind {
        self.config.kind
    }

    pub fn normalizer(&self) -> &ActionNormalizer {
        &self.normalizer
    }

    pub fn set_normalizer(&mut self, n: ActionNormalizer) -> Result<()> {
        if n.dims() != self.config.action_dim {
            return Err(Error::dim("normalizer", &[n.dims()], &[self.config.action_dim]));
        }
        self.normalizer = n;
        Ok(())
    }

    pub fn encoder(&self) -> Option<&MlpStack> {
        self.encoder.as_ref()
    }

    pub fn decoder(&self) -> Option<&MlpStack> {
        self.decoder.as_ref()
    }

    pub fn codebook(&self) -> Option<&Codebook> {
        self.codebook.as_ref()
    }

    pub fn codebook_mut(&mut self) -> Option<&mut Codebook> {
        self.codebook.as_mut()
    }

    pub fn bins(&self) -> Option<&BinSpec> {
        self.bins.as_ref()
    }

    pub fn trained_steps(&self) -> u64 {
        self.trained_steps
    }

    pub(crate) fn add_trained_steps(&mut self, n: u64) {
        self.trained_steps += n;
    }

    pub fn is_trained(&self) -> bool {
        self.kind() == TokenizerKind::Bin || self.trained_steps > 0
    }

    /// `Π softplus(c_ℓ)` of the encoder when it is constrained.
    pub fn lipschitz_bound(&self) -> Option<f64> {
        self.encoder
            .as_ref()
            .filter(|e| e.is_lipschitz_constrained())
            .and_then(|e| e.lipschitz_bound().ok())
    }

    fn check_actions(&self, x: &[f64]) -> Result<usize> {
        let a = self.config.action_dim;
        if x.is_empty() || x.len() % a != 0 {
            return Err(Error::dim("tokenize", &[x.len()], &[a]));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("action contains NaN or infinity".into()));
        }
        Ok(x.len() / a)
    }

    /// Normalizes a row-major batch of raw actions.
    pub fn normalize_batch(&self, raw: &[f64]) -> Result<Vec<f64>> {
        self.check_actions(raw)?;
        Ok(raw
            .chunks(self.config.action_dim)
            .flat_map(|a| self.normalizer.normalize(a))
            .collect())
    }

    /// Records the tokenizer on `tape` for normalized actions `x[batch, A]`.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<TokenizerForward> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != self.config.action_dim {
            return Err(Error::dim("tokenize", &shape, &[self.config.action_dim]));
        }
        if tape.value(x).iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("action contains NaN or infinity".into()));
        }
        match self.config.kind {
            TokenizerKind::Bin => self.forward_bin(tape, x),
            kind => {
                let enc = self.encoder.as_ref().expect("encoder kinds own an encoder");
                let dec = self.decoder.as_ref().expect("encoder kinds own a decoder");
                let latent = enc.forward(tape, x)?;
                let mut losses = LossVars::default();
                let (embedding, indices) = match kind {
                    TokenizerKind::Mlp => (latent, None),
                    TokenizerKind::LfqVae => {
                        let q = lfq_quantize_tape(tape, latent)?;
                        losses.commitment = Some(q.commitment_loss);
                        losses.codebook = Some(q.codebook_loss);
                        (q.output, Some(q.indices))
                    }
                    _ => {
                        let cb = self.codebook.as_ref().expect("vq kinds own a codebook");
                        let q = vq_quantize(tape, cb, latent)?;
                        losses.commitment = Some(q.commitment_loss);
                        losses.codebook = Some(q.codebook_loss);
                        (q.output, Some(q.indices))
                    }
                };
                let reconstruction = dec.forward(tape, embedding)?;
                let diff = tape.sub(reconstruction, x)?;
                losses.reconstruction = Some(tape.mean_row_sq_norm(diff));
                if enc.is_lipschitz_constrained() {
                    losses.lipschitz = Some(enc.lipschitz_loss(tape)?);
                }
                Ok(TokenizerForward {
                    embedding,
                    reconstruction,
                    indices,
                    losses,
                })
            }
        }
    }

    fn forward_bin(&self, tape: &mut Tape, x: Var) -> Result<TokenizerForward> {
        let spec = self.bins.as_ref().expect("bin kind owns a spec");
        let table = self.bin_embedding.as_ref().expect("bin kind owns embeddings");
        let (a, d, nb) = (self.config.action_dim, self.config.latent_dim, spec.bins_per_dim);
        let rows: Vec<Vec<usize>> = tape
            .value(x)
            .chunks(a)
            .map(|r| spec.encode(r))
            .collect::<Result<_>>()?;
        let batch = rows.len();
        let flat: Vec<usize> = rows
            .iter()
            .flat_map(|r| r.iter().enumerate().map(move |(dim, b)| dim * nb + b))
            .collect();
        let centers: Vec<f64> = rows
            .iter()
            .map(|r| spec.decode(r))
            .collect::<Result<Vec<_>>>()?
            .concat();

        let t = tape.param(table);
        let picked = tape.gather_rows(t, &flat)?;
        let wide = tape.reshape(picked, vec![batch, a * d])?;
        // Sums the A per-dimension embeddings of each action.
        let mut sum = vec![0.0; a * d * d];
        for dim in 0..a {
            for j in 0..d {
                sum[(dim * d + j) * d + j] = 1.0;
            }
        }
        let summer = tape.constant(vec![a * d, d], sum)?;
        let embedding = tape.matmul(wide, summer)?;

        let reconstruction = tape.constant(vec![batch, a], centers)?;
        let diff = tape.sub(reconstruction, x)?;
        let rec = tape.mean_row_sq_norm(diff);
        Ok(TokenizerForward {
            embedding,
            reconstruction,
            indices: Some(rows.into_iter().flatten().collect()),
            losses: LossVars {
                reconstruction: Some(rec),
                ..LossVars::default()
            },
        })
    }

    /// Tokenizes one raw action.
    pub fn tokenize(&self, action: &[f64]) -> Result<TokenizerOutput> {
        let mut out = self.tokenize_batch(action)?;
        Ok(out.remove(0))
    }

    /// Tokenizes a row-major batch of raw actions one by one, so each
    /// output's losses refer to that action alone.
    pub fn tokenize_batch(&self, actions: &[f64]) -> Result<Vec<TokenizerOutput>> {
        let a = self.config.action_dim;
        self.check_actions(actions)?;
        actions
            .chunks(a)
            .map(|raw| {
                let mut tape = Tape::new();
                let x = tape.constant(vec![1, a], self.normalizer.normalize(raw))?;
                let f = self.forward(&mut tape, x)?;
                let index = match (self.kind(), &f.indices) {
                    (TokenizerKind::Bin, _) | (_, None) => None,
                    (_, Some(ix)) => Some(ix[0]),
                };
                Ok(TokenizerOutput {
                    embedding: tape.value(f.embedding).to_vec(),
                    index,
                    reconstruction: self.normalizer.denormalize(tape.value(f.reconstruction)),
                    losses: f.losses.values(&tape),
                })
            })
            .collect()
    }

    /// Bin indices per dimension (bin kind only).
    pub fn bin_indices(&self, action: &[f64]) -> Result<Vec<usize>> {
        let spec = self
            .bins
            .as_ref()
            .ok_or_else(|| Error::Usage("bin indices of a non-bin tokenizer".into()))?;
        self.check_actions(action)?;
        spec.encode(&self.normalizer.normalize(action))
    }

    /// Latent feature trajectory used for smoothness analysis: the continuous
    /// encoder output for encoder kinds (before any quantization) and the
    /// integer bin indices for the bin kind. Input and output are row-major.
    pub fn latent_features(&self, actions: &[f64]) -> Result<Vec<f64>> {
        let a = self.config.action_dim;
        let batch = self.check_actions(actions)?;
        let norm = self.normalize_batch(actions)?;
        match &self.encoder {
            Some(enc) => Ok(enc
                .eval(&Tensor::new(vec![batch, a], norm)?)?
                .into_data()),
            None => {
                let spec = self.bins.as_ref().expect("bin kind owns a spec");
                Ok(norm
                    .chunks(a)
                    .map(|r| spec.encode(r))
                    .collect::<Result<Vec<_>>>()?
                    .into_iter()
                    .flatten()
                    .map(|i| i as f64)
                    .collect())
            }
        }
    }

    pub fn latent_feature_dim(&self) -> usize {
        match self.kind() {
            TokenizerKind::Bin => self.config.action_dim,
            _ => self.config.latent_dim,
        }
    }

    /// Decodes token embeddings `[batch, D]` to raw actions (encoder kinds).
    pub fn decode(&self, embeddings: &[f64]) -> Result<Vec<f64>> {
        let dec = self
            .decoder
            .as_ref()
            .ok_or_else(|| Error::Usage("the bin tokenizer has no learned decoder".into()))?;
        let d = self.config.latent_dim;
        if embeddings.is_empty() || embeddings.len() % d != 0 {
            return Err(Error::dim("decode", &[embeddings.len()], &[d]));
        }
        let y = dec.eval(&Tensor::new(vec![embeddings.len() / d, d], embeddings.to_vec())?)?;
        Ok(y.data()
            .chunks(self.config.action_dim)
            .flat_map(|r| self.normalizer.denormalize(r))
            .collect())
    }

    pub(crate) fn restore_parts(
        config: TokenizerConfig,
        normalizer: ActionNormalizer,
        trained_steps: u64,
        mut tensors: std::collections::HashMap<String, Tensor>,
        usage: Option<Vec<u64>>,
    ) -> Result<Self> {
        // Build the skeleton deterministically, then overwrite every tensor.
        let mut rng = crate::rng::stream(0, "checkpoint-skeleton");
        let mut tok = Tokenizer::new(config, &mut rng)?;
        tok.normalizer = normalizer;
        tok.trained_steps = trained_steps;
        let mut missing = None;
        tok.visit_params_mut("", &mut |name, t| match tensors.remove(&name) {
            Some(src) if src.shape() == t.shape() => {
                t.data_mut().copy_from_slice(src.data());
            }
            _ => {
                missing.get_or_insert(name);
            }
        });
        if let Some(name) = missing {
            return Err(Error::Input(format!("tensor `{name}` missing or mis-shaped")));
        }
        if let Some(name) = tensors.keys().next() {
            return Err(Error::Input(format!("unexpected tensor `{name}`")));
        }
        if let (Some(cb), Some(u)) = (tok.codebook.as_mut(), usage) {
            cb.set_usage_counts(u)?;
        }
        Ok(tok)
    }
}

impl Module for Tokenizer {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        if let Some(e) = &self.encoder {
            e.visit_params(&join(prefix, "encoder"), f);
        }
        if let Some(d) = &self.decoder {
            d.visit_params(&join(prefix, "decoder"), f);
        }
        if let Some(c) = &self.codebook {
            c.visit_params(&join(prefix, "codebook"), f);
        }
        if let Some(t) = &self.bin_embedding {
            f(join(prefix, "bin_embedding"), t);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        if let Some(e) = &mut self.encoder {
            e.visit_params_mut(&join(prefix, "encoder"), f);
        }
        if let Some(d) = &mut self.decoder {
            d.visit_params_mut(&join(prefix, "decoder"), f);
        }
        if let Some(c) = &mut self.codebook {
            c.visit_params_mut(&join(prefix, "codebook"), f);
        }
        if let Some(t) = &mut self.bin_embedding {
            f(join(prefix, "bin_embedding"), t);
        }
    }
}
