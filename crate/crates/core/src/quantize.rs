//! Discrete bottlenecks: nearest-entry codebook lookup, lookup-free sign
//! quantization and uniform per-dimension binning.
//!
//! The tape variants return a straight-through output: its forward value is
//! the quantized vector, and its gradient flows to the encoder output as if
//! quantization were the identity.

use rand::Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{join, Module};

/// Default number of codebook entries.
pub const DEFAULT_CODEBOOK_SIZE: usize = 1 << 10;

/// Largest latent dimension LFQ accepts; indices live in `[0, 2^D)`.
pub const LFQ_MAX_DIM: usize = 30;

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    entries: Tensor,
    usage_counts: Vec<u64>,
}

impl Codebook {
    /// `K` entries of dimension `D`, components uniform in `±1/K`.
    pub fn new<R: Rng>(size: usize, dim: usize, rng: &mut R) -> Result<Self> {
        let entries = Tensor::uniform(vec![size, dim], 1.0 / size as f64, rng)?;
        Codebook::from_entries(entries)
    }

    pub fn from_entries(entries: Tensor) -> Result<Self> {
        let s = entries.shape();
        if s.len() != 2 || s[0] < 2 {
            return Err(Error::Shape {
                shape: s.to_vec(),
                reason: "codebook needs shape [K >= 2, D >= 1]".into(),
            });
        }
        if !entries.is_finite() {
            return Err(Error::Input("codebook entries must be finite".into()));
        }
        let k = s[0];
        Ok(Codebook {
            entries: entries.into_param(),
            usage_counts: vec![0; k],
        })
    }

    pub fn size(&self) -> usize {
        self.entries.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.entries.shape()[1]
    }

    pub fn entries(&self) -> &Tensor {
        &self.entries
    }

    pub fn entry(&self, k: usize) -> &[f64] {
        self.entries.row(k)
    }

    pub fn usage_counts(&self) -> &[u64] {
        &self.usage_counts
    }

    pub fn set_usage_counts(&mut self, counts: Vec<u64>) -> Result<()> {
        if counts.len() != self.size() {
            return Err(Error::dim("usage_counts", &[counts.len()], &[self.size()]));
        }
        self.usage_counts = counts;
        Ok(())
    }

    pub fn record_usage(&mut self, indices: &[usize]) {
        for &i in indices {
            self.usage_counts[i] += 1;
        }
    }

    pub fn reset_usage(&mut self) {
        self.usage_counts.iter_mut().for_each(|c| *c = 0);
    }

    /// Index of the entry nearest to `x` in squared L2; the lowest index
    /// wins ties.
    pub fn nearest(&self, x: &[f64]) -> usize {
        let d = self.dim();
        let mut best = 0;
        let mut best_dist = f64::INFINITY;
        for (k, e) in self.entries.data().chunks(d).enumerate() {
            let dist: f64 = x.iter().zip(e).map(|(a, b)| (a - b) * (a - b)).sum();
            if dist < best_dist {
                best_dist = dist;
                best = k;
            }
        }
        best
    }
}

impl Module for Codebook {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(join(prefix, "entries"), &self.entries);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(join(prefix, "entries"), &mut self.entries);
    }
}

/// Value-level quantization outcome for a batch of latents.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizationResult {
    /// Row-major `[batch, D]`.
    pub quantized: Vec<f64>,
    pub dim: usize,
    pub indices: Vec<usize>,
    pub codebook_loss: f64,
    pub commitment_loss: f64,
}

impl QuantizationResult {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.quantized[i * self.dim..(i + 1) * self.dim]
    }

    fn empty(dim: usize) -> Self {
        QuantizationResult {
            quantized: Vec::new(),
            dim,
            indices: Vec::new(),
            codebook_loss: 0.0,
            commitment_loss: 0.0,
        }
    }
}

/// Quantization recorded on a tape.
#[derive(Debug, Clone)]
pub struct TapeQuantization {
    /// Quantized values forward, identity gradient backward.
    pub output: Var,
    pub indices: Vec<usize>,
    /// `‖sg[x] − z‖²`, reaches only the codebook.
    pub codebook_loss: Var,
    /// `‖x − sg[z]‖²`, reaches only the encoder.
    pub commitment_loss: Var,
}

fn check_latents(latents: &[f64], dim: usize) -> Result<usize> {
    if dim == 0 || latents.len() % dim != 0 {
        return Err(Error::dim("quantize", &[latents.len()], &[dim]));
    }
    if latents.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("non-finite latent".into()));
    }
    Ok(latents.len() / dim)
}

/// Straight-through output plus the two stop-gradient losses.
fn straight_through(tape: &mut Tape, x: Var, q: Var) -> Result<(Var, Var, Var)> {
    let output = tape.straight_through(x, q)?;

    let sx = tape.stop_gradient(x);
    let cb = tape.sub(sx, q)?;
    let codebook_loss = tape.mean_row_sq_norm(cb);

    let sq = tape.stop_gradient(q);
    let cm = tape.sub(x, sq)?;
    let commitment_loss = tape.mean_row_sq_norm(cm);
    Ok((output, codebook_loss, commitment_loss))
}

/// Nearest-entry quantization of `latents[batch, D]` on the tape.
pub fn vq_quantize(tape: &mut Tape, codebook: &Codebook, latents: Var) -> Result<TapeQuantization> {
    let shape = tape.shape(latents).to_vec();
    if shape.len() != 2 || shape[1] != codebook.dim() {
        return Err(Error::dim("vq_lookup", &shape, codebook.entries.shape()));
    }
    let indices: Vec<usize> = tape
        .value(latents)
        .chunks(shape[1])
        .map(|row| codebook.nearest(row))
        .collect();
    let table = tape.param(&codebook.entries);
    let z = tape.gather_rows(table, &indices)?;
    let (output, codebook_loss, commitment_loss) = straight_through(tape, latents, z)?;
    Ok(TapeQuantization {
        output,
        indices,
        codebook_loss,
        commitment_loss,
    })
}

/// Nearest-entry lookup for row-major `latents[batch, D]`. Increments the
/// codebook's usage counts.
pub fn vq_lookup(codebook: &mut Codebook, latents: &[f64]) -> Result<QuantizationResult> {
    let d = codebook.dim();
    let batch = check_latents(latents, d)?;
    if batch == 0 {
        return Ok(QuantizationResult::empty(d));
    }
    let mut tape = Tape::new();
    let x = tape.constant(vec![batch, d], latents.to_vec())?;
    let q = vq_quantize(&mut tape, codebook, x)?;
    codebook.record_usage(&q.indices);
    Ok(QuantizationResult {
        quantized: tape.value(q.output).to_vec(),
        dim: d,
        codebook_loss: tape.item(q.codebook_loss),
        commitment_loss: tape.item(q.commitment_loss),
        indices: q.indices,
    })
}

/// Sign pattern of a latent as an integer, first dimension most significant,
/// bit set for `+1`. `sign(0) = +1`.
fn lfq_index(row: &[f64]) -> usize {
    row.iter()
        .fold(0usize, |acc, v| (acc << 1) | usize::from(*v >= 0.0))
}

fn sign_pos(v: f64) -> f64 {
    if v >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// Lookup-free quantization onto `{−1, +1}^D` on the tape. The codebook
/// loss is identically zero since there is no table.
pub fn lfq_quantize_tape(tape: &mut Tape, latents: Var) -> Result<TapeQuantization> {
    let shape = tape.shape(latents).to_vec();
    if shape.len() != 2 {
        return Err(Error::Shape {
            shape,
            reason: "latents must be [batch, D]".into(),
        });
    }
    let d = shape[1];
    if d > LFQ_MAX_DIM {
        return Err(Error::IndexOverflow {
            dim: d,
            max: LFQ_MAX_DIM,
        });
    }
    let vals = tape.value(latents);
    let indices = vals.chunks(d).map(lfq_index).collect();
    let signs = vals.iter().map(|v| sign_pos(*v)).collect();
    let q = tape.constant(shape, signs)?;
    let (output, _, commitment_loss) = straight_through(tape, latents, q)?;
    let codebook_loss = tape.constant(vec![1], vec![0.0])?;
    Ok(TapeQuantization {
        output,
        indices,
        codebook_loss,
        commitment_loss,
    })
}

pub fn lfq_quantize(latents: &[f64], dim: usize) -> Result<QuantizationResult> {
    if dim > LFQ_MAX_DIM {
        return Err(Error::IndexOverflow {
            dim,
            max: LFQ_MAX_DIM,
        });
    }
    let batch = check_latents(latents, dim)?;
    if batch == 0 {
        return Ok(QuantizationResult::empty(dim));
    }
    let mut tape = Tape::new();
    let x = tape.constant(vec![batch, dim], latents.to_vec())?;
    let q = lfq_quantize_tape(&mut tape, x)?;
    Ok(QuantizationResult {
        quantized: tape.value(q.output).to_vec(),
        dim,
        codebook_loss: 0.0,
        commitment_loss: tape.item(q.commitment_loss),
        indices: q.indices,
    })
}

/// Uniform per-dimension binning.
#[derive(Debug, Clone, PartialEq)]
pub struct BinSpec {
    pub bins_per_dim: usize,
    pub ranges: Vec<(f64, f64)>,
}

impl BinSpec {
    pub const DEFAULT_BINS: usize = 256;

    pub fn new(bins_per_dim: usize, ranges: Vec<(f64, f64)>) -> Result<Self> {
        if bins_per_dim < 2 {
            return Err(Error::Input("at least two bins per dimension".into()));
        }
        if ranges.iter().any(|(lo, hi)| !(lo < hi)) {
            return Err(Error::Input("bin range needs lo < hi".into()));
        }
        Ok(BinSpec {
            bins_per_dim,
            ranges,
        })
    }

    /// 256 bins over `[−1, 1]` in each of `dims` dimensions.
    pub fn unit(dims: usize) -> Self {
        BinSpec {
            bins_per_dim: Self::DEFAULT_BINS,
            ranges: vec![(-1.0, 1.0); dims],
        }
    }

    pub fn dims(&self) -> usize {
        self.ranges.len()
    }

    pub fn width(&self, d: usize) -> f64 {
        let (lo, hi) = self.ranges[d];
        (hi - lo) / self.bins_per_dim as f64
    }

    /// Bin of each component after clamping into range; a value exactly on
    /// an inner edge belongs to the bin on its right.
    pub fn encode(&self, action: &[f64]) -> Result<Vec<usize>> {
        if action.len() != self.dims() {
            return Err(Error::dim("bin_encode", &[action.len()], &[self.dims()]));
        }
        action
            .iter()
            .enumerate()
            .map(|(d, &x)| {
                if !x.is_finite() {
                    return Err(Error::Input("non-finite action".into()));
                }
                let (lo, _) = self.ranges[d];
                let b = ((x - lo) / self.width(d)).floor();
                Ok((b.max(0.0) as usize).min(self.bins_per_dim - 1))
            })
            .collect()
    }

    /// Bin centers.
    pub fn decode(&self, indices: &[usize]) -> Result<Vec<f64>> {
        if indices.len() != self.dims() {
            return Err(Error::dim("bin_decode", &[indices.len()], &[self.dims()]));
        }
        indices
            .iter()
            .enumerate()
            .map(|(d, &i)| {
                if i >= self.bins_per_dim {
                    return Err(Error::Input(format!("bin {i} out of range")));
                }
                Ok(self.ranges[d].0 + (i as f64 + 0.5) * self.width(d))
            })
            .collect()
    }
}

/// `exp(H)` of the empirical usage distribution, in `[1, K]`.
pub fn codebook_perplexity(codebook: &Codebook) -> Result<f64> {
    perplexity(codebook.usage_counts())
}

pub fn perplexity(counts: &[u64]) -> Result<f64> {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(Error::Usage("perplexity of an unused codebook".into()));
    }
    let n = total as f64;
    let h: f64 = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum();
    Ok(h.exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn book(rows: &[[f64; 2]]) -> Codebook {
        let data = rows.iter().flatten().copied().collect();
        Codebook::from_entries(Tensor::new(vec![rows.len(), 2], data).unwrap()).unwrap()
    }

    #[test]
    fn nearest_entry_by_inspection() {
        let mut cb = book(&[[0.0, 0.0], [1.0, 1.0]]);
        let r = vq_lookup(&mut cb, &[0.2, 0.1]).unwrap();
        assert_eq!(r.indices, vec![0]);
        assert_eq!(r.row(0), &[0.0, 0.0]);
        assert!((r.commitment_loss - 0.05).abs() < 1e-15);
        assert_eq!(r.codebook_loss, r.commitment_loss);
    }

    #[test]
    fn entry_is_a_fixed_point() {
        let mut cb = book(&[[0.0, 0.0], [1.0, 1.0], [2.0, -1.0], [0.5, 3.0]]);
        let r = vq_lookup(&mut cb, &[0.5, 3.0]).unwrap();
        assert_eq!(r.indices, vec![3]);
        assert_eq!(r.commitment_loss, 0.0);
        assert_eq!(r.codebook_loss, 0.0);
    }

    #[test]
    fn ties_go_to_the_lowest_index() {
        let mut cb = book(&[[0.0, 0.0], [1.0, 0.0]]);
        let r = vq_lookup(&mut cb, &[0.5, 0.25]).unwrap();
        assert_eq!(r.indices, vec![0]);
    }

    #[test]
    fn usage_counts_accumulate() {
        let mut cb = book(&[[0.0, 0.0], [1.0, 1.0]]);
        vq_lookup(&mut cb, &[0.1, 0.0, 0.9, 0.9, 1.1, 1.0]).unwrap();
        assert_eq!(cb.usage_counts(), &[1, 2]);
    }

    #[test]
    fn empty_batch_and_mismatched_dim() {
        let mut cb = book(&[[0.0, 0.0], [1.0, 1.0]]);
        assert!(vq_lookup(&mut cb, &[]).unwrap().is_empty());
        assert!(vq_lookup(&mut cb, &[0.1, 0.2, 0.3]).is_err());
    }

    #[test]
    fn codebook_init_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cb = Codebook::new(16, 4, &mut rng).unwrap();
        assert!(cb.entries().data().iter().all(|v| v.abs() <= 1.0 / 16.0));
        assert!(Codebook::from_entries(Tensor::zeros(vec![1, 3]).unwrap()).is_err());
    }

    #[test]
    fn lfq_sign_pattern_index() {
        let r = lfq_quantize(&[0.3, -0.2], 2).unwrap();
        assert_eq!(r.quantized, vec![1.0, -1.0]);
        assert_eq!(r.indices, vec![2]);
        let r = lfq_quantize(&[0.0, 0.0], 2).unwrap();
        assert_eq!(r.quantized, vec![1.0, 1.0]);
        assert_eq!(r.indices, vec![3]);
        assert_eq!(r.codebook_loss, 0.0);
    }

    #[test]
    fn lfq_is_idempotent() {
        let r = lfq_quantize(&[0.3, -0.2, -5.0, 0.01], 2).unwrap();
        let again = lfq_quantize(&r.quantized, 2).unwrap();
        assert_eq!(again.quantized, r.quantized);
        assert_eq!(again.commitment_loss, 0.0);
    }

    #[test]
    fn lfq_rejects_wide_latents() {
        assert!(matches!(
            lfq_quantize(&[0.0; 31], 31),
            Err(Error::IndexOverflow { dim: 31, .. })
        ));
    }

    #[test]
    fn bin_endpoints_and_center() {
        let spec = BinSpec::unit(1);
        assert_eq!(spec.encode(&[-1.0]).unwrap(), vec![0]);
        assert_eq!(spec.encode(&[1.0]).unwrap(), vec![255]);
        assert_eq!(spec.encode(&[0.0]).unwrap(), vec![128]);
        assert_eq!(spec.decode(&[128]).unwrap(), vec![0.00390625]);
        assert_eq!(spec.encode(&[7.0]).unwrap(), vec![255]);
        assert_eq!(spec.encode(&[-7.0]).unwrap(), vec![0]);
    }

    #[test]
    fn bin_spec_validation() {
        assert!(BinSpec::new(1, vec![(-1.0, 1.0)]).is_err());
        assert!(BinSpec::new(4, vec![(1.0, 1.0)]).is_err());
    }

    #[test]
    fn perplexity_cases() {
        assert!((perplexity(&[5; 8]).unwrap() - 8.0).abs() < 1e-12);
        assert!((perplexity(&[0, 9, 0]).unwrap() - 1.0).abs() < 1e-12);
        let h: f64 = -(0.75f64 * 0.75f64.ln() + 0.25 * 0.25f64.ln());
        let want = h.exp();
        assert!((perplexity(&[3, 1]).unwrap() - want).abs() < 1e-12);
        assert!((want - 1.7548).abs() < 1e-4);
        assert!(perplexity(&[0, 0]).is_err());
    }
}
