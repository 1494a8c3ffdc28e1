use crate::error::{Error, Result};

/// Per-dimension affine map sending `[lo, hi]` to `[−1, 1]`. Values outside
/// the fitted range map outside `[−1, 1]`; clamping is left to consumers.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionNormalizer {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl ActionNormalizer {
    pub const LOW_PERCENTILE: f64 = 1.0;
    pub const HIGH_PERCENTILE: f64 = 99.0;

    pub fn identity(dims: usize) -> Self {
        ActionNormalizer {
            lo: vec![-1.0; dims],
            hi: vec![1.0; dims],
        }
    }

    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() || lo.iter().zip(&hi).any(|(l, h)| !(l < h)) {
            return Err(Error::Input("normalizer needs lo < hi in every dimension".into()));
        }
        Ok(ActionNormalizer { lo, hi })
    }

    /// Fits the 1st/99th percentile range of each dimension. A dimension
    /// with no spread gets a unit half-width around its value.
    pub fn fit(actions: &[Vec<f64>]) -> Result<Self> {
        let first = actions
            .first()
            .ok_or_else(|| Error::Dataset("cannot fit a normalizer to no actions".into()))?;
        let dims = first.len();
        let mut lo = Vec::with_capacity(dims);
        let mut hi = Vec::with_capacity(dims);
        for d in 0..dims {
            let mut col: Vec<f64> = actions.iter().map(|a| a[d]).collect();
            if col.iter().any(|v| !v.is_finite()) {
                return Err(Error::Input("non-finite action value".into()));
            }
            col.sort_by(f64::total_cmp);
            let (mut l, mut h) = (
                percentile(&col, Self::LOW_PERCENTILE),
                percentile(&col, Self::HIGH_PERCENTILE),
            );
            if h - l < 1e-12 {
                l -= 1.0;
                h += 1.0;
            }
            lo.push(l);
            hi.push(h);
        }
        Ok(ActionNormalizer { lo, hi })
    }

    pub fn dims(&self) -> usize {
        self.lo.len()
    }

    pub fn normalize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .map(|(v, (l, h))| 2.0 * (v - l) / (h - l) - 1.0)
            .collect()
    }

    pub fn denormalize(&self, y: &[f64]) -> Vec<f64> {
        y.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .map(|(v, (l, h))| (v + 1.0) * 0.5 * (h - l) + l)
            .collect()
    }
}

/// Linear-interpolated percentile of sorted data.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    let pos = p / 100.0 * (sorted.len() - 1) as f64;
    let i = pos.floor() as usize;
    let frac = pos - i as f64;
    if i + 1 < sorted.len() {
        sorted[i] * (1.0 - frac) + sorted[i + 1] * frac
    } else {
        sorted[i]
    }
}
