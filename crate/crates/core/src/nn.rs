//! Linear layers, the row-normalized Lipschitz layer and MLP stacks.

use rand::Rng;

use crate::autodiff::kernels::{softplus, softplus_inv};
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Anything that owns named trainable tensors.
pub trait Module {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor));
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor));

    fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.visit_params("", &mut |n, t| out.push((n, t.clone())));
        out
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params("", &mut |_, t| n += t.numel());
        n
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    /// Weights and bias uniform in `±√(1/in)`.
    pub fn new<R: Rng>(inp: usize, out: usize, rng: &mut R) -> Result<Self> {
        let bound = (1.0 / inp as f64).sqrt();
        Ok(Linear {
            weight: Tensor::uniform(vec![out, inp], bound, rng)?.into_param(),
            bias: Tensor::uniform(vec![out], bound, rng)?.into_param(),
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.param(&self.weight);
        let b = tape.param(&self.bias);
        let y = tape.matmul_nt(x, w)?;
        tape.add_bias(y, b)
    }
}

impl Module for Linear {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

/// Linear layer whose rows are rescaled on every forward pass so that each
/// absolute row sum stays within `softplus(raw_bound)`. The raw weight is
/// never overwritten; the normalized weight only exists on the tape.
#[derive(Debug, Clone, PartialEq)]
pub struct LipschitzLinear {
    pub weight: Tensor,
    pub bias: Tensor,
    pub raw_bound: Tensor,
}

impl LipschitzLinear {
    /// Same init as [`Linear`], with the raw bound set so that
    /// `softplus(c)` equals the largest absolute row sum. Normalization
    /// therefore starts as a no-op.
    pub fn new<R: Rng>(inp: usize, out: usize, rng: &mut R) -> Result<Self> {
        let Linear { weight, bias } = Linear::new(inp, out, rng)?;
        let c = softplus_inv(max_abs_row_sum(&weight).max(1e-6));
        Ok(LipschitzLinear {
            weight,
            bias,
            raw_bound: Tensor::scalar(c).into_param(),
        })
    }

    pub fn from_parts(weight: Tensor, bias: Tensor, raw_bound: f64) -> Result<Self> {
        if weight.shape().len() != 2 || bias.shape() != [weight.shape()[0]] {
            return Err(Error::dim("lipschitz_linear", weight.shape(), bias.shape()));
        }
        Ok(LipschitzLinear {
            weight: weight.into_param(),
            bias: bias.into_param(),
            raw_bound: Tensor::scalar(raw_bound).into_param(),
        })
    }

    /// `softplus(c)`, the layer's ∞-norm Lipschitz bound.
    pub fn bound(&self) -> f64 {
        softplus(self.raw_bound.item())
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn normalized_weight(&self, tape: &mut Tape) -> Result<Var> {
        let w = tape.param(&self.weight);
        let c = tape.param(&self.raw_bound);
        tape.lipschitz_normalize(w, c)
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = self.normalized_weight(tape)?;
        let b = tape.param(&self.bias);
        let y = tape.matmul_nt(x, w)?;
        tape.add_bias(y, b)
    }
}

impl Module for LipschitzLinear {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
        f(join(prefix, "raw_bound"), &self.raw_bound);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
        f(join(prefix, "raw_bound"), &mut self.raw_bound);
    }
}

/// Row-normalizes `w` against `softplus(c)` outside of any training step.
pub fn lipschitz_normalize(w: &Tensor, c: f64) -> Result<Tensor> {
    let mut tape = Tape::new();
    let wv = tape.leaf(w);
    let cv = tape.leaf(&Tensor::scalar(c));
    let out = tape.lipschitz_normalize(wv, cv)?;
    Ok(tape.tensor(out))
}

pub fn max_abs_row_sum(w: &Tensor) -> f64 {
    let cols = w.cols();
    w.data()
        .chunks(cols)
        .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Plain(Linear),
    Lipschitz(LipschitzLinear),
}

impl Layer {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self {
            Layer::Plain(l) => l.forward(tape, x),
            Layer::Lipschitz(l) => l.forward(tape, x),
        }
    }

    pub fn in_dim(&self) -> usize {
        match self {
            Layer::Plain(l) => l.in_dim(),
            Layer::Lipschitz(l) => l.in_dim(),
        }
    }

    pub fn out_dim(&self) -> usize {
        match self {
            Layer::Plain(l) => l.out_dim(),
            Layer::Lipschitz(l) => l.out_dim(),
        }
    }
}

impl Module for Layer {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        match self {
            Layer::Plain(l) => l.visit_params(prefix, f),
            Layer::Lipschitz(l) => l.visit_params(prefix, f),
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        match self {
            Layer::Plain(l) => l.visit_params_mut(prefix, f),
            Layer::Lipschitz(l) => l.visit_params_mut(prefix, f),
        }
    }
}

/// Linear layers with ReLU between consecutive layers and no activation
/// after the last one.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpStack {
    layers: Vec<Layer>,
    lipschitz_constrained: bool,
}

impl MlpStack {
    /// `dims = [in, hidden.., out]`. When `lipschitz` is set every layer,
    /// including the output layer, is a [`LipschitzLinear`].
    pub fn new<R: Rng>(dims: &[usize], lipschitz: bool, rng: &mut R) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::Usage("an MLP needs at least input and output widths".into()));
        }
        let layers = dims
            .windows(2)
            .map(|w| {
                Ok(if lipschitz {
                    Layer::Lipschitz(LipschitzLinear::new(w[0], w[1], rng)?)
                } else {
                    Layer::Plain(Linear::new(w[0], w[1], rng)?)
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(MlpStack {
            layers,
            lipschitz_constrained: lipschitz,
        })
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Usage("empty MLP".into()));
        }
        for w in layers.windows(2) {
            if w[0].out_dim() != w[1].in_dim() {
                return Err(Error::dim(
                    "mlp",
                    &[w[0].out_dim()],
                    &[w[1].in_dim()],
                ));
            }
        }
        let lipschitz_constrained = layers.iter().all(|l| matches!(l, Layer::Lipschitz(_)));
        Ok(MlpStack {
            layers,
            lipschitz_constrained,
        })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn is_lipschitz_constrained(&self) -> bool {
        self.lipschitz_constrained
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim()
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, h)?;
            if i < last {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }

    /// Forward pass on plain values, `x[batch, in] -> [batch, out]`.
    pub fn eval(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.leaf(x);
        let y = self.forward(&mut tape, xv)?;
        Ok(tape.tensor(y))
    }

    fn bounds(&self) -> Result<Vec<&LipschitzLinear>> {
        if !self.lipschitz_constrained {
            return Err(Error::Usage(
                "Lipschitz bound requested for an unconstrained stack".into(),
            ));
        }
        Ok(self
            .layers
            .iter()
            .map(|l| match l {
                Layer::Lipschitz(l) => l,
                Layer::Plain(_) => unreachable!("constrained stacks hold only Lipschitz layers"),
            })
            .collect())
    }

    /// `Π softplus(c_ℓ)`, an upper bound on the ∞-norm Lipschitz constant
    /// of the whole stack since ReLU is 1-Lipschitz.
    pub fn lipschitz_bound(&self) -> Result<f64> {
        Ok(self.bounds()?.iter().map(|l| l.bound()).product())
    }

    /// Differentiable `Π softplus(c_ℓ)` computed from the raw bounds.
    pub fn lipschitz_loss(&self, tape: &mut Tape) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for l in self.bounds()? {
            let c = tape.param(&l.raw_bound);
            let sp = tape.softplus(c);
            acc = Some(match acc {
                None => sp,
                Some(a) => tape.mul_scalar(a, sp)?,
            });
        }
        Ok(acc.expect("non-empty stack"))
    }
}

impl Module for MlpStack {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit_params(&join(prefix, &i.to_string()), f);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_params_mut(&join(prefix, &i.to_string()), f);
        }
    }
}
