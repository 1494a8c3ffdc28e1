#![allow(dead_code)]

use liptok::autodiff::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
}

/// Builds `loss = Σ out ⊙ R` for a fixed random projection `R`, so every
/// output element contributes with a distinct weight.
pub type Build<'a> = dyn Fn(&mut Tape, &[Var]) -> Var + 'a;

fn eval_loss(build: &Build, inputs: &[Tensor], proj: &[f64]) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let out = build(&mut tape, &vars);
    tape.value(out).iter().zip(proj).map(|(a, b)| a * b).sum()
}

/// Analytic gradients of every input against central differences.
/// Returns the worst norm-wise relative error over the inputs.
pub fn gradcheck(build: &Build, inputs: &[Tensor], seed: u64) -> f64 {
    let mut params: Vec<Tensor> = inputs.iter().cloned().map(Tensor::into_param).collect();
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|t| tape.leaf(t)).collect();
    let out = build(&mut tape, &vars);
    let mut r = rng(seed ^ 0xfeed);
    let proj: Vec<f64> = (0..tape.value(out).len())
        .map(|_| r.gen_range(-1.0..1.0))
        .collect();
    let pv = tape.constant(tape.shape(out).to_vec(), proj.clone()).unwrap();
    let prod = tape.mul(out, pv).unwrap();
    let loss = tape.sum(prod);
    let grads = tape.backward(loss).unwrap();

    let mut worst: f64 = 0.0;
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.of(*v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; params[k].numel()]);
        let mut numeric = vec![0.0; analytic.len()];
        for i in 0..analytic.len() {
            let orig = params[k].data()[i];
            params[k].data_mut()[i] = orig + FD_STEP;
            let up = eval_loss(build, &params, &proj);
            params[k].data_mut()[i] = orig - FD_STEP;
            let down = eval_loss(build, &params, &proj);
            params[k].data_mut()[i] = orig;
            numeric[i] = (up - down) / (2.0 * FD_STEP);
        }
        let diff: f64 = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        let denom = na.max(nn);
        let rel = if denom < 1e-12 { diff } else { diff / denom };
        worst = worst.max(rel);
    }
    worst
}

pub const GRAD_TOL: f64 = 1e-5;
pub const GRAD_INSTANCES: u64 = 10;

/// One differentiable op under test: input shapes and the graph to build.
pub struct OpCase {
    pub name: &'static str,
    pub shapes: Vec<Vec<usize>>,
    pub build: Box<Build<'static>>,
}

fn case(name: &'static str, shapes: &[&[usize]], build: impl Fn(&mut Tape, &[Var]) -> Var + 'static) -> OpCase {
    OpCase {
        name,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        build: Box::new(build),
    }
}

/// Every differentiable tape op, plus the compositions the models use.
pub fn op_cases() -> Vec<OpCase> {
    vec![
        case("matmul", &[&[3, 4], &[4, 2]], |t, v| t.matmul(v[0], v[1]).unwrap()),
        case("matmul_nt", &[&[9, 4], &[5, 4]], |t, v| t.matmul_nt(v[0], v[1]).unwrap()),
        case("sum_matmul", &[&[2, 3], &[3, 4]], |t, v| {
            let c = t.matmul(v[0], v[1]).unwrap();
            t.sum(c)
        }),
        case("add_bias", &[&[3, 4], &[4]], |t, v| t.add_bias(v[0], v[1]).unwrap()),
        case("add", &[&[3, 4], &[3, 4]], |t, v| t.add(v[0], v[1]).unwrap()),
        case("sub", &[&[2, 3], &[2, 3]], |t, v| t.sub(v[0], v[1]).unwrap()),
        case("mul", &[&[3, 4], &[3, 4]], |t, v| t.mul(v[0], v[1]).unwrap()),
        case("scale", &[&[2, 3]], |t, v| t.scale(v[0], -1.7)),
        case("mul_scalar", &[&[2, 3], &[1]], |t, v| t.mul_scalar(v[0], v[1]).unwrap()),
        case("relu", &[&[4, 5]], |t, v| t.relu(v[0])),
        case("softplus", &[&[3, 3]], |t, v| t.softplus(v[0])),
        case("sum", &[&[3, 2]], |t, v| t.sum(v[0])),
        case("mean", &[&[3, 2]], |t, v| t.mean(v[0])),
        case("mean_row_sq_norm", &[&[5, 3]], |t, v| t.mean_row_sq_norm(v[0])),
        case("softmax_causal", &[&[4, 4]], |t, v| t.softmax_causal(v[0]).unwrap()),
        case("layernorm", &[&[3, 6], &[6], &[6]], |t, v| t.layernorm(v[0], v[1], v[2]).unwrap()),
        // Raw bounds in [-2, 2] give softplus(c) below typical row sums of a
        // random 3x5 matrix, so most rows rescale.
        case("lipschitz_normalize", &[&[3, 5], &[1]], |t, v| {
            t.lipschitz_normalize(v[0], v[1]).unwrap()
        }),
        case("gather_rows", &[&[4, 3]], |t, v| t.gather_rows(v[0], &[2, 0, 2, 3]).unwrap()),
        case("slice_concat_reshape", &[&[4, 6]], |t, v| {
            let a = t.slice_rows(v[0], 1, 2).unwrap();
            let b = t.slice_cols(a, 2, 3).unwrap();
            let c = t.slice_cols(a, 0, 1).unwrap();
            let d = t.concat_cols(&[b, c, b]).unwrap();
            let e = t.concat_rows(&[d, d]).unwrap();
            t.reshape(e, vec![2, 2, 7]).unwrap()
        }),
        case("attention", &[&[5, 4], &[5, 4], &[5, 4]], |t, v| {
            let s = t.matmul_nt(v[0], v[1]).unwrap();
            let s = t.scale(s, 0.5);
            let p = t.softmax_causal(s).unwrap();
            t.matmul(p, v[2]).unwrap()
        }),
    ]
}

/// Worst relative error of `case` over its random instances. Inputs within
/// 1e-4 of zero are nudged away so ReLU kinks are never probed.
pub fn check_op(case: &OpCase) -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..GRAD_INSTANCES {
        let mut r = rng(seed * 7919 + case.name.len() as u64);
        let inputs: Vec<Tensor> = case
            .shapes
            .iter()
            .map(|s| {
                let mut t = random_tensor(&mut r, s.clone());
                t.data_mut().iter_mut().filter(|v| v.abs() < 1e-4).for_each(|v| *v = 0.5);
                t
            })
            .collect();
        worst = worst.max(gradcheck(&*case.build, &inputs, seed));
    }
    worst
}
