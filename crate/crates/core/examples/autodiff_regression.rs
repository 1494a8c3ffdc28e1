//! Fits a two-layer network to a sine curve with the tape and Adam.

use liptok::autodiff::{Adam, AdamConfig, Tape, Tensor};
use liptok::nn::MlpStack;
use liptok::rng;

fn main() -> liptok::Result<()> {
    let mut r = rng::stream(0, "example");
    let mut net = MlpStack::new(&[1, 32, 1], false, &mut r)?;
    let xs: Vec<f64> = (0..64).map(|i| -3.0 + 6.0 * i as f64 / 63.0).collect();
    let ys: Vec<f64> = xs.iter().map(|x| x.sin()).collect();
    let mut adam = Adam::new(AdamConfig { lr: 1e-2, warmup_steps: 0, ..AdamConfig::default() });
    for step in 0..=2000 {
        let mut tape = Tape::new();
        let x = tape.constant(vec![64, 1], xs.clone())?;
        let y = tape.constant(vec![64, 1], ys.clone())?;
        let pred = net.forward(&mut tape, x)?;
        let diff = tape.sub(pred, y)?;
        let loss = tape.mean_row_sq_norm(diff);
        if step % 500 == 0 {
            println!("step {step:>4}: mse {:.6}", tape.item(loss));
        }
        tape.backward(loss)?.store_into(&mut net);
        adam.step(&mut net)?;
    }
    let probe = net.eval(&Tensor::new(vec![1, 1], vec![1.0])?)?;
    println!("f(1) = {:.4}, sin(1) = {:.4}", probe.data()[0], 1f64.sin());
    Ok(())
}
