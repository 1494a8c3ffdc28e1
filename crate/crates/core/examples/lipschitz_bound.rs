//! Row-normalized layers: the certified bound against the empirical ratio.

use liptok::autodiff::Tensor;
use liptok::nn::{Layer, MlpStack};
use liptok::rng;
use liptok::smoothness::empirical_lipschitz_ratio;
use rand::Rng;

fn main() -> liptok::Result<()> {
    let mut r = rng::stream(1, "example");
    let net = MlpStack::new(&[7, 64, 64, 8], true, &mut r)?;
    for (i, layer) in net.layers().iter().enumerate() {
        if let Layer::Lipschitz(l) = layer {
            println!("layer {i}: softplus(c) = {:.4}", l.bound());
        }
    }
    let inputs: Vec<Vec<f64>> = (0..500)
        .map(|_| (0..7).map(|_| r.gen_range(-1.0..1.0)).collect())
        .collect();
    let ratio = empirical_lipschitz_ratio(
        |x| Ok(net.eval(&Tensor::new(vec![1, 7], x.to_vec())?)?.into_data()),
        &inputs,
        20_000,
        0,
    )?;
    println!("certified bound {:.4}", net.lipschitz_bound()?);
    println!("empirical ratio {ratio:.4}");
    Ok(())
}
