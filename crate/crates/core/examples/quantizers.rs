//! The three quantizers on a handful of latents.

use liptok::quantize::{codebook_perplexity, lfq_quantize, vq_lookup, BinSpec, Codebook};
use liptok::rng;
use rand::Rng;

fn main() -> liptok::Result<()> {
    let mut r = rng::stream(2, "example");
    let latents: Vec<f64> = (0..8 * 4).map(|_| r.gen_range(-0.01..0.01)).collect();

    let mut cb = Codebook::new(16, 4, &mut r)?;
    let vq = vq_lookup(&mut cb, &latents)?;
    println!("vq indices  {:?}", vq.indices);
    println!("perplexity  {:.3}", codebook_perplexity(&cb)?);

    let lfq = lfq_quantize(&latents, 4)?;
    println!("lfq indices {:?}", lfq.indices);

    let bins = BinSpec::unit(3);
    let action = [0.5, -0.25, 0.999];
    let idx = bins.encode(&action)?;
    println!("bins {idx:?} -> {:?}", bins.decode(&idx)?);
    Ok(())
}
