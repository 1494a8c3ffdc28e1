//! Trains every tokenizer kind on minimum-jerk data and compares latent
//! smoothness. Arguments: steps, learning rate, seed.

use std::time::Instant;

use liptok::autodiff::AdamConfig;
use liptok::rng;
use liptok::smoothness::compare_tokenizers;
use liptok::synth::{flatten_actions, minimum_jerk_episodes, MinJerkConfig};
use liptok::tokenizer::{train_tokenizer, Tokenizer, TokenizerConfig, TokenizerKind, TrainOptions};

fn main() -> liptok::Result<()> {
    let steps: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(2000);
    let lr: f64 = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(1e-4);
    let seed: u64 = std::env::args().nth(3).and_then(|s| s.parse().ok()).unwrap_or(0);
    let episodes = minimum_jerk_episodes(&MinJerkConfig::default(), seed)?;
    let actions = flatten_actions(&episodes);
    let mut trained = Vec::new();
    for kind in TokenizerKind::ALL {
        let t0 = Instant::now();
        let mut tok = Tokenizer::new(
            TokenizerConfig::new(kind, 7),
            &mut rng::stream(seed, kind.as_str()),
        )?;
        let opts = TrainOptions {
            steps,
            seed,
            adam: AdamConfig { lr, ..AdamConfig::default() },
            ..TrainOptions::default()
        };
        let rep = train_tokenizer(&mut tok, &actions, &opts)?;
        let last = rep.curve.last().map(|p| (p.reconstruction, p.commitment)).unwrap_or_default();
        println!(
            "{kind}: {:.1}s rec/commit {:?} bound {:?} rec_err {:.5}",
            t0.elapsed().as_secs_f64(),
            last,
            tok.lipschitz_bound(),
            liptok::tokenizer::reconstruction_error(&tok, &actions)?
        );
        trained.push((kind.to_string(), tok));
    }
    let refs: Vec<_> = trained.iter().map(|(n, t)| (n.clone(), t)).collect();
    for r in compare_tokenizers(&refs, &episodes, 100)? {
        println!("{:>9} {:.4}", r.tokenizer, r.score);
    }
    Ok(())
}
