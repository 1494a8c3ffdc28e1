//! Trains a LipVQ-VAE tokenizer briefly, saves it, reloads it and compares.

use liptok::rng;
use liptok::synth::{flatten_actions, minimum_jerk_episodes, MinJerkConfig};
use liptok::tokenizer::{
    load_checkpoint, reconstruction_error, save_checkpoint, train_tokenizer, Tokenizer,
    TokenizerConfig, TokenizerKind, TrainOptions,
};

fn main() -> liptok::Result<()> {
    let episodes = minimum_jerk_episodes(&MinJerkConfig { episodes: 50, ..MinJerkConfig::default() }, 0)?;
    let actions = flatten_actions(&episodes);
    let cfg = TokenizerConfig::new(TokenizerKind::LipVqVae, 7).with_hidden(vec![64, 64]);
    let mut tok = Tokenizer::new(cfg, &mut rng::stream(0, "tokenizer-init"))?;
    let report = train_tokenizer(&mut tok, &actions, &TrainOptions { steps: 500, ..TrainOptions::default() })?;
    println!("final loss {:.5}", report.curve.last().map_or(f64::NAN, |p| p.total));
    println!("reconstruction mse {:.5}", reconstruction_error(&tok, &actions)?);
    println!("lipschitz bound {:.3}", tok.lipschitz_bound().unwrap_or(f64::NAN));

    let path = std::env::temp_dir().join("liptok-example.ltok");
    save_checkpoint(&tok, &path)?;
    let back = load_checkpoint(&path)?;
    let a = tok.tokenize(&actions[10])?;
    let b = back.tokenize(&actions[10])?;
    println!("code {:?} -> {:?}, identical: {}", a.index, b.index, a == b);
    std::fs::remove_file(path)?;
    Ok(())
}
