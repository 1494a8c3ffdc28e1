//! Trains a small in-context policy on the toy suite, then compares reach
//! success with a matching prompt against a push prompt.

use std::time::Instant;

use liptok::icil::{
    generate_expert_dataset, policy_tokenizer_config, prompt_pool, success_rate, train_policy,
    CausalPolicy, PolicyConfig, PolicyTrainOptions, TaskFamily,
};
use liptok::rng;
use liptok::tokenizer::{Tokenizer, TokenizerKind};

fn main() -> liptok::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(500);
    let kind: TokenizerKind = args.next().map(|s| s.parse()).transpose()?.unwrap_or(TokenizerKind::LipVqVae);
    let lr: f64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(1e-3);
    let seed = 0;

    let data = generate_expert_dataset(&TaskFamily::ALL, 100, seed)?;
    let lens: Vec<usize> = data.iter().map(|e| e.len()).collect();
    println!(
        "{} episodes, mean length {:.1}, max {}",
        data.len(),
        lens.iter().sum::<usize>() as f64 / lens.len() as f64,
        lens.iter().max().unwrap()
    );
    let tok = Tokenizer::new(policy_tokenizer_config(kind), &mut rng::stream(seed, "tokenizer-init"))?;
    let mut policy = CausalPolicy::new(PolicyConfig::default(), tok, &mut rng::stream(seed, "policy-init"))?;
    let mut opts = PolicyTrainOptions { steps, seed, ..PolicyTrainOptions::default() };
    opts.adam.lr = lr;
    let t0 = Instant::now();
    let report = train_policy(&mut policy, &data, &opts)?;
    println!("{kind}: {steps} steps in {:.1}s", t0.elapsed().as_secs_f64());
    for (i, chunk) in report.bc_loss.chunks((steps as usize / 10).max(1)).enumerate() {
        println!("  bc[{i}] {:.5}", chunk.iter().sum::<f64>() / chunk.len() as f64);
    }
    let t1 = Instant::now();
    for task in TaskFamily::ALL {
        let prompts = prompt_pool(task, 20, seed)?;
        println!("{task} matched: {:.2}", success_rate(&policy, task, &prompts, 100, seed)?);
    }
    let push = prompt_pool(TaskFamily::Push, 20, seed)?;
    println!("reach with push prompt: {:.2}", success_rate(&policy, TaskFamily::Reach, &push, 100, seed)?);
    println!("eval {:.1}s", t1.elapsed().as_secs_f64());
    Ok(())
}
