//! A small codebook-size sweep with Lipschitz on and off, run in-process.

use liptok::cli::{cmd_sweep, RunConfig};

fn main() -> liptok::Result<()> {
    let cfg = RunConfig {
        out: std::env::temp_dir().join("liptok-sweep-example"),
        sweep_codebook_sizes: vec![256, 1024],
        sweep_lipschitz: vec![false, true],
        sweep_seeds: vec![0, 1],
        train_steps: 300,
        tokenizer_hidden: vec![64, 64],
        data_episodes: 40,
        smoothness_trajectories: 40,
        ..RunConfig::default()
    };
    let report = cmd_sweep(&cfg)?;
    for c in &report.cells {
        println!(
            "K={:<5} lipschitz={:<5} seed={} smoothness={:.3} mse={:.4}",
            c.codebook_size,
            c.lipschitz,
            c.seed,
            c.smoothness.unwrap_or(f64::NAN),
            c.reconstruction_mse.unwrap_or(f64::NAN)
        );
    }
    println!("artifacts in {}", cfg.out.display());
    Ok(())
}
