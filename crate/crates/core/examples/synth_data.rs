//! Expert episodes from the toy suite and minimum-jerk action sequences.

use liptok::icil::{generate_expert_dataset, TaskFamily};
use liptok::smoothness::{least_energy_score, LatentTrajectory};
use liptok::synth::{min_jerk_profile, minimum_jerk_episodes, MinJerkConfig};

fn main() -> liptok::Result<()> {
    for tau in [0.0, 0.25, 0.5, 0.75, 1.0] {
        println!("s({tau:.2}) = {:.4}", min_jerk_profile(tau));
    }
    let mj = minimum_jerk_episodes(&MinJerkConfig { episodes: 3, ..MinJerkConfig::default() }, 0)?;
    for ep in &mj {
        let t = LatentTrajectory::new(ep.actions.concat(), 7, "raw", ep.id)?;
        println!("min-jerk episode {}: {} steps, energy {:.3}", ep.id, ep.actions.len(), least_energy_score(&t)?);
    }
    let experts = generate_expert_dataset(&TaskFamily::ALL, 2, 0)?;
    for ep in &experts {
        println!("{:>10}: {} steps, success {}", ep.task_id, ep.len(), ep.success);
    }
    Ok(())
}
