use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::env::{sample_state, scripted_expert, TaskFamily, ToyEnvState};
use crate::error::{Error, Result};
use crate::rng;
use crate::synth::ActionEpisode;

/// One demonstration; one JSON object per line on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub task_id: String,
    /// `T × O`.
    pub obs: Vec<Vec<f64>>,
    /// `T × A`.
    pub act: Vec<Vec<f64>>,
    pub success: bool,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.act.len()
    }

    pub fn is_empty(&self) -> bool {
        self.act.is_empty()
    }

    pub fn task(&self) -> Result<TaskFamily> {
        self.task_id.parse()
    }

    pub fn validate(&self) -> Result<()> {
        if !self.obs.is_empty() && self.obs.len() != self.act.len() {
            return Err(Error::Dataset(format!(
                "{} observations but {} actions",
                self.obs.len(),
                self.act.len()
            )));
        }
        let finite = |rows: &[Vec<f64>]| rows.iter().flatten().all(|v| v.is_finite());
        if !finite(&self.obs) || !finite(&self.act) {
            return Err(Error::Dataset("non-finite value in episode".into()));
        }
        let ragged = |rows: &[Vec<f64>]| rows.windows(2).any(|w| w[0].len() != w[1].len());
        if ragged(&self.obs) || ragged(&self.act) {
            return Err(Error::Dataset("rows of differing width".into()));
        }
        Ok(())
    }
}

/// Runs the scripted expert from `state` until success or the horizon.
pub fn expert_episode(mut state: ToyEnvState) -> Result<Episode> {
    let task = state.task;
    let mut obs = Vec::new();
    let mut act = Vec::new();
    while !state.is_done() {
        let a = scripted_expert(&state);
        obs.push(state.observation());
        state.step(&a)?;
        act.push(a);
    }
    Ok(Episode {
        task_id: task.as_str().into(),
        obs,
        act,
        success: state.is_success(),
    })
}

/// `per_task` expert demonstrations per family, families interleaved in
/// [`TaskFamily::ALL`] order.
pub fn generate_expert_dataset(
    tasks: &[TaskFamily],
    per_task: usize,
    seed: u64,
) -> Result<Vec<Episode>> {
    let mut streams: Vec<_> = tasks
        .iter()
        .map(|t| rng::stream(seed, &format!("expert-{t}")))
        .collect();
    let mut out = Vec::with_capacity(tasks.len() * per_task);
    for _ in 0..per_task {
        for (t, r) in tasks.iter().zip(&mut streams) {
            out.push(expert_episode(sample_state(*t, r))?);
        }
    }
    Ok(out)
}

/// Episodes grouped by task family; non-family records are rejected.
pub fn by_task(episodes: &[Episode]) -> Result<BTreeMap<TaskFamily, Vec<&Episode>>> {
    let mut map: BTreeMap<TaskFamily, Vec<&Episode>> = BTreeMap::new();
    for e in episodes {
        map.entry(e.task()?).or_default().push(e);
    }
    Ok(map)
}

pub fn to_action_episodes(episodes: &[Episode]) -> Vec<ActionEpisode> {
    episodes
        .iter()
        .enumerate()
        .map(|(id, e)| ActionEpisode {
            id,
            actions: e.act.clone(),
        })
        .collect()
}

pub fn from_action_episodes(episodes: &[ActionEpisode], task_id: &str) -> Vec<Episode> {
    episodes
        .iter()
        .map(|e| Episode {
            task_id: task_id.into(),
            obs: Vec::new(),
            act: e.actions.clone(),
            success: true,
        })
        .collect()
}

pub fn write_dataset(path: impl AsRef<Path>, episodes: &[Episode]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for e in episodes {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Vec<Episode>> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let e: Episode = serde_json::from_str(&line)
            .map_err(|err| Error::Dataset(format!("line {}: {err}", i + 1)))?;
        e.validate()
            .map_err(|err| Error::Dataset(format!("line {}: {err}", i + 1)))?;
        out.push(e);
    }
    Ok(out)
}

/// Picks a random element other than index `not`, or any when `not` is None.
pub(crate) fn pick_other<R: Rng>(n: usize, not: Option<usize>, rng: &mut R) -> usize {
    match not {
        Some(skip) if n > 1 => {
            let i = rng.gen_range(0..n - 1);
            if i >= skip {
                i + 1
            } else {
                i
            }
        }
        _ => rng.gen_range(0..n),
    }
}
