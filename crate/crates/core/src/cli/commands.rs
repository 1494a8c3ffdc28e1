use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::Serialize;

use super::config::{DataMode, RunConfig, SweepTarget};
use crate::autodiff::AdamConfig;
use crate::error::{Error, Result};
use crate::icil::{
    evaluate_tokenizer_suite, from_action_episodes, generate_expert_dataset, policy_tokenizer_config,
    read_dataset, run_parallel, spearman, to_action_episodes, write_dataset, Episode, PolicyConfig,
    PolicyTrainOptions, SuiteOptions, SuiteReport, Variant,
};
use crate::plot;
use crate::quantize::perplexity;
use crate::rng;
use crate::smoothness::{
    compare_tokenizers, latent_trajectories, least_energy_score, project_2d, write_latents_csv,
    SmoothnessReport, PROJECTION_STEPS,
};
use crate::synth::{minimum_jerk_episodes, ActionEpisode, MinJerkConfig};
use crate::tokenizer::{
    load_checkpoint, reconstruction_error, save_checkpoint, train_tokenizer, Tokenizer,
    TokenizerConfig, TokenizerKind, TrainOptions, TrainReport,
};

/// Writes `bytes` to a sibling temp file, then renames it into place.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_atomic(path, s.as_bytes())
}

/// Creates the output directory and records the resolved configuration.
fn prepare(cfg: &RunConfig) -> Result<PathBuf> {
    fs::create_dir_all(&cfg.out)?;
    write_atomic(&cfg.out.join("resolved.cfg"), cfg.to_text().as_bytes())?;
    Ok(cfg.out.clone())
}

fn dataset(cfg: &RunConfig) -> Result<Vec<Episode>> {
    let path = cfg
        .data_path
        .as_ref()
        .ok_or_else(|| Error::Config("`data.path` is required".into()))?;
    let eps = read_dataset(path)?;
    if eps.is_empty() {
        return Err(Error::Dataset(format!("{} holds no episodes", path.display())));
    }
    Ok(eps)
}

/// Stable fingerprint of a dataset's serialized records.
pub fn dataset_hash(episodes: &[Episode]) -> Result<String> {
    let mut h = crc32fast::Hasher::new();
    for e in episodes {
        h.update(serde_json::to_string(e)?.as_bytes());
        h.update(b"\n");
    }
    Ok(format!("{:08x}", h.finalize()))
}

pub fn tokenizer_config(cfg: &RunConfig) -> TokenizerConfig {
    let mut t = TokenizerConfig::new(cfg.tokenizer_kind, cfg.tokenizer_action_dim)
        .with_hidden(cfg.tokenizer_hidden.clone());
    t.latent_dim = cfg.tokenizer_latent_dim;
    t.codebook_size = cfg.tokenizer_codebook_size;
    t.alpha = cfg.tokenizer_alpha;
    t.beta = cfg.tokenizer_beta;
    t.gamma = cfg.tokenizer_gamma;
    if let Some(l) = cfg.tokenizer_lipschitz {
        t.lipschitz = l;
    }
    t
}

fn train_options(cfg: &RunConfig, seed: u64) -> TrainOptions {
    TrainOptions {
        steps: cfg.train_steps,
        batch_size: cfg.train_batch_size,
        adam: AdamConfig {
            lr: cfg.train_lr,
            warmup_steps: cfg.train_warmup,
            ..AdamConfig::default()
        },
        seed,
        ..TrainOptions::default()
    }
}

pub fn cmd_synth(cfg: &RunConfig) -> Result<PathBuf> {
    let out = prepare(cfg)?;
    let episodes = match cfg.data_mode {
        DataMode::Expert => generate_expert_dataset(&cfg.icil_tasks, cfg.data_episodes, cfg.seed)?,
        DataMode::MinJerk => {
            let mj = MinJerkConfig {
                episodes: cfg.data_episodes,
                horizon: cfg.data_horizon,
                segments: cfg.data_segments,
                ..MinJerkConfig::default()
            };
            from_action_episodes(&minimum_jerk_episodes(&mj, cfg.seed)?, "min-jerk")
        }
    };
    let path = out.join("dataset.jsonl");
    write_dataset(&path, &episodes)?;
    info!("wrote {} episodes to {}", episodes.len(), path.display());
    Ok(path)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TokenizerMetrics {
    pub kind: TokenizerKind,
    pub status: String,
    pub steps: u64,
    pub final_loss: Option<f64>,
    pub reconstruction_mse: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub perplexity: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lipschitz_bound: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Perplexity of the discrete codes assigned to `actions`, for kinds that
/// assign a single code per action.
pub fn code_perplexity(tok: &Tokenizer, actions: &[Vec<f64>]) -> Result<Option<f64>> {
    let size = match tok.kind() {
        TokenizerKind::VqVae | TokenizerKind::LipVqVae => tok.config().codebook_size,
        TokenizerKind::LfqVae => 1 << tok.config().latent_dim,
        _ => return Ok(None),
    };
    let mut counts = vec![0u64; size];
    for out in tok.tokenize_batch(&actions.concat())? {
        if let Some(i) = out.index {
            counts[i] += 1;
        }
    }
    perplexity(&counts).map(Some)
}

fn write_curve(path: &Path, report: &TrainReport) -> Result<()> {
    let mut s = String::from("step,total,reconstruction,codebook,commitment,lipschitz\n");
    for p in &report.curve {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            p.step, p.total, p.reconstruction, p.codebook, p.commitment, p.lipschitz
        ));
    }
    write_atomic(path, s.as_bytes())
}

fn all_actions(episodes: &[Episode]) -> Vec<Vec<f64>> {
    episodes.iter().flat_map(|e| e.act.iter().cloned()).collect()
}

pub fn cmd_train_tokenizer(cfg: &RunConfig) -> Result<TokenizerMetrics> {
    let out = prepare(cfg)?;
    let actions = all_actions(&dataset(cfg)?);
    let tcfg = tokenizer_config(cfg);
    let mut tok = Tokenizer::new(tcfg.clone(), &mut rng::stream(cfg.seed, "tokenizer-init"))?;
    match train_tokenizer(&mut tok, &actions, &train_options(cfg, cfg.seed)) {
        Ok(report) => {
            save_checkpoint(&tok, out.join("tokenizer.ltok"))?;
            write_curve(&out.join("loss_curve.csv"), &report)?;
            let metrics = TokenizerMetrics {
                kind: tcfg.kind,
                status: "ok".into(),
                steps: report.curve.len() as u64,
                final_loss: report.curve.last().map(|p| p.total),
                reconstruction_mse: Some(reconstruction_error(&tok, &actions)?),
                perplexity: code_perplexity(&tok, &actions)?,
                lipschitz_bound: tok.lipschitz_bound(),
                error: None,
            };
            write_json(&out.join("metrics.json"), &metrics)?;
            Ok(metrics)
        }
        Err(e) => {
            let metrics = TokenizerMetrics {
                kind: tcfg.kind,
                status: "diverged".into(),
                steps: 0,
                final_loss: None,
                reconstruction_mse: None,
                perplexity: None,
                lipschitz_bound: None,
                error: Some(e.to_string()),
            };
            write_json(&out.join("metrics.json"), &metrics)?;
            Err(e)
        }
    }
}

fn checkpoint_name(p: &Path) -> String {
    p.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| p.display().to_string())
}

/// Episodes long enough to have curvature.
fn scorable(episodes: &[Episode]) -> Vec<ActionEpisode> {
    to_action_episodes(episodes)
        .into_iter()
        .filter(|e| e.actions.len() >= 3)
        .collect()
}

pub fn cmd_smoothness(cfg: &RunConfig) -> Result<Vec<SmoothnessReport>> {
    if cfg.smoothness_checkpoints.is_empty() {
        return Err(Error::Config("`smoothness.checkpoints` lists no checkpoints".into()));
    }
    let out = prepare(cfg)?;
    let episodes = scorable(&dataset(cfg)?);
    let width = episodes[0].actions[0].len();
    let mut toks = Vec::new();
    for p in &cfg.smoothness_checkpoints {
        let tok = load_checkpoint(p)?;
        if tok.config().action_dim != width {
            return Err(Error::dim(
                "checkpoint vs dataset action width",
                &[tok.config().action_dim],
                &[width],
            ));
        }
        toks.push((checkpoint_name(p), tok));
    }
    let refs: Vec<(String, &Tokenizer)> = toks.iter().map(|(n, t)| (n.clone(), t)).collect();
    let reports = compare_tokenizers(&refs, &episodes, cfg.smoothness_trajectories)?;
    for r in &reports {
        for w in &r.warnings {
            warn!("{w}");
        }
    }
    write_json(&out.join("smoothness.json"), &reports)?;
    let mut table = String::from("tokenizer,score,trajectories\n");
    for r in &reports {
        table.push_str(&format!("{},{},{}\n", r.tokenizer, r.score, r.trajectory_count));
    }
    write_atomic(&out.join("smoothness.csv"), table.as_bytes())?;

    let used = &episodes[..cfg.smoothness_trajectories];
    let mut csv = Vec::new();
    let mut panels = Vec::new();
    for (name, tok) in &refs {
        let trajs = latent_trajectories(tok, name, used)?;
        write_latents_csv(&mut csv, &trajs)?;
        let short: Vec<_> = trajs.iter().take(20).map(|t| t.truncated(PROJECTION_STEPS)).collect();
        let proj = project_2d(&short)?;
        panels.push(plot::Panel {
            title: format!("{name} ({}, {:.0}% var)", proj.method, 100.0 * proj.explained_variance),
            lines: proj.trajectories.into_iter().map(|t| t.points).collect(),
        });
    }
    write_atomic(&out.join("latents.csv"), &csv)?;
    write_atomic(&out.join("projection.svg"), plot::polyline_panels(&panels).as_bytes())?;
    Ok(reports)
}

fn suite_options(cfg: &RunConfig, seeds: Vec<u64>, data: Option<Vec<Episode>>) -> SuiteOptions {
    SuiteOptions {
        tasks: cfg.icil_tasks.clone(),
        seeds,
        train_episodes_per_task: cfg.icil_train_episodes,
        eval_rollouts: cfg.icil_rollouts,
        policy: PolicyConfig {
            decode: cfg.icil_decode,
            ..PolicyConfig::default()
        },
        train: PolicyTrainOptions {
            steps: cfg.icil_steps,
            batch_size: cfg.icil_batch_size,
            adam: AdamConfig {
                lr: cfg.icil_lr,
                ..AdamConfig::default()
            },
            freeze_tokenizer: cfg.icil_freeze_tokenizer,
            ..PolicyTrainOptions::default()
        },
        workers: cfg.workers,
        dataset: data,
        ..SuiteOptions::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IcilSummary {
    pub report: SuiteReport,
    /// (label, mean smoothness, mean success) per variant.
    pub points: Vec<(String, f64, f64)>,
    pub spearman: Option<f64>,
}

fn success_table(report: &SuiteReport) -> String {
    let mut s = String::from("tokenizer,task,mean_success");
    for seed in &report.seeds {
        s.push_str(&format!(",seed{seed}"));
    }
    s.push('\n');
    for r in &report.rows {
        s.push_str(&format!("{},{},{}", r.label, r.task, r.mean_success));
        for v in &r.per_seed {
            match v {
                Some(v) => s.push_str(&format!(",{v}")),
                None => s.push_str(",diverged"),
            }
        }
        s.push('\n');
    }
    s
}

pub fn cmd_icil(cfg: &RunConfig) -> Result<IcilSummary> {
    if cfg.icil_kinds.is_empty() {
        return Err(Error::Config("`icil.kinds` is empty".into()));
    }
    let out = prepare(cfg)?;
    let data = cfg.data_path.as_ref().map(|_| dataset(cfg)).transpose()?;
    let variants: Vec<Variant> = cfg.icil_kinds.iter().map(|&k| Variant::of_kind(k)).collect();
    let report = evaluate_tokenizer_suite(&variants, &suite_options(cfg, cfg.icil_seeds.clone(), data))?;
    let points: Vec<(String, f64, f64)> = report
        .labels
        .iter()
        .map(|l| (l.clone(), report.mean_smoothness(l), report.mean_success(l)))
        .collect();
    let finite: Vec<_> = points
        .iter()
        .filter(|p| p.1.is_finite() && p.2.is_finite())
        .collect();
    let rho = if finite.len() >= 2 {
        let xs: Vec<f64> = finite.iter().map(|p| p.1).collect();
        let ys: Vec<f64> = finite.iter().map(|p| p.2).collect();
        Some(spearman(&xs, &ys)?)
    } else {
        None
    };
    write_atomic(&out.join("success_table.csv"), success_table(&report).as_bytes())?;
    let title = match rho {
        Some(r) => format!("smoothness vs success (spearman {r:.2})"),
        None => "smoothness vs success".into(),
    };
    let svg = plot::scatter(&title, "smoothness score (lower is smoother)", "mean success", &points);
    write_atomic(&out.join("correlation.svg"), svg.as_bytes())?;
    let summary = IcilSummary {
        report,
        points,
        spearman: rho,
    };
    write_json(&out.join("icil.json"), &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepCell {
    pub kind: TokenizerKind,
    pub codebook_size: usize,
    pub lipschitz: bool,
    pub seed: u64,
    pub dataset_hash: String,
    pub status: String,
    pub reconstruction_mse: Option<f64>,
    pub perplexity: Option<f64>,
    pub smoothness: Option<f64>,
    pub success: Option<f64>,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepReport {
    pub codebook_sizes: Vec<usize>,
    pub lipschitz: Vec<bool>,
    pub seeds: Vec<u64>,
    pub cells: Vec<SweepCell>,
}

impl SweepReport {
    pub fn cell(&self, k: usize, lip: bool, seed: u64) -> Option<&SweepCell> {
        self.cells
            .iter()
            .find(|c| c.codebook_size == k && c.lipschitz == lip && c.seed == seed)
    }
}

fn sweep_variant(cfg: &RunConfig, k: usize, lip: bool, base: TokenizerConfig) -> TokenizerConfig {
    let mut t = base;
    t.kind = cfg.sweep_kind;
    t.codebook_size = k;
    t.lipschitz = lip || cfg.sweep_kind == TokenizerKind::LipVqVae;
    t
}

fn on_off(b: bool) -> &'static str {
    if b {
        "on"
    } else {
        "off"
    }
}

pub fn cmd_sweep(cfg: &RunConfig) -> Result<SweepReport> {
    if cfg.sweep_codebook_sizes.is_empty() || cfg.sweep_lipschitz.is_empty() || cfg.sweep_seeds.is_empty() {
        return Err(Error::Config("every sweep axis needs at least one value".into()));
    }
    let out = prepare(cfg)?;
    let axes: Vec<(usize, bool, u64)> = cfg
        .sweep_codebook_sizes
        .iter()
        .flat_map(|&k| {
            cfg.sweep_lipschitz
                .iter()
                .flat_map(move |&l| cfg.sweep_seeds.iter().map(move |&s| (k, l, s)))
        })
        .collect();
    let cells = match cfg.sweep_target {
        SweepTarget::Tokenizer => sweep_tokenizers(cfg, &out, &axes)?,
        SweepTarget::Icil => sweep_icil(cfg, &axes)?,
    };
    let report = SweepReport {
        codebook_sizes: cfg.sweep_codebook_sizes.clone(),
        lipschitz: cfg.sweep_lipschitz.clone(),
        seeds: cfg.sweep_seeds.clone(),
        cells,
    };
    write_json(&out.join("sweep.json"), &report)?;
    let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
    let mut csv = String::from(
        "kind,codebook_size,lipschitz,seed,dataset_hash,status,reconstruction_mse,perplexity,smoothness,success\n",
    );
    for c in &report.cells {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            c.kind,
            c.codebook_size,
            on_off(c.lipschitz),
            c.seed,
            c.dataset_hash,
            c.status,
            opt(c.reconstruction_mse),
            opt(c.perplexity),
            opt(c.smoothness),
            opt(c.success)
        ));
    }
    write_atomic(&out.join("sweep.csv"), csv.as_bytes())?;

    let (metric, label): (fn(&SweepCell) -> Option<f64>, &str) = match cfg.sweep_target {
        SweepTarget::Tokenizer => (|c| c.smoothness, "mean smoothness score"),
        SweepTarget::Icil => (|c| c.success, "mean success"),
    };
    let series: Vec<(String, Vec<f64>)> = cfg
        .sweep_lipschitz
        .iter()
        .map(|&l| {
            let vals = cfg
                .sweep_codebook_sizes
                .iter()
                .map(|&k| {
                    let v: Vec<f64> = report
                        .cells
                        .iter()
                        .filter(|c| c.codebook_size == k && c.lipschitz == l)
                        .filter_map(metric)
                        .collect();
                    if v.is_empty() {
                        f64::NAN
                    } else {
                        v.iter().sum::<f64>() / v.len() as f64
                    }
                })
                .collect();
            (format!("lipschitz {}", on_off(l)), vals)
        })
        .collect();
    let cats: Vec<String> = cfg.sweep_codebook_sizes.iter().map(|k| k.to_string()).collect();
    let svg = plot::bar_chart(&format!("{} codebook sweep", cfg.sweep_kind), label, &cats, &series);
    write_atomic(&out.join("sweep.svg"), svg.as_bytes())?;
    Ok(report)
}

fn sweep_data(cfg: &RunConfig) -> Result<Vec<Episode>> {
    if cfg.data_path.is_some() {
        return dataset(cfg);
    }
    let mj = MinJerkConfig {
        episodes: cfg.data_episodes,
        horizon: cfg.data_horizon,
        segments: cfg.data_segments,
        ..MinJerkConfig::default()
    };
    Ok(from_action_episodes(&minimum_jerk_episodes(&mj, cfg.seed)?, "min-jerk"))
}

fn sweep_tokenizers(cfg: &RunConfig, out: &Path, axes: &[(usize, bool, u64)]) -> Result<Vec<SweepCell>> {
    let data = sweep_data(cfg)?;
    let hash = dataset_hash(&data)?;
    let actions = all_actions(&data);
    let episodes = scorable(&data);
    let n_traj = cfg.smoothness_trajectories.min(episodes.len());
    let cells_dir = out.join("cells");
    fs::create_dir_all(&cells_dir)?;
    let mut base = tokenizer_config(cfg);
    base.action_dim = actions[0].len();
    run_parallel(axes, cfg.workers, |&(k, lip, seed)| {
        let tcfg = sweep_variant(cfg, k, lip, base.clone());
        let mut cell = SweepCell {
            kind: tcfg.kind,
            codebook_size: k,
            lipschitz: lip,
            seed,
            dataset_hash: hash.clone(),
            status: "ok".into(),
            reconstruction_mse: None,
            perplexity: None,
            smoothness: None,
            success: None,
            checkpoint: None,
        };
        let run = || -> Result<(Tokenizer, f64, Option<f64>, f64)> {
            let mut tok = Tokenizer::new(tcfg.clone(), &mut rng::stream(seed, "tokenizer-init"))?;
            train_tokenizer(&mut tok, &actions, &train_options(cfg, seed))?;
            let rec = reconstruction_error(&tok, &actions)?;
            let ppl = code_perplexity(&tok, &actions)?;
            let name = format!("k{k}_lip{}_s{seed}", on_off(lip));
            let score = compare_tokenizers(&[(name, &tok)], &episodes, n_traj)?[0].score;
            Ok((tok, rec, ppl, score))
        };
        match run() {
            Ok((tok, rec, ppl, score)) => {
                let path = cells_dir.join(format!("k{k}_lip{}_s{seed}.ltok", on_off(lip)));
                save_checkpoint(&tok, &path)?;
                cell.reconstruction_mse = Some(rec);
                cell.perplexity = ppl;
                cell.smoothness = Some(score);
                cell.checkpoint = Some(path);
            }
            Err(e) => {
                warn!("sweep cell k={k} lipschitz={lip} seed={seed} failed: {e}");
                cell.status = format!("failed: {e}");
            }
        }
        Ok(cell)
    })
}

fn sweep_icil(cfg: &RunConfig, axes: &[(usize, bool, u64)]) -> Result<Vec<SweepCell>> {
    let data = cfg.data_path.as_ref().map(|_| dataset(cfg)).transpose()?;
    let mut variants = Vec::new();
    for &k in &cfg.sweep_codebook_sizes {
        for &lip in &cfg.sweep_lipschitz {
            variants.push(Variant {
                label: format!("k{k}_lip{}", on_off(lip)),
                tokenizer: sweep_variant(cfg, k, lip, policy_tokenizer_config(cfg.sweep_kind)),
            });
        }
    }
    let report = evaluate_tokenizer_suite(&variants, &suite_options(cfg, cfg.sweep_seeds.clone(), data.clone()))?;
    let hash_for = |seed: u64| -> Result<String> {
        match &data {
            Some(d) => dataset_hash(d),
            None => dataset_hash(&generate_expert_dataset(&cfg.icil_tasks, cfg.icil_train_episodes, seed)?),
        }
    };
    axes.iter()
        .map(|&(k, lip, seed)| {
            let c = report
                .cell(&format!("k{k}_lip{}", on_off(lip)), seed)
                .expect("suite covers every cell");
            let ok = c.diverged.is_none();
            let mean = c.success.values().sum::<f64>() / c.success.len().max(1) as f64;
            Ok(SweepCell {
                kind: cfg.sweep_kind,
                codebook_size: k,
                lipschitz: lip,
                seed,
                dataset_hash: hash_for(seed)?,
                status: c.diverged.clone().map_or("ok".into(), |e| format!("diverged: {e}")),
                reconstruction_mse: None,
                perplexity: None,
                smoothness: ok.then_some(c.smoothness),
                success: ok.then_some(mean),
                checkpoint: None,
            })
        })
        .collect()
}

/// Mean least-energy score of `episodes` themselves, before tokenization.
pub fn raw_smoothness(episodes: &[ActionEpisode]) -> Result<f64> {
    let dim = episodes
        .first()
        .and_then(|e| e.actions.first())
        .map(Vec::len)
        .ok_or_else(|| Error::Dataset("no actions".into()))?;
    let mut total = 0.0;
    for e in episodes {
        let t = crate::smoothness::LatentTrajectory::new(e.actions.concat(), dim, "raw", e.id)?;
        total += least_energy_score(&t)?;
    }
    Ok(total / episodes.len() as f64)
}
