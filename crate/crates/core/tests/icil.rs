mod common;

use common::rng;
use liptok::icil::{
    build_sequence, ema, expert_episode, generate_expert_dataset, prompt_pool, prompted_sequence,
    read_dataset, rollout_in_context, run_parallel, sample_state, scripted_expert, spearman,
    success_rate, train_policy, write_dataset, CausalPolicy, Episode, PolicyConfig,
    PolicyTrainOptions, TaskFamily, TokenType, ToyEnvState,
};
use liptok::icil::policy_tokenizer_config;
use liptok::tokenizer::{Tokenizer, TokenizerKind};

fn policy(kind: TokenizerKind, seed: u64) -> CausalPolicy {
    let tok = Tokenizer::new(policy_tokenizer_config(kind), &mut rng(seed)).unwrap();
    CausalPolicy::new(PolicyConfig::default(), tok, &mut rng(seed + 100)).unwrap()
}

fn short_run(steps: u64) -> PolicyTrainOptions {
    let mut o = PolicyTrainOptions { steps, batch_size: 8, ..PolicyTrainOptions::default() };
    o.adam.lr = 1e-3;
    o.adam.warmup_steps = 10;
    o
}

#[test]
fn expert_always_succeeds() {
    let mut r = rng(0);
    for i in 0..1000 {
        let task = TaskFamily::ALL[i % 3];
        let ep = expert_episode(sample_state(task, &mut r)).unwrap();
        assert!(ep.success, "{task} episode {i}");
        ep.validate().unwrap();
    }
}

#[test]
fn expert_reaches_in_straight_line() {
    let s = ToyEnvState::new(TaskFamily::Reach, [-0.5, 0.0], [0.0, 0.8], [0.5, 0.0]).unwrap();
    let ep = expert_episode(s).unwrap();
    for a in &ep.act[..9] {
        assert!((a[0] - 0.1).abs() < 1e-12 && a[1].abs() < 1e-12);
    }
    let at_goal = ToyEnvState::new(TaskFamily::Reach, [0.5, 0.0], [0.0, 0.8], [0.5, 0.0]).unwrap();
    let a = scripted_expert(&at_goal);
    assert_eq!(&a[..2], &[0.0, 0.0]);
}

#[test]
fn sequence_layout() {
    let mut r = rng(1);
    let mut ep = expert_episode(sample_state(TaskFamily::Reach, &mut r)).unwrap();
    let prompt = Episode { obs: ep.obs[..2].to_vec(), act: ep.act[..2].to_vec(), ..ep.clone() };
    let query = Episode { obs: ep.obs[..1].to_vec(), act: ep.act[..1].to_vec(), ..ep.clone() };
    let seq = build_sequence(&prompt, &query).unwrap();
    assert_eq!(seq.len(), 5);
    assert_eq!(seq.loss_mask(), [false, false, false, false, true]);
    let types = seq.token_types();
    assert_eq!(types[0], TokenType::Observation);
    assert_eq!(types[1], TokenType::Action);
    assert_eq!(types[2], TokenType::Observation);
    assert_eq!(types[3], TokenType::Action);

    let empty = Episode { obs: vec![], act: vec![], ..ep.clone() };
    assert!(build_sequence(&empty, &query).is_err());
    let other = expert_episode(sample_state(TaskFamily::Push, &mut r)).unwrap();
    assert!(build_sequence(&other, &query).is_err());
    ep.success = false;
    assert!(build_sequence(&ep, &query).is_err());
}

#[test]
fn causality_probe() {
    let p = policy(TokenizerKind::LipVqVae, 0);
    let mut r = rng(2);
    let prompt = expert_episode(sample_state(TaskFamily::PickPlace, &mut r)).unwrap();
    let query = expert_episode(sample_state(TaskFamily::PickPlace, &mut r)).unwrap();
    let base = p.predict(&prompted_sequence(&prompt, query.obs.clone()).unwrap()).unwrap();
    for t in 0..query.len() {
        let mut obs = query.obs.clone();
        obs[t][0] += 0.3;
        let out = p.predict(&prompted_sequence(&prompt, obs).unwrap()).unwrap();
        assert_eq!(&out[..t], &base[..t], "perturbing step {t} leaked backwards");
        assert_ne!(out[t], base[t]);
    }
}

#[test]
fn prompt_changes_predictions() {
    let p = policy(TokenizerKind::VqVae, 1);
    let mut r = rng(3);
    let reach = expert_episode(sample_state(TaskFamily::Reach, &mut r)).unwrap();
    let push = expert_episode(sample_state(TaskFamily::Push, &mut r)).unwrap();
    let q = expert_episode(sample_state(TaskFamily::Reach, &mut r)).unwrap().obs;
    let a = p.predict(&prompted_sequence(&reach, q.clone()).unwrap()).unwrap();
    let b = p.predict(&prompted_sequence(&push, q).unwrap()).unwrap();
    assert_ne!(a, b);
}

#[test]
fn untrained_policy_rarely_reaches() {
    let p = policy(TokenizerKind::Mlp, 0);
    let prompts = prompt_pool(TaskFamily::Reach, 5, 0).unwrap();
    assert!(success_rate(&p, TaskFamily::Reach, &prompts, 30, 0).unwrap() < 0.1);
}

#[test]
fn object_already_at_goal_is_solved_by_any_policy() {
    let prompt = prompt_pool(TaskFamily::Push, 1, 0).unwrap().remove(0);
    for kind in TokenizerKind::ALL {
        let p = policy(kind, 0);
        let s = ToyEnvState::new(TaskFamily::Push, [-0.5, -0.5], [0.3, 0.3], [0.3, 0.3]).unwrap();
        let r = rollout_in_context(&p, s, &prompt, 50).unwrap();
        assert!(r.success, "{kind}");
    }
}

#[test]
fn training_is_deterministic_and_learns() {
    let data = generate_expert_dataset(&TaskFamily::ALL, 10, 0).unwrap();
    let run = || {
        let mut p = policy(TokenizerKind::LipVqVae, 4);
        let rep = train_policy(&mut p, &data, &short_run(150)).unwrap();
        let prompt = prompt_pool(TaskFamily::Reach, 1, 0).unwrap().remove(0);
        let s = sample_state(TaskFamily::Reach, &mut rng(9));
        (rep, rollout_in_context(&p, s, &prompt, 10).unwrap())
    };
    let (a, ra) = run();
    let (b, rb) = run();
    assert_eq!(a, b);
    assert_eq!(ra, rb);
    let smooth = ema(&a.bc_loss, 0.9);
    assert!(smooth.last().unwrap() < &(0.5 * smooth[10]), "{} vs {}", smooth.last().unwrap(), smooth[10]);
}

#[test]
fn frozen_tokenizer_is_left_untouched() {
    let data = generate_expert_dataset(&TaskFamily::ALL, 5, 1).unwrap();
    let mut p = policy(TokenizerKind::VqVae, 5);
    let before = p.tokenizer().clone();
    let opts = PolicyTrainOptions { freeze_tokenizer: true, fit_normalizer: false, ..short_run(20) };
    train_policy(&mut p, &data, &opts).unwrap();
    use liptok::nn::Module;
    let params = |t: &Tokenizer| t.named_params().into_iter().map(|(_, t)| t.data().to_vec()).collect::<Vec<_>>();
    assert_eq!(params(p.tokenizer()), params(&before));
}

#[test]
fn single_episode_dataset_is_rejected() {
    let data = generate_expert_dataset(&[TaskFamily::Reach], 1, 0).unwrap();
    let mut p = policy(TokenizerKind::Mlp, 0);
    assert!(train_policy(&mut p, &data, &short_run(5)).is_err());
}

#[test]
fn dataset_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    let data = generate_expert_dataset(&TaskFamily::ALL, 4, 3).unwrap();
    write_dataset(&path, &data).unwrap();
    assert_eq!(read_dataset(&path).unwrap(), data);
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), 12);
    assert!(text.lines().next().unwrap().contains("\"task_id\""));
}

#[test]
fn parallel_map_keeps_order() {
    let jobs: Vec<u64> = (0..17).collect();
    let out = run_parallel(&jobs, 4, |&j| Ok(j * j)).unwrap();
    assert_eq!(out, jobs.iter().map(|j| j * j).collect::<Vec<_>>());
}

#[test]
fn spearman_cases() {
    assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap() - 1.0).abs() < 1e-12);
    assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
    // Ties get average ranks: x ranks [1.5, 1.5, 3], y ranks [1, 2, 3].
    let r = spearman(&[1.0, 1.0, 2.0], &[1.0, 2.0, 3.0]).unwrap();
    assert!((r - 0.866_025_403_784_438_6).abs() < 1e-12);
}
