use std::collections::{BTreeMap, HashMap, HashSet};
use std::sync::Arc;

use flowgen_core::eval::{tempered_target, total_variation, verify_against, PolicyTable};
use flowgen_core::fraggraph::*;
use flowgen_core::gfn::*;
use flowgen_core::policy::{condition, PolicyConfig};
use flowgen_core::reward::ScoreTriple;
use flowgen_core::{synth, Error, Result};
use flowgen_nn::Graph;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const TINY: PolicyConfig = PolicyConfig { hidden: 16, layers: 1, heads: 2 };
const SMALL: PolicyConfig = PolicyConfig { hidden: 32, layers: 2, heads: 4 };

/// Reward looked up by (pocket id, canonical key), 1e-6 when absent.
struct TableReward {
    table: HashMap<(String, String), f64>,
    calls: usize,
    fail_after: Option<usize>,
}

impl TableReward {
    fn new(entries: &[(&str, String, f64)]) -> Self {
        TableReward {
            table: entries.iter().map(|(p, k, r)| ((p.to_string(), k.clone()), *r)).collect(),
            calls: 0,
            fail_after: None,
        }
    }
}

impl RewardSource for TableReward {
    fn rewards(&mut self, _env: &FragEnv, pocket: &PocketContext, mols: &[MolGraphState]) -> Result<Vec<(ScoreTriple, f64)>> {
        self.calls += 1;
        if self.fail_after.is_some_and(|n| self.calls > n) {
            return Err(Error::Config("scorer went away".into()));
        }
        Ok(mols
            .iter()
            .map(|m| {
                let r = self.table.get(&(pocket.pocket.id.clone(), m.canonical_key())).copied().unwrap_or(1e-6);
                (ScoreTriple { ds: -r, qed: 0.5, sa_raw: 3.0 }, r)
            })
            .collect())
    }
}

fn singleton_env(n: usize) -> FragEnv {
    FragEnv::new(Arc::new(synth::singleton_vocabulary(n).unwrap()), 1)
}

fn single_node(env: &FragEnv, f: usize) -> MolGraphState {
    let s = env.apply(&MolGraphState::new(), &GraphAction::AddFragment { source: None, fragment: f }).unwrap();
    env.apply(&s, &GraphAction::Stop).unwrap()
}

fn config(policy: PolicyConfig, seed: u64, beta: (f64, f64), max_nodes: usize) -> TrainerConfig {
    TrainerConfig {
        steps: 0,
        lr: 1e-3,
        z_lr: 0.05,
        beta_min: beta.0,
        beta_max: beta.1,
        max_nodes,
        seed,
        policy,
        ..TrainerConfig::default()
    }
}

fn pockets(model: &DoubleGfn, ids: &[(&str, [usize; 5])]) -> Vec<PocketContext> {
    let ps: Vec<_> = ids.iter().enumerate().map(|(i, (id, c))| synth::synthetic_pocket(id, 100 + i as u64, 24, *c)).collect();
    model.pocket_contexts(&ps).unwrap()
}

fn run(model: &mut DoubleGfn, env: &FragEnv, ctx: &[PocketContext], rewards: &mut dyn RewardSource, steps: usize) -> Vec<StepStats> {
    let pool = thread_pool(1).unwrap();
    (0..steps).map(|_| model.train_step(env, ctx, rewards, &pool).unwrap()).collect()
}

fn sample_tv(model: &DoubleGfn, env: &FragEnv, ctx: &PocketContext, rewards: &BTreeMap<String, f64>, beta: f64, n: usize) -> f64 {
    let pool = thread_pool(1).unwrap();
    let cond = condition(&ctx.embedding, beta).unwrap();
    let table = PolicyTable::build(&model.net, &model.target, env, &cond, 100_000, &pool).unwrap();
    verify_against(&table, env, rewards, beta, n, 7, &pool).unwrap().tv
}

#[test]
fn forced_path_is_add_then_stop() {
    let env = singleton_env(1);
    let model = DoubleGfn::new(config(TINY, 0, (1.0, 1.0), 1), &env.vocab).unwrap();
    let ctx = pockets(&model, &[("a", [1, 0, 0, 0, 0])]);
    let cond = condition(&ctx[0].embedding, 1.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let t = sample_trajectory(&model.net, &model.target, &env, &cond, &mut rng, 0.01).unwrap();
    assert_eq!(t.trajectory.actions, vec![GraphAction::AddFragment { source: None, fragment: 0 }, GraphAction::Stop]);
    assert!(t.trajectory.log_probs.iter().all(|&lp| lp == 0.0));
}

#[test]
fn rollouts_cover_both_terminals_and_are_reproducible() {
    let env = singleton_env(2);
    let model = DoubleGfn::new(config(TINY, 1, (1.0, 1.0), 1), &env.vocab).unwrap();
    let ctx = pockets(&model, &[("a", [1, 0, 0, 0, 0])]);
    let cond = condition(&ctx[0].embedding, 1.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut seen = HashSet::new();
    for _ in 0..10_000 {
        let t = sample_trajectory(&model.net, &model.target, &env, &cond, &mut rng, 0.01).unwrap();
        seen.insert(t.trajectory.terminal().canonical_key());
    }
    assert_eq!(seen.len(), 2);

    let env = FragEnv::new(Arc::new(synth::toy_vocabulary().unwrap()), 3);
    let model = DoubleGfn::new(config(TINY, 1, (1.0, 1.0), 3), &env.vocab).unwrap();
    let draw = |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        sample_trajectory(&model.net, &model.target, &env, &cond, &mut rng, 0.01).unwrap().trajectory
    };
    assert_eq!(draw(5), draw(5));
}

#[test]
fn recorded_log_probs_match_the_tape() {
    let env = FragEnv::new(Arc::new(synth::toy_vocabulary().unwrap()), 3);
    let model = DoubleGfn::new(config(TINY, 3, (0.0, 64.0), 3), &env.vocab).unwrap();
    let ctx = pockets(&model, &[("a", [1, 1, 1, 1, 1])]);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for k in 0..20 {
        let cond = condition(&ctx[0].embedding, k as f64 * 3.0).unwrap();
        let t = sample_trajectory(&model.net, &model.online, &env, &cond, &mut rng, 0.0).unwrap();
        let sum_pf: f64 = t.trajectory.log_probs.iter().sum();
        let log_z = model.net.log_z(&model.online, &cond).unwrap();
        let log_pb = uniform_backward_logprob(&env, &t.trajectory).unwrap();
        let expected = tb_loss_value(log_z, sum_pf, 0.7, log_pb);
        let mut g = Graph::new(&model.online);
        let loss = tb_loss(&mut g, &model.net, &t, &cond, 0.7, log_pb).unwrap();
        let got = f64::from(g.value(loss).item());
        assert!((got - expected).abs() <= 1e-4 * expected.max(1.0), "{got} vs {expected}");
    }
}

#[test]
fn tb_loss_rejects_non_finite_rewards() {
    let env = singleton_env(1);
    let model = DoubleGfn::new(config(TINY, 0, (1.0, 1.0), 1), &env.vocab).unwrap();
    let ctx = pockets(&model, &[("a", [1, 0, 0, 0, 0])]);
    let cond = condition(&ctx[0].embedding, 1.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let t = sample_trajectory(&model.net, &model.online, &env, &cond, &mut rng, 0.0).unwrap();
    let mut g = Graph::new(&model.online);
    assert!(tb_loss(&mut g, &model.net, &t, &cond, f64::NEG_INFINITY, 0.0).is_err());
}

/// Distinct parent classes found by searching every state one action earlier.
fn brute_force_parent_count(env: &FragEnv, all: &[MolGraphState], s: &MolGraphState) -> usize {
    let key = s.canonical_key();
    let mut parents = HashSet::new();
    for p in all {
        for a in env.valid_actions(p).unwrap_or_default() {
            if env.apply(p, &a).unwrap().canonical_key() == key {
                parents.insert(p.canonical_key());
            }
        }
    }
    parents.len()
}

fn all_states(env: &FragEnv) -> Vec<MolGraphState> {
    let mut seen = HashMap::new();
    let mut frontier = vec![MolGraphState::new()];
    seen.insert(MolGraphState::new().canonical_key(), MolGraphState::new());
    while let Some(s) = frontier.pop() {
        if s.is_terminal() {
            continue;
        }
        for a in env.valid_actions(&s).unwrap() {
            let c = env.apply(&s, &a).unwrap();
            if !seen.contains_key(&c.canonical_key()) {
                seen.insert(c.canonical_key(), c.clone());
                frontier.push(c);
            }
        }
    }
    seen.into_values().collect()
}

#[test]
fn backward_log_prob_examples() {
    let env = singleton_env(2);
    let s1 = env.apply(&MolGraphState::new(), &GraphAction::AddFragment { source: None, fragment: 1 }).unwrap();
    let traj = Trajectory {
        states: vec![MolGraphState::new(), s1.clone(), single_node(&env, 1)],
        actions: vec![GraphAction::AddFragment { source: None, fragment: 1 }, GraphAction::Stop],
        log_probs: vec![0.0, 0.0],
    };
    assert_eq!(uniform_backward_logprob(&env, &traj).unwrap(), 0.0);

    // O then O-C2 with both attachments unset: the two-node state can lose either leaf
    let env = FragEnv::new(Arc::new(synth::toy_vocabulary().unwrap()), 2);
    let o = (0..env.vocab.len()).find(|&i| env.vocab.get(i).atoms.len() == 1).unwrap();
    let c2 = (0..env.vocab.len()).find(|&i| env.vocab.get(i).atoms.len() == 2).unwrap();
    let a0 = GraphAction::AddFragment { source: None, fragment: o };
    let a1 = GraphAction::AddFragment { source: Some(0), fragment: c2 };
    let s1 = env.apply(&MolGraphState::new(), &a0).unwrap();
    let s2 = env.apply(&s1, &a1).unwrap();
    let traj = Trajectory { states: vec![MolGraphState::new(), s1, s2], actions: vec![a0, a1], log_probs: vec![0.0, 0.0] };
    assert!((uniform_backward_logprob(&env, &traj).unwrap() - 0.5f64.ln()).abs() < 1e-15);
}

#[test]
fn backward_log_prob_matches_brute_force_parent_search() {
    let env = FragEnv::new(Arc::new(synth::toy_vocabulary().unwrap()), 3);
    let all = all_states(&env);
    let model = DoubleGfn::new(config(TINY, 4, (1.0, 1.0), 3), &env.vocab).unwrap();
    let ctx = pockets(&model, &[("a", [1, 1, 1, 1, 1])]);
    let cond = condition(&ctx[0].embedding, 1.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..25 {
        let t = sample_trajectory(&model.net, &model.target, &env, &cond, &mut rng, 0.5).unwrap().trajectory;
        let oracle: f64 = t.states[1..].iter().map(|s| -(brute_force_parent_count(&env, &all, s) as f64).ln()).sum();
        assert!((uniform_backward_logprob(&env, &t).unwrap() - oracle).abs() < 1e-12);
    }
}

#[test]
fn polyak_update_shrinks_the_gap_by_tau() {
    let env = singleton_env(2);
    let mut model = DoubleGfn::new(config(TINY, 5, (1.0, 1.0), 1), &env.vocab).unwrap();
    for (_, t) in model.online.iter_mut() {
        for x in t.data_mut() {
            *x += 0.5;
        }
    }
    let mut gap = model.target.max_abs_diff(&model.online).unwrap() as f64;
    for _ in 0..50 {
        model.update_target().unwrap();
        let next = model.target.max_abs_diff(&model.online).unwrap() as f64;
        assert!((next - 0.99 * gap).abs() <= 1e-6 * gap.max(1e-3), "{next} vs {}", 0.99 * gap);
        gap = next;
    }

    let mut cfg = config(TINY, 5, (1.0, 1.0), 1);
    cfg.copy_every_n = Some(3);
    let mut model = DoubleGfn::new(cfg, &env.vocab).unwrap();
    for (_, t) in model.online.iter_mut() {
        for x in t.data_mut() {
            *x += 0.5;
        }
    }
    let before = model.target.clone();
    for step in 1..=3 {
        model.step = step;
        model.update_target().unwrap();
        if step < 3 {
            assert_eq!(model.target.max_abs_diff(&before).unwrap(), 0.0);
        }
    }
    assert_eq!(model.target.max_abs_diff(&model.online).unwrap(), 0.0);
}

#[test]
fn batch_size_sets_trajectories_per_step_and_losses_stay_finite() {
    let env = FragEnv::new(Arc::new(synth::toy_vocabulary().unwrap()), 3);
    let mut model = DoubleGfn::new(config(TINY, 6, (0.0, 64.0), 3), &env.vocab).unwrap();
    let ctx = pockets(&model, &[("a", [2, 1, 2, 2, 2]), ("b", [1, 2, 1, 2, 1])]);
    let mut rewards = ComposedReward { scorer: flowgen_core::reward::Scorer::Synthetic, spec: Default::default() };
    let pool = thread_pool(1).unwrap();
    for _ in 0..200 {
        let s = model.train_step(&env, &ctx, &mut rewards, &pool).unwrap();
        assert_eq!(s.samples.len(), 8);
        assert!(s.loss.is_finite() && s.mean_log_z.is_finite());
    }
    assert_eq!(model.step, 200);
}

#[test]
fn single_terminal_log_z_converges_to_tempered_log_reward() {
    let env = singleton_env(1);
    let beta = 2.0;
    let mut model = DoubleGfn::new(config(TINY, 7, (beta, beta), 1), &env.vocab).unwrap();
    let ctx = pockets(&model, &[("a", [1, 0, 0, 0, 0])]);
    let mut rewards = TableReward::new(&[("a", single_node(&env, 0).canonical_key(), 3.0)]);
    let stats = run(&mut model, &env, &ctx, &mut rewards, 200);
    let cond = condition(&ctx[0].embedding, beta).unwrap();
    let log_z = model.net.log_z(&model.online, &cond).unwrap();
    assert!((log_z - beta * 3f64.ln()).abs() <= 1e-2, "log Z {log_z} vs {}", beta * 3f64.ln());
    assert!(stats.last().unwrap().loss < 1e-4);
}

#[test]
fn two_terminal_frequencies_match_rewards() {
    let env = singleton_env(2);
    let mut model = DoubleGfn::new(config(TINY, 8, (1.0, 1.0), 1), &env.vocab).unwrap();
    let ctx = pockets(&model, &[("a", [1, 0, 0, 0, 0])]);
    let (k0, k1) = (single_node(&env, 0).canonical_key(), single_node(&env, 1).canonical_key());
    let mut rewards = TableReward::new(&[("a", k0.clone(), 1.0), ("a", k1.clone(), 3.0)]);
    let target: BTreeMap<String, f64> = [(k0, 1.0), (k1, 3.0)].into_iter().collect();
    let before = sample_tv(&model, &env, &ctx[0], &target, 1.0, 10_000);
    run(&mut model, &env, &ctx, &mut rewards, 400);
    let after = sample_tv(&model, &env, &ctx[0], &target, 1.0, 10_000);
    assert!(after <= 0.05, "TV {after}");
    assert!(after < before || before <= 0.05);
}

#[test]
fn one_model_learns_swapped_rewards_for_two_pockets() {
    let env = singleton_env(3);
    let mut model = DoubleGfn::new(config(TINY, 9, (1.0, 1.0), 1), &env.vocab).unwrap();
    let ctx = pockets(&model, &[("a", [3, 0, 3, 0, 3]), ("b", [0, 3, 0, 3, 0])]);
    let keys: Vec<String> = (0..3).map(|f| single_node(&env, f).canonical_key()).collect();
    let ra = [4.0, 1.0, 0.5];
    let rb = [0.5, 1.0, 4.0];
    let mut entries = Vec::new();
    for f in 0..3 {
        entries.push(("a", keys[f].clone(), ra[f]));
        entries.push(("b", keys[f].clone(), rb[f]));
    }
    let mut rewards = TableReward::new(&entries);
    run(&mut model, &env, &ctx, &mut rewards, 600);
    let ta: BTreeMap<String, f64> = keys.iter().cloned().zip(ra).collect();
    let tb: BTreeMap<String, f64> = keys.iter().cloned().zip(rb).collect();
    let tv_a = sample_tv(&model, &env, &ctx[0], &ta, 1.0, 10_000);
    let tv_b = sample_tv(&model, &env, &ctx[1], &tb, 1.0, 10_000);
    assert!(tv_a <= 0.1 && tv_b <= 0.1, "{tv_a} {tv_b}");
}

#[test]
fn high_temperature_mode_beats_low_temperature_mean() {
    let env = FragEnv::new(Arc::new(synth::toy_vocabulary().unwrap()), 3);
    for seed in 0..3 {
        let mut model = DoubleGfn::new(config(SMALL, 20 + seed, (1.0, 16.0), 3), &env.vocab).unwrap();
        let ctx = pockets(&model, &[("a", [2, 1, 2, 2, 2])]);
        let mut rewards = ComposedReward { scorer: flowgen_core::reward::Scorer::Synthetic, spec: Default::default() };
        run(&mut model, &env, &ctx, &mut rewards, 1500);
        let pool = thread_pool(1).unwrap();
        let draw = |beta: f64| {
            let cond = condition(&ctx[0].embedding, beta).unwrap();
            sample_molecules(&model.net, &model.target, &env, &cond, 2000, seed, 0.0, &pool).unwrap()
        };
        let score = |mols: &[MolGraphState], rewards: &mut ComposedReward| -> Vec<(String, f64)> {
            let r = rewards.rewards(&env, &ctx[0], mols).unwrap();
            mols.iter().map(|m| m.canonical_key()).zip(r.into_iter().map(|x| x.1)).collect()
        };
        let low = score(&draw(1.0), &mut rewards);
        let high = score(&draw(16.0), &mut rewards);
        let mean_low = low.iter().map(|x| x.1).sum::<f64>() / low.len() as f64;
        let mut counts: HashMap<&str, (usize, f64)> = HashMap::new();
        for (k, r) in &high {
            counts.entry(k).or_insert((0, *r)).0 += 1;
        }
        let mode = counts.values().max_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1))).unwrap();
        assert!(mode.1 >= mean_low, "seed {seed}: mode reward {} < mean {mean_low}", mode.1);
    }
}

#[test]
fn training_reduces_distance_to_target() {
    let env = FragEnv::new(Arc::new(synth::toy_vocabulary().unwrap()), 3);
    let mut model = DoubleGfn::new(config(SMALL, 10, (1.0, 1.0), 3), &env.vocab).unwrap();
    let ctx = pockets(&model, &[("a", [2, 1, 2, 2, 2])]);
    let mut rewards = ComposedReward { scorer: flowgen_core::reward::Scorer::Synthetic, spec: Default::default() };
    let target = flowgen_core::eval::terminal_rewards(&env, &ctx[0], &mut rewards, 100_000).unwrap();
    let before = sample_tv(&model, &env, &ctx[0], &target, 1.0, 20_000);
    run(&mut model, &env, &ctx, &mut rewards, 500);
    let after = sample_tv(&model, &env, &ctx[0], &target, 1.0, 20_000);
    assert!(after < before, "{after} vs {before}");
}

fn loss_columns(path: &std::path::Path) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    assert_eq!(r.headers().unwrap().iter().collect::<Vec<_>>(), LOG_HEADER.to_vec());
    r.records().map(|rec| rec.unwrap().iter().take(4).map(str::to_string).collect()).collect()
}

#[test]
fn resumed_runs_reproduce_uninterrupted_losses() {
    let env = FragEnv::new(Arc::new(synth::toy_vocabulary().unwrap()), 3);
    let dir = tempfile::tempdir().unwrap();
    let pool = thread_pool(2).unwrap();
    let mut cfg = config(TINY, 11, (0.0, 64.0), 3);
    cfg.steps = 20;
    cfg.checkpoint_every = 10;
    let go = |model: &mut DoubleGfn, log: &std::path::Path, ckpt: &std::path::Path, header: bool| {
        let ctx = pockets(model, &[("a", [2, 1, 2, 2, 2]), ("b", [1, 2, 1, 2, 1])]);
        let mut rewards = ComposedReward { scorer: flowgen_core::reward::Scorer::Synthetic, spec: Default::default() };
        let file = std::fs::OpenOptions::new().create(true).append(true).open(log).unwrap();
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
        if header {
            w.write_record(LOG_HEADER).unwrap();
        }
        train(model, &env, &ctx, &mut rewards, &pool, Some(&mut w), Some(ckpt)).unwrap();
    };

    let mut full = DoubleGfn::new(cfg.clone(), &env.vocab).unwrap();
    go(&mut full, &dir.path().join("full.csv"), &dir.path().join("full"), true);

    let mut cut = cfg.clone();
    cut.steps = 10;
    let mut first = DoubleGfn::new(cut, &env.vocab).unwrap();
    go(&mut first, &dir.path().join("resumed.csv"), &dir.path().join("part"), true);
    let (mut resumed, vocab) = DoubleGfn::load(&dir.path().join("part")).unwrap();
    assert_eq!(vocab, *env.vocab);
    assert_eq!(resumed.step, 10);
    resumed.config.steps = 20;
    go(&mut resumed, &dir.path().join("resumed.csv"), &dir.path().join("part"), false);

    assert_eq!(loss_columns(&dir.path().join("full.csv")), loss_columns(&dir.path().join("resumed.csv")));
    assert_eq!(full.online.max_abs_diff(&resumed.online).unwrap(), 0.0);
    assert_eq!(full.target.max_abs_diff(&resumed.target).unwrap(), 0.0);
}

#[test]
fn results_do_not_depend_on_worker_count() {
    let env = FragEnv::new(Arc::new(synth::toy_vocabulary().unwrap()), 3);
    let run_with = |workers| {
        let mut model = DoubleGfn::new(config(TINY, 12, (0.0, 64.0), 3), &env.vocab).unwrap();
        let ctx = pockets(&model, &[("a", [2, 1, 2, 2, 2])]);
        let mut rewards = ComposedReward { scorer: flowgen_core::reward::Scorer::Synthetic, spec: Default::default() };
        let pool = thread_pool(workers).unwrap();
        let losses: Vec<f64> = (0..5).map(|_| model.train_step(&env, &ctx, &mut rewards, &pool).unwrap().loss).collect();
        (losses, model.online)
    };
    let (l1, p1) = run_with(1);
    let (l3, p3) = run_with(3);
    assert_eq!(l1, l3);
    assert_eq!(p1.max_abs_diff(&p3).unwrap(), 0.0);
}

#[test]
fn zero_steps_keeps_the_initialization() {
    let env = FragEnv::new(Arc::new(synth::toy_vocabulary().unwrap()), 3);
    let dir = tempfile::tempdir().unwrap();
    let mut model = DoubleGfn::new(config(TINY, 13, (0.0, 64.0), 3), &env.vocab).unwrap();
    let init = model.online.clone();
    let ctx = pockets(&model, &[("a", [2, 1, 2, 2, 2])]);
    let mut rewards = ComposedReward { scorer: flowgen_core::reward::Scorer::Synthetic, spec: Default::default() };
    let pool = thread_pool(1).unwrap();
    let hist = train(&mut model, &env, &ctx, &mut rewards, &pool, None, Some(dir.path())).unwrap();
    assert!(hist.is_empty());
    let (loaded, _) = DoubleGfn::load(dir.path()).unwrap();
    assert_eq!(loaded.online.max_abs_diff(&init).unwrap(), 0.0);
    assert_eq!(loaded.target.max_abs_diff(&init).unwrap(), 0.0);
    assert_eq!(loaded.step, 0);
}

#[test]
fn invalid_configs_are_rejected() {
    let vocab = synth::toy_vocabulary().unwrap();
    let bad = [
        TrainerConfig { lr: 0.0, ..TrainerConfig::default() },
        TrainerConfig { batch_size: 0, ..TrainerConfig::default() },
        TrainerConfig { beta_max: 65.0, ..TrainerConfig::default() },
        TrainerConfig { beta_min: 5.0, beta_max: 4.0, ..TrainerConfig::default() },
        TrainerConfig { tau: 1.5, ..TrainerConfig::default() },
        TrainerConfig { copy_every_n: Some(0), ..TrainerConfig::default() },
    ];
    for cfg in bad {
        assert!(DoubleGfn::new(cfg, &vocab).is_err());
    }
    let text = r#"{"steps": 5, "batch_sise": 3}"#;
    assert!(serde_json::from_str::<TrainerConfig>(text).is_err());
    assert_eq!(TrainerConfig::default().batch_size, 8);
    assert_eq!(TrainerConfig::finetune_defaults().batch_size, 64);
    assert_eq!(TrainerConfig::finetune_defaults().steps, 300);
}

#[test]
fn finetune_keeps_unique_top_molecules_and_survives_scorer_failure() {
    let env = FragEnv::new(Arc::new(synth::toy_vocabulary().unwrap()), 3);
    let mut model = DoubleGfn::new(config(TINY, 14, (0.0, 64.0), 3), &env.vocab).unwrap();
    model.config.batch_size = 16;
    let ctx = pockets(&model, &[("a", [2, 1, 2, 2, 2])]);
    let terminals = env.enumerate_terminals(100_000).unwrap();
    let entries: Vec<(&str, String, f64)> =
        terminals.keys().enumerate().map(|(i, k)| ("a", k.clone(), 0.1 + i as f64 / 100.0)).collect();
    let pool = thread_pool(1).unwrap();

    let mut rewards = TableReward::new(&entries);
    let mut top = TopK::new(1000);
    finetune(&mut model, &env, &ctx[0], &mut rewards, &pool, 10, &mut top, |_| Ok(())).unwrap();
    let sorted = top.sorted();
    let keys: HashSet<&str> = sorted.iter().map(|e| e.key.as_str()).collect();
    assert_eq!(keys.len(), sorted.len());
    assert!(sorted.len() <= terminals.len());
    assert!(sorted.windows(2).all(|w| w[0].reward >= w[1].reward));

    let mut small = TopK::new(5);
    let mut failing = TableReward::new(&entries);
    failing.fail_after = Some(3);
    let err = finetune(&mut model, &env, &ctx[0], &mut failing, &pool, 10, &mut small, |_| Ok(()));
    assert!(err.is_err());
    assert_eq!(small.len(), 5);
}

#[test]
fn tempered_target_is_normalised() {
    let t = tempered_target(&[1.0, 3.0], 1.0);
    assert!(total_variation(&t, &[0.25, 0.75]) < 1e-12);
}
