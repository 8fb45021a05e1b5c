//! Trajectory-balance training with an online network and a slowly tracking
//! target network that generates the data.

use std::collections::HashMap;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use flowgen_nn::checkpoint::{load_params, save_params};
use flowgen_nn::{polyak_update, Graph, Init, OptimizerHyper, OptimizerKind, OptimizerState, ParamSet, Scalar, Var};

use crate::error::{out_of_range, Error, Result};
use crate::fraggraph::{FragEnv, FragmentVocabulary, GraphAction, MolGraphState, Trajectory, DEFAULT_MAX_NODES};
use crate::pocket::{embed_pocket, PocketEmbedding, PocketEncoder, PocketStructure};
use crate::policy::{condition, sample_action, ConditionVector, PolicyConfig, PolicyNet, LOGZ_PREFIX};
use crate::reward::{compose, RewardSpec, ScoreTriple, Scorer};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub z_lr: f64,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub tau: f64,
    /// Hard-copy online into target every n steps instead of Polyak averaging.
    pub copy_every_n: Option<usize>,
    pub epsilon: f64,
    pub max_nodes: usize,
    /// Training temperatures are drawn uniformly from [beta_min, beta_max] per trajectory.
    pub beta_min: f64,
    pub beta_max: f64,
    pub beta_inference: f64,
    pub checkpoint_every: usize,
    pub seed: u64,
    pub policy: PolicyConfig,
    pub reward: RewardSpec,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            steps: 30_000,
            batch_size: 8,
            lr: 1e-4,
            z_lr: 1e-3,
            weight_decay: 1e-8,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            tau: 0.99,
            copy_every_n: None,
            epsilon: 0.01,
            max_nodes: DEFAULT_MAX_NODES,
            beta_min: 0.0,
            beta_max: 64.0,
            beta_inference: 64.0,
            checkpoint_every: 1000,
            seed: 0,
            policy: PolicyConfig::default(),
            reward: RewardSpec::default(),
        }
    }
}

pub const FINETUNE_BATCH: usize = 64;
pub const FINETUNE_STEPS: usize = 300;
pub const DEFAULT_TOP_K: usize = 100;

impl TrainerConfig {
    pub fn finetune_defaults() -> Self {
        TrainerConfig { steps: FINETUNE_STEPS, batch_size: FINETUNE_BATCH, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_size", self.batch_size as f64),
            ("lr", self.lr),
            ("z_lr", self.z_lr),
            ("adam_eps", self.adam_eps),
            ("max_nodes", self.max_nodes as f64),
            ("checkpoint_every", self.checkpoint_every as f64),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(out_of_range(name, v));
            }
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(out_of_range("tau", self.tau));
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(out_of_range("epsilon", self.epsilon));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(out_of_range("adam beta", self.adam_beta1));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(out_of_range("weight_decay", self.weight_decay));
        }
        if !(0.0 <= self.beta_min && self.beta_min <= self.beta_max && self.beta_max <= 64.0) {
            return Err(Error::Config(format!(
                "beta range [{}, {}] must lie within [0, 64]",
                self.beta_min, self.beta_max
            )));
        }
        if !(0.0..=64.0).contains(&self.beta_inference) {
            return Err(out_of_range("beta_inference", self.beta_inference));
        }
        if self.copy_every_n == Some(0) {
            return Err(out_of_range("copy_every_n", 0.0));
        }
        self.policy.validate()?;
        self.reward.validate()
    }
}

/// A pocket together with its frozen conditioning embedding.
#[derive(Clone, Debug)]
pub struct PocketContext {
    pub pocket: PocketStructure,
    pub embedding: PocketEmbedding,
}

/// Randomly initialised, never trained residue-graph encoder.
pub fn pocket_encoder_params(seed: u64) -> Result<ParamSet<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x706f_636b_6574);
    let mut p = ParamSet::new();
    PocketEncoder::declare(&mut p, &mut Init::Random(&mut rng))?;
    Ok(p)
}

pub fn embed_pockets(encoder: &ParamSet<f32>, pockets: &[PocketStructure]) -> Result<Vec<PocketContext>> {
    let enc64: ParamSet<f64> = encoder.cast();
    pockets
        .par_iter()
        .map(|p| {
            p.validate()?;
            Ok(PocketContext { pocket: p.clone(), embedding: embed_pocket(&enc64, p)? })
        })
        .collect()
}

/// Independent generator for one (seed, step, slot) triple.
pub fn slot_rng(seed: u64, step: u64, slot: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ slot);
    rng
}

/// A rollout plus what the loss needs to recompute forward probabilities.
#[derive(Clone, Debug)]
pub struct SampledTrajectory {
    pub trajectory: Trajectory,
    /// Valid actions at each visited non-terminal state.
    pub valid: Vec<Vec<GraphAction>>,
    /// Indices into `valid[k]` whose successors are isomorphic to the chosen one.
    pub equivalent: Vec<Vec<usize>>,
}

fn logsumexp(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Rollout from s₀ with ε-exploration. `log_probs[k]` is the log-probability,
/// under `params` without the ε mixture, of moving to the isomorphism class
/// of `states[k + 1]`.
pub fn sample_trajectory<T: Scalar>(
    net: &PolicyNet,
    params: &ParamSet<T>,
    env: &FragEnv,
    cond: &ConditionVector,
    rng: &mut impl Rng,
    epsilon: f64,
) -> Result<SampledTrajectory> {
    let mut state = MolGraphState::new();
    let mut out = SampledTrajectory {
        trajectory: Trajectory { states: vec![state.clone()], actions: vec![], log_probs: vec![] },
        valid: vec![],
        equivalent: vec![],
    };
    while !state.is_terminal() {
        let (valid, dist) = net.distribution(params, env, &state, cond)?;
        let (idx, _) = sample_action(&dist, rng, epsilon);
        let eq = env.equivalent_actions(&state, &valid, idx)?;
        let lp = logsumexp(eq.iter().map(|&j| dist[j].ln()));
        let action = valid[idx];
        state = env.apply(&state, &action)?;
        out.trajectory.states.push(state.clone());
        out.trajectory.actions.push(action);
        out.trajectory.log_probs.push(lp);
        out.valid.push(valid);
        out.equivalent.push(eq);
    }
    Ok(out)
}

/// Σ_k ln(1 / |parents(states[k+1])|).
pub fn uniform_backward_logprob(env: &FragEnv, traj: &Trajectory) -> Result<f64> {
    let mut total = 0.0;
    for s in &traj.states[1..] {
        total -= (env.parents(s)?.len() as f64).ln();
    }
    Ok(total)
}

/// The squared trajectory-balance residual.
pub fn tb_loss_value(log_z: f64, sum_log_pf: f64, beta_log_r: f64, sum_log_pb: f64) -> f64 {
    let r = log_z + sum_log_pf - beta_log_r - sum_log_pb;
    r * r
}

/// Trajectory-balance loss on the tape, with forward probabilities recomputed
/// under the parameters bound to `g`.
pub fn tb_loss<T: Scalar>(
    g: &mut Graph<'_, T>,
    net: &PolicyNet,
    sampled: &SampledTrajectory,
    cond: &ConditionVector,
    beta_log_r: f64,
    sum_log_pb: f64,
) -> Result<Var> {
    if !beta_log_r.is_finite() {
        return Err(Error::NonFinite("beta * log reward"));
    }
    let traj = &sampled.trajectory;
    if !traj.terminal().is_terminal() {
        return Err(Error::NotTerminal);
    }
    let mut total = net.log_z_var(g, cond)?;
    for k in 0..traj.len() {
        let lp = net.valid_log_probs(g, &traj.states[k], &sampled.valid[k], cond)?;
        let col = g.reshape(lp, sampled.valid[k].len(), 1)?;
        let picked = g.gather_rows(col, &sampled.equivalent[k])?;
        let n = sampled.equivalent[k].len();
        let row = g.reshape(picked, 1, n)?;
        let step = if n == 1 { row } else { g.logsumexp(row) };
        total = g.add(total, step)?;
    }
    let resid = g.add_scalar(total, -(beta_log_r + sum_log_pb));
    if !g.value(resid).all_finite() {
        return Err(Error::NonFinite("trajectory balance residual"));
    }
    Ok(g.mul(resid, resid)?)
}

/// Online/target parameter pair with separate optimizers for the policy and
/// the log Z head.
pub struct DoubleGfn {
    pub config: TrainerConfig,
    pub net: PolicyNet,
    pub online: ParamSet<f32>,
    pub target: ParamSet<f32>,
    pub opt_policy: OptimizerState<f32>,
    pub opt_z: OptimizerState<f32>,
    pub encoder: ParamSet<f32>,
    pub step: u64,
}

fn is_logz(name: &str) -> bool {
    name.starts_with(LOGZ_PREFIX)
}

/// One finished, scored trajectory.
#[derive(Clone, Debug)]
pub struct ScoredSample {
    pub pocket: usize,
    pub beta: f64,
    pub molecule: MolGraphState,
    pub triple: ScoreTriple,
    pub reward: f64,
}

#[derive(Clone, Debug)]
pub struct StepStats {
    pub step: u64,
    pub loss: f64,
    pub mean_reward: f64,
    pub mean_log_z: f64,
    pub trajectories_per_sec: f64,
    pub samples: Vec<ScoredSample>,
}

impl DoubleGfn {
    pub fn new(config: TrainerConfig, vocab: &FragmentVocabulary) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (net, online) = PolicyNet::init_params(config.policy, vocab, &mut rng)?;
        let target = online.clone();
        let hyper = |lr| OptimizerHyper {
            lr,
            beta1: config.adam_beta1,
            beta2: config.adam_beta2,
            eps: config.adam_eps,
            weight_decay: config.weight_decay,
        };
        let opt_policy = OptimizerState::new(OptimizerKind::Adam, hyper(config.lr), &online, |n| !is_logz(n));
        let opt_z = OptimizerState::new(OptimizerKind::Adam, hyper(config.z_lr), &online, is_logz);
        let encoder = pocket_encoder_params(config.seed)?;
        Ok(DoubleGfn { config, net, online, target, opt_policy, opt_z, encoder, step: 0 })
    }

    pub fn pocket_contexts(&self, pockets: &[PocketStructure]) -> Result<Vec<PocketContext>> {
        embed_pockets(&self.encoder, pockets)
    }

    /// Polyak averaging, or a hard copy every `copy_every_n` steps.
    pub fn update_target(&mut self) -> Result<()> {
        match self.config.copy_every_n {
            Some(n) => {
                if self.step % n as u64 == 0 {
                    self.target = self.online.clone();
                }
            }
            None => polyak_update(&mut self.target, &self.online, self.config.tau)?,
        }
        Ok(())
    }

    /// Samples `batch_size` trajectories from the target network, scores
    /// them, and takes one optimizer step on the online network.
    pub fn train_step(
        &mut self,
        env: &FragEnv,
        pockets: &[PocketContext],
        rewards: &mut dyn RewardSource,
        pool: &rayon::ThreadPool,
    ) -> Result<StepStats> {
        let t0 = Instant::now();
        let (rollouts, samples) = self.rollouts(env, pockets, rewards, pool, self.step)?;

        let (net, online) = (&self.net, &self.online);
        let per_traj: Vec<(f64, f64, ParamSet<f32>)> = pool.install(|| {
            rollouts
                .par_iter()
                .zip(samples.par_iter())
                .map(|((_, beta, cond, traj), s)| {
                    let log_pb = uniform_backward_logprob(env, &traj.trajectory)?;
                    let mut g = Graph::new(online);
                    let loss = tb_loss(&mut g, net, traj, cond, beta * s.reward.ln(), log_pb)?;
                    let value = f64::from(g.value(loss).item());
                    let log_z = net.log_z(online, cond)?;
                    Ok((value, log_z, g.backward(loss)?))
                })
                .collect::<Result<_>>()
        })?;
        let n = per_traj.len() as f64;
        let mut grads = self.online.zeros_like();
        let (mut loss, mut log_z) = (0.0, 0.0);
        for (l, z, g) in &per_traj {
            loss += l;
            log_z += z;
            grads.accumulate(g)?;
        }
        drop(per_traj);
        grads.scale(1.0 / n as f32);
        if !grads.all_finite() {
            return Err(Error::NonFinite("gradients"));
        }
        self.opt_policy.step(&mut self.online, &grads)?;
        self.opt_z.step(&mut self.online, &grads)?;
        self.step += 1;
        self.update_target()?;
        let secs = t0.elapsed().as_secs_f64().max(1e-9);
        Ok(StepStats {
            step: self.step,
            loss: loss / n,
            mean_reward: samples.iter().map(|s| s.reward).sum::<f64>() / n,
            mean_log_z: log_z / n,
            trajectories_per_sec: n / secs,
            samples,
        })
    }

    #[allow(clippy::type_complexity)]
    fn rollouts(
        &self,
        env: &FragEnv,
        pockets: &[PocketContext],
        rewards: &mut dyn RewardSource,
        pool: &rayon::ThreadPool,
        step: u64,
    ) -> Result<(Vec<(usize, f64, ConditionVector, SampledTrajectory)>, Vec<ScoredSample>)> {
        if pockets.is_empty() {
            return Err(Error::EmptyInput("pocket set"));
        }
        let cfg = &self.config;
        let (net, target) = (&self.net, &self.target);
        let rollouts: Vec<(usize, f64, ConditionVector, SampledTrajectory)> = pool.install(|| {
            (0..cfg.batch_size)
                .into_par_iter()
                .map(|slot| {
                    let mut rng = slot_rng(cfg.seed, step, slot as u64);
                    let p = rng.gen_range(0..pockets.len());
                    let beta = if cfg.beta_max > cfg.beta_min { rng.gen_range(cfg.beta_min..=cfg.beta_max) } else { cfg.beta_min };
                    let cond = condition(&pockets[p].embedding, beta)?;
                    let traj = sample_trajectory(net, target, env, &cond, &mut rng, cfg.epsilon)?;
                    Ok((p, beta, cond, traj))
                })
                .collect::<Result<_>>()
        })?;

        let molecules: Vec<MolGraphState> = rollouts.iter().map(|r| r.3.trajectory.terminal().clone()).collect();
        let pocket_of: Vec<usize> = rollouts.iter().map(|r| r.0).collect();
        let scored = reward_grouped(rewards, env, pockets, &pocket_of, &molecules)?;
        let samples = rollouts
            .iter()
            .zip(molecules)
            .zip(scored)
            .map(|((r, molecule), (triple, reward))| ScoredSample { pocket: r.0, beta: r.1, molecule, triple, reward })
            .collect();
        Ok((rollouts, samples))
    }

    /// The same `steps` rollout batches `finetune` would draw first, scored
    /// into `top`, with no parameter updates.
    pub fn explore(
        &self,
        env: &FragEnv,
        pocket: &PocketContext,
        rewards: &mut dyn RewardSource,
        pool: &rayon::ThreadPool,
        steps: usize,
        top: &mut TopK,
    ) -> Result<()> {
        for s in 0..steps as u64 {
            let (_, samples) = self.rollouts(env, std::slice::from_ref(pocket), rewards, pool, self.step + s)?;
            for x in &samples {
                top.insert(&x.molecule, x.triple, x.reward);
            }
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path, vocab: &FragmentVocabulary) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        save_params(&self.online, dir, "online")?;
        save_params(&self.target, dir, "target")?;
        save_params(&self.encoder, dir, "encoder")?;
        for (opt, stem) in [(&self.opt_policy, "opt_policy"), (&self.opt_z, "opt_z")] {
            let (m, v) = opt.moments();
            save_params(&m, dir, &format!("{stem}_m"))?;
            save_params(&v, dir, &format!("{stem}_v"))?;
        }
        let meta = CheckpointMeta {
            step: self.step,
            opt_policy_steps: self.opt_policy.step_count,
            opt_z_steps: self.opt_z.step_count,
            vocab_hash: vocab.version_hash.clone(),
            config: self.config.clone(),
        };
        std::fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
        std::fs::write(dir.join("vocab.json"), vocab.to_json()?)?;
        Ok(())
    }

    /// Loads a checkpoint and the vocabulary stored next to it.
    pub fn load(dir: &Path) -> Result<(Self, FragmentVocabulary)> {
        let meta: CheckpointMeta = serde_json::from_str(&crate::error::read_file(&dir.join("meta.json"))?)?;
        let vocab = FragmentVocabulary::load(&dir.join("vocab.json"))?;
        if vocab.version_hash != meta.vocab_hash {
            return Err(Error::InvalidVocabulary("checkpoint vocabulary hash mismatch".into()));
        }
        let mut model = DoubleGfn::new(meta.config, &vocab)?;
        let load = |stem: &str, like: &ParamSet<f32>| -> Result<ParamSet<f32>> {
            let p = load_params(dir, stem)?;
            like.check_compatible(&p)?;
            Ok(p)
        };
        model.online = load("online", &model.online)?;
        model.target = load("target", &model.target)?;
        model.encoder = load("encoder", &model.encoder)?;
        for (stem, steps) in [("opt_policy", meta.opt_policy_steps), ("opt_z", meta.opt_z_steps)] {
            let m = load_params(dir, &format!("{stem}_m"))?;
            let v = load_params(dir, &format!("{stem}_v"))?;
            let opt = if stem == "opt_policy" { &mut model.opt_policy } else { &mut model.opt_z };
            opt.restore_moments(&m, &v, steps)?;
        }
        model.step = meta.step;
        Ok((model, vocab))
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointMeta {
    step: u64,
    opt_policy_steps: u64,
    opt_z_steps: u64,
    vocab_hash: String,
    config: TrainerConfig,
}

/// Turns terminal molecules into (scores, reward) pairs for one pocket.
pub trait RewardSource {
    fn rewards(&mut self, env: &FragEnv, pocket: &PocketContext, mols: &[MolGraphState]) -> Result<Vec<(ScoreTriple, f64)>>;
}

/// A scorer followed by reward composition.
pub struct ComposedReward {
    pub scorer: Scorer,
    pub spec: RewardSpec,
}

impl RewardSource for ComposedReward {
    fn rewards(&mut self, env: &FragEnv, pocket: &PocketContext, mols: &[MolGraphState]) -> Result<Vec<(ScoreTriple, f64)>> {
        let triples = self.scorer.score(&env.vocab, &pocket.pocket, mols)?;
        triples
            .into_iter()
            .zip(mols)
            .map(|(t, m)| Ok((t, compose(&t, &self.spec, m.heavy_atom_count(&env.vocab)?)?)))
            .collect()
    }
}

/// Rewards in input order, one call per distinct pocket.
pub fn reward_grouped(
    rewards: &mut dyn RewardSource,
    env: &FragEnv,
    pockets: &[PocketContext],
    pocket_of: &[usize],
    molecules: &[MolGraphState],
) -> Result<Vec<(ScoreTriple, f64)>> {
    let mut groups: Vec<(usize, Vec<usize>)> = Vec::new();
    for (k, &p) in pocket_of.iter().enumerate() {
        match groups.iter_mut().find(|(q, _)| *q == p) {
            Some((_, ks)) => ks.push(k),
            None => groups.push((p, vec![k])),
        }
    }
    let mut out = vec![None; molecules.len()];
    for (p, ks) in groups {
        let mols: Vec<MolGraphState> = ks.iter().map(|&k| molecules[k].clone()).collect();
        let scored = rewards.rewards(env, &pockets[p], &mols)?;
        if scored.len() != mols.len() {
            return Err(Error::Config(format!("reward source returned {} values for {} molecules", scored.len(), mols.len())));
        }
        for (k, (t, r)) in ks.into_iter().zip(scored) {
            if !(r > 0.0) || !r.is_finite() {
                return Err(out_of_range("reward", r));
            }
            out[k] = Some((t, r));
        }
    }
    Ok(out.into_iter().map(|t| t.expect("every molecule scored")).collect())
}

pub const LOG_HEADER: [&str; 5] = ["step", "loss", "mean_reward", "mean_logZ", "trajectories_per_sec"];

/// Runs `config.steps - model.step` further steps, appending to `log` (if
/// any) and checkpointing into `checkpoint_dir` (if any) every
/// `checkpoint_every` steps and at the end.
pub fn train(
    model: &mut DoubleGfn,
    env: &FragEnv,
    pockets: &[PocketContext],
    rewards: &mut dyn RewardSource,
    pool: &rayon::ThreadPool,
    mut log: Option<&mut csv::Writer<std::fs::File>>,
    checkpoint_dir: Option<&Path>,
) -> Result<Vec<StepStats>> {
    let mut history = Vec::new();
    while (model.step as usize) < model.config.steps {
        let mut stats = model.train_step(env, pockets, rewards, pool)?;
        if let Some(w) = log.as_deref_mut() {
            w.write_record([
                stats.step.to_string(),
                format!("{:.9e}", stats.loss),
                format!("{:.9e}", stats.mean_reward),
                format!("{:.9e}", stats.mean_log_z),
                format!("{:.3}", stats.trajectories_per_sec),
            ])?;
            w.flush()?;
        }
        if let Some(dir) = checkpoint_dir {
            if model.step as usize % model.config.checkpoint_every == 0 || model.step as usize == model.config.steps {
                model.save(dir, &env.vocab)?;
            }
        }
        stats.samples.clear();
        history.push(stats);
    }
    if let Some(dir) = checkpoint_dir {
        if history.is_empty() {
            model.save(dir, &env.vocab)?;
        }
    }
    Ok(history)
}

/// Best molecules seen so far, one entry per canonical key.
#[derive(Clone, Debug, Default)]
pub struct TopK {
    pub k: usize,
    entries: HashMap<String, TopEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TopEntry {
    pub key: String,
    pub molecule: MolGraphState,
    pub triple: ScoreTriple,
    pub reward: f64,
}

impl TopK {
    pub fn new(k: usize) -> Self {
        TopK { k, entries: HashMap::new() }
    }

    pub fn insert(&mut self, molecule: &MolGraphState, triple: ScoreTriple, reward: f64) {
        let key = molecule.canonical_key();
        match self.entries.get(&key) {
            Some(e) if e.reward >= reward => return,
            _ => {}
        }
        self.entries.insert(key.clone(), TopEntry { key, molecule: molecule.clone(), triple, reward });
        if self.entries.len() > self.k {
            let worst = self
                .entries
                .values()
                .min_by(|a, b| a.reward.total_cmp(&b.reward).then_with(|| b.key.cmp(&a.key)))
                .map(|e| e.key.clone())
                .expect("non-empty");
            self.entries.remove(&worst);
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries by descending reward, ties by key.
    pub fn sorted(&self) -> Vec<TopEntry> {
        let mut v: Vec<TopEntry> = self.entries.values().cloned().collect();
        v.sort_by(|a, b| b.reward.total_cmp(&a.reward).then_with(|| a.key.cmp(&b.key)));
        v
    }

    pub fn mean_reward(&self) -> f64 {
        if self.entries.is_empty() {
            return 0.0;
        }
        self.entries.values().map(|e| e.reward).sum::<f64>() / self.entries.len() as f64
    }
}

/// Continues training on a single pocket, feeding every scored molecule into
/// `top`. On error `top` keeps whatever was collected.
pub fn finetune(
    model: &mut DoubleGfn,
    env: &FragEnv,
    pocket: &PocketContext,
    rewards: &mut dyn RewardSource,
    pool: &rayon::ThreadPool,
    steps: usize,
    top: &mut TopK,
    mut on_step: impl FnMut(&StepStats) -> Result<()>,
) -> Result<Vec<StepStats>> {
    let pockets = std::slice::from_ref(pocket);
    let mut history = Vec::with_capacity(steps);
    for _ in 0..steps {
        let mut stats = model.train_step(env, pockets, rewards, pool)?;
        for s in &stats.samples {
            top.insert(&s.molecule, s.triple, s.reward);
        }
        on_step(&stats)?;
        stats.samples.clear();
        history.push(stats);
    }
    Ok(history)
}

/// ε-free (unless `epsilon` > 0) samples of terminal molecules.
pub fn sample_molecules<T: Scalar>(
    net: &PolicyNet,
    params: &ParamSet<T>,
    env: &FragEnv,
    cond: &ConditionVector,
    n: usize,
    seed: u64,
    epsilon: f64,
    pool: &rayon::ThreadPool,
) -> Result<Vec<MolGraphState>> {
    pool.install(|| {
        (0..n)
            .into_par_iter()
            .map(|i| {
                let mut rng = slot_rng(seed, u64::MAX, i as u64);
                sample_terminal(net, params, env, cond, &mut rng, epsilon)
            })
            .collect()
    })
}

/// Draws rollouts in rounds until `n` distinct terminals (by canonical key)
/// are found or `max_draws` rollouts have been spent. Returns the distinct
/// molecules in discovery order and the number of rollouts used.
#[allow(clippy::too_many_arguments)]
pub fn sample_unique<T: Scalar>(
    net: &PolicyNet,
    params: &ParamSet<T>,
    env: &FragEnv,
    cond: &ConditionVector,
    n: usize,
    max_draws: usize,
    seed: u64,
    epsilon: f64,
    pool: &rayon::ThreadPool,
) -> Result<(Vec<MolGraphState>, usize)> {
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::with_capacity(n);
    let mut draws = 0;
    let mut round = 0u64;
    while out.len() < n && draws < max_draws {
        let k = (n - out.len()).min(max_draws - draws);
        let batch: Vec<MolGraphState> = pool.install(|| {
            (0..k)
                .into_par_iter()
                .map(|i| {
                    let mut rng = slot_rng(seed, round, i as u64);
                    sample_terminal(net, params, env, cond, &mut rng, epsilon)
                })
                .collect::<Result<_>>()
        })?;
        draws += k;
        round += 1;
        for m in batch {
            if out.len() < n && seen.insert(m.canonical_key()) {
                out.push(m);
            }
        }
    }
    Ok((out, draws))
}

/// One rollout without the bookkeeping the loss needs.
pub fn sample_terminal<T: Scalar>(
    net: &PolicyNet,
    params: &ParamSet<T>,
    env: &FragEnv,
    cond: &ConditionVector,
    rng: &mut impl Rng,
    epsilon: f64,
) -> Result<MolGraphState> {
    let mut state = MolGraphState::new();
    while !state.is_terminal() {
        let (valid, dist) = net.distribution(params, env, &state, cond)?;
        let (idx, _) = sample_action(&dist, rng, epsilon);
        state = env.apply(&state, &valid[idx])?;
    }
    Ok(state)
}

pub fn thread_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}
