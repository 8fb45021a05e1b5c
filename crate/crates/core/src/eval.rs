//! Sample-set metrics, the exact-distribution verifier and report files.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use flowgen_nn::{ParamSet, Scalar};

use crate::error::{Error, Result};
use crate::fraggraph::{FragEnv, Fingerprint, GraphAction, MolGraphState, MoleculeJson};
use crate::gfn::{slot_rng, PocketContext, RewardSource};
use crate::policy::{condition, sample_action, PolicyNet};
use crate::reward::{normalize_sa, ScoreTriple};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MoleculeRecord {
    pub pocket_id: String,
    pub key: String,
    pub molecule: MoleculeJson,
    #[serde(flatten)]
    pub triple: ScoreTriple,
    pub reward: f64,
}

impl MoleculeRecord {
    pub fn new(pocket_id: &str, molecule: &MolGraphState, triple: ScoreTriple, reward: f64) -> Self {
        MoleculeRecord {
            pocket_id: pocket_id.to_string(),
            key: molecule.canonical_key(),
            molecule: molecule.to_record(),
            triple,
            reward,
        }
    }

    pub fn fingerprint(&self) -> Fingerprint {
        Fingerprint::from_record(&self.molecule)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricThresholds {
    pub qed_min: f64,
    pub sa_min: f64,
    pub ds_max: f64,
}

impl Default for MetricThresholds {
    fn default() -> Self {
        MetricThresholds { qed_min: 0.25, sa_min: 0.59, ds_max: -8.18 }
    }
}

/// Mean pairwise count-Tanimoto distance.
pub fn diversity(fingerprints: &[Fingerprint]) -> Result<f64> {
    let n = fingerprints.len();
    if n < 2 {
        return Err(Error::EmptyInput("diversity needs at least two molecules"));
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            total += 1.0 - fingerprints[i].tanimoto(&fingerprints[j]);
        }
    }
    Ok(total / (n * (n - 1) / 2) as f64)
}

pub fn record_diversity(records: &[MoleculeRecord]) -> Result<f64> {
    diversity(&records.iter().map(MoleculeRecord::fingerprint).collect::<Vec<_>>())
}

pub fn passes(triple: &ScoreTriple, t: &MetricThresholds) -> bool {
    triple.qed > t.qed_min && normalize_sa(triple.sa_raw) > t.sa_min && triple.ds < t.ds_max
}

/// Fraction of records passing all three thresholds; 0 for no records.
pub fn success_rate(records: &[MoleculeRecord], t: &MetricThresholds) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    records.iter().filter(|r| passes(&r.triple, t)).count() as f64 / records.len() as f64
}

/// Fraction of records docking strictly better than the reference.
pub fn high_affinity(records: &[MoleculeRecord], reference_ds: f64) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    records.iter().filter(|r| r.triple.ds < reference_ds).count() as f64 / records.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TopKStats {
    pub k: usize,
    pub mean_ds: f64,
    pub mean_reward: f64,
    pub mean_qed: f64,
}

/// Records by descending reward, ties broken by canonical key.
pub fn rank_by_reward(records: &[MoleculeRecord]) -> Vec<&MoleculeRecord> {
    let mut v: Vec<&MoleculeRecord> = records.iter().collect();
    v.sort_by(|a, b| b.reward.total_cmp(&a.reward).then_with(|| a.key.cmp(&b.key)));
    v
}

pub fn topk_stats(records: &[MoleculeRecord], k: usize) -> Result<TopKStats> {
    if k == 0 {
        return Err(Error::OutOfRange { what: "k", value: 0.0 });
    }
    if records.is_empty() {
        return Err(Error::EmptyInput("records"));
    }
    let top: Vec<&MoleculeRecord> = rank_by_reward(records).into_iter().take(k).collect();
    let n = top.len() as f64;
    Ok(TopKStats {
        k: top.len(),
        mean_ds: top.iter().map(|r| r.triple.ds).sum::<f64>() / n,
        mean_reward: top.iter().map(|r| r.reward).sum::<f64>() / n,
        mean_qed: top.iter().map(|r| r.triple.qed).sum::<f64>() / n,
    })
}

pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// RMSE of predicting every evaluation target with the training mean.
pub fn rmse_baseline(train: &[f64], eval: &[f64]) -> Result<f64> {
    if train.is_empty() || eval.is_empty() {
        return Err(Error::EmptyInput("baseline needs training and evaluation targets"));
    }
    let mean = train.iter().sum::<f64>() / train.len() as f64;
    Ok((eval.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / eval.len() as f64).sqrt())
}

/// Forward distributions at every reachable non-terminal state.
pub struct PolicyTable {
    pub states: HashMap<String, (MolGraphState, Vec<GraphAction>, Vec<f64>)>,
}

impl PolicyTable {
    /// Enumerates the state space (at most `budget` states) and evaluates
    /// the policy once per state.
    pub fn build<T: Scalar>(
        net: &PolicyNet,
        params: &ParamSet<T>,
        env: &FragEnv,
        cond: &crate::policy::ConditionVector,
        budget: usize,
        pool: &rayon::ThreadPool,
    ) -> Result<Self> {
        let mut seen: HashMap<String, MolGraphState> = HashMap::new();
        let s0 = MolGraphState::new();
        let mut frontier = vec![s0.clone()];
        seen.insert(s0.canonical_key(), s0);
        let mut inner = Vec::new();
        while !frontier.is_empty() {
            let mut next = Vec::new();
            for s in frontier {
                if s.is_terminal() {
                    continue;
                }
                for a in env.valid_actions(&s)? {
                    let c = env.apply(&s, &a)?;
                    let key = c.canonical_key();
                    if !seen.contains_key(&key) {
                        if seen.len() >= budget {
                            return Err(Error::BudgetExceeded(budget));
                        }
                        seen.insert(key, c.clone());
                        next.push(c);
                    }
                }
                inner.push(s);
            }
            frontier = next;
        }
        let states = pool.install(|| {
            inner
                .into_par_iter()
                .map(|s| {
                    let (valid, dist) = net.distribution(params, env, &s, cond)?;
                    Ok((s.canonical_key(), (s, valid, dist)))
                })
                .collect::<Result<HashMap<_, _>>>()
        })?;
        Ok(PolicyTable { states })
    }

    /// ε-free rollout using the cached distributions. Actions are applied to
    /// the stored representative of each isomorphism class.
    pub fn sample(&self, env: &FragEnv, rng: &mut impl rand::Rng) -> Result<MolGraphState> {
        let mut s = MolGraphState::new();
        while !s.is_terminal() {
            let (rep, valid, dist) = self
                .states
                .get(&s.canonical_key())
                .ok_or_else(|| Error::InvalidMolecule("state missing from policy table".into()))?;
            let (i, _) = sample_action(dist, rng, 0.0);
            s = env.apply(rep, &valid[i])?;
        }
        Ok(s)
    }

    /// Exact probability of reaching each terminal class.
    pub fn terminal_probabilities(&self, env: &FragEnv) -> Result<BTreeMap<String, f64>> {
        let mut by_depth: BTreeMap<usize, Vec<&String>> = BTreeMap::new();
        for (k, (s, _, _)) in &self.states {
            by_depth.entry(depth(s)).or_default().push(k);
        }
        let mut mass: HashMap<String, f64> = HashMap::new();
        mass.insert(MolGraphState::new().canonical_key(), 1.0);
        let mut out = BTreeMap::new();
        for keys in by_depth.values() {
            let mut keys = keys.clone();
            keys.sort();
            for k in keys {
                let p = mass.get(k).copied().unwrap_or(0.0);
                let (s, valid, dist) = &self.states[k];
                for (a, q) in valid.iter().zip(dist) {
                    let c = env.apply(s, a)?;
                    let ck = c.canonical_key();
                    if c.is_terminal() {
                        *out.entry(ck).or_insert(0.0) += p * q;
                    } else {
                        *mass.entry(ck).or_insert(0.0) += p * q;
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Number of actions needed to build `s` from the empty state.
fn depth(s: &MolGraphState) -> usize {
    let set = s.links().iter().map(|l| l.slot_a.is_some() as usize + l.slot_b.is_some() as usize).sum::<usize>();
    s.num_nodes() + set + s.is_terminal() as usize
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TerminalRow {
    pub key: String,
    pub reward: f64,
    pub target: f64,
    pub empirical: f64,
    pub model: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VerifyReport {
    pub beta: f64,
    pub n_samples: usize,
    /// Total variation between the samples and r^β / Z.
    pub tv: f64,
    /// Total variation between the exact model distribution and r^β / Z.
    pub exact_tv: f64,
    pub table: Vec<TerminalRow>,
}

pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// r^β / Σ r^β computed in log space.
pub fn tempered_target(rewards: &[f64], beta: f64) -> Vec<f64> {
    let logs: Vec<f64> = rewards.iter().map(|r| beta * r.ln()).collect();
    let m = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logs.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = w.iter().sum();
    w.into_iter().map(|x| x / z).collect()
}

/// Rewards of every terminal reachable in `env`, keyed by canonical key.
pub fn terminal_rewards(
    env: &FragEnv,
    pocket: &PocketContext,
    rewards: &mut dyn RewardSource,
    budget: usize,
) -> Result<BTreeMap<String, f64>> {
    let terminals = env.enumerate_terminals(budget)?;
    let mols: Vec<MolGraphState> = terminals.values().cloned().collect();
    let scored = rewards.rewards(env, pocket, &mols)?;
    Ok(terminals.into_keys().zip(scored.into_iter().map(|(_, r)| r)).collect())
}

/// Compares ε-free samples of the policy conditioned on (pocket, β) with the
/// exact tempered reward distribution over all terminals.
#[allow(clippy::too_many_arguments)]
pub fn verify_distribution<T: Scalar>(
    net: &PolicyNet,
    params: &ParamSet<T>,
    env: &FragEnv,
    pocket: &PocketContext,
    rewards: &mut dyn RewardSource,
    beta: f64,
    n_samples: usize,
    seed: u64,
    budget: usize,
    pool: &rayon::ThreadPool,
) -> Result<VerifyReport> {
    let target_rewards = terminal_rewards(env, pocket, rewards, budget)?;
    let cond = condition(&pocket.embedding, beta)?;
    let table = PolicyTable::build(net, params, env, &cond, budget, pool)?;
    verify_against(&table, env, &target_rewards, beta, n_samples, seed, pool)
}

pub fn verify_against(
    table: &PolicyTable,
    env: &FragEnv,
    target_rewards: &BTreeMap<String, f64>,
    beta: f64,
    n_samples: usize,
    seed: u64,
    pool: &rayon::ThreadPool,
) -> Result<VerifyReport> {
    if n_samples == 0 {
        return Err(Error::EmptyInput("samples"));
    }
    let keys: Vec<&String> = target_rewards.keys().collect();
    let r: Vec<f64> = target_rewards.values().copied().collect();
    let target = tempered_target(&r, beta);
    let samples: Vec<String> = pool.install(|| {
        (0..n_samples)
            .into_par_iter()
            .map(|i| {
                let mut rng = slot_rng(seed, u64::MAX - 1, i as u64);
                Ok(table.sample(env, &mut rng)?.canonical_key())
            })
            .collect::<Result<_>>()
    })?;
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for s in &samples {
        *counts.entry(s.as_str()).or_insert(0) += 1;
    }
    if let Some(k) = counts.keys().find(|k| !target_rewards.contains_key(**k)) {
        return Err(Error::InvalidMolecule(format!("sampled terminal {k} is not in the enumerated set")));
    }
    let exact = table.terminal_probabilities(env)?;
    let rows: Vec<TerminalRow> = keys
        .iter()
        .zip(&r)
        .zip(&target)
        .map(|((k, &reward), &t)| TerminalRow {
            key: (*k).clone(),
            reward,
            target: t,
            empirical: counts.get(k.as_str()).copied().unwrap_or(0) as f64 / n_samples as f64,
            model: exact.get(*k).copied().unwrap_or(0.0),
        })
        .collect();
    let emp: Vec<f64> = rows.iter().map(|row| row.empirical).collect();
    let model: Vec<f64> = rows.iter().map(|row| row.model).collect();
    Ok(VerifyReport {
        beta,
        n_samples,
        tv: total_variation(&emp, &target),
        exact_tv: total_variation(&model, &target),
        table: rows,
    })
}

/// Records of one pocket plus the context needed for its aggregate row.
#[derive(Clone, Debug)]
pub struct PocketResult {
    pub pocket_id: String,
    pub records: Vec<MoleculeRecord>,
    pub reference_ds: Option<f64>,
    pub wall_time_secs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Aggregate {
    pub pocket_id: String,
    pub n: usize,
    pub avg_ds: f64,
    pub median_ds: f64,
    pub high_affinity: Option<f64>,
    pub avg_qed: f64,
    pub avg_sa: f64,
    pub diversity: Option<f64>,
    pub success_rate: f64,
    pub wall_time_secs: f64,
}

pub fn aggregate(result: &PocketResult, t: &MetricThresholds) -> Aggregate {
    let rs = &result.records;
    let n = rs.len();
    let mean = |f: &dyn Fn(&MoleculeRecord) -> f64| if n == 0 { f64::NAN } else { rs.iter().map(f).sum::<f64>() / n as f64 };
    let ds: Vec<f64> = rs.iter().map(|r| r.triple.ds).collect();
    Aggregate {
        pocket_id: result.pocket_id.clone(),
        n,
        avg_ds: mean(&|r| r.triple.ds),
        median_ds: median(&ds),
        high_affinity: result.reference_ds.map(|d| high_affinity(rs, d)),
        avg_qed: mean(&|r| r.triple.qed),
        avg_sa: mean(&|r| normalize_sa(r.triple.sa_raw)),
        diversity: record_diversity(rs).ok(),
        success_rate: success_rate(rs, t),
        wall_time_secs: result.wall_time_secs,
    }
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(String::new, |v| format!("{v:.6}"))
}

/// Writes `records.csv`, `aggregate.csv` and `histogram.svg` into `dir`.
pub fn emit_report(results: &[PocketResult], t: &MetricThresholds, dir: &Path) -> Result<()> {
    if results.iter().all(|r| r.records.is_empty()) {
        return Err(Error::EmptyInput("report results"));
    }
    std::fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join("records.csv"))?;
    w.write_record(["pocket_id", "canonical_key", "ds", "qed", "sa_norm", "reward", "success"])?;
    for res in results {
        for r in &res.records {
            w.write_record([
                r.pocket_id.clone(),
                r.key.clone(),
                format!("{:.6}", r.triple.ds),
                format!("{:.6}", r.triple.qed),
                format!("{:.6}", normalize_sa(r.triple.sa_raw)),
                format!("{:.9e}", r.reward),
                passes(&r.triple, t).to_string(),
            ])?;
        }
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("aggregate.csv"))?;
    w.write_record([
        "pocket_id",
        "n",
        "avg_ds",
        "median_ds",
        "high_affinity",
        "avg_qed",
        "avg_sa",
        "diversity",
        "success_rate",
        "wall_time_secs",
    ])?;
    for res in results {
        let a = aggregate(res, t);
        w.write_record([
            a.pocket_id,
            a.n.to_string(),
            format!("{:.6}", a.avg_ds),
            format!("{:.6}", a.median_ds),
            fmt_opt(a.high_affinity),
            format!("{:.6}", a.avg_qed),
            format!("{:.6}", a.avg_sa),
            fmt_opt(a.diversity),
            format!("{:.6}", a.success_rate),
            format!("{:.3}", a.wall_time_secs),
        ])?;
    }
    w.flush()?;

    let all: Vec<&MoleculeRecord> = results.iter().flat_map(|r| &r.records).collect();
    let ds: Vec<f64> = all.iter().map(|r| r.triple.ds).collect();
    let rw: Vec<f64> = all.iter().map(|r| r.reward).collect();
    std::fs::write(dir.join("histogram.svg"), histogram_svg(&[("docking score", &ds), ("reward", &rw)], 20))?;
    Ok(())
}

/// Side-by-side bar histograms, one panel per series.
pub fn histogram_svg(series: &[(&str, &[f64])], bins: usize) -> String {
    let (pw, ph, pad) = (320.0, 200.0, 30.0);
    let width = series.len() as f64 * (pw + pad) + pad;
    let height = ph + 2.0 * pad;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#
    );
    for (p, (title, xs)) in series.iter().enumerate() {
        let x0 = pad + p as f64 * (pw + pad);
        let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut counts = vec![0usize; bins];
        if !xs.is_empty() {
            let span = if hi > lo { hi - lo } else { 1.0 };
            for &x in xs.iter() {
                let b = (((x - lo) / span) * bins as f64) as usize;
                counts[b.min(bins - 1)] += 1;
            }
        }
        let peak = counts.iter().copied().max().unwrap_or(0).max(1) as f64;
        let bw = pw / bins as f64;
        let _ = writeln!(svg, r#"<g><text x="{x0}" y="{}" font-size="12">{}</text>"#, pad - 8.0, escape(title));
        let _ = writeln!(
            svg,
            r##"<rect x="{x0}" y="{pad}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>"##
        );
        for (b, &c) in counts.iter().enumerate() {
            let h = ph * c as f64 / peak;
            let _ = writeln!(
                svg,
                r##"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="#4a7bb7"/>"##,
                x0 + b as f64 * bw,
                pad + ph - h,
                bw * 0.9,
                h
            );
        }
        if !xs.is_empty() {
            let _ = writeln!(svg, r#"<text x="{x0}" y="{}" font-size="10">{lo:.3}</text>"#, pad + ph + 14.0);
            let _ = writeln!(
                svg,
                r#"<text x="{}" y="{}" font-size="10" text-anchor="end">{hi:.3}</text>"#,
                x0 + pw,
                pad + ph + 14.0
            );
        }
        svg.push_str("</g>\n");
    }
    svg.push_str("</svg>\n");
    svg
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

pub fn write_records_jsonl(records: &[MoleculeRecord], path: &Path) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_records_jsonl(path: &Path) -> Result<Vec<MoleculeRecord>> {
    let text = crate::error::read_file(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Config(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fraggraph::FingerprintBit;

    fn fp(bits: &[(usize, u32)]) -> Fingerprint {
        Fingerprint(bits.iter().map(|&(b, c)| (FingerprintBit::Fragment(b), c)).collect())
    }

    fn rec(key: &str, ds: f64, qed: f64, sa_raw: f64, reward: f64) -> MoleculeRecord {
        MoleculeRecord {
            pocket_id: "p".into(),
            key: key.into(),
            molecule: MoleculeJson { nodes: vec![0], links: vec![], attachments: vec![], terminal: true },
            triple: ScoreTriple { ds, qed, sa_raw },
            reward,
        }
    }

    fn sa_for(norm: f64) -> f64 {
        10.0 - 9.0 * norm
    }

    #[test]
    fn diversity_examples() {
        assert_eq!(diversity(&[fp(&[(0, 1)]), fp(&[(0, 1)])]).unwrap(), 0.0);
        assert_eq!(diversity(&[fp(&[(0, 1)]), fp(&[(1, 2)])]).unwrap(), 1.0);
        assert!((diversity(&[fp(&[(0, 1)]), fp(&[(0, 1), (1, 1)])]).unwrap() - 0.5).abs() < 1e-12);
        assert!(diversity(&[fp(&[(0, 1)])]).is_err());
    }

    #[test]
    fn success_rate_examples() {
        let t = MetricThresholds::default();
        assert_eq!(success_rate(&[rec("a", -9.0, 0.3, sa_for(0.6), 1.0)], &t), 1.0);
        assert_eq!(success_rate(&[rec("a", -8.0, 0.3, sa_for(0.6), 1.0)], &t), 0.0);
        assert_eq!(success_rate(&[], &t), 0.0);
    }

    #[test]
    fn high_affinity_examples() {
        let rs = [rec("a", -9.0, 0.5, 3.0, 1.0), rec("b", -7.0, 0.5, 3.0, 1.0), rec("c", -8.5, 0.5, 3.0, 1.0), rec("d", -8.0, 0.5, 3.0, 1.0)];
        assert_eq!(high_affinity(&rs[..1], -9.0), 0.0);
        assert_eq!(high_affinity(&rs[..1], -8.0), 1.0);
        assert_eq!(high_affinity(&rs, -8.0), 0.5);
    }

    #[test]
    fn topk_examples() {
        let rs = [rec("a", -1.0, 0.1, 3.0, 0.1), rec("b", -2.0, 0.2, 3.0, 0.2), rec("c", -3.0, 0.3, 3.0, 0.3)];
        let s = topk_stats(&rs, 2).unwrap();
        assert!((s.mean_reward - 0.25).abs() < 1e-12);
        assert!((s.mean_ds + 2.5).abs() < 1e-12);
        assert_eq!(topk_stats(&rs, 1).unwrap().mean_qed, 0.3);
        assert_eq!(topk_stats(&rs, 10).unwrap().k, 3);
    }

    #[test]
    fn tempered_target_sums_to_one() {
        let t = tempered_target(&[1.0, 3.0], 1.0);
        assert!((t[0] - 0.25).abs() < 1e-12 && (t[1] - 0.75).abs() < 1e-12);
        let t = tempered_target(&[1e-6, 0.5, 0.9], 64.0);
        assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
