//! Multi-objective reward: affinity × drug-likeness × synthesizability.

use serde::{Deserialize, Serialize};

use crate::chem::Feature;
use crate::error::{out_of_range, Error, Result};
use crate::fraggraph::{FragmentVocabulary, MolGraphState};
use crate::oracle::{OracleClient, OracleConfig};
use crate::pocket::PocketStructure;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardSpec {
    pub t_qed: f64,
    pub t_sa: f64,
    pub t_ds: f64,
    pub ds_shortfall_scale: f64,
    pub reward_floor: f64,
}

impl Default for RewardSpec {
    fn default() -> Self {
        RewardSpec { t_qed: 0.7, t_sa: 0.8, t_ds: -8.0, ds_shortfall_scale: 0.2, reward_floor: 1e-6 }
    }
}

impl RewardSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.t_qed > 0.0 && self.t_qed <= 1.0) {
            return Err(out_of_range("t_qed", self.t_qed));
        }
        if !(self.t_sa > 0.0 && self.t_sa <= 1.0) {
            return Err(out_of_range("t_sa", self.t_sa));
        }
        if !(self.t_ds < 0.0) {
            return Err(out_of_range("t_ds", self.t_ds));
        }
        if !(self.reward_floor > 0.0) {
            return Err(out_of_range("reward_floor", self.reward_floor));
        }
        Ok(())
    }
}

/// Raw scores: docking score (kcal/mol, lower is better), QED in [0, 1], raw SA in [1, 10].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreTriple {
    pub ds: f64,
    pub qed: f64,
    #[serde(rename = "sa")]
    pub sa_raw: f64,
}

impl ScoreTriple {
    pub fn validate(&self) -> Result<()> {
        if !self.ds.is_finite() {
            return Err(out_of_range("ds", self.ds));
        }
        if !(0.0..=1.0).contains(&self.qed) {
            return Err(out_of_range("qed", self.qed));
        }
        if !(1.0..=10.0).contains(&self.sa_raw) {
            return Err(out_of_range("sa", self.sa_raw));
        }
        Ok(())
    }

    pub fn sa_norm(&self) -> f64 {
        normalize_sa(self.sa_raw)
    }
}

pub fn normalize_sa(sa_raw: f64) -> f64 {
    (10.0 - sa_raw) / 9.0
}

pub fn r_qed(qed: f64, t_qed: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&qed) {
        return Err(out_of_range("qed", qed));
    }
    Ok((qed / t_qed).min(1.0))
}

pub fn r_sa(sa_raw: f64, t_sa: f64) -> Result<f64> {
    if !(1.0..=10.0).contains(&sa_raw) {
        return Err(out_of_range("sa", sa_raw));
    }
    Ok((normalize_sa(sa_raw) / t_sa).min(1.0))
}

/// Affinity reward with the default shortfall scale of 0.2.
pub fn r_ds(ds: f64, t_ds: f64, hac: usize) -> Result<f64> {
    r_ds_scaled(ds, t_ds, 0.2, hac)
}

/// `-((ds - t_ds) + scale * max(ds, t_ds)) / cbrt(hac)`, clamped below at 0.
pub fn r_ds_scaled(ds: f64, t_ds: f64, scale: f64, hac: usize) -> Result<f64> {
    if hac < 1 {
        return Err(out_of_range("heavy atom count", hac as f64));
    }
    if !ds.is_finite() {
        return Err(out_of_range("ds", ds));
    }
    let raw = -((ds - t_ds) + scale * ds.max(t_ds)) / (hac as f64).cbrt();
    Ok(raw.max(0.0))
}

/// Product of the three component rewards, floored at `spec.reward_floor`.
pub fn compose(triple: &ScoreTriple, spec: &RewardSpec, hac: usize) -> Result<f64> {
    triple.validate()?;
    let r = r_ds_scaled(triple.ds, spec.t_ds, spec.ds_shortfall_scale, hac)?
        * r_qed(triple.qed, spec.t_qed)?
        * r_sa(triple.sa_raw, spec.t_sa)?;
    Ok(r.max(spec.reward_floor))
}

/// `beta * ln r`, never exponentiated.
pub fn log_tempered_reward(r: f64, beta: f64) -> Result<f64> {
    if !(r > 0.0) || !r.is_finite() {
        return Err(out_of_range("reward", r));
    }
    Ok(beta * r.ln())
}

/// Count of each feature over all ligand atoms (multiset counts).
pub fn ligand_feature_counts(state: &MolGraphState, vocab: &FragmentVocabulary) -> [usize; 5] {
    let mut c = [0; 5];
    for &f in state.nodes() {
        for atom in &vocab.get(f).atoms {
            for feat in &atom.features {
                c[feat.index()] += 1;
            }
        }
    }
    c
}

/// Deterministic desk-scale stand-ins for docking, QED and SA.
///
/// DS = clamp(-2 Σ_t min(n_L(t), n_P(t)) + 0.05 HAC, -16, 0);
/// QED = exp(-((HAC - 23) / 10)²);
/// SA = clamp(1 + 0.4 · distinct fragment ids + 0.2 · links, 1, 10).
pub fn synthetic_scores(state: &MolGraphState, vocab: &FragmentVocabulary, pocket: &PocketStructure) -> Result<ScoreTriple> {
    if !state.is_terminal() {
        return Err(Error::NotTerminal);
    }
    let hac = state.heavy_atom_count(vocab)? as f64;
    let lig = ligand_feature_counts(state, vocab);
    let pha = pocket.pharmacophore_counts();
    let overlap: usize = Feature::ALL.iter().map(|f| lig[f.index()].min(pha[f.index()])).sum();
    let ds = (-2.0 * overlap as f64 + 0.05 * hac).clamp(-16.0, 0.0);
    let qed = (-((hac - 23.0) / 10.0).powi(2)).exp();
    let mut ids = state.nodes().to_vec();
    ids.sort_unstable();
    ids.dedup();
    let sa_raw = (1.0 + 0.4 * ids.len() as f64 + 0.2 * state.links().len() as f64).clamp(1.0, 10.0);
    Ok(ScoreTriple { ds, qed, sa_raw })
}

/// How molecules are scored, as written in run configurations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScorerBinding {
    Synthetic,
    /// External scoring process; `command` empty means "use FLOWGEN_ORACLE_CMD".
    Oracle {
        #[serde(default)]
        command: Vec<String>,
        #[serde(default = "default_timeout")]
        timeout_secs: f64,
    },
    /// Learned docking-score predictor for DS, synthetic QED/SA.
    Proxy { checkpoint: std::path::PathBuf },
}

fn default_timeout() -> f64 {
    120.0
}

impl Default for ScorerBinding {
    fn default() -> Self {
        ScorerBinding::Synthetic
    }
}

/// A live scorer.
pub enum Scorer {
    Synthetic,
    Oracle(OracleClient),
    Proxy(Box<crate::proxy::ProxyModel>),
}

pub const ORACLE_ENV: &str = "FLOWGEN_ORACLE_CMD";

impl Scorer {
    pub fn from_binding(binding: &ScorerBinding) -> Result<Scorer> {
        match binding {
            ScorerBinding::Synthetic => Ok(Scorer::Synthetic),
            ScorerBinding::Oracle { command, timeout_secs } => {
                let command = if command.is_empty() {
                    let env = std::env::var(ORACLE_ENV)
                        .map_err(|_| Error::Config(format!("oracle scorer needs a command or {ORACLE_ENV}")))?;
                    env.split_whitespace().map(str::to_string).collect()
                } else {
                    command.clone()
                };
                let cfg = OracleConfig { command, timeout: std::time::Duration::from_secs_f64(*timeout_secs) };
                Ok(Scorer::Oracle(OracleClient::spawn(&cfg)?))
            }
            ScorerBinding::Proxy { checkpoint } => Ok(Scorer::Proxy(Box::new(crate::proxy::ProxyModel::load(checkpoint)?))),
        }
    }

    /// Scores terminal molecules against one pocket, in input order.
    pub fn score(&mut self, vocab: &FragmentVocabulary, pocket: &PocketStructure, mols: &[MolGraphState]) -> Result<Vec<ScoreTriple>> {
        match self {
            Scorer::Synthetic => mols.iter().map(|m| synthetic_scores(m, vocab, pocket)).collect(),
            Scorer::Oracle(client) => {
                let batch: Vec<(String, crate::fraggraph::MoleculeJson)> =
                    mols.iter().map(|m| (pocket.id.clone(), m.to_record())).collect();
                let triples = client.score(&batch)?;
                for t in &triples {
                    t.validate()?;
                }
                Ok(triples)
            }
            Scorer::Proxy(model) => mols
                .iter()
                .map(|m| {
                    let syn = synthetic_scores(m, vocab, pocket)?;
                    let ds = model.predict_state(pocket, m, vocab)?;
                    Ok(ScoreTriple { ds, ..syn })
                })
                .collect(),
        }
    }
}

/// Scores plus composed reward for one molecule.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Scored {
    pub triple: ScoreTriple,
    pub reward: f64,
}

pub fn score_and_reward(
    scorer: &mut Scorer,
    spec: &RewardSpec,
    vocab: &FragmentVocabulary,
    pocket: &PocketStructure,
    mols: &[MolGraphState],
) -> Result<Vec<Scored>> {
    let triples = scorer.score(vocab, pocket, mols)?;
    triples
        .into_iter()
        .zip(mols)
        .map(|(triple, m)| Ok(Scored { triple, reward: compose(&triple, spec, m.heavy_atom_count(vocab)?)? }))
        .collect()
}
