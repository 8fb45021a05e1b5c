//! Docking-score predictor built on a pharmacophore–ligand interaction map.
//!
//! E = φ_z(concat(z^P, z^𝕡, z^L)) + Σ_{i,j} φ_I(ĥ^𝕡_i ⊙ h^L_j)

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::BufRead;
use std::path::Path;

use flowgen_nn::checkpoint::{load_params, save_params};
use flowgen_nn::{
    Activation, Embedding, Graph, Init, LayerNorm, Linear, Mlp, OptimizerHyper, OptimizerKind, OptimizerState,
    ParamSet, Scalar, Tensor, Var,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::chem::{element_slot, Atom, Feature, ELEMENTS};
use crate::error::{Error, Result};
use crate::fraggraph::{FragmentVocabulary, MolGraphState, MoleculeJson};
use crate::pocket::{self, PharmacophorePoint, PocketStructure};

pub const ATOM_FEATURES: usize = ELEMENTS.len() + 1 + Feature::ALL.len();
const GIN_ROUNDS: usize = 3;

/// Atom-level graph of a finished molecule: fragment atoms plus one single
/// bond per fragment link, between the chosen attachment atoms.
#[derive(Clone, Debug, PartialEq)]
pub struct LigandAtomGraph {
    pub atoms: Vec<Atom>,
    pub bonds: Vec<(usize, usize, u8)>,
}

impl LigandAtomGraph {
    pub fn from_state(state: &MolGraphState, vocab: &FragmentVocabulary) -> Result<Self> {
        if !state.is_terminal() {
            return Err(Error::NotTerminal);
        }
        let mut atoms = Vec::new();
        let mut bonds = Vec::new();
        let mut offsets = Vec::with_capacity(state.num_nodes());
        for &f in state.nodes() {
            let frag = vocab.get(f);
            let off = atoms.len();
            offsets.push(off);
            atoms.extend(frag.atoms.iter().cloned());
            bonds.extend(frag.bonds.iter().map(|b| (b.i + off, b.j + off, b.order)));
        }
        for l in state.links() {
            let (sa, sb) = (l.slot_a.expect("terminal"), l.slot_b.expect("terminal"));
            let ia = offsets[l.a] + vocab.get(state.nodes()[l.a]).attachment_atoms[sa];
            let ib = offsets[l.b] + vocab.get(state.nodes()[l.b]).attachment_atoms[sb];
            bonds.push((ia, ib, 1));
        }
        Ok(LigandAtomGraph { atoms, bonds })
    }

    pub fn features(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.atoms.len() * ATOM_FEATURES];
        for (i, a) in self.atoms.iter().enumerate() {
            let row = &mut out[i * ATOM_FEATURES..(i + 1) * ATOM_FEATURES];
            row[element_slot(&a.element)] = 1.0;
            for f in &a.features {
                row[ELEMENTS.len() + 1 + f.index()] += 1.0;
            }
        }
        out
    }

    /// Both directions of every bond as (source, destination) lists.
    fn directed(&self) -> (Vec<usize>, Vec<usize>) {
        let mut src = Vec::with_capacity(2 * self.bonds.len());
        let mut dst = Vec::with_capacity(2 * self.bonds.len());
        for &(i, j, _) in &self.bonds {
            src.extend([i, j]);
            dst.extend([j, i]);
        }
        (src, dst)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProxyConfig {
    pub width: usize,
    pub interaction_hidden: usize,
}

impl Default for ProxyConfig {
    fn default() -> Self {
        ProxyConfig { width: 128, interaction_hidden: 64 }
    }
}

struct GinRound {
    mlp: Mlp,
    norm: LayerNorm,
}

/// Parameter layout of the predictor.
pub struct ProxyNet {
    pub width: usize,
    atom_in: Linear,
    gin: Vec<GinRound>,
    type_emb: Embedding,
    pair_score: Mlp,
    pair_value: Linear,
    type_value: Linear,
    pocket_proj: Linear,
    pub phi_i: Mlp,
    phi_z: Mlp,
}

impl ProxyNet {
    pub fn declare<T: Scalar, R: Rng>(params: &mut ParamSet<T>, cfg: &ProxyConfig, init: &mut Init<'_, R>) -> Result<Self> {
        let d = cfg.width;
        let rbf = pocket::RBF_CENTERS;
        Ok(ProxyNet {
            width: d,
            atom_in: Linear::declare(params, "proxy.atom_in", ATOM_FEATURES, d, init)?,
            gin: (0..GIN_ROUNDS)
                .map(|r| {
                    Ok(GinRound {
                        mlp: Mlp::declare(params, &format!("proxy.gin{r}"), &[d, d, d], Activation::Relu, init)?,
                        norm: LayerNorm::declare(params, &format!("proxy.gin{r}.norm"), d)?,
                    })
                })
                .collect::<Result<_>>()?,
            type_emb: Embedding::declare(params, "proxy.pharm_type", Feature::ALL.len(), d, init)?,
            pair_score: Mlp::declare(params, "proxy.pair_score", &[rbf, 32, 1], Activation::Relu, init)?,
            pair_value: Linear::declare(params, "proxy.pair_value", rbf, d, init)?,
            type_value: Linear::declare(params, "proxy.type_value", d, d, init)?,
            pocket_proj: Linear::declare(params, "proxy.pocket_proj", d, d, init)?,
            phi_i: Mlp::declare(params, "proxy.phi_i", &[d, cfg.interaction_hidden, 1], Activation::Relu, init)?,
            phi_z: Mlp::declare(params, "proxy.phi_z", &[3 * d, d, 1], Activation::Relu, init)?,
        })
    }

    pub fn layout(cfg: &ProxyConfig) -> Self {
        let mut scratch = ParamSet::<f32>::new();
        Self::declare::<f32, rand::rngs::mock::StepRng>(&mut scratch, cfg, &mut Init::Zeros).expect("fresh set")
    }

    /// Per-atom embeddings [atoms, d] and the mean-pooled z^L [1, d].
    pub fn encode_ligand<T: Scalar>(&self, g: &mut Graph<'_, T>, lig: &LigandAtomGraph) -> Result<(Var, Var)> {
        let n = lig.atoms.len();
        if n == 0 {
            return Err(Error::EmptyInput("ligand atoms"));
        }
        let x = Tensor::new(vec![n, ATOM_FEATURES], lig.features().into_iter().map(T::lit).collect())?;
        let x = g.input(x);
        let mut h = self.atom_in.forward(g, x)?;
        let (src, dst) = lig.directed();
        for round in &self.gin {
            let mut sum = h;
            if !src.is_empty() {
                let msgs = g.gather_rows(h, &src)?;
                let agg = g.scatter_add_rows(msgs, &dst, n)?;
                sum = g.add(h, agg)?;
            }
            let upd = round.mlp.forward(g, sum)?;
            h = round.norm.forward(g, upd)?;
        }
        let z = g.mean_rows(h)?;
        Ok((h, z))
    }

    /// Point embeddings ĥ [points, d], z^𝕡 and z^P (each [1, d]).
    pub fn embed_pharmacophores<T: Scalar>(&self, g: &mut Graph<'_, T>, points: &[PharmacophorePoint]) -> Result<(Var, Var, Var)> {
        let n = points.len();
        if n == 0 {
            return Err(Error::EmptyInput("pharmacophore points"));
        }
        let types: Vec<usize> = points.iter().map(|p| p.kind.index()).collect();
        let te = self.type_emb.forward(g, &types)?;
        let mut rbf = Vec::with_capacity(n * n * pocket::RBF_CENTERS);
        let (mut src, mut dst) = (Vec::with_capacity(n * n), Vec::with_capacity(n * n));
        for i in 0..n {
            for j in 0..n {
                rbf.extend(pocket::rbf(pocket::distance(points[i].center, points[j].center)).into_iter().map(T::lit));
                src.push(j);
                dst.push(i);
            }
        }
        let r = g.input(Tensor::new(vec![n * n, pocket::RBF_CENTERS], rbf)?);
        let scores = self.pair_score.forward(g, r)?;
        let scores = g.reshape(scores, n, n)?;
        let alpha = g.softmax(scores);
        let alpha = g.reshape(alpha, n * n, 1)?;
        let ones = g.input(Tensor::full(&[1, self.width], T::one()));
        let weights = g.matmul(alpha, ones)?;
        let tv = self.type_value.forward(g, te)?;
        let tv = g.gather_rows(tv, &src)?;
        let rv = self.pair_value.forward(g, r)?;
        let values = g.add(tv, rv)?;
        let weighted = g.mul(weights, values)?;
        let msg = g.scatter_add_rows(weighted, &dst, n)?;
        let h = g.add(te, msg)?;
        let z_points = g.mean_rows(h)?;
        let proj = self.pocket_proj.forward(g, h)?;
        let proj = g.relu(proj);
        let z_pocket = g.mean_rows(proj)?;
        Ok((h, z_points, z_pocket))
    }

    pub fn interaction_sum<T: Scalar>(&self, g: &mut Graph<'_, T>, hp: Var, hl: Var) -> Result<Var> {
        interaction_pool(g, &self.phi_i, hp, hl)
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, points: &[PharmacophorePoint], lig: &LigandAtomGraph) -> Result<Var> {
        let (hl, zl) = self.encode_ligand(g, lig)?;
        let (hp, zp, zpocket) = self.embed_pharmacophores(g, points)?;
        let cat = g.concat(&[zpocket, zp, zl], 1)?;
        let global = self.phi_z.forward(g, cat)?;
        let inter = self.interaction_sum(g, hp, hl)?;
        Ok(g.add(global, inter)?)
    }
}

/// Σ over all (point, atom) pairs of φ_I(ĥ_i ⊙ h_j).
pub fn interaction_pool<T: Scalar>(g: &mut Graph<'_, T>, phi: &Mlp, hp: Var, hl: Var) -> Result<Var> {
    let (p, a) = (g.value(hp).rows(), g.value(hl).rows());
    let pi: Vec<usize> = (0..p).flat_map(|i| std::iter::repeat(i).take(a)).collect();
    let aj: Vec<usize> = (0..p).flat_map(|_| 0..a).collect();
    let left = g.gather_rows(hp, &pi)?;
    let right = g.gather_rows(hl, &aj)?;
    let pairs = g.mul(left, right)?;
    let e = phi.forward(g, pairs)?;
    Ok(g.sum_all(e))
}

/// Explicit interaction map I[i][j] = ĥ_i ⊙ h_j as nested vectors (points × atoms × width).
pub fn interaction_map<T: Scalar>(hp: &Tensor<T>, hl: &Tensor<T>) -> Result<Vec<Vec<Vec<T>>>> {
    if hp.cols() != hl.cols() {
        return Err(flowgen_nn::NnError::ShapeMismatch {
            op: "interaction_map",
            shapes: vec![hp.shape().to_vec(), hl.shape().to_vec()],
        }
        .into());
    }
    Ok((0..hp.rows())
        .map(|i| {
            (0..hl.rows())
                .map(|j| hp.row_slice(i).iter().zip(hl.row_slice(j)).map(|(&x, &y)| x * y).collect())
                .collect()
        })
        .collect())
}

pub fn smooth_l1(pred: f64, target: f64) -> f64 {
    let d = pred - target;
    if d.abs() < 1.0 {
        0.5 * d * d
    } else {
        d.abs() - 0.5
    }
}

/// Smooth-L1 on the tape; `pred` is [1, 1].
fn smooth_l1_var<T: Scalar>(g: &mut Graph<'_, T>, pred: Var, target: f64) -> Var {
    let d = g.add_scalar(pred, -target);
    let dv = g.value(d).item().as_f64();
    if dv.abs() < 1.0 {
        let sq = g.mul(d, d).expect("same shape");
        g.scale(sq, 0.5)
    } else {
        let s = g.scale(d, dv.signum());
        g.add_scalar(s, -0.5)
    }
}

/// Trained predictor: configuration plus parameters.
pub struct ProxyModel {
    pub config: ProxyConfig,
    pub params: ParamSet<f32>,
    net: ProxyNet,
}

const PROXY_STEM: &str = "proxy";

impl ProxyModel {
    pub fn new(config: ProxyConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let net = ProxyNet::declare(&mut params, &config, &mut Init::Random(&mut rng))?;
        Ok(ProxyModel { config, params, net })
    }

    pub fn zeros(config: ProxyConfig) -> Result<Self> {
        let mut params = ParamSet::new();
        let net = ProxyNet::declare::<f32, rand::rngs::mock::StepRng>(&mut params, &config, &mut Init::Zeros)?;
        Ok(ProxyModel { config, params, net })
    }

    pub fn net(&self) -> &ProxyNet {
        &self.net
    }

    pub fn predict(&self, pocket: &PocketStructure, lig: &LigandAtomGraph) -> Result<f64> {
        if pocket.pharmacophores.is_empty() {
            return Err(Error::Pocket { context: pocket.id.clone(), message: "no pharmacophore points".into() });
        }
        let mut g = Graph::new(&self.params);
        let e = self.net.forward(&mut g, &pocket.pharmacophores, lig)?;
        Ok(f64::from(g.value(e).item()))
    }

    pub fn predict_state(&self, pocket: &PocketStructure, state: &MolGraphState, vocab: &FragmentVocabulary) -> Result<f64> {
        self.predict(pocket, &LigandAtomGraph::from_state(state, vocab)?)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        save_params(&self.params, dir, PROXY_STEM)?;
        std::fs::write(dir.join("proxy_config.json"), serde_json::to_string_pretty(&self.config)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let config: ProxyConfig = serde_json::from_str(&crate::error::read_file(&dir.join("proxy_config.json"))?)?;
        let mut model = ProxyModel::zeros(config)?;
        let params = load_params(dir, PROXY_STEM)?;
        model.params.check_compatible(&params)?;
        model.params = params;
        Ok(model)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DockingRecord {
    pub pocket_id: String,
    pub molecule: MoleculeJson,
    pub ds: f64,
}

pub fn read_docking_records(path: &Path) -> Result<Vec<DockingRecord>> {
    let file = std::fs::File::open(path).map_err(|source| Error::File { path: path.display().to_string(), source })?;
    let mut out = Vec::new();
    for (lineno, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: DockingRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Config(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        if !r.ds.is_finite() {
            return Err(Error::NonFinite("docking record ds"));
        }
        out.push(r);
    }
    Ok(out)
}

pub fn write_docking_records(records: &[DockingRecord], path: &Path) -> Result<()> {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r)?);
        s.push('\n');
    }
    std::fs::write(path, s)?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProxyTrainConfig {
    pub model: ProxyConfig,
    pub iterations: usize,
    /// Records per iteration.
    pub batch_size: usize,
    /// Distinct pockets drawn per iteration (records are drawn from those pockets).
    pub pockets_per_batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub lr_decay_every: usize,
    pub lr_decay_factor: f64,
    pub validation_fraction: f64,
    pub eval_every: usize,
    /// Return the lowest-validation-loss parameters rather than the last ones.
    pub select_best: bool,
    pub seed: u64,
}

impl Default for ProxyTrainConfig {
    fn default() -> Self {
        ProxyTrainConfig {
            model: ProxyConfig::default(),
            iterations: 20_000,
            batch_size: 128,
            pockets_per_batch: 32,
            lr: 1e-4,
            weight_decay: 0.05,
            lr_decay_every: 20_000,
            lr_decay_factor: 0.1,
            validation_fraction: 0.15,
            eval_every: 100,
            select_best: true,
            seed: 0,
        }
    }
}

struct Sample {
    pocket: usize,
    ligand: LigandAtomGraph,
    target: f64,
}

pub struct ProxyTrainReport {
    pub model: ProxyModel,
    pub train_pockets: Vec<String>,
    pub validation_pockets: Vec<String>,
    pub losses: Vec<f64>,
    pub best_validation_loss: f64,
    pub best_iteration: usize,
}

/// Splits pocket ids so that `fraction` of pockets (at least one, at most all
/// but one) go to validation. Deterministic given the seed.
pub fn split_pockets(ids: &BTreeSet<String>, fraction: f64, seed: u64) -> Result<(Vec<String>, Vec<String>)> {
    let mut all: Vec<String> = ids.iter().cloned().collect();
    if all.len() < 2 {
        return Err(Error::EmptyInput("pocket-disjoint split needs at least 2 pockets"));
    }
    all.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5917));
    let n_val = ((fraction * all.len() as f64).round() as usize).clamp(1, all.len() - 1);
    let val = all.split_off(all.len() - n_val);
    Ok((all, val))
}

fn prepare(records: &[DockingRecord], pockets: &HashMap<&str, usize>, vocab: &FragmentVocabulary) -> Result<Vec<Sample>> {
    records
        .iter()
        .map(|r| {
            let mut rec = r.molecule.clone();
            rec.terminal = true;
            let state = MolGraphState::from_record(&rec, vocab)?;
            let pocket = *pockets
                .get(r.pocket_id.as_str())
                .ok_or_else(|| Error::Config(format!("docking record refers to unknown pocket {}", r.pocket_id)))?;
            Ok(Sample { pocket, ligand: LigandAtomGraph::from_state(&state, vocab)?, target: r.ds })
        })
        .collect()
}

fn mean_loss(model: &ProxyModel, samples: &[Sample], pockets: &[PocketStructure]) -> Result<f64> {
    let mut total = 0.0;
    for s in samples {
        total += smooth_l1(model.predict(&pockets[s.pocket], &s.ligand)?, s.target);
    }
    Ok(total / samples.len() as f64)
}

/// Root-mean-square error of the model over records.
pub fn rmse(model: &ProxyModel, records: &[DockingRecord], pockets: &[PocketStructure], vocab: &FragmentVocabulary) -> Result<f64> {
    let index: HashMap<&str, usize> = pockets.iter().enumerate().map(|(i, p)| (p.id.as_str(), i)).collect();
    let samples = prepare(records, &index, vocab)?;
    if samples.is_empty() {
        return Err(Error::EmptyInput("records"));
    }
    let mut se = 0.0;
    for s in &samples {
        se += (model.predict(&pockets[s.pocket], &s.ligand)? - s.target).powi(2);
    }
    Ok((se / samples.len() as f64).sqrt())
}

/// Minibatch AdamW on smooth-L1 with step-wise learning-rate decay; returns
/// the parameters with the lowest validation loss seen.
pub fn train_proxy(
    records: &[DockingRecord],
    pockets: &[PocketStructure],
    vocab: &FragmentVocabulary,
    cfg: &ProxyTrainConfig,
) -> Result<ProxyTrainReport> {
    let index: HashMap<&str, usize> = pockets.iter().enumerate().map(|(i, p)| (p.id.as_str(), i)).collect();
    let ids: BTreeSet<String> = records.iter().map(|r| r.pocket_id.clone()).collect();
    let (train_ids, val_ids) = split_pockets(&ids, cfg.validation_fraction, cfg.seed)?;
    let val_set: BTreeSet<&str> = val_ids.iter().map(String::as_str).collect();
    let (val_recs, train_recs): (Vec<DockingRecord>, Vec<DockingRecord>) =
        records.iter().cloned().partition(|r| val_set.contains(r.pocket_id.as_str()));
    if train_recs.is_empty() || val_recs.is_empty() {
        return Err(Error::EmptyInput("train or validation split"));
    }
    assert!(train_recs.iter().all(|r| !val_set.contains(r.pocket_id.as_str())));
    let train = prepare(&train_recs, &index, vocab)?;
    let val = prepare(&val_recs, &index, vocab)?;
    let mut by_pocket: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (k, s) in train.iter().enumerate() {
        by_pocket.entry(s.pocket).or_default().push(k);
    }
    let pocket_keys: Vec<usize> = by_pocket.keys().copied().collect();

    let mut model = ProxyModel::new(cfg.model, cfg.seed)?;
    let hyper = OptimizerHyper { lr: cfg.lr, weight_decay: cfg.weight_decay, ..OptimizerHyper::default() };
    let mut opt = OptimizerState::new(OptimizerKind::AdamW, hyper, &model.params, |_| true);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut best = (mean_loss(&model, &val, pockets)?, 0usize, model.params.clone());
    let mut losses = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        opt.hyper.lr = cfg.lr * cfg.lr_decay_factor.powi((it / cfg.lr_decay_every.max(1)) as i32);
        let chosen: Vec<usize> = pocket_keys
            .choose_multiple(&mut rng, cfg.pockets_per_batch.max(1).min(pocket_keys.len()))
            .copied()
            .collect();
        let batch: Vec<usize> = (0..cfg.batch_size.max(1))
            .map(|_| {
                let p = chosen[rng.gen_range(0..chosen.len())];
                let members = &by_pocket[&p];
                members[rng.gen_range(0..members.len())]
            })
            .collect();
        let mut grads = model.params.zeros_like();
        let mut total = 0.0;
        for &k in &batch {
            let s = &train[k];
            let mut g = Graph::new(&model.params);
            let pred = model.net.forward(&mut g, &pockets[s.pocket].pharmacophores, &s.ligand)?;
            let loss = smooth_l1_var(&mut g, pred, s.target);
            total += f64::from(g.value(loss).item());
            grads.accumulate(&g.backward(loss)?)?;
        }
        grads.scale(1.0 / batch.len() as f32);
        opt.step(&mut model.params, &grads)?;
        losses.push(total / batch.len() as f64);
        if (it + 1) % cfg.eval_every.max(1) == 0 || it + 1 == cfg.iterations {
            let v = mean_loss(&model, &val, pockets)?;
            if v < best.0 {
                best = (v, it + 1, model.params.clone());
            }
        }
    }
    if cfg.select_best {
        model.params = best.2;
    }
    Ok(ProxyTrainReport {
        model,
        train_pockets: train_ids,
        validation_pockets: val_ids,
        losses,
        best_validation_loss: best.0,
        best_iteration: best.1,
    })
}
