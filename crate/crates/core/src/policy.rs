//! Pocket- and temperature-conditioned graph transformer over fragment graphs.
//!
//! Nodes carry fragment embeddings, directed edges carry attachment-slot
//! embeddings, and a virtual node built from the condition vector attends to
//! every node. Heads: per-node addition logits (a ROOT row from the virtual
//! node on the empty state), per-unset-edge attachment logits, a stop logit
//! from concat(mean of nodes, virtual node), and a separate log Z head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use flowgen_nn::{Activation, Embedding, Graph, Init, LayerNorm, Linear, Mlp, ParamSet, Scalar, Tensor, Var};

use crate::error::{out_of_range, Error, Result};
use crate::fraggraph::{FragEnv, FragmentVocabulary, GraphAction, MolGraphState};
use crate::pocket::{PocketEmbedding, EMBED_DIM};

pub const BETA_BINS: usize = 32;
pub const BETA_MAX: f64 = 64.0;
pub const COND_DIM: usize = EMBED_DIM + BETA_BINS;
pub const LOGZ_PREFIX: &str = "logz.";

/// Pocket embedding followed by a thermometer encoding of β.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionVector(pub Vec<f64>);

impl ConditionVector {
    pub fn beta_bins(&self) -> &[f64] {
        &self.0[EMBED_DIM..]
    }
}

/// Bin k (1-based) is active iff β ≥ 64·k/32.
pub fn thermometer(beta: f64) -> Result<Vec<f64>> {
    if !(0.0..=BETA_MAX).contains(&beta) {
        return Err(out_of_range("beta", beta));
    }
    Ok((1..=BETA_BINS).map(|k| if beta >= BETA_MAX * k as f64 / BETA_BINS as f64 { 1.0 } else { 0.0 }).collect())
}

pub fn condition(pocket: &PocketEmbedding, beta: f64) -> Result<ConditionVector> {
    if pocket.0.len() != EMBED_DIM {
        return Err(out_of_range("pocket embedding length", pocket.0.len() as f64));
    }
    let mut v: Vec<f64> = pocket.0.iter().map(|&x| f64::from(x)).collect();
    v.extend(thermometer(beta)?);
    Ok(ConditionVector(v))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig { hidden: 256, layers: 2, heads: 8 }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.layers == 0 || self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "policy hidden ({}) must be a positive multiple of heads ({}), layers ≥ 1",
                self.hidden, self.heads
            )));
        }
        Ok(())
    }
}

struct Block {
    ln_attn: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    msg: Linear,
    ln_ffn: LayerNorm,
    ffn: Mlp,
    edge: Mlp,
}

/// Parameter layout; the tensors live in a `ParamSet` so online and target
/// copies share one layout.
pub struct PolicyNet {
    pub config: PolicyConfig,
    pub vocab_size: usize,
    pub max_slots: usize,
    frag_emb: Embedding,
    edge_emb: Embedding,
    virtual_in: Linear,
    blocks: Vec<Block>,
    add_head: Mlp,
    root_head: Mlp,
    att_head: Mlp,
    stop_head: Mlp,
    logz_head: Mlp,
}

/// Logits as plain numbers, shaped by the state.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionLogits {
    /// One row per node (a single ROOT row on the empty state), V entries each.
    pub addition: Vec<Vec<f64>>,
    /// One row per unset directed edge, one entry per free slot of the source fragment.
    pub attachment: Vec<Vec<f64>>,
    pub stop: f64,
}

/// Tape handles produced by one forward pass.
pub struct PolicyOutput {
    /// [rows, V]
    pub addition: Var,
    /// [unset edges, max_slots], absent when no edge is unset.
    pub attachment: Option<Var>,
    /// [1, 1]
    pub stop: Var,
}

impl PolicyNet {
    pub fn declare<T: Scalar, R: Rng>(
        params: &mut ParamSet<T>,
        config: PolicyConfig,
        vocab: &FragmentVocabulary,
        init: &mut Init<'_, R>,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.hidden;
        let v = vocab.len();
        let s = vocab.max_slots();
        let blocks = (0..config.layers)
            .map(|l| {
                let p = format!("policy.block{l}");
                Ok(Block {
                    ln_attn: LayerNorm::declare(params, &format!("{p}.ln_attn"), d)?,
                    q: Linear::declare(params, &format!("{p}.q"), d, d, init)?,
                    k: Linear::declare(params, &format!("{p}.k"), d, d, init)?,
                    v: Linear::declare(params, &format!("{p}.v"), d, d, init)?,
                    o: Linear::declare(params, &format!("{p}.o"), d, d, init)?,
                    msg: Linear::declare(params, &format!("{p}.msg"), 2 * d, d, init)?,
                    ln_ffn: LayerNorm::declare(params, &format!("{p}.ln_ffn"), d)?,
                    ffn: Mlp::declare(params, &format!("{p}.ffn"), &[d, 2 * d, d], Activation::Gelu, init)?,
                    edge: Mlp::declare(params, &format!("{p}.edge"), &[3 * d, d, d], Activation::Gelu, init)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(PolicyNet {
            config,
            vocab_size: v,
            max_slots: s,
            frag_emb: Embedding::declare(params, "policy.frag_emb", v, d, init)?,
            // rows 0..=s: slot on the source side (s = unset); rows s+1..: target side
            edge_emb: Embedding::declare(params, "policy.edge_emb", 2 * (s + 1), d, init)?,
            virtual_in: Linear::declare(params, "policy.virtual_in", COND_DIM, d, init)?,
            blocks,
            add_head: Mlp::declare(params, "policy.add_head", &[d, d, v], Activation::Gelu, init)?,
            root_head: Mlp::declare(params, "policy.root_head", &[d, d, v], Activation::Gelu, init)?,
            att_head: Mlp::declare(params, "policy.att_head", &[d, d, s], Activation::Gelu, init)?,
            stop_head: Mlp::declare(params, "policy.stop_head", &[2 * d, d, 1], Activation::Gelu, init)?,
            logz_head: Mlp::declare(params, &format!("{LOGZ_PREFIX}head"), &[COND_DIM, d, 1], Activation::Gelu, init)?,
        })
    }

    /// Layout only, for reattaching to loaded parameters.
    pub fn layout(config: PolicyConfig, vocab: &FragmentVocabulary) -> Result<Self> {
        let mut scratch = ParamSet::<f32>::new();
        Self::declare::<f32, rand::rngs::mock::StepRng>(&mut scratch, config, vocab, &mut Init::Zeros)
    }

    /// Freshly initialised parameters: random weights, zero biases, and a
    /// zero last layer in the log Z head so log Z starts at 0.
    pub fn init_params(config: PolicyConfig, vocab: &FragmentVocabulary, rng: &mut impl Rng) -> Result<(Self, ParamSet<f32>)> {
        let mut params = ParamSet::new();
        let net = Self::declare(&mut params, config, vocab, &mut Init::Random(rng))?;
        let last = format!("{LOGZ_PREFIX}head.1.weight");
        params.get_mut(&last).expect("declared").data_mut().fill(0.0);
        Ok((net, params))
    }

    fn check_params<T: Scalar>(&self, params: &ParamSet<T>) -> Result<()> {
        match params.get("policy.frag_emb.table") {
            Some(t) if t.rows() == self.vocab_size => Ok(()),
            Some(t) => Err(Error::Config(format!(
                "policy parameters cover {} fragments, vocabulary has {}",
                t.rows(),
                self.vocab_size
            ))),
            None => Ok(()),
        }
    }

    fn cond_input<T: Scalar>(g: &mut Graph<'_, T>, cond: &ConditionVector) -> Result<Var> {
        if cond.0.len() != COND_DIM {
            return Err(out_of_range("condition length", cond.0.len() as f64));
        }
        Ok(g.constant_row(&cond.0))
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, state: &MolGraphState, cond: &ConditionVector) -> Result<PolicyOutput> {
        self.check_params(g.params())?;
        if state.is_terminal() {
            return Err(Error::TerminalState);
        }
        let n = state.num_nodes();
        let s = self.max_slots;
        let c = Self::cond_input(g, cond)?;
        let virt = self.virtual_in.forward(g, c)?;
        let mut h = if n == 0 {
            virt
        } else {
            let nodes = self.frag_emb.forward(g, state.nodes())?;
            g.concat(&[nodes, virt], 0)?
        };

        // directed edges: both orientations of each link, in link order
        let mut src = Vec::new();
        let mut dst = Vec::new();
        let mut ids = Vec::new();
        for l in state.links() {
            for (from, to, slot_from, slot_to) in [(l.a, l.b, l.slot_a, l.slot_b), (l.b, l.a, l.slot_b, l.slot_a)] {
                src.push(from);
                dst.push(to);
                ids.push(slot_from.unwrap_or(s));
                ids.push(s + 1 + slot_to.unwrap_or(s));
            }
        }
        let m = src.len();
        let mut e = if m > 0 {
            let both = self.edge_emb.forward(g, &ids)?;
            let from_side: Vec<usize> = (0..m).map(|k| 2 * k).collect();
            let to_side: Vec<usize> = (0..m).map(|k| 2 * k + 1).collect();
            let a = g.gather_rows(both, &from_side)?;
            let b = g.gather_rows(both, &to_side)?;
            Some(g.add(a, b)?)
        } else {
            None
        };

        for block in &self.blocks {
            let x = block.ln_attn.forward(g, h)?;
            let q = block.q.forward(g, x)?;
            let k = block.k.forward(g, x)?;
            let v = block.v.forward(g, x)?;
            let att = g.attention(q, k, v, self.config.heads)?;
            let att = block.o.forward(g, att)?;
            let mut upd = g.add(h, att)?;
            if let Some(ev) = e {
                let hs = g.gather_rows(x, &src)?;
                let cat = g.concat(&[hs, ev], 1)?;
                let msg = block.msg.forward(g, cat)?;
                let msg = g.gelu(msg);
                let agg = g.scatter_add_rows(msg, &dst, n + 1)?;
                upd = g.add(upd, agg)?;
            }
            let y = block.ln_ffn.forward(g, upd)?;
            let y = block.ffn.forward(g, y)?;
            h = g.add(upd, y)?;
            if let Some(ev) = e {
                let hs = g.gather_rows(h, &src)?;
                let hd = g.gather_rows(h, &dst)?;
                let cat = g.concat(&[hs, hd, ev], 1)?;
                let de = block.edge.forward(g, cat)?;
                e = Some(g.add(ev, de)?);
            }
        }

        let virt_row = g.gather_rows(h, &[n])?;
        let addition = if n == 0 {
            self.root_head.forward(g, virt_row)?
        } else {
            let idx: Vec<usize> = (0..n).collect();
            let nodes = g.gather_rows(h, &idx)?;
            self.add_head.forward(g, nodes)?
        };

        let unset = state.unset_edges();
        let attachment = match (e, unset.is_empty()) {
            (Some(ev), false) => {
                let rows: Vec<usize> = unset
                    .iter()
                    .map(|de| (0..m).find(|&k| src[k] == de.from && dst[k] == de.to).expect("unset edge is a link"))
                    .collect();
                let er = g.gather_rows(ev, &rows)?;
                Some(self.att_head.forward(g, er)?)
            }
            _ => None,
        };

        let pooled = if n == 0 {
            g.input(Tensor::zeros(&[1, self.config.hidden]))
        } else {
            let idx: Vec<usize> = (0..n).collect();
            let nodes = g.gather_rows(h, &idx)?;
            g.mean_rows(nodes)?
        };
        let gvec = g.concat(&[pooled, virt_row], 1)?;
        let stop = self.stop_head.forward(g, gvec)?;
        Ok(PolicyOutput { addition, attachment, stop })
    }

    /// Position of each valid action in the flattened (addition, attachment, stop) logits.
    fn positions(&self, state: &MolGraphState, valid: &[GraphAction]) -> Result<Vec<usize>> {
        let v = self.vocab_size;
        let s = self.max_slots;
        let add_rows = state.num_nodes().max(1);
        let unset = state.unset_edges();
        let att_base = add_rows * v;
        let stop_pos = att_base + unset.len() * s;
        valid
            .iter()
            .map(|a| match *a {
                GraphAction::AddFragment { source, fragment } => Ok(source.unwrap_or(0) * v + fragment),
                GraphAction::SetAttachment { from, to, slot } => {
                    let r = unset
                        .iter()
                        .position(|e| e.from == from && e.to == to)
                        .ok_or_else(|| Error::InvalidAction { action: a.to_string(), rule: "edge is not unset" })?;
                    Ok(att_base + r * s + slot)
                }
                GraphAction::Stop => Ok(stop_pos),
            })
            .collect()
    }

    /// Logits of the valid actions, in `valid` order, as a [1, |valid|] row.
    pub fn valid_logits<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        out: &PolicyOutput,
        state: &MolGraphState,
        valid: &[GraphAction],
    ) -> Result<Var> {
        if valid.is_empty() {
            return Err(Error::EmptyInput("valid actions"));
        }
        let rows = g.value(out.addition).rows();
        let add = g.reshape(out.addition, rows * self.vocab_size, 1)?;
        let mut parts = vec![add];
        if let Some(att) = out.attachment {
            let r = g.value(att).rows();
            parts.push(g.reshape(att, r * self.max_slots, 1)?);
        }
        parts.push(out.stop);
        let flat = g.concat(&parts, 0)?;
        let pos = self.positions(state, valid)?;
        let picked = g.gather_rows(flat, &pos)?;
        Ok(g.reshape(picked, 1, valid.len())?)
    }

    /// Log-probabilities over the valid actions, [1, |valid|].
    pub fn valid_log_probs<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        state: &MolGraphState,
        valid: &[GraphAction],
        cond: &ConditionVector,
    ) -> Result<Var> {
        let out = self.forward(g, state, cond)?;
        let l = self.valid_logits(g, &out, state, valid)?;
        Ok(g.log_softmax(l))
    }

    pub fn log_z_var<T: Scalar>(&self, g: &mut Graph<'_, T>, cond: &ConditionVector) -> Result<Var> {
        let c = Self::cond_input(g, cond)?;
        Ok(self.logz_head.forward(g, c)?)
    }

    pub fn log_z<T: Scalar>(&self, params: &ParamSet<T>, cond: &ConditionVector) -> Result<f64> {
        let mut g = Graph::new(params);
        let z = self.log_z_var(&mut g, cond)?;
        Ok(g.value(z).item().as_f64())
    }

    pub fn logits<T: Scalar>(&self, params: &ParamSet<T>, state: &MolGraphState, cond: &ConditionVector, env: &FragEnv) -> Result<ActionLogits> {
        let mut g = Graph::new(params);
        let out = self.forward(&mut g, state, cond)?;
        let add = g.value(out.addition);
        let addition = (0..add.rows()).map(|r| add.row_slice(r).iter().map(|x| x.as_f64()).collect()).collect();
        let attachment = match out.attachment {
            Some(att) => {
                let t = g.value(att);
                state
                    .unset_edges()
                    .iter()
                    .enumerate()
                    .map(|(r, e)| env.free_slots(state, e.from).into_iter().map(|s| t.at(r, s).as_f64()).collect())
                    .collect()
            }
            None => Vec::new(),
        };
        Ok(ActionLogits { addition, attachment, stop: g.value(out.stop).item().as_f64() })
    }

    /// Probabilities over `env.valid_actions(state)` (same order).
    pub fn distribution<T: Scalar>(
        &self,
        params: &ParamSet<T>,
        env: &FragEnv,
        state: &MolGraphState,
        cond: &ConditionVector,
    ) -> Result<(Vec<GraphAction>, Vec<f64>)> {
        let valid = env.valid_actions(state)?;
        let mut g = Graph::new(params);
        let out = self.forward(&mut g, state, cond)?;
        let l = self.valid_logits(&mut g, &out, state, &valid)?;
        let logits: Vec<f64> = g.value(l).data().iter().map(|x| x.as_f64()).collect();
        Ok((valid, softmax(&logits)?))
    }
}

/// Softmax over the logits of the valid actions, given in `valid` order.
pub fn action_distribution(logits: &ActionLogits, state: &MolGraphState, valid: &[GraphAction]) -> Result<Vec<f64>> {
    let unset = state.unset_edges();
    let picked: Vec<f64> = valid
        .iter()
        .map(|a| match *a {
            GraphAction::AddFragment { source, fragment } => logits
                .addition
                .get(source.unwrap_or(0))
                .and_then(|r| r.get(fragment))
                .copied()
                .ok_or_else(|| Error::InvalidAction { action: a.to_string(), rule: "no addition logit" }),
            GraphAction::SetAttachment { from, to, slot } => {
                let r = unset.iter().position(|e| e.from == from && e.to == to);
                // attachment rows list free slots only; recover the slot's rank
                let rank = state.used_slots(from);
                let free_rank = (0..=slot).filter(|s| !rank.contains(s)).count().checked_sub(1);
                r.zip(free_rank)
                    .and_then(|(r, k)| logits.attachment.get(r).and_then(|row| row.get(k)))
                    .copied()
                    .ok_or_else(|| Error::InvalidAction { action: a.to_string(), rule: "no attachment logit" })
            }
            GraphAction::Stop => Ok(logits.stop),
        })
        .collect::<Result<_>>()?;
    softmax(&picked)
}

/// Numerically stable softmax; errors on an empty input.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::EmptyInput("action mask"));
    }
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return Err(Error::NonFinite("logits"));
    }
    let e: Vec<f64> = logits.iter().map(|&x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    Ok(e.into_iter().map(|x| x / z).collect())
}

/// With probability `epsilon` a uniform valid action, otherwise a draw from
/// `dist`. Returns the index and `ln dist[index]` (never the mixed probability).
pub fn sample_action(dist: &[f64], rng: &mut impl Rng, epsilon: f64) -> (usize, f64) {
    assert!(!dist.is_empty(), "reachable non-terminal states always have a valid action");
    let idx = if epsilon > 0.0 && rng.gen::<f64>() < epsilon {
        rng.gen_range(0..dist.len())
    } else {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut pick = dist.len() - 1;
        for (i, &p) in dist.iter().enumerate() {
            acc += p;
            if u < acc {
                pick = i;
                break;
            }
        }
        // never land on a zero-probability tail entry through rounding
        while dist[pick] == 0.0 && pick > 0 {
            pick -= 1;
        }
        pick
    };
    (idx, dist[idx].ln())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn thermometer_bins() {
        assert!(thermometer(0.0).unwrap().iter().all(|&b| b == 0.0));
        assert!(thermometer(64.0).unwrap().iter().all(|&b| b == 1.0));
        assert_eq!(thermometer(32.0).unwrap().iter().sum::<f64>(), 16.0);
        assert_eq!(thermometer(1.9).unwrap().iter().sum::<f64>(), 0.0);
        assert_eq!(thermometer(2.0).unwrap().iter().sum::<f64>(), 1.0);
        assert!(thermometer(64.5).is_err());
        assert!(thermometer(-0.1).is_err());
    }

    #[test]
    fn softmax_examples() {
        let p = softmax(&[0.0; 5]).unwrap();
        assert!(p.iter().all(|&x| (x - 0.2).abs() < 1e-15));
        assert_eq!(softmax(&[3.0]).unwrap(), vec![1.0]);
        let p = softmax(&[0.0, 3f64.ln()]).unwrap();
        assert!((p[0] - 0.25).abs() < 1e-15 && (p[1] - 0.75).abs() < 1e-15);
        assert!(softmax(&[]).is_err());
    }

    #[test]
    fn sampling_reports_unmixed_log_prob() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        assert_eq!(sample_action(&[1.0], &mut rng, 0.0), (0, 0.0));
        let dist = [0.7, 0.1, 0.1, 0.1];
        for _ in 0..100 {
            let (i, lp) = sample_action(&dist, &mut rng, 1.0);
            assert_eq!(lp, dist[i].ln());
        }
    }
}
