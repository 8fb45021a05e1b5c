//! The fragment-graph state space.
//!
//! A molecule under construction is a tree of fragments. Each link between
//! two nodes carries two directed attachment choices, one per endpoint, that
//! name which attachment slot of the endpoint's fragment forms the bond.
//! Slots index into [`Fragment::attachment_atoms`].

use std::collections::{BTreeMap, HashSet, VecDeque};
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::canon;
use crate::chem::Atom;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Bond {
    pub i: usize,
    pub j: usize,
    pub order: u8,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fragment {
    #[serde(skip)]
    pub id: usize,
    pub atoms: Vec<Atom>,
    #[serde(default)]
    pub bonds: Vec<Bond>,
    pub attachment_atoms: Vec<usize>,
    pub heavy_atom_count: usize,
}

impl Fragment {
    /// Builds a fragment, deriving the heavy-atom count.
    pub fn new(atoms: Vec<Atom>, bonds: Vec<Bond>, attachment_atoms: Vec<usize>) -> Result<Self> {
        let heavy_atom_count = atoms.iter().filter(|a| a.is_heavy()).count();
        let f = Fragment { id: 0, atoms, bonds, attachment_atoms, heavy_atom_count };
        f.validate()?;
        Ok(f)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.atoms.len();
        if n == 0 {
            return Err(Error::InvalidFragment("no atoms".into()));
        }
        if let Some(&a) = self.attachment_atoms.iter().find(|&&a| a >= n) {
            return Err(Error::InvalidFragment(format!("attachment atom {a} outside {n} atoms")));
        }
        if let Some(b) = self.bonds.iter().find(|b| b.i >= n || b.j >= n || b.i == b.j) {
            return Err(Error::InvalidFragment(format!("bad bond {}-{}", b.i, b.j)));
        }
        let heavy = self.atoms.iter().filter(|a| a.is_heavy()).count();
        if heavy != self.heavy_atom_count {
            return Err(Error::InvalidFragment(format!(
                "heavy_atom_count {} but {heavy} heavy atoms",
                self.heavy_atom_count
            )));
        }
        Ok(())
    }

    pub fn num_slots(&self) -> usize {
        self.attachment_atoms.len()
    }

    /// Canonical text form; equal for fragments identical up to atom renumbering.
    pub fn canonical_form(&self) -> String {
        let (labels, edges) = self.labelled_graph();
        canon::canonicalize(&labels, &edges).certificate
    }

    pub(crate) fn labelled_graph(&self) -> (Vec<String>, Vec<(usize, usize, u8)>) {
        let mut slots = vec![0usize; self.atoms.len()];
        for &a in &self.attachment_atoms {
            slots[a] += 1;
        }
        let labels = self
            .atoms
            .iter()
            .zip(&slots)
            .map(|(a, &s)| if s > 0 { format!("{}*{s}", a.label()) } else { a.label() })
            .collect();
        let edges = self.bonds.iter().map(|b| (b.i, b.j, b.order)).collect();
        (labels, edges)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FragmentVocabulary {
    pub version_hash: String,
    pub fragments: Vec<Fragment>,
}

impl FragmentVocabulary {
    /// Assigns ids `0..N` in the given order and computes the version hash.
    pub fn new(mut fragments: Vec<Fragment>) -> Result<Self> {
        if fragments.is_empty() {
            return Err(Error::InvalidVocabulary("no fragments".into()));
        }
        let mut seen = HashSet::new();
        for (i, f) in fragments.iter_mut().enumerate() {
            f.validate()?;
            if f.attachment_atoms.is_empty() {
                return Err(Error::InvalidVocabulary(format!("fragment {i} has no attachment atoms")));
            }
            if !seen.insert(f.canonical_form()) {
                return Err(Error::InvalidVocabulary(format!("fragment {i} duplicates an earlier fragment")));
            }
            f.id = i;
        }
        let body = serde_json::to_vec(&fragments)?;
        let version_hash = hex::encode(Sha256::digest(&body));
        Ok(FragmentVocabulary { version_hash, fragments })
    }

    pub fn len(&self) -> usize {
        self.fragments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fragments.is_empty()
    }

    pub fn get(&self, id: usize) -> &Fragment {
        &self.fragments[id]
    }

    pub fn max_slots(&self) -> usize {
        self.fragments.iter().map(Fragment::num_slots).max().unwrap_or(0)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Parses a vocabulary file and re-validates it (ids, uniqueness, hash).
    pub fn from_json(text: &str) -> Result<Self> {
        let raw: FragmentVocabulary = serde_json::from_str(text)?;
        let v = FragmentVocabulary::new(raw.fragments)?;
        if v.version_hash != raw.version_hash {
            return Err(Error::InvalidVocabulary(format!(
                "version hash mismatch: file says {}, contents hash to {}",
                raw.version_hash, v.version_hash
            )));
        }
        Ok(v)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_json(&crate::error::read_file(path)?)
    }
}

/// One link of the fragment tree, with the attachment slot chosen on each side.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Link {
    pub a: usize,
    pub b: usize,
    /// Slot on node `a` used for the bond toward `b`.
    pub slot_a: Option<usize>,
    /// Slot on node `b` used for the bond toward `a`.
    pub slot_b: Option<usize>,
}

impl Link {
    fn touches(&self, v: usize) -> bool {
        self.a == v || self.b == v
    }

    fn other(&self, v: usize) -> usize {
        if self.a == v {
            self.b
        } else {
            self.a
        }
    }

    /// Slot chosen on `v`'s side.
    fn slot_of(&self, v: usize) -> Option<usize> {
        if self.a == v {
            self.slot_a
        } else {
            self.slot_b
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DirectedEdge {
    pub from: usize,
    pub to: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GraphAction {
    /// Add `fragment`, linked to `source` (or as the first node when `source` is `None`).
    AddFragment { source: Option<usize>, fragment: usize },
    /// Choose the attachment slot on `from` for its bond toward `to`.
    SetAttachment { from: usize, to: usize, slot: usize },
    Stop,
}

impl fmt::Display for GraphAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GraphAction::AddFragment { source: None, fragment } => write!(f, "add({fragment} at root)"),
            GraphAction::AddFragment { source: Some(s), fragment } => write!(f, "add({fragment} at {s})"),
            GraphAction::SetAttachment { from, to, slot } => write!(f, "attach({from}->{to} slot {slot})"),
            GraphAction::Stop => f.write_str("stop"),
        }
    }
}

/// A partially built fragment tree. Values are immutable in practice: every
/// transition returns a new state.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct MolGraphState {
    nodes: Vec<usize>,
    links: Vec<Link>,
    terminal: bool,
}

pub const EMPTY_KEY: &str = "empty";

impl MolGraphState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn nodes(&self) -> &[usize] {
        &self.nodes
    }

    pub fn links(&self) -> &[Link] {
        &self.links
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn is_terminal(&self) -> bool {
        self.terminal
    }

    pub fn degree(&self, v: usize) -> usize {
        self.links.iter().filter(|l| l.touches(v)).count()
    }

    pub fn neighbors(&self, v: usize) -> impl Iterator<Item = usize> + '_ {
        self.links.iter().filter(move |l| l.touches(v)).map(move |l| l.other(v))
    }

    /// Slots of `v` already committed to a bond.
    pub fn used_slots(&self, v: usize) -> Vec<usize> {
        self.links.iter().filter(|l| l.touches(v)).filter_map(|l| l.slot_of(v)).collect()
    }

    fn link_index(&self, a: usize, b: usize) -> Option<usize> {
        self.links.iter().position(|l| (l.a == a && l.b == b) || (l.a == b && l.b == a))
    }

    /// Attachment choice on the directed edge `from -> to`; `None` if no such link.
    pub fn edge_slot(&self, from: usize, to: usize) -> Option<Option<usize>> {
        self.link_index(from, to).map(|k| self.links[k].slot_of(from))
    }

    /// Directed edges without an attachment choice, in link order.
    pub fn unset_edges(&self) -> Vec<DirectedEdge> {
        let mut out = Vec::new();
        for l in &self.links {
            if l.slot_a.is_none() {
                out.push(DirectedEdge { from: l.a, to: l.b });
            }
            if l.slot_b.is_none() {
                out.push(DirectedEdge { from: l.b, to: l.a });
            }
        }
        out
    }

    pub fn all_attachments_set(&self) -> bool {
        self.links.iter().all(|l| l.slot_a.is_some() && l.slot_b.is_some())
    }

    pub fn heavy_atom_count(&self, vocab: &FragmentVocabulary) -> Result<usize> {
        if self.nodes.is_empty() {
            return Err(Error::EmptyState);
        }
        Ok(self.nodes.iter().map(|&f| vocab.get(f).heavy_atom_count).sum())
    }

    /// Connected over all nodes.
    pub fn is_connected(&self) -> bool {
        if self.nodes.is_empty() {
            return true;
        }
        let mut seen = vec![false; self.nodes.len()];
        let mut queue = VecDeque::from([0]);
        seen[0] = true;
        while let Some(v) = queue.pop_front() {
            for u in self.neighbors(v) {
                if !seen[u] {
                    seen[u] = true;
                    queue.push_back(u);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    /// Isomorphism-invariant key. States are trees, so the key is the
    /// smallest rooted encoding over all choices of root.
    pub fn canonical_key(&self) -> String {
        if self.nodes.is_empty() {
            return EMPTY_KEY.to_string();
        }
        let adj = self.adjacency();
        let best = (0..self.nodes.len()).map(|r| self.rooted_code(&adj, r, None)).min().expect("non-empty");
        format!("{}{}", if self.terminal { "T" } else { "S" }, best)
    }

    fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.nodes.len()];
        for (k, l) in self.links.iter().enumerate() {
            adj[l.a].push(k);
            adj[l.b].push(k);
        }
        adj
    }

    fn rooted_code(&self, adj: &[Vec<usize>], v: usize, parent: Option<usize>) -> String {
        let mut kids: Vec<String> = adj[v]
            .iter()
            .map(|&k| &self.links[k])
            .filter(|l| Some(l.other(v)) != parent)
            .map(|l| {
                let u = l.other(v);
                format!("{}:{}>{}", slot_code(l.slot_of(v)), slot_code(l.slot_of(u)), self.rooted_code(adj, u, Some(v)))
            })
            .collect();
        kids.sort_unstable();
        format!("{}({})", self.nodes[v], kids.join(","))
    }

    /// Count fingerprint over fragment ids and linked fragment pairs.
    pub fn fingerprint(&self) -> Result<Fingerprint> {
        if !self.terminal {
            return Err(Error::NotTerminal);
        }
        Ok(Fingerprint::from_record(&self.to_record()))
    }

    fn without_node(&self, v: usize) -> MolGraphState {
        let remap = |i: usize| if i > v { i - 1 } else { i };
        let nodes = self.nodes.iter().enumerate().filter(|&(i, _)| i != v).map(|(_, &f)| f).collect();
        let links = self
            .links
            .iter()
            .filter(|l| !l.touches(v))
            .map(|l| Link { a: remap(l.a), b: remap(l.b), ..*l })
            .collect();
        MolGraphState { nodes, links, terminal: false }
    }

    pub fn to_record(&self) -> MoleculeJson {
        let mut attachments = Vec::new();
        for l in &self.links {
            if let Some(s) = l.slot_a {
                attachments.push([l.a, l.b, s]);
            }
            if let Some(s) = l.slot_b {
                attachments.push([l.b, l.a, s]);
            }
        }
        MoleculeJson {
            nodes: self.nodes.clone(),
            links: self.links.iter().map(|l| [l.a, l.b]).collect(),
            attachments,
            terminal: self.terminal,
        }
    }

    /// Rebuilds a state from its record, checking every structural invariant.
    pub fn from_record(rec: &MoleculeJson, vocab: &FragmentVocabulary) -> Result<Self> {
        let bad = |m: String| Error::InvalidMolecule(m);
        let n = rec.nodes.len();
        if let Some(&f) = rec.nodes.iter().find(|&&f| f >= vocab.len()) {
            return Err(bad(format!("fragment id {f} outside vocabulary of {}", vocab.len())));
        }
        if n > 0 && rec.links.len() != n - 1 {
            return Err(bad(format!("{n} nodes need {} links, found {}", n - 1, rec.links.len())));
        }
        if n == 0 && !rec.links.is_empty() {
            return Err(bad("links without nodes".into()));
        }
        let mut state = MolGraphState { nodes: rec.nodes.clone(), links: Vec::new(), terminal: rec.terminal };
        for &[a, b] in &rec.links {
            if a >= n || b >= n || a == b || state.link_index(a, b).is_some() {
                return Err(bad(format!("bad link {a}-{b}")));
            }
            state.links.push(Link { a, b, slot_a: None, slot_b: None });
        }
        if !state.is_connected() {
            return Err(bad("fragment graph is not connected".into()));
        }
        for &[from, to, slot] in &rec.attachments {
            let k = state.link_index(from, to).ok_or_else(|| bad(format!("attachment on missing link {from}-{to}")))?;
            if slot >= vocab.get(state.nodes[from]).num_slots() || state.used_slots(from).contains(&slot) {
                return Err(bad(format!("slot {slot} unavailable on node {from}")));
            }
            let l = &mut state.links[k];
            let side = if l.a == from { &mut l.slot_a } else { &mut l.slot_b };
            if side.is_some() {
                return Err(bad(format!("edge {from}->{to} set twice")));
            }
            *side = Some(slot);
        }
        for v in 0..n {
            if state.degree(v) > vocab.get(state.nodes[v]).num_slots() {
                return Err(bad(format!("node {v} has more links than attachment atoms")));
            }
        }
        if state.terminal && (n == 0 || !state.all_attachments_set()) {
            return Err(bad("terminal molecule with unset attachments".into()));
        }
        Ok(state)
    }
}

fn slot_code(s: Option<usize>) -> String {
    s.map_or_else(|| "u".to_string(), |s| s.to_string())
}

/// JSON form of a molecule: `attachments` lists `[from, to, slot]` for every chosen edge.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MoleculeJson {
    pub nodes: Vec<usize>,
    pub links: Vec<[usize; 2]>,
    pub attachments: Vec<[usize; 3]>,
    #[serde(default)]
    pub terminal: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FingerprintBit {
    Fragment(usize),
    Link(usize, usize),
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Fingerprint(pub BTreeMap<FingerprintBit, u32>);

impl Fingerprint {
    pub fn from_record(rec: &MoleculeJson) -> Fingerprint {
        let mut counts = BTreeMap::new();
        for &f in &rec.nodes {
            *counts.entry(FingerprintBit::Fragment(f)).or_insert(0) += 1;
        }
        for &[a, b] in &rec.links {
            let (x, y) = (rec.nodes[a], rec.nodes[b]);
            *counts.entry(FingerprintBit::Link(x.min(y), x.max(y))).or_insert(0) += 1;
        }
        Fingerprint(counts)
    }

    pub fn get(&self, bit: FingerprintBit) -> u32 {
        self.0.get(&bit).copied().unwrap_or(0)
    }

    /// Count-Tanimoto similarity `sum(min) / sum(max)`; 1 for two empty prints.
    pub fn tanimoto(&self, other: &Fingerprint) -> f64 {
        let mut num = 0u64;
        let mut den = 0u64;
        for (bit, &a) in &self.0 {
            let b = other.get(*bit);
            num += u64::from(a.min(b));
            den += u64::from(a.max(b));
        }
        for (bit, &b) in &other.0 {
            if !self.0.contains_key(bit) {
                den += u64::from(b);
            }
        }
        if den == 0 {
            1.0
        } else {
            num as f64 / den as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub states: Vec<MolGraphState>,
    pub actions: Vec<GraphAction>,
    pub log_probs: Vec<f64>,
}

impl Trajectory {
    pub fn terminal(&self) -> &MolGraphState {
        self.states.last().expect("trajectory has states")
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

/// Vocabulary plus size limit: everything needed to run the transition function.
#[derive(Clone, Debug)]
pub struct FragEnv {
    pub vocab: Arc<FragmentVocabulary>,
    pub max_nodes: usize,
}

pub const DEFAULT_MAX_NODES: usize = 9;

/// Refuse to enumerate state spaces larger than this.
pub const ENUMERATION_BUDGET: usize = 1_000_000;

impl FragEnv {
    pub fn new(vocab: Arc<FragmentVocabulary>, max_nodes: usize) -> Self {
        FragEnv { vocab, max_nodes }
    }

    fn num_slots(&self, state: &MolGraphState, v: usize) -> usize {
        self.vocab.get(state.nodes[v]).num_slots()
    }

    pub fn free_slots(&self, state: &MolGraphState, v: usize) -> Vec<usize> {
        let used = state.used_slots(v);
        (0..self.num_slots(state, v)).filter(|s| !used.contains(s)).collect()
    }

    /// Whether node `v` can accept another link.
    pub fn can_grow(&self, state: &MolGraphState, v: usize) -> bool {
        state.num_nodes() < self.max_nodes && state.degree(v) < self.num_slots(state, v)
    }

    /// Actions permitted in `state`, ordered: additions (by node, then fragment),
    /// attachments (by unset edge, then slot), stop.
    pub fn valid_actions(&self, state: &MolGraphState) -> Result<Vec<GraphAction>> {
        if state.terminal {
            return Err(Error::TerminalState);
        }
        let v = self.vocab.len();
        let mut out = Vec::new();
        if state.nodes.is_empty() {
            out.extend((0..v).map(|f| GraphAction::AddFragment { source: None, fragment: f }));
            return Ok(out);
        }
        for i in 0..state.num_nodes() {
            if self.can_grow(state, i) {
                out.extend((0..v).map(|f| GraphAction::AddFragment { source: Some(i), fragment: f }));
            }
        }
        for e in state.unset_edges() {
            out.extend(
                self.free_slots(state, e.from)
                    .into_iter()
                    .map(|slot| GraphAction::SetAttachment { from: e.from, to: e.to, slot }),
            );
        }
        if state.all_attachments_set() {
            out.push(GraphAction::Stop);
        }
        Ok(out)
    }

    fn check(&self, state: &MolGraphState, action: &GraphAction) -> Result<()> {
        let fail = |rule: &'static str| Err(Error::InvalidAction { action: action.to_string(), rule });
        if state.terminal {
            return Err(Error::TerminalState);
        }
        match *action {
            GraphAction::AddFragment { source, fragment } => {
                if fragment >= self.vocab.len() {
                    return fail("fragment id outside the vocabulary");
                }
                match source {
                    None if !state.nodes.is_empty() => fail("root addition only allowed on the empty state"),
                    None => Ok(()),
                    Some(_) if state.nodes.is_empty() => fail("the empty state only accepts a root addition"),
                    Some(s) if s >= state.num_nodes() => fail("source node does not exist"),
                    Some(_) if state.num_nodes() >= self.max_nodes => fail("node limit reached"),
                    Some(s) if state.degree(s) >= self.num_slots(state, s) => {
                        fail("source node has no free attachment atom")
                    }
                    Some(_) => Ok(()),
                }
            }
            GraphAction::SetAttachment { from, to, slot } => match state.edge_slot(from, to) {
                None => fail("no link between the two nodes"),
                Some(Some(_)) => fail("edge attachment already specified"),
                Some(None) if !self.free_slots(state, from).contains(&slot) => {
                    fail("attachment slot not free on the source fragment")
                }
                Some(None) => Ok(()),
            },
            GraphAction::Stop => {
                if state.nodes.is_empty() {
                    fail("cannot stop on the empty state")
                } else if !state.all_attachments_set() {
                    fail("cannot stop with unspecified attachments")
                } else {
                    Ok(())
                }
            }
        }
    }

    /// The transition function. `state` is left untouched.
    pub fn apply(&self, state: &MolGraphState, action: &GraphAction) -> Result<MolGraphState> {
        self.check(state, action)?;
        let mut next = state.clone();
        match *action {
            GraphAction::AddFragment { source, fragment } => {
                next.nodes.push(fragment);
                if let Some(s) = source {
                    next.links.push(Link { a: s, b: next.nodes.len() - 1, slot_a: None, slot_b: None });
                }
            }
            GraphAction::SetAttachment { from, to, slot } => {
                let k = next.link_index(from, to).expect("checked");
                let l = &mut next.links[k];
                if l.a == from {
                    l.slot_a = Some(slot);
                } else {
                    l.slot_b = Some(slot);
                }
            }
            GraphAction::Stop => next.terminal = true,
        }
        Ok(next)
    }

    /// Every `(parent, action)` with `apply(parent, action) == state` up to
    /// isomorphism, deduplicated by the parent's canonical key.
    pub fn parents(&self, state: &MolGraphState) -> Result<Vec<(MolGraphState, GraphAction)>> {
        if state.nodes.is_empty() {
            return Err(Error::InitialState);
        }
        if state.terminal {
            let mut p = state.clone();
            p.terminal = false;
            return Ok(vec![(p, GraphAction::Stop)]);
        }
        let mut out: Vec<(MolGraphState, GraphAction)> = Vec::new();
        for (k, l) in state.links.iter().enumerate() {
            for (from, to, slot) in [(l.a, l.b, l.slot_a), (l.b, l.a, l.slot_b)] {
                if let Some(slot) = slot {
                    let mut p = state.clone();
                    if p.links[k].a == from {
                        p.links[k].slot_a = None;
                    } else {
                        p.links[k].slot_b = None;
                    }
                    out.push((p, GraphAction::SetAttachment { from, to, slot }));
                }
            }
        }
        if state.num_nodes() == 1 {
            out.push((MolGraphState::new(), GraphAction::AddFragment { source: None, fragment: state.nodes[0] }));
        } else {
            for v in 0..state.num_nodes() {
                if state.degree(v) != 1 {
                    continue;
                }
                let l = state.links.iter().find(|l| l.touches(v)).expect("degree 1");
                if l.slot_a.is_some() || l.slot_b.is_some() {
                    continue;
                }
                let u = l.other(v);
                let source = if u > v { u - 1 } else { u };
                out.push((
                    state.without_node(v),
                    GraphAction::AddFragment { source: Some(source), fragment: state.nodes[v] },
                ));
            }
        }
        let mut seen = HashSet::new();
        out.retain(|(p, _)| seen.insert(p.canonical_key()));
        Ok(out)
    }

    /// Indices into `valid` of the actions whose successor is isomorphic to
    /// the successor of `valid[chosen]` (always includes `chosen`).
    pub fn equivalent_actions(&self, state: &MolGraphState, valid: &[GraphAction], chosen: usize) -> Result<Vec<usize>> {
        let target = valid[chosen];
        let label = |a: &GraphAction| -> Option<(u8, usize, usize)> {
            match *a {
                GraphAction::AddFragment { source: Some(_), fragment } => Some((0, fragment, 0)),
                GraphAction::SetAttachment { from, slot, .. } => Some((1, state.nodes[from], slot)),
                _ => None,
            }
        };
        let Some(tl) = label(&target) else { return Ok(vec![chosen]) };
        let candidates: Vec<usize> =
            (0..valid.len()).filter(|&j| j != chosen && label(&valid[j]) == Some(tl)).collect();
        if candidates.is_empty() {
            return Ok(vec![chosen]);
        }
        let key = self.apply(state, &target)?.canonical_key();
        let mut out = vec![chosen];
        for j in candidates {
            if self.apply(state, &valid[j])?.canonical_key() == key {
                out.push(j);
            }
        }
        out.sort_unstable();
        Ok(out)
    }

    /// Exhaustive search over the state space; terminal states keyed by canonical key.
    pub fn enumerate_terminals(&self, budget: usize) -> Result<BTreeMap<String, MolGraphState>> {
        let mut seen = HashSet::new();
        let mut queue = VecDeque::new();
        let s0 = MolGraphState::new();
        seen.insert(s0.canonical_key());
        queue.push_back(s0);
        let mut terminals = BTreeMap::new();
        while let Some(s) = queue.pop_front() {
            if s.terminal {
                terminals.insert(s.canonical_key(), s);
                continue;
            }
            for a in self.valid_actions(&s)? {
                let next = self.apply(&s, &a)?;
                if seen.insert(next.canonical_key()) {
                    if seen.len() > budget {
                        return Err(Error::BudgetExceeded(budget));
                    }
                    queue.push_back(next);
                }
            }
        }
        Ok(terminals)
    }
}
