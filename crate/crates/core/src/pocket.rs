//! Protein pockets: parsing, the K-nearest-neighbour residue graph and a
//! rotation/translation-invariant encoder producing the 128-dim condition.
//!
//! Every geometric input to the encoder is a distance, a dot product of unit
//! vectors or a dihedral sine/cosine, so invariance holds by construction.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use flowgen_nn::{Activation, Graph, Init, LayerNorm, Linear, Mlp, ParamSet, Scalar, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::chem::Feature;
use crate::error::{Error, Result};

pub const RESIDUE_TYPES: [&str; 20] = [
    "ALA", "ARG", "ASN", "ASP", "CYS", "GLN", "GLU", "GLY", "HIS", "ILE", "LEU", "LYS", "MET", "PHE", "PRO", "SER",
    "THR", "TRP", "TYR", "VAL",
];

pub const DEFAULT_K: usize = 30;
pub const EMBED_DIM: usize = 128;
pub const RBF_CENTERS: usize = 16;
pub const RBF_MAX: f64 = 20.0;
pub const RBF_SIGMA: f64 = 1.25;
pub const MAX_OFFSET: i64 = 32;
const OFFSET_DIM: usize = 16;
pub const NODE_FEATURES: usize = 20 + 4 + 6;
pub const EDGE_FEATURES: usize = RBF_CENTERS + OFFSET_DIM + 3;
const ROUNDS: usize = 3;

pub type Vec3 = [f64; 3];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Residue {
    #[serde(rename = "type")]
    pub residue_type: String,
    #[serde(rename = "N")]
    pub n: Vec3,
    #[serde(rename = "CA")]
    pub ca: Vec3,
    #[serde(rename = "C")]
    pub c: Vec3,
    pub index: i64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PharmacophorePoint {
    #[serde(rename = "type")]
    pub kind: Feature,
    pub center: Vec3,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PocketStructure {
    pub id: String,
    pub residues: Vec<Residue>,
    #[serde(default)]
    pub pharmacophores: Vec<PharmacophorePoint>,
}

impl PocketStructure {
    pub fn validate(&self) -> Result<()> {
        let err = |message: String| Error::Pocket { context: self.id.clone(), message };
        if self.residues.len() < 2 {
            return Err(err(format!("needs at least 2 residues, found {}", self.residues.len())));
        }
        let mut seen = HashSet::new();
        for (k, r) in self.residues.iter().enumerate() {
            if residue_slot(&r.residue_type).is_none() {
                return Err(err(format!("residues[{k}].type: unknown residue type {:?}", r.residue_type)));
            }
            for (field, v) in [("N", r.n), ("CA", r.ca), ("C", r.c)] {
                if v.iter().any(|x| !x.is_finite()) {
                    return Err(err(format!("residues[{k}].{field}: non-finite coordinate")));
                }
            }
            if !seen.insert(r.index) {
                return Err(err(format!("residues[{k}].index: duplicate chain position {}", r.index)));
            }
        }
        for (k, p) in self.pharmacophores.iter().enumerate() {
            if p.center.iter().any(|x| !x.is_finite()) {
                return Err(err(format!("pharmacophores[{k}].center: non-finite coordinate")));
            }
        }
        Ok(())
    }

    /// Number of pharmacophore points of each feature type.
    pub fn pharmacophore_counts(&self) -> [usize; 5] {
        let mut c = [0; 5];
        for p in &self.pharmacophores {
            c[p.kind.index()] += 1;
        }
        c
    }

    /// Applies `x -> R x + t` to every coordinate.
    pub fn transformed(&self, rot: &[[f64; 3]; 3], t: Vec3) -> PocketStructure {
        let f = |v: Vec3| add(matvec(rot, v), t);
        let mut out = self.clone();
        for r in &mut out.residues {
            r.n = f(r.n);
            r.ca = f(r.ca);
            r.c = f(r.c);
        }
        for p in &mut out.pharmacophores {
            p.center = f(p.center);
        }
        out
    }
}

pub fn residue_slot(label: &str) -> Option<usize> {
    RESIDUE_TYPES.iter().position(|t| *t == label)
}

pub fn parse_pocket_str(text: &str, context: &str) -> Result<PocketStructure> {
    let p: PocketStructure = serde_json::from_str(text)
        .map_err(|e| Error::Pocket { context: context.to_string(), message: e.to_string() })?;
    p.validate()?;
    Ok(p)
}

pub fn parse_pocket(path: &Path) -> Result<PocketStructure> {
    parse_pocket_str(&crate::error::read_file(path)?, &path.display().to_string())
}

pub fn write_pocket(pocket: &PocketStructure, path: &Path) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(pocket)?)?;
    Ok(())
}

/// Parses a single pocket file, or every `*.json` file of a directory (sorted by name).
pub fn load_pockets(path: &Path) -> Result<Vec<PocketStructure>> {
    if !path.is_dir() {
        return Ok(vec![parse_pocket(path)?]);
    }
    let mut files: Vec<_> = std::fs::read_dir(path)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Pocket { context: path.display().to_string(), message: "no pocket files".into() });
    }
    files.iter().map(|f| parse_pocket(f)).collect()
}

fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

/// Unit vector, or zero for (near-)degenerate input.
fn unit(a: Vec3) -> Vec3 {
    let n = norm(a);
    if n < 1e-8 {
        [0.0; 3]
    } else {
        [a[0] / n, a[1] / n, a[2] / n]
    }
}

fn matvec(m: &[[f64; 3]; 3], v: Vec3) -> Vec3 {
    [dot(m[0], v), dot(m[1], v), dot(m[2], v)]
}

pub fn distance(a: Vec3, b: Vec3) -> f64 {
    norm(sub(a, b))
}

/// (sin, cos) of the dihedral angle p0-p1-p2-p3; (0, 1) when undefined.
pub fn dihedral_sin_cos(p0: Vec3, p1: Vec3, p2: Vec3, p3: Vec3) -> (f64, f64) {
    let b0 = sub(p1, p0);
    let b1 = sub(p2, p1);
    let b2 = sub(p3, p2);
    let n1 = cross(b0, b1);
    let n2 = cross(b1, b2);
    let (l1, l2, lb) = (norm(n1), norm(n2), norm(b1));
    if l1 < 1e-8 || l2 < 1e-8 || lb < 1e-8 {
        return (0.0, 1.0);
    }
    let m1 = cross(n1, unit(b1));
    let x = dot(n1, n2) / (l1 * l2);
    let y = dot(m1, n2) / (l1 * l2);
    let r = (x * x + y * y).sqrt();
    (y / r, x / r)
}

/// Gaussian radial basis over `RBF_CENTERS` centers evenly spaced on [0, RBF_MAX].
pub fn rbf(d: f64) -> Vec<f64> {
    let step = RBF_MAX / (RBF_CENTERS - 1) as f64;
    (0..RBF_CENTERS).map(|k| (-((d - k as f64 * step) / RBF_SIGMA).powi(2)).exp()).collect()
}

/// Sinusoidal embedding of a chain offset clipped to ±MAX_OFFSET.
pub fn offset_embedding(offset: i64) -> Vec<f64> {
    let o = offset.clamp(-MAX_OFFSET, MAX_OFFSET) as f64;
    let half = OFFSET_DIM / 2;
    let mut out = Vec::with_capacity(OFFSET_DIM);
    for k in 0..half {
        let freq = (-(k as f64) * (2.0 * MAX_OFFSET as f64).ln() / half as f64).exp();
        out.push((o * freq).sin());
        out.push((o * freq).cos());
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct KnnResidueGraph {
    pub node_features: Vec<Vec<f64>>,
    /// Directed edges `(i, j)`: `j` is one of the nearest neighbours of `i`.
    pub edges: Vec<(usize, usize)>,
    pub edge_features: Vec<Vec<f64>>,
    pub k: usize,
}

impl KnnResidueGraph {
    pub fn num_nodes(&self) -> usize {
        self.node_features.len()
    }

    pub fn out_degree(&self, i: usize) -> usize {
        self.edges.iter().filter(|e| e.0 == i).count()
    }
}

struct Frame {
    e1: Vec3,
    e2: Vec3,
    e3: Vec3,
}

fn local_frame(r: &Residue) -> Frame {
    let e1 = unit(sub(r.c, r.ca));
    let v = sub(r.n, r.ca);
    let e2 = unit(sub(v, [e1[0] * dot(v, e1), e1[1] * dot(v, e1), e1[2] * dot(v, e1)]));
    Frame { e1, e2, e3: cross(e1, e2) }
}

pub fn build_knn_graph(pocket: &PocketStructure, k: usize) -> Result<KnnResidueGraph> {
    pocket.validate()?;
    let res = &pocket.residues;
    let n = res.len();
    let by_index: HashMap<i64, usize> = res.iter().enumerate().map(|(i, r)| (r.index, i)).collect();

    let mut node_features = Vec::with_capacity(n);
    for r in res {
        let mut f = vec![0.0; 20];
        f[residue_slot(&r.residue_type).expect("validated")] = 1.0;
        let prev = by_index.get(&(r.index - 1)).map(|&p| &res[p]);
        let next = by_index.get(&(r.index + 1)).map(|&q| &res[q]);
        let (ps, pc) = prev.map_or((0.0, 1.0), |p| dihedral_sin_cos(p.c, r.n, r.ca, r.c));
        let (qs, qc) = next.map_or((0.0, 1.0), |q| dihedral_sin_cos(r.n, r.ca, r.c, q.n));
        f.extend([ps, pc, qs, qc]);
        let uf = next.map_or([0.0; 3], |q| unit(sub(q.ca, r.ca)));
        let ub = prev.map_or([0.0; 3], |p| unit(sub(p.ca, r.ca)));
        let un = unit(sub(r.n, r.ca));
        let uc = unit(sub(r.c, r.ca));
        let vs = [uf, ub, un, uc];
        for a in 0..4 {
            for b in a + 1..4 {
                f.push(dot(vs[a], vs[b]));
            }
        }
        node_features.push(f);
    }

    let frames: Vec<Frame> = res.iter().map(local_frame).collect();
    let take = k.min(n - 1);
    let mut edges = Vec::with_capacity(n * take);
    let mut edge_features = Vec::with_capacity(n * take);
    for i in 0..n {
        let mut others: Vec<(f64, i64, usize)> =
            (0..n).filter(|&j| j != i).map(|j| (distance(res[i].ca, res[j].ca), res[j].index, j)).collect();
        others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for &(d, _, j) in others.iter().take(take) {
            let mut f = rbf(d);
            f.extend(offset_embedding(res[j].index - res[i].index));
            let u = unit(sub(res[j].ca, res[i].ca));
            let fr = &frames[i];
            f.extend([dot(u, fr.e1), dot(u, fr.e2), dot(u, fr.e3)]);
            edges.push((i, j));
            edge_features.push(f);
        }
    }
    Ok(KnnResidueGraph { node_features, edges, edge_features, k })
}

#[derive(Clone, Debug, PartialEq)]
pub struct PocketEmbedding(pub Vec<f32>);

impl PocketEmbedding {
    pub fn zeros() -> Self {
        PocketEmbedding(vec![0.0; EMBED_DIM])
    }
}

struct Round {
    message: Mlp,
    norm: LayerNorm,
}

/// Parameter layout of the residue-graph encoder.
pub struct PocketEncoder {
    node_in: Linear,
    edge_in: Linear,
    rounds: Vec<Round>,
}

impl PocketEncoder {
    pub fn declare<T: Scalar, R: Rng>(params: &mut ParamSet<T>, init: &mut Init<'_, R>) -> Result<Self> {
        let d = EMBED_DIM;
        let node_in = Linear::declare(params, "pocket.node_in", NODE_FEATURES, d, init)?;
        let edge_in = Linear::declare(params, "pocket.edge_in", EDGE_FEATURES, d, init)?;
        let rounds = (0..ROUNDS)
            .map(|r| {
                Ok(Round {
                    message: Mlp::declare(params, &format!("pocket.mp{r}.msg"), &[2 * d, d, d], Activation::Relu, init)?,
                    norm: LayerNorm::declare(params, &format!("pocket.mp{r}.norm"), d)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(PocketEncoder { node_in, edge_in, rounds })
    }

    /// Layout only, for parameter sets that already hold the tensors.
    pub fn layout() -> Self {
        let mut scratch = ParamSet::<f32>::new();
        Self::declare::<f32, rand::rngs::mock::StepRng>(&mut scratch, &mut Init::Zeros).expect("fresh set")
    }

    /// Builds the pooled embedding on the tape (for gradient checks) and returns the [1, 128] var.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, graph: &KnnResidueGraph) -> Result<Var> {
        let n = graph.num_nodes();
        let to_tensor = |rows: &[Vec<f64>], cols: usize| {
            Tensor::new(vec![rows.len(), cols], rows.iter().flatten().map(|&x| T::lit(x)).collect())
        };
        let x = g.input(to_tensor(&graph.node_features, NODE_FEATURES)?);
        let e = g.input(to_tensor(&graph.edge_features, EDGE_FEATURES)?);
        let mut h = self.node_in.forward(g, x)?;
        let e = self.edge_in.forward(g, e)?;
        let src: Vec<usize> = graph.edges.iter().map(|e| e.0).collect();
        let dst: Vec<usize> = graph.edges.iter().map(|e| e.1).collect();
        let degree = graph.k.min(n - 1).max(1) as f64;
        for round in &self.rounds {
            let hj = g.gather_rows(h, &dst)?;
            let cat = g.concat(&[hj, e], 1)?;
            let m = round.message.forward(g, cat)?;
            let agg = g.scatter_add_rows(m, &src, n)?;
            let agg = g.scale(agg, 1.0 / degree);
            let sum = g.add(h, agg)?;
            h = round.norm.forward(g, sum)?;
        }
        Ok(g.mean_rows(h)?)
    }

    pub fn encode<T: Scalar>(&self, params: &ParamSet<T>, graph: &KnnResidueGraph) -> Result<PocketEmbedding> {
        let mut g = Graph::new(params);
        let v = self.forward(&mut g, graph)?;
        let out = g.value(v);
        if !out.all_finite() {
            return Err(Error::NonFinite("pocket embedding"));
        }
        Ok(PocketEmbedding(out.data().iter().map(|x| x.as_f64() as f32).collect()))
    }
}

/// Graph construction with the default K followed by encoding in double precision.
pub fn embed_pocket(params: &ParamSet<f64>, pocket: &PocketStructure) -> Result<PocketEmbedding> {
    let graph = build_knn_graph(pocket, DEFAULT_K)?;
    PocketEncoder::layout().encode(params, &graph)
}
