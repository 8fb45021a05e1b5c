//! Fragment vocabulary construction from a corpus of annotated molecules.

use std::collections::{BTreeMap, HashSet};
use std::io::BufRead;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::canon;
use crate::chem::{Atom, Feature};
use crate::error::{Error, Result};
use crate::fraggraph::{Bond, Fragment, FragmentVocabulary};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusAtom {
    pub element: String,
    #[serde(default)]
    pub features: Vec<Feature>,
    #[serde(default)]
    pub ring: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusBond {
    pub i: usize,
    pub j: usize,
    #[serde(default = "single")]
    pub order: u8,
    #[serde(default)]
    pub cleavable: bool,
}

fn single() -> u8 {
    1
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusMolecule {
    pub atoms: Vec<CorpusAtom>,
    pub bonds: Vec<CorpusBond>,
}

impl CorpusMolecule {
    pub fn validate(&self) -> Result<()> {
        let n = self.atoms.len();
        let bad = |m: String| Err(Error::InvalidMolecule(m));
        if n == 0 {
            return bad("no atoms".into());
        }
        for b in &self.bonds {
            if b.i >= n || b.j >= n || b.i == b.j {
                return bad(format!("bond {}-{} has an invalid endpoint", b.i, b.j));
            }
            if b.cleavable && b.order != 1 {
                return bad(format!("cleavable bond {}-{} is not single", b.i, b.j));
            }
        }
        let all: Vec<usize> = (0..self.bonds.len()).collect();
        if components(n, &self.bonds, &all).len() != 1 {
            return bad("molecule is not connected".into());
        }
        Ok(())
    }

    fn atom(&self, i: usize) -> Atom {
        let a = &self.atoms[i];
        Atom::new(&a.element, &a.features)
    }
}

/// Connected components over the bonds selected by `keep`, each as sorted atom indices.
fn components(n: usize, bonds: &[CorpusBond], keep: &[usize]) -> Vec<Vec<usize>> {
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], x: usize) -> usize {
        let mut r = x;
        while p[r] != r {
            r = p[r];
        }
        let mut y = x;
        while p[y] != r {
            let next = p[y];
            p[y] = r;
            y = next;
        }
        r
    }
    for &k in keep {
        let (a, b) = (find(&mut parent, bonds[k].i), find(&mut parent, bonds[k].j));
        if a != b {
            parent[a.max(b)] = a.min(b);
        }
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for v in 0..n {
        let r = find(&mut parent, v);
        groups.entry(r).or_default().push(v);
    }
    groups.into_values().collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecompositionRules {
    #[serde(default = "yes")]
    pub cleave_tagged: bool,
    #[serde(default = "yes")]
    pub cleave_ring_attachments: bool,
    #[serde(default = "default_min_count")]
    pub min_count: usize,
    #[serde(default = "default_min_fraction")]
    pub min_fraction: f64,
}

fn yes() -> bool {
    true
}

fn default_min_count() -> usize {
    50
}

fn default_min_fraction() -> f64 {
    0.0002
}

impl Default for DecompositionRules {
    fn default() -> Self {
        DecompositionRules {
            cleave_tagged: true,
            cleave_ring_attachments: true,
            min_count: default_min_count(),
            min_fraction: default_min_fraction(),
        }
    }
}

impl DecompositionRules {
    pub fn validate(&self) -> Result<()> {
        if self.min_count < 1 {
            return Err(Error::Config("min_count must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.min_fraction) {
            return Err(Error::Config(format!("min_fraction {} outside [0, 1]", self.min_fraction)));
        }
        Ok(())
    }

    /// Molecules a fragment must appear in to be kept.
    pub fn threshold(&self, corpus_size: usize) -> usize {
        let frac = (self.min_fraction * corpus_size as f64 - 1e-9).ceil().max(0.0) as usize;
        self.min_count.max(frac)
    }

    fn cuts(&self, mol: &CorpusMolecule, b: &CorpusBond) -> bool {
        if self.cleave_tagged && b.cleavable {
            return true;
        }
        if self.cleave_ring_attachments && b.order == 1 {
            let (x, y) = (&mol.atoms[b.i], &mol.atoms[b.j]);
            let heavy = |a: &CorpusAtom| a.element != "H";
            return (x.ring && !y.ring && heavy(y)) || (y.ring && !x.ring && heavy(x));
        }
        false
    }
}

/// Where a cut bond landed: fragment index and slot on each side.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Cut {
    pub a: (usize, usize),
    pub b: (usize, usize),
}

#[derive(Clone, Debug)]
pub struct Decomposition {
    pub fragments: Vec<Fragment>,
    pub cuts: Vec<Cut>,
}

/// Cuts the molecule into fragments; every cut endpoint gains one attachment slot.
pub fn decompose(mol: &CorpusMolecule, rules: &DecompositionRules) -> Result<Vec<Fragment>> {
    Ok(decompose_with_cuts(mol, rules)?.fragments)
}

pub fn decompose_with_cuts(mol: &CorpusMolecule, rules: &DecompositionRules) -> Result<Decomposition> {
    mol.validate()?;
    let n = mol.atoms.len();
    let (cut, keep): (Vec<usize>, Vec<usize>) = (0..mol.bonds.len()).partition(|&k| rules.cuts(mol, &mol.bonds[k]));
    let comps = components(n, &mol.bonds, &keep);
    let mut comp_of = vec![(0, 0); n];
    for (c, atoms) in comps.iter().enumerate() {
        for (local, &a) in atoms.iter().enumerate() {
            comp_of[a] = (c, local);
        }
    }
    // raw attachment atoms per component, in cut order
    let mut attach: Vec<Vec<usize>> = vec![Vec::new(); comps.len()];
    let mut raw_cuts = Vec::new();
    for &k in &cut {
        let b = mol.bonds[k];
        let mut ends = [(0, 0); 2];
        for (e, atom) in [b.i, b.j].into_iter().enumerate() {
            let (c, local) = comp_of[atom];
            ends[e] = (c, attach[c].len());
            attach[c].push(local);
        }
        raw_cuts.push(ends);
    }

    let mut fragments = Vec::with_capacity(comps.len());
    let mut slot_maps = Vec::with_capacity(comps.len());
    for (c, atoms) in comps.iter().enumerate() {
        let local_of = |a: usize| atoms.binary_search(&a).expect("atom in component");
        let frag_atoms: Vec<Atom> = atoms.iter().map(|&a| mol.atom(a)).collect();
        let bonds: Vec<Bond> = keep
            .iter()
            .map(|&k| mol.bonds[k])
            .filter(|b| comp_of[b.i].0 == c)
            .map(|b| Bond { i: local_of(b.i), j: local_of(b.j), order: b.order })
            .collect();
        let (frag, slot_map) = canonical_fragment(frag_atoms, bonds, &attach[c])?;
        fragments.push(frag);
        slot_maps.push(slot_map);
    }
    let cuts = raw_cuts
        .into_iter()
        .map(|[(ca, sa), (cb, sb)]| Cut { a: (ca, slot_maps[ca][sa]), b: (cb, slot_maps[cb][sb]) })
        .collect();
    Ok(Decomposition { fragments, cuts })
}

/// Renumbers atoms into canonical order and sorts attachment slots.
/// Returns the fragment and the map from input slot position to output slot.
fn canonical_fragment(atoms: Vec<Atom>, bonds: Vec<Bond>, attach: &[usize]) -> Result<(Fragment, Vec<usize>)> {
    let draft = Fragment {
        id: 0,
        heavy_atom_count: atoms.iter().filter(|a| a.is_heavy()).count(),
        atoms,
        bonds,
        attachment_atoms: attach.to_vec(),
    };
    let (labels, edges) = draft.labelled_graph();
    let order = canon::canonicalize(&labels, &edges).order;
    let mut pos = vec![0; order.len()];
    for (p, &v) in order.iter().enumerate() {
        pos[v] = p;
    }
    let atoms = order.iter().map(|&v| draft.atoms[v].clone()).collect();
    let mut bonds: Vec<Bond> = draft
        .bonds
        .iter()
        .map(|b| {
            let (i, j) = (pos[b.i], pos[b.j]);
            Bond { i: i.min(j), j: i.max(j), order: b.order }
        })
        .collect();
    bonds.sort_by_key(|b| (b.i, b.j, b.order));
    let mut slots: Vec<(usize, usize)> = attach.iter().enumerate().map(|(s, &a)| (pos[a], s)).collect();
    slots.sort_unstable();
    let mut slot_map = vec![0; attach.len()];
    for (new, &(_, old)) in slots.iter().enumerate() {
        slot_map[old] = new;
    }
    let frag = Fragment::new(atoms, bonds, slots.iter().map(|&(a, _)| a).collect())?;
    Ok((frag, slot_map))
}

/// Corpus counts (molecules containing the fragment) aligned with vocabulary ids.
#[derive(Clone, Debug, PartialEq)]
pub struct VocabularyStats {
    pub counts: Vec<usize>,
    pub threshold: usize,
    pub distinct_fragments: usize,
}

pub fn build_vocabulary(corpus: &[CorpusMolecule], rules: &DecompositionRules) -> Result<FragmentVocabulary> {
    Ok(build_vocabulary_with_stats(corpus, rules)?.0)
}

/// Decomposes every molecule, counts presence per canonical fragment, and
/// keeps fragments reaching the threshold, ordered by count then canonical form.
/// Fragments with no attachment atoms (uncut molecules) cannot be linked and are skipped.
pub fn build_vocabulary_with_stats(
    corpus: &[CorpusMolecule],
    rules: &DecompositionRules,
) -> Result<(FragmentVocabulary, VocabularyStats)> {
    rules.validate()?;
    if corpus.is_empty() {
        return Err(Error::EmptyInput("corpus"));
    }
    let per_mol: Vec<Vec<(String, Fragment)>> = corpus
        .par_iter()
        .map(|m| {
            let frags = decompose(m, rules)?;
            let mut seen = HashSet::new();
            Ok(frags
                .into_iter()
                .filter(|f| !f.attachment_atoms.is_empty())
                .map(|f| (f.canonical_form(), f))
                .filter(|(k, _)| seen.insert(k.clone()))
                .collect())
        })
        .collect::<Result<_>>()?;
    let mut counts: BTreeMap<String, (usize, Fragment)> = BTreeMap::new();
    for (key, frag) in per_mol.into_iter().flatten() {
        counts.entry(key).or_insert((0, frag)).0 += 1;
    }
    let threshold = rules.threshold(corpus.len());
    let distinct_fragments = counts.len();
    let mut kept: Vec<(String, usize, Fragment)> =
        counts.into_iter().filter(|(_, (c, _))| *c >= threshold).map(|(k, (c, f))| (k, c, f)).collect();
    if kept.is_empty() {
        return Err(Error::EmptyVocabulary { threshold });
    }
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let counts = kept.iter().map(|k| k.1).collect();
    let vocab = FragmentVocabulary::new(kept.into_iter().map(|k| k.2).collect())?;
    Ok((vocab, VocabularyStats { counts, threshold, distinct_fragments }))
}

/// Reads a JSON-lines corpus; blank lines are skipped.
pub fn read_corpus(path: &Path) -> Result<Vec<CorpusMolecule>> {
    let file = std::fs::File::open(path).map_err(|source| Error::File { path: path.display().to_string(), source })?;
    let mut out = Vec::new();
    for (lineno, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mol: CorpusMolecule = serde_json::from_str(&line)
            .map_err(|e| Error::InvalidMolecule(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        out.push(mol);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn atom(e: &str, ring: bool) -> CorpusAtom {
        CorpusAtom { element: e.into(), features: vec![], ring }
    }

    fn bond(i: usize, j: usize, cleavable: bool) -> CorpusBond {
        CorpusBond { i, j, order: 1, cleavable }
    }

    /// A-B chain joined by one cleavable bond: C-C-[cut]-N-O
    fn two_part() -> CorpusMolecule {
        CorpusMolecule {
            atoms: vec![atom("C", false), atom("C", false), atom("N", false), atom("O", false)],
            bonds: vec![bond(0, 1, false), bond(1, 2, true), bond(2, 3, false)],
        }
    }

    #[test]
    fn uncut_molecule_is_one_fragment() {
        let m = CorpusMolecule {
            atoms: vec![atom("C", false), atom("O", false)],
            bonds: vec![bond(0, 1, false)],
        };
        let frags = decompose(&m, &DecompositionRules::default()).unwrap();
        assert_eq!(frags.len(), 1);
        assert_eq!(frags[0].atoms.len(), 2);
        assert!(frags[0].attachment_atoms.is_empty());
    }

    #[test]
    fn tagged_bond_splits_chain() {
        let frags = decompose(&two_part(), &DecompositionRules::default()).unwrap();
        assert_eq!(frags.len(), 2);
        assert!(frags.iter().all(|f| f.attachment_atoms.len() == 1));
        assert!(frags.iter().all(|f| f.heavy_atom_count == 2));
    }

    #[test]
    fn ring_attachment_rule() {
        // six-membered carbon ring with a methyl on atom 0
        let mut atoms: Vec<CorpusAtom> = (0..6).map(|_| atom("C", true)).collect();
        atoms.push(atom("C", false));
        let mut bonds: Vec<CorpusBond> = (0..6).map(|i| bond(i, (i + 1) % 6, false)).collect();
        bonds.push(bond(0, 6, false));
        let m = CorpusMolecule { atoms, bonds };
        let frags = decompose(&m, &DecompositionRules::default()).unwrap();
        assert_eq!(frags.len(), 2);
        let sizes: Vec<usize> = frags.iter().map(|f| f.atoms.len()).collect();
        assert!(sizes.contains(&6) && sizes.contains(&1));
        let off = DecompositionRules { cleave_ring_attachments: false, ..Default::default() };
        assert_eq!(decompose(&m, &off).unwrap().len(), 1);
    }

    #[test]
    fn hydrogen_on_ring_is_not_cut() {
        let m = CorpusMolecule {
            atoms: vec![atom("C", true), atom("C", true), atom("C", true), atom("H", false)],
            bonds: vec![bond(0, 1, false), bond(1, 2, false), bond(2, 0, false), bond(0, 3, false)],
        };
        let frags = decompose(&m, &DecompositionRules::default()).unwrap();
        assert_eq!(frags.len(), 1);
        assert_eq!(frags[0].heavy_atom_count, 3);
    }

    #[test]
    fn invalid_molecules_rejected() {
        let disconnected = CorpusMolecule { atoms: vec![atom("C", false), atom("C", false)], bonds: vec![] };
        assert!(decompose(&disconnected, &DecompositionRules::default()).is_err());
        let double_cut = CorpusMolecule {
            atoms: vec![atom("C", false), atom("C", false)],
            bonds: vec![CorpusBond { i: 0, j: 1, order: 2, cleavable: true }],
        };
        assert!(double_cut.validate().is_err());
    }

    #[test]
    fn vocabulary_counts_and_thresholds() {
        let corpus = vec![two_part(); 100];
        let rules = DecompositionRules { min_count: 50, min_fraction: 0.0, ..Default::default() };
        let v = build_vocabulary(&corpus, &rules).unwrap();
        assert_eq!(v.len(), 2);
        let strict = DecompositionRules { min_count: 101, ..rules };
        assert!(matches!(build_vocabulary(&corpus, &strict), Err(Error::EmptyVocabulary { threshold: 101 })));
    }

    #[test]
    fn default_threshold_at_corpus_scale() {
        let rules = DecompositionRules::default();
        // 0.02% of 250,000 is 50; a fragment seen in 49 molecules is excluded
        assert_eq!(rules.threshold(250_000), 50);
        assert!(49 < rules.threshold(250_000));
        assert_eq!(rules.threshold(1_000_000), 200);
    }

    #[test]
    fn presence_not_occurrence() {
        // C-[cut]-C-[cut]-C: three identical single-carbon pieces in one molecule
        let m = CorpusMolecule {
            atoms: vec![atom("C", false), atom("C", false), atom("C", false)],
            bonds: vec![bond(0, 1, true), bond(1, 2, true)],
        };
        let rules = DecompositionRules { min_count: 1, min_fraction: 0.0, ..Default::default() };
        let (v, stats) = build_vocabulary_with_stats(&[m], &rules).unwrap();
        // end pieces have one slot, the middle piece two
        assert_eq!(v.len(), 2);
        assert_eq!(stats.counts, vec![1, 1]);
    }
}
