//! Small synthetic vocabularies, pockets and docking datasets.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::chem::{Atom, Feature};
use crate::error::Result;
use crate::fraggraph::{Bond, FragEnv, Fragment, FragmentVocabulary, MolGraphState};
use crate::pocket::{PharmacophorePoint, PocketStructure, Residue, RESIDUE_TYPES};
use crate::proxy::DockingRecord;
use crate::reward::synthetic_scores;

/// Linear chain of `n` atoms of `element`; `features[k]` tags atom k.
pub fn chain_fragment(element: &str, n: usize, attach: &[usize], features: &[&[Feature]]) -> Result<Fragment> {
    let atoms = (0..n).map(|i| Atom::new(element, features.get(i).copied().unwrap_or(&[]))).collect();
    let bonds = (1..n).map(|i| Bond { i: i - 1, j: i, order: 1 }).collect();
    Fragment::new(atoms, bonds, attach.to_vec())
}

/// Six-membered aromatic ring with the given attachment atoms.
pub fn ring_fragment(element_at_0: &str, attach: &[usize], extra: &[Feature]) -> Result<Fragment> {
    let atoms = (0..6)
        .map(|i| {
            let mut f = vec![Feature::Aromatic, Feature::Ring];
            if i == 0 {
                f.extend_from_slice(extra);
            }
            Atom::new(if i == 0 { element_at_0 } else { "C" }, &f)
        })
        .collect();
    let bonds = (0..6).map(|i| Bond { i, j: (i + 1) % 6, order: if i % 2 == 0 { 2 } else { 1 } }).collect();
    Fragment::new(atoms, bonds, attach.to_vec())
}

/// A ten-fragment vocabulary covering every feature type.
pub fn demo_vocabulary() -> Result<FragmentVocabulary> {
    use Feature::*;
    FragmentVocabulary::new(vec![
        ring_fragment("C", &[0, 3], &[])?,
        ring_fragment("N", &[1, 4], &[Acceptor])?,
        ring_fragment("C", &[0], &[Hydrophobic])?,
        chain_fragment("O", 1, &[0], &[&[Donor, Acceptor]])?,
        chain_fragment("N", 1, &[0, 0], &[&[Donor]])?,
        chain_fragment("C", 3, &[0, 2], &[&[], &[Hydrophobic]])?,
        chain_fragment("C", 2, &[0], &[&[Hydrophobic], &[Hydrophobic]])?,
        chain_fragment("S", 1, &[0, 0], &[&[Hydrophobic]])?,
        chain_fragment("N", 2, &[0, 1], &[&[Acceptor], &[Donor]])?,
        chain_fragment("F", 1, &[0], &[&[Hydrophobic]])?,
    ])
}

/// Pocket with a random-walk backbone of `n_residues` residues and
/// `counts[t]` pharmacophore points of feature `t`.
pub fn synthetic_pocket(id: &str, seed: u64, n_residues: usize, counts: [usize; 5]) -> PocketStructure {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ca = [0.0f64; 3];
    let residues = (0..n_residues)
        .map(|k| {
            let step: [f64; 3] = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            let len = step.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-6);
            for d in 0..3 {
                ca[d] += 3.8 * step[d] / len;
            }
            let mut off = || -> [f64; 3] { [rng.gen_range(-1.4..1.4), rng.gen_range(-1.4..1.4), rng.gen_range(-1.4..1.4)] };
            let (dn, dc) = (off(), off());
            Residue {
                residue_type: RESIDUE_TYPES.choose(&mut rng).expect("non-empty").to_string(),
                n: [ca[0] + dn[0], ca[1] + dn[1], ca[2] + dn[2]],
                ca,
                c: [ca[0] + dc[0], ca[1] + dc[1], ca[2] + dc[2]],
                index: k as i64 + 1,
            }
        })
        .collect();
    let mut pharmacophores = Vec::new();
    for f in Feature::ALL {
        for _ in 0..counts[f.index()] {
            pharmacophores.push(PharmacophorePoint {
                kind: f,
                center: [rng.gen_range(-6.0..6.0), rng.gen_range(-6.0..6.0), rng.gen_range(-6.0..6.0)],
            });
        }
    }
    PocketStructure { id: id.to_string(), residues, pharmacophores }
}

/// Pockets with random pharmacophore counts in 0..=max_per_type (at least one point each).
pub fn synthetic_pockets(n: usize, seed: u64, max_per_type: usize) -> Vec<PocketStructure> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let counts = loop {
                let c: [usize; 5] = std::array::from_fn(|_| rng.gen_range(0..=max_per_type));
                if c.iter().sum::<usize>() > 0 {
                    break c;
                }
            };
            synthetic_pocket(&format!("pocket{i:03}"), seed.wrapping_mul(1000).wrapping_add(i as u64), 24, counts)
        })
        .collect()
}

/// Uniform random rollout to a terminal state.
pub fn random_molecule(env: &FragEnv, rng: &mut impl Rng) -> Result<MolGraphState> {
    let mut s = MolGraphState::new();
    while !s.is_terminal() {
        let valid = env.valid_actions(&s)?;
        s = env.apply(&s, valid.choose(rng).expect("non-terminal states have actions"))?;
    }
    Ok(s)
}

/// Random molecules scored with the synthetic docking score, spread evenly over pockets.
pub fn synthetic_docking_records(env: &FragEnv, pockets: &[PocketStructure], n: usize, seed: u64) -> Result<Vec<DockingRecord>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let p = &pockets[i % pockets.len()];
            let m = random_molecule(env, &mut rng)?;
            let t = synthetic_scores(&m, &env.vocab, p)?;
            Ok(DockingRecord { pocket_id: p.id.clone(), molecule: m.to_record(), ds: t.ds })
        })
        .collect()
}


/// Three fragments whose state space (max 3 nodes) is small enough to enumerate.
pub fn toy_vocabulary() -> Result<FragmentVocabulary> {
    use Feature::*;
    FragmentVocabulary::new(vec![
        ring_fragment("N", &[1, 4], &[Acceptor])?,
        chain_fragment("O", 1, &[0], &[&[Donor, Acceptor]])?,
        chain_fragment("C", 2, &[0, 1], &[&[Hydrophobic], &[Hydrophobic]])?,
    ])
}

/// `n` single-atom fragments with one attachment each; at max_nodes 1 every
/// fragment is its own terminal.
pub fn singleton_vocabulary(n: usize) -> Result<FragmentVocabulary> {
    const ELEMENTS: [&str; 4] = ["C", "N", "O", "S"];
    FragmentVocabulary::new(
        (0..n).map(|i| chain_fragment(ELEMENTS[i % 4], 1 + i / 4, &[0], &[])).collect::<Result<Vec<_>>>()?,
    )
}
