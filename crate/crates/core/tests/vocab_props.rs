use flowgen_core::canon::canonicalize;
use flowgen_core::chem::{Atom, Feature};
use flowgen_core::vocab::*;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const ELEMENTS: [&str; 4] = ["C", "N", "O", "S"];

fn random_molecule(rng: &mut ChaCha8Rng, max_atoms: usize) -> CorpusMolecule {
    let n = rng.gen_range(1..=max_atoms);
    let atoms = (0..n)
        .map(|_| {
            let mut features = Vec::new();
            if rng.gen_bool(0.3) {
                features.push(*Feature::ALL.choose(rng).unwrap());
            }
            CorpusAtom { element: ELEMENTS.choose(rng).unwrap().to_string(), features, ring: rng.gen_bool(0.4) }
        })
        .collect();
    let mut bonds = Vec::new();
    for v in 1..n {
        let order = if rng.gen_bool(0.15) { 2 } else { 1 };
        bonds.push(CorpusBond { i: rng.gen_range(0..v), j: v, order, cleavable: order == 1 && rng.gen_bool(0.3) });
    }
    // a few ring-closing bonds
    for _ in 0..rng.gen_range(0..3) {
        let (i, j) = (rng.gen_range(0..n), rng.gen_range(0..n));
        if i != j && !bonds.iter().any(|b| (b.i, b.j) == (i, j) || (b.i, b.j) == (j, i)) {
            bonds.push(CorpusBond { i, j, order: 1, cleavable: false });
        }
    }
    CorpusMolecule { atoms, bonds }
}

fn molecule_certificate(m: &CorpusMolecule) -> String {
    let labels: Vec<String> = m.atoms.iter().map(|a| Atom::new(&a.element, &a.features).label()).collect();
    let edges: Vec<(usize, usize, u8)> = m.bonds.iter().map(|b| (b.i, b.j, b.order)).collect();
    canonicalize(&labels, &edges).certificate
}

fn reassemble(d: &Decomposition) -> String {
    let mut labels = Vec::new();
    let mut edges = Vec::new();
    let mut offsets = Vec::new();
    for f in &d.fragments {
        offsets.push(labels.len());
        let off = labels.len();
        labels.extend(f.atoms.iter().map(Atom::label));
        edges.extend(f.bonds.iter().map(|b| (b.i + off, b.j + off, b.order)));
    }
    for c in &d.cuts {
        let end = |(f, slot): (usize, usize)| offsets[f] + d.fragments[f].attachment_atoms[slot];
        edges.push((end(c.a), end(c.b), 1));
    }
    canonicalize(&labels, &edges).certificate
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn reassembly_reproduces_molecule(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = random_molecule(&mut rng, 20);
        let d = decompose_with_cuts(&m, &DecompositionRules::default()).unwrap();
        let slots: usize = d.fragments.iter().map(|f| f.attachment_atoms.len()).sum();
        prop_assert_eq!(slots, 2 * d.cuts.len());
        prop_assert_eq!(reassemble(&d), molecule_certificate(&m));
    }

    #[test]
    fn vocabulary_is_order_independent(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let corpus: Vec<CorpusMolecule> = (0..30).map(|_| random_molecule(&mut rng, 8)).collect();
        let rules = DecompositionRules { min_count: 2, min_fraction: 0.0, ..Default::default() };
        let mut shuffled = corpus.clone();
        shuffled.shuffle(&mut rng);
        match (build_vocabulary(&corpus, &rules), build_vocabulary(&shuffled, &rules)) {
            (Ok(a), Ok(b)) => prop_assert_eq!(a, b),
            (Err(_), Err(_)) => {}
            _ => prop_assert!(false, "one order failed and the other did not"),
        }
    }
}
