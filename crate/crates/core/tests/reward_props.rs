use std::sync::Arc;

use flowgen_core::fraggraph::{FragEnv, FragmentVocabulary, GraphAction, MolGraphState};
use flowgen_core::reward::*;
use flowgen_core::synth;
use proptest::prelude::*;

proptest! {
    #[test]
    fn affinity_reward_never_decreases_as_docking_improves(a in -20.0f64..0.0, b in -20.0f64..0.0, hac in 1usize..60) {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        prop_assert!(r_ds(lo, -8.0, hac).unwrap() >= r_ds(hi, -8.0, hac).unwrap());
    }

    #[test]
    fn drug_likeness_components_are_monotone_and_capped(q1 in 0.0f64..=1.0, q2 in 0.0f64..=1.0, s1 in 1.0f64..=10.0, s2 in 1.0f64..=10.0) {
        let (ql, qh) = if q1 < q2 { (q1, q2) } else { (q2, q1) };
        prop_assert!(r_qed(qh, 0.7).unwrap() >= r_qed(ql, 0.7).unwrap());
        prop_assert!(r_qed(qh, 0.7).unwrap() <= 1.0);
        let (sl, sh) = if s1 < s2 { (s1, s2) } else { (s2, s1) };
        prop_assert!(r_sa(sl, 0.8).unwrap() >= r_sa(sh, 0.8).unwrap());
        prop_assert!(r_sa(sl, 0.8).unwrap() <= 1.0);
    }

    #[test]
    fn composed_reward_is_floored_and_finite(ds in -30.0f64..10.0, qed in 0.0f64..=1.0, sa in 1.0f64..=10.0, hac in 1usize..80) {
        let spec = RewardSpec::default();
        let r = compose(&ScoreTriple { ds, qed, sa_raw: sa }, &spec, hac).unwrap();
        prop_assert!(r.is_finite());
        prop_assert!(r >= spec.reward_floor);
    }

    #[test]
    fn tempering_is_linear_in_beta(r in 1e-6f64..10.0, beta in 0.0f64..64.0) {
        let l = log_tempered_reward(r, beta).unwrap();
        prop_assert!((l - beta * r.ln()).abs() <= 1e-12 * (1.0 + l.abs()));
    }
}

#[test]
fn out_of_range_scores_are_rejected() {
    assert!(r_qed(1.2, 0.7).is_err());
    assert!(r_sa(0.5, 0.8).is_err());
    assert!(r_ds(-9.0, -8.0, 0).is_err());
    assert!(r_ds(f64::NAN, -8.0, 5).is_err());
    assert!(log_tempered_reward(0.0, 1.0).is_err());
}

fn single(vocab: FragmentVocabulary, frag: usize) -> (MolGraphState, Arc<FragmentVocabulary>) {
    let env = FragEnv::new(Arc::new(vocab), 1);
    let s = env.apply(&MolGraphState::new(), &GraphAction::AddFragment { source: None, fragment: frag }).unwrap();
    let s = env.apply(&s, &GraphAction::Stop).unwrap();
    (s, env.vocab)
}

#[test]
fn synthetic_scorer_examples() {
    // one 20-atom fragment with no features, pocket with points: no overlap, DS clamps to 0
    let big = synth::chain_fragment("C", 20, &[0], &[]).unwrap();
    let (m, vocab) = single(FragmentVocabulary::new(vec![big]).unwrap(), 0);
    let pocket = synth::synthetic_pocket("p", 1, 8, [1, 1, 1, 1, 1]);
    let t = synthetic_scores(&m, &vocab, &pocket).unwrap();
    assert_eq!(t.ds, 0.0);
    // 1 distinct fragment, 0 links
    assert!((t.sa_raw - 1.4).abs() < 1e-12);

    let f23 = synth::chain_fragment("C", 23, &[0], &[]).unwrap();
    let (m, vocab) = single(FragmentVocabulary::new(vec![f23]).unwrap(), 0);
    assert_eq!(synthetic_scores(&m, &vocab, &pocket).unwrap().qed, 1.0);
}

#[test]
fn synthetic_docking_counts_feature_overlap() {
    use flowgen_core::chem::Feature::*;
    let f = synth::chain_fragment("N", 2, &[0], &[&[Donor, Acceptor], &[Donor]]).unwrap();
    let (m, vocab) = single(FragmentVocabulary::new(vec![f]).unwrap(), 0);
    // ligand: 2 donors, 1 acceptor; pocket: 1 donor, 3 acceptors -> overlap 2
    let pocket = synth::synthetic_pocket("p", 2, 8, [0, 1, 3, 0, 0]);
    let t = synthetic_scores(&m, &vocab, &pocket).unwrap();
    assert!((t.ds - (-4.0 + 0.1)).abs() < 1e-12);
    assert!(synthetic_scores(&MolGraphState::new(), &vocab, &pocket).is_err());
}

#[test]
fn scorer_binding_round_trip_and_oracle_env() {
    let b: ScorerBinding = serde_json::from_str(r#"{"kind":"oracle","command":["x"]}"#).unwrap();
    assert_eq!(b, ScorerBinding::Oracle { command: vec!["x".into()], timeout_secs: 120.0 });
    assert!(serde_json::from_str::<ScorerBinding>(r#"{"kind":"vina"}"#).is_err());

    let vocab = synth::demo_vocabulary().unwrap();
    let env = FragEnv::new(Arc::new(vocab), 4);
    let pocket = synth::synthetic_pocket("p", 3, 10, [2, 1, 1, 1, 0]);
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(1);
    let mols: Vec<_> = (0..4).map(|_| synth::random_molecule(&env, &mut rng).unwrap()).collect();
    let binding = ScorerBinding::Oracle { command: vec![env!("CARGO_BIN_EXE_flowgen-oracle-stub").into(), "fixed".into()], timeout_secs: 10.0 };
    let mut scorer = Scorer::from_binding(&binding).unwrap();
    let scored = score_and_reward(&mut scorer, &RewardSpec::default(), &env.vocab, &pocket, &mols).unwrap();
    assert_eq!(scored.len(), 4);
    assert!(scored.iter().all(|s| s.triple.ds == -9.0 && s.reward > 0.0));
}
