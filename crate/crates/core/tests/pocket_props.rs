use flowgen_core::chem::Feature;
use flowgen_core::pocket::*;
use flowgen_nn::{Init, ParamSet};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_pocket(rng: &mut ChaCha8Rng, n: usize, id: &str) -> PocketStructure {
    let mut ca = [0.0; 3];
    let mut index = 0i64;
    let residues = (0..n)
        .map(|_| {
            let step: [f64; 3] = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            let len = (step[0] * step[0] + step[1] * step[1] + step[2] * step[2]).sqrt();
            for k in 0..3 {
                ca[k] += 3.8 * step[k] / len;
            }
            let jitter = |rng: &mut ChaCha8Rng| -> [f64; 3] {
                [rng.gen_range(-1.4..1.4), rng.gen_range(-1.4..1.4), rng.gen_range(-1.4..1.4)]
            };
            let (dn, dc) = (jitter(rng), jitter(rng));
            Residue {
                residue_type: RESIDUE_TYPES.choose(rng).unwrap().to_string(),
                n: [ca[0] + dn[0], ca[1] + dn[1], ca[2] + dn[2]],
                ca,
                c: [ca[0] + dc[0], ca[1] + dc[1], ca[2] + dc[2]],
                // occasional chain breaks
                index: {
                    index += if rng.gen_bool(0.2) { 3 } else { 1 };
                    index
                },
            }
        })
        .collect();
    let pharmacophores = (0..3)
        .map(|_| PharmacophorePoint {
            kind: *Feature::ALL.choose(rng).unwrap(),
            center: [rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)],
        })
        .collect();
    PocketStructure { id: id.into(), residues, pharmacophores }
}

fn random_rotation(rng: &mut ChaCha8Rng) -> [[f64; 3]; 3] {
    // uniform unit quaternion
    let q: [f64; 4] = loop {
        let v = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        let n: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 0.1 && n <= 1.0 {
            break [v[0] / n, v[1] / n, v[2] / n, v[3] / n];
        }
    };
    let [w, x, y, z] = q;
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

fn encoder_params(seed: u64) -> ParamSet<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamSet::<f32>::new();
    PocketEncoder::declare(&mut p, &mut Init::Random(&mut rng)).unwrap();
    p.cast()
}

fn max_diff(a: &PocketEmbedding, b: &PocketEmbedding) -> f64 {
    a.0.iter().zip(&b.0).map(|(x, y)| f64::from((x - y).abs())).fold(0.0, f64::max)
}

#[test]
fn embedding_is_rigid_motion_invariant() {
    let params = encoder_params(1);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let pocket = random_pocket(&mut rng, 40, "inv");
    let base = embed_pocket(&params, &pocket).unwrap();
    assert_eq!(base.0.len(), 128);

    // 90 degrees about z plus (5, 5, 5)
    let rz = [[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]];
    let moved = embed_pocket(&params, &pocket.transformed(&rz, [5.0, 5.0, 5.0])).unwrap();
    assert!(max_diff(&base, &moved) <= 1e-5);

    for _ in 0..100 {
        let r = random_rotation(&mut rng);
        let t = [rng.gen_range(-50.0..50.0), rng.gen_range(-50.0..50.0), rng.gen_range(-50.0..50.0)];
        let e = embed_pocket(&params, &pocket.transformed(&r, t)).unwrap();
        let d = max_diff(&base, &e);
        assert!(d <= 1e-5, "rigid transform changed embedding by {d}");
    }
}

#[test]
fn embedding_is_residue_permutation_invariant() {
    let params = encoder_params(2);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..10 {
        let pocket = random_pocket(&mut rng, 35, "perm");
        let base = embed_pocket(&params, &pocket).unwrap();
        let mut shuffled = pocket.clone();
        shuffled.residues.shuffle(&mut rng);
        assert!(max_diff(&base, &embed_pocket(&params, &shuffled).unwrap()) <= 1e-6);
    }
}

#[test]
fn distinct_pockets_have_distinct_embeddings() {
    let params = encoder_params(3);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = embed_pocket(&params, &random_pocket(&mut rng, 30, "a")).unwrap();
    let b = embed_pocket(&params, &random_pocket(&mut rng, 30, "b")).unwrap();
    let l2: f32 = a.0.iter().zip(&b.0).map(|(x, y)| (x - y) * (x - y)).sum::<f32>().sqrt();
    assert!(l2 > 1e-3, "l2 {l2}");
}

#[test]
fn graph_construction_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let p = random_pocket(&mut rng, 50, "det");
    assert_eq!(build_knn_graph(&p, 30).unwrap(), build_knn_graph(&p, 30).unwrap());
}

#[test]
fn knn_ties_prefer_lower_chain_index() {
    // residue 0 at the origin; residues at equal distance 5 on both sides
    let mk = |ca: [f64; 3], index: i64| Residue {
        residue_type: "GLY".into(),
        n: [ca[0] - 0.5, ca[1] + 1.0, ca[2]],
        ca,
        c: [ca[0] + 1.0, ca[1] + 0.2, ca[2]],
        index,
    };
    let p = PocketStructure {
        id: "tie".into(),
        residues: vec![mk([0.0; 3], 10), mk([5.0, 0.0, 0.0], 30), mk([-5.0, 0.0, 0.0], 20), mk([0.0, 9.0, 0.0], 40)],
        pharmacophores: vec![],
    };
    let g = build_knn_graph(&p, 1).unwrap();
    assert_eq!(g.edges[0], (0, 2));
}
