mod support;

use mome_core::autograd::Graph;
use mome_core::head::MomeModel;
use mome_core::router::{fuse_field, normalize_gate_field, normalize_gates, topk_filter, topk_gate_field, GateField};
use mome_core::tensor::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use support::*;

fn random_patch(rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let data = (0..512).map(|_| rng.gen_range(0.0f32..1.0)).collect();
    Tensor::from_vec(&[1, 8, 8, 8], data).unwrap()
}

#[test]
fn gates_stay_on_the_simplex_over_random_forwards() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let names = ["liver", "kidney", "spleen", "pancreas", "liver tumor", "kidney tumor"];
    let mut forwards = 0;
    for trial in 0..40u64 {
        let model = MomeModel::<f32>::new(tiny_config(), trial).unwrap();
        let patch = random_patch(&mut rng);
        let picked: Vec<&str> = (0..3).map(|_| names[rng.gen_range(0..names.len())]).collect();
        let emb = stub_embeddings(&picked, 16);
        for k in 1..=3 {
            let (g, trace) = model.trace(&patch, &emb, k).unwrap();
            for field in trace.gate_fields(&g) {
                let err = field.simplex_error();
                assert!(err <= 1e-5, "trial {trial} k {k}: simplex error {err}");
                assert!(field.max_nonzero_per_voxel() <= k);
            }
            forwards += 1;
        }
    }
    assert!(forwards >= 100);
}

#[test]
fn full_width_filter_returns_its_input_bit_for_bit() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..100 {
        let mut g = Graph::<f32>::inference();
        let raw: Vec<_> = (0..4)
            .map(|_| g.constant(Tensor::from_vec(&[1, 64], (0..64).map(|_| rng.gen_range(-6.0f32..6.0)).collect()).unwrap()))
            .collect();
        let normed = normalize_gates(&mut g, &raw);
        let kept = topk_filter(&mut g, &normed, 4).unwrap();
        for (a, b) in normed.iter().zip(&kept) {
            let (a, b) = (g.value(*a).data(), g.value(*b).data());
            assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }
}

fn field_from(l: usize, n: usize, data: Vec<f64>) -> GateField<f64> {
    GateField {
        class_index: 0,
        gates: Tensor::from_vec(&[l, 1, 1, n], data).unwrap(),
    }
}

fn tokens_from(l: usize, c: usize, n: usize, data: &[f64]) -> Vec<Tensor<f64>> {
    (0..l)
        .map(|e| Tensor::from_vec(&[c, 1, 1, n], data[e * c * n..(e + 1) * c * n].to_vec()).unwrap())
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn normalised_and_filtered_fields_are_simplices(
        raw in prop::collection::vec(-8.0f64..8.0, 4 * 12),
        k in 1usize..=4,
    ) {
        let f = normalize_gate_field(&Tensor::from_vec(&[4, 1, 1, 12], raw).unwrap(), 0);
        prop_assert!(f.simplex_error() <= 1e-5);
        let t = topk_gate_field(&f, k).unwrap();
        prop_assert!(t.simplex_error() <= 1e-5);
        prop_assert!(t.max_nonzero_per_voxel() <= k);
    }

    #[test]
    fn one_hot_gates_select_one_expert_exactly(
        toks in prop::collection::vec(-50.0f64..50.0, 3 * 4 * 5),
        pick in prop::collection::vec(0usize..3, 5),
    ) {
        let (l, c, n) = (3, 4, 5);
        let mut gates = vec![0.0; l * n];
        for (x, &e) in pick.iter().enumerate() {
            gates[e * n + x] = 1.0;
        }
        let fused = fuse_field(&field_from(l, n, gates), &tokens_from(l, c, n, &toks)).unwrap();
        for (x, &e) in pick.iter().enumerate() {
            for ch in 0..c {
                prop_assert_eq!(fused.data()[ch * n + x].to_bits(), toks[(e * c + ch) * n + x].to_bits());
            }
        }
    }

    #[test]
    fn identical_tokens_make_fusion_gate_invariant(
        tok in prop::collection::vec(-1000i32..1000, 4 * 5),
        cuts_a in prop::collection::vec((0u32..=8, 0u32..=8), 5),
        cuts_b in prop::collection::vec((0u32..=8, 0u32..=8), 5),
    ) {
        let (l, c, n) = (3, 4, 5);
        let tok: Vec<f64> = tok.into_iter().map(f64::from).collect();
        let toks: Vec<f64> = (0..l).flat_map(|_| tok.iter().copied()).collect();
        let tokens = tokens_from(l, c, n, &toks);
        let a = fuse_field(&field_from(l, n, dyadic_gates(&cuts_a)), &tokens).unwrap();
        let b = fuse_field(&field_from(l, n, dyadic_gates(&cuts_b)), &tokens).unwrap();
        for i in 0..c * n {
            prop_assert_eq!(a.data()[i].to_bits(), tok[i].to_bits());
            prop_assert_eq!(b.data()[i].to_bits(), tok[i].to_bits());
        }
    }

    #[test]
    fn fusion_is_equivariant_under_expert_permutation(
        toks in prop::collection::vec(-1000i32..1000, 3 * 2 * 4),
        cuts in prop::collection::vec((0u32..=8, 0u32..=8), 4),
        perm_index in 0usize..6,
    ) {
        let (l, c, n) = (3, 2, 4);
        let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
        let perm = perms[perm_index];
        let toks: Vec<f64> = toks.into_iter().map(f64::from).collect();
        let f = field_from(l, n, dyadic_gates(&cuts));
        let tokens = tokens_from(l, c, n, &toks);
        let base = fuse_field(&f, &tokens).unwrap();
        let pg: Vec<f64> = perm.iter().flat_map(|&e| f.gates.channel(e).data().to_vec()).collect();
        let pt: Vec<Tensor<f64>> = perm.iter().map(|&e| tokens[e].clone()).collect();
        let permuted = fuse_field(&field_from(l, n, pg), &pt).unwrap();
        for i in 0..c * n {
            prop_assert_eq!(base.data()[i].to_bits(), permuted.data()[i].to_bits());
        }
    }

    #[test]
    fn normalised_gates_with_identical_tokens_reproduce_them(
        tok in prop::collection::vec(-50.0f64..50.0, 4 * 5),
        raw in prop::collection::vec(-8.0f64..8.0, 3 * 5),
    ) {
        let (l, c, n) = (3, 4, 5);
        let toks: Vec<f64> = (0..l).flat_map(|_| tok.iter().copied()).collect();
        let f = normalize_gate_field(&Tensor::from_vec(&[l, 1, 1, n], raw).unwrap(), 0);
        let fused = fuse_field(&f, &tokens_from(l, c, n, &toks)).unwrap();
        let slack = f.simplex_error() + 1e-12;
        for i in 0..c * n {
            prop_assert!((fused.data()[i] - tok[i]).abs() <= slack * tok[i].abs().max(1.0));
        }
    }
}

/// Per voxel, three gates in eighths summing to one.
fn dyadic_gates(cuts: &[(u32, u32)]) -> Vec<f64> {
    let n = cuts.len();
    let mut g = vec![0.0; 3 * n];
    for (x, &(a, b)) in cuts.iter().enumerate() {
        let (lo, hi) = (a.min(b), a.max(b));
        g[x] = lo as f64 / 8.0;
        g[n + x] = (hi - lo) as f64 / 8.0;
        g[2 * n + x] = (8 - hi) as f64 / 8.0;
    }
    g
}
