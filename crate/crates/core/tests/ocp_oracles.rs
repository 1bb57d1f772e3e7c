mod common;

use common::*;
use ocnet_core::ocp::{object_context_aggregate, object_context_estimate, ocp_forward, OcpParams};
use ocnet_core::Tensor;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

fn transforms(p: &OcpParams<f64>) -> (Tensor<f64>, Tensor<f64>, Tensor<f64>) {
    let q = p.query.weight.get();
    let k = p.key.as_ref().map_or_else(|| q.clone(), |k| k.weight.get());
    (q, k, p.value.weight.get())
}

/// Random instance with `N = h·w ≤ 36`.
fn instance(seed: u64, shared: bool) -> (Tensor<f64>, OcpParams<f64>) {
    let mut r = rng(seed);
    let (h, w) = (r.gen_range(1..=6), r.gen_range(1..=6));
    let (b, c, kc, oc) = (r.gen_range(1..=2), r.gen_range(1..=5), r.gen_range(1..=4), r.gen_range(1..=4));
    let p = if shared {
        OcpParams::shared(c, kc, oc, &mut r)
    } else {
        OcpParams::new(c, kc, oc, &mut r)
    };
    (uniform(&[b, c, h, w], &mut r), p)
}

#[test]
fn estimate_matches_brute_force_on_50_instances() {
    for seed in 0..50 {
        let (x, p) = instance(seed, seed % 2 == 1);
        let (qw, kw, _) = transforms(&p);
        let map = object_context_estimate(&x, &p).unwrap();
        let n = map.pixels();
        assert!(n <= 36);
        for (b, feats) in pixels(&x).iter().enumerate() {
            let q: Vec<_> = feats.iter().map(|f| apply_1x1(&qw, f)).collect();
            let k: Vec<_> = feats.iter().map(|f| apply_1x1(&kw, f)).collect();
            let oracle = brute_weights(&q, &k);
            for pi in 0..n {
                let row = map.row(b, pi / map.width, pi % map.width);
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                for i in 0..n {
                    assert!((row[i] - oracle[pi][i]).abs() < 1e-6, "seed {seed}");
                }
            }
        }
    }
}

#[test]
fn aggregate_matches_brute_force_on_50_instances() {
    for seed in 0..50 {
        let (x, p) = instance(seed, seed % 2 == 1);
        let (_, _, vw) = transforms(&p);
        let map = object_context_estimate(&x, &p).unwrap();
        let out = object_context_aggregate(&x, &map, &p).unwrap();
        let n = map.pixels();
        let oc = p.out_channels();
        for (b, feats) in pixels(&x).iter().enumerate() {
            let phi: Vec<_> = feats.iter().map(|f| apply_1x1(&vw, f)).collect();
            let rows: Vec<Vec<f64>> = (0..n).map(|pi| map.row(b, pi / map.width, pi % map.width).to_vec()).collect();
            let oracle = brute_aggregate(&rows, &phi);
            for pi in 0..n {
                for c in 0..oc {
                    let got = out.data()[(b * oc + c) * n + pi];
                    assert!((got - oracle[pi][c]).abs() < 1e-6, "seed {seed}");
                }
            }
        }
    }
}

#[test]
fn identity_transforms_on_a_prescribed_2x2_map() {
    // channels-first: pixel p has features (a_p, b_p)
    let x = Tensor::new(&[1, 2, 2, 2], vec![1.0, 0.0, -1.0, 0.5, 0.0, 2.0, 1.0, -0.5]).unwrap();
    let p = OcpParams::<f64>::new(2, 2, 2, &mut rng(0));
    let eye = vec![1.0, 0.0, 0.0, 1.0];
    for conv in [&p.query, p.key.as_ref().unwrap(), &p.value] {
        conv.weight.set_data(eye.clone()).unwrap();
    }
    let feats: [[f64; 2]; 4] = [[1.0, 0.0], [0.0, 2.0], [-1.0, 1.0], [0.5, -0.5]];
    let map = object_context_estimate(&x, &p).unwrap();
    for a in 0..4 {
        let z: f64 = feats.iter().map(|f| (feats[a][0] * f[0] + feats[a][1] * f[1]).exp()).sum();
        for i in 0..4 {
            let want = (feats[a][0] * feats[i][0] + feats[a][1] * feats[i][1]).exp() / z;
            assert!((map.weights.data()[a * 4 + i] - want).abs() < 1e-6);
        }
    }
}

#[test]
fn composed_forward_on_a_3x4_map() {
    let mut r = rng(34);
    let x = uniform(&[1, 3, 3, 4], &mut r);
    let p = OcpParams::<f64>::new(3, 2, 3, &mut r);
    let (qw, kw, vw) = transforms(&p);
    let feats = &pixels(&x)[0];
    let q: Vec<_> = feats.iter().map(|f| apply_1x1(&qw, f)).collect();
    let k: Vec<_> = feats.iter().map(|f| apply_1x1(&kw, f)).collect();
    let phi: Vec<_> = feats.iter().map(|f| apply_1x1(&vw, f)).collect();
    let oracle = brute_aggregate(&brute_weights(&q, &k), &phi);
    let out = ocp_forward(&x, &p).unwrap();
    for pi in 0..12 {
        for c in 0..3 {
            assert!((out.data()[c * 12 + pi] - oracle[pi][c]).abs() < 1e-6);
        }
    }
}

/// `[B, C, H, W]` with pixel `p` moved to `perm[p]`.
fn permute(x: &Tensor<f32>, perm: &[usize]) -> Tensor<f32> {
    let s = x.shape();
    let n = s[2] * s[3];
    let mut out = vec![0.0; x.numel()];
    for plane in 0..s[0] * s[1] {
        for p in 0..n {
            out[plane * n + perm[p]] = x.data()[plane * n + p];
        }
    }
    Tensor::new(s, out).unwrap()
}

#[test]
fn permutation_equivariance_on_20_permutations() {
    let mut r = rng(4);
    for shared in [false, true] {
        let p = if shared {
            OcpParams::<f32>::shared(6, 3, 5, &mut r)
        } else {
            OcpParams::<f32>::new(6, 3, 5, &mut r)
        };
        let x = uniform_f32(&[2, 6, 4, 5], &mut r);
        let base = ocp_forward(&x, &p).unwrap();
        for _ in 0..20 {
            let mut perm: Vec<usize> = (0..20).collect();
            perm.shuffle(&mut r);
            let moved = ocp_forward(&permute(&x, &perm), &p).unwrap();
            for (a, b) in moved.data().iter().zip(permute(&base, &perm).data()) {
                assert!((a - b).abs() < 1e-5);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rows_stochastic_and_output_in_hull(seed in any::<u64>(), h in 1usize..5, w in 1usize..5, c in 1usize..4) {
        let mut r = rng(seed);
        let p = OcpParams::<f64>::new(c, 2, 3, &mut r);
        // large features make the softmax nearly one-hot, the hardest case for the hull bound
        let x = uniform(&[1, c, h, w], &mut r).scale(4.0);
        let map = object_context_estimate(&x, &p).unwrap();
        for row in map.weights.data().chunks(h * w) {
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        let out = object_context_aggregate(&x, &map, &p).unwrap();
        let phi = p.value.forward(&x).unwrap();
        let n = h * w;
        for ch in 0..3 {
            let plane = &phi.data()[ch * n..(ch + 1) * n];
            let lo = plane.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = plane.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            for &v in &out.data()[ch * n..(ch + 1) * n] {
                prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            }
        }
    }
}
