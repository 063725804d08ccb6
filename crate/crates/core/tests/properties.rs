mod common;

use common::oracle::Lin;
use common::{bind_lins, random_lin, random_points, random_rows, rng, rows_of, tensor};
use elgs_core::backbone::{BlockGeometry, ModelParams, NetworkConfig};
use elgs_core::enrichment::{contextual_representation, gated_fuse, EnrichmentParams};
use elgs_core::gpm::{gab_forward, gpm_forward, GpmParams};
use elgs_core::head::{channel_weights, spatial_attention, spatial_context, AttentionParams};
use elgs_core::spatial::{farthest_point_sample, interpolation_weights, knn};
use elgs_core::tensor::{Graph, Precision};
use elgs_core::train::evaluate;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

fn permuted<T: Clone>(rows: &[T], perm: &[usize]) -> Vec<T> {
    perm.iter().map(|&i| rows[i].clone()).collect()
}

fn random_perm(r: &mut impl Rng, n: usize) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(r);
    p
}

/// Gpm parameters drawn from the library initializer.
fn gpm_params(g: &mut Graph, c_in: usize, width: usize, seed: u64) -> GpmParams {
    let params = ModelParams::init(&GpmParams::decl("gpm", c_in, width, 2, 2), seed).unwrap();
    let bound = params.bind(g);
    GpmParams::bind(&bound, "gpm", 2, 2).unwrap()
}

fn attention_params(g: &mut Graph, a: &Lin, b: &Lin, d: &Lin) -> AttentionParams {
    let (_, l) = bind_lins(g, &[("a", a), ("b", b), ("d", d)]);
    AttentionParams { fc_a: l[0], fc_b: l[1], fc_d: l[2] }
}

fn assert_rows_sum_to_one(w: &[f64], n: usize) -> Result<(), TestCaseError> {
    for row in w.chunks(n) {
        let s: f64 = row.iter().sum();
        prop_assert!((s - 1.0).abs() <= 1e-9, "row sum {s}");
        prop_assert!(row.iter().all(|&p| p > 0.0));
    }
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn softmax_rows_normalize(seed in any::<u64>(), n in 1usize..6, c in 1usize..9, scale in 0.1f64..30.0) {
        let mut r = rng(seed);
        let x = random_rows(&mut r, n, c, scale);
        let mut g = Graph::new(Precision::F64);
        let xv = g.input(&tensor(&x));
        let s = g.softmax_rows(xv).unwrap();
        assert_rows_sum_to_one(g.value(s), c)?;
    }

    #[test]
    fn gab_weights_normalize(seed in any::<u64>(), groups in 1usize..4, n in 1usize..7, c in 1usize..6) {
        let mut r = rng(seed);
        let x = random_rows(&mut r, groups * n, c, 2.0);
        let proj = random_lin(&mut r, c, c, 1.0);
        let mut g = Graph::new(Precision::F64);
        let (_, l) = bind_lins(&mut g, &[("proj", &proj)]);
        let xv = g.input(&tensor(&x));
        let out = gab_forward(&mut g, xv, groups, &l[0], 0.2).unwrap();
        let beta = g.attention_weights(out).unwrap();
        prop_assert_eq!(beta.len(), groups * n * n);
        assert_rows_sum_to_one(beta, n)?;
    }

    #[test]
    fn spatial_weights_normalize(seed in any::<u64>(), n in 1usize..12, c in 1usize..6) {
        let mut r = rng(seed);
        let f = random_rows(&mut r, n, c, 2.0);
        let (a, b, d) = (random_lin(&mut r, c, c, 1.0), random_lin(&mut r, c, c, 1.0), random_lin(&mut r, c, c, 1.0));
        let mut g = Graph::new(Precision::F64);
        let p = attention_params(&mut g, &a, &b, &d);
        let fv = g.input(&tensor(&f));
        let ctx = spatial_context(&mut g, fv, &p).unwrap();
        assert_rows_sum_to_one(g.attention_weights(ctx).unwrap(), n)?;
    }

    #[test]
    fn channel_weight_columns_normalize(seed in any::<u64>(), n in 1usize..10, c in 1usize..8) {
        let mut r = rng(seed);
        let f = random_rows(&mut r, n, c, 1.5);
        let mut g = Graph::new(Precision::F64);
        let fv = g.input(&tensor(&f));
        let m = channel_weights(&mut g, fv).unwrap();
        let m = g.value(m);
        for q in 0..c {
            let s: f64 = (0..c).map(|p| m[p * c + q]).sum();
            prop_assert!((s - 1.0).abs() <= 1e-9, "column {q} sums to {s}");
        }
    }

    #[test]
    fn interpolation_weights_normalize(seed in any::<u64>(), s in 1usize..30, n in 1usize..30) {
        let mut r = rng(seed);
        let w = interpolation_weights(&random_points(&mut r, s, 1.0), &random_points(&mut r, n, 1.0)).unwrap();
        for q in 0..n {
            let total: f64 = w.row(q).iter().map(|e| e.1).sum();
            prop_assert!((total - 1.0).abs() <= 1e-9);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn gpm_pool_is_bit_invariant_to_member_order(seed in any::<u64>(), c in 1usize..6) {
        let mut r = rng(seed);
        let members = random_rows(&mut r, 3, c, 1.0);
        let orders = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
        let mut pooled = Vec::new();
        for order in orders {
            let mut g = Graph::new(Precision::F64);
            let p = gpm_params(&mut g, c, 4, seed);
            let x = g.input(&tensor(&permuted(&members, &order)));
            let out = gpm_forward(&mut g, x, 1, &p, 0.2).unwrap();
            pooled.push(g.value(out.pooled).to_vec());
        }
        for p in &pooled[1..] {
            prop_assert_eq!(p, &pooled[0]);
        }
    }

    #[test]
    fn gpm_members_permute_with_input(seed in any::<u64>(), groups in 1usize..4, n in 1usize..6) {
        let mut r = rng(seed);
        let x = random_rows(&mut r, groups * n, 3, 1.0);
        // Permute inside each group only.
        let mut perm = Vec::new();
        for gi in 0..groups {
            perm.extend(random_perm(&mut r, n).into_iter().map(|i| gi * n + i));
        }
        let run = |rows: &Vec<Vec<f64>>| {
            let mut g = Graph::new(Precision::F64);
            let p = gpm_params(&mut g, 3, 4, seed);
            let xv = g.input(&tensor(rows));
            let out = gpm_forward(&mut g, xv, groups, &p, 0.2).unwrap();
            (rows_of(&g, out.members), g.value(out.pooled).to_vec())
        };
        let (m0, p0) = run(&x);
        let (m1, p1) = run(&permuted(&x, &perm));
        prop_assert_eq!(permuted(&m0, &perm), m1);
        prop_assert_eq!(p0, p1);
    }

    #[test]
    fn spatial_attention_permutes_exactly(seed in any::<u64>(), n in 1usize..16, c in 1usize..6) {
        let mut r = rng(seed);
        let f = random_rows(&mut r, n, c, 1.0);
        let (a, b, d) = (random_lin(&mut r, c, c, 1.0), random_lin(&mut r, c, c, 1.0), random_lin(&mut r, c, c, 1.0));
        let perm = random_perm(&mut r, n);
        let run = |rows: &Vec<Vec<f64>>| {
            let mut g = Graph::new(Precision::F64);
            let p = attention_params(&mut g, &a, &b, &d);
            let fv = g.input(&tensor(rows));
            let out = spatial_attention(&mut g, fv, &p).unwrap();
            rows_of(&g, out)
        };
        prop_assert_eq!(permuted(&run(&f), &perm), run(&permuted(&f, &perm)));
    }

    #[test]
    fn metrics_ignore_point_order(seed in any::<u64>(), n in 1usize..200, classes in 1usize..6) {
        let mut r = rng(seed);
        let truth: Vec<usize> = (0..n).map(|_| r.random_range(0..classes)).collect();
        let pred: Vec<usize> = (0..n).map(|_| r.random_range(0..classes)).collect();
        let perm = random_perm(&mut r, n);
        let a = evaluate(&pred, &truth, classes).unwrap();
        let b = evaluate(&permuted(&pred, &perm), &permuted(&truth, &perm), classes).unwrap();
        prop_assert_eq!(a.miou, b.miou);
        prop_assert_eq!(a.oa, b.oa);
        prop_assert_eq!(a.confusion, b.confusion);
    }

    #[test]
    fn knn_lists_are_sorted_and_capped(seed in any::<u64>(), n in 1usize..200, k in 1usize..6, radius in 0.01f64..0.4) {
        let mut r = rng(seed);
        let pts = random_points(&mut r, n, 1.0);
        let nb = knn(&pts, &pts, k, radius).unwrap();
        for q in 0..n {
            let d = nb.distances(q);
            prop_assert!(d.windows(2).all(|w| w[0] <= w[1]));
            // Padding repeats the nearest, so distinct entries are all inside the cap.
            prop_assert!(d.iter().all(|&x| x <= radius * radius));
            prop_assert_eq!(nb.neighbors(q)[0], q);
        }
    }

    #[test]
    fn fps_is_permutation_covariant(seed in any::<u64>(), n in 2usize..120, frac in 0.05f64..1.0) {
        let mut r = rng(seed);
        let pts = random_points(&mut r, n, 1.0);
        let s = ((n as f64 * frac) as usize).clamp(1, n);
        // Keep the start point in front so the deterministic start maps onto itself.
        let mut perm = vec![0];
        let mut rest: Vec<usize> = (1..n).collect();
        rest.shuffle(&mut r);
        perm.extend(rest);
        let base = farthest_point_sample(&pts, s, None).unwrap();
        let moved = farthest_point_sample(&permuted(&pts, &perm), s, None).unwrap();
        prop_assert_eq!(moved.iter().map(|&i| perm[i]).collect::<Vec<_>>(), base);
    }

    #[test]
    fn enrichment_is_permutation_equivariant(seed in any::<u64>(), n in 3usize..40) {
        let mut r = rng(seed);
        let pts = random_points(&mut r, n, 0.3);
        let feats = random_rows(&mut r, n, 3, 1.0);
        let perm = random_perm(&mut r, n);
        let params = ModelParams::init(&EnrichmentParams::decl("e", 3, 3), seed).unwrap();
        let run = |pts: &[[f64; 3]], feats: &Vec<Vec<f64>>| {
            let nb = knn(pts, pts, 3, 0.06).unwrap();
            let mut g = Graph::new(Precision::F64);
            let bound = params.bind(&mut g);
            let e = EnrichmentParams::bind(&bound, "e").unwrap();
            let fv = g.input(&tensor(feats));
            let ctx = contextual_representation(&mut g, fv, &nb).unwrap();
            let out = gated_fuse(&mut g, fv, ctx, &e).unwrap();
            rows_of(&g, out)
        };
        let base = run(&pts, &feats);
        prop_assert_eq!(permuted(&base, &perm), run(&permuted(&pts, &perm), &permuted(&feats, &perm)));
    }

    #[test]
    fn duplicate_member_leaves_pool_unchanged(seed in any::<u64>(), n in 1usize..6) {
        let mut r = rng(seed);
        let members = random_rows(&mut r, n, 3, 1.0);
        let dup = r.random_range(0..n);
        let mut with_dup = members.clone();
        with_dup.push(members[dup].clone());
        // GAB mixes members, so duplication is checked on the pooling itself.
        let pool = |rows: &Vec<Vec<f64>>| {
            let mut g = Graph::new(Precision::F64);
            let x = g.input(&tensor(rows));
            let p = g.max_over_rows(x, rows.len()).unwrap();
            g.value(p).to_vec()
        };
        prop_assert_eq!(pool(&members), pool(&with_dup));
    }
}

fn toy_config() -> NetworkConfig {
    NetworkConfig {
        layer_scales: vec![16, 4],
        layer_radii: vec![0.3, 0.6],
        group_sizes: vec![8, 4],
        channel_widths: vec![8, 8],
        gpm_enabled: vec![true, false],
        decoder_widths: vec![8, 8],
        num_classes: 3,
        ..NetworkConfig::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn layer_one_centroids_ignore_input_order(seed in any::<u64>()) {
        let mut r = rng(seed);
        let pts = random_points(&mut r, 48, 1.0);
        let mut perm = vec![0];
        let mut rest: Vec<usize> = (1..48).collect();
        rest.shuffle(&mut r);
        perm.extend(rest);
        let sorted = |geo: BlockGeometry| {
            let mut c = geo.levels[0].xyz.clone();
            c.sort_by(|a, b| a.partial_cmp(b).unwrap());
            c
        };
        let cfg = toy_config();
        let a = sorted(BlockGeometry::build(&pts, &cfg).unwrap());
        let b = sorted(BlockGeometry::build(&permuted(&pts, &perm), &cfg).unwrap());
        prop_assert_eq!(a, b);
    }
}
