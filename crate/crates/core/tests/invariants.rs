//! Cross-module properties checked on random inputs.

use handlefield::autoencoder::LatentCode;
use handlefield::dataset::{generate_dataset, Dataset, GenerateConfig};
use handlefield::editing::{propose_step, style_transfer, EditRequest};
use handlefield::evaluation::{coverage_from_distances, mmd_from_distances, EvalSplit};
use handlefield::geometry::{chamfer_distance, farthest_point_sampling, Point3, ShapeFamily};
use handlefield::segmentation::{build_similarity_graph, normalize_features, score_segmentation};
use ndarray::Array3;
use proptest::prelude::*;

fn point() -> impl Strategy<Value = Point3> {
    (-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64).prop_map(|(x, y, z)| Point3::new(x, y, z))
}

fn code(h: usize) -> impl Strategy<Value = LatentCode> {
    (prop::collection::vec(point(), h), prop::collection::vec(-2.0..2.0f64, 3), prop::collection::vec(-2.0..2.0f64, 2))
        .prop_map(|(handles, style, residual)| LatentCode { handles, style, residual })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn edit_steps_are_capped_and_never_overshoot(
        c in code(5),
        targets in prop::collection::vec((0usize..5, point()), 1..4),
        max_step in 0.01..0.5f64,
    ) {
        let mut seen = [false; 5];
        let edits: Vec<(usize, Point3)> = targets.into_iter().filter(|(i, _)| !std::mem::replace(&mut seen[*i], true)).collect();
        let next = propose_step(&c, &EditRequest::new(edits.clone()), max_step);
        for (i, (&before, &after)) in c.handles.iter().zip(&next).enumerate() {
            match edits.iter().find(|(j, _)| *j == i) {
                Some(&(_, t)) => {
                    prop_assert!(before.distance(after) <= max_step + 1e-12);
                    let expected = (before.distance(t) - max_step).max(0.0);
                    prop_assert!((after.distance(t) - expected).abs() < 1e-9);
                }
                None => prop_assert_eq!(before, after),
            }
        }
    }

    #[test]
    fn style_transfer_twice_restores_both_codes(a in code(3), b in code(3)) {
        let (ab, ba) = style_transfer(&a, &b);
        prop_assert_eq!(&ab.handles, &a.handles);
        prop_assert_eq!(&ab.style, &b.style);
        let (a2, b2) = style_transfer(&ab, &ba);
        prop_assert_eq!(a2, a);
        prop_assert_eq!(b2, b);
    }

    #[test]
    fn normalized_descriptors_have_unit_l1(vals in prop::collection::vec(0.0..3.0f64, 6 * 2 * 4)) {
        let raw = Array3::from_shape_vec((6, 2, 4), vals).unwrap();
        let f = normalize_features(&raw);
        for i in 0..6 {
            let s: f64 = f.slice(ndarray::s![i, .., ..]).iter().sum();
            let raw_s: f64 = raw.slice(ndarray::s![i, .., ..]).iter().sum();
            if raw_s > 0.0 {
                prop_assert!((s - 1.0).abs() < 1e-9);
            } else {
                prop_assert_eq!(s, 0.0);
            }
        }
        prop_assert!(f.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn similarity_graphs_are_symmetric_and_bounded(vals in prop::collection::vec(0.0..1.0f64, 10 * 3), frac in 0.05..0.9f64) {
        let feats: Vec<Vec<f64>> = vals.chunks(3).map(|c| c.to_vec()).collect();
        let g = build_similarity_graph(&feats, frac).unwrap();
        let w = g.to_dense();
        for i in 0..10 {
            prop_assert!(!g.neighbors[i].is_empty());
            for j in 0..10 {
                prop_assert_eq!(w[(i, j)], w[(j, i)]);
                prop_assert!((0.0..=1.0).contains(&w[(i, j)]));
            }
        }
    }

    #[test]
    fn segmentation_score_ignores_label_names(truth in prop::collection::vec(0usize..3, 1..40), perm in Just([2usize, 0, 1])) {
        let renamed: Vec<usize> = truth.iter().map(|&l| perm[l]).collect();
        prop_assert!((score_segmentation(&renamed, &truth).unwrap() - 1.0).abs() < 1e-12);
        let constant = vec![0; truth.len()];
        let s = score_segmentation(&constant, &truth).unwrap();
        prop_assert!(s > 0.0 && s <= 1.0);
    }

    #[test]
    fn more_variations_never_hurt_coverage_or_mmd(
        rows in prop::collection::vec(prop::collection::vec(0.0..1.0f64, 4), 1..6),
        extra in prop::collection::vec(0.0..1.0f64, 4),
    ) {
        let ids = [10u64, 11, 12, 13];
        let (c0, m0) = (coverage_from_distances(&rows, &ids).unwrap(), mmd_from_distances(&rows, 4).unwrap());
        let mut more = rows.clone();
        more.push(extra);
        let (c1, m1) = (coverage_from_distances(&more, &ids).unwrap(), mmd_from_distances(&more, 4).unwrap());
        prop_assert!((0.0..=100.0).contains(&c0));
        prop_assert!(c1 >= c0);
        prop_assert!(m1 <= m0);
    }

    #[test]
    fn chamfer_is_a_symmetric_premetric(p in prop::collection::vec(point(), 1..30), q in prop::collection::vec(point(), 1..30)) {
        let d = chamfer_distance(&p, &q).unwrap();
        prop_assert!(d >= 0.0);
        prop_assert!((d - chamfer_distance(&q, &p).unwrap()).abs() < 1e-12);
        prop_assert_eq!(chamfer_distance(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn fps_picks_distinct_points(p in prop::collection::vec(point(), 2..40), k in 1usize..10) {
        let k = k.min(p.len());
        let idx = farthest_point_sampling(&p, k).unwrap();
        let mut sorted = idx.clone();
        sorted.sort_unstable();
        sorted.dedup();
        prop_assert_eq!(idx.len(), k);
        prop_assert!(sorted.len() == k || p.iter().any(|a| p.iter().filter(|b| *b == a).count() > 1));
    }

    #[test]
    fn eval_split_partitions_the_ids(n in 2usize..60, cap in 1usize..20, seed in any::<u64>()) {
        let ids: Vec<u64> = (0..n as u64).map(|i| i * 7 + 3).collect();
        let s = EvalSplit::new(&ids, cap, seed).unwrap();
        prop_assert_eq!(s.a.len(), cap.min(n / 4).max(1));
        let mut all: Vec<u64> = s.a.iter().chain(&s.b).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, ids.clone());
        prop_assert_eq!(EvalSplit::new(&ids, cap, seed).unwrap(), s);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn datasets_round_trip_through_bytes(seed in any::<u64>(), count in 1usize..4, boxes in any::<bool>()) {
        let family = if boxes { ShapeFamily::ProcBoxes } else { ShapeFamily::ProcTables };
        let cfg = GenerateConfig { n_uniform: 32, n_surface: 16, handle_count: 3, ..GenerateConfig::new(family, count, seed) };
        let ds = generate_dataset(&cfg).unwrap();
        prop_assert_eq!(Dataset::from_bytes(&ds.to_bytes()).unwrap(), ds.clone());
        prop_assert_eq!(generate_dataset(&cfg).unwrap(), ds);
    }
}
