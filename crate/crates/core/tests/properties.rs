use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use railmatch::classical::{
    count_inliers, icp_trace, icp_translate, objective, ransac_translate, IcpConfig, RansacConfig, INDEX_CELL_MM,
};
use railmatch::eval::{accuracy, combine, is_success, jensen_gap, SuccessCriterion};
use railmatch::geometry::{
    compute_wear, point_to_polyline_distance, Displacement, Point2, Profile, ProfileKind, SegmentIndex,
};
use railmatch::raster::{denormalize_label, normalize_label, render_single, ImageSpec, RED};
use railmatch::synth::{generate_sample, make_design_profile, GenConfig, ShapeRanges, Split};

fn rail(kind: usize, seed: u64) -> Profile {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = ShapeRanges::default().sample(&mut rng);
    make_design_profile(ProfileKind::ALL[kind], &params, seed).unwrap()
}

fn kind() -> impl Strategy<Value = usize> {
    0..ProfileKind::ALL.len()
}

fn offset() -> impl Strategy<Value = Displacement> {
    (-50.0..50.0f64, -50.0..50.0f64).prop_map(|(x, y)| Displacement::new(x, y))
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn centroid_is_translation_equivariant(k in kind(), seed in any::<u64>(), d in offset()) {
        let p = rail(k, seed);
        let c = p.centroid().unwrap();
        let ct = p.translate(d).centroid().unwrap();
        prop_assert!(close(ct.x, c.x + d.dx, 1e-9) && close(ct.y, c.y + d.dy, 1e-9));
    }

    #[test]
    fn point_distance_is_translation_invariant(
        k in kind(), seed in any::<u64>(), d in offset(), qx in -80.0..80.0f64, qy in -20.0..120.0f64,
    ) {
        let p = rail(k, seed);
        let q = Point2::new(qx, qy);
        let a = point_to_polyline_distance(q, &p).0;
        let b = point_to_polyline_distance(q.offset(d), &p.translate(d)).0;
        prop_assert!(close(a, b, 1e-9), "{} vs {}", a, b);
    }

    #[test]
    fn self_wear_is_exactly_zero(k in kind(), seed in any::<u64>()) {
        let p = rail(k, seed);
        let w = compute_wear(&p, &p);
        prop_assert_eq!(w.vertical_wear, Some(0.0));
        prop_assert_eq!(w.side_wear, Some(0.0));
    }

    #[test]
    fn resample_keeps_length_and_vertices(k in kind(), seed in any::<u64>(), spacing in 0.2..5.0f64) {
        let p = rail(k, seed);
        let r = p.resample(spacing).unwrap();
        prop_assert!(((r.length() - p.length()) / p.length()).abs() <= 1e-9);
        let mut j = 0;
        for v in p.points() {
            while j < r.len() && r.points()[j] != *v {
                j += 1;
            }
            prop_assert!(j < r.len(), "vertex {:?} dropped", v);
        }
        for w in r.points().windows(2) {
            prop_assert!(w[0].distance(w[1]) <= spacing * (1.0 + 1e-9));
        }
    }

    #[test]
    fn normalization_round_trips(x in -40.0..=40.0f64, y in -40.0..=40.0f64) {
        let d = Displacement::new(x, y);
        let n = normalize_label(d, 40.0).unwrap();
        prop_assert!(n[0].abs() <= 1.0 && n[1].abs() <= 1.0);
        let back = denormalize_label(n, 40.0);
        prop_assert!(close(back.dx, x, 1e-12) && close(back.dy, y, 1e-12));
    }

    #[test]
    fn success_is_symmetric(px in -2.0..2.0f64, py in -2.0..2.0f64, lx in -2.0..2.0f64, ly in -2.0..2.0f64, tol in 0.01..2.0f64) {
        let c = SuccessCriterion::new(tol);
        let p = Displacement::new(px, py);
        let l = Displacement::new(lx, ly);
        prop_assert_eq!(is_success(p, l, &c), is_success(l, p, &c));
    }

    #[test]
    fn accuracy_grows_with_tolerance(
        errs in prop::collection::vec((-3.0..3.0f64, -3.0..3.0f64), 1..40),
        t1 in 0.01..3.0f64, t2 in 0.01..3.0f64,
    ) {
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let preds: Vec<_> = errs.iter().map(|&(x, y)| Displacement::new(x, y)).collect();
        let labels = vec![Displacement::ZERO; preds.len()];
        let a = accuracy(&preds, &labels, &SuccessCriterion::new(lo)).unwrap();
        let b = accuracy(&preds, &labels, &SuccessCriterion::new(hi)).unwrap();
        prop_assert!(a <= b);
    }

    #[test]
    fn ensemble_mse_never_exceeds_member_mse(
        members in 2usize..5,
        raw in prop::collection::vec((-5.0..5.0f64, -5.0..5.0f64), 40),
        labels in prop::collection::vec((-5.0..5.0f64, -5.0..5.0f64), 10),
        w in prop::collection::vec(0.0..1.0f64, 4),
    ) {
        let n = labels.len();
        let preds: Vec<Vec<Displacement>> = (0..members)
            .map(|m| (0..n).map(|i| { let (x, y) = raw[(m * n + i) % raw.len()]; Displacement::new(x, y) }).collect())
            .collect();
        let total: f64 = w[..members].iter().sum::<f64>() + 1e-12;
        let weights: Vec<f64> = w[..members].iter().map(|v| (v + 1e-12 / members as f64) / total).collect();
        let labels: Vec<_> = labels.iter().map(|&(x, y)| Displacement::new(x, y)).collect();
        let (ens, member) = jensen_gap(&preds, &weights, &labels);
        prop_assert!(ens <= member + 1e-12, "{} > {}", ens, member);

        let mut one_hot = vec![0.0; members];
        one_hot[0] = 1.0;
        for i in 0..n {
            let row: Vec<_> = preds.iter().map(|m| m[i]).collect();
            prop_assert_eq!(combine(&row, &one_hot), preds[0][i]);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn labels_are_exact_and_bounded(seed in any::<u64>(), index in 0usize..1000, k in kind()) {
        let cfg = GenConfig { master_seed: seed, ..GenConfig::default() };
        let g = generate_sample(&cfg, index, ProfileKind::ALL[k], Split::Train).unwrap();
        let s = &g.sample;
        prop_assert!(s.label.dx.abs() < cfg.placement_side && s.label.dy.abs() < cfg.placement_side);
        let moved = s.measured.translate(s.label);
        prop_assert_eq!(moved.len(), g.reference.len());
        for (a, b) in moved.points().iter().zip(g.reference.points()) {
            prop_assert!(a.distance(*b) <= 1e-9);
        }
        let again = generate_sample(&cfg, index, ProfileKind::ALL[k], Split::Train).unwrap();
        prop_assert_eq!(&again.sample, s);
    }

    #[test]
    fn measured_pixels_follow_translation(seed in any::<u64>(), k in kind(), shift in -12i64..12, vertical in any::<bool>()) {
        let spec = ImageSpec::desk();
        let cfg = GenConfig { master_seed: seed, ..GenConfig::clean(seed, 1) };
        let g = generate_sample(&cfg, 0, ProfileKind::ALL[k], Split::Train).unwrap();
        let (dpx, d) = if vertical {
            ((0, -shift), Displacement::new(0.0, shift as f64 * spec.mm_per_px))
        } else {
            ((shift, 0), Displacement::new(shift as f64 * spec.mm_per_px, 0.0))
        };
        let a = render_single(&g.sample.designed, &g.sample.measured, &spec, "a").unwrap();
        let b = match render_single(&g.sample.designed, &g.sample.measured.translate(d), &spec, "b") {
            Ok(b) => b,
            Err(_) => return Ok(()), // pushed off the canvas
        };
        for im in [&a, &b] {
            for px in im.data().chunks(3) {
                let c = [px[0], px[1], px[2]];
                prop_assert!(c == spec.background || c == spec.designed_color || c == spec.measured_color);
            }
        }
        let mut expected: Vec<(i64, i64)> = a
            .pixels_of(RED)
            .into_iter()
            .map(|(c, r)| (c as i64 + dpx.0, r as i64 + dpx.1))
            .collect();
        let mut got: Vec<(i64, i64)> = b.pixels_of(RED).into_iter().map(|(c, r)| (c as i64, r as i64)).collect();
        expected.sort_unstable();
        got.sort_unstable();
        prop_assert_eq!(expected, got);
    }

    #[test]
    fn icp_objective_never_increases(seed in any::<u64>(), index in 0usize..1000, k in kind()) {
        let cfg = GenConfig { master_seed: seed, ..GenConfig::default() };
        let g = generate_sample(&cfg, index, ProfileKind::ALL[k], Split::Train).unwrap();
        let icp = IcpConfig::default();
        let trace = icp_trace(&g.sample.measured, &g.sample.designed, &icp).unwrap();
        for w in trace.objectives.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-12, "{:?}", trace.objectives);
        }
        // Recompute the recorded objectives independently on the resampled moving set.
        let moving = g.sample.measured.resample(icp.resample_spacing).unwrap();
        for (t, v) in trace.translations.iter().zip(&trace.objectives) {
            let direct = objective(&moving, &g.sample.designed, *t, icp.trim_ratio, icp.max_corr_dist).unwrap();
            prop_assert!(close(direct, *v, 1e-9 * v.max(1.0)), "{} vs {}", direct, v);
        }
    }

    #[test]
    fn icp_recovers_clean_translations(k in kind(), seed in any::<u64>(), tx in -20.0..=20.0f64, ty in -20.0..=20.0f64) {
        let designed = rail(k, seed);
        let t = Displacement::new(tx, ty);
        let measured = designed.translate(t);
        let r = icp_translate(&measured, &designed, &IcpConfig::default()).unwrap();
        prop_assert!(r.error.is_none());
        prop_assert!(close(r.displacement.dx, -tx, 1e-3) && close(r.displacement.dy, -ty, 1e-3), "{:?}", r.displacement);
    }

    #[test]
    fn icp_result_is_a_fixed_point(seed in any::<u64>(), index in 0usize..1000, k in kind()) {
        let cfg = GenConfig { master_seed: seed, ..GenConfig::default() };
        let g = generate_sample(&cfg, index, ProfileKind::ALL[k], Split::Train).unwrap();
        let icp = IcpConfig::default();
        let r = icp_translate(&g.sample.measured, &g.sample.designed, &icp).unwrap();
        prop_assume!(r.converged);
        let again = icp_translate(&g.sample.measured.translate(r.displacement), &g.sample.designed, &icp).unwrap();
        prop_assert!(again.displacement.norm() < icp.convergence_eps * 10.0, "{:?}", again.displacement);
    }

    #[test]
    fn ransac_beats_the_centroid_hypothesis(seed in any::<u64>(), index in 0usize..1000, k in kind()) {
        let cfg = GenConfig { master_seed: seed, ..GenConfig::default() };
        let g = generate_sample(&cfg, index, ProfileKind::ALL[k], Split::Train).unwrap();
        let (m, d) = (&g.sample.measured, &g.sample.designed);
        let rc = RansacConfig { seed, ..RansacConfig::default() };
        let r = ransac_translate(m, d, &rc).unwrap();
        let index = SegmentIndex::new(d, INDEX_CELL_MM);
        let baseline = Displacement::between(m.centroid().unwrap(), d.centroid().unwrap());
        let got = count_inliers(m.points(), &index, r.displacement, rc.inlier_threshold);
        let base = count_inliers(m.points(), &index, baseline, rc.inlier_threshold);
        prop_assert!(got >= base, "{} < {}", got, base);
    }
}
