//! Property tests: serialization round trips, token ordering, scoring
//! invariants, budget conservation, and rank-correlation invariances.

use std::collections::BTreeMap;

use proptest::prelude::*;

use ghost_core::budget::{LayerProfile, allocate_budgets};
use ghost_core::domain::{
    Appearance, FeatureGrid, FrameMeta, Grid, KeyBlock, Pose, ScoreWeights, TokenRef,
};
use ghost_core::engine::select_topk;
use ghost_core::scoring::{
    FrameRawScores, camera_change, combined_score, final_renormalize, frame_scores,
    special_boost, temporal_recency,
};
use ghost_core::simgen::spearman;
use ghost_core::trace::{frame_from_line, frame_to_line, plan_from_json, plan_to_json};

fn finite_f64(range: std::ops::Range<f64>) -> impl Strategy<Value = f64> {
    range.prop_filter("finite", |v| v.is_finite())
}

fn pose_strategy() -> impl Strategy<Value = Pose> {
    (
        proptest::array::uniform3(finite_f64(-100.0..100.0)),
        proptest::array::uniform4(finite_f64(-1.0..1.0))
            .prop_filter("nonzero quaternion", |q| {
                q.iter().map(|v| v * v).sum::<f64>() > 1e-6
            }),
        finite_f64(1.0..2000.0),
    )
        .prop_map(|(t, q, f)| Pose::new(t, q, f).unwrap())
}

fn grid_strategy(rows: usize, cols: usize, lo: f32, hi: f32) -> impl Strategy<Value = Grid> {
    proptest::collection::vec(lo..hi, rows * cols)
        .prop_map(move |data| Grid::new(rows, cols, data).unwrap())
}

fn frame_strategy() -> impl Strategy<Value = FrameMeta> {
    (
        1u64..1000,
        pose_strategy(),
        grid_strategy(5, 6, 0.0, 10.0),
        grid_strategy(5, 6, 0.0, 1.0),
        grid_strategy(5, 6, 0.0, 1.0),
        prop_oneof![
            proptest::collection::vec(-2.0f32..2.0, 3 * 3 * 2).prop_map(|data| {
                Appearance::Features(FeatureGrid::new(3, 3, 2, data).unwrap())
            }),
            proptest::collection::vec(0.0f32..5.0, 3 * 3)
                .prop_map(|data| Appearance::Saliency(Grid::new(3, 3, data).unwrap())),
        ],
        proptest::option::of(
            proptest::collection::vec(-1.0f32..1.0, 4 * 2)
                .prop_map(|data| KeyBlock::new(2, data).unwrap()),
        ),
    )
        .prop_map(
            |(frame_index, pose, depth, depth_conf, point_conf, appearance, keys)| FrameMeta {
                frame_index,
                pose,
                depth,
                depth_conf,
                point_conf,
                appearance,
                keys,
            },
        )
}

fn token_ref_strategy() -> impl Strategy<Value = TokenRef> {
    (1u64..50, 0u32..20).prop_flat_map(|(frame, idx)| {
        prop_oneof![
            Just(TokenRef::camera(frame)),
            Just(TokenRef::register(frame, idx % 4 + 1)),
            Just(TokenRef::patch(frame, idx)),
        ]
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Frame trace lines decode back to the identical frame, grids bit-exact.
    #[test]
    fn frame_trace_line_roundtrip(frame in frame_strategy()) {
        let line = frame_to_line(&frame);
        let parsed = frame_from_line(&line, 1).unwrap();
        prop_assert_eq!(&parsed, &frame);
        // Grid payloads are bit-exact, not merely approximately equal.
        for (a, b) in frame.depth.data().iter().zip(parsed.depth.data()) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    /// Plan JSON round-trips exactly.
    #[test]
    fn plan_json_roundtrip(
        budgets in proptest::collection::vec(1usize..100_000, 1..32),
        tau in proptest::option::of(finite_f64(0.01..10.0)),
    ) {
        let plan = ghost_core::budget::BudgetPlan {
            total: budgets.iter().sum(),
            floor: *budgets.iter().min().unwrap(),
            budgets,
            temperature: tau,
        };
        let parsed = plan_from_json(&plan_to_json(&plan)).unwrap();
        prop_assert_eq!(parsed, plan);
    }

    /// Weights round-trip through their JSON mirror exactly.
    #[test]
    fn weights_json_roundtrip(
        w_cam in finite_f64(0.0..2.0),
        w_geo in finite_f64(0.0..2.0),
        w_temp in finite_f64(0.0..2.0),
        w_f in finite_f64(0.0..1.0),
        delta in finite_f64(0.0..2.0),
    ) {
        let mut weights = ScoreWeights {
            w_cam, w_geo, w_temp,
            w_f, w_k: 1.0 - w_f,
            delta_boost: delta,
            ..ScoreWeights::default()
        };
        weights.w_k = 1.0 - weights.w_f;
        let text = serde_json::to_string(&weights).unwrap();
        let parsed: ScoreWeights = serde_json::from_str(&text).unwrap();
        prop_assert_eq!(parsed, weights);
    }

    /// TokenRef and the config enums survive their JSON encodings.
    #[test]
    fn config_types_json_roundtrip(token in token_ref_strategy(), seed in 0u64..1000) {
        let text = serde_json::to_string(&token).unwrap();
        prop_assert_eq!(serde_json::from_str::<TokenRef>(&text).unwrap(), token);

        let policy = ghost_core::baselines::PolicyConfig::SinkRecent {
            sink_size: seed as usize % 100,
            window: seed as usize % 7,
        };
        let text = serde_json::to_string(&policy).unwrap();
        prop_assert_eq!(
            serde_json::from_str::<ghost_core::baselines::PolicyConfig>(&text).unwrap(),
            policy
        );

        let config = ghost_core::simgen::TrajectoryConfig {
            length: 10 + seed as usize % 50,
            motion: ghost_core::simgen::Motion::LoiterThenMove {
                loiter_span: 4,
                step: 0.25 + seed as f64 * 1e-3,
            },
            depth_texture: ghost_core::simgen::DepthTexture::Mixed,
            noise_seed: seed,
            dims: ghost_core::simgen::StreamDims::default(),
            registers: (seed % 5) as u32,
            key_dim: (seed % 9) as usize,
            conf_floor: 0.3,
            conf_ceil: 0.9,
        };
        let text = serde_json::to_string(&config).unwrap();
        prop_assert_eq!(
            serde_json::from_str::<ghost_core::simgen::TrajectoryConfig>(&text).unwrap(),
            config
        );
    }
}

proptest! {
    /// TokenRef ordering is a strict total order whose sort recovers the
    /// canonical insertion order.
    #[test]
    fn token_order_is_strict_total_order(
        mut refs in proptest::collection::vec(token_ref_strategy(), 2..40),
    ) {
        refs.sort_unstable();
        refs.dedup();
        for i in 0..refs.len() {
            prop_assert_eq!(refs[i].cmp(&refs[i]), std::cmp::Ordering::Equal);
            for j in i + 1..refs.len() {
                prop_assert_eq!(refs[i].cmp(&refs[j]), std::cmp::Ordering::Less);
                prop_assert_eq!(refs[j].cmp(&refs[i]), std::cmp::Ordering::Greater);
            }
        }
        // Sorting any permutation yields the same canonical order: frames
        // ascend, and within a frame camera < registers < patches.
        let mut shuffled = refs.clone();
        shuffled.reverse();
        shuffled.sort_unstable();
        prop_assert_eq!(&shuffled, &refs);
        for w in refs.windows(2) {
            prop_assert!(w[0].frame <= w[1].frame);
        }
    }

    /// Camera change: symmetric, quaternion-sign invariant, nonnegative,
    /// bounded by the translation distance plus one, and nondecreasing under
    /// translation scaling.
    #[test]
    fn camera_change_properties(
        a in pose_strategy(),
        b in pose_strategy(),
        lambda in finite_f64(1.0..10.0),
    ) {
        let ab = camera_change(&a, &b);
        let ba = camera_change(&b, &a);
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!(ab >= 0.0);

        let ta = a.translation();
        let tb = b.translation();
        let dist = ((ta[0] - tb[0]).powi(2) + (ta[1] - tb[1]).powi(2) + (ta[2] - tb[2]).powi(2)).sqrt();
        prop_assert!(ab <= dist + 1.0 + 1e-12);

        // Negating either quaternion changes nothing.
        let neg = |p: &Pose| {
            let q = p.quaternion();
            Pose::new(p.translation(), [-q[0], -q[1], -q[2], -q[3]], p.focal()).unwrap()
        };
        prop_assert_eq!(camera_change(&neg(&a), &b), ab);
        prop_assert_eq!(camera_change(&a, &neg(&b)), ab);

        // Scaling every translation by lambda >= 1 never decreases it.
        let scale = |p: &Pose| {
            let t = p.translation();
            Pose::new([t[0] * lambda, t[1] * lambda, t[2] * lambda], p.quaternion(), p.focal())
                .unwrap()
        };
        prop_assert!(camera_change(&scale(&a), &scale(&b)) >= ab - 1e-12);
    }

    /// Frame scores land in (0, 1) with the argmax at max/(max+eps).
    #[test]
    fn frame_score_normalization_bound(
        cams in proptest::collection::vec(finite_f64(0.0..10.0), 1..20),
        geos in proptest::collection::vec(finite_f64(0.0..10.0), 1..20),
    ) {
        let weights = ScoreWeights::default();
        let n = cams.len().min(geos.len());
        let raw: BTreeMap<u64, FrameRawScores> = (0..n)
            .map(|i| {
                (
                    i as u64 + 1,
                    FrameRawScores {
                        cam: cams[i],
                        geo: geos[i],
                        temp: (i as f64 + 1.0) / n as f64,
                    },
                )
            })
            .collect();
        let scores = frame_scores(&raw, &weights).unwrap();
        for v in scores.values() {
            prop_assert!(*v > 0.0 && *v < 1.0);
        }
        let max_out = scores.values().cloned().fold(f64::MIN, f64::max);
        let max_agg = raw
            .values()
            .map(|r| ghost_core::scoring::frame_aggregate(r, &weights))
            .fold(f64::MIN, f64::max);
        prop_assert!((max_out - max_agg / (max_agg + weights.eps_norm)).abs() < 1e-12);
    }

    /// Combined score is nondecreasing in each argument with the other held
    /// fixed.
    #[test]
    fn combined_score_monotone(
        s_frame in finite_f64(0.0..1.0),
        s_token in finite_f64(0.0..1.0),
        bump in finite_f64(0.0..0.5),
        w_f in finite_f64(0.0..1.0),
    ) {
        let weights = ScoreWeights {
            w_f,
            w_k: 1.0 - w_f,
            ..ScoreWeights::default()
        };
        let base = combined_score(s_frame, s_token, &weights);
        prop_assert!(combined_score((s_frame + bump).min(1.0), s_token, &weights) >= base);
        prop_assert!(combined_score(s_frame, (s_token + bump).min(1.0), &weights) >= base);
        prop_assert!((0.0..=1.0).contains(&base));
    }

    /// Min-max renormalization preserves the top-k selection whenever the
    /// input has a spread.
    #[test]
    fn renormalize_preserves_topk(
        values in proptest::collection::vec(finite_f64(0.0..2.0), 3..30),
        k in 1usize..10,
    ) {
        let scores: BTreeMap<TokenRef, f64> = values
            .iter()
            .enumerate()
            .map(|(i, &v)| (TokenRef::patch(1, i as u32), v))
            .collect();
        let renormed = final_renormalize(&scores).unwrap();
        let before = select_topk(&scores, k);
        let after = select_topk(&renormed, k);
        let min = values.iter().cloned().fold(f64::MAX, f64::min);
        let max = values.iter().cloned().fold(f64::MIN, f64::max);
        if max > min {
            // Strictly monotone map; ties can only merge at equal inputs, so
            // the deterministic tie-break yields the identical selection.
            prop_assert_eq!(before, after);
            for v in renormed.values() {
                prop_assert!((0.0..=1.0).contains(v));
            }
        } else {
            for v in renormed.values() {
                prop_assert_eq!(*v, 1.0);
            }
        }
    }

    /// Budget conservation and floor hold for arbitrary valid inputs, and
    /// equal inputs produce identical plans.
    #[test]
    fn budget_conservation(
        rho in proptest::collection::vec(finite_f64(-1.0..1.0), 2..48),
        tau in finite_f64(0.05..4.0),
        total_per_layer in 1usize..40_000,
        floor_frac in finite_f64(0.0..1.0),
    ) {
        let layers = rho.len();
        let total = total_per_layer * layers;
        let floor = ((total / layers) as f64 * floor_frac) as usize;
        let profile = LayerProfile::from_rho(rho).unwrap();
        let plan = allocate_budgets(&profile, tau, total, floor).unwrap();
        prop_assert_eq!(plan.budgets.iter().sum::<usize>(), total);
        prop_assert!(plan.budgets.iter().all(|&b| b >= floor));
        let again = allocate_budgets(&profile, tau, total, floor).unwrap();
        prop_assert_eq!(plan, again);
    }

    /// Spearman is invariant under strictly monotone transforms of either
    /// input.
    #[test]
    fn spearman_monotone_invariance(
        xs in proptest::collection::vec(finite_f64(-10.0..10.0), 3..40),
        ys in proptest::collection::vec(finite_f64(-10.0..10.0), 3..40),
    ) {
        let n = xs.len().min(ys.len());
        let xs = &xs[..n];
        let ys = &ys[..n];
        // Constant input is undefined; anything else must be invariant.
        if let Ok(rho) = spearman(xs, ys) {
            prop_assert!((-1.0..=1.0).contains(&rho));
            let tx: Vec<f64> = xs.iter().map(|x| x.exp()).collect();
            let ty: Vec<f64> = ys.iter().map(|y| y * 3.0 + 7.0).collect();
            prop_assert_eq!(spearman(&tx, ys).unwrap(), rho);
            prop_assert_eq!(spearman(xs, &ty).unwrap(), rho);
        }
    }

    /// Special boost tiebreak separates same-frame specials by exactly
    /// eps_tb per rank and preserves recency/temporal preconditions.
    #[test]
    fn special_boost_rank_separation(
        s_frame in finite_f64(0.0..1.0),
        ranks in 1u32..8,
    ) {
        let weights = ScoreWeights::default();
        let mut prev = special_boost(s_frame, 0, ranks + 1, &weights).unwrap();
        for r in 1..=ranks {
            let next = special_boost(s_frame, r, ranks + 1, &weights).unwrap();
            prop_assert!(next > prev);
            prop_assert!((next - prev - weights.eps_tb).abs() < 1e-15);
            prev = next;
        }
    }

    /// Recency is within [0, 1] on its whole domain.
    #[test]
    fn recency_bounds(t_cur in 1u64..10_000, offset in 0u64..10_000) {
        let t = 1 + offset % t_cur;
        let v = temporal_recency(t, t_cur).unwrap();
        prop_assert!((0.0..=1.0).contains(&v));
    }
}
