use lanegvf::catalog;
use lanegvf::eval::{self, jerk1, jerk2, near_out_of_lane_frac, track_sampling_probs, EpisodeMetrics, ReportRow};
use lanegvf::geometry::{build_track, lane_state, Pose, Vec2, WaypointPath, WindowState, DEFAULT_HALF_WIDTH};
use lanegvf::gvf::{estimate_mu, importance_ratio, td_target};
use lanegvf::nn::{mlp, Activation, Checkpoint, Network};
use lanegvf::replay::{ReplayBuffer, SumTree};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::f64::consts::FRAC_PI_2;
use std::sync::OnceLock;

fn paths() -> &'static Vec<WaypointPath> {
    static P: OnceLock<Vec<WaypointPath>> = OnceLock::new();
    P.get_or_init(|| catalog::all_names().map(|n| build_track(&catalog::track_spec(n).unwrap()).unwrap()).collect())
}

fn brute_jerk1(a: &[f64]) -> f64 {
    let mut s = 0.0;
    for t in 0..a.len() - 1 {
        s += (a[t + 1] - a[t]).abs();
    }
    s / (a.len() - 1) as f64
}

fn brute_jerk2(a: &[f64]) -> f64 {
    let mut s = 0.0;
    for t in 0..a.len() - 2 {
        s += (a[t + 2] - 2.0 * a[t + 1] + a[t]).abs();
    }
    s / (a.len() - 2) as f64
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn lane_state_is_bounded(track in 0usize..9, i in 0usize..10_000, dx in -1.0f64..1.0, dy in -1.0f64..1.0, yaw in -3.2f64..3.2) {
        let path = &paths()[track];
        let i = i % path.len();
        let pose = Pose::new(path.point(i) + Vec2::new(dx, dy), yaw, 0.3);
        let s = lane_state(&pose, path, DEFAULT_HALF_WIDTH, None);
        prop_assert!((-1.0..=1.0).contains(&s.alpha));
        prop_assert!((-FRAC_PI_2..=FRAC_PI_2).contains(&s.beta));
        prop_assert_eq!(s.out_of_lane(), s.raw_alpha.abs() > 1.0);
        // The global lookup is the true nearest waypoint.
        let d = path.point(s.index).distance(pose.position);
        prop_assert!(path.points().iter().all(|p| p.distance(pose.position) >= d));
    }

    #[test]
    fn mirror_is_an_exact_involution(track in 0usize..9, i in 0usize..10_000, dx in -0.5f64..0.5, dy in -0.5f64..0.5, yaw in -3.2f64..3.2) {
        let path = &paths()[track];
        let i = i % path.len();
        let pose = Pose::new(path.point(i) + Vec2::new(dx, dy), yaw, 0.3);
        prop_assert_eq!(pose.mirror().mirror(), pose);
        let m = path.mirrored();
        let a = lane_state(&pose, path, DEFAULT_HALF_WIDTH, Some(WindowState::new(i)));
        let b = lane_state(&pose.mirror(), &m, DEFAULT_HALF_WIDTH, Some(WindowState::new(i)));
        prop_assert_eq!(b.alpha, -a.alpha);
        prop_assert_eq!(b.beta, -a.beta);
    }

    #[test]
    fn on_path_pose_has_zero_cumulants(track in 0usize..9, i in 0usize..10_000) {
        let path = &paths()[track];
        let i = i % path.len();
        let pose = Pose::new(path.point(i), path.tangent_heading(i), 0.3);
        let s = lane_state(&pose, path, DEFAULT_HALF_WIDTH, None);
        prop_assert!(s.beta.abs() < 1e-9 && s.alpha.abs() < 1e-9);
        let r = path.reversed();
        prop_assert!((r.length() - path.length()).abs() < 1e-9);
    }

    #[test]
    fn sumtree_root_matches_leaves(ops in prop::collection::vec((0usize..64, 0.0f64..10.0), 1..400)) {
        let mut t = SumTree::new(64).unwrap();
        let mut leaves = [0.0; 64];
        for (i, p) in ops {
            t.set(i, p).unwrap();
            leaves[i] = p;
        }
        let sum: f64 = leaves.iter().sum();
        prop_assert!((t.total() - sum).abs() <= 1e-9 * sum.max(1.0));
        prop_assert!(t.max_inconsistency() <= 1e-9);
        for (i, &p) in leaves.iter().enumerate() {
            prop_assert_eq!(t.get(i), p);
        }
    }

    #[test]
    fn sumtree_find_lands_on_the_covering_leaf(pri in prop::collection::vec(0.0f64..5.0, 2..40), u in 0.0f64..1.0) {
        let mut t = SumTree::new(pri.len()).unwrap();
        for (i, &p) in pri.iter().enumerate() {
            t.set(i, p).unwrap();
        }
        prop_assume!(t.total() > 0.0);
        let target = u * t.total();
        let leaf = t.find(target);
        prop_assert!(pri[leaf] > 0.0);
        let before: f64 = pri[..leaf].iter().sum();
        prop_assert!(before <= target + 1e-9 && target <= before + pri[leaf] + 1e-9);
    }

    #[test]
    fn replay_never_samples_zero_priority(pri in prop::collection::vec(prop_oneof![Just(0.0), 0.1f64..5.0], 2..30), seed in 0u64..1000) {
        prop_assume!(pri.iter().any(|&p| p > 0.0));
        let mut buf = ReplayBuffer::new(pri.len(), 1).unwrap();
        for (i, &p) in pri.iter().enumerate() {
            buf.insert(i, p).unwrap();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for s in buf.sample_proportional(200, &mut rng).unwrap() {
            prop_assert!(pri[s] > 0.0);
        }
        let mean = buf.mean_priority().unwrap();
        prop_assert!((mean - pri.iter().sum::<f64>() / pri.len() as f64).abs() < 1e-12);
    }

    #[test]
    fn ring_buffer_evicts_oldest(cap in 1usize..20, n in 1usize..80) {
        let mut buf = ReplayBuffer::new(cap, 1).unwrap();
        for i in 0..n {
            buf.insert(i, 1.0 + i as f64).unwrap();
        }
        prop_assert_eq!(buf.len(), n.min(cap));
        let mut held: Vec<usize> = (0..buf.len()).map(|s| *buf.get(s).unwrap()).collect();
        held.sort();
        let expected: Vec<usize> = (n.saturating_sub(cap)..n).collect();
        prop_assert_eq!(held, expected);
        let total: f64 = (n.saturating_sub(cap)..n).map(|i| 1.0 + i as f64).sum();
        prop_assert!((buf.total_priority() - total).abs() < 1e-9);
    }

    #[test]
    fn track_probs_are_a_distribution(last in prop::collection::vec(prop::option::of(0.0f64..2000.0), 1..10), kappa in prop::option::of(1.0f64..500.0)) {
        let p = track_sampling_probs(&last, kappa);
        prop_assert_eq!(p.len(), last.len());
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|&x| x > 0.0));
        // Shorter last episodes never get less weight.
        let n: Vec<f64> = last.iter().map(|x| x.unwrap_or(0.0)).collect();
        for i in 0..n.len() {
            for j in 0..n.len() {
                if n[i] < n[j] {
                    prop_assert!(p[i] >= p[j]);
                }
            }
        }
        // Permuting the tracks permutes the probabilities.
        let mut rev = last.clone();
        rev.reverse();
        let mut q = track_sampling_probs(&rev, kappa);
        q.reverse();
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn jerk_matches_brute_force(a in prop::collection::vec(-1.0f64..1.0, 3..60)) {
        prop_assert!((jerk1(&a).unwrap() - brute_jerk1(&a)).abs() < 1e-12);
        prop_assert!((jerk2(&a).unwrap() - brute_jerk2(&a)).abs() < 1e-12);
        let shifted: Vec<f64> = a.iter().map(|x| x + 0.3).collect();
        prop_assert!((jerk1(&shifted).unwrap() - jerk1(&a).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn near_out_of_lane_counts(alphas in prop::collection::vec(-1.0f64..1.0, 1..100)) {
        let n = alphas.iter().filter(|a| a.abs() > 0.75).count();
        prop_assert!((near_out_of_lane_frac(&alphas) - n as f64 / alphas.len() as f64).abs() < 1e-12);
    }

    #[test]
    fn ratio_estimates_are_clipped_and_positive(g in 0.0f64..=1.0, eta in 0.01f64..10.0, tau in 0.0f64..1e4) {
        let mu = estimate_mu(g, eta, 1e-4);
        prop_assert!(mu.is_finite() && mu > 0.0);
        let rho = importance_ratio(tau, mu, 100.0);
        prop_assert!((0.0..=100.0).contains(&rho));
    }

    #[test]
    fn td_target_zero_continuation_is_the_cumulant(c in prop::collection::vec(-1.0f64..1.0, 8), phi in prop::collection::vec(-1.0f64..1.0, 8)) {
        let y = td_target(&c, &[0.0; 8], &phi).unwrap();
        prop_assert_eq!(y, c.clone());
        let y = td_target(&c, &[0.5; 8], &phi).unwrap();
        for k in 0..8 {
            prop_assert!((y[k] - (c[k] + 0.5 * phi[k])).abs() < 1e-15);
        }
    }

    #[test]
    fn report_rows_round_trip(rps in prop::collection::vec(-5.0f64..5.0, 1..12), seed in 0u64..100) {
        let rows: Vec<ReportRow> = rps
            .iter()
            .enumerate()
            .map(|(i, &r)| {
                let m = EpisodeMetrics {
                    steps: 10 + i,
                    reward_per_sec: r,
                    avg_speed: 0.3,
                    avg_abs_alpha: 0.1,
                    avg_abs_beta: 0.05,
                    near_out_of_lane_frac: 0.0,
                    jerk1_steer: 0.01,
                    jerk1_speed: 0.0,
                    jerk2_steer: 0.02,
                    jerk2_speed: 0.0,
                    out_of_lane: i % 3 == 0,
                };
                ReportRow::new(if i % 2 == 0 { "gvf_bcq" } else { "pursuit" }, "oval", "ccw", false, seed, &m)
            })
            .collect();
        let mut buf = Vec::new();
        eval::write_rows(&mut buf, &rows).unwrap();
        let back = eval::read_rows(buf.as_slice()).unwrap();
        // Written sorted by (track, method, direction, damaged, seed); the sort is stable.
        let mut sorted = rows.clone();
        sorted.sort_by(|a, b| (&a.track, &a.method).cmp(&(&b.track, &b.method)));
        prop_assert_eq!(&back, &sorted);
        let mut again = Vec::new();
        eval::write_rows(&mut again, &back).unwrap();
        prop_assert_eq!(again, buf);
        let summary = eval::summarize(&rows);
        prop_assert_eq!(summary.iter().map(|s| s.episodes).sum::<usize>(), rows.len());
    }

    #[test]
    fn checkpoint_round_trips(seed in 0u64..1000) {
        let net = Network::new(mlp(5, &[7, 3], 2, Activation::Relu, Activation::Tanh), seed).unwrap();
        let mut ck = Checkpoint::new("test", serde_json::json!({"seed": seed}));
        ck.push("net", &net);
        let mut buf = Vec::new();
        ck.write(&mut buf).unwrap();
        let back = Checkpoint::read(buf.as_slice()).unwrap();
        prop_assert_eq!(back.get("net").unwrap(), &net);
        prop_assert_eq!(back.meta, serde_json::json!({"seed": seed}));
        // A truncated file is an error, not a panic.
        prop_assert!(Checkpoint::read(&buf[..buf.len() - 1]).is_err());
    }
}
