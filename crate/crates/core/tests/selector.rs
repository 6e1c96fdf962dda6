//! Model selection against brute force, and reliability curve shape.

use halp::selector::{
    draw_task, predict_latency, run_reliability, select_model, Catalog, CatalogEntry, ChannelState, Mode,
    TaskInstance,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_catalog(rng: &mut ChaCha8Rng) -> Catalog {
    let n = rng.random_range(1..15);
    let entries = (0..n)
        .map(|i| {
            let sa = rng.random_range(50.0..6000.0);
            CatalogEntry {
                name: format!("m{i}"),
                alpha: 1.0,
                rho: 224,
                t_standalone_ms: sa,
                t_halp_ms: sa * rng.random_range(0.4..1.0),
                // coarse grid so ties occur
                top1_accuracy: (rng.random_range(30..80) as f64) / 100.0,
            }
        })
        .collect();
    Catalog { note: None, entries }
}

/// Every qualifying entry is examined; the answer must have the top
/// accuracy among them.
#[test]
fn selection_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..10_000 {
        let cat = random_catalog(&mut rng);
        let task = TaskInstance {
            image_bytes: rng.random_range(1024.0..600_000.0),
            deadline_ms: rng.random_range(0.0..7000.0),
            throughput_mbps: rng.random_range(1.0..60.0),
        };
        let mode = if rng.random_bool(0.5) { Mode::Halp } else { Mode::Standalone };
        let qualifying: Vec<&CatalogEntry> =
            cat.entries.iter().filter(|e| predict_latency(e, &task, mode) <= task.deadline_ms).collect();
        match select_model(&cat, &task, mode) {
            None => assert!(qualifying.is_empty()),
            Some(pick) => {
                assert!(predict_latency(pick, &task, mode) <= task.deadline_ms);
                let best = qualifying.iter().map(|e| e.top1_accuracy).fold(f64::MIN, f64::max);
                assert_eq!(pick.top1_accuracy, best);
            }
        }
    }
}

#[test]
fn standalone_selects_nothing_below_fastest_model() {
    let cat = Catalog::shipped();
    let fastest = cat.entries.iter().map(|e| e.t_standalone_ms).fold(f64::MAX, f64::min);
    assert_eq!(fastest, 555.0);
    for d in (0..555).step_by(5) {
        let t = TaskInstance { image_bytes: 300.0 * 1024.0, deadline_ms: d as f64, throughput_mbps: 30.0 };
        assert!(select_model(&cat, &t, Mode::Standalone).is_none(), "deadline {d}");
    }
}

#[test]
fn shipped_catalog_is_consistent() {
    let cat = Catalog::shipped();
    cat.validate().unwrap();
    assert_eq!(cat.entries.len(), 13);
    for e in &cat.entries {
        assert!(e.t_halp_ms < e.t_standalone_ms, "{}", e.name);
    }
}

#[test]
fn draws_follow_channel_ranges() {
    for ch in ChannelState::ALL {
        let (lo, hi) = ch.range();
        let mut mean = 0.0;
        for i in 0..2000 {
            let t = draw_task(9, i, ch, 400.0);
            assert!(t.throughput_mbps >= lo && t.throughput_mbps < hi);
            assert!(t.image_bytes >= 1024.0);
            mean += t.image_bytes / 2000.0;
        }
        assert!((mean / 1024.0 - 300.0).abs() < 5.0, "mean image {} KiB", mean / 1024.0);
    }
}

#[test]
fn reliability_is_independent_of_thread_count() {
    let cat = Catalog::shipped();
    let a = run_reliability(&cat, &[400.0, 600.0], ChannelState::Medium, Mode::Halp, 3000, 5).unwrap();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let b = pool.install(|| run_reliability(&cat, &[400.0, 600.0], ChannelState::Medium, Mode::Halp, 3000, 5).unwrap());
    assert_eq!(a, b);
}

#[test]
fn failure_probability_falls_with_deadline() {
    let cat = Catalog::shipped();
    let deadlines: Vec<f64> = (375..=1800).step_by(25).map(f64::from).collect();
    for ch in ChannelState::ALL {
        let pts = run_reliability(&cat, &deadlines, ch, Mode::Halp, 2000, 1).unwrap();
        for w in pts.windows(2) {
            assert!(w[1].failure_prob <= w[0].failure_prob);
        }
    }
}
