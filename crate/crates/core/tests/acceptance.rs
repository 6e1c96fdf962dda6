//! Acceptance report: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails. Runs without the libtest harness so the report is always
//! printed.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use halp::planner::{
    build_plan_mobilenet, build_plan_vgg, default_plan, optimize_plan, overlap_chain, overlap_recurrence,
    validate_plan, Scheme,
};
use halp::runtime::frame::{deserialize_frame, serialize_frame, Frame};
use halp::runtime::{
    max_rel_err, monolithic_infer, offload_choice, run_in_process, InferenceInput, OffloadChoice, SessionOptions,
};
use halp::selector::{
    predict_latency, run_reliability, select_model, Catalog, CatalogEntry, ChannelState, Mode, TaskInstance,
};
use halp::sim::{calibrated_timing, simulate, REFERENCE_MBPS};
use halp::tensor::{
    conv2d, depthwise_conv2d, maxpool2d, Activation, LayerSpec, LayerWeights, Tensor,
};
use halp::zoo::{build_vgg16, build_vgg16_with, mobilenet_variants, ModelSpec, ModelWeights, VggConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod common;
use common::{close, oracle_conv, oracle_depthwise, oracle_maxpool, split_plan};

const TOL: f64 = 1e-5;

type Verdict = (bool, String);

fn opts() -> SessionOptions {
    SessionOptions { timeout: Duration::from_secs(600) }
}

fn equivalence_err(model: &ModelSpec, plan: &halp::planner::PartitionPlan, seed: u64) -> Result<f64, String> {
    let (h, w, c) = model.input;
    let weights = ModelWeights::random(model, seed);
    let x = Tensor::random(h, w, c, seed + 1);
    let want = monolithic_infer(model, &weights, &x).map_err(|e| e.to_string())?;
    let got = run_in_process(model, &weights, plan, &InferenceInput::Tensor(x), None, opts())
        .map_err(|e| e.to_string())?;
    Ok(max_rel_err(&want, &got.output))
}

fn criterion_1() -> Verdict {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut cases = Vec::new();
    let full = build_vgg16();
    cases.push((full.clone(), default_plan(&full).unwrap()));
    let small = build_vgg16_with(VggConfig { base_width: 8, fc_hidden: 512, num_classes: 1000 });
    for z1 in [4, 36, 68, 100] {
        cases.push((small.clone(), build_plan_vgg(&small, z1).unwrap()));
    }
    for m in mobilenet_variants() {
        let p = build_plan_mobilenet(&m).unwrap();
        cases.push((m, p));
    }
    for (i, (m, p)) in cases.iter().enumerate() {
        match equivalence_err(m, p, 100 + i as u64) {
            Ok(e) => worst = worst.max(e),
            Err(e) => return (false, format!("{}: {e}", m.name)),
        }
    }
    let secs = start.elapsed().as_secs_f64();
    (
        worst <= TOL && secs < 300.0,
        format!("{} sessions (full-width VGG-16 included), max rel err {worst:.2e}, {secs:.1} s", cases.len()),
    )
}

fn criterion_2() -> Verdict {
    let dir = env!("CARGO_MANIFEST_DIR");
    let run = |args: &[&str]| {
        let mut out = Vec::new();
        let mut err = Vec::new();
        let code = halp::cli::run(std::iter::once("halp").chain(args.iter().copied()), &mut out, &mut err);
        (code, String::from_utf8(out).unwrap())
    };
    let mut bad = Vec::new();
    for (args, file) in [
        (&["plan", "vgg16"][..], "table1_default.txt"),
        (&["plan", "vgg16", "--optimize"][..], "table1_optimized.txt"),
        (&["plan", "mobilenet"][..], "table2_mobilenet.txt"),
    ] {
        let want = std::fs::read_to_string(format!("{dir}/tests/golden/{file}")).unwrap();
        let (code, got) = run(args);
        if code != 0 || got != want {
            bad.push(file);
        }
    }
    (bad.is_empty(), if bad.is_empty() { "3 tables byte-exact".into() } else { format!("mismatch: {bad:?}") })
}

fn criterion_3() -> Verdict {
    let fixed = overlap_recurrence(4) == Ok(4);
    let chain = overlap_chain(68, 5);
    let ok = fixed && chain.as_deref() == Ok(&[68, 36, 20, 12, 8][..]);
    (ok, format!("4 -> {:?}, chain from 68 = {:?}", overlap_recurrence(4), chain))
}

fn criterion_4() -> Verdict {
    let vgg = build_vgg16();
    let plan = optimize_plan(&vgg, &calibrated_timing(&vgg), REFERENCE_MBPS).unwrap();
    let z1 = match plan.scheme {
        Scheme::Vgg { z1 } => z1,
        _ => 0,
    };
    let z5 = plan.layers.iter().rev().find(|l| l.layer_index == 14).map(|l| l.host_rows);
    (z1 == 68, format!("optimizer chose z1 = {z1} (block-5 host rows {z5:?})"))
}

fn criterion_5() -> Verdict {
    let vgg = build_vgg16();
    let t = calibrated_timing(&vgg);
    let within = |got: f64, want: f64| (got - want).abs() <= 0.10 * want;
    let d = simulate(&default_plan(&vgg).unwrap(), &vgg, &t, REFERENCE_MBPS).unwrap();
    let o = simulate(&build_plan_vgg(&vgg, 68).unwrap(), &vgg, &t, REFERENCE_MBPS).unwrap();
    let (dm, om) = (d.makespan_s * 1e3, o.makespan_s * 1e3);
    let vgg_ok = within(dm, 3264.0) && within(om, 2864.0);
    let mut gains = Vec::new();
    for m in mobilenet_variants() {
        let tm = calibrated_timing(&m);
        let g = simulate(&build_plan_mobilenet(&m).unwrap(), &m, &tm, REFERENCE_MBPS).unwrap().gain();
        gains.push((m.name.clone(), g));
    }
    let out: Vec<String> =
        gains.iter().filter(|(_, g)| !(1.4..=1.9).contains(g)).map(|(n, g)| format!("{n} {g:.2}")).collect();
    let lo = gains.iter().map(|g| g.1).fold(f64::MAX, f64::min);
    let hi = gains.iter().map(|g| g.1).fold(f64::MIN, f64::max);
    (
        vgg_ok && out.is_empty(),
        format!(
            "VGG-16 {dm:.0} ms (gain {:.2}) / {om:.0} ms (gain {:.2}); MobileNet gains {lo:.2}..{hi:.2}, {} of 12 outside [1.4, 1.9]",
            d.gain(),
            o.gain(),
            out.len()
        ),
    )
}

fn criterion_6() -> Verdict {
    let kbits = 294u64 * 1024 * 8;
    let below = offload_choice(kbits - 1, 112, 224, 3);
    let at = offload_choice(kbits, 112, 224, 3);
    let ok = matches!(below, OffloadChoice::RawImage(_)) && at == OffloadChoice::HalfTensor;
    (ok, format!("{} bits -> {below:?}, {kbits} bits -> {at:?}", kbits - 1))
}

fn criterion_7() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut wrong = 0;
    for _ in 0..10_000 {
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
                    top1_accuracy: rng.random_range(30..80) as f64 / 100.0,
                }
            })
            .collect();
        let cat = Catalog { note: None, entries };
        let task = TaskInstance {
            image_bytes: rng.random_range(1024.0..600_000.0),
            deadline_ms: rng.random_range(0.0..7000.0),
            throughput_mbps: rng.random_range(1.0..60.0),
        };
        let mode = if rng.random_bool(0.5) { Mode::Halp } else { Mode::Standalone };
        let best = cat
            .entries
            .iter()
            .filter(|e| predict_latency(e, &task, mode) <= task.deadline_ms)
            .map(|e| e.top1_accuracy)
            .fold(None, |b: Option<f64>, a| Some(b.map_or(a, |b| b.max(a))));
        if select_model(&cat, &task, mode).map(|e| e.top1_accuracy) != best {
            wrong += 1;
        }
    }
    let shipped = Catalog::shipped();
    let early = (0..555).filter(|&d| {
        let t = TaskInstance { image_bytes: 300.0 * 1024.0, deadline_ms: d as f64, throughput_mbps: 30.0 };
        select_model(&shipped, &t, Mode::Standalone).is_some()
    });
    let early = early.count();
    (wrong == 0 && early == 0, format!("{wrong} of 10000 brute-force mismatches; {early} standalone picks below 555 ms"))
}

fn criterion_8() -> Verdict {
    let cat = Catalog::shipped();
    let deadlines: Vec<f64> = (375..=1800).step_by(25).map(f64::from).collect();
    let n = 10_000;
    let mut ok = true;
    let mut notes = Vec::new();
    let mut sa_ok = true;
    let mut dominance_ok = true;
    let mut halp425 = Vec::new();
    let mut halp375 = Vec::new();
    for ch in ChannelState::ALL {
        let sa = run_reliability(&cat, &deadlines, ch, Mode::Standalone, n, 42).unwrap();
        let hp = run_reliability(&cat, &deadlines, ch, Mode::Halp, n, 42).unwrap();
        for p in &sa {
            let want = if p.deadline_ms < 555.0 { 1.0 } else { 0.0 };
            sa_ok &= p.failure_prob == want;
        }
        for (s, h) in sa.iter().zip(&hp) {
            dominance_ok &= h.service_reliability >= s.service_reliability - 1e-12;
        }
        halp425.push(hp.iter().find(|p| p.deadline_ms == 425.0).unwrap().failure_prob);
        halp375.push(hp.iter().find(|p| p.deadline_ms == 375.0).unwrap().failure_prob);
    }
    let b_ok = halp425.iter().all(|&f| f <= 0.02);
    let c_ok = halp375[0] > 0.9 - 0.02 && (0.4 - 0.02..=0.6 + 0.02).contains(&halp375[1]) && halp375[2] < 0.05 + 0.02;
    for (tag, pass) in [("a", sa_ok), ("b", b_ok), ("c", c_ok), ("d", dominance_ok)] {
        ok &= pass;
        notes.push(format!("({tag}) {}", if pass { "ok" } else { "miss" }));
    }
    (
        ok,
        format!(
            "{}; HALP failure @425 ms poor/medium/good = {:.3}/{:.3}/{:.3}, @375 ms = {:.3}/{:.3}/{:.3}",
            notes.join(" "),
            halp425[0],
            halp425[1],
            halp425[2],
            halp375[0],
            halp375[1],
            halp375[2]
        ),
    )
}

fn criterion_9() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut failures = Vec::new();
    let w = |spec: &LayerSpec, rng: &mut ChaCha8Rng| LayerWeights::random(spec, rng);
    // kernels
    let mut kernel_fail = 0;
    for _ in 0..100 {
        let (h, wd, ci, co, s) =
            (rng.random_range(1..10), rng.random_range(1..10), rng.random_range(1..5), rng.random_range(1..5), rng.random_range(1..3));
        let x = Tensor::random(h, wd, ci, rng.random());
        let conv = LayerSpec::conv3x3(ci, co, s);
        let wc = w(&conv, &mut rng);
        kernel_fail += !close(conv2d(&x, &conv, &wc).unwrap().data(), &oracle_conv(&x, &conv, &wc)) as usize;
        let pw = LayerSpec::pointwise(ci, co);
        let wp = w(&pw, &mut rng);
        kernel_fail += !close(conv2d(&x, &pw, &wp).unwrap().data(), &oracle_conv(&x, &pw, &wp)) as usize;
        let dw = LayerSpec::depthwise3x3(ci, s);
        let wdw = w(&dw, &mut rng);
        kernel_fail += !close(depthwise_conv2d(&x, &dw, &wdw).unwrap().data(), &oracle_depthwise(&x, &dw, &wdw)) as usize;
        let xp = Tensor::random(2 * h, 2 * wd, ci, rng.random());
        kernel_fail += !close(maxpool2d(&xp).unwrap().data(), &oracle_maxpool(&xp)) as usize;
        let fc = LayerSpec::fully_connected(ci * 3, co, Activation::ReLU);
        let wf = w(&fc, &mut rng);
        let v = Tensor::random(1, 1, ci * 3, rng.random());
        let want: Vec<f64> = (0..co)
            .map(|o| {
                let s: f64 = wf.bias[o] as f64
                    + (0..ci * 3).map(|i| v.data()[i] as f64 * wf.kernel[i * co + o] as f64).sum::<f64>();
                s.max(0.0)
            })
            .collect();
        kernel_fail += !close(&halp::tensor::fully_connected(v.data(), &fc, &wf).unwrap(), &want) as usize;
    }
    if kernel_fail > 0 {
        failures.push(format!("{kernel_fail} kernel cases"));
    }
    // plan coverage
    let models = [
        halp::zoo::build_mobilenet_v1(0.25, 160).unwrap(),
        build_vgg16_with(VggConfig { base_width: 4, fc_hidden: 32, num_classes: 10 }),
    ];
    let mut plan_fail = 0;
    for i in 0..100 {
        let cuts: Vec<(usize, usize)> = (0..rng.random_range(1..20)).map(|_| (rng.random_range(0..300), rng.random_range(0..300))).collect();
        let m = &models[i % 2];
        plan_fail += !validate_plan(&split_plan(m, &cuts), m).is_empty() as usize;
    }
    for m in mobilenet_variants() {
        plan_fail += !validate_plan(&build_plan_mobilenet(&m).unwrap(), &m).is_empty() as usize;
    }
    if plan_fail > 0 {
        failures.push(format!("{plan_fail} invalid plans"));
    }
    // framing
    let mut frame_fail = 0;
    for _ in 0..100 {
        let t = Tensor::random(rng.random_range(1..4), rng.random_range(1..6), rng.random_range(1..6), rng.random());
        let f = Frame::rows(rng.random_range(0..1000), rng.random_range(0..3), rng.random_range(0..500), &t).unwrap();
        frame_fail += (deserialize_frame(&serialize_frame(&f).unwrap()).ok() != Some(f)) as usize;
    }
    for _ in 0..2000 {
        let bytes: Vec<u8> = (0..rng.random_range(0..64)).map(|_| rng.random()).collect();
        if let Ok(f) = deserialize_frame(&bytes) {
            frame_fail += (serialize_frame(&f).ok().as_deref() != Some(&bytes[..])) as usize;
        }
    }
    if frame_fail > 0 {
        failures.push(format!("{frame_fail} frame cases"));
    }
    // monotonicity
    let vgg = build_vgg16();
    let t = calibrated_timing(&vgg);
    let plan = build_plan_vgg(&vgg, 68).unwrap();
    let mut rates: Vec<f64> = (0..20).map(|_| rng.random_range(1.0..500.0)).collect();
    rates.sort_by(f64::total_cmp);
    let spans: Vec<f64> = rates.iter().map(|&r| simulate(&plan, &vgg, &t, r).unwrap().makespan_s).collect();
    if spans.windows(2).any(|w| w[1] > w[0] + 1e-12) {
        failures.push("makespan rose with throughput".into());
    }
    (
        failures.is_empty(),
        if failures.is_empty() {
            "500 kernel cases, 112 plans, 2100 frame cases, 20 rates".into()
        } else {
            failures.join(", ")
        },
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Verdict); 9] = [
        ("equivalence oracle", criterion_1),
        ("partition tables", criterion_2),
        ("overlap recurrence", criterion_3),
        ("partition optimizer", criterion_4),
        ("simulated gains", criterion_5),
        ("offload threshold", criterion_6),
        ("selector properties", criterion_7),
        ("reliability curves", criterion_8),
        ("property suites", criterion_9),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let (pass, detail) = f();
        failed += !pass as usize;
        println!("criterion {} ({name}): {} - {detail}", i + 1, if pass { "PASS" } else { "FAIL" });
    }
    println!("{} of {} criteria pass", criteria.len() - failed, criteria.len());
    if failed == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE }
}
