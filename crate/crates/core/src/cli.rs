//! Command-line front end: `plan`, `infer`, `simulate`, `reliability`,
//! `model`.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime or transport error,
//! 3 verification failure.

use std::io::Write;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand};

use crate::config::{NodeConfig, Peers};
use crate::planner::{
    build_plan_mobilenet, build_plan_vgg, default_plan, optimize_plan, render_table, validate_plan, Device,
    PartitionPlan, Scheme,
};
use crate::runtime::{
    self, max_rel_err, monolithic_infer, run_host, run_in_process, serve_secondary, transport, InferenceInput,
    RawImage, SessionOptions,
};
use crate::selector::{reliability_csv, run_reliability, Catalog, ChannelState, Mode};
use crate::sim::{self, calibrated_timing, simulate_with, SimOptions, TimingModel};
use crate::tensor::Tensor;
use crate::zoo::{build_mobilenet_v1_with, build_vgg16_with, Family, ModelSpec, ModelWeights, VggConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const EXIT_VERIFY: i32 = 3;

/// Relative tolerance for distributed-vs-monolithic equivalence.
pub const EQUIVALENCE_TOL: f64 = 1e-5;

#[derive(Parser, Debug)]
#[command(name = "halp", version, about = "Host-assisted layer-wise parallel CNN inference")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print the row partition of a model (default or optimized).
    Plan(PlanArgs),
    /// Run inference: locally, as a verified in-process session, or as one
    /// node of a three-process deployment.
    Infer(InferArgs),
    /// Simulate the distributed schedule and report makespan and gain.
    Simulate(SimulateArgs),
    /// Monte Carlo failure probability and service reliability curves.
    Reliability(ReliabilityArgs),
    /// Print a model specification and its MAC counts.
    Model(ModelArgs),
}

#[derive(Args, Debug, Clone)]
struct ModelSel {
    /// vgg16 or mobilenet
    model: String,
    /// MobileNet width multiplier
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    /// MobileNet input resolution
    #[arg(long, default_value_t = 224)]
    rho: usize,
    /// VGG first-block channel count (64 for the standard network)
    #[arg(long)]
    base_width: Option<usize>,
    /// Classifier outputs
    #[arg(long, default_value_t = 1000)]
    classes: usize,
}

#[derive(Args, Debug)]
struct PlanSel {
    /// VGG overlap rows at the first block
    #[arg(long, conflicts_with_all = ["optimize", "plan"])]
    z1: Option<usize>,
    /// Search for the makespan-optimal partition
    #[arg(long)]
    optimize: bool,
    /// Load a plan JSON file
    #[arg(long)]
    plan: Option<PathBuf>,
    /// Throughput in Mbps
    #[arg(long, default_value_t = sim::REFERENCE_MBPS)]
    rate: f64,
    /// Timing model JSON; the family calibration by default
    #[arg(long)]
    calibration: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PlanArgs {
    #[command(flatten)]
    model: ModelSel,
    #[command(flatten)]
    sel: PlanSel,
    /// Emit the plan as JSON
    #[arg(long)]
    json: bool,
    /// Write to this file instead of stdout
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct InferArgs {
    /// vgg16 or mobilenet; taken from the config file in --role mode
    model: Option<String>,
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    #[arg(long, default_value_t = 224)]
    rho: usize,
    #[arg(long)]
    base_width: Option<usize>,
    #[arg(long, default_value_t = 1000)]
    classes: usize,
    /// Run the single-node oracle only
    #[arg(long, conflicts_with_all = ["verify", "role"])]
    local: bool,
    /// Run the three nodes in-process and compare against the oracle
    #[arg(long, conflicts_with = "role")]
    verify: bool,
    /// Act as one node of a networked session: host, ed1 or ed2
    #[arg(long)]
    role: Option<String>,
    /// Node config JSON
    #[arg(long)]
    config: Option<PathBuf>,
    /// Host: secondary addresses (override the config)
    #[arg(long)]
    connect_ed1: Option<String>,
    #[arg(long)]
    connect_ed2: Option<String>,
    /// Secondary: listen address (overrides the config)
    #[arg(long)]
    listen: Option<String>,
    /// Session timeout in seconds
    #[arg(long)]
    timeout: Option<f64>,
    /// Weight and input seed
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// VGG overlap rows at the first block
    #[arg(long)]
    z1: Option<usize>,
    /// Plan JSON file
    #[arg(long)]
    plan: Option<PathBuf>,
    /// Use an 8-bit image input (offloaded raw when small enough)
    #[arg(long)]
    image: bool,
    /// Rate-limit the in-process links to this many Mbps
    #[arg(long)]
    rate: Option<f64>,
    /// Write the event log (line-delimited JSON) here
    #[arg(long)]
    events: Option<PathBuf>,
    /// Print the output vector as JSON
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[command(flatten)]
    model: ModelSel,
    #[command(flatten)]
    sel: PlanSel,
    /// Offload an encoded image of this many KiB instead of tensor segments
    #[arg(long)]
    image_kb: Option<f64>,
    /// Emit the timeline as CSV
    #[arg(long, conflicts_with = "json")]
    csv: bool,
    /// Emit the timeline as JSON
    #[arg(long)]
    json: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ReliabilityArgs {
    /// Catalog JSON; the shipped catalog by default
    #[arg(long)]
    catalog: Option<PathBuf>,
    /// poor, medium, good or all
    #[arg(long, default_value = "all")]
    channel: String,
    /// standalone, halp or both
    #[arg(long, default_value = "both")]
    mode: String,
    /// Comma list (375,400) or inclusive range start:end:step
    #[arg(long, default_value = "375:1800:25")]
    deadlines: String,
    #[arg(long, default_value_t = 10_000)]
    tasks: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ModelArgs {
    #[command(flatten)]
    model: ModelSel,
    #[arg(long)]
    json: bool,
}

/// Error carrying its exit code.
#[derive(Debug)]
struct Failure {
    code: i32,
    msg: String,
}

fn usage(msg: impl ToString) -> Failure {
    Failure { code: EXIT_USAGE, msg: msg.to_string() }
}

fn runtime_err(msg: impl ToString) -> Failure {
    Failure { code: EXIT_RUNTIME, msg: msg.to_string() }
}

type CmdResult = Result<String, Failure>;

/// Runs the CLI on `args` (including the program name), writing normal
/// output to `out` and diagnostics to `err`. Returns the exit code.
pub fn run<I, S>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = if e.use_stderr() { write!(err, "{e}") } else { write!(out, "{e}") };
            return code;
        }
    };
    let result = match cli.command {
        Command::Plan(a) => cmd_plan(&a),
        Command::Infer(a) => cmd_infer(&a, err),
        Command::Simulate(a) => cmd_simulate(&a),
        Command::Reliability(a) => cmd_reliability(&a),
        Command::Model(a) => cmd_model(&a),
    };
    match result {
        Ok(text) => {
            let _ = out.write_all(text.as_bytes());
            EXIT_OK
        }
        Err(f) => {
            let _ = writeln!(err, "error: {}", f.msg);
            f.code
        }
    }
}

fn build_model(name: &str, alpha: f64, rho: usize, base_width: Option<usize>, classes: usize) -> Result<ModelSpec, Failure> {
    match name.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
        "vgg16" | "vgg" => {
            let base = base_width.unwrap_or(64);
            if base == 0 {
                return Err(usage("--base-width must be positive"));
            }
            let hidden = if base == 64 { 4096 } else { (base * 64).max(classes) };
            Ok(build_vgg16_with(VggConfig { base_width: base, fc_hidden: hidden, num_classes: classes }))
        }
        "mobilenet" | "mobilenetv1" => build_mobilenet_v1_with(alpha, rho, classes).map_err(usage),
        _ => Err(usage(format!("unknown model '{name}' (expected vgg16 or mobilenet)"))),
    }
}

impl ModelSel {
    fn build(&self) -> Result<ModelSpec, Failure> {
        build_model(&self.model, self.alpha, self.rho, self.base_width, self.classes)
    }
}

fn load_timing(path: &Option<PathBuf>, model: &ModelSpec) -> Result<TimingModel, Failure> {
    match path {
        None => Ok(calibrated_timing(model)),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| runtime_err(format!("{}: {e}", p.display())))?;
            let t: TimingModel = serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", p.display())))?;
            t.check().map_err(usage)?;
            Ok(t)
        }
    }
}

fn load_plan(path: &Path, model: &ModelSpec) -> Result<PartitionPlan, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| runtime_err(format!("{}: {e}", path.display())))?;
    let plan = PartitionPlan::from_json(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    if let Some(v) = validate_plan(&plan, model).first() {
        return Err(usage(format!("plan {} is invalid for {}: {v}", path.display(), model.name)));
    }
    Ok(plan)
}

fn select_plan(
    model: &ModelSpec,
    z1: Option<usize>,
    optimize: bool,
    plan: &Option<PathBuf>,
    timing: &TimingModel,
    rate: f64,
) -> Result<PartitionPlan, Failure> {
    if let Some(p) = plan {
        return load_plan(p, model);
    }
    if optimize {
        if !(rate > 0.0) {
            return Err(usage("--rate must be positive"));
        }
        return optimize_plan(model, timing, rate).map_err(runtime_err);
    }
    match (model.family, z1) {
        (Family::Vgg16, Some(z)) => build_plan_vgg(model, z).map_err(usage),
        (Family::MobileNetV1, Some(_)) => Err(usage("--z1 applies to VGG-16 only")),
        (Family::MobileNetV1, None) => build_plan_mobilenet(model).map_err(usage),
        (Family::Vgg16, None) => default_plan(model).map_err(usage),
    }
}

fn emit(text: String, out: &Option<PathBuf>) -> CmdResult {
    match out {
        None => Ok(text),
        Some(p) => {
            std::fs::write(p, &text).map_err(|e| runtime_err(format!("{}: {e}", p.display())))?;
            Ok(String::new())
        }
    }
}

/// Human-readable partition table with a title line.
pub fn plan_report(plan: &PartitionPlan, model: &ModelSpec) -> String {
    let title = match plan.scheme {
        Scheme::Vgg { z1 } => format!("Task partitioning for {} (z1 = {z1})", model.name),
        _ => format!("Task partitioning for {}", model.name),
    };
    format!("{title}\n{}", render_table(plan, model))
}

fn cmd_plan(a: &PlanArgs) -> CmdResult {
    let model = a.model.build()?;
    let timing = load_timing(&a.sel.calibration, &model)?;
    let plan = select_plan(&model, a.sel.z1, a.sel.optimize, &a.sel.plan, &timing, a.sel.rate)?;
    let text = if a.json { plan.to_json() + "\n" } else { plan_report(&plan, &model) };
    emit(text, &a.out)
}

fn cmd_model(a: &ModelArgs) -> CmdResult {
    let model = a.model.build()?;
    if a.json {
        return Ok(model.to_json() + "\n");
    }
    let macs = model.macs();
    let shapes = model.shapes();
    let mut s = format!("{}: input {:?}, {} layers\n", model.name, model.input, model.layers.len());
    for (i, l) in model.layers.iter().enumerate() {
        let (h, w, c) = shapes[i + 1];
        s.push_str(&format!(
            "{i:>3} {:<15} s{} -> {h}x{w}x{c}  {} MACs\n",
            format!("{:?}", l.kind),
            l.stride,
            macs.per_layer[i]
        ));
    }
    s.push_str(&format!("total {} MACs\n", macs.total));
    Ok(s)
}

fn cmd_simulate(a: &SimulateArgs) -> CmdResult {
    let model = a.model.build()?;
    let timing = load_timing(&a.sel.calibration, &model)?;
    if !(a.sel.rate > 0.0) {
        return Err(usage("--rate must be positive"));
    }
    let plan = select_plan(&model, a.sel.z1, a.sel.optimize, &a.sel.plan, &timing, a.sel.rate)?;
    let opts = SimOptions { raw_image_bits: a.image_kb.map(|kb| (kb * 1024.0 * 8.0).round() as u64) };
    let tl = simulate_with(&plan, &model, &timing, a.sel.rate, opts).map_err(runtime_err)?;
    let text = if a.csv {
        tl.to_csv()
    } else if a.json {
        tl.to_json() + "\n"
    } else {
        let scheme = match plan.scheme {
            Scheme::Vgg { z1 } => format!("z1 = {z1}"),
            Scheme::MobileNet => "host 2 rows per layer".into(),
            Scheme::Custom => "custom".into(),
        };
        format!(
            "model: {}\nplan: {scheme}\nrate: {} Mbps\ntiming: {:.4e} MAC/s, {:.2} ms per layer\nstandalone: {:.1} ms\nmakespan: {:.1} ms\ngain: {:.2}\n",
            model.name,
            a.sel.rate,
            timing.device_mac_rate,
            timing.layer_overhead_s * 1e3,
            tl.standalone_s * 1e3,
            tl.makespan_s * 1e3,
            tl.gain()
        )
    };
    emit(text, &a.out)
}

/// Parses `375,400` or the inclusive range `375:1800:25`.
pub fn parse_deadlines(s: &str) -> Result<Vec<f64>, String> {
    let parts: Vec<&str> = s.split(':').collect();
    let num = |t: &str| t.trim().parse::<f64>().map_err(|_| format!("bad deadline '{t}'"));
    let v = if parts.len() == 3 {
        let (start, end, step) = (num(parts[0])?, num(parts[1])?, num(parts[2])?);
        if !(step > 0.0) || end < start {
            return Err(format!("bad deadline range '{s}'"));
        }
        let n = ((end - start) / step + 1e-9).floor() as usize;
        (0..=n).map(|i| start + i as f64 * step).collect()
    } else if parts.len() == 1 {
        s.split(',').map(num).collect::<Result<Vec<_>, _>>()?
    } else {
        return Err(format!("bad deadline list '{s}'"));
    };
    if v.is_empty() || v.iter().any(|d| !(*d >= 0.0)) {
        return Err(format!("bad deadline list '{s}'"));
    }
    Ok(v)
}

fn cmd_reliability(a: &ReliabilityArgs) -> CmdResult {
    let catalog = match &a.catalog {
        None => Catalog::shipped(),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| runtime_err(format!("{}: {e}", p.display())))?;
            Catalog::from_json(&text).map_err(usage)?
        }
    };
    let channels: Vec<ChannelState> = if a.channel.eq_ignore_ascii_case("all") {
        ChannelState::ALL.to_vec()
    } else {
        vec![a.channel.parse().map_err(usage)?]
    };
    let modes: Vec<Mode> = if a.mode.eq_ignore_ascii_case("both") {
        vec![Mode::Standalone, Mode::Halp]
    } else {
        vec![a.mode.parse().map_err(usage)?]
    };
    let deadlines = parse_deadlines(&a.deadlines).map_err(usage)?;
    if a.tasks == 0 {
        return Err(usage("--tasks must be at least 1"));
    }
    let mut points = Vec::new();
    for &mode in &modes {
        for &ch in &channels {
            points.extend(run_reliability(&catalog, &deadlines, ch, mode, a.tasks, a.seed).map_err(runtime_err)?);
        }
    }
    emit(reliability_csv(&points), &a.out)
}

fn make_input(model: &ModelSpec, seed: u64, image: bool) -> InferenceInput {
    let (h, w, c) = model.input;
    if image {
        InferenceInput::Image(RawImage::random(h, w, c, seed ^ 0x5eed))
    } else {
        InferenceInput::Tensor(Tensor::random(h, w, c, seed ^ 0x5eed))
    }
}

fn format_output(v: &[f32], json: bool) -> String {
    if json {
        return serde_json::to_string(v).expect("floats serialize") + "\n";
    }
    let (arg, max) = v.iter().enumerate().fold((0, f32::NEG_INFINITY), |b, (i, &x)| if x > b.1 { (i, x) } else { b });
    let head: Vec<String> = v.iter().take(8).map(|x| format!("{x:.6}")).collect();
    format!("output: {} values, argmax {arg} ({max:.6})\nfirst: [{}]\n", v.len(), head.join(", "))
}

fn cmd_infer(a: &InferArgs, err: &mut dyn Write) -> CmdResult {
    if let Some(role) = &a.role {
        return infer_node(a, role.parse().map_err(usage)?, err);
    }
    let name = a.model.as_deref().ok_or_else(|| usage("infer needs a model name (vgg16 or mobilenet)"))?;
    let model = build_model(name, a.alpha, a.rho, a.base_width, a.classes)?;
    let weights = ModelWeights::random(&model, a.seed);
    let input = make_input(&model, a.seed, a.image);
    let tensor = input.tensor().map_err(runtime_err)?;
    if a.local || !a.verify {
        let out = monolithic_infer(&model, &weights, &tensor).map_err(runtime_err)?;
        return Ok(format_output(&out, a.json));
    }
    let timing = calibrated_timing(&model);
    let plan = select_plan(&model, a.z1, false, &a.plan, &timing, sim::REFERENCE_MBPS)?;
    let opts = SessionOptions { timeout: Duration::from_secs_f64(a.timeout.unwrap_or(30.0)) };
    let want = monolithic_infer(&model, &weights, &tensor).map_err(runtime_err)?;
    let got = run_in_process(&model, &weights, &plan, &input, a.rate, opts).map_err(runtime_err)?;
    if let Some(p) = &a.events {
        let all: Vec<_> = got.reports.iter().flat_map(|r| r.events.iter().cloned()).collect();
        runtime::write_events(p, &all).map_err(|e| runtime_err(format!("{}: {e}", p.display())))?;
    }
    let e = max_rel_err(&want, &got.output);
    if e <= EQUIVALENCE_TOL {
        Ok(format!("equivalent (max rel err ≤ 1e-5): {} outputs, observed {e:.3e}\n", want.len()))
    } else {
        Err(Failure { code: EXIT_VERIFY, msg: format!("NOT equivalent: max rel err {e:.3e} exceeds 1e-5") })
    }
}

fn infer_node(a: &InferArgs, role: Device, err: &mut dyn Write) -> CmdResult {
    let mut cfg = match &a.config {
        Some(p) => NodeConfig::load(p).map_err(usage)?,
        None => NodeConfig {
            role: role.to_string(),
            listen: None,
            connect: None,
            model: a.model.clone().unwrap_or_else(|| "vgg16".into()),
            alpha: a.alpha,
            rho: a.rho,
            plan: a.plan.clone(),
            seed: a.seed,
            timeout_s: 30.0,
            event_log: a.events.clone(),
        },
    };
    if cfg.role().map_err(usage)? != role {
        return Err(usage(format!("--role {role} disagrees with config role {}", cfg.role)));
    }
    if let Some(t) = a.timeout {
        cfg.timeout_s = t;
    }
    if let Some(l) = &a.listen {
        cfg.listen = Some(l.clone());
    }
    if a.connect_ed1.is_some() || a.connect_ed2.is_some() || (role == Device::Host && cfg.connect.is_none()) {
        let prev = cfg.connect.clone();
        cfg.connect = Some(Peers {
            ed1: a.connect_ed1.clone().or(prev.as_ref().map(|p| p.ed1.clone())).unwrap_or("127.0.0.1:7101".into()),
            ed2: a.connect_ed2.clone().or(prev.map(|p| p.ed2)).unwrap_or("127.0.0.1:7102".into()),
        });
    }
    if role != Device::Host && cfg.listen.is_none() {
        cfg.listen = Some(if role == Device::Ed1 { "127.0.0.1:7101" } else { "127.0.0.1:7102" }.into());
    }
    cfg.check().map_err(usage)?;
    let opts = SessionOptions { timeout: cfg.timeout() };
    let deadline = Instant::now() + opts.timeout;
    let report = if role == Device::Host {
        let model = build_model(&cfg.model, cfg.alpha, cfg.rho, a.base_width, a.classes)?;
        let weights = ModelWeights::random(&model, cfg.seed);
        let plan = match &cfg.plan {
            Some(p) => load_plan(p, &model)?,
            None => select_plan(&model, a.z1, false, &None, &calibrated_timing(&model), sim::REFERENCE_MBPS)?,
        };
        let peers = cfg.connect.clone().expect("checked");
        let ed1 = transport::connect(&peers.ed1, deadline).map_err(runtime_err)?;
        let ed2 = transport::connect(&peers.ed2, deadline).map_err(runtime_err)?;
        let left = SessionOptions { timeout: deadline.saturating_duration_since(Instant::now()) };
        let input = make_input(&model, cfg.seed, a.image);
        run_host(&model, &weights, &plan, &input, ed1, ed2, cfg.seed, left).map_err(runtime_err)?
    } else {
        let addr = cfg.listen.clone().expect("checked");
        let listener = TcpListener::bind(&addr).map_err(|e| runtime_err(format!("cannot listen on {addr}: {e}")))?;
        let _ = writeln!(err, "{role} listening on {addr}");
        let link = transport::accept(&listener, deadline).map_err(runtime_err)?;
        let left = SessionOptions { timeout: deadline.saturating_duration_since(Instant::now()) };
        serve_secondary(role, link, left).map_err(runtime_err)?
    };
    if let Some(p) = &cfg.event_log {
        runtime::write_events(p, &report.events).map_err(|e| runtime_err(format!("{}: {e}", p.display())))?;
    }
    Ok(match report.output {
        Some(v) => format_output(&v, a.json),
        None => format!("{role} done: {} events\n", report.events.len()),
    })
}
