//! Discrete-event model of the distributed pipeline.
//!
//! Every device runs a fixed program: for each partitioned layer it first
//! computes the rows other devices are waiting for, sends them, then computes
//! the remainder. The host additionally starts by shipping the input segments
//! and ends with the classifier head. Each directed device pair is a FIFO link
//! with non-preemptive transmission at the session throughput.
//!
//! Compute time is linear in multiply-accumulates plus a fixed cost each time
//! a device processes a layer.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::planner::{Device, ExchangeStep, PartitionPlan, RowRange};
use crate::tensor::LayerSpec;
use crate::zoo::{build_mobilenet_v1, build_vgg16, ModelSpec};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("timing model rates must be positive")]
    InvalidTiming,
    #[error("throughput must be positive, got {0}")]
    InvalidThroughput(f64),
    #[error("plan does not match model: {0}")]
    PlanMismatch(String),
    #[error("dependency cycle: no device can make progress (planner bug)")]
    Deadlock,
    #[error("calibration needs at least {needed} points, got {got}")]
    NotEnoughPoints { needed: usize, got: usize },
}

/// Per-device compute speed, identical for the three devices.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimingModel {
    /// Multiply-accumulates per second.
    pub device_mac_rate: f64,
    /// Fixed cost every time a device processes a layer, in seconds.
    pub layer_overhead_s: f64,
}

impl TimingModel {
    pub fn new(device_mac_rate: f64, layer_overhead_s: f64) -> Result<Self, SimError> {
        let t = TimingModel { device_mac_rate, layer_overhead_s };
        t.check()?;
        Ok(t)
    }

    pub fn check(&self) -> Result<(), SimError> {
        if self.device_mac_rate > 0.0 && self.device_mac_rate.is_finite() && self.layer_overhead_s >= 0.0 {
            Ok(())
        } else {
            Err(SimError::InvalidTiming)
        }
    }
}

/// Session throughput, fixed or drawn once per session.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ChannelModel {
    Fixed { mbps: f64 },
    Uniform { lo: f64, hi: f64 },
}

impl ChannelModel {
    pub fn check(&self) -> Result<(), SimError> {
        match *self {
            ChannelModel::Fixed { mbps } if mbps > 0.0 => Ok(()),
            ChannelModel::Uniform { lo, hi } if lo > 0.0 && lo <= hi => Ok(()),
            ChannelModel::Fixed { mbps } => Err(SimError::InvalidThroughput(mbps)),
            ChannelModel::Uniform { lo, .. } => Err(SimError::InvalidThroughput(lo)),
        }
    }

    pub fn mean_mbps(&self) -> f64 {
        match *self {
            ChannelModel::Fixed { mbps } => mbps,
            ChannelModel::Uniform { lo, hi } => (lo + hi) / 2.0,
        }
    }

    pub fn sample<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            ChannelModel::Fixed { mbps } => mbps,
            ChannelModel::Uniform { lo, hi } if lo == hi => lo,
            ChannelModel::Uniform { lo, hi } => rng.random_range(lo..hi),
        }
    }
}

/// Seconds to process `rows` output rows of layer `index` of `model`.
pub fn compute_time(model: &ModelSpec, index: usize, rows: usize, timing: &TimingModel) -> f64 {
    model.macs_per_row(index) as f64 * rows as f64 / timing.device_mac_rate + timing.layer_overhead_s
}

/// Seconds to process `rows` output rows of a standalone layer given its
/// output width.
pub fn layer_compute_time(spec: &LayerSpec, out_width: usize, rows: usize, timing: &TimingModel) -> f64 {
    use crate::tensor::LayerKind::*;
    let (kh, kw) = spec.kernel;
    let per_row = match spec.kind {
        Conv => kh * kw * spec.in_channels * spec.out_channels * out_width,
        DepthwiseConv => kh * kw * spec.in_channels * out_width,
        PointwiseConv => spec.in_channels * spec.out_channels * out_width,
        FullyConnected => spec.in_channels * spec.out_channels,
        MaxPool | GlobalAvgPool => 0,
    };
    (per_row * rows) as f64 / timing.device_mac_rate + timing.layer_overhead_s
}

/// Seconds to ship `rows × width × channels` float32 values at `mbps`.
pub fn transmit_time(rows: usize, width: usize, channels: usize, mbps: f64) -> f64 {
    bits_time((rows * width * channels * 32) as u64, mbps)
}

pub fn bits_time(bits: u64, mbps: f64) -> f64 {
    bits as f64 / (mbps * 1e6)
}

/// Sum of full-layer compute times on one device.
pub fn standalone_time(model: &ModelSpec, timing: &TimingModel) -> f64 {
    let shapes = model.shapes();
    (0..model.layers.len()).map(|i| compute_time(model, i, shapes[i + 1].0, timing)).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntervalKind {
    Compute,
    Send,
    Recv,
    Idle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub node: Device,
    pub kind: IntervalKind,
    /// Layer computed, or the layer a frame feeds.
    pub layer: usize,
    pub start_s: f64,
    pub end_s: f64,
    pub rows: RowRange,
    /// Other end of a send/recv.
    pub peer: Option<Device>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timeline {
    /// Sorted by node, then start time.
    pub intervals: Vec<Interval>,
    pub makespan_s: f64,
    pub standalone_s: f64,
}

impl Timeline {
    pub fn gain(&self) -> f64 {
        self.standalone_s / self.makespan_s
    }

    pub fn node(&self, d: Device) -> impl Iterator<Item = &Interval> {
        self.intervals.iter().filter(move |i| i.node == d)
    }

    pub fn busy_compute_s(&self, d: Device) -> f64 {
        self.node(d).filter(|i| i.kind == IntervalKind::Compute).map(|i| i.end_s - i.start_s).sum()
    }

    /// Frames each node sends, in the order it sends them:
    /// `(receiver, layer, first row)`.
    pub fn send_order(&self, d: Device) -> Vec<(Device, usize, usize)> {
        self.node(d)
            .filter(|i| i.kind == IntervalKind::Send)
            .map(|i| (i.peer.expect("send has a peer"), i.layer, i.rows.start))
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("node,kind,layer,start_ms,end_ms\n");
        for i in &self.intervals {
            let kind = match i.kind {
                IntervalKind::Compute => "compute",
                IntervalKind::Send => "send",
                IntervalKind::Recv => "recv",
                IntervalKind::Idle => "idle",
            };
            let _ = writeln!(out, "{},{kind},{},{:.3},{:.3}", i.node, i.layer, i.start_s * 1e3, i.end_s * 1e3);
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("timeline serializes")
    }
}

/// Optional deviations from plain tensor-segment offloading.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SimOptions {
    /// Ship the encoded image (this many bits) to each secondary instead of
    /// its float32 input segment.
    pub raw_image_bits: Option<u64>,
}

/// One unit of a device's program.
#[derive(Debug, Clone)]
enum Op {
    /// Compute `rows` of `layer`; waits for every inbound frame of that layer
    /// whose rows intersect `needs`.
    Compute { layer: usize, rows: Vec<RowRange>, needs: Vec<RowRange> },
    Send(usize),
    /// Classifier head: waits for every inbound frame of `merge`.
    Head { merge: usize },
}

/// Rows of `owned` that `d` must ship after computing `layer`, split from the
/// rest. Shared by the simulator and the runtime so both follow one order.
pub fn priority_split(plan: &PartitionPlan, layer: usize, d: Device) -> (Vec<RowRange>, Vec<RowRange>) {
    let owned = plan.layers[layer].output(d);
    let mut mask = vec![false; owned.len()];
    for s in plan.steps_before(layer + 1).filter(|s| s.sender == d) {
        let r = s.row_range.intersect(&owned);
        for row in r.range() {
            mask[row - owned.start] = true;
        }
    }
    let runs = |want: bool| {
        let mut out = Vec::new();
        let mut i = 0;
        while i < mask.len() {
            if mask[i] == want {
                let j = (i..mask.len()).find(|&j| mask[j] != want).unwrap_or(mask.len());
                out.push(RowRange::new(owned.start + i, owned.start + j));
                i = j;
            } else {
                i += 1;
            }
        }
        out
    };
    (runs(true), runs(false))
}

fn program(plan: &PartitionPlan, model: &ModelSpec, d: Device) -> Vec<Op> {
    let shapes = model.shapes();
    let n = plan.num_partitioned();
    let mut ops = Vec::new();
    let send_steps = |ops: &mut Vec<Op>, before: usize| {
        for (k, s) in plan.exchange_schedule.iter().enumerate() {
            if s.before_layer == before && s.sender == d {
                ops.push(Op::Send(k));
            }
        }
    };
    send_steps(&mut ops, 0);
    for l in 0..n {
        let (prio, rest) = priority_split(plan, l, d);
        for (part, follow_sends) in [(prio, true), (rest, false)] {
            if !part.is_empty() {
                let needs = part
                    .iter()
                    .map(|r| model.layers[l].input_rows_for(r.range(), shapes[l].0).into())
                    .collect();
                ops.push(Op::Compute { layer: l, rows: part, needs });
            }
            if follow_sends {
                send_steps(&mut ops, l + 1);
            }
        }
    }
    if d == Device::Host {
        ops.push(Op::Head { merge: n });
    }
    ops
}

/// Event-driven execution of `plan` at a fixed throughput.
pub fn simulate(
    plan: &PartitionPlan,
    model: &ModelSpec,
    timing: &TimingModel,
    throughput_mbps: f64,
) -> Result<Timeline, SimError> {
    simulate_with(plan, model, timing, throughput_mbps, SimOptions::default())
}

pub fn simulate_with(
    plan: &PartitionPlan,
    model: &ModelSpec,
    timing: &TimingModel,
    throughput_mbps: f64,
    opts: SimOptions,
) -> Result<Timeline, SimError> {
    timing.check()?;
    if !(throughput_mbps > 0.0) {
        return Err(SimError::InvalidThroughput(throughput_mbps));
    }
    if plan.num_partitioned() != model.row_local_prefix() {
        return Err(SimError::PlanMismatch(format!(
            "plan has {} partitioned layers, model '{}' has {}",
            plan.num_partitioned(),
            model.name,
            model.row_local_prefix()
        )));
    }
    let shapes = model.shapes();
    let steps = &plan.exchange_schedule;
    let programs: Vec<Vec<Op>> = Device::ALL.iter().map(|&d| program(plan, model, d)).collect();
    let mut pc = [0usize; 3];
    let mut clock = [0.0f64; 3];
    let mut link_free = [[0.0f64; 3]; 3];
    let mut arrival: Vec<Option<f64>> = vec![None; steps.len()];
    let mut intervals = Vec::new();

    let step_bits = |s: &ExchangeStep| -> u64 {
        match opts.raw_image_bits {
            Some(bits) if s.before_layer == 0 => bits,
            _ => (s.row_range.len() * shapes[s.before_layer].1 * s.channels * 32) as u64,
        }
    };
    // latest arrival over inbound frames matching a predicate; None if one is still pending
    let wait_for = |arrival: &[Option<f64>], d: Device, pred: &dyn Fn(&ExchangeStep) -> bool| -> Option<f64> {
        let mut t = 0.0f64;
        for (k, s) in steps.iter().enumerate() {
            if s.receiver == d && pred(s) {
                t = t.max(arrival[k]?);
            }
        }
        Some(t)
    };

    loop {
        let mut progressed = false;
        let mut done = true;
        for d in Device::ALL {
            let i = d.index();
            while pc[i] < programs[i].len() {
                done = false;
                match &programs[i][pc[i]] {
                    Op::Send(k) => {
                        let s = &steps[*k];
                        let (a, b) = (s.sender.index(), s.receiver.index());
                        let start = clock[i].max(link_free[a][b]);
                        let end = start + bits_time(step_bits(s), throughput_mbps);
                        link_free[a][b] = end;
                        arrival[*k] = Some(end);
                        for (node, kind, peer) in
                            [(s.sender, IntervalKind::Send, s.receiver), (s.receiver, IntervalKind::Recv, s.sender)]
                        {
                            intervals.push(Interval {
                                node,
                                kind,
                                layer: s.before_layer,
                                start_s: start,
                                end_s: end,
                                rows: s.row_range,
                                peer: Some(peer),
                            });
                        }
                    }
                    Op::Compute { layer, rows, needs } => {
                        let l = *layer;
                        let ready = wait_for(&arrival, d, &|s: &ExchangeStep| {
                            s.before_layer == l && needs.iter().any(|r| !s.row_range.intersect(r).is_empty())
                        });
                        let Some(ready) = ready else { break };
                        let mut start = clock[i].max(ready);
                        for (k, r) in rows.iter().enumerate() {
                            let overhead = if k == 0 { timing.layer_overhead_s } else { 0.0 };
                            let end = start + model.macs_per_row(l) as f64 * r.len() as f64 / timing.device_mac_rate
                                + overhead;
                            intervals.push(Interval {
                                node: d,
                                kind: IntervalKind::Compute,
                                layer: l,
                                start_s: start,
                                end_s: end,
                                rows: *r,
                                peer: None,
                            });
                            start = end;
                        }
                        clock[i] = start;
                    }
                    Op::Head { merge } => {
                        let m = *merge;
                        let Some(ready) = wait_for(&arrival, d, &|s: &ExchangeStep| s.before_layer == m) else {
                            break;
                        };
                        let mut t = clock[i].max(ready);
                        for l in m..model.layers.len() {
                            let end = t + compute_time(model, l, shapes[l + 1].0, timing);
                            intervals.push(Interval {
                                node: d,
                                kind: IntervalKind::Compute,
                                layer: l,
                                start_s: t,
                                end_s: end,
                                rows: RowRange::new(0, shapes[l + 1].0),
                                peer: None,
                            });
                            t = end;
                        }
                        clock[i] = t;
                    }
                }
                pc[i] += 1;
                progressed = true;
            }
        }
        if done {
            break;
        }
        if !progressed {
            return Err(SimError::Deadlock);
        }
    }

    // fill compute idle gaps per node
    let mut idle = Vec::new();
    for d in Device::ALL {
        let mut busy: Vec<(f64, f64, usize)> = intervals
            .iter()
            .filter(|iv: &&Interval| iv.node == d && iv.kind == IntervalKind::Compute)
            .map(|iv| (iv.start_s, iv.end_s, iv.layer))
            .collect();
        busy.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut t = 0.0;
        for (s, e, layer) in busy {
            if s > t + 1e-12 {
                idle.push(Interval {
                    node: d,
                    kind: IntervalKind::Idle,
                    layer,
                    start_s: t,
                    end_s: s,
                    rows: RowRange::default(),
                    peer: None,
                });
            }
            t = t.max(e);
        }
    }
    intervals.extend(idle);
    intervals.sort_by(|a, b| a.node.cmp(&b.node).then(a.start_s.total_cmp(&b.start_s)));
    let makespan_s = intervals.iter().map(|i| i.end_s).fold(0.0, f64::max);
    Ok(Timeline { intervals, makespan_s, standalone_s: standalone_time(model, timing) })
}

/// One measured standalone inference used to fit a [`TimingModel`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationPoint {
    pub macs: u64,
    pub layers: usize,
    pub seconds: f64,
}

impl CalibrationPoint {
    pub fn of(model: &ModelSpec, seconds: f64) -> Self {
        CalibrationPoint { macs: model.macs().total, layers: model.layers.len(), seconds }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub timing: TimingModel,
    /// Predicted minus measured seconds, per point.
    pub residuals_s: Vec<f64>,
}

impl Calibration {
    pub fn rms_residual_s(&self) -> f64 {
        let n = self.residuals_s.len().max(1) as f64;
        (self.residuals_s.iter().map(|r| r * r).sum::<f64>() / n).sqrt()
    }
}

fn residuals(points: &[CalibrationPoint], t: &TimingModel) -> Vec<f64> {
    points
        .iter()
        .map(|p| p.macs as f64 / t.device_mac_rate + p.layers as f64 * t.layer_overhead_s - p.seconds)
        .collect()
}

/// Least-squares fit of `seconds ≈ macs / rate + layers · overhead` with a
/// non-negative overhead.
pub fn fit_timing(points: &[CalibrationPoint]) -> Result<Calibration, SimError> {
    if points.len() < 2 {
        return Err(SimError::NotEnoughPoints { needed: 2, got: points.len() });
    }
    // normal equations for y = a·x + b·n with x in GMAC
    let (mut sxx, mut sxn, mut snn, mut sxy, mut sny) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for p in points {
        let x = p.macs as f64 / 1e9;
        let n = p.layers as f64;
        sxx += x * x;
        sxn += x * n;
        snn += n * n;
        sxy += x * p.seconds;
        sny += n * p.seconds;
    }
    let det = sxx * snn - sxn * sxn;
    let (mut a, mut b) = if det.abs() > 1e-12 {
        ((sxy * snn - sny * sxn) / det, (sny * sxx - sxy * sxn) / det)
    } else {
        (sxy / sxx, 0.0)
    };
    if b < 0.0 {
        b = 0.0;
        a = sxy / sxx;
    }
    if !(a > 0.0) {
        return Err(SimError::InvalidTiming);
    }
    let timing = TimingModel::new(1e9 / a, b)?;
    Ok(Calibration { residuals_s: residuals(points, &timing), timing })
}

/// Rate that makes `point` exact for a given per-layer overhead.
pub fn pin_rate(point: &CalibrationPoint, layer_overhead_s: f64) -> Result<TimingModel, SimError> {
    let compute = point.seconds - point.layers as f64 * layer_overhead_s;
    if !(compute > 0.0) {
        return Err(SimError::InvalidTiming);
    }
    TimingModel::new(point.macs as f64 / compute, layer_overhead_s)
}

/// Measured standalone inference times on the reference device, in ms.
pub const VGG16_STANDALONE_MS: f64 = 4905.0;
pub const MOBILENET_STANDALONE_MS: [(f64, usize, f64); 12] = [
    (1.0, 224, 1739.0),
    (1.0, 192, 1603.0),
    (1.0, 160, 1317.0),
    (0.75, 224, 1442.0),
    (0.75, 192, 1126.0),
    (0.75, 160, 1049.0),
    (0.5, 224, 1126.0),
    (0.5, 192, 959.0),
    (0.5, 160, 749.0),
    (0.25, 224, 689.0),
    (0.25, 192, 617.0),
    (0.25, 160, 555.0),
];
/// Mean throughput of the reference testbed.
pub const REFERENCE_MBPS: f64 = 42.0;

pub fn mobilenet_points() -> Vec<CalibrationPoint> {
    MOBILENET_STANDALONE_MS
        .iter()
        .map(|&(a, rho, ms)| CalibrationPoint::of(&build_mobilenet_v1(a, rho).expect("supported"), ms / 1e3))
        .collect()
}

pub fn vgg_point() -> CalibrationPoint {
    CalibrationPoint::of(&build_vgg16(), VGG16_STANDALONE_MS / 1e3)
}

/// Calibration for the MobileNet family: least squares over its twelve
/// standalone times.
pub fn mobilenet_calibration() -> Calibration {
    fit_timing(&mobilenet_points()).expect("reference points are well conditioned")
}

/// Calibration for VGG-16: overhead from the joint least-squares fit over all
/// reference models, rate pinned so the standalone time is exact.
pub fn vgg_calibration() -> Calibration {
    let mut pts = mobilenet_points();
    let vgg = vgg_point();
    pts.push(vgg);
    let joint = fit_timing(&pts).expect("reference points are well conditioned");
    let timing = pin_rate(&vgg, joint.timing.layer_overhead_s).expect("overhead below standalone time");
    Calibration { residuals_s: residuals(&[vgg], &timing), timing }
}

/// Calibrated timing for the family of `model`.
pub fn calibrated_timing(model: &ModelSpec) -> TimingModel {
    match model.family {
        crate::zoo::Family::Vgg16 => vgg_calibration().timing,
        crate::zoo::Family::MobileNetV1 => mobilenet_calibration().timing,
    }
}
