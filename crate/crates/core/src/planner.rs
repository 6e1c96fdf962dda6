//! Row partitioning of a feature-map pipeline across one host and two
//! secondary devices.
//!
//! A plan assigns every row-local layer's *output* rows to exactly one device.
//! Everything else is derived from that assignment: the input rows each device
//! reads (the receptive field of its output rows) and the exchange schedule
//! (every input row a device reads but did not produce itself must arrive as
//! a frame from the device that did).
//!
//! Layout conventions:
//! - ED1 always owns the top of the map, the host a band in the middle, ED2
//!   the bottom.
//! - VGG-16: the host band of block `i` is sized from `z_i`, the number of
//!   input rows the host reads at the block's first convolution; `z_{i+1} =
//!   z_i / 2 + 2`. The last convolution of a block widens the host band to
//!   `z_i` rows aligned on an even row so max pooling needs no traffic.
//! - MobileNet-V1: the host computes two output rows of every layer. Before a
//!   stride-2 depthwise layer the band sits on an even row, which makes ED1's
//!   contribution exactly its last row.

use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sim::{self, SimError, TimingModel};
use crate::tensor::{LayerKind, LayerSpec};
use crate::zoo::{Family, ModelSpec};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlanError {
    #[error("overlap rows must be even, got {0}")]
    OddOverlap(usize),
    #[error("z1 = {z1} is outside the supported range 4..={max}")]
    OutOfRange { z1: usize, max: usize },
    #[error("block {block}: host would own {rows} rows, an odd count violates max pooling")]
    PoolingViolation { block: usize, rows: usize },
    #[error("block {block}: host zone of {rows} rows leaves no rows for a secondary device")]
    HostZoneTooLarge { block: usize, rows: usize },
    #[error("model '{0}' is not supported by this planner")]
    UnsupportedModel(String),
    #[error("receptive field of an empty row range is undefined")]
    EmptyRange,
    #[error("no feasible partition candidate")]
    NoFeasibleCandidate,
    #[error("simulation failed: {0}")]
    Sim(#[from] SimError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Device {
    #[serde(rename = "Host")]
    Host,
    #[serde(rename = "ED1")]
    Ed1,
    #[serde(rename = "ED2")]
    Ed2,
}

impl Device {
    pub const ALL: [Device; 3] = [Device::Host, Device::Ed1, Device::Ed2];

    pub fn id(self) -> u8 {
        self as u8
    }

    pub fn from_id(id: u8) -> Option<Device> {
        Self::ALL.get(id as usize).copied()
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl std::str::FromStr for Device {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "host" => Ok(Device::Host),
            "ed1" => Ok(Device::Ed1),
            "ed2" => Ok(Device::Ed2),
            _ => Err(format!("unknown role '{s}' (expected host, ed1 or ed2)")),
        }
    }
}

impl fmt::Display for Device {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Device::Host => "Host",
            Device::Ed1 => "ED1",
            Device::Ed2 => "ED2",
        })
    }
}

/// Half-open row interval, serialized as `[start, end]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(from = "[usize; 2]", into = "[usize; 2]")]
pub struct RowRange {
    pub start: usize,
    pub end: usize,
}

impl From<[usize; 2]> for RowRange {
    fn from(v: [usize; 2]) -> Self {
        RowRange { start: v[0], end: v[1] }
    }
}

impl From<RowRange> for [usize; 2] {
    fn from(r: RowRange) -> Self {
        [r.start, r.end]
    }
}

impl From<Range<usize>> for RowRange {
    fn from(r: Range<usize>) -> Self {
        RowRange { start: r.start, end: r.end.max(r.start) }
    }
}

impl RowRange {
    pub fn new(start: usize, end: usize) -> Self {
        RowRange { start, end: end.max(start) }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn range(&self) -> Range<usize> {
        self.start..self.end
    }

    pub fn intersect(&self, other: &RowRange) -> RowRange {
        RowRange::new(self.start.max(other.start), self.end.min(other.end))
    }

    pub fn contains_range(&self, other: &RowRange) -> bool {
        other.is_empty() || (self.start <= other.start && other.end <= self.end)
    }
}

impl fmt::Display for RowRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {})", self.start, self.end)
    }
}

/// Input rows `[start, end)` required to compute output rows `out`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReceptiveField {
    pub start: usize,
    pub end: usize,
}

pub fn receptive_field(spec: &LayerSpec, out: Range<usize>, input_height: usize) -> Result<ReceptiveField, PlanError> {
    if out.is_empty() {
        return Err(PlanError::EmptyRange);
    }
    let r = spec.input_rows_for(out, input_height);
    Ok(ReceptiveField { start: r.start, end: r.end })
}

fn rf_range(spec: &LayerSpec, out: RowRange, input_height: usize) -> RowRange {
    spec.input_rows_for(out.range(), input_height).into()
}

/// Host overlap rows of the next VGG block: `z_prev / 2 + 2`.
pub fn overlap_recurrence(z_prev: usize) -> Result<usize, PlanError> {
    if z_prev % 2 != 0 || z_prev < 2 {
        return Err(PlanError::OddOverlap(z_prev));
    }
    Ok(z_prev / 2 + 2)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerAssignment {
    pub layer_index: usize,
    pub host_rows: usize,
    pub ed1_rows: usize,
    pub ed2_rows: usize,
    /// Input rows read by each device, in layer-input coordinates.
    pub host_row_range: RowRange,
    pub ed1_row_range: RowRange,
    pub ed2_row_range: RowRange,
    /// Output rows computed by each device.
    pub host_out: RowRange,
    pub ed1_out: RowRange,
    pub ed2_out: RowRange,
}

impl LayerAssignment {
    pub fn output(&self, d: Device) -> RowRange {
        match d {
            Device::Host => self.host_out,
            Device::Ed1 => self.ed1_out,
            Device::Ed2 => self.ed2_out,
        }
    }

    pub fn input(&self, d: Device) -> RowRange {
        match d {
            Device::Host => self.host_row_range,
            Device::Ed1 => self.ed1_row_range,
            Device::Ed2 => self.ed2_row_range,
        }
    }

    pub fn input_rows(&self, d: Device) -> usize {
        match d {
            Device::Host => self.host_rows,
            Device::Ed1 => self.ed1_rows,
            Device::Ed2 => self.ed2_rows,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExchangeStep {
    pub before_layer: usize,
    pub sender: Device,
    pub receiver: Device,
    pub row_range: RowRange,
    pub channels: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Scheme {
    Vgg { z1: usize },
    MobileNet,
    Custom,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub model: String,
    pub scheme: Scheme,
    /// One entry per row-local layer; layer `layers.len()` is where the host
    /// merges the full map.
    pub layers: Vec<LayerAssignment>,
    pub exchange_schedule: Vec<ExchangeStep>,
}

impl PartitionPlan {
    /// Builds a plan from per-layer output assignments `[host, ed1, ed2]`,
    /// deriving receptive fields and the exchange schedule.
    pub fn from_outputs(model: &ModelSpec, scheme: Scheme, outputs: Vec<[RowRange; 3]>) -> PartitionPlan {
        let shapes = model.shapes();
        let mut layers = Vec::with_capacity(outputs.len());
        for (i, outs) in outputs.iter().enumerate() {
            let h_in = shapes[i].0;
            let spec = &model.layers[i];
            let ins: Vec<RowRange> = outs.iter().map(|&o| rf_range(spec, o, h_in)).collect();
            layers.push(LayerAssignment {
                layer_index: i,
                host_rows: ins[0].len(),
                ed1_rows: ins[1].len(),
                ed2_rows: ins[2].len(),
                host_row_range: ins[0],
                ed1_row_range: ins[1],
                ed2_row_range: ins[2],
                host_out: outs[0],
                ed1_out: outs[1],
                ed2_out: outs[2],
            });
        }
        let n = layers.len();
        let mut schedule = Vec::new();
        for l in 0..=n {
            let (h_in, _, channels) = shapes[l];
            for sender in Device::ALL {
                let owned = if l == 0 {
                    if sender == Device::Host { RowRange::new(0, h_in) } else { RowRange::default() }
                } else {
                    layers[l - 1].output(sender)
                };
                if owned.is_empty() {
                    continue;
                }
                for receiver in Device::ALL {
                    if receiver == sender {
                        continue;
                    }
                    let needed = if l < n {
                        layers[l].input(receiver)
                    } else if receiver == Device::Host {
                        RowRange::new(0, h_in)
                    } else {
                        RowRange::default()
                    };
                    let rows = needed.intersect(&owned);
                    if !rows.is_empty() {
                        schedule.push(ExchangeStep { before_layer: l, sender, receiver, row_range: rows, channels });
                    }
                }
            }
        }
        PartitionPlan { model: model.name.clone(), scheme, layers, exchange_schedule: schedule }
    }

    pub fn num_partitioned(&self) -> usize {
        self.layers.len()
    }

    pub fn steps_before(&self, layer: usize) -> impl Iterator<Item = &ExchangeStep> {
        self.exchange_schedule.iter().filter(move |s| s.before_layer == layer)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }
}

/// Convolution layers of each VGG block followed by the pooling layer index.
fn vgg_blocks(model: &ModelSpec) -> Result<Vec<(Vec<usize>, usize)>, PlanError> {
    let unsupported = || PlanError::UnsupportedModel(model.name.clone());
    if model.family != Family::Vgg16 {
        return Err(unsupported());
    }
    let mut blocks = Vec::new();
    let mut convs = Vec::new();
    for (i, l) in model.layers.iter().enumerate().take(model.row_local_prefix()) {
        match l.kind {
            LayerKind::Conv if l.kernel == (3, 3) && l.stride == 1 && l.padding == 1 => convs.push(i),
            LayerKind::MaxPool if !convs.is_empty() => blocks.push((std::mem::take(&mut convs), i)),
            _ => return Err(unsupported()),
        }
    }
    if blocks.is_empty() || !convs.is_empty() {
        return Err(unsupported());
    }
    Ok(blocks)
}

/// Host overlap rows for every block of a VGG model, starting from `z1`.
pub fn overlap_chain(z1: usize, blocks: usize) -> Result<Vec<usize>, PlanError> {
    let mut z = vec![z1];
    for _ in 1..blocks {
        let prev = *z.last().expect("non-empty");
        z.push(overlap_recurrence(prev)?);
    }
    Ok(z)
}

pub fn build_plan_vgg(model: &ModelSpec, z1: usize) -> Result<PartitionPlan, PlanError> {
    let blocks = vgg_blocks(model)?;
    let shapes = model.shapes();
    let h0 = shapes[0].0;
    if z1 < 4 || z1 > h0 / 2 {
        return Err(PlanError::OutOfRange { z1, max: h0 / 2 });
    }
    if z1 % 2 != 0 {
        return Err(PlanError::PoolingViolation { block: 1, rows: z1 });
    }
    let mut outputs = vec![[RowRange::default(); 3]; model.row_local_prefix()];
    let split = |h: usize, host: RowRange| [host, RowRange::new(0, host.start), RowRange::new(host.end, h)];

    let mut z = z1;
    let h_first = shapes[blocks[0].0[0]].0;
    let k = z1 - 2;
    let mut host_first = RowRange::new(h_first / 2 - k / 2, h_first / 2 + k / 2);
    for (b, (convs, pool)) in blocks.iter().enumerate() {
        let block = b + 1;
        if z % 2 != 0 {
            return Err(PlanError::PoolingViolation { block, rows: z });
        }
        let h = shapes[convs[0]].0;
        if z + 2 > h {
            return Err(PlanError::HostZoneTooLarge { block, rows: z });
        }
        // last conv: z rows starting on an even row, shifted toward ED1 if needed
        let mut s = (h / 2).saturating_sub(z / 2);
        if s % 2 != 0 {
            s -= 1;
        }
        let host_last = RowRange::new(s, s + z);
        if host_first.start == 0 || host_first.end >= h || s == 0 || host_last.end >= h {
            return Err(PlanError::HostZoneTooLarge { block, rows: z });
        }
        for (j, &c) in convs.iter().enumerate() {
            let host = if j + 1 == convs.len() { host_last } else { host_first };
            outputs[c] = split(h, host);
        }
        outputs[*pool] = split(h / 2, RowRange::new(s / 2, (s + z) / 2));
        host_first = outputs[*pool][0];
        if block < blocks.len() {
            z = overlap_recurrence(z)?;
        }
    }
    Ok(PartitionPlan::from_outputs(model, Scheme::Vgg { z1 }, outputs))
}

/// The Table I default partition: four host rows in every block.
pub fn default_plan_vgg(model: &ModelSpec) -> Result<PartitionPlan, PlanError> {
    build_plan_vgg(model, 4)
}

pub fn build_plan_mobilenet(model: &ModelSpec) -> Result<PartitionPlan, PlanError> {
    if model.family != Family::MobileNetV1 {
        return Err(PlanError::UnsupportedModel(model.name.clone()));
    }
    let n = model.row_local_prefix();
    let shapes = model.shapes();
    let layers = &model.layers[..n];
    let next_dw_stride = |from: usize| {
        layers[from + 1..]
            .iter()
            .find(|l| l.kind == LayerKind::DepthwiseConv)
            .map(|l| l.stride)
    };
    let mut outputs = Vec::with_capacity(n);
    let mut q = 0usize;
    for (i, l) in layers.iter().enumerate() {
        let h = shapes[i + 1].0;
        if h < 3 {
            return Err(PlanError::HostZoneTooLarge { block: i, rows: 2 });
        }
        q = match (i, l.kind, l.stride) {
            (0, _, _) => (h - 2) / 2,
            (_, LayerKind::DepthwiseConv, 2) => q / 2,
            (_, LayerKind::DepthwiseConv, _) if next_dw_stride(i) == Some(2) => {
                let c = (h - 2) / 2;
                if c % 2 == 0 { c } else { c - 1 }
            }
            _ => q,
        };
        q = q.clamp(1, h - 3);
        let host = RowRange::new(q, q + 2);
        outputs.push([host, RowRange::new(0, q), RowRange::new(q + 2, h)]);
    }
    Ok(PartitionPlan::from_outputs(model, Scheme::MobileNet, outputs))
}

/// Default plan for any supported model.
pub fn default_plan(model: &ModelSpec) -> Result<PartitionPlan, PlanError> {
    match model.family {
        Family::Vgg16 => default_plan_vgg(model),
        Family::MobileNetV1 => build_plan_mobilenet(model),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub layer: usize,
    pub device: Option<Device>,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.device {
            Some(d) => write!(f, "layer {} ({d}): {}", self.layer, self.message),
            None => write!(f, "layer {}: {}", self.layer, self.message),
        }
    }
}

/// Checks row coverage and receptive-field sufficiency. Empty means valid.
pub fn validate_plan(plan: &PartitionPlan, model: &ModelSpec) -> Vec<Violation> {
    let mut v = Vec::new();
    let shapes = model.shapes();
    let n = plan.layers.len();
    if n != model.row_local_prefix() {
        v.push(Violation {
            layer: 0,
            device: None,
            message: format!("plan covers {n} layers, model has {} row-local layers", model.row_local_prefix()),
        });
        return v;
    }
    for (l, a) in plan.layers.iter().enumerate() {
        let h_out = shapes[l + 1].0;
        let h_in = shapes[l].0;
        if a.layer_index != l {
            v.push(Violation { layer: l, device: None, message: format!("entry is labelled layer {}", a.layer_index) });
        }
        let mut outs: Vec<RowRange> = Device::ALL.iter().map(|&d| a.output(d)).filter(|r| !r.is_empty()).collect();
        outs.sort_by_key(|r| r.start);
        let mut cursor = 0;
        for r in &outs {
            if r.start != cursor {
                let what = if r.start < cursor { "overlap" } else { "gap" };
                v.push(Violation {
                    layer: l,
                    device: None,
                    message: format!("output rows have a {what} at row {}", r.start.min(cursor)),
                });
            }
            cursor = cursor.max(r.end);
        }
        if cursor != h_out {
            v.push(Violation {
                layer: l,
                device: None,
                message: format!("output rows cover {cursor} of {h_out} rows"),
            });
        }
        for d in Device::ALL {
            let rf = rf_range(&model.layers[l], a.output(d), h_in);
            if a.input(d) != rf || a.input_rows(d) != rf.len() {
                v.push(Violation {
                    layer: l,
                    device: Some(d),
                    message: format!("recorded input rows {} differ from receptive field {rf}", a.input(d)),
                });
            }
        }
    }
    for l in 0..=n {
        let (h_in, _, channels) = shapes[l];
        let owned = |d: Device| -> RowRange {
            if l == 0 {
                if d == Device::Host { RowRange::new(0, h_in) } else { RowRange::default() }
            } else {
                plan.layers[l - 1].output(d)
            }
        };
        let mut held = [vec![false; h_in], vec![false; h_in], vec![false; h_in]];
        for d in Device::ALL {
            for r in owned(d).range() {
                held[d.index()][r] = true;
            }
        }
        for s in plan.steps_before(l) {
            if s.row_range.is_empty() {
                v.push(Violation { layer: l, device: Some(s.sender), message: "empty exchange step".into() });
                continue;
            }
            if !owned(s.sender).contains_range(&s.row_range) {
                v.push(Violation {
                    layer: l,
                    device: Some(s.sender),
                    message: format!("sends rows {} it does not own", s.row_range),
                });
            }
            if s.channels != channels {
                v.push(Violation {
                    layer: l,
                    device: Some(s.sender),
                    message: format!("step carries {} channels, map has {channels}", s.channels),
                });
            }
            for r in s.row_range.range().filter(|&r| r < h_in) {
                held[s.receiver.index()][r] = true;
            }
        }
        for d in Device::ALL {
            let needed = if l < n {
                plan.layers[l].input(d)
            } else if d == Device::Host {
                RowRange::new(0, h_in)
            } else {
                RowRange::default()
            };
            let missing: Vec<usize> = needed.range().filter(|&r| r >= h_in || !held[d.index()][r]).collect();
            if !missing.is_empty() {
                let what = if l < n { "receptive field" } else { "merge" };
                v.push(Violation {
                    layer: l,
                    device: Some(d),
                    message: format!("{what} uncovered: missing input rows {missing:?}"),
                });
            }
        }
    }
    v
}

/// Every z1 that yields a buildable VGG plan.
pub fn feasible_z1(model: &ModelSpec) -> Vec<usize> {
    let h0 = model.input.0;
    (4..=h0 / 2).step_by(2).filter(|&z| build_plan_vgg(model, z).is_ok()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub z1: usize,
    pub makespan_s: f64,
}

/// Simulated makespan of every feasible z1, in ascending z1 order.
pub fn rank_candidates(model: &ModelSpec, timing: &TimingModel, throughput_mbps: f64) -> Result<Vec<Candidate>, PlanError> {
    let mut out = Vec::new();
    for z1 in feasible_z1(model) {
        let plan = build_plan_vgg(model, z1)?;
        let t = sim::simulate(&plan, model, timing, throughput_mbps)?;
        out.push(Candidate { z1, makespan_s: t.makespan_s });
    }
    Ok(out)
}

/// Exhaustive search over z1 for the minimal simulated makespan; ties go to
/// the smaller z1. MobileNet has a single layout, which is returned as is.
pub fn optimize_plan(model: &ModelSpec, timing: &TimingModel, throughput_mbps: f64) -> Result<PartitionPlan, PlanError> {
    if model.family == Family::MobileNetV1 {
        return build_plan_mobilenet(model);
    }
    let best = rank_candidates(model, timing, throughput_mbps)?
        .into_iter()
        .fold(None::<Candidate>, |best, c| match best {
            Some(b) if b.makespan_s <= c.makespan_s => Some(b),
            _ => Some(c),
        })
        .ok_or(PlanError::NoFeasibleCandidate)?;
    build_plan_vgg(model, best.z1)
}

/// Paper-style table: per-block input rows for VGG, per-layer host rows and
/// feature-map heights for MobileNet.
pub fn render_table(plan: &PartitionPlan, model: &ModelSpec) -> String {
    let mut rows: Vec<(String, usize, usize, usize)> = Vec::new();
    let shapes = model.shapes();
    match model.family {
        Family::Vgg16 => {
            let mut block = 1;
            let mut first = true;
            for (i, l) in model.layers.iter().take(plan.layers.len()).enumerate() {
                if l.kind == LayerKind::MaxPool {
                    block += 1;
                    first = true;
                } else if first {
                    let a = &plan.layers[i];
                    rows.push((format!("Block{block}"), a.host_rows, a.ed1_rows, a.ed2_rows));
                    first = false;
                }
            }
        }
        Family::MobileNetV1 => {
            let mut raw: Vec<(String, usize, usize)> = Vec::new();
            for (i, l) in model.layers.iter().take(plan.layers.len()).enumerate() {
                let label = match l.kind {
                    LayerKind::Conv => format!("Conv /s{}", l.stride),
                    LayerKind::DepthwiseConv => format!("Conv dw/s{}", l.stride),
                    _ => continue,
                };
                raw.push((label, plan.layers[i].host_rows, shapes[i + 1].0));
            }
            let mut j = 0;
            while j < raw.len() {
                let mut k = j + 1;
                while k < raw.len() && raw[k] == raw[j] {
                    k += 1;
                }
                let (label, host, h) = &raw[j];
                let label = if k - j > 1 { format!("{label} x{}", k - j) } else { label.clone() };
                rows.push((label, *host, *h, *h));
                j = k;
            }
        }
    }
    let first_col = if model.family == Family::Vgg16 { "Block" } else { "Layers" };
    let mut out = format!("{first_col:<16}{:>6}{:>6}{:>6}\n", "Host", "ED1", "ED2");
    for (label, h, e1, e2) in rows {
        out.push_str(&format!("{label:<16}{h:>6}{e1:>6}{e2:>6}\n"));
    }
    out
}
