//! Three-node execution of a partition plan, plus the single-node oracle.
//!
//! Each node runs one compute worker and, per peer, a pair of transport
//! workers (see [`transport::spawn_workers`]). The compute worker follows the
//! same program as the simulator: per layer, compute the rows peers wait for,
//! hand their frames to the transport workers, then compute the rest. Frames
//! that arrive early are buffered until the compute worker needs them.

pub mod frame;
pub mod transport;

use std::collections::HashMap;
use std::io::Write;
use std::thread;
use std::time::{Duration, Instant};

use crossbeam_channel::{unbounded, Receiver, RecvTimeoutError, Sender};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::planner::{validate_plan, Device, PartitionPlan, RowRange};
use crate::sim::priority_split;
use crate::tensor::{apply_layer, apply_rows, RowBand, Tensor, TensorError};
use crate::zoo::{ModelSpec, ModelWeights};
use frame::{Frame, FrameError, HANDSHAKE_LAYER, RAW_IMAGE_LAYER};
use transport::{in_process_pair, spawn_workers, Link};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RuntimeError {
    #[error("session timed out")]
    Timeout,
    #[error("could not reach {0} before the session deadline; is the secondary running and listening there?")]
    ConnectTimeout(String),
    #[error("peer closed the connection")]
    Disconnected,
    #[error("transport error: {0}")]
    Transport(String),
    #[error("malformed frame: {0}")]
    Frame(#[from] FrameError),
    #[error("plan/model mismatch: {0}")]
    PlanMismatch(String),
    #[error("handshake failed: {0}")]
    Handshake(String),
    #[error("tensor error: {0}")]
    Tensor(#[from] TensorError),
    #[error("{0} does not take part in this call")]
    WrongRole(Device),
}

/// How the host ships the secondaries their first input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OffloadChoice {
    /// The encoded image, this many bytes.
    RawImage(u64),
    HalfTensor,
}

/// Ship the image itself iff it is strictly smaller than the float32
/// segment it would replace.
pub fn offload_choice(image_size_bits: u64, segment_rows: usize, width: usize, channels: usize) -> OffloadChoice {
    let tensor_bits = (segment_rows * width * channels) as u64 * 32;
    if image_size_bits < tensor_bits {
        OffloadChoice::RawImage(image_size_bits.div_ceil(8))
    } else {
        OffloadChoice::HalfTensor
    }
}

/// 8-bit image; its tensor form scales every pixel by 1/255.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawImage {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub pixels: Vec<u8>,
}

impl RawImage {
    pub fn random(height: usize, width: usize, channels: usize, seed: u64) -> Self {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let pixels = (0..height * width * channels).map(|_| rng.random()).collect();
        RawImage { height, width, channels, pixels }
    }

    pub fn to_tensor(&self) -> Result<Tensor, TensorError> {
        let data = self.pixels.iter().map(|&p| p as f32 / 255.0).collect();
        Tensor::new(self.height, self.width, self.channels, data)
    }

    pub fn size_bits(&self) -> u64 {
        self.pixels.len() as u64 * 8
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum InferenceInput {
    Tensor(Tensor),
    Image(RawImage),
}

impl InferenceInput {
    pub fn tensor(&self) -> Result<Tensor, TensorError> {
        match self {
            InferenceInput::Tensor(t) => Ok(t.clone()),
            InferenceInput::Image(i) => i.to_tensor(),
        }
    }
}

fn check_input(model: &ModelSpec, t: &Tensor) -> Result<(), RuntimeError> {
    if (t.height(), t.width(), t.channels()) != model.input {
        return Err(RuntimeError::Tensor(TensorError::Shape(format!(
            "input is {}x{}x{}, model '{}' expects {:?}",
            t.height(),
            t.width(),
            t.channels(),
            model.name,
            model.input
        ))));
    }
    Ok(())
}

/// All layers on one node; the reference every distributed run must match.
pub fn monolithic_infer(model: &ModelSpec, weights: &ModelWeights, input: &Tensor) -> Result<Vec<f32>, RuntimeError> {
    check_input(model, input)?;
    if weights.layers.len() != model.layers.len() {
        return Err(RuntimeError::PlanMismatch("weights do not match model".into()));
    }
    let mut x = input.clone();
    for (spec, w) in model.layers.iter().zip(&weights.layers) {
        x = apply_layer(spec, w, &x)?;
    }
    Ok(x.into_data())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    ComputeStart,
    ComputeEnd,
    Send,
    Recv,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub t_ns: u64,
    pub node: Device,
    pub event: EventKind,
    pub layer: usize,
    pub rows: RowRange,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub peer: Option<Device>,
}

impl Event {
    /// The event with its timestamp cleared, for order comparisons.
    pub fn untimed(&self) -> Event {
        Event { t_ns: 0, ..self.clone() }
    }
}

pub fn events_to_jsonl(events: &[Event]) -> String {
    let mut out = String::new();
    for e in events {
        out.push_str(&serde_json::to_string(e).expect("event serializes"));
        out.push('\n');
    }
    out
}

pub fn write_events(path: &std::path::Path, events: &[Event]) -> std::io::Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(events_to_jsonl(events).as_bytes())
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeReport {
    pub role: Device,
    pub events: Vec<Event>,
    /// Classifier output; host only.
    pub output: Option<Vec<f32>>,
}

impl NodeReport {
    /// Frames this node sent: `(layer, receiver, rows)` in send order.
    pub fn sent(&self) -> Vec<(usize, Device, RowRange)> {
        self.events
            .iter()
            .filter(|e| e.event == EventKind::Send)
            .map(|e| (e.layer, e.peer.expect("send has a peer"), e.rows))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SessionOptions {
    pub timeout: Duration,
}

impl Default for SessionOptions {
    fn default() -> Self {
        SessionOptions { timeout: DEFAULT_TIMEOUT }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Handshake {
    pub model: ModelSpec,
    pub plan: PartitionPlan,
    pub seed: u64,
}

/// Layer input map with rows filled in as they are computed or received.
struct RowStore {
    height: usize,
    width: usize,
    channels: usize,
    rows: Vec<Option<Vec<f32>>>,
}

impl RowStore {
    fn new((height, width, channels): (usize, usize, usize)) -> Self {
        RowStore { height, width, channels, rows: vec![None; height] }
    }

    fn put(&mut self, first: usize, t: &Tensor) {
        for i in 0..t.height() {
            self.rows[first + i] = Some(t.row(i).to_vec());
        }
    }

    fn missing(&self, r: RowRange) -> Option<usize> {
        r.range().find(|&i| self.rows[i].is_none())
    }

    fn slice(&self, r: RowRange) -> Result<Tensor, RuntimeError> {
        let mut data = Vec::with_capacity(r.len() * self.width * self.channels);
        for i in r.range() {
            let row = self.rows[i]
                .as_ref()
                .ok_or_else(|| RuntimeError::PlanMismatch(format!("row {i} is not available")))?;
            data.extend_from_slice(row);
        }
        Ok(Tensor::new(r.len(), self.width, self.channels, data)?)
    }
}

type Inbound = (Device, Result<Frame, RuntimeError>);

struct Node<'a> {
    role: Device,
    model: &'a ModelSpec,
    weights: &'a ModelWeights,
    plan: &'a PartitionPlan,
    inbox: Receiver<Inbound>,
    outbox: [Option<Sender<Frame>>; 3],
    buffer: HashMap<(u16, Device, u16), Frame>,
    /// Peers whose inbound stream has ended; every frame they sent is
    /// already buffered.
    closed: [bool; 3],
    image: Option<Tensor>,
    consumed: Vec<bool>,
    events: Vec<Event>,
    t0: Instant,
    deadline: Instant,
}

impl<'a> Node<'a> {
    fn log(&mut self, event: EventKind, layer: usize, rows: RowRange, peer: Option<Device>) {
        let t_ns = self.t0.elapsed().as_nanos() as u64;
        self.events.push(Event { t_ns, node: self.role, event, layer, rows, peer });
    }

    fn pull(&mut self) -> Result<(), RuntimeError> {
        let wait = self.deadline.saturating_duration_since(Instant::now());
        let (peer, frame) = match self.inbox.recv_timeout(wait) {
            Ok(x) => x,
            Err(RecvTimeoutError::Timeout) => return Err(RuntimeError::Timeout),
            Err(RecvTimeoutError::Disconnected) => return Err(RuntimeError::Disconnected),
        };
        let frame = match frame {
            // later frames from other peers may still be pending
            Err(RuntimeError::Disconnected) => {
                self.closed[peer.index()] = true;
                return Ok(());
            }
            other => other?,
        };
        if frame.sender != peer.id() {
            return Err(RuntimeError::Transport(format!("frame from {peer} claims sender {}", frame.sender)));
        }
        self.buffer.insert((frame.layer_id, peer, frame.row_start), frame);
        Ok(())
    }

    fn take(&mut self, key: (u16, Device, u16)) -> Result<Frame, RuntimeError> {
        loop {
            if let Some(f) = self.buffer.remove(&key) {
                return Ok(f);
            }
            if self.closed[key.1.index()] {
                return Err(RuntimeError::Disconnected);
            }
            self.pull()?;
        }
    }

    fn handshake(&mut self) -> Result<Handshake, RuntimeError> {
        let f = self.take((HANDSHAKE_LAYER, Device::Host, 0))?;
        let text = std::str::from_utf8(f.bytes().unwrap_or_default())
            .map_err(|e| RuntimeError::Handshake(e.to_string()))?;
        serde_json::from_str(text.trim_end()).map_err(|e| RuntimeError::Handshake(e.to_string()))
    }

    /// Rows `rows` of the host's input, from a tensor segment or the raw image.
    fn take_input_segment(&mut self, rows: RowRange) -> Result<Tensor, RuntimeError> {
        let seg_key = (0u16, Device::Host, rows.start as u16);
        let raw_key = (RAW_IMAGE_LAYER, Device::Host, 0u16);
        loop {
            if let Some(img) = &self.image {
                return Ok(img.slice_rows(rows.range())?);
            }
            if let Some(f) = self.buffer.remove(&seg_key) {
                return f.to_tensor().ok_or_else(|| RuntimeError::Transport("segment frame has no tensor".into()));
            }
            if let Some(f) = self.buffer.remove(&raw_key) {
                let img = RawImage {
                    height: f.row_count as usize,
                    width: f.width as usize,
                    channels: f.channels as usize,
                    pixels: f.bytes().unwrap_or_default().to_vec(),
                };
                self.image = Some(img.to_tensor()?);
                continue;
            }
            if self.closed[Device::Host.index()] {
                return Err(RuntimeError::Disconnected);
            }
            self.pull()?;
        }
    }

    /// Receives every still-missing frame of `layer` that overlaps `need`,
    /// in schedule order.
    fn fill(&mut self, store: &mut RowStore, layer: usize, need: RowRange) -> Result<(), RuntimeError> {
        let plan = self.plan;
        for (k, s) in plan.exchange_schedule.iter().enumerate() {
            if self.consumed[k] || s.before_layer != layer || s.receiver != self.role {
                continue;
            }
            if s.row_range.intersect(&need).is_empty() {
                continue;
            }
            let rows = if layer == 0 {
                self.take_input_segment(s.row_range)?
            } else {
                let f = self.take((layer as u16, s.sender, s.row_range.start as u16))?;
                f.to_tensor().ok_or_else(|| RuntimeError::Transport("data frame has no tensor".into()))?
            };
            if rows.height() != s.row_range.len() || rows.width() != store.width || rows.channels() != store.channels {
                return Err(RuntimeError::PlanMismatch(format!(
                    "frame for layer {layer} rows {} has shape {}x{}x{}",
                    s.row_range,
                    rows.height(),
                    rows.width(),
                    rows.channels()
                )));
            }
            store.put(s.row_range.start, &rows);
            self.consumed[k] = true;
            self.log(EventKind::Recv, layer, s.row_range, Some(s.sender));
        }
        if let Some(row) = store.missing(need) {
            return Err(RuntimeError::PlanMismatch(format!(
                "{} lacks input row {row} of layer {layer}",
                self.role
            )));
        }
        Ok(())
    }

    fn send(&mut self, receiver: Device, frame: Frame, layer: usize, rows: RowRange) -> Result<(), RuntimeError> {
        let tx = self.outbox[receiver.index()].as_ref().ok_or(RuntimeError::Disconnected)?;
        tx.send(frame).map_err(|_| RuntimeError::Disconnected)?;
        self.log(EventKind::Send, layer, rows, Some(receiver));
        Ok(())
    }

    fn send_steps(&mut self, store: &RowStore, before: usize) -> Result<(), RuntimeError> {
        let (plan, role) = (self.plan, self.role);
        for s in plan.steps_before(before).filter(|s| s.sender == role) {
            let rows = store.slice(s.row_range)?;
            let f = Frame::rows(before as u16, self.role.id(), s.row_range.start, &rows)?;
            self.send(s.receiver, f, before, s.row_range)?;
        }
        Ok(())
    }

    /// The partitioned layers; returns the merge-layer input map.
    fn run_layers(&mut self, mut cur: RowStore) -> Result<RowStore, RuntimeError> {
        let shapes = self.model.shapes();
        for l in 0..self.plan.num_partitioned() {
            let spec = &self.model.layers[l];
            let w = &self.weights.layers[l];
            let mut next = RowStore::new(shapes[l + 1]);
            let (prio, rest) = priority_split(self.plan, l, self.role);
            for (part, then_send) in [(prio, true), (rest, false)] {
                for r in part {
                    let need: RowRange = spec.input_rows_for(r.range(), cur.height).into();
                    self.fill(&mut cur, l, need)?;
                    let band_rows = cur.slice(need)?;
                    let band = RowBand { rows: &band_rows, first_row: need.start, full_height: cur.height };
                    self.log(EventKind::ComputeStart, l, r, None);
                    let out = apply_rows(spec, w, &band, r.range())?;
                    self.log(EventKind::ComputeEnd, l, r, None);
                    next.put(r.start, &out);
                }
                if then_send {
                    self.send_steps(&next, l + 1)?;
                }
            }
            cur = next;
        }
        Ok(cur)
    }
}

fn check_session(model: &ModelSpec, weights: &ModelWeights, plan: &PartitionPlan) -> Result<(), RuntimeError> {
    if weights.layers.len() != model.layers.len() {
        return Err(RuntimeError::PlanMismatch("weights do not match model".into()));
    }
    if plan.model != model.name {
        return Err(RuntimeError::PlanMismatch(format!("plan is for '{}', model is '{}'", plan.model, model.name)));
    }
    if let Some(v) = validate_plan(plan, model).first() {
        return Err(RuntimeError::PlanMismatch(v.to_string()));
    }
    // secondaries are linked to the host only
    if let Some(s) = plan.exchange_schedule.iter().find(|s| s.sender != Device::Host && s.receiver != Device::Host) {
        return Err(RuntimeError::PlanMismatch(format!(
            "layer {} needs a direct {} -> {} transfer of rows {}; secondaries only talk to the host",
            s.before_layer, s.sender, s.receiver, s.row_range
        )));
    }
    Ok(())
}

/// Drives one node: spawns a transport worker pair per peer link, then runs
/// `body` as the compute worker.
fn with_node<T>(
    role: Device,
    model: &ModelSpec,
    weights: &ModelWeights,
    plan: &PartitionPlan,
    links: Vec<(Device, Link)>,
    opts: SessionOptions,
    body: impl FnOnce(&mut Node<'_>) -> Result<T, RuntimeError>,
) -> Result<(T, Vec<Event>), RuntimeError> {
    let t0 = Instant::now();
    let deadline = t0 + opts.timeout;
    thread::scope(|scope| {
        let (in_tx, in_rx) = unbounded::<Inbound>();
        let mut outbox: [Option<Sender<Frame>>; 3] = [None, None, None];
        for (peer, link) in links {
            outbox[peer.index()] = Some(spawn_workers(scope, link, peer, in_tx.clone(), deadline));
        }
        drop(in_tx);
        let mut node = Node {
            role,
            model,
            weights,
            plan,
            inbox: in_rx,
            outbox,
            buffer: HashMap::new(),
            closed: [false; 3],
            image: None,
            consumed: vec![false; plan.exchange_schedule.len()],
            events: Vec::new(),
            t0,
            deadline,
        };
        let out = body(&mut node);
        // closing the outboxes lets the transport workers finish
        node.outbox = [None, None, None];
        drop(node.inbox);
        out.map(|v| (v, node.events))
    })
}

/// Host side of a session: offloads the input, runs its share of every
/// partitioned layer, merges the secondaries' rows and runs the head.
pub fn run_host(
    model: &ModelSpec,
    weights: &ModelWeights,
    plan: &PartitionPlan,
    input: &InferenceInput,
    ed1: Link,
    ed2: Link,
    seed: u64,
    opts: SessionOptions,
) -> Result<NodeReport, RuntimeError> {
    check_session(model, weights, plan)?;
    let tensor = input.tensor()?;
    check_input(model, &tensor)?;
    let shapes = model.shapes();
    let links = vec![(Device::Ed1, ed1), (Device::Ed2, ed2)];
    let (output, events) = with_node(Device::Host, model, weights, plan, links, opts, |node| {
        let hs = Handshake { model: model.clone(), plan: plan.clone(), seed };
        let text = serde_json::to_string(&hs).expect("handshake serializes");
        for ed in [Device::Ed1, Device::Ed2] {
            node.send(ed, Frame::handshake(Device::Host.id(), &text)?, HANDSHAKE_LAYER as usize, RowRange::default())?;
        }
        let mut cur = RowStore::new(shapes[0]);
        cur.put(0, &tensor);
        let raw = match input {
            InferenceInput::Image(img) => {
                let seg = plan.steps_before(0).map(|s| s.row_range.len()).max().unwrap_or(0);
                matches!(offload_choice(img.size_bits(), seg, img.width, img.channels), OffloadChoice::RawImage(_))
                    .then_some(img)
            }
            InferenceInput::Tensor(_) => None,
        };
        match raw {
            Some(img) => {
                let mut receivers: Vec<Device> = plan.steps_before(0).map(|s| s.receiver).collect();
                receivers.dedup();
                for ed in receivers {
                    let f = Frame::raw_image(Device::Host.id(), img.height, img.width, img.channels, img.pixels.clone())?;
                    node.send(ed, f, RAW_IMAGE_LAYER as usize, RowRange::new(0, img.height))?;
                }
            }
            None => node.send_steps(&cur, 0)?,
        }
        let mut merged = node.run_layers(cur)?;
        let n = plan.num_partitioned();
        let h = merged.height;
        node.fill(&mut merged, n, RowRange::new(0, h))?;
        let mut x = merged.slice(RowRange::new(0, h))?;
        for l in n..model.layers.len() {
            node.log(EventKind::ComputeStart, l, RowRange::new(0, x.height()), None);
            x = apply_layer(&model.layers[l], &weights.layers[l], &x)?;
            node.log(EventKind::ComputeEnd, l, RowRange::new(0, x.height()), None);
        }
        Ok(x.into_data())
    })?;
    Ok(NodeReport { role: Device::Host, events, output: Some(output) })
}

fn secondary_body(node: &mut Node<'_>) -> Result<(), RuntimeError> {
    let shapes = node.model.shapes();
    node.run_layers(RowStore::new(shapes[0]))?;
    Ok(())
}

/// Secondary side of a session with a known model and plan; the host's
/// handshake must agree with them.
pub fn run_secondary(
    role: Device,
    model: &ModelSpec,
    weights: &ModelWeights,
    plan: &PartitionPlan,
    host: Link,
    opts: SessionOptions,
) -> Result<NodeReport, RuntimeError> {
    if role == Device::Host {
        return Err(RuntimeError::WrongRole(role));
    }
    check_session(model, weights, plan)?;
    let ((), events) = with_node(role, model, weights, plan, vec![(Device::Host, host)], opts, |node| {
        let hs = node.handshake()?;
        if &hs.model != model || &hs.plan != plan {
            return Err(RuntimeError::Handshake(format!(
                "host runs '{}' with a different plan or model than this node",
                hs.model.name
            )));
        }
        secondary_body(node)
    })?;
    Ok(NodeReport { role, events, output: None })
}

/// Secondary side of a session whose model, plan and weight seed come from
/// the host's handshake.
pub fn serve_secondary(role: Device, host: Link, opts: SessionOptions) -> Result<NodeReport, RuntimeError> {
    if role == Device::Host {
        return Err(RuntimeError::WrongRole(role));
    }
    let t0 = Instant::now();
    let deadline = t0 + opts.timeout;
    let Link { sink, mut source } = host;
    let first = source.recv(deadline)?;
    if first.layer_id != HANDSHAKE_LAYER {
        return Err(RuntimeError::Handshake(format!("expected handshake, got layer {}", first.layer_id)));
    }
    let text = std::str::from_utf8(first.bytes().unwrap_or_default()).map_err(|e| RuntimeError::Handshake(e.to_string()))?;
    let hs: Handshake = serde_json::from_str(text.trim_end()).map_err(|e| RuntimeError::Handshake(e.to_string()))?;
    hs.model.validate().map_err(|e| RuntimeError::Handshake(e.to_string()))?;
    let weights = ModelWeights::random(&hs.model, hs.seed);
    check_session(&hs.model, &weights, &hs.plan)?;
    let left = SessionOptions { timeout: deadline.saturating_duration_since(Instant::now()) };
    let ((), events) = with_node(role, &hs.model, &weights, &hs.plan, vec![(Device::Host, Link { sink, source })], left, secondary_body)?;
    Ok(NodeReport { role, events, output: None })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionResult {
    pub output: Vec<f32>,
    /// Host, ED1, ED2.
    pub reports: [NodeReport; 3],
}

/// Runs all three nodes in this process over in-process links, optionally
/// rate limited to `mbps`.
pub fn run_in_process(
    model: &ModelSpec,
    weights: &ModelWeights,
    plan: &PartitionPlan,
    input: &InferenceInput,
    mbps: Option<f64>,
    opts: SessionOptions,
) -> Result<SessionResult, RuntimeError> {
    let (h1, e1) = in_process_pair(mbps);
    let (h2, e2) = in_process_pair(mbps);
    thread::scope(|s| {
        let ed1 = s.spawn(|| run_secondary(Device::Ed1, model, weights, plan, e1, opts));
        let ed2 = s.spawn(|| run_secondary(Device::Ed2, model, weights, plan, e2, opts));
        let host = run_host(model, weights, plan, input, h1, h2, 0, opts);
        let r1 = ed1.join().expect("ED1 worker panicked");
        let r2 = ed2.join().expect("ED2 worker panicked");
        let host = host?;
        let output = host.output.clone().expect("host returns output");
        Ok(SessionResult { output, reports: [host, r1?, r2?] })
    })
}

/// Largest element-wise relative error, with the denominator floored at 1
/// so values near zero are compared absolutely.
pub fn max_rel_err(a: &[f32], b: &[f32]) -> f64 {
    assert_eq!(a.len(), b.len(), "vectors differ in length");
    a.iter()
        .zip(b)
        .map(|(&x, &y)| ((x - y).abs() as f64) / (x.abs().max(y.abs()).max(1.0) as f64))
        .fold(0.0, f64::max)
}
