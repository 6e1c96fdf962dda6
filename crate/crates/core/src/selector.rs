//! Deadline-driven model selection and its Monte Carlo evaluation.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const KB: f64 = 1024.0;
pub const IMAGE_MEAN_BYTES: f64 = 300.0 * KB;
pub const IMAGE_STD_BYTES: f64 = 50.0 * KB;
/// Image sizes are drawn from the Gaussian truncated below this.
pub const IMAGE_MIN_BYTES: f64 = KB;

#[derive(Debug, Error)]
pub enum SelectorError {
    #[error("catalog JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("catalog is empty")]
    Empty,
    #[error("catalog entry '{name}': {reason}")]
    InvalidEntry { name: String, reason: String },
    #[error("unknown {what} '{value}'")]
    Unknown { what: &'static str, value: String },
    #[error("need at least one task")]
    NoTasks,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CatalogEntry {
    pub name: String,
    pub alpha: f64,
    pub rho: usize,
    pub t_standalone_ms: f64,
    pub t_halp_ms: f64,
    pub top1_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Catalog {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
    pub entries: Vec<CatalogEntry>,
}

const SHIPPED_CATALOG: &str = include_str!("../data/catalog.json");

impl Catalog {
    pub fn from_json(s: &str) -> Result<Self, SelectorError> {
        let c: Catalog = serde_json::from_str(s)?;
        c.validate()?;
        Ok(c)
    }

    /// The catalog shipped with the crate.
    pub fn shipped() -> Self {
        Self::from_json(SHIPPED_CATALOG).expect("shipped catalog is valid")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("catalog serializes")
    }

    pub fn validate(&self) -> Result<(), SelectorError> {
        if self.entries.is_empty() {
            return Err(SelectorError::Empty);
        }
        for e in &self.entries {
            let bad = |reason: &str| SelectorError::InvalidEntry { name: e.name.clone(), reason: reason.into() };
            if !(0.0..=1.0).contains(&e.top1_accuracy) {
                return Err(bad("accuracy must lie in [0, 1]"));
            }
            if !(e.t_halp_ms > 0.0) || !(e.t_standalone_ms > 0.0) {
                return Err(bad("times must be positive"));
            }
            if e.t_halp_ms > e.t_standalone_ms {
                return Err(bad("distributed time exceeds standalone time"));
            }
        }
        Ok(())
    }

    pub fn max_accuracy(&self) -> f64 {
        self.entries.iter().map(|e| e.top1_accuracy).fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Standalone,
    Halp,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Standalone => "standalone",
            Mode::Halp => "halp",
        })
    }
}

impl FromStr for Mode {
    type Err = SelectorError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "standalone" => Ok(Mode::Standalone),
            "halp" => Ok(Mode::Halp),
            _ => Err(SelectorError::Unknown { what: "mode", value: s.into() }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelState {
    Poor,
    Medium,
    Good,
}

impl ChannelState {
    pub const ALL: [ChannelState; 3] = [ChannelState::Poor, ChannelState::Medium, ChannelState::Good];

    /// Throughput range in Mbps.
    pub fn range(self) -> (f64, f64) {
        match self {
            ChannelState::Poor => (25.0, 50.0),
            ChannelState::Medium => (50.0, 75.0),
            ChannelState::Good => (75.0, 100.0),
        }
    }
}

impl fmt::Display for ChannelState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ChannelState::Poor => "poor",
            ChannelState::Medium => "medium",
            ChannelState::Good => "good",
        })
    }
}

impl FromStr for ChannelState {
    type Err = SelectorError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "poor" => Ok(ChannelState::Poor),
            "medium" | "moderate" => Ok(ChannelState::Medium),
            "good" => Ok(ChannelState::Good),
            _ => Err(SelectorError::Unknown { what: "channel state", value: s.into() }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub image_bytes: f64,
    pub deadline_ms: f64,
    pub throughput_mbps: f64,
}

/// Offload plus inference time of `entry` for `task`, in ms.
pub fn predict_latency(entry: &CatalogEntry, task: &TaskInstance, mode: Mode) -> f64 {
    match mode {
        Mode::Standalone => entry.t_standalone_ms,
        Mode::Halp => task.image_bytes * 8.0 / (task.throughput_mbps * 1e6) * 1e3 + entry.t_halp_ms,
    }
}

/// Most accurate entry meeting the deadline; ties go to the lower predicted
/// latency, then to the name.
pub fn select_model<'a>(catalog: &'a Catalog, task: &TaskInstance, mode: Mode) -> Option<&'a CatalogEntry> {
    catalog
        .entries
        .iter()
        .map(|e| (e, predict_latency(e, task, mode)))
        .filter(|(_, t)| *t <= task.deadline_ms)
        .min_by(|(a, ta), (b, tb)| {
            b.top1_accuracy
                .total_cmp(&a.top1_accuracy)
                .then(ta.total_cmp(tb))
                .then_with(|| a.name.cmp(&b.name))
        })
        .map(|(e, _)| e)
}

/// Draws the channel-dependent part of task `index` (image size and
/// throughput) from its own counter-derived stream.
pub fn draw_task(seed: u64, index: u64, channel: ChannelState, deadline_ms: f64) -> TaskInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let size = Normal::new(IMAGE_MEAN_BYTES, IMAGE_STD_BYTES).expect("valid normal");
    let image_bytes = loop {
        let s = size.sample(&mut rng);
        if s >= IMAGE_MIN_BYTES {
            break s;
        }
    };
    let (lo, hi) = channel.range();
    TaskInstance { image_bytes, deadline_ms, throughput_mbps: rng.random_range(lo..hi) }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityPoint {
    pub deadline_ms: f64,
    pub mode: Mode,
    pub channel: ChannelState,
    pub failure_prob: f64,
    /// Mean accuracy of the models selected for successful tasks.
    pub expected_accuracy: f64,
    /// Mean over all tasks of the selected accuracy, zero for failures.
    pub service_reliability: f64,
}

/// Monte Carlo over `n_tasks` tasks, the same draws for every deadline.
/// Results do not depend on the number of worker threads.
pub fn run_reliability(
    catalog: &Catalog,
    deadlines: &[f64],
    channel: ChannelState,
    mode: Mode,
    n_tasks: usize,
    seed: u64,
) -> Result<Vec<ReliabilityPoint>, SelectorError> {
    if n_tasks == 0 {
        return Err(SelectorError::NoTasks);
    }
    catalog.validate()?;
    let tasks: Vec<TaskInstance> =
        (0..n_tasks as u64).into_par_iter().map(|i| draw_task(seed, i, channel, 0.0)).collect();
    let points = deadlines
        .iter()
        .map(|&deadline_ms| {
            let picks: Vec<Option<f64>> = tasks
                .par_iter()
                .map(|t| {
                    let t = TaskInstance { deadline_ms, ..*t };
                    select_model(catalog, &t, mode).map(|e| e.top1_accuracy)
                })
                .collect();
            let successes: Vec<f64> = picks.iter().flatten().copied().collect();
            let n = n_tasks as f64;
            let acc_sum: f64 = successes.iter().sum();
            ReliabilityPoint {
                deadline_ms,
                mode,
                channel,
                failure_prob: (n_tasks - successes.len()) as f64 / n,
                expected_accuracy: if successes.is_empty() { 0.0 } else { acc_sum / successes.len() as f64 },
                service_reliability: acc_sum / n,
            }
        })
        .collect();
    Ok(points)
}

pub fn reliability_csv(points: &[ReliabilityPoint]) -> String {
    let mut out = String::from("deadline_ms,mode,channel,failure_prob,reliability\n");
    for p in points {
        let _ = writeln!(
            out,
            "{},{},{},{:.4},{:.4}",
            p.deadline_ms, p.mode, p.channel, p.failure_prob, p.service_reliability
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn task(deadline_ms: f64, mbps: f64) -> TaskInstance {
        TaskInstance { image_bytes: 300.0 * KB, deadline_ms, throughput_mbps: mbps }
    }

    fn entry<'a>(c: &'a Catalog, name: &str) -> &'a CatalogEntry {
        c.entries.iter().find(|e| e.name == name).unwrap()
    }

    #[test]
    fn standalone_latency_ignores_channel() {
        let c = Catalog::shipped();
        let e = entry(&c, "MobileNet_v1_0.25_160");
        assert_eq!(predict_latency(e, &task(0.0, 25.0), Mode::Standalone), 555.0);
        assert_eq!(predict_latency(e, &task(0.0, 100.0), Mode::Standalone), 555.0);
    }

    #[test]
    fn halp_latency_adds_offload() {
        let c = Catalog::shipped();
        let e = entry(&c, "MobileNet_v1_0.25_160");
        // 300 KiB = 2_457_600 bits over 50e6 bit/s = 49.152 ms
        let t = predict_latency(e, &task(0.0, 50.0), Mode::Halp);
        assert!((t - (49.152 + 350.0)).abs() < 1e-9, "{t}");
        let zero = TaskInstance { image_bytes: 0.0, deadline_ms: 0.0, throughput_mbps: 50.0 };
        assert_eq!(predict_latency(e, &zero, Mode::Halp), 350.0);
    }

    #[test]
    fn selection_examples() {
        let c = Catalog::shipped();
        assert!(select_model(&c, &task(500.0, 50.0), Mode::Standalone).is_none());
        assert!(select_model(&c, &task(100.0, 50.0), Mode::Halp).is_none());
        let best = select_model(&c, &task(1000.0, 42.0), Mode::Halp).unwrap();
        assert_eq!(best.name, "MobileNet_v1_1.0_192");
        let best = select_model(&c, &task(1000.0, 42.0), Mode::Standalone).unwrap();
        assert_eq!(best.name, "MobileNet_v1_0.50_192");
    }

    #[test]
    fn ties_prefer_faster_then_name() {
        let mk = |name: &str, t: f64| CatalogEntry {
            name: name.into(),
            alpha: 1.0,
            rho: 224,
            t_standalone_ms: t,
            t_halp_ms: t,
            top1_accuracy: 0.5,
        };
        let c = Catalog { note: None, entries: vec![mk("b", 10.0), mk("a", 10.0), mk("c", 5.0)] };
        assert_eq!(select_model(&c, &task(20.0, 1.0), Mode::Standalone).unwrap().name, "c");
        let c = Catalog { note: None, entries: vec![mk("b", 10.0), mk("a", 10.0)] };
        assert_eq!(select_model(&c, &task(20.0, 1.0), Mode::Standalone).unwrap().name, "a");
    }

    #[test]
    fn invalid_catalogs_rejected() {
        assert!(matches!(Catalog::from_json(r#"{"entries": []}"#), Err(SelectorError::Empty)));
        let bad = r#"{"entries": [{"name":"x","alpha":1.0,"rho":224,"t_standalone_ms":10,"t_halp_ms":20,"top1_accuracy":0.5}]}"#;
        assert!(matches!(Catalog::from_json(bad), Err(SelectorError::InvalidEntry { .. })));
    }

    #[test]
    fn draws_are_reproducible_and_positive() {
        let a = draw_task(5, 17, ChannelState::Medium, 400.0);
        assert_eq!(a, draw_task(5, 17, ChannelState::Medium, 400.0));
        assert!(a.image_bytes >= IMAGE_MIN_BYTES);
        assert!((50.0..75.0).contains(&a.throughput_mbps));
    }

    #[test]
    fn reliability_is_product_of_accuracy_and_success() {
        let c = Catalog::shipped();
        let pts = run_reliability(&c, &[400.0, 900.0], ChannelState::Good, Mode::Halp, 500, 1).unwrap();
        for p in pts {
            let expect = p.expected_accuracy * (1.0 - p.failure_prob);
            assert!((p.service_reliability - expect).abs() < 1e-12);
        }
        assert!(matches!(
            run_reliability(&c, &[400.0], ChannelState::Good, Mode::Halp, 0, 1),
            Err(SelectorError::NoTasks)
        ));
    }
}
