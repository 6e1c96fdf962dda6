//! Node configuration files for multi-process deployments.

use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::planner::Device;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Peers {
    pub ed1: String,
    pub ed2: String,
}

/// One node of a three-process session.
///
/// The host needs `connect`; secondaries need `listen`. Model, plan and seed
/// are only read by the host, which forwards them in the handshake.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeConfig {
    pub role: String,
    #[serde(default)]
    pub listen: Option<String>,
    #[serde(default)]
    pub connect: Option<Peers>,
    #[serde(default = "default_model")]
    pub model: String,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_rho")]
    pub rho: usize,
    /// Plan JSON; the model's default plan when absent.
    #[serde(default)]
    pub plan: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_timeout")]
    pub timeout_s: f64,
    /// Where to write the line-delimited event log.
    #[serde(default)]
    pub event_log: Option<PathBuf>,
}

fn default_model() -> String {
    "vgg16".into()
}
fn default_alpha() -> f64 {
    1.0
}
fn default_rho() -> usize {
    224
}
fn default_timeout() -> f64 {
    30.0
}

impl NodeConfig {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
        let cfg: NodeConfig = serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn role(&self) -> Result<Device, String> {
        self.role.parse()
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.timeout_s)
    }

    pub fn check(&self) -> Result<(), String> {
        let role = self.role()?;
        if !(self.timeout_s > 0.0) {
            return Err("timeout_s must be positive".into());
        }
        let well_formed = |a: &str| a.rsplit_once(':').is_some_and(|(h, p)| !h.is_empty() && p.parse::<u16>().is_ok());
        match role {
            Device::Host => {
                let c = self.connect.as_ref().ok_or("host config needs connect.ed1 and connect.ed2")?;
                for a in [&c.ed1, &c.ed2] {
                    if !well_formed(a) {
                        return Err(format!("malformed address '{a}' (expected host:port)"));
                    }
                }
            }
            _ => {
                let l = self.listen.as_deref().ok_or("secondary config needs listen")?;
                if !well_formed(l) {
                    return Err(format!("malformed address '{l}' (expected host:port)"));
                }
            }
        }
        Ok(())
    }
}
