//! Static fleet description loaded at manager start-up.
//!
//! ```toml
//! heartbeat_period = 5.0   # seconds, optional
//!
//! [[worker]]
//! id = "w1"
//! max_qubits = 5
//! ```

use std::path::Path;

use serde::Deserialize;

use super::state::ManagerError;

#[derive(Debug, Clone, PartialEq, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FleetConfig {
    #[serde(default)]
    pub heartbeat_period: Option<f64>,
    #[serde(default, rename = "worker")]
    pub workers: Vec<FleetWorker>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FleetWorker {
    pub id: String,
    pub max_qubits: usize,
}

impl FleetConfig {
    pub fn from_toml(text: &str) -> Result<Self, ManagerError> {
        toml::from_str(text).map_err(|e| ManagerError::Argument(format!("fleet config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, ManagerError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ManagerError::Argument(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_workers() {
        let f = FleetConfig::from_toml(
            "heartbeat_period = 2.5\n[[worker]]\nid = \"a\"\nmax_qubits = 5\n[[worker]]\nid = \"b\"\nmax_qubits = 10\n",
        )
        .unwrap();
        assert_eq!(f.heartbeat_period, Some(2.5));
        assert_eq!(f.workers.len(), 2);
        assert!(FleetConfig::from_toml("[[worker]]\nid = \"a\"\n").is_err());
    }
}
