//! Declarative run configuration. Flags override file values; relative
//! paths resolve against the config file's directory.

use geoaudit_core::report::AuditPaths;
use geoaudit_core::TimeWindow;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub inputs: Inputs,
    pub analysis: AnalysisConfig,
    pub output: OutputConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct Inputs {
    /// Directory shorthand: a world laid out with the conventional file
    /// names. Explicit paths below win over it.
    pub world: Option<PathBuf>,
    pub snapshots: Option<PathBuf>,
    pub events: Option<PathBuf>,
    pub regions: Option<PathBuf>,
    pub urbanization: Option<PathBuf>,
    pub bidstream: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    pub grid_resolution: u8,
    pub levels: Vec<u8>,
    pub max_invalid_fraction: f64,
    pub upper_bound: bool,
    pub window: Option<TimeWindow>,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            grid_resolution: 9,
            levels: vec![1, 2, 3, 4, 5],
            max_invalid_fraction: 0.01,
            upper_bound: true,
            window: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            dir: PathBuf::from("runs"),
        }
    }
}

fn resolve(base: &Path, path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        base.join(path)
    }
}

impl RunConfig {
    /// Parse a TOML config; `base` is the directory paths resolve against.
    pub fn load(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| format!("config parse error: {e}"))
    }

    pub fn audit_paths(&self, base: &Path) -> Result<AuditPaths, &'static str> {
        let world = self.inputs.world.as_ref().map(|w| resolve(base, w));
        let from_world = world.as_ref().map(|dir| AuditPaths::from_dir(dir));
        let pick = |explicit: &Option<PathBuf>, from_world: Option<PathBuf>| {
            explicit.as_ref().map(|p| resolve(base, p)).or(from_world)
        };
        let snapshots = pick(
            &self.inputs.snapshots,
            from_world.as_ref().map(|w| w.snapshots_index.clone()),
        )
        .ok_or("snapshots")?;
        let events = pick(
            &self.inputs.events,
            from_world.as_ref().map(|w| w.events.clone()),
        )
        .ok_or("events")?;
        let regions = pick(
            &self.inputs.regions,
            from_world.as_ref().map(|w| w.regions.clone()),
        )
        .ok_or("regions")?;
        let urbanization = pick(
            &self.inputs.urbanization,
            from_world.as_ref().and_then(|w| w.urbanization.clone()),
        );
        Ok(AuditPaths {
            snapshots_index: snapshots,
            events,
            regions,
            urbanization,
        })
    }

    pub fn bidstream_path(&self, base: &Path) -> Option<PathBuf> {
        self.inputs
            .bidstream
            .as_ref()
            .map(|p| resolve(base, p))
            .or_else(|| {
                let dir = self.inputs.world.as_ref().map(|w| resolve(base, w))?;
                let candidate = dir.join("bidstream.csv");
                candidate.exists().then_some(candidate)
            })
    }
}
