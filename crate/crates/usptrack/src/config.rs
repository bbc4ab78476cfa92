//! The shared TOML run configuration.
//!
//! Values resolve as defaults < config file < command-line flags. Every
//! command writes the resolved configuration next to its outputs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use usptrack_core::baselines::NccConfig;
use usptrack_core::keypoints::DetectorConfig;
use usptrack_core::simulator::SimConfig;
use usptrack_core::teacher::DEFAULT_DISPLACEMENT_CAP;
use usptrack_core::tracker::TrackerConfig;
use usptrack_core::trainer::TrainConfig;
use usptrack_core::{Error, Result};

use crate::formats::{read_text, write_text};
use crate::sequence::LoadOptions;

/// File name of the snapshot written into output directories.
pub const SNAPSHOT_FILE: &str = "run_config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Resample every loaded frame to the tracker's input size.
    pub resize: bool,
    /// Per-frame displacement above which a teacher trajectory is rejected, pixels.
    pub teacher_displacement_cap: f64,
    /// Simulated sequences generated from each training sequence's first frame.
    pub sim_per_sequence: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { resize: true, teacher_displacement_cap: DEFAULT_DISPLACEMENT_CAP, sim_per_sequence: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub survival_threshold: f64,
    /// Side of the patches compared by the similarity metric.
    pub ncc_patch_size: usize,
    /// Frames processed before FPS timing starts.
    pub fps_warmup_frames: usize,
    pub fps_runs: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { survival_threshold: 50.0, ncc_patch_size: 16, fps_warmup_frames: 2, fps_runs: 3 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub tracker: TrackerConfig,
    pub train: TrainConfig,
    pub sim: SimConfig,
    pub detector: DetectorConfig,
    pub ncc: NccConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str, origin: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Format(format!("{origin}: {e}")))
    }

    /// Defaults, overlaid with `path` when given.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => RunConfig::from_toml(&read_text(p)?, &p.display().to_string()),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes to TOML")
    }

    pub fn validate(&self) -> Result<()> {
        self.tracker.validate()?;
        self.train.validate()?;
        self.sim.validate()?;
        self.ncc.validate()?;
        if !(self.data.teacher_displacement_cap > 0.0) {
            return Err(Error::InvalidArgument("data.teacher_displacement_cap must be positive".into()));
        }
        if self.eval.fps_runs == 0 {
            return Err(Error::InvalidArgument("eval.fps_runs must be at least 1".into()));
        }
        Ok(())
    }

    pub fn load_options(&self) -> LoadOptions {
        LoadOptions { resize: self.data.resize.then_some((self.tracker.image_width, self.tracker.image_height)) }
    }

    /// Write the snapshot to `path` and return it.
    pub fn write_snapshot(&self, path: &Path) -> Result<PathBuf> {
        write_text(path, &self.to_toml())?;
        Ok(path.to_path_buf())
    }
}

/// Snapshot location for a file output: `out.traj` → `out.traj.config.toml`.
pub fn snapshot_path_for(output: &Path) -> PathBuf {
    let mut name = output.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".config.toml");
    output.with_file_name(name)
}
