//! Run configuration: one JSON file covering training, reference, and
//! grid-search options. Every command-line flag overrides its config key;
//! unknown keys are rejected.

use std::fs;
use std::path::Path;

use otfield::pipeline::{GridSpec, TrainConfig};
use otfield::reference::ReferenceConfig;
use otfield::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FileConfig {
    /// Output field to train or evaluate; may be omitted when the dataset
    /// declares exactly one field.
    pub field: Option<String>,
    pub train: TrainConfig,
    pub reference: ReferenceConfig,
    /// Grid-search axes; `grid-search` falls back to a small default sweep
    /// when absent.
    pub grid: Option<GridSpec>,
    /// Worker-thread count; defaults to the number of cores.
    pub jobs: Option<usize>,
}

pub fn load_config(path: &Path) -> Result<FileConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: Some(e.line()),
        message: e.to_string(),
    })
}

/// Flags shared by the commands that run training-shaped work. Each one,
/// when present, overrides the matching config key.
#[derive(Clone, Debug, Default, clap::Args)]
pub struct Overrides {
    /// Transport regularization for training transfers
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Feature-propagation rounds before embedding
    #[arg(long)]
    pub wl_iters: Option<usize>,
    /// Cumulative explained-variance threshold for kept components
    #[arg(long)]
    pub pca_threshold: Option<f64>,
    /// Minimum number of kept components
    #[arg(long)]
    pub min_q: Option<usize>,
    /// Seed for projection directions and optimizer restarts
    #[arg(long)]
    pub seed: Option<u64>,
    /// Drop samples whose transport plan fails to converge
    #[arg(long)]
    pub skip_bad_samples: bool,
}

impl Overrides {
    pub fn apply(&self, config: &mut FileConfig) {
        let train = &mut config.train;
        if let Some(lambda) = self.lambda {
            train.lambda = lambda;
        }
        if let Some(h) = self.wl_iters {
            train.wl_iterations = h;
        }
        if let Some(t) = self.pca_threshold {
            train.pca.var_threshold = t;
        }
        if let Some(q) = self.min_q {
            train.pca.min_components = q;
        }
        if let Some(seed) = self.seed {
            train.swwl.seed = seed;
            train.gp.seed = seed;
        }
        if self.skip_bad_samples {
            train.skip_bad_samples = true;
        }
    }
}
