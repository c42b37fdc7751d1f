//! Configuration file layout and flag overrides.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use cnnpose::network::{Architecture, OutputMode, TrainConfig};
use cnnpose::optimizer::PoseOptions;
use cnnpose::pipeline::{GridConfig, PipelineConfig};
use cnnpose::sampling::LabelThresholds;
use cnnpose::synthetic::SyntheticOptions;
use serde::{Deserialize, Serialize};

/// Everything a run can be configured with. Every key is optional; missing
/// keys take the defaults shown by `--help`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    pub seed: u64,
    pub workers: Option<usize>,
    pub rounds: Option<usize>,
    pub bin_width: Option<f64>,
    pub mode: OutputMode,
    pub train: TrainConfig,
    pub grid: GridConfig,
    pub architecture: Architecture,
    pub pose: PoseOptions,
    pub thresholds: LabelThresholds,
    pub sample: SampleConfig,
    pub synthetic: SyntheticOptions,
    pub paths: Paths,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleConfig {
    pub per_target: usize,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self { per_target: 500 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub corpus: Option<PathBuf>,
    pub training_set: Option<PathBuf>,
    pub random_set: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl CliConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn pipeline(&self) -> PipelineConfig {
        let defaults = PipelineConfig::default();
        PipelineConfig {
            train: TrainConfig { seed: self.seed, ..self.train.clone() },
            grid: self.grid,
            architecture: self.architecture.clone(),
            pose: self.pose.clone(),
            thresholds: self.thresholds,
            mode: self.mode,
            seed: self.seed,
            rounds: self.rounds.unwrap_or(defaults.rounds),
            bin_width: self.bin_width.unwrap_or(defaults.bin_width),
        }
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

#[derive(Debug, Clone, Args)]
#[command(next_help_heading = "Training")]
pub struct TrainFlags {
    /// Base learning rate [default: 0.01]
    #[arg(long)]
    pub base_lr: Option<f64>,
    /// SGD momentum [default: 0.9]
    #[arg(long)]
    pub momentum: Option<f64>,
    /// Inverse learning-rate policy gamma [default: 0.001]
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Inverse learning-rate policy power [default: 1]
    #[arg(long)]
    pub power: Option<f64>,
    /// L2 weight decay on weights [default: 0.001]
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Examples per batch, half from each class [default: 50]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Training iterations [default: 100000]
    #[arg(long)]
    pub train_iterations: Option<usize>,
    /// Random rotation and translation of each example [default: true]
    #[arg(long)]
    pub augment: Option<bool>,
    /// Largest augmentation shift per axis, Å [default: 2]
    #[arg(long)]
    pub max_translation: Option<f64>,
}

impl TrainFlags {
    pub fn apply(&self, c: &mut TrainConfig) {
        set(&mut c.base_lr, self.base_lr);
        set(&mut c.momentum, self.momentum);
        set(&mut c.gamma, self.gamma);
        set(&mut c.power, self.power);
        set(&mut c.weight_decay, self.weight_decay);
        set(&mut c.batch_size, self.batch_size);
        set(&mut c.max_iterations, self.train_iterations);
        set(&mut c.augment, self.augment);
        set(&mut c.max_translation, self.max_translation);
    }
}

#[derive(Debug, Clone, Args)]
#[command(next_help_heading = "Grid")]
pub struct GridFlags {
    /// Grid edge length, Å [default: 24]
    #[arg(long)]
    pub edge_length: Option<f64>,
    /// Grid spacing, Å [default: 0.5]
    #[arg(long)]
    pub resolution: Option<f64>,
}

impl GridFlags {
    pub fn apply(&self, c: &mut GridConfig) {
        set(&mut c.edge_length, self.edge_length);
        set(&mut c.resolution, self.resolution);
    }
}

#[derive(Debug, Clone, Args)]
#[command(next_help_heading = "Network")]
pub struct ArchFlags {
    /// Filters per pool-conv-relu module, comma separated [default: 32,64,128]
    #[arg(long, value_delimiter = ',')]
    pub filters: Option<Vec<usize>>,
}

impl ArchFlags {
    pub fn apply(&self, c: &mut Architecture) {
        if let Some(f) = &self.filters {
            c.filters = f.clone();
        }
    }
}

#[derive(Debug, Clone, Args)]
#[command(next_help_heading = "Pose optimization")]
pub struct PoseFlags {
    /// Class output to maximize: probability or logit [default: probability]
    #[arg(long)]
    pub mode: Option<OutputMode>,
    /// Stop when a step improves the score by less than this [default: 1e-5]
    #[arg(long)]
    pub improvement_tolerance: Option<f64>,
    /// Maximum BFGS iterations per pose [default: 100]
    #[arg(long)]
    pub max_steps: Option<usize>,
    /// Line-search step shrink factor [default: 0.5]
    #[arg(long)]
    pub backtrack_factor: Option<f64>,
    /// Line-search sufficient-increase coefficient [default: 0.0001]
    #[arg(long)]
    pub sufficient_increase: Option<f64>,
    /// Line-search backtracks before giving up [default: 20]
    #[arg(long)]
    pub max_backtracks: Option<usize>,
    /// Longest first trial step [default: 1]
    #[arg(long)]
    pub max_initial_step: Option<f64>,
    /// Translation variable scale [default: 1]
    #[arg(long)]
    pub translation_scale: Option<f64>,
    /// Rotation variable scale [default: 1]
    #[arg(long)]
    pub rotation_scale: Option<f64>,
    /// Torsion variable scale [default: 1]
    #[arg(long)]
    pub torsion_scale: Option<f64>,
}

impl PoseFlags {
    pub fn apply(&self, c: &mut CliConfig) {
        set(&mut c.mode, self.mode);
        let b = &mut c.pose.bfgs;
        set(&mut b.improvement_tolerance, self.improvement_tolerance);
        set(&mut b.max_iterations, self.max_steps);
        set(&mut b.backtrack_factor, self.backtrack_factor);
        set(&mut b.sufficient_increase, self.sufficient_increase);
        set(&mut b.max_backtracks, self.max_backtracks);
        set(&mut b.max_initial_step, self.max_initial_step);
        let s = &mut c.pose.scaling;
        set(&mut s.translation, self.translation_scale);
        set(&mut s.rotation, self.rotation_scale);
        set(&mut s.torsion, self.torsion_scale);
    }
}

#[derive(Debug, Clone, Args)]
#[command(next_help_heading = "Labels")]
pub struct LabelFlags {
    /// Poses below this RMSD are binding, Å [default: 2]
    #[arg(long)]
    pub binding_max: Option<f64>,
    /// Poses above this RMSD are non-binding, Å [default: 4]
    #[arg(long)]
    pub nonbinding_min: Option<f64>,
}

impl LabelFlags {
    pub fn apply(&self, c: &mut LabelThresholds) {
        set(&mut c.binding_max, self.binding_max);
        set(&mut c.nonbinding_min, self.nonbinding_min);
    }
}

#[derive(Debug, Clone, Args)]
#[command(next_help_heading = "Synthetic corpus")]
pub struct SynthFlags {
    /// Number of targets [default: 10]
    #[arg(long)]
    pub targets: Option<usize>,
    /// Fewest ligand atoms [default: 6]
    #[arg(long)]
    pub min_ligand_atoms: Option<usize>,
    /// Most ligand atoms [default: 9]
    #[arg(long)]
    pub max_ligand_atoms: Option<usize>,
    /// Most rotatable bonds per ligand [default: 3]
    #[arg(long)]
    pub max_torsions: Option<usize>,
    /// Receptor pocket atoms per target [default: 80]
    #[arg(long)]
    pub receptor_atoms: Option<usize>,
}

impl SynthFlags {
    pub fn apply(&self, c: &mut SyntheticOptions) {
        set(&mut c.targets, self.targets);
        set(&mut c.min_ligand_atoms, self.min_ligand_atoms);
        set(&mut c.max_ligand_atoms, self.max_ligand_atoms);
        set(&mut c.max_torsions, self.max_torsions);
        set(&mut c.receptor_atoms, self.receptor_atoms);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<CliConfig>("seed = 3\nbogus = 1\n").is_err());
        assert!(toml::from_str::<CliConfig>("[train]\nbase_lr = 0.1\nlr = 2\n").is_err());
    }

    #[test]
    fn empty_file_is_all_defaults() {
        let c: CliConfig = toml::from_str("").unwrap();
        assert_eq!(c, CliConfig::default());
        assert_eq!(c.pipeline(), PipelineConfig::default());
    }

    #[test]
    fn nested_tables_parse() {
        let c: CliConfig = toml::from_str(
            "seed = 9\nrounds = 3\nmode = \"logit\"\n[grid]\nedge_length = 15.0\nresolution = 1.0\n\
             [architecture]\nfilters = [4, 8]\n[pose.bfgs]\nmax_iterations = 7\n",
        )
        .unwrap();
        let p = c.pipeline();
        assert_eq!(p.seed, 9);
        assert_eq!(p.train.seed, 9);
        assert_eq!(p.rounds, 3);
        assert_eq!(p.mode, OutputMode::Logit);
        assert_eq!(p.architecture.filters, vec![4, 8]);
        assert_eq!(p.pose.bfgs.max_iterations, 7);
    }
}
