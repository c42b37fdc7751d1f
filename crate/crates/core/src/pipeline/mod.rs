//! Iterative training: train a network, optimize the random poses with it,
//! add the optimized poses to the training set, retrain, and optimize the
//! same random poses again.

mod stats;

pub use stats::{
    compare_methods, delta_rmsd_stats, histogram, histogram_over, read_results, write_results, Category,
    CategoryStats, HistogramBin, IterationReport, MethodComparison, ResultRecord,
};

use std::collections::hash_map::DefaultHasher;
use std::collections::HashMap;
use std::fs;
use std::hash::{Hash, Hasher};
use std::io::BufReader;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Target};
use crate::error::{contract, Error, Result};
use crate::network::{
    load_model, save_model, train, Architecture, LossTrace, NetworkModel, OutputMode, PoseTrainingSet,
    TrainConfig, TrainExample,
};
use crate::optimizer::{optimize_pose, CnnScorer, PoseOptions};
use crate::sampling::{label_pose, load_dataset, save_dataset, LabelThresholds, PoseLabel, PoseRecord};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub edge_length: f64,
    pub resolution: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { edge_length: 24.0, resolution: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub train: TrainConfig,
    pub grid: GridConfig,
    pub architecture: Architecture,
    pub pose: PoseOptions,
    pub thresholds: LabelThresholds,
    pub mode: OutputMode,
    pub seed: u64,
    pub rounds: usize,
    /// ΔRMSD histogram bin width, Å.
    pub bin_width: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            grid: GridConfig::default(),
            architecture: Architecture::default(),
            pose: PoseOptions::default(),
            thresholds: LabelThresholds::default(),
            mode: OutputMode::default(),
            seed: 0,
            rounds: 2,
            bin_width: 0.25,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::Config("rounds must be at least 1".into()));
        }
        if !(self.bin_width > 0.0) {
            return Err(Error::Config("bin_width must be positive".into()));
        }
        self.train.validate()?;
        self.pose.bfgs.validate()?;
        self.thresholds.validate()
    }
}

/// Deterministic child seed for a named purpose.
pub fn derive_seed(seed: u64, purpose: &str, index: u64) -> u64 {
    // splitmix64 over a simple mix of the inputs
    let mut h = seed ^ 0x9E37_79B9_7F4A_7C15;
    for b in purpose.bytes().chain(index.to_le_bytes()) {
        h = (h ^ b as u64).wrapping_mul(0x100_0000_01B3);
    }
    h = (h ^ (h >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    h ^ (h >> 31)
}

fn target_index(corpus: &Corpus) -> HashMap<&str, &Target> {
    corpus.targets.iter().map(|t| (t.id.as_str(), t)).collect()
}

fn lookup<'a>(index: &HashMap<&str, &'a Target>, id: &str) -> Result<&'a Target> {
    index
        .get(id)
        .copied()
        .ok_or_else(|| contract(format!("pose references unknown target `{id}`")))
}

/// Realize the trainable (non-ambiguous) records as training examples.
pub fn training_examples(corpus: &Corpus, records: &[PoseRecord], grid: &GridConfig) -> Result<Vec<TrainExample>> {
    let index = target_index(corpus);
    let channels = corpus.types.len();
    records
        .iter()
        .filter_map(|r| r.label.training_label().map(|l| (r, l)))
        .map(|(r, label)| {
            let t = lookup(&index, &r.target_id)?;
            Ok(TrainExample {
                receptor: t.receptor.clone(),
                ligand_coords: t.ligand.apply_dof(&r.dof)?,
                ligand_types: t.ligand.types(),
                label,
                grid: t.grid_spec(grid.edge_length, grid.resolution, channels)?,
            })
        })
        .collect()
}

/// Initialize and train a model on `records`.
pub fn train_model(
    corpus: &Corpus,
    records: &[PoseRecord],
    config: &PipelineConfig,
    seed: u64,
) -> Result<(NetworkModel, LossTrace)> {
    let examples = training_examples(corpus, records, &config.grid)?;
    let Some(first) = corpus.targets.first() else {
        return Err(Error::Config("corpus has no targets".into()));
    };
    let spec = first.grid_spec(config.grid.edge_length, config.grid.resolution, corpus.types.len())?;
    let mut model = NetworkModel::new(&config.architecture, spec, derive_seed(seed, "init", 0))?;
    let source = PoseTrainingSet {
        examples,
        radii: corpus.radii(),
        augment: config.train.augment,
        max_translation: config.train.max_translation,
    };
    let train_cfg = TrainConfig { seed: derive_seed(seed, "train", 0), ..config.train.clone() };
    let trace = train(&mut model, &source, &train_cfg)?;
    Ok((model, trace))
}

/// Optimize every pose against `model`, in parallel, returning results in input order.
pub fn optimize_records(
    model: &NetworkModel,
    corpus: &Corpus,
    poses: &[PoseRecord],
    config: &PipelineConfig,
) -> Result<Vec<ResultRecord>> {
    let index = target_index(corpus);
    let radii = corpus.radii();
    let channels = corpus.types.len();
    poses
        .par_iter()
        .map(|pose| {
            let t = lookup(&index, &pose.target_id)?;
            let scorer = CnnScorer {
                model,
                receptor: &t.receptor,
                ligand_types: t.ligand.types(),
                radii: &radii,
                grid: t.grid_spec(config.grid.edge_length, config.grid.resolution, channels)?,
                mode: config.mode,
            };
            let result = optimize_pose(&scorer, &t.ligand, &t.crystal_coords(), &pose.dof, &config.pose)?;
            Ok(ResultRecord::from_optimization(pose, &result))
        })
        .collect()
}

/// Original records followed by the optimized final poses, relabeled by final RMSD.
/// Ambiguous relabeled poses stay in the set; training skips them.
pub fn extend_training_set(
    original: &[PoseRecord],
    optimized: &[ResultRecord],
    round: usize,
    thresholds: &LabelThresholds,
) -> Result<Vec<PoseRecord>> {
    let mut out = original.to_vec();
    let origin = format!("optimized-round-{round}");
    for r in optimized {
        let dof = r
            .final_dof
            .clone()
            .ok_or_else(|| contract(format!("result {} carries no final pose", r.pose_id())))?;
        out.push(PoseRecord {
            target_id: r.target_id.clone(),
            pose_index: r.pose_index,
            dof,
            rmsd: r.final_rmsd,
            label: label_pose(r.final_rmsd, thresholds)?,
            score: r.final_score,
            origin: Some(origin.clone()),
        });
    }
    Ok(out)
}

/// Hash of the initial poses of a result set, for checking that rounds start alike.
pub fn initial_dof_hash(results: &[ResultRecord]) -> u64 {
    let mut h = DefaultHasher::new();
    for r in results {
        r.pose_id().hash(&mut h);
        if let Some(d) = &r.initial_dof {
            for v in d.to_vec() {
                v.to_bits().hash(&mut h);
            }
        }
    }
    h.finish()
}

#[derive(Debug, Clone)]
pub struct RoundOutput {
    pub model: NetworkModel,
    pub training_set: Vec<PoseRecord>,
    pub loss: Option<LossTrace>,
    pub results: Vec<ResultRecord>,
    pub report: IterationReport,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub rounds: Vec<RoundOutput>,
    pub comparison: MethodComparison,
}

pub fn method_name(round: usize) -> String {
    format!("CNN{round}")
}

fn check_both_classes(records: &[PoseRecord]) -> Result<()> {
    let binding = records.iter().filter(|r| r.label == PoseLabel::Binding).count();
    let nonbinding = records.iter().filter(|r| r.label == PoseLabel::NonBinding).count();
    if binding == 0 || nonbinding == 0 {
        return Err(Error::Config(format!(
            "training set needs both classes; got {binding} binding and {nonbinding} non-binding poses"
        )));
    }
    Ok(())
}

/// Run `config.rounds` rounds of train-then-optimize. With `out_dir`, every
/// round is checkpointed to `round-<k>/` and completed rounds are reused on
/// a rerun; the final reports are written next to them.
pub fn run_pipeline(
    config: &PipelineConfig,
    corpus: &Corpus,
    initial_training_set: &[PoseRecord],
    random_set: &[PoseRecord],
    out_dir: Option<&Path>,
) -> Result<PipelineOutput> {
    config.validate()?;
    check_both_classes(initial_training_set)?;
    let channels = corpus.types.len();
    let mut training_set = initial_training_set.to_vec();
    let mut rounds: Vec<RoundOutput> = Vec::with_capacity(config.rounds);

    for round in 1..=config.rounds {
        if let Some(prev) = rounds.last() {
            training_set = extend_training_set(&training_set, &prev.results, round - 1, &config.thresholds)?;
        }
        let dir = out_dir.map(|d| d.join(format!("round-{round}")));
        let resumed = match &dir {
            Some(d) if d.join(COMPLETE_MARKER).exists() => {
                log::info!("round {round}: reusing checkpoint in {}", d.display());
                let model = load_model(d.join("model.bin"), Some(channels))?;
                let results = read_results(BufReader::new(fs::File::open(d.join("results.jsonl"))?))?;
                let stored = load_dataset(d.join("training_set.jsonl"), &config.thresholds)?;
                if stored != training_set {
                    return Err(Error::Config(format!(
                        "checkpoint {} was produced from a different training set",
                        d.display()
                    )));
                }
                Some((model, None, results))
            }
            _ => None,
        };
        let (model, loss, results) = match resumed {
            Some(r) => r,
            None => {
                log::info!("round {round}: training on {} poses", training_set.len());
                let (model, loss) = train_model(corpus, &training_set, config, derive_seed(config.seed, "round", round as u64))?;
                log::info!("round {round}: optimizing {} poses", random_set.len());
                let results = optimize_records(&model, corpus, random_set, config)?;
                if let Some(d) = &dir {
                    fs::create_dir_all(d)?;
                    save_dataset(&training_set, d.join("training_set.jsonl"))?;
                    fs::write(d.join("loss.csv"), loss.to_csv())?;
                    let mut buf = Vec::new();
                    write_results(&results, &mut buf)?;
                    fs::write(d.join("results.jsonl"), buf)?;
                    save_model(&model, d.join("model.bin"))?;
                    fs::write(d.join(COMPLETE_MARKER), b"")?;
                }
                (model, Some(loss), results)
            }
        };
        let report = delta_rmsd_stats(&method_name(round), &results, &config.thresholds)?;
        if let Some(sigma) = report.row(Category::All).sigma {
            log::info!("round {round}: ΔRMSD sigma {sigma:.4}");
        }
        rounds.push(RoundOutput { model, training_set: training_set.clone(), loss, results, report });
    }

    let sets: Vec<(String, Vec<ResultRecord>)> = rounds
        .iter()
        .enumerate()
        .map(|(i, r)| (method_name(i + 1), r.results.clone()))
        .collect();
    let comparison = compare_methods(&sets, &config.thresholds, config.bin_width)?;
    if let Some(d) = out_dir {
        fs::create_dir_all(d)?;
        fs::write(d.join("report.csv"), &comparison.report_csv)?;
        fs::write(d.join("histogram.csv"), &comparison.histogram_csv)?;
        fs::write(d.join("scatter.csv"), &comparison.scatter_csv)?;
    }
    Ok(PipelineOutput { rounds, comparison })
}

const COMPLETE_MARKER: &str = "COMPLETE";
