//! SGD with momentum, an inverse learning-rate decay, L2 weight decay and
//! class-balanced batches.

use std::fmt::Write as _;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{BinaryLabel, NetworkModel};
use crate::error::{Error, Result};
use crate::grid::{rasterize, AtomGrid, GridSpec};
use crate::molecule::{uniform_random_rotation, Atom, Receptor, Vec3};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub momentum: f64,
    pub gamma: f64,
    pub power: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_iterations: usize,
    pub seed: u64,
    /// Random rotation plus translation of each pose before rasterizing.
    pub augment: bool,
    /// Per-axis bound of the augmentation translation, Å.
    pub max_translation: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 0.01,
            momentum: 0.9,
            gamma: 0.001,
            power: 1.0,
            weight_decay: 0.001,
            batch_size: 50,
            max_iterations: 100_000,
            seed: 0,
            augment: true,
            max_translation: 2.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("base_lr", self.base_lr),
            ("momentum", self.momentum),
            ("gamma", self.gamma),
            ("power", self.power),
            ("weight_decay", self.weight_decay),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.momentum >= 1.0 {
            return Err(Error::Config(format!("momentum must be below 1, got {}", self.momentum)));
        }
        if self.batch_size == 0 || self.batch_size % 2 != 0 {
            return Err(Error::Config(format!("batch_size must be positive and even, got {}", self.batch_size)));
        }
        if self.max_iterations == 0 {
            return Err(Error::Config("max_iterations must be positive".into()));
        }
        if !(self.max_translation >= 0.0) {
            return Err(Error::Config("max_translation must be non-negative".into()));
        }
        Ok(())
    }
}

/// `base_lr * (1 + gamma * t)^(-power)`
pub fn learning_rate(config: &TrainConfig, iteration: usize) -> f64 {
    config.base_lr * (1.0 + config.gamma * iteration as f64).powf(-config.power)
}

/// Labeled inputs for [`train`]. `grid` may randomize the example when given an rng.
pub trait TrainingSource: Sync {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn label(&self, index: usize) -> BinaryLabel;

    fn grid(&self, index: usize, rng: Option<&mut ChaCha8Rng>) -> Result<AtomGrid>;
}

/// Precomputed grids, used as-is.
#[derive(Debug, Clone, Default)]
pub struct GridExamples {
    pub examples: Vec<(AtomGrid, BinaryLabel)>,
}

impl TrainingSource for GridExamples {
    fn len(&self) -> usize {
        self.examples.len()
    }

    fn label(&self, index: usize) -> BinaryLabel {
        self.examples[index].1
    }

    fn grid(&self, index: usize, _rng: Option<&mut ChaCha8Rng>) -> Result<AtomGrid> {
        Ok(self.examples[index].0.clone())
    }
}

/// One protein–ligand pose with its training label.
#[derive(Debug, Clone)]
pub struct TrainExample {
    pub receptor: Arc<Receptor>,
    pub ligand_coords: Vec<Vec3>,
    pub ligand_types: Vec<usize>,
    pub label: BinaryLabel,
    /// Grid placement; its center is the binding site.
    pub grid: GridSpec,
}

/// Rotate the whole complex by a uniform random rotation about the grid
/// center and shift it by up to `max_translation` Å along each axis.
pub fn augment<R: Rng + ?Sized>(example: &TrainExample, max_translation: f64, rng: &mut R) -> TrainExample {
    let rot = uniform_random_rotation(rng);
    let shift = if max_translation > 0.0 {
        Vec3::new(
            rng.random_range(-max_translation..=max_translation),
            rng.random_range(-max_translation..=max_translation),
            rng.random_range(-max_translation..=max_translation),
        )
    } else {
        Vec3::zeros()
    };
    let c = example.grid.center;
    let moved = |p: &Vec3| rot * (p - c) + c + shift;
    let receptor_atoms = example
        .receptor
        .atoms()
        .iter()
        .map(|a| Atom { position: moved(&a.position), type_index: a.type_index })
        .collect();
    TrainExample {
        receptor: Arc::new(Receptor::new(receptor_atoms).expect("rigid motion keeps coordinates finite")),
        ligand_coords: example.ligand_coords.iter().map(moved).collect(),
        ligand_types: example.ligand_types.clone(),
        label: example.label,
        grid: example.grid,
    }
}

/// Pose examples rasterized on demand, optionally augmented.
#[derive(Debug, Clone)]
pub struct PoseTrainingSet {
    pub examples: Vec<TrainExample>,
    pub radii: Vec<f64>,
    pub augment: bool,
    pub max_translation: f64,
}

impl TrainingSource for PoseTrainingSet {
    fn len(&self) -> usize {
        self.examples.len()
    }

    fn label(&self, index: usize) -> BinaryLabel {
        self.examples[index].label
    }

    fn grid(&self, index: usize, rng: Option<&mut ChaCha8Rng>) -> Result<AtomGrid> {
        let ex = &self.examples[index];
        match rng {
            Some(rng) if self.augment => {
                let a = augment(ex, self.max_translation, rng);
                rasterize(&a.receptor, &a.ligand_coords, &a.ligand_types, &self.radii, &a.grid)
            }
            _ => rasterize(&ex.receptor, &ex.ligand_coords, &ex.ligand_types, &self.radii, &ex.grid),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub iteration: usize,
    pub lr: f64,
    /// Mean cross-entropy over the batch, before the update.
    pub loss: f64,
    /// Fraction of the batch classified correctly, before the update.
    pub accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossTrace {
    pub records: Vec<LossRecord>,
}

impl LossTrace {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iteration,lr,loss,accuracy\n");
        for r in &self.records {
            writeln!(s, "{},{},{},{}", r.iteration, r.lr, r.loss, r.accuracy).unwrap();
        }
        s
    }
}

/// Per-class index queue, reshuffled whenever it is exhausted.
struct ClassQueue {
    indices: Vec<usize>,
    pos: usize,
}

impl ClassQueue {
    fn new(indices: Vec<usize>, rng: &mut ChaCha8Rng) -> Self {
        let mut q = Self { indices, pos: 0 };
        q.indices.shuffle(rng);
        q
    }

    fn next(&mut self, rng: &mut ChaCha8Rng) -> usize {
        if self.pos == self.indices.len() {
            self.indices.shuffle(rng);
            self.pos = 0;
        }
        self.pos += 1;
        self.indices[self.pos - 1]
    }
}

/// Examples per parallel work unit; partial sums are combined in chunk order.
const CHUNK: usize = 5;

struct ChunkResult {
    loss: f64,
    correct: usize,
    grads: Vec<Vec<f64>>,
}

/// Train `model` in place. Each batch holds `batch_size / 2` examples of each
/// class; the minority class is cycled (reshuffled per pass) as often as needed.
pub fn train(model: &mut NetworkModel, source: &dyn TrainingSource, config: &TrainConfig) -> Result<LossTrace> {
    config.validate()?;
    let mut by_class = [Vec::new(), Vec::new()];
    for i in 0..source.len() {
        by_class[source.label(i).class_index()].push(i);
    }
    if by_class.iter().any(|c| c.is_empty()) {
        return Err(Error::Config(format!(
            "training needs both classes; got {} binding and {} non-binding examples",
            by_class[0].len(),
            by_class[1].len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let [binding, nonbinding] = by_class;
    let mut queues = [ClassQueue::new(binding, &mut rng), ClassQueue::new(nonbinding, &mut rng)];

    let mut velocity: Vec<Vec<f64>> = model
        .layers()
        .iter()
        .map(|l| vec![0.0; l.parameter_count()])
        .collect();
    let half = config.batch_size / 2;
    let mut trace = LossTrace::default();

    for t in 0..config.max_iterations {
        let mut batch = Vec::with_capacity(config.batch_size);
        for q in queues.iter_mut() {
            for _ in 0..half {
                batch.push((q.next(&mut rng), rng.next_u64()));
            }
        }

        let frozen: &NetworkModel = model;
        let chunks: Vec<ChunkResult> = batch
            .par_chunks(CHUNK)
            .map(|chunk| -> Result<ChunkResult> {
                let mut acc = ChunkResult { loss: 0.0, correct: 0, grads: Vec::new() };
                for &(idx, seed) in chunk {
                    let mut ex_rng = ChaCha8Rng::seed_from_u64(seed);
                    let grid = source.grid(idx, Some(&mut ex_rng))?;
                    let target = source.label(idx);
                    let (loss, pass, grads) = frozen.loss_and_gradients(&grid, target)?;
                    acc.loss += loss;
                    let predicted = if pass.probabilities[0] >= pass.probabilities[1] { 0 } else { 1 };
                    acc.correct += usize::from(predicted == target.class_index());
                    if acc.grads.is_empty() {
                        acc.grads = grads.layers;
                    } else {
                        for (a, g) in acc.grads.iter_mut().zip(&grads.layers) {
                            for (x, y) in a.iter_mut().zip(g) {
                                *x += y;
                            }
                        }
                    }
                }
                Ok(acc)
            })
            .collect::<Result<_>>()?;

        let mut loss = 0.0;
        let mut correct = 0;
        let mut grads: Vec<Vec<f64>> = Vec::new();
        for c in chunks {
            loss += c.loss;
            correct += c.correct;
            if grads.is_empty() {
                grads = c.grads;
            } else {
                for (a, g) in grads.iter_mut().zip(&c.grads) {
                    for (x, y) in a.iter_mut().zip(g) {
                        *x += y;
                    }
                }
            }
        }

        let lr = learning_rate(config, t);
        let n = config.batch_size as f64;
        for ((layer, v), g) in model.layers_mut().iter_mut().zip(&mut velocity).zip(&grads) {
            let Some((w, b)) = layer.params_mut() else { continue };
            let nw = w.len();
            for (k, wk) in w.iter_mut().enumerate() {
                v[k] = config.momentum * v[k] + lr * (g[k] / n + config.weight_decay * *wk);
                *wk -= v[k];
            }
            for (k, bk) in b.iter_mut().enumerate() {
                let j = nw + k;
                v[j] = config.momentum * v[j] + lr * (g[j] / n);
                *bk -= v[j];
            }
        }

        trace.records.push(LossRecord {
            iteration: t,
            lr,
            loss: loss / n,
            accuracy: correct as f64 / n,
        });
        if t % 100 == 0 {
            log::debug!("iteration {t}: lr {lr:.5} loss {:.4} accuracy {:.3}", loss / n, correct as f64 / n);
        }
    }
    Ok(trace)
}

/// Fraction of examples whose most probable class matches the label (no augmentation).
pub fn evaluate_accuracy(model: &NetworkModel, source: &dyn TrainingSource) -> Result<f64> {
    if source.is_empty() {
        return Ok(0.0);
    }
    let correct: Vec<bool> = (0..source.len())
        .into_par_iter()
        .map(|i| -> Result<bool> {
            let grid = source.grid(i, None)?;
            let (_, p) = model.predict(&grid)?;
            let predicted = if p[0] >= p[1] { 0 } else { 1 };
            Ok(predicted == source.label(i).class_index())
        })
        .collect::<Result<_>>()?;
    Ok(correct.iter().filter(|&&c| c).count() as f64 / source.len() as f64)
}
