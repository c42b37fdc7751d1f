//! A small 3D convolutional classifier over atom grids.
//!
//! The default architecture is three `maxpool(2) -> conv(3x3x3, pad 1) -> relu`
//! modules followed by a fully connected layer with two outputs: class 0 is
//! "binding", class 1 is "non-binding".

mod io;
mod layers;
mod train;

pub use io::{load_model, read_model, save_model, write_model, MODEL_FORMAT_VERSION, MODEL_MAGIC};
pub use layers::{ConvLayer, DenseLayer, Layer};
pub use train::{
    augment, evaluate_accuracy, learning_rate, train, GridExamples, LossRecord, LossTrace,
    PoseTrainingSet, TrainConfig, TrainExample, TrainingSource,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::grid::{AtomGrid, GridSpec};

/// Number of output classes.
pub const CLASS_COUNT: usize = 2;

/// Two-way label used for training. Class index 0 is the binding class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BinaryLabel {
    Binding,
    NonBinding,
}

impl BinaryLabel {
    pub fn class_index(self) -> usize {
        match self {
            BinaryLabel::Binding => 0,
            BinaryLabel::NonBinding => 1,
        }
    }

    pub fn from_class_index(i: usize) -> Option<Self> {
        match i {
            0 => Some(BinaryLabel::Binding),
            1 => Some(BinaryLabel::NonBinding),
            _ => None,
        }
    }
}

pub const BINDING_CLASS: usize = 0;

/// Which class output pose optimization differentiates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutputMode {
    /// Softmax probability of the class.
    #[default]
    Probability,
    /// Pre-softmax log-odds of the class against the other class, `z_c - z_other`.
    Logit,
}

impl std::str::FromStr for OutputMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "probability" => Ok(OutputMode::Probability),
            "logit" => Ok(OutputMode::Logit),
            other => Err(Error::Config(format!("unknown output mode `{other}`"))),
        }
    }
}

/// Filter counts, one `pool -> conv -> relu` module per entry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Architecture {
    pub filters: Vec<usize>,
}

impl Default for Architecture {
    fn default() -> Self {
        Self { filters: vec![32, 64, 128] }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Shape {
    Spatial { channels: usize, side: usize },
    Flat(usize),
}

impl Shape {
    pub(crate) fn len(self) -> usize {
        match self {
            Shape::Spatial { channels, side } => channels * side * side * side,
            Shape::Flat(n) => n,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkModel {
    grid: GridSpec,
    crop_side: usize,
    layers: Vec<Layer>,
    shapes: Vec<Shape>,
}

/// Activations recorded by [`NetworkModel::forward`] for a later backward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    activations: Vec<Vec<f64>>,
    pool_argmax: Vec<Vec<u32>>,
    pub logits: [f64; CLASS_COUNT],
    pub probabilities: [f64; CLASS_COUNT],
}

/// Gradients of one scalar objective with respect to every parameter and
/// every input voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    /// Per layer; empty for parameter-free layers. Weights then bias, flattened.
    pub layers: Vec<Vec<f64>>,
    /// Same layout as the (uncropped) input grid values.
    pub input: Vec<f64>,
}

impl NetworkModel {
    /// Build a model of the given architecture for grids shaped like `grid`.
    /// The lattice is cropped to the largest side divisible by `2^modules`.
    pub fn new(arch: &Architecture, grid: GridSpec, seed: u64) -> Result<Self> {
        grid.validate()?;
        if arch.filters.is_empty() || arch.filters.contains(&0) {
            return Err(Error::Config("architecture needs at least one module with filters > 0".into()));
        }
        let factor = 1usize << arch.filters.len();
        let side = grid.points_per_side();
        let crop_side = side / factor * factor;
        if crop_side == 0 {
            return Err(Error::Config(format!(
                "a {side}-point lattice is too small for {} pooling modules",
                arch.filters.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::new();
        let mut channels = grid.channel_count;
        for &f in &arch.filters {
            layers.push(Layer::MaxPool);
            layers.push(Layer::Conv(ConvLayer::init(channels, f, &mut rng)));
            layers.push(Layer::Relu);
            channels = f;
        }
        let final_side = crop_side / factor;
        let inputs = channels * final_side.pow(3);
        layers.push(Layer::Dense(DenseLayer::init(inputs, CLASS_COUNT, &mut rng)));
        Self::from_layers(grid, crop_side, layers)
    }

    /// Assemble a model from explicit layers, checking that shapes chain.
    pub fn from_layers(grid: GridSpec, crop_side: usize, layers: Vec<Layer>) -> Result<Self> {
        grid.validate()?;
        let side = grid.points_per_side();
        if crop_side == 0 || crop_side > side {
            return Err(Error::Config(format!("crop side {crop_side} invalid for a {side}-point lattice")));
        }
        let mut shapes = vec![Shape::Spatial { channels: grid.channel_count, side: crop_side }];
        for (i, layer) in layers.iter().enumerate() {
            let next = layer
                .output_shape(*shapes.last().unwrap())
                .map_err(|e| Error::Config(format!("layer {i}: {e}")))?;
            shapes.push(next);
        }
        if *shapes.last().unwrap() != Shape::Flat(CLASS_COUNT) {
            return Err(Error::Config(format!(
                "network must end in a dense layer with {CLASS_COUNT} outputs"
            )));
        }
        Ok(Self { grid, crop_side, layers, shapes })
    }

    pub fn grid_spec(&self) -> &GridSpec {
        &self.grid
    }

    pub fn crop_side(&self) -> usize {
        self.crop_side
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.parameter_count()).sum()
    }

    /// Set every weight and bias to zero.
    pub fn zero_parameters(&mut self) {
        for l in &mut self.layers {
            if let Some((w, b)) = l.params_mut() {
                w.fill(0.0);
                b.fill(0.0);
            }
        }
    }

    fn check_input(&self, grid: &AtomGrid) -> Result<()> {
        let s = grid.spec();
        if s.channel_count != self.grid.channel_count {
            return Err(contract(format!(
                "grid has {} channels, model expects {}",
                s.channel_count, self.grid.channel_count
            )));
        }
        if s.points_per_side() != self.grid.points_per_side() {
            return Err(contract(format!(
                "grid has {} points per side, model expects {}",
                s.points_per_side(),
                self.grid.points_per_side()
            )));
        }
        Ok(())
    }

    fn crop(&self, values: &[f64]) -> Vec<f64> {
        let n = self.grid.points_per_side();
        let m = self.crop_side;
        if n == m {
            return values.to_vec();
        }
        let mut out = Vec::with_capacity(self.grid.channel_count * m * m * m);
        for c in 0..self.grid.channel_count {
            for z in 0..m {
                for y in 0..m {
                    let start = ((c * n + z) * n + y) * n;
                    out.extend_from_slice(&values[start..start + m]);
                }
            }
        }
        out
    }

    fn uncrop(&self, grad: &[f64]) -> Vec<f64> {
        let n = self.grid.points_per_side();
        let m = self.crop_side;
        if n == m {
            return grad.to_vec();
        }
        let mut out = vec![0.0; self.grid.len()];
        for c in 0..self.grid.channel_count {
            for z in 0..m {
                for y in 0..m {
                    let dst = ((c * n + z) * n + y) * n;
                    let src = ((c * m + z) * m + y) * m;
                    out[dst..dst + m].copy_from_slice(&grad[src..src + m]);
                }
            }
        }
        out
    }

    /// Run the network, keeping activations for [`NetworkModel::backward`].
    pub fn forward(&self, grid: &AtomGrid) -> Result<ForwardPass> {
        self.check_input(grid)?;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        let mut pool_argmax = Vec::with_capacity(self.layers.len());
        activations.push(self.crop(grid.values()));
        for (i, layer) in self.layers.iter().enumerate() {
            let input = activations.last().unwrap();
            let (out, argmax) = layer.forward(input, self.shapes[i]);
            pool_argmax.push(argmax);
            activations.push(out);
        }
        let out = activations.last().unwrap();
        let logits = [out[0], out[1]];
        let probabilities = softmax(logits);
        Ok(ForwardPass { activations, pool_argmax, logits, probabilities })
    }

    /// Logits and probabilities without keeping activations.
    pub fn predict(&self, grid: &AtomGrid) -> Result<([f64; 2], [f64; 2])> {
        let pass = self.forward(grid)?;
        Ok((pass.logits, pass.probabilities))
    }

    /// Back-propagate `dlogits` (the objective's gradient with respect to the
    /// two logits) through the recorded pass.
    pub fn backward(&self, pass: &ForwardPass, dlogits: [f64; CLASS_COUNT], weight_grads: bool) -> Result<Gradients> {
        if pass.activations.len() != self.layers.len() + 1
            || pass.activations.iter().zip(&self.shapes).any(|(a, s)| a.len() != s.len())
        {
            return Err(Error::Contract("forward pass was recorded for a different model".into()));
        }
        let mut grad = dlogits.to_vec();
        let mut layer_grads = vec![Vec::new(); self.layers.len()];
        for i in (0..self.layers.len()).rev() {
            let (dinput, dparams) = self.layers[i].backward(
                &pass.activations[i],
                &pass.activations[i + 1],
                &pass.pool_argmax[i],
                &grad,
                self.shapes[i],
                weight_grads,
            );
            layer_grads[i] = dparams;
            grad = dinput;
        }
        Ok(Gradients { layers: layer_grads, input: self.uncrop(&grad) })
    }

    /// Softmax cross-entropy loss against `target` and its gradients.
    pub fn loss_and_gradients(&self, grid: &AtomGrid, target: BinaryLabel) -> Result<(f64, ForwardPass, Gradients)> {
        let pass = self.forward(grid)?;
        let (loss, dlogits) = cross_entropy(&pass, target);
        let grads = self.backward(&pass, dlogits, true)?;
        Ok((loss, pass, grads))
    }

    /// The selected class output and its gradient with respect to the input grid.
    pub fn class_output_gradient(&self, grid: &AtomGrid, class_index: usize, mode: OutputMode) -> Result<(f64, Vec<f64>)> {
        if class_index >= CLASS_COUNT {
            return Err(contract(format!("class index {class_index} out of range")));
        }
        let pass = self.forward(grid)?;
        let (value, dlogits) = class_output(&pass, class_index, mode);
        let grads = self.backward(&pass, dlogits, false)?;
        Ok((value, grads.input))
    }

    /// Whether two passes lie on the same linear piece of the network: every
    /// ReLU unit is on in both or off in both, and every pool picks the same
    /// voxel. Finite differences only agree with gradients between such passes.
    pub fn same_piece(&self, a: &ForwardPass, b: &ForwardPass) -> bool {
        a.pool_argmax == b.pool_argmax
            && self.layers.iter().enumerate().filter(|(_, l)| matches!(l, Layer::Relu)).all(|(i, _)| {
                a.activations[i + 1].iter().zip(&b.activations[i + 1]).all(|(x, y)| (*x > 0.0) == (*y > 0.0))
            })
    }
}

pub fn softmax(z: [f64; 2]) -> [f64; 2] {
    let m = z[0].max(z[1]);
    let e0 = (z[0] - m).exp();
    let e1 = (z[1] - m).exp();
    let s = e0 + e1;
    [e0 / s, e1 / s]
}

/// Cross-entropy loss and its gradient with respect to the logits.
pub fn cross_entropy(pass: &ForwardPass, target: BinaryLabel) -> (f64, [f64; 2]) {
    let t = target.class_index();
    let z = pass.logits;
    let m = z[0].max(z[1]);
    let lse = m + ((z[0] - m).exp() + (z[1] - m).exp()).ln();
    let loss = lse - z[t];
    let p = pass.probabilities;
    let mut d = p;
    d[t] -= 1.0;
    (loss, d)
}

/// Value of the selected output and its gradient with respect to the logits.
pub fn class_output(pass: &ForwardPass, class_index: usize, mode: OutputMode) -> (f64, [f64; 2]) {
    let other = 1 - class_index;
    match mode {
        OutputMode::Logit => {
            let mut d = [0.0; 2];
            d[class_index] = 1.0;
            d[other] = -1.0;
            (pass.logits[class_index] - pass.logits[other], d)
        }
        OutputMode::Probability => {
            let p = pass.probabilities;
            let s = p[class_index] * p[other];
            let mut d = [0.0; 2];
            d[class_index] = s;
            d[other] = -s;
            (p[class_index], d)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::molecule::Vec3;

    fn small_grid(channels: usize) -> GridSpec {
        GridSpec::new(Vec3::zeros(), 3.5, 0.5, channels).unwrap()
    }

    #[test]
    fn default_architecture_crops_49_to_48() {
        let spec = GridSpec::with_defaults(Vec3::zeros(), 2);
        let model = NetworkModel::new(&Architecture { filters: vec![2, 2, 2] }, spec, 1).unwrap();
        assert_eq!(model.crop_side(), 48);
        assert_eq!(model.shapes.last(), Some(&Shape::Flat(2)));
        assert_eq!(model.shapes[model.shapes.len() - 2], Shape::Spatial { channels: 2, side: 6 });
    }

    #[test]
    fn zero_model_is_uninformed() {
        let spec = small_grid(2);
        let mut model = NetworkModel::new(&Architecture::default(), spec, 3).unwrap();
        model.zero_parameters();
        let mut grid = AtomGrid::zeros(spec);
        for (i, v) in grid.values_mut().iter_mut().enumerate() {
            *v = (i % 7) as f64 * 0.3;
        }
        let pass = model.forward(&grid).unwrap();
        assert_eq!(pass.probabilities, [0.5, 0.5]);
        let (loss, d) = cross_entropy(&pass, BinaryLabel::Binding);
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(d, [-0.5, 0.5]);
        let grads = model.backward(&pass, d, true).unwrap();
        let dense = grads.layers.last().unwrap();
        assert_eq!(&dense[dense.len() - 2..], &[-0.5, 0.5]);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let model = NetworkModel::new(&Architecture::default(), small_grid(2), 3).unwrap();
        assert!(model.forward(&AtomGrid::zeros(small_grid(3))).is_err());
        assert!(model.class_output_gradient(&AtomGrid::zeros(small_grid(2)), 2, OutputMode::Logit).is_err());
    }

    #[test]
    fn too_small_lattice_is_a_config_error() {
        let spec = GridSpec::new(Vec3::zeros(), 1.0, 0.5, 1).unwrap();
        assert!(matches!(
            NetworkModel::new(&Architecture::default(), spec, 0),
            Err(Error::Config(_))
        ));
    }
}
