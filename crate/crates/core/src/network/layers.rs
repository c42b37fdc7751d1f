use nalgebra::{DMatrixView, DMatrixViewMut};
use rand::Rng;

use super::Shape;

pub const KERNEL: usize = 3;
const KERNEL_VOLUME: usize = KERNEL * KERNEL * KERNEL;

/// 3x3x3 convolution, stride 1, zero padding 1.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub in_channels: usize,
    pub out_channels: usize,
    /// `[out][in][kz][ky][kx]`
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvLayer {
    pub fn zeros(in_channels: usize, out_channels: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            weights: vec![0.0; out_channels * in_channels * KERNEL_VOLUME],
            bias: vec![0.0; out_channels],
        }
    }

    /// Uniform in `±sqrt(3 / fan_in)`, zero bias.
    pub fn init<R: Rng>(in_channels: usize, out_channels: usize, rng: &mut R) -> Self {
        let mut layer = Self::zeros(in_channels, out_channels);
        let bound = (3.0 / (in_channels * KERNEL_VOLUME) as f64).sqrt();
        for w in &mut layer.weights {
            *w = rng.random_range(-bound..bound);
        }
        layer
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub inputs: usize,
    pub outputs: usize,
    /// `[out][in]`
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl DenseLayer {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self { inputs, outputs, weights: vec![0.0; inputs * outputs], bias: vec![0.0; outputs] }
    }

    pub fn init<R: Rng>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let mut layer = Self::zeros(inputs, outputs);
        let bound = (3.0 / inputs as f64).sqrt();
        for w in &mut layer.weights {
            *w = rng.random_range(-bound..bound);
        }
        layer
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    /// 2x2x2 max pooling with stride 2. Ties go to the lowest linear index.
    MaxPool,
    Conv(ConvLayer),
    Relu,
    Dense(DenseLayer),
}

/// Valid output range along one axis for kernel tap offset `delta` in {-1, 0, 1}.
#[inline]
fn tap_range(n: usize, delta: isize) -> (usize, usize) {
    match delta {
        -1 => (1, n),
        0 => (0, n),
        _ => (0, n.saturating_sub(1)),
    }
}

impl Layer {
    pub(crate) fn output_shape(&self, input: Shape) -> Result<Shape, String> {
        match (self, input) {
            (Layer::MaxPool, Shape::Spatial { channels, side }) => {
                if side < 2 || side % 2 != 0 {
                    return Err(format!("max pooling needs an even side, got {side}"));
                }
                Ok(Shape::Spatial { channels, side: side / 2 })
            }
            (Layer::Conv(c), Shape::Spatial { channels, side }) => {
                if c.in_channels != channels {
                    return Err(format!(
                        "convolution expects {} input channels, got {channels}",
                        c.in_channels
                    ));
                }
                if c.weights.len() != c.out_channels * c.in_channels * KERNEL_VOLUME
                    || c.bias.len() != c.out_channels
                {
                    return Err("convolution parameter sizes are inconsistent".into());
                }
                Ok(Shape::Spatial { channels: c.out_channels, side })
            }
            (Layer::Relu, s) => Ok(s),
            (Layer::Dense(d), s) => {
                if d.inputs != s.len() {
                    return Err(format!("dense layer expects {} inputs, got {}", d.inputs, s.len()));
                }
                if d.weights.len() != d.inputs * d.outputs || d.bias.len() != d.outputs {
                    return Err("dense parameter sizes are inconsistent".into());
                }
                Ok(Shape::Flat(d.outputs))
            }
            (layer, s) => Err(format!("{} cannot follow a flat shape {s:?}", layer.name())),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Layer::MaxPool => "maxpool",
            Layer::Conv(_) => "conv",
            Layer::Relu => "relu",
            Layer::Dense(_) => "dense",
        }
    }

    pub fn parameter_count(&self) -> usize {
        match self {
            Layer::Conv(c) => c.weights.len() + c.bias.len(),
            Layer::Dense(d) => d.weights.len() + d.bias.len(),
            _ => 0,
        }
    }

    pub fn params(&self) -> Option<(&Vec<f64>, &Vec<f64>)> {
        match self {
            Layer::Conv(c) => Some((&c.weights, &c.bias)),
            Layer::Dense(d) => Some((&d.weights, &d.bias)),
            _ => None,
        }
    }

    pub fn params_mut(&mut self) -> Option<(&mut Vec<f64>, &mut Vec<f64>)> {
        match self {
            Layer::Conv(c) => Some((&mut c.weights, &mut c.bias)),
            Layer::Dense(d) => Some((&mut d.weights, &mut d.bias)),
            _ => None,
        }
    }

    pub(crate) fn forward(&self, input: &[f64], shape: Shape) -> (Vec<f64>, Vec<u32>) {
        match self {
            Layer::MaxPool => {
                let Shape::Spatial { channels, side } = shape else { unreachable!() };
                maxpool_forward(input, channels, side)
            }
            Layer::Conv(c) => {
                let Shape::Spatial { side, .. } = shape else { unreachable!() };
                (conv_forward(c, input, side), Vec::new())
            }
            Layer::Relu => (input.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(), Vec::new()),
            Layer::Dense(d) => {
                let out = (0..d.outputs)
                    .map(|o| {
                        let row = &d.weights[o * d.inputs..(o + 1) * d.inputs];
                        d.bias[o] + row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>()
                    })
                    .collect();
                (out, Vec::new())
            }
        }
    }

    /// Returns the input gradient and, when requested, the parameter gradient
    /// (weights then bias).
    pub(crate) fn backward(
        &self,
        input: &[f64],
        output: &[f64],
        argmax: &[u32],
        dout: &[f64],
        shape: Shape,
        weight_grads: bool,
    ) -> (Vec<f64>, Vec<f64>) {
        match self {
            Layer::MaxPool => {
                let mut dinput = vec![0.0; input.len()];
                for (g, &i) in dout.iter().zip(argmax) {
                    dinput[i as usize] += g;
                }
                (dinput, Vec::new())
            }
            Layer::Relu => {
                let dinput = dout
                    .iter()
                    .zip(output)
                    .map(|(&g, &y)| if y > 0.0 { g } else { 0.0 })
                    .collect();
                (dinput, Vec::new())
            }
            Layer::Conv(c) => {
                let Shape::Spatial { side, .. } = shape else { unreachable!() };
                conv_backward(c, input, dout, side, weight_grads)
            }
            Layer::Dense(d) => {
                let mut dinput = vec![0.0; d.inputs];
                for o in 0..d.outputs {
                    let g = dout[o];
                    let row = &d.weights[o * d.inputs..(o + 1) * d.inputs];
                    for (di, w) in dinput.iter_mut().zip(row) {
                        *di += g * w;
                    }
                }
                let dparams = if weight_grads {
                    let mut p = Vec::with_capacity(d.weights.len() + d.outputs);
                    for o in 0..d.outputs {
                        p.extend(input.iter().map(|x| dout[o] * x));
                    }
                    p.extend_from_slice(&dout[..d.outputs]);
                    p
                } else {
                    Vec::new()
                };
                (dinput, dparams)
            }
        }
    }
}

fn maxpool_forward(input: &[f64], channels: usize, side: usize) -> (Vec<f64>, Vec<u32>) {
    let half = side / 2;
    let mut out = Vec::with_capacity(channels * half * half * half);
    let mut argmax = Vec::with_capacity(out.capacity());
    for c in 0..channels {
        let base = c * side * side * side;
        for oz in 0..half {
            for oy in 0..half {
                for ox in 0..half {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = usize::MAX;
                    for dz in 0..2 {
                        for dy in 0..2 {
                            let row = base + ((2 * oz + dz) * side + 2 * oy + dy) * side + 2 * ox;
                            for dx in 0..2 {
                                let v = input[row + dx];
                                // Strict comparison keeps the lowest index among ties.
                                if v > best || best_idx == usize::MAX {
                                    best = v;
                                    best_idx = row + dx;
                                }
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(best_idx as u32);
                }
            }
        }
    }
    (out, argmax)
}

/// Visit every in-bounds row segment of tap `k`: `(dst_start, src_start, len)`
/// where dst indexes the output lattice and src the shifted input lattice.
fn for_tap_rows(n: usize, k: usize, mut f: impl FnMut(usize, usize, usize)) {
    let (dz, dy, dx) = tap_offsets(k);
    let (z0, z1) = tap_range(n, dz);
    let (y0, y1) = tap_range(n, dy);
    let (x0, x1) = tap_range(n, dx);
    let xi0 = (x0 as isize + dx) as usize;
    for z in z0..z1 {
        let zi = (z as isize + dz) as usize;
        for y in y0..y1 {
            let yi = (y as isize + dy) as usize;
            f((z * n + y) * n + x0, (zi * n + yi) * n + xi0, x1 - x0);
        }
    }
}

/// Column `i * 27 + k` holds input channel `i` shifted by tap `k`, zero padded.
fn im2col(input: &[f64], channels: usize, n: usize) -> Vec<f64> {
    let vol = n * n * n;
    let mut cols = vec![0.0; channels * KERNEL_VOLUME * vol];
    for i in 0..channels {
        let in_c = &input[i * vol..(i + 1) * vol];
        for k in 0..KERNEL_VOLUME {
            let col = &mut cols[(i * KERNEL_VOLUME + k) * vol..][..vol];
            for_tap_rows(n, k, |dst, src, len| col[dst..dst + len].copy_from_slice(&in_c[src..src + len]));
        }
    }
    cols
}

fn col2im(cols: &[f64], channels: usize, n: usize) -> Vec<f64> {
    let vol = n * n * n;
    let mut out = vec![0.0; channels * vol];
    for i in 0..channels {
        let out_c = &mut out[i * vol..(i + 1) * vol];
        for k in 0..KERNEL_VOLUME {
            let col = &cols[(i * KERNEL_VOLUME + k) * vol..][..vol];
            for_tap_rows(n, k, |dst, src, len| {
                for (o, v) in out_c[src..src + len].iter_mut().zip(&col[dst..dst + len]) {
                    *o += v;
                }
            });
        }
    }
    out
}

// The lattice is column-major `vol x channels`, so the channel-major layout
// doubles as a matrix and weights `[out][in * 27]` as an `(in * 27) x out` one.
fn conv_forward(c: &ConvLayer, input: &[f64], n: usize) -> Vec<f64> {
    let vol = n * n * n;
    let taps = c.in_channels * KERNEL_VOLUME;
    let cols = im2col(input, c.in_channels, n);
    let mut out = vec![0.0; c.out_channels * vol];
    for (o, chunk) in out.chunks_mut(vol).enumerate() {
        chunk.fill(c.bias[o]);
    }
    let a = DMatrixView::from_slice(&cols, vol, taps);
    let w = DMatrixView::from_slice(&c.weights, taps, c.out_channels);
    DMatrixViewMut::from_slice(&mut out, vol, c.out_channels).gemm(1.0, &a, &w, 1.0);
    out
}

fn conv_backward(c: &ConvLayer, input: &[f64], dout: &[f64], n: usize, weight_grads: bool) -> (Vec<f64>, Vec<f64>) {
    let vol = n * n * n;
    let taps = c.in_channels * KERNEL_VOLUME;
    let d = DMatrixView::from_slice(dout, vol, c.out_channels);
    let w = DMatrixView::from_slice(&c.weights, taps, c.out_channels);
    let mut dcols = vec![0.0; taps * vol];
    DMatrixViewMut::from_slice(&mut dcols, vol, taps).gemm(1.0, &d, &w.transpose(), 0.0);
    let dinput = col2im(&dcols, c.in_channels, n);
    let mut dw = Vec::new();
    if weight_grads {
        let cols = im2col(input, c.in_channels, n);
        let a = DMatrixView::from_slice(&cols, vol, taps);
        dw = vec![0.0; c.weights.len()];
        DMatrixViewMut::from_slice(&mut dw, taps, c.out_channels).gemm_tr(1.0, &a, &d, 0.0);
        dw.extend((0..c.out_channels).map(|o| dout[o * vol..(o + 1) * vol].iter().sum::<f64>()));
    }
    (dinput, dw)
}

#[inline]
fn tap_offsets(k: usize) -> (isize, isize, isize) {
    let kz = k / 9;
    let ky = (k / 3) % 3;
    let kx = k % 3;
    (kz as isize - 1, ky as isize - 1, kx as isize - 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn maxpool_ties_take_lowest_index() {
        let input = vec![1.0; 8];
        let (out, argmax) = maxpool_forward(&input, 1, 2);
        assert_eq!(out, vec![1.0]);
        assert_eq!(argmax, vec![0]);
    }

    #[test]
    fn maxpool_routes_gradient_to_argmax_only() {
        let mut input = vec![0.0; 8];
        input[5] = 3.0;
        let (out, argmax) = maxpool_forward(&input, 1, 2);
        let shape = Shape::Spatial { channels: 1, side: 2 };
        let (din, _) = Layer::MaxPool.backward(&input, &out, &argmax, &[2.0], shape, false);
        for (i, g) in din.iter().enumerate() {
            assert_eq!(*g, if i == 5 { 2.0 } else { 0.0 });
        }
    }

    #[test]
    fn relu_backward_zeroes_inactive() {
        let input = [-1.0, 0.0, 2.0];
        let (out, _) = Layer::Relu.forward(&input, Shape::Flat(3));
        let (din, _) = Layer::Relu.backward(&input, &out, &[], &[5.0, 5.0, 5.0], Shape::Flat(3), false);
        assert_eq!(din, vec![0.0, 0.0, 5.0]);
    }

    #[test]
    fn identity_kernel_copies_input() {
        let mut c = ConvLayer::zeros(1, 1);
        c.weights[13] = 1.0;
        c.bias[0] = 0.5;
        let input: Vec<f64> = (0..27).map(|v| v as f64).collect();
        let out = conv_forward(&c, &input, 3);
        for (o, i) in out.iter().zip(&input) {
            assert_eq!(*o, i + 0.5);
        }
    }
}
