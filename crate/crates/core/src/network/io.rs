//! Binary model files.
//!
//! Layout (little endian): magic, format version, grid spec echo, crop side,
//! layer table `(kind, a, b)`, then every weight and bias as `f64`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::{ConvLayer, DenseLayer, Layer, NetworkModel};
use crate::error::{Error, Result};
use crate::grid::GridSpec;
use crate::molecule::Vec3;

pub const MODEL_MAGIC: &[u8; 8] = b"CPCNNMDL";
pub const MODEL_FORMAT_VERSION: u32 = 1;

const KIND_POOL: u8 = 0;
const KIND_CONV: u8 = 1;
const KIND_RELU: u8 = 2;
const KIND_DENSE: u8 = 3;

pub fn write_model<W: Write>(model: &NetworkModel, mut w: W) -> Result<()> {
    let g = model.grid_spec();
    w.write_all(MODEL_MAGIC)?;
    w.write_u32::<LittleEndian>(MODEL_FORMAT_VERSION)?;
    for k in 0..3 {
        w.write_f64::<LittleEndian>(g.center[k])?;
    }
    w.write_f64::<LittleEndian>(g.edge_length)?;
    w.write_f64::<LittleEndian>(g.resolution)?;
    w.write_u32::<LittleEndian>(g.channel_count as u32)?;
    w.write_u32::<LittleEndian>(model.crop_side() as u32)?;
    w.write_u32::<LittleEndian>(model.layers().len() as u32)?;
    for layer in model.layers() {
        let (kind, a, b) = match layer {
            Layer::MaxPool => (KIND_POOL, 0, 0),
            Layer::Relu => (KIND_RELU, 0, 0),
            Layer::Conv(c) => (KIND_CONV, c.in_channels, c.out_channels),
            Layer::Dense(d) => (KIND_DENSE, d.inputs, d.outputs),
        };
        w.write_u8(kind)?;
        w.write_u32::<LittleEndian>(a as u32)?;
        w.write_u32::<LittleEndian>(b as u32)?;
    }
    for layer in model.layers() {
        if let Some((weights, bias)) = layer.params() {
            for v in weights.iter().chain(bias) {
                w.write_f64::<LittleEndian>(*v)?;
            }
        }
    }
    Ok(())
}

/// Read a model. When `expected_channels` is given, the file's channel count must match it.
pub fn read_model<R: Read>(mut r: R, expected_channels: Option<usize>) -> Result<NetworkModel> {
    let truncated = |e: std::io::Error| Error::Format(format!("truncated model file: {e}"));
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(truncated)?;
    if &magic != MODEL_MAGIC {
        return Err(Error::Format("not a model file (bad magic)".into()));
    }
    let version = r.read_u32::<LittleEndian>().map_err(truncated)?;
    if version != MODEL_FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported model format_version {version} (expected {MODEL_FORMAT_VERSION})"
        )));
    }
    let mut c = [0.0; 3];
    for v in c.iter_mut() {
        *v = r.read_f64::<LittleEndian>().map_err(truncated)?;
    }
    let edge = r.read_f64::<LittleEndian>().map_err(truncated)?;
    let res = r.read_f64::<LittleEndian>().map_err(truncated)?;
    let channels = r.read_u32::<LittleEndian>().map_err(truncated)? as usize;
    if let Some(expected) = expected_channels {
        if expected != channels {
            return Err(Error::Format(format!(
                "model channel_count mismatch: expected {expected}, found {channels}"
            )));
        }
    }
    let grid = GridSpec::new(Vec3::from(c), edge, res, channels)
        .map_err(|e| Error::Format(format!("invalid grid header: {e}")))?;
    let crop_side = r.read_u32::<LittleEndian>().map_err(truncated)? as usize;
    let layer_count = r.read_u32::<LittleEndian>().map_err(truncated)? as usize;
    if layer_count > 4096 {
        return Err(Error::Format(format!("implausible layer count {layer_count}")));
    }
    let mut table = Vec::with_capacity(layer_count);
    for _ in 0..layer_count {
        let kind = r.read_u8().map_err(truncated)?;
        let a = r.read_u32::<LittleEndian>().map_err(truncated)? as usize;
        let b = r.read_u32::<LittleEndian>().map_err(truncated)? as usize;
        table.push((kind, a, b));
    }
    if let Some(&(KIND_CONV, first_in, _)) = table.iter().find(|(k, _, _)| *k == KIND_CONV) {
        if first_in != channels {
            return Err(Error::Format(format!(
                "first convolution expects {first_in} channels but the grid header has {channels}"
            )));
        }
    }
    let mut layers = Vec::with_capacity(layer_count);
    for (kind, a, b) in table {
        let layer = match kind {
            KIND_POOL => Layer::MaxPool,
            KIND_RELU => Layer::Relu,
            KIND_CONV => {
                let mut l = ConvLayer::zeros(a, b);
                r.read_f64_into::<LittleEndian>(&mut l.weights).map_err(truncated)?;
                r.read_f64_into::<LittleEndian>(&mut l.bias).map_err(truncated)?;
                Layer::Conv(l)
            }
            KIND_DENSE => {
                let mut l = DenseLayer::zeros(a, b);
                r.read_f64_into::<LittleEndian>(&mut l.weights).map_err(truncated)?;
                r.read_f64_into::<LittleEndian>(&mut l.bias).map_err(truncated)?;
                Layer::Dense(l)
            }
            other => return Err(Error::Format(format!("unknown layer kind {other}"))),
        };
        layers.push(layer);
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after model payload".into()));
    }
    NetworkModel::from_layers(grid, crop_side, layers)
        .map_err(|e| Error::Format(format!("inconsistent layer shapes: {e}")))
}

pub fn save_model(model: &NetworkModel, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_model(model, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>, expected_channels: Option<usize>) -> Result<NetworkModel> {
    read_model(BufReader::new(File::open(path)?), expected_channels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::AtomGrid;
    use crate::network::Architecture;

    fn model() -> NetworkModel {
        let spec = GridSpec::new(Vec3::zeros(), 3.5, 0.5, 2).unwrap();
        NetworkModel::new(&Architecture { filters: vec![3, 4, 5] }, spec, 11).unwrap()
    }

    #[test]
    fn round_trip_reproduces_logits() {
        let m = model();
        let mut buf = Vec::new();
        write_model(&m, &mut buf).unwrap();
        let back = read_model(&buf[..], Some(2)).unwrap();
        assert_eq!(back, m);
        let mut grid = AtomGrid::zeros(*m.grid_spec());
        for (i, v) in grid.values_mut().iter_mut().enumerate() {
            *v = ((i * 37) % 11) as f64 / 11.0;
        }
        assert_eq!(m.predict(&grid).unwrap(), back.predict(&grid).unwrap());
    }

    #[test]
    fn truncated_file_is_a_format_error() {
        let mut buf = Vec::new();
        write_model(&model(), &mut buf).unwrap();
        for cut in [4, 20, buf.len() - 1] {
            assert!(matches!(read_model(&buf[..cut], None), Err(Error::Format(_))));
        }
    }

    #[test]
    fn channel_mismatch_names_both_counts() {
        let mut buf = Vec::new();
        write_model(&model(), &mut buf).unwrap();
        let err = read_model(&buf[..], Some(5)).unwrap_err().to_string();
        assert!(err.contains("expected 5") && err.contains("found 2"), "{err}");
    }
}
