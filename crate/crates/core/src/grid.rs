//! Differentiable atomic-density grids.
//!
//! Every atom adds a smooth, compactly supported density to the channel of
//! its type. The kernel is a Gaussian out to the van der Waals radius `r`,
//! continued by a quadratic that reaches zero with zero slope at `1.5 r`.
//! The backward pass maps an upstream gradient over grid values onto the
//! ligand atom coordinates.

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::molecule::{Receptor, Vec3};

const E2: f64 = std::f64::consts::E * std::f64::consts::E;

/// Kernel support radius as a multiple of the atomic radius.
pub const SUPPORT_FACTOR: f64 = 1.5;

/// Density contributed by an atom of radius `r` at distance `d`.
pub fn atom_density(d: f64, r: f64) -> Result<f64> {
    check_kernel_args(d, r)?;
    Ok(density(d, r))
}

/// Derivative of [`atom_density`] with respect to `d`.
pub fn atom_density_deriv(d: f64, r: f64) -> Result<f64> {
    check_kernel_args(d, r)?;
    Ok(density_deriv(d, r))
}

fn check_kernel_args(d: f64, r: f64) -> Result<()> {
    if !(r > 0.0) || !r.is_finite() {
        return Err(contract(format!("atomic radius must be positive, got {r}")));
    }
    if !(d >= 0.0) {
        return Err(contract(format!("distance must be non-negative, got {d}")));
    }
    Ok(())
}

#[inline]
pub(crate) fn density(d: f64, r: f64) -> f64 {
    if d < r {
        (-2.0 * d * d / (r * r)).exp()
    } else if d < SUPPORT_FACTOR * r {
        4.0 / (E2 * r * r) * d * d - 12.0 / (E2 * r) * d + 9.0 / E2
    } else {
        0.0
    }
}

#[inline]
pub(crate) fn density_deriv(d: f64, r: f64) -> f64 {
    if d <= r {
        -4.0 * d / (r * r) * (-2.0 * d * d / (r * r)).exp()
    } else if d < SUPPORT_FACTOR * r {
        8.0 / (E2 * r * r) * d - 12.0 / (E2 * r)
    } else {
        0.0
    }
}

/// Cubic lattice placement and channel count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub center: Vec3,
    pub edge_length: f64,
    pub resolution: f64,
    pub channel_count: usize,
}

impl GridSpec {
    pub const DEFAULT_EDGE: f64 = 24.0;
    pub const DEFAULT_RESOLUTION: f64 = 0.5;

    pub fn new(center: Vec3, edge_length: f64, resolution: f64, channel_count: usize) -> Result<Self> {
        let spec = Self { center, edge_length, resolution, channel_count };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_defaults(center: Vec3, channel_count: usize) -> Self {
        Self::new(center, Self::DEFAULT_EDGE, Self::DEFAULT_RESOLUTION, channel_count)
            .expect("default grid is valid")
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.edge_length > 0.0 && self.edge_length.is_finite()) {
            return Err(contract(format!("edge length must be positive, got {}", self.edge_length)));
        }
        if !(self.resolution > 0.0 && self.resolution.is_finite()) {
            return Err(contract(format!("resolution must be positive, got {}", self.resolution)));
        }
        if self.channel_count == 0 {
            return Err(contract("grid needs at least one channel"));
        }
        if !self.center.iter().all(|c| c.is_finite()) {
            return Err(contract("grid center must be finite"));
        }
        Ok(())
    }

    /// Lattice points per side: `round(edge / resolution) + 1`.
    pub fn points_per_side(&self) -> usize {
        (self.edge_length / self.resolution).round() as usize + 1
    }

    pub fn points_per_channel(&self) -> usize {
        self.points_per_side().pow(3)
    }

    pub fn len(&self) -> usize {
        self.channel_count * self.points_per_channel()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Offset of lattice index `i` from the center along any axis.
    #[inline]
    pub fn offset(&self, i: usize) -> f64 {
        let half = (self.points_per_side() - 1) as f64 * 0.5;
        (i as f64 - half) * self.resolution
    }

    pub fn point(&self, x: usize, y: usize, z: usize) -> Vec3 {
        self.center + Vec3::new(self.offset(x), self.offset(y), self.offset(z))
    }

    /// Flat index, channel-major with x fastest.
    #[inline]
    pub fn index(&self, channel: usize, x: usize, y: usize, z: usize) -> usize {
        let n = self.points_per_side();
        ((channel * n + z) * n + y) * n + x
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        let half = self.offset(self.points_per_side() - 1);
        (0..3).all(|k| (p[k] - self.center[k]).abs() <= half)
    }

    /// Inclusive lattice index range along one axis whose points may lie
    /// within `cutoff` of a coordinate at offset `rel` from the center.
    fn axis_window(&self, rel: f64, cutoff: f64) -> Option<(usize, usize)> {
        let n = self.points_per_side();
        let half = (n - 1) as f64 * 0.5;
        let lo = ((rel - cutoff) / self.resolution + half).floor();
        let hi = ((rel + cutoff) / self.resolution + half).ceil();
        if hi < 0.0 || lo > (n - 1) as f64 {
            return None;
        }
        Some((lo.max(0.0) as usize, hi.min((n - 1) as f64) as usize))
    }
}

/// Per-type density channels on a [`GridSpec`] lattice.
#[derive(Debug, Clone, PartialEq)]
pub struct AtomGrid {
    spec: GridSpec,
    values: Vec<f64>,
}

impl AtomGrid {
    pub fn zeros(spec: GridSpec) -> Self {
        Self { values: vec![0.0; spec.len()], spec }
    }

    pub fn from_values(spec: GridSpec, values: Vec<f64>) -> Result<Self> {
        spec.validate()?;
        if values.len() != spec.len() {
            return Err(contract(format!(
                "grid needs {} values, got {}",
                spec.len(),
                values.len()
            )));
        }
        Ok(Self { spec, values })
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let m = self.spec.points_per_channel();
        &self.values[c * m..(c + 1) * m]
    }

    pub fn get(&self, channel: usize, x: usize, y: usize, z: usize) -> f64 {
        self.values[self.spec.index(channel, x, y, z)]
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    fn splat(&mut self, pos: &Vec3, type_index: usize, radius: f64) {
        let spec = self.spec;
        let rel = pos - spec.center;
        let cutoff = SUPPORT_FACTOR * radius;
        let (Some(wx), Some(wy), Some(wz)) = (
            spec.axis_window(rel.x, cutoff),
            spec.axis_window(rel.y, cutoff),
            spec.axis_window(rel.z, cutoff),
        ) else {
            return;
        };
        for z in wz.0..=wz.1 {
            let dz = rel.z - spec.offset(z);
            for y in wy.0..=wy.1 {
                let dy = rel.y - spec.offset(y);
                let row = spec.index(type_index, 0, y, z);
                for x in wx.0..=wx.1 {
                    let dx = rel.x - spec.offset(x);
                    let d = (dx * dx + dy * dy + dz * dz).sqrt();
                    let v = density(d, radius);
                    if v != 0.0 {
                        self.values[row + x] += v;
                    }
                }
            }
        }
    }

    /// Write the debug/ingestion dump: header then channel-major, x-fastest values.
    pub fn write_dump<W: Write>(&self, mut w: W) -> Result<()> {
        let s = &self.spec;
        let n = s.points_per_side() as u32;
        w.write_all(GRID_MAGIC)?;
        w.write_u32::<LittleEndian>(GRID_FORMAT_VERSION)?;
        for k in 0..3 {
            w.write_f64::<LittleEndian>(s.center[k])?;
        }
        w.write_f64::<LittleEndian>(s.edge_length)?;
        w.write_f64::<LittleEndian>(s.resolution)?;
        w.write_u32::<LittleEndian>(s.channel_count as u32)?;
        for _ in 0..3 {
            w.write_u32::<LittleEndian>(n)?;
        }
        for v in &self.values {
            w.write_f64::<LittleEndian>(*v)?;
        }
        Ok(())
    }

    pub fn read_dump<R: Read>(mut r: R) -> Result<Self> {
        let truncated = |e: std::io::Error| Error::Format(format!("truncated grid dump: {e}"));
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(truncated)?;
        if &magic != GRID_MAGIC {
            return Err(Error::Format("not a grid dump (bad magic)".into()));
        }
        let version = r.read_u32::<LittleEndian>().map_err(truncated)?;
        if version != GRID_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported grid dump version {version} (expected {GRID_FORMAT_VERSION})"
            )));
        }
        let mut c = [0.0; 3];
        for v in c.iter_mut() {
            *v = r.read_f64::<LittleEndian>().map_err(truncated)?;
        }
        let edge = r.read_f64::<LittleEndian>().map_err(truncated)?;
        let res = r.read_f64::<LittleEndian>().map_err(truncated)?;
        let channels = r.read_u32::<LittleEndian>().map_err(truncated)? as usize;
        let spec = GridSpec::new(Vec3::from(c), edge, res, channels)
            .map_err(|e| Error::Format(format!("invalid grid header: {e}")))?;
        let n = spec.points_per_side();
        for axis in ["x", "y", "z"] {
            let dim = r.read_u32::<LittleEndian>().map_err(truncated)? as usize;
            if dim != n {
                return Err(Error::Format(format!(
                    "grid dump {axis} dimension {dim} disagrees with spec ({n})"
                )));
            }
        }
        let mut values = vec![0.0; spec.len()];
        r.read_f64_into::<LittleEndian>(&mut values).map_err(truncated)?;
        Ok(Self { spec, values })
    }
}

pub const GRID_MAGIC: &[u8; 8] = b"CPGRID\0\0";
pub const GRID_FORMAT_VERSION: u32 = 1;

fn check_ligand(coords: &[Vec3], types: &[usize], radii: &[f64], spec: &GridSpec) -> Result<()> {
    spec.validate()?;
    if radii.len() != spec.channel_count {
        return Err(contract(format!(
            "{} radii supplied for {} channels",
            radii.len(),
            spec.channel_count
        )));
    }
    if coords.len() != types.len() {
        return Err(contract(format!(
            "{} ligand coordinates but {} types",
            coords.len(),
            types.len()
        )));
    }
    if let Some(t) = types.iter().find(|&&t| t >= spec.channel_count) {
        return Err(contract(format!("atom type {t} has no channel")));
    }
    Ok(())
}

/// Rasterize receptor and ligand atoms. Densities of same-type atoms add.
///
/// `radii[c]` is the radius of type `c`; its length must equal the channel count.
pub fn rasterize(
    receptor: &Receptor,
    ligand_coords: &[Vec3],
    ligand_types: &[usize],
    radii: &[f64],
    spec: &GridSpec,
) -> Result<AtomGrid> {
    check_ligand(ligand_coords, ligand_types, radii, spec)?;
    if let Some(a) = receptor.atoms().iter().find(|a| a.type_index >= spec.channel_count) {
        return Err(contract(format!("receptor atom type {} has no channel", a.type_index)));
    }
    let mut grid = AtomGrid::zeros(*spec);
    for a in receptor.atoms() {
        grid.splat(&a.position, a.type_index, radii[a.type_index]);
    }
    for (p, &t) in ligand_coords.iter().zip(ligand_types) {
        if !p.iter().all(|c| c.is_finite()) {
            return Err(contract("ligand coordinate is not finite"));
        }
        grid.splat(p, t, radii[t]);
    }
    Ok(grid)
}

/// Chain an upstream gradient over grid values onto ligand atom positions.
///
/// For each ligand atom this sums `upstream[g] * g'(d) * (a - g) / d` over
/// the lattice points `g` of its channel. Points at `d == 0` contribute zero.
pub fn grid_backward(
    upstream: &[f64],
    ligand_coords: &[Vec3],
    ligand_types: &[usize],
    radii: &[f64],
    spec: &GridSpec,
) -> Result<Vec<Vec3>> {
    check_ligand(ligand_coords, ligand_types, radii, spec)?;
    if upstream.len() != spec.len() {
        return Err(contract(format!(
            "upstream gradient has {} values, grid has {}",
            upstream.len(),
            spec.len()
        )));
    }
    let grads = ligand_coords
        .iter()
        .zip(ligand_types)
        .map(|(pos, &t)| {
            let radius = radii[t];
            let rel = pos - spec.center;
            let cutoff = SUPPORT_FACTOR * radius;
            let mut g = Vec3::zeros();
            let (Some(wx), Some(wy), Some(wz)) = (
                spec.axis_window(rel.x, cutoff),
                spec.axis_window(rel.y, cutoff),
                spec.axis_window(rel.z, cutoff),
            ) else {
                return g;
            };
            for z in wz.0..=wz.1 {
                let dz = rel.z - spec.offset(z);
                for y in wy.0..=wy.1 {
                    let dy = rel.y - spec.offset(y);
                    let row = spec.index(t, 0, y, z);
                    for x in wx.0..=wx.1 {
                        let up = upstream[row + x];
                        if up == 0.0 {
                            continue;
                        }
                        let dx = rel.x - spec.offset(x);
                        let d = (dx * dx + dy * dy + dz * dz).sqrt();
                        if d == 0.0 || d >= cutoff {
                            continue;
                        }
                        let scale = up * density_deriv(d, radius) / d;
                        g += Vec3::new(dx, dy, dz) * scale;
                    }
                }
            }
            g
        })
        .collect();
    Ok(grads)
}
