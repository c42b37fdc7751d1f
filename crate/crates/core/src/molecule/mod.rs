//! Molecular data model: typed atoms, the ligand torsion tree, pose
//! realization from degrees of freedom, RMSD and bounding boxes.

mod io;

pub use io::{
    parse_ligand, parse_receptor, AtomRecord, AtomTypeDocument, AtomTypeRecord, BondRecord,
    MoleculeDocument, ATOM_TYPE_FORMAT_VERSION, MOLECULE_FORMAT_VERSION,
};

use std::collections::{BTreeSet, HashMap};

use nalgebra::{Quaternion, Rotation3, Unit, UnitQuaternion};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};

pub type Vec3 = nalgebra::Vector3<f64>;

#[derive(Debug, Clone, PartialEq)]
pub struct AtomType {
    pub name: String,
    /// Van der Waals radius in Å.
    pub vdw_radius: f64,
}

/// Named atom types with their radii. Each type maps to one grid channel.
#[derive(Debug, Clone, PartialEq)]
pub struct AtomTypeTable {
    entries: Vec<AtomType>,
    by_name: HashMap<String, usize>,
}

impl AtomTypeTable {
    pub fn new(entries: Vec<AtomType>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Structure("atom type table is empty".into()));
        }
        let mut by_name = HashMap::with_capacity(entries.len());
        for (i, e) in entries.iter().enumerate() {
            if !(e.vdw_radius.is_finite() && e.vdw_radius > 0.0) {
                return Err(Error::Structure(format!(
                    "atom type `{}` has non-positive radius {}",
                    e.name, e.vdw_radius
                )));
            }
            if by_name.insert(e.name.clone(), i).is_some() {
                return Err(Error::Structure(format!("duplicate atom type `{}`", e.name)));
            }
        }
        Ok(Self { entries, by_name })
    }

    /// Heavy-atom element types. Hydrogens are deliberately absent.
    pub fn default_heavy_atoms() -> Self {
        let raw = [
            ("C", 1.9),
            ("N", 1.8),
            ("O", 1.7),
            ("S", 2.0),
            ("P", 2.1),
            ("F", 1.5),
            ("Cl", 1.8),
            ("Br", 2.0),
            ("I", 2.2),
            ("B", 1.92),
            ("Met", 1.2),
        ];
        Self::new(
            raw.iter()
                .map(|&(name, vdw_radius)| AtomType { name: name.to_string(), vdw_radius })
                .collect(),
        )
        .expect("default table is valid")
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.by_name
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownAtomType(name.to_string()))
    }

    pub fn get(&self, index: usize) -> Option<&AtomType> {
        self.entries.get(index)
    }

    pub fn entries(&self) -> &[AtomType] {
        &self.entries
    }

    /// Radii indexed by type, the layout the rasterizer consumes.
    pub fn radii(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.vdw_radius).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Atom {
    pub position: Vec3,
    pub type_index: usize,
}

fn check_atoms(atoms: &[Atom], n_types: Option<usize>) -> Result<()> {
    for (i, a) in atoms.iter().enumerate() {
        if !a.position.iter().all(|c| c.is_finite()) {
            return Err(contract(format!("atom {i} has a non-finite coordinate")));
        }
        if let Some(n) = n_types {
            if a.type_index >= n {
                return Err(contract(format!(
                    "atom {i} has type index {} but only {n} types exist",
                    a.type_index
                )));
            }
        }
    }
    Ok(())
}

/// The rigid binding partner. Never moved by scoring or optimization.
#[derive(Debug, Clone, PartialEq)]
pub struct Receptor {
    atoms: Vec<Atom>,
}

impl Receptor {
    pub fn new(atoms: Vec<Atom>) -> Result<Self> {
        check_atoms(&atoms, None)?;
        Ok(Self { atoms })
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }
}

/// A bond whose rotation moves `downstream` about the axis `axis_from -> axis_to`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RotatableBond {
    pub axis_from: usize,
    pub axis_to: usize,
    pub downstream: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ligand {
    atoms: Vec<Atom>,
    root_atom: usize,
    bonds: Vec<RotatableBond>,
    /// Bond indices ordered leaf-to-root (children before ancestors).
    torsion_order: Vec<usize>,
    centroid: Vec3,
}

impl Ligand {
    pub fn new(atoms: Vec<Atom>, root_atom: usize, bonds: Vec<RotatableBond>) -> Result<Self> {
        if atoms.is_empty() {
            return Err(Error::Structure("ligand has no atoms".into()));
        }
        check_atoms(&atoms, None)?;
        let n = atoms.len();
        if root_atom >= n {
            return Err(Error::Structure(format!("root atom {root_atom} out of bounds ({n} atoms)")));
        }

        let mut sets = Vec::with_capacity(bonds.len());
        for (b, bond) in bonds.iter().enumerate() {
            for idx in [bond.axis_from, bond.axis_to].iter().chain(&bond.downstream) {
                if *idx >= n {
                    return Err(Error::Structure(format!(
                        "bond {b} references atom {idx} out of bounds ({n} atoms)"
                    )));
                }
            }
            if bond.axis_from == bond.axis_to {
                return Err(Error::Structure(format!("bond {b} has a degenerate axis")));
            }
            if bond.downstream.is_empty() {
                return Err(Error::Structure(format!("bond {b} moves no atoms")));
            }
            let set: BTreeSet<usize> = bond.downstream.iter().copied().collect();
            if set.len() != bond.downstream.len() {
                return Err(Error::Structure(format!("bond {b} lists a downstream atom twice")));
            }
            if set.contains(&bond.axis_from) || set.contains(&bond.axis_to) {
                return Err(Error::Structure(format!(
                    "bond {b} lists one of its own axis atoms as downstream"
                )));
            }
            if set.contains(&root_atom) {
                return Err(Error::Structure(format!("bond {b} moves the root atom {root_atom}")));
            }
            if (atoms[bond.axis_to].position - atoms[bond.axis_from].position).norm() == 0.0 {
                return Err(Error::Structure(format!("bond {b} axis atoms coincide")));
            }
            sets.push(set);
        }

        for a in 0..bonds.len() {
            for b in 0..bonds.len() {
                if a == b {
                    continue;
                }
                let (sa, sb) = (&sets[a], &sets[b]);
                let axis_b = [bonds[b].axis_from, bonds[b].axis_to];
                if sb.is_subset(sa) {
                    if sa.len() == sb.len() {
                        return Err(Error::Structure(format!(
                            "bonds {a} and {b} move identical atom sets"
                        )));
                    }
                    let parent_axis = [bonds[a].axis_from, bonds[a].axis_to];
                    if axis_b.iter().any(|i| !sa.contains(i) && !parent_axis.contains(i)) {
                        return Err(Error::Structure(format!(
                            "bond {b} is nested in bond {a} but its axis is not carried by it"
                        )));
                    }
                } else if sa.is_subset(sb) {
                    // checked from the other side
                } else if !sa.is_disjoint(sb) {
                    return Err(Error::Structure(format!(
                        "bonds {a} and {b} have overlapping, non-nested downstream sets"
                    )));
                } else if axis_b.iter().any(|i| sa.contains(i)) {
                    return Err(Error::Structure(format!(
                        "bond {b} axis moves with bond {a} but its downstream atoms do not"
                    )));
                }
            }
        }

        let mut torsion_order: Vec<usize> = (0..bonds.len()).collect();
        torsion_order.sort_by_key(|&b| sets[b].len());

        let centroid = atoms.iter().map(|a| a.position).sum::<Vec3>() / n as f64;
        Ok(Self { atoms, root_atom, bonds, torsion_order, centroid })
    }

    /// A ligand with no internal degrees of freedom.
    pub fn rigid(atoms: Vec<Atom>) -> Result<Self> {
        Self::new(atoms, 0, Vec::new())
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn root_atom(&self) -> usize {
        self.root_atom
    }

    pub fn rotatable_bonds(&self) -> &[RotatableBond] {
        &self.bonds
    }

    pub fn torsion_count(&self) -> usize {
        self.bonds.len()
    }

    pub fn types(&self) -> Vec<usize> {
        self.atoms.iter().map(|a| a.type_index).collect()
    }

    pub fn reference_coords(&self) -> Vec<Vec3> {
        self.atoms.iter().map(|a| a.position).collect()
    }

    /// Centroid of the reference conformation, the pivot of the global rotation.
    pub fn reference_centroid(&self) -> Vec3 {
        self.centroid
    }

    pub fn zero_dof(&self) -> ConformationDof {
        ConformationDof::zero(self.bonds.len())
    }

    /// Realize the atom coordinates for a conformation.
    ///
    /// Torsions are applied leaf-to-root, each rotating its downstream atoms
    /// about its bond axis; the result is then rotated about the reference
    /// centroid and translated.
    pub fn apply_dof(&self, dof: &ConformationDof) -> Result<Vec<Vec3>> {
        dof.check_for(self)?;
        let mut coords = self.reference_coords();
        for &b in &self.torsion_order {
            let angle = dof.torsions[b];
            if angle == 0.0 {
                continue;
            }
            let bond = &self.bonds[b];
            let origin = coords[bond.axis_from];
            let axis = Unit::new_normalize(coords[bond.axis_to] - origin);
            let rot = Rotation3::from_axis_angle(&axis, angle);
            for &i in &bond.downstream {
                coords[i] = origin + rot * (coords[i] - origin);
            }
        }
        let rot = Rotation3::new(dof.rotation);
        let c = self.centroid;
        for p in coords.iter_mut() {
            *p = rot * (*p - c) + c + dof.translation;
        }
        Ok(coords)
    }
}

/// Ligand pose parameters: translation (Å), rotation vector (radians,
/// about the reference centroid) and one torsion angle per rotatable bond.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConformationDof {
    pub translation: Vec3,
    pub rotation: Vec3,
    pub torsions: Vec<f64>,
}

impl ConformationDof {
    pub fn zero(torsion_count: usize) -> Self {
        Self { translation: Vec3::zeros(), rotation: Vec3::zeros(), torsions: vec![0.0; torsion_count] }
    }

    pub fn len(&self) -> usize {
        6 + self.torsions.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn is_finite(&self) -> bool {
        self.to_vec().iter().all(|v| v.is_finite())
    }

    /// Flat layout `[tx, ty, tz, rx, ry, rz, torsions...]`.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.len());
        v.extend(self.translation.iter());
        v.extend(self.rotation.iter());
        v.extend(&self.torsions);
        v
    }

    pub fn from_slice(x: &[f64]) -> Result<Self> {
        if x.len() < 6 {
            return Err(contract(format!("flat DOF vector needs at least 6 entries, got {}", x.len())));
        }
        Ok(Self {
            translation: Vec3::new(x[0], x[1], x[2]),
            rotation: Vec3::new(x[3], x[4], x[5]),
            torsions: x[6..].to_vec(),
        })
    }

    pub(crate) fn check_for(&self, ligand: &Ligand) -> Result<()> {
        if self.torsions.len() != ligand.torsion_count() {
            return Err(contract(format!(
                "conformation has {} torsions but ligand has {} rotatable bonds",
                self.torsions.len(),
                ligand.torsion_count()
            )));
        }
        if !self.is_finite() {
            return Err(contract("conformation has non-finite components"));
        }
        Ok(())
    }
}

/// Root-mean-square distance under index correspondence.
pub fn rmsd(a: &[Vec3], b: &[Vec3]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(contract(format!("rmsd of {} vs {} atoms", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(contract("rmsd of empty coordinate lists"));
    }
    let sum: f64 = a.iter().zip(b).map(|(p, q)| (p - q).norm_squared()).sum();
    Ok((sum / a.len() as f64).sqrt())
}

pub fn centroid(coords: &[Vec3]) -> Result<Vec3> {
    if coords.is_empty() {
        return Err(contract("centroid of empty coordinate list"));
    }
    Ok(coords.iter().sum::<Vec3>() / coords.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    pub min: Vec3,
    pub max: Vec3,
}

impl BoundingBox {
    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|k| p[k] >= self.min[k] && p[k] <= self.max[k])
    }

    pub fn center(&self) -> Vec3 {
        (self.min + self.max) * 0.5
    }

    pub fn extent(&self) -> Vec3 {
        self.max - self.min
    }
}

/// Axis-aligned box around `coords`, each face pushed out by `padding`.
pub fn bounding_box(coords: &[Vec3], padding: f64) -> Result<BoundingBox> {
    if coords.is_empty() {
        return Err(contract("bounding box of empty coordinate list"));
    }
    if !(padding >= 0.0) {
        return Err(contract(format!("padding must be non-negative, got {padding}")));
    }
    let mut min = coords[0];
    let mut max = coords[0];
    for p in &coords[1..] {
        min = min.inf(p);
        max = max.sup(p);
    }
    let pad = Vec3::repeat(padding);
    Ok(BoundingBox { min: min - pad, max: max + pad })
}

/// Rotation drawn uniformly from SO(3) via a uniformly distributed unit quaternion.
pub fn uniform_random_rotation<R: Rng + ?Sized>(rng: &mut R) -> UnitQuaternion<f64> {
    let u1: f64 = rng.random();
    let u2: f64 = rng.random();
    let u3: f64 = rng.random();
    let tau = std::f64::consts::TAU;
    let (a, b) = ((1.0 - u1).sqrt(), u1.sqrt());
    UnitQuaternion::new_normalize(Quaternion::new(
        b * (tau * u3).cos(),
        a * (tau * u2).sin(),
        a * (tau * u2).cos(),
        b * (tau * u3).sin(),
    ))
}
