//! JSON documents for molecules and atom-type tables.

use serde::{Deserialize, Serialize};

use super::{Atom, AtomType, AtomTypeTable, Ligand, Receptor, RotatableBond, Vec3};
use crate::error::{Error, Result};

pub const MOLECULE_FORMAT_VERSION: u32 = 1;
pub const ATOM_TYPE_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AtomRecord {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    #[serde(rename = "type")]
    pub type_name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BondRecord {
    pub axis: [usize; 2],
    pub downstream: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MoleculeDocument {
    pub format_version: u32,
    pub atoms: Vec<AtomRecord>,
    #[serde(default)]
    pub root_atom: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub rotatable_bonds: Vec<BondRecord>,
}

impl MoleculeDocument {
    pub fn parse(text: &str) -> Result<Self> {
        let doc: Self = serde_json::from_str(text)?;
        if doc.format_version != MOLECULE_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported molecule format_version {} (expected {MOLECULE_FORMAT_VERSION})",
                doc.format_version
            )));
        }
        Ok(doc)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("molecule documents always serialize")
    }

    fn typed_atoms(&self, table: &AtomTypeTable) -> Result<Vec<Atom>> {
        self.atoms
            .iter()
            .map(|a| {
                Ok(Atom {
                    position: Vec3::new(a.x, a.y, a.z),
                    type_index: table.index_of(&a.type_name)?,
                })
            })
            .collect()
    }

    pub fn into_ligand(self, table: &AtomTypeTable) -> Result<Ligand> {
        let atoms = self.typed_atoms(table)?;
        let bonds = self
            .rotatable_bonds
            .into_iter()
            .map(|b| RotatableBond { axis_from: b.axis[0], axis_to: b.axis[1], downstream: b.downstream })
            .collect();
        Ligand::new(atoms, self.root_atom, bonds)
    }

    pub fn into_receptor(self, table: &AtomTypeTable) -> Result<Receptor> {
        if !self.rotatable_bonds.is_empty() {
            return Err(Error::Structure("receptors cannot carry rotatable bonds".into()));
        }
        Receptor::new(self.typed_atoms(table)?)
    }

    pub fn from_ligand(ligand: &Ligand, table: &AtomTypeTable) -> Self {
        Self {
            format_version: MOLECULE_FORMAT_VERSION,
            atoms: atom_records(ligand.atoms(), table),
            root_atom: ligand.root_atom(),
            rotatable_bonds: ligand
                .rotatable_bonds()
                .iter()
                .map(|b| BondRecord { axis: [b.axis_from, b.axis_to], downstream: b.downstream.clone() })
                .collect(),
        }
    }

    pub fn from_receptor(receptor: &Receptor, table: &AtomTypeTable) -> Self {
        Self {
            format_version: MOLECULE_FORMAT_VERSION,
            atoms: atom_records(receptor.atoms(), table),
            root_atom: 0,
            rotatable_bonds: Vec::new(),
        }
    }
}

fn atom_records(atoms: &[Atom], table: &AtomTypeTable) -> Vec<AtomRecord> {
    atoms
        .iter()
        .map(|a| AtomRecord {
            x: a.position.x,
            y: a.position.y,
            z: a.position.z,
            type_name: table.get(a.type_index).map(|t| t.name.clone()).unwrap_or_default(),
        })
        .collect()
}

pub fn parse_ligand(text: &str, table: &AtomTypeTable) -> Result<Ligand> {
    MoleculeDocument::parse(text)?.into_ligand(table)
}

pub fn parse_receptor(text: &str, table: &AtomTypeTable) -> Result<Receptor> {
    MoleculeDocument::parse(text)?.into_receptor(table)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AtomTypeRecord {
    pub name: String,
    pub vdw_radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AtomTypeDocument {
    pub format_version: u32,
    pub types: Vec<AtomTypeRecord>,
}

impl AtomTypeTable {
    pub fn parse(text: &str) -> Result<Self> {
        let doc: AtomTypeDocument = serde_json::from_str(text)?;
        if doc.format_version != ATOM_TYPE_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported atom type format_version {} (expected {ATOM_TYPE_FORMAT_VERSION})",
                doc.format_version
            )));
        }
        Self::new(
            doc.types
                .into_iter()
                .map(|t| AtomType { name: t.name, vdw_radius: t.vdw_radius })
                .collect(),
        )
    }

    pub fn to_json(&self) -> String {
        let doc = AtomTypeDocument {
            format_version: ATOM_TYPE_FORMAT_VERSION,
            types: self
                .entries()
                .iter()
                .map(|t| AtomTypeRecord { name: t.name.clone(), vdw_radius: t.vdw_radius })
                .collect(),
        };
        serde_json::to_string_pretty(&doc).expect("atom type documents always serialize")
    }
}
