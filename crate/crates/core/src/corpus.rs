//! A set of targets (receptor plus ligand in its crystal pose) on disk.
//!
//! Layout: `<dir>/atom_types.json` (optional, defaults to the heavy-atom
//! table) and one subdirectory per target holding `receptor.json` and
//! `ligand.json`. The ligand's reference conformation is its crystal pose.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::grid::GridSpec;
use crate::molecule::{
    bounding_box, parse_ligand, parse_receptor, AtomTypeTable, BoundingBox, Ligand, MoleculeDocument,
    Receptor, Vec3,
};

#[derive(Debug, Clone)]
pub struct Target {
    pub id: String,
    pub receptor: Arc<Receptor>,
    pub ligand: Ligand,
}

impl Target {
    pub fn crystal_coords(&self) -> Vec<Vec3> {
        self.ligand.reference_coords()
    }

    /// Binding-site center: the crystal ligand centroid.
    pub fn site_center(&self) -> Vec3 {
        self.ligand.reference_centroid()
    }

    pub fn crystal_box(&self) -> BoundingBox {
        bounding_box(&self.crystal_coords(), 0.0).expect("ligands have at least one atom")
    }

    pub fn grid_spec(&self, edge_length: f64, resolution: f64, channel_count: usize) -> Result<GridSpec> {
        GridSpec::new(self.site_center(), edge_length, resolution, channel_count)
    }
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub types: AtomTypeTable,
    pub targets: Vec<Target>,
}

pub const ATOM_TYPES_FILE: &str = "atom_types.json";

impl Corpus {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let types_path = dir.join(ATOM_TYPES_FILE);
        let types = if types_path.exists() {
            AtomTypeTable::parse(&fs::read_to_string(&types_path)?)?
        } else {
            AtomTypeTable::default_heavy_atoms()
        };
        let mut ids: Vec<String> = fs::read_dir(dir)?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().is_dir())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .collect();
        ids.sort();
        let mut targets = Vec::with_capacity(ids.len());
        for id in ids {
            let sub = dir.join(&id);
            let with_path = |e: Error, file: &str| Error::Format(format!("{}/{file}: {e}", sub.display()));
            let receptor = parse_receptor(&fs::read_to_string(sub.join("receptor.json"))?, &types)
                .map_err(|e| with_path(e, "receptor.json"))?;
            let ligand = parse_ligand(&fs::read_to_string(sub.join("ligand.json"))?, &types)
                .map_err(|e| with_path(e, "ligand.json"))?;
            targets.push(Target { id, receptor: Arc::new(receptor), ligand });
        }
        Ok(Self { types, targets })
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        fs::write(dir.join(ATOM_TYPES_FILE), self.types.to_json())?;
        for t in &self.targets {
            let sub = dir.join(&t.id);
            fs::create_dir_all(&sub)?;
            fs::write(sub.join("receptor.json"), MoleculeDocument::from_receptor(&t.receptor, &self.types).to_json())?;
            fs::write(sub.join("ligand.json"), MoleculeDocument::from_ligand(&t.ligand, &self.types).to_json())?;
        }
        Ok(())
    }

    pub fn target(&self, id: &str) -> Option<&Target> {
        self.targets.iter().find(|t| t.id == id)
    }

    pub fn radii(&self) -> Vec<f64> {
        self.types.radii()
    }
}
