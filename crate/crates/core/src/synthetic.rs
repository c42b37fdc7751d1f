//! Procedurally generated targets for exercising the pipeline end to end.
//!
//! Each ligand is a short zigzag chain with 1 to 3 rotatable bonds and an
//! optional side atom. The receptor is a shell of atoms lining a pocket
//! around the crystal pose, with polar receptor atoms placed next to polar
//! ligand atoms so the crystal pose is distinguishable from random ones.

use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

use crate::corpus::{Corpus, Target};
use crate::error::{Error, Result};
use crate::molecule::{bounding_box, Atom, AtomType, AtomTypeTable, Ligand, Receptor, RotatableBond, Vec3};
use crate::sampling::{make_record, perturb_pose, sample_random_pose, target_rng, LabelThresholds, PoseRecord};

const BOND_LENGTH: f64 = 1.5;
const BOND_ANGLE_DEG: f64 = 111.0;
const MIN_NONBONDED: f64 = 2.6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticOptions {
    pub targets: usize,
    pub min_ligand_atoms: usize,
    pub max_ligand_atoms: usize,
    pub max_torsions: usize,
    pub receptor_atoms: usize,
    pub seed: u64,
}

impl Default for SyntheticOptions {
    fn default() -> Self {
        Self { targets: 10, min_ligand_atoms: 6, max_ligand_atoms: 9, max_torsions: 3, receptor_atoms: 80, seed: 0 }
    }
}

impl SyntheticOptions {
    pub fn validate(&self) -> Result<()> {
        if self.targets == 0 {
            return Err(Error::Config("targets must be at least 1".into()));
        }
        if self.min_ligand_atoms < 4 || self.min_ligand_atoms > self.max_ligand_atoms {
            return Err(Error::Config("ligand atom counts need 4 <= min <= max".into()));
        }
        if self.max_torsions == 0 {
            return Err(Error::Config("max_torsions must be at least 1".into()));
        }
        Ok(())
    }
}

/// C, N, O, S. Four channels keep synthetic grids cheap.
pub fn synthetic_types() -> AtomTypeTable {
    let entries = [("C", 1.9), ("N", 1.8), ("O", 1.7), ("S", 2.0)]
        .into_iter()
        .map(|(name, vdw_radius)| AtomType { name: name.into(), vdw_radius })
        .collect();
    AtomTypeTable::new(entries).expect("static table is valid")
}

const C: usize = 0;
const N: usize = 1;
const O: usize = 2;
const S: usize = 3;

/// Place a point at `BOND_LENGTH` from `c`, with bond angle b-c-new and dihedral a-b-c-new.
fn place(a: &Vec3, b: &Vec3, c: &Vec3, dihedral: f64) -> Vec3 {
    let theta = BOND_ANGLE_DEG.to_radians();
    let bc = (c - b).normalize();
    let n = (b - a).cross(&bc).normalize();
    let m = n.cross(&bc);
    let d = Vec3::new(-BOND_LENGTH * theta.cos(), BOND_LENGTH * theta.sin() * dihedral.cos(), BOND_LENGTH * theta.sin() * dihedral.sin());
    c + bc * d.x + m * d.y + n * d.z
}

fn clashes(coords: &[Vec3], bonded: impl Fn(usize, usize) -> bool) -> bool {
    (0..coords.len()).any(|i| (0..i).any(|j| !bonded(i, j) && (coords[i] - coords[j]).norm() < MIN_NONBONDED))
}

fn random_type<R: Rng + ?Sized>(rng: &mut R) -> usize {
    match rng.random_range(0..10) {
        0..=5 => C,
        6 => N,
        7 | 8 => O,
        _ => S,
    }
}

fn random_dihedral<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let mag = rng.random_range(60f64.to_radians()..=std::f64::consts::PI);
    if rng.random::<bool>() {
        mag
    } else {
        -mag
    }
}

/// A chain ligand centered near `center`.
pub fn synthetic_ligand<R: Rng + ?Sized>(options: &SyntheticOptions, center: Vec3, rng: &mut R) -> Result<Ligand> {
    let n_chain = rng.random_range(options.min_ligand_atoms..=options.max_ligand_atoms);
    let with_side = n_chain >= 6 && rng.random::<bool>();
    let n_chain = if with_side { n_chain - 1 } else { n_chain };
    for _ in 0..1000 {
        let mut coords = vec![Vec3::zeros(), Vec3::new(BOND_LENGTH, 0.0, 0.0)];
        let theta = BOND_ANGLE_DEG.to_radians();
        coords.push(coords[1] + Vec3::new(-BOND_LENGTH * theta.cos(), BOND_LENGTH * theta.sin(), 0.0));
        while coords.len() < n_chain {
            let k = coords.len();
            let p = place(&coords[k - 3], &coords[k - 2], &coords[k - 1], random_dihedral(rng));
            coords.push(p);
        }
        // side atom hangs off an interior chain atom
        let side_parent = with_side.then(|| rng.random_range(1..n_chain - 1));
        if let Some(p) = side_parent {
            let side = place(&coords[p + 1], &coords[p - 1], &coords[p], random_dihedral(rng));
            coords.push(side);
        }
        let side_index = n_chain;
        // 1-2 and 1-3 neighbors may sit closer than the clash cutoff
        let bonded = |i: usize, j: usize| {
            if i < n_chain && j < n_chain {
                i.abs_diff(j) <= 2
            } else {
                side_parent.is_some_and(|p| i.min(j).abs_diff(p) <= 1)
            }
        };
        if clashes(&coords, bonded) {
            continue;
        }
        let shift = center - coords.iter().sum::<Vec3>() / coords.len() as f64;
        let rot = crate::molecule::uniform_random_rotation(rng);
        let atoms: Vec<Atom> = coords
            .iter()
            .map(|c| Atom { position: center + rot * (c + shift - center), type_index: random_type(rng) })
            .collect();

        // rotatable bonds (k, k+1) move every chain atom past k+1 and the
        // side atom when it hangs at or past k+1
        let candidates = n_chain - 2;
        let count = rng.random_range(1..=options.max_torsions.min(candidates));
        let mut ks = sample(rng, candidates, count).into_vec();
        ks.sort_unstable();
        let bonds = ks
            .into_iter()
            .map(|k| {
                let mut downstream: Vec<usize> = (k + 2..n_chain).collect();
                if side_parent.is_some_and(|p| p > k) {
                    downstream.push(side_index);
                }
                RotatableBond { axis_from: k, axis_to: k + 1, downstream }
            })
            .collect();
        return Ligand::new(atoms, 0, bonds);
    }
    Err(Error::Structure("could not build a clash-free synthetic ligand".into()))
}

/// Shell of receptor atoms 3.3 to 5 Å from the ligand, at least 2.8 Å apart.
pub fn synthetic_receptor<R: Rng + ?Sized>(ligand: &Ligand, count: usize, rng: &mut R) -> Result<Receptor> {
    let lig = ligand.reference_coords();
    let types = ligand.types();
    let bb = bounding_box(&lig, 5.0)?;
    let mut atoms: Vec<Atom> = Vec::with_capacity(count);
    let mut tries = 0;
    while atoms.len() < count && tries < 200 * count.max(1) {
        tries += 1;
        let p = Vec3::from_fn(|k, _| rng.random_range(bb.min[k]..=bb.max[k]));
        let (nearest, dist) = lig
            .iter()
            .enumerate()
            .map(|(i, a)| (i, (a - p).norm()))
            .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best });
        if !(3.3..=5.0).contains(&dist) || atoms.iter().any(|a| (a.position - p).norm() < 2.8) {
            continue;
        }
        let polar = matches!(types[nearest], N | O);
        let type_index = match (polar, rng.random_range(0..10)) {
            (true, 0..=7) => {
                if types[nearest] == O {
                    N
                } else {
                    O
                }
            }
            (true, _) => C,
            (false, 0..=7) => C,
            (false, 8) => S,
            (false, _) => N,
        };
        atoms.push(Atom { position: p, type_index });
    }
    Receptor::new(atoms)
}

pub fn synthetic_target<R: Rng + ?Sized>(id: String, options: &SyntheticOptions, rng: &mut R) -> Result<Target> {
    let center = Vec3::from_fn(|_, _| rng.random_range(-10.0..10.0));
    let ligand = synthetic_ligand(options, center, rng)?;
    let receptor = synthetic_receptor(&ligand, options.receptor_atoms, rng)?;
    Ok(Target { id, receptor: Arc::new(receptor), ligand })
}

/// Targets `syn000`, `syn001`, ... each drawn from its own random stream.
pub fn synthetic_corpus(options: &SyntheticOptions) -> Result<Corpus> {
    options.validate()?;
    let targets = (0..options.targets)
        .map(|i| {
            let mut rng: ChaCha8Rng = target_rng(options.seed, i);
            synthetic_target(format!("syn{i:03}"), options, &mut rng)
        })
        .collect::<Result<_>>()?;
    Ok(Corpus { types: synthetic_types(), targets })
}

/// Labeled training poses per target: `near` small perturbations of the
/// crystal pose (mostly binding) followed by `far` uniformly random poses
/// (mostly non-binding).
pub fn synthetic_training_set(
    corpus: &Corpus,
    near: usize,
    far: usize,
    seed: u64,
    thresholds: &LabelThresholds,
) -> Result<Vec<PoseRecord>> {
    let mut out = Vec::with_capacity(corpus.targets.len() * (near + far));
    for (ti, target) in corpus.targets.iter().enumerate() {
        let mut rng = target_rng(seed, ti);
        let crystal = target.crystal_coords();
        let zero = target.ligand.zero_dof();
        for i in 0..near {
            let dof = perturb_pose(&zero, 1.0, 20f64.to_radians(), 20f64.to_radians(), &mut rng);
            out.push(make_record(target, i, dof, thresholds, Some("near-crystal"))?);
        }
        for i in 0..far {
            let dof = sample_random_pose(&target.ligand, &crystal, &mut rng)?;
            out.push(make_record(target, near + i, dof, thresholds, Some("random"))?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpus_is_reproducible_and_valid() {
        let opts = SyntheticOptions { targets: 4, ..Default::default() };
        let a = synthetic_corpus(&opts).unwrap();
        let b = synthetic_corpus(&opts).unwrap();
        for (x, y) in a.targets.iter().zip(&b.targets) {
            assert_eq!(x.ligand, y.ligand);
            assert_eq!(x.receptor, y.receptor);
            let t = x.ligand.torsion_count();
            assert!((1..=3).contains(&t), "{t} torsions");
            assert!(x.receptor.atoms().len() >= 20);
        }
    }

    #[test]
    fn training_set_has_both_classes() {
        let corpus = synthetic_corpus(&SyntheticOptions { targets: 3, ..Default::default() }).unwrap();
        let set = synthetic_training_set(&corpus, 10, 10, 1, &LabelThresholds::default()).unwrap();
        assert_eq!(set.len(), 60);
        let binding = set.iter().filter(|r| r.label == crate::sampling::PoseLabel::Binding).count();
        let nonbinding = set.iter().filter(|r| r.label == crate::sampling::PoseLabel::NonBinding).count();
        assert!(binding >= 20 && nonbinding >= 10, "{binding} / {nonbinding}");
    }
}
