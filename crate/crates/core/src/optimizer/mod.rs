//! Local pose optimization: per-atom score gradients are folded into
//! translational, rotational and torsional components and handed to BFGS.

mod bfgs;

pub use bfgs::{bfgs_maximize, BfgsOptions, BfgsOutcome, Termination};

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::grid::{grid_backward, rasterize, GridSpec};
use crate::molecule::{rmsd, ConformationDof, Ligand, Receptor, Vec3};
use crate::network::{NetworkModel, OutputMode, BINDING_CLASS};

/// Gradient of a pose score in DOF space.
#[derive(Debug, Clone, PartialEq)]
pub struct DofGradient {
    pub translation: Vec3,
    /// Partial derivatives with respect to the rotation-vector components.
    /// At zero rotation this equals the torque about the rotation pivot.
    pub rotation: Vec3,
    pub torsions: Vec<f64>,
}

impl DofGradient {
    /// Same flat layout as [`ConformationDof::to_vec`].
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(6 + self.torsions.len());
        v.extend(self.translation.iter());
        v.extend(self.rotation.iter());
        v.extend(&self.torsions);
        v
    }
}

fn skew(v: &Vec3) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Left Jacobian of the SO(3) exponential at rotation vector `w`:
/// `exp(w + dw) ~ exp(J(w) dw) exp(w)`.
pub fn so3_left_jacobian(w: &Vec3) -> Matrix3<f64> {
    let theta2 = w.norm_squared();
    let theta = theta2.sqrt();
    let (a, b) = if theta < 1e-4 {
        (0.5 - theta2 / 24.0, 1.0 / 6.0 - theta2 / 120.0)
    } else {
        ((1.0 - theta.cos()) / theta2, (theta - theta.sin()) / (theta2 * theta))
    };
    let k = skew(w);
    Matrix3::identity() + k * a + k * k * b
}

/// Sum of `(a_i - pivot) x F_i`.
pub fn torque(coords: &[Vec3], forces: &[Vec3], pivot: &Vec3) -> Vec3 {
    coords.iter().zip(forces).map(|(a, f)| (a - pivot).cross(f)).sum()
}

/// Fold per-atom gradients of a score at the pose `dof` into DOF space.
///
/// The rotation pivot is the reference centroid carried along by the
/// translation, i.e. the centroid of the rigidly moved reference.
pub fn assemble_dof_gradient(atom_grads: &[Vec3], ligand: &Ligand, dof: &ConformationDof) -> Result<DofGradient> {
    if atom_grads.len() != ligand.len() {
        return Err(contract(format!(
            "{} atom gradients for a {}-atom ligand",
            atom_grads.len(),
            ligand.len()
        )));
    }
    let posed = ligand.apply_dof(dof)?;
    let translation: Vec3 = atom_grads.iter().sum();
    let pivot = ligand.reference_centroid() + dof.translation;
    let tau = torque(&posed, atom_grads, &pivot);
    let rotation = so3_left_jacobian(&dof.rotation).transpose() * tau;
    let torsions = ligand
        .rotatable_bonds()
        .iter()
        .map(|bond| {
            let origin = posed[bond.axis_from];
            let axis = (posed[bond.axis_to] - origin).normalize();
            bond.downstream
                .iter()
                .map(|&i| axis.dot(&(posed[i] - origin).cross(&atom_grads[i])))
                .sum()
        })
        .collect();
    Ok(DofGradient { translation, rotation, torsions })
}

/// A differentiable score of realized ligand coordinates (higher is better).
pub trait PoseScorer: Sync {
    fn score_and_gradients(&self, coords: &[Vec3]) -> Result<(f64, Vec<Vec3>)>;

    fn score(&self, coords: &[Vec3]) -> Result<f64> {
        Ok(self.score_and_gradients(coords)?.0)
    }

    /// Grid the score is evaluated on, if any; used to record grid exits.
    fn grid(&self) -> Option<&GridSpec> {
        None
    }
}

/// Binding-class output of a network for a ligand against a fixed receptor.
pub struct CnnScorer<'a> {
    pub model: &'a NetworkModel,
    pub receptor: &'a Receptor,
    pub ligand_types: Vec<usize>,
    pub radii: &'a [f64],
    pub grid: GridSpec,
    pub mode: OutputMode,
}

impl PoseScorer for CnnScorer<'_> {
    fn score_and_gradients(&self, coords: &[Vec3]) -> Result<(f64, Vec<Vec3>)> {
        let grid = rasterize(self.receptor, coords, &self.ligand_types, self.radii, &self.grid)?;
        let (value, upstream) = self.model.class_output_gradient(&grid, BINDING_CLASS, self.mode)?;
        let grads = grid_backward(&upstream, coords, &self.ligand_types, self.radii, &self.grid)?;
        Ok((value, grads))
    }

    fn grid(&self) -> Option<&GridSpec> {
        Some(&self.grid)
    }
}

/// `-sum |a_i - crystal_i|^2`, maximal at the crystal pose.
pub struct CrystalDistanceScore {
    pub crystal: Vec<Vec3>,
}

impl PoseScorer for CrystalDistanceScore {
    fn score_and_gradients(&self, coords: &[Vec3]) -> Result<(f64, Vec<Vec3>)> {
        if coords.len() != self.crystal.len() {
            return Err(contract("coordinate count differs from the crystal pose"));
        }
        let mut value = 0.0;
        let grads = coords
            .iter()
            .zip(&self.crystal)
            .map(|(a, c)| {
                let d = a - c;
                value -= d.norm_squared();
                d * -2.0
            })
            .collect();
        Ok((value, grads))
    }
}

/// Score as a function of the flat DOF vector, with its gradient.
pub fn dof_score_and_gradient<S: PoseScorer + ?Sized>(scorer: &S, ligand: &Ligand, dof: &ConformationDof) -> Result<(f64, DofGradient)> {
    let coords = ligand.apply_dof(dof)?;
    let (value, atom_grads) = scorer.score_and_gradients(&coords)?;
    Ok((value, assemble_dof_gradient(&atom_grads, ligand, dof)?))
}

/// Diagonal rescaling of the optimization variables (1 Å per unit,
/// radians per unit). All ones leaves the mixed-unit space untouched.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DofScaling {
    pub translation: f64,
    pub rotation: f64,
    pub torsion: f64,
}

impl Default for DofScaling {
    fn default() -> Self {
        Self { translation: 1.0, rotation: 1.0, torsion: 1.0 }
    }
}

impl DofScaling {
    fn factors(&self, n: usize) -> Vec<f64> {
        (0..n)
            .map(|i| match i {
                0..=2 => self.translation,
                3..=5 => self.rotation,
                _ => self.torsion,
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoseOptions {
    pub bfgs: BfgsOptions,
    pub scaling: DofScaling,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizationResult {
    pub initial_dof: ConformationDof,
    pub final_dof: ConformationDof,
    pub initial_score: f64,
    pub final_score: f64,
    pub initial_rmsd: f64,
    pub final_rmsd: f64,
    pub delta_rmsd: f64,
    pub steps: usize,
    pub termination: Termination,
    /// Accepted iterates whose ligand centroid lay outside the scoring grid.
    pub grid_exits: usize,
    /// Score at every accepted iterate, starting with the initial pose.
    #[serde(skip)]
    pub scores: Vec<f64>,
}

/// Locally maximize `scorer` over the ligand's degrees of freedom from `start`.
pub fn optimize_pose<S: PoseScorer + ?Sized>(
    scorer: &S,
    ligand: &Ligand,
    crystal_coords: &[Vec3],
    start: &ConformationDof,
    opts: &PoseOptions,
) -> Result<OptimizationResult> {
    start.check_for(ligand)?;
    if crystal_coords.len() != ligand.len() {
        return Err(contract(format!(
            "crystal pose has {} atoms, ligand has {}",
            crystal_coords.len(),
            ligand.len()
        )));
    }
    let scale = opts.scaling.factors(start.len());
    let to_dof = |y: &[f64]| -> Result<ConformationDof> {
        let x: Vec<f64> = y.iter().zip(&scale).map(|(v, s)| v * s).collect();
        ConformationDof::from_slice(&x)
    };
    let y0: Vec<f64> = start.to_vec().iter().zip(&scale).map(|(v, s)| v / s).collect();

    let outcome = bfgs_maximize(
        |y| {
            let dof = to_dof(y)?;
            let (value, grad) = dof_score_and_gradient(scorer, ligand, &dof)?;
            let g = grad.to_vec().iter().zip(&scale).map(|(g, s)| g * s).collect();
            Ok((value, g))
        },
        &y0,
        &opts.bfgs,
    )?;

    let final_dof = to_dof(&outcome.x)?;
    let initial_rmsd = rmsd(&ligand.apply_dof(start)?, crystal_coords)?;
    let final_rmsd = rmsd(&ligand.apply_dof(&final_dof)?, crystal_coords)?;
    let grid_exits = match scorer.grid() {
        Some(spec) => {
            let mut exits = 0;
            for y in &outcome.path {
                let coords = ligand.apply_dof(&to_dof(y)?)?;
                let c = coords.iter().sum::<Vec3>() / coords.len() as f64;
                exits += usize::from(!spec.contains(&c));
            }
            exits
        }
        None => 0,
    };
    Ok(OptimizationResult {
        initial_dof: start.clone(),
        final_dof,
        initial_score: outcome.initial_value,
        final_score: outcome.value,
        initial_rmsd,
        final_rmsd,
        delta_rmsd: final_rmsd - initial_rmsd,
        steps: outcome.iterations,
        termination: outcome.termination,
        grid_exits,
        scores: outcome.values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::molecule::{Atom, RotatableBond};

    fn ligand() -> Ligand {
        let pts = [
            Vec3::new(0.0, 0.0, 0.0),
            Vec3::new(1.4, 0.1, 0.0),
            Vec3::new(2.0, 1.3, 0.2),
            Vec3::new(3.4, 1.4, -0.1),
            Vec3::new(4.0, 2.6, 0.3),
        ];
        let atoms = pts.iter().map(|&position| Atom { position, type_index: 0 }).collect();
        Ligand::new(
            atoms,
            0,
            vec![
                RotatableBond { axis_from: 1, axis_to: 2, downstream: vec![3, 4] },
                RotatableBond { axis_from: 2, axis_to: 3, downstream: vec![4] },
            ],
        )
        .unwrap()
    }

    #[test]
    fn uniform_force_on_rigid_pose() {
        let lig = ligand();
        let mut dof = lig.zero_dof();
        dof.translation = Vec3::new(0.3, -1.0, 2.0);
        dof.rotation = Vec3::new(0.2, 0.4, -0.1);
        let f = Vec3::new(0.5, -0.25, 1.0);
        let g = assemble_dof_gradient(&vec![f; lig.len()], &lig, &dof).unwrap();
        assert!((g.translation - f * 5.0).norm() < 1e-12);
        assert!(g.rotation.norm() < 1e-12);
    }

    #[test]
    fn only_downstream_atoms_drive_torsions() {
        let lig = ligand();
        let dof = lig.zero_dof();
        let mut forces = vec![Vec3::zeros(); lig.len()];
        forces[0] = Vec3::new(1.0, 2.0, 3.0);
        forces[1] = Vec3::new(-1.0, 0.5, 2.0);
        forces[2] = Vec3::new(0.0, 0.0, 7.0);
        let g = assemble_dof_gradient(&forces, &lig, &dof).unwrap();
        assert_eq!(g.torsions, vec![0.0, 0.0]);
        forces[3] = Vec3::new(0.0, 0.0, 1.0);
        let g = assemble_dof_gradient(&forces, &lig, &dof).unwrap();
        assert_ne!(g.torsions[0], 0.0);
        assert_eq!(g.torsions[1], 0.0);
    }

    #[test]
    fn jacobian_is_identity_at_zero() {
        assert_eq!(so3_left_jacobian(&Vec3::zeros()), Matrix3::identity());
    }

    #[test]
    fn gradient_dimension_mismatch() {
        let lig = ligand();
        assert!(assemble_dof_gradient(&[Vec3::zeros()], &lig, &lig.zero_dof()).is_err());
    }
}
