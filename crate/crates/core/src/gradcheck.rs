//! Central finite-difference checks of every analytic gradient in the
//! scoring chain, for runtime self-tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::grid::{atom_density, atom_density_deriv, grid_backward, rasterize, AtomGrid, GridSpec};
use crate::molecule::{Atom, ConformationDof, Receptor, Vec3};
use crate::network::{
    class_output, cross_entropy, Architecture, BinaryLabel, ForwardPass, NetworkModel, OutputMode, BINDING_CLASS,
};
use crate::optimizer::{dof_score_and_gradient, CnnScorer};
use crate::synthetic::{synthetic_ligand, SyntheticOptions};

/// `|a - n| / max(|a|, |n|, floor)`: relative, except near zero.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteReport {
    pub name: String,
    pub cases: usize,
    pub checks: usize,
    pub max_relative_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Debug)]
struct Tally {
    checks: usize,
    worst: f64,
}

impl Tally {
    fn new() -> Self {
        Self { checks: 0, worst: 0.0 }
    }

    fn add(&mut self, analytic: f64, numeric: f64, floor: f64) {
        self.checks += 1;
        let e = relative_error(analytic, numeric, floor);
        // NaN must fail the suite
        if e.is_nan() || e > self.worst {
            self.worst = if e.is_nan() { f64::INFINITY } else { e };
        }
    }

    fn report(self, name: &str, cases: usize, tolerance: f64) -> SuiteReport {
        SuiteReport {
            name: name.into(),
            cases,
            checks: self.checks,
            max_relative_error: self.worst,
            tolerance,
            passed: self.checks > 0 && self.worst < tolerance,
        }
    }
}

fn central<F: FnMut(f64) -> Result<f64>>(x: f64, h: f64, mut f: F) -> Result<f64> {
    Ok((f(x + h)? - f(x - h)?) / (2.0 * h))
}

/// Central difference through a network. The step shrinks, down to
/// `h / 1000`, until both ends of the stencil lie on the same linear piece
/// as `x`, so a ReLU or pooling switch never poses as a gradient error.
fn central_on_piece<F>(model: &NetworkModel, x: f64, h: f64, mut f: F) -> Result<f64>
where
    F: FnMut(f64) -> Result<(f64, ForwardPass)>,
{
    let (_, at_x) = f(x)?;
    let mut step = h;
    loop {
        let (lo, lo_pass) = f(x - step)?;
        let (hi, hi_pass) = f(x + step)?;
        let smooth = model.same_piece(&at_x, &lo_pass) && model.same_piece(&at_x, &hi_pass);
        if smooth || step <= h / 1000.0 {
            return Ok((hi - lo) / (2.0 * step));
        }
        step /= 10.0;
    }
}

fn random_point<R: Rng>(rng: &mut R, half: f64) -> Vec3 {
    Vec3::from_fn(|_, _| rng.random_range(-half..half))
}

/// Kernel derivative against differences of the kernel value, away from the
/// branch points where the second derivative jumps.
pub fn check_kernel(cases: usize, seed: u64) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tally = Tally::new();
    let h = 1e-6;
    for _ in 0..cases {
        let r: f64 = rng.random_range(1.0..2.5);
        let d = loop {
            let d = rng.random_range(0.0..1.6 * r);
            if (d - r).abs() > 1e-3 && (d - 1.5 * r).abs() > 1e-3 && d > 1e-3 {
                break d;
            }
        };
        let numeric = central(d, h, |x| atom_density(x, r))?;
        tally.add(atom_density_deriv(d, r)?, numeric, 1e-6);
    }
    Ok(tally.report("kernel", cases, 1e-6))
}

/// Random grid fixture: 1 to 5 ligand atoms near the center of a 2-channel
/// 8-point lattice, plus a few receptor atoms.
fn grid_fixture<R: Rng>(rng: &mut R) -> Result<(Receptor, Vec<Vec3>, Vec<usize>, GridSpec)> {
    let spec = GridSpec::new(Vec3::zeros(), 3.5, 0.5, 2)?;
    let n = rng.random_range(1..=5);
    let coords: Vec<Vec3> = (0..n).map(|_| random_point(rng, 1.5)).collect();
    let types = (0..n).map(|_| rng.random_range(0..2)).collect();
    let receptor = Receptor::new(
        (0..3)
            .map(|_| Atom { position: random_point(rng, 2.5), type_index: rng.random_range(0..2) })
            .collect(),
    )?;
    Ok((receptor, coords, types, spec))
}

/// `grid_backward` against differences of `sum(upstream * grid)`.
pub fn check_grid(cases: usize, seed: u64) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let radii = [1.6, 1.9];
    let mut tally = Tally::new();
    let h = 1e-5;
    for _ in 0..cases {
        let (receptor, coords, types, spec) = grid_fixture(&mut rng)?;
        let upstream: Vec<f64> = (0..spec.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let loss = |c: &[Vec3]| -> Result<f64> {
            let g = rasterize(&receptor, c, &types, &radii, &spec)?;
            Ok(g.values().iter().zip(&upstream).map(|(a, b)| a * b).sum())
        };
        let analytic = grid_backward(&upstream, &coords, &types, &radii, &spec)?;
        for (i, grad) in analytic.iter().enumerate() {
            for k in 0..3 {
                let numeric = central(coords[i][k], h, |x| {
                    let mut c = coords.clone();
                    c[i][k] = x;
                    loss(&c)
                })?;
                tally.add(grad[k], numeric, 1e-6);
            }
        }
    }
    Ok(tally.report("grid", cases, 1e-5))
}

/// A tiny randomly initialized model with nonzero biases, so no unit sits
/// exactly on a ReLU kink.
pub fn tiny_model<R: Rng>(spec: GridSpec, modules: usize, rng: &mut R) -> Result<NetworkModel> {
    let filters = (0..modules).map(|_| rng.random_range(2..=3)).collect();
    let mut model = NetworkModel::new(&Architecture { filters }, spec, rng.random())?;
    for layer in model.layers_mut() {
        if let Some((_, b)) = layer.params_mut() {
            for v in b.iter_mut() {
                *v = rng.random_range(0.05..0.3) * if rng.random::<bool>() { 1.0 } else { -1.0 };
            }
        }
    }
    Ok(model)
}

/// Every weight and input gradient of the cross-entropy loss, on tiny
/// models with 4- to 8-point dense random inputs.
pub fn check_network(cases: usize, seed: u64) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tally = Tally::new();
    let h = 1e-5;
    for case in 0..cases {
        let side = rng.random_range(4..=8usize);
        let spec = GridSpec::new(Vec3::zeros(), (side - 1) as f64 * 0.5, 0.5, 2)?;
        let modules = if side >= 8 { 2 } else { 1 };
        let mut model = tiny_model(spec, modules, &mut rng)?;
        let values: Vec<f64> = (0..spec.len()).map(|_| rng.random_range(0.0..1.0)).collect();
        let grid = AtomGrid::from_values(spec, values.clone())?;
        let label = if case % 2 == 0 { BinaryLabel::Binding } else { BinaryLabel::NonBinding };
        let (_, _, grads) = model.loss_and_gradients(&grid, label)?;
        // same layer kinds, so it judges pieces for the perturbed copies too
        let layout = model.clone();

        for (li, lg) in grads.layers.iter().enumerate() {
            for (pi, &g) in lg.iter().enumerate() {
                let numeric = central_on_piece(&layout, 0.0, h, |delta| {
                    let saved = perturb_param(&mut model, li, pi, delta);
                    let out = model.loss_and_gradients(&grid, label).map(|r| (r.0, r.1));
                    restore_param(&mut model, li, pi, saved);
                    out
                })?;
                tally.add(g, numeric, 1e-6);
            }
        }
        for (i, &g) in grads.input.iter().enumerate() {
            let numeric = central_on_piece(&layout, values[i], h, |x| {
                let mut v = values.clone();
                v[i] = x;
                let pass = model.forward(&AtomGrid::from_values(spec, v)?)?;
                Ok((cross_entropy(&pass, label).0, pass))
            })?;
            tally.add(g, numeric, 1e-6);
        }
    }
    Ok(tally.report("network", cases, 1e-5))
}

fn param_slot(model: &mut NetworkModel, layer: usize, index: usize) -> &mut f64 {
    let (w, b) = model.layers_mut()[layer].params_mut().expect("gradient implies parameters");
    if index < w.len() {
        &mut w[index]
    } else {
        &mut b[index - w.len()]
    }
}

fn perturb_param(model: &mut NetworkModel, layer: usize, index: usize, delta: f64) -> f64 {
    let slot = param_slot(model, layer, index);
    let saved = *slot;
    *slot += delta;
    saved
}

fn restore_param(model: &mut NetworkModel, layer: usize, index: usize, saved: f64) {
    *param_slot(model, layer, index) = saved;
}

/// Pose gradients through apply_dof, rasterization and a tiny network, on
/// chain ligands with up to 5 torsions, in both output modes.
pub fn check_dof(cases: usize, seed: u64) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tally = Tally::new();
    let h = 1e-6;
    let radii = [1.9, 1.8, 1.7, 2.0];
    let opts = SyntheticOptions { min_ligand_atoms: 7, max_ligand_atoms: 9, max_torsions: 5, ..Default::default() };
    for case in 0..cases {
        let ligand = synthetic_ligand(&opts, Vec3::zeros(), &mut rng)?;
        let receptor = Receptor::new(
            (0..12)
                .map(|_| Atom { position: random_point(&mut rng, 5.0), type_index: rng.random_range(0..4) })
                .collect(),
        )?;
        let spec = GridSpec::new(Vec3::zeros(), 7.5, 0.5, 4)?;
        let model = tiny_model(spec, 2, &mut rng)?;
        let scorer = CnnScorer {
            model: &model,
            receptor: &receptor,
            ligand_types: ligand.types(),
            radii: &radii,
            grid: spec,
            mode: if case % 2 == 0 { OutputMode::Probability } else { OutputMode::Logit },
        };
        let mut dof = ligand.zero_dof();
        dof.translation = random_point(&mut rng, 0.5);
        dof.rotation = random_point(&mut rng, 1.0);
        for t in dof.torsions.iter_mut() {
            *t = rng.random_range(-1.0..1.0);
        }
        let (_, grad) = dof_score_and_gradient(&scorer, &ligand, &dof)?;
        let x = dof.to_vec();
        for (i, g) in grad.to_vec().into_iter().enumerate() {
            let numeric = central_on_piece(&model, x[i], h, |v| {
                let mut y = x.clone();
                y[i] = v;
                let coords = ligand.apply_dof(&ConformationDof::from_slice(&y)?)?;
                let grid = rasterize(&receptor, &coords, &scorer.ligand_types, &radii, &spec)?;
                let pass = model.forward(&grid)?;
                Ok((class_output(&pass, BINDING_CLASS, scorer.mode).0, pass))
            })?;
            tally.add(g, numeric, 1e-6);
        }
    }
    Ok(tally.report("dof", cases, 1e-4))
}

/// All suites at their default sizes.
pub fn run_all(seed: u64) -> Result<Vec<SuiteReport>> {
    Ok(vec![
        check_kernel(1000, seed)?,
        check_grid(100, seed)?,
        check_network(20, seed)?,
        check_dof(10, seed)?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_uses_floor_near_zero() {
        assert_eq!(relative_error(1.0, 1.0, 1e-6), 0.0);
        assert!((relative_error(2.0, 1.0, 1e-6) - 0.5).abs() < 1e-15);
        assert!((relative_error(1e-9, 0.0, 1e-6) - 1e-3).abs() < 1e-15);
    }

    #[test]
    fn small_suites_pass() {
        for r in [check_kernel(50, 1).unwrap(), check_grid(3, 1).unwrap(), check_dof(1, 1).unwrap()] {
            assert!(r.passed, "{r:?}");
        }
    }
}
