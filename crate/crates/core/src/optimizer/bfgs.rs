//! Dense BFGS maximizer with a backtracking line search.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BfgsOptions {
    /// Stop once an accepted step raises the objective by less than this.
    pub improvement_tolerance: f64,
    pub max_iterations: usize,
    pub backtrack_factor: f64,
    /// Armijo coefficient for the sufficient-increase test.
    pub sufficient_increase: f64,
    pub max_backtracks: usize,
    /// Longest trial step while the inverse Hessian is the identity.
    pub max_initial_step: f64,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        Self {
            improvement_tolerance: 1e-5,
            max_iterations: 100,
            backtrack_factor: 0.5,
            sufficient_increase: 1e-4,
            max_backtracks: 20,
            max_initial_step: 1.0,
        }
    }
}

impl BfgsOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.improvement_tolerance > 0.0) {
            return Err(Error::Config("improvement_tolerance must be positive".into()));
        }
        if self.max_iterations == 0 {
            return Err(Error::Config("max_iterations must be at least 1".into()));
        }
        if !(self.backtrack_factor > 0.0 && self.backtrack_factor < 1.0) {
            return Err(Error::Config("backtrack_factor must lie in (0, 1)".into()));
        }
        if !(self.sufficient_increase > 0.0 && self.sufficient_increase < 1.0) {
            return Err(Error::Config("sufficient_increase must lie in (0, 1)".into()));
        }
        if !(self.max_initial_step > 0.0) {
            return Err(Error::Config("max_initial_step must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Termination {
    ImprovementBelowTolerance,
    LineSearchFailed,
    MaxIterations,
    NonFinite,
}

impl std::fmt::Display for Termination {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Termination::ImprovementBelowTolerance => "improvement below tolerance",
            Termination::LineSearchFailed => "line search failed",
            Termination::MaxIterations => "max iterations",
            Termination::NonFinite => "non-finite value",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BfgsOutcome {
    pub x: Vec<f64>,
    pub value: f64,
    pub initial_value: f64,
    /// Accepted steps.
    pub iterations: usize,
    pub termination: Termination,
    /// Every accepted iterate, starting with the initial point.
    pub path: Vec<Vec<f64>>,
    /// Objective at each entry of `path`.
    pub values: Vec<f64>,
}

/// Consecutive failed curvature checks before the inverse Hessian is reset.
const CURVATURE_RESETS: usize = 3;

/// Maximize `objective`, which returns the value and gradient at a point.
pub fn bfgs_maximize<F>(mut objective: F, start: &[f64], opts: &BfgsOptions) -> Result<BfgsOutcome>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    opts.validate()?;
    let n = start.len();
    let (f0, g0) = objective(start)?;
    if g0.len() != n {
        return Err(Error::Contract(format!("gradient has {} entries for {n} variables", g0.len())));
    }
    if !f0.is_finite() || !g0.iter().all(|v| v.is_finite()) {
        return Err(Error::Input("objective or gradient is not finite at the start point".into()));
    }

    // Work on the minimization of -f.
    let mut x = DVector::from_column_slice(start);
    let mut fx = f0;
    let mut g = -DVector::from_vec(g0);
    let mut h = DMatrix::<f64>::identity(n, n);
    let mut h_is_identity = true;
    let mut curvature_failures = 0;
    let mut out = BfgsOutcome {
        x: start.to_vec(),
        value: f0,
        initial_value: f0,
        iterations: 0,
        termination: Termination::MaxIterations,
        path: vec![start.to_vec()],
        values: vec![f0],
    };

    for _ in 0..opts.max_iterations {
        let mut p = -(&h * &g);
        let mut slope = g.dot(&p);
        if slope > 0.0 {
            h.fill_with_identity();
            h_is_identity = true;
            p = -g.clone();
            slope = g.dot(&p);
        }
        let mut alpha = 1.0;
        if h_is_identity {
            let norm = p.norm();
            if norm > opts.max_initial_step {
                alpha = opts.max_initial_step / norm;
            }
        }

        let mut accepted = None;
        for _ in 0..=opts.max_backtracks {
            let trial = &x + &p * alpha;
            let (ft, gt) = objective(trial.as_slice())?;
            if !ft.is_finite() {
                out.termination = Termination::NonFinite;
                return Ok(out);
            }
            if -ft <= -fx + opts.sufficient_increase * alpha * slope {
                accepted = Some((trial, ft, gt));
                break;
            }
            alpha *= opts.backtrack_factor;
        }
        let Some((x_new, f_new, g_new)) = accepted else {
            out.termination = Termination::LineSearchFailed;
            return Ok(out);
        };
        if !g_new.iter().all(|v| v.is_finite()) {
            out.termination = Termination::NonFinite;
            return Ok(out);
        }
        let g_new = -DVector::from_vec(g_new);
        let improvement = f_new - fx;

        let s = &x_new - &x;
        let y = &g_new - &g;
        let sy = s.dot(&y);
        if sy > 1e-300 && sy.is_finite() {
            if h_is_identity {
                let yy = y.dot(&y);
                if yy > 0.0 {
                    h *= sy / yy;
                }
            }
            let rho = 1.0 / sy;
            let hy = &h * &y;
            let yhy = y.dot(&hy);
            // H <- (I - rho s y^T) H (I - rho y s^T) + rho s s^T
            h += (&s * s.transpose()) * (rho * rho * yhy + rho)
                - (&hy * s.transpose() + &s * hy.transpose()) * rho;
            h_is_identity = false;
            curvature_failures = 0;
        } else {
            curvature_failures += 1;
            if curvature_failures >= CURVATURE_RESETS {
                h.fill_with_identity();
                h_is_identity = true;
                curvature_failures = 0;
            }
        }

        x = x_new;
        fx = f_new;
        g = g_new;
        out.iterations += 1;
        out.x = x.as_slice().to_vec();
        out.value = fx;
        out.path.push(out.x.clone());
        out.values.push(fx);

        if improvement < opts.improvement_tolerance {
            out.termination = Termination::ImprovementBelowTolerance;
            return Ok(out);
        }
    }
    out.termination = Termination::MaxIterations;
    Ok(out)
}
