//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use cnnpose::molecule::{Atom, Ligand, RotatableBond, Vec3};
use cnnpose::network::{ForwardPass, NetworkModel};

pub fn central(mut f: impl FnMut(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

/// Central difference through a network, shrinking the step (to `h / 1000`
/// at most) until both stencil ends share the ReLU and pooling pattern of `x`.
pub fn central_on_piece(
    model: &NetworkModel,
    mut f: impl FnMut(f64) -> (f64, ForwardPass),
    x: f64,
    h: f64,
) -> f64 {
    let (_, at_x) = f(x);
    let mut step = h;
    loop {
        let ((lo, lo_pass), (hi, hi_pass)) = (f(x - step), f(x + step));
        if (model.same_piece(&at_x, &lo_pass) && model.same_piece(&at_x, &hi_pass)) || step <= h / 1000.0 {
            return (hi - lo) / (2.0 * step);
        }
        step /= 10.0;
    }
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Density kernel written out directly from its three branches.
pub fn kernel_oracle(d: f64, r: f64) -> f64 {
    let e2 = std::f64::consts::E.powi(2);
    if d < r {
        (-2.0 * d * d / (r * r)).exp()
    } else if d < 1.5 * r {
        4.0 / (e2 * r * r) * d * d - 12.0 / (e2 * r) * d + 9.0 / e2
    } else {
        0.0
    }
}

/// Every lattice point against every atom, no windowing.
pub fn rasterize_oracle(
    atoms: &[(Vec3, usize)],
    radii: &[f64],
    center: Vec3,
    edge: f64,
    res: f64,
    channels: usize,
) -> Vec<f64> {
    let n = (edge / res).round() as usize + 1;
    let half = (n - 1) as f64 / 2.0;
    let mut out = vec![0.0; channels * n * n * n];
    for c in 0..channels {
        for z in 0..n {
            for y in 0..n {
                for x in 0..n {
                    let p = center + Vec3::new(x as f64 - half, y as f64 - half, z as f64 - half) * res;
                    let v: f64 = atoms
                        .iter()
                        .filter(|(_, t)| *t == c)
                        .map(|(a, t)| kernel_oracle((a - p).norm(), radii[*t]))
                        .sum();
                    out[((c * n + z) * n + y) * n + x] = v;
                }
            }
        }
    }
    out
}

/// Zigzag chain of `atoms` atoms on a helix-free path, with bonds (k, k+1)
/// for the first `torsions` values of k = 1.. moving everything past k+1.
pub fn chain_ligand(atoms: usize, torsions: usize, types: usize) -> Ligand {
    assert!(torsions + 2 < atoms);
    let coords: Vec<Vec3> = (0..atoms)
        .map(|i| {
            let f = i as f64;
            Vec3::new(1.3 * f, if i % 2 == 0 { 0.0 } else { 0.8 }, 0.3 * (f * 0.9).sin())
        })
        .collect();
    let atoms_v = coords
        .iter()
        .enumerate()
        .map(|(i, p)| Atom { position: *p, type_index: i % types })
        .collect();
    let bonds = (1..=torsions)
        .map(|k| RotatableBond { axis_from: k, axis_to: k + 1, downstream: (k + 2..atoms).collect() })
        .collect();
    Ligand::new(atoms_v, 0, bonds).unwrap()
}
