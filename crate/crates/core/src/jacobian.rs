//! Jacobian of the backward flow: finite-difference and variational routes,
//! bounds, and the 1-D strong convergence study.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::field::{MollifiedField, Smoothness, VelocityField};
use crate::flow::{backward_flow, Direction, EpsRule, FlowMap, FlowOptions};
use crate::grid::{SpaceGrid, TimeGrid};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum JacobianMethod {
    /// Determinant of centered differences of the sampled flow.
    FiniteDifference,
    /// Integrate dM/dt = grad b^eps (t, phi) M along trajectories; J = det M.
    Variational { eps: f64 },
}

/// Sampled Jacobian `J_{t,s}(x)` of a backward flow map, with its
/// deterministic sup bound `exp(d int_t^s c1)` and clipping diagnostics.
#[derive(Debug, Clone)]
pub struct JacobianField {
    pub anchor: f64,
    pub t_grid: TimeGrid,
    pub x_grid: SpaceGrid,
    pub samples: Vec<f64>,
    /// Sup bound per time node.
    pub sup_bound: Vec<f64>,
    pub clipped_count: usize,
    pub clipped_mass: f64,
}

impl JacobianField {
    pub fn get(&self, ti: usize, pi: usize) -> f64 {
        self.samples[ti * self.x_grid.len() + pi]
    }

    /// L1 norm over the lattice window at a time node.
    pub fn l1(&self, ti: usize) -> f64 {
        let cell = self.x_grid.cell_volume();
        (0..self.x_grid.len()).map(|pi| self.get(ti, pi).abs()).sum::<f64>() * cell
    }
}

fn det(m: &[Vec<f64>]) -> f64 {
    let d = m.len();
    match d {
        1 => m[0][0],
        2 => m[0][0] * m[1][1] - m[0][1] * m[1][0],
        3 => {
            m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
                - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
                + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
        }
        _ => {
            // LU with partial pivoting for d >= 4
            let mut a: Vec<Vec<f64>> = m.to_vec();
            let mut sign = 1.0;
            let mut prod = 1.0;
            for k in 0..d {
                let (piv, _) = a
                    .iter()
                    .enumerate()
                    .skip(k)
                    .map(|(i, row)| (i, row[k].abs()))
                    .fold((k, 0.0), |acc, v| if v.1 > acc.1 { v } else { acc });
                if a[piv][k] == 0.0 {
                    return 0.0;
                }
                if piv != k {
                    a.swap(piv, k);
                    sign = -sign;
                }
                prod *= a[k][k];
                for i in (k + 1)..d {
                    let f = a[i][k] / a[k][k];
                    for j in k..d {
                        a[i][j] -= f * a[k][j];
                    }
                }
            }
            sign * prod
        }
    }
}

/// Jacobian of a backward flow map.
///
/// Finite differencing uses step `2 * (lattice spacing)` (stride-2 neighbors,
/// one-sided at the border). Negative determinants are clipped to zero; the
/// run fails when the clipped mass exceeds 1% of the integral of J.
pub fn backward_jacobian(
    field: &VelocityField,
    fmap: &FlowMap,
    method: JacobianMethod,
) -> Result<JacobianField> {
    if fmap.direction != Direction::Backward {
        return Err(Error::InvalidArgument(
            "jacobian needs a backward flow map".into(),
        ));
    }
    let d = fmap.dim;
    let npts = fmap.x_grid.len();
    let nt = fmap.t_grid.n;
    let mut samples = vec![0.0; nt * npts];
    let mut clipped_count = 0usize;
    let mut clipped_mass = 0.0f64;

    match method {
        JacobianMethod::FiniteDifference => {
            for ti in 0..nt {
                for pi in 0..npts {
                    let mut rows = vec![vec![0.0; d]; d];
                    for axis in 0..d {
                        let h = fmap.x_grid.axes[axis].spacing();
                        let (ip, im, span) = match (
                            fmap.x_grid.neighbor(pi, axis, 2),
                            fmap.x_grid.neighbor(pi, axis, -2),
                        ) {
                            (Some(p), Some(m)) => (p, m, 4.0 * h),
                            (Some(p), None) => (p, pi, 2.0 * h),
                            (None, Some(m)) => (pi, m, 2.0 * h),
                            (None, None) => {
                                return Err(Error::InvalidArgument(
                                    "lattice too small for stride-2 differences".into(),
                                ))
                            }
                        };
                        let vp = fmap.get(ti, ip);
                        let vm = fmap.get(ti, im);
                        for i in 0..d {
                            rows[i][axis] = (vp[i] - vm[i]) / span;
                        }
                    }
                    let mut j = det(&rows);
                    if j < 0.0 {
                        clipped_count += 1;
                        clipped_mass += -j;
                        j = 0.0;
                    }
                    samples[ti * npts + pi] = j;
                }
            }
        }
        JacobianMethod::Variational { eps } => {
            if field.smoothness == Smoothness::Discontinuous && eps <= 0.0 {
                return Err(Error::VariationalNeedsSmoothField);
            }
            let moll = MollifiedField::new(field.clone(), eps.max(1e-12))?;
            let s = fmap.anchor;
            let t_nodes_desc: Vec<f64> = (0..nt).rev().map(|i| fmap.t_grid.node(i)).collect();
            let dt = eps / 8.0;
            let results: Vec<Vec<f64>> = (0..npts)
                .into_par_iter()
                .map(|pi| {
                    // Joint state (phi, M) integrated downward with midpoint.
                    let x0 = fmap.x_grid.point(pi);
                    let mut x = x0.clone();
                    let mut m = vec![0.0; d * d];
                    for i in 0..d {
                        m[i * d + i] = 1.0;
                    }
                    let mut out = vec![0.0; nt];
                    let mut tau = 0.0;
                    let mut node_iter = t_nodes_desc.iter().enumerate();
                    let mut next = node_iter.next();
                    // record at tau = 0 if requested
                    while let Some((k, &tn)) = next {
                        if (s - tn) <= tau + 1e-15 {
                            let rows: Vec<Vec<f64>> =
                                (0..d).map(|i| m[i * d..(i + 1) * d].to_vec()).collect();
                            out[nt - 1 - k] = det(&rows);
                            next = node_iter.next();
                        } else {
                            break;
                        }
                    }
                    while let Some((k, &tn)) = next {
                        let target = s - tn;
                        let steps = ((target - tau) / dt).ceil().max(1.0) as usize;
                        let h = (target - tau) / steps as f64;
                        for _ in 0..steps {
                            step_variational(&moll, s, tau, h, &mut x, &mut m);
                            tau += h;
                        }
                        tau = target;
                        let rows: Vec<Vec<f64>> =
                            (0..d).map(|i| m[i * d..(i + 1) * d].to_vec()).collect();
                        out[nt - 1 - k] = det(&rows);
                        next = node_iter.next();
                    }
                    out
                })
                .collect();
            for (pi, col) in results.into_iter().enumerate() {
                for (ti, mut j) in col.into_iter().enumerate() {
                    if j < 0.0 {
                        clipped_count += 1;
                        clipped_mass += -j;
                        j = 0.0;
                    }
                    samples[ti * npts + pi] = j;
                }
            }
        }
    }

    let cell = fmap.x_grid.cell_volume();
    let total: f64 = samples.iter().sum::<f64>() * cell;
    if clipped_mass * cell > 0.01 * total.max(1e-12) {
        return Err(Error::InvalidArgument(format!(
            "clipped Jacobian mass {:.3e} exceeds 1% of integral {:.3e}",
            clipped_mass * cell,
            total
        )));
    }

    let sup_bound = (0..nt)
        .map(|ti| {
            let t = fmap.t_grid.node(ti);
            (d as f64 * field.constants.c1.integral(t, fmap.anchor)).exp()
        })
        .collect();

    Ok(JacobianField {
        anchor: fmap.anchor,
        t_grid: fmap.t_grid.clone(),
        x_grid: fmap.x_grid.clone(),
        samples,
        sup_bound,
        clipped_count,
        clipped_mass,
    })
}

/// Midpoint step for the joint system dphi/dtau = -b^eps(s-tau, phi),
/// dM/dtau = -grad b^eps(s-tau, phi) M.
fn step_variational(moll: &MollifiedField, s: f64, tau: f64, h: f64, x: &mut Vec<f64>, m: &mut [f64]) {
    let d = x.len();
    let f = |tau: f64, x: &[f64], m: &[f64]| -> (Vec<f64>, Vec<f64>) {
        let mut bx = vec![0.0; d];
        moll.eval_into(s - tau, x, &mut bx);
        let grad = moll.gradient(s - tau, x);
        let mut dx = vec![0.0; d];
        for i in 0..d {
            dx[i] = -bx[i];
        }
        let mut dm = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                let mut acc = 0.0;
                for k in 0..d {
                    acc += grad[i][k] * m[k * d + j];
                }
                dm[i * d + j] = -acc;
            }
        }
        (dx, dm)
    };
    let (k1x, k1m) = f(tau, x, m);
    let xm: Vec<f64> = x.iter().zip(&k1x).map(|(a, b)| a + 0.5 * h * b).collect();
    let mm: Vec<f64> = m.iter().zip(&k1m).map(|(a, b)| a + 0.5 * h * b).collect();
    let (k2x, k2m) = f(tau + 0.5 * h, &xm, &mm);
    for i in 0..d {
        x[i] += h * k2x[i];
    }
    for i in 0..d * d {
        m[i] += h * k2m[i];
    }
}

/// One row of a mollification-convergence study.
#[derive(Debug, Clone)]
pub struct ConvergenceRow {
    pub eps: f64,
    /// `||J^eps - J^{eps/2}||_{L1(B_R)}` in strong (1-D) mode.
    pub l1_diff: Option<f64>,
    /// Pairings `int J^eps g` for the bump test set in weak mode.
    pub pairings: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvergenceMode {
    StrongL1,
    WeakStar,
}

/// Jacobians of mollified flows across an `eps` list.
///
/// Strong mode (1-D only) reports consecutive L1 differences on `[-radius,
/// radius]`; weak mode pairs each Jacobian against a fixed set of bumps.
pub fn jacobian_convergence_study(
    field: &VelocityField,
    eps_list: &[f64],
    s: f64,
    t: f64,
    radius: f64,
    nx: usize,
    mode: ConvergenceMode,
) -> Result<Vec<ConvergenceRow>> {
    if mode == ConvergenceMode::StrongL1 && field.dim != 1 {
        return Err(Error::StrongModeNeedsDimOne);
    }
    let x_grid = if field.dim == 1 {
        SpaceGrid::line(-radius, radius, nx)?
    } else {
        SpaceGrid::new(
            (0..field.dim)
                .map(|_| crate::grid::Axis {
                    min: -radius,
                    max: radius,
                    n: nx,
                })
                .collect(),
        )?
    };
    let tg = TimeGrid::single(t);

    let jac_at = |eps: f64| -> Result<JacobianField> {
        let o = FlowOptions {
            dt: (eps / 16.0).min(1e-3),
            eps_rule: EpsRule::Fixed(eps),
            richardson: true,
            ..FlowOptions::default()
        };
        let fm = backward_flow(field, s, &tg, &x_grid, &o)?;
        backward_jacobian(field, &fm, JacobianMethod::FiniteDifference)
    };

    let bumps: Vec<Box<dyn Fn(&[f64]) -> f64 + Sync>> = vec![
        Box::new(|x: &[f64]| {
            let r2: f64 = x.iter().map(|v| v * v).sum();
            (-r2).exp()
        }),
        Box::new(|x: &[f64]| {
            let r2: f64 = x.iter().map(|v| (v - 0.5) * (v - 0.5)).sum();
            (-4.0 * r2).exp()
        }),
    ];

    let mut rows = Vec::new();
    let mut prev: Option<JacobianField> = None;
    let cell = x_grid.cell_volume();
    for &eps in eps_list {
        let jf = jac_at(eps)?;
        let pairings = bumps
            .iter()
            .map(|g| {
                (0..x_grid.len())
                    .map(|pi| jf.get(0, pi) * g(&x_grid.point(pi)))
                    .sum::<f64>()
                    * cell
            })
            .collect();
        let l1_diff = match (&prev, mode) {
            (Some(p), ConvergenceMode::StrongL1) => Some(
                (0..x_grid.len())
                    .map(|pi| (p.get(0, pi) - jf.get(0, pi)).abs())
                    .sum::<f64>()
                    * cell,
            ),
            _ => None,
        };
        rows.push(ConvergenceRow {
            eps,
            l1_diff,
            pairings,
        });
        prev = Some(jf);
    }
    Ok(rows)
}
