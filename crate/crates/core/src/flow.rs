//! Backward flow solver, a.e. inversion to the forward flow, and flow checks.
//!
//! The backward flow is computed as the mollification limit is built in the
//! theory: explicit midpoint steps on a mollified field whose radius is tied
//! to the step size, followed by Richardson extrapolation over `{h, h/2}`.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::field::{MollifiedField, VelocityField};
use crate::grid::{BoxUnion, SpaceGrid, TimeGrid};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Backward,
    Forward,
}

/// Per-sample status of a forward (inverted) map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Flag {
    Ok = 0,
    /// Preimage interval wider than the ambiguity threshold (measure-zero bad set).
    Ambiguous = 1,
    /// Target outside the computed range; no extrapolation is attempted.
    NotFound = 2,
}

impl Flag {
    pub fn as_u8(self) -> u8 {
        self as u8
    }
}

/// How the mollification radius couples to the time step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EpsRule {
    /// eps = factor * dt, refined together with dt; first-order extrapolation.
    TiedToDt(f64),
    /// Fixed radius; dt refines under it; second-order extrapolation.
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowOptions {
    pub dt: f64,
    pub eps_rule: EpsRule,
    pub richardson: bool,
    /// Forward inversion: source lattice refinement over the target lattice.
    pub source_refine: usize,
    /// Ambiguity threshold in source-lattice spacings.
    pub ambiguity_factor: f64,
}

impl Default for FlowOptions {
    fn default() -> Self {
        FlowOptions {
            dt: 1e-3,
            eps_rule: EpsRule::TiedToDt(4.0),
            richardson: true,
            source_refine: 4,
            ambiguity_factor: 10.0,
        }
    }
}

impl FlowOptions {
    pub fn with_dt(dt: f64) -> Self {
        FlowOptions {
            dt,
            ..FlowOptions::default()
        }
    }
}

/// Sampled flow map on a time grid x space lattice.
///
/// `samples` is laid out `[time][point][component]`. For backward maps the
/// anchor is the start time `s` and every node `t <= s`; for forward maps the
/// anchor is `s` and nodes satisfy `t >= s`.
#[derive(Debug, Clone)]
pub struct FlowMap {
    pub direction: Direction,
    pub anchor: f64,
    pub t_grid: TimeGrid,
    pub x_grid: SpaceGrid,
    pub dim: usize,
    pub samples: Vec<f64>,
    pub flags: Vec<Flag>,
    pub field_name: String,
    /// Sup distance to the closed-form flow, when the catalog provides one.
    pub max_oracle_error: Option<f64>,
}

impl FlowMap {
    fn offset(&self, ti: usize, pi: usize) -> usize {
        (ti * self.x_grid.len() + pi) * self.dim
    }

    pub fn get(&self, ti: usize, pi: usize) -> &[f64] {
        let o = self.offset(ti, pi);
        &self.samples[o..o + self.dim]
    }

    pub fn flag(&self, ti: usize, pi: usize) -> Flag {
        self.flags[ti * self.x_grid.len() + pi]
    }

    /// Multilinear interpolation of the map at an off-lattice point.
    /// Returns `None` when `x` falls outside the lattice hull.
    pub fn eval_interp(&self, ti: usize, x: &[f64]) -> Option<Vec<f64>> {
        let d = self.dim;
        let mut base = Vec::with_capacity(d);
        let mut frac = Vec::with_capacity(d);
        for (k, ax) in self.x_grid.axes.iter().enumerate() {
            if ax.n == 1 {
                if (x[k] - ax.min).abs() > 1e-12 * (1.0 + ax.min.abs()) {
                    return None;
                }
                base.push(0usize);
                frac.push(0.0);
                continue;
            }
            let h = ax.spacing();
            let u = (x[k] - ax.min) / h;
            if u < -1e-9 || u > (ax.n - 1) as f64 + 1e-9 {
                return None;
            }
            let i = (u.floor() as usize).min(ax.n - 2);
            base.push(i);
            frac.push((u - i as f64).clamp(0.0, 1.0));
        }
        let mut out = vec![0.0; d];
        for corner in 0..(1usize << d) {
            let mut w = 1.0;
            let mut idx = vec![0usize; d];
            for k in 0..d {
                if corner >> k & 1 == 1 {
                    w *= frac[k];
                    idx[k] = base[k] + if self.x_grid.axes[k].n > 1 { 1 } else { 0 };
                } else {
                    w *= 1.0 - frac[k];
                    idx[k] = base[k];
                }
            }
            if w == 0.0 {
                continue;
            }
            let v = self.get(ti, self.x_grid.flat_index(&idx));
            for k in 0..d {
                out[k] += w * v[k];
            }
        }
        Some(out)
    }

    pub fn fraction_flagged(&self) -> f64 {
        let bad = self.flags.iter().filter(|f| **f != Flag::Ok).count();
        bad as f64 / self.flags.len().max(1) as f64
    }
}

/// Integrate `dX/dtau = g(tau, X)` with explicit midpoint from `tau = 0`,
/// recording at the given ascending `tau` nodes. `segment_steps[k]` counts
/// the steps on `[nodes[k], nodes[k+1]]`; the caller fixes them so refined
/// runs halve the step exactly.
fn integrate_record<G>(
    g: &G,
    nodes: &[f64],
    segment_steps: &[usize],
    x0: &[f64],
    step_multiplier: usize,
) -> Result<Vec<Vec<f64>>>
where
    G: Fn(f64, &[f64], &mut [f64]),
{
    let d = x0.len();
    let mut x = x0.to_vec();
    let mut out = Vec::with_capacity(nodes.len());
    let mut k1 = vec![0.0; d];
    let mut xm = vec![0.0; d];
    let mut tau = nodes[0];
    debug_assert_eq!(nodes[0], 0.0);
    out.push(x.clone());
    for (seg, win) in nodes.windows(2).enumerate() {
        let steps = segment_steps[seg] * step_multiplier;
        let h = (win[1] - win[0]) / steps as f64;
        for _ in 0..steps {
            g(tau, &x, &mut k1);
            for i in 0..d {
                xm[i] = x[i] + 0.5 * h * k1[i];
            }
            g(tau + 0.5 * h, &xm, &mut k1);
            for i in 0..d {
                x[i] += h * k1[i];
            }
            tau += h;
        }
        tau = win[1];
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::IntegrationFailure(format!(
                "non-finite state at tau={tau}"
            )));
        }
        out.push(x.clone());
    }
    Ok(out)
}

/// One backward trajectory from `(s, x0)` recorded at descending times
/// `t_nodes` (each `<= s`). Returns positions in the same order as `t_nodes`.
pub fn backward_trajectory(
    field: &VelocityField,
    s: f64,
    t_nodes: &[f64],
    x0: &[f64],
    opts: &FlowOptions,
) -> Result<Vec<Vec<f64>>> {
    // tau = s - t, ascending with 0 first.
    let mut taus = vec![0.0];
    taus.extend(t_nodes.iter().map(|t| s - t));
    if taus.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::InvalidArgument(
            "backward trajectory nodes must descend from s".into(),
        ));
    }
    let segment_steps: Vec<usize> = taus
        .windows(2)
        .map(|w| ((w[1] - w[0]) / opts.dt).ceil().max(1.0) as usize)
        .collect();

    let run = |eps: f64, mult: usize| -> Result<Vec<Vec<f64>>> {
        let moll = MollifiedField::new(field.clone(), eps)?;
        let g = |tau: f64, x: &[f64], out: &mut [f64]| {
            moll.eval_into(s - tau, x, out);
            for v in out.iter_mut() {
                *v = -*v;
            }
        };
        integrate_record(&g, &taus, &segment_steps, x0, mult)
    };

    let combined = match (opts.richardson, opts.eps_rule) {
        (false, rule) => {
            let eps = match rule {
                EpsRule::TiedToDt(f) => f * opts.dt,
                EpsRule::Fixed(e) => e,
            };
            run(eps, 1)?
        }
        (true, EpsRule::TiedToDt(f)) => {
            // Mollification bias is first order in eps = f*dt.
            let coarse = run(f * opts.dt, 1)?;
            let fine = run(f * opts.dt / 2.0, 2)?;
            extrapolate(&fine, &coarse, 2.0, -1.0)
        }
        (true, EpsRule::Fixed(e)) => {
            // Fixed radius: midpoint is second order in dt.
            let coarse = run(e, 1)?;
            let fine = run(e, 2)?;
            extrapolate(&fine, &coarse, 4.0 / 3.0, -1.0 / 3.0)
        }
    };
    // Drop the tau = 0 anchor record.
    Ok(combined[1..].to_vec())
}

fn extrapolate(fine: &[Vec<f64>], coarse: &[Vec<f64>], wf: f64, wc: f64) -> Vec<Vec<f64>> {
    fine.iter()
        .zip(coarse)
        .map(|(f, c)| f.iter().zip(c).map(|(a, b)| wf * a + wc * b).collect())
        .collect()
}

/// Grönwall-type a priori bound: |phi| <= (|x| + I0) e^{I0} with I0 = int c0.
fn growth_bound(field: &VelocityField, t_lo: f64, s: f64, norm_x: f64) -> f64 {
    let i0 = field.constants.c0.integral(t_lo, s);
    (norm_x + i0) * i0.exp()
}

/// Backward flow `phi_{t,s}` for every `t` in the grid and lattice point.
pub fn backward_flow(
    field: &VelocityField,
    s: f64,
    t_grid: &TimeGrid,
    x_grid: &SpaceGrid,
    opts: &FlowOptions,
) -> Result<FlowMap> {
    if t_grid.b > s + 1e-12 {
        return Err(Error::InvalidArgument(
            "backward flow needs t_grid inside [0, s]".into(),
        ));
    }
    let d = field.dim;
    let t_nodes_desc: Vec<f64> = (0..t_grid.n).rev().map(|i| t_grid.node(i)).collect();
    let points = x_grid.points();
    let rows: Vec<Result<Vec<Vec<f64>>>> = points
        .par_iter()
        .map(|x| backward_trajectory(field, s, &t_nodes_desc, x, opts))
        .collect();

    let npts = points.len();
    let mut samples = vec![0.0; t_grid.n * npts * d];
    for (pi, row) in rows.into_iter().enumerate() {
        let row = row?;
        // row is ordered by descending t; map back to grid order.
        for (k, pos) in row.into_iter().enumerate() {
            let ti = t_grid.n - 1 - k;
            let o = (ti * npts + pi) * d;
            samples[o..o + d].copy_from_slice(&pos);
        }
    }

    // Growth diagnostic with 100% headroom over the a priori bound.
    for (pi, x) in points.iter().enumerate() {
        let norm_x = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let bound = 2.0 * growth_bound(field, t_grid.a, s, norm_x) + 1e-9;
        for ti in 0..t_grid.n {
            let o = (ti * npts + pi) * d;
            let norm: f64 = samples[o..o + d].iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > bound {
                return Err(Error::GrowthBoundBreach {
                    value: norm,
                    bound,
                    x: x.clone(),
                });
            }
        }
    }

    let max_oracle_error = field.oracles.backward_flow.as_ref().map(|oracle| {
        let mut worst = 0.0f64;
        for ti in 0..t_grid.n {
            let t = t_grid.node(ti);
            for (pi, x) in points.iter().enumerate() {
                let exact = oracle(t, s, x);
                let o = (ti * npts + pi) * d;
                let err = samples[o..o + d]
                    .iter()
                    .zip(&exact)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                worst = worst.max(err);
            }
        }
        worst
    });

    Ok(FlowMap {
        direction: Direction::Backward,
        anchor: s,
        t_grid: t_grid.clone(),
        x_grid: x_grid.clone(),
        dim: d,
        samples,
        flags: vec![Flag::Ok; t_grid.n * npts],
        field_name: field.name.clone(),
        max_oracle_error,
    })
}

/// Single backward point `phi_{t,s}(x)`.
pub fn backward_point(
    field: &VelocityField,
    t: f64,
    s: f64,
    x: &[f64],
    opts: &FlowOptions,
) -> Result<Vec<f64>> {
    Ok(backward_trajectory(field, s, &[t], x, opts)?.pop().unwrap())
}

/// Source lattice for inversion: the target range inflated by the a priori
/// flow displacement, refined by `source_refine`.
fn inversion_source_grid(
    field: &VelocityField,
    s: f64,
    t_max: f64,
    y_grid: &SpaceGrid,
    refine: usize,
) -> SpaceGrid {
    let i0 = field.constants.c0.integral(s, t_max);
    let axes = y_grid
        .axes
        .iter()
        .map(|ax| {
            let r = ax.min.abs().max(ax.max.abs());
            let pad = (1.0 + r) * (i0.exp() - 1.0) + i0 + 2.0 * ax.spacing().max(1e-6);
            let n = ((ax.n - 1).max(1) * refine) as f64 * (ax.max - ax.min + 2.0 * pad)
                / (ax.max - ax.min).max(1e-12);
            crate::grid::Axis {
                min: ax.min - pad,
                max: ax.max + pad,
                n: (n.ceil() as usize).max(2) + 1,
            }
        })
        .collect();
    SpaceGrid { axes }
}

/// Forward flow `phi_{t,s}` for `t >= s`, as the a.e. right inverse of the
/// backward map. In 1-D the left-continuous generalized inverse of the
/// nondecreasing backward map is used, with ties broken to the infimum of the
/// preimage interval; in higher dimensions a lattice scan plus damped
/// fixed-point refinement (experimental).
pub fn forward_flow(
    field: &VelocityField,
    s: f64,
    t_grid: &TimeGrid,
    y_grid: &SpaceGrid,
    opts: &FlowOptions,
) -> Result<FlowMap> {
    if t_grid.a < s - 1e-12 {
        return Err(Error::InvalidArgument(
            "forward flow needs t_grid inside [s, T]".into(),
        ));
    }
    let d = field.dim;
    let npts = y_grid.len();
    let mut samples = vec![0.0; t_grid.n * npts * d];
    let mut flags = vec![Flag::Ok; t_grid.n * npts];

    let source = inversion_source_grid(field, s, t_grid.b, y_grid, opts.source_refine);

    for ti in 0..t_grid.n {
        let t = t_grid.node(ti);
        if (t - s).abs() < 1e-15 {
            for (pi, y) in y_grid.points().iter().enumerate() {
                let o = (ti * npts + pi) * d;
                samples[o..o + d].copy_from_slice(y);
            }
            continue;
        }
        // Backward map from anchor t down to s on the source lattice.
        let back = backward_flow(field, t, &TimeGrid::single(s), &source, opts)?;
        if d == 1 {
            invert_monotone_1d(&back, y_grid, opts, ti, &mut samples, &mut flags);
        } else {
            invert_lattice_nd(field, s, t, &back, y_grid, opts, ti, &mut samples, &mut flags)?;
        }
    }

    let max_oracle_error = field.oracles.forward_flow.as_ref().map(|oracle| {
        let mut worst = 0.0f64;
        for ti in 0..t_grid.n {
            let t = t_grid.node(ti);
            for (pi, y) in y_grid.points().iter().enumerate() {
                if flags[ti * npts + pi] != Flag::Ok {
                    continue;
                }
                let exact = oracle(t, s, y);
                let o = (ti * npts + pi) * d;
                let err = samples[o..o + d]
                    .iter()
                    .zip(&exact)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                worst = worst.max(err);
            }
        }
        worst
    });

    Ok(FlowMap {
        direction: Direction::Forward,
        anchor: s,
        t_grid: t_grid.clone(),
        x_grid: y_grid.clone(),
        dim: d,
        samples,
        flags,
        field_name: field.name.clone(),
        max_oracle_error,
    })
}

#[allow(clippy::too_many_arguments)]
fn invert_monotone_1d(
    back: &FlowMap,
    y_grid: &SpaceGrid,
    opts: &FlowOptions,
    ti: usize,
    samples: &mut [f64],
    flags: &mut [Flag],
) {
    let n_src = back.x_grid.len();
    let src_h = back.x_grid.axes[0].spacing();
    let xs: Vec<f64> = (0..n_src).map(|i| back.x_grid.axes[0].node(i)).collect();
    // The exact backward map is nondecreasing; wash out solver-level wiggles.
    let mut phi: Vec<f64> = (0..n_src).map(|i| back.get(0, i)[0]).collect();
    for i in 1..n_src {
        if phi[i] < phi[i - 1] {
            phi[i] = phi[i - 1];
        }
    }
    let npts = y_grid.len();
    let wide = opts.ambiguity_factor * src_h;
    // Width of the numerically-flat band around a target value: values closer
    // than the solver accuracy cannot be distinguished from an exact tie.
    let band = (2.0 * opts.dt).max(1e-9);
    for (pi, y) in y_grid.points().iter().enumerate() {
        let y = y[0];
        let slot = ti * npts + pi;
        if y < phi[0] || y > phi[n_src - 1] {
            flags[slot] = Flag::NotFound;
            samples[slot] = f64::NAN;
            continue;
        }
        // lo: first index with phi >= y; hi: last index with phi <= y.
        let lo = phi.partition_point(|v| *v < y);
        let hi = phi.partition_point(|v| *v <= y).saturating_sub(1);
        let x_lo = if lo == 0 || phi[lo] <= phi[lo - 1] {
            xs[lo]
        } else {
            // linear interpolation inside the bracketing cell
            let a = lo - 1;
            xs[a] + (y - phi[a]) * (xs[lo] - xs[a]) / (phi[lo] - phi[a])
        };
        let x_hi = if hi + 1 >= n_src || phi[hi + 1] <= phi[hi] {
            xs[hi]
        } else {
            xs[hi] + (y - phi[hi]) * (xs[hi + 1] - xs[hi]) / (phi[hi + 1] - phi[hi])
        };
        // Preimage interval of the band [y - band, y + band]; a genuinely flat
        // stretch of the backward map shows up here even when solver output
        // wiggles at the 1e-12 scale.
        let b_lo = crossing_left(&xs, &phi, y - band);
        let b_hi = crossing_right(&xs, &phi, y + band);
        if b_hi - b_lo > wide {
            flags[slot] = Flag::Ambiguous;
            // report the infimum of the (band) preimage interval
            samples[slot] = b_lo;
        } else {
            samples[slot] = x_lo.min(x_hi);
        }
    }
}

/// First point where the nondecreasing samples reach `level`, linearly
/// interpolated; clamped to the lattice ends.
fn crossing_left(xs: &[f64], phi: &[f64], level: f64) -> f64 {
    let i = phi.partition_point(|v| *v < level);
    if i == 0 {
        return xs[0];
    }
    if i >= phi.len() {
        return xs[xs.len() - 1];
    }
    if phi[i] > phi[i - 1] {
        xs[i - 1] + (level - phi[i - 1]) * (xs[i] - xs[i - 1]) / (phi[i] - phi[i - 1])
    } else {
        xs[i]
    }
}

/// Last point where the nondecreasing samples stay at or below `level`.
fn crossing_right(xs: &[f64], phi: &[f64], level: f64) -> f64 {
    let j = phi.partition_point(|v| *v <= level);
    if j == 0 {
        return xs[0];
    }
    if j >= phi.len() {
        return xs[xs.len() - 1];
    }
    let i = j - 1;
    if phi[j] > phi[i] {
        xs[i] + (level - phi[i]) * (xs[j] - xs[i]) / (phi[j] - phi[i])
    } else {
        xs[i]
    }
}

#[allow(clippy::too_many_arguments)]
fn invert_lattice_nd(
    field: &VelocityField,
    s: f64,
    t: f64,
    back: &FlowMap,
    y_grid: &SpaceGrid,
    opts: &FlowOptions,
    ti: usize,
    samples: &mut [f64],
    flags: &mut [Flag],
) -> Result<()> {
    let d = field.dim;
    let n_src = back.x_grid.len();
    let npts = y_grid.len();
    let src_h = back.x_grid.spacing();
    let contraction = (-2.0 * field.constants.c1.integral(s, t)).exp();
    let lambda = 0.5 * contraction;
    let results: Vec<(Vec<f64>, Flag)> = y_grid
        .points()
        .par_iter()
        .map(|y| {
            // coarse scan
            let mut best = (f64::INFINITY, 0usize);
            for i in 0..n_src {
                let v = back.get(0, i);
                let dist2: f64 = v.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
                if dist2 < best.0 {
                    best = (dist2, i);
                }
            }
            let mut x = back.x_grid.point(best.1);
            let mut flag = Flag::Ok;
            let tol = 1e-3 * src_h;
            let mut converged = false;
            for _ in 0..60 {
                let img = match backward_point(field, s, t, &x, opts) {
                    Ok(v) => v,
                    Err(_) => break,
                };
                let res: f64 = img
                    .iter()
                    .zip(y)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                if res < tol {
                    converged = true;
                    break;
                }
                for k in 0..d {
                    x[k] -= lambda * (img[k] - y[k]);
                }
            }
            if !converged {
                flag = Flag::Ambiguous;
            }
            (x, flag)
        })
        .collect();
    for (pi, (x, flag)) in results.into_iter().enumerate() {
        let slot = ti * npts + pi;
        flags[slot] = flag;
        let o = slot * d;
        samples[o..o + d].copy_from_slice(&x);
    }
    Ok(())
}

/// Max residual of the integral equation
/// `phi_{t,s}(x) = x + int_s^t b(r, phi_{r,s}(x)) dr`
/// over non-flagged lattice points, with trapezoid quadrature along the
/// recorded trajectory. Requires a forward map on a uniform time grid.
pub fn verify_integral_equation(field: &VelocityField, fmap: &FlowMap) -> Result<f64> {
    if fmap.direction != Direction::Forward {
        return Err(Error::InvalidArgument(
            "integral-equation check needs a forward map".into(),
        ));
    }
    let npts = fmap.x_grid.len();
    let d = fmap.dim;
    let nt = fmap.t_grid.n;
    let mut worst = 0.0f64;
    'points: for pi in 0..npts {
        for ti in 0..nt {
            if fmap.flag(ti, pi) != Flag::Ok {
                continue 'points;
            }
        }
        let y = fmap.x_grid.point(pi);
        let mut integral = vec![0.0; d];
        let mut prev_b = field.eval(fmap.t_grid.node(0), fmap.get(0, pi));
        // position at node 0 should be y itself when t0 = s
        for ti in 1..nt {
            let t0 = fmap.t_grid.node(ti - 1);
            let t1 = fmap.t_grid.node(ti);
            let cur_b = field.eval(t1, fmap.get(ti, pi));
            for k in 0..d {
                integral[k] += 0.5 * (prev_b[k] + cur_b[k]) * (t1 - t0);
            }
            prev_b = cur_b;
            let pos = fmap.get(ti, pi);
            for k in 0..d {
                let res = (pos[k] - y[k] - integral[k]).abs();
                worst = worst.max(res);
            }
        }
    }
    Ok(worst)
}

/// Semigroup defect of the backward flow: sup over the lattice of
/// `|phi_{r,s}(phi_{s,t}(x)) - phi_{r,t}(x)|`, all legs freshly integrated.
pub fn compose_check_backward(
    field: &VelocityField,
    r: f64,
    s: f64,
    t: f64,
    x_grid: &SpaceGrid,
    opts: &FlowOptions,
) -> Result<f64> {
    if !(r <= s && s <= t) {
        return Err(Error::InvalidArgument("need r <= s <= t".into()));
    }
    let defects: Vec<Result<f64>> = x_grid
        .points()
        .par_iter()
        .map(|x| {
            let mid = backward_point(field, s, t, x, opts)?;
            let two_leg = backward_point(field, r, s, &mid, opts)?;
            let direct = backward_point(field, r, t, x, opts)?;
            Ok(two_leg
                .iter()
                .zip(&direct)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max))
        })
        .collect();
    let mut worst = 0.0f64;
    for v in defects {
        worst = worst.max(v?);
    }
    Ok(worst)
}

/// Forward semigroup defect in lattice L^1 mean over non-flagged points:
/// `phi_{t,s} o phi_{s,r} = phi_{t,r}` holds a.e. only.
pub fn compose_check_forward(
    field: &VelocityField,
    r: f64,
    s: f64,
    t: f64,
    y_grid: &SpaceGrid,
    opts: &FlowOptions,
) -> Result<f64> {
    if !(r <= s && s <= t) {
        return Err(Error::InvalidArgument("need r <= s <= t".into()));
    }
    let first = forward_flow(field, r, &TimeGrid::single(s), y_grid, opts)?;
    let direct = forward_flow(field, r, &TimeGrid::single(t), y_grid, opts)?;
    // Second leg on the range of the first.
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for pi in 0..y_grid.len() {
        if first.flag(0, pi) != Flag::Ok {
            continue;
        }
        for v in first.get(0, pi) {
            lo = lo.min(*v);
            hi = hi.max(*v);
        }
    }
    if !lo.is_finite() {
        return Err(Error::PreimageSearchFailed {
            failed: y_grid.len(),
            total: y_grid.len(),
        });
    }
    let leg_grid = SpaceGrid::line(lo, hi, (y_grid.len().max(2) * 2).min(4001))?;
    let second = forward_flow(field, s, &TimeGrid::single(t), &leg_grid, opts)?;

    let mut total = 0.0;
    let mut count = 0usize;
    for pi in 0..y_grid.len() {
        if first.flag(0, pi) != Flag::Ok || direct.flag(0, pi) != Flag::Ok {
            continue;
        }
        let mid = first.get(0, pi);
        if let Some(val) = second.eval_interp(0, mid) {
            let dv = direct.get(0, pi);
            let err: f64 = val.iter().zip(dv).map(|(a, b)| (a - b).abs()).sum();
            total += err;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::PreimageSearchFailed {
            failed: y_grid.len(),
            total: y_grid.len(),
        });
    }
    Ok(total / count as f64)
}

/// Compressibility report for a forward map: Lebesgue measure of the preimage
/// of `target` at time node `t_index`, by lattice counting.
#[derive(Debug, Clone)]
pub struct PreimageReport {
    pub target_volume: f64,
    pub preimage_measure: f64,
    pub ratio: f64,
    pub flagged_in_count: usize,
}

pub fn preimage_volume(
    fmap: &FlowMap,
    t_index: usize,
    target: &BoxUnion,
) -> Result<PreimageReport> {
    if fmap.direction != Direction::Forward {
        return Err(Error::InvalidArgument(
            "preimage volume needs a forward map".into(),
        ));
    }
    let cell = fmap.x_grid.cell_volume();
    let mut hits = 0usize;
    let mut flagged = 0usize;
    for pi in 0..fmap.x_grid.len() {
        if fmap.flag(t_index, pi) != Flag::Ok {
            flagged += 1;
            continue;
        }
        if target.contains(fmap.get(t_index, pi)) {
            hits += 1;
        }
    }
    let measure = hits as f64 * cell;
    let tv = target.volume(401);
    Ok(PreimageReport {
        target_volume: tv,
        preimage_measure: measure,
        ratio: if tv > 0.0 { measure / tv } else { 0.0 },
        flagged_in_count: flagged,
    })
}
