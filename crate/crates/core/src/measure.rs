//! Hybrid atomic + density signed measures, pushforward under flow maps with
//! concentration detection, and Wasserstein / total-variation metrics.

use crate::error::{Error, Result};
use crate::flow::{Direction, FlowMap};
use crate::grid::SpaceGrid;

/// Sampled density on a lattice, integrated with tensor trapezoid weights.
#[derive(Debug, Clone)]
pub struct GridDensity {
    pub grid: SpaceGrid,
    pub values: Vec<f64>,
}

impl GridDensity {
    fn node_weight(&self, flat: usize) -> f64 {
        let idx = self.grid.multi_index(flat);
        let mut w = self.grid.cell_volume();
        for (k, ax) in self.grid.axes.iter().enumerate() {
            if ax.n > 1 && (idx[k] == 0 || idx[k] == ax.n - 1) {
                w *= 0.5;
            }
        }
        w
    }

    pub fn integrate(&self, g: impl Fn(&[f64]) -> f64) -> f64 {
        (0..self.grid.len())
            .map(|i| self.values[i] * g(&self.grid.point(i)) * self.node_weight(i))
            .sum()
    }

    pub fn mass(&self) -> f64 {
        self.integrate(|_| 1.0)
    }

    pub fn abs_mass(&self) -> f64 {
        (0..self.grid.len())
            .map(|i| self.values[i].abs() * self.node_weight(i))
            .sum()
    }
}

/// Signed measure = atoms + lattice density.
///
/// Atom locations are kept pairwise separated by more than `merge_tol`;
/// closer atoms are merged with signed weights summed (cancellation allowed)
/// at the weight-magnitude-weighted mean location.
#[derive(Debug, Clone)]
pub struct HybridMeasure {
    pub dim: usize,
    pub atoms: Vec<(Vec<f64>, f64)>,
    pub density: Option<GridDensity>,
    pub merge_tol: f64,
}

pub const DEFAULT_MERGE_TOL_FACTOR: f64 = 1e-6;

impl HybridMeasure {
    pub fn from_atoms(dim: usize, atoms: Vec<(Vec<f64>, f64)>, domain_diameter: f64) -> Self {
        let mut m = HybridMeasure {
            dim,
            atoms,
            density: None,
            merge_tol: DEFAULT_MERGE_TOL_FACTOR * domain_diameter,
        };
        m.merge_close_atoms();
        m
    }

    pub fn from_density(grid: SpaceGrid, values: Vec<f64>) -> Self {
        let diam = grid.diameter();
        HybridMeasure {
            dim: grid.dim(),
            atoms: vec![],
            density: Some(GridDensity { grid, values }),
            merge_tol: DEFAULT_MERGE_TOL_FACTOR * diam,
        }
    }

    pub fn zero(dim: usize) -> Self {
        HybridMeasure {
            dim,
            atoms: vec![],
            density: None,
            merge_tol: DEFAULT_MERGE_TOL_FACTOR,
        }
    }

    pub fn total_mass(&self) -> f64 {
        let atoms: f64 = self.atoms.iter().map(|(_, w)| w).sum();
        atoms + self.density.as_ref().map(|d| d.mass()).unwrap_or(0.0)
    }

    pub fn total_variation(&self) -> f64 {
        let atoms: f64 = self.atoms.iter().map(|(_, w)| w.abs()).sum();
        atoms + self.density.as_ref().map(|d| d.abs_mass()).unwrap_or(0.0)
    }

    /// Pairing against a continuous test function.
    pub fn pair(&self, g: impl Fn(&[f64]) -> f64) -> f64 {
        let atoms: f64 = self.atoms.iter().map(|(x, w)| w * g(x)).sum();
        atoms + self.density.as_ref().map(|d| d.integrate(g)).unwrap_or(0.0)
    }

    pub fn is_nonnegative(&self) -> bool {
        self.atoms.iter().all(|(_, w)| *w >= 0.0)
            && self
                .density
                .as_ref()
                .map(|d| d.values.iter().all(|v| *v >= -1e-15))
                .unwrap_or(true)
    }

    fn merge_close_atoms(&mut self) {
        if self.atoms.len() < 2 {
            return;
        }
        // Deterministic: sort by coordinates, then greedy chain within merge_tol.
        self.atoms.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        let mut merged: Vec<(Vec<f64>, f64)> = Vec::with_capacity(self.atoms.len());
        for (x, w) in self.atoms.drain(..) {
            if let Some(last) = merged.last_mut() {
                let dist: f64 = last
                    .0
                    .iter()
                    .zip(&x)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                if dist <= self.merge_tol {
                    let wa = last.1.abs();
                    let wb = w.abs();
                    if wa + wb > 0.0 {
                        for (k, c) in last.0.iter_mut().enumerate() {
                            *c = (*c * wa + x[k] * wb) / (wa + wb);
                        }
                    }
                    last.1 += w;
                    continue;
                }
            }
            merged.push((x, w));
        }
        self.atoms = merged;
    }
}

/// Weighted particle discretization of a measure.
#[derive(Debug, Clone)]
pub struct ParticleCloud {
    pub dim: usize,
    pub particles: Vec<(Vec<f64>, f64)>,
    /// Which particles came from atoms of the source (kept verbatim).
    pub atom_count: usize,
    pub provenance: String,
}

impl ParticleCloud {
    pub fn total_mass(&self) -> f64 {
        self.particles.iter().map(|(_, w)| w).sum()
    }
}

/// Discretize: atoms kept verbatim; the density is sampled by quantile
/// stratification of each signed part in 1-D, and by lattice dual cells in
/// higher dimensions.
pub fn discretize(m: &HybridMeasure, n: usize) -> Result<ParticleCloud> {
    if n < m.atoms.len() {
        return Err(Error::MeasureContract(format!(
            "particle budget {n} below atom count {}",
            m.atoms.len()
        )));
    }
    let mut particles: Vec<(Vec<f64>, f64)> = m.atoms.clone();
    let atom_count = particles.len();
    if let Some(den) = &m.density {
        let budget = n - atom_count;
        if m.dim == 1 {
            let pos: Vec<f64> = den.values.iter().map(|v| v.max(0.0)).collect();
            let neg: Vec<f64> = den.values.iter().map(|v| (-v).max(0.0)).collect();
            let mass_pos = part_mass(den, &pos);
            let mass_neg = part_mass(den, &neg);
            let total = mass_pos + mass_neg;
            if total > 0.0 && budget > 0 {
                let n_pos = if mass_pos > 0.0 {
                    ((budget as f64 * mass_pos / total).round() as usize).max(1)
                } else {
                    0
                };
                let n_neg = if mass_neg > 0.0 { budget.saturating_sub(n_pos).max(1) } else { 0 };
                particles.extend(quantile_particles(den, &pos, n_pos, 1.0));
                particles.extend(quantile_particles(den, &neg, n_neg, -1.0));
            }
        } else {
            // one particle per lattice node, carrying the trapezoid node mass
            for i in 0..den.grid.len() {
                let w = den.values[i] * den.node_weight(i);
                if w != 0.0 {
                    particles.push((den.grid.point(i), w));
                }
            }
        }
    }
    Ok(ParticleCloud {
        dim: m.dim,
        particles,
        atom_count,
        provenance: "discretize".into(),
    })
}

fn part_mass(den: &GridDensity, part: &[f64]) -> f64 {
    (0..den.grid.len()).map(|i| part[i] * den.node_weight(i)).sum()
}

/// Equal-mass particles at the quantile midpoints of a nonnegative 1-D part.
fn quantile_particles(
    den: &GridDensity,
    part: &[f64],
    count: usize,
    sign: f64,
) -> Vec<(Vec<f64>, f64)> {
    if count == 0 {
        return vec![];
    }
    let ax = &den.grid.axes[0];
    let n = ax.n;
    // piecewise-linear CDF from trapezoid cells
    let mut cdf = vec![0.0; n];
    for i in 1..n {
        let cell = 0.5 * (part[i - 1] + part[i]) * ax.spacing();
        cdf[i] = cdf[i - 1] + cell;
    }
    let total = cdf[n - 1];
    if total <= 0.0 {
        return vec![];
    }
    let w = total / count as f64;
    let mut out = Vec::with_capacity(count);
    let mut cell = 1usize;
    for j in 0..count {
        let target = (j as f64 + 0.5) * w;
        while cell < n - 1 && cdf[cell] < target {
            cell += 1;
        }
        // invert the quadratic CDF piece linearly (cell-level accuracy)
        let lo = cdf[cell - 1];
        let hi = cdf[cell];
        let frac = if hi > lo { (target - lo) / (hi - lo) } else { 0.5 };
        let x = ax.node(cell - 1) + frac * ax.spacing();
        out.push((vec![x], sign * w));
    }
    out
}

/// How the non-concentrated remainder is re-binned after a pushforward.
#[derive(Debug, Clone)]
pub enum RebinGrid {
    /// Uniform lattice spanning the particle range with this many nodes per axis.
    Auto(usize),
    Grid(SpaceGrid),
    /// Keep no grid density (atoms plus raw particles only).
    None,
}

#[derive(Debug, Clone)]
pub struct PushForwardOptions {
    pub particles: usize,
    pub rebin: RebinGrid,
    /// Cluster detection scale as a fraction of the merge tolerance. Particles
    /// landing within this distance are numerically indistinguishable.
    pub cluster_scale_factor: f64,
}

impl Default for PushForwardOptions {
    fn default() -> Self {
        PushForwardOptions {
            particles: 200_000,
            rebin: RebinGrid::Auto(401),
            cluster_scale_factor: 1e-3,
        }
    }
}

/// Report of one pushforward, including observed signed cancellation.
#[derive(Debug, Clone)]
pub struct PushForwardResult {
    pub measure: HybridMeasure,
    /// Transported particles before re-binning (for pointwise density queries).
    pub cloud: ParticleCloud,
    /// Sum of |w| that cancelled inside merged clusters.
    pub cancelled_mass: f64,
}

/// Pushforward of a hybrid measure through a backward flow map.
///
/// Particles are transported by lattice interpolation of the map; clusters of
/// particles indistinguishable at the solver scale are merged into atoms
/// (signed weights summed — cancellation is the renormalization-failure
/// mechanism and is reported, not hidden); the remainder is re-binned.
pub fn push_forward(
    m: &HybridMeasure,
    fmap: &FlowMap,
    t: f64,
    opts: &PushForwardOptions,
) -> Result<PushForwardResult> {
    if fmap.direction != Direction::Backward {
        return Err(Error::InvalidArgument(
            "pushforward transports through the backward flow".into(),
        ));
    }
    if (fmap.anchor - t).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "flow map anchored at {} does not provide time {t}",
            fmap.anchor
        )));
    }
    let node = fmap.t_grid.nearest(0.0);
    if fmap.t_grid.node(node).abs() > 1e-9 {
        return Err(Error::InvalidArgument(
            "flow map does not contain the initial time".into(),
        ));
    }
    let cloud = discretize(m, opts.particles.max(m.atoms.len()))?;
    let mut moved: Vec<(Vec<f64>, f64, bool)> = Vec::with_capacity(cloud.particles.len());
    for (i, (x, w)) in cloud.particles.iter().enumerate() {
        let img = fmap
            .eval_interp(node, x)
            .ok_or_else(|| Error::MeasureContract("support escapes flow map range".into()))?;
        moved.push((img, *w, i < cloud.atom_count));
    }

    // Deterministic merge: sort by position, chain at the cluster scale.
    moved.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let cluster_scale = opts.cluster_scale_factor * m.merge_tol;
    let mut atoms: Vec<(Vec<f64>, f64)> = Vec::new();
    let mut loose: Vec<(Vec<f64>, f64)> = Vec::new();
    let mut cancelled = 0.0f64;

    let mut i = 0usize;
    while i < moved.len() {
        let mut j = i + 1;
        let mut from_atom = moved[i].2;
        while j < moved.len() {
            let dist: f64 = moved[j]
                .0
                .iter()
                .zip(&moved[j - 1].0)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            if dist > cluster_scale {
                break;
            }
            from_atom |= moved[j].2;
            j += 1;
        }
        let count = j - i;
        if count >= 2 || from_atom {
            // collapses into an atom
            let mut wsum = 0.0;
            let mut wabs = 0.0;
            let mut loc = vec![0.0; m.dim];
            for k in i..j {
                let wa = moved[k].1.abs();
                wsum += moved[k].1;
                wabs += wa;
                for (c, p) in loc.iter_mut().zip(&moved[k].0) {
                    *c += wa * p;
                }
            }
            if wabs > 0.0 {
                for c in loc.iter_mut() {
                    *c /= wabs;
                }
            } else {
                loc.copy_from_slice(&moved[i].0);
            }
            cancelled += wabs - wsum.abs();
            if wsum != 0.0 || from_atom {
                atoms.push((loc, wsum));
            }
        } else {
            loose.push((moved[i].0.clone(), moved[i].1));
        }
        i = j;
    }

    let mut out = HybridMeasure {
        dim: m.dim,
        atoms,
        density: None,
        merge_tol: m.merge_tol,
    };
    out.merge_close_atoms();
    out.atoms.retain(|(_, w)| *w != 0.0);

    // Re-bin the loose remainder.
    if !loose.is_empty() {
        let grid = match &opts.rebin {
            RebinGrid::Grid(g) => Some(g.clone()),
            RebinGrid::Auto(nx) => {
                let mut lo = vec![f64::INFINITY; m.dim];
                let mut hi = vec![f64::NEG_INFINITY; m.dim];
                for (x, _) in &loose {
                    for k in 0..m.dim {
                        lo[k] = lo[k].min(x[k]);
                        hi[k] = hi[k].max(x[k]);
                    }
                }
                let axes = (0..m.dim)
                    .map(|k| crate::grid::Axis {
                        min: lo[k],
                        max: hi[k] + 1e-12,
                        n: *nx,
                    })
                    .collect();
                Some(SpaceGrid { axes })
            }
            RebinGrid::None => None,
        };
        if let Some(grid) = grid {
            let mut values = vec![0.0; grid.len()];
            for (x, w) in &loose {
                // nearest-node deposit
                let mut idx = vec![0usize; m.dim];
                for k in 0..m.dim {
                    let ax = &grid.axes[k];
                    let h = ax.spacing().max(1e-300);
                    idx[k] = (((x[k] - ax.min) / h).round() as isize)
                        .clamp(0, ax.n as isize - 1) as usize;
                }
                values[grid.flat_index(&idx)] += w;
            }
            // convert node masses to density values wrt the trapezoid weights
            let den = GridDensity {
                grid: grid.clone(),
                values: vec![0.0; grid.len()],
            };
            let mut vals = vec![0.0; grid.len()];
            for i in 0..grid.len() {
                let w = den.node_weight(i);
                vals[i] = if w > 0.0 { values[i] / w } else { 0.0 };
            }
            out.density = Some(GridDensity { grid, values: vals });
        }
    }

    let transported_cloud = ParticleCloud {
        dim: m.dim,
        particles: moved.into_iter().map(|(x, w, _)| (x, w)).collect(),
        atom_count: cloud.atom_count,
        provenance: format!("pushforward@t={t}"),
    };

    Ok(PushForwardResult {
        measure: out,
        cloud: transported_cloud,
        cancelled_mass: cancelled,
    })
}

/// Local density of a (sorted or unsorted) signed particle cloud at `x`,
/// estimated as the slope of a least-squares quadratic fit to the cumulative
/// weight function over `[x - window, x + window]`. 1-D only.
pub fn particle_density_at(cloud: &ParticleCloud, x: f64, window: f64) -> f64 {
    debug_assert_eq!(cloud.dim, 1);
    let mut pts: Vec<(f64, f64)> = cloud
        .particles
        .iter()
        .map(|(p, w)| (p[0], *w))
        .collect();
    pts.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    // cumulative weight at particle midpoints
    let mut cum = 0.0;
    let mut fit: Vec<(f64, f64)> = Vec::new();
    for (p, w) in &pts {
        cum += w;
        if (p - x).abs() <= window {
            fit.push((p - x, cum - 0.5 * w));
        }
    }
    if fit.len() < 3 {
        return 0.0;
    }
    // least squares for c0 + c1 u + c2 u^2: density = c1
    let n = fit.len() as f64;
    let (mut s1, mut s2, mut s3, mut s4) = (0.0, 0.0, 0.0, 0.0);
    let (mut b0, mut b1, mut b2) = (0.0, 0.0, 0.0);
    for (u, v) in &fit {
        s1 += u;
        s2 += u * u;
        s3 += u * u * u;
        s4 += u * u * u * u;
        b0 += v;
        b1 += u * v;
        b2 += u * u * v;
    }
    // solve 3x3 normal equations
    let a = [[n, s1, s2], [s1, s2, s3], [s2, s3, s4]];
    let b = [b0, b1, b2];
    solve3(a, b)[1]
}

fn solve3(mut a: [[f64; 3]; 3], mut b: [f64; 3]) -> [f64; 3] {
    for k in 0..3 {
        let piv = (k..3).max_by(|&i, &j| a[i][k].abs().partial_cmp(&a[j][k].abs()).unwrap()).unwrap();
        a.swap(k, piv);
        b.swap(k, piv);
        if a[k][k].abs() < 1e-300 {
            return [0.0; 3];
        }
        for i in (k + 1)..3 {
            let f = a[i][k] / a[k][k];
            for j in k..3 {
                a[i][j] -= f * a[k][j];
            }
            b[i] -= f * b[k];
        }
    }
    let mut x = [0.0; 3];
    for k in (0..3).rev() {
        let mut acc = b[k];
        for j in (k + 1)..3 {
            acc -= a[k][j] * x[j];
        }
        x[k] = acc / a[k][k];
    }
    x
}

/// p-Wasserstein distance between nonnegative unit-mass hybrid measures.
///
/// 1-D: exact quantile coupling (exact segment enumeration for atoms, fine
/// quantile sampling when densities are present). d >= 2: exact transportation
/// simplex on atomic measures with at most 64 atoms per side.
pub fn wasserstein(mu: &HybridMeasure, nu: &HybridMeasure, p: f64) -> Result<f64> {
    for (name, m) in [("mu", mu), ("nu", nu)] {
        if !m.is_nonnegative() {
            return Err(Error::MeasureContract(format!("{name} must be nonnegative")));
        }
        if (m.total_mass() - 1.0).abs() > 1e-9 {
            return Err(Error::MeasureContract(format!(
                "{name} must have unit mass (got {})",
                m.total_mass()
            )));
        }
    }
    if p < 1.0 {
        return Err(Error::InvalidArgument("need p >= 1".into()));
    }
    if mu.dim == 1 {
        return Ok(wasserstein_1d(mu, nu, p));
    }
    if mu.density.is_some() || nu.density.is_some() {
        return Err(Error::MeasureContract(
            "d >= 2 transport needs atomic measures".into(),
        ));
    }
    if mu.atoms.len() > 64 || nu.atoms.len() > 64 {
        return Err(Error::MeasureContract(
            "d >= 2 transport limited to 64 atoms per side".into(),
        ));
    }
    let cost = transport_simplex(
        &mu.atoms,
        &nu.atoms,
        |x, y| {
            let d2: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
            d2.sqrt().powf(p)
        },
    )?;
    Ok(cost.powf(1.0 / p))
}

/// Quantile function of a 1-D hybrid measure as a piecewise list of
/// (cumulative level, position) knots; atoms become flat level jumps.
fn quantile_knots(m: &HybridMeasure, samples_per_cell: usize) -> Vec<(f64, f64)> {
    // Collect (position, mass) contributions in position order.
    let mut contributions: Vec<(f64, f64)> = m
        .atoms
        .iter()
        .map(|(x, w)| (x[0], *w))
        .collect();
    if let Some(den) = &m.density {
        let ax = &den.grid.axes[0];
        for i in 1..ax.n {
            let cell_mass = 0.5 * (den.values[i - 1] + den.values[i]) * ax.spacing();
            if cell_mass <= 0.0 {
                continue;
            }
            let k = samples_per_cell.max(1);
            for j in 0..k {
                let x = ax.node(i - 1) + (j as f64 + 0.5) / k as f64 * ax.spacing();
                contributions.push((x, cell_mass / k as f64));
            }
        }
    }
    contributions.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let mut knots = Vec::with_capacity(contributions.len() + 1);
    let mut level = 0.0;
    for (x, w) in contributions {
        knots.push((level, x));
        level += w;
        knots.push((level, x));
    }
    knots
}

fn quantile_at(knots: &[(f64, f64)], u: f64) -> f64 {
    // first knot with level >= u
    let idx = knots.partition_point(|(l, _)| *l < u);
    if idx == 0 {
        knots[0].1
    } else if idx >= knots.len() {
        knots[knots.len() - 1].1
    } else {
        knots[idx].1
    }
}

fn wasserstein_1d(mu: &HybridMeasure, nu: &HybridMeasure, p: f64) -> f64 {
    let purely_atomic = mu.density.is_none() && nu.density.is_none();
    let spc = if purely_atomic { 1 } else { 64 };
    let qa = quantile_knots(mu, spc);
    let qb = quantile_knots(nu, spc);
    // union of jump levels
    let mut levels: Vec<f64> = qa.iter().chain(qb.iter()).map(|(l, _)| *l).collect();
    levels.push(0.0);
    levels.push(1.0);
    levels.sort_by(|a, b| a.partial_cmp(b).unwrap());
    levels.dedup_by(|a, b| (*a - *b).abs() < 1e-15);
    let mut acc = 0.0;
    for w in levels.windows(2) {
        let (lo, hi) = (w[0].max(0.0), w[1].min(1.0));
        if hi <= lo {
            continue;
        }
        if purely_atomic {
            let mid = 0.5 * (lo + hi);
            let d = (quantile_at(&qa, mid) - quantile_at(&qb, mid)).abs();
            acc += d.powf(p) * (hi - lo);
        } else {
            // sub-sample the segment: quantiles vary inside density stretches
            let k = 8;
            for j in 0..k {
                let u = lo + (j as f64 + 0.5) / k as f64 * (hi - lo);
                let d = (quantile_at(&qa, u) - quantile_at(&qb, u)).abs();
                acc += d.powf(p) * (hi - lo) / k as f64;
            }
        }
    }
    acc.powf(1.0 / p)
}

/// Exact transportation simplex (u-v method) for small weighted bipartite
/// optimal transport. Returns the optimal total cost.
pub fn transport_simplex(
    supply: &[(Vec<f64>, f64)],
    demand: &[(Vec<f64>, f64)],
    cost: impl Fn(&[f64], &[f64]) -> f64,
) -> Result<f64> {
    let n = supply.len();
    let m = demand.len();
    if n == 0 || m == 0 {
        return Err(Error::MeasureContract("empty support".into()));
    }
    let c: Vec<f64> = (0..n * m)
        .map(|k| cost(&supply[k / m].0, &demand[k % m].0))
        .collect();
    let mut a: Vec<f64> = supply.iter().map(|(_, w)| *w).collect();
    let mut b: Vec<f64> = demand.iter().map(|(_, w)| *w).collect();

    // Northwest-corner initial basis.
    let mut flow = vec![0.0f64; n * m];
    let mut basis = vec![false; n * m];
    let (mut i, mut j) = (0usize, 0usize);
    while i < n && j < m {
        let q = a[i].min(b[j]);
        flow[i * m + j] = q;
        basis[i * m + j] = true;
        a[i] -= q;
        b[j] -= q;
        if a[i] <= b[j] && i + 1 < n {
            i += 1;
        } else if j + 1 < m {
            j += 1;
        } else {
            break;
        }
    }
    // ensure spanning-tree size n + m - 1 (degenerate zeros allowed)
    let mut basis_count = basis.iter().filter(|x| **x).count();
    'fill: while basis_count < n + m - 1 {
        for k in 0..n * m {
            if !basis[k] {
                basis[k] = true;
                if has_cycle(&basis, n, m, k) {
                    basis[k] = false;
                } else {
                    basis_count += 1;
                    continue 'fill;
                }
            }
        }
        break;
    }

    for _round in 0..10_000 {
        // potentials from the basis tree
        let mut u = vec![f64::NAN; n];
        let mut v = vec![f64::NAN; m];
        u[0] = 0.0;
        let mut changed = true;
        while changed {
            changed = false;
            for k in 0..n * m {
                if !basis[k] {
                    continue;
                }
                let (i, j) = (k / m, k % m);
                if u[i].is_nan() && !v[j].is_nan() {
                    u[i] = c[k] - v[j];
                    changed = true;
                } else if !u[i].is_nan() && v[j].is_nan() {
                    v[j] = c[k] - u[i];
                    changed = true;
                }
            }
        }
        // entering cell: first sufficiently negative reduced cost (Bland-like)
        let mut enter = None;
        let mut best = -1e-12;
        for k in 0..n * m {
            if basis[k] || u[k / m].is_nan() || v[k % m].is_nan() {
                continue;
            }
            let rc = c[k] - u[k / m] - v[k % m];
            if rc < best {
                best = rc;
                enter = Some(k);
            }
        }
        let Some(ke) = enter else {
            break;
        };
        // find the unique cycle created by adding ke
        let cycle = find_cycle(&basis, n, m, ke);
        // minimum flow on the odd (leaving) positions
        let mut theta = f64::INFINITY;
        let mut leave = ke;
        for (pos, &cell) in cycle.iter().enumerate() {
            if pos % 2 == 1 && flow[cell] < theta {
                theta = flow[cell];
                leave = cell;
            }
        }
        for (pos, &cell) in cycle.iter().enumerate() {
            if pos % 2 == 0 {
                flow[cell] += theta;
            } else {
                flow[cell] -= theta;
            }
        }
        basis[ke] = true;
        basis[leave] = false;
        flow[leave] = 0.0;
    }
    Ok(flow.iter().zip(&c).map(|(f, c)| f * c).sum())
}

/// Whether adding cell `extra` to the basis creates a cycle.
fn has_cycle(basis: &[bool], n: usize, m: usize, extra: usize) -> bool {
    !find_cycle(basis, n, m, extra).is_empty()
}

/// Cycle through `extra` in the bipartite basis graph, as an alternating cell
/// list starting at `extra`; empty when no cycle exists.
fn find_cycle(basis: &[bool], n: usize, m: usize, extra: usize) -> Vec<usize> {
    // nodes: rows 0..n, cols n..n+m; edges = basis cells + extra
    let mut adj: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n + m];
    for k in 0..n * m {
        if basis[k] || k == extra {
            let (i, j) = (k / m, k % m);
            adj[i].push((n + j, k));
            adj[n + j].push((i, k));
        }
    }
    // DFS from one endpoint of extra to the other, not using extra itself.
    let (si, sj) = (extra / m, n + extra % m);
    let mut stack = vec![(si, usize::MAX)];
    let mut parent_edge: Vec<usize> = vec![usize::MAX; n + m];
    let mut parent_node: Vec<usize> = vec![usize::MAX; n + m];
    let mut seen = vec![false; n + m];
    seen[si] = true;
    while let Some((node, via)) = stack.pop() {
        for &(next, cell) in &adj[node] {
            if cell == extra || cell == via || seen[next] {
                continue;
            }
            seen[next] = true;
            parent_edge[next] = cell;
            parent_node[next] = node;
            stack.push((next, cell));
        }
    }
    if !seen[sj] {
        return vec![];
    }
    // walk back from sj to si, collecting cells; prepend extra
    let mut cells = vec![extra];
    let mut node = sj;
    while node != si {
        cells.push(parent_edge[node]);
        node = parent_node[node];
    }
    cells
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::VelocityField;
    use crate::flow::{backward_flow, FlowOptions};
    use crate::grid::TimeGrid;

    fn atom1(x: f64, w: f64) -> (Vec<f64>, f64) {
        (vec![x], w)
    }

    #[test]
    fn discretize_examples() {
        // two signed atoms
        let m = HybridMeasure::from_atoms(1, vec![atom1(1.0, 0.5), atom1(-1.0, -0.5)], 4.0);
        let c = discretize(&m, 2).unwrap();
        assert_eq!(c.particles.len(), 2);
        assert!((c.total_mass() - 0.0).abs() < 1e-15);

        // uniform density on [0,1] with n = 4: quantile midpoints 1/8, 3/8, 5/8, 7/8
        let g = SpaceGrid::line(0.0, 1.0, 101).unwrap();
        let m = HybridMeasure::from_density(g, vec![1.0; 101]);
        let c = discretize(&m, 4).unwrap();
        assert_eq!(c.particles.len(), 4);
        for (k, (x, w)) in c.particles.iter().enumerate() {
            assert!((x[0] - (0.125 + 0.25 * k as f64)).abs() < 5e-3, "x={}", x[0]);
            assert!((w - 0.25).abs() < 1e-12);
        }

        // atom weight preserved exactly in a mixed measure
        let g = SpaceGrid::line(0.0, 1.0, 51).unwrap();
        let mut m = HybridMeasure::from_density(g, vec![1.0; 51]);
        m.atoms.push(atom1(2.0, 0.25));
        let c = discretize(&m, 100).unwrap();
        assert_eq!(c.particles[0], (vec![2.0], 0.25));
        assert!((c.total_mass() - 1.25).abs() < 1e-12);
    }

    #[test]
    fn discretize_budget_error() {
        let m = HybridMeasure::from_atoms(1, vec![atom1(0.0, 1.0), atom1(1.0, 1.0)], 2.0);
        assert!(discretize(&m, 1).is_err());
    }

    #[test]
    fn pushforward_cancellation_sgn() {
        let f = VelocityField::catalog("sgn", &[], 1, 2.0).unwrap();
        let xg = SpaceGrid::line(-2.0, 2.0, 801).unwrap();
        let t = 1.5;
        let fm = backward_flow(
            &f,
            t,
            &TimeGrid::new(0.0, t, 2).unwrap(),
            &xg,
            &FlowOptions::with_dt(1e-3),
        )
        .unwrap();
        // f0 = 1/2 d_1 - 1/2 d_{-1}: cancels at the origin for t >= 1
        let m = HybridMeasure::from_atoms(1, vec![atom1(1.0, 0.5), atom1(-1.0, -0.5)], 4.0);
        let out = push_forward(&m, &fm, t, &PushForwardOptions::default()).unwrap();
        assert_eq!(out.measure.total_variation(), 0.0);
        assert!((out.cancelled_mass - 1.0).abs() < 1e-12);

        // |f0| concentrates into a unit atom at the origin
        let m = HybridMeasure::from_atoms(1, vec![atom1(1.0, 0.5), atom1(-1.0, 0.5)], 4.0);
        let out = push_forward(&m, &fm, t, &PushForwardOptions::default()).unwrap();
        assert_eq!(out.measure.atoms.len(), 1);
        assert_eq!(out.measure.atoms[0].1, 1.0);
        assert!(out.measure.atoms[0].0[0].abs() < 1e-6);
    }

    #[test]
    fn pushforward_zero_field_keeps_measure() {
        let f = VelocityField::catalog("zero", &[], 1, 1.0).unwrap();
        let xg = SpaceGrid::line(-2.0, 2.0, 201).unwrap();
        let fm = backward_flow(
            &f,
            1.0,
            &TimeGrid::new(0.0, 1.0, 2).unwrap(),
            &xg,
            &FlowOptions::default(),
        )
        .unwrap();
        let m = HybridMeasure::from_atoms(1, vec![atom1(0.25, 1.0)], 4.0);
        let out = push_forward(&m, &fm, 1.0, &PushForwardOptions::default()).unwrap();
        assert_eq!(out.measure.atoms.len(), 1);
        assert!((out.measure.atoms[0].0[0] - 0.25).abs() < 1e-12);
        assert_eq!(out.measure.atoms[0].1, 1.0);
    }

    #[test]
    fn pair_examples() {
        let m = HybridMeasure::from_atoms(1, vec![atom1(0.0, 1.0)], 2.0);
        assert_eq!(m.pair(|_| 1.0), 1.0);
        let t: f64 = 0.5;
        let m = HybridMeasure::from_atoms(1, vec![atom1(0.0, 4.0 * t.powi(3) / 3.0)], 2.0);
        assert!((m.pair(|_| 1.0) - 1.0 / 6.0).abs() < 1e-15);
        let z = HybridMeasure::zero(1);
        assert_eq!(z.pair(|_| 1.0), 0.0);
    }

    #[test]
    fn wasserstein_examples() {
        let d0 = HybridMeasure::from_atoms(1, vec![atom1(0.0, 1.0)], 2.0);
        let d1 = HybridMeasure::from_atoms(1, vec![atom1(1.0, 1.0)], 2.0);
        for p in [1.0, 2.0, 3.0] {
            assert!((wasserstein(&d0, &d1, p).unwrap() - 1.0).abs() < 1e-12);
        }
        assert_eq!(wasserstein(&d0, &d0, 1.0).unwrap(), 0.0);

        // atoms transported under the sgn flow at t = 0.25: positions +-0.75
        let a = HybridMeasure::from_atoms(1, vec![atom1(0.75, 1.0)], 2.0);
        let b = HybridMeasure::from_atoms(1, vec![atom1(-0.75, 1.0)], 2.0);
        assert!((wasserstein(&a, &b, 1.0).unwrap() - 1.5).abs() < 1e-12);
    }

    #[test]
    fn wasserstein_rejects_bad_inputs() {
        let d0 = HybridMeasure::from_atoms(1, vec![atom1(0.0, 1.0)], 2.0);
        let signed = HybridMeasure::from_atoms(1, vec![atom1(0.0, 2.0), atom1(1.0, -1.0)], 2.0);
        assert!(wasserstein(&d0, &signed, 1.0).is_err());
        let heavy = HybridMeasure::from_atoms(1, vec![atom1(0.0, 2.0)], 2.0);
        assert!(wasserstein(&d0, &heavy, 1.0).is_err());
    }

    #[test]
    fn wasserstein_1d_matches_sorted_matching() {
        // brute-force oracle: expand rational weights into equal-mass unit
        // atoms; in 1-D the sorted pairing is optimal.
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        for _case in 0..50 {
            let denom = 16u32;
            let n_a = rng.gen_range(1..=8);
            let n_b = rng.gen_range(1..=8);
            let mut wa = split_units(denom, n_a, &mut rng);
            let mut wb = split_units(denom, n_b, &mut rng);
            let xa: Vec<f64> = (0..n_a).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let xb: Vec<f64> = (0..n_b).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let mu = HybridMeasure::from_atoms(
                1,
                xa.iter().zip(&wa).map(|(x, w)| atom1(*x, *w as f64 / denom as f64)).collect(),
                8.0,
            );
            let nu = HybridMeasure::from_atoms(
                1,
                xb.iter().zip(&wb).map(|(x, w)| atom1(*x, *w as f64 / denom as f64)).collect(),
                8.0,
            );
            for p in [1.0, 2.0] {
                let got = wasserstein(&mu, &nu, p).unwrap();
                // oracle
                let mut ua: Vec<f64> = Vec::new();
                for (x, w) in xa.iter().zip(&wa) {
                    ua.extend(std::iter::repeat(*x).take(*w as usize));
                }
                let mut ub: Vec<f64> = Vec::new();
                for (x, w) in xb.iter().zip(&wb) {
                    ub.extend(std::iter::repeat(*x).take(*w as usize));
                }
                ua.sort_by(|a, b| a.partial_cmp(b).unwrap());
                ub.sort_by(|a, b| a.partial_cmp(b).unwrap());
                let exact: f64 = (ua
                    .iter()
                    .zip(&ub)
                    .map(|(a, b)| (a - b).abs().powf(p))
                    .sum::<f64>()
                    / denom as f64)
                    .powf(1.0 / p);
                assert!(
                    (got - exact).abs() < 1e-9,
                    "p={p}: got {got}, exact {exact}"
                );
            }
            wa.clear();
            wb.clear();
        }

        fn split_units(total: u32, parts: usize, rng: &mut impl rand::Rng) -> Vec<u32> {
            let mut w = vec![1u32; parts];
            let mut rem = total - parts as u32;
            for _ in 0..rem {
                let k = rng.gen_range(0..parts);
                w[k] += 1;
            }
            rem = 0;
            let _ = rem;
            w
        }
    }

    #[test]
    fn transport_simplex_agrees_with_1d() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let n = rng.gen_range(2..=6);
            let m = rng.gen_range(2..=6);
            let mut mk = |count: usize| -> Vec<(Vec<f64>, f64)> {
                let raw: Vec<f64> = (0..count).map(|_| rng.gen_range(0.1..1.0)).collect();
                let total: f64 = raw.iter().sum();
                raw.into_iter()
                    .map(|w| (vec![rng.gen_range(-2.0..2.0)], w / total))
                    .collect()
            };
            let sa = mk(n);
            let sb = mk(m);
            let mu = HybridMeasure::from_atoms(1, sa.clone(), 4.0);
            let nu = HybridMeasure::from_atoms(1, sb.clone(), 4.0);
            let w1 = wasserstein(&mu, &nu, 1.0).unwrap();
            let simplex = transport_simplex(&mu.atoms, &nu.atoms, |x, y| (x[0] - y[0]).abs())
                .unwrap();
            assert!((w1 - simplex).abs() < 1e-9, "quantile {w1} vs simplex {simplex}");
        }
    }

    #[test]
    fn tv_nonincreasing_under_pushforward() {
        let f = VelocityField::catalog("sgn", &[], 1, 1.0).unwrap();
        let xg = SpaceGrid::line(-2.0, 2.0, 401).unwrap();
        let t = 0.6;
        let fm = backward_flow(
            &f,
            t,
            &TimeGrid::new(0.0, t, 2).unwrap(),
            &xg,
            &FlowOptions::with_dt(1e-3),
        )
        .unwrap();
        let g = SpaceGrid::line(-1.0, 1.0, 201).unwrap();
        let vals: Vec<f64> = g.points().iter().map(|p| p[0].signum() * (1.0 - p[0].abs())).collect();
        let m = HybridMeasure::from_density(g, vals);
        let tv0 = m.total_variation();
        let out = push_forward(&m, &fm, t, &PushForwardOptions::default()).unwrap();
        assert!(out.measure.total_variation() <= tv0 + 1e-9);
        // mass is transported, never rescaled
        assert!((out.measure.total_mass() - m.total_mass()).abs() < 1e-9);
    }
}
