//! One-sided Lipschitz velocity fields: catalog, regularization, envelopes, audits.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};

/// Nonnegative piecewise-constant rate on `[0, T]`.
///
/// `values[i]` holds on `[breaks[i-1], breaks[i])` with implicit endpoints 0 and T,
/// so `breaks.len() + 1 == values.len()`. Integrals are exact.
#[derive(Debug, Clone, PartialEq)]
pub struct StepFn {
    pub breaks: Vec<f64>,
    pub values: Vec<f64>,
    pub horizon: f64,
}

impl StepFn {
    pub fn constant(v: f64, horizon: f64) -> Self {
        StepFn {
            breaks: vec![],
            values: vec![v],
            horizon,
        }
    }

    pub fn new(breaks: Vec<f64>, values: Vec<f64>, horizon: f64) -> Result<Self> {
        if values.len() != breaks.len() + 1 {
            return Err(Error::InvalidArgument(
                "step function needs one more value than breakpoints".into(),
            ));
        }
        if breaks.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidArgument("breakpoints must increase".into()));
        }
        if values.iter().any(|v| *v < 0.0 || !v.is_finite()) {
            return Err(Error::InvalidArgument("rates must be finite and >= 0".into()));
        }
        Ok(StepFn {
            breaks,
            values,
            horizon,
        })
    }

    pub fn eval(&self, t: f64) -> f64 {
        let k = self.breaks.partition_point(|&b| b <= t);
        self.values[k]
    }

    /// Exact integral over `[a, b]` (clamped to `[0, horizon]`, orientation-normalized).
    pub fn integral(&self, a: f64, b: f64) -> f64 {
        let (a, b) = if a <= b { (a, b) } else { (b, a) };
        let a = a.max(0.0);
        let b = b.min(self.horizon).max(a);
        let mut total = 0.0;
        let mut lo = a;
        for (i, &brk) in self.breaks.iter().enumerate() {
            if brk <= a {
                continue;
            }
            if brk >= b {
                total += self.values[i] * (b - lo);
                return total;
            }
            total += self.values[i] * (brk - lo);
            lo = brk;
        }
        total += self.values[self.values.len() - 1] * (b - lo);
        total
    }

    pub fn max_value(&self) -> f64 {
        self.values.iter().cloned().fold(0.0, f64::max)
    }
}

/// Growth and one-sided Lipschitz rates of a field on `[0, T]`.
#[derive(Debug, Clone, PartialEq)]
pub struct OslConstants {
    /// Growth rate: |b(t,x)| <= c0(t) (1 + |x|).
    pub c0: StepFn,
    /// One-sided Lipschitz rate: (b(t,x)-b(t,y)).(x-y) >= -c1(t) |x-y|^2.
    pub c1: StepFn,
    pub horizon: f64,
}

impl OslConstants {
    pub fn constant(c0: f64, c1: f64, horizon: f64) -> Self {
        OslConstants {
            c0: StepFn::constant(c0, horizon),
            c1: StepFn::constant(c1, horizon),
            horizon,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Smoothness {
    Smooth,
    Continuous,
    Discontinuous,
}

impl fmt::Display for Smoothness {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Smoothness::Smooth => write!(f, "smooth"),
            Smoothness::Continuous => write!(f, "continuous"),
            Smoothness::Discontinuous => write!(f, "discontinuous"),
        }
    }
}

type EvalFn = dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync;
/// Map (start time, target time, point) -> point; used for closed-form flows.
type FlowFn = dyn Fn(f64, f64, &[f64]) -> Vec<f64> + Send + Sync;
type JacFn = dyn Fn(f64, f64, &[f64]) -> f64 + Send + Sync;
type EnvFn = dyn Fn(f64, &[f64], &[f64]) -> (f64, f64) + Send + Sync;

/// Closed-form reference maps attached to catalog entries.
#[derive(Clone, Default)]
pub struct AnalyticOracles {
    /// Backward flow phi_{t,s}, t <= s (second argument is the start time s).
    pub backward_flow: Option<Arc<FlowFn>>,
    /// Forward flow phi_{t,s}, t >= s.
    pub forward_flow: Option<Arc<FlowFn>>,
    /// Backward Jacobian det grad phi_{t,s}.
    pub backward_jacobian: Option<Arc<JacFn>>,
    /// Spatial divergence of b, where defined pointwise.
    pub divergence: Option<Arc<dyn Fn(f64, &[f64]) -> f64 + Send + Sync>>,
    /// Exact (lower, upper) directional envelopes of z -> b(t,z).p at x.
    pub envelopes: Option<Arc<EnvFn>>,
}

/// An evaluable velocity field `b(t, x)` with its one-sided Lipschitz data.
#[derive(Clone)]
pub struct VelocityField {
    pub dim: usize,
    pub constants: OslConstants,
    pub smoothness: Smoothness,
    pub name: String,
    eval: Arc<EvalFn>,
    pub oracles: AnalyticOracles,
}

impl fmt::Debug for VelocityField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("VelocityField")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .field("smoothness", &self.smoothness)
            .finish()
    }
}

impl VelocityField {
    pub fn new(
        name: impl Into<String>,
        dim: usize,
        constants: OslConstants,
        smoothness: Smoothness,
        eval: Arc<EvalFn>,
    ) -> Self {
        VelocityField {
            dim,
            constants,
            smoothness,
            name: name.into(),
            eval,
            oracles: AnalyticOracles::default(),
        }
    }

    pub fn eval_into(&self, t: f64, x: &[f64], out: &mut [f64]) {
        (self.eval)(t, x, out);
    }

    pub fn eval(&self, t: f64, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        (self.eval)(t, x, &mut out);
        out
    }

    /// Scalar convenience for 1-D fields.
    pub fn eval1(&self, t: f64, x: f64) -> f64 {
        debug_assert_eq!(self.dim, 1);
        let mut out = [0.0];
        (self.eval)(t, &[x], &mut out);
        out[0]
    }

    pub fn horizon(&self) -> f64 {
        self.constants.horizon
    }

    /// Catalog of fields used throughout the test problems.
    ///
    /// Closed-form flows and Jacobians are attached where available:
    /// - `"sgn"`: b(x) = sgn x
    /// - `"powerlaw"` [alpha]: b(x) = 2 sgn x |x|^alpha, 0 < alpha < 1
    /// - `"holder"` [alpha]: b(x) = sgn x |x|^alpha, 0 < alpha < 1
    /// - `"linear"` [a]: b(x) = a x (componentwise)
    /// - `"zero"`: b = 0
    pub fn catalog(name: &str, params: &[f64], dim: usize, horizon: f64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("dimension must be >= 1".into()));
        }
        match name {
            "sgn" => {
                if !params.is_empty() {
                    return Err(Error::InvalidCatalogParams {
                        name: name.into(),
                        reason: "takes no parameters".into(),
                    });
                }
                let mut f = VelocityField::new(
                    "sgn",
                    dim,
                    OslConstants::constant(1.0, 0.0, horizon),
                    Smoothness::Discontinuous,
                    Arc::new(|_t, x: &[f64], out: &mut [f64]| {
                        for (o, &xi) in out.iter_mut().zip(x) {
                            *o = sgn(xi);
                        }
                    }),
                );
                f.oracles.backward_flow = Some(Arc::new(|t, s, x: &[f64]| {
                    let gap = s - t;
                    x.iter()
                        .map(|&xi| sgn(xi) * (xi.abs() - gap).max(0.0))
                        .collect()
                }));
                f.oracles.forward_flow = Some(Arc::new(|t, s, x: &[f64]| {
                    let gap = t - s;
                    x.iter().map(|&xi| xi + sgn(xi) * gap).collect()
                }));
                if dim == 1 {
                    f.oracles.backward_jacobian = Some(Arc::new(|t, s, x: &[f64]| {
                        if x[0].abs() >= s - t {
                            1.0
                        } else {
                            0.0
                        }
                    }));
                }
                f.oracles.envelopes = Some(Arc::new(|_t, x: &[f64], p: &[f64]| {
                    // Limit set of b near x: product of {sgn xi} ({-1,1} at xi = 0).
                    let mut lo = 0.0;
                    let mut hi = 0.0;
                    for (xi, pi) in x.iter().zip(p) {
                        if *xi == 0.0 {
                            lo += -pi.abs();
                            hi += pi.abs();
                        } else {
                            lo += sgn(*xi) * pi;
                            hi += sgn(*xi) * pi;
                        }
                    }
                    (lo, hi)
                }));
                Ok(f)
            }
            "powerlaw" | "holder" => {
                if params.len() != 1 {
                    return Err(Error::InvalidCatalogParams {
                        name: name.into(),
                        reason: "expects [alpha]".into(),
                    });
                }
                let alpha = params[0];
                if !(0.0 < alpha && alpha < 1.0) {
                    return Err(Error::InvalidCatalogParams {
                        name: name.into(),
                        reason: format!("alpha={alpha} must satisfy 0 < alpha < 1"),
                    });
                }
                let coef = if name == "powerlaw" { 2.0 } else { 1.0 };
                let mut f = VelocityField::new(
                    format!("{name}({alpha})"),
                    dim,
                    OslConstants::constant(coef, 0.0, horizon),
                    Smoothness::Continuous,
                    Arc::new(move |_t, x: &[f64], out: &mut [f64]| {
                        for (o, &xi) in out.iter_mut().zip(x) {
                            *o = coef * sgn(xi) * xi.abs().powf(alpha);
                        }
                    }),
                );
                // d|x|^(1-alpha)/dt = coef (1-alpha) along trajectories.
                let speed = coef * (1.0 - alpha);
                let inv = 1.0 / (1.0 - alpha);
                f.oracles.backward_flow = Some(Arc::new(move |t, s, x: &[f64]| {
                    let gap = s - t;
                    x.iter()
                        .map(|&xi| {
                            let r = (xi.abs().powf(1.0 - alpha) - speed * gap).max(0.0);
                            sgn(xi) * r.powf(inv)
                        })
                        .collect()
                }));
                f.oracles.forward_flow = Some(Arc::new(move |t, s, x: &[f64]| {
                    let gap = t - s;
                    x.iter()
                        .map(|&xi| {
                            let r = xi.abs().powf(1.0 - alpha) + speed * gap;
                            sgn(xi) * r.powf(inv)
                        })
                        .collect()
                }));
                if dim == 1 {
                    f.oracles.backward_jacobian = Some(Arc::new(move |t, s, x: &[f64]| {
                        let gap = s - t;
                        let r = x[0].abs().powf(1.0 - alpha) - speed * gap;
                        if r <= 0.0 {
                            0.0
                        } else {
                            // d/dx of sgn(x) r^inv with r = |x|^(1-alpha) - speed*gap.
                            r.powf(inv - 1.0) * x[0].abs().powf(-alpha)
                        }
                    }));
                }
                f.oracles.envelopes = Some(Arc::new(move |_t, x: &[f64], p: &[f64]| {
                    let v: f64 = x
                        .iter()
                        .zip(p)
                        .map(|(&xi, &pi)| coef * sgn(xi) * xi.abs().powf(alpha) * pi)
                        .sum();
                    (v, v)
                }));
                Ok(f)
            }
            "linear" => {
                if params.len() != 1 {
                    return Err(Error::InvalidCatalogParams {
                        name: name.into(),
                        reason: "expects [a]".into(),
                    });
                }
                let a = params[0];
                let mut f = VelocityField::new(
                    format!("linear({a})"),
                    dim,
                    OslConstants::constant(a.abs(), (-a).max(0.0), horizon),
                    Smoothness::Smooth,
                    Arc::new(move |_t, x: &[f64], out: &mut [f64]| {
                        for (o, &xi) in out.iter_mut().zip(x) {
                            *o = a * xi;
                        }
                    }),
                );
                f.oracles.backward_flow = Some(Arc::new(move |t, s, x: &[f64]| {
                    let g = (a * (t - s)).exp();
                    x.iter().map(|&xi| xi * g).collect()
                }));
                f.oracles.forward_flow = Some(Arc::new(move |t, s, x: &[f64]| {
                    let g = (a * (t - s)).exp();
                    x.iter().map(|&xi| xi * g).collect()
                }));
                f.oracles.backward_jacobian =
                    Some(Arc::new(move |t, s, x: &[f64]| (a * (t - s) * x.len() as f64).exp()));
                f.oracles.divergence = Some(Arc::new(move |_t, x: &[f64]| a * x.len() as f64));
                f.oracles.envelopes = Some(Arc::new(move |_t, x: &[f64], p: &[f64]| {
                    let v: f64 = x.iter().zip(p).map(|(&xi, &pi)| a * xi * pi).sum();
                    (v, v)
                }));
                Ok(f)
            }
            "zero" => {
                if !params.is_empty() {
                    return Err(Error::InvalidCatalogParams {
                        name: name.into(),
                        reason: "takes no parameters".into(),
                    });
                }
                let mut f = VelocityField::new(
                    "zero",
                    dim,
                    OslConstants::constant(0.0, 0.0, horizon),
                    Smoothness::Smooth,
                    Arc::new(|_t, _x: &[f64], out: &mut [f64]| out.fill(0.0)),
                );
                f.oracles.backward_flow = Some(Arc::new(|_t, _s, x: &[f64]| x.to_vec()));
                f.oracles.forward_flow = Some(Arc::new(|_t, _s, x: &[f64]| x.to_vec()));
                f.oracles.backward_jacobian = Some(Arc::new(|_t, _s, _x: &[f64]| 1.0));
                f.oracles.divergence = Some(Arc::new(|_t, _x: &[f64]| 0.0));
                f.oracles.envelopes = Some(Arc::new(|_t, _x: &[f64], _p: &[f64]| (0.0, 0.0)));
                Ok(f)
            }
            other => Err(Error::UnknownCatalogField(other.into())),
        }
    }

    /// Lower/upper envelopes of `z -> b(t,z).p` as `z -> x`.
    ///
    /// Uses the attached exact oracle when present; otherwise samples shrinking
    /// shells of radius `r0 * 2^-k`, k = 0..=20.
    pub fn envelope(&self, t: f64, x: &[f64], p: &[f64], r0: f64) -> (f64, f64) {
        if let Some(env) = &self.oracles.envelopes {
            return env(t, x, p);
        }
        if self.smoothness != Smoothness::Discontinuous {
            let v: f64 = self.eval(t, x).iter().zip(p).map(|(b, q)| b * q).sum();
            return (v, v);
        }
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        let mut z = x.to_vec();
        // Deterministic shell samples: +-r along axes and the 2^d diagonal corners.
        for k in 0..=20 {
            let r = r0 * 0.5f64.powi(k);
            let mut probe = |z: &[f64]| {
                let v: f64 = self.eval(t, z).iter().zip(p).map(|(b, q)| b * q).sum();
                lo = lo.min(v);
                hi = hi.max(v);
            };
            for axis in 0..self.dim {
                for s in [-1.0, 1.0] {
                    z.copy_from_slice(x);
                    z[axis] += s * r;
                    probe(&z);
                }
            }
            if self.dim > 1 && self.dim <= 8 {
                for mask in 0..(1usize << self.dim) {
                    z.copy_from_slice(x);
                    for (axis, zi) in z.iter_mut().enumerate() {
                        let s = if mask >> axis & 1 == 1 { 1.0 } else { -1.0 };
                        *zi += s * r / (self.dim as f64).sqrt();
                    }
                    probe(&z);
                }
            }
        }
        (lo, hi)
    }
}

pub fn sgn(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

// Nodes/weights of the 8-point Gauss-Legendre rule on [-1, 1].
const GL8_NODES: [f64; 8] = [
    -0.960_289_856_497_536_2,
    -0.796_666_477_413_626_7,
    -0.525_532_409_916_329,
    -0.183_434_642_495_649_8,
    0.183_434_642_495_649_8,
    0.525_532_409_916_329,
    0.796_666_477_413_626_7,
    0.960_289_856_497_536_2,
];
const GL8_WEIGHTS: [f64; 8] = [
    0.101_228_536_290_376_26,
    0.222_381_034_453_374_47,
    0.313_706_645_877_887_3,
    0.362_683_783_378_362,
    0.362_683_783_378_362,
    0.313_706_645_877_887_3,
    0.222_381_034_453_374_47,
    0.101_228_536_290_376_26,
];

/// Polynomial bump `(1 - r^2)^3` on the unit ball, normalized in 1-D closed form
/// and numerically for d >= 2.
fn bump_kernel(r2: f64) -> f64 {
    if r2 >= 1.0 {
        0.0
    } else {
        let w = 1.0 - r2;
        w * w * w
    }
}

/// Spatial mollification `b * rho_eps` evaluated by a fixed tensor quadrature.
///
/// The quadrature weights are renormalized to unit mass, so the discrete
/// convolution is an average of shifted copies of `b`; it therefore satisfies
/// the same one-sided Lipschitz inequality as `b` exactly, and the same growth
/// bound with `c0` inflated by `(1 + eps)`.
#[derive(Clone)]
pub struct MollifiedField {
    pub base: VelocityField,
    pub eps: f64,
    /// Offsets (in kernel coordinates, |z| <= 1) and unit-sum weights.
    nodes: Arc<Vec<(Vec<f64>, f64)>>,
}

impl fmt::Debug for MollifiedField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MollifiedField")
            .field("base", &self.base.name)
            .field("eps", &self.eps)
            .finish()
    }
}

impl MollifiedField {
    pub fn new(base: VelocityField, eps: f64) -> Result<Self> {
        if !(eps > 0.0) {
            return Err(Error::InvalidArgument("mollification radius must be > 0".into()));
        }
        let d = base.dim;
        let mut nodes = Vec::new();
        let mut total = 0.0;
        let mut idx = vec![0usize; d];
        loop {
            let z: Vec<f64> = idx.iter().map(|&i| GL8_NODES[i]).collect();
            let wq: f64 = idx.iter().map(|&i| GL8_WEIGHTS[i]).product();
            let r2: f64 = z.iter().map(|zi| zi * zi).sum();
            let w = wq * bump_kernel(r2);
            if w > 0.0 {
                total += w;
                nodes.push((z, w));
            }
            // Odometer over the tensor grid.
            let mut k = 0;
            loop {
                idx[k] += 1;
                if idx[k] < 8 {
                    break;
                }
                idx[k] = 0;
                k += 1;
                if k == d {
                    break;
                }
            }
            if k == d {
                break;
            }
        }
        for (_, w) in nodes.iter_mut() {
            *w /= total;
        }
        Ok(MollifiedField {
            base,
            eps,
            nodes: Arc::new(nodes),
        })
    }

    pub fn dim(&self) -> usize {
        self.base.dim
    }

    pub fn eval_into(&self, t: f64, x: &[f64], out: &mut [f64]) {
        let d = self.base.dim;
        out.fill(0.0);
        let mut shifted = vec![0.0; d];
        let mut val = vec![0.0; d];
        for (z, w) in self.nodes.iter() {
            for k in 0..d {
                shifted[k] = x[k] - self.eps * z[k];
            }
            self.base.eval_into(t, &shifted, &mut val);
            for k in 0..d {
                out[k] += w * val[k];
            }
        }
    }

    pub fn eval(&self, t: f64, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.base.dim];
        self.eval_into(t, x, &mut out);
        out
    }

    pub fn eval1(&self, t: f64, x: f64) -> f64 {
        let mut out = [0.0];
        self.eval_into(t, &[x], &mut out);
        out[0]
    }

    /// Gradient matrix (row i = grad of component i) by centered differences
    /// at the mollification scale.
    pub fn gradient(&self, t: f64, x: &[f64]) -> Vec<Vec<f64>> {
        let d = self.base.dim;
        let h = self.eps / 8.0;
        let mut rows = vec![vec![0.0; d]; d];
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        let mut vp = vec![0.0; d];
        let mut vm = vec![0.0; d];
        for j in 0..d {
            xp.copy_from_slice(x);
            xm.copy_from_slice(x);
            xp[j] += h;
            xm[j] -= h;
            self.eval_into(t, &xp, &mut vp);
            self.eval_into(t, &xm, &mut vm);
            for (i, row) in rows.iter_mut().enumerate() {
                row[j] = (vp[i] - vm[i]) / (2.0 * h);
            }
        }
        rows
    }

    pub fn divergence(&self, t: f64, x: &[f64]) -> f64 {
        self.gradient(t, x).iter().enumerate().map(|(i, r)| r[i]).sum()
    }

    /// Growth constant after mollification: c0 * (1 + eps).
    pub fn adjusted_c0(&self, t: f64) -> f64 {
        self.base.constants.c0.eval(t) * (1.0 + self.eps)
    }
}

/// Outcome of an empirical check of the growth and one-sided Lipschitz bounds.
#[derive(Debug, Clone)]
pub struct OslAuditReport {
    pub pairs_checked: usize,
    /// Worst signed violation of the OSL quotient (positive = violated).
    pub max_osl_violation: f64,
    /// Worst signed violation of the growth bound (positive = violated).
    pub max_growth_violation: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// Check `(b(t,x)-b(t,y)).(x-y) >= -c1(t)|x-y|^2` and `|b| <= c0(t)(1+|x|)` on
/// sampled triples `(t, x, y)`.
pub fn osl_audit<I>(field: &VelocityField, samples: I, tol: f64) -> OslAuditReport
where
    I: IntoIterator<Item = (f64, Vec<f64>, Vec<f64>)>,
{
    let mut max_osl: f64 = f64::NEG_INFINITY;
    let mut max_growth: f64 = f64::NEG_INFINITY;
    let mut n = 0usize;
    for (t, x, y) in samples {
        n += 1;
        let bx = field.eval(t, &x);
        let by = field.eval(t, &y);
        let mut dot = 0.0;
        let mut dist2 = 0.0;
        for k in 0..field.dim {
            dot += (bx[k] - by[k]) * (x[k] - y[k]);
            dist2 += (x[k] - y[k]) * (x[k] - y[k]);
        }
        if dist2 > 0.0 {
            let quotient = dot / dist2;
            // violation when quotient < -c1
            max_osl = max_osl.max(-field.constants.c1.eval(t) - quotient);
        }
        let norm_x: f64 = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let norm_b: f64 = bx.iter().map(|v| v * v).sum::<f64>().sqrt();
        max_growth = max_growth.max(norm_b - field.constants.c0.eval(t) * (1.0 + norm_x));
    }
    if n == 0 {
        max_osl = 0.0;
        max_growth = 0.0;
    }
    OslAuditReport {
        pairs_checked: n,
        max_osl_violation: max_osl,
        max_growth_violation: max_growth,
        tolerance: tol,
        pass: max_osl <= tol && max_growth <= tol,
    }
}

/// Same audit on a mollified field (the growth bound uses the inflated c0).
pub fn osl_audit_mollified<I>(field: &MollifiedField, samples: I, tol: f64) -> OslAuditReport
where
    I: IntoIterator<Item = (f64, Vec<f64>, Vec<f64>)>,
{
    let mut max_osl: f64 = f64::NEG_INFINITY;
    let mut max_growth: f64 = f64::NEG_INFINITY;
    let mut n = 0usize;
    for (t, x, y) in samples {
        n += 1;
        let bx = field.eval(t, &x);
        let by = field.eval(t, &y);
        let mut dot = 0.0;
        let mut dist2 = 0.0;
        for k in 0..field.dim() {
            dot += (bx[k] - by[k]) * (x[k] - y[k]);
            dist2 += (x[k] - y[k]) * (x[k] - y[k]);
        }
        if dist2 > 0.0 {
            let quotient = dot / dist2;
            max_osl = max_osl.max(-field.base.constants.c1.eval(t) - quotient);
        }
        let norm_x: f64 = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let norm_b: f64 = bx.iter().map(|v| v * v).sum::<f64>().sqrt();
        max_growth = max_growth.max(norm_b - field.adjusted_c0(t) * (1.0 + norm_x));
    }
    if n == 0 {
        max_osl = 0.0;
        max_growth = 0.0;
    }
    OslAuditReport {
        pairs_checked: n,
        max_osl_violation: max_osl,
        max_growth_violation: max_growth,
        tolerance: tol,
        pass: max_osl <= tol && max_growth <= tol,
    }
}

/// Deterministic point-pair sampler over a box, for audits.
pub fn pair_sampler(
    dim: usize,
    radius: f64,
    horizon: f64,
    n: usize,
    seed: u64,
) -> Vec<(f64, Vec<f64>, Vec<f64>)> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let t = rng.gen_range(0.0..=horizon.max(f64::MIN_POSITIVE));
            let x: Vec<f64> = (0..dim).map(|_| rng.gen_range(-radius..=radius)).collect();
            let y: Vec<f64> = (0..dim).map(|_| rng.gen_range(-radius..=radius)).collect();
            (t, x, y)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_fn_integral_exact() {
        let f = StepFn::new(vec![0.5], vec![1.0, 3.0], 1.0).unwrap();
        assert_eq!(f.eval(0.25), 1.0);
        assert_eq!(f.eval(0.75), 3.0);
        assert!((f.integral(0.0, 1.0) - 2.0).abs() < 1e-15);
        assert!((f.integral(0.25, 0.75) - (0.25 + 0.75)).abs() < 1e-15);
        // orientation-normalized
        assert!((f.integral(1.0, 0.0) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn catalog_sgn_and_oracles() {
        let f = VelocityField::catalog("sgn", &[], 1, 2.0).unwrap();
        assert_eq!(f.eval1(0.0, 0.3), 1.0);
        assert_eq!(f.eval1(0.0, -0.3), -1.0);
        assert_eq!(f.eval1(0.0, 0.0), 0.0);
        let bf = f.oracles.backward_flow.as_ref().unwrap();
        // start at s = 1 with x = 0.2, evaluate at t = 0.5: inside the sticking cone
        assert_eq!(bf(0.5, 1.0, &[0.2])[0], 0.0);
        assert!((bf(0.5, 1.0, &[0.8])[0] - 0.3).abs() < 1e-15);
        let ff = f.oracles.forward_flow.as_ref().unwrap();
        assert!((ff(0.3, 0.0, &[0.5])[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn catalog_powerlaw_flow() {
        let f = VelocityField::catalog("powerlaw", &[0.5], 1, 2.0).unwrap();
        assert!((f.eval1(0.0, 0.25) - 1.0).abs() < 1e-15);
        let bf = f.oracles.backward_flow.as_ref().unwrap();
        // phi_{0,1}(0.09) = sgn(x) (|x|^(1/2) - 1)_+^2 = 0
        assert_eq!(bf(0.0, 1.0, &[0.09])[0], 0.0);
        // phi_{0,0.1}(0.25) = (0.5 - 0.1)^2 = 0.16
        assert!((bf(0.0, 0.1, &[0.25])[0] - 0.16).abs() < 1e-15);
    }

    #[test]
    fn catalog_rejects_bad_input() {
        assert!(matches!(
            VelocityField::catalog("nope", &[], 1, 1.0),
            Err(Error::UnknownCatalogField(_))
        ));
        assert!(matches!(
            VelocityField::catalog("powerlaw", &[1.5], 1, 1.0),
            Err(Error::InvalidCatalogParams { .. })
        ));
    }

    #[test]
    fn envelope_sgn_exact() {
        let f = VelocityField::catalog("sgn", &[], 1, 1.0).unwrap();
        let (lo, _) = f.envelope(0.0, &[0.0], &[1.0], 0.5);
        assert_eq!(lo, -1.0);
        let (_, hi) = f.envelope(0.0, &[0.0], &[-2.0], 0.5);
        assert_eq!(hi, 2.0);
        // away from the jump both sides agree
        let (lo, hi) = f.envelope(0.0, &[0.7], &[2.0], 0.5);
        assert_eq!((lo, hi), (2.0, 2.0));
    }

    #[test]
    fn envelope_sampled_matches_exact_for_sgn() {
        // Strip the oracle to exercise the shrinking-shell sampler.
        let mut f = VelocityField::catalog("sgn", &[], 1, 1.0).unwrap();
        f.oracles.envelopes = None;
        let (lo, hi) = f.envelope(0.0, &[0.0], &[1.0], 0.5);
        assert_eq!(lo, -1.0);
        assert_eq!(hi, 1.0);
    }

    #[test]
    fn mollified_sgn_symmetry_and_limit() {
        let f = VelocityField::catalog("sgn", &[], 1, 1.0).unwrap();
        let m = MollifiedField::new(f.clone(), 1e-3).unwrap();
        // odd kernel symmetry at the jump
        assert!(m.eval1(0.0, 0.0).abs() < 1e-14);
        // a.e. convergence away from the jump
        for eps in [0.2, 0.1, 0.05] {
            let m = MollifiedField::new(f.clone(), eps).unwrap();
            if eps < 0.3 {
                assert_eq!(m.eval1(0.0, 0.5), 1.0);
            }
        }
    }

    #[test]
    fn mollified_powerlaw_matches_fine_quadrature() {
        let f = VelocityField::catalog("powerlaw", &[0.5], 1, 1.0).unwrap();
        let eps = 1e-3;
        let m = MollifiedField::new(f.clone(), eps).unwrap();
        let x = 0.25;
        // high-resolution trapezoid oracle for (b * rho_eps)(x)
        let n = 20_000;
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..=n {
            let z = -1.0 + 2.0 * i as f64 / n as f64;
            let w = bump_kernel(z * z) * if i == 0 || i == n { 0.5 } else { 1.0 };
            num += w * f.eval1(0.0, x - eps * z);
            den += w;
        }
        let oracle = num / den;
        assert!((m.eval1(0.0, x) - oracle).abs() < 1e-6);
        assert!((m.eval1(0.0, x) - 1.0).abs() < 1e-2);
    }

    #[test]
    fn audit_catalog_fields() {
        for (name, params) in [
            ("sgn", vec![]),
            ("powerlaw", vec![0.5]),
            ("holder", vec![0.7]),
            ("linear", vec![-1.0]),
            ("zero", vec![]),
        ] {
            let f = VelocityField::catalog(name, &params, 1, 1.0).unwrap();
            let samples = pair_sampler(1, 2.0, 1.0, 10_000, 7);
            let rep = osl_audit(&f, samples, 1e-12);
            assert!(rep.pass, "{name}: {rep:?}");
        }
    }

    #[test]
    fn audit_detects_antimonotone() {
        // b(x) = -sgn x declared with c1 = 0: violation blows up for close pairs.
        let f = VelocityField::new(
            "neg-sgn",
            1,
            OslConstants::constant(1.0, 0.0, 1.0),
            Smoothness::Discontinuous,
            Arc::new(|_t, x: &[f64], out: &mut [f64]| out[0] = -sgn(x[0])),
        );
        let pairs = vec![
            (0.0, vec![1e-3], vec![-1e-3]),
            (0.0, vec![1e-6], vec![-1e-6]),
        ];
        let rep = osl_audit(&f, pairs, 1e-12);
        assert!(!rep.pass);
        assert!(rep.max_osl_violation > 1e5);
    }

    #[test]
    fn audit_mollified_preserves_osl() {
        for eps in [0.25, 0.125, 0.0625, 0.03125] {
            let f = VelocityField::catalog("sgn", &[], 1, 1.0).unwrap();
            let m = MollifiedField::new(f, eps).unwrap();
            let samples = pair_sampler(1, 2.0, 1.0, 2_000, 11);
            let rep = osl_audit_mollified(&m, samples, 1e-8);
            assert!(rep.pass, "eps={eps}: {rep:?}");
        }
    }

    #[test]
    fn mollified_gradient_and_divergence() {
        let f = VelocityField::catalog("linear", &[-1.0], 2, 1.0).unwrap();
        let m = MollifiedField::new(f, 0.05).unwrap();
        let g = m.gradient(0.0, &[0.3, -0.2]);
        assert!((g[0][0] + 1.0).abs() < 1e-8);
        assert!((g[1][1] + 1.0).abs() < 1e-8);
        assert!(g[0][1].abs() < 1e-8);
        assert!((m.divergence(0.0, &[0.3, -0.2]) + 2.0).abs() < 1e-8);
    }
}
