//! Finsler metric families and their fiber geometry.
//!
//! Every family is lowered pointwise to the scaled Randers form
//!
//! ```text
//! phi_x(v) = c(x) * ( sqrt(a_x(v, v)) + beta_x(v) )
//! ```
//!
//! with `a` symmetric positive definite and `|beta|_{a^-1} < 1`. Euclidean,
//! Riemannian, conformal and Randers metrics are special cases, and the
//! perturbations used throughout (conformal factors, coefficient bumps) stay
//! inside the form. The unit co-ball of a Randers norm is an `a^-1`-ellipse
//! translated by `beta`, so the dual norm and all of its derivatives are
//! available in closed form.

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use crate::error::{FinslerError, Result};
use crate::field::{Jet, ScalarField};
use crate::geom::{Covector, Point, Sym2, Vector};

/// Default extension margin: metrics live on the disc of radius `1 + delta`.
pub const DEFAULT_DELTA: f64 = 0.2;

fn one() -> ScalarField {
    ScalarField::constant(1.0)
}

fn zero() -> ScalarField {
    ScalarField::zero()
}

/// The enumerated metric families.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum MetricFamily {
    Euclidean,
    /// `sqrt(g(v, v))` with coefficient fields `g11, g12, g22`.
    Riemannian {
        g11: ScalarField,
        #[serde(default = "zero")]
        g12: ScalarField,
        g22: ScalarField,
    },
    /// `exp(u(x)) * |v|`.
    Conformal { u: ScalarField },
    /// `sqrt(g(v, v)) + beta(v)`.
    Randers {
        #[serde(default = "one")]
        g11: ScalarField,
        #[serde(default = "zero")]
        g12: ScalarField,
        #[serde(default = "one")]
        g22: ScalarField,
        beta1: ScalarField,
        beta2: ScalarField,
    },
    /// A base family modified by a finite list of smooth perturbations.
    PerturbationSum {
        base: Box<MetricFamily>,
        perturbations: Vec<Perturbation>,
    },
}

/// Which entry of the pointwise Randers data a coefficient bump modifies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Coefficient {
    G11,
    G12,
    G22,
    Beta1,
    Beta2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Perturbation {
    /// Multiplies the whole norm by `1 + epsilon * field(x)`.
    Scale { field: ScalarField, epsilon: f64 },
    /// Adds `delta(x)` to one entry of `(a, beta)` before scaling.
    Coefficient { entry: Coefficient, delta: ScalarField },
}

/// Pointwise Randers data with first spatial derivatives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalData {
    pub scale: Jet,
    pub a: Sym2,
    /// `da[k] = d a / d x_k`
    pub da: [Sym2; 2],
    pub beta: [f64; 2],
    /// `dbeta[k][i] = d beta_i / d x_k`
    pub dbeta: [[f64; 2]; 2],
}

impl LocalData {
    const FLAT: LocalData = LocalData {
        scale: Jet { value: 1.0, grad: [0.0, 0.0] },
        a: Sym2::IDENTITY,
        da: [Sym2::ZERO, Sym2::ZERO],
        beta: [0.0, 0.0],
        dbeta: [[0.0; 2]; 2],
    };

    fn riemannian(g11: Jet, g12: Jet, g22: Jet) -> LocalData {
        LocalData {
            a: Sym2 { a11: g11.value, a12: g12.value, a22: g22.value },
            da: [
                Sym2 { a11: g11.grad[0], a12: g12.grad[0], a22: g22.grad[0] },
                Sym2 { a11: g11.grad[1], a12: g12.grad[1], a22: g22.grad[1] },
            ],
            ..LocalData::FLAT
        }
    }
}

/// Value and first derivatives of the dual norm at `(x, xi)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DualJet {
    pub value: f64,
    /// Fiber gradient `d phi* / d xi`.
    pub d_xi: [f64; 2],
    /// Spatial gradient `d phi* / d x` at fixed `xi`.
    pub d_x: [f64; 2],
}

impl MetricFamily {
    pub fn local(&self, x: Point) -> LocalData {
        match self {
            MetricFamily::Euclidean => LocalData::FLAT,
            MetricFamily::Riemannian { g11, g12, g22 } => LocalData::riemannian(g11.jet(x), g12.jet(x), g22.jet(x)),
            MetricFamily::Conformal { u } => {
                let j = u.jet(x);
                let e = j.value.exp();
                LocalData { scale: Jet { value: e, grad: [e * j.grad[0], e * j.grad[1]] }, ..LocalData::FLAT }
            }
            MetricFamily::Randers { g11, g12, g22, beta1, beta2 } => {
                let b1 = beta1.jet(x);
                let b2 = beta2.jet(x);
                LocalData {
                    beta: [b1.value, b2.value],
                    dbeta: [[b1.grad[0], b2.grad[0]], [b1.grad[1], b2.grad[1]]],
                    ..LocalData::riemannian(g11.jet(x), g12.jet(x), g22.jet(x))
                }
            }
            MetricFamily::PerturbationSum { base, perturbations } => {
                let mut d = base.local(x);
                let mut scale_factor = Jet::constant(1.0);
                for p in perturbations {
                    match p {
                        Perturbation::Scale { field, epsilon } => {
                            let j = field.jet(x);
                            let f = 1.0 + epsilon * j.value;
                            scale_factor = Jet {
                                value: scale_factor.value * f,
                                grad: [
                                    scale_factor.grad[0] * f + scale_factor.value * epsilon * j.grad[0],
                                    scale_factor.grad[1] * f + scale_factor.value * epsilon * j.grad[1],
                                ],
                            };
                        }
                        Perturbation::Coefficient { entry, delta } => {
                            let j = delta.jet(x);
                            match entry {
                                Coefficient::G11 => {
                                    d.a.a11 += j.value;
                                    d.da[0].a11 += j.grad[0];
                                    d.da[1].a11 += j.grad[1];
                                }
                                Coefficient::G12 => {
                                    d.a.a12 += j.value;
                                    d.da[0].a12 += j.grad[0];
                                    d.da[1].a12 += j.grad[1];
                                }
                                Coefficient::G22 => {
                                    d.a.a22 += j.value;
                                    d.da[0].a22 += j.grad[0];
                                    d.da[1].a22 += j.grad[1];
                                }
                                Coefficient::Beta1 => {
                                    d.beta[0] += j.value;
                                    d.dbeta[0][0] += j.grad[0];
                                    d.dbeta[1][0] += j.grad[1];
                                }
                                Coefficient::Beta2 => {
                                    d.beta[1] += j.value;
                                    d.dbeta[0][1] += j.grad[0];
                                    d.dbeta[1][1] += j.grad[1];
                                }
                            }
                        }
                    }
                }
                let s = d.scale;
                d.scale = Jet {
                    value: s.value * scale_factor.value,
                    grad: [
                        s.grad[0] * scale_factor.value + s.value * scale_factor.grad[0],
                        s.grad[1] * scale_factor.value + s.value * scale_factor.grad[1],
                    ],
                };
                d
            }
        }
    }

    fn params_finite(&self) -> bool {
        match self {
            MetricFamily::Euclidean => true,
            MetricFamily::Riemannian { g11, g12, g22 } => {
                g11.is_finite_params() && g12.is_finite_params() && g22.is_finite_params()
            }
            MetricFamily::Conformal { u } => u.is_finite_params(),
            MetricFamily::Randers { g11, g12, g22, beta1, beta2 } => [g11, g12, g22, beta1, beta2]
                .iter()
                .all(|f| f.is_finite_params()),
            MetricFamily::PerturbationSum { base, perturbations } => {
                base.params_finite()
                    && perturbations.iter().all(|p| match p {
                        Perturbation::Scale { field, epsilon } => epsilon.is_finite() && field.is_finite_params(),
                        Perturbation::Coefficient { delta, .. } => delta.is_finite_params(),
                    })
            }
        }
    }

    /// Whether `phi(-v) = phi(v)` holds identically (no one-form part anywhere).
    pub fn is_reversible(&self) -> bool {
        match self {
            MetricFamily::Euclidean | MetricFamily::Riemannian { .. } | MetricFamily::Conformal { .. } => true,
            MetricFamily::Randers { beta1, beta2, .. } => {
                matches!(beta1, ScalarField::Constant { value } if *value == 0.0)
                    && matches!(beta2, ScalarField::Constant { value } if *value == 0.0)
            }
            MetricFamily::PerturbationSum { base, perturbations } => {
                base.is_reversible()
                    && perturbations.iter().all(|p| {
                        !matches!(p, Perturbation::Coefficient { entry: Coefficient::Beta1 | Coefficient::Beta2, .. })
                    })
            }
        }
    }
}

/// Serialized form of a metric: family plus extension margin.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricSpec {
    #[serde(flatten)]
    pub family: MetricFamily,
    #[serde(default = "default_delta")]
    pub delta: f64,
}

fn default_delta() -> f64 {
    DEFAULT_DELTA
}

// Hand-written because `deny_unknown_fields` is ignored next to `flatten`,
// and unit variants of a tagged enum accept any extra keys.
impl<'de> Deserialize<'de> for MetricSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error;
        let mut map = serde_json::Map::deserialize(d)?;
        let delta = match map.remove("delta") {
            Some(v) => serde_json::from_value(v).map_err(D::Error::custom)?,
            None => default_delta(),
        };
        if map.get("family").and_then(|f| f.as_str()) == Some("euclidean") {
            if let Some(k) = map.keys().find(|k| k.as_str() != "family") {
                return Err(D::Error::unknown_field(k, &["family", "delta"]));
            }
        }
        let family = serde_json::from_value(serde_json::Value::Object(map)).map_err(D::Error::custom)?;
        Ok(MetricSpec { family, delta })
    }
}

/// A Finsler metric on the disc of radius `1 + delta`. Immutable once built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MetricSpec", into = "MetricSpec")]
pub struct Metric {
    family: MetricFamily,
    delta: f64,
}

impl TryFrom<MetricSpec> for Metric {
    type Error = FinslerError;
    fn try_from(s: MetricSpec) -> Result<Metric> {
        Metric::new(s.family, s.delta)
    }
}

impl From<Metric> for MetricSpec {
    fn from(m: Metric) -> MetricSpec {
        MetricSpec { family: m.family, delta: m.delta }
    }
}

/// Outcome of sampling the fiber Hessian of `phi^2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvexityReport {
    pub samples: usize,
    pub min_eigenvalue: f64,
    pub worst_point: Point,
    pub worst_direction: Vector,
}

impl ConvexityReport {
    pub fn is_convex(&self) -> bool {
        self.min_eigenvalue > 0.0
    }
}

const VALIDATION_RINGS: usize = 12;
const VALIDATION_ANGLES: usize = 48;

impl Metric {
    /// Builds a metric, checking parameters and, for the basic families, that
    /// the Riemannian part is positive definite and the one-form is short on
    /// the whole disc of radius `1 + delta`.
    ///
    /// Perturbation sums are only checked for finite parameters; use
    /// [`Metric::convexity_report`] to judge them.
    pub fn new(family: MetricFamily, delta: f64) -> Result<Metric> {
        if !(delta.is_finite() && delta > 0.0) {
            return Err(FinslerError::InvalidMetric(format!("delta must be positive, got {delta}")));
        }
        if !family.params_finite() {
            return Err(FinslerError::InvalidMetric("non-finite or out-of-range parameter".into()));
        }
        let m = Metric { family, delta };
        if !matches!(m.family, MetricFamily::PerturbationSum { .. }) {
            m.check_pointwise_data()?;
        }
        Ok(m)
    }

    fn check_pointwise_data(&self) -> Result<()> {
        let r = self.radius();
        let mut pts = vec![Point::ZERO];
        for i in 1..=VALIDATION_RINGS {
            for j in 0..VALIDATION_ANGLES {
                pts.push(Point::polar(r * i as f64 / VALIDATION_RINGS as f64, TAU * j as f64 / VALIDATION_ANGLES as f64));
            }
        }
        for p in pts {
            let d = self.family.local(p);
            if !(d.a.a11 > 0.0 && d.a.det() > 0.0) {
                return Err(FinslerError::InvalidMetric(format!(
                    "Riemannian part not positive definite at ({:.3}, {:.3})",
                    p.x, p.y
                )));
            }
            if d.a.inverse().quad(d.beta, d.beta) >= 1.0 {
                return Err(FinslerError::InvalidMetric(format!(
                    "one-form not shorter than 1 at ({:.3}, {:.3})",
                    p.x, p.y
                )));
            }
            if !(d.scale.value > 0.0) {
                return Err(FinslerError::InvalidMetric(format!("non-positive scale at ({:.3}, {:.3})", p.x, p.y)));
            }
        }
        Ok(())
    }

    pub fn euclidean() -> Metric {
        Metric { family: MetricFamily::Euclidean, delta: DEFAULT_DELTA }
    }

    /// Randers metric `|v| + <beta, v>` with a constant one-form.
    pub fn randers_constant(beta: [f64; 2]) -> Result<Metric> {
        Metric::new(
            MetricFamily::Randers {
                g11: one(),
                g12: zero(),
                g22: one(),
                beta1: ScalarField::constant(beta[0]),
                beta2: ScalarField::constant(beta[1]),
            },
            DEFAULT_DELTA,
        )
    }

    /// `exp(u) |v|`.
    pub fn conformal(u: ScalarField) -> Result<Metric> {
        Metric::new(MetricFamily::Conformal { u }, DEFAULT_DELTA)
    }

    /// The round metric making the unit disc a spherical cap of angular radius `cap_angle`.
    pub fn spherical_cap(cap_angle: f64) -> Result<Metric> {
        Metric::conformal(ScalarField::CapLogWeight { cap_angle })
    }

    /// Same family on a different extension margin.
    pub fn with_delta(&self, delta: f64) -> Result<Metric> {
        Metric::new(self.family.clone(), delta)
    }

    pub fn family(&self) -> &MetricFamily {
        &self.family
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    /// Radius `1 + delta` of the disc the metric is defined on.
    pub fn radius(&self) -> f64 {
        1.0 + self.delta
    }

    pub fn is_reversible(&self) -> bool {
        self.family.is_reversible()
    }

    pub fn local(&self, x: Point) -> LocalData {
        self.family.local(x)
    }

    fn check_domain(&self, x: Point) -> Result<()> {
        // Points computed as radius * (cos, sin) may overshoot by an ulp.
        if x.is_finite() && x.norm() <= self.radius() * (1.0 + 1e-12) {
            Ok(())
        } else {
            Err(FinslerError::Domain { point: x, radius: self.radius() })
        }
    }

    /// `phi_x(v)`.
    pub fn norm(&self, x: Point, v: Vector) -> Result<f64> {
        self.check_domain(x)?;
        Ok(norm_local(&self.local(x), v))
    }

    /// `phi*_x(alpha) = sup { alpha(v) : phi_x(v) = 1 }`, evaluated in closed form.
    pub fn dual_norm(&self, x: Point, alpha: Covector) -> Result<f64> {
        self.check_domain(x)?;
        Ok(dual_local(&self.local(x), alpha))
    }

    /// The dual norm computed by damped Newton iteration on the fiber angle,
    /// maximizing `alpha(v) / phi(v)` from the Euclidean maximizer.
    ///
    /// Independent of the closed form used by [`Metric::dual_norm`]; the two
    /// are cross-checked in tests.
    pub fn dual_norm_newton(&self, x: Point, alpha: Covector) -> Result<f64> {
        self.check_domain(x)?;
        if alpha == Covector::ZERO {
            return Ok(0.0);
        }
        let d = self.local(x);
        let ratio = |th: f64| -> (f64, f64, f64) {
            let u = Vector::from_angle(th);
            let up = u.perp();
            let (phi, dphi, ddphi) = circle_derivatives(&d, u);
            let a0 = alpha.pair(u);
            let a1 = alpha.pair(up);
            let a2 = -a0;
            let r = a0 / phi;
            let r1 = (a1 * phi - a0 * dphi) / (phi * phi);
            let r2 = (a2 * phi - a0 * ddphi) / (phi * phi) - 2.0 * dphi * (a1 * phi - a0 * dphi) / (phi * phi * phi);
            (r, r1, r2)
        };
        const TOL: f64 = 1e-10;
        const MAX_ITER: usize = 50;
        let mut th = alpha.angle();
        let (mut r, mut r1, mut r2) = ratio(th);
        for _ in 0..MAX_ITER {
            if r1.abs() <= TOL * r.abs().max(1.0) {
                return Ok(r);
            }
            let mut step = if r2 < 0.0 { -r1 / r2 } else { 0.1 * r1.signum() };
            step = step.clamp(-0.5, 0.5);
            let mut accepted = false;
            for _ in 0..30 {
                let cand = ratio(th + step);
                if cand.0 >= r || cand.1.abs() < r1.abs() {
                    th += step;
                    (r, r1, r2) = cand;
                    accepted = true;
                    break;
                }
                step *= 0.5;
            }
            if !accepted {
                break;
            }
        }
        if r1.abs() <= TOL * r.abs().max(1.0) {
            return Ok(r);
        }
        Err(FinslerError::NoConvergence {
            operation: "dual_norm_newton",
            iterations: MAX_ITER,
            residual: r1.abs(),
            last_iterate: th,
        })
    }

    /// `D(phi^2 / 2)_x(v)`, the covector with `alpha(v) = phi(v)^2` and `phi*(alpha) = phi(v)`.
    pub fn legendre(&self, x: Point, v: Vector) -> Result<Covector> {
        self.check_domain(x)?;
        if v == Vector::ZERO {
            return Err(FinslerError::ZeroVector);
        }
        Ok(legendre_local(&self.local(x), v))
    }

    /// Inverse Legendre transform: the `v` with `legendre(v) = alpha`.
    pub fn legendre_inverse(&self, x: Point, alpha: Covector) -> Result<Vector> {
        self.check_domain(x)?;
        if alpha == Covector::ZERO {
            return Err(FinslerError::ZeroVector);
        }
        let d = self.local(x);
        let j = dual_fiber(&d, alpha);
        Ok(Vector::new(j.0 * j.1[0], j.0 * j.1[1]))
    }

    /// The unique `phi`-unit vector `v` with `alpha(v) = phi*(alpha)`.
    pub fn unit_gradient(&self, x: Point, alpha: Covector) -> Result<Vector> {
        let v = self.legendre_inverse(x, alpha)?;
        let n = self.norm(x, v)?;
        Ok(v / n)
    }

    /// Value and first derivatives of `phi*` (no domain check; used by the flow).
    pub fn dual_jet(&self, x: Point, xi: Covector) -> DualJet {
        dual_jet_local(&self.local(x), xi)
    }

    /// Fiber Hessian of `phi_x^2` at `v` (2-homogeneous of degree 0).
    pub fn fiber_hessian(&self, x: Point, v: Vector) -> Sym2 {
        fiber_hessian_local(&self.local(x), v)
    }

    /// Holmes-Thompson area density `c^2 sqrt(det a)` (closed form, independent of beta).
    pub fn area_density(&self, x: Point) -> f64 {
        let d = self.local(x);
        d.scale.value * d.scale.value * d.a.det().sqrt()
    }

    /// Minimum eigenvalue of the fiber Hessian of `phi^2` over a deterministic
    /// polar sample of the disc of radius `1 + delta`: `base_samples` rings of
    /// `base_samples` points plus the centre, `fiber_samples` unit directions
    /// at each.
    pub fn convexity_report(&self, fiber_samples: usize, base_samples: usize) -> ConvexityReport {
        let fiber_samples = fiber_samples.max(1);
        let base_samples = base_samples.max(1);
        let r = self.radius();
        let mut report = ConvexityReport {
            samples: 0,
            min_eigenvalue: f64::INFINITY,
            worst_point: Point::ZERO,
            worst_direction: Vector::new(1.0, 0.0),
        };
        let mut visit = |p: Point| {
            let d = self.local(p);
            for k in 0..fiber_samples {
                let v = Vector::from_angle(TAU * k as f64 / fiber_samples as f64);
                let (lo, _) = fiber_hessian_local(&d, v).eigenvalues();
                let lo = if lo.is_nan() { f64::NEG_INFINITY } else { lo };
                report.samples += 1;
                if lo < report.min_eigenvalue {
                    report.min_eigenvalue = lo;
                    report.worst_point = p;
                    report.worst_direction = v;
                }
            }
        };
        visit(Point::ZERO);
        for i in 1..=base_samples {
            let rad = r * i as f64 / base_samples as f64;
            for j in 0..base_samples {
                visit(Point::polar(rad, TAU * (j as f64 + 0.5 * (i % 2) as f64) / base_samples as f64));
            }
        }
        report
    }
}

pub(crate) fn norm_local(d: &LocalData, v: Vector) -> f64 {
    let v = v.to_array();
    d.scale.value * (d.a.quad(v, v).sqrt() + d.beta[0] * v[0] + d.beta[1] * v[1])
}

pub(crate) fn legendre_local(d: &LocalData, v: Vector) -> Covector {
    let va = v.to_array();
    let n = d.a.quad(va, va).sqrt();
    let av = d.a.apply(va);
    let c = d.scale.value;
    let phi = c * (n + d.beta[0] * va[0] + d.beta[1] * va[1]);
    Covector::new(phi * c * (av[0] / n + d.beta[0]), phi * c * (av[1] / n + d.beta[1]))
}

/// `phi`, `d phi / d theta`, `d^2 phi / d theta^2` along the unit circle at `u`.
fn circle_derivatives(d: &LocalData, u: Vector) -> (f64, f64, f64) {
    let ua = u.to_array();
    let up = u.perp().to_array();
    let c = d.scale.value;
    let uau = d.a.quad(ua, ua);
    let uap = d.a.quad(ua, up);
    let pap = d.a.quad(up, up);
    let n = uau.sqrt();
    let n1 = uap / n;
    let n2 = (pap - uau) / n - uap * uap / (n * n * n);
    let b0 = d.beta[0] * ua[0] + d.beta[1] * ua[1];
    let b1 = d.beta[0] * up[0] + d.beta[1] * up[1];
    (c * (n + b0), c * (n1 + b1), c * (n2 - b0))
}

fn fiber_hessian_local(d: &LocalData, v: Vector) -> Sym2 {
    let va = v.to_array();
    let c = d.scale.value;
    let n = d.a.quad(va, va).sqrt();
    let av = d.a.apply(va);
    let phi = c * (n + d.beta[0] * va[0] + d.beta[1] * va[1]);
    let g = [c * (av[0] / n + d.beta[0]), c * (av[1] / n + d.beta[1])];
    let n3 = n * n * n;
    let h = Sym2 {
        a11: c * (d.a.a11 / n - av[0] * av[0] / n3),
        a12: c * (d.a.a12 / n - av[0] * av[1] / n3),
        a22: c * (d.a.a22 / n - av[1] * av[1] / n3),
    };
    Sym2 {
        a11: 2.0 * (g[0] * g[0] + phi * h.a11),
        a12: 2.0 * (g[0] * g[1] + phi * h.a12),
        a22: 2.0 * (g[1] * g[1] + phi * h.a22),
    }
}

/// Intermediate quantities of the Randers dual norm.
struct DualCore {
    ainv: Sym2,
    ab: [f64; 2],
    axi: [f64; 2],
    q: f64,
    big_q: f64,
    m: f64,
    s: f64,
    /// `F*(xi)` before dividing by the scale.
    f: f64,
}

fn dual_core(d: &LocalData, xi: [f64; 2]) -> DualCore {
    let ainv = d.a.inverse();
    let ab = ainv.apply(d.beta);
    let axi = ainv.apply(xi);
    let q = xi[0] * ab[0] + xi[1] * ab[1];
    let big_q = xi[0] * axi[0] + xi[1] * axi[1];
    let m = 1.0 - (d.beta[0] * ab[0] + d.beta[1] * ab[1]);
    let s = (q * q + m * big_q).sqrt();
    // (S - q) / m == Q / (S + q); pick the form without cancellation.
    let f = if q >= 0.0 { big_q / (s + q) } else { (s - q) / m };
    DualCore { ainv, ab, axi, q, big_q, m, s, f }
}

pub(crate) fn dual_local(d: &LocalData, alpha: Covector) -> f64 {
    if alpha == Covector::ZERO {
        return 0.0;
    }
    dual_core(d, alpha.to_array()).f / d.scale.value
}

/// `(phi*, d phi*/d xi)` at `alpha`.
fn dual_fiber(d: &LocalData, alpha: Covector) -> (f64, [f64; 2]) {
    let k = dual_core(d, alpha.to_array());
    let c = d.scale.value;
    let g = [
        ((k.q * k.ab[0] + k.m * k.axi[0]) / k.s - k.ab[0]) / k.m / c,
        ((k.q * k.ab[1] + k.m * k.axi[1]) / k.s - k.ab[1]) / k.m / c,
    ];
    (k.f / c, g)
}

pub(crate) fn dual_jet_local(d: &LocalData, xi: Covector) -> DualJet {
    let xa = xi.to_array();
    let k = dual_core(d, xa);
    let c = d.scale.value;
    let phi = k.f / c;
    let d_xi = [
        ((k.q * k.ab[0] + k.m * k.axi[0]) / k.s - k.ab[0]) / k.m / c,
        ((k.q * k.ab[1] + k.m * k.axi[1]) / k.s - k.ab[1]) / k.m / c,
    ];
    let mut d_x = [0.0; 2];
    for kk in 0..2 {
        // d(A) = -A (da) A
        let dainv = k.ainv.sandwich(&d.da[kk]).scale(-1.0);
        let db = d.dbeta[kk];
        let dq = dainv.quad(xa, d.beta) + (k.axi[0] * db[0] + k.axi[1] * db[1]);
        let dbig_q = dainv.quad(xa, xa);
        let dm = -(2.0 * (k.ab[0] * db[0] + k.ab[1] * db[1]) + dainv.quad(d.beta, d.beta));
        let ds = (k.q * dq + 0.5 * (dm * k.big_q + k.m * dbig_q)) / k.s;
        let df = (ds - dq) / k.m - k.f * dm / k.m;
        d_x[kk] = df / c - phi * d.scale.grad[kk] / c;
    }
    DualJet { value: phi, d_xi, d_x }
}

/// Angle grid maximization of `alpha(v) / phi(v)`; a brute-force check on the dual norm.
pub fn dual_norm_grid(m: &Metric, x: Point, alpha: Covector, samples: usize) -> f64 {
    let d = m.local(x);
    (0..samples)
        .map(|k| {
            let v = Vector::from_angle(TAU * k as f64 / samples as f64);
            alpha.pair(v) / norm_local(&d, v)
        })
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Fiber angle (of a covector) used to parametrize unit momenta.
pub fn unit_momentum(m: &Metric, x: Point, angle: f64) -> Covector {
    let dir = Covector::from_angle(angle);
    dir / dual_local(&m.local(x), dir)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randers() -> Metric {
        Metric::randers_constant([0.5, 0.0]).unwrap()
    }

    fn riemannian_sample() -> Metric {
        Metric::new(
            MetricFamily::Riemannian {
                g11: ScalarField::Affine { c0: 1.5, cx: 0.2, cy: 0.0 },
                g12: ScalarField::Affine { c0: 0.3, cx: 0.0, cy: 0.1 },
                g22: ScalarField::Sum {
                    terms: vec![ScalarField::constant(1.0), ScalarField::gaussian(0.5, [0.1, 0.1], 0.7)],
                },
            },
            DEFAULT_DELTA,
        )
        .unwrap()
    }

    fn general_randers() -> Metric {
        Metric::new(
            MetricFamily::PerturbationSum {
                base: Box::new(MetricFamily::Randers {
                    g11: ScalarField::Affine { c0: 1.2, cx: 0.1, cy: -0.1 },
                    g12: ScalarField::Affine { c0: 0.2, cx: 0.0, cy: 0.05 },
                    g22: ScalarField::constant(0.9),
                    beta1: ScalarField::Affine { c0: 0.2, cx: 0.1, cy: 0.0 },
                    beta2: ScalarField::gaussian(-0.3, [0.2, 0.0], 0.5),
                }),
                perturbations: vec![Perturbation::Scale { field: ScalarField::gaussian(1.0, [-0.3, 0.2], 0.4), epsilon: 0.3 }],
            },
            DEFAULT_DELTA,
        )
        .unwrap()
    }

    fn random_point(rng: &mut ChaCha8Rng, r: f64) -> Point {
        let rad = r * rng.gen::<f64>().sqrt();
        Point::polar(rad, rng.gen::<f64>() * TAU)
    }

    #[test]
    fn euclidean_norm_examples() {
        let e = Metric::euclidean();
        assert_eq!(e.norm(Point::new(0.3, 0.1), Vector::new(3.0, 4.0)).unwrap(), 5.0);
        assert_eq!(e.dual_norm(Point::ZERO, Covector::new(0.0, 2.0)).unwrap(), 2.0);
        assert_eq!(e.legendre(Point::ZERO, Vector::new(1.0, 0.0)).unwrap(), Covector::new(1.0, 0.0));
        assert_eq!(e.legendre_inverse(Point::ZERO, Covector::new(0.0, 1.0)).unwrap(), Vector::new(0.0, 1.0));
    }

    #[test]
    fn randers_is_not_reversible() {
        let m = randers();
        assert!((m.norm(Point::ZERO, Vector::new(1.0, 0.0)).unwrap() - 1.5).abs() < 1e-15);
        assert!((m.norm(Point::ZERO, Vector::new(-1.0, 0.0)).unwrap() - 0.5).abs() < 1e-15);
        assert!(!m.is_reversible());
    }

    #[test]
    fn randers_dual_norm_matches_fiber_maximization() {
        let m = randers();
        let d = m.dual_norm(Point::ZERO, Covector::new(1.0, 0.0)).unwrap();
        assert!((d - 2.0 / 3.0).abs() < 1e-14);
        let grid = dual_norm_grid(&m, Point::ZERO, Covector::new(1.0, 0.0), 20000);
        assert!((grid - 2.0 / 3.0).abs() < 1e-7);
    }

    #[test]
    fn randers_legendre_of_unit_vector() {
        let m = randers();
        let v = Vector::new(2.0 / 3.0, 0.0);
        assert!((m.norm(Point::ZERO, v).unwrap() - 1.0).abs() < 1e-15);
        let a = m.legendre(Point::ZERO, v).unwrap();
        assert!((a.pair(v) - 1.0).abs() < 1e-14);
        assert!((m.dual_norm(Point::ZERO, a).unwrap() - 1.0).abs() < 1e-14);
        // The inverse of the phi*-unit covector (3/2, 0) is the unit vector (2/3, 0).
        let alpha = Covector::new(1.0, 0.0) / m.dual_norm(Point::ZERO, Covector::new(1.0, 0.0)).unwrap();
        let back = m.legendre_inverse(Point::ZERO, alpha).unwrap();
        assert!((back - v).norm() < 1e-14);
    }

    #[test]
    fn conformal_dual_is_scaled_euclidean() {
        let u = ScalarField::gaussian(0.4, [0.1, 0.0], 0.5);
        let m = Metric::conformal(u.clone()).unwrap();
        let x = Point::new(0.2, -0.3);
        let a = Covector::new(0.7, -1.1);
        let expect = (-u.value(x)).exp() * a.norm();
        assert!((m.dual_norm(x, a).unwrap() - expect).abs() < 1e-14);
    }

    #[test]
    fn zero_mode_conformal_is_euclidean() {
        let m = Metric::conformal(ScalarField::zero()).unwrap();
        let e = Metric::euclidean();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let x = random_point(&mut rng, 1.0);
            let v = Vector::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
            assert_eq!(m.norm(x, v).unwrap(), e.norm(x, v).unwrap());
        }
    }

    #[test]
    fn domain_errors() {
        let e = Metric::euclidean();
        assert!(matches!(e.norm(Point::new(2.0, 0.0), Vector::new(1.0, 0.0)), Err(FinslerError::Domain { .. })));
        assert!(matches!(e.legendre(Point::ZERO, Vector::ZERO), Err(FinslerError::ZeroVector)));
        assert!(matches!(e.legendre_inverse(Point::ZERO, Covector::ZERO), Err(FinslerError::ZeroVector)));
    }

    #[test]
    fn invalid_families_rejected() {
        assert!(Metric::randers_constant([1.0, 0.0]).is_err());
        assert!(Metric::new(MetricFamily::Euclidean, -0.1).is_err());
        let bad = MetricFamily::Riemannian {
            g11: ScalarField::constant(1.0),
            g12: ScalarField::constant(2.0),
            g22: ScalarField::constant(1.0),
        };
        assert!(Metric::new(bad, 0.2).is_err());
    }

    #[test]
    fn riemannian_matches_matrix_formulas() {
        let m = riemannian_sample();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let x = random_point(&mut rng, 1.2);
            let d = m.local(x);
            let v = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            let a = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            let phi = d.a.quad(v, v).sqrt();
            let dual = d.a.inverse().quad(a, a).sqrt();
            assert!((m.norm(x, v.into()).unwrap() - phi).abs() < 1e-10);
            assert!((m.dual_norm(x, a.into()).unwrap() - dual).abs() < 1e-10);
            // Legendre of a g-unit vector is g(v, .).
            let u = Vector::from(v) / phi;
            let l = m.legendre(x, u).unwrap();
            let gv = d.a.apply(u.to_array());
            assert!((l.x - gv[0]).abs() < 1e-12 && (l.y - gv[1]).abs() < 1e-12);
            assert!((l.pair(u) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn newton_dual_matches_closed_form() {
        let metrics = [Metric::euclidean(), randers(), riemannian_sample(), general_randers()];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for m in &metrics {
            for _ in 0..50 {
                let x = random_point(&mut rng, 1.2);
                let a = Covector::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
                let closed = m.dual_norm(x, a).unwrap();
                let newton = m.dual_norm_newton(x, a).unwrap();
                assert!((closed - newton).abs() < 1e-9 * closed.max(1.0), "{closed} vs {newton}");
                let grid = dual_norm_grid(m, x, a, 4096);
                assert!(grid <= closed + 1e-12 && closed - grid < 1e-5 * closed.max(1.0));
            }
        }
    }

    #[test]
    fn legendre_round_trip_on_random_samples() {
        let metrics = [Metric::euclidean(), randers(), riemannian_sample(), general_randers(), Metric::spherical_cap(1.0).unwrap()];
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for k in 0..1000 {
            let m = &metrics[k % metrics.len()];
            let x = random_point(&mut rng, 1.2);
            let a = Covector::new(rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0));
            let v = m.legendre_inverse(x, a).unwrap();
            let back = m.legendre(x, v).unwrap();
            assert!((back - a).norm() <= 1e-8 * a.norm(), "{a:?} -> {back:?}");
            // pairing extremality
            let lhs = a.pair(v);
            let rhs = m.dual_norm(x, a).unwrap() * m.norm(x, v).unwrap();
            assert!((lhs - rhs).abs() < 1e-8 * lhs.abs().max(1.0));
        }
    }

    #[test]
    fn dual_spatial_gradient_matches_finite_differences() {
        let m = general_randers();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let x = random_point(&mut rng, 1.1);
            let xi = Covector::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
            let j = m.dual_jet(x, xi);
            let h = 1e-6;
            let fx = (m.dual_jet(Point::new(x.x + h, x.y), xi).value - m.dual_jet(Point::new(x.x - h, x.y), xi).value) / (2.0 * h);
            let fy = (m.dual_jet(Point::new(x.x, x.y + h), xi).value - m.dual_jet(Point::new(x.x, x.y - h), xi).value) / (2.0 * h);
            assert!((j.d_x[0] - fx).abs() < 1e-7 && (j.d_x[1] - fy).abs() < 1e-7);
            let gx = (m.dual_jet(x, xi + Covector::new(h, 0.0)).value - m.dual_jet(x, xi - Covector::new(h, 0.0)).value) / (2.0 * h);
            let gy = (m.dual_jet(x, xi + Covector::new(0.0, h)).value - m.dual_jet(x, xi - Covector::new(0.0, h)).value) / (2.0 * h);
            assert!((j.d_xi[0] - gx).abs() < 1e-7 && (j.d_xi[1] - gy).abs() < 1e-7);
        }
    }

    fn fd_hessian_min_eig(m: &Metric, x: Point, v: Vector) -> f64 {
        let f = |w: Vector| m.norm(x, w).unwrap().powi(2);
        let h = 1e-4;
        let e1 = Vector::new(h, 0.0);
        let e2 = Vector::new(0.0, h);
        let hxx = (f(v + e1) - 2.0 * f(v) + f(v - e1)) / (h * h);
        let hyy = (f(v + e2) - 2.0 * f(v) + f(v - e2)) / (h * h);
        let hxy = (f(v + e1 + e2) - f(v + e1 - e2) - f(v - e1 + e2) + f(v - e1 - e2)) / (4.0 * h * h);
        Sym2 { a11: hxx, a12: hxy, a22: hyy }.eigenvalues().0
    }

    #[test]
    fn convexity_of_euclidean_is_two() {
        let r = Metric::euclidean().convexity_report(16, 8);
        assert!((r.min_eigenvalue - 2.0).abs() < 1e-12);
        assert!(r.is_convex());
    }

    #[test]
    fn randers_convexity_degrades_as_beta_grows() {
        let mut last = f64::INFINITY;
        for b in [0.3, 0.6, 0.9] {
            let m = Metric::randers_constant([b, 0.0]).unwrap();
            let rep = m.convexity_report(64, 8);
            // Finite-difference Hessian oracle at the reported worst direction and a few others.
            let oracle = (0..64)
                .map(|k| fd_hessian_min_eig(&m, Point::ZERO, Vector::from_angle(TAU * k as f64 / 64.0)))
                .fold(f64::INFINITY, f64::min);
            assert!((rep.min_eigenvalue - oracle).abs() < 1e-5, "{b}: {} vs {oracle}", rep.min_eigenvalue);
            assert!(rep.min_eigenvalue > 0.0 && rep.min_eigenvalue < last);
            last = rep.min_eigenvalue;
        }
        assert!(last < 0.25);
    }

    #[test]
    fn huge_one_form_bump_breaks_convexity() {
        let fam = MetricFamily::PerturbationSum {
            base: Box::new(MetricFamily::Euclidean),
            perturbations: vec![Perturbation::Coefficient {
                entry: Coefficient::Beta1,
                delta: ScalarField::gaussian(3.0, [0.0, 0.0], 0.5),
            }],
        };
        let m = Metric::new(fam, DEFAULT_DELTA).unwrap();
        let rep = m.convexity_report(32, 8);
        assert!(rep.min_eigenvalue < 0.0);
        assert!(rep.worst_point.norm() < 0.6);
    }

    #[test]
    fn metric_spec_parses_from_json() {
        let txt = r#"{"family":"randers","beta1":{"kind":"constant","value":0.5},"beta2":{"kind":"constant","value":0.0},"delta":0.3}"#;
        let m: Metric = serde_json::from_str(txt).unwrap();
        assert_eq!(m.delta(), 0.3);
        assert!((m.norm(Point::ZERO, Vector::new(1.0, 0.0)).unwrap() - 1.5).abs() < 1e-15);
        let bad = r#"{"family":"randers","beta1":{"kind":"constant","value":1.5},"beta2":{"kind":"constant","value":0.0}}"#;
        assert!(serde_json::from_str::<Metric>(bad).is_err());
        let unknown = r#"{"family":"euclidean","colour":1}"#;
        assert!(serde_json::from_str::<Metric>(unknown).is_err());
    }
}
