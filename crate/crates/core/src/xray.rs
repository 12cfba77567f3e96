//! Geodesic ray transform and the conformal perturbation family
//! `phi_eps = (1 + eps f) phi`.
//!
//! To first order, `d_{phi_eps}(a, b) = d_phi(a, b) + eps * I f(gamma_ab)`, and
//! the unperturbed geodesic is an admissible competitor, so the remainder is
//! non-positive and quadratic in `eps`.

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use crate::error::{FinslerError, Result};
use crate::field::ScalarField;
use crate::geodesic::{Geodesic, GeodesicSolver};
use crate::geom::Point;
use crate::metric::{Metric, MetricFamily, Perturbation};
use crate::volume::{weighted_volume, FiberQuadrature};

/// One line of a sinogram.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RaySample {
    pub a: usize,
    pub b: usize,
    /// Length of the geodesic from `a` to `b`.
    pub length: f64,
    /// Integral of `f` along it.
    pub value: f64,
}

/// Simpson's rule for `f` along a geodesic (arc length parameter), with the
/// interval midpoints placed by cubic Hermite interpolation of positions and
/// velocities. Fourth order in the sample spacing.
pub fn integrate_along(m: &Metric, g: &Geodesic, f: &ScalarField) -> f64 {
    let mut total = 0.0;
    let mut prev = (g.positions[0], g.velocity(m, 0), f.value(g.positions[0]));
    for i in 1..g.len() {
        let h = g.times[i] - g.times[i - 1];
        let (x, v) = (g.positions[i], g.velocity(m, i));
        let fx = f.value(x);
        let mid = Point::new(0.5 * (prev.0.x + x.x), 0.5 * (prev.0.y + x.y)).offset((prev.1 - v) * (h / 8.0));
        total += h / 6.0 * (prev.2 + 4.0 * f.value(mid) + fx);
        prev = (x, v, fx);
    }
    total
}

/// `(T, I f)` for the geodesic from `a` to `b` on the unit circle.
pub fn ray_transform(m: &Metric, f: &ScalarField, a: Point, b: Point, solver: &GeodesicSolver) -> Result<(f64, f64)> {
    let g = solver.connect(m, a, b, 1.0)?;
    Ok((g.length, integrate_along(m, &g, f)))
}

/// Ray transform over all ordered pairs of `n` equally spaced boundary points.
pub fn sinogram(m: &Metric, f: &ScalarField, n: usize, solver: &GeodesicSolver) -> Result<Vec<RaySample>> {
    let pt = |i: usize| Point::polar(1.0, TAU * i as f64 / n as f64);
    let rows = crate::par::map_range(n, |a| -> Result<Vec<RaySample>> {
        let targets: Vec<Point> = (1..n).map(|k| pt((a + k) % n)).collect();
        let cs = solver.connect_many(m, pt(a), &targets, 1.0)?;
        cs.iter()
            .enumerate()
            .map(|(k, c)| {
                let g = solver.trace_connection(m, c)?;
                Ok(RaySample { a, b: (a + k + 1) % n, length: c.length, value: integrate_along(m, &g, f) })
            })
            .collect()
    });
    let mut out = Vec::with_capacity(n * (n - 1));
    for r in rows {
        out.extend(r?);
    }
    Ok(out)
}

/// `(1 + eps f) * phi`, rejected if the factor is not positive or the result
/// loses fiber convexity on the sample grid.
pub fn conformal_metric(m: &Metric, f: &ScalarField, eps: f64) -> Result<Metric> {
    let peak = f.max_abs_on_disc(m.radius(), 24, 96);
    if !(eps.abs() * peak < 1.0) {
        return Err(FinslerError::InvalidMetric(format!("1 + eps f is not positive: eps = {eps}, max |f| = {peak}")));
    }
    let family = match m.family() {
        MetricFamily::PerturbationSum { base, perturbations } => {
            let mut ps = perturbations.clone();
            ps.push(Perturbation::Scale { field: f.clone(), epsilon: eps });
            MetricFamily::PerturbationSum { base: base.clone(), perturbations: ps }
        }
        other => MetricFamily::PerturbationSum {
            base: Box::new(other.clone()),
            perturbations: vec![Perturbation::Scale { field: f.clone(), epsilon: eps }],
        },
    };
    let out = Metric::new(family, m.delta())?;
    let report = out.convexity_report(16, 12);
    if !report.is_convex() {
        return Err(FinslerError::InvalidMetric(format!(
            "perturbed metric is not strongly convex at ({:.3}, {:.3})",
            report.worst_point.x, report.worst_point.y
        )));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairVariation {
    pub a: Point,
    pub b: Point,
    /// `r(eps) = d_eps(a, b) - d(a, b) - eps * I f`, one per epsilon.
    pub residuals: Vec<f64>,
    /// Least-squares slope of `log |r|` against `log eps`.
    pub exponent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariationReport {
    pub epsilons: Vec<f64>,
    pub pairs: Vec<PairVariation>,
    pub min_exponent: f64,
    pub max_residual: f64,
}

fn fit_exponent(eps: &[f64], r: &[f64]) -> f64 {
    let pts: Vec<(f64, f64)> = eps.iter().zip(r).filter(|(_, r)| r.abs() > 0.0).map(|(e, r)| (e.ln(), r.abs().ln())).collect();
    if pts.len() < 2 {
        return f64::NAN;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    sxy / sxx
}

/// Second-order remainder of the boundary distance under `phi -> (1 + eps f) phi`.
pub fn distance_variation_check(
    m: &Metric,
    f: &ScalarField,
    pairs: &[(Point, Point)],
    epsilons: &[f64],
    solver: &GeodesicSolver,
) -> Result<VariationReport> {
    if epsilons.is_empty() || epsilons.iter().any(|e| !(*e > 0.0)) {
        return Err(FinslerError::InvalidArgument("epsilons must be positive".into()));
    }
    let perturbed: Vec<Metric> = epsilons.iter().map(|&e| conformal_metric(m, f, e)).collect::<Result<_>>()?;
    let rows = crate::par::map(pairs, |&(a, b)| -> Result<PairVariation> {
        let g = solver.connect(m, a, b, 1.0)?;
        let i = integrate_along(m, &g, f);
        let residuals = epsilons
            .iter()
            .zip(&perturbed)
            .map(|(&e, me)| Ok(solver.connect_endpoint(me, a, b, 1.0)?.length - g.length - e * i))
            .collect::<Result<Vec<f64>>>()?;
        let exponent = fit_exponent(epsilons, &residuals);
        Ok(PairVariation { a, b, residuals, exponent })
    });
    let pairs = rows.into_iter().collect::<Result<Vec<_>>>()?;
    let min_exponent = pairs.iter().map(|p| p.exponent).fold(f64::INFINITY, f64::min);
    let max_residual = pairs.iter().flat_map(|p| p.residuals.iter().copied()).fold(f64::NEG_INFINITY, f64::max);
    Ok(VariationReport { epsilons: epsilons.to_vec(), pairs, min_exponent, max_residual })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InjectivityReport {
    pub epsilon: f64,
    /// `vol(phi_{+eps}) - vol(phi)` and `vol(phi_{-eps}) - vol(phi)`.
    pub a_plus: f64,
    pub a_minus: f64,
    /// `integral of ((1 + eps f)^2 + (1 - eps f)^2 - 2) dvol_phi`.
    pub b: f64,
    /// `2 eps^2 integral of f^2 dvol_phi`.
    pub b_closed_form: f64,
    pub integral_f_squared: f64,
    /// Largest `|(1 + eps f)^2 + (1 - eps f)^2 - 2 - 2 eps^2 f^2|` on the quadrature nodes.
    pub pointwise_identity_residual: f64,
    /// Smallest `(1 + eps f)^2 + (1 - eps f)^2 - 2 - eps^2 f^2` on the nodes (non-negative).
    pub min_pointwise_excess: f64,
    pub max_abs_transform: f64,
    pub volume_error: f64,
}

impl InjectivityReport {
    /// `max |I f| / sqrt(integral f^2)`, the empirical constant of the experiment.
    pub fn transform_ratio(&self) -> f64 {
        self.max_abs_transform / self.integral_f_squared.sqrt()
    }
}

/// Evaluates each inequality of the injectivity argument at fixed `f`, `eps`.
pub fn injectivity_experiment(
    m: &Metric,
    f: &ScalarField,
    eps: f64,
    boundary_points: usize,
    q: FiberQuadrature,
    solver: &GeodesicSolver,
) -> Result<InjectivityReport> {
    let base = crate::volume::ht_volume_fiber(m, q)?;
    let plus = crate::volume::ht_volume_fiber(&conformal_metric(m, f, eps)?, q)?;
    let minus = crate::volume::ht_volume_fiber(&conformal_metric(m, f, -eps)?, q)?;
    let combo = |x: Point| {
        let v = f.value(x);
        (1.0 + eps * v).powi(2) + (1.0 - eps * v).powi(2) - 2.0
    };
    let (b, _) = weighted_volume(m, q, combo)?;
    let (f2, _) = weighted_volume(m, q, |x| f.value(x).powi(2))?;
    let mut identity: f64 = 0.0;
    let mut excess = f64::INFINITY;
    let (t, _) = crate::grid::gauss_legendre(q.radial);
    for ti in &t {
        let r = 0.5 * (1.0 + ti);
        for j in 0..q.angular {
            let v = f.value(Point::polar(r, TAU * j as f64 / q.angular as f64));
            let c = (1.0 + eps * v).powi(2) + (1.0 - eps * v).powi(2) - 2.0;
            identity = identity.max((c - 2.0 * eps * eps * v * v).abs());
            excess = excess.min(c - eps * eps * v * v);
        }
    }
    let sino = sinogram(m, f, boundary_points, solver)?;
    let max_abs_transform = sino.iter().map(|s| s.value.abs()).fold(0.0, f64::max);
    Ok(InjectivityReport {
        epsilon: eps,
        a_plus: plus.value - base.value,
        a_minus: minus.value - base.value,
        b,
        b_closed_form: 2.0 * eps * eps * f2,
        integral_f_squared: f2,
        pointwise_identity_residual: identity,
        min_pointwise_excess: excess,
        max_abs_transform,
        volume_error: base.error + plus.error + minus.error,
    })
}
