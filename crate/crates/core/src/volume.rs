//! Holmes–Thompson area of the unit disc by four independent routes.
//!
//! In dimension two the HT area is `(1/pi) * integral over D of area(B*_x)`,
//! with `area(B*_x) = 1/2 * integral of phi*_x(theta)^-2 d theta`. The other
//! routes use only boundary data: an enveloping function on `S x dD`, the
//! boundary distance function, or its rotation-invariant profile.

use std::collections::BTreeMap;
use std::f64::consts::{PI, TAU};

use serde::{Deserialize, Serialize};

use crate::envelope::{BoundaryDistanceTable, EnvelopingFunction};
use crate::error::{FinslerError, Result};
use crate::geom::{Covector, Point, Vector};
use crate::grid::{gauss_legendre, periodic_derivative};
use crate::metric::Metric;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VolumeMethod {
    Fiber,
    EnvelopeBoundary,
    BdFormula,
    RotInvariant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeResult {
    pub value: f64,
    pub method: VolumeMethod,
    pub resolution: BTreeMap<String, usize>,
    /// Difference from the same computation at half resolution.
    pub error: f64,
}

impl VolumeResult {
    fn new(value: f64, method: VolumeMethod, resolution: &[(&str, usize)], error: f64) -> VolumeResult {
        let resolution = resolution.iter().map(|(k, v)| (k.to_string(), *v)).collect();
        VolumeResult { value, method, resolution, error }
    }
}

/// Base (Gauss–Legendre radial x trapezoid angular) and fiber resolutions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FiberQuadrature {
    pub radial: usize,
    pub angular: usize,
    pub fiber: usize,
}

impl Default for FiberQuadrature {
    fn default() -> Self {
        FiberQuadrature { radial: 24, angular: 64, fiber: 64 }
    }
}

impl FiberQuadrature {
    pub fn validate(&self) -> Result<()> {
        if self.radial < 2 || self.angular < 4 || self.fiber < 4 {
            return Err(FinslerError::InvalidArgument(format!("fiber quadrature too coarse: {self:?}")));
        }
        Ok(())
    }

    fn halved(&self) -> FiberQuadrature {
        FiberQuadrature { radial: self.radial / 2, angular: self.angular / 2, fiber: self.fiber / 2 }
    }

    pub fn scaled(&self, factor: f64) -> FiberQuadrature {
        let s = |n: usize| ((n as f64 * factor).round() as usize).max(2);
        FiberQuadrature { radial: s(self.radial), angular: s(self.angular), fiber: s(self.fiber) }
    }
}

/// `integral over the unit disc of f`, Gauss–Legendre in `r`, trapezoid in angle.
pub fn integrate_disc(radial: usize, angular: usize, f: impl Fn(Point) -> f64 + Sync) -> f64 {
    let (t, w) = gauss_legendre(radial);
    let rings = crate::par::map_range(radial, |i| {
        let r = 0.5 * (1.0 + t[i]);
        let ring: f64 = (0..angular).map(|j| f(Point::polar(r, TAU * j as f64 / angular as f64))).sum();
        0.5 * w[i] * r * ring * TAU / angular as f64
    });
    rings.into_iter().sum()
}

/// HT area density at `x`: `(1/pi) * area(B*_x)`, trapezoid over `fiber` co-directions.
pub fn ht_density(m: &Metric, x: Point, fiber: usize) -> Result<f64> {
    let mut s = 0.0;
    for k in 0..fiber {
        let n = m.dual_norm(x, Covector::from_angle(TAU * k as f64 / fiber as f64))?;
        s += 1.0 / (n * n);
    }
    Ok(0.5 * s * TAU / fiber as f64 / PI)
}

fn weighted_volume_at(m: &Metric, q: FiberQuadrature, w: &(dyn Fn(Point) -> f64 + Sync)) -> f64 {
    integrate_disc(q.radial, q.angular, |x| w(x) * ht_density(m, x, q.fiber).unwrap_or(f64::NAN))
}

/// `integral over D of w dvol_phi` with a half-resolution error estimate.
pub fn weighted_volume(m: &Metric, q: FiberQuadrature, w: impl Fn(Point) -> f64 + Sync) -> Result<(f64, f64)> {
    q.validate()?;
    let v = weighted_volume_at(m, q, &w);
    let half = weighted_volume_at(m, q.halved(), &w);
    if !v.is_finite() {
        return Err(FinslerError::InvalidMetric("dual norm failed inside the disc".into()));
    }
    Ok((v, (v - half).abs()))
}

/// HT area of the unit disc by direct fiber quadrature.
pub fn ht_volume_fiber(m: &Metric, q: FiberQuadrature) -> Result<VolumeResult> {
    let (v, err) = weighted_volume(m, q, |_| 1.0)?;
    Ok(VolumeResult::new(
        v,
        VolumeMethod::Fiber,
        &[("radial", q.radial), ("angular", q.angular), ("fiber", q.fiber)],
        err,
    ))
}

/// `integral over D of c^2 sqrt(det a)`, which is the area for Riemannian families.
pub fn riemannian_area(m: &Metric, radial: usize, angular: usize) -> f64 {
    integrate_disc(radial, angular, |x| m.area_density(x))
}

fn envelope_boundary_integral(env: &EnvelopingFunction, step: usize) -> f64 {
    let nodes = env.grid.len();
    let b = env.grid.boundary_nodes().start;
    let mp = env.samples / step;
    let kx = env.grid.angles / step;
    let hp = TAU / mp as f64;
    let hx = TAU / kx as f64;
    let mut total = 0.0;
    for jx in 0..kx {
        let node = b + jx * step;
        let theta = env.grid.angle(jx * step);
        let tangent = Vector::new(-theta.sin(), theta.cos());
        let column: Vec<f64> = (0..mp).map(|k| env.values[k * step * nodes + node]).collect();
        let dp = if step == 1 {
            (0..mp).map(|k| env.dp(k, node)).collect()
        } else {
            periodic_derivative(&column, hp)
        };
        for (k, dpk) in dp.iter().enumerate() {
            let fx = env.differential(k * step, node).pair(tangent);
            total += fx * dpk;
        }
    }
    -total * hp * hx / TAU
}

/// HT area from `F` restricted to `S x dD`:
/// `-(1/2 pi) * double integral of (dF/dx)(dF/dp)` over the boundary torus.
pub fn ht_volume_envelope_boundary(env: &EnvelopingFunction) -> Result<VolumeResult> {
    let v = envelope_boundary_integral(env, 1);
    let err = if env.samples % 2 == 0 && env.grid.angles % 2 == 0 && env.samples >= 10 {
        (v - envelope_boundary_integral(env, 2)).abs()
    } else {
        f64::NAN
    };
    Ok(VolumeResult::new(
        v,
        VolumeMethod::EnvelopeBoundary,
        &[("sources", env.samples), ("boundary", env.grid.angles)],
        err,
    ))
}

/// Boundary formula on a table. Each row `i` is integrated over the offset
/// `k = j - i` in `[0, N]`, where `f(i, i + k)` is smooth; both ends are the
/// diagonal, reached from opposite sides, and use one-sided second-order
/// stencils.
fn bd_integral(t: &BoundaryDistanceTable) -> f64 {
    let n = t.n as isize;
    let h = TAU / t.n as f64;
    let f = |i: isize, j: isize| t.get(i.rem_euclid(n) as usize, j.rem_euclid(n) as usize);
    let mut total = 0.0;
    for i in 0..n {
        let mut row = 0.0;
        for k in 0..=n {
            let j = i + k;
            let (fx, fy) = if k == 0 {
                (
                    (3.0 * f(i, i) - 4.0 * f(i - 1, i) + f(i - 2, i)) / (2.0 * h),
                    (-3.0 * f(i, i) + 4.0 * f(i, i + 1) - f(i, i + 2)) / (2.0 * h),
                )
            } else if k == n {
                (
                    (-3.0 * f(i, i) + 4.0 * f(i + 1, i) - f(i + 2, i)) / (2.0 * h),
                    (3.0 * f(i, i) - 4.0 * f(i, i - 1) + f(i, i - 2)) / (2.0 * h),
                )
            } else {
                ((f(i + 1, j) - f(i - 1, j)) / (2.0 * h), (f(i, j + 1) - f(i, j - 1)) / (2.0 * h))
            };
            let w = if k == 0 || k == n { 0.5 } else { 1.0 };
            row += w * fx * fy;
        }
        total += row;
    }
    -total * h * h / TAU
}

/// HT area from the boundary distance function alone.
pub fn volume_from_bd(t: &BoundaryDistanceTable) -> Result<VolumeResult> {
    if t.n < 8 || t.n % 2 != 0 {
        return Err(FinslerError::InvalidArgument(format!("boundary formula needs an even table of at least 8 points, got {}", t.n)));
    }
    let v = bd_integral(t);
    let half = bd_integral(&t.subsample(2)?);
    Ok(VolumeResult::new(v, VolumeMethod::BdFormula, &[("boundary", t.n)], (v - half).abs()))
}

fn derivative_on_interval(f: &[f64], h: f64) -> Vec<f64> {
    let n = f.len();
    (0..n)
        .map(|i| {
            if i == 0 {
                (-3.0 * f[0] + 4.0 * f[1] - f[2]) / (2.0 * h)
            } else if i == n - 1 {
                (3.0 * f[n - 1] - 4.0 * f[n - 2] + f[n - 3]) / (2.0 * h)
            } else {
                (f[i + 1] - f[i - 1]) / (2.0 * h)
            }
        })
        .collect()
}

fn rotinv_integral(f0: &[f64]) -> f64 {
    let h = PI / (f0.len() - 1) as f64;
    let d = derivative_on_interval(f0, h);
    let sq: Vec<f64> = d.iter().map(|v| v * v).collect();
    let inner: f64 = sq[1..sq.len() - 1].iter().sum();
    2.0 * h * (inner + 0.5 * (sq[0] + sq[sq.len() - 1]))
}

/// `2 * integral over [0, pi] of f0'^2` for a profile sampled at `t_i = i pi / n`.
pub fn volume_rotinv(f0: &[f64]) -> Result<VolumeResult> {
    if f0.len() < 5 {
        return Err(FinslerError::InvalidArgument("profile needs at least 5 samples".into()));
    }
    if f0[0].abs() > 1e-12 {
        return Err(FinslerError::InvalidArgument(format!("profile must vanish at 0, got {}", f0[0])));
    }
    let v = rotinv_integral(f0);
    let n = f0.len() - 1;
    let err = if n % 2 == 0 && n >= 8 {
        let half: Vec<f64> = f0.iter().step_by(2).copied().collect();
        (v - rotinv_integral(&half)).abs()
    } else {
        f64::NAN
    };
    Ok(VolumeResult::new(v, VolumeMethod::RotInvariant, &[("samples", n)], err))
}

/// Profile `f0(2 pi k / N)`, `k = 0..=N/2`, averaged over the rows of a table.
pub fn rotinv_profile(t: &BoundaryDistanceTable) -> Vec<f64> {
    (0..=t.n / 2)
        .map(|k| (0..t.n).map(|i| t.get(i, i + k)).sum::<f64>() / t.n as f64)
        .collect()
}

/// Largest second difference of a profile (non-positive for concave profiles).
pub fn max_second_difference(f0: &[f64]) -> f64 {
    f0.windows(3).map(|w| w[0] - 2.0 * w[1] + w[2]).fold(f64::NEG_INFINITY, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::ScalarField;

    fn cap_profile(alpha0: f64, t: f64) -> f64 {
        (alpha0.cos().powi(2) + alpha0.sin().powi(2) * t.cos()).clamp(-1.0, 1.0).acos()
    }

    #[test]
    fn fiber_volume_of_flat_and_randers_discs_is_pi() {
        let q = FiberQuadrature::default();
        let e = ht_volume_fiber(&Metric::euclidean(), q).unwrap();
        assert!((e.value - PI).abs() < 1e-10, "{}", e.value);
        let r = ht_volume_fiber(&Metric::randers_constant([0.5, 0.0]).unwrap(), q).unwrap();
        assert!((r.value - PI).abs() < 1e-4, "{}", r.value);
    }

    #[test]
    fn fiber_volume_of_conformal_metric_is_weighted_area() {
        let u = ScalarField::gaussian(0.3, [0.2, -0.1], 0.4);
        let m = Metric::conformal(u.clone()).unwrap();
        let v = ht_volume_fiber(&m, FiberQuadrature::default()).unwrap();
        let exact = integrate_disc(48, 128, |x| (2.0 * u.value(x)).exp());
        assert!((v.value - exact).abs() < 1e-4 * exact);
        assert!((riemannian_area(&m, 48, 128) - exact).abs() < 1e-10);
    }

    #[test]
    fn cap_fiber_volume() {
        let a = PI / 3.0;
        let v = ht_volume_fiber(&Metric::spherical_cap(a).unwrap(), FiberQuadrature::default()).unwrap();
        assert!((v.value - TAU * (1.0 - a.cos())).abs() < 1e-6);
    }

    #[test]
    fn bd_formula_on_analytic_tables() {
        for &n in &[64usize, 128, 256] {
            let t = BoundaryDistanceTable::from_fn(n, |i, j| 2.0 * (TAU * (i as f64 - j as f64) / n as f64 / 2.0).sin().abs());
            let v = volume_from_bd(&t).unwrap();
            assert!((v.value - PI).abs() < 1e-2, "{n}: {}", v.value);
            assert!(v.error >= (v.value - PI).abs() * 0.5);
        }
        let a = PI / 3.0;
        let n = 128;
        let t = BoundaryDistanceTable::from_fn(n, |i, j| {
            let d = (TAU * (j as f64 - i as f64) / n as f64).rem_euclid(TAU);
            cap_profile(a, d.min(TAU - d))
        });
        let exact = TAU * (1.0 - a.cos());
        assert!((volume_from_bd(&t).unwrap().value - exact).abs() < 1.5e-2 * exact);
        // Constant one-form shift: d(x, y) = |y - x| + <b, y - x>.
        let t = BoundaryDistanceTable::from_fn(n, |i, j| {
            let (p, q) = (t.point(i), t.point(j));
            (q - p).norm() + 0.5 * (q.x - p.x)
        });
        assert!((volume_from_bd(&t).unwrap().value - PI).abs() < 1e-2);
    }

    #[test]
    fn rotinv_profiles() {
        let n = 400;
        let ts: Vec<f64> = (0..=n).map(|i| PI * i as f64 / n as f64).collect();
        let e: Vec<f64> = ts.iter().map(|t| 2.0 * (t / 2.0).sin()).collect();
        assert!((volume_rotinv(&e).unwrap().value - PI).abs() < 1e-3 * PI);
        let a = PI / 3.0;
        let c: Vec<f64> = ts.iter().map(|&t| cap_profile(a, t)).collect();
        let exact = TAU * (1.0 - a.cos());
        assert!((volume_rotinv(&c).unwrap().value - exact).abs() < 1e-3 * exact);
        assert!(max_second_difference(&c) <= 1e-12);
        assert!(volume_rotinv(&[0.1, 0.2, 0.3, 0.4, 0.5]).is_err());
    }

    #[test]
    fn rotinv_agrees_with_bd_formula_on_invariant_tables() {
        let n = 256;
        let a = PI / 3.0;
        let t = BoundaryDistanceTable::from_fn(n, |i, j| {
            let d = (TAU * (j as f64 - i as f64) / n as f64).rem_euclid(TAU);
            cap_profile(a, d.min(TAU - d))
        });
        let bd = volume_from_bd(&t).unwrap().value;
        let rot = volume_rotinv(&rotinv_profile(&t)).unwrap().value;
        assert!((bd - rot).abs() < 1e-3 * rot, "{bd} {rot}");
    }
}
