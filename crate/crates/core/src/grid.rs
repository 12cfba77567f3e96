//! Sampling grids on the disc and the circle, and the quadrature and
//! differencing rules used on them.

use std::f64::consts::{PI, TAU};
use std::ops::{Add, Mul};

use serde::{Deserialize, Serialize};

use crate::error::{FinslerError, Result};
use crate::geom::Point;

/// Polar grid on the closed unit disc: the center, `rings` interior rings at
/// radii `k / (rings + 1)`, and the boundary circle, each ring carrying
/// `angles` equally spaced nodes starting at angle 0.
///
/// Node 0 is the center; ring `k` (1-based, `rings + 1` is the boundary)
/// angle `j` is node `1 + (k - 1) * angles + j`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolarGrid {
    pub rings: usize,
    pub angles: usize,
}

impl PolarGrid {
    pub fn new(rings: usize, angles: usize) -> Result<PolarGrid> {
        if angles < 3 {
            return Err(FinslerError::InvalidArgument(format!("polar grid needs at least 3 angles, got {angles}")));
        }
        Ok(PolarGrid { rings, angles })
    }

    /// Center plus boundary circle only.
    pub fn boundary(angles: usize) -> Result<PolarGrid> {
        PolarGrid::new(0, angles)
    }

    pub fn len(&self) -> usize {
        1 + (self.rings + 1) * self.angles
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn ring_radius(&self, ring: usize) -> f64 {
        ring as f64 / (self.rings + 1) as f64
    }

    pub fn angle(&self, j: usize) -> f64 {
        TAU * j as f64 / self.angles as f64
    }

    pub fn index(&self, ring: usize, j: usize) -> usize {
        debug_assert!(ring >= 1 && ring <= self.rings + 1);
        1 + (ring - 1) * self.angles + j % self.angles
    }

    /// `(ring, angle index)` of a node; the center is ring 0.
    pub fn locate(&self, node: usize) -> (usize, usize) {
        if node == 0 {
            (0, 0)
        } else {
            (1 + (node - 1) / self.angles, (node - 1) % self.angles)
        }
    }

    pub fn node(&self, node: usize) -> Point {
        let (ring, j) = self.locate(node);
        if ring == 0 {
            Point::ZERO
        } else {
            Point::polar(self.ring_radius(ring), self.angle(j))
        }
    }

    pub fn nodes(&self) -> Vec<Point> {
        (0..self.len()).map(|i| self.node(i)).collect()
    }

    pub fn boundary_nodes(&self) -> std::ops::Range<usize> {
        let start = self.index(self.rings + 1, 0);
        start..start + self.angles
    }

    pub fn is_boundary(&self, node: usize) -> bool {
        self.boundary_nodes().contains(&node)
    }

    pub fn interior_nodes(&self) -> std::ops::Range<usize> {
        0..self.boundary_nodes().start
    }

    /// Bilinear interpolation in `(r, theta)` of nodal values; inside the
    /// first ring the center value is blended with the ring value.
    pub fn interpolate<T>(&self, values: &[T], p: Point) -> T
    where
        T: Copy + Add<Output = T> + Mul<f64, Output = T>,
    {
        assert_eq!(values.len(), self.len(), "nodal values do not match the grid");
        let dr = 1.0 / (self.rings + 1) as f64;
        let r = p.norm().min(1.0);
        let u = (r / dr).min((self.rings + 1) as f64);
        let k = (u.floor() as usize).min(self.rings);
        let s = u - k as f64;
        let theta = p.angle().rem_euclid(TAU) / TAU * self.angles as f64;
        let j = (theta.floor() as usize) % self.angles;
        let t = theta - theta.floor();
        let on_ring = |ring: usize| {
            let a = values[self.index(ring, j)];
            let b = values[self.index(ring, j + 1)];
            a * (1.0 - t) + b * t
        };
        let inner = if k == 0 { values[0] } else { on_ring(k) };
        inner * (1.0 - s) + on_ring(k + 1) * s
    }
}

/// Gauss–Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..(n + 1) / 2 {
        let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let kf = k as f64;
                let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
                p0 = p1;
                p1 = p2;
            }
            let p = if n == 0 { 1.0 } else if n == 1 { x } else { p1 };
            let pm = if n == 1 { 1.0 } else { p0 };
            dp = n as f64 * (x * p - pm) / (x * x - 1.0);
            let dx = p / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

/// Derivative of periodic samples on a uniform grid of spacing `h`
/// (fourth-order centered stencil).
pub fn periodic_derivative(values: &[f64], h: f64) -> Vec<f64> {
    let n = values.len();
    let at = |i: isize| values[i.rem_euclid(n as isize) as usize];
    (0..n as isize)
        .map(|i| (at(i - 2) - 8.0 * at(i - 1) + 8.0 * at(i + 1) - at(i + 2)) / (12.0 * h))
        .collect()
}

/// Composite trapezoid rule over samples at the given abscissae.
pub fn trapezoid(xs: &[f64], ys: &[f64]) -> f64 {
    xs.windows(2).zip(ys.windows(2)).map(|(x, y)| 0.5 * (x[1] - x[0]) * (y[0] + y[1])).sum()
}

/// Refines a discrete maximum of periodic samples by the vertex of the
/// parabola through the peak and its neighbours. Returns `(index, value)`
/// with `index` fractional.
pub fn periodic_peak(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    let (k, &v) = values
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .expect("non-empty samples");
    if n < 3 {
        return (k as f64, v);
    }
    let a = values[(k + n - 1) % n];
    let c = values[(k + 1) % n];
    let curv = a - 2.0 * v + c;
    if curv >= 0.0 {
        return (k as f64, v);
    }
    let off = (0.5 * (a - c) / curv).clamp(-0.5, 0.5);
    (k as f64 + off, v - 0.125 * (a - c) * (a - c) / curv)
}

/// Maximum of periodic samples with known derivatives on a uniform grid of
/// spacing `h`, from the cubic Hermite interpolant on the cells adjacent to
/// the largest sample.
pub fn periodic_peak_hermite(values: &[f64], derivs: &[f64], h: f64) -> f64 {
    let n = values.len();
    let (k, &v) = values
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .expect("non-empty samples");
    let mut best = v;
    for i in [(k + n - 1) % n, k] {
        let j = (i + 1) % n;
        let (y0, y1, d0, d1) = (values[i], values[j], derivs[i] * h, derivs[j] * h);
        // p(s) = a s^3 + b s^2 + d0 s + y0 on s in [0, 1].
        let a = 2.0 * (y0 - y1) + d0 + d1;
        let b = 3.0 * (y1 - y0) - 2.0 * d0 - d1;
        let p = |s: f64| ((a * s + b) * s + d0) * s + y0;
        let mut roots = Vec::with_capacity(2);
        if a.abs() < 1e-14 * (b.abs() + d0.abs()) {
            if b != 0.0 {
                roots.push(-d0 / (2.0 * b));
            }
        } else {
            let disc = b * b - 3.0 * a * d0;
            if disc >= 0.0 {
                let q = -(b + b.signum() * disc.sqrt());
                roots.push(q / (3.0 * a));
                if q != 0.0 {
                    roots.push(d0 / q);
                }
            }
        }
        for s in roots {
            if (0.0..=1.0).contains(&s) {
                best = best.max(p(s));
            }
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn node_layout() {
        let g = PolarGrid::new(2, 8).unwrap();
        assert_eq!(g.len(), 25);
        assert_eq!(g.node(0), Point::ZERO);
        assert!((g.node(g.index(1, 0)).x - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(g.boundary_nodes(), 17..25);
        assert!((g.node(g.index(3, 2)).y - 1.0).abs() < 1e-15);
        for i in 0..g.len() {
            let (k, j) = g.locate(i);
            if k > 0 {
                assert_eq!(g.index(k, j), i);
            }
        }
    }

    #[test]
    fn interpolation_reproduces_linear_data_on_nodes_and_radial_profiles() {
        let g = PolarGrid::new(4, 32).unwrap();
        let vals: Vec<f64> = g.nodes().iter().map(|p| 1.0 + 2.0 * p.norm()).collect();
        for i in 0..g.len() {
            assert!((g.interpolate(&vals, g.node(i)) - vals[i]).abs() < 1e-14);
        }
        let p = Point::polar(0.537, 1.1);
        // Angularly constant, radially linear data is reproduced exactly.
        assert!((g.interpolate(&vals, p) - (1.0 + 2.0 * 0.537)).abs() < 1e-12);
    }

    #[test]
    fn gauss_legendre_integrates_polynomials_exactly() {
        for n in 1..12 {
            let (x, w) = gauss_legendre(n);
            for deg in 0..2 * n {
                let q: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(deg as i32)).sum();
                let exact = if deg % 2 == 1 { 0.0 } else { 2.0 / (deg as f64 + 1.0) };
                assert!((q - exact).abs() < 1e-13, "n={n} deg={deg}");
            }
        }
    }

    #[test]
    fn periodic_derivative_of_sine() {
        let n = 64;
        let h = TAU / n as f64;
        let v: Vec<f64> = (0..n).map(|i| (i as f64 * h).sin()).collect();
        let d = periodic_derivative(&v, h);
        for i in 0..n {
            assert!((d[i] - (i as f64 * h).cos()).abs() < 1e-5);
        }
    }

    #[test]
    fn hermite_peak_of_a_cosine() {
        let n = 24;
        let h = TAU / n as f64;
        let v: Vec<f64> = (0..n).map(|i| (i as f64 * h - 1.234).cos()).collect();
        let d: Vec<f64> = (0..n).map(|i| -(i as f64 * h - 1.234).sin()).collect();
        let m = periodic_peak_hermite(&v, &d, h);
        assert!(m <= 1.0 + 1e-6 && m > 1.0 - 1e-5, "{m}");
    }

    #[test]
    fn peak_refinement_is_exact_for_parabolas() {
        let v: Vec<f64> = (0..10).map(|i| 3.0 - (i as f64 - 4.3).powi(2)).collect();
        let (k, m) = periodic_peak(&v);
        assert!((k - 4.3).abs() < 1e-12 && (m - 3.0).abs() < 1e-12);
    }
}
