//! Boundary distance tables and enveloping functions.
//!
//! An enveloping function is the family `F(p, x) = d(p, x)` for `p` on the
//! circle `S` of radius `1 + delta` and `x` in the unit disc. Its
//! differentials in `x` sweep each co-sphere, which makes both the metric
//! (as a sup over `p`) and the boundary distances recoverable from it.

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use crate::error::{FinslerError, Result};
use crate::geodesic::GeodesicSolver;
use crate::geom::{wrap_angle, Covector, Point, Vector};
use crate::grid::{periodic_derivative, periodic_peak_hermite, PolarGrid};
use crate::metric::Metric;

/// `d(x_i, x_j)` for `n` equally spaced points on the unit circle, `x_0 = (1, 0)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryDistanceTable {
    pub n: usize,
    /// Row-major, `values[i * n + j] = d(x_i, x_j)`.
    pub values: Vec<f64>,
}

impl BoundaryDistanceTable {
    pub fn from_fn(n: usize, f: impl Fn(usize, usize) -> f64) -> BoundaryDistanceTable {
        let mut values = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    values[i * n + j] = f(i, j);
                }
            }
        }
        BoundaryDistanceTable { n, values }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[(i % self.n) * self.n + j % self.n]
    }

    pub fn angle(&self, i: usize) -> f64 {
        TAU * i as f64 / self.n as f64
    }

    pub fn point(&self, i: usize) -> Point {
        Point::polar(1.0, self.angle(i))
    }

    pub fn max_asymmetry(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.n {
            for j in 0..i {
                worst = worst.max((self.get(i, j) - self.get(j, i)).abs());
            }
        }
        worst
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        self.max_asymmetry() <= tol
    }

    /// Largest `d(i, k) - d(i, j) - d(j, k)` over all triples.
    pub fn triangle_excess(&self) -> f64 {
        let n = self.n;
        let mut worst = f64::NEG_INFINITY;
        for i in 0..n {
            for j in 0..n {
                let dij = self.get(i, j);
                for k in 0..n {
                    worst = worst.max(self.get(i, k) - dij - self.get(j, k));
                }
            }
        }
        worst
    }

    /// Every `step`-th point.
    pub fn subsample(&self, step: usize) -> Result<BoundaryDistanceTable> {
        if step == 0 || self.n % step != 0 {
            return Err(FinslerError::InvalidArgument(format!("cannot subsample {} points by {step}", self.n)));
        }
        Ok(BoundaryDistanceTable::from_fn(self.n / step, |i, j| self.get(i * step, j * step)))
    }

    /// Entrywise `other - self`, minimized over off-diagonal entries.
    pub fn min_margin(&self, other: &BoundaryDistanceTable) -> Result<f64> {
        if self.n != other.n {
            return Err(FinslerError::InvalidArgument("tables of different sizes".into()));
        }
        let mut m = f64::INFINITY;
        for i in 0..self.n {
            for j in 0..self.n {
                if i != j {
                    m = m.min(other.get(i, j) - self.get(i, j));
                }
            }
        }
        Ok(m)
    }

    pub fn max_difference(&self, other: &BoundaryDistanceTable) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

/// Boundary distance table of `m` with `n` points, by shooting between all ordered pairs.
pub fn boundary_distance_table(m: &Metric, n: usize, solver: &GeodesicSolver) -> Result<BoundaryDistanceTable> {
    if n < 3 {
        return Err(FinslerError::InvalidArgument(format!("boundary table needs at least 3 points, got {n}")));
    }
    let rows = crate::par::map_range(n, |i| -> Result<Vec<f64>> {
        let a = Point::polar(1.0, TAU * i as f64 / n as f64);
        let targets: Vec<Point> = (1..n).map(|k| Point::polar(1.0, TAU * ((i + k) % n) as f64 / n as f64)).collect();
        let cs = solver.connect_many(m, a, &targets, 1.0)?;
        let mut row = vec![0.0; n];
        for (k, c) in cs.iter().enumerate() {
            row[(i + k + 1) % n] = c.length;
        }
        Ok(row)
    });
    let mut values = Vec::with_capacity(n * n);
    for r in rows {
        values.extend(r?);
    }
    Ok(BoundaryDistanceTable { n, values })
}

/// `x -> d(p, x)` and its differential on the nodes of a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceField {
    pub source: Point,
    pub values: Vec<f64>,
    pub differentials: Vec<Covector>,
}

/// Visiting order that keeps consecutive targets adjacent: center, then each
/// ring counter-clockwise starting next to the source angle.
fn sweep_order(grid: &PolarGrid, source_angle: f64) -> Vec<usize> {
    let k = grid.angles;
    let start = ((source_angle.rem_euclid(TAU) / TAU) * k as f64).round() as usize % k;
    let mut order = vec![0];
    for ring in 1..=grid.rings + 1 {
        order.extend((0..k).map(|j| grid.index(ring, start + j)));
    }
    order
}

/// Distances from `p` (on the circle of radius `r`) to arbitrary points, with
/// differentials from the arrival momenta.
pub fn distances_from(m: &Metric, p: Point, targets: &[Point], r: f64, solver: &GeodesicSolver) -> Result<Vec<(f64, Covector)>> {
    let cs = solver.connect_many(m, p, targets, r)?;
    Ok(cs.iter().map(|c| (c.length, c.end.xi)).collect())
}

/// `F_p = d(p, .)` on the grid nodes. The differential is the Legendre image
/// of the arrival velocity of the connecting geodesic.
pub fn distance_field(m: &Metric, p: Point, grid: &PolarGrid, solver: &GeodesicSolver) -> Result<DistanceField> {
    let r = p.norm();
    if r <= 1.0 || r > m.radius() * (1.0 + 1e-12) {
        return Err(FinslerError::Domain { point: p, radius: m.radius() });
    }
    let order = sweep_order(grid, p.angle());
    let targets: Vec<Point> = order.iter().map(|&i| grid.node(i)).collect();
    let found = distances_from(m, p, &targets, r, solver)?;
    let mut values = vec![0.0; grid.len()];
    let mut differentials = vec![Covector::ZERO; grid.len()];
    for (&i, (d, xi)) in order.iter().zip(found) {
        values[i] = d;
        differentials[i] = xi;
    }
    Ok(DistanceField { source: p, values, differentials })
}

/// Sampled `F(p, x)` on `S x D` with both first derivatives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvelopingFunction {
    pub delta: f64,
    /// Number of points on `S`, `p_k` at angle `2 pi k / samples`.
    pub samples: usize,
    pub grid: PolarGrid,
    /// `values[k * grid.len() + node]`.
    pub values: Vec<f64>,
    pub dx: Vec<Covector>,
    /// Derivative along `S` with respect to the angle of `p`.
    pub dp: Vec<f64>,
}

impl EnvelopingFunction {
    /// Assembles an envelope from nodal values and spatial differentials;
    /// the `p` derivative is differenced on the `S` grid.
    pub fn from_samples(delta: f64, samples: usize, grid: PolarGrid, values: Vec<f64>, dx: Vec<Covector>) -> Result<EnvelopingFunction> {
        let nodes = grid.len();
        if samples < 5 || values.len() != samples * nodes || dx.len() != samples * nodes {
            return Err(FinslerError::InvalidArgument("envelope samples do not match the grids".into()));
        }
        let h = TAU / samples as f64;
        let mut dp = vec![0.0; samples * nodes];
        for node in 0..nodes {
            let column: Vec<f64> = (0..samples).map(|k| values[k * nodes + node]).collect();
            for (k, d) in periodic_derivative(&column, h).into_iter().enumerate() {
                dp[k * nodes + node] = d;
            }
        }
        Ok(EnvelopingFunction { delta, samples, grid, values, dx, dp })
    }

    pub fn source(&self, k: usize) -> Point {
        Point::polar(1.0 + self.delta, TAU * k as f64 / self.samples as f64)
    }

    pub fn value(&self, k: usize, node: usize) -> f64 {
        self.values[k * self.grid.len() + node]
    }

    pub fn differential(&self, k: usize, node: usize) -> Covector {
        self.dx[k * self.grid.len() + node]
    }

    pub fn dp(&self, k: usize, node: usize) -> f64 {
        self.dp[k * self.grid.len() + node]
    }

    /// `max_p (F(p, y) - F(p, x))`, refined between the `S` samples by Hermite
/// interpolation with the `p` derivatives.
    pub fn recover_distance(&self, x_node: usize, y_node: usize) -> f64 {
        let g: Vec<f64> = (0..self.samples).map(|k| self.value(k, y_node) - self.value(k, x_node)).collect();
        let dg: Vec<f64> = (0..self.samples).map(|k| self.dp(k, y_node) - self.dp(k, x_node)).collect();
        periodic_peak_hermite(&g, &dg, TAU / self.samples as f64)
    }

    /// Boundary distance table on the boundary ring, recovered from the envelope.
    pub fn recovered_table(&self) -> BoundaryDistanceTable {
        let b = self.grid.boundary_nodes().start;
        BoundaryDistanceTable::from_fn(self.grid.angles, |i, j| self.recover_distance(b + i, b + j))
    }

    /// Reconstructs `phi_x(v) = sup_p d_x F_p (v)` at a grid node.
    pub fn metric_from_envelope(&self, node: usize, v: Vector) -> f64 {
        let curve: Vec<Covector> = (0..self.samples).map(|k| self.differential(k, node)).collect();
        support_refined(&curve, v)
    }

    /// Checks the distance-like identity against `m` and the convexity of
    /// `p -> d_x F_p` at every node.
    pub fn validate(&self, m: &Metric) -> Result<EnvelopeValidation> {
        let mut residual: f64 = 0.0;
        let mut failures = Vec::new();
        let mut min_turn = f64::INFINITY;
        for node in 0..self.grid.len() {
            let x = self.grid.node(node);
            let curve: Vec<Covector> = (0..self.samples).map(|k| self.differential(k, node)).collect();
            for xi in &curve {
                residual = residual.max((m.dual_norm(x, *xi)? - 1.0).abs());
            }
            let c = curve_convexity(&curve);
            min_turn = min_turn.min(c.min_turn);
            if c.winding != 1 || c.min_turn <= 0.0 {
                failures.push(node);
            }
        }
        Ok(EnvelopeValidation { distance_like_residual: residual, nonconvex_nodes: failures, min_turn })
    }
}

/// `max_k xi_k(v)` over a closed sampled convex curve, refined by the support
/// value of the circle through the maximizing sample and its neighbours when
/// that circle's maximizer falls between the neighbours.
pub fn support_refined(curve: &[Covector], v: Vector) -> f64 {
    let n = curve.len();
    let (k, best) = curve
        .iter()
        .map(|xi| xi.pair(v))
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .expect("non-empty curve");
    if n < 3 || v.norm() == 0.0 {
        return best;
    }
    let a = curve[(k + n - 1) % n];
    let b = curve[k];
    let c = curve[(k + 1) % n];
    let Some((center, radius)) = circumcircle(a, b, c) else {
        return best;
    };
    let top = center + Covector::new(v.x, v.y).normalized() * radius;
    // The circle's maximizer must lie on the arc from a to c through b.
    let side = |p: Covector, q: Covector| (p - center).cross(q - center);
    if side(a, top) * side(a, c) >= 0.0 && side(top, c) * side(a, c) >= 0.0 && (top - b).norm() <= (a - c).norm() {
        best.max(top.pair(v))
    } else {
        best
    }
}

fn circumcircle(a: Covector, b: Covector, c: Covector) -> Option<(Covector, f64)> {
    let ab = b - a;
    let ac = c - a;
    let d = 2.0 * ab.cross(ac);
    if d.abs() < 1e-300 {
        return None;
    }
    let (l1, l2) = (ab.norm_sq(), ac.norm_sq());
    let off = Covector::new(ac.y * l1 - ab.y * l2, ab.x * l2 - ac.x * l1) / d;
    Some((a + off, off.norm()))
}

/// Winding number around the origin and minimum turning of a closed polygon.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurveConvexity {
    pub winding: i64,
    /// Smallest cross product of consecutive edges, normalized by their lengths.
    pub min_turn: f64,
}

pub fn curve_convexity(curve: &[Covector]) -> CurveConvexity {
    let n = curve.len();
    let mut total = 0.0;
    let mut min_turn = f64::INFINITY;
    for k in 0..n {
        let a = curve[k];
        let b = curve[(k + 1) % n];
        let c = curve[(k + 2) % n];
        total += wrap_angle(b.angle() - a.angle());
        let e1 = b - a;
        let e2 = c - b;
        let l = e1.norm() * e2.norm();
        let turn = if l > 0.0 { e1.cross(e2) / l } else { f64::NEG_INFINITY };
        min_turn = min_turn.min(turn);
    }
    CurveConvexity { winding: (total / TAU).round() as i64, min_turn }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeValidation {
    /// `max |phi*(d_x F_p) - 1|` over all nodes and sources.
    pub distance_like_residual: f64,
    /// Nodes where `p -> d_x F_p` is not a positively oriented convex loop.
    pub nonconvex_nodes: Vec<usize>,
    pub min_turn: f64,
}

impl EnvelopeValidation {
    pub fn is_valid(&self, tol: f64) -> bool {
        self.distance_like_residual < tol && self.nonconvex_nodes.is_empty()
    }
}

/// Tabulates `F(p, x) = d(p, x)` for `samples` points `p` on the circle of
/// radius `1 + delta` and the nodes of `grid`.
pub fn enveloping_function(
    m: &Metric,
    delta: f64,
    samples: usize,
    grid: &PolarGrid,
    solver: &GeodesicSolver,
) -> Result<EnvelopingFunction> {
    if !(delta > 0.0) || 1.0 + delta > m.radius() * (1.0 + 1e-12) {
        return Err(FinslerError::InvalidArgument(format!(
            "envelope radius 1 + {delta} must lie in the metric domain of radius {}",
            m.radius()
        )));
    }
    if samples < 5 {
        return Err(FinslerError::InvalidArgument(format!("envelope needs at least 5 sources, got {samples}")));
    }
    let fields = crate::par::map_range(samples, |k| {
        distance_field(m, Point::polar(1.0 + delta, TAU * k as f64 / samples as f64), grid, solver)
    });
    let mut values = Vec::with_capacity(samples * grid.len());
    let mut dx = Vec::with_capacity(samples * grid.len());
    for f in fields {
        let f = f?;
        values.extend(f.values);
        dx.extend(f.differentials);
    }
    EnvelopingFunction::from_samples(delta, samples, *grid, values, dx)
}
