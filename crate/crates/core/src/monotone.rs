//! Comparison of two simple metrics with ordered boundary distances.
//!
//! Given a source metric `phi'` and a target `phi` on the unit disc, `Psi`
//! sends each `phi'`-unit vector to the `phi`-unit velocity of the
//! `phi`-geodesic with the same boundary endpoints, at the linearly rescaled
//! time. Composing with the gradient field of `F'_p = d_{phi'}(p, .)` gives
//! maps `H_p` of the disc that fix the boundary, and `F''_p = F'_p o H_p^-1`
//! is an enveloping function with the boundary data of `phi'` whose metric
//! majorizes `phi` when `bd_{phi'} >= bd_phi`.

use std::collections::BTreeMap;
use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::envelope::{boundary_distance_table, curve_convexity, enveloping_function, EnvelopingFunction};
use crate::error::{FinslerError, Result};
use crate::field::ScalarField;
use crate::geodesic::{velocity, Chord, GeodesicSolver, State};
use crate::geom::{Covector, Point, Vector};
use crate::grid::PolarGrid;
use crate::metric::{Coefficient, Metric, MetricFamily, Perturbation};
use crate::volume::{ht_volume_fiber, volume_from_bd, FiberQuadrature, VolumeResult};

/// Source metric `phi'`, target metric `phi` and the solver shared by both.
#[derive(Debug, Clone)]
pub struct PsiContext {
    pub source: Metric,
    pub target: Metric,
    pub solver: GeodesicSolver,
}

/// `Psi(v)` with the data it was computed from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PsiImage {
    pub base: Point,
    pub vector: Vector,
    /// The `phi'`-chord through the input vector.
    pub chord: Chord,
    /// Time of the input along its `phi'`-chord, measured from the entry point.
    pub t_source: f64,
    pub length_source: f64,
    pub length_target: f64,
    /// Whether the tangency branch was used.
    pub tangent: bool,
}

impl PsiImage {
    /// `|base - x| + |vector - v|`, distance in the tangent bundle of the plane.
    pub fn displacement(&self, x: Point, v: Vector) -> f64 {
        (self.base - x).norm() + (self.vector - v).norm()
    }
}

impl PsiContext {
    pub fn new(source: Metric, target: Metric, solver: GeodesicSolver) -> PsiContext {
        PsiContext { source, target, solver }
    }

    /// Both metrics must be simple on the unit disc.
    pub fn check_simple(&self, boundary_samples: usize, direction_samples: usize) -> Result<()> {
        for (name, m) in [("source", &self.source), ("target", &self.target)] {
            let r = self.solver.simplicity_report(m, boundary_samples, direction_samples)?;
            if !r.is_simple() {
                return Err(FinslerError::InvalidMetric(format!("{name} metric is not simple: {r:?}")));
            }
        }
        Ok(())
    }

    /// `Psi` at a vector based at `x`; `v` is rescaled to `phi'`-unit length.
    pub fn psi(&self, x: Point, v: Vector) -> Result<PsiImage> {
        self.psi_with(x, v, false)
    }

    /// As [`PsiContext::psi`]; `force_chord` bypasses the tangency branch.
    pub fn psi_with(&self, x: Point, v: Vector, force_chord: bool) -> Result<PsiImage> {
        let chord = self.solver.exit_chord(&self.source, x, v)?;
        let t_source = -chord.tau_minus;
        if chord.tangent && !force_chord || chord.ell == 0.0 {
            let n = self.target.norm(x, chord.u)?;
            return Ok(PsiImage {
                base: x,
                vector: chord.u / n,
                chord,
                t_source,
                length_source: chord.ell,
                length_target: 0.0,
                tangent: true,
            });
        }
        let c = self.solver.connect_endpoint(&self.target, chord.p_minus, chord.p_plus, 1.0)?;
        let t = t_source * c.length / chord.ell;
        let state = self.solver.flow_for(&self.target, c.initial, t)?;
        Ok(PsiImage {
            base: state.x,
            vector: velocity(&self.target, state),
            chord,
            t_source,
            length_source: chord.ell,
            length_target: c.length,
            tangent: false,
        })
    }

    /// `(F'_p(x), d_x F'_p)` by a direct `phi'` connection within radius `|p|`.
    pub fn source_distance(&self, p: Point, x: Point) -> Result<(f64, Covector)> {
        let c = self.solver.connect_endpoint(&self.source, p, x, p.norm())?;
        Ok((c.length, c.end.xi))
    }

    fn h_from_differential(&self, x: Point, xi: Covector) -> Result<Point> {
        let g = self.source.legendre_inverse(x, xi)?;
        Ok(self.psi(x, g)?.base)
    }

    /// `H_p(x)` at a node of `env`, using the stored differential of `F'_p`.
    pub fn h_map(&self, env: &EnvelopingFunction, k: usize, node: usize) -> Result<Point> {
        self.h_from_differential(env.grid.node(node), env.differential(k, node))
    }

    /// `H_p(x)` at an arbitrary point.
    pub fn h_map_at(&self, p: Point, x: Point) -> Result<Point> {
        let (_, xi) = self.source_distance(p, x)?;
        self.h_from_differential(x, xi)
    }

    /// `dH_p(x)` by central differences of step `h`; `j[r][c] = d H_r / d x_c`.
    pub fn h_jacobian(&self, p: Point, x: Point, h: f64) -> Result<[[f64; 2]; 2]> {
        let mut j = [[0.0; 2]; 2];
        for c in 0..2 {
            let e = if c == 0 { Vector::new(h, 0.0) } else { Vector::new(0.0, h) };
            let plus = self.h_map_at(p, x.offset(e))?;
            let minus = self.h_map_at(p, x.offset(-e))?;
            j[0][c] = (plus.x - minus.x) / (2.0 * h);
            j[1][c] = (plus.y - minus.y) / (2.0 * h);
        }
        Ok(j)
    }

    /// `H_p^-1(y)` by fixed-point iteration on direct evaluations of `H_p`.
    pub fn invert_h_direct(&self, p: Point, y: Point, guess: Point, tol: f64) -> Result<Point> {
        let mut x = guess;
        let mut residual = f64::INFINITY;
        for _ in 0..MAX_INVERSION_STEPS {
            let d = self.h_map_at(p, x)? - y;
            residual = d.norm();
            if residual < tol {
                return Ok(x);
            }
            x = x - d;
            if x.norm() > 1.0 {
                x = x * (1.0 / x.norm());
            }
        }
        Err(FinslerError::NoConvergence { operation: "H_p inversion", iterations: MAX_INVERSION_STEPS, residual, last_iterate: x.norm() })
    }

    /// `(F''_p(y), d_y F''_p, H_p^-1(y))` from `F''_p = F'_p o H_p^-1`.
    pub fn f_double_prime_at(&self, p: Point, y: Point, guess: Point) -> Result<(f64, Covector, Point)> {
        let x = self.invert_h_direct(p, y, guess, 1e-10)?;
        let (value, xi) = self.source_distance(p, x)?;
        let j = self.h_jacobian(p, x, JACOBIAN_STEP)?;
        let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
        if !(det.abs() > 1e-12) {
            return Err(FinslerError::InvalidMetric(format!("H_p is singular near ({:.3}, {:.3})", x.x, x.y)));
        }
        // d F'' = d F' o (dH)^-1, applied to covectors as (dH)^-T.
        let inv = [[j[1][1] / det, -j[0][1] / det], [-j[1][0] / det, j[0][0] / det]];
        let dy = Covector::new(xi.x * inv[0][0] + xi.y * inv[1][0], xi.x * inv[0][1] + xi.y * inv[1][1]);
        Ok((value, dy, x))
    }
}

const MAX_INVERSION_STEPS: usize = 100;
const JACOBIAN_STEP: f64 = 1e-4;

/// Inverts `y = x + D(x)` for a displacement field `D` sampled on `grid`,
/// by the iteration `x <- y - D(x)` with bilinear interpolation of `D`.
pub fn invert_h(grid: &PolarGrid, displacement: &[Vector], y: Point) -> Result<Point> {
    let mut x = y;
    let mut residual = f64::INFINITY;
    for _ in 0..MAX_INVERSION_STEPS {
        let d = grid.interpolate(displacement, x);
        let next = y.offset(-d);
        residual = (x.offset(d) - y).norm();
        if residual < 1e-8 {
            return Ok(x);
        }
        x = next;
    }
    Err(FinslerError::NoConvergence { operation: "H_p grid inversion", iterations: MAX_INVERSION_STEPS, residual, last_iterate: x.norm() })
}

/// `F''` on the grids of `F'`, the maps `H_p` it was built from, and `F'` itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FDoublePrime {
    pub envelope: EnvelopingFunction,
    pub source_envelope: EnvelopingFunction,
    /// `H_p(x) - x` at `[k * nodes + node]`.
    pub displacements: Vec<Vector>,
}

impl FDoublePrime {
    /// `max |F'' - F'|` over `S x dD`.
    pub fn boundary_identity_error(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for k in 0..self.envelope.samples {
            for node in self.envelope.grid.boundary_nodes() {
                worst = worst.max((self.envelope.value(k, node) - self.source_envelope.value(k, node)).abs());
            }
        }
        worst
    }

    /// `max |H_p(x) - x|` over the boundary nodes.
    pub fn boundary_displacement(&self) -> f64 {
        let n = self.envelope.grid.len();
        let mut worst: f64 = 0.0;
        for k in 0..self.envelope.samples {
            for node in self.envelope.grid.boundary_nodes() {
                worst = worst.max(self.displacements[k * n + node].norm());
            }
        }
        worst
    }

    pub fn displacement_field(&self, k: usize) -> &[Vector] {
        let n = self.envelope.grid.len();
        &self.displacements[k * n..(k + 1) * n]
    }
}

/// Builds `F'` for `phi'`, samples every `H_p` on the grid, and assembles `F''`.
/// Boundary values are copied from `F'`; interior values invert `H_p` from
/// the grid interpolant and polish the inverse with direct evaluations.
pub fn build_f_double_prime(ctx: &PsiContext, delta: f64, samples: usize, grid: &PolarGrid) -> Result<FDoublePrime> {
    let source_env = enveloping_function(&ctx.source, delta, samples, grid, &ctx.solver)?;
    let nodes = grid.len();
    let boundary = grid.boundary_nodes();
    let per_source = crate::par::map_range(samples, |k| -> Result<(Vec<Vector>, Vec<f64>, Vec<Covector>)> {
        let p = source_env.source(k);
        let mut disp = Vec::with_capacity(nodes);
        for node in 0..nodes {
            let x = grid.node(node);
            disp.push(ctx.h_map(&source_env, k, node)?.displacement_from(x));
        }
        let mut values = Vec::with_capacity(nodes);
        let mut dx = Vec::with_capacity(nodes);
        for node in 0..nodes {
            if boundary.contains(&node) {
                values.push(source_env.value(k, node));
                dx.push(source_env.differential(k, node));
                continue;
            }
            let y = grid.node(node);
            let guess = invert_h(grid, &disp, y)?;
            let (v, d, _) = ctx.f_double_prime_at(p, y, guess)?;
            values.push(v);
            dx.push(d);
        }
        Ok((disp, values, dx))
    });
    let mut displacements = Vec::with_capacity(samples * nodes);
    let mut values = Vec::with_capacity(samples * nodes);
    let mut dx = Vec::with_capacity(samples * nodes);
    for r in per_source {
        let (d, v, x) = r?;
        displacements.extend(d);
        values.extend(v);
        dx.extend(x);
    }
    let envelope = EnvelopingFunction::from_samples(delta, samples, *grid, values, dx)?;
    Ok(FDoublePrime { envelope, source_envelope: source_env, displacements })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MajorizationReport {
    pub samples: usize,
    /// Smallest `sup_p d_x F''_p (v)` over sampled `phi`-unit `(x, v)`.
    pub min_value: f64,
    pub worst_point: Point,
    pub worst_direction: Vector,
    pub tolerance: f64,
    pub violations: Vec<(Point, Vector, f64)>,
    /// Interior nodes where `p -> d_x F''_p` is not a convex loop; any such
    /// node puts the pair outside the neighborhood where `F''` defines a metric.
    pub nonconvex_nodes: Vec<usize>,
}

impl MajorizationReport {
    pub fn holds(&self) -> bool {
        self.violations.is_empty() && self.nonconvex_nodes.is_empty()
    }

    pub fn outside_neighborhood(&self) -> bool {
        !self.nonconvex_nodes.is_empty()
    }
}

/// Evaluates the metric of `F''` on `phi`-unit vectors at every interior node
/// in `directions` directions and reports values below `1 - tol`, along with
/// nodes where the differentials of `F''` fail to form a convex loop.
pub fn majorization_check(f2: &FDoublePrime, target: &Metric, directions: usize, tol: f64) -> Result<MajorizationReport> {
    let env = &f2.envelope;
    let mut report = MajorizationReport {
        samples: 0,
        min_value: f64::INFINITY,
        worst_point: Point::ZERO,
        worst_direction: Vector::ZERO,
        tolerance: tol,
        violations: Vec::new(),
        nonconvex_nodes: Vec::new(),
    };
    for node in env.grid.interior_nodes() {
        let x = env.grid.node(node);
        let curve: Vec<Covector> = (0..env.samples).map(|k| env.differential(k, node)).collect();
        let c = curve_convexity(&curve);
        if c.winding != 1 || c.min_turn <= 0.0 {
            report.nonconvex_nodes.push(node);
        }
        for j in 0..directions {
            let e = Vector::from_angle(TAU * j as f64 / directions as f64);
            let v = e / target.norm(x, e)?;
            let value = env.metric_from_envelope(node, v);
            report.samples += 1;
            if value < report.min_value {
                report.min_value = value;
                report.worst_point = x;
                report.worst_direction = v;
            }
            if value < 1.0 - tol {
                report.violations.push((x, v, value));
            }
        }
    }
    Ok(report)
}

/// One sampled chord of the `T'/T` check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChordRatio {
    pub a: Point,
    pub b: Point,
    pub length_target: f64,
    pub length_source: f64,
    /// `d_x F''_p (gamma')` at the midpoint of the `phi`-chord, `p` realizing it.
    pub measured: f64,
    pub skipped: bool,
}

impl ChordRatio {
    pub fn ratio(&self) -> f64 {
        self.length_source / self.length_target
    }

    pub fn error(&self) -> f64 {
        if self.skipped {
            0.0
        } else {
            (self.measured - self.ratio()).abs()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChordRatioReport {
    pub chords: Vec<ChordRatio>,
    pub max_error: f64,
    pub skipped: usize,
}

/// For each boundary pair `(a, b)`: connects them in both metrics, finds the
/// `p` on the circle of radius `1 + delta` whose `phi'`-gradient curve is the
/// `phi'`-geodesic, and compares `d_x F''_p` on the `phi`-velocity at the
/// midpoint of the `phi`-geodesic against `T'/T`.
pub fn chord_ratio_check(ctx: &PsiContext, delta: f64, pairs: &[(Point, Point)]) -> Result<ChordRatioReport> {
    let rows = crate::par::map(pairs, |&(a, b)| -> Result<ChordRatio> {
        let target = ctx.solver.connect_endpoint(&ctx.target, a, b, 1.0)?;
        let source = ctx.solver.connect_endpoint(&ctx.source, a, b, 1.0)?;
        let (t, t2) = (target.length, source.length);
        if t < 1e-4 {
            return Ok(ChordRatio { a, b, length_target: t, length_source: t2, measured: f64::NAN, skipped: true });
        }
        let (back, _) = ctx.solver.flow_exit(&ctx.source, source.initial, 1.0 + delta, true)?;
        let p = back.x * ((1.0 + delta) / back.x.norm());
        let mid = ctx.solver.flow_for(&ctx.target, target.initial, 0.5 * t)?;
        let v = velocity(&ctx.target, mid);
        let guess = ctx.solver.flow_for(&ctx.source, source.initial, 0.5 * t2)?.x;
        let (_, d, _) = ctx.f_double_prime_at(p, mid.x, guess)?;
        Ok(ChordRatio { a, b, length_target: t, length_source: t2, measured: d.pair(v), skipped: false })
    });
    let chords = rows.into_iter().collect::<Result<Vec<_>>>()?;
    let max_error = chords.iter().map(ChordRatio::error).fold(0.0, f64::max);
    let skipped = chords.iter().filter(|c| c.skipped).count();
    Ok(ChordRatioReport { chords, max_error, skipped })
}

// ---------------------------------------------------------------------------
// Randomized trials
// ---------------------------------------------------------------------------

/// Where random bumps are placed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BumpKind {
    /// Multiplies the norm by `1 + a * bump`.
    Conformal,
    /// Adds `a * bump` to a diagonal coefficient of the quadratic part.
    Coefficient,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerturbationSpec {
    /// Bound on each bump amplitude.
    pub amplitude: f64,
    pub max_bumps: usize,
    /// Range of Gaussian widths.
    pub width: [f64; 2],
    /// Bump centers are drawn from the disc of this radius.
    pub center_radius: f64,
    pub kinds: Vec<BumpKind>,
    /// Probability that the second metric only receives non-negative bumps.
    pub nonnegative_fraction: f64,
    /// Boundary points of the distance tables.
    pub table_points: usize,
    pub quadrature: FiberQuadrature,
    pub simplicity_samples: usize,
}

impl Default for PerturbationSpec {
    fn default() -> Self {
        PerturbationSpec {
            amplitude: 1e-2,
            max_bumps: 4,
            width: [0.25, 0.6],
            center_radius: 0.8,
            kinds: vec![BumpKind::Conformal, BumpKind::Coefficient],
            nonnegative_fraction: 0.5,
            table_points: 32,
            quadrature: FiberQuadrature::default(),
            simplicity_samples: 16,
        }
    }
}

impl PerturbationSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = self.amplitude >= 0.0
            && self.amplitude.is_finite()
            && (1..=4).contains(&self.max_bumps)
            && self.width[0] > 0.0
            && self.width[1] >= self.width[0]
            && self.center_radius >= 0.0
            && !self.kinds.is_empty()
            && (0.0..=1.0).contains(&self.nonnegative_fraction)
            && self.table_points >= 8
            && self.table_points % 2 == 0
            && self.simplicity_samples >= 4;
        if !ok {
            return Err(FinslerError::InvalidArgument(format!("invalid perturbation spec: {self:?}")));
        }
        self.quadrature.validate()
    }
}

/// Up to `max_bumps` random Gaussian bumps with amplitudes in
/// `[-amplitude, amplitude]`, or `[0, amplitude]` when `nonnegative`.
pub fn random_bumps(rng: &mut ChaCha8Rng, spec: &PerturbationSpec, nonnegative: bool) -> Vec<Perturbation> {
    let count = rng.gen_range(1..=spec.max_bumps);
    (0..count)
        .map(|_| {
            let r = spec.center_radius * rng.gen::<f64>().sqrt();
            let center = Point::polar(r, rng.gen_range(0.0..TAU));
            let width = rng.gen_range(spec.width[0]..=spec.width[1]);
            let lo = if nonnegative { 0.0 } else { -spec.amplitude };
            let a = rng.gen_range(lo..=spec.amplitude);
            let bump = ScalarField::gaussian(1.0, [center.x, center.y], width);
            match spec.kinds[rng.gen_range(0..spec.kinds.len())] {
                BumpKind::Conformal => Perturbation::Scale { field: bump, epsilon: a },
                BumpKind::Coefficient => {
                    let entry = if rng.gen::<bool>() { Coefficient::G11 } else { Coefficient::G22 };
                    Perturbation::Coefficient { entry, delta: bump.scaled(a) }
                }
            }
        })
        .collect()
}

fn perturb(base: &Metric, bumps: Vec<Perturbation>) -> Result<Metric> {
    let family = match base.family() {
        MetricFamily::PerturbationSum { base: b, perturbations } => {
            let mut ps = perturbations.clone();
            ps.extend(bumps);
            MetricFamily::PerturbationSum { base: b.clone(), perturbations: ps }
        }
        other => MetricFamily::PerturbationSum { base: Box::new(other.clone()), perturbations: bumps },
    };
    Metric::new(family, base.delta())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub seed: u64,
    pub base: MetricFamily,
    pub perturbed: MetricFamily,
    /// Whether the second metric only received non-negative bumps.
    pub nonnegative: bool,
    pub simple: bool,
    /// `min (bd_{phi'} - bd_phi)` over the off-diagonal table entries.
    #[serde(deserialize_with = "crate::io::nullable_f64")]
    pub margin: f64,
    pub volume_base: Option<VolumeResult>,
    pub volume_perturbed: Option<VolumeResult>,
    pub bd_volume_base: Option<VolumeResult>,
    pub bd_volume_perturbed: Option<VolumeResult>,
    /// `vol(phi') - vol(phi)` by fiber quadrature.
    #[serde(deserialize_with = "crate::io::nullable_f64")]
    pub delta_volume: f64,
    #[serde(deserialize_with = "crate::io::nullable_f64")]
    pub combined_error: f64,
    /// Simple and `margin >= 1e-6`.
    pub valid: bool,
    /// Valid with `delta_volume < -combined_error`.
    pub violation: bool,
    pub note: Option<String>,
}

/// Smallest boundary margin for which a trial counts.
pub const MARGIN_THRESHOLD: f64 = 1e-6;

fn metric_is_simple(m: &Metric, spec: &PerturbationSpec, solver: &GeodesicSolver) -> Result<bool> {
    if !m.convexity_report(16, 12).is_convex() {
        return Ok(false);
    }
    let n = spec.simplicity_samples;
    Ok(solver.simplicity_report(m, n, n)?.is_simple())
}

/// One seeded trial: `phi = phi0 + bumps`, `phi' = phi + bumps`. When the
/// second set is non-negative it also carries a uniform conformal factor.
pub fn monotonicity_trial(phi0: &Metric, spec: &PerturbationSpec, seed: u64, solver: &GeodesicSolver) -> Result<TrialRecord> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phi = perturb(phi0, random_bumps(&mut rng, spec, false))?;
    let nonnegative = rng.gen::<f64>() < spec.nonnegative_fraction;
    let mut bumps = random_bumps(&mut rng, spec, nonnegative);
    if nonnegative {
        // Gaussian tails leave almost no margin near the boundary; a uniform
        // rescaling keeps the boundary data strictly ordered.
        let epsilon = spec.amplitude * rng.gen_range(0.1..=1.0);
        bumps.push(Perturbation::Scale { field: ScalarField::constant(1.0), epsilon });
    }
    let phi2 = perturb(&phi, bumps)?;
    let mut rec = TrialRecord {
        seed,
        base: phi.family().clone(),
        perturbed: phi2.family().clone(),
        nonnegative,
        simple: false,
        margin: f64::NAN,
        volume_base: None,
        volume_perturbed: None,
        bd_volume_base: None,
        bd_volume_perturbed: None,
        delta_volume: f64::NAN,
        combined_error: f64::NAN,
        valid: false,
        violation: false,
        note: None,
    };
    let outcome = (|| -> Result<()> {
        rec.simple = metric_is_simple(&phi, spec, solver)? && metric_is_simple(&phi2, spec, solver)?;
        if !rec.simple {
            rec.note = Some("not simple".into());
            return Ok(());
        }
        let t = boundary_distance_table(&phi, spec.table_points, solver)?;
        let t2 = boundary_distance_table(&phi2, spec.table_points, solver)?;
        rec.margin = t.min_margin(&t2)?;
        let v = ht_volume_fiber(&phi, spec.quadrature)?;
        let v2 = ht_volume_fiber(&phi2, spec.quadrature)?;
        rec.delta_volume = v2.value - v.value;
        rec.combined_error = v.error + v2.error;
        rec.bd_volume_base = Some(volume_from_bd(&t)?);
        rec.bd_volume_perturbed = Some(volume_from_bd(&t2)?);
        rec.volume_base = Some(v);
        rec.volume_perturbed = Some(v2);
        rec.valid = rec.margin >= MARGIN_THRESHOLD;
        rec.violation = rec.valid && rec.delta_volume < -rec.combined_error;
        Ok(())
    })();
    if let Err(e) = outcome {
        rec.simple = false;
        rec.valid = false;
        rec.note = Some(e.to_string());
    }
    Ok(rec)
}

/// Trials for the seeds `first_seed .. first_seed + count`.
pub fn monotonicity_sweep(phi0: &Metric, spec: &PerturbationSpec, first_seed: u64, count: usize, solver: &GeodesicSolver) -> Result<Vec<TrialRecord>> {
    spec.validate()?;
    crate::par::map_range(count, |i| monotonicity_trial(phi0, spec, first_seed + i as u64, solver)).into_iter().collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub trials: usize,
    pub simple: usize,
    pub valid: usize,
    pub violations: usize,
    /// Smallest `delta_volume + combined_error` over valid trials.
    pub worst_slack: f64,
}

pub fn summarize(records: &[TrialRecord]) -> SweepSummary {
    SweepSummary {
        trials: records.len(),
        simple: records.iter().filter(|r| r.simple).count(),
        valid: records.iter().filter(|r| r.valid).count(),
        violations: records.iter().filter(|r| r.violation).count(),
        worst_slack: records.iter().filter(|r| r.valid).map(|r| r.delta_volume + r.combined_error).fold(f64::INFINITY, f64::min),
    }
}

/// Fraction of random perturbations of `phi0` that stay strongly convex and
/// simple, per amplitude.
pub fn simplicity_threshold_scan(
    phi0: &Metric,
    spec: &PerturbationSpec,
    amplitudes: &[f64],
    seeds: usize,
    solver: &GeodesicSolver,
) -> Result<Vec<(f64, usize, usize)>> {
    amplitudes
        .iter()
        .map(|&a| {
            let s = PerturbationSpec { amplitude: a, ..spec.clone() };
            let ok = crate::par::map_range(seeds, |i| -> Result<bool> {
                let mut rng = ChaCha8Rng::seed_from_u64(i as u64);
                let m = perturb(phi0, random_bumps(&mut rng, &s, false))?;
                metric_is_simple(&m, &s, solver)
            });
            let simple = ok.into_iter().map(|r| r.unwrap_or(false)).filter(|b| *b).count();
            Ok((a, simple, seeds))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Smoothness across tangency
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeSample {
    /// Offset of the base point along the circle from the probe point.
    pub s: f64,
    pub ell: f64,
    pub lambda: f64,
    pub w: Vector,
    pub tau: f64,
    pub midpoint: Point,
    pub psi_base: Point,
    pub psi_vector: Vector,
    pub tangent: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothnessReport {
    pub q_angle: f64,
    pub step: f64,
    pub samples: Vec<ProbeSample>,
    /// Largest first difference quotient per quantity.
    pub first_differences: BTreeMap<String, f64>,
    /// Largest second difference quotient per quantity.
    pub second_differences: BTreeMap<String, f64>,
    /// `(target ell, achieved ell, |Psi - tangency branch|)`.
    pub tangency_gaps: Vec<(f64, f64, f64)>,
}

impl SmoothnessReport {
    pub fn max_second_difference(&self) -> f64 {
        self.second_differences.values().copied().fold(0.0, f64::max)
    }
}

fn probe_vector(ctx: &PsiContext, q_angle: f64, s: f64) -> Result<(Point, Vector)> {
    let x = Point::polar(1.0, q_angle + s);
    let t = Vector::new(-q_angle.sin(), q_angle.cos());
    Ok((x, t / ctx.source.norm(x, t)?))
}

/// Chord data and `Psi` along base points `q(s)` on the circle near
/// `q = q(0)`, all carrying the direction tangent to the circle at `q`.
/// The family meets the tangent vectors at `s = 0`.
pub fn psi_smoothness_probe(ctx: &PsiContext, q_angle: f64, half_count: usize, step: f64) -> Result<SmoothnessReport> {
    if half_count < 2 || !(step > 0.0) {
        return Err(FinslerError::InvalidArgument("probe needs at least two steps per side".into()));
    }
    let n = 2 * half_count + 1;
    let samples = crate::par::map_range(n, |i| -> Result<ProbeSample> {
        let s = (i as f64 - half_count as f64) * step;
        let (x, u) = probe_vector(ctx, q_angle, s)?;
        let img = ctx.psi(x, u)?;
        let c = img.chord;
        Ok(ProbeSample {
            s,
            ell: c.ell,
            lambda: c.lambda,
            w: c.w,
            tau: c.tau(),
            midpoint: c.midpoint,
            psi_base: img.base,
            psi_vector: img.vector,
            tangent: img.tangent,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    type Getter = fn(&ProbeSample) -> [f64; 2];
    let quantities: [(&str, Getter); 6] = [
        ("lambda", |p| [p.lambda, 0.0]),
        ("w", |p| [p.w.x, p.w.y]),
        ("tau", |p| [p.tau, 0.0]),
        ("p", |p| [p.midpoint.x, p.midpoint.y]),
        ("psi_base", |p| [p.psi_base.x, p.psi_base.y]),
        ("psi_vector", |p| [p.psi_vector.x, p.psi_vector.y]),
    ];
    let mut first_differences = BTreeMap::new();
    let mut second_differences = BTreeMap::new();
    for (name, get) in quantities {
        let vals: Vec<[f64; 2]> = samples.iter().map(get).collect();
        let d1 = vals
            .windows(2)
            .map(|w| (w[1][0] - w[0][0]).hypot(w[1][1] - w[0][1]) / step)
            .fold(0.0, f64::max);
        let d2 = vals
            .windows(3)
            .map(|w| (w[0][0] - 2.0 * w[1][0] + w[2][0]).hypot(w[0][1] - 2.0 * w[1][1] + w[2][1]) / (step * step))
            .fold(0.0, f64::max);
        first_differences.insert(name.to_string(), d1);
        second_differences.insert(name.to_string(), d2);
    }

    let mut tangency_gaps = Vec::new();
    for target in [1e-2, 1e-3, 1e-4] {
        let ell_at = |s: f64| -> Result<f64> {
            let (x, u) = probe_vector(ctx, q_angle, s)?;
            Ok(ctx.solver.exit_chord(&ctx.source, x, u)?.ell)
        };
        // Chord length grows linearly in |s|; bracket on the positive side.
        let (mut lo, mut hi) = (0.0, 1e-3);
        while ell_at(hi)? < target {
            hi *= 2.0;
            if hi > 1.0 {
                return Err(FinslerError::InvalidArgument("no chord of the requested length near the probe point".into()));
            }
        }
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if ell_at(mid)? < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let (x, u) = probe_vector(ctx, q_angle, hi)?;
        let img = ctx.psi_with(x, u, true)?;
        let branch = u / ctx.target.norm(x, u)?;
        tangency_gaps.push((target, img.chord.ell, img.displacement(x, branch)));
    }
    Ok(SmoothnessReport { q_angle, step, samples, first_differences, second_differences, tangency_gaps })
}

/// Largest `|Psi(v) - v|` (base plus vector) over sampled `phi'`-unit vectors.
pub fn psi_displacement(ctx: &PsiContext, points: &[Point], directions: usize) -> Result<f64> {
    let rows = crate::par::map(points, |&x| -> Result<f64> {
        let mut worst: f64 = 0.0;
        for j in 0..directions {
            let e = Vector::from_angle(TAU * j as f64 / directions as f64);
            let v = e / ctx.source.norm(x, e)?;
            worst = worst.max(ctx.psi(x, v)?.displacement(x, v));
        }
        Ok(worst)
    });
    rows.into_iter().try_fold(0.0, |acc: f64, r| Ok(acc.max(r?)))
}

/// `x -> H_p(x)` at a given time along the `phi'`-geodesic: the `phi`-point
/// at the rescaled time on the geodesic with the same endpoints.
pub fn linear_time_image(ctx: &PsiContext, a: Point, b: Point, t_source: f64) -> Result<(Point, State)> {
    let source = ctx.solver.connect_endpoint(&ctx.source, a, b, 1.0)?;
    let target = ctx.solver.connect_endpoint(&ctx.target, a, b, 1.0)?;
    let on_source = ctx.solver.flow_for(&ctx.source, source.initial, t_source)?;
    let on_target = ctx.solver.flow_for(&ctx.target, target.initial, t_source * target.length / source.length)?;
    Ok((on_target.x, on_source))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn solver() -> GeodesicSolver {
        GeodesicSolver::with_step(1e-2)
    }

    fn sample_vectors() -> Vec<(Point, Vector)> {
        let mut out = Vec::new();
        for i in 0..6 {
            let x = Point::polar(0.15 * i as f64, 0.9 * i as f64);
            for j in 0..6 {
                out.push((x, Vector::from_angle(0.3 + TAU * j as f64 / 6.0)));
            }
        }
        out
    }

    fn scaled(m: &Metric, eps: f64) -> Metric {
        perturb(m, vec![Perturbation::Scale { field: ScalarField::constant(1.0), epsilon: eps }]).unwrap()
    }

    #[test]
    fn psi_is_identity_for_equal_metrics() {
        for m in [Metric::euclidean(), Metric::spherical_cap(PI / 3.0).unwrap()] {
            let ctx = PsiContext::new(m.clone(), m.clone(), solver());
            for (x, e) in sample_vectors() {
                let v = e / m.norm(x, e).unwrap();
                let img = ctx.psi(x, v).unwrap();
                assert!(img.displacement(x, v) < 1e-7, "{:?} {:?}", x, img);
            }
        }
    }

    #[test]
    fn psi_preserves_chord_endpoints() {
        let bump = ScalarField::gaussian(1.0, [0.1, 0.2], 0.4);
        let source = crate::xray::conformal_metric(&Metric::euclidean(), &bump, 0.05).unwrap();
        let ctx = PsiContext::new(source, Metric::euclidean(), solver());
        for (x, e) in sample_vectors() {
            let img = ctx.psi(x, e).unwrap();
            let image_chord = ctx.solver.exit_chord(&ctx.target, img.base, img.vector).unwrap();
            assert!((image_chord.p_minus - img.chord.p_minus).norm() < 1e-6);
            assert!((image_chord.p_plus - img.chord.p_plus).norm() < 1e-6);
        }
    }

    #[test]
    fn psi_of_constant_rescaling_multiplies_vectors() {
        let m = Metric::euclidean();
        let ctx = PsiContext::new(scaled(&m, 0.1), m, solver());
        let (x, e) = (Point::new(0.3, -0.2), Vector::new(0.6, 0.8));
        let img = ctx.psi(x, e / 1.1).unwrap();
        assert!((img.base - x).norm() < 1e-9);
        assert!((img.vector - e).norm() < 1e-9);
    }

    #[test]
    fn displacement_halves_with_epsilon() {
        let m = Metric::spherical_cap(PI / 3.0).unwrap();
        let points = [Point::ZERO, Point::new(0.4, 0.3), Point::new(-0.7, 0.1)];
        let d = |eps: f64| psi_displacement(&PsiContext::new(scaled(&m, eps), m.clone(), solver()), &points, 8).unwrap();
        let (d1, d2) = (d(0.02), d(0.01));
        assert!(d2 <= 0.6 * d1, "{d1} {d2}");
    }

    #[test]
    fn grid_inversion_solves_displacement_equation() {
        let grid = PolarGrid::new(8, 32).unwrap();
        let field = |p: Point| Vector::new(p.y, -p.x) * (0.1 * (1.0 - p.norm_sq()));
        let disp: Vec<Vector> = grid.nodes().into_iter().map(field).collect();
        let y = Point::new(0.3, 0.45);
        let x = invert_h(&grid, &disp, y).unwrap();
        let interp = grid.interpolate(&disp, x);
        assert!((x.offset(interp) - y).norm() < 1e-8);
        // Interpolation error of the bilinear field only.
        assert!((x.offset(field(x)) - y).norm() < 5e-3);
    }

    #[test]
    fn random_bumps_follow_the_spec() {
        let spec = PerturbationSpec::default();
        let a = random_bumps(&mut ChaCha8Rng::seed_from_u64(7), &spec, true);
        let b = random_bumps(&mut ChaCha8Rng::seed_from_u64(7), &spec, true);
        assert_eq!(a, b);
        for seed in 0..20 {
            let bumps = random_bumps(&mut ChaCha8Rng::seed_from_u64(seed), &spec, true);
            assert!((1..=spec.max_bumps).contains(&bumps.len()));
            for p in bumps {
                let amp = match p {
                    Perturbation::Scale { epsilon, .. } => epsilon,
                    Perturbation::Coefficient { delta: ScalarField::Scaled { factor, .. }, .. } => factor,
                    other => panic!("unexpected perturbation {other:?}"),
                };
                assert!((0.0..=spec.amplitude).contains(&amp));
            }
        }
    }

    #[test]
    fn invalid_spec_is_rejected() {
        let spec = PerturbationSpec { max_bumps: 0, ..Default::default() };
        assert!(spec.validate().is_err());
        let spec = PerturbationSpec { table_points: 9, ..Default::default() };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn summary_counts_violations_among_valid_trials() {
        let rec = |valid: bool, dv: f64| TrialRecord {
            seed: 0,
            base: MetricFamily::Euclidean,
            perturbed: MetricFamily::Euclidean,
            nonnegative: false,
            simple: true,
            margin: if valid { 1.0 } else { -1.0 },
            volume_base: None,
            volume_perturbed: None,
            bd_volume_base: None,
            bd_volume_perturbed: None,
            delta_volume: dv,
            combined_error: 0.1,
            valid,
            violation: valid && dv < -0.1,
            note: None,
        };
        let s = summarize(&[rec(true, 0.5), rec(true, -0.2), rec(false, -3.0)]);
        assert_eq!((s.trials, s.valid, s.violations), (3, 2, 1));
        assert!((s.worst_slack + 0.1).abs() < 1e-12);
    }
}
