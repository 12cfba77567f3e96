//! Geodesic flow in cotangent form.
//!
//! Geodesics are integral curves of the Hamiltonian `H = (phi*)^2 / 2`:
//!
//! ```text
//! x'  =  phi* d(phi*)/d(xi)
//! xi' = -phi* d(phi*)/d(x)
//! ```
//!
//! integrated by classical RK4 with a fixed arc-length step and a projection
//! of the momentum back onto `{phi* = 1}` after every step, so the time
//! parameter is arc length. Exits from a disc are located by bisection on a
//! partial RK4 step.

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use crate::error::{FinslerError, Result};
use crate::geom::{wrap_angle, Covector, Point, Vector};
use crate::metric::{dual_local, Metric};

/// Integrator and shooting parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeodesicSolver {
    /// RK4 step in arc length.
    pub step: f64,
    /// Time tolerance of exit and closest-approach events.
    pub event_tol: f64,
    /// Trajectories longer than this are reported as trapped.
    pub max_length: f64,
    /// Target mismatch (in length units) accepted by the shooting solver.
    pub shoot_tol: f64,
    pub shoot_max_iter: usize,
    /// Evenly spaced initial angles tried after the first attempt fails.
    pub restarts: usize,
    /// Chords shorter than this use the tangency branch.
    pub tangency_length: f64,
}

impl Default for GeodesicSolver {
    fn default() -> Self {
        GeodesicSolver {
            step: 1e-3,
            event_tol: 1e-10,
            max_length: 50.0,
            shoot_tol: 1e-9,
            shoot_max_iter: 60,
            restarts: 8,
            tangency_length: 1e-4,
        }
    }
}

impl GeodesicSolver {
    pub fn with_step(step: f64) -> Self {
        GeodesicSolver { step, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.step > 0.0
            && self.step.is_finite()
            && self.event_tol > 0.0
            && self.max_length > 0.0
            && self.shoot_tol > 0.0
            && self.shoot_max_iter > 0
            && self.tangency_length >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(FinslerError::InvalidArgument("geodesic solver parameters must be positive".into()))
        }
    }
}

/// A point of the cotangent bundle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct State {
    pub x: Point,
    pub xi: Covector,
}

/// An arc-length parametrized geodesic sampled at the integrator steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Geodesic {
    pub times: Vec<f64>,
    pub positions: Vec<Point>,
    pub momenta: Vec<Covector>,
    pub length: f64,
}

impl Geodesic {
    pub fn start(&self) -> Point {
        self.positions[0]
    }

    pub fn end(&self) -> Point {
        *self.positions.last().expect("geodesic has at least one sample")
    }

    pub fn initial_state(&self) -> State {
        State { x: self.positions[0], xi: self.momenta[0] }
    }

    pub fn final_state(&self) -> State {
        State { x: self.end(), xi: *self.momenta.last().expect("non-empty") }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Velocity `d gamma / dt` at sample `i`.
    pub fn velocity(&self, m: &Metric, i: usize) -> Vector {
        velocity(m, State { x: self.positions[i], xi: self.momenta[i] })
    }

    /// State at an arbitrary time, by a partial RK4 step from the preceding sample.
    pub fn state_at(&self, m: &Metric, t: f64) -> State {
        let t = t.clamp(0.0, self.length);
        let i = match self.times.binary_search_by(|s| s.total_cmp(&t)) {
            Ok(i) => return State { x: self.positions[i], xi: self.momenta[i] },
            Err(i) => i.saturating_sub(1),
        };
        let s = State { x: self.positions[i], xi: self.momenta[i] };
        rk4(m, s, t - self.times[i], 1.0)
    }
}

/// Velocity `d(phi*^2/2)/d xi` of a unit momentum.
pub fn velocity(m: &Metric, s: State) -> Vector {
    let j = m.dual_jet(s.x, s.xi);
    Vector::new(j.value * j.d_xi[0], j.value * j.d_xi[1])
}

#[inline]
fn rhs(m: &Metric, s: &State, dir: f64) -> (Vector, Covector) {
    let j = m.dual_jet(s.x, s.xi);
    let k = dir * j.value;
    (Vector::new(k * j.d_xi[0], k * j.d_xi[1]), Covector::new(-k * j.d_x[0], -k * j.d_x[1]))
}

#[inline]
fn advance(s: &State, dx: Vector, dxi: Covector, h: f64) -> State {
    State { x: s.x.offset(dx * h), xi: s.xi + dxi * h }
}

/// One RK4 step of size `h` followed by projection onto the unit co-sphere.
/// `dir = -1` integrates the same field backwards in time.
pub(crate) fn rk4(m: &Metric, s: State, h: f64, dir: f64) -> State {
    let (k1x, k1p) = rhs(m, &s, dir);
    let (k2x, k2p) = rhs(m, &advance(&s, k1x, k1p, 0.5 * h), dir);
    let (k3x, k3p) = rhs(m, &advance(&s, k2x, k2p, 0.5 * h), dir);
    let (k4x, k4p) = rhs(m, &advance(&s, k3x, k3p, h), dir);
    let x = s.x.offset((k1x + k2x * 2.0 + k3x * 2.0 + k4x) * (h / 6.0));
    let xi = s.xi + (k1p + k2p * 2.0 + k3p * 2.0 + k4p) * (h / 6.0);
    let n = dual_local(&m.local(x), xi);
    State { x, xi: xi / n }
}

/// When the integration stops.
#[derive(Debug, Clone, Copy)]
enum Stop {
    /// Leaving the disc of the given radius.
    Exit(f64),
    /// Closest (Euclidean) approach to `target`, or leaving the disc first.
    Closest { target: Point, radius: f64 },
    /// A fixed time.
    Time(f64),
}

struct Run {
    end: State,
    time: f64,
}

#[derive(Default)]
struct Trace {
    times: Vec<f64>,
    positions: Vec<Point>,
    momenta: Vec<Covector>,
}

impl Trace {
    fn push(&mut self, t: f64, s: &State) {
        self.times.push(t);
        self.positions.push(s.x);
        self.momenta.push(s.xi);
    }

    fn into_geodesic(self, length: f64) -> Geodesic {
        Geodesic { times: self.times, positions: self.positions, momenta: self.momenta, length }
    }
}

fn approach_rate(m: &Metric, s: &State, target: Point, dir: f64) -> f64 {
    let v = velocity(m, *s) * dir;
    v.dot(target.displacement_from(s.x))
}

impl GeodesicSolver {
    fn max_steps(&self) -> usize {
        (self.max_length / self.step).ceil() as usize + 1
    }

    /// Bisection on the partial step size for the first sign change of `g` in `(0, h]`.
    fn refine<G: Fn(&State) -> f64>(&self, m: &Metric, s: State, h: f64, dir: f64, g: G) -> (f64, State) {
        let speed = velocity(m, s).norm().max(1.0);
        let tol = self.event_tol / speed;
        let (mut lo, mut hi) = (0.0, h);
        while hi - lo > tol {
            let mid = 0.5 * (lo + hi);
            if g(&rk4(m, s, mid, dir)) > 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        let t = 0.5 * (lo + hi);
        (t, rk4(m, s, t, dir))
    }

    fn integrate(&self, m: &Metric, s0: State, dir: f64, stop: Stop, mut trace: Option<&mut Trace>) -> Result<Run> {
        let h = self.step;
        let mut s = s0;
        let mut t = 0.0;
        if let Some(tr) = trace.as_deref_mut() {
            tr.push(0.0, &s);
        }
        if let Stop::Closest { target, .. } = stop {
            if approach_rate(m, &s, target, dir) <= 0.0 {
                return Ok(Run { end: s, time: 0.0 });
            }
        }
        if let Stop::Time(t_end) = stop {
            if t_end <= 0.0 {
                return Ok(Run { end: s, time: 0.0 });
            }
        }
        for _ in 0..self.max_steps() {
            if let Stop::Time(t_end) = stop {
                if t + h >= t_end {
                    let end = rk4(m, s, t_end - t, dir);
                    if let Some(tr) = trace.as_deref_mut() {
                        tr.push(t_end, &end);
                    }
                    return Ok(Run { end, time: t_end });
                }
            }
            let next = rk4(m, s, h, dir);
            let radius = match stop {
                Stop::Exit(r) => Some(r),
                Stop::Closest { radius, .. } => Some(radius),
                Stop::Time(_) => None,
            };
            let mut event: Option<(f64, State)> = None;
            if let Some(r) = radius {
                if next.x.norm() > r {
                    let (dt, st) = if s.x.norm() > r * (1.0 + 1e-12) {
                        // Started outside and moving outwards.
                        (0.0, s)
                    } else {
                        self.refine(m, s, h, dir, |q| q.x.norm() - r)
                    };
                    event = Some((dt, st));
                }
            }
            if let Stop::Closest { target, .. } = stop {
                if approach_rate(m, &next, target, dir) <= 0.0 {
                    let (dt, st) = self.refine(m, s, h, dir, |q| -approach_rate(m, q, target, dir));
                    if event.as_ref().map_or(true, |e| dt < e.0) {
                        event = Some((dt, st));
                    }
                }
            }
            if let Some((dt, st)) = event {
                let time = t + dt;
                if let Some(tr) = trace.as_deref_mut() {
                    if dt > 0.0 {
                        tr.push(time, &st);
                    }
                }
                return Ok(Run { end: st, time });
            }
            s = next;
            t += h;
            if let Some(tr) = trace.as_deref_mut() {
                tr.push(t, &s);
            }
        }
        Err(FinslerError::Trapped { start: s0.x, radius: radius_of(stop), steps: self.max_steps() })
    }

    /// Maximal forward geodesic from `x0` with initial momentum `alpha0`
    /// (rescaled to `phi*`-unit) until it leaves the disc of radius `r`.
    pub fn flow(&self, m: &Metric, x0: Point, alpha0: Covector, r: f64) -> Result<Geodesic> {
        self.check_start(m, x0, r)?;
        let xi = unit(m, x0, alpha0)?;
        let mut tr = Trace::default();
        let run = self.integrate(m, State { x: x0, xi }, 1.0, Stop::Exit(r), Some(&mut tr))?;
        Ok(tr.into_geodesic(run.time))
    }

    /// Exit point and length only (no trace).
    pub fn flow_exit(&self, m: &Metric, s0: State, r: f64, backward: bool) -> Result<(State, f64)> {
        let dir = if backward { -1.0 } else { 1.0 };
        let run = self.integrate(m, s0, dir, Stop::Exit(r), None)?;
        Ok((run.end, run.time))
    }

    /// Integrates for a fixed time (no disc), returning the final state.
    pub fn flow_for(&self, m: &Metric, s0: State, time: f64) -> Result<State> {
        Ok(self.integrate(m, s0, 1.0, Stop::Time(time), None)?.end)
    }

    fn check_start(&self, m: &Metric, x0: Point, r: f64) -> Result<()> {
        self.validate()?;
        if !(r > 0.0 && r <= m.radius() * (1.0 + 1e-12)) {
            return Err(FinslerError::InvalidArgument(format!("disc radius {r} exceeds the metric domain {}", m.radius())));
        }
        if !(x0.is_finite() && x0.norm() <= r * (1.0 + 1e-12)) {
            return Err(FinslerError::Domain { point: x0, radius: r });
        }
        Ok(())
    }
}

fn radius_of(stop: Stop) -> f64 {
    match stop {
        Stop::Exit(r) => r,
        Stop::Closest { radius, .. } => radius,
        Stop::Time(_) => f64::INFINITY,
    }
}

fn unit(m: &Metric, x: Point, alpha: Covector) -> Result<Covector> {
    let n = m.dual_norm(x, alpha)?;
    if !(n > 0.0) {
        return Err(FinslerError::ZeroVector);
    }
    Ok(alpha / n)
}

// ---------------------------------------------------------------------------
// Chords
// ---------------------------------------------------------------------------

/// The maximal geodesic of the unit disc through a unit vector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Chord {
    pub base: Point,
    /// The `phi`-unit vector the chord passes through (at time 0).
    pub u: Vector,
    pub p_minus: Point,
    pub p_plus: Point,
    pub tau_minus: f64,
    pub tau_plus: f64,
    pub ell: f64,
    pub lambda: f64,
    pub w: Vector,
    pub midpoint: Point,
    /// Whether the tangency branch (`ell` below threshold) was used.
    pub tangent: bool,
    /// Momenta at the two ends.
    pub xi_minus: Covector,
    pub xi_plus: Covector,
}

impl Chord {
    /// Parameter of the chord midpoint, `(tau_plus + tau_minus) / 2`.
    pub fn tau(&self) -> f64 {
        0.5 * (self.tau_plus + self.tau_minus)
    }
}

impl GeodesicSolver {
    /// The maximal geodesic of the unit disc through `v` at `x`, integrated in
    /// both directions with the same Hamiltonian field.
    pub fn exit_chord(&self, m: &Metric, x: Point, v: Vector) -> Result<Chord> {
        self.check_start(m, x, 1.0)?;
        let n = m.norm(x, v)?;
        if !(n > 0.0) {
            return Err(FinslerError::ZeroVector);
        }
        let u = v / n;
        let xi = m.legendre(x, u)?;
        let s0 = State { x, xi };
        let (fwd, tp) = self.flow_exit(m, s0, 1.0, false)?;
        let (bwd, tm) = self.flow_exit(m, s0, 1.0, true)?;
        let ell = tp + tm;
        let secant = fwd.x.displacement_from(bwd.x);
        let tangent = ell < self.tangency_length;
        let (lambda, w) = if tangent || secant.norm() == 0.0 {
            (u.norm(), u.normalized())
        } else {
            (secant.norm() / ell, secant.normalized())
        };
        Ok(Chord {
            base: x,
            u,
            p_minus: bwd.x,
            p_plus: fwd.x,
            tau_minus: -tm,
            tau_plus: tp,
            ell,
            lambda,
            w,
            midpoint: Point::new(0.5 * (fwd.x.x + bwd.x.x), 0.5 * (fwd.x.y + bwd.x.y)),
            tangent,
            xi_minus: bwd.xi,
            xi_plus: fwd.xi,
        })
    }
}

// ---------------------------------------------------------------------------
// Shooting
// ---------------------------------------------------------------------------

/// Result of a converged shot: the initial momentum angle and the end state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Connection {
    pub from: Point,
    pub to: Point,
    pub radius: f64,
    /// Angle of the initial momentum.
    pub angle: f64,
    pub initial: State,
    pub end: State,
    pub length: f64,
    pub mismatch: f64,
}

/// How the shooting angle is parametrized.
#[derive(Debug, Clone, Copy)]
enum Param {
    /// Momentum angle directly.
    Free,
    /// Source on the circle: `s in (0, 1)` sweeps the inward cone from the
    /// counter-clockwise tangent to the clockwise one.
    Cone { start: f64, width: f64 },
}

impl Param {
    fn angle(&self, s: f64) -> f64 {
        match *self {
            Param::Free => s,
            Param::Cone { start, width } => start + width * s,
        }
    }

    fn from_angle(&self, a: f64) -> f64 {
        match *self {
            Param::Free => a,
            Param::Cone { start, width } => ((a - start).rem_euclid(TAU) / width).clamp(1e-6, 1.0 - 1e-6),
        }
    }
}

/// Relative distance from a circle within which endpoints count as lying on it.
const CIRCLE_SNAP: f64 = 1e-9;

#[derive(Debug, Clone, Copy)]
enum Target {
    /// Point on the circle of the integration radius; mismatch is the arc offset.
    Boundary { angle: f64, source_angle: Option<f64> },
    Interior(Point),
}

struct Shot {
    mismatch: f64,
    run_end: State,
    time: f64,
}

struct Problem<'a> {
    m: &'a Metric,
    a: Point,
    b: Point,
    r: f64,
    param: Param,
    target: Target,
}

impl<'a> Problem<'a> {
    fn new(solver: &GeodesicSolver, m: &'a Metric, a: Point, b: Point, r: f64) -> Result<Problem<'a>> {
        // Endpoints produced by exit events sit on the circle only to the event
        // tolerance; snap them onto it.
        let on_circle = |p: Point| (p.norm() - r).abs() <= CIRCLE_SNAP * r;
        let snap = |p: Point| if on_circle(p) { p * (r / p.norm()) } else { p };
        let (a, b) = (snap(a), snap(b));
        solver.check_start(m, a, r)?;
        if !(b.is_finite() && b.norm() <= r * (1.0 + 1e-12)) {
            return Err(FinslerError::Domain { point: b, radius: r });
        }
        if (a - b).norm() < 1e-14 {
            return Err(FinslerError::InvalidArgument("connect needs distinct endpoints".into()));
        }
        let param = if on_circle(a) {
            let t = a.to_vector().perp();
            let start = m.legendre(a, t)?.angle();
            let end = m.legendre(a, -t)?.angle();
            Param::Cone { start, width: (end - start).rem_euclid(TAU) }
        } else {
            Param::Free
        };
        let target = if on_circle(b) {
            Target::Boundary { angle: b.angle(), source_angle: on_circle(a).then(|| a.angle()) }
        } else {
            Target::Interior(b)
        };
        Ok(Problem { m, a, b, r, param, target })
    }

    fn initial_guess(&self) -> f64 {
        let chord = self.b.displacement_from(self.a);
        let ang = self.m.legendre(self.a, chord).map(|c| c.angle()).unwrap_or(chord.angle());
        self.param.from_angle(ang)
    }

    /// Known mismatch values at the ends of a cone parametrization.
    fn cone_bracket(&self) -> Option<(f64, f64)> {
        match (self.param, self.target) {
            (Param::Cone { .. }, Target::Boundary { angle, source_angle: Some(sa) }) => {
                let db = (angle - sa).rem_euclid(TAU);
                Some((-db * self.r, (TAU - db) * self.r))
            }
            _ => None,
        }
    }

    fn shoot(&self, solver: &GeodesicSolver, s: f64) -> Result<Shot> {
        let xi = crate::metric::unit_momentum(self.m, self.a, self.param.angle(s));
        let s0 = State { x: self.a, xi };
        match self.target {
            Target::Boundary { angle, source_angle } => {
                let run = solver.integrate(self.m, s0, 1.0, Stop::Exit(self.r), None)?;
                let psi = run.end.x.angle();
                let mismatch = match source_angle {
                    Some(sa) => {
                        let rel = (psi - sa).rem_euclid(TAU);
                        // An immediate exit lands back on the source; place it at the
                        // nearer end of the cone.
                        let rel = if run.time < 1e-8 && s > 0.5 && rel < 1.0 { TAU } else { rel };
                        rel - (angle - sa).rem_euclid(TAU)
                    }
                    None => wrap_angle(psi - angle),
                };
                Ok(Shot { mismatch: mismatch * self.r, run_end: run.end, time: run.time })
            }
            Target::Interior(b) => {
                let run = solver.integrate(self.m, s0, 1.0, Stop::Closest { target: b, radius: self.r }, None)?;
                let v = velocity(self.m, run.end).normalized();
                let offset = v.cross(b.displacement_from(run.end.x));
                Ok(Shot { mismatch: offset, run_end: run.end, time: run.time })
            }
        }
    }

    fn connection(&self, s: f64, shot: &Shot) -> Connection {
        let angle = self.param.angle(s);
        Connection {
            from: self.a,
            to: self.b,
            radius: self.r,
            angle,
            initial: State { x: self.a, xi: crate::metric::unit_momentum(self.m, self.a, angle) },
            end: shot.run_end,
            length: shot.time,
            mismatch: shot.mismatch,
        }
    }
}

/// Safeguarded secant iteration on a scalar function of the shooting parameter.
///
/// `known` are previously evaluated points (parameter, value) reused without
/// re-integration; `bracket` is an optional interval with values of opposite sign.
struct SecantOutcome {
    s: f64,
    shot: Option<Shot>,
    residual: f64,
}

fn secant_solve(
    solver: &GeodesicSolver,
    prob: &Problem,
    first: f64,
    known: Option<(f64, f64)>,
    mut bracket: Option<((f64, f64), (f64, f64))>,
    max_step: f64,
) -> Result<SecantOutcome> {
    let tol = solver.shoot_tol;
    let clamp = |s: f64| match prob.param {
        Param::Cone { .. } => s.clamp(1e-9, 1.0 - 1e-9),
        Param::Free => s,
    };
    let mut s1 = clamp(first);
    let mut shot1 = prob.shoot(solver, s1)?;
    let mut f1 = shot1.mismatch;
    let mut best = (s1, f1.abs());
    let (mut s0, mut f0) = match known {
        Some(k) if (k.0 - s1).abs() > 1e-15 => k,
        _ => {
            let s = clamp(s1 + 1e-4 * if s1 > 0.5 && matches!(prob.param, Param::Cone { .. }) { -1.0 } else { 1.0 });
            (s, prob.shoot(solver, s)?.mismatch)
        }
    };
    let update_bracket = |br: &mut Option<((f64, f64), (f64, f64))>, s: f64, f: f64| {
        if let Some((lo, hi)) = br.as_mut() {
            if f.signum() == lo.1.signum() {
                *lo = (s, f);
            } else {
                *hi = (s, f);
            }
        }
    };
    if bracket.is_none() && f0.signum() != f1.signum() {
        bracket = Some(((s0, f0), (s1, f1)));
    }
    for _ in 0..solver.shoot_max_iter {
        if f1.abs() <= tol {
            return Ok(SecantOutcome { s: s1, residual: f1.abs(), shot: Some(shot1) });
        }
        let denom = f1 - f0;
        let mut next = if denom != 0.0 { s1 - f1 * (s1 - s0) / denom } else { f64::NAN };
        match bracket {
            Some((lo, hi)) => {
                let (a, b) = (lo.0.min(hi.0), lo.0.max(hi.0));
                if !(next > a && next < b) {
                    next = 0.5 * (a + b);
                }
            }
            None => {
                if !next.is_finite() {
                    next = s1 + max_step;
                }
                next = s1 + (next - s1).clamp(-max_step, max_step);
            }
        }
        next = clamp(next);
        let shot = prob.shoot(solver, next)?;
        let f = shot.mismatch;
        if bracket.is_none() && f.signum() != f1.signum() {
            bracket = Some(((s1, f1), (next, f)));
        } else {
            update_bracket(&mut bracket, next, f);
        }
        s0 = s1;
        f0 = f1;
        s1 = next;
        f1 = f;
        shot1 = shot;
        if f1.abs() < best.1 {
            best = (s1, f1.abs());
        }
        if let Some((lo, hi)) = bracket {
            if (lo.0 - hi.0).abs() < 1e-15 && f1.abs() > tol {
                break;
            }
        }
    }
    if f1.abs() <= tol {
        return Ok(SecantOutcome { s: s1, residual: f1.abs(), shot: Some(shot1) });
    }
    Ok(SecantOutcome { s: best.0, residual: best.1, shot: None })
}

impl GeodesicSolver {
    fn solve_problem(&self, prob: &Problem, guess: f64, known: Option<(f64, f64)>) -> Result<Connection> {
        let bracket = prob.cone_bracket().map(|(f_lo, f_hi)| ((0.0, f_lo), (1.0, f_hi)));
        let max_step = match prob.param {
            Param::Cone { .. } => 0.25,
            Param::Free => 0.5,
        };
        let out = secant_solve(self, prob, guess, known, bracket, max_step)?;
        let mut worst = out.residual;
        if let Some(shot) = out.shot {
            return Ok(prob.connection(out.s, &shot));
        }
        for k in 0..self.restarts {
            let start = match prob.param {
                Param::Cone { .. } => (k as f64 + 0.5) / self.restarts as f64,
                Param::Free => guess + TAU * (k + 1) as f64 / (self.restarts + 1) as f64,
            };
            let out = secant_solve(self, prob, start, None, bracket, max_step)?;
            if let Some(shot) = out.shot {
                return Ok(prob.connection(out.s, &shot));
            }
            worst = worst.min(out.residual);
        }
        Err(FinslerError::Shooting { from: prob.a, to: prob.b, residual: worst })
    }

    /// Shoots from `a` to `b` inside the disc of radius `r` (no trace).
    pub fn connect_endpoint(&self, m: &Metric, a: Point, b: Point, r: f64) -> Result<Connection> {
        let prob = Problem::new(self, m, a, b, r)?;
        self.solve_problem(&prob, prob.initial_guess(), None)
    }

    /// The geodesic from `a` to `b` within the disc of radius `r`; its length is `d_phi(a, b)`.
    pub fn connect(&self, m: &Metric, a: Point, b: Point, r: f64) -> Result<Geodesic> {
        let c = self.connect_endpoint(m, a, b, r)?;
        self.trace_connection(m, &c)
    }

    /// Re-integrates a converged connection with full sampling.
    pub fn trace_connection(&self, m: &Metric, c: &Connection) -> Result<Geodesic> {
        let mut tr = Trace::default();
        let run = self.integrate(m, c.initial, 1.0, Stop::Time(c.length), Some(&mut tr))?;
        Ok(tr.into_geodesic(run.time))
    }

    /// Connections from one source to many targets, warm-starting each solve
    /// from the previous one. Targets are visited in the given order, so
    /// neighbouring targets should be adjacent in the slice.
    ///
    /// For a source and targets on the same circle sorted counter-clockwise
    /// from the source, the previous solution also supplies a bracket end.
    pub fn connect_many(&self, m: &Metric, a: Point, targets: &[Point], r: f64) -> Result<Vec<Connection>> {
        let mut out = Vec::with_capacity(targets.len());
        let mut prev: Option<(f64, f64, f64)> = None; // (param, straight guess, boundary offset)
        for &b in targets {
            let prob = Problem::new(self, m, a, b, r)?;
            let straight = prob.initial_guess();
            let (guess, known) = match prev {
                None => (straight, None),
                Some((s_prev, straight_prev, rel_prev)) => {
                    let predicted = match prob.param {
                        Param::Cone { .. } => (straight + (s_prev - straight_prev)).clamp(1e-6, 1.0 - 1e-6),
                        Param::Free => straight + wrap_angle(s_prev - straight_prev),
                    };
                    // On a shared circle the previous solution is an exact sample
                    // of the new mismatch function.
                    let known = match (prob.target, prob.cone_bracket()) {
                        (Target::Boundary { angle, source_angle: Some(sa) }, Some(_)) => {
                            let db = (angle - sa).rem_euclid(TAU) * r;
                            Some((s_prev, rel_prev - db))
                        }
                        _ => None,
                    };
                    (predicted, known)
                }
            };
            let c = match self.solve_problem(&prob, guess, known) {
                Ok(c) => c,
                Err(_) => self.solve_problem(&prob, straight, None)?,
            };
            let s_sol = prob.param.from_angle(c.angle);
            let s_sol = match prob.param {
                Param::Cone { .. } => s_sol,
                Param::Free => c.angle,
            };
            let rel = match prob.target {
                Target::Boundary { angle, source_angle: Some(sa) } => (angle - sa).rem_euclid(TAU) * r + c.mismatch,
                _ => 0.0,
            };
            prev = Some((s_sol, straight, rel));
            out.push(c);
        }
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// Jacobi fields
// ---------------------------------------------------------------------------

/// Outcome of integrating the linearized flow along a geodesic.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JacobiReport {
    /// First time in `(0, T]` where the transverse variation vanishes.
    pub conjugate_time: Option<f64>,
    /// Smallest `|J(t)| / t` seen, a scale-free margin.
    pub min_relative_transverse: f64,
}

impl JacobiReport {
    pub fn is_conjugate_free(&self) -> bool {
        self.conjugate_time.is_none()
    }
}

type Z = [f64; 4];

fn field(m: &Metric, z: &Z) -> Z {
    let (dx, dxi) = rhs(m, &State { x: Point::new(z[0], z[1]), xi: Covector::new(z[2], z[3]) }, 1.0);
    [dx.x, dx.y, dxi.x, dxi.y]
}

fn linearized(m: &Metric, z: &Z, dz: &Z) -> Z {
    let n = dz.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n == 0.0 {
        return [0.0; 4];
    }
    let eps = 1e-6 / n;
    let zp: Z = std::array::from_fn(|i| z[i] + eps * dz[i]);
    let zm: Z = std::array::from_fn(|i| z[i] - eps * dz[i]);
    let fp = field(m, &zp);
    let fm = field(m, &zm);
    std::array::from_fn(|i| (fp[i] - fm[i]) / (2.0 * eps))
}

fn rk4_pair(m: &Metric, z: &Z, dz: &Z, h: f64) -> (Z, Z) {
    let add = |a: &Z, k: &Z, s: f64| -> Z { std::array::from_fn(|i| a[i] + s * k[i]) };
    let k1 = field(m, z);
    let l1 = linearized(m, z, dz);
    let z2 = add(z, &k1, 0.5 * h);
    let d2 = add(dz, &l1, 0.5 * h);
    let k2 = field(m, &z2);
    let l2 = linearized(m, &z2, &d2);
    let z3 = add(z, &k2, 0.5 * h);
    let d3 = add(dz, &l2, 0.5 * h);
    let k3 = field(m, &z3);
    let l3 = linearized(m, &z3, &d3);
    let z4 = add(z, &k3, h);
    let d4 = add(dz, &l3, h);
    let k4 = field(m, &z4);
    let l4 = linearized(m, &z4, &d4);
    let zn: Z = std::array::from_fn(|i| z[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]));
    let dn: Z = std::array::from_fn(|i| dz[i] + h / 6.0 * (l1[i] + 2.0 * l2[i] + 2.0 * l3[i] + l4[i]));
    (zn, dn)
}

impl GeodesicSolver {
    /// Integrates the Jacobi (linearized) flow along `gamma` from zero position
    /// variation and unit transverse momentum variation, and reports the first
    /// zero of the transverse position component.
    pub fn conjugate_point_check(&self, m: &Metric, gamma: &Geodesic) -> JacobiReport {
        let s0 = gamma.initial_state();
        self.jacobi_from(m, s0, gamma.length)
    }

    fn jacobi_from(&self, m: &Metric, s0: State, length: f64) -> JacobiReport {
        let v0 = velocity(m, s0);
        let t0 = v0.perp().normalized();
        let mut z: Z = [s0.x.x, s0.x.y, s0.xi.x, s0.xi.y];
        let mut dz: Z = [0.0, 0.0, t0.x, t0.y];
        let transverse = |z: &Z, dz: &Z| {
            let v = velocity(m, State { x: Point::new(z[0], z[1]), xi: Covector::new(z[2], z[3]) });
            v.normalized().cross(Vector::new(dz[0], dz[1]))
        };
        let mut t = 0.0;
        let mut sign = 0.0;
        let mut prev_c = 0.0;
        let mut min_rel = f64::INFINITY;
        while t < length {
            let h = self.step.min(length - t);
            let (zn, dn) = rk4_pair(m, &z, &dz, h);
            let tn = t + h;
            let c = transverse(&zn, &dn);
            if sign == 0.0 {
                sign = c.signum();
            } else if c * sign <= 0.0 {
                let frac = prev_c / (prev_c - c);
                return JacobiReport { conjugate_time: Some(t + frac * h), min_relative_transverse: 0.0 };
            }
            min_rel = min_rel.min(c.abs() / tn);
            prev_c = c;
            z = zn;
            // Keep the base trajectory on the unit co-sphere.
            let xi = Covector::new(z[2], z[3]);
            let n = m.dual_jet(Point::new(z[0], z[1]), xi).value;
            z[2] /= n;
            z[3] /= n;
            dz = dn;
            t = tn;
        }
        JacobiReport { conjugate_time: None, min_relative_transverse: min_rel }
    }
}

// ---------------------------------------------------------------------------
// Simplicity
// ---------------------------------------------------------------------------

/// Which sampled geodesic was worst: boundary sample index and direction index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeodesicId {
    pub boundary: usize,
    pub direction: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimplicityReport {
    pub radius: f64,
    /// Minimum normal curvature of the boundary circle, in metric units.
    pub convexity_margin: f64,
    pub conjugate_points: bool,
    pub minimizing: bool,
    pub worst: Option<GeodesicId>,
}

impl SimplicityReport {
    pub fn is_simple(&self) -> bool {
        self.convexity_margin > 0.0 && !self.conjugate_points && self.minimizing
    }
}

impl GeodesicSolver {
    /// Normal curvature of the circle of radius `r` at `q` with respect to the
    /// geodesic tangent to it in direction `t`, from the second-order radial
    /// deviation of that geodesic (Richardson-extrapolated in the probe length).
    pub fn boundary_curvature(&self, m: &Metric, q: Point, t: Vector, r: f64) -> Result<f64> {
        let u = t / m.norm(q, t)?;
        let xi = m.legendre(q, u)?;
        let speed = u.norm();
        let probe = GeodesicSolver { step: self.step.min(2.5e-4), ..*self };
        let dev = |s: f64| -> Result<f64> {
            let end = probe.flow_for(m, State { x: q, xi }, s)?;
            Ok(2.0 * (end.x.norm() - r) / (s * s * speed))
        };
        let s = 0.02;
        let k1 = dev(s)?;
        let k2 = dev(0.5 * s)?;
        // Scale to curvature of a circle of the given radius.
        Ok((2.0 * k2 - k1) * r)
    }

    /// Samples boundary convexity, conjugate points and injectivity of the
    /// exit map over chords from `boundary_samples` points of the circle of
    /// radius `r`, `direction_samples` inward directions each.
    pub fn simplicity_report_at(
        &self,
        m: &Metric,
        r: f64,
        boundary_samples: usize,
        direction_samples: usize,
    ) -> Result<SimplicityReport> {
        self.validate()?;
        if boundary_samples < 1 || direction_samples < 2 {
            return Err(FinslerError::InvalidArgument("simplicity report needs samples".into()));
        }
        let per_point = crate::par::map_range(boundary_samples, |i| -> Result<(f64, bool, bool, Option<GeodesicId>, f64)> {
            let q = Point::polar(r, TAU * i as f64 / boundary_samples as f64);
            let t = q.to_vector().perp();
            let k = self.boundary_curvature(m, q, t, r)?.min(self.boundary_curvature(m, q, -t, r)?);
            let start = m.legendre(q, t)?.angle();
            let end = m.legendre(q, -t)?.angle();
            let width = (end - start).rem_euclid(TAU);
            let mut conj = false;
            let mut monotone = true;
            let mut last_rel = 0.0;
            let mut worst: Option<GeodesicId> = None;
            let mut worst_margin = f64::INFINITY;
            for j in 0..direction_samples {
                let s = (j as f64 + 0.5) / direction_samples as f64;
                let xi = crate::metric::unit_momentum(m, q, start + width * s);
                let s0 = State { x: q, xi };
                let (end_state, len) = self.flow_exit(m, s0, r, false)?;
                let rel = (end_state.x.angle() - q.angle()).rem_euclid(TAU);
                if rel <= last_rel {
                    monotone = false;
                    worst.get_or_insert(GeodesicId { boundary: i, direction: j });
                }
                last_rel = rel;
                let jr = self.jacobi_from(m, s0, len);
                if !jr.is_conjugate_free() {
                    conj = true;
                    worst = Some(GeodesicId { boundary: i, direction: j });
                } else if jr.min_relative_transverse < worst_margin && worst.is_none() {
                    worst_margin = jr.min_relative_transverse;
                }
            }
            Ok((k, conj, monotone, worst, worst_margin))
        });
        let mut report = SimplicityReport {
            radius: r,
            convexity_margin: f64::INFINITY,
            conjugate_points: false,
            minimizing: true,
            worst: None,
        };
        let mut worst_curv = f64::INFINITY;
        for (i, res) in per_point.into_iter().enumerate() {
            let (k, conj, mono, worst, _) = res?;
            if k < report.convexity_margin {
                report.convexity_margin = k;
            }
            if (conj || !mono) && report.worst.is_none() {
                report.worst = worst;
            }
            if k < worst_curv && report.worst.is_none() && k <= 0.0 {
                worst_curv = k;
                report.worst = Some(GeodesicId { boundary: i, direction: 0 });
            }
            report.conjugate_points |= conj;
            report.minimizing &= mono;
        }
        Ok(report)
    }

    /// Simplicity of the metric on the unit disc.
    pub fn simplicity_report(&self, m: &Metric, boundary_samples: usize, direction_samples: usize) -> Result<SimplicityReport> {
        self.simplicity_report_at(m, 1.0, boundary_samples, direction_samples)
    }
}

// Free-function forms with the default solver.

pub fn flow(m: &Metric, x0: Point, alpha0: Covector, r: f64) -> Result<Geodesic> {
    GeodesicSolver::default().flow(m, x0, alpha0, r)
}

pub fn exit_chord(m: &Metric, x: Point, v: Vector) -> Result<Chord> {
    GeodesicSolver::default().exit_chord(m, x, v)
}

pub fn connect(m: &Metric, a: Point, b: Point, r: f64) -> Result<Geodesic> {
    GeodesicSolver::default().connect(m, a, b, r)
}

pub fn conjugate_point_check(m: &Metric, gamma: &Geodesic) -> JacobiReport {
    GeodesicSolver::default().conjugate_point_check(m, gamma)
}

pub fn simplicity_report(m: &Metric, boundary_samples: usize, direction_samples: usize) -> Result<SimplicityReport> {
    GeodesicSolver::default().simplicity_report(m, boundary_samples, direction_samples)
}
