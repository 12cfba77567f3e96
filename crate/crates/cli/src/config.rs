//! Experiment configuration (TOML). Every section is optional; unknown keys
//! are rejected.

use serde::{Deserialize, Serialize};

use finsler_core::field::{Monomial, ScalarField};
use finsler_core::geodesic::GeodesicSolver;
use finsler_core::metric::Metric;
use finsler_core::monotone::PerturbationSpec;
use finsler_core::volume::FiberQuadrature;
use finsler_core::{FinslerError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub metric: Metric,
    pub solver: GeodesicSolver,
    pub geodesic: GeodesicSection,
    pub bdist: BdistSection,
    pub volume: VolumeSection,
    pub envelope: EnvelopeSection,
    pub raytransform: RayTransformSection,
    pub monotonicity: MonotonicitySection,
    pub psi: PsiSection,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            seed: 0,
            metric: Metric::euclidean(),
            solver: GeodesicSolver::with_step(1e-2),
            geodesic: Default::default(),
            bdist: Default::default(),
            volume: Default::default(),
            envelope: Default::default(),
            raytransform: Default::default(),
            monotonicity: Default::default(),
            psi: Default::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowSpec {
    pub start: [f64; 2],
    /// Angle of the initial momentum; it is rescaled to unit dual norm.
    pub angle: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConnectSpec {
    pub from: [f64; 2],
    pub to: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeodesicSection {
    pub radius: f64,
    pub flows: Vec<FlowSpec>,
    pub connections: Vec<ConnectSpec>,
}

impl Default for GeodesicSection {
    fn default() -> Self {
        GeodesicSection {
            radius: 1.0,
            flows: vec![FlowSpec { start: [0.0, 0.0], angle: 0.3 }],
            connections: vec![ConnectSpec { from: [1.0, 0.0], to: [-0.2, 0.5] }],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BdistSection {
    pub points: usize,
}

impl Default for BdistSection {
    fn default() -> Self {
        BdistSection { points: 64 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VolumeSection {
    pub quadrature: FiberQuadrature,
    /// Boundary points of the distance table and of the envelope boundary grid.
    pub boundary: usize,
    /// Source points of the enveloping function.
    pub sources: usize,
    pub delta: f64,
    /// The rotation-invariant route runs when every table row matches the
    /// averaged profile within this tolerance.
    pub rotation_tolerance: f64,
}

impl Default for VolumeSection {
    fn default() -> Self {
        VolumeSection { quadrature: FiberQuadrature::default(), boundary: 64, sources: 64, delta: 0.2, rotation_tolerance: 1e-6 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvelopeSection {
    pub delta: f64,
    pub sources: usize,
    pub rings: usize,
    pub angles: usize,
}

impl Default for EnvelopeSection {
    fn default() -> Self {
        EnvelopeSection { delta: 0.2, sources: 64, rings: 4, angles: 32 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RayTransformSection {
    pub f: ScalarField,
    /// Boundary points of the sinogram and of the injectivity experiment.
    pub points: usize,
    pub epsilons: Vec<f64>,
    /// Random boundary pairs for the distance variation check.
    pub pairs: usize,
    pub injectivity_epsilon: f64,
    pub quadrature: FiberQuadrature,
}

impl Default for RayTransformSection {
    fn default() -> Self {
        RayTransformSection {
            f: ScalarField::Polynomial { terms: vec![Monomial { coeff: 1.0, px: 1, py: 0 }, Monomial { coeff: 0.5, px: 0, py: 2 }], cutoff: true },
            points: 16,
            epsilons: vec![1e-2, 5e-3, 2.5e-3],
            pairs: 20,
            injectivity_epsilon: 0.1,
            quadrature: FiberQuadrature::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThresholdScan {
    pub amplitudes: Vec<f64>,
    pub seeds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MonotonicitySection {
    pub trials: usize,
    pub perturbation: PerturbationSpec,
    pub threshold_scan: Option<ThresholdScan>,
}

impl Default for MonotonicitySection {
    fn default() -> Self {
        MonotonicitySection { trials: 20, perturbation: PerturbationSpec::default(), threshold_scan: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PsiSection {
    /// Source metric `phi'`; defaults to the target times `1 + 0.01 * bump`.
    pub source: Option<Metric>,
    /// Polar angle of the boundary point the probe approaches.
    pub q_angle: f64,
    pub half_count: usize,
    pub step: f64,
    pub displacement_points: usize,
    pub directions: usize,
}

impl Default for PsiSection {
    fn default() -> Self {
        PsiSection { source: None, q_angle: 0.4, half_count: 16, step: 1e-3, displacement_points: 6, directions: 8 }
    }
}

fn invalid(msg: impl Into<String>) -> FinslerError {
    FinslerError::InvalidArgument(msg.into())
}

fn even_at_least(name: &str, n: usize, min: usize) -> Result<()> {
    if n < min || n % 2 != 0 {
        return Err(invalid(format!("{name} must be even and at least {min}, got {n}")));
    }
    Ok(())
}

fn scale_even(n: usize, f: f64) -> usize {
    (((n as f64 * f) / 2.0).round() as usize * 2).max(2)
}

fn scale_count(n: usize, f: f64) -> usize {
    ((n as f64 * f).round() as usize).max(1)
}

fn scale_quadrature(q: FiberQuadrature, f: f64) -> FiberQuadrature {
    FiberQuadrature { radial: scale_count(q.radial, f), angular: scale_even(q.angular, f), fiber: scale_even(q.fiber, f) }
}

impl Config {
    pub fn parse(text: &str) -> Result<Config> {
        toml::from_str(text).map_err(|e| FinslerError::Format(e.message().to_string()))
    }

    /// Multiplies every grid resolution by `f`, keeping even sizes even.
    pub fn scale_resolution(&mut self, f: f64) -> Result<()> {
        if !(f > 0.0 && f.is_finite()) {
            return Err(invalid(format!("resolution scale must be positive, got {f}")));
        }
        if f == 1.0 {
            return Ok(());
        }
        self.bdist.points = scale_even(self.bdist.points, f);
        let v = &mut self.volume;
        v.quadrature = scale_quadrature(v.quadrature, f);
        v.boundary = scale_even(v.boundary, f);
        v.sources = scale_even(v.sources, f);
        let e = &mut self.envelope;
        e.sources = scale_even(e.sources, f);
        e.rings = scale_count(e.rings, f);
        e.angles = scale_even(e.angles, f);
        let r = &mut self.raytransform;
        r.points = scale_count(r.points, f);
        r.quadrature = scale_quadrature(r.quadrature, f);
        let p = &mut self.monotonicity.perturbation;
        p.table_points = scale_even(p.table_points, f);
        p.quadrature = scale_quadrature(p.quadrature, f);
        self.psi.half_count = scale_count(self.psi.half_count, f);
        self.psi.step /= f;
        Ok(())
    }

    /// Checks every section, so a run fails before any output is produced.
    pub fn validate(&self) -> Result<()> {
        self.solver.validate()?;
        let g = &self.geodesic;
        if !(g.radius > 0.0 && g.radius <= self.metric.radius()) {
            return Err(invalid(format!("geodesic radius {} must lie in (0, {}]", g.radius, self.metric.radius())));
        }
        let inside = |p: [f64; 2]| p.iter().all(|c| c.is_finite()) && p[0].hypot(p[1]) <= g.radius * (1.0 + 1e-12);
        for f in &g.flows {
            if !inside(f.start) || !f.angle.is_finite() {
                return Err(invalid(format!("flow start {:?} must lie in the disc of radius {}", f.start, g.radius)));
            }
        }
        for c in &g.connections {
            if !inside(c.from) || !inside(c.to) {
                return Err(invalid(format!("connection {:?} -> {:?} leaves the disc of radius {}", c.from, c.to, g.radius)));
            }
        }
        even_at_least("bdist.points", self.bdist.points, 8)?;
        let v = &self.volume;
        v.quadrature.validate()?;
        even_at_least("volume.boundary", v.boundary, 8)?;
        even_at_least("volume.sources", v.sources, 10)?;
        self.check_delta("volume.delta", v.delta)?;
        if !(v.rotation_tolerance >= 0.0) {
            return Err(invalid("volume.rotation_tolerance must be non-negative"));
        }
        let e = &self.envelope;
        self.check_delta("envelope.delta", e.delta)?;
        even_at_least("envelope.sources", e.sources, 10)?;
        even_at_least("envelope.angles", e.angles, 4)?;
        if e.rings == 0 {
            return Err(invalid("envelope.rings must be positive"));
        }
        let r = &self.raytransform;
        if r.points < 3 || r.pairs == 0 {
            return Err(invalid("raytransform needs at least 3 points and one pair"));
        }
        if r.epsilons.len() < 2 || r.epsilons.iter().any(|e| !(*e > 0.0)) {
            return Err(invalid("raytransform.epsilons needs at least two positive values"));
        }
        if !(r.injectivity_epsilon > 0.0) {
            return Err(invalid("raytransform.injectivity_epsilon must be positive"));
        }
        r.quadrature.validate()?;
        let m = &self.monotonicity;
        m.perturbation.validate()?;
        if m.trials == 0 {
            return Err(invalid("monotonicity.trials must be positive"));
        }
        if let Some(s) = &m.threshold_scan {
            if s.seeds == 0 || s.amplitudes.is_empty() || s.amplitudes.iter().any(|a| !(*a >= 0.0)) {
                return Err(invalid("threshold_scan needs seeds and non-negative amplitudes"));
            }
        }
        let p = &self.psi;
        if p.half_count < 2 || !(p.step > 0.0 && p.step < 0.5) || p.displacement_points == 0 || p.directions == 0 {
            return Err(invalid("psi needs half_count >= 2, step in (0, 0.5) and at least one point and direction"));
        }
        if let Some(s) = &p.source {
            if s.radius() < 1.0 {
                return Err(invalid("psi.source must be defined on the unit disc"));
            }
        }
        Ok(())
    }

    fn check_delta(&self, name: &str, delta: f64) -> Result<()> {
        if !(delta > 0.0) || 1.0 + delta > self.metric.radius() * (1.0 + 1e-12) {
            return Err(invalid(format!("{name} = {delta} must be positive and at most the metric margin {}", self.metric.delta())));
        }
        Ok(())
    }
}
