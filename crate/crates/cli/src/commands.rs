//! Subcommand bodies. Each returns its output files as `(name, bytes)` so the
//! caller can write them only after the computation succeeded.

use std::f64::consts::TAU;

use serde::Serialize;
use serde_json::json;

use finsler_core::envelope::{boundary_distance_table, enveloping_function, BoundaryDistanceTable};
use finsler_core::field::ScalarField;
use finsler_core::geodesic::Geodesic;
use finsler_core::geom::{Covector, Point};
use finsler_core::grid::PolarGrid;
use finsler_core::io;
use finsler_core::monotone::{
    monotonicity_sweep, psi_displacement, psi_smoothness_probe, simplicity_threshold_scan, summarize, PsiContext,
};
use finsler_core::volume::{
    ht_volume_envelope_boundary, ht_volume_fiber, rotinv_profile, volume_from_bd, volume_rotinv, VolumeResult,
};
use finsler_core::xray::{conformal_metric, distance_variation_check, injectivity_experiment, sinogram};
use finsler_core::Result;

use crate::config::Config;

pub type Outputs = Vec<(String, Vec<u8>)>;

fn json_bytes<T: Serialize + ?Sized>(value: &T) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    io::write_json(&mut buf, value)?;
    Ok(buf)
}

fn geodesic_summary(g: &Geodesic) -> serde_json::Value {
    json!({
        "start": g.start(),
        "end": g.end(),
        "length": g.length,
        "samples": g.len(),
    })
}

pub fn geodesic(c: &Config) -> Result<Outputs> {
    let (m, s, r) = (&c.metric, &c.solver, c.geodesic.radius);
    let mut out = Outputs::new();
    let mut summary = Vec::new();
    for (k, f) in c.geodesic.flows.iter().enumerate() {
        let g = s.flow(m, Point::new(f.start[0], f.start[1]), Covector::from_angle(f.angle), r)?;
        let jacobi = s.conjugate_point_check(m, &g);
        let mut buf = Vec::new();
        io::write_geodesic(&mut buf, &g)?;
        let name = format!("flow_{k}.csv");
        summary.push(json!({ "file": name, "kind": "flow", "geodesic": geodesic_summary(&g), "jacobi": jacobi }));
        out.push((name, buf));
    }
    for (k, cn) in c.geodesic.connections.iter().enumerate() {
        let g = s.connect(m, Point::new(cn.from[0], cn.from[1]), Point::new(cn.to[0], cn.to[1]), r)?;
        let mut buf = Vec::new();
        io::write_geodesic(&mut buf, &g)?;
        let name = format!("connect_{k}.csv");
        summary.push(json!({ "file": name, "kind": "connect", "geodesic": geodesic_summary(&g) }));
        out.push((name, buf));
    }
    out.push(("geodesics.json".into(), json_bytes(&summary)?));
    Ok(out)
}

fn table_outputs(t: &BoundaryDistanceTable, out: &mut Outputs) -> Result<()> {
    let mut csv = Vec::new();
    io::write_table(&mut csv, t)?;
    out.push(("table.csv".into(), csv));
    out.push(("table.json".into(), json_bytes(t)?));
    Ok(())
}

pub fn bdist(c: &Config) -> Result<Outputs> {
    let t = boundary_distance_table(&c.metric, c.bdist.points, &c.solver)?;
    let mut out = Outputs::new();
    table_outputs(&t, &mut out)?;
    let report = json!({
        "points": t.n,
        "max_asymmetry": t.max_asymmetry(),
        "triangle_excess": t.triangle_excess(),
        "volume_from_bd": volume_from_bd(&t)?,
    });
    out.push(("bdist_report.json".into(), json_bytes(&report)?));
    Ok(out)
}

/// Largest deviation of a table from a function of `j - i` alone.
fn rotation_defect(t: &BoundaryDistanceTable) -> f64 {
    let profile: Vec<f64> = (0..t.n).map(|k| (0..t.n).map(|i| t.get(i, (i + k) % t.n)).sum::<f64>() / t.n as f64).collect();
    let mut worst: f64 = 0.0;
    for i in 0..t.n {
        for k in 0..t.n {
            worst = worst.max((t.get(i, (i + k) % t.n) - profile[k]).abs());
        }
    }
    worst.max(t.max_asymmetry())
}

pub fn volume(c: &Config) -> Result<Outputs> {
    let v = &c.volume;
    let mut results: Vec<VolumeResult> = vec![ht_volume_fiber(&c.metric, v.quadrature)?];
    let env = enveloping_function(&c.metric, v.delta, v.sources, &PolarGrid::boundary(v.boundary)?, &c.solver)?;
    results.push(ht_volume_envelope_boundary(&env)?);
    let table = boundary_distance_table(&c.metric, v.boundary, &c.solver)?;
    results.push(volume_from_bd(&table)?);
    let defect = rotation_defect(&table);
    let rotinv = defect <= v.rotation_tolerance;
    if rotinv {
        results.push(volume_rotinv(&rotinv_profile(&table))?);
    }
    let reference = results[0].value;
    let mut csv = String::from("method,value,error,relative_to_fiber\n");
    for r in &results {
        let method = serde_json::to_value(r.method)?;
        csv.push_str(&format!(
            "{},{},{},{}\n",
            method.as_str().unwrap_or_default(),
            io::fmt_f64(r.value),
            io::fmt_f64(r.error),
            io::fmt_f64(r.value / reference - 1.0)
        ));
    }
    let report = json!({
        "results": results,
        "rotation_defect": defect,
        "rotation_invariant": rotinv,
    });
    Ok(vec![("volumes.json".into(), json_bytes(&report)?), ("volume_comparison.csv".into(), csv.into_bytes())])
}

pub fn envelope(c: &Config) -> Result<Outputs> {
    let e = &c.envelope;
    let grid = PolarGrid::new(e.rings, e.angles)?;
    let env = enveloping_function(&c.metric, e.delta, e.sources, &grid, &c.solver)?;
    let validation = env.validate(&c.metric)?;
    let interior_nonconvex: Vec<usize> = validation.nonconvex_nodes.iter().copied().filter(|&k| !grid.is_boundary(k)).collect();
    let table = boundary_distance_table(&c.metric, e.angles, &c.solver)?;
    let report = json!({
        "validation": validation,
        "interior_nonconvex_nodes": interior_nonconvex,
        "recovery_error": env.recovered_table().max_difference(&table),
        "envelope_boundary_volume": ht_volume_envelope_boundary(&env)?,
    });
    let mut csv = Vec::new();
    io::write_envelope(&mut csv, &env)?;
    Ok(vec![("envelope.csv".into(), csv), ("envelope_report.json".into(), json_bytes(&report)?)])
}

/// Boundary pairs from a seeded stream, keeping away from diameters and coincident points.
fn random_pairs(seed: u64, count: usize) -> Vec<(Point, Point)> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let a = rng.gen_range(0.0..TAU);
        let d = rng.gen_range(0.5..TAU - 0.5);
        if (d - TAU / 2.0).abs() > 0.05 {
            out.push((Point::polar(1.0, a), Point::polar(1.0, a + d)));
        }
    }
    out
}

pub fn raytransform(c: &Config) -> Result<Outputs> {
    let r = &c.raytransform;
    let rays = sinogram(&c.metric, &r.f, r.points, &c.solver)?;
    let mut csv = Vec::new();
    io::write_sinogram(&mut csv, &rays)?;
    let ones = sinogram(&c.metric, &ScalarField::constant(1.0), r.points, &c.solver)?;
    let unit_residual = ones.iter().map(|s| (s.value - s.length).abs()).fold(0.0, f64::max);
    let variation = distance_variation_check(&c.metric, &r.f, &random_pairs(c.seed, r.pairs), &r.epsilons, &c.solver)?;
    let injectivity = injectivity_experiment(&c.metric, &r.f, r.injectivity_epsilon, r.points, r.quadrature, &c.solver)?;
    let weighted = conformal_metric(&c.metric, &r.f, r.injectivity_epsilon)?;
    let report = json!({
        "constant_function_residual": unit_residual,
        "conformal_metric_volume": ht_volume_fiber(&weighted, r.quadrature)?,
    });
    Ok(vec![
        ("sinogram.csv".into(), csv),
        ("variation.json".into(), json_bytes(&variation)?),
        ("injectivity.json".into(), json_bytes(&injectivity)?),
        ("raytransform_report.json".into(), json_bytes(&report)?),
    ])
}

pub fn monotonicity(c: &Config) -> Result<Outputs> {
    let m = &c.monotonicity;
    let records = monotonicity_sweep(&c.metric, &m.perturbation, c.seed, m.trials, &c.solver)?;
    let mut lines = Vec::new();
    io::write_trials(&mut lines, &records)?;
    let mut summary = Vec::new();
    io::write_summary(&mut summary, &summarize(&records))?;
    let mut out = vec![("trials.jsonl".to_string(), lines), ("summary.csv".to_string(), summary)];
    if let Some(scan) = &m.threshold_scan {
        let rows = simplicity_threshold_scan(&c.metric, &m.perturbation, &scan.amplitudes, scan.seeds, &c.solver)?;
        let mut csv = String::from("amplitude,simple,seeds\n");
        for (a, simple, seeds) in rows {
            csv.push_str(&format!("{},{simple},{seeds}\n", io::fmt_f64(a)));
        }
        out.push(("threshold_scan.csv".into(), csv.into_bytes()));
    }
    Ok(out)
}

pub fn psi(c: &Config) -> Result<Outputs> {
    let p = &c.psi;
    let source = match &p.source {
        Some(s) => s.clone(),
        None => conformal_metric(&c.metric, &ScalarField::gaussian(1.0, [0.2, -0.1], 0.5), 1e-2)?,
    };
    let ctx = PsiContext::new(source, c.metric.clone(), c.solver);
    let report = psi_smoothness_probe(&ctx, p.q_angle, p.half_count, p.step)?;
    let points: Vec<Point> =
        (0..p.displacement_points).map(|i| Point::polar(0.9 * i as f64 / p.displacement_points as f64, 0.7 * i as f64)).collect();
    let displacement = psi_displacement(&ctx, &points, p.directions)?;
    let mut csv = String::from("s,ell,lambda,w1,w2,tau,p1,p2,psi_x,psi_y,psi_v1,psi_v2,tangent\n");
    for q in &report.samples {
        let f = [q.s, q.ell, q.lambda, q.w.x, q.w.y, q.tau, q.midpoint.x, q.midpoint.y, q.psi_base.x, q.psi_base.y, q.psi_vector.x, q.psi_vector.y]
            .map(io::fmt_f64);
        csv.push_str(&format!("{},{}\n", f.join(","), q.tangent));
    }
    let summary = json!({
        "q_angle": report.q_angle,
        "step": report.step,
        "first_differences": report.first_differences,
        "second_differences": report.second_differences,
        "tangency_gaps": report.tangency_gaps.iter().map(|g| json!({ "target_length": g.0, "length": g.1, "gap": g.2 })).collect::<Vec<_>>(),
        "max_displacement": displacement,
    });
    Ok(vec![("psi_probe.csv".into(), csv.into_bytes()), ("psi_report.json".into(), json_bytes(&summary)?)])
}
