//! Browser bindings. Every export takes the metric as a JSON object in the
//! same shape as the `[metric]` table of a CLI config and returns JSON text.

use std::f64::consts::TAU;

use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

use finsler_core::envelope::boundary_distance_table;
use finsler_core::geodesic::{Geodesic, GeodesicSolver};
use finsler_core::geom::{Covector, Point};
use finsler_core::metric::Metric;
use finsler_core::volume::{ht_volume_fiber, volume_from_bd, FiberQuadrature};
use finsler_core::Result;

/// Interactive work trades accuracy for latency.
fn solver() -> GeodesicSolver {
    GeodesicSolver::with_step(1e-2)
}

fn parse_metric(text: &str) -> Result<Metric> {
    Ok(serde_json::from_str(text)?)
}

/// Polyline thinned to at most `max_points` vertices, endpoints kept.
fn polyline(g: &Geodesic, max_points: usize) -> Vec<[f64; 2]> {
    let n = g.positions.len();
    let stride = n.div_ceil(max_points.max(2)).max(1);
    let mut out: Vec<[f64; 2]> = g.positions.iter().step_by(stride).map(|p| [p.x, p.y]).collect();
    let last = g.end();
    if (n - 1) % stride != 0 {
        out.push([last.x, last.y]);
    }
    out
}

pub fn fan(metric: &str, x: f64, y: f64, count: usize) -> Result<String> {
    let m = parse_metric(metric)?;
    let s = solver();
    let start = Point::new(x, y);
    let mut rays = Vec::with_capacity(count);
    for k in 0..count {
        let theta = TAU * k as f64 / count as f64;
        let g = s.flow(&m, start, Covector::from_angle(theta), 1.0)?;
        rays.push(json!({ "angle": theta, "length": g.length, "points": polyline(&g, 200) }));
    }
    Ok(json!({ "rays": rays }).to_string())
}

pub fn connect(metric: &str, a: f64, b: f64) -> Result<String> {
    let m = parse_metric(metric)?;
    let s = solver();
    let forward = s.connect(&m, Point::polar(1.0, a), Point::polar(1.0, b), 1.0)?;
    let backward = s.connect(&m, Point::polar(1.0, b), Point::polar(1.0, a), 1.0)?;
    let leg = |g: &Geodesic| json!({ "length": g.length, "points": polyline(g, 400) });
    Ok(json!({ "forward": leg(&forward), "backward": leg(&backward) }).to_string())
}

pub fn volumes(metric: &str, boundary: usize) -> Result<String> {
    let m = parse_metric(metric)?;
    let fiber = ht_volume_fiber(&m, FiberQuadrature { radial: 16, angular: 48, fiber: 48 })?;
    let table = boundary_distance_table(&m, boundary, &solver())?;
    let bd = volume_from_bd(&table)?;
    let row = |r: &finsler_core::volume::VolumeResult| -> Value { json!({ "value": r.value, "error": r.error }) };
    Ok(json!({ "fiber": row(&fiber), "boundary_distance": row(&bd), "asymmetry": table.max_asymmetry() }).to_string())
}

fn js<T>(r: Result<T>) -> std::result::Result<T, JsError> {
    r.map_err(|e| JsError::new(&e.to_string()))
}

/// Geodesics leaving `(x, y)` in `count` evenly spaced covector directions.
#[wasm_bindgen(js_name = geodesicFan)]
pub fn geodesic_fan_js(metric: &str, x: f64, y: f64, count: usize) -> std::result::Result<String, JsError> {
    js(fan(metric, x, y, count))
}

/// Geodesics between the boundary points at angles `a` and `b`, both ways.
#[wasm_bindgen(js_name = connectBoundary)]
pub fn connect_js(metric: &str, a: f64, b: f64) -> std::result::Result<String, JsError> {
    js(connect(metric, a, b))
}

/// Holmes-Thompson area from fiber quadrature and from the boundary distance table.
#[wasm_bindgen(js_name = volumes)]
pub fn volumes_js(metric: &str, boundary: usize) -> std::result::Result<String, JsError> {
    js(volumes(metric, boundary))
}

#[cfg(test)]
mod tests {
    use super::*;

    const RANDERS: &str = r#"{"family":"randers","beta1":{"kind":"constant","value":0.4},"beta2":{"kind":"constant","value":0}}"#;

    #[test]
    fn euclidean_fan_rays_are_chords() {
        let out: Value = serde_json::from_str(&fan(r#"{"family":"euclidean"}"#, 0.0, 0.0, 6).unwrap()).unwrap();
        let rays = out["rays"].as_array().unwrap();
        assert_eq!(rays.len(), 6);
        for r in rays {
            assert!((r["length"].as_f64().unwrap() - 1.0).abs() < 1e-9);
            let pts = r["points"].as_array().unwrap();
            assert!(pts.len() <= 201);
            let end = pts.last().unwrap();
            assert!((end[0].as_f64().unwrap().hypot(end[1].as_f64().unwrap()) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn randers_connection_lengths_differ_by_twice_beta() {
        let out: Value = serde_json::from_str(&connect(RANDERS, 0.0, 2.0).unwrap()).unwrap();
        let (p, q) = (Point::polar(1.0, 0.0), Point::polar(1.0, 2.0));
        let d = q.x - p.x;
        let chord = (q.x - p.x).hypot(q.y - p.y);
        assert!((out["forward"]["length"].as_f64().unwrap() - (chord + 0.4 * d)).abs() < 1e-6);
        assert!((out["backward"]["length"].as_f64().unwrap() - (chord - 0.4 * d)).abs() < 1e-6);
    }

    #[test]
    fn euclidean_volumes_near_pi() {
        let out: Value = serde_json::from_str(&volumes(r#"{"family":"euclidean"}"#, 32).unwrap()).unwrap();
        for key in ["fiber", "boundary_distance"] {
            assert!((out[key]["value"].as_f64().unwrap() / std::f64::consts::PI - 1.0).abs() < 0.01, "{key}");
        }
    }

    #[test]
    fn bad_metric_is_an_error() {
        assert!(fan(r#"{"family":"spherical"}"#, 0.0, 0.0, 4).is_err());
        assert!(connect(r#"{"family":"euclidean","delta":-1}"#, 0.0, 1.0).is_err());
    }
}
