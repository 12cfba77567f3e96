//! Closed-form scalar fields on the plane.
//!
//! Metric coefficients, conformal weights, perturbation bumps and ray-transform
//! integrands are all drawn from this fixed catalog. Each entry evaluates its
//! value together with its exact gradient.

use serde::{Deserialize, Serialize};

use crate::geom::Point;

/// One monomial `coeff * x^px * y^py`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Monomial {
    pub coeff: f64,
    #[serde(default)]
    pub px: u32,
    #[serde(default)]
    pub py: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScalarField {
    Constant {
        value: f64,
    },
    /// `c0 + cx * x + cy * y`
    Affine {
        c0: f64,
        cx: f64,
        cy: f64,
    },
    /// `amplitude * exp(-|x - center|^2 / width^2)`
    Gaussian {
        amplitude: f64,
        center: [f64; 2],
        width: f64,
    },
    /// Log of the conformal factor that makes the unit disc a spherical cap
    /// of the given angular radius (stereographic chart of the unit sphere).
    CapLogWeight {
        cap_angle: f64,
    },
    /// Polynomial, optionally multiplied by the cutoff `1 - x^2 - y^2`.
    Polynomial {
        terms: Vec<Monomial>,
        #[serde(default)]
        cutoff: bool,
    },
    Scaled {
        factor: f64,
        field: Box<ScalarField>,
    },
    Sum {
        terms: Vec<ScalarField>,
    },
}

/// Value and gradient at a point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Jet {
    pub value: f64,
    pub grad: [f64; 2],
}

impl Jet {
    pub const ZERO: Jet = Jet { value: 0.0, grad: [0.0, 0.0] };

    pub fn constant(value: f64) -> Jet {
        Jet { value, grad: [0.0, 0.0] }
    }
}

fn powi(x: f64, n: u32) -> f64 {
    x.powi(n as i32)
}

impl ScalarField {
    pub fn constant(value: f64) -> Self {
        ScalarField::Constant { value }
    }

    pub fn zero() -> Self {
        ScalarField::Constant { value: 0.0 }
    }

    pub fn gaussian(amplitude: f64, center: [f64; 2], width: f64) -> Self {
        ScalarField::Gaussian { amplitude, center, width }
    }

    /// `1 - x^2 - y^2`
    pub fn paraboloid() -> Self {
        ScalarField::Polynomial { terms: vec![Monomial { coeff: 1.0, px: 0, py: 0 }], cutoff: true }
    }

    pub fn scaled(self, factor: f64) -> Self {
        ScalarField::Scaled { factor, field: Box::new(self) }
    }

    pub fn value(&self, p: Point) -> f64 {
        self.jet(p).value
    }

    pub fn jet(&self, p: Point) -> Jet {
        match self {
            ScalarField::Constant { value } => Jet::constant(*value),
            ScalarField::Affine { c0, cx, cy } => Jet { value: c0 + cx * p.x + cy * p.y, grad: [*cx, *cy] },
            ScalarField::Gaussian { amplitude, center, width } => {
                let dx = p.x - center[0];
                let dy = p.y - center[1];
                let w2 = width * width;
                let v = amplitude * (-(dx * dx + dy * dy) / w2).exp();
                Jet { value: v, grad: [-2.0 * dx / w2 * v, -2.0 * dy / w2 * v] }
            }
            ScalarField::CapLogWeight { cap_angle } => {
                let s = (0.5 * cap_angle).tan();
                let s2 = s * s;
                let q = 1.0 + s2 * p.norm_sq();
                Jet { value: (2.0 * s / q).ln(), grad: [-2.0 * s2 * p.x / q, -2.0 * s2 * p.y / q] }
            }
            ScalarField::Polynomial { terms, cutoff } => {
                let mut v = 0.0;
                let mut gx = 0.0;
                let mut gy = 0.0;
                for t in terms {
                    let xp = powi(p.x, t.px);
                    let yp = powi(p.y, t.py);
                    v += t.coeff * xp * yp;
                    if t.px > 0 {
                        gx += t.coeff * t.px as f64 * powi(p.x, t.px - 1) * yp;
                    }
                    if t.py > 0 {
                        gy += t.coeff * t.py as f64 * xp * powi(p.y, t.py - 1);
                    }
                }
                if *cutoff {
                    let c = 1.0 - p.norm_sq();
                    Jet { value: v * c, grad: [gx * c - 2.0 * p.x * v, gy * c - 2.0 * p.y * v] }
                } else {
                    Jet { value: v, grad: [gx, gy] }
                }
            }
            ScalarField::Scaled { factor, field } => {
                let j = field.jet(p);
                Jet { value: factor * j.value, grad: [factor * j.grad[0], factor * j.grad[1]] }
            }
            ScalarField::Sum { terms } => terms.iter().fold(Jet::ZERO, |acc, t| {
                let j = t.jet(p);
                Jet { value: acc.value + j.value, grad: [acc.grad[0] + j.grad[0], acc.grad[1] + j.grad[1]] }
            }),
        }
    }

    pub fn is_finite_params(&self) -> bool {
        match self {
            ScalarField::Constant { value } => value.is_finite(),
            ScalarField::Affine { c0, cx, cy } => c0.is_finite() && cx.is_finite() && cy.is_finite(),
            ScalarField::Gaussian { amplitude, center, width } => {
                amplitude.is_finite() && center.iter().all(|c| c.is_finite()) && width.is_finite() && *width > 0.0
            }
            ScalarField::CapLogWeight { cap_angle } => {
                cap_angle.is_finite() && *cap_angle > 0.0 && *cap_angle < std::f64::consts::PI
            }
            ScalarField::Polynomial { terms, .. } => terms.iter().all(|t| t.coeff.is_finite()),
            ScalarField::Scaled { factor, field } => factor.is_finite() && field.is_finite_params(),
            ScalarField::Sum { terms } => terms.iter().all(|t| t.is_finite_params()),
        }
    }

    /// Largest |value| over a polar sample of the disc of the given radius.
    pub fn max_abs_on_disc(&self, radius: f64, rings: usize, angles: usize) -> f64 {
        let mut m = self.value(Point::ZERO).abs();
        for i in 1..=rings {
            let r = radius * i as f64 / rings as f64;
            for j in 0..angles {
                let th = std::f64::consts::TAU * j as f64 / angles as f64;
                m = m.max(self.value(Point::polar(r, th)).abs());
            }
        }
        m
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_grad(f: &ScalarField, p: Point) -> [f64; 2] {
        let h = 1e-6;
        [
            (f.value(Point::new(p.x + h, p.y)) - f.value(Point::new(p.x - h, p.y))) / (2.0 * h),
            (f.value(Point::new(p.x, p.y + h)) - f.value(Point::new(p.x, p.y - h))) / (2.0 * h),
        ]
    }

    #[test]
    fn gradients_match_finite_differences() {
        let fields = vec![
            ScalarField::Affine { c0: 1.0, cx: -0.5, cy: 2.0 },
            ScalarField::gaussian(0.3, [0.2, -0.1], 0.4),
            ScalarField::CapLogWeight { cap_angle: 1.0 },
            ScalarField::Polynomial {
                terms: vec![Monomial { coeff: 2.0, px: 2, py: 1 }, Monomial { coeff: -1.0, px: 0, py: 3 }],
                cutoff: true,
            },
            ScalarField::Sum { terms: vec![ScalarField::paraboloid(), ScalarField::gaussian(1.0, [0.0, 0.5], 0.3).scaled(-2.0)] },
        ];
        for f in &fields {
            for p in [Point::new(0.3, -0.2), Point::new(-0.7, 0.5), Point::new(0.0, 0.95)] {
                let g = f.jet(p).grad;
                let fd = fd_grad(f, p);
                assert!((g[0] - fd[0]).abs() < 1e-7 && (g[1] - fd[1]).abs() < 1e-7, "{f:?} at {p:?}");
            }
        }
    }

    #[test]
    fn cap_weight_on_unit_circle_is_sine_of_cap_angle() {
        let a: f64 = std::f64::consts::FRAC_PI_3;
        let f = ScalarField::CapLogWeight { cap_angle: a };
        assert!((f.value(Point::new(0.0, 1.0)).exp() - a.sin()).abs() < 1e-14);
    }

    #[test]
    fn config_roundtrip() {
        let f = ScalarField::Sum { terms: vec![ScalarField::paraboloid(), ScalarField::gaussian(1.0, [0.1, 0.2], 0.3)] };
        let s = serde_json::to_string(&f).unwrap();
        let back: ScalarField = serde_json::from_str(&s).unwrap();
        assert_eq!(f, back);
    }
}
