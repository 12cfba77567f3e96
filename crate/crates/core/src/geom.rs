//! Planar points, tangent vectors and covectors.
//!
//! All three are plain Cartesian pairs. They are kept as distinct types so
//! that the duality pairing is the only way a covector meets a vector.

use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

macro_rules! pair_type {
    ($name:ident, $doc:literal) => {
        #[doc = $doc]
        #[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
        pub struct $name {
            pub x: f64,
            pub y: f64,
        }

        impl $name {
            pub const ZERO: Self = Self { x: 0.0, y: 0.0 };

            pub const fn new(x: f64, y: f64) -> Self {
                Self { x, y }
            }

            pub fn from_angle(theta: f64) -> Self {
                Self::new(theta.cos(), theta.sin())
            }

            /// Euclidean length of the coordinate pair.
            pub fn norm(self) -> f64 {
                self.x.hypot(self.y)
            }

            pub fn norm_sq(self) -> f64 {
                self.x * self.x + self.y * self.y
            }

            pub fn angle(self) -> f64 {
                self.y.atan2(self.x)
            }

            pub fn dot(self, o: Self) -> f64 {
                self.x * o.x + self.y * o.y
            }

            /// z-component of the planar cross product.
            pub fn cross(self, o: Self) -> f64 {
                self.x * o.y - self.y * o.x
            }

            /// Counter-clockwise rotation by a right angle.
            pub fn perp(self) -> Self {
                Self::new(-self.y, self.x)
            }

            pub fn normalized(self) -> Self {
                self / self.norm()
            }

            pub fn is_finite(self) -> bool {
                self.x.is_finite() && self.y.is_finite()
            }

            pub fn to_array(self) -> [f64; 2] {
                [self.x, self.y]
            }
        }

        impl From<[f64; 2]> for $name {
            fn from(a: [f64; 2]) -> Self {
                Self::new(a[0], a[1])
            }
        }

        impl Add for $name {
            type Output = Self;
            fn add(self, o: Self) -> Self {
                Self::new(self.x + o.x, self.y + o.y)
            }
        }

        impl AddAssign for $name {
            fn add_assign(&mut self, o: Self) {
                self.x += o.x;
                self.y += o.y;
            }
        }

        impl Sub for $name {
            type Output = Self;
            fn sub(self, o: Self) -> Self {
                Self::new(self.x - o.x, self.y - o.y)
            }
        }

        impl Neg for $name {
            type Output = Self;
            fn neg(self) -> Self {
                Self::new(-self.x, -self.y)
            }
        }

        impl Mul<f64> for $name {
            type Output = Self;
            fn mul(self, s: f64) -> Self {
                Self::new(self.x * s, self.y * s)
            }
        }

        impl Div<f64> for $name {
            type Output = Self;
            fn div(self, s: f64) -> Self {
                Self::new(self.x / s, self.y / s)
            }
        }
    };
}

pair_type!(Point, "A point of the plane.");
pair_type!(Vector, "A tangent vector; its base point is carried separately.");
pair_type!(Covector, "A cotangent vector; its base point is carried separately.");

impl Covector {
    /// The duality pairing `<alpha, v>`.
    pub fn pair(self, v: Vector) -> f64 {
        self.x * v.x + self.y * v.y
    }
}

impl Point {
    pub fn to_vector(self) -> Vector {
        Vector::new(self.x, self.y)
    }

    pub fn offset(self, v: Vector) -> Point {
        Point::new(self.x + v.x, self.y + v.y)
    }

    /// Displacement `self - from` as a tangent vector.
    pub fn displacement_from(self, from: Point) -> Vector {
        Vector::new(self.x - from.x, self.y - from.y)
    }

    /// Membership in the closed disc of the given radius (exact comparison).
    pub fn in_disc(self, radius: f64) -> bool {
        self.norm() <= radius
    }

    /// Point on the circle of radius `r` at polar angle `theta`.
    pub fn polar(r: f64, theta: f64) -> Point {
        Point::new(r * theta.cos(), r * theta.sin())
    }
}

/// Symmetric 2x2 matrix `[[a11, a12], [a12, a22]]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sym2 {
    pub a11: f64,
    pub a12: f64,
    pub a22: f64,
}

impl Sym2 {
    pub const IDENTITY: Sym2 = Sym2 { a11: 1.0, a12: 0.0, a22: 1.0 };
    pub const ZERO: Sym2 = Sym2 { a11: 0.0, a12: 0.0, a22: 0.0 };

    pub fn det(&self) -> f64 {
        self.a11 * self.a22 - self.a12 * self.a12
    }

    pub fn apply(&self, v: [f64; 2]) -> [f64; 2] {
        [self.a11 * v[0] + self.a12 * v[1], self.a12 * v[0] + self.a22 * v[1]]
    }

    pub fn quad(&self, u: [f64; 2], v: [f64; 2]) -> f64 {
        let av = self.apply(v);
        u[0] * av[0] + u[1] * av[1]
    }

    pub fn inverse(&self) -> Sym2 {
        let d = self.det();
        Sym2 { a11: self.a22 / d, a12: -self.a12 / d, a22: self.a11 / d }
    }

    /// `self * m * self` for symmetric `m`.
    pub fn sandwich(&self, m: &Sym2) -> Sym2 {
        // (S M S)_{ij}
        let sm11 = self.a11 * m.a11 + self.a12 * m.a12;
        let sm12 = self.a11 * m.a12 + self.a12 * m.a22;
        let sm21 = self.a12 * m.a11 + self.a22 * m.a12;
        let sm22 = self.a12 * m.a12 + self.a22 * m.a22;
        Sym2 {
            a11: sm11 * self.a11 + sm12 * self.a12,
            a12: sm11 * self.a12 + sm12 * self.a22,
            a22: sm21 * self.a12 + sm22 * self.a22,
        }
    }

    pub fn scale(&self, s: f64) -> Sym2 {
        Sym2 { a11: self.a11 * s, a12: self.a12 * s, a22: self.a22 * s }
    }

    /// Eigenvalues in ascending order.
    pub fn eigenvalues(&self) -> (f64, f64) {
        let mean = 0.5 * (self.a11 + self.a22);
        let half_diff = 0.5 * (self.a11 - self.a22);
        let r = half_diff.hypot(self.a12);
        (mean - r, mean + r)
    }
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    use std::f64::consts::{PI, TAU};
    let mut w = a.rem_euclid(TAU);
    if w > PI {
        w -= TAU;
    }
    w
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairing_is_bilinear() {
        let a = Covector::new(1.5, -2.0);
        let b = Covector::new(0.25, 4.0);
        let v = Vector::new(3.0, 1.0);
        let w = Vector::new(-1.0, 0.5);
        assert_eq!((a + b).pair(v), a.pair(v) + b.pair(v));
        assert!(((a * 2.0).pair(v + w) - 2.0 * (a.pair(v) + a.pair(w))).abs() < 1e-14);
    }

    #[test]
    fn disc_membership_is_exact() {
        assert!(Point::new(1.0, 0.0).in_disc(1.0));
        assert!(!Point::new(1.0 + 1e-15, 0.0).in_disc(1.0));
    }

    #[test]
    fn sym2_inverse_and_eigenvalues() {
        let m = Sym2 { a11: 2.0, a12: 0.5, a22: 1.0 };
        let inv = m.inverse();
        let v = m.apply(inv.apply([0.3, -0.7]));
        assert!((v[0] - 0.3).abs() < 1e-14 && (v[1] + 0.7).abs() < 1e-14);
        let (lo, hi) = m.eigenvalues();
        assert!((lo + hi - 3.0).abs() < 1e-14);
        assert!((lo * hi - m.det()).abs() < 1e-14);
    }

    #[test]
    fn wrap_angle_range() {
        use std::f64::consts::PI;
        assert!((wrap_angle(3.0 * PI) - PI).abs() < 1e-12);
        assert!((wrap_angle(-PI / 2.0) + PI / 2.0).abs() < 1e-15);
        assert!((wrap_angle(2.0 * PI + 0.1) - 0.1).abs() < 1e-12);
    }
}
