//! Points of the flat torus `T² = R²/Z²` and their planar lifts.

use serde::{Deserialize, Serialize};

use crate::linalg::Vec2;

/// Reduce into `[0, 1)`. Values that round up to `1.0` are mapped to `0.0`.
#[inline]
pub fn reduce(x: f64) -> f64 {
    let r = x - x.floor();
    if r >= 1.0 {
        0.0
    } else {
        r
    }
}

/// Signed representative of `x mod 1` in `[-1/2, 1/2)`.
#[inline]
pub fn wrap(x: f64) -> f64 {
    x - (x + 0.5).floor()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TorusPoint {
    x1: f64,
    x2: f64,
}

impl TorusPoint {
    pub fn new(x1: f64, x2: f64) -> Self {
        Self {
            x1: reduce(x1),
            x2: reduce(x2),
        }
    }

    pub fn x1(&self) -> f64 {
        self.x1
    }

    pub fn x2(&self) -> f64 {
        self.x2
    }

    pub fn coords(&self) -> Vec2 {
        [self.x1, self.x2]
    }

    pub fn lift(&self) -> LiftPoint {
        LiftPoint::new(self.x1, self.x2)
    }

    /// Shortest displacement `q - p` among integer translates.
    pub fn displacement_to(&self, q: &TorusPoint) -> Vec2 {
        [wrap(q.x1 - self.x1), wrap(q.x2 - self.x2)]
    }

    pub fn distance(&self, q: &TorusPoint) -> f64 {
        let d = self.displacement_to(q);
        d[0].hypot(d[1])
    }
}

impl From<Vec2> for TorusPoint {
    fn from(v: Vec2) -> Self {
        TorusPoint::new(v[0], v[1])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LiftPoint {
    pub u1: f64,
    pub u2: f64,
}

impl LiftPoint {
    pub fn new(u1: f64, u2: f64) -> Self {
        Self { u1, u2 }
    }

    pub fn coords(&self) -> Vec2 {
        [self.u1, self.u2]
    }

    pub fn project(&self) -> TorusPoint {
        TorusPoint::new(self.u1, self.u2)
    }

    pub fn translate(&self, v: Vec2) -> LiftPoint {
        LiftPoint::new(self.u1 + v[0], self.u2 + v[1])
    }

    pub fn shift(&self, c: [i64; 2]) -> LiftPoint {
        LiftPoint::new(self.u1 + c[0] as f64, self.u2 + c[1] as f64)
    }

    pub fn floor(&self) -> [i64; 2] {
        [self.u1.floor() as i64, self.u2.floor() as i64]
    }

    pub fn distance(&self, q: &LiftPoint) -> f64 {
        (self.u1 - q.u1).hypot(self.u2 - q.u2)
    }

    /// The lift of `q` closest to `self`.
    pub fn nearest_lift_of(&self, q: &TorusPoint) -> LiftPoint {
        let p = self.project();
        self.translate(p.displacement_to(q))
    }
}

impl From<Vec2> for LiftPoint {
    fn from(v: Vec2) -> Self {
        LiftPoint::new(v[0], v[1])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn reduction_edge_cases() {
        assert_eq!(reduce(1.0), 0.0);
        assert_eq!(reduce(-1e-20), 0.0);
        assert_eq!(reduce(-0.25), 0.75);
        assert_eq!(reduce(3.5), 0.5);
        let p = TorusPoint::new(-1e-18, 1.0 - f64::EPSILON / 4.0);
        assert!(p.x1() < 1.0 && p.x2() < 1.0);
    }

    #[test]
    fn distance_wraps() {
        let p = TorusPoint::new(0.01, 0.99);
        let q = TorusPoint::new(0.99, 0.01);
        assert!((p.distance(&q) - 0.02 * 2f64.sqrt()).abs() < 1e-14);
    }

    proptest! {
        #[test]
        fn reduced_coordinates_in_unit_interval(a in -1e6f64..1e6, b in -1e6f64..1e6) {
            let p = TorusPoint::new(a, b);
            prop_assert!((0.0..1.0).contains(&p.x1()));
            prop_assert!((0.0..1.0).contains(&p.x2()));
        }

        #[test]
        fn lift_projection_commutes_with_integer_shift(
            a in -50.0f64..50.0, b in -50.0f64..50.0, c1 in -5i64..5, c2 in -5i64..5
        ) {
            let u = LiftPoint::new(a, b);
            let p = u.project();
            let q = u.shift([c1, c2]).project();
            prop_assert!(p.distance(&q) < 1e-12);
        }

        #[test]
        fn distance_is_symmetric_and_bounded(a in 0.0f64..1.0, b in 0.0f64..1.0,
                                              c in 0.0f64..1.0, d in 0.0f64..1.0) {
            let p = TorusPoint::new(a, b);
            let q = TorusPoint::new(c, d);
            prop_assert!((p.distance(&q) - q.distance(&p)).abs() < 1e-15);
            prop_assert!(p.distance(&q) <= 0.5f64.sqrt() + 1e-15);
        }
    }
}
