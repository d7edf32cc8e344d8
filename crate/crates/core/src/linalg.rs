//! Small fixed-size linear algebra: real 2-vectors and 2×2 matrices, integer
//! 2×2 matrices with lattice utilities, and the hyperbolic eigen-splitting.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec2 = [f64; 2];

#[inline]
pub fn add(a: Vec2, b: Vec2) -> Vec2 {
    [a[0] + b[0], a[1] + b[1]]
}

#[inline]
pub fn sub(a: Vec2, b: Vec2) -> Vec2 {
    [a[0] - b[0], a[1] - b[1]]
}

#[inline]
pub fn scale(s: f64, a: Vec2) -> Vec2 {
    [s * a[0], s * a[1]]
}

#[inline]
pub fn dot(a: Vec2, b: Vec2) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

#[inline]
pub fn cross(a: Vec2, b: Vec2) -> f64 {
    a[0] * b[1] - a[1] * b[0]
}

#[inline]
pub fn norm(a: Vec2) -> f64 {
    a[0].hypot(a[1])
}

#[inline]
pub fn normalize(a: Vec2) -> Vec2 {
    let n = norm(a);
    [a[0] / n, a[1] / n]
}

/// Angle in `[0, π/2]` between the lines spanned by `a` and `b`.
pub fn line_angle(a: Vec2, b: Vec2) -> f64 {
    let c = cross(a, b).abs();
    let d = dot(a, b).abs();
    c.atan2(d)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Mat2(pub [[f64; 2]; 2]);

impl Mat2 {
    pub const IDENTITY: Mat2 = Mat2([[1.0, 0.0], [0.0, 1.0]]);

    pub fn from_columns(c0: Vec2, c1: Vec2) -> Self {
        Mat2([[c0[0], c1[0]], [c0[1], c1[1]]])
    }

    #[inline]
    pub fn mul_vec(&self, v: Vec2) -> Vec2 {
        let m = &self.0;
        [m[0][0] * v[0] + m[0][1] * v[1], m[1][0] * v[0] + m[1][1] * v[1]]
    }

    pub fn mul(&self, o: &Mat2) -> Mat2 {
        let (a, b) = (&self.0, &o.0);
        let mut r = [[0.0; 2]; 2];
        for (i, row) in r.iter_mut().enumerate() {
            for (j, x) in row.iter_mut().enumerate() {
                *x = a[i][0] * b[0][j] + a[i][1] * b[1][j];
            }
        }
        Mat2(r)
    }

    #[inline]
    pub fn det(&self) -> f64 {
        let m = &self.0;
        m[0][0] * m[1][1] - m[0][1] * m[1][0]
    }

    #[inline]
    pub fn inverse(&self) -> Mat2 {
        let m = &self.0;
        let d = self.det();
        Mat2([[m[1][1] / d, -m[0][1] / d], [-m[1][0] / d, m[0][0] / d]])
    }

    pub fn add(&self, o: &Mat2) -> Mat2 {
        let (a, b) = (&self.0, &o.0);
        Mat2([
            [a[0][0] + b[0][0], a[0][1] + b[0][1]],
            [a[1][0] + b[1][0], a[1][1] + b[1][1]],
        ])
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().flatten().fold(0.0_f64, |m, x| m.max(x.abs()))
    }

    /// Operator 2-norm.
    pub fn norm2(&self) -> f64 {
        let m = &self.0;
        let a = m[0][0] * m[0][0] + m[1][0] * m[1][0];
        let b = m[0][0] * m[0][1] + m[1][0] * m[1][1];
        let c = m[0][1] * m[0][1] + m[1][1] * m[1][1];
        let tr = a + c;
        let disc = ((a - c) * (a - c) + 4.0 * b * b).sqrt();
        (0.5 * (tr + disc)).sqrt()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntMat2(pub [[i64; 2]; 2]);

impl IntMat2 {
    pub const IDENTITY: IntMat2 = IntMat2([[1, 0], [0, 1]]);

    pub fn det(&self) -> i64 {
        let m = &self.0;
        m[0][0] * m[1][1] - m[0][1] * m[1][0]
    }

    pub fn trace(&self) -> i64 {
        self.0[0][0] + self.0[1][1]
    }

    pub fn mul(&self, o: &IntMat2) -> IntMat2 {
        let (a, b) = (&self.0, &o.0);
        let mut r = [[0i64; 2]; 2];
        for (i, row) in r.iter_mut().enumerate() {
            for (j, x) in row.iter_mut().enumerate() {
                *x = a[i][0] * b[0][j] + a[i][1] * b[1][j];
            }
        }
        IntMat2(r)
    }

    pub fn pow(&self, n: u32) -> IntMat2 {
        (0..n).fold(IntMat2::IDENTITY, |acc, _| acc.mul(self))
    }

    /// `selfⁿ`, or `None` on `i64` overflow.
    pub fn checked_pow(&self, n: u32) -> Option<IntMat2> {
        let mut acc = IntMat2::IDENTITY;
        for _ in 0..n {
            let (a, b) = (&acc.0, &self.0);
            let mut r = [[0i64; 2]; 2];
            for (i, row) in r.iter_mut().enumerate() {
                for (j, x) in row.iter_mut().enumerate() {
                    *x = a[i][0]
                        .checked_mul(b[0][j])?
                        .checked_add(a[i][1].checked_mul(b[1][j])?)?;
                }
            }
            acc = IntMat2(r);
        }
        Some(acc)
    }

    pub fn minus_identity(&self) -> IntMat2 {
        let m = &self.0;
        IntMat2([[m[0][0] - 1, m[0][1]], [m[1][0], m[1][1] - 1]])
    }

    pub fn mul_vec(&self, v: [i64; 2]) -> [i64; 2] {
        let m = &self.0;
        [m[0][0] * v[0] + m[0][1] * v[1], m[1][0] * v[0] + m[1][1] * v[1]]
    }

    pub fn to_f64(&self) -> Mat2 {
        let m = &self.0;
        Mat2([
            [m[0][0] as f64, m[0][1] as f64],
            [m[1][0] as f64, m[1][1] as f64],
        ])
    }

    /// Column Hermite form `[[g, 0], [b, d]]` with `g, d > 0` spanning the
    /// same lattice as the columns of `self`.
    pub fn column_hermite(&self) -> Option<(i64, i64, i64)> {
        let m = &self.0;
        let (g, s, t) = ext_gcd(m[0][0], m[0][1]);
        if g == 0 {
            return None;
        }
        let mut b = s * m[1][0] + t * m[1][1];
        let mut d = (m[0][0] * m[1][1] - m[0][1] * m[1][0]) / g;
        let mut g = g;
        if d == 0 {
            return None;
        }
        if d < 0 {
            d = -d;
        }
        if g < 0 {
            g = -g;
            b = -b;
        }
        Some((g, b.rem_euclid(d), d))
    }

    /// Representatives of `Z² / M Z²`, ordered lexicographically.
    pub fn coset_representatives(&self) -> Result<Vec<[i64; 2]>> {
        let (g, _, d) = self
            .column_hermite()
            .ok_or_else(|| Error::InvalidArgument("singular integer matrix".into()))?;
        let mut reps = Vec::with_capacity((g * d) as usize);
        for i in 0..g {
            for j in 0..d {
                reps.push([i, j]);
            }
        }
        Ok(reps)
    }
}

/// Extended Euclid: returns `(g, s, t)` with `s a + t b = g`, `g ≥ 0`.
pub fn ext_gcd(a: i64, b: i64) -> (i64, i64, i64) {
    let (mut r0, mut r1) = (a, b);
    let (mut s0, mut s1) = (1i64, 0i64);
    let (mut t0, mut t1) = (0i64, 1i64);
    while r1 != 0 {
        let q = r0.div_euclid(r1);
        (r0, r1) = (r1, r0 - q * r1);
        (s0, s1) = (s1, s0 - q * s1);
        (t0, t1) = (t1, t0 - q * t1);
    }
    if r0 < 0 {
        (-r0, -s0, -t0)
    } else {
        (r0, s0, t0)
    }
}

/// Real eigen-splitting `R² = Eᵘ ⊕ Eˢ` of a hyperbolic integer matrix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearSplitting {
    /// Signed unstable eigenvalue, `|lambda_u| > 1`.
    pub lambda_u: f64,
    /// Signed stable eigenvalue, `|lambda_s| < 1`.
    pub lambda_s: f64,
    pub e_u: Vec2,
    pub e_s: Vec2,
    /// Inverse of the basis matrix `[e_u e_s]`.
    coords: Mat2,
}

impl LinearSplitting {
    pub fn new(a: &IntMat2) -> Result<Self> {
        let m = a.to_f64();
        let tr = a.trace() as f64;
        let det = a.det() as f64;
        let disc = tr * tr - 4.0 * det;
        if disc <= 0.0 {
            return Err(Error::InvalidModel(
                "linear part has no real eigen-splitting".into(),
            ));
        }
        let sq = disc.sqrt();
        // Stable root computed without cancellation.
        let big = 0.5 * (tr + tr.signum() * sq);
        let big = if tr == 0.0 { 0.5 * sq } else { big };
        let small = det / big;
        let (lu, ls) = if big.abs() >= small.abs() {
            (big, small)
        } else {
            (small, big)
        };
        if !(lu.abs() > 1.0 && ls.abs() < 1.0) {
            return Err(Error::InvalidModel(format!(
                "linear part is not hyperbolic with one expanding and one contracting direction \
                 (eigenvalues {lu}, {ls})"
            )));
        }
        let e_u = eigenvector(&m, lu);
        let e_s = eigenvector(&m, ls);
        let coords = Mat2::from_columns(e_u, e_s).inverse();
        Ok(Self {
            lambda_u: lu,
            lambda_s: ls,
            e_u,
            e_s,
            coords,
        })
    }

    /// Coordinates `(α, β)` with `v = α e_u + β e_s`.
    #[inline]
    pub fn coords(&self, v: Vec2) -> Vec2 {
        self.coords.mul_vec(v)
    }

    #[inline]
    pub fn compose(&self, c: Vec2) -> Vec2 {
        add(scale(c[0], self.e_u), scale(c[1], self.e_s))
    }
}

/// Unit eigenvector for a real eigenvalue, oriented with a nonnegative first
/// nonzero coordinate.
fn eigenvector(m: &Mat2, lambda: f64) -> Vec2 {
    let a = m.0;
    let r0 = [a[0][0] - lambda, a[0][1]];
    let r1 = [a[1][0], a[1][1] - lambda];
    let r = if norm(r0) >= norm(r1) { r0 } else { r1 };
    let mut v = normalize([-r[1], r[0]]);
    if v[0] < 0.0 || (v[0] == 0.0 && v[1] < 0.0) {
        v = [-v[0], -v[1]];
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splitting_of_cat_like_matrix() {
        let a = IntMat2([[3, 1], [1, 1]]);
        let s = LinearSplitting::new(&a).unwrap();
        assert!((s.lambda_u - (2.0 + 2f64.sqrt())).abs() < 1e-14);
        assert!((s.lambda_s - (2.0 - 2f64.sqrt())).abs() < 1e-14);
        // Unstable eigenvector has slope lambda_u - 3.
        let slope = s.e_u[1] / s.e_u[0];
        assert!((slope - (s.lambda_u - 3.0)).abs() < 1e-14);
        let m = a.to_f64();
        let au = m.mul_vec(s.e_u);
        assert!(norm(sub(au, scale(s.lambda_u, s.e_u))) < 1e-14);
        let c = s.coords(s.compose([0.3, -1.7]));
        assert!((c[0] - 0.3).abs() < 1e-14 && (c[1] + 1.7).abs() < 1e-14);
    }

    #[test]
    fn rejects_non_hyperbolic() {
        assert!(LinearSplitting::new(&IntMat2([[1, 1], [0, 1]])).is_err());
        assert!(LinearSplitting::new(&IntMat2([[1, -2], [2, 1]])).is_err());
        assert!(LinearSplitting::new(&IntMat2([[2, 0], [0, 3]])).is_err());
    }

    #[test]
    fn coset_representatives_match_determinant() {
        let a = IntMat2([[3, 1], [1, 1]]);
        for n in 1..=6 {
            let m = a.pow(n).minus_identity();
            let reps = m.coset_representatives().unwrap();
            assert_eq!(reps.len() as i64, m.det().abs());
            // Pairwise inequivalent: adj(M)(c - c') not divisible by det.
            let det = m.det();
            let adj = IntMat2([[m.0[1][1], -m.0[0][1]], [-m.0[1][0], m.0[0][0]]]);
            for (i, c) in reps.iter().enumerate().take(40) {
                for c2 in reps.iter().skip(i + 1) {
                    let w = adj.mul_vec([c[0] - c2[0], c[1] - c2[1]]);
                    assert!(w[0] % det != 0 || w[1] % det != 0);
                }
            }
        }
    }

    #[test]
    fn ext_gcd_identity() {
        for &(a, b) in &[(12, 18), (-7, 3), (0, 5), (5, 0), (-4, -6)] {
            let (g, s, t) = ext_gcd(a, b);
            assert_eq!(s * a + t * b, g);
            assert!(g >= 0);
        }
    }

    #[test]
    fn norm2_matches_singular_value() {
        let m = Mat2([[3.0, 1.0], [1.0, 1.0]]);
        assert!((m.norm2() - (2.0 + 2f64.sqrt())).abs() < 1e-13);
    }
}
