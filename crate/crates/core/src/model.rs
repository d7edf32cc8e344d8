//! Degree-k toral endomorphisms: an integer linear part plus either a
//! trigonometric perturbation or a smooth conjugation of the linear map.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bundles::{certify_cones, ConeCertificate, ConeParams};
use crate::error::{Error, Result};
use crate::linalg::{self, IntMat2, LinearSplitting, Mat2, Vec2};
use crate::torus::{LiftPoint, TorusPoint};

const NEWTON_CAP: usize = 50;
const NEWTON_TOL: f64 = 1e-12;

/// One term `amplitude · sin(2π m·u + phase)` of a vector-valued
/// trigonometric polynomial.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrigTerm {
    pub frequency: [i64; 2],
    pub amplitude: [f64; 2],
    #[serde(default)]
    pub phase: f64,
}

impl TrigTerm {
    pub fn new(frequency: [i64; 2], amplitude: [f64; 2], phase: f64) -> Self {
        Self {
            frequency,
            amplitude,
            phase,
        }
    }
}

/// A Z²-periodic displacement `w: R² → R²` given by a finite sum of
/// [`TrigTerm`]s.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrigDisplacement {
    pub terms: Vec<TrigTerm>,
}

impl TrigDisplacement {
    pub fn new(terms: Vec<TrigTerm>) -> Self {
        Self { terms }
    }

    pub fn eval(&self, u: Vec2) -> Vec2 {
        let mut w = [0.0; 2];
        for t in &self.terms {
            let th = TAU * (t.frequency[0] as f64 * u[0] + t.frequency[1] as f64 * u[1]) + t.phase;
            let s = th.sin();
            w[0] += t.amplitude[0] * s;
            w[1] += t.amplitude[1] * s;
        }
        w
    }

    pub fn jacobian(&self, u: Vec2) -> Mat2 {
        self.eval_with_jacobian(u).1
    }

    pub fn eval_with_jacobian(&self, u: Vec2) -> (Vec2, Mat2) {
        let mut w = [0.0; 2];
        let mut j = [[0.0; 2]; 2];
        for t in &self.terms {
            let m = [t.frequency[0] as f64, t.frequency[1] as f64];
            let th = TAU * (m[0] * u[0] + m[1] * u[1]) + t.phase;
            let (s, c) = th.sin_cos();
            for i in 0..2 {
                w[i] += t.amplitude[i] * s;
                for (k, mk) in m.iter().enumerate() {
                    j[i][k] += t.amplitude[i] * TAU * c * mk;
                }
            }
        }
        (w, Mat2(j))
    }

    /// Upper bound for `sup ‖Dw‖` (operator norm), summed termwise.
    pub fn c1_bound(&self) -> f64 {
        self.terms
            .iter()
            .map(|t| {
                let m = [t.frequency[0] as f64, t.frequency[1] as f64];
                TAU * linalg::norm(t.amplitude) * linalg::norm(m)
            })
            .sum()
    }

    /// Sup-norm bound for `|w|`.
    pub fn c0_bound(&self) -> f64 {
        self.terms.iter().map(|t| linalg::norm(t.amplitude)).sum()
    }

    pub fn max_frequency(&self) -> i64 {
        self.terms
            .iter()
            .map(|t| t.frequency[0].abs().max(t.frequency[1].abs()))
            .max()
            .unwrap_or(0)
    }

    /// `h(u) = u + w(u)`.
    pub fn diffeo_apply(&self, u: Vec2) -> Vec2 {
        linalg::add(u, self.eval(u))
    }

    /// `Dh(u) = I + Dw(u)`.
    pub fn diffeo_jacobian(&self, u: Vec2) -> Mat2 {
        Mat2::IDENTITY.add(&self.jacobian(u))
    }

    /// Inverse of `u ↦ u + w(u)`, valid when `sup ‖Dw‖ < 1`. Newton seeded by
    /// one fixed-point step; always returns the best iterate.
    pub fn diffeo_inverse(&self, u: Vec2) -> Vec2 {
        let mut v = linalg::sub(u, self.eval(u));
        let mut last = f64::INFINITY;
        for _ in 0..NEWTON_CAP {
            let (w, dw) = self.eval_with_jacobian(v);
            let r = linalg::sub(linalg::add(v, w), u);
            let rn = r[0].abs().max(r[1].abs());
            if rn == 0.0 || rn >= last {
                break;
            }
            last = rn;
            let step = Mat2::IDENTITY.add(&dw).inverse().mul_vec(r);
            v = linalg::sub(v, step);
            if rn < 1e-15 {
                break;
            }
        }
        v
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ModelKind {
    Linear,
    /// `f̄(u) = A u + w(u)`.
    TrigPerturbation(TrigDisplacement),
    /// `f = h0 ∘ A ∘ h0⁻¹` with `h0 = id + warp`.
    Conjugated(TrigDisplacement),
}

impl ModelKind {
    pub fn name(&self) -> &'static str {
        match self {
            ModelKind::Linear => "linear",
            ModelKind::TrigPerturbation(_) => "trig",
            ModelKind::Conjugated(_) => "conjugated",
        }
    }
}

/// Result of the construction-time checks.
#[derive(Clone, Debug, Serialize)]
pub struct ValidationReport {
    pub grid: usize,
    pub min_abs_det: f64,
    pub max_abs_det: f64,
    pub homotopy_defect: f64,
    pub certificate: Option<ConeCertificate>,
}

#[derive(Clone, Debug)]
pub struct ToralEndomorphism {
    matrix: IntMat2,
    a: Mat2,
    a_inv: Mat2,
    kind: ModelKind,
    splitting: LinearSplitting,
    cosets: Vec<[i64; 2]>,
}

impl ToralEndomorphism {
    /// Builds the model and runs all construction checks (local
    /// diffeomorphism on a 512² grid, homotopy class, cone certificate for
    /// trigonometric perturbations).
    pub fn new(matrix: IntMat2, kind: ModelKind) -> Result<Self> {
        let f = Self::new_unchecked(matrix, kind)?;
        f.validate()?;
        Ok(f)
    }

    /// Builds the model checking only the linear part and, for conjugated
    /// models, the warp bound. Intended for exploratory runs on models that
    /// may fail certification.
    pub fn new_unchecked(matrix: IntMat2, kind: ModelKind) -> Result<Self> {
        let det = matrix.det();
        if det.abs() < 2 {
            return Err(Error::InvalidModel(format!(
                "|det A| = {} but a degree k >= 2 is required",
                det.abs()
            )));
        }
        let splitting = LinearSplitting::new(&matrix)?;
        if let ModelKind::Conjugated(w) = &kind {
            let b = w.c1_bound();
            if b >= 0.3 {
                return Err(Error::InvalidModel(format!(
                    "warp derivative bound {b:.4} must be below 0.3"
                )));
            }
        }
        let cosets = matrix.coset_representatives()?;
        let a = matrix.to_f64();
        Ok(Self {
            matrix,
            a,
            a_inv: a.inverse(),
            kind,
            splitting,
            cosets,
        })
    }

    pub fn linear(matrix: IntMat2) -> Result<Self> {
        Self::new(matrix, ModelKind::Linear)
    }

    pub fn validate(&self) -> Result<ValidationReport> {
        self.validate_with(512, &ConeParams::default())
    }

    pub fn validate_with(&self, grid: usize, cones: &ConeParams) -> Result<ValidationReport> {
        let (mut lo, mut hi) = (f64::INFINITY, 0.0_f64);
        let sign = self.a.det().signum();
        if !self.is_linear() {
            for i in 0..grid {
                for j in 0..grid {
                    let u = [i as f64 / grid as f64, j as f64 / grid as f64];
                    let d = self.lift_apply_jac(u.into()).1.det();
                    if !(d * sign > 0.0) {
                        return Err(Error::InvalidModel(format!(
                            "Jacobian determinant {d:.3e} changes sign or vanishes at grid node ({i}, {j})"
                        )));
                    }
                    lo = lo.min(d.abs());
                    hi = hi.max(d.abs());
                }
            }
        } else {
            lo = self.a.det().abs();
            hi = lo;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
        let mut defect = 0.0_f64;
        for _ in 0..64 {
            let u = LiftPoint::new(rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0));
            let c = [rng.gen_range(-2..=2), rng.gen_range(-2..=2)];
            let lhs = linalg::sub(
                self.lift_apply(u.shift(c)).coords(),
                self.lift_apply(u).coords(),
            );
            let ac = self.matrix.mul_vec(c);
            defect = defect
                .max((lhs[0] - ac[0] as f64).abs())
                .max((lhs[1] - ac[1] as f64).abs());
        }
        if defect > 1e-10 {
            return Err(Error::InvalidModel(format!(
                "lift is not equivariant under the integer lattice (defect {defect:.3e})"
            )));
        }
        let certificate = match &self.kind {
            ModelKind::TrigPerturbation(_) => Some(certify_cones(self, cones)?),
            _ => None,
        };
        Ok(ValidationReport {
            grid,
            min_abs_det: lo,
            max_abs_det: hi,
            homotopy_defect: defect,
            certificate,
        })
    }

    pub fn matrix(&self) -> &IntMat2 {
        &self.matrix
    }

    pub fn linear_part(&self) -> &Mat2 {
        &self.a
    }

    pub fn linear_inverse(&self) -> &Mat2 {
        &self.a_inv
    }

    pub fn kind(&self) -> &ModelKind {
        &self.kind
    }

    pub fn is_linear(&self) -> bool {
        matches!(self.kind, ModelKind::Linear)
    }

    pub fn splitting(&self) -> &LinearSplitting {
        &self.splitting
    }

    /// Degree `k = |det A|`.
    pub fn degree(&self) -> usize {
        self.matrix.det().unsigned_abs() as usize
    }

    /// Representatives of `Z²/AZ²`; their order defines coset indices.
    pub fn cosets(&self) -> &[[i64; 2]] {
        &self.cosets
    }

    /// Conjugating warp `h0 = id + w` of a conjugated model.
    pub fn warp(&self) -> Option<&TrigDisplacement> {
        match &self.kind {
            ModelKind::Conjugated(w) => Some(w),
            _ => None,
        }
    }

    pub fn lift_apply(&self, u: LiftPoint) -> LiftPoint {
        let v = u.coords();
        match &self.kind {
            ModelKind::Linear => self.a.mul_vec(v).into(),
            ModelKind::TrigPerturbation(w) => linalg::add(self.a.mul_vec(v), w.eval(v)).into(),
            ModelKind::Conjugated(w) => {
                let z = w.diffeo_inverse(v);
                w.diffeo_apply(self.a.mul_vec(z)).into()
            }
        }
    }

    pub fn lift_apply_jac(&self, u: LiftPoint) -> (LiftPoint, Mat2) {
        let v = u.coords();
        match &self.kind {
            ModelKind::Linear => (self.a.mul_vec(v).into(), self.a),
            ModelKind::TrigPerturbation(w) => {
                let (wv, dw) = w.eval_with_jacobian(v);
                (
                    linalg::add(self.a.mul_vec(v), wv).into(),
                    self.a.add(&dw),
                )
            }
            ModelKind::Conjugated(w) => {
                let z = w.diffeo_inverse(v);
                let az = self.a.mul_vec(z);
                let (waz, dwaz) = w.eval_with_jacobian(az);
                let outer = Mat2::IDENTITY.add(&dwaz);
                let inner = w.diffeo_jacobian(z).inverse();
                (
                    linalg::add(az, waz).into(),
                    outer.mul(&self.a).mul(&inner),
                )
            }
        }
    }

    /// `f̄(u) − A u`, a Z²-periodic function.
    pub fn nonlinear_part(&self, u: LiftPoint) -> Vec2 {
        linalg::sub(self.lift_apply(u).coords(), self.a.mul_vec(u.coords()))
    }

    pub fn apply(&self, p: TorusPoint) -> TorusPoint {
        self.lift_apply(p.lift()).project()
    }

    pub fn jacobian(&self, p: TorusPoint) -> Mat2 {
        match &self.kind {
            ModelKind::Linear => self.a,
            _ => self.lift_apply_jac(p.lift()).1,
        }
    }

    /// `log |det Df(p)|`.
    pub fn log_jacobian(&self, p: TorusPoint) -> f64 {
        self.jacobian(p).det().abs().ln()
    }

    /// Newton solve of `f̄(u) = q` started at `seed`.
    pub fn invert_lift(&self, q: LiftPoint, seed: LiftPoint) -> Result<LiftPoint> {
        let target = q.coords();
        if self.is_linear() {
            return Ok(self.a_inv.mul_vec(target).into());
        }
        if target[0].abs().max(target[1].abs()) > 4.0 {
            // f̄(u + m) = f̄(u) + A m: solve near the origin so the residual
            // tolerance is not below the rounding of large coordinates.
            let n = q.floor();
            for &c in &self.cosets {
                let v = [n[0] - c[0], n[1] - c[1]];
                let m = self.a_inv.mul_vec([v[0] as f64, v[1] as f64]);
                let r = [m[0].round(), m[1].round()];
                if (m[0] - r[0]).abs() < 1e-6 && (m[1] - r[1]).abs() < 1e-6 {
                    let shift = [r[0] as i64, r[1] as i64];
                    let near = LiftPoint::new(q.u1 - v[0] as f64, q.u2 - v[1] as f64);
                    let seed = seed.shift([-shift[0], -shift[1]]);
                    return Ok(self.invert_lift(near, seed)?.shift(shift));
                }
            }
        }
        let mut u = seed.coords();
        let (fu, mut jac) = self.lift_apply_jac(u.into());
        let mut r = linalg::sub(fu.coords(), target);
        let mut rn = r[0].abs().max(r[1].abs());
        for _ in 0..NEWTON_CAP {
            if rn < NEWTON_TOL * 1e-2 {
                return Ok(u.into());
            }
            let step = jac.inverse().mul_vec(r);
            let mut t = 1.0;
            let mut accepted = false;
            for _ in 0..20 {
                let cand = linalg::sub(u, linalg::scale(t, step));
                let (fc, jc) = self.lift_apply_jac(cand.into());
                let rc = linalg::sub(fc.coords(), target);
                let rcn = rc[0].abs().max(rc[1].abs());
                if rcn < rn || rcn < NEWTON_TOL * 1e-2 {
                    u = cand;
                    r = rc;
                    jac = jc;
                    rn = rcn;
                    accepted = true;
                    break;
                }
                t *= 0.5;
            }
            if !accepted {
                break;
            }
        }
        if rn < NEWTON_TOL {
            Ok(u.into())
        } else {
            Err(Error::NewtonDivergence(format!(
                "lift inversion at ({:.6}, {:.6}) stalled with residual {rn:.3e}",
                q.u1, q.u2
            )))
        }
    }

    /// Lifts `f̄⁻¹(p̄ + c_i)` for every coset representative `c_i`, in coset
    /// order. These are generally not reduced.
    pub fn preimage_lifts(&self, p: TorusPoint) -> Result<Vec<LiftPoint>> {
        let base = p.lift();
        let out = self
            .cosets
            .iter()
            .map(|&c| self.preimage_lift(base, c))
            .collect::<Result<Vec<_>>>()?;
        for i in 0..out.len() {
            for j in i + 1..out.len() {
                if out[i].project().distance(&out[j].project()) <= 1e-8 {
                    return Err(Error::NewtonDivergence(format!(
                        "preimage branches {i} and {j} collapsed"
                    )));
                }
            }
        }
        Ok(out)
    }

    /// `f̄⁻¹(q + c)` seeded at `A⁻¹(q + c)`.
    pub fn preimage_lift(&self, q: LiftPoint, c: [i64; 2]) -> Result<LiftPoint> {
        let target = q.shift(c);
        let seed = self.a_inv.mul_vec(target.coords());
        self.invert_lift(target, seed.into())
    }

    pub fn preimages(&self, p: TorusPoint) -> Result<Vec<TorusPoint>> {
        Ok(self
            .preimage_lifts(p)?
            .into_iter()
            .map(|u| u.project())
            .collect())
    }

    /// Preimage selected by coset index.
    pub fn preimage(&self, p: TorusPoint, index: usize) -> Result<TorusPoint> {
        let c = *self.cosets.get(index).ok_or_else(|| {
            Error::InvalidArgument(format!("coset index {index} out of range"))
        })?;
        Ok(self.preimage_lift(p.lift(), c)?.project())
    }

    /// Forward orbit `p, f(p), …, fⁿ(p)`.
    pub fn orbit(&self, p: TorusPoint, n: usize) -> Vec<TorusPoint> {
        let mut out = Vec::with_capacity(n + 1);
        let mut x = p;
        out.push(x);
        for _ in 0..n {
            x = self.apply(x);
            out.push(x);
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KindTag {
    Linear,
    Trig,
    Conjugated,
}

/// On-disk model description (TOML).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub kind: KindTag,
    pub matrix: [[i64; 2]; 2],
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub perturbation: Vec<TrigTerm>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warp: Vec<TrigTerm>,
}

impl ModelFile {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("model files always serialize")
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text).map_err(|e| match e {
            Error::Parse(m) => Error::Parse(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn from_model(f: &ToralEndomorphism) -> Self {
        let (kind, perturbation, warp) = match f.kind() {
            ModelKind::Linear => (KindTag::Linear, vec![], vec![]),
            ModelKind::TrigPerturbation(w) => (KindTag::Trig, w.terms.clone(), vec![]),
            ModelKind::Conjugated(w) => (KindTag::Conjugated, vec![], w.terms.clone()),
        };
        Self {
            name: None,
            kind,
            matrix: f.matrix().0,
            perturbation,
            warp,
        }
    }

    fn kind(&self) -> Result<ModelKind> {
        match self.kind {
            KindTag::Linear => {
                if !self.perturbation.is_empty() || !self.warp.is_empty() {
                    return Err(Error::Parse(
                        "linear models take no perturbation or warp terms".into(),
                    ));
                }
                Ok(ModelKind::Linear)
            }
            KindTag::Trig => {
                if !self.warp.is_empty() {
                    return Err(Error::Parse("trig models take no warp terms".into()));
                }
                Ok(ModelKind::TrigPerturbation(TrigDisplacement::new(
                    self.perturbation.clone(),
                )))
            }
            KindTag::Conjugated => {
                if !self.perturbation.is_empty() {
                    return Err(Error::Parse(
                        "conjugated models take no perturbation terms".into(),
                    ));
                }
                Ok(ModelKind::Conjugated(TrigDisplacement::new(self.warp.clone())))
            }
        }
    }

    pub fn build(&self) -> Result<ToralEndomorphism> {
        ToralEndomorphism::new(IntMat2(self.matrix), self.kind()?)
    }

    pub fn build_unchecked(&self) -> Result<ToralEndomorphism> {
        ToralEndomorphism::new_unchecked(IntMat2(self.matrix), self.kind()?)
    }
}

/// The reference models used throughout the tests and the bundled corpus.
pub mod reference {
    use super::*;

    pub const CAT: IntMat2 = IntMat2([[3, 1], [1, 1]]);

    pub fn linear() -> ToralEndomorphism {
        ToralEndomorphism::linear(CAT).expect("reference matrix is valid")
    }

    /// `f̄(u) = A u + ε (sin 2πu₂, sin 2πu₁)`.
    pub fn trig_terms(eps: f64) -> TrigDisplacement {
        TrigDisplacement::new(vec![
            TrigTerm::new([0, 1], [eps, 0.0], 0.0),
            TrigTerm::new([1, 0], [0.0, eps], 0.0),
        ])
    }

    pub fn trig(eps: f64) -> Result<ToralEndomorphism> {
        ToralEndomorphism::new(CAT, ModelKind::TrigPerturbation(trig_terms(eps)))
    }

    pub fn trig_unchecked(eps: f64) -> ToralEndomorphism {
        ToralEndomorphism::new_unchecked(CAT, ModelKind::TrigPerturbation(trig_terms(eps)))
            .expect("reference matrix is valid")
    }

    /// Warp `h0(u) = u + (0.012, 0.016) sin 2πu₁`, displacement size 0.02.
    pub fn warp() -> TrigDisplacement {
        TrigDisplacement::new(vec![TrigTerm::new([1, 0], [0.012, 0.016], 0.0)])
    }

    pub fn conjugated() -> ToralEndomorphism {
        ToralEndomorphism::new(CAT, ModelKind::Conjugated(warp())).expect("reference warp is valid")
    }
}

#[cfg(test)]
mod tests {
    use super::reference::{conjugated, linear, trig, warp, CAT};
    use super::*;
    use crate::testutil;
    use proptest::prelude::*;
    use rand::Rng;

    fn fd_jacobian(f: &ToralEndomorphism, u: LiftPoint) -> Mat2 {
        let h = 1e-6;
        let mut j = [[0.0; 2]; 2];
        for k in 0..2 {
            let mut e = [0.0; 2];
            e[k] = h;
            let p = f.lift_apply(u.translate(e)).coords();
            let m = f.lift_apply(u.translate([-e[0], -e[1]])).coords();
            for i in 0..2 {
                j[i][k] = (p[i] - m[i]) / (2.0 * h);
            }
        }
        Mat2(j)
    }

    #[test]
    fn apply_examples() {
        let f = linear();
        assert_eq!(f.apply(TorusPoint::new(0.0, 0.0)), TorusPoint::new(0.0, 0.0));
        let p = f.apply(TorusPoint::new(0.5, 0.5));
        assert!(p.distance(&TorusPoint::new(0.0, 0.0)) < 1e-15);
    }

    #[test]
    fn conjugated_apply_matches_composition() {
        let f = conjugated();
        let w = warp();
        let a = CAT.to_f64();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let q = [rng.gen::<f64>(), rng.gen::<f64>()];
            let p = TorusPoint::from(w.diffeo_apply(q));
            let expect = TorusPoint::from(w.diffeo_apply(a.mul_vec(q)));
            assert!(f.apply(p).distance(&expect) < 1e-13);
        }
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let models = [linear(), trig(0.05).unwrap(), conjugated(), trig(0.0).unwrap()];
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for f in &models {
            for _ in 0..100 {
                let u = LiftPoint::new(rng.gen(), rng.gen());
                let j = f.lift_apply_jac(u).1;
                let fd = fd_jacobian(f, u);
                let err = Mat2([
                    [j.0[0][0] - fd.0[0][0], j.0[0][1] - fd.0[0][1]],
                    [j.0[1][0] - fd.0[1][0], j.0[1][1] - fd.0[1][1]],
                ])
                .max_abs();
                assert!(err / j.max_abs() < 1e-6, "{} rel err {err}", f.kind().name());
            }
        }
    }

    #[test]
    fn linear_jacobian_is_constant() {
        let f = linear();
        let j = f.jacobian(TorusPoint::new(0.3, 0.8));
        assert_eq!(j, CAT.to_f64());
        assert_eq!(j.det(), 2.0);
        let g = trig(0.0).unwrap();
        assert_eq!(g.jacobian(TorusPoint::new(0.3, 0.8)), CAT.to_f64());
    }

    #[test]
    fn preimages_of_origin() {
        let f = linear();
        let pre = f.preimages(TorusPoint::new(0.0, 0.0)).unwrap();
        assert_eq!(pre.len(), 2);
        assert!(pre[0].distance(&TorusPoint::new(0.0, 0.0)) < 1e-15);
        assert!(pre[1].distance(&TorusPoint::new(0.5, 0.5)) < 1e-15);
    }

    #[test]
    fn conjugated_preimages_are_warped_linear_preimages() {
        let f = conjugated();
        let w = warp();
        let p = TorusPoint::from(w.diffeo_apply([0.0, 0.0]));
        let pre = f.preimages(p).unwrap();
        let expect = [
            TorusPoint::from(w.diffeo_apply([0.0, 0.0])),
            TorusPoint::from(w.diffeo_apply([0.5, 0.5])),
        ];
        for e in &expect {
            assert!(pre.iter().any(|q| q.distance(e) < 1e-12));
        }
    }

    #[test]
    fn degree_count_on_grid() {
        for f in [linear(), trig(0.05).unwrap(), conjugated()] {
            for i in 0..64 {
                for j in 0..64 {
                    let p = TorusPoint::new(i as f64 / 64.0, j as f64 / 64.0);
                    let pre = f.preimages(p).unwrap();
                    assert_eq!(pre.len(), f.degree());
                    for q in &pre {
                        assert!(f.apply(*q).distance(&p) < 1e-11);
                    }
                }
            }
        }
    }

    #[test]
    fn brute_force_grid_inversion_agrees_with_preimage_count() {
        // Every point of a fine grid maps to a cell whose preimage list
        // contains a point near it.
        let f = trig(0.05).unwrap();
        let n = 2048;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..4000 {
            let i = rng.gen_range(0..n);
            let j = rng.gen_range(0..n);
            let x = TorusPoint::new(i as f64 / n as f64, j as f64 / n as f64);
            let y = f.apply(x);
            let pre = f.preimages(y).unwrap();
            let hits = pre.iter().filter(|q| q.distance(&x) < 1e-3).count();
            assert_eq!(hits, 1);
        }
    }

    #[test]
    fn invert_lift_linear_is_exact() {
        let f = linear();
        let q = LiftPoint::new(1.25, -0.5);
        let u = f.invert_lift(q, LiftPoint::new(0.0, 0.0)).unwrap();
        let e = CAT.to_f64().inverse().mul_vec(q.coords());
        assert_eq!(u.coords(), e);
    }

    #[test]
    fn preimage_partition_matches_jacobian_change_of_variables() {
        // For a box B, Σ_i ∫_{f⁻¹_i B} Jf = |B|. Monte Carlo over the torus:
        // the fraction of uniform samples landing in B equals ∫_B Σ_i 1/Jf(gᵢ y) dy.
        let f = trig(0.05).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (x0, y0, w) = (0.2, 0.35, 0.25);
        let inside = |p: TorusPoint| {
            (p.x1() - x0).rem_euclid(1.0) < w && (p.x2() - y0).rem_euclid(1.0) < w
        };
        let n = 2_000_000;
        let hits = (0..n)
            .filter(|_| inside(f.apply(TorusPoint::new(rng.gen(), rng.gen()))))
            .count() as f64
            / n as f64;
        let m = 200;
        let mut integral = 0.0;
        for i in 0..m {
            for j in 0..m {
                let y = TorusPoint::new(
                    x0 + w * (i as f64 + 0.5) / m as f64,
                    y0 + w * (j as f64 + 0.5) / m as f64,
                );
                for q in f.preimages(y).unwrap() {
                    integral += 1.0 / f.jacobian(q).det().abs();
                }
            }
        }
        integral *= w * w / (m * m) as f64;
        assert!((hits - integral).abs() < 0.01 * integral, "{hits} vs {integral}");
    }

    #[test]
    fn model_file_round_trip() {
        for f in [linear(), trig(0.05).unwrap(), conjugated()] {
            let file = ModelFile::from_model(&f);
            let text = file.to_toml();
            let back = ModelFile::parse(&text).unwrap();
            assert_eq!(back, file);
            let g = back.build().unwrap();
            assert_eq!(g.kind(), f.kind());
        }
        let odd = ModelFile {
            name: Some("odd".into()),
            kind: KindTag::Trig,
            matrix: CAT.0,
            perturbation: vec![TrigTerm::new([2, -1], [0.1 / 3.0, 1e-17], std::f64::consts::PI)],
            warp: vec![],
        };
        assert_eq!(ModelFile::parse(&odd.to_toml()).unwrap(), odd);
    }

    #[test]
    fn rejects_bad_models() {
        assert!(ToralEndomorphism::linear(IntMat2([[2, 1], [1, 1]])).is_err());
        let big_warp = TrigDisplacement::new(vec![TrigTerm::new([1, 0], [0.1, 0.0], 0.0)]);
        assert!(ToralEndomorphism::new(CAT, ModelKind::Conjugated(big_warp)).is_err());
        let fold = TrigDisplacement::new(vec![TrigTerm::new([1, 0], [-1.0, 0.0], 0.0)]);
        assert!(ToralEndomorphism::new(CAT, ModelKind::TrigPerturbation(fold)).is_err());
        assert!(ModelFile::parse("kind = \"linear\"\nmatrix = [[3,1],[1,1]]\nbogus = 1").is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn homotopy_equivariance(u1 in -3.0f64..3.0, u2 in -3.0f64..3.0,
                                 c1 in -2i64..=2, c2 in -2i64..=2) {
            for f in [testutil::trig005(), testutil::conjugated()] {
                let u = LiftPoint::new(u1, u2);
                let d = linalg::sub(f.lift_apply(u.shift([c1, c2])).coords(),
                                    f.lift_apply(u).coords());
                let ac = CAT.mul_vec([c1, c2]);
                prop_assert!((d[0] - ac[0] as f64).abs() < 1e-10);
                prop_assert!((d[1] - ac[1] as f64).abs() < 1e-10);
            }
        }

        #[test]
        fn invert_lift_round_trip(u1 in -2.0f64..2.0, u2 in -2.0f64..2.0) {
            for f in [testutil::trig005(), testutil::conjugated()] {
                let u = LiftPoint::new(u1, u2);
                let back = f.invert_lift(f.lift_apply(u), u).unwrap();
                prop_assert!(back.distance(&u) < 1e-10);
            }
        }

        #[test]
        fn apply_consistent_with_lift(u1 in -5.0f64..5.0, u2 in -5.0f64..5.0) {
            let f = testutil::trig005();
            let u = LiftPoint::new(u1, u2);
            prop_assert!(f.apply(u.project()).distance(&f.lift_apply(u).project()) < 1e-12);
        }

        #[test]
        fn preimage_count_equals_degree(x in 0.0f64..1.0, y in 0.0f64..1.0) {
            let f = testutil::conjugated();
            let p = TorusPoint::new(x, y);
            let pre = f.preimages(p).unwrap();
            prop_assert_eq!(pre.len(), f.degree());
            for q in pre {
                prop_assert!(f.apply(q).distance(&p) < 1e-11);
            }
        }
    }
}
