//! Newton solvers for orbit problems on the lift, and the closing-lemma and
//! specification constructions built on them.
//!
//! Both solvers split every correction into unstable and stable parts along
//! the orbit: unstable coefficients are solved backward in time, stable ones
//! forward, so each recursion only ever contracts. This keeps orbits of
//! length 10⁴ as cheap and as well conditioned as short ones.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{self, IntMat2, Mat2, Vec2};
use crate::model::ToralEndomorphism;
use crate::periodic::PeriodicOrbit;
use crate::stats;
use crate::torus::{LiftPoint, TorusPoint};

const NEWTON_CAP: usize = 40;
const TARGET_RESIDUAL: f64 = 1e-13;
const ACCEPT_RESIDUAL: f64 = 5e-11;
const WARMUP_STEPS: usize = 60;

/// Unstable and stable frames along a cycle of Jacobians.
///
/// `J_i u_i = a_i u_{i+1}` and `J_i s_i = b_i s_{i+1}`, where index `n`
/// stands for `κ_u u_0` and `κ_s s_0`. The signs absorb an orientation
/// flip around the cycle.
#[derive(Clone, Debug)]
pub struct CyclicFrames {
    pub unstable: Vec<Vec2>,
    pub stable: Vec<Vec2>,
    pub growth_u: Vec<f64>,
    pub growth_s: Vec<f64>,
    pub kappa_u: f64,
    pub kappa_s: f64,
}

pub fn cyclic_frames(jacobians: &[Mat2], seed_u: Vec2, seed_s: Vec2) -> CyclicFrames {
    let n = jacobians.len();
    assert!(n > 0, "cyclic frames need at least one Jacobian");
    let laps = WARMUP_STEPS.div_ceil(n) + 1;

    let mut v = linalg::normalize(seed_u);
    for _ in 0..laps {
        for j in jacobians {
            v = linalg::normalize(j.mul_vec(v));
        }
    }
    let mut unstable = Vec::with_capacity(n);
    let mut growth_u = Vec::with_capacity(n);
    let mut kappa_u = 1.0;
    unstable.push(v);
    for (i, j) in jacobians.iter().enumerate() {
        let w = j.mul_vec(unstable[i]);
        let a = linalg::norm(w);
        growth_u.push(a);
        let next = linalg::scale(1.0 / a, w);
        if i + 1 < n {
            unstable.push(next);
        } else {
            kappa_u = linalg::dot(next, unstable[0]).signum();
        }
    }

    let inverses: Vec<Mat2> = jacobians.iter().map(Mat2::inverse).collect();
    let mut w = linalg::normalize(seed_s);
    for _ in 0..laps {
        for inv in inverses.iter().rev() {
            w = linalg::normalize(inv.mul_vec(w));
        }
    }
    let end = w;
    let mut stable = vec![[0.0; 2]; n];
    let mut growth_s = vec![0.0; n];
    for k in (0..n).rev() {
        let x = inverses[k].mul_vec(w);
        let m = linalg::norm(x);
        stable[k] = linalg::scale(1.0 / m, x);
        growth_s[k] = 1.0 / m;
        w = stable[k];
    }
    let kappa_s = linalg::dot(end, stable[0]).signum();

    CyclicFrames {
        unstable,
        stable,
        growth_u,
        growth_s,
        kappa_u,
        kappa_s,
    }
}

/// Coordinates of `v` in the basis `(e1, e2)`.
fn decompose(v: Vec2, e1: Vec2, e2: Vec2) -> (f64, f64) {
    let d = linalg::cross(e1, e2);
    (linalg::cross(v, e2) / d, linalg::cross(e1, v) / d)
}

impl CyclicFrames {
    pub fn len(&self) -> usize {
        self.unstable.len()
    }

    pub fn is_empty(&self) -> bool {
        self.unstable.is_empty()
    }

    /// Mean of `log a_i`, the unstable exponent of the cycle.
    pub fn exponent_u(&self) -> f64 {
        stats::sum(self.growth_u.iter().map(|a| a.ln())) / self.len() as f64
    }

    pub fn exponent_s(&self) -> f64 {
        stats::sum(self.growth_s.iter().map(|b| b.ln())) / self.len() as f64
    }

    fn basis(&self, i: usize) -> (Vec2, Vec2) {
        if i == self.len() {
            (
                linalg::scale(self.kappa_u, self.unstable[0]),
                linalg::scale(self.kappa_s, self.stable[0]),
            )
        } else {
            (self.unstable[i], self.stable[i])
        }
    }

    /// Solve `J_i δ_i − δ_{i+1} = g_i` for all `i` with `δ_n = δ_0`.
    pub fn solve(&self, g: &[Vec2]) -> Vec<Vec2> {
        let n = self.len();
        let (rho, sigma): (Vec<f64>, Vec<f64>) = (0..n)
            .map(|i| {
                let (e1, e2) = self.basis(i + 1);
                decompose(g[i], e1, e2)
            })
            .unzip();

        let backward = |alpha_n: f64| {
            let mut al = vec![0.0; n + 1];
            al[n] = alpha_n;
            for i in (0..n).rev() {
                al[i] = (al[i + 1] + rho[i]) / self.growth_u[i];
            }
            al
        };
        let q = backward(0.0)[0];
        let p: f64 = self.growth_u.iter().map(|a| 1.0 / a).product();
        let alpha0 = q / (1.0 - self.kappa_u * p);
        let alpha = backward(self.kappa_u * alpha0);

        let forward = |beta0: f64| {
            let mut be = vec![0.0; n + 1];
            be[0] = beta0;
            for i in 0..n {
                be[i + 1] = self.growth_s[i] * be[i] - sigma[i];
            }
            be
        };
        let r = forward(0.0)[n];
        let b: f64 = self.growth_s.iter().product();
        let beta = forward(r / (self.kappa_s - b));

        (0..n)
            .map(|i| {
                linalg::add(
                    linalg::scale(alpha[i], self.unstable[i]),
                    linalg::scale(beta[i], self.stable[i]),
                )
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct NewtonReport {
    pub iterations: usize,
    pub residual: f64,
}

fn max_abs(v: &[Vec2]) -> f64 {
    v.iter().fold(0.0_f64, |m, r| m.max(r[0].abs()).max(r[1].abs()))
}

fn step_residuals(
    f: &ToralEndomorphism,
    lifts: &[LiftPoint],
    offsets: &[[i64; 2]],
    cyclic: bool,
) -> Vec<Vec2> {
    let n = offsets.len();
    (0..n)
        .map(|i| {
            let next = if cyclic { lifts[(i + 1) % lifts.len()] } else { lifts[i + 1] };
            let target = next.shift(offsets[i]);
            linalg::sub(f.lift_apply(lifts[i]).coords(), target.coords())
        })
        .collect()
}

fn translated(lifts: &[LiftPoint], delta: &[Vec2], t: f64) -> Vec<LiftPoint> {
    lifts
        .iter()
        .zip(delta)
        .map(|(u, d)| u.translate(linalg::scale(t, *d)))
        .collect()
}

/// Refine a cycle `p_0, …, p_{n−1}` so that `f̄(p_i) = p_{i+1} + c_i` with
/// `p_n = p_0`.
pub fn refine_cycle(
    f: &ToralEndomorphism,
    lifts: &mut [LiftPoint],
    offsets: &[[i64; 2]],
) -> Result<NewtonReport> {
    let n = lifts.len();
    if n == 0 || offsets.len() != n {
        return Err(Error::InvalidArgument(format!(
            "cycle of {n} points needs {n} offsets, got {}",
            offsets.len()
        )));
    }
    let split = f.splitting();
    let mut r = step_residuals(f, lifts, offsets, true);
    let mut rn = max_abs(&r);
    let mut iterations = 0;
    while rn >= TARGET_RESIDUAL && iterations < NEWTON_CAP {
        iterations += 1;
        let jacs: Vec<Mat2> = lifts.iter().map(|u| f.lift_apply_jac(*u).1).collect();
        let frames = cyclic_frames(&jacs, split.e_u, split.e_s);
        let g: Vec<Vec2> = r.iter().map(|x| linalg::scale(-1.0, *x)).collect();
        let delta = frames.solve(&g);
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..12 {
            let cand = translated(lifts, &delta, t);
            let rc = step_residuals(f, &cand, offsets, true);
            let rcn = max_abs(&rc);
            if rcn < rn {
                lifts.copy_from_slice(&cand);
                (r, rn) = (rc, rcn);
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    if rn < ACCEPT_RESIDUAL {
        Ok(NewtonReport {
            iterations,
            residual: rn,
        })
    } else {
        Err(Error::NewtonDivergence(format!(
            "cycle of length {n} stalled at residual {rn:.3e} after {iterations} iterations"
        )))
    }
}

/// Boundary data for an open chain: `p_0 ∈ start_anchor + span(start_dir)`
/// and `p_m ∈ end_anchor + span(end_dir)`.
#[derive(Clone, Copy, Debug)]
pub struct ChainEnds {
    pub start_anchor: Vec2,
    pub start_dir: Vec2,
    pub end_anchor: Vec2,
    pub end_dir: Vec2,
}

fn chain_residual(
    f: &ToralEndomorphism,
    lifts: &[LiftPoint],
    offsets: &[[i64; 2]],
    ends: &ChainEnds,
) -> (Vec<Vec2>, f64, f64, f64) {
    let r = step_residuals(f, lifts, offsets, false);
    let m = offsets.len();
    let c0 = linalg::cross(ends.start_dir, linalg::sub(lifts[0].coords(), ends.start_anchor));
    let cm = linalg::cross(ends.end_dir, linalg::sub(lifts[m].coords(), ends.end_anchor));
    let rn = max_abs(&r).max(c0.abs()).max(cm.abs());
    (r, c0, cm, rn)
}

/// Refine an open chain `p_0, …, p_m` with `f̄(p_i) = p_{i+1} + c_i` and the
/// end conditions in `ends`. The start slides along `start_dir` and the end
/// along `end_dir`.
pub fn refine_chain(
    f: &ToralEndomorphism,
    lifts: &mut [LiftPoint],
    offsets: &[[i64; 2]],
    ends: &ChainEnds,
) -> Result<NewtonReport> {
    let m = offsets.len();
    if m == 0 || lifts.len() != m + 1 {
        return Err(Error::InvalidArgument(format!(
            "chain with {} points needs {} offsets, got {m}",
            lifts.len(),
            lifts.len().saturating_sub(1)
        )));
    }
    let ends = ChainEnds {
        start_dir: linalg::normalize(ends.start_dir),
        end_dir: linalg::normalize(ends.end_dir),
        ..*ends
    };
    let (mut r, mut c0, mut cm, mut rn) = chain_residual(f, lifts, offsets, &ends);
    let mut iterations = 0;
    while rn >= TARGET_RESIDUAL && iterations < NEWTON_CAP {
        iterations += 1;
        let jacs: Vec<Mat2> = lifts[..m].iter().map(|u| f.lift_apply_jac(*u).1).collect();
        let mut u = vec![ends.start_dir; m + 1];
        let mut a = vec![0.0; m];
        for i in 0..m {
            let w = jacs[i].mul_vec(u[i]);
            a[i] = linalg::norm(w);
            u[i + 1] = linalg::scale(1.0 / a[i], w);
        }
        let mut s = vec![ends.end_dir; m + 1];
        let mut b = vec![0.0; m];
        for i in (0..m).rev() {
            let x = jacs[i].inverse().mul_vec(s[i + 1]);
            let nx = linalg::norm(x);
            s[i] = linalg::scale(1.0 / nx, x);
            b[i] = 1.0 / nx;
        }
        let mut alpha = vec![0.0; m + 1];
        let mut beta = vec![0.0; m + 1];
        let mut rho = vec![0.0; m];
        let mut sigma = vec![0.0; m];
        for i in 0..m {
            (rho[i], sigma[i]) = decompose(linalg::scale(-1.0, r[i]), u[i + 1], s[i + 1]);
        }
        alpha[m] = -cm / linalg::cross(ends.end_dir, u[m]);
        for i in (0..m).rev() {
            alpha[i] = (alpha[i + 1] + rho[i]) / a[i];
        }
        beta[0] = -c0 / linalg::cross(ends.start_dir, s[0]);
        for i in 0..m {
            beta[i + 1] = b[i] * beta[i] - sigma[i];
        }
        let delta: Vec<Vec2> = (0..=m)
            .map(|i| linalg::add(linalg::scale(alpha[i], u[i]), linalg::scale(beta[i], s[i])))
            .collect();
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..12 {
            let cand = translated(lifts, &delta, t);
            let (rc, c0c, cmc, rcn) = chain_residual(f, &cand, offsets, &ends);
            if rcn < rn {
                lifts.copy_from_slice(&cand);
                (r, c0, cm, rn) = (rc, c0c, cmc, rcn);
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    if rn < ACCEPT_RESIDUAL {
        Ok(NewtonReport {
            iterations,
            residual: rn,
        })
    } else {
        Err(Error::NewtonDivergence(format!(
            "chain of length {m} stalled at residual {rn:.3e} after {iterations} iterations"
        )))
    }
}

/// Integer offsets `c_i = round(f̄(x_i) − x_{i+1})` between consecutive
/// unit-square lifts of a cyclic pseudo-orbit.
pub fn rounded_offsets(f: &ToralEndomorphism, cycle: &[TorusPoint]) -> Vec<[i64; 2]> {
    let n = cycle.len();
    (0..n)
        .map(|i| {
            let d = linalg::sub(f.lift_apply(cycle[i].lift()).coords(), cycle[(i + 1) % n].coords());
            [d[0].round() as i64, d[1].round() as i64]
        })
        .collect()
}

/// A finite sequence `x_0, …, x_m` with jump errors `d(f(x_i), x_{i+1})`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PseudoOrbitSegment {
    points: Vec<TorusPoint>,
    jumps: Vec<f64>,
}

impl PseudoOrbitSegment {
    pub fn new(f: &ToralEndomorphism, points: Vec<TorusPoint>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::InvalidArgument(
                "a pseudo-orbit segment needs at least two points".into(),
            ));
        }
        let jumps = points
            .windows(2)
            .map(|w| f.apply(w[0]).distance(&w[1]))
            .collect();
        Ok(Self { points, jumps })
    }

    /// As [`PseudoOrbitSegment::new`], rejecting any jump above `epsilon`.
    pub fn with_bound(f: &ToralEndomorphism, points: Vec<TorusPoint>, epsilon: f64) -> Result<Self> {
        let seg = Self::new(f, points)?;
        if let Some((i, j)) = seg
            .jumps
            .iter()
            .enumerate()
            .find(|(_, j)| **j > epsilon)
        {
            return Err(Error::InvalidArgument(format!(
                "jump {j:.3e} at step {i} exceeds the declared bound {epsilon:.3e}"
            )));
        }
        Ok(seg)
    }

    /// The closed segment `x_0, …, x_{n−1}, x_0` of a cycle.
    pub fn from_cycle(f: &ToralEndomorphism, cycle: &[TorusPoint]) -> Result<Self> {
        let mut points = cycle.to_vec();
        points.push(*cycle.first().ok_or_else(|| {
            Error::InvalidArgument("empty cycle".into())
        })?);
        Self::new(f, points)
    }

    pub fn points(&self) -> &[TorusPoint] {
        &self.points
    }

    pub fn jumps(&self) -> &[f64] {
        &self.jumps
    }

    pub fn max_jump(&self) -> f64 {
        self.jumps.iter().fold(0.0, |m: f64, j| m.max(*j))
    }

    /// `d(x_m, x_0)`.
    pub fn closing_gap(&self) -> f64 {
        self.points[0].distance(self.points.last().unwrap())
    }
}

pub const DEFAULT_CLOSING_GAMMA: f64 = 0.05;

#[derive(Clone, Debug, Serialize)]
pub struct Shadow {
    pub orbit: PeriodicOrbit,
    /// `max_j d(p_j, x_j)`.
    pub distance: f64,
    pub newton: NewtonReport,
}

/// Close a nearly periodic segment `x_0, …, x_m` (with `x_m ≈ x_0`) into a
/// true orbit of period `m`.
pub fn closing_lemma_shadow(
    f: &ToralEndomorphism,
    seg: &PseudoOrbitSegment,
    gamma: f64,
) -> Result<Shadow> {
    let gap = seg.closing_gap();
    let jump = seg.max_jump();
    if gap > gamma || jump > gamma {
        return Err(Error::InvalidArgument(format!(
            "segment does not nearly close: gap {gap:.3e}, max jump {jump:.3e}, gamma {gamma:.3e}"
        )));
    }
    let m = seg.points.len() - 1;
    let cycle = &seg.points[..m];
    let offsets = rounded_offsets(f, cycle);
    let mut lifts: Vec<LiftPoint> = cycle.iter().map(TorusPoint::lift).collect();
    let newton = refine_cycle(f, &mut lifts, &offsets)?;
    let points: Vec<TorusPoint> = lifts.iter().map(LiftPoint::project).collect();
    let distance = points
        .iter()
        .zip(cycle)
        .fold(0.0_f64, |d, (p, x)| d.max(p.distance(x)));
    let orbit = PeriodicOrbit::from_points(f, points)?;
    Ok(Shadow {
        orbit,
        distance,
        newton,
    })
}

/// `k_{j+1} = (k_1 + … + k_j + jN)²`, stopping (and truncating the last
/// block) once blocks and gaps would exceed `max_total` steps.
pub fn squared_block_schedule(k1: usize, gap: usize, max_total: usize) -> Vec<usize> {
    let mut blocks = Vec::new();
    let mut used = 0usize;
    let mut next = k1.max(1);
    while used + gap < max_total {
        let room = max_total - used - gap;
        let k = next.min(room);
        blocks.push(k);
        used += k + gap;
        if k < next {
            break;
        }
        let j = blocks.len();
        let s = blocks.iter().sum::<usize>() + j * gap;
        next = s.saturating_mul(s);
    }
    blocks
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SpecificationParams {
    /// Steps between consecutive blocks.
    pub gap: usize,
    /// Largest admissible pseudo-orbit jump.
    pub epsilon: f64,
    /// Allowed deviation of a block average from its orbit's exponent.
    pub tolerance: f64,
    /// Only blocks at least this long are held to `tolerance`.
    pub min_checked_block: usize,
    pub max_total: usize,
    /// At most this many steps of each gap are used to bridge; the rest
    /// continue the outgoing orbit.
    pub bridge_steps: usize,
    /// Lattice candidates tried per bridge.
    pub candidates: usize,
}

impl Default for SpecificationParams {
    fn default() -> Self {
        Self {
            gap: 20,
            epsilon: 0.05,
            tolerance: 0.05,
            min_checked_block: 100,
            max_total: 10_000,
            bridge_steps: 12,
            candidates: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BlockReport {
    pub index: usize,
    /// `"p"` or `"q"`.
    pub source: &'static str,
    pub start: usize,
    pub length: usize,
    pub target: f64,
    pub average: f64,
    pub deviation: f64,
    pub checked: bool,
    pub within_tolerance: bool,
}

/// The oscillation condition `(1+δ)²λ(p) < (1−δ²)λ(q)` for `λ(p) ≤ λ(q)`,
/// which holds exactly for `δ < (λ(q) − λ(p)) / (λ(q) + λ(p))`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct DeltaCondition {
    pub lambda_low: f64,
    pub lambda_high: f64,
    pub delta: f64,
    pub max_delta: f64,
    pub holds: bool,
}

impl DeltaCondition {
    pub fn new(lambda_p: f64, lambda_q: f64, delta: f64) -> Self {
        let (lo, hi) = if lambda_p <= lambda_q {
            (lambda_p, lambda_q)
        } else {
            (lambda_q, lambda_p)
        };
        let max_delta = (hi - lo) / (hi + lo);
        Self {
            lambda_low: lo,
            lambda_high: hi,
            delta,
            max_delta,
            holds: (1.0 + delta).powi(2) * lo < (1.0 - delta * delta) * hi,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SpecificationReport {
    pub period: usize,
    pub gap: usize,
    pub blocks: Vec<BlockReport>,
    /// Largest jump of the concatenated pseudo-orbit before closing.
    pub max_jump: f64,
    pub shadow_distance: f64,
    pub newton: NewtonReport,
    pub delta_condition: DeltaCondition,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct Specification {
    pub orbit: PeriodicOrbit,
    pub report: SpecificationReport,
}

struct Bridge {
    points: Vec<TorusPoint>,
    start_jump: f64,
    end_jump: f64,
}

const START_WINDOW: f64 = 2e-3;
const STABLE_WINDOW: f64 = 0.3;

/// Single shooting along `a + t·ua` so that `f̄^steps` lands on
/// `target + span(sb)`.
fn shoot(
    f: &ToralEndomorphism,
    a: LiftPoint,
    ua: Vec2,
    target: Vec2,
    sb: Vec2,
    steps: usize,
    t0: f64,
) -> Option<f64> {
    let mut t = t0;
    for _ in 0..30 {
        let mut u = a.translate(linalg::scale(t, ua));
        let mut v = ua;
        for _ in 0..steps {
            let (fu, j) = f.lift_apply_jac(u);
            v = j.mul_vec(v);
            u = fu;
        }
        let miss = linalg::cross(sb, linalg::sub(u.coords(), target));
        let dt = miss / linalg::cross(sb, v);
        t -= dt;
        if !t.is_finite() || t.abs() > 0.05 {
            return None;
        }
        if dt.abs() < 1e-16 {
            break;
        }
    }
    Some(t)
}

/// Orbit segment of `steps` points leaving `a` along its unstable leaf and
/// arriving on the stable leaf of `b`, chosen among lattice translates of
/// `b` to minimize the two end jumps.
fn bridge(
    f: &ToralEndomorphism,
    a: TorusPoint,
    ua: Vec2,
    b: TorusPoint,
    sb: Vec2,
    steps: usize,
    candidates: usize,
) -> Result<Bridge> {
    let split = f.splitting();
    let ua = if linalg::dot(ua, split.e_u) < 0.0 {
        linalg::scale(-1.0, ua)
    } else {
        ua
    };
    let lam = split.lambda_u.powi(steps as i32);
    let mut far = a.lift();
    for _ in 0..steps {
        far = f.lift_apply(far);
    }
    let z = linalg::sub(b.coords(), far.coords());
    let zc = split.coords(z);
    let e = [split.coords([1.0, 0.0]), split.coords([0.0, 1.0])];
    // Enumerate one lattice coordinate and solve the other for a small stable part.
    let (free, solved) = if e[1][1].abs() >= e[0][1].abs() { (0, 1) } else { (1, 0) };
    let (ef, es) = (e[free], e[solved]);
    let slope = ef[0] - ef[1] * es[0] / es[1];
    let intercept = zc[0] - zc[1] * es[0] / es[1];
    let umax = START_WINDOW * lam.abs();
    let center = -intercept / slope;
    let half = (umax / slope.abs()).min(2e5);
    let (lo, hi) = ((center - half).ceil() as i64, (center + half).floor() as i64);

    let mut cands: Vec<(f64, [i64; 2], f64)> = Vec::new();
    for cf in lo..=hi {
        let cs_real = -(zc[1] + cf as f64 * ef[1]) / es[1];
        let base = cs_real.floor() as i64;
        for cs in [base, base + 1] {
            let mut c = [0i64; 2];
            c[free] = cf;
            c[solved] = cs;
            let wc = split.coords(linalg::add(z, [c[0] as f64, c[1] as f64]));
            if wc[1].abs() <= STABLE_WINDOW && wc[0].abs() <= umax {
                cands.push((wc[1].abs(), c, wc[0] / lam));
            }
        }
    }
    cands.sort_by(|x, y| x.0.total_cmp(&y.0));
    cands.truncate(candidates.max(1));

    let a_mat: &IntMat2 = f.matrix();
    let mut best: Option<Bridge> = None;
    for (_, c, t0) in cands {
        let target = linalg::add(b.coords(), [c[0] as f64, c[1] as f64]);
        let Some(t) = shoot(f, a.lift(), ua, target, sb, steps, t0) else {
            continue;
        };
        let mut path = Vec::with_capacity(steps + 1);
        let mut u = a.lift().translate(linalg::scale(t, ua));
        path.push(u);
        for _ in 0..steps {
            u = f.lift_apply(u);
            path.push(u);
        }
        let k: Vec<[i64; 2]> = path.iter().map(LiftPoint::floor).collect();
        let mut lifts: Vec<LiftPoint> = path
            .iter()
            .zip(&k)
            .map(|(u, ki)| u.shift([-ki[0], -ki[1]]))
            .collect();
        let offsets: Vec<[i64; 2]> = (0..steps)
            .map(|i| {
                let ak = a_mat.mul_vec(k[i]);
                [k[i + 1][0] - ak[0], k[i + 1][1] - ak[1]]
            })
            .collect();
        let start_anchor = linalg::sub(a.coords(), [k[0][0] as f64, k[0][1] as f64]);
        let end_anchor = linalg::add(
            b.coords(),
            [(c[0] - k[steps][0]) as f64, (c[1] - k[steps][1]) as f64],
        );
        let ends = ChainEnds {
            start_anchor,
            start_dir: ua,
            end_anchor,
            end_dir: sb,
        };
        if refine_chain(f, &mut lifts, &offsets, &ends).is_err() {
            continue;
        }
        let start_jump = linalg::norm(linalg::sub(lifts[0].coords(), start_anchor));
        let end_jump = linalg::norm(linalg::sub(lifts[steps].coords(), end_anchor));
        let score = start_jump.max(end_jump);
        if best
            .as_ref()
            .is_none_or(|b| score < b.start_jump.max(b.end_jump))
        {
            best = Some(Bridge {
                points: lifts[..steps].iter().map(LiftPoint::project).collect(),
                start_jump,
                end_jump,
            });
        }
    }
    best.ok_or_else(|| {
        Error::NewtonDivergence(format!(
            "no bridge of {steps} steps from ({:.6}, {:.6}) to ({:.6}, {:.6})",
            a.x1(),
            a.x2(),
            b.x1(),
            b.x2()
        ))
    })
}

/// Concatenate orbit blocks of `p` and `q` (alternating, starting with `p`)
/// separated by gaps of `params.gap` steps, close the result with the
/// closing lemma and report per-block Birkhoff averages of `log‖Df|Eᵘ‖`.
pub fn specification_concatenate(
    f: &ToralEndomorphism,
    p: &PeriodicOrbit,
    q: &PeriodicOrbit,
    blocks: &[usize],
    params: &SpecificationParams,
) -> Result<Specification> {
    if blocks.is_empty() || blocks.contains(&0) {
        return Err(Error::InvalidArgument("block lengths must be positive".into()));
    }
    let total: usize = blocks.iter().sum::<usize>() + blocks.len() * params.gap;
    if total > params.max_total {
        return Err(Error::InvalidArgument(format!(
            "concatenation of {total} steps exceeds the cap {}",
            params.max_total
        )));
    }
    let same = p.points == q.points;
    let orbits = [p, q];
    let split = f.splitting();
    let frames = [p, q].map(|o| {
        let jacs: Vec<Mat2> = o.points.iter().map(|x| f.jacobian(*x)).collect();
        cyclic_frames(&jacs, split.e_u, split.e_s)
    });
    let which = |j: usize| if same { 0 } else { j % 2 };

    let mut seq: Vec<TorusPoint> = Vec::with_capacity(total);
    let mut starts = Vec::with_capacity(blocks.len());
    let mut max_jump = 0.0_f64;
    let mut phase = 0usize;
    for (j, &k) in blocks.iter().enumerate() {
        let o = which(j);
        let orbit = orbits[o];
        let n = orbit.period;
        starts.push(seq.len());
        seq.extend((0..k).map(|t| orbit.points[(phase + t) % n]));
        let next_j = (j + 1) % blocks.len();
        let o_next = which(next_j);
        let end_phase = phase + k;
        let continued = (end_phase + params.gap) % n;
        let next_phase = if next_j == 0 {
            0
        } else if o_next == o {
            continued
        } else {
            0
        };
        if o_next == o && continued == next_phase {
            seq.extend((0..params.gap).map(|t| orbit.points[(end_phase + t) % n]));
        } else {
            if params.gap == 0 {
                return Err(Error::InvalidArgument(
                    "a zero gap cannot bridge distinct orbit points".into(),
                ));
            }
            let steps = params.gap.min(params.bridge_steps.max(1));
            let lead = params.gap - steps;
            seq.extend((0..lead).map(|t| orbit.points[(end_phase + t) % n]));
            let ai = (end_phase + lead) % n;
            let target = orbits[o_next];
            let br = bridge(
                f,
                orbit.points[ai],
                frames[o].unstable[ai],
                target.points[next_phase],
                frames[o_next].stable[next_phase],
                steps,
                params.candidates,
            )?;
            max_jump = max_jump.max(br.start_jump).max(br.end_jump);
            seq.extend(br.points);
        }
        phase = next_phase;
    }
    if max_jump > params.epsilon {
        return Err(Error::NewtonDivergence(format!(
            "best bridge jump {max_jump:.3e} exceeds epsilon {:.3e}",
            params.epsilon
        )));
    }

    let offsets = rounded_offsets(f, &seq);
    let mut lifts: Vec<LiftPoint> = seq.iter().map(TorusPoint::lift).collect();
    let newton = refine_cycle(f, &mut lifts, &offsets)?;
    let points: Vec<TorusPoint> = lifts.iter().map(LiftPoint::project).collect();
    let shadow_distance = points
        .iter()
        .zip(&seq)
        .fold(0.0_f64, |d, (a, b)| d.max(a.distance(b)));
    let jacs: Vec<Mat2> = points.iter().map(|x| f.jacobian(*x)).collect();
    let cl = cyclic_frames(&jacs, split.e_u, split.e_s);
    let logs: Vec<f64> = cl.growth_u.iter().map(|a| a.ln()).collect();

    let mut reports = Vec::with_capacity(blocks.len());
    for (j, (&k, &start)) in blocks.iter().zip(&starts).enumerate() {
        let o = which(j);
        let target = orbits[o].lambda_u;
        let average = stats::mean(&logs[start..start + k]);
        let deviation = (average - target).abs();
        let checked = k >= params.min_checked_block;
        reports.push(BlockReport {
            index: j,
            source: if o == 0 { "p" } else { "q" },
            start,
            length: k,
            target,
            average,
            deviation,
            checked,
            within_tolerance: deviation <= params.tolerance,
        });
    }
    let passed = reports.iter().all(|b| !b.checked || b.within_tolerance);
    let orbit = PeriodicOrbit::from_points(f, points)?;
    Ok(Specification {
        report: SpecificationReport {
            period: orbit.period,
            gap: params.gap,
            blocks: reports,
            max_jump,
            shadow_distance,
            newton,
            delta_condition: DeltaCondition::new(p.lambda_u, q.lambda_u, params.tolerance),
            passed,
        },
        orbit,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::reference;
    use crate::periodic::find_periodic;
    use crate::testutil::{conjugated, trig005};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noisy(points: &[TorusPoint], amp: f64, seed: u64) -> Vec<TorusPoint> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        points
            .iter()
            .map(|p| {
                let d = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
                TorusPoint::new(p.x1() + amp * d[0], p.x2() + amp * d[1])
            })
            .collect()
    }

    fn orbit_of_period(f: &ToralEndomorphism, n: u32) -> PeriodicOrbit {
        find_periodic(f, n).unwrap().primitive().next().unwrap().clone()
    }

    #[test]
    fn frames_of_a_constant_cycle_are_eigenvectors() {
        let f = reference::linear();
        let a = *f.linear_part();
        let fr = cyclic_frames(&[a, a, a], [1.0, 0.0], [0.0, 1.0]);
        let sp = f.splitting();
        for i in 0..3 {
            assert!((fr.growth_u[i] - sp.lambda_u).abs() < 1e-12);
            assert!((fr.growth_s[i] - sp.lambda_s).abs() < 1e-12);
            assert!(linalg::line_angle(fr.unstable[i], sp.e_u) < 1e-12);
        }
    }

    #[test]
    fn cyclic_solve_satisfies_the_linear_system() {
        let f = trig005();
        let o = orbit_of_period(f, 5);
        let jacs: Vec<Mat2> = o.points.iter().map(|p| f.jacobian(*p)).collect();
        let fr = cyclic_frames(&jacs, [1.0, 0.0], [0.0, 1.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g: Vec<Vec2> = (0..5)
            .map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
            .collect();
        let d = fr.solve(&g);
        for i in 0..5 {
            let lhs = linalg::sub(jacs[i].mul_vec(d[i]), d[(i + 1) % 5]);
            assert!(linalg::norm(linalg::sub(lhs, g[i])) < 1e-12);
        }
    }

    #[test]
    fn chain_endpoints_land_on_their_lines() {
        let f = trig005();
        let a = LiftPoint::new(0.2, 0.3);
        let mut lifts = vec![a];
        let mut offsets = Vec::new();
        for _ in 0..6 {
            let v = f.lift_apply(*lifts.last().unwrap());
            let k = v.floor();
            offsets.push(k);
            lifts.push(v.shift([-k[0], -k[1]]));
        }
        // Ask the end to sit on a stable line through a displaced target.
        let sp = f.splitting();
        let end = linalg::add(lifts[6].coords(), [0.01, -0.02]);
        let ends = ChainEnds {
            start_anchor: a.coords(),
            start_dir: sp.e_u,
            end_anchor: end,
            end_dir: sp.e_s,
        };
        refine_chain(f, &mut lifts, &offsets, &ends).unwrap();
        for i in 0..6 {
            let r = linalg::sub(f.lift_apply(lifts[i]).coords(), lifts[i + 1].shift(offsets[i]).coords());
            assert!(linalg::norm(r) < 1e-12);
        }
        assert!(linalg::cross(sp.e_u, linalg::sub(lifts[0].coords(), a.coords())).abs() < 1e-12);
        assert!(linalg::cross(sp.e_s, linalg::sub(lifts[6].coords(), end)).abs() < 1e-12);
    }

    #[test]
    fn exact_orbit_shadows_itself() {
        for f in [trig005(), conjugated()] {
            let o = orbit_of_period(f, 4);
            let seg = PseudoOrbitSegment::from_cycle(f, &o.points).unwrap();
            let s = closing_lemma_shadow(f, &seg, DEFAULT_CLOSING_GAMMA).unwrap();
            assert_eq!(s.distance, 0.0);
            assert_eq!(s.orbit.points, o.points);
        }
    }

    #[test]
    fn noisy_orbit_closes_onto_the_true_orbit() {
        let f = trig005();
        let o = orbit_of_period(f, 6);
        let seg = PseudoOrbitSegment::from_cycle(f, &noisy(&o.points, 1e-3, 1)).unwrap();
        let s = closing_lemma_shadow(f, &seg, DEFAULT_CLOSING_GAMMA).unwrap();
        assert!(s.distance <= 1e-2);
        assert!(s.newton.residual < 1e-10);
        for (p, q) in s.orbit.points.iter().zip(&o.points) {
            assert!(p.distance(q) < 1e-10);
        }
    }

    #[test]
    fn open_segment_is_rejected() {
        let f = trig005();
        let pts = f.orbit(TorusPoint::new(0.1, 0.2), 5);
        let seg = PseudoOrbitSegment::new(f, pts.clone()).unwrap();
        assert_eq!(seg.max_jump(), 0.0);
        let gamma = 0.5 * seg.closing_gap();
        assert!(matches!(
            closing_lemma_shadow(f, &seg, gamma),
            Err(Error::InvalidArgument(_))
        ));
        let mut jumpy = pts;
        jumpy[3] = TorusPoint::new(0.5, 0.5);
        assert!(PseudoOrbitSegment::with_bound(f, jumpy, 0.05).is_err());
    }

    #[test]
    fn squared_schedule_matches_hand_computation() {
        // k2 = (10 + 20)² = 900; k3 = (910 + 40)² is cut to 10⁴ − 950 − 20.
        assert_eq!(squared_block_schedule(10, 20, 10_000), vec![10, 900, 9030]);
        let s = squared_block_schedule(2, 3, 500);
        assert_eq!(s[..2], [2, 25]);
        assert!(s.iter().sum::<usize>() + 3 * s.len() <= 500);
    }

    #[test]
    fn delta_condition_threshold_is_sharp() {
        let c = DeltaCondition::new(1.3, 1.1, 0.0);
        let cond = |d: f64| (1.0 + d).powi(2) * 1.1 < (1.0 - d * d) * 1.3;
        assert!((c.max_delta - 0.2 / 2.4).abs() < 1e-15);
        assert!(cond(c.max_delta - 1e-9) && !cond(c.max_delta + 1e-9));
    }

    #[test]
    fn same_orbit_blocks_average_to_its_exponent() {
        let f = trig005();
        let p = orbit_of_period(f, 1);
        let spec = specification_concatenate(f, &p, &p, &[150, 150], &SpecificationParams::default())
            .unwrap();
        for b in &spec.report.blocks {
            assert!((b.average - p.lambda_u).abs() < 1e-6);
        }
    }

    #[test]
    fn linear_blocks_average_to_linear_exponent() {
        let f = reference::linear();
        let p = orbit_of_period(&f, 1);
        let q = orbit_of_period(&f, 3);
        let spec =
            specification_concatenate(&f, &p, &q, &[100, 120, 110], &SpecificationParams::default())
                .unwrap();
        let lu = f.splitting().lambda_u.ln();
        assert!(spec.report.max_jump < 0.05);
        for b in &spec.report.blocks {
            assert!((b.average - lu).abs() < 1e-12);
        }
    }

    #[test]
    fn two_exponent_blocks_oscillate() {
        let f = trig005();
        let p = orbit_of_period(f, 1);
        let mut orbits = find_periodic(f, 2).unwrap().orbits;
        orbits.sort_by(|a, b| a.lambda_u.total_cmp(&b.lambda_u));
        let q = orbits[0].clone();
        assert!(p.lambda_u - q.lambda_u > 0.1);
        let params = SpecificationParams::default();
        let spec = specification_concatenate(f, &p, &q, &[120, 200, 160, 240], &params).unwrap();
        let r = &spec.report;
        assert!(r.passed && r.max_jump <= params.epsilon);
        assert_eq!(r.period, 720 + 4 * params.gap);
        for b in &r.blocks {
            assert!(b.deviation < params.tolerance);
        }
        // Consecutive blocks sit on opposite sides of the midpoint.
        let mid = 0.5 * (p.lambda_u + q.lambda_u);
        for w in r.blocks.windows(2) {
            assert!((w[0].average - mid) * (w[1].average - mid) < 0.0);
        }
        assert!(spec.orbit.closure_error(f) < 1e-10);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(8))]

        #[test]
        fn halving_noise_halves_shadowing_distance(seed in 0u64..1000) {
            let f = trig005();
            let o = orbit_of_period(f, 5);
            let mut last = f64::MAX;
            for amp in [1e-3, 5e-4, 2.5e-4] {
                let seg = PseudoOrbitSegment::from_cycle(f, &noisy(&o.points, amp, seed)).unwrap();
                let d = closing_lemma_shadow(f, &seg, DEFAULT_CLOSING_GAMMA).unwrap().distance;
                prop_assert!(d <= 0.5 * last * (1.0 + 1e-9));
                last = d;
            }
        }
    }
}
