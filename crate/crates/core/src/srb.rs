//! SRB conditional densities on leaves, the absolutely continuous invariant
//! measure `e^{−φ} dm`, and the entropy identities.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::bundles::{pull_back_along, push_forward_along, stable_direction_at, BackwardBranch, Bundle};
use crate::error::{Error, Result};
use crate::grid::GridField;
use crate::leaf::{trace, trace_to, DirectionSource, ExactDirections, LeafSegment, TraceOptions, GAUSS_8};
use crate::linalg::{self, Vec2};
use crate::livsic::{CohomologySolver, DEFAULT_CUTOFF, DEFAULT_GRID};
use crate::model::ToralEndomorphism;
use crate::parallel;
use crate::periodic::{find_periodic_with, CensusOptions};
use crate::stats::{self, fit_line, LineFit};
use crate::torus::{LiftPoint, TorusPoint};

/// Factors closer to 1 than this end a product early.
pub const STOP_INCREMENT: f64 = 1e-12;
/// Forward iterates beyond the last stable factor, so that stable directions
/// pulled back from the end of the orbit have converged.
const STABLE_PAD: usize = 40;
pub const MAX_PAIR_DISTANCE: f64 = 0.05;
pub const SEPARATION_LIMIT: f64 = 0.2;

/// A truncated infinite product of Jacobian ratios.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct DeltaProduct {
    pub value: f64,
    /// Factors multiplied before the truncation or the early stop.
    pub terms: usize,
    /// Estimate `value · |log t_last| · θ/(1 − θ)` of the omitted tail.
    pub tail_bound: f64,
    /// Measured geometric rate at which paired points approach each other.
    pub theta: f64,
}

/// `Jᵘf` at `x₀, x₋₁, …, x₋N`, with unstable directions pushed forward from
/// the deepest branch point.
fn branch_unstable_jacobians(f: &ToralEndomorphism, branch: &BackwardBranch) -> Vec<f64> {
    let mut chain = branch.points();
    chain.reverse();
    let (dirs, _) = push_forward_along(f, &chain, f.splitting().e_u);
    let mut out: Vec<f64> = chain
        .iter()
        .zip(&dirs)
        .map(|(p, d)| linalg::norm(f.jacobian(*p).mul_vec(*d)))
        .collect();
    out.reverse();
    out
}

fn rate(distances: &[f64]) -> f64 {
    let (k, d): (Vec<f64>, Vec<f64>) = distances
        .iter()
        .enumerate()
        .filter(|(_, d)| **d > 1e-14)
        .map(|(k, d)| (k as f64, d.ln()))
        .unzip();
    if k.len() < 2 {
        return 0.0;
    }
    fit_line(&k, &d).slope.exp()
}

fn finish(factors: &[f64], distances: &[f64]) -> DeltaProduct {
    let value = factors.iter().product::<f64>();
    let theta = rate(distances);
    let last = factors.last().map_or(0.0, |t| t.ln().abs());
    let tail_bound = if theta < 1.0 {
        value * last * theta / (1.0 - theta)
    } else {
        f64::INFINITY
    };
    DeltaProduct {
        value,
        terms: factors.len(),
        tail_bound,
        theta,
    }
}

fn check_pairing(bx: &BackwardBranch, by: &BackwardBranch, k: usize) -> Result<()> {
    if bx.choices() != by.choices() {
        return Err(Error::BranchMismatch(
            "branches take different coset choices".into(),
        ));
    }
    if k == 0 || k > bx.depth() {
        return Err(Error::InvalidArgument(format!(
            "truncation {k} must lie in 1..={}",
            bx.depth()
        )));
    }
    Ok(())
}

/// Factors `Jᵘf(x₋k)/Jᵘf(y₋k)` for `k = 1..=K`, without early stopping.
fn unstable_factors(
    f: &ToralEndomorphism,
    bx: &BackwardBranch,
    by: &BackwardBranch,
    k: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_pairing(bx, by, k)?;
    let jx = branch_unstable_jacobians(f, bx);
    let jy = branch_unstable_jacobians(f, by);
    let (px, py) = (bx.points(), by.points());
    let factors = (1..=k).map(|i| jx[i] / jy[i]).collect();
    let dist = (1..=k).map(|i| px[i].distance(&py[i])).collect();
    Ok((factors, dist))
}

/// `Δᵘ(x, y) = Π_{k≥1} Jᵘf(x₋k)/Jᵘf(y₋k)` along paired backward branches,
/// truncated at `K` factors, once the factors are within `1e−12` of 1, or
/// when the paired points stop approaching each other. Backward iteration
/// amplifies off-leaf rounding by `1/|λˢ|` per step, so past that point the
/// factors measure noise.
pub fn delta_u(
    f: &ToralEndomorphism,
    bx: &BackwardBranch,
    by: &BackwardBranch,
    k: usize,
) -> Result<DeltaProduct> {
    let (factors, dist) = unstable_factors(f, bx, by, k)?;
    let stop = (1..factors.len())
        .find(|&i| converged(&factors[..=i]) || dist[i] >= dist[i - 1])
        .map_or(factors.len(), |i| i + 1);
    Ok(finish(&factors[..stop], &dist[..stop]))
}

/// Two consecutive factors within `STOP_INCREMENT` of 1. A single one is not
/// enough: a factor can cross 1 when the displacement happens to be
/// orthogonal to the gradient of the log-Jacobian.
fn converged(factors: &[f64]) -> bool {
    factors.len() >= 2
        && factors[factors.len() - 2..]
            .iter()
            .all(|t| (t - 1.0).abs() < STOP_INCREMENT)
}

/// Every truncation `Δᵘ_1, …, Δᵘ_K`, for convergence diagnostics.
pub fn delta_u_truncations(
    f: &ToralEndomorphism,
    bx: &BackwardBranch,
    by: &BackwardBranch,
    k: usize,
) -> Result<Vec<f64>> {
    let (factors, _) = unstable_factors(f, bx, by, k)?;
    Ok(running_products(&factors))
}

/// Drift off the stable leaf below this is rounding and gets removed.
pub const STABLE_DRIFT: f64 = 1e-9;

/// The point of `Wˢ(x)` abeam of `y`, when `y` is off that leaf only by
/// rounding. Forward iteration multiplies off-leaf errors by `λᵘ` each step,
/// so a stable pair drifts apart long before its factors reach 1.
fn snap_to_stable_leaf<S: DirectionSource + ?Sized>(
    f: &ToralEndomorphism,
    src: &S,
    x: TorusPoint,
    y: TorusPoint,
) -> Result<TorusPoint> {
    let start = x.lift();
    let target = start.translate(x.displacement_to(&y));
    let opts = TraceOptions {
        tolerance: f64::INFINITY,
        ..TraceOptions::default()
    };
    let seg = trace_to(src, f.splitting(), start, target, &opts)?;
    let end = seg.end();
    Ok(if end.distance(&target) <= STABLE_DRIFT {
        end.project()
    } else {
        y
    })
}

/// Factors `[Jf(fᵏx)/Jf(fᵏy)] · [Jˢf(fᵏx)/Jˢf(fᵏy)]` for `k = 0..K` with the
/// pair distances, stopping early only when `stop` is set.
fn stable_factors(
    f: &ToralEndomorphism,
    x: TorusPoint,
    y: TorusPoint,
    k: usize,
    stop: bool,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if k == 0 {
        return Err(Error::InvalidArgument("truncation must be positive".into()));
    }
    let d0 = x.distance(&y);
    if d0 > MAX_PAIR_DISTANCE {
        return Err(Error::InvalidArgument(format!(
            "stable pair distance {d0:.3e} exceeds {MAX_PAIR_DISTANCE}"
        )));
    }
    let src = ExactDirections::new(f, Bundle::Stable, STABLE_PAD);
    let jac_s = |p: TorusPoint| -> Result<(f64, f64)> {
        let j = f.jacobian(p);
        let e = stable_direction_at(f, p, STABLE_PAD)?;
        Ok((j.det().abs(), linalg::norm(j.mul_vec(e))))
    };
    let (mut xk, mut yk) = (x, y);
    let mut factors = Vec::with_capacity(k);
    let mut dist = Vec::with_capacity(k);
    for i in 0..k {
        let d = xk.distance(&yk);
        if d > SEPARATION_LIMIT {
            return Err(Error::PairSeparation { step: i, distance: d });
        }
        if i > 0 {
            yk = snap_to_stable_leaf(f, &src, xk, yk)?;
        }
        let ((jx, sx), (jy, sy)) = (jac_s(xk)?, jac_s(yk)?);
        factors.push((jx / jy) * (sx / sy));
        dist.push(xk.distance(&yk));
        if stop && converged(&factors) {
            break;
        }
        xk = f.apply(xk);
        yk = f.apply(yk);
    }
    Ok((factors, dist))
}

/// `Δˢ(x, y) = Π_{k≥0} [Jf(fᵏx)/Jf(fᵏy)] · [Jˢf(fᵏx)/Jˢf(fᵏy)]` for `y` on the
/// local stable leaf of `x`.
pub fn delta_s(f: &ToralEndomorphism, x: TorusPoint, y: TorusPoint, k: usize) -> Result<DeltaProduct> {
    let (factors, dist) = stable_factors(f, x, y, k, true)?;
    Ok(finish(&factors, &dist))
}

/// Every truncation `Δˢ_1, …, Δˢ_K`, without early stopping.
pub fn delta_s_truncations(f: &ToralEndomorphism, x: TorusPoint, y: TorusPoint, k: usize) -> Result<Vec<f64>> {
    let (factors, _) = stable_factors(f, x, y, k, false)?;
    Ok(running_products(&factors))
}

fn running_products(factors: &[f64]) -> Vec<f64> {
    factors
        .iter()
        .scan(1.0, |acc, t| {
            *acc *= t;
            Some(*acc)
        })
        .collect()
}

/// Tail sums enter the fit only while they cover at least this many factors.
const FIT_LAG: usize = 5;
const FIT_FIRST: usize = 5;
const FIT_LAST: usize = 30;
/// Tails below this are at the rounding floor of the products.
const FIT_FLOOR: f64 = 1e-13;

/// Geometric convergence of truncated products. The truncation error
/// `|log P_∞ − log P_k|` is bounded by the tail `Σ_{j>k} |log t_j|`, whose
/// logarithm is fitted against `k`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TruncationFit {
    pub bundle: Bundle,
    /// `P_1, P_2, …`.
    pub partial: Vec<f64>,
    /// Last truncation whose factor is trusted.
    pub reliable: usize,
    /// `(k, Σ_{k<j≤reliable} |log t_j|)` entering the fit.
    pub tails: Vec<(usize, f64)>,
    /// `None` when every tail is already at the rounding floor, so the
    /// products are exact from the start (linear maps).
    pub fit: Option<LineFit>,
    /// Fitted contraction rate `e^{slope}`; `0` for exact products.
    pub theta: f64,
}

fn fit_truncations(bundle: Bundle, partial: Vec<f64>, reliable: usize) -> Result<TruncationFit> {
    let reliable = reliable.min(partial.len());
    if reliable < FIT_FIRST + FIT_LAG + 4 {
        return Err(Error::InvalidArgument(format!(
            "only {reliable} reliable truncations, too few for a rate fit"
        )));
    }
    let logs: Vec<f64> = (0..reliable)
        .map(|i| if i == 0 { partial[0].ln() } else { (partial[i] / partial[i - 1]).ln() })
        .collect();
    let last = FIT_LAST.min(reliable - FIT_LAG);
    let tails: Vec<(usize, f64)> = (FIT_FIRST..=last)
        .map(|k| (k, stats::sum(logs[k..].iter().map(|l| l.abs()))))
        .take_while(|(_, t)| *t > FIT_FLOOR)
        .collect();
    if tails.is_empty() {
        return Ok(TruncationFit {
            bundle,
            partial,
            reliable,
            tails,
            fit: None,
            theta: 0.0,
        });
    }
    if tails.len() < 5 {
        return Err(Error::InvalidArgument(format!(
            "only {} truncation tails above the rounding floor",
            tails.len()
        )));
    }
    let ks: Vec<f64> = tails.iter().map(|d| d.0 as f64).collect();
    let ys: Vec<f64> = tails.iter().map(|d| d.1.ln()).collect();
    let fit = fit_line(&ks, &ys);
    Ok(TruncationFit {
        bundle,
        partial,
        reliable,
        tails,
        theta: fit.slope.exp(),
        fit: Some(fit),
    })
}

/// Convergence fit for `Δᵘ(x, y)` with `y` at leaf distance about `t` on the
/// unstable leaf of the all-zero branch through `x`. The window ends five
/// steps before the paired points reach their closest approach,
/// where the tails stop carrying information.
pub fn unstable_truncation_fit(f: &ToralEndomorphism, x: TorusPoint, t: f64, depth: usize) -> Result<TruncationFit> {
    let bx = BackwardBranch::zero(f, x, depth)?;
    let y = crate::bundles::unstable_neighbor(f, &bx, t, depth.min(20))?;
    let by = bx.paired(f, y)?;
    let partial = delta_u_truncations(f, &bx, &by, depth)?;
    let (px, py) = (bx.points(), by.points());
    let closest = (1..=depth)
        .min_by(|&a, &b| px[a].distance(&py[a]).total_cmp(&px[b].distance(&py[b])))
        .unwrap_or(depth);
    fit_truncations(Bundle::Unstable, partial, closest)
}

/// Convergence fit for `Δˢ(x, y)` with `y` at arclength `s` along the stable
/// leaf of `x`.
pub fn stable_truncation_fit(f: &ToralEndomorphism, x: TorusPoint, s: f64, depth: usize) -> Result<TruncationFit> {
    let src = ExactDirections::new(f, Bundle::Stable, STABLE_PAD);
    let lin = f.splitting();
    let heading = if s < 0.0 { linalg::scale(-1.0, lin.e_s) } else { lin.e_s };
    let seg = trace(&src, lin, x.lift(), heading, s.abs(), &TraceOptions::default())?;
    let partial = delta_s_truncations(f, x, seg.end().project(), depth)?;
    fit_truncations(Bundle::Stable, partial, depth)
}

/// Normalized conditional density on a leaf window around a base point.
#[derive(Clone, Debug)]
pub struct LeafDensity {
    pub segment: LeafSegment,
    /// Density at the segment nodes with respect to arclength.
    pub values: Vec<f64>,
    /// `L(x) = ∫ Δ(x, y) dy` over the window.
    pub normalizer: f64,
}

impl LeafDensity {
    /// Density at arclength `s` by four-point Lagrange interpolation of the
    /// node values.
    pub fn value_at(&self, s: f64) -> f64 {
        let nodes = self.segment.nodes();
        let m = nodes.len();
        if m < 4 {
            let k = nodes.partition_point(|&t| t <= s).clamp(1, m.max(2) - 1);
            if m == 1 {
                return self.values[0];
            }
            let (s0, s1) = (nodes[k - 1], nodes[k]);
            let t = ((s - s0) / (s1 - s0)).clamp(0.0, 1.0);
            return self.values[k - 1] * (1.0 - t) + self.values[k] * t;
        }
        let s = s.clamp(0.0, self.segment.length());
        let k = nodes.partition_point(|&t| t <= s).clamp(2, m - 2) - 2;
        let mut acc = 0.0;
        for a in k..k + 4 {
            let mut w = 1.0;
            for b in k..k + 4 {
                if a != b {
                    w *= (s - nodes[b]) / (nodes[a] - nodes[b]);
                }
            }
            acc += w * self.values[a];
        }
        acc
    }

    /// `∫ρ ds` over `[s0, s1]` of the interpolated density, by 8-point
    /// Gauss–Legendre on panels no longer than 0.05.
    pub fn mass(&self, s0: f64, s1: f64) -> f64 {
        let panels = (((s1 - s0).abs() / 0.05).ceil() as usize).max(1);
        let h = (s1 - s0) / panels as f64;
        let mut total = 0.0;
        for p in 0..panels {
            let mid = s0 + (p as f64 + 0.5) * h;
            for &(x, w) in &GAUSS_8 {
                total += w * (self.value_at(mid + 0.5 * h * x) + self.value_at(mid - 0.5 * h * x));
            }
        }
        0.5 * h * total
    }
}

/// Leaf window of arclength `2·half_width` centred at `base`.
pub fn leaf_window<S: DirectionSource + ?Sized>(
    f: &ToralEndomorphism,
    src: &S,
    base: TorusPoint,
    half_width: f64,
    opts: &TraceOptions,
) -> Result<LeafSegment> {
    let lin = f.splitting();
    let axis = match src.bundle() {
        Bundle::Unstable => lin.e_u,
        Bundle::Stable => lin.e_s,
    };
    let back = trace(src, lin, base.lift(), linalg::scale(-1.0, axis), half_width, opts)?;
    let start = back.end();
    trace(src, lin, start.project().lift(), axis, 2.0 * half_width, opts)
}

fn density_on_window(
    seg: LeafSegment,
    delta: impl Fn(LiftPoint) -> Result<f64>,
) -> Result<LeafDensity> {
    let raw: Vec<f64> = seg.lifts().iter().map(|&y| delta(y)).collect::<Result<_>>()?;
    let mut failure = None;
    let normalizer = seg.integrate_lifts(
        |y| {
            delta(y).unwrap_or_else(|e| {
                failure.get_or_insert(e);
                f64::NAN
            })
        },
        0.05,
    );
    if let Some(e) = failure {
        return Err(e);
    }
    let values = raw.iter().map(|v| v / normalizer).collect();
    Ok(LeafDensity {
        segment: seg,
        values,
        normalizer,
    })
}

/// Integer translation taking the segment's lifts onto the leaf lift
/// through `x0`, found at the node nearest to `x0`.
fn leaf_offset(seg: &LeafSegment, x0: LiftPoint) -> Vec2 {
    let p = x0.project();
    let k = (0..seg.lifts().len())
        .min_by(|&a, &b| {
            let da = seg.lifts()[a].project().distance(&p);
            let db = seg.lifts()[b].project().distance(&p);
            da.total_cmp(&db)
        })
        .unwrap_or(0);
    let d = linalg::sub(x0.coords(), seg.lifts()[k].coords());
    [d[0].round(), d[1].round()]
}

fn unstable_density(
    f: &ToralEndomorphism,
    branch: &BackwardBranch,
    seg: LeafSegment,
    truncation: usize,
) -> Result<LeafDensity> {
    let offset = leaf_offset(&seg, branch.lifts()[0]);
    density_on_window(seg, |y| {
        let by = branch.paired_lift(f, y.translate(offset))?;
        Ok(delta_u(f, branch, &by, truncation)?.value)
    })
}

/// `ρᵘ(y) = Δᵘ(x, y)/L(x)` on the unstable window around `branch.base()`.
pub fn unstable_leaf_density<S: DirectionSource + ?Sized>(
    f: &ToralEndomorphism,
    src: &S,
    branch: &BackwardBranch,
    half_width: f64,
    truncation: usize,
    opts: &TraceOptions,
) -> Result<LeafDensity> {
    if src.bundle() != Bundle::Unstable {
        return Err(Error::InvalidArgument("unstable density needs unstable directions".into()));
    }
    let seg = leaf_window(f, src, branch.base(), half_width, opts)?;
    unstable_density(f, branch, seg, truncation)
}

/// Unstable density on a given segment, normalized to unit mass on it.
/// `branch` must sit on the segment's leaf.
pub fn unstable_density_on(
    f: &ToralEndomorphism,
    branch: &BackwardBranch,
    segment: LeafSegment,
    truncation: usize,
) -> Result<LeafDensity> {
    if segment.bundle() != Bundle::Unstable {
        return Err(Error::InvalidArgument("unstable density needs an unstable segment".into()));
    }
    unstable_density(f, branch, segment, truncation)
}

/// `ρˢ(y) = Δˢ(x, y)/L(x)` on the stable window around `base`.
pub fn stable_leaf_density<S: DirectionSource + ?Sized>(
    f: &ToralEndomorphism,
    src: &S,
    base: TorusPoint,
    half_width: f64,
    truncation: usize,
    opts: &TraceOptions,
) -> Result<LeafDensity> {
    if src.bundle() != Bundle::Stable {
        return Err(Error::InvalidArgument("stable density needs stable directions".into()));
    }
    if half_width > MAX_PAIR_DISTANCE {
        return Err(Error::InvalidArgument(format!(
            "stable window half-width must not exceed {MAX_PAIR_DISTANCE}"
        )));
    }
    let seg = leaf_window(f, src, base, half_width, opts)?;
    density_on_window(seg, |y| Ok(delta_s(f, base, y.project(), truncation)?.value))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct DensityOptions {
    pub grid: usize,
    pub cutoff: usize,
    pub max_period: u32,
    pub obstruction_tolerance: f64,
    pub residual_tolerance: f64,
    pub threads: usize,
}

impl Default for DensityOptions {
    fn default() -> Self {
        Self {
            grid: DEFAULT_GRID,
            cutoff: DEFAULT_CUTOFF,
            max_period: 3,
            obstruction_tolerance: 1e-4,
            residual_tolerance: 1e-3,
            threads: 0,
        }
    }
}

/// Axis-parallel box `[x1, x1 + w) × [x2, x2 + h)` on the torus.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct AxisBox {
    pub x1: f64,
    pub x2: f64,
    pub w: f64,
    pub h: f64,
}

impl AxisBox {
    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Midpoints of an `s × s` subdivision.
    fn samples(&self, s: usize) -> impl Iterator<Item = TorusPoint> + '_ {
        (0..s * s).map(move |k| {
            let (i, j) = (k / s, k % s);
            TorusPoint::new(
                self.x1 + (i as f64 + 0.5) * self.w / s as f64,
                self.x2 + (j as f64 + 0.5) * self.h / s as f64,
            )
        })
    }
}

/// Boxes with random corners and sides drawn from `sides`.
pub fn random_boxes<R: Rng>(rng: &mut R, count: usize, sides: &[f64]) -> Vec<AxisBox> {
    (0..count)
        .map(|_| {
            let side = sides[rng.gen_range(0..sides.len())];
            AxisBox {
                x1: rng.gen(),
                x2: rng.gen(),
                w: side,
                h: side,
            }
        })
        .collect()
}

/// Absolutely continuous probability measure with a density on the grid.
#[derive(Clone, Debug)]
pub struct MeasureOnGrid {
    /// Density with respect to Lebesgue, grid mean 1.
    pub density: GridField,
    /// Transfer function with `log Jf − log k = φ∘f − φ`.
    pub phi: GridField,
    pub sup_residual: f64,
}

impl MeasureOnGrid {
    pub fn uniform(n: usize) -> Self {
        Self {
            density: GridField::from_values(n, vec![1.0; n * n]).expect("grid size is valid"),
            phi: GridField::zeros(n),
            sup_residual: 0.0,
        }
    }

    /// Node weights summing to 1.
    pub fn weights(&self) -> Vec<f64> {
        let total = stats::sum(self.density.values().iter().copied());
        self.density.values().iter().map(|v| v / total).collect()
    }

    pub fn density_at(&self, p: TorusPoint) -> f64 {
        self.density.eval_cubic(p)
    }

    /// `ν(B)` by the midpoint rule on `s × s` subsamples.
    pub fn box_mass(&self, b: &AxisBox, s: usize) -> f64 {
        b.area() / (s * s) as f64 * stats::sum(b.samples(s).map(|p| self.density_at(p)))
    }

    /// `ν(f⁻¹B) = ∫_B Σ_{f z = y} ρ(z)/Jf(z) dy`.
    pub fn preimage_mass(&self, f: &ToralEndomorphism, b: &AxisBox, s: usize) -> Result<f64> {
        let mut acc = Vec::with_capacity(s * s);
        for y in b.samples(s) {
            let mut v = 0.0;
            for z in f.preimages(y)? {
                v += self.density_at(z) / f.jacobian(z).det().abs();
            }
            acc.push(v);
        }
        Ok(b.area() / (s * s) as f64 * stats::sum(acc))
    }
}

/// The invariant density `e^{−φ}` normalized to mass 1, where
/// `log Jf − log k = φ∘f − φ`.
pub fn invariant_density(f: &ToralEndomorphism, opts: &DensityOptions) -> Result<MeasureOnGrid> {
    if f.is_linear() {
        return Ok(MeasureOnGrid::uniform(opts.grid));
    }
    let solver = CohomologySolver::new(f, opts.grid, opts.cutoff, opts.threads)?;
    invariant_density_with(f, &solver, opts)
}

/// As [`invariant_density`], reusing an assembled solver for `f`.
pub fn invariant_density_with(
    f: &ToralEndomorphism,
    solver: &CohomologySolver,
    opts: &DensityOptions,
) -> Result<MeasureOnGrid> {
    let log_k = (f.degree() as f64).ln();
    let census = CensusOptions {
        threads: parallel::resolve_threads(opts.threads),
        ..CensusOptions::default()
    };
    for period in 1..=opts.max_period {
        for o in find_periodic_with(f, period, &census)?.orbits {
            let dev = (o.mean_log_jacobian(f) - log_k).abs();
            if dev > opts.obstruction_tolerance {
                return Err(Error::ObstructionNonzero {
                    period,
                    value: dev,
                    tolerance: opts.obstruction_tolerance,
                });
            }
        }
    }
    let n = solver.grid();
    let psi = GridField::from_fn(n, |p| f.log_jacobian(p) - log_k);
    let sol = solver.solve(&psi, opts.residual_tolerance)?;
    let raw: Vec<f64> = sol.phi.values().iter().map(|v| (-v).exp()).collect();
    let mean = stats::sum(raw.iter().copied()) / (n * n) as f64;
    let density = GridField::from_values(n, raw.iter().map(|v| v / mean).collect())?;
    Ok(MeasureOnGrid {
        density,
        phi: sol.phi,
        sup_residual: sol.sup_residual,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct BoxDefect {
    pub region: AxisBox,
    pub mass: f64,
    pub preimage_mass: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct InvarianceReport {
    pub subsamples: usize,
    pub boxes: Vec<BoxDefect>,
    pub max_defect: f64,
}

/// `|ν(f⁻¹B) − ν(B)|` over the given boxes.
pub fn invariance_defect(
    f: &ToralEndomorphism,
    measure: &MeasureOnGrid,
    boxes: &[AxisBox],
    subsamples: usize,
    threads: usize,
) -> Result<InvarianceReport> {
    let results = parallel::map_indexed(boxes.len(), parallel::resolve_threads(threads), |i| {
        let b = boxes[i];
        Ok(BoxDefect {
            region: b,
            mass: measure.box_mass(&b, subsamples),
            preimage_mass: measure.preimage_mass(f, &b, subsamples)?,
        })
    });
    let boxes = results.into_iter().collect::<Result<Vec<BoxDefect>>>()?;
    let max_defect = boxes
        .iter()
        .map(|b| (b.mass - b.preimage_mass).abs())
        .fold(0.0, f64::max);
    Ok(InvarianceReport {
        subsamples,
        boxes,
        max_defect,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SeparatedOptions {
    /// Points on the horizontal closed curve that is iterated.
    pub points: usize,
    pub epsilon: f64,
    pub min_n: usize,
    pub max_n: usize,
    /// Height of the curve `{x₂ = height}`.
    pub height: f64,
}

impl Default for SeparatedOptions {
    fn default() -> Self {
        Self {
            points: 1 << 20,
            epsilon: 1.0 / 64.0,
            min_n: 2,
            max_n: 7,
            height: 0.3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SeparatedEstimate {
    pub epsilon: f64,
    pub points: usize,
    /// `(n, size of the greedy (n, ε)-separated set)`.
    pub counts: Vec<(usize, u64)>,
    pub fit: LineFit,
    /// Slope of `log count` against `n`.
    pub entropy: f64,
}

/// Growth rate of `(n, ε)`-separated sets taken greedily, in curve order,
/// from a fine sample of a horizontal closed curve.
pub fn separated_entropy(f: &ToralEndomorphism, opts: &SeparatedOptions) -> Result<SeparatedEstimate> {
    if opts.min_n == 0 || opts.max_n <= opts.min_n || opts.points < 2 {
        return Err(Error::InvalidArgument(
            "separated-set estimate needs 0 < min_n < max_n and at least two points".into(),
        ));
    }
    let m = opts.points;
    let curve = |i: usize| TorusPoint::new(i as f64 / m as f64, opts.height);
    let mut counts = Vec::new();
    for n in opts.min_n..=opts.max_n {
        let first = f.orbit(curve(0), n - 1);
        let mut last = first.clone();
        let mut kept = 1_u64;
        let bowen = |a: &[TorusPoint], b: &[TorusPoint]| {
            a.iter().zip(b).map(|(p, q)| p.distance(q)).fold(0.0, f64::max)
        };
        for i in 1..m {
            let traj = f.orbit(curve(i), n - 1);
            if bowen(&traj, &last) >= opts.epsilon && bowen(&traj, &first) >= opts.epsilon {
                kept += 1;
                last = traj;
            }
        }
        counts.push((n, kept));
    }
    let x: Vec<f64> = counts.iter().map(|c| c.0 as f64).collect();
    let y: Vec<f64> = counts.iter().map(|c| (c.1 as f64).ln()).collect();
    let fit = fit_line(&x, &y);
    Ok(SeparatedEstimate {
        epsilon: opts.epsilon,
        points: m,
        counts,
        fit,
        entropy: fit.slope,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct BirkhoffOptions {
    pub orbits: usize,
    pub length: usize,
    pub burn_in: usize,
    pub seed: u64,
}

impl Default for BirkhoffOptions {
    fn default() -> Self {
        Self {
            orbits: 8,
            length: 10_000,
            burn_in: 100,
            seed: 0,
        }
    }
}

/// Birkhoff averages of `log ‖Df|Eᵘ‖` and `log ‖Df|Eˢ‖` over random orbits.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BirkhoffStats {
    pub lambda_u: f64,
    pub lambda_s: f64,
    pub per_orbit_u: Vec<f64>,
    pub per_orbit_s: Vec<f64>,
    pub stderr_u: f64,
    pub stderr_s: f64,
    /// Largest difference between first-half and full-length averages.
    pub half_drift: f64,
}

fn exponents_along(f: &ToralEndomorphism, x: TorusPoint, opts: &BirkhoffOptions) -> (f64, f64, f64) {
    let total = opts.burn_in + opts.length;
    let orbit = f.orbit(x, total + STABLE_PAD);
    let lin = f.splitting();
    let (du, _) = push_forward_along(f, &orbit, lin.e_u);
    let (ds, _) = pull_back_along(f, &orbit, lin.e_s);
    let logs = |dirs: &[linalg::Vec2], range: std::ops::Range<usize>| {
        stats::sum(range.map(|k| linalg::norm(f.jacobian(orbit[k]).mul_vec(dirs[k])).ln()))
    };
    let half = opts.burn_in + opts.length / 2;
    let lu = logs(&du, opts.burn_in..total) / opts.length as f64;
    let ls = logs(&ds, opts.burn_in..total) / opts.length as f64;
    let hu = logs(&du, opts.burn_in..half) / (opts.length / 2) as f64;
    let hs = logs(&ds, opts.burn_in..half) / (opts.length / 2) as f64;
    (lu, ls, (hu - lu).abs().max((hs - ls).abs()))
}

pub fn birkhoff_exponents(f: &ToralEndomorphism, opts: &BirkhoffOptions, threads: usize) -> Result<BirkhoffStats> {
    if opts.orbits == 0 || opts.length < 2 {
        return Err(Error::InvalidArgument("need at least one orbit of length ≥ 2".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let starts: Vec<TorusPoint> = (0..opts.orbits).map(|_| TorusPoint::new(rng.gen(), rng.gen())).collect();
    let res = parallel::map_indexed(starts.len(), parallel::resolve_threads(threads), |i| {
        exponents_along(f, starts[i], opts)
    });
    let per_orbit_u: Vec<f64> = res.iter().map(|r| r.0).collect();
    let per_orbit_s: Vec<f64> = res.iter().map(|r| r.1).collect();
    let half_drift = res.iter().map(|r| r.2).fold(0.0, f64::max);
    let stderr = |v: &[f64]| {
        if v.len() < 2 {
            return 0.0;
        }
        let m = stats::mean(v);
        let var = stats::sum(v.iter().map(|x| (x - m) * (x - m))) / (v.len() - 1) as f64;
        (var / v.len() as f64).sqrt()
    };
    Ok(BirkhoffStats {
        lambda_u: stats::mean(&per_orbit_u),
        lambda_s: stats::mean(&per_orbit_s),
        stderr_u: stderr(&per_orbit_u),
        stderr_s: stderr(&per_orbit_s),
        per_orbit_u,
        per_orbit_s,
        half_drift,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IdentityCheck {
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl IdentityCheck {
    fn new(name: &str, value: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            value,
            tolerance,
            passed: value.abs() <= tolerance,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EntropyOptions {
    pub birkhoff: BirkhoffOptions,
    pub separated: SeparatedOptions,
    /// Tolerance of `λᵘ + λˢ = log k`; `None` uses 1e−6 for linear models and
    /// 1e−3 otherwise.
    pub balance_tolerance: Option<f64>,
    pub entropy_tolerance: f64,
    pub threads: usize,
}

impl Default for EntropyOptions {
    fn default() -> Self {
        Self {
            birkhoff: BirkhoffOptions::default(),
            separated: SeparatedOptions::default(),
            balance_tolerance: None,
            entropy_tolerance: 0.15,
            threads: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EntropyReport {
    pub lambda_u: f64,
    pub lambda_s: f64,
    pub log_k: f64,
    /// `h⁺ = λᵘ`.
    pub h_plus: f64,
    /// `h⁻ = log k − λˢ`.
    pub h_minus: f64,
    pub birkhoff: BirkhoffStats,
    pub separated: SeparatedEstimate,
    pub checks: Vec<IdentityCheck>,
    pub passed: bool,
}

/// Exponents, entropies and the identities relating them. Failed identities
/// are flagged in the report rather than returned as errors.
pub fn entropy_report(f: &ToralEndomorphism, opts: &EntropyOptions) -> Result<EntropyReport> {
    let birkhoff = birkhoff_exponents(f, &opts.birkhoff, opts.threads)?;
    let separated = separated_entropy(f, &opts.separated)?;
    let log_k = (f.degree() as f64).ln();
    let (lu, ls) = (birkhoff.lambda_u, birkhoff.lambda_s);
    let tol = opts
        .balance_tolerance
        .unwrap_or(if f.is_linear() { 1e-6 } else { 1e-3 });
    let h_plus = lu;
    let h_minus = log_k - ls;
    let checks = vec![
        IdentityCheck::new("exponent_balance", lu + ls - log_k, tol),
        IdentityCheck::new("forward_backward_entropy", h_plus - h_minus, tol),
        IdentityCheck::new("separated_set_entropy", separated.entropy - lu, opts.entropy_tolerance),
    ];
    let passed = checks.iter().all(|c| c.passed);
    Ok(EntropyReport {
        lambda_u: lu,
        lambda_s: ls,
        log_k,
        h_plus,
        h_minus,
        birkhoff,
        separated,
        checks,
        passed,
    })
}

/// Eigenvalue splitting of an integer `d × d` matrix.
#[derive(Clone, Debug, Serialize)]
pub struct LinearSpectrum {
    pub dimension: usize,
    /// `(re, im)` pairs sorted by decreasing modulus.
    pub eigenvalues: Vec<[f64; 2]>,
    pub moduli: Vec<f64>,
    pub unstable: usize,
    pub stable: usize,
    pub central: usize,
    pub hyperbolic: bool,
    /// All eigenvalues real and pairwise distinct.
    pub simple_real: bool,
    pub degree: i64,
    /// `Σ log|β_i| = log|det|`.
    pub log_det: f64,
    /// `Σ log⁺|β_i|`, the topological entropy of the linear map.
    pub entropy: f64,
}

/// Eigenvalue diagnostics for an integer matrix given by rows.
pub fn linear_spectrum(rows: &[Vec<i64>]) -> Result<LinearSpectrum> {
    let d = rows.len();
    if d == 0 || rows.iter().any(|r| r.len() != d) {
        return Err(Error::InvalidArgument("spectrum needs a non-empty square matrix".into()));
    }
    let m = nalgebra::DMatrix::from_fn(d, d, |i, j| rows[i][j] as f64);
    let det = m.determinant().round() as i64;
    if det == 0 {
        return Err(Error::InvalidArgument("matrix is singular".into()));
    }
    let mut eig: Vec<[f64; 2]> = m.complex_eigenvalues().iter().map(|z| [z.re, z.im]).collect();
    eig.sort_by(|a, b| b[0].hypot(b[1]).total_cmp(&a[0].hypot(a[1])).then(b[0].total_cmp(&a[0])));
    let moduli: Vec<f64> = eig.iter().map(|z| z[0].hypot(z[1])).collect();
    let tol = 1e-9;
    let unstable = moduli.iter().filter(|&&r| r > 1.0 + tol).count();
    let stable = moduli.iter().filter(|&&r| r < 1.0 - tol).count();
    let central = d - unstable - stable;
    let scale = moduli[0].max(1.0);
    let real = eig.iter().all(|z| z[1].abs() <= tol * scale);
    let distinct = eig
        .iter()
        .enumerate()
        .all(|(i, a)| eig[i + 1..].iter().all(|b| (a[0] - b[0]).hypot(a[1] - b[1]) > 1e-7 * scale));
    Ok(LinearSpectrum {
        dimension: d,
        eigenvalues: eig,
        log_det: moduli.iter().map(|r| r.ln()).sum(),
        entropy: moduli.iter().map(|r| r.ln().max(0.0)).sum(),
        moduli,
        unstable,
        stable,
        central,
        hyperbolic: central == 0,
        simple_real: real && distinct,
        degree: det.abs(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bundles::unstable_neighbor;
    use crate::model::reference;
    use crate::testutil;
    use proptest::prelude::*;
    use rand::Rng;
    use std::sync::OnceLock;

    fn conj_density() -> &'static MeasureOnGrid {
        static M: OnceLock<MeasureOnGrid> = OnceLock::new();
        M.get_or_init(|| invariant_density(testutil::conjugated(), &DensityOptions::default()).unwrap())
    }

    /// `‖Dh0(h0⁻¹ p) e‖`.
    fn stretch(p: TorusPoint, e: linalg::Vec2) -> f64 {
        let h = reference::warp();
        linalg::norm(h.diffeo_jacobian(h.diffeo_inverse(p.coords())).mul_vec(e))
    }

    fn warp_det(p: TorusPoint) -> f64 {
        let h = reference::warp();
        h.diffeo_jacobian(h.diffeo_inverse(p.coords())).det().abs()
    }

    /// `h0(h0⁻¹ x + s e_s)`, exactly on the stable leaf of `x`.
    fn stable_partner(x: TorusPoint, s: f64) -> TorusPoint {
        let h = reference::warp();
        let e = testutil::conjugated().splitting().e_s;
        TorusPoint::from(h.diffeo_apply(linalg::add(h.diffeo_inverse(x.coords()), linalg::scale(s, e))))
    }

    #[test]
    fn linear_products_are_one() {
        let f = reference::linear();
        let x = TorusPoint::new(0.1, 0.2);
        let bx = BackwardBranch::zero(&f, x, 30).unwrap();
        let y = unstable_neighbor(&f, &bx, 0.2, 10).unwrap();
        let by = bx.paired(&f, y).unwrap();
        assert!((delta_u(&f, &bx, &by, 30).unwrap().value - 1.0).abs() < 1e-15);
        let z = TorusPoint::from(linalg::add(x.coords(), linalg::scale(0.03, f.splitting().e_s)));
        assert!((delta_s(&f, x, z, 60).unwrap().value - 1.0).abs() < 1e-15);
    }

    #[test]
    fn identical_points_give_one() {
        let f = testutil::trig005();
        let x = TorusPoint::new(0.77, 0.05);
        let bx = BackwardBranch::zero(f, x, 30).unwrap();
        let d = delta_u(f, &bx, &bx.clone(), 30).unwrap();
        assert_eq!(d.value, 1.0);
        assert_eq!(d.terms, 2);
        assert_eq!(delta_s(f, x, x, 60).unwrap().value, 1.0);
    }

    #[test]
    fn mismatched_branches_are_rejected() {
        let f = testutil::conjugated();
        let x = TorusPoint::new(0.3, 0.3);
        let bx = BackwardBranch::zero(f, x, 20).unwrap();
        let mut choices = vec![0; 20];
        choices[4] = 1;
        let by = BackwardBranch::new(f, x, choices).unwrap();
        assert!(matches!(delta_u(f, &bx, &by, 20), Err(Error::BranchMismatch(_))));
    }

    #[test]
    fn off_leaf_pair_separates() {
        let f = testutil::conjugated();
        let x = TorusPoint::new(0.3, 0.6);
        let y = TorusPoint::from(linalg::add(x.coords(), linalg::scale(0.01, f.splitting().e_u)));
        assert!(matches!(delta_s(f, x, y, 80), Err(Error::PairSeparation { .. })));
    }

    #[test]
    fn truncations_converge_geometrically() {
        let f = testutil::trig005();
        let x = TorusPoint::new(0.42, 0.17);
        let bx = BackwardBranch::zero(f, x, 60).unwrap();
        let y = unstable_neighbor(f, &bx, 0.2, 20).unwrap();
        let by = bx.paired(f, y).unwrap();
        let partial = delta_u_truncations(f, &bx, &by, 35).unwrap();
        // Past the closest approach of the paired points the differences
        // measure off-leaf rounding, not the tail.
        let (px, py) = (bx.points(), by.points());
        let floor = (1..=35)
            .min_by(|&a, &b| px[a].distance(&py[a]).total_cmp(&px[b].distance(&py[b])))
            .unwrap();
        let last = 30.min(floor - 5);
        assert!(last >= 12);
        let ks: Vec<f64> = (5..=last).map(|k| k as f64).collect();
        let diffs: Vec<f64> = (5..=last).map(|k| (partial[k - 1] - partial[k + 4]).abs()).collect();
        let logs: Vec<f64> = diffs.iter().map(|d| d.ln()).collect();
        let theta = fit_line(&ks, &logs).slope.exp();
        let expected = 1.0 / f.splitting().lambda_u;
        assert!((theta - expected).abs() < 0.1, "θ = {theta}, 1/λ = {expected}");
        let c = ks.iter().zip(&diffs).map(|(k, d)| d / theta.powf(*k)).fold(0.0, f64::max);
        assert!(c < 1.0, "envelope constant {c}");
    }

    #[test]
    fn truncation_fits_are_geometric() {
        for f in [testutil::conjugated(), testutil::trig005()] {
            let u = unstable_truncation_fit(f, TorusPoint::new(0.42, 0.17), 0.2, 60).unwrap();
            assert!(u.theta < 1.0 && u.fit.unwrap().r_squared > 0.95, "{:?}", u.fit);
            let s = stable_truncation_fit(f, TorusPoint::new(0.42, 0.17), 0.03, 60).unwrap();
            assert!(s.theta < 1.0 && s.fit.unwrap().r_squared > 0.95, "{:?}", s.fit);
            // Rate of approach of paired points: 1/λᵘ backward, |λˢ| forward.
            let split = f.splitting();
            assert!((u.theta - 1.0 / split.lambda_u.abs()).abs() < 0.1, "{}", u.theta);
            assert!((s.theta - split.lambda_s.abs()).abs() < 0.1, "{}", s.theta);
        }
        let a = reference::linear();
        let u = unstable_truncation_fit(&a, TorusPoint::new(0.42, 0.17), 0.2, 60).unwrap();
        assert!(u.fit.is_none() && u.partial.iter().all(|p| *p == 1.0));
        assert!(stable_truncation_fit(&a, TorusPoint::new(0.42, 0.17), 0.03, 60).unwrap().fit.is_none());
    }

    #[test]
    fn unstable_density_satisfies_the_cocycle() {
        let f = testutil::conjugated();
        let src = ExactDirections::new(f, Bundle::Unstable, 30);
        let x = TorusPoint::new(0.61, 0.29);
        let bx = BackwardBranch::zero(f, x, 40).unwrap();
        let dens = unstable_leaf_density(f, &src, &bx, 0.25, 40, &TraceOptions::default()).unwrap();
        assert!(dens.values.iter().all(|v| *v > 0.0));
        let s = dens.segment.nodes();
        let trap: f64 = (1..s.len()).map(|i| 0.5 * (s[i] - s[i - 1]) * (dens.values[i] + dens.values[i - 1])).sum();
        assert!((trap - 1.0).abs() < 1e-6);
        let pts = dens.segment.points();
        let e_u = f.splitting().e_u;
        for (iy, iz) in [(0, 499), (120, 380), (250, 251)] {
            let bz = bx.paired(f, pts[iz]).unwrap();
            let by = bz.paired(f, pts[iy]).unwrap();
            let direct = delta_u(f, &bz, &by, 40).unwrap().value;
            let ratio = dens.values[iy] / dens.values[iz];
            assert!((ratio - direct).abs() < 1e-8, "{ratio} vs {direct}");
            // Conditional densities of the pushed-forward Lebesgue measure.
            let oracle = stretch(pts[iz], e_u) / stretch(pts[iy], e_u);
            assert!((ratio - oracle).abs() < 1e-10);
        }
    }

    #[test]
    fn stable_density_satisfies_the_cocycle() {
        let f = testutil::conjugated();
        let src = ExactDirections::new(f, Bundle::Stable, 40);
        let x = TorusPoint::new(0.15, 0.85);
        let dens = stable_leaf_density(f, &src, x, 0.04, 80, &TraceOptions::default()).unwrap();
        let pts = dens.segment.points();
        let (iy, iz) = (3, pts.len() / 2 + 5);
        let direct = delta_s(f, pts[iz], pts[iy], 80).unwrap().value;
        assert!((dens.values[iy] / dens.values[iz] - direct).abs() < 1e-8);
        assert!(matches!(
            stable_leaf_density(f, &src, x, 0.2, 80, &TraceOptions::default()),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn linear_measure_is_uniform() {
        let m = invariant_density(&reference::linear(), &DensityOptions::default()).unwrap();
        assert!(m.density.values().iter().all(|v| *v == 1.0));
        assert_eq!(m.phi.sup_norm(), 0.0);
        let w = m.weights();
        assert!((stats::sum(w.iter().copied()) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn conjugated_density_is_the_pushed_lebesgue_density() {
        let m = conj_density();
        let oracle = GridField::from_fn(256, |p| 1.0 / warp_det(p));
        let mean = oracle.mean();
        let worst = m
            .density
            .values()
            .iter()
            .zip(oracle.values())
            .map(|(a, b)| (a - b / mean).abs() * mean / b)
            .fold(0.0, f64::max);
        assert!(worst < 1e-3, "relative error {worst:e}");
        assert!((stats::sum(m.weights()) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn conjugated_density_is_invariant_on_random_boxes() {
        let f = testutil::conjugated();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let boxes = random_boxes(&mut rng, 200, &[1.0 / 8.0, 1.0 / 16.0, 1.0 / 32.0]);
        let rep = invariance_defect(f, conj_density(), &boxes, 64, 1).unwrap();
        assert!(rep.max_defect < 1e-4, "{}", rep.max_defect);
        // Lebesgue measure is not invariant for this model.
        let flat = invariance_defect(f, &MeasureOnGrid::uniform(256), &boxes[..20], 64, 1).unwrap();
        assert!(flat.max_defect > 1e-4);
    }

    #[test]
    fn nonconstant_jacobian_data_is_an_obstruction() {
        let err = invariant_density(testutil::trig005(), &DensityOptions::default()).unwrap_err();
        assert!(matches!(err, Error::ObstructionNonzero { .. }));
    }

    #[test]
    fn linear_entropy_identities() {
        let opts = EntropyOptions {
            birkhoff: BirkhoffOptions {
                orbits: 2,
                ..BirkhoffOptions::default()
            },
            ..EntropyOptions::default()
        };
        let rep = entropy_report(&reference::linear(), &opts).unwrap();
        let lu = (2.0 + 2f64.sqrt()).ln();
        assert!((rep.lambda_u - lu).abs() < 1e-12);
        assert!((rep.lambda_s + (2.0 + 2f64.sqrt()).ln() - 2f64.ln()).abs() < 1e-12);
        assert!((rep.lambda_s - (-0.534800)).abs() < 1e-6);
        assert!((rep.log_k - 2f64.ln()).abs() < 1e-15);
        assert!((rep.h_plus - rep.h_minus).abs() < 1e-12);
        assert!((1.08..=1.38).contains(&rep.separated.entropy), "{}", rep.separated.entropy);
        assert!(rep.passed);
    }

    #[test]
    fn conjugated_entropy_identities() {
        let rep = entropy_report(testutil::conjugated(), &EntropyOptions::default()).unwrap();
        assert!((rep.lambda_u - 1.227947).abs() < 1e-3);
        assert!((rep.lambda_s + 0.534800).abs() < 1e-3);
        assert!((rep.lambda_u + rep.lambda_s - rep.log_k).abs() < 1e-3);
        assert!(rep.birkhoff.half_drift < 1e-3);
        assert!(rep.passed, "{:?}", rep.checks);
    }

    #[test]
    fn separated_counts_grow_with_n() {
        let opts = SeparatedOptions {
            points: 1 << 14,
            max_n: 4,
            ..SeparatedOptions::default()
        };
        let est = separated_entropy(testutil::trig005(), &opts).unwrap();
        assert!(est.counts.windows(2).all(|w| w[1].1 > w[0].1));
        assert!(separated_entropy(testutil::trig005(), &SeparatedOptions { min_n: 3, max_n: 3, ..opts }).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]

        #[test]
        fn unstable_product_matches_telescoping(x1 in 0.0..1.0f64, x2 in 0.0..1.0f64, t in -0.3..0.3f64) {
            let f = testutil::conjugated();
            let x = TorusPoint::new(x1, x2);
            let bx = BackwardBranch::zero(f, x, 50).unwrap();
            let y = unstable_neighbor(f, &bx, t, 20).unwrap();
            let by = bx.paired(f, y).unwrap();
            let d = delta_u(f, &bx, &by, 50).unwrap();
            let e = f.splitting().e_u;
            prop_assert!((d.value - stretch(x, e) / stretch(y, e)).abs() < 1e-10);
            prop_assert!(d.tail_bound < 1e-10);
        }

        #[test]
        fn stable_product_matches_telescoping(x1 in 0.0..1.0f64, x2 in 0.0..1.0f64, s in -0.04..0.04f64) {
            let f = testutil::conjugated();
            let x = TorusPoint::new(x1, x2);
            let y = stable_partner(x, s);
            let d = delta_s(f, x, y, 80).unwrap();
            let e = f.splitting().e_s;
            let oracle = warp_det(y) * stretch(y, e) / (warp_det(x) * stretch(x, e));
            prop_assert!((d.value - oracle).abs() < 1e-10, "{} vs {}", d.value, oracle);
        }

        #[test]
        fn unstable_product_is_multiplicative(seed in any::<u64>()) {
            let f = testutil::trig005();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = TorusPoint::new(rng.gen(), rng.gen());
            let bx = BackwardBranch::zero(f, x, 50).unwrap();
            let y = unstable_neighbor(f, &bx, rng.gen_range(-0.2..0.2), 20).unwrap();
            let z = unstable_neighbor(f, &bx, rng.gen_range(-0.2..0.2), 20).unwrap();
            let (by, bz) = (bx.paired(f, y).unwrap(), bx.paired(f, z).unwrap());
            let xy = delta_u(f, &bx, &by, 50).unwrap().value;
            let yz = delta_u(f, &by, &bz, 50).unwrap().value;
            let xz = delta_u(f, &bx, &bz, 50).unwrap().value;
            prop_assert!((xy * yz - xz).abs() < 1e-10);
        }
    }

    #[test]
    fn cat_matrix_spectrum() {
        let sp = linear_spectrum(&[vec![3, 1], vec![1, 1]]).unwrap();
        let lu = (2.0 + 2f64.sqrt()).ln();
        assert!((sp.entropy - lu).abs() < 1e-12);
        assert!((sp.log_det - 2f64.ln()).abs() < 1e-12);
        assert_eq!((sp.unstable, sp.stable, sp.degree), (1, 1, 2));
        assert!(sp.hyperbolic && sp.simple_real);
    }

    #[test]
    fn triangular_spectrum_reads_the_diagonal() {
        let sp = linear_spectrum(&[vec![5, 1, 7], vec![0, -2, 3], vec![0, 0, 1]]).unwrap();
        assert_eq!((sp.unstable, sp.stable, sp.central), (2, 0, 1));
        assert!(!sp.hyperbolic);
        assert!((sp.entropy - (5f64.ln() + 2f64.ln())).abs() < 1e-12);
        assert_eq!(sp.degree, 10);
        let rotation = linear_spectrum(&[vec![0, -1], vec![1, 0]]).unwrap();
        assert!(!rotation.simple_real && rotation.central == 2);
        assert!(linear_spectrum(&[vec![1, 2], vec![2, 4]]).is_err());
    }
}
