//! Stable and unstable leaves traced as arclength-parametrized curves in the
//! lift, with Gauss–Legendre quadrature along them.

use serde::Serialize;

use crate::bundles::{stable_direction_at, unstable_direction_at, Bundle, DirectionField};
use crate::error::{Error, Result};
use crate::linalg::{self, LinearSplitting, Vec2};
use crate::model::ToralEndomorphism;
use crate::torus::{LiftPoint, TorusPoint};

/// Anything that can report the (unsigned) leaf direction at a point.
pub trait DirectionSource {
    fn bundle(&self) -> Bundle;
    fn direction(&self, p: TorusPoint) -> Result<Vec2>;
}

impl DirectionSource for DirectionField {
    fn bundle(&self) -> Bundle {
        DirectionField::bundle(self)
    }

    fn direction(&self, p: TorusPoint) -> Result<Vec2> {
        Ok(self.at(p))
    }
}

/// Directions computed on demand from backward branches (unstable, all-zero
/// coset convention) or forward orbits (stable).
#[derive(Clone, Copy, Debug)]
pub struct ExactDirections<'a> {
    f: &'a ToralEndomorphism,
    bundle: Bundle,
    depth: usize,
}

impl<'a> ExactDirections<'a> {
    pub fn new(f: &'a ToralEndomorphism, bundle: Bundle, depth: usize) -> Self {
        Self { f, bundle, depth }
    }
}

impl DirectionSource for ExactDirections<'_> {
    fn bundle(&self) -> Bundle {
        self.bundle
    }

    fn direction(&self, p: TorusPoint) -> Result<Vec2> {
        match self.bundle {
            Bundle::Unstable => unstable_direction_at(self.f, p, self.depth),
            Bundle::Stable => stable_direction_at(self.f, p, self.depth),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TraceOptions {
    /// Maximal arclength step of the RK4 integrator.
    pub step: f64,
    pub max_length: f64,
    /// Largest accepted distance between a traced endpoint and its target.
    pub tolerance: f64,
    /// Tangents must stay within this angle of the linear eigendirection.
    pub cone_half_angle: f64,
}

impl Default for TraceOptions {
    fn default() -> Self {
        Self {
            step: 1e-3,
            max_length: 5.0,
            tolerance: 1e-6,
            cone_half_angle: 0.3,
        }
    }
}

/// A leaf piece `s ↦ x(s)` sampled at increasing arclengths, with unit
/// tangents at the nodes. Lifts are continuous from the base.
#[derive(Clone, Debug, PartialEq)]
pub struct LeafSegment {
    bundle: Bundle,
    arclength: Vec<f64>,
    lifts: Vec<LiftPoint>,
    tangents: Vec<Vec2>,
}

impl LeafSegment {
    pub fn base(&self) -> TorusPoint {
        self.lifts[0].project()
    }

    pub fn bundle(&self) -> Bundle {
        self.bundle
    }

    pub fn nodes(&self) -> &[f64] {
        &self.arclength
    }

    pub fn lifts(&self) -> &[LiftPoint] {
        &self.lifts
    }

    pub fn points(&self) -> Vec<TorusPoint> {
        self.lifts.iter().map(LiftPoint::project).collect()
    }

    pub fn tangents(&self) -> &[Vec2] {
        &self.tangents
    }

    pub fn length(&self) -> f64 {
        *self.arclength.last().unwrap()
    }

    pub fn start(&self) -> LiftPoint {
        self.lifts[0]
    }

    pub fn end(&self) -> LiftPoint {
        *self.lifts.last().unwrap()
    }

    pub fn max_spacing(&self) -> f64 {
        self.arclength
            .windows(2)
            .fold(0.0, |m: f64, w| m.max(w[1] - w[0]))
    }

    /// Cubic Hermite position at arclength `s`, clamped to the segment.
    pub fn position(&self, s: f64) -> LiftPoint {
        let s = s.clamp(0.0, self.length());
        let k = self
            .arclength
            .partition_point(|&t| t <= s)
            .clamp(1, self.arclength.len() - 1)
            - 1;
        let h = self.arclength[k + 1] - self.arclength[k];
        if h == 0.0 {
            return self.lifts[k];
        }
        let t = (s - self.arclength[k]) / h;
        let (t2, t3) = (t * t, t * t * t);
        let h00 = 2.0 * t3 - 3.0 * t2 + 1.0;
        let h10 = t3 - 2.0 * t2 + t;
        let h01 = -2.0 * t3 + 3.0 * t2;
        let h11 = t3 - t2;
        let (p0, p1) = (self.lifts[k].coords(), self.lifts[k + 1].coords());
        let (m0, m1) = (self.tangents[k], self.tangents[k + 1]);
        LiftPoint::new(
            h00 * p0[0] + h10 * h * m0[0] + h01 * p1[0] + h11 * h * m1[0],
            h00 * p0[1] + h10 * h * m0[1] + h01 * p1[1] + h11 * h * m1[1],
        )
    }

    /// `∫ w(x(s)) ds` by 8-point Gauss–Legendre on panels of length ≤ 0.05.
    pub fn integrate(&self, w: impl FnMut(TorusPoint) -> f64) -> f64 {
        self.integrate_with(w, PANEL)
    }

    /// As [`integrate`](Self::integrate) with panels of length ≤ `panel`.
    pub fn integrate_with(&self, mut w: impl FnMut(TorusPoint) -> f64, panel: f64) -> f64 {
        self.integrate_lifts(|x| w(x.project()), panel)
    }

    /// As [`integrate_with`](Self::integrate_with), handing `w` the lift
    /// continuous along the segment.
    pub fn integrate_lifts(&self, mut w: impl FnMut(LiftPoint) -> f64, panel: f64) -> f64 {
        let len = self.length();
        if len == 0.0 {
            return 0.0;
        }
        let panels = (len / panel).ceil().max(1.0) as usize;
        let h = len / panels as f64;
        let mut total = 0.0;
        for p in 0..panels {
            let mid = (p as f64 + 0.5) * h;
            let mut acc = 0.0;
            for (x, wt) in GAUSS_8 {
                for sign in [-1.0, 1.0] {
                    acc += wt * w(self.position(mid + sign * 0.5 * h * x));
                }
            }
            total += 0.5 * h * acc;
        }
        total
    }
}

const PANEL: f64 = 0.05;

/// Positive nodes and weights of the 8-point Gauss–Legendre rule on [−1, 1].
pub(crate) const GAUSS_8: [(f64, f64); 4] = [
    (0.183_434_642_495_649_8, 0.362_683_783_378_362_0),
    (0.525_532_409_916_329_0, 0.313_706_645_877_887_3),
    (0.796_666_477_413_626_7, 0.222_381_034_453_374_5),
    (0.960_289_856_497_536_2, 0.101_228_536_290_376_3),
];

fn orient(v: Vec2, reference: Vec2) -> Vec2 {
    if linalg::dot(v, reference) < 0.0 {
        linalg::scale(-1.0, v)
    } else {
        v
    }
}

struct Tracer<'a, S: DirectionSource + ?Sized> {
    src: &'a S,
    axis: Vec2,
    opts: TraceOptions,
}

impl<S: DirectionSource + ?Sized> Tracer<'_, S> {
    fn dir(&self, x: LiftPoint, reference: Vec2) -> Result<Vec2> {
        Ok(orient(self.src.direction(x.project())?, reference))
    }

    fn check_cone(&self, t: Vec2, s: f64) -> Result<()> {
        let angle = linalg::line_angle(t, self.axis);
        if angle > self.opts.cone_half_angle {
            return Err(Error::LeafTraceFailure(format!(
                "tangent left the cone (angle {angle:.3}) at arclength {s:.4}"
            )));
        }
        Ok(())
    }

    fn rk4(&self, x: LiftPoint, t: Vec2, h: f64) -> Result<(LiftPoint, Vec2)> {
        let k1 = self.dir(x, t)?;
        let k2 = self.dir(x.translate(linalg::scale(0.5 * h, k1)), k1)?;
        let k3 = self.dir(x.translate(linalg::scale(0.5 * h, k2)), k2)?;
        let k4 = self.dir(x.translate(linalg::scale(h, k3)), k3)?;
        let inc = [
            (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0]) / 6.0,
            (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1]) / 6.0,
        ];
        let y = x.translate(linalg::scale(h, inc));
        let ty = self.dir(y, k4)?;
        Ok((y, ty))
    }
}

fn axis_of(lin: &LinearSplitting, bundle: Bundle) -> Vec2 {
    match bundle {
        Bundle::Unstable => lin.e_u,
        Bundle::Stable => lin.e_s,
    }
}

/// Trace `length` units of arclength from `start`, leaving in the direction
/// closest to `heading`. Tangents are kept in a cone around the matching
/// eigendirection of `lin`.
pub fn trace<S: DirectionSource + ?Sized>(
    src: &S,
    lin: &LinearSplitting,
    start: LiftPoint,
    heading: Vec2,
    length: f64,
    opts: &TraceOptions,
) -> Result<LeafSegment> {
    if !(length >= 0.0 && length <= opts.max_length) || opts.step <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "leaf length {length} must lie in [0, {}]",
            opts.max_length
        )));
    }
    let tr = Tracer {
        src,
        axis: axis_of(lin, src.bundle()),
        opts: *opts,
    };
    let steps = ((length / opts.step).ceil() as usize).max(1);
    let h = length / steps as f64;
    let mut t = tr.dir(start, heading)?;
    tr.check_cone(t, 0.0)?;
    let mut seg = LeafSegment {
        bundle: src.bundle(),
        arclength: vec![0.0],
        lifts: vec![start],
        tangents: vec![t],
    };
    if length == 0.0 {
        return Ok(seg);
    }
    let mut x = start;
    for k in 1..=steps {
        (x, t) = tr.rk4(x, t, h)?;
        let s = k as f64 * h;
        tr.check_cone(t, s)?;
        seg.arclength.push(s);
        seg.lifts.push(x);
        seg.tangents.push(t);
    }
    Ok(seg)
}

/// Trace from `start` along the leaf until the point closest to `target`
/// (both in the lift) and fail if it misses by more than `opts.tolerance`.
pub fn trace_to<S: DirectionSource + ?Sized>(
    src: &S,
    lin: &LinearSplitting,
    start: LiftPoint,
    target: LiftPoint,
    opts: &TraceOptions,
) -> Result<LeafSegment> {
    let tr = Tracer {
        src,
        axis: axis_of(lin, src.bundle()),
        opts: *opts,
    };
    let mut t = tr.dir(start, linalg::sub(target.coords(), start.coords()))?;
    tr.check_cone(t, 0.0)?;
    let mut seg = LeafSegment {
        bundle: src.bundle(),
        arclength: vec![0.0],
        lifts: vec![start],
        tangents: vec![t],
    };
    let mut x = start;
    let mut s = 0.0;
    let remaining = |x: LiftPoint, t: Vec2| linalg::dot(linalg::sub(target.coords(), x.coords()), t);
    loop {
        let g = remaining(x, t);
        if g <= 0.0 {
            break;
        }
        // Keep half a step in reserve so a full step never overshoots.
        let last = g <= opts.step;
        let h = if last { g } else { opts.step.min(g - 0.5 * opts.step) };
        if s + h > opts.max_length {
            return Err(Error::LeafTraceFailure(format!(
                "target not reached within arclength {}",
                opts.max_length
            )));
        }
        let (mut y, mut ty) = tr.rk4(x, t, h)?;
        let mut hh = h;
        if last {
            // Final partial step: adjust its length until the target is abeam.
            for _ in 0..3 {
                let gy = remaining(y, ty);
                hh += gy;
                (y, ty) = tr.rk4(x, t, hh)?;
            }
        }
        s += hh;
        tr.check_cone(ty, s)?;
        (x, t) = (y, ty);
        seg.arclength.push(s);
        seg.lifts.push(x);
        seg.tangents.push(t);
        if last {
            break;
        }
    }
    let miss = x.distance(&target);
    if miss > opts.tolerance {
        return Err(Error::LeafTraceFailure(format!(
            "leaf from ({:.6}, {:.6}) misses its target by {miss:.3e}",
            start.u1, start.u2
        )));
    }
    Ok(seg)
}

/// Trace the leaf piece joining two torus points, searching both directions
/// from `a` up to `opts.max_length`.
pub fn trace_between<S: DirectionSource + ?Sized>(
    src: &S,
    lin: &LinearSplitting,
    a: TorusPoint,
    b: TorusPoint,
    opts: &TraceOptions,
) -> Result<LeafSegment> {
    let axis = axis_of(lin, src.bundle());
    let mut best: Option<LeafSegment> = None;
    for heading in [axis, linalg::scale(-1.0, axis)] {
        let tr = Tracer {
            src,
            axis,
            opts: *opts,
        };
        let mut x = a.lift();
        let mut t = tr.dir(x, heading)?;
        let mut s = 0.0;
        while s < opts.max_length {
            let d = x.project().displacement_to(&b);
            let along = linalg::dot(d, t);
            let across = linalg::cross(t, d).abs();
            if along >= 0.0 && along <= 2.0 * opts.step && across < 10.0 * opts.step {
                let target = x.translate(d);
                if let Ok(seg) = trace_to(src, lin, a.lift(), target, opts) {
                    if best.as_ref().is_none_or(|b| seg.length() < b.length()) {
                        best = Some(seg);
                    }
                    break;
                }
            }
            (x, t) = tr.rk4(x, t, opts.step)?;
            s += opts.step;
        }
    }
    best.ok_or_else(|| {
        Error::LeafTraceFailure(format!(
            "no leaf piece of length ≤ {} joins ({:.6}, {:.6}) and ({:.6}, {:.6})",
            opts.max_length,
            a.x1(),
            a.x2(),
            b.x1(),
            b.x2()
        ))
    })
}
