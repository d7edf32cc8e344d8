//! The conjugacy `h ∘ A = f ∘ h`, built three ways: a fixed-point iteration
//! for `H = h⁻¹` on a grid, the conformal arclength ODE along an unstable
//! leaf, and the density-ratio ODE between matched leaf segments. Leafwise
//! regularity of the result is probed by difference quotients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::bundles::{BackwardBranch, Bundle};
use crate::error::{Error, Result};
use crate::grid::{periodic_cubic_weights, GridField};
use crate::leaf::{trace, trace_to, DirectionSource, LeafSegment, TraceOptions};
use crate::linalg::{self, LinearSplitting, Mat2, Vec2};
use crate::livsic::conformal_length;
use crate::model::ToralEndomorphism;
use crate::parallel;
use crate::srb::{unstable_density_on, LeafDensity};
use crate::stats::fit_line;
use crate::torus::{LiftPoint, TorusPoint};

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ConjugacyOptions {
    pub grid: usize,
    /// Sweeps stop once the sup-norm update falls below this.
    pub tolerance: f64,
    pub max_sweeps: usize,
    /// Grid on which the conjugacy residual is measured.
    pub residual_grid: usize,
    pub threads: usize,
}

impl Default for ConjugacyOptions {
    fn default() -> Self {
        Self {
            grid: 256,
            tolerance: 1e-10,
            max_sweeps: 500,
            residual_grid: 512,
            threads: 0,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Stencil {
    i0: usize,
    j0: usize,
    wx: [f64; 4],
    wy: [f64; 4],
}

impl Stencil {
    fn at(p: TorusPoint, n: usize) -> Self {
        let (i0, wx) = periodic_cubic_weights(p.x1(), n);
        let (j0, wy) = periodic_cubic_weights(p.x2(), n);
        Self { i0, j0, wx, wy }
    }

    fn apply(&self, values: &[f64], n: usize) -> f64 {
        let mut acc = 0.0;
        for (a, wa) in self.wx.iter().enumerate() {
            let row = ((self.i0 + a) % n) * n;
            let mut r = 0.0;
            for (b, wb) in self.wy.iter().enumerate() {
                r += wb * values[row + (self.j0 + b) % n];
            }
            acc += wa * r;
        }
        acc
    }
}

/// Per-node data of the sweep: the unstable update reads `H` at `f(y)`, the
/// stable one at every preimage of `y`.
struct Node {
    g_u: f64,
    forward: Stencil,
    back: Vec<(Stencil, f64)>,
}

/// `H = h⁻¹` stored as the periodic displacement `u = H − id` on an `N × N`
/// grid, so that `H ∘ f = A ∘ H` and `h ∘ A = f ∘ h`.
#[derive(Clone, Debug)]
pub struct ConjugacyMap {
    pub u1: GridField,
    pub u2: GridField,
    pub sweeps: usize,
    pub last_update: f64,
    /// `sup d(h(Ax), f(h(x)))` over the residual grid.
    pub residual: f64,
    pub residual_grid: usize,
    /// `sup ‖H − id‖`.
    pub max_displacement: f64,
}

impl ConjugacyMap {
    pub fn grid(&self) -> usize {
        self.u1.size()
    }

    pub fn displacement(&self, p: TorusPoint) -> Vec2 {
        let n = self.grid();
        let st = Stencil::at(p, n);
        [st.apply(self.u1.values(), n), st.apply(self.u2.values(), n)]
    }

    /// `H(p) = h⁻¹(p)`.
    pub fn inverse_apply(&self, p: TorusPoint) -> TorusPoint {
        TorusPoint::from(linalg::add(p.coords(), self.displacement(p)))
    }

    /// `h` on the lift: the `x` near `q` with `x + u(x) = q`.
    pub fn apply_lift(&self, q: LiftPoint) -> LiftPoint {
        let target = q.coords();
        let mut x = target;
        for _ in 0..80 {
            let next = linalg::sub(target, self.displacement(TorusPoint::from(x)));
            let step = (next[0] - x[0]).abs().max((next[1] - x[1]).abs());
            x = next;
            if step < 1e-15 {
                break;
            }
        }
        x.into()
    }

    pub fn apply(&self, q: TorusPoint) -> TorusPoint {
        self.apply_lift(q.lift()).project()
    }

    /// `sup d(h(q), other(q))` over an `n × n` grid.
    pub fn distance_to(&self, other: impl Fn(TorusPoint) -> TorusPoint + Sync, n: usize, threads: usize) -> f64 {
        let rows = parallel::map_indexed(n, threads, |i| {
            (0..n).fold(0.0f64, |m, j| {
                let q = TorusPoint::new(i as f64 / n as f64, j as f64 / n as f64);
                m.max(self.apply(q).distance(&other(q)))
            })
        });
        rows.into_iter().fold(0.0, f64::max)
    }

    /// `sup d(h(Ax), f(h(x)))` over an `n × n` grid.
    pub fn residual_on(&self, f: &ToralEndomorphism, n: usize, threads: usize) -> f64 {
        let a = *f.linear_part();
        let rows = parallel::map_indexed(n, threads, |i| {
            (0..n).fold(0.0f64, |m, j| {
                let x = TorusPoint::new(i as f64 / n as f64, j as f64 / n as f64);
                let ax = TorusPoint::from(a.mul_vec(x.coords()));
                let lhs = self.apply(ax);
                let rhs = f.apply(self.apply(x));
                m.max(lhs.distance(&rhs))
            })
        });
        rows.into_iter().fold(0.0, f64::max)
    }
}

pub fn base_conjugacy(f: &ToralEndomorphism, opts: &ConjugacyOptions) -> Result<ConjugacyMap> {
    base_conjugacy_from(f, opts, None)
}

/// Fixed-point iteration for `u = H − id` from an optional initial
/// displacement `(u₁, u₂)`. In eigen-coordinates `(v_u, v_s)` the equation
/// `A u(x) = g(x) + u(f̄ x)` with `g = f̄ − A` is swept as
/// `v_u ← (g_u + v_u∘f̄)/μ_u` and, averaged over the preimages `x` of each
/// node, `v_s(y) ← μ_s v_s(x) − g_s(x)`. Both updates contract.
pub fn base_conjugacy_from(
    f: &ToralEndomorphism,
    opts: &ConjugacyOptions,
    initial: Option<(&GridField, &GridField)>,
) -> Result<ConjugacyMap> {
    let n = opts.grid;
    if n < 8 {
        return Err(Error::InvalidArgument(format!("conjugacy grid {n} is too small")));
    }
    let lin = f.splitting();
    let threads = parallel::resolve_threads(opts.threads);
    let (mut vu, mut vs) = match initial {
        Some((a, b)) => {
            if a.size() != n || b.size() != n {
                return Err(Error::InvalidArgument("initial displacement has the wrong grid".into()));
            }
            let mut vu = vec![0.0; n * n];
            let mut vs = vec![0.0; n * n];
            for k in 0..n * n {
                let c = lin.coords([a.values()[k], b.values()[k]]);
                vu[k] = c[0];
                vs[k] = c[1];
            }
            (vu, vs)
        }
        None => (vec![0.0; n * n], vec![0.0; n * n]),
    };

    let nodes: Vec<Node> = if f.is_linear() {
        Vec::new()
    } else {
        let rows = parallel::map_indexed(n, threads, |i| -> Result<Vec<Node>> {
            (0..n)
                .map(|j| {
                    let y = TorusPoint::new(i as f64 / n as f64, j as f64 / n as f64);
                    let g_u = lin.coords(f.nonlinear_part(y.lift()))[0];
                    let forward = Stencil::at(f.apply(y), n);
                    let back = f
                        .preimage_lifts(y)?
                        .into_iter()
                        .map(|x| {
                            let g_s = lin.coords(f.nonlinear_part(x))[1];
                            (Stencil::at(x.project(), n), g_s)
                        })
                        .collect();
                    Ok(Node { g_u, forward, back })
                })
                .collect()
        });
        let mut all = Vec::with_capacity(n * n);
        for r in rows {
            all.extend(r?);
        }
        all
    };

    let (mu_u, mu_s) = (lin.lambda_u, lin.lambda_s);
    let mut sweeps = 0;
    let mut last_update = 0.0;
    if f.is_linear() {
        // g ≡ 0: the iteration is linear and homogeneous, so it converges to 0.
        vu.iter_mut().for_each(|v| *v = 0.0);
        vs.iter_mut().for_each(|v| *v = 0.0);
    } else {
        loop {
            if sweeps >= opts.max_sweeps {
                return Err(Error::NoConvergence {
                    sweeps,
                    last_update,
                });
            }
            let rows = parallel::map_indexed(n, threads, |i| {
                (0..n)
                    .map(|j| {
                        let node = &nodes[i * n + j];
                        let u = (node.g_u + node.forward.apply(&vu, n)) / mu_u;
                        let s = node
                            .back
                            .iter()
                            .map(|(st, g_s)| mu_s * st.apply(&vs, n) - g_s)
                            .sum::<f64>()
                            / node.back.len() as f64;
                        (u, s)
                    })
                    .collect::<Vec<_>>()
            });
            let mut update = 0.0f64;
            for (i, row) in rows.into_iter().enumerate() {
                for (j, (u, s)) in row.into_iter().enumerate() {
                    let k = i * n + j;
                    update = update.max((u - vu[k]).abs()).max((s - vs[k]).abs());
                    vu[k] = u;
                    vs[k] = s;
                }
            }
            sweeps += 1;
            last_update = update;
            if update < opts.tolerance {
                break;
            }
        }
    }

    let mut u1 = vec![0.0; n * n];
    let mut u2 = vec![0.0; n * n];
    let mut max_displacement = 0.0f64;
    for k in 0..n * n {
        let u = lin.compose([vu[k], vs[k]]);
        u1[k] = u[0];
        u2[k] = u[1];
        max_displacement = max_displacement.max(linalg::norm(u));
    }
    let mut map = ConjugacyMap {
        u1: GridField::from_values(n, u1)?,
        u2: GridField::from_values(n, u2)?,
        sweeps,
        last_update,
        residual: 0.0,
        residual_grid: opts.residual_grid,
        max_displacement,
    };
    map.residual = map.residual_on(f, opts.residual_grid, threads);
    Ok(map)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LeafOdeOptions {
    pub trace: TraceOptions,
    /// RK4 step in the leaf parameter θ.
    pub step: f64,
    pub anchor_tolerance: f64,
    /// Interior samples for the intertwining check.
    pub samples: usize,
}

impl Default for LeafOdeOptions {
    fn default() -> Self {
        Self {
            trace: TraceOptions::default(),
            step: 1e-3,
            anchor_tolerance: 1e-4,
            samples: 9,
        }
    }
}

/// Solution `s(θ)` of `ds/dθ = c·e^{φ(x(s))}` along a traced leaf `x(s)`.
#[derive(Clone, Debug)]
pub struct ArclengthOde {
    pub segment: LeafSegment,
    pub scale: f64,
    pub thetas: Vec<f64>,
    pub arclengths: Vec<f64>,
    rates: Vec<f64>,
}

impl ArclengthOde {
    /// Arclength at parameter θ by cubic Hermite interpolation of the steps.
    pub fn arclength_at(&self, theta: f64) -> f64 {
        hermite(&self.thetas, &self.arclengths, &self.rates, theta)
    }

    pub fn at(&self, theta: f64) -> LiftPoint {
        self.segment.position(self.arclength_at(theta))
    }
}

fn hermite(xs: &[f64], ys: &[f64], ds: &[f64], x: f64) -> f64 {
    let m = xs.len();
    if m == 1 {
        return ys[0];
    }
    let k = xs.partition_point(|&t| t <= x).clamp(1, m - 1) - 1;
    let h = xs[k + 1] - xs[k];
    let t = (x - xs[k]) / h;
    let (t2, t3) = (t * t, t * t * t);
    (2.0 * t3 - 3.0 * t2 + 1.0) * ys[k]
        + (t3 - 2.0 * t2 + t) * h * ds[k]
        + (-2.0 * t3 + 3.0 * t2) * ys[k + 1]
        + (t3 - t2) * h * ds[k + 1]
}

fn rk4_scalar(
    t_end: f64,
    step: f64,
    y0: f64,
    mut rate: impl FnMut(f64, f64) -> f64,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let steps = ((t_end / step).ceil() as usize).max(1);
    let h = t_end / steps as f64;
    let mut ts = vec![0.0];
    let mut ys = vec![y0];
    let mut ds = vec![rate(0.0, y0)];
    let mut y = y0;
    for k in 0..steps {
        let t = k as f64 * h;
        let k1 = ds[k];
        let k2 = rate(t + 0.5 * h, y + 0.5 * h * k1);
        let k3 = rate(t + 0.5 * h, y + 0.5 * h * k2);
        let k4 = rate(t + h, y + h * k3);
        y += h * (k1 + 2.0 * k2 + 2.0 * k3 + k4) / 6.0;
        let t1 = (k + 1) as f64 * h;
        ts.push(t1);
        ys.push(y);
        ds.push(rate(t1, y));
    }
    (ts, ys, ds)
}

/// Integrates `ds/dθ = scale·e^{φ}` for θ ∈ [0, θ_max] along the leaf leaving
/// `start` in the direction closest to `heading`.
pub fn arclength_ode<S: DirectionSource + ?Sized>(
    src: &S,
    lin: &LinearSplitting,
    phi: &GridField,
    start: LiftPoint,
    heading: Vec2,
    scale: f64,
    theta_max: f64,
    opts: &LeafOdeOptions,
) -> Result<ArclengthOde> {
    let bound = phi.sup_norm() + 0.05;
    let needed = scale * theta_max * bound.exp() + 0.05;
    let length = needed.min(opts.trace.max_length);
    let segment = trace(src, lin, start, heading, length, &opts.trace)?;
    let (thetas, arclengths, rates) = rk4_scalar(theta_max, opts.step, 0.0, |_, s| {
        scale * phi.eval(segment.position(s).project()).exp()
    });
    if *arclengths.last().unwrap() > segment.length() {
        return Err(Error::LeafTraceFailure(format!(
            "arclength ODE needs {:.3} units of leaf, at most {} available",
            arclengths.last().unwrap(),
            segment.length()
        )));
    }
    Ok(ArclengthOde {
        segment,
        scale,
        thetas,
        arclengths,
        rates,
    })
}

/// `h̃` on the unstable leaf of `A` through `origin`, with θ ↦ `origin + θ e_u`.
#[derive(Clone, Debug)]
pub struct LeafOdeMap {
    pub origin: LiftPoint,
    pub direction: Vec2,
    pub ode: ArclengthOde,
    /// Largest distance between `h̃(j)` and the anchor `b_j`.
    pub anchor_miss: f64,
    /// `sup d(f(h̃(θ)), h̃(Aθ))` over interior samples.
    pub intertwining_defect: f64,
}

impl LeafOdeMap {
    pub fn at(&self, theta: f64) -> LiftPoint {
        self.ode.at(theta)
    }

    pub fn leaf_point(&self, theta: f64) -> LiftPoint {
        self.origin.translate(linalg::scale(theta, self.direction))
    }
}

/// Arclength ODE `z' = e^{φᵘ(z)}` from `b₀` along the unstable leaf of `f`.
/// The anchors `b_j = h(a_j)` sit over unit-spaced `a_j = a₀ + j e_u`. The
/// multiplicative constant of the conformal metric is fixed by requiring
/// `dᵘ(b₀, b₁) = 1`; later anchors then test the ODE.
pub fn leaf_ode_conjugacy<S: DirectionSource + ?Sized>(
    f: &ToralEndomorphism,
    src: &S,
    phi: &GridField,
    origin: LiftPoint,
    anchors: &[TorusPoint],
    opts: &LeafOdeOptions,
) -> Result<LeafOdeMap> {
    if anchors.len() < 2 {
        return Err(Error::InvalidArgument("leaf ODE needs at least two anchors".into()));
    }
    if src.bundle() != Bundle::Unstable {
        return Err(Error::InvalidArgument("leaf ODE needs unstable directions".into()));
    }
    let lin = f.splitting();
    let e = lin.e_u;
    let b0 = anchors[0].lift();
    let b1 = b0.translate(e).nearest_lift_of(&anchors[1]);
    let first = trace_to(src, lin, b0, b1, &opts.trace)?;
    let scale = conformal_length(phi, &first);
    let theta_max = (anchors.len() - 1) as f64;
    let ode = arclength_ode(src, lin, phi, b0, e, scale, theta_max, opts)?;

    let mut anchor_miss = 0.0f64;
    for (j, b) in anchors.iter().enumerate().skip(1) {
        anchor_miss = anchor_miss.max(ode.at(j as f64).project().distance(b));
    }
    if anchor_miss > opts.anchor_tolerance {
        return Err(Error::AnchorMismatch { miss: anchor_miss });
    }

    // The image leaf through f(b₀) carries h̃ for the anchors A a_j, f(b_j).
    let mu = lin.lambda_u;
    let heading = linalg::scale(mu.signum(), e);
    let reach = (opts.trace.max_length - 0.1) / (scale * mu.abs() * (phi.sup_norm() + 0.05).exp());
    let span = theta_max.min(1.0).min(reach);
    let image = arclength_ode(
        src,
        lin,
        phi,
        f.lift_apply(b0),
        heading,
        scale,
        mu.abs() * span,
        opts,
    )?;
    let mut intertwining_defect = 0.0f64;
    for i in 1..=opts.samples {
        let theta = span * i as f64 / (opts.samples + 1) as f64;
        let lhs = f.apply(ode.at(theta).project());
        let rhs = image.at(mu.abs() * theta).project();
        intertwining_defect = intertwining_defect.max(lhs.distance(&rhs));
    }
    Ok(LeafOdeMap {
        origin,
        direction: e,
        ode,
        anchor_miss,
        intertwining_defect,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RatioOptions {
    pub step: f64,
    pub anchor_tolerance: f64,
    /// Number of θ values at which measure transport is checked.
    pub samples: usize,
}

impl Default for RatioOptions {
    fn default() -> Self {
        Self {
            step: 1e-3,
            anchor_tolerance: 1e-4,
            samples: 20,
        }
    }
}

/// Solution `x(t)` of `x' = ρ_f(t)/ρ_g(x)` between matched segments.
#[derive(Clone, Debug)]
pub struct DensityRatioMap {
    pub source: LeafSegment,
    pub target: LeafSegment,
    pub ts: Vec<f64>,
    pub xs: Vec<f64>,
    rates: Vec<f64>,
    /// `|x(L_f) − L_g|`.
    pub endpoint_miss: f64,
    /// Largest `|∫₀ᵗ ρ_f − ∫₀^{x(t)} ρ_g|` over the sampled `t`.
    pub transport_defect: f64,
}

impl DensityRatioMap {
    pub fn image_arclength(&self, t: f64) -> f64 {
        hermite(&self.ts, &self.xs, &self.rates, t)
    }

    /// Image of the source point at arclength `t`.
    pub fn at(&self, t: f64) -> LiftPoint {
        self.target.position(self.image_arclength(t))
    }
}

/// Integrates the density-ratio ODE from the start of `rho_f.segment` to its
/// end and checks that conditional measures are transported.
pub fn density_ratio_conjugacy(
    rho_f: &LeafDensity,
    rho_g: &LeafDensity,
    opts: &RatioOptions,
) -> Result<DensityRatioMap> {
    let lf = rho_f.segment.length();
    let lg = rho_g.segment.length();
    let (ts, xs, rates) = rk4_scalar(lf, opts.step, 0.0, |t, x| rho_f.value_at(t) / rho_g.value_at(x));
    let endpoint_miss = (xs.last().unwrap() - lg).abs();
    if endpoint_miss > opts.anchor_tolerance {
        return Err(Error::AnchorMismatch { miss: endpoint_miss });
    }
    let mut map = DensityRatioMap {
        source: rho_f.segment.clone(),
        target: rho_g.segment.clone(),
        ts,
        xs,
        rates,
        endpoint_miss,
        transport_defect: 0.0,
    };
    let mut defect = 0.0f64;
    for i in 0..opts.samples {
        let t = lf * (i as f64 + 0.5) / opts.samples as f64;
        let x = map.image_arclength(t);
        defect = defect.max((rho_f.mass(0.0, t) - rho_g.mass(0.0, x)).abs());
    }
    map.transport_defect = defect;
    Ok(map)
}

fn segment_density<S: DirectionSource + ?Sized>(
    m: &ToralEndomorphism,
    src: &S,
    h: &ConjugacyMap,
    (from, to): (LiftPoint, LiftPoint),
    truncation: usize,
    opts: &TraceOptions,
) -> Result<LeafDensity> {
    let a = h.apply_lift(from);
    let seg = trace_to(src, m.splitting(), a, h.apply_lift(to), opts)?;
    let branch = BackwardBranch::zero(m, a.project(), truncation)?;
    unstable_density_on(m, &branch, seg, truncation)
}

/// Unstable densities on the images of the A-leaf piece
/// `[a₀, a₀ + length·e_u]` under `h_f` and `h_g`, each normalized to unit mass.
pub fn matched_densities<S: DirectionSource + ?Sized, T: DirectionSource + ?Sized>(
    (f, src_f, h_f): (&ToralEndomorphism, &S, &ConjugacyMap),
    (g, src_g, h_g): (&ToralEndomorphism, &T, &ConjugacyMap),
    origin: LiftPoint,
    length: f64,
    truncation: usize,
    opts: &TraceOptions,
) -> Result<(LeafDensity, LeafDensity)> {
    let ends = (origin, origin.translate(linalg::scale(length, f.splitting().e_u)));
    Ok((
        segment_density(f, src_f, h_f, ends, truncation, opts)?,
        segment_density(g, src_g, h_g, ends, truncation, opts)?,
    ))
}

/// Pairwise sup distances between the three constructions on the A-leaf
/// piece `θ ∈ [0, θ_max]` shared by all of them.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MethodAgreement {
    pub samples: usize,
    pub theta_max: f64,
    pub base_vs_ode: f64,
    pub base_vs_ratio: f64,
    pub ode_vs_ratio: f64,
}

impl MethodAgreement {
    pub fn max(&self) -> f64 {
        self.base_vs_ode.max(self.base_vs_ratio).max(self.ode_vs_ratio)
    }
}

/// Compares the constructions when the density-ratio source is the A-leaf
/// piece starting at the ODE origin (that is, `f = A` on the source side).
pub fn compare_methods(
    base: &ConjugacyMap,
    ode: &LeafOdeMap,
    ratio: &DensityRatioMap,
    samples: usize,
) -> Result<MethodAgreement> {
    let offset = ratio.source.start().project().distance(&ode.origin.project());
    if offset > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "density-ratio source starts {offset:.3e} away from the ODE origin"
        )));
    }
    let theta_max = ratio.source.length().min(*ode.ode.thetas.last().unwrap());
    let mut out = MethodAgreement {
        samples,
        theta_max,
        base_vs_ode: 0.0,
        base_vs_ratio: 0.0,
        ode_vs_ratio: 0.0,
    };
    for i in 0..=samples {
        let theta = theta_max * i as f64 / samples.max(1) as f64;
        let hb = base.apply(ode.leaf_point(theta).project());
        let ho = ode.at(theta).project();
        let hr = ratio.at(theta).project();
        out.base_vs_ode = out.base_vs_ode.max(hb.distance(&ho));
        out.base_vs_ratio = out.base_vs_ratio.max(hb.distance(&hr));
        out.ode_vs_ratio = out.ode_vs_ratio.max(ho.distance(&hr));
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RegularityOptions {
    pub samples: usize,
    pub seed: u64,
    /// Scales run over `2^{-coarsest} .. 2^{-finest}`.
    pub coarsest: u32,
    pub finest: u32,
    /// Largest change of the quotient between the two finest scales for the
    /// derivative to count as stabilized.
    pub stabilization_tolerance: f64,
}

impl Default for RegularityOptions {
    fn default() -> Self {
        Self {
            samples: 16,
            seed: 0,
            coarsest: 3,
            finest: 10,
            stabilization_tolerance: 1e-3,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct RegularityEstimate {
    pub bundle: Bundle,
    /// Strictly decreasing.
    pub scales: Vec<f64>,
    pub points: Vec<[f64; 2]>,
    /// `|h(q + δe) − h(q − δe)|/(2δ)` per point and scale.
    pub quotients: Vec<Vec<f64>>,
    /// Richardson-extrapolated leafwise derivative per point.
    pub derivatives: Vec<f64>,
    /// Mean `|quotient − derivative|` per scale.
    pub deviations: Vec<f64>,
    /// Slope of `log deviation` against `log δ`; `None` if the deviations
    /// vanish.
    pub exponent: Option<f64>,
    pub r_squared: f64,
    pub stabilized: bool,
    /// Set when the fit is poor (R² < 0.9), degenerate, or the quotients did
    /// not stabilize.
    pub flagged: bool,
}

/// Difference quotients of `h` along the linear leaf direction of `bundle`.
pub fn regularity_estimate(
    h: &ConjugacyMap,
    lin: &LinearSplitting,
    bundle: Bundle,
    opts: &RegularityOptions,
) -> Result<RegularityEstimate> {
    if opts.finest <= opts.coarsest || opts.samples == 0 {
        return Err(Error::InvalidArgument("regularity probe needs finest > coarsest and samples > 0".into()));
    }
    let e = match bundle {
        Bundle::Unstable => lin.e_u,
        Bundle::Stable => lin.e_s,
    };
    let scales: Vec<f64> = (opts.coarsest..=opts.finest).map(|k| 0.5f64.powi(k as i32)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let points: Vec<TorusPoint> = (0..opts.samples).map(|_| TorusPoint::new(rng.gen(), rng.gen())).collect();
    let mut quotients = Vec::with_capacity(points.len());
    let mut derivatives = Vec::with_capacity(points.len());
    let mut stabilized = true;
    for q in &points {
        let row: Vec<f64> = scales
            .iter()
            .map(|&d| {
                let plus = h.apply_lift(q.lift().translate(linalg::scale(d, e)));
                let minus = h.apply_lift(q.lift().translate(linalg::scale(-d, e)));
                plus.distance(&minus) / (2.0 * d)
            })
            .collect();
        let m = row.len();
        // Central quotients carry an O(δ²) error; one Richardson step removes it.
        let d = row[m - 1] + (row[m - 1] - row[m - 2]) / 3.0;
        if (row[m - 1] - row[m - 2]).abs() > opts.stabilization_tolerance {
            stabilized = false;
        }
        derivatives.push(d);
        quotients.push(row);
    }
    let deviations: Vec<f64> = (0..scales.len())
        .map(|k| {
            quotients
                .iter()
                .zip(&derivatives)
                .map(|(row, d)| (row[k] - d).abs())
                .sum::<f64>()
                / points.len() as f64
        })
        .collect();
    let usable: Vec<(f64, f64)> = scales
        .iter()
        .zip(&deviations)
        .filter(|(_, &v)| v > 1e-13)
        .map(|(&s, &v)| (s.ln(), v.ln()))
        .collect();
    let (exponent, r_squared) = if usable.len() >= 3 {
        let xs: Vec<f64> = usable.iter().map(|p| p.0).collect();
        let ys: Vec<f64> = usable.iter().map(|p| p.1).collect();
        let fit = fit_line(&xs, &ys);
        (Some(fit.slope), fit.r_squared)
    } else {
        (None, 0.0)
    };
    let flagged = exponent.is_none() || r_squared < 0.9 || !stabilized;
    Ok(RegularityEstimate {
        bundle,
        scales,
        points: points.iter().map(|p| p.coords()).collect(),
        quotients,
        derivatives,
        deviations,
        exponent,
        r_squared,
        stabilized,
        flagged,
    })
}

/// Leafwise stretch `‖Dh₀(q) e‖` of a diffeomorphism with Jacobian `dh`.
pub fn leafwise_stretch(dh: Mat2, e: Vec2) -> f64 {
    linalg::norm(dh.mul_vec(e))
}
