//! Cohomological equation `ψ = φ∘f − φ` solved by least squares over a real
//! trigonometric basis, the unstable log-Jacobian observable, and the
//! conformal leaf metric built from its transfer function.

use std::f64::consts::TAU;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::bundles::{specialness_spread, stable_direction_at, unstable_direction_at, Bundle};
use crate::error::{Error, Result};
use crate::grid::{half_set, Fft2Plan, GridField, TrigPoly};
use crate::leaf::{trace_between, DirectionSource, LeafSegment, TraceOptions};
use crate::linalg::{self, LinearSplitting};
use crate::model::ToralEndomorphism;
use crate::parallel;
use crate::periodic::{find_periodic_with, CensusOptions, PeriodicOrbit};
use crate::torus::{LiftPoint, TorusPoint};

pub const DEFAULT_GRID: usize = 256;
pub const DEFAULT_CUTOFF: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LivsicOptions {
    pub grid: usize,
    pub cutoff: usize,
    /// Backward (or forward) depth used for bundle directions at grid nodes.
    pub depth: usize,
    /// Periods checked for a common periodic exponent.
    pub max_period: u32,
    /// Largest tolerated spread of periodic exponents.
    pub obstruction_tolerance: f64,
    /// Largest tolerated angle between unstable directions of different
    /// backward branches.
    pub special_tolerance: f64,
    pub special_samples: usize,
    /// Sup residual above which a cohomology fit is rejected.
    pub residual_tolerance: f64,
    pub seed: u64,
    /// Worker threads for field assembly; `0` picks the machine's count.
    pub threads: usize,
}

impl Default for LivsicOptions {
    fn default() -> Self {
        Self {
            grid: DEFAULT_GRID,
            cutoff: DEFAULT_CUTOFF,
            depth: 30,
            max_period: 3,
            obstruction_tolerance: 1e-4,
            special_tolerance: 1e-6,
            special_samples: 16,
            residual_tolerance: 1e-3,
            seed: 0,
            threads: 0,
        }
    }
}

/// `ψ(x) = log ‖Df(x)|E(x)‖ − λ` on the grid, with its periodic diagnostics.
#[derive(Clone, Debug)]
pub struct Observable {
    pub bundle: Bundle,
    pub field: GridField,
    /// Common periodic exponent subtracted from the log-Jacobian.
    pub lambda: f64,
    /// Spread `max − min` of the periodic exponents over the checked orbits.
    pub exponent_spread: f64,
    /// Largest `|mean of ψ|` along a checked periodic orbit.
    pub max_periodic_mean: f64,
    pub orbits_checked: usize,
    /// Measured specialness spread (unstable bundle only).
    pub special_spread: Option<f64>,
}

fn log_stretch(f: &ToralEndomorphism, p: TorusPoint, bundle: Bundle, depth: usize) -> Result<f64> {
    let e = match bundle {
        Bundle::Unstable => unstable_direction_at(f, p, depth)?,
        Bundle::Stable => stable_direction_at(f, p, depth)?,
    };
    Ok(linalg::norm(f.jacobian(p).mul_vec(e)).ln())
}

/// `log ‖Df|Eᵘ‖ − λᵘ`, refused unless the periodic exponents agree and the
/// unstable bundle is independent of the backward branch.
pub fn observable_log_unstable(f: &ToralEndomorphism, opts: &LivsicOptions) -> Result<Observable> {
    observable_log_bundle(f, Bundle::Unstable, opts)
}

pub fn observable_log_bundle(f: &ToralEndomorphism, bundle: Bundle, opts: &LivsicOptions) -> Result<Observable> {
    let n = opts.grid;
    let pick = |o: &PeriodicOrbit| match bundle {
        Bundle::Unstable => o.lambda_u,
        Bundle::Stable => o.lambda_s,
    };
    if f.is_linear() {
        let lin = f.splitting();
        let lambda = match bundle {
            Bundle::Unstable => lin.lambda_u.abs().ln(),
            Bundle::Stable => lin.lambda_s.abs().ln(),
        };
        return Ok(Observable {
            bundle,
            field: GridField::zeros(n),
            lambda,
            exponent_spread: 0.0,
            max_periodic_mean: 0.0,
            orbits_checked: 0,
            special_spread: (bundle == Bundle::Unstable).then_some(0.0),
        });
    }

    let census_opts = CensusOptions {
        threads: parallel::resolve_threads(opts.threads),
        ..CensusOptions::default()
    };
    let mut orbits = Vec::new();
    for period in 1..=opts.max_period {
        orbits.extend(find_periodic_with(f, period, &census_opts)?.orbits);
    }
    let lambda = pick(&orbits[0]);
    let mut worst = (1, 0.0_f64);
    for o in &orbits {
        let dev = (pick(o) - lambda).abs();
        if dev > worst.1 {
            worst = (o.period as u32, dev);
        }
    }
    let (lo, hi) = orbits
        .iter()
        .map(pick)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), l| (a.min(l), b.max(l)));
    let spread = hi - lo;
    if spread > opts.obstruction_tolerance {
        return Err(Error::ObstructionNonzero {
            period: worst.0,
            value: worst.1,
            tolerance: opts.obstruction_tolerance,
        });
    }

    let special_spread = if bundle == Bundle::Unstable {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut s = 0.0_f64;
        for _ in 0..opts.special_samples {
            let p = TorusPoint::new(rng.gen(), rng.gen());
            s = s.max(specialness_spread(f, p, opts.depth, 4, &mut rng)?);
        }
        if s >= opts.special_tolerance {
            return Err(Error::NotSpecial { spread: s });
        }
        Some(s)
    } else {
        None
    };

    let rows = parallel::map_indexed(n, parallel::resolve_threads(opts.threads), |i| {
        (0..n)
            .map(|j| {
                let p = TorusPoint::new(i as f64 / n as f64, j as f64 / n as f64);
                log_stretch(f, p, bundle, opts.depth).map(|l| l - lambda)
            })
            .collect::<Result<Vec<f64>>>()
    });
    let mut values = Vec::with_capacity(n * n);
    for r in rows {
        values.extend(r?);
    }
    let field = GridField::from_values(n, values)?;

    let mut max_mean = 0.0_f64;
    let mut mean_period = 1;
    for o in &orbits {
        let mut acc = 0.0;
        for &p in &o.points {
            acc += log_stretch(f, p, bundle, opts.depth)? - lambda;
        }
        let m = (acc / o.period as f64).abs();
        if m > max_mean {
            (max_mean, mean_period) = (m, o.period as u32);
        }
    }
    if max_mean > opts.obstruction_tolerance {
        return Err(Error::ObstructionNonzero {
            period: mean_period,
            value: max_mean,
            tolerance: opts.obstruction_tolerance,
        });
    }
    Ok(Observable {
        bundle,
        field,
        lambda,
        exponent_spread: spread,
        max_periodic_mean: max_mean,
        orbits_checked: orbits.len(),
        special_spread,
    })
}

/// Result of a cohomology fit.
#[derive(Clone, Debug)]
pub struct CohomologySolution {
    /// Mean-zero transfer function, carrying its trigonometric coefficients.
    pub phi: GridField,
    /// `max |φ(f x) − φ(x) − ψ(x)|` over the grid.
    pub sup_residual: f64,
    pub rms_residual: f64,
    pub iterations: usize,
    /// Final `‖G c − r‖ / ‖r‖` of the normal equations.
    pub normal_residual: f64,
}

/// Normal equations of the least-squares problem for one map and grid,
/// assembled once and reused for any right-hand side.
pub struct CohomologySolver {
    n: usize,
    cutoff: usize,
    modes: Vec<[i32; 2]>,
    /// `(e^{2πi (f x)₁}, e^{2πi (f x)₂})` at every grid node.
    phases: Vec<(Complex64, Complex64)>,
    images: Vec<TorusPoint>,
    /// Row-major Gram matrix over the basis `cos m₀, sin m₀, cos m₁, …`,
    /// normalized by `1/N²`.
    gram: Vec<f64>,
    plan: Fft2Plan,
    pub cg_tolerance: f64,
    pub max_iterations: usize,
}

impl std::fmt::Debug for CohomologySolver {
    fn fmt(&self, fm: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        fm.debug_struct("CohomologySolver")
            .field("n", &self.n)
            .field("cutoff", &self.cutoff)
            .finish_non_exhaustive()
    }
}

/// `(z^{-F}, …, z^{F})`.
fn powers(z: Complex64, f: usize) -> Vec<Complex64> {
    let mut out = vec![Complex64::new(1.0, 0.0); 2 * f + 1];
    for k in 1..=f {
        out[f + k] = out[f + k - 1] * z;
        out[f - k] = out[f - k + 1] * z.conj();
    }
    out
}

impl CohomologySolver {
    pub fn new(f: &ToralEndomorphism, n: usize, cutoff: usize, threads: usize) -> Result<Self> {
        if n < 8 || 4 * cutoff >= n || cutoff == 0 {
            return Err(Error::InvalidArgument(format!(
                "cohomology solver needs 0 < 4F < N (got F = {cutoff}, N = {n})"
            )));
        }
        let threads = parallel::resolve_threads(threads);
        let modes = half_set(cutoff);
        let dim = 2 * modes.len();
        let images: Vec<TorusPoint> = parallel::map_indexed(n, threads, |i| {
            (0..n)
                .map(|j| f.apply(TorusPoint::new(i as f64 / n as f64, j as f64 / n as f64)))
                .collect::<Vec<_>>()
        })
        .concat();
        let phases: Vec<_> = images
            .iter()
            .map(|p| (Complex64::cis(TAU * p.x1()), Complex64::cis(TAU * p.x2())))
            .collect();
        let mut solver = Self {
            n,
            cutoff,
            modes,
            phases,
            images,
            gram: vec![0.0; dim * dim],
            plan: Fft2Plan::new(n),
            cg_tolerance: 1e-14,
            max_iterations: 4 * dim,
        };
        solver.assemble_image_gram(threads);
        solver.assemble_cross_terms(threads);
        Ok(solver)
    }

    pub fn grid(&self) -> usize {
        self.n
    }

    pub fn cutoff(&self) -> usize {
        self.cutoff
    }

    pub fn dimension(&self) -> usize {
        2 * self.modes.len()
    }

    /// Adds `P + I/2`, where `P` is the Gram matrix of the basis composed
    /// with f, via the exponential sums `S(d) = Σ_x e^{2πi d·f(x)}`.
    fn assemble_image_gram(&mut self, threads: usize) {
        let f = self.cutoff;
        let n = self.n;
        let w1 = 4 * f + 1;
        let w2 = 2 * f + 1;
        // S(d) for d₁ ∈ [−2F, 2F], d₂ ∈ [0, 2F]; per-row partial sums are
        // reduced in row order so the result does not depend on `threads`.
        let partials = parallel::map_indexed(n, threads, |i| {
            let mut s = vec![Complex64::new(0.0, 0.0); w1 * w2];
            for &(a, b) in &self.phases[i * n..(i + 1) * n] {
                let pa = powers(a, 2 * f);
                let mut row = Complex64::new(1.0, 0.0);
                for d2 in 0..w2 {
                    let out = &mut s[d2 * w1..(d2 + 1) * w1];
                    for (o, e) in out.iter_mut().zip(&pa) {
                        *o += e * row;
                    }
                    row *= b;
                }
            }
            s
        });
        let mut s = vec![Complex64::new(0.0, 0.0); w1 * w2];
        for part in partials {
            for (acc, v) in s.iter_mut().zip(part) {
                *acc += v;
            }
        }
        let norm = 1.0 / (n * n) as f64;
        let fi = f as i32;
        let sum_at = |d: [i32; 2]| -> Complex64 {
            let (d, conj) = if d[1] < 0 { ([-d[0], -d[1]], true) } else { (d, false) };
            let v = s[d[1] as usize * w1 + (d[0] + 2 * fi) as usize] * norm;
            if conj {
                v.conj()
            } else {
                v
            }
        };
        let dim = self.dimension();
        for (j, mj) in self.modes.iter().enumerate() {
            for (k, mk) in self.modes.iter().enumerate() {
                let plus = sum_at([mj[0] + mk[0], mj[1] + mk[1]]);
                let minus = sum_at([mj[0] - mk[0], mj[1] - mk[1]]);
                let (cj, sj, ck, sk) = (2 * j, 2 * j + 1, 2 * k, 2 * k + 1);
                self.gram[cj * dim + ck] += 0.5 * (plus.re + minus.re);
                self.gram[sj * dim + sk] += 0.5 * (minus.re - plus.re);
                self.gram[cj * dim + sk] += 0.5 * (plus.im - minus.im);
                self.gram[sj * dim + ck] += 0.5 * (plus.im + minus.im);
            }
            self.gram[2 * j * dim + 2 * j] += 0.5;
            self.gram[(2 * j + 1) * dim + 2 * j + 1] += 0.5;
        }
    }

    /// Subtracts `Q + Qᵀ` with `Q_{jk} = N⁻² Σ_x E_j(f x) E_k(x)`, one FFT of
    /// `e^{2πi m_j·f(x)}` per mode.
    fn assemble_cross_terms(&mut self, threads: usize) {
        let n = self.n;
        let f = self.cutoff as i32;
        let dim = self.dimension();
        let cols: Vec<usize> = (-f..=f).map(|k| k.rem_euclid(n as i32) as usize).collect();
        let at = |data: &[Complex64], m: [i32; 2]| {
            data[m[0].rem_euclid(n as i32) as usize * n + m[1].rem_euclid(n as i32) as usize]
        };
        let norm = 1.0 / (n * n) as f64;
        let modes = &self.modes;
        let phases = &self.phases;
        let plan = &self.plan;
        let rows = parallel::map_indexed(modes.len(), threads, |j| {
            let mj = modes[j];
            let mut data: Vec<Complex64> = phases
                .iter()
                .map(|&(a, b)| a.powi(mj[0]) * b.powi(mj[1]))
                .collect();
            let mut scratch = Vec::new();
            plan.forward_columns(&mut data, &cols, &mut scratch);
            // Rows cos_j and sin_j of Q.
            let mut qc = vec![0.0; dim];
            let mut qs = vec![0.0; dim];
            for (k, mk) in modes.iter().enumerate() {
                let gp = at(&data, *mk) * norm;
                let gm = at(&data, [-mk[0], -mk[1]]).conj() * norm;
                let c = (gp + gm) * 0.5;
                let s = (gp - gm) * Complex64::new(0.0, -0.5);
                qc[2 * k] = c.re;
                qc[2 * k + 1] = -c.im;
                qs[2 * k] = s.re;
                qs[2 * k + 1] = -s.im;
            }
            (qc, qs)
        });
        for (j, (qc, qs)) in rows.into_iter().enumerate() {
            for (row, q) in [(2 * j, qc), (2 * j + 1, qs)] {
                for (k, v) in q.into_iter().enumerate() {
                    self.gram[row * dim + k] -= v;
                    self.gram[k * dim + row] -= v;
                }
            }
        }
    }

    /// Right-hand side `N⁻² Σ_x (E(f x) − E(x)) ψ(x)`.
    fn rhs(&self, psi: &[f64]) -> Vec<f64> {
        let n = self.n;
        let f = self.cutoff;
        let dim = self.dimension();
        let norm = 1.0 / (n * n) as f64;
        let mut b = vec![0.0; dim];
        for (&(a, bz), &v) in self.phases.iter().zip(psi) {
            let pa = powers(a, f);
            let mut idx = 0;
            for k in 1..=f {
                let e = pa[f + k];
                b[idx] += v * e.re;
                b[idx + 1] += v * e.im;
                idx += 2;
            }
            let mut row = Complex64::new(1.0, 0.0);
            for _ in 1..=f {
                row *= bz;
                for e1 in &pa {
                    let e = e1 * row;
                    b[idx] += v * e.re;
                    b[idx + 1] += v * e.im;
                    idx += 2;
                }
            }
        }
        let mut data: Vec<Complex64> = psi.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.plan.process(&mut data, false);
        for (k, m) in self.modes.iter().enumerate() {
            let h = data[m[0].rem_euclid(n as i32) as usize * n + m[1].rem_euclid(n as i32) as usize];
            b[2 * k] = (b[2 * k] - h.re) * norm;
            b[2 * k + 1] = (b[2 * k + 1] + h.im) * norm;
        }
        b
    }

    fn matvec(&self, x: &[f64], out: &mut [f64]) {
        let dim = self.dimension();
        for (i, o) in out.iter_mut().enumerate() {
            *o = linalg_dot(&self.gram[i * dim..(i + 1) * dim], x);
        }
    }

    /// Jacobi-preconditioned conjugate gradients on the normal equations.
    fn conjugate_gradient(&self, b: &[f64]) -> (Vec<f64>, usize, f64) {
        let dim = self.dimension();
        let diag: Vec<f64> = (0..dim).map(|i| self.gram[i * dim + i]).collect();
        let bnorm = linalg_dot(b, b).sqrt();
        let mut x = vec![0.0; dim];
        if bnorm == 0.0 {
            return (x, 0, 0.0);
        }
        let mut r = b.to_vec();
        let mut z: Vec<f64> = r.iter().zip(&diag).map(|(r, d)| r / d).collect();
        let mut p = z.clone();
        let mut rz = linalg_dot(&r, &z);
        let mut ap = vec![0.0; dim];
        let mut rel = 1.0;
        let mut it = 0;
        while it < self.max_iterations {
            self.matvec(&p, &mut ap);
            let alpha = rz / linalg_dot(&p, &ap);
            for i in 0..dim {
                x[i] += alpha * p[i];
                r[i] -= alpha * ap[i];
            }
            it += 1;
            rel = linalg_dot(&r, &r).sqrt() / bnorm;
            if rel <= self.cg_tolerance {
                break;
            }
            for i in 0..dim {
                z[i] = r[i] / diag[i];
            }
            let rz_new = linalg_dot(&r, &z);
            let beta = rz_new / rz;
            rz = rz_new;
            for i in 0..dim {
                p[i] = z[i] + beta * p[i];
            }
        }
        (x, it, rel)
    }

    /// Least-squares fit without a residual threshold.
    pub fn fit(&self, psi: &GridField) -> Result<CohomologySolution> {
        if psi.size() != self.n {
            return Err(Error::InvalidArgument(format!(
                "observable grid {} does not match solver grid {}",
                psi.size(),
                self.n
            )));
        }
        let b = self.rhs(psi.values());
        let (x, iterations, normal_residual) = self.conjugate_gradient(&b);
        let cos: Vec<f64> = x.iter().step_by(2).copied().collect();
        let sin: Vec<f64> = x.iter().skip(1).step_by(2).copied().collect();
        let poly = TrigPoly::from_coefficients(self.cutoff, 0.0, cos, sin)?;
        let phi = GridField::from_trig(poly.clone(), self.n);
        let mut sup = 0.0_f64;
        let mut sq = 0.0;
        for ((img, &p0), &v) in self.images.iter().zip(phi.values()).zip(psi.values()) {
            let r = poly.eval(*img) - p0 - v;
            sup = sup.max(r.abs());
            sq += r * r;
        }
        Ok(CohomologySolution {
            phi,
            sup_residual: sup,
            rms_residual: (sq / (self.n * self.n) as f64).sqrt(),
            iterations,
            normal_residual,
        })
    }

    /// Fit and reject solutions whose sup residual exceeds `tolerance`.
    pub fn solve(&self, psi: &GridField, tolerance: f64) -> Result<CohomologySolution> {
        let sol = self.fit(psi)?;
        if !(sol.sup_residual <= tolerance) {
            return Err(Error::ResidualTooLarge {
                residual: sol.sup_residual,
                tolerance,
            });
        }
        Ok(sol)
    }
}

fn linalg_dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Builds a solver for `f` on `ψ`'s grid and solves with `opts` tolerances.
pub fn solve_cohomology(f: &ToralEndomorphism, psi: &GridField, opts: &LivsicOptions) -> Result<CohomologySolution> {
    CohomologySolver::new(f, psi.size(), opts.cutoff, opts.threads)?.solve(psi, opts.residual_tolerance)
}

/// Quadrature panel length resolving the oscillation of `φ` along a leaf.
fn panel_for(phi: &GridField) -> f64 {
    let cutoff = phi
        .frequency_cutoff()
        .unwrap_or(phi.size() / 2)
        .max(1) as f64;
    (1.0 / (TAU * cutoff * std::f64::consts::SQRT_2)).min(0.05)
}

/// `∫ e^{−φ(x(s))} ds` along a traced segment.
pub fn conformal_length(phi: &GridField, seg: &LeafSegment) -> f64 {
    seg.integrate_with(|p| (-phi.eval(p)).exp(), panel_for(phi))
}

/// Conformal distance between two points of one leaf.
pub fn conformal_distance<S: DirectionSource + ?Sized>(
    src: &S,
    lin: &LinearSplitting,
    phi: &GridField,
    a: TorusPoint,
    b: TorusPoint,
    opts: &TraceOptions,
) -> Result<f64> {
    let seg = trace_between(src, lin, a, b, opts)?;
    Ok(conformal_length(phi, &seg))
}

/// Ratio `dᵘ(f a, f b) / dᵘ(a, b)` for the leaf piece `seg` from `a` to `b`;
/// the image piece is traced between the lifted images of its endpoints.
pub fn scaling_ratio<S: DirectionSource + ?Sized>(
    f: &ToralEndomorphism,
    src: &S,
    phi: &GridField,
    seg: &LeafSegment,
    opts: &TraceOptions,
) -> Result<f64> {
    let fa: LiftPoint = f.lift_apply(seg.start());
    let fb: LiftPoint = f.lift_apply(seg.end());
    let image = crate::leaf::trace_to(src, f.splitting(), fa, fb, opts)?;
    Ok(conformal_length(phi, &image) / conformal_length(phi, seg))
}
