//! Periodic orbits: exact enumeration for the linearization, Newton
//! continuation to the nonlinear model, Lyapunov exponents along cycles and
//! the periodic-data defect against the linearization.

use std::collections::HashMap;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{IntMat2, Mat2};
use crate::model::ToralEndomorphism;
use crate::shadowing::{self, NewtonReport};
use crate::parallel;
use crate::stats;
use crate::torus::{LiftPoint, TorusPoint};

/// Largest period accepted by [`find_periodic`].
pub const MAX_CENSUS_PERIOD: u32 = 8;
/// Two periodic points closer than this are the same point.
pub const DEDUP_TOLERANCE: f64 = 1e-7;
const CLOSURE_TOLERANCE: f64 = 1e-10;

/// `|det(Aⁿ − I)|`, the number of solutions of `Aⁿx = x` on the torus.
pub fn linear_periodic_count(a: &IntMat2, n: u32) -> Result<u64> {
    Ok(period_matrix(a, n)?.det().unsigned_abs())
}

fn period_matrix(a: &IntMat2, n: u32) -> Result<IntMat2> {
    if n == 0 {
        return Err(Error::InvalidArgument("period must be positive".into()));
    }
    let m = a
        .checked_pow(n)
        .ok_or_else(|| Error::InvalidArgument(format!("A^{n} overflows 64-bit integers")))?
        .minus_identity();
    if m.det() == 0 {
        return Err(Error::DegenerateMatrix { n });
    }
    Ok(m)
}

/// An orbit of the linear map with exact rational points `v_i / q` and
/// integer offsets `A v_i/q − v_{i+1}/q = c_i`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct RationalOrbit {
    pub denominator: i64,
    pub numerators: Vec<[i64; 2]>,
    pub offsets: Vec<[i64; 2]>,
}

impl RationalOrbit {
    pub fn period(&self) -> usize {
        self.numerators.len()
    }

    pub fn lifts(&self) -> Vec<LiftPoint> {
        let q = self.denominator as f64;
        self.numerators
            .iter()
            .map(|v| LiftPoint::new(v[0] as f64 / q, v[1] as f64 / q))
            .collect()
    }

    pub fn points(&self) -> Vec<TorusPoint> {
        self.lifts().iter().map(LiftPoint::project).collect()
    }
}

/// All solutions of `Aⁿx = x`, grouped into `A`-orbits (of periods dividing
/// `n`), in exact arithmetic.
pub fn linear_periodic_orbits(a: &IntMat2, n: u32) -> Result<Vec<RationalOrbit>> {
    let m = period_matrix(a, n)?;
    let d = m.det();
    let q = d.abs();
    let sign = d.signum();
    let mm = &m.0;
    let adj = IntMat2([[mm[1][1], -mm[0][1]], [-mm[1][0], mm[0][0]]]);
    let numerators: Vec<[i64; 2]> = m
        .coset_representatives()?
        .into_iter()
        .map(|c| {
            let v = adj.mul_vec(c);
            [(sign * v[0]).rem_euclid(q), (sign * v[1]).rem_euclid(q)]
        })
        .collect();
    let index: HashMap<[i64; 2], usize> =
        numerators.iter().enumerate().map(|(i, v)| (*v, i)).collect();
    if index.len() != numerators.len() {
        return Err(Error::InvalidArgument(
            "coset representatives produced repeated points".into(),
        ));
    }
    let step = |v: [i64; 2]| {
        let w = a.mul_vec(v);
        [w[0].rem_euclid(q), w[1].rem_euclid(q)]
    };
    let mut seen = vec![false; numerators.len()];
    let mut orbits = Vec::new();
    for start in 0..numerators.len() {
        if seen[start] {
            continue;
        }
        let mut cycle = vec![numerators[start]];
        seen[start] = true;
        loop {
            let w = step(*cycle.last().unwrap());
            if w == cycle[0] {
                break;
            }
            let i = *index.get(&w).ok_or_else(|| {
                Error::InvalidArgument("A does not permute the solutions of Aⁿx = x".into())
            })?;
            seen[i] = true;
            cycle.push(w);
        }
        let len = cycle.len();
        let offsets = (0..len)
            .map(|i| {
                let av = a.mul_vec(cycle[i]);
                let nx = cycle[(i + 1) % len];
                [(av[0] - nx[0]) / q, (av[1] - nx[1]) / q]
            })
            .collect();
        orbits.push(RationalOrbit {
            denominator: q,
            numerators: cycle,
            offsets,
        });
    }
    Ok(orbits)
}

/// A periodic orbit with its Lyapunov exponents.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PeriodicOrbit {
    pub period: usize,
    pub points: Vec<TorusPoint>,
    pub lambda_u: f64,
    pub lambda_s: f64,
}

impl PeriodicOrbit {
    /// Validate `f(points[i]) = points[i+1 mod n]` to 1e-10 and compute the
    /// exponents.
    pub fn from_points(f: &ToralEndomorphism, points: Vec<TorusPoint>) -> Result<Self> {
        let n = points.len();
        if n == 0 {
            return Err(Error::InvalidArgument("empty orbit".into()));
        }
        let err = closure_error(f, &points);
        if err > CLOSURE_TOLERANCE {
            return Err(Error::InvalidArgument(format!(
                "points do not form an orbit (closure error {err:.3e})"
            )));
        }
        let (lambda_u, lambda_s) = exponents(f, &points);
        Ok(Self {
            period: n,
            points,
            lambda_u,
            lambda_s,
        })
    }

    pub fn representative(&self) -> TorusPoint {
        self.points[0]
    }

    pub fn closure_error(&self, f: &ToralEndomorphism) -> f64 {
        closure_error(f, &self.points)
    }

    /// `(1/n) Σ log Jf` over the orbit.
    pub fn mean_log_jacobian(&self, f: &ToralEndomorphism) -> f64 {
        stats::sum(self.points.iter().map(|p| f.log_jacobian(*p))) / self.period as f64
    }
}

fn closure_error(f: &ToralEndomorphism, points: &[TorusPoint]) -> f64 {
    let n = points.len();
    (0..n).fold(0.0, |m: f64, i| m.max(f.apply(points[i]).distance(&points[(i + 1) % n])))
}

fn exponents(f: &ToralEndomorphism, points: &[TorusPoint]) -> (f64, f64) {
    let jacs: Vec<Mat2> = points.iter().map(|p| f.jacobian(*p)).collect();
    let split = f.splitting();
    let fr = shadowing::cyclic_frames(&jacs, split.e_u, split.e_s);
    (fr.exponent_u(), fr.exponent_s())
}

/// `(λᵘ, λˢ)` of the orbit from the unstable and stable frames along it.
pub fn lyapunov_at(f: &ToralEndomorphism, orbit: &PeriodicOrbit) -> (f64, f64) {
    exponents(f, &orbit.points)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CensusOptions {
    /// Fail with `CountMismatch` when the distinct points found do not
    /// number `|det(Aⁿ − I)|`.
    pub require_count: bool,
    pub threads: usize,
}

impl Default for CensusOptions {
    fn default() -> Self {
        Self {
            require_count: true,
            threads: 1,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SeedFailure {
    pub seed: TorusPoint,
    pub period: usize,
    pub message: String,
}

/// All periodic points of period dividing `n`, grouped into orbits.
#[derive(Clone, Debug, Serialize)]
pub struct PeriodicCensus {
    pub period: u32,
    pub expected: u64,
    pub found: u64,
    pub orbits: Vec<PeriodicOrbit>,
    pub failures: Vec<SeedFailure>,
    /// Worst Newton residual over the converged seeds.
    pub max_residual: f64,
}

impl PeriodicCensus {
    /// Orbits whose minimal period is exactly the census period.
    pub fn primitive(&self) -> impl Iterator<Item = &PeriodicOrbit> {
        self.orbits
            .iter()
            .filter(move |o| o.period == self.period as usize)
    }
}

pub fn find_periodic(f: &ToralEndomorphism, n: u32) -> Result<PeriodicCensus> {
    find_periodic_with(f, n, &CensusOptions::default())
}

fn continue_orbit(f: &ToralEndomorphism, seed: &RationalOrbit) -> Result<(PeriodicOrbit, NewtonReport)> {
    let mut lifts = seed.lifts();
    let report = shadowing::refine_cycle(f, &mut lifts, &seed.offsets)?;
    let points = lifts.iter().map(LiftPoint::project).collect();
    Ok((PeriodicOrbit::from_points(f, points)?, report))
}

/// Continue every `A`-periodic orbit of period dividing `n` to `f` by Newton
/// on the lifted periodic system with the linear orbit's integer offsets.
pub fn find_periodic_with(
    f: &ToralEndomorphism,
    n: u32,
    opts: &CensusOptions,
) -> Result<PeriodicCensus> {
    if n == 0 || n > MAX_CENSUS_PERIOD {
        return Err(Error::InvalidArgument(format!(
            "census period must lie in 1..={MAX_CENSUS_PERIOD}"
        )));
    }
    let expected = linear_periodic_count(f.matrix(), n)?;
    let seeds = linear_periodic_orbits(f.matrix(), n)?;
    let results: Vec<Result<(PeriodicOrbit, NewtonReport)>> =
        parallel::map_indexed(seeds.len(), opts.threads, |i| continue_orbit(f, &seeds[i]));

    let mut orbits = Vec::new();
    let mut failures = Vec::new();
    let mut max_residual = 0.0_f64;
    for (seed, res) in seeds.iter().zip(results) {
        match res {
            Ok((orbit, report)) => {
                max_residual = max_residual.max(report.residual);
                orbits.push(orbit);
            }
            Err(e) => failures.push(SeedFailure {
                seed: seed.points()[0],
                period: seed.period(),
                message: e.to_string(),
            }),
        }
    }
    let found = count_distinct(orbits.iter().flat_map(|o| o.points.iter().copied()));
    if opts.require_count && found != expected {
        return Err(Error::CountMismatch {
            period: n,
            found: found as usize,
            expected: expected as usize,
        });
    }
    Ok(PeriodicCensus {
        period: n,
        expected,
        found,
        orbits,
        failures,
        max_residual,
    })
}

/// Number of distinct torus points, identifying points within
/// [`DEDUP_TOLERANCE`].
pub fn count_distinct(points: impl IntoIterator<Item = TorusPoint>) -> u64 {
    let cells = (1.0 / DEDUP_TOLERANCE).floor() as i64;
    let cell = |p: &TorusPoint| {
        (
            ((p.x1() * cells as f64) as i64).min(cells - 1),
            ((p.x2() * cells as f64) as i64).min(cells - 1),
        )
    };
    let mut grid: HashMap<(i64, i64), Vec<TorusPoint>> = HashMap::new();
    let mut count = 0;
    for p in points {
        let (i, j) = cell(&p);
        let duplicate = (-1..=1).any(|di| {
            (-1..=1).any(|dj| {
                let key = ((i + di).rem_euclid(cells), (j + dj).rem_euclid(cells));
                grid.get(&key)
                    .is_some_and(|v| v.iter().any(|q| q.distance(&p) < DEDUP_TOLERANCE))
            })
        });
        if !duplicate {
            grid.entry((i, j)).or_default().push(p);
            count += 1;
        }
    }
    count
}

/// Per-orbit comparison of exponents against the linearization.
#[derive(Clone, Debug, Serialize)]
pub struct OrbitDefect {
    pub period: usize,
    pub representative: TorusPoint,
    pub lambda_u: f64,
    pub lambda_s: f64,
    pub defect: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct DefectReport {
    pub max_period: u32,
    pub lambda_u_linear: f64,
    pub lambda_s_linear: f64,
    pub orbits: Vec<OrbitDefect>,
    /// Max over orbits of `max(|λᵘ − λᵘ_A|, |λˢ − λˢ_A|)`.
    pub defect: f64,
}

/// The periodic-data defect over all orbits of minimal period `≤ max_period`.
pub fn periodic_data_defect(
    f: &ToralEndomorphism,
    max_period: u32,
    opts: &CensusOptions,
) -> Result<DefectReport> {
    let split = f.splitting();
    let (lu, ls) = (split.lambda_u.abs().ln(), split.lambda_s.abs().ln());
    let mut orbits = Vec::new();
    for n in 1..=max_period {
        let census = find_periodic_with(f, n, opts)?;
        for o in census.primitive() {
            orbits.push(OrbitDefect {
                period: o.period,
                representative: o.representative(),
                lambda_u: o.lambda_u,
                lambda_s: o.lambda_s,
                defect: (o.lambda_u - lu).abs().max((o.lambda_s - ls).abs()),
            });
        }
    }
    let defect = orbits.iter().fold(0.0, |m: f64, o| m.max(o.defect));
    Ok(DefectReport {
        max_period,
        lambda_u_linear: lu,
        lambda_s_linear: ls,
        orbits,
        defect,
    })
}
