//! One function per subcommand. Each writes its tables through [`Output`],
//! records asserted [`Check`]s and stores headline numbers in `results`.

use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Map, Value};

use anosov_core::bundles::{cone_margins, BackwardBranch, Bundle, ConeParams, DirectionField};
use anosov_core::conjugacy::{
    base_conjugacy, compare_methods, density_ratio_conjugacy, leaf_ode_conjugacy, matched_densities,
    regularity_estimate, ConjugacyMap, ConjugacyOptions, LeafOdeOptions, RatioOptions, RegularityOptions,
};
use anosov_core::leaf::{trace, ExactDirections, TraceOptions};
use anosov_core::linalg;
use anosov_core::livsic::{conformal_length, observable_log_unstable, scaling_ratio, CohomologySolver, LivsicOptions};
use anosov_core::periodic::{find_periodic_with, CensusOptions, PeriodicOrbit};
use anosov_core::shadowing::{
    closing_lemma_shadow, specification_concatenate, PseudoOrbitSegment, SpecificationParams,
    DEFAULT_CLOSING_GAMMA,
};
use anosov_core::srb::{
    entropy_report, invariance_defect, invariant_density, linear_spectrum, random_boxes, stable_truncation_fit,
    unstable_leaf_density, unstable_truncation_fit, BirkhoffOptions, DensityOptions, EntropyOptions,
    SeparatedOptions, TruncationFit,
};
use anosov_core::{Error, GridField, LiftPoint, ModelFile, ModelKind, Result, ToralEndomorphism, TorusPoint};

use crate::config::ExperimentConfig;
use crate::output::{num, Check, Output};

/// Exact closed orbits should come back from Newton untouched.
const EXACT_SHADOW_TOLERANCE: f64 = 1e-12;
const BOX_SIDES: [f64; 3] = [1.0 / 8.0, 1.0 / 16.0, 1.0 / 32.0];
/// Base point of the leaf density and the truncation-convergence pairs.
const UNSTABLE_PAIR_DISTANCE: f64 = 0.2;
const STABLE_PAIR_DISTANCE: f64 = 0.03;

pub struct Run<'a> {
    cfg: &'a ExperimentConfig,
    out: &'a mut Output,
    model: Option<(PathBuf, ModelFile, ToralEndomorphism)>,
    section: Value,
    checks: Vec<Check>,
    results: Map<String, Value>,
}

fn to_json(v: &impl Serialize) -> Value {
    serde_json::to_value(v).expect("reports serialize to JSON")
}

impl<'a> Run<'a> {
    pub fn new(cfg: &'a ExperimentConfig, out: &'a mut Output) -> Self {
        Self {
            cfg,
            out,
            model: None,
            section: Value::Null,
            checks: Vec::new(),
            results: Map::new(),
        }
    }

    fn load_model(&mut self) -> Result<ToralEndomorphism> {
        if let Some((_, _, f)) = &self.model {
            return Ok(f.clone());
        }
        let path = self
            .cfg
            .model
            .clone()
            .ok_or_else(|| Error::InvalidArgument("no model given (use --model or `model` in the config)".into()))?;
        let file = ModelFile::load(&path)?;
        let f = file.build()?;
        self.model = Some((path, file, f.clone()));
        Ok(f)
    }

    fn check(&mut self, c: Check) {
        self.checks.push(c);
    }

    fn result(&mut self, key: &str, v: Value) {
        self.results.insert(key.to_string(), v);
    }

    fn threads(&self) -> usize {
        self.cfg.threads
    }

    /// Checks, results, model echo and config echo.
    pub fn finish(self) -> (Vec<Check>, Value, Value, Value) {
        let model = match &self.model {
            Some((path, file, _)) => json!({ "path": path, "file": to_json(file) }),
            None => Value::Null,
        };
        (self.checks, Value::Object(self.results), model, self.section)
    }
}

pub fn dispatch(name: &str, run: &mut Run) -> Result<()> {
    match name {
        "certify" => certify(run),
        "periodic" => periodic(run),
        "livsic" => livsic(run),
        "conformal" => conformal(run),
        "srb" => srb(run),
        "conjugacy" => conjugacy(run),
        "specification" => specification(run),
        "spectrum" => spectrum(run),
        other => Err(Error::InvalidArgument(format!("unknown subcommand {other}"))),
    }
}

fn certify(run: &mut Run) -> Result<()> {
    let c = run.cfg.certify.clone();
    run.section = to_json(&c);
    let f = run.load_model()?;
    let params = ConeParams {
        unstable_half_angle: c.unstable_half_angle,
        stable_half_angle: c.stable_half_angle,
        lambda: c.lambda,
        c: c.c,
    };
    let validation = f.validate_with(c.grid, &params)?;
    let cert = cone_margins(&f, &params, c.grid);
    run.check(Check::at_least("unstable_cone_growth", cert.min_unstable_growth, c.lambda));
    run.check(Check::at_least("stable_cone_growth", cert.min_stable_growth, c.lambda));
    run.check(Check::at_least("unstable_cone_angle_margin", cert.unstable_angle_margin, 0.0));
    run.check(Check::at_least("stable_cone_angle_margin", cert.stable_angle_margin, 0.0));
    run.check(Check::at_most("homotopy_defect", validation.homotopy_defect, 1e-10));
    run.check(Check::at_least("min_abs_jacobian", validation.min_abs_det, f64::MIN_POSITIVE));
    run.result("validation", to_json(&validation));
    run.result("certificate", to_json(&cert));
    Ok(())
}

fn census_options(run: &Run) -> CensusOptions {
    CensusOptions {
        require_count: false,
        threads: run.threads(),
    }
}

fn periodic(run: &mut Run) -> Result<()> {
    let c = run.cfg.periodic.clone();
    run.section = to_json(&c);
    let f = run.load_model()?;
    let split = f.splitting();
    let (lu, ls) = (split.lambda_u.abs().ln(), split.lambda_s.abs().ln());
    let opts = census_options(run);
    let mut counts = Vec::new();
    let mut orbits = Vec::new();
    let mut points = Vec::new();
    let mut defect = 0.0f64;
    for n in 1..=c.max_period {
        let census = find_periodic_with(&f, n, &opts)?;
        let primitive: Vec<&PeriodicOrbit> = census.primitive().collect();
        counts.push(vec![
            n.to_string(),
            census.expected.to_string(),
            census.found.to_string(),
            primitive.len().to_string(),
            num(census.max_residual),
        ]);
        run.check(Check::at_most(
            &format!("census_count_period_{n}"),
            census.found.abs_diff(census.expected) as f64,
            0.0,
        ));
        for (k, o) in primitive.iter().enumerate() {
            let (du, ds) = ((o.lambda_u - lu).abs(), (o.lambda_s - ls).abs());
            defect = defect.max(du).max(ds);
            let r = o.representative();
            orbits.push(vec![
                n.to_string(),
                k.to_string(),
                num(r.x1()),
                num(r.x2()),
                num(o.lambda_u),
                num(o.lambda_s),
                num(du.max(ds)),
            ]);
            for (j, p) in o.points.iter().enumerate() {
                points.push(vec![n.to_string(), k.to_string(), j.to_string(), num(p.x1()), num(p.x2())]);
            }
        }
    }
    run.out.csv(
        "counts.csv",
        &["period", "expected", "found", "primitive_orbits", "max_newton_residual"],
        counts,
    )?;
    run.out.csv(
        "orbits.csv",
        &["period", "orbit", "x1", "x2", "lambda_u", "lambda_s", "defect"],
        orbits,
    )?;
    run.out.csv("orbit_points.csv", &["period", "orbit", "step", "x1", "x2"], points)?;
    if c.require_rigid {
        run.check(Check::at_most("periodic_data_defect", defect, c.rigidity_tolerance));
    }
    run.result(
        "periodic_data",
        json!({
            "lambda_u_linear": lu,
            "lambda_s_linear": ls,
            "defect": defect,
            "rigid": defect <= c.rigidity_tolerance,
        }),
    );
    Ok(())
}

fn livsic_options(run: &Run) -> LivsicOptions {
    let c = &run.cfg.livsic;
    LivsicOptions {
        grid: c.grid,
        cutoff: c.cutoff,
        depth: c.depth,
        max_period: c.max_period,
        obstruction_tolerance: c.obstruction_tolerance,
        special_tolerance: c.special_tolerance,
        special_samples: c.special_samples,
        residual_tolerance: c.residual_tolerance,
        seed: run.cfg.seed,
        threads: run.threads(),
    }
}

/// `ψ = log ‖Df|Eᵘ‖ − λᵘ` and its transfer function `φ`, with the residual
/// left to the caller's check.
fn unstable_potential(run: &mut Run, f: &ToralEndomorphism) -> Result<(GridField, GridField, f64)> {
    let opts = livsic_options(run);
    let obs = observable_log_unstable(f, &opts)?;
    let sol = CohomologySolver::new(f, opts.grid, opts.cutoff, opts.threads)?.solve(&obs.field, f64::INFINITY)?;
    run.result(
        "observable",
        json!({
            "lambda": obs.lambda,
            "exponent_spread": obs.exponent_spread,
            "max_periodic_mean": obs.max_periodic_mean,
            "orbits_checked": obs.orbits_checked,
            "special_spread": obs.special_spread,
        }),
    );
    run.result(
        "cohomology",
        json!({
            "sup_residual": sol.sup_residual,
            "rms_residual": sol.rms_residual,
            "iterations": sol.iterations,
            "normal_residual": sol.normal_residual,
            "phi_sup_norm": sol.phi.sup_norm(),
        }),
    );
    Ok((obs.field, sol.phi, sol.sup_residual))
}

fn livsic(run: &mut Run) -> Result<()> {
    let c = run.cfg.livsic.clone();
    run.section = to_json(&c);
    let f = run.load_model()?;
    let (psi, phi, residual) = unstable_potential(run, &f)?;
    run.check(Check::at_most("cohomology_sup_residual", residual, c.residual_tolerance));
    run.out.grid("psi.grid", &psi)?;
    run.out.grid("phi.grid", &phi)?;
    let n = psi.size();
    let stride = (n / c.sample_grid.min(n)).max(1);
    let mut rows = Vec::new();
    for i in (0..n).step_by(stride) {
        for j in (0..n).step_by(stride) {
            let x = TorusPoint::new(i as f64 / n as f64, j as f64 / n as f64);
            let (ps, ph) = (psi.value(i, j), phi.value(i, j));
            let res = phi.eval(f.apply(x)) - ph - ps;
            rows.push(vec![num(x.x1()), num(x.x2()), num(ps), num(ph), num(res)]);
        }
    }
    run.out.csv("livsic.csv", &["x1", "x2", "psi", "phi", "residual"], rows)
}

fn conformal(run: &mut Run) -> Result<()> {
    let c = run.cfg.conformal.clone();
    run.section = json!({ "conformal": to_json(&c), "livsic": to_json(&run.cfg.livsic) });
    let f = run.load_model()?;
    let tol = c.tolerance.unwrap_or(if f.is_linear() { 1e-9 } else { 1e-6 });
    let (_, phi, _) = unstable_potential(run, &f)?;
    let field = DirectionField::build(&f, Bundle::Unstable, c.field_grid, c.field_depth)?;
    let lin = *f.splitting();
    let target = lin.lambda_u.abs();
    let opts = TraceOptions::default();
    let mut rng = ChaCha8Rng::seed_from_u64(run.cfg.seed);
    let mut rows = Vec::with_capacity(c.pairs);
    let mut worst = 0.0f64;
    for i in 0..c.pairs {
        let a = LiftPoint::new(rng.gen(), rng.gen());
        let len = rng.gen_range(c.min_length..c.max_length);
        let sign = if rng.gen() { 1.0 } else { -1.0 };
        let seg = trace(&field, &lin, a, linalg::scale(sign, lin.e_u), len, &opts)?;
        let d = conformal_length(&phi, &seg);
        let ratio = scaling_ratio(&f, &field, &phi, &seg, &opts)?;
        let rel = (ratio - target).abs() / target;
        worst = worst.max(rel);
        let b = seg.end().project();
        rows.push(vec![
            i.to_string(),
            num(a.u1),
            num(a.u2),
            num(b.x1()),
            num(b.x2()),
            num(seg.length()),
            num(d),
            num(ratio * d),
            num(ratio),
            num(rel),
        ]);
    }
    run.out.csv(
        "scaling.csv",
        &["pair", "a1", "a2", "b1", "b2", "arclength", "du_ab", "du_fa_fb", "ratio", "relative_error"],
        rows,
    )?;
    run.check(Check::at_most("conformal_scaling_relative_error", worst, tol));
    run.result("target_ratio", json!(target));
    Ok(())
}

fn fit_checks(run: &mut Run, label: &str, fit: &TruncationFit, min_r_squared: f64) {
    match fit.fit {
        Some(line) => {
            run.check(Check::at_most(&format!("{label}_truncation_theta"), fit.theta, 1.0 - 1e-12));
            run.check(Check::at_least(&format!("{label}_truncation_r_squared"), line.r_squared, min_r_squared));
        }
        None => run.check(Check::holds(&format!("{label}_products_exact"), true)),
    }
}

fn srb(run: &mut Run) -> Result<()> {
    let c = run.cfg.srb.clone();
    run.section = to_json(&c);
    let f = run.load_model()?;
    let threads = run.threads();
    let seed = run.cfg.seed;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let dens_opts = DensityOptions {
        grid: c.grid,
        cutoff: c.cutoff,
        max_period: run.cfg.livsic.max_period,
        obstruction_tolerance: run.cfg.livsic.obstruction_tolerance,
        residual_tolerance: f64::INFINITY,
        threads,
    };
    let measure = invariant_density(&f, &dens_opts)?;
    run.out.grid("density.grid", &measure.density)?;
    run.result("density_cohomology_residual", json!(measure.sup_residual));
    let boxes = random_boxes(&mut rng, c.boxes, &BOX_SIDES);
    let inv = invariance_defect(&f, &measure, &boxes, c.subsamples, threads)?;
    run.out.csv(
        "boxes.csv",
        &["x1", "x2", "side", "mass", "preimage_mass", "defect"],
        inv.boxes.iter().map(|b| {
            vec![
                num(b.region.x1),
                num(b.region.x2),
                num(b.region.w),
                num(b.mass),
                num(b.preimage_mass),
                num((b.mass - b.preimage_mass).abs()),
            ]
        }),
    )?;
    run.check(Check::at_most("invariance_defect", inv.max_defect, c.invariance_tolerance));

    let ent = entropy_report(
        &f,
        &EntropyOptions {
            birkhoff: BirkhoffOptions {
                orbits: c.birkhoff_orbits,
                length: c.birkhoff_length,
                burn_in: c.birkhoff_burn_in,
                seed,
            },
            separated: SeparatedOptions {
                points: c.separated_points,
                epsilon: c.epsilon,
                min_n: c.min_n,
                max_n: c.max_n,
                ..SeparatedOptions::default()
            },
            balance_tolerance: c.balance_tolerance,
            entropy_tolerance: c.entropy_tolerance,
            threads,
        },
    )?;
    for ic in &ent.checks {
        run.check(Check::at_most(&ic.name, ic.value.abs(), ic.tolerance));
    }
    run.out.csv(
        "separated.csv",
        &["n", "count", "log_count"],
        ent.separated
            .counts
            .iter()
            .map(|(n, k)| vec![n.to_string(), k.to_string(), num((*k as f64).ln())]),
    )?;
    run.out.csv(
        "birkhoff.csv",
        &["orbit", "lambda_u", "lambda_s"],
        ent.birkhoff
            .per_orbit_u
            .iter()
            .zip(&ent.birkhoff.per_orbit_s)
            .enumerate()
            .map(|(i, (u, s))| vec![i.to_string(), num(*u), num(*s)]),
    )?;
    run.result(
        "entropy",
        json!({
            "lambda_u": ent.lambda_u,
            "lambda_s": ent.lambda_s,
            "log_k": ent.log_k,
            "h_plus": ent.h_plus,
            "h_minus": ent.h_minus,
            "separated_entropy": ent.separated.entropy,
            "separated_fit_r_squared": ent.separated.fit.r_squared,
        }),
    );

    let x0 = TorusPoint::new(rng.gen(), rng.gen());
    let fu = unstable_truncation_fit(&f, x0, UNSTABLE_PAIR_DISTANCE, c.truncation_depth)?;
    let fs = stable_truncation_fit(&f, x0, STABLE_PAIR_DISTANCE, c.truncation_depth)?;
    fit_checks(run, "delta_u", &fu, c.min_r_squared);
    fit_checks(run, "delta_s", &fs, c.min_r_squared);
    let mut rows = Vec::new();
    for fit in [&fu, &fs] {
        let tails: std::collections::BTreeMap<usize, f64> = fit.tails.iter().copied().collect();
        for (k, p) in fit.partial.iter().enumerate() {
            rows.push(vec![
                to_json(&fit.bundle).as_str().unwrap_or("").to_string(),
                (k + 1).to_string(),
                num(*p),
                tails.get(&(k + 1)).map_or(String::new(), |t| num(*t)),
            ]);
        }
    }
    run.out.csv("truncations.csv", &["bundle", "k", "partial_product", "tail"], rows)?;
    run.result(
        "truncation_fits",
        json!({
            "base": [x0.x1(), x0.x2()],
            "unstable": { "theta": fu.theta, "fit": fu.fit, "reliable": fu.reliable },
            "stable": { "theta": fs.theta, "fit": fs.fit, "reliable": fs.reliable },
        }),
    );

    let src = ExactDirections::new(&f, Bundle::Unstable, 30);
    let branch = BackwardBranch::zero(&f, x0, c.leaf_truncation)?;
    let leaf = unstable_leaf_density(&f, &src, &branch, c.leaf_half_width, c.leaf_truncation, &TraceOptions::default())?;
    let nodes = leaf.segment.nodes();
    let pts = leaf.segment.points();
    run.out.csv(
        "leaf_density.csv",
        &["s", "x1", "x2", "density"],
        (0..nodes.len()).map(|i| vec![num(nodes[i]), num(pts[i].x1()), num(pts[i].x2()), num(leaf.values[i])]),
    )?;
    run.result("leaf_normalizer", json!(leaf.normalizer));
    Ok(())
}

fn warp_of(f: &ToralEndomorphism) -> Option<anosov_core::model::TrigDisplacement> {
    match f.kind() {
        ModelKind::Conjugated(w) => Some(w.clone()),
        _ => None,
    }
}

fn conjugacy(run: &mut Run) -> Result<()> {
    let c = run.cfg.conjugacy.clone();
    run.section = json!({ "conjugacy": to_json(&c), "livsic": to_json(&run.cfg.livsic) });
    let f = run.load_model()?;
    let threads = run.threads();
    let h = base_conjugacy(
        &f,
        &ConjugacyOptions {
            grid: c.grid,
            tolerance: c.tolerance,
            max_sweeps: c.max_sweeps,
            residual_grid: c.residual_grid,
            threads,
        },
    )?;
    run.out.grid("u1.grid", &h.u1)?;
    run.out.grid("u2.grid", &h.u2)?;
    run.check(Check::at_most("conjugacy_residual", h.residual, c.residual_tolerance));
    run.result(
        "base",
        json!({
            "sweeps": h.sweeps,
            "last_update": h.last_update,
            "residual": h.residual,
            "max_displacement": h.max_displacement,
        }),
    );
    if let Some(w) = warp_of(&f) {
        let err = h.distance_to(|q| TorusPoint::from(w.diffeo_apply(q.coords())), c.grid, threads);
        run.check(Check::at_most("recovered_h_error", err, c.warp_tolerance));
    }
    let m = 64.min(c.grid);
    let samples = (0..m * m).map(|k| {
        let q = TorusPoint::new((k / m) as f64 / m as f64, (k % m) as f64 / m as f64);
        let p = h.apply(q);
        vec![num(q.x1()), num(q.x2()), num(p.x1()), num(p.x2())]
    });
    run.out.csv("h.csv", &["q1", "q2", "h1", "h2"], samples.collect::<Vec<_>>())?;

    let lin = *f.splitting();
    let mut regularity = Map::new();
    for bundle in [Bundle::Unstable, Bundle::Stable] {
        let est = regularity_estimate(
            &h,
            &lin,
            bundle,
            &RegularityOptions {
                samples: c.regularity_samples,
                seed: run.cfg.seed,
                ..RegularityOptions::default()
            },
        )?;
        regularity.insert(to_json(&bundle).as_str().unwrap_or("").to_string(), to_json(&est));
    }
    run.out.json("regularity.json", &Value::Object(regularity.clone()))?;
    run.result(
        "regularity",
        Value::Object(
            regularity
                .iter()
                .map(|(k, v)| {
                    (
                        k.clone(),
                        json!({
                            "exponent": v["exponent"],
                            "r_squared": v["r_squared"],
                            "stabilized": v["stabilized"],
                            "flagged": v["flagged"],
                        }),
                    )
                })
                .collect(),
        ),
    );

    if c.methods {
        compare_constructions(run, &f, &h)?;
    }
    Ok(())
}

/// Leaf ODE and density-ratio conjugacies on the `A`-leaf piece from the
/// configured origin, compared with the grid conjugacy.
fn compare_constructions(run: &mut Run, f: &ToralEndomorphism, h: &ConjugacyMap) -> Result<()> {
    let c = run.cfg.conjugacy.clone();
    let (_, phi, _) = unstable_potential(run, f)?;
    let lin = *f.splitting();
    let origin = LiftPoint::new(c.origin[0], c.origin[1]);
    let src = ExactDirections::new(f, Bundle::Unstable, 30);
    let anchors: Vec<TorusPoint> = (0..c.anchors.max(2))
        .map(|j| h.apply(origin.translate(linalg::scale(j as f64, lin.e_u)).project()))
        .collect();
    let ode = leaf_ode_conjugacy(f, &src, &phi, origin, &anchors, &LeafOdeOptions::default())?;

    let a = ToralEndomorphism::linear(*f.matrix())?;
    let src_a = ExactDirections::new(&a, Bundle::Unstable, 30);
    let identity = base_conjugacy(
        &a,
        &ConjugacyOptions {
            grid: 16,
            residual_grid: 16,
            ..ConjugacyOptions::default()
        },
    )?;
    let (rho_a, rho_f) = matched_densities(
        (&a, &src_a, &identity),
        (f, &src, h),
        origin,
        c.ratio_length,
        c.truncation,
        &TraceOptions::default(),
    )?;
    let ratio = density_ratio_conjugacy(&rho_a, &rho_f, &RatioOptions::default())?;
    let agree = compare_methods(h, &ode, &ratio, c.samples)?;
    for (name, v) in [
        ("base_vs_leaf_ode", agree.base_vs_ode),
        ("base_vs_density_ratio", agree.base_vs_ratio),
        ("leaf_ode_vs_density_ratio", agree.ode_vs_ratio),
        ("leaf_ode_intertwining", ode.intertwining_defect),
    ] {
        run.check(Check::at_most(name, v, c.agreement_tolerance));
    }
    let rows = (0..=c.samples).map(|i| {
        let theta = agree.theta_max * i as f64 / c.samples as f64;
        let hb = h.apply(ode.leaf_point(theta).project());
        let ho = ode.at(theta).project();
        let hr = ratio.at(theta).project();
        [theta, hb.x1(), hb.x2(), ho.x1(), ho.x2(), hr.x1(), hr.x2()]
            .iter()
            .map(|v| num(*v))
            .collect::<Vec<_>>()
    });
    run.out.csv(
        "methods.csv",
        &["theta", "base1", "base2", "ode1", "ode2", "ratio1", "ratio2"],
        rows.collect::<Vec<_>>(),
    )?;
    run.result(
        "methods",
        json!({
            "agreement": agree,
            "leaf_ode": {
                "scale": ode.ode.scale,
                "anchor_miss": ode.anchor_miss,
                "intertwining_defect": ode.intertwining_defect,
            },
            "density_ratio": {
                "endpoint_miss": ratio.endpoint_miss,
                "transport_defect": ratio.transport_defect,
            },
        }),
    );
    Ok(())
}

fn first_orbit(f: &ToralEndomorphism, n: u32, opts: &CensusOptions) -> Result<PeriodicOrbit> {
    find_periodic_with(f, n, opts)?
        .primitive()
        .next()
        .cloned()
        .ok_or_else(|| Error::InvalidArgument(format!("no orbit of minimal period {n}")))
}

fn specification(run: &mut Run) -> Result<()> {
    let c = run.cfg.specification.clone();
    run.section = to_json(&c);
    let f = run.load_model()?;
    let opts = census_options(run);
    let mut rng = ChaCha8Rng::seed_from_u64(run.cfg.seed);

    // Closing lemma: an exact orbit, then the same orbit with noise.
    let o = first_orbit(&f, c.noisy_period, &opts)?;
    let exact = closing_lemma_shadow(&f, &PseudoOrbitSegment::from_cycle(&f, &o.points)?, DEFAULT_CLOSING_GAMMA)?;
    run.check(Check::at_most("exact_orbit_shadow_distance", exact.distance, EXACT_SHADOW_TOLERANCE));
    let noisy: Vec<TorusPoint> = o
        .points
        .iter()
        .map(|p| {
            let d: [f64; 2] = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            TorusPoint::new(p.x1() + c.noise * d[0], p.x2() + c.noise * d[1])
        })
        .collect();
    let shadow = closing_lemma_shadow(&f, &PseudoOrbitSegment::from_cycle(&f, &noisy)?, DEFAULT_CLOSING_GAMMA)?;
    let recovery = shadow
        .orbit
        .points
        .iter()
        .zip(&o.points)
        .fold(0.0f64, |m, (a, b)| m.max(a.distance(b)));
    run.check(Check::at_most("noisy_orbit_shadow_distance", shadow.distance, c.closing_tolerance));
    run.check(Check::at_most("noisy_orbit_recovery", recovery, c.closing_tolerance));

    // Specification: alternate blocks of p and of the period-q orbit whose
    // exponent differs most from p's.
    let p = first_orbit(&f, c.p_period, &opts)?;
    let q = find_periodic_with(&f, c.q_period, &opts)?
        .primitive()
        .max_by(|a, b| {
            (a.lambda_u - p.lambda_u)
                .abs()
                .total_cmp(&(b.lambda_u - p.lambda_u).abs())
        })
        .cloned()
        .ok_or_else(|| Error::InvalidArgument(format!("no orbit of minimal period {}", c.q_period)))?;
    let params = SpecificationParams {
        gap: c.gap,
        epsilon: c.epsilon,
        tolerance: c.tolerance,
        min_checked_block: c.min_checked_block,
        max_total: c.max_total,
        ..SpecificationParams::default()
    };
    let spec = specification_concatenate(&f, &p, &q, &c.blocks, &params)?;
    let r = &spec.report;
    run.check(Check::at_most("specification_max_jump", r.max_jump, c.epsilon));
    run.check(Check::at_most("specification_closure", spec.orbit.closure_error(&f), 1e-10));
    for b in r.blocks.iter().filter(|b| b.checked) {
        run.check(Check::at_most(&format!("block_{}_deviation", b.index), b.deviation, c.tolerance));
    }
    run.out.csv(
        "blocks.csv",
        &["block", "source", "start", "length", "target", "average", "deviation", "checked"],
        r.blocks.iter().map(|b| {
            vec![
                b.index.to_string(),
                b.source.to_string(),
                b.start.to_string(),
                b.length.to_string(),
                num(b.target),
                num(b.average),
                num(b.deviation),
                b.checked.to_string(),
            ]
        }),
    )?;
    run.result(
        "closing",
        json!({
            "exact_distance": exact.distance,
            "noisy_distance": shadow.distance,
            "recovery": recovery,
            "newton_iterations": shadow.newton.iterations,
        }),
    );
    run.result(
        "specification",
        json!({
            "lambda_u_p": p.lambda_u,
            "lambda_u_q": q.lambda_u,
            "period": r.period,
            "shadow_distance": r.shadow_distance,
            "delta_condition": r.delta_condition,
        }),
    );
    Ok(())
}

fn spectrum(run: &mut Run) -> Result<()> {
    let rows = match run.cfg.spectrum.matrix.clone() {
        Some(m) => m,
        None => {
            let f = run.load_model()?;
            f.matrix().0.iter().map(|r| r.to_vec()).collect()
        }
    };
    run.section = json!({ "matrix": rows });
    let s = linear_spectrum(&rows)?;
    run.check(Check::holds("hyperbolic", s.hyperbolic));
    run.check(Check::at_most(
        "log_det_identity",
        (s.log_det - (s.degree.unsigned_abs() as f64).ln()).abs(),
        1e-9,
    ));
    run.out.csv(
        "spectrum.csv",
        &["index", "re", "im", "modulus", "class"],
        s.eigenvalues.iter().zip(&s.moduli).enumerate().map(|(i, (z, r))| {
            let class = if *r > 1.0 + 1e-9 {
                "unstable"
            } else if *r < 1.0 - 1e-9 {
                "stable"
            } else {
                "central"
            };
            vec![i.to_string(), num(z[0]), num(z[1]), num(*r), class.to_string()]
        }),
    )?;
    run.result("spectrum", to_json(&s));
    Ok(())
}
