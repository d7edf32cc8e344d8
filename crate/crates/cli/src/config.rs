//! Experiment configuration: built-in defaults, overridden by a TOML file,
//! overridden by command-line flags. The resolved section is echoed into
//! every report.

use std::path::{Path, PathBuf};

use anosov_core::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: u64,
    /// Worker cap; `0` uses every core. Results do not depend on it.
    pub threads: usize,
    pub certify: CertifyConfig,
    pub periodic: PeriodicConfig,
    pub livsic: LivsicConfig,
    pub conformal: ConformalConfig,
    pub srb: SrbConfig,
    pub conjugacy: ConjugacyConfig,
    pub specification: SpecificationConfig,
    pub spectrum: SpectrumConfig,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse(e.to_string().trim_end().to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Parse(m) => Error::Parse(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Every tolerance must be positive and every size nonzero.
    pub fn validate(&self) -> Result<()> {
        let c = &self.certify;
        let p = &self.periodic;
        let l = &self.livsic;
        let f = &self.conformal;
        let s = &self.srb;
        let h = &self.conjugacy;
        let g = &self.specification;
        let positive = [
            ("certify.unstable_half_angle", c.unstable_half_angle),
            ("certify.stable_half_angle", c.stable_half_angle),
            ("certify.c", c.c),
            ("periodic.rigidity_tolerance", p.rigidity_tolerance),
            ("livsic.obstruction_tolerance", l.obstruction_tolerance),
            ("livsic.special_tolerance", l.special_tolerance),
            ("livsic.residual_tolerance", l.residual_tolerance),
            ("conformal.min_length", f.min_length),
            ("conformal.tolerance", f.tolerance.unwrap_or(1.0)),
            ("srb.invariance_tolerance", s.invariance_tolerance),
            ("srb.balance_tolerance", s.balance_tolerance.unwrap_or(1.0)),
            ("srb.entropy_tolerance", s.entropy_tolerance),
            ("srb.epsilon", s.epsilon),
            ("srb.leaf_half_width", s.leaf_half_width),
            ("conjugacy.tolerance", h.tolerance),
            ("conjugacy.residual_tolerance", h.residual_tolerance),
            ("conjugacy.warp_tolerance", h.warp_tolerance),
            ("conjugacy.agreement_tolerance", h.agreement_tolerance),
            ("conjugacy.ratio_length", h.ratio_length),
            ("specification.epsilon", g.epsilon),
            ("specification.tolerance", g.tolerance),
            ("specification.noise", g.noise),
            ("specification.closing_tolerance", g.closing_tolerance),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be positive (got {v})")));
            }
        }
        if c.lambda <= 1.0 {
            return Err(Error::InvalidArgument("certify.lambda must exceed 1".into()));
        }
        if f.max_length <= f.min_length {
            return Err(Error::InvalidArgument(
                "conformal.max_length must exceed conformal.min_length".into(),
            ));
        }
        if !(s.min_r_squared > 0.0 && s.min_r_squared <= 1.0) {
            return Err(Error::InvalidArgument("srb.min_r_squared must lie in (0, 1]".into()));
        }
        let sizes = [
            ("certify.grid", c.grid),
            ("periodic.max_period", p.max_period as usize),
            ("livsic.grid", l.grid),
            ("livsic.cutoff", l.cutoff),
            ("conformal.pairs", f.pairs),
            ("srb.grid", s.grid),
            ("srb.boxes", s.boxes),
            ("srb.subsamples", s.subsamples),
            ("conjugacy.grid", h.grid),
            ("conjugacy.residual_grid", h.residual_grid),
            ("conjugacy.samples", h.samples),
            ("specification.noisy_period", g.noisy_period as usize),
        ];
        for (name, v) in sizes {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("{name} must be positive")));
            }
        }
        if g.blocks.is_empty() || g.blocks.contains(&0) {
            return Err(Error::InvalidArgument(
                "specification.blocks must be non-empty and positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CertifyConfig {
    pub grid: usize,
    /// Radians.
    pub unstable_half_angle: f64,
    /// Radians.
    pub stable_half_angle: f64,
    /// Required one-step growth inside the cones.
    pub lambda: f64,
    pub c: f64,
}

impl Default for CertifyConfig {
    fn default() -> Self {
        Self {
            grid: 512,
            unstable_half_angle: 0.3,
            stable_half_angle: 0.3,
            lambda: 1.1,
            c: 1.0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PeriodicConfig {
    pub max_period: u32,
    /// Largest `|λ − λ_A|` accepted as the same periodic data.
    pub rigidity_tolerance: f64,
    /// Turn the periodic-data comparison into an asserted check.
    pub require_rigid: bool,
}

impl Default for PeriodicConfig {
    fn default() -> Self {
        Self {
            max_period: 4,
            rigidity_tolerance: 1e-6,
            require_rigid: false,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LivsicConfig {
    pub grid: usize,
    pub cutoff: usize,
    pub depth: usize,
    pub max_period: u32,
    pub obstruction_tolerance: f64,
    /// Radians.
    pub special_tolerance: f64,
    pub special_samples: usize,
    pub residual_tolerance: f64,
    /// Side of the plot-ready CSV sampling of `φ` and `ψ`.
    pub sample_grid: usize,
}

impl Default for LivsicConfig {
    fn default() -> Self {
        Self {
            grid: 256,
            cutoff: 32,
            depth: 30,
            max_period: 3,
            obstruction_tolerance: 1e-4,
            special_tolerance: 1e-6,
            special_samples: 16,
            residual_tolerance: 1e-4,
            sample_grid: 64,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConformalConfig {
    pub pairs: usize,
    /// Leaf lengths of the sampled pairs are uniform in `[min, max)`.
    pub min_length: f64,
    pub max_length: f64,
    /// Grid and backward depth of the interpolated unstable direction field.
    pub field_grid: usize,
    pub field_depth: usize,
    /// Relative error of `dᵘ(fa, fb)/dᵘ(a, b)` against `e^{λᵘ}`; unset uses
    /// 1e-9 for linear models and 1e-6 otherwise.
    pub tolerance: Option<f64>,
}

impl Default for ConformalConfig {
    fn default() -> Self {
        Self {
            pairs: 100,
            min_length: 0.05,
            max_length: 1.2,
            field_grid: 256,
            field_depth: 20,
            tolerance: None,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SrbConfig {
    pub grid: usize,
    pub cutoff: usize,
    pub boxes: usize,
    /// Midpoint-rule subdivisions per box side.
    pub subsamples: usize,
    pub invariance_tolerance: f64,
    pub birkhoff_orbits: usize,
    pub birkhoff_length: usize,
    pub birkhoff_burn_in: usize,
    /// Unset uses 1e-6 for linear models and 1e-3 otherwise.
    pub balance_tolerance: Option<f64>,
    pub separated_points: usize,
    pub epsilon: f64,
    pub min_n: usize,
    pub max_n: usize,
    pub entropy_tolerance: f64,
    /// Depth of the truncation-convergence fits.
    pub truncation_depth: usize,
    pub min_r_squared: f64,
    pub leaf_half_width: f64,
    pub leaf_truncation: usize,
}

impl Default for SrbConfig {
    fn default() -> Self {
        Self {
            grid: 256,
            cutoff: 32,
            boxes: 200,
            subsamples: 64,
            invariance_tolerance: 1e-4,
            birkhoff_orbits: 8,
            birkhoff_length: 10_000,
            birkhoff_burn_in: 100,
            balance_tolerance: None,
            separated_points: 1 << 20,
            epsilon: 1.0 / 64.0,
            min_n: 2,
            max_n: 7,
            entropy_tolerance: 0.15,
            truncation_depth: 60,
            min_r_squared: 0.95,
            leaf_half_width: 0.25,
            leaf_truncation: 40,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConjugacyConfig {
    pub grid: usize,
    /// Sweeps stop once the sup update falls below this.
    pub tolerance: f64,
    pub max_sweeps: usize,
    pub residual_grid: usize,
    pub residual_tolerance: f64,
    /// Sup distance to the known warp, checked for conjugated models.
    pub warp_tolerance: f64,
    /// Leaf constructions (ODE, density ratio) are compared with the grid
    /// conjugacy when set.
    pub methods: bool,
    pub agreement_tolerance: f64,
    /// Start of the shared `A`-leaf piece.
    pub origin: [f64; 2],
    /// Unit-spaced anchors of the leaf ODE.
    pub anchors: usize,
    pub ratio_length: f64,
    pub truncation: usize,
    pub samples: usize,
    pub regularity_samples: usize,
}

impl Default for ConjugacyConfig {
    fn default() -> Self {
        Self {
            grid: 256,
            tolerance: 1e-10,
            max_sweeps: 500,
            residual_grid: 512,
            residual_tolerance: 1e-8,
            warp_tolerance: 1e-3,
            methods: true,
            agreement_tolerance: 1e-4,
            origin: [0.71, 0.33],
            anchors: 2,
            ratio_length: 1.0,
            truncation: 40,
            samples: 50,
            regularity_samples: 16,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpecificationConfig {
    /// Period of the orbit `p` (the first one found is used).
    pub p_period: u32,
    /// Period of the orbit `q`; the orbit whose `λᵘ` is farthest from `p`'s
    /// is used.
    pub q_period: u32,
    pub blocks: Vec<usize>,
    pub gap: usize,
    pub epsilon: f64,
    pub tolerance: f64,
    pub min_checked_block: usize,
    pub max_total: usize,
    /// Period of the orbit perturbed for the noisy closing test.
    pub noisy_period: u32,
    pub noise: f64,
    pub closing_tolerance: f64,
}

impl Default for SpecificationConfig {
    fn default() -> Self {
        Self {
            p_period: 1,
            q_period: 2,
            blocks: vec![120, 200, 160, 240],
            gap: 20,
            epsilon: 0.05,
            tolerance: 0.05,
            min_checked_block: 100,
            max_total: 10_000,
            noisy_period: 6,
            noise: 1e-3,
            closing_tolerance: 1e-2,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpectrumConfig {
    /// Integer matrix by rows; unset falls back to the model's matrix.
    pub matrix: Option<Vec<Vec<i64>>>,
}

/// `"3,1;1,1"` to rows.
pub fn parse_matrix(text: &str) -> Result<Vec<Vec<i64>>> {
    text.split(';')
        .map(|row| {
            row.split(',')
                .map(|v| {
                    v.trim()
                        .parse::<i64>()
                        .map_err(|e| Error::Parse(format!("matrix entry {:?}: {e}", v.trim())))
                })
                .collect()
        })
        .collect()
}
