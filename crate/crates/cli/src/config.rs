//! TOML experiment schema. Every table rejects unknown keys.

use std::path::PathBuf;

use geoxray_core::inversion::SolverSpec;
use geoxray_core::manifold::{conformal, diag_poly, euclidean_ball, euclidean_box, sphere_cap};
use geoxray_core::normal_op::{CollarParams, FieldMode, NfSpec, ScanSpec, SymbolMode, Weighting};
use geoxray_core::poly::Polynomial;
use geoxray_core::{ChartManifold, ConnectionPair, FanSpec, PairClass};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Scatter,
    Transform,
    NfApply,
    SymbolScan,
    InvertLocal,
    LayerStrip,
    Verify,
    AppQuantum,
    AppPolarization,
    Convexity,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: Task,
    #[serde(default)]
    pub seed: u64,
    pub manifold: ManifoldConfig,
    #[serde(default)]
    pub pair: PairConfig,
    #[serde(default)]
    pub fan: FanConfig,
    #[serde(default)]
    pub collar: CollarConfig,
    #[serde(default)]
    pub section: SectionConfig,
    #[serde(default)]
    pub solver: SolverSpec,
    #[serde(default)]
    pub layers: LayerConfig,
    #[serde(default)]
    pub scan: ScanConfig,
    #[serde(default)]
    pub apps: AppConfig,
    #[serde(default)]
    pub convexity: ConvexityConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Term {
    pub coef: f64,
    pub powers: Vec<u32>,
}

fn poly(terms: &[Term]) -> Polynomial {
    Polynomial { terms: terms.iter().map(|t| (t.coef, t.powers.clone())).collect() }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifoldConfig {
    /// euclidean_ball, euclidean_box, conformal, diag_poly or sphere_cap.
    pub metric: String,
    #[serde(default = "three")]
    pub dim: usize,
    #[serde(default = "one")]
    pub radius: f64,
    pub lo: Option<Vec<f64>>,
    pub hi: Option<Vec<f64>>,
    /// Conformal exponent `φ` in `g = e^{2φ}I`.
    pub phi: Option<Vec<Term>>,
    /// Diagonal metric entries, one polynomial per axis.
    pub entries: Option<Vec<Vec<Term>>>,
    pub h_step: Option<f64>,
}

fn three() -> usize {
    3
}

fn one() -> f64 {
    1.0
}

impl ManifoldConfig {
    pub fn build(&self) -> Result<ChartManifold, String> {
        if !(2..=3).contains(&self.dim) {
            return Err(format!("manifold.dim must be 2 or 3, got {}", self.dim));
        }
        if self.radius <= 0.0 {
            return Err("manifold.radius must be positive".into());
        }
        let m = match self.metric.as_str() {
            "euclidean_ball" => euclidean_ball(self.dim, self.radius),
            "sphere_cap" => sphere_cap(self.dim, self.radius),
            "euclidean_box" => {
                let (Some(lo), Some(hi)) = (&self.lo, &self.hi) else {
                    return Err("euclidean_box needs manifold.lo and manifold.hi".into());
                };
                if lo.len() != hi.len() || lo.iter().zip(hi).any(|(l, h)| l >= h) {
                    return Err("manifold.lo must be below manifold.hi on every axis".into());
                }
                euclidean_box(lo.clone(), hi.clone())
            }
            "conformal" => {
                let phi = self.phi.as_ref().ok_or("conformal needs manifold.phi")?;
                conformal(self.dim, poly(phi), self.radius)
            }
            "diag_poly" => {
                let entries = self.entries.as_ref().ok_or("diag_poly needs manifold.entries")?;
                if entries.len() != self.dim {
                    return Err(format!("diag_poly needs {} entries", self.dim));
                }
                diag_poly(entries.iter().map(|e| poly(e)).collect(), self.radius)
            }
            other => return Err(format!("unknown metric {other:?}")),
        };
        Ok(match self.h_step {
            Some(h) if h > 0.0 => m.with_step(h),
            Some(h) => return Err(format!("manifold.h_step must be positive, got {h}")),
            None => m,
        })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PairConfig {
    /// zero, random or random_unitary.
    pub kind: String,
    pub fiber: usize,
    pub scale: f64,
    /// Defaults to the run seed.
    pub seed: Option<u64>,
}

impl Default for PairConfig {
    fn default() -> Self {
        PairConfig { kind: "zero".into(), fiber: 1, scale: 0.3, seed: None }
    }
}

impl PairConfig {
    pub fn build(&self, dim: usize, run_seed: u64) -> Result<ConnectionPair, String> {
        if self.fiber == 0 {
            return Err("pair.fiber must be at least 1".into());
        }
        let seed = self.seed.unwrap_or(run_seed);
        match self.kind.as_str() {
            "zero" => Ok(ConnectionPair::zero(dim, self.fiber)),
            "random" => Ok(ConnectionPair::random_affine(dim, self.fiber, self.scale, seed, PairClass::General)),
            "random_unitary" => Ok(ConnectionPair::random_affine(dim, self.fiber, self.scale, seed, PairClass::Unitary)),
            other => Err(format!("unknown pair kind {other:?}")),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FanConfig {
    pub base_points: usize,
    pub directions: usize,
}

impl Default for FanConfig {
    fn default() -> Self {
        FanConfig { base_points: 10, directions: 10 }
    }
}

impl FanConfig {
    pub fn spec(&self, seed: u64) -> FanSpec {
        FanSpec { base_points: self.base_points, directions: self.directions, seed }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CollarConfig {
    /// Boundary point; defaults to `(radius, 0, …)`.
    pub p: Option<Vec<f64>>,
    pub params: CollarParams,
    pub grid: usize,
    pub s_nodes: usize,
    pub omega_nodes: usize,
    pub mode: FieldMode,
    pub weighting: Weighting,
    pub f_weight: Option<f64>,
    pub x_inner_frac: f64,
}

impl Default for CollarConfig {
    fn default() -> Self {
        CollarConfig {
            p: None,
            params: CollarParams::default(),
            grid: 12,
            s_nodes: 5,
            omega_nodes: 8,
            mode: FieldMode::Scalar,
            weighting: Weighting::Conjugated,
            f_weight: None,
            x_inner_frac: 0.25,
        }
    }
}

impl CollarConfig {
    pub fn nf(&self) -> NfSpec {
        NfSpec {
            s_nodes: self.s_nodes,
            omega_nodes: self.omega_nodes,
            mode: self.mode,
            weighting: self.weighting,
            f_weight: self.f_weight,
            ..Default::default()
        }
    }
}

/// Test function: `amplitude·(1 − u)³` on the ellipsoid `u < 1` around `center`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SectionConfig {
    pub center: Option<Vec<f64>>,
    pub radius: f64,
    pub amplitude: f64,
    /// Relative Gaussian noise added to data.
    pub noise: f64,
}

impl Default for SectionConfig {
    fn default() -> Self {
        SectionConfig { center: None, radius: 0.5, amplitude: 1.0, noise: 0.0 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LayerConfig {
    pub levels: Vec<f64>,
    pub overlap: f64,
    pub grid: usize,
    pub s_nodes: usize,
    pub omega_nodes: usize,
    pub glue_tol: f64,
    pub central_radius: f64,
}

impl Default for LayerConfig {
    fn default() -> Self {
        LayerConfig {
            levels: vec![1.0, 0.775, 0.55, 0.325, 0.1],
            overlap: 0.1,
            grid: 16,
            s_nodes: 3,
            omega_nodes: 6,
            glue_tol: 0.1,
            central_radius: 0.1,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScanConfig {
    pub mode: SymbolMode,
    pub alpha: f64,
    pub f: f64,
    pub spec: ScanSpec,
}

impl Default for ScanConfig {
    fn default() -> Self {
        ScanConfig { mode: SymbolMode::Scalar, alpha: 0.5, f: 1.0, spec: ScanSpec { xi_count: 11, eta_radii: 6, eta_directions: 16, ..Default::default() } }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AppConfig {
    pub fiber: usize,
    pub scale: f64,
    pub sampler_dim: usize,
    pub sampler_trials: usize,
    /// Chord start and direction; defaults to the diameter along the first axis.
    pub start: Option<Vec<f64>>,
    pub direction: Option<Vec<f64>>,
}

impl Default for AppConfig {
    fn default() -> Self {
        AppConfig { fiber: 2, scale: 0.5, sampler_dim: 5, sampler_trials: 1000, start: None, direction: None }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConvexityConfig {
    pub kappa: f64,
    pub big_r: f64,
    pub lambdas: Vec<f64>,
    pub points: usize,
    pub directions: usize,
}

impl Default for ConvexityConfig {
    fn default() -> Self {
        ConvexityConfig { kappa: 1.0, big_r: 1.0, lambdas: vec![0.25, 0.5, 0.75, 1.0, 1.5], points: 200, directions: 8 }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: Option<PathBuf>,
}
