//! Reverse-diffusion sampling over a closed-form Gaussian-mixture score,
//! with prototype guidance applied to the conditional noise estimate.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::embedding::{ClassId, EmbeddingSet};
use crate::kmeans;
use crate::matrix::{norm, Matrix};
use crate::seed::{self, Stage};

pub const DEFAULT_STEPS: usize = 50;
pub const DEFAULT_CFG_SCALE: f64 = 5.0;
pub const DEFAULT_GAMMA: f64 = 0.1;
pub const DEFAULT_PIS: usize = 5;

const MAX_BETA: f64 = 0.999;
const BASE_STEPS: usize = 1000;
const COSINE_OFFSET: f64 = 0.008;
/// Smallest per-coordinate variance a fitted component may have.
pub const VARIANCE_FLOOR: f64 = 1e-6;
/// `‖z‖` beyond this multiple of the reference scale counts as divergence.
pub const DIVERGENCE_RATIO: f64 = 10.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffusionError {
    #[error("schedule needs at least 2 steps, got {0}")]
    BadT(usize),
    #[error("timestep {t} outside 1..={steps}")]
    BadTimestep { t: usize, steps: usize },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("invalid mixture: {0}")]
    BadMixture(String),
    #[error("invalid guidance config: {0}")]
    BadConfig(String),
    #[error("unknown class {0}")]
    UnknownClass(ClassId),
    #[error("score underflow at t = {0}")]
    NumericalUnderflow(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    #[default]
    LinearBeta,
    Cosine,
}

impl std::str::FromStr for ScheduleKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "linear-beta" | "linear" => Ok(Self::LinearBeta),
            "cosine" => Ok(Self::Cosine),
            other => Err(format!("unknown schedule {other:?}")),
        }
    }
}

/// Cumulative signal levels `alpha_bar[0..=T]`, with `alpha_bar[0] = 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    pub kind: ScheduleKind,
    pub alpha_bar: Vec<f64>,
}

impl DiffusionSchedule {
    pub fn steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    fn check(&self, t: usize) -> Result<(), DiffusionError> {
        if t == 0 || t > self.steps() {
            return Err(DiffusionError::BadTimestep {
                t,
                steps: self.steps(),
            });
        }
        Ok(())
    }
}

pub fn make_schedule(steps: usize, kind: ScheduleKind) -> Result<DiffusionSchedule, DiffusionError> {
    if steps < 2 {
        return Err(DiffusionError::BadT(steps));
    }
    let betas: Vec<f64> = match kind {
        ScheduleKind::LinearBeta => {
            // The standard 1000-step linear schedule, subsampled to `steps`.
            let base = steps.max(BASE_STEPS);
            let scale = BASE_STEPS as f64 / base as f64;
            let (lo, hi) = (1e-4 * scale, 0.02 * scale);
            let mut ab = 1.0;
            let mut cum = Vec::with_capacity(base + 1);
            cum.push(ab);
            for i in 0..base {
                ab *= 1.0 - (lo + (hi - lo) * i as f64 / (base - 1) as f64);
                cum.push(ab);
            }
            let alpha_bar = (0..=steps)
                .map(|t| cum[(t * base + steps / 2) / steps])
                .collect();
            return Ok(DiffusionSchedule { kind, alpha_bar });
        }
        ScheduleKind::Cosine => {
            let f = |t: usize| {
                let x = (t as f64 / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET);
                (x * std::f64::consts::FRAC_PI_2).cos().powi(2)
            };
            (1..=steps)
                .map(|t| (1.0 - f(t) / f(t - 1)).clamp(0.0, MAX_BETA))
                .collect()
        }
    };
    let mut alpha_bar = Vec::with_capacity(steps + 1);
    alpha_bar.push(1.0);
    for b in betas {
        let prev = *alpha_bar.last().expect("non-empty");
        alpha_bar.push(prev * (1.0 - b));
    }
    Ok(DiffusionSchedule { kind, alpha_bar })
}

/// Diagonal-covariance Gaussian mixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixture {
    pub weights: Vec<f64>,
    /// `k × d`
    pub means: Matrix,
    /// `k × d` per-coordinate variances.
    pub variances: Matrix,
}

impl GaussianMixture {
    pub fn new(weights: Vec<f64>, means: Matrix, variances: Matrix) -> Result<Self, DiffusionError> {
        let k = weights.len();
        if k == 0 || means.rows() != k || variances.rows() != k || means.cols() != variances.cols() {
            return Err(DiffusionError::BadMixture("shape mismatch".into()));
        }
        if weights.iter().any(|&w| !(w > 0.0) || !w.is_finite()) {
            return Err(DiffusionError::BadMixture("weights must be positive".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(DiffusionError::BadMixture(format!("weights sum to {total}")));
        }
        if variances.as_slice().iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(DiffusionError::BadMixture("variances must be positive".into()));
        }
        if means.as_slice().iter().any(|v| !v.is_finite()) {
            return Err(DiffusionError::BadMixture("non-finite mean".into()));
        }
        Ok(Self {
            weights,
            means,
            variances,
        })
    }

    pub fn dim(&self) -> usize {
        self.means.cols()
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Mixture of mixtures, component weights scaled by `priors`.
    pub fn combine(parts: &[(&GaussianMixture, f64)]) -> Result<Self, DiffusionError> {
        let total: f64 = parts.iter().map(|p| p.1).sum();
        let mut weights = Vec::new();
        let mut means = Vec::new();
        let mut vars = Vec::new();
        for (m, p) in parts {
            for i in 0..m.len() {
                weights.push(m.weights[i] * p / total);
                means.push(m.means.row(i).to_vec());
                vars.push(m.variances.row(i).to_vec());
            }
        }
        Self::new(weights, Matrix::from_rows(&means), Matrix::from_rows(&vars))
    }

    pub fn shifted(&self, shift: &[f64]) -> Result<Self, DiffusionError> {
        if shift.len() != self.dim() {
            return Err(DiffusionError::DimMismatch {
                expected: self.dim(),
                found: shift.len(),
            });
        }
        let mut means = self.means.clone();
        for i in 0..means.rows() {
            for (m, s) in means.row_mut(i).iter_mut().zip(shift) {
                *m += s;
            }
        }
        Ok(Self {
            means,
            ..self.clone()
        })
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Matrix {
        let d = self.dim();
        let mut out = Matrix::zeros(n, d);
        for r in 0..n {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut k = self.len() - 1;
            for (i, w) in self.weights.iter().enumerate() {
                acc += w;
                if u < acc {
                    k = i;
                    break;
                }
            }
            for c in 0..d {
                let e: f64 = rng.sample(StandardNormal);
                out.row_mut(r)[c] = self.means.row(k)[c] + self.variances.row(k)[c].sqrt() * e;
            }
        }
        out
    }

    /// Per-component log weight plus log density of the mixture diffused to
    /// signal level `ab`, and the per-component diffused variances.
    fn diffused_terms(&self, z: &[f64], ab: f64) -> (Vec<f64>, Vec<Vec<f64>>) {
        let sa = ab.sqrt();
        let ln2pi = (2.0 * std::f64::consts::PI).ln();
        let mut logs = Vec::with_capacity(self.len());
        let mut vars = Vec::with_capacity(self.len());
        for i in 0..self.len() {
            let mu = self.means.row(i);
            let var = self.variances.row(i);
            let mut lp = self.weights[i].ln();
            let mut vi = Vec::with_capacity(z.len());
            for c in 0..z.len() {
                let v = ab * var[c] + (1.0 - ab);
                let r = z[c] - sa * mu[c];
                lp -= 0.5 * (ln2pi + v.ln() + r * r / v);
                vi.push(v);
            }
            logs.push(lp);
            vars.push(vi);
        }
        (logs, vars)
    }

    /// `log p_t(z)` for the mixture diffused to signal level `ab`.
    pub fn log_density(&self, z: &[f64], ab: f64) -> f64 {
        let (logs, _) = self.diffused_terms(z, ab);
        log_sum_exp(&logs)
    }

    /// `∇ log p_t(z)`, or `None` if every component underflows.
    pub fn score(&self, z: &[f64], ab: f64) -> Option<Vec<f64>> {
        let (logs, vars) = self.diffused_terms(z, ab);
        let lse = log_sum_exp(&logs);
        if !lse.is_finite() {
            return None;
        }
        let sa = ab.sqrt();
        let mut g = vec![0.0; z.len()];
        for i in 0..self.len() {
            let r = (logs[i] - lse).exp();
            if r == 0.0 {
                continue;
            }
            let mu = self.means.row(i);
            for c in 0..z.len() {
                g[c] -= r * (z[c] - sa * mu[c]) / vars[i][c];
            }
        }
        g.iter().all(|v| v.is_finite()).then_some(g)
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Condition {
    Class(ClassId),
    Uncond,
}

/// Per-class mixtures plus the unconditional (marginal) mixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreModel {
    pub classes: BTreeMap<ClassId, GaussianMixture>,
    pub uncond: GaussianMixture,
}

impl ScoreModel {
    pub fn new(
        classes: BTreeMap<ClassId, GaussianMixture>,
        uncond: GaussianMixture,
    ) -> Result<Self, DiffusionError> {
        let d = uncond.dim();
        if let Some(m) = classes.values().find(|m| m.dim() != d) {
            return Err(DiffusionError::DimMismatch {
                expected: d,
                found: m.dim(),
            });
        }
        Ok(Self { classes, uncond })
    }

    /// Unconditional mixture taken as the class-prior-weighted marginal.
    pub fn with_marginal(
        classes: BTreeMap<ClassId, GaussianMixture>,
        priors: &BTreeMap<ClassId, f64>,
    ) -> Result<Self, DiffusionError> {
        let parts: Vec<(&GaussianMixture, f64)> = classes
            .iter()
            .map(|(c, m)| (m, priors.get(c).copied().unwrap_or(1.0)))
            .collect();
        let uncond = GaussianMixture::combine(&parts)?;
        Self::new(classes, uncond)
    }

    /// Fits `components` diagonal Gaussians per class with K-Means.
    pub fn fit(set: &EmbeddingSet, components: usize, seed: u64) -> Result<Self, DiffusionError> {
        let mut classes = BTreeMap::new();
        let mut priors = BTreeMap::new();
        for (&class, rows) in set.class_index() {
            let view = set.group_by_class(class).expect("class from index");
            let x = view.to_matrix();
            let mut rng = seed::stream(seed, Stage::Alignment, class, u32::MAX >> 8);
            classes.insert(class, fit_mixture(&x, components, &mut rng)?);
            priors.insert(class, rows.len() as f64);
        }
        if classes.is_empty() {
            return Err(DiffusionError::BadMixture("no classes".into()));
        }
        Self::with_marginal(classes, &priors)
    }

    /// Moves every unconditional component by `shift`.
    pub fn with_uncond_shift(mut self, shift: &[f64]) -> Result<Self, DiffusionError> {
        self.uncond = self.uncond.shifted(shift)?;
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.uncond.dim()
    }

    pub fn mixture(&self, cond: Condition) -> Result<&GaussianMixture, DiffusionError> {
        match cond {
            Condition::Uncond => Ok(&self.uncond),
            Condition::Class(c) => self.classes.get(&c).ok_or(DiffusionError::UnknownClass(c)),
        }
    }
}

/// Diagonal mixture fitted by K-Means; fewer components when points are scarce.
pub fn fit_mixture<R: Rng + ?Sized>(
    x: &Matrix,
    components: usize,
    rng: &mut R,
) -> Result<GaussianMixture, DiffusionError> {
    let n = x.rows();
    let d = x.cols();
    if n == 0 {
        return Err(DiffusionError::BadMixture("no points".into()));
    }
    let mut k = components.clamp(1, n);
    let seeds = loop {
        match kmeans::kmeans_plus_plus(x, k, rng) {
            Ok(s) => break s,
            Err(_) if k > 1 => k -= 1,
            Err(e) => return Err(DiffusionError::BadMixture(e.to_string())),
        }
    };
    let out = kmeans::kmeans(x, k, &seeds, kmeans::DEFAULT_MAX_ITER, kmeans::DEFAULT_TOL)
        .map_err(|e| DiffusionError::BadMixture(e.to_string()))?;
    let mut weights = Vec::with_capacity(k);
    let mut vars = Matrix::zeros(k, d);
    for c in 0..k {
        let members = out.members(c);
        weights.push(members.len() as f64 / n as f64);
        let mu = out.centroids.row(c);
        for &i in &members {
            for (j, (v, m)) in vars.row_mut(c).iter_mut().zip(mu).enumerate() {
                let r = x.row(i)[j] - m;
                *v += r * r;
            }
        }
        for v in vars.row_mut(c) {
            *v = (*v / members.len().max(1) as f64).max(VARIANCE_FLOOR);
        }
    }
    let keep: Vec<usize> = (0..k).filter(|&c| weights[c] > 0.0).collect();
    let total: f64 = keep.iter().map(|&c| weights[c]).sum();
    GaussianMixture::new(
        keep.iter().map(|&c| weights[c] / total).collect(),
        out.centroids.select_rows(&keep),
        vars.select_rows(&keep),
    )
}

/// Noise prediction `ε = −√(1−ᾱ_t) ∇ log p_t(z_t)`.
pub fn analytic_eps(
    model: &ScoreModel,
    z: &[f64],
    t: usize,
    cond: Condition,
    schedule: &DiffusionSchedule,
) -> Result<Vec<f64>, DiffusionError> {
    schedule.check(t)?;
    if z.len() != model.dim() {
        return Err(DiffusionError::DimMismatch {
            expected: model.dim(),
            found: z.len(),
        });
    }
    let ab = schedule.alpha_bar(t);
    let s = (1.0 - ab).sqrt();
    let score = model
        .mixture(cond)?
        .score(z, ab)
        .ok_or(DiffusionError::NumericalUnderflow(t))?;
    Ok(score.iter().map(|g| -s * g).collect())
}

/// `ẑ₀ = (z_t − √(1−ᾱ_t) ε) / √ᾱ_t`
pub fn predict_z0(z: &[f64], eps: &[f64], alpha_bar: f64) -> Vec<f64> {
    let (sa, sn) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    z.iter().zip(eps).map(|(z, e)| (z - sn * e) / sa).collect()
}

/// `g = s_j − ẑ₀`
pub fn guidance_vector(s: &[f64], z0: &[f64]) -> Result<Vec<f64>, DiffusionError> {
    if s.len() != z0.len() {
        return Err(DiffusionError::DimMismatch {
            expected: z0.len(),
            found: s.len(),
        });
    }
    Ok(s.iter().zip(z0).map(|(s, z)| s - z).collect())
}

/// `Δε = −γ g √ᾱ_t / √(1−ᾱ_t)`
pub fn noise_correction(g: &[f64], gamma: f64, alpha_bar: f64) -> Vec<f64> {
    let coef = -(alpha_bar.sqrt() / (1.0 - alpha_bar).sqrt());
    g.iter().map(|g| gamma * g * coef).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub gamma: f64,
    /// Final reverse steps that run without the correction.
    pub pis: usize,
    pub cfg_scale: f64,
    pub seed: u64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            gamma: DEFAULT_GAMMA,
            pis: DEFAULT_PIS,
            cfg_scale: DEFAULT_CFG_SCALE,
            seed: 0,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self, steps: usize) -> Result<(), DiffusionError> {
        if !self.gamma.is_finite() || self.gamma < 0.0 {
            return Err(DiffusionError::BadConfig(format!("gamma = {}", self.gamma)));
        }
        if !self.cfg_scale.is_finite() {
            return Err(DiffusionError::BadConfig("cfg_scale must be finite".into()));
        }
        if self.pis > steps {
            return Err(DiffusionError::BadConfig(format!(
                "pis = {} exceeds steps = {steps}",
                self.pis
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub t: usize,
    pub guided: bool,
    pub g_norm: f64,
    pub delta_eps_norm: f64,
    pub z_norm: f64,
    /// Relative gap between the corrected `ẑ₀` and `(1−γ)ẑ₀ + γ s_j`.
    pub interpolation_error: f64,
}

/// One reverse step `z_t → z_{t−1}`. `prototype = None` is plain CFG.
pub fn guided_step(
    model: &ScoreModel,
    schedule: &DiffusionSchedule,
    z: &[f64],
    t: usize,
    class: ClassId,
    prototype: Option<&[f64]>,
    config: &GuidanceConfig,
) -> Result<(Vec<f64>, StepDiagnostics), DiffusionError> {
    let ab = schedule.alpha_bar(t);
    let eps_u = analytic_eps(model, z, t, Condition::Uncond, schedule)?;
    let mut eps_c = analytic_eps(model, z, t, Condition::Class(class), schedule)?;
    let mut diag = StepDiagnostics {
        t,
        guided: false,
        g_norm: 0.0,
        delta_eps_norm: 0.0,
        z_norm: 0.0,
        interpolation_error: 0.0,
    };
    if let Some(s) = prototype {
        if t > config.pis {
            let z0 = predict_z0(z, &eps_c, ab);
            let g = guidance_vector(s, &z0)?;
            let de = noise_correction(&g, config.gamma, ab);
            for (e, d) in eps_c.iter_mut().zip(&de) {
                *e += d;
            }
            let moved = predict_z0(z, &eps_c, ab);
            let lerp: Vec<f64> = z0
                .iter()
                .zip(s)
                .map(|(z, s)| (1.0 - config.gamma) * z + config.gamma * s)
                .collect();
            let gap: Vec<f64> = moved.iter().zip(&lerp).map(|(a, b)| a - b).collect();
            diag.guided = true;
            diag.g_norm = norm(&g);
            diag.delta_eps_norm = norm(&de);
            diag.interpolation_error = norm(&gap) / norm(&lerp).max(f64::MIN_POSITIVE);
        }
    }
    let w = config.cfg_scale;
    let eps: Vec<f64> = eps_u
        .iter()
        .zip(&eps_c)
        .map(|(u, c)| u + w * (c - u))
        .collect();
    let z0 = predict_z0(z, &eps, ab);
    let prev = schedule.alpha_bar(t - 1);
    let (sa, sn) = (prev.sqrt(), (1.0 - prev).sqrt());
    let next: Vec<f64> = z0.iter().zip(&eps).map(|(z, e)| sa * z + sn * e).collect();
    diag.z_norm = norm(&next);
    Ok((next, diag))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidedSample {
    /// Index of the guiding prototype (`None` for unguided samples).
    pub j: Option<usize>,
    pub latent: Vec<f64>,
    /// SHA-256 over every intermediate latent.
    pub checksum: String,
    pub diagnostics: Vec<StepDiagnostics>,
    pub diverged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidedSampleSet {
    pub class: ClassId,
    pub config: GuidanceConfig,
    pub steps: usize,
    pub samples: Vec<GuidedSample>,
}

impl GuidedSampleSet {
    pub fn latents(&self) -> Matrix {
        Matrix::from_rows(&self.samples.iter().map(|s| s.latent.clone()).collect::<Vec<_>>())
    }

    pub fn diverged(&self) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter_map(|(i, s)| s.diverged.then_some(i))
            .collect()
    }
}

fn trajectory(
    model: &ScoreModel,
    schedule: &DiffusionSchedule,
    class: ClassId,
    index: usize,
    prototype: Option<&[f64]>,
    config: &GuidanceConfig,
) -> Result<GuidedSample, DiffusionError> {
    let d = model.dim();
    let mut rng = seed::stream(config.seed, Stage::Alignment, class, index as u32);
    let mut z: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    let class_scale = model
        .mixture(Condition::Class(class))?
        .means
        .iter_rows()
        .map(norm)
        .fold(0.0, f64::max);
    let reference = norm(&z)
        .max(prototype.map_or(0.0, norm))
        .max(class_scale)
        .max(1.0);
    let mut hasher = Sha256::new();
    let mut diagnostics = Vec::with_capacity(schedule.steps());
    let mut diverged = false;
    for t in (1..=schedule.steps()).rev() {
        let (next, diag) = match guided_step(model, schedule, &z, t, class, prototype, config) {
            Ok(r) => r,
            Err(DiffusionError::NumericalUnderflow(_)) if diverged => break,
            Err(e) => return Err(e),
        };
        z = next;
        for v in &z {
            hasher.update(v.to_le_bytes());
        }
        if !diag.z_norm.is_finite() || diag.z_norm > DIVERGENCE_RATIO * reference {
            diverged = true;
        }
        diagnostics.push(diag);
        if diverged && !diag.z_norm.is_finite() {
            break;
        }
    }
    Ok(GuidedSample {
        j: prototype.map(|_| index),
        latent: z,
        checksum: hex(&hasher.finalize()),
        diagnostics,
        diverged,
    })
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// One trajectory per prototype; trajectory `j` is guided by row `j` throughout.
pub fn generate_class_set(
    model: &ScoreModel,
    schedule: &DiffusionSchedule,
    class: ClassId,
    prototypes: &Matrix,
    config: &GuidanceConfig,
) -> Result<GuidedSampleSet, DiffusionError> {
    config.validate(schedule.steps())?;
    if prototypes.cols() != model.dim() {
        return Err(DiffusionError::DimMismatch {
            expected: model.dim(),
            found: prototypes.cols(),
        });
    }
    let samples = (0..prototypes.rows())
        .map(|j| trajectory(model, schedule, class, j, Some(prototypes.row(j)), config))
        .collect::<Result<_, _>>()?;
    Ok(GuidedSampleSet {
        class,
        config: *config,
        steps: schedule.steps(),
        samples,
    })
}

/// Plain CFG samples drawn from the same noise streams as [`generate_class_set`].
pub fn generate_unguided(
    model: &ScoreModel,
    schedule: &DiffusionSchedule,
    class: ClassId,
    n: usize,
    config: &GuidanceConfig,
) -> Result<GuidedSampleSet, DiffusionError> {
    config.validate(schedule.steps())?;
    let samples = (0..n)
        .map(|j| trajectory(model, schedule, class, j, None, config))
        .collect::<Result<_, _>>()?;
    Ok(GuidedSampleSet {
        class,
        config: *config,
        steps: schedule.steps(),
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn single(mu: Vec<f64>, var: Vec<f64>) -> GaussianMixture {
        GaussianMixture::new(vec![1.0], Matrix::from_rows(&[mu]), Matrix::from_rows(&[var])).unwrap()
    }

    fn model_2d() -> ScoreModel {
        let a = GaussianMixture::new(
            vec![0.5, 0.5],
            Matrix::from_rows(&[vec![2.0, 0.0], vec![-2.0, 0.0]]),
            Matrix::from_rows(&[vec![0.5, 0.5], vec![0.5, 0.5]]),
        )
        .unwrap();
        let b = single(vec![0.0, 4.0], vec![0.3, 0.3]);
        let classes = BTreeMap::from([(1, a), (2, b)]);
        ScoreModel::with_marginal(classes, &BTreeMap::new()).unwrap()
    }

    #[test]
    fn schedules_are_valid() {
        for kind in [ScheduleKind::LinearBeta, ScheduleKind::Cosine] {
            for steps in [2, 3, 10, 50, 1000] {
                let s = make_schedule(steps, kind).unwrap();
                assert_eq!(s.alpha_bar.len(), steps + 1);
                assert_eq!(s.alpha_bar[0], 1.0);
                assert!(s.alpha_bar.windows(2).all(|w| w[1] < w[0]), "{kind:?} {steps}");
                assert!(s.alpha_bar[steps] < 1e-3 && s.alpha_bar[steps] > 0.0);
            }
        }
        assert_eq!(make_schedule(1, ScheduleKind::LinearBeta), Err(DiffusionError::BadT(1)));
    }

    #[test]
    fn cosine_terminal_level() {
        let s = make_schedule(50, ScheduleKind::Cosine).unwrap();
        let f = |t: f64| (((t / 50.0 + 0.008) / 1.008) * std::f64::consts::FRAC_PI_2).cos().powi(2);
        // Before the final clipped step the schedule follows the closed form.
        assert!((s.alpha_bar[49] - f(49.0) / f(0.0)).abs() < 1e-12);
        assert!(s.alpha_bar[50] < 1e-3);
    }

    #[test]
    fn standard_normal_eps() {
        let m = single(vec![0.0, 0.0, 0.0], vec![1.0, 1.0, 1.0]);
        let model = ScoreModel::new(BTreeMap::from([(1, m.clone())]), m).unwrap();
        let s = make_schedule(20, ScheduleKind::LinearBeta).unwrap();
        let z = [0.3, -1.2, 2.0];
        for t in 1..=20 {
            let eps = analytic_eps(&model, &z, t, Condition::Class(1), &s).unwrap();
            let k = (1.0 - s.alpha_bar(t)).sqrt();
            for (e, z) in eps.iter().zip(z) {
                assert!((e - k * z).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn symmetric_midpoint_has_zero_score() {
        let model = model_2d();
        let s = make_schedule(10, ScheduleKind::LinearBeta).unwrap();
        let eps = analytic_eps(&model, &[0.0, 0.0], 4, Condition::Class(1), &s).unwrap();
        assert_eq!(eps, vec![0.0, 0.0]);
    }

    #[test]
    fn eps_matches_finite_differences() {
        let model = model_2d();
        let s = make_schedule(50, ScheduleKind::Cosine).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h = 1e-4;
        for _ in 0..50 {
            let t = rng.random_range(1..=50);
            let z: Vec<f64> = (0..2).map(|_| rng.random_range(-4.0..4.0)).collect();
            let ab = s.alpha_bar(t);
            let m = model.mixture(Condition::Uncond).unwrap();
            let fd: Vec<f64> = (0..2)
                .map(|c| {
                    let mut a = z.clone();
                    let mut b = z.clone();
                    a[c] += h;
                    b[c] -= h;
                    (m.log_density(&a, ab) - m.log_density(&b, ab)) / (2.0 * h)
                })
                .collect();
            let eps = analytic_eps(&model, &z, t, Condition::Uncond, &s).unwrap();
            let want: Vec<f64> = fd.iter().map(|g| -(1.0 - ab).sqrt() * g).collect();
            let err: Vec<f64> = eps.iter().zip(&want).map(|(a, b)| a - b).collect();
            assert!(norm(&err) <= 1e-5 * norm(&want).max(1e-3));
        }
    }

    #[test]
    fn predict_z0_cases() {
        assert_eq!(predict_z0(&[1.5, -2.0], &[0.0, 0.0], 1.0), vec![1.5, -2.0]);
        let z0 = predict_z0(&[1.0, 0.0], &[0.0, 1.0], 0.25);
        assert!((z0[0] - 2.0).abs() < 1e-12);
        assert!((z0[1] + 1.7320508075688772).abs() < 1e-12);
        let (x0, e, ab): ([f64; 3], [f64; 3], f64) = ([0.7, -0.1, 3.0], [0.2, 1.1, -0.4], 0.37);
        let zt: Vec<f64> = x0
            .iter()
            .zip(e)
            .map(|(x, e)| ab.sqrt() * x + (1.0 - ab).sqrt() * e)
            .collect();
        let back = predict_z0(&zt, &e, ab);
        for (a, b) in back.iter().zip(x0) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn guidance_and_correction_cases() {
        assert_eq!(guidance_vector(&[1.0, 1.0], &[1.0, 1.0]).unwrap(), vec![0.0, 0.0]);
        assert_eq!(guidance_vector(&[1.0, 1.0], &[0.0, 1.0]).unwrap(), vec![1.0, 0.0]);
        assert!(guidance_vector(&[1.0], &[0.0, 1.0]).is_err());
        assert!(noise_correction(&[3.0, -2.0], 0.0, 0.3).iter().all(|&v| v == 0.0));
        let d = noise_correction(&[2.0, -1.0], 0.3, 0.5);
        assert!((d[0] + 0.6).abs() < 1e-15 && (d[1] - 0.3).abs() < 1e-15);
        let d = noise_correction(&[3.0, 0.0], 0.1, 0.25);
        assert!((d[0] + 0.17320508075688773).abs() < 1e-12);
        assert_eq!(d[1], 0.0);
    }

    proptest! {
        #[test]
        fn interpolation_identity(
            z in prop::collection::vec(-5.0f64..5.0, 4),
            e in prop::collection::vec(-3.0f64..3.0, 4),
            s in prop::collection::vec(-5.0f64..5.0, 4),
            ab in 0.01f64..0.99,
            gamma in 0.0f64..1.0,
        ) {
            let z0 = predict_z0(&z, &e, ab);
            let g = guidance_vector(&s, &z0).unwrap();
            let de = noise_correction(&g, gamma, ab);
            let e2: Vec<f64> = e.iter().zip(&de).map(|(a, b)| a + b).collect();
            let lhs = predict_z0(&z, &e2, ab);
            let rhs: Vec<f64> = z0.iter().zip(&s).map(|(z, s)| (1.0 - gamma) * z + gamma * s).collect();
            let gap: Vec<f64> = lhs.iter().zip(&rhs).map(|(a, b)| a - b).collect();
            prop_assert!(norm(&gap) <= 1e-9 * norm(&rhs).max(1e-12));
        }
    }

    #[test]
    fn zero_gamma_equals_unguided() {
        let model = model_2d();
        let s = make_schedule(30, ScheduleKind::LinearBeta).unwrap();
        let protos = Matrix::from_rows(&[vec![1.0, 1.0], vec![-3.0, 0.5], vec![0.0, 0.0]]);
        let cfg = GuidanceConfig { gamma: 0.0, pis: 0, cfg_scale: 5.0, seed: 4 };
        let guided = generate_class_set(&model, &s, 1, &protos, &cfg).unwrap();
        let plain = generate_unguided(&model, &s, 1, 3, &cfg).unwrap();
        for (a, b) in guided.samples.iter().zip(&plain.samples) {
            assert_eq!(a.latent, b.latent);
            assert_eq!(a.checksum, b.checksum);
        }
    }

    #[test]
    fn full_pis_ignores_gamma() {
        let model = model_2d();
        let s = make_schedule(20, ScheduleKind::LinearBeta).unwrap();
        let protos = Matrix::from_rows(&[vec![1.0, 1.0]]);
        let base = GuidanceConfig { gamma: 0.01, pis: 20, cfg_scale: 5.0, seed: 9 };
        let a = generate_class_set(&model, &s, 2, &protos, &base).unwrap();
        let b = generate_class_set(&model, &s, 2, &protos, &GuidanceConfig { gamma: 0.2, ..base }).unwrap();
        assert_eq!(a.samples[0].latent, b.samples[0].latent);
        assert!(a.samples[0].diagnostics.iter().all(|d| !d.guided));
    }

    #[test]
    fn pis_disables_final_steps() {
        let model = model_2d();
        let s = make_schedule(10, ScheduleKind::LinearBeta).unwrap();
        let protos = Matrix::from_rows(&[vec![1.0, 1.0]]);
        let cfg = GuidanceConfig { gamma: 0.1, pis: 3, cfg_scale: 5.0, seed: 0 };
        let set = generate_class_set(&model, &s, 1, &protos, &cfg).unwrap();
        let guided: Vec<bool> = set.samples[0].diagnostics.iter().map(|d| d.guided).collect();
        assert_eq!(guided, [vec![true; 7], vec![false; 3]].concat());
        assert!(set.samples[0]
            .diagnostics
            .iter()
            .filter(|d| d.guided)
            .all(|d| d.interpolation_error < 1e-9));
    }

    #[test]
    fn strong_guidance_lands_on_prototype() {
        let model = model_2d();
        let s = make_schedule(50, ScheduleKind::LinearBeta).unwrap();
        let proto = vec![1.5, 0.5];
        for seed in 0..20 {
            let cfg = GuidanceConfig { gamma: 0.5, pis: 0, seed, ..Default::default() };
            let set = generate_class_set(&model, &s, 1, &Matrix::from_rows(std::slice::from_ref(&proto)), &cfg).unwrap();
            let gap: Vec<f64> = set.samples[0].latent.iter().zip(&proto).map(|(a, b)| a - b).collect();
            assert!(norm(&gap) < 0.05 * norm(&proto) + 0.05, "seed {seed}: {gap:?}");
        }
    }

    #[test]
    fn excessive_gamma_is_flagged() {
        let model = model_2d();
        let s = make_schedule(50, ScheduleKind::LinearBeta).unwrap();
        let cfg = GuidanceConfig { gamma: 10.0, pis: 0, cfg_scale: 5.0, seed: 1 };
        let set = generate_class_set(&model, &s, 1, &Matrix::from_rows(&[vec![1.0, 0.0]]), &cfg).unwrap();
        assert_eq!(set.diverged(), vec![0]);
        let ok = GuidanceConfig { gamma: 0.1, ..cfg };
        let set = generate_class_set(&model, &s, 1, &Matrix::from_rows(&[vec![1.0, 0.0]]), &ok).unwrap();
        assert!(set.diverged().is_empty());
    }

    #[test]
    fn deterministic_and_validated() {
        let model = model_2d();
        let s = make_schedule(10, ScheduleKind::Cosine).unwrap();
        let protos = Matrix::from_rows(&[vec![1.0, 1.0], vec![0.0, 2.0]]);
        let cfg = GuidanceConfig { seed: 3, ..Default::default() };
        assert_eq!(
            generate_class_set(&model, &s, 1, &protos, &cfg).unwrap(),
            generate_class_set(&model, &s, 1, &protos, &cfg).unwrap()
        );
        let bad = GuidanceConfig { pis: 11, ..cfg };
        assert!(matches!(
            generate_class_set(&model, &s, 1, &protos, &bad),
            Err(DiffusionError::BadConfig(_))
        ));
        assert!(matches!(
            analytic_eps(&model, &[0.0, 0.0], 0, Condition::Uncond, &s),
            Err(DiffusionError::BadTimestep { .. })
        ));
        assert_eq!(
            analytic_eps(&model, &[0.0, 0.0], 1, Condition::Class(7), &s),
            Err(DiffusionError::UnknownClass(7))
        );
    }

    #[test]
    fn fitted_model_recovers_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let truth = GaussianMixture::new(
            vec![0.5, 0.5],
            Matrix::from_rows(&[vec![10.0, 0.0], vec![-10.0, 0.0]]),
            Matrix::from_rows(&[vec![1.0, 4.0], vec![1.0, 4.0]]),
        )
        .unwrap();
        let x = truth.sample(4000, &mut rng);
        let fitted = fit_mixture(&x, 2, &mut rng).unwrap();
        let mut means: Vec<f64> = (0..2).map(|i| fitted.means.row(i)[0]).collect();
        means.sort_by(f64::total_cmp);
        assert!((means[0] + 10.0).abs() < 0.2 && (means[1] - 10.0).abs() < 0.2);
        for i in 0..2 {
            assert!((fitted.variances.row(i)[1] - 4.0).abs() < 0.4);
            assert!((fitted.weights[i] - 0.5).abs() < 0.05);
        }
    }
}
