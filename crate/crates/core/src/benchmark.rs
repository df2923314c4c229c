//! Seeded Gaussian-mixture benchmarks with known mode assignments.
//!
//! Each class has a centre drawn as `class_spread · N(0, I)`; its modes sit at
//! distance `separation` from that centre in random directions, and points are
//! `N(mode, I)`. A `noise_fraction` of every class is replaced by points drawn
//! round-robin from the other classes' modes but labelled as this class.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{ClassId, EmbeddingError, EmbeddingSet};
use crate::matrix::{dist, norm, Matrix};
use crate::seed::{self, Stage};

const CENTER_ATTEMPTS: usize = 10_000;

#[derive(Debug, Error)]
pub enum BenchmarkError {
    #[error("bad benchmark spec: {0}")]
    BadSpec(String),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkSpec {
    pub classes: usize,
    pub modes_per_class: usize,
    pub points_per_class: usize,
    pub dim: usize,
    /// Distance of each mode from its class centre, in units of the mode σ.
    pub separation: f64,
    /// Scale of the class-centre distribution.
    pub class_spread: f64,
    /// Smallest allowed distance between two class centres.
    pub min_center_distance: f64,
    /// Fraction of each class replaced by points from other classes.
    pub noise_fraction: f64,
    /// Held-out points, spread evenly over classes.
    pub test_points: usize,
    pub seed: u64,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        Self::standard(0)
    }
}

impl BenchmarkSpec {
    /// 10 classes × 5 modes × 2000 points with a 500-point test split.
    pub fn standard(seed: u64) -> Self {
        Self {
            classes: 10,
            modes_per_class: 5,
            points_per_class: 2000,
            dim: 8,
            separation: 10.0,
            class_spread: 3.0,
            min_center_distance: 0.0,
            noise_fraction: 0.0,
            test_points: 500,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), BenchmarkError> {
        let bad = |m: &str| Err(BenchmarkError::BadSpec(m.into()));
        if self.classes == 0 || self.modes_per_class == 0 || self.dim == 0 {
            return bad("classes, modes_per_class and dim must be positive");
        }
        if self.points_per_class < self.modes_per_class {
            return bad("fewer points than modes per class");
        }
        if !(0.0..1.0).contains(&self.noise_fraction) {
            return bad("noise_fraction must lie in [0, 1)");
        }
        if self.noise_fraction > 0.0 && self.classes < 2 {
            return bad("planted noise needs at least two classes");
        }
        for (name, v) in [
            ("separation", self.separation),
            ("class_spread", self.class_spread),
            ("min_center_distance", self.min_center_distance),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(BenchmarkError::BadSpec(format!("{name} must be finite and ≥ 0")));
            }
        }
        Ok(())
    }

    pub fn planted_per_class(&self) -> usize {
        (self.noise_fraction * self.points_per_class as f64).floor() as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub spec: BenchmarkSpec,
    pub class_centers: Matrix,
    /// `classes · modes_per_class` rows, class-major.
    pub mode_centers: Matrix,
    /// Generating `(class, mode)` of each training row.
    pub train_source: Vec<(ClassId, usize)>,
    /// Training rows whose label differs from their generating class.
    pub planted: Vec<usize>,
    pub test_source: Vec<(ClassId, usize)>,
}

impl GroundTruth {
    pub fn mode_center(&self, class: ClassId, mode: usize) -> &[f64] {
        self.mode_centers
            .row((class as usize - 1) * self.spec.modes_per_class + mode)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Benchmark {
    pub train: EmbeddingSet,
    pub test: EmbeddingSet,
    pub truth: GroundTruth,
}

fn gaussian<R: Rng + ?Sized>(rng: &mut R, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.sample(StandardNormal)).collect()
}

fn around<R: Rng + ?Sized>(rng: &mut R, center: &[f64]) -> Vec<f64> {
    center
        .iter()
        .map(|c| c + rng.sample::<f64, _>(StandardNormal))
        .collect()
}

pub fn make_benchmark(spec: &BenchmarkSpec) -> Result<Benchmark, BenchmarkError> {
    spec.validate()?;
    let (c, m, d) = (spec.classes, spec.modes_per_class, spec.dim);
    let mut rng = seed::stream(spec.seed, Stage::Benchmark, 0, 0);

    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(c);
    let mut attempts = 0;
    while centers.len() < c {
        attempts += 1;
        if attempts > CENTER_ATTEMPTS {
            return Err(BenchmarkError::BadSpec(format!(
                "cannot place {c} centres {} apart",
                spec.min_center_distance
            )));
        }
        let cand: Vec<f64> = gaussian(&mut rng, d)
            .into_iter()
            .map(|v| v * spec.class_spread)
            .collect();
        if centers
            .iter()
            .all(|o| dist(o, &cand) >= spec.min_center_distance)
        {
            centers.push(cand);
        }
    }
    let mut modes = Vec::with_capacity(c * m);
    for center in &centers {
        for _ in 0..m {
            let mut u = gaussian(&mut rng, d);
            let n = norm(&u);
            u.iter_mut().for_each(|v| *v /= n);
            modes.push(
                center
                    .iter()
                    .zip(&u)
                    .map(|(c, u)| c + spec.separation * u)
                    .collect::<Vec<f64>>(),
            );
        }
    }

    let planted = spec.planted_per_class();
    let mut rows = Vec::with_capacity(c * spec.points_per_class);
    let mut labels = Vec::new();
    let mut ids = Vec::new();
    let mut source = Vec::new();
    let mut planted_rows = Vec::new();
    for class in 0..c {
        let label = class as ClassId + 1;
        let mut crng = seed::stream(spec.seed, Stage::Benchmark, label, 1);
        let clean = spec.points_per_class - planted;
        for i in 0..spec.points_per_class {
            let (src, mode) = if i < clean {
                (class, i % m)
            } else {
                let k = i - clean;
                ((class + 1 + k % (c - 1)) % c, (k / (c - 1)) % m)
            };
            if src != class {
                planted_rows.push(rows.len());
            }
            rows.push(around(&mut crng, &modes[src * m + mode]));
            labels.push(label);
            ids.push(format!("c{label}-{i:05}"));
            source.push((src as ClassId + 1, mode));
        }
    }
    let train = EmbeddingSet::from_matrix(&Matrix::from_rows(&rows), ids, labels)?;

    let mut trng = seed::stream(spec.seed, Stage::Benchmark, 0, 2);
    let mut trows = Vec::with_capacity(spec.test_points);
    let mut tlabels = Vec::new();
    let mut tids = Vec::new();
    let mut tsource = Vec::new();
    for i in 0..spec.test_points {
        let class = i % c;
        let mode = (i / c) % m;
        trows.push(around(&mut trng, &modes[class * m + mode]));
        tlabels.push(class as ClassId + 1);
        tids.push(format!("t-{i:05}"));
        tsource.push((class as ClassId + 1, mode));
    }
    let test = if trows.is_empty() {
        EmbeddingSet::new(Vec::new(), d, Vec::new(), Vec::new())?
    } else {
        EmbeddingSet::from_matrix(&Matrix::from_rows(&trows), tids, tlabels)?
    };

    Ok(Benchmark {
        train,
        test,
        truth: GroundTruth {
            spec: spec.clone(),
            class_centers: Matrix::from_rows(&centers),
            mode_centers: Matrix::from_rows(&modes),
            train_source: source,
            planted: planted_rows,
            test_source: tsource,
        },
    })
}
