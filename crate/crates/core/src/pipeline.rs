//! End-to-end orchestration: discover → align → eval, plus the artifacts each
//! stage leaves on disk.
//!
//! Every manifest carries [`VERSION`] and an echo of the run config. The output
//! directory itself is left out of the echo so that reruns into different
//! directories stay byte-identical.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::thread;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::benchmark::{make_benchmark, Benchmark, BenchmarkError, GroundTruth};
use crate::config::{ConfigError, RunConfig};
use crate::diffusion::{self, DiffusionError, GuidedSampleSet, ScoreModel};
use crate::embedding::{
    default_labels_path, load_embeddings, save_embeddings, ClassId, EmbeddingError, EmbeddingSet, Format,
};
use crate::evaluation::{self, EvalError, EvalReport, ProxyKind};
use crate::hdbscan::ClusterReport;
use crate::ipc::{
    discover_class, ClassRepresentatives, DiscoveryParams, IpcError, Provenance, RepresentativeEntry,
    RepresentativeSet, SourceFractions,
};
use crate::kmeans::{kmeans_select, KMeansError};
use crate::matrix::Matrix;
use crate::seed::{self, Stage};

pub const VERSION: &str = concat!("v", env!("CARGO_PKG_VERSION"));

pub const REPS_MANIFEST: &str = "representatives.json";
pub const REPS_LATENTS: &str = "representatives.bin";
pub const GUIDED_MANIFEST: &str = "guided.json";
pub const GUIDED_LATENTS: &str = "guided.bin";
pub const REPORT: &str = "report.json";

#[derive(Debug, Error)]
pub enum Error {
    #[error("[config] {0}")]
    Config(#[from] ConfigError),
    #[error("[embedding-io] {0}")]
    Embedding(#[from] EmbeddingError),
    #[error("[benchmark] {0}")]
    Benchmark(#[from] BenchmarkError),
    #[error("[discovery] class {class}: {source}")]
    Discovery { class: ClassId, source: IpcError },
    #[error("[kmeans] {0}")]
    KMeans(#[from] KMeansError),
    #[error("[alignment] {0}")]
    Alignment(#[from] DiffusionError),
    #[error("[alignment] class {class}: trajectories {trajectories:?} diverged; nothing written")]
    Diverged { class: ClassId, trajectories: Vec<usize> },
    #[error("[evaluation] {0}")]
    Evaluation(#[from] EvalError),
    #[error("[artifact] {path}: {msg}")]
    Artifact { path: PathBuf, msg: String },
    #[error("[io] {0}")]
    Io(#[from] io::Error),
    #[error("[json] {0}")]
    Json(#[from] serde_json::Error),
    #[error("[csv] {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn module(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Embedding(_) => "embedding-io",
            Error::Benchmark(_) => "benchmark",
            Error::Discovery { .. } => "discovery",
            Error::KMeans(_) => "kmeans",
            Error::Alignment(_) | Error::Diverged { .. } => "alignment",
            Error::Evaluation(_) => "evaluation",
            Error::Artifact { .. } => "artifact",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }

    /// Problems with the request itself rather than with running it.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::Benchmark(BenchmarkError::BadSpec(_)) | Error::Alignment(DiffusionError::BadConfig(_))
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;

/// Config as written into manifests.
pub fn config_echo(config: &RunConfig) -> serde_json::Value {
    let mut v = serde_json::to_value(config).expect("config serializes");
    if let Some(paths) = v.get_mut("paths").and_then(|p| p.as_object_mut()) {
        paths.remove("out");
    }
    serde_json::json!({ "version": VERSION, "config": v })
}

pub struct Data {
    pub train: EmbeddingSet,
    pub test: Option<EmbeddingSet>,
    pub truth: Option<GroundTruth>,
}

pub fn load_data(config: &RunConfig) -> Result<Data> {
    match &config.paths.train {
        Some(train) => {
            let labels = config.train_labels().expect("train path set");
            let train = load_embeddings(train, config.paths.format, &labels)?;
            let test = match &config.paths.test {
                Some(test) => {
                    let labels = config.test_labels().expect("test path set");
                    Some(load_embeddings(test, config.paths.format, &labels)?)
                }
                None => None,
            };
            Ok(Data { train, test, truth: None })
        }
        None => {
            let Benchmark { train, test, truth } = make_benchmark(&config.benchmark)?;
            let test = (!test.is_empty()).then_some(test);
            Ok(Data {
                train,
                test,
                truth: Some(truth),
            })
        }
    }
}

pub fn discovery_params(config: &RunConfig) -> DiscoveryParams {
    DiscoveryParams {
        ipc: config.ipc,
        min_cluster_size: config.min_cluster_size,
        min_samples: config.min_samples,
        preprocess: config.preprocess,
    }
}

/// Runs `f` over `items` on up to `threads` workers, keeping input order.
fn par_map<T: Sync, U: Send>(items: &[T], threads: usize, f: impl Fn(&T) -> U + Sync) -> Vec<U> {
    let threads = threads.max(1).min(items.len().max(1));
    if threads == 1 {
        return items.iter().map(f).collect();
    }
    let f = &f;
    let mut out: Vec<(usize, U)> = thread::scope(|s| {
        let handles: Vec<_> = (0..threads)
            .map(|w| {
                s.spawn(move || {
                    items
                        .iter()
                        .enumerate()
                        .skip(w)
                        .step_by(threads)
                        .map(|(i, t)| (i, f(t)))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker panicked"))
            .collect()
    });
    out.sort_by_key(|(i, _)| *i);
    out.into_iter().map(|(_, u)| u).collect()
}

pub fn default_threads() -> usize {
    thread::available_parallelism().map_or(1, |n| n.get())
}

/// Distribution discovery for every class. Each class draws from its own
/// stream, so the result does not depend on `threads`.
pub fn discover(train: &EmbeddingSet, params: DiscoveryParams, seed: u64, threads: usize) -> Result<RepresentativeSet> {
    let classes: Vec<ClassId> = train.classes().collect();
    let results = par_map(&classes, threads, |&class| {
        let view = train.group_by_class(class)?;
        let mut rng = seed::stream(seed, Stage::Discovery, class, 0);
        discover_class(&view, params, &mut rng).map_err(|source| Error::Discovery { class, source })
    });
    Ok(RepresentativeSet {
        classes: results.into_iter().collect::<Result<_>>()?,
    })
}

pub fn fit_score_model(train: &EmbeddingSet, config: &RunConfig) -> Result<ScoreModel> {
    Ok(ScoreModel::fit(train, config.score_components, config.seed)?)
}

fn prototypes(reps: &ClassRepresentatives) -> Matrix {
    Matrix::from_rows(
        &reps
            .entries
            .iter()
            .map(|e| e.latent.iter().map(|&v| f64::from(v)).collect())
            .collect::<Vec<Vec<f64>>>(),
    )
}

/// One guided trajectory per representative. Diverged sets are an error.
pub fn align(model: &ScoreModel, reps: &RepresentativeSet, config: &RunConfig, threads: usize) -> Result<Vec<GuidedSampleSet>> {
    let schedule = diffusion::make_schedule(config.steps, config.schedule)?;
    let guidance = config.guidance();
    guidance.validate(config.steps)?;
    let sets = par_map(&reps.classes, threads, |c| {
        diffusion::generate_class_set(model, &schedule, c.class, &prototypes(c), &guidance)
    });
    let sets = sets.into_iter().collect::<std::result::Result<Vec<_>, _>>()?;
    if let Some(s) = sets.iter().find(|s| !s.diverged().is_empty()) {
        return Err(Error::Diverged {
            class: s.class,
            trajectories: s.diverged(),
        });
    }
    Ok(sets)
}

pub fn guided_embeddings(reps: &RepresentativeSet, guided: &[GuidedSampleSet]) -> Result<EmbeddingSet> {
    let mut vectors = Vec::new();
    let mut ids = Vec::new();
    let mut labels = Vec::new();
    let mut dim = 0;
    for set in guided {
        let class = reps.class(set.class).ok_or(EmbeddingError::UnknownClass(set.class))?;
        for (j, s) in set.samples.iter().enumerate() {
            dim = s.latent.len();
            vectors.extend(s.latent.iter().map(|&v| v as f32));
            ids.push(format!("g{}-{j:04}-{}", set.class, class.entries[j].sample_id));
            labels.push(set.class);
        }
    }
    Ok(EmbeddingSet::new(vectors, dim.max(1), ids, labels)?)
}

pub fn representative_embeddings(reps: &RepresentativeSet) -> Result<EmbeddingSet> {
    let mut vectors = Vec::new();
    let mut ids = Vec::new();
    let mut labels = Vec::new();
    let mut dim = 0;
    for c in &reps.classes {
        for e in &c.entries {
            dim = e.latent.len();
            vectors.extend_from_slice(&e.latent);
            ids.push(e.sample_id.clone());
            labels.push(c.class);
        }
    }
    Ok(EmbeddingSet::new(vectors, dim.max(1), ids, labels)?)
}

pub fn provenance_histogram(reps: &RepresentativeSet) -> BTreeMap<String, usize> {
    let mut h: BTreeMap<String, usize> = Provenance::ALL.iter().map(|p| (p.as_str().to_string(), 0)).collect();
    for c in &reps.classes {
        for (p, n) in c.counts() {
            *h.get_mut(p.as_str()).expect("all variants present") += n;
        }
    }
    h
}

/// Proxy accuracy of a classifier fitted on `synthetic` and tested on `test`.
pub fn proxy_accuracy(synthetic: &EmbeddingSet, test: &EmbeddingSet, proxy: ProxyKind) -> Result<evaluation::Accuracy> {
    let classes: Vec<ClassId> = test.classes().chain(synthetic.classes()).collect();
    let clf = evaluation::fit_proxy(&synthetic.to_matrix(), synthetic.labels(), &classes, proxy)?;
    Ok(evaluation::evaluate(&clf, &test.to_matrix(), test.labels())?)
}

/// Mean over classes of the Fréchet distance between `synthetic` and `reference`.
pub fn mean_class_frechet(synthetic: &EmbeddingSet, reference: &EmbeddingSet) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0;
    for class in synthetic.classes() {
        let a = synthetic.group_by_class(class)?.to_matrix();
        let b = reference.group_by_class(class)?.to_matrix();
        if a.rows() < 2 || b.rows() < 2 {
            continue;
        }
        total += evaluation::frechet_distance(&a, &b)?;
        n += 1;
    }
    if n == 0 {
        return Err(EvalError::Empty.into());
    }
    Ok(total / n as f64)
}

/// Evaluates a synthetic set. Without a test split the training data stands in.
pub fn evaluate_run(
    synthetic: &EmbeddingSet,
    train: &EmbeddingSet,
    test: Option<&EmbeddingSet>,
    reps: Option<&RepresentativeSet>,
    config: &RunConfig,
) -> Result<EvalReport> {
    let acc = proxy_accuracy(synthetic, test.unwrap_or(train), config.proxy)?;
    let frechet = match mean_class_frechet(synthetic, train) {
        Ok(f) => Some(f),
        Err(Error::Evaluation(EvalError::Empty)) => None,
        Err(e) => return Err(e),
    };
    Ok(EvalReport {
        accuracy: acc.accuracy,
        per_class: acc.per_class,
        frechet,
        provenance: reps.map(provenance_histogram).unwrap_or_default(),
        config: config_echo(config),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub sample_id: String,
    pub row: usize,
    pub provenance: Provenance,
    pub cluster_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassManifest {
    pub class: ClassId,
    pub ipc: usize,
    pub counts: BTreeMap<String, usize>,
    pub initial: ClusterReport,
    pub steps: usize,
    pub diagnostics: Vec<String>,
    pub entries: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepresentativeManifest {
    pub version: String,
    pub config: serde_json::Value,
    pub classes: Vec<ClassManifest>,
}

impl RepresentativeManifest {
    pub fn new(reps: &RepresentativeSet, config: &RunConfig) -> Self {
        Self {
            version: VERSION.to_string(),
            config: config_echo(config),
            classes: reps
                .classes
                .iter()
                .map(|c| ClassManifest {
                    class: c.class,
                    ipc: c.ipc,
                    counts: c.counts().into_iter().map(|(p, n)| (p.as_str().to_string(), n)).collect(),
                    initial: c.initial.clone(),
                    steps: c.steps,
                    diagnostics: c.diagnostics.clone(),
                    entries: c
                        .entries
                        .iter()
                        .map(|e| ManifestEntry {
                            sample_id: e.sample_id.clone(),
                            row: e.row,
                            provenance: e.provenance,
                            cluster_size: e.source_cluster_size,
                        })
                        .collect(),
                })
                .collect(),
        }
    }

    /// Rebuilds the representative set against the training data it was
    /// discovered on.
    pub fn resolve(&self, train: &EmbeddingSet) -> Result<RepresentativeSet> {
        let mut classes = Vec::with_capacity(self.classes.len());
        for c in &self.classes {
            let mut entries = Vec::with_capacity(c.entries.len());
            for e in &c.entries {
                if train.sample_ids().get(e.row) != Some(&e.sample_id) {
                    return Err(Error::Artifact {
                        path: PathBuf::from(REPS_MANIFEST),
                        msg: format!("row {} is not sample {:?} in the training set", e.row, e.sample_id),
                    });
                }
                entries.push(RepresentativeEntry {
                    sample_id: e.sample_id.clone(),
                    row: e.row,
                    latent: train.row(e.row).to_vec(),
                    provenance: e.provenance,
                    source_cluster_size: e.cluster_size,
                });
            }
            classes.push(ClassRepresentatives {
                class: c.class,
                ipc: c.ipc,
                entries,
                initial: c.initial.clone(),
                steps: c.steps,
                diagnostics: c.diagnostics.clone(),
            });
        }
        Ok(RepresentativeSet { classes })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidedEntry {
    pub j: usize,
    pub prototype: String,
    pub checksum: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidedClassManifest {
    pub class: ClassId,
    pub samples: Vec<GuidedEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidedManifest {
    pub version: String,
    pub config: serde_json::Value,
    pub steps: usize,
    pub classes: Vec<GuidedClassManifest>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::Artifact {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    Ok(serde_json::from_str(&text)?)
}

fn save_set(set: &EmbeddingSet, path: &Path) -> Result<()> {
    save_embeddings(set, path, Format::Binary, &default_labels_path(path))?;
    Ok(())
}

pub fn write_representatives(dir: &Path, reps: &RepresentativeSet, config: &RunConfig) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_json(&dir.join(REPS_MANIFEST), &RepresentativeManifest::new(reps, config))?;
    save_set(&representative_embeddings(reps)?, &dir.join(REPS_LATENTS))
}

pub fn write_guided(dir: &Path, reps: &RepresentativeSet, guided: &[GuidedSampleSet], config: &RunConfig) -> Result<()> {
    if let Some(s) = guided.iter().find(|s| !s.diverged().is_empty()) {
        return Err(Error::Diverged {
            class: s.class,
            trajectories: s.diverged(),
        });
    }
    fs::create_dir_all(dir)?;
    let mut classes = Vec::new();
    for set in guided {
        let c = reps.class(set.class).ok_or(EmbeddingError::UnknownClass(set.class))?;
        classes.push(GuidedClassManifest {
            class: set.class,
            samples: set
                .samples
                .iter()
                .enumerate()
                .map(|(j, s)| GuidedEntry {
                    j,
                    prototype: c.entries[j].sample_id.clone(),
                    checksum: s.checksum.clone(),
                })
                .collect(),
        });
    }
    let manifest = GuidedManifest {
        version: VERSION.to_string(),
        config: config_echo(config),
        steps: config.steps,
        classes,
    };
    write_json(&dir.join(GUIDED_MANIFEST), &manifest)?;
    save_set(&guided_embeddings(reps, guided)?, &dir.join(GUIDED_LATENTS))
}

pub fn write_report(dir: &Path, report: &EvalReport) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_json(&dir.join(REPORT), report)
}

/// Writes `train.bin`, `test.bin` (with sidecars) and `truth.json`.
pub fn write_benchmark(dir: &Path, bench: &Benchmark) -> Result<()> {
    fs::create_dir_all(dir)?;
    save_set(&bench.train, &dir.join("train.bin"))?;
    if !bench.test.is_empty() {
        save_set(&bench.test, &dir.join("test.bin"))?;
    }
    write_json(&dir.join("truth.json"), &bench.truth)
}

pub struct RunOutput {
    pub representatives: RepresentativeSet,
    pub guided: Vec<GuidedSampleSet>,
    pub report: EvalReport,
}

/// Discover, align and evaluate, writing every artifact under `paths.out`.
pub fn run_pipeline(config: &RunConfig, threads: usize) -> Result<RunOutput> {
    config.validate()?;
    let data = load_data(config)?;
    let reps = discover(&data.train, discovery_params(config), config.seed, threads)?;
    let model = fit_score_model(&data.train, config)?;
    let guided = align(&model, &reps, config, threads)?;
    let synthetic = guided_embeddings(&reps, &guided)?;
    let report = evaluate_run(&synthetic, &data.train, data.test.as_ref(), Some(&reps), config)?;
    let out = &config.paths.out;
    write_representatives(out, &reps, config)?;
    write_guided(out, &reps, &guided, config)?;
    write_report(out, &report)?;
    Ok(RunOutput {
        representatives: reps,
        guided,
        report,
    })
}

/// `ipc` uniformly random rows per class.
pub fn random_selection(train: &EmbeddingSet, ipc: usize, seed: u64) -> Vec<usize> {
    let mut rows = Vec::new();
    for (&class, members) in train.class_index() {
        let mut rng = seed::stream(seed, Stage::Baseline, class, 1);
        let k = ipc.min(members.len());
        rows.extend(sample(&mut rng, members.len(), k).into_iter().map(|i| members[i]));
    }
    rows
}

/// Real points nearest the K-Means centroids of each class.
pub fn kmeans_selection(train: &EmbeddingSet, ipc: usize, seed: u64) -> Result<Vec<usize>> {
    let mut rows = Vec::new();
    for (&class, members) in train.class_index() {
        let x = train.group_by_class(class)?.to_matrix();
        let mut rng = seed::stream(seed, Stage::Baseline, class, 0);
        let picked = kmeans_select(&x, ipc.min(members.len()), &mut rng)?;
        rows.extend(picked.into_iter().map(|i| members[i]));
    }
    Ok(rows)
}

pub fn representative_rows(reps: &RepresentativeSet) -> Vec<usize> {
    reps.classes.iter().flat_map(|c| c.entries.iter().map(|e| e.row)).collect()
}

/// One line of the provenance-by-`min_cluster_size` grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub accuracy: Option<f64>,
    pub sources: SourceFractions,
}

pub fn write_grid_csv<W: Write>(rows: &[GridRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["min_cluster_size", "accuracy", "init_cluster", "split", "outlier", "forced_split"])?;
    for r in rows {
        let s = &r.sources;
        out.write_record([
            s.min_cluster_size.to_string(),
            r.accuracy.map(|a| format!("{a:.6}")).unwrap_or_default(),
            format!("{:.6}", s.init_cluster),
            format!("{:.6}", s.split),
            format!("{:.6}", s.outlier),
            format!("{:.6}", s.forced_split),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// Collects `*/report.json` under `dir` into grid rows, ordered by
/// `min_cluster_size`.
pub fn collect_grid(dir: &Path) -> Result<Vec<GridRow>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path().join(REPORT)))
        .filter(|p| p.is_file())
        .collect();
    paths.sort();
    let mut rows = Vec::new();
    for p in paths {
        let report: EvalReport = read_json(&p)?;
        let mcs = report
            .config
            .pointer("/config/min_cluster_size")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::Artifact {
                path: p.clone(),
                msg: "config echo lacks min_cluster_size".into(),
            })? as usize;
        let total = report.provenance.values().sum::<usize>().max(1) as f64;
        let frac = |p: Provenance| *report.provenance.get(p.as_str()).unwrap_or(&0) as f64 / total;
        rows.push(GridRow {
            accuracy: Some(report.accuracy),
            sources: SourceFractions {
                min_cluster_size: mcs,
                init_cluster: frac(Provenance::InitCluster),
                split: frac(Provenance::Split),
                outlier: frac(Provenance::Outlier),
                forced_split: frac(Provenance::ForcedSplit),
            },
        });
    }
    rows.sort_by_key(|r| r.sources.min_cluster_size);
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::benchmark::BenchmarkSpec;

    fn small_config(out: &Path) -> RunConfig {
        let mut c = RunConfig::default();
        c.paths.out = out.to_path_buf();
        c.ipc = 4;
        c.min_cluster_size = 5;
        c.steps = 20;
        c.benchmark = BenchmarkSpec {
            classes: 3,
            modes_per_class: 2,
            points_per_class: 120,
            dim: 4,
            test_points: 60,
            ..BenchmarkSpec::standard(1)
        };
        c
    }

    #[test]
    fn par_map_keeps_order() {
        let v: Vec<usize> = (0..37).collect();
        assert_eq!(par_map(&v, 4, |x| x * 2), par_map(&v, 1, |x| x * 2));
    }

    #[test]
    fn small_run_writes_everything() {
        let dir = tempfile::tempdir().unwrap();
        let c = small_config(dir.path());
        let out = run_pipeline(&c, 2).unwrap();
        for c in &out.representatives.classes {
            assert_eq!(c.entries.len(), 4);
        }
        for f in [REPS_MANIFEST, REPS_LATENTS, GUIDED_MANIFEST, GUIDED_LATENTS, REPORT] {
            assert!(dir.path().join(f).is_file(), "{f}");
        }
        let report: EvalReport = read_json(&dir.path().join(REPORT)).unwrap();
        assert!((0.0..=1.0).contains(&report.accuracy));
        assert_eq!(report.provenance.values().sum::<usize>(), 12);
        assert_eq!(report.config["version"], VERSION);
        assert!(report.config["config"]["paths"].get("out").is_none());
    }

    #[test]
    fn thread_count_does_not_change_results() {
        let bench = make_benchmark(&small_config(Path::new(".")).benchmark).unwrap();
        let p = discovery_params(&small_config(Path::new(".")));
        assert_eq!(discover(&bench.train, p, 3, 1).unwrap(), discover(&bench.train, p, 3, 3).unwrap());
    }

    #[test]
    fn manifest_resolves_back() {
        let c = small_config(Path::new("."));
        let bench = make_benchmark(&c.benchmark).unwrap();
        let reps = discover(&bench.train, discovery_params(&c), 0, 1).unwrap();
        let m = RepresentativeManifest::new(&reps, &c);
        assert_eq!(m.resolve(&bench.train).unwrap(), reps);
        let mut broken = m.clone();
        broken.classes[0].entries[0].row += 1;
        assert!(broken.resolve(&bench.train).is_err());
    }

    #[test]
    fn diverged_sets_are_not_written() {
        let dir = tempfile::tempdir().unwrap();
        let c = small_config(dir.path());
        let bench = make_benchmark(&c.benchmark).unwrap();
        let reps = discover(&bench.train, discovery_params(&c), 0, 1).unwrap();
        let model = fit_score_model(&bench.train, &c).unwrap();
        let mut guided = align(&model, &reps, &c, 1).unwrap();
        guided[0].samples[1].diverged = true;
        let err = write_guided(dir.path(), &reps, &guided, &c).unwrap_err();
        assert!(matches!(err, Error::Diverged { trajectories, .. } if trajectories == vec![1]));
        assert!(!dir.path().join(GUIDED_MANIFEST).exists());
    }

    #[test]
    fn baselines_pick_ipc_per_class() {
        let c = small_config(Path::new("."));
        let bench = make_benchmark(&c.benchmark).unwrap();
        for rows in [random_selection(&bench.train, 4, 0), kmeans_selection(&bench.train, 4, 0).unwrap()] {
            assert_eq!(rows.len(), 12);
            let mut u = rows.clone();
            u.sort_unstable();
            u.dedup();
            assert_eq!(u.len(), 12);
        }
    }

    #[test]
    fn grid_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        for mcs in [20, 5] {
            let mut c = small_config(&dir.path().join(format!("mcs{mcs}")));
            c.min_cluster_size = mcs;
            run_pipeline(&c, 1).unwrap();
        }
        let rows = collect_grid(dir.path()).unwrap();
        assert_eq!(rows.iter().map(|r| r.sources.min_cluster_size).collect::<Vec<_>>(), vec![5, 20]);
        let mut buf = Vec::new();
        write_grid_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("min_cluster_size,accuracy,init_cluster,split,outlier,forced_split\n"));
        assert_eq!(text.lines().count(), 3);
        for r in &rows {
            assert!((r.sources.sum() - 1.0).abs() < 1e-12);
        }
    }
}
