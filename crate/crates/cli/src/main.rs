use std::fs;
use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use coda_core::benchmark::make_benchmark;
use coda_core::config::RunConfig;
use coda_core::diffusion::ScheduleKind;
use coda_core::embedding::{default_labels_path, load_embeddings, Format};
use coda_core::evaluation::ProxyKind;
use coda_core::pipeline::{self, Error, RepresentativeManifest};
use coda_core::preprocess::Preprocess;

const EXIT_VALIDATION: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(name = "coda", version, about = "Core-distribution discovery and guided alignment on embeddings")]
struct Cli {
    /// TOML run config; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Select IPC representatives per class.
    Discover(Overrides),
    /// Generate guided latents from representatives written by `discover`.
    Align {
        #[command(flatten)]
        o: Overrides,
        /// Directory holding representatives.json (defaults to --out).
        #[arg(long)]
        reps: Option<PathBuf>,
    },
    /// Proxy accuracy of a labelled set against a test set.
    Eval {
        #[command(flatten)]
        o: Overrides,
        /// Training data for the Fréchet term (defaults to the run's train set).
        #[arg(long)]
        reference: Option<PathBuf>,
        /// Representatives manifest whose provenance goes into the report.
        #[arg(long)]
        reps: Option<PathBuf>,
    },
    /// discover, align and eval in one go.
    Run(Overrides),
    /// Write a synthetic benchmark.
    Bench(Overrides),
    /// Provenance-by-min_cluster_size CSV from a directory of runs.
    Report {
        /// Directory whose subdirectories each hold a report.json.
        #[arg(long)]
        grid: PathBuf,
        /// CSV destination; stdout when absent.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

#[derive(Args, Clone, Default)]
struct Overrides {
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long)]
    train_labels: Option<PathBuf>,
    #[arg(long)]
    test_labels: Option<PathBuf>,
    #[arg(long)]
    format: Option<Format>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    ipc: Option<usize>,
    #[arg(long)]
    min_cluster_size: Option<usize>,
    #[arg(long)]
    min_samples: Option<usize>,
    /// Reduce each class with PCA to this many dimensions before clustering.
    #[arg(long)]
    pca_dim: Option<usize>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    pis: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    cfg_scale: Option<f64>,
    #[arg(long)]
    schedule: Option<ScheduleKind>,
    #[arg(long)]
    score_components: Option<usize>,
    /// Use a k-NN proxy instead of nearest-centroid.
    #[arg(long)]
    knn: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; 0 uses every core.
    #[arg(long, default_value_t = 0)]
    threads: usize,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    modes_per_class: Option<usize>,
    #[arg(long)]
    points_per_class: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    separation: Option<f64>,
    #[arg(long)]
    noise_fraction: Option<f64>,
    #[arg(long)]
    test_points: Option<usize>,
    #[arg(long)]
    bench_seed: Option<u64>,
}

macro_rules! set {
    ($dst:expr, $src:expr) => {
        if let Some(v) = $src.clone() {
            $dst = v;
        }
    };
}

impl Overrides {
    fn apply(&self, c: &mut RunConfig) {
        if self.train.is_some() {
            c.paths.train = self.train.clone();
        }
        if self.test.is_some() {
            c.paths.test = self.test.clone();
        }
        if self.train_labels.is_some() {
            c.paths.train_labels = self.train_labels.clone();
        }
        if self.test_labels.is_some() {
            c.paths.test_labels = self.test_labels.clone();
        }
        set!(c.paths.format, self.format);
        set!(c.paths.out, self.out);
        set!(c.ipc, self.ipc);
        set!(c.min_cluster_size, self.min_cluster_size);
        set!(c.min_samples, self.min_samples);
        if let Some(dim) = self.pca_dim {
            c.preprocess = Preprocess::Pca { dim };
        }
        set!(c.gamma, self.gamma);
        set!(c.pis, self.pis);
        set!(c.steps, self.steps);
        set!(c.cfg_scale, self.cfg_scale);
        set!(c.schedule, self.schedule);
        set!(c.score_components, self.score_components);
        if let Some(k) = self.knn {
            c.proxy = ProxyKind::Knn { k };
        }
        set!(c.seed, self.seed);
        let b = &mut c.benchmark;
        set!(b.classes, self.classes);
        set!(b.modes_per_class, self.modes_per_class);
        set!(b.points_per_class, self.points_per_class);
        set!(b.dim, self.dim);
        set!(b.separation, self.separation);
        set!(b.noise_fraction, self.noise_fraction);
        set!(b.test_points, self.test_points);
        set!(b.seed, self.bench_seed);
    }

    fn threads(&self) -> usize {
        match self.threads {
            0 => pipeline::default_threads(),
            n => n,
        }
    }
}

fn config(path: &Option<PathBuf>, o: &Overrides) -> Result<RunConfig, Error> {
    let mut c = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    o.apply(&mut c);
    c.validate()?;
    Ok(c)
}

fn print_json<T: serde::Serialize>(v: &T) -> Result<(), Error> {
    let text = serde_json::to_string_pretty(v)?;
    match writeln!(io::stdout().lock(), "{text}") {
        Err(e) if e.kind() == io::ErrorKind::BrokenPipe => Ok(()),
        r => Ok(r?),
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Discover(o) => {
            let c = config(&cli.config, &o)?;
            let data = pipeline::load_data(&c)?;
            let reps = pipeline::discover(&data.train, pipeline::discovery_params(&c), c.seed, o.threads())?;
            pipeline::write_representatives(&c.paths.out, &reps, &c)?;
            print_json(&pipeline::provenance_histogram(&reps))
        }
        Command::Align { o, reps } => {
            let c = config(&cli.config, &o)?;
            let data = pipeline::load_data(&c)?;
            let dir = reps.unwrap_or_else(|| c.paths.out.clone());
            let manifest: RepresentativeManifest = pipeline::read_json(&dir.join(pipeline::REPS_MANIFEST))?;
            let reps = manifest.resolve(&data.train)?;
            let model = pipeline::fit_score_model(&data.train, &c)?;
            let guided = pipeline::align(&model, &reps, &c, o.threads())?;
            pipeline::write_guided(&c.paths.out, &reps, &guided, &c)?;
            println!("{} guided latents written to {}", reps.total(), c.paths.out.display());
            Ok(())
        }
        Command::Eval { o, reference, reps } => {
            let c = config(&cli.config, &o)?;
            let (Some(train), Some(test)) = (&c.paths.train, &c.paths.test) else {
                return Err(coda_core::config::ConfigError::Invalid("eval needs --train and --test".into()).into());
            };
            let synthetic = load_embeddings(train, c.paths.format, &c.train_labels().expect("train set"))?;
            let test = load_embeddings(test, c.paths.format, &c.test_labels().expect("test set"))?;
            let reference = match reference {
                Some(p) => Some(load_embeddings(&p, c.paths.format, &default_labels_path(&p))?),
                None => None,
            };
            let reps = match reps {
                Some(dir) => {
                    let m: RepresentativeManifest = pipeline::read_json(&dir.join(pipeline::REPS_MANIFEST))?;
                    Some(m)
                }
                None => None,
            };
            let mut report = pipeline::evaluate_run(
                &synthetic,
                reference.as_ref().unwrap_or(&synthetic),
                Some(&test),
                None,
                &c,
            )?;
            if reference.is_none() {
                report.frechet = None;
            }
            if let Some(m) = reps {
                for class in &m.classes {
                    for (k, v) in &class.counts {
                        *report.provenance.entry(k.clone()).or_default() += v;
                    }
                }
            }
            pipeline::write_report(&c.paths.out, &report)?;
            print_json(&report)
        }
        Command::Run(o) => {
            let c = config(&cli.config, &o)?;
            let out = pipeline::run_pipeline(&c, o.threads())?;
            print_json(&out.report)
        }
        Command::Bench(o) => {
            let c = config(&cli.config, &o)?;
            let bench = make_benchmark(&c.benchmark)?;
            pipeline::write_benchmark(&c.paths.out, &bench)?;
            println!(
                "{} train and {} test points written to {}",
                bench.train.len(),
                bench.test.len(),
                c.paths.out.display()
            );
            Ok(())
        }
        Command::Report { grid, csv } => {
            let rows = pipeline::collect_grid(&grid)?;
            match csv {
                Some(p) => pipeline::write_grid_csv(&rows, fs::File::create(p)?),
                None => pipeline::write_grid_csv(&rows, io::stdout().lock()),
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { EXIT_VALIDATION } else { EXIT_RUNTIME })
        }
    }
}
