use coda_core::benchmark::{make_benchmark, BenchmarkSpec};
use coda_core::config::RunConfig;
use coda_core::embedding::{default_labels_path, load_embeddings, save_embeddings, Format};
use coda_core::pipeline::{self, RepresentativeManifest};

fn small_config(out: &std::path::Path) -> RunConfig {
    let mut c = RunConfig {
        ipc: 6,
        steps: 20,
        ..RunConfig::default()
    };
    c.paths.out = out.to_path_buf();
    c.benchmark = BenchmarkSpec {
        classes: 3,
        points_per_class: 300,
        test_points: 90,
        ..BenchmarkSpec::standard(4)
    };
    c
}

#[test]
fn one_shot_run_writes_consistent_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let c = small_config(tmp.path());
    let out = pipeline::run_pipeline(&c, 2).unwrap();

    assert_eq!(out.representatives.classes.len(), 3);
    for class in &out.representatives.classes {
        assert_eq!(class.entries.len(), 6);
    }
    let guided: usize = out.guided.iter().map(|g| g.samples.len()).sum();
    assert_eq!(guided, out.representatives.total());
    assert!((0.0..=1.0).contains(&out.report.accuracy));
    assert_eq!(out.report.provenance.values().sum::<usize>(), 18);

    for f in [
        pipeline::REPS_MANIFEST,
        "representatives.bin",
        "guided.json",
        "guided.bin",
        "report.json",
    ] {
        assert!(tmp.path().join(f).is_file(), "{f} missing");
    }
    let data = pipeline::load_data(&c).unwrap();
    let manifest: RepresentativeManifest = pipeline::read_json(&tmp.path().join(pipeline::REPS_MANIFEST)).unwrap();
    let resolved = manifest.resolve(&data.train).unwrap();
    assert_eq!(pipeline::representative_rows(&resolved), pipeline::representative_rows(&out.representatives));
}

#[test]
fn staged_alignment_matches_one_shot() {
    let tmp = tempfile::tempdir().unwrap();
    let c = small_config(tmp.path());
    let one_shot = pipeline::run_pipeline(&c, 1).unwrap();

    let data = pipeline::load_data(&c).unwrap();
    let manifest: RepresentativeManifest = pipeline::read_json(&tmp.path().join(pipeline::REPS_MANIFEST)).unwrap();
    let reps = manifest.resolve(&data.train).unwrap();
    let model = pipeline::fit_score_model(&data.train, &c).unwrap();
    let staged = pipeline::align(&model, &reps, &c, 3).unwrap();
    assert_eq!(staged, one_shot.guided);
}

#[test]
fn csv_and_binary_inputs_give_the_same_selection() {
    let tmp = tempfile::tempdir().unwrap();
    let bench = make_benchmark(&BenchmarkSpec {
        classes: 2,
        points_per_class: 200,
        test_points: 0,
        ..BenchmarkSpec::standard(9)
    })
    .unwrap();
    let c = small_config(tmp.path());
    let params = pipeline::discovery_params(&c);

    let mut picks = Vec::new();
    for (name, format) in [("train.bin", Format::Binary), ("train.csv", Format::Csv)] {
        let path = tmp.path().join(name);
        let labels = default_labels_path(&path);
        save_embeddings(&bench.train, &path, format, &labels).unwrap();
        let loaded = load_embeddings(&path, format, &labels).unwrap();
        assert_eq!(loaded.sample_ids(), bench.train.sample_ids());
        let reps = pipeline::discover(&loaded, params, 0, 1).unwrap();
        picks.push(pipeline::representative_rows(&reps));
    }
    assert_eq!(picks[0], picks[1]);
    assert_eq!(picks[0].len(), 12);
}

#[test]
fn report_grid_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    for mcs in [5, 30] {
        let dir = tmp.path().join(format!("mcs-{mcs}"));
        let mut c = small_config(&dir);
        c.min_cluster_size = mcs;
        pipeline::run_pipeline(&c, 1).unwrap();
    }
    let rows = pipeline::collect_grid(tmp.path()).unwrap();
    assert_eq!(rows.len(), 2);
    let mut csv = Vec::new();
    pipeline::write_grid_csv(&rows, &mut csv).unwrap();
    let text = String::from_utf8(csv).unwrap();
    assert_eq!(text.lines().count(), 3);
    assert!(text.lines().nth(1).unwrap().starts_with("5,"));
}
