use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;

use crossnobis::io::{read_matrix, read_vector, write_matrix, write_vector};
use crossnobis::model::pattern_distances;
use crossnobis::simulator::direct::standard_normal_matrix;
use crossnobis::simulator::experiments::{run_experiment, ExperimentConfig, ExperimentKind};
use crossnobis_cli::{contrast_test, fmt_sig, read_variance_model, NullArg};

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_crossnobis"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn value(text: &str, key: &str) -> Option<String> {
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key} = ")).map(str::to_owned))
}

fn noisy_partitions(dir: &Path, k: usize, p: usize, m: usize, seed: u64) -> Vec<String> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let u = standard_normal_matrix(&mut rng, k, p);
    (0..m)
        .map(|i| {
            let path = dir.join(format!("part{i}.ldcm"));
            write_matrix(&path, &(&u + standard_normal_matrix(&mut rng, k, p))).unwrap();
            s(&path).to_owned()
        })
        .collect()
}

#[test]
fn identical_noiseless_partitions_give_exact_distances() {
    let dir = tempfile::tempdir().unwrap();
    let u = DMatrix::from_fn(3, 5, |i, j| (i as f64 + 1.0) * (j as f64 - 2.0) * 0.3);
    let files: Vec<String> = (0..3)
        .map(|i| {
            let p = dir.path().join(format!("p{i}.ldcm"));
            write_matrix(&p, &u).unwrap();
            s(&p).to_owned()
        })
        .collect();
    let prefix = dir.path().join("out");
    let mut args = vec!["distances", "--out", s(&prefix), "--patterns"];
    args.extend(files.iter().map(String::as_str));
    let o = bin(&args);
    assert!(o.status.success(), "{}", stderr(&o));

    let d = read_vector(&dir.path().join("out.dist")).unwrap();
    let truth = pattern_distances(&u).unwrap();
    for (a, b) in d.iter().zip(truth.as_slice()) {
        assert!((a - b).abs() < 1e-12 * b.max(1.0));
    }
    assert_eq!(read_matrix(&dir.path().join("out.v")).unwrap().shape(), (3, 3));
    assert_eq!(read_matrix(&dir.path().join("out.sigmak")).unwrap().shape(), (3, 3));
    let meta = read_matrix(&dir.path().join("out.meta")).unwrap();
    assert_eq!(meta.as_slice()[..2], [3.0, 5.0]);
    assert!(value(&stdout(&o), "d[3]").is_some());
}

#[test]
fn single_partition_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let files = noisy_partitions(dir.path(), 3, 5, 1, 1);
    let prefix = dir.path().join("out");
    let o = bin(&["distances", "--out", s(&prefix), "--patterns", &files[0]]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error:"));
    assert!(!dir.path().join("out.dist").exists());
}

#[test]
fn ztest_matches_library_to_six_digits() {
    let dir = tempfile::tempdir().unwrap();
    let files = noisy_partitions(dir.path(), 2, 40, 4, 2);
    let prefix = dir.path().join("an");
    let mut args = vec!["distances", "--out", s(&prefix), "--patterns"];
    args.extend(files.iter().map(String::as_str));
    assert!(bin(&args).status.success());

    let dist = dir.path().join("an.dist");
    let o = bin(&["ztest", "--distances", s(&dist), "--cov", s(&prefix), "--contrast", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);

    let d_hat = crossnobis::model::DistanceVector::new(read_vector(&dist).unwrap()).unwrap();
    assert_eq!(d_hat.len(), 1);
    let var = read_variance_model(&prefix).unwrap();
    let t = contrast_test(&d_hat, &var, "1", NullArg::Zero, false).unwrap();
    assert_eq!(value(&out, "z").unwrap(), fmt_sig(t.z, 6));
    assert_eq!(value(&out, "sided").unwrap(), "one");
    let z: f64 = value(&out, "z").unwrap().parse().unwrap();
    assert!((z - t.z).abs() <= 5e-6 * t.z.abs());

    let two = bin(&["ztest", "--distances", s(&dist), "--cov", s(&prefix), "--contrast", "1", "--two-sided"]);
    let p1: f64 = value(&out, "p").unwrap().parse().unwrap();
    let p2: f64 = value(&stdout(&two), "p").unwrap().parse().unwrap();
    if t.z > 0.0 {
        assert!((p2 - 2.0 * p1).abs() <= 1e-5 * p2);
    }

    let eq = bin(&["ztest", "--distances", s(&dist), "--cov", s(&prefix), "--contrast", "1", "--null", "equalized"]);
    assert_eq!(eq.status.code(), Some(1));
    let bad = bin(&["ztest", "--distances", s(&dist), "--cov", s(&prefix), "--contrast", "2"]);
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn model_comparison_reports_scales_and_ties() {
    let dir = tempfile::tempdir().unwrap();
    let files = noisy_partitions(dir.path(), 4, 30, 5, 3);
    let prefix = dir.path().join("an");
    let mut args = vec!["distances", "--out", s(&prefix), "--patterns"];
    args.extend(files.iter().map(String::as_str));
    assert!(bin(&args).status.success());
    let dist = dir.path().join("an.dist");

    let m = DVector::from_vec(vec![1.0, 2.0, 1.5, 0.5, 1.0, 2.5]);
    let a = dir.path().join("alpha.ldcm");
    let b = dir.path().join("beta.ldcm");
    let c = dir.path().join("flat.ldcm");
    write_vector(&a, &m).unwrap();
    write_vector(&b, &m).unwrap();
    write_vector(&c, &DVector::from_element(6, 1.0)).unwrap();

    let tie = bin(&["model-compare", "--distances", s(&dist), "--cov-inputs", s(&prefix), "--models", s(&a), s(&b)]);
    assert!(tie.status.success(), "{}", stderr(&tie));
    let out = stdout(&tie);
    assert!(out.contains("result = tie"));
    assert!(out.contains("s_hat = ") && out.contains("iterations = "));

    for method in ["cosine", "spearman"] {
        let o = bin(&["model-compare", "--distances", s(&dist), "--models", s(&a), s(&b), "--method", method]);
        assert!(o.status.success());
        assert!(stdout(&o).contains("result = tie"));
        assert!(!stdout(&o).contains("s_hat"));
    }

    let pick = bin(&["model-compare", "--distances", s(&dist), "--cov-inputs", s(&prefix), "--models", s(&a), s(&c)]);
    assert!(stdout(&pick).contains("winner = "));

    let no_cov = bin(&["model-compare", "--distances", s(&dist), "--models", s(&a)]);
    assert_eq!(no_cov.status.code(), Some(1));
    let bad_method = bin(&["model-compare", "--distances", s(&dist), "--models", s(&a), "--method", "rank"]);
    assert_eq!(bad_method.status.code(), Some(1));
}

#[test]
fn simulate_writes_results_matching_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("c.toml");
    fs::write(
        &config,
        "[fig1]\npartitions = 3\nvoxels = 20\ndistances = [1.0, 0.5, 0.8]\nnoise_variance = 1.0\nreplications = 200\n",
    )
    .unwrap();
    let out = dir.path().join("res");
    let o = bin(&["simulate", "--kind", "fig1", "--config", s(&config), "--seed", "9", "--out-dir", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert_eq!(fs::read_to_string(out.join("summary.txt")).unwrap(), text);
    assert_eq!(value(&text, "seed").unwrap(), "9");

    let mut cfg = ExperimentConfig::default_for(ExperimentKind::Fig1);
    if let ExperimentConfig::Fig1(c) = &mut cfg {
        c.voxels = 20;
        c.distances = vec![1.0, 0.5, 0.8];
        c.replications = 200;
    }
    let lib = run_experiment(&cfg, 9).unwrap();
    for (k, v) in &lib.summary {
        let printed: f64 = value(&text, k).unwrap().parse().unwrap();
        assert_eq!(printed.to_bits(), v.to_bits(), "{k}");
    }
    for t in &lib.tables {
        let m = read_matrix(&out.join(format!("{}.ldcm", t.name))).unwrap();
        assert_eq!(m, t.data);
    }
}

#[test]
fn config_errors_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("res");

    let missing = dir.path().join("missing.toml");
    fs::write(&missing, "[fig1]\npartitions = 3\nvoxels = 20\ndistances = [1.0]\nnoise_variance = 1.0\n").unwrap();
    let o = bin(&["simulate", "--kind", "fig1", "--config", s(&missing), "--out-dir", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("replications"));

    let unknown = dir.path().join("unknown.toml");
    fs::write(
        &unknown,
        "[fig1]\npartitions = 3\nvoxels = 20\ndistances = [1.0]\nnoise_variance = 1.0\nreplications = 5\nvoxel_size = 2\n",
    )
    .unwrap();
    let o = bin(&["simulate", "--kind", "fig1", "--config", s(&unknown), "--out-dir", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("voxel_size"));

    let invalid = dir.path().join("invalid.toml");
    fs::write(&invalid, "[fig1]\npartitions = 1\nvoxels = 20\ndistances = [1.0]\nnoise_variance = 1.0\nreplications = 5\n").unwrap();
    let o = bin(&["simulate", "--kind", "fig1", "--config", s(&invalid), "--out-dir", s(&out)]);
    assert_eq!(o.status.code(), Some(2));

    let no_section = bin(&["simulate", "--kind", "fpr", "--config", s(&invalid), "--out-dir", s(&out)]);
    assert_eq!(no_section.status.code(), Some(2));
    let bad_kind = bin(&["simulate", "--kind", "fig9", "--out-dir", s(&out)]);
    assert_eq!(bad_kind.status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn io_errors_exit_with_code_three() {
    let dir = tempfile::tempdir().unwrap();
    let absent = dir.path().join("absent.ldcm");
    let prefix = dir.path().join("out");
    let o = bin(&["distances", "--out", s(&prefix), "--patterns", s(&absent), s(&absent)]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("absent.ldcm"));

    let garbage = dir.path().join("garbage.ldcm");
    fs::write(&garbage, b"not a matrix").unwrap();
    let o = bin(&["distances", "--out", s(&prefix), "--patterns", s(&garbage), s(&garbage)]);
    assert_eq!(o.status.code(), Some(3));

    let file = dir.path().join("file");
    fs::write(&file, "x").unwrap();
    let o = bin(&["simulate", "--kind", "fig1", "--out-dir", s(&file)]);
    assert_eq!(o.status.code(), Some(3));
}
