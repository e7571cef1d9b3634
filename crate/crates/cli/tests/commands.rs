use std::fs;
use std::path::Path;
use std::process::Command;

use ndgauss::datasets::{write_tensor_file, DimRole, TensorData};
use ndgauss_cli::checkpoint::Checkpoint;
use ndgauss_cli::commands::eval::{run_eval, EvalArgs, QuerySource};
use ndgauss_cli::commands::fit::{run_fit, FitArgs, CHECKPOINT_FILE, METRICS_FILE};
use tempfile::TempDir;

fn ndg(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_ndg"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("ndg runs")
}

fn small_config(dir: &Path, iterations: u64) -> std::path::PathBuf {
    let path = dir.join(format!("run{iterations}.toml"));
    fs::write(
        &path,
        format!(
            "[dataset]\nkind = \"gmm-oracle\"\nseed = 3\ndims = 3\ncomponents = 3\n\n\
             [train]\niterations = {iterations}\nphase_length = 40\ninitial_components = 6\n\
             batch_size = 128\ntile_size = 64\nvalidation_size = 256\nrecord_timing = false\n"
        ),
    )
    .unwrap();
    path
}

fn fit(config: &Path, out: &Path, resume: Option<&Path>) {
    run_fit(&FitArgs {
        config: config.to_path_buf(),
        out: out.to_path_buf(),
        resume: resume.map(Path::to_path_buf),
        seed: None,
    })
    .unwrap();
}

#[test]
fn zero_iterations_writes_initial_checkpoint_and_header_only_metrics() {
    let dir = TempDir::new().unwrap();
    let cfg = small_config(dir.path(), 0);
    let out = dir.path().join("out");
    let o = ndg(&["fit", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let metrics = fs::read_to_string(out.join(METRICS_FILE)).unwrap();
    assert_eq!(metrics, "iteration,loss,n_components,culled_fraction,ms_per_iter\n");
    let ck = Checkpoint::load(&out.join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(ck.state.iteration, 0);
    assert_eq!(ck.state.mixture.len(), 6);
}

#[test]
fn identical_runs_give_identical_files() {
    let dir = TempDir::new().unwrap();
    let cfg = small_config(dir.path(), 120);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    fit(&cfg, &a, None);
    fit(&cfg, &b, None);
    for f in [CHECKPOINT_FILE, METRICS_FILE, "phases.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let rows = fs::read_to_string(a.join(METRICS_FILE)).unwrap();
    assert_eq!(rows.lines().count(), 121);
    for line in rows.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        assert_eq!(cols.len(), 5);
        assert!(cols.iter().all(|c| c.parse::<f64>().is_ok()), "{line}");
    }
}

#[test]
fn global_seed_changes_the_run() {
    let dir = TempDir::new().unwrap();
    let cfg = small_config(dir.path(), 20);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    fit(&cfg, &a, None);
    run_fit(&FitArgs {
        config: cfg.clone(),
        out: b.clone(),
        resume: None,
        seed: Some(99),
    })
    .unwrap();
    assert_ne!(fs::read(a.join(METRICS_FILE)).unwrap(), fs::read(b.join(METRICS_FILE)).unwrap());
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let dir = TempDir::new().unwrap();
    let full = small_config(dir.path(), 160);
    let half = small_config(dir.path(), 80);
    let (straight, split) = (dir.path().join("straight"), dir.path().join("split"));
    fit(&full, &straight, None);
    fit(&half, &split, None);
    let mid = dir.path().join("mid.ndgc");
    fs::copy(split.join(CHECKPOINT_FILE), &mid).unwrap();
    fit(&full, &split, Some(&mid));

    let a = Checkpoint::load(&straight.join(CHECKPOINT_FILE)).unwrap();
    let b = Checkpoint::load(&split.join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(a.state, b.state);
    assert_eq!(a.to_bytes(), b.to_bytes());
    assert_eq!(
        fs::read(straight.join(METRICS_FILE)).unwrap(),
        fs::read(split.join(METRICS_FILE)).unwrap()
    );
}

#[test]
fn config_errors_exit_two_with_location() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[train]\niterations = 10\nlearning_rate = 0.1\n").unwrap();
    let o = ndg(&["fit", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("bad.toml:3") && err.contains("learning_rate"), "{err}");
}

#[test]
fn eval_rejects_wrong_dimension_and_accepts_empty_queries() {
    let dir = TempDir::new().unwrap();
    let cfg = small_config(dir.path(), 0);
    let out = dir.path().join("fit");
    fit(&cfg, &out, None);
    let ckpt = out.join(CHECKPOINT_FILE);

    let wrong = dir.path().join("wrong.ndgt");
    write_tensor_file(
        &wrong,
        &TensorData {
            n_dims: 2,
            roles: vec![DimRole::Position; 2],
            queries: vec![0.5; 4],
            targets: vec![[0.0; 3]; 2],
        },
    )
    .unwrap();
    let o = ndg(&[
        "eval",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--queries",
        wrong.to_str().unwrap(),
        "--out",
        dir.path().join("e1").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));

    let empty = dir.path().join("empty.ndgt");
    write_tensor_file(
        &empty,
        &TensorData {
            n_dims: 3,
            roles: vec![DimRole::Position; 3],
            queries: vec![],
            targets: vec![],
        },
    )
    .unwrap();
    let e2 = dir.path().join("e2");
    let o = ndg(&[
        "eval",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--queries",
        empty.to_str().unwrap(),
        "--out",
        e2.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let pred = ndgauss::datasets::read_tensor_file(e2.join("predictions.ndgt")).unwrap();
    assert!(pred.is_empty());
}

#[test]
fn eval_grid_writes_images_and_culling_stays_close() {
    let dir = TempDir::new().unwrap();
    let cfg = small_config(dir.path(), 200);
    let out = dir.path().join("fit");
    fit(&cfg, &out, None);
    let run = |no_cull: bool, name: &str| {
        let args = EvalArgs {
            ckpt: out.join(CHECKPOINT_FILE),
            source: QuerySource::Grid("32x24@0,1".parse().unwrap()),
            out: dir.path().join(name),
            reference: None,
            no_cull,
            seed: None,
        };
        run_eval(&args).unwrap();
        ndgauss::datasets::read_tensor_file(args.out.join("predictions.ndgt")).unwrap()
    };
    let culled = run(false, "culled");
    let full = run(true, "full");
    assert_eq!(culled.len(), 32 * 24);
    assert!(dir.path().join("culled/slice.pfm").exists());
    assert_eq!(fs::read(dir.path().join("culled/slice.ppm")).unwrap().len(), "P6\n32 24\n255\n".len() + 32 * 24 * 3);
    // Every culled term sits beyond three standard deviations of each query,
    // so its contribution is at most its weight times exp(-4.5).
    let max_dev = culled
        .targets
        .iter()
        .zip(&full.targets)
        .flat_map(|(a, b)| (0..3).map(move |c| (a[c] - b[c]).abs()))
        .fold(0.0f32, f32::max);
    assert!(max_dev < 0.05, "{max_dev}");
}

#[test]
fn gradcheck_exit_codes() {
    let o = ndg(&["gradcheck"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("max relative error"));
    let o = ndg(&["gradcheck", "--corrupt-scale", "1.01"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("worst coordinates"));
}
