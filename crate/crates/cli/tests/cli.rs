use std::path::Path;
use std::process::{Command, Output};

use scaffusion::dataset::{self, Manifest};

fn scaffusion(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scaffusion"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = scaffusion(args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fails(args: &[&str]) -> String {
    let out = scaffusion(args);
    assert!(!out.status.success(), "{args:?} should fail");
    String::from_utf8(out.stderr).unwrap()
}

fn gen(dir: &Path, extra: &[&str]) -> String {
    let mut args = vec!["gen-data", "--seed", "4", "--width", "64", "--height", "32", "--out", dir.to_str().unwrap()];
    args.extend_from_slice(extra);
    ok(&args)
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn three_frames_give_one_triplet() {
    let dir = tempfile::tempdir().unwrap();
    let summary = gen(dir.path(), &["--frames", "3"]);
    assert!(summary.contains("(1 triplets)"), "{summary}");
    assert_eq!(dataset::load(dir.path()).unwrap().triplets().len(), 1);
}

#[test]
fn regeneration_is_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    gen(a.path(), &["--frames", "4", "--layout", "corridor"]);
    gen(b.path(), &["--frames", "4", "--layout", "corridor"]);
    let (fa, fb) = (files(a.path()), files(b.path()));
    assert_eq!(fa.len(), 1 + 4 * 4);
    assert!(fa == fb, "datasets differ");
}

#[test]
fn corner_sampling_density_at_320x240() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    ok(&[
        "gen-data", "--seed", "1", "--frames", "3", "--width", "320", "--height", "240", "--sparsity", "corner",
        "--points", "375", "--out", out,
    ]);
    let m = Manifest::read(dir.path()).unwrap();
    assert!((m.mean_density - 0.0049).abs() < 1e-4, "density {}", m.mean_density);
}

#[test]
fn bad_layout_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let err = fails(&["gen-data", "--frames", "3", "--layout", "cave", "--out", dir.path().to_str().unwrap()]);
    assert!(err.contains("cave"), "{err}");
}

#[test]
fn train_eval_infer_visualize() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    gen(&root.join("data"), &["--frames", "4", "--layout", "corridor"]);
    std::fs::write(
        root.join("scaff.toml"),
        "stage = \"scaffnet\"\nseed = 2\n[data]\ntrain = \"data\"\nvalidation = \"data\"\n\
         [optim]\nlearning_rate = 1e-3\nbatch_size = 2\nepochs = 1\ncrop = [32, 32]\nflip = true\n",
    )
    .unwrap();
    let p = |s: &str| root.join(s).display().to_string();
    ok(&["train", "--stage", "scaffnet", "--config", &p("scaff.toml"), "--out", &p("scaff")]);
    for f in ["final.ckpt", "latest.ckpt", "epoch_000.ckpt", "losses.csv", "metrics.csv", "config.toml"] {
        assert!(root.join("scaff").join(f).exists(), "missing {f}");
    }

    std::fs::write(
        root.join("fusion.toml"),
        "stage = \"fusionnet\"\nseed = 2\n[data]\ntrain = \"data\"\n\
         [model]\nscaffnet_checkpoint = \"scaff/final.ckpt\"\n\
         [optim]\nlearning_rate = 1e-4\nbatch_size = 1\nepochs = 1\n",
    )
    .unwrap();
    ok(&["train", "--stage", "fusionnet", "--config", &p("fusion.toml"), "--out", &p("fusion")]);

    let report = ok(&[
        "--deterministic", "eval", "--checkpoint", &p("fusion/final.ckpt"), "--dataset", &p("data"), "--out", &p("eval"),
    ]);
    assert!(report.contains("MAE"));
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(root.join("eval/metrics.json")).unwrap()).unwrap();
    let mae = json["aggregate"]["mae"].as_f64().unwrap();
    assert!(mae.is_finite() && mae > 0.0);
    assert_eq!(std::fs::read_dir(root.join("eval/error_maps")).unwrap().count(), 4);

    let frame = |s: &str| p(&format!("data/corridor-000/000001_{s}.png"));
    ok(&[
        "infer", "--checkpoint", &p("fusion/final.ckpt"), "--image", &frame("image"), "--sparse", &frame("sparse"), "--out",
        &p("infer"),
    ]);
    for f in ["depth.png", "depth_color.png", "topology.png", "topology_color.png"] {
        assert!(root.join("infer").join(f).exists(), "missing {f}");
    }
    let depth = dataset::read_depth(&root.join("infer/depth.png")).unwrap();
    assert!(depth.data().iter().all(|&d| d > 0.0));
    ok(&["visualize", "--depth", &p("infer/depth.png"), "--gt", &frame("depth"), "--out", &p("err.png")]);
    ok(&["visualize", "--depth", &p("infer/depth.png"), "--out", &p("depth.png")]);
    assert!(root.join("err.png").exists() && root.join("depth.png").exists());

    // Stage mismatch between flag and file.
    let err = fails(&["train", "--stage", "scaffnet", "--config", &p("fusion.toml"), "--out", &p("x")]);
    assert!(err.contains("`stage`"), "{err}");
}

#[test]
fn config_errors_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "stage = \"scaffnet\"\n[data]\ntrain = \"d\"\n[optim]\nlearning_rate = -1.0\nbatch_size = 1\nepochs = 1\n").unwrap();
    let out = dir.path().join("o");
    let err = fails(&["train", "--stage", "scaffnet", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(err.contains("optim.learning_rate"), "{err}");
}

#[test]
fn eval_reports_missing_files_and_bad_resolution() {
    let dir = tempfile::tempdir().unwrap();
    let p = |s: &str| dir.path().join(s).display().to_string();
    let err = fails(&["eval", "--checkpoint", &p("nope.ckpt"), "--dataset", &p("data"), "--out", &p("e")]);
    assert!(err.contains("nope.ckpt"), "{err}");

    ok(&["gen-data", "--frames", "3", "--width", "48", "--height", "32", "--out", &p("odd")]);
    let config = scaffusion::nets::ScaffNetConfig::preset(scaffusion::nets::Preset::Tiny, None);
    let net = scaffusion::nets::ScaffNet::new(config.clone()).unwrap();
    let mut ck = scaffusion::checkpoint::Checkpoint::new(scaffusion::checkpoint::ModelKind::Scaffnet, config, None, 0, 0);
    ck.put_params("scaffnet", &net.init(&mut scaffusion::seed::rng_for(0, "t", 0)));
    ck.save(&dir.path().join("m.ckpt")).unwrap();
    let err = fails(&["eval", "--checkpoint", &p("m.ckpt"), "--dataset", &p("odd"), "--out", &p("e")]);
    assert!(err.contains("pad to 64x32"), "{err}");
}

#[test]
fn unknown_ablation_suite_is_rejected() {
    let err = fails(&["ablate", "--suite", "everything"]);
    assert!(err.contains("unknown ablation suite"), "{err}");
}

#[test]
fn ablation_from_config_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("ablate.toml");
    std::fs::write(
        &cfg,
        r#"
seed = 3
width = 64
height = 32
densities = [0.05, 0.02, 0.01]
sampling = { kind = "harris-kmeans", points = 100 }
scaffnet_train = { layout = "room", sequences = 1, frames = 4 }
scaffnet_val = { layout = "room", sequences = 1, frames = 3 }
fusionnet_train = { layout = "corridor", sequences = 1, frames = 4 }
test = { layout = "corridor", sequences = 1, frames = 3 }
scaffnet = { seed = 3, epochs = 1, batch_size = 2, schedule = { base = 1e-3 } }
fusionnet = { seed = 3, epochs = 1, batch_size = 2, schedule = { base = 1e-4 } }
"#,
    )
    .unwrap();
    let out = dir.path().join("report");
    let stdout = ok(&["ablate", "--suite", "spp-on-off", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(stdout.contains("| spp-lower-mae |"), "{stdout}");
    assert!(stdout.contains("verdict: "));
    assert!(out.join("report.md").exists() && out.join("report.csv").exists());
}
