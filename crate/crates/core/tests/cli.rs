use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ldct_core::config::RunConfig;
use ldct_core::container::{read_image, write_sinogram};
use ldct_core::pfbs::checkpoint::{load_model, read_manifest, save_model};
use ldct_core::pfbs::{ModelConfig, PfbsMode, UnrolledModel};
use ldct_core::{FbpOperator, Sinogram, SinogramDomain};
use tempfile::TempDir;

const WIDTH: usize = 16;

fn ldct(config: &Path, command: &str, extra: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ldct"))
        .arg(command)
        .arg("--config")
        .arg(config)
        .args(["--threads", "1", "-q"])
        .args(extra)
        .output()
        .expect("spawn ldct")
}

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, format!("width = {WIDTH}\nseed = 21\n{body}")).unwrap();
    path
}

fn simulate(dir: &Path, name: &str, count: usize) -> PathBuf {
    let out = dir.join(name);
    fs::create_dir_all(&out).unwrap();
    let cfg = write_config(
        dir,
        &format!("{name}.toml"),
        &format!("[simulate]\nout_dir = {out:?}\ncount = {count}\ndoses = [5e4, 1e4]\n"),
    );
    let run = ldct(&cfg, "simulate", &[]);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    out.join("manifest.jsonl")
}

fn train_body(manifest: &Path, out: &Path, method: &str, epochs: usize, lr: f64) -> String {
    format!(
        "[train]\nmanifest = {manifest:?}\nout_dir = {out:?}\nmethod = {method:?}\n\
         [train.model]\nstages = 1\nchannels = 4\n\
         [train.training]\nepochs = {epochs}\nbatch_size = 2\nlr = {lr:e}\n"
    )
}

fn log_without_wall_time(out: &Path) -> Vec<serde_json::Value> {
    fs::read_to_string(out.join("train_log.jsonl"))
        .unwrap()
        .lines()
        .map(|l| {
            let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
            v.as_object_mut().unwrap().remove("wall_time");
            v
        })
        .collect()
}

#[test]
fn exit_codes_separate_config_and_data_errors() {
    let dir = TempDir::new().unwrap();
    let bad = write_config(dir.path(), "bad.toml", "sed = 3\n");
    assert_eq!(ldct(&bad, "simulate", &[]).status.code(), Some(2));

    let missing = dir.path().join("absent");
    let cfg = write_config(
        dir.path(),
        "missing.toml",
        &format!("[simulate]\nout_dir = {missing:?}\ncount = 2\n"),
    );
    let run = ldct(&cfg, "simulate", &[]);
    assert_eq!(run.status.code(), Some(3));
    assert!(!missing.exists());

    let no_section = write_config(dir.path(), "empty.toml", "");
    assert_eq!(ldct(&no_section, "train", &[]).status.code(), Some(2));
    assert_eq!(ldct(&no_section, "fly", &[]).status.code(), Some(2));
}

#[test]
fn simulate_is_reproducible() {
    let dir = TempDir::new().unwrap();
    let a = simulate(dir.path(), "a", 6);
    let b = simulate(dir.path(), "b", 6);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let snapshot = fs::read_to_string(dir.path().join("a/resolved_config.toml")).unwrap();
    assert!(RunConfig::from_toml(&snapshot).is_ok());

    let out = dir.path().join("c");
    fs::create_dir_all(&out).unwrap();
    let cfg = write_config(
        dir.path(),
        "c.toml",
        &format!("[simulate]\nout_dir = {out:?}\ncount = 6\ndoses = [5e4, 1e4]\n"),
    );
    assert!(ldct(&cfg, "simulate", &["--seed", "22"]).status.success());
    assert_ne!(fs::read(&a).unwrap(), fs::read(out.join("manifest.jsonl")).unwrap());
}

#[test]
fn reconstruct_baselines() {
    let dir = TempDir::new().unwrap();
    let cfg = RunConfig::from_toml(&format!("width = {WIDTH}")).unwrap();
    let geometry = cfg.scan_geometry().unwrap();
    let shape = cfg.image_shape().unwrap();
    let fbp = FbpOperator::new(geometry, shape);

    let zero = dir.path().join("zero.tomo");
    write_sinogram(
        &zero,
        &Sinogram::zeros(geometry.n_views(), geometry.n_bins(), SinogramDomain::PostLog),
    )
    .unwrap();
    let body = |method: &str, input: &Path, output: &str, extra: &str| {
        format!(
            "[reconstruct]\nmethod = {method:?}\ninput = {input:?}\noutput = {:?}\n{extra}",
            dir.path().join(output)
        )
    };
    let c = write_config(dir.path(), "z.toml", &body("fbp", &zero, "z.tomo", ""));
    assert!(ldct(&c, "reconstruct", &[]).status.success());
    let z = read_image(&dir.path().join("z.tomo")).unwrap();
    assert!(z.values().iter().all(|&v| v == 0.0));
    assert!(dir.path().join("z.resolved.toml").is_file());

    let manifest = simulate(dir.path(), "data", 3);
    let y_path = manifest
        .parent()
        .unwrap()
        .join("sinograms/dose_50000/phantom_00000.tomo");
    let y = ldct_core::container::read_sinogram(&y_path).unwrap();
    let expected = fbp.reconstruct(&y).unwrap();

    let c = write_config(
        dir.path(),
        "f.toml",
        &body(
            "fbp",
            &y_path,
            "f.tomo",
            &format!("preview = {:?}\n", dir.path().join("f.png")),
        ),
    );
    assert!(ldct(&c, "reconstruct", &[]).status.success());
    assert_eq!(read_image(&dir.path().join("f.tomo")).unwrap(), expected);
    let png = fs::read(dir.path().join("f.png")).unwrap();
    assert_eq!(&png[1..4], b"PNG");

    let c = write_config(
        dir.path(),
        "t.toml",
        &body("tv", &y_path, "t.tomo", "[reconstruct.tv]\nouter_iters = 0\n"),
    );
    assert!(ldct(&c, "reconstruct", &[]).status.success());
    assert_eq!(read_image(&dir.path().join("t.tomo")).unwrap(), expected);

    let ckpt = dir.path().join("k0");
    let model_cfg = ModelConfig {
        stages: 0,
        channels: 4,
        ..ModelConfig::new(PfbsMode::Air)
    };
    save_model(&ckpt, &UnrolledModel::new(model_cfg, geometry, shape).unwrap()).unwrap();
    let extra = format!("checkpoint = {ckpt:?}\n");
    let c = write_config(dir.path(), "p.toml", &body("pfbs-air", &y_path, "p.tomo", &extra));
    assert!(ldct(&c, "reconstruct", &[]).status.success());
    assert_eq!(read_image(&dir.path().join("p.tomo")).unwrap(), expected);

    let c = write_config(dir.path(), "m.toml", &body("pfbs-ir", &y_path, "m.tomo", &extra));
    assert_eq!(ldct(&c, "reconstruct", &[]).status.code(), Some(2));
    let c = write_config(dir.path(), "n.toml", &body("pfbs-air", &y_path, "n.tomo", ""));
    assert_eq!(ldct(&c, "reconstruct", &[]).status.code(), Some(2));
}

#[test]
fn train_with_zero_learning_rate_keeps_weights() {
    let dir = TempDir::new().unwrap();
    let manifest = simulate(dir.path(), "data", 5);
    let out = dir.path().join("run");
    let c = write_config(
        dir.path(),
        "train.toml",
        &train_body(&manifest, &out, "pfbs-air", 1, 0.0),
    );
    let run = ldct(&c, "train", &[]);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));

    let init = load_model(&out.join("checkpoints/epoch_0000")).unwrap();
    let last = load_model(&out.join("final")).unwrap();
    assert_eq!(init.parameters(), last.parameters());
    assert_eq!(read_manifest(&out.join("final")).unwrap().model.stages, 1);
    assert_eq!(log_without_wall_time(&out).len(), 1);
}

#[test]
fn interrupted_training_resumes_to_the_same_log() {
    let dir = TempDir::new().unwrap();
    let manifest = simulate(dir.path(), "data", 5);

    let straight = dir.path().join("straight");
    let c = write_config(
        dir.path(),
        "s.toml",
        &train_body(&manifest, &straight, "pfbs-ir", 2, 1e-3),
    );
    assert!(ldct(&c, "train", &[]).status.success());

    let resumed = dir.path().join("resumed");
    let first = write_config(
        dir.path(),
        "r1.toml",
        &train_body(&manifest, &resumed, "pfbs-ir", 1, 1e-3),
    );
    assert!(ldct(&first, "train", &[]).status.success());
    let second = write_config(
        dir.path(),
        "r2.toml",
        &train_body(&manifest, &resumed, "pfbs-ir", 2, 1e-3),
    );
    assert!(ldct(&second, "train", &[]).status.success());

    assert_eq!(log_without_wall_time(&straight), log_without_wall_time(&resumed));
    let a = load_model(&straight.join("final")).unwrap();
    let b = load_model(&resumed.join("final")).unwrap();
    assert_eq!(a.parameters(), b.parameters());
    assert_eq!(a.buffers(), b.buffers());

    let changed = write_config(
        dir.path(),
        "r3.toml",
        &train_body(&manifest, &resumed, "pfbs-ir", 3, 5e-3),
    );
    assert_eq!(ldct(&changed, "train", &[]).status.code(), Some(2));
}

#[test]
fn eval_scores_reference_perfectly() {
    let dir = TempDir::new().unwrap();
    let manifest = simulate(dir.path(), "data", 10);
    let out = dir.path().join("eval");
    let c = write_config(
        dir.path(),
        "eval.toml",
        &format!("[eval]\nmanifest = {manifest:?}\nout_dir = {out:?}\nmethods = [\"reference\", \"fbp\"]\n"),
    );
    let run = ldct(&c, "eval", &[]);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let table = String::from_utf8(run.stdout).unwrap();
    assert_eq!(table.lines().count(), 1 + 2 * 2);

    let records: Vec<serde_json::Value> = fs::read_to_string(out.join("metrics.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(records.len(), 2 * 2 * 2);
    for r in records.iter().filter(|r| r["method"] == "reference") {
        assert_eq!(r["rmse"], 0.0);
        assert_eq!(r["ssim"], 1.0);
        assert!(r["psnr"].is_null());
    }
    for r in records.iter().filter(|r| r["method"] == "fbp") {
        assert!(r["rmse"].as_f64().unwrap() > 0.0);
        assert!(r["ssim"].as_f64().unwrap() < 1.0);
    }
    assert_eq!(fs::read_to_string(out.join("summary.txt")).unwrap(), table);

    let again = ldct(&c, "eval", &[]);
    assert_eq!(String::from_utf8(again.stdout).unwrap(), table);
}

#[test]
fn shipped_config_is_valid() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk_small.toml");
    let cfg = RunConfig::load(&path).unwrap();
    assert_eq!(cfg.image_shape().unwrap().width, 64);
    let train = cfg.train.as_ref().unwrap();
    assert_eq!(train.model.stages, 4);
    let eval = cfg.eval.as_ref().unwrap();
    assert!(eval.checkpoint(ldct_core::config::Method::PfbsAir, 5e4).is_some());
    assert_eq!(RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap(), cfg);
}
