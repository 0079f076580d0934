use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
model.image_size = 16
model.backbone = 4/2, 4/2
model.heads = 2
model.pose_dim = 4
model.class_dim = 4
data.num_samples = 12
data.test_samples = 10
data.size_min = 5
data.size_max = 7
optim.epochs = 2
optim.batch = 4
";

fn decaps(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_decaps"))
        .current_dir(dir)
        .env_remove("DECAPS_SEED")
        .args(args)
        .output()
        .expect("binary runs")
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.cfg"), TINY).unwrap();
    dir
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn train_eval_localize_round_trip() {
    let dir = setup();
    let d = dir.path();
    let out = decaps(d, &["--config", "tiny.cfg", "--output", "run", "train"]);
    assert!(out.status.success(), "{}", stderr(&out));
    for f in ["checkpoint.bin", "epoch_1.bin", "epoch_2.bin", "loss_log.csv", "config.txt"] {
        assert!(d.join("run").join(f).exists(), "missing {f}");
    }
    let log = std::fs::read_to_string(d.join("run/loss_log.csv")).unwrap();
    assert!(log.lines().any(|l| l == "epoch,step,margin,har,total"));
    assert_eq!(log.lines().filter(|l| !l.starts_with('#')).count(), 1 + 2 * 3);

    let eval = decaps(d, &["--output", "run", "eval"]);
    assert!(eval.status.success(), "{}", stderr(&eval));
    let report: serde_json::Value = serde_json::from_slice(&eval.stdout).unwrap();
    assert_eq!(report["num_samples"], 10);
    let saved = std::fs::read(d.join("run/report.json")).unwrap();
    let again = decaps(d, &["--output", "run", "eval", "--report", "second.json"]);
    assert!(again.status.success());
    assert_eq!(std::fs::read(d.join("second.json")).unwrap(), saved);

    let loc = decaps(d, &["--output", "run", "localize", "--dir", "maps"]);
    assert!(loc.status.success(), "{}", stderr(&loc));
    assert!(d.join("maps/000000.json").exists());
    assert!(d.join("maps/000000_h1_c2.pgm").exists());
}

#[test]
fn resume_reproduces_uninterrupted_training() {
    let (a, b) = (setup(), setup());
    let one = decaps(a.path(), &["--config", "tiny.cfg", "--optim.epochs", "1", "--output", "run", "train"]);
    assert!(one.status.success(), "{}", stderr(&one));
    let more = decaps(a.path(), &["--optim.epochs", "2", "train", "--resume", "run/checkpoint.bin"]);
    assert!(more.status.success(), "{}", stderr(&more));
    assert!(stderr(&more).contains("resuming at epoch 1"));
    let full = decaps(b.path(), &["--config", "tiny.cfg", "--output", "run", "train"]);
    assert!(full.status.success());
    let read = |d: &Path| std::fs::read(d.join("run/checkpoint.bin")).unwrap();
    assert_eq!(read(a.path()), read(b.path()));
}

#[test]
fn gen_writes_reloadable_manifests() {
    let dir = setup();
    let d = dir.path();
    let out = decaps(d, &["--config", "tiny.cfg", "gen", "--out", "data"]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(d.join("data/train/images/000011.ppm").exists());
    let again = decaps(d, &["--config", "tiny.cfg", "gen", "--out", "copy"]);
    assert_eq!(out.stdout.len(), again.stdout.len());
    let digests = |o: &Output| {
        String::from_utf8_lossy(&o.stdout)
            .lines()
            .map(|l| l.rsplit("sha256 ").next().unwrap().to_string())
            .collect::<Vec<_>>()
    };
    assert_eq!(digests(&out), digests(&again));
    assert_eq!(
        std::fs::read(d.join("data/test/manifest.jsonl")).unwrap(),
        std::fs::read(d.join("copy/test/manifest.jsonl")).unwrap()
    );

    let trained = decaps(
        d,
        &[
            "--config",
            "tiny.cfg",
            "--data.manifest",
            "data/train/manifest.jsonl",
            "--data.test-manifest",
            "data/test/manifest.jsonl",
            "--optim.epochs",
            "1",
            "train",
        ],
    );
    assert!(trained.status.success(), "{}", stderr(&trained));
}

#[test]
fn seed_comes_from_environment_unless_flagged() {
    let dir = setup();
    let run = |env: Option<&str>, args: &[&str]| {
        let mut c = Command::new(env!("CARGO_BIN_EXE_decaps"));
        c.current_dir(dir.path()).env_remove("DECAPS_SEED").args(args);
        if let Some(v) = env {
            c.env("DECAPS_SEED", v);
        }
        let o = c.output().unwrap();
        String::from_utf8(o.stdout).unwrap().lines().find(|l| l.starts_with("seed =")).unwrap().to_string()
    };
    assert_eq!(run(None, &["config"]), "seed = 1");
    assert_eq!(run(Some("7"), &["config"]), "seed = 7");
    assert_eq!(run(Some("7"), &["--seed", "3", "config"]), "seed = 3");
}

#[test]
fn dotted_flags_accept_hyphens_and_underscores() {
    let dir = setup();
    for flag in ["--model.n-iter", "--model.n_iter"] {
        let o = decaps(dir.path(), &[flag, "5", "config"]);
        assert!(String::from_utf8_lossy(&o.stdout).contains("model.n_iter = 5\n"));
    }
    let o = decaps(dir.path(), &["--routing", "baseline", "config"]);
    assert!(String::from_utf8_lossy(&o.stdout).contains("model.routing = baseline\n"));
}

#[test]
fn config_errors_exit_2() {
    let dir = setup();
    let d = dir.path();
    assert_eq!(decaps(d, &["--optim.lr", "fast", "config"]).status.code(), Some(2));
    assert_eq!(decaps(d, &["--model.unknown", "1", "config"]).status.code(), Some(2));
    assert_eq!(decaps(d, &["--config", "absent.cfg", "config"]).status.code(), Some(2));
    std::fs::write(d.join("bad.cfg"), "model.heads = 4\nnot a pair\n").unwrap();
    let o = decaps(d, &["--config", "bad.cfg", "config"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 2"));
    assert_eq!(decaps(d, &["--model.image-size", "30", "config"]).status.code(), Some(2));
    let o = decaps(d, &["--config", "tiny.cfg", "--data.classes", "disc,square", "train"]);
    assert_eq!(o.status.code(), Some(2));
    let mut c = Command::new(env!("CARGO_BIN_EXE_decaps"));
    let o = c.current_dir(d).env("DECAPS_SEED", "abc").arg("config").output().unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn data_errors_exit_3() {
    let dir = setup();
    let d = dir.path();
    let o = decaps(d, &["--config", "tiny.cfg", "--data.manifest", "none/manifest.jsonl", "train"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    let o = decaps(d, &["eval", "--checkpoint", "missing.bin"]);
    assert_eq!(o.status.code(), Some(3));
    std::fs::write(d.join("junk.bin"), b"DECAPS1\nshort").unwrap();
    assert_eq!(decaps(d, &["eval", "--checkpoint", "junk.bin"]).status.code(), Some(3));
    std::fs::create_dir_all(d.join("m")).unwrap();
    std::fs::write(d.join("m/manifest.jsonl"), "{\"id\": 3}\n").unwrap();
    let o = decaps(d, &["--config", "tiny.cfg", "--data.manifest", "m/manifest.jsonl", "train"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn divergence_exits_4() {
    let dir = setup();
    let o = decaps(dir.path(), &["--config", "tiny.cfg", "--optim.lr", "1e300", "train"]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    assert!(stderr(&o).contains("non-finite"));
}

#[test]
fn ablate_prints_one_row_per_setting() {
    let dir = setup();
    let o = decaps(dir.path(), &["--config", "tiny.cfg", "--optim.epochs", "1", "--output", "abl", "ablate", "--seeds", "1,2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = String::from_utf8(o.stdout).unwrap();
    assert_eq!(table.lines().count(), 6, "{table}");
    let rows: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("abl/ablation.json")).unwrap()).unwrap();
    let rows = rows.as_array().unwrap();
    assert_eq!(rows.len(), 5);
    assert!(rows.iter().all(|r| r["data_hash"] == rows[0]["data_hash"]));
    assert!(rows[4]["miou_level2"].is_number());
    assert!(rows[0]["miou_level2"].is_null());
}
