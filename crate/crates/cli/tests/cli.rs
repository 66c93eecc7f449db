use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &str = "\
image_size = 32
num_points = 64
super_points = 16
encoder_k = 8
local_k = 4
point_mlp = 8
ae_widths = 4,4
depth_channels = 4
rgb_channels = 4
global_mlp1 = 16
global_mlp2 = 16
bil_widths = 16,16,8
local_hidden = 8
state_dim = 4
stacks = 2
epochs = 2
batch_size = 2
train_samples = 4
val_samples = 2
bench_frames = 3
";

fn mcm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mcm")).args(args).output().expect("run mcm")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

struct Workspace {
    dir: PathBuf,
    config: PathBuf,
}

impl Workspace {
    fn new(name: &str) -> Self {
        let dir = std::env::temp_dir().join(format!("mcm_cli_{name}_{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&dir);
        std::fs::create_dir_all(&dir).unwrap();
        let config = dir.join("small.cfg");
        let text = format!(
            "{SMALL}train_dir = {}\nval_dir = {}\nout_dir = {}\n",
            dir.join("train").display(),
            dir.join("val").display(),
            dir.join("run").display()
        );
        std::fs::write(&config, text).unwrap();
        Self { dir, config }
    }

    fn cfg(&self) -> &str {
        self.config.to_str().unwrap()
    }

    fn path(&self, rel: &str) -> String {
        self.dir.join(rel).display().to_string()
    }
}

impl Drop for Workspace {
    fn drop(&mut self) {
        let _ = std::fs::remove_dir_all(&self.dir);
    }
}

fn value(text: &str, key: &str) -> f64 {
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key}: ")))
        .unwrap_or_else(|| panic!("{key} missing in {text}"))
        .trim()
        .parse()
        .unwrap()
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(mcm(&[]).status.code(), Some(2));
    assert_eq!(mcm(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(mcm(&["train", "--seed", "x"]).status.code(), Some(2));
    let o = mcm(&["train", "--set", "no_such_key=1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("valid keys"), "{}", stderr(&o));
    assert_eq!(mcm(&["--help"]).status.code(), Some(0));
}

#[test]
fn gen_train_eval_round_trip() {
    let ws = Workspace::new("round_trip");
    let o = mcm(&["gen", "--config", ws.cfg()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(Path::new(&ws.path("train/000003/depth.pgm")).exists());
    assert!(Path::new(&ws.path("val/000001/meta.txt")).exists());

    let o = mcm(&["train", "--config", ws.cfg(), "--seed", "5"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let train_mke = value(&stdout(&o), "train_mke_mm");
    let log = std::fs::read_to_string(ws.path("run/train.log")).unwrap();
    assert_eq!(log.lines().count(), 4);
    let first = std::fs::read(ws.path("run/model.ckpt")).unwrap();
    assert_eq!(&first[..4], b"MCM1");

    let o = mcm(&[
        "eval",
        "--config",
        ws.cfg(),
        "--seed",
        "5",
        "--data",
        &ws.path("train"),
        "--out",
        &ws.path("eval"),
        "--dump-joints",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!((value(&stdout(&o), "mke_mm") - train_mke).abs() < 1e-9);
    let csv = std::fs::read_to_string(ws.path("eval/eval_errors.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("sample_id, joint_id, error_mm"));
    assert_eq!(csv.lines().count(), 1 + 4 * 21);
    let joints = std::fs::read_to_string(ws.path("eval/joints/000000.txt")).unwrap();
    assert_eq!(joints.lines().count(), 21);

    let o = mcm(&["train", "--config", ws.cfg(), "--seed", "5", "--set", &format!("out_dir={}", ws.path("rerun"))]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(first, std::fs::read(ws.path("rerun/model.ckpt")).unwrap());
}

#[test]
fn eval_failures_exit_1() {
    let ws = Workspace::new("eval_fail");
    std::fs::create_dir_all(ws.path("empty")).unwrap();
    let o = mcm(&["eval", "--config", ws.cfg(), "--data", &ws.path("empty"), "--checkpoint", &ws.path("none.ckpt")]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("empty"), "{}", stderr(&o));
}

#[test]
fn check_passes_and_names_injected_fault() {
    let o = mcm(&["check"]);
    assert!(o.status.success(), "{}", stdout(&o));
    let out = stdout(&o);
    for name in ["dual_form", "block_forward", "smooth_l1_exact", "knn_brute_force", "open_interval"] {
        assert!(out.contains(name), "{name} missing");
    }

    let o = mcm(&["check", "--fault", "local_aggregator", "--seeds", "1"]);
    assert_eq!(o.status.code(), Some(1));
    let failed: Vec<_> = stdout(&o).lines().filter(|l| l.starts_with("FAIL")).map(String::from).collect();
    assert_eq!(failed.len(), 1, "{failed:?}");
    assert!(failed[0].contains("local_aggregator"));
}

#[test]
fn bench_reports_one_row_per_stage() {
    let ws = Workspace::new("bench");
    let o = mcm(&["bench", "--config", ws.cfg()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    let rows: Vec<_> = out.lines().filter(|l| l.contains("median_ms")).collect();
    assert_eq!(rows.len(), 4);
    for (row, stage) in rows.iter().zip(["encoder:", "tokens:", "block1:", "block2:"]) {
        assert!(row.starts_with(stage), "{row}");
    }
    let again = stdout(&mcm(&["bench", "--config", ws.cfg()]));
    assert_eq!(value(&out, "checksum"), value(&again, "checksum"));
}
