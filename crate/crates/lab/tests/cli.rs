use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use seqens::checkpoint::{load_checkpoint, save_checkpoint};
use seqens_core::Tensor;

const SMALL: &str = "\
data.count = 6
data.train_count = 4
data.height = 16
data.width = 16
arch.layer_channels = 4,4,4
train.epochs = 1
train.batch_size = 2
train.crop = 16x16
train.val_every = 1
";

fn seqens(args: &[&dyn AsRef<std::ffi::OsStr>]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_seqens")).args(args.iter().map(|a| a.as_ref())).output().expect("spawn seqens")
}

fn ok(out: Output) -> String {
    assert!(out.status.success(), "exit {:?}: {}", out.status.code(), String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn csv(path: &Path) -> Vec<Vec<String>> {
    std::fs::read_to_string(path).unwrap().lines().map(|l| l.split(',').map(String::from).collect()).collect()
}

fn column(rows: &[Vec<String>], name: &str) -> usize {
    rows[0].iter().position(|h| h == name).unwrap_or_else(|| panic!("no column {}", name))
}

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new(extra: &str) -> Fixture {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("run.cfg"), format!("{}{}", SMALL, extra)).unwrap();
        let f = Fixture { dir };
        ok(seqens(&[&"gen-data", &"--spec", &f.path("run.cfg"), &"--out", &f.path("data")]));
        f
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn train(&self, out: &str, config: &str, condition: &[&str]) -> PathBuf {
        let out = self.path(out);
        let mut args: Vec<std::ffi::OsString> = vec!["train".into(), "--config".into(), self.path(config).into(), "--out".into(), out.clone().into()];
        if !condition.is_empty() {
            args.push("--chain".into());
            args.push("--condition".into());
            args.extend(condition.iter().map(|c| self.path(c).join("model.sqen").into()));
        }
        ok(Command::new(env!("CARGO_BIN_EXE_seqens")).args(&args).output().unwrap());
        out.join("model.sqen")
    }
}

#[test]
fn full_pipeline_runs_and_writes_reports() {
    let f = Fixture::new("");
    let data_line = format!("data.dir = {}\n", f.path("data").display());
    std::fs::write(f.path("g0.cfg"), format!("{}{}train.seed = 0\n", SMALL, data_line)).unwrap();
    std::fs::write(f.path("g1.cfg"), format!("{}{}train.seed = 1\narch.conditioning = adon\n", SMALL, data_line)).unwrap();
    std::fs::write(f.path("b1.cfg"), format!("{}{}train.seed = 1\n", SMALL, data_line)).unwrap();

    let g0 = f.train("g0", "g0.cfg", &[]);
    let g1 = f.train("g1", "g1.cfg", &["g0"]);
    let b1 = f.train("b1", "b1.cfg", &[]);
    for name in ["model.sqen", "model.sqen.meta", "config.cfg", "history.csv"] {
        assert!(f.path("g0").join(name).exists(), "{}", name);
    }
    let hist = csv(&f.path("g0").join("history.csv"));
    assert_eq!(hist[0], ["run_id", "kind", "index", "value"]);
    assert!(hist.iter().any(|r| r[1] == "val_miou"));

    let data = f.path("data");
    let report = f.path("eval.csv");
    ok(seqens(&[&"eval", &"--ckpt", &g0, &g1, &"--chain", &"--self-loops", &"2", &"--data", &data, &"--report", &report, &"--dump", &f.path("dump")]));
    let rows = csv(&report);
    let member = column(&rows, "member_or_generation");
    let names: Vec<&str> = rows[1..].iter().map(|r| r[member].as_str()).collect();
    assert_eq!(names, ["0", "1", "1+loop1", "1+loop2"]);
    assert!(f.path("dump").join("1_loop2").read_dir().unwrap().count() == 2);

    let report = f.path("sim.csv");
    ok(seqens(&[&"ensemble", &"--mode", &"sim", &"--strategy", &"median", &"--ckpt", &g0, &b1, &"--data", &data, &"--report", &report]));
    assert_eq!(csv(&report).len(), 2);
    ok(seqens(&[&"ensemble", &"--mode", &"seq", &"--ckpt", &g0, &g1, &"--data", &data, &"--report", &report]));

    let report = f.path("cal.csv");
    let hist = f.path("hist.csv");
    let stdout = ok(seqens(&[&"calibrate", &"--ckpt", &g0, &b1, &"--data", &data, &"--grid", &"1", &"--report", &report, &"--histogram", &hist]));
    assert_eq!(stdout.trim(), "best_T=1.000000");
    let rows = csv(&report);
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0].len(), 2 + 3 * 10);
    assert_eq!(csv(&hist).len(), 11);
    ok(seqens(&[&"calibrate", &"--ckpt", &g0, &g1, &"--chain", &"--data", &data, &"--report", &report]));
    assert_eq!(csv(&report).len(), 6);

    let report = f.path("div.csv");
    ok(seqens(&[&"diversity", &"--ckpt", &g0, &b1, &"--data", &data, &"--report", &report]));
    let rows = csv(&report);
    assert_eq!(rows.len(), 5);
    assert_eq!(rows[1][2], "1.000000");
    assert_eq!(rows[1][3], "1.000000");

    let report = f.path("four.csv");
    ok(seqens(&[&"fourcase", &"--ckpt", &g0, &g1, &"--data", &data, &"--report", &report]));
    let rows = csv(&report);
    let total: f64 = rows[1..].iter().map(|r| r[3].parse::<f64>().unwrap()).sum();
    assert!((total - 1.0).abs() < 1e-5);
}

#[test]
fn eval_of_a_perfect_model_reports_full_miou() {
    // images without shapes are all background; a head that always says 0 is exact
    let f = Fixture::new("data.shapes_min = 0\ndata.shapes_max = 0\n");
    std::fs::write(f.path("g0.cfg"), format!("{}data.dir = {}\n", SMALL, f.path("data").display())).unwrap();
    let model = f.train("g0", "g0.cfg", &[]);
    let mut ckpt = load_checkpoint(&model).unwrap();
    for (name, t) in ckpt.tensors.iter_mut() {
        if name == "head.weight" {
            *t = Tensor::zeros(t.shape());
        } else if name == "head.bias" {
            *t = Tensor::from_fn(t.shape(), |i| if i == 0 { 10.0 } else { 0.0 });
        }
    }
    save_checkpoint(&model, &ckpt).unwrap();
    let report = f.path("eval.csv");
    ok(seqens(&[&"eval", &"--ckpt", &model, &"--data", &f.path("data"), &"--report", &report]));
    let rows = csv(&report);
    assert_eq!(rows[1][column(&rows, "miou")], "1.000000");
    assert_eq!(rows[1][column(&rows, "pixel_acc")], "1.000000");
    assert_eq!(rows[1][column(&rows, "iou_1")], "");
}

#[test]
fn usage_errors_exit_with_one() {
    for args in [
        vec!["train"],
        vec!["frobnicate"],
        vec!["eval", "--ckpt", "a", "--data", "d", "--report", "r", "--bogus"],
        vec!["reproduce", "--recipe", "no-such-figure", "--out", "x"],
        vec!["fourcase", "--ckpt", "a", "--data", "d", "--report", "r"],
    ] {
        let out = Command::new(env!("CARGO_BIN_EXE_seqens")).args(&args).output().unwrap();
        assert_eq!(out.status.code(), Some(1), "{:?}", args);
        assert!(String::from_utf8_lossy(&out.stderr).starts_with("error: "), "{:?}", args);
    }
    let help = Command::new(env!("CARGO_BIN_EXE_seqens")).arg("--help").output().unwrap();
    assert_eq!(help.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&help.stdout).contains("reproduce"));
}

#[test]
fn bad_inputs_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "data.count = 6\ndata.nonsense = 1\n").unwrap();
    let out = seqens(&[&"gen-data", &"--spec", &cfg, &"--out", &dir.path().join("d")]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("error: ") && err.contains("line 2"), "{}", err);

    let junk = dir.path().join("junk.sqen");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    let out = seqens(&[&"eval", &"--ckpt", &junk, &"--data", &dir.path(), &"--report", &dir.path().join("r.csv")]);
    assert_eq!(out.status.code(), Some(2));

    let missing = dir.path().join("missing.cfg");
    let out = seqens(&[&"train", &"--config", &missing, &"--out", &dir.path().join("o")]);
    assert_eq!(out.status.code(), Some(2));
}
