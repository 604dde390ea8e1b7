use std::path::Path;
use std::process::Command;

const CONFIG: &str = "\
seed = 5
output.dir = run
sensor.fov_up = 10
sensor.fov_down = -15
sensor.height = 16
sensor.width = 64
sensor.max_range = 25
model.past_frames = 3
model.future_frames = 3
model.levels = 2
model.base_channels = 8
train.epochs_phase1 = 1
train.epochs_phase2 = 1
train.max_steps = 4
train.batch_size = 2
data.train = data/seq_00
data.val = data/seq_01
data.test = data/seq_01
eval.figure_samples = 1
synth.sequences = 2
synth.frames = 9
";

fn rangecast(args: &[&str], cwd: &Path) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_rangecast"))
        .args(args)
        .current_dir(cwd)
        .env_remove("RANGECAST__SEED")
        .output()
        .expect("binary runs");
    let text = format!("{}{}", String::from_utf8_lossy(&out.stdout), String::from_utf8_lossy(&out.stderr));
    (out.status.code().unwrap_or(-1), text)
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let (code, text) = rangecast(args, cwd);
    assert_eq!(code, 0, "`rangecast {}`: {text}", args.join(" "));
    text
}

fn workspace(config: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.cfg"), config).unwrap();
    dir
}

#[test]
fn unknown_key_is_an_input_error() {
    let dir = workspace(&format!("{CONFIG}model.colour = blue\n"));
    let (code, text) = rangecast(&["synth", "--config", "run.cfg"], dir.path());
    assert_eq!(code, 2);
    assert!(text.contains("model.colour"), "{text}");
    assert!(!dir.path().join("data").exists());
    assert!(!dir.path().join("run").exists());
}

#[test]
fn bad_environment_override_is_an_input_error() {
    let dir = workspace(CONFIG);
    let out = Command::new(env!("CARGO_BIN_EXE_rangecast"))
        .args(["synth", "--config", "run.cfg"])
        .current_dir(dir.path())
        .env("RANGECAST__TRAIN__BATCH_SIZE", "two")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.batch_size"));
}

#[test]
fn missing_config_file_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let (code, _) = rangecast(&["train", "--config", "nope.cfg"], dir.path());
    assert_eq!(code, 2);
}

#[test]
fn oracle_baseline_scores_zero() {
    let dir = workspace(CONFIG);
    let root = dir.path();
    ok(&["synth", "--config", "run.cfg"], root);
    ok(&["eval", "--config", "run.cfg", "--baseline", "oracle"], root);
    let table = std::fs::read_to_string(root.join("run/reports/eval_oracle.txt")).unwrap();
    let rows: Vec<&str> = table
        .lines()
        .filter(|l| l.starts_with(|c: char| c.is_ascii_digit()) || l.starts_with("Mean"))
        .collect();
    // Two variants, each with N step rows and a mean row.
    assert_eq!(rows.len(), 2 * (3 + 1), "{table}");
    for row in rows {
        let numbers: Vec<f64> = row.split_whitespace().skip(1).map(|x| x.parse().unwrap()).collect();
        assert!(numbers.iter().all(|&x| x == 0.0), "{row}");
    }
    let figures = std::fs::read_dir(root.join("run/figures")).unwrap().count();
    assert_eq!(figures, 3);
}

#[test]
fn train_predict_round_trip() {
    let dir = workspace(CONFIG);
    let root = dir.path();
    ok(&["synth", "--config", "run.cfg"], root);
    ok(&["train", "--config", "run.cfg"], root);

    // A second run from scratch reproduces the log.
    std::fs::write(root.join("again.cfg"), CONFIG.replace("output.dir = run", "output.dir = again")).unwrap();
    ok(&["train", "--config", "again.cfg"], root);
    let log = |d: &str| std::fs::read_to_string(root.join(d).join("logs/train.jsonl")).unwrap();
    assert_eq!(log("run"), log("again"));

    let ckpt = "run/checkpoints/last.ckpt";
    ok(&["predict", "--checkpoint", ckpt, "--input", "data/seq_01", "--output", "p1"], root);
    ok(&["predict", "--checkpoint", ckpt, "--input", "data/seq_01", "--output", "p2"], root);
    let mut names: Vec<_> = std::fs::read_dir(root.join("p1/predictions"))
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    assert_eq!(names.len(), 9);
    for name in names {
        let a = std::fs::read(root.join("p1/predictions").join(&name)).unwrap();
        let b = std::fs::read(root.join("p2/predictions").join(&name)).unwrap();
        assert!(a == b, "{name:?} differs between runs");
    }

    let summary = ok(&["inspect", "--checkpoint", ckpt], root);
    let json: serde_json::Value = serde_json::from_str(&summary).unwrap();
    assert_eq!(json["step"], 4);

    // Fewer scans than the window needs.
    let short = root.join("short");
    std::fs::create_dir(&short).unwrap();
    for name in ["000000.bin", "000001.bin"] {
        std::fs::copy(root.join("data/seq_01").join(name), short.join(name)).unwrap();
    }
    let (code, text) = rangecast(&["predict", "--checkpoint", ckpt, "--input", "short", "--output", "p3"], root);
    assert_eq!(code, 2, "{text}");

    // A held lock refuses a second writer.
    std::fs::write(root.join("run/.lock"), "").unwrap();
    let (code, text) = rangecast(&["train", "--config", "run.cfg"], root);
    assert_eq!(code, 2, "{text}");
    assert!(text.contains("locked"));
}
