use std::path::Path;
use std::process::{Command, Output};

fn duo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_duo")).args(args).env_remove("DUO_SEED").output().expect("binary runs")
}

fn write_config(dir: &Path, extra: &str) -> String {
    let text = format!(
        "seed = 5\nstream_length = 32\nbatch_size = 8\ntrain_steps = 15\ntrain_if_missing = true\n\
         output_dir = {out}\ncheckpoint = {ckpt}\ndump_scenes = 2\nthreshold = 0.1\n{extra}",
        out = dir.join("out").display(),
        ckpt = dir.join("source.json").display(),
    );
    let path = dir.join("exp.cfg");
    std::fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn run_is_byte_identical_across_invocations() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    let out = tmp.path().join("out");
    let first = duo(&["run", "--config", &cfg]);
    assert!(first.status.success(), "{}", String::from_utf8_lossy(&first.stderr));
    let csv = std::fs::read(out.join("metrics.csv")).unwrap();
    let summary = std::fs::read(out.join("summary.json")).unwrap();
    std::fs::remove_dir_all(&out).unwrap();
    let second = duo(&["run", "--config", &cfg]);
    assert!(second.status.success());
    assert_eq!(std::fs::read(out.join("metrics.csv")).unwrap(), csv);
    assert_eq!(std::fs::read(out.join("summary.json")).unwrap(), summary);

    let header = String::from_utf8(csv).unwrap();
    assert!(header.starts_with(
        "step,objective,n_dets,mean_entropy,mean_cfl,mean_ncl,logsig_head0,logsig_head1,logsig_head2,f1_running,mae_running,skipped\n"
    ));
    assert_eq!(header.lines().count(), 1 + 32 / 8);
    let dets: usize = header.lines().skip(1).map(|l| l.split(',').nth(2).unwrap().parse::<usize>().unwrap()).sum();
    assert!(dets > 0);
    for f in ["scene_0000.image.duot", "scene_0000.depth.duot", "scene_0001.json"] {
        assert!(out.join("dump").join(f).exists(), "{f}");
    }
}

#[test]
fn missing_checkpoint_exits_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "train_if_missing = false\n");
    let out = duo(&["run", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing checkpoint"));
}

#[test]
fn config_errors_exit_with_three() {
    let tmp = tempfile::tempdir().unwrap();
    for extra in ["colour = red\n", "lambda = -1\n", "severity = 9\n"] {
        let cfg = write_config(tmp.path(), extra);
        assert_eq!(duo(&["run", "--config", &cfg]).status.code(), Some(3), "{extra}");
    }
    assert_eq!(duo(&["obs1", "--config", "/no/such/file"]).status.code(), Some(3));
}

#[test]
fn seed_env_overrides_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    let out = tmp.path().join("out");
    assert!(duo(&["run", "--config", &cfg]).status.success());
    let base = std::fs::read(out.join("metrics.csv")).unwrap();
    let env = Command::new(env!("CARGO_BIN_EXE_duo"))
        .args(["run", "--config", &cfg])
        .env("DUO_SEED", "6")
        .output()
        .unwrap();
    assert!(env.status.success());
    assert_ne!(std::fs::read(out.join("metrics.csv")).unwrap(), base);
}

#[test]
fn grid_flag_sweeps_lambda_and_alpha() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "stream_length = 16\n");
    let out = duo(&["run", "--config", &cfg, "--grid-lambda", "0,0.7", "--grid-alpha", "1,4"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let grid = std::fs::read_to_string(tmp.path().join("out/grid.csv")).unwrap();
    assert_eq!(grid.lines().count(), 5);
    assert!(grid.starts_with("lambda,alpha,f1,depth_mae"));
}

#[test]
fn train_writes_checkpoint_and_log() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    let out = duo(&["train", "--config", &cfg]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(tmp.path().join("source.json").exists());
    assert!(tmp.path().join("out/train_log.json").exists());
}

#[test]
fn selftest_passes() {
    let out = duo(&["selftest"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().filter(|l| l.starts_with("PASS")).count(), 7);
}
