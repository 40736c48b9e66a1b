use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn ftseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ftseg")).args(args).output().expect("spawn ftseg")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path, count: &str, size: &str) {
    let out = ftseg(&[
        "synth", "--out", s(dir), "--count", count, "--seed", "1", "--height", size, "--width", size,
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}

fn quick_train(data: &Path, run: &Path) {
    let out = ftseg(&[
        "train", "--data", s(data), "--out", s(run), "--epochs", "1", "--batch", "4",
        "--depth", "3", "--base-channels", "2",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn curve_to_stdout() {
    let out = ftseg(&["curve", "--gammas", "1,3", "--resolution", "3"]);
    assert_eq!(code(&out), 0);
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "ti,gamma,loss");
    assert_eq!(lines.len(), 7);
    assert!(lines.contains(&"0.500000,3.000000,0.793701"));
    assert!(lines.contains(&"0.500000,1.000000,0.500000"));
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(code(&ftseg(&["curve", "--gammas", "5"])), 2);
    assert_eq!(code(&ftseg(&["curve", "--resolution", "1"])), 2);
    assert_eq!(code(&ftseg(&["synth", "--count", "2"])), 2);
    assert_eq!(code(&ftseg(&["gradcheck", "everything"])), 2);
    assert_eq!(code(&ftseg(&["train", "--data", "nowhere"])), 2);
    assert_eq!(code(&ftseg(&["synth", "--out", "x", "--preset", "mri"])), 2);
}

#[test]
fn config_file_keys_are_checked() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "# curve settings\ngammas = 2\nresolution = 2\n").unwrap();
    let out = ftseg(&["curve", "--config", s(&cfg)]);
    assert_eq!(code(&out), 0);
    assert_eq!(String::from_utf8(out.stdout).unwrap(), "ti,gamma,loss\n0.000000,2.000000,1.000000\n1.000000,2.000000,0.000000\n");

    // Flags override the file.
    let out = ftseg(&["curve", "--config", s(&cfg), "--resolution", "3"]);
    assert_eq!(String::from_utf8(out.stdout).unwrap().lines().count(), 4);

    fs::write(&cfg, "gammas = 2\nlearning_rate = 0.1\n").unwrap();
    let out = ftseg(&["curve", "--config", s(&cfg)]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));

    assert_eq!(code(&ftseg(&["curve", "--config", s(&dir.path().join("missing.cfg"))])), 1);
}

#[test]
fn synth_train_eval_round() {
    let dir = tempfile::tempdir().unwrap();
    let (data, run, eval) = (dir.path().join("data"), dir.path().join("run"), dir.path().join("eval"));
    synth(&data, "6", "32");
    assert!(data.join("manifest.txt").is_file());
    assert_eq!(fs::read_dir(data.join("images")).unwrap().count(), 6);
    assert_eq!(fs::read_dir(data.join("masks")).unwrap().count(), 6);

    let bad = ftseg(&["train", "--data", s(&data), "--out", s(&run), "--epochs", "0"]);
    assert_eq!(code(&bad), 2);

    quick_train(&data, &run);
    let history = fs::read_to_string(run.join("history.csv")).unwrap();
    assert!(history.starts_with("epoch,train_loss,val_dice,learning_rate\n0,"));

    let out = ftseg(&[
        "eval", "--checkpoint", s(&run.join("model.ckpt")), "--data", s(&data), "--out", s(&eval),
        "--overlays", "true",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let metrics = fs::read_to_string(eval.join("metrics.csv")).unwrap();
    assert_eq!(
        metrics.lines().next(),
        Some("dice_mean,dice_std,precision_mean,precision_std,recall_mean,recall_std")
    );
    assert_eq!(metrics.lines().count(), 2);
    let per_image = fs::read_to_string(eval.join("per_image.csv")).unwrap();
    assert_eq!(per_image.lines().next(), Some("id,dice,precision,recall"));
    assert_eq!(per_image.lines().count(), 7);
    assert_eq!(fs::read_dir(eval.join("overlays")).unwrap().count(), 18);
}

#[test]
fn eval_error_codes() {
    let dir = tempfile::tempdir().unwrap();
    let (data, odd, run) = (dir.path().join("data"), dir.path().join("odd"), dir.path().join("run"));
    synth(&data, "4", "32");
    synth(&odd, "2", "34");
    quick_train(&data, &run);
    let ckpt = run.join("model.ckpt");
    let eval = dir.path().join("eval");

    // 34 is not a multiple of 4, the size step of a depth-3 model.
    let out = ftseg(&["eval", "--checkpoint", s(&ckpt), "--data", s(&odd), "--out", s(&eval)]);
    assert_eq!(code(&out), 4);

    let missing = dir.path().join("none.ckpt");
    assert_eq!(code(&ftseg(&["eval", "--checkpoint", s(&missing), "--data", s(&data), "--out", s(&eval)])), 1);

    fs::write(&missing, b"garbage").unwrap();
    assert_eq!(code(&ftseg(&["eval", "--checkpoint", s(&missing), "--data", s(&data), "--out", s(&eval)])), 1);
}

#[test]
fn single_row_ablation() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth(&data, "6", "32");
    let csv = dir.path().join("table.csv");
    let out = ftseg(&[
        "ablate", "--data", s(&data), "--out", s(&csv), "--rows", "unet+dl", "--folds", "2", "--epochs", "1",
        "--batch", "4", "--depth", "3", "--base-channels", "2",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(
        lines[0],
        "model,parameters,dice_mean,dice_std,precision_mean,precision_std,recall_mean,recall_std"
    );
    assert_eq!(lines.len(), 2);
    assert!(lines[1].starts_with("unet+dl,\"α=0.5, β=0.5\","));

    let bad = ftseg(&["ablate", "--data", s(&data), "--out", s(&csv), "--rows", "unet+xl"]);
    assert_eq!(code(&bad), 2);
}

#[test]
fn gradcheck_losses_pass() {
    let out = ftseg(&["gradcheck", "losses", "--seeds", "3"]);
    assert_eq!(code(&out), 0);
    assert!(String::from_utf8(out.stdout).unwrap().contains("PASS"));
}
