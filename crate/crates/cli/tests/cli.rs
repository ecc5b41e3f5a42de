use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn afa(args: &[&str]) -> Output {
    afa_env(args, None)
}

fn afa_env(args: &[&str], seed_env: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_afa"));
    cmd.args(args).env_remove("AFA_SEED");
    if let Some(s) = seed_env {
        cmd.env("AFA_SEED", s);
    }
    cmd.output().expect("binary runs")
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

#[test]
fn every_subcommand_has_help() {
    let cases: &[(&str, &[&str])] = &[
        ("gen-minworld", &["--out", "--height", "--width", "--steps", "--directions", "--config"]),
        ("gen-linetracer", &["--out", "--steps", "--sequence-len", "--noise", "--seed"]),
        ("train", &["--data", "--out", "--layers", "--gu", "--mlp-hidden", "--lr", "--iters", "--threshold", "--seed", "--padding-mode"]),
        ("predict", &["--model", "--data", "--out-dir"]),
        ("eval", &["--model", "--data", "--report", "--probe", "--uniform"]),
        ("gradcheck", &["--layers", "--eps", "--tol", "--samples", "--seed"]),
        ("dump-gu", &["--model", "--data", "--sequence", "--layer", "--out-dir"]),
    ];
    for (sub, flags) in cases {
        let o = afa(&[sub, "--help"]);
        assert_eq!(o.status.code(), Some(0), "{sub}");
        let text = stdout(&o);
        for f in *flags {
            assert!(text.contains(f), "{sub} help lacks {f}");
        }
    }
    assert_eq!(afa(&["--help"]).status.code(), Some(0));
}

#[test]
fn usage_errors_exit_1() {
    let o = afa(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("Usage"));
    let o = afa(&["train", "--bogus"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("Usage"));
    assert_eq!(afa(&[]).status.code(), Some(1));
    // missing required setting
    assert_eq!(afa(&["gen-minworld"]).status.code(), Some(1));
    assert_eq!(afa(&["gen-minworld", "--out", "x", "--directions", "up"]).status.code(), Some(1));
}

#[test]
fn missing_and_corrupt_files_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("none.afap");
    assert_eq!(afa(&["train", "--data", s(&missing)]).status.code(), Some(2));
    let bad = dir.path().join("bad.afap");
    fs::write(&bad, b"AFAPjunk").unwrap();
    let o = afa(&["train", "--data", s(&bad)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("format error"));
    let o = afa(&["eval", "--model", s(&bad), "--data", s(&bad)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn config_file_is_merged_and_checked() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    let out = dir.path().join("mw.afap");
    fs::write(&cfg, format!("# minworld\nout={}\nheight=4\nwidth=6\nsteps=5\n", s(&out))).unwrap();
    let o = afa(&["gen-minworld", "--config", s(&cfg), "--width", "5"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let echo = stdout(&o);
    assert!(echo.contains("height=4\nwidth=5\nsteps=5\ndirections=right,down\n"), "{echo}");
    assert!(echo.contains("wrote 40 sequences"));

    fs::write(&cfg, "out=x\nspeed=3\n").unwrap();
    let o = afa(&["gen-minworld", "--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("unknown config key \"speed\""));
    assert_eq!(afa(&["gen-minworld", "--config", s(&dir.path().join("nope"))]).status.code(), Some(2));
}

#[test]
fn end_to_end_minworld_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("mw.afap");
    let model = dir.path().join("m.afac");
    let o = afa(&["gen-minworld", "--out", s(&data), "--steps", "4"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));

    let train = |out: &Path, seed: Option<&str>, env: Option<&str>| {
        let mut args = vec!["train", "--data", s(&data), "--out", s(out), "--iters", "3", "--log-every", "1"];
        if let Some(seed) = seed {
            args.extend(["--seed", seed]);
        }
        afa_env(&args, env)
    };
    let o = train(&model, None, None);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let log = stdout(&o);
    assert!(log.contains("# afa train\n"));
    assert!(log.contains("r_channels=8,16\n"));
    assert!(log.contains("seed=0\n"));
    assert!(log.contains("iter 3\tloss"));
    assert!(log.contains("stopped after 3 iterations"));

    // determinism, and AFA_SEED as a fallback for --seed
    let again = dir.path().join("again.afac");
    assert_eq!(train(&again, None, None).status.code(), Some(0));
    assert_eq!(fs::read(&model).unwrap(), fs::read(&again).unwrap());
    let (by_flag, by_env) = (dir.path().join("f.afac"), dir.path().join("e.afac"));
    assert_eq!(train(&by_flag, Some("5"), Some("9")).status.code(), Some(0));
    let o = train(&by_env, None, Some("5"));
    assert!(stdout(&o).contains("seed=5\n"));
    assert_eq!(fs::read(&by_flag).unwrap(), fs::read(&by_env).unwrap());
    assert_ne!(fs::read(&model).unwrap(), fs::read(&by_env).unwrap());
    assert_eq!(train(&by_env, None, Some("five")).status.code(), Some(1));

    let frames = dir.path().join("frames");
    let o = afa(&["predict", "--model", s(&model), "--data", s(&data), "--out-dir", s(&frames)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(fs::read_dir(&frames).unwrap().count(), 192 * 4);
    let pgm = fs::read_to_string(frames.join("seq0000_t001.pgm")).unwrap();
    assert!(pgm.starts_with("P2\n12 8\n255\n"));

    let report = dir.path().join("eval.tsv");
    let o = afa(&["eval", "--model", s(&model), "--data", s(&data), "--report", s(&report), "--probe", "--accuracy-from", "2"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = stdout(&o);
    for key in ["mse\t", "baseline_mse\t", "swap_accuracy\t", "swap_differing\t", "accuracy\t"] {
        assert!(text.contains(key), "{key} missing from {text}");
    }
    let rows = fs::read_to_string(&report).unwrap();
    assert_eq!(rows.lines().count(), 193);
    let o = afa(&["eval", "--model", s(&model), "--data", s(&data), "--probe", "--uniform"]);
    assert!(stdout(&o).contains("swap_differing\t0.0000"));

    let dump = dir.path().join("gu");
    let o = afa(&["dump-gu", "--model", s(&model), "--data", s(&data), "--sequence", "7", "--layer", "1", "--out-dir", s(&dump)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    // 4 steps × (2 units + R) × 16 channels, plus the attention table
    assert_eq!(fs::read_dir(&dump).unwrap().count(), 4 * 3 * 16 + 1);
    let o = afa(&["dump-gu", "--model", s(&model), "--data", s(&data), "--sequence", "999", "--out-dir", s(&dump)]);
    assert_eq!(o.status.code(), Some(1));

    let lt = dir.path().join("lt.afap");
    let o = afa(&["gen-linetracer", "--out", s(&lt), "--steps", "100", "--sequence-len", "10"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("wrote 10 sequences"));
    let small = dir.path().join("small.afap");
    assert_eq!(afa(&["gen-minworld", "--out", s(&small), "--height", "4"]).status.code(), Some(0));
    let o = afa(&["eval", "--model", s(&model), "--data", s(&small)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("config error"));
}

#[test]
fn gradcheck_reports_and_fails_on_zero_tolerance() {
    let o = afa(&["gradcheck"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).contains("pass"));
    let o = afa(&["gradcheck", "--tol", "0"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("gradient check failed"));
}
