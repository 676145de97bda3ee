mod common;

use std::path::Path;
use std::process::{Command, Output};

fn alf(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_alf"))
        .current_dir(dir)
        .env_remove("ALF_SEED")
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn gen_data_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    for sub in ["a", "b"] {
        let o = alf(dir.path(), &["gen-data", sub, "--data.count", "3", "--data.size", "16"]);
        assert!(o.status.success(), "{o:?}");
    }
    for i in 0..3 {
        let name = format!("img_{i:05}.png");
        let a = std::fs::read(dir.path().join("a").join(&name)).unwrap();
        assert_eq!(a, std::fs::read(dir.path().join("b").join(&name)).unwrap());
    }
    let o = alf(dir.path(), &["gen-data", "c", "--data.count", "3", "--data.size", "16", "--data.seed", "9"]);
    assert!(o.status.success());
    assert_ne!(
        std::fs::read(dir.path().join("a/img_00000.png")).unwrap(),
        std::fs::read(dir.path().join("c/img_00000.png")).unwrap()
    );
}

#[test]
fn configuration_errors_exit_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = alf(dir.path(), &["run", "--fusion.lambda", "-1"]);
    assert_eq!(o.status.code(), Some(2), "{o:?}");
    assert!(String::from_utf8_lossy(&o.stderr).contains("lambda"));
    let o = alf(dir.path(), &["run", "--sweep.taus", "0,2"]);
    assert_eq!(o.status.code(), Some(2));
    std::fs::write(dir.path().join("bad.toml"), "[codec]\nwidth = 3\n").unwrap();
    let o = alf(dir.path(), &["--config", "bad.toml", "run"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_inputs_exit_with_code_4() {
    let dir = tempfile::tempdir().unwrap();
    common::write_tiny(dir.path());
    let o = alf(dir.path(), &["--config", "tiny.toml", "sweep"]);
    assert_eq!(o.status.code(), Some(4), "{o:?}");
    assert!(String::from_utf8_lossy(&o.stderr).contains("beta 0.1"));
    let o = alf(dir.path(), &["report", "nothing.csv"]);
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn flags_mirror_the_configuration_keys() {
    let dir = tempfile::tempdir().unwrap();
    let help = stdout(&alf(dir.path(), &["--help"]));
    for (key, _) in alf_harness::ExperimentConfig::keys() {
        assert!(help.contains(&format!("--{key}")), "--{key} missing from help");
    }
}

#[test]
fn encode_decode_sweep_and_bdrate_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    common::write_tiny(dir.path());
    let d = dir.path();
    let cfg = ["--config", "tiny.toml"];
    let with = |extra: &[&str]| -> Output {
        let args: Vec<&str> = cfg.iter().chain(extra).copied().collect();
        alf(d, &args)
    };
    assert!(with(&["run"]).status.success());
    let again = with(&["run"]);
    assert!(stdout(&again).lines().all(|l| l.contains("cached")), "{}", stdout(&again));

    assert!(with(&["gen-data", "imgs"]).status.success());
    let o = with(&["encode", "imgs/img_00000.png", "-o", "x.alf", "--beta", "0.5"]);
    assert!(o.status.success(), "{o:?}");
    assert!(stdout(&o).contains("bpp"));
    for (tau, out) in [("1", "one.png"), ("0", "zero.png")] {
        let o = with(&["decode", "x.alf", "-o", out, "--tau", tau, "--steps", "2", "--beta", "0.5"]);
        assert!(o.status.success(), "{o:?}");
        assert!(d.join(out).is_file());
    }
    // Decoding with the other rate weight's models is a hash mismatch.
    let o = with(&["decode", "x.alf", "-o", "bad.png", "--beta", "0.1"]);
    assert_eq!(o.status.code(), Some(4), "{o:?}");

    assert!(with(&["sweep"]).status.success());
    let csv = d.join("runs/default/sweep.csv");
    assert!(csv.is_file());
    let o = alf(
        d,
        &["bdrate", csv.to_str().unwrap(), csv.to_str().unwrap(), "--label", "fusion@2", "--anchor-tau", "1", "--test-tau", "1"],
    );
    // Two betas give two points per curve, too few for a cubic fit.
    assert_eq!(o.status.code(), Some(2), "{o:?}");
    let o = alf(d, &["report", csv.to_str().unwrap(), "-o", "fig"]);
    assert!(o.status.success(), "{o:?}");
    assert!(d.join("fig/tradeoff.svg").is_file());
}
