use std::path::Path;
use std::process::{Command, Output};

const TINY: &[&str] = &["--set", "data.n_train=12", "--set", "data.n_eval=6", "--set", "epochs=1"];

fn hqp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hqp")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = hqp(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn with_tiny<'a>(args: &[&'a str]) -> Vec<&'a str> {
    let mut v = args.to_vec();
    v.extend_from_slice(TINY);
    v
}

#[test]
fn every_subcommand_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name).to_str().unwrap().to_string();

    let data = p("data");
    ok(&with_tiny(&["gen-data", "--seed", "0", "--out-dir", &data]));
    for f in ["train.jsonl", "eval.jsonl", "proposals.csv"] {
        assert!(Path::new(&data).join(f).exists(), "{f}");
    }

    let run = p("run");
    let config = p("run.toml");
    std::fs::write(
        &config,
        format!("seed = 0\n[data]\ntrain_path = \"{data}/train.jsonl\"\neval_path = \"{data}/eval.jsonl\"\n"),
    )
    .unwrap();
    let out = ok(&with_tiny(&["train", "--config", &config, "--out-dir", &run, "--log-steps"]));
    assert!(out.contains("map50"), "{out}");
    let ck = format!("{run}/checkpoint.bin");
    let log = std::fs::read_to_string(format!("{run}/log.jsonl")).unwrap();
    assert!(log.lines().any(|l| l.contains("\"kind\":\"step\"")));
    assert!(log.lines().any(|l| l.contains("\"kind\":\"epoch\"")));

    let table = ok(&with_tiny(&["eval", "--config", &config, "--checkpoint", &ck]));
    assert!(table.lines().any(|l| l.starts_with("all")), "{table}");
    let json = ok(&with_tiny(&["eval", "--config", &config, "--checkpoint", &ck, "--refine", "--json"]));
    let parsed: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert!(parsed["map50"].is_number());

    let info = ok(&["inspect-checkpoint", &ck, "--config", "--tensors"]);
    assert!(info.contains("epoch        1"), "{info}");
    assert!(info.contains("head.class"));
    assert!(info.contains("[data]"));

    let csv = p("noise.csv");
    let noise = ok(&with_tiny(&["ablate-noise", "--seed", "0", "--levels", "0,0.1", "--seeds", "0", "--csv", &csv]));
    assert_eq!(noise.lines().count(), 6, "{noise}");
    assert_eq!(std::fs::read_to_string(&csv).unwrap().lines().count(), 5);

    let cache = p("cache");
    let cells = ok(&with_tiny(&[
        "ablate-components", "--seed", "0", "--seeds", "0", "--cells", "hqp:off,random:uniform", "--cache", &cache,
    ]));
    assert_eq!(cells.lines().count(), 4, "{cells}");
    assert_eq!(std::fs::read_dir(&cache).unwrap().count(), 2);
    let sweep = ok(&with_tiny(&[
        "ablate-components", "--seed", "0", "--seeds", "0", "--theta1", "0.2,0.8", "--tau", "0.5", "--cache", &cache,
    ]));
    assert_eq!(sweep.lines().count(), 5, "{sweep}");
}

#[test]
fn failures_exit_nonzero_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let missing = hqp(&["train", "--out-dir", dir.path().to_str().unwrap()]);
    assert!(!missing.status.success());
    assert!(String::from_utf8_lossy(&missing.stderr).contains("seed"));

    let bogus = hqp(&["train", "--seed", "0", "--set", "nonsense=1", "--out-dir", dir.path().to_str().unwrap()]);
    assert!(!bogus.status.success());

    let ck = dir.path().join("ck.bin");
    std::fs::write(&ck, b"not a checkpoint").unwrap();
    let bad = hqp(&["inspect-checkpoint", ck.to_str().unwrap()]);
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).starts_with("error:"));
}
