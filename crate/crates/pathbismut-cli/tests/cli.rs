use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use pathbismut_cli::commands::{run_suite, summarize, write_summary};
use pathbismut_cli::CliError;

const BASE: &str = r#"
name = "NAME"
seed = 5
N = 2000
flavor = "additive_exact"

[model]
kind = "linear_delay"
a = 0.5
b1 = 0.3
c = 0.4

[grid]
T = 1.0
dt = 0.01
r0 = 0.5

[init]
kind = "constant"
value = [0.0]

[functional]
kind = "coordinate"

[direction]
kind = "constant_shift"
shift = [1.0]

[oracles]
deterministic = true
"#;

fn config(name: &str) -> String {
    BASE.replace("NAME", name)
}

fn cli(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pathbismut"))
        .args(args)
        .current_dir(dir)
        .output()
        .unwrap()
}

#[test]
fn estimate_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.toml"), config("repro")).unwrap();
    for out in ["a", "b"] {
        let o = cli(
            &["estimate", "--config", "c.toml", "--out", out],
            dir.path(),
        );
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for file in [
        "estimate.json",
        "weights.csv",
        "oracle.json",
        "manifest.json",
    ] {
        let a = fs::read(dir.path().join("a").join(file)).unwrap();
        let b = fs::read(dir.path().join("b").join(file)).unwrap();
        assert_eq!(a, b, "{file}");
    }
    let manifest: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("a/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["seed"], 5);
    assert_eq!(manifest["config_sha256"].as_str().unwrap().len(), 64);
    let weights = fs::read_to_string(dir.path().join("a/weights.csv")).unwrap();
    assert_eq!(weights.lines().count(), 2001);

    let o = cli(
        &[
            "estimate", "--config", "c.toml", "--out", "c", "--seed", "6",
        ],
        dir.path(),
    );
    assert!(o.status.success());
    assert_ne!(
        fs::read(dir.path().join("a/estimate.json")).unwrap(),
        fs::read(dir.path().join("c/estimate.json")).unwrap()
    );
}

#[test]
fn flavor_mismatch_is_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let text = config("bad").replace(
        "kind = \"linear_delay\"\n",
        "kind = \"tanh_noise_delay\"\nsigma1 = 0.25\n",
    );
    fs::write(dir.path().join("c.toml"), text).unwrap();
    let o = cli(
        &["estimate", "--config", "c.toml", "--out", "o"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(
        err.contains("`flavor`") && err.contains("additive"),
        "{err}"
    );
}

#[test]
fn suite_records_failures_and_summary_is_pure() {
    let dir = tempfile::tempdir().unwrap();
    let configs = dir.path().join("configs");
    fs::create_dir(&configs).unwrap();
    fs::write(configs.join("a.toml"), config("a")).unwrap();
    fs::write(
        configs.join("b.toml"),
        config("b").replace("seed = 5", "seed = 9"),
    )
    .unwrap();
    fs::write(
        configs.join("c.toml"),
        config("c").replace("dt = 0.01", "dt = 0.03"),
    )
    .unwrap();
    fs::write(configs.join("notes.txt"), "ignored").unwrap();
    let out = dir.path().join("out");

    let rows = run_suite(&configs, &out, None, |_, _| {}).unwrap();
    assert_eq!(rows.len(), 3);
    assert_eq!(rows.iter().filter(|r| r.status == "ok").count(), 2);
    let failed = rows.iter().find(|r| r.status == "failed").unwrap();
    assert_eq!(failed.name, "c");
    assert!(failed.error.contains("grid"), "{}", failed.error);
    assert!(rows
        .iter()
        .filter(|r| r.status == "ok")
        .all(|r| r.gap.is_some() && r.pass.is_some()));

    let summary = fs::read(out.join("summary.csv")).unwrap();
    let header = String::from_utf8_lossy(&summary)
        .lines()
        .next()
        .unwrap()
        .to_string();
    assert_eq!(
        header,
        "name,status,flavor,lambda,value,stderr,oracle,gap,tolerance,pass,monotone_gap,error"
    );
    let again = dir.path().join("again.csv");
    write_summary(&again, &summarize(&out).unwrap()).unwrap();
    assert_eq!(fs::read(again).unwrap(), summary);
}

#[test]
fn suite_rejects_empty_directory() {
    let dir = tempfile::tempdir().unwrap();
    let err = run_suite(dir.path(), &dir.path().join("out"), None, |_, _| {}).unwrap_err();
    assert!(
        matches!(&err, CliError::Usage(m) if m.contains("no configs")),
        "{err}"
    );
    let o = cli(&["suite", ".", "--out", "out"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("no configs"));
}

#[test]
fn lambda_sweep_gap_is_monotone() {
    let dir = tempfile::tempdir().unwrap();
    let configs = dir.path().join("configs");
    fs::create_dir(&configs).unwrap();
    for lambda in [2.0, 5.0, 20.0] {
        let text = config(&format!("l{lambda}")).replace(
            "flavor = \"additive_exact\"",
            "flavor = \"asymptotic_nondeg\"\nsweep_group = \"lambda\"",
        ) + &format!("\n[estimator]\nlambda = {lambda}\ninclude_remainder = false\n");
        fs::write(configs.join(format!("l{lambda:02}.toml")), text).unwrap();
    }
    let rows = run_suite(&configs, &dir.path().join("out"), None, |_, _| {}).unwrap();
    assert_eq!(rows.len(), 3);
    assert!(
        rows.iter().all(|r| r.monotone_gap == Some(true)),
        "{rows:?}"
    );
}

#[test]
fn verify_and_simulate_verbs() {
    let dir = tempfile::tempdir().unwrap();
    let text = config("v").replace(
        "[oracles]\ndeterministic = true\n",
        "[verify]\ndecay_lambdas = [5.0, 20.0]\n",
    );
    fs::write(dir.path().join("c.toml"), text).unwrap();
    fs::write(
        dir.path().join("small.toml"),
        config("v").replace("N = 2000", "N = 256"),
    )
    .unwrap();
    for (kind, file) in [
        ("ibp", "c.toml"),
        ("chain-rule", "c.toml"),
        ("decay", "c.toml"),
        ("picard", "small.toml"),
    ] {
        let o = cli(
            &["verify", kind, "--config", file, "--out", "o"],
            dir.path(),
        );
        assert!(
            o.status.success(),
            "{kind}: {}",
            String::from_utf8_lossy(&o.stderr)
        );
    }
    let o = cli(
        &["verify", "picard", "--config", "c.toml", "--out", "big"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(3));
    for file in [
        "verify_ibp.json",
        "verify_chain_rule.json",
        "verify_decay.json",
        "verify_picard.json",
    ] {
        assert!(dir.path().join("o").join(file).exists(), "{file}");
    }
    let o = cli(
        &["simulate", "--config", "c.toml", "--out", "s"],
        dir.path(),
    );
    assert!(o.status.success());
    let file = fs::File::open(dir.path().join("s/paths.bin")).unwrap();
    let paths = pathbismut::pathspace::io::read_binary(std::io::BufReader::new(file)).unwrap();
    assert_eq!(paths.n, 2000);
    assert_eq!(paths.dim, 1);
}
