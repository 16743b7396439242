use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"
location_sets = 20
sampled_combos = [1, 2, 4]
train_per_combo = 8
augmented_per_combo = 10
train_sizes = [4, 8]

[augmenter]
components = 2
latent = 2
encoder_hidden = [8]
decoder_hidden = [8]
epochs = 3
batch = 8

[mapper]
hidden = [8]
epochs = 3
batch = 8
"#;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_probeopt")).args(args).output().unwrap()
}

fn verb(name: &str, config: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        name,
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--seed",
        "5",
    ];
    args.extend_from_slice(extra);
    run(&args)
}

fn ok(o: &Output) {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn full_pipeline_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("exp.toml");
    std::fs::write(&config, CONFIG).unwrap();
    let out = dir.path().join("out");

    ok(&verb("generate", &config, &out, &[]));
    let csv = std::fs::read_to_string(out.join("samples.csv")).unwrap();
    assert!(csv.starts_with("location_set,combo,split,sum_rate,r0"));
    let gen: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("generate.json")).unwrap()).unwrap();
    assert_eq!(gen["provenance"]["seed"], 5);
    assert_eq!(gen["test"], 3 * 8);

    ok(&verb("train", &config, &out, &[]));
    assert!(out.join("augmenter.bin").exists() && out.join("mapper.bin").exists());

    ok(&verb("optimize", &config, &out, &[]));
    let sel: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("selection.json")).unwrap()).unwrap();
    let combo = sel["ga_combo"].as_u64().unwrap();
    assert!((1..=8).contains(&combo));
    assert_eq!(sel["provenance"]["config_hash"], gen["provenance"]["config_hash"]);
    let trace = std::fs::read_to_string(out.join("ga_trace.csv")).unwrap();
    assert!(trace.starts_with("restart,generation,best_combo,best_fitness,mean_fitness"));
    let mmd = std::fs::read_to_string(out.join("mmd.csv")).unwrap();
    assert_eq!(mmd.lines().count(), 1 + 8);
    assert!(std::fs::read_to_string(out.join("summary.txt")).unwrap().contains("config_hash"));

    ok(&verb("evaluate", &config, &out, &["--baseline", "vae-mdn"]));
    let sweep = std::fs::read_to_string(out.join("mmd_sweep.csv")).unwrap();
    // cvae-mdn covers 8 combos per size, the vae-mdn farm only the 3 sampled ones.
    assert_eq!(sweep.lines().count(), 1 + 2 * (8 + 3));
    let ev: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("evaluate.json")).unwrap()).unwrap();
    assert!(ev["compression_ratio"].as_f64().unwrap() > 0.0);
}

#[test]
fn errors_are_json_lines() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["train", "--out", dir.path().to_str().unwrap()]);
    assert!(!o.status.success());
    let line: serde_json::Value = serde_json::from_slice(&o.stderr).unwrap();
    assert_eq!(line["error"], "missing_input");

    let config = dir.path().join("bad.toml");
    std::fs::write(&config, "sampled_combos = [9]\n").unwrap();
    let o = verb("generate", &config, dir.path(), &[]);
    let line: serde_json::Value = serde_json::from_slice(&o.stderr).unwrap();
    assert_eq!(line["error"], "config");
}

#[test]
fn seed_changes_the_data() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("exp.toml");
    std::fs::write(&config, "location_sets = 4\n").unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&verb("generate", &config, &a, &[]));
    ok(&verb("generate", &config, &b, &[]));
    let read = |p: &Path| std::fs::read(p.join("samples.bin")).unwrap();
    assert_eq!(read(&a), read(&b));
    let c = dir.path().join("c");
    ok(&run(&["generate", "--config", config.to_str().unwrap(), "--out", c.to_str().unwrap(), "--seed", "6"]));
    assert_ne!(read(&a), read(&c));
}
