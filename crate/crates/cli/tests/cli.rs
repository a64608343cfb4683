use std::path::Path;
use std::process::{Command, Output};

fn cli(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_conceptshield"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = cli(args, cwd);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

const SMALL: &str = r#"
seed = 3

[data.synth]
classes = 2
images_per_class = 40

[model.train]
epochs = 4

[concepts]
k = 3
min_set_size = 4

[importance]
designs = 64
images = 2
"#;

#[test]
fn stepwise_verbs_produce_their_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("small.toml"), SMALL).unwrap();
    let c = ["--config", "small.toml"];
    let run = |extra: &[&str]| ok(&[&c[..], extra].concat(), d);

    assert!(run(&["synth-corpus", "--out", "corpus"]).contains("wrote 80 images"));
    let splits = run(&["ingest", "--root", "corpus", "--out", "manifest.json"]);
    assert!(splits.contains("ConceptBuild: 48"), "{splits}");
    run(&["train-desk-model", "--manifest", "manifest.json", "--out", "model.json"]);
    run(&["extract-concepts", "--manifest", "manifest.json", "--model", "model.json", "--out", "banks"]);
    assert!(d.join("banks/bank_000.json").exists() && d.join("banks/bank_001.json").exists());
    run(&["score-concepts", "--manifest", "manifest.json", "--model", "model.json", "--banks", "banks", "--out", "scores"]);
    assert!(d.join("scores/scores_001.json").exists());

    let attacked = run(&["attack", "--manifest", "manifest.json", "--model", "model.json", "--area", "0.03", "--out", "attacked.json"]);
    assert!(attacked.contains("attacks succeeded"), "{attacked}");

    std::fs::create_dir(d.join("inputs")).unwrap();
    for name in ["00000", "00001"] {
        std::fs::copy(d.join(format!("corpus/0_disc/{name}.png")), d.join(format!("inputs/{name}.png"))).unwrap();
    }
    run(&[
        "defend", "--manifest", "manifest.json", "--model", "model.json", "--banks", "banks", "--scores", "scores",
        "--in", "inputs", "--emit-masks", "--out", "defended",
    ]);
    let labels: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("defended/labels.json")).unwrap()).unwrap();
    assert_eq!(labels.as_array().unwrap().len(), 2);
    assert!(d.join("defended/00000.png").exists() && d.join("defended/00000_mask.png").exists());

    run(&[
        "baseline-pc", "--manifest", "manifest.json", "--model", "model.json", "--patch-side", "11", "--in", "inputs",
        "--report", "pc.json",
    ]);
    let pc: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("pc.json")).unwrap()).unwrap();
    assert_eq!(pc["mask_set"]["masks"].as_array().unwrap().len(), 9);
    assert_eq!(pc["predictions"].as_array().unwrap().len(), 2);
}

#[test]
fn bad_invocations_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert!(!cli(&["no-such-verb"], d).status.success());
    std::fs::write(d.join("bad.toml"), "[defense]\nbogus = 1\n").unwrap();
    let out = cli(&["--config", "bad.toml", "evaluate", "--out", "run"], d);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus"));
    std::fs::write(d.join("repro.toml"), "mode = \"repro\"\n").unwrap();
    let out = cli(&["--config", "repro.toml", "evaluate", "--out", "run"], d);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("weights"));
}
