use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "
corpus.patients = 60
corpus.pool_patients = 120
corpus.auto_reports = 600
corpus.organs = liver:0.3,lungs:0.25,bones:0.22
model.layers = 1
model.d_model = 16
model.heads = 2
model.d_ff = 32
model.vocab_size = 128
model.max_len = 32
pretrain.steps = 200
teacher.epochs = 30
teacher.lr = 1e-2
train.batch_size = 16
prompt_tune.pl = 2
manual.epochs = 3
automatic.epochs = 1
automatic.max_steps = 6
automatic.evals_per_epoch = 2
source.max_steps = 4
matrix.seeds = 2
";

fn peftlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_peftlab"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&peftlab(&[])), 1);
    assert_eq!(code(&peftlab(&["bogus"])), 1);
    assert_eq!(
        code(&peftlab(&[
            "train", "--method", "lasso", "--data", "d", "--model", "m", "--out", "o"
        ])),
        1
    );
    assert_eq!(code(&peftlab(&["--help"])), 0);
}

#[test]
fn report_without_directories_is_a_validation_error() {
    let o = peftlab(&["report"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn bad_settings_exit_two_and_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("data");
    let o = peftlab(&["gen-data", "--out", p(&out), "--set", "model.heads=3"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("model.heads"), "{}", stderr(&o));
    let o = peftlab(&["gen-data", "--out", p(&out), "--set", "nonsense"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("tiny.conf");
    std::fs::write(&conf, "model.layers = 2\nmodel.d_model = 16\nmodel.d_ff = 32\n").unwrap();
    let o = peftlab(&["gradcheck", "--config", p(&conf), "--max-coords", "40"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    for name in [
        "matmul",
        "layer_norm",
        "poly2_normalize",
        "classifier",
        "classifier+prompts",
        "mixture",
    ] {
        assert!(
            text.lines().any(|l| l.starts_with(name) && l.ends_with("ok")),
            "{name}\n{text}"
        );
    }
    assert!(text.contains("max relative error"));
}

#[test]
fn pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("tiny.conf");
    std::fs::write(&conf, TINY).unwrap();
    let (data, model) = (dir.path().join("data"), dir.path().join("model"));

    let o = peftlab(&["gen-data", "--config", p(&conf), "--out", p(&data)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in [
        "human.jsonl",
        "pool.jsonl",
        "automatic.jsonl",
        "split.json",
        "settings.conf",
        "manifest.json",
    ] {
        assert!(data.join(f).exists(), "{f}");
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(data.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["model.d_model"], "16");
    assert!(manifest["duration_secs"].as_f64().unwrap() >= 0.0);
    assert!(manifest["outputs"]
        .as_array()
        .unwrap()
        .iter()
        .any(|v| v == "human.jsonl"));

    let o = peftlab(&["pretrain", "--data", p(&data), "--out", p(&model)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(model.join("manifest.json")).unwrap()).unwrap();
    let inputs = manifest["inputs"].as_array().unwrap();
    assert_eq!(inputs.len(), 3);
    assert!(inputs.iter().all(|i| i["sha256"].as_str().unwrap().len() == 64));

    let o = peftlab(&[
        "train",
        "--data",
        p(&data),
        "--model",
        p(&model),
        "--method",
        "prompt_tune",
        "--set",
        "prompt_tune.pl=0",
        "--out",
        p(&dir.path().join("bad")),
    ]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("prompt_tune.pl"), "{}", stderr(&o));

    let o = peftlab(&[
        "train",
        "--data",
        p(&data),
        "--model",
        p(&model),
        "--method",
        "multitask",
        "--out",
        p(&dir.path().join("bad")),
    ]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));

    let mut rows = Vec::new();
    for (method, tier) in [("finetune", "manual"), ("prompt_tune", "manual")] {
        let out = dir.path().join(format!("{method}_{tier}"));
        let o = peftlab(&[
            "train",
            "--data",
            p(&data),
            "--model",
            p(&model),
            "--method",
            method,
            "--tier",
            tier,
            "--out",
            p(&out),
        ]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        for f in [
            "row.json",
            "seed0/config.json",
            "seed0/metrics.json",
            "seed1/metrics.json",
            "manifest.json",
        ] {
            assert!(out.join(f).exists(), "{method}: {f}");
        }
        rows.push(out);
    }
    // identical inputs give byte-identical metrics
    let again = dir.path().join("again");
    let o = peftlab(&[
        "train",
        "--data",
        p(&data),
        "--model",
        p(&model),
        "--method",
        "finetune",
        "--tier",
        "manual",
        "--seeds",
        "1",
        "--out",
        p(&again),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(
        std::fs::read(rows[0].join("seed0/metrics.json")).unwrap(),
        std::fs::read(again.join("seed0/metrics.json")).unwrap()
    );

    let mix = dir.path().join("mix");
    let o = peftlab(&["mix", "--data", p(&data), "--model", p(&model), "--out", p(&mix)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(mix.join("bank").is_dir());
    assert!(mix.join("seed0/target_prompt.bin").exists());

    let o = peftlab(&[
        "eval",
        "--data",
        p(&data),
        "--model",
        p(&model),
        "--run",
        p(&mix.join("seed0")),
        "--split",
        "val",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let metrics: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let record: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(mix.join("seed0/metrics.json")).unwrap()).unwrap();
    let (got, want) = (metrics["f1"].as_f64().unwrap(), record["val_f1"].as_f64().unwrap());
    assert!((got - want).abs() <= 1e-6, "{got} vs {want}");

    let o = peftlab(&[
        "eval",
        "--data",
        p(&data),
        "--model",
        p(&model),
        "--run",
        p(&dir.path().join("missing")),
    ]);
    assert_eq!(code(&o), 2);

    let table_dir = dir.path().join("table");
    let o = peftlab(&["report", p(&rows[0]), p(&rows[1]), p(&mix), "--out", p(&table_dir)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("organ: liver"), "{text}");
    assert!(text.contains("multitask/automatic > finetune/manual"), "{text}");
    assert!(table_dir.join("table.json").exists());

    let o = peftlab(&["report", p(&rows[0]), p(&rows[0])]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8(o.stdout).unwrap();
    assert_eq!(text.matches("\nfinetune ").count(), 2, "{text}");
    assert!(text.contains("warning: row finetune/manual appears 2 times"), "{text}");
}
