use peftlab::adaptation::Method;
use peftlab::harness::{prepare, run_dir, run_experiment_matrix, train_source_bank, Settings, Tier, Trained, ROWS};

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
manual.epochs = 4
automatic.epochs = 1
automatic.max_steps = 8
automatic.evals_per_epoch = 2
source.max_steps = 4
matrix.seeds = 2
";

fn tiny(extra: &str) -> Settings {
    let mut s = Settings::parse(TINY).unwrap();
    s.apply(extra).unwrap();
    s
}

#[test]
fn matrix_is_reproducible_and_writes_every_run() {
    let s = tiny("matrix.jobs = 3\n");
    let prepared = prepare(&s).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let table = run_experiment_matrix(&s, &prepared, Some(dir.path())).unwrap();
    assert_eq!(table.rows.len(), 5);
    for row in &table.rows {
        assert!(row.error.is_none(), "{:?}", row.error);
        assert_eq!(row.runs.len(), 2);
    }
    // multitask against each of the four single-task rows
    assert_eq!(table.comparisons.len(), 4);

    let serial = Settings { jobs: 1, ..s.clone() };
    let again = run_experiment_matrix(&serial, &prepare(&serial).unwrap(), None).unwrap();
    assert_eq!(table, again);

    for &(method, tier) in &ROWS {
        for k in 0..2 {
            let run = run_dir(dir.path(), method, tier, k);
            for f in ["config.json", "metrics.json"] {
                assert!(run.join(f).exists(), "{}", run.join(f).display());
            }
            let row = table
                .rows
                .iter()
                .find(|r| (r.method, r.tier) == (method, tier))
                .unwrap();
            let rec = row.runs.iter().find(|r| r.seed_index == k).unwrap();
            let trained = Trained::load(&run, &prepared.backbone).unwrap();
            let data = prepared.tier_data(tier, &s.organ, 0).unwrap();
            let val = trained.evaluate(&data.val).unwrap().f1;
            assert!(
                (val - rec.val_f1).abs() <= 1e-6,
                "{method}/{tier}: {val} vs {}",
                rec.val_f1
            );
            let best = rec.result.best_val_f1.unwrap();
            assert!((best - rec.val_f1).abs() <= 1e-6, "{best} vs {}", rec.val_f1);
        }
    }
    let metrics = std::fs::read(run_dir(dir.path(), Method::Finetune, Tier::Manual, 0).join("metrics.json")).unwrap();
    let rerun = tempfile::tempdir().unwrap();
    run_experiment_matrix(&s, &prepared, Some(rerun.path())).unwrap();
    let again = std::fs::read(run_dir(rerun.path(), Method::Finetune, Tier::Manual, 0).join("metrics.json")).unwrap();
    assert_eq!(metrics, again);
    let text = std::fs::read_to_string(dir.path().join("table.txt")).unwrap();
    assert!(text.contains("Tunable params"));
    assert_eq!(text, table.render());
}

#[test]
fn failing_row_does_not_stop_the_others() {
    // an organ with no positives cannot train a source prompt; as the only
    // source it leaves the multitask row without a bank
    let s = tiny("corpus.organs = liver:0.3,lungs:0.25,bones:0\nsource.organs = bones\nmatrix.seeds = 1\n");
    let prepared = prepare(&s).unwrap();
    let table = run_experiment_matrix(&s, &prepared, None).unwrap();
    for row in &table.rows {
        if row.method == Method::Multitask {
            assert!(row.error.as_deref().unwrap().contains("source bank"), "{:?}", row.error);
            assert!(row.runs.is_empty());
        } else {
            assert!(row.error.is_none(), "{}: {:?}", row.label(), row.error);
            assert_eq!(row.runs.len(), 1);
        }
    }
    assert!(table.comparisons.is_empty());
    assert!(table.render().contains("warning: multitask/automatic"));
}

#[test]
fn single_class_sources_are_skipped() {
    let s = tiny("corpus.organs = liver:0.3,lungs:0.25,bones:0\n");
    let prepared = prepare(&s).unwrap();
    let (bank, skipped) = train_source_bank(&s, &prepared).unwrap();
    assert_eq!(bank.names(), ["liver", "lungs"]);
    assert_eq!(skipped, ["bones"]);
}

#[test]
fn prompt_tuning_with_zero_prompt_length_is_a_config_error() {
    let err = Settings::parse(&format!("{TINY}train.method = prompt_tune\nprompt_tune.pl = 0\n")).unwrap_err();
    assert!(err.to_string().contains("prompt_tune.pl"), "{err}");
    assert!(err.is_validation());
}
