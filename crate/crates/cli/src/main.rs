mod manifest;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use peftlab::adaptation::{method_trainable, Method};
use peftlab::corpus::{read_jsonl, teacher_annotate_all, write_jsonl, Report, SplitManifest, Vocabulary};
use peftlab::diagnostics::{classifier_check, mixture_check, primitive_checks, NamedCheck, TOLERANCE};
use peftlab::encoder::{EncoderModel, ModelConfig};
use peftlab::harness::{
    agreement, build_vocab, generate_corpora, prepare, pretrain_backbone, run_experiment_matrix, run_one,
    train_source_bank, train_teacher, write_run, Prepared, ResultsTable, RowResult, Settings, Tier, Trained,
};
use peftlab::mixture::SourcePromptBank;

use manifest::Recorder;

/// Input that fails validation; exits with code 2.
#[derive(Debug)]
struct Invalid(String);

impl std::fmt::Display for Invalid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    Invalid(msg.into()).into()
}

#[derive(Parser)]
#[command(
    name = "peftlab",
    version,
    about = "Fine-tuning, prompt tuning and prompt mixtures on a small encoder"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Starting budget before any settings file or override.
    #[arg(long, global = true, value_enum, default_value_t = Preset::Desk)]
    preset: Preset,
    /// Settings file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one setting; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// Early stopping and step budgets sized for one machine.
    Desk,
    /// Full epoch budgets.
    Full,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitName {
    Train,
    Val,
    Test,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the human, gold-pool and automatic corpora and the patient split.
    GenData {
        #[arg(long)]
        out: PathBuf,
    },
    /// Build the vocabulary, pretrain the backbone, train the teacher and
    /// annotate the automatic tier.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one method on one tier over several seeds.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_parser = ["finetune", "prompt_tune", "multitask"])]
        method: Option<String>,
        #[arg(long, value_parser = ["manual", "automatic"])]
        tier: Option<String>,
        /// Source prompt bank directory; multitask only.
        #[arg(long)]
        bank: Option<PathBuf>,
        #[arg(long)]
        seeds: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train (or reuse) the source prompt bank, then the multitask target.
    Mix {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        bank: Option<PathBuf>,
        #[arg(long)]
        seeds: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a run directory on a split of the human corpus.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        run: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitName::Test)]
        split: SplitName,
    },
    /// Assemble row directories into the comparison table.
    Report {
        dirs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every primitive, the classifier and the mixture.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Check at most this many coordinates per input.
        #[arg(long)]
        max_coords: Option<usize>,
    },
    /// Run the whole pipeline and all five rows in one process.
    Matrix {
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.is::<Invalid>() {
            return 2;
        }
        if let Some(pe) = cause.downcast_ref::<peftlab::Error>() {
            return if pe.is_validation() { 2 } else { 3 };
        }
    }
    3
}

/// Preset, then the data directory's saved settings, then `--config`, then
/// `--set` and command flags.
fn settings(common: &Common, data: Option<&Path>, extra: &[(&str, String)]) -> Result<Settings> {
    let mut s = match common.preset {
        Preset::Desk => Settings::desk(),
        Preset::Full => Settings::default(),
    };
    if let Some(saved) = data.map(|d| d.join("settings.conf")).filter(|p| p.exists()) {
        s.apply(&std::fs::read_to_string(&saved)?)
            .with_context(|| saved.display().to_string())?;
    }
    if let Some(path) = &common.config {
        let text = std::fs::read_to_string(path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
        s.apply(&text).with_context(|| path.display().to_string())?;
    }
    let mut lines = String::new();
    for kv in &common.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| invalid(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        lines.push_str(&format!("{} = {}\n", k.trim(), v.trim()));
    }
    for (k, v) in extra {
        lines.push_str(&format!("{k} = {v}\n"));
    }
    s.apply(&lines)?;
    Ok(s)
}

fn config_map(s: &Settings) -> BTreeMap<String, String> {
    s.entries().into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

fn require(path: &Path) -> Result<&Path> {
    if path.exists() {
        Ok(path)
    } else {
        Err(invalid(format!("missing input {}", path.display())))
    }
}

fn reports(path: &Path, rec: &mut Recorder) -> Result<Vec<Report>> {
    rec.input(require(path)?)?;
    Ok(read_jsonl(path)?)
}

fn run(cli: Cli) -> Result<ExitCode> {
    let c = &cli.common;
    match cli.command {
        Command::GenData { out } => gen_data(&settings(c, None, &[])?, &out),
        Command::Pretrain { data, out } => pretrain(&settings(c, Some(&data), &[])?, &data, &out),
        Command::Train {
            data,
            model,
            method,
            tier,
            bank,
            seeds,
            out,
        } => {
            let mut extra = Vec::new();
            if let Some(m) = method {
                extra.push(("train.method", m));
            }
            if let Some(t) = tier {
                extra.push(("train.tier", t));
            }
            if let Some(n) = seeds {
                extra.push(("matrix.seeds", n.to_string()));
            }
            let s = settings(c, Some(&data), &extra)?;
            let mut rec = Recorder::start();
            let prepared = load_prepared(&s, &data, &model, &mut rec)?;
            let bank = match (&bank, s.method) {
                (Some(dir), _) => Some(load_bank(dir, &mut rec)?),
                (None, Method::Multitask) => {
                    return Err(invalid("multitask training needs --bank (see `peftlab mix`)"))
                }
                (None, _) => None,
            };
            train_row(&s, &prepared, bank.as_ref(), s.method, s.tier, &out, rec)
        }
        Command::Mix {
            data,
            model,
            bank,
            seeds,
            out,
        } => {
            let extra: Vec<_> = seeds.map(|n| ("matrix.seeds", n.to_string())).into_iter().collect();
            let s = settings(c, Some(&data), &extra)?;
            let mut rec = Recorder::start();
            let prepared = load_prepared(&s, &data, &model, &mut rec)?;
            let bank = match bank {
                Some(dir) => load_bank(&dir, &mut rec)?,
                None => train_source_bank(&s, &prepared)?.0,
            };
            bank.save(out.join("bank"))?;
            train_row(
                &s,
                &prepared,
                Some(&bank),
                Method::Multitask,
                Tier::Automatic,
                &out,
                rec,
            )
        }
        Command::Eval {
            data,
            model,
            run,
            split,
        } => {
            let s = settings(c, Some(&data), &[])?;
            let mut rec = Recorder::start();
            let prepared = load_prepared(&s, &data, &model, &mut rec)?;
            let trained = Trained::load(require(&run)?, &prepared.backbone)?;
            let reports = match split {
                SplitName::Train => &prepared.human.train,
                SplitName::Val => &prepared.human.val,
                SplitName::Test => &prepared.human.test,
            };
            let metrics = trained.evaluate(&prepared.examples(reports, &s.organ)?)?;
            println!("{}", serde_json::to_string_pretty(&metrics)?);
            Ok(ExitCode::SUCCESS)
        }
        Command::Report { dirs, out } => report(&dirs, out.as_deref()),
        Command::Gradcheck { seed, max_coords } => gradcheck(&settings(c, None, &[])?, seed, max_coords),
        Command::Matrix { out } => {
            let s = settings(c, None, &[])?;
            let rec = Recorder::start();
            let prepared = prepare(&s)?;
            let table = run_experiment_matrix(&s, &prepared, Some(&out))?;
            print!("{}", table.render());
            rec.finish(&out, config_map(&s))?;
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn gen_data(s: &Settings, out: &Path) -> Result<ExitCode> {
    let rec = Recorder::start();
    std::fs::create_dir_all(out)?;
    let corpora = generate_corpora(s)?;
    write_jsonl(out.join("human.jsonl"), &corpora.human)?;
    write_jsonl(out.join("pool.jsonl"), &corpora.pool)?;
    write_jsonl(out.join("automatic.jsonl"), &corpora.automatic)?;
    let ratios = (s.split_ratios.0, s.split_ratios.1, s.split_ratios.2);
    let split = peftlab::corpus::split_by_patient(&corpora.human, ratios, s.split_seed)?;
    std::fs::write(out.join("split.json"), serde_json::to_string_pretty(&split.manifest)?)?;
    std::fs::write(out.join("settings.conf"), s.render())?;
    log::info!(
        "{} human reports ({} / {} / {} patients), {} gold pool, {} automatic",
        corpora.human.len(),
        split.manifest.train.len(),
        split.manifest.val.len(),
        split.manifest.test.len(),
        corpora.pool.len(),
        corpora.automatic.len()
    );
    rec.finish(out, config_map(s))?;
    Ok(ExitCode::SUCCESS)
}

fn pretrain(s: &Settings, data: &Path, out: &Path) -> Result<ExitCode> {
    let mut rec = Recorder::start();
    let automatic = reports(&data.join("automatic.jsonl"), &mut rec)?;
    let pool = reports(&data.join("pool.jsonl"), &mut rec)?;
    let human = reports(&data.join("human.jsonl"), &mut rec)?;
    std::fs::create_dir_all(out)?;
    let vocab = build_vocab(s, &automatic)?;
    vocab.save(out.join("vocab.txt"))?;
    let (backbone, curve) = pretrain_backbone(s, &vocab, &automatic)?;
    backbone.save(out.join("backbone.bin"))?;
    std::fs::write(out.join("pretrain.json"), serde_json::to_string_pretty(&curve)?)?;
    let teacher = train_teacher(s, &backbone, &vocab, &pool)?;
    let labeled = teacher_annotate_all(&teacher, &automatic)?;
    write_jsonl(out.join("automatic_labeled.jsonl"), &labeled)?;
    let prepared = Prepared::new(s, vocab, backbone, &human, labeled)?;
    let test = &prepared.human.test;
    let on_test = teacher_annotate_all(&teacher, test)?;
    let mut stats = BTreeMap::new();
    for o in &s.organs.0 {
        stats.insert(o.name.clone(), agreement(&on_test, test, &o.name)?);
    }
    log::info!(
        "teacher agreement on the human test split ({}): {:.3}",
        s.organ,
        stats[&s.organ]
    );
    std::fs::write(out.join("teacher.json"), serde_json::to_string_pretty(&stats)?)?;
    rec.finish(out, config_map(s))?;
    Ok(ExitCode::SUCCESS)
}

fn load_prepared(s: &Settings, data: &Path, model: &Path, rec: &mut Recorder) -> Result<Prepared> {
    let human = reports(&data.join("human.jsonl"), rec)?;
    let automatic = reports(&model.join("automatic_labeled.jsonl"), rec)?;
    let vocab_path = model.join("vocab.txt");
    rec.input(require(&vocab_path)?)?;
    let vocab = Vocabulary::load(&vocab_path)?;
    let backbone_path = model.join("backbone.bin");
    rec.input(require(&backbone_path)?)?;
    let backbone = EncoderModel::load(&backbone_path)?;
    let want: ModelConfig = s.model_config(vocab.len());
    if backbone.config() != &want {
        return Err(invalid(format!(
            "{} does not match the model.* settings",
            backbone_path.display()
        )));
    }
    let prepared = Prepared::new(s, vocab, backbone, &human, automatic)?;
    let split_path = data.join("split.json");
    rec.input(require(&split_path)?)?;
    let saved: SplitManifest = serde_json::from_str(&std::fs::read_to_string(&split_path)?)
        .map_err(|e| invalid(format!("{}: {e}", split_path.display())))?;
    if saved != prepared.human.manifest {
        return Err(invalid(format!(
            "{} disagrees with split.seed / split.ratios",
            split_path.display()
        )));
    }
    Ok(prepared)
}

fn load_bank(dir: &Path, rec: &mut Recorder) -> Result<SourcePromptBank> {
    require(dir)?;
    let bank = SourcePromptBank::load(dir)?;
    for entry in std::fs::read_dir(dir)? {
        rec.input(&entry?.path())?;
    }
    Ok(bank)
}

/// Runs every seed of one row; a failing seed is recorded in the row.
fn train_row(
    s: &Settings,
    prepared: &Prepared,
    bank: Option<&SourcePromptBank>,
    method: Method,
    tier: Tier,
    out: &Path,
    rec: Recorder,
) -> Result<ExitCode> {
    std::fs::create_dir_all(out)?;
    let pl = bank.map_or(s.pl, |b| b.layout().pl);
    let mut row = RowResult {
        method,
        tier,
        trainable_params: method_trainable(method, prepared.backbone.config(), pl, bank.map_or(0, |b| b.len())),
        runs: Vec::new(),
        error: None,
    };
    for k in 0..s.seeds {
        let outcome = run_one(s, prepared, bank, method, tier, k).and_then(|(trained, record)| {
            write_run(&out.join(format!("seed{k}")), s, method, tier, &trained, &record)?;
            Ok(record)
        });
        match outcome {
            Ok(record) => {
                log::info!(
                    "{method}/{tier} seed {k}: val F1 {:.3}, test F1 {:.3}",
                    record.val_f1,
                    record.test.f1
                );
                row.runs.push(record);
            }
            Err(e) if e.is_validation() && k == 0 => return Err(e.into()),
            Err(e) => {
                log::warn!("{method}/{tier} seed {k} failed: {e}");
                let msg = format!("seed {k}: {e}");
                row.error = Some(row.error.take().map_or(msg.clone(), |p| format!("{p}; {msg}")));
            }
        }
    }
    std::fs::write(out.join("row.json"), serde_json::to_string_pretty(&row)?)?;
    std::fs::write(out.join("settings.conf"), s.render())?;
    let failed = row.error.is_some();
    rec.finish(out, config_map(s))?;
    Ok(if failed { ExitCode::from(3) } else { ExitCode::SUCCESS })
}

fn report(dirs: &[PathBuf], out: Option<&Path>) -> Result<ExitCode> {
    if dirs.is_empty() {
        return Err(invalid("report needs at least one row directory"));
    }
    let mut rec = Recorder::start();
    let mut rows = Vec::new();
    let mut organ: Option<String> = None;
    for dir in dirs {
        let (path, found) = if dir.join("table.json").exists() {
            let path = dir.join("table.json");
            let t: ResultsTable = serde_json::from_str(&std::fs::read_to_string(&path)?)
                .map_err(|e| invalid(format!("{}: {e}", path.display())))?;
            let o = t.organ.clone();
            (path, (Some(o), t.rows))
        } else {
            let path = dir.join("row.json");
            let row: RowResult = serde_json::from_str(&std::fs::read_to_string(require(&path)?)?)
                .map_err(|e| invalid(format!("{}: {e}", path.display())))?;
            let o = std::fs::read_to_string(dir.join("settings.conf"))
                .ok()
                .and_then(|t| Settings::parse(&t).ok())
                .map(|s| s.organ);
            (path, (o, vec![row]))
        };
        rec.input(&path)?;
        if let (Some(a), Some(b)) = (&organ, &found.0) {
            if a != b {
                return Err(invalid(format!(
                    "{} is for organ {b}, earlier rows are for {a}",
                    path.display()
                )));
            }
        }
        organ = organ.or(found.0);
        rows.extend(found.1);
    }
    let table = ResultsTable::assemble(organ.as_deref().unwrap_or("unknown"), rows);
    for w in table.warnings.iter().filter(|w| w.starts_with("row ")) {
        log::warn!("{w}");
    }
    print!("{}", table.render());
    if let Some(out) = out {
        std::fs::create_dir_all(out)?;
        std::fs::write(out.join("table.json"), table.to_json()?)?;
        std::fs::write(out.join("table.txt"), table.render())?;
        rec.finish(out, BTreeMap::new())?;
    }
    Ok(ExitCode::SUCCESS)
}

/// Uses the model.* settings with a small vocabulary and sequence length,
/// which only widen the embedding tables being checked.
fn gradcheck(s: &Settings, seed: u64, max_coords: Option<usize>) -> Result<ExitCode> {
    let config = ModelConfig {
        vocab_size: s.vocab_size.min(40),
        max_len: s.max_len.min(8),
        ..s.model_config(s.vocab_size)
    };
    let mut checks: Vec<NamedCheck> = primitive_checks(seed)?;
    checks.push(classifier_check(&config, 0, seed, max_coords)?);
    let mut prompted = classifier_check(&config, 2, seed, max_coords)?;
    prompted.name = "classifier+prompts".into();
    checks.push(prompted);
    checks.push(mixture_check(&config, 3, 2, seed, max_coords)?);
    let width = checks.iter().map(|c| c.name.len()).max().unwrap_or(0);
    let mut worst = 0.0f64;
    for c in &checks {
        worst = worst.max(c.report.max_rel_error);
        println!(
            "{:width$}  {:.3e}  {}",
            c.name,
            c.report.max_rel_error,
            if c.passed() { "ok" } else { "FAIL" }
        );
    }
    println!("max relative error {worst:.3e} (tolerance {TOLERANCE:e})");
    if checks.iter().all(NamedCheck::passed) {
        Ok(ExitCode::SUCCESS)
    } else {
        Err(anyhow!("gradient check above tolerance"))
    }
}
