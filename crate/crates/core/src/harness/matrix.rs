//! End-to-end pipeline: corpora, pretraining, teacher annotation, source
//! bank and the seeded five-row matrix.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::adaptation::{examples, method_trainable, prompt_tune, Example, Method};
use crate::corpus::{
    generate_corpus, split_by_patient, teacher_annotate_all, upsample_minority, MultiHeadTeacher, Report, Splits,
    Vocabulary,
};
use crate::encoder::EncoderModel;
use crate::error::{Error, Result};
use crate::mixture::SourcePromptBank;
use crate::pretrain::{pretrain_mlm, PretrainReport};
use crate::seed::derive_seed;

use super::{train_with_checkpointing, ResultsTable, RowResult, RunRecord, Settings, Tier, Trained, ROWS};

/// The three raw corpora: human-labeled reports for the task, a disjoint
/// gold pool for the teacher, and the large unlabeled automatic tier.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpora {
    pub human: Vec<Report>,
    pub pool: Vec<Report>,
    pub automatic: Vec<Report>,
}

pub fn generate_corpora(s: &Settings) -> Result<Corpora> {
    let human = generate_corpus(&s.corpus_config("h", s.patients)?, s.corpus_seed)?;
    let pool = generate_corpus(&s.corpus_config("g", s.pool_patients)?, derive_seed(s.corpus_seed, 1))?;
    // 1..=5 reports per patient averages 3, so half as many patients as
    // wanted reports leaves ample slack before truncation
    let patients = (s.auto_reports / 2).max(1);
    let mut automatic = generate_corpus(&s.corpus_config("a", patients)?, derive_seed(s.corpus_seed, 2))?;
    automatic.truncate(s.auto_reports);
    Ok(Corpora { human, pool, automatic })
}

pub fn build_vocab(s: &Settings, automatic: &[Report]) -> Result<Vocabulary> {
    Vocabulary::from_reports(automatic, s.vocab_size)
}

/// Masked-token pretraining on the automatic tier text.
pub fn pretrain_backbone(
    s: &Settings,
    vocab: &Vocabulary,
    automatic: &[Report],
) -> Result<(EncoderModel, PretrainReport)> {
    let config = s.model_config(vocab.len());
    let mut model = EncoderModel::new(config, derive_seed(s.seed, 10))?;
    let seqs = vocab.encode_all(automatic, model.config().max_len);
    let report = pretrain_mlm(&mut model, &seqs, &s.pretrain_config())?;
    Ok((model, report))
}

pub fn train_teacher(
    s: &Settings,
    backbone: &EncoderModel,
    vocab: &Vocabulary,
    pool: &[Report],
) -> Result<MultiHeadTeacher> {
    MultiHeadTeacher::train(
        backbone.clone(),
        vocab.clone(),
        pool,
        &s.organs.0.iter().map(|o| o.name.clone()).collect::<Vec<_>>(),
        &s.teacher_config(),
    )
}

/// Fraction of reports where the teacher label matches gold for `organ`.
pub fn agreement(teacher: &[Report], gold: &[Report], organ: &str) -> Result<f64> {
    if teacher.len() != gold.len() || gold.is_empty() {
        return Err(Error::config(
            "agreement",
            "needs two equally sized nonempty report lists",
        ));
    }
    let mut same = 0;
    for (t, g) in teacher.iter().zip(gold) {
        same += usize::from(t.label(organ)? == g.label(organ)?);
    }
    Ok(same as f64 / gold.len() as f64)
}

/// Everything the runs share.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub vocab: Vocabulary,
    pub backbone: EncoderModel,
    pub human: Splits,
    /// Teacher-labeled automatic tier, every organ.
    pub automatic: Vec<Report>,
}

/// Training, validation and test examples for one tier and organ. Training
/// data is upsampled to balance classes; validation and test always come
/// from the human split.
#[derive(Debug, Clone)]
pub struct TierData {
    pub train: Vec<Example>,
    pub val: Vec<Example>,
    pub test: Vec<Example>,
}

impl Prepared {
    pub fn new(
        s: &Settings,
        vocab: Vocabulary,
        backbone: EncoderModel,
        human: &[Report],
        automatic: Vec<Report>,
    ) -> Result<Self> {
        let ratios = (s.split_ratios.0, s.split_ratios.1, s.split_ratios.2);
        let human = split_by_patient(human, ratios, s.split_seed)?;
        Ok(Self {
            vocab,
            backbone,
            human,
            automatic,
        })
    }

    pub fn examples(&self, reports: &[Report], organ: &str) -> Result<Vec<Example>> {
        examples(reports, &self.vocab, organ, self.backbone.config().max_len)
    }

    pub fn tier_data(&self, tier: Tier, organ: &str, seed: u64) -> Result<TierData> {
        let source = match tier {
            Tier::Manual => &self.human.train,
            Tier::Automatic => &self.automatic,
        };
        let train = self.examples(source, organ)?;
        Ok(TierData {
            train: upsample_minority(&train, |e| e.label, seed)?,
            val: self.examples(&self.human.val, organ)?,
            test: self.examples(&self.human.test, organ)?,
        })
    }
}

/// Runs every pipeline stage from corpus generation to teacher annotation.
pub fn prepare(s: &Settings) -> Result<Prepared> {
    s.validate()?;
    let corpora = generate_corpora(s)?;
    log::info!(
        "corpora: {} human, {} gold pool, {} automatic reports",
        corpora.human.len(),
        corpora.pool.len(),
        corpora.automatic.len()
    );
    let vocab = build_vocab(s, &corpora.automatic)?;
    let (backbone, report) = pretrain_backbone(s, &vocab, &corpora.automatic)?;
    log::info!(
        "pretrained {} steps, final loss {:.3}",
        report.steps,
        report.loss_curve.last().copied().unwrap_or(f64::NAN)
    );
    let teacher = train_teacher(s, &backbone, &vocab, &corpora.pool)?;
    let automatic = teacher_annotate_all(&teacher, &corpora.automatic)?;
    let prepared = Prepared::new(s, vocab, backbone, &corpora.human, automatic)?;
    let labeled = teacher_annotate_all(&teacher, &prepared.human.test)?;
    log::info!(
        "teacher agreement on the human test split ({}): {:.3}",
        s.organ,
        agreement(&labeled, &prepared.human.test, &s.organ)?
    );
    Ok(prepared)
}

/// One prompt per organ, each tuned on the automatic tier for that organ.
pub fn train_source_bank(s: &Settings, prepared: &Prepared) -> Result<(SourcePromptBank, Vec<String>)> {
    let mut entries = Vec::new();
    let mut skipped = Vec::new();
    for i in s.source_organs() {
        let organ = &s.organs.0[i];
        let trained = prepared
            .tier_data(Tier::Automatic, &organ.name, derive_seed(s.seed, 40 + i as u64))
            .and_then(|data| prompt_tune(&prepared.backbone, &data.train, &data.val, &s.source_hyper(i), s.pl));
        match trained {
            Ok((tuned, result)) => {
                log::info!(
                    "source prompt {}: val F1 {:.3}",
                    organ.name,
                    result.best_val_f1.unwrap_or(f64::NAN)
                );
                entries.push((organ.name.clone(), tuned.prompts));
            }
            // a rare organ can come back from the teacher with no positives
            Err(e @ Error::SingleClass(_)) => {
                log::warn!("source prompt {} skipped: {e}", organ.name);
                skipped.push(organ.name.clone());
            }
            Err(e) => return Err(e),
        }
    }
    if entries.is_empty() {
        return Err(Error::config(
            "source.organs",
            "no source organ has both classes in its automatic labels",
        ));
    }
    Ok((SourcePromptBank::new(entries)?, skipped))
}

/// Trains and scores one seeded run.
pub fn run_one(
    s: &Settings,
    prepared: &Prepared,
    bank: Option<&SourcePromptBank>,
    method: Method,
    tier: Tier,
    k: usize,
) -> Result<(Trained, RunRecord)> {
    let config = s.train_config(method, tier, k);
    let data = prepared.tier_data(tier, &s.organ, derive_seed(config.seed, 30))?;
    let (trained, result) = train_with_checkpointing(&config, &prepared.backbone, &data.train, &data.val, bank)?;
    let val_f1 = trained.evaluate(&data.val)?.f1;
    let test = trained.evaluate(&data.test)?;
    Ok((
        trained,
        RunRecord {
            seed_index: k,
            seed: config.seed,
            val_f1,
            test,
            result,
        },
    ))
}

/// Writes the config snapshot, metrics and checkpoint of one run.
pub fn write_run(
    dir: &Path,
    s: &Settings,
    method: Method,
    tier: Tier,
    trained: &Trained,
    record: &RunRecord,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let config = s.train_config(method, tier, record.seed_index);
    std::fs::write(dir.join("config.json"), serde_json::to_string_pretty(&config)?)?;
    std::fs::write(dir.join("metrics.json"), serde_json::to_string_pretty(record)?)?;
    trained.save(dir)?;
    Ok(())
}

pub fn run_dir(out: &Path, method: Method, tier: Tier, k: usize) -> std::path::PathBuf {
    out.join(format!("{method}_{tier}")).join(format!("seed{k}"))
}

/// Runs all five rows over `matrix.seeds` seeds with up to `matrix.jobs`
/// runs in flight. A failing run marks its row without stopping the others;
/// the table depends only on the settings, never on scheduling.
pub fn run_experiment_matrix(s: &Settings, prepared: &Prepared, out: Option<&Path>) -> Result<ResultsTable> {
    s.validate()?;
    let mut skipped = Vec::new();
    let bank = match train_source_bank(s, prepared) {
        Ok((b, sk)) => {
            if let Some(out) = out {
                b.save(out.join("bank"))?;
            }
            skipped = sk;
            Ok(b)
        }
        Err(e) => Err(e.to_string()),
    };
    let jobs: Vec<(usize, Method, Tier, usize)> = ROWS
        .iter()
        .enumerate()
        .flat_map(|(r, &(m, t))| (0..s.seeds).map(move |k| (r, m, t, k)))
        .collect();
    let slots: Vec<Mutex<Option<std::result::Result<RunRecord, String>>>> =
        jobs.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let work = || loop {
        let i = next.fetch_add(1, Ordering::SeqCst);
        let Some(&(_, method, tier, k)) = jobs.get(i) else {
            break;
        };
        let outcome = match (&bank, method) {
            (Err(e), Method::Multitask) => Err(format!("source bank: {e}")),
            _ => run_one(s, prepared, bank.as_ref().ok(), method, tier, k)
                .and_then(|(trained, record)| {
                    if let Some(out) = out {
                        write_run(&run_dir(out, method, tier, k), s, method, tier, &trained, &record)?;
                    }
                    Ok(record)
                })
                .map_err(|e| e.to_string()),
        };
        match &outcome {
            Ok(r) => log::info!("{method}/{tier} seed {k}: test F1 {:.3}", r.test.f1),
            Err(e) => log::warn!("{method}/{tier} seed {k} failed: {e}"),
        }
        *slots[i].lock().expect("unpoisoned") = Some(outcome);
    };
    std::thread::scope(|scope| {
        for _ in 0..s.jobs.min(jobs.len()) {
            scope.spawn(work);
        }
    });
    let n_sources = bank.as_ref().map_or(0, |b| b.len());
    let mut rows: Vec<RowResult> = ROWS
        .iter()
        .map(|&(method, tier)| RowResult {
            method,
            tier,
            trainable_params: method_trainable(method, prepared.backbone.config(), s.pl, n_sources),
            runs: Vec::new(),
            error: None,
        })
        .collect();
    for (&(r, _, _, k), slot) in jobs.iter().zip(slots) {
        match slot.into_inner().expect("unpoisoned").expect("every job ran") {
            Ok(record) => rows[r].runs.push(record),
            Err(e) => {
                let msg = format!("seed {k}: {e}");
                rows[r].error = Some(match rows[r].error.take() {
                    Some(prev) => format!("{prev}; {msg}"),
                    None => msg,
                });
            }
        }
    }
    let mut table = ResultsTable::assemble(&s.organ, rows);
    if !skipped.is_empty() {
        table.warnings.push(format!(
            "source bank skipped single-class organs: {}",
            skipped.join(", ")
        ));
    }
    if let Some(out) = out {
        std::fs::create_dir_all(out)?;
        std::fs::write(out.join("table.json"), table.to_json()?)?;
        std::fs::write(out.join("table.txt"), table.render())?;
        std::fs::write(out.join("settings.conf"), s.render())?;
    }
    Ok(table)
}
