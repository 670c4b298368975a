//! Training protocol, evaluation and the five-row comparison.

pub mod config;
mod matrix;
pub mod stats;

pub use config::{run_seed, Settings, Sources};
pub use matrix::{
    agreement, build_vocab, generate_corpora, prepare, pretrain_backbone, run_dir, run_experiment_matrix, run_one,
    train_source_bank, train_teacher, write_run, Corpora, Prepared, TierData,
};
pub use stats::{mean_sd, paired_one_tailed_ttest, Degeneracy, TTest};

use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::adaptation::{evaluate_model, finetune, prompt_tune, AdaptationResult, Example, Hyper, Method, PromptTuned};
use crate::checkpoint::{self, Metadata};
use crate::encoder::{EncoderModel, PromptSet};
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::mixture::{train_multitask_target, MultitaskModel, SourcePromptBank};
use crate::params::ParamStore;

/// Which training set a run uses: the small human-labeled split or the
/// large teacher-labeled corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    Manual,
    Automatic,
}

impl fmt::Display for Tier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Tier::Manual => "manual",
            Tier::Automatic => "automatic",
        })
    }
}

impl FromStr for Tier {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "manual" => Ok(Tier::Manual),
            "automatic" => Ok(Tier::Automatic),
            _ => Err(Error::config("tier", format!("unknown tier `{s}`"))),
        }
    }
}

/// The five rows of the comparison, in table order.
pub const ROWS: [(Method, Tier); 5] = [
    (Method::Finetune, Tier::Manual),
    (Method::PromptTune, Tier::Manual),
    (Method::Finetune, Tier::Automatic),
    (Method::PromptTune, Tier::Automatic),
    (Method::Multitask, Tier::Automatic),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub method: Method,
    pub tier: Tier,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub pl: usize,
    pub seed: u64,
    pub evals_per_epoch: usize,
    pub patience: Option<usize>,
    pub max_steps: Option<usize>,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be at least 1"));
        }
        if self.method == Method::PromptTune && self.pl == 0 {
            return Err(Error::config("pl", "prompt tuning needs pl >= 1"));
        }
        self.hyper().validate()
    }

    pub fn hyper(&self) -> Hyper {
        Hyper {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            seed: self.seed,
            evals_per_epoch: self.evals_per_epoch,
            patience: self.patience,
            max_steps: self.max_steps,
        }
    }
}

/// The artifact a run produces.
#[derive(Debug, Clone, PartialEq)]
pub enum Trained {
    Finetuned(EncoderModel),
    Prompted(PromptTuned),
    Mixed(MultitaskModel),
}

const MODEL_FILE: &str = "model.bin";
const PROMPT_FILE: &str = "prompt.bin";
const HEAD_FILE: &str = "head.bin";
const MIXTURE_FILE: &str = "mixture.bin";
const TARGET_FILE: &str = "target_prompt.bin";

fn head_store(model: &EncoderModel) -> Result<ParamStore> {
    let mut s = ParamStore::new();
    for name in ["classifier.weight", "classifier.bias"] {
        s.insert(name, model.params().get(name)?.clone());
    }
    Ok(s)
}

fn head_metadata(model: &EncoderModel) -> Metadata {
    let mut m = Metadata::new();
    m.insert("kind".into(), "head".into());
    m.insert("backbone".into(), model.backbone_digest());
    m
}

impl Trained {
    pub fn evaluate(&self, data: &[Example]) -> Result<MetricsReport> {
        match self {
            Trained::Finetuned(m) => evaluate_model(m, data),
            Trained::Prompted(p) => p.evaluate(data),
            Trained::Mixed(m) => m.evaluate(data),
        }
    }

    /// Writes the checkpoint files into `dir` and returns their paths.
    pub fn save(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let mut written = Vec::new();
        let mut put = |name: &str, f: &dyn Fn(&Path) -> Result<()>| -> Result<()> {
            let path = dir.join(name);
            f(&path)?;
            written.push(path);
            Ok(())
        };
        match self {
            Trained::Finetuned(m) => put(MODEL_FILE, &|p| m.save(p))?,
            Trained::Prompted(t) => {
                put(PROMPT_FILE, &|p| t.prompts.save(p))?;
                put(HEAD_FILE, &|p| {
                    checkpoint::save(p, &head_metadata(&t.model), &head_store(&t.model)?)
                })?;
            }
            Trained::Mixed(m) => {
                let mut store = m.module.params.clone();
                for (name, t) in head_store(&m.model)?.iter() {
                    store.insert(name, t.clone());
                }
                let mut meta = head_metadata(&m.model);
                meta.insert("kind".into(), "mixture".into());
                meta.insert("bank".into(), m.bank.digest());
                meta.insert("sources".into(), m.bank.names().join(","));
                put(MIXTURE_FILE, &|p| checkpoint::save(p, &meta, &store))?;
                put(TARGET_FILE, &|p| m.export_target_prompt()?.save(p))?;
                put(HEAD_FILE, &|p| {
                    checkpoint::save(p, &head_metadata(&m.model), &head_store(&m.model)?)
                })?;
            }
        }
        Ok(written)
    }

    /// Loads a run directory for inference. Multi-task runs load through
    /// their exported target prompt, so no mixture parameters are needed.
    pub fn load(dir: &Path, backbone: &EncoderModel) -> Result<Self> {
        if dir.join(MODEL_FILE).exists() {
            let model = EncoderModel::load(dir.join(MODEL_FILE))?;
            if model.config() != backbone.config() {
                return Err(Error::Checkpoint(format!(
                    "{} was trained with a different model config",
                    dir.display()
                )));
            }
            return Ok(Trained::Finetuned(model));
        }
        let prompt_file = [TARGET_FILE, PROMPT_FILE]
            .into_iter()
            .map(|f| dir.join(f))
            .find(|p| p.exists())
            .ok_or_else(|| Error::Checkpoint(format!("{} holds no checkpoint", dir.display())))?;
        let prompts = PromptSet::load(prompt_file)?;
        let (meta, head) = checkpoint::load(dir.join(HEAD_FILE))?;
        if meta.get("backbone").map(String::as_str) != Some(backbone.backbone_digest().as_str()) {
            return Err(Error::Checkpoint(format!(
                "{} was trained on a different backbone",
                dir.display()
            )));
        }
        let mut model = backbone.clone();
        for (name, t) in head.iter() {
            model.params_mut().insert(name, t.clone());
        }
        Ok(Trained::Prompted(PromptTuned { model, prompts }))
    }
}

/// Dispatches one run to the matching adaptation method and returns the
/// restored best-validation checkpoint.
pub fn train_with_checkpointing(
    config: &TrainConfig,
    model: &EncoderModel,
    train: &[Example],
    val: &[Example],
    bank: Option<&SourcePromptBank>,
) -> Result<(Trained, AdaptationResult)> {
    config.validate()?;
    let hyper = config.hyper();
    Ok(match config.method {
        Method::Finetune => {
            let (m, r) = finetune(model, train, val, &hyper)?;
            (Trained::Finetuned(m), r)
        }
        Method::PromptTune => {
            let (p, r) = prompt_tune(model, train, val, &hyper, config.pl)?;
            (Trained::Prompted(p), r)
        }
        Method::Multitask => {
            let bank = bank.ok_or_else(|| Error::config("bank", "multitask runs need a source prompt bank"))?;
            let (m, r) = train_multitask_target(model, bank, train, val, &hyper)?;
            (Trained::Mixed(m), r)
        }
    })
}

/// Scores a trained artifact on a labeled split at threshold 0.5.
pub fn evaluate(trained: &Trained, data: &[Example]) -> Result<MetricsReport> {
    trained.evaluate(data)
}

/// One seeded run of one row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed_index: usize,
    pub seed: u64,
    pub val_f1: f64,
    pub test: MetricsReport,
    pub result: AdaptationResult,
}

/// All seeds of one (method, tier) row, or the error that stopped it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowResult {
    pub method: Method,
    pub tier: Tier,
    pub trainable_params: usize,
    pub runs: Vec<RunRecord>,
    pub error: Option<String>,
}

impl RowResult {
    pub fn label(&self) -> String {
        format!("{}/{}", self.method, self.tier)
    }

    pub fn test_f1(&self) -> Vec<f64> {
        self.runs.iter().map(|r| r.test.f1).collect()
    }

    fn column(&self, f: impl Fn(&RunRecord) -> f64) -> (f64, f64) {
        mean_sd(&self.runs.iter().map(f).collect::<Vec<_>>())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub better: String,
    pub baseline: String,
    pub metric: String,
    pub test: TTest,
}

/// The assembled table: rows, significance tests and warnings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsTable {
    pub organ: String,
    pub rows: Vec<RowResult>,
    pub comparisons: Vec<Comparison>,
    pub warnings: Vec<String>,
}

impl ResultsTable {
    /// Pairs every multi-task row against every fine-tuning and prompt-tuning
    /// row on test F1, matched by seed index.
    pub fn assemble(organ: &str, rows: Vec<RowResult>) -> Self {
        let mut warnings = Vec::new();
        let mut seen = std::collections::BTreeMap::new();
        for r in &rows {
            *seen.entry(r.label()).or_insert(0) += 1;
            if let Some(e) = &r.error {
                warnings.push(format!("{}: {e}", r.label()));
            }
            for run in &r.runs {
                for w in &run.result.warnings {
                    warnings.push(format!("{} seed {}: {w}", r.label(), run.seed_index));
                }
                if run.test.zero_division {
                    warnings.push(format!(
                        "{} seed {}: test F1 hit a zero denominator",
                        r.label(),
                        run.seed_index
                    ));
                }
            }
        }
        for (label, n) in seen {
            if n > 1 {
                warnings.push(format!("row {label} appears {n} times"));
            }
        }
        let mut comparisons = Vec::new();
        for a in rows
            .iter()
            .filter(|r| r.method == Method::Multitask && r.error.is_none())
        {
            for b in rows
                .iter()
                .filter(|r| r.method != Method::Multitask && r.error.is_none())
            {
                let (xa, xb) = paired(a, b);
                match paired_one_tailed_ttest(&xa, &xb) {
                    Ok(test) => comparisons.push(Comparison {
                        better: a.label(),
                        baseline: b.label(),
                        metric: "test_f1".into(),
                        test,
                    }),
                    Err(e) => warnings.push(format!("{} vs {}: {e}", a.label(), b.label())),
                }
            }
        }
        Self {
            organ: organ.to_string(),
            rows,
            comparisons,
            warnings,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Aligned plain-text table followed by significance and warning lines.
    pub fn render(&self) -> String {
        let header = [
            "Method",
            "Tier",
            "Val F1",
            "Test F1",
            "Precision",
            "Recall",
            "Tunable params",
        ];
        let pct = |(m, s): (f64, f64)| format!("{:.1} ± {:.1}", 100.0 * m, 100.0 * s);
        let mut cells: Vec<Vec<String>> = vec![header.iter().map(|s| s.to_string()).collect()];
        for r in &self.rows {
            let mut row = vec![r.method.to_string(), r.tier.to_string()];
            if r.runs.is_empty() {
                row.extend(std::iter::repeat_n("-".to_string(), 4));
            } else {
                row.push(pct(r.column(|x| x.val_f1)));
                row.push(pct(r.column(|x| x.test.f1)));
                row.push(pct(r.column(|x| x.test.precision)));
                row.push(pct(r.column(|x| x.test.recall)));
            }
            row.push(group_thousands(r.trainable_params));
            cells.push(row);
        }
        let widths: Vec<usize> = (0..header.len())
            .map(|c| cells.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = format!("organ: {}\n", self.organ);
        for (i, row) in cells.iter().enumerate() {
            let line: Vec<String> = row
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(c, (s, w))| {
                    let pad = w - s.chars().count();
                    if c < 2 {
                        format!("{s}{}", " ".repeat(pad))
                    } else {
                        format!("{}{s}", " ".repeat(pad))
                    }
                })
                .collect();
            out.push_str(line.join("  ").trim_end());
            out.push('\n');
            if i == 0 {
                let total = widths.iter().sum::<usize>() + 2 * (widths.len() - 1);
                out.push_str(&"-".repeat(total));
                out.push('\n');
            }
        }
        for c in &self.comparisons {
            let flag = match c.test.degenerate {
                Some(d) => format!(
                    " [degenerate: {}]",
                    serde_json::to_value(d)
                        .map(|v| v.as_str().unwrap_or("").to_string())
                        .unwrap_or_default()
                ),
                None => String::new(),
            };
            let _ = writeln!(
                out,
                "{} > {} ({}): t = {:.3}, df = {}, one-tailed p = {:.4}{flag}",
                c.better, c.baseline, c.metric, c.test.t, c.test.df, c.test.p
            );
        }
        for w in &self.warnings {
            let _ = writeln!(out, "warning: {w}");
        }
        out
    }
}

/// Test F1 of two rows over the seed indices both contain.
fn paired(a: &RowResult, b: &RowResult) -> (Vec<f64>, Vec<f64>) {
    a.runs
        .iter()
        .filter_map(|ra| {
            b.runs
                .iter()
                .find(|rb| rb.seed_index == ra.seed_index)
                .map(|rb| (ra.test.f1, rb.test.f1))
        })
        .unzip()
}

fn group_thousands(n: usize) -> String {
    let s = n.to_string();
    let mut out = String::new();
    for (i, ch) in s.chars().enumerate() {
        if i > 0 && (s.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn thousands() {
        assert_eq!(group_thousands(0), "0");
        assert_eq!(group_thousands(999), "999");
        assert_eq!(group_thousands(1_235_713), "1,235,713");
    }

    #[test]
    fn train_config_rejects_bad_values() {
        let ok = TrainConfig {
            method: Method::PromptTune,
            tier: Tier::Manual,
            epochs: 1,
            batch_size: 1,
            lr: 1e-3,
            pl: 1,
            seed: 0,
            evals_per_epoch: 1,
            patience: None,
            max_steps: None,
        };
        ok.validate().unwrap();
        for (bad, field) in [
            (
                TrainConfig {
                    epochs: 0,
                    ..ok.clone()
                },
                "epochs",
            ),
            (
                TrainConfig {
                    batch_size: 0,
                    ..ok.clone()
                },
                "batch_size",
            ),
            (TrainConfig { pl: 0, ..ok.clone() }, "pl"),
        ] {
            assert!(bad.validate().unwrap_err().to_string().contains(field));
        }
        TrainConfig {
            pl: 0,
            method: Method::Finetune,
            ..ok
        }
        .validate()
        .unwrap();
    }
}
