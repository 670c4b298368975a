//! Single-task adaptation: full fine-tuning and deep prompt tuning with a
//! frozen backbone, plus exact trainable-parameter accounting.

mod count;
mod train;

pub use count::{artifact_shapes, count_trainable, method_trainable, ParameterPartition, Shapes};
pub(crate) use train::{fit, Adapter, FitOutcome, Route};
pub use train::{EvalPoint, Hyper};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::{Report, Vocabulary};
use crate::encoder::{is_backbone, EncoderModel, PromptSet, PROMPT_KEY, PROMPT_VALUE};
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::params::ParamStore;
use crate::seed::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Finetune,
    PromptTune,
    Multitask,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Finetune => "finetune",
            Method::PromptTune => "prompt_tune",
            Method::Multitask => "multitask",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "finetune" => Ok(Method::Finetune),
            "prompt_tune" => Ok(Method::PromptTune),
            "multitask" => Ok(Method::Multitask),
            _ => Err(Error::config("method", format!("unknown method `{s}`"))),
        }
    }
}

/// One tokenized report with its binary label for the task organ.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Example {
    pub tokens: Vec<u32>,
    pub label: bool,
}

/// Encodes `reports` for one organ.
pub fn examples(reports: &[Report], vocab: &Vocabulary, organ: &str, max_len: usize) -> Result<Vec<Example>> {
    reports
        .iter()
        .map(|r| {
            Ok(Example {
                tokens: vocab.encode(&r.text, max_len),
                label: r.label(organ)?,
            })
        })
        .collect()
}

/// Training record of one run, serialized next to its checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptationResult {
    pub method: Method,
    pub curve: Vec<EvalPoint>,
    pub best_epoch: Option<f64>,
    pub best_step: Option<usize>,
    pub best_val_f1: Option<f64>,
    pub trainable_params: usize,
    pub steps: usize,
    pub stopped_early: bool,
    pub warnings: Vec<String>,
}

impl AdaptationResult {
    pub(crate) fn from_fit(method: Method, fit: FitOutcome, trainable_params: usize, warnings: Vec<String>) -> Self {
        let best = fit.best.map(|i| &fit.curve[i]);
        Self {
            method,
            best_epoch: best.map(|p| p.epoch),
            best_step: best.map(|p| p.step),
            best_val_f1: best.map(|p| p.val_f1),
            curve: fit.curve,
            trainable_params,
            steps: fit.steps,
            stopped_early: fit.stopped_early,
            warnings,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

pub(crate) fn check_splits(train: &[Example], val: &[Example]) -> Result<Vec<String>> {
    if train.is_empty() {
        return Err(Error::EmptySplit("train"));
    }
    if val.is_empty() {
        return Err(Error::EmptySplit("validation"));
    }
    let pos = val.iter().filter(|e| e.label).count();
    let mut warnings = Vec::new();
    if pos == 0 || pos == val.len() {
        warnings.push(format!(
            "validation set is single-class ({}); F1 is degenerate",
            if pos == 0 { "all negative" } else { "all positive" }
        ));
    }
    Ok(warnings)
}

const HEAD_TAG: u64 = 1;
const PROMPT_TAG: u64 = 2;
const ORDER_TAG: u64 = 3;

pub(crate) fn run_hyper(hyper: &Hyper) -> Hyper {
    Hyper {
        seed: derive_seed(hyper.seed, ORDER_TAG),
        ..hyper.clone()
    }
}

/// Trains every parameter (with a fresh classifier head) on BCE and returns
/// the checkpoint with the best validation F1. Zero epochs return the input
/// model untouched.
pub fn finetune(
    model: &EncoderModel,
    train: &[Example],
    val: &[Example],
    hyper: &Hyper,
) -> Result<(EncoderModel, AdaptationResult)> {
    let warnings = check_splits(train, val)?;
    hyper.validate()?;
    let trainable = model.params().numel();
    if hyper.epochs == 0 {
        let fit = FitOutcome {
            curve: Vec::new(),
            best: None,
            steps: 0,
            stopped_early: false,
        };
        return Ok((
            model.clone(),
            AdaptationResult::from_fit(Method::Finetune, fit, trainable, warnings),
        ));
    }
    let mut start = model.clone();
    start.reset_classifier(derive_seed(hyper.seed, HEAD_TAG));
    let mut adapter = Adapter {
        config: start.config().clone(),
        frozen: ParamStore::new(),
        trainable: start.params().clone(),
        route: Route::Direct,
    };
    let fit = fit(&mut adapter, train, val, &run_hyper(hyper))?;
    let tuned = EncoderModel::from_parts(start.config().clone(), adapter.trainable)?;
    Ok((
        tuned,
        AdaptationResult::from_fit(Method::Finetune, fit, trainable, warnings),
    ))
}

/// Output of prompt tuning: the unchanged backbone carrying the new head, and
/// the learned prompts.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptTuned {
    pub model: EncoderModel,
    pub prompts: PromptSet,
}

impl PromptTuned {
    pub fn classify(&self, seqs: &[Vec<u32>]) -> Result<Vec<f64>> {
        prompt_adapter(&self.model, &self.prompts).predict(seqs)
    }

    pub fn evaluate(&self, data: &[Example]) -> Result<MetricsReport> {
        prompt_adapter(&self.model, &self.prompts).evaluate(data)
    }
}

/// Splits `model` into its frozen backbone and a trainable head + prompt set.
pub(crate) fn prompt_adapter(model: &EncoderModel, prompts: &PromptSet) -> Adapter {
    let mut frozen = ParamStore::new();
    let mut trainable = ParamStore::new();
    for (name, t) in model.params().iter() {
        if is_backbone(name) {
            frozen.insert(name, t.clone());
        } else {
            trainable.insert(name, t.clone());
        }
    }
    trainable.insert(PROMPT_KEY, prompts.key.clone());
    trainable.insert(PROMPT_VALUE, prompts.value.clone());
    Adapter {
        config: model.config().clone(),
        frozen,
        trainable,
        route: Route::Prompt,
    }
}

/// Deep prompt tuning: a fresh `[L, pl, d]` key/value prompt pair and a fresh
/// classifier head are the only trained tensors; the backbone is frozen.
pub fn prompt_tune(
    model: &EncoderModel,
    train: &[Example],
    val: &[Example],
    hyper: &Hyper,
    pl: usize,
) -> Result<(PromptTuned, AdaptationResult)> {
    if pl == 0 {
        return Err(Error::config("pl", "prompt tuning needs pl >= 1"));
    }
    let warnings = check_splits(train, val)?;
    hyper.validate()?;
    let cfg = model.config();
    let trainable = method_trainable(Method::PromptTune, cfg, pl, 0);
    let mut start = model.clone();
    start.reset_classifier(derive_seed(hyper.seed, HEAD_TAG));
    let prompts = PromptSet::random(cfg.layers, pl, cfg.d_model, derive_seed(hyper.seed, PROMPT_TAG));
    let mut adapter = prompt_adapter(&start, &prompts);
    let fit = fit(&mut adapter, train, val, &run_hyper(hyper))?;
    let prompts = PromptSet::from_store(&adapter.trainable)?;
    for name in ["classifier.weight", "classifier.bias"] {
        let mut t = adapter.trainable.get(name)?.clone();
        t.clear_grad();
        start.params_mut().insert(name, t);
    }
    Ok((
        PromptTuned { model: start, prompts },
        AdaptationResult::from_fit(Method::PromptTune, fit, trainable, warnings),
    ))
}

/// Evaluates a plain (fine-tuned) model.
pub fn evaluate_model(model: &EncoderModel, data: &[Example]) -> Result<MetricsReport> {
    Adapter {
        config: model.config().clone(),
        frozen: model.params().clone(),
        trainable: ParamStore::new(),
        route: Route::Direct,
    }
    .evaluate(data)
}
