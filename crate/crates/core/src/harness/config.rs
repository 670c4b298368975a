//! Flat `key = value` run configuration.
//!
//! One key per line, `#` starts a comment, blank lines are ignored. Every
//! key has a typed default; unknown or repeated keys are rejected.

use std::fmt::Write as _;
use std::path::Path;

use crate::adaptation::{Hyper, Method};
use crate::corpus::{CorpusConfig, OrganSpec, TeacherConfig, DEFAULT_ORGANS};
use crate::encoder::{Activation, ModelConfig};
use crate::error::{Error, Result};
use crate::pretrain::PretrainConfig;
use crate::seed::derive_seed;

use super::{Tier, TrainConfig};

trait Value: Sized {
    fn parse(s: &str) -> std::result::Result<Self, String>;
    fn render(&self) -> String;
}

macro_rules! via_str {
    ($($ty:ty),*) => {$(
        impl Value for $ty {
            fn parse(s: &str) -> std::result::Result<Self, String> {
                s.parse().map_err(|e| format!("cannot parse `{s}`: {e}"))
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

via_str!(u64, usize, f64, String, Method, Tier, Activation);

impl Value for Option<usize> {
    fn parse(s: &str) -> std::result::Result<Self, String> {
        match s {
            "none" => Ok(None),
            _ => usize::parse(s).map(Some),
        }
    }
    fn render(&self) -> String {
        self.map_or("none".into(), |v| v.to_string())
    }
}

/// `a,b,c` split ratios.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ratios(pub f64, pub f64, pub f64);

impl Value for Ratios {
    fn parse(s: &str) -> std::result::Result<Self, String> {
        let parts: Vec<f64> = s
            .split(',')
            .map(|p| f64::parse(p.trim()))
            .collect::<std::result::Result<_, _>>()?;
        match parts[..] {
            [a, b, c] => Ok(Ratios(a, b, c)),
            _ => Err(format!("expected three comma-separated ratios, got `{s}`")),
        }
    }
    fn render(&self) -> String {
        format!("{},{},{}", self.0, self.1, self.2)
    }
}

/// `name:rate,name:rate,...`
#[derive(Debug, Clone, PartialEq)]
pub struct Organs(pub Vec<OrganSpec>);

impl Value for Organs {
    fn parse(s: &str) -> std::result::Result<Self, String> {
        s.split(',')
            .map(|item| {
                let (name, rate) = item
                    .split_once(':')
                    .ok_or_else(|| format!("organ entry `{item}` is not name:rate"))?;
                Ok(OrganSpec {
                    name: name.trim().to_string(),
                    positive_rate: f64::parse(rate.trim())?,
                })
            })
            .collect::<std::result::Result<_, _>>()
            .map(Organs)
    }
    fn render(&self) -> String {
        let items: Vec<String> = self
            .0
            .iter()
            .map(|o| format!("{}:{}", o.name, o.positive_rate))
            .collect();
        items.join(",")
    }
}

/// `all`, or comma-separated organ names.
#[derive(Debug, Clone, PartialEq)]
pub enum Sources {
    All,
    Only(Vec<String>),
}

impl Value for Sources {
    fn parse(s: &str) -> std::result::Result<Self, String> {
        if s == "all" {
            return Ok(Sources::All);
        }
        let names: Vec<String> = s.split(',').map(|n| n.trim().to_string()).collect();
        if names.iter().any(String::is_empty) {
            return Err(format!("empty organ name in `{s}`"));
        }
        Ok(Sources::Only(names))
    }
    fn render(&self) -> String {
        match self {
            Sources::All => "all".into(),
            Sources::Only(names) => names.join(","),
        }
    }
}

fn default_organs() -> Organs {
    Organs(
        DEFAULT_ORGANS
            .iter()
            .map(|&(name, positive_rate)| OrganSpec {
                name: name.to_string(),
                positive_rate,
            })
            .collect(),
    )
}

macro_rules! settings {
    ($($key:literal => $field:ident: $ty:ty = $default:expr,)*) => {
        /// Every tunable of the pipeline, from corpus generation to the
        /// experiment matrix.
        #[derive(Debug, Clone, PartialEq)]
        pub struct Settings {
            $(pub $field: $ty,)*
        }

        impl Default for Settings {
            fn default() -> Self {
                Self { $($field: $default,)* }
            }
        }

        impl Settings {
            pub const KEYS: &'static [&'static str] = &[$($key),*];

            /// Sets one key from its text form.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $($key => self.$field = <$ty as Value>::parse(value).map_err(|e| Error::config(key, e))?,)*
                    _ => return Err(Error::config(key, "unknown key")),
                }
                Ok(())
            }

            /// All keys with their current values, in declaration order.
            pub fn entries(&self) -> Vec<(&'static str, String)> {
                vec![$(($key, Value::render(&self.$field))),*]
            }
        }
    };
}

settings! {
    "seed" => seed: u64 = 0,
    "task.organ" => organ: String = "liver".into(),

    "corpus.seed" => corpus_seed: u64 = 11,
    "corpus.patients" => patients: usize = 300,
    "corpus.reports_min" => reports_min: usize = 1,
    "corpus.reports_max" => reports_max: usize = 5,
    "corpus.organs" => organs: Organs = default_organs(),
    "corpus.resolve_rate" => resolve_rate: f64 = 0.2,
    "corpus.negation_rate" => negation_rate: f64 = 0.5,
    "corpus.hedge_rate" => hedge_rate: f64 = 0.08,
    "corpus.uninformative_rate" => uninformative_rate: f64 = 0.15,
    "corpus.vocab_seed" => vocab_seed: u64 = 7,
    "corpus.pool_patients" => pool_patients: usize = 1000,
    "corpus.auto_reports" => auto_reports: usize = 50_000,
    "split.ratios" => split_ratios: Ratios = Ratios(0.2, 0.3, 0.5),
    "split.seed" => split_seed: u64 = 5,

    "model.layers" => layers: usize = 2,
    "model.d_model" => d_model: usize = 32,
    "model.heads" => heads: usize = 2,
    "model.d_ff" => d_ff: usize = 64,
    "model.vocab_size" => vocab_size: usize = 512,
    "model.max_len" => max_len: usize = 48,
    "model.activation" => activation: Activation = Activation::Gelu,
    "model.dropout" => dropout: f64 = 0.0,

    "pretrain.steps" => pretrain_steps: usize = 2000,
    "pretrain.batch_size" => pretrain_batch: usize = 32,
    "pretrain.lr" => pretrain_lr: f64 = 1e-3,
    "pretrain.mask_rate" => mask_rate: f64 = 0.15,

    "teacher.epochs" => teacher_epochs: usize = 6,
    "teacher.batch_size" => teacher_batch: usize = 32,
    "teacher.lr" => teacher_lr: f64 = 1e-3,

    "train.method" => method: Method = Method::Finetune,
    "train.tier" => tier: Tier = Tier::Manual,
    "train.batch_size" => batch_size: usize = 32,
    "finetune.lr" => finetune_lr: f64 = 1e-3,
    "prompt_tune.lr" => prompt_lr: f64 = 3e-2,
    "prompt_tune.pl" => pl: usize = 16,
    "multitask.lr" => multitask_lr: f64 = 1e-2,

    "manual.epochs" => manual_epochs: usize = 1000,
    "manual.evals_per_epoch" => manual_evals: usize = 1,
    "manual.patience" => manual_patience: Option<usize> = None,
    "manual.max_steps" => manual_max_steps: Option<usize> = None,
    "automatic.epochs" => auto_epochs: usize = 10,
    "automatic.evals_per_epoch" => auto_evals: usize = 10,
    "automatic.patience" => auto_patience: Option<usize> = None,
    "automatic.max_steps" => auto_max_steps: Option<usize> = None,

    "source.organs" => sources: Sources = Sources::All,
    "source.epochs" => source_epochs: usize = 1,
    "source.evals_per_epoch" => source_evals: usize = 10,
    "source.patience" => source_patience: Option<usize> = None,
    "source.max_steps" => source_max_steps: Option<usize> = None,

    "matrix.seeds" => seeds: usize = 5,
    "matrix.jobs" => jobs: usize = 1,
}

impl Settings {
    /// Desk-scale budget: early stopping on the small tier and a fixed step
    /// budget on the large one, so the five-row matrix fits in under an hour
    /// on one core.
    pub fn desk() -> Self {
        Self {
            manual_patience: Some(30),
            auto_epochs: 1,
            auto_max_steps: Some(600),
            source_max_steps: Some(300),
            ..Self::default()
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut s = Self::default();
        s.apply(text)?;
        Ok(s)
    }

    /// Applies `key = value` lines on top of the current values.
    pub fn apply(&mut self, text: &str) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("line {}: expected key = value, got `{line}`", i + 1)))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::config(key, format!("repeated on line {}", i + 1)));
            }
            self.set(key, value.trim())?;
        }
        self.validate()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text).map_err(|e| match e {
            Error::Parse(m) => Error::Parse(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Every key, defaults included, in a form `parse` reads back.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let under = |prefix: &'static str| {
            move |e: Error| match e {
                Error::InvalidConfig { field, reason } if !field.contains('.') => {
                    let field = if field == "reports_per_patient" {
                        "reports_min".into()
                    } else {
                        field
                    };
                    Error::InvalidConfig {
                        field: format!("{prefix}.{field}"),
                        reason,
                    }
                }
                other => other,
            }
        };
        self.corpus_config("h", self.patients)?
            .validate()
            .map_err(under("corpus"))?;
        self.model_config(self.vocab_size).validate().map_err(under("model"))?;
        let Ratios(a, b, c) = self.split_ratios;
        if [a, b, c].iter().any(|r| !(0.0..=1.0).contains(r)) || (a + b + c - 1.0).abs() > 1e-9 {
            return Err(Error::config("split.ratios", "must be nonnegative and sum to 1"));
        }
        if !self.organs.0.iter().any(|o| o.name == self.organ) {
            return Err(Error::config(
                "task.organ",
                format!("`{}` is not in corpus.organs", self.organ),
            ));
        }
        if let Sources::Only(names) = &self.sources {
            if let Some(n) = names.iter().find(|n| !self.organs.0.iter().any(|o| &o.name == *n)) {
                return Err(Error::config("source.organs", format!("`{n}` is not in corpus.organs")));
            }
        }
        if self.seeds == 0 {
            return Err(Error::config("matrix.seeds", "must be at least 1"));
        }
        if self.jobs == 0 {
            return Err(Error::config("matrix.jobs", "must be at least 1"));
        }
        if self.pretrain_steps > 0 && !(0.0 < self.mask_rate && self.mask_rate < 1.0) {
            return Err(Error::config("pretrain.mask_rate", "must be in (0, 1)"));
        }
        // pl only matters for the selected method; every other budget field
        // is checked for all rows the matrix may run
        for (method, tier) in super::ROWS {
            let mut c = self.train_config(method, tier, 0);
            if (method, tier) != (self.method, self.tier) {
                c.pl = c.pl.max(1);
            }
            c.validate().map_err(|e| Self::qualify(e, method, tier))?;
        }
        self.train_config(self.method, self.tier, 0)
            .validate()
            .map_err(|e| Self::qualify(e, self.method, self.tier))
    }

    /// Renames a run-level field error to the settings key that controls it.
    fn qualify(e: Error, method: Method, tier: Tier) -> Error {
        let Error::InvalidConfig { field, reason } = e else {
            return e;
        };
        let key = match field.as_str() {
            "pl" => "prompt_tune.pl".to_string(),
            "batch_size" => "train.batch_size".to_string(),
            "lr" => format!("{method}.lr"),
            "epochs" | "evals_per_epoch" | "patience" | "max_steps" => format!("{tier}.{field}"),
            _ => field,
        };
        Error::InvalidConfig { field: key, reason }
    }

    pub fn corpus_config(&self, prefix: &str, patients: usize) -> Result<CorpusConfig> {
        Ok(CorpusConfig {
            organs: self.organs.0.clone(),
            patients,
            reports_per_patient: (self.reports_min, self.reports_max),
            resolve_rate: self.resolve_rate,
            negation_rate: self.negation_rate,
            hedge_rate: self.hedge_rate,
            uninformative_rate: self.uninformative_rate,
            vocab_seed: self.vocab_seed,
            id_prefix: prefix.to_string(),
        })
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            layers: self.layers,
            d_model: self.d_model,
            heads: self.heads,
            d_ff: self.d_ff,
            vocab_size,
            max_len: self.max_len,
            activation: self.activation,
            dropout: self.dropout,
            ..ModelConfig::default()
        }
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            steps: self.pretrain_steps,
            batch_size: self.pretrain_batch,
            lr: self.pretrain_lr,
            mask_rate: self.mask_rate,
            seed: derive_seed(self.seed, 20),
        }
    }

    pub fn teacher_config(&self) -> TeacherConfig {
        TeacherConfig {
            epochs: self.teacher_epochs,
            batch_size: self.teacher_batch,
            lr: self.teacher_lr,
            seed: derive_seed(self.seed, 21),
        }
    }

    /// The run of `method` on `tier` for seed index `k`.
    pub fn train_config(&self, method: Method, tier: Tier, k: usize) -> TrainConfig {
        let (epochs, evals_per_epoch, patience, max_steps) = match tier {
            Tier::Manual => (
                self.manual_epochs,
                self.manual_evals,
                self.manual_patience,
                self.manual_max_steps,
            ),
            Tier::Automatic => (
                self.auto_epochs,
                self.auto_evals,
                self.auto_patience,
                self.auto_max_steps,
            ),
        };
        TrainConfig {
            method,
            tier,
            epochs,
            batch_size: self.batch_size,
            lr: match method {
                Method::Finetune => self.finetune_lr,
                Method::PromptTune => self.prompt_lr,
                Method::Multitask => self.multitask_lr,
            },
            pl: self.pl,
            seed: run_seed(self.seed, k),
            evals_per_epoch,
            patience,
            max_steps,
        }
    }

    /// Indices into `corpus.organs` of the organs the source bank draws from.
    pub fn source_organs(&self) -> Vec<usize> {
        (0..self.organs.0.len())
            .filter(|&i| match &self.sources {
                Sources::All => true,
                Sources::Only(names) => names.contains(&self.organs.0[i].name),
            })
            .collect()
    }

    /// Budget for one source prompt of the bank.
    pub fn source_hyper(&self, organ_index: usize) -> Hyper {
        Hyper {
            epochs: self.source_epochs,
            batch_size: self.batch_size,
            lr: self.prompt_lr,
            seed: derive_seed(self.seed, 1000 + organ_index as u64),
            evals_per_epoch: self.source_evals,
            patience: self.source_patience,
            max_steps: self.source_max_steps,
        }
    }
}

/// Seed of the `k`-th repetition; shared by every method so runs pair by seed.
pub fn run_seed(master: u64, k: usize) -> u64 {
    derive_seed(master, 100 + k as u64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_round_trips() {
        let mut s = Settings::desk();
        s.organ = "bones".into();
        s.split_ratios = Ratios(0.25, 0.25, 0.5);
        s.auto_max_steps = None;
        assert_eq!(Settings::parse(&s.render()).unwrap(), s);
        assert_eq!(Settings::KEYS.len(), s.entries().len());
    }

    #[test]
    fn comments_blanks_and_overrides() {
        let s = Settings::parse("# header\n\nseed = 9  # trailing\nprompt_tune.pl=16\nmanual.patience = 4\n").unwrap();
        assert_eq!((s.seed, s.pl, s.manual_patience), (9, 16, Some(4)));
    }

    #[test]
    fn bad_input_names_the_key() {
        let cases = [
            ("nope = 1", "nope"),
            ("seed = x", "seed"),
            ("train.method = prompt_tune\nprompt_tune.pl = 0", "prompt_tune.pl"),
            ("automatic.patience = 0", "automatic.patience"),
            ("train.batch_size = 0", "train.batch_size"),
            ("multitask.lr = -1", "multitask.lr"),
            ("seed = 1\nseed = 2", "seed"),
            ("model.heads = 3", "model.heads"),
            ("corpus.reports_min = 9", "corpus.reports_min"),
            ("task.organ = brain", "task.organ"),
            ("split.ratios = 0.5,0.5", "split.ratios"),
            ("source.organs = liver,brain", "source.organs"),
            ("source.organs = liver,", "source.organs"),
        ];
        for (text, key) in cases {
            let err = Settings::parse(text).unwrap_err().to_string();
            assert!(err.contains(key), "{text}: {err}");
        }
        assert!(matches!(Settings::parse("just words"), Err(Error::Parse(_))));
    }
}
