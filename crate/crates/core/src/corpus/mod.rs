//! Synthetic impression-style reports with per-organ metastasis labels.
//!
//! Every patient carries one latent two-state Markov chain per organ
//! (metastasis present / absent), started from its stationary distribution so
//! each report's label marginal equals the configured positive rate. Report
//! text is rendered from the chain: transitions produce "new" or "resolved"
//! findings, persistent disease produces "stable" findings, and healthy
//! organs are mostly unmentioned. Unmentioned positive organs, hedged
//! findings and non-informative impressions keep the labels from being
//! recoverable by keyword lookup.

mod io;
mod split;
mod teacher;
mod templates;
mod vocab;

pub use io::{read_jsonl, write_jsonl, SplitManifest};
pub use split::{split_by_patient, upsample_minority, upsample_positive, Splits, DEFAULT_RATIOS};
pub use teacher::{teacher_annotate, teacher_annotate_all, Annotator, MultiHeadTeacher, TeacherConfig};
pub use vocab::{tokenize_words, Vocabulary};

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use templates::{Finding, Lexicon};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelSource {
    Human,
    Teacher,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub id: String,
    pub patient_id: String,
    pub text: String,
    /// organ name → 0/1
    pub labels: BTreeMap<String, u8>,
    pub label_source: LabelSource,
}

impl Report {
    pub fn label(&self, organ: &str) -> Result<bool> {
        self.labels
            .get(organ)
            .map(|&y| y == 1)
            .ok_or_else(|| Error::UnknownOrgan(organ.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrganSpec {
    pub name: String,
    pub positive_rate: f64,
}

/// The thirteen annotated organs. Bowel and peritoneum, and bones and soft
/// tissues, are separate organs here.
pub const DEFAULT_ORGANS: [(&str, f64); 13] = [
    ("liver", 0.30),
    ("lungs", 0.25),
    ("pleura", 0.10),
    ("thoracic nodes", 0.20),
    ("spleen", 0.05),
    ("adrenal glands", 0.08),
    ("renal", 0.06),
    ("abdominopelvic nodes", 0.20),
    ("pelvic organs", 0.08),
    ("bowel", 0.07),
    ("peritoneum", 0.12),
    ("bones", 0.22),
    ("soft tissues", 0.10),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub organs: Vec<OrganSpec>,
    pub patients: usize,
    /// Inclusive range.
    pub reports_per_patient: (usize, usize),
    /// Per-report probability that metastatic disease in an organ resolves.
    pub resolve_rate: f64,
    /// Fraction of healthy-organ mentions phrased as explicit negations
    /// (the rest are benign findings).
    pub negation_rate: f64,
    /// Fraction of organ mentions replaced by a hedged, state-agnostic finding.
    pub hedge_rate: f64,
    /// Probability that a report without transitions collapses to a
    /// non-informative impression.
    pub uninformative_rate: f64,
    /// Seeds the nonce words used in filler sentences.
    pub vocab_seed: u64,
    pub id_prefix: String,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            organs: DEFAULT_ORGANS
                .iter()
                .map(|&(name, positive_rate)| OrganSpec {
                    name: name.to_string(),
                    positive_rate,
                })
                .collect(),
            patients: 300,
            reports_per_patient: (1, 5),
            resolve_rate: 0.2,
            negation_rate: 0.5,
            hedge_rate: 0.08,
            uninformative_rate: 0.15,
            vocab_seed: 7,
            id_prefix: "p".to_string(),
        }
    }
}

impl CorpusConfig {
    pub fn organ_names(&self) -> Vec<String> {
        self.organs.iter().map(|o| o.name.clone()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.organs.is_empty() {
            return Err(Error::config("organs", "at least one organ is required"));
        }
        let mut seen = std::collections::HashSet::new();
        for o in &self.organs {
            if !seen.insert(o.name.as_str()) {
                return Err(Error::config("organs", format!("duplicate organ `{}`", o.name)));
            }
            if templates::terms(&o.name).is_none() {
                return Err(Error::config("organs", format!("no vocabulary for organ `{}`", o.name)));
            }
            if !(0.0..1.0).contains(&o.positive_rate) {
                return Err(Error::config(format!("positive_rate.{}", o.name), "must lie in [0, 1)"));
            }
            if onset_rate(o.positive_rate, self.resolve_rate) > 1.0 {
                return Err(Error::config(
                    format!("positive_rate.{}", o.name),
                    "too high for the configured resolve_rate",
                ));
            }
        }
        if self.patients < 2 {
            return Err(Error::config("patients", "need at least 2 patients"));
        }
        let (lo, hi) = self.reports_per_patient;
        if lo == 0 || hi < lo {
            return Err(Error::config("reports_per_patient", "need 1 <= min <= max"));
        }
        for (field, v) in [
            ("resolve_rate", self.resolve_rate),
            ("negation_rate", self.negation_rate),
            ("hedge_rate", self.hedge_rate),
            ("uninformative_rate", self.uninformative_rate),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(field, "must lie in [0, 1]"));
            }
        }
        if self.resolve_rate <= 0.0 {
            return Err(Error::config("resolve_rate", "must be positive"));
        }
        Ok(())
    }
}

/// P(0 → 1) that keeps the chain's stationary positive probability at `rate`.
fn onset_rate(rate: f64, resolve: f64) -> f64 {
    resolve * rate / (1.0 - rate)
}

/// Renders the corpus. A pure function of `(config, seed)`; patient `i`
/// draws from its own ChaCha stream so patients could be generated in any
/// order.
pub fn generate_corpus(config: &CorpusConfig, seed: u64) -> Result<Vec<Report>> {
    config.validate()?;
    let lexicon = Lexicon::new(config.vocab_seed);
    let width = config.patients.to_string().len().max(4);
    let mut reports = Vec::new();
    for p in 0..config.patients {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(p as u64);
        let patient_id = format!("{}{:0width$}", config.id_prefix, p);
        let (lo, hi) = config.reports_per_patient;
        let count = rng.random_range(lo..=hi);
        let mut state: Vec<bool> = config.organs.iter().map(|o| rng.random_bool(o.positive_rate)).collect();
        // the first impression refers back to an unseen prior study
        let mut prev: Vec<Option<bool>> = vec![None; config.organs.len()];
        for k in 0..count {
            if k > 0 {
                for (i, o) in config.organs.iter().enumerate() {
                    prev[i] = Some(state[i]);
                    let flip = if state[i] {
                        config.resolve_rate
                    } else {
                        onset_rate(o.positive_rate, config.resolve_rate)
                    };
                    if rng.random_bool(flip.min(1.0)) {
                        state[i] = !state[i];
                    }
                }
            }
            let text = render(config, &lexicon, &state, &prev, &mut rng);
            let labels = config
                .organs
                .iter()
                .zip(&state)
                .map(|(o, &s)| (o.name.clone(), u8::from(s)))
                .collect();
            reports.push(Report {
                id: format!("{patient_id}-{k}"),
                patient_id: patient_id.clone(),
                text,
                labels,
                label_source: LabelSource::Human,
            });
        }
    }
    Ok(reports)
}

const MAX_MENTIONS: usize = 4;

fn render(
    config: &CorpusConfig,
    lexicon: &Lexicon,
    state: &[bool],
    prev: &[Option<bool>],
    rng: &mut ChaCha8Rng,
) -> String {
    let changed = state.iter().zip(prev).any(|(&s, p)| p.is_some_and(|p| p != s));
    let mut sentences: Vec<String> = Vec::new();
    if !changed && prev[0].is_some() && rng.random_bool(config.uninformative_rate) {
        sentences.push(lexicon.generic(state.iter().any(|&s| s), rng));
        return lexicon.assemble(&sentences, false);
    }
    let mut mentions: Vec<(usize, Finding)> = Vec::new();
    for (i, (&s, p)) in state.iter().zip(prev).enumerate() {
        let (finding, mention_p) = match (p, s) {
            (None, true) => {
                if rng.random_bool(0.5) {
                    (Finding::New, 0.9)
                } else {
                    (Finding::Stable, 0.75)
                }
            }
            (Some(false), true) => (Finding::New, 0.92),
            (Some(true), true) => (Finding::Stable, 0.75),
            (Some(true), false) => (Finding::Resolved, 0.8),
            (_, false) => {
                let f = if rng.random_bool(config.negation_rate) {
                    Finding::Negated
                } else {
                    Finding::Benign
                };
                (f, 0.06)
            }
        };
        if rng.random_bool(mention_p) {
            let finding = if rng.random_bool(config.hedge_rate) {
                Finding::Hedged
            } else {
                finding
            };
            mentions.push((i, finding));
        }
    }
    // shuffle, then keep the first few: dropped mentions become label noise
    for i in (1..mentions.len()).rev() {
        let j = rng.random_range(0..=i);
        mentions.swap(i, j);
    }
    mentions.truncate(MAX_MENTIONS);
    // new disease is listed first, as a radiologist would
    mentions.sort_by_key(|(_, f)| *f != Finding::New);
    for (i, f) in mentions {
        sentences.push(lexicon.finding(&config.organs[i].name, f, rng));
    }
    if sentences.is_empty() {
        sentences.push(lexicon.generic(state.iter().any(|&s| s), rng));
    }
    if rng.random_bool(0.3) {
        sentences.push(lexicon.filler(rng));
    }
    lexicon.assemble(&sentences, true)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let cfg = CorpusConfig {
            patients: 20,
            ..CorpusConfig::default()
        };
        assert_eq!(generate_corpus(&cfg, 5).unwrap(), generate_corpus(&cfg, 5).unwrap());
        assert_ne!(generate_corpus(&cfg, 5).unwrap(), generate_corpus(&cfg, 6).unwrap());
    }

    #[test]
    fn zero_rate_gives_all_negative() {
        let mut cfg = CorpusConfig {
            patients: 50,
            ..CorpusConfig::default()
        };
        for o in &mut cfg.organs {
            o.positive_rate = 0.0;
        }
        let reports = generate_corpus(&cfg, 1).unwrap();
        assert!(reports.iter().all(|r| r.labels.values().all(|&y| y == 0)));
    }

    #[test]
    fn rejects_bad_config() {
        let mut cfg = CorpusConfig::default();
        cfg.patients = 1;
        assert!(matches!(generate_corpus(&cfg, 0), Err(Error::InvalidConfig { .. })));
        let mut cfg = CorpusConfig::default();
        cfg.organs[0].positive_rate = 1.0;
        assert!(generate_corpus(&cfg, 0).is_err());
        let mut cfg = CorpusConfig::default();
        cfg.organs.push(OrganSpec {
            name: "heart".into(),
            positive_rate: 0.1,
        });
        assert!(generate_corpus(&cfg, 0).is_err());
    }
}
