use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Finding {
    New,
    Stable,
    Resolved,
    /// Explicitly negated metastasis in a healthy organ.
    Negated,
    /// Benign or postoperative finding in a healthy organ.
    Benign,
    /// State-agnostic indeterminate finding.
    Hedged,
}

/// Adjectival surface forms per organ.
pub(crate) fn terms(organ: &str) -> Option<&'static [&'static str]> {
    Some(match organ {
        "liver" => &["hepatic", "liver"],
        "lungs" => &["pulmonary", "lung"],
        "pleura" => &["pleural"],
        "thoracic nodes" => &["mediastinal nodal", "hilar nodal", "thoracic nodal"],
        "spleen" => &["splenic"],
        "adrenal glands" => &["adrenal"],
        "renal" => &["renal", "kidney"],
        "abdominopelvic nodes" => &["retroperitoneal nodal", "mesenteric nodal", "pelvic nodal"],
        "pelvic organs" => &["adnexal", "uterine", "bladder"],
        "bowel" => &["bowel", "colonic"],
        "peritoneum" => &["peritoneal", "omental"],
        "bones" => &["osseous", "bone", "vertebral"],
        "soft tissues" => &["soft tissue", "subcutaneous"],
        _ => return None,
    })
}

const SIZES: [&str; 4] = ["small", "subcentimeter", "large", "multiple"];

const NEW: [&str; 4] = [
    "new {s} {o} lesions , consistent with metastases",
    "interval development of {o} metastases",
    "new {o} mass , concerning for metastatic disease",
    "new {s} {o} nodules , suspicious for metastases",
];

const STABLE: [&str; 6] = [
    "stable {o} metastases",
    "increased size of {o} metastatic lesions",
    "decreased size of {o} metastases , consistent with treatment response",
    "persistent {o} lesions , compatible with known metastatic disease",
    "similar appearance of treated {o} metastases",
    // persistent disease described only by what did not change
    "no evidence of new {o} lesion",
];

const RESOLVED: [&str; 3] = [
    "previously noted {o} lesions have resolved",
    "no residual {o} metastatic disease",
    "interval resolution of {o} metastases",
];

const NEGATED: [&str; 3] = [
    "no evidence of new {o} lesion",
    "no {o} metastases",
    "no suspicious {o} lesions",
];

const BENIGN: [&str; 5] = [
    "stable {s} {o} cyst",
    "stable tiny {o} nodules , likely benign",
    "{o} hemangioma , unchanged",
    "postoperative change at the {o} resection margin",
    "status post partial {o} resection with no evidence of recurrence",
];

const HEDGED: [&str; 3] = [
    "indeterminate {s} {o} lesion , attention on follow-up",
    "{o} lesion too small to characterize",
    "possible {o} metastasis , cannot exclude",
];

const GENERIC_NEGATIVE: [&str; 3] = [
    "no evidence of metastatic disease in the chest , abdomen or pelvis",
    "no acute findings",
    "no interval changes",
];

const GENERIC_ANY: [&str; 3] = [
    "no interval changes",
    "no new sites of disease",
    "stable appearance of known disease",
];

const FILLERS: [&str; 6] = [
    "correlation with endoscopy recommended",
    "email sent to <person>",
    "findings discussed with <person> on <date>",
    "status post {n} therapy",
    "status post right hemicolectomy",
    "mild {n} changes , unchanged",
];

const SYLLABLES: [&str; 12] = [
    "ra", "lo", "mi", "tex", "zan", "bi", "cor", "ul", "fen", "do", "pra", "vis",
];

pub(crate) struct Lexicon {
    nonce: Vec<String>,
}

impl Lexicon {
    pub(crate) fn new(vocab_seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(vocab_seed);
        let nonce = (0..24)
            .map(|_| {
                let n = rng.random_range(2..=3);
                (0..n)
                    .map(|_| *SYLLABLES.choose(&mut rng).expect("non-empty"))
                    .collect()
            })
            .collect();
        Self { nonce }
    }

    pub(crate) fn finding(&self, organ: &str, f: Finding, rng: &mut ChaCha8Rng) -> String {
        let pool: &[&str] = match f {
            Finding::New => &NEW,
            Finding::Stable => &STABLE,
            Finding::Resolved => &RESOLVED,
            Finding::Negated => &NEGATED,
            Finding::Benign => &BENIGN,
            Finding::Hedged => &HEDGED,
        };
        let template = pool.choose(rng).expect("non-empty");
        let term = terms(organ).and_then(|t| t.choose(rng)).copied().unwrap_or(organ);
        let size = SIZES.choose(rng).expect("non-empty");
        template.replace("{o}", term).replace("{s}", size)
    }

    /// An impression that names no organ.
    pub(crate) fn generic(&self, any_positive: bool, rng: &mut ChaCha8Rng) -> String {
        let pool: &[&str] = if any_positive { &GENERIC_ANY } else { &GENERIC_NEGATIVE };
        pool.choose(rng).expect("non-empty").to_string()
    }

    pub(crate) fn filler(&self, rng: &mut ChaCha8Rng) -> String {
        let t = FILLERS.choose(rng).expect("non-empty");
        t.replace("{n}", self.nonce.choose(rng).expect("non-empty"))
    }

    /// `since <date> , 1 . a . 2 . b .` or, unnumbered, `since <date> , a .`
    pub(crate) fn assemble(&self, sentences: &[String], numbered: bool) -> String {
        let mut out = String::from("since <date> ,");
        for (i, s) in sentences.iter().enumerate() {
            if numbered {
                out.push_str(&format!(" {} .", i + 1));
            }
            out.push(' ');
            out.push_str(s);
            out.push_str(" .");
        }
        out
    }
}
