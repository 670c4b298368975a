use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{cls_rows_on, encode_on, linear, sigmoid, EncoderModel, TokenBatch, INIT_STD};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Adam, AdamConfig, Tape, Tensor};

use super::{LabelSource, Report, Vocabulary};

/// Anything that scores reports for a fixed list of organs.
pub trait Annotator {
    fn organs(&self) -> &[String];

    /// Positive-class probabilities, `[report][organ]` in `organs()` order.
    fn predict(&self, reports: &[Report]) -> Result<Vec<Vec<f64>>>;
}

/// Relabels `reports` for one organ with hard teacher labels (`p ≥ 0.5`).
/// The returned reports carry only that organ's label.
pub fn teacher_annotate(annotator: &dyn Annotator, reports: &[Report], organ: &str) -> Result<Vec<Report>> {
    let k = organ_index(annotator, organ)?;
    if reports.is_empty() {
        return Ok(Vec::new());
    }
    let probs = annotator.predict(reports)?;
    Ok(reports
        .iter()
        .zip(probs)
        .map(|(r, p)| relabel(r, [(organ.to_string(), p[k])]))
        .collect())
}

/// Relabels `reports` for every organ the annotator knows.
pub fn teacher_annotate_all(annotator: &dyn Annotator, reports: &[Report]) -> Result<Vec<Report>> {
    if reports.is_empty() {
        return Ok(Vec::new());
    }
    let organs = annotator.organs();
    let probs = annotator.predict(reports)?;
    Ok(reports
        .iter()
        .zip(probs)
        .map(|(r, p)| relabel(r, organs.iter().cloned().zip(p)))
        .collect())
}

fn organ_index(annotator: &dyn Annotator, organ: &str) -> Result<usize> {
    annotator
        .organs()
        .iter()
        .position(|o| o == organ)
        .ok_or_else(|| Error::UnknownOrgan(organ.to_string()))
}

fn relabel(r: &Report, probs: impl IntoIterator<Item = (String, f64)>) -> Report {
    Report {
        id: r.id.clone(),
        patient_id: r.patient_id.clone(),
        text: r.text.clone(),
        labels: probs.into_iter().map(|(o, p)| (o, u8::from(p >= 0.5))).collect(),
        label_source: LabelSource::Teacher,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            epochs: 6,
            batch_size: 32,
            lr: 1e-3,
            seed: 0,
        }
    }
}

const HEAD_WEIGHT: &str = "teacher.weight";
const HEAD_BIAS: &str = "teacher.bias";

/// A fine-tuned encoder with one logistic head per organ on the `[CLS]`
/// representation, trained jointly on gold labels for every organ.
#[derive(Debug, Clone)]
pub struct MultiHeadTeacher {
    model: EncoderModel,
    head: ParamStore,
    organs: Vec<String>,
    vocab: Vocabulary,
}

impl MultiHeadTeacher {
    /// Fine-tunes every parameter of `backbone` plus the heads with mean BCE
    /// over all (report, organ) pairs.
    pub fn train(
        mut backbone: EncoderModel,
        vocab: Vocabulary,
        gold: &[Report],
        organs: &[String],
        config: &TeacherConfig,
    ) -> Result<Self> {
        if gold.is_empty() {
            return Err(Error::EmptySplit("teacher"));
        }
        if organs.is_empty() {
            return Err(Error::config("organs", "teacher needs at least one organ"));
        }
        if config.batch_size == 0 {
            return Err(Error::config("teacher.batch_size", "must be at least 1"));
        }
        let n = organs.len();
        let d = backbone.config().d_model;
        let max_len = backbone.config().max_len;
        let mut labels = Vec::with_capacity(gold.len() * n);
        for r in gold {
            for o in organs {
                labels.push(if r.label(o)? { 1.0 } else { 0.0 });
            }
        }
        let seqs = vocab.encode_all(gold, max_len);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut head = ParamStore::new();
        head.insert(HEAD_WEIGHT, Tensor::randn(&[d, n], INIT_STD, &mut rng));
        head.insert(HEAD_BIAS, Tensor::zeros(&[n]));
        backbone.params_mut().set_all_trainable(true);
        let mut adam = Adam::new(AdamConfig::with_lr(config.lr));
        let mut order: Vec<usize> = (0..gold.len()).collect();
        for _ in 0..config.epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(config.batch_size) {
                let batch = TokenBatch::from_sequences(&chunk.iter().map(|&i| &seqs[i]).collect::<Vec<_>>());
                let y: Vec<f64> = chunk
                    .iter()
                    .flat_map(|&i| labels[i * n..(i + 1) * n].iter().copied())
                    .collect();
                let mut tape = Tape::<f32>::new();
                let bound = backbone.params().bind(&mut tape, true);
                let head_bound = head.bind(&mut tape, true);
                let h = encode_on(&mut tape, backbone.config(), &bound, &batch, None, None)?;
                let cls = cls_rows_on(&mut tape, h)?;
                let logits = linear(&mut tape, cls, head_bound.get(HEAD_WEIGHT)?, head_bound.get(HEAD_BIAS)?)?;
                let logits = tape.reshape(logits, &[chunk.len() * n])?;
                let loss = tape.bce_with_logits(logits, &y)?;
                tape.backward(loss)?;
                backbone.params_mut().collect_grads(&tape, &bound);
                head.collect_grads(&tape, &head_bound);
                backbone.params_mut().adam_step(&mut adam)?;
                head.adam_step(&mut adam)?;
            }
        }
        Ok(Self {
            model: backbone,
            head,
            organs: organs.to_vec(),
            vocab,
        })
    }

    pub fn model(&self) -> &EncoderModel {
        &self.model
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }
}

const INFERENCE_BATCH: usize = 64;

impl Annotator for MultiHeadTeacher {
    fn organs(&self) -> &[String] {
        &self.organs
    }

    fn predict(&self, reports: &[Report]) -> Result<Vec<Vec<f64>>> {
        let n = self.organs.len();
        let seqs = self.vocab.encode_all(reports, self.model.config().max_len);
        let mut out = Vec::with_capacity(reports.len());
        for chunk in seqs.chunks(INFERENCE_BATCH) {
            let batch = TokenBatch::from_sequences(chunk);
            let mut tape = Tape::<f32>::new();
            let bound = self.model.params().bind(&mut tape, false);
            let head = self.head.bind(&mut tape, false);
            let h = encode_on(&mut tape, self.model.config(), &bound, &batch, None, None)?;
            let cls = cls_rows_on(&mut tape, h)?;
            let logits = linear(&mut tape, cls, head.get(HEAD_WEIGHT)?, head.get(HEAD_BIAS)?)?;
            out.extend(
                tape.value(logits)
                    .chunks(n)
                    .map(|row| row.iter().map(|&l| sigmoid(l as f64)).collect()),
            );
        }
        Ok(out)
    }
}
