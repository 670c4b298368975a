//! WebAssembly bindings for the static demo page in `www/`. Every export
//! takes plain values and returns a JSON string, so the same functions are
//! unit-tested natively.

use peftlab::corpus::{generate_corpus, CorpusConfig, OrganSpec, Report, Vocabulary};
use peftlab::diagnostics::scrambled_model;
use peftlab::encoder::{EncoderModel, ModelConfig, PromptSet, TokenBatch};
use peftlab::mixture::poly2_weights;
use peftlab::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use wasm_bindgen::prelude::*;

const MODEL_SEED: u64 = 11;
const MAX_LEN: usize = 24;

fn json<T: Serialize>(value: &T) -> String {
    serde_json::to_string(value).unwrap_or_else(|e| error(e))
}

fn error(e: impl std::fmt::Display) -> String {
    serde_json::json!({ "error": e.to_string() }).to_string()
}

#[derive(Serialize)]
struct Weights {
    poly2: Vec<f64>,
    softmax: Vec<f64>,
}

/// Mixture weights for comma- or space-separated scores: squared-score
/// normalization next to a softmax over the same scores.
#[wasm_bindgen]
pub fn mixture_weights(scores: &str) -> String {
    let parsed: Result<Vec<f64>, _> = scores
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(str::parse::<f64>)
        .collect();
    let s = match parsed {
        Ok(s) if !s.is_empty() => s,
        Ok(_) => return error("no scores"),
        Err(e) => return error(e),
    };
    let max = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = s.iter().map(|x| (x - max).exp()).collect();
    let z: f64 = exp.iter().sum();
    json(&Weights {
        poly2: poly2_weights(&s, 1e-12).0,
        softmax: exp.iter().map(|e| e / z).collect(),
    })
}

#[derive(Serialize)]
struct Sample {
    id: String,
    text: String,
    labels: Vec<(String, u8)>,
}

fn sample_config(patients: usize) -> CorpusConfig {
    CorpusConfig {
        patients,
        id_prefix: "demo".to_string(),
        ..CorpusConfig::default()
    }
}

/// Reports from `patients` synthetic patients.
#[wasm_bindgen]
pub fn sample_reports(seed: u64, patients: usize) -> String {
    match generate_corpus(&sample_config(patients.clamp(1, 20)), seed) {
        Ok(reports) => json(
            &reports
                .into_iter()
                .map(|r| Sample {
                    id: r.id,
                    labels: r.labels.into_iter().collect(),
                    text: r.text,
                })
                .collect::<Vec<_>>(),
        ),
        Err(e) => error(e),
    }
}

struct Demo {
    vocab: Vocabulary,
    model: EncoderModel,
}

impl Demo {
    fn build() -> peftlab::Result<Self> {
        let config = CorpusConfig {
            organs: vec![OrganSpec {
                name: "liver".to_string(),
                positive_rate: 0.3,
            }],
            ..sample_config(40)
        };
        let reports: Vec<Report> = generate_corpus(&config, 3)?;
        let model_config = ModelConfig {
            layers: 2,
            d_model: 16,
            heads: 2,
            d_ff: 32,
            vocab_size: 256,
            max_len: MAX_LEN,
            ..ModelConfig::default()
        };
        let vocab = Vocabulary::from_reports(&reports, model_config.vocab_size)?;
        let model = scrambled_model(&model_config, MODEL_SEED)?;
        Ok(Self { vocab, model })
    }
}

thread_local! {
    static DEMO: std::cell::OnceCell<peftlab::Result<Demo>> = const { std::cell::OnceCell::new() };
}

#[derive(Serialize)]
struct AttentionMap {
    /// Column labels: prompt slots first, then tokens.
    columns: Vec<String>,
    rows: Vec<String>,
    weights: Vec<Vec<f32>>,
    /// Share of each row's attention that lands on prompt columns.
    prompt_mass: Vec<f32>,
}

/// One head's attention over a random prompt and the encoded text, on a
/// small untrained encoder. `scale` is the standard deviation of the prompt
/// entries.
#[wasm_bindgen]
pub fn attention_map(text: &str, pl: usize, scale: f32, layer: usize, head: usize) -> String {
    DEMO.with(|cell| match cell.get_or_init(Demo::build) {
        Ok(demo) => match attention(demo, text, pl.min(16), scale, layer, head) {
            Ok(map) => json(&map),
            Err(e) => error(e),
        },
        Err(e) => error(e),
    })
}

fn attention(
    demo: &Demo,
    text: &str,
    pl: usize,
    scale: f32,
    layer: usize,
    head: usize,
) -> peftlab::Result<AttentionMap> {
    let config = demo.model.config();
    if layer >= config.layers || head >= config.heads {
        return Err(peftlab::Error::config(
            "layer",
            format!("model has {} layers and {} heads", config.layers, config.heads),
        ));
    }
    let ids = demo.vocab.encode(text, MAX_LEN);
    let batch = TokenBatch::from_sequences(&[ids.clone()]);
    let prompts = if pl == 0 {
        None
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(MODEL_SEED + 1);
        let shape = [config.layers, pl, config.d_model];
        Some(PromptSet::new(
            Tensor::randn(&shape, scale, &mut rng),
            Tensor::randn(&shape, scale, &mut rng),
        )?)
    };
    let maps = demo.model.attention_maps(&batch, prompts.as_ref())?;
    let map = &maps[layer];
    let (s, cols) = (map.shape()[2], map.shape()[3]);
    let start = head * s * cols;
    let weights: Vec<Vec<f32>> = map.data()[start..start + s * cols]
        .chunks(cols)
        .map(<[f32]>::to_vec)
        .collect();
    let tokens: Vec<String> = ids
        .iter()
        .map(|&id| demo.vocab.token(id).unwrap_or("[UNK]").to_string())
        .collect();
    let columns = (0..pl).map(|i| format!("p{i}")).chain(tokens.iter().cloned()).collect();
    Ok(AttentionMap {
        columns,
        rows: tokens,
        prompt_mass: weights.iter().map(|r| r[..pl].iter().sum()).collect(),
        weights,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::Value;

    fn parse(s: &str) -> Value {
        serde_json::from_str(s).unwrap()
    }

    #[test]
    fn weights_match_hand_values() {
        let v = parse(&mixture_weights("1, 2"));
        let poly: Vec<f64> = serde_json::from_value(v["poly2"].clone()).unwrap();
        assert!((poly[0] - 0.2).abs() < 1e-12 && (poly[1] - 0.8).abs() < 1e-12);
        let soft: Vec<f64> = serde_json::from_value(v["softmax"].clone()).unwrap();
        let e = std::f64::consts::E;
        assert!((soft[1] - e / (1.0 + e)).abs() < 1e-12);
        assert!(parse(&mixture_weights("1, x"))["error"].is_string());
        assert!(parse(&mixture_weights(" "))["error"].is_string());
    }

    #[test]
    fn samples_are_reproducible() {
        let a = sample_reports(5, 3);
        assert_eq!(a, sample_reports(5, 3));
        assert!(!parse(&a).as_array().unwrap().is_empty());
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let v = parse(&attention_map("stable hepatic lesions", 3, 0.5, 1, 1));
        let cols = v["columns"].as_array().unwrap();
        assert_eq!(cols.len(), 3 + v["rows"].as_array().unwrap().len());
        for row in v["weights"].as_array().unwrap() {
            let sum: f64 = row.as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).sum();
            assert!((sum - 1.0).abs() < 1e-5);
        }
        let none = parse(&attention_map("stable hepatic lesions", 0, 0.5, 0, 0));
        assert!(none["prompt_mass"]
            .as_array()
            .unwrap()
            .iter()
            .all(|m| m.as_f64() == Some(0.0)));
        assert!(parse(&attention_map("x", 1, 0.5, 9, 0))["error"].is_string());
    }
}
