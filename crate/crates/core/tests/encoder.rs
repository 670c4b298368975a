use peftlab::encoder::{
    classifier_logits_on, encode_on, layer_prompts_on, multi_head_attention, EncoderModel, LayerPrompt, ModelConfig,
    PromptSet, TokenBatch, CLS_ID, MASK_ID,
};
use peftlab::params::Bound;
use peftlab::tensor::{grad_check, Tape, Tensor, DEFAULT_STEP};
use peftlab::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny(layers: usize, d: usize) -> ModelConfig {
    ModelConfig {
        layers,
        d_model: d,
        heads: 2,
        d_ff: 2 * d,
        vocab_size: 40,
        max_len: 12,
        ..ModelConfig::default()
    }
}

fn random_batch(rng: &mut ChaCha8Rng, batch: usize, cfg: &ModelConfig) -> TokenBatch {
    let seqs: Vec<Vec<u32>> = (0..batch)
        .map(|_| {
            let len = rng.random_range(2..=cfg.max_len);
            let mut s = vec![CLS_ID];
            s.extend((1..len).map(|_| rng.random_range(4..cfg.vocab_size as u32)));
            s
        })
        .collect();
    TokenBatch::from_sequences(&seqs)
}

/// Perturbs every parameter away from the tiny init so attention is not
/// near-uniform.
fn scrambled(cfg: ModelConfig, seed: u64) -> EncoderModel {
    let mut m = EncoderModel::new(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    for (_, t) in m.params_mut().iter_mut() {
        for x in t.data_mut() {
            *x += rng.random_range(-0.3f32..0.3);
        }
    }
    m
}

#[test]
fn empty_prompt_matches_no_prompt() {
    let cfg = tiny(2, 16);
    let model = scrambled(cfg.clone(), 3);
    let empty = PromptSet::zeros(cfg.layers, 0, cfg.d_model);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..20 {
        let b = random_batch(&mut rng, 3, &cfg);
        let a = model.encode(&b, None).unwrap();
        let p = model.encode(&b, Some(&empty)).unwrap();
        assert_eq!(a.shape(), p.shape());
        for (x, y) in a.data().iter().zip(p.data()) {
            assert!((x - y).abs() <= 1e-6);
        }
    }
}

#[test]
fn prompt_extends_keys_but_not_output() {
    let cfg = tiny(1, 8);
    let model = scrambled(cfg.clone(), 1);
    let prompts = PromptSet::random(1, 3, 8, 4);
    let batch = TokenBatch::from_sequences(&[vec![CLS_ID, 5, 6, 7, 8]]);
    let mut tape = Tape::<f32>::new();
    let bound = model.params().bind(&mut tape, false);
    let k = tape.param(&prompts.key, false);
    let v = tape.param(&prompts.value, false);
    let lp = layer_prompts_on(&mut tape, k, v).unwrap();
    let emb = {
        let ids: Vec<usize> = batch.ids.iter().map(|&i| i as usize).collect();
        let e = tape.gather_rows(bound.get("embeddings.token").unwrap(), &ids).unwrap();
        tape.reshape(e, &[1, 5, 8]).unwrap()
    };
    let out =
        peftlab::encoder::attention_with_prompts(&mut tape, &cfg, &bound, 0, emb, Some(&lp[0]), &batch.mask).unwrap();
    assert_eq!(tape.shape(out.weights), &[1, 2, 5, 8]);
    assert_eq!(tape.shape(out.output), &[1, 5, 8]);
    for row in tape.value(out.weights).chunks(8) {
        let s: f64 = row.iter().map(|&x| x as f64).sum();
        assert!((s - 1.0).abs() < 1e-6);
    }
    let h = model.encode(&batch, Some(&prompts)).unwrap();
    assert_eq!(h.shape(), &[1, 5, 8]);
}

#[test]
fn identical_values_give_identical_mixture() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (b, s, d, pl) = (2, 4, 6, 3);
    let u: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut tape = Tape::<f64>::new();
    let q = tape
        .leaf(
            vec![b, s, d],
            (0..b * s * d).map(|_| rng.random_range(-2.0..2.0)).collect(),
            false,
        )
        .unwrap();
    let k = tape
        .leaf(
            vec![b, s, d],
            (0..b * s * d).map(|_| rng.random_range(-2.0..2.0)).collect(),
            false,
        )
        .unwrap();
    let v = tape
        .leaf(
            vec![b, s, d],
            u.iter().cycle().take(b * s * d).copied().collect(),
            false,
        )
        .unwrap();
    let pk = tape
        .leaf(
            vec![pl, d],
            (0..pl * d).map(|_| rng.random_range(-2.0..2.0)).collect(),
            false,
        )
        .unwrap();
    let pv = tape
        .leaf(vec![pl, d], u.iter().cycle().take(pl * d).copied().collect(), false)
        .unwrap();
    let mask = vec![true, true, true, false, true, true, false, false];
    let (ctx, _) =
        multi_head_attention(&mut tape, 2, q, k, v, Some(&LayerPrompt { key: pk, value: pv }), &mask).unwrap();
    for row in tape.value(ctx).chunks(d) {
        for (x, y) in row.iter().zip(&u) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn padding_gets_zero_weight_and_prompts_stay_attendable() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (b, s, d, pl) = (2, 5, 4, 2);
    let mut tape = Tape::<f64>::new();
    let mut leaf = |shape: Vec<usize>| {
        let n = shape.iter().product();
        tape.leaf(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(), false)
            .unwrap()
    };
    let (q, k, v) = (leaf(vec![b, s, d]), leaf(vec![b, s, d]), leaf(vec![b, s, d]));
    let (pk, pv) = (leaf(vec![pl, d]), leaf(vec![pl, d]));
    let mask = vec![true, true, true, false, false, true, false, false, false, false];
    let (_, w) = multi_head_attention(&mut tape, 2, q, k, v, Some(&LayerPrompt { key: pk, value: pv }), &mask).unwrap();
    let t = pl + s;
    for (r, row) in tape.value(w).chunks(t).enumerate() {
        let item = r / (2 * s);
        let s1: f64 = row.iter().sum();
        assert!((s1 - 1.0).abs() < 1e-6);
        for j in 0..pl {
            assert!(row[j] > 0.0);
        }
        for j in 0..s {
            if !mask[item * s + j] {
                assert_eq!(row[pl + j], 0.0);
            }
        }
    }
}

#[test]
fn batch_order_does_not_matter() {
    let cfg = tiny(2, 8);
    let model = scrambled(cfg.clone(), 5);
    let prompts = PromptSet::random(2, 2, 8, 1);
    let seqs = vec![vec![CLS_ID, 4, 5, 6], vec![CLS_ID, 9, 8], vec![CLS_ID, 11, 12, 13, 14]];
    let rev: Vec<_> = seqs.iter().rev().cloned().collect();
    let a = model
        .classify(&TokenBatch::from_sequences(&seqs), Some(&prompts))
        .unwrap();
    let b = model
        .classify(&TokenBatch::from_sequences(&rev), Some(&prompts))
        .unwrap();
    for (x, y) in a.iter().zip(b.iter().rev()) {
        assert!((x - y).abs() < 1e-6);
    }
}

#[test]
fn changing_one_layer_prompt_changes_output() {
    let cfg = tiny(6, 8);
    let model = scrambled(cfg.clone(), 6);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let batch = random_batch(&mut rng, 2, &cfg);
    let p = PromptSet::random(6, 2, 8, 7);
    let mut q = p.clone();
    let (pl, d) = (2, 8);
    for x in &mut q.key.data_mut()[5 * pl * d..6 * pl * d] {
        *x += 0.5;
    }
    let a = model.encode(&batch, Some(&p)).unwrap();
    let b = model.encode(&batch, Some(&q)).unwrap();
    let max_diff = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0f32, f32::max);
    assert!(max_diff > 0.0);
}

#[test]
fn classify_range_and_determinism() {
    let cfg = tiny(2, 8);
    let mut model = scrambled(cfg.clone(), 2);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let batch = random_batch(&mut rng, 8, &cfg);
    let p1 = model.classify(&batch, None).unwrap();
    let p2 = model.classify(&batch, None).unwrap();
    assert_eq!(p1, p2);
    assert!(p1.iter().all(|&p| p > 0.0 && p < 1.0));

    for name in ["classifier.weight", "classifier.bias"] {
        model.params_mut().get_mut(name).unwrap().data_mut().fill(0.0);
    }
    assert!(model.classify(&batch, None).unwrap().iter().all(|&p| p == 0.5));
}

#[test]
fn encode_rejects_bad_batches() {
    let cfg = tiny(1, 8);
    let model = EncoderModel::new(cfg.clone(), 0).unwrap();
    let long = TokenBatch::from_sequences(&[vec![CLS_ID; cfg.max_len + 1]]);
    assert!(matches!(model.encode(&long, None), Err(Error::SequenceTooLong { .. })));
    let oov = TokenBatch::from_sequences(&[vec![CLS_ID, 1000]]);
    assert!(matches!(
        model.encode(&oov, None),
        Err(Error::TokenOutOfRange { id: 1000, .. })
    ));
    let wrong_d = PromptSet::random(1, 2, 6, 0);
    let ok = TokenBatch::from_sequences(&[vec![CLS_ID, 5]]);
    assert!(matches!(
        model.encode(&ok, Some(&wrong_d)),
        Err(Error::ShapeMismatch { .. })
    ));
}

fn masked_batch(targets: &[(usize, u32)], seq: &[u32]) -> TokenBatch {
    let mut ids = seq.to_vec();
    let mut t = vec![None; seq.len()];
    for &(pos, tok) in targets {
        ids[pos] = MASK_ID;
        t[pos] = Some(tok);
    }
    let mut b = TokenBatch::from_sequences(&[ids]);
    b.mlm_targets = Some(t);
    b
}

#[test]
fn mlm_loss_cases() {
    let cfg = tiny(2, 8);
    let mut model = scrambled(cfg.clone(), 4);
    for name in [
        "mlm.transform.weight",
        "mlm.transform.bias",
        "mlm.norm.gain",
        "mlm.norm.bias",
        "mlm.bias",
    ] {
        model.params_mut().get_mut(name).unwrap().data_mut().fill(0.0);
    }
    let batch = masked_batch(&[(1, 7), (3, 9)], &[CLS_ID, 7, 8, 9, 10]);
    let loss = model.mlm_loss(&batch).unwrap();
    assert!((loss - (cfg.vocab_size as f64).ln()).abs() < 1e-12, "{loss}");

    // the correct token dominates every masked slot
    let single = masked_batch(&[(2, 11)], &[CLS_ID, 5, 11, 6]);
    model.params_mut().get_mut("mlm.bias").unwrap().data_mut()[11] = 60.0;
    assert!(model.mlm_loss(&single).unwrap() < 1e-20);

    let none = masked_batch(&[], &[CLS_ID, 5, 6]);
    assert!(matches!(model.mlm_loss(&none), Err(Error::NoMaskedPositions)));
}

/// Classification loss on a 2-token input: gradients w.r.t. every prompt
/// tensor and the classifier head, and sampled coordinates of every
/// backbone tensor, against central differences.
#[test]
fn classifier_gradients_match_finite_differences() {
    let cfg = ModelConfig {
        layers: 2,
        d_model: 16,
        heads: 2,
        d_ff: 32,
        vocab_size: 20,
        max_len: 8,
        ..ModelConfig::default()
    };
    let model = scrambled(cfg.clone(), 12);
    let prompts = PromptSet::random(2, 3, 16, 13);
    let batch = TokenBatch::from_sequences(&[vec![CLS_ID, 7], vec![CLS_ID, 12]]);
    let names: Vec<String> = model.params().names().map(String::from).collect();
    let mut inputs: Vec<Tensor> = model.params().iter().map(|(_, t)| t.clone()).collect();
    inputs.push(prompts.key.clone());
    inputs.push(prompts.value.clone());
    let f = |tape: &mut Tape<f64>, vars: &[peftlab::tensor::Var]| {
        let mut bound = Bound::default();
        for (n, &v) in names.iter().zip(vars) {
            bound.insert(n.clone(), v);
        }
        let lp = layer_prompts_on(tape, vars[names.len()], vars[names.len() + 1])?;
        let h = encode_on(tape, &cfg, &bound, &batch, Some(&lp), None)?;
        let logits = classifier_logits_on(tape, &bound, h)?;
        tape.bce_with_logits(logits, &[1.0, 0.0])
    };
    let report = grad_check(f, &inputs, DEFAULT_STEP, Some(6), 0).unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn attention_maps_are_row_stochastic_and_skip_padding() {
    let cfg = tiny(2, 16);
    let model = scrambled(cfg.clone(), 4);
    let prompts = PromptSet::random(cfg.layers, 3, cfg.d_model, 2);
    let b = TokenBatch::from_sequences(&[vec![CLS_ID, 5, 6, 7], vec![CLS_ID, 8]]);
    let maps = model.attention_maps(&b, Some(&prompts)).unwrap();
    assert_eq!(maps.len(), cfg.layers);
    let (s, cols) = (4, 3 + 4);
    for m in &maps {
        assert_eq!(m.shape(), &[2, cfg.heads, s, cols]);
        for row in m.data().chunks(cols) {
            assert!((row.iter().sum::<f32>() - 1.0).abs() <= 1e-5);
        }
        // second sequence: token columns 2 and 3 are padding
        let second = &m.data()[cfg.heads * s * cols..];
        for row in second.chunks(cols) {
            assert_eq!(&row[3 + 2..], &[0.0, 0.0]);
        }
    }
    assert_eq!(
        model.attention_maps(&b, None).unwrap()[0].shape(),
        &[2, cfg.heads, s, s]
    );
}
