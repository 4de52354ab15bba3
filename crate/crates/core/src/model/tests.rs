use super::*;
use crate::corpus::{Dialogue, Tokenizer};
use crate::encode::{encode_pair, MlmMasker};
use alloc::string::ToString;

fn vocab() -> Vocabulary {
    let words = "the cat sat on a mat dog ran far away";
    let d = Dialogue::new(alloc::vec![words.to_string()], "yes no", true);
    Vocabulary::build(&[d], &Tokenizer::default(), 1, None).unwrap()
}

fn tiny(vocab: &Vocabulary) -> ModelConfig {
    ModelConfig {
        layers: 2,
        heads: 2,
        hidden: 16,
        ffn_multiplier: 2,
        vocab_size: vocab.len(),
        max_position: 32,
        segment_types: 2,
        dropout: 0.0,
        tie_mlm_decoder: true,
    }
}

fn batch(vocab: &Vocabulary, len: usize) -> Vec<EncodedInstance> {
    let ctx = |s: &str| alloc::vec![s.to_string()];
    alloc::vec![
        encode_pair(&ctx("the cat sat"), "on a mat", vocab, len, true).unwrap(),
        encode_pair(&ctx("a dog ran"), "far away", vocab, len, false).unwrap(),
        encode_pair(&[String::from("the dog"), String::from("sat on")], "yes", vocab, len, true).unwrap(),
    ]
}

#[test]
fn init_is_seeded() {
    let v = vocab();
    let a = Model::for_vocab(tiny(&v), &v, 3).unwrap();
    let b = Model::for_vocab(tiny(&v), &v, 3).unwrap();
    let c = Model::for_vocab(tiny(&v), &v, 4).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn init_scheme() {
    let v = vocab();
    let m = Model::for_vocab(tiny(&v), &v, 3).unwrap();
    for (name, _, values) in m.tensors() {
        if name.ends_with(".gain") {
            assert!(values.iter().all(|&x| x == 1.0), "{name}");
        } else if name.ends_with(".bias") {
            assert!(values.iter().all(|&x| x == 0.0), "{name}");
        } else {
            assert!(values.iter().all(|&x| x.abs() <= 2.0 * INIT_STD), "{name}");
            let mean = values.iter().sum::<f64>() / values.len() as f64;
            assert!(mean.abs() < 0.01, "{name}");
        }
    }
}

#[test]
fn heads_must_divide_hidden() {
    let v = vocab();
    let cfg = ModelConfig {
        hidden: 64,
        heads: 7,
        ..tiny(&v)
    };
    assert!(matches!(Model::init(cfg, 0), Err(Error::InvalidConfig(_))));
}

#[test]
fn zero_weights_give_even_odds() {
    let v = vocab();
    let mut m = Model::for_vocab(tiny(&v), &v, 1).unwrap();
    m.params_mut().iter_mut().for_each(|p| *p = 0.0);
    let out = m.forward(&batch(&v, 16)).unwrap();
    for logits in &out.nsp_logits {
        assert_eq!(logits[0], logits[1]);
        assert_eq!(probability_of_next(*logits), 0.5);
    }
    let ctx = [String::from("the cat")];
    assert_eq!(m.nsp_score(&ctx, "sat", &v, 16).unwrap(), 0.5);
}

#[test]
fn output_shapes() {
    let v = vocab();
    let m = Model::for_vocab(tiny(&v), &v, 1).unwrap();
    let out = m.forward(&batch(&v, 16)).unwrap();
    assert_eq!(out.nsp_logits.len(), 3);
    assert!(out.mlm_logits.iter().all(|l| l.len() == 16 * v.len()));
}

#[test]
fn batch_permutation_permutes_outputs() {
    let v = vocab();
    let m = Model::for_vocab(tiny(&v), &v, 1).unwrap();
    let b = batch(&v, 16);
    let reversed: Vec<_> = b.iter().rev().cloned().collect();
    let x = m.forward(&b).unwrap();
    let y = m.forward(&reversed).unwrap();
    for i in 0..b.len() {
        assert_eq!(x.nsp_logits[i], y.nsp_logits[b.len() - 1 - i]);
        assert_eq!(x.mlm_logits[i], y.mlm_logits[b.len() - 1 - i]);
    }
}

#[test]
fn padding_columns_do_not_change_nsp_logits() {
    let v = vocab();
    let m = Model::for_vocab(tiny(&v), &v, 5).unwrap();
    let short = batch(&v, 12);
    let long: Vec<_> = short.iter().map(|i| i.padded_to(30)).collect();
    let a = m.forward(&short).unwrap();
    let b = m.forward(&long).unwrap();
    for (x, y) in a.nsp_logits.iter().zip(&b.nsp_logits) {
        assert!((x[0] - y[0]).abs() < 1e-5 && (x[1] - y[1]).abs() < 1e-5);
    }
    // the prefix-only fast path agrees with the full forward pass
    for (inst, full) in long.iter().zip(&b.nsp_logits) {
        let fast = m.nsp_logits(inst).unwrap();
        assert!((fast[0] - full[0]).abs() < 1e-12);
    }
}

#[test]
fn too_long_sequences_are_rejected() {
    let v = vocab();
    let m = Model::for_vocab(tiny(&v), &v, 1).unwrap();
    let b = batch(&v, 40);
    assert!(matches!(m.forward(&b), Err(Error::SequenceTooLong { len: 40, max: 32 })));
}

#[test]
fn fingerprint_is_checked() {
    let v = vocab();
    let m = Model::for_vocab(tiny(&v), &v, 1).unwrap();
    let other = Vocabulary::build(
        &[Dialogue::new(alloc::vec!["zebra".into()], "quux", true)],
        &Tokenizer::default(),
        1,
        None,
    )
    .unwrap();
    assert!(matches!(
        m.nsp_score(&[String::from("x")], "y", &other, 16),
        Err(Error::FingerprintMismatch { .. })
    ));
}

#[test]
fn tensors_roundtrip_and_missing_arrays_are_named() {
    let v = vocab();
    let m = Model::for_vocab(tiny(&v), &v, 9).unwrap();
    let mut map: BTreeMap<String, (Vec<usize>, Vec<f64>)> = m
        .tensors()
        .map(|(n, s, x)| (n.to_string(), (s.to_vec(), x.to_vec())))
        .collect();
    let back = Model::from_tensors(m.config().clone(), &map, m.vocab_fingerprint().into(), m.provenance.clone()).unwrap();
    assert_eq!(back, m);

    map.remove("mlm.output.bias");
    map.remove("mlm.norm.gain");
    let err = Model::from_tensors(m.config().clone(), &map, String::new(), Provenance::default()).unwrap_err();
    match err {
        Error::MissingWeights(names) => {
            assert_eq!(names, ["mlm.norm.gain".to_string(), "mlm.output.bias".to_string()])
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn untied_decoder_has_its_own_weights() {
    let v = vocab();
    let cfg = ModelConfig {
        tie_mlm_decoder: false,
        ..tiny(&v)
    };
    let m = Model::for_vocab(cfg, &v, 1).unwrap();
    assert_eq!(m.layout().get("mlm.decoder.weight").unwrap().shape, [v.len(), 16]);
}

fn masked_batch(v: &Vocabulary) -> Vec<EncodedInstance> {
    let masker = MlmMasker::new(0.4, v.len()).unwrap();
    batch(v, 16)
        .iter()
        .enumerate()
        .map(|(i, inst)| crate::encode::apply_mlm_mask(inst, &masker, i as u64 + 1))
        .collect()
}

/// Central differences on a sample of coordinates, for both tied and untied decoders.
#[test]
fn gradients_match_finite_differences() {
    let v = vocab();
    for tie in [true, false] {
        let cfg = ModelConfig {
            tie_mlm_decoder: tie,
            ..tiny(&v)
        };
        let mut m = Model::for_vocab(cfg, &v, 21).unwrap();
        // larger weights make every path contribute measurably
        m.params_mut().iter_mut().for_each(|p| *p *= 10.0);
        let b = masked_batch(&v);
        assert!(b.iter().map(|i| i.masked_positions()).sum::<usize>() > 0);
        let w = LossWeights { nsp: 1.0, mlm: 0.7 };
        let mut grad = alloc::vec![0.0; m.params().len()];
        m.loss_and_grad(&b, w, &mut grad, None).unwrap();

        let step = (m.params().len() / 97).max(1);
        let mut checked = 0;
        for idx in (0..m.params().len()).step_by(step) {
            let orig = m.params()[idx];
            let h = 1e-5;
            m.params_mut()[idx] = orig + h;
            let up = m.loss(&b, w).unwrap().total;
            m.params_mut()[idx] = orig - h;
            let down = m.loss(&b, w).unwrap().total;
            m.params_mut()[idx] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grad[idx];
            let denom = analytic.abs().max(numeric.abs()).max(1e-6);
            assert!(
                (analytic - numeric).abs() / denom < 1e-3,
                "tie={tie} idx={idx}: analytic {analytic} numeric {numeric}"
            );
            checked += 1;
        }
        assert!(checked >= 90);
    }
}

#[test]
fn loss_terms_respect_weights() {
    let v = vocab();
    let m = Model::for_vocab(tiny(&v), &v, 2).unwrap();
    let b = masked_batch(&v);
    let both = m.loss(&b, LossWeights { nsp: 1.0, mlm: 0.5 }).unwrap();
    assert!((both.total - (both.nsp + 0.5 * both.mlm)).abs() < 1e-12);
    let nsp_only = m.loss(&b, LossWeights { nsp: 1.0, mlm: 0.0 }).unwrap();
    assert_eq!(nsp_only.total, nsp_only.nsp);
    assert_eq!(nsp_only.mlm, 0.0);
    // untrained model: NSP loss near ln 2, MLM loss near ln |V|
    assert!((both.nsp - core::f64::consts::LN_2).abs() < 0.05);
    assert!((both.mlm - libm::log(v.len() as f64)).abs() < 0.3);
}
