use super::*;
use crate::data::{encode_examples, generate_world, Vocab, WorldConfig};
use crate::model::ModelConfig;

fn setup(n: usize) -> (Vec<Example>, ModelConfig) {
    let wc = WorldConfig {
        n_scenes: n,
        region_dim: 16,
        ..WorldConfig::default()
    };
    let corpus = generate_world(5, &wc).unwrap();
    let vocab = Vocab::build(&corpus).unwrap();
    let answers = corpus.answer_set();
    let ex = encode_examples(&corpus, &vocab, &answers).unwrap();
    let cfg = ModelConfig::tiny(vocab.len(), wc.shapes.len(), 16);
    (ex, cfg)
}

fn cfg(steps: u64) -> PretrainConfig {
    PretrainConfig {
        steps,
        batch_size: 4,
        adam: AdamConfig::with_lr(1e-3),
        seed: 11,
        ..PretrainConfig::default()
    }
}

fn bits(rows: &[MetricsRow]) -> Vec<[u64; 7]> {
    rows.iter()
        .map(|r| {
            let l = r.loss;
            [l.total, l.mlm, l.moc, l.mrpg, l.ism, l.msg, r.grad_norm].map(f64::to_bits)
        })
        .collect()
}

#[test]
fn fixed_seed_fixes_metrics() {
    let (ex, mc) = setup(10);
    let (_, a) = pretrain(&ex, Model::new(mc.clone(), 1).unwrap(), &cfg(6)).unwrap();
    let (_, b) = pretrain(&ex, Model::new(mc, 1).unwrap(), &cfg(6)).unwrap();
    assert_eq!(bits(&a), bits(&b));
    let mut sa = Vec::new();
    write_metrics(&mut sa, &a).unwrap();
    assert!(String::from_utf8(sa).unwrap().starts_with(METRICS_HEADER));
}

#[test]
fn resume_is_bitwise() {
    let (ex, mc) = setup(10);
    let full = cfg(12);
    let (_, straight) = pretrain(&ex, Model::new(mc.clone(), 1).unwrap(), &full).unwrap();

    let mut t = Trainer::new(Model::new(mc, 1).unwrap(), ex.len(), cfg(5)).unwrap();
    t.run(&ex, |_, _| Ok(())).unwrap();
    let bytes = t.checkpoint().to_bytes().unwrap();
    let ck = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(ck.to_bytes().unwrap(), bytes);
    let mut r = Trainer::resume(&ck, ex.len(), full).unwrap();
    let tail = r.run(&ex, |_, _| Ok(())).unwrap();
    assert_eq!(tail.len(), 7);
    assert_eq!(bits(&tail), bits(&straight[5..]));
}

#[test]
fn diverging_run_names_tensor() {
    let (ex, mc) = setup(6);
    let mut m = Model::new(mc, 1).unwrap();
    let id = m.params.id("embed.w_r").unwrap();
    m.params.get_mut(id).data_mut()[3] = f32::NAN;
    let err = pretrain(&ex, m, &cfg(1)).unwrap_err();
    match &err {
        Error::Diverged { step: 0, tensor, .. } => assert!(tensor.contains("embed.w_r"), "{err}"),
        _ => panic!("unexpected {err}"),
    }
}

#[test]
fn zero_steps_is_noop() {
    let (ex, mc) = setup(6);
    let m = Model::new(mc, 1).unwrap();
    let (ck, rows) = pretrain(&ex, m.clone(), &cfg(0)).unwrap();
    assert!(rows.is_empty());
    assert_eq!(ck.meta.step, 0);
    for ((_, a), (_, b)) in ck.params.iter().zip(m.params.iter()) {
        assert_eq!(a.data(), b.data());
    }
}
