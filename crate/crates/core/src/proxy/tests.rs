use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::data::{encode_examples, generate_world, BatchMode, BatchStream, Vocab, WorldConfig};
use crate::model::{bidirectional_masks, causal_masks, ModelConfig, RegionInput};
use crate::tensor::gradcheck::{check_gradients, GradCheckConfig};
use crate::tensor::ParamStore;

struct Fixture {
    examples: Vec<Example>,
    vocab: usize,
    model: Model<f64>,
}

fn fixture(n: usize, init_range: f64) -> Fixture {
    let world = WorldConfig {
        n_scenes: n,
        region_dim: 12,
        ..Default::default()
    };
    let c = generate_world(5, &world).unwrap();
    let v = Vocab::build(&c).unwrap();
    let examples = encode_examples(&c, &v, &c.answer_set()).unwrap();
    let mut cfg = ModelConfig::tiny(v.len(), 5, 12);
    cfg.init_range = init_range;
    Fixture {
        examples,
        vocab: v.len(),
        model: Model::new(cfg, 1).unwrap(),
    }
}

fn batch(f: &Fixture, size: usize, seed: u64) -> Batch {
    let mut s = BatchStream::new(f.examples.len(), size, BatchMode::Pretrain, seed).unwrap();
    s.next_batch(&f.examples, &MaskingConfig::default(), f.vocab, None).unwrap()
}

fn zero(m: &mut Model<f64>, ids: &[crate::tensor::ParamId]) {
    for &id in ids {
        m.params.get_mut(id).data_mut().fill(0.0);
    }
}

#[test]
fn uniform_logits_give_log_vocab() {
    let mut f = fixture(4, 0.3);
    let (ww, lb) = (f.model.ids.embed.w_w, f.model.ids.lm_bias);
    let (ow, ob) = (f.model.ids.gru.out_w, f.model.ids.gru.out_b);
    let (mw, mb) = (f.model.ids.moc_w, f.model.ids.moc_b);
    zero(&mut f.model, &[ww, lb, ow, ob, mw, mb]);
    let m = &f.model;
    let ex = &f.examples[0];
    let ln_v = (f.vocab as f64).ln();
    let mut g = Graph::new();

    let masks = causal_masks(ex.caption.valid_len - 2, ex.regions.len());
    let o = m.forward_full(&mut g, &ex.regions, &ex.caption, &masks, None).unwrap();
    let msg = loss_msg(&mut g, m, o.dec_words, &ex.caption, &masks).unwrap();
    assert!((g.scalar(msg) - ln_v).abs() < 1e-4);

    let plan = plan_masks(ex.regions.len(), ex.caption.valid_len - 2, f.vocab, &mut ChaCha8Rng::seed_from_u64(0), &MaskingConfig::default()).unwrap();
    let mlm = loss_mlm(&mut g, m, o.dec_words, &plan, &ex.caption).unwrap();
    assert!((g.scalar(mlm) - ln_v).abs() < 1e-4);

    let phrases: Vec<&[usize]> = ex.phrases.iter().map(Vec::as_slice).collect();
    let rows: Vec<usize> = (1..=ex.regions.len()).collect();
    let st = g.gather(o.dec_regions, &rows).unwrap();
    let mrpg = loss_mrpg(&mut g, m, st, &phrases).unwrap();
    assert!((g.scalar(mrpg) - ln_v).abs() < 1e-4);

    let one_hot = [1.0f32, 0.0, 0.0, 0.0, 0.0];
    let moc = loss_moc(&mut g, m, st, &vec![&one_hot[..]; rows.len()]).unwrap();
    assert!((g.scalar(moc) - 5f64.ln()).abs() < 1e-4);
}

#[test]
fn certain_predictions_give_zero_loss() {
    let f = fixture(2, 0.3);
    let m = &f.model;
    let mut g = Graph::<f64>::new();
    // Hand-built logits: probability 1 on the target.
    let z = g.constant(Tensor::matrix(2, 4, vec![0.0, 0.0, 800.0, 0.0, 900.0, 0.0, 0.0, 0.0]).unwrap());
    let nll = g.nll_rows(z, &[2, 0]).unwrap();
    let t = Terms {
        parts: vec![nll],
        count: 2,
        offset: 0.0,
    };
    let l = t.pool(&mut g).unwrap();
    assert_eq!(g.scalar(l), 0.0);
    let _ = m;
}

#[test]
fn single_token_phrase_with_certain_head_has_zero_loss() {
    let mut f = fixture(2, 0.3);
    let (ow, ob) = (f.model.ids.gru.out_w, f.model.ids.gru.out_b);
    zero(&mut f.model, &[ow]);
    f.model.params.get_mut(ob).data_mut()[7] = 1e4;
    let m = &f.model;
    let mut g = Graph::new();
    let st = g.constant(Tensor::full(&[1, 8], 0.1));
    let l = loss_mrpg(&mut g, m, st, &[&[7]]).unwrap();
    assert!(g.scalar(l).abs() < 1e-12);
    assert!(loss_mrpg(&mut g, m, st, &[&[]]).is_err());
}

#[test]
fn ism_triplet_cases() {
    let mut g = Graph::<f64>::new();
    for (pos, neg, want) in [(0.9, 0.3, 0.0), (0.4, 0.4, 0.2), (0.1, 0.5, 0.6)] {
        let p = g.constant(Tensor::vector(vec![pos]).unwrap());
        let n = g.constant(Tensor::vector(vec![neg]).unwrap());
        let l = loss_ism(&mut g, p, n, 0.2).unwrap();
        assert!((g.scalar(l) - want).abs() < 1e-12, "{pos} {neg}");
    }
}

#[test]
fn msg_rejects_bidirectional_masks() {
    let f = fixture(2, 0.3);
    let ex = &f.examples[0];
    let mut g = Graph::new();
    let masks = bidirectional_masks(ex.caption.valid_len - 2, ex.regions.len());
    let o = f.model.forward_full(&mut g, &ex.regions, &ex.caption, &masks, None).unwrap();
    let err = loss_msg(&mut g, &f.model, o.dec_words, &ex.caption, &masks).unwrap_err();
    assert!(err.to_string().contains("causal"));
}

#[test]
fn moc_rejects_non_distributions() {
    let f = fixture(2, 0.3);
    let mut g = Graph::new();
    let st = g.constant(Tensor::full(&[1, 8], 0.1));
    let bad = [0.5f32, 0.6, 0.0, 0.0, 0.0];
    assert!(matches!(loss_moc(&mut g, &f.model, st, &[&bad]), Err(Error::Contract(_))));
}

#[test]
fn mlm_ignores_unmasked_targets() {
    let f = fixture(2, 0.3);
    let ex = &f.examples[0];
    let n = ex.caption.valid_len - 2;
    let plan = MaskPlan {
        masked_regions: vec![0],
        region_replacements: vec![RegionReplacement::MaskFeature],
        masked_words: vec![1],
        word_actions: vec![WordAction::Mask],
        ism_negative: None,
    };
    let inp = plan.apply_words(&ex.caption).unwrap();
    let mut g = Graph::new();
    let o = f.model.forward_full(&mut g, &ex.regions, &inp, &bidirectional_masks(n, ex.regions.len()), None).unwrap();
    let a = loss_mlm(&mut g, &f.model, o.dec_words, &plan, &ex.caption).unwrap();
    let mut other = ex.caption.clone();
    for j in 2..=n {
        other.ids[j] = 4;
    }
    let b = loss_mlm(&mut g, &f.model, o.dec_words, &plan, &other).unwrap();
    assert_eq!(g.scalar(a), g.scalar(b));
}

/// Per-token generation losses for fixed targets under a given input.
fn msg_token_losses(m: &Model<f64>, regions: &RegionInput, input: &WordInput, targets: &WordInput) -> Vec<f64> {
    let mut g = Graph::new();
    let masks = AttentionMaskSet::causal(input.len(), regions.len() + 1, input.valid_len);
    let o = m.forward_full(&mut g, regions, input, &masks, None).unwrap();
    let n = targets.valid_len - 1;
    let st = g.slice_rows(o.dec_words, 0, n).unwrap();
    let z = m.lm_logits(&mut g, st).unwrap();
    let nll = g.nll_rows(z, &targets.ids[1..=n]).unwrap();
    g.value(nll).data().to_vec()
}

#[test]
fn msg_token_losses_are_causal() {
    let f = fixture(3, 0.5);
    let ex = &f.examples[0];
    let base = msg_token_losses(&f.model, &ex.regions, &ex.caption, &ex.caption);
    let n = ex.caption.valid_len;
    for j in 1..n - 1 {
        let mut w = ex.caption.clone();
        for k in j..n - 1 {
            w.ids[k] = 4 + (w.ids[k] + 5) % (f.vocab - 4);
        }
        let p = msg_token_losses(&f.model, &ex.regions, &w, &ex.caption);
        // token t is predicted from inputs < t
        for t in 1..=j {
            assert_eq!(base[t - 1].to_bits(), p[t - 1].to_bits(), "token {t}, perturbed from {j}");
        }
    }
}

#[test]
fn components_sum_and_ablations_are_orthogonal() {
    let f = fixture(6, 0.3);
    let b = batch(&f, 3, 2);
    let full = ProxyConfig::default();
    let mut g = Graph::new();
    let o = overall_loss(&mut g, &f.model, &f.examples, &b, &full).unwrap();
    let v = o.values(&g);
    for c in [v.mlm, v.moc, v.mrpg, v.ism, v.msg] {
        assert!(c >= 0.0);
    }
    assert!((v.total - (v.mlm + v.moc + v.mrpg + v.ism + v.msg)).abs() < 1e-6);
    for k in 0..5 {
        let mut cfg = full.clone();
        let flag = [
            &mut cfg.enable_mlm,
            &mut cfg.enable_moc,
            &mut cfg.enable_mrpg,
            &mut cfg.enable_ism,
            &mut cfg.enable_msg,
        ];
        *flag.into_iter().nth(k).unwrap() = false;
        let mut g2 = Graph::new();
        let w = overall_loss(&mut g2, &f.model, &f.examples, &b, &cfg).unwrap().values(&g2);
        let (a, c) = ([v.mlm, v.moc, v.mrpg, v.ism, v.msg], [w.mlm, w.moc, w.mrpg, w.ism, w.msg]);
        for i in 0..5 {
            if i == k {
                assert_eq!(c[i], 0.0);
            } else {
                assert_eq!(a[i].to_bits(), c[i].to_bits());
            }
        }
    }
}

#[test]
fn losses_and_scores_ignore_region_order() {
    let f = fixture(4, 0.5);
    let b = batch(&f, 4, 1);
    let cfg = ProxyConfig::default();
    let mut g = Graph::new();
    let base = overall_loss(&mut g, &f.model, &f.examples, &b, &cfg).unwrap().values(&g);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..5 {
        let mut ex = f.examples.clone();
        let mut pb = b.clone();
        for (k, &i) in b.indices.iter().enumerate() {
            let n = ex[i].regions.len();
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            ex[i].regions = ex[i].regions.permuted(&perm);
            ex[i].labels = perm.iter().map(|&p| f.examples[i].labels[p].clone()).collect();
            ex[i].phrases = perm.iter().map(|&p| f.examples[i].phrases[p].clone()).collect();
            pb.plans[k] = b.plans[k].permute_regions(&perm);
        }
        let mut g2 = Graph::new();
        let v = overall_loss(&mut g2, &f.model, &ex, &pb, &cfg).unwrap().values(&g2);
        assert_eq!(base.total.to_bits(), v.total.to_bits());
        assert_eq!(
            [base.mlm, base.moc, base.mrpg, base.ism, base.msg].map(f64::to_bits),
            [v.mlm, v.moc, v.mrpg, v.ism, v.msg].map(f64::to_bits)
        );
    }
}

#[test]
fn match_score_is_finite_and_deterministic() {
    let f = fixture(4, 0.02);
    let m = f.model.cast::<f32>();
    for ex in &f.examples {
        let run = || {
            let mut g = Graph::new();
            let masks = bidirectional_masks(ex.caption.valid_len - 2, ex.regions.len());
            let o = m.forward_full(&mut g, &ex.regions, &ex.caption, &masks, None).unwrap();
            let s = match_score(&mut g, &m, o.enc_obj, o.enc_words, ex.caption.valid_len).unwrap();
            g.scalar(s)
        };
        let s = run();
        assert!(s.is_finite());
        assert_eq!(s.to_bits(), run().to_bits());
    }
}

#[test]
fn full_objective_gradcheck() {
    let f = fixture(2, 0.5);
    let b = batch(&f, 2, 0);
    let cfg = ProxyConfig::default();
    let report = check_gradients(
        &f.model.params,
        |g, p: &ParamStore<f64>| {
            let m = f.model.with_params(p.clone());
            Ok(overall_loss(g, &m, &f.examples, &b, &cfg)?.total)
        },
        &GradCheckConfig::default(),
    )
    .unwrap();
    assert!(report.coordinates() >= 200);
    assert!(report.passed(), "{}", report.render());
}
