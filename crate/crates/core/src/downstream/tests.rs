use super::*;
use crate::data::{encode_examples, generate_world, WorldConfig};
use crate::model::{CLS, MASK, PAD};

struct Fixture {
    examples: Vec<Example>,
    vocab: Vocab,
    config: ModelConfig,
}

fn fixture(n: usize) -> Fixture {
    let wc = WorldConfig {
        n_scenes: n,
        region_dim: 16,
        ..WorldConfig::default()
    };
    let corpus = generate_world(21, &wc).unwrap();
    let vocab = Vocab::build(&corpus).unwrap();
    let answers = corpus.answer_set();
    let examples = encode_examples(&corpus, &vocab, &answers).unwrap();
    let mut config = ModelConfig::tiny(vocab.len(), wc.shapes.len(), 16);
    config.num_answers = answers.len();
    Fixture {
        examples,
        vocab,
        config,
    }
}

#[test]
fn task_names_round_trip() {
    for t in Task::ALL {
        assert_eq!(t.name().parse::<Task>().unwrap(), t);
    }
    assert!("vcr".parse::<Task>().is_err());
}

#[test]
fn uniform_answer_logits_give_ln_a() {
    let mut g = Graph::<f64>::new();
    let a = 5;
    let z = g.input(Tensor::zeros(&[3, a]));
    let mut t = Tensor::zeros(&[3, a]);
    for r in 0..3 {
        t.data_mut()[r * a + r] = 1.0;
    }
    let ce = g.cross_entropy_rows(z, &t).unwrap();
    let loss = Terms {
        parts: vec![ce],
        count: 3,
        offset: 0.0,
    }
    .pool(&mut g)
    .unwrap();
    assert!((g.scalar(loss) - (a as f64).ln()).abs() < 1e-12);
}

#[test]
fn soft_answer_targets_follow_weights() {
    let f = fixture(4);
    let m = Model::<f64>::new(f.config.clone(), 2).unwrap();
    let mut ex = f.examples.clone();
    // Three annotators split 2:1 between two answers.
    let mut soft = vec![0.0f32; f.config.num_answers];
    soft[0] = 2.0 / 3.0;
    soft[1] = 1.0 / 3.0;
    ex[0].answer_target = soft.clone();
    let mut g = Graph::new();
    let (loss, _) = vqa_loss(&mut g, &m, &ex, &[0], 0).unwrap();
    let z = vqa_logits(&mut g, &m, &ex[0], 0).unwrap();
    let row = g.value(z).data().to_vec();
    let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
    let expect = soft[0] as f64 * (lse - row[0]) + soft[1] as f64 * (lse - row[1]);
    assert!((g.scalar(loss) - expect).abs() < 1e-9);
    assert_eq!(ex[0].best_answer(), 0);
}

#[test]
fn answer_shift_keeps_argmax() {
    let f = fixture(6);
    let mut m = Model::<f32>::new(f.config.clone(), 4).unwrap();
    let before = vqa_predict(&m, &f.examples, 1).unwrap();
    let b2 = m.ids.fusion.as_ref().unwrap().b2;
    for v in m.params.get_mut(b2).data_mut() {
        *v += 3.5;
    }
    assert_eq!(vqa_predict(&m, &f.examples, 1).unwrap(), before);
}

#[test]
fn missing_answer_head_is_config_error() {
    let f = fixture(3);
    let mut c = f.config.clone();
    c.num_answers = 0;
    let m = Model::<f32>::new(c, 1).unwrap();
    assert!(matches!(eval_vqa(&m, &f.examples, 1), Err(Error::Config(_))));
}

#[test]
fn greedy_is_deterministic_and_filtered() {
    let f = fixture(5);
    let m = Model::<f32>::new(f.config.clone(), 8).unwrap();
    for ex in &f.examples {
        let a = generate_caption(&m, &ex.regions, &DecodeConfig::greedy(12)).unwrap();
        let b = generate_caption(&m, &ex.regions, &DecodeConfig::greedy(12)).unwrap();
        assert_eq!(a, b);
        assert!(a.len() <= 12);
        assert!(a.iter().all(|&t| t != PAD && t != CLS && t != MASK));
    }
}

#[test]
fn width_one_beam_is_greedy() {
    let f = fixture(5);
    let m = Model::<f32>::new(f.config.clone(), 9).unwrap();
    for ex in &f.examples {
        let g = generate_caption(&m, &ex.regions, &DecodeConfig::greedy(10)).unwrap();
        let b = generate_caption(&m, &ex.regions, &DecodeConfig::beam(1, 10)).unwrap();
        assert_eq!(g, b);
    }
}

#[test]
fn beam_never_scores_below_greedy() {
    let f = fixture(5);
    let m = Model::<f32>::new(f.config.clone(), 10).unwrap();
    for w in [2, 4] {
        let cfg = DecodeConfig::beam(w, 10);
        for ex in &f.examples {
            let gh = greedy(&m, &ex.regions, 10).unwrap();
            let bh = beam_search(&m, &ex.regions, &cfg).unwrap();
            assert!(bh.score(cfg.length_penalty) >= gh.score(cfg.length_penalty));
        }
    }
}

#[test]
fn max_len_bound_checked() {
    let f = fixture(2);
    let m = Model::<f32>::new(f.config.clone(), 1).unwrap();
    let bad = DecodeConfig::greedy(f.config.max_seq - 1);
    assert!(matches!(generate_caption(&m, &f.examples[0].regions, &bad), Err(Error::Config(_))));
}

#[test]
fn retrieval_loss_is_finite_and_symmetric_in_layout() {
    let f = fixture(6);
    let m = Model::<f64>::new(f.config.clone(), 3).unwrap();
    let mut g = Graph::new();
    let idx: Vec<usize> = (0..6).collect();
    let (loss, s) = retrieval_loss(&mut g, &m, &f.examples, &idx, 0, 0.2, true).unwrap();
    assert!(g.scalar(loss).is_finite());
    assert_eq!(s.len(), 6);
    // The batch matrix agrees with the evaluation scorer.
    let mf = Model::<f32>::new(f.config.clone(), 3).unwrap();
    let ev = score_matrix(&mf, &f.examples, 2).unwrap();
    for i in 0..6 {
        for j in 0..6 {
            assert!((ev[i][j] - s[i][j]).abs() < 1e-5);
        }
    }
}

#[test]
fn caption_loss_near_ln_v_at_init() {
    let f = fixture(6);
    let m = Model::<f32>::new(f.config.clone(), 5).unwrap();
    let nll = eval_caption_nll(&m, &f.examples, 1).unwrap();
    let lnv = (f.vocab.len() as f64).ln();
    assert!((nll - lnv).abs() < 0.1 * lnv, "{nll} vs {lnv}");
}

#[test]
fn par_map_keeps_order() {
    let v: Vec<usize> = (0..17).collect();
    let out = par_map(&v, 4, |&x| Ok(x * 2)).unwrap();
    assert_eq!(out, v.iter().map(|x| x * 2).collect::<Vec<_>>());
}

#[test]
fn init_model_keeps_answer_head_seeded() {
    let f = fixture(3);
    let mut pre = f.config.clone();
    pre.num_answers = 0;
    let base = Model::<f32>::new(pre, 77).unwrap();
    let ck = Checkpoint::from_model(&base, 0);
    let a = init_model(&f.config, Some(&ck), 5).unwrap();
    let b = init_model(&f.config, None, 5).unwrap();
    assert_eq!(a.params.by_name("embed.w_w").unwrap().data(), base.params.by_name("embed.w_w").unwrap().data());
    assert_eq!(a.params.by_name("vqa.w2").unwrap().data(), b.params.by_name("vqa.w2").unwrap().data());
}

fn gradcheck_head(task: Task) {
    use crate::tensor::gradcheck::{check_gradients, GradCheckConfig};
    let f = fixture(3);
    let mut c = f.config.clone();
    c.init_range = 0.5;
    let m: Model<f64> = Model::new(c, 6).unwrap();
    let idx = [0, 1, 2];
    let pad = idx.iter().map(|&i| f.examples[i].caption.valid_len).max().unwrap();
    let report = check_gradients(
        &m.params,
        |g, p: &crate::tensor::ParamStore<f64>| {
            let mm = m.with_params(p.clone());
            match task {
                Task::Vqa => Ok(vqa_loss(g, &mm, &f.examples, &idx, 0)?.0),
                Task::Retrieval => Ok(retrieval_loss(g, &mm, &f.examples, &idx, pad, 0.2, false)?.0),
                Task::Caption => caption_loss(g, &mm, &f.examples, &idx, pad),
            }
        },
        &GradCheckConfig {
            samples: 120,
            ..GradCheckConfig::default()
        },
    )
    .unwrap();
    assert!(report.passed(), "{}", report.render());
    let head = match task {
        Task::Vqa => "vqa.guide",
        Task::Retrieval => "ism.w2",
        Task::Caption => "lm.bias",
    };
    assert!(report.entry(head).is_some_and(|e| e.checked > 0), "{head} unchecked");
}

#[test]
fn vqa_loss_gradcheck() {
    gradcheck_head(Task::Vqa);
}

#[test]
fn retrieval_loss_gradcheck() {
    gradcheck_head(Task::Retrieval);
}

#[test]
fn caption_loss_gradcheck() {
    gradcheck_head(Task::Caption);
}
