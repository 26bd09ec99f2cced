//! Head-to-head fine-tuning studies: the same downstream budget started
//! from a pre-trained checkpoint and from random initialisation.

use crate::data::{encode_examples, generate_world, BatchMode, BatchStream, Example, Vocab, WorldConfig};
use crate::downstream::{eval_caption_nll, eval_retrieval, eval_vqa, finetune, init_model, FinetuneConfig, Task, TaskData};
use crate::error::Result;
use crate::model::{Model, ModelConfig};
use crate::downstream::{generate_caption, DecodeConfig};
use crate::proxy::{moc_accuracy, overall_loss, ProxyConfig};
use crate::scalar::Scalar;
use crate::tensor::gradcheck::{check_gradients, GradCheckConfig, GradCheckReport};
use crate::tensor::{Graph, ParamStore};
use crate::train::{pretrain, Checkpoint, PretrainConfig, Trainer};

/// One corpus split three ways over a shared vocabulary.
#[derive(Clone, Debug)]
pub struct StudyData {
    pub vocab: Vocab,
    pub answers: Vec<String>,
    pub pretrain: Vec<Example>,
    pub train: Vec<Example>,
    pub val: Vec<Example>,
    pub num_labels: usize,
    pub region_dim: usize,
}

impl StudyData {
    /// Generate `pretrain + train + val` scenes and split them in that order.
    pub fn generate(seed: u64, world: &WorldConfig, pretrain: usize, train: usize, val: usize) -> Result<Self> {
        let wc = WorldConfig {
            n_scenes: pretrain + train + val,
            ..world.clone()
        };
        let corpus = generate_world(seed, &wc)?;
        let vocab = Vocab::build(&corpus)?;
        let answers = corpus.answer_set();
        let parts = corpus.split(&[pretrain, train, val])?;
        let enc = |c| encode_examples(c, &vocab, &answers);
        Ok(StudyData {
            pretrain: enc(&parts[0])?,
            train: enc(&parts[1])?,
            val: enc(&parts[2])?,
            vocab,
            answers,
            num_labels: wc.shapes.len(),
            region_dim: wc.region_dim,
        })
    }

    /// Toy model configuration sized to this data, with an answer head.
    pub fn toy_config(&self) -> ModelConfig {
        let mut c = ModelConfig::toy(self.vocab.len(), self.num_labels, self.region_dim);
        c.num_answers = self.answers.len();
        c
    }

    pub fn task_data(&self) -> TaskData<'_> {
        TaskData {
            train: &self.train,
            val: &self.val,
            vocab: &self.vocab,
        }
    }
}

/// Pre-train from `model_seed` on the pre-training split.
pub fn pretrain_checkpoint(data: &StudyData, config: &ModelConfig, model_seed: u64, cfg: &PretrainConfig) -> Result<Checkpoint> {
    let mut pc = config.clone();
    pc.num_answers = 0;
    let model = crate::model::Model::new(pc, model_seed)?;
    Ok(pretrain(&data.pretrain, model, cfg)?.0)
}

/// The headline validation number of a task: VQA accuracy, retrieval R@1,
/// or caption per-token NLL (lower is better).
pub fn headline(task: Task, model: &crate::model::Model<f32>, data: &StudyData, threads: usize) -> Result<f64> {
    match task {
        Task::Vqa => eval_vqa(model, &data.val, threads),
        Task::Retrieval => Ok(eval_retrieval(model, &data.val, threads)?.r1),
        Task::Caption => eval_caption_nll(model, &data.val, threads),
    }
}

pub fn higher_is_better(task: Task) -> bool {
    task != Task::Caption
}

/// Fine-tune from `init` (or from scratch) and return the headline number.
pub fn finetune_score(
    task: Task,
    data: &StudyData,
    config: &ModelConfig,
    init: Option<&Checkpoint>,
    init_seed: u64,
    cfg: &FinetuneConfig,
) -> Result<f64> {
    let mut model = init_model(config, init, init_seed)?;
    let no_val = TaskData {
        train: &data.train,
        val: &[],
        vocab: &data.vocab,
    };
    finetune(task, &mut model, &no_val, cfg)?;
    headline(task, &model, data, cfg.threads)
}

/// Paired outcome for one seed.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pair {
    pub seed: u64,
    pub treated: f64,
    pub baseline: f64,
}

impl Pair {
    /// Strictly better in the task's direction.
    pub fn wins(&self, task: Task) -> bool {
        if higher_is_better(task) {
            self.treated > self.baseline
        } else {
            self.treated < self.baseline
        }
    }

    /// At least as good in the task's direction.
    pub fn holds(&self, task: Task) -> bool {
        if higher_is_better(task) {
            self.treated >= self.baseline
        } else {
            self.treated <= self.baseline
        }
    }
}

/// Finite-difference check of the full pre-training objective in 64-bit
/// precision on one batch of `world.n_scenes` generated scenes.
pub fn objective_gradcheck(
    world: &WorldConfig,
    config: impl FnOnce(usize, usize, usize) -> ModelConfig,
    proxy: &ProxyConfig,
    seed: u64,
    check: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let corpus = generate_world(seed, world)?;
    let vocab = Vocab::build(&corpus)?;
    let examples = encode_examples(&corpus, &vocab, &corpus.answer_set())?;
    let cfg = config(vocab.len(), world.shapes.len(), world.region_dim);
    let model = Model::<f64>::new(cfg, seed)?;
    let mut stream = BatchStream::new(examples.len(), examples.len(), BatchMode::Pretrain, seed)?;
    let batch = stream.next_batch(&examples, &proxy.masking, vocab.len(), None)?;
    check_gradients(
        &model.params,
        |g, p: &ParamStore<f64>| {
            let m = model.with_params(p.clone());
            Ok(overall_loss(g, &m, &examples, &batch, proxy)?.total)
        },
        check,
    )
}

/// The smallest gradient-check setup: width 8, two heads, one layer per
/// stack, two 12-wide scenes, initializer range 0.5 so no gradient sits
/// near the finite-difference noise floor.
pub fn tiny_gradcheck(seed: u64, check: &GradCheckConfig) -> Result<GradCheckReport> {
    let world = WorldConfig {
        n_scenes: 2,
        region_dim: 12,
        ..WorldConfig::default()
    };
    objective_gradcheck(
        &world,
        |v, l, r| ModelConfig {
            init_range: 0.5,
            ..ModelConfig::tiny(v, l, r)
        },
        &ProxyConfig::default(),
        seed,
        check,
    )
}

/// Outcome of training on a single fixed batch.
#[derive(Clone, Debug, PartialEq)]
pub struct OverfitReport {
    /// Objective of the first batch, masks included, before training.
    pub initial_loss: f64,
    /// The same batch re-scored after the last update.
    pub final_loss: f64,
    /// Masked-object accuracy with each region masked on its own.
    pub moc_correct: usize,
    pub moc_total: usize,
    /// Greedy captions equal to the reference, out of `examples`.
    pub captions_exact: usize,
    pub examples: usize,
    /// Training log of the run.
    pub rows: Vec<crate::train::MetricsRow>,
}

impl OverfitReport {
    pub fn loss_ratio(&self) -> f64 {
        self.final_loss / self.initial_loss
    }
}

/// Pre-train a tiny model on one batch of `world.n_scenes` scenes drawn
/// with `data_seed`, as a single batch for `cfg.steps` updates.
pub fn overfit(world: &WorldConfig, data_seed: u64, model_seed: u64, cfg: &PretrainConfig) -> Result<OverfitReport> {
    let corpus = generate_world(data_seed, world)?;
    let vocab = Vocab::build(&corpus)?;
    let examples = encode_examples(&corpus, &vocab, &corpus.answer_set())?;
    let mc = ModelConfig::tiny(vocab.len(), world.shapes.len(), world.region_dim);
    let cfg = PretrainConfig {
        batch_size: examples.len(),
        ..cfg.clone()
    };
    let mut t = Trainer::new(Model::new(mc, model_seed)?, examples.len(), cfg.clone())?;
    let probe = t.stream.clone().next_batch(&examples, &cfg.proxy.masking, vocab.len(), None)?;
    let score = |m: &Model<f32>| -> Result<f64> {
        let mut g = Graph::new();
        let o = overall_loss(&mut g, m, &examples, &probe, &cfg.proxy)?;
        Ok(g.scalar(o.total).as_f64())
    };
    let initial_loss = score(&t.model)?;
    let rows = t.run(&examples, |_, _| Ok(()))?;
    let final_loss = score(&t.model)?;
    let (moc_correct, moc_total) = moc_accuracy(&t.model, &examples)?;
    let decode = DecodeConfig::greedy(t.model.config.max_seq - 2);
    let mut captions_exact = 0;
    for ex in &examples {
        if generate_caption(&t.model, &ex.regions, &decode)? == ex.caption.content() {
            captions_exact += 1;
        }
    }
    Ok(OverfitReport {
        initial_loss,
        final_loss,
        moc_correct,
        moc_total,
        captions_exact,
        examples: examples.len(),
        rows,
    })
}
