//! The `vlp` command: one verb per pipeline stage.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime error.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, Parser, Subcommand};

use crate::config::RunConfig;
use crate::data::{encode_examples, generate_world, read_corpus, write_corpus, Corpus, Example, Vocab};
use crate::downstream::{
    captions_tsv, eval_captioning, evaluate, finetune, generate_caption, init_model, write_task_csv, Task, TaskData,
    TaskRow,
};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::study::{objective_gradcheck, tiny_gradcheck};
use crate::tensor::gradcheck::GradCheckConfig;
use crate::tensor::Tensor;
use crate::train::{write_metrics, Checkpoint, Trainer};

pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const VOCAB_FILE: &str = "vocab.tsv";
pub const CONFIG_FILE: &str = "config.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const CAPTIONS_FILE: &str = "captions.tsv";

#[derive(Parser, Debug)]
#[command(name = "vlp", version, about = "Vision-language pre-training on a synthetic micro-world")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Configuration flags shared by every pipeline stage.
#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// Root seed of every random draw
    #[arg(long)]
    pub seed: Option<u64>,
    /// Flat JSON config file layered over the defaults
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override one config key (repeatable); see the key list below
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    /// Upper bound on evaluation worker threads
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic corpus and its vocabulary
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Number of scenes
        #[arg(long)]
        n_scenes: Option<usize>,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
    },
    /// Pre-train on a corpus with the proxy-task objective
    Pretrain {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Corpus directory written by gen-data
        #[arg(long)]
        corpus: PathBuf,
        /// Number of updates
        #[arg(long)]
        steps: Option<u64>,
        /// Continue from a pre-training checkpoint
        #[arg(long, value_name = "CKPT")]
        resume: Option<PathBuf>,
        /// Output directory
        #[arg(long, default_value = "pretrain-out")]
        out: PathBuf,
    },
    /// Finite-difference check of the pre-training objective
    Gradcheck {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Use the smallest model and a two-scene batch
        #[arg(long)]
        tiny: bool,
        /// Maximum tolerated relative error
        #[arg(long, default_value_t = 1e-3)]
        tol: f64,
        /// Coordinates to sample
        #[arg(long, default_value_t = 200)]
        samples: usize,
    },
    /// Fine-tune on a downstream task
    Finetune {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// vqa, retrieval or caption
        #[arg(long)]
        task: Task,
        /// Training corpus directory
        #[arg(long)]
        corpus: PathBuf,
        /// Validation corpus directory
        #[arg(long)]
        val: Option<PathBuf>,
        /// Initial checkpoint; random initialisation when absent
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Number of updates
        #[arg(long)]
        steps: Option<u64>,
        /// Output directory
        #[arg(long, default_value = "finetune-out")]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a downstream task
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// vqa, retrieval or caption
        #[arg(long)]
        task: Task,
        /// Evaluation corpus directory
        #[arg(long)]
        corpus: PathBuf,
        /// Checkpoint to evaluate
        #[arg(long)]
        ckpt: PathBuf,
        /// Directory for the metrics CSV (and captions for caption)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Decode a caption for one scene
    Caption {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Corpus directory holding the scene
        #[arg(long)]
        corpus: PathBuf,
        /// Captioning checkpoint
        #[arg(long)]
        ckpt: PathBuf,
        /// Scene to caption
        #[arg(long)]
        scene_id: u64,
    },
    /// Print "name shape dtype checksum" for every tensor in a checkpoint
    InspectCkpt {
        /// Checkpoint file
        #[arg(long)]
        ckpt: PathBuf,
    },
}

/// Help epilogue listing every config key with its default.
pub fn keys_help() -> String {
    let d = serde_json::to_value(RunConfig::default()).expect("RunConfig serializes");
    let mut s = String::from("Config keys (--set KEY=VALUE, defaults shown):\n");
    for k in RunConfig::keys() {
        let _ = writeln!(s, "  {k} = {}", d[&k]);
    }
    s
}

/// The clap command with the config-key epilogue on every configurable verb.
pub fn command() -> clap::Command {
    let keys = keys_help();
    let mut cmd = Cli::command();
    for name in ["gen-data", "pretrain", "gradcheck", "finetune", "eval", "caption"] {
        let k = keys.clone();
        cmd = cmd.mut_subcommand(name, move |c| c.after_help(k));
    }
    cmd
}

/// Parse argv and run; returns the process exit code.
pub fn main_with_args<I, S>(argv: I, out: &mut dyn std::io::Write, err: &mut dyn std::io::Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    use clap::FromArgMatches;
    let parsed = command()
        .try_get_matches_from(argv)
        .and_then(|m| Cli::from_arg_matches(&m));
    let cli = match parsed {
        Ok(c) => c,
        Err(e) => {
            let text = e.render().to_string();
            return if e.use_stderr() {
                let _ = write!(err, "{text}");
                1
            } else {
                let _ = write!(out, "{text}");
                0
            };
        }
    };
    match run(cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            match e {
                Error::Config(_) | Error::NotImplemented(_) => 1,
                _ => 2,
            }
        }
    }
}

fn resolve(a: &ConfigArgs) -> Result<RunConfig> {
    let mut c = RunConfig::default();
    if let Some(p) = &a.config {
        c = c.merge_file(p)?;
    }
    c = c.merge_sets(&a.sets)?;
    if let Some(s) = a.seed {
        c.seed = s;
    }
    if let Some(t) = a.threads {
        c.threads = t;
    }
    c.validate()?;
    Ok(c)
}

fn echo(dir: &Path, c: &RunConfig) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(CONFIG_FILE), c.to_json())?;
    Ok(())
}

fn load_dir(dir: &Path) -> Result<(Corpus, Vocab)> {
    let corpus = read_corpus(&dir.join(CORPUS_FILE))?;
    let vocab = Vocab::load(&dir.join(VOCAB_FILE))?;
    Ok((corpus, vocab))
}

fn num_labels(corpus: &Corpus) -> Result<usize> {
    corpus
        .scenes
        .first()
        .and_then(|s| s.regions.first())
        .map(|r| r.label_dist.len())
        .ok_or_else(|| Error::Data("corpus holds no regions".into()))
}

/// The checkpoint's answer list when it has an answer head, otherwise the
/// sorted colour words of the configured world.
fn answer_inventory(c: &RunConfig, ckpt: Option<&Checkpoint>) -> Vec<String> {
    match ckpt {
        Some(ck) if !ck.meta.answers.is_empty() => ck.meta.answers.clone(),
        _ => {
            let mut a = c.world().colors;
            a.sort();
            a
        }
    }
}

fn vocab_of(ckpt: &Checkpoint) -> Result<Vocab> {
    if ckpt.meta.vocab.is_empty() {
        return Err(Error::Integrity("checkpoint carries no vocabulary".into()));
    }
    Vocab::from_tokens(ckpt.meta.vocab.clone())
}

fn run(cmd: Command, out: &mut dyn std::io::Write) -> Result<()> {
    match cmd {
        Command::GenData { cfg, n_scenes, out: dir } => {
            let mut c = resolve(&cfg)?;
            if let Some(n) = n_scenes {
                c.n_scenes = n;
            }
            let corpus = generate_world(c.seed, &c.world())?;
            let vocab = Vocab::build(&corpus)?;
            echo(&dir, &c)?;
            write_corpus(&corpus, &dir.join(CORPUS_FILE))?;
            vocab.save(&dir.join(VOCAB_FILE))?;
            writeln!(out, "wrote {} scenes, {} tokens to {}", corpus.len(), vocab.len(), dir.display())?;
        }
        Command::Pretrain {
            cfg,
            corpus,
            steps,
            resume,
            out: dir,
        } => {
            let mut c = resolve(&cfg)?;
            if let Some(s) = steps {
                c.steps = s;
            }
            let (corp, vocab) = load_dir(&corpus)?;
            let examples = encode_examples(&corp, &vocab, &answer_inventory(&c, None))?;
            let pc = c.pretrain();
            let mut trainer = match &resume {
                Some(p) => {
                    let ck = Checkpoint::load(p)?;
                    if ck.meta.vocab != vocab.tokens() {
                        return Err(Error::Integrity("checkpoint vocabulary differs from the corpus".into()));
                    }
                    Trainer::resume(&ck, examples.len(), pc)?
                }
                None => {
                    let mc = c.model(vocab.len(), num_labels(&corp)?, 0);
                    Trainer::new(Model::new(mc, c.seed)?, examples.len(), pc)?
                }
            };
            echo(&dir, &c)?;
            let run_json = serde_json::to_value(&c)?;
            let stamp = |t: &Trainer| {
                let mut ck = t.checkpoint();
                ck.meta.run = run_json.clone();
                ck.meta.vocab = vocab.tokens();
                ck
            };
            let every = c.checkpoint_every;
            let rows = trainer.run(&examples, |_, t| {
                if every > 0 && t.step % every == 0 {
                    stamp(t).save(&dir.join(format!("step-{:06}.bin", t.step)))?;
                }
                Ok(())
            })?;
            let mut csv = Vec::new();
            write_metrics(&mut csv, &rows)?;
            fs::write(dir.join(METRICS_FILE), csv)?;
            stamp(&trainer).save(&dir.join(CHECKPOINT_FILE))?;
            match rows.last() {
                Some(r) => writeln!(out, "step {} loss {}", trainer.step, r.loss.total)?,
                None => writeln!(out, "step {} (no updates)", trainer.step)?,
            }
        }
        Command::Gradcheck {
            cfg,
            tiny,
            tol,
            samples,
        } => {
            let c = resolve(&cfg)?;
            let check = GradCheckConfig {
                tol,
                samples,
                seed: c.seed,
                ..GradCheckConfig::default()
            };
            let report = if tiny {
                tiny_gradcheck(c.seed, &check)?
            } else {
                let world = crate::data::WorldConfig {
                    n_scenes: c.batch_size,
                    ..c.world()
                };
                objective_gradcheck(&world, |v, l, _| c.model(v, l, 0), &c.proxy(), c.seed, &check)?
            };
            write!(out, "{}", report.render())?;
            if !report.passed() {
                return Err(Error::Integrity(format!(
                    "gradient check failed for {}",
                    report.flagged().join(", ")
                )));
            }
        }
        Command::Finetune {
            cfg,
            task,
            corpus,
            val,
            ckpt,
            steps,
            out: dir,
        } => {
            let mut c = resolve(&cfg)?;
            if let Some(s) = steps {
                c.ft_steps = s;
            }
            let init = ckpt.as_deref().map(Checkpoint::load).transpose()?;
            let (train_c, dir_vocab) = load_dir(&corpus)?;
            let vocab = match &init {
                Some(ck) => vocab_of(ck)?,
                None => dir_vocab,
            };
            let answers = answer_inventory(&c, init.as_ref());
            let mut mc = match &init {
                Some(ck) => ck.meta.model.clone(),
                None => c.model(vocab.len(), num_labels(&train_c)?, 0),
            };
            if task == Task::Vqa {
                mc.num_answers = answers.len();
            }
            let train = encode_examples(&train_c, &vocab, &answers)?;
            let val_ex = match &val {
                Some(v) => encode_examples(&read_corpus(&v.join(CORPUS_FILE))?, &vocab, &answers)?,
                None => Vec::new(),
            };
            let mut model = init_model(&mc, init.as_ref(), c.seed)?;
            let data = TaskData {
                train: &train,
                val: &val_ex,
                vocab: &vocab,
            };
            let fc = c.finetune();
            let rows = finetune(task, &mut model, &data, &fc)?;
            echo(&dir, &c)?;
            let mut csv = Vec::new();
            write_task_csv(&mut csv, task, &rows)?;
            fs::write(dir.join(format!("{}.csv", task.name())), csv)?;
            let mut ck = Checkpoint::from_model(&model, rows.len() as u64);
            ck.meta.run = serde_json::to_value(&c)?;
            ck.meta.vocab = vocab.tokens();
            ck.meta.answers = if mc.num_answers > 0 { answers } else { Vec::new() };
            ck.save(&dir.join(CHECKPOINT_FILE))?;
            if task == Task::Caption && !val_ex.is_empty() {
                let (_, _, gen) = eval_captioning(&model, &val_ex, &vocab, &fc.decode, fc.threads)?;
                fs::write(dir.join(CAPTIONS_FILE), captions_tsv(&val_ex, &gen))?;
            }
            if let Some(r) = rows.last() {
                writeln!(out, "{}", report_line(task, r))?;
            }
        }
        Command::Eval {
            cfg,
            task,
            corpus,
            ckpt,
            out: dir,
        } => {
            let c = resolve(&cfg)?;
            let ck = Checkpoint::load(&ckpt)?;
            let vocab = vocab_of(&ck)?;
            let corp = read_corpus(&corpus.join(CORPUS_FILE))?;
            if task == Task::Vqa && ck.meta.answers.is_empty() {
                return Err(Error::Config("checkpoint has no answer head; fine-tune on vqa first".into()));
            }
            let examples = encode_examples(&corp, &vocab, &answer_inventory(&c, Some(&ck)))?;
            let model = ck.model()?;
            let fc = c.finetune();
            let data = TaskData {
                train: &[],
                val: &examples,
                vocab: &vocab,
            };
            let metrics = evaluate(task, &model, &data, &fc)?;
            let row = TaskRow {
                step: ck.meta.step,
                loss: validation_loss(task, &model, &examples, &fc)?,
                metrics,
            };
            writeln!(out, "{}", report_line(task, &row))?;
            if let Some(dir) = dir {
                echo(&dir, &c)?;
                let mut csv = Vec::new();
                write_task_csv(&mut csv, task, std::slice::from_ref(&row))?;
                fs::write(dir.join(format!("{}.csv", task.name())), csv)?;
                if task == Task::Caption {
                    let (_, _, gen) = eval_captioning(&model, &examples, &vocab, &fc.decode, fc.threads)?;
                    fs::write(dir.join(CAPTIONS_FILE), captions_tsv(&examples, &gen))?;
                }
            }
        }
        Command::Caption {
            cfg,
            corpus,
            ckpt,
            scene_id,
        } => {
            let c = resolve(&cfg)?;
            let ck = Checkpoint::load(&ckpt)?;
            let vocab = vocab_of(&ck)?;
            let corp = read_corpus(&corpus.join(CORPUS_FILE))?;
            let scene = Corpus {
                scenes: corp.scenes.into_iter().filter(|s| s.scene_id == scene_id).collect(),
            };
            if scene.is_empty() {
                return Err(Error::Data(format!("no scene with id {scene_id}")));
            }
            let ex = encode_examples(&scene, &vocab, &answer_inventory(&c, Some(&ck)))?;
            let model = ck.model()?;
            let ids = generate_caption(&model, &ex[0].regions, &c.decode_config())?;
            writeln!(out, "{}", captions_tsv(&ex, &[vocab.decode(&ids)?]).trim_end())?;
        }
        Command::InspectCkpt { ckpt } => {
            let ck = Checkpoint::load(&ckpt)?;
            write!(out, "{}", tensor_table(&ck))?;
        }
    }
    Ok(())
}

/// Validation loss for the metrics row of `eval`: answer cross-entropy,
/// hardest-negative triplet loss over the full score matrix, or caption NLL.
fn validation_loss(task: Task, model: &Model<f32>, examples: &[Example], fc: &crate::downstream::FinetuneConfig) -> Result<f64> {
    use crate::downstream::{eval_caption_nll, eval_vqa_loss, score_matrix};
    match task {
        Task::Vqa => eval_vqa_loss(model, examples, fc.threads),
        Task::Caption => eval_caption_nll(model, examples, fc.threads),
        Task::Retrieval => {
            let s = score_matrix(model, examples, fc.threads)?;
            let n = s.len();
            let mut total = 0.0;
            for i in 0..n {
                let hard_img = (0..n).filter(|&j| j != i).map(|j| s[i][j]).fold(f64::NEG_INFINITY, f64::max);
                let hard_cap = (0..n).filter(|&j| j != i).map(|j| s[j][i]).fold(f64::NEG_INFINITY, f64::max);
                if n > 1 {
                    total += (fc.margin - s[i][i] + hard_img).max(0.0) + (fc.margin - s[i][i] + hard_cap).max(0.0);
                }
            }
            Ok(total / n.max(1) as f64)
        }
    }
}

fn report_line(task: Task, row: &TaskRow) -> String {
    let cols: Vec<&str> = task.csv_header().split(',').collect();
    let mut s = format!("{} step={} {}={}", task.name(), row.step, cols[1], row.loss);
    for (name, v) in cols[2..].iter().zip(&row.metrics) {
        let _ = write!(s, " {name}={v}");
    }
    s
}

fn line(name: &str, t: &Tensor<f32>) -> String {
    let shape: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
    let mut h = crc32fast::Hasher::new();
    for x in t.data() {
        h.update(&x.to_le_bytes());
    }
    format!("{name} [{}] f32 {:08x}\n", shape.join(","), h.finalize())
}

/// One "name shape dtype checksum" line per stored tensor, parameters
/// first, then optimizer moments. The checksum is CRC32 of the raw
/// little-endian bytes.
pub fn tensor_table(ck: &Checkpoint) -> String {
    let mut s = String::new();
    for (name, t) in ck.params.iter() {
        s.push_str(&line(name, t));
    }
    if let Some(o) = &ck.optim {
        for (k, moments) in [("m", &o.m), ("v", &o.v)] {
            for (id, t) in ck.params.ids().zip(moments) {
                s.push_str(&line(&format!("adam.{k}/{}", ck.params.name(id)), t));
            }
        }
    }
    s
}
