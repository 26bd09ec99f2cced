//! Optimizer, pre-training loop and checkpoints.

pub mod adam;
pub mod checkpoint;

use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use adam::{clip_global_norm, AdamConfig, Decay, OptimState, Schedule};
pub use checkpoint::{Checkpoint, CheckpointMeta, RngState, FORMAT_VERSION, MAGIC};

use crate::data::{BatchMode, BatchStream, Example};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::proxy::{overall_loss, LossValues, ProxyConfig};
use crate::tensor::{Gradients, Graph, NodeId};

/// Metrics CSV header shared by every pre-training run.
pub const METRICS_HEADER: &str = "step,loss_total,loss_mlm,loss_moc,loss_mrpg,loss_ism,loss_msg,grad_norm,wall_ms";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub schedule: Schedule,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub clip: f64,
    /// Checkpoint period in steps; 0 disables periodic checkpoints.
    pub checkpoint_every: u64,
    pub seed: u64,
    pub proxy: ProxyConfig,
    /// Record elapsed milliseconds in the metrics log. Off by default so
    /// logs stay byte-identical across runs.
    pub wall_clock: bool,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 2500,
            batch_size: 16,
            adam: AdamConfig::default(),
            schedule: Schedule::default(),
            clip: 5.0,
            checkpoint_every: 0,
            seed: 0,
            proxy: ProxyConfig::default(),
            wall_clock: false,
        }
    }
}

/// One line of the metrics log: losses at the parameters *before* update
/// `step + 1`, so step 0 reports the initial loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub loss: LossValues,
    pub grad_norm: f64,
    pub wall_ms: u64,
    pub moc_correct: usize,
    pub moc_total: usize,
}

impl MetricsRow {
    pub fn csv(&self) -> String {
        let l = &self.loss;
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.step, l.total, l.mlm, l.moc, l.mrpg, l.ism, l.msg, self.grad_norm, self.wall_ms
        )
    }
}

/// Write a metrics log.
pub fn write_metrics(mut w: impl Write, rows: &[MetricsRow]) -> Result<()> {
    writeln!(w, "{METRICS_HEADER}")?;
    for r in rows {
        writeln!(w, "{}", r.csv())?;
    }
    Ok(())
}

fn first_bad_grad(model: &Model<f32>, grads: &Gradients<f32>) -> Option<String> {
    model
        .params
        .ids()
        .find(|&id| grads.get(id).is_some_and(|t| !t.is_finite()))
        .map(|id| model.params.name(id).to_string())
}

fn describe_bad_node(g: &Graph<f32>, model: &Model<f32>) -> String {
    if let Some(p) = g.first_nonfinite_param(&model.params) {
        return format!("parameter `{p}`");
    }
    match g.check_finite() {
        Err(Error::NonFinite { node, op }) => format!("node {node} ({op})"),
        _ => "the loss".into(),
    }
}

/// Build a loss with `build`, backpropagate, clip and apply one Adam step.
/// Non-finite losses or gradients abort before any parameter changes.
/// Returns the graph (for reading values), the loss node and the pre-clip
/// gradient norm.
pub fn descend<F>(
    model: &mut Model<f32>,
    optim: &mut OptimState<f32>,
    clip: f64,
    step: u64,
    build: F,
) -> Result<(Graph<f32>, NodeId, f64)>
where
    F: FnOnce(&mut Graph<f32>, &Model<f32>) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let loss = build(&mut g, model)?;
    if !g.scalar(loss).is_finite() {
        return Err(Error::Diverged {
            step,
            what: "loss",
            tensor: describe_bad_node(&g, model),
        });
    }
    let mut grads = g.backward_params(loss, &model.params)?;
    if let Some(name) = first_bad_grad(model, &grads) {
        return Err(Error::Diverged {
            step,
            what: "gradient",
            tensor: format!("gradient of `{name}`"),
        });
    }
    let norm = clip_global_norm(&mut grads, clip);
    optim.step(&mut model.params, &grads)?;
    Ok((g, loss, norm))
}

/// Resumable pre-training state.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Model<f32>,
    pub optim: OptimState<f32>,
    pub stream: BatchStream,
    pub cfg: PretrainConfig,
    /// Updates applied so far.
    pub step: u64,
}

impl Trainer {
    pub fn new(model: Model<f32>, n_examples: usize, cfg: PretrainConfig) -> Result<Self> {
        cfg.adam.validate()?;
        cfg.proxy.masking.validate()?;
        let optim = OptimState::new(&model.params, cfg.adam);
        let stream = BatchStream::new(n_examples, cfg.batch_size, BatchMode::Pretrain, cfg.seed)?;
        Ok(Trainer {
            model,
            optim,
            stream,
            cfg,
            step: 0,
        })
    }

    /// Continue from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(ckpt: &Checkpoint, n_examples: usize, cfg: PretrainConfig) -> Result<Self> {
        let model = ckpt.model()?;
        let mut t = Trainer::new(model, n_examples, cfg)?;
        if let Some(o) = &ckpt.optim {
            t.optim = o.clone();
            t.optim.config = t.cfg.adam;
        }
        if let Some(r) = ckpt.rng {
            if r.seed != t.cfg.seed {
                return Err(Error::Config(format!(
                    "checkpoint stream seed {} differs from configured seed {}",
                    r.seed, t.cfg.seed
                )));
            }
            t.stream.restore(r.stream)?;
        }
        t.step = ckpt.meta.step;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::from_model(&self.model, self.step);
        c.optim = Some(self.optim.clone());
        c.rng = Some(RngState {
            seed: self.cfg.seed,
            stream: self.stream.state(),
        });
        c
    }

    /// Draw the next batch and apply one update.
    pub fn train_step(&mut self, examples: &[Example]) -> Result<MetricsRow> {
        let t0 = Instant::now();
        let batch = self.stream.next_batch(
            examples,
            &self.cfg.proxy.masking,
            self.model.config.vocab_size,
            None,
        )?;
        let proxy = self.cfg.proxy.clone();
        self.optim.config.lr = self.cfg.adam.lr * self.cfg.schedule.factor(self.step, self.cfg.steps);
        let mut out = None;
        let (g, _, grad_norm) = descend(&mut self.model, &mut self.optim, self.cfg.clip, self.step, |g, m| {
            let o = overall_loss(g, m, examples, &batch, &proxy)?;
            let total = o.total;
            out = Some(o);
            Ok(total)
        })?;
        let out = out.expect("objective built");
        let row = MetricsRow {
            step: self.step,
            loss: out.values(&g),
            grad_norm,
            wall_ms: if self.cfg.wall_clock {
                t0.elapsed().as_millis() as u64
            } else {
                0
            },
            moc_correct: out.moc_correct,
            moc_total: out.moc_total,
        };
        self.step += 1;
        Ok(row)
    }

    /// Run until `cfg.steps` updates have been applied. `on_step` sees each
    /// metrics row and the trainer after the update, e.g. to checkpoint.
    pub fn run(
        &mut self,
        examples: &[Example],
        mut on_step: impl FnMut(&MetricsRow, &Trainer) -> Result<()>,
    ) -> Result<Vec<MetricsRow>> {
        let mut rows = Vec::new();
        while self.step < self.cfg.steps {
            let row = self.train_step(examples)?;
            on_step(&row, self)?;
            rows.push(row);
        }
        Ok(rows)
    }
}

/// Pre-train `model` on `examples`, returning the final checkpoint and the
/// metrics log.
pub fn pretrain(
    examples: &[Example],
    model: Model<f32>,
    cfg: &PretrainConfig,
) -> Result<(Checkpoint, Vec<MetricsRow>)> {
    let mut t = Trainer::new(model, examples.len(), cfg.clone())?;
    let rows = t.run(examples, |_, _| Ok(()))?;
    Ok((t.checkpoint(), rows))
}

#[cfg(test)]
mod tests;
