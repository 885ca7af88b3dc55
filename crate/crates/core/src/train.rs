//! Two-stage training and evaluation.
//!
//! Pretraining optimizes masked-word prediction plus two-way matched /
//! not-matched classification on image-caption pairs. Finetuning optimizes
//! the MIL loss over a few randomly sampled clips per video: every clip is
//! encoded independently against the text, the per-clip logits are
//! aggregated into one video-level distribution, and the negative
//! log-likelihood of the label flows back through the aggregation into all
//! clips. Inference always aggregates densely sampled clips.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::aggregation::{aggregate_var, mil_loss_var, AggregationKind};
use crate::data::{load_batch, load_eval_clips, Batch, DataSpec, Dataset};
use crate::graph::{Graph, Var};
use crate::model::{
    assemble_text, tokens, BoundModel, FreezeFlags, HeadKind, ModelConfig, Params, TemporalFusion,
};
use crate::optim::{AdamWConfig, AdamWState};
use crate::rng::Rng;
use crate::sampling::{SamplingPlan, SamplingStrategy};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Retrieval,
    Qa,
    Pretrain,
}

/// Weight initialization: fresh random draws or a saved checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    Random,
    PretrainedCheckpoint { path: PathBuf },
}

/// The full experiment description. Serialized verbatim next to every run's
/// outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub task: Task,
    pub model: ModelConfig,
    pub data: DataSpec,
    pub sampling: SamplingPlan,
    pub aggregation: AggregationKind,
    pub fusion: TemporalFusion,
    pub init: InitMode,
    pub freeze: FreezeFlags,
    pub optimizer: AdamWConfig,
    pub total_steps: usize,
    /// Fraction of steps spent ramping the rate from 0 to its peak.
    pub warmup_fraction: f64,
    /// Micro-batch size.
    pub batch_size: usize,
    /// Micro-batches accumulated per optimizer step.
    pub grad_accum: usize,
    /// Validation cadence in steps; 0 disables mid-training evaluation.
    pub eval_every: usize,
    /// Checkpoint cadence in steps; 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
    /// Stop once the validation accuracy reaches this level.
    pub early_stop_accuracy: Option<f64>,
    /// Visual tokens kept by pixel random sampling during pretraining;
    /// 0 keeps the full grid.
    pub pixel_samples: usize,
    pub log_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            task: Task::Retrieval,
            model: ModelConfig::default(),
            data: DataSpec::default(),
            sampling: SamplingPlan {
                clip_seconds: 1.0,
                train_clips: 2,
                test_clips: 4,
                frames_per_clip: 2,
                strategy: SamplingStrategy::SparseRandom,
            },
            aggregation: AggregationKind::LogSumExp,
            fusion: TemporalFusion::Mean,
            init: InitMode::Random,
            freeze: FreezeFlags::none(),
            optimizer: AdamWConfig {
                lr: 1e-3,
                ..AdamWConfig::default()
            },
            total_steps: 1200,
            warmup_fraction: 0.1,
            batch_size: 8,
            grad_accum: 1,
            eval_every: 100,
            checkpoint_every: 0,
            early_stop_accuracy: None,
            pixel_samples: 12,
            log_every: 10,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.data.validate()?;
        self.sampling.validate()?;
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config(format!(
                "warmup fraction {} outside [0, 1]",
                self.warmup_fraction
            )));
        }
        if self.total_steps == 0 || self.batch_size == 0 || self.grad_accum == 0 {
            return Err(Error::Config(
                "steps, batch size and accumulation must be positive".into(),
            ));
        }
        if matches!(self.task, Task::Retrieval | Task::Pretrain)
            && self.batch_size * self.grad_accum < 2
        {
            return Err(Error::Config(
                "matched/not-matched training needs an effective batch of at least 2".into(),
            ));
        }
        if let InitMode::PretrainedCheckpoint { path } = &self.init {
            if !path.exists() {
                return Err(Error::Config(format!(
                    "init checkpoint `{}` does not exist",
                    path.display()
                )));
            }
        }
        if self.pixel_samples > self.model.clip_tokens() {
            return Err(Error::Config(format!(
                "pixel sample count {} exceeds {} grid cells",
                self.pixel_samples,
                self.model.clip_tokens()
            )));
        }
        Ok(())
    }
}

/// Linear warmup to the peak over the first `warmup_fraction` of steps,
/// then linear decay to zero at `total`.
pub fn lr_at(step: usize, total: usize, peak: f64, warmup_fraction: f64) -> f64 {
    if total == 0 {
        return 0.0;
    }
    let warm = warmup_fraction * total as f64;
    let s = step as f64;
    if s < warm {
        peak * s / warm
    } else {
        peak * ((total as f64 - s) / (total as f64 - warm)).max(0.0)
    }
}

/// Masks each maskable token independently with probability 0.15, forcing
/// one mask if the draw selects none. Returns the corrupted sequence and the
/// (position, original id) targets.
pub fn mlm_corrupt(words: &[u16], rng: &mut Rng) -> Result<(Vec<u16>, Vec<(usize, u16)>)> {
    let maskable: Vec<usize> = words
        .iter()
        .enumerate()
        .filter(|(_, &w)| w >= tokens::FIRST_WORD)
        .map(|(i, _)| i)
        .collect();
    if maskable.is_empty() {
        return Err(Error::Input("no maskable tokens in sequence".into()));
    }
    let mut corrupted = words.to_vec();
    let mut targets = Vec::new();
    for &i in &maskable {
        if rng.chance(0.15) {
            targets.push((i, words[i]));
            corrupted[i] = tokens::MASK;
        }
    }
    if targets.is_empty() {
        let i = maskable[rng.below(maskable.len())];
        targets.push((i, words[i]));
        corrupted[i] = tokens::MASK;
    }
    Ok((corrupted, targets))
}

/// Matched/not-matched assignment: a fair coin per example; negatives take a
/// caption from another example (never their own, and preferring a source
/// with a genuinely different caption). Returns (caption, matched).
pub fn itm_pair(captions: &[Vec<u16>], rng: &mut Rng) -> Result<Vec<(Vec<u16>, bool)>> {
    if captions.len() < 2 {
        return Err(Error::Input(
            "matched/not-matched pairing needs at least two examples".into(),
        ));
    }
    let mut out = Vec::with_capacity(captions.len());
    for (i, caption) in captions.iter().enumerate() {
        if rng.chance(0.5) {
            out.push((caption.clone(), true));
        } else {
            let differing: Vec<usize> = (0..captions.len())
                .filter(|&j| j != i && captions[j] != *caption)
                .collect();
            let j = if differing.is_empty() {
                // all other captions equal ours; still never pick ourselves
                let mut j = rng.below(captions.len() - 1);
                if j >= i {
                    j += 1;
                }
                j
            } else {
                differing[rng.below(differing.len())]
            };
            out.push((captions[j].clone(), false));
        }
    }
    Ok(out)
}

/// matched = class 1, not matched = class 0 for the two-way heads.
pub const MATCHED: usize = 1;
pub const NOT_MATCHED: usize = 0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalMetrics {
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub mdr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: Task,
    pub steps_run: usize,
    pub final_loss: f64,
    /// Matched/not-matched accuracy on held-out pairs.
    pub itm_accuracy: Option<f64>,
    pub qa_accuracy: Option<f64>,
    pub retrieval: Option<RetrievalMetrics>,
    pub loss_curve: Vec<LossPoint>,
}

impl EvalReport {
    /// The scalar the run optimizes for: matched/not-matched accuracy for
    /// retrieval and pretraining, answer accuracy for QA.
    pub fn primary_accuracy(&self) -> Option<f64> {
        match self.task {
            Task::Qa => self.qa_accuracy,
            _ => self.itm_accuracy,
        }
    }
}

pub struct TrainOutput {
    pub params: Params<f64>,
    pub report: EvalReport,
    pub log: Vec<StepLog>,
}

pub struct Trainer {
    pub config: RunConfig,
    pub params: Params<f64>,
    pub dataset: Dataset,
    opt: AdamWState<f64>,
    root: Rng,
    pub log: Vec<StepLog>,
}

impl Trainer {
    pub fn new(config: RunConfig, dataset: Dataset) -> Result<Self> {
        config.validate()?;
        if dataset.manifest.vocab.len() > config.model.vocab_size {
            return Err(Error::Config(format!(
                "dataset vocabulary ({}) exceeds the model vocabulary ({})",
                dataset.manifest.vocab.len(),
                config.model.vocab_size
            )));
        }
        if matches!(config.task, Task::Qa)
            && dataset.manifest.answer_names.len() != config.model.num_answers
        {
            return Err(Error::Config(format!(
                "dataset has {} answer candidates, QA head expects {}",
                dataset.manifest.answer_names.len(),
                config.model.num_answers
            )));
        }
        let root = Rng::new(config.seed);
        let mut init_rng = root.derive(0x1217);
        let mut params = Params::init(&config.model, config.fusion, &mut init_rng)?;
        if let InitMode::PretrainedCheckpoint { path } = &config.init {
            params.load_from(path)?;
        }
        let opt = AdamWState::new(config.optimizer);
        Ok(Trainer {
            config,
            params,
            dataset,
            opt,
            root,
            log: Vec::new(),
        })
    }

    fn step_rng(&self, step: usize, lane: u64) -> Rng {
        self.root.derive((lane << 40) ^ step as u64)
    }

    /// Builds the scalar loss for one micro-batch on `g`.
    fn batch_loss(
        &self,
        g: &mut Graph<f64>,
        bound: &BoundModel,
        batch: &Batch,
        rng: &mut Rng,
        scale: f64,
    ) -> Result<Var> {
        let cfg = &self.config;
        let max_words = cfg.model.max_text_len;
        let mut example_losses: Vec<Var> = Vec::with_capacity(batch.examples.len());
        match cfg.task {
            Task::Retrieval => {
                let captions: Vec<Vec<u16>> =
                    batch.examples.iter().map(|e| e.caption.clone()).collect();
                let pairs = itm_pair(&captions, rng)?;
                for (example, (caption, matched)) in batch.examples.iter().zip(&pairs) {
                    let (ids, real) = assemble_text(caption, max_words)?;
                    let mut clip_logits = Vec::with_capacity(example.clips.len());
                    for clip in &example.clips {
                        let (logits, _) =
                            bound.clip_forward(g, clip, &ids, &real, HeadKind::Retrieval, None)?;
                        clip_logits.push(logits);
                    }
                    let pred = aggregate_var(g, cfg.aggregation, &clip_logits)?;
                    let label = if *matched { MATCHED } else { NOT_MATCHED };
                    example_losses.push(mil_loss_var(g, pred, label)?);
                }
            }
            Task::Qa => {
                for example in &batch.examples {
                    if example.qa.is_empty() {
                        return Err(Error::Input("example without QA pairs".into()));
                    }
                    let pair = &example.qa[rng.below(example.qa.len())];
                    let (ids, real) = assemble_text(&pair.question, max_words)?;
                    let mut clip_logits = Vec::with_capacity(example.clips.len());
                    for clip in &example.clips {
                        let (logits, _) =
                            bound.clip_forward(g, clip, &ids, &real, HeadKind::Qa, None)?;
                        clip_logits.push(logits);
                    }
                    let pred = aggregate_var(g, cfg.aggregation, &clip_logits)?;
                    example_losses.push(mil_loss_var(g, pred, pair.answer as usize)?);
                }
            }
            Task::Pretrain => {
                let captions: Vec<Vec<u16>> =
                    batch.examples.iter().map(|e| e.caption.clone()).collect();
                let pairs = itm_pair(&captions, rng)?;
                let mut mlm_losses: Vec<Var> = Vec::new();
                for (example, (caption, matched)) in batch.examples.iter().zip(&pairs) {
                    let (corrupted, mlm_targets) = mlm_corrupt(caption, rng)?;
                    let (ids, real) = assemble_text(&corrupted, max_words)?;
                    let mut clip_logits = Vec::with_capacity(example.clips.len());
                    let mut hidden_states = Vec::with_capacity(example.clips.len());
                    for clip in &example.clips {
                        let pixel = if cfg.pixel_samples > 0 {
                            Some((cfg.pixel_samples, &mut *rng))
                        } else {
                            None
                        };
                        let (logits, hidden) =
                            bound.clip_forward(g, clip, &ids, &real, HeadKind::Itm, pixel)?;
                        clip_logits.push(logits);
                        hidden_states.push(hidden);
                    }
                    let pred = aggregate_var(g, cfg.aggregation, &clip_logits)?;
                    let label = if *matched { MATCHED } else { NOT_MATCHED };
                    example_losses.push(mil_loss_var(g, pred, label)?);
                    // masked-word loss only where the caption truly matches
                    if *matched {
                        // caption word w sits at sequence position 1 + w
                        let positions: Vec<usize> =
                            mlm_targets.iter().map(|&(p, _)| 1 + p).collect();
                        let truth: Vec<usize> =
                            mlm_targets.iter().map(|&(_, id)| id as usize).collect();
                        let logits = bound.mlm_logits(g, hidden_states[0], &positions)?;
                        mlm_losses.push(g.cross_entropy(logits, &truth)?);
                    }
                }
                if !mlm_losses.is_empty() {
                    let rows: Vec<Var> = mlm_losses
                        .iter()
                        .map(|&v| g.reshape(v, vec![1]))
                        .collect::<Result<_>>()?;
                    let stacked = g.concat(&rows, 0)?;
                    example_losses.push(g.mean_all(stacked)?);
                }
            }
        }
        let rows: Vec<Var> = example_losses
            .iter()
            .map(|&v| g.reshape(v, vec![1]))
            .collect::<Result<_>>()?;
        let stacked = g.concat(&rows, 0)?;
        let mean = g.mean_all(stacked)?;
        g.scale(mean, scale)
    }

    /// One optimizer step (possibly several accumulated micro-batches).
    /// Returns the effective-batch loss.
    pub fn step(&mut self, step_idx: usize) -> Result<f64> {
        let cfg = self.config.clone();
        let n_train = self.dataset.split_len("train");
        if n_train == 0 {
            return Err(Error::Input("empty train split".into()));
        }
        let mut id_rng = self.step_rng(step_idx, 1);
        let mut data_rng = self.step_rng(step_idx, 2);
        let mut task_rng = self.step_rng(step_idx, 3);

        let total = cfg.batch_size * cfg.grad_accum;
        let ids: Vec<usize> = (0..total).map(|_| id_rng.below(n_train)).collect();

        let mut grads: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        let mut loss_total = 0.0;
        let scale = 1.0 / cfg.grad_accum as f64;
        for chunk in ids.chunks(cfg.batch_size) {
            let batch = load_batch(
                &self.dataset,
                "train",
                chunk,
                &cfg.sampling,
                cfg.model.frame_size,
                &mut data_rng,
            )?;
            let mut g = Graph::new();
            let bound = BoundModel::bind(
                &mut g,
                &self.params,
                &cfg.model,
                cfg.fusion,
                cfg.freeze,
                true,
            );
            let loss = self.batch_loss(&mut g, &bound, &batch, &mut task_rng, scale)?;
            let loss_value = g.value(loss).item()?;
            if !loss_value.is_finite() || loss_value > 1e4 {
                return Err(Error::Diverged {
                    step: step_idx,
                    loss: loss_value,
                });
            }
            loss_total += loss_value;
            g.backward(loss)?;
            for (name, grad) in bound.collect_grads(&g) {
                match grads.get_mut(&name) {
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(&grad) {
                            *a += b;
                        }
                    }
                    None => {
                        grads.insert(name, grad);
                    }
                }
            }
        }
        let lr = lr_at(step_idx, cfg.total_steps, cfg.optimizer.lr, cfg.warmup_fraction);
        self.opt.step(self.params.entries_mut(), &grads, lr)?;
        Ok(loss_total)
    }

    /// Full training loop with logging, periodic evaluation, optional early
    /// stop, and checkpoints under `out_dir`.
    pub fn run(&mut self, out_dir: Option<&Path>) -> Result<TrainOutput> {
        let cfg = self.config.clone();
        let mut curve = Vec::new();
        let mut last_loss = f64::NAN;
        let mut steps_run = 0;
        for step in 0..cfg.total_steps {
            let started = std::time::Instant::now();
            let loss = self.step(step)?;
            let wall_ms = started.elapsed().as_secs_f64() * 1e3;
            last_loss = loss;
            steps_run = step + 1;
            let lr = lr_at(step, cfg.total_steps, cfg.optimizer.lr, cfg.warmup_fraction);
            if cfg.log_every > 0 && step % cfg.log_every == 0 {
                curve.push(LossPoint { step, loss });
            }
            self.log.push(StepLog { step, lr, loss, wall_ms });

            if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
                if let Some(dir) = out_dir {
                    self.params
                        .save(dir.join(format!("checkpoint_step{}.ckpt", step + 1)))?;
                }
            }
            if cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0 {
                if let Some(target) = cfg.early_stop_accuracy {
                    let acc = self.quick_accuracy()?;
                    if acc >= target {
                        break;
                    }
                }
            }
        }
        curve.push(LossPoint {
            step: steps_run.saturating_sub(1),
            loss: last_loss,
        });
        let report = self.evaluate(steps_run, last_loss, curve)?;
        if let Some(dir) = out_dir {
            self.params.save(dir.join("model.ckpt"))?;
        }
        Ok(TrainOutput {
            params: self.params.clone(),
            report,
            log: std::mem::take(&mut self.log),
        })
    }

    /// Cheap validation accuracy for early stopping.
    fn quick_accuracy(&self) -> Result<f64> {
        match self.config.task {
            Task::Qa => evaluate_qa(
                &self.params,
                &self.config.model,
                self.config.fusion,
                self.config.aggregation,
                &self.dataset,
                "val",
                &self.config.sampling,
            ),
            Task::Retrieval => evaluate_itm_accuracy(
                &self.params,
                &self.config.model,
                self.config.fusion,
                self.config.aggregation,
                &self.dataset,
                "val",
                &self.config.sampling,
                HeadKind::Retrieval,
                2,
                self.config.seed ^ 0xacc,
            ),
            Task::Pretrain => evaluate_itm_accuracy(
                &self.params,
                &self.config.model,
                self.config.fusion,
                self.config.aggregation,
                &self.dataset,
                "val",
                &self.config.sampling,
                HeadKind::Itm,
                2,
                self.config.seed ^ 0xacc,
            ),
        }
    }

    fn evaluate(
        &self,
        steps_run: usize,
        final_loss: f64,
        curve: Vec<LossPoint>,
    ) -> Result<EvalReport> {
        let cfg = &self.config;
        let mut report = EvalReport {
            task: cfg.task,
            steps_run,
            final_loss,
            itm_accuracy: None,
            qa_accuracy: None,
            retrieval: None,
            loss_curve: curve,
        };
        match cfg.task {
            Task::Qa => {
                report.qa_accuracy = Some(evaluate_qa(
                    &self.params,
                    &cfg.model,
                    cfg.fusion,
                    cfg.aggregation,
                    &self.dataset,
                    "val",
                    &cfg.sampling,
                )?);
            }
            Task::Retrieval => {
                report.itm_accuracy = Some(evaluate_itm_accuracy(
                    &self.params,
                    &cfg.model,
                    cfg.fusion,
                    cfg.aggregation,
                    &self.dataset,
                    "val",
                    &cfg.sampling,
                    HeadKind::Retrieval,
                    4,
                    cfg.seed ^ 0xe7a1,
                )?);
                report.retrieval = Some(evaluate_retrieval(
                    &self.params,
                    &cfg.model,
                    cfg.fusion,
                    cfg.aggregation,
                    &self.dataset,
                    "val",
                    &cfg.sampling,
                )?);
            }
            Task::Pretrain => {
                report.itm_accuracy = Some(evaluate_itm_accuracy(
                    &self.params,
                    &cfg.model,
                    cfg.fusion,
                    cfg.aggregation,
                    &self.dataset,
                    "val",
                    &cfg.sampling,
                    HeadKind::Itm,
                    4,
                    cfg.seed ^ 0xe7a1,
                )?);
            }
        }
        Ok(report)
    }
}

/// Convenience wrapper: open the dataset, train, write artifacts.
pub fn train(config: RunConfig, data_dir: &Path, out_dir: Option<&Path>) -> Result<TrainOutput> {
    let dataset = Dataset::open(data_dir)?;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }
    let mut trainer = Trainer::new(config, dataset)?;
    trainer.run(out_dir)
}

/// Video-level class distribution from densely sampled clips, pure
/// inference.
fn predict_example(
    params: &Params<f64>,
    model_cfg: &ModelConfig,
    fusion: TemporalFusion,
    aggregation: AggregationKind,
    clips: &[Vec<Vec<u8>>],
    words: &[u16],
    head: HeadKind,
) -> Result<Vec<f64>> {
    let (ids, real) = assemble_text(words, model_cfg.max_text_len)?;
    let mut g = Graph::new();
    let bound = BoundModel::bind(&mut g, params, model_cfg, fusion, FreezeFlags::none(), false);
    let mut clip_logits = Vec::with_capacity(clips.len());
    for clip in clips {
        let (logits, _) = bound.clip_forward(&mut g, clip, &ids, &real, head, None)?;
        clip_logits.push(logits);
    }
    let pred = aggregate_var(&mut g, aggregation, &clip_logits)?;
    Ok(g.value(pred).data().to_vec())
}

/// Held-out matched/not-matched accuracy: `rounds` deterministic pairing
/// passes over the split, aggregated dense-clip predictions, argmax vs label.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_itm_accuracy(
    params: &Params<f64>,
    model_cfg: &ModelConfig,
    fusion: TemporalFusion,
    aggregation: AggregationKind,
    dataset: &Dataset,
    split: &str,
    plan: &SamplingPlan,
    head: HeadKind,
    rounds: usize,
    seed: u64,
) -> Result<f64> {
    let n = dataset.split_len(split);
    if n < 2 {
        return Err(Error::Input(format!("split `{split}` too small for pairing")));
    }
    let examples: Vec<_> = (0..n)
        .map(|i| load_eval_clips(dataset, split, i, plan, model_cfg.frame_size))
        .collect::<Result<Vec<_>>>()?;
    let captions: Vec<Vec<u16>> = examples.iter().map(|e| e.caption.clone()).collect();
    let root = Rng::new(seed);
    let mut correct = 0usize;
    let mut total = 0usize;
    for round in 0..rounds {
        let mut rng = root.derive(round as u64);
        let pairs = itm_pair(&captions, &mut rng)?;
        for (example, (caption, matched)) in examples.iter().zip(&pairs) {
            let probs = predict_example(
                params, model_cfg, fusion, aggregation, &example.clips, caption, head,
            )?;
            let label = if *matched { MATCHED } else { NOT_MATCHED };
            let pick = if probs[MATCHED] > probs[NOT_MATCHED] {
                MATCHED
            } else {
                NOT_MATCHED
            };
            correct += usize::from(pick == label);
            total += 1;
        }
    }
    Ok(correct as f64 / total as f64)
}

/// Ranking metrics from a score matrix. `scores[q][c]` is query q's score
/// for candidate c, `truth[q]` the correct candidate column, `ids[c]` the
/// tie-break key (ascending wins). Higher scores rank first.
pub fn retrieval_metrics_from_scores(
    scores: &[Vec<f64>],
    truth: &[usize],
    ids: &[usize],
) -> Result<RetrievalMetrics> {
    if scores.is_empty() || scores.len() != truth.len() {
        return Err(Error::Input("score matrix and truth length differ".into()));
    }
    let mut ranks = Vec::with_capacity(scores.len());
    for (q, row) in scores.iter().enumerate() {
        if row.len() != ids.len() {
            return Err(Error::Input("ragged score matrix".into()));
        }
        let mut order: Vec<usize> = (0..row.len()).collect();
        order.sort_by(|&a, &b| {
            row[b]
                .partial_cmp(&row[a])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(ids[a].cmp(&ids[b]))
        });
        let rank = order.iter().position(|&c| c == truth[q]).unwrap() + 1;
        ranks.push(rank);
    }
    let frac_within =
        |k: usize| ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64;
    let mut sorted = ranks.clone();
    sorted.sort_unstable();
    let mdr = if sorted.len() % 2 == 1 {
        sorted[sorted.len() / 2] as f64
    } else {
        (sorted[sorted.len() / 2 - 1] + sorted[sorted.len() / 2]) as f64 / 2.0
    };
    Ok(RetrievalMetrics {
        r1: frac_within(1),
        r5: frac_within(5),
        r10: frac_within(10),
        mdr,
    })
}

/// Text-to-video retrieval over a split: queries are the distinct captions,
/// candidates their first owning video (duplicates of a caption cannot be
/// ranked against each other meaningfully). Scores are matched-class
/// probabilities of the aggregated dense-clip prediction; ties break by
/// video id.
pub fn evaluate_retrieval(
    params: &Params<f64>,
    model_cfg: &ModelConfig,
    fusion: TemporalFusion,
    aggregation: AggregationKind,
    dataset: &Dataset,
    split: &str,
    plan: &SamplingPlan,
) -> Result<RetrievalMetrics> {
    let n = dataset.split_len(split);
    let mut pool: Vec<usize> = Vec::new(); // candidate example indices
    let mut seen: Vec<Vec<u16>> = Vec::new();
    for i in 0..n {
        let r = dataset.record(split, i)?;
        if !seen.contains(&r.caption) {
            seen.push(r.caption.clone());
            pool.push(i);
        }
    }
    if pool.is_empty() {
        return Err(Error::Input(format!("split `{split}` is empty")));
    }
    let candidates: Vec<_> = pool
        .iter()
        .map(|&i| load_eval_clips(dataset, split, i, plan, model_cfg.frame_size))
        .collect::<Result<Vec<_>>>()?;
    let mut scores = vec![vec![0.0; pool.len()]; pool.len()];
    for (q, query) in candidates.iter().enumerate() {
        for (c, cand) in candidates.iter().enumerate() {
            let probs = predict_example(
                params,
                model_cfg,
                fusion,
                aggregation,
                &cand.clips,
                &query.caption,
                HeadKind::Retrieval,
            )?;
            scores[q][c] = probs[MATCHED];
        }
    }
    let truth: Vec<usize> = (0..pool.len()).collect();
    let metrics = retrieval_metrics_from_scores(&scores, &truth, &pool)?;
    debug_assert!(metrics.r1 <= metrics.r5 && metrics.r5 <= metrics.r10);
    Ok(metrics)
}

/// Answer accuracy over every QA pair of a split; argmax ties resolve to the
/// lowest index.
pub fn evaluate_qa(
    params: &Params<f64>,
    model_cfg: &ModelConfig,
    fusion: TemporalFusion,
    aggregation: AggregationKind,
    dataset: &Dataset,
    split: &str,
    plan: &SamplingPlan,
) -> Result<f64> {
    let n = dataset.split_len(split);
    if n == 0 {
        return Err(Error::Input(format!("split `{split}` is empty")));
    }
    let mut correct = 0usize;
    let mut total = 0usize;
    for i in 0..n {
        let example = load_eval_clips(dataset, split, i, plan, model_cfg.frame_size)?;
        for pair in &example.qa {
            let probs = predict_example(
                params,
                model_cfg,
                fusion,
                aggregation,
                &example.clips,
                &pair.question,
                HeadKind::Qa,
            )?;
            let mut best = 0;
            for (k, &p) in probs.iter().enumerate() {
                if p > probs[best] {
                    best = k;
                }
            }
            correct += usize::from(best == pair.answer as usize);
            total += 1;
        }
    }
    Ok(correct as f64 / total as f64)
}
