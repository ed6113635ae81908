//! Knowledge-weighted denoising objective, AdamW, the training loop and
//! checkpoints.

mod checkpoint;
mod optim;

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, CheckpointHeader, Storage,
};
pub use optim::{adamw_step, AdamWConfig, MomentSlot, OptimizerState};

use crate::autodiff::{Gradients, Graph, NodeId};
use crate::conditioning::{
    augment_sample, build_attention_scale, build_loss_weight, build_text_encoder, tokenize_plain, tokenize_with_tags,
    AnnotatedCaption, AugmentationRecord, Vocabulary,
};
use crate::config::{KnowledgeConfig, TrainConfig};
use crate::denoiser::{build_denoiser, patchify};
use crate::error::{Error, Result};
use crate::mode::{expert_prefix, init_bank, BankConfig, ExpertBank, TEXT_PREFIX};
use crate::rng::{purpose, stream};
use crate::scalar::Scalar;
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;

/// One training example: a clean image and its annotated caption.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainItem<S> {
    pub image: Tensor<S>,
    pub caption: AnnotatedCaption,
}

/// The per-item draws of the denoising objective.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemDraw<S> {
    pub t: usize,
    pub unconditional: bool,
    pub eps: Tensor<S>,
}

/// Draws `t`, the condition-dropout decision and `ε` for item `id` at
/// `step`, in that order, from the item's own stream.
pub fn draw_item<S: Scalar>(steps: usize, shape: &[usize], p_uncond: f64, seed: u64, step: u64, id: u64) -> ItemDraw<S> {
    let mut rng = stream(&[seed, purpose::NOISE, step, id]);
    let t = rng.gen_range(1..=steps);
    let unconditional = rng.gen::<f64>() < p_uncond;
    let eps = Tensor::randn(shape, &mut rng);
    ItemDraw { t, unconditional, eps }
}

/// `mean(W ⊙ (ε − ε̂)²)` over all entries; `weight` must have the shape of `eps`.
pub fn weighted_mse<S: Scalar>(eps: &Tensor<S>, eps_hat: &Tensor<S>, weight: Option<&Tensor<S>>) -> Result<S> {
    let sq = eps.zip_map(eps_hat, |a, b| (b - a) * (b - a))?;
    let w = match weight {
        Some(w) => sq.mul(w)?,
        None => sq,
    };
    Ok(w.mean())
}

/// Expands an `h × w` weight map over channels and cuts it into patches.
fn weight_tokens<S: Scalar>(map: &Tensor<S>, channels: usize, patch: usize) -> Result<Tensor<S>> {
    let (h, w) = map.dims2()?;
    let data = map.data().iter().flat_map(|&v| std::iter::repeat(v).take(channels)).collect();
    patchify(&Tensor::new(vec![h, w, channels], data)?, patch)
}

/// What happened to one item of a batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemTrace {
    pub id: usize,
    pub t: usize,
    pub expert: usize,
    pub unconditional: bool,
    pub augmentation: AugmentationRecord,
}

#[derive(Debug, Clone)]
pub struct BatchLoss<S> {
    pub loss: S,
    pub grads: Gradients<S>,
    /// Items routed to each expert.
    pub expert_hist: Vec<usize>,
    pub items: Vec<ItemTrace>,
}

/// Knobs of the knowledge-enhanced objective.
#[derive(Debug, Clone)]
pub struct LossSettings<'a> {
    pub knowledge: &'a KnowledgeConfig,
    pub p_uncond: f64,
    pub vocab: &'a Vocabulary,
    pub seed: u64,
    pub step: u64,
}

fn item_loss<S: Scalar>(
    g: &mut Graph<S>,
    cfg: &BankConfig,
    expert: usize,
    xt: &Tensor<S>,
    t: usize,
    text: Option<&[usize]>,
    scale: Option<&crate::conditioning::AttentionScale<S>>,
    eps: &Tensor<S>,
    weight: Option<Tensor<S>>,
) -> Result<NodeId> {
    let d = &cfg.denoiser;
    let y = match text {
        Some(tokens) => build_text_encoder(g, &cfg.text, TEXT_PREFIX, tokens)?,
        None => None,
    };
    let x = g.constant(patchify(xt, d.patch)?);
    let nodes = build_denoiser(g, d, &expert_prefix(expert), x, t, y, scale)?;
    let target = g.constant(patchify(eps, d.patch)?);
    let diff = g.sub(target, nodes.eps_tokens);
    let mut sq = g.square(diff);
    if let Some(w) = weight {
        let w = g.constant(w);
        sq = g.mul(sq, w);
    }
    Ok(g.mean(sq))
}

/// An unevaluated batch objective: the graph, its scalar root and what
/// happened to each item.
pub struct LossGraph<S: Scalar> {
    pub graph: Graph<S>,
    pub root: NodeId,
    pub expert_hist: Vec<usize>,
    pub items: Vec<ItemTrace>,
}

impl<S: Scalar> LossGraph<S> {
    fn new(mut graph: Graph<S>, losses: Vec<NodeId>, expert_hist: Vec<usize>, items: Vec<ItemTrace>) -> Self {
        let mut total = losses[0];
        for &l in &losses[1..] {
            total = graph.add(total, l);
        }
        let root = graph.scale(total, S::lit(1.0 / losses.len() as f64));
        Self { graph, root, expert_hist, items }
    }

    /// Forward and backward passes against `bank`.
    pub fn evaluate(mut self, bank: &ExpertBank<S>) -> Result<BatchLoss<S>> {
        self.graph.forward(bank)?;
        let loss = self.graph.value(self.root).expect("evaluated").item();
        let grads = self.graph.backward(self.root)?;
        Ok(BatchLoss { loss, grads, expert_hist: self.expert_hist, items: self.items })
    }
}

/// Batch-mean knowledge-weighted loss and its gradients.
pub fn training_loss<S: Scalar>(
    bank: &ExpertBank<S>,
    schedule: &NoiseSchedule<S>,
    batch: &[(usize, &TrainItem<S>)],
    settings: &LossSettings<'_>,
) -> Result<BatchLoss<S>> {
    training_graph(bank, schedule, batch, settings)?.evaluate(bank)
}

/// Builds the knowledge-weighted batch objective without evaluating it.
///
/// Items are processed in ascending id order whatever the order of `batch`,
/// and each draws from streams keyed by its id, so the result does not depend
/// on how the batch was assembled.
pub fn training_graph<S: Scalar>(
    bank: &ExpertBank<S>,
    schedule: &NoiseSchedule<S>,
    batch: &[(usize, &TrainItem<S>)],
    settings: &LossSettings<'_>,
) -> Result<LossGraph<S>> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut order: Vec<&(usize, &TrainItem<S>)> = batch.iter().collect();
    order.sort_by_key(|(id, _)| *id);
    let cfg = bank.config();
    let d = &cfg.denoiser;
    let n_x = d.n_tokens();
    let kn = settings.knowledge;

    let mut g = Graph::new();
    let mut losses = Vec::with_capacity(order.len());
    let mut hist = vec![0; bank.experts()];
    let mut traces = Vec::with_capacity(order.len());
    for &&(id, item) in &order {
        let mut aug_rng = stream(&[settings.seed, purpose::AUGMENT, settings.step, id as u64]);
        let aug = augment_sample(&item.caption, &kn.policy, &mut aug_rng);
        let draw = draw_item::<S>(schedule.steps(), item.image.shape(), settings.p_uncond, settings.seed, settings.step, id as u64);
        let xt = schedule.q_sample(&item.image, draw.t, &draw.eps)?;
        let expert = bank.route(draw.t)?;
        hist[expert] += 1;

        let (tokens, scale) = if draw.unconditional {
            (None, None)
        } else {
            let c = if aug.record.tokens_inserted {
                tokenize_with_tags(settings.vocab, &aug.words, &aug.tags)?
            } else {
                tokenize_plain(settings.vocab, &aug.words, &aug.tags)?
            };
            let scale = if aug.record.attention_strengthened && !c.is_empty() {
                Some(build_attention_scale::<S>(n_x, &c.keyword_flags, kn.w_a, true)?)
            } else {
                None
            };
            (Some(c.tokens), scale)
        };
        let weight = if aug.record.loss_weighted {
            let map = build_loss_weight::<S>(&aug.region_masks, kn.w_l, d.height, d.width)?;
            Some(weight_tokens(&map.matrix, d.channels, d.patch)?)
        } else {
            None
        };
        let text = tokens.as_deref().filter(|t| !t.is_empty());
        losses.push(item_loss(&mut g, cfg, expert, &xt, draw.t, text, scale.as_ref(), &draw.eps, weight)?);
        traces.push(ItemTrace {
            id,
            t: draw.t,
            expert,
            unconditional: draw.unconditional,
            augmentation: aug.record,
        });
    }
    Ok(LossGraph::new(g, losses, hist, traces))
}

/// The baseline objective: unweighted noise regression with condition
/// dropout, one network, captions tokenized word for word.
pub fn plain_ddpm_loss<S: Scalar>(
    model: &ExpertBank<S>,
    schedule: &NoiseSchedule<S>,
    batch: &[(usize, &TrainItem<S>)],
    vocab: &Vocabulary,
    p_uncond: f64,
    seed: u64,
    step: u64,
) -> Result<BatchLoss<S>> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if model.experts() != 1 {
        return Err(Error::Config("the baseline objective trains a single network".into()));
    }
    let mut order: Vec<&(usize, &TrainItem<S>)> = batch.iter().collect();
    order.sort_by_key(|(id, _)| *id);
    let cfg = model.config();
    let mut g = Graph::new();
    let mut losses = Vec::with_capacity(order.len());
    let mut traces = Vec::with_capacity(order.len());
    for &&(id, item) in &order {
        let draw = draw_item::<S>(schedule.steps(), item.image.shape(), p_uncond, seed, step, id as u64);
        let xt = schedule.q_sample(&item.image, draw.t, &draw.eps)?;
        let tokens = if draw.unconditional {
            None
        } else {
            Some(tokenize_plain(vocab, &item.caption.words, &item.caption.tags)?.tokens)
        };
        let text = tokens.as_deref().filter(|t| !t.is_empty());
        losses.push(item_loss(&mut g, cfg, 0, &xt, draw.t, text, None, &draw.eps, None)?);
        traces.push(ItemTrace {
            id,
            t: draw.t,
            expert: 0,
            unconditional: draw.unconditional,
            augmentation: AugmentationRecord::default(),
        });
    }
    LossGraph::new(g, losses, vec![order.len()], traces).evaluate(model)
}

/// Loss of one training step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub experts: Vec<usize>,
}

#[derive(Debug, Default)]
pub struct TrainOptions<S: Scalar> {
    /// Directory for metrics logs and checkpoints.
    pub out_dir: Option<PathBuf>,
    pub resume: Option<Checkpoint<S>>,
    /// Stop after this step even if the budget is larger.
    pub stop_after: Option<usize>,
    pub storage: Option<Storage>,
    /// Use the baseline objective instead of the knowledge-weighted one.
    pub plain: bool,
}

#[derive(Debug)]
pub struct TrainOutcome<S: Scalar> {
    pub bank: ExpertBank<S>,
    pub optimizer: OptimizerState<S>,
    pub records: Vec<StepRecord>,
    pub step: usize,
}

impl<S: Scalar> TrainOutcome<S> {
    pub fn checkpoint(&self, cfg: &TrainConfig, vocab: &Vocabulary) -> Checkpoint<S> {
        make_checkpoint(&self.bank, &self.optimizer, cfg, vocab, self.step)
    }
}

fn make_checkpoint<S: Scalar>(
    bank: &ExpertBank<S>,
    optimizer: &OptimizerState<S>,
    cfg: &TrainConfig,
    vocab: &Vocabulary,
    step: usize,
) -> Checkpoint<S> {
    Checkpoint {
        header: CheckpointHeader {
            schedule: cfg.schedule,
            bank: bank.config().clone(),
            partition: bank.partition(),
            w_a: cfg.knowledge.w_a,
            w_l: cfg.knowledge.w_l,
            vocab: vocab.to_text().lines().map(str::to_string).collect(),
            step,
            config: Some(cfg.clone()),
            optimizer_steps: Default::default(),
        },
        bank: bank.clone(),
        optimizer: optimizer.clone(),
    }
}

fn append_line(file: &mut Option<File>, value: &serde_json::Value) -> Result<()> {
    if let Some(f) = file {
        writeln!(f, "{value}")?;
    }
    Ok(())
}

fn open_log(dir: &Option<PathBuf>, name: &str) -> Result<Option<File>> {
    match dir {
        Some(d) => {
            std::fs::create_dir_all(d)?;
            Ok(Some(OpenOptions::new().create(true).append(true).open(d.join(name))?))
        }
        None => Ok(None),
    }
}

pub fn checkpoint_path(dir: &Path, step: usize) -> PathBuf {
    dir.join(format!("step-{step:06}.ckpt"))
}

/// Runs the warm-start phase with one expert, copies it into every expert
/// and trains the bank for the rest of the step budget.
///
/// Deterministic given `cfg.seed`: every random draw comes from a stream
/// keyed by the seed, the step and the item id. A run resumed from a
/// checkpoint reproduces the uninterrupted run's losses exactly.
pub fn train<S: Scalar>(
    cfg: &TrainConfig,
    items: &[TrainItem<S>],
    vocab: &Vocabulary,
    opts: TrainOptions<S>,
) -> Result<TrainOutcome<S>> {
    cfg.validate()?;
    if items.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let schedule = NoiseSchedule::<S>::from_spec(&cfg.schedule)?;
    let n = cfg.experts;
    let warm = if n > 1 { cfg.train.warm_steps } else { 0 };
    let adam = AdamWConfig {
        lr: cfg.train.lr,
        beta1: cfg.train.beta1,
        beta2: cfg.train.beta2,
        eps: cfg.train.eps,
        weight_decay: cfg.train.weight_decay,
    };
    let settings = |step: usize| LossSettings {
        knowledge: &cfg.knowledge,
        p_uncond: cfg.train.p_uncond,
        vocab,
        seed: cfg.seed,
        step: step as u64,
    };

    let (mut bank, mut optimizer, start) = match opts.resume {
        Some(ck) => (ck.bank, ck.optimizer, ck.header.step + 1),
        None => {
            let first = if warm > 0 { 1 } else { n };
            let mut rng = stream(&[cfg.seed, purpose::INIT]);
            (init_bank(cfg.bank_config(first, vocab.len()), None, &mut rng)?, OptimizerState::new(), 1)
        }
    };
    let mut metrics = open_log(&opts.out_dir, "metrics.jsonl")?;
    let mut timing = open_log(&opts.out_dir, "timing.jsonl")?;
    let last = opts.stop_after.map_or(cfg.train.steps, |s| s.min(cfg.train.steps));
    let storage = opts.storage.unwrap_or(Storage::F64);
    let clock = Instant::now();
    let mut records = Vec::new();

    for step in start..=last {
        if bank.experts() != n && step > warm {
            bank = bank.expand(n)?;
            let copies: Vec<_> = (0..n).flat_map(|i| optimizer.copy_prefix(&expert_prefix(0), &expert_prefix(i))).collect();
            optimizer.slots.extend(copies);
            log::info!("step {step}: expanded warm-started model into {n} experts");
        }
        let ids = index::sample(&mut stream(&[cfg.seed, purpose::BATCH, step as u64]), items.len(), cfg.train.batch.min(items.len()))
            .into_vec();
        let batch: Vec<(usize, &TrainItem<S>)> = ids.iter().map(|&i| (i, &items[i])).collect();
        let out = if opts.plain {
            plain_ddpm_loss(&bank, &schedule, &batch, vocab, cfg.train.p_uncond, cfg.seed, step as u64)?
        } else {
            training_loss(&bank, &schedule, &batch, &settings(step))?
        };
        adamw_step(bank.params_mut(), &out.grads, &mut optimizer, &adam)?;
        let rec = StepRecord { step, loss: out.loss.as_f64(), experts: out.expert_hist };
        if step % cfg.train.log_every == 0 || step == last {
            append_line(&mut metrics, &serde_json::json!({"step": rec.step, "loss": rec.loss, "experts": rec.experts}))?;
            append_line(&mut timing, &serde_json::json!({"step": step, "wall_ms": clock.elapsed().as_millis() as u64}))?;
            log::info!("step {step} loss {:.6}", rec.loss);
        }
        records.push(rec);
        if let Some(dir) = &opts.out_dir {
            if cfg.train.checkpoint_every > 0 && step % cfg.train.checkpoint_every == 0 {
                save_checkpoint(&make_checkpoint(&bank, &optimizer, cfg, vocab, step), &checkpoint_path(dir, step), storage)?;
            }
        }
    }
    let step = last.max(start.saturating_sub(1));
    let outcome = TrainOutcome { bank, optimizer, records, step };
    if let Some(dir) = &opts.out_dir {
        save_checkpoint(&outcome.checkpoint(cfg, vocab), &dir.join("final.ckpt"), storage)?;
    }
    Ok(outcome)
}
