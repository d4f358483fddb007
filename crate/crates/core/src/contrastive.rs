//! Contrastive objective with false-negative masking, its analytic gradient,
//! and the two-stage (weak, then supervised) embedding trainer.
//!
//! For item `i` of a batch the partition term aggregates five families of
//! scores: the positive, the item's own hard negatives, other queries, other
//! positives against `d_i⁺`, and other positives against `q_i`. Every
//! non-positive term carries a 0/1 mask that drops likely false negatives:
//! a term is masked when its score exceeds `s(q_i, d_i⁺) + 0.1` or when the
//! compared document is textually identical to `d_i⁺`.
//!
//! "Other documents" are the other items' positives. The three in-batch
//! families each compute their own mask from their own score, and use item
//! `j`'s positive text for the duplicate test. Masks are constants of the
//! forward pass and receive no gradient.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{format_document, format_query, normalize_backward, Activations, EncoderParams, FeatureVector};
use crate::error::{Error, Result};
use crate::merge::{Checkpoint, ModelKind};
use crate::numeric::{dot_unchecked, lse_unchecked, Mat64, Seed, Vec64};

/// Margin above the positive score beyond which a negative is treated as false.
pub const FALSE_NEGATIVE_MARGIN: f64 = 0.1;
pub const DEFAULT_TEMPERATURE: f64 = 0.05;
pub const DEFAULT_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairExample {
    pub instruction: String,
    pub query: String,
    pub positive: String,
    pub negatives: Vec<String>,
}

/// `N` items sharing the same number `K` of hard negatives.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingBatch {
    items: Vec<PairExample>,
    negatives: usize,
}

impl TrainingBatch {
    pub fn new(items: Vec<PairExample>) -> Result<Self> {
        let first = items.first().ok_or(Error::Empty("training batch"))?;
        let k = first.negatives.len();
        for (i, it) in items.iter().enumerate() {
            if it.negatives.len() != k {
                return Err(Error::invalid(format!(
                    "item {i} has {} negatives, batch uses {k}",
                    it.negatives.len()
                )));
            }
            if it.query.is_empty() || it.positive.is_empty() {
                return Err(Error::invalid(format!("item {i} has empty query or positive")));
            }
            if it.negatives.iter().any(|n| n == &it.positive) {
                return Err(Error::invalid(format!("item {i} lists its positive as a negative")));
            }
        }
        Ok(TrainingBatch { items, negatives: k })
    }

    pub fn items(&self) -> &[PairExample] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn negatives_per_item(&self) -> usize {
        self.negatives
    }
}

/// Unit embeddings for every slot of a batch plus the texts the duplicate
/// test compares.
#[derive(Debug, Clone)]
pub struct EmbeddedBatch {
    pub queries: Vec<Vec64>,
    pub positives: Vec<Vec64>,
    pub negatives: Vec<Vec<Vec64>>,
    pub positive_texts: Vec<String>,
    pub negative_texts: Vec<Vec<String>>,
}

impl EmbeddedBatch {
    pub fn embed(params: &EncoderParams, batch: &TrainingBatch, target_dim: Option<usize>) -> Result<Self> {
        let mut out = EmbeddedBatch {
            queries: Vec::with_capacity(batch.len()),
            positives: Vec::with_capacity(batch.len()),
            negatives: Vec::with_capacity(batch.len()),
            positive_texts: Vec::new(),
            negative_texts: Vec::new(),
        };
        for it in batch.items() {
            out.queries.push(params.embed_query(&it.instruction, &it.query, target_dim)?);
            out.positives.push(params.embed_document(&it.positive, target_dim)?);
            out.negatives.push(
                it.negatives
                    .iter()
                    .map(|n| params.embed_document(n, target_dim))
                    .collect::<Result<_>>()?,
            );
            out.positive_texts.push(it.positive.clone());
            out.negative_texts.push(it.negatives.clone());
        }
        Ok(out)
    }
}

/// Per-batch similarity matrices and their masks.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityBlock {
    pub s_pos: Vec<f64>,
    /// `N x K`
    pub s_neg: Mat64,
    /// `N x N`, `s(q_i, q_j)`
    pub s_qq: Mat64,
    /// `N x N`, `s(d_i⁺, d_j⁺)`
    pub s_dd: Mat64,
    /// `N x N`, `s(q_i, d_j⁺)`
    pub s_qd: Mat64,
    pub m_neg: Mat64,
    pub m_qq: Mat64,
    pub m_dd: Mat64,
    pub m_qd: Mat64,
}

/// 0 when the score beats the positive by more than the margin or the texts
/// are identical, else 1.
pub fn mask_factor(s_ij: f64, s_pos_i: f64, d_j_text: &str, d_pos_i_text: &str) -> f64 {
    if s_ij > s_pos_i + FALSE_NEGATIVE_MARGIN || d_j_text == d_pos_i_text {
        0.0
    } else {
        1.0
    }
}

fn sim(a: &[f64], b: &[f64]) -> f64 {
    dot_unchecked(a, b).clamp(-1.0, 1.0)
}

impl SimilarityBlock {
    pub fn from_embeddings(e: &EmbeddedBatch) -> Result<Self> {
        let n = e.queries.len();
        if n == 0 {
            return Err(Error::Empty("batch"));
        }
        let k = e.negatives[0].len();
        let mut b = SimilarityBlock {
            s_pos: (0..n).map(|i| sim(&e.queries[i], &e.positives[i])).collect(),
            s_neg: Mat64::zeros(n, k),
            s_qq: Mat64::zeros(n, n),
            s_dd: Mat64::zeros(n, n),
            s_qd: Mat64::zeros(n, n),
            m_neg: Mat64::zeros(n, k),
            m_qq: Mat64::zeros(n, n),
            m_dd: Mat64::zeros(n, n),
            m_qd: Mat64::zeros(n, n),
        };
        for i in 0..n {
            if e.negatives[i].len() != k {
                return Err(Error::Dimension {
                    expected: k,
                    got: e.negatives[i].len(),
                });
            }
            let sp = b.s_pos[i];
            let pos_text = &e.positive_texts[i];
            for kk in 0..k {
                let s = sim(&e.queries[i], &e.negatives[i][kk]);
                b.s_neg.set(i, kk, s);
                b.m_neg.set(i, kk, mask_factor(s, sp, &e.negative_texts[i][kk], pos_text));
            }
            for j in 0..n {
                if i == j {
                    b.s_qq.set(i, j, 1.0);
                    b.s_dd.set(i, j, 1.0);
                    b.s_qd.set(i, j, sp);
                    continue;
                }
                let other = &e.positive_texts[j];
                let qq = sim(&e.queries[i], &e.queries[j]);
                let dd = sim(&e.positives[i], &e.positives[j]);
                let qd = sim(&e.queries[i], &e.positives[j]);
                b.s_qq.set(i, j, qq);
                b.s_dd.set(i, j, dd);
                b.s_qd.set(i, j, qd);
                b.m_qq.set(i, j, mask_factor(qq, sp, other, pos_text));
                b.m_dd.set(i, j, mask_factor(dd, sp, other, pos_text));
                b.m_qd.set(i, j, mask_factor(qd, sp, other, pos_text));
            }
        }
        Ok(b)
    }

    pub fn len(&self) -> usize {
        self.s_pos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.s_pos.is_empty()
    }

    /// Scaled logits (`s/τ`) of the positive followed by every unmasked term,
    /// each paired with its location.
    fn terms(&self, i: usize, tau: f64) -> Vec<(Term, f64)> {
        let n = self.len();
        let mut out = vec![(Term::Positive, self.s_pos[i] / tau)];
        for k in 0..self.s_neg.cols() {
            if self.m_neg.get(i, k) != 0.0 {
                out.push((Term::Negative(k), self.s_neg.get(i, k) / tau));
            }
        }
        for j in (0..n).filter(|&j| j != i) {
            if self.m_qq.get(i, j) != 0.0 {
                out.push((Term::QueryQuery(j), self.s_qq.get(i, j) / tau));
            }
            if self.m_dd.get(i, j) != 0.0 {
                out.push((Term::DocDoc(j), self.s_dd.get(i, j) / tau));
            }
            if self.m_qd.get(i, j) != 0.0 {
                out.push((Term::QueryDoc(j), self.s_qd.get(i, j) / tau));
            }
        }
        out
    }

    fn masked_counts(&self) -> MaskedCounts {
        let n = self.len();
        let off = |m: &Mat64| {
            (0..n)
                .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
                .filter(|&(i, j)| m.get(i, j) == 0.0)
                .count()
        };
        MaskedCounts {
            negatives: self.m_neg.as_slice().iter().filter(|m| **m == 0.0).count(),
            query_query: off(&self.m_qq),
            doc_doc: off(&self.m_dd),
            query_doc: off(&self.m_qd),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Term {
    Positive,
    Negative(usize),
    QueryQuery(usize),
    DocDoc(usize),
    QueryDoc(usize),
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("temperature must be positive, got {tau}")))
    }
}

/// `log Z_i`, computed with a max-shifted log-sum-exp.
pub fn log_partition(i: usize, block: &SimilarityBlock, tau: f64) -> Result<f64> {
    check_tau(tau)?;
    if i >= block.len() {
        return Err(Error::invalid(format!("item {i} out of range")));
    }
    let logits: Vec<f64> = block.terms(i, tau).into_iter().map(|(_, x)| x).collect();
    Ok(lse_unchecked(&logits))
}

/// `Z_i` itself.
pub fn partition(i: usize, block: &SimilarityBlock, tau: f64) -> Result<f64> {
    Ok(log_partition(i, block, tau)?.exp())
}

pub fn similarity_block(params: &EncoderParams, batch: &TrainingBatch) -> Result<SimilarityBlock> {
    SimilarityBlock::from_embeddings(&EmbeddedBatch::embed(params, batch, None)?)
}

/// Number of off-diagonal entries set to 0 in each mask family.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct MaskedCounts {
    pub negatives: usize,
    pub query_query: usize,
    pub doc_doc: usize,
    pub query_doc: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub loss: f64,
    /// `log Z_i - s_pos_i / τ` for every item.
    pub per_item_log_terms: Vec<f64>,
    pub masked_counts: MaskedCounts,
}

pub fn loss_from_block(block: &SimilarityBlock, tau: f64) -> Result<LossReport> {
    check_tau(tau)?;
    if block.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let per: Vec<f64> = (0..block.len())
        .map(|i| Ok(log_partition(i, block, tau)? - block.s_pos[i] / tau))
        .collect::<Result<_>>()?;
    let loss = per.iter().sum::<f64>() / per.len() as f64;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {loss}")));
    }
    Ok(LossReport {
        loss,
        per_item_log_terms: per,
        masked_counts: block.masked_counts(),
    })
}

/// Loss configuration shared by evaluation and training.
#[derive(Debug, Clone, PartialEq)]
pub struct LossOptions {
    pub temperature: f64,
    /// Prefix dimensions at which the objective is averaged; empty means the
    /// full embedding only.
    pub mrl_dims: Vec<usize>,
}

impl LossOptions {
    pub fn new(temperature: f64) -> Self {
        LossOptions {
            temperature,
            mrl_dims: Vec::new(),
        }
    }

    /// `{D, D/2, D/4}`, keeping only dimensions that are at least 8.
    pub fn with_matryoshka(temperature: f64, dim: usize) -> Self {
        let dims = [dim, dim / 2, dim / 4]
            .into_iter()
            .filter(|&d| d >= crate::encoder::MIN_DIM)
            .collect();
        LossOptions {
            temperature,
            mrl_dims: dims,
        }
    }

    fn dims(&self, full: usize) -> Vec<usize> {
        if self.mrl_dims.is_empty() {
            vec![full]
        } else {
            self.mrl_dims.clone()
        }
    }
}

pub fn loss(params: &EncoderParams, batch: &TrainingBatch, tau: f64) -> Result<LossReport> {
    check_tau(tau)?;
    loss_from_block(&similarity_block(params, batch)?, tau)
}

pub fn grad(params: &EncoderParams, batch: &TrainingBatch, tau: f64) -> Result<Vec<f64>> {
    Ok(loss_and_grad(params, batch, &LossOptions::new(tau))?.1)
}

/// One slot of the batch with cached featurization and activations.
struct Slot {
    features: FeatureVector,
    act: Activations,
    grad_output: Vec<f64>,
}

impl Slot {
    fn new(params: &EncoderParams, text: &str) -> Slot {
        let features = params.config().featurize(text);
        let act = params.forward(&features);
        let grad_output = vec![0.0; act.output.len()];
        Slot {
            features,
            act,
            grad_output,
        }
    }

    fn unit(&self, dim: usize) -> Result<Vec64> {
        crate::numeric::l2_normalize(&self.act.output[..dim])
    }
}

/// Mean loss over the configured prefix dims and its gradient in the flat
/// parameter layout.
pub fn loss_and_grad(params: &EncoderParams, batch: &TrainingBatch, opts: &LossOptions) -> Result<(LossReport, Vec<f64>)> {
    check_tau(opts.temperature)?;
    let tau = opts.temperature;
    let n = batch.len();
    let k = batch.negatives_per_item();
    // slot layout: queries [0, n), positives [n, 2n), negatives [2n + i*k + kk]
    let mut slots: Vec<Slot> = Vec::with_capacity(n * (2 + k));
    for it in batch.items() {
        slots.push(Slot::new(params, &format_query(&it.instruction, &it.query)?));
    }
    for it in batch.items() {
        slots.push(Slot::new(params, &format_document(&it.positive)));
    }
    for it in batch.items() {
        for neg in &it.negatives {
            slots.push(Slot::new(params, &format_document(neg)));
        }
    }
    let q = |i: usize| i;
    let p = |i: usize| n + i;
    let ng = |i: usize, kk: usize| 2 * n + i * k + kk;

    let dims = opts.dims(params.dim());
    for &d in &dims {
        params.check_target_dim(Some(d))?;
    }
    let weight = 1.0 / dims.len() as f64;
    let mut first_report: Option<LossReport> = None;
    let mut total_loss = 0.0;

    for &d in &dims {
        let units: Vec<Vec64> = slots.iter().map(|s| s.unit(d)).collect::<Result<_>>()?;
        let embedded = EmbeddedBatch {
            queries: (0..n).map(|i| units[q(i)].clone()).collect(),
            positives: (0..n).map(|i| units[p(i)].clone()).collect(),
            negatives: (0..n)
                .map(|i| (0..k).map(|kk| units[ng(i, kk)].clone()).collect())
                .collect(),
            positive_texts: batch.items().iter().map(|it| it.positive.clone()).collect(),
            negative_texts: batch.items().iter().map(|it| it.negatives.clone()).collect(),
        };
        let block = SimilarityBlock::from_embeddings(&embedded)?;
        let report = loss_from_block(&block, tau)?;
        total_loss += weight * report.loss;

        // dL/ds for each similarity, pushed onto unit-vector gradients
        let mut grad_units: Vec<Vec<f64>> = vec![vec![0.0; d]; slots.len()];
        let scale = weight / (n as f64 * tau);
        let add_pair = |a: usize, b: usize, g: f64, gu: &mut Vec<Vec<f64>>| {
            for t in 0..d {
                gu[a][t] += g * units[b][t];
                gu[b][t] += g * units[a][t];
            }
        };
        for i in 0..n {
            let terms = block.terms(i, tau);
            let logits: Vec<f64> = terms.iter().map(|(_, x)| *x).collect();
            let lz = lse_unchecked(&logits);
            for (term, x) in &terms {
                let prob = (x - lz).exp();
                let g = scale * prob;
                match *term {
                    Term::Positive => add_pair(q(i), p(i), g - scale, &mut grad_units),
                    Term::Negative(kk) => add_pair(q(i), ng(i, kk), g, &mut grad_units),
                    Term::QueryQuery(j) => add_pair(q(i), q(j), g, &mut grad_units),
                    Term::DocDoc(j) => add_pair(p(i), p(j), g, &mut grad_units),
                    Term::QueryDoc(j) => add_pair(q(i), p(j), g, &mut grad_units),
                }
            }
        }
        for (slot, (gu, u)) in slots.iter_mut().zip(grad_units.iter().zip(&units)) {
            let g_raw = normalize_backward(&slot.act.output, u, gu);
            for (acc, g) in slot.grad_output.iter_mut().zip(g_raw) {
                *acc += g;
            }
        }
        if first_report.is_none() {
            first_report = Some(report);
        }
    }

    let mut grad = vec![0.0; params.num_params()];
    for slot in &slots {
        if slot.grad_output.iter().any(|g| *g != 0.0) {
            params.backward(&slot.features, &slot.act, &slot.grad_output, &mut grad);
        }
    }
    let mut report = first_report.expect("at least one dim");
    report.loss = total_loss;
    Ok((report, grad))
}

/// One optimisation stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub temperature: f64,
    pub batch_size: usize,
    pub negatives: usize,
    pub checkpoint_every: usize,
    pub matryoshka: bool,
}

impl Default for StageConfig {
    fn default() -> Self {
        StageConfig {
            steps: 200,
            learning_rate: 0.05,
            momentum: DEFAULT_MOMENTUM,
            temperature: DEFAULT_TEMPERATURE,
            batch_size: 8,
            negatives: 1,
            checkpoint_every: 50,
            matryoshka: false,
        }
    }
}

impl StageConfig {
    pub fn validate(&self) -> Result<()> {
        check_tau(self.temperature)?;
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum must be in [0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::invalid("checkpoint cadence must be positive"));
        }
        Ok(())
    }
}

/// Weak-supervision stage followed by supervised fine-tuning; either may be
/// skipped.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StagePlan {
    pub weak: Option<StageConfig>,
    pub supervised: Option<StageConfig>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Init,
    Weak,
    Supervised,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Init => "init",
            Stage::Weak => "weak",
            Stage::Supervised => "supervised",
        }
    }
}

#[derive(Debug, Clone)]
pub struct StageCheckpoint {
    pub stage: Stage,
    pub checkpoint: Checkpoint,
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub checkpoints: Vec<StageCheckpoint>,
    /// `(stage, global step, batch loss)` for every step.
    pub losses: Vec<(Stage, usize, f64)>,
}

impl TrainRun {
    pub fn final_checkpoint(&self) -> &Checkpoint {
        &self.checkpoints.last().expect("init checkpoint always present").checkpoint
    }

    pub fn stage_checkpoints(&self, stage: Stage) -> Vec<&Checkpoint> {
        self.checkpoints
            .iter()
            .filter(|c| c.stage == stage)
            .map(|c| &c.checkpoint)
            .collect()
    }
}

/// Draws seeded batches from a pool of examples. Items with fewer than `K`
/// negatives are padded with positives of other pool items.
pub struct BatchSampler<'a> {
    pool: &'a [PairExample],
    batch_size: usize,
    negatives: usize,
    rng: rand_chacha::ChaCha8Rng,
}

impl<'a> BatchSampler<'a> {
    pub fn new(pool: &'a [PairExample], batch_size: usize, negatives: usize, seed: Seed) -> Result<Self> {
        if pool.is_empty() {
            return Err(Error::Empty("training data"));
        }
        if batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        Ok(BatchSampler {
            pool,
            batch_size: batch_size.min(pool.len()),
            negatives,
            rng: seed.rng(),
        })
    }

    pub fn next_batch(&mut self) -> Result<TrainingBatch> {
        let picks = sample(&mut self.rng, self.pool.len(), self.batch_size).into_vec();
        let mut items = Vec::with_capacity(picks.len());
        for idx in picks {
            let src = &self.pool[idx];
            let mut negs: Vec<String> = src
                .negatives
                .iter()
                .filter(|n| *n != &src.positive)
                .cloned()
                .collect();
            if negs.len() > self.negatives {
                let keep = sample(&mut self.rng, negs.len(), self.negatives).into_vec();
                negs = keep.into_iter().map(|i| negs[i].clone()).collect();
            }
            let mut attempts = 0;
            while negs.len() < self.negatives {
                attempts += 1;
                if attempts > 64 * (self.negatives + 1) {
                    return Err(Error::invalid(
                        "cannot assemble enough distinct negatives from the pool",
                    ));
                }
                let cand = &self.pool[self.rng.random_range(0..self.pool.len())].positive;
                if cand != &src.positive && !negs.contains(cand) {
                    negs.push(cand.clone());
                }
            }
            items.push(PairExample {
                negatives: negs,
                ..src.clone()
            });
        }
        TrainingBatch::new(items)
    }
}

/// Plain SGD with heavy-ball momentum: `v = μ v + g`, `θ -= η v`.
pub struct MomentumSgd {
    velocity: Vec<f64>,
    learning_rate: f64,
    momentum: f64,
}

impl MomentumSgd {
    pub fn new(num_params: usize, learning_rate: f64, momentum: f64) -> Self {
        MomentumSgd {
            velocity: vec![0.0; num_params],
            learning_rate,
            momentum,
        }
    }

    /// Updates velocity in place and returns it; the caller applies `-lr * v`.
    pub fn step(&mut self, grad: &[f64]) -> &[f64] {
        for (v, g) in self.velocity.iter_mut().zip(grad) {
            *v = self.momentum * *v + g;
        }
        &self.velocity
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }
}

/// Trains from `EncoderParams::init(seed.child(0), config)`.
pub fn train_embedding(
    config: crate::encoder::EncoderConfig,
    plan: &StagePlan,
    weak_data: &[PairExample],
    supervised_data: &[PairExample],
    seed: Seed,
) -> Result<TrainRun> {
    let init = EncoderParams::init(seed.child(0), config)?;
    train_embedding_from(init, plan, weak_data, supervised_data, seed)
}

pub fn train_embedding_from(
    init: EncoderParams,
    plan: &StagePlan,
    weak_data: &[PairExample],
    supervised_data: &[PairExample],
    seed: Seed,
) -> Result<TrainRun> {
    let mut params = init;
    let mut run = TrainRun {
        checkpoints: vec![StageCheckpoint {
            stage: Stage::Init,
            checkpoint: Checkpoint::from_encoder(&params, 0),
        }],
        losses: Vec::new(),
    };
    let mut global_step = 0usize;
    let stages = [
        (Stage::Weak, plan.weak.as_ref(), weak_data, 1u64),
        (Stage::Supervised, plan.supervised.as_ref(), supervised_data, 2u64),
    ];
    for (stage, cfg, data, tag) in stages {
        let Some(cfg) = cfg else { continue };
        cfg.validate()?;
        if cfg.steps == 0 {
            continue;
        }
        if data.is_empty() {
            return Err(Error::invalid(format!("{} stage has no training data", stage.name())));
        }
        let mut sampler = BatchSampler::new(data, cfg.batch_size, cfg.negatives, seed.child(tag))?;
        let opts = if cfg.matryoshka {
            LossOptions::with_matryoshka(cfg.temperature, params.dim())
        } else {
            LossOptions::new(cfg.temperature)
        };
        let mut opt = MomentumSgd::new(params.num_params(), cfg.learning_rate, cfg.momentum);
        for local in 1..=cfg.steps {
            let batch = sampler.next_batch()?;
            let (report, g) = loss_and_grad(&params, &batch, &opts)?;
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::Numeric(format!("non-finite gradient at step {global_step}")));
            }
            let lr = opt.learning_rate();
            params.apply_update(opt.step(&g), -lr);
            global_step += 1;
            run.losses.push((stage, global_step, report.loss));
            if local % cfg.checkpoint_every == 0 || local == cfg.steps {
                run.checkpoints.push(StageCheckpoint {
                    stage,
                    checkpoint: Checkpoint::from_encoder(&params, global_step as u64),
                });
            }
        }
    }
    debug_assert!(run
        .checkpoints
        .iter()
        .all(|c| c.checkpoint.model_kind() == ModelKind::Embedding));
    Ok(run)
}
