//! Pointwise yes/no reranking.
//!
//! The toy scorer mirrors a chat-templated LLM judge: the rendered prompt is
//! featurized into hashed n-grams (unit L2 norm) and concatenated with
//! `dim · (e_q ⊙ e_d)`, the scaled elementwise product of the query and
//! document embeddings. A `2 x joint_dim` head maps the joint vector to the
//! logits of the next token being "no" (row 0) and "yes" (row 1).

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::contrastive::{MomentumSgd, Stage, StageCheckpoint, StagePlan, TrainRun};
use crate::encoder::{featurize, format_document, format_query, normalize_backward, EncoderConfig, EncoderParams, FeatureVector};
use crate::error::{Error, Result};
use crate::merge::{ArchMeta, Checkpoint, ModelKind};
use crate::numeric::{l2_normalize, Mat64, Seed};

pub const JUDGE_INSTRUCTION: &str = "Judge whether the Document meets the requirements based on the Query and the Instruct provided. Note that the answer can only be \"yes\" or \"no\".";

/// Chat-template prompt for one (instruction, query, document) triple.
pub fn render_prompt(instruction: &str, query: &str, document: &str) -> Result<String> {
    if query.is_empty() || document.is_empty() {
        return Err(Error::invalid("query and document must be nonempty"));
    }
    Ok(format!(
        "<|im_start|>system\n{JUDGE_INSTRUCTION}<|im_end|>\n<|im_start|>user\n<Instruct>: {instruction}\n<Query>: {query}\n<Document>: {document}<|im_end|>\n<|im_start|>assistant\n<think>\n\n</think>\n\n"
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    No,
    Yes,
}

impl Label {
    fn index(self) -> usize {
        match self {
            Label::No => 0,
            Label::Yes => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RerankInstance {
    pub instruction: String,
    pub query: String,
    pub document: String,
    pub rendered_prompt: String,
    pub label: Option<Label>,
}

impl RerankInstance {
    pub fn new(instruction: &str, query: &str, document: &str, label: Option<Label>) -> Result<Self> {
        Ok(RerankInstance {
            rendered_prompt: render_prompt(instruction, query, document)?,
            instruction: instruction.to_owned(),
            query: query.to_owned(),
            document: document.to_owned(),
            label,
        })
    }
}

/// One "yes" instance per positive and one "no" per listed negative.
pub fn instances_from_pairs<'a, I>(records: I) -> Result<Vec<RerankInstance>>
where
    I: IntoIterator<Item = &'a crate::data::PairRecord>,
{
    let mut out = Vec::new();
    for r in records {
        out.push(RerankInstance::new(&r.instruction, &r.query, &r.positive, Some(Label::Yes))?);
        for n in &r.negatives {
            out.push(RerankInstance::new(&r.instruction, &r.query, n, Some(Label::No))?);
        }
    }
    Ok(out)
}

/// Writes one JSON string literal per line.
pub fn export_prompts(instances: &[RerankInstance], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for inst in instances {
        serde_json::to_writer(&mut w, &inst.rendered_prompt)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// `e^yes / (e^yes + e^no)` via a shifted two-way softmax.
pub fn score_from_logits(logit_yes: f64, logit_no: f64) -> f64 {
    let d = logit_yes - logit_no;
    if d >= 0.0 {
        1.0 / (1.0 + (-d).exp())
    } else {
        let e = d.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RerankParams {
    pub encoder: EncoderParams,
    pub prompt_features: usize,
    /// `2 x joint_dim`; row 0 scores "no", row 1 scores "yes".
    pub head: Mat64,
}

struct JointForward {
    prompt: FeatureVector,
    prompt_norm: f64,
    q_features: FeatureVector,
    d_features: FeatureVector,
    q_act: crate::encoder::Activations,
    d_act: crate::encoder::Activations,
    q_unit: Vec<f64>,
    d_unit: Vec<f64>,
    product: Vec<f64>,
}

/// At init, `logit_yes - logit_no = INIT_MARGIN * cos(q, d)`.
pub const INIT_MARGIN: f64 = 4.0;

impl RerankParams {
    /// Encoder from `seed.child(0)`, head uniform in `±1/sqrt(joint_dim)`
    /// from `seed.child(1)`.
    pub fn init(seed: Seed, encoder: EncoderConfig, prompt_features: usize) -> Result<Self> {
        let enc = EncoderParams::init(seed.child(0), encoder)?;
        let mut p = Self::with_encoder(enc, prompt_features)?;
        let b = 1.0 / (p.joint_dim() as f64).sqrt();
        let mut rng = seed.child(1).rng();
        for w in p.head.as_mut_slice() {
            *w = rng.random_range(-b..=b);
        }
        Ok(p)
    }

    /// Starts from an existing encoder (typically a trained embedding model)
    /// with a head that reproduces the encoder's cosine ranking: prompt
    /// weights and bias zero, product weights `±INIT_MARGIN / (2D)`.
    pub fn with_encoder(encoder: EncoderParams, prompt_features: usize) -> Result<Self> {
        if prompt_features < crate::encoder::MIN_FEATURES {
            return Err(Error::invalid("prompt feature space must be at least 256"));
        }
        let d = encoder.dim();
        let joint = prompt_features + d + 1;
        let mut head = Mat64::zeros(2, joint);
        let w = INIT_MARGIN / (2.0 * d as f64);
        for i in prompt_features..prompt_features + d {
            head.set(0, i, -w);
            head.set(1, i, w);
        }
        Ok(RerankParams {
            head,
            encoder,
            prompt_features,
        })
    }

    /// Prompt buckets, then `D` embedding products, then a bias slot.
    pub fn joint_dim(&self) -> usize {
        self.prompt_features + self.encoder.dim() + 1
    }

    pub fn num_params(&self) -> usize {
        self.encoder.num_params() + 2 * self.joint_dim()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut v = self.encoder.flatten();
        v.extend_from_slice(self.head.as_slice());
        v
    }

    pub fn from_flat(encoder: EncoderConfig, joint_dim: usize, flat: &[f64]) -> Result<Self> {
        let en = encoder.num_params();
        if joint_dim <= encoder.dim + 1 || flat.len() != en + 2 * joint_dim {
            return Err(Error::Dimension {
                expected: en + 2 * joint_dim,
                got: flat.len(),
            });
        }
        Ok(RerankParams {
            encoder: EncoderParams::from_flat(encoder, &flat[..en])?,
            prompt_features: joint_dim - encoder.dim - 1,
            head: Mat64::from_vec(2, joint_dim, flat[en..].to_vec())?,
        })
    }

    fn apply_update(&mut self, delta: &[f64], scale: f64, encoder_scale: f64) {
        let en = self.encoder.num_params();
        if encoder_scale != 0.0 {
            self.encoder.apply_update(&delta[..en], scale * encoder_scale);
        }
        for (w, d) in self.head.as_mut_slice().iter_mut().zip(&delta[en..]) {
            *w += scale * d;
        }
    }

    fn forward(&self, inst: &RerankInstance) -> Result<JointForward> {
        let cfg = self.encoder.config();
        let prompt = featurize(&inst.rendered_prompt, self.prompt_features, cfg.ngram_min, cfg.ngram_max)?;
        let prompt_norm = prompt.l2_norm();
        let q_features = cfg.featurize(&format_query(&inst.instruction, &inst.query)?);
        let d_features = cfg.featurize(&format_document(&inst.document));
        let q_act = self.encoder.forward(&q_features);
        let d_act = self.encoder.forward(&d_features);
        let q_unit = l2_normalize(&q_act.output)?.into_inner();
        let d_unit = l2_normalize(&d_act.output)?.into_inner();
        let scale = self.encoder.dim() as f64;
        let product = q_unit.iter().zip(&d_unit).map(|(a, b)| scale * a * b).collect();
        Ok(JointForward {
            prompt,
            prompt_norm,
            q_features,
            d_features,
            q_act,
            d_act,
            q_unit,
            d_unit,
            product,
        })
    }

    fn logits_of(&self, f: &JointForward) -> [f64; 2] {
        let mut out = [0.0; 2];
        for (r, o) in out.iter_mut().enumerate() {
            let row = self.head.row(r);
            let mut acc = 0.0;
            if f.prompt_norm > 0.0 {
                for (i, w) in f.prompt.iter() {
                    acc += row[i] * w / f.prompt_norm;
                }
            }
            let d = f.product.len();
            acc += crate::numeric::dot_unchecked(&row[self.prompt_features..self.prompt_features + d], &f.product);
            *o = acc + row[self.prompt_features + d];
        }
        out
    }

    /// Dense joint feature vector, exposed for independent recomputation.
    pub fn joint_features(&self, inst: &RerankInstance) -> Result<Vec<f64>> {
        let f = self.forward(inst)?;
        let mut v = vec![0.0; self.joint_dim()];
        if f.prompt_norm > 0.0 {
            for (i, w) in f.prompt.iter() {
                v[i] = w / f.prompt_norm;
            }
        }
        let d = f.product.len();
        v[self.prompt_features..self.prompt_features + d].copy_from_slice(&f.product);
        v[self.prompt_features + d] = 1.0;
        Ok(v)
    }

    /// `(logit_no, logit_yes)`.
    pub fn logits(&self, inst: &RerankInstance) -> Result<(f64, f64)> {
        let l = self.logits_of(&self.forward(inst)?);
        Ok((l[0], l[1]))
    }

    pub fn score(&self, inst: &RerankInstance) -> Result<f64> {
        let (no, yes) = self.logits(inst)?;
        Ok(score_from_logits(yes, no))
    }

    fn loss_and_grad_into(&self, inst: &RerankInstance, weight: f64, grad: &mut [f64]) -> Result<f64> {
        let label = inst.label.ok_or_else(|| Error::invalid("rerank loss needs a label"))?;
        let f = self.forward(inst)?;
        let logits = self.logits_of(&f);
        let probs = crate::numeric::softmax(&logits)?;
        let loss = crate::numeric::lse_unchecked(&logits) - logits[label.index()];
        let g_logit: Vec<f64> = (0..2)
            .map(|r| weight * (probs[r] - if r == label.index() { 1.0 } else { 0.0 }))
            .collect();
        let en = self.encoder.num_params();
        let joint = self.joint_dim();
        let d = self.encoder.dim();
        let mut g_prod = vec![0.0; d];
        for r in 0..2 {
            let gr = g_logit[r];
            let head_grad = &mut grad[en + r * joint..en + (r + 1) * joint];
            if f.prompt_norm > 0.0 {
                for (i, w) in f.prompt.iter() {
                    head_grad[i] += gr * w / f.prompt_norm;
                }
            }
            let row = self.head.row(r);
            for k in 0..d {
                head_grad[self.prompt_features + k] += gr * f.product[k];
                g_prod[k] += gr * row[self.prompt_features + k];
            }
            head_grad[self.prompt_features + d] += gr;
        }
        let scale = d as f64;
        let g_q: Vec<f64> = (0..d).map(|k| g_prod[k] * scale * f.d_unit[k]).collect();
        let g_d: Vec<f64> = (0..d).map(|k| g_prod[k] * scale * f.q_unit[k]).collect();
        let gq_raw = normalize_backward(&f.q_act.output, &f.q_unit, &g_q);
        let gd_raw = normalize_backward(&f.d_act.output, &f.d_unit, &g_d);
        self.encoder.backward(&f.q_features, &f.q_act, &gq_raw, &mut grad[..en]);
        self.encoder.backward(&f.d_features, &f.d_act, &gd_raw, &mut grad[..en]);
        Ok(loss)
    }

    /// Gradient of [`rerank_loss`] in the flat layout.
    pub fn loss_and_grad(&self, inst: &RerankInstance) -> Result<(f64, Vec<f64>)> {
        let mut g = vec![0.0; self.num_params()];
        let l = self.loss_and_grad_into(inst, 1.0, &mut g)?;
        Ok((l, g))
    }

    pub fn to_checkpoint(&self, step: u64) -> Checkpoint {
        let meta = ArchMeta {
            encoder: *self.encoder.config(),
            joint_dim: self.joint_dim(),
        };
        Checkpoint::new(ModelKind::Reranker, meta, step, &self.flatten())
            .expect("reranker params are always consistent")
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.model_kind() != ModelKind::Reranker {
            return Err(Error::Incompatible("expected a reranker checkpoint".into()));
        }
        RerankParams::from_flat(ck.meta().encoder, ck.meta().joint_dim, ck.params())
    }
}

pub fn rerank_logits(params: &RerankParams, inst: &RerankInstance) -> Result<(f64, f64)> {
    params.logits(inst)
}

/// `-log p(label | prompt)` under the two-way softmax.
pub fn rerank_loss(params: &RerankParams, inst: &RerankInstance) -> Result<f64> {
    let label = inst.label.ok_or_else(|| Error::invalid("rerank loss needs a label"))?;
    let (no, yes) = params.logits(inst)?;
    let l = [no, yes];
    Ok(crate::numeric::lse_unchecked(&l) - l[label.index()])
}

/// Knobs specific to reranker fine-tuning.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RerankOptions {
    /// Multiplier on the learning rate of the shared encoder block; `0`
    /// trains the head only.
    pub encoder_lr_scale: f64,
}

impl Default for RerankOptions {
    fn default() -> Self {
        RerankOptions { encoder_lr_scale: 1.0 }
    }
}

/// Supervised fine-tuning only: the plan must have no weak stage.
pub fn train_reranker(init: RerankParams, plan: &StagePlan, data: &[RerankInstance], seed: Seed) -> Result<TrainRun> {
    train_reranker_with(init, plan, data, seed, &RerankOptions::default())
}

pub fn train_reranker_with(
    init: RerankParams,
    plan: &StagePlan,
    data: &[RerankInstance],
    seed: Seed,
    options: &RerankOptions,
) -> Result<TrainRun> {
    if !(options.encoder_lr_scale.is_finite() && options.encoder_lr_scale >= 0.0) {
        return Err(Error::invalid("encoder_lr_scale must be finite and non-negative"));
    }
    if plan.weak.is_some() {
        return Err(Error::invalid("reranker training has no weak-supervision stage"));
    }
    let cfg = plan
        .supervised
        .as_ref()
        .ok_or_else(|| Error::invalid("reranker plan needs a supervised stage"))?;
    cfg.validate()?;
    let mut params = init;
    let mut run = TrainRun {
        checkpoints: vec![StageCheckpoint {
            stage: Stage::Init,
            checkpoint: params.to_checkpoint(0),
        }],
        losses: Vec::new(),
    };
    if cfg.steps == 0 {
        return Ok(run);
    }
    if data.is_empty() {
        return Err(Error::invalid("reranker stage has no training data"));
    }
    if data.iter().any(|d| d.label.is_none()) {
        return Err(Error::invalid("reranker training data must be labeled"));
    }
    let mut rng = seed.child(3).rng();
    let bs = cfg.batch_size.min(data.len());
    let mut opt = MomentumSgd::new(params.num_params(), cfg.learning_rate, cfg.momentum);
    for step in 1..=cfg.steps {
        let picks = sample(&mut rng, data.len(), bs).into_vec();
        let mut g = vec![0.0; params.num_params()];
        let w = 1.0 / bs as f64;
        let mut total = 0.0;
        for i in picks {
            total += w * params.loss_and_grad_into(&data[i], w, &mut g)?;
        }
        if !total.is_finite() || g.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric(format!("non-finite reranker update at step {step}")));
        }
        let lr = opt.learning_rate();
        params.apply_update(opt.step(&g), -lr, options.encoder_lr_scale);
        run.losses.push((Stage::Supervised, step, total));
        if step % cfg.checkpoint_every == 0 || step == cfg.steps {
            run.checkpoints.push(StageCheckpoint {
                stage: Stage::Supervised,
                checkpoint: params.to_checkpoint(step as u64),
            });
        }
    }
    Ok(run)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoredCandidate {
    pub doc_id: String,
    pub score: f64,
}

/// The query side of a scoring request.
#[derive(Debug, Clone, Copy)]
pub struct QueryRef<'a> {
    pub qid: &'a str,
    pub instruction: &'a str,
    pub text: &'a str,
}

/// Anything that scores a (query, document) pair into `[0, 1]`.
pub trait RelevanceScorer: Sync {
    fn score(&self, query: QueryRef<'_>, doc_id: &str, doc_text: &str) -> Result<f64>;
}

impl RelevanceScorer for RerankParams {
    fn score(&self, query: QueryRef<'_>, _doc_id: &str, doc_text: &str) -> Result<f64> {
        RerankParams::score(self, &RerankInstance::new(query.instruction, query.text, doc_text, None)?)
    }
}

/// Sorts by score descending, ties by ascending doc id.
pub fn sort_candidates(cands: &mut [ScoredCandidate]) {
    cands.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.doc_id.cmp(&b.doc_id)));
}

pub fn rank_candidates<S: RelevanceScorer + ?Sized>(
    scorer: &S,
    query: QueryRef<'_>,
    candidates: &[(String, String)],
) -> Result<Vec<ScoredCandidate>> {
    if candidates.is_empty() {
        return Err(Error::Empty("rerank candidates"));
    }
    let mut out: Vec<ScoredCandidate> = candidates
        .iter()
        .map(|(id, text)| {
            let score = scorer.score(query, id, text)?;
            if !(0.0..=1.0).contains(&score) {
                return Err(Error::Numeric(format!("score {score} outside [0, 1]")));
            }
            Ok(ScoredCandidate {
                doc_id: id.clone(),
                score,
            })
        })
        .collect::<Result<_>>()?;
    sort_candidates(&mut out);
    Ok(out)
}

pub fn rerank(params: &RerankParams, instruction: &str, query: &str, candidates: &[(String, String)]) -> Result<Vec<ScoredCandidate>> {
    let q = QueryRef {
        qid: "",
        instruction,
        text: query,
    };
    rank_candidates(params, q, candidates)
}
