//! Retrieval evaluation: exhaustive search, ranking metrics, the
//! retrieve-then-rerank protocol and the training ablation runner.

pub mod toybench;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::contrastive::{train_embedding, PairExample, Stage, StageConfig, StagePlan, TrainRun};
use crate::data::PairRecord;
use crate::encoder::{EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::merge::{merge_loaded, Checkpoint, MergeConfig};
use crate::numeric::{dot_unchecked, Seed, Vec64};
use crate::reranker::{rank_candidates, sort_candidates, QueryRef, RelevanceScorer, ScoredCandidate};

pub const QUERIES_FILE: &str = "queries.jsonl";
pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const QRELS_FILE: &str = "qrels.jsonl";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalQuery {
    pub qid: String,
    pub instruction: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalDoc {
    pub doc_id: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Qrel {
    pub qid: String,
    pub doc_id: String,
    pub relevance: u32,
}

/// Graded relevance for one query: doc id → grade.
pub type Relevance = BTreeMap<String, u32>;

#[derive(Debug, Clone, PartialEq)]
pub struct EvalTask {
    queries: Vec<EvalQuery>,
    corpus: Vec<EvalDoc>,
    qrels: BTreeMap<String, Relevance>,
}

impl EvalTask {
    pub fn new(queries: Vec<EvalQuery>, corpus: Vec<EvalDoc>, qrels: Vec<Qrel>) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::invalid("evaluation corpus is empty"));
        }
        let mut doc_ids = HashSet::new();
        for d in &corpus {
            if !doc_ids.insert(d.doc_id.as_str()) {
                return Err(Error::invalid(format!("duplicate doc_id {:?}", d.doc_id)));
            }
        }
        let mut qids = HashSet::new();
        for q in &queries {
            if !qids.insert(q.qid.as_str()) {
                return Err(Error::invalid(format!("duplicate qid {:?}", q.qid)));
            }
        }
        let mut map: BTreeMap<String, Relevance> = BTreeMap::new();
        for r in qrels {
            if !qids.contains(r.qid.as_str()) {
                return Err(Error::invalid(format!("qrel references unknown qid {:?}", r.qid)));
            }
            if !doc_ids.contains(r.doc_id.as_str()) {
                return Err(Error::invalid(format!("qrel references unknown doc_id {:?}", r.doc_id)));
            }
            map.entry(r.qid).or_default().insert(r.doc_id, r.relevance);
        }
        for q in &queries {
            if !map.get(&q.qid).is_some_and(|m| m.values().any(|&g| g > 0)) {
                return Err(Error::invalid(format!("query {:?} has no relevant document", q.qid)));
            }
        }
        Ok(EvalTask { queries, corpus, qrels: map })
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        EvalTask::new(
            read_jsonl(&dir.join(QUERIES_FILE))?,
            read_jsonl(&dir.join(CORPUS_FILE))?,
            read_jsonl(&dir.join(QRELS_FILE))?,
        )
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        crate::data::pairs::write_jsonl(&self.queries, &dir.join(QUERIES_FILE))?;
        crate::data::pairs::write_jsonl(&self.corpus, &dir.join(CORPUS_FILE))?;
        let qrels: Vec<Qrel> = self.qrels_flat();
        crate::data::pairs::write_jsonl(&qrels, &dir.join(QRELS_FILE))?;
        Ok(())
    }

    pub fn queries(&self) -> &[EvalQuery] {
        &self.queries
    }

    pub fn corpus(&self) -> &[EvalDoc] {
        &self.corpus
    }

    pub fn relevance(&self, qid: &str) -> Option<&Relevance> {
        self.qrels.get(qid)
    }

    pub fn qrels_flat(&self) -> Vec<Qrel> {
        self.qrels
            .iter()
            .flat_map(|(q, m)| {
                m.iter().map(move |(d, &g)| Qrel {
                    qid: q.clone(),
                    doc_id: d.clone(),
                    relevance: g,
                })
            })
            .collect()
    }

    fn digest(&self) -> String {
        let mut h = Sha256::new();
        for q in &self.queries {
            h.update(serde_json::to_vec(q).expect("plain struct serializes"));
        }
        for d in &self.corpus {
            h.update(serde_json::to_vec(d).expect("plain struct serializes"));
        }
        for r in self.qrels_flat() {
            h.update(serde_json::to_vec(&r).expect("plain struct serializes"));
        }
        hex::encode(h.finalize())
    }
}

/// Line-delimited JSON; blank lines are skipped.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: PathBuf::from(path),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

fn embed_corpus(params: &EncoderParams, task: &EvalTask) -> Result<Vec<Vec64>> {
    task.corpus
        .par_iter()
        .map(|d| params.embed_document(&d.text, None))
        .collect()
}

fn scored_retrieval(params: &EncoderParams, task: &EvalTask, docs: &[Vec64], q: &EvalQuery, k: usize) -> Result<Vec<ScoredCandidate>> {
    let qe = params.embed_query(&q.instruction, &q.text, None)?;
    let mut cands: Vec<ScoredCandidate> = task
        .corpus
        .iter()
        .zip(docs)
        .map(|(d, e)| ScoredCandidate {
            doc_id: d.doc_id.clone(),
            // both unit length
            score: dot_unchecked(&qe, e).clamp(-1.0, 1.0),
        })
        .collect();
    sort_candidates(&mut cands);
    cands.truncate(k);
    Ok(cands)
}

/// Exhaustive cosine retrieval; per query, doc ids by descending cosine with
/// ties broken by ascending id, truncated to `k`.
pub fn retrieve(params: &EncoderParams, task: &EvalTask, k: usize) -> Result<BTreeMap<String, Vec<String>>> {
    Ok(retrieve_scored(params, task, k)?
        .into_iter()
        .map(|(q, c)| (q, c.into_iter().map(|c| c.doc_id).collect()))
        .collect())
}

pub fn retrieve_scored(params: &EncoderParams, task: &EvalTask, k: usize) -> Result<BTreeMap<String, Vec<ScoredCandidate>>> {
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    let docs = embed_corpus(params, task)?;
    let rows: Vec<(String, Vec<ScoredCandidate>)> = task
        .queries
        .par_iter()
        .map(|q| Ok((q.qid.clone(), scored_retrieval(params, task, &docs, q, k)?)))
        .collect::<Result<_>>()?;
    Ok(rows.into_iter().collect())
}

fn gain(g: u32) -> f64 {
    2f64.powi(g as i32) - 1.0
}

fn discount(rank: usize) -> f64 {
    ((rank + 1) as f64).log2()
}

/// `DCG_k / IDCG_k` with gain `2^g - 1` and discount `log2(r + 1)`;
/// 0 when nothing is relevant.
pub fn ndcg_at_k(ranking: &[String], rels: &Relevance, k: usize) -> f64 {
    let dcg: f64 = ranking
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, d)| gain(rels.get(d).copied().unwrap_or(0)) / discount(i + 1))
        .sum();
    let mut ideal: Vec<u32> = rels.values().copied().filter(|&g| g > 0).collect();
    ideal.sort_unstable_by(|a, b| b.cmp(a));
    let idcg: f64 = ideal
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, &g)| gain(g) / discount(i + 1))
        .sum();
    if idcg == 0.0 {
        0.0
    } else {
        dcg / idcg
    }
}

pub fn mrr(ranking: &[String], rels: &Relevance) -> f64 {
    ranking
        .iter()
        .position(|d| rels.get(d).is_some_and(|&g| g > 0))
        .map_or(0.0, |p| 1.0 / (p + 1) as f64)
}

pub fn recall_at_k(ranking: &[String], rels: &Relevance, k: usize) -> f64 {
    let relevant = rels.values().filter(|&&g| g > 0).count();
    if relevant == 0 {
        return 0.0;
    }
    let hit = ranking
        .iter()
        .take(k)
        .filter(|d| rels.get(*d).is_some_and(|&g| g > 0))
        .count();
    hit as f64 / relevant as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct QueryMetrics {
    pub ndcg_at_k: f64,
    pub mrr: f64,
    pub recall_at_k: f64,
}

impl QueryMetrics {
    pub fn compute(ranking: &[String], rels: &Relevance, k: usize) -> Self {
        QueryMetrics {
            ndcg_at_k: ndcg_at_k(ranking, rels, k),
            mrr: mrr(ranking, rels),
            recall_at_k: recall_at_k(ranking, rels, k),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_query: BTreeMap<String, QueryMetrics>,
    pub mean: QueryMetrics,
    pub k_metric: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k_retrieve: Option<usize>,
    pub num_queries: usize,
    /// sha256 over the task, the model parameters and the evaluation settings.
    pub run_config_digest: String,
    /// Only filled when explicitly requested; leaving it out keeps reports
    /// byte-identical across runs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_time_secs: Option<f64>,
}

impl EvalReport {
    fn assemble(per_query: BTreeMap<String, QueryMetrics>, k_metric: usize, k_retrieve: Option<usize>, digest: String) -> Self {
        let n = per_query.len();
        let mut mean = QueryMetrics::default();
        if n > 0 {
            for m in per_query.values() {
                mean.ndcg_at_k += m.ndcg_at_k;
                mean.mrr += m.mrr;
                mean.recall_at_k += m.recall_at_k;
            }
            mean.ndcg_at_k /= n as f64;
            mean.mrr /= n as f64;
            mean.recall_at_k /= n as f64;
        }
        EvalReport {
            per_query,
            mean,
            k_metric,
            k_retrieve,
            num_queries: n,
            run_config_digest: digest,
            wall_time_secs: None,
        }
    }

    /// Pretty JSON with lexicographically sorted keys.
    pub fn to_json_string(&self) -> String {
        let v = serde_json::to_value(self).expect("report serializes");
        serde_json::to_string_pretty(&v).expect("value serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut s = self.to_json_string();
        s.push('\n');
        crate::merge::write_atomic(path.as_ref(), s.as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&s)?)
    }
}

fn params_digest(params: &[f64]) -> String {
    let mut h = Sha256::new();
    for p in params {
        h.update(p.to_le_bytes());
    }
    hex::encode(h.finalize())
}

fn run_digest(task: &EvalTask, parts: serde_json::Value) -> String {
    let v = serde_json::json!({ "task": task.digest(), "run": parts });
    hex::encode(Sha256::digest(v.to_string().as_bytes()))
}

fn metrics_for(task: &EvalTask, rankings: &BTreeMap<String, Vec<String>>, k: usize) -> BTreeMap<String, QueryMetrics> {
    rankings
        .iter()
        .map(|(q, r)| {
            let rels = task.qrels.get(q).expect("validated task has qrels for every query");
            (q.clone(), QueryMetrics::compute(r, rels, k))
        })
        .collect()
}

pub fn evaluate_retrieval(params: &EncoderParams, task: &EvalTask, k: usize) -> Result<EvalReport> {
    let rankings = retrieve(params, task, k)?;
    let digest = run_digest(
        task,
        serde_json::json!({ "mode": "retrieval", "k": k, "model": params_digest(&params.flatten()) }),
    );
    Ok(EvalReport::assemble(metrics_for(task, &rankings, k), k, None, digest))
}

/// Retrieve `k_retrieve` candidates with the embedding model, reorder them by
/// `scorer`, then score the reordered list at `k_metric`.
pub fn evaluate_rerank_pipeline<S: RelevanceScorer + ?Sized>(
    embed: &EncoderParams,
    scorer: &S,
    scorer_id: &str,
    task: &EvalTask,
    k_retrieve: usize,
    k_metric: usize,
) -> Result<EvalReport> {
    let first = retrieve_scored(embed, task, k_retrieve)?;
    let texts: HashMap<&str, &str> = task.corpus.iter().map(|d| (d.doc_id.as_str(), d.text.as_str())).collect();
    let rows: Vec<(String, Vec<String>)> = task
        .queries
        .par_iter()
        .map(|q| {
            let cands: Vec<(String, String)> = first[&q.qid]
                .iter()
                .map(|c| (c.doc_id.clone(), texts[c.doc_id.as_str()].to_owned()))
                .collect();
            let qr = QueryRef {
                qid: &q.qid,
                instruction: &q.instruction,
                text: &q.text,
            };
            let ranked = rank_candidates(scorer, qr, &cands)?;
            Ok((q.qid.clone(), ranked.into_iter().map(|c| c.doc_id).collect()))
        })
        .collect::<Result<_>>()?;
    let rankings: BTreeMap<String, Vec<String>> = rows.into_iter().collect();
    let digest = run_digest(
        task,
        serde_json::json!({
            "mode": "rerank",
            "k_retrieve": k_retrieve,
            "k_metric": k_metric,
            "model": params_digest(&embed.flatten()),
            "scorer": scorer_id,
        }),
    );
    Ok(EvalReport::assemble(metrics_for(task, &rankings, k_metric), k_metric, Some(k_retrieve), digest))
}

pub fn rerank_digest(params: &crate::reranker::RerankParams) -> String {
    params_digest(&params.flatten())
}

/// Scores with the task's own relevance grades, scaled into `[0, 1]`.
pub struct OracleScorer<'a> {
    task: &'a EvalTask,
    max_grade: u32,
}

impl<'a> OracleScorer<'a> {
    pub fn new(task: &'a EvalTask) -> Self {
        let max_grade = task.qrels.values().flat_map(|m| m.values().copied()).max().unwrap_or(1).max(1);
        OracleScorer { task, max_grade }
    }
}

impl RelevanceScorer for OracleScorer<'_> {
    fn score(&self, query: QueryRef<'_>, doc_id: &str, _doc_text: &str) -> Result<f64> {
        let g = self.task.relevance(query.qid).and_then(|m| m.get(doc_id)).copied().unwrap_or(0);
        Ok(g as f64 / self.max_grade as f64)
    }
}

/// `(cos + 1) / 2` under an embedding model; reproduces retrieval order.
pub struct CosineScorer<'a>(pub &'a EncoderParams);

impl RelevanceScorer for CosineScorer<'_> {
    fn score(&self, query: QueryRef<'_>, _doc_id: &str, doc_text: &str) -> Result<f64> {
        let q = self.0.embed_query(query.instruction, query.text, None)?;
        let d = self.0.embed_document(doc_text, None)?;
        Ok((dot_unchecked(&q, &d).clamp(-1.0, 1.0) + 1.0) / 2.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationSetting {
    Full,
    NoMerge,
    NoSynthetic,
    OnlySynthetic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StageToggles {
    pub synthetic_stage: bool,
    pub labeled_stage: bool,
    pub merge: bool,
}

impl AblationSetting {
    pub const ALL: [AblationSetting; 4] = [
        AblationSetting::Full,
        AblationSetting::NoMerge,
        AblationSetting::NoSynthetic,
        AblationSetting::OnlySynthetic,
    ];

    pub fn label(self) -> &'static str {
        match self {
            AblationSetting::Full => "full",
            AblationSetting::NoMerge => "no_merge",
            AblationSetting::NoSynthetic => "no_synthetic",
            AblationSetting::OnlySynthetic => "only_synthetic",
        }
    }

    pub fn from_label(s: &str) -> Option<Self> {
        AblationSetting::ALL.into_iter().find(|a| a.label() == s)
    }

    pub fn toggles(self) -> StageToggles {
        let (synthetic_stage, labeled_stage, merge) = match self {
            AblationSetting::Full => (true, true, true),
            AblationSetting::NoMerge => (true, true, false),
            AblationSetting::NoSynthetic => (false, true, true),
            AblationSetting::OnlySynthetic => (true, false, false),
        };
        StageToggles {
            synthetic_stage,
            labeled_stage,
            merge,
        }
    }

    pub fn from_toggles(t: StageToggles) -> Option<Self> {
        AblationSetting::ALL.into_iter().find(|a| a.toggles() == t)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub encoder: EncoderConfig,
    pub weak: StageConfig,
    pub supervised: StageConfig,
    pub merge: MergeConfig,
    /// Merge only the last `n` supervised checkpoints; all when unset.
    pub merge_last: Option<usize>,
    pub k_metric: usize,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            encoder: EncoderConfig::default(),
            weak: StageConfig::default(),
            supervised: StageConfig::default(),
            merge: MergeConfig::default(),
            merge_last: None,
            k_metric: 10,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct AblationData {
    pub synthetic: Vec<PairRecord>,
    pub labeled: Vec<PairRecord>,
}

/// Supervised-stage checkpoints merged with the configured schedule. The
/// final stage checkpoint is returned as-is when there is only one.
pub fn merge_stage(run: &TrainRun, stage: Stage, config: &MergeConfig, last: Option<usize>) -> Result<Checkpoint> {
    let mut cks: Vec<Checkpoint> = run.stage_checkpoints(stage).into_iter().cloned().collect();
    if let Some(n) = last {
        let skip = cks.len().saturating_sub(n.max(1));
        cks.drain(..skip);
    }
    match cks.len() {
        0 => Err(Error::invalid(format!("no {} checkpoints to merge", stage.name()))),
        1 => Ok(cks.pop().expect("one checkpoint")),
        _ => merge_loaded(&cks, config),
    }
}

pub struct AblationOutcome {
    pub setting: AblationSetting,
    pub model: Checkpoint,
    pub report: EvalReport,
}

/// Trains one model per setting with a shared seed and evaluates each on the
/// same task. Settings with equal stage toggles share a single training run,
/// so e.g. `full` and `no_merge` see identical data streams.
pub fn run_ablation(
    settings: &[AblationSetting],
    data: &AblationData,
    task: &EvalTask,
    config: &AblationConfig,
    seed: Seed,
) -> Result<Vec<AblationOutcome>> {
    if settings.is_empty() {
        return Err(Error::invalid("no ablation settings"));
    }
    let synthetic: Vec<PairExample> = data.synthetic.iter().map(PairRecord::to_example).collect();
    let labeled: Vec<PairExample> = data.labeled.iter().map(PairRecord::to_example).collect();
    let mut runs: HashMap<(bool, bool), TrainRun> = HashMap::new();
    let mut out = Vec::with_capacity(settings.len());
    for &s in settings {
        let t = s.toggles();
        let key = (t.synthetic_stage, t.labeled_stage);
        if !runs.contains_key(&key) {
            let plan = StagePlan {
                weak: t.synthetic_stage.then(|| config.weak.clone()),
                supervised: t.labeled_stage.then(|| config.supervised.clone()),
            };
            let run = train_embedding(config.encoder, &plan, &synthetic, &labeled, seed)?;
            runs.insert(key, run);
        }
        let run = &runs[&key];
        let model = if t.merge {
            let stage = if t.labeled_stage { Stage::Supervised } else { Stage::Weak };
            merge_stage(run, stage, &config.merge, config.merge_last)?
        } else {
            run.final_checkpoint().clone()
        };
        let report = evaluate_retrieval(&model.to_encoder()?, task, config.k_metric)?;
        out.push(AblationOutcome {
            setting: s,
            model,
            report,
        });
    }
    Ok(out)
}
