//! Seeded, cluster-structured toy retrieval benchmark.
//!
//! Each topic owns a set of *keywords* used in documents and a disjoint set of
//! *synonyms* used in queries, so lexical overlap alone cannot solve the task.
//! Every document also carries a unique entity word that its queries repeat:
//! the source document is graded 2, its topic-mates 1.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{EvalDoc, EvalQuery, EvalTask, Qrel};
use crate::data::{PairRecord, Persona, Source, TaskTag};
use crate::error::Result;
use crate::numeric::Seed;

pub const TOY_INSTRUCTION: &str = "Given a question, retrieve passages on the same subject";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyBenchConfig {
    pub seed: u64,
    pub topics: usize,
    pub keywords_per_topic: usize,
    pub synonyms_per_topic: usize,
    pub eval_docs_per_topic: usize,
    pub queries_per_topic: usize,
    pub labeled_per_topic: usize,
    pub labeled_negatives: usize,
    pub synthetic_docs_per_topic: usize,
    pub filler_words: usize,
    pub personas: usize,
}

impl Default for ToyBenchConfig {
    fn default() -> Self {
        ToyBenchConfig {
            seed: 7,
            topics: 16,
            keywords_per_topic: 5,
            synonyms_per_topic: 4,
            eval_docs_per_topic: 10,
            queries_per_topic: 4,
            labeled_per_topic: 6,
            labeled_negatives: 4,
            synthetic_docs_per_topic: 8,
            filler_words: 120,
            personas: 24,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyBench {
    pub task: EvalTask,
    /// Supervised pairs written with query-side vocabulary.
    pub labeled: Vec<PairRecord>,
    /// A disjoint labeled split reserved for reranker fine-tuning.
    pub rerank_labeled: Vec<PairRecord>,
    /// Raw passages for the synthesis pipeline.
    pub synthetic_corpus: Vec<String>,
    pub personas: Vec<Persona>,
}

const SYLLABLES: &[&str] = &[
    "ba", "ce", "di", "fo", "gu", "ha", "je", "ki", "lo", "mu", "na", "pe", "qui", "ro", "su", "ta", "ve",
    "wi", "xo", "yu", "za", "bre", "cla", "dro", "fli", "gra", "plo", "sta", "tri",
];

struct Vocab<'r, R: Rng> {
    rng: &'r mut R,
    used: std::collections::HashSet<String>,
}

impl<R: Rng> Vocab<'_, R> {
    fn word(&mut self, syllables: usize) -> String {
        loop {
            let w: String = (0..syllables)
                .map(|_| *SYLLABLES.choose(self.rng).expect("nonempty"))
                .collect();
            if self.used.insert(w.clone()) {
                return w;
            }
        }
    }

    fn words(&mut self, n: usize, syllables: usize) -> Vec<String> {
        (0..n).map(|_| self.word(syllables)).collect()
    }
}

struct Topic {
    keywords: Vec<String>,
    synonyms: Vec<String>,
}

fn pick<'a, R: Rng>(rng: &mut R, from: &'a [String], n: usize) -> Vec<&'a str> {
    from.choose_multiple(rng, n).map(String::as_str).collect()
}

fn shuffle_join<R: Rng>(rng: &mut R, mut words: Vec<&str>) -> String {
    words.shuffle(rng);
    words.join(" ")
}

fn document<R: Rng>(rng: &mut R, topic: &Topic, entity: &str, filler: &[String]) -> String {
    let mut w = pick(rng, &topic.keywords, 3);
    w.push(entity);
    w.extend(pick(rng, filler, 3));
    shuffle_join(rng, w)
}

fn query<R: Rng>(rng: &mut R, topic: &Topic, entity: &str) -> String {
    let mut w = pick(rng, &topic.synonyms, 2);
    w.push(entity);
    shuffle_join(rng, w)
}

fn sparse_cosine(a: &crate::encoder::FeatureVector, b: &crate::encoder::FeatureVector) -> f64 {
    let bmap: std::collections::HashMap<usize, f64> = b.iter().collect();
    let dot: f64 = a.iter().filter_map(|(i, w)| bmap.get(&i).map(|v| v * w)).sum();
    let n = a.l2_norm() * b.l2_norm();
    if n == 0.0 {
        0.0
    } else {
        dot / n
    }
}

type Draft = (usize, String, String);

/// One record per draft; with `judge_topic`, one record per same-topic
/// document of the split instead (a judged list per query).
fn with_lexical_negatives(drafts: &[Draft], k: usize, judge_topic: bool) -> Result<Vec<PairRecord>> {
    let lexical = |text: &str| crate::encoder::featurize(text, 1 << 16, 2, 4);
    let doc_fv = drafts.iter().map(|d| lexical(&d.2)).collect::<Result<Vec<_>>>()?;
    let mut out = Vec::with_capacity(drafts.len());
    for (t, q, positive) in drafts {
        let qf = lexical(q)?;
        let mut cands: Vec<(f64, usize)> = drafts
            .iter()
            .enumerate()
            .filter(|(_, d)| d.0 != *t)
            .map(|(i, _)| (sparse_cosine(&qf, &doc_fv[i]), i))
            .collect();
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let negatives: Vec<String> = cands.iter().take(k).map(|&(_, i)| drafts[i].2.clone()).collect();
        let positives: Vec<&String> = if judge_topic {
            drafts.iter().filter(|d| d.0 == *t).map(|d| &d.2).collect()
        } else {
            vec![positive]
        };
        for p in positives {
            out.push(PairRecord {
                instruction: TOY_INSTRUCTION.into(),
                query: q.clone(),
                positive: p.clone(),
                negatives: negatives.clone(),
                task_tag: TaskTag::Retrieval,
                language: "en".into(),
                source: Source::Labeled,
            });
        }
    }
    Ok(out)
}

pub fn generate(config: &ToyBenchConfig) -> Result<ToyBench> {
    let c = config;
    if c.topics < 2 || c.keywords_per_topic < 3 || c.synonyms_per_topic < 2 || c.eval_docs_per_topic < 2 {
        return Err(crate::Error::invalid("toy benchmark needs ≥2 topics, ≥3 keywords, ≥2 synonyms, ≥2 docs per topic"));
    }
    if c.queries_per_topic > c.eval_docs_per_topic || c.filler_words < 3 {
        return Err(crate::Error::invalid("toy benchmark sizes are inconsistent"));
    }
    let mut rng = Seed(c.seed).rng();
    let mut vocab = Vocab {
        rng: &mut rng,
        used: Default::default(),
    };
    let topics: Vec<Topic> = (0..c.topics)
        .map(|_| Topic {
            keywords: vocab.words(c.keywords_per_topic, 3),
            synonyms: vocab.words(c.synonyms_per_topic, 3),
        })
        .collect();
    let filler = vocab.words(c.filler_words, 2);
    let eval_entities: Vec<Vec<String>> = (0..c.topics).map(|_| vocab.words(c.eval_docs_per_topic, 4)).collect();
    let labeled_entities: Vec<Vec<String>> = (0..c.topics).map(|_| vocab.words(2 * c.labeled_per_topic, 4)).collect();
    let synth_entities: Vec<Vec<String>> = (0..c.topics).map(|_| vocab.words(c.synthetic_docs_per_topic, 4)).collect();
    let persona_words = vocab.words(c.personas, 2);
    drop(vocab);

    let mut corpus = Vec::new();
    let mut queries = Vec::new();
    let mut qrels = Vec::new();
    for (t, topic) in topics.iter().enumerate() {
        for (j, e) in eval_entities[t].iter().enumerate() {
            corpus.push(EvalDoc {
                doc_id: format!("t{t:02}-d{j:02}"),
                text: document(&mut rng, topic, e, &filler),
            });
        }
    }
    for (t, topic) in topics.iter().enumerate() {
        for j in 0..c.queries_per_topic {
            let qid = format!("t{t:02}-q{j:02}");
            queries.push(EvalQuery {
                qid: qid.clone(),
                instruction: TOY_INSTRUCTION.into(),
                text: query(&mut rng, topic, &eval_entities[t][j]),
            });
            for d in 0..c.eval_docs_per_topic {
                qrels.push(Qrel {
                    qid: qid.clone(),
                    doc_id: format!("t{t:02}-d{d:02}"),
                    relevance: if d == j { 2 } else { 1 },
                });
            }
        }
    }
    let task = EvalTask::new(queries, corpus, qrels)?;

    // labeled pairs: topic-mates count as relevant in the task, so the
    // negatives are the other-topic positives with the highest character
    // n-gram overlap with the query (lexical hard negatives). Two disjoint
    // splits: one for the embedding model, one for the reranker.
    // Every second record pairs the query with a topic-mate that does not
    // mention the query's entity, mirroring the grade-1 relevance above.
    let mut drafts = Vec::new();
    for (t, topic) in topics.iter().enumerate() {
        for (j, ent) in labeled_entities[t].iter().enumerate() {
            let doc_ent = if j % 2 == 1 { &labeled_entities[t][j - 1] } else { ent };
            let positive = document(&mut rng, topic, doc_ent, &filler);
            drafts.push((t, query(&mut rng, topic, ent), positive));
        }
    }
    let per = c.labeled_per_topic;
    let (embed_split, rerank_split): (Vec<_>, Vec<_>) = drafts.into_iter().enumerate().partition(|(i, _)| i % (2 * per) < per);
    let strip = |v: Vec<(usize, Draft)>| v.into_iter().map(|x| x.1).collect::<Vec<_>>();
    let labeled = with_lexical_negatives(&strip(embed_split), c.labeled_negatives, false)?;
    let rerank_labeled = with_lexical_negatives(&strip(rerank_split), c.labeled_negatives, true)?;

    // synthesis passages mix both vocabularies, with one keyword repeated so
    // frequency-based query writers pick up topic words
    let mut synthetic_corpus = Vec::new();
    for (t, topic) in topics.iter().enumerate() {
        for e in &synth_entities[t] {
            let mut w = pick(&mut rng, &topic.keywords, 3);
            let rep = w[0];
            w.push(rep);
            w.extend(pick(&mut rng, &topic.synonyms, 2));
            w.push(e);
            w.extend(pick(&mut rng, &filler, 2));
            synthetic_corpus.push(shuffle_join(&mut rng, w));
        }
    }

    let personas = persona_words
        .iter()
        .enumerate()
        .map(|(i, w)| {
            let t = &topics[i % c.topics];
            Persona {
                id: format!("p{i:03}"),
                description: format!("a {w} enthusiast who reads about {} and {}", t.keywords[0], t.synonyms[0]),
            }
        })
        .collect();

    Ok(ToyBench {
        task,
        labeled,
        rerank_labeled,
        synthetic_corpus,
        personas,
    })
}
