use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::contrastive::PairExample;
use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::numeric::{splitmix64, Seed};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskTag {
    Retrieval,
    Bitext,
    Sts,
    Classification,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Synthetic,
    Labeled,
}

/// One line of a pair file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairRecord {
    pub instruction: String,
    pub query: String,
    pub positive: String,
    pub negatives: Vec<String>,
    pub task_tag: TaskTag,
    pub language: String,
    pub source: Source,
}

impl PairRecord {
    pub fn validate(&self) -> Result<()> {
        if self.query.is_empty() || self.positive.is_empty() {
            return Err(Error::invalid("pair record needs a nonempty query and positive"));
        }
        if self.negatives.iter().any(|n| n == &self.positive) {
            return Err(Error::invalid("pair record lists its positive among the negatives"));
        }
        if self.language.is_empty() {
            return Err(Error::invalid("pair record needs a language tag"));
        }
        Ok(())
    }

    pub fn to_example(&self) -> PairExample {
        PairExample {
            instruction: self.instruction.clone(),
            query: self.query.clone(),
            positive: self.positive.clone(),
            negatives: self.negatives.clone(),
        }
    }
}

/// Streaming reader over a pair file; yields one record per non-blank line.
pub struct PairReader<R> {
    lines: std::io::Lines<R>,
    path: PathBuf,
    line: usize,
}

impl<R: BufRead> PairReader<R> {
    pub fn new(reader: R, path: impl Into<PathBuf>) -> Self {
        PairReader {
            lines: reader.lines(),
            path: path.into(),
            line: 0,
        }
    }
}

impl<R: BufRead> Iterator for PairReader<R> {
    type Item = Result<PairRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let raw = self.lines.next()?;
            self.line += 1;
            let text = match raw {
                Ok(t) => t,
                Err(e) => return Some(Err(Error::io(&self.path, e))),
            };
            if text.trim().is_empty() {
                continue;
            }
            let parsed = serde_json::from_str::<PairRecord>(&text)
                .map_err(|e| e.to_string())
                .and_then(|r| r.validate().map(|_| r).map_err(|e| e.to_string()));
            return Some(parsed.map_err(|message| Error::Parse {
                path: self.path.clone(),
                line: self.line,
                message,
            }));
        }
    }
}

pub fn open_pairs(path: impl AsRef<Path>) -> Result<PairReader<BufReader<fs::File>>> {
    let path = path.as_ref();
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(PairReader::new(BufReader::new(f), path))
}

pub fn read_pairs(path: impl AsRef<Path>) -> Result<Vec<PairRecord>> {
    open_pairs(path)?.collect()
}

pub fn write_pairs<'a, I>(records: I, path: impl AsRef<Path>) -> Result<usize>
where
    I: IntoIterator<Item = &'a PairRecord>,
{
    write_jsonl(records, path.as_ref())
}

pub fn write_jsonl<'a, T, I>(items: I, path: &Path) -> Result<usize>
where
    T: Serialize + 'a,
    I: IntoIterator<Item = &'a T>,
{
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    let mut n = 0;
    for it in items {
        serde_json::to_writer(&mut w, it)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        n += 1;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(n)
}

/// Cosine between the instructed query and the positive.
pub fn pair_cosine(params: &EncoderParams, r: &PairRecord) -> Result<f64> {
    let q = params.embed_query(&r.instruction, &r.query, None)?;
    let d = params.embed_document(&r.positive, None)?;
    crate::numeric::cosine(&q, &d)
}

pub const DEFAULT_FILTER_THRESHOLD: f64 = 0.7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterConfig {
    pub threshold: f64,
    /// Fraction of records considered at all; the rest are skipped before
    /// scoring.
    pub sample_fraction: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            threshold: DEFAULT_FILTER_THRESHOLD,
            sample_fraction: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutcome {
    pub kept: Vec<PairRecord>,
    pub dropped: usize,
    pub skipped: usize,
}

/// A pair survives iff its score is strictly above the threshold.
pub fn passes_filter(score: f64, threshold: f64) -> bool {
    score > threshold
}

/// Filters with an arbitrary scoring function; scores are computed in
/// parallel and merged in input order.
pub fn filter_with<F>(records: Vec<PairRecord>, config: &FilterConfig, seed: Seed, score: F) -> Result<FilterOutcome>
where
    F: Fn(&PairRecord) -> Result<f64> + Sync,
{
    if !(config.threshold > -1.0 && config.threshold < 1.0) {
        return Err(Error::invalid(format!(
            "filter threshold {} outside (-1, 1)",
            config.threshold
        )));
    }
    if !(config.sample_fraction > 0.0 && config.sample_fraction <= 1.0) {
        return Err(Error::invalid("sample fraction must be in (0, 1]"));
    }
    let sampled: Vec<bool> = (0..records.len())
        .map(|i| {
            config.sample_fraction >= 1.0
                || (splitmix64(seed.0 ^ splitmix64(i as u64)) as f64 / u64::MAX as f64) < config.sample_fraction
        })
        .collect();
    let verdicts: Vec<Option<bool>> = records
        .par_iter()
        .zip(sampled.par_iter())
        .map(|(r, &s)| {
            if s {
                score(r).map(|v| Some(passes_filter(v, config.threshold)))
            } else {
                Ok(None)
            }
        })
        .collect::<Result<_>>()?;
    let mut out = FilterOutcome {
        kept: Vec::new(),
        dropped: 0,
        skipped: 0,
    };
    for (r, v) in records.into_iter().zip(verdicts) {
        match v {
            Some(true) => out.kept.push(r),
            Some(false) => out.dropped += 1,
            None => out.skipped += 1,
        }
    }
    Ok(out)
}

pub fn filter_pairs(records: Vec<PairRecord>, params: &EncoderParams, config: &FilterConfig, seed: Seed) -> Result<FilterOutcome> {
    filter_with(records, config, seed, |r| pair_cosine(params, r))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MineOutcome {
    pub record: PairRecord,
    pub mined: usize,
    /// How many of the requested `k` could not be found.
    pub shortfall: usize,
}

/// Appends the `k` corpus texts closest to the instructed query, skipping the
/// positive and texts already listed.
pub fn mine_hard_negatives(record: &PairRecord, corpus: &[String], params: &EncoderParams, k: usize) -> Result<MineOutcome> {
    let embedded: Vec<crate::numeric::Vec64> = corpus
        .par_iter()
        .map(|t| params.embed_document(t, None))
        .collect::<Result<_>>()?;
    mine_with_embeddings(record, corpus, &embedded, params, k)
}

/// As [`mine_hard_negatives`], reusing precomputed corpus embeddings.
pub fn mine_with_embeddings(
    record: &PairRecord,
    corpus: &[String],
    corpus_embeddings: &[crate::numeric::Vec64],
    params: &EncoderParams,
    k: usize,
) -> Result<MineOutcome> {
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    if corpus.is_empty() {
        return Err(Error::Empty("mining corpus"));
    }
    let q = params.embed_query(&record.instruction, &record.query, None)?;
    let mut scored: Vec<(f64, usize)> = corpus_embeddings
        .iter()
        .enumerate()
        .map(|(i, e)| Ok((crate::numeric::cosine(&q, e)?, i)))
        .collect::<Result<_>>()?;
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut out = record.clone();
    let mut mined = 0;
    for (_, i) in scored {
        if mined == k {
            break;
        }
        let text = &corpus[i];
        if text == &record.positive || out.negatives.contains(text) {
            continue;
        }
        out.negatives.push(text.clone());
        mined += 1;
    }
    Ok(MineOutcome {
        record: out,
        mined,
        shortfall: k - mined,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{Arch, EncoderConfig};

    pub(crate) fn rec(q: &str, p: &str) -> PairRecord {
        PairRecord {
            instruction: "Find".into(),
            query: q.into(),
            positive: p.into(),
            negatives: vec![],
            task_tag: TaskTag::Retrieval,
            language: "en".into(),
            source: Source::Labeled,
        }
    }

    fn params() -> EncoderParams {
        EncoderParams::init(
            Seed(1),
            EncoderConfig {
                features: 1024,
                dim: 16,
                arch: Arch::Linear,
                ngram_min: 2,
                ngram_max: 4,
            },
        )
        .unwrap()
    }

    #[test]
    fn round_trip_and_empty_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.jsonl");
        let mut a = rec("q1", "p1");
        a.negatives = vec!["n".into()];
        let recs = vec![a, rec("q2", "p2")];
        assert_eq!(write_pairs(&recs, &path).unwrap(), 2);
        assert_eq!(read_pairs(&path).unwrap(), recs);
        fs::write(&path, "").unwrap();
        assert!(read_pairs(&path).unwrap().is_empty());
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.jsonl");
        let good = serde_json::to_string(&rec("q", "p")).unwrap();
        let mut extra: serde_json::Value = serde_json::from_str(&good).unwrap();
        extra["surprise"] = serde_json::json!(1);
        fs::write(&path, format!("{good}\n{extra}\n")).unwrap();
        match read_pairs(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
        fs::write(&path, format!("{good}\nnot json\n")).unwrap();
        assert!(matches!(read_pairs(&path), Err(Error::Parse { line: 2, .. })));
        let mut bad = rec("q", "p");
        bad.negatives = vec!["p".into()];
        fs::write(&path, serde_json::to_string(&bad).unwrap()).unwrap();
        assert!(matches!(read_pairs(&path), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn strict_threshold() {
        assert!(passes_filter(0.71, 0.7));
        assert!(!passes_filter(0.70, 0.7));
        let recs = vec![rec("a", "x"), rec("b", "y")];
        let out = filter_with(recs, &FilterConfig::default(), Seed(0), |r| {
            Ok(if r.query == "a" { 0.71 } else { 0.70 })
        })
        .unwrap();
        assert_eq!(out.kept.len(), 1);
        assert_eq!(out.kept[0].query, "a");
        assert_eq!(out.dropped, 1);
    }

    #[test]
    fn permissive_threshold_keeps_everything() {
        let p = params();
        let recs: Vec<_> = (0..20).map(|i| rec(&format!("query {i}"), &format!("doc {i}"))).collect();
        let cfg = FilterConfig {
            threshold: -0.999,
            ..Default::default()
        };
        let out = filter_pairs(recs, &p, &cfg, Seed(0)).unwrap();
        assert_eq!(out.kept.len(), 20);
        assert!(filter_pairs(vec![], &p, &FilterConfig { threshold: 1.0, ..cfg }, Seed(0)).is_err());
    }

    #[test]
    fn sampling_skips_a_fraction() {
        let recs: Vec<_> = (0..400).map(|i| rec(&format!("q{i}"), "p")).collect();
        let cfg = FilterConfig {
            threshold: 0.0,
            sample_fraction: 0.5,
        };
        let out = filter_with(recs, &cfg, Seed(3), |_| Ok(0.5)).unwrap();
        assert_eq!(out.kept.len() + out.dropped + out.skipped, 400);
        assert!(out.skipped > 150 && out.skipped < 250, "{}", out.skipped);
    }

    #[test]
    fn mining_excludes_positive_and_flags_shortfall() {
        let p = params();
        let r = rec("purple elephant", "elephants are grey");
        let only_pos = vec!["elephants are grey".to_string()];
        let out = mine_hard_negatives(&r, &only_pos, &p, 2).unwrap();
        assert!(out.record.negatives.is_empty());
        assert_eq!(out.shortfall, 2);

        let corpus: Vec<String> = [
            "elephants are grey",
            "stock market report",
            "purple elephant toys",
            "weather tomorrow",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        let out = mine_hard_negatives(&r, &corpus, &p, 1).unwrap();
        // brute-force argmax over non-positive texts
        let q = p.embed_query(&r.instruction, &r.query, None).unwrap();
        let best = corpus
            .iter()
            .filter(|t| *t != &r.positive)
            .max_by(|a, b| {
                let ca = crate::numeric::cosine(&q, &p.embed_document(a, None).unwrap()).unwrap();
                let cb = crate::numeric::cosine(&q, &p.embed_document(b, None).unwrap()).unwrap();
                ca.total_cmp(&cb)
            })
            .unwrap();
        assert_eq!(out.record.negatives, vec![best.clone()]);
        assert_eq!(best, "purple elephant toys");
        assert!(mine_hard_negatives(&r, &[], &p, 1).is_err());
        assert!(mine_hard_negatives(&r, &corpus, &p, 0).is_err());

        let again = mine_hard_negatives(&out.record, &corpus, &p, 5).unwrap();
        assert_eq!(again.record.negatives.len(), 3);
        assert!(!again.record.negatives.contains(&r.positive));
        assert_eq!(again.shortfall, 3);
    }
}
