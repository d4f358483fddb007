use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use qembed::contrastive::{train_embedding_from, PairExample, TrainRun};
use qembed::data::{
    filter_pairs, mine_with_embeddings, read_pairs, synthesize_corpus, write_jsonl, write_pairs, GeneratorClient,
    MockGenerator, PairRecord, Persona,
};
use qembed::encoder::EncoderParams;
use qembed::evalkit::toybench::{self, ToyBenchConfig};
use qembed::evalkit::{
    evaluate_rerank_pipeline, evaluate_retrieval, read_jsonl, rerank_digest, run_ablation, AblationData, AblationSetting,
    EvalTask,
};
use qembed::merge::{load_checkpoint, merge_checkpoints, save_checkpoint, write_atomic, MergePlan};
use qembed::reranker::{instances_from_pairs, train_reranker_with, RerankParams};
use qembed::{Error, Result, Seed};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{input_path, output_path, RunConfig};
use crate::{Cli, Command};

/// 1 usage/config, 2 data/format, 3 numeric/training.
pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidInput(_) => 1,
        Error::Numeric(_) | Error::Degenerate(_) => 3,
        _ => 2,
    }
}

macro_rules! log {
    ($($t:tt)*) => { eprintln!("qembed: {}", format!($($t)*)) };
}

#[derive(Debug, Deserialize, Serialize)]
struct DocLine {
    text: String,
}

fn read_docs(path: &Path) -> Result<Vec<String>> {
    Ok(read_jsonl::<DocLine>(path)?.into_iter().map(|d| d.text).collect())
}

fn load_config(path: &Option<PathBuf>, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = RunConfig::load_or_default(path.as_deref())?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_encoder(path: &Path) -> Result<EncoderParams> {
    load_checkpoint(path)?.to_encoder()
}

/// The given checkpoint, else the config's encoder_model, else the seeded init.
fn encoder_or_init(flag: Option<PathBuf>, cfg: &RunConfig) -> Result<EncoderParams> {
    match flag.or_else(|| cfg.paths.encoder_model.clone()) {
        Some(p) => load_encoder(&p),
        None => EncoderParams::init(Seed(cfg.seed).child(0), cfg.encoder),
    }
}

pub fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::invalid("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
    }
    let t0 = Instant::now();
    let seed = cli.seed;
    let name = cli.command.name();
    match cli.command {
        Command::Synth(a) => synth(a, seed),
        Command::Filter(a) => filter(a, seed),
        Command::Mine(a) => mine(a, seed),
        Command::TrainEmbed(a) => train_embed(a, seed),
        Command::TrainRerank(a) => train_rerank(a, seed),
        Command::Merge(a) => merge(a, seed),
        Command::Eval(a) => eval(a, seed),
        Command::Ablate(a) => ablate(a, seed),
        Command::GenToybench(a) => gen_toybench(a),
    }?;
    log!("{name} finished in {:.2?}", t0.elapsed());
    Ok(())
}

fn synth(a: crate::SynthArgs, seed: Option<u64>) -> Result<()> {
    let cfg = load_config(&a.cfg.config, seed)?;
    let corpus = read_docs(&input_path(a.corpus, &cfg.paths.corpus, "corpus")?)?;
    let personas: Vec<Persona> = read_jsonl(&input_path(a.personas, &cfg.paths.personas, "persona library")?)?;
    let params = encoder_or_init(a.model, &cfg)?;
    let gen: Box<dyn GeneratorClient> = match a.remote_endpoint {
        Some(url) => remote(url, Duration::from_secs(a.timeout_secs))?,
        None => Box::new(MockGenerator::new(Seed(cfg.seed).child(4))),
    };
    let out = synthesize_corpus(&corpus, &personas, &params, gen.as_ref(), &cfg.synth)?;
    let records: Vec<PairRecord> = out.iter().map(|o| o.record.clone()).collect();
    let n = write_pairs(&records, &a.out)?;
    if let Some(p) = a.configs_out {
        let configs: Vec<_> = out.iter().map(|o| &o.config).collect();
        write_jsonl(configs, &p)?;
    }
    println!("records={n}");
    Ok(())
}

#[cfg(feature = "remote")]
fn remote(url: String, timeout: Duration) -> Result<Box<dyn GeneratorClient>> {
    Ok(Box::new(qembed::data::RemoteGenerator::new(url, timeout)))
}

#[cfg(not(feature = "remote"))]
fn remote(_url: String, _timeout: Duration) -> Result<Box<dyn GeneratorClient>> {
    Err(Error::invalid("built without the remote generator"))
}

fn filter(a: crate::FilterArgs, seed: Option<u64>) -> Result<()> {
    let mut cfg = load_config(&a.cfg.config, seed)?;
    if let Some(t) = a.threshold {
        cfg.filter.threshold = t;
    }
    let params = encoder_or_init(a.model, &cfg)?;
    let records = read_pairs(&a.input)?;
    let out = filter_pairs(records, &params, &cfg.filter, Seed(cfg.seed).child(5))?;
    write_pairs(&out.kept, &a.out)?;
    println!("kept={} dropped={} skipped={}", out.kept.len(), out.dropped, out.skipped);
    Ok(())
}

fn mine(a: crate::MineArgs, seed: Option<u64>) -> Result<()> {
    let cfg = load_config(&a.cfg.config, seed)?;
    let k = a.k.unwrap_or(cfg.mine_k);
    let params = encoder_or_init(a.model, &cfg)?;
    let corpus = read_docs(&input_path(a.corpus, &cfg.paths.corpus, "mining corpus")?)?;
    let embedded = corpus
        .par_iter()
        .map(|t| params.embed_document(t, None))
        .collect::<Result<Vec<_>>>()?;
    let records = read_pairs(&a.input)?;
    let mined = records
        .par_iter()
        .map(|r| mine_with_embeddings(r, &corpus, &embedded, &params, k))
        .collect::<Result<Vec<_>>>()?;
    let shortfall: usize = mined.iter().map(|m| m.shortfall).sum();
    let out: Vec<PairRecord> = mined.into_iter().map(|m| m.record).collect();
    write_pairs(&out, &a.out)?;
    println!("records={} shortfall={shortfall}", out.len());
    Ok(())
}

#[derive(Serialize)]
struct Manifest {
    checkpoints: Vec<ManifestEntry>,
    final_checkpoint: String,
}

#[derive(Serialize)]
struct ManifestEntry {
    file: String,
    stage: &'static str,
    step: u64,
}

#[derive(Serialize)]
struct LossLine {
    stage: &'static str,
    step: usize,
    loss: f64,
}

/// `NN-<stage>-<step>.ckpt` per checkpoint, `final.ckpt`, `manifest.json`
/// and `losses.jsonl`.
fn write_run(dir: &Path, run: &TrainRun) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.into(),
        source: e,
    })?;
    let mut entries = Vec::new();
    for (i, sc) in run.checkpoints.iter().enumerate() {
        let step = sc.checkpoint.step;
        let file = format!("{i:02}-{}-{step:06}.ckpt", sc.stage.name());
        save_checkpoint(&sc.checkpoint, dir.join(&file))?;
        entries.push(ManifestEntry {
            file,
            stage: sc.stage.name(),
            step,
        });
    }
    save_checkpoint(run.final_checkpoint(), dir.join("final.ckpt"))?;
    let manifest = Manifest {
        checkpoints: entries,
        final_checkpoint: "final.ckpt".into(),
    };
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    write_atomic(&dir.join("manifest.json"), json.as_bytes())?;
    let losses: Vec<LossLine> = run
        .losses
        .iter()
        .map(|&(s, step, loss)| LossLine {
            stage: s.name(),
            step,
            loss,
        })
        .collect();
    write_jsonl(&losses, &dir.join("losses.jsonl"))?;
    Ok(())
}

fn examples(path: &Path) -> Result<Vec<PairExample>> {
    Ok(read_pairs(path)?.iter().map(PairRecord::to_example).collect())
}

fn train_embed(a: crate::TrainEmbedArgs, seed: Option<u64>) -> Result<()> {
    let mut cfg = load_config(&a.cfg.config, seed)?;
    if a.skip_stage1 {
        cfg.weak = None;
    }
    let weak = match cfg.weak {
        Some(_) => examples(&input_path(a.stage1, &cfg.paths.stage1, "stage-one pairs")?)?,
        None => Vec::new(),
    };
    let supervised = match cfg.supervised {
        Some(_) => examples(&input_path(a.stage2, &cfg.paths.stage2, "stage-two pairs")?)?,
        None => Vec::new(),
    };
    let out_dir = output_path(a.out_dir, &cfg.paths.out_dir, "output directory")?;
    let init = match a.init {
        Some(p) => load_encoder(&p)?,
        None => EncoderParams::init(Seed(cfg.seed).child(0), cfg.encoder)?,
    };
    if init.config() != &cfg.encoder {
        log!("initial checkpoint overrides the config's encoder architecture");
    }
    let run = train_embedding_from(init, &cfg.plan(), &weak, &supervised, Seed(cfg.seed))?;
    write_run(&out_dir, &run)?;
    if let Some(&(_, step, loss)) = run.losses.last() {
        log!("step {step}: loss {loss:.6}");
    }
    println!("checkpoints={}", run.checkpoints.len());
    Ok(())
}

fn train_rerank(a: crate::TrainRerankArgs, seed: Option<u64>) -> Result<()> {
    let cfg = load_config(&a.cfg.config, seed)?;
    let records = read_pairs(&a.data)?;
    let instances = instances_from_pairs(&records)?;
    let encoder = encoder_or_init(a.encoder, &cfg)?;
    let out_dir = output_path(a.out_dir, &cfg.paths.out_dir, "output directory")?;
    let init = RerankParams::with_encoder(encoder, cfg.reranker.prompt_features)?;
    let run = train_reranker_with(init, &cfg.rerank_plan(), &instances, Seed(cfg.seed), &cfg.reranker.options)?;
    write_run(&out_dir, &run)?;
    println!("instances={} checkpoints={}", instances.len(), run.checkpoints.len());
    Ok(())
}

fn merge(a: crate::MergeArgs, seed: Option<u64>) -> Result<()> {
    if a.inputs.len() < 2 {
        return Err(Error::invalid("merge needs at least two --inputs"));
    }
    let cfg = load_config(&a.cfg.config, seed)?;
    let plan = MergePlan {
        inputs: a.inputs,
        config: cfg.merge,
    };
    let merged = merge_checkpoints(&plan)?;
    save_checkpoint(&merged, &a.out)?;
    println!("merged={}", plan.inputs.len());
    Ok(())
}

fn eval(a: crate::EvalArgs, seed: Option<u64>) -> Result<()> {
    let cfg = load_config(&a.cfg.config, seed)?;
    let k_metric = a.k.unwrap_or(cfg.eval.k_metric);
    let task = EvalTask::load(input_path(a.task_dir, &cfg.paths.task_dir, "task directory")?)?;
    let model = load_encoder(&a.model)?;
    let report = match a.rerank {
        Some(p) => {
            let rr = RerankParams::from_checkpoint(&load_checkpoint(&p)?)?;
            let k_retrieve = a.topk.unwrap_or(cfg.eval.k_retrieve);
            evaluate_rerank_pipeline(&model, &rr, &rerank_digest(&rr), &task, k_retrieve, k_metric)?
        }
        None => {
            if a.topk.is_some() {
                return Err(Error::invalid("--topk only applies with --rerank"));
            }
            evaluate_retrieval(&model, &task, k_metric)?
        }
    };
    report.save(&a.out)?;
    println!(
        "ndcg@{k_metric}={:.6} mrr={:.6} recall@{k_metric}={:.6}",
        report.mean.ndcg_at_k, report.mean.mrr, report.mean.recall_at_k
    );
    Ok(())
}

fn ablate(a: crate::AblateArgs, seed: Option<u64>) -> Result<()> {
    let cfg = load_config(&a.cfg.config, seed)?;
    let (s1, s2) = match a.data.as_slice() {
        [x, y] => (Some(x.clone()), Some(y.clone())),
        _ => (None, None),
    };
    let data = AblationData {
        synthetic: read_pairs(input_path(s1, &cfg.paths.stage1, "stage-one pairs")?)?,
        labeled: read_pairs(input_path(s2, &cfg.paths.stage2, "stage-two pairs")?)?,
    };
    let task = EvalTask::load(input_path(a.task_dir, &cfg.paths.task_dir, "task directory")?)?;
    let out_dir = output_path(a.out_dir, &cfg.paths.out_dir, "output directory")?;
    let settings: Vec<AblationSetting> = if a.settings.is_empty() {
        AblationSetting::ALL.to_vec()
    } else {
        a.settings
            .iter()
            .map(|s| AblationSetting::from_label(s).ok_or_else(|| Error::invalid(format!("unknown setting {s:?}"))))
            .collect::<Result<_>>()?
    };
    let outcomes = run_ablation(&settings, &data, &task, &cfg.ablation(), Seed(cfg.seed))?;
    std::fs::create_dir_all(&out_dir).map_err(|e| Error::Io {
        path: out_dir.clone(),
        source: e,
    })?;
    for o in &outcomes {
        let label = o.setting.label();
        o.report.save(out_dir.join(format!("{label}.json")))?;
        save_checkpoint(&o.model, out_dir.join(format!("{label}.ckpt")))?;
        println!("{label} ndcg@{}={:.6}", o.report.k_metric, o.report.mean.ndcg_at_k);
    }
    Ok(())
}

fn gen_toybench(a: crate::GenToybenchArgs) -> Result<()> {
    let cfg: ToyBenchConfig = match &a.toy_config {
        Some(p) => {
            let s = std::fs::read_to_string(p).map_err(|e| Error::Io {
                path: p.clone(),
                source: e,
            })?;
            serde_json::from_str(&s)?
        }
        None => ToyBenchConfig::default(),
    };
    let bench = toybench::generate(&cfg)?;
    let d = &a.out_dir;
    std::fs::create_dir_all(d.join("task")).map_err(|e| Error::Io {
        path: d.clone(),
        source: e,
    })?;
    bench.task.save(d.join("task"))?;
    write_pairs(&bench.labeled, d.join("labeled.jsonl"))?;
    write_pairs(&bench.rerank_labeled, d.join("rerank.jsonl"))?;
    let docs: Vec<DocLine> = bench.synthetic_corpus.iter().map(|t| DocLine { text: t.clone() }).collect();
    write_jsonl(&docs, &d.join("corpus.jsonl"))?;
    write_jsonl(&bench.personas, &d.join("personas.jsonl"))?;
    println!(
        "queries={} docs={} labeled={} rerank={} passages={} personas={}",
        bench.task.queries().len(),
        bench.task.corpus().len(),
        bench.labeled.len(),
        bench.rerank_labeled.len(),
        docs.len(),
        bench.personas.len()
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_by_category() {
        assert_eq!(exit_code(&Error::invalid("x")), 1);
        assert_eq!(exit_code(&Error::Numeric("nan".into())), 3);
        assert_eq!(exit_code(&Error::Format(qembed::FormatError::UnknownArch(9))), 2);
        assert_eq!(exit_code(&Error::Empty("corpus")), 2);
    }
}
