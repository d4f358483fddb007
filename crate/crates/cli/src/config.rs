use std::path::{Path, PathBuf};

use qembed::contrastive::{StageConfig, StagePlan};
use qembed::data::{FilterConfig, SynthOptions};
use qembed::encoder::EncoderConfig;
use qembed::evalkit::AblationConfig;
use qembed::merge::MergeConfig;
use qembed::reranker::RerankOptions;
use qembed::{Error, Result};
use serde::{Deserialize, Serialize};

pub const CONFIG_VERSION: u32 = 1;

/// The whole run, as one JSON document. Missing sections take defaults;
/// unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub version: u32,
    pub seed: u64,
    pub encoder: EncoderConfig,
    /// `null` skips the stage.
    pub weak: Option<StageConfig>,
    pub supervised: Option<StageConfig>,
    pub merge: MergeConfig,
    /// Merge only the last `n` supervised checkpoints in `ablate`.
    pub merge_last: Option<usize>,
    pub filter: FilterConfig,
    pub mine_k: usize,
    pub synth: SynthOptions,
    pub reranker: RerankerConfig,
    pub eval: EvalConfig,
    pub paths: Paths,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RerankerConfig {
    pub prompt_features: usize,
    pub stage: StageConfig,
    pub options: RerankOptions,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub k_metric: usize,
    pub k_retrieve: usize,
}

/// Default file locations; every one of them can be given as a flag instead.
/// Relative paths resolve against the config file's directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub stage1: Option<PathBuf>,
    pub stage2: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    pub personas: Option<PathBuf>,
    pub task_dir: Option<PathBuf>,
    /// Encoder used by `filter`, `mine`, `synth` persona selection and as the
    /// reranker's starting point.
    pub encoder_model: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            version: CONFIG_VERSION,
            seed: 0,
            encoder: EncoderConfig::default(),
            weak: Some(StageConfig::default()),
            supervised: Some(StageConfig::default()),
            merge: MergeConfig::default(),
            merge_last: None,
            filter: FilterConfig::default(),
            mine_k: 4,
            synth: SynthOptions::default(),
            reranker: RerankerConfig::default(),
            eval: EvalConfig::default(),
            paths: Paths::default(),
        }
    }
}

impl Default for RerankerConfig {
    fn default() -> Self {
        RerankerConfig {
            prompt_features: 1024,
            stage: StageConfig::default(),
            options: RerankOptions::default(),
        }
    }
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            k_metric: 10,
            k_retrieve: 100,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.into(),
            source: e,
        })?;
        let mut cfg: RunConfig = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.into(),
            line: e.line(),
            message: e.to_string(),
        })?;
        if cfg.version != CONFIG_VERSION {
            return Err(Error::invalid(format!(
                "config version {} is not supported (expected {CONFIG_VERSION})",
                cfg.version
            )));
        }
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.paths.rebase(base);
        Ok(cfg)
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    pub fn plan(&self) -> StagePlan {
        StagePlan {
            weak: self.weak.clone(),
            supervised: self.supervised.clone(),
        }
    }

    pub fn rerank_plan(&self) -> StagePlan {
        StagePlan {
            weak: None,
            supervised: Some(self.reranker.stage.clone()),
        }
    }

    pub fn ablation(&self) -> AblationConfig {
        AblationConfig {
            encoder: self.encoder,
            weak: self.weak.clone().unwrap_or_default(),
            supervised: self.supervised.clone().unwrap_or_default(),
            merge: self.merge.clone(),
            merge_last: self.merge_last,
            k_metric: self.eval.k_metric,
        }
    }

    /// Range checks owned by the library types.
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        for s in [&self.weak, &self.supervised].into_iter().flatten() {
            s.validate()?;
        }
        self.reranker.stage.validate()?;
        if self.eval.k_metric == 0 || self.eval.k_retrieve == 0 {
            return Err(Error::invalid("eval cutoffs must be at least 1"));
        }
        if self.mine_k == 0 {
            return Err(Error::invalid("mine_k must be at least 1"));
        }
        Ok(())
    }
}

impl Paths {
    fn rebase(&mut self, base: &Path) {
        for p in [
            &mut self.stage1,
            &mut self.stage2,
            &mut self.corpus,
            &mut self.personas,
            &mut self.task_dir,
            &mut self.encoder_model,
            &mut self.out_dir,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}

/// Flag value if given, else the config value; the result must exist on disk.
pub fn input_path(flag: Option<PathBuf>, config: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    let p = output_path(flag, config, what)?;
    if !p.exists() {
        return Err(Error::Io {
            path: p,
            source: std::io::Error::new(std::io::ErrorKind::NotFound, format!("{what} not found")),
        });
    }
    Ok(p)
}

pub fn output_path(flag: Option<PathBuf>, config: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    flag.or_else(|| config.clone())
        .ok_or_else(|| Error::invalid(format!("no {what} given (flag or config paths)")))
}
