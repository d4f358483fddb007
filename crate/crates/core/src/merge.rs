//! Checkpoint persistence and spherical-linear-interpolation merging.
//!
//! # File layout
//!
//! All integers little-endian:
//!
//! | bytes | field |
//! |-------|-------|
//! | 4 | magic `Q3EK` |
//! | 4 | format version (u32) |
//! | 1 | model kind (0 embedding, 1 reranker) |
//! | 24 | features, dim, arch tag, ngram min, ngram max, joint dim (u32 each; joint dim is 0 for embedding models) |
//! | 8 | step (u64) |
//! | 8 | parameter count (u64) |
//! | 4·n | parameters as f32 |
//!
//! Parameters are stored in the flat order of [`EncoderParams::flatten`]; a
//! reranker appends its `2 x joint_dim` head (row 0 = "no", row 1 = "yes").

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoder::{Arch, EncoderConfig, EncoderParams};
use crate::error::{Error, FormatError, Result};
use crate::numeric::{dot_unchecked, norm, Vec64};

pub const MAGIC: [u8; 4] = *b"Q3EK";
pub const FORMAT_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 4 + 4 + 1 + 6 * 4 + 8 + 8;

/// Angles closer than this to 0 or π fall back to linear interpolation.
pub const SLERP_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Embedding,
    Reranker,
}

impl ModelKind {
    fn tag(self) -> u8 {
        match self {
            ModelKind::Embedding => 0,
            ModelKind::Reranker => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ArchMeta {
    pub encoder: EncoderConfig,
    /// Width of the reranker's joint feature vector; 0 for embedding models.
    pub joint_dim: usize,
}

impl ArchMeta {
    pub fn expected_params(&self, kind: ModelKind) -> usize {
        match kind {
            ModelKind::Embedding => self.encoder.num_params(),
            ModelKind::Reranker => self.encoder.num_params() + 2 * self.joint_dim,
        }
    }

    /// `(offset, len)` of each parameter tensor in the flat layout.
    fn blocks(&self, kind: ModelKind) -> Vec<(usize, usize)> {
        let e = self.encoder;
        let p = e.features * e.dim;
        let mut out = vec![(0, p)];
        if e.arch == Arch::Mlp1 {
            out.push((p, e.dim * e.dim));
            out.push((p + e.dim * e.dim, e.dim));
        }
        if kind == ModelKind::Reranker {
            out.push((e.num_params(), 2 * self.joint_dim));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    kind: ModelKind,
    meta: ArchMeta,
    pub step: u64,
    params: Vec<f64>,
}

/// Rounds through f32, the stored precision.
fn quantize(values: &[f64]) -> Vec<f64> {
    values.iter().map(|&v| v as f32 as f64).collect()
}

impl Checkpoint {
    /// Builds a checkpoint; parameters are rounded to the stored 32-bit
    /// precision so the in-memory value equals what a reload yields.
    pub fn new(kind: ModelKind, meta: ArchMeta, step: u64, params: &[f64]) -> Result<Self> {
        meta.encoder.validate()?;
        if kind == ModelKind::Reranker && meta.joint_dim <= meta.encoder.dim + 1 {
            return Err(Error::invalid("reranker joint dim must exceed embedding dim"));
        }
        if kind == ModelKind::Embedding && meta.joint_dim != 0 {
            return Err(Error::invalid("embedding checkpoints have joint dim 0"));
        }
        let expected = meta.expected_params(kind);
        if params.len() != expected {
            return Err(Error::Dimension {
                expected,
                got: params.len(),
            });
        }
        let params = quantize(params);
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite parameter".into()));
        }
        Ok(Checkpoint {
            kind,
            meta,
            step,
            params,
        })
    }

    pub fn from_encoder(params: &EncoderParams, step: u64) -> Self {
        let meta = ArchMeta {
            encoder: *params.config(),
            joint_dim: 0,
        };
        Checkpoint::new(ModelKind::Embedding, meta, step, &params.flatten())
            .expect("encoder params are always consistent")
    }

    pub fn to_encoder(&self) -> Result<EncoderParams> {
        if self.kind != ModelKind::Embedding {
            return Err(Error::Incompatible("expected an embedding checkpoint".into()));
        }
        EncoderParams::from_flat(self.meta.encoder, &self.params)
    }

    pub fn model_kind(&self) -> ModelKind {
        self.kind
    }

    pub fn meta(&self) -> &ArchMeta {
        &self.meta
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn file_size(&self) -> usize {
        HEADER_LEN + 4 * self.params.len()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.file_size());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.push(self.kind.tag());
        let e = self.meta.encoder;
        for v in [
            e.features,
            e.dim,
            e.arch.tag() as usize,
            e.ngram_min,
            e.ngram_max,
            self.meta.joint_dim,
        ] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for &p in &self.params {
            out.extend_from_slice(&(p as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let avail = bytes.len() as u64;
        let need = |n: usize| -> std::result::Result<(), FormatError> {
            if bytes.len() < n {
                Err(FormatError::Truncated {
                    needed: n as u64,
                    available: avail,
                })
            } else {
                Ok(())
            }
        };
        need(4)?;
        let mut magic = [0u8; 4];
        magic.copy_from_slice(&bytes[..4]);
        if magic != MAGIC {
            return Err(FormatError::BadMagic { found: magic }.into());
        }
        need(8)?;
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let version = u32_at(4);
        if version != FORMAT_VERSION {
            return Err(FormatError::UnsupportedVersion {
                found: version,
                expected: FORMAT_VERSION,
            }
            .into());
        }
        need(HEADER_LEN)?;
        let kind = match bytes[8] {
            0 => ModelKind::Embedding,
            1 => ModelKind::Reranker,
            t => return Err(FormatError::UnknownModelKind(t).into()),
        };
        let f: Vec<u32> = (0..6).map(|i| u32_at(9 + 4 * i)).collect();
        let arch = Arch::from_tag(f[2]).ok_or(FormatError::UnknownArch(f[2]))?;
        let meta = ArchMeta {
            encoder: EncoderConfig {
                features: f[0] as usize,
                dim: f[1] as usize,
                arch,
                ngram_min: f[3] as usize,
                ngram_max: f[4] as usize,
            },
            joint_dim: f[5] as usize,
        };
        let step = u64_at(33);
        let count = u64_at(41);
        let expected = meta.expected_params(kind) as u64;
        if count != expected {
            return Err(FormatError::LengthMismatch {
                found: count,
                expected,
            }
            .into());
        }
        let body = HEADER_LEN as u64 + 4 * count;
        if avail < body {
            return Err(FormatError::Truncated {
                needed: body,
                available: avail,
            }
            .into());
        }
        if avail > body {
            return Err(FormatError::TrailingBytes(avail - body).into());
        }
        let params: Vec<f64> = bytes[HEADER_LEN..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        // a header that parses but describes no valid model is still a bad file
        Checkpoint::new(kind, meta, step, &params)
            .map_err(|e| FormatError::Inconsistent(e.to_string()).into())
    }
}

/// Writes to a sibling temporary file, then renames over `path`.
pub fn save_checkpoint(ck: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &ck.to_bytes())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(contents).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Spherical linear interpolation from `a` (t = 0) to `b` (t = 1).
pub fn slerp(a: &[f64], b: &[f64], t: f64) -> Result<Vec64> {
    if a.len() != b.len() {
        return Err(Error::Dimension {
            expected: a.len(),
            got: b.len(),
        });
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::invalid(format!("interpolation weight {t} outside [0, 1]")));
    }
    let (na, nb) = (norm(a), norm(b));
    if !(na > 0.0) || !(nb > 0.0) {
        return Err(Error::Degenerate("slerp of a zero vector".into()));
    }
    if t == 0.0 {
        return Vec64::new(a.to_vec());
    }
    if t == 1.0 {
        return Vec64::new(b.to_vec());
    }
    let theta = (dot_unchecked(a, b) / (na * nb)).clamp(-1.0, 1.0).acos();
    let out: Vec<f64> = if theta < SLERP_EPS || theta > std::f64::consts::PI - SLERP_EPS {
        a.iter().zip(b).map(|(x, y)| (1.0 - t) * x + t * y).collect()
    } else {
        let s = theta.sin();
        let wa = ((1.0 - t) * theta).sin() / s;
        let wb = (t * theta).sin() / s;
        a.iter().zip(b).map(|(x, y)| wa * x + wb * y).collect()
    };
    Vec64::new(out)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeStrategy {
    #[default]
    ChainedSlerp,
}

/// Merge settings that live in the run configuration.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MergeConfig {
    pub strategy: MergeStrategy,
    /// Weights of each successive slerp; defaults to `1/2, 1/3, ..., 1/k`.
    pub t_schedule: Option<Vec<f64>>,
    /// Interpolate each parameter tensor separately instead of the whole
    /// flattened vector.
    pub per_tensor: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MergePlan {
    pub inputs: Vec<PathBuf>,
    pub config: MergeConfig,
}

pub fn default_schedule(inputs: usize) -> Vec<f64> {
    (2..=inputs).map(|k| 1.0 / k as f64).collect()
}

pub fn merge_checkpoints(plan: &MergePlan) -> Result<Checkpoint> {
    let cks: Vec<Checkpoint> = plan
        .inputs
        .iter()
        .map(load_checkpoint)
        .collect::<Result<_>>()?;
    merge_loaded(&cks, &plan.config)
}

fn slerp_or_same(a: &[f64], b: &[f64], t: f64) -> Result<Vec<f64>> {
    if a == b {
        return Ok(a.to_vec());
    }
    if norm(a) == 0.0 && norm(b) == 0.0 {
        return Ok(a.to_vec());
    }
    Ok(slerp(a, b, t)?.into_inner())
}

/// Chained merge: `m ← slerp(m, next, t_k)` left to right.
pub fn merge_loaded(cks: &[Checkpoint], config: &MergeConfig) -> Result<Checkpoint> {
    if cks.len() < 2 {
        return Err(Error::invalid("merging needs at least two checkpoints"));
    }
    let first = &cks[0];
    for (i, c) in cks.iter().enumerate().skip(1) {
        if c.kind != first.kind || c.meta != first.meta {
            return Err(Error::Incompatible(format!(
                "checkpoint {i} has a different model kind or architecture"
            )));
        }
    }
    let schedule = match &config.t_schedule {
        Some(s) => s.clone(),
        None => default_schedule(cks.len()),
    };
    if schedule.len() != cks.len() - 1 {
        return Err(Error::invalid(format!(
            "t schedule has {} entries for {} checkpoints",
            schedule.len(),
            cks.len()
        )));
    }
    let blocks = if config.per_tensor {
        first.meta.blocks(first.kind)
    } else {
        vec![(0, first.params.len())]
    };
    let mut merged = first.params.clone();
    for (c, &t) in cks[1..].iter().zip(&schedule) {
        let mut next = Vec::with_capacity(merged.len());
        for &(off, len) in &blocks {
            next.extend(slerp_or_same(&merged[off..off + len], &c.params[off..off + len], t)?);
        }
        merged = next;
    }
    let step = cks.iter().map(|c| c.step).max().unwrap_or(0);
    Checkpoint::new(first.kind, first.meta, step, &merged)
}
