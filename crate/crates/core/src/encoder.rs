//! Instruction-aware toy text encoder.
//!
//! Text is featurized into hashed character n-gram counts, projected to `dim`
//! coordinates, optionally passed through one `tanh` layer, prefix-truncated for
//! Matryoshka-style reduced dimensions and finally L2-normalized.
//!
//! Flattened parameter layout (used by gradients, merging and checkpoints):
//! `projection` row-major `features x dim`, then for `mlp1` the hidden weight
//! row-major `dim x dim` (row = output unit) followed by the `dim` biases.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{dot_unchecked, l2_normalize, norm, Mat64, Seed, Vec64};

/// End-of-sequence marker appended to every encoded string.
pub const EOS: &str = "<|endoftext|>";

pub const MIN_DIM: usize = 8;
pub const MIN_FEATURES: usize = 256;
pub const MAX_NGRAM: usize = 5;

/// Query input: `{Instruction} {Query}<|endoftext|>`; no leading space when the
/// instruction is empty.
pub fn format_query(instruction: &str, query: &str) -> Result<String> {
    if query.is_empty() {
        return Err(Error::invalid("query must be nonempty"));
    }
    if instruction.is_empty() {
        Ok(format!("{query}{EOS}"))
    } else {
        Ok(format!("{instruction} {query}{EOS}"))
    }
}

/// Documents carry no instruction, only the end-of-sequence marker.
pub fn format_document(document: &str) -> String {
    format!("{document}{EOS}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Linear,
    Mlp1,
}

impl Arch {
    pub fn tag(self) -> u32 {
        match self {
            Arch::Linear => 0,
            Arch::Mlp1 => 1,
        }
    }

    pub fn from_tag(tag: u32) -> Option<Arch> {
        match tag {
            0 => Some(Arch::Linear),
            1 => Some(Arch::Mlp1),
            _ => None,
        }
    }
}

/// Shape of an encoder: featurizer settings plus embedding dimension and arch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub features: usize,
    pub dim: usize,
    pub arch: Arch,
    pub ngram_min: usize,
    pub ngram_max: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            features: 1 << 16,
            dim: 64,
            arch: Arch::Mlp1,
            ngram_min: 2,
            ngram_max: 4,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        validate_featurizer(self.features, self.ngram_min, self.ngram_max)?;
        if self.dim < MIN_DIM {
            return Err(Error::invalid(format!("dim {} < {MIN_DIM}", self.dim)));
        }
        if self.features < self.dim {
            return Err(Error::invalid(format!(
                "features {} < dim {}",
                self.features, self.dim
            )));
        }
        if u32::try_from(self.features).is_err() {
            return Err(Error::invalid("feature space too large"));
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        let proj = self.features * self.dim;
        match self.arch {
            Arch::Linear => proj,
            Arch::Mlp1 => proj + self.dim * self.dim + self.dim,
        }
    }

    pub fn featurize(&self, text: &str) -> FeatureVector {
        featurize_unchecked(text, self.features, self.ngram_min, self.ngram_max)
    }
}

fn validate_featurizer(features: usize, n_lo: usize, n_hi: usize) -> Result<()> {
    if features < MIN_FEATURES {
        return Err(Error::invalid(format!(
            "feature space {features} < {MIN_FEATURES}"
        )));
    }
    if n_lo < 1 || n_lo > n_hi || n_hi > MAX_NGRAM {
        return Err(Error::invalid(format!("bad n-gram range {n_lo}..={n_hi}")));
    }
    Ok(())
}

/// Sparse feature vector: strictly increasing indices with positive weights.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub indices: Vec<u32>,
    pub weights: Vec<f64>,
    pub space: usize,
}

impl FeatureVector {
    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.indices
            .iter()
            .zip(&self.weights)
            .map(|(&i, &w)| (i as usize, w))
    }

    pub fn l2_norm(&self) -> f64 {
        norm(&self.weights)
    }
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Hashed character n-gram counts for `n` in `n_lo..=n_hi`, bucketed by
/// FNV-1a of the n-gram's UTF-8 bytes modulo `features`.
pub fn featurize(text: &str, features: usize, n_lo: usize, n_hi: usize) -> Result<FeatureVector> {
    validate_featurizer(features, n_lo, n_hi)?;
    Ok(featurize_unchecked(text, features, n_lo, n_hi))
}

fn featurize_unchecked(text: &str, features: usize, n_lo: usize, n_hi: usize) -> FeatureVector {
    // byte offsets of char boundaries, plus the end
    let bounds: Vec<usize> = text
        .char_indices()
        .map(|(i, _)| i)
        .chain(std::iter::once(text.len()))
        .collect();
    let n_chars = bounds.len() - 1;
    let mut raw: Vec<u32> = Vec::new();
    for n in n_lo..=n_hi {
        if n_chars < n {
            continue;
        }
        for start in 0..=(n_chars - n) {
            let gram = &text.as_bytes()[bounds[start]..bounds[start + n]];
            raw.push((fnv1a64(gram) % features as u64) as u32);
        }
    }
    raw.sort_unstable();
    let mut indices = Vec::new();
    let mut weights = Vec::new();
    for idx in raw {
        if indices.last() == Some(&idx) {
            *weights.last_mut().unwrap() += 1.0;
        } else {
            indices.push(idx);
            weights.push(1.0);
        }
    }
    FeatureVector {
        indices,
        weights,
        space: features,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HiddenLayer {
    /// `dim x dim`, row = output unit.
    pub weight: Mat64,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    config: EncoderConfig,
    /// `features x dim`.
    pub projection: Mat64,
    pub hidden: Option<HiddenLayer>,
}

/// Intermediate activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct Activations {
    pub projected: Vec<f64>,
    /// Pre-normalization embedding (full width).
    pub output: Vec<f64>,
}

impl EncoderParams {
    /// Projection entries uniform in `[-1/sqrt(F), 1/sqrt(F)]`. The hidden layer
    /// (mlp1) draws from `[-1/sqrt(D), 1/sqrt(D)]` with zero bias.
    pub fn init(seed: Seed, config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = seed.rng();
        let bound = 1.0 / (config.features as f64).sqrt();
        let proj: Vec<f64> = (0..config.features * config.dim)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        let projection = Mat64::from_vec(config.features, config.dim, proj)?;
        let hidden = match config.arch {
            Arch::Linear => None,
            Arch::Mlp1 => {
                let hb = 1.0 / (config.dim as f64).sqrt();
                let w: Vec<f64> = (0..config.dim * config.dim)
                    .map(|_| rng.random_range(-hb..=hb))
                    .collect();
                Some(HiddenLayer {
                    weight: Mat64::from_vec(config.dim, config.dim, w)?,
                    bias: vec![0.0; config.dim],
                })
            }
        };
        Ok(EncoderParams {
            config,
            projection,
            hidden,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn num_params(&self) -> usize {
        self.config.num_params()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        out.extend_from_slice(self.projection.as_slice());
        if let Some(h) = &self.hidden {
            out.extend_from_slice(h.weight.as_slice());
            out.extend_from_slice(&h.bias);
        }
        out
    }

    /// Block boundaries of the flat layout, as `(offset, len)`.
    pub fn blocks(&self) -> Vec<(usize, usize)> {
        let p = self.config.features * self.config.dim;
        match self.config.arch {
            Arch::Linear => vec![(0, p)],
            Arch::Mlp1 => {
                let d = self.config.dim;
                vec![(0, p), (p, d * d), (p + d * d, d)]
            }
        }
    }

    pub fn from_flat(config: EncoderConfig, flat: &[f64]) -> Result<Self> {
        config.validate()?;
        if flat.len() != config.num_params() {
            return Err(Error::Dimension {
                expected: config.num_params(),
                got: flat.len(),
            });
        }
        let p = config.features * config.dim;
        let projection = Mat64::from_vec(config.features, config.dim, flat[..p].to_vec())?;
        let hidden = match config.arch {
            Arch::Linear => None,
            Arch::Mlp1 => {
                let d = config.dim;
                Some(HiddenLayer {
                    weight: Mat64::from_vec(d, d, flat[p..p + d * d].to_vec())?,
                    bias: flat[p + d * d..].to_vec(),
                })
            }
        };
        Ok(EncoderParams {
            config,
            projection,
            hidden,
        })
    }

    /// Adds `delta` (flat layout) scaled by `scale` into the parameters.
    pub fn apply_update(&mut self, delta: &[f64], scale: f64) {
        let p = self.projection.as_slice().len();
        for (w, d) in self.projection.as_mut_slice().iter_mut().zip(&delta[..p]) {
            *w += scale * d;
        }
        if let Some(h) = &mut self.hidden {
            let dd = h.weight.as_slice().len();
            for (w, d) in h.weight.as_mut_slice().iter_mut().zip(&delta[p..p + dd]) {
                *w += scale * d;
            }
            for (w, d) in h.bias.iter_mut().zip(&delta[p + dd..]) {
                *w += scale * d;
            }
        }
    }

    pub fn forward(&self, fv: &FeatureVector) -> Activations {
        let d = self.config.dim;
        let mut projected = vec![0.0; d];
        for (idx, w) in fv.iter() {
            for (acc, p) in projected.iter_mut().zip(self.projection.row(idx)) {
                *acc += w * p;
            }
        }
        let output = match &self.hidden {
            None => projected.clone(),
            Some(h) => (0..d)
                .map(|i| (dot_unchecked(h.weight.row(i), &projected) + h.bias[i]).tanh())
                .collect(),
        };
        Activations { projected, output }
    }

    /// Accumulates the gradient, given `grad_output` = dL/d(output), into `grad`
    /// (flat layout).
    pub fn backward(
        &self,
        fv: &FeatureVector,
        act: &Activations,
        grad_output: &[f64],
        grad: &mut [f64],
    ) {
        let d = self.config.dim;
        let p = self.config.features * d;
        let grad_projected: Vec<f64> = match &self.hidden {
            None => grad_output.to_vec(),
            Some(h) => {
                let pre: Vec<f64> = grad_output
                    .iter()
                    .zip(&act.output)
                    .map(|(g, z)| g * (1.0 - z * z))
                    .collect();
                let (gw, gb) = grad[p..].split_at_mut(d * d);
                let mut gp = vec![0.0; d];
                for i in 0..d {
                    let gi = pre[i];
                    if gi == 0.0 {
                        continue;
                    }
                    gb[i] += gi;
                    let row = &mut gw[i * d..(i + 1) * d];
                    for ((g, x), (acc, w)) in row
                        .iter_mut()
                        .zip(&act.projected)
                        .zip(gp.iter_mut().zip(h.weight.row(i)))
                    {
                        *g += gi * x;
                        *acc += gi * w;
                    }
                }
                gp
            }
        };
        for (idx, w) in fv.iter() {
            let row = &mut grad[idx * d..(idx + 1) * d];
            for (g, gp) in row.iter_mut().zip(&grad_projected) {
                *g += w * gp;
            }
        }
    }

    pub fn check_target_dim(&self, target_dim: Option<usize>) -> Result<usize> {
        match target_dim {
            None => Ok(self.config.dim),
            Some(t) if (MIN_DIM..=self.config.dim).contains(&t) => Ok(t),
            Some(t) => Err(Error::invalid(format!(
                "target dim {t} outside [{MIN_DIM}, {}]",
                self.config.dim
            ))),
        }
    }

    /// Pre-normalization embedding, truncated to `target_dim`.
    pub fn embed_raw(&self, text: &str, target_dim: Option<usize>) -> Result<Vec<f64>> {
        let t = self.check_target_dim(target_dim)?;
        let mut out = self.forward(&self.config.featurize(text)).output;
        out.truncate(t);
        Ok(out)
    }

    /// Unit-norm embedding of `text` (already formatted), optionally truncated.
    pub fn embed(&self, text: &str, target_dim: Option<usize>) -> Result<Vec64> {
        self.embed_features(&self.config.featurize(text), target_dim)
    }

    pub fn embed_features(&self, fv: &FeatureVector, target_dim: Option<usize>) -> Result<Vec64> {
        let t = self.check_target_dim(target_dim)?;
        let out = self.forward(fv).output;
        l2_normalize(&out[..t])
    }

    pub fn embed_query(&self, instruction: &str, query: &str, target_dim: Option<usize>) -> Result<Vec64> {
        self.embed(&format_query(instruction, query)?, target_dim)
    }

    pub fn embed_document(&self, document: &str, target_dim: Option<usize>) -> Result<Vec64> {
        self.embed(&format_document(document), target_dim)
    }
}

/// Backward through `e = u / |u|` where `u` is the `len(grad_e)`-prefix of `raw`:
/// returns dL/d(raw) with zeros past the prefix.
pub fn normalize_backward(raw: &[f64], unit: &[f64], grad_unit: &[f64]) -> Vec<f64> {
    let t = unit.len();
    let n = norm(&raw[..t]);
    let proj = dot_unchecked(unit, grad_unit);
    let mut out = vec![0.0; raw.len()];
    for k in 0..t {
        out[k] = (grad_unit[k] - unit[k] * proj) / n;
    }
    out
}
