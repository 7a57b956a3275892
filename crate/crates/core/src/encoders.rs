//! Frozen conditioning encoders.
//!
//! An encoder maps an image to `T_c × D_c` context tokens plus a global `cls`
//! vector. Encoders are never trained here; every output is a pure function
//! of the [`EncoderSpec`] and the image.
//!
//! * `oracle-factor` embeds the renderer's known factors. Tokens are fixed
//!   random projections of the full factor vector; `cls` carries the class
//!   and hue dims only, with nuisance dims zeroed.
//! * `frozen-random-vit` runs a seeded, untrained transformer over image
//!   patches; `cls` is the mean of the output tokens.
//! * `imported` serves embeddings from an embedding file.
//!
//! Embedding file layout (little-endian): `"EMBD"`, version `u32`, record
//! count `u64`, `T_c u32`, `D_c u32`, then per record: image id `u64`,
//! tokens `f32 × T_c·D_c`, cls `f32 × D_c`.

use std::collections::BTreeMap;
use std::f32::consts::TAU;
use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::binio::{BinRead, BinWrite};
use crate::config::KeyValues;
use crate::data::{ImageConfig, ImageFactors, ImageRecord, Shard, NUM_CLASSES};
use crate::error::{shape_err, Error, Result};
use crate::nn::{linear, plain_norm_params, self_attention};
use crate::rng::{normal_vec_f32, stream, Purpose};
use crate::tensor::{Tape, Tensor};

const MAGIC: &[u8; 4] = b"EMBD";
const VERSION: u32 = 1;

/// Length of the oracle factor vector: class one-hot, hue (2), nuisance (6).
pub const FACTOR_DIMS: usize = NUM_CLASSES as usize + 2 + 6;
const SEMANTIC_DIMS: usize = NUM_CLASSES as usize + 2;

/// Output of an encoder for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextTokens {
    /// `[T_c, D_c]`.
    pub tokens: Tensor<f32>,
    /// `[D_c]`.
    pub cls: Vec<f32>,
    pub source_id: String,
}

impl ContextTokens {
    pub fn num_tokens(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.cls.len()
    }
}

/// Context for a batch: `tokens [B, T_c, D_c]`, `cls [B, D_c]`, plus a
/// per-example flag; `false` means "use the null context".
#[derive(Debug, Clone, PartialEq)]
pub struct ContextBatch {
    pub tokens: Tensor<f32>,
    pub cls: Tensor<f32>,
    pub keep: Vec<bool>,
}

impl ContextBatch {
    pub fn from_contexts(items: &[&ContextTokens]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::InvalidArgument("empty context batch".into()))?;
        let (t, d) = (first.num_tokens(), first.dim());
        let mut tokens = Vec::with_capacity(items.len() * t * d);
        let mut cls = Vec::with_capacity(items.len() * d);
        for c in items {
            if c.tokens.shape() != [t, d] || c.cls.len() != d {
                return Err(shape_err!("mixed context shapes in one batch"));
            }
            tokens.extend_from_slice(c.tokens.data());
            cls.extend_from_slice(&c.cls);
        }
        Ok(Self {
            tokens: Tensor::new(&[items.len(), t, d], tokens)?,
            cls: Tensor::new(&[items.len(), d], cls)?,
            keep: vec![true; items.len()],
        })
    }

    /// Every example uses the null context.
    pub fn null(batch: usize, tokens: usize, dim: usize) -> Result<Self> {
        Ok(Self {
            tokens: Tensor::zeros(&[batch, tokens, dim])?,
            cls: Tensor::zeros(&[batch, dim])?,
            keep: vec![false; batch],
        })
    }

    pub fn len(&self) -> usize {
        self.keep.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keep.is_empty()
    }

    pub fn num_tokens(&self) -> usize {
        self.tokens.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.tokens.shape()[2]
    }

    /// Same contexts repeated `n` times each, in order.
    pub fn repeat_each(&self, n: usize) -> Result<Self> {
        let (t, d) = (self.num_tokens(), self.dim());
        let mut tokens = Vec::with_capacity(self.len() * n * t * d);
        let mut cls = Vec::with_capacity(self.len() * n * d);
        let mut keep = Vec::with_capacity(self.len() * n);
        for i in 0..self.len() {
            for _ in 0..n {
                tokens.extend_from_slice(&self.tokens.data()[i * t * d..(i + 1) * t * d]);
                cls.extend_from_slice(&self.cls.data()[i * d..(i + 1) * d]);
                keep.push(self.keep[i]);
            }
        }
        Ok(Self {
            tokens: Tensor::new(&[self.len() * n, t, d], tokens)?,
            cls: Tensor::new(&[self.len() * n, d], cls)?,
            keep,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EncoderKind {
    OracleFactor,
    FrozenRandomVit,
    Imported(PathBuf),
}

impl fmt::Display for EncoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EncoderKind::OracleFactor => write!(f, "oracle-factor"),
            EncoderKind::FrozenRandomVit => write!(f, "frozen-random-vit"),
            EncoderKind::Imported(p) => write!(f, "imported:{}", p.display()),
        }
    }
}

impl FromStr for EncoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "oracle-factor" => Ok(EncoderKind::OracleFactor),
            "frozen-random-vit" => Ok(EncoderKind::FrozenRandomVit),
            other => match other.strip_prefix("imported:") {
                Some(p) => Ok(EncoderKind::Imported(PathBuf::from(p))),
                None => Err(Error::Config(format!("unknown encoder kind {other:?}"))),
            },
        }
    }
}

/// Complete description of a frozen encoder.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderSpec {
    pub kind: EncoderKind,
    pub seed: u64,
    pub image: ImageConfig,
    pub patch_size: usize,
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    /// `T_c`
    pub tokens: usize,
    /// `D_c`
    pub dim: usize,
}

impl EncoderSpec {
    pub fn oracle_factor(image: ImageConfig, seed: u64) -> Self {
        Self {
            kind: EncoderKind::OracleFactor,
            seed,
            image,
            patch_size: 4,
            depth: 0,
            width: 0,
            heads: 1,
            tokens: 16,
            dim: 32,
        }
    }

    /// Random ViT with one token per `patch_size²` patch.
    pub fn frozen_random_vit(image: ImageConfig, seed: u64) -> Self {
        let patch_size = 4;
        Self {
            kind: EncoderKind::FrozenRandomVit,
            seed,
            image,
            patch_size,
            depth: 2,
            width: 64,
            heads: 4,
            tokens: (image.height as usize / patch_size) * (image.width as usize / patch_size),
            dim: 32,
        }
    }

    pub fn id(&self) -> String {
        match &self.kind {
            EncoderKind::OracleFactor => {
                format!("oracle-factor/s{}/t{}d{}", self.seed, self.tokens, self.dim)
            }
            EncoderKind::FrozenRandomVit => format!(
                "frozen-random-vit/s{}/p{}d{}w{}/t{}d{}",
                self.seed, self.patch_size, self.depth, self.width, self.tokens, self.dim
            ),
            EncoderKind::Imported(p) => format!("imported/{}", p.display()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tokens == 0 || self.dim == 0 {
            return Err(Error::Config("encoder output dims must be positive".into()));
        }
        match self.kind {
            EncoderKind::OracleFactor if self.dim < FACTOR_DIMS => Err(Error::Config(format!(
                "oracle-factor encoder needs dim >= {FACTOR_DIMS}, got {}",
                self.dim
            ))),
            EncoderKind::FrozenRandomVit => {
                let (h, w, p) = (
                    self.image.height as usize,
                    self.image.width as usize,
                    self.patch_size,
                );
                if p == 0 || h % p != 0 || w % p != 0 {
                    return Err(Error::Config(format!("patch {p} does not tile {h}x{w}")));
                }
                if self.tokens != (h / p) * (w / p) {
                    return Err(Error::Config(format!(
                        "frozen-random-vit emits {} tokens, encoder spec says {}",
                        (h / p) * (w / p),
                        self.tokens
                    )));
                }
                if self.width == 0 || self.heads == 0 || !self.width.is_multiple_of(self.heads) {
                    return Err(Error::Config(
                        "encoder width must be a positive multiple of heads".into(),
                    ));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// `key=value` lines under `prefix`.
    pub fn to_kv(&self, prefix: &str) -> Vec<(String, String)> {
        vec![
            (format!("{prefix}.kind"), self.kind.to_string()),
            (format!("{prefix}.seed"), self.seed.to_string()),
            (format!("{prefix}.patch_size"), self.patch_size.to_string()),
            (format!("{prefix}.depth"), self.depth.to_string()),
            (format!("{prefix}.width"), self.width.to_string()),
            (format!("{prefix}.heads"), self.heads.to_string()),
            (format!("{prefix}.tokens"), self.tokens.to_string()),
            (format!("{prefix}.dim"), self.dim.to_string()),
        ]
    }

    /// Inverse of [`EncoderSpec::to_kv`]; missing fields take the defaults of
    /// the named kind.
    pub fn from_kv(kv: &KeyValues, prefix: &str, image: ImageConfig) -> Result<Self> {
        let kind: EncoderKind = kv
            .get(&format!("{prefix}.kind"))?
            .ok_or_else(|| Error::Config(format!("missing {prefix}.kind")))?;
        let seed = kv.get(&format!("{prefix}.seed"))?.unwrap_or(0);
        let mut spec = match &kind {
            EncoderKind::FrozenRandomVit => Self::frozen_random_vit(image, seed),
            _ => Self {
                kind: kind.clone(),
                ..Self::oracle_factor(image, seed)
            },
        };
        kv.load(&format!("{prefix}.patch_size"), &mut spec.patch_size)?;
        kv.load(&format!("{prefix}.depth"), &mut spec.depth)?;
        kv.load(&format!("{prefix}.width"), &mut spec.width)?;
        kv.load(&format!("{prefix}.heads"), &mut spec.heads)?;
        kv.load(&format!("{prefix}.tokens"), &mut spec.tokens)?;
        kv.load(&format!("{prefix}.dim"), &mut spec.dim)?;
        spec.validate()?;
        Ok(spec)
    }
}

struct VitBlock {
    qkv: Tensor<f32>,
    proj: Tensor<f32>,
    fc1: Tensor<f32>,
    fc2: Tensor<f32>,
}

struct VitWeights {
    patch: Tensor<f32>,
    pos: Tensor<f32>,
    blocks: Vec<VitBlock>,
    out: Tensor<f32>,
}

enum Backend {
    Oracle { projections: Vec<Tensor<f32>> },
    Vit(Box<VitWeights>),
    Table(EmbeddingTable),
}

/// An instantiated frozen encoder.
pub struct Encoder {
    spec: EncoderSpec,
    backend: Backend,
}

fn scaled_normal(
    rng: &mut crate::rng::StreamRng,
    rows: usize,
    cols: usize,
    gain: f32,
) -> Result<Tensor<f32>> {
    let std = gain / (rows as f32).sqrt();
    Tensor::new(
        &[rows, cols],
        normal_vec_f32(rng, rows * cols)
            .into_iter()
            .map(|v| v * std)
            .collect(),
    )
}

/// Factor vector laid out as class one-hot, hue (cos, sin), then normalized
/// nuisance.
pub fn factor_vector(f: &ImageFactors) -> [f32; FACTOR_DIMS] {
    let mut v = [0f32; FACTOR_DIMS];
    v[(f.class as usize).min(NUM_CLASSES as usize - 1)] = 1.0;
    let k = NUM_CLASSES as usize;
    v[k] = (TAU * f.hue).cos();
    v[k + 1] = (TAU * f.hue).sin();
    let n = &f.nuisance;
    v[k + 2] = n.pos_x / 0.35;
    v[k + 3] = n.pos_y / 0.35;
    v[k + 4] = (n.scale - 0.6) / 0.15;
    v[k + 5] = n.rotation.cos();
    v[k + 6] = n.rotation.sin();
    v[k + 7] = (n.noise - 0.04) / 0.04;
    v
}

impl Encoder {
    pub fn new(spec: &EncoderSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = stream(spec.seed, Purpose::Encoder, 0);
        let backend = match &spec.kind {
            EncoderKind::OracleFactor => Backend::Oracle {
                projections: (0..spec.tokens)
                    .map(|_| scaled_normal(&mut rng, FACTOR_DIMS, spec.dim, 1.0))
                    .collect::<Result<_>>()?,
            },
            EncoderKind::FrozenRandomVit => {
                let [_, _, c] = spec.image.shape();
                let w = spec.width;
                let patch = scaled_normal(&mut rng, spec.patch_size * spec.patch_size * c, w, 1.0)?;
                let pos = scaled_normal(&mut rng, spec.tokens, w, (spec.tokens as f32).sqrt())?;
                let blocks = (0..spec.depth)
                    .map(|_| {
                        Ok(VitBlock {
                            qkv: scaled_normal(&mut rng, w, 3 * w, 1.0)?,
                            proj: scaled_normal(&mut rng, w, w, 1.0)?,
                            fc1: scaled_normal(&mut rng, w, 2 * w, 1.0)?,
                            fc2: scaled_normal(&mut rng, 2 * w, w, 1.0)?,
                        })
                    })
                    .collect::<Result<_>>()?;
                let out = scaled_normal(&mut rng, w, spec.dim, 1.0)?;
                Backend::Vit(Box::new(VitWeights {
                    patch,
                    pos,
                    blocks,
                    out,
                }))
            }
            EncoderKind::Imported(path) => {
                let table = EmbeddingTable::read(path)?;
                if table.tokens != spec.tokens || table.dim != spec.dim {
                    return Err(Error::Config(format!(
                        "embedding file has T_c={} D_c={}, encoder spec says {} and {}",
                        table.tokens, table.dim, spec.tokens, spec.dim
                    )));
                }
                Backend::Table(table)
            }
        };
        Ok(Self {
            spec: spec.clone(),
            backend,
        })
    }

    pub fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    pub fn encode(&self, image: &ImageRecord) -> Result<ContextTokens> {
        let expected = self.spec.image.shape();
        if image.pixels.shape() != expected {
            return Err(shape_err!(
                "encoder expects images of shape {expected:?}, got {:?}",
                image.pixels.shape()
            ));
        }
        let source_id = self.spec.id();
        match &self.backend {
            Backend::Oracle { projections } => {
                let factors = image.factors.ok_or_else(|| {
                    Error::InvalidArgument(format!(
                        "oracle-factor encoder needs factors for image {}",
                        image.id
                    ))
                })?;
                let f = factor_vector(&factors);
                let d = self.spec.dim;
                let mut tokens = Vec::with_capacity(projections.len() * d);
                for proj in projections {
                    let p = proj.data();
                    for j in 0..d {
                        tokens.push((0..FACTOR_DIMS).map(|i| f[i] * p[i * d + j]).sum());
                    }
                }
                let mut cls = vec![0f32; d];
                cls[..SEMANTIC_DIMS].copy_from_slice(&f[..SEMANTIC_DIMS]);
                Ok(ContextTokens {
                    tokens: Tensor::new(&[projections.len(), d], tokens)?,
                    cls,
                    source_id,
                })
            }
            Backend::Vit(w) => self.encode_vit(w, &image.pixels, source_id),
            Backend::Table(table) => table.get(image.id).cloned(),
        }
    }

    fn encode_vit(
        &self,
        w: &VitWeights,
        pixels: &Tensor<f32>,
        source_id: String,
    ) -> Result<ContextTokens> {
        let tape = Tape::<f32>::new();
        let x = pixels.clone().reshape(&[
            1,
            pixels.shape()[0],
            pixels.shape()[1],
            pixels.shape()[2],
        ])?;
        let patches = tape.constant(crate::nn::patchify(&x, self.spec.patch_size)?);
        let (ones, zeros) = plain_norm_params(&tape, self.spec.width)?;
        let eps = 1e-6;
        let mut h = linear(patches, tape.constant(w.patch.clone()), None)?
            .add(tape.constant(w.pos.clone()))?;
        for b in &w.blocks {
            let n = h.layer_norm(ones, zeros, eps)?;
            let a = self_attention(n, tape.constant(b.qkv.clone()), None, self.spec.heads)?;
            h = h.add(linear(a, tape.constant(b.proj.clone()), None)?)?;
            let n = h.layer_norm(ones, zeros, eps)?;
            let m = linear(
                linear(n, tape.constant(b.fc1.clone()), None)?.gelu()?,
                tape.constant(b.fc2.clone()),
                None,
            )?;
            h = h.add(m)?;
        }
        let out = linear(
            h.layer_norm(ones, zeros, eps)?,
            tape.constant(w.out.clone()),
            None,
        )?;
        let tokens = out.reshape(&[self.spec.tokens, self.spec.dim])?;
        let cls = tokens.mean(0, false)?.value().into_data();
        Ok(ContextTokens {
            tokens: tokens.value(),
            cls,
            source_id,
        })
    }

    pub fn encode_all(&self, images: &[ImageRecord]) -> Result<Vec<ContextTokens>> {
        images.iter().map(|im| self.encode(im)).collect()
    }
}

/// Convenience wrapper: build the encoder and encode one image.
pub fn encode(spec: &EncoderSpec, image: &ImageRecord) -> Result<ContextTokens> {
    Encoder::new(spec)?.encode(image)
}

/// `a·b / (‖a‖‖b‖)`.
pub fn cosine_similarity(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(shape_err!(
            "cosine_similarity of lengths {} and {}",
            a.len(),
            b.len()
        ));
    }
    let (mut dot, mut na, mut nb) = (0f64, 0f64, 0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::InvalidArgument(
            "cosine similarity of a zero vector".into(),
        ));
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

/// Precomputed embeddings keyed by image id.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub tokens: usize,
    pub dim: usize,
    records: BTreeMap<u64, ContextTokens>,
}

impl EmbeddingTable {
    pub fn new(tokens: usize, dim: usize) -> Self {
        Self {
            tokens,
            dim,
            records: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, id: u64, ctx: ContextTokens) -> Result<()> {
        if ctx.tokens.shape() != [self.tokens, self.dim] || ctx.cls.len() != self.dim {
            return Err(shape_err!(
                "context {:?}/{} does not match table {}x{}",
                ctx.tokens.shape(),
                ctx.cls.len(),
                self.tokens,
                self.dim
            ));
        }
        self.records.insert(id, ctx);
        Ok(())
    }

    pub fn get(&self, id: u64) -> Result<&ContextTokens> {
        self.records.get(&id).ok_or(Error::MissingRecord(id))
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = u64> + '_ {
        self.records.keys().copied()
    }

    /// Encodes every image of a shard.
    pub fn from_shard(encoder: &Encoder, shard: &Shard) -> Result<Self> {
        let spec = encoder.spec();
        let mut table = Self::new(spec.tokens, spec.dim);
        for id in shard.image_ids() {
            table.insert(id, encoder.encode(&shard.record(id)?)?)?;
        }
        Ok(table)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.put_u32(VERSION)?;
        w.put_u64(self.records.len() as u64)?;
        w.put_u32(self.tokens as u32)?;
        w.put_u32(self.dim as u32)?;
        for (&id, ctx) in &self.records {
            w.put_u64(id)?;
            w.put_f32s(ctx.tokens.data())?;
            w.put_f32s(&ctx.cls)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read, source: &str) -> Result<Self> {
        r.expect_magic(MAGIC)?;
        let version = r.get_u32()?;
        if version != VERSION {
            return Err(Error::Format(format!(
                "unsupported embedding version {version}"
            )));
        }
        let n = r.get_u64()?;
        let tokens = r.get_u32()? as usize;
        let dim = r.get_u32()? as usize;
        let mut table = Self::new(tokens, dim);
        for _ in 0..n {
            let id = r.get_u64()?;
            let tok = r.get_f32s(tokens * dim)?;
            let cls = r.get_f32s(dim)?;
            table.insert(
                id,
                ContextTokens {
                    tokens: Tensor::new(&[tokens, dim], tok)?,
                    cls,
                    source_id: source.to_string(),
                },
            )?;
        }
        Ok(table)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let file = File::open(path)
            .map_err(|e| Error::Data(format!("cannot open embeddings {}: {e}", path.display())))?;
        Self::read_from(
            &mut BufReader::new(file),
            &format!("imported/{}", path.display()),
        )
    }
}

/// Encodes every image of the shard at `shard_path` and writes an embedding
/// file; returns the record count.
pub fn precompute_embeddings(
    spec: &EncoderSpec,
    shard_path: &Path,
    out_path: &Path,
) -> Result<usize> {
    let shard = Shard::read(shard_path)?;
    let encoder = Encoder::new(spec)?;
    let table = EmbeddingTable::from_shard(&encoder, &shard)?;
    if table.len() != shard.num_images() {
        return Err(Error::Data(format!(
            "encoded {} of {} images",
            table.len(),
            shard.num_images()
        )));
    }
    table.write(out_path)?;
    Ok(table.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_corpus;

    #[test]
    fn cosine_cases() {
        let v = [0.3f32, -1.2, 2.0];
        assert!((cosine_similarity(&v, &v).unwrap() - 1.0).abs() < 1e-12);
        let neg: Vec<f32> = v.iter().map(|x| -x).collect();
        assert!((cosine_similarity(&v, &neg).unwrap() + 1.0).abs() < 1e-12);
        let s = cosine_similarity(&[1.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!((s - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert!(cosine_similarity(&[0.0, 0.0], &[1.0, 1.0]).is_err());
        assert!(cosine_similarity(&[1.0], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn spec_kv_round_trip() {
        let image = ImageConfig::default();
        for spec in [
            EncoderSpec::oracle_factor(image, 3),
            EncoderSpec::frozen_random_vit(image, 4),
        ] {
            let kv: KeyValues = spec.to_kv("enc").into_iter().collect();
            assert_eq!(EncoderSpec::from_kv(&kv, "enc", image).unwrap(), spec);
        }
        assert!(EncoderSpec::from_kv(&KeyValues::new(), "enc", image).is_err());
    }

    #[test]
    fn oracle_factor_episode_members_agree_on_cls() {
        let shard = generate_corpus(3, 3, ImageConfig::default(), 5).unwrap();
        let enc = Encoder::new(&EncoderSpec::oracle_factor(shard.image, 0)).unwrap();
        for ep in &shard.episodes {
            let a = enc.encode(&shard.record(ep.members[0]).unwrap()).unwrap();
            let b = enc.encode(&shard.record(ep.members[1]).unwrap()).unwrap();
            assert_eq!(a.cls, b.cls);
            assert!((cosine_similarity(&a.cls, &b.cls).unwrap() - 1.0).abs() < 1e-12);
            // tokens carry nuisance, so they differ
            assert_ne!(a.tokens, b.tokens);
        }
    }

    #[test]
    fn oracle_factor_requires_factors() {
        let enc = Encoder::new(&EncoderSpec::oracle_factor(ImageConfig::default(), 0)).unwrap();
        let img = ImageRecord {
            id: 0,
            pixels: Tensor::zeros(&[16, 16, 3]).unwrap(),
            factors: None,
        };
        assert!(enc.encode(&img).is_err());
    }

    #[test]
    fn vit_is_deterministic_and_shaped() {
        let shard = generate_corpus(2, 2, ImageConfig::default(), 9).unwrap();
        let spec = EncoderSpec::frozen_random_vit(shard.image, 3);
        let rec = shard.record(0).unwrap();
        let a = Encoder::new(&spec).unwrap().encode(&rec).unwrap();
        let b = Encoder::new(&spec).unwrap().encode(&rec).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.tokens.shape(), &[16, 32]);
        assert!(a.tokens.validate("tokens").is_ok());
        let wrong = ImageRecord {
            id: 0,
            pixels: Tensor::zeros(&[8, 8, 3]).unwrap(),
            factors: None,
        };
        assert!(Encoder::new(&spec).unwrap().encode(&wrong).is_err());
    }

    #[test]
    fn spec_kind_parsing() {
        for k in ["oracle-factor", "frozen-random-vit", "imported:/tmp/x.embd"] {
            assert_eq!(k.parse::<EncoderKind>().unwrap().to_string(), k);
        }
        assert!("bogus".parse::<EncoderKind>().is_err());
    }
}
