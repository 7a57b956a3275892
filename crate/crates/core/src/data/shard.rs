//! Shard file: all images of a corpus plus episode metadata.
//!
//! Layout (little-endian): `"EPIS"`, version `u32`, image count `u64`,
//! `H, W, C` as `u32`, images as `f32[N, H, W, C]`, episode count `u64`, then
//! per episode: id `u64`, class `u32`, hue `f32`, member count `u32`, member
//! image ids `u64 × n`, nuisance `f32 × 5` per member.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;

use super::render::{render, sample_nuisance, ImageConfig, NUM_CLASSES};
use super::{EpisodeRecord, ImageFactors, ImageRecord, Nuisance};
use crate::binio::{BinRead, BinWrite};
use crate::error::{Error, Result};
use crate::rng::{stream, Purpose};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"EPIS";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Shard {
    pub image: ImageConfig,
    /// Flat `[N, H, W, C]`.
    pixels: Vec<f32>,
    pub episodes: Vec<EpisodeRecord>,
    /// image id → (episode index, member index)
    index: BTreeMap<u64, (usize, usize)>,
}

/// Renders `num_episodes × members_per_episode` images.
///
/// Each episode draws its own class and hue from a stream derived from
/// `(seed, episode)`, so episodes can be generated independently.
pub fn generate_corpus(
    num_episodes: usize,
    members_per_episode: usize,
    image: ImageConfig,
    seed: u64,
) -> Result<Shard> {
    image.validate()?;
    if num_episodes > 0 && members_per_episode == 0 {
        return Err(Error::InvalidArgument(
            "members per episode must be positive".into(),
        ));
    }
    let mut pixels = Vec::with_capacity(num_episodes * members_per_episode * image.numel());
    let mut episodes = Vec::with_capacity(num_episodes);
    let mut next_id = 0u64;
    for e in 0..num_episodes {
        let mut rng = stream(seed, Purpose::Render, e as u64);
        let class = rng.random_range(0..NUM_CLASSES);
        let hue: f32 = rng.random_range(0.0..1.0);
        let mut members = Vec::with_capacity(members_per_episode);
        let mut nuisance = Vec::with_capacity(members_per_episode);
        for _ in 0..members_per_episode {
            let n = sample_nuisance(&mut rng);
            pixels.extend(render(&image, class, hue, &n, &mut rng));
            members.push(next_id);
            nuisance.push(n);
            next_id += 1;
        }
        episodes.push(EpisodeRecord {
            episode_id: e as u64,
            class,
            hue,
            members,
            nuisance,
        });
    }
    Shard::from_parts(image, pixels, episodes)
}

impl Shard {
    pub fn from_parts(
        image: ImageConfig,
        pixels: Vec<f32>,
        episodes: Vec<EpisodeRecord>,
    ) -> Result<Self> {
        if !pixels.len().is_multiple_of(image.numel().max(1)) {
            return Err(Error::Format(
                "pixel buffer is not a whole number of images".into(),
            ));
        }
        let n_images = (pixels.len() / image.numel()) as u64;
        let mut index = BTreeMap::new();
        for (ei, ep) in episodes.iter().enumerate() {
            if ep.members.len() != ep.nuisance.len() {
                return Err(Error::Format(format!(
                    "episode {} has {} members but {} nuisance records",
                    ep.episode_id,
                    ep.members.len(),
                    ep.nuisance.len()
                )));
            }
            for (mi, &id) in ep.members.iter().enumerate() {
                if id >= n_images {
                    return Err(Error::Format(format!(
                        "member id {id} beyond {n_images} images"
                    )));
                }
                if index.insert(id, (ei, mi)).is_some() {
                    return Err(Error::Format(format!("image {id} listed twice")));
                }
            }
        }
        Ok(Self {
            image,
            pixels,
            episodes,
            index,
        })
    }

    pub fn num_images(&self) -> usize {
        self.pixels.len() / self.image.numel()
    }

    pub fn image_ids(&self) -> impl Iterator<Item = u64> + '_ {
        0..self.num_images() as u64
    }

    pub fn pixels(&self, id: u64) -> Result<&[f32]> {
        let n = self.image.numel();
        let i = id as usize;
        if i >= self.num_images() {
            return Err(Error::MissingRecord(id));
        }
        Ok(&self.pixels[i * n..(i + 1) * n])
    }

    pub fn image(&self, id: u64) -> Result<Tensor<f32>> {
        Tensor::new(&self.image.shape(), self.pixels(id)?.to_vec())
    }

    pub fn episode_of(&self, id: u64) -> Option<&EpisodeRecord> {
        self.index.get(&id).map(|&(e, _)| &self.episodes[e])
    }

    pub fn factors(&self, id: u64) -> Option<ImageFactors> {
        self.index.get(&id).map(|&(e, m)| {
            let ep = &self.episodes[e];
            ImageFactors {
                class: ep.class,
                hue: ep.hue,
                nuisance: ep.nuisance[m],
            }
        })
    }

    pub fn record(&self, id: u64) -> Result<ImageRecord> {
        Ok(ImageRecord {
            id,
            pixels: self.image(id)?,
            factors: self.factors(id),
        })
    }

    pub fn records(&self) -> Result<Vec<ImageRecord>> {
        self.image_ids().map(|id| self.record(id)).collect()
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.put_u32(VERSION)?;
        w.put_u64(self.num_images() as u64)?;
        w.put_u32(self.image.height)?;
        w.put_u32(self.image.width)?;
        w.put_u32(self.image.channels)?;
        w.put_f32s(&self.pixels)?;
        w.put_u64(self.episodes.len() as u64)?;
        for ep in &self.episodes {
            w.put_u64(ep.episode_id)?;
            w.put_u32(ep.class)?;
            w.put_f32(ep.hue)?;
            w.put_u32(ep.members.len() as u32)?;
            for &m in &ep.members {
                w.put_u64(m)?;
            }
            for n in &ep.nuisance {
                w.put_f32s(&n.to_array())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        r.expect_magic(MAGIC)?;
        let version = r.get_u32()?;
        if version != VERSION {
            return Err(Error::Format(format!(
                "unsupported shard version {version}"
            )));
        }
        let n = r.get_u64()? as usize;
        let image = ImageConfig {
            height: r.get_u32()?,
            width: r.get_u32()?,
            channels: r.get_u32()?,
        };
        image.validate().map_err(|e| Error::Format(e.to_string()))?;
        let pixels = r.get_f32s(n * image.numel())?;
        let n_episodes = r.get_u64()? as usize;
        let mut episodes = Vec::with_capacity(n_episodes.min(1 << 20));
        for _ in 0..n_episodes {
            let episode_id = r.get_u64()?;
            let class = r.get_u32()?;
            let hue = r.get_f32()?;
            let count = r.get_u32()? as usize;
            let members = (0..count)
                .map(|_| r.get_u64())
                .collect::<Result<Vec<_>>>()?;
            let nuisance = (0..count)
                .map(|_| {
                    let v = r.get_f32s(Nuisance::LEN)?;
                    Ok(Nuisance::from_array([v[0], v[1], v[2], v[3], v[4]]))
                })
                .collect::<Result<Vec<_>>>()?;
            episodes.push(EpisodeRecord {
                episode_id,
                class,
                hue,
                members,
                nuisance,
            });
        }
        Shard::from_parts(image, pixels, episodes)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let file = File::open(path)
            .map_err(|e| Error::Data(format!("cannot open shard {}: {e}", path.display())))?;
        Self::read_from(&mut BufReader::new(file))
    }
}
