//! (conditioning, target) pair sampling and similarity filtering.
//!
//! Pair list layout (little-endian): `"PAIR"`, version `u32`, count `u64`,
//! then per record: cond id `u64`, target id `u64`, similarity `f32` (NaN
//! when not computed), episode id `u64`.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::Rng;

use super::shard::Shard;
use crate::binio::{BinRead, BinWrite};
use crate::encoders::{cosine_similarity, EmbeddingTable, EncoderSpec};
use crate::error::{Error, Result};
use crate::rng::{stream, Purpose, StreamRng};

const MAGIC: &[u8; 4] = b"PAIR";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PairMode {
    /// Two distinct members of one episode.
    #[default]
    Pair,
    /// The target conditions on itself.
    Reconstruction,
    /// Target drawn from any image sharing the conditioning image's class.
    LabelGrouped,
}

impl fmt::Display for PairMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PairMode::Pair => "pair",
            PairMode::Reconstruction => "reconstruction",
            PairMode::LabelGrouped => "label-grouped",
        })
    }
}

impl FromStr for PairMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pair" => Ok(PairMode::Pair),
            "reconstruction" => Ok(PairMode::Reconstruction),
            "label-grouped" => Ok(PairMode::LabelGrouped),
            other => Err(Error::Config(format!("unknown pair mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairRecord {
    pub cond_image_id: u64,
    pub target_image_id: u64,
    /// Cosine similarity of the two `cls` embeddings, once computed.
    pub similarity: Option<f32>,
    /// Episode of the target image.
    pub episode_id: u64,
}

impl PairRecord {
    fn new(cond: u64, target: u64, episode_id: u64) -> Self {
        Self {
            cond_image_id: cond,
            target_image_id: target,
            similarity: None,
            episode_id,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterConfig {
    pub low: f64,
    pub high: f64,
    pub encoder: EncoderSpec,
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.low < self.high)
            || !(-1.0..=1.0).contains(&self.low)
            || !(-1.0..=1.0).contains(&self.high)
        {
            return Err(Error::Config(format!(
                "filter thresholds must satisfy -1 <= low < high <= 1, got {} and {}",
                self.low, self.high
            )));
        }
        Ok(())
    }
}

fn same_class_pool(shard: &Shard, class: u32) -> Vec<(u64, u64)> {
    shard
        .episodes
        .iter()
        .filter(|ep| ep.class == class)
        .flat_map(|ep| ep.members.iter().map(move |&m| (m, ep.episode_id)))
        .collect()
}

fn draw_label_grouped(pool: &[(u64, u64)], cond: u64, rng: &mut StreamRng) -> Result<PairRecord> {
    if pool.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "image {cond} has no other image of its class"
        )));
    }
    // pool contains cond exactly once; draw from the rest
    let pos = pool
        .iter()
        .position(|&(m, _)| m == cond)
        .expect("cond is in its own class pool");
    let mut j = rng.random_range(0..pool.len() - 1);
    if j >= pos {
        j += 1;
    }
    let (target, episode) = pool[j];
    Ok(PairRecord::new(cond, target, episode))
}

/// Draws one pair with its conditioning image from episode `episode_index`.
pub fn sample_pair(
    shard: &Shard,
    episode_index: usize,
    mode: PairMode,
    rng: &mut StreamRng,
) -> Result<PairRecord> {
    let ep = shard.episodes.get(episode_index).ok_or_else(|| {
        Error::InvalidArgument(format!("episode index {episode_index} out of range"))
    })?;
    let n = ep.members.len();
    match mode {
        PairMode::Reconstruction => {
            if n == 0 {
                return Err(Error::InvalidArgument(format!(
                    "episode {} is empty",
                    ep.episode_id
                )));
            }
            let m = ep.members[rng.random_range(0..n)];
            Ok(PairRecord::new(m, m, ep.episode_id))
        }
        PairMode::Pair => {
            if n < 2 {
                return Err(Error::InvalidArgument(format!(
                    "pair mode needs 2 members, episode {} has {n}",
                    ep.episode_id
                )));
            }
            let i = rng.random_range(0..n);
            let mut j = rng.random_range(0..n - 1);
            if j >= i {
                j += 1;
            }
            Ok(PairRecord::new(ep.members[i], ep.members[j], ep.episode_id))
        }
        PairMode::LabelGrouped => {
            if n == 0 {
                return Err(Error::InvalidArgument(format!(
                    "episode {} is empty",
                    ep.episode_id
                )));
            }
            let cond = ep.members[rng.random_range(0..n)];
            draw_label_grouped(&same_class_pool(shard, ep.class), cond, rng)
        }
    }
}

/// Enumerates the training pairs of a shard.
///
/// * reconstruction: `(i, i)` for every image;
/// * pair: every ordered pair of distinct members within each episode;
/// * label-grouped: for every image, `members - 1` targets drawn from its
///   class, matching the pair-mode count.
pub fn candidate_pairs(shard: &Shard, mode: PairMode, seed: u64) -> Result<Vec<PairRecord>> {
    let mut out = Vec::new();
    match mode {
        PairMode::Reconstruction => {
            for ep in &shard.episodes {
                out.extend(
                    ep.members
                        .iter()
                        .map(|&m| PairRecord::new(m, m, ep.episode_id)),
                );
            }
        }
        PairMode::Pair => {
            for ep in &shard.episodes {
                if ep.members.len() < 2 {
                    return Err(Error::InvalidArgument(format!(
                        "pair mode needs 2 members, episode {} has {}",
                        ep.episode_id,
                        ep.members.len()
                    )));
                }
                for &c in &ep.members {
                    for &t in &ep.members {
                        if c != t {
                            out.push(PairRecord::new(c, t, ep.episode_id));
                        }
                    }
                }
            }
        }
        PairMode::LabelGrouped => {
            let mut pools: BTreeMap<u32, Vec<(u64, u64)>> = BTreeMap::new();
            for (e, ep) in shard.episodes.iter().enumerate() {
                let pool = pools
                    .entry(ep.class)
                    .or_insert_with(|| same_class_pool(shard, ep.class));
                let mut rng = stream(seed, Purpose::Pairing, e as u64);
                let draws = ep.members.len().saturating_sub(1).max(1);
                for &c in &ep.members {
                    for _ in 0..draws {
                        out.push(draw_label_grouped(pool, c, &mut rng)?);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Keeps pairs whose similarity lies in `[low, high]`. Pairs without a
/// similarity are dropped.
pub fn filter_by_similarity(pairs: &[PairRecord], low: f64, high: f64) -> Vec<PairRecord> {
    pairs
        .iter()
        .filter(|p| {
            p.similarity
                .is_some_and(|s| low <= s as f64 && s as f64 <= high)
        })
        .copied()
        .collect()
}

/// Computes `cls` cosine similarity for every pair and keeps those inside
/// the configured band. The stored similarity is rounded to `f32` before the
/// comparison, so re-filtering a written pair list gives the same result.
pub fn filter_pairs(
    pairs: &[PairRecord],
    cfg: &FilterConfig,
    embeddings: &EmbeddingTable,
) -> Result<Vec<PairRecord>> {
    cfg.validate()?;
    let mut scored = Vec::with_capacity(pairs.len());
    for p in pairs {
        let a = embeddings.get(p.cond_image_id)?;
        let b = embeddings.get(p.target_image_id)?;
        let s = cosine_similarity(&a.cls, &b.cls)? as f32;
        scored.push(PairRecord {
            similarity: Some(s),
            ..*p
        });
    }
    Ok(filter_by_similarity(&scored, cfg.low, cfg.high))
}

pub fn write_pairs_to(pairs: &[PairRecord], w: &mut impl Write) -> Result<()> {
    w.write_all(MAGIC)?;
    w.put_u32(VERSION)?;
    w.put_u64(pairs.len() as u64)?;
    for p in pairs {
        w.put_u64(p.cond_image_id)?;
        w.put_u64(p.target_image_id)?;
        w.put_f32(p.similarity.unwrap_or(f32::NAN))?;
        w.put_u64(p.episode_id)?;
    }
    Ok(())
}

pub fn read_pairs_from(r: &mut impl Read) -> Result<Vec<PairRecord>> {
    r.expect_magic(MAGIC)?;
    let version = r.get_u32()?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported pair list version {version}"
        )));
    }
    let n = r.get_u64()? as usize;
    let mut out = Vec::with_capacity(n.min(1 << 20));
    for _ in 0..n {
        let cond = r.get_u64()?;
        let target = r.get_u64()?;
        let s = r.get_f32()?;
        let episode_id = r.get_u64()?;
        out.push(PairRecord {
            cond_image_id: cond,
            target_image_id: target,
            similarity: (!s.is_nan()).then_some(s),
            episode_id,
        });
    }
    Ok(out)
}

pub fn write_pairs(pairs: &[PairRecord], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_pairs_to(pairs, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn read_pairs(path: &Path) -> Result<Vec<PairRecord>> {
    let file = File::open(path)
        .map_err(|e| Error::Data(format!("cannot open pairs {}: {e}", path.display())))?;
    read_pairs_from(&mut BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_corpus, ImageConfig};

    fn with_sim(s: f32) -> PairRecord {
        PairRecord {
            similarity: Some(s),
            ..PairRecord::new(0, 1, 0)
        }
    }

    #[test]
    fn threshold_example() {
        let pairs: Vec<_> = [0.5, 0.8, 0.95].into_iter().map(with_sim).collect();
        let kept = filter_by_similarity(&pairs, 0.65, 0.9);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].similarity, Some(0.8));
        assert_eq!(filter_by_similarity(&pairs, -1.0, 1.0).len(), 3);
        // inclusive bounds
        assert_eq!(filter_by_similarity(&[with_sim(0.5)], 0.5, 0.9).len(), 1);
    }

    #[test]
    fn pair_mode_on_two_members_is_uniform() {
        let shard = generate_corpus(1, 2, ImageConfig::default(), 3).unwrap();
        let first = shard.episodes[0].members[0];
        let mut rng = stream(11, Purpose::Pairing, 0);
        let trials = 10_000;
        let mut hits = 0;
        for _ in 0..trials {
            let p = sample_pair(&shard, 0, PairMode::Pair, &mut rng).unwrap();
            assert_ne!(p.cond_image_id, p.target_image_id);
            hits += (p.cond_image_id == first) as usize;
        }
        let rate = hits as f64 / trials as f64;
        assert!((rate - 0.5).abs() < 0.02, "rate {rate}");
    }

    #[test]
    fn modes_respect_their_contracts() {
        let shard = generate_corpus(12, 3, ImageConfig::default(), 4).unwrap();
        let mut rng = stream(1, Purpose::Pairing, 0);
        for e in 0..shard.episodes.len() {
            let r = sample_pair(&shard, e, PairMode::Reconstruction, &mut rng).unwrap();
            assert_eq!(r.cond_image_id, r.target_image_id);
            let l = sample_pair(&shard, e, PairMode::LabelGrouped, &mut rng).unwrap();
            assert_ne!(l.cond_image_id, l.target_image_id);
            assert_eq!(
                shard.factors(l.cond_image_id).unwrap().class,
                shard.factors(l.target_image_id).unwrap().class
            );
        }
        let single = generate_corpus(1, 1, ImageConfig::default(), 4).unwrap();
        assert!(sample_pair(&single, 0, PairMode::Pair, &mut rng).is_err());
        assert!(candidate_pairs(&single, PairMode::Pair, 0).is_err());
        assert_eq!(
            candidate_pairs(&shard, PairMode::Pair, 0).unwrap().len(),
            12 * 6
        );
        assert_eq!(
            candidate_pairs(&shard, PairMode::Reconstruction, 0)
                .unwrap()
                .len(),
            36
        );
        assert_eq!(
            candidate_pairs(&shard, PairMode::LabelGrouped, 0)
                .unwrap()
                .len(),
            72
        );
    }

    #[test]
    fn pair_file_round_trip() {
        let pairs = vec![with_sim(0.25), PairRecord::new(3, 4, 1)];
        let mut buf = Vec::new();
        write_pairs_to(&pairs, &mut buf).unwrap();
        assert_eq!(read_pairs_from(&mut buf.as_slice()).unwrap(), pairs);
        buf.truncate(buf.len() - 1);
        assert!(read_pairs_from(&mut buf.as_slice()).is_err());
    }

    #[test]
    fn mode_names() {
        for m in [
            PairMode::Pair,
            PairMode::Reconstruction,
            PairMode::LabelGrouped,
        ] {
            assert_eq!(m.to_string().parse::<PairMode>().unwrap(), m);
        }
    }
}
