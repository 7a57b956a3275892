use std::fmt::Write as _;

use rand::seq::index::sample as sample_indices;

use super::distance::{
    euclidean, frechet_distance, knn_precision_recall, mean_pairwise_distance, FeatureSet,
};
use crate::data::ImageRecord;
use crate::encoders::Encoder;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, stream, Purpose};
use crate::tensor::Tensor;

/// Produces `n` images conditioned on one image.
pub trait ConditionalSampler {
    /// `seed` fully determines the output for a given condition.
    fn generate(
        &mut self,
        cond: &ImageRecord,
        n: usize,
        guidance: f64,
        seed: u64,
    ) -> Result<Vec<Tensor<f32>>>;
}

/// Per-image `cls` features from a frozen encoder.
pub fn extract_features(extractor: &Encoder, images: &[ImageRecord]) -> Result<FeatureSet> {
    let rows = images
        .iter()
        .map(|im| {
            Ok(extractor
                .encode(im)?
                .cls
                .iter()
                .map(|&v| v as f64)
                .collect())
        })
        .collect::<Result<Vec<Vec<f64>>>>()?;
    FeatureSet::from_rows(&rows, extractor.spec().id())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FewShotConfig {
    /// Total generated (and reference) images.
    pub n: usize,
    /// Conditioning images.
    pub k: usize,
    pub guidance: f64,
    pub seed: u64,
    /// Neighbour rank for manifold radii.
    pub knn_k: usize,
}

impl Default for FewShotConfig {
    fn default() -> Self {
        Self {
            n: 100,
            k: 10,
            guidance: 0.5,
            seed: 0,
            knn_k: 3,
        }
    }
}

impl FewShotConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.n == 0 || !self.n.is_multiple_of(self.k) {
            return Err(Error::InvalidArgument(format!(
                "K = {} must divide N = {}",
                self.k, self.n
            )));
        }
        Ok(())
    }

    pub fn samples_per_condition(&self) -> usize {
        self.n / self.k
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub fid: f64,
    pub precision: f64,
    pub recall: f64,
    /// Mean pairwise feature distance among samples sharing a condition.
    pub diversity: f64,
    /// Mean feature distance between each sample and its condition; a
    /// perceptual-similarity proxy (zero for a copying model).
    pub proxy_distance: f64,
    pub config: FewShotConfig,
    pub extractor_id: String,
    /// Ids of the conditioning images, in selection order.
    pub conditions: Vec<u64>,
}

impl MetricReport {
    pub const CSV_HEADER: &'static str = "g,fid,precision,recall,diversity";

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let c = &self.config;
        let _ = writeln!(s, "fid: {:.6}", self.fid);
        let _ = writeln!(s, "precision: {:.6}", self.precision);
        let _ = writeln!(s, "recall: {:.6}", self.recall);
        let _ = writeln!(s, "diversity: {:.6}", self.diversity);
        let _ = writeln!(s, "proxy_distance: {:.6}", self.proxy_distance);
        let _ = writeln!(s, "n: {}", c.n);
        let _ = writeln!(s, "k: {}", c.k);
        let _ = writeln!(s, "samples_per_condition: {}", c.samples_per_condition());
        let _ = writeln!(s, "guidance: {}", c.guidance);
        let _ = writeln!(s, "seed: {}", c.seed);
        let _ = writeln!(s, "knn_k: {}", c.knn_k);
        let _ = writeln!(s, "extractor: {}", self.extractor_id);
        s
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.6}",
            self.config.guidance, self.fid, self.precision, self.recall, self.diversity
        )
    }
}

/// Few-shot protocol: pick `K` of the first `N` test images, draw `N/K`
/// samples for each, and compare all `N` samples to the `N` test images.
pub fn fewshot_evaluate(
    cfg: &FewShotConfig,
    test: &[ImageRecord],
    sampler: &mut dyn ConditionalSampler,
    extractor: &Encoder,
) -> Result<MetricReport> {
    cfg.validate()?;
    if test.len() < cfg.n {
        return Err(Error::Data(format!(
            "few-shot needs {} test images, have {}",
            cfg.n,
            test.len()
        )));
    }
    let test = &test[..cfg.n];
    let mut picked =
        sample_indices(&mut stream(cfg.seed, Purpose::Selection, 0), cfg.n, cfg.k).into_vec();
    picked.sort_unstable();
    let per = cfg.samples_per_condition();

    let real = extract_features(extractor, test)?;
    let mut gen_rows = Vec::with_capacity(cfg.n);
    let mut diversity = 0.0;
    let mut proxy = 0.0;
    for (slot, &i) in picked.iter().enumerate() {
        let cond = &test[i];
        let seed = derive_seed(cfg.seed, Purpose::Sampling, slot as u64);
        let images = sampler.generate(cond, per, cfg.guidance, seed)?;
        if images.len() != per {
            return Err(Error::InvalidArgument(format!(
                "sampler returned {} of {per} images",
                images.len()
            )));
        }
        let records: Vec<ImageRecord> = images
            .into_iter()
            .map(|pixels| ImageRecord {
                id: u64::MAX,
                pixels,
                factors: None,
            })
            .collect();
        let feats = extract_features(extractor, &records)?;
        let rows: Vec<Vec<f64>> = (0..per).map(|r| feats.row(r)).collect();
        let cond_row = real.row(i);
        diversity += mean_pairwise_distance(&rows);
        proxy += rows.iter().map(|r| euclidean(r, &cond_row)).sum::<f64>() / per as f64;
        gen_rows.extend(rows);
    }
    let gen = FeatureSet::from_rows(&gen_rows, real.extractor_id.clone())?;
    let fid = frechet_distance(&real, &gen)?;
    let (precision, recall) = knn_precision_recall(&real, &gen, cfg.knn_k)?;
    Ok(MetricReport {
        fid,
        precision,
        recall,
        diversity: diversity / cfg.k as f64,
        proxy_distance: proxy / cfg.k as f64,
        config: *cfg,
        extractor_id: real.extractor_id,
        conditions: picked.iter().map(|&i| test[i].id).collect(),
    })
}

/// One few-shot evaluation per guidance value, same seed throughout.
pub fn guidance_sweep(
    base: &FewShotConfig,
    test: &[ImageRecord],
    sampler: &mut dyn ConditionalSampler,
    extractor: &Encoder,
    g_values: &[f64],
) -> Result<Vec<MetricReport>> {
    g_values
        .iter()
        .map(|&g| {
            let cfg = FewShotConfig {
                guidance: g,
                ..*base
            };
            fewshot_evaluate(&cfg, test, sampler, extractor)
        })
        .collect()
}

pub fn sweep_csv(reports: &[MetricReport]) -> String {
    let mut s = format!("{}\n", MetricReport::CSV_HEADER);
    for r in reports {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

/// Returns the conditioning image unchanged.
pub struct CopyingSampler;

impl ConditionalSampler for CopyingSampler {
    fn generate(
        &mut self,
        cond: &ImageRecord,
        n: usize,
        _guidance: f64,
        _seed: u64,
    ) -> Result<Vec<Tensor<f32>>> {
        Ok(vec![cond.pixels.clone(); n])
    }
}

/// Returns uniformly drawn members of a fixed pool.
pub struct PoolSampler {
    pub pool: Vec<Tensor<f32>>,
}

impl ConditionalSampler for PoolSampler {
    fn generate(
        &mut self,
        _cond: &ImageRecord,
        n: usize,
        _guidance: f64,
        seed: u64,
    ) -> Result<Vec<Tensor<f32>>> {
        use rand::Rng;
        let mut rng = stream(seed, Purpose::Sampling, 0);
        Ok((0..n)
            .map(|_| self.pool[rng.random_range(0..self.pool.len())].clone())
            .collect())
    }
}
