//! Python bindings for the `varidiff` crate.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use varidiff_core::config::KeyValues;
use varidiff_core::data::{self, ImageConfig, PairMode, PairRecord};
use varidiff_core::diffusion::{self, SamplerConfig};
use varidiff_core::experiments::{self, ExperimentManifest, TrainInputs};
use varidiff_core::generate::ModelSampler;
use varidiff_core::metrics::{self, ConditionalSampler, FeatureSet, FewShotConfig};
use varidiff_core::model::Checkpoint;
use varidiff_core::{Error, Tensor};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::InvalidArgument(_) | Error::Config(_) => PyValueError::new_err(e.to_string()),
        Error::Io(_) | Error::Format(_) | Error::MissingRecord(_) => {
            PyIOError::new_err(e.to_string())
        }
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn features(rows: Vec<Vec<f64>>) -> PyResult<FeatureSet> {
    FeatureSet::from_rows(&rows, "python").map_err(py_err)
}

fn image_out(t: &Tensor<f32>) -> (Vec<f32>, Vec<usize>) {
    (t.data().to_vec(), t.shape().to_vec())
}

/// A shard of rendered episodes.
#[pyclass(module = "varidiff")]
struct Shard {
    inner: data::Shard,
}

#[pymethods]
impl Shard {
    #[staticmethod]
    #[pyo3(signature = (episodes, members=4, seed=0, height=16, width=16))]
    fn generate(
        episodes: usize,
        members: usize,
        seed: u64,
        height: u32,
        width: u32,
    ) -> PyResult<Self> {
        let image = ImageConfig {
            height,
            width,
            ..ImageConfig::default()
        };
        let inner = data::generate_corpus(episodes, members, image, seed).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: data::Shard::read(&path).map_err(py_err)?,
        })
    }

    fn write(&self, path: PathBuf) -> PyResult<()> {
        self.inner.write(&path).map_err(py_err)
    }

    #[getter]
    fn num_images(&self) -> usize {
        self.inner.num_images()
    }

    #[getter]
    fn num_episodes(&self) -> usize {
        self.inner.episodes.len()
    }

    fn image_ids(&self) -> Vec<u64> {
        self.inner.image_ids().collect()
    }

    /// `(pixels, shape)` with pixels flat in `[H, W, C]` order, range `[-1, 1]`.
    fn image(&self, id: u64) -> PyResult<(Vec<f32>, Vec<usize>)> {
        Ok(image_out(&self.inner.image(id).map_err(py_err)?))
    }
}

/// Shifted cosine noise schedule.
#[pyclass(module = "varidiff")]
struct Schedule {
    inner: diffusion::ScheduleConfig,
}

#[pymethods]
impl Schedule {
    #[new]
    #[pyo3(signature = (resolution=16))]
    fn new(resolution: u32) -> Self {
        Self {
            inner: diffusion::ScheduleConfig::for_resolution(resolution),
        }
    }

    #[getter]
    fn shift(&self) -> f64 {
        self.inner.shift()
    }

    /// `(alpha, sigma, log_snr)` at time `t`.
    fn at(&self, t: f64) -> PyResult<(f64, f64, f64)> {
        let p = self.inner.at(t).map_err(py_err)?;
        Ok((p.alpha, p.sigma, p.log_snr))
    }

    /// Standard deviation of one sampler step from `t` down to `s`.
    fn step_stddev(&self, t: f64, s: f64, eta: f64) -> PyResult<f64> {
        let (pt, ps) = (
            self.inner.at(t).map_err(py_err)?,
            self.inner.at(s).map_err(py_err)?,
        );
        Ok(diffusion::step_coefficients(&pt, &ps, eta)
            .map_err(py_err)?
            .stddev)
    }
}

/// Experiment configuration parsed from `key=value` lines.
#[pyclass(module = "varidiff")]
#[derive(Clone)]
struct ExperimentConfig {
    inner: experiments::ExperimentConfig,
}

#[pymethods]
impl ExperimentConfig {
    #[new]
    #[pyo3(signature = (text=""))]
    fn new(text: &str) -> PyResult<Self> {
        let kv = KeyValues::parse(text).map_err(py_err)?;
        let inner = experiments::ExperimentConfig::from_kv(&kv).map_err(py_err)?;
        Ok(Self { inner })
    }

    fn to_text(&self) -> String {
        self.inner.to_kv().to_text()
    }
}

/// Conditional image generator backed by a checkpoint's EMA weights.
#[pyclass(module = "varidiff", unsendable)]
struct Sampler {
    inner: ModelSampler,
}

#[pymethods]
impl Sampler {
    #[new]
    #[pyo3(signature = (checkpoint, steps=50, eta=0.2))]
    fn new(checkpoint: PathBuf, steps: usize, eta: f64) -> PyResult<Self> {
        let cfg = SamplerConfig {
            num_steps: steps,
            eta,
            ..SamplerConfig::default()
        };
        cfg.validate().map_err(py_err)?;
        let ck = Checkpoint::read(&checkpoint).map_err(py_err)?;
        Ok(Self {
            inner: ModelSampler::from_checkpoint(&ck, true, cfg).map_err(py_err)?,
        })
    }

    /// `n` variations of one shard image, each as `(pixels, shape)`.
    #[pyo3(signature = (shard, image_id, n=4, guidance=0.5, seed=0))]
    fn sample(
        &mut self,
        shard: &Shard,
        image_id: u64,
        n: usize,
        guidance: f64,
        seed: u64,
    ) -> PyResult<Vec<(Vec<f32>, Vec<usize>)>> {
        let cond = shard.inner.record(image_id).map_err(py_err)?;
        let images = self
            .inner
            .generate(&cond, n, guidance, seed)
            .map_err(py_err)?;
        Ok(images.iter().map(image_out).collect())
    }
}

fn parse_mode(mode: &str) -> PyResult<PairMode> {
    match mode {
        "recon" => Ok(PairMode::Reconstruction),
        m => m.parse().map_err(py_err),
    }
}

/// Trains one model into `out`; returns a dict with the step count, final
/// loss and checkpoint path.
#[pyfunction]
#[pyo3(signature = (mode, config, out, shard=None))]
fn train<'py>(
    py: Python<'py>,
    mode: &str,
    config: &ExperimentConfig,
    out: PathBuf,
    shard: Option<&Shard>,
) -> PyResult<Bound<'py, PyDict>> {
    let mode = parse_mode(mode)?;
    let cfg = &config.inner;
    let train_shard = match shard {
        Some(s) => s.inner.clone(),
        None => cfg.datasets().map_err(py_err)?.0,
    };
    let mut kv = cfg.to_kv();
    kv.set("train.objective", mode);
    let manifest = ExperimentManifest::new("train", kv, cfg.train.seed);
    let outcome = experiments::train_run(
        cfg,
        mode,
        train_shard,
        TrainInputs::default(),
        &out,
        manifest,
    )
    .map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("steps", outcome.trainer.step())?;
    d.set_item(
        "final_loss",
        outcome.losses.last().map_or(f64::NAN, |l| l.1),
    )?;
    d.set_item("checkpoint", outcome.checkpoint)?;
    Ok(d)
}

/// Few-shot evaluation of a checkpoint against a test shard.
#[pyfunction]
#[allow(clippy::too_many_arguments)]
#[pyo3(signature = (checkpoint, testset, config, n=100, k=10, guidance=0.5, seed=0))]
fn evaluate<'py>(
    py: Python<'py>,
    checkpoint: PathBuf,
    testset: &Shard,
    config: &ExperimentConfig,
    n: usize,
    k: usize,
    guidance: f64,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let eval = FewShotConfig {
        n,
        k,
        guidance,
        seed,
        ..config.inner.eval
    };
    eval.validate().map_err(py_err)?;
    let ck = Checkpoint::read(&checkpoint).map_err(py_err)?;
    let test = testset.inner.records().map_err(py_err)?;
    let r = experiments::evaluate_checkpoint(&ck, &config.inner, &eval, &test).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("fid", r.fid)?;
    d.set_item("precision", r.precision)?;
    d.set_item("recall", r.recall)?;
    d.set_item("diversity", r.diversity)?;
    d.set_item("proxy_distance", r.proxy_distance)?;
    Ok(d)
}

/// Fréchet distance between two feature sets given as lists of rows.
#[pyfunction]
fn frechet_distance(a: Vec<Vec<f64>>, b: Vec<Vec<f64>>) -> PyResult<f64> {
    metrics::frechet_distance(&features(a)?, &features(b)?).map_err(py_err)
}

/// k-NN manifold `(precision, recall)` of `gen` against `real`.
#[pyfunction]
#[pyo3(signature = (real, gen, k=3))]
fn knn_precision_recall(real: Vec<Vec<f64>>, gen: Vec<Vec<f64>>, k: usize) -> PyResult<(f64, f64)> {
    metrics::knn_precision_recall(&features(real)?, &features(gen)?, k).map_err(py_err)
}

/// Indices of the similarities inside the inclusive band `[low, high]`.
#[pyfunction]
fn filter_band(similarities: Vec<f32>, low: f64, high: f64) -> Vec<usize> {
    let pairs: Vec<PairRecord> = similarities
        .iter()
        .enumerate()
        .map(|(i, &s)| PairRecord {
            cond_image_id: i as u64,
            target_image_id: i as u64,
            similarity: Some(s),
            episode_id: 0,
        })
        .collect();
    data::filter_by_similarity(&pairs, low, high)
        .iter()
        .map(|p| p.cond_image_id as usize)
        .collect()
}

#[pymodule]
#[pyo3(name = "varidiff")]
fn varidiff_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Shard>()?;
    m.add_class::<Schedule>()?;
    m.add_class::<ExperimentConfig>()?;
    m.add_class::<Sampler>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(frechet_distance, m)?)?;
    m.add_function(wrap_pyfunction!(knn_precision_recall, m)?)?;
    m.add_function(wrap_pyfunction!(filter_band, m)?)?;
    Ok(())
}
