//! Experiment plumbing shared by the CLI and the acceptance suite: one
//! config file for data, encoder, model, training, sampling and evaluation;
//! manifests; and the collapse, conditioning and guidance studies.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::config::KeyValues;
use crate::data::{
    candidate_pairs, filter_pairs, generate_corpus, FilterConfig, ImageRecord, PairBatcher,
    PairMode, PairRecord, Shard,
};
use crate::diffusion::SamplerConfig;
use crate::encoders::{EmbeddingTable, Encoder, EncoderSpec};
use crate::error::{Error, Result};
use crate::generate::{ModelSampler, ENCODER_PREFIX};
use crate::metrics::{
    fewshot_evaluate, guidance_sweep, sweep_csv, write_mosaic, write_pr_scatter, FewShotConfig,
    MetricReport,
};
use crate::model::{Checkpoint, ConditioningMode, DenoiserConfig};
use crate::rng::{derive_seed, Purpose};
use crate::train::{train, TrainConfig, TrainOutcome, Trainer};

pub const MANIFEST_FILE: &str = "manifest.txt";
const EXTRACTOR_PREFIX: &str = "extractor";

/// Corpus sizes for an experiment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DataConfig {
    pub episodes: usize,
    pub members: usize,
    /// Held-out single-image episodes used as the few-shot test set.
    pub test_images: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            episodes: 400,
            members: 4,
            test_images: 100,
            seed: 0,
        }
    }
}

/// Every setting an experiment needs, read from one `key=value` file.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub encoder: EncoderSpec,
    /// Optional `(low, high)` cosine band applied to training pairs.
    pub filter: Option<(f64, f64)>,
    pub model: DenoiserConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub eval: FewShotConfig,
    /// Feature extractor for metrics; independent of the conditioning encoder.
    pub extractor: EncoderSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let model = DenoiserConfig::default();
        Self {
            data: DataConfig::default(),
            encoder: EncoderSpec::oracle_factor(model.image, 0),
            filter: None,
            sampler: SamplerConfig::default(),
            train: TrainConfig::default(),
            eval: FewShotConfig::default(),
            extractor: EncoderSpec::frozen_random_vit(model.image, 7),
            model,
        }
    }
}

const OTHER_KEYS: &[&str] = &[
    "data.episodes",
    "data.members",
    "data.test_images",
    "data.seed",
    "filter.low",
    "filter.high",
    "sampler.steps",
    "sampler.eta",
    "eval.n",
    "eval.k",
    "eval.guidance",
    "eval.seed",
    "eval.knn_k",
];

const SPEC_FIELDS: &[&str] = &[
    "kind",
    "seed",
    "patch_size",
    "depth",
    "width",
    "heads",
    "tokens",
    "dim",
];

impl ExperimentConfig {
    /// Starts from the defaults and applies `kv`. Unknown keys are errors.
    /// The model's context shape always follows the encoder.
    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let spec_keys = |p: &'static str| SPEC_FIELDS.iter().map(move |f| format!("{p}.{f}"));
        let known: Vec<String> = DenoiserConfig::KEYS
            .iter()
            .chain(TrainConfig::KEYS)
            .chain(OTHER_KEYS)
            .map(|s| s.to_string())
            .chain(spec_keys(ENCODER_PREFIX))
            .chain(spec_keys(EXTRACTOR_PREFIX))
            .collect();
        kv.check_known(&known.iter().map(String::as_str).collect::<Vec<_>>())?;

        let mut c = Self::default();
        let mut model = c.model.updated_from(kv)?;
        let image = model.image;
        let with_kind = |prefix: &str, default: EncoderSpec| -> Result<EncoderSpec> {
            let mut kv2 = kv.clone();
            if kv.raw(&format!("{prefix}.kind")).is_none() {
                kv2.set(&format!("{prefix}.kind"), &default.kind);
                kv2.set(
                    &format!("{prefix}.seed"),
                    kv.get::<u64>(&format!("{prefix}.seed"))?
                        .unwrap_or(default.seed),
                );
            }
            EncoderSpec::from_kv(&kv2, prefix, image)
        };
        c.encoder = with_kind(ENCODER_PREFIX, EncoderSpec::oracle_factor(image, 0))?;
        c.extractor = with_kind(EXTRACTOR_PREFIX, EncoderSpec::frozen_random_vit(image, 7))?;
        for (key, want, have) in [
            (
                "model.context_tokens",
                c.encoder.tokens,
                model.context_tokens,
            ),
            ("model.context_dim", c.encoder.dim, model.context_dim),
        ] {
            if kv.raw(key).is_some() && want != have {
                return Err(Error::Config(format!(
                    "{key}={have} but the encoder emits {want}"
                )));
            }
        }
        model.context_tokens = c.encoder.tokens;
        model.context_dim = c.encoder.dim;
        model.validate()?;
        c.model = model;
        c.train = c.train.updated_from(kv)?;
        if kv.raw("train.context_dropout").is_none() {
            c.train.context_dropout = c.model.context_dropout;
        }
        c.model.context_dropout = c.train.context_dropout;

        kv.load("data.episodes", &mut c.data.episodes)?;
        kv.load("data.members", &mut c.data.members)?;
        kv.load("data.test_images", &mut c.data.test_images)?;
        kv.load("data.seed", &mut c.data.seed)?;
        c.filter = match (kv.get::<f64>("filter.low")?, kv.get::<f64>("filter.high")?) {
            (None, None) => None,
            (Some(l), Some(h)) => Some((l, h)),
            _ => {
                return Err(Error::Config(
                    "filter.low and filter.high go together".into(),
                ))
            }
        };
        kv.load("sampler.steps", &mut c.sampler.num_steps)?;
        kv.load("sampler.eta", &mut c.sampler.eta)?;
        kv.load("eval.n", &mut c.eval.n)?;
        kv.load("eval.k", &mut c.eval.k)?;
        kv.load("eval.guidance", &mut c.eval.guidance)?;
        kv.load("eval.seed", &mut c.eval.seed)?;
        kv.load("eval.knn_k", &mut c.eval.knn_k)?;
        c.validate()?;
        Ok(c)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_kv(&KeyValues::read(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.sampler.validate()?;
        self.eval.validate()?;
        self.encoder.validate()?;
        self.extractor.validate()?;
        if self.data.members == 0 {
            return Err(Error::Config("data.members must be positive".into()));
        }
        if let Some((l, h)) = self.filter {
            FilterConfig {
                low: l,
                high: h,
                encoder: self.encoder.clone(),
            }
            .validate()?;
        }
        Ok(())
    }

    /// Fully resolved snapshot; `from_kv(to_kv())` reproduces `self`.
    pub fn to_kv(&self) -> KeyValues {
        let mut kv = self.model.to_kv();
        kv.merge(&self.train.to_kv());
        kv.merge(&self.encoder.to_kv(ENCODER_PREFIX).into_iter().collect());
        kv.merge(&self.extractor.to_kv(EXTRACTOR_PREFIX).into_iter().collect());
        kv.set("data.episodes", self.data.episodes);
        kv.set("data.members", self.data.members);
        kv.set("data.test_images", self.data.test_images);
        kv.set("data.seed", self.data.seed);
        if let Some((l, h)) = self.filter {
            kv.set("filter.low", l);
            kv.set("filter.high", h);
        }
        kv.set("sampler.steps", self.sampler.num_steps);
        kv.set("sampler.eta", self.sampler.eta);
        kv.set("eval.n", self.eval.n);
        kv.set("eval.k", self.eval.k);
        kv.set("eval.guidance", self.eval.guidance);
        kv.set("eval.seed", self.eval.seed);
        kv.set("eval.knn_k", self.eval.knn_k);
        kv
    }

    /// Training corpus and held-out test shard, both pure functions of
    /// `data.seed`.
    pub fn datasets(&self) -> Result<(Shard, Shard)> {
        let image = self.model.image;
        let train = generate_corpus(self.data.episodes, self.data.members, image, self.data.seed)?;
        let test_seed = derive_seed(self.data.seed, Purpose::Selection, 1);
        let test = generate_corpus(self.data.test_images, 1, image, test_seed)?;
        Ok((train, test))
    }
}

/// Build identifier recorded in manifests.
pub fn build_id() -> String {
    format!(
        "varidiff {} git {}",
        env!("CARGO_PKG_VERSION"),
        option_env!("VARIDIFF_GIT_REV").unwrap_or("unknown")
    )
}

/// Written before any other output of a command; enough to re-run it.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentManifest {
    pub name: String,
    pub config: KeyValues,
    pub inputs: Vec<(String, PathBuf)>,
    /// Output file names, relative to the manifest's directory.
    pub outputs: Vec<String>,
    pub seed: u64,
}

impl ExperimentManifest {
    pub fn new(name: &str, config: KeyValues, seed: u64) -> Self {
        Self {
            name: name.into(),
            config,
            inputs: Vec::new(),
            outputs: Vec::new(),
            seed,
        }
    }

    pub fn input(mut self, role: &str, path: &Path) -> Self {
        self.inputs.push((role.into(), path.to_path_buf()));
        self
    }

    pub fn outputs(mut self, names: &[&str]) -> Self {
        self.outputs.extend(names.iter().map(|s| s.to_string()));
        self
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "experiment: {}", self.name);
        let _ = writeln!(s, "build: {}", build_id());
        let _ = writeln!(s, "seed: {}", self.seed);
        for (role, p) in &self.inputs {
            let _ = writeln!(s, "input.{role}: {}", p.display());
        }
        for o in &self.outputs {
            let _ = writeln!(s, "output: {o}");
        }
        let _ = writeln!(s, "[config]");
        s.push_str(&self.config.to_text());
        s
    }

    /// Creates `dir` and writes `manifest.txt` into it.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir)?;
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, self.to_text())?;
        Ok(path)
    }
}

/// Inputs for one training run; anything left `None` is derived from the
/// config.
#[derive(Default)]
pub struct TrainInputs {
    pub embeddings: Option<EmbeddingTable>,
    pub pairs: Option<Vec<PairRecord>>,
}

/// Trains one model on `shard` with objective `mode` into `out`, writing
/// the manifest first.
pub fn train_run(
    cfg: &ExperimentConfig,
    mode: PairMode,
    shard: Shard,
    inputs: TrainInputs,
    out: &Path,
    manifest: ExperimentManifest,
) -> Result<TrainOutcome> {
    manifest
        .outputs(&[
            crate::train::CHECKPOINT_FILE,
            crate::train::LOSS_FILE,
            crate::train::TIMING_FILE,
        ])
        .write(out)?;
    let train_cfg = TrainConfig {
        objective: mode,
        ..cfg.train.clone()
    };
    let embeddings = match inputs.embeddings {
        Some(t) => t,
        None => EmbeddingTable::from_shard(&Encoder::new(&cfg.encoder)?, &shard)?,
    };
    let pairs = match inputs.pairs {
        Some(p) => p,
        None => {
            let all = candidate_pairs(&shard, mode, train_cfg.seed)?;
            match cfg.filter {
                Some((low, high)) => filter_pairs(
                    &all,
                    &FilterConfig {
                        low,
                        high,
                        encoder: cfg.encoder.clone(),
                    },
                    &embeddings,
                )?,
                None => all,
            }
        }
    };
    if pairs.is_empty() {
        return Err(Error::Data("no training pairs".into()));
    }
    let mut source = PairBatcher::new(
        shard,
        embeddings,
        pairs,
        train_cfg.batch_size,
        train_cfg.seed,
    )?;
    let mut trainer = Trainer::new(&cfg.model, &train_cfg)?;
    trainer.meta = cfg.encoder.to_kv(ENCODER_PREFIX).into_iter().collect();
    train(trainer, &mut source, out)
}

/// Few-shot evaluation of a checkpoint's EMA weights.
pub fn evaluate_checkpoint(
    ck: &Checkpoint,
    cfg: &ExperimentConfig,
    eval: &FewShotConfig,
    test: &[ImageRecord],
) -> Result<MetricReport> {
    let mut sampler = ModelSampler::from_checkpoint(ck, true, cfg.sampler)?;
    fewshot_evaluate(eval, test, &mut sampler, &Encoder::new(&cfg.extractor)?)
}

/// Mosaic of the first `rows` test images, each followed by `cols` samples.
pub fn sample_mosaic(
    sampler: &mut ModelSampler,
    test: &[ImageRecord],
    rows: usize,
    cols: usize,
    guidance: f64,
    seed: u64,
    path: &Path,
) -> Result<()> {
    use crate::metrics::ConditionalSampler;
    let mut grid = Vec::new();
    for (i, rec) in test.iter().take(rows).enumerate() {
        let mut row = vec![rec.pixels.clone()];
        row.extend(sampler.generate(
            rec,
            cols,
            guidance,
            derive_seed(seed, Purpose::Sampling, i as u64),
        )?);
        grid.push(row);
    }
    write_mosaic(&grid, 4, path)
}

/// One trained-and-evaluated model of a comparison study.
#[derive(Debug, Clone)]
pub struct StudyRow {
    pub label: String,
    pub report: MetricReport,
    pub checkpoint: PathBuf,
}

const STUDY_HEADER: &str = "fid,precision,recall,diversity,proxy_distance";

fn study_table(first_column: &str, rows: &[StudyRow]) -> String {
    let mut s = format!("{first_column},{STUDY_HEADER}\n");
    for r in rows {
        let m = &r.report;
        let _ = writeln!(
            s,
            "{},{:.6},{:.6},{:.6},{:.6},{:.6}",
            r.label, m.fid, m.precision, m.recall, m.diversity, m.proxy_distance
        );
    }
    s
}

fn run_study(
    name: &str,
    cfg: &ExperimentConfig,
    out: &Path,
    first_column: &str,
    arms: &[(String, ExperimentConfig, PairMode)],
) -> Result<Vec<StudyRow>> {
    let table = format!("{name}.csv");
    let mut outputs: Vec<String> = vec![table.clone()];
    for (label, _, _) in arms {
        outputs.extend([
            format!("{label}/"),
            format!("{label}_report.txt"),
            format!("{label}_samples.png"),
        ]);
    }
    ExperimentManifest::new(name, cfg.to_kv(), cfg.train.seed)
        .outputs(&outputs.iter().map(String::as_str).collect::<Vec<_>>())
        .write(out)?;
    let (train_shard, test_shard) = cfg.datasets()?;
    let test = test_shard.records()?;
    let mut rows = Vec::new();
    for (label, arm, mode) in arms {
        let dir = out.join(label);
        let mut kv = arm.to_kv();
        kv.set("train.objective", mode);
        let manifest = ExperimentManifest::new(&format!("{name}/{label}"), kv, arm.train.seed);
        let outcome = train_run(
            arm,
            *mode,
            train_shard.clone(),
            TrainInputs::default(),
            &dir,
            manifest,
        )?;
        let ck = Checkpoint::read(&outcome.checkpoint)?;
        let report = evaluate_checkpoint(&ck, arm, &arm.eval, &test)?;
        fs::write(out.join(format!("{label}_report.txt")), report.to_text())?;
        let mut sampler = ModelSampler::from_checkpoint(&ck, true, arm.sampler)?;
        sample_mosaic(
            &mut sampler,
            &test,
            4,
            6,
            arm.eval.guidance,
            arm.eval.seed,
            &out.join(format!("{label}_samples.png")),
        )?;
        rows.push(StudyRow {
            label: label.clone(),
            report,
            checkpoint: outcome.checkpoint,
        });
    }
    fs::write(out.join(table), study_table(first_column, &rows))?;
    Ok(rows)
}

/// Reconstruction-trained vs pair-trained model under identical budgets.
/// Rows are `reconstruction` then `pair`.
pub fn exp_collapse(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<StudyRow>> {
    let arms = [
        (
            "reconstruction".to_string(),
            cfg.clone(),
            PairMode::Reconstruction,
        ),
        ("pair".to_string(), cfg.clone(), PairMode::Pair),
    ];
    let rows = run_study("collapse", cfg, out, "model", &arms)?;
    let (r, p) = (&rows[0].report, &rows[1].report);
    let mut s = String::new();
    let _ = writeln!(
        s,
        "diversity_pair_gt_reconstruction: {}",
        p.diversity > r.diversity
    );
    let _ = writeln!(s, "recall_pair_gt_reconstruction: {}", p.recall > r.recall);
    fs::write(out.join("collapse_checks.txt"), s)?;
    Ok(rows)
}

/// FiLM vs cross-attention conditioning under identical budgets and data
/// order. Rows are `film` then `cross-attention`.
pub fn exp_conditioning(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<StudyRow>> {
    let arm = |mode: ConditioningMode| {
        let mut c = cfg.clone();
        c.model.mode = mode;
        (mode.to_string(), c, cfg.train.objective)
    };
    let arms = [
        arm(ConditioningMode::Film),
        arm(ConditioningMode::CrossAttention),
    ];
    run_study("conditioning", cfg, out, "conditioning_mode", &arms)
}

/// Guidance sweep of a checkpoint: `guidance.csv` and `guidance_pr.png`.
pub fn exp_guidance(
    checkpoint: &Path,
    cfg: &ExperimentConfig,
    test: &[ImageRecord],
    g_values: &[f64],
    out: &Path,
) -> Result<Vec<MetricReport>> {
    if g_values.is_empty() {
        return Err(Error::InvalidArgument("empty guidance list".into()));
    }
    ExperimentManifest::new("guidance", cfg.to_kv(), cfg.eval.seed)
        .input("checkpoint", checkpoint)
        .outputs(&["guidance.csv", "guidance_pr.png"])
        .write(out)?;
    let ck = Checkpoint::read(checkpoint)?;
    let mut sampler = ModelSampler::from_checkpoint(&ck, true, cfg.sampler)?;
    let reports = guidance_sweep(
        &cfg.eval,
        test,
        &mut sampler,
        &Encoder::new(&cfg.extractor)?,
        g_values,
    )?;
    fs::write(out.join("guidance.csv"), sweep_csv(&reports))?;
    let points: Vec<(f64, f64)> = reports.iter().map(|r| (r.precision, r.recall)).collect();
    write_pr_scatter(&points, &out.join("guidance_pr.png"))?;
    Ok(reports)
}

/// Parses `"0,0.5,1.0"`.
pub fn parse_g_list(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|p| {
            let g: f64 = p
                .trim()
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("bad guidance value {p:?}")))?;
            if !(g >= 0.0) {
                return Err(Error::InvalidArgument(format!("guidance {g} must be >= 0")));
            }
            Ok(g)
        })
        .collect()
}
