use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use varidiff::config::KeyValues;
use varidiff::data::{
    candidate_pairs, filter_pairs, generate_corpus, read_pairs, write_pairs, FilterConfig,
    ImageConfig, ImageRecord, PairMode, Shard,
};
use varidiff::diffusion::SamplerConfig;
use varidiff::encoders::{precompute_embeddings, EmbeddingTable, EncoderKind, EncoderSpec};
use varidiff::experiments::{
    evaluate_checkpoint, exp_collapse, exp_conditioning, exp_guidance, parse_g_list, train_run,
    ExperimentConfig, ExperimentManifest, StudyRow, TrainInputs,
};
use varidiff::generate::{split_images, ModelSampler};
use varidiff::metrics::{read_png, write_mosaic, write_tensor_file, FewShotConfig};
use varidiff::model::Checkpoint;
use varidiff::{Error, Result};

#[derive(Parser)]
#[command(
    name = "varidiff",
    version,
    about = "Desk-scale image-variation diffusion"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// `key=value` experiment config; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` overrides applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut kv = match &self.config {
            Some(p) => KeyValues::read(p)?,
            None => KeyValues::new(),
        };
        for o in &self.overrides {
            kv.apply_override(o)?;
        }
        ExperimentConfig::from_kv(&kv)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic episodic corpus into a shard file.
    GenData {
        #[arg(long)]
        episodes: usize,
        #[arg(long, default_value_t = 4)]
        members: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 16)]
        height: u32,
        #[arg(long, default_value_t = 16)]
        width: u32,
    },
    /// Precompute frozen-encoder embeddings for every image of a shard.
    Embed {
        #[arg(long)]
        shard: PathBuf,
        #[arg(long, default_value = "oracle-factor")]
        encoder: EncoderKind,
        #[arg(long, default_value_t = 0)]
        encoder_seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Keep candidate pairs whose cls similarity lies in [low, high].
    FilterPairs {
        #[arg(long)]
        shard: PathBuf,
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long, allow_negative_numbers = true)]
        low: f64,
        #[arg(long, allow_negative_numbers = true)]
        high: f64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "pair")]
        mode: PairMode,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a denoiser with the given objective.
    Train {
        #[arg(long, value_parser = parse_mode)]
        mode: PairMode,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Training shard; generated from `data.*` when omitted.
        #[arg(long)]
        shard: Option<PathBuf>,
        #[arg(long)]
        embeddings: Option<PathBuf>,
        /// Pre-filtered pair list.
        #[arg(long)]
        pairs: Option<PathBuf>,
    },
    /// Draw samples for one conditioning image.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        /// `SHARD:ID` for a shard image, or a PNG path.
        #[arg(long)]
        cond_image: String,
        #[arg(long, default_value_t = 8)]
        n: usize,
        #[arg(long, default_value_t = 0.5)]
        guidance: f64,
        #[arg(long, default_value_t = 50)]
        steps: usize,
        #[arg(long, default_value_t = 0.2)]
        eta: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Use the raw weights instead of the EMA copy.
        #[arg(long)]
        raw: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Few-shot evaluation of a checkpoint against a test shard.
    EvalFewshot {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        testset: PathBuf,
        #[arg(long = "N", default_value_t = 100)]
        n: usize,
        #[arg(long = "K", default_value_t = 10)]
        k: usize,
        #[arg(long, default_value_t = 0.5)]
        guidance: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Directory for the manifest and report; stdout only when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Reconstruction vs pair objective under matched budgets.
    ExpCollapse {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// FiLM vs cross-attention conditioning under matched budgets.
    ExpConditioning {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Few-shot metrics across guidance values.
    ExpGuidance {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "0,0.5,1.0")]
        g_list: String,
        /// Test shard; generated from `data.*` when omitted.
        #[arg(long)]
        testset: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_mode(s: &str) -> std::result::Result<PairMode, String> {
    match s {
        "recon" => Ok(PairMode::Reconstruction),
        other => other.parse().map_err(|e: Error| e.to_string()),
    }
}

fn sidecar(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.txt");
    out.with_file_name(name)
}

/// Manifest next to a single-file output.
fn write_sidecar(manifest: ExperimentManifest, out: &Path) -> Result<()> {
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let name = out
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    std::fs::write(sidecar(out), manifest.outputs(&[&name]).to_text())?;
    Ok(())
}

fn args_kv(pairs: &[(&str, String)]) -> KeyValues {
    pairs
        .iter()
        .map(|(k, v)| (format!("args.{k}"), v.clone()))
        .collect()
}

fn cond_record(spec: &str, ck: &Checkpoint) -> Result<ImageRecord> {
    if let Some((shard, id)) = spec.rsplit_once(':') {
        if let Ok(id) = id.parse::<u64>() {
            return Shard::read(Path::new(shard))?.record(id);
        }
    }
    let image = ck.model_config()?.image;
    Ok(ImageRecord {
        id: u64::MAX,
        pixels: read_png(Path::new(spec), image.height, image.width)?,
        factors: None,
    })
}

fn print_study(rows: &[StudyRow], first: &str) {
    println!("{first},fid,precision,recall,diversity,proxy_distance");
    for r in rows {
        let m = &r.report;
        println!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6}",
            r.label, m.fid, m.precision, m.recall, m.diversity, m.proxy_distance
        );
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData {
            episodes,
            members,
            out,
            seed,
            height,
            width,
        } => {
            let image = ImageConfig {
                height,
                width,
                channels: 3,
            };
            let kv = args_kv(&[
                ("episodes", episodes.to_string()),
                ("members", members.to_string()),
                ("seed", seed.to_string()),
                ("height", height.to_string()),
                ("width", width.to_string()),
            ]);
            write_sidecar(ExperimentManifest::new("gen-data", kv, seed), &out)?;
            let shard = generate_corpus(episodes, members, image, seed)?;
            shard.write(&out)?;
            println!(
                "shard {}: episodes {} members {} images {}",
                out.display(),
                shard.episodes.len(),
                members,
                shard.num_images()
            );
        }
        Command::Embed {
            shard,
            encoder,
            encoder_seed,
            out,
        } => {
            let image = Shard::read(&shard)?.image;
            let spec = match encoder {
                EncoderKind::FrozenRandomVit => EncoderSpec::frozen_random_vit(image, encoder_seed),
                kind => EncoderSpec {
                    kind,
                    ..EncoderSpec::oracle_factor(image, encoder_seed)
                },
            };
            let kv: KeyValues = spec.to_kv("encoder").into_iter().collect();
            write_sidecar(
                ExperimentManifest::new("embed", kv, encoder_seed).input("shard", &shard),
                &out,
            )?;
            let n = precompute_embeddings(&spec, &shard, &out)?;
            println!(
                "embeddings {}: {n} images, encoder {}",
                out.display(),
                spec.id()
            );
        }
        Command::FilterPairs {
            shard,
            embeddings,
            low,
            high,
            out,
            mode,
            seed,
        } => {
            let kv = args_kv(&[
                ("low", low.to_string()),
                ("high", high.to_string()),
                ("mode", mode.to_string()),
                ("seed", seed.to_string()),
            ]);
            let manifest = ExperimentManifest::new("filter-pairs", kv, seed)
                .input("shard", &shard)
                .input("embeddings", &embeddings);
            let shard = Shard::read(&shard)?;
            let table = EmbeddingTable::read(&embeddings)?;
            let cfg = FilterConfig {
                low,
                high,
                encoder: EncoderSpec::oracle_factor(shard.image, 0),
            };
            cfg.validate()?;
            write_sidecar(manifest, &out)?;
            let all = candidate_pairs(&shard, mode, seed)?;
            let kept = filter_pairs(&all, &cfg, &table)?;
            write_pairs(&kept, &out)?;
            let rate = if all.is_empty() {
                1.0
            } else {
                kept.len() as f64 / all.len() as f64
            };
            println!(
                "kept {} of {} pairs (retention {:.2}%)",
                kept.len(),
                all.len(),
                100.0 * rate
            );
        }
        Command::Train {
            mode,
            cfg,
            out,
            shard,
            embeddings,
            pairs,
        } => {
            let config = cfg.load()?;
            let mut kv = config.to_kv();
            kv.set("train.objective", mode);
            let mut manifest = ExperimentManifest::new("train", kv, config.train.seed);
            for (role, p) in [
                ("shard", &shard),
                ("embeddings", &embeddings),
                ("pairs", &pairs),
            ] {
                if let Some(p) = p {
                    manifest = manifest.input(role, p);
                }
            }
            let train_shard = match &shard {
                Some(p) => Shard::read(p)?,
                None => config.datasets()?.0,
            };
            let inputs = TrainInputs {
                embeddings: embeddings
                    .as_deref()
                    .map(EmbeddingTable::read)
                    .transpose()?,
                pairs: pairs.as_deref().map(read_pairs).transpose()?,
            };
            let outcome = train_run(&config, mode, train_shard, inputs, &out, manifest)?;
            let last = outcome.losses.last().map_or(f64::NAN, |l| l.1);
            println!(
                "trained {} steps ({mode}); final loss {last:.6}; checkpoint {}",
                outcome.trainer.step(),
                outcome.checkpoint.display()
            );
        }
        Command::Sample {
            checkpoint,
            cond_image,
            n,
            guidance,
            steps,
            eta,
            seed,
            raw,
            out,
        } => {
            let kv = args_kv(&[
                ("cond_image", cond_image.clone()),
                ("n", n.to_string()),
                ("guidance", guidance.to_string()),
                ("steps", steps.to_string()),
                ("eta", eta.to_string()),
                ("raw", raw.to_string()),
            ]);
            let sampler_cfg = SamplerConfig {
                num_steps: steps,
                eta,
                guidance,
                ..SamplerConfig::default()
            };
            sampler_cfg.validate()?;
            let ck = Checkpoint::read(&checkpoint)?;
            let cond = cond_record(&cond_image, &ck)?;
            ExperimentManifest::new("sample", kv, seed)
                .input("checkpoint", &checkpoint)
                .outputs(&["grid.png", "samples.tnsr"])
                .write(&out)?;
            let sampler = ModelSampler::from_checkpoint(&ck, !raw, sampler_cfg)?;
            let ctx = sampler.encoder.encode(&cond)?;
            let batch = sampler.sample_context(&ctx, n, guidance, seed)?;
            write_tensor_file(&batch, &out.join("samples.tnsr"))?;
            let mut row = vec![cond.pixels.clone()];
            row.extend(split_images(&batch)?);
            write_mosaic(&[row], 4, &out.join("grid.png"))?;
            println!("wrote {} samples to {}", n, out.display());
        }
        Command::EvalFewshot {
            checkpoint,
            testset,
            n,
            k,
            guidance,
            seed,
            cfg,
            out,
        } => {
            let config = cfg.load()?;
            let eval = FewShotConfig {
                n,
                k,
                guidance,
                seed,
                ..config.eval
            };
            eval.validate()?;
            let mut kv = config.to_kv();
            kv.merge(&args_kv(&[
                ("N", n.to_string()),
                ("K", k.to_string()),
                ("guidance", guidance.to_string()),
            ]));
            if let Some(dir) = &out {
                ExperimentManifest::new("eval-fewshot", kv, seed)
                    .input("checkpoint", &checkpoint)
                    .input("testset", &testset)
                    .outputs(&["report.txt"])
                    .write(dir)?;
            }
            let ck = Checkpoint::read(&checkpoint)?;
            let test = Shard::read(&testset)?.records()?;
            let report = evaluate_checkpoint(&ck, &config, &eval, &test)?;
            print!("{}", report.to_text());
            if let Some(dir) = &out {
                std::fs::write(dir.join("report.txt"), report.to_text())?;
            }
        }
        Command::ExpCollapse { cfg, out } => {
            let rows = exp_collapse(&cfg.load()?, &out)?;
            print_study(&rows, "model");
            let (r, p) = (&rows[0].report, &rows[1].report);
            println!(
                "diversity_pair_gt_reconstruction: {}",
                p.diversity > r.diversity
            );
            println!("recall_pair_gt_reconstruction: {}", p.recall > r.recall);
        }
        Command::ExpConditioning { cfg, out } => {
            let rows = exp_conditioning(&cfg.load()?, &out)?;
            print_study(&rows, "conditioning_mode");
        }
        Command::ExpGuidance {
            checkpoint,
            g_list,
            testset,
            cfg,
            out,
        } => {
            let config = cfg.load()?;
            let g = parse_g_list(&g_list)?;
            let test = match &testset {
                Some(p) => Shard::read(p)?,
                None => config.datasets()?.1,
            }
            .records()?;
            let reports = exp_guidance(&checkpoint, &config, &test, &g, &out)?;
            print!("{}", varidiff::metrics::sweep_csv(&reports));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
