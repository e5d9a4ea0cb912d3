use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use coffee_core::coffee::{trace_csv, Method};
use coffee_core::datagen::{build_clean_set, build_finetune_set, build_pretrain_corpus, save_dataset, write_pgm, AttributeSpec};
use coffee_core::diffusion::{sample_images, NoiseSchedule, SamplerConfig};
use coffee_core::harness::acceptance::run_acceptance;
use coffee_core::harness::checkpoint::{load_checkpoint, save_checkpoint, save_feature_extractor};
use coffee_core::harness::config::{fingerprint, ConceptPair, ExperimentConfig};
use coffee_core::harness::pipeline::{
    finetune_run, pretrain_model, run_experiment, run_lambda_sweep, run_protocol_comparison, train_eval_head,
    Artifacts, RunSpec,
};
use coffee_core::harness::report::{
    dominance_csv, protocol_csv, reports_csv, summarize, summary_csv, sweep_csv,
};
use coffee_core::rng::derive_seed;

const EXIT_USAGE: u8 = 1;
const EXIT_CHECK_FAILED: u8 = 2;

#[derive(Parser)]
#[command(name = "coffee-lab", version, about = "Toy text-to-image fine-tuning experiments")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (JSON); defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the seed list with a single seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Work directory for checkpoints and outputs.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for independent runs.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the pretraining corpus, fine-tuning sets and clean sets.
    Datagen,
    /// Pretrain the denoiser and text encoder.
    Pretrain,
    /// Train the frozen evaluation feature extractor.
    TrainEvalHead,
    /// Fine-tune one concept pair with one method.
    Finetune {
        #[arg(long)]
        method: Method,
        #[arg(long)]
        concept: String,
        #[arg(long)]
        attribute: String,
        #[arg(long)]
        lambda: Option<f32>,
    },
    /// Sample a grid of images from a checkpoint.
    Sample {
        #[arg(long)]
        prompt: String,
        /// Defaults to the pretrained checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 16)]
        n: usize,
        #[arg(long)]
        negative: Option<String>,
        #[arg(long)]
        guidance: Option<f32>,
    },
    /// Run every (pair, method, seed) and write reports.
    Eval,
    /// Sweep the regularization weight.
    Sweep {
        /// Comma-separated, ascending; defaults to the config's sweep.
        #[arg(long, value_delimiter = ',')]
        lambdas: Option<Vec<f32>>,
    },
    /// Compare trainable parameter groups.
    Protocols,
    /// Run the acceptance suite and write every table.
    Report {
        /// Exit with status 2 when any criterion fails.
        #[arg(long)]
        check: bool,
    },
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading config {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(out) = &common.out {
        cfg.paths.work_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn artifacts(cfg: &ExperimentConfig, common: &Common) -> Result<Artifacts> {
    Ok(Artifacts::load(cfg, common.config.as_deref())?)
}

fn run(cli: Cli) -> Result<ExitCode> {
    if let Some(n) = cli.common.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let cfg = load_config(&cli.common)?;
    let dir = cfg.paths.work_dir.clone();
    match cli.command {
        Command::Datagen => {
            let seed = cli.common.seed.unwrap_or(cfg.pretrain.seed);
            let data = dir.join("data");
            let corpus = build_pretrain_corpus(cfg.pretrain.corpus_size, derive_seed(seed, "pretrain-corpus"))?;
            save_dataset(&data, "pretrain", &corpus)?;
            for pair in &cfg.concept_pairs {
                let attr = AttributeSpec::by_name(&pair.attribute)?;
                let set = build_finetune_set(&pair.concept, &attr, cfg.finetune.n_images, derive_seed(seed, &pair.label()))?;
                save_dataset(&data, &format!("finetune-{}", pair.label().replace('/', "-")), &set)?;
                let px: Vec<&[f32]> = set.iter().map(|im| im.pixels.as_slice()).collect();
                write_pgm(&data.join(format!("finetune-{}.pgm", pair.label().replace('/', "-"))), &px, 5)?;
                let clean = build_clean_set(&pair.concept, cfg.eval.clean_refset_size, derive_seed(seed, "clean"))?;
                save_dataset(&data, &format!("clean-{}", pair.concept), &clean)?;
            }
            println!("wrote datasets to {}", data.display());
        }
        Command::Pretrain => {
            let mut cfg = cfg;
            if let Some(seed) = cli.common.seed {
                cfg.pretrain.seed = seed;
            }
            let state = pretrain_model(&cfg)?;
            save_checkpoint(&cfg.paths.checkpoint(), &state)?;
            println!("wrote {} (fingerprint {})", cfg.paths.checkpoint().display(), state.fingerprint);
        }
        Command::TrainEvalHead => {
            let mut cfg = cfg;
            if let Some(seed) = cli.common.seed {
                cfg.eval.feature_seed = seed;
            }
            let (fx, quality) = train_eval_head(&cfg)?;
            let path = cfg.paths.feature_extractor();
            save_feature_extractor(&path, &fx, &fingerprint(&cfg.eval), cfg.eval.feature_seed)?;
            println!("wrote {} ({})", path.display(), serde_json::to_string(&quality)?);
        }
        Command::Finetune {
            method,
            concept,
            attribute,
            lambda,
        } => {
            let art = artifacts(&cfg, &cli.common)?;
            let pair = ConceptPair::new(&concept, &attribute);
            let spec = RunSpec {
                lambda: lambda.unwrap_or(cfg.lambda),
                ..RunSpec::new(&pair, method, cfg.seeds[0], &cfg)
            };
            let out = finetune_run(&art, &cfg, &spec)?;
            let stem = format!("finetuned-{concept}-{attribute}-{method}-s{}", spec.seed);
            save_checkpoint(&dir.join(format!("{stem}.ckpt")), &out.state)?;
            println!("wrote {}", dir.join(format!("{stem}.ckpt")).display());
            write(&dir.join(format!("{stem}-trace.csv")), trace_csv(&out.trace))?;
        }
        Command::Sample {
            prompt,
            checkpoint,
            n,
            negative,
            guidance,
        } => {
            let path = checkpoint.unwrap_or_else(|| cfg.paths.checkpoint());
            let state = load_checkpoint(&path, None).with_context(|| format!("loading {}", path.display()))?;
            let sampler = SamplerConfig {
                guidance_scale: guidance.unwrap_or(cfg.sampler.guidance_scale),
                negative_prompt: negative,
                seed: cfg.seeds[0],
                clip_denoised: cfg.sampler.clip_denoised,
            };
            let schedule = NoiseSchedule::from_params(&state.schedule)?;
            let images = sample_images(&state.net, &state.table, &prompt, &schedule, &sampler, n)?;
            let px: Vec<&[f32]> = images.iter().map(Vec::as_slice).collect();
            let out = dir.join(format!("samples-{}.pgm", prompt.replace(' ', "_")));
            fs::create_dir_all(&dir)?;
            write_pgm(&out, &px, 8)?;
            println!("wrote {}", out.display());
        }
        Command::Eval => {
            let art = artifacts(&cfg, &cli.common)?;
            let outcomes = run_experiment(&cfg, &art)?;
            let reports: Vec<_> = outcomes.iter().map(|o| o.report.clone()).collect();
            write(&dir.join("reports.json"), serde_json::to_vec_pretty(&reports)?)?;
            write(&dir.join("reports.csv"), reports_csv(&reports))?;
            write(&dir.join("summary.csv"), summary_csv(&summarize(&reports)))?;
            for o in &outcomes {
                let name = format!(
                    "traces/{}-{}-{}-s{}.csv",
                    o.spec.pair.concept, o.spec.pair.attribute, o.spec.method, o.spec.seed
                );
                fs::create_dir_all(dir.join("traces"))?;
                fs::write(dir.join(name), trace_csv(&o.trace))?;
            }
        }
        Command::Sweep { lambdas } => {
            let Some(lambdas) = lambdas.or_else(|| cfg.lambda_sweep.clone()) else {
                bail!("no lambdas given and the config has no lambda_sweep");
            };
            let art = artifacts(&cfg, &cli.common)?;
            let table = run_lambda_sweep(&cfg, &art, &lambdas)?;
            write(&dir.join("sweep.json"), serde_json::to_vec_pretty(&table)?)?;
            write(&dir.join("sweep.csv"), sweep_csv(&table))?;
        }
        Command::Protocols => {
            let art = artifacts(&cfg, &cli.common)?;
            let rows = run_protocol_comparison(&cfg, &art)?;
            write(&dir.join("protocols.json"), serde_json::to_vec_pretty(&rows)?)?;
            write(&dir.join("protocols.csv"), protocol_csv(&rows))?;
        }
        Command::Report { check } => {
            let art = Artifacts::load_or_build(&cfg)?;
            let report = run_acceptance(&cfg, &art, |c| println!("{}", c.line()))?;
            write(&dir.join("acceptance.json"), serde_json::to_vec_pretty(&report)?)?;
            write(&dir.join("summary.csv"), summary_csv(&report.summaries))?;
            write(&dir.join("sweep.csv"), sweep_csv(&report.sweep))?;
            write(&dir.join("protocols.csv"), protocol_csv(&report.protocols))?;
            write(&dir.join("dominance.csv"), dominance_csv(&report.dominance))?;
            if check && !report.all_passed() {
                eprintln!("acceptance check failed");
                return Ok(ExitCode::from(EXIT_CHECK_FAILED));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_USAGE)
        }
    }
}
