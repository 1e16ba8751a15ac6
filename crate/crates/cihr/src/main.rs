//! Command-line entry points: synthetic data generation, perspective
//! analysis, training, evaluation, gradient checking, and ablations.

use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};

use cihr::commonality::{AnalysisCache, Analyzer, BackendKind};
use cihr::config::TrainConfig;
use cihr::data::{generate_synthetic, make_split, Dataset, SynthConfig};
use cihr::model::Ablation;
use cihr::tokenizer::Vocab;
use cihr::train::{
    evaluate, full_model_gradcheck, load_model, prepare_inputs, run_training, save_model,
};

#[derive(Parser)]
#[command(name = "cihr", about = "Profile-conditioned humor recognition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendArg {
    Stub,
    Replay,
    Live,
}

impl From<BackendArg> for BackendKind {
    fn from(b: BackendArg) -> BackendKind {
        match b {
            BackendArg::Stub => BackendKind::Stub,
            BackendArg::Replay => BackendKind::Replay,
            BackendArg::Live => BackendKind::Live,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Valid,
    Test,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (samples.jsonl + users.jsonl).
    GenData {
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        n_users: usize,
        #[arg(long, default_value_t = 2000)]
        n_samples: usize,
        /// Share of samples whose label depends on the user-style bit.
        #[arg(long, default_value_t = 0.0)]
        rho: f64,
        #[arg(long, default_value_t = 4)]
        posts_per_user: usize,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Populate the analysis cache for every sample text.
    Analyze {
        #[arg(long)]
        samples: PathBuf,
        #[arg(long)]
        users: PathBuf,
        #[arg(long)]
        cache: PathBuf,
        #[arg(long, value_enum, default_value_t = BackendArg::Stub)]
        backend: BackendArg,
    },
    /// Train a model and write a checkpoint + vocabulary + loss curve.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        samples: PathBuf,
        #[arg(long)]
        users: PathBuf,
        /// Analysis cache file (created by `analyze`, or filled by the stub).
        #[arg(long)]
        cache: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        /// Override the ablation from the config file.
        #[arg(long)]
        ablation: Option<String>,
    },
    /// Evaluate a checkpoint on the valid or test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        samples: PathBuf,
        #[arg(long)]
        users: PathBuf,
        #[arg(long)]
        cache: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
    },
    /// Verify tape gradients against central finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Train the full model plus all four ablations and print a table.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        samples: PathBuf,
        #[arg(long)]
        users: PathBuf,
        #[arg(long)]
        cache: Option<PathBuf>,
    },
}

fn open_cache(path: &Option<PathBuf>) -> anyhow::Result<AnalysisCache> {
    Ok(match path {
        Some(p) => AnalysisCache::open(p)?,
        None => AnalysisCache::in_memory(),
    })
}

fn load_config(path: &PathBuf, ablation: &Option<String>) -> anyhow::Result<TrainConfig> {
    let mut cfg = TrainConfig::load(path)?;
    if let Some(a) = ablation {
        cfg.ablation = Ablation::parse(a)
            .with_context(|| format!("unknown ablation {a:?} (none, no-hc, no-si, no-sf, no-df)"))?;
    }
    Ok(cfg)
}

fn train_once(
    ds: &Dataset,
    cfg: &TrainConfig,
    cache: AnalysisCache,
    out_dir: Option<&PathBuf>,
) -> anyhow::Result<(cihr::train::TrainedArtifacts, cihr::train::Metrics)> {
    let mut analyzer = Analyzer::new(cfg.backend, cache)?;
    let art = run_training(ds, cfg, &mut analyzer, |line| println!("{line}"))?;
    let test = evaluate(&art.model, &art.inputs, &art.split.test)?;
    println!(
        "best epoch {} valid {} | test {}",
        art.report.best_epoch, art.report.best_valid, test
    );
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        art.vocab.save(&dir.join("vocab.txt"))?;
        save_model(&dir.join("model.ckpt"), &art.model, cfg, &art.vocab, &art.normalizer)?;
        let curve: String = art
            .report
            .history
            .iter()
            .map(|e| format!("{}\t{:.6}\t{:.2}\n", e.epoch, e.train_loss, e.valid.f1))
            .collect();
        std::fs::write(dir.join("loss_curve.tsv"), curve)?;
        println!("wrote {}", dir.join("model.ckpt").display());
    }
    Ok((art, test))
}

fn main() -> anyhow::Result<()> {
    match Cli::parse().command {
        Command::GenData {
            seed,
            n_users,
            n_samples,
            rho,
            posts_per_user,
            out_dir,
        } => {
            let ds = generate_synthetic(&SynthConfig {
                n_users,
                n_samples,
                rho,
                posts_per_user,
                seed,
            });
            std::fs::create_dir_all(&out_dir)?;
            ds.save(&out_dir.join("samples.jsonl"), &out_dir.join("users.jsonl"))?;
            println!("{}", ds.stats());
        }
        Command::Analyze {
            samples,
            users,
            cache,
            backend,
        } => {
            let ds = Dataset::load(&samples, &users)?;
            let mut analyzer = Analyzer::new(backend.into(), AnalysisCache::open(&cache)?)?;
            for s in &ds.samples {
                analyzer.analyze_all(&s.text)?;
            }
            println!("cache holds {} analyses", analyzer.cache.len());
        }
        Command::Train {
            config,
            samples,
            users,
            cache,
            out_dir,
            ablation,
        } => {
            let cfg = load_config(&config, &ablation)?;
            let ds = Dataset::load(&samples, &users)?;
            train_once(&ds, &cfg, open_cache(&cache)?, Some(&out_dir))?;
        }
        Command::Eval {
            checkpoint,
            vocab,
            samples,
            users,
            cache,
            split,
        } => {
            let vocab = Vocab::load(&vocab)?;
            let (model, cfg, normalizer) = load_model(&checkpoint, &vocab)?;
            let ds = Dataset::load(&samples, &users)?;
            let mut analyzer = Analyzer::new(cfg.backend, open_cache(&cache)?)?;
            let inputs = prepare_inputs(&ds, &vocab, &normalizer, &mut analyzer, &cfg)?;
            let sp = make_split(&ds, cfg.split_mode, cfg.seed);
            let idx = match split {
                SplitArg::Valid => &sp.valid,
                SplitArg::Test => &sp.test,
            };
            println!("{}", evaluate(&model, &inputs, idx)?);
        }
        Command::Gradcheck { seed } => {
            let err = full_model_gradcheck(seed)?;
            println!("max relative error {err:.3e}");
            if err >= 1e-4 {
                bail!("gradient check failed: {err:.3e} >= 1e-4");
            }
        }
        Command::Ablate {
            config,
            samples,
            users,
            cache,
        } => {
            let base = load_config(&config, &None)?;
            let ds = Dataset::load(&samples, &users)?;
            let mut rows = Vec::new();
            for ab in [
                Ablation::None,
                Ablation::NoHc,
                Ablation::NoSi,
                Ablation::NoSf,
                Ablation::NoDf,
            ] {
                let mut cfg = base.clone();
                cfg.ablation = ab;
                println!("== {} ==", ab.name());
                let (_, test) = train_once(&ds, &cfg, open_cache(&cache)?, None)?;
                rows.push((ab.name(), test));
            }
            println!("\nvariant  test metrics");
            for (name, m) in rows {
                println!("{name:<8} {m}");
            }
        }
    }
    Ok(())
}
