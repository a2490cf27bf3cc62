use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use gila_core::data::{export_jsonl, Corpus, Split};
use gila_core::harness::checkpoint;
use gila_core::harness::diagnostics::{dump_attention, dump_similarity, matrix_csv};
use gila_core::harness::gradsuite::{run_gradient_suite, SUITE_SEEDS};
use gila_core::harness::{evaluate, train, GilaModel, NoiseEval, Precision, RunConfig};
use gila_core::{GilaError, Real, Result};

#[derive(Parser)]
#[command(name = "gila", version, about = "Audio-visual speech recognition at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoints and a metrics CSV.
    Train {
        /// Run config (JSON); missing fields take their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Ablation preset overriding the config: baseline, gi or gila.
        #[arg(long)]
        preset: Option<String>,
    },
    /// Word error rate of a checkpoint, clean or over the noise grid.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value = "clean")]
        noise: String,
        /// Load even if the config hash does not match.
        #[arg(long)]
        force: bool,
    },
    /// Utterance-level similarity matrices (A-V, A-A, V-V).
    DumpSim {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        n: usize,
        /// Prefix for `<out>_av.csv`, `<out>_aa.csv` and `<out>_vv.csv`.
        #[arg(long)]
        out: String,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        force: bool,
    },
    /// Frame-level attention map between `X_A^j` and `X_V^k`.
    DumpAttn {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        utt: usize,
        /// Layer pair `j,k`.
        #[arg(long, default_value = "3,3")]
        pair: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        force: bool,
    },
    /// Export the synthetic corpus as JSON lines.
    GenCorpus {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every op and block.
    GradCheck {
        /// Number of seeds per case.
        #[arg(long, default_value_t = SUITE_SEEDS.len())]
        seeds: usize,
    },
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    let cfg = match path {
        Some(p) => RunConfig::from_json(&fs::read_to_string(p)?)?,
        None => RunConfig::default(),
    };
    cfg.with_env_seed()
}

fn parse_pair(s: &str) -> Result<(usize, usize)> {
    let bad = || GilaError::config(format!("pair must look like 0,3; got {s:?}"));
    let (j, k) = s.split_once(',').ok_or_else(bad)?;
    Ok((
        j.trim().parse().map_err(|_| bad())?,
        k.trim().parse().map_err(|_| bad())?,
    ))
}

fn checkpoint_precision(path: &Path) -> Result<Precision> {
    let (manifest, _) = checkpoint::checkpoint_paths(path);
    let m: checkpoint::Manifest = serde_json::from_str(&fs::read_to_string(manifest)?)
        .map_err(|e| GilaError::Checkpoint(format!("bad manifest: {e}")))?;
    Ok(m.config.precision)
}

fn with_model<T>(
    ckpt: &Path,
    force: bool,
    f32_fn: impl FnOnce(&mut GilaModel<f32>) -> Result<T>,
    f64_fn: impl FnOnce(&mut GilaModel<f64>) -> Result<T>,
) -> Result<T> {
    match checkpoint_precision(ckpt)? {
        Precision::F32 => f32_fn(&mut checkpoint::load_model(ckpt, None, force)?),
        Precision::F64 => f64_fn(&mut checkpoint::load_model(ckpt, None, force)?),
    }
}

fn run_train<R: Real>(cfg: RunConfig, out: &Path) -> Result<()> {
    let outcome = train::<R>(cfg, Some(out))?;
    let last = outcome.metrics.last().map(|r| r.loss.total);
    println!(
        "{}",
        serde_json::json!({
            "out": out.display().to_string(),
            "steps": outcome.model.step,
            "final_loss": last,
            "best_step": outcome.best_step,
            "best_val_loss": outcome.best_val_loss,
        })
    );
    Ok(())
}

fn run_eval<R: Real>(model: &mut GilaModel<R>, split: Split, noise: NoiseEval) -> Result<()> {
    let corpus = Corpus::generate(&model.cfg.corpus)?;
    let report = evaluate(model, &corpus, split, noise)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn run_dump_sim<R: Real>(model: &mut GilaModel<R>, split: Split, n: usize, out: &str) -> Result<()> {
    let corpus = Corpus::generate(&model.cfg.corpus)?;
    let samples = corpus.split(split);
    if n > samples.len() {
        return Err(GilaError::config(format!(
            "asked for {n} utterances, split has {}",
            samples.len()
        )));
    }
    let dump = dump_similarity(model, &samples[..n])?;
    for (suffix, m) in [("av", &dump.av), ("aa", &dump.aa), ("vv", &dump.vv)] {
        fs::write(format!("{out}_{suffix}.csv"), matrix_csv(m, Some(&dump.ids)))?;
    }
    Ok(())
}

fn run_dump_attn<R: Real>(
    model: &mut GilaModel<R>,
    split: Split,
    utt: usize,
    pair: (usize, usize),
    out: &Path,
) -> Result<()> {
    let corpus = Corpus::generate(&model.cfg.corpus)?;
    let sample = corpus
        .split(split)
        .get(utt)
        .ok_or_else(|| GilaError::config(format!("utterance {utt} not in split")))?;
    let m = dump_attention(model, sample, pair.0, pair.1)?;
    fs::write(out, matrix_csv(&m, None))?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, out, preset } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(p) = preset {
                cfg.ablation = gila_core::harness::Ablation::preset(&p)?;
            }
            match cfg.precision {
                Precision::F32 => run_train::<f32>(cfg, &out),
                Precision::F64 => run_train::<f64>(cfg, &out),
            }
        }
        Command::Eval {
            ckpt,
            split,
            noise,
            force,
        } => {
            let (split, noise) = (Split::parse(&split)?, NoiseEval::parse(&noise)?);
            with_model(
                &ckpt,
                force,
                |m| run_eval(m, split, noise),
                |m| run_eval(m, split, noise),
            )
        }
        Command::DumpSim {
            ckpt,
            n,
            out,
            split,
            force,
        } => {
            let split = Split::parse(&split)?;
            with_model(
                &ckpt,
                force,
                |m| run_dump_sim(m, split, n, &out),
                |m| run_dump_sim(m, split, n, &out),
            )
        }
        Command::DumpAttn {
            ckpt,
            utt,
            pair,
            out,
            split,
            force,
        } => {
            let (split, pair) = (Split::parse(&split)?, parse_pair(&pair)?);
            with_model(
                &ckpt,
                force,
                |m| run_dump_attn(m, split, utt, pair, &out),
                |m| run_dump_attn(m, split, utt, pair, &out),
            )
        }
        Command::GenCorpus { config, out } => {
            let cfg = load_config(config.as_deref())?;
            let corpus = Corpus::generate(&cfg.corpus)?;
            export_jsonl(&corpus, BufWriter::new(fs::File::create(&out)?))
        }
        Command::GradCheck { seeds } => {
            let seeds: Vec<u64> = (1..=seeds as u64).collect();
            let cases = run_gradient_suite(&seeds)?;
            let mut failed = 0;
            for c in &cases {
                let status = if c.passed() { "ok" } else { "FAIL" };
                println!(
                    "{status:4} {:32} max rel err {:.3e} (tol {:.0e}, {} elements) {}",
                    c.name, c.max_rel_error, c.tolerance, c.checked, c.worst
                );
                failed += usize::from(!c.passed());
            }
            if failed > 0 {
                return Err(GilaError::numeric(format!("{failed} gradient checks failed")));
            }
            Ok(())
        }
    }
}

fn exit_code(e: &GilaError) -> u8 {
    match e {
        GilaError::Config(_) | GilaError::Json(_) => 2,
        GilaError::Numeric(_) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
