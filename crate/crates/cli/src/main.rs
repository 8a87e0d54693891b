use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fedlora::adapters::base_from_bytes;
use fedlora::corpus::{generate_clients, load_jsonl};
use fedlora::experiment::{run_experiment, ExperimentConfig, Mode};
use fedlora::metrics::{evaluate, EvalOptions};
use fedlora::orchestrator::worker_threads;
use fedlora::{AdapterSet, BaseModel, Error};

#[derive(Parser)]
#[command(name = "fedlora", version, about = "Federated LoRA fine-tuning of a byte-level transformer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate one experiment.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// zero_shot, center, center_client, fed_base or fed_cl.
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score an adapter checkpoint on a JSONL test file.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        test: PathBuf,
        /// Base checkpoint; defaults to base.fjla next to the adapter file.
        #[arg(long)]
        base: Option<PathBuf>,
    },
    /// Write the synthetic client corpora.
    GenCorpus {
        #[arg(long)]
        seed: u64,
        #[arg(long, value_delimiter = ',')]
        sizes: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code(e: &Error) -> u8 {
    if e.is_io() || matches!(e, Error::Decode(_)) {
        4
    } else if e.is_numeric() {
        3
    } else {
        2
    }
}

fn train(config: &Path, mode: Option<String>, seed: Option<u64>, out: Option<PathBuf>) -> fedlora::Result<()> {
    let mut cfg = ExperimentConfig::load(config)?;
    if let Some(m) = mode {
        cfg.mode = Mode::parse(&m)?;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(o) = out {
        cfg.out = o;
    }
    let res = run_experiment(&cfg)?;
    println!("# config_hash={:016x} seed={} mode={}", res.config_hash, cfg.seed, cfg.mode.name());
    println!("model,corpus,PPL");
    for r in &res.reports {
        println!("{},{},{:.2}", r.model, r.corpus, r.perplexity);
    }
    println!("# report written to {}", cfg.out.join("report.csv").display());
    Ok(())
}

fn eval(model: &Path, test: &Path, base: Option<PathBuf>) -> fedlora::Result<()> {
    let adapters = AdapterSet::<f64>::load(model)?;
    let base_path = base.unwrap_or_else(|| model.with_file_name("base.fjla"));
    let bytes = std::fs::read(&base_path).map_err(|e| Error::Io {
        path: base_path.clone(),
        source: e,
    })?;
    let base: BaseModel<f64> = base_from_bytes(&bytes)?;
    let examples = load_jsonl(test)?;
    let r = evaluate(
        &base,
        &adapters,
        &examples,
        &model.display().to_string(),
        &test.display().to_string(),
        &EvalOptions::default(),
    )?;
    println!("model,corpus,R-1,R-2,R-L,B-4,B-N,PPL");
    println!(
        "{},{},{:.2},{:.2},{:.2},{:.2},{:.2},{:.2}",
        r.model,
        r.corpus,
        100.0 * r.rouge1_f1,
        100.0 * r.rouge2_f1,
        100.0 * r.rouge_l_f1,
        100.0 * r.bleu4,
        100.0 * r.bleu_n,
        r.perplexity
    );
    Ok(())
}

fn gen_corpus(seed: u64, sizes: &[usize], out: &Path) -> fedlora::Result<()> {
    let corpora = generate_clients(seed, sizes)?;
    corpora.save(out)?;
    for (i, c) in corpora.clients.iter().enumerate() {
        println!("client{} {} train={} test={}", i + 1, c.style, c.train.len(), c.test.len());
    }
    println!("mixed test={}", corpora.mixed_test.len());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let res = worker_threads().and_then(|_| match cli.command {
        Command::Train { config, mode, seed, out } => train(&config, mode, seed, out),
        Command::Eval { model, test, base } => eval(&model, &test, base),
        Command::GenCorpus { seed, sizes, out } => gen_corpus(seed, &sizes, &out),
    });
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
