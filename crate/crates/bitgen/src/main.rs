//! Command-line entry points: train, generate, verify, bench, eval-grammar.
//!
//! Exit codes: 0 success, 1 generic failure, 2 invalid configuration,
//! 3 training diverged (non-finite loss).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use bitgen::bench::{format_table, run_bench, BenchConfig};
use bitgen::config::RunConfig;
use bitgen::error::Error;
use bitgen::grammar::Grammar;
use bitgen::sample::{generate, make_schedule, GenerateOptions};
use bitgen::train::{load_checkpoint, save_checkpoint, MetricsWriter, Trainer};
use bitgen::verify::run_verification;

#[derive(Parser)]
#[command(name = "bitgen", about = "Block-diffusion language model over binary token codes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum GrammarArg {
    Anbn,
    Addition,
}

impl From<GrammarArg> for Grammar {
    fn from(g: GrammarArg) -> Self {
        match g {
            GrammarArg::Anbn => Grammar::AnBn,
            GrammarArg::Addition => Grammar::Addition,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a TOML run configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Text corpus, one sample per line. Optional for grammar tokenizer
        /// modes, which synthesize a corpus.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output directory for checkpoints and metrics.
        #[arg(long, default_value = "runs/default")]
        out_dir: PathBuf,
        /// Resume from this checkpoint instead of initializing fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Synthetic corpus size for grammar modes.
        #[arg(long, default_value_t = 2000)]
        corpus_size: usize,
        /// Largest n for the a^n b^n corpus.
        #[arg(long, default_value_t = 8)]
        max_n: usize,
    },
    /// Sample from a trained checkpoint.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Prompt text; empty means unconditional (BOS-only).
        #[arg(long, default_value = "")]
        prompt: String,
        #[arg(long, default_value_t = 64)]
        max_new_tokens: usize,
        /// Denoising steps per block; defaults to the checkpoint's setting.
        #[arg(long)]
        steps: Option<usize>,
        /// Guidance scale; defaults to the checkpoint's setting.
        #[arg(long)]
        guidance: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Print call counts and timing after the text.
        #[arg(long)]
        report: bool,
    },
    /// Run the property-verification suite.
    Verify {
        /// Check many more gradient elements (slower).
        #[arg(long)]
        full: bool,
    },
    /// Decode-throughput benchmark across block sizes.
    Bench {
        #[arg(long, default_value_t = 64)]
        tokens: usize,
        #[arg(long, default_value_t = 15)]
        steps: usize,
    },
    /// Sample a trained grammar model and score validity.
    EvalGrammar {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        grammar: GrammarArg,
        #[arg(long, default_value_t = 100)]
        samples: usize,
        #[arg(long, default_value_t = 32)]
        max_new_tokens: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Denoising steps per block; defaults to the checkpoint's setting.
        #[arg(long)]
        steps: Option<usize>,
        /// Guidance scale; defaults to the checkpoint's setting.
        #[arg(long)]
        guidance: Option<f64>,
    },
}

fn exit_code_for(err: &Error) -> ExitCode {
    match err {
        Error::Config(_) => ExitCode::from(2),
        Error::NonFiniteLoss { .. } => ExitCode::from(3),
        _ => ExitCode::from(1),
    }
}

fn load_corpus(
    run: &RunConfig,
    data: Option<&PathBuf>,
    corpus_size: usize,
    max_n: usize,
) -> Result<Vec<Vec<u32>>, Error> {
    let tok = run.build_tokenizer()?;
    // Every sample ends with an explicit EOS so termination is a learned
    // target; the codec marks only its own alignment padding invalid.
    let terminate = |mut ids: Vec<u32>| {
        ids.push(tok.eos_id());
        ids
    };
    if let Some(path) = data {
        let text = std::fs::read_to_string(path)?;
        let mut samples = Vec::new();
        for line in text.lines() {
            if line.is_empty() {
                continue;
            }
            samples.push(terminate(tok.encode(line)?));
        }
        if samples.is_empty() {
            return Err(Error::Config(format!("{}: no samples", path.display())));
        }
        return Ok(samples);
    }
    let grammar = match run.tokenizer.mode.as_str() {
        "grammar-anbn" => Grammar::AnBn,
        "grammar-addition" => Grammar::Addition,
        other => {
            return Err(Error::Config(format!(
                "--data is required for tokenizer mode {other:?}"
            )))
        }
    };
    // Corpus draws come from a stream separate from the trainer's, keyed off
    // the training seed, so resumed runs rebuild the identical corpus.
    Ok(grammar.training_corpus(corpus_size, max_n, run.train.seed.wrapping_add(0x5eed)))
}

fn cmd_train(
    config: PathBuf,
    data: Option<PathBuf>,
    out_dir: PathBuf,
    resume: Option<PathBuf>,
    corpus_size: usize,
    max_n: usize,
) -> Result<(), Error> {
    let run = RunConfig::load(&config)?;
    let samples = load_corpus(&run, data.as_ref(), corpus_size, max_n)?;
    std::fs::create_dir_all(&out_dir)?;
    let mut trainer: Trainer<f32> = match &resume {
        Some(path) => load_checkpoint(path, &samples)?,
        None => Trainer::new(run.clone(), &samples)?,
    };
    if trainer.skipped_samples > 0 {
        eprintln!(
            "warning: {} samples longer than pack_length were skipped",
            trainer.skipped_samples
        );
    }
    let mut metrics = MetricsWriter::create(&out_dir.join("metrics.jsonl"))?;
    let total = trainer.run.train.total_steps;
    let interval = trainer.run.train.checkpoint_interval.max(1);
    while trainer.step < total {
        let stats = trainer.train_step()?;
        metrics.log(&stats)?;
        if stats.step % 50 == 0 || stats.step == total {
            println!(
                "step {:>6}/{total}  loss {:.4}  lr {:.2e}",
                stats.step, stats.loss, stats.lr
            );
        }
        if stats.step % interval == 0 || stats.step == total {
            save_checkpoint(&trainer, &out_dir.join("latest.ckpt"))?;
        }
    }
    save_checkpoint(&trainer, &out_dir.join("latest.ckpt"))?;
    println!("done: {} steps, checkpoint at {}", trainer.step, out_dir.join("latest.ckpt").display());
    Ok(())
}

/// Minimal corpus for checkpoint loading outside training: packing state is
/// irrelevant to sampling.
fn dummy_corpus() -> Vec<Vec<u32>> {
    vec![Vec::new()]
}

fn cmd_generate(
    checkpoint: PathBuf,
    prompt: String,
    max_new_tokens: usize,
    steps: Option<usize>,
    guidance: Option<f64>,
    seed: u64,
    report: bool,
) -> Result<(), Error> {
    let trainer: Trainer<f32> = load_checkpoint(&checkpoint, &dummy_corpus())?;
    let tok = trainer.run.build_tokenizer()?;
    let prompt_ids = tok.encode(&prompt)?;
    let schedule = make_schedule(
        steps.unwrap_or(trainer.run.sampler.steps),
        trainer.run.sampler.kind,
        guidance.unwrap_or(trainer.run.sampler.guidance_scale),
    )?;
    let opts = GenerateOptions {
        max_new_tokens,
        seed,
        ignore_eos: false,
    };
    let out = generate(
        &trainer.backbone,
        &trainer.head,
        &trainer.codec,
        &prompt_ids,
        &schedule,
        &opts,
    )?;
    println!("{}{}", prompt, tok.decode(&out.tokens));
    if report {
        eprintln!(
            "tokens {}  backbone calls {}  head calls {}  fallbacks {}  prefill {:.4}s  decode {:.4}s",
            out.tokens.len(),
            out.backbone_calls,
            out.head_calls,
            out.fallback_count,
            out.prefill_secs,
            out.decode_secs
        );
    }
    Ok(())
}

fn cmd_verify(full: bool) -> Result<(), Error> {
    let outcomes = run_verification(!full);
    let mut failed = 0;
    for o in &outcomes {
        let tag = if o.passed { "PASS" } else { "FAIL" };
        println!("[{tag}] {:<20} {}", o.name, o.detail);
        if !o.passed {
            failed += 1;
        }
    }
    if failed > 0 {
        return Err(Error::Domain(format!("{failed} verification checks failed")));
    }
    Ok(())
}

fn cmd_bench(tokens: usize, steps: usize) -> Result<(), Error> {
    let cfg = BenchConfig {
        tokens,
        steps,
        ..BenchConfig::default()
    };
    let rows = run_bench::<f32>(&cfg)?;
    print!("{}", format_table(&rows, steps));
    Ok(())
}

fn cmd_eval_grammar(
    checkpoint: PathBuf,
    grammar: Grammar,
    samples: usize,
    max_new_tokens: usize,
    seed: u64,
    steps: Option<usize>,
    guidance: Option<f64>,
) -> Result<(), Error> {
    let trainer: Trainer<f32> = load_checkpoint(&checkpoint, &dummy_corpus())?;
    let tok = grammar.tokenizer();
    let schedule = make_schedule(
        steps.unwrap_or(trainer.run.sampler.steps),
        trainer.run.sampler.kind,
        guidance.unwrap_or(trainer.run.sampler.guidance_scale),
    )?;
    let mut valid = 0usize;
    let mut fallbacks = 0usize;
    let mut generated_tokens = 0usize;
    for i in 0..samples {
        let opts = GenerateOptions {
            max_new_tokens,
            seed: seed.wrapping_add(i as u64),
            ignore_eos: false,
        };
        let out = generate(
            &trainer.backbone,
            &trainer.head,
            &trainer.codec,
            &[],
            &schedule,
            &opts,
        )?;
        fallbacks += out.fallback_count;
        generated_tokens += out.tokens.len();
        let text = tok.decode(&out.tokens);
        if grammar.check(&text) {
            valid += 1;
        }
    }
    println!(
        "valid {}/{} ({:.1}%)  fallback positions {}  tokens {}",
        valid,
        samples,
        100.0 * valid as f64 / samples as f64,
        fallbacks,
        generated_tokens
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train {
            config,
            data,
            out_dir,
            resume,
            corpus_size,
            max_n,
        } => cmd_train(config, data, out_dir, resume, corpus_size, max_n),
        Command::Generate {
            checkpoint,
            prompt,
            max_new_tokens,
            steps,
            guidance,
            seed,
            report,
        } => cmd_generate(checkpoint, prompt, max_new_tokens, steps, guidance, seed, report),
        Command::Verify { full } => cmd_verify(full),
        Command::Bench { tokens, steps } => cmd_bench(tokens, steps),
        Command::EvalGrammar {
            checkpoint,
            grammar,
            samples,
            max_new_tokens,
            seed,
            steps,
            guidance,
        } => cmd_eval_grammar(
            checkpoint,
            grammar.into(),
            samples,
            max_new_tokens,
            seed,
            steps,
            guidance,
        ),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    }
}
