//! `qspec`: checkpoints, generation, serving benchmarks and cost modeling
//! for the draft/verify engine.
//!
//! Machine-readable output goes to stdout (or `--out`); the human summary
//! goes to stderr. Failures exit with a code per error category.

use std::fs;
use std::io::{self, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use qspec_core::costmodel::{gamma_sweep, replay_trace, sweep_table, LatencyProfile};
use qspec_core::init::{random_init, random_init_float};
use qspec_core::model::ModelConfig;
use qspec_core::quant::ExecutionMode;
use qspec_core::serving::{run_fcfs_with_workers, RequestOutcome, ServeMode};
use qspec_core::specdec::{
    generate_greedy, generate_qspec, read_trace, similarity_probe, write_trace, GenerationConfig, TraceLine,
};
use qspec_core::storage::{
    format_tokens, load_checkpoint, load_float_checkpoint, parse_token_file, parse_workload, save_checkpoint,
    save_float_checkpoint,
};
use qspec_core::{Error, DEFAULT_GAMMA};

#[derive(Parser)]
#[command(
    name = "qspec",
    version,
    about = "Speculative decoding with one int4 model in two precisions"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded random checkpoint.
    Init(InitArgs),
    /// Convert an f32 checkpoint to int4.
    Quantize {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate from a prompt file.
    Generate(GenerateArgs),
    /// Serve a workload with FCFS continuous batching.
    Bench(BenchArgs),
    /// Compare the two precisions position by position on a golden answer.
    Probe(ProbeArgs),
    /// Price a cycle trace with a latency profile.
    CostSim(CostSimArgs),
    /// Measure acceptance across draft lengths and model the speedup.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct InitArgs {
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 64)]
    d_model: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 2)]
    kv_heads: usize,
    #[arg(long, default_value_t = 128)]
    d_ff: usize,
    #[arg(long, default_value_t = 256)]
    vocab: usize,
    #[arg(long, default_value_t = 256)]
    max_seq_len: usize,
    #[arg(long, default_value_t = 32)]
    group_size: usize,
    /// Keep f32 linears instead of quantizing.
    #[arg(long)]
    float: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    /// Low-precision drafts verified in high precision.
    Qspec,
    /// Greedy decoding with f32 activations.
    W4a16,
    /// Greedy decoding with int4 activations.
    W4a4,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, value_enum, default_value = "qspec")]
    mode: Mode,
    /// Draft length (qspec only).
    #[arg(long)]
    gamma: Option<usize>,
    #[arg(long)]
    eos: Option<u32>,
}

impl DecodeArgs {
    fn config(&self, max_new_tokens: usize) -> GenerationConfig {
        if self.gamma.is_some() && self.mode != Mode::Qspec {
            eprintln!("warning: --gamma has no effect outside --mode qspec");
        }
        GenerationConfig {
            gamma: self.gamma.unwrap_or(DEFAULT_GAMMA),
            max_new_tokens,
            eos_token: self.eos,
            ..GenerationConfig::default()
        }
    }
}

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    decode: DecodeArgs,
    /// Token ids separated by whitespace or commas.
    #[arg(long)]
    prompt: PathBuf,
    #[arg(long, default_value_t = 32)]
    max_new: usize,
    /// Write the cycle trace (JSON lines) here.
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    decode: DecodeArgs,
    /// One request per line: `id max_new_tokens token...`.
    #[arg(long)]
    workload: PathBuf,
    #[arg(long, default_value_t = 1)]
    batch: usize,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ProbeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    prompt: PathBuf,
    /// Golden answer tokens; defaults to the high-precision greedy continuation.
    #[arg(long)]
    golden: Option<PathBuf>,
    /// Length of the default golden answer.
    #[arg(long, default_value_t = 16)]
    max_new: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CostSimArgs {
    #[arg(long)]
    trace: PathBuf,
    /// Profile file; defaults to the built-in illustrative calibration.
    #[arg(long)]
    profile: Option<PathBuf>,
    /// Price every cycle at this batch size instead of each line's own.
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    model: PathBuf,
    /// One prompt per line.
    #[arg(long)]
    prompts: PathBuf,
    #[arg(long, default_value_t = 1)]
    gamma_min: usize,
    #[arg(long, default_value_t = 7)]
    gamma_max: usize,
    #[arg(long, default_value_t = 32)]
    max_new: usize,
    #[arg(long)]
    profile: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    batch: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn emit(out: Option<&Path>, text: &str) -> anyhow::Result<()> {
    match out {
        Some(p) => fs::write(p, text)
            .map_err(Error::from)
            .with_context(|| format!("writing {}", p.display()))?,
        None => io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn read_text(p: &Path) -> anyhow::Result<String> {
    fs::read_to_string(p)
        .map_err(Error::from)
        .with_context(|| format!("reading {}", p.display()))
}

fn load_profile(p: Option<&Path>) -> anyhow::Result<LatencyProfile> {
    Ok(match p {
        Some(p) => LatencyProfile::parse(&read_text(p)?)?,
        None => LatencyProfile::illustrative(),
    })
}

fn load_model(p: &Path) -> anyhow::Result<qspec_core::model::TransformerModel> {
    load_checkpoint(p).with_context(|| format!("loading {}", p.display()))
}

fn save_trace(path: &Path, lines: &[TraceLine]) -> anyhow::Result<()> {
    let f = fs::File::create(path)
        .map_err(Error::from)
        .with_context(|| format!("creating {}", path.display()))?;
    write_trace(io::BufWriter::new(f), lines)?;
    Ok(())
}

fn init(a: InitArgs) -> anyhow::Result<()> {
    let config = ModelConfig {
        n_layers: a.layers,
        d_model: a.d_model,
        n_heads: a.heads,
        n_kv_heads: a.kv_heads,
        d_ff: a.d_ff,
        vocab_size: a.vocab,
        max_seq_len: a.max_seq_len,
        group_size: a.group_size,
        ..ModelConfig::default()
    };
    if a.float {
        save_float_checkpoint(&random_init_float(&config, a.seed)?, &a.out)?;
    } else {
        save_checkpoint(&random_init(&config, a.seed)?, &a.out)?;
    }
    eprintln!("wrote {} (seed {})", a.out.display(), a.seed);
    Ok(())
}

fn generate(a: GenerateArgs) -> anyhow::Result<()> {
    let model = load_model(&a.decode.model)?;
    let prompt = parse_token_file(&read_text(&a.prompt)?)?;
    let cfg = a.decode.config(a.max_new);
    let tokens = match a.decode.mode {
        Mode::Qspec => {
            let r = generate_qspec(&model, &prompt, &cfg)?;
            eprintln!(
                "{} tokens in {} cycles, acceptance {:.3}, {:.3} tokens/cycle",
                r.tokens.len(),
                r.n_cycles,
                r.acceptance_rate,
                r.tokens_per_cycle
            );
            if let Some(p) = &a.trace {
                let lines: Vec<TraceLine> = r
                    .cycles
                    .iter()
                    .map(|c| TraceLine {
                        batch: Some(1),
                        ..TraceLine::from(c.clone())
                    })
                    .collect();
                save_trace(p, &lines)?;
            }
            r.tokens
        }
        Mode::W4a16 | Mode::W4a4 => {
            if a.trace.is_some() {
                eprintln!("warning: greedy modes produce no cycle trace");
            }
            let mode = if a.decode.mode == Mode::W4a16 {
                ExecutionMode::HighPrecision
            } else {
                ExecutionMode::LowPrecision
            };
            let t = generate_greedy(&model, &prompt, mode, &cfg)?;
            eprintln!("{} tokens, greedy {mode} precision", t.len());
            t
        }
    };
    emit(a.out.as_deref(), &format_tokens(&tokens))
}

fn bench(a: BenchArgs) -> anyhow::Result<()> {
    let model = load_model(&a.decode.model)?;
    let requests = parse_workload(&read_text(&a.workload)?)?;
    let cfg = a.decode.config(1);
    let mode = match a.decode.mode {
        Mode::Qspec => ServeMode::QSpec,
        Mode::W4a16 => ServeMode::GreedyHigh,
        Mode::W4a4 => ServeMode::GreedyLow,
    };
    let (outputs, stats) = run_fcfs_with_workers(&requests, a.batch, &model, &cfg, mode, a.workers)?;
    let mut text = stats.to_key_values();
    for o in &outputs {
        match &o.outcome {
            RequestOutcome::Completed { tokens, cycles } => {
                text.push_str(&format!("request.{}.cycles: {cycles}\n", o.id));
                text.push_str(&format!("request.{}.tokens: {}", o.id, format_tokens(tokens)));
            }
            RequestOutcome::Rejected { reason } => {
                text.push_str(&format!("request.{}.rejected: {reason}\n", o.id));
            }
        }
    }
    if let Some(p) = &a.trace {
        save_trace(p, &stats.trace)?;
    }
    eprintln!(
        "{} requests ({} rejected), {} tokens in {} steps at batch {}, {:.1} tokens/s",
        outputs.len(),
        stats.rejected,
        stats.total_committed_tokens,
        stats.steps.len(),
        a.batch,
        stats.throughput_tokens_per_sec
    );
    emit(a.out.as_deref(), &text)
}

fn probe(a: ProbeArgs) -> anyhow::Result<()> {
    let model = load_model(&a.model)?;
    let prompt = parse_token_file(&read_text(&a.prompt)?)?;
    let golden = match &a.golden {
        Some(p) => parse_token_file(&read_text(p)?)?,
        None => generate_greedy(
            &model,
            &prompt,
            ExecutionMode::HighPrecision,
            &GenerationConfig::with_gamma(DEFAULT_GAMMA, a.max_new),
        )?,
    };
    let records = similarity_probe(&model, &prompt, &golden)?;
    let mut text = String::new();
    for r in &records {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    let agree = records.iter().filter(|r| r.accepted).count();
    eprintln!(
        "{agree}/{} positions where the low-precision argmax matches",
        records.len()
    );
    emit(a.out.as_deref(), &text)
}

fn cost_sim(a: CostSimArgs) -> anyhow::Result<()> {
    let profile = load_profile(a.profile.as_deref())?;
    let f = fs::File::open(&a.trace)
        .map_err(Error::from)
        .with_context(|| format!("reading {}", a.trace.display()))?;
    let trace = read_trace(BufReader::new(f))?;
    let r = replay_trace(&trace, &profile, a.batch)?;
    let text = format!(
        "cycles: {}\ncommitted_tokens: {}\ntokens_per_cycle: {}\nmean_cycle_cost: {}\nthroughput_units: {}\n\
         speedup_vs_base: {}\nper_valid_token_latency: {}\ndraft_share: {}\nverify_share: {}\n",
        r.cycles,
        r.committed_tokens,
        r.tokens_per_cycle,
        r.mean_cycle_cost,
        r.throughput_units,
        r.speedup_vs_base,
        r.per_valid_token_latency,
        r.draft_share,
        r.verify_share
    );
    eprintln!("modeled speedup {:.3}x over {} cycles", r.speedup_vs_base, r.cycles);
    emit(a.out.as_deref(), &text)
}

fn sweep(a: SweepArgs) -> anyhow::Result<()> {
    let model = load_model(&a.model)?;
    let profile = load_profile(a.profile.as_deref())?;
    let prompts: Vec<Vec<u32>> = read_text(&a.prompts)?
        .lines()
        .map(parse_token_file)
        .filter(|p| !matches!(p, Ok(t) if t.is_empty()))
        .collect::<Result<_, _>>()?;
    if prompts.is_empty() {
        bail!(Error::Input("prompt file holds no prompts".into()));
    }
    let rows = gamma_sweep(
        &model,
        &prompts,
        a.gamma_min..=a.gamma_max,
        &profile,
        a.max_new,
        a.batch,
    )?;
    for r in &rows {
        eprintln!(
            "gamma {}: acceptance {:.3}, modeled speedup {:.3}x",
            r.gamma, r.acceptance_rate, r.modeled_speedup
        );
    }
    emit(a.out.as_deref(), &sweep_table(&rows))
}

fn quantize(input: &Path, out: &Path) -> anyhow::Result<()> {
    let model = load_float_checkpoint(input)
        .with_context(|| format!("loading {}", input.display()))?
        .quantize()?;
    save_checkpoint(&model, out)?;
    eprintln!("wrote {} ({} weight bytes)", out.display(), model.weight_bytes());
    Ok(())
}

/// The context chain, leaving out sources that an outer message already
/// quotes.
fn describe(err: &anyhow::Error) -> String {
    let mut parts: Vec<String> = Vec::new();
    for cause in err.chain() {
        let msg = cause.to_string();
        if !parts.last().is_some_and(|p| p.contains(&msg)) {
            parts.push(msg);
        }
    }
    parts.join(": ")
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let Some(e) = err.chain().find_map(|c| c.downcast_ref::<Error>()) else {
        return 1;
    };
    match e {
        Error::Shape(_) => 3,
        Error::Config(_) => 4,
        Error::Overflow { .. } => 5,
        Error::TokenOutOfVocab { .. } => 6,
        Error::Input(_) => 7,
        Error::Format { .. } => 8,
        Error::Io(_) => 9,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Init(a) => init(a),
        Command::Quantize { input, out } => quantize(&input, &out),
        Command::Generate(a) => generate(a),
        Command::Bench(a) => bench(a),
        Command::Probe(a) => probe(a),
        Command::CostSim(a) => cost_sim(a),
        Command::Sweep(a) => sweep(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}
