//! Command-line front end. [`run_command`] parses arguments, runs one
//! subcommand and maps the outcome to an exit status: 0 on success, 1 for
//! usage and configuration errors, 2 for runtime failures.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use latentfuzz::analysis::{
    behaviour_targeting_eval, crash_report, latent_similarity_eval, ngram_csv, ngram_frequencies,
};
use latentfuzz::config::{override_value, parse_config};
use latentfuzz::generator::sample_string;
use latentfuzz::orchestrator::{init_state, run_campaign, FuzzerState};
use latentfuzz::persist::{has_state, load_state, save_state};
use latentfuzz::ranking::{cft_order, fft_order, fft_order_traces, RankedSequence};
use latentfuzz::vae::LatentVector;
use latentfuzz::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde_json::{json, Value};

#[derive(Parser, Debug)]
#[command(name = "latentfuzz", version, about = "Self-training generative fuzzer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run or resume a campaign.
    Fuzz(FuzzArgs),
    /// Sample strings from a campaign's generator.
    Generate(GenerateArgs),
    /// Farthest-first or closest-first order of a corpus, as CSV.
    Rank(RankArgs),
    /// Most frequent n-grams of a corpus, as CSV.
    NgramReport(NgramArgs),
    /// Self-similarity of strings from farthest-first versus closest-first latents.
    LatentEval(LatentEvalArgs),
    /// Cosine distance between random latents and the embeddings of what they generate.
    BehaviourEval(BehaviourArgs),
    /// Archived crashes grouped by trace.
    CrashReport(DirArgs),
}

/// Every configuration key, plus a JSON document and generic overrides.
#[derive(Args, Debug, Default)]
struct ConfigArgs {
    /// JSON configuration document.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` override; may repeat.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    profile: Option<String>,
    #[arg(long)]
    target: Option<String>,
    #[arg(long = "map_size", alias = "map-size")]
    map_size: Option<usize>,
    #[arg(long = "latent_dim", alias = "latent-dim")]
    latent_dim: Option<usize>,
    #[arg(long = "str_len_max", alias = "str-len-max")]
    str_len_max: Option<usize>,
    #[arg(long = "dict_size", alias = "dict-size")]
    dict_size: Option<usize>,
    #[arg(long = "batch_size", alias = "batch-size")]
    batch_size: Option<usize>,
    #[arg(long = "train_batch_size", alias = "train-batch-size")]
    train_batch_size: Option<usize>,
    #[arg(long = "steps_per_pass", alias = "steps-per-pass")]
    steps_per_pass: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long = "learning_rate", alias = "learning-rate")]
    learning_rate: Option<f64>,
    #[arg(long = "input_noise_sigma", alias = "input-noise-sigma")]
    input_noise_sigma: Option<f64>,
    #[arg(long = "mse_weight", alias = "mse-weight")]
    mse_weight: Option<f64>,
    #[arg(long = "mse_exponent", alias = "mse-exponent")]
    mse_exponent: Option<f64>,
    #[arg(long = "deconv_blocks", alias = "deconv-blocks")]
    deconv_blocks: Option<usize>,
    #[arg(long)]
    filters: Option<usize>,
    #[arg(long)]
    len0: Option<usize>,
    /// Comma-separated hidden widths.
    #[arg(long = "vae_hidden", alias = "vae-hidden", value_delimiter = ',')]
    vae_hidden: Option<Vec<usize>>,
    #[arg(long = "leaky_slope", alias = "leaky-slope")]
    leaky_slope: Option<f64>,
    #[arg(long = "batch_norm", alias = "batch-norm")]
    batch_norm: Option<bool>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long = "stall_window", alias = "stall-window")]
    stall_window: Option<usize>,
    #[arg(long = "stop_on_stall", alias = "stop-on-stall")]
    stop_on_stall: Option<bool>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long = "output_dir", alias = "output-dir")]
    output_dir: Option<PathBuf>,
}

impl ConfigArgs {
    /// Overrides in the order they apply: named flags, then `--set` pairs.
    fn overrides(&self) -> Result<Vec<(String, Value)>, Error> {
        let mut out = Vec::new();
        let mut put = |k: &str, v: Option<Value>| {
            if let Some(v) = v {
                out.push((k.to_string(), v));
            }
        };
        put("profile", self.profile.as_ref().map(|v| json!(v)));
        put("target", self.target.as_ref().map(|v| json!(v)));
        put("map_size", self.map_size.map(|v| json!(v)));
        put("latent_dim", self.latent_dim.map(|v| json!(v)));
        put("str_len_max", self.str_len_max.map(|v| json!(v)));
        put("dict_size", self.dict_size.map(|v| json!(v)));
        put("batch_size", self.batch_size.map(|v| json!(v)));
        put("train_batch_size", self.train_batch_size.map(|v| json!(v)));
        put("steps_per_pass", self.steps_per_pass.map(|v| json!(v)));
        put("k", self.k.map(|v| json!(v)));
        put("learning_rate", self.learning_rate.map(|v| json!(v)));
        put("input_noise_sigma", self.input_noise_sigma.map(|v| json!(v)));
        put("mse_weight", self.mse_weight.map(|v| json!(v)));
        put("mse_exponent", self.mse_exponent.map(|v| json!(v)));
        put("deconv_blocks", self.deconv_blocks.map(|v| json!(v)));
        put("filters", self.filters.map(|v| json!(v)));
        put("len0", self.len0.map(|v| json!(v)));
        put("vae_hidden", self.vae_hidden.as_ref().map(|v| json!(v)));
        put("leaky_slope", self.leaky_slope.map(|v| json!(v)));
        put("batch_norm", self.batch_norm.map(|v| json!(v)));
        put("epochs", self.epochs.map(|v| json!(v)));
        put("stall_window", self.stall_window.map(|v| json!(v)));
        put("stop_on_stall", self.stop_on_stall.map(|v| json!(v)));
        put("seed", self.seed.map(|v| json!(v)));
        put("output_dir", self.output_dir.as_ref().map(|v| json!(v)));
        for pair in &self.set {
            let (k, v) = pair
                .split_once('=')
                .ok_or_else(|| Error::ConfigDocument(format!("override `{pair}` is not KEY=VALUE")))?;
            out.push((k.trim().to_string(), override_value(v.trim())));
        }
        Ok(out)
    }

    fn document(&self) -> Result<Option<String>, Error> {
        self.config.as_ref().map(|p| read_text(p)).transpose()
    }
}

#[derive(Args, Debug)]
struct FuzzArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Continue the campaign saved in the output directory.
    #[arg(long)]
    resume: bool,
}

#[derive(Args, Debug)]
struct DirArgs {
    /// Campaign directory.
    #[arg(long)]
    dir: PathBuf,
    /// Write the report here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[command(flatten)]
    dir: DirArgs,
    /// JSON Lines file of latent vectors (arrays of numbers); random when absent.
    #[arg(long)]
    latents: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Order {
    Fft,
    Cft,
}

#[derive(Args, Debug)]
struct RankArgs {
    #[command(flatten)]
    dir: DirArgs,
    #[arg(long, value_enum, default_value_t = Order::Fft)]
    order: Order,
    /// Rank raw traces by Hamming distance instead of latent encodings.
    #[arg(long)]
    traces: bool,
}

#[derive(Args, Debug)]
struct NgramArgs {
    #[command(flatten)]
    dir: DirArgs,
    #[arg(long = "n_min", alias = "n-min", default_value_t = 3)]
    n_min: usize,
    #[arg(long = "n_max", alias = "n-max", default_value_t = 10)]
    n_max: usize,
    #[arg(long, default_value_t = 50)]
    top: usize,
}

#[derive(Args, Debug)]
struct LatentEvalArgs {
    #[command(flatten)]
    dir: DirArgs,
    #[arg(long, default_value_t = 10_000)]
    n: usize,
    #[arg(long, default_value_t = 100)]
    head: usize,
    #[arg(long, default_value_t = 10)]
    reps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct BehaviourArgs {
    #[command(flatten)]
    dir: DirArgs,
    #[arg(long, default_value_t = 100)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn read_text(path: &Path) -> Result<String, Error> {
    fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn emit(out: Option<&Path>, text: &str) -> Result<(), Error> {
    match out {
        Some(p) => fs::write(p, text).map_err(|source| Error::Io {
            path: p.to_path_buf(),
            source,
        }),
        None => {
            print!("{text}");
            std::io::stdout().flush().ok();
            Ok(())
        }
    }
}

fn pretty(v: &impl serde::Serialize) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("reports serialise");
    s.push('\n');
    s
}

fn load(dir: &Path) -> Result<FuzzerState, Error> {
    if !has_state(dir) {
        return Err(Error::Undefined(format!(
            "{} holds no saved campaign (state.json and a checkpoint are required)",
            dir.display()
        )));
    }
    load_state(dir)
}

fn fuzz(args: FuzzArgs) -> Result<(), Error> {
    let overrides = args.config.overrides()?;
    let cfg = parse_config(args.config.document()?.as_deref(), &overrides)?;
    let dir = cfg.output_dir.clone();
    let mut state = if has_state(&dir) {
        if !args.resume {
            return Err(Error::config(
                "output_dir",
                format!("{} already holds a campaign; pass --resume to continue it", dir.display()),
            ));
        }
        let mut s = load_state(&dir)?;
        // a resumed campaign keeps its saved settings apart from its length
        s.config.epochs = cfg.epochs;
        s
    } else {
        let mut s = init_state(&cfg, cfg.seed)?;
        save_state(&s, &dir)?;
        s.persist_to(&dir);
        s
    };
    let mut stdout = std::io::stdout();
    let reports = run_campaign(&mut state, |r| {
        let line = serde_json::to_string(r).expect("report serialises");
        writeln!(stdout, "{line}").ok();
    })?;
    eprintln!(
        "{} epochs run, {} distinct traces, {} corpus records, {} crashes archived in {}",
        reports.len(),
        state.distinct_traces(),
        state.corpus.len(),
        state.crashes.len(),
        dir.display()
    );
    Ok(())
}

fn parse_latents(path: &Path, dim: usize) -> Result<Vec<LatentVector>, Error> {
    read_text(path)?
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let v: Vec<f32> = serde_json::from_str(l)
                .map_err(|e| Error::corrupt(path, format!("line {}: {e}", i + 1)))?;
            if v.len() != dim {
                return Err(Error::corrupt(
                    path,
                    format!("line {}: {} values, expected {dim}", i + 1, v.len()),
                ));
            }
            LatentVector::new(v)
        })
        .collect()
}

fn generate(args: GenerateArgs) -> Result<(), Error> {
    let state = load(&args.dir.dir)?;
    let dim = state.config.latent_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let zs = match &args.latents {
        Some(p) => parse_latents(p, dim)?,
        None => (0..args.count)
            .map(|_| LatentVector((0..dim).map(|_| rng.sample::<f64, _>(StandardNormal) as f32).collect()))
            .collect(),
    };
    let mut text = String::new();
    for z in &zs {
        let s = sample_string(&state.gnn.forward(z)?, &mut rng);
        let row = json!({
            "latent": z,
            "text": String::from_utf8_lossy(s.as_bytes()),
            "hex": s.as_bytes().iter().map(|b| format!("{b:02x}")).collect::<String>(),
        });
        text.push_str(&row.to_string());
        text.push('\n');
    }
    emit(args.dir.out.as_deref(), &text)
}

fn rank(args: RankArgs) -> Result<(), Error> {
    let state = load(&args.dir.dir)?;
    let seq: RankedSequence = if args.traces {
        let traces: Vec<_> = state.corpus.iter().map(|r| r.trace.clone()).collect();
        fft_order_traces(&traces)
    } else {
        let latents: Vec<_> = state.corpus.iter().map(|r| r.latent.clone()).collect();
        match args.order {
            Order::Fft => fft_order(&latents)?,
            Order::Cft => cft_order(&latents)?,
        }
    };
    emit(args.dir.out.as_deref(), &seq.to_csv())
}

fn ngram_report(args: NgramArgs) -> Result<(), Error> {
    let state = load(&args.dir.dir)?;
    let strings: Vec<&[u8]> = state.corpus.iter().map(|r| r.input.as_bytes()).collect();
    let rows = ngram_frequencies(&strings, args.n_min, args.n_max, args.top)?;
    emit(args.dir.out.as_deref(), &ngram_csv(&rows))
}

fn latent_eval(args: LatentEvalArgs) -> Result<(), Error> {
    let state = load(&args.dir.dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let report = latent_similarity_eval(&state.gnn, args.n, args.head, args.reps, &mut rng)?;
    emit(args.dir.out.as_deref(), &pretty(&report))
}

fn behaviour_eval(args: BehaviourArgs) -> Result<(), Error> {
    let state = load(&args.dir.dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let report = behaviour_targeting_eval(&state, args.n, &mut rng)?;
    emit(args.dir.out.as_deref(), &pretty(&report))
}

fn crashes(args: DirArgs) -> Result<(), Error> {
    let state = load(&args.dir)?;
    emit(args.out.as_deref(), &pretty(&crash_report(&state)?))
}

/// Runs the command line `argv` (program name first) and returns the exit status.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            e.print().ok();
            return code;
        }
    };
    let result = match cli.command {
        Command::Fuzz(a) => fuzz(a),
        Command::Generate(a) => generate(a),
        Command::Rank(a) => rank(a),
        Command::NgramReport(a) => ngram_report(a),
        Command::LatentEval(a) => latent_eval(a),
        Command::BehaviourEval(a) => behaviour_eval(a),
        Command::CrashReport(a) => crashes(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_usage() {
                1
            } else {
                2
            }
        }
    }
}
