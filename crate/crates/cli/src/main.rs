//! `strelay`: ingest, analyse, train and evaluate next-location models.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};

use config::{RunConfig, BARE_SPEC_KEYS, SPEC_KEYS, SYNTH_KEYS, TRAIN_KEYS};
use strelay::checkpoint::Checkpoint;
use strelay::encoder::EncoderKind;
use strelay::entropy::entropy_report;
use strelay::geospace::IntervalSpec;
use strelay::ingest::{
    chrono_split, filter_users, idmap_path, parse_checkins_str, Dataset, TimeFormat,
};
use strelay::metrics::{grouped_evaluate, Grouping, Labels, DEFAULT_KS};
use strelay::modelcheck::{model_grad_check, ModelCheckConfig};
use strelay::relay::Variant;
use strelay::synthgen::{generate, SynthConfig};
use strelay::trainer::{train_with, TrainConfig};

const GRADCHECK_TOL: f64 = 1e-4;
const DEFAULT_TRAIN_FRAC: f64 = 0.8;

#[derive(Debug)]
enum CliError {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Numeric(m) => m,
        }
    }
}

impl From<strelay::Error> for CliError {
    fn from(e: strelay::Error) -> Self {
        if e.is_numeric() {
            CliError::Numeric(e.to_string())
        } else {
            CliError::Data(e.to_string())
        }
    }
}

type CliResult = Result<(), CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

#[derive(Parser)]
#[command(
    name = "strelay",
    version,
    about = "Next-location prediction with relayed spatiotemporal context"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse a check-in log, filter sparse users and write the canonical dataset.
    Ingest {
        input: PathBuf,
        #[arg(long, default_value_t = 1)]
        min_checkins: usize,
        /// Timestamp column format: auto, epoch or iso8601.
        #[arg(long, default_value = "auto", value_parser = ["auto", "epoch", "iso8601"])]
        time_format: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-user mobility entropy and radius of gyration.
    Entropy {
        dataset: PathBuf,
        #[arg(long)]
        dt: Option<f64>,
        #[arg(long = "M")]
        m: Option<usize>,
        #[arg(long)]
        dd: Option<f64>,
        #[arg(long = "N")]
        n: Option<usize>,
        /// Per-user CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train on the chronological head of every trajectory and write a checkpoint.
    Train {
        dataset: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_parser = variant_names())]
        variant: Option<String>,
        #[arg(long, value_parser = ["gru", "flashback"])]
        encoder: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        d: Option<usize>,
        #[arg(long)]
        seq_len: Option<usize>,
        #[arg(long)]
        train_frac: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rank metrics on the chronological tail of every trajectory.
    Eval {
        checkpoint: PathBuf,
        dataset: PathBuf,
        /// none, rog_median or labels:<file>.
        #[arg(long, default_value = "none")]
        group: String,
        #[arg(long, default_value_t = DEFAULT_TRAIN_FRAC)]
        train_frac: f64,
        /// Metrics CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic dataset with known transition rules.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        users: Option<usize>,
        #[arg(long)]
        pois: Option<usize>,
        #[arg(long)]
        bins_per_poi: Option<usize>,
        #[arg(long)]
        events: Option<usize>,
        #[arg(long)]
        noise: Option<f64>,
        #[arg(long)]
        out: PathBuf,
        /// Rule table; defaults to `<out>.rules.tsv`.
        #[arg(long)]
        rules: Option<PathBuf>,
    },
    /// Compare model gradients with central finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 4)]
        d: usize,
        #[arg(long = "M", default_value_t = 6)]
        m: usize,
        #[arg(long = "N", default_value_t = 5)]
        n: usize,
        #[arg(long, default_value_t = 3)]
        users: usize,
        #[arg(long, default_value_t = 10)]
        pois: usize,
        #[arg(long, default_value_t = 4)]
        hidden_dim: usize,
        #[arg(long, default_value = "gru", value_parser = ["gru", "flashback"])]
        encoder: String,
        #[arg(long, default_value = "full", value_parser = variant_names())]
        variant: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-6)]
        eps: f64,
    },
}

fn variant_names() -> Vec<&'static str> {
    Variant::ALL.iter().map(|v| v.as_str()).collect()
}

fn load_dataset(path: &Path) -> Result<Dataset, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Data(format!("cannot read dataset {}: {e}", path.display())))?;
    parse_checkins_str(&text, TimeFormat::Auto)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn cmd_ingest(input: &Path, min_checkins: usize, time_format: &str, out: &Path) -> CliResult {
    let format = match time_format {
        "epoch" => TimeFormat::Epoch,
        "iso8601" => TimeFormat::Iso8601,
        _ => TimeFormat::Auto,
    };
    if min_checkins == 0 {
        return Err(usage("--min-checkins must be at least 1"));
    }
    let text = fs::read_to_string(input)
        .map_err(|e| CliError::Data(format!("cannot read {}: {e}", input.display())))?;
    let raw = parse_checkins_str(&text, format)
        .map_err(|e| CliError::Data(format!("{}: {e}", input.display())))?;
    let ds = filter_users(&raw, min_checkins)?;
    ds.write_tsv(out)?;
    let idmap = idmap_path(out);
    ds.write_idmap(&idmap)?;
    println!(
        "users\t{}\npois\t{}\ncheckins\t{}",
        ds.num_users,
        ds.num_pois,
        ds.num_checkins()
    );
    eprintln!("wrote {} and {}", out.display(), idmap.display());
    Ok(())
}

fn cmd_entropy(
    dataset: &Path,
    dt: Option<f64>,
    m: Option<usize>,
    dd: Option<f64>,
    n: Option<usize>,
    out: Option<&Path>,
) -> CliResult {
    let mut rc = RunConfig::default();
    rc.set("dt", dt);
    rc.set("M", m);
    rc.set("dd", dd);
    rc.set("N", n);
    let spec: IntervalSpec = rc
        .resolve(&IntervalSpec::default(), &[&BARE_SPEC_KEYS])
        .map_err(usage)?;
    spec.validate().map_err(|e| usage(e.to_string()))?;
    let ds = load_dataset(dataset)?;
    let report = entropy_report(&ds, &spec)?;
    print!("{}", report.summary_table());
    if let Some(out) = out {
        report.save_csv(out)?;
    }
    Ok(())
}

struct TrainArgs<'a> {
    dataset: &'a Path,
    config: Option<&'a Path>,
    variant: Option<String>,
    encoder: Option<String>,
    seed: Option<u64>,
    epochs: Option<usize>,
    lr: Option<f64>,
    d: Option<usize>,
    seq_len: Option<usize>,
    train_frac: Option<f64>,
    out: &'a Path,
}

fn cmd_train(a: TrainArgs) -> CliResult {
    let mut rc = RunConfig::load(a.config).map_err(usage)?;
    rc.set("variant", a.variant);
    rc.set("encoder", a.encoder);
    rc.set("seed", a.seed);
    rc.set("epochs", a.epochs);
    rc.set("lr", a.lr);
    rc.set("d", a.d);
    rc.set("seq_len", a.seq_len);
    rc.set("train_frac", a.train_frac);
    let train_frac = rc
        .take::<f64>("train_frac")
        .map_err(usage)?
        .unwrap_or(DEFAULT_TRAIN_FRAC);
    let cfg: TrainConfig = rc
        .resolve(&TrainConfig::default(), &[&TRAIN_KEYS, &SPEC_KEYS])
        .map_err(usage)?;
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    if !(train_frac > 0.0 && train_frac < 1.0) {
        return Err(usage(format!(
            "train_frac must be in (0, 1), got {train_frac}"
        )));
    }

    let ds = load_dataset(a.dataset)?;
    let (train, _) = chrono_split(&ds, train_frac)?;
    let t0 = Instant::now();
    println!("epoch\tmean_loss");
    let outcome = train_with(&train, &cfg, |epoch, loss| println!("{epoch}\t{loss:.6}"))?;
    outcome.checkpoint.save(a.out)?;
    eprintln!(
        "trained {} ({} encoder) for {} epochs in {:.1}s, wrote {}",
        cfg.variant,
        cfg.encoder.kind,
        cfg.epochs,
        t0.elapsed().as_secs_f64(),
        a.out.display()
    );
    Ok(())
}

fn cmd_eval(
    ckpt: &Path,
    dataset: &Path,
    group: &str,
    train_frac: f64,
    out: Option<&Path>,
) -> CliResult {
    if !(train_frac > 0.0 && train_frac < 1.0) {
        return Err(usage(format!(
            "--train-frac must be in (0, 1), got {train_frac}"
        )));
    }
    let ckpt =
        Checkpoint::load(ckpt).map_err(|e| CliError::Data(format!("{}: {e}", ckpt.display())))?;
    let ds = load_dataset(dataset)?;
    let (train, test) = chrono_split(&ds, train_frac)?;
    let labels;
    let grouping = match group {
        "none" => Grouping::None,
        "rog_median" => Grouping::RogMedian(&train),
        g => match g.strip_prefix("labels:") {
            Some(file) if !file.is_empty() => {
                labels = Labels::load(Path::new(file), &ds)
                    .map_err(|e| CliError::Data(format!("{file}: {e}")))?;
                Grouping::Labels(&labels)
            }
            _ => {
                return Err(usage(format!(
                    "--group must be none, rog_median or labels:<file>, got {g:?}"
                )))
            }
        },
    };
    let result = grouped_evaluate(&ckpt, &test, &grouping, &DEFAULT_KS)?;
    print!("{}", result.table());
    if let Some(out) = out {
        result.save_csv(out)?;
    }
    Ok(())
}

struct SynthArgs<'a> {
    config: Option<&'a Path>,
    seed: Option<u64>,
    users: Option<usize>,
    pois: Option<usize>,
    bins_per_poi: Option<usize>,
    events: Option<usize>,
    noise: Option<f64>,
    out: &'a Path,
    rules: Option<&'a Path>,
}

fn cmd_synth(a: SynthArgs) -> CliResult {
    let mut rc = RunConfig::load(a.config).map_err(usage)?;
    rc.set("seed", a.seed);
    rc.set("num_users", a.users);
    rc.set("pois_per_user", a.pois);
    rc.set("bins_per_poi", a.bins_per_poi);
    rc.set("events_per_user", a.events);
    rc.set("noise", a.noise);
    let cfg: SynthConfig = rc
        .resolve(&SynthConfig::default(), &[&SYNTH_KEYS, &SPEC_KEYS])
        .map_err(usage)?;
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let out = generate(&cfg)?;
    out.dataset.write_tsv(a.out)?;
    let rules = a
        .rules
        .map_or_else(|| with_suffix(a.out, ".rules.tsv"), Path::to_path_buf);
    out.write_rules(&rules)?;
    println!(
        "users\t{}\npois\t{}\ncheckins\t{}\nrules\t{}",
        out.dataset.num_users,
        out.dataset.num_pois,
        out.dataset.num_checkins(),
        out.rules.len()
    );
    Ok(())
}

fn cmd_gradcheck(cfg: ModelCheckConfig) -> CliResult {
    let t0 = Instant::now();
    let report = model_grad_check(&cfg)?;
    println!("max_rel_err\t{:.3e}", report.max_rel_err);
    if let Some((name, idx)) = &report.worst {
        println!("worst\t{name}[{idx}]");
    }
    println!("checked\t{}", report.checked);
    println!("seconds\t{:.2}", t0.elapsed().as_secs_f64());
    if report.max_rel_err < GRADCHECK_TOL {
        println!("PASS");
        Ok(())
    } else {
        Err(CliError::Numeric(format!(
            "max relative error {:.3e} is not below {GRADCHECK_TOL:e}",
            report.max_rel_err
        )))
    }
}

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Ingest {
            input,
            min_checkins,
            time_format,
            out,
        } => cmd_ingest(&input, min_checkins, &time_format, &out),
        Command::Entropy {
            dataset,
            dt,
            m,
            dd,
            n,
            out,
        } => cmd_entropy(&dataset, dt, m, dd, n, out.as_deref()),
        Command::Train {
            dataset,
            config,
            variant,
            encoder,
            seed,
            epochs,
            lr,
            d,
            seq_len,
            train_frac,
            out,
        } => cmd_train(TrainArgs {
            dataset: &dataset,
            config: config.as_deref(),
            variant,
            encoder,
            seed,
            epochs,
            lr,
            d,
            seq_len,
            train_frac,
            out: &out,
        }),
        Command::Eval {
            checkpoint,
            dataset,
            group,
            train_frac,
            out,
        } => cmd_eval(&checkpoint, &dataset, &group, train_frac, out.as_deref()),
        Command::Synth {
            config,
            seed,
            users,
            pois,
            bins_per_poi,
            events,
            noise,
            out,
            rules,
        } => cmd_synth(SynthArgs {
            config: config.as_deref(),
            seed,
            users,
            pois,
            bins_per_poi,
            events,
            noise,
            out: &out,
            rules: rules.as_deref(),
        }),
        Command::Gradcheck {
            d,
            m,
            n,
            users,
            pois,
            hidden_dim,
            encoder,
            variant,
            seed,
            eps,
        } => {
            let encoder: EncoderKind = encoder
                .parse()
                .map_err(|e: strelay::Error| usage(e.to_string()))?;
            let variant: Variant = variant
                .parse()
                .map_err(|e: strelay::Error| usage(e.to_string()))?;
            cmd_gradcheck(ModelCheckConfig {
                d,
                m,
                n,
                users,
                pois,
                hidden_dim,
                encoder,
                variant,
                seed,
                eps,
                ..ModelCheckConfig::default()
            })
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}
