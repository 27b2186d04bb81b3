//! `speclab` command line.
//!
//! Exit codes: 0 success, 1 negative experiment result, 2 usage or
//! configuration error.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{ConfigError, LabConfig};
use crate::gadgets::{build_gadget, GadgetSpec};
use crate::mitigations::{self, apply_lenient, MitigationSet};
use crate::pipeline::Variant;
use crate::speconnector::{covert_channel_run, ProtocolError, Schedule, Session};

pub const EXIT_OK: i32 = 0;
pub const EXIT_NEGATIVE: i32 = 1;
pub const EXIT_ERROR: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "speclab", version, about = "Deterministic transient-execution lab")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Recover a secret through a gadget and the Flush+Reload receiver.
    Leak(LeakArgs),
    /// Evaluate every variant against every mitigation.
    Matrix(MatrixArgs),
    /// Send a byte pattern over the cache covert channel.
    Covert(CovertArgs),
    /// Execution trace of one exploit invocation.
    Trace(TraceArgs),
    /// Print a gadget's assembly.
    DumpGadget(DumpArgs),
    /// Leakage as a function of the speculation window.
    Sweep(SweepArgs),
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Write the report here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Override `pipeline.window`.
    #[arg(long)]
    pub window: Option<usize>,
    /// Override `attack.training`.
    #[arg(long)]
    pub training: Option<usize>,
    /// Override `layout.aslr_seed`.
    #[arg(long)]
    pub aslr_seed: Option<u64>,
    /// Override `cache.jitter_seed`.
    #[arg(long)]
    pub jitter_seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct LeakArgs {
    #[arg(long, default_value = "pht", value_parser = parse_variant)]
    pub variant: Variant,
    /// Secret text, or hex bytes with a `0x` prefix.
    #[arg(long)]
    pub secret: Option<String>,
    #[arg(long, default_value = "none", value_parser = parse_set)]
    pub mitigation: MitigationSet,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Format {
    Json,
    Csv,
}

#[derive(Debug, Args)]
pub struct MatrixArgs {
    #[arg(long, value_enum, default_value = "json")]
    pub format: Format,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct CovertArgs {
    /// Pattern text, or hex bytes with a `0x` prefix.
    #[arg(long, conflicts_with = "random")]
    pub pattern: Option<String>,
    /// Send this many random bytes instead.
    #[arg(long)]
    pub random: Option<usize>,
    /// Seed for `--random`.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Keep the sender idle; the receiver should see nothing.
    #[arg(long)]
    pub no_victim: bool,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct TraceArgs {
    #[arg(long, value_parser = parse_variant)]
    pub variant: Variant,
    #[arg(long, default_value = "none", value_parser = parse_set)]
    pub mitigation: MitigationSet,
    /// Secret byte targeted by the exploit invocation.
    #[arg(long, default_value_t = 0)]
    pub byte: usize,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct DumpArgs {
    #[arg(long, value_parser = parse_variant)]
    pub variant: Variant,
    #[arg(long, default_value = "none", value_parser = parse_set)]
    pub mitigation: MitigationSet,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long, default_value = "pht", value_parser = parse_variant)]
    pub variant: Variant,
    #[arg(long, default_value = "none", value_parser = parse_set)]
    pub mitigation: MitigationSet,
    /// Largest window tried; the sweep covers 0..=max.
    #[arg(long, default_value_t = 64)]
    pub max_window: usize,
    #[arg(long, value_enum, default_value = "json")]
    pub format: Format,
    #[command(flatten)]
    pub common: Common,
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse()
}

fn parse_set(s: &str) -> Result<MitigationSet, String> {
    s.parse().map_err(|e: mitigations::MitigationError| e.to_string())
}

/// Text, or hex with a `0x` prefix.
pub fn parse_bytes(s: &str) -> Result<Vec<u8>, String> {
    let Some(hex) = s.strip_prefix("0x") else { return Ok(s.as_bytes().to_vec()) };
    if hex.len() % 2 != 0 {
        return Err(format!("odd number of hex digits in `{s}`"));
    }
    (0..hex.len())
        .step_by(2)
        .map(|i| u8::from_str_radix(&hex[i..i + 2], 16).map_err(|_| format!("bad hex byte `{}`", &hex[i..i + 2])))
        .collect()
}

#[derive(Debug, Serialize)]
pub struct ReportEnvelope<T: Serialize> {
    pub tool: &'static str,
    pub version: &'static str,
    pub kind: &'static str,
    pub timestamp: String,
    pub config: LabConfig,
    pub payload: T,
}

impl<T: Serialize> ReportEnvelope<T> {
    pub fn new(kind: &'static str, config: &LabConfig, payload: T) -> Self {
        ReportEnvelope {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            kind,
            timestamp: chrono::Utc::now().to_rfc3339(),
            config: config.clone(),
            payload,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports serialize") + "\n"
    }
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error("{0}")]
    Usage(String),
    #[error("cannot write {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

fn load_config(c: &Common) -> Result<LabConfig, ConfigError> {
    let mut cfg = match &c.config {
        Some(path) => LabConfig::load(path)?,
        None => LabConfig::default(),
    };
    if let Some(w) = c.window {
        cfg.pipeline.window = w;
    }
    if let Some(k) = c.training {
        cfg.attack.training = k;
    }
    if let Some(seed) = c.aslr_seed {
        cfg.layout.aslr_seed = Some(seed);
    }
    if let Some(seed) = c.jitter_seed {
        cfg.cache.jitter_seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn emit(out: Option<&Path>, text: &str) -> Result<(), CliError> {
    match out {
        Some(path) => std::fs::write(path, text).map_err(|source| CliError::Io { path: path.display().to_string(), source }),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout
                .write_all(text.as_bytes())
                .and_then(|_| stdout.flush())
                .map_err(|source| CliError::Io { path: "stdout".into(), source })
        }
    }
}

fn leak(args: &LeakArgs) -> Result<i32, CliError> {
    let mut cfg = load_config(&args.common)?;
    let secret = match &args.secret {
        Some(s) => {
            let bytes = parse_bytes(s).map_err(CliError::Usage)?;
            cfg.attack.secret = String::from_utf8_lossy(&bytes).into_owned();
            bytes
        }
        None => cfg.attack.secret.clone().into_bytes(),
    };
    leak_bytes(args, &cfg, &secret)
}

fn leak_bytes(args: &LeakArgs, cfg: &LabConfig, secret: &[u8]) -> Result<i32, CliError> {
    let spec = GadgetSpec { training: cfg.attack.training, ..GadgetSpec::new(args.variant, cfg.layout(secret)?) };
    let gadget = build_gadget(&spec).map_err(ProtocolError::from)?;
    let program = apply_lenient(&gadget.program, args.mitigation).map_err(|e| CliError::Usage(e.to_string()))?;
    let mut session = Session::new(gadget.with_program(program), &mitigations::adjust_lab(cfg, args.mitigation))?;
    session.connect()?;
    let report = session.recover_secret(secret.len(), Schedule::from_config(cfg))?;
    let correct = report.correct(secret);
    eprintln!("{}: recovered {correct}/{} bytes: {:?}", args.variant, secret.len(), report.recovered_text);
    emit(args.common.out.as_deref(), &ReportEnvelope::new("leak", cfg, &report).to_json())?;
    Ok(if correct == secret.len() { EXIT_OK } else { EXIT_NEGATIVE })
}

fn matrix(args: &MatrixArgs) -> Result<i32, CliError> {
    let cfg = load_config(&args.common)?;
    let report = mitigations::full_matrix(&cfg)?;
    let text = match args.format {
        Format::Csv => report.to_csv(),
        Format::Json => ReportEnvelope::new("matrix", &cfg, &report).to_json(),
    };
    emit(args.common.out.as_deref(), &text)?;
    let mismatches = report.mismatches();
    for e in &mismatches {
        eprintln!("unexpected: {} under {} leaked={}", e.variant, e.mitigation, e.leaked);
    }
    Ok(if mismatches.is_empty() { EXIT_OK } else { EXIT_NEGATIVE })
}

fn covert(args: &CovertArgs) -> Result<i32, CliError> {
    let cfg = load_config(&args.common)?;
    let pattern = match (&args.pattern, args.random) {
        (Some(p), _) => parse_bytes(p).map_err(CliError::Usage)?,
        (None, Some(n)) => {
            let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
            (0..n).map(|_| rng.gen()).collect()
        }
        (None, None) => return Err(CliError::Usage("one of --pattern or --random is required".into())),
    };
    let result = covert_channel_run(&pattern, &cfg, !args.no_victim).map_err(|e| match e {
        ProtocolError::Gadget(g) => CliError::Usage(g.to_string()),
        e => e.into(),
    })?;
    eprintln!("covert: {} of {} bytes, exact={}", result.reconstructed.len(), pattern.len(), result.exact);
    emit(args.common.out.as_deref(), &ReportEnvelope::new("covert", &cfg, &result).to_json())?;
    Ok(if result.exact { EXIT_OK } else { EXIT_NEGATIVE })
}

fn trace(args: &TraceArgs) -> Result<i32, CliError> {
    let cfg = load_config(&args.common)?;
    let secret = cfg.attack.secret.as_bytes();
    if args.byte >= secret.len().max(1) {
        return Err(CliError::Usage(format!("--byte {} is past the {}-byte secret", args.byte, secret.len())));
    }
    let spec = GadgetSpec { training: cfg.attack.training, ..GadgetSpec::new(args.variant, cfg.layout(secret)?) };
    let gadget = build_gadget(&spec).map_err(ProtocolError::from)?;
    let program = apply_lenient(&gadget.program, args.mitigation).map_err(|e| CliError::Usage(e.to_string()))?;
    let gadget = gadget.with_program(program);
    let mut session = Session::new(gadget.clone(), &mitigations::adjust_lab(&cfg, args.mitigation))?;
    for j in 0..cfg.attack.training {
        session.victim.invoke(&mut session.uarch, &gadget.training_inputs(j))?;
    }
    if let Some(addr) = gadget.condition_addr {
        session.uarch.flush(addr);
    }
    let trace = session.victim.invoke(&mut session.uarch, &gadget.exploit_inputs(args.byte))?;
    eprintln!("trace: {} frames, {} squashed, {} cycles", trace.frames.len(), trace.squashes().count(), trace.cycles);
    emit(args.common.out.as_deref(), &ReportEnvelope::new("trace", &cfg, &trace).to_json())?;
    Ok(EXIT_OK)
}

fn dump(args: &DumpArgs) -> Result<i32, CliError> {
    let cfg = load_config(&args.common)?;
    let spec = GadgetSpec { training: cfg.attack.training, ..GadgetSpec::new(args.variant, cfg.layout(cfg.attack.secret.as_bytes())?) };
    let gadget = build_gadget(&spec).map_err(ProtocolError::from)?;
    let text = if args.mitigation == MitigationSet::NONE {
        gadget.source
    } else {
        let program = apply_lenient(&gadget.program, args.mitigation).map_err(|e| CliError::Usage(e.to_string()))?;
        gadget.with_program(program).source
    };
    emit(args.common.out.as_deref(), &text)?;
    Ok(EXIT_OK)
}

fn sweep(args: &SweepArgs) -> Result<i32, CliError> {
    let cfg = load_config(&args.common)?;
    let report = mitigations::window_sweep(args.variant, args.mitigation, &cfg, 0..=args.max_window)?;
    let text = match args.format {
        Format::Csv => {
            let mut s = String::from("window,leaked,bytes_recovered\n");
            for p in &report.points {
                s += &format!("{},{},{}\n", p.window, p.leaked, p.bytes_recovered);
            }
            s
        }
        Format::Json => ReportEnvelope::new("sweep", &cfg, &report).to_json(),
    };
    emit(args.common.out.as_deref(), &text)?;
    match report.w_star {
        Some(w) => eprintln!("{}: leaks iff window >= {w}", report.variant),
        None => eprintln!("{}: no monotone threshold in 0..={}", report.variant, args.max_window),
    }
    Ok(if report.w_star.is_some() { EXIT_OK } else { EXIT_NEGATIVE })
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_ERROR } else { EXIT_OK };
        }
    };
    let result = match &cli.command {
        Command::Leak(a) => leak(a),
        Command::Matrix(a) => matrix(a),
        Command::Covert(a) => covert(a),
        Command::Trace(a) => trace(a),
        Command::DumpGadget(a) => dump(a),
        Command::Sweep(a) => sweep(a),
    };
    result.unwrap_or_else(|e| {
        eprintln!("speclab: {e}");
        EXIT_ERROR
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bytes_from_text_and_hex() {
        assert_eq!(parse_bytes("AB").unwrap(), b"AB");
        assert_eq!(parse_bytes("0x00ff41").unwrap(), vec![0, 255, 65]);
        assert!(parse_bytes("0x0").is_err());
        assert!(parse_bytes("0xzz").is_err());
    }

    #[test]
    fn flags_override_config() {
        let c = Common { config: None, out: None, window: Some(3), training: Some(2), aslr_seed: Some(9), jitter_seed: None };
        let cfg = load_config(&c).unwrap();
        assert_eq!((cfg.pipeline.window, cfg.attack.training, cfg.layout.aslr_seed), (3, 2, Some(9)));
        let bad = Common { training: Some(0), ..c };
        assert!(load_config(&bad).is_err());
    }

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(run(["speclab", "dump-gadget", "--variant", "nope"]), EXIT_ERROR);
        assert_eq!(run(["speclab", "bogus"]), EXIT_ERROR);
        assert_eq!(run(["speclab", "covert"]), EXIT_ERROR);
    }
}
