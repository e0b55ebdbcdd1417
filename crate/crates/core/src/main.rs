use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow_free::{fail, CliError};
use clap::{Args, Parser, Subcommand, ValueEnum};
use h2p_core::baseline::{
    screen_h2ps, simulate_baseline, BaselineConfig, PerceptronConfig, SimStats, TageLiteConfig,
};
use h2p_core::cnn::{load_params, save_params, Mode};
use h2p_core::deploy::{deserialize_helper, serialize_helper, DeployedHelper};
use h2p_core::harness::{
    compute_mpki, emit_report, format_summary, report_from_json, run_crossval,
    simulate_with_helpers, train_helper, ExperimentConfig, HelperModel, ReportFormat, WorkloadSpec,
};
use h2p_core::trace::{
    generate_listing1_trace, generate_varposition_trace, read_trace, write_trace, SynthConfig,
    Trace, TraceFormat,
};
use serde_json::json;

mod anyhow_free {
    use std::fmt;

    /// Failure (exit 1) or empty result (exit 2).
    pub enum CliError {
        Fail(String),
        Empty(String),
    }

    impl<E: std::error::Error> From<E> for CliError {
        fn from(e: E) -> Self {
            CliError::Fail(e.to_string())
        }
    }

    impl fmt::Display for CliError {
        fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
            match self {
                CliError::Fail(m) | CliError::Empty(m) => f.write_str(m),
            }
        }
    }

    pub fn fail<T>(msg: impl Into<String>) -> Result<T, CliError> {
        Err(CliError::Fail(msg.into()))
    }
}

#[derive(Parser)]
#[command(
    name = "h2p",
    version,
    about = "CNN helper predictors for hard-to-predict branches"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long, global = true, value_enum)]
    baseline: Option<BaselineArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Fp,
    Tp,
    Both,
}

#[derive(Clone, Copy, ValueEnum)]
enum BaselineArg {
    Tage,
    Perceptron,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Binary,
    Text,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic traces (the config's synthetic workloads, or Listing-1
    /// traces from --seed).
    Gen {
        #[arg(long, default_value_t = 100_000)]
        calls: usize,
        #[arg(long, default_value_t = 1)]
        count: u64,
        /// Generate the variable-position workload with this spread.
        #[arg(long)]
        spread: Option<u32>,
        #[arg(long, value_enum, default_value = "binary")]
        format: FormatArg,
    },
    /// Run the baseline over a trace and write per-branch statistics.
    Sim {
        #[arg(long)]
        trace: PathBuf,
    },
    /// List the H2Ps of a trace.
    Screen {
        #[arg(long)]
        trace: PathBuf,
    },
    /// Train helpers for the given ips, or for every screened H2P.
    Train {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long, value_parser = parse_ip)]
        ip: Vec<u64>,
    },
    /// Convert a ternary model into a helper blob.
    Deploy {
        #[arg(long)]
        model: PathBuf,
    },
    /// Run a trace with one helper installed next to the baseline.
    Eval {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long, value_parser = parse_ip)]
        ip: u64,
        /// Model file (JSON) or helper blob.
        #[arg(long)]
        helper: PathBuf,
    },
    /// Cross-workload evaluation over the config's workloads.
    Crossval,
    /// Re-render the CSV and summary of a saved report.
    Report {
        #[arg(long)]
        input: PathBuf,
    },
}

fn parse_ip(s: &str) -> Result<u64, String> {
    let t = s.trim();
    let r = match t.strip_prefix("0x").or_else(|| t.strip_prefix("0X")) {
        Some(hex) => u64::from_str_radix(hex, 16),
        None => t.parse(),
    };
    r.map_err(|e| format!("bad ip `{s}`: {e}"))
}

impl Common {
    fn experiment(&self) -> Result<ExperimentConfig, CliError> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::from_path(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.output_dir = o.clone();
        }
        if let Some(m) = self.mode {
            cfg.modes = match m {
                ModeArg::Fp => vec![Mode::Fp],
                ModeArg::Tp => vec![Mode::Tp],
                ModeArg::Both => vec![Mode::Fp, Mode::Tp],
            };
        }
        match (self.baseline, &cfg.baseline) {
            (Some(BaselineArg::Tage), BaselineConfig::Perceptron(_)) => {
                cfg.baseline = BaselineConfig::Tage(TageLiteConfig::default())
            }
            (Some(BaselineArg::Perceptron), BaselineConfig::Tage(_)) => {
                cfg.baseline = BaselineConfig::Perceptron(PerceptronConfig::default())
            }
            _ => {}
        }
        Ok(cfg)
    }
}

fn out_dir(cfg: &ExperimentConfig) -> Result<PathBuf, CliError> {
    fs::create_dir_all(&cfg.output_dir)?;
    Ok(cfg.output_dir.clone())
}

fn write(path: &Path, body: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, body).map_err(|e| CliError::Fail(format!("{}: {e}", path.display())))
}

fn baseline_stats(cfg: &ExperimentConfig, trace: &Trace) -> Result<SimStats, CliError> {
    let mut predictor = cfg.baseline.build()?;
    Ok(simulate_baseline(trace, predictor.as_mut())?)
}

fn cmd_gen(
    cfg: &ExperimentConfig,
    calls: usize,
    count: u64,
    spread: Option<u32>,
    format: FormatArg,
) -> Result<(), CliError> {
    let dir = out_dir(cfg)?;
    let (fmt, ext) = match format {
        FormatArg::Binary => (TraceFormat::Binary, "brt"),
        FormatArg::Text => (TraceFormat::Text, "txt"),
    };
    let mut traces = Vec::new();
    let synthetic: Vec<&WorkloadSpec> = cfg
        .workloads
        .iter()
        .filter(|w| !matches!(w, WorkloadSpec::Trace { .. }))
        .collect();
    if !synthetic.is_empty() {
        for (k, w) in synthetic.into_iter().enumerate() {
            let t = match w {
                WorkloadSpec::Synth(s) => generate_listing1_trace(s)?,
                WorkloadSpec::Varposition {
                    position_spread,
                    synth,
                } => {
                    generate_varposition_trace(synth, *position_spread, cfg.encoder.history_len)?
                        .trace
                }
                WorkloadSpec::Trace { .. } => unreachable!(),
            };
            traces.push((format!("w{k}-{}", t.meta.workload_id), t));
        }
    } else {
        for k in 0..count {
            let synth = SynthConfig {
                num_calls: calls,
                seed: cfg.seed + k,
                ..Default::default()
            };
            let t = match spread {
                Some(s) => generate_varposition_trace(&synth, s, cfg.encoder.history_len)?.trace,
                None => generate_listing1_trace(&synth)?,
            };
            traces.push((t.meta.workload_id.clone(), t));
        }
    }
    for (name, t) in traces {
        let path = dir.join(format!("{name}.{ext}"));
        write_trace(&t, &path, fmt)?;
        println!("{}\t{} records", path.display(), t.len());
    }
    Ok(())
}

fn cmd_sim(cfg: &ExperimentConfig, trace_path: &Path) -> Result<(), CliError> {
    let trace = read_trace(trace_path)?;
    let stats = baseline_stats(cfg, &trace)?;
    let dir = out_dir(cfg)?;
    write(&dir.join("sim.csv"), stats.to_csv())?;
    let mpki = compute_mpki(&stats, trace.meta.instruction_count).ok();
    println!(
        "{} predictions, {} mispredictions, MPKI {}",
        stats.total_predictions(),
        stats.total_mispredictions(),
        mpki.map_or_else(|| "n/a".into(), |m| format!("{m:.3}"))
    );
    Ok(())
}

fn cmd_screen(cfg: &ExperimentConfig, trace_path: &Path) -> Result<(), CliError> {
    let trace = read_trace(trace_path)?;
    let stats = baseline_stats(cfg, &trace)?;
    let h2ps = screen_h2ps(&stats, trace.meta.instruction_count, &cfg.screen)?;
    let list: Vec<_> = h2ps
        .iter()
        .map(|&ip| {
            let s = stats.get(ip);
            println!("{ip:#x}\t{:.4}\t{}", s.accuracy(), s.mispredictions);
            json!({ "ip": ip, "predictions": s.predictions, "mispredictions": s.mispredictions, "accuracy": s.accuracy() })
        })
        .collect();
    let dir = out_dir(cfg)?;
    write(&dir.join("h2ps.json"), serde_json::to_string_pretty(&list)?)?;
    if h2ps.is_empty() {
        return Err(CliError::Empty("no H2Ps found".into()));
    }
    Ok(())
}

fn cmd_train(cfg: &ExperimentConfig, trace_path: &Path, ips: &[u64]) -> Result<(), CliError> {
    let trace = read_trace(trace_path)?;
    let ips = if ips.is_empty() {
        let stats = baseline_stats(cfg, &trace)?;
        screen_h2ps(&stats, trace.meta.instruction_count, &cfg.screen)?
    } else {
        ips.to_vec()
    };
    if ips.is_empty() {
        return Err(CliError::Empty("no H2Ps to train".into()));
    }
    let dir = out_dir(cfg)?;
    for &ip in &ips {
        for &mode in &cfg.modes {
            let seed = cfg.seed ^ ip;
            let h = train_helper(&trace, ip, mode, &cfg.encoder, &cfg.train, seed)?;
            let path = dir.join(format!("model-{ip:x}-{}.json", mode_key(mode)));
            save_params(&h.params, &path)?;
            println!(
                "{}\t{ip:#x}\t{}\ttrain accuracy {:.4}",
                path.display(),
                mode.label(),
                h.train_accuracy
            );
        }
    }
    Ok(())
}

fn mode_key(mode: Mode) -> &'static str {
    match mode {
        Mode::Fp => "fp",
        Mode::Tp => "tp",
    }
}

fn cmd_deploy(cfg: &ExperimentConfig, model: &Path) -> Result<(), CliError> {
    let params = load_params(model)?;
    let HelperModel::Tp(helper) = HelperModel::from_params(&params)? else {
        return fail("only ternary (tp) models can be deployed");
    };
    let dir = out_dir(cfg)?;
    let stem = model
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("helper");
    let path = dir.join(format!("{stem}.cnnh"));
    write(&path, serialize_helper(&helper)?)?;
    println!(
        "{}\tthreshold {}\tstorage {} bytes",
        path.display(),
        helper.threshold(),
        helper.storage_bytes()
    );
    Ok(())
}

fn load_helper(path: &Path) -> Result<HelperModel, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::Fail(format!("{}: {e}", path.display())))?;
    if bytes.starts_with(h2p_core::deploy::BLOB_MAGIC) {
        let h: DeployedHelper = deserialize_helper(&bytes)?;
        return Ok(HelperModel::Tp(h));
    }
    Ok(HelperModel::from_params(&load_params(path)?)?)
}

fn cmd_eval(
    cfg: &ExperimentConfig,
    trace_path: &Path,
    ip: u64,
    helper_path: &Path,
) -> Result<(), CliError> {
    let trace = read_trace(trace_path)?;
    let model = load_helper(helper_path)?;
    let encoder = h2p_core::encoder::EncoderConfig {
        p: model.p(),
        history_len: model.history_len(),
    };
    let before = baseline_stats(cfg, &trace)?;
    let after = simulate_with_helpers(&trace, &cfg.baseline, &encoder, &[(ip, &model)])?;
    let (b, a) = (before.get(ip), after.get(ip));
    if b.predictions == 0 {
        return Err(CliError::Empty(format!(
            "ip {ip:#x} does not occur in the trace"
        )));
    }
    let reduction = (b.mispredictions > 0)
        .then(|| (b.mispredictions as f64 - a.mispredictions as f64) / b.mispredictions as f64);
    let result = json!({
        "ip": ip,
        "mode": mode_key(model.mode()),
        "occurrences": b.predictions,
        "baseline": { "mispredictions": b.mispredictions, "accuracy": b.accuracy() },
        "with_helper": { "mispredictions": a.mispredictions, "accuracy": a.accuracy() },
        "reduction": reduction,
        "mpki_baseline": compute_mpki(&before, trace.meta.instruction_count).ok(),
        "mpki_with_helper": compute_mpki(&after, trace.meta.instruction_count).ok(),
    });
    let text = serde_json::to_string_pretty(&result)?;
    write(&out_dir(cfg)?.join("eval.json"), &text)?;
    println!("{text}");
    Ok(())
}

const ALL_FORMATS: [ReportFormat; 3] =
    [ReportFormat::Json, ReportFormat::Csv, ReportFormat::Summary];

fn cmd_crossval(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let report = run_crossval(cfg)?;
    emit_report(&report, &cfg.output_dir, &ALL_FORMATS)?;
    print!("{}", format_summary(&report));
    if report.is_empty() {
        return Err(CliError::Empty("no helper could be evaluated".into()));
    }
    Ok(())
}

fn cmd_report(common: &Common, input: &Path) -> Result<(), CliError> {
    let text = fs::read_to_string(input)
        .map_err(|e| CliError::Fail(format!("{}: {e}", input.display())))?;
    let report = report_from_json(&text)?;
    let dir = match &common.out {
        Some(d) => d.clone(),
        None => input.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    emit_report(&report, &dir, &[ReportFormat::Csv, ReportFormat::Summary])?;
    print!("{}", format_summary(&report));
    if report.is_empty() {
        return Err(CliError::Empty("report has no evaluated rows".into()));
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = cli.common.experiment()?;
    match &cli.command {
        Command::Gen {
            calls,
            count,
            spread,
            format,
        } => cmd_gen(&cfg, *calls, *count, *spread, *format),
        Command::Sim { trace } => cmd_sim(&cfg, trace),
        Command::Screen { trace } => cmd_screen(&cfg, trace),
        Command::Train { trace, ip } => cmd_train(&cfg, trace, ip),
        Command::Deploy { model } => cmd_deploy(&cfg, model),
        Command::Eval { trace, ip, helper } => cmd_eval(&cfg, trace, *ip, helper),
        Command::Crossval => cmd_crossval(&cfg),
        Command::Report { input } => cmd_report(&cli.common, input),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Empty(msg)) => {
            eprintln!("warning: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Fail(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
