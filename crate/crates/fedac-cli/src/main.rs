//! `fedac` — drive the participation-control protocol and the telemetry
//! fault-analysis pipeline from the command line.
//!
//! Exit codes: 0 success, 1 usage/config error, 2 threshold failure,
//! 3 I/O or data-format error.

use clap::{Args, Parser, Subcommand};
use fedac_core::cost::CostSet;
use fedac_core::faultlab::{
    intersection_report, read_critical_ids, read_fault_queries, run_detection, run_severity, write_detection_csv,
    write_intersection_csv, write_severity_csv, BaselineDetector, Detector, DetectionOptions, RuleReasoner, RuleSet,
    Scheduling,
};
use fedac_core::model::{validate_config, SystemConfig};
use fedac_core::oracle::{solve_for_config, OracleSolution};
use fedac_core::sim::{
    evaluate_diagnostics, export_trace, run_simulation, thin_participants, DiagnosticsOptions, DiagnosticsReport,
};
use fedac_core::telemetry::{
    balance_dataset, drop_zero_variance_columns, label_faults, parse_event_csv, parse_telemetry_csv, read_labeled_csv,
    render_queries, split_train_test, write_labeled_csv, write_query_csv, QueryMode,
};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

const EXIT_USAGE: u8 = 1;
const EXIT_THRESHOLD: u8 = 2;
const EXIT_IO: u8 = 3;

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self { code: EXIT_USAGE, message: message.into() }
    }

    fn threshold(message: impl Into<String>) -> Self {
        Self { code: EXIT_THRESHOLD, message: message.into() }
    }

    fn io(message: impl std::fmt::Display) -> Self {
        Self { code: EXIT_IO, message: message.to_string() }
    }
}

type CmdResult = Result<(), Failure>;

#[derive(Parser)]
#[command(name = "fedac", version, about = "Federated agent/critic participation control and telemetry fault analysis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat key-value configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Override the config's master seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Check a configuration file; exits 0 iff it is valid.
    Validate {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Run the closed-loop simulation plus the centralized oracle and the
    /// convergence diagnostics.
    Simulate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Override the config's max_steps.
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Keep every Nth step in participants.csv (the last step is always
        /// kept).
        #[arg(long, default_value_t = 1)]
        participants_stride: u64,
    },
    /// Solve the centralized program and export the optimal allocations.
    Oracle {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Parse, label, balance, split, and render telemetry into queries.
    Preprocess {
        #[arg(long)]
        telemetry: PathBuf,
        #[arg(long)]
        events: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Train-side fraction of the balanced dataset.
        #[arg(long, default_value_t = 2.0 / 3.0)]
        train_fraction: f64,
        /// Widen fault windows by this many nanoseconds on each side.
        #[arg(long, default_value_t = 0)]
        padding_ns: u64,
    },
    /// Train the baseline detector and run scheduled fault detection.
    Detect {
        /// Directory holding train.csv and test.csv from `preprocess`.
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        chunk_size: usize,
        #[arg(long, default_value_t = 300)]
        epochs: u32,
        #[arg(long, default_value_t = 0.5)]
        learning_rate: f64,
        /// Run without critic re-checks.
        #[arg(long)]
        no_critic: bool,
        /// Degenerate scheduling: every participant active at every step.
        #[arg(long)]
        all_active: bool,
    },
    /// Severity and cause analysis over stage-1 fault queries.
    Severity {
        /// Stage-1 CSV (rows with prediction `Fault` are consumed).
        #[arg(long)]
        faults: PathBuf,
        /// Rule file; defaults to the built-in rule set.
        #[arg(long)]
        rules: Option<PathBuf>,
        /// Critic rule file; defaults to the agent's rules.
        #[arg(long)]
        critic_rules: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Protocol-schedule the work under this config (default: every
        /// participant active).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Intersection report over Critical sets from severity outputs.
    Report {
        /// Stage-2 CSVs; set names are the file stems.
        #[arg(long, num_args = 1.., required = true)]
        verdicts: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Validate { config } => cmd_validate(&config),
        Command::Simulate { config, steps, out, participants_stride } => cmd_simulate(&config, steps, &out, participants_stride),
        Command::Oracle { config, out } => cmd_oracle(&config, &out),
        Command::Preprocess { telemetry, events, out, seed, train_fraction, padding_ns } => {
            cmd_preprocess(&telemetry, &events, &out, seed, train_fraction, padding_ns)
        }
        Command::Detect { data, config, out, chunk_size, epochs, learning_rate, no_critic, all_active } => {
            cmd_detect(&data, &config, &out, chunk_size, epochs, learning_rate, no_critic, all_active)
        }
        Command::Severity { faults, rules, critic_rules, out, config, seed } => {
            cmd_severity(&faults, rules.as_deref(), critic_rules.as_deref(), &out, config.as_deref(), seed)
        }
        Command::Report { verdicts, out } => cmd_report(&verdicts, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("error: {}", failure.message);
            ExitCode::from(failure.code)
        }
    }
}

fn load_config(args: &ConfigArgs) -> Result<(SystemConfig, String), Failure> {
    let text = std::fs::read_to_string(&args.config)
        .map_err(|e| Failure::usage(format!("cannot read config {}: {e}", args.config.display())))?;
    let mut cfg = SystemConfig::from_kv_str(&text).map_err(|e| Failure::usage(format!("config: {e}")))?;
    if let Some(seed) = args.seed {
        cfg.master_seed = seed;
    }
    let violations = validate_config(&cfg);
    if !violations.is_empty() {
        let lines: Vec<String> = violations.iter().map(|v| format!("  {}: {}", v.code, v.message)).collect();
        return Err(Failure::usage(format!("invalid config:\n{}", lines.join("\n"))));
    }
    Ok((cfg, digest_hex(text.as_bytes())))
}

fn digest_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn ensure_dir(dir: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(dir).map_err(|e| Failure::io(format!("cannot create {}: {e}", dir.display())))
}

fn write_file(path: &Path, content: &str) -> Result<(), Failure> {
    std::fs::write(path, content).map_err(|e| Failure::io(format!("cannot write {}: {e}", path.display())))
}

fn write_meta(dir: &Path, command: &str, seed: u64, config_digest: Option<&str>, extra: &[(&str, String)]) -> Result<(), Failure> {
    let mut meta = String::new();
    meta.push_str(&format!("command = {command}\n"));
    meta.push_str(&format!("version = {}\n", env!("CARGO_PKG_VERSION")));
    meta.push_str(&format!("seed = {seed}\n"));
    if let Some(digest) = config_digest {
        meta.push_str(&format!("config_digest = {digest}\n"));
    }
    for (key, value) in extra {
        meta.push_str(&format!("{key} = {value}\n"));
    }
    write_file(&dir.join("run.meta"), &meta)
}

fn cmd_validate(args: &ConfigArgs) -> CmdResult {
    let (cfg, _) = load_config(args)?;
    println!(
        "config valid: {} agents, {} modalities, seed {}",
        cfg.num_agents,
        cfg.modality_count(),
        cfg.master_seed
    );
    Ok(())
}

fn render_diagnostics(report: &DiagnosticsReport) -> String {
    let mut out = String::new();
    for check in &report.checks {
        let status = match check.passed {
            Some(true) => "PASS",
            Some(false) => "FAIL",
            None => "SKIP",
        };
        out.push_str(&format!("{status} {}: {}\n", check.name, check.detail));
    }
    for h in &report.hoeffding {
        out.push_str(&format!(
            "hoeffding k={} eps={} rate={} bound={:.6}\n",
            h.k, h.epsilon, h.empirical_rate, h.bound
        ));
    }
    for m in &report.martingale {
        let worst = m
            .participants
            .iter()
            .map(|b| if b.std_error > 0.0 { (b.bias / b.std_error).abs() } else { 0.0 })
            .fold(0.0f64, f64::max);
        out.push_str(&format!("martingale k={} worst |bias|/se = {worst:.3}\n", m.k));
    }
    out
}

fn oracle_csv(oracle: &OracleSolution) -> String {
    let mut out = String::from("kind,modality,id,optimal\n");
    for (j, block) in oracle.agent_allocations.iter().enumerate() {
        for (i, value) in block.iter().enumerate() {
            out.push_str(&format!("agent,{j},{i},{value}\n"));
        }
    }
    for (j, block) in oracle.critic_allocations.iter().enumerate() {
        for (v, value) in block.iter().enumerate() {
            out.push_str(&format!("critic,{j},{v},{value}\n"));
        }
    }
    out
}

fn solve_oracle(costs: &CostSet, cfg: &SystemConfig) -> Result<OracleSolution, Failure> {
    solve_for_config(costs, cfg, 1e-12, 1_000_000).map_err(|e| Failure::usage(format!("oracle: {e}")))
}

fn cmd_simulate(config: &ConfigArgs, steps: Option<u64>, out: &Path, stride: u64) -> CmdResult {
    let (mut cfg, digest) = load_config(config)?;
    if let Some(steps) = steps {
        cfg.max_steps = steps;
    }
    ensure_dir(out)?;
    let costs = CostSet::sample(&cfg);
    let oracle = solve_oracle(&costs, &cfg)?;
    let mut trace = run_simulation(&cfg, &costs, cfg.max_steps);
    trace.attach_cost_ratio(oracle.objective);
    let report = evaluate_diagnostics(&trace, &oracle, &cfg, &costs, &DiagnosticsOptions::default());

    let thinned = thin_participants(&trace, stride);
    export_trace(&thinned, out).map_err(Failure::io)?;
    write_file(&out.join("coeffs.csv"), &costs.to_csv_string())?;
    write_file(&out.join("oracle.csv"), &oracle_csv(&oracle))?;
    write_file(&out.join("diagnostics.txt"), &render_diagnostics(&report))?;
    write_meta(
        out,
        "simulate",
        cfg.master_seed,
        Some(&digest),
        &[("steps", cfg.max_steps.to_string()), ("participants_stride", stride.to_string())],
    )?;

    print!("{}", render_diagnostics(&report));
    if report.convergence_passed() {
        println!("result: thresholds met over {} steps", cfg.max_steps);
        Ok(())
    } else {
        Err(Failure::threshold("convergence thresholds not met (see diagnostics.txt)"))
    }
}

fn cmd_oracle(config: &ConfigArgs, out: &Path) -> CmdResult {
    let (cfg, digest) = load_config(config)?;
    let costs = CostSet::sample(&cfg);
    let oracle = solve_oracle(&costs, &cfg)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure_dir(parent)?;
    }
    write_file(out, &oracle_csv(&oracle))?;
    if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        write_meta(dir, "oracle", cfg.master_seed, Some(&digest), &[])?;
    }
    println!(
        "objective = {}, iterations = {}, kkt agent = {:?}, kkt critic = {:?}",
        oracle.objective, oracle.iterations, oracle.agent_kkt_residual, oracle.critic_kkt_residual
    );
    if oracle.converged {
        Ok(())
    } else {
        Err(Failure::threshold("solver did not converge within the iteration cap"))
    }
}

fn cmd_preprocess(telemetry: &Path, events: &Path, out: &Path, seed: u64, train_fraction: f64, padding_ns: u64) -> CmdResult {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Failure::usage(format!("train fraction {train_fraction} must lie in (0, 1)")));
    }
    let table = parse_telemetry_csv(telemetry).map_err(Failure::io)?;
    let events = parse_event_csv(events).map_err(Failure::io)?;
    ensure_dir(out)?;

    let (pruned, dropped) = drop_zero_variance_columns(&table);
    let labeled = label_faults(&pruned, &events, padding_ns);
    let balanced = balance_dataset(&labeled, seed).map_err(Failure::io)?;
    let (train, test) = split_train_test(&balanced, train_fraction, seed);
    let queries = render_queries(&balanced, &pruned.columns, QueryMode::FaultDetection);

    write_labeled_csv(&labeled, &out.join("labeled.csv")).map_err(Failure::io)?;
    write_labeled_csv(&balanced, &out.join("balanced.csv")).map_err(Failure::io)?;
    write_labeled_csv(&train, &out.join("train.csv")).map_err(Failure::io)?;
    write_labeled_csv(&test, &out.join("test.csv")).map_err(Failure::io)?;
    write_query_csv(&queries, &out.join("queries.csv")).map_err(Failure::io)?;
    write_file(&out.join("dropped_columns.txt"), &(dropped.join("\n") + "\n"))?;
    write_meta(
        out,
        "preprocess",
        seed,
        None,
        &[
            ("records", labeled.len().to_string()),
            ("faults", labeled.fault_count().to_string()),
            ("balanced", balanced.len().to_string()),
            ("train", train.len().to_string()),
            ("test", test.len().to_string()),
            ("dropped_columns", dropped.len().to_string()),
        ],
    )?;
    println!(
        "records {} | faults {} | balanced {} | train {} | test {} | dropped columns {}",
        labeled.len(),
        labeled.fault_count(),
        balanced.len(),
        train.len(),
        test.len(),
        dropped.len()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_detect(
    data: &Path,
    config: &ConfigArgs,
    out: &Path,
    chunk_size: usize,
    epochs: u32,
    learning_rate: f64,
    no_critic: bool,
    all_active: bool,
) -> CmdResult {
    let (cfg, digest) = load_config(config)?;
    if chunk_size == 0 {
        return Err(Failure::usage("chunk size must be positive"));
    }
    let train = read_labeled_csv(&data.join("train.csv")).map_err(Failure::io)?;
    let test = read_labeled_csv(&data.join("test.csv")).map_err(Failure::io)?;
    ensure_dir(out)?;

    let mut detector = BaselineDetector::new(epochs, learning_rate, cfg.master_seed);
    detector.fit(&train).map_err(Failure::io)?;
    let critic_detector = if no_critic {
        None
    } else {
        let mut critic = BaselineDetector::new(epochs, learning_rate, cfg.master_seed);
        critic.fit(&train).map_err(Failure::io)?;
        Some(critic)
    };

    let options = DetectionOptions {
        chunk_size,
        scheduling: if all_active { Scheduling::AllActive } else { Scheduling::Protocol },
        modality: 0,
        accept_critic_feedback: true,
    };
    let run = run_detection(&test, &detector, critic_detector.as_ref().map(|c| c as &dyn Detector), &cfg, &options)
        .map_err(Failure::io)?;

    let queries = render_queries(&test, &test.table.columns, QueryMode::FaultDetection);
    write_detection_csv(&queries, &run, &out.join("predictions.csv"), false).map_err(Failure::io)?;
    write_detection_csv(&queries, &run, &out.join("faults.csv"), true).map_err(Failure::io)?;
    let predicted_faults = run.predictions.iter().filter(|&&p| p).count();

    let m = &run.metrics;
    let fmt_opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let metrics_csv = format!(
        "metric,value\naccuracy,{}\nprecision,{}\nrecall,{}\nf1,{}\ntp,{}\ntn,{}\nfp,{}\nfn,{}\nflipped,{}\n",
        m.accuracy,
        fmt_opt(m.precision),
        fmt_opt(m.recall),
        fmt_opt(m.f1),
        m.true_positives,
        m.true_negatives,
        m.false_positives,
        m.false_negatives,
        run.flipped.len(),
    );
    write_file(&out.join("metrics.csv"), &metrics_csv)?;
    write_meta(
        out,
        "detect",
        cfg.master_seed,
        Some(&digest),
        &[
            ("chunk_size", chunk_size.to_string()),
            ("scheduling", if all_active { "all_active".into() } else { "protocol".into() }),
            ("critic", (!no_critic).to_string()),
        ],
    )?;
    println!(
        "accuracy {:.4} | precision {} | recall {} | f1 {} | predicted faults {}",
        m.accuracy,
        fmt_opt(m.precision),
        fmt_opt(m.recall),
        fmt_opt(m.f1),
        predicted_faults
    );
    Ok(())
}

fn cmd_severity(
    faults: &Path,
    rules: Option<&Path>,
    critic_rules: Option<&Path>,
    out: &Path,
    config: Option<&Path>,
    seed: Option<u64>,
) -> CmdResult {
    let load_rules = |path: Option<&Path>| -> Result<RuleSet, Failure> {
        match path {
            None => Ok(RuleSet::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Failure::io(format!("cannot read {}: {e}", p.display())))?;
                RuleSet::parse(&text).map_err(Failure::io)
            }
        }
    };
    let agent_rules = load_rules(rules)?;
    let critic_rule_set = match critic_rules {
        Some(p) => load_rules(Some(p))?,
        None => agent_rules.clone(),
    };
    let queries = read_fault_queries(faults).map_err(Failure::io)?;
    if queries.is_empty() {
        return Err(Failure::io(format!("no fault rows in {}", faults.display())));
    }

    let (cfg, scheduling) = match config {
        Some(path) => {
            let (cfg, _) = load_config(&ConfigArgs { config: path.to_path_buf(), seed })?;
            (cfg, Scheduling::Protocol)
        }
        None => (SystemConfig::paper_preset(seed.unwrap_or(0), 1000), Scheduling::AllActive),
    };

    let agent = RuleReasoner { rules: agent_rules };
    let critic = RuleReasoner { rules: critic_rule_set };
    let (outcomes, log) = run_severity(&queries, &agent, &critic, &cfg, scheduling, 0).map_err(Failure::io)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure_dir(parent)?;
    }
    write_severity_csv(&outcomes, out).map_err(Failure::io)?;
    let critical = outcomes.iter().filter(|o| o.verdict.severity == fedac_core::faultlab::Severity::Critical).count();
    let revised = log.iter().filter(|f| f.revised).count();
    println!("{} queries | {} Critical | {} revised", outcomes.len(), critical, revised);
    Ok(())
}

fn cmd_report(verdicts: &[PathBuf], out: &Path) -> CmdResult {
    let mut sets = Vec::new();
    for path in verdicts {
        let name = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Failure::usage(format!("cannot derive a set name from {}", path.display())))?;
        let ids = read_critical_ids(path).map_err(Failure::io)?;
        sets.push((name.to_string(), ids));
    }
    let rows = intersection_report(&sets).map_err(Failure::usage_from)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure_dir(parent)?;
    }
    write_intersection_csv(&rows, out).map_err(Failure::io)?;
    for (combination, count) in &rows {
        println!("{combination},{count}");
    }
    Ok(())
}

impl Failure {
    fn usage_from(e: impl std::fmt::Display) -> Self {
        Self::usage(e.to_string())
    }
}
