use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use droop_core::criteria::{self, CriterionResult, SubsetPolicy};
use droop_core::equilibrium::Equilibrium;
use droop_core::linearization::{stability_of, StabilityReport};
use droop_core::parallel::{self, Execution};
use droop_core::simulator::{self, Scenario};
use droop_core::sweep::{self, AuditReport, SweepSpec};
use droop_core::systems::SystemDef;

const EXIT_INVALID_CONFIG: u8 = 2;
const EXIT_CELL_FAILURES: u8 = 3;

#[derive(Parser)]
#[command(
    name = "droop",
    version,
    about = "Stability analysis of droop-controlled inverter networks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output file (stdout when omitted).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    format: Option<Format>,
    /// Worker threads for sweeps (all cores when omitted).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Seed of the randomized subset search of the instability certificate.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Equilibria of a system.
    FixedPoint,
    /// Eigenvalue stability of every equilibrium.
    Stability,
    /// Explicit stability criteria at every equilibrium.
    Criteria,
    /// Time-domain simulation of a scenario with parameter events.
    Simulate,
    /// Two-parameter stability map.
    Sweep,
    /// Boundary of the stable region of a sweep.
    Separatrix,
    /// Compare sufficient criteria with eigenvalue verdicts over a sweep.
    Audit {
        /// Criteria to audit (default: cor2, cor4, cor5, lemma2_I, lemma2_II).
        #[arg(long = "criterion")]
        criteria: Vec<String>,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
}

enum Failure {
    Config(String),
    Run(String),
    /// The reader of stdout went away; not an error for a filter-style tool.
    Closed,
}

impl From<droop_core::Error> for Failure {
    fn from(e: droop_core::Error) -> Self {
        use droop_core::Error as E;
        match e {
            E::InvalidConfig(_) | E::InvalidPath(_) | E::InvalidParams(_) | E::InvalidNetwork(_) | E::Json(_) => {
                Failure::Config(e.to_string())
            }
            E::Io(e) => e.into(),
            E::Csv(e) => e.into(),
            other => Failure::Run(other.to_string()),
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        match e.kind() {
            io::ErrorKind::BrokenPipe => Failure::Closed,
            _ => Failure::Run(e.to_string()),
        }
    }
}

impl From<csv::Error> for Failure {
    fn from(e: csv::Error) -> Self {
        match e.kind() {
            csv::ErrorKind::Io(io) if io.kind() == io::ErrorKind::BrokenPipe => Failure::Closed,
            _ => Failure::Run(e.to_string()),
        }
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        match e.io_error_kind() {
            Some(io::ErrorKind::BrokenPipe) => Failure::Closed,
            _ => Failure::Run(e.to_string()),
        }
    }
}

/// A system with optional criterion settings.
#[derive(Deserialize)]
struct SystemConfig {
    #[serde(flatten)]
    system: SystemDef,
    #[serde(default)]
    subsets: SubsetPolicy,
}

#[derive(Serialize)]
struct EquilibriumReport {
    equilibrium: Equilibrium,
    #[serde(skip_serializing_if = "Option::is_none")]
    stability: Option<StabilityReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    criteria: Option<Vec<CriterionResult>>,
}

fn read_config<T: DeserializeOwned>(path: Option<&Path>) -> Result<T, Failure> {
    let path = path.ok_or_else(|| Failure::Config("--config <file> is required".into()))?;
    let text =
        std::fs::read_to_string(path).map_err(|e| Failure::Config(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>, Failure> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn write_json<T: Serialize>(out: &mut dyn Write, value: &T) -> Result<(), Failure> {
    serde_json::to_writer_pretty(&mut *out, value)?;
    writeln!(out)?;
    Ok(())
}

fn equilibrium_reports(
    cfg: &SystemConfig,
    stability: bool,
    with_criteria: bool,
) -> Result<Vec<EquilibriumReport>, Failure> {
    let sys = cfg.system.realize()?;
    let mut reports = Vec::new();
    for eq in sys.equilibria()? {
        let stability = stability
            .then(|| stability_of(&eq, &sys.params, &sys.net))
            .transpose()?;
        let criteria = with_criteria
            .then(|| criteria::evaluate_all(&eq, &sys.params, &sys.net, &cfg.subsets))
            .transpose()?;
        reports.push(EquilibriumReport {
            equilibrium: eq,
            stability,
            criteria,
        });
    }
    Ok(reports)
}

fn write_equilibria_csv(out: &mut dyn Write, reports: &[EquilibriumReport]) -> Result<(), Failure> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["equilibrium", "node", "delta", "omega", "E"])?;
    for (k, r) in reports.iter().enumerate() {
        let s = &r.equilibrium.state;
        for j in 0..s.delta.len() {
            w.write_record([
                k.to_string(),
                j.to_string(),
                s.delta[j].to_string(),
                s.omega[j].to_string(),
                s.e[j].to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn write_stability_csv(out: &mut dyn Write, reports: &[EquilibriumReport]) -> Result<(), Failure> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["equilibrium", "verdict", "dominant_re", "dominant_im"])?;
    for (k, r) in reports.iter().enumerate() {
        let s = r.stability.as_ref().expect("stability requested");
        let verdict = serde_json::to_value(s.verdict)?;
        w.write_record([
            k.to_string(),
            verdict.as_str().unwrap_or_default().to_string(),
            s.dominant.re.to_string(),
            s.dominant.im.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn write_criteria_csv(out: &mut dyn Write, reports: &[EquilibriumReport]) -> Result<(), Failure> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["equilibrium", "criterion", "verdict", "margin"])?;
    for (k, r) in reports.iter().enumerate() {
        for c in r.criteria.as_deref().unwrap_or_default() {
            w.write_record([
                k.to_string(),
                c.name.clone(),
                c.verdict.code().to_string(),
                c.margin.map(|m| m.to_string()).unwrap_or_default(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn write_audit_csv(out: &mut dyn Write, reports: &[AuditReport]) -> Result<(), Failure> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["criterion", "cells", "target", "certified", "violations", "coverage"])?;
    for r in reports {
        w.write_record([
            r.criterion.clone(),
            r.cells.to_string(),
            r.target.to_string(),
            r.certified.to_string(),
            r.violations.to_string(),
            r.coverage.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn sweep_spec(cli: &Cli) -> Result<SweepSpec, Failure> {
    let mut spec: SweepSpec = read_config(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        spec.subsets.seed = seed;
    }
    spec.validate()?;
    Ok(spec)
}

fn run(cli: &Cli) -> Result<u8, Failure> {
    let format = cli.format;
    let mut status = 0;
    match &cli.command {
        Command::FixedPoint | Command::Stability | Command::Criteria => {
            let mut cfg: SystemConfig = read_config(cli.config.as_deref())?;
            if let Some(seed) = cli.seed {
                cfg.subsets.seed = seed;
            }
            let stability = !matches!(cli.command, Command::FixedPoint);
            let with_criteria = matches!(cli.command, Command::Criteria);
            let reports = equilibrium_reports(&cfg, stability, with_criteria)?;
            let mut out = output(cli.out.as_deref())?;
            match (format.unwrap_or(Format::Json), &cli.command) {
                (Format::Json, _) => write_json(&mut out, &reports)?,
                (Format::Csv, Command::FixedPoint) => write_equilibria_csv(&mut out, &reports)?,
                (Format::Csv, Command::Stability) => write_stability_csv(&mut out, &reports)?,
                (Format::Csv, _) => write_criteria_csv(&mut out, &reports)?,
            }
            out.flush()?;
        }
        Command::Simulate => {
            let scenario: Scenario = read_config(cli.config.as_deref())?;
            scenario.schedule().validate()?;
            let traj = scenario.run()?;
            let mut out = output(cli.out.as_deref())?;
            match format.unwrap_or(Format::Csv) {
                Format::Csv => simulator::write_csv(&traj, &mut out)?,
                Format::Json => write_json(&mut out, &traj)?,
            }
            out.flush()?;
            for s in &traj.segments {
                let c = serde_json::to_value(s.classification)?;
                eprintln!(
                    "segment [{}, {}]: {}",
                    s.t_start,
                    s.t_end,
                    c.as_str().unwrap_or_default()
                );
            }
        }
        Command::Sweep => {
            let spec = sweep_spec(cli)?;
            let map = parallel::with_threads(cli.threads, || sweep::sweep(&spec, Execution::Parallel))?;
            let mut out = output(cli.out.as_deref())?;
            match format.unwrap_or(Format::Csv) {
                Format::Csv => sweep::write_csv(&map, &mut out)?,
                Format::Json => write_json(&mut out, &map)?,
            }
            out.flush()?;
            if map.failures() > 0 {
                eprintln!("{} of {} cells failed", map.failures(), map.cells.len());
                status = EXIT_CELL_FAILURES;
            }
        }
        Command::Separatrix => {
            let spec = sweep_spec(cli)?;
            let (map, lines) = parallel::with_threads(cli.threads, || {
                sweep::sweep(&spec, Execution::Parallel).map(|map| {
                    let lines = sweep::separatrix(&spec, &map, Execution::Parallel);
                    (map, lines)
                })
            })?;
            let mut out = output(cli.out.as_deref())?;
            match format.unwrap_or(Format::Csv) {
                Format::Json => write_json(&mut out, &lines)?,
                Format::Csv => {
                    let mut w = csv::Writer::from_writer(&mut out);
                    w.write_record(["line", "x", "y"])?;
                    for (k, line) in lines.iter().enumerate() {
                        for p in line {
                            w.write_record([k.to_string(), p[0].to_string(), p[1].to_string()])?;
                        }
                    }
                    w.flush()?;
                }
            }
            out.flush()?;
            if map.failures() > 0 {
                status = EXIT_CELL_FAILURES;
            }
        }
        Command::Audit { criteria } => {
            let spec = sweep_spec(cli)?;
            let map = parallel::with_threads(cli.threads, || sweep::sweep(&spec, Execution::Parallel))?;
            let names: Vec<String> = if criteria.is_empty() {
                ["cor2", "cor4", "cor5", "lemma2_I", "lemma2_II"]
                    .map(String::from)
                    .to_vec()
            } else {
                criteria.clone()
            };
            let reports = names
                .iter()
                .map(|n| sweep::containment_audit(&map, n))
                .collect::<Result<Vec<_>, _>>()?;
            let mut out = output(cli.out.as_deref())?;
            match format.unwrap_or(Format::Json) {
                Format::Json => write_json(&mut out, &reports)?,
                Format::Csv => write_audit_csv(&mut out, &reports)?,
            }
            out.flush()?;
            if map.failures() > 0 {
                status = EXIT_CELL_FAILURES;
            }
        }
    }
    Ok(status)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_INVALID_CONFIG)
        }
        Err(Failure::Run(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
        Err(Failure::Closed) => ExitCode::SUCCESS,
    }
}
