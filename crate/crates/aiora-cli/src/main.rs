use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::{Arc, Mutex};

use clap::{Parser, Subcommand};

use aiora_core::placement::{self, ApplicationDescriptor, ObjectiveWeights, PlacementError};
use aiora_core::scenario::{load_scenario, ScenarioError};
use aiora_core::sim::SimEngine;
use aiora_core::trace;

const EXIT_OK: u8 = 0;
const EXIT_VALIDATION: u8 = 2;
const EXIT_INFEASIBLE: u8 = 3;
const EXIT_RUNTIME: u8 = 4;

/// Orchestration engine and simulation harness for multi-segment virtual
/// continuums.
#[derive(Parser)]
#[command(name = "aiora", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a scenario file and report every violation.
    Validate { scenario: PathBuf },
    /// Planning utilities.
    Plan {
        #[command(subcommand)]
        command: PlanCommand,
    },
    /// Simulation runs.
    Sim {
        #[command(subcommand)]
        command: SimCommand,
    },
    /// Mount the northbound API over a live engine.
    Serve {
        scenario: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
    },
}

#[derive(Subcommand)]
enum PlanCommand {
    /// Place an application onto a topology and print the plan as JSON.
    Place {
        #[arg(long)]
        topology: PathBuf,
        #[arg(long)]
        app: PathBuf,
        #[arg(long)]
        weights: PathBuf,
    },
}

#[derive(Subcommand)]
enum SimCommand {
    /// Run a scenario and emit the trace and metrics.
    Run {
        scenario: PathBuf,
        /// Override the scenario's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Trace output file (JSON lines).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Metrics summary output file (JSON).
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Validate { scenario } => run_validate(&scenario),
        Command::Plan {
            command: PlanCommand::Place {
                topology,
                app,
                weights,
            },
        } => run_plan_place(&topology, &app, &weights),
        Command::Sim {
            command: SimCommand::Run {
                scenario,
                seed,
                out,
                metrics,
            },
        } => run_sim(&scenario, seed, out.as_deref(), metrics.as_deref()),
        Command::Serve { scenario, port } => run_serve(&scenario, port),
    };
    ExitCode::from(code)
}

fn run_validate(path: &std::path::Path) -> u8 {
    match load_scenario(path) {
        Ok(config) => {
            println!(
                "ok: {} segments, {} continuums, {} applications, {} loops, horizon {}",
                config.topology.segments.len(),
                config.continuums.len(),
                config.applications.len(),
                config.loops.len(),
                config.horizon
            );
            EXIT_OK
        }
        Err(err) => {
            eprintln!("{err}");
            EXIT_VALIDATION
        }
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &std::path::Path) -> Result<T, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
}

fn run_plan_place(
    topology_path: &std::path::Path,
    app_path: &std::path::Path,
    weights_path: &std::path::Path,
) -> u8 {
    let topology: aiora_core::domain::Topology = match read_json(topology_path) {
        Ok(t) => t,
        Err(err) => return validation_failure(&err),
    };
    let report = topology.validate();
    if !report.ok() {
        for violation in &report.violations {
            eprintln!("topology: {} ({:?})", violation.detail, violation.kind);
        }
        return EXIT_VALIDATION;
    }
    let app: ApplicationDescriptor = match read_json(app_path) {
        Ok(a) => a,
        Err(err) => return validation_failure(&err),
    };
    let weights: ObjectiveWeights = match read_json(weights_path) {
        Ok(w) => w,
        Err(err) => return validation_failure(&err),
    };

    let view = placement::full_capacity_view(&topology);
    match placement::place(&topology, &view, &app, &weights) {
        Ok(plan) => {
            println!("{}", serde_json::to_string_pretty(&plan).expect("plan serializes"));
            EXIT_OK
        }
        Err(PlacementError::Infeasible { blocking }) => {
            let report = serde_json::json!({ "infeasible": true, "blocking": blocking });
            println!("{}", serde_json::to_string_pretty(&report).expect("serializes"));
            EXIT_INFEASIBLE
        }
        Err(err) => {
            eprintln!("{err}");
            EXIT_VALIDATION
        }
    }
}

fn validation_failure(message: &str) -> u8 {
    eprintln!("{message}");
    EXIT_VALIDATION
}

fn run_sim(
    path: &std::path::Path,
    seed: Option<u64>,
    out: Option<&std::path::Path>,
    metrics_out: Option<&std::path::Path>,
) -> u8 {
    let mut config = match load_scenario(path) {
        Ok(config) => config,
        Err(err @ ScenarioError::Validation(_)) | Err(err @ ScenarioError::Parse(_)) => {
            eprintln!("{err}");
            return EXIT_VALIDATION;
        }
        Err(err) => {
            eprintln!("{err}");
            return EXIT_RUNTIME;
        }
    };
    if let Some(seed) = seed {
        config.seed = seed;
    }
    let mut engine = match SimEngine::new(config) {
        Ok(engine) => engine,
        Err(err) => {
            eprintln!("{err}");
            return EXIT_VALIDATION;
        }
    };
    let output = match engine.run() {
        Ok(output) => output,
        Err(err) => {
            eprintln!("{err}");
            return EXIT_RUNTIME;
        }
    };

    if let Some(out) = out {
        let file = match File::create(out) {
            Ok(file) => file,
            Err(err) => {
                eprintln!("{}: {err}", out.display());
                return EXIT_RUNTIME;
            }
        };
        let mut writer = BufWriter::new(file);
        if let Err(err) = trace::write_jsonl(&output.trace, &mut writer).and_then(|()| {
            writer.flush().map_err(Into::into)
        }) {
            eprintln!("{}: {err}", out.display());
            return EXIT_RUNTIME;
        }
    }
    if let Some(metrics_out) = metrics_out {
        let json = serde_json::to_string_pretty(&output.metrics).expect("metrics serialize");
        if let Err(err) = std::fs::write(metrics_out, json) {
            eprintln!("{}: {err}", metrics_out.display());
            return EXIT_RUNTIME;
        }
    }
    println!(
        "ran {} ticks, {} records, {} proposals, {} actuations applied, {} deferred, energy {:.4} Wh, carbon {:.4} g",
        output.metrics.ticks,
        output.trace.len(),
        output.metrics.proposals,
        output.metrics.actuations_applied,
        output.metrics.deferrals,
        output.metrics.total_energy_wh,
        output.metrics.total_carbon_g,
    );
    EXIT_OK
}

fn run_serve(path: &std::path::Path, port: u16) -> u8 {
    let config = match load_scenario(path) {
        Ok(config) => config,
        Err(err) => {
            eprintln!("{err}");
            return EXIT_VALIDATION;
        }
    };
    let mut engine = match SimEngine::new(config) {
        Ok(engine) => engine,
        Err(err) => {
            eprintln!("{err}");
            return EXIT_VALIDATION;
        }
    };
    if let Err(err) = engine.initialize() {
        eprintln!("{err}");
        return EXIT_RUNTIME;
    }
    let shared = Arc::new(Mutex::new(engine));
    let router = aiora_cli::server::router(shared);

    let runtime = match tokio::runtime::Runtime::new() {
        Ok(runtime) => runtime,
        Err(err) => {
            eprintln!("{err}");
            return EXIT_RUNTIME;
        }
    };
    let result: Result<(), std::io::Error> = runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(("0.0.0.0", port)).await?;
        println!("aiora API listening on port {port}");
        axum::serve(listener, router).await
    });
    match result {
        Ok(()) => EXIT_OK,
        Err(err) => {
            eprintln!("{err}");
            EXIT_RUNTIME
        }
    }
}
