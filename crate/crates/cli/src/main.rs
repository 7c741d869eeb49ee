//! Command-line entry point.
//!
//! Exit codes: 0 success, 2 validation error, 3 non-convergence,
//! 4 numerical failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bistnet_cli::gen::{four_node, gen_disordered, gen_lattice, DisorderedParams};
use bistnet_cli::scenario::{
    self, catalog, find_scenario, run_scenario, GeneratorSpec, OutputFormat, PulseSpec,
    RunOutcome, Scenario, ScenarioError,
};
use bistnet_core::dynamics::{simulate, DriveSchedule, FluxPulse, Phase};
use bistnet_core::network::NetworkDocument;
use bistnet_core::stability::minors_criterion;
use bistnet_core::steadystate::{enumerate_closed, enumerate_pressure_bc, pressures_mixed_bc, MixedBc};
use bistnet_core::{BistableLaw, FlowNetwork};
use clap::{Args, Parser, Subcommand};
use nalgebra::DVector;

#[derive(Parser)]
#[command(name = "bistnet", version, about = "Simulate, analyze, and train bistable flow networks")]
struct Cli {
    /// Number of worker threads for parallel workloads; omit or 1 for the
    /// bit-reproducible sequential mode.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Directory artifacts are written into.
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// Tabular output flavor.
    #[arg(long, global = true, value_enum, default_value_t = OutputFormat::Csv)]
    format: OutputFormat,
    /// Seed for seeded generators and ensembles.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a network and write it as a JSON document.
    Gen {
        #[command(subcommand)]
        kind: GenKind,
    },
    /// Integrate a drive schedule on a stored network.
    Simulate(SimulateArgs),
    /// Solve steady pressures for mixed clamps on the frozen conductances.
    Steady(SteadyArgs),
    /// Classify the stability of a volume configuration.
    Stability(StabilityArgs),
    /// Enumerate equilibria under clamps or at fixed total volume.
    Enumerate(EnumerateArgs),
    /// Run a conductance-descent training scenario from a file.
    TrainGlobal(TrainArgs),
    /// Run a two-phase contrastive training scenario from a file.
    TrainLocal(TrainArgs),
    /// Run a catalog scenario by name, or any scenario from a file.
    Scenario(ScenarioArgs),
    /// Summarize a stored network or scenario file.
    Inspect { path: PathBuf },
}

#[derive(Subcommand)]
enum GenKind {
    /// Rectangular grid, optionally fully connected.
    Lattice {
        #[arg(long)]
        rows: usize,
        #[arg(long)]
        cols: usize,
        #[arg(long)]
        full_connect: bool,
        #[arg(long, default_value_t = 1.0)]
        conductance: f64,
    },
    /// Packed random points linked to their nearest neighbors.
    Disordered {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 1.0)]
        r_min: f64,
        #[arg(long, default_value_t = 2.2)]
        r_connect: f64,
        #[arg(long, default_value_t = 5)]
        k_max: usize,
        #[arg(long, default_value_t = 1.0)]
        resistance_scale: f64,
    },
    /// Inlet-to-ground divider with two chambered middle nodes.
    FourNode {
        /// Tube resistances: inlet-to-first, inlet-to-second,
        /// first-to-ground, second-to-ground.
        #[arg(long, value_delimiter = ',')]
        resistances: Vec<f64>,
    },
}

#[derive(Args)]
struct SimulateArgs {
    /// Stored network document.
    #[arg(long)]
    network: PathBuf,
    /// Flux pulse node:rate:start:end; repeatable.
    #[arg(long = "pulse", value_parser = parse_pulse)]
    pulses: Vec<PulseSpec>,
    /// Pressure clamp node:value held for the whole run; repeatable.
    #[arg(long = "clamp", value_parser = parse_pair)]
    clamps: Vec<(usize, f64)>,
    #[arg(long)]
    t_end: f64,
    /// Uniform initial chamber volume.
    #[arg(long, default_value_t = 1.0)]
    initial_volume: f64,
}

#[derive(Args)]
struct SteadyArgs {
    #[arg(long)]
    network: PathBuf,
    /// Pressure clamp node:value; repeatable, at least one required.
    #[arg(long = "clamp", value_parser = parse_pair, required = true)]
    clamps: Vec<(usize, f64)>,
    /// Constant injection node:rate; repeatable.
    #[arg(long = "flux", value_parser = parse_pair)]
    flux: Vec<(usize, f64)>,
}

#[derive(Args)]
struct StabilityArgs {
    #[arg(long)]
    network: PathBuf,
    /// Chamber volumes, comma separated, one per node.
    #[arg(long, value_delimiter = ',')]
    volumes: Vec<f64>,
}

#[derive(Args)]
struct EnumerateArgs {
    #[arg(long)]
    network: PathBuf,
    /// Pressure clamp node:value; repeatable.
    #[arg(long = "clamp", value_parser = parse_pair)]
    clamps: Vec<(usize, f64)>,
    /// Constant injection node:rate; repeatable.
    #[arg(long = "flux", value_parser = parse_pair)]
    flux: Vec<(usize, f64)>,
    /// Enumerate the sealed system at this total volume instead.
    #[arg(long, conflicts_with_all = ["clamps", "flux"])]
    total_volume: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    /// Scenario file with the matching training workload.
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args)]
struct ScenarioArgs {
    /// Catalog entry to run.
    name: Option<String>,
    /// Scenario file overriding the catalog.
    #[arg(long, conflicts_with = "name")]
    config: Option<PathBuf>,
    /// List catalog names and exit.
    #[arg(long)]
    list: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        if threads > 1 {
            if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
                eprintln!("thread pool: {e}");
                return ExitCode::from(2);
            }
        }
    }
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(u8::try_from(e.exit_code()).unwrap_or(4))
        }
    }
}

fn run(cli: Cli) -> Result<u8, ScenarioError> {
    let parallel = cli.threads.is_some_and(|t| t > 1);
    match cli.command {
        Command::Gen { kind } => {
            let generator = match kind {
                GenKind::Lattice { rows, cols, full_connect, conductance } => {
                    GeneratorSpec::Lattice { rows, cols, full_connect, conductance }
                }
                GenKind::Disordered { n, r_min, r_connect, k_max, resistance_scale } => {
                    GeneratorSpec::Disordered(DisorderedParams {
                        n,
                        r_min,
                        r_connect,
                        k_max,
                        resistance_scale,
                    })
                }
                GenKind::FourNode { resistances } => {
                    let four: [f64; 4] = resistances
                        .as_slice()
                        .try_into()
                        .map_err(|_| bad(format!("need 4 resistances, got {}", resistances.len())))?;
                    GeneratorSpec::FourNode { resistances: four }
                }
            };
            let net = build(&generator, cli.seed)?;
            fs::create_dir_all(&cli.out_dir).map_err(io_err)?;
            let path = cli.out_dir.join("network.json");
            let doc = NetworkDocument::new(&net, &BistableLaw::default());
            fs::write(&path, pretty(&doc)?).map_err(io_err)?;
            println!(
                "generated {} nodes, {} tubes (mean degree {:.2}) -> {}",
                net.n(),
                net.tubes().len(),
                net.mean_degree(),
                path.display()
            );
            Ok(0)
        }
        Command::Simulate(args) => cmd_simulate(args, &cli.out_dir),
        Command::Steady(args) => cmd_steady(args, &cli.out_dir),
        Command::Stability(args) => cmd_stability(args, &cli.out_dir),
        Command::Enumerate(args) => cmd_enumerate(args, &cli.out_dir),
        Command::TrainGlobal(args) => {
            let sc = load_scenario(&args.config)?;
            match sc.run {
                scenario::RunSpec::TrainGlobal { .. } => {}
                _ => return Err(bad(format!("{} is not a train_global scenario", sc.name))),
            }
            finish(run_scenario(&sc, &cli.out_dir, cli.format, parallel)?)
        }
        Command::TrainLocal(args) => {
            let sc = load_scenario(&args.config)?;
            match sc.run {
                scenario::RunSpec::TrainLocal { .. } => {}
                _ => return Err(bad(format!("{} is not a train_local scenario", sc.name))),
            }
            finish(run_scenario(&sc, &cli.out_dir, cli.format, parallel)?)
        }
        Command::Scenario(args) => {
            if args.list {
                for sc in catalog() {
                    println!("{}", sc.name);
                }
                return Ok(0);
            }
            let sc = match (&args.name, &args.config) {
                (_, Some(path)) => load_scenario(path)?,
                (Some(name), None) => find_scenario(name)
                    .ok_or_else(|| bad(format!("no catalog scenario named {name}")))?,
                (None, None) => return Err(bad("pass a scenario name or --config".into())),
            };
            finish(run_scenario(&sc, &cli.out_dir, cli.format, parallel)?)
        }
        Command::Inspect { path } => cmd_inspect(&path),
    }
}

fn finish(log: bistnet_cli::RunLog) -> Result<u8, ScenarioError> {
    print!("{}", log.summary);
    Ok(match log.outcome {
        RunOutcome::Success => 0,
        RunOutcome::NonConvergence { .. } => 3,
    })
}

fn cmd_simulate(args: SimulateArgs, out_dir: &Path) -> Result<u8, ScenarioError> {
    let (net, law) = load_network(&args.network)?;
    let mut phase = Phase::free(net.n(), 0.0, args.t_end);
    for &(node, value) in &args.clamps {
        phase = phase.pressure(node, value);
    }
    for p in &args.pulses {
        phase = phase.flux(p.node, vec![FluxPulse::new(p.start, p.end, p.rate)]);
    }
    let schedule = DriveSchedule::new(net.n(), vec![phase]).map_err(|e| bad(e.to_string()))?;
    let v0 = DVector::from_element(net.n(), args.initial_volume);
    let traj = simulate(&net, &law, &v0, &schedule, &scenario::scenario_sim_options())
        .map_err(|e| num(e.to_string()))?;

    fs::create_dir_all(out_dir).map_err(io_err)?;
    let path = out_dir.join("trajectory.csv");
    fs::write(&path, scenario::trajectory_csv(&traj)).map_err(io_err)?;
    let last = traj.last_state(&law);
    println!(
        "integrated to t = {:.3} ({} samples) -> {}",
        last.t,
        traj.len(),
        path.display()
    );
    println!("final volumes   {:?}", rounded(last.volumes.as_slice()));
    println!("final pressures {:?}", rounded(last.pressures.as_slice()));
    println!("final bits      {:?}", last.binary_bits());
    match traj.steady_time {
        Some(t) => println!("settled at t = {t:.3}"),
        None => println!("no settled interval detected"),
    }
    if args.clamps.is_empty() {
        println!("flux balance residual {:.3e}", scenario::conservation_residual(&traj));
    }
    Ok(0)
}

fn cmd_steady(args: SteadyArgs, out_dir: &Path) -> Result<u8, ScenarioError> {
    let (net, _) = load_network(&args.network)?;
    let bc = MixedBc { pressure: args.clamps.clone(), flux: args.flux.clone() };
    let lap = net.laplacian();
    let solution = pressures_mixed_bc(&lap, &bc).map_err(|e| num(e.to_string()))?;
    fs::create_dir_all(out_dir).map_err(io_err)?;
    let path = out_dir.join("steady.json");
    fs::write(
        &path,
        pretty(&serde_json::json!({
            "pressures": solution.pressures.as_slice(),
            "clamp_fluxes": solution.clamp_fluxes,
        }))?,
    )
    .map_err(io_err)?;
    println!("pressures    {:?}", rounded(solution.pressures.as_slice()));
    println!("clamp fluxes {:?}", solution.clamp_fluxes);
    println!("-> {}", path.display());
    Ok(0)
}

fn cmd_stability(args: StabilityArgs, out_dir: &Path) -> Result<u8, ScenarioError> {
    let (net, law) = load_network(&args.network)?;
    if args.volumes.len() != net.n() {
        return Err(bad(format!(
            "{} volumes for {} nodes",
            args.volumes.len(),
            net.n()
        )));
    }
    let v = DVector::from_vec(args.volumes.clone());
    let report = minors_criterion(&v, &law).map_err(|e| num(e.to_string()))?;
    fs::create_dir_all(out_dir).map_err(io_err)?;
    let path = out_dir.join("stability.json");
    fs::write(&path, pretty(&report)?).map_err(io_err)?;
    println!("label {:?}, fold chambers {:?} -> {}", report.label, report.fold_nodes, path.display());
    Ok(0)
}

fn cmd_enumerate(args: EnumerateArgs, out_dir: &Path) -> Result<u8, ScenarioError> {
    let (net, law) = load_network(&args.network)?;
    let set = match args.total_volume {
        Some(total) => enumerate_closed(&law, net.n(), total).map_err(|e| num(e.to_string()))?,
        None => {
            let bc = MixedBc { pressure: args.clamps.clone(), flux: args.flux.clone() };
            enumerate_pressure_bc(&net, &law, &bc).map_err(|e| num(e.to_string()))?
        }
    };
    fs::create_dir_all(out_dir).map_err(io_err)?;
    let path = out_dir.join("equilibria.json");
    fs::write(&path, pretty(&set)?).map_err(io_err)?;
    println!("{} equilibria -> {}", set.len(), path.display());
    for (k, e) in set.iter().enumerate() {
        println!(
            "  #{k}: {:?} p {:?} v {:?}",
            e.stability.label,
            rounded(&e.pressures),
            rounded(&e.volumes)
        );
    }
    Ok(0)
}

fn cmd_inspect(path: &Path) -> Result<u8, ScenarioError> {
    let body = fs::read_to_string(path).map_err(io_err)?;
    if let Ok(doc) = serde_json::from_str::<NetworkDocument>(&body) {
        let (net, law) = doc.into_parts().map_err(|e| bad(e.to_string()))?;
        println!("network document: {}", path.display());
        println!("  nodes {}, tubes {}, mean degree {:.2}", net.n(), net.tubes().len(), net.mean_degree());
        println!("  connected: {}", net.is_connected());
        law.validate().map_err(|e| bad(e.to_string()))?;
        println!("  law: {law:?}");
        return Ok(0);
    }
    if let Ok(sc) = serde_json::from_str::<Scenario>(&body) {
        println!("scenario document: {}", sc.name);
        println!("{}", serde_json::to_string_pretty(&sc).expect("round-trip"));
        return Ok(0);
    }
    Err(bad(format!("{} is neither a network nor a scenario document", path.display())))
}

// --- Helpers ---------------------------------------------------------------

fn build(generator: &GeneratorSpec, seed: u64) -> Result<FlowNetwork, ScenarioError> {
    let net = match generator {
        GeneratorSpec::Lattice { rows, cols, full_connect, conductance } => {
            gen_lattice(*rows, *cols, *full_connect, *conductance)
        }
        GeneratorSpec::Disordered(params) => gen_disordered(params, seed),
        GeneratorSpec::FourNode { resistances } => four_node(*resistances),
        GeneratorSpec::MemoryCell { weak, strong } => {
            bistnet_cli::gen::memory_cell(*weak, *strong)
        }
    };
    net.map_err(|e| bad(e.to_string()))
}

fn load_network(path: &Path) -> Result<(FlowNetwork, BistableLaw), ScenarioError> {
    let body = fs::read_to_string(path).map_err(io_err)?;
    let doc: NetworkDocument = serde_json::from_str(&body).map_err(|e| bad(e.to_string()))?;
    doc.into_parts().map_err(|e| bad(e.to_string()))
}

fn load_scenario(path: &Path) -> Result<Scenario, ScenarioError> {
    let body = fs::read_to_string(path).map_err(io_err)?;
    serde_json::from_str(&body).map_err(|e| bad(e.to_string()))
}

fn pretty<T: serde::Serialize>(value: &T) -> Result<String, ScenarioError> {
    serde_json::to_string_pretty(value).map_err(|e| num(e.to_string()))
}

fn rounded(xs: &[f64]) -> Vec<f64> {
    xs.iter().map(|x| (x * 1e4).round() / 1e4).collect()
}

fn parse_pair(s: &str) -> Result<(usize, f64), String> {
    let (node, value) = s.split_once(':').ok_or("expected node:value")?;
    Ok((
        node.trim().parse().map_err(|e| format!("node: {e}"))?,
        value.trim().parse().map_err(|e| format!("value: {e}"))?,
    ))
}

fn parse_pulse(s: &str) -> Result<PulseSpec, String> {
    let parts: Vec<&str> = s.split(':').collect();
    if parts.len() != 4 {
        return Err("expected node:rate:start:end".into());
    }
    Ok(PulseSpec {
        node: parts[0].trim().parse().map_err(|e| format!("node: {e}"))?,
        rate: parts[1].trim().parse().map_err(|e| format!("rate: {e}"))?,
        start: parts[2].trim().parse().map_err(|e| format!("start: {e}"))?,
        end: parts[3].trim().parse().map_err(|e| format!("end: {e}"))?,
    })
}

fn bad(reason: String) -> ScenarioError {
    ScenarioError::Validation { name: "cli".into(), reason }
}

fn num(reason: String) -> ScenarioError {
    ScenarioError::Numerical { name: "cli".into(), reason }
}

fn io_err(e: std::io::Error) -> ScenarioError {
    ScenarioError::Io { name: "cli".into(), source: e }
}
