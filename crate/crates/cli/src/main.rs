use std::fs::File;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anycast_core::dual::{run_dual_with, DualOptions, IterationRecord, StepSizePolicy};
use anycast_core::dynamics::{analyze_stability, integrate, two_node_classify, OdeConfig};
use anycast_core::fastcontrol::{run_distributed, ChannelMode, DistributedOptions};
use anycast_core::harness::{run_sweep, ExperimentConfig};
use anycast_core::model::InstanceFile;
use anycast_core::SystemInstance;
use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

#[derive(Parser, Debug)]
#[command(name = "anycast", version, about = "Load management for two-layer anycast CDNs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Centralized dual iteration.
    Dual {
        #[arg(long)]
        instance: PathBuf,
        #[arg(long, default_value_t = 0.05)]
        epsilon: f64,
        /// Constant step size instead of the epsilon rule.
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long, default_value_t = 20_000)]
        max_iters: usize,
        #[arg(long, default_value_t = 1e-9)]
        stop_tol: f64,
        /// Per-iteration CSV; stdout if omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Distributed iteration with FastControl packets.
    Fastcontrol {
        #[arg(long)]
        instance: PathBuf,
        #[arg(long, default_value_t = 0.05)]
        epsilon: f64,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long, default_value_t = 1.0)]
        gamma: f64,
        #[arg(long, value_enum, default_value_t = Mode::Exact)]
        mode: Mode,
        #[arg(long, default_value_t = 1e6)]
        scale: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20_000)]
        max_iters: usize,
        #[arg(long, default_value_t = 1e-9)]
        stop_tol: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Integrate the greedy heuristic.
    Greedy {
        #[arg(long)]
        instance: PathBuf,
        /// Comma-separated start point, or `random`. Defaults to the centre.
        #[arg(long)]
        x0: Option<String>,
        #[arg(long, default_value_t = 0.01)]
        dt: f64,
        #[arg(long, default_value_t = 1e4)]
        horizon: f64,
        #[arg(long, default_value_t = 1.0)]
        beta_sens: f64,
        #[arg(long, default_value_t = 100)]
        sample_every: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Polytope check, fixed points and overload verdicts.
    Stability {
        #[arg(long)]
        instance: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Parameter sweep over mean loads.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Mode {
    Exact,
    Sampled,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(io::BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?)),
        None => Box::new(io::stdout().lock()),
    })
}

fn load_instance(path: &Path) -> Result<SystemInstance> {
    InstanceFile::load(path).with_context(|| format!("loading {}", path.display()))
}

fn policy(epsilon: f64, alpha: Option<f64>) -> StepSizePolicy {
    alpha.map_or(StepSizePolicy::Epsilon(epsilon), StepSizePolicy::Constant)
}

fn indexed(prefix: &str, n: usize) -> impl Iterator<Item = String> + '_ {
    (0..n).map(move |i| format!("{prefix}_{i}"))
}

fn iteration_fields(r: &IterationRecord) -> Vec<String> {
    let mut row = vec![r.k.to_string(), r.cost.to_string(), r.dual_obj.to_string(), r.grad_norm_sq.sqrt().to_string()];
    row.extend(r.mu.iter().map(f64::to_string));
    row.extend(r.x.iter().map(f64::to_string));
    row
}

fn iteration_header(n: usize) -> Vec<String> {
    let mut header: Vec<String> = ["k", "cost", "dual_obj", "grad_norm"].iter().map(|s| s.to_string()).collect();
    header.extend(indexed("mu", n));
    header.extend(indexed("x", n));
    header
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Dual { instance, epsilon, alpha, max_iters, stop_tol, out } => {
            let inst = load_instance(&instance)?;
            let options = DualOptions { record: true, ..DualOptions::new(policy(epsilon, alpha), max_iters, stop_tol) };
            let report = run_dual_with(&inst, &options)?;
            let mut w = csv::Writer::from_writer(output(out.as_deref())?);
            w.write_record(iteration_header(inst.n()))?;
            for r in &report.records {
                w.write_record(iteration_fields(r))?;
            }
            w.flush()?;
            eprintln!(
                "alpha {:e}, {} iterations (converged: {}), best cost {} at k={}, duality gap {}",
                report.alpha,
                report.iterations,
                report.converged,
                report.best_cost,
                report.best_iteration,
                report.duality_gap()
            );
        }
        Command::Fastcontrol { instance, epsilon, alpha, gamma, mode, scale, seed, max_iters, stop_tol, out } => {
            let inst = load_instance(&instance)?;
            let mode = match mode {
                Mode::Exact => ChannelMode::ExactRate,
                Mode::Sampled => ChannelMode::SampledPackets { scale, seed },
            };
            let options = DistributedOptions {
                dual: DualOptions { record: true, ..DualOptions::new(policy(epsilon, alpha), max_iters, stop_tol) },
                gamma,
                mode,
            };
            let report = run_distributed(&inst, &options)?;
            let n = inst.n();
            let mut header = iteration_header(n);
            header.extend(indexed("R", n));
            header.push("overhead".into());
            let mut w = csv::Writer::from_writer(output(out.as_deref())?);
            w.write_record(header)?;
            for ((r, reception), overhead) in report.dual.records.iter().zip(&report.reception).zip(&report.overhead) {
                let mut row = iteration_fields(r);
                row.extend(reception.iter().map(f64::to_string));
                row.push(overhead.to_string());
                w.write_record(row)?;
            }
            w.flush()?;
            eprintln!(
                "{} rounds (converged: {}), best cost {}, total FastControl overhead {}",
                report.dual.iterations, report.dual.converged, report.dual.best_cost, report.total_overhead
            );
        }
        Command::Greedy { instance, x0, dt, horizon, beta_sens, sample_every, seed, out } => {
            let inst = load_instance(&instance)?;
            let n = inst.n();
            let start = match x0.as_deref() {
                None => vec![0.5; n],
                Some("random") => {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    (0..n).map(|_| rng.random_range(0.01..0.99)).collect()
                }
                Some(list) => list
                    .split(',')
                    .map(|v| v.trim().parse::<f64>().with_context(|| format!("bad x0 component {v:?}")))
                    .collect::<Result<Vec<_>>>()?,
            };
            if start.len() != n {
                bail!("x0 has {} components, instance has {n} nodes", start.len());
            }
            let config = OdeConfig { beta_sens, dt, horizon, sample_every, ..OdeConfig::default() };
            let traj = integrate(&inst, &config, &start)?;
            let mut header = vec!["t".to_string()];
            header.extend(indexed("x", n));
            header.extend(indexed("S", n));
            let mut w = csv::Writer::from_writer(output(out.as_deref())?);
            w.write_record(header)?;
            for k in 0..traj.len() {
                let mut row = vec![traj.times[k].to_string()];
                row.extend(traj.states[k].iter().map(f64::to_string));
                row.extend(traj.loads[k].iter().map(f64::to_string));
                w.write_record(row)?;
            }
            w.flush()?;
            eprintln!("t = {} (steady: {}), residual {:e}", traj.final_time(), traj.converged, traj.residual);
        }
        Command::Stability { instance, json } => {
            let inst = load_instance(&instance)?;
            let verdict = analyze_stability(&inst, &OdeConfig::default())?;
            let two_node = if inst.n() == 2 {
                let c = &inst.correlation;
                let a = &inst.arrivals;
                let t = &inst.capacities;
                two_node_classify(c.get(0, 0), c.get(1, 1), [a[0], a[1]], [t[0], t[1]]).ok()
            } else {
                None
            };
            let mut out = io::stdout().lock();
            if json {
                serde_json::to_writer_pretty(&mut out, &json!({ "analysis": verdict, "two_node": two_node }))?;
                writeln!(out)?;
                return Ok(());
            }
            writeln!(out, "{:>5}  {:>10}  {:>12}", "node", "in_polytope", "overloaded")?;
            for i in 0..inst.n() {
                writeln!(out, "{i:>5}  {:>10}  {:>12}", verdict.in_polytope[i], verdict.uncontrollably_overloaded[i])?;
            }
            writeln!(out, "\nfixed points:")?;
            for fp in &verdict.fixed_points {
                let eigs: Vec<String> = fp.eigenvalues.iter().map(|(re, im)| format!("{re:.4}{im:+.4}i")).collect();
                writeln!(
                    out,
                    "  x = {:?}  S = {:?}  {:?}  eig = [{}]",
                    fp.location,
                    fp.load,
                    fp.classification,
                    eigs.join(", ")
                )?;
            }
            writeln!(out, "\ncentre trajectory ends at {:?} (steady: {})", verdict.center_endpoint, verdict.center_converged)?;
            if let Some(tn) = two_node {
                writeln!(out, "two-node verdict: {}", serde_json::to_string(&tn)?)?;
            }
            writeln!(out, "verdict: {:?}", verdict.verdict)?;
        }
        Command::Sweep { config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let outcome = run_sweep(&cfg)?;
            outcome.write_csv(output(out.as_deref())?)?;
        }
    }
    Ok(())
}
