use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use guidance_patterns::hhmm::Hhmm;
use guidance_patterns::model::AgentState;
use guidance_patterns::pipeline::{load_stage, run_pipeline_until, PipelineConfig, RunReport, SimStage};
use guidance_patterns::svg::{render_stage, Style};

#[derive(Parser)]
#[command(name = "guidance", about = "Learn interaction patterns from simulated guidance behavior")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Source {
    /// Pipeline config (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory; overrides the config's out_dir.
    #[arg(long)]
    run: Option<PathBuf>,
}

impl Source {
    fn config(&self) -> Result<PipelineConfig> {
        let path = self.config.as_ref().context("--config is required")?;
        let mut cfg = PipelineConfig::load(path).with_context(|| format!("config {}", path.display()))?;
        if let Some(r) = &self.run {
            cfg.out_dir = r.clone();
        }
        Ok(cfg)
    }

    fn dir(&self) -> Result<PathBuf> {
        match (&self.run, &self.config) {
            (Some(r), _) => Ok(r.clone()),
            (None, Some(_)) => Ok(self.config()?.out_dir),
            (None, None) => bail!("either --run or --config is required"),
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate the planner-guided dataset.
    Simulate(#[command(flatten)] Source),
    /// Quantize trajectories and extract subgoal observations.
    Subgoals(#[command(flatten)] Source),
    /// Cluster subgoals and segment trajectories.
    Cluster(#[command(flatten)] Source),
    /// Build the interaction-pattern library.
    Match(#[command(flatten)] Source),
    /// Identify the piecewise affine motion modes.
    Pwa(#[command(flatten)] Source),
    /// Predict subgoals and manifolds from the environment.
    Partition(#[command(flatten)] Source),
    /// Assemble the hierarchical model.
    Hhmm(#[command(flatten)] Source),
    /// Run every stage and write the manifest.
    RunAll(#[command(flatten)] Source),
    /// Deterministic rollout of the learned model.
    Predict {
        #[command(flatten)]
        src: Source,
        /// Initial state as x,y,v,psi.
        #[arg(long, value_parser = parse_state)]
        state: AgentState,
        #[arg(long, default_value_t = 3000)]
        horizon: usize,
        /// Output JSON file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sample trajectories from the learned model, one CSV each.
    Generate {
        #[command(flatten)]
        src: Source,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        n: usize,
        /// Initial state as x,y,v,psi; cycles through the simulated starts when absent.
        #[arg(long, value_parser = parse_state)]
        state: Option<AgentState>,
        #[arg(long, default_value_t = 2000)]
        step_cap: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a stage output as SVG.
    Render {
        #[command(flatten)]
        src: Source,
        /// trajectories, clusters, patterns or partition.
        #[arg(long)]
        kind: String,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_state(s: &str) -> std::result::Result<AgentState, String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|e| format!("{t:?}: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    match v[..] {
        [x, y, v, psi] => Ok(AgentState::new(x, y, v, psi)),
        _ => Err(format!("expected x,y,v,psi, got {} values", v.len())),
    }
}

fn run_stage(src: &Source, stage: Option<&str>) -> Result<RunReport> {
    let cfg = src.config()?;
    let report = run_pipeline_until(&cfg, stage)?;
    for t in &report.timings {
        let how = if t.skipped { "cached" } else { "ran" };
        eprintln!("{:<10} {how:<6} {:.2}s", t.name, t.seconds);
    }
    eprintln!("outputs in {}", cfg.out_dir.display());
    Ok(report)
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    let stage = |name| match &cli.cmd {
        Cmd::Simulate(s) | Cmd::Subgoals(s) | Cmd::Cluster(s) | Cmd::Match(s) | Cmd::Pwa(s) | Cmd::Partition(s) | Cmd::Hhmm(s) => {
            run_stage(s, Some(name)).map(|_| ())
        }
        _ => unreachable!(),
    };
    match &cli.cmd {
        Cmd::Simulate(_) => stage("simulate"),
        Cmd::Subgoals(_) => stage("subgoals"),
        Cmd::Cluster(_) => stage("cluster"),
        Cmd::Match(_) => stage("match"),
        Cmd::Pwa(_) => stage("pwa"),
        Cmd::Partition(_) => stage("partition"),
        Cmd::Hhmm(_) => stage("hhmm"),
        Cmd::RunAll(s) => {
            let report = run_stage(s, None)?;
            println!("{}", serde_json::to_string_pretty(&report.manifest.metrics)?);
            Ok(())
        }
        Cmd::Predict { src, state, horizon, out } => {
            let h: Hhmm = load_stage(&src.dir()?, "hhmm")?;
            let r = h.predict(state, *horizon)?;
            let text = serde_json::to_string_pretty(&r)?;
            match out {
                Some(p) => write(p, &text),
                None => {
                    println!("{text}");
                    Ok(())
                }
            }
        }
        Cmd::Generate { src, seed, n, state, step_cap, out } => {
            let dir = src.dir()?;
            let h: Hhmm = load_stage(&dir, "hhmm")?;
            let starts: Vec<AgentState> = match state {
                Some(s) => vec![*s],
                None => {
                    let sim: SimStage = load_stage(&dir, "simulate")?;
                    sim.dataset.trajectories.iter().map(|t| *t.first()).collect()
                }
            };
            if starts.is_empty() {
                bail!("no start states");
            }
            std::fs::create_dir_all(out)?;
            let mut reached = 0;
            for k in 0..*n {
                let g = h.generate(&starts[k % starts.len()], seed.wrapping_add(k as u64), *step_cap)?;
                reached += usize::from(g.reached_goal);
                write(&out.join(format!("traj_{k:04}.csv")), &g.trajectory.to_csv_string())?;
            }
            eprintln!("{reached}/{n} reached the goal");
            Ok(())
        }
        Cmd::Render { src, kind, out } => {
            let svg = render_stage(&src.dir()?, kind, &Style::default())?;
            write(out, &svg)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // Core errors already embed their source in the message.
            let mut msg = String::new();
            for link in e.chain().map(|c| c.to_string()) {
                if !msg.ends_with(&link) {
                    if !msg.is_empty() {
                        msg.push_str(": ");
                    }
                    msg.push_str(&link);
                }
            }
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
