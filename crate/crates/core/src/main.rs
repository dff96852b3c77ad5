use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use pixel_barrier::config::TrainConfig;
use pixel_barrier::env::{write_trace, HazardWorld, TraceStep};
use pixel_barrier::evaluate::{barrier_audit, heldout_mix, heldout_seeds, reconstruct_episode, run_agent, stats_of};
use pixel_barrier::metrics::{cost_return, log_to_csv, reward_return, EvalSummary};
use pixel_barrier::policy::ActMode;
use pixel_barrier::trainer::{load_agent, train};
use pixel_barrier::{Error, Result};

#[derive(Parser)]
#[command(name = "pixel-barrier", about = "Safe reinforcement learning from pixels with a latent barrier function")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a `key = value` config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from this checkpoint directory.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Run the deterministic policy on held-out episodes and print a JSON summary.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 20)]
        episodes: usize,
    },
    /// Write original and reconstructed frames of a stored episode as PPM files.
    Reconstruct {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        episode: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check the barrier conditions on held-out imagined rollouts.
    AuditBarrier {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 10)]
        episodes: usize,
    },
    /// Convert a JSONL metrics log to CSV.
    ExportCsv {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, resume } => {
            let cfg = TrainConfig::from_file(&config)?;
            let t = train(cfg, resume.as_deref())?;
            println!("{}", serde_json::json!({
                "epochs": t.epoch,
                "env_steps": t.env_steps,
                "output_dir": t.cfg.output_dir,
            }));
        }
        Command::Eval { ckpt, episodes } => {
            if episodes == 0 {
                return Err(Error::Invalid("--episodes must be positive".into()));
            }
            let (cfg, agent, _) = load_agent(&ckpt)?;
            let env = HazardWorld::new(cfg.world())?;
            let eps = run_agent(&agent, &cfg, &env, &heldout_seeds(cfg.seed, episodes), ActMode::Mean, 0.0)?;
            let stats: Vec<_> = eps.iter().map(stats_of).collect();
            let summary = EvalSummary { episodes, reward_return: reward_return(&stats)?, cost_return: cost_return(&stats)? };
            println!("{}", serde_json::to_string(&summary)?);
        }
        Command::Reconstruct { ckpt, episode, out } => {
            let (_, agent, ck) = load_agent(&ckpt)?;
            let buffer = pixel_barrier::buffer::ReplayBuffer::load(&ck, "buffer")?;
            let ep = buffer
                .episode(episode)
                .ok_or_else(|| Error::Invalid(format!("episode {episode} not in buffer of {} episodes", buffer.len())))?;
            let recon = reconstruct_episode(&agent, ep)?;
            fs::create_dir_all(&out)?;
            for (t, (orig, rec)) in ep.observations.iter().zip(&recon).enumerate() {
                let mut f = BufWriter::new(File::create(out.join(format!("frame_{t:04}.ppm")))?);
                orig.side_by_side(rec)?.write_ppm(&mut f)?;
            }
            let mut step = 0;
            let trace: Vec<TraceStep> = (0..ep.len())
                .map(|t| {
                    step += ep.env_steps[t] as usize;
                    TraceStep { step, action: ep.actions[t], reward: ep.rewards[t], kappa: ep.kappas[t] }
                })
                .collect();
            write_trace(&trace, &mut BufWriter::new(File::create(out.join("trace.jsonl"))?))?;
            println!("{}", serde_json::json!({ "frames": recon.len(), "out": out }));
        }
        Command::AuditBarrier { ckpt, episodes } => {
            let (cfg, agent, _) = load_agent(&ckpt)?;
            let env = HazardWorld::new(cfg.world())?;
            let eps = heldout_mix(&agent, &cfg, &env, episodes)?;
            println!("{}", serde_json::to_string(&barrier_audit(&agent, &cfg, &eps)?)?);
        }
        Command::ExportCsv { log, out } => {
            let n = log_to_csv(BufReader::new(File::open(&log)?), BufWriter::new(File::create(&out)?))?;
            println!("{}", serde_json::json!({ "records": n, "out": out }));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
