use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use risk_ctmdp::cli::{execute, Command, Overrides};

/// Risk-sensitive discounted CTMDP solver and simulator.
///
/// Exit status: 0 on success, 1 when a check fails, 2 on a configuration error.
#[derive(Parser)]
#[command(name = "risk-ctmdp", version, about, long_about)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args)]
struct Common {
    /// Run configuration (JSON).
    config: PathBuf,
    /// Base seed for all random streams.
    #[arg(long)]
    seed: Option<u64>,
    /// Main tolerance of the subcommand (certificate, schedule or oracle tolerance).
    #[arg(long)]
    tol: Option<f64>,
    /// Worker threads (defaults to the number of CPUs).
    #[arg(long)]
    threads: Option<usize>,
    /// Output directory; otherwise the config's `output_dir`, then $RISK_CTMDP_OUT, then `.`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Check the Lyapunov certificate and print constants and violations.
    Certify {
        #[command(flatten)]
        common: Common,
    },
    /// Solve the HJB equation and write value and policy.
    Solve {
        #[command(flatten)]
        common: Common,
        /// Number of uniform θ nodes on [0, 1].
        #[arg(long)]
        theta_nodes: Option<usize>,
        /// Comma-separated, strictly decreasing δ values in (0, 1).
        #[arg(long, value_delimiter = ',')]
        delta_list: Option<Vec<f64>>,
        /// Comma-separated, strictly increasing truncation levels.
        #[arg(long, value_delimiter = ',')]
        n_list: Option<Vec<f64>>,
    },
    /// Estimate the risk-sensitive criterion by Monte Carlo.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        theta: Option<f64>,
        /// Initial state index.
        #[arg(long)]
        x0: Option<usize>,
        #[arg(long)]
        num_traj: Option<usize>,
        /// Fixed simulation horizon (otherwise derived from --tail-eps).
        #[arg(long)]
        horizon: Option<f64>,
        #[arg(long)]
        tail_eps: Option<f64>,
        /// value.csv written by `solve`.
        #[arg(long)]
        policy_file: Option<PathBuf>,
        /// Also write one row per trajectory.
        #[arg(long)]
        dump_trajectories: bool,
    },
    /// Cross-check the solver against Monte Carlo and the fixed-policy oracle.
    Verify {
        #[command(flatten)]
        common: Common,
        /// Trajectories per Feynman-Kac check.
        #[arg(long)]
        num_traj: Option<usize>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (cmd, common, mut ov) = match cli.command {
        Cmd::Certify { common } => (Command::Certify, common, Overrides::default()),
        Cmd::Solve {
            common,
            theta_nodes,
            delta_list,
            n_list,
        } => (
            Command::Solve,
            common,
            Overrides {
                theta_nodes,
                delta_list,
                n_list,
                ..Default::default()
            },
        ),
        Cmd::Simulate {
            common,
            theta,
            x0,
            num_traj,
            horizon,
            tail_eps,
            policy_file,
            dump_trajectories,
        } => (
            Command::Simulate,
            common,
            Overrides {
                theta,
                x0,
                num_traj,
                horizon,
                tail_eps,
                policy_file,
                dump_trajectories,
                ..Default::default()
            },
        ),
        Cmd::Verify { common, num_traj } => (
            Command::Verify,
            common,
            Overrides {
                num_traj,
                ..Default::default()
            },
        ),
    };
    ov.seed = common.seed;
    ov.tol = common.tol;
    ov.out_dir = common.out;

    if let Some(n) = common.threads {
        if n == 0 {
            eprintln!("error: --threads must be positive");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot start thread pool: {e}");
            return ExitCode::from(1);
        }
    }

    match execute(&common.config, cmd, &ov) {
        Ok(outcome) => {
            for line in &outcome.summary {
                println!("{line}");
            }
            for p in &outcome.artifacts {
                eprintln!("wrote {}", p.display());
            }
            ExitCode::from(outcome.exit_code() as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
