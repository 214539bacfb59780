use std::path::{Path, PathBuf};
use std::process::ExitCode;

use aim_core::harness::{
    parse_scheduler, run_batch, run_eval, run_oracle, run_train, run_verify, BatchMode, ExperimentConfig, HarnessError,
};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "aim", version, about = "Desk-scale autonomous intersection management testbed")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a learning agent on two-vehicle episodes.
    Train(Overrides),
    /// Evaluate an agent on the two-vehicle or the intersection setup.
    Eval(Overrides),
    /// Run every property suite; exits 2 if any fails.
    Verify {
        #[command(flatten)]
        overrides: Overrides,
        /// Transition matrix (JSON) to add to the schedule-safety suite.
        #[arg(long)]
        matrix: Option<PathBuf>,
    },
    /// Run every (config, seed) pair across worker threads.
    Batch {
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long, value_enum, default_value_t = Mode::Train)]
        mode: Mode,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Solve the configured schedules with the dynamic-programming oracle.
    Oracle(Overrides),
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Train,
    Eval,
}

#[derive(Args, Clone, Default)]
struct Overrides {
    /// JSON config; `batch` accepts several.
    #[arg(long)]
    config: Vec<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    setup: Option<String>,
    #[arg(long)]
    agent: Option<String>,
    #[arg(long)]
    scheduler: Option<String>,
    #[arg(long)]
    traffic_level: Option<usize>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Full 30-minute horizon, traffic levels and training length.
    #[arg(long)]
    paper_scale: bool,
}

impl Overrides {
    fn apply(&self, mut c: ExperimentConfig) -> Result<ExperimentConfig, HarnessError> {
        if let Some(s) = self.seed {
            c.seeds = vec![s];
        }
        if let Some(o) = &self.out {
            c.out_dir = o.clone();
        }
        if let Some(n) = self.steps {
            c.train.max_steps = n;
        }
        if let Some(s) = &self.setup {
            c.setup = s.parse()?;
        }
        if let Some(a) = &self.agent {
            c.agent = a.parse()?;
        }
        if let Some(s) = &self.scheduler {
            c.ie.scheduler = parse_scheduler(s)?;
        }
        if let Some(t) = self.traffic_level {
            c.ie.traffic_level = t;
        }
        if let Some(p) = &self.checkpoint {
            c.checkpoint = Some(p.clone());
        }
        c.paper_scale |= self.paper_scale;
        c.validate()?;
        Ok(c)
    }

    fn configs(&self) -> Result<Vec<ExperimentConfig>, HarnessError> {
        if self.config.is_empty() {
            return Ok(vec![self.apply(ExperimentConfig::default())?]);
        }
        self.config.iter().map(|p| self.apply(ExperimentConfig::load(p)?)).collect()
    }

    fn single(&self) -> Result<ExperimentConfig, HarnessError> {
        if self.config.len() > 1 {
            return Err(HarnessError::Config("only batch takes more than one --config".into()));
        }
        Ok(self.configs()?.remove(0))
    }
}

/// One directory per seed when a config lists several.
fn seed_dir(c: &ExperimentConfig, seed: u64) -> PathBuf {
    if c.seeds.len() == 1 {
        c.out_dir.clone()
    } else {
        c.out_dir.join(format!("seed_{seed}"))
    }
}

fn print_json<T: serde::Serialize>(v: &T) {
    println!("{}", serde_json::to_string_pretty(v).expect("results serialize"));
}

fn per_seed<T: serde::Serialize>(
    c: &ExperimentConfig,
    run: impl Fn(&ExperimentConfig, u64, &Path) -> Result<T, HarnessError>,
) -> Result<(), HarnessError> {
    for &seed in &c.seeds {
        print_json(&run(c, seed, &seed_dir(c, seed))?);
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::Train(o) => per_seed(&o.single()?, run_train),
        Command::Eval(o) => per_seed(&o.single()?, run_eval),
        Command::Oracle(o) => per_seed(&o.single()?, |c, s, d| run_oracle(c, s, d).map(|r| r.rows)),
        Command::Verify { overrides, matrix } => {
            let mut c = overrides.single()?;
            if matrix.is_some() {
                c.verify.matrix = matrix;
            }
            if let Some(s) = overrides.seed {
                c.verify.seed = s;
            }
            let out = c.out_dir.clone();
            match run_verify(&c, &out) {
                Ok(r) => {
                    print_json(&r);
                    Ok(())
                }
                Err(e) => {
                    if let Ok(text) = std::fs::read_to_string(out.join("verify.json")) {
                        println!("{text}");
                    }
                    Err(e)
                }
            }
        }
        Command::Batch {
            overrides,
            mode,
            threads,
        } => {
            let configs = overrides.configs()?;
            let out = configs[0].out_dir.clone();
            let mode = match mode {
                Mode::Train => BatchMode::Train,
                Mode::Eval => BatchMode::Eval,
            };
            let results = run_batch(&configs, mode, &out, threads.unwrap_or(configs[0].threads));
            print_json(&results);
            match results.iter().find(|r| !r.ok) {
                None => Ok(()),
                Some(r) => Err(match r.exit_code {
                    2 => HarnessError::Property(r.message.clone()),
                    3 => HarnessError::Divergence(r.message.clone()),
                    _ => HarnessError::Runtime(r.message.clone()),
                }),
            }
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("aim: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
