mod commands;
mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nas_rec::snapshot::ModelTag;
use nas_rec::synth::SyntheticSpec;
use nas_rec::{NasError, Result};

use crate::commands::PrepareArgs;
use crate::config::{Partition, Preset, RunConfig};

/// Social recommendation with neural attention over friends.
#[derive(Parser, Debug)]
#[command(name = "nas", version)]
struct Cli {
    /// Worker threads; 1 forces the sequential reference path.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Log more (-v info, -vv debug). RUST_LOG also works.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct ConfigArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset preset supplying default hyperparameters.
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    /// Prepared data directory.
    #[arg(long)]
    data: Option<PathBuf>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(path) => RunConfig::load(path, self.preset)?,
            None => RunConfig::from_toml("", self.preset)?,
        };
        if let Some(d) = &self.data {
            c.data_dir = d.clone();
        }
        Ok(c)
    }
}

#[derive(Args, Debug)]
struct TrainOverrides {
    #[arg(long)]
    model: Option<ModelTag>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    h: Option<usize>,
    /// Negatives per observed rating.
    #[arg(long)]
    neg: Option<usize>,
    #[arg(long)]
    k_max: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    pretrain_epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

impl TrainOverrides {
    fn apply(&self, c: &mut RunConfig) {
        let t = &mut c.train;
        if let Some(m) = self.model {
            c.model = m;
        }
        macro_rules! set {
            ($($field:ident => $target:expr),*) => {$(
                if let Some(v) = self.$field {
                    $target = v;
                }
            )*};
        }
        set!(d => t.d, h => t.h, neg => t.neg_per_pos, k_max => t.k_max, epochs => t.epochs,
             batch_size => t.batch_size, lr => t.lr, seed => t.seed);
        if self.pretrain_epochs.is_some() {
            t.pretrain_epochs = self.pretrain_epochs;
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Split a ratings file into train/validation/test and write id maps.
    Prepare {
        /// `user item rating` rows (.csv for commas, otherwise whitespace).
        #[arg(long)]
        ratings: PathBuf,
        /// `user friend` rows.
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Reads `[split]` from this config; flags override it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        train_frac: Option<f64>,
        #[arg(long)]
        val_frac: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Pretrain, train and snapshot a model.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        overrides: TrainOverrides,
        /// Output directory (default: `output_dir` of the config).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a snapshot with recall@N and NDCG@N.
    Eval {
        #[arg(long)]
        snapshot: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        runs: Option<usize>,
        #[arg(long, value_enum)]
        partition: Option<Partition>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the top-N unseen items for one user.
    Recommend {
        #[arg(long)]
        snapshot: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Original user id as it appears in the ratings file.
        #[arg(long)]
        user: String,
        #[arg(long, default_value_t = 10)]
        n: usize,
        /// Seed of the friend subsample for users above `k_max` friends.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Grid over d, h and negatives, scored on the validation partition.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_delimiter = ',', required = true)]
        d: Vec<usize>,
        #[arg(long, value_delimiter = ',', required = true)]
        h: Vec<usize>,
        #[arg(long, value_delimiter = ',', required = true)]
        neg: Vec<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a planted-influence dataset.
    Synth {
        /// TOML spec; flags override it.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        m: Option<usize>,
        #[arg(long)]
        d_true: Option<usize>,
        #[arg(long)]
        friends: Option<usize>,
        #[arg(long)]
        influential: Option<usize>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        noise: Option<f64>,
        #[arg(long)]
        ratings_per_user: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn exit_code(e: &NasError) -> u8 {
    match e {
        NasError::Config(_) => 1,
        NasError::Parse { .. }
        | NasError::Data(_)
        | NasError::Eval(_)
        | NasError::Snapshot(_)
        | NasError::Io { .. } => 2,
        NasError::Training(_) => 3,
    }
}

fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|source| NasError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    toml::from_str(&text)
        .map_err(|e| NasError::Config(format!("{}: {}", path.display(), e.message())))
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Prepare {
            ratings,
            graph,
            out,
            config,
            train_frac,
            val_frac,
            seed,
        } => {
            let base = match config {
                Some(p) => RunConfig::load(&p, None)?.split,
                None => Default::default(),
            };
            let args = PrepareArgs {
                ratings,
                graph,
                out,
                train_frac: train_frac.unwrap_or(base.train_frac),
                val_frac: val_frac.unwrap_or(base.val_frac),
                seed: seed.unwrap_or(base.seed),
            };
            let stats = commands::prepare(&args)?;
            print!("{}", stats.render());
        }
        Command::Train {
            cfg,
            overrides,
            out,
        } => {
            let mut c = cfg.load()?;
            overrides.apply(&mut c);
            if let Some(o) = out {
                c.output_dir = o;
            }
            let path = commands::train(&c)?;
            println!("{}", path.display());
        }
        Command::Eval {
            snapshot,
            cfg,
            n,
            runs,
            partition,
            out,
        } => {
            let mut c = cfg.load()?;
            c.eval.n = n.unwrap_or(c.eval.n);
            c.eval.runs = runs.unwrap_or(c.eval.runs);
            c.eval.partition = partition.unwrap_or(c.eval.partition);
            let out = out.unwrap_or_else(|| c.output_dir.clone());
            let report = commands::eval(&snapshot, &c, &out)?;
            print!("{}", report.to_csv());
        }
        Command::Recommend {
            snapshot,
            data,
            user,
            n,
            seed,
        } => {
            for (item, score) in commands::recommend(&snapshot, &data, &user, n, seed)? {
                println!("{item}\t{score}");
            }
        }
        Command::Sweep {
            cfg,
            d,
            h,
            neg,
            out,
        } => {
            let c = cfg.load()?;
            let out = out.unwrap_or_else(|| c.output_dir.clone());
            let rows = commands::sweep(&c, &d, &h, &neg, &out)?;
            print!("{}", commands::sweep_csv(&rows, c.eval.n));
        }
        Command::Synth {
            spec,
            out,
            n,
            m,
            d_true,
            friends,
            influential,
            alpha,
            noise,
            ratings_per_user,
            seed,
        } => {
            let mut s: SyntheticSpec = match spec {
                Some(p) => read_toml(&p)?,
                None => SyntheticSpec::default(),
            };
            s.n = n.unwrap_or(s.n);
            s.m = m.unwrap_or(s.m);
            s.d_true = d_true.unwrap_or(s.d_true);
            s.friends_per_user = friends.unwrap_or(s.friends_per_user);
            s.influential_per_user = influential.unwrap_or(s.influential_per_user);
            s.alpha = alpha.unwrap_or(s.alpha);
            s.noise = noise.unwrap_or(s.noise);
            s.ratings_per_user = ratings_per_user.unwrap_or(s.ratings_per_user);
            s.seed = seed.unwrap_or(s.seed);
            let dir = commands::synth(&s, &out)?;
            println!("{}", dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(t) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
        {
            eprintln!("error: cannot configure {t} threads: {e}");
            return ExitCode::from(1);
        }
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
