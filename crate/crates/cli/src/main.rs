use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use guidegan_cli::grid::describe;
use guidegan_cli::{
    cmd_eval, cmd_gradcheck, cmd_subsample, cmd_train, cmd_translate, output_root, run_tables, CliError, ConfigArgs,
    Direction, EvalOptions, GridOptions, Table, OUT_ENV,
};
use guidegan_core::config::{preset_names, EvalModes};
use guidegan_core::TrainingConfig;
use guidegan_tensor::fault::Fault;

#[derive(Parser)]
#[command(name = "guidegan", version, about = "Guided CycleGAN training and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigFlags {
    /// TOML config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Named preset, e.g. `ablation/attention-guidance`.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Bitwise-reproducible execution (`--deterministic=false` to disable).
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    deterministic: Option<bool>,
    /// Dataset root, overriding `data.root`.
    #[arg(long)]
    data_root: Option<PathBuf>,
    #[arg(long)]
    max_steps: Option<u64>,
}

impl ConfigFlags {
    fn args(&self) -> ConfigArgs {
        ConfigArgs {
            config: self.config.clone(),
            preset: self.preset.clone(),
            seed: self.seed,
            deterministic: self.deterministic,
            data_root: self.data_root.clone(),
            max_steps: self.max_steps,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration into `<out>/<config name>`.
    Train {
        #[command(flatten)]
        cfg: ConfigFlags,
        /// Output root.
        #[arg(long, env = OUT_ENV)]
        out: Option<PathBuf>,
        /// Continue an existing run directory.
        #[arg(long)]
        resume: bool,
    },
    /// KID of a checkpoint (or the latest checkpoint of a run directory).
    Eval {
        checkpoint: PathBuf,
        #[arg(long)]
        data_root: Option<PathBuf>,
        /// target-only, both or all.
        #[arg(long, value_parser = parse_modes)]
        mode: Option<EvalModes>,
        #[arg(long)]
        seed: Option<u64>,
        /// Report directory; defaults to `<checkpoint>/eval`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Translate images with one generator of a checkpoint.
    Translate {
        checkpoint: PathBuf,
        /// AB or BA.
        #[arg(long)]
        direction: String,
        #[arg(long)]
        out: PathBuf,
        /// Skip the side-by-side grid image.
        #[arg(long)]
        no_grid: bool,
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Keep one image per distance block of size k in every split.
    Subsample {
        dataset: PathBuf,
        #[arg(long)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Resolution the embedding is computed at.
        #[arg(long, default_value_t = 32)]
        image_size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Gradient-check the op catalog and the loss compositions.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Deliberately break a backward pass (`conv2d-sign`).
        #[arg(long)]
        inject_fault: Option<String>,
    },
    /// Train and evaluate every row of one or more experiment tables.
    Grid {
        /// ablation, single or merge; repeatable.
        #[arg(long = "table", required = true)]
        tables: Vec<String>,
        #[command(flatten)]
        cfg: ConfigFlags,
        #[arg(long, env = OUT_ENV)]
        out: Option<PathBuf>,
    },
    /// List the named presets.
    Presets,
}

fn parse_modes(s: &str) -> Result<EvalModes, String> {
    match s {
        "target-only" => Ok(EvalModes::TargetOnly),
        "both" => Ok(EvalModes::Both),
        "all" => Ok(EvalModes::All),
        _ => Err(format!("expected target-only, both or all, got `{s}`")),
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train { cfg, out, resume } => {
            let cfg = cfg.args().resolve()?;
            let run_dir = output_root(out.as_deref(), Some(&cfg)).join(&cfg.name);
            let o = cmd_train(cfg, &run_dir, resume)?;
            println!("{} steps, stopped: {:?}, run: {}", o.steps, o.reason, o.run_dir.display());
        }
        Command::Eval {
            checkpoint,
            data_root,
            mode,
            seed,
            out,
        } => {
            let reports = cmd_eval(&checkpoint, &EvalOptions { data_root, mode, seed, out })?;
            for r in reports {
                println!("{} {:?}: {:.3} ± {:.3} (KID x 100)", r.direction, r.mode, r.mean, r.std);
            }
        }
        Command::Translate {
            checkpoint,
            direction,
            out,
            no_grid,
            inputs,
        } => {
            let dir: Direction = direction.parse()?;
            let o = cmd_translate(&checkpoint, &inputs, dir, &out, !no_grid)?;
            println!("{} images written to {}", o.outputs.len(), out.display());
        }
        Command::Subsample {
            dataset,
            k,
            seed,
            image_size,
            out,
        } => {
            let m = cmd_subsample(&dataset, k, seed, image_size, &out)?;
            for (split, sel) in &m.splits {
                println!("{split}: {} of {}", sel.selected.len(), sel.source_count);
            }
        }
        Command::Gradcheck {
            trials,
            seed,
            inject_fault,
        } => {
            let fault = inject_fault
                .map(|f| f.parse::<Fault>().map_err(CliError::Validation))
                .transpose()?;
            let report = cmd_gradcheck(trials, seed, fault)?;
            print!("{}", report.render());
            if !report.passed() {
                return Err(CliError::Runtime(guidegan_core::Error::Invalid("gradient check failed".into())));
            }
        }
        Command::Grid { tables, cfg, out } => {
            let tables = tables.iter().map(|t| t.parse()).collect::<Result<Vec<Table>, _>>()?;
            let opts = GridOptions {
                out: output_root(out.as_deref(), None),
                overrides: cfg.args(),
            };
            for report in run_tables(&tables, &opts)? {
                println!("{}", report.render());
            }
        }
        Command::Presets => {
            for name in preset_names() {
                let cfg = TrainingConfig::preset(name)?;
                println!("{name:<36} {}", describe(&cfg));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
