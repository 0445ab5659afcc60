use std::fmt::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use axtrain::checkpoint::{load_model, save_model};
use axtrain::config::RunConfig;
use axtrain::model::{KernelMode, Model, Phase};
use axtrain::mult::{characterize, MultTable};
use axtrain::report::{self, Manifest, CHECKPOINT_FILE};
use axtrain::trainer::{calibrate, evaluate, time_steps, train};
use axtrain::{Error, Result};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "axtrain", version, about = "Train and simulate small CNNs on approximate hardware")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train per the config; writes metrics, summary, checkpoint and manifest.
    Train {
        config: PathBuf,
        /// Output directory, overriding `run.output_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Accuracy of a checkpoint with the accurate kernels of the config's method.
    Eval {
        checkpoint: PathBuf,
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Error statistics of a multiplier table (`default:<k>` or a file).
    CharacterizeMult {
        table: String,
        /// Also write the stats as JSON plus a manifest here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit the per-layer error models on one batch and write the curves as CSV.
    CalibrateDump {
        config: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Sample points per Type 1 curve.
        #[arg(long, default_value_t = 64)]
        points: usize,
    },
    /// Time exact, injection and accurate iterations.
    Bench {
        config: PathBuf,
        #[arg(long, default_value_t = 10)]
        iters: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match std::panic::catch_unwind(|| run(cli.command)) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_user_error() { 1 } else { 2 })
        }
        Err(_) => ExitCode::from(2),
    }
}

fn out_dir(cfg: &RunConfig, out: Option<PathBuf>) -> PathBuf {
    out.unwrap_or_else(|| cfg.run.output_dir.clone())
}

fn manifest(cmd: &str, cfg: &RunConfig, outputs: Vec<String>) -> Result<Manifest> {
    let mut m = Manifest::new(cmd, Some(cfg.hash()?), Some(cfg.train.seed));
    m.outputs = outputs;
    Ok(m)
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train { config, out } => {
            let cfg = RunConfig::load(&config)?;
            let dir = out_dir(&cfg, out);
            let data = cfg.load_data()?;
            let hw = cfg.hardware()?;
            let mut model = cfg.build_model()?;
            let rep = train(&cfg.train, &mut model, &data.train, data.eval.as_ref(), &hw)?;
            let mut outputs = report::write_report(&dir, &rep)?;
            save_model(dir.join(CHECKPOINT_FILE), &model)?;
            outputs.push(CHECKPOINT_FILE.into());
            std::fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
            outputs.push("config.toml".into());
            report::write_manifest(&dir, &manifest("train", &cfg, outputs)?)?;
            match (&rep.diverged, rep.final_accuracy) {
                (Some(d), _) => println!("diverged at step {}: {}", d.step, d.detail),
                (None, Some(a)) => println!("final accuracy {a:.4} after {} steps", rep.total_steps),
                (None, None) => {}
            }
            println!("wrote {}", dir.display());
        }
        Command::Eval { checkpoint, config, out } => {
            let cfg = RunConfig::load(&config)?;
            let dir = out_dir(&cfg, out);
            let data = cfg.load_data()?;
            let hw = cfg.hardware()?;
            let mut model = Model::tiny_conv(&cfg.model, cfg.train.method, cfg.train.seed)?;
            load_model(&checkpoint, &mut model)?;
            model.set_mode(cfg.train.method);
            let set = data.eval.as_ref().unwrap_or(&data.train);
            let acc = evaluate(&model, set, &hw)?;
            println!("accuracy {acc:.4} on {} {} examples", set.len(), set.split);
            let body = serde_json::json!({ "checkpoint": checkpoint, "split": set.split, "examples": set.len(), "accuracy": acc });
            std::fs::create_dir_all(&dir)?;
            std::fs::write(dir.join("eval.json"), body.to_string() + "\n")?;
            report::write_manifest(&dir, &manifest("eval", &cfg, vec!["eval.json".into()])?)?;
        }
        Command::CharacterizeMult { table, out } => {
            let t = MultTable::from_spec(&table)?;
            let s = characterize(&t);
            println!("table {}", t.name);
            println!("mean_relative_error {}", s.mean_relative_error);
            println!("max_abs_error {}", s.max_abs_error);
            println!("mean_error {}", s.mean_error);
            println!("error_variance {}", s.error_variance);
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir)?;
                let text = serde_json::to_string_pretty(&s).map_err(|e| Error::Invariant(e.to_string()))?;
                std::fs::write(dir.join("mult_stats.json"), text + "\n")?;
                let mut m = Manifest::new("characterize-mult", None, None);
                m.outputs = vec!["mult_stats.json".into()];
                report::write_manifest(&dir, &m)?;
            }
        }
        Command::CalibrateDump {
            config,
            checkpoint,
            out,
            points,
        } => {
            let cfg = RunConfig::load(&config)?;
            if cfg.train.method == KernelMode::Exact {
                return Err(Error::Config("calibrate-dump needs an approximate method".into()));
            }
            let dir = out_dir(&cfg, out);
            let data = cfg.load_data()?;
            let hw = cfg.hardware()?;
            let mut model = cfg.build_model()?;
            if let Some(p) = &checkpoint {
                load_model(p, &mut model)?;
                model.set_mode(cfg.train.method);
            }
            let n = cfg.train.batch_size.min(data.train.len());
            let (x, _) = data.train.batch(&(0..n).collect::<Vec<_>>())?;
            calibrate(&mut model, &x, &hw, cfg.train.proxy, 0)?;
            let csv = error_model_csv(&model, points.max(2));
            std::fs::create_dir_all(&dir)?;
            std::fs::write(dir.join("error_models.csv"), csv)?;
            report::write_manifest(&dir, &manifest("calibrate-dump", &cfg, vec!["error_models.csv".into()])?)?;
            println!("wrote {}", dir.join("error_models.csv").display());
        }
        Command::Bench { config, iters, out } => {
            let cfg = RunConfig::load(&config)?;
            if cfg.train.method == KernelMode::Exact {
                return Err(Error::Config("bench needs an approximate method".into()));
            }
            if iters == 0 {
                return Err(Error::Config("iters must be positive".into()));
            }
            let dir = out_dir(&cfg, out);
            let data = cfg.load_data()?;
            let hw = cfg.hardware()?;
            let mut model = cfg.build_model()?;
            let n = cfg.train.batch_size.min(data.train.len());
            let (x, _) = data.train.batch(&(0..n).collect::<Vec<_>>())?;
            calibrate(&mut model, &x, &hw, cfg.train.proxy, 0)?;
            let mut rows = vec![];
            for (name, phase) in [("exact", Phase::Exact), ("injection", Phase::Injection), ("accurate", Phase::Accurate)] {
                let t = time_steps(&cfg.train, &mut model.clone(), &data.train, &hw, phase, iters)?;
                rows.push((name, t.mean_secs().unwrap_or(0.0)));
            }
            let exact = rows[0].1;
            let mut csv = String::from("phase,mean_iter_secs,ratio_to_exact\n");
            println!("{:<10} {:>12} {:>8}", "phase", "ms/iter", "x exact");
            for (name, secs) in &rows {
                println!("{name:<10} {:>12.3} {:>8.2}", secs * 1e3, secs / exact);
                let _ = writeln!(csv, "{name},{secs:.6e},{:.4}", secs / exact);
            }
            println!("accurate / injection = {:.2}", rows[2].1 / rows[1].1);
            std::fs::create_dir_all(&dir)?;
            std::fs::write(dir.join("bench.csv"), csv)?;
            report::write_manifest(&dir, &manifest("bench", &cfg, vec!["bench.csv".into()])?)?;
        }
    }
    Ok(())
}

/// `layer,kind,y,mean,std`: Type 1 curves sampled on their fitted domain,
/// Type 2 as one row with an empty `y`.
fn error_model_csv(model: &Model, points: usize) -> String {
    let mut s = String::from("layer,kind,y,mean,std\n");
    let weighted = model.layers.iter().filter(|l| l.weight.is_some());
    for (i, layer) in weighted.enumerate() {
        if let Some(m) = &layer.state.type1 {
            for p in 0..points {
                let y = m.lo + (m.hi - m.lo) * p as f32 / (points - 1) as f32;
                let _ = writeln!(s, "{i},type1,{y},{},{}", m.mean_at(y), m.std_at(y));
            }
        }
        if let Some(m) = &layer.state.type2 {
            let _ = writeln!(s, "{i},type2,,{},{}", m.mean, m.var.sqrt());
        }
    }
    s
}
