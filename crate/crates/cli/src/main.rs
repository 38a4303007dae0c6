use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use candle_core::{DType, Device};
use clap::{Parser, Subcommand};

use mapnet::checkpoint::{load_checkpoint, save_checkpoint, Manifest};
use mapnet::config::{parse_config, RunConfig};
use mapnet::data::{generate_dataset, read_dataset, read_sequence, write_dataset, Sequence};
use mapnet::eval::{run_ope_with, write_results, EvalReport, Summary};
use mapnet::gradcheck::{run_suite, Block, TOLERANCE};
use mapnet::model::MapNet;
use mapnet::plot::emit_plots;
use mapnet::tracker::{Tracker, TrackerConfig};
use mapnet::train::{log_line, Trainer};
use mapnet::Error;

#[derive(Parser)]
#[command(name = "mapnet", version, about = "Multi-attention associate prediction tracker")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded synthetic dataset in sequence-directory format.
    DemoData {
        #[arg(long, env = "MAPNET_DATA")]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 5)]
        sequences: usize,
        #[arg(long)]
        length: Option<usize>,
        /// Takes the synthetic generator settings from this file.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train a model and write a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Dataset root; synthetic data from the config is used otherwise.
        #[arg(long, env = "MAPNET_DATA")]
        data: Option<PathBuf>,
    },
    /// Track one sequence and write `x,y,w,h,score` lines.
    Track {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        sequence: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Tracker constants come from this file when given.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// One-pass evaluation over a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, env = "MAPNET_DATA")]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Finite-difference gradient check.
    Gradcheck {
        #[arg(long)]
        block: Option<Block>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Render plots and a curve table from an evaluation report.
    Plot {
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Contract(_) => 2,
        Error::Data(_) | Error::Io { .. } | Error::Image(_) | Error::Json(_) => 3,
        Error::Numeric(_) | Error::Tensor(_) => 4,
    }
}

fn tracker_config(path: Option<&Path>) -> mapnet::Result<TrackerConfig> {
    Ok(match path {
        Some(p) => parse_config(p)?.tracker,
        None => TrackerConfig::default(),
    })
}

fn print_summary(label: &str, s: &Summary) {
    println!(
        "{label:<12} frames {:>5}  SR {:.4}  PR {:.4}  NPR {:.4}  AO {:.4}  SR50 {:.4}  SR75 {:.4}",
        s.frames, s.success_auc, s.precision, s.norm_precision, s.ao, s.sr50, s.sr75
    );
}

fn demo_data(out: &Path, seed: u64, sequences: usize, length: Option<usize>, config: Option<&Path>) -> mapnet::Result<()> {
    let mut cfg = match config {
        Some(p) => parse_config(p)?,
        None => RunConfig::default(),
    };
    cfg.data.seed = seed;
    cfg.data.sequences = sequences;
    if let Some(l) = length {
        cfg.data.synthetic.length = l;
    }
    let cfg = cfg.resolve()?;
    let seqs = generate_dataset(&cfg.data.synthetic, seed, sequences)?;
    write_dataset(out, &seqs)?;
    cfg.write_echo(out)?;
    println!("wrote {} sequences to {}", seqs.len(), out.display());
    Ok(())
}

fn train(config: &Path, out: &Path, data: Option<&Path>) -> mapnet::Result<()> {
    let cfg = parse_config(config)?;
    cfg.write_echo(out)?;
    let root = data.map(Path::to_path_buf).or_else(|| cfg.data.root.clone());
    let seqs: Vec<Sequence> = match &root {
        Some(r) => read_dataset(r)?,
        None => generate_dataset(&cfg.data.synthetic, cfg.data.seed, cfg.data.sequences)?,
    };
    let net = MapNet::new(&cfg.model, DType::F32, &Device::Cpu, cfg.init_seed)?;
    let log_path = out.join("train_log.jsonl");
    let mut log = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut trainer = Trainer::new(&net, &cfg.train, &cfg.loss)?.with_dump_dir(out);
    let total = cfg.train.total_steps();
    trainer.run(&seqs, |r| {
        writeln!(log, "{}", log_line(r)?).map_err(|e| Error::io(&log_path, e))?;
        if (r.step + 1) % 50 == 0 || r.step + 1 == total {
            log::info!("step {}/{} loss {:.4} (cls {:.4}, reg {:.4})", r.step + 1, total, r.loss, r.cls, r.reg);
        }
        Ok(())
    })?;
    let manifest = Manifest::for_model(&net, cfg.loss.weights(), cfg.loss.kinds(), cfg.train.weight_decay, trainer.step_count());
    let ck = out.join("checkpoint");
    save_checkpoint(&ck, &net, &manifest)?;
    println!("trained {} steps; checkpoint at {}", trainer.step_count(), ck.display());
    Ok(())
}

fn track(checkpoint: &Path, sequence: &Path, out: &Path, config: Option<&Path>) -> mapnet::Result<()> {
    let (net, _) = load_checkpoint(checkpoint, &Device::Cpu)?;
    let tracker = Tracker::new(&net, tracker_config(config)?)?;
    let seq = read_sequence(sequence)?;
    let res = tracker.run_sequence(&seq.frames, &seq.boxes[0])?;
    let preds: Vec<_> = res.iter().map(|r| (r.bbox, r.score)).collect();
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    write_results(out, &preds)?;
    println!("tracked {} frames of {}", preds.len(), seq.name);
    Ok(())
}

fn eval(checkpoint: &Path, dataset: &Path, out: &Path, config: Option<&Path>) -> mapnet::Result<()> {
    let (net, _) = load_checkpoint(checkpoint, &Device::Cpu)?;
    let tracker = Tracker::new(&net, tracker_config(config)?)?;
    let report = run_ope_with(dataset, out, |seq| {
        let res = tracker.run_sequence(&seq.frames, &seq.boxes[0])?;
        Ok(res.iter().map(|r| (r.bbox, r.score)).collect())
    })?;
    for s in &report.sequences {
        print_summary(&s.name, &s.summary);
    }
    print_summary("overall", &report.overall);
    Ok(())
}

fn gradcheck(block: Option<Block>, seed: u64) -> mapnet::Result<bool> {
    let blocks: Vec<Block> = match block {
        Some(b) => vec![b],
        None => Block::ALL.to_vec(),
    };
    let mut ok = true;
    for r in run_suite(&blocks, seed)? {
        let verdict = if r.passed() { "ok" } else { "FAIL" };
        println!("{:<10} max_rel_error {:.3e}  coords {:>5}  {verdict}", r.block, r.max_rel_error, r.checked);
        ok &= r.passed();
    }
    Ok(ok)
}

fn plot(report: &Path, out: &Path) -> mapnet::Result<()> {
    let r = EvalReport::read_json(report)?;
    for p in emit_plots(&r, out)? {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::DemoData { out, seed, sequences, length, config } => demo_data(&out, seed, sequences, length, config.as_deref()),
        Command::Train { config, out, data } => train(&config, &out, data.as_deref()),
        Command::Track { checkpoint, sequence, out, config } => track(&checkpoint, &sequence, &out, config.as_deref()),
        Command::Eval { checkpoint, dataset, out, config } => eval(&checkpoint, &dataset, &out, config.as_deref()),
        Command::Gradcheck { block, seed } => match gradcheck(block, seed) {
            Ok(true) => Ok(()),
            Ok(false) => Err(Error::Numeric(format!("gradient check above {TOLERANCE:e}"))),
            Err(e) => Err(e),
        },
        Command::Plot { report, out } => plot(&report, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
