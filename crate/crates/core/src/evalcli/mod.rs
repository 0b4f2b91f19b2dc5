//! Dice reports, run configuration and the `scribseg` command line.

pub mod config;
pub mod report;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

pub use config::RunConfig;
pub use report::{DiceReport, ReportRow, Stat, Table};

use crate::checkpoint::Checkpoint;
use crate::dataio::formats::{read_labels, write_bytes, write_labels};
use crate::dataio::{synth_dataset, Dataset};
use crate::emdriver::{self, PipelineConfig, RecursionState, Variant};
use crate::error::{Error, ErrorClass, Result, ResultExt};
use crate::grid::LabelMap;
use crate::rng;
use crate::segnet::{self, NetParams};

#[derive(Debug, Parser)]
#[command(name = "scribseg", version, about = "Scribble-supervised segmentation training and evaluation")]
pub struct Cli {
    /// Sectioned key=value configuration file.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Master seed (overrides run.seed).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (overrides run.out).
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Override one config key, e.g. `--set train.lr0=0.01`.
    #[arg(long = "set", global = true, value_name = "SECTION.KEY=VALUE")]
    pub set: Vec<String>,
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic benchmark dataset.
    Synth,
    /// Grow seed areas from the training scribbles.
    Seed {
        #[arg(long, value_name = "MANIFEST")]
        data: Option<PathBuf>,
    },
    /// One M step: on seeds from scratch, or on given targets from a checkpoint.
    Train {
        #[arg(long, value_name = "MANIFEST")]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Directory of `<id>.pgm` targets.
        #[arg(long, value_name = "DIR")]
        targets: Option<PathBuf>,
    },
    /// One E step with the relabeler of the selected variant.
    Relabel {
        #[arg(long, value_name = "MANIFEST")]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        variant: Option<String>,
    },
    /// Dice on the test split for finished runs or a checkpoint.
    Eval {
        #[arg(long, value_name = "MANIFEST")]
        data: Option<PathBuf>,
        /// Pipeline output directory (repeatable).
        #[arg(long = "run", value_name = "DIR")]
        runs: Vec<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        variant: Option<String>,
    },
    /// Separate-CRF grid search on the validation split.
    Gridsearch {
        #[arg(long, value_name = "MANIFEST")]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Seeds, recursive training and test evaluation for one variant.
    Pipeline {
        #[arg(long, value_name = "MANIFEST")]
        data: Option<PathBuf>,
        #[arg(long)]
        variant: Option<String>,
    },
}

pub fn exit_code(class: ErrorClass) -> i32 {
    match class {
        ErrorClass::Usage => 1,
        ErrorClass::Data => 2,
        ErrorClass::Numeric => 3,
    }
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(e.class())
        }
    }
}

fn parse_variant(s: &str) -> Result<Variant> {
    Variant::parse(s).ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::read(p)?,
        None => RunConfig::default(),
    };
    for kv in &cli.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Usage(format!("--set expects SECTION.KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(s) = cli.seed {
        cfg.set("run.seed", &s.to_string())?;
    }
    if let Some(o) = &cli.out {
        cfg.out = Some(o.clone());
    }
    let (data, variant) = match &cli.command {
        Command::Synth => (None, None),
        Command::Seed { data } | Command::Train { data, .. } | Command::Gridsearch { data, .. } => (data.as_ref(), None),
        Command::Relabel { data, variant, .. }
        | Command::Eval { data, variant, .. }
        | Command::Pipeline { data, variant } => (data.as_ref(), variant.as_ref()),
    };
    if let Some(d) = data {
        cfg.data = Some(d.clone());
    }
    if let Some(v) = variant {
        cfg.pipeline.variant = parse_variant(v)?;
    }
    Ok(cfg)
}

fn load_dataset(cfg: &RunConfig) -> Result<(Dataset, PipelineConfig)> {
    let ds = Dataset::load(cfg.require_data()?)?;
    let width = ds.train.first().or(ds.test.first()).map(|s| s.image.width()).unwrap_or(64);
    let mut cfg = cfg.clone();
    if !cfg.given.iter().any(|k| k == "net.num_labels") {
        cfg.pipeline.net.num_labels = ds.num_labels;
    }
    let p = cfg.resolved_pipeline(width)?;
    cfg.log_defaults(&["run", "net", "train", "seeder", "crf", "crfrnn", "uncertainty"]);
    Ok((ds, p))
}

fn train_seeds(ds: &Dataset, p: &PipelineConfig) -> Result<Vec<LabelMap>> {
    ds.train
        .iter()
        .map(|s| {
            let sc = s
                .scribbles
                .as_ref()
                .ok_or_else(|| Error::Input(format!("record {} has no scribbles", s.id)))?;
            crate::seeder::generate_seeds(&s.image, sc, ds.num_labels, &p.seeder).context_with(|| format!("record {}", s.id))
        })
        .collect()
}

fn report_for(ds: &Dataset, ckpt: &Checkpoint, variant: Variant) -> Result<DiceReport> {
    let scores = emdriver::evaluate(&ckpt.net, ckpt.rnn.as_ref(), &ds.test, ds.num_labels)?;
    DiceReport::new(variant, scores, ds.num_labels)
}

fn emit_table(table: &Table, out: Option<&Path>) -> Result<()> {
    print!("{}", table.to_text());
    if let Some(dir) = out {
        write_bytes(&dir.join("report.csv"), table.to_csv().as_bytes())?;
    }
    Ok(())
}

fn execute(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Synth => {
            cfg.log_defaults(&["synth"]);
            let out = cfg.require_out()?;
            let m = synth_dataset(out, &cfg.synth)?;
            println!("wrote {} records to {}", m.records.len(), out.join("manifest.csv").display());
        }
        Command::Seed { .. } => {
            cfg.require_data()?;
            let out = cfg.require_out()?.to_path_buf();
            let (ds, p) = load_dataset(&cfg)?;
            let (mut seeded, mut total) = (0usize, 0usize);
            for (s, z) in ds.train.iter().zip(train_seeds(&ds, &p)?) {
                seeded += z.count_known();
                total += z.len();
                write_labels(&out.join("seeds").join(format!("{}.pgm", s.id)), &z)?;
            }
            println!("seeded {:.1}% of {} training pixels", 100.0 * seeded as f64 / total.max(1) as f64, total);
        }
        Command::Train { checkpoint, targets, .. } => {
            cfg.require_data()?;
            let out = cfg.require_out()?.to_path_buf();
            let (ds, p) = load_dataset(&cfg)?;
            let net = if checkpoint.is_none() && targets.is_none() {
                emdriver::initial_state(&ds, &p, Some(&out))?.net
            } else {
                let mut net = match checkpoint {
                    Some(c) => Checkpoint::read(c)?.net,
                    None => NetParams::init(p.net.clone(), &mut rng::stream(p.master_seed, "net-init"))?,
                };
                let labels: Vec<LabelMap> = match targets {
                    Some(dir) => ds
                        .train
                        .iter()
                        .map(|s| read_labels(&dir.join(format!("{}.pgm", s.id))))
                        .collect::<Result<_>>()?,
                    None => train_seeds(&ds, &p)?,
                };
                let data: Vec<_> = ds.train.iter().zip(labels).map(|(s, l)| (s.image.clone(), l)).collect();
                let train = segnet::TrainConfig {
                    seed: rng::derive_seed(p.master_seed, "train"),
                    ..p.train.clone()
                };
                let stream = format!("train/{}", net.t);
                let report = segnet::train_m_step(&mut net, &data, &train, &stream)?;
                if let Some(l) = report.losses.last() {
                    println!("final loss {l:.5}");
                }
                net
            };
            let ck = Checkpoint { net, rnn: None };
            ck.write(&out.join("checkpoint.ckpt"))?;
            println!("checkpoint {} sha256 {}", out.join("checkpoint.ckpt").display(), ck.hash());
        }
        Command::Relabel { checkpoint, .. } => {
            cfg.require_data()?;
            let out = cfg.require_out()?.to_path_buf();
            let (ds, p) = load_dataset(&cfg)?;
            let ck = Checkpoint::read(checkpoint)?;
            let seeds = train_seeds(&ds, &p)?;
            let rnn = match (p.variant.uses_rnn(), ck.rnn) {
                (true, Some(r)) => Some(r),
                (true, None) => p.rnn.clone(),
                (false, _) => None,
            };
            let state = RecursionState {
                recursion: 0,
                net: ck.net,
                rnn,
                targets: seeds.clone(),
                seeds,
                records: Vec::new(),
            };
            let ctx = emdriver::prepare_estep(&ds, &p, &state.net)?;
            let targets = emdriver::estep(&ds, &p, &ctx, &state)?;
            let mut unknown = 0;
            for (s, t) in ds.train.iter().zip(&targets) {
                unknown += t.count_unknown();
                write_labels(&out.join("targets").join(format!("{}.pgm", s.id)), t)?;
            }
            println!("relabeled {} images ({}), {} pixels left uncertain", targets.len(), p.variant, unknown);
        }
        Command::Gridsearch { checkpoint, .. } => {
            cfg.require_data()?;
            let out = cfg.require_out()?.to_path_buf();
            let (ds, mut p) = load_dataset(&cfg)?;
            if p.crf_grid.is_empty() {
                return Err(Error::Config("gridsearch needs at least one key in [gridsearch]".into()));
            }
            p.variant = Variant::SepCrf;
            let ck = Checkpoint::read(checkpoint)?;
            let ctx = emdriver::prepare_estep(&ds, &p, &ck.net)?;
            let g = ctx.grid.expect("non-empty grid was searched");
            let mut csv = String::from("w1,w2,sigma_alpha,sigma_beta,sigma_gamma,val_dice\n");
            for (c, s) in p.crf_grid.iter().zip(&g.scores) {
                csv.push_str(&format!("{},{},{},{},{},{}\n", c.w1, c.w2, c.sigma_alpha, c.sigma_beta, c.sigma_gamma, s));
            }
            write_bytes(&out.join("gridsearch.csv"), csv.as_bytes())?;
            write_bytes(&out.join("crf_params.txt"), emdriver::crf_params_text(&g.best).as_bytes())?;
            print!("{}", emdriver::crf_params_text(&g.best));
        }
        Command::Eval { runs, checkpoint, .. } => {
            let (ds, p) = load_dataset(&cfg)?;
            let mut reports = Vec::new();
            for dir in runs {
                let name = std::fs::read_to_string(dir.join("variant.txt")).map_err(|e| Error::io(dir.join("variant.txt"), e))?;
                let variant = parse_variant(name.trim())?;
                let ck = Checkpoint::read(&dir.join("final.ckpt"))?;
                reports.push(report_for(&ds, &ck, variant).context_with(|| format!("run {}", dir.display()))?);
            }
            if let Some(c) = checkpoint {
                reports.push(report_for(&ds, &Checkpoint::read(c)?, p.variant)?);
            }
            if reports.is_empty() {
                return Err(Error::Usage("eval needs --run or --checkpoint".into()));
            }
            emit_table(&Table::build(&reports)?, cfg.out.as_deref())?;
        }
        Command::Pipeline { .. } => {
            cfg.require_data()?;
            let out = cfg.require_out()?.to_path_buf();
            let (ds, p) = load_dataset(&cfg)?;
            let res = emdriver::run_pipeline(&ds, &p, Some(&out))?;
            write_bytes(&out.join("variant.txt"), format!("{}\n", p.variant).as_bytes())?;
            let ck = Checkpoint {
                net: res.state.net,
                rnn: res.state.rnn,
            };
            emit_table(&Table::build(&[report_for(&ds, &ck, p.variant)?])?, Some(&out))?;
        }
    }
    Ok(())
}
