use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use normlab::harness::config::read_entries;
use normlab::harness::train::{self, RunRecord, RECORD_FILE};
use normlab::harness::{grid_search, DataSource, GridSpace, TrainConfig};
use normlab::instrument;
use normlab::Error;

#[derive(Parser)]
#[command(name = "normlab", version, about = "Normalization ablation experiments on small ResNets")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration and write its record, checkpoint and CSVs.
    Train {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
    /// Run every cell of a hyperparameter grid.
    Grid {
        #[command(flatten)]
        run: RunArgs,
        /// Runs per cell, each with seed = base seed + repeat index.
        #[arg(long)]
        repeats: Option<usize>,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        /// Use the standard lr x optimizer x batch grid around the base config.
        #[arg(long)]
        standard: bool,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
    /// Score a checkpoint on the validation split of a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// `synthetic` or a CIFAR-10 binary batch directory.
        #[arg(long)]
        data: Option<String>,
        /// Config file whose data settings select the dataset.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        val_limit: Option<usize>,
        #[arg(long, default_value_t = 100)]
        batch: usize,
    },
    /// Dump the instrumentation CSVs of a run directory or a single CSV file.
    Inspect {
        path: PathBuf,
        /// Print bin rows as well as summaries.
        #[arg(long)]
        bins: bool,
    },
}

#[derive(Args)]
struct RunArgs {
    /// key = value config file; flags override its entries.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    norm: Option<String>,
    #[arg(long)]
    opt: Option<String>,
    #[arg(long, allow_negative_numbers = true)]
    lr: Option<String>,
    #[arg(long)]
    batch: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    /// `synthetic` or a CIFAR-10 binary batch directory.
    #[arg(long)]
    data: Option<String>,
    #[arg(long)]
    train_limit: Option<String>,
    #[arg(long)]
    val_limit: Option<String>,
    /// Capture weight and gradient histograms during the first epoch.
    #[arg(long)]
    instrument: bool,
    /// Record the covariate-shift proxy during the first epoch.
    #[arg(long)]
    ics: bool,
}

fn data_value(v: &str) -> String {
    if v == "synthetic" || v.starts_with("cifar10:") {
        v.to_string()
    } else {
        format!("cifar10:{v}")
    }
}

impl RunArgs {
    fn entries(&self) -> anyhow::Result<BTreeMap<String, String>> {
        let mut entries = match &self.config {
            Some(path) => read_entries(path)?,
            None => BTreeMap::new(),
        };
        let flags = [
            ("model", &self.model),
            ("norm", &self.norm),
            ("opt", &self.opt),
            ("lr", &self.lr),
            ("batch", &self.batch),
            ("epochs", &self.epochs),
            ("seed", &self.seed),
            ("train_limit", &self.train_limit),
            ("val_limit", &self.val_limit),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                if key == "opt" {
                    entries.remove("optimizer");
                }
                entries.insert(key.to_string(), v.clone());
            }
        }
        if let Some(v) = &self.data {
            entries.insert("data".into(), data_value(v));
        }
        if self.instrument {
            entries.insert("instrument".into(), "true".into());
        }
        if self.ics {
            entries.insert("ics".into(), "true".into());
        }
        Ok(entries)
    }
}

fn print_record(record: &RunRecord, dir: &Path) {
    for e in &record.epochs {
        println!(
            "epoch {:>3}  loss {:.4}  train acc {:.4}  val acc {:.4}",
            e.epoch, e.train_loss, e.train_accuracy, e.validation_accuracy
        );
    }
    println!(
        "{}: final val acc {:.4}, best {:.4} (epoch {})",
        record.run_id, record.final_validation_accuracy, record.best_validation_accuracy, record.best_epoch
    );
    if let Some(r) = record.reference_accuracy {
        println!("reference accuracy at full scale: {r:.4}");
    }
    for note in &record.off_grid {
        println!("note: {note}");
    }
    println!("record: {}", dir.join(&record.run_id).join(RECORD_FILE).display());
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train { run, out } => {
            let mut config = TrainConfig::default();
            config.apply(&run.entries()?)?;
            config.validate()?;
            let record = train::train_run(&config, Some(&out))?;
            print_record(&record, &out);
        }
        Command::Grid { run, repeats, workers, standard, out } => {
            let (mut space, file_repeats) = GridSpace::from_entries(run.entries()?)?;
            if standard {
                space = GridSpace { models: space.models, norms: space.norms, ..GridSpace::standard(space.base) };
            }
            let repeats = repeats.or(file_repeats).unwrap_or(1);
            if repeats == 0 {
                return Err(Error::Config("repeats must be positive".into()).into());
            }
            space.validate()?;
            let (train_set, validation) = space.base.data.load()?;
            let output = grid_search(&space, repeats, workers, &train_set, &validation, Some(&out))?;
            for cell in &output.summary.cells {
                match cell.mean_validation_accuracy {
                    Some(acc) => println!("{:<50} {acc:.4}  ({}/{} runs)", cell.key, cell.completed, repeats),
                    None => println!("{:<50} failed", cell.key),
                }
            }
            match &output.summary.best {
                Some(best) => println!("best: {best}"),
                None => bail!("every grid run failed; see {}", out.join(normlab::harness::grid::INDEX_FILE).display()),
            }
        }
        Command::Eval { ckpt, data, config, val_limit, batch } => {
            let mut entries = match &config {
                Some(path) => read_entries(path)?,
                None => BTreeMap::new(),
            };
            if let Some(d) = &data {
                entries.insert("data".into(), data_value(d));
            }
            if let Some(n) = val_limit {
                entries.insert("val_limit".into(), n.to_string());
            }
            let explicit_classes = entries.contains_key("classes");
            let mut config = TrainConfig::default();
            config.apply(&entries)?;
            if let DataSource::Synthetic { classes, .. } = &mut config.data {
                if !explicit_classes {
                    // Without an explicit class count, match the checkpoint.
                    *classes = normlab::harness::checkpoint::load(&ckpt)?.config().num_classes;
                }
            }
            let (_, validation) = config.data.load()?;
            let acc = train::evaluate(&ckpt, &validation, batch)?;
            println!("accuracy {acc:.6} on {} examples", validation.len());
        }
        Command::Inspect { path, bins } => {
            let files = if path.is_dir() {
                let dir = path.join(train::INSTRUMENTATION_DIR);
                let dir = if dir.is_dir() { dir } else { path.clone() };
                let mut files: Vec<PathBuf> = std::fs::read_dir(&dir)
                    .with_context(|| format!("reading {}", dir.display()))?
                    .filter_map(|e| e.ok().map(|e| e.path()))
                    .filter(|p| p.extension().is_some_and(|x| x == "csv"))
                    .collect();
                files.sort();
                files
            } else {
                vec![path.clone()]
            };
            if files.is_empty() {
                bail!("no instrumentation CSVs under {}", path.display());
            }
            for file in files {
                println!("== {}", file.display());
                if file.file_name().is_some_and(|n| n == train::HISTOGRAM_FILE) {
                    for s in instrument::read_csv(&file)? {
                        let h = &s.histogram;
                        println!(
                            "{} {} {} {} steps {}..={}  n {}  mean {:.6}  std {:.6}  min {:.6}  max {:.6}",
                            s.run_id,
                            s.layer_position.as_str(),
                            s.phase.as_str(),
                            s.kind.as_str(),
                            s.step_range.0,
                            s.step_range.1,
                            h.total(),
                            h.mean,
                            h.std,
                            h.min,
                            h.max
                        );
                        if bins {
                            for (i, c) in h.counts.iter().enumerate() {
                                println!("  [{:.6}, {:.6}) {c}", h.edges[i], h.edges[i + 1]);
                            }
                        }
                    }
                } else {
                    let text = std::fs::read_to_string(&file).with_context(|| format!("reading {}", file.display()))?;
                    print!("{text}");
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let usage = matches!(e.downcast_ref::<Error>(), Some(Error::Config(_) | Error::Usage(_)));
            ExitCode::from(if usage { 2 } else { 1 })
        }
    }
}
