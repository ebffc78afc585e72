//! Command-line front end. [`run`] parses arguments, executes one subcommand
//! and maps the outcome to an exit code: 0 success, 1 input error, 2 numeric
//! or checkpoint error.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use bvar::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use bvar::config::RunConfig;
use bvar::data::{export_patches, load_patches, split, synth_generate, DatasetSplit, LabeledImage};
use bvar::evaluation::MetricsReport;
use bvar::network::{BayesianNetwork, NetworkSpec};
use bvar::training::{eval_seed, train};
use bvar::triage::{band_partition, default_grid, read_records, records_to_csv, sweep, Band, Field};
use bvar::tsne::{parse_feature_csv, tsne_fit};
use bvar::uncertainty::{normalize_epistemic, predict_dataset, UncertaintyRecord};
use bvar::{rng, Error, Result, Tensor};
use clap::{Parser, Subcommand};
use serde::Serialize;

#[derive(Parser, Debug)]
#[command(name = "bvar", about = "Variational Bayesian CNN with uncertainty-based triage")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic two-class PNG dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Images per class.
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 16)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Fraction of labels flipped at random.
        #[arg(long, default_value_t = 0.0)]
        label_noise: f64,
    },
    /// Train a network and write a checkpoint plus a per-epoch trace CSV.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        arch: Option<String>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to the config's `trace`, else `<out>.trace.csv`.
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print classification metrics as JSON.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Monte-Carlo draws; defaults to the training `eval_samples`.
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Write per-image predictions with aleatoric and epistemic uncertainty.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 25)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Sweep uncertainty thresholds over prediction records.
    Triage {
        #[arg(long)]
        records: PathBuf,
        #[arg(long, default_value = "aleatoric")]
        field: String,
        #[arg(long, default_value_t = 50)]
        grid: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarize records by normalized epistemic band as JSON.
    Bands {
        #[arg(long)]
        records: PathBuf,
    },
    /// Embed images or feature vectors into 3D with t-SNE.
    Embed {
        #[arg(long, conflicts_with = "features", required_unless_present = "features")]
        data: Option<PathBuf>,
        #[arg(long)]
        features: Option<PathBuf>,
        /// Prediction records supplying `E` (matched by id) for `--data`.
        #[arg(long)]
        records: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        perplexity: Option<f64>,
        #[arg(long)]
        iterations: Option<usize>,
    },
}

/// Runs the command line `argv` (program name first) and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    if let Err(e) = bvar::init_thread_pool() {
        eprintln!("error: {e}");
        return e.exit_code();
    }
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::Input(format!("cannot write {}: {e}", path.display())))
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    path.map_or_else(|| Ok(RunConfig::default()), RunConfig::load)
}

fn load_split(data: &Path, seed: u64) -> Result<DatasetSplit> {
    let report = load_patches(data)?;
    if report.skipped > 0 {
        log::warn!("skipped {} undecodable or mis-sized files", report.skipped);
    }
    split(report.images, seed)
}

fn input_shape(images: &[LabeledImage]) -> Result<[usize; 3]> {
    let first = images
        .first()
        .ok_or_else(|| Error::Input("dataset is empty".into()))?;
    first
        .pixels
        .shape()
        .try_into()
        .map_err(|_| Error::Dimension("images must be [C, H, W]".into()))
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Synth {
            out,
            n,
            size,
            seed,
            label_noise,
        } => {
            let images = synth_generate(n, size, seed, label_noise)?;
            export_patches(&out, &images)?;
            log::info!("wrote {} images to {}", images.len(), out.display());
            Ok(())
        }
        Command::Train {
            data,
            arch,
            config,
            out,
            trace,
            seed,
        } => {
            let mut rc = load_config(config.as_deref())?;
            if let Some(a) = arch {
                rc.arch = a;
            }
            if let Some(s) = seed {
                rc.seed = s;
                rc.split_seed = s;
            }
            let tc = rc.training();
            let splits = load_split(&data, rc.split_seed)?;
            let spec = NetworkSpec::preset(&rc.arch, input_shape(&splits.train)?, tc.padding)?;
            let model = BayesianNetwork::new(spec, tc.prior, rc.init_options(), &mut rng::seeded(tc.seed))?;
            log::info!("training {} ({} parameters)", rc.arch, model.num_parameters());
            let (model, tr) = train(model, &splits, &tc)?;
            let trace_path = trace
                .or(rc.trace.clone())
                .unwrap_or_else(|| PathBuf::from(format!("{}.trace.csv", out.display())));
            save_checkpoint(
                &Checkpoint {
                    model,
                    config: tc,
                    seed: rc.split_seed,
                },
                &out,
            )?;
            write_file(&trace_path, tr.to_csv())
        }
        Command::Eval {
            model,
            data,
            split: which,
            n,
            seed,
        } => {
            let ckpt = load_checkpoint(&model)?;
            let splits = load_split(&data, ckpt.seed)?;
            let images = splits.by_name(&which)?;
            let n = n.unwrap_or(ckpt.config.eval_samples);
            let seed = eval_seed(seed.unwrap_or(ckpt.config.seed));
            let sets = predict_dataset(&ckpt.model, &pixels(&images), n, seed)?;
            let preds: Vec<usize> = sets.iter().map(|s| s.predicted_class()).collect();
            let labels: Vec<usize> = images.iter().map(|i| i.label).collect();
            let report = MetricsReport::from_predictions(&preds, &labels)?;
            println!("{}", report.to_json());
            Ok(())
        }
        Command::Predict {
            model,
            data,
            n,
            out,
            split: which,
            seed,
        } => {
            let ckpt = load_checkpoint(&model)?;
            let splits = load_split(&data, ckpt.seed)?;
            let images = splits.by_name(&which)?;
            let seed = eval_seed(seed.unwrap_or(ckpt.config.seed));
            let sets = predict_dataset(&ckpt.model, &pixels(&images), n, seed)?;
            let mut records: Vec<UncertaintyRecord> = images
                .iter()
                .zip(&sets)
                .map(|(img, s)| UncertaintyRecord::from_samples(img.id.clone(), img.label, s))
                .collect();
            normalize_epistemic(&mut records)?;
            write_file(&out, records_to_csv(&records)?)
        }
        Command::Triage {
            records,
            field,
            grid,
            out,
        } => {
            let field = Field::parse(&field)?;
            let records = read_records(&records)?;
            let thresholds = default_grid(&records, field, grid)?;
            write_file(&out, sweep(&records, &thresholds, field)?.to_csv())
        }
        Command::Bands { records } => {
            let records = read_records(&records)?;
            let p = band_partition(&records)?;
            let summary = |rs: &[UncertaintyRecord]| BandSummary {
                count: rs.len(),
                accuracy: (!rs.is_empty())
                    .then(|| rs.iter().filter(|r| r.correct()).count() as f64 / rs.len() as f64),
            };
            let json = serde_json::to_string(&BandsReport {
                low: summary(&p.low),
                medium: summary(&p.medium),
                high: summary(&p.high),
            })
            .expect("band report serializes");
            println!("{json}");
            Ok(())
        }
        Command::Embed {
            data,
            features,
            records,
            config,
            out,
            seed,
            perplexity,
            iterations,
        } => {
            let rc = load_config(config.as_deref())?;
            let mut params = rc.tsne();
            if let Some(s) = seed {
                params.seed = s;
            }
            if let Some(p) = perplexity {
                params.perplexity = p;
            }
            if let Some(i) = iterations {
                params.iterations = i;
            }
            let table = match (data, features) {
                (_, Some(f)) => {
                    let text = std::fs::read_to_string(&f)
                        .map_err(|e| Error::Input(format!("cannot read {}: {e}", f.display())))?;
                    parse_feature_csv(&text)?
                }
                (Some(d), None) => images_table(&d, records.as_deref())?,
                (None, None) => unreachable!("clap requires --data or --features"),
            };
            let emb = tsne_fit(&table.features, &params)?;
            let mut csv = String::from("id,y1,y2,y3,label,band\n");
            for i in 0..emb.len() {
                let y = emb.point(i);
                let label = table.labels[i].map_or(String::new(), |l| l.to_string());
                let band = match table.normalized_epistemic[i] {
                    Some(e) => Band::of(e)?.as_str(),
                    None => "",
                };
                let _ = writeln!(
                    csv,
                    "{},{:.16e},{:.16e},{:.16e},{label},{band}",
                    csv_field(&table.ids[i]),
                    y[0],
                    y.get(1).copied().unwrap_or(0.0),
                    y.get(2).copied().unwrap_or(0.0)
                );
            }
            write_file(&out, csv)
        }
    }
}

#[derive(Serialize)]
struct BandSummary {
    count: usize,
    /// `null` for an empty band.
    accuracy: Option<f64>,
}

#[derive(Serialize)]
struct BandsReport {
    low: BandSummary,
    medium: BandSummary,
    high: BandSummary,
}

fn pixels<'a>(images: &[&'a LabeledImage]) -> Vec<&'a Tensor> {
    images.iter().map(|i| &i.pixels).collect()
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Flattened images from a dataset directory, with `E` looked up by id.
fn images_table(data: &Path, records: Option<&Path>) -> Result<bvar::tsne::FeatureTable> {
    let report = load_patches(data)?;
    let e_by_id: HashMap<String, f64> = match records {
        Some(p) => read_records(p)?
            .into_iter()
            .map(|r| (r.id, r.normalized_epistemic))
            .collect(),
        None => HashMap::new(),
    };
    let mut t = bvar::tsne::FeatureTable::default();
    for img in report.images {
        t.normalized_epistemic.push(e_by_id.get(&img.id).copied());
        t.labels.push(Some(img.label));
        t.features.push(img.pixels.data().to_vec());
        t.ids.push(img.id);
    }
    Ok(t)
}

/// Flushes standard output, ignoring a closed pipe.
pub fn flush_stdout() {
    let _ = std::io::stdout().flush();
}
