use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use cmrorient::datagen::{load_cases, write_dataset, ImagePair, Modality, Sample, SplitSpec};
use cmrorient::nets::Model;
use cmrorient::standardize::{self, adjust_batch, recognize, write_report, BatchOptions, OutputMode};
use cmrorient::train::{self, evaluate, train_multitask, train_simple, RunLog, TrainConfig};
use cmrorient::volume::read_volume;
use cmrorient_client::Client;
use cmrorient_service::{router, ServiceConfig};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "cmrorient", version, about = "Recognize and standardize the in-plane orientation of cardiac MR slices")]
struct Cli {
    /// Machine-readable output (JSON, or JSON lines for per-file results).
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ModelArg {
    /// Model checkpoint directory.
    #[arg(long, env = "CMRORIENT_MODEL")]
    model: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic phantom dataset split into train/val/test.
    GenDataset {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1000)]
        count: usize,
        /// Phantom side length in pixels.
        #[arg(long, default_value_t = 128)]
        size: usize,
        /// bssfp, t2 or lge.
        #[arg(long, default_value = "bssfp")]
        modality: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// In-plane spacing written to the headers, in mm.
        #[arg(long, default_value_t = 1.367)]
        spacing: f64,
        /// Train/val/test fractions.
        #[arg(long, value_delimiter = ',', num_args = 3, default_values_t = [0.8, 0.1, 0.1])]
        ratios: Vec<f64>,
    },
    /// Train a recognizer on a dataset directory with train/ and val/ parts.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Output checkpoint directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Arch::Simple)]
        arch: Arch,
        /// JSON training configuration; unspecified fields take defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Pre-trained simple model to transfer to this dataset's modality.
        #[arg(long, conflicts_with = "arch")]
        transfer_from: Option<PathBuf>,
    },
    /// Evaluate a model on a dataset part (e.g. <data>/test).
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        model: ModelArg,
    },
    /// Predict the orientation of NIfTI files, locally or through a running service.
    Recognize {
        #[arg(required = true)]
        files: Vec<PathBuf>,
        #[arg(long, env = "CMRORIENT_MODEL", conflicts_with = "server")]
        model: Option<PathBuf>,
        /// Service base URL, e.g. http://127.0.0.1:8080.
        #[arg(long)]
        server: Option<String>,
    },
    /// Correct every mis-oriented .nii/.nii.gz file in a folder.
    Adjust {
        folder: PathBuf,
        #[command(flatten)]
        model: ModelArg,
        /// Overwrite the input files.
        #[arg(long, required_unless_present = "out", conflicts_with = "out")]
        in_place: bool,
        /// Write results into this directory, mirroring the input tree.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        recursive: bool,
        /// Minimum consensus confidence for rewriting a file.
        #[arg(long, default_value_t = standardize::DEFAULT_CONFIDENCE_FLOOR)]
        confidence_floor: f64,
        /// Worker threads (default: available cores).
        #[arg(long)]
        jobs: Option<usize>,
        /// Also write the JSON-lines report to this file.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Run the HTTP service.
    Serve {
        #[command(flatten)]
        model: ModelArg,
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: String,
        /// Directory for uploaded volumes.
        #[arg(long, default_value = "cmrorient-work")]
        workdir: PathBuf,
        #[arg(long, default_value_t = 256)]
        max_upload_mib: usize,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Arch {
    Simple,
    Multitask,
}

fn emit<T: Serialize>(json: bool, value: &T, human: impl FnOnce() -> String) {
    if json {
        println!("{}", serde_json::to_string(value).expect("serializable"));
    } else {
        println!("{}", human());
    }
}

fn load_model(path: &Path) -> Result<Model> {
    Model::load(path).with_context(|| format!("loading model from {}", path.display()))
}

fn samples_for(pairs: &[ImagePair], arch: Arch, cfg: &TrainConfig) -> Result<Vec<Sample>> {
    pairs
        .iter()
        .map(|p| match arch {
            Arch::Simple => Sample::simple(p, &cfg.preprocess),
            Arch::Multitask => Sample::multitask(p, cfg.multitask.input_size),
        })
        .collect::<Result<_, _>>()
        .map_err(Into::into)
}

fn load_part(data: &Path, part: &str) -> Result<Vec<ImagePair>> {
    let dir = data.join(part);
    let pairs = load_cases(&dir).with_context(|| format!("reading {}", dir.display()))?;
    if pairs.is_empty() {
        bail!("no cases in {}", dir.display());
    }
    Ok(pairs)
}

#[derive(Serialize)]
struct TrainSummary {
    model: PathBuf,
    epochs: usize,
    val_accuracy: f64,
    val_mean_dice: Option<f64>,
    truncated: bool,
}

fn run_train(json: bool, data: &Path, out: &Path, arch: Arch, config: Option<&Path>, seed: Option<u64>, transfer_from: Option<&Path>) -> Result<()> {
    let mut cfg = match config {
        Some(p) => TrainConfig::from_json(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let (train_pairs, val_pairs) = (load_part(data, "train")?, load_part(data, "val")?);
    let mut log = RunLog::to_dir(out)?;
    let (model, history, validation, truncated) = if let Some(base) = transfer_from {
        let model = load_model(base)?;
        let Model::Simple(net) = &model else { bail!("transfer needs a simple-network model") };
        cfg.preprocess = net.preprocess.clone();
        let (tr, va) = (samples_for(&train_pairs, Arch::Simple, &cfg)?, samples_for(&val_pairs, Arch::Simple, &cfg)?);
        let o = train::transfer(model, &cfg, &tr, &va, &mut log)?;
        (o.model, o.history, o.validation, o.truncated)
    } else {
        let (tr, va) = (samples_for(&train_pairs, arch, &cfg)?, samples_for(&val_pairs, arch, &cfg)?);
        match arch {
            Arch::Simple => {
                let o = train_simple(&cfg, &tr, &va, &mut log)?;
                (o.model, o.history, o.validation, o.truncated)
            }
            Arch::Multitask => {
                let o = train_multitask(&cfg, &tr, &va, &mut log)?;
                (o.model, o.history, o.validation, o.truncated)
            }
        }
    };
    model.save(out)?;
    let summary = TrainSummary {
        model: out.to_path_buf(),
        epochs: history.len(),
        val_accuracy: validation.accuracy,
        val_mean_dice: validation.mean_dice,
        truncated,
    };
    emit(json, &summary, || {
        let dice = summary.val_mean_dice.map(|d| format!(", mean Dice {d:.4}")).unwrap_or_default();
        format!("saved {} after {} epochs: val accuracy {:.4}{dice}", out.display(), summary.epochs, summary.val_accuracy)
    });
    Ok(())
}

fn run_eval(json: bool, data: &Path, model_path: &Path) -> Result<()> {
    let model = load_model(model_path)?;
    let pairs = load_cases(data).with_context(|| format!("reading {}", data.display()))?;
    if pairs.is_empty() {
        bail!("no cases in {}", data.display());
    }
    let samples = match &model {
        Model::Simple(net) => pairs.iter().map(|p| Sample::simple(p, &net.preprocess)).collect::<Result<Vec<_>, _>>()?,
        Model::MultiTask(net) => pairs.iter().map(|p| Sample::multitask(p, net.config.input_size)).collect::<Result<Vec<_>, _>>()?,
    };
    let ev = evaluate(&model, &samples, &[1.0; 4])?;
    emit(json, &ev, || {
        let mut s = format!("{} samples: accuracy {:.4}, orientation loss {:.4}", ev.samples, ev.accuracy, ev.orientation_loss);
        if let (Some(d), Some(m)) = (&ev.dice, ev.mean_dice) {
            s += &format!(", Dice LV {:.4} Myo {:.4} RV {:.4} (mean {m:.4})", d.lv, d.myo, d.rv);
        }
        s
    });
    Ok(())
}

#[derive(Serialize)]
struct FileRecognition {
    input: PathBuf,
    #[serde(flatten)]
    prediction: cmrorient_client::Prediction,
}

fn print_recognition(json: bool, rec: &FileRecognition) {
    emit(json, rec, || {
        let p = &rec.prediction;
        match (p.consensus, p.confidence) {
            (Some(c), Some(conf)) => {
                let codes: Vec<String> = p.slices.iter().map(|s| s.code.to_string()).collect();
                format!("{}\t{c}\t{conf:.3}\t[{}]", rec.input.display(), codes.join(" "))
            }
            _ => format!("{}\t-\tno slice with image content", rec.input.display()),
        }
    });
}

fn run_recognize(json: bool, files: &[PathBuf], model: Option<&Path>, server: Option<&str>) -> Result<bool> {
    let mut ok = true;
    if let Some(url) = server {
        let client = Client::new(url);
        let rt = tokio::runtime::Runtime::new()?;
        for f in files {
            let res = rt.block_on(async {
                let bytes = fs::read(f).with_context(|| format!("reading {}", f.display()))?;
                let info = client.upload(bytes).await?;
                anyhow::Ok(client.prediction(&info.id).await?)
            });
            match res {
                Ok(prediction) => print_recognition(json, &FileRecognition { input: f.clone(), prediction }),
                Err(e) => {
                    ok = false;
                    eprintln!("{}: {e:#}", f.display());
                }
            }
        }
        return Ok(ok);
    }
    let model = load_model(model.ok_or_else(|| anyhow!("either --model (or CMRORIENT_MODEL) or --server is required"))?)?;
    for f in files {
        let res = read_volume(f).map_err(anyhow::Error::from).and_then(|v| match recognize(&v, &model) {
            Ok(r) => Ok(cmrorient_client::Prediction {
                id: String::new(),
                slices: r.slices,
                consensus: Some(r.consensus),
                confidence: Some(r.confidence),
                unanimous: Some(r.unanimous),
            }),
            Err(standardize::StandardizeError::EmptyVolume) => {
                Ok(cmrorient_client::Prediction { id: String::new(), slices: vec![], consensus: None, confidence: None, unanimous: None })
            }
            Err(e) => Err(e.into()),
        });
        match res {
            Ok(prediction) => print_recognition(json, &FileRecognition { input: f.clone(), prediction }),
            Err(e) => {
                ok = false;
                eprintln!("{}: {e:#}", f.display());
            }
        }
    }
    Ok(ok)
}

fn run_adjust(json: bool, folder: &Path, model: &Path, opts: &BatchOptions, report: Option<&Path>) -> Result<i32> {
    let result = adjust_batch(folder, model, opts);
    if let Some(err) = &result.setup_error {
        eprintln!("error: {err}");
        return Ok(result.exit_code);
    }
    if let Some(path) = report {
        let mut f = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
        write_report(&result.records, &mut f)?;
        f.flush()?;
    }
    if json {
        write_report(&result.records, std::io::stdout().lock())?;
    } else {
        for r in &result.records {
            let action = serde_json::to_value(r.action).expect("serializable");
            let code = r.consensus.map(|c| c.to_string()).unwrap_or_else(|| "-".into());
            let conf = r.confidence.map(|c| format!("{c:.3}")).unwrap_or_else(|| "-".into());
            let err = r.error.as_deref().map(|e| format!("\t{e}")).unwrap_or_default();
            println!("{}\t{}\t{code}\t{conf}{err}", action.as_str().unwrap_or("?"), r.input.display());
        }
    }
    Ok(result.exit_code)
}

async fn run_serve(model: Model, bind: &str, workdir: PathBuf, max_upload_mib: usize) -> Result<()> {
    let cfg = ServiceConfig { workdir, max_upload_bytes: max_upload_mib << 20 };
    let app = router(model, cfg)?;
    let listener = tokio::net::TcpListener::bind(bind).await.with_context(|| format!("binding {bind}"))?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    cmrorient_service::serve(listener, app).await?;
    Ok(())
}

fn run(cli: Cli) -> Result<i32> {
    let json = cli.json;
    match cli.command {
        Command::GenDataset { out, count, size, modality, seed, spacing, ratios } => {
            let m = Modality::by_name(&modality).ok_or_else(|| anyhow!("unknown modality {modality:?} (expected bssfp, t2 or lge)"))?;
            let spec = SplitSpec { ratios: [ratios[0], ratios[1], ratios[2]], seed };
            let parts = write_dataset(&out, count, size, &m, &spec, spacing)?;
            #[derive(Serialize)]
            struct Counts {
                train: usize,
                val: usize,
                test: usize,
            }
            let c = Counts { train: parts.train.len(), val: parts.val.len(), test: parts.test.len() };
            emit(json, &c, || format!("wrote {} cases to {} ({}/{}/{})", count, out.display(), c.train, c.val, c.test));
            Ok(0)
        }
        Command::Train { data, out, arch, config, seed, transfer_from } => {
            run_train(json, &data, &out, arch, config.as_deref(), seed, transfer_from.as_deref())?;
            Ok(0)
        }
        Command::Eval { data, model } => {
            run_eval(json, &data, &model.model)?;
            Ok(0)
        }
        Command::Recognize { files, model, server } => Ok(if run_recognize(json, &files, model.as_deref(), server.as_deref())? { 0 } else { 2 }),
        Command::Adjust { folder, model, in_place, out, recursive, confidence_floor, jobs, report } => {
            let output = match out {
                Some(dir) => OutputMode::Directory(dir),
                None if in_place => OutputMode::InPlace,
                None => bail!("one of --in-place or --out is required"),
            };
            if !(0.0..=1.0).contains(&confidence_floor) {
                bail!("--confidence-floor must lie in [0, 1]");
            }
            let opts = BatchOptions { output, recursive, confidence_floor, jobs };
            run_adjust(json, &folder, &model.model, &opts, report.as_deref())
        }
        Command::Serve { model, bind, workdir, max_upload_mib } => {
            let model = load_model(&model.model)?;
            tokio::runtime::Runtime::new()?.block_on(run_serve(model, &bind, workdir, max_upload_mib))?;
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
