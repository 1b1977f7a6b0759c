use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;
use serde::Serialize;

use salseg::ablate::{self, Ablation, Benchmark};
use salseg::config::RunConfig;
use salseg::data;
use salseg::detector;
use salseg::eval::{self, Detection};
use salseg::model::{self, Model, StepLog};
use salseg::roimask::Region;
use salseg::segbranch::Extractor;

const RESOLVED_CONFIG: &str = "config.toml";

#[derive(Parser)]
#[command(name = "salseg", version, about = "Salient instance segmentation on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration; defaults apply to anything it omits.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    extractor: Option<Extractor>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    proposals: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train/val/test splits.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Train a model and write a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset directory; generated from the config when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Run a checkpoint over a directory of images.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Score a checkpoint on an annotated split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Feature-gradient map of one instance's segmentation loss.
    Gradmap {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Image id; the first image when omitted.
        #[arg(long)]
        image: Option<String>,
        #[arg(long, default_value_t = 0)]
        instance: usize,
        /// Pixel scale of the PNG rendering.
        #[arg(long, default_value_t = 16)]
        scale: usize,
    },
    /// Extractor comparison and expansion-coefficient sweep.
    Ablate {
        #[command(flatten)]
        common: Common,
    },
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
            cfg.data.synth.seed = s;
        }
        if let Some(e) = self.extractor {
            cfg.model.seg.extractor = e;
        }
        if let Some(a) = self.alpha {
            cfg.model.mask.alpha = a;
        }
        if let Some(k) = self.proposals {
            cfg.infer.proposals = k;
        }
        cfg.validate()?;
        fs::create_dir_all(&self.out).with_context(|| format!("creating {}", self.out.display()))?;
        cfg.save(&self.out.join(RESOLVED_CONFIG))?;
        Ok(cfg)
    }
}

#[derive(Serialize)]
struct DetectionRecord<'a> {
    image_id: &'a str,
    instance_id: usize,
    score: f64,
    #[serde(rename = "box")]
    bbox: [f64; 4],
    mask: String,
}

fn synth(common: &Common) -> Result<()> {
    let cfg = common.resolve()?;
    let d = &cfg.data;
    for (split, n) in [("train", d.train_size), ("val", d.val_size), ("test", d.test_size)] {
        let mut synth = d.synth.clone();
        // Disjoint streams per split.
        synth.seed = d.synth.seed.wrapping_mul(3).wrapping_add(match split {
            "train" => 0,
            "val" => 1,
            _ => 2,
        });
        let samples = data::synth_generate_prefixed(&synth, n, &format!("{split}_"))?;
        data::dataset_write(&samples, &common.out.join(split))?;
        info!("{split}: {n} images");
    }
    Ok(())
}

fn train(common: &Common, data_dir: Option<&Path>) -> Result<()> {
    let cfg = common.resolve()?;
    let samples = match data_dir {
        Some(dir) => data::dataset_read(dir)?,
        None => data::synth_generate(&cfg.data.synth, cfg.data.train_size)?,
    };
    if samples.is_empty() {
        bail!("no training samples");
    }
    let mut model = Model::init(cfg.model.clone(), cfg.seed)?;
    let log_path = common.out.join("train_log.csv");
    let mut log = BufWriter::new(File::create(&log_path)?);
    writeln!(log, "{}", StepLog::CSV_HEADER)?;
    let every = (cfg.train.steps / 20).max(1);
    model::train(&mut model, &samples, &cfg.train, cfg.seed, |s| {
        writeln!(log, "{}", s.csv_row()).map_err(|e| salseg::Error::Config(format!("train log: {e}")))?;
        if s.step % every == 0 {
            info!("step {} loss {:.4} lr {}", s.step, s.loss.total, s.lr);
        }
        Ok(())
    })?;
    log.flush()?;
    model.save(&common.out.join("checkpoint"))?;
    info!("checkpoint written to {}", common.out.join("checkpoint").display());
    Ok(())
}

fn infer(common: &Common, checkpoint: &Path, data_dir: &Path) -> Result<()> {
    let cfg = common.resolve()?;
    let model = load_model(checkpoint, common)?;
    let images = data::dataset_read_images(data_dir)?;
    let mask_dir = common.out.join("masks");
    fs::create_dir_all(&mask_dir)?;
    let mut dets = BufWriter::new(File::create(common.out.join("detections.jsonl"))?);
    let mut proposals = Vec::new();
    for (id, image) in &images {
        for p in model::propose(&model.config, &model.params, image, &cfg.infer)? {
            proposals.push((id.clone(), p));
        }
        for (r, p) in model.predict(image, &cfg.infer)?.iter().enumerate() {
            let name = format!("{id}_{r}.png");
            data::save_png_gray(&data::mask_to_gray(&p.mask), &mask_dir.join(&name))?;
            let rec = DetectionRecord {
                image_id: id,
                instance_id: r,
                score: p.score,
                bbox: [p.bbox.x0, p.bbox.y0, p.bbox.x1, p.bbox.y1],
                mask: format!("masks/{name}"),
            };
            writeln!(dets, "{}", serde_json::to_string(&rec)?)?;
        }
    }
    dets.flush()?;
    fs::write(common.out.join("proposals.csv"), detector::proposals_csv(&proposals))?;
    info!("{} images processed", images.len());
    Ok(())
}

fn evaluate(common: &Common, checkpoint: &Path, data_dir: &Path) -> Result<()> {
    let cfg = common.resolve()?;
    let model = load_model(checkpoint, common)?;
    let samples = data::dataset_read(data_dir)?;
    let images: Vec<_> = samples.iter().map(|s| (s.id.clone(), s.image.clone())).collect();
    let dets: Vec<Detection> = eval::detect_all(&model, &images, &cfg.infer)?;
    let report = eval::evaluate(&dets, &samples)?;
    fs::write(common.out.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    fs::write(common.out.join("report.txt"), report.table())?;
    fs::write(common.out.join("pr_curves.csv"), report.pr_csv())?;
    print!("{}", report.table());
    if let Err(e) = report.check_monotone() {
        log::warn!("{e}");
    }
    Ok(())
}

fn gradmap(common: &Common, checkpoint: &Path, data_dir: &Path, image: Option<&str>, instance: usize, scale: usize) -> Result<()> {
    common.resolve()?;
    let model = load_model(checkpoint, common)?;
    let samples = data::dataset_read(data_dir)?;
    let sample = match image {
        Some(id) => samples.iter().find(|s| s.id == id).with_context(|| format!("no image {id}"))?,
        None => samples.first().context("dataset is empty")?,
    };
    let map = eval::gradient_map(&model, sample, instance)?;
    let stem = format!("gradmap_{}_{instance}", sample.id);
    map.write(
        &common.out.join(format!("{stem}.png")),
        &common.out.join(format!("{stem}.csv")),
        scale,
    )?;
    let bbox = sample.instances[instance].bbox;
    let geom = eval::band_geometry(&bbox, &model.config.mask, map.height, map.width)?;
    for region in [Region::Inner, Region::Band, Region::Exterior] {
        println!("{region:?}: {:.4}", map.region_ratio(&geom, region)?);
    }
    Ok(())
}

fn run_ablation(common: &Common) -> Result<()> {
    let cfg = common.resolve()?;
    let bench = Benchmark::generate(&cfg)?;
    let ablation = Ablation::run(&cfg, &bench, |r| {
        info!(
            "{} alpha {:.4} seed {}: mAP@0.5 {:.4} mAP@0.7 {:.4}",
            r.extractor.name(),
            r.alpha,
            r.seed,
            r.report.map50,
            r.report.map70
        );
    })?;
    let ext = ablation.extractor_table(&cfg)?;
    let alp = ablation.alpha_table(&cfg)?;
    let text = format!(
        "{}\n{}",
        ablate::format_table("Extractors (median over seeds)", &ext),
        ablate::format_table("Expansion coefficient", &alp)
    );
    fs::write(common.out.join("ablation.md"), &text)?;
    fs::write(common.out.join("ablation_runs.csv"), ablate::runs_csv(&ablation))?;
    let json = serde_json::json!({ "extractors": ext, "alphas": alp });
    fs::write(common.out.join("ablation.json"), serde_json::to_string_pretty(&json)?)?;
    print!("{text}");
    Ok(())
}

fn load_model(checkpoint: &Path, common: &Common) -> Result<Model> {
    let mut model = Model::load(checkpoint).with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    // The extractor and expansion are inference-time choices over shared weights.
    if let Some(e) = common.extractor {
        model.config.seg.extractor = e;
    }
    if let Some(a) = common.alpha {
        model.config.mask.alpha = a;
    }
    Ok(model)
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Synth { common } => synth(&common),
        Command::Train { common, data } => train(&common, data.as_deref()),
        Command::Infer { common, checkpoint, data } => infer(&common, &checkpoint, &data),
        Command::Eval { common, checkpoint, data } => evaluate(&common, &checkpoint, &data),
        Command::Gradmap {
            common,
            checkpoint,
            data,
            image,
            instance,
            scale,
        } => gradmap(&common, &checkpoint, &data, image.as_deref(), instance, scale),
        Command::Ablate { common } => run_ablation(&common),
    }
}
