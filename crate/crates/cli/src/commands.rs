use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ocnet_core::data::{generate_shapes, load_manifest, save_dataset, Dataset};
use ocnet_core::eval::{evaluate, miou, InferConfig, MiouReport};
use ocnet_core::gradcheck::{self, SELECTORS};
use ocnet_core::model::SegModel;
use ocnet_core::rng::{stream_rng, Stream};
use ocnet_core::training::{Trainer, IGNORE_LABEL};

use crate::{Checkpoint, CliError, Result, RunConfig};

pub const CHECKPOINT_FILE: &str = "checkpoint.ocn";
pub const LOG_FILE: &str = "train_log.tsv";
pub const LOG_HEADER: &str = "iteration\tlr\tloss\tval_miou";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| ocnet_core::Error::io(path, e).into()
}

/// Freshly initialized model for `cfg`; depends only on the config and seed.
pub fn build_model(cfg: &RunConfig) -> Result<SegModel<f32>> {
    let mut rng = stream_rng(cfg.seed, Stream::Init, 0, 0);
    Ok(SegModel::new(&cfg.model_config(), &mut rng)?)
}

/// The two synthetic splits, without touching the disk.
pub fn synth_splits(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    let synth = cfg.synth_config();
    let train = generate_shapes(cfg.data_seed, cfg.train_size, &synth)?;
    let val = generate_shapes(cfg.data_seed.wrapping_add(1), cfg.val_size, &synth)?;
    Ok((train, val))
}

/// Writes `out/train` and `out/val`.
pub fn gen_data(cfg: &RunConfig, out: &Path) -> Result<()> {
    let (train, val) = synth_splits(cfg)?;
    save_dataset(&train, &out.join("train"))?;
    save_dataset(&val, &out.join("val"))?;
    Ok(())
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Stop once this many iterations are done; defaults to the schedule length.
    pub stop_at: Option<usize>,
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogLine {
    pub iteration: usize,
    pub lr: f64,
    pub loss: f64,
    pub val_miou: Option<f64>,
}

impl LogLine {
    pub fn to_tsv(&self) -> String {
        let val = self.val_miou.map_or(String::new(), |m| format!("{m:.6}"));
        format!("{}\t{}\t{}\t{val}", self.iteration, self.lr, self.loss)
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub checkpoint: PathBuf,
    pub log: Vec<LogLine>,
}

fn val_miou(model: &SegModel<f32>, val: &Dataset) -> Result<f64> {
    let cm = evaluate(model, val, &InferConfig::single_scale(), IGNORE_LABEL)?;
    Ok(miou(&cm)?.mean_iou)
}

/// Trains on the manifests under `cfg.data_dir`, logging tab-separated lines
/// to `sink` and `out/train_log.tsv`, and saves `out/checkpoint.ocn`.
pub fn train(cfg: &RunConfig, opts: &TrainOptions, out: &Path, sink: &mut dyn Write) -> Result<TrainReport> {
    let train = load_manifest(&cfg.train_manifest(), cfg.num_classes)?;
    let val_path = cfg.val_manifest();
    let val = match val_path.exists() {
        true => Some(load_manifest(&val_path, cfg.num_classes)?),
        false => None,
    };
    train_on(cfg, opts, &train, val.as_ref(), out, sink)
}

/// [`train`] on datasets already in memory.
pub fn train_on(
    cfg: &RunConfig,
    opts: &TrainOptions,
    train: &Dataset,
    val: Option<&Dataset>,
    out: &Path,
    sink: &mut dyn Write,
) -> Result<TrainReport> {
    let mut trainer = Trainer::new(build_model(cfg)?, cfg.train_config(), train)?;
    if let Some(path) = &opts.resume {
        Checkpoint::load(path)?.restore_trainer(&mut trainer)?;
    }
    let max_iter = cfg.schedule.max_iter;
    let stop = opts.stop_at.unwrap_or(max_iter);
    if stop > max_iter || stop < trainer.iteration {
        return Err(CliError::Usage(format!(
            "cannot stop at iteration {stop}: run is at {} of a {max_iter}-iteration schedule",
            trainer.iteration
        )));
    }
    fs::create_dir_all(out).map_err(io_err(out))?;
    let log_path = out.join(LOG_FILE);
    let mut log_file = fs::File::create(&log_path).map_err(io_err(&log_path))?;
    let mut emit = |text: &str| -> Result<()> {
        writeln!(log_file, "{text}").map_err(io_err(&log_path))?;
        writeln!(sink, "{text}").map_err(io_err(Path::new("<output>")))
    };
    emit(LOG_HEADER)?;
    let mut log = Vec::new();
    while trainer.iteration < stop {
        let step = trainer.step(train)?;
        let done = trainer.iteration;
        let periodic = cfg.eval_every > 0 && done % cfg.eval_every == 0;
        let val_miou = match val {
            Some(v) if periodic || done == stop => Some(val_miou(&trainer.model, v)?),
            _ => None,
        };
        let line = LogLine {
            iteration: step.iteration,
            lr: step.lr,
            loss: step.loss,
            val_miou,
        };
        emit(&line.to_tsv())?;
        log.push(line);
    }
    let checkpoint = out.join(CHECKPOINT_FILE);
    Checkpoint::of_trainer(&trainer).save(&checkpoint)?;
    Ok(TrainReport { checkpoint, log })
}

/// Model for `cfg` with weights from `checkpoint`.
pub fn load_model(cfg: &RunConfig, checkpoint: &Path) -> Result<SegModel<f32>> {
    let ck = Checkpoint::load(checkpoint)?;
    let stored = ck.num_classes()?;
    if stored != cfg.num_classes {
        return Err(ocnet_core::Error::Contract(format!(
            "checkpoint predicts {stored} classes but the config has {}",
            cfg.num_classes
        ))
        .into());
    }
    let model = build_model(cfg)?;
    ck.restore_model(&model)?;
    Ok(model)
}

#[derive(Debug, Clone, Default)]
pub struct EvalOptions {
    /// Defaults to the validation manifest.
    pub manifest: Option<PathBuf>,
    /// Ignore the configured scales and flip.
    pub single_scale: bool,
}

pub fn eval(cfg: &RunConfig, checkpoint: &Path, opts: &EvalOptions) -> Result<MiouReport> {
    let model = load_model(cfg, checkpoint)?;
    let manifest = opts.manifest.clone().unwrap_or_else(|| cfg.val_manifest());
    let data = load_manifest(&manifest, cfg.num_classes)?;
    let infer = match opts.single_scale {
        true => InferConfig::single_scale(),
        false => cfg.infer_config(),
    };
    let cm = evaluate(&model, &data, &infer, IGNORE_LABEL)?;
    Ok(miou(&cm)?)
}

pub fn format_report(r: &MiouReport) -> String {
    let mut s = String::new();
    for (c, iou) in r.per_class.iter().enumerate() {
        let v = iou.map_or("absent".to_string(), |v| format!("{v:.6}"));
        s.push_str(&format!("class {c}\t{v}\n"));
    }
    s.push_str(&format!("mIoU\t{:.6}\npixel_acc\t{:.6}\n", r.mean_iou, r.pixel_accuracy));
    s
}

/// Runs the finite-difference suite for one selector, or all of them for
/// `"all"`, writing one line per parameter group. Returns whether every
/// group passed.
pub fn gradcheck(selector: &str, seed: u64, sink: &mut dyn Write) -> Result<bool> {
    let chosen: Vec<&str> = match selector {
        "all" => SELECTORS.to_vec(),
        s if SELECTORS.contains(&s) => vec![s],
        s => {
            return Err(CliError::Usage(format!(
                "unknown selector '{s}'; valid selectors: all, {}",
                SELECTORS.join(", ")
            )))
        }
    };
    let out = |e| CliError::from(ocnet_core::Error::io("<output>", e));
    let mut ok = true;
    for s in chosen {
        let report = gradcheck::run(s, seed)?;
        for g in &report.groups {
            let verdict = if g.max_rel_err < report.tolerance { "ok" } else { "FAIL" };
            writeln!(
                sink,
                "{s}\t{}\tcoords={}\tskipped={}\tmax_rel_err={:.3e}\ttol={:.0e}\t{verdict}",
                g.name, g.coords, g.skipped, g.max_rel_err, report.tolerance
            )
            .map_err(out)?;
        }
        ok &= report.passed();
    }
    Ok(ok)
}
