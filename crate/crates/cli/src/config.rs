//! `key = value` run configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ocnet_core::context::{ChannelPlan, ContextConfig, ContextKind};
use ocnet_core::data::{AugmentConfig, SynthConfig};
use ocnet_core::eval::InferConfig;
use ocnet_core::model::{ModelConfig, OUTPUT_STRIDE};
use ocnet_core::training::{OhemConfig, ScheduleConfig, SupervisionConfig, TrainConfig};

/// A rejected config line.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("line {line}: {message}")]
pub struct ConfigError {
    pub line: usize,
    pub message: String,
}

/// Everything a command needs. Every field has a default, see [`RunConfig::default`].
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub module: ContextKind,
    pub plan: ChannelPlan,
    /// `None` means half of `out_ch`.
    pub key_ch: Option<usize>,
    pub pyramid_scales: Vec<usize>,
    pub dilation_rates: Vec<usize>,
    pub shared_query_key: bool,
    pub scaled_similarity: bool,
    pub num_classes: usize,
    /// Side of the square synthetic images.
    pub image_size: usize,
    pub train_size: usize,
    pub val_size: usize,
    /// Seed of the training split; the validation split uses `data_seed + 1`.
    pub data_seed: u64,
    /// Holds `train/` and `val/`, each with a manifest.
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub batch_size: usize,
    pub schedule: ScheduleConfig,
    pub supervision: SupervisionConfig,
    pub ohem: bool,
    pub ohem_theta: f64,
    /// 0 keeps a quarter of the batch pixels.
    pub ohem_min_kept: usize,
    pub class_balanced: bool,
    pub augment: bool,
    pub aug_scale_min: f64,
    pub aug_scale_max: f64,
    pub eval_scales: Vec<f64>,
    pub flip: bool,
    /// Validation mIoU is logged every this many iterations (0 = only at the end).
    pub eval_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            module: ContextKind::BaseOc,
            plan: ChannelPlan::TOY,
            key_ch: None,
            pyramid_scales: vec![1, 2, 3, 6],
            dilation_rates: vec![12, 24, 36],
            shared_query_key: true,
            scaled_similarity: false,
            num_classes: 4,
            image_size: 64,
            train_size: 2000,
            val_size: 200,
            data_seed: 7,
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs"),
            seed: 1,
            batch_size: 8,
            schedule: ScheduleConfig {
                base_lr: 0.1,
                ..ScheduleConfig::default()
            },
            supervision: SupervisionConfig::default(),
            ohem: false,
            ohem_theta: 0.7,
            ohem_min_kept: 0,
            class_balanced: false,
            augment: false,
            aug_scale_min: 0.5,
            aug_scale_max: 2.0,
            eval_scales: vec![1.0],
            flip: false,
            eval_every: 500,
        }
    }
}

fn parse_num<T: FromStr>(v: &str) -> Result<T, String> {
    v.parse().map_err(|_| format!("'{v}' is not a valid number"))
}

fn parse_bool(v: &str) -> Result<bool, String> {
    match v {
        "true" | "on" | "yes" => Ok(true),
        "false" | "off" | "no" => Ok(false),
        _ => Err(format!("'{v}' is not a boolean")),
    }
}

fn parse_list<T: FromStr>(v: &str) -> Result<Vec<T>, String> {
    let items = v
        .split(',')
        .map(|s| parse_num(s.trim()))
        .collect::<Result<Vec<T>, _>>()?;
    if items.is_empty() {
        return Err("empty list".into());
    }
    Ok(items)
}

fn positive(v: &str) -> Result<usize, String> {
    match parse_num::<usize>(v)? {
        0 => Err("must be positive".into()),
        n => Ok(n),
    }
}

fn positive_real(v: &str) -> Result<f64, String> {
    let x: f64 = parse_num(v)?;
    if x > 0.0 && x.is_finite() {
        Ok(x)
    } else {
        Err(format!("{v} must be a positive finite number"))
    }
}

fn list_text<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(", ")
}

impl RunConfig {
    pub const KEYS: [&'static str; 35] = [
        "module",
        "backbone_ch",
        "mid_ch",
        "out_ch",
        "key_ch",
        "pyramid_scales",
        "dilation_rates",
        "shared_query_key",
        "scaled_similarity",
        "num_classes",
        "image_size",
        "train_size",
        "val_size",
        "data_seed",
        "data_dir",
        "out_dir",
        "seed",
        "batch_size",
        "iterations",
        "base_lr",
        "power",
        "momentum",
        "weight_decay",
        "main_weight",
        "aux_weight",
        "ohem",
        "ohem_theta",
        "ohem_min_kept",
        "class_balanced",
        "augment",
        "aug_scale_min",
        "aug_scale_max",
        "eval_scales",
        "flip",
        "eval_every",
    ];

    /// Applies one `key = value` pair. Relative paths are taken relative to `base`.
    fn set(&mut self, key: &str, v: &str, base: &Path) -> Result<(), String> {
        match key {
            "module" => self.module = v.parse().map_err(|e: ocnet_core::Error| e.to_string())?,
            "backbone_ch" => self.plan.backbone_ch = positive(v)?,
            "mid_ch" => self.plan.mid_ch = positive(v)?,
            "out_ch" => self.plan.out_ch = positive(v)?,
            "key_ch" => self.key_ch = if v == "auto" { None } else { Some(positive(v)?) },
            "pyramid_scales" => {
                self.pyramid_scales = parse_list(v)?;
                if self.pyramid_scales.contains(&0) {
                    return Err("pyramid scales must be positive".into());
                }
            }
            "dilation_rates" => {
                self.dilation_rates = parse_list(v)?;
                if self.dilation_rates.contains(&0) {
                    return Err("dilation rates must be positive".into());
                }
            }
            "shared_query_key" => self.shared_query_key = parse_bool(v)?,
            "scaled_similarity" => self.scaled_similarity = parse_bool(v)?,
            "num_classes" => {
                self.num_classes = parse_num(v)?;
                if !(2..=255).contains(&self.num_classes) {
                    return Err("num_classes must be in 2..=255".into());
                }
            }
            "image_size" => {
                self.image_size = positive(v)?;
                if self.image_size % OUTPUT_STRIDE != 0 {
                    return Err(format!("image_size must be a multiple of {OUTPUT_STRIDE}"));
                }
            }
            "train_size" => self.train_size = positive(v)?,
            "val_size" => self.val_size = positive(v)?,
            "data_seed" => self.data_seed = parse_num(v)?,
            "data_dir" => self.data_dir = base.join(v),
            "out_dir" => self.out_dir = base.join(v),
            "seed" => self.seed = parse_num(v)?,
            "batch_size" => self.batch_size = positive(v)?,
            "iterations" => self.schedule.max_iter = parse_num(v)?,
            "base_lr" => self.schedule.base_lr = positive_real(v)?,
            "power" => self.schedule.power = positive_real(v)?,
            "momentum" => {
                self.schedule.momentum = parse_num(v)?;
                if !(0.0..1.0).contains(&self.schedule.momentum) {
                    return Err("momentum must be in [0, 1)".into());
                }
            }
            "weight_decay" => {
                self.schedule.weight_decay = parse_num(v)?;
                if !(self.schedule.weight_decay >= 0.0) || !self.schedule.weight_decay.is_finite() {
                    return Err("weight_decay must be >= 0".into());
                }
            }
            "main_weight" | "aux_weight" => {
                let w: f64 = parse_num(v)?;
                if !(w >= 0.0) || !w.is_finite() {
                    return Err(format!("{key} must be >= 0"));
                }
                if key == "main_weight" {
                    self.supervision.main_weight = w;
                } else {
                    self.supervision.aux_weight = w;
                }
            }
            "ohem" => self.ohem = parse_bool(v)?,
            "ohem_theta" => {
                self.ohem_theta = parse_num(v)?;
                if !(self.ohem_theta > 0.0 && self.ohem_theta <= 1.0) {
                    return Err("ohem_theta must be in (0, 1]".into());
                }
            }
            "ohem_min_kept" => self.ohem_min_kept = parse_num(v)?,
            "class_balanced" => self.class_balanced = parse_bool(v)?,
            "augment" => self.augment = parse_bool(v)?,
            "aug_scale_min" => self.aug_scale_min = positive_real(v)?,
            "aug_scale_max" => self.aug_scale_max = positive_real(v)?,
            "eval_scales" => {
                self.eval_scales = parse_list(v)?;
                if self.eval_scales.iter().any(|&s: &f64| !(s > 0.0) || !s.is_finite()) {
                    return Err("eval scales must be positive".into());
                }
            }
            "flip" => self.flip = parse_bool(v)?,
            "eval_every" => self.eval_every = parse_num(v)?,
            _ => return Err("not a recognized key".into()),
        }
        Ok(())
    }

    /// Parses a config file body. Keys may appear at most once.
    pub fn parse(text: &str, base: &Path) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig {
            data_dir: base.join("data"),
            out_dir: base.join("runs"),
            ..RunConfig::default()
        };
        let mut seen: Vec<&str> = Vec::new();
        let mut scale_line = 0;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let err = |message: String| ConfigError { line, message };
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| err(format!("expected 'key = value', found '{content}'")))?;
            let (key, value) = (key.trim(), value.trim());
            if value.is_empty() {
                return Err(err(format!("'{key}' has no value")));
            }
            if seen.contains(&key) {
                return Err(err(format!("'{key}' is set twice")));
            }
            cfg.set(key, value, base).map_err(|m| err(format!("{key}: {m}")))?;
            if key.starts_with("aug_scale") {
                scale_line = line;
            }
            seen.push(key);
        }
        if cfg.aug_scale_min > cfg.aug_scale_max {
            return Err(ConfigError {
                line: scale_line,
                message: format!(
                    "aug_scale_min {} exceeds aug_scale_max {}",
                    cfg.aug_scale_min, cfg.aug_scale_max
                ),
            });
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> crate::Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| ocnet_core::Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new(""));
        RunConfig::parse(&text, base).map_err(|e| crate::CliError::Config {
            path: path.to_path_buf(),
            source: e,
        })
    }

    /// The config as a file that parses back to itself.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let b = |v: bool| if v { "true" } else { "false" };
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").expect("writing to a String");
        kv("module", self.module.to_string());
        kv("backbone_ch", self.plan.backbone_ch.to_string());
        kv("mid_ch", self.plan.mid_ch.to_string());
        kv("out_ch", self.plan.out_ch.to_string());
        kv("key_ch", self.key_ch.map_or("auto".into(), |k| k.to_string()));
        kv("pyramid_scales", list_text(&self.pyramid_scales));
        kv("dilation_rates", list_text(&self.dilation_rates));
        kv("shared_query_key", b(self.shared_query_key).into());
        kv("scaled_similarity", b(self.scaled_similarity).into());
        kv("num_classes", self.num_classes.to_string());
        kv("image_size", self.image_size.to_string());
        kv("train_size", self.train_size.to_string());
        kv("val_size", self.val_size.to_string());
        kv("data_seed", self.data_seed.to_string());
        kv("data_dir", self.data_dir.display().to_string());
        kv("out_dir", self.out_dir.display().to_string());
        kv("seed", self.seed.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("iterations", self.schedule.max_iter.to_string());
        kv("base_lr", self.schedule.base_lr.to_string());
        kv("power", self.schedule.power.to_string());
        kv("momentum", self.schedule.momentum.to_string());
        kv("weight_decay", self.schedule.weight_decay.to_string());
        kv("main_weight", self.supervision.main_weight.to_string());
        kv("aux_weight", self.supervision.aux_weight.to_string());
        kv("ohem", b(self.ohem).into());
        kv("ohem_theta", self.ohem_theta.to_string());
        kv("ohem_min_kept", self.ohem_min_kept.to_string());
        kv("class_balanced", b(self.class_balanced).into());
        kv("augment", b(self.augment).into());
        kv("aug_scale_min", self.aug_scale_min.to_string());
        kv("aug_scale_max", self.aug_scale_max.to_string());
        kv("eval_scales", list_text(&self.eval_scales));
        kv("flip", b(self.flip).into());
        kv("eval_every", self.eval_every.to_string());
        s
    }

    pub fn context_config(&self) -> ContextConfig {
        ContextConfig {
            key_ch: self.key_ch,
            pyramid_scales: self.pyramid_scales.clone(),
            dilation_rates: self.dilation_rates.clone(),
            scaled_similarity: self.scaled_similarity,
            shared_query_key: self.shared_query_key,
            ..ContextConfig::new(self.module, self.plan)
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig::toy(self.context_config(), self.num_classes)
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig::new(self.image_size, self.image_size, self.num_classes)
    }

    pub fn train_config(&self) -> TrainConfig {
        let batch_pixels = self.batch_size * self.image_size * self.image_size;
        TrainConfig {
            seed: self.seed,
            batch_size: self.batch_size,
            schedule: self.schedule,
            supervision: self.supervision,
            ohem: self.ohem.then(|| match self.ohem_min_kept {
                0 => OhemConfig {
                    theta: self.ohem_theta,
                    ..OhemConfig::for_batch(batch_pixels)
                },
                k => OhemConfig {
                    theta: self.ohem_theta,
                    min_kept: k,
                },
            }),
            class_balanced: self.class_balanced,
            augment: self.augment.then(|| AugmentConfig {
                scale_min: self.aug_scale_min,
                scale_max: self.aug_scale_max,
                ..AugmentConfig::standard(self.image_size, self.image_size)
            }),
        }
    }

    pub fn infer_config(&self) -> InferConfig {
        InferConfig {
            scales: self.eval_scales.clone(),
            flip: self.flip,
        }
    }

    pub fn train_manifest(&self) -> PathBuf {
        self.data_dir.join("train").join(ocnet_core::data::MANIFEST)
    }

    pub fn val_manifest(&self) -> PathBuf {
        self.data_dir.join("val").join(ocnet_core::data::MANIFEST)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<RunConfig, ConfigError> {
        RunConfig::parse(text, Path::new("/base"))
    }

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = parse("# nothing\n\n").unwrap();
        assert_eq!(cfg.module, ContextKind::BaseOc);
        assert_eq!(cfg.data_dir, Path::new("/base/data"));
        assert_eq!(cfg.schedule.max_iter, 2000);
    }

    #[test]
    fn values_and_comments() {
        let cfg = parse("module = asp-oc  # trailing\ndilation_rates = 2, 4,6\nflip = on\nkey_ch = 5\n").unwrap();
        assert_eq!(cfg.module, ContextKind::AspOc);
        assert_eq!(cfg.dilation_rates, vec![2, 4, 6]);
        assert!(cfg.flip);
        assert_eq!(cfg.context_config().key_ch(), 5);
    }

    #[test]
    fn rejections_name_the_line() {
        for (text, line) in [
            ("seed = 1\nbogus = 3\n", 2),
            ("\n\nmodule = resnet\n", 3),
            ("batch_size = 0\n", 1),
            ("seed = 1\nseed = 2\n", 2),
            ("just words\n", 1),
            ("image_size = 60\n", 1),
            ("aug_scale_max = 0.4\n", 1),
            ("eval_scales = 1, x\n", 1),
            ("flip =\n", 1),
        ] {
            assert_eq!(parse(text).unwrap_err().line, line, "{text:?}");
        }
    }

    #[test]
    fn rendered_text_parses_back() {
        let mut cfg = parse("").unwrap();
        cfg.module = ContextKind::PyramidOc;
        cfg.eval_scales = vec![0.75, 1.0, 1.25];
        cfg.key_ch = Some(3);
        cfg.schedule.base_lr = 0.0123;
        assert_eq!(parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn ohem_quarter_default() {
        let cfg = parse("ohem = true\nbatch_size = 2\nimage_size = 16\n").unwrap();
        assert_eq!(cfg.train_config().ohem.unwrap().min_kept, 128);
    }
}
