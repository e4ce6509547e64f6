//! Run configuration: a flat `key = value` text format with dotted
//! namespaces (`model.embed_dim`, `train.base_lr`, `loss.beta_adv`,
//! `aug.flip_prob`) layered over built-in defaults.
//!
//! The same `apply` path serves config files and command-line overrides, so
//! overrides win simply by being applied later. Unknown keys are errors, never
//! silently ignored, and a snapshot emitted by [`RunConfig::snapshot`] parses
//! back to an identical configuration.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::model::{CriticMode, NetConfig, TaskSelection};
use crate::training::{DepthSpace, TrainConfig};
use crate::{Error, Result};

/// Everything a training run needs besides the dataset itself.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: NetConfig,
    pub train: TrainConfig,
}

fn bad_value(key: &str, value: &str, want: &str) -> Error {
    Error::Config(format!("config key {key}: cannot parse {value:?} as {want}"))
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str, want: &str) -> Result<T> {
    value.trim().parse().map_err(|_| bad_value(key, value, want))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "on" | "yes" => Ok(true),
        "false" | "0" | "off" | "no" => Ok(false),
        _ => Err(bad_value(key, value, "boolean")),
    }
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(|s| parse_num(key, s, "comma-separated integers"))
        .collect()
}

fn list_str(v: &[usize]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn critic_str(m: CriticMode) -> &'static str {
    match m {
        CriticMode::None => "none",
        CriticMode::One => "one",
        CriticMode::Two => "two",
    }
}

fn tasks_str(t: TaskSelection) -> &'static str {
    match t {
        TaskSelection::DepthOnly => "depth",
        TaskSelection::SegOnly => "seg",
        TaskSelection::Both => "both",
    }
}

fn space_str(s: DepthSpace) -> &'static str {
    match s {
        DepthSpace::Linear => "linear",
        DepthSpace::Log => "log",
    }
}

impl RunConfig {
    /// Applies one dotted `key = value` assignment. Unknown keys and
    /// unparsable values are [`Error::Config`] naming the key.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        let v = value.trim();
        match key {
            "model.in_channels" => m.in_channels = parse_num(key, v, "integer")?,
            "model.num_classes" => m.num_classes = parse_num(key, v, "integer")?,
            "model.patch_size" => m.patch_size = parse_num(key, v, "integer")?,
            "model.window_size" => m.window_size = parse_num(key, v, "integer")?,
            "model.embed_dim" => m.embed_dim = parse_num(key, v, "integer")?,
            "model.depths" => m.depths = parse_list(key, v)?,
            "model.heads" => m.heads = parse_list(key, v)?,
            "model.decoder_channels" => m.decoder_channels = parse_num(key, v, "integer")?,
            "model.mlp_ratio" => m.mlp_ratio = parse_num(key, v, "number")?,
            "model.image_height" => m.image_height = parse_num(key, v, "integer")?,
            "model.image_width" => m.image_width = parse_num(key, v, "integer")?,
            "model.critic_base_channels" => {
                m.critic_base_channels = parse_num(key, v, "integer")?
            }
            "train.base_lr" => t.base_lr = parse_num(key, v, "number")?,
            "train.weight_decay" => t.weight_decay = parse_num(key, v, "number")?,
            "train.poly_power" => t.poly_power = parse_num(key, v, "number")?,
            "train.total_steps" => t.total_steps = parse_num(key, v, "integer")?,
            "train.batch_size" => t.batch_size = parse_num(key, v, "integer")?,
            "train.critic_steps_per_gen" => {
                t.critic_steps_per_gen = parse_num(key, v, "integer")?
            }
            "train.critic_lr" => t.critic_lr = parse_num(key, v, "number")?,
            "train.seed" => t.seed = parse_num(key, v, "integer")?,
            "train.checkpoint_interval" => t.checkpoint_interval = parse_num(key, v, "integer")?,
            "train.eval_interval" => t.eval_interval = parse_num(key, v, "integer")?,
            "train.critic" => {
                t.critic = match v {
                    "none" => CriticMode::None,
                    "one" => CriticMode::One,
                    "two" => CriticMode::Two,
                    _ => return Err(bad_value(key, v, "one of none/one/two")),
                }
            }
            "train.depth_space" => {
                t.depth_space = match v {
                    "linear" => DepthSpace::Linear,
                    "log" => DepthSpace::Log,
                    _ => return Err(bad_value(key, v, "one of linear/log")),
                }
            }
            "train.augment" => t.augment = parse_bool(key, v)?,
            "train.tasks" => {
                t.tasks = match v {
                    "depth" => TaskSelection::DepthOnly,
                    "seg" => TaskSelection::SegOnly,
                    "both" => TaskSelection::Both,
                    _ => return Err(bad_value(key, v, "one of depth/seg/both")),
                }
            }
            "train.deterministic" => t.deterministic = parse_bool(key, v)?,
            "loss.alpha_si" => t.weights.alpha_si = parse_num(key, v, "number")?,
            "loss.alpha_mix" => t.weights.alpha_mix = parse_num(key, v, "number")?,
            "loss.beta_adv" => t.weights.beta_adv = parse_num(key, v, "number")?,
            "loss.lambda_gp" => t.weights.lambda_gp = parse_num(key, v, "number")?,
            "aug.n_patches" => t.aug.n_patches = parse_num(key, v, "integer")?,
            "aug.min_frac" => t.aug.min_frac = parse_num(key, v, "number")?,
            "aug.max_frac" => t.aug.max_frac = parse_num(key, v, "number")?,
            "aug.brightness" => t.aug.brightness = parse_num(key, v, "number")?,
            "aug.contrast" => t.aug.contrast = parse_num(key, v, "number")?,
            "aug.gamma" => t.aug.gamma = parse_num(key, v, "number")?,
            "aug.hue" => t.aug.hue = parse_num(key, v, "number")?,
            "aug.saturation" => t.aug.saturation = parse_num(key, v, "number")?,
            "aug.flip_prob" => t.aug.flip_prob = parse_num(key, v, "number")?,
            "aug.mixup_prob" => t.aug.mixup_prob = parse_num(key, v, "number")?,
            "aug.cross_image" => t.aug.cross_image = parse_bool(key, v)?,
            _ => return Err(Error::Config(format!("unknown config key: {key}"))),
        }
        Ok(())
    }

    /// Parses `key = value` text: one assignment per line, `#` comments and
    /// blank lines ignored, later assignments overriding earlier ones.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("config line {}: expected key = value", lineno + 1))
            })?;
            self.apply(key.trim(), value)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_text(&text)
    }

    /// Emits every key in a stable order. `RunConfig::from_text(snapshot)`
    /// reproduces `self` exactly; float values print with full precision.
    pub fn snapshot(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let w = &t.weights;
        let a = &t.aug;
        let mut s = String::new();
        let kv: &[(&str, String)] = &[
            ("model.in_channels", m.in_channels.to_string()),
            ("model.num_classes", m.num_classes.to_string()),
            ("model.patch_size", m.patch_size.to_string()),
            ("model.window_size", m.window_size.to_string()),
            ("model.embed_dim", m.embed_dim.to_string()),
            ("model.depths", list_str(&m.depths)),
            ("model.heads", list_str(&m.heads)),
            ("model.decoder_channels", m.decoder_channels.to_string()),
            ("model.mlp_ratio", format!("{:?}", m.mlp_ratio)),
            ("model.image_height", m.image_height.to_string()),
            ("model.image_width", m.image_width.to_string()),
            (
                "model.critic_base_channels",
                m.critic_base_channels.to_string(),
            ),
            ("train.base_lr", format!("{:?}", t.base_lr)),
            ("train.weight_decay", format!("{:?}", t.weight_decay)),
            ("train.poly_power", format!("{:?}", t.poly_power)),
            ("train.total_steps", t.total_steps.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            (
                "train.critic_steps_per_gen",
                t.critic_steps_per_gen.to_string(),
            ),
            ("train.critic_lr", format!("{:?}", t.critic_lr)),
            ("train.seed", t.seed.to_string()),
            (
                "train.checkpoint_interval",
                t.checkpoint_interval.to_string(),
            ),
            ("train.eval_interval", t.eval_interval.to_string()),
            ("train.critic", critic_str(t.critic).to_string()),
            ("train.depth_space", space_str(t.depth_space).to_string()),
            ("train.augment", t.augment.to_string()),
            ("train.tasks", tasks_str(t.tasks).to_string()),
            ("train.deterministic", t.deterministic.to_string()),
            ("loss.alpha_si", format!("{:?}", w.alpha_si)),
            ("loss.alpha_mix", format!("{:?}", w.alpha_mix)),
            ("loss.beta_adv", format!("{:?}", w.beta_adv)),
            ("loss.lambda_gp", format!("{:?}", w.lambda_gp)),
            ("aug.n_patches", a.n_patches.to_string()),
            ("aug.min_frac", format!("{:?}", a.min_frac)),
            ("aug.max_frac", format!("{:?}", a.max_frac)),
            ("aug.brightness", format!("{:?}", a.brightness)),
            ("aug.contrast", format!("{:?}", a.contrast)),
            ("aug.gamma", format!("{:?}", a.gamma)),
            ("aug.hue", format!("{:?}", a.hue)),
            ("aug.saturation", format!("{:?}", a.saturation)),
            ("aug.flip_prob", format!("{:?}", a.flip_prob)),
            ("aug.mixup_prob", format!("{:?}", a.mixup_prob)),
            ("aug.cross_image", a.cross_image.to_string()),
        ];
        for (k, v) in kv {
            writeln!(s, "{k} = {v}").expect("string write");
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn snapshot_round_trips_exactly() {
        let mut cfg = RunConfig::default();
        cfg.apply("model.embed_dim", "24").unwrap();
        cfg.apply("model.depths", "1, 2, 2").unwrap();
        cfg.apply("train.base_lr", "3.25e-4").unwrap();
        cfg.apply("train.critic", "two").unwrap();
        cfg.apply("train.tasks", "depth").unwrap();
        cfg.apply("loss.beta_adv", "0.02").unwrap();
        cfg.apply("aug.cross_image", "false").unwrap();
        let back = RunConfig::from_text(&cfg.snapshot()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_are_errors_naming_the_key() {
        let err = RunConfig::default()
            .apply("train.learning_rate", "1e-3")
            .err()
            .unwrap();
        assert!(err.to_string().contains("train.learning_rate"), "{err}");
        let err = RunConfig::from_text("model.embed_dim = 24\nbogus.key = 1\n")
            .err()
            .unwrap();
        assert!(err.to_string().contains("bogus.key"), "{err}");
    }

    #[test]
    fn bad_values_are_errors_naming_the_key() {
        for (k, v) in [
            ("train.base_lr", "fast"),
            ("train.critic", "three"),
            ("train.tasks", "all"),
            ("train.augment", "maybe"),
            ("model.depths", "2,x"),
        ] {
            let err = RunConfig::default().apply(k, v).err().unwrap();
            assert!(err.to_string().contains(k), "{k}: {err}");
        }
    }

    #[test]
    fn file_text_ignores_comments_and_later_lines_win() {
        let text = "\n# a comment\nmodel.embed_dim = 16  # trailing comment\n\ntrain.seed = 7\nmodel.embed_dim = 32\n";
        let cfg = RunConfig::from_text(text).unwrap();
        assert_eq!(cfg.model.embed_dim, 32);
        assert_eq!(cfg.train.seed, 7);
        // everything untouched stays at its default
        assert_eq!(cfg.train.base_lr, TrainConfig::default().base_lr);
    }

    #[test]
    fn lines_without_an_equals_sign_are_rejected() {
        let err = RunConfig::from_text("model.embed_dim 16\n").err().unwrap();
        assert!(err.to_string().contains("line 1"), "{err}");
    }

    #[test]
    fn overrides_applied_after_a_file_win() {
        let mut cfg = RunConfig::from_text("train.total_steps = 100\n").unwrap();
        cfg.apply("train.total_steps", "7").unwrap();
        assert_eq!(cfg.train.total_steps, 7);
    }
}
