//! Plain-text `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored. Every key is optional; the
//! defaults describe the desk-scale model (patch 16, grid channels 64,
//! temperature 0.01, 64 segments per page, mask ratio 0.15).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use vgt_core::backbone::{BackboneConfig, EncoderConfig, Streams};
use vgt_core::detect::DetectConfig;
use vgt_core::grid::MaskConfig;
use vgt_core::optim::AdamW;
use vgt_core::pretrain::{Negatives, PretrainConfig};
use vgt_core::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,

    pub vocab: Option<PathBuf>,
    pub vocab_size: usize,

    pub image_size: usize,
    pub patch: usize,
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    pub mlp: usize,
    pub grid_channels: usize,
    pub fpn_dim: usize,
    pub taps: Option<[usize; 4]>,
    pub streams: Streams,

    pub mask_ratio: f64,
    pub whole_word: bool,
    pub tau: f64,
    pub num_segments: usize,
    pub target_dim: usize,
    pub mlp_hidden: usize,
    pub negatives: Negatives,
    pub mglm_weight: f64,
    pub slm_weight: f64,

    pub pretrain_steps: usize,
    pub pretrain_pages_per_step: usize,
    pub pretrain_lr: f64,
    pub pretrain_warmup: u64,
    /// Plain Adam by default; decay during pre-training hurts transfer.
    pub pretrain_weight_decay: f64,

    pub train_steps: usize,
    pub train_batch: usize,
    pub train_lr: f64,
    pub train_warmup: u64,
    pub eval_every: usize,
    pub weight_decay: f64,

    pub score_thresh: f64,
    pub nms_iou: f64,
    pub max_dets: usize,

    pub synth_pages: usize,
    pub synth_val_pages: usize,

    pub corpus: Option<PathBuf>,
    pub train_data: Option<PathBuf>,
    pub val_data: Option<PathBuf>,
    pub init: Option<PathBuf>,

    /// Line each key was set on, for error messages.
    lines: BTreeMap<String, usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("out"),
            vocab: None,
            vocab_size: 64,
            image_size: 64,
            patch: 16,
            layers: 2,
            heads: 4,
            hidden: 32,
            mlp: 64,
            grid_channels: 64,
            fpn_dim: 32,
            taps: None,
            streams: Streams::Both,
            mask_ratio: 0.15,
            whole_word: false,
            tau: 0.01,
            num_segments: 64,
            target_dim: 64,
            mlp_hidden: 64,
            negatives: Negatives::InBatch,
            mglm_weight: 1.0,
            slm_weight: 1.0,
            pretrain_steps: 2000,
            pretrain_pages_per_step: 4,
            pretrain_lr: 1e-3,
            pretrain_warmup: 40,
            pretrain_weight_decay: 0.0,
            train_steps: 2000,
            train_batch: 4,
            train_lr: 1e-3,
            train_warmup: 100,
            eval_every: 500,
            weight_decay: 0.05,
            score_thresh: 0.05,
            nms_iou: 0.5,
            max_dets: 100,
            synth_pages: 20,
            synth_val_pages: 0,
            corpus: None,
            train_data: None,
            val_data: None,
            init: None,
            lines: BTreeMap::new(),
        }
    }
}

fn parse_num<V: std::str::FromStr>(v: &str) -> std::result::Result<V, String> {
    v.parse().map_err(|_| format!("expected a number, got `{v}`"))
}

fn parse_bool(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(format!("expected true or false, got `{v}`")),
    }
}

fn parse_path(v: &str) -> std::result::Result<Option<PathBuf>, String> {
    Ok(if v.is_empty() { None } else { Some(PathBuf::from(v)) })
}

impl RunConfig {
    /// Assigns one key; the message explains a bad value.
    fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        match key {
            "seed" => self.seed = parse_num(v)?,
            "out" => self.out = PathBuf::from(v),
            "vocab" => self.vocab = parse_path(v)?,
            "vocab_size" => self.vocab_size = parse_num(v)?,
            "image_size" => self.image_size = parse_num(v)?,
            "patch" => self.patch = parse_num(v)?,
            "layers" => self.layers = parse_num(v)?,
            "heads" => self.heads = parse_num(v)?,
            "hidden" => self.hidden = parse_num(v)?,
            "mlp" => self.mlp = parse_num(v)?,
            "grid_channels" => self.grid_channels = parse_num(v)?,
            "fpn_dim" => self.fpn_dim = parse_num(v)?,
            "taps" => {
                let t: Vec<usize> = v.split(',').map(|s| parse_num(s.trim())).collect::<std::result::Result<_, _>>()?;
                let t: [usize; 4] = t.try_into().map_err(|_| "expected four comma-separated blocks".to_string())?;
                self.taps = Some(t);
            }
            "streams" => {
                self.streams = match v {
                    "both" => Streams::Both,
                    "vision" => Streams::VisionOnly,
                    "grid" => Streams::GridOnly,
                    _ => return Err(format!("expected both, vision or grid, got `{v}`")),
                }
            }
            "mask_ratio" => self.mask_ratio = parse_num(v)?,
            "whole_word" => self.whole_word = parse_bool(v)?,
            "tau" => self.tau = parse_num(v)?,
            "num_segments" => self.num_segments = parse_num(v)?,
            "target_dim" => self.target_dim = parse_num(v)?,
            "mlp_hidden" => self.mlp_hidden = parse_num(v)?,
            "negatives" => {
                self.negatives = match v {
                    "in_batch" => Negatives::InBatch,
                    "same_page" => Negatives::SamePage,
                    _ => return Err(format!("expected in_batch or same_page, got `{v}`")),
                }
            }
            "mglm_weight" => self.mglm_weight = parse_num(v)?,
            "slm_weight" => self.slm_weight = parse_num(v)?,
            "pretrain_steps" => self.pretrain_steps = parse_num(v)?,
            "pretrain_pages_per_step" => self.pretrain_pages_per_step = parse_num(v)?,
            "pretrain_lr" => self.pretrain_lr = parse_num(v)?,
            "pretrain_warmup" => self.pretrain_warmup = parse_num(v)?,
            "pretrain_weight_decay" => self.pretrain_weight_decay = parse_num(v)?,
            "train_steps" => self.train_steps = parse_num(v)?,
            "train_batch" => self.train_batch = parse_num(v)?,
            "train_lr" => self.train_lr = parse_num(v)?,
            "train_warmup" => self.train_warmup = parse_num(v)?,
            "eval_every" => self.eval_every = parse_num(v)?,
            "weight_decay" => self.weight_decay = parse_num(v)?,
            "score_thresh" => self.score_thresh = parse_num(v)?,
            "nms_iou" => self.nms_iou = parse_num(v)?,
            "max_dets" => self.max_dets = parse_num(v)?,
            "synth_pages" => self.synth_pages = parse_num(v)?,
            "synth_val_pages" => self.synth_val_pages = parse_num(v)?,
            "corpus" => self.corpus = parse_path(v)?,
            "train_data" => self.train_data = parse_path(v)?,
            "val_data" => self.val_data = parse_path(v)?,
            "init" => self.init = parse_path(v)?,
            _ => return Err("unknown key".into()),
        }
        Ok(())
    }

    fn err(&self, key: &str, msg: impl Into<String>) -> Error {
        Error::Config {
            line: self.lines.get(key).copied().unwrap_or(0),
            key: key.to_string(),
            msg: msg.into(),
        }
    }

    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Config {
                line: i + 1,
                key: line.to_string(),
                msg: "expected `key = value`".into(),
            })?;
            cfg.assign(key.trim(), value.trim(), i + 1)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn assign(&mut self, key: &str, value: &str, line: usize) -> Result<()> {
        self.set(key, value).map_err(|msg| Error::Config {
            line,
            key: key.to_string(),
            msg,
        })?;
        self.lines.insert(key.to_string(), line);
        Ok(())
    }

    /// Applies a `key=value` command-line override (reported as line 0).
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv.split_once('=').ok_or_else(|| Error::Config {
            line: 0,
            key: kv.to_string(),
            msg: "override must be `key=value`".into(),
        })?;
        self.assign(k.trim(), v.trim(), 0)
    }

    /// Checks value ranges, model geometry and that referenced paths exist.
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.image_size % self.patch != 0 {
            return Err(self.err("patch", format!("image size {} is not divisible by patch {}", self.image_size, self.patch)));
        }
        if self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(self.err("heads", format!("hidden size {} is not divisible by {} heads", self.hidden, self.heads)));
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(self.err("mask_ratio", "must lie in (0, 1)"));
        }
        if !(self.tau > 0.0) {
            return Err(self.err("tau", "must be positive"));
        }
        if !(self.score_thresh > 0.0 && self.score_thresh < 1.0) {
            return Err(self.err("score_thresh", "must lie in (0, 1)"));
        }
        if self.vocab_size <= vgt_core::doc::FIRST_REGULAR as usize {
            return Err(self.err("vocab_size", "must exceed the reserved tokens"));
        }
        for (key, p) in [
            ("vocab", &self.vocab),
            ("corpus", &self.corpus),
            ("train_data", &self.train_data),
            ("val_data", &self.val_data),
            ("init", &self.init),
        ] {
            if let Some(p) = p {
                if !p.exists() {
                    return Err(self.err(key, format!("{} does not exist", p.display())));
                }
            }
        }
        let bb = self.backbone();
        bb.validate().map_err(|e| self.err("model", e.to_string()))?;
        Ok(())
    }

    pub fn backbone(&self) -> BackboneConfig {
        let enc = |ch: usize| EncoderConfig {
            layers: self.layers,
            heads: self.heads,
            hidden: self.hidden,
            mlp: self.mlp,
            patch: self.patch,
            in_channels: ch,
            height: self.image_size,
            width: self.image_size,
            taps: self.taps,
        };
        BackboneConfig {
            vision: enc(3),
            grid: enc(self.grid_channels),
            vocab_size: self.vocab_size,
            fpn_dim: self.fpn_dim,
            streams: self.streams,
        }
    }

    pub fn pretrain(&self) -> PretrainConfig {
        let mut backbone = self.backbone();
        backbone.streams = Streams::GridOnly;
        PretrainConfig {
            backbone,
            mask: MaskConfig {
                ratio: self.mask_ratio,
                whole_word: self.whole_word,
            },
            tau: self.tau,
            num_segments: self.num_segments,
            target_dim: self.target_dim,
            mlp_hidden: self.mlp_hidden,
            negatives: self.negatives,
            pseudo_seed: PretrainConfig::desk(self.vocab_size).pseudo_seed,
            mglm_weight: self.mglm_weight,
            slm_weight: self.slm_weight,
        }
    }

    pub fn detect(&self, num_classes: usize) -> DetectConfig {
        DetectConfig {
            backbone: self.backbone(),
            num_classes,
            score_thresh: self.score_thresh,
            nms_iou: self.nms_iou,
            max_dets: self.max_dets,
        }
    }

    pub fn pretrain_opt(&self) -> AdamW {
        AdamW {
            lr: self.pretrain_lr,
            warmup_steps: self.pretrain_warmup,
            weight_decay: self.pretrain_weight_decay,
            ..AdamW::default()
        }
    }

    pub fn train_opt(&self) -> AdamW {
        AdamW {
            lr: self.train_lr,
            warmup_steps: self.train_warmup,
            weight_decay: self.weight_decay,
            ..AdamW::default()
        }
    }
}

pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    RunConfig::parse_str(&text)
}
