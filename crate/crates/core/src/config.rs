//! Flat key=value configuration text with `[section]` headers, plus dotted
//! `section.key=value` overrides. Unknown keys are rejected; emission is
//! deterministic so identical configs print identically.

use crate::convnet::{ConvLayerSpec, PoolSpec};
use crate::error::{Error, Result};
use crate::model::{desk_conv_stack, ModelConfig};
use crate::train::TrainConfig;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskKind {
    Synthetic,
    Idx,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Synthetic => "synthetic",
            TaskKind::Idx => "idx",
        }
    }
}

impl std::str::FromStr for TaskKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "synthetic" => Ok(TaskKind::Synthetic),
            "idx" => Ok(TaskKind::Idx),
            other => Err(Error::config(format!(
                "unknown task '{other}' (expected synthetic or idx)"
            ))),
        }
    }
}

/// Data-source settings.
#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub task: TaskKind,
    pub n_train: usize,
    pub n_val: usize,
    pub train_images: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub val_images: Option<PathBuf>,
    pub val_labels: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            task: TaskKind::Synthetic,
            n_train: 10_000,
            n_val: 2_000,
            train_images: None,
            train_labels: None,
            val_images: None,
            val_labels: None,
        }
    }
}

/// Full run configuration: model, training, data.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: default_model_config(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
        }
    }
}

/// Desk-scale default: 24x24 single-channel input pooled to a 24-channel 6x6
/// map, the four-scale pyramid, one hidden FC layer.
pub fn default_model_config() -> ModelConfig {
    ModelConfig {
        input: (1, 24, 24),
        conv: desk_conv_stack(24),
        scales: vec![1, 2, 3, 6],
        hidden: 24,
        cell: crate::hrnn::CellKind::Srn,
        fc: vec![96],
        classes: 2,
        dropout: 0.5,
        freeze_spatial: false,
        freeze_cross: false,
    }
}

// ---------------------------------------------------------------------------
// Raw text layer.
// ---------------------------------------------------------------------------

/// Parsed `[section]` / `key = value` text, order-preserving within a map.
pub type RawConfig = BTreeMap<String, BTreeMap<String, String>>;

pub fn parse_raw(text: &str) -> Result<RawConfig> {
    let mut out: RawConfig = BTreeMap::new();
    let mut section = String::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(name) = line.strip_prefix('[') {
            let name = name
                .strip_suffix(']')
                .ok_or_else(|| Error::config(format!("line {}: malformed section header '{line}'", lineno + 1)))?;
            section = name.trim().to_string();
            out.entry(section.clone()).or_default();
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::config(format!("line {}: expected key = value, got '{line}'", lineno + 1)))?;
        if section.is_empty() {
            return Err(Error::config(format!(
                "line {}: key '{}' appears before any [section]",
                lineno + 1,
                key.trim()
            )));
        }
        out.entry(section.clone())
            .or_default()
            .insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(out)
}

/// Apply a dotted `section.key=value` override.
pub fn apply_override(raw: &mut RawConfig, spec: &str) -> Result<()> {
    let (key, value) = spec
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override '{spec}' is not key=value")))?;
    let (section, key) = key
        .trim()
        .split_once('.')
        .ok_or_else(|| Error::config(format!("override key '{}' must be section.key", key.trim())))?;
    raw.entry(section.to_string())
        .or_default()
        .insert(key.to_string(), value.trim().to_string());
    Ok(())
}

// ---------------------------------------------------------------------------
// Typed layer.
// ---------------------------------------------------------------------------

fn parse_usize(section: &str, key: &str, v: &str) -> Result<usize> {
    v.parse()
        .map_err(|_| Error::config(format!("{section}.{key}: '{v}' is not a non-negative integer")))
}

fn parse_u64(section: &str, key: &str, v: &str) -> Result<u64> {
    v.parse()
        .map_err(|_| Error::config(format!("{section}.{key}: '{v}' is not a non-negative integer")))
}

fn parse_f64(section: &str, key: &str, v: &str) -> Result<f64> {
    v.parse()
        .map_err(|_| Error::config(format!("{section}.{key}: '{v}' is not a number")))
}

fn parse_f32(section: &str, key: &str, v: &str) -> Result<f32> {
    v.parse()
        .map_err(|_| Error::config(format!("{section}.{key}: '{v}' is not a number")))
}

fn parse_bool(section: &str, key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::config(format!("{section}.{key}: '{v}' is not a boolean"))),
    }
}

fn parse_usize_list(section: &str, key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',')
        .map(|p| parse_usize(section, key, p.trim()))
        .collect()
}

/// Parse one conv layer: `12x5x5 s1 p2 relu pool2x2s2`.
fn parse_conv_layer(text: &str) -> Result<ConvLayerSpec> {
    let mut tokens = text.split_whitespace();
    let head = tokens
        .next()
        .ok_or_else(|| Error::config("empty conv layer spec".to_string()))?;
    let dims: Vec<&str> = head.split('x').collect();
    if dims.len() != 3 {
        return Err(Error::config(format!(
            "conv layer '{head}' must be CHANNELSxKxK"
        )));
    }
    let out_channels = parse_usize("model", "conv", dims[0])?;
    let kh = parse_usize("model", "conv", dims[1])?;
    let kw = parse_usize("model", "conv", dims[2])?;
    if kh != kw {
        return Err(Error::config(format!("conv kernel must be square, got {kh}x{kw}")));
    }
    let mut spec = ConvLayerSpec {
        out_channels,
        kernel: kh,
        stride: 1,
        padding: 0,
        relu: false,
        pool: None,
    };
    for tok in tokens {
        if tok == "relu" {
            spec.relu = true;
        } else if let Some(s) = tok.strip_prefix("pool") {
            let (win, stride) = s
                .split_once('s')
                .ok_or_else(|| Error::config(format!("pool token '{tok}' must be poolWxWsS")))?;
            let (w1, w2) = win
                .split_once('x')
                .ok_or_else(|| Error::config(format!("pool token '{tok}' must be poolWxWsS")))?;
            let w1 = parse_usize("model", "conv", w1)?;
            let w2 = parse_usize("model", "conv", w2)?;
            if w1 != w2 {
                return Err(Error::config(format!("pool window must be square, got {w1}x{w2}")));
            }
            spec.pool = Some(PoolSpec {
                window: w1,
                stride: parse_usize("model", "conv", stride)?,
            });
        } else if let Some(s) = tok.strip_prefix('s') {
            spec.stride = parse_usize("model", "conv", s)?;
        } else if let Some(p) = tok.strip_prefix('p') {
            spec.padding = parse_usize("model", "conv", p)?;
        } else {
            return Err(Error::config(format!("unknown conv token '{tok}'")));
        }
    }
    Ok(spec)
}

fn emit_conv_layer(spec: &ConvLayerSpec) -> String {
    let mut s = format!(
        "{}x{}x{} s{} p{}",
        spec.out_channels, spec.kernel, spec.kernel, spec.stride, spec.padding
    );
    if spec.relu {
        s.push_str(" relu");
    }
    if let Some(p) = spec.pool {
        let _ = write!(s, " pool{}x{}s{}", p.window, p.window, p.stride);
    }
    s
}

fn parse_input(v: &str) -> Result<(usize, usize, usize)> {
    let parts: Vec<&str> = v.split('x').collect();
    if parts.len() != 3 {
        return Err(Error::config(format!("model.input: '{v}' must be CxHxW")));
    }
    Ok((
        parse_usize("model", "input", parts[0])?,
        parse_usize("model", "input", parts[1])?,
        parse_usize("model", "input", parts[2])?,
    ))
}

fn apply_model_key(cfg: &mut ModelConfig, key: &str, v: &str) -> Result<()> {
    match key {
        "input" => cfg.input = parse_input(v)?,
        "conv" => {
            cfg.conv = v
                .split(';')
                .map(parse_conv_layer)
                .collect::<Result<Vec<_>>>()?;
        }
        "scales" => cfg.scales = parse_usize_list("model", "scales", v)?,
        "hidden" => cfg.hidden = parse_usize("model", "hidden", v)?,
        "cell" => cfg.cell = v.parse()?,
        "fc" => cfg.fc = parse_usize_list("model", "fc", v)?,
        "classes" => cfg.classes = parse_usize("model", "classes", v)?,
        "dropout" => cfg.dropout = parse_f64("model", "dropout", v)?,
        "freeze_spatial" => cfg.freeze_spatial = parse_bool("model", "freeze_spatial", v)?,
        "freeze_cross" => cfg.freeze_cross = parse_bool("model", "freeze_cross", v)?,
        _ => return Err(Error::config(format!("unknown config key 'model.{key}'"))),
    }
    Ok(())
}

fn apply_train_key(cfg: &mut TrainConfig, key: &str, v: &str) -> Result<()> {
    match key {
        "batch_size" => cfg.batch_size = parse_usize("train", "batch_size", v)?,
        "epochs" => cfg.epochs = parse_usize("train", "epochs", v)?,
        "seed" => cfg.seed = parse_u64("train", "seed", v)?,
        "lr" => cfg.lr = parse_f32("train", "lr", v)?,
        "momentum" => cfg.momentum = parse_f32("train", "momentum", v)?,
        "patience" => cfg.patience = parse_usize("train", "patience", v)?,
        "weight_decay" => cfg.weight_decay = parse_f32("train", "weight_decay", v)?,
        "hflip" => cfg.hflip = parse_bool("train", "hflip", v)?,
        "hrnn_lr_mult" => cfg.hrnn_lr_mult = parse_f32("train", "hrnn_lr_mult", v)?,
        "threads" => cfg.threads = parse_usize("train", "threads", v)?,
        "max_steps" => {
            cfg.max_steps = if v == "none" {
                None
            } else {
                Some(parse_usize("train", "max_steps", v)?)
            }
        }
        _ => return Err(Error::config(format!("unknown config key 'train.{key}'"))),
    }
    Ok(())
}

fn apply_data_key(cfg: &mut DataConfig, key: &str, v: &str) -> Result<()> {
    match key {
        "task" => cfg.task = v.parse()?,
        "n_train" => cfg.n_train = parse_usize("data", "n_train", v)?,
        "n_val" => cfg.n_val = parse_usize("data", "n_val", v)?,
        "train_images" => cfg.train_images = Some(PathBuf::from(v)),
        "train_labels" => cfg.train_labels = Some(PathBuf::from(v)),
        "val_images" => cfg.val_images = Some(PathBuf::from(v)),
        "val_labels" => cfg.val_labels = Some(PathBuf::from(v)),
        _ => return Err(Error::config(format!("unknown config key 'data.{key}'"))),
    }
    Ok(())
}

/// Build a run configuration from parsed text, starting from defaults.
/// Rejects unknown sections and keys by name.
pub fn run_config_from_raw(raw: &RawConfig) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    for (section, keys) in raw {
        for (key, value) in keys {
            match section.as_str() {
                "model" => apply_model_key(&mut cfg.model, key, value)?,
                "train" => apply_train_key(&mut cfg.train, key, value)?,
                "data" => apply_data_key(&mut cfg.data, key, value)?,
                other => {
                    return Err(Error::config(format!("unknown config section '[{other}]'")))
                }
            }
        }
    }
    Ok(cfg)
}

/// Emit the `[model]` section (used verbatim inside checkpoints).
pub fn emit_model_config(cfg: &ModelConfig) -> String {
    let mut s = String::new();
    s.push_str("[model]\n");
    let _ = writeln!(s, "input = {}x{}x{}", cfg.input.0, cfg.input.1, cfg.input.2);
    let conv: Vec<String> = cfg.conv.iter().map(emit_conv_layer).collect();
    let _ = writeln!(s, "conv = {}", conv.join("; "));
    let scales: Vec<String> = cfg.scales.iter().map(|v| v.to_string()).collect();
    let _ = writeln!(s, "scales = {}", scales.join(","));
    let _ = writeln!(s, "hidden = {}", cfg.hidden);
    let _ = writeln!(s, "cell = {}", cfg.cell.name());
    let fc: Vec<String> = cfg.fc.iter().map(|v| v.to_string()).collect();
    let _ = writeln!(s, "fc = {}", fc.join(","));
    let _ = writeln!(s, "classes = {}", cfg.classes);
    let _ = writeln!(s, "dropout = {}", cfg.dropout);
    let _ = writeln!(s, "freeze_spatial = {}", cfg.freeze_spatial);
    let _ = writeln!(s, "freeze_cross = {}", cfg.freeze_cross);
    s
}

/// Parse a `[model]`-only config text (checkpoint header).
pub fn parse_model_config(text: &str) -> Result<ModelConfig> {
    let raw = parse_raw(text)?;
    let mut cfg = default_model_config();
    for (section, keys) in &raw {
        if section != "model" {
            return Err(Error::config(format!(
                "unexpected section '[{section}]' in model config block"
            )));
        }
        for (key, value) in keys {
            apply_model_key(&mut cfg, key, value)?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Emit the full effective configuration, deterministically ordered.
pub fn emit_run_config(cfg: &RunConfig) -> String {
    let mut s = emit_model_config(&cfg.model);
    s.push('\n');
    s.push_str("[train]\n");
    let t = &cfg.train;
    let _ = writeln!(s, "batch_size = {}", t.batch_size);
    let _ = writeln!(s, "epochs = {}", t.epochs);
    let _ = writeln!(s, "seed = {}", t.seed);
    let _ = writeln!(s, "lr = {}", t.lr);
    let _ = writeln!(s, "momentum = {}", t.momentum);
    let _ = writeln!(s, "patience = {}", t.patience);
    let _ = writeln!(s, "weight_decay = {}", t.weight_decay);
    let _ = writeln!(s, "hflip = {}", t.hflip);
    let _ = writeln!(s, "hrnn_lr_mult = {}", t.hrnn_lr_mult);
    let _ = writeln!(s, "threads = {}", t.threads);
    let _ = writeln!(
        s,
        "max_steps = {}",
        t.max_steps.map(|v| v.to_string()).unwrap_or_else(|| "none".to_string())
    );
    s.push('\n');
    s.push_str("[data]\n");
    let d = &cfg.data;
    let _ = writeln!(s, "task = {}", d.task.name());
    let _ = writeln!(s, "n_train = {}", d.n_train);
    let _ = writeln!(s, "n_val = {}", d.n_val);
    for (key, path) in [
        ("train_images", &d.train_images),
        ("train_labels", &d.train_labels),
        ("val_images", &d.val_images),
        ("val_labels", &d.val_labels),
    ] {
        if let Some(p) = path {
            let _ = writeln!(s, "{key} = {}", p.display());
        }
    }
    s
}
