//! Run configuration: a `key = value` text file plus explicit overrides.
//!
//! Lines starting with `#` and blank lines are ignored. Every key must be
//! known. [`RunConfig::dump`] writes every key in a fixed order with values
//! that parse back exactly.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::autodiff::UpsampleMode;
use crate::error::{Error, Result};
use crate::losses::LossVariant;
use crate::model::{GateOrder, ModelConfig};
use crate::synth_data::SyntheticSpec;
use crate::training::TrainConfig;
use crate::vl_aggregation::{CountScaling, TextMode};

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub dir: PathBuf,
    pub seed: u64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub ambiguous: bool,
    pub lesion_min: u32,
    pub lesion_max: u32,
    pub noise_sigma: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("data"),
            seed: 0,
            n_train: 800,
            n_val: 200,
            n_test: 0,
            ambiguous: false,
            lesion_min: 1,
            lesion_max: 3,
            noise_sigma: 0.03,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            train: TrainConfig::default(),
            model: ModelConfig::default(),
            data: DataConfig::default(),
            output_dir: PathBuf::from("runs"),
        }
    }
}

/// Every accepted key, in dump order.
pub const KEYS: &[&str] = &[
    "seed",
    "train.learning_rate",
    "train.batch_size",
    "train.max_rounds",
    "train.early_stop_patience",
    "train.eval_every",
    "train.threshold",
    "loss.alpha",
    "loss.beta",
    "loss.gamma",
    "loss.variant",
    "loss.smooth",
    "loss.ce_eps",
    "model.image_size",
    "model.in_channels",
    "model.channels",
    "model.token_patch",
    "model.heads",
    "model.mlp_ratio",
    "model.embed_dim",
    "model.vlab_reduction",
    "model.share_branch_mlp",
    "model.upsample",
    "model.gate_order",
    "model.text_mode",
    "model.count_scaling",
    "data.dir",
    "data.seed",
    "data.n_train",
    "data.n_val",
    "data.n_test",
    "data.ambiguous",
    "data.lesion_min",
    "data.lesion_max",
    "data.noise_sigma",
    "output.dir",
];

/// Keys that describe where things live, not what is computed.
const PATH_KEYS: &[&str] = &["data.dir", "output.dir"];

/// Short sweep names accepted for grid axes.
pub fn resolve_alias(key: &str) -> &str {
    match key {
        "batch_size" | "batch" => "train.batch_size",
        "learning_rate" | "lr" => "train.learning_rate",
        "alpha" => "loss.alpha",
        "beta" => "loss.beta",
        "gamma" => "loss.gamma",
        "variant" => "loss.variant",
        "text_mode" => "model.text_mode",
        other => other,
    }
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {v:?}"))),
    }
}

fn choice<T: Copy>(key: &str, v: &str, options: &[(&str, T)]) -> Result<T> {
    options
        .iter()
        .find(|(n, _)| n.eq_ignore_ascii_case(v))
        .map(|(_, t)| *t)
        .ok_or_else(|| {
            let names: Vec<&str> = options.iter().map(|(n, _)| *n).collect();
            Error::Config(format!("{key}: expected one of {}, got {v:?}", names.join("|")))
        })
}

const VARIANTS: &[(&str, LossVariant)] = &[("v1", LossVariant::V1), ("v2", LossVariant::V2)];
const UPSAMPLE: &[(&str, UpsampleMode)] = &[("nearest", UpsampleMode::Nearest), ("bilinear", UpsampleMode::Bilinear)];
const ORDERS: &[(&str, GateOrder)] = &[
    ("gate_then_vlab", GateOrder::GateThenVlab),
    ("vlab_then_gate", GateOrder::VlabThenGate),
];
const TEXT_MODES: &[(&str, TextMode)] = &[
    ("none", TextMode::None),
    ("single", TextMode::Single),
    ("multi", TextMode::Multi),
];
const SCALINGS: &[(&str, CountScaling)] = &[("raw", CountScaling::Raw), ("normalized", CountScaling::Normalized)];

fn name_of<T: PartialEq + Copy>(options: &[(&'static str, T)], t: T) -> &'static str {
    options.iter().find(|(_, o)| *o == t).map(|(n, _)| *n).expect("listed option")
}

impl RunConfig {
    /// Set one key from its text form.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let v = v.trim();
        match key {
            "seed" => {
                self.seed = parse(key, v)?;
                self.train.seed = self.seed;
            }
            "train.learning_rate" => self.train.learning_rate = parse(key, v)?,
            "train.batch_size" => self.train.batch_size = parse(key, v)?,
            "train.max_rounds" => self.train.max_rounds = parse(key, v)?,
            "train.early_stop_patience" => self.train.early_stop_patience = parse(key, v)?,
            "train.eval_every" => self.train.eval_every = parse(key, v)?,
            "train.threshold" => self.train.threshold = parse(key, v)?,
            "loss.alpha" => self.train.loss.alpha = parse(key, v)?,
            "loss.beta" => self.train.loss.beta = parse(key, v)?,
            "loss.gamma" => self.train.loss.gamma = parse(key, v)?,
            "loss.variant" => self.train.loss.variant = choice(key, v, VARIANTS)?,
            "loss.smooth" => self.train.loss.smooth = parse(key, v)?,
            "loss.ce_eps" => self.train.loss.ce_eps = parse(key, v)?,
            "model.image_size" => self.model.image_size = parse(key, v)?,
            "model.in_channels" => self.model.in_channels = parse(key, v)?,
            "model.channels" => {
                self.model.channels = v
                    .split(',')
                    .map(|c| parse(key, c.trim()))
                    .collect::<Result<_>>()?
            }
            "model.token_patch" => self.model.token_patch = parse(key, v)?,
            "model.heads" => self.model.heads = parse(key, v)?,
            "model.mlp_ratio" => self.model.mlp_ratio = parse(key, v)?,
            "model.embed_dim" => {
                self.model.embed_dim = if v == "auto" { None } else { Some(parse(key, v)?) }
            }
            "model.vlab_reduction" => self.model.vlab_reduction = parse(key, v)?,
            "model.share_branch_mlp" => self.model.share_branch_mlp = parse_bool(key, v)?,
            "model.upsample" => self.model.upsample = choice(key, v, UPSAMPLE)?,
            "model.gate_order" => self.model.gate_order = choice(key, v, ORDERS)?,
            "model.text_mode" => self.model.text_mode = choice(key, v, TEXT_MODES)?,
            "model.count_scaling" => self.model.count_scaling = choice(key, v, SCALINGS)?,
            "data.dir" => self.data.dir = PathBuf::from(v),
            "data.seed" => self.data.seed = parse(key, v)?,
            "data.n_train" => self.data.n_train = parse(key, v)?,
            "data.n_val" => self.data.n_val = parse(key, v)?,
            "data.n_test" => self.data.n_test = parse(key, v)?,
            "data.ambiguous" => self.data.ambiguous = parse_bool(key, v)?,
            "data.lesion_min" => self.data.lesion_min = parse(key, v)?,
            "data.lesion_max" => self.data.lesion_max = parse(key, v)?,
            "data.noise_sigma" => self.data.noise_sigma = parse(key, v)?,
            "output.dir" => self.output_dir = PathBuf::from(v),
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Result<String> {
        let t = &self.train;
        let l = &self.train.loss;
        let m = &self.model;
        let d = &self.data;
        Ok(match key {
            "seed" => self.seed.to_string(),
            "train.learning_rate" => t.learning_rate.to_string(),
            "train.batch_size" => t.batch_size.to_string(),
            "train.max_rounds" => t.max_rounds.to_string(),
            "train.early_stop_patience" => t.early_stop_patience.to_string(),
            "train.eval_every" => t.eval_every.to_string(),
            "train.threshold" => t.threshold.to_string(),
            "loss.alpha" => l.alpha.to_string(),
            "loss.beta" => l.beta.to_string(),
            "loss.gamma" => l.gamma.to_string(),
            "loss.variant" => name_of(VARIANTS, l.variant).into(),
            "loss.smooth" => l.smooth.to_string(),
            "loss.ce_eps" => l.ce_eps.to_string(),
            "model.image_size" => m.image_size.to_string(),
            "model.in_channels" => m.in_channels.to_string(),
            "model.channels" => m.channels.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(","),
            "model.token_patch" => m.token_patch.to_string(),
            "model.heads" => m.heads.to_string(),
            "model.mlp_ratio" => m.mlp_ratio.to_string(),
            "model.embed_dim" => m.embed_dim.map_or("auto".into(), |e| e.to_string()),
            "model.vlab_reduction" => m.vlab_reduction.to_string(),
            "model.share_branch_mlp" => m.share_branch_mlp.to_string(),
            "model.upsample" => name_of(UPSAMPLE, m.upsample).into(),
            "model.gate_order" => name_of(ORDERS, m.gate_order).into(),
            "model.text_mode" => name_of(TEXT_MODES, m.text_mode).into(),
            "model.count_scaling" => name_of(SCALINGS, m.count_scaling).into(),
            "data.dir" => d.dir.display().to_string(),
            "data.seed" => d.seed.to_string(),
            "data.n_train" => d.n_train.to_string(),
            "data.n_val" => d.n_val.to_string(),
            "data.n_test" => d.n_test.to_string(),
            "data.ambiguous" => d.ambiguous.to_string(),
            "data.lesion_min" => d.lesion_min.to_string(),
            "data.lesion_max" => d.lesion_max.to_string(),
            "data.noise_sigma" => d.noise_sigma.to_string(),
            "output.dir" => self.output_dir.display().to_string(),
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        })
    }

    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("{origin}:{}: expected key = value", n + 1)))?;
            self.set(k.trim(), v)
                .map_err(|e| Error::Config(format!("{origin}:{}: {}", n + 1, strip(e))))?;
        }
        Ok(())
    }

    pub fn parse_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text, "<config>")?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Defaults, then the file (if given), then `overrides` in order.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(p) = path {
            let text = fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read config file {}: {e}", p.display())))?;
            cfg.apply_text(&text, &p.display().to_string())?;
        }
        for (k, v) in overrides {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.model.validate()?;
        if self.model.num_stages() != 4 {
            return Err(Error::Config(format!(
                "the composite loss needs 4 stages, model.channels lists {}",
                self.model.num_stages()
            )));
        }
        self.synthetic_spec().validate()
    }

    pub fn dump(&self) -> String {
        let mut out = String::new();
        for k in KEYS {
            let _ = writeln!(out, "{k} = {}", self.get(k).expect("listed key"));
        }
        out
    }

    /// Model keys only, as stored in checkpoints.
    pub fn model_text(&self) -> String {
        let mut out = String::new();
        for k in KEYS.iter().filter(|k| k.starts_with("model.")) {
            let _ = writeln!(out, "{k} = {}", self.get(k).expect("listed key"));
        }
        out
    }

    /// SHA-256 over every non-path key.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for k in KEYS.iter().filter(|k| !PATH_KEYS.contains(k)) {
            h.update(format!("{k}={}\n", self.get(k).expect("listed key")));
        }
        hex::encode(h.finalize())
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        let mut s = SyntheticSpec::for_size(self.model.image_size);
        s.seed = self.data.seed;
        s.lesion_count = (self.data.lesion_min, self.data.lesion_max);
        s.noise_sigma = self.data.noise_sigma;
        s.ambiguous = self.data.ambiguous;
        s
    }
}

fn strip(e: Error) -> String {
    match e {
        Error::Config(m) => m,
        e => e.to_string(),
    }
}

/// Model configuration from checkpoint text (model keys only).
pub fn model_from_text(text: &str) -> Result<ModelConfig> {
    let mut cfg = RunConfig::default();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Checkpoint(format!("model text line {}: expected key = value", n + 1)))?;
        let k = k.trim();
        if !k.starts_with("model.") {
            return Err(Error::Checkpoint(format!("model text has non-model key {k}")));
        }
        cfg.set(k, v).map_err(|e| Error::Checkpoint(strip(e)))?;
    }
    cfg.model.validate()?;
    Ok(cfg.model)
}

/// One sweep axis: a key and its values in text form.
pub type GridAxis = (String, Vec<String>);

/// Parse `key=v1,v2,...` axes, resolving short names.
pub fn parse_grid(specs: &[String]) -> Result<Vec<GridAxis>> {
    if specs.is_empty() {
        return Err(Error::Config("sweep grid is empty".into()));
    }
    let mut axes: Vec<GridAxis> = Vec::new();
    for s in specs {
        let (k, vs) = s
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("grid axis {s:?} is not key=v1,v2,...")))?;
        let key = resolve_alias(k.trim()).to_string();
        if !KEYS.contains(&key.as_str()) || PATH_KEYS.contains(&key.as_str()) {
            return Err(Error::Config(format!("cannot sweep over {key:?}")));
        }
        if axes.iter().any(|(k, _)| *k == key) {
            return Err(Error::Config(format!("grid repeats {key}")));
        }
        let values: Vec<String> = vs.split(',').map(|v| v.trim().to_string()).filter(|v| !v.is_empty()).collect();
        if values.is_empty() {
            return Err(Error::Config(format!("grid axis {key} has no values")));
        }
        axes.push((key, values));
    }
    Ok(axes)
}

/// Cartesian product of the axes, first axis varying slowest.
pub fn expand_grid(axes: &[GridAxis], cap: usize) -> Result<Vec<Vec<(String, String)>>> {
    if axes.is_empty() {
        return Err(Error::Config("sweep grid is empty".into()));
    }
    let total = axes.iter().try_fold(1usize, |a, (_, v)| a.checked_mul(v.len()));
    match total {
        Some(t) if t <= cap => {}
        _ => {
            return Err(Error::Config(format!(
                "sweep grid has {} cells, cap is {cap}",
                total.map_or("too many".to_string(), |t| t.to_string())
            )))
        }
    }
    let mut cells: Vec<Vec<(String, String)>> = vec![Vec::new()];
    for (k, vs) in axes {
        cells = cells
            .into_iter()
            .flat_map(|c| {
                vs.iter().map(move |v| {
                    let mut c = c.clone();
                    c.push((k.clone(), v.clone()));
                    c
                })
            })
            .collect();
    }
    Ok(cells)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        let back = RunConfig::parse_text(&cfg.dump()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.fingerprint(), cfg.fingerprint());
    }

    #[test]
    fn unknown_key_rejected() {
        assert!(matches!(RunConfig::parse_text("train.lr = 1"), Err(Error::Config(_))));
    }

    #[test]
    fn overrides_apply() {
        let cfg = RunConfig::load(None, &[("loss.alpha".into(), "0".into())]).unwrap();
        assert_eq!(cfg.train.loss.alpha, 0.0);
        let m = model_from_text(&cfg.model_text()).unwrap();
        assert_eq!(m, cfg.model);
    }

    #[test]
    fn grid_expansion() {
        let axes = parse_grid(&["batch=2,4,8".into(), "lr=1e-4,1e-3,1e-2".into()]).unwrap();
        let cells = expand_grid(&axes, 100).unwrap();
        assert_eq!(cells.len(), 9);
        assert_eq!(cells[1], vec![("train.batch_size".into(), "2".into()), ("train.learning_rate".into(), "1e-3".into())]);
        assert!(expand_grid(&axes, 8).is_err());
        assert!(parse_grid(&[]).is_err());
    }
}
