//! Run configuration: a single JSON tree merged from defaults, an optional
//! config file, and dotted command-line overrides. Unknown keys are
//! rejected with their path.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scenes::{AugmentConfig, DatasetSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PosKind {
    Learnable,
    Sine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceLevel {
    E3,
    E4,
    E5,
}

impl SourceLevel {
    pub fn stride(self) -> usize {
        match self {
            SourceLevel::E3 => 8,
            SourceLevel::E4 => 16,
            SourceLevel::E5 => 32,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UpdateOrder {
    PixelThenQuery,
    QueryThenPixel,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct PixelConfig {
    /// Channel width of the E-pyramid (and the whole decoder).
    pub dim: usize,
    /// Pyramid pooling module on the top level; `false` is plain FPN.
    pub use_ppm: bool,
}

impl Default for PixelConfig {
    fn default() -> Self {
        PixelConfig {
            dim: 32,
            use_ppm: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct QueryConfig {
    /// Instance-activation-guided query count.
    pub na: usize,
    /// Auxiliary learnable query count.
    pub nb: usize,
    pub pos: PosKind,
    pub source_level: SourceLevel,
}

impl Default for QueryConfig {
    fn default() -> Self {
        // paper-scale default is na=100; at the 96x96 desk scale the E4
        // grid has only 36 cells and na must not exceed it
        QueryConfig {
            na: 16,
            nb: 8,
            pos: PosKind::Learnable,
            source_level: SourceLevel::E4,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    /// Transformer decoder layer count; 0 means layer-0 heads only.
    pub d: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub order: UpdateOrder,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            d: 1,
            heads: 4,
            ffn_dim: 128,
            order: UpdateOrder::PixelThenQuery,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub lambda_cls: f64,
    pub lambda_ce: f64,
    pub lambda_dice: f64,
    pub lambda_cls_q: f64,
    pub lambda_loc: f64,
    pub no_object_weight: f64,
    pub use_gt_guidance: bool,
    pub use_location_cost: bool,
    /// When false, the instance activation loss falls back to fixed
    /// per-pixel semantic-class targets instead of bipartite matching.
    pub use_bipartite: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_cls: 2.0,
            lambda_ce: 5.0,
            lambda_dice: 5.0,
            lambda_cls_q: 20.0,
            lambda_loc: 1000.0,
            no_object_weight: 0.1,
            use_gt_guidance: true,
            use_location_cost: true,
            use_bipartite: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub weight_decay: f64,
    pub backbone_lr_mult: f64,
    /// Fractions of total iterations at which the LR decays; strictly
    /// increasing, in (0,1].
    pub decay_fractions: Vec<f64>,
    pub decay_factor: f64,
    pub batch_size: usize,
    pub total_iters: usize,
    pub seed: u64,
    /// Checkpoint every n iterations (and at the end). 0 = end only.
    pub ckpt_every: usize,
    /// Evaluate every n iterations. 0 = never during training.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 1e-4,
            weight_decay: 0.05,
            backbone_lr_mult: 0.1,
            decay_fractions: vec![0.9, 0.95],
            decay_factor: 0.1,
            batch_size: 4,
            total_iters: 5000,
            seed: 0,
            ckpt_every: 1000,
            eval_every: 0,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSpec,
    pub aug: AugmentConfig,
    pub pixel: PixelConfig,
    pub query: QueryConfig,
    pub decoder: DecoderConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    /// The paper-width profile (256 channels, 100+8 queries, D=3). Needs
    /// paper-scale images; kept for reference and wide-config smoke tests.
    pub fn paper_scale() -> Self {
        RunConfig {
            dataset: DatasetSpec {
                height: 640,
                width: 640,
                ..DatasetSpec::default()
            },
            aug: AugmentConfig::paper_scale(),
            pixel: PixelConfig {
                dim: 256,
                use_ppm: true,
            },
            query: QueryConfig {
                na: 100,
                nb: 8,
                pos: PosKind::Learnable,
                source_level: SourceLevel::E4,
            },
            decoder: DecoderConfig {
                d: 3,
                heads: 8,
                ffn_dim: 1024,
                order: UpdateOrder::PixelThenQuery,
            },
            loss: LossConfig::default(),
            train: TrainConfig {
                batch_size: 16,
                ..TrainConfig::default()
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |path: &str, msg: String| Error::Config {
            path: path.into(),
            msg,
        };
        self.dataset.validate()?;
        if self.pixel.dim == 0 || self.pixel.dim % 4 != 0 {
            return Err(err(
                "pixel.dim",
                format!("{} must be a positive multiple of 4", self.pixel.dim),
            ));
        }
        if self.decoder.heads == 0 || self.pixel.dim % self.decoder.heads != 0 {
            return Err(err(
                "decoder.heads",
                format!(
                    "{} must divide pixel.dim {}",
                    self.decoder.heads, self.pixel.dim
                ),
            ));
        }
        let stride = self.query.source_level.stride();
        let cells = (self.aug.crop_h / stride) * (self.aug.crop_w / stride);
        if self.query.na == 0 || self.query.na > cells {
            return Err(err(
                "query.na",
                format!(
                    "{} queries but the {:?} grid at {}x{} has {cells} cells",
                    self.query.na, self.query.source_level, self.aug.crop_h, self.aug.crop_w
                ),
            ));
        }
        if self.aug.crop_h % 32 != 0 || self.aug.crop_w % 32 != 0 {
            return Err(err(
                "aug.crop_h",
                format!(
                    "training size {}x{} must be divisible by 32",
                    self.aug.crop_h, self.aug.crop_w
                ),
            ));
        }
        let f = &self.train.decay_fractions;
        let increasing = f.windows(2).all(|w| w[0] < w[1]);
        if !increasing || f.iter().any(|&v| !(0.0 < v && v <= 1.0)) {
            return Err(err(
                "train.decay_fractions",
                format!("{f:?} must be strictly increasing in (0,1]"),
            ));
        }
        for (name, v) in [
            ("loss.lambda_cls", self.loss.lambda_cls),
            ("loss.lambda_ce", self.loss.lambda_ce),
            ("loss.lambda_dice", self.loss.lambda_dice),
            ("loss.lambda_cls_q", self.loss.lambda_cls_q),
            ("loss.lambda_loc", self.loss.lambda_loc),
            ("loss.no_object_weight", self.loss.no_object_weight),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(err(name, format!("{v} must be a nonnegative number")));
            }
        }
        if self.train.batch_size == 0 || self.train.total_iters == 0 {
            return Err(err(
                "train.batch_size",
                "batch_size and total_iters must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Stable digest of the effective config, echoed into output artifacts.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in json.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        format!("{h:016x}")
    }
}

impl fmt::Display for RunConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}",
            serde_json::to_string_pretty(self).map_err(|_| fmt::Error)?
        )
    }
}

/// Deep-merge `patch` into `base`, rejecting keys absent from `base`.
fn merge_value(
    base: &mut serde_json::Value,
    patch: &serde_json::Value,
    path: &str,
) -> Result<()> {
    match (base, patch) {
        (serde_json::Value::Object(bm), serde_json::Value::Object(pm)) => {
            for (k, pv) in pm {
                let child_path = if path.is_empty() {
                    k.clone()
                } else {
                    format!("{path}.{k}")
                };
                match bm.get_mut(k) {
                    Some(bv) => merge_value(bv, pv, &child_path)?,
                    None => {
                        return Err(Error::Config {
                            path: child_path,
                            msg: "unknown key".into(),
                        })
                    }
                }
            }
            Ok(())
        }
        (b, p) => {
            *b = p.clone();
            Ok(())
        }
    }
}

/// Apply a dotted `key=value` override; the key must already exist.
fn apply_override(tree: &mut serde_json::Value, key: &str, raw: &str) -> Result<()> {
    let mut node = tree;
    let segments: Vec<&str> = key.split('.').collect();
    for (i, seg) in segments.iter().enumerate() {
        let obj = node.as_object_mut().ok_or_else(|| Error::Config {
            path: segments[..i].join("."),
            msg: "not a config section".into(),
        })?;
        node = obj.get_mut(*seg).ok_or_else(|| Error::Config {
            path: segments[..=i].join("."),
            msg: "unknown key".into(),
        })?;
    }
    // parse as JSON literal; bare words fall back to strings
    let value = serde_json::from_str(raw)
        .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    *node = value;
    Ok(())
}

/// Build the effective config: defaults <- optional file <- overrides.
pub fn load_config(file: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig> {
    let mut tree = serde_json::to_value(RunConfig::default())?;
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config {
            path: path.display().to_string(),
            msg: format!("cannot read config file: {e}"),
        })?;
        let patch: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Config {
            path: path.display().to_string(),
            msg: format!("invalid JSON: {e}"),
        })?;
        merge_value(&mut tree, &patch, "")?;
    }
    for (key, raw) in overrides {
        apply_override(&mut tree, key, raw)?;
    }
    let cfg: RunConfig = serde_json::from_value(tree).map_err(|e| Error::Config {
        path: "<config>".into(),
        msg: e.to_string(),
    })?;
    cfg.validate()?;
    Ok(cfg)
}

/// Parse a `key=value` CLI argument.
pub fn parse_set_arg(arg: &str) -> Result<(String, String)> {
    match arg.split_once('=') {
        Some((k, v)) if !k.is_empty() => Ok((k.to_string(), v.to_string())),
        _ => Err(Error::Config {
            path: arg.to_string(),
            msg: "expected key=value".into(),
        }),
    }
}
