//! Run configuration and its flat `key = value` text form.
//!
//! Every field of every sub-config has exactly one key. Parsing starts from
//! the defaults, so a file only lists what it changes; serialization always
//! writes every key, which is what lands in `config.resolved`.

use std::path::{Path, PathBuf};

use crate::backbone::{TeacherSource, ViTConfig};
use crate::error::{Error, Result};
use crate::losses::{AveragingOrder, LossWeights, SpectralConfig};
use crate::refiner::AdapterConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct DistillConfig {
    pub vit: ViTConfig,
    pub adapter: AdapterConfig,
    pub spectral: SpectralConfig,
    pub weights: LossWeights,
    /// Side of the low-resolution student input, in pixels.
    pub student_resolution: usize,
    pub downsample_factor: usize,
    /// Principal components kept for the edge loss.
    pub pca_k: usize,
    pub lr: f64,
    pub warmup_epochs: f64,
    pub total_iters: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub backbone_seed: u64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    /// Checkpoint period in iterations; 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
    pub teacher: TeacherSource,
    /// Image count when the data source is `synthetic`.
    pub synthetic_count: usize,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            vit: ViTConfig::default(),
            adapter: AdapterConfig::default(),
            spectral: SpectralConfig::default(),
            weights: LossWeights::default(),
            student_resolution: 64,
            downsample_factor: 4,
            pca_k: 8,
            lr: 1e-3,
            warmup_epochs: 1.0,
            total_iters: 2000,
            batch_size: 8,
            seed: 0,
            backbone_seed: 0,
            grad_clip: 1.0,
            checkpoint_every: 0,
            teacher: TeacherSource::Live,
            synthetic_count: 8,
        }
    }
}

impl DistillConfig {
    pub fn teacher_resolution(&self) -> usize {
        self.student_resolution * self.downsample_factor
    }

    /// `(C, H_t, W_t)` of every teacher map.
    pub fn teacher_shape(&self) -> (usize, usize, usize) {
        let g = self.teacher_resolution() / self.vit.patch_size;
        (self.vit.embed_dim, g, g)
    }

    pub fn validate(&self) -> Result<()> {
        self.vit.validate()?;
        self.adapter.validate()?;
        self.weights.validate()?;
        let cfg = |m: String| Err(Error::Config(m));
        if self.downsample_factor != self.adapter.upsample_factor {
            return cfg(format!(
                "downsample_factor {} must equal upsample_factor {}",
                self.downsample_factor, self.adapter.upsample_factor
            ));
        }
        let s = self.student_resolution;
        if s == 0 || s % 16 != 0 || s % self.vit.patch_size != 0 {
            return cfg(format!(
                "student_resolution {s} must be a positive multiple of 16 and of patch_size {}",
                self.vit.patch_size
            ));
        }
        if self.batch_size == 0 || self.synthetic_count == 0 {
            return cfg("batch_size and synthetic_count must be positive".into());
        }
        if !(self.lr > 0.0) || !(self.warmup_epochs >= 0.0) || !(self.grad_clip >= 0.0) {
            return cfg("lr must be positive; warmup_epochs and grad_clip non-negative".into());
        }
        if !(self.spectral.eps_log > 0.0) {
            return cfg("eps_log must be positive".into());
        }
        let (c, g, _) = self.teacher_shape();
        if self.pca_k == 0 || self.pca_k > c {
            return cfg(format!("pca_k {} must lie in [1, {c}]", self.pca_k));
        }
        if g < 3 {
            return cfg(format!("teacher grid {g} is below the 3x3 Sobel minimum"));
        }
        self.spectral.resolve_r0(g, g).map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    /// Parses `key = value` lines over the defaults. Blank lines and `#`
    /// comments are ignored; unknown keys and repeated keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", no + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("key `{key}` given twice")));
            }
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<N: std::str::FromStr>(key: &str, v: &str) -> Result<N> {
            v.parse()
                .map_err(|_| Error::Config(format!("value {v:?} for key `{key}` is not a valid number")))
        }
        fn flag(key: &str, v: &str) -> Result<bool> {
            match v {
                "true" => Ok(true),
                "false" => Ok(false),
                _ => Err(Error::Config(format!("value {v:?} for key `{key}` must be true or false"))),
            }
        }
        match key {
            "student_resolution" => self.student_resolution = num(key, value)?,
            "downsample_factor" => self.downsample_factor = num(key, value)?,
            "lambda_edge" => self.weights.edge = num(key, value)?,
            "lambda_spectral" => self.weights.spectral = num(key, value)?,
            "pca_k" => self.pca_k = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "warmup_epochs" => self.warmup_epochs = num(key, value)?,
            "total_iters" => self.total_iters = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "backbone_seed" => self.backbone_seed = num(key, value)?,
            "grad_clip" => self.grad_clip = num(key, value)?,
            "checkpoint_every" => self.checkpoint_every = num(key, value)?,
            "synthetic_count" => self.synthetic_count = num(key, value)?,
            "teacher" => {
                self.teacher = match value {
                    "live" => TeacherSource::Live,
                    v => match v.strip_prefix("file:") {
                        Some(dir) if !dir.is_empty() => TeacherSource::File(PathBuf::from(dir)),
                        _ => return Err(Error::Config(format!("teacher must be `live` or `file:<dir>`, got {v:?}"))),
                    },
                }
            }
            "patch_size" => self.vit.patch_size = num(key, value)?,
            "embed_dim" => self.vit.embed_dim = num(key, value)?,
            "depth" => self.vit.depth = num(key, value)?,
            "heads" => self.vit.heads = num(key, value)?,
            "mlp_ratio" => self.vit.mlp_ratio = num(key, value)?,
            "pos_grid" => self.vit.pos_grid = num(key, value)?,
            "pyramid_channels" => {
                let parts: Vec<&str> = value.split(',').map(str::trim).collect();
                if parts.len() != 3 {
                    return Err(Error::Config(format!("pyramid_channels needs three values, got {value:?}")));
                }
                for (slot, p) in self.adapter.pyramid_channels.iter_mut().zip(parts) {
                    *slot = num(key, p)?;
                }
            }
            "fusion_channels" => self.adapter.fusion_channels = num(key, value)?,
            "head_blocks" => self.adapter.head_blocks = num(key, value)?,
            "upsample_factor" => self.adapter.upsample_factor = num(key, value)?,
            "backbone_skip" => self.adapter.backbone_skip = flag(key, value)?,
            "spectral_r0" => {
                self.spectral.r0 = match value {
                    "auto" => None,
                    v => Some(num(key, v)?),
                }
            }
            "eps_log" => self.spectral.eps_log = num(key, value)?,
            "spectral_order" => {
                self.spectral.order = match value {
                    "channels_first" => AveragingOrder::ChannelsFirst,
                    "bins_first" => AveragingOrder::BinsFirst,
                    v => {
                        return Err(Error::Config(format!(
                            "spectral_order must be channels_first or bins_first, got {v:?}"
                        )))
                    }
                }
            }
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Every key with its current value, one per line.
    pub fn to_text(&self) -> String {
        let teacher = match &self.teacher {
            TeacherSource::Live => "live".to_string(),
            TeacherSource::File(d) => format!("file:{}", d.display()),
        };
        let [p0, p1, p2] = self.adapter.pyramid_channels;
        let entries: Vec<(&str, String)> = vec![
            ("student_resolution", self.student_resolution.to_string()),
            ("downsample_factor", self.downsample_factor.to_string()),
            ("lambda_edge", self.weights.edge.to_string()),
            ("lambda_spectral", self.weights.spectral.to_string()),
            ("pca_k", self.pca_k.to_string()),
            ("lr", self.lr.to_string()),
            ("warmup_epochs", self.warmup_epochs.to_string()),
            ("total_iters", self.total_iters.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("seed", self.seed.to_string()),
            ("backbone_seed", self.backbone_seed.to_string()),
            ("grad_clip", self.grad_clip.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("synthetic_count", self.synthetic_count.to_string()),
            ("teacher", teacher),
            ("patch_size", self.vit.patch_size.to_string()),
            ("embed_dim", self.vit.embed_dim.to_string()),
            ("depth", self.vit.depth.to_string()),
            ("heads", self.vit.heads.to_string()),
            ("mlp_ratio", self.vit.mlp_ratio.to_string()),
            ("pos_grid", self.vit.pos_grid.to_string()),
            ("pyramid_channels", format!("{p0},{p1},{p2}")),
            ("fusion_channels", self.adapter.fusion_channels.to_string()),
            ("head_blocks", self.adapter.head_blocks.to_string()),
            ("upsample_factor", self.adapter.upsample_factor.to_string()),
            ("backbone_skip", self.adapter.backbone_skip.to_string()),
            (
                "spectral_r0",
                self.spectral.r0.map_or("auto".to_string(), |r| r.to_string()),
            ),
            ("eps_log", self.spectral.eps_log.to_string()),
            (
                "spectral_order",
                match self.spectral.order {
                    AveragingOrder::ChannelsFirst => "channels_first",
                    AveragingOrder::BinsFirst => "bins_first",
                }
                .to_string(),
            ),
        ];
        entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}
