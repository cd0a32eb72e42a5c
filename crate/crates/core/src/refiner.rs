//! Trainable student side: a strided convolutional pyramid over the
//! low-resolution image and a head that fuses it with upsampled backbone
//! tokens.
//!
//! The adapter never sees backbone activations. The head upsamples backbone
//! tokens with sub-pixel stages (1x1 conv to `4C`, then a 2x pixel shuffle),
//! resizes every pyramid level to the target grid, concatenates, fuses with a
//! 1x1 conv, runs `head_blocks` residual blocks and projects back to `C`
//! channels. With `backbone_skip` the upsampled tokens are added to that
//! projection.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Tape, Var};
use crate::backbone::{vit_forward, BackboneWeights, ViTConfig};
use crate::error::{Error, Result};
use crate::params::{BoundParams, ModelParams};
use crate::tensor::{FeatureMap, ImageTensor, Real, Tensor};

/// Strides of the pyramid levels relative to the low-resolution image.
pub const LEVEL_STRIDES: [usize; 3] = [4, 8, 16];
const PROJ_INIT_STD: f64 = 0.01;

#[derive(Clone, Debug, PartialEq)]
pub struct AdapterConfig {
    /// Channels of the stride 4, 8 and 16 levels.
    pub pyramid_channels: [usize; 3],
    pub fusion_channels: usize,
    pub head_blocks: usize,
    pub upsample_factor: usize,
    /// Add the upsampled backbone tokens to the head projection.
    pub backbone_skip: bool,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            pyramid_channels: [16, 32, 32],
            fusion_channels: 64,
            head_blocks: 3,
            upsample_factor: 4,
            backbone_skip: true,
        }
    }
}

impl AdapterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pyramid_channels.contains(&0) || self.fusion_channels == 0 {
            return Err(Error::Config("adapter channel counts must be positive".into()));
        }
        if self.head_blocks == 0 {
            return Err(Error::Config("head_blocks must be at least 1".into()));
        }
        if self.upsample_factor < 2 || !self.upsample_factor.is_power_of_two() {
            return Err(Error::Config(format!(
                "upsample_factor {} must be a power of two >= 2",
                self.upsample_factor
            )));
        }
        Ok(())
    }

    pub fn upsample_stages(&self) -> usize {
        self.upsample_factor.trailing_zeros() as usize
    }

    /// Spatial size of every pyramid level for a low-resolution image.
    pub fn level_sizes(&self, h: usize, w: usize) -> Result<Vec<(usize, usize)>> {
        if h == 0 || w == 0 || h % 16 != 0 || w % 16 != 0 {
            return Err(Error::shape(format!("adapter input {h}x{w} not divisible by 16")));
        }
        Ok(LEVEL_STRIDES.iter().map(|s| (h / s, w / s)).collect())
    }
}

/// Trainable parameters of adapter and head.
#[derive(Clone, Debug, PartialEq)]
pub struct StudentParams<T = f32> {
    params: ModelParams<T>,
}

/// `(name, shape)` of every student tensor, in storage order.
fn layout(c: usize, cfg: &AdapterConfig) -> Vec<(String, Vec<usize>)> {
    let [c1, c2, c3] = cfg.pyramid_channels;
    let f = cfg.fusion_channels;
    let mut v = Vec::new();
    let mut conv = |name: &str, cout: usize, cin: usize, k: usize| {
        v.push((format!("{name}.w"), vec![cout, cin, k, k]));
        v.push((format!("{name}.b"), vec![cout]));
    };
    conv("adapter.stem", c1, 3, 3);
    conv("adapter.level1", c1, c1, 3);
    conv("adapter.level2", c2, c1, 3);
    conv("adapter.level3", c3, c2, 3);
    for s in 0..cfg.upsample_stages() {
        conv(&format!("head.up{s}"), 4 * c, c, 1);
    }
    conv("head.fuse", f, c + c1 + c2 + c3, 1);
    for i in 0..cfg.head_blocks {
        conv(&format!("head.block{i}.conv1"), f, f, 3);
        conv(&format!("head.block{i}.conv2"), f, f, 3);
    }
    conv("head.proj", c, f, 1);
    for i in 0..cfg.head_blocks {
        v.push((format!("head.block{i}.norm.g"), vec![f]));
        v.push((format!("head.block{i}.norm.b"), vec![f]));
    }
    v
}

/// Sub-pixel weight that turns a 2x pixel shuffle into nearest upsampling.
fn replicate_weight<T: Real>(c: usize) -> Tensor<T> {
    let mut w = Tensor::zeros([4 * c, c, 1, 1]);
    for ch in 0..c {
        for sub in 0..4 {
            w.data_mut()[(ch * 4 + sub) * c + ch] = T::one();
        }
    }
    w
}

impl<T: Real> StudentParams<T> {
    /// Fan-in scaled normal weights, zero biases, unit norm gains. The final
    /// projection uses std 0.01 and the sub-pixel stages start as nearest
    /// upsampling.
    pub fn init(vit: &ViTConfig, cfg: &AdapterConfig, seed: u64) -> Result<Self> {
        vit.validate()?;
        cfg.validate()?;
        let c = vit.embed_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ModelParams::new();
        for (name, shape) in layout(c, cfg) {
            let t = if name.ends_with(".g") {
                Tensor::full(shape, T::one())
            } else if name.ends_with(".b") {
                Tensor::zeros(shape)
            } else if name.starts_with("head.up") {
                replicate_weight(c)
            } else {
                let fan_in: usize = shape[1..].iter().product();
                let std = if name == "head.proj.w" {
                    PROJ_INIT_STD
                } else {
                    1.0 / (fan_in as f64).sqrt()
                };
                let dist = Normal::new(0.0, std).expect("positive std");
                Tensor::from_fn(shape, |_| T::lit(dist.sample(&mut rng)))
            };
            params.insert(name, t, true);
        }
        Ok(Self { params })
    }

    /// Weights under which the head output equals nearest-upsampled backbone
    /// tokens whatever the pyramid holds. Adapter and first block convs keep
    /// their seeded random values.
    pub fn bypass(vit: &ViTConfig, cfg: &AdapterConfig, seed: u64) -> Result<Self> {
        let c = vit.embed_dim;
        if !cfg.backbone_skip && cfg.fusion_channels < c {
            return Err(Error::Config(format!(
                "bypass without skip needs fusion_channels >= {c}"
            )));
        }
        let mut s = Self::init(vit, cfg, seed)?;
        let f = cfg.fusion_channels;
        let cin = c + cfg.pyramid_channels.iter().sum::<usize>();
        for p in s.params.iter_mut() {
            if p.name.starts_with("head.block") && p.name.contains(".conv2.") {
                p.tensor.data_mut().fill(T::zero());
            }
        }
        let fuse = s.params.get_mut("head.fuse.w")?;
        fuse.data_mut().fill(T::zero());
        for ch in 0..c.min(f) {
            fuse.data_mut()[ch * cin + ch] = T::one();
        }
        let proj = s.params.get_mut("head.proj.w")?;
        proj.data_mut().fill(T::zero());
        if !cfg.backbone_skip {
            for ch in 0..c {
                proj.data_mut()[ch * f + ch] = T::one();
            }
        }
        Ok(s)
    }

    pub fn params(&self) -> &ModelParams<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ModelParams<T> {
        &mut self.params
    }

    pub fn into_params(self) -> ModelParams<T> {
        self.params
    }

    /// Wraps loaded tensors after checking them against the expected layout.
    pub fn from_params(params: ModelParams<T>, vit: &ViTConfig, cfg: &AdapterConfig) -> Result<Self> {
        cfg.validate()?;
        let expected = layout(vit.embed_dim, cfg);
        for (name, shape) in &expected {
            let t = params
                .get(name)
                .map_err(|_| Error::Checkpoint(format!("missing parameter {name}")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {:?}, config expects {shape:?}",
                    t.shape()
                )));
            }
        }
        if params.len() != expected.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                expected.len(),
                params.len()
            )));
        }
        Ok(Self { params })
    }

    pub fn cast<U: Real>(&self) -> StudentParams<U> {
        StudentParams {
            params: self.params.cast(),
        }
    }
}

fn conv<T: Real>(tape: &Tape<T>, p: &BoundParams, name: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
    let y = tape.conv2d(x, p.var(&format!("{name}.w"))?, stride, pad)?;
    tape.add_channel_bias(y, p.var(&format!("{name}.b"))?)
}

/// Pyramid levels at strides 4, 8 and 16, recorded on `tape`.
pub fn adapter_forward_tape<T: Real>(tape: &Tape<T>, img: Var, cfg: &AdapterConfig, p: &BoundParams) -> Result<Vec<Var>> {
    let (ch, h, w) = tape.value(img).dims3()?;
    if ch != 3 {
        return Err(Error::shape(format!("adapter input must have 3 channels, got {ch}")));
    }
    cfg.level_sizes(h, w)?;
    let stem = tape.gelu(conv(tape, p, "adapter.stem", img, 2, 1)?)?;
    let mut x = stem;
    let mut levels = Vec::with_capacity(3);
    for name in ["adapter.level1", "adapter.level2", "adapter.level3"] {
        x = tape.gelu(conv(tape, p, name, x, 2, 1)?)?;
        levels.push(x);
    }
    Ok(levels)
}

fn channel_layer_norm<T: Real>(tape: &Tape<T>, x: Var, g: Var, b: Var) -> Result<Var> {
    let (c, h, w) = tape.value(x).dims3()?;
    let t = tape.transpose(tape.reshape(x, &[c, h * w])?)?;
    let n = tape.layer_norm(t, g, b)?;
    tape.reshape(tape.transpose(n)?, &[c, h, w])
}

/// Fuses backbone tokens `(C, h, w)` and pyramid levels into a
/// `(C, f*h, f*w)` map, recorded on `tape`.
pub fn head_forward_tape<T: Real>(
    tape: &Tape<T>,
    backbone: Var,
    pyramid: &[Var],
    cfg: &AdapterConfig,
    p: &BoundParams,
) -> Result<Var> {
    if pyramid.len() != LEVEL_STRIDES.len() {
        return Err(Error::shape(format!("expected 3 pyramid levels, got {}", pyramid.len())));
    }
    let (_, h, w) = tape.value(backbone).dims3()?;
    let mut up = backbone;
    for s in 0..cfg.upsample_stages() {
        up = tape.pixel_shuffle(conv(tape, p, &format!("head.up{s}"), up, 1, 0)?, 2)?;
    }
    let (oh, ow) = (h * cfg.upsample_factor, w * cfg.upsample_factor);
    let mut parts = vec![up];
    for &l in pyramid {
        parts.push(tape.resize(l, oh, ow, true)?);
    }
    let mut x = conv(tape, p, "head.fuse", tape.concat(&parts)?, 1, 0)?;
    for i in 0..cfg.head_blocks {
        let b = format!("head.block{i}");
        let y = conv(tape, p, &format!("{b}.conv1"), x, 1, 1)?;
        let y = channel_layer_norm(tape, y, p.var(&format!("{b}.norm.g"))?, p.var(&format!("{b}.norm.b"))?)?;
        let y = conv(tape, p, &format!("{b}.conv2"), tape.gelu(y)?, 1, 1)?;
        x = tape.add(x, y)?;
    }
    let out = conv(tape, p, "head.proj", x, 1, 0)?;
    if cfg.backbone_skip {
        tape.add(out, up)
    } else {
        Ok(out)
    }
}

/// Full student map for a low-resolution image whose backbone tokens were
/// computed already (the backbone is frozen, so callers may cache them).
pub fn student_forward_tape<T: Real>(
    tape: &Tape<T>,
    img_low: Var,
    backbone: Var,
    cfg: &AdapterConfig,
    p: &BoundParams,
) -> Result<Var> {
    let pyramid = adapter_forward_tape(tape, img_low, cfg, p)?;
    head_forward_tape(tape, backbone, &pyramid, cfg, p)
}

fn fm_of<T: Real>(tape: &Tape<T>, v: Var) -> Result<FeatureMap<T>> {
    FeatureMap::new(tape.value(v).clone())
}

pub fn adapter_forward<T: Real>(img_low: &ImageTensor<T>, cfg: &AdapterConfig, params: &StudentParams<T>) -> Result<Vec<FeatureMap<T>>> {
    let tape = Tape::new();
    let p = params.params.bind_constants(&tape);
    let img = tape.constant(img_low.tensor().clone());
    adapter_forward_tape(&tape, img, cfg, &p)?
        .into_iter()
        .map(|v| fm_of(&tape, v))
        .collect()
}

pub fn head_forward<T: Real>(
    backbone_fm: &FeatureMap<T>,
    pyramid: &[FeatureMap<T>],
    cfg: &AdapterConfig,
    params: &StudentParams<T>,
) -> Result<FeatureMap<T>> {
    let tape = Tape::new();
    let p = params.params.bind_constants(&tape);
    let b = tape.constant(backbone_fm.tensor().clone());
    let levels: Vec<Var> = pyramid.iter().map(|l| tape.constant(l.tensor().clone())).collect();
    let out = head_forward_tape(&tape, b, &levels, cfg, &p)?;
    fm_of(&tape, out)
}

/// `S(x_low)`: frozen backbone on the low-resolution image, then adapter and
/// head.
pub fn student_forward<T: Real>(
    img_low: &ImageTensor<T>,
    vit_cfg: &ViTConfig,
    cfg: &AdapterConfig,
    frozen: &BackboneWeights<T>,
    params: &StudentParams<T>,
) -> Result<FeatureMap<T>> {
    let backbone = vit_forward(img_low, vit_cfg, frozen)?;
    let pyramid = adapter_forward(img_low, cfg, params)?;
    head_forward(&backbone, &pyramid, cfg, params)
}
