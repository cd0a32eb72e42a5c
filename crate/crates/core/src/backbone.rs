//! Frozen vision transformer shared by teacher and student, plus the
//! file-backed teacher that serves precomputed feature maps.
//!
//! Blocks are pre-norm (`x + attn(ln(x))`, `x + mlp(ln(x))`) and the
//! returned tokens are taken after the final layer norm. Only patch tokens
//! exist; learned position embeddings live on a fixed grid and are resampled
//! bilinearly to whatever token grid the input produces.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::conv::{im2col, ConvGeom};
use crate::error::{Error, Result};
use crate::params::ModelParams;
use crate::tensor::{
    gemm, grid_to_tokens, load_tensor_as, resize_channels, tokens_to_grid, FeatureMap, ImageTensor, Real,
    Tensor,
};

const LN_EPS: f64 = 1e-6;
const POS_STD: f64 = 0.02;
/// Per-channel pixel normalization applied before the patch embedding.
pub const PIXEL_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const PIXEL_STD: [f64; 3] = [0.229, 0.224, 0.225];
/// Query rows processed per attention chunk; bounds the score buffer.
const ATTN_CHUNK: usize = 256;

#[derive(Clone, Debug, PartialEq)]
pub struct ViTConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    /// Side of the learned position-embedding grid.
    pub pos_grid: usize,
}

impl Default for ViTConfig {
    fn default() -> Self {
        Self {
            patch_size: 8,
            embed_dim: 32,
            depth: 2,
            heads: 4,
            mlp_ratio: 4.0,
            pos_grid: 16,
        }
    }
}

impl ViTConfig {
    /// ViT-S/16 dimensions.
    pub fn small() -> Self {
        Self {
            patch_size: 16,
            embed_dim: 384,
            depth: 12,
            heads: 6,
            mlp_ratio: 4.0,
            pos_grid: 16,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.embed_dim == 0 || self.heads == 0 || self.pos_grid == 0 {
            return Err(Error::Config("ViT dimensions must be positive".into()));
        }
        if self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        if !(self.mlp_ratio > 0.0) {
            return Err(Error::Config("mlp_ratio must be positive".into()));
        }
        Ok(())
    }

    pub fn mlp_hidden(&self) -> usize {
        ((self.embed_dim as f64 * self.mlp_ratio).round() as usize).max(1)
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    /// Token grid produced for an `h x w` image.
    pub fn grid_for(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if h == 0 || w == 0 || h % self.patch_size != 0 || w % self.patch_size != 0 {
            return Err(Error::shape(format!(
                "image {h}x{w} not divisible by patch size {}",
                self.patch_size
            )));
        }
        Ok((h / self.patch_size, w / self.patch_size))
    }
}

/// Frozen backbone weights. Every entry is flagged non-trainable.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneWeights<T = f32> {
    params: ModelParams<T>,
}

impl<T: Real> BackboneWeights<T> {
    pub fn params(&self) -> &ModelParams<T> {
        &self.params
    }

    /// Mutable access for constructing special-purpose weights in tests and
    /// tools; training never goes through this.
    pub fn params_mut(&mut self) -> &mut ModelParams<T> {
        &mut self.params
    }

    pub fn digest(&self) -> String {
        self.params.digest()
    }

    pub fn cast<U: Real>(&self) -> BackboneWeights<U> {
        BackboneWeights {
            params: self.params.cast(),
        }
    }

    fn check(&self, cfg: &ViTConfig) -> Result<()> {
        for (name, shape) in expected_shapes(cfg) {
            let t = self
                .params
                .get(&name)
                .map_err(|_| Error::shape(format!("backbone weights lack {name} required by config")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::shape(format!(
                    "backbone weight {name} has shape {:?}, config expects {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }
}

fn expected_shapes(cfg: &ViTConfig) -> Vec<(String, Vec<usize>)> {
    let (c, p, hid, g) = (cfg.embed_dim, cfg.patch_size, cfg.mlp_hidden(), cfg.pos_grid);
    let mut v = vec![
        ("backbone.patch.w".to_string(), vec![c, 3, p, p]),
        ("backbone.patch.b".to_string(), vec![c]),
        ("backbone.pos".to_string(), vec![c, g, g]),
    ];
    for i in 0..cfg.depth {
        let b = format!("backbone.block{i}");
        v.extend([
            (format!("{b}.norm1.g"), vec![c]),
            (format!("{b}.norm1.b"), vec![c]),
            (format!("{b}.attn.qkv.w"), vec![c, 3 * c]),
            (format!("{b}.attn.qkv.b"), vec![3 * c]),
            (format!("{b}.attn.proj.w"), vec![c, c]),
            (format!("{b}.attn.proj.b"), vec![c]),
            (format!("{b}.norm2.g"), vec![c]),
            (format!("{b}.norm2.b"), vec![c]),
            (format!("{b}.mlp.fc1.w"), vec![c, hid]),
            (format!("{b}.mlp.fc1.b"), vec![hid]),
            (format!("{b}.mlp.fc2.w"), vec![hid, c]),
            (format!("{b}.mlp.fc2.b"), vec![c]),
        ]);
    }
    v.push(("backbone.norm.g".to_string(), vec![c]));
    v.push(("backbone.norm.b".to_string(), vec![c]));
    v
}

/// Number of lowest DCT frequencies per axis spanned by a patch filter.
const PATCH_FREQS: usize = 2;

/// Patch filters `[C, 3, p, p]` drawn as random combinations of the lowest
/// orthonormal DCT-II basis functions; each filter has unit expected norm.
fn smooth_patch_filters<T: Real>(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<T> {
    let (c, p) = (shape[0], shape[2]);
    let m = PATCH_FREQS.min(p);
    let basis = |f: usize, u: usize| {
        let scale = if f == 0 { (1.0 / p as f64).sqrt() } else { (2.0 / p as f64).sqrt() };
        scale * (std::f64::consts::PI * f as f64 * (u as f64 + 0.5) / p as f64).cos()
    };
    let dist = Normal::new(0.0, 1.0 / ((3 * m * m) as f64).sqrt()).expect("positive std");
    let mut w = vec![T::zero(); c * 3 * p * p];
    for plane in w.chunks_mut(p * p) {
        for a in 0..m {
            for b in 0..m {
                let coef: f64 = dist.sample(rng);
                for y in 0..p {
                    for x in 0..p {
                        plane[y * p + x] += T::lit(coef * basis(a, y) * basis(b, x));
                    }
                }
            }
        }
    }
    Tensor::new(shape.to_vec(), w).expect("shape matches")
}

/// Seeded random frozen backbone. Patch filters are smooth, other linear
/// weights are fan-in scaled normals, norms start at identity, biases at zero.
pub fn init_backbone<T: Real>(cfg: &ViTConfig, seed: u64) -> Result<BackboneWeights<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ModelParams::new();
    for (name, shape) in expected_shapes(cfg) {
        let n: usize = shape.iter().product();
        let tensor = if name.ends_with(".g") {
            Tensor::full(shape, T::one())
        } else if name.ends_with(".b") {
            Tensor::zeros(shape)
        } else if name == "backbone.patch.w" {
            smooth_patch_filters(&shape, &mut rng)
        } else {
            let std = if name == "backbone.pos" {
                POS_STD
            } else {
                let fan_in = if shape.len() == 4 { n / shape[0] } else { shape[0] };
                1.0 / (fan_in as f64).sqrt()
            };
            let dist = Normal::new(0.0, std).expect("positive std");
            Tensor::from_fn(shape, |_| T::lit(dist.sample(&mut rng)))
        };
        params.insert(name, tensor, false);
    }
    Ok(BackboneWeights { params })
}

fn layer_norm_rows<T: Real>(x: &[T], d: usize, g: &[T], b: &[T]) -> Vec<T> {
    let dn = T::lit(d as f64);
    let mut out = vec![T::zero(); x.len()];
    for (row, dst) in x.chunks(d).zip(out.chunks_mut(d)) {
        let mean = row.iter().copied().sum::<T>() / dn;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
        let inv = T::one() / (var + T::lit(LN_EPS)).sqrt();
        for j in 0..d {
            dst[j] = (row[j] - mean) * inv * g[j] + b[j];
        }
    }
    out
}

fn gelu<T: Real>(x: T) -> T {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    T::lit(0.5) * x * (T::one() + (c * (x + T::lit(0.044_715) * x * x * x)).tanh())
}

/// `(rows, out) = x (rows, inp) * w (inp, out) + b`.
fn linear<T: Real>(x: &[T], rows: usize, inp: usize, w: &Tensor<T>, b: &Tensor<T>) -> Vec<T> {
    let out_dim = b.len();
    let mut y = vec![T::zero(); rows * out_dim];
    for r in 0..rows {
        y[r * out_dim..(r + 1) * out_dim].copy_from_slice(b.data());
    }
    gemm(rows, inp, out_dim, x, (inp, 1), w.data(), (out_dim, 1), &mut y, (out_dim, 1), true);
    y
}

fn attention<T: Real>(qkv: &[T], n: usize, c: usize, heads: usize) -> Vec<T> {
    let dh = c / heads;
    let scale = T::one() / T::lit(dh as f64).sqrt();
    let mut out = vec![T::zero(); n * c];
    let mut scores = vec![T::zero(); ATTN_CHUNK.min(n) * n];
    for h in 0..heads {
        let (qo, ko, vo) = (h * dh, c + h * dh, 2 * c + h * dh);
        for r0 in (0..n).step_by(ATTN_CHUNK) {
            let rows = ATTN_CHUNK.min(n - r0);
            let s = &mut scores[..rows * n];
            gemm(rows, dh, n, &qkv[r0 * 3 * c + qo..], (3 * c, 1), &qkv[ko..], (1, 3 * c), s, (n, 1), false);
            for row in s.chunks_mut(n) {
                let m = row.iter().copied().fold(T::neg_infinity(), T::max) * scale;
                let mut sum = T::zero();
                for v in row.iter_mut() {
                    *v = (*v * scale - m).exp();
                    sum += *v;
                }
                row.iter_mut().for_each(|v| *v /= sum);
            }
            gemm(rows, n, dh, s, (n, 1), &qkv[vo..], (3 * c, 1), &mut out[r0 * c + h * dh..], (c, 1), false);
        }
    }
    out
}

/// Dense patch features `(C, h/p, w/p)` of the final-norm tokens.
pub fn vit_forward<T: Real>(img: &ImageTensor<T>, cfg: &ViTConfig, w: &BackboneWeights<T>) -> Result<FeatureMap<T>> {
    cfg.validate()?;
    w.check(cfg)?;
    let (gh, gw) = cfg.grid_for(img.height(), img.width())?;
    let (c, p) = (cfg.embed_dim, cfg.patch_size);
    let n = gh * gw;
    let prm = w.params();

    let geom = ConvGeom {
        channels: 3,
        height: img.height(),
        width: img.width(),
        kernel: p,
        stride: p,
        padding: 0,
    };
    let plane = img.height() * img.width();
    let pixels: Vec<T> = img
        .tensor()
        .data()
        .chunks(plane)
        .enumerate()
        .flat_map(|(ch, px)| {
            let (m, s) = (T::lit(PIXEL_MEAN[ch]), T::lit(1.0 / PIXEL_STD[ch]));
            px.iter().map(move |&v| (v - m) * s)
        })
        .collect();
    let cols = im2col(&pixels, &geom);
    let k = 3 * p * p;
    let pos = resize_channels(prm.get("backbone.pos")?, gh, gw, false)?;
    let pos_tokens = grid_to_tokens(&FeatureMap::new(pos)?);
    let bias = prm.get("backbone.patch.b")?.data();
    let mut x = pos_tokens.into_data();
    for row in x.chunks_mut(c) {
        row.iter_mut().zip(bias).for_each(|(v, &b)| *v += b);
    }
    gemm(n, k, c, &cols, (1, n), prm.get("backbone.patch.w")?.data(), (1, k), &mut x, (c, 1), true);

    let hid = cfg.mlp_hidden();
    for i in 0..cfg.depth {
        let b = |s: &str| format!("backbone.block{i}.{s}");
        let h = layer_norm_rows(&x, c, prm.get(&b("norm1.g"))?.data(), prm.get(&b("norm1.b"))?.data());
        let qkv = linear(&h, n, c, prm.get(&b("attn.qkv.w"))?, prm.get(&b("attn.qkv.b"))?);
        let a = attention(&qkv, n, c, cfg.heads);
        let o = linear(&a, n, c, prm.get(&b("attn.proj.w"))?, prm.get(&b("attn.proj.b"))?);
        x.iter_mut().zip(&o).for_each(|(x, &o)| *x += o);

        let h = layer_norm_rows(&x, c, prm.get(&b("norm2.g"))?.data(), prm.get(&b("norm2.b"))?.data());
        let mut f = linear(&h, n, c, prm.get(&b("mlp.fc1.w"))?, prm.get(&b("mlp.fc1.b"))?);
        f.iter_mut().for_each(|v| *v = gelu(*v));
        let o = linear(&f, n, hid, prm.get(&b("mlp.fc2.w"))?, prm.get(&b("mlp.fc2.b"))?);
        x.iter_mut().zip(&o).for_each(|(x, &o)| *x += o);
    }
    let x = layer_norm_rows(&x, c, prm.get("backbone.norm.g")?.data(), prm.get("backbone.norm.b")?.data());
    tokens_to_grid(&Tensor::new([n, c], x)?, gh, gw)
}

/// Where distillation targets come from.
#[derive(Clone, Debug, PartialEq)]
pub enum TeacherSource {
    /// Run the shared backbone on the high-resolution image.
    Live,
    /// Read `<dir>/<sample_id>.brxt`.
    File(PathBuf),
}

impl TeacherSource {
    pub fn file_path(dir: &Path, sample_id: &str) -> PathBuf {
        dir.join(format!("{sample_id}.brxt"))
    }

    /// Target feature map for one sample. `expected` is `(C, H_t, W_t)`.
    pub fn teacher_features<T: Real>(
        &self,
        sample_id: &str,
        img: &ImageTensor<T>,
        cfg: &ViTConfig,
        w: &BackboneWeights<T>,
        expected: (usize, usize, usize),
    ) -> Result<FeatureMap<T>> {
        let fm = match self {
            TeacherSource::Live => vit_forward(img, cfg, w)?,
            TeacherSource::File(dir) => {
                FeatureMap::new(load_tensor_as::<T>(Self::file_path(dir, sample_id))?)?
            }
        };
        let got = (fm.channels(), fm.height(), fm.width());
        if got != expected {
            return Err(Error::shape(format!(
                "teacher map for {sample_id} has shape {got:?}, config expects {expected:?}"
            )));
        }
        Ok(fm)
    }
}
