//! Distillation losses: L1, Sobel edge loss on PCA-projected tokens, and a
//! log radial-spectrum loss over high frequencies.
//!
//! Every loss has a tape form taking the student map as a [`Var`] and the
//! teacher map and projection as constants, and a plain form that evaluates
//! the same graph without gradients. All reductions are means.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{grid_to_tokens, FeatureMap, Real, Tensor};

/// Principal components of a token set.
#[derive(Clone, Debug, PartialEq)]
pub struct PcaProjection<T = f32> {
    /// Token mean `(C)`.
    pub mean: Tensor<T>,
    /// Orthonormal columns `(C, K)`, by decreasing variance.
    pub basis: Tensor<T>,
    /// Variance along every right singular vector (`s^2 / N`), descending,
    /// `C` entries.
    pub variances: Vec<f64>,
    /// Fewer than `K` non-degenerate directions; trailing columns are an
    /// arbitrary orthonormal completion.
    pub rank_deficient: bool,
}

impl<T: Real> PcaProjection<T> {
    pub fn k(&self) -> usize {
        self.basis.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.basis.shape()[0]
    }
}

const JACOBI_TOL: f64 = 1e-15;
const JACOBI_MAX_SWEEPS: usize = 80;

/// Right singular vectors and singular values of `a (n, c)` by one-sided
/// Jacobi rotations. Returns `(v, s)` with `v` row-major `(c, c)` and
/// columns of `v` complete even when `a` is rank deficient.
fn jacobi_svd(mut a: Vec<f64>, n: usize, c: usize) -> (Vec<f64>, Vec<f64>) {
    let mut v = vec![0.0; c * c];
    for i in 0..c {
        v[i * c + i] = 1.0;
    }
    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..c {
            for q in p + 1..c {
                let (mut alpha, mut beta, mut gamma) = (0.0, 0.0, 0.0);
                for r in 0..n {
                    let (x, y) = (a[r * c + p], a[r * c + q]);
                    alpha += x * x;
                    beta += y * y;
                    gamma += x * y;
                }
                if gamma == 0.0 || gamma.abs() <= JACOBI_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let cs = 1.0 / (1.0 + t * t).sqrt();
                let sn = cs * t;
                for r in 0..n {
                    let (x, y) = (a[r * c + p], a[r * c + q]);
                    a[r * c + p] = cs * x - sn * y;
                    a[r * c + q] = sn * x + cs * y;
                }
                for r in 0..c {
                    let (x, y) = (v[r * c + p], v[r * c + q]);
                    v[r * c + p] = cs * x - sn * y;
                    v[r * c + q] = sn * x + cs * y;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let s = (0..c)
        .map(|j| (0..n).map(|r| a[r * c + j] * a[r * c + j]).sum::<f64>().sqrt())
        .collect();
    (v, s)
}

/// Triangular factor `R (c, c)` of a Householder QR of `a (n, c)`, `n >= c`.
/// `a` and `R` share right singular vectors and singular values.
fn householder_r(a: &[f64], n: usize, c: usize) -> Vec<f64> {
    // column-major working copy
    let mut cols: Vec<Vec<f64>> = (0..c).map(|j| (0..n).map(|r| a[r * c + j]).collect()).collect();
    for j in 0..c {
        let norm = cols[j][j..].iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        let alpha = if cols[j][j] > 0.0 { -norm } else { norm };
        let mut v = cols[j][j..].to_vec();
        v[0] -= alpha;
        let vn = v.iter().map(|x| x * x).sum::<f64>();
        if vn == 0.0 {
            continue;
        }
        for col in cols.iter_mut().skip(j) {
            let dot: f64 = v.iter().zip(&col[j..]).map(|(a, b)| a * b).sum();
            let f = 2.0 * dot / vn;
            col[j..].iter_mut().zip(&v).for_each(|(x, &vi)| *x -= f * vi);
        }
    }
    let mut r = vec![0.0; c * c];
    for i in 0..c {
        for j in i..c {
            r[i * c + j] = cols[j][i];
        }
    }
    r
}

/// Pools the tokens of several maps into one `(N, C)` matrix.
pub fn pool_tokens<T: Real>(maps: &[&FeatureMap<T>]) -> Result<Tensor<T>> {
    let c = maps
        .first()
        .ok_or_else(|| Error::invalid("no maps to pool"))?
        .channels();
    let mut data = Vec::new();
    for m in maps {
        if m.channels() != c {
            return Err(Error::shape(format!("pooling maps with {} and {c} channels", m.channels())));
        }
        data.extend_from_slice(grid_to_tokens(m).data());
    }
    let n = data.len() / c;
    Tensor::new([n, c], data)
}

/// Top-`k` principal directions of `tokens (N, C)` after centering by the
/// token mean. Each direction's largest-magnitude entry is positive.
pub fn fit_pca<T: Real>(tokens: &Tensor<T>, k: usize) -> Result<PcaProjection<T>> {
    let (n, c) = tokens.dims2()?;
    if k == 0 || k > n.min(c) {
        return Err(Error::invalid(format!("cannot keep {k} components of {n} tokens with {c} channels")));
    }
    tokens.ensure_finite("PCA tokens")?;
    let x: Vec<f64> = tokens.data().iter().map(|v| v.as_f64()).collect();
    let mut mean = vec![0.0; c];
    for row in x.chunks(c) {
        mean.iter_mut().zip(row).for_each(|(m, &v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered: Vec<f64> = x
        .chunks(c)
        .flat_map(|row| row.iter().zip(&mean).map(|(&v, &m)| v - m).collect::<Vec<_>>())
        .collect();
    let (v, s) = if n > c {
        jacobi_svd(householder_r(&centered, n, c), c, c)
    } else {
        jacobi_svd(centered, n, c)
    };

    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&i, &j| s[j].total_cmp(&s[i]).then(i.cmp(&j)));
    let smax = s[order[0]];
    let tol = smax * 1e-10 * (n.max(c) as f64);
    let rank = s.iter().filter(|&&x| x > tol).count();
    let rank_deficient = rank < k;
    if rank_deficient {
        log::warn!("PCA on {n} tokens has rank {rank} < K = {k}; completing basis arbitrarily");
    }

    let mut basis = vec![T::zero(); c * k];
    for (col, &j) in order.iter().take(k).enumerate() {
        let vec: Vec<f64> = (0..c).map(|r| v[r * c + j]).collect();
        let lead = vec
            .iter()
            .enumerate()
            .fold(0, |best, (i, x)| if x.abs() > vec[best].abs() { i } else { best });
        let sign = if vec[lead] < 0.0 { -1.0 } else { 1.0 };
        for r in 0..c {
            basis[r * k + col] = T::lit(sign * vec[r]);
        }
    }
    Ok(PcaProjection {
        mean: Tensor::new([c], mean.iter().map(|&m| T::lit(m)).collect())?,
        basis: Tensor::new([c, k], basis)?,
        variances: order.iter().map(|&j| s[j] * s[j] / n as f64).collect(),
        rank_deficient,
    })
}

/// `V_K^T (x - mu)` for every token of a `(C, H, W)` value on `tape`.
pub fn project_tape<T: Real>(tape: &Tape<T>, fm: Var, p: &PcaProjection<T>) -> Result<Var> {
    let (c, h, w) = tape.value(fm).dims3()?;
    if c != p.channels() {
        return Err(Error::shape(format!("projection expects {} channels, map has {c}", p.channels())));
    }
    let k = p.k();
    let vt = p.basis.transpose()?;
    let vt_mu = vt.matmul(&p.mean.clone().reshape([c, 1])?)?;
    let offset = Tensor::from_fn([k, h * w], |i| vt_mu.data()[i / (h * w)]);
    let vt = tape.constant(vt);
    let flat = tape.reshape(fm, &[c, h * w])?;
    let proj = tape.sub(tape.matmul(vt, flat)?, tape.constant(offset))?;
    tape.reshape(proj, &[k, h, w])
}

pub fn project<T: Real>(fm: &FeatureMap<T>, p: &PcaProjection<T>) -> Result<FeatureMap<T>> {
    let tape = Tape::new();
    let x = tape.constant(fm.tensor().clone());
    let out = project_tape(&tape, x, p)?;
    let value = tape.value(out).clone();
    FeatureMap::new(value)
}

/// Channel-wise 3x3 Sobel responses with replicate padding, as
/// `(grad_x, grad_y)` of the input's shape. Uses correlation with
/// `Gx = [[-1,0,1],[-2,0,2],[-1,0,1]]` and `Gy = Gx^T`.
pub fn sobel_tape<T: Real>(tape: &Tape<T>, fm: Var) -> Result<(Var, Var)> {
    let (_, h, w) = tape.value(fm).dims3()?;
    if h < 3 || w < 3 {
        return Err(Error::shape(format!("Sobel needs a grid of at least 3x3, got {h}x{w}")));
    }
    let p = tape.pad_replicate(fm, 1)?;
    let smooth = |x: Var, axis: usize, len: usize| -> Result<Var> {
        let a = tape.slice(x, axis, 0, len)?;
        let b = tape.scale(tape.slice(x, axis, 1, len)?, T::lit(2.0))?;
        let c = tape.slice(x, axis, 2, len)?;
        tape.add(tape.add(a, b)?, c)
    };
    let diff = |x: Var, axis: usize, len: usize| -> Result<Var> {
        tape.sub(tape.slice(x, axis, 2, len)?, tape.slice(x, axis, 0, len)?)
    };
    let gx = smooth(diff(p, 2, w)?, 1, h)?;
    let gy = smooth(diff(p, 1, h)?, 2, w)?;
    Ok((gx, gy))
}

pub fn sobel<T: Real>(fm: &FeatureMap<T>) -> Result<(FeatureMap<T>, FeatureMap<T>)> {
    let tape = Tape::new();
    let x = tape.constant(fm.tensor().clone());
    let (gx, gy) = sobel_tape(&tape, x)?;
    let gx = tape.value(gx).clone();
    let gy = tape.value(gy).clone();
    Ok((FeatureMap::new(gx)?, FeatureMap::new(gy)?))
}

fn same_shape<T: Real>(tape: &Tape<T>, student: Var, teacher: &FeatureMap<T>) -> Result<()> {
    let s = tape.shape(student);
    if s != teacher.tensor().shape() {
        return Err(Error::shape(format!(
            "student {s:?} and teacher {:?} differ",
            teacher.tensor().shape()
        )));
    }
    Ok(())
}

pub fn l1_loss_tape<T: Real>(tape: &Tape<T>, student: Var, teacher: &FeatureMap<T>) -> Result<Var> {
    same_shape(tape, student, teacher)?;
    let t = tape.constant(teacher.tensor().clone());
    tape.mean(tape.abs(tape.sub(t, student)?)?)
}

pub fn edge_loss_tape<T: Real>(tape: &Tape<T>, student: Var, teacher: &FeatureMap<T>, p: &PcaProjection<T>) -> Result<Var> {
    same_shape(tape, student, teacher)?;
    let pt = project(teacher, p)?;
    let (tx, ty) = sobel(&pt)?;
    let ps = project_tape(tape, student, p)?;
    let (sx, sy) = sobel_tape(tape, ps)?;
    let ex = tape.mean(tape.abs(tape.sub(tape.constant(tx.into_tensor()), sx)?)?)?;
    let ey = tape.mean(tape.abs(tape.sub(tape.constant(ty.into_tensor()), sy)?)?)?;
    tape.add(ex, ey)
}

/// How channel averaging and radial binning are composed. Both are linear,
/// so the two orders agree up to rounding.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum AveragingOrder {
    #[default]
    ChannelsFirst,
    BinsFirst,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpectralConfig {
    /// First radius in the high-frequency set; `None` means `floor(r_max/2)`
    /// (at least 1).
    pub r0: Option<usize>,
    pub eps_log: f64,
    pub order: AveragingOrder,
}

impl Default for SpectralConfig {
    fn default() -> Self {
        Self {
            r0: None,
            eps_log: 1e-8,
            order: AveragingOrder::ChannelsFirst,
        }
    }
}

pub fn r_max(h: usize, w: usize) -> usize {
    h.min(w) / 2
}

impl SpectralConfig {
    pub fn resolve_r0(&self, h: usize, w: usize) -> Result<usize> {
        let rm = r_max(h, w);
        let r0 = self.r0.unwrap_or((rm / 2).max(1));
        if r0 == 0 || r0 > rm {
            return Err(Error::invalid(format!(
                "spectral cutoff r0={r0} outside [1, {rm}] for a {h}x{w} grid"
            )));
        }
        Ok(r0)
    }
}

/// Signed frequency of DFT index `i` on an axis of length `n`.
fn centered(i: usize, n: usize) -> f64 {
    if i <= n / 2 {
        i as f64
    } else {
        i as f64 - n as f64
    }
}

/// Radial bin of DFT index `(u, v)` on an `h x w` grid. Frequencies are
/// normalized per axis and rescaled by `min(h, w)`, so square grids use
/// `round(sqrt(u^2 + v^2))`. `None` beyond `r_max`.
pub fn radial_bin(u: usize, v: usize, h: usize, w: usize) -> Option<usize> {
    let m = h.min(w) as f64;
    let fu = centered(u, h) / h as f64;
    let fv = centered(v, w) / w as f64;
    let r = (m * (fu * fu + fv * fv).sqrt()).round() as usize;
    (r <= r_max(h, w)).then_some(r)
}

/// Unitary DFT matrix of size `n`, real and imaginary parts, scaled by
/// `1/sqrt(n)`.
fn dft_matrix<T: Real>(n: usize) -> (Tensor<T>, Tensor<T>) {
    let s = 1.0 / (n as f64).sqrt();
    let ang = |i: usize| -2.0 * std::f64::consts::PI * ((i / n) * (i % n) % n) as f64 / n as f64;
    (
        Tensor::from_fn([n, n], |i| T::lit(s * ang(i).cos())),
        Tensor::from_fn([n, n], |i| T::lit(s * ang(i).sin())),
    )
}

/// Averaging matrix `(w*h, r_max+1)` over the layout `[v, u]` produced by
/// the transposed DFT.
fn bin_matrix<T: Real>(h: usize, w: usize) -> Tensor<T> {
    let nb = r_max(h, w) + 1;
    let mut counts = vec![0usize; nb];
    for u in 0..h {
        for v in 0..w {
            if let Some(r) = radial_bin(u, v, h, w) {
                counts[r] += 1;
            }
        }
    }
    let mut b = Tensor::zeros([w * h, nb]);
    for v in 0..w {
        for u in 0..h {
            if let Some(r) = radial_bin(u, v, h, w) {
                b.data_mut()[(v * h + u) * nb + r] = T::one() / T::lit(counts[r] as f64);
            }
        }
    }
    b
}

/// Keeps the amplitude square root differentiable at exact zeros.
const AMP_FLOOR: f64 = 1e-30;

/// Channel-averaged radial amplitude spectrum `(r_max+1)` of a `(C, H, W)`
/// value on `tape`.
pub fn radial_spectrum_tape<T: Real>(tape: &Tape<T>, fm: Var, cfg: &SpectralConfig) -> Result<Var> {
    let (c, h, w) = tape.value(fm).dims3()?;
    let (wr, wi) = dft_matrix::<T>(w);
    let (hr, hi) = dft_matrix::<T>(h);
    let (wr, wi, hr, hi) = (tape.constant(wr), tape.constant(wi), tape.constant(hr), tape.constant(hi));
    let rows = tape.reshape(fm, &[c * h, w])?;
    // transform along x, then bring the y axis last and transform along it
    let turn = |z: Var| -> Result<Var> {
        let z = tape.transpose(tape.reshape(z, &[c, h, w])?)?;
        tape.reshape(z, &[c * w, h])
    };
    let r1 = turn(tape.matmul(rows, wr)?)?;
    let i1 = turn(tape.matmul(rows, wi)?)?;
    let re = tape.sub(tape.matmul(r1, hr)?, tape.matmul(i1, hi)?)?;
    let im = tape.add(tape.matmul(r1, hi)?, tape.matmul(i1, hr)?)?;
    let power = tape.add(tape.square(re)?, tape.square(im)?)?;
    let amp = tape.sqrt(tape.add_scalar(power, T::lit(AMP_FLOOR))?)?;
    let amp = tape.reshape(amp, &[c, w * h])?;
    let bins = tape.constant(bin_matrix::<T>(h, w));
    let avg = tape.constant(Tensor::full([1, c], T::one() / T::lit(c as f64)));
    let spec = match cfg.order {
        AveragingOrder::ChannelsFirst => tape.matmul(tape.matmul(avg, amp)?, bins)?,
        AveragingOrder::BinsFirst => tape.matmul(avg, tape.matmul(amp, bins)?)?,
    };
    tape.reshape(spec, &[r_max(h, w) + 1])
}

pub fn radial_spectrum<T: Real>(fm: &FeatureMap<T>, cfg: &SpectralConfig) -> Result<Tensor<T>> {
    let tape = Tape::new();
    let x = tape.constant(fm.tensor().clone());
    let s = radial_spectrum_tape(&tape, x, cfg)?;
    let out = tape.value(s).clone();
    Ok(out)
}

pub fn spectral_loss_tape<T: Real>(tape: &Tape<T>, student: Var, teacher: &FeatureMap<T>, cfg: &SpectralConfig) -> Result<Var> {
    same_shape(tape, student, teacher)?;
    let (h, w) = teacher.grid();
    let r0 = cfg.resolve_r0(h, w)?;
    let n = r_max(h, w) + 1 - r0;
    let eps = T::lit(cfg.eps_log);
    let pt = radial_spectrum(teacher, cfg)?;
    let log_t = Tensor::new([n], pt.data()[r0..].iter().map(|&v| (v + eps).ln()).collect())?;
    let ps = radial_spectrum_tape(tape, student, cfg)?;
    let log_s = tape.log(tape.add_scalar(tape.slice(ps, 0, r0, n)?, eps)?)?;
    tape.mean(tape.square(tape.sub(tape.constant(log_t), log_s)?)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossWeights {
    pub edge: f64,
    pub spectral: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            edge: 1.0,
            spectral: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.edge >= 0.0 && self.spectral >= 0.0) {
            return Err(Error::Config(format!(
                "loss weights must be non-negative, got edge={} spectral={}",
                self.edge, self.spectral
            )));
        }
        Ok(())
    }
}

/// Values of the individual terms of one evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms {
    pub l1: f64,
    pub edge: f64,
    pub spectral: f64,
    pub total: f64,
}

/// Handles to the recorded terms of [`total_loss_tape`].
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub l1: Var,
    pub edge: Var,
    pub spectral: Var,
    pub total: Var,
}

impl LossVars {
    pub fn read<T: Real>(&self, tape: &Tape<T>) -> LossTerms {
        let get = |v: Var| tape.value(v).item().as_f64();
        LossTerms {
            l1: get(self.l1),
            edge: get(self.edge),
            spectral: get(self.spectral),
            total: get(self.total),
        }
    }
}

/// `L1 + edge_w * L_edge + spectral_w * L_spectral`.
pub fn total_loss_tape<T: Real>(
    tape: &Tape<T>,
    student: Var,
    teacher: &FeatureMap<T>,
    p: &PcaProjection<T>,
    weights: &LossWeights,
    cfg: &SpectralConfig,
) -> Result<LossVars> {
    weights.validate()?;
    let l1 = l1_loss_tape(tape, student, teacher)?;
    let edge = edge_loss_tape(tape, student, teacher, p)?;
    let spectral = spectral_loss_tape(tape, student, teacher, cfg)?;
    let total = tape.add(l1, tape.scale(edge, T::lit(weights.edge))?)?;
    let total = tape.add(total, tape.scale(spectral, T::lit(weights.spectral))?)?;
    Ok(LossVars {
        l1,
        edge,
        spectral,
        total,
    })
}

fn eval_plain<T: Real>(student: &FeatureMap<T>, f: impl FnOnce(&Tape<T>, Var) -> Result<Var>) -> Result<T> {
    let tape = Tape::new();
    let s = tape.constant(student.tensor().clone());
    let out = f(&tape, s)?;
    let v = tape.value(out).item();
    Ok(v)
}

pub fn l1_loss<T: Real>(student: &FeatureMap<T>, teacher: &FeatureMap<T>) -> Result<T> {
    eval_plain(student, |t, s| l1_loss_tape(t, s, teacher))
}

pub fn edge_loss<T: Real>(student: &FeatureMap<T>, teacher: &FeatureMap<T>, p: &PcaProjection<T>) -> Result<T> {
    eval_plain(student, |t, s| edge_loss_tape(t, s, teacher, p))
}

pub fn spectral_loss<T: Real>(student: &FeatureMap<T>, teacher: &FeatureMap<T>, cfg: &SpectralConfig) -> Result<T> {
    eval_plain(student, |t, s| spectral_loss_tape(t, s, teacher, cfg))
}

pub fn total_loss<T: Real>(
    student: &FeatureMap<T>,
    teacher: &FeatureMap<T>,
    p: &PcaProjection<T>,
    weights: &LossWeights,
    cfg: &SpectralConfig,
) -> Result<LossTerms> {
    let tape = Tape::new();
    let s = tape.constant(student.tensor().clone());
    Ok(total_loss_tape(&tape, s, teacher, p, weights, cfg)?.read(&tape))
}
