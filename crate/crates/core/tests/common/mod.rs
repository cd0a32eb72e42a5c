//! Independent oracles shared by the acceptance target.
#![allow(dead_code)]

use brixel::{FeatureMap, Tensor};
use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_map(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> FeatureMap<f64> {
    FeatureMap::new(Tensor::from_fn([c, h, w], |_| rng.random_range(-1.0..1.0))).unwrap()
}

/// Central difference of `f` at `x` along one coordinate.
pub fn central_difference(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

/// Relative error with an absolute floor for near-zero derivatives.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Unitary 2-D DFT amplitude of each channel by the defining double sum,
/// then averaged over channels and over integer radius bins of the centered
/// frequency, looping over every frequency.
pub fn brute_radial_spectrum(fm: &FeatureMap<f64>) -> Vec<f64> {
    let (c, h, w) = fm.tensor().dims3().unwrap();
    let tau = std::f64::consts::TAU;
    let r_max = h.min(w) / 2;
    let mut sums = vec![0.0; r_max + 1];
    let mut counts = vec![0usize; r_max + 1];
    for u in 0..h {
        for v in 0..w {
            let cu = if u <= h / 2 { u as f64 } else { u as f64 - h as f64 };
            let cv = if v <= w / 2 { v as f64 } else { v as f64 - w as f64 };
            let r = (h.min(w) as f64 * ((cu / h as f64).powi(2) + (cv / w as f64).powi(2)).sqrt()).round() as usize;
            if r > r_max {
                continue;
            }
            let mut amp = 0.0;
            for ch in 0..c {
                let (mut re, mut im) = (0.0, 0.0);
                for y in 0..h {
                    for x in 0..w {
                        let phase = -tau * (u as f64 * y as f64 / h as f64 + v as f64 * x as f64 / w as f64);
                        let val = fm.at(ch, y, x);
                        re += val * phase.cos();
                        im += val * phase.sin();
                    }
                }
                amp += (re * re + im * im).sqrt() / ((h * w) as f64).sqrt();
            }
            sums[r] += amp / c as f64;
            counts[r] += 1;
        }
    }
    sums.iter().zip(&counts).map(|(s, &n)| s / n as f64).collect()
}

/// Eigen-decomposition of the 1/N token covariance, descending.
pub fn covariance_eigen(tokens: &[Vec<f64>]) -> (Vec<f64>, DMatrix<f64>) {
    let n = tokens.len();
    let c = tokens[0].len();
    let mean: Vec<f64> = (0..c).map(|j| tokens.iter().map(|t| t[j]).sum::<f64>() / n as f64).collect();
    let mut cov = DMatrix::<f64>::zeros(c, c);
    for t in tokens {
        for i in 0..c {
            for j in 0..c {
                cov[(i, j)] += (t[i] - mean[i]) * (t[j] - mean[j]) / n as f64;
            }
        }
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = DMatrix::from_fn(c, c, |r, k| eig.eigenvectors[(r, order[k])]);
    (values, vectors)
}

/// Largest principal angle between the column spans of `a` and `b`.
pub fn max_principal_angle(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let s = (a.transpose() * b).svd(false, false).singular_values;
    s.iter().map(|v| v.clamp(-1.0, 1.0).acos()).fold(0.0, f64::max)
}
