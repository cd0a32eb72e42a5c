//! Distillation driver: Adam with linear warmup, batch assembly, per-sample
//! tapes, checkpoints and the metrics log.
//!
//! The backbone is frozen and deterministic, so teacher maps, student
//! backbone maps and low-resolution inputs are computed once per sample and
//! reused every step. Per-sample gradients are computed in parallel and
//! summed in batch order, so results do not depend on the thread count.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::{Tape, Var};
use crate::backbone::{init_backbone, vit_forward, BackboneWeights};
use crate::config::DistillConfig;
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::losses::{fit_pca, pool_tokens, total_loss_tape, LossTerms, LossVars, PcaProjection};
use crate::params::{BoundParams, ModelParams};
use crate::refiner::{adapter_forward, head_forward, student_forward_tape, StudentParams};
use crate::tensor::{load_tensor_as, resize_bilinear, save_tensor, FeatureMap, ImageTensor, Real, Tensor};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First and second moment estimates per trainable parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T = f32> {
    pub t: u64,
    pub m: HashMap<String, Tensor<T>>,
    pub v: HashMap<String, Tensor<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ModelParams<T>) -> Self {
        let zeros = || {
            params
                .iter()
                .filter(|p| p.trainable)
                .map(|p| (p.name.clone(), Tensor::zeros(p.tensor.shape().to_vec())))
                .collect()
        };
        Self {
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// One bias-corrected Adam update of every trainable parameter. Missing
/// gradients count as zero. Nothing is modified if any gradient is
/// non-finite or names a frozen or unknown parameter.
pub fn adam_step<T: Real>(
    params: &mut ModelParams<T>,
    grads: &HashMap<String, Tensor<T>>,
    state: &mut AdamState<T>,
    lr: f64,
) -> Result<()> {
    for (name, g) in grads {
        let p = params
            .iter()
            .find(|p| &p.name == name)
            .ok_or_else(|| Error::invalid(format!("gradient for unknown parameter {name}")))?;
        if !p.trainable {
            return Err(Error::invalid(format!("gradient for frozen parameter {name}")));
        }
        if g.shape() != p.tensor.shape() {
            return Err(Error::shape(format!("gradient {:?} for {name} {:?}", g.shape(), p.tensor.shape())));
        }
        g.ensure_finite(&format!("gradient of {name}"))?;
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (T::lit(BETA1), T::lit(BETA2));
    let c1 = T::lit(1.0 - BETA1.powi(t));
    let c2 = T::lit(1.0 - BETA2.powi(t));
    let (lr, eps) = (T::lit(lr), T::lit(ADAM_EPS));
    for p in params.iter_mut().filter(|p| p.trainable) {
        let m = state
            .m
            .entry(p.name.clone())
            .or_insert_with(|| Tensor::zeros(p.tensor.shape().to_vec()));
        let v = state
            .v
            .entry(p.name.clone())
            .or_insert_with(|| Tensor::zeros(p.tensor.shape().to_vec()));
        let g = grads.get(&p.name);
        for i in 0..p.tensor.len() {
            let gi = g.map_or(T::zero(), |g| g.data()[i]);
            let mi = b1 * m.data()[i] + (T::one() - b1) * gi;
            let vi = b2 * v.data()[i] + (T::one() - b2) * gi * gi;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            p.tensor.data_mut()[i] -= lr * (mi / c1) / ((vi / c2).sqrt() + eps);
        }
    }
    Ok(())
}

/// Iterations per epoch: dataset size over batch size, at least one.
pub fn epoch_iters(dataset: usize, batch: usize) -> usize {
    (dataset / batch.max(1)).max(1)
}

/// Linear ramp from 0 at iteration 0 to `lr` after `warmup_epochs` epochs,
/// then constant.
pub fn warmup_lr(iter: usize, lr: f64, epoch_iters: usize, warmup_epochs: f64) -> f64 {
    let warm = warmup_epochs * epoch_iters as f64;
    if (iter as f64) >= warm {
        lr
    } else {
        lr * iter as f64 / warm
    }
}

/// Dataset indices of the batch at iteration `iter`: consecutive slices of
/// a stream of per-epoch permutations derived from `seed`.
pub fn batch_indices(seed: u64, iter: usize, n: usize, batch: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(batch);
    let mut epoch = usize::MAX;
    let mut perm: Vec<usize> = Vec::new();
    for pos in iter * batch..(iter + 1) * batch {
        if pos / n != epoch {
            epoch = pos / n;
            perm = (0..n).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            perm.shuffle(&mut rng);
        }
        out.push(perm[pos % n]);
    }
    out
}

/// Frozen-backbone products of one training image.
#[derive(Clone, Debug)]
pub struct CachedSample<T = f32> {
    pub id: String,
    pub low: ImageTensor<T>,
    pub backbone: FeatureMap<T>,
    pub teacher: FeatureMap<T>,
}

impl<T: Real> CachedSample<T> {
    pub fn build(
        sample_id: &str,
        high: &ImageTensor<T>,
        cfg: &DistillConfig,
        backbone: &BackboneWeights<T>,
    ) -> Result<Self> {
        let tr = cfg.teacher_resolution();
        if high.height() != tr || high.width() != tr {
            return Err(Error::shape(format!(
                "sample {sample_id} is {}x{}, teacher resolution is {tr}",
                high.height(),
                high.width()
            )));
        }
        let teacher = cfg
            .teacher
            .teacher_features(sample_id, high, &cfg.vit, backbone, cfg.teacher_shape())?;
        let s = cfg.student_resolution;
        let low = resize_bilinear(high, s, s, true)?;
        let bb = vit_forward(&low, &cfg.vit, backbone)?;
        Ok(Self {
            id: sample_id.to_string(),
            low,
            backbone: bb,
            teacher,
        })
    }
}

/// Records the student forward pass and all loss terms for one sample.
pub fn sample_loss_tape<T: Real>(
    tape: &Tape<T>,
    bound: &BoundParams,
    sample: &CachedSample<T>,
    pca: &PcaProjection<T>,
    cfg: &DistillConfig,
) -> Result<(Var, LossVars)> {
    let img = tape.constant(sample.low.tensor().clone());
    let bb = tape.constant(sample.backbone.tensor().clone());
    let out = student_forward_tape(tape, img, bb, &cfg.adapter, bound)?;
    let loss = total_loss_tape(tape, out, &sample.teacher, pca, &cfg.weights, &cfg.spectral)?;
    Ok((out, loss))
}

/// PCA over the pooled teacher tokens of a batch.
pub fn batch_pca<T: Real>(batch: &[&CachedSample<T>], k: usize) -> Result<PcaProjection<T>> {
    let maps: Vec<&FeatureMap<T>> = batch.iter().map(|s| &s.teacher).collect();
    fit_pca(&pool_tokens(&maps)?, k)
}

/// One line of the metrics log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepMetrics {
    pub iter: usize,
    pub lr: f64,
    pub loss: LossTerms,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

impl StepMetrics {
    pub fn to_tsv(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.iter, self.lr, self.loss.l1, self.loss.edge, self.loss.spectral, self.loss.total, self.grad_norm
        )
    }

    pub fn parse_tsv(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split('\t').collect();
        let bad = || Error::invalid(format!("malformed metrics line {line:?}"));
        if f.len() != 7 {
            return Err(bad());
        }
        let x = |i: usize| f[i].parse::<f64>().map_err(|_| bad());
        Ok(Self {
            iter: f[0].parse().map_err(|_| bad())?,
            lr: x(1)?,
            loss: LossTerms {
                l1: x(2)?,
                edge: x(3)?,
                spectral: x(4)?,
                total: x(5)?,
            },
            grad_norm: x(6)?,
        })
    }
}

pub struct Trainer {
    cfg: DistillConfig,
    backbone: BackboneWeights<f32>,
    student: StudentParams<f32>,
    adam: AdamState<f32>,
    iter: usize,
    samples: Vec<CachedSample<f32>>,
    foreign_grads: usize,
}

impl Trainer {
    /// Fresh student and optimizer over `samples` at teacher resolution.
    pub fn new(cfg: DistillConfig, samples: &[Sample]) -> Result<Self> {
        cfg.validate()?;
        let backbone = init_backbone(&cfg.vit, cfg.backbone_seed)?;
        let student = StudentParams::init(&cfg.vit, &cfg.adapter, cfg.seed)?;
        let cached = samples
            .par_iter()
            .map(|s| CachedSample::build(&s.id, &s.image, &cfg, &backbone))
            .collect::<Result<Vec<_>>>()?;
        if cached.is_empty() {
            return Err(Error::invalid("no training samples"));
        }
        let adam = AdamState::new(student.params());
        Ok(Self {
            cfg,
            backbone,
            student,
            adam,
            iter: 0,
            samples: cached,
            foreign_grads: 0,
        })
    }

    /// Restores student, optimizer and iteration counter from a checkpoint.
    pub fn resume(cfg: DistillConfig, samples: &[Sample], dir: &Path) -> Result<Self> {
        let mut t = Self::new(cfg, samples)?;
        let ck = load_checkpoint(dir, &t.cfg)?;
        t.student = ck.student;
        t.adam = ck.adam;
        t.iter = ck.iter;
        Ok(t)
    }

    pub fn config(&self) -> &DistillConfig {
        &self.cfg
    }

    pub fn iter(&self) -> usize {
        self.iter
    }

    pub fn backbone(&self) -> &BackboneWeights<f32> {
        &self.backbone
    }

    pub fn student(&self) -> &StudentParams<f32> {
        &self.student
    }

    pub fn adam(&self) -> &AdamState<f32> {
        &self.adam
    }

    pub fn samples(&self) -> &[CachedSample<f32>] {
        &self.samples
    }

    /// Gradients ever produced for tensors that are not student parameters.
    pub fn foreign_gradients(&self) -> usize {
        self.foreign_grads
    }

    pub fn lr_at(&self, iter: usize) -> f64 {
        let e = epoch_iters(self.samples.len(), self.cfg.batch_size);
        warmup_lr(iter, self.cfg.lr, e, self.cfg.warmup_epochs)
    }

    /// Student map of cached sample `i` under the current parameters.
    pub fn student_map(&self, i: usize) -> Result<FeatureMap<f32>> {
        let s = &self.samples[i];
        let pyramid = adapter_forward(&s.low, &self.cfg.adapter, &self.student)?;
        head_forward(&s.backbone, &pyramid, &self.cfg.adapter, &self.student)
    }

    pub fn step(&mut self) -> Result<StepMetrics> {
        let n = self.samples.len();
        let b = self.cfg.batch_size;
        let batch: Vec<&CachedSample<f32>> = batch_indices(self.cfg.seed, self.iter, n, b)
            .into_iter()
            .map(|i| &self.samples[i])
            .collect();
        let pca = batch_pca(&batch, self.cfg.pca_k)?;
        let names: Vec<String> = self.student.params().names().map(str::to_string).collect();
        let inv_b = 1.0 / b as f32;
        let student = &self.student;
        let cfg = &self.cfg;
        let per_sample = batch
            .par_iter()
            .map(|s| -> Result<(Vec<Option<Tensor<f32>>>, LossTerms, usize)> {
                let tape = Tape::new();
                let bound = student.params().bind(&tape);
                let (_, loss) = sample_loss_tape(&tape, &bound, s, &pca, cfg)?;
                let terms = loss.read(&tape);
                if !terms.total.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "loss for sample {} (l1 {}, edge {}, spectral {})",
                        s.id, terms.l1, terms.edge, terms.spectral
                    )));
                }
                let root = tape.scale(loss.total, inv_b)?;
                let mut g = tape.backward(root)?;
                let total = g.len();
                let grads: Vec<Option<Tensor<f32>>> =
                    names.iter().map(|nm| bound.var(nm).ok().and_then(|v| g.take(v))).collect();
                let matched = grads.iter().filter(|g| g.is_some()).count();
                Ok((grads, terms, total - matched))
            })
            .collect::<Result<Vec<_>>>()?;

        let mut sum: Vec<Option<Tensor<f32>>> = vec![None; names.len()];
        let mut terms = LossTerms::default();
        for (grads, t, foreign) in per_sample {
            self.foreign_grads += foreign;
            for (acc, g) in sum.iter_mut().zip(grads) {
                match (acc.as_mut(), g) {
                    (Some(a), Some(g)) => a.data_mut().iter_mut().zip(g.data()).for_each(|(a, &g)| *a += g),
                    (None, Some(g)) => *acc = Some(g),
                    _ => {}
                }
            }
            terms.l1 += t.l1 / b as f64;
            terms.edge += t.edge / b as f64;
            terms.spectral += t.spectral / b as f64;
            terms.total += t.total / b as f64;
        }
        // parameter order, so the norm is summed identically every run
        let mut ordered: Vec<(String, Tensor<f32>)> = names
            .into_iter()
            .zip(sum)
            .filter_map(|(n, g)| g.map(|g| (n, g)))
            .collect();
        for (name, g) in &ordered {
            g.ensure_finite(&format!("gradient of {name} at iteration {}", self.iter))?;
        }
        let grad_norm = ordered
            .iter()
            .flat_map(|(_, g)| g.data().iter().map(|&v| (v as f64) * (v as f64)))
            .sum::<f64>()
            .sqrt();
        if self.cfg.grad_clip > 0.0 && grad_norm > self.cfg.grad_clip {
            let s = (self.cfg.grad_clip / grad_norm) as f32;
            ordered.iter_mut().for_each(|(_, g)| g.data_mut().iter_mut().for_each(|v| *v *= s));
        }
        let grads: HashMap<String, Tensor<f32>> = ordered.into_iter().collect();
        let lr = self.lr_at(self.iter);
        adam_step(self.student.params_mut(), &grads, &mut self.adam, lr)?;
        let metrics = StepMetrics {
            iter: self.iter,
            lr,
            loss: terms,
            grad_norm,
        };
        self.iter += 1;
        Ok(metrics)
    }

    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        save_checkpoint(dir, &self.cfg, &self.student, &self.adam, self.iter)
    }
}

/// Restored training state.
pub struct Checkpoint {
    pub student: StudentParams<f32>,
    pub adam: AdamState<f32>,
    pub iter: usize,
}

const MANIFEST: &str = "manifest.txt";
const STATE: &str = "state.txt";

fn mkdir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write_text(p: &Path, text: &str) -> Result<()> {
    fs::write(p, text).map_err(|e| Error::io(p, e))
}

/// Writes `manifest.txt`, one `.brxt` per parameter, Adam moments under
/// `adam_m/` and `adam_v/`, `state.txt` and `config.resolved`.
pub fn save_checkpoint(
    dir: &Path,
    cfg: &DistillConfig,
    student: &StudentParams<f32>,
    adam: &AdamState<f32>,
    iter: usize,
) -> Result<()> {
    for d in [dir.to_path_buf(), dir.join("adam_m"), dir.join("adam_v")] {
        mkdir(&d)?;
    }
    let mut manifest = String::new();
    for p in student.params().iter() {
        let shape: Vec<String> = p.tensor.shape().iter().map(|d| d.to_string()).collect();
        manifest += &format!("{}\t{}\t{}\n", p.name, shape.join(","), p.tensor.dtype());
        let file = format!("{}.brxt", p.name);
        save_tensor(&p.tensor, dir.join(&file))?;
        let missing = || Error::Checkpoint(format!("optimizer state lacks {}", p.name));
        save_tensor(adam.m.get(&p.name).ok_or_else(missing)?, dir.join("adam_m").join(&file))?;
        save_tensor(adam.v.get(&p.name).ok_or_else(missing)?, dir.join("adam_v").join(&file))?;
    }
    write_text(&dir.join(MANIFEST), &manifest)?;
    write_text(&dir.join(STATE), &format!("iter\t{iter}\nadam_t\t{}\n", adam.t))?;
    write_text(&dir.join("config.resolved"), &cfg.to_text())
}

fn read_text(p: &Path) -> Result<String> {
    fs::read_to_string(p).map_err(|e| Error::io(p, e))
}

pub fn load_checkpoint(dir: &Path, cfg: &DistillConfig) -> Result<Checkpoint> {
    let manifest = read_text(&dir.join(MANIFEST))?;
    let mut params = ModelParams::new();
    let mut adam = AdamState {
        t: 0,
        m: HashMap::new(),
        v: HashMap::new(),
    };
    for line in manifest.lines().filter(|l| !l.is_empty()) {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 3 {
            return Err(Error::Checkpoint(format!("bad manifest line {line:?}")));
        }
        let name = f[0];
        let shape: Vec<usize> = f[1]
            .split(',')
            .map(|d| d.parse().map_err(|_| Error::Checkpoint(format!("bad shape for {name}"))))
            .collect::<Result<_>>()?;
        let file = format!("{name}.brxt");
        let load = |p: PathBuf| -> Result<Tensor<f32>> {
            let t = load_tensor_as::<f32>(&p)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "{} holds shape {:?}, manifest says {shape:?} for {name}",
                    p.display(),
                    t.shape()
                )));
            }
            Ok(t)
        };
        params.insert(name, load(dir.join(&file))?, true);
        adam.m.insert(name.to_string(), load(dir.join("adam_m").join(&file))?);
        adam.v.insert(name.to_string(), load(dir.join("adam_v").join(&file))?);
    }
    let student = StudentParams::from_params(params, &cfg.vit, &cfg.adapter)?;
    let state = read_text(&dir.join(STATE))?;
    let field = |key: &str| -> Result<u64> {
        state
            .lines()
            .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix('\t')))
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| Error::Checkpoint(format!("state.txt lacks {key}")))
    };
    adam.t = field("adam_t")?;
    Ok(Checkpoint {
        student,
        adam,
        iter: field("iter")? as usize,
    })
}

/// Checkpoint directory name for a given completed-iteration count.
pub fn checkpoint_name(iter: usize) -> String {
    format!("iter_{iter:07}")
}

/// Most advanced checkpoint under `root`, if any.
pub fn latest_checkpoint(root: &Path) -> Result<Option<PathBuf>> {
    if !root.exists() {
        return Ok(None);
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(STATE).exists())
        .collect();
    dirs.sort();
    Ok(dirs.pop())
}

/// Fixed names inside a run directory.
pub const METRICS_FILE: &str = "metrics.tsv";
pub const RESOLVED_CONFIG: &str = "config.resolved";
pub const CHECKPOINT_DIR: &str = "checkpoints";

/// Trains to `cfg.total_iters`, appending to `<out>/metrics.tsv` and writing
/// `<out>/config.resolved` and checkpoints. With `resume`, continues from
/// the latest checkpoint and drops log lines past it.
pub fn run_distill(cfg: &DistillConfig, samples: &[Sample], out: &Path, resume: bool) -> Result<Trainer> {
    mkdir(out)?;
    let ck_root = out.join(CHECKPOINT_DIR);
    let metrics_path = out.join(METRICS_FILE);
    let mut trainer = match (resume, latest_checkpoint(&ck_root)?) {
        (true, Some(dir)) => {
            let t = Trainer::resume(cfg.clone(), samples, &dir)?;
            let kept: String = match fs::read_to_string(&metrics_path) {
                Ok(text) => text
                    .lines()
                    .filter(|l| StepMetrics::parse_tsv(l).is_ok_and(|m| m.iter < t.iter()))
                    .map(|l| format!("{l}\n"))
                    .collect(),
                Err(_) => String::new(),
            };
            write_text(&metrics_path, &kept)?;
            t
        }
        _ => {
            write_text(&metrics_path, "")?;
            Trainer::new(cfg.clone(), samples)?
        }
    };
    write_text(&out.join(RESOLVED_CONFIG), &cfg.to_text())?;
    let mut log = fs::OpenOptions::new()
        .append(true)
        .open(&metrics_path)
        .map_err(|e| Error::io(&metrics_path, e))?;
    while trainer.iter() < cfg.total_iters {
        let m = trainer.step()?;
        writeln!(log, "{}", m.to_tsv()).map_err(|e| Error::io(&metrics_path, e))?;
        log::info!("iter {} total {:.5} lr {:.2e}", m.iter, m.loss.total, m.lr);
        let done = trainer.iter();
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done < cfg.total_iters {
            trainer.save_checkpoint(&ck_root.join(checkpoint_name(done)))?;
        }
    }
    log.flush().map_err(|e| Error::io(&metrics_path, e))?;
    trainer.save_checkpoint(&ck_root.join(checkpoint_name(trainer.iter())))?;
    Ok(trainer)
}

/// Parses a metrics log.
pub fn read_metrics(path: &Path) -> Result<Vec<StepMetrics>> {
    read_text(path)?.lines().map(StepMetrics::parse_tsv).collect()
}

#[cfg(test)]
mod tests;
