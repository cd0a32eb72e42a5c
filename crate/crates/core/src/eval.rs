//! Evaluation: feature fidelity, PCA-to-RGB panels, the analytic cost model
//! and a per-token linear segmentation probe.

use std::collections::HashMap;

use crate::autodiff::Tape;
use crate::backbone::ViTConfig;
use crate::data::Rgb8;
use crate::error::{Error, Result};
use crate::losses::{fit_pca, radial_spectrum, PcaProjection, SpectralConfig};
use crate::params::ModelParams;
use crate::refiner::{AdapterConfig, LEVEL_STRIDES};
use crate::tensor::{grid_to_tokens, FeatureMap, Real, Tensor};
use crate::trainer::{adam_step, AdamState};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FidelityReport {
    pub l1: f64,
    /// Mean over tokens of the cosine between student and teacher vectors.
    pub cosine: f64,
    /// Mean absolute log-amplitude difference over the high-frequency bins.
    pub spectral_gap: f64,
}

/// Cosine of two vectors; two zero vectors agree, a zero and a non-zero
/// vector score 0.
fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let ab: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let (na, nb) = (a.iter().map(|x| x * x).sum::<f64>().sqrt(), b.iter().map(|x| x * x).sum::<f64>().sqrt());
    match (na == 0.0, nb == 0.0) {
        (true, true) => 1.0,
        (true, false) | (false, true) => 0.0,
        _ => (ab / (na * nb)).clamp(-1.0, 1.0),
    }
}

pub fn mean_cosine<T: Real>(a: &FeatureMap<T>, b: &FeatureMap<T>) -> Result<f64> {
    if a.tensor().shape() != b.tensor().shape() {
        return Err(Error::shape(format!("{:?} vs {:?}", a.tensor().shape(), b.tensor().shape())));
    }
    let (ta, tb) = (grid_to_tokens(a), grid_to_tokens(b));
    let c = a.channels();
    let f = |t: &[T]| t.iter().map(|v| v.as_f64()).collect::<Vec<_>>();
    let n = ta.len() / c;
    let total: f64 = ta
        .data()
        .chunks(c)
        .zip(tb.data().chunks(c))
        .map(|(x, y)| cosine(&f(x), &f(y)))
        .sum();
    Ok(total / n as f64)
}

pub fn fidelity<T: Real>(student: &FeatureMap<T>, teacher: &FeatureMap<T>, cfg: &SpectralConfig) -> Result<FidelityReport> {
    let cos = mean_cosine(student, teacher)?;
    let n = student.tensor().len() as f64;
    let l1 = student
        .tensor()
        .data()
        .iter()
        .zip(teacher.tensor().data())
        .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
        .sum::<f64>()
        / n;
    let (h, w) = teacher.grid();
    let r0 = cfg.resolve_r0(h, w)?;
    let (ps, pt) = (radial_spectrum(student, cfg)?, radial_spectrum(teacher, cfg)?);
    let gaps: Vec<f64> = ps.data()[r0..]
        .iter()
        .zip(&pt.data()[r0..])
        .map(|(s, t)| ((t.as_f64() + cfg.eps_log).ln() - (s.as_f64() + cfg.eps_log).ln()).abs())
        .collect();
    let spectral_gap = gaps.iter().sum::<f64>() / gaps.len() as f64;
    for v in [l1, cos, spectral_gap] {
        if !v.is_finite() {
            return Err(Error::NonFinite("fidelity metric".into()));
        }
    }
    Ok(FidelityReport {
        l1,
        cosine: cos,
        spectral_gap,
    })
}

/// Three-component basis of `reference` and the per-component value range
/// of the reference projection.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbBasis<T = f32> {
    pub pca: PcaProjection<T>,
    pub min: [f64; 3],
    pub max: [f64; 3],
}

pub fn rgb_basis<T: Real>(reference: &FeatureMap<T>) -> Result<RgbBasis<T>> {
    if reference.channels() < 3 {
        return Err(Error::invalid(format!(
            "PCA-RGB needs at least 3 channels, got {}",
            reference.channels()
        )));
    }
    let pca = fit_pca(&grid_to_tokens(reference), 3)?;
    let proj = crate::losses::project(reference, &pca)?;
    let n = reference.height() * reference.width();
    let mut min = [f64::INFINITY; 3];
    let mut max = [f64::NEG_INFINITY; 3];
    for c in 0..3 {
        for v in &proj.tensor().data()[c * n..(c + 1) * n] {
            min[c] = min[c].min(v.as_f64());
            max[c] = max[c].max(v.as_f64());
        }
    }
    Ok(RgbBasis { pca, min, max })
}

pub fn to_rgb<T: Real>(map: &FeatureMap<T>, basis: &RgbBasis<T>) -> Result<Rgb8> {
    let proj = crate::losses::project(map, &basis.pca)?;
    let (h, w) = map.grid();
    let n = h * w;
    let mut data = Vec::with_capacity(n * 3);
    for i in 0..n {
        for c in 0..3 {
            let span = basis.max[c] - basis.min[c];
            let v = proj.tensor().data()[c * n + i].as_f64();
            let u = if span > 0.0 { (v - basis.min[c]) / span } else { 0.0 };
            data.push((u.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Rgb8::new(w, h, data)
}

/// Projects every map onto the first three principal directions of
/// `reference` and scales each component by the reference's range.
pub fn pca_rgb<T: Real>(maps: &[&FeatureMap<T>], reference: &FeatureMap<T>) -> Result<Vec<Rgb8>> {
    let basis = rgb_basis(reference)?;
    maps.iter().map(|m| to_rgb(m, &basis)).collect()
}

/// Analytic cost of producing one dense map of `output_grid x output_grid`
/// tokens. One multiply-accumulate counts as two FLOPs; only matrix
/// products and convolutions are counted.
#[derive(Clone, Debug, PartialEq)]
pub struct CostReport {
    pub output_grid: usize,
    pub teacher_tokens: usize,
    pub student_tokens: usize,
    pub flops_teacher: f64,
    /// Quadratic attention term (scores and values) of the teacher path.
    pub flops_teacher_attention_quadratic: f64,
    pub flops_student_backbone: f64,
    pub flops_adapter: f64,
    pub flops_head: f64,
    pub flops_student_total: f64,
    /// Largest single-layer activation footprint, in elements.
    pub peak_activation_teacher: f64,
    pub peak_activation_student: f64,
    pub params_backbone: usize,
    pub params_student: usize,
}

impl CostReport {
    pub fn ratio(&self) -> f64 {
        self.flops_teacher / self.flops_student_total
    }
}

/// `(total, quadratic attention part)` FLOPs of a ViT forward on `n` tokens.
pub fn vit_flops(cfg: &ViTConfig, n: usize) -> (f64, f64) {
    let (n, c, hid) = (n as f64, cfg.embed_dim as f64, cfg.mlp_hidden() as f64);
    let p2 = (cfg.patch_size * cfg.patch_size) as f64;
    let embed = 2.0 * n * 3.0 * p2 * c;
    let projections = 2.0 * n * c * 3.0 * c + 2.0 * n * c * c;
    let quadratic = 2.0 * n * n * c + 2.0 * n * n * c;
    let mlp = 2.0 * n * c * hid * 2.0;
    let d = cfg.depth as f64;
    (embed + d * (projections + quadratic + mlp), d * quadratic)
}

pub fn conv_flops(k: usize, cin: usize, cout: usize, h: usize, w: usize) -> f64 {
    2.0 * (k * k * cin * cout * h * w) as f64
}

fn vit_params(cfg: &ViTConfig) -> usize {
    let (c, p, hid, g) = (cfg.embed_dim, cfg.patch_size, cfg.mlp_hidden(), cfg.pos_grid);
    let block = 4 * c + (c * 3 * c + 3 * c) + (c * c + c) + (c * hid + hid) + (hid * c + c);
    c * 3 * p * p + c + c * g * g + cfg.depth * block + 2 * c
}

fn student_params(vit: &ViTConfig, a: &AdapterConfig) -> usize {
    let c = vit.embed_dim;
    let [c1, c2, c3] = a.pyramid_channels;
    let f = a.fusion_channels;
    let conv = |k: usize, cin: usize, cout: usize| k * k * cin * cout + cout;
    conv(3, 3, c1)
        + conv(3, c1, c1)
        + conv(3, c1, c2)
        + conv(3, c2, c3)
        + a.upsample_stages() * conv(1, c, 4 * c)
        + conv(1, c + c1 + c2 + c3, f)
        + a.head_blocks * (2 * conv(3, f, f) + 2 * f)
        + conv(1, f, c)
}

pub fn flop_model(vit: &ViTConfig, adapter: &AdapterConfig, output_grid: usize) -> Result<CostReport> {
    vit.validate()?;
    adapter.validate()?;
    let u = adapter.upsample_factor;
    if output_grid == 0 || output_grid % u != 0 {
        return Err(Error::invalid(format!("output grid {output_grid} not divisible by {u}")));
    }
    let g = output_grid;
    let gs = g / u;
    let (nt, ns) = (g * g, gs * gs);
    let low = gs * vit.patch_size;
    let (flops_teacher, quad) = vit_flops(vit, nt);
    let (flops_student_backbone, _) = vit_flops(vit, ns);

    let [c1, c2, c3] = adapter.pyramid_channels;
    let c = vit.embed_dim;
    let f = adapter.fusion_channels;
    let side = |s: usize| low / s;
    let flops_adapter = conv_flops(3, 3, c1, side(2), side(2))
        + conv_flops(3, c1, c1, side(LEVEL_STRIDES[0]), side(LEVEL_STRIDES[0]))
        + conv_flops(3, c1, c2, side(LEVEL_STRIDES[1]), side(LEVEL_STRIDES[1]))
        + conv_flops(3, c2, c3, side(LEVEL_STRIDES[2]), side(LEVEL_STRIDES[2]));
    let mut flops_head = 0.0;
    let mut grid = gs;
    for _ in 0..adapter.upsample_stages() {
        flops_head += conv_flops(1, c, 4 * c, grid, grid);
        grid *= 2;
    }
    flops_head += conv_flops(1, c + c1 + c2 + c3, f, g, g);
    flops_head += adapter.head_blocks as f64 * 2.0 * conv_flops(3, f, f, g, g);
    flops_head += conv_flops(1, f, c, g, g);

    let vit_peak = |n: usize| {
        let n = n as f64;
        (n * n).max(n * (3 * c).max(vit.mlp_hidden()) as f64)
    };
    let head_peak = ((g * g) * (c + c1 + c2 + c3).max(9 * f)) as f64;
    let adapter_peak = (side(2) * side(2) * 27).max(side(4) * side(4) * 9 * c1) as f64;
    Ok(CostReport {
        output_grid: g,
        teacher_tokens: nt,
        student_tokens: ns,
        flops_teacher,
        flops_teacher_attention_quadratic: quad,
        flops_student_backbone,
        flops_adapter,
        flops_head,
        flops_student_total: flops_student_backbone + flops_adapter + flops_head,
        peak_activation_teacher: vit_peak(nt),
        peak_activation_student: vit_peak(ns).max(head_peak).max(adapter_peak),
        params_backbone: vit_params(vit),
        params_student: student_params(vit, adapter),
    })
}

pub const FLOP_CONVENTION: &str = "# FLOP convention: 1 multiply-accumulate = 2 FLOPs";

/// Tab-separated table, one row per report, with an optional measured
/// wall-clock column per path (empty when not measured).
pub fn cost_tsv(reports: &[CostReport], wall_ms: &[(Option<f64>, Option<f64>)]) -> String {
    let mut out = format!(
        "{FLOP_CONVENTION}\n\
         output_grid\tteacher_tokens\tstudent_tokens\tflops_teacher\tflops_teacher_attn_quadratic\t\
         flops_student_backbone\tflops_adapter\tflops_head\tflops_student_total\tratio\t\
         peak_act_teacher\tpeak_act_student\tparams_backbone\tparams_student\twall_ms_teacher\twall_ms_student\n"
    );
    for (i, r) in reports.iter().enumerate() {
        let (wt, ws) = wall_ms.get(i).copied().unwrap_or((None, None));
        let ms = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:.3}"));
        out += &format!(
            "{}\t{}\t{}\t{:.6e}\t{:.6e}\t{:.6e}\t{:.6e}\t{:.6e}\t{:.6e}\t{:.4}\t{:.6e}\t{:.6e}\t{}\t{}\t{}\t{}\n",
            r.output_grid,
            r.teacher_tokens,
            r.student_tokens,
            r.flops_teacher,
            r.flops_teacher_attention_quadratic,
            r.flops_student_backbone,
            r.flops_adapter,
            r.flops_head,
            r.flops_student_total,
            r.ratio(),
            r.peak_activation_teacher,
            r.peak_activation_student,
            r.params_backbone,
            r.params_student,
            ms(wt),
            ms(ws)
        );
    }
    out
}

/// Log-scale line plot of teacher and student GFLOPs over output grids.
pub fn cost_svg(reports: &[CostReport]) -> String {
    let (w, h, m) = (640.0, 400.0, 60.0);
    let ys: Vec<f64> = reports
        .iter()
        .flat_map(|r| [r.flops_teacher, r.flops_student_total])
        .map(f64::log10)
        .collect();
    let (ymin, ymax) = ys.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &y| (a.min(y), b.max(y)));
    let (ymin, ymax) = (ymin.floor(), ymax.ceil().max(ymin.floor() + 1.0));
    let n = reports.len().max(2) as f64 - 1.0;
    let px = |i: usize| m + (w - 2.0 * m) * i as f64 / n;
    let py = |v: f64| h - m - (h - 2.0 * m) * (v.log10() - ymin) / (ymax - ymin);
    let line = |sel: fn(&CostReport) -> f64, color: &str| {
        let pts: Vec<String> = reports
            .iter()
            .enumerate()
            .map(|(i, r)| format!("{:.1},{:.1}", px(i), py(sel(r))))
            .collect();
        format!("<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>\n", pts.join(" "))
    };
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <line x1=\"{m}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n\
         <line x1=\"{m}\" y1=\"{m}\" x2=\"{m}\" y2=\"{}\" stroke=\"black\"/>\n",
        h - m,
        w - m,
        h - m,
        h - m
    );
    for e in ymin as i64..=ymax as i64 {
        let y = py(10f64.powi(e as i32));
        s += &format!("<text x=\"{}\" y=\"{:.1}\" text-anchor=\"end\">1e{e}</text>\n", m - 6.0, y + 4.0);
    }
    for (i, r) in reports.iter().enumerate() {
        s += &format!(
            "<text x=\"{:.1}\" y=\"{}\" text-anchor=\"middle\">{}x{}</text>\n",
            px(i),
            h - m + 18.0,
            r.output_grid,
            r.output_grid
        );
    }
    s += &line(|r| r.flops_teacher, "#c0392b");
    s += &line(|r| r.flops_student_total, "#2471a3");
    s += &format!(
        "<text x=\"{}\" y=\"{}\" fill=\"#c0392b\">teacher FLOPs</text>\n\
         <text x=\"{}\" y=\"{}\" fill=\"#2471a3\">student FLOPs</text>\n\
         <text x=\"{}\" y=\"{}\" text-anchor=\"middle\">output grid (1 MAC = 2 FLOPs)</text>\n</svg>\n",
        m + 10.0,
        m - 20.0,
        m + 130.0,
        m - 20.0,
        w / 2.0,
        h - 12.0
    );
    s
}

/// Per-class results of comparing label grids.
#[derive(Clone, Debug, PartialEq)]
pub struct SegMetrics {
    pub miou: f64,
    pub accuracy: f64,
    /// Classes absent from both prediction and ground truth; excluded from
    /// the mIoU mean.
    pub absent: Vec<usize>,
}

pub fn segmentation_metrics(pred: &[u8], truth: &[u8], classes: usize) -> Result<SegMetrics> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::shape(format!("{} predictions for {} labels", pred.len(), truth.len())));
    }
    let mut tp = vec![0usize; classes];
    let mut fp = vec![0usize; classes];
    let mut fneg = vec![0usize; classes];
    let mut correct = 0;
    for (&p, &t) in pred.iter().zip(truth) {
        let (p, t) = (p as usize, t as usize);
        if p >= classes || t >= classes {
            return Err(Error::invalid(format!("label {} outside {classes} classes", p.max(t))));
        }
        if p == t {
            tp[p] += 1;
            correct += 1;
        } else {
            fp[p] += 1;
            fneg[t] += 1;
        }
    }
    let mut ious = Vec::new();
    let mut absent = Vec::new();
    for c in 0..classes {
        let denom = tp[c] + fp[c] + fneg[c];
        if denom == 0 {
            absent.push(c);
        } else {
            ious.push(tp[c] as f64 / denom as f64);
        }
    }
    if !absent.is_empty() {
        log::warn!("classes {absent:?} absent from prediction and ground truth; excluded from mIoU");
    }
    let miou = if ious.is_empty() { 0.0 } else { ious.iter().sum::<f64>() / ious.len() as f64 };
    Ok(SegMetrics {
        miou,
        accuracy: correct as f64 / pred.len() as f64,
        absent,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeConfig {
    pub lr: f64,
    pub iters: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { lr: 1e-2, iters: 500 }
    }
}

/// Per-token linear classifier `(classes, C)` plus bias.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearProbe {
    pub weight: Tensor<f64>,
    pub bias: Tensor<f64>,
}

/// Labelled dense features: a map and a row-major label grid of its own
/// resolution.
pub struct ProbeSample<'a, T> {
    pub features: &'a FeatureMap<T>,
    pub labels: &'a [u8],
    pub label_h: usize,
    pub label_w: usize,
}

const PROBE_LOG_FLOOR: f64 = 1e-12;

/// Trains a linear probe with softmax cross-entropy on bilinearly upsampled
/// logits, full batch, Adam.
pub fn train_probe<T: Real>(samples: &[ProbeSample<'_, T>], classes: usize, cfg: &ProbeConfig) -> Result<LinearProbe> {
    let c = samples
        .first()
        .ok_or_else(|| Error::invalid("probe needs at least one sample"))?
        .features
        .channels();
    let mut params = ModelParams::<f64>::new();
    params.insert("w", Tensor::zeros([classes, c]), true);
    params.insert("b", Tensor::zeros([classes]), true);
    let mut state = AdamState::new(&params);
    let data: Vec<(Tensor<f64>, Tensor<f64>, usize, usize, usize, usize)> = samples
        .iter()
        .map(|s| {
            let (h, w) = s.features.grid();
            if s.features.channels() != c || s.labels.len() != s.label_h * s.label_w {
                return Err(Error::shape("probe sample features or labels inconsistent".to_string()));
            }
            let x = s.features.tensor().cast::<f64>().reshape([c, h * w])?;
            let n = s.label_h * s.label_w;
            let mut onehot = Tensor::zeros([n, classes]);
            for (i, &l) in s.labels.iter().enumerate() {
                if l as usize >= classes {
                    return Err(Error::invalid(format!("label {l} outside {classes} classes")));
                }
                onehot.data_mut()[i * classes + l as usize] = 1.0;
            }
            Ok((x, onehot, h, w, s.label_h, s.label_w))
        })
        .collect::<Result<_>>()?;
    let total: usize = data.iter().map(|d| d.4 * d.5).sum();
    for _ in 0..cfg.iters {
        let tape = Tape::new();
        let bound = params.bind(&tape);
        let (w, b) = (bound.var("w")?, bound.var("b")?);
        let mut loss = None;
        for (x, onehot, h, wd, lh, lw) in &data {
            let logits = tape.matmul(w, tape.constant(x.clone()))?;
            let logits = tape.add_channel_bias(tape.reshape(logits, &[classes, *h, *wd])?, b)?;
            let up = tape.resize(logits, *lh, *lw, false)?;
            let rows = tape.transpose(tape.reshape(up, &[classes, lh * lw])?)?;
            let logp = tape.log(tape.add_scalar(tape.softmax(rows)?, PROBE_LOG_FLOOR)?)?;
            let picked = tape.sum(tape.mul(logp, tape.constant(onehot.clone()))?)?;
            loss = Some(match loss {
                None => picked,
                Some(l) => tape.add(l, picked)?,
            });
        }
        let root = tape.scale(loss.expect("non-empty"), -1.0 / total as f64)?;
        let mut g = tape.backward(root)?;
        let grads: HashMap<String, Tensor<f64>> = [("w", w), ("b", b)]
            .into_iter()
            .filter_map(|(n, v)| g.take(v).map(|t| (n.to_string(), t)))
            .collect();
        adam_step(&mut params, &grads, &mut state, cfg.lr)?;
    }
    Ok(LinearProbe {
        weight: params.get("w")?.clone(),
        bias: params.get("b")?.clone(),
    })
}

impl LinearProbe {
    pub fn classes(&self) -> usize {
        self.bias.len()
    }

    /// Argmax labels at `out_h x out_w` after bilinear upsampling of the
    /// logits.
    pub fn predict<T: Real>(&self, fm: &FeatureMap<T>, out_h: usize, out_w: usize) -> Result<Vec<u8>> {
        let (c, h, w) = fm.tensor().dims3()?;
        let k = self.classes();
        if self.weight.shape() != [k, c] {
            return Err(Error::shape(format!("probe {:?} on {c}-channel features", self.weight.shape())));
        }
        let x = fm.tensor().cast::<f64>().reshape([c, h * w])?;
        let mut logits = self.weight.matmul(&x)?;
        for (cls, row) in logits.data_mut().chunks_mut(h * w).enumerate() {
            row.iter_mut().for_each(|v| *v += self.bias.data()[cls]);
        }
        let up = crate::tensor::resize_channels(&logits.reshape([k, h, w])?, out_h, out_w, false)?;
        let n = out_h * out_w;
        Ok((0..n)
            .map(|i| {
                (0..k)
                    .max_by(|&a, &b| up.data()[a * n + i].total_cmp(&up.data()[b * n + i]).then(b.cmp(&a)))
                    .unwrap_or(0) as u8
            })
            .collect())
    }
}

/// Trains on `train` and scores argmax predictions over all pixels of
/// `test` pooled together.
pub fn probe_metrics<T: Real>(
    train: &[ProbeSample<'_, T>],
    test: &[ProbeSample<'_, T>],
    classes: usize,
    cfg: &ProbeConfig,
) -> Result<SegMetrics> {
    let probe = train_probe(train, classes, cfg)?;
    let (mut pred, mut truth) = (Vec::new(), Vec::new());
    for s in test {
        pred.extend(probe.predict(s.features, s.label_h, s.label_w)?);
        truth.extend_from_slice(s.labels);
    }
    segmentation_metrics(&pred, &truth, classes)
}

/// The low-resolution backbone map bilinearly upsampled to `h x w`.
pub fn bilinear_baseline<T: Real>(backbone: &FeatureMap<T>, h: usize, w: usize) -> Result<FeatureMap<T>> {
    FeatureMap::new(crate::tensor::resize_channels(backbone.tensor(), h, w, false)?)
}

#[cfg(test)]
mod tests;
