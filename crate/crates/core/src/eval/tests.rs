use super::*;
use crate::backbone::init_backbone;
use crate::refiner::StudentParams;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_map(seed: u64, c: usize, h: usize, w: usize) -> FeatureMap<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    FeatureMap::new(Tensor::from_fn([c, h, w], |_| rng.random_range(-1.0..1.0))).unwrap()
}

#[test]
fn identical_maps_have_perfect_fidelity() {
    let m = random_map(1, 6, 8, 8);
    let r = fidelity(&m, &m, &SpectralConfig::default()).unwrap();
    assert_eq!(r.l1, 0.0);
    assert!((r.cosine - 1.0).abs() < 1e-12);
    assert_eq!(r.spectral_gap, 0.0);
    let neg = FeatureMap::new(m.tensor().map(|v| -v)).unwrap();
    assert!((mean_cosine(&m, &neg).unwrap() + 1.0).abs() < 1e-12);
    assert!(fidelity(&m, &random_map(1, 6, 8, 4), &SpectralConfig::default()).is_err());
}

#[test]
fn zero_vector_cosine_convention() {
    assert_eq!(cosine(&[0.0, 0.0], &[0.0, 0.0]), 1.0);
    assert_eq!(cosine(&[0.0, 0.0], &[1.0, 0.0]), 0.0);
    assert!((cosine(&[2.0, 0.0], &[1.0, 1.0]) - 0.5f64.sqrt()).abs() < 1e-15);
}

#[test]
fn pca_rgb_spans_reference_range() {
    let r = random_map(2, 5, 6, 7);
    let other = random_map(3, 5, 6, 7);
    let panels = pca_rgb(&[&r, &other, &r], &r).unwrap();
    assert_eq!(panels[0], panels[2]);
    assert_eq!((panels[0].width, panels[0].height), (7, 6));
    for c in 0..3 {
        let ch: Vec<u8> = panels[0].data.iter().skip(c).step_by(3).copied().collect();
        assert_eq!(*ch.iter().min().unwrap(), 0);
        assert_eq!(*ch.iter().max().unwrap(), 255);
    }
    assert!(pca_rgb(&[&r], &random_map(4, 2, 6, 7)).is_err());
}

/// Multiply-adds of a literal triple-loop attention, times two.
fn counted_attention_quadratic(n: usize, c: usize) -> f64 {
    let mut macs = 0u64;
    for _ in 0..n {
        for _ in 0..n {
            for _ in 0..c {
                macs += 2; // q.k and p.v
            }
        }
    }
    2.0 * macs as f64
}

#[test]
fn attention_quadratic_matches_counted_loops() {
    let cfg = ViTConfig {
        embed_dim: 8,
        heads: 2,
        depth: 1,
        ..ViTConfig::default()
    };
    assert_eq!(counted_attention_quadratic(16, 8) / 2.0, 4096.0);
    for n in [1, 16, 49] {
        assert_eq!(vit_flops(&cfg, n).1, counted_attention_quadratic(n, 8));
    }
}

#[test]
fn quadratic_term_has_slope_two() {
    let cfg = ViTConfig::small();
    let ns = [256.0f64, 1024.0, 4096.0, 16384.0];
    let ys: Vec<f64> = ns.iter().map(|&n| vit_flops(&cfg, n as usize).1.ln()).collect();
    for i in 1..ns.len() {
        let slope = (ys[i] - ys[i - 1]) / (ns[i].ln() - ns[i - 1].ln());
        assert!((slope - 2.0).abs() < 1e-12);
    }
}

#[test]
fn cost_ratio_grows_with_output_grid() {
    for vit in [ViTConfig::default(), ViTConfig::small()] {
        let a = AdapterConfig::default();
        let ratios: Vec<f64> = [16, 32, 64, 128]
            .iter()
            .map(|&g| flop_model(&vit, &a, g).unwrap().ratio())
            .collect();
        assert!(ratios.windows(2).all(|w| w[1] > w[0]), "{ratios:?}");
    }
    let r = flop_model(&ViTConfig::small(), &AdapterConfig::default(), 64).unwrap();
    assert!(r.flops_teacher > r.flops_student_total);
    assert!(flop_model(&ViTConfig::default(), &AdapterConfig::default(), 30).is_err());
}

#[test]
fn parameter_counts_match_initialised_models() {
    let vit = ViTConfig::default();
    let a = AdapterConfig::default();
    let r = flop_model(&vit, &a, 32).unwrap();
    let bb = init_backbone::<f32>(&vit, 0).unwrap();
    let st = StudentParams::<f32>::init(&vit, &a, 0).unwrap();
    assert_eq!(r.params_backbone, bb.params().num_elements());
    assert_eq!(r.params_student, st.params().num_elements());
}

#[test]
fn cost_outputs_are_well_formed() {
    let reports: Vec<CostReport> = [16, 32]
        .iter()
        .map(|&g| flop_model(&ViTConfig::default(), &AdapterConfig::default(), g).unwrap())
        .collect();
    let tsv = cost_tsv(&reports, &[(Some(1.5), None)]);
    let lines: Vec<&str> = tsv.lines().collect();
    assert_eq!(lines[0], FLOP_CONVENTION);
    assert_eq!(lines.len(), 4);
    let cols = lines[1].split('\t').count();
    assert!(lines[2..].iter().all(|l| l.split('\t').count() == cols));
    assert!(lines[2].contains("1.500"));
    let svg = cost_svg(&reports);
    assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    assert_eq!(svg.matches("<polyline").count(), 2);
}

fn brute_metrics(pred: &[u8], truth: &[u8], classes: usize) -> (f64, f64, Vec<usize>) {
    let mut ious = Vec::new();
    let mut absent = Vec::new();
    for c in 0..classes as u8 {
        let inter = pred.iter().zip(truth).filter(|(p, t)| **p == c && **t == c).count();
        let union = pred.iter().zip(truth).filter(|(p, t)| **p == c || **t == c).count();
        if union == 0 {
            absent.push(c as usize);
        } else {
            ious.push(inter as f64 / union as f64);
        }
    }
    let acc = pred.iter().zip(truth).filter(|(p, t)| p == t).count() as f64 / pred.len() as f64;
    (ious.iter().sum::<f64>() / ious.len() as f64, acc, absent)
}

#[test]
fn segmentation_metrics_match_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..20 {
        let n = rng.random_range(1..50);
        let pred: Vec<u8> = (0..n).map(|_| rng.random_range(0..3)).collect();
        let truth: Vec<u8> = (0..n).map(|_| rng.random_range(0..3)).collect();
        let m = segmentation_metrics(&pred, &truth, 5).unwrap();
        let (miou, acc, absent) = brute_metrics(&pred, &truth, 5);
        assert!((m.miou - miou).abs() < 1e-12);
        assert_eq!(m.accuracy, acc);
        assert_eq!(m.absent, absent);
        assert!(absent.contains(&3) && absent.contains(&4));
    }
    assert!(segmentation_metrics(&[0], &[0, 1], 2).is_err());
    assert!(segmentation_metrics(&[2], &[0], 2).is_err());
}

#[test]
fn probe_separates_linearly_separable_features() {
    let (h, w) = (4, 4);
    let labels: Vec<u8> = (0..h * w * 4).map(|i| u8::from((i % (w * 2)) >= w)).collect();
    let feats = FeatureMap::new(Tensor::from_fn([2, h, w], |i| {
        let x = i % w;
        if i < h * w { x as f64 - 1.5 } else { 0.3 }
    }))
    .unwrap();
    let sample = ProbeSample {
        features: &feats,
        labels: &labels,
        label_h: h * 2,
        label_w: w * 2,
    };
    let probe = train_probe(&[sample], 2, &ProbeConfig { lr: 5e-2, iters: 200 }).unwrap();
    let pred = probe.predict(&feats, h * 2, w * 2).unwrap();
    let m = segmentation_metrics(&pred, &labels, 2).unwrap();
    assert!(m.accuracy > 0.95, "{m:?}");
    assert!(probe.predict(&random_map(0, 3, h, w), 2, 2).is_err());
    assert!(train_probe::<f64>(&[], 2, &ProbeConfig::default()).is_err());
}

fn loop_fidelity(a: &FeatureMap<f64>, b: &FeatureMap<f64>) -> (f64, f64) {
    let (c, h, w) = a.tensor().dims3().unwrap();
    let (mut l1, mut cos) = (0.0, 0.0);
    for y in 0..h {
        for x in 0..w {
            let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
            for ch in 0..c {
                let (u, v) = (a.at(ch, y, x), b.at(ch, y, x));
                l1 += (u - v).abs();
                ab += u * v;
                aa += u * u;
                bb += v * v;
            }
            cos += ab / (aa * bb).sqrt();
        }
    }
    (l1 / (c * h * w) as f64, cos / (h * w) as f64)
}

#[test]
fn fidelity_matches_loop_oracle() {
    for seed in 0..5 {
        let (a, b) = (random_map(seed, 4, 6, 8), random_map(seed + 100, 4, 6, 8));
        let r = fidelity(&a, &b, &SpectralConfig::default()).unwrap();
        let (l1, cos) = loop_fidelity(&a, &b);
        assert!((r.l1 - l1).abs() < 1e-6 && (r.cosine - cos).abs() < 1e-6);
        assert!(r.spectral_gap > 0.0 && (-1.0..=1.0).contains(&r.cosine));
    }
}

#[test]
fn pca_rgb_ignores_null_space_and_other_maps() {
    let (c, h, w) = (6, 5, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    // tokens live in the span of the first three channels
    let low = Tensor::from_fn([c, h, w], |i| if i < 3 * h * w { rng.random_range(-1.0..1.0) } else { 0.0 });
    let reference = FeatureMap::new(low).unwrap();
    let basis = rgb_basis(&reference).unwrap();
    let captured: f64 = basis.pca.variances.iter().sum();
    let total: f64 = {
        let t = grid_to_tokens(&reference);
        let n = (h * w) as f64;
        (0..c)
            .map(|j| {
                let col: Vec<f64> = t.data().iter().skip(j).step_by(c).copied().collect();
                let m = col.iter().sum::<f64>() / n;
                col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n
            })
            .sum()
    };
    assert!((captured / total - 1.0).abs() < 1e-9);

    let a = random_map(6, c, h, w);
    let mut b = a.tensor().clone();
    for v in &mut b.data_mut()[3 * h * w..] {
        *v += 0.7;
    }
    let b = FeatureMap::new(b).unwrap();
    let panels = pca_rgb(&[&a, &b], &reference).unwrap();
    assert_eq!(panels[0], panels[1]);
    assert_eq!(rgb_basis(&reference).unwrap(), basis);
}

#[test]
fn trivial_metric_cases() {
    let t = [0u8, 1, 1, 0, 2];
    let m = segmentation_metrics(&t, &t, 3).unwrap();
    assert_eq!((m.miou, m.accuracy), (1.0, 1.0));
    let single = [1u8; 9];
    let m = segmentation_metrics(&single, &single, 2).unwrap();
    assert_eq!(m.accuracy, 1.0);
    assert_eq!(m.absent, vec![0]);
}

#[test]
fn baseline_upsamples_backbone_grid() {
    let m = random_map(7, 3, 4, 4);
    let b = bilinear_baseline(&m, 16, 16).unwrap();
    assert_eq!(b.grid(), (16, 16));
    let flat = FeatureMap::new(Tensor::full([2, 3, 3], 0.25)).unwrap();
    assert!(bilinear_baseline(&flat, 12, 12).unwrap().tensor().data().iter().all(|v: &f64| (v - 0.25).abs() < 1e-15));
}
