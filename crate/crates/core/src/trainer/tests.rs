use super::*;
use crate::data::synthetic_image;
use crate::refiner::AdapterConfig;
use crate::backbone::ViTConfig;

fn scalar_params(p: f64) -> ModelParams<f64> {
    let mut m = ModelParams::new();
    m.insert("p", Tensor::scalar(p), true);
    m
}

fn grad(v: f64) -> HashMap<String, Tensor<f64>> {
    HashMap::from([("p".to_string(), Tensor::scalar(v))])
}

#[test]
fn zero_gradient_leaves_parameters() {
    let mut p = scalar_params(0.7);
    let mut s = AdamState::new(&p);
    adam_step(&mut p, &grad(0.0), &mut s, 1e-3).unwrap();
    assert_eq!(p.get("p").unwrap().item(), 0.7);
    assert_eq!(s.t, 1);
}

#[test]
fn first_step_moves_by_lr() {
    let mut p = scalar_params(0.0);
    let mut s = AdamState::new(&p);
    adam_step(&mut p, &grad(0.5), &mut s, 1e-3).unwrap();
    let want = -1e-3 * 0.5 / (0.5 + 1e-8);
    assert!((p.get("p").unwrap().item() - want).abs() < 1e-15);
}

#[test]
fn quadratic_converges_like_reference_loop() {
    let mut p = scalar_params(1.0);
    let mut s = AdamState::new(&p);
    let (mut x, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
    for t in 1..=100 {
        let g = 2.0 * p.get("p").unwrap().item();
        adam_step(&mut p, &grad(g), &mut s, 0.1).unwrap();
        let gr = 2.0 * x;
        m = 0.9 * m + 0.1 * gr;
        v = 0.999 * v + 0.001 * gr * gr;
        x -= 0.1 * (m / (1.0 - 0.9f64.powi(t))) / ((v / (1.0 - 0.999f64.powi(t))).sqrt() + 1e-8);
    }
    let p = p.get("p").unwrap().item();
    assert!(p.abs() < 0.5, "{p}");
    assert!((p - x).abs() < 1e-12);
}

#[test]
fn bad_gradients_abort_without_update() {
    let mut p = scalar_params(1.0);
    p.insert("frozen", Tensor::scalar(2.0), false);
    let mut s = AdamState::new(&p);
    assert!(matches!(adam_step(&mut p, &grad(f64::NAN), &mut s, 0.1), Err(Error::NonFinite(_))));
    let frozen = HashMap::from([("frozen".to_string(), Tensor::scalar(1.0))]);
    assert!(adam_step(&mut p, &frozen, &mut s, 0.1).is_err());
    assert_eq!(s.t, 0);
    assert_eq!(p.get("p").unwrap().item(), 1.0);
    assert!(!s.m.contains_key("frozen"));
}

#[test]
fn warmup_schedule() {
    let e = epoch_iters(80, 8);
    assert_eq!(e, 10);
    assert_eq!(warmup_lr(0, 1e-3, e, 1.0), 0.0);
    assert_eq!(warmup_lr(5, 1e-3, e, 1.0), 5e-4);
    assert_eq!(warmup_lr(10, 1e-3, e, 1.0), 1e-3);
    assert_eq!(warmup_lr(500, 1e-3, e, 1.0), 1e-3);
    assert_eq!(warmup_lr(0, 1e-3, e, 0.0), 1e-3);
    assert_eq!(epoch_iters(3, 8), 1);
}

#[test]
fn batches_cover_each_epoch() {
    let n = 10;
    let stream: Vec<usize> = (0..5).flat_map(|i| batch_indices(3, i, n, 4)).collect();
    for epoch in stream.chunks(n).take(2) {
        let mut e = epoch.to_vec();
        e.sort();
        assert_eq!(e, (0..n).collect::<Vec<_>>());
    }
    assert_eq!(batch_indices(3, 7, n, 4), batch_indices(3, 7, n, 4));
    assert_ne!(stream[..n], stream[n..2 * n]);
}

pub(crate) fn tiny_config() -> DistillConfig {
    DistillConfig {
        vit: ViTConfig {
            embed_dim: 16,
            heads: 2,
            depth: 1,
            ..ViTConfig::default()
        },
        adapter: AdapterConfig {
            pyramid_channels: [4, 8, 8],
            fusion_channels: 16,
            head_blocks: 1,
            ..AdapterConfig::default()
        },
        student_resolution: 32,
        pca_k: 4,
        batch_size: 2,
        total_iters: 6,
        synthetic_count: 4,
        ..DistillConfig::default()
    }
}

fn tiny_samples(cfg: &DistillConfig) -> Vec<Sample> {
    (0..cfg.synthetic_count)
        .map(|i| Sample {
            id: format!("s{i}"),
            image: synthetic_image(i as u64, cfg.teacher_resolution()),
        })
        .collect()
}

#[test]
fn training_is_deterministic_and_keeps_backbone_frozen() {
    let cfg = tiny_config();
    let samples = tiny_samples(&cfg);
    let mut a = Trainer::new(cfg.clone(), &samples).unwrap();
    let mut b = Trainer::new(cfg.clone(), &samples).unwrap();
    let digest = a.backbone().digest();
    let before = a.student().params().digest();
    for i in 0..4 {
        let (ma, mb) = (a.step().unwrap(), b.step().unwrap());
        assert_eq!(ma, mb);
        assert_eq!(ma.iter, i);
        assert_eq!(ma.lr, a.lr_at(i));
        assert!(ma.loss.total.is_finite() && ma.grad_norm > 0.0);
    }
    assert_eq!(a.backbone().digest(), digest);
    assert_ne!(a.student().params().digest(), before);
    assert_eq!(a.foreign_gradients(), 0);
    assert_eq!(a.student(), b.student());
}

#[test]
fn checkpoint_round_trip_and_resume() {
    let cfg = tiny_config();
    let samples = tiny_samples(&cfg);
    let dir = tempfile::tempdir().unwrap();
    let mut full = Trainer::new(cfg.clone(), &samples).unwrap();
    for _ in 0..3 {
        full.step().unwrap();
    }
    full.save_checkpoint(dir.path()).unwrap();
    let ck = load_checkpoint(dir.path(), &cfg).unwrap();
    assert_eq!(&ck.student, full.student());
    assert_eq!(&ck.adam, full.adam());
    assert_eq!(ck.iter, 3);

    let mut resumed = Trainer::resume(cfg.clone(), &samples, dir.path()).unwrap();
    for _ in 0..3 {
        assert_eq!(full.step().unwrap(), resumed.step().unwrap());
    }

    let other = DistillConfig {
        adapter: AdapterConfig {
            pyramid_channels: [4, 8, 4],
            ..cfg.adapter.clone()
        },
        ..cfg
    };
    let err = load_checkpoint(dir.path(), &other).err().unwrap();
    assert!(err.to_string().contains("adapter.level3.w"), "{err}");
}

#[test]
fn run_distill_writes_artifacts_and_resumes() {
    let cfg = DistillConfig {
        checkpoint_every: 3,
        ..tiny_config()
    };
    let samples = tiny_samples(&cfg);
    let a = tempfile::tempdir().unwrap();
    run_distill(&cfg, &samples, a.path(), false).unwrap();
    let full = read_metrics(&a.path().join(METRICS_FILE)).unwrap();
    assert_eq!(full.len(), 6);
    assert!(a.path().join(RESOLVED_CONFIG).exists());
    assert_eq!(DistillConfig::load(&a.path().join(RESOLVED_CONFIG)).unwrap(), cfg);

    let b = tempfile::tempdir().unwrap();
    let short = DistillConfig {
        total_iters: 3,
        ..cfg.clone()
    };
    run_distill(&short, &samples, b.path(), false).unwrap();
    run_distill(&cfg, &samples, b.path(), true).unwrap();
    let resumed = read_metrics(&b.path().join(METRICS_FILE)).unwrap();
    assert_eq!(resumed, full);
    assert!(latest_checkpoint(&b.path().join(CHECKPOINT_DIR)).unwrap().unwrap().ends_with(checkpoint_name(6)));
}

#[test]
fn metrics_lines_round_trip() {
    let m = StepMetrics {
        iter: 3,
        lr: 1e-3 / 3.0,
        loss: LossTerms {
            l1: 0.1,
            edge: 0.25,
            spectral: 1.0 / 7.0,
            total: 0.4,
        },
        grad_norm: 2.5,
    };
    assert_eq!(StepMetrics::parse_tsv(&m.to_tsv()).unwrap(), m);
    assert_eq!(m.to_tsv().split('\t').count(), 7);
}

#[test]
fn wrong_resolution_sample_is_rejected() {
    let cfg = tiny_config();
    let bad = vec![Sample {
        id: "x".into(),
        image: synthetic_image(0, 64),
    }];
    assert!(matches!(Trainer::new(cfg, &bad), Err(Error::Shape(_))));
}
