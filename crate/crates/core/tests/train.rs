use candle_core::{DType, Device, Tensor};
use dapose::data::{Batch, BatchSource, HybridBatchSampler, PreparedBatch, SampleMeta};
use dapose::imaging::Affine;
use dapose::model::{ModelConfig, ParamGroup, PoseModelBundle, Precision, Stage};
use dapose::schema::DomainLabel;
use dapose::train::*;
use dapose::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const INPUT: usize = 16;

/// Noise images with a bright dot; the synthetic ones are offset by a constant
/// brightness. One joint, whose heatmap peaks under the dot.
struct Dots {
    domains: Vec<DomainLabel>,
    offset: f32,
}

impl Dots {
    fn new(n_syn: usize, n_real: usize) -> Self {
        let mut domains = vec![DomainLabel::Synthetic; n_syn];
        domains.extend(vec![DomainLabel::Real; n_real]);
        Self { domains, offset: 0.5 }
    }

    fn record(&self, i: usize) -> (Vec<f32>, Vec<f32>) {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + i as u64);
        let off = if self.domains[i] == DomainLabel::Synthetic { self.offset } else { 0.0 };
        let (dx, dy) = (rng.random_range(2..INPUT - 2), rng.random_range(2..INPUT - 2));
        let mut img = vec![0f32; 3 * INPUT * INPUT];
        for c in 0..3 {
            for y in 0..INPUT {
                for x in 0..INPUT {
                    let dot = if x.abs_diff(dx) <= 1 && y.abs_diff(dy) <= 1 { 1.0 } else { 0.0 };
                    img[(c * INPUT + y) * INPUT + x] = off + dot + rng.random_range(0.0..0.1);
                }
            }
        }
        let hw = INPUT / 4;
        let (cx, cy) = (dx as f32 / 4.0, dy as f32 / 4.0);
        let heat = (0..hw * hw)
            .map(|j| {
                let (x, y) = ((j % hw) as f32, (j / hw) as f32);
                (-((x - cx).powi(2) + (y - cy).powi(2)) / 2.0).exp()
            })
            .collect();
        (img, heat)
    }
}

impl BatchSource for Dots {
    fn domains(&self) -> Vec<DomainLabel> {
        self.domains.clone()
    }

    fn build(&self, batch: &Batch, _stream_seed: u64) -> dapose::Result<PreparedBatch> {
        let mut b = PreparedBatch {
            size: batch.len(),
            images: Vec::new(),
            heatmaps: Vec::new(),
            weights: Vec::new(),
            domains: Vec::new(),
            image_ids: Vec::new(),
            metas: Vec::new(),
        };
        for &i in &batch.indices {
            let (img, heat) = self.record(i);
            b.images.extend(img);
            b.heatmaps.extend(heat);
            b.weights.push(1.0);
            b.domains.push(self.domains[i]);
            b.image_ids.push(i as u64);
            b.metas.push(SampleMeta {
                image_id: i as u64,
                center: (0.0, 0.0),
                scale: (INPUT as f64, INPUT as f64),
                rotation_deg: 0.0,
                flipped: false,
                transform: Affine::scaling(1.0, 1.0),
            });
        }
        Ok(b)
    }
}

fn model(precision: Precision) -> ModelConfig {
    ModelConfig {
        num_joints: 1,
        input_size: (INPUT, INPUT),
        block_names: vec!["res1".into(), "res2".into(), "res3".into()],
        channels: vec![4, 8, 8],
        strides: vec![2, 2, 1],
        deconv_channels: 4,
        domain_hidden: (16, 8),
        precision,
    }
}

fn toy_cfg(mode: TrainMode, epochs: usize) -> TrainConfig {
    TrainConfig {
        mode,
        lr: 0.01,
        init_session: Session { batch: 16, epochs: 1 },
        formal_session: Session { batch: 16, epochs },
        frozen_blocks: vec!["res1".into()],
        seed: 7,
        ..Default::default()
    }
}

fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

fn flat(t: &Tensor) -> Vec<f64> {
    t.flatten_all().unwrap().to_dtype(DType::F64).unwrap().to_vec1().unwrap()
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

// ---- loss oracles ----

#[test]
fn domain_loss_matches_scalar_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..100 {
        let n = rng.random_range(1..=8);
        let s: Vec<f64> = (0..n).map(|_| rng.random_range(-40.0..40.0)).collect();
        let d: Vec<f64> = (0..n).map(|_| rng.random_range(0..2) as f64).collect();
        let mut want = 0.0;
        for (s, d) in s.iter().zip(&d) {
            // −log σ(s) = softplus(−s), −log(1 − σ(s)) = softplus(s)
            want += if *d == 1.0 { softplus(-s) } else { softplus(*s) };
        }
        want /= n as f64;
        let got = scalar(
            &domain_loss(&Tensor::new(s.as_slice(), &Device::Cpu).unwrap(), &Tensor::new(d.as_slice(), &Device::Cpu).unwrap())
                .unwrap(),
        );
        assert!((got - want).abs() <= 1e-9, "{got} vs {want}");
    }
}

#[test]
fn domain_loss_hand_values() {
    let t = |v: &[f64]| Tensor::new(v, &Device::Cpu).unwrap();
    assert_eq!(scalar(&domain_loss(&t(&[0.0]), &t(&[1.0])).unwrap()), std::f64::consts::LN_2);
    assert_eq!(scalar(&domain_loss(&t(&[0.0, 0.0]), &t(&[1.0, 0.0])).unwrap()), std::f64::consts::LN_2);
    let big = scalar(&domain_loss(&t(&[20.0]), &t(&[1.0])).unwrap());
    let want = (-20f64).exp().ln_1p();
    assert!((big - want).abs() <= 1e-15 * want, "{big} vs {want}");
    assert!(scalar(&domain_loss(&t(&[1e4, -1e4]), &t(&[0.0, 1.0])).unwrap()).is_finite());
}

#[test]
fn pose_loss_matches_scalar_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..100 {
        let (n, k, h, w) = (rng.random_range(1..=8), rng.random_range(1..=3), 3, 2);
        let w_r = rng.random_range(1.0..6.0);
        let pred: Vec<f64> = (0..n * k * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        let target: Vec<f64> = (0..n * k * h * w).map(|_| rng.random_range(0.0..1.0)).collect();
        let weights: Vec<f64> = (0..n * k).map(|_| if rng.random_bool(0.7) { 1.0 } else { 0.0 }).collect();
        let domains: Vec<DomainLabel> = (0..n)
            .map(|_| if rng.random_bool(0.5) { DomainLabel::Real } else { DomainLabel::Synthetic })
            .collect();
        let mut want = 0.0;
        for i in 0..n {
            let (mut num, mut den) = (0.0, 0.0);
            for j in 0..k {
                let wt = weights[i * k + j];
                for e in 0..h * w {
                    let idx = (i * k + j) * h * w + e;
                    num += wt * (pred[idx] - target[idx]).powi(2);
                    den += wt;
                }
            }
            let s = if domains[i] == DomainLabel::Real { w_r } else { 1.0 };
            if den > 0.0 {
                want += s * num / den;
            }
        }
        want /= n as f64;
        let dev = Device::Cpu;
        let got = scalar(
            &pose_loss(
                &Tensor::from_vec(pred, (n, k, h, w), &dev).unwrap(),
                &Tensor::from_vec(target, (n, k, h, w), &dev).unwrap(),
                &Tensor::from_vec(weights, (n, k), &dev).unwrap(),
                &Tensor::new(domain_scales(&domains, w_r), &dev).unwrap(),
            )
            .unwrap(),
        );
        assert!((got - want).abs() <= 1e-9, "{got} vs {want}");
    }
}

fn uniform_error_loss(domains: &[DomainLabel], err: f64, w_r: f64) -> f64 {
    let dev = Device::Cpu;
    let n = domains.len();
    let pred = Tensor::full(err, (n, 2, 2, 2), &dev).unwrap();
    let target = Tensor::zeros((n, 2, 2, 2), DType::F64, &dev).unwrap();
    let weights = Tensor::ones((n, 2), DType::F64, &dev).unwrap();
    let scales = Tensor::new(domain_scales(domains, w_r), &dev).unwrap();
    scalar(&pose_loss(&pred, &target, &weights, &scales).unwrap())
}

#[test]
fn pose_loss_mixed_batch_is_three_a() {
    let a = 0.3f64 * 0.3;
    let got = uniform_error_loss(&[DomainLabel::Real, DomainLabel::Synthetic], 0.3, 5.0);
    assert!((got - 3.0 * a).abs() < 1e-15, "{got}");
    assert!((uniform_error_loss(&[DomainLabel::Synthetic], 0.25, 5.0) - 0.0625).abs() < 1e-15);
}

#[test]
fn pose_loss_is_linear_in_real_weight() {
    let real = [DomainLabel::Real; 3];
    for a in [0.5, 1.0, 2.5, 7.0] {
        let one = uniform_error_loss(&real, 0.2, a);
        let two = uniform_error_loss(&real, 0.2, 2.0 * a);
        assert!((two - 2.0 * one).abs() <= 1e-15 * two.abs().max(1.0), "{two} vs 2·{one}");
    }
}

#[test]
fn total_loss_arithmetic() {
    assert!((total_loss(1.0, 0.5, 0.0005) - 0.99975).abs() < 1e-15);
    assert_eq!(total_loss(0.7, 123.0, 0.0), 0.7);
}

/// ∂(L_P + GRL-routed L_D)/∂θ_f equals ∂L_P/∂θ_f − λ ∂L_D/∂θ_f by central
/// differences of `L_P − λ L_D`.
#[test]
fn stage2_gradient_matches_total_objective() {
    let mut bundle = PoseModelBundle::new(model(Precision::F64), 3).unwrap();
    bundle.apply_freeze_mask(Stage::Stage2, &[]).unwrap();
    // nonzero biases keep pre-activations off the ReLU kink
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for (_, p) in bundle.params().filter(|(_, p)| p.name.ends_with("bias")) {
        let v: Vec<f64> = (0..p.var.elem_count()).map(|_| rng.random_range(0.05..0.2)).collect();
        p.var.set(&Tensor::from_vec(v, p.var.dims(), &Device::Cpu).unwrap()).unwrap();
    }
    let data = Dots::new(3, 2);
    let batch = Batch {
        indices: vec![0, 1, 2, 3, 4],
        domains: data.domains(),
    };
    let bt = data
        .build(&batch, 0)
        .unwrap()
        .to_tensors((INPUT, INPUT), (INPUT / 4, INPUT / 4), DType::F64, &Device::Cpu)
        .unwrap();
    let scales = Tensor::new(domain_scales(&batch.domains, 2.0), &Device::Cpu).unwrap();
    let lambda = 0.3;
    let parts = |b: &PoseModelBundle, l: f64| {
        let f = b.forward_features(&bt.images).unwrap();
        let lp = pose_loss(&b.forward_pose(&f).unwrap(), &bt.heatmaps, &bt.weights, &scales).unwrap();
        let ld = domain_loss(&b.forward_domain(&f, l).unwrap(), &bt.domain_targets).unwrap();
        (lp, ld)
    };
    let (lp, ld) = parts(&bundle, lambda);
    let grads = (lp + ld).unwrap().backward().unwrap();
    let objective = |b: &PoseModelBundle| {
        let (lp, ld) = parts(b, 0.0);
        total_loss(scalar(&lp), scalar(&ld), lambda)
    };
    let h = 1e-6;
    for (blk, p) in bundle.params().filter(|(b, _)| b.group == ParamGroup::Extractor) {
        let analytic = flat(grads.get(p.var.as_tensor()).unwrap());
        let base = flat(p.var.as_tensor());
        for i in (0..base.len()).step_by(5) {
            let set = |v: f64| {
                let mut x = base.clone();
                x[i] = v;
                p.var.set(&Tensor::from_vec(x, p.var.dims(), &Device::Cpu).unwrap()).unwrap();
            };
            set(base[i] + h);
            let up = objective(&bundle);
            set(base[i] - h);
            let down = objective(&bundle);
            set(base[i]);
            let fd = (up - down) / (2.0 * h);
            let tol = 1e-4 * fd.abs().max(analytic[i].abs()) + 1e-10;
            assert!((analytic[i] - fd).abs() <= tol, "{} {}[{i}]: {} vs {}", blk.name, p.name, analytic[i], fd);
        }
    }
}

// ---- initialization session ----

#[test]
fn init_session_step_count() {
    let mut bundle = PoseModelBundle::new(model(Precision::F32), 0).unwrap();
    let data = Dots::new(2048, 512);
    let cfg = TrainConfig {
        init_session: Session { batch: 128, epochs: 1 },
        ..toy_cfg(TrainMode::Fidip, 1)
    };
    let before = (
        bundle.group_checksum(ParamGroup::Extractor).unwrap(),
        bundle.group_checksum(ParamGroup::PoseHead).unwrap(),
    );
    let s = init_domain_classifier(&mut bundle, &data, &cfg).unwrap();
    assert_eq!(s.steps, 20);
    assert_eq!(
        before,
        (
            bundle.group_checksum(ParamGroup::Extractor).unwrap(),
            bundle.group_checksum(ParamGroup::PoseHead).unwrap()
        )
    );
}

fn head_accuracy(bundle: &PoseModelBundle, data: &Dots) -> f64 {
    let batch = Batch {
        indices: (0..data.domains.len()).collect(),
        domains: data.domains(),
    };
    let bt = data
        .build(&batch, 0)
        .unwrap()
        .to_tensors((INPUT, INPUT), (INPUT / 4, INPUT / 4), bundle.dtype(), &Device::Cpu)
        .unwrap();
    let logits = flat(&bundle.forward_domain(&bundle.forward_features(&bt.images).unwrap(), 0.0).unwrap());
    let hits = logits
        .iter()
        .zip(&batch.domains)
        .filter(|(s, d)| (**s >= 0.0) == (**d == DomainLabel::Synthetic))
        .count();
    hits as f64 / logits.len() as f64
}

#[test]
fn init_separates_separable_domains() {
    let mut bundle = PoseModelBundle::new(model(Precision::F32), 1).unwrap();
    let cfg = TrainConfig {
        init_session: Session { batch: 32, epochs: 10 },
        ..toy_cfg(TrainMode::Fidip, 1)
    };
    init_domain_classifier(&mut bundle, &Dots::new(128, 128), &cfg).unwrap();
    let mut held_out = Dots::new(0, 0);
    held_out.domains = (0..200)
        .map(|i| if i % 2 == 0 { DomainLabel::Synthetic } else { DomainLabel::Real })
        .collect();
    let acc = head_accuracy(&bundle, &held_out);
    assert!(acc >= 0.95, "accuracy {acc}");
}

#[test]
fn init_rejects_empty_data() {
    let mut bundle = PoseModelBundle::new(model(Precision::F32), 1).unwrap();
    let err = init_domain_classifier(&mut bundle, &Dots::new(0, 0), &toy_cfg(TrainMode::Fidip, 1)).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
}

// ---- stages ----

fn batches(data: &Dots, batch: usize, seed: u64, count: usize) -> Vec<SeededBatch> {
    let s = HybridBatchSampler::new(data.domains(), batch, seed).unwrap();
    stream_batches(&s, seed, 0, count)
}

#[test]
fn stage1_leaves_pose_network_alone_and_ignores_lambda() {
    let data = Dots::new(48, 16);
    let bs = batches(&data, 16, 3, 8);
    let base = PoseModelBundle::new(model(Precision::F32), 2).unwrap();
    let mut sums = Vec::new();
    for lambda in [0.0, 0.0005, 1.0] {
        let mut b = base.deep_clone().unwrap();
        let cfg = TrainConfig {
            lambda_grl: lambda,
            ..toy_cfg(TrainMode::Fidip, 1)
        };
        let mut adam = Adam::new(cfg.lr, cfg.adam);
        train_stage1(&mut b, &data, &bs, &cfg, &mut adam).unwrap();
        assert_eq!(b.group_checksum(ParamGroup::Extractor).unwrap(), base.group_checksum(ParamGroup::Extractor).unwrap());
        assert_eq!(b.group_checksum(ParamGroup::PoseHead).unwrap(), base.group_checksum(ParamGroup::PoseHead).unwrap());
        sums.push(b.group_checksum(ParamGroup::DomainHead).unwrap());
    }
    assert_ne!(sums[0], base.group_checksum(ParamGroup::DomainHead).unwrap());
    assert!(sums.iter().all(|s| s == &sums[0]));
}

fn held_out_losses(bundle: &PoseModelBundle, data: &Dots) -> (f64, f64) {
    let batch = Batch {
        indices: (0..data.domains.len()).collect(),
        domains: data.domains(),
    };
    let bt = data
        .build(&batch, 0)
        .unwrap()
        .to_tensors((INPUT, INPUT), (INPUT / 4, INPUT / 4), bundle.dtype(), &Device::Cpu)
        .unwrap();
    let f = bundle.forward_features(&bt.images).unwrap();
    let scales = Tensor::new(domain_scales(&batch.domains, 1.0), &Device::Cpu)
        .unwrap()
        .to_dtype(bundle.dtype())
        .unwrap();
    let lp = pose_loss(&bundle.forward_pose(&f).unwrap(), &bt.heatmaps, &bt.weights, &scales).unwrap();
    let ld = domain_loss(&bundle.forward_domain(&f, 0.0).unwrap(), &bt.domain_targets).unwrap();
    (scalar(&lp), scalar(&ld))
}

#[test]
fn stage1_lowers_held_out_domain_loss() {
    let data = Dots::new(64, 64);
    let mut held_out = Dots::new(0, 0);
    held_out.domains = (0..64).map(|i| if i < 32 { DomainLabel::Synthetic } else { DomainLabel::Real }).collect();
    let mut b = PoseModelBundle::new(model(Precision::F32), 4).unwrap();
    let cfg = toy_cfg(TrainMode::Fidip, 1);
    let before = held_out_losses(&b, &held_out).1;
    let mut adam = Adam::new(cfg.lr, cfg.adam);
    train_stage1(&mut b, &data, &batches(&data, 16, 5, 24), &cfg, &mut adam).unwrap();
    let after = held_out_losses(&b, &held_out).1;
    assert!(after < before, "L_D {before} -> {after}");
}

#[test]
fn stage2_locks_classifier_and_frozen_blocks_and_lowers_pose_loss() {
    let data = Dots::new(48, 16);
    let mut b = PoseModelBundle::new(model(Precision::F32), 5).unwrap();
    let cfg = toy_cfg(TrainMode::Fidip, 3);
    let frozen = cfg.frozen_blocks.clone();
    let (d0, f0) = (b.group_checksum(ParamGroup::DomainHead).unwrap(), b.blocks_checksum(&frozen).unwrap());
    let before = held_out_losses(&b, &data).0;
    let mut adam = Adam::new(cfg.lr, cfg.adam);
    // three epochs of four batches
    train_stage2(&mut b, &data, &batches(&data, 16, 6, 12), &cfg, &mut adam, 3.0).unwrap();
    assert_eq!(d0, b.group_checksum(ParamGroup::DomainHead).unwrap());
    assert_eq!(f0, b.blocks_checksum(&frozen).unwrap());
    let after = held_out_losses(&b, &data).0;
    assert!(after <= before, "L_P {before} -> {after}");
}

#[test]
fn stage2_loss_breakdown_is_consistent() {
    let data = Dots::new(24, 8);
    let mut b = PoseModelBundle::new(model(Precision::F64), 5).unwrap();
    let cfg = toy_cfg(TrainMode::Fidip, 1);
    let mut adam = Adam::new(cfg.lr, cfg.adam);
    let l = train_stage2(&mut b, &data, &batches(&data, 8, 1, 4), &cfg, &mut adam, 3.0).unwrap();
    let (lp, ld, lt) = (l.l_p.unwrap(), l.l_d.unwrap(), l.l_total.unwrap());
    assert!((lt - (lp - cfg.lambda_grl * ld)).abs() <= 1e-9);
    assert_eq!(l.per_domain_counts.real + l.per_domain_counts.synthetic, 32);
}

// ---- the full loop ----

fn run(cfg: &TrainConfig, opts: &RunOptions) -> (TrainReport, PoseModelBundle) {
    let mut b = PoseModelBundle::new(model(Precision::F32), 9).unwrap();
    let r = run_fidip(&mut b, &Dots::new(48, 16), cfg, opts).unwrap();
    (r, b)
}

#[test]
fn per_epoch_schedule_alternates() {
    let (r, _) = run(&toy_cfg(TrainMode::Fidip, 2), &RunOptions::default());
    let stages: Vec<Stage> = r.records.iter().map(|x| x.stage).collect();
    assert_eq!(stages, [Stage::Stage1, Stage::Stage2, Stage::Stage1, Stage::Stage2]);
    assert!(r.init.is_some());
    assert!(r.completed());
}

#[test]
fn per_n_batches_schedule() {
    let cfg = TrainConfig {
        stage_granularity: StageGranularity::PerNBatches(3),
        ..toy_cfg(TrainMode::Fidip, 2)
    };
    let (r, _) = run(&cfg, &RunOptions::default());
    // 64 records at batch 16: 4 batches per epoch, 8 in total, cycles of 3
    let steps: Vec<usize> = r.records.iter().map(|x| x.steps).collect();
    assert_eq!(steps, [3, 3, 3, 3, 2, 2]);
}

#[test]
fn report_checksums_show_stage_isolation() {
    let (r, _) = run(&toy_cfg(TrainMode::Fidip, 4), &RunOptions::default());
    for w in r.records.windows(2) {
        let (prev, cur) = (&w[0].checksums, &w[1].checksums);
        match w[1].stage {
            Stage::Stage1 => {
                assert_eq!(prev["theta_f"], cur["theta_f"]);
                assert_eq!(prev["theta_y"], cur["theta_y"]);
            }
            _ => assert_eq!(prev["theta_d"], cur["theta_d"]),
        }
    }
}

#[test]
fn fixed_seed_is_deterministic() {
    let cfg = toy_cfg(TrainMode::Fidip, 2);
    let (a, ba) = run(&cfg, &RunOptions::default());
    let (b, bb) = run(&cfg, &RunOptions::default());
    assert_eq!(a, b);
    assert_eq!(ba.checksums().unwrap(), bb.checksums().unwrap());
}

#[test]
fn finetune_report_has_no_domain_loss() {
    let (r, _) = run(&toy_cfg(TrainMode::Finetune, 2), &RunOptions::default());
    assert!(r.init.is_none());
    assert!(r.records.iter().all(|x| x.stage == Stage::Stage2 && x.losses.l_d.is_none()));
    assert!(!r.to_jsonl().unwrap().contains("L_D"));
}

#[test]
fn zero_lambda_matches_finetune() {
    let fidip = TrainConfig {
        lambda_grl: 0.0,
        ..toy_cfg(TrainMode::Fidip, 3)
    };
    let (_, a) = run(&fidip, &RunOptions::default());
    let (_, b) = run(&toy_cfg(TrainMode::Finetune, 3), &RunOptions::default());
    for g in [ParamGroup::Extractor, ParamGroup::PoseHead] {
        assert_eq!(a.group_checksum(g).unwrap(), b.group_checksum(g).unwrap());
    }
}

fn opts(dir: &std::path::Path, cfg: &TrainConfig, max_cycles: Option<usize>) -> RunOptions<'static> {
    RunOptions {
        out_dir: Some(dir.to_path_buf()),
        resume: true,
        max_cycles,
        config_hash: format!("{:?}", cfg.lr),
        config_json: serde_json::json!({ "train": cfg }),
        schema_name: "toy".into(),
        init_data: None,
    }
}

#[test]
fn resumed_run_equals_uninterrupted_run() {
    let cfg = toy_cfg(TrainMode::Fidip, 3);
    let whole = tempfile::tempdir().unwrap();
    let (full, fb) = run(&cfg, &opts(whole.path(), &cfg, None));

    let split = tempfile::tempdir().unwrap();
    let (part, _) = run(&cfg, &opts(split.path(), &cfg, Some(1)));
    assert_eq!(part.cycles_completed, 1);
    // a fresh bundle with different weights: everything must come from the checkpoint
    let mut b = PoseModelBundle::new(model(Precision::F32), 99).unwrap();
    let resumed = run_fidip(&mut b, &Dots::new(48, 16), &cfg, &opts(split.path(), &cfg, None)).unwrap();
    assert_eq!(resumed, full);
    assert_eq!(b.checksums().unwrap(), fb.checksums().unwrap());
    let a = std::fs::read(whole.path().join(REPORT_FILE)).unwrap();
    let c = std::fs::read(split.path().join(REPORT_FILE)).unwrap();
    assert_eq!(a, c);
}

#[test]
fn resume_refuses_a_different_config() {
    let cfg = toy_cfg(TrainMode::Fidip, 2);
    let dir = tempfile::tempdir().unwrap();
    run(&cfg, &opts(dir.path(), &cfg, Some(1)));
    let other = TrainConfig { lr: 0.02, ..cfg };
    let mut b = PoseModelBundle::new(model(Precision::F32), 9).unwrap();
    let err = run_fidip(&mut b, &Dots::new(48, 16), &other, &opts(dir.path(), &other, None)).unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, Error::ConfigMismatch { .. }), "{msg}");
    assert!(msg.contains("train.lr"), "{msg}");
}
