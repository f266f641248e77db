//! Acceptance suite: one test per criterion, each printing a single
//! PASS/FAIL line with the measured values and the pinned thresholds.
//!
//! Criteria run one at a time behind a shared lock so wall-clock budgets are
//! measured without interference. The lines go straight to stderr and show
//! up without `--nocapture`.

#[path = "../../core/tests/common/mod.rs"]
mod oracle;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use bsfa_core::data::{make_sample, synthetic_shapes, Modality, TrainingSample};
use bsfa_core::deformation::{accumulate_pyramid, scale_field, warp};
use bsfa_core::metrics::{endpoint_error, q_abf, q_cv, q_s, q_ssim, q_vif};
use bsfa_core::{DeformationField, Image, Scale};
use bsfa_net::bsfa::consistency_of_warped;
use bsfa_net::convert::images_to_tensor;
use bsfa_net::gradcheck::{self, GradCheck};
use bsfa_net::mdffr::{inject_heads, modality_ce_loss, probe_loss, Probe};
use bsfa_net::ops::{scalar, softmax};
use bsfa_net::training::{lr_at, update_mu, Adam, AdamConfig, Batch, DeformationConfig, TrainConfig, Trainer};
use bsfa_net::{Ablation, Model, ModelConfig, ParamStore};
use candle_core::{DType, Device, Tensor};
use clap::Parser;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

static LOCK: Mutex<()> = Mutex::new(());

fn serial() -> std::sync::MutexGuard<'static, ()> {
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

/// Prints the criterion line and fails the test when `ok` is false.
fn verdict(id: u32, name: &str, ok: bool, detail: &str) {
    let line = format!("acceptance #{id:<2} {name:<22} {} | {detail}\n", if ok { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(ok, "criterion {id} ({name}) failed: {detail}");
}

fn max_abs(t: &Tensor) -> f64 {
    t.abs().unwrap().flatten_all().unwrap().max(0).unwrap().to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

// 1. Field algebra ----------------------------------------------------------

const ALGEBRA_BUDGET: Duration = Duration::from_secs(10);
const COMPOSE_TOL: f64 = 1e-6;

fn scene(h: usize, w: usize) -> Image {
    Image::from_fn(h, w, |x, y| {
        0.5 + 0.3 * (x as f64 * 0.37).sin() * (y as f64 * 0.23).cos() + 0.15 * (((x * 7 + y * 3) % 5) as f64 / 5.0)
    })
    .unwrap()
}

#[test]
fn criterion_01_field_algebra() {
    let _g = serial();
    let t0 = Instant::now();
    let img = scene(40, 36);

    let identity = warp(&img, &DeformationField::zeros(40, 36, 0)).unwrap() == img;

    let mut compose = 0.0f64;
    for (a, b) in [((2.0, -1.0), (-3.0, 2.0)), ((1.0, 1.0), (4.0, 0.0)), ((-2.0, 3.0), (-1.0, -4.0))] {
        let fa = DeformationField::constant(40, 36, 0, a.0, a.1).unwrap();
        let fb = DeformationField::constant(40, 36, 0, b.0, b.1).unwrap();
        let fab = DeformationField::constant(40, 36, 0, a.0 + b.0, a.1 + b.1).unwrap();
        let twice = warp(&warp(&img, &fa).unwrap(), &fb).unwrap();
        let once = warp(&img, &fab).unwrap();
        let m = 1 + [a.0, a.1, b.0, b.1].iter().map(|v: &f64| v.abs()).sum::<f64>() as usize;
        for y in m..40 - m {
            for x in m..36 - m {
                compose = compose.max((twice.get(x, y) - once.get(x, y)).abs());
            }
        }
    }

    let consts = [(0.5, -0.25), (-1.125, 0.75), (0.0625, 2.0), (-0.375, -1.5)];
    let levels: Vec<DeformationField> = consts
        .iter()
        .enumerate()
        .map(|(i, &(dx, dy))| DeformationField::constant(4 << i, 4 << i, i as u32, dx, dy).unwrap())
        .collect();
    let acc = accumulate_pyramid(&levels).unwrap();
    let k = consts.len();
    let want: (f64, f64) = consts.iter().enumerate().fold((0.0, 0.0), |(sx, sy), (i, &(dx, dy))| {
        let s = (1u32 << (k - 1 - i)) as f64;
        (sx + s * dx, sy + s * dy)
    });
    let accumulate = acc.dims() == (32, 32)
        && acc.dx().iter().all(|&v| v == want.0)
        && acc.dy().iter().all(|&v| v == want.1);

    let mut round_trip = true;
    for (dx, dy) in [(0.75, -2.5), (-3.0, 0.125)] {
        let f = DeformationField::constant(16, 12, 2, dx, dy).unwrap();
        for e in [1, 2] {
            let back = scale_field(&scale_field(&f, Scale::pow2(e)).unwrap(), Scale::pow2(-e)).unwrap();
            round_trip &= back.data() == f.data();
        }
    }

    let elapsed = t0.elapsed();
    let ok = identity && compose <= COMPOSE_TOL && accumulate && round_trip && elapsed < ALGEBRA_BUDGET;
    verdict(
        1,
        "field algebra",
        ok,
        &format!(
            "identity exact {identity}, compose max|diff| {compose:.1e} (<= {COMPOSE_TOL:e}), accumulate exact {accumulate}, \
             scale round trip exact {round_trip}, {elapsed:.2?} (< {ALGEBRA_BUDGET:?})"
        ),
    );
}

// 2. Gradients --------------------------------------------------------------

const GRAD_BUDGET: Duration = Duration::from_secs(120);
const GRAD_SIZE: usize = 16;
const GRAD_REL_TOL: f64 = 1e-3;

fn grad_setup(cfg: &ModelConfig) -> (ParamStore, Model, [Tensor; 3]) {
    let dev = Device::Cpu;
    let mut ps = ParamStore::new(21, DType::F64, dev.clone());
    let model = Model::new(&mut ps, cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let names: Vec<String> = ps.vars().keys().filter(|n| n.contains(".phi.")).cloned().collect();
    for name in names {
        let v = ps.var(&name).unwrap();
        let data: Vec<f64> = (0..v.elem_count()).map(|_| rng.random_range(-0.02..0.02)).collect();
        ps.assign(&name, &Tensor::from_vec(data, v.dims(), &dev).unwrap()).unwrap();
    }
    let pair = &synthetic_shapes(Modality::Spect, 1, GRAD_SIZE, 8).unwrap()[0];
    let mild = DeformationConfig {
        rotation_deg: 3.0,
        translation: 2.0,
        elastic_grid: 4,
        elastic_amplitude: 1.0,
    };
    let s = make_sample(pair, &mild.spec(13), None).unwrap();
    let t = |img: &Image| images_to_tensor(&[&img.luminance()], DType::F64, &dev).unwrap();
    (ps, model, [t(&s.moving), t(&s.reference), t(&s.label)])
}

#[test]
fn criterion_02_gradients() {
    let _g = serial();
    let t0 = Instant::now();
    let cfg = ModelConfig {
        levels: 3,
        fusion_blocks: 3,
        ..ModelConfig::tiny()
    };
    let (ps, model, [moving, reference, label]) = grad_setup(&cfg);
    let term = |name: &str| -> bsfa_net::Result<Tensor> {
        let fwd = model.forward(&moving, &reference)?;
        Ok(model.losses(&fwd, &label, &reference, 0.7)?.term(name).unwrap().clone())
    };
    let opts = GradCheck {
        rel_tol: GRAD_REL_TOL,
        params: 6,
        ..GradCheck::default()
    };
    let mut ok = true;
    let mut parts = Vec::new();
    for name in bsfa_net::LossValues::NAMES {
        let r = gradcheck::check(&ps, || term(name), &opts).unwrap();
        ok &= r.passed();
        parts.push(format!("{name} {:.1e}/{}", r.worst_rel_error(), r.probes.len()));
    }

    let grads = term("ce2").unwrap().backward().unwrap();
    let mut frozen_peak = 0.0f64;
    let mut transfer_grad = false;
    for (name, var) in ps.vars() {
        if let Some(g) = grads.get(var.as_tensor()) {
            if name.starts_with("encoder.") || name.starts_with("mlp.") {
                frozen_peak = frozen_peak.max(max_abs(g));
            }
            transfer_grad |= name.starts_with("transfer_") && max_abs(g) > 0.0;
        }
    }
    let elapsed = t0.elapsed();
    ok &= frozen_peak == 0.0 && transfer_grad && elapsed < GRAD_BUDGET;
    verdict(
        2,
        "gradients",
        ok,
        &format!(
            "worst rel err/probes [{}] (<= {GRAD_REL_TOL:e}), probe-frozen grad peak {frozen_peak:e} (== 0), {elapsed:.1?} (< {GRAD_BUDGET:?})",
            parts.join(", ")
        ),
    );
}

// 3. Shape contract ---------------------------------------------------------

#[test]
fn criterion_03_shape_contract() {
    let _g = serial();
    let cfg = ModelConfig::default();
    let dev = Device::Cpu;
    let mut ps = ParamStore::new(0, DType::F32, dev.clone()).detached_view();
    let model = Model::new(&mut ps, &cfg).unwrap();
    let pair = &synthetic_shapes(Modality::Ct, 1, 256, 3).unwrap()[0];
    let a = images_to_tensor(&[&pair.other], DType::F32, &dev).unwrap();
    let b = images_to_tensor(&[&pair.mri], DType::F32, &dev).unwrap();
    let f = model.forward(&a, &b).unwrap();
    let grids: Vec<usize> = f.pyramid.phi_a.iter().map(|p| p.dims()[2]).collect();
    let levels_ok = f.pyramid.phi_a.iter().chain(&f.pyramid.phi_b).enumerate().all(|(i, p)| {
        let s = 16 << (i % 5);
        p.dims() == [1, 2, s, s]
    });
    let fused = f.fused.flatten_all().unwrap().to_vec1::<f32>().unwrap();
    let (lo, hi) = fused.iter().fold((f32::MAX, f32::MIN), |(l, h), &v| (l.min(v), h.max(v)));
    let ok = levels_ok
        && grids == [16, 32, 64, 128, 256]
        && f.phi_ab.dims() == [1, 2, 256, 256]
        && f.fused.dims() == [1, 1, 256, 256]
        && lo > 0.0
        && hi < 1.0;
    verdict(
        3,
        "shape contract",
        ok,
        &format!(
            "K={} J={} W'={}: phi grids {grids:?}, phi_AB {:?}, I_fuse {:?} in ({lo:.4}, {hi:.4})",
            cfg.levels,
            cfg.fusion_blocks,
            cfg.token_width,
            &f.phi_ab.dims()[1..],
            &f.fused.dims()[2..]
        ),
    );
}

// 4. Zero-init identity -----------------------------------------------------

#[test]
fn criterion_04_zero_init_identity() {
    let _g = serial();
    let dev = Device::Cpu;
    let mut ps = ParamStore::new(5, DType::F64, dev.clone());
    let model = Model::new(&mut ps, &ModelConfig::tiny()).unwrap();
    let pair = &synthetic_shapes(Modality::Pet, 1, 64, 6).unwrap()[0];
    let spec = DeformationConfig::default().spec(17);
    let s = make_sample(pair, &spec, None).unwrap();
    let t = |img: &Image| images_to_tensor(&[&img.luminance()], DType::F64, &dev).unwrap();
    let (moving, reference, label) = (t(&s.moving), t(&s.reference), t(&s.label));
    let f = model.forward(&moving, &reference).unwrap();
    let peak = max_abs(&f.phi_ab);
    let consis = scalar(&model.losses(&f, &label, &reference, 1.0).unwrap().consis).unwrap();
    let baseline = scalar(&consistency_of_warped(&moving, &label, &model.ssim).unwrap()).unwrap();
    verdict(
        4,
        "zero-init identity",
        peak == 0.0 && consis == baseline,
        &format!("max|phi_AB| {peak:e} (== 0), L_consis {consis} vs unwarped baseline {baseline} (exact)"),
    );
}

// 5. Modality probe ---------------------------------------------------------

const PROBE_BUDGET: Duration = Duration::from_secs(300);
const PROBE_ACCURACY: f64 = 0.95;
const PROBE_CLASSIFIER_STEPS: usize = 200;
const PROBE_TRANSFER_STEPS: usize = 300;
const PROBE_MAX_DEVIATION: f64 = 0.1;
const PROBE_LR: f64 = 1e-3;

/// Images and their contrast inversions, `(n, 1, 64, 64)` each.
fn toys(n: usize, seed: u64) -> (Tensor, Tensor) {
    let imgs: Vec<Image> = synthetic_shapes(Modality::Ct, n, 64, seed).unwrap().into_iter().map(|p| p.mri).collect();
    let inv: Vec<Image> = imgs
        .iter()
        .map(|i| Image::new(1, 64, 64, i.data().iter().map(|v| 1.0 - v).collect()).unwrap())
        .collect();
    let dev = Device::Cpu;
    (
        images_to_tensor(&imgs.iter().collect::<Vec<_>>(), DType::F32, &dev).unwrap(),
        images_to_tensor(&inv.iter().collect::<Vec<_>>(), DType::F32, &dev).unwrap(),
    )
}

/// Probability of class "A" (index 1) per row.
fn prob_a(logits: &Tensor) -> Vec<f32> {
    softmax(logits).unwrap().narrow(1, 1, 1).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap()
}

#[test]
fn criterion_05_modality_probe() {
    let _g = serial();
    let t0 = Instant::now();
    let cfg = ModelConfig::tiny();
    let mut ps = ParamStore::new(2, DType::F32, Device::Cpu);
    let model = Model::new(&mut ps, &cfg).unwrap();
    let (train_a, train_b) = toys(8, 100);
    let (held_a, held_b) = toys(8, 200);

    let accuracy = |a: &Tensor, b: &Tensor| -> f64 {
        let pa = prob_a(&model.mlp.logits(&model.encoder.forward(a).unwrap().head).unwrap());
        let pb = prob_a(&model.mlp.logits(&model.encoder.forward(b).unwrap().head).unwrap());
        let correct = pa.iter().filter(|&&p| p > 0.5).count() + pb.iter().filter(|&&p| p < 0.5).count();
        correct as f64 / (pa.len() + pb.len()) as f64
    };
    let mut adam = Adam::new(AdamConfig::default());
    let mut reached = None;
    let mut acc = accuracy(&held_a, &held_b);
    for step in 1..=PROBE_CLASSIFIER_STEPS {
        let ea = model.encoder.forward(&train_a).unwrap();
        let eb = model.encoder.forward(&train_b).unwrap();
        let loss = modality_ce_loss(&model.mlp.logits(&ea.head).unwrap(), &model.mlp.logits(&eb.head).unwrap()).unwrap();
        adam.step(&ps, &loss.backward().unwrap(), PROBE_LR).unwrap();
        if step % 10 == 0 {
            acc = accuracy(&held_a, &held_b);
            if acc >= PROBE_ACCURACY {
                reached = Some(step);
                break;
            }
        }
    }

    let probe = Probe::from_live(&model.encoder, &model.mlp);
    let injected = |a: &Tensor, b: &Tensor| -> (Tensor, Tensor) {
        let ea = model.encoder.forward(a).unwrap();
        let eb = model.encoder.forward(b).unwrap();
        inject_heads(&ea.tokens.detach(), &ea.head.detach(), &eb.tokens.detach(), &eb.head.detach()).unwrap()
    };
    let deviation = |ia: &Tensor, ib: &Tensor| -> f64 {
        let ya = prob_a(&probe.logits(&model.transfer_a.forward(ia).unwrap()).unwrap());
        let yb = prob_a(&probe.logits(&model.transfer_b.forward(ib).unwrap()).unwrap());
        let all: Vec<f64> = ya.iter().chain(&yb).map(|&p| (p as f64 - 0.5).abs()).collect();
        all.iter().sum::<f64>() / all.len() as f64
    };
    let (tr_a, tr_b) = injected(&train_a, &train_b);
    let (ho_a, ho_b) = injected(&held_a, &held_b);
    let before = deviation(&ho_a, &ho_b);
    let mut adam = Adam::new(AdamConfig::default());
    for _ in 0..PROBE_TRANSFER_STEPS {
        let la = probe.logits(&model.transfer_a.forward(&tr_a).unwrap()).unwrap();
        let lb = probe.logits(&model.transfer_b.forward(&tr_b).unwrap()).unwrap();
        adam.step(&ps, &probe_loss(&la, &lb).unwrap().backward().unwrap(), PROBE_LR).unwrap();
    }
    let after = deviation(&ho_a, &ho_b);
    let elapsed = t0.elapsed();
    let ok = reached.is_some() && after <= PROBE_MAX_DEVIATION && after < before && elapsed < PROBE_BUDGET;
    verdict(
        5,
        "modality probe",
        ok,
        &format!(
            "held-out accuracy {acc:.3} (>= {PROBE_ACCURACY}) at step {} (<= {PROBE_CLASSIFIER_STEPS}), \
             held-out mean|y*-0.5| {before:.3} -> {after:.3} (<= {PROBE_MAX_DEVIATION}), {elapsed:.1?} (< {PROBE_BUDGET:?})",
            reached.map(|s| s.to_string()).unwrap_or_else(|| "never".into())
        ),
    );
}

// 6 and 10. Tiny overfit and ablations ----------------------------------------

const OVERFIT_BUDGET: Duration = Duration::from_secs(15 * 60);
const OVERFIT_STEPS: usize = 500;
const OVERFIT_SIZE: usize = 64;
const OVERFIT_PAIRS: usize = 4;
const OVERFIT_MAX_DISPLACEMENT: f64 = 8.0;
const CONSIS_MAX_RATIO: f64 = 0.5;
const EPE_MAX_RATIO: f64 = 0.7;
/// Steps for the variants that carry no endpoint-error threshold.
const PLUMBING_STEPS: usize = 100;

#[derive(Debug, Clone)]
struct OverfitRun {
    consis0: f64,
    consis: f64,
    epe_zero: f64,
    epe: f64,
    elapsed: Duration,
    max_gt: f64,
}

static RUNS: Mutex<BTreeMap<(String, usize), OverfitRun>> = Mutex::new(BTreeMap::new());

fn overfit_deformation() -> DeformationConfig {
    DeformationConfig {
        rotation_deg: 0.0,
        translation: 4.0,
        elastic_grid: 4,
        elastic_amplitude: 3.0,
    }
}

/// Trains one variant on four fixed misaligned pairs; cached per (preset, steps).
fn overfit(preset: &str, steps: usize) -> OverfitRun {
    let key = (preset.to_string(), steps);
    if let Some(r) = RUNS.lock().unwrap().get(&key) {
        return r.clone();
    }
    let t0 = Instant::now();
    let dev = Device::Cpu;
    let model = ModelConfig {
        ablation: Ablation::preset(preset).unwrap(),
        ..ModelConfig::tiny()
    };
    let train = TrainConfig {
        epochs: steps,
        batch_size: OVERFIT_PAIRS,
        lr_init: 1e-3,
        lr_final: 1e-5,
        augment: false,
        ..TrainConfig::default()
    };
    let pairs = synthetic_shapes(Modality::Ct, OVERFIT_PAIRS, OVERFIT_SIZE, 1).unwrap();
    let mut trainer = Trainer::new(model, train, overfit_deformation(), OVERFIT_PAIRS, DType::F32, dev.clone()).unwrap();
    let samples: Vec<TrainingSample> = pairs.iter().enumerate().map(|(i, p)| trainer.sample(p, 0, i).unwrap()).collect();
    let refs: Vec<&TrainingSample> = samples.iter().collect();
    let batch = Batch::from_samples(&refs, DType::F32, &dev).unwrap();
    let mean_epe = |t: &Trainer| -> f64 {
        let fields = t.predict_fields(&batch).unwrap();
        fields.iter().zip(&samples).map(|(f, s)| endpoint_error(f, &s.gt_field).unwrap()).sum::<f64>() / samples.len() as f64
    };
    let zero = DeformationField::zeros(OVERFIT_SIZE, OVERFIT_SIZE, 0);
    let epe_zero = samples.iter().map(|s| endpoint_error(&zero, &s.gt_field).unwrap()).sum::<f64>() / samples.len() as f64;
    let consis0 = trainer.evaluate(&batch).unwrap().consis;
    for _ in 0..steps {
        trainer.run_fixed_epoch(std::slice::from_ref(&batch)).unwrap();
    }
    let run = OverfitRun {
        consis0,
        consis: trainer.evaluate(&batch).unwrap().consis,
        epe_zero,
        epe: mean_epe(&trainer),
        elapsed: t0.elapsed(),
        max_gt: samples.iter().map(|s| s.gt_field.max_norm()).fold(0.0, f64::max),
    };
    RUNS.lock().unwrap().insert(key, run.clone());
    run
}

#[test]
fn criterion_06_tiny_overfit() {
    let _g = serial();
    let r = overfit("full", OVERFIT_STEPS);
    let consis_ratio = r.consis / r.consis0;
    let epe_ratio = r.epe / r.epe_zero;
    let ok = r.max_gt <= OVERFIT_MAX_DISPLACEMENT
        && consis_ratio <= CONSIS_MAX_RATIO
        && epe_ratio <= EPE_MAX_RATIO
        && r.elapsed < OVERFIT_BUDGET;
    verdict(
        6,
        "tiny overfit",
        ok,
        &format!(
            "{OVERFIT_PAIRS} pairs {OVERFIT_SIZE}px, max gt {:.2}px (<= {OVERFIT_MAX_DISPLACEMENT}), {OVERFIT_STEPS} steps: \
             L_consis {:.4} -> {:.4} (ratio {consis_ratio:.3} <= {CONSIS_MAX_RATIO}), EPE {:.3} vs zero field {:.3} \
             (ratio {epe_ratio:.3} <= {EPE_MAX_RATIO}), {:.1?} (< {OVERFIT_BUDGET:?})",
            r.max_gt, r.consis0, r.consis, r.epe, r.epe_zero, r.elapsed
        ),
    );
}

#[test]
fn criterion_10_ablation_plumbing() {
    let _g = serial();
    let full = overfit("full", OVERFIT_STEPS);
    let without_f = overfit("without-forward", OVERFIT_STEPS);
    let without_r = overfit("without-reverse", OVERFIT_STEPS);
    let without_bsfa = overfit("without-bsfa", PLUMBING_STEPS);
    let setting_a = overfit("setting-a", PLUMBING_STEPS);
    let setting_b = overfit("setting-b", PLUMBING_STEPS);
    let finite = [&full, &without_f, &without_r, &without_bsfa, &setting_a, &setting_b]
        .iter()
        .all(|r| r.consis.is_finite() && r.epe.is_finite());
    let ok = finite
        && full.epe <= without_f.epe
        && full.epe <= without_r.epe
        && without_bsfa.epe == without_bsfa.epe_zero;
    verdict(
        10,
        "ablation plumbing",
        ok,
        &format!(
            "EPE full {:.3} <= w/o F {:.3} and w/o R {:.3} ({OVERFIT_STEPS} steps); w/o BSFA {:.3} (== zero field {:.3}), \
             setting A {:.3}, setting B {:.3} ({PLUMBING_STEPS} steps); all finite {finite}",
            full.epe, without_f.epe, without_r.epe, without_bsfa.epe, without_bsfa.epe_zero, setting_a.epe, setting_b.epe
        ),
    );
}

// 7. Metrics ----------------------------------------------------------------

const METRIC_TOL: f64 = 1e-6;
const NOISE_DRAWS: usize = 20;
const NOISE_AMPLITUDE: f64 = 0.1;

fn plane_image(p: &oracle::Plane) -> Image {
    Image::new(1, p.h, p.w, p.v.clone()).unwrap()
}

#[test]
fn criterion_07_metrics() {
    let _g = serial();
    type Lib = fn(&Image, &Image, &Image) -> bsfa_core::Result<f64>;
    type Oracle = fn(&oracle::Plane, &oracle::Plane, &oracle::Plane) -> f64;
    let pairs: [(&str, Lib, Oracle); 5] = [
        ("Q_AB/F", q_abf, oracle::q_abf),
        ("Q_CV", q_cv, oracle::q_cv),
        ("Q_VIF", q_vif, oracle::q_vif),
        ("Q_S", q_s, oracle::q_s),
        ("Q_SSIM", q_ssim, oracle::q_ssim),
    ];
    let (a, b) = (oracle::fixture(0), oracle::fixture(1));
    let f = oracle::average(&a, &b);
    let mut worst = 0.0f64;
    for (_, lib, orc) in &pairs {
        let got = lib(&plane_image(&a), &plane_image(&b), &plane_image(&f)).unwrap();
        let want = orc(&a, &b, &f);
        worst = worst.max((got - want).abs() / want.abs().max(1.0));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let pred = DeformationField::new(16, 16, 0, (0..512).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap();
    let truth = DeformationField::new(16, 16, 0, (0..512).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap();
    let mut epe_oracle = 0.0;
    for y in 0..16 {
        for x in 0..16 {
            let (p, t) = (pred.get(x, y), truth.get(x, y));
            epe_oracle += ((p.0 - t.0).powi(2) + (p.1 - t.1).powi(2)).sqrt() / 256.0;
        }
    }
    worst = worst.max((endpoint_error(&pred, &truth).unwrap() - epe_oracle).abs());

    let x = plane_image(&oracle::fixture(2));
    let qabf_self = q_abf(&x, &x, &x).unwrap();
    let qssim_self = q_ssim(&x, &x, &x).unwrap();

    let (ia, ib, ifu) = (plane_image(&a), plane_image(&b), plane_image(&f));
    let (cv0, ss0) = (q_cv(&ia, &ib, &ifu).unwrap(), q_ssim(&ia, &ib, &ifu).unwrap());
    let mut worse = 0;
    for _ in 0..NOISE_DRAWS {
        let noisy = Image::from_clamped(
            1,
            32,
            32,
            ifu.data().iter().map(|v| v + rng.random_range(-NOISE_AMPLITUDE..NOISE_AMPLITUDE)).collect(),
        )
        .unwrap();
        worse += (q_cv(&ia, &ib, &noisy).unwrap() > cv0 && q_ssim(&ia, &ib, &noisy).unwrap() < ss0) as usize;
    }
    let ok = worst <= METRIC_TOL
        && (qabf_self - 1.0).abs() <= METRIC_TOL
        && (qssim_self - 1.0).abs() <= 1e-12
        && worse == NOISE_DRAWS;
    verdict(
        7,
        "metrics",
        ok,
        &format!(
            "worst deviation from oracle {worst:.1e} (<= {METRIC_TOL:e}), q_abf(A,A,A) {qabf_self:.9}, q_ssim(x,x,x) {qssim_self:.12}, \
             noise worsens q_cv and q_ssim in {worse}/{NOISE_DRAWS} draws"
        ),
    );
}

// 8. Determinism ------------------------------------------------------------

const RESUME_TOL: f64 = 1e-6;

const CLI_CONFIG: &str = r#"
[data]
image_size = 32
modalities = ["CT-MRI"]
test_counts = { "CT-MRI" = 2 }

[run]
checkpoint_every = 1

[model]
levels = 3
fusion_blocks = 3
base_channels = 8
mid_channels = 16
token_width = 32
restormer_heads = 2
transformer_heads = 2
mlp_hidden = 32
pos_grid = 4
reg_hidden = 16
fusion_channels = 16

[train]
epochs = 3
batch_size = 2
lr_init = 1e-3
lr_final = 1e-5
seed = 11
"#;

fn bsfa(base: &Path, out: &str, args: &[&str]) -> String {
    let config = base.join("run.toml");
    let root = format!("data.root=\"{}\"", base.join("data").display());
    let out = base.join(out);
    let mut argv = vec![
        "bsfa",
        "--config",
        config.to_str().unwrap(),
        "--set",
        &root,
        "--out",
        out.to_str().unwrap(),
    ];
    argv.extend_from_slice(args);
    bsfa_cli::run(bsfa_cli::Cli::parse_from(argv)).unwrap()
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut entries: Vec<_> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    entries.sort();
    for p in entries {
        if p.is_dir() {
            out.extend(files(&p));
        } else {
            out.push((p.display().to_string(), std::fs::read(&p).unwrap()));
        }
    }
    out
}

fn epoch_totals(log: &Path) -> Vec<f64> {
    std::fs::read_to_string(log)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#') && !l.starts_with("epoch"))
        .map(|l| l.split(',').nth(8).unwrap().parse().unwrap())
        .collect()
}

#[test]
fn criterion_08_determinism() {
    let _g = serial();
    let dir = tempfile::tempdir().unwrap();
    let base = dir.path();
    std::fs::write(base.join("run.toml"), CLI_CONFIG).unwrap();
    let data = base.join("data");
    bsfa_cli::run(bsfa_cli::Cli::parse_from(["bsfa", "synth", "--root", data.to_str().unwrap(), "--count", "6", "--size", "32"])).unwrap();

    bsfa(base, "prep", &["prepare"]);
    let first = files(&base.join("prep"));
    bsfa(base, "prep", &["prepare"]);
    let prepare_identical = files(&base.join("prep")) == first;

    let manifest = base.join("prep").join("manifest.txt");
    let m = manifest.to_str().unwrap();
    bsfa(base, "straight", &["train", "--manifest", m]);
    bsfa(base, "resumed", &["train", "--manifest", m, "--stop-after", "1"]);
    let ckpt = base.join("resumed").join("last.ckpt");
    bsfa(base, "resumed", &["train", "--manifest", m, "--resume", ckpt.to_str().unwrap()]);
    let straight = epoch_totals(&base.join("straight").join("train_log.csv"));
    let resumed = epoch_totals(&base.join("resumed").join("train_log.csv"));
    let diff = if straight.len() == resumed.len() && straight.len() == 3 {
        straight.iter().zip(&resumed).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    } else {
        f64::INFINITY
    };
    verdict(
        8,
        "determinism",
        prepare_identical && diff <= RESUME_TOL,
        &format!(
            "prepare rerun byte-identical {prepare_identical} ({} files); resumed vs uninterrupted epoch losses max|diff| {diff:e} (<= {RESUME_TOL:e})",
            first.len()
        ),
    );
}

// 9. mu and learning rate ---------------------------------------------------

const MU_TOL: f64 = 1e-12;

#[test]
fn criterion_09_mu_and_lr() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut worst = 0.0f64;
    for n in [1, 2, 7, 32, 144] {
        let b: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..1.0)).collect();
        let a: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..1.0)).collect();
        let (mut sb, mut sa) = (0.0, 0.0);
        for i in (0..n).rev() {
            sb += b[i];
            sa += a[i];
        }
        worst = worst.max((update_mu(&b, &a, 0.3) - sb / sa).abs());
    }
    let fallback = update_mu(&[0.4], &[0.0], 0.3) == 0.3;
    let cfg = TrainConfig::default();
    let endpoints = [1u64, 10, 3000, 123_457]
        .iter()
        .all(|&total| lr_at(0, total, &cfg) == 5e-5 && lr_at(total, total, &cfg) == 5e-7);
    verdict(
        9,
        "mu and lr",
        worst <= MU_TOL && fallback && endpoints,
        &format!(
            "update_mu max|diff| vs direct ratio {worst:.1e} (<= {MU_TOL:e}), zero-denominator fallback {fallback}, \
             lr_at endpoints exactly 5e-5 / 5e-7 {endpoints}"
        ),
    );
}
