//! Acceptance gate: nine end-to-end criteria, one test each, printing a
//! PASS line per criterion (visible under `--nocapture`).

use std::fs;
use std::time::Instant;

use deoccl_core::dataset::{
    batch_iter, generate_masks, ingest_session, split_sessions, DatasetSplit, HoldoutPolicy,
    LandmarkEngine, MaskSpec, Role, SyntheticLandmarks, DEFAULT_FILL,
};
use deoccl_core::imaging::{save_image, ImageTensor, RangeTag};
use deoccl_core::losses::{
    adv_loss_d, adv_loss_d_grad, adv_loss_g, adv_loss_g_grad, mask_loss, mask_loss_grad, rec_loss,
    rec_loss_grad, ssim_loss, ssim_loss_grad, LossWeights,
};
use deoccl_core::metrics::{masked_psnr, psnr, ssim};
use deoccl_core::network::{fuse_maps, init_network, ForwardMode, NetworkConfig};
use deoccl_core::nn::{GradStore, ParamGroup, ParamStore};
use deoccl_core::training::{
    default_schedule, load_checkpoint, save_checkpoint, scale_schedule, TrainConfig, Trainer,
};
use ndarray::{s, Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use tempfile::TempDir;

fn report(n: usize, name: &str) {
    println!("acceptance {n} ({name}): PASS");
}

fn check_rel(fd: f64, a: f64, tol: f64, what: &str) {
    if fd.abs() <= 1e-9 && a.abs() <= 1e-9 {
        return;
    }
    let rel = (fd - a).abs() / fd.abs().max(a.abs());
    assert!(rel < tol, "{what}: fd {fd} vs analytic {a} (rel {rel})");
}

fn face_image(size: usize, phase: f32) -> ImageTensor {
    let data = Array3::from_shape_fn((3, size, size), |(c, y, x)| {
        let fy = y as f32 / size as f32;
        let fx = x as f32 / size as f32;
        let v = 0.5
            + 0.25 * ((fx * 9.0 + phase + c as f32 * 0.7).sin())
            + 0.25 * ((fy * 7.0 - phase * 0.5).cos());
        v.clamp(0.0, 1.0)
    });
    ImageTensor::new(data, RangeTag::Unit).unwrap()
}

/// Two sessions of one subject, distinct appearance tags; the greater tag
/// becomes the unseen-appearance test session.
fn build_split(tmp: &TempDir, size: usize, train_n: usize, test_n: usize) -> DatasetSplit {
    let src1 = tmp.path().join("src1");
    let src2 = tmp.path().join("src2");
    fs::create_dir_all(&src1).unwrap();
    fs::create_dir_all(&src2).unwrap();
    for i in 0..train_n {
        save_image(&face_image(size, i as f32 * 0.9), &src1.join(format!("f{i:03}.png"))).unwrap();
    }
    for i in 0..test_n {
        save_image(&face_image(size, 40.0 + i as f32), &src2.join(format!("f{i:03}.png"))).unwrap();
    }
    let root = tmp.path().join("root");
    let m1 = ingest_session(&root, &src1, "sub", "s1", "aaa", size).unwrap();
    let m2 = ingest_session(&root, &src2, "sub", "s2", "zzz", size).unwrap();
    let engine = LandmarkEngine::new(Box::new(SyntheticLandmarks));
    generate_masks(&m1, &engine, &MaskSpec::default()).unwrap();
    generate_masks(&m2, &engine, &MaskSpec::default()).unwrap();
    split_sessions(vec![m1, m2], &HoldoutPolicy::LastTag).unwrap()
}

fn grad_config() -> NetworkConfig {
    NetworkConfig {
        image_size: 16,
        base_filters: 4,
        bottleneck_dim: 8,
        encoder_depth: 2,
        attention_site_size: 4,
        batch_norm: false,
        mask_input_channel: false,
    }
}

fn tiny_config() -> NetworkConfig {
    NetworkConfig {
        image_size: 16,
        base_filters: 2,
        bottleneck_dim: 4,
        encoder_depth: 2,
        attention_site_size: 4,
        batch_norm: true,
        mask_input_channel: false,
    }
}

fn toy_train_config(epochs: [usize; 6], seed: u64) -> TrainConfig {
    let mut schedule = default_schedule();
    for (stage, e) in schedule.iter_mut().zip(epochs) {
        stage.epochs = e;
    }
    let mut config = TrainConfig::new(schedule);
    config.batch_size = 2;
    config.seed = seed;
    config
}

#[test]
fn criterion_1_fusion_matches_scalar_oracle() {
    let t0 = Instant::now();
    let mut rng = ChaCha20Rng::seed_from_u64(101);
    for trial in 0..50 {
        let dims = (
            rng.random_range(1..3usize),
            rng.random_range(1..8usize),
            rng.random_range(1..12usize),
            rng.random_range(1..12usize),
        );
        let mut draw = || Array4::from_shape_fn(dims, |_| rng.random_range(-2.0..2.0f32));
        let (fe, fd, ae, ad) = (draw(), draw(), draw(), draw());
        let fused = fuse_maps(&fe, &fd, &ae, &ad);
        for b in 0..dims.0 {
            for c in 0..dims.1 {
                for y in 0..dims.2 {
                    for x in 0..dims.3 {
                        let i = [b, c, y, x];
                        // Same formula, plain scalar ops.
                        let exact32 = fe[i] * ae[i] + fd[i] * ad[i];
                        assert_eq!(fused[i], exact32, "trial {trial} at {i:?}");
                        let o64 = fe[i] as f64 * ae[i] as f64 + fd[i] as f64 * ad[i] as f64;
                        let scale =
                            (fe[i] as f64 * ae[i] as f64).abs() + (fd[i] as f64 * ad[i] as f64).abs();
                        let rel = (fused[i] as f64 - o64).abs() / scale.max(1e-12);
                        assert!(rel < 1e-6, "trial {trial} at {i:?}: rel {rel}");
                    }
                }
            }
        }

        let f64s = |a: &Array4<f32>| a.mapv(|v| v as f64);
        let fused64 = fuse_maps(&f64s(&fe), &f64s(&fd), &f64s(&ae), &f64s(&ad));
        for (i, v) in fused64.indexed_iter() {
            let o64 = fe[i] as f64 * ae[i] as f64 + fd[i] as f64 * ad[i] as f64;
            assert_eq!(*v, o64, "f64 path, trial {trial}");
        }
    }
    assert!(t0.elapsed().as_secs() < 10, "took {:?}", t0.elapsed());
    report(1, "fusion oracle");
}

#[test]
fn criterion_2_gradients_match_finite_differences() {
    let t0 = Instant::now();
    let mut rng = ChaCha20Rng::seed_from_u64(202);
    let dims = (2, 3, 16, 16);
    let probes = [0usize, 113, 379, 620, 901, 1218, 1355, 1533];
    let unflat = |flat: usize| {
        let per_b = dims.1 * dims.2 * dims.3;
        let per_c = dims.2 * dims.3;
        (flat / per_b, flat % per_b / per_c, flat % per_c / dims.3, flat % dims.3)
    };

    // Reconstruction L1, inputs kept apart so the sign never flips.
    let x: Array4<f64> = Array4::from_shape_fn(dims, |_| rng.random_range(0.2..1.0));
    let t: Array4<f64> = Array4::from_shape_fn(dims, |_| rng.random_range(-1.0..-0.2));
    let (_, g) = rec_loss_grad(&x, &t).unwrap();
    for &flat in &probes {
        let i = unflat(flat);
        let h = 1e-4;
        let mut xp = x.clone();
        xp[i] += h;
        let mut xm = x.clone();
        xm[i] -= h;
        let fd = (rec_loss(&xp, &t).unwrap() - rec_loss(&xm, &t).unwrap()) / (2.0 * h);
        check_rel(fd, g[i], 1e-4, &format!("rec d/dx[{i:?}]"));
    }

    // Masked L1 with the same separation; off-mask gradients are zero.
    let mask: Array4<f64> =
        Array4::from_shape_fn((dims.0, 1, dims.2, dims.3), |_| f64::from(rng.random_bool(0.5)));
    let (_, g) = mask_loss_grad(&x, &t, &mask).unwrap();
    for &flat in &probes {
        let i = unflat(flat);
        let h = 1e-4;
        let mut xp = x.clone();
        xp[i] += h;
        let mut xm = x.clone();
        xm[i] -= h;
        let fd = (mask_loss(&xp, &t, &mask).unwrap() - mask_loss(&xm, &t, &mask).unwrap()) / (2.0 * h);
        check_rel(fd, g[i], 1e-4, &format!("mask d/dx[{i:?}]"));
        if mask[(i.0, 0, i.2, i.3)] == 0.0 {
            assert_eq!(g[i], 0.0);
        }
    }

    // SSIM on unit-range images.
    let xu: Array4<f64> = Array4::from_shape_fn(dims, |_| rng.random_range(0.05..0.95));
    let tu: Array4<f64> = Array4::from_shape_fn(dims, |_| rng.random_range(0.05..0.95));
    let (_, g) = ssim_loss_grad(&xu, &tu).unwrap();
    for &flat in &probes {
        let i = unflat(flat);
        let h = 1e-5;
        let mut xp = xu.clone();
        xp[i] += h;
        let mut xm = xu.clone();
        xm[i] -= h;
        let fd = (ssim_loss(&xp, &tu).unwrap() - ssim_loss(&xm, &tu).unwrap()) / (2.0 * h);
        check_rel(fd, g[i], 1e-4, &format!("ssim d/dx[{i:?}]"));
    }

    // Adversarial terms, differentiated through the discriminator.
    let cfg = grad_config();
    let (model, mut ps) = init_network::<f64>(cfg.clone(), 211).unwrap();
    let xs: Array4<f64> = Array4::from_shape_fn(dims, |_| rng.random_range(-0.9..0.9));
    let xr: Array4<f64> = Array4::from_shape_fn(dims, |_| rng.random_range(-0.9..0.9));

    let (p_fake, c_fake) = model.discriminator_train(&mut ps, xs.clone()).unwrap();
    let (_, dp) = adv_loss_g_grad(&p_fake).unwrap();
    let mut sunk = GradStore::new();
    let dx = model.discriminator_backward(&ps, &c_fake, &dp, &mut sunk);
    let h = 1e-5;
    for &flat in &probes[..5] {
        let i = unflat(flat);
        let mut eval = |xq: &Array4<f64>| {
            let (p, _) = model.discriminator_train(&mut ps, xq.clone()).unwrap();
            adv_loss_g(&p).unwrap()
        };
        let mut xp = xs.clone();
        xp[i] += h;
        let mut xm = xs.clone();
        xm[i] -= h;
        let fd = (eval(&xp) - eval(&xm)) / (2.0 * h);
        check_rel(fd, dx[i], 1e-4, &format!("adv_g d/dx[{i:?}]"));
    }

    let (p_real, _) = model.discriminator_train(&mut ps, xr.clone()).unwrap();
    let (p_fake, c_fake) = model.discriminator_train(&mut ps, xs.clone()).unwrap();
    let (_, _, d_pf) = adv_loss_d_grad(&p_real, &p_fake).unwrap();
    let mut sunk = GradStore::new();
    let dx = model.discriminator_backward(&ps, &c_fake, &d_pf, &mut sunk);
    for &flat in &probes[..5] {
        let i = unflat(flat);
        let mut eval = |xq: &Array4<f64>| {
            let (p, _) = model.discriminator_train(&mut ps, xq.clone()).unwrap();
            adv_loss_d(&p_real, &p).unwrap()
        };
        let mut xp = xs.clone();
        xp[i] += h;
        let mut xm = xs.clone();
        xm[i] -= h;
        let fd = (eval(&xp) - eval(&xm)) / (2.0 * h);
        check_rel(fd, dx[i], 1e-4, &format!("adv_d d/dx[{i:?}]"));
    }

    // Full generator parameters under the complete weighted objective.
    let w = LossWeights::default();
    let tgt: Array4<f64> = Array4::from_shape_fn(dims, |_| rng.random_range(-0.9..0.9));
    let xin: Array4<f64> = Array4::from_shape_fn(dims, |_| rng.random_range(-0.9..0.9));
    let m: Array4<f64> =
        Array4::from_shape_fn((dims.0, 1, dims.2, dims.3), |_| f64::from(rng.random_bool(0.5)));
    let tgt_unit = tgt.mapv(|v| (v + 1.0) * 0.5);

    let objective = |ps: &mut ParamStore<f64>| -> f64 {
        let (y, _) = model.generator_train(ps, xin.clone(), ForwardMode::Attention).unwrap();
        let (p, _) = model.discriminator_train(ps, y.clone()).unwrap();
        let y_unit = y.mapv(|v| (v + 1.0) * 0.5);
        w.lambda_rec * rec_loss(&y, &tgt).unwrap()
            + w.lambda_adv * adv_loss_g(&p).unwrap()
            + w.lambda_ssim * ssim_loss(&y_unit, &tgt_unit).unwrap()
            + w.lambda_mask * mask_loss(&y, &tgt, &m).unwrap()
    };

    let (y, cache) = model.generator_train(&mut ps, xin.clone(), ForwardMode::Attention).unwrap();
    let mut dy = Array4::<f64>::zeros(dims);
    let (_, g) = rec_loss_grad(&y, &tgt).unwrap();
    dy.scaled_add(w.lambda_rec, &g);
    let (_, g) = mask_loss_grad(&y, &tgt, &m).unwrap();
    dy.scaled_add(w.lambda_mask, &g);
    let y_unit = y.mapv(|v| (v + 1.0) * 0.5);
    let (_, g) = ssim_loss_grad(&y_unit, &tgt_unit).unwrap();
    dy.scaled_add(0.5 * w.lambda_ssim, &g);
    let (p, c_fake) = model.discriminator_train(&mut ps, y.clone()).unwrap();
    let (_, dp) = adv_loss_g_grad(&p).unwrap();
    let mut sunk = GradStore::new();
    let dy_adv = model.discriminator_backward(&ps, &c_fake, &dp, &mut sunk);
    dy.scaled_add(w.lambda_adv, &dy_adv);
    let mut gen_grads = GradStore::new();
    model.generator_backward(&ps, cache, dy, &mut gen_grads);

    let coords = |len: usize| {
        let mut v = vec![0, len / 3, 2 * len / 3, len - 1];
        v.sort_unstable();
        v.dedup();
        v
    };
    let mut checked = 0usize;
    let names: Vec<String> = gen_grads.names().cloned().collect();
    for pname in &names {
        let g = gen_grads.get(pname).unwrap().clone();
        for flat in coords(g.len()) {
            let orig = ps.get(pname).as_slice().unwrap()[flat];
            ps.get_mut(pname).as_slice_mut().unwrap()[flat] = orig + h;
            let lp = objective(&mut ps);
            ps.get_mut(pname).as_slice_mut().unwrap()[flat] = orig - h;
            let lm = objective(&mut ps);
            ps.get_mut(pname).as_slice_mut().unwrap()[flat] = orig;
            let fd = (lp - lm) / (2.0 * h);
            check_rel(fd, g.as_slice().unwrap()[flat], 1e-4, &format!("gen {pname}[{flat}]"));
            checked += 1;
        }
    }

    // Discriminator parameters under its own objective.
    let d_objective = |ps: &mut ParamStore<f64>| -> f64 {
        let (pr, _) = model.discriminator_train(ps, xr.clone()).unwrap();
        let (pf, _) = model.discriminator_train(ps, xs.clone()).unwrap();
        adv_loss_d(&pr, &pf).unwrap()
    };
    let (pr, c_real) = model.discriminator_train(&mut ps, xr.clone()).unwrap();
    let (pf, c_fake) = model.discriminator_train(&mut ps, xs.clone()).unwrap();
    let (_, d_pr, d_pf) = adv_loss_d_grad(&pr, &pf).unwrap();
    let mut d_grads = GradStore::new();
    model.discriminator_backward(&ps, &c_real, &d_pr, &mut d_grads);
    model.discriminator_backward(&ps, &c_fake, &d_pf, &mut d_grads);
    let names: Vec<String> = d_grads.names().cloned().collect();
    for pname in &names {
        let g = d_grads.get(pname).unwrap().clone();
        for flat in coords(g.len()) {
            let orig = ps.get(pname).as_slice().unwrap()[flat];
            ps.get_mut(pname).as_slice_mut().unwrap()[flat] = orig + h;
            let lp = d_objective(&mut ps);
            ps.get_mut(pname).as_slice_mut().unwrap()[flat] = orig - h;
            let lm = d_objective(&mut ps);
            ps.get_mut(pname).as_slice_mut().unwrap()[flat] = orig;
            let fd = (lp - lm) / (2.0 * h);
            check_rel(fd, g.as_slice().unwrap()[flat], 1e-4, &format!("disc {pname}[{flat}]"));
            checked += 1;
        }
    }

    assert!(checked >= 100, "only {checked} parameter coordinates probed");
    assert!(t0.elapsed().as_secs() < 300, "took {:?}", t0.elapsed());
    report(2, "gradient checks");
}

#[test]
fn criterion_3_mask_loss_algebra() {
    let mut rng = ChaCha20Rng::seed_from_u64(303);
    for trial in 0..100 {
        let dims = (
            rng.random_range(1..3usize),
            rng.random_range(1..4usize),
            rng.random_range(4..10usize),
            rng.random_range(4..10usize),
        );
        let x: Array4<f64> = Array4::from_shape_fn(dims, |_| rng.random_range(-1.0..1.0));
        let t: Array4<f64> = Array4::from_shape_fn(dims, |_| rng.random_range(-1.0..1.0));
        let mdims = (dims.0, 1, dims.2, dims.3);

        let full = Array4::<f64>::ones(mdims);
        assert_eq!(
            mask_loss(&x, &t, &full).unwrap(),
            rec_loss(&x, &t).unwrap(),
            "trial {trial}: full mask"
        );

        let zero = Array4::<f64>::zeros(mdims);
        assert_eq!(mask_loss(&x, &t, &zero).unwrap(), 0.0, "trial {trial}: zero mask");

        let mask: Array4<f64> = Array4::from_shape_fn(mdims, |_| f64::from(rng.random_bool(0.5)));
        let before = mask_loss(&x, &t, &mask).unwrap();
        let off: Vec<_> = mask
            .indexed_iter()
            .filter(|(_, &v)| v == 0.0)
            .map(|(i, _)| i)
            .collect();
        let mut xp = x.clone();
        for _ in 0..3 {
            if off.is_empty() {
                break;
            }
            let (b, _, y, xp_) = off[rng.random_range(0..off.len())];
            let c = rng.random_range(0..dims.1);
            xp[(b, c, y, xp_)] += rng.random_range(-0.5..0.5);
        }
        assert_eq!(
            mask_loss(&xp, &t, &mask).unwrap(),
            before,
            "trial {trial}: off-mask perturbation leaked"
        );
    }
    report(3, "mask-loss algebra");
}

#[test]
fn criterion_4_freeze_unfreeze_contract() {
    let tmp = TempDir::new().unwrap();
    let split = build_split(&tmp, 16, 4, 2);
    let (model, _) = init_network::<f32>(tiny_config(), 404).unwrap();
    // Step-1 stages plus the adversarial-free first step-2 stage.
    let mut config = toy_train_config([1; 6], 404);
    config.schedule.truncate(4);
    let trainer = Trainer::new(&model, config).unwrap();
    let mut state = trainer.init_state();

    let attn0 = state.params.group_fingerprint(ParamGroup::Attention);
    trainer.finetune_user(&mut state, &split, None).unwrap();
    assert_eq!(
        state.params.group_fingerprint(ParamGroup::Attention),
        attn0,
        "attention moved during step 1"
    );

    let disc0 = state.params.group_fingerprint(ParamGroup::Discriminator);
    trainer.train_occluded(&mut state, &split, None).unwrap();
    assert_ne!(
        state.params.group_fingerprint(ParamGroup::Attention),
        attn0,
        "attention frozen during step 2"
    );
    assert_eq!(
        state.params.group_fingerprint(ParamGroup::Discriminator),
        disc0,
        "discriminator moved while the adversarial loss was inactive"
    );
    report(4, "freeze/unfreeze contract");
}

#[test]
fn criterion_5_overfit_smoke() {
    let t0 = Instant::now();
    let tmp = TempDir::new().unwrap();
    let split = build_split(&tmp, 64, 8, 2);
    let cfg = NetworkConfig {
        image_size: 64,
        base_filters: 8,
        bottleneck_dim: 99,
        encoder_depth: 4,
        attention_site_size: 16,
        batch_norm: true,
        mask_input_channel: false,
    };
    let (model, _) = init_network::<f32>(cfg, 2024).unwrap();
    // The default 1300-epoch schedule scaled so that, at one batch per
    // epoch, the run totals ~2000 generator steps.
    let schedule = scale_schedule(&default_schedule(), 2000.0 / 1300.0).unwrap();
    let mut config = TrainConfig::new(schedule);
    config.batch_size = 8;
    config.learning_rate = 1e-3;
    config.seed = 2024;
    let trainer = Trainer::new(&model, config).unwrap();
    let mut state = trainer.init_state();
    trainer.finetune_user(&mut state, &split, None).unwrap();
    trainer.train_occluded(&mut state, &split, None).unwrap();
    assert!(state.history.len() >= 2000, "only {} steps ran", state.history.len());

    let first = state.history.first().unwrap().breakdown.rec.unwrap();
    let last = state.history.last().unwrap().breakdown.rec.unwrap();
    assert!(
        last <= 0.2 * first,
        "reconstruction loss fell {first:.4} -> {last:.4}, above the 0.2x bound"
    );

    let mut batches = batch_iter(&split, Role::Train, 8, 0, 0, DEFAULT_FILL).unwrap();
    let samples = batches.next().unwrap().unwrap();
    let mut x = Array4::<f32>::zeros((samples.len(), 3, 64, 64));
    for (i, smp) in samples.iter().enumerate() {
        x.slice_mut(s![i, .., .., ..]).assign(smp.occluded.data());
    }
    let (y, _) = model.generator_eval(&state.params, &x, ForwardMode::Attention).unwrap();
    let mut total = 0.0;
    for (i, smp) in samples.iter().enumerate() {
        let rec =
            ImageTensor::new(y.slice(s![i, .., .., ..]).to_owned(), RangeTag::Signed).unwrap();
        total += masked_psnr(&rec, &smp.ground_truth, &smp.mask).unwrap();
    }
    let mean_psnr = total / samples.len() as f64;
    assert!(mean_psnr >= 22.0, "masked psnr {mean_psnr:.2} dB below 22 dB");
    assert!(t0.elapsed().as_secs() < 900, "took {:?}", t0.elapsed());
    report(5, "overfit smoke");
}

/// Scalar-loop SSIM written from the formula, sharing no code with the
/// library implementation.
fn oracle_ssim(a: &ImageTensor, b: &ImageTensor) -> f64 {
    let win = 11usize;
    let sigma = 1.5f64;
    let (c1, c2) = (0.01f64 * 0.01, 0.03f64 * 0.03);
    let mut k = [[0f64; 11]; 11];
    let mut ksum = 0.0;
    for (i, row) in k.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let dy = i as f64 - 5.0;
            let dx = j as f64 - 5.0;
            *v = (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp();
            ksum += *v;
        }
    }
    for row in k.iter_mut() {
        for v in row.iter_mut() {
            *v /= ksum;
        }
    }
    let (nc, h, w) = a.data().dim();
    let mut total = 0.0;
    for c in 0..nc {
        let mut csum = 0.0;
        for oy in 0..=(h - win) {
            for ox in 0..=(w - win) {
                let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..win {
                    for j in 0..win {
                        let pa = a.data()[(c, oy + i, ox + j)] as f64;
                        let pb = b.data()[(c, oy + i, ox + j)] as f64;
                        let kv = k[i][j];
                        mx += kv * pa;
                        my += kv * pb;
                        xx += kv * pa * pa;
                        yy += kv * pb * pb;
                        xy += kv * pa * pb;
                    }
                }
                let (sxx, syy, sxy) = (xx - mx * mx, yy - my * my, xy - mx * my);
                csum += ((2.0 * mx * my + c1) * (2.0 * sxy + c2))
                    / ((mx * mx + my * my + c1) * (sxx + syy + c2));
            }
        }
        total += csum / ((h - win + 1) * (w - win + 1)) as f64;
    }
    total / nc as f64
}

#[test]
fn criterion_6_metric_oracles() {
    let mut rng = ChaCha20Rng::seed_from_u64(606);
    let mut random_image = |size: usize| {
        let data = Array3::from_shape_fn((3, size, size), |_| rng.random_range(0.0..1.0f32));
        ImageTensor::new(data, RangeTag::Unit).unwrap()
    };

    for img in [face_image(32, 1.0), random_image(32)] {
        let (v, _) = ssim(&img, &img).unwrap();
        assert!((v - 1.0).abs() <= 1e-6, "self-ssim {v}");
    }

    for pair in 0..20 {
        let a = random_image(32);
        let b = random_image(32);
        let (ab, _) = ssim(&a, &b).unwrap();
        let (ba, _) = ssim(&b, &a).unwrap();
        assert!((ab - ba).abs() <= 1e-9, "pair {pair}: asymmetry {ab} vs {ba}");
        assert!((-1.0..=1.0).contains(&ab), "pair {pair}: ssim {ab} out of range");
        let oracle = oracle_ssim(&a, &b);
        assert!((ab - oracle).abs() <= 1e-6, "pair {pair}: {ab} vs oracle {oracle}");
    }

    // Constant 0.1 difference: MSE 0.01, hence 10*log10(1/0.01) = 20 dB.
    let flat = |v: f32| {
        ImageTensor::new(Array3::from_elem((3, 24, 24), v), RangeTag::Unit).unwrap()
    };
    let p = psnr(&flat(0.25), &flat(0.35)).unwrap();
    assert!((p - 20.0).abs() < 1e-5, "psnr {p}");

    let base = flat(0.5);
    let noise = Array3::from_shape_fn((3, 24, 24), |_| rng.random_range(-1.0..1.0f32));
    let mut prev = f64::INFINITY;
    for amp in [0.05f32, 0.1, 0.2, 0.3, 0.45] {
        let noisy = ImageTensor::new(
            base.data() + &noise.mapv(|v| v * amp),
            RangeTag::Unit,
        )
        .unwrap();
        let p = psnr(&base, &noisy).unwrap();
        assert!(p < prev, "psnr not strictly decreasing at amplitude {amp}: {p} vs {prev}");
        prev = p;
    }
    report(6, "metric oracles");
}

#[test]
fn criterion_7_determinism_and_resume() {
    let tmp = TempDir::new().unwrap();
    let split = build_split(&tmp, 16, 4, 2);
    let (model, _) = init_network::<f32>(tiny_config(), 707).unwrap();

    let run = || {
        let trainer = Trainer::new(&model, toy_train_config([2, 1, 1, 1, 1, 1], 707)).unwrap();
        let mut state = trainer.init_state();
        trainer.finetune_user(&mut state, &split, None).unwrap();
        trainer.train_occluded(&mut state, &split, None).unwrap();
        (state.params.fingerprint(), state.history)
    };
    let (fp_a, hist_a) = run();
    let (fp_b, hist_b) = run();
    assert!(hist_a.len() >= 10);
    assert_eq!(hist_a[..10], hist_b[..10], "first 10 loss rows differ");
    assert_eq!(hist_a, hist_b);
    assert_eq!(fp_a, fp_b);

    // Interrupt at the step-1/step-2 boundary and resume from disk.
    let trainer = Trainer::new(&model, toy_train_config([2, 1, 1, 1, 1, 1], 707)).unwrap();
    let mut state = trainer.init_state();
    trainer.finetune_user(&mut state, &split, None).unwrap();
    let ckpt = tmp.path().join("boundary.bin");
    save_checkpoint(&state, model.config(), &ckpt).unwrap();
    let mut resumed = load_checkpoint(&ckpt, model.config()).unwrap();
    trainer.train_occluded(&mut resumed, &split, None).unwrap();
    assert_eq!(resumed.params.fingerprint(), fp_a, "resumed run diverged");
    report(7, "determinism and resume");
}

#[test]
fn criterion_8_dataset_invariants() {
    let tmp = TempDir::new().unwrap();
    let split = build_split(&tmp, 16, 8, 3);

    let train_sessions: Vec<&str> =
        split.sessions(Role::Train).iter().map(|m| m.session_id.as_str()).collect();
    let test_sessions: Vec<&str> =
        split.sessions(Role::Test).iter().map(|m| m.session_id.as_str()).collect();
    assert!(!test_sessions.is_empty());
    for sid in &test_sessions {
        assert!(!train_sessions.contains(sid), "session {sid} in both splits");
    }
    let train_tags: Vec<&str> =
        split.sessions(Role::Train).iter().map(|m| m.appearance_tag.as_str()).collect();
    for m in split.sessions(Role::Test) {
        assert!(
            !train_tags.contains(&m.appearance_tag.as_str()),
            "test appearance {} seen in training",
            m.appearance_tag
        );
    }

    let fill = DEFAULT_FILL;
    let collect_ids = |epoch: u64| -> Vec<String> {
        let mut ids = Vec::new();
        for batch in batch_iter(&split, Role::Train, 3, 42, epoch, fill).unwrap() {
            for smp in batch.unwrap() {
                assert!(smp.mask.area() > 0, "{}: empty mask", smp.frame_id);
                let gt = smp.ground_truth.data();
                let occ = smp.occluded.data();
                let m = smp.mask.data();
                for ((c, y, x), &g) in gt.indexed_iter() {
                    if m[(0, y, x)] == 0.0 {
                        assert_eq!(occ[(c, y, x)], g, "{}: off-mask pixel edited", smp.frame_id);
                    } else {
                        assert_eq!(occ[(c, y, x)], fill, "{}: fill mismatch", smp.frame_id);
                    }
                }
                ids.push(smp.frame_id);
            }
        }
        ids
    };
    let e0 = collect_ids(0);
    let e1 = collect_ids(1);
    assert_eq!(e0.len(), split.frame_total(Role::Train));
    let mut s0 = e0.clone();
    let mut s1 = e1.clone();
    s0.sort();
    s1.sort();
    assert_eq!(s0, s1, "epochs cover different frame sets");
    s0.dedup();
    assert_eq!(s0.len(), e0.len(), "duplicate frames within an epoch");
    assert_ne!(e0, e1, "shuffle did not reorder between epochs");
    report(8, "dataset invariants");
}

#[test]
fn criterion_9_schedule_fidelity() {
    let s = default_schedule();
    assert_eq!(s.len(), 6);
    let epochs: Vec<usize> = s.iter().map(|x| x.epochs).collect();
    assert_eq!(epochs, [300, 100, 300, 300, 100, 200]);
    let steps: Vec<u8> = s.iter().map(|x| x.step).collect();
    assert_eq!(steps, [1, 1, 1, 2, 2, 2]);

    let actives: Vec<(bool, bool, bool, bool)> =
        s.iter().map(|x| (x.active.rec, x.active.adv, x.active.ssim, x.active.mask)).collect();
    assert_eq!(
        actives,
        [
            (true, false, false, false),
            (true, true, false, false),
            (true, true, true, false),
            (true, false, false, true),
            (true, true, false, true),
            (true, true, true, true),
        ]
    );
    for stage in &s[..3] {
        assert_eq!(stage.mode, ForwardMode::Bypass);
        assert!(!stage.trainable.contains(&ParamGroup::Attention));
    }
    for stage in &s[3..] {
        assert_eq!(stage.mode, ForwardMode::Attention);
        assert!(stage.trainable.contains(&ParamGroup::Attention));
    }
    report(9, "schedule fidelity");
}
