//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any failure.

use std::f64::consts::PI;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::sync::Arc;
use std::time::{Duration, Instant};

use candle_core::{DType, Tensor, Var};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use unshadow_core::dataset::{generate_sample, prepare_sample, DatasetConfig, PreparedSample, ShadowGtConfig, TrainingSample};
use unshadow_core::eval::{median_filter_depth, ransac_plane_fit, real_shadow_gt, Baseline, RansacConfig};
use unshadow_core::inpaint::DiffusionFill;
use unshadow_core::render::envmap::EnvironmentMap;
use unshadow_core::render::geometry::{GroundPlane, LocalShape, Object};
use unshadow_core::render::{render_world, Camera, Lights, PlaneAlbedo, RenderConfig, ShadeMode, World, V3};
use unshadow_core::scene::{generate_scene, CameraSpec, PointLight, Primitive, SceneConfig};
use unshadow_core::{ImageBuffer, MaskImage};
use unshadow_nn::evaluate::{evaluate, Method};
use unshadow_nn::losses::*;
use unshadow_nn::pipeline::{final_composite, lighting_composite, run_pipeline, ModelConfig, PipelineInput, PipelineState};
use unshadow_nn::tensor::{device, image_to_tensor, masks_to_tensor, scalar, tensor_to_image};
use unshadow_nn::train::{train, RunOptions, Stage, TrainConfig};

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

// ---------------------------------------------------------------- scene data

fn render_samples(n: usize, base_seed: u64) -> Vec<TrainingSample> {
    let scene_cfg = SceneConfig::default();
    let cfg = DatasetConfig::default();
    let mut out: Vec<TrainingSample> = Vec::with_capacity(n);
    let mut next = base_seed;
    while out.len() < n {
        let seeds: Vec<u64> = (next..next + (n - out.len()) as u64).collect();
        next += seeds.len() as u64;
        let batch: Vec<Option<TrainingSample>> = seeds
            .par_iter()
            .map(|&seed| {
                let scene = generate_scene(seed, &scene_cfg).ok()?;
                generate_sample(&scene, &format!("scene_{seed}"), &cfg).ok()
            })
            .collect();
        out.extend(batch.into_iter().flatten());
    }
    out
}

fn prepare(samples: &[TrainingSample]) -> Vec<PreparedSample> {
    samples.iter().map(|s| prepare_sample(s, None, &ShadowGtConfig::default()).unwrap()).collect()
}

// ---------------------------------------------------------------- 1 renderer

fn down_camera(height: f64, half_width: f64, resolution: usize) -> CameraSpec {
    CameraSpec {
        eye: [0.0, height, 0.0],
        look_at: [0.0, 0.0, 0.0],
        fov: 2.0 * (half_width / height).atan(),
        resolution,
    }
}

fn plane_world(albedo: f64, objects: Vec<Object>) -> World {
    World {
        plane: Some(GroundPlane {
            half_extent: 2.0,
            albedo: PlaneAlbedo::Constant(V3::repeat(albedo)),
        }),
        objects,
    }
}

fn lights(radiance: f64, point: Option<PointLight>) -> Lights {
    Lights {
        env: Arc::new(EnvironmentMap::constant([radiance; 3])),
        point,
    }
}

fn renderer_oracles() -> Check {
    let start = Instant::now();
    let cam = Camera::new(&down_camera(1.0, 0.8, 64), 64, 64).map_err(|e| e.to_string())?;
    let cfg = RenderConfig {
        samples_per_pixel: 64,
        shadow_samples: 64,
        seed: 3,
        resolution: 0,
    };
    let img = render_world(&plane_world(0.5, vec![]), &lights(1.0, None), &cam, &cfg, ShadeMode::Radiance).map_err(|e| e.to_string())?;
    let worst = img.data().iter().map(|&v| ((v - 0.5) / 0.5).abs()).fold(0.0f32, f32::max);
    ensure(worst <= 0.02, format!("plane radiance off by {:.2}%", 100.0 * worst))?;

    let (r, h, big_h) = (0.3, 1.0, 4.0);
    let disk = Object::new(
        LocalShape::Parts(vec![(Primitive::Disk { radius: r, height: h }, V3::zeros())]),
        0.0,
        1.0,
        V3::zeros(),
        V3::repeat(1.0),
    );
    let n = 256;
    let half = 0.6;
    let cam = Camera::new(&down_camera(0.8, half, n), n, n).map_err(|e| e.to_string())?;
    let light = PointLight {
        position: [0.0, big_h, 0.0],
        intensity: [10.0; 3],
    };
    let cfg = RenderConfig {
        samples_per_pixel: 16,
        shadow_samples: 16,
        seed: 1,
        resolution: 0,
    };
    let img = render_world(&plane_world(1.0, vec![disk]), &lights(0.0, Some(light)), &cam, &cfg, ShadeMode::Radiance).map_err(|e| e.to_string())?;
    let pixel = 2.0 * half / n as f64;
    let mut dark = 0usize;
    for y in 0..n {
        for x in 0..n {
            let px = (x as f64 + 0.5) * pixel - half;
            let pz = (y as f64 + 0.5) * pixel - half;
            let d2 = px * px + pz * pz + big_h * big_h;
            let lit = 10.0 * (big_h / d2.sqrt()) / d2 / PI;
            dark += ((img.get(y, x, 0) as f64) < 0.5 * lit) as usize;
        }
    }
    let measured = (dark as f64 * pixel * pixel / PI).sqrt();
    let expected = r * big_h / (big_h - h);
    let off = (measured - expected).abs() / pixel;
    ensure(off <= 1.0, format!("shadow radius off by {off:.2} px"))?;
    let t = start.elapsed();
    ensure(t < Duration::from_secs(120), format!("took {t:?}"))?;
    Ok(format!("plane within {:.2}%, disk radius within {off:.2} px, {:.1}s", 100.0 * worst, t.as_secs_f64()))
}

// ---------------------------------------------------------------- 2 dataset

fn dataset_identities(samples: &[TrainingSample]) -> Check {
    ensure(samples.len() >= 50, "need 50 scenes")?;
    let mut worst_max = 0.0f32;
    let mut worst_mean = 0.0f32;
    for s in &samples[..50] {
        let p = prepare_sample(s, None, &ShadowGtConfig::default()).map_err(|e| e.to_string())?;
        ensure(s.m_o.intersect(&s.m_r).unwrap().is_empty(), format!("{}: M_o and M_r overlap", s.scene_id))?;
        for y in 0..p.i.height() {
            for x in 0..p.i.width() {
                let m = p.m_r.get(y, x);
                for c in 0..3 {
                    let want = (m * s.t_hat.get(y, x, c) + (1.0 - m)) * p.l.get(y, x, c);
                    ensure(p.i.get(y, x, c) == want, format!("{}: composition differs at ({y},{x},{c})", s.scene_id))?;
                }
            }
        }
        let (a, b) = (p.l.masked_max(&p.m_r_prime).unwrap(), p.l_prime.masked_max(&p.m_r_prime).unwrap());
        for (x, y) in a.iter().zip(&b) {
            worst_max = worst_max.max((x.max(*y) - 1.0).abs());
        }
        for v in p.i.scale_channels(&p.norm.input_scale).masked_mean(&p.m_r).unwrap() {
            worst_mean = worst_mean.max((v - 0.5).abs());
        }
    }
    ensure(worst_max <= 1e-6, format!("receiver max off by {worst_max:e}"))?;
    ensure(worst_mean <= 1e-6, format!("receiver mean off by {worst_mean:e}"))?;
    Ok(format!("50 scenes exact; max dev {worst_max:.1e}, mean dev {worst_mean:.1e}"))
}

// ---------------------------------------------------------------- 3 and 4 losses

const N: usize = 2;
const S: usize = 8;

fn rand_t(rng: &mut ChaCha8Rng, c: usize, lo: f64, hi: f64) -> Tensor {
    let v: Vec<f64> = (0..N * c * S * S).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_vec(v, (N, c, S, S), &device()).unwrap()
}

fn rand_mask(rng: &mut ChaCha8Rng, p: f64) -> Tensor {
    let v: Vec<f64> = (0..N * S * S).map(|_| (rng.random::<f64>() < p) as u8 as f64).collect();
    Tensor::from_vec(v, (N, 1, S, S), &device()).unwrap()
}

fn constant(c: usize, v: f64) -> Tensor {
    (Tensor::ones((N, c, S, S), DType::F64, &device()).unwrap() * v).unwrap()
}

fn val(t: &Tensor) -> f64 {
    scalar(t).unwrap()
}

fn flat(t: &Tensor) -> Vec<f64> {
    t.flatten_all().unwrap().to_vec1().unwrap()
}

fn like(x: &Tensor, v: Vec<f64>) -> Tensor {
    Tensor::from_vec(v, x.shape(), &device()).unwrap()
}

/// Largest relative error between autograd and central differences.
fn gradient_error(x0: &Tensor, f: &dyn Fn(&Tensor) -> Tensor) -> f64 {
    let var = Var::from_tensor(x0).unwrap();
    let g = f(var.as_tensor()).backward().unwrap();
    let analytic = flat(g.get(var.as_tensor()).unwrap());
    let base = flat(x0);
    let eps = 1e-4;
    let mut worst = 0.0f64;
    for k in 0..base.len() {
        let (mut p, mut m) = (base.clone(), base.clone());
        p[k] += eps;
        m[k] -= eps;
        let numeric = (val(&f(&like(x0, p))) - val(&f(&like(x0, m)))) / (2.0 * eps);
        let scale = analytic[k].abs().max(numeric.abs()).max(1e-5);
        worst = worst.max((analytic[k] - numeric).abs() / scale);
    }
    worst
}

fn masking_exact(x0: &Tensor, mask: &Tensor, rng: &mut ChaCha8Rng, f: &dyn Fn(&Tensor) -> Tensor) -> bool {
    let (_, c, h, w) = x0.dims4().unwrap();
    let m = flat(mask);
    let v: Vec<f64> = flat(x0)
        .into_iter()
        .enumerate()
        .map(|(k, x)| {
            let (n, pix) = (k / (c * h * w), k % (h * w));
            if m[n * h * w + pix] == 0.0 {
                x + rng.random_range(0.05..0.3)
            } else {
                x
            }
        })
        .collect();
    val(&f(x0)).to_bits() == val(&f(&like(x0, v))).to_bits()
}

fn loss_checks() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let w = LossWeights::default();
    let m = rand_mask(&mut rng, 0.7);
    let m_o = ((1.0 - &m).unwrap() * rand_mask(&mut rng, 0.6)).unwrap();
    let m_rp = (&m + &m_o).unwrap();
    let s_hat = rand_t(&mut rng, 1, 0.0, 1.0);
    let s0 = rand_t(&mut rng, 1, 0.05, 0.95);
    let l_hat = rand_t(&mut rng, 3, 0.2, 1.0);
    let t_hat = rand_t(&mut rng, 3, 0.2, 1.0);
    let i = rand_t(&mut rng, 3, 0.1, 1.0);
    let l0 = rand_t(&mut rng, 3, 0.2, 1.0);
    let t0 = rand_t(&mut rng, 3, 0.2, 1.0);

    let grads: Vec<(&str, &Tensor, Box<dyn Fn(&Tensor) -> Tensor>)> = vec![
        ("shadow", &s0, Box::new(|s| loss_shadow_seg(s, &s_hat, &m, &w).unwrap())),
        ("intrinsic/L", &l0, Box::new(|l| loss_intrinsic(l, &t0, &l_hat, &t_hat, &i, &m, &w).unwrap())),
        ("intrinsic/T", &t0, Box::new(|t| loss_intrinsic(&l0, t, &l_hat, &t_hat, &i, &m, &w).unwrap())),
        ("exclusion", &t0, Box::new(|t| exclusion_loss(t, &l0, &m, LEVELS).unwrap())),
        ("pyramid", &l0, Box::new(|l| pyramid_loss(l, &l_hat, &m, LEVELS).unwrap())),
        ("recomposition", &l0, Box::new(|l| recomposition_loss(&i, l, &t0, &m).unwrap())),
        ("sparse gradient", &l0, Box::new(|l| sparse_gradient_prior(l, &m).unwrap())),
        ("lighting/removal", &l0, Box::new(|l| loss_lighting(l, &t0, &l_hat, &m, &m_o, &w).unwrap())),
        ("lighting/inpaint", &t0, Box::new(|l| loss_lighting(&l0, l, &l_hat, &m, &m_o, &w).unwrap())),
        ("output", &l0, Box::new(|l| loss_output(&i, l, &t0, &m_rp, &w).unwrap())),
    ];
    let mut worst = 0.0f64;
    for (name, x0, f) in &grads {
        let e = gradient_error(x0, f.as_ref());
        ensure(e <= 1e-3, format!("{name}: relative gradient error {e:e}"))?;
        worst = worst.max(e);
    }

    let binary = like(&s_hat, flat(&s_hat).into_iter().map(|v| if v > 0.5 { 1.0 - 1e-4 } else { 1e-4 }).collect());
    let lt = (&l_hat * &t_hat).unwrap();
    let fixed = [
        ("shadow", val(&loss_shadow_seg(&binary, &binary, &m, &w).unwrap())),
        ("intrinsic", val(&loss_intrinsic(&constant(3, 0.6), &t_hat, &constant(3, 0.6), &t_hat, &(constant(3, 0.6) * &t_hat).unwrap(), &m, &w).unwrap())),
        ("recomposition", val(&recomposition_loss(&lt, &l_hat, &t_hat, &m).unwrap())),
        ("lighting", val(&loss_lighting(&l_hat, &l_hat, &l_hat, &m, &m_o, &w).unwrap())),
        ("output", val(&loss_output(&lt, &l_hat, &t_hat, &m_rp, &w).unwrap())),
        ("sparse gradient", val(&sparse_gradient_prior(&constant(3, 0.4), &m).unwrap())),
    ];
    for (name, v) in fixed {
        ensure(v.abs() < 1e-3, format!("{name} at fixed point: {v:e}"))?;
    }

    let receiver = (&m * (1.0 - &m_o).unwrap()).unwrap();
    let masked: Vec<(&str, &Tensor, &Tensor, Box<dyn Fn(&Tensor) -> Tensor>)> = vec![
        ("shadow", &s0, &m, Box::new(|s| loss_shadow_seg(s, &s_hat, &m, &w).unwrap())),
        ("intrinsic/L", &l0, &m, Box::new(|l| loss_intrinsic(l, &t0, &l_hat, &t_hat, &i, &m, &w).unwrap())),
        ("intrinsic/T", &t0, &m, Box::new(|t| loss_intrinsic(&l0, t, &l_hat, &t_hat, &i, &m, &w).unwrap())),
        ("lighting/removal", &l0, &receiver, Box::new(|l| loss_lighting(l, &t0, &l_hat, &m, &m_o, &w).unwrap())),
        ("lighting/inpaint", &t0, &m_o, Box::new(|l| loss_lighting(&l0, l, &l_hat, &m, &m_o, &w).unwrap())),
        ("output", &l0, &m_rp, Box::new(|l| loss_output(&i, l, &t0, &m_rp, &w).unwrap())),
    ];
    for (name, x0, mask, f) in &masked {
        ensure(masking_exact(x0, mask, &mut rng, f.as_ref()), format!("{name}: loss moved outside its mask"))?;
    }
    Ok(format!("{} gradient checks (worst {worst:.1e}), fixed points, masking exact", grads.len()))
}

fn exclusion_pyramid_checks() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let ones = constant(1, 1.0);
    let t = rand_t(&mut rng, 3, 0.1, 1.0);
    let c = constant(3, 0.7);
    let e1 = val(&exclusion_loss(&t, &c, &ones, LEVELS).unwrap());
    let e2 = val(&exclusion_loss(&c, &t, &ones, LEVELS).unwrap());
    ensure(e1 == 0.0 && e2 == 0.0, format!("exclusion with a constant: {e1}, {e2}"))?;
    let same = val(&pyramid_loss(&t, &t, &ones, LEVELS).unwrap());
    ensure(same == 0.0, format!("pyramid of identical images: {same}"))?;
    let offset = 0.1;
    let got = val(&pyramid_loss(&(&t + offset).unwrap(), &t, &ones, LEVELS).unwrap());
    let closed = LEVELS as f64 * offset * offset;
    ensure((got - closed).abs() < 1e-12, format!("constant offset: {got} vs {closed}"))?;
    Ok(format!("exclusion 0 with constants; pyramid offset {got:.6} = {closed:.6}"))
}

// ---------------------------------------------------------------- 5 composite

fn composite_exactness() -> Check {
    let op = DiffusionFill::default();
    let mut checked = 0usize;
    for seed in 0..6u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = 16;
        let img = |rng: &mut ChaCha8Rng| ImageBuffer::from_fn(s, s, 3, |_, _, _| rng.random_range(0.05f32..1.0));
        let (i, p, pp) = (img(&mut rng), img(&mut rng), img(&mut rng));
        let (oy, ox) = (rng.random_range(4..9), rng.random_range(2..9));
        let obj = move |y: usize, x: usize| (oy..oy + 5).contains(&y) && (ox..ox + 5).contains(&x);
        let m_o = MaskImage::from_fn(s, s, |y, x| obj(y, x) as u8 as f32);
        let m_r = MaskImage::from_fn(s, s, |y, x| (y >= 3 && !obj(y, x)) as u8 as f32);
        let state = PipelineState::new(&ModelConfig {
            levels: 2,
            base_channels: 4,
            seed,
        })
        .unwrap();
        for (_, v) in state.named_vars() {
            let vals: Vec<f32> = (0..v.elem_count()).map(|_| rng.random_range(-0.4f32..0.4)).collect();
            v.set(&Tensor::from_vec(vals, v.dims(), &device()).unwrap()).unwrap();
        }
        let input = PipelineInput {
            i: &i,
            p: &p,
            p_prime: &pp,
            m_o: &m_o,
            m_r: &m_r,
        };
        let out = run_pipeline(&input, &state, &op).map_err(|e| e.to_string())?;
        for y in 0..s {
            for x in 0..s {
                if !out.m_r_prime.is_on(y, x) {
                    for c in 0..3 {
                        ensure(out.i_prime.get(y, x, c).to_bits() == i.get(y, x, c).to_bits(), format!("seed {seed}: ({y},{x},{c}) changed"))?;
                        checked += 1;
                    }
                }
            }
        }
        let lr = img(&mut rng);
        let lo = img(&mut rng);
        let sel = lighting_composite(&image_to_tensor(&lr).unwrap(), &image_to_tensor(&lo).unwrap(), &masks_to_tensor(&[&m_o]).unwrap()).unwrap();
        let sel = tensor_to_image(&sel, 0).unwrap();
        let fc = final_composite(&lo, &lr, &i, &out.m_r_prime, &out.input_scale).map_err(|e| e.to_string())?;
        for y in 0..s {
            for x in 0..s {
                for c in 0..3 {
                    let want = if m_o.is_on(y, x) { lo.get(y, x, c) } else { lr.get(y, x, c) };
                    ensure(sel.get(y, x, c).to_bits() == want.to_bits(), "lighting selection not exact")?;
                    let want = if out.m_r_prime.is_on(y, x) {
                        lo.get(y, x, c) * lr.get(y, x, c) / out.input_scale[c]
                    } else {
                        i.get(y, x, c)
                    };
                    ensure(fc.get(y, x, c).to_bits() == want.to_bits(), "final composite not exact")?;
                }
            }
        }
    }
    Ok(format!("{checked} outside-M'_r values bit-exact over 6 random pipelines"))
}

// ---------------------------------------------------------------- 6 and 7 training

const STAGE_STEPS: usize = 300;
const E2E_STEPS: usize = 300;

/// Stagewise pretraining then end-to-end fine-tuning.
fn schedule(samples: &[TrainingSample]) -> Result<(PipelineState, usize), String> {
    let op = DiffusionFill::default();
    let mut state = PipelineState::new(&ModelConfig::default()).map_err(|e| e.to_string())?;
    let mut steps = 0;
    for (stage, n, lr) in [
        (Stage::Ss, STAGE_STEPS, 1e-3),
        (Stage::Id, STAGE_STEPS, 1e-3),
        (Stage::Sr, STAGE_STEPS, 1e-3),
        (Stage::Li, STAGE_STEPS, 1e-3),
        (Stage::EndToEnd, E2E_STEPS, 3e-4),
    ] {
        let cfg = TrainConfig {
            stage,
            epochs: usize::MAX,
            lr0: lr,
            decay_every: usize::MAX,
            augment: None,
            max_steps: Some(n),
            seed: 17,
            ..TrainConfig::default()
        };
        let s = train(&cfg, samples, &mut state, &op, &RunOptions::default()).map_err(|e| e.to_string())?;
        steps += s.steps_done;
    }
    Ok((state, steps))
}

fn shadow_and_full(samples: &[PreparedSample], method: Method, state: &PipelineState) -> (f64, f64) {
    let r = evaluate(method, samples, Some(state), &DiffusionFill::default(), 0.5).unwrap();
    (r.report.aggregate.shadow_rmse.unwrap(), r.report.aggregate.rmse.unwrap())
}

fn overfit() -> Check {
    let start = Instant::now();
    let scenes = render_samples(8, 1000);
    let (state, steps) = schedule(&scenes)?;
    let t = start.elapsed();
    let prepared = prepare(&scenes);
    let (noop_s, noop_f) = shadow_and_full(&prepared, Method::Baseline(Baseline::Noop), &state);
    let (ours_s, ours_f) = shadow_and_full(&prepared, Method::Pipeline, &state);
    let detail = format!(
        "Shadow RMSE {ours_s:.4} vs no-op {noop_s:.4} ({:.0}%), RMSE {ours_f:.4} vs {noop_f:.4}, {steps} steps, {:.1} min",
        100.0 * ours_s / noop_s,
        t.as_secs_f64() / 60.0
    );
    ensure(steps <= 2000, format!("{steps} steps; {detail}"))?;
    ensure(t <= Duration::from_secs(30 * 60), format!("too slow; {detail}"))?;
    ensure(ours_s < 0.5 * noop_s, detail.clone())?;
    ensure(ours_f < noop_f, detail.clone())?;
    Ok(detail)
}

fn generalization(train_set: &[TrainingSample]) -> Check {
    let start = Instant::now();
    let held_out = render_samples(8, 90_000);
    let (state, steps) = schedule(train_set)?;
    let prepared = prepare(&held_out);
    let (noop_s, _) = shadow_and_full(&prepared, Method::Baseline(Baseline::Noop), &state);
    let (ours_s, _) = shadow_and_full(&prepared, Method::Pipeline, &state);
    let t = start.elapsed();
    let detail = format!(
        "held-out Shadow RMSE {ours_s:.4} vs no-op {noop_s:.4} after {steps} steps on {} scenes, {:.1} min",
        train_set.len(),
        t.as_secs_f64() / 60.0
    );
    ensure(t <= Duration::from_secs(4 * 3600), format!("too slow; {detail}"))?;
    ensure(ours_s < noop_s, detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------- 8 eval oracles

fn eval_oracles() -> Check {
    let spec = CameraSpec {
        eye: [0.3, 1.6, 2.4],
        look_at: [0.0, 0.0, 0.0],
        fov: 0.9,
        resolution: 48,
    };
    let cam = Camera::new(&spec, 48, 48).map_err(|e| e.to_string())?;
    let mut worst_angle = 0.0f64;
    for (k, normal) in [Vector3::new(0.2, 1.0, -0.35), Vector3::new(0.0, 1.0, 0.0), Vector3::new(-0.3, 1.0, 0.1)].iter().enumerate() {
        let n = normal.normalize();
        let off = 0.05 * k as f64;
        let d = ImageBuffer::from_fn(48, 48, 1, |y, x, _| {
            let ray = cam.center_ray(x, y);
            let t = (off - n.dot(&ray.origin)) / n.dot(&ray.dir);
            if t > 0.0 {
                t as f32
            } else {
                f32::INFINITY
            }
        });
        let (plane, _) = ransac_plane_fit(&d, &spec, &RansacConfig::default()).map_err(|e| e.to_string())?;
        let angle = plane.normal.dot(&n).clamp(-1.0, 1.0).acos().to_degrees();
        worst_angle = worst_angle.max(angle);
    }
    ensure(worst_angle < 0.1, format!("plane normal off by {worst_angle} degrees"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let s = 48;
    let target = ImageBuffer::from_fn(s, s, 3, |_, _, _| rng.random_range(0.3f32..0.9));
    let disk = MaskImage::from_fn(s, s, |y, x| {
        let (dy, dx) = (y as f32 - 20.0, x as f32 - 26.0);
        ((dy * dy + dx * dx).sqrt() < 9.0) as u8 as f32
    });
    let input = ImageBuffer::from_fn(s, s, 3, |y, x, c| target.get(y, x, c) * if disk.is_on(y, x) { 0.4 } else { 1.0 });
    let m_r = MaskImage::from_fn(s, s, |y, _| (y >= 4) as u8 as f32);
    let mask = real_shadow_gt(&input, &target, &m_r, &ShadowGtConfig::default()).map_err(|e| e.to_string())?;
    let iou = mask.intersect(&disk).unwrap().count() as f64 / mask.union(&disk).unwrap().count() as f64;
    ensure(iou > 0.9, format!("painted shadow IoU {iou:.3}"))?;

    let d = ImageBuffer::from_fn(17, 13, 1, |_, _, _| {
        if rng.random::<f32>() < 0.1 {
            f32::INFINITY
        } else {
            rng.random_range(0.5f32..3.0)
        }
    });
    for r in [1usize, 2, 3] {
        let got = median_filter_depth(&d, r).map_err(|e| e.to_string())?;
        let (w, h) = (d.width(), d.height());
        let oracle = ImageBuffer::from_fn(w, h, 1, |y, x, _| {
            let mut v = Vec::new();
            for yy in y.saturating_sub(r)..(y + r + 1).min(h) {
                for xx in x.saturating_sub(r)..(x + r + 1).min(w) {
                    let s = d.get(yy, xx, 0);
                    if s.is_finite() {
                        v.push(s);
                    }
                }
            }
            v.sort_by(f32::total_cmp);
            match v.len() {
                0 => f32::INFINITY,
                n if n % 2 == 1 => v[n / 2],
                n => 0.5 * (v[n / 2 - 1] + v[n / 2]),
            }
        });
        ensure(got == oracle, format!("median radius {r} differs from the sort oracle"))?;
    }
    Ok(format!("RANSAC within {worst_angle:.2e} deg, painted IoU {iou:.3}, median exact"))
}

// ---------------------------------------------------------------- 9 reproducibility

const CLI_CONFIG: &str = r#"{
  "scenegen": {"camera": {"resolution": 32}, "lighting": {"env_resolution": 16}},
  "render": {"samples_per_pixel": 8, "shadow_samples": 8, "seed": 2},
  "model": {"levels": 2, "base_channels": 4},
  "train": {"epochs": 2, "batch_size": 2, "resolution": 32}
}"#;

fn tree(dir: &Path) -> Vec<(std::path::PathBuf, Vec<u8>)> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(std::path::PathBuf, Vec<u8>)>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out);
    out.sort();
    out
}

fn cli(workdir: &Path, args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_unshadow"))
        .arg("--workdir")
        .arg(workdir)
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    ensure(out.status.success(), format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)))
}

fn reproducibility() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let w = dir.path();
    std::fs::write(w.join("cfg.json"), CLI_CONFIG).map_err(|e| e.to_string())?;
    let mut files = 0;
    for run in ["a", "b"] {
        let at = |p: &str| format!("{run}/{p}");
        cli(w, &["gen-data", "--config", "cfg.json", "--out", &at("data"), "--scenes", "3", "--seed", "11"])?;
        for stage in ["ss", "id", "sr", "li", "end2end"] {
            cli(w, &["train", "--config", "cfg.json", "--data", &at("data"), "--stage", stage, "--out", &at("train")])?;
        }
        let scene = w.join(at("data")).join("scene_00000");
        let sample = unshadow_core::dataset::load_sample(&w.join(at("data")), "scene_00000").map_err(|e| e.to_string())?;
        let prep = prepare_sample(&sample, None, &ShadowGtConfig::default()).map_err(|e| e.to_string())?;
        let inputs = w.join(at("inputs"));
        std::fs::create_dir_all(&inputs).map_err(|e| e.to_string())?;
        unshadow_core::io::write_pfm(inputs.join("i.pfm"), &prep.i).map_err(|e| e.to_string())?;
        let ckpt = at("train/end2end/checkpoint.ckpt");
        let path = |f: &str| scene.join(f).to_string_lossy().into_owned();
        cli(
            w,
            &[
                "remove", "--config", "cfg.json", "--image", &at("inputs/i.pfm"), "--proxy", &path("p.pfm"), "--proxy-removed",
                &path("p_prime.pfm"), "--mask-object", &path("m_o.png"), "--mask-receiver", &path("m_r.png"), "--checkpoint", &ckpt,
                "--out", &at("removed"),
            ],
        )?;
        cli(w, &["eval", "--config", "cfg.json", "--data", &at("data"), "--checkpoint", &ckpt, "--out", &at("eval")])?;
    }
    for sub in ["data", "train", "removed", "eval"] {
        let (a, b) = (tree(&w.join("a").join(sub)), tree(&w.join("b").join(sub)));
        ensure(!a.is_empty(), format!("{sub}: no artifacts"))?;
        let a_names: Vec<_> = a.iter().map(|(p, _)| p.clone()).collect();
        let b_names: Vec<_> = b.iter().map(|(p, _)| p.clone()).collect();
        ensure(a_names == b_names, format!("{sub}: file sets differ"))?;
        for ((p, x), (_, y)) in a.iter().zip(&b) {
            ensure(x == y, format!("{sub}/{}: bytes differ", p.display()))?;
        }
        files += a.len();
    }
    Ok(format!("gen-data, train (5 stages), remove, eval: {files} files byte-identical across reruns"))
}

// ---------------------------------------------------------------- driver

fn run(label: &str, f: impl FnOnce() -> Check) -> bool {
    let start = Instant::now();
    let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into());
        Err(format!("panicked: {msg}"))
    });
    let secs = start.elapsed().as_secs_f64();
    match &result {
        Ok(detail) => println!("PASS {label}: {detail} [{secs:.1}s]"),
        Err(detail) => println!("FAIL {label}: {detail} [{secs:.1}s]"),
    }
    result.is_ok()
}

fn main() {
    let mut ok = true;
    ok &= run("1 renderer analytic oracles", renderer_oracles);
    let start = Instant::now();
    let generalization_set = render_samples(200, 20_000);
    println!("(rendered {} training scenes in {:.1} min)", generalization_set.len(), start.elapsed().as_secs_f64() / 60.0);
    ok &= run("2 dataset identities", || dataset_identities(&generalization_set));
    ok &= run("3 loss gradients, fixed points, masking", loss_checks);
    ok &= run("4 exclusion and pyramid sanity", exclusion_pyramid_checks);
    ok &= run("5 composite exactness", composite_exactness);
    ok &= run("6 overfit experiment", overfit);
    ok &= run("7 generalization smoke test", || generalization(&generalization_set));
    ok &= run("8 eval-module oracles", eval_oracles);
    ok &= run("9 reproducibility", reproducibility);
    if !ok {
        std::process::exit(1);
    }
}
