//! Acceptance gate: eleven properties, one verdict line each.
//!
//! Verdicts go straight to the stderr handle so they show up even when the
//! harness captures test output. The trained toy fixture is built once
//! (stage sweep over t = 1, 2, 3) and shared by every criterion that needs
//! a trained model.

use std::io::Write as _;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use resihide_core::carrier::{contiguous_offsets, load_pcm, save_pcm, select_frames, splice, FramingPolicy};
use resihide_core::experiments::{robustness_drop, sweep_stages, zero_image_psnr, Sweep, ToyFixture};
use resihide_core::kv::KvMap;
use resihide_core::metrics::{ms_ssim, psnr, ssim, SsimWindow};
use resihide_core::nn::DEFAULT_WIDTH;
use resihide_core::pipeline::{compute_residual, default_manifest, embed, extract, hide_all, reveal_all, SecretImage, StegoBundle};
use resihide_core::training::{batch_gradients, batch_stats, total_loss, Batch, Objective, TrainingConfig};
use resihide_core::{AudioStream, CarrierFrame, ModelConfig, PcmBits, StageModels, Tensor, Variant};

fn verdict(id: u32, name: &str, pass: bool, detail: String) {
    let line = format!(
        "criterion {id:>2} [{}] {name}: {detail}\n",
        if pass { "PASS" } else { "FAIL" }
    );
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(pass, "{line}");
}

fn within(elapsed: Duration, budget_s: f64) -> bool {
    elapsed.as_secs_f64() < budget_s
}

fn bits_equal(a: &[f32], b: &[f32]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn uniform(rng: &mut ChaCha8Rng, c: usize, side: usize, lo: f32, hi: f32) -> Tensor<f32> {
    let data = (0..c * side * side).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_vec(c, side, side, data).unwrap()
}

fn jitter<S: resihide_core::Scalar>(models: &mut StageModels<S>, scale: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in models.param_slices_mut() {
        for v in p.iter_mut() {
            *v += S::of(rng.random_range(-scale..scale));
        }
    }
}

struct Trained {
    fixture: ToyFixture,
    sweep: Sweep,
    eval: Batch,
}

impl Trained {
    fn run(&self, t: usize) -> &resihide_core::experiments::Run {
        self.sweep.runs.iter().find(|r| r.record.stages == t).expect("t swept")
    }
}

/// Trains t = 1, 2, 3 on the canonical fixture once per test process.
fn trained() -> &'static Trained {
    static CELL: OnceLock<Trained> = OnceLock::new();
    CELL.get_or_init(|| {
        let fixture = ToyFixture::canonical();
        let sweep = sweep_stages(&[1, 2, 3], &fixture.config, &fixture.images, &fixture.audio)
            .expect("fixture sweep trains");
        let eval = fixture.evaluation().expect("fixture evaluation batch");
        Trained { fixture, sweep, eval }
    })
}

#[test]
fn c01_telescoping_identity() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut exact = true;
    for _ in 0..100 {
        let secret = uniform(&mut rng, 3, 16, 0.0, 1.0);
        let mut partial = Tensor::zeros_like(&secret);
        for _stage in 1..=5 {
            let residual = compute_residual(&secret, &partial).unwrap();
            // the oracle reveal returns the residual unchanged
            partial = partial.add(&residual).unwrap();
            exact &= bits_equal(partial.as_slice(), secret.as_slice());
        }
    }
    let elapsed = start.elapsed();
    verdict(
        1,
        "telescoping identity",
        exact && within(elapsed, 1.0),
        format!("C_i == S_0 bit-exact for i=1..5 on 100 secrets: {exact}; {elapsed:.2?}"),
    );
}

#[test]
fn c02_zero_head_transparency() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut ok = true;
    let mut worst_mse: f64 = 0.0;
    for variant in Variant::MULTI_STAGE.into_iter().chain([Variant::SingleShot]) {
        let models = StageModels::<f32>::init(ModelConfig {
            stages: 3,
            blocks: 4,
            width: DEFAULT_WIDTH,
            variant,
            seed: rng.random(),
        })
        .unwrap();
        for _ in 0..2 {
            let secret = SecretImage::new(uniform(&mut rng, 3, 8, 0.0, 1.0)).unwrap();
            let cover = AudioStream::new((0..300).map(|_| rng.random_range(-1.0..1.0)).collect(), 16_000);
            let bundle = embed(&secret, &cover, &models, &default_manifest(&secret, &models, PcmBits::Float)).unwrap();
            let mse = resihide_core::metrics::audio_mse(&cover, &bundle.audio).unwrap();
            worst_mse = worst_mse.max(mse);
            ok &= mse == 0.0 && bits_equal(&cover.samples, &bundle.audio.samples);
            let (_, state) = extract(&bundle, &models, None).unwrap();
            ok &= state.accumulated().as_slice().iter().all(|v| *v == 0.0);
        }
    }
    let elapsed = start.elapsed();
    verdict(
        2,
        "zero-head transparency",
        ok && within(elapsed, 1.0),
        format!("6 variants x 2 inputs, worst container MSE {worst_mse}, reveals all zero: {ok}; {elapsed:.2?}"),
    );
}

#[test]
fn c03_gradient_correctness() {
    let start = Instant::now();
    let h = 1e-5;
    let mut sampled = 0;
    let mut worst: f64 = 0.0;
    let mut worst_pair = (0.0, 0.0);
    let mut params = Vec::new();
    for (k, variant) in [Variant::M, Variant::MED].into_iter().enumerate() {
        // tiny nets (under 1e4 parameters) keep the check well conditioned
        let mut models = StageModels::<f64>::init(ModelConfig {
            stages: 2,
            blocks: 1,
            width: 8,
            variant,
            seed: 30 + k as u64,
        })
        .unwrap();
        // away from the zero-head start so every parameter gets gradient
        jitter(&mut models, 0.01, 40 + k as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(50 + k as u64);
        let secrets: Vec<Tensor<f64>> = (0..2)
            .map(|_| uniform(&mut rng, 3, 8, 0.0, 1.0).cast())
            .collect();
        let carriers: Vec<Vec<Tensor<f64>>> = (0..2)
            .map(|_| (0..2).map(|_| uniform(&mut rng, 1, 8, -0.5, 0.5).cast()).collect())
            .collect();
        let objective = Objective {
            lambda: vec![0.8, 0.8],
            quantize_in_loop: false,
            detach_residuals: false,
        };
        params.push(models.num_params());
        let mut grads = models.zeros_like();
        batch_gradients(&models, &secrets, &carriers, &objective, &mut grads).unwrap();

        let lens: Vec<usize> = models.param_slices().iter().map(|p| p.len()).collect();
        let total: usize = lens.iter().sum();
        let locate = |mut flat: usize| {
            for (s, &n) in lens.iter().enumerate() {
                if flat < n {
                    return (s, flat);
                }
                flat -= n;
            }
            unreachable!()
        };
        for flat in sample(&mut rng, total, 150) {
            let (s, j) = locate(flat);
            let orig = models.param_slices()[s][j];
            let mut loss_at = |v: f64| {
                models.param_slices_mut()[s][j] = v;
                batch_stats(&models, &secrets, &carriers, &objective).unwrap().total
            };
            let numeric = (loss_at(orig + h) - loss_at(orig - h)) / (2.0 * h);
            models.param_slices_mut()[s][j] = orig;
            let analytic = grads.param_slices()[s][j];
            let scale = analytic.abs().max(numeric.abs());
            let rel = if scale == 0.0 { 0.0 } else { (analytic - numeric).abs() / scale };
            if rel > worst {
                worst = rel;
                worst_pair = (analytic, numeric);
            }
            sampled += 1;
        }
    }
    let elapsed = start.elapsed();
    verdict(
        3,
        "gradient correctness",
        sampled >= 200 && worst < 1e-4 && params.iter().all(|&p| p <= 10_000) && within(elapsed, 120.0),
        format!(
            "{sampled} sampled parameters of nets with {params:?} (M, M-ED), worst relative error {worst:.3e} at analytic {:.6e} vs numeric {:.6e}; {elapsed:.2?}",
            worst_pair.0, worst_pair.1
        ),
    );
}

#[test]
fn c04_toy_training_progress() {
    let t = trained();
    let r = &t.run(3).record;
    let same_config = r.config_hash == resihide_core::experiments::config_hash(&t.fixture.config);
    let ratio = r.final_loss / r.initial_loss;
    verdict(
        4,
        "toy training progress",
        same_config && ratio <= 0.5 && r.psnr >= 12.0 && r.wall_clock_s < 600.0,
        format!(
            "loss {:.3} -> {:.3} (ratio {ratio:.3}), PSNR clamp(C_3) {:.2} dB, {} steps in {:.1}s",
            r.initial_loss,
            r.final_loss,
            r.psnr,
            t.run(3).outcome.steps,
            r.wall_clock_s
        ),
    );
}

#[test]
fn c05_stage_sweep_trend() {
    let t = trained();
    let p: Vec<f64> = [1, 2, 3].iter().map(|&s| t.run(s).record.psnr).collect();
    let (gain12, gain23) = (p[1] - p[0], p[2] - p[1]);
    let wall: f64 = t.sweep.runs.iter().map(|r| r.record.wall_clock_s).sum();
    verdict(
        5,
        "stage-sweep trend",
        p[2] >= p[0] - 0.1 && gain23 <= gain12 + 0.5 && wall < 1800.0,
        format!(
            "PSNR t=1,2,3: {:.2}, {:.2}, {:.2} dB; gains {gain12:+.2}, {gain23:+.2}; saturation at t={:?}; {wall:.1}s",
            p[0], p[1], p[2], t.sweep.result.saturation
        ),
    );
}

#[test]
fn c06_stage_independence() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let side = 16;
    let mut summary = Vec::new();
    let mut ok = true;
    for variant in [Variant::M, Variant::S, Variant::MD] {
        let mut models = StageModels::<f32>::init(ModelConfig {
            stages: 3,
            blocks: 2,
            width: DEFAULT_WIDTH,
            variant,
            seed: 60,
        })
        .unwrap();
        jitter(&mut models, 0.01, 61);
        let secret = SecretImage::new(uniform(&mut rng, 3, side, 0.0, 1.0)).unwrap();
        let frames: Vec<CarrierFrame> = (0..3)
            .map(|k| CarrierFrame::from_grid(&uniform(&mut rng, 1, side, -0.5, 0.5), k * side * side, side, side).unwrap())
            .collect();
        let (containers, _) = hide_all(&secret, &frames, &models).unwrap();
        let all = [true; 3];
        let base = reveal_all(&containers, &models, &all).unwrap();
        let mut untouched_equal = true;
        let mut perturbed_moved = true;
        for _ in 0..20 {
            let j = rng.random_range(0..3);
            let mut changed = containers.clone();
            for v in changed[j].samples.iter_mut() {
                *v += rng.random_range(-0.1..0.1);
            }
            let state = reveal_all(&changed, &models, &all).unwrap();
            for i in 0..3 {
                let same = bits_equal(
                    base.residuals[i].as_ref().unwrap().as_slice(),
                    state.residuals[i].as_ref().unwrap().as_slice(),
                );
                if i == j {
                    perturbed_moved &= !same;
                } else {
                    untouched_equal &= same;
                }
            }
        }
        if variant == Variant::MD {
            // control: connected reveals must propagate the perturbation
            ok &= !untouched_equal;
        } else {
            ok &= untouched_equal && perturbed_moved;
        }
        summary.push(format!("{variant}: others bit-identical={untouched_equal}"));
    }
    let elapsed = start.elapsed();
    verdict(
        6,
        "stage independence",
        ok && within(elapsed, 10.0),
        format!("20 trials each; {} (M-D is the connected control); {elapsed:.2?}", summary.join(", ")),
    );
}

#[test]
fn c07_frame_drop_robustness() {
    let t = trained();
    let start = Instant::now();
    let models = &t.run(3).outcome.models;
    let masks = vec![
        vec![true, true, true],
        vec![true, true, false],
        vec![true, false, true],
        vec![false, true, true],
    ];
    let table = robustness_drop(models, &t.eval, &masks).unwrap();
    let zero = zero_image_psnr(&t.eval).unwrap();
    let full = table[0].psnr;
    let dropped = table[1].psnr;
    let elapsed = start.elapsed();
    let others: Vec<String> = table[2..].iter().map(|r| format!("{:.2}", r.psnr)).collect();
    verdict(
        7,
        "frame-drop robustness",
        zero < dropped && dropped < full && within(elapsed, 60.0),
        format!(
            "zero image {zero:.2} < drop stage 3 {dropped:.2} < full {full:.2} dB (drop 2, drop 1: {}); {elapsed:.2?}",
            others.join(", ")
        ),
    );
}

#[test]
fn c08_residual_sparsification() {
    let t = trained();
    let start = Instant::now();
    let models = &t.run(3).outcome.models;
    // recompute ‖S_i‖₁ directly from the sender-side partial sums
    let n = t.eval.len() as f64;
    let mut l1 = [0.0f64; 3];
    for (secret, grids) in t.eval.secrets.iter().zip(&t.eval.carriers) {
        let side = secret.height();
        let frames: Vec<CarrierFrame> = grids
            .iter()
            .enumerate()
            .map(|(k, g)| CarrierFrame::from_grid(g, k * side * side, side, side).unwrap())
            .collect();
        let (_, state) = hide_all(&SecretImage::new(secret.clone()).unwrap(), &frames, models).unwrap();
        for (i, acc) in l1.iter_mut().enumerate() {
            let s_i = secret.sub(&state.partials[i]).unwrap();
            *acc += s_i.as_slice().iter().map(|v| v.abs() as f64).sum::<f64>() / n;
        }
    }
    let elapsed = start.elapsed();
    verdict(
        8,
        "residual sparsification",
        l1[2] <= 0.9 * l1[0] && within(elapsed, 60.0),
        format!(
            "mean |S_1|_1 {:.1}, |S_2|_1 {:.1}, |S_3|_1 {:.1} (ratio {:.3}); {elapsed:.2?}",
            l1[0],
            l1[1],
            l1[2],
            l1[2] / l1[0]
        ),
    );
}

#[test]
fn c09_carrier_and_file_round_trips() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut checks = Vec::new();

    // PCM idempotence: load(save(x)) == x for representable x, for both depths.
    let int_samples: Vec<f32> = (0..2000).map(|_| rng.random_range(-32768i32..32768) as f32 / 32768.0).collect();
    let float_samples: Vec<f32> = (0..2000).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut pcm_ok = true;
    for (bits, samples) in [(PcmBits::Int16, int_samples), (PcmBits::Float, float_samples)] {
        let a = AudioStream::new(samples, 44_100);
        let path = dir.path().join(format!("pcm_{bits}.wav"));
        save_pcm(&a, &path, bits).unwrap();
        let b = load_pcm(&path).unwrap();
        save_pcm(&b, &path, bits).unwrap();
        let c = load_pcm(&path).unwrap();
        pcm_ok &= bits_equal(&a.samples, &b.samples) && bits_equal(&b.samples, &c.samples) && b.sample_rate == 44_100;
    }
    checks.push(("pcm", pcm_ok));

    // Reshape bijection in both directions.
    let (w, h) = (12, 7);
    let samples: Vec<f32> = (0..w * h).map(|_| rng.random_range(-1.0..1.0)).collect();
    let frame = CarrierFrame {
        offset: 5,
        width: w,
        height: h,
        samples: samples.clone(),
    };
    let grid = frame.to_grid::<f32>().unwrap();
    let back = CarrierFrame::from_grid(&grid, 5, w, h).unwrap();
    let grid2 = back.to_grid::<f32>().unwrap();
    let row_major = (0..h).all(|y| (0..w).all(|x| grid.get(0, y, x).to_bits() == samples[y * w + x].to_bits()));
    checks.push((
        "reshape",
        bits_equal(&back.samples, &samples) && bits_equal(grid2.as_slice(), grid.as_slice()) && row_major,
    ));

    // Splice locality: only frame samples change, and they take the new values.
    let stream = AudioStream::new((0..1000).map(|_| rng.random_range(-0.9..0.9)).collect(), 8000);
    let policy = FramingPolicy::Offsets(vec![10, 300, 700]);
    let frames = select_frames(&stream, 3, 8, 8, &policy).unwrap();
    let replaced: Vec<CarrierFrame> = frames
        .iter()
        .map(|f| CarrierFrame {
            samples: f.samples.iter().map(|_| rng.random_range(-0.9..0.9)).collect(),
            ..f.clone()
        })
        .collect();
    let spliced = splice(&stream, &replaced).unwrap();
    let mut local = spliced.len() == stream.len();
    for i in 0..stream.len() {
        let owner = replaced.iter().find(|f| (f.offset..f.end()).contains(&i));
        local &= match owner {
            Some(f) => spliced.samples[i].to_bits() == f.samples[i - f.offset].to_bits(),
            None => spliced.samples[i].to_bits() == stream.samples[i].to_bits(),
        };
    }
    checks.push(("splice", local));

    // Float-path embed/extract through files equals the in-memory reveal.
    let mut models = StageModels::<f32>::init(ModelConfig {
        stages: 3,
        blocks: 1,
        width: 16,
        variant: Variant::MED,
        seed: 90,
    })
    .unwrap();
    jitter(&mut models, 0.02, 91);
    let secret = SecretImage::new(uniform(&mut rng, 3, 10, 0.0, 1.0)).unwrap();
    let cover = AudioStream::new((0..400).map(|_| rng.random_range(-0.5..0.5)).collect(), 16_000);
    let manifest = default_manifest(&secret, &models, PcmBits::Float);
    let offsets = contiguous_offsets(3, 10, 10);
    let frames = select_frames(&cover, 3, 10, 10, &FramingPolicy::Offsets(offsets)).unwrap();
    let (_, in_memory) = hide_all(&secret, &frames, &models).unwrap();
    let bundle = embed(&secret, &cover, &models, &manifest).unwrap();
    let (wav, man) = (dir.path().join("b.wav"), dir.path().join("b.manifest"));
    bundle.save(&wav, &man).unwrap();
    let (image, state) = extract(&StegoBundle::load(&wav, &man).unwrap(), &models, None).unwrap();
    let pipeline_eq = bits_equal(state.accumulated().as_slice(), in_memory.accumulated().as_slice())
        && bits_equal(image.pixels().as_slice(), in_memory.final_image().as_slice());
    checks.push(("embed/extract float", pipeline_eq));

    let elapsed = start.elapsed();
    let ok = checks.iter().all(|(_, c)| *c);
    let detail: Vec<String> = checks.iter().map(|(n, c)| format!("{n}={c}")).collect();
    verdict(
        9,
        "carrier/file round trips",
        ok && within(elapsed, 10.0),
        format!("{}; {elapsed:.2?}", detail.join(" ")),
    );
}

/// Per-window SSIM straight from the definition, no shared code with the
/// library. Returns (mean ssim, mean cs) over positions and channels.
fn brute_ssim(a: &Tensor<f64>, b: &Tensor<f64>, weights: &[f64]) -> (f64, f64) {
    let n = weights.len();
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let (h, w) = (a.height(), a.width());
    let mut ssim_total = 0.0;
    let mut cs_total = 0.0;
    for c in 0..a.channels() {
        let mut ssim_sum = 0.0;
        let mut cs_sum = 0.0;
        for y in 0..=h - n {
            for x in 0..=w - n {
                let mut m = [0.0f64; 2];
                for dy in 0..n {
                    for dx in 0..n {
                        let k = weights[dy] * weights[dx];
                        m[0] += k * a.get(c, y + dy, x + dx);
                        m[1] += k * b.get(c, y + dy, x + dx);
                    }
                }
                let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
                for dy in 0..n {
                    for dx in 0..n {
                        let k = weights[dy] * weights[dx];
                        let p = a.get(c, y + dy, x + dx) - m[0];
                        let q = b.get(c, y + dy, x + dx) - m[1];
                        vx += k * p * p;
                        vy += k * q * q;
                        cov += k * p * q;
                    }
                }
                let l = (2.0 * m[0] * m[1] + c1) / (m[0] * m[0] + m[1] * m[1] + c1);
                let cs = (2.0 * cov + c2) / (vx + vy + c2);
                ssim_sum += l * cs;
                cs_sum += cs;
            }
        }
        let count = ((h - n + 1) * (w - n + 1)) as f64;
        ssim_total += ssim_sum / count;
        cs_total += cs_sum / count;
    }
    let ch = a.channels() as f64;
    (ssim_total / ch, cs_total / ch)
}

fn pool2(t: &Tensor<f64>) -> Tensor<f64> {
    let (h, w) = (t.height() / 2, t.width() / 2);
    let mut out = Tensor::zeros(t.channels(), h, w);
    for c in 0..t.channels() {
        for y in 0..h {
            for x in 0..w {
                let s = t.get(c, 2 * y, 2 * x) + t.get(c, 2 * y + 1, 2 * x) + t.get(c, 2 * y, 2 * x + 1) + t.get(c, 2 * y + 1, 2 * x + 1);
                out.set(c, y, x, s / 4.0);
            }
        }
    }
    out
}

fn brute_ms_ssim(a: &Tensor<f64>, b: &Tensor<f64>, weights: &[f64]) -> f64 {
    let exps = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
    let (mut a, mut b) = (a.clone(), b.clone());
    let mut score = 1.0;
    for (level, e) in exps.iter().enumerate() {
        let (s, cs) = brute_ssim(&a, &b, weights);
        let term = if level == exps.len() - 1 { s } else { cs };
        score *= term.max(0.0).powf(*e);
        a = pool2(&a);
        b = pool2(&b);
    }
    score
}

#[test]
fn c10_metric_oracles() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let base = uniform(&mut rng, 3, 16, 0.2, 0.8).cast::<f64>();
    let shifted = base.map(|v| v + 0.1);
    let p = psnr(&base, &shifted).unwrap();
    let psnr_ok = (p - 20.0).abs() <= 1e-9 && psnr(&base, &base).unwrap() == f64::INFINITY;

    let a = uniform(&mut rng, 3, 64, 0.0, 1.0).cast::<f64>();
    // correlated partner so SSIM is far from zero
    let b = a.map(|v| (0.7 * v + 0.15 + 0.1 * (v * 97.0).sin()).clamp(0.0, 1.0));
    let box8 = vec![1.0 / 8.0; 8];
    let sigma: f64 = 1.5;
    let gauss: Vec<f64> = {
        let raw: Vec<f64> = (0..11).map(|i| (-((i as f64 - 5.0).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
        let s: f64 = raw.iter().sum();
        raw.iter().map(|v| v / s).collect()
    };
    let d_box = (ssim(&a, &b, SsimWindow::Uniform(8)).unwrap() - brute_ssim(&a, &b, &box8).0).abs();
    let d_gauss = (ssim(&a, &b, SsimWindow::Gaussian { size: 11, sigma }).unwrap() - brute_ssim(&a, &b, &gauss).0).abs();

    let a128 = uniform(&mut rng, 3, 128, 0.0, 1.0).cast::<f64>();
    let b128 = a128.map(|v| (0.8 * v + 0.1 + 0.05 * (v * 31.0).cos()).clamp(0.0, 1.0));
    let d_ms = (ms_ssim(&a128, &b128, 5, SsimWindow::Uniform(8)).unwrap() - brute_ms_ssim(&a128, &b128, &box8)).abs();

    let self_one = ssim(&a, &a, SsimWindow::Uniform(8)).unwrap() == 1.0
        && ms_ssim(&a128, &a128, 5, SsimWindow::Uniform(8)).unwrap() == 1.0;
    let elapsed = start.elapsed();
    verdict(
        10,
        "metric oracles",
        psnr_ok && d_box < 1e-9 && d_gauss < 1e-9 && d_ms < 1e-9 && self_one && within(elapsed, 60.0),
        format!(
            "PSNR(0.1 shift) {p:.12} dB; |ssim - brute| box {d_box:.1e}, gaussian {d_gauss:.1e}; |ms-ssim - brute| {d_ms:.1e}; self = 1: {self_one}; {elapsed:.2?}"
        ),
    );
}

#[test]
fn c11_loss_conventions() {
    let t1 = total_loss(&[0.1], &[0.5], &[0.8]).unwrap();
    let t2 = total_loss(&[0.1, 0.2], &[0.3, 0.4], &[0.8, 0.8]).unwrap();
    let losses_ok = (t1 - 0.5).abs() <= 1e-12 && (t2 - 0.86).abs() <= 1e-12;

    // read the defaults back from the echoed config text
    let echo = TrainingConfig::default().to_kv().to_text();
    let parsed = KvMap::parse(&echo).unwrap();
    let lambda_ok = parsed.get("lambda") == Some("0.8,0.8,0.8,0.8,0.8");
    let config = TrainingConfig::from_kv(&parsed).unwrap();
    let schedule = config.schedule();
    let lr = [schedule.at(0), schedule.at(19), schedule.at(20), schedule.at(39), schedule.at(40)];
    let schedule_ok = lr[0] == 1e-4
        && lr[1] == 1e-4
        && (lr[2] - 1e-4 / 3.0).abs() < 1e-18
        && lr[3] == lr[2]
        && (lr[4] - 1e-4 / 9.0).abs() < 1e-18;
    verdict(
        11,
        "loss conventions",
        losses_ok && lambda_ok && schedule_ok,
        format!(
            "t=1 total {t1}, t=2 total {t2}; echoed lambda={:?}; lr at epochs 0,19,20,39,40 = {lr:?}",
            parsed.get("lambda").unwrap_or("")
        ),
    );
}
