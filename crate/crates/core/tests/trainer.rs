use std::sync::Arc;

use pmob::cache_engine::{CachePlan, ChannelAffine};
use pmob::denoiser::{noise, Model, ModelConfig};
use pmob::numerics::Tensor;
use pmob::stitcher::{FrameImage, StitchScheme};
use pmob::trainer::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_frame(rng: &mut ChaCha8Rng, h: usize, w: usize) -> FrameImage {
    FrameImage::new(h, w, (0..3 * h * w).map(|_| rng.random::<f32>()).collect()).unwrap()
}

#[test]
fn loss_matches_hand_computation() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (h, w) = (5, 7);
    let g: [FrameImage; 4] = std::array::from_fn(|_| random_frame(&mut rng, h, w));
    let t: [FrameImage; 4] = std::array::from_fn(|_| random_frame(&mut rng, h, w));
    let wts = LossWeights { mse: 0.7, freq: 0.3 };
    let got = loss(&g, &t, &wts).unwrap();

    let e: Vec<f64> = g
        .iter()
        .zip(&t)
        .flat_map(|(a, b)| a.data().iter().zip(b.data()).map(|(&x, &y)| x as f64 - y as f64).collect::<Vec<_>>())
        .collect();
    let at = |c: usize, y: usize, x: usize| e[(c * h + y) * w + x];
    let mse_term = e.iter().map(|v| v * v).sum::<f64>() / e.len() as f64;
    let (mut sw, mut sh) = (0.0, 0.0);
    for c in 0..12 {
        for y in 0..h {
            for x in 0..w {
                if x + 1 < w {
                    sw += (at(c, y, x + 1) - at(c, y, x)).powi(2);
                }
                if y + 1 < h {
                    sh += (at(c, y + 1, x) - at(c, y, x)).powi(2);
                }
            }
        }
    }
    let freq = sw / (12 * h * (w - 1)) as f64 + sh / (12 * (h - 1) * w) as f64;
    let want = 0.7 * mse_term + 0.3 * freq;
    assert!((got - want).abs() <= 1e-12 * want.max(1.0), "{got} vs {want}");
    assert_eq!(loss(&g, &g, &wts).unwrap(), 0.0);
}

#[test]
fn psnr_of_known_mse() {
    assert_eq!(psnr(0.01), 20.0);
    assert!(psnr(0.0).is_infinite());
    assert_eq!(mse(&[0.0, 1.0], &[1.0, 1.0]), 0.5);
}

#[test]
fn zero_rate_keeps_parameters() {
    let mut p = vec![Tensor::new(&[3], vec![1.0f32, 2.0, 3.0]).unwrap()];
    let g = vec![Tensor::new(&[3], vec![5.0f32, 5.0, 5.0]).unwrap()];
    let mut opt = Sgd::new(0.0, 0.9);
    for l in [3.0, 2.0, 1.0] {
        assert!(opt.step(&mut p, l, &g));
    }
    assert_eq!(p[0].data(), &[1.0, 2.0, 3.0]);
}

#[test]
fn spike_restores_and_halves_rate() {
    let mut p = vec![Tensor::new(&[2], vec![1.0f32, 1.0]).unwrap()];
    let g = vec![Tensor::new(&[2], vec![1.0f32, -1.0]).unwrap()];
    let mut opt = Sgd::new(0.5, 0.0);
    assert!(opt.step(&mut p, 1.0, &g));
    assert_eq!(p[0].data(), &[0.5, 1.5]);
    assert!(!opt.step(&mut p, 5.5, &g));
    assert_eq!(p[0].data(), &[1.0, 1.0]);
    assert_eq!(opt.lr, 0.25);
    assert!(opt.velocity[0].data().iter().all(|&v| v == 0.0));
    // a non-finite loss is a spike too
    assert!(!opt.step(&mut p, f64::NAN, &g));
}

/// A group of four stitched frames with two reuse entries, in f64.
fn micro_problem<'m>(model: &'m Model<f64>, seed: u64) -> (GroupProblem<'m, f64>, Vec<Tensor<f64>>) {
    let cfg = model.config();
    let geom = Geometry::new(model);
    let (h, w) = geom.out_hw();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = 3;
    let schemes = [StitchScheme::InterleaveA, StitchScheme::InterleaveB, StitchScheme::Quadrant, StitchScheme::Patch];
    let tasks = (0..=m)
        .map(|pos| FrameTask {
            pos,
            alpha: pos as f64 / m as f64,
            scheme: schemes[pos],
            target: Arc::new(Tensor::new(&[12, h, w], (0..12 * h * w).map(|_| rng.random::<f64>()).collect()).unwrap()),
        })
        .collect();
    let mut plan = CachePlan::all_compute(cfg.n_blocks(), cfg.cross_blocks().len(), m - 1);
    let affine = |rng: &mut ChaCha8Rng| ChannelAffine {
        k: (0..cfg.hidden).map(|_| rng.random_range(0.8..1.2)).collect(),
        b: (0..cfg.hidden).map(|_| rng.random_range(-0.1..0.1)).collect(),
    };
    plan.reuse[0] = Some(affine(&mut rng));
    plan.reuse[plan.frames + 1] = Some(affine(&mut rng));
    let a = Factors::random(2, cfg.d, 0.3, seed).unwrap();
    let b = Factors::random(2, cfg.d, 0.3, seed + 1).unwrap();
    let mut params: Vec<Tensor<f64>> = [a.u, a.v, b.u, b.v].iter().map(|t| t.cast()).collect();
    for e in plan.reuse.iter().flatten() {
        params.push(Tensor::new(&[e.k.len()], e.k.iter().map(|&v| v as f64).collect()).unwrap());
        params.push(Tensor::new(&[e.b.len()], e.b.iter().map(|&v| v as f64).collect()).unwrap());
    }
    let problem = GroupProblem {
        model,
        geom,
        noise: noise(seed, cfg.latent_channels, cfg.latent_h, cfg.latent_w).cast(),
        tasks,
        weights: LossWeights::default(),
        fixed_a: None,
        has_b: true,
        m,
        plan: Some(plan),
        fixed_ref_dx: None,
    };
    (problem, params)
}

#[test]
fn gradients_match_finite_differences() {
    let model = Model::generate(ModelConfig::micro(), 5).unwrap().cast::<f64>();
    let (problem, params) = micro_problem(&model, 21);
    let (_, grads) = problem.loss_and_grads(&params).unwrap();
    let names = ["u_a", "v_a", "u_b", "v_b", "k0", "b0", "k1", "b1"];
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let eps = 1e-6;
    for (pi, g) in grads.iter().enumerate() {
        let largest = (0..g.len())
            .max_by(|&i, &j| g.data()[i].abs().total_cmp(&g.data()[j].abs()))
            .unwrap();
        for idx in [largest, rng.random_range(0..g.len()), rng.random_range(0..g.len())] {
            let probe = |d: f64| {
                let mut p = params.clone();
                p[pi].data_mut()[idx] += d;
                problem.loss(&p).unwrap()
            };
            let numeric = (probe(eps) - probe(-eps)) / (2.0 * eps);
            let analytic = g.data()[idx];
            let err = (numeric - analytic).abs();
            let scale = numeric.abs().max(analytic.abs());
            assert!(
                err <= 1e-3 * scale || err <= 1e-8,
                "{} [{idx}]: analytic {analytic:e} numeric {numeric:e}",
                names[pi]
            );
        }
    }
}

fn single_group(model: &Model, cfg: &FitConfig) -> (Tensor, GroupJob) {
    let mc = model.config();
    let z = noise(2, mc.latent_channels, mc.latent_h, mc.latent_w);
    let m = cfg.group_len - 1;
    let a = Factors::random(2, mc.d, 0.4, 50).unwrap();
    let b = Factors::random(2, mc.d, 0.4, 51).unwrap();
    let tasks = (0..=m)
        .map(|pos| {
            let al = pos as f32 / m as f32;
            let p = pmob::prompt_codec::lerp(&a.u.matmul(&a.v).unwrap(), &b.u.matmul(&b.v).unwrap(), al).unwrap();
            FrameTask {
                pos,
                alpha: al as f64,
                scheme: StitchScheme::InterleaveA,
                target: Arc::new(render(model, &z, &p, StitchScheme::InterleaveA).unwrap()),
            }
        })
        .collect();
    let init = vec![initial_factors(cfg, mc.d).unwrap(), jitter(&initial_factors(cfg, mc.d).unwrap(), 0.05, 9)];
    (z, GroupJob { fixed_a: None, init, has_b: true, tasks, m })
}

#[test]
fn ratio_zero_second_phase_continues_the_first() {
    let model = Model::generate(ModelConfig::micro(), 1).unwrap();
    let base = FitConfig { ratio: 0.0, group_len: 3, rank: 2, lr: 4.0, ..FitConfig::default() };
    let split = FitConfig { phase1_iters: 6, phase2_iters: 4, ..base.clone() };
    let whole = FitConfig { phase1_iters: 10, phase2_iters: 0, ..base };
    let (z, job) = single_group(&model, &split);
    let a = fit_group_phase2(&model, &z, &job, &split, fit_group_phase1(&model, &z, &job, &split).unwrap()).unwrap();
    let b = fit_group_phase1(&model, &z, &job, &whole).unwrap();
    assert_eq!(a.trace, b.trace);
    assert_eq!(a.keyframes, b.keyframes);
    assert_eq!(a.plan.n_reuse(), 0);
}

#[test]
fn phase_two_trains_a_plan_and_lowers_loss() {
    let model = Model::generate(ModelConfig::micro(), 1).unwrap();
    let cfg = FitConfig { ratio: 0.5, group_len: 4, rank: 2, phase1_iters: 30, phase2_iters: 20, ..FitConfig::default() };
    let (z, job) = single_group(&model, &cfg);
    let p1 = fit_group_phase1(&model, &z, &job, &cfg).unwrap();
    let fit = fit_group_phase2(&model, &z, &job, &cfg, p1).unwrap();
    assert_eq!(fit.trace.len(), 50);
    assert_eq!(fit.plan.n_reuse(), 2);
    assert!(fit.trace.last().unwrap() < &fit.trace[0]);
    assert!(fit.plan.reuse.iter().flatten().any(|a| a.k.iter().any(|&k| k != 1.0)));
}

#[test]
fn bad_settings_are_rejected() {
    let ok = FitConfig::default();
    assert!(ok.validate().is_ok());
    assert!(FitConfig { ratio: 1.5, ..ok.clone() }.validate().is_err());
    assert!(FitConfig { group_len: 1, ..ok.clone() }.validate().is_err());
    assert!(FitConfig { lr: -1.0, ..ok.clone() }.validate().is_err());
    assert!(FitConfig { momentum: 1.0, ..ok }.validate().is_err());
}
