//! Sender-side prompt fitting.
//!
//! A group covers stitched frames `0..=m` between two keyframes. Phase one
//! fits the keyframe factors through the uncached network; phase two records
//! block contributions, picks reuse entries and keeps optimizing the factors
//! jointly with the per-channel `k`, `b` of every reused entry.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::cache_engine::{build_plan, CachePlan, ChannelAffine, KbInit};
use crate::denoiser::{BlockMode, Forward, ForwardOpts, Model};
use crate::error::{Error, Result};
use crate::numerics::{Element, ResizePlan, Tape, Tensor, Var};
use crate::prompt_codec::{LowRankPrompt, PROMPT_TOKENS};
use crate::stitcher::{unstitch_index, FrameImage, StitchScheme};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub mse: f64,
    /// Weight of the first-difference matching term.
    pub freq: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { mse: 1.0, freq: 0.1 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitConfig {
    pub lr: f64,
    /// 0 gives plain gradient descent.
    pub momentum: f64,
    pub phase1_iters: usize,
    pub phase2_iters: usize,
    pub rank: usize,
    pub group_len: usize,
    pub ratio: f64,
    pub weights: LossWeights,
    pub kb_init: KbInit,
    pub kv_cache: bool,
    pub seed: u64,
    /// Standard deviation of the initial factors.
    pub init_std: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            lr: 16.0,
            momentum: 0.9,
            phase1_iters: 300,
            phase2_iters: 100,
            rank: 4,
            group_len: 5,
            ratio: 0.5,
            weights: LossWeights::default(),
            kb_init: KbInit::OnesZeros,
            kv_cache: true,
            seed: 0,
            init_std: 0.3,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.ratio) {
            return Err(Error::InvalidArgument(format!("cache ratio {} outside [0, 1]", self.ratio)));
        }
        if self.group_len < 2 {
            return Err(Error::InvalidArgument("group length must be at least 2".into()));
        }
        if self.rank == 0 {
            return Err(Error::InvalidArgument("rank must be positive".into()));
        }
        if !(self.lr >= 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument("learning rate must be ≥ 0 and momentum in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FitReport {
    pub loss_trace: Vec<f64>,
    /// Per source frame, against the targets at output resolution.
    pub frame_mse: Vec<f64>,
    pub frame_psnr: Vec<f64>,
    pub schemes: Vec<StitchScheme>,
    pub plans: Vec<CachePlan>,
}

impl FitReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.loss_trace.last().copied()
    }
}

pub fn mse(a: &[f32], b: &[f32]) -> f64 {
    let n = a.len().max(1) as f64;
    a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>() / n
}

/// `10 · log10(1 / mse)` for images in `[0, 1]`; infinite when identical.
pub fn psnr(mse: f64) -> f64 {
    if mse <= 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

/// Fixed index maps and resampling shared by every frame of a fit.
#[derive(Clone, Debug)]
pub struct Geometry {
    pub frame_h: usize,
    pub frame_w: usize,
    pub upscale: usize,
    resize: Arc<ResizePlan>,
    unstitch: Vec<Option<Arc<Vec<usize>>>>,
}

impl Geometry {
    pub fn new<T: Element>(model: &Model<T>) -> Self {
        let cfg = model.config();
        let (h, w) = cfg.frame_hw();
        Self {
            frame_h: h,
            frame_w: w,
            upscale: cfg.upscale,
            resize: Arc::new(ResizePlan::new(12, h, w, cfg.upscale)),
            unstitch: StitchScheme::ALL
                .iter()
                .map(|&s| unstitch_index(s, 3, h, w).ok().map(Arc::new))
                .collect(),
        }
    }

    pub fn out_hw(&self) -> (usize, usize) {
        (self.frame_h * self.upscale, self.frame_w * self.upscale)
    }

    fn index(&self, s: StitchScheme) -> Result<Arc<Vec<usize>>> {
        self.unstitch[s as usize].clone().ok_or_else(|| {
            Error::InvalidArgument(format!("{s:?} unsupported for {}x{} frames", self.frame_h, self.frame_w))
        })
    }
}

/// Forward, decode, unstitch and upsample: the four output frames stacked
/// as `[12, H, W]`.
pub fn render_on<T: Element>(
    tape: &mut Tape<T>,
    model: &Model<T>,
    geom: &Geometry,
    noise: Var,
    prompt: Option<Var>,
    opts: &ForwardOpts,
    scheme: StitchScheme,
) -> Result<(Var, Forward)> {
    let fwd = model.forward_on(tape, noise, prompt, opts)?;
    let img = model.decode_on(tape, fwd.latent)?;
    let frames = tape.gather(img, geom.index(scheme)?, &[12, geom.frame_h, geom.frame_w])?;
    let out = tape.resize(frames, geom.resize.clone())?;
    Ok((out, fwd))
}

/// Loss between stacked `[4·3, H, W]` frames: weighted MSE plus the mean
/// squared mismatch of horizontal and vertical first differences.
pub fn loss_on<T: Element>(tape: &mut Tape<T>, gen: Var, target: Var, w: &LossWeights) -> Result<Var> {
    let e = tape.sub(gen, target)?;
    let e2 = tape.mul(e, e)?;
    let m = tape.mean(e2)?;
    let mut loss = tape.scale(m, T::of(w.mse))?;
    if w.freq != 0.0 {
        let dw = tape.diff_w(e)?;
        let dw2 = tape.mul(dw, dw)?;
        let fw = tape.mean(dw2)?;
        let dh = tape.diff_h(e)?;
        let dh2 = tape.mul(dh, dh)?;
        let fh = tape.mean(dh2)?;
        let f = tape.add(fw, fh)?;
        let f = tape.scale(f, T::of(w.freq))?;
        loss = tape.add(loss, f)?;
    }
    Ok(loss)
}

pub fn stack_frames(frames: &[FrameImage]) -> Result<Tensor> {
    let (h, w) = (frames[0].height(), frames[0].width());
    let mut data = Vec::with_capacity(frames.len() * 3 * h * w);
    for f in frames {
        if (f.height(), f.width()) != (h, w) {
            return Err(Error::Shape {
                op: "stack_frames",
                left: vec![h, w],
                right: vec![f.height(), f.width()],
            });
        }
        data.extend_from_slice(f.data());
    }
    Tensor::new(&[3 * frames.len(), h, w], data)
}

pub fn split_frames(stack: &Tensor) -> Result<Vec<FrameImage>> {
    let (h, w) = (stack.shape()[1], stack.shape()[2]);
    stack
        .data()
        .chunks(3 * h * w)
        .map(|c| FrameImage::new(h, w, c.to_vec()))
        .collect()
}

/// Training loss of four generated frames against four targets.
pub fn loss(generated: &[FrameImage; 4], targets: &[FrameImage; 4], w: &LossWeights) -> Result<f64> {
    let g = stack_frames(generated)?;
    let t = stack_frames(targets)?;
    g.expect_same_shape(&t, "loss")?;
    let mut tape = Tape::<f64>::new();
    let gv = tape.constant(g.cast());
    let tv = tape.constant(t.cast());
    let l = loss_on(&mut tape, gv, tv, w)?;
    Ok(tape.value(l).data()[0])
}

/// Momentum SGD with the restart-on-spike rule: a loss above five times the
/// previous one restores the previous parameters, clears momentum and halves
/// the rate.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd<T: Element> {
    pub lr: f64,
    pub momentum: f64,
    pub velocity: Vec<Tensor<T>>,
    prev: Option<(f64, Vec<Tensor<T>>)>,
}

impl<T: Element> Sgd<T> {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Self {
            lr,
            momentum,
            velocity: Vec::new(),
            prev: None,
        }
    }

    /// Extends the optimizer to cover additional parameters with zero momentum.
    pub fn extend(&mut self, params: &[Tensor<T>]) {
        for p in params {
            self.velocity.push(Tensor::zeros(p.shape()));
            if let Some((_, backup)) = self.prev.as_mut() {
                backup.push(p.clone());
            }
        }
    }

    /// Returns `false` when the step was rejected as a spike.
    pub fn step(&mut self, params: &mut [Tensor<T>], loss: f64, grads: &[Tensor<T>]) -> bool {
        if self.velocity.len() != params.len() {
            self.velocity = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        }
        if let Some((prev, backup)) = &self.prev {
            if !(loss <= 5.0 * prev) {
                params.clone_from_slice(backup);
                self.velocity.iter_mut().for_each(|v| *v = Tensor::zeros(v.shape()));
                self.lr /= 2.0;
                return false;
            }
        }
        self.prev = Some((loss, params.to_vec()));
        if self.lr == 0.0 {
            return true;
        }
        let (mu, lr) = (T::of(self.momentum), T::of(self.lr));
        for ((p, v), g) in params.iter_mut().zip(self.velocity.iter_mut()).zip(grads) {
            for ((pv, vv), &gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *vv = mu * *vv + gv;
                *pv = *pv - lr * *vv;
            }
        }
        true
    }

    /// Restores the last accepted parameters when `loss` would count as a spike.
    pub fn settle(&self, params: &mut [Tensor<T>], loss: f64) -> bool {
        match &self.prev {
            Some((prev, backup)) if !(loss <= 5.0 * prev) && backup.len() == params.len() => {
                params.clone_from_slice(backup);
                true
            }
            _ => false,
        }
    }
}

/// One stitched frame of a group.
#[derive(Clone, Debug)]
pub struct FrameTask<T: Element> {
    /// Position within the group, 0 for the group's first keyframe.
    pub pos: usize,
    pub alpha: f64,
    pub scheme: StitchScheme,
    /// `[12, H, W]` targets.
    pub target: Arc<Tensor<T>>,
}

/// Differentiable loss of one group as a function of its trainable tensors.
///
/// Parameter order: `[u_a, v_a]` when keyframe `a` is trainable, `[u_b, v_b]`
/// when the group has a keyframe `b`, then `k`, `b` for each reuse entry in
/// block-major order.
#[derive(Clone, Debug)]
pub struct GroupProblem<'m, T: Element> {
    pub model: &'m Model<T>,
    pub geom: Geometry,
    pub noise: Tensor<T>,
    pub tasks: Vec<FrameTask<T>>,
    pub weights: LossWeights,
    /// Fixed first keyframe; `None` means it is trained.
    pub fixed_a: Option<(Tensor<T>, Tensor<T>)>,
    /// `false` for a lone keyframe with no partner.
    pub has_b: bool,
    /// Group length minus one.
    pub m: usize,
    pub plan: Option<CachePlan>,
    /// Reference contributions when the reference frame is not trained.
    pub fixed_ref_dx: Option<Vec<Tensor<T>>>,
}

impl<T: Element> GroupProblem<'_, T> {
    fn reuse_entries(&self) -> Vec<(usize, usize)> {
        let Some(p) = &self.plan else { return vec![] };
        (0..p.n_blocks)
            .flat_map(|b| (0..p.frames).map(move |f| (b, f)))
            .filter(|&(b, f)| p.is_reuse(b, f))
            .collect()
    }

    /// Loss and gradients with respect to `params`.
    pub fn loss_and_grads(&self, params: &[Tensor<T>]) -> Result<(f64, Vec<Tensor<T>>)> {
        let mut tape = Tape::new();
        let leaves: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
        let loss = self.record(&mut tape, &leaves)?;
        let grads = tape.grad(loss, &leaves)?;
        Ok((tape.value(loss).data()[0].as_f64(), grads))
    }

    pub fn loss(&self, params: &[Tensor<T>]) -> Result<f64> {
        let mut tape = Tape::new();
        let leaves: Vec<Var> = params.iter().map(|p| tape.constant(p.clone())).collect();
        let loss = self.record(&mut tape, &leaves)?;
        Ok(tape.value(loss).data()[0].as_f64())
    }

    fn record(&self, tape: &mut Tape<T>, leaves: &[Var]) -> Result<Var> {
        let mut it = leaves.iter().copied();
        let mut next = || it.next().ok_or_else(|| Error::InvalidArgument("too few parameters".into()));
        let (ua, va) = match &self.fixed_a {
            Some((u, v)) => (tape.constant(u.clone()), tape.constant(v.clone())),
            None => (next()?, next()?),
        };
        let pa = tape.matmul(ua, va)?;
        let pb = if self.has_b {
            let (ub, vb) = (next()?, next()?);
            Some(tape.matmul(ub, vb)?)
        } else {
            None
        };
        let entries = self.reuse_entries();
        let mut affine = Vec::with_capacity(entries.len());
        for _ in &entries {
            affine.push((next()?, next()?));
        }
        let noise = tape.constant(self.noise.clone());

        let mut ref_dx: Option<Vec<Var>> = self
            .fixed_ref_dx
            .as_ref()
            .map(|v| v.iter().map(|t| tape.constant(t.clone())).collect());
        let mut total: Option<Var> = None;
        for task in &self.tasks {
            let prompt = match pb {
                Some(pb) if task.alpha != 0.0 => {
                    let a = tape.scale(pa, T::of(1.0 - task.alpha))?;
                    let b = tape.scale(pb, T::of(task.alpha))?;
                    tape.add(a, b)?
                }
                Some(pb) => {
                    let a = tape.scale(pa, T::one())?;
                    let b = tape.scale(pb, T::zero())?;
                    tape.add(a, b)?
                }
                None => pa,
            };
            let mut opts = ForwardOpts::default();
            if let Some(plan) = &self.plan {
                if task.pos >= 1 && task.pos < self.m {
                    let f = task.pos - 1;
                    let refs = ref_dx
                        .as_ref()
                        .ok_or_else(|| Error::MissingCache("reference frame must precede reused frames".into()))?;
                    opts.modes = (0..plan.n_blocks)
                        .map(|b| match entries.iter().position(|&e| e == (b, f)) {
                            Some(j) => BlockMode::Reuse {
                                dx: refs[b],
                                k: affine[j].0,
                                b: affine[j].1,
                            },
                            None => BlockMode::Compute,
                        })
                        .collect();
                }
            }
            let (out, fwd) = render_on(tape, self.model, &self.geom, noise, Some(prompt), &opts, task.scheme)?;
            if task.pos == 0 && ref_dx.is_none() {
                ref_dx = Some(fwd.dx.clone());
            }
            let target = tape.constant_arc(task.target.clone());
            let l = loss_on(tape, out, target, &self.weights)?;
            total = Some(match total {
                None => l,
                Some(t) => tape.add(t, l)?,
            });
        }
        total.ok_or_else(|| Error::InvalidArgument("group has no frames to fit".into()))
    }

    /// Block contributions of every task frame under the uncached network.
    pub fn record_dx(&self, params: &[Tensor<T>]) -> Result<Vec<(usize, Vec<Tensor<T>>)>> {
        let mut plain = self.clone();
        plain.plan = None;
        let mut tape = Tape::new();
        let leaves: Vec<Var> = params.iter().map(|p| tape.constant(p.clone())).collect();
        let mut it = leaves.iter().copied();
        let (ua, va) = match &self.fixed_a {
            Some((u, v)) => (tape.constant(u.clone()), tape.constant(v.clone())),
            None => (it.next().unwrap(), it.next().unwrap()),
        };
        let pa = tape.matmul(ua, va)?;
        let pb = if self.has_b {
            let (ub, vb) = (it.next().unwrap(), it.next().unwrap());
            Some(tape.matmul(ub, vb)?)
        } else {
            None
        };
        let noise = tape.constant(self.noise.clone());
        let mut out = Vec::new();
        for task in &self.tasks {
            let prompt = match pb {
                Some(pb) => {
                    let a = tape.scale(pa, T::of(1.0 - task.alpha))?;
                    let b = tape.scale(pb, T::of(task.alpha))?;
                    tape.add(a, b)?
                }
                None => pa,
            };
            let fwd = self.model.forward_on(&mut tape, noise, Some(prompt), &ForwardOpts::default())?;
            out.push((task.pos, fwd.dx.iter().map(|&d| tape.value(d).clone()).collect()));
        }
        Ok(out)
    }
}

/// Keyframe factors during fitting.
#[derive(Clone, Debug, PartialEq)]
pub struct Factors<T: Element> {
    pub u: Tensor<T>,
    pub v: Tensor<T>,
}

impl Factors<f32> {
    pub fn random(rank: usize, d: usize, std: f64, seed: u64) -> Result<Self> {
        let p = LowRankPrompt::random(rank, d, std as f32, seed)?;
        Ok(Self { u: p.u, v: p.v })
    }

    pub fn to_prompt(&self) -> Result<LowRankPrompt> {
        LowRankPrompt::new(self.u.clone(), self.v.clone())
    }
}

/// State carried from phase one into phase two for one group.
#[derive(Clone, Debug)]
pub struct GroupFit {
    pub keyframes: Vec<Factors<f32>>,
    pub opt: Sgd<f32>,
    pub plan: CachePlan,
    pub trace: Vec<f64>,
}

/// Which keyframes of a group are free.
#[derive(Clone, Debug)]
pub struct GroupJob {
    /// `None` when keyframe `a` is trained in this group.
    pub fixed_a: Option<Factors<f32>>,
    /// Initial value of every trained keyframe, `a` first.
    pub init: Vec<Factors<f32>>,
    pub has_b: bool,
    /// Stitched frames `0..=m` (or just 0 for a lone keyframe).
    pub tasks: Vec<FrameTask<f32>>,
    pub m: usize,
}

fn run<T: Element>(
    problem: &GroupProblem<T>,
    params: &mut [Tensor<T>],
    opt: &mut Sgd<T>,
    iters: usize,
    trace: &mut Vec<f64>,
) -> Result<()> {
    for _ in 0..iters {
        let (l, g) = problem.loss_and_grads(params)?;
        trace.push(l);
        opt.step(params, l, &g);
    }
    if iters > 0 {
        let l = problem.loss(params)?;
        opt.settle(params, l);
    }
    Ok(())
}

fn problem_for<'m>(model: &'m Model, noise: &Tensor, job: &GroupJob, cfg: &FitConfig) -> GroupProblem<'m, f32> {
    GroupProblem {
        model,
        geom: Geometry::new(model),
        noise: noise.clone(),
        tasks: job.tasks.clone(),
        weights: cfg.weights,
        fixed_a: job.fixed_a.as_ref().map(|f| (f.u.clone(), f.v.clone())),
        has_b: job.has_b,
        m: job.m,
        plan: None,
        fixed_ref_dx: None,
    }
}

fn flatten(k: &[Factors<f32>]) -> Vec<Tensor> {
    k.iter().flat_map(|f| [f.u.clone(), f.v.clone()]).collect()
}

fn unflatten(p: &[Tensor]) -> Vec<Factors<f32>> {
    p.chunks(2)
        .map(|c| Factors {
            u: c[0].clone(),
            v: c[1].clone(),
        })
        .collect()
}

/// Phase one for a single group.
pub fn fit_group_phase1(model: &Model, noise: &Tensor, job: &GroupJob, cfg: &FitConfig) -> Result<GroupFit> {
    cfg.validate()?;
    let problem = problem_for(model, noise, job, cfg);
    let mut params = flatten(&job.init);
    let mut opt = Sgd::new(cfg.lr, cfg.momentum);
    let mut trace = Vec::new();
    run(&problem, &mut params, &mut opt, cfg.phase1_iters, &mut trace)?;
    let n_cross = model.config().cross_blocks().len();
    Ok(GroupFit {
        keyframes: unflatten(&params),
        opt,
        plan: CachePlan::all_compute(model.config().n_blocks(), n_cross, job.m.saturating_sub(1)).with_kv(cfg.kv_cache),
        trace,
    })
}

/// Phase two for a single group, continuing phase one's optimizer.
pub fn fit_group_phase2(
    model: &Model,
    noise: &Tensor,
    job: &GroupJob,
    cfg: &FitConfig,
    phase1: GroupFit,
) -> Result<GroupFit> {
    cfg.validate()?;
    let mut problem = problem_for(model, noise, job, cfg);
    let mut params = flatten(&phase1.keyframes);
    let frames = job.m.saturating_sub(1);
    let mcfg = model.config();
    if frames == 0 || !job.has_b {
        let mut fit = phase1;
        let mut opt = fit.opt.clone();
        run(&problem, &mut params, &mut opt, cfg.phase2_iters, &mut fit.trace)?;
        fit.keyframes = unflatten(&params);
        fit.opt = opt;
        return Ok(fit);
    }
    let dx = problem.record_dx(&params)?;
    let reference = match dx.iter().find(|(pos, _)| *pos == 0) {
        Some((_, r)) => r.clone(),
        None => {
            // frame 0 belongs to the fixed keyframe
            let r = reference_dx(model, noise, job)?;
            problem.fixed_ref_dx = Some(r.clone());
            r
        }
    };
    let mid: Vec<Vec<Tensor>> = (1..job.m)
        .map(|pos| {
            dx.iter()
                .find(|(p, _)| *p == pos)
                .map(|(_, d)| d.clone())
                .ok_or_else(|| Error::InvalidArgument(format!("group lacks frame {pos}")))
        })
        .collect::<Result<_>>()?;
    let plan = build_plan(mcfg, &reference, &mid, cfg.ratio, cfg.kb_init, cfg.kv_cache)?;
    problem.plan = Some(plan.clone());
    let mut opt = phase1.opt;
    let mut extra = Vec::new();
    for a in plan.reuse.iter().flatten() {
        extra.push(Tensor::new(&[a.k.len()], a.k.clone())?);
        extra.push(Tensor::new(&[a.b.len()], a.b.clone())?);
    }
    opt.extend(&extra);
    let n_key = params.len();
    params.extend(extra);
    let mut trace = phase1.trace;
    run(&problem, &mut params, &mut opt, cfg.phase2_iters, &mut trace)?;
    let mut plan = plan;
    let mut it = params[n_key..].chunks(2);
    for a in plan.reuse.iter_mut().flatten() {
        let c = it.next().expect("one pair per reuse entry");
        *a = ChannelAffine {
            k: c[0].data().to_vec(),
            b: c[1].data().to_vec(),
        };
    }
    Ok(GroupFit {
        keyframes: unflatten(&params[..n_key]),
        opt,
        plan,
        trace,
    })
}

/// Contributions of the fixed keyframe `a` on its own frame.
fn reference_dx(model: &Model, noise: &Tensor, job: &GroupJob) -> Result<Vec<Tensor>> {
    let a = job
        .fixed_a
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("reference keyframe missing".into()))?;
    let prompt = a.u.matmul(&a.v)?;
    let mut tape = Tape::new();
    let n = tape.constant(noise.clone());
    let p = tape.constant(prompt);
    let fwd = model.forward_on(&mut tape, n, Some(p), &ForwardOpts::default())?;
    Ok(fwd.dx.iter().map(|&d| tape.value(d).clone()).collect())
}

/// Seeded initial factors for the first keyframe.
pub fn initial_factors(cfg: &FitConfig, d: usize) -> Result<Factors<f32>> {
    let rank = cfg.rank.min(PROMPT_TOKENS).min(d);
    Factors::random(rank, d, cfg.init_std, cfg.seed)
}

/// Perturbs factors slightly so a warm-started keyframe is not an exact copy.
pub fn jitter(f: &Factors<f32>, std: f64, seed: u64) -> Factors<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = Normal::new(0.0f32, std as f32).unwrap();
    let mut out = f.clone();
    for v in out.u.data_mut().iter_mut().chain(out.v.data_mut()) {
        *v += n.sample(&mut rng);
    }
    out
}

/// Uncached output frames, stacked `[12, H, W]`, for a composed prompt.
pub fn render(model: &Model, noise: &Tensor, prompt: &Tensor, scheme: StitchScheme) -> Result<Tensor> {
    let geom = Geometry::new(model);
    let mut tape = Tape::new();
    let n = tape.constant(noise.clone());
    let p = tape.constant(prompt.clone());
    let (out, _) = render_on(&mut tape, model, &geom, n, Some(p), &ForwardOpts::default(), scheme)?;
    Ok(tape.value(out).clone())
}
