//! Two-stage enhancement pipeline: coarse-space construction (FFT
//! low-pass + downsampling), illumination composition y = (x + a*z) * z
//! and its closed-form inversion, the Stage-II refinement forward, and
//! both training loops.
//!
//! Stage I trains the Bayesian coarse model against the ground-truth
//! latent z_gt = Down(LP((sqrt(x^2 + 4*a*y) - x) / (2*a)), r). Stage II
//! trains the deterministic refiner with that same ground-truth latent
//! substituted for Stage-I predictions, so Stage-I is never invoked
//! during Stage-II training.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::backbone::Model;
use crate::ndtensor::{
    backward, bilinear_resize, irfft2, rfft2, Scalar, Tape, Tensor, Var,
};
use crate::synthdata::Sample;
use crate::variational::{
    elbo_minibatch_loss, stream_id, AdaptivePrior, DataTerm, EpsilonSource,
};
use crate::{Error, Result};

/// Exact rational downscale factor r = num/den in (0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Scale {
    pub num: u32,
    pub den: u32,
}

impl Scale {
    pub fn new(num: u32, den: u32) -> Result<Self> {
        if num == 0 || den == 0 || num > den {
            return Err(Error::Config(format!(
                "scale factor {num}/{den} must lie in (0, 1]"
            )));
        }
        Ok(Scale { num, den })
    }

    pub fn value(&self) -> f64 {
        self.num as f64 / self.den as f64
    }

    /// dim * r, required to be a positive integer.
    pub fn apply(&self, dim: usize) -> Result<usize> {
        let scaled = dim * self.num as usize;
        if scaled % self.den as usize != 0 || scaled == 0 {
            return Err(Error::Config(format!(
                "dimension {dim} times scale {}/{} is not a positive integer",
                self.num, self.den
            )));
        }
        Ok(scaled / self.den as usize)
    }
}

/// Enhancement pipeline constants.
#[derive(Debug, Clone, Copy)]
pub struct PipelineConfig {
    pub r: Scale,
    pub alpha: f64,
    /// Fraction of the normalized frequency band kept by the low-pass
    /// filter; tied to r by default so the retained band fits the coarse
    /// grid without aliasing.
    pub lp_keep_fraction: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let r = Scale { num: 1, den: 16 };
        PipelineConfig {
            r,
            alpha: 0.025,
            lp_keep_fraction: r.value(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha <= 0.0 {
            return Err(Error::Config("alpha must be > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.lp_keep_fraction) || self.lp_keep_fraction == 0.0 {
            return Err(Error::Config("lp_keep_fraction must be in (0, 1]".into()));
        }
        Ok(())
    }
}

/// Training hyperparameters shared by both stages.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub iters: usize,
    pub lr_init: f64,
    pub lr_final: f64,
    /// None: default to batch_size / dataset_len (one over the number of
    /// minibatches per epoch equivalent).
    pub kl_weight: Option<f64>,
    pub n_mc: usize,
    pub seed: u64,
    pub crop_size: Option<usize>,
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 8,
            iters: 1000,
            lr_init: 2e-4,
            lr_final: 1e-6,
            kl_weight: None,
            n_mc: 1,
            seed: 0,
            crop_size: None,
            grad_clip: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.n_mc == 0 {
            return Err(Error::Config("batch_size and n_mc must be >= 1".into()));
        }
        if self.lr_init <= 0.0 || self.lr_final <= 0.0 || self.lr_final > self.lr_init {
            return Err(Error::Config(
                "learning rates must be positive with lr_final <= lr_init".into(),
            ));
        }
        Ok(())
    }
}

/// Zero all spectral bins whose normalized frequency exceeds
/// keep_fraction/2 on either axis. Real output, idempotent, DC always kept.
pub fn lowpass<T: Scalar>(x: &Tensor<T>, keep_fraction: f64) -> Result<Tensor<T>> {
    if !(0.0..=1.0).contains(&keep_fraction) || keep_fraction == 0.0 {
        return Err(Error::Config("keep_fraction must be in (0, 1]".into()));
    }
    let (h, w) = (x.shape()[1], x.shape()[2]);
    let mut spec = rfft2(x)?;
    let cutoff = keep_fraction / 2.0;
    for c in 0..spec.channels {
        for u in 0..h {
            let fu = u.min(h - u) as f64 / h as f64;
            for v in 0..w {
                let fv = v.min(w - v) as f64 / w as f64;
                if fu > cutoff + 1e-12 || fv > cutoff + 1e-12 {
                    spec.data[(c * h + u) * w + v] =
                        rustfft::num_complex::Complex::new(T::zero(), T::zero());
                }
            }
        }
    }
    irfft2(&spec, h, w).map_err(Error::Tensor)
}

/// Down(LP(x), r): low-pass then bilinear resize to the coarse grid.
pub fn coarse_input<T: Scalar>(x: &Tensor<T>, cfg: &PipelineConfig) -> Result<Tensor<T>> {
    cfg.validate()?;
    let (h, w) = (x.shape()[1], x.shape()[2]);
    let (ch, cw) = (cfg.r.apply(h)?, cfg.r.apply(w)?);
    let lp = lowpass(x, cfg.lp_keep_fraction)?;
    bilinear_resize(&lp, ch, cw).map_err(Error::Tensor)
}

/// One posterior-sampled Stage-I forward over the coarse input. Returns z
/// at coarse resolution; upsampling happens once after aggregation or
/// selection.
pub fn stage1_sample<T: Scalar>(
    x: &Tensor<T>,
    f: &Model<T>,
    cfg: &PipelineConfig,
    eps: &mut EpsilonSource,
) -> Result<Tensor<T>> {
    let coarse = coarse_input(x, cfg)?;
    f.forward(&coarse, Some(eps))
}

/// First-stage composition: y = (x + alpha * z) .* z.
pub fn compose_illumination<T: Scalar>(
    x: &Tensor<T>,
    z: &Tensor<T>,
    alpha: f64,
) -> Result<Tensor<T>> {
    if alpha < 0.0 {
        return Err(Error::Domain("alpha must be >= 0".into()));
    }
    let a = T::of_f64(alpha);
    x.zip(z, "compose_illumination", |xv, zv| (xv + a * zv) * zv)
        .map_err(Error::Tensor)
}

/// Non-negative root of the composition solved for z:
/// z = (sqrt(x^2 + 4*alpha*y) - x) / (2*alpha).
pub fn invert_illumination<T: Scalar>(
    x: &Tensor<T>,
    y: &Tensor<T>,
    alpha: f64,
) -> Result<Tensor<T>> {
    if alpha <= 0.0 {
        return Err(Error::Domain("alpha must be > 0 (inversion divides by 2*alpha)".into()));
    }
    if y.data().iter().any(|&v| v < T::zero()) {
        return Err(Error::Domain("invert_illumination requires y >= 0 elementwise".into()));
    }
    let a = T::of_f64(alpha);
    let four = T::of_f64(4.0);
    let two = T::of_f64(2.0);
    x.zip(y, "invert_illumination", |xv, yv| {
        ((xv * xv + four * a * yv).sqrt() - xv) / (two * a)
    })
    .map_err(Error::Tensor)
}

/// Ground-truth latent for a pair (x, y): full-resolution LP(invert) and
/// its coarse downsampling (the Stage-I supervision target).
#[derive(Debug, Clone)]
pub struct GroundTruthLatent<T> {
    /// LP((sqrt(x^2 + 4*alpha*y) - x) / (2*alpha)) at full resolution.
    pub full: Tensor<T>,
    /// `full` bilinearly resized to the coarse grid.
    pub coarse: Tensor<T>,
}

pub fn ground_truth_latent<T: Scalar>(
    x: &Tensor<T>,
    y: &Tensor<T>,
    cfg: &PipelineConfig,
) -> Result<GroundTruthLatent<T>> {
    let z = invert_illumination(x, y, cfg.alpha)?;
    let full = lowpass(&z, cfg.lp_keep_fraction)?;
    let (h, w) = (x.shape()[1], x.shape()[2]);
    let coarse = bilinear_resize(&full, cfg.r.apply(h)?, cfg.r.apply(w)?)?;
    Ok(GroundTruthLatent { full, coarse })
}

/// Stage-II forward: y_hat = G([x, z_up]) with z_up already at x's
/// resolution.
pub fn stage2_forward<T: Scalar>(
    x: &Tensor<T>,
    z_up: &Tensor<T>,
    g: &Model<T>,
) -> Result<Tensor<T>> {
    let c = x.shape()[0];
    if g.spec.in_channels != 2 * c {
        return Err(Error::Domain(format!(
            "stage-2 model expects {} input channels, image has {c}",
            g.spec.in_channels
        )));
    }
    let joint = crate::ndtensor::concat_channels(x, z_up)?;
    g.forward(&joint, None)
}

// ---------------------------------------------------------------------
// Optimizer: Adam with global-norm gradient clipping and a cosine
// learning-rate schedule.
// ---------------------------------------------------------------------

pub struct Adam<T> {
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    step: usize,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(shapes: &[Vec<usize>]) -> Self {
        Adam {
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One update over aligned (param, grad) pairs. Gradients are clipped
    /// to a global L2 norm before the moment updates.
    pub fn step(
        &mut self,
        params: &mut [&mut Tensor<T>],
        grads: &[Tensor<T>],
        lr: f64,
        clip: f64,
    ) -> Result<()> {
        let total_sq: f64 = grads
            .iter()
            .map(|g| g.data().iter().map(|&v| v.as_f64().powi(2)).sum::<f64>())
            .sum();
        if !total_sq.is_finite() {
            return Err(Error::Domain("non-finite gradient".into()));
        }
        let norm = total_sq.sqrt();
        let scale = if clip > 0.0 && norm > clip { clip / norm } else { 1.0 };

        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads.iter())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let (b1, b2, e) = (self.beta1, self.beta2, self.eps);
            *m = m.zip(g, "adam_m", |mv, gv| {
                T::of_f64(b1 * mv.as_f64() + (1.0 - b1) * gv.as_f64() * scale)
            })?;
            *v = v.zip(g, "adam_v", |vv, gv| {
                let gs = gv.as_f64() * scale;
                T::of_f64(b2 * vv.as_f64() + (1.0 - b2) * gs * gs)
            })?;
            let mhat = m.map(|mv| T::of_f64(mv.as_f64() / bc1));
            let vhat = v.map(|vv| T::of_f64(vv.as_f64() / bc2));
            let upd = mhat.zip(&vhat, "adam_upd", |mv, vv| {
                T::of_f64(lr * mv.as_f64() / (vv.as_f64().sqrt() + e))
            })?;
            **p = p.sub(&upd)?;
        }
        Ok(())
    }
}

/// Cosine annealing from lr_init to lr_final over `total` steps.
pub fn cosine_lr(step: usize, total: usize, lr_init: f64, lr_final: f64) -> f64 {
    if total <= 1 {
        return lr_init;
    }
    let t = step as f64 / (total - 1) as f64;
    lr_final + 0.5 * (lr_init - lr_final) * (1.0 + (std::f64::consts::PI * t).cos())
}

// ---------------------------------------------------------------------
// Training loops.
// ---------------------------------------------------------------------

/// One CSV row per optimizer step.
#[derive(Debug, Clone)]
pub struct StepLog {
    pub step: usize,
    pub data_term: f64,
    pub kl_term: f64,
    pub lr: f64,
}

pub struct TrainTrace {
    pub steps: Vec<StepLog>,
}

/// Uniformly sample a (possibly cropped) training pair, picking one of
/// the sample's targets per visit.
fn draw_pair<T: Scalar>(
    dataset: &[Sample<T>],
    crop: Option<usize>,
    rng: &mut ChaCha12Rng,
) -> (Tensor<T>, Tensor<T>) {
    let s = &dataset[rng.gen_range(0..dataset.len())];
    let y = &s.targets[rng.gen_range(0..s.targets.len())];
    let (h, w) = (s.x.shape()[1], s.x.shape()[2]);
    match crop {
        Some(c) if c < h && c < w => {
            let oy = rng.gen_range(0..=h - c);
            let ox = rng.gen_range(0..=w - c);
            (crop_chw(&s.x, oy, ox, c), crop_chw(y, oy, ox, c))
        }
        _ => (s.x.clone(), y.clone()),
    }
}

fn crop_chw<T: Scalar>(t: &Tensor<T>, oy: usize, ox: usize, c: usize) -> Tensor<T> {
    let (ch, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let _ = h;
    Tensor::from_fn(&[ch, c, c], |i| {
        let cc = i / (c * c);
        let y = (i / c) % c;
        let x = i % c;
        t.data()[(cc * h + oy + y) * w + ox + x]
    })
}

fn resolve_kl_weight(cfg: &TrainConfig, dataset_len: usize) -> f64 {
    cfg.kl_weight
        .unwrap_or(cfg.batch_size as f64 / dataset_len.max(1) as f64)
}

/// Stage-I training: minimize the minibatch ELBO-style loss of the
/// Bayesian coarse model against z_gt targets, updating the EMA prior
/// after every optimizer step.
pub fn train_stage1<T: Scalar>(
    dataset: &[Sample<T>],
    f: &mut Model<T>,
    prior: &mut AdaptivePrior<T>,
    cfg: &TrainConfig,
    pcfg: &PipelineConfig,
) -> Result<TrainTrace> {
    cfg.validate()?;
    pcfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Config("empty training dataset".into()));
    }
    if f.bayes_module().is_none() {
        return Err(Error::Config("stage-1 training requires a bayesian model".into()));
    }
    let kl_weight = resolve_kl_weight(cfg, dataset.len());
    let mut data_rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    data_rng.set_stream(stream_id("stage1-data"));
    let mut eps = EpsilonSource::with_label(cfg.seed, "stage1");

    let shapes: Vec<Vec<usize>> = f
        .bayes_module()
        .unwrap()
        .params
        .iter()
        .flat_map(|(_, p)| [p.mu.shape().to_vec(), p.rho.shape().to_vec()])
        .collect();
    let mut opt = Adam::<T>::new(&shapes);
    let mut steps = Vec::with_capacity(cfg.iters);

    for step in 0..cfg.iters {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let (x, y) = draw_pair(dataset, cfg.crop_size, &mut data_rng);
            let gt = ground_truth_latent(&x, &y, pcfg)?;
            batch.push((coarse_input(&x, pcfg)?, gt.coarse));
        }

        let eval = elbo_minibatch_loss(
            &batch,
            &*f,
            prior,
            T::of_f64(kl_weight),
            cfg.n_mc,
            DataTerm::SquaredL2,
            &mut eps,
            true,
        )
        .map_err(|e| match e {
            Error::Tensor(crate::ndtensor::TensorError::NotFinite { .. }) => {
                Error::Divergence { step }
            }
            other => other,
        })?;
        if !eval.loss.as_f64().is_finite() {
            return Err(Error::Divergence { step });
        }

        let lr = cosine_lr(step, cfg.iters, cfg.lr_init, cfg.lr_final);
        let module = f.bayes_module_mut().unwrap();
        let mut grads = Vec::with_capacity(2 * module.params.len());
        for (gm, gr) in &eval.grads {
            grads.push(gm.clone());
            grads.push(gr.clone());
        }
        {
            let mut refs: Vec<&mut Tensor<T>> = Vec::with_capacity(grads.len());
            for (_, p) in module.params.iter_mut() {
                refs.push(&mut p.mu);
                refs.push(&mut p.rho);
            }
            opt.step(&mut refs, &grads, lr, cfg.grad_clip)
                .map_err(|_| Error::Divergence { step })?;
        }
        prior.ema_update(f.bayes_module().unwrap())?;

        steps.push(StepLog {
            step,
            data_term: eval.data_term.as_f64(),
            kl_term: eval.kl_term.as_f64(),
            lr,
        });
    }
    Ok(TrainTrace { steps })
}

/// Stage-II training: minimize L1(G([x, Up(z_gt_coarse)]), y). The
/// Stage-I model is never invoked here; supervision comes from the
/// closed-form latent.
pub fn train_stage2<T: Scalar>(
    dataset: &[Sample<T>],
    g: &mut Model<T>,
    cfg: &TrainConfig,
    pcfg: &PipelineConfig,
) -> Result<TrainTrace> {
    cfg.validate()?;
    pcfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Config("empty training dataset".into()));
    }
    if g.bayes_module().is_some() {
        return Err(Error::Config("stage-2 training requires a deterministic model".into()));
    }
    let mut data_rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    data_rng.set_stream(stream_id("stage2-data"));

    let shapes: Vec<Vec<usize>> = match &g.weights {
        crate::backbone::ModelWeights::Deterministic(ws) => {
            ws.iter().map(|(_, t)| t.shape().to_vec()).collect()
        }
        _ => unreachable!(),
    };
    let mut opt = Adam::<T>::new(&shapes);
    let mut steps = Vec::with_capacity(cfg.iters);

    for step in 0..cfg.iters {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let (x, y) = draw_pair(dataset, cfg.crop_size, &mut data_rng);
            let gt = ground_truth_latent(&x, &y, pcfg)?;
            let z_up = bilinear_resize(&gt.coarse, x.shape()[1], x.shape()[2])?;
            let joint = crate::ndtensor::concat_channels(&x, &z_up)?;
            batch.push((joint, y));
        }

        let tape = Tape::new();
        let weight_vars: Vec<Var<'_, T>> = match &g.weights {
            crate::backbone::ModelWeights::Deterministic(ws) => {
                ws.iter().map(|(_, t)| tape.leaf(t.clone())).collect()
            }
            _ => unreachable!(),
        };
        let mut loss_acc: Option<Var<'_, T>> = None;
        for (joint, y) in &batch {
            let pred = g.forward_on_tape(&tape, joint, &weight_vars)?;
            let err = pred
                .sub(tape.constant(y.clone()))
                .and_then(|r| r.abs())
                .and_then(|r| r.sum())
                .map_err(Error::Tensor)?;
            loss_acc = Some(match loss_acc {
                Some(acc) => acc.add(err).map_err(Error::Tensor)?,
                None => err,
            });
        }
        let loss = loss_acc
            .expect("non-empty batch")
            .scale(T::one() / T::of_f64(cfg.batch_size as f64))
            .map_err(|_| Error::Divergence { step })?;
        let loss_v = loss.value().item().map_err(Error::Tensor)?.as_f64();
        if !loss_v.is_finite() {
            return Err(Error::Divergence { step });
        }

        let grads_all = backward(loss).map_err(Error::Tensor)?;
        let grads: Vec<Tensor<T>> = weight_vars.iter().map(|v| grads_all.grad(*v)).collect();
        let lr = cosine_lr(step, cfg.iters, cfg.lr_init, cfg.lr_final);
        match &mut g.weights {
            crate::backbone::ModelWeights::Deterministic(ws) => {
                let mut refs: Vec<&mut Tensor<T>> =
                    ws.iter_mut().map(|(_, t)| t).collect();
                opt.step(&mut refs, &grads, lr, cfg.grad_clip)
                    .map_err(|_| Error::Divergence { step })?;
            }
            _ => unreachable!(),
        }

        steps.push(StepLog {
            step,
            data_term: loss_v,
            kl_term: 0.0,
            lr,
        });
    }
    Ok(TrainTrace { steps })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{build, BackboneSpec, ModelKind};
    use rand::Rng;
    use crate::synthdata::gen_one_to_many;
    use proptest::prelude::*;

    fn desk_pcfg() -> PipelineConfig {
        let r = Scale::new(1, 4).unwrap();
        PipelineConfig {
            r,
            alpha: 0.025,
            lp_keep_fraction: r.value(),
        }
    }

    #[test]
    fn lowpass_preserves_constants_and_full_band_identity() {
        let x = Tensor::<f64>::full(&[3, 16, 16], 0.3);
        let lp = lowpass(&x, 0.25).unwrap();
        assert!(x.max_abs_diff(&lp) < 1e-10);

        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let y = Tensor::from_fn(&[1, 12, 12], |_| rng.gen::<f64>());
        let id = lowpass(&y, 1.0).unwrap();
        assert!(y.max_abs_diff(&id) < 1e-10);
    }

    #[test]
    fn lowpass_is_idempotent_and_contractive() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let x = Tensor::from_fn(&[3, 32, 32], |_| rng.gen::<f64>());
        let once = lowpass(&x, 0.25).unwrap();
        let twice = lowpass(&once, 0.25).unwrap();
        assert!(once.max_abs_diff(&twice) < 1e-9);
        assert!(once.l2_norm() <= x.l2_norm());
    }

    #[test]
    fn coarse_input_shape_contract() {
        let cfg = PipelineConfig::default(); // r = 1/16
        let x = Tensor::<f64>::full(&[3, 128, 128], 0.3);
        let coarse = coarse_input(&x, &cfg).unwrap();
        assert_eq!(coarse.shape(), &[3, 8, 8]);
        assert!(coarse.data().iter().all(|&v| (v - 0.3).abs() < 1e-10));

        // Degenerate scale: identity.
        let id_cfg = PipelineConfig {
            r: Scale::new(1, 1).unwrap(),
            alpha: 0.025,
            lp_keep_fraction: 1.0,
        };
        let small = Tensor::from_fn(&[1, 8, 8], |i| i as f64 / 64.0);
        assert!(coarse_input(&small, &id_cfg).unwrap().max_abs_diff(&small) < 1e-10);

        // Non-integral coarse size.
        let bad = Tensor::<f64>::zeros(&[3, 100, 100]);
        assert!(coarse_input(&bad, &cfg).is_err());
    }

    #[test]
    fn compose_worked_example_and_edge_cases() {
        let x = Tensor::<f64>::full(&[1, 2, 2], 0.5);
        let z = Tensor::<f64>::full(&[1, 2, 2], 0.8);
        let y = compose_illumination(&x, &z, 0.025).unwrap();
        assert!(y.data().iter().all(|&v| (v - 0.416).abs() < 1e-12));

        // alpha = 0 reduces to x .* z; z = 1 gives identity.
        let y0 = compose_illumination(&x, &z, 0.0).unwrap();
        assert!(y0.data().iter().all(|&v| (v - 0.4).abs() < 1e-15));
        let unit = compose_illumination(&x, &Tensor::ones(&[1, 2, 2]), 0.0).unwrap();
        assert!(unit.max_abs_diff(&x) < 1e-15);
    }

    #[test]
    fn invert_worked_example_and_zero_target() {
        let x = Tensor::<f64>::full(&[1, 1, 1], 0.5);
        let y = Tensor::<f64>::full(&[1, 1, 1], 0.416);
        let z = invert_illumination(&x, &y, 0.025).unwrap();
        assert!((z.data()[0] - 0.8).abs() < 1e-12);

        let z0 = invert_illumination(&x, &Tensor::zeros(&[1, 1, 1]), 0.025).unwrap();
        assert!(z0.data()[0].abs() < 1e-12);

        assert!(invert_illumination(&x, &y, 0.0).is_err());
        let neg = Tensor::<f64>::full(&[1, 1, 1], -0.1);
        assert!(invert_illumination(&x, &neg, 0.025).is_err());
    }

    proptest! {
        #[test]
        fn compose_invert_roundtrip(
            xv in 0.0f64..1.0,
            zv in 0.0f64..2.0,
        ) {
            let x = Tensor::full(&[1, 1, 1], xv);
            let z = Tensor::full(&[1, 1, 1], zv);
            let y = compose_illumination(&x, &z, 0.025).unwrap();
            // y >= 0 holds on this domain, so inversion applies.
            let back = invert_illumination(&x, &y, 0.025).unwrap();
            prop_assert!((back.data()[0] - zv).abs() < 1e-9);
        }
    }

    #[test]
    fn stage1_sample_contract() {
        let pcfg = desk_pcfg();
        let spec = BackboneSpec {
            base_channels: 4,
            ..BackboneSpec::new(3, 3)
        };
        let f = build::<f64>(&spec, ModelKind::Bayesian, 1);
        let x = Tensor::from_fn(&[3, 32, 32], |i| (i % 9) as f64 / 9.0);
        let mut e1 = EpsilonSource::new(1, 0);
        let z = stage1_sample(&x, &f, &pcfg, &mut e1).unwrap();
        assert_eq!(z.shape(), &[3, 8, 8]);
        let mut e2 = EpsilonSource::new(1, 1);
        let z2 = stage1_sample(&x, &f, &pcfg, &mut e2).unwrap();
        assert!(z.sub(&z2).unwrap().l2_norm() > 0.0);
    }

    #[test]
    fn stage2_forward_checks_channels() {
        let g = build::<f64>(
            &BackboneSpec {
                base_channels: 4,
                ..BackboneSpec::new(6, 3)
            },
            ModelKind::Deterministic,
            2,
        );
        let x = Tensor::<f64>::full(&[3, 8, 8], 0.4);
        let z = Tensor::<f64>::full(&[3, 8, 8], 0.9);
        let y = stage2_forward(&x, &z, &g).unwrap();
        assert_eq!(y.shape(), &[3, 8, 8]);
        let y2 = stage2_forward(&x, &z, &g).unwrap();
        assert_eq!(y, y2);

        let bad_g = build::<f64>(
            &BackboneSpec {
                base_channels: 4,
                ..BackboneSpec::new(3, 3)
            },
            ModelKind::Deterministic,
            2,
        );
        assert!(stage2_forward(&x, &z, &bad_g).is_err());
    }

    #[test]
    fn zero_iteration_training_is_a_no_op() {
        let pcfg = desk_pcfg();
        let dataset = gen_one_to_many::<f64>(1, 2, 32, 2, 0.3).unwrap();
        let spec = BackboneSpec {
            base_channels: 4,
            ..BackboneSpec::new(3, 3)
        };
        let mut f = build::<f64>(&spec, ModelKind::Bayesian, 3);
        let before = f.bayes_module().unwrap().params[0].1.mu.clone();
        let mut prior = AdaptivePrior::from_posterior(f.bayes_module().unwrap(), 0.999);
        let cfg = TrainConfig {
            iters: 0,
            batch_size: 2,
            ..TrainConfig::default()
        };
        let trace = train_stage1(&dataset, &mut f, &mut prior, &cfg, &pcfg).unwrap();
        assert!(trace.steps.is_empty());
        assert_eq!(f.bayes_module().unwrap().params[0].1.mu, before);
    }

    #[test]
    fn stage1_initial_kl_is_zero_and_loss_decreases() {
        let pcfg = desk_pcfg();
        let dataset = gen_one_to_many::<f64>(5, 4, 32, 2, 0.3).unwrap();
        let spec = BackboneSpec {
            base_channels: 4,
            ..BackboneSpec::new(3, 3)
        };
        let mut f = build::<f64>(&spec, ModelKind::Bayesian, 7);
        let mut prior = AdaptivePrior::from_posterior(f.bayes_module().unwrap(), 0.999);
        let cfg = TrainConfig {
            iters: 60,
            batch_size: 4,
            lr_init: 1e-2,
            lr_final: 1e-3,
            seed: 7,
            ..TrainConfig::default()
        };
        let trace = train_stage1(&dataset, &mut f, &mut prior, &cfg, &pcfg).unwrap();
        assert!(trace.steps[0].kl_term.abs() < 1e-9);
        assert!(trace.steps.iter().all(|s| s.data_term.is_finite()));
        assert!(trace.steps.last().unwrap().data_term < trace.steps[0].data_term);
    }

    #[test]
    fn stage2_training_decreases_l1_without_touching_stage1() {
        let pcfg = desk_pcfg();
        let dataset = gen_one_to_many::<f64>(6, 4, 32, 2, 0.3).unwrap();
        let f = build::<f64>(
            &BackboneSpec {
                base_channels: 4,
                ..BackboneSpec::new(3, 3)
            },
            ModelKind::Bayesian,
            8,
        );
        let mut g = build::<f64>(
            &BackboneSpec {
                base_channels: 4,
                ..BackboneSpec::new(6, 3)
            },
            ModelKind::Deterministic,
            9,
        );
        let cfg = TrainConfig {
            iters: 40,
            batch_size: 4,
            lr_init: 1e-2,
            lr_final: 1e-3,
            seed: 8,
            ..TrainConfig::default()
        };
        let trace = train_stage2(&dataset, &mut g, &cfg, &pcfg).unwrap();
        assert_eq!(f.forward_count(), 0);
        assert!(trace.steps.last().unwrap().data_term < trace.steps[0].data_term);
    }
}
