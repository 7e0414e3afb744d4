//! Inference under uncertainty: sample K coarse candidates from the
//! Bayesian Stage-I model, aggregate them (Monte-Carlo mean) or select
//! one (no-reference IQA ranking), upsample the winner once, and run a
//! single Stage-II refinement pass. Also houses the full-reference
//! metrics (PSNR, SSIM) and the pluggable IQA registry.

use std::collections::BTreeMap;

use crate::backbone::Model;
use crate::ndtensor::{bilinear_resize, Scalar, Tensor};
use crate::pipeline::{
    coarse_input, compose_illumination, stage1_sample, stage2_forward, PipelineConfig,
};
use crate::variational::EpsilonSource;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InferenceMode {
    MonteCarlo,
    Rank,
}

#[derive(Debug, Clone)]
pub struct InferenceConfig {
    pub k: usize,
    pub mode: InferenceMode,
    /// Registered metric name; required for Rank mode.
    pub iqa_id: Option<String>,
    pub seed: u64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            k: 25,
            mode: InferenceMode::MonteCarlo,
            iqa_id: None,
            seed: 0,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("candidate count K must be >= 1".into()));
        }
        if self.mode == InferenceMode::Rank && self.iqa_id.is_none() {
            return Err(Error::Config("rank mode requires an IQA metric name".into()));
        }
        Ok(())
    }
}

/// No-reference image quality score; higher is better. Implementations
/// must be deterministic per image; only the ordering matters.
pub trait IqaMetric<T: Scalar>: Send + Sync {
    fn name(&self) -> &str;
    fn score(&self, image: &Tensor<T>) -> Result<f64>;
}

/// Name-keyed metric registry. Starts with the built-in statistical
/// metric under "builtin"; callers may add their own.
pub struct MetricRegistry<T: Scalar> {
    metrics: BTreeMap<String, Box<dyn IqaMetric<T>>>,
}

impl<T: Scalar> Default for MetricRegistry<T> {
    fn default() -> Self {
        let mut r = MetricRegistry {
            metrics: BTreeMap::new(),
        };
        r.register(Box::new(BuiltinIqa));
        r
    }
}

impl<T: Scalar> MetricRegistry<T> {
    pub fn register(&mut self, metric: Box<dyn IqaMetric<T>>) {
        self.metrics.insert(metric.name().to_string(), metric);
    }

    pub fn get(&self, name: &str) -> Result<&dyn IqaMetric<T>> {
        self.metrics
            .get(name)
            .map(|b| b.as_ref())
            .ok_or_else(|| Error::Metric(format!("unknown IQA metric '{name}'")))
    }
}

/// K coarse-resolution candidates plus their scores once ranked.
#[derive(Debug, Clone)]
pub struct CandidateSet<T> {
    pub z_list: Vec<Tensor<T>>,
    pub scores: Option<Vec<f64>>,
    /// RNG stream per candidate, recorded for reproducibility audits.
    pub streams: Vec<u64>,
}

/// Draw K posterior samples, one per epsilon substream derived from
/// (seed, k). The per-candidate streams make the set independent of
/// evaluation order, so a parallel implementation would produce the same
/// bytes; candidates here are computed in a deterministic loop.
pub fn sample_candidates<T: Scalar>(
    x: &Tensor<T>,
    f: &Model<T>,
    pcfg: &PipelineConfig,
    icfg: &InferenceConfig,
) -> Result<CandidateSet<T>> {
    icfg.validate()?;
    let mut z_list = Vec::with_capacity(icfg.k);
    let mut streams = Vec::with_capacity(icfg.k);
    let base = EpsilonSource::with_label(icfg.seed, "candidates");
    for k in 0..icfg.k {
        let mut eps = base.substream(k as u64);
        streams.push(eps.stream());
        z_list.push(stage1_sample(x, f, pcfg, &mut eps)?);
    }
    Ok(CandidateSet {
        z_list,
        scores: None,
        streams,
    })
}

/// Elementwise mean of the candidates.
pub fn mc_aggregate<T: Scalar>(cs: &CandidateSet<T>) -> Result<Tensor<T>> {
    if cs.z_list.is_empty() {
        return Err(Error::Config("cannot aggregate an empty candidate set".into()));
    }
    let mut acc = cs.z_list[0].clone();
    for z in &cs.z_list[1..] {
        acc = acc.add(z)?;
    }
    Ok(acc.scale(T::one() / T::of_f64(cs.z_list.len() as f64)))
}

/// Score each candidate on the coarse composite (x_coarse + a*z_k) .* z_k
/// and return the argmax; ties go to the lowest index. Scores are written
/// back into the set.
pub fn rank_select<T: Scalar>(
    x: &Tensor<T>,
    cs: &mut CandidateSet<T>,
    pcfg: &PipelineConfig,
    metric: &dyn IqaMetric<T>,
) -> Result<Tensor<T>> {
    if cs.z_list.is_empty() {
        return Err(Error::Config("cannot rank an empty candidate set".into()));
    }
    let xc = coarse_input(x, pcfg)?;
    let mut scores = Vec::with_capacity(cs.z_list.len());
    for (k, z) in cs.z_list.iter().enumerate() {
        let composed = compose_illumination(&xc, z, pcfg.alpha)?;
        let s = metric.score(&composed)?;
        if !s.is_finite() {
            return Err(Error::Metric(format!(
                "metric '{}' returned a non-finite score for candidate {k}",
                metric.name()
            )));
        }
        scores.push(s);
    }
    let mut best = 0usize;
    for (k, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = k;
        }
    }
    cs.scores = Some(scores);
    Ok(cs.z_list[best].clone())
}

/// Outcome of one enhancement call, including the candidate set for
/// optional export.
pub struct Enhanced<T> {
    pub y_hat: Tensor<T>,
    pub z_star_coarse: Tensor<T>,
    pub candidates: CandidateSet<T>,
}

/// Full inference: K coarse Stage-I samples, one aggregation or ranked
/// selection, one upsampling, exactly one Stage-II forward.
pub fn enhance<T: Scalar>(
    x: &Tensor<T>,
    f: &Model<T>,
    g: &Model<T>,
    pcfg: &PipelineConfig,
    icfg: &InferenceConfig,
    registry: &MetricRegistry<T>,
) -> Result<Enhanced<T>> {
    let mut cs = sample_candidates(x, f, pcfg, icfg)?;
    let z_star = match icfg.mode {
        InferenceMode::MonteCarlo => mc_aggregate(&cs)?,
        InferenceMode::Rank => {
            let name = icfg.iqa_id.as_deref().expect("validated");
            rank_select(x, &mut cs, pcfg, registry.get(name)?)?
        }
    };
    let z_up = bilinear_resize(&z_star, x.shape()[1], x.shape()[2])?;
    let y_hat = stage2_forward(x, &z_up, g)?;
    Ok(Enhanced {
        y_hat,
        z_star_coarse: z_star,
        candidates: cs,
    })
}

// ---------------------------------------------------------------------
// Built-in no-reference IQA.
// ---------------------------------------------------------------------

/// Weights of the built-in composite score. Exposure pulls mean
/// luminance toward 0.5, contrast rewards global RMS deviation, and the
/// entropy term rewards diverse gradient magnitudes.
pub const IQA_W_EXPOSURE: f64 = 1.0;
pub const IQA_W_CONTRAST: f64 = 0.5;
pub const IQA_W_GRAD_ENTROPY: f64 = 0.25;

pub struct BuiltinIqa;

impl<T: Scalar> IqaMetric<T> for BuiltinIqa {
    fn name(&self) -> &str {
        "builtin"
    }

    fn score(&self, image: &Tensor<T>) -> Result<f64> {
        Ok(builtin_iqa(image))
    }
}

/// Composite statistical quality score, higher is better:
/// w1 * -(mean - 0.5)^2  +  w2 * rms_contrast  +  w3 * gradient_entropy.
pub fn builtin_iqa<T: Scalar>(image: &Tensor<T>) -> f64 {
    let data: Vec<f64> = image.data().iter().map(|&v| v.as_f64()).collect();
    let n = data.len() as f64;
    let mean = data.iter().sum::<f64>() / n;
    let exposure = -(mean - 0.5).powi(2);
    let variance = data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let contrast = variance.sqrt();

    // Histogram entropy of forward-difference gradient magnitudes,
    // normalized to [0,1] by the 32-bin maximum.
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let mut mags = Vec::new();
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let at = |yy: usize, xx: usize| data[(ch * h + yy) * w + xx];
                let gx = if x + 1 < w { at(y, x + 1) - at(y, x) } else { 0.0 };
                let gy = if y + 1 < h { at(y + 1, x) - at(y, x) } else { 0.0 };
                mags.push((gx * gx + gy * gy).sqrt());
            }
        }
    }
    let max_mag = mags.iter().cloned().fold(0.0f64, f64::max);
    let entropy = if max_mag > 0.0 {
        const BINS: usize = 32;
        let mut hist = [0usize; BINS];
        for &m in &mags {
            let b = ((m / max_mag) * BINS as f64).min(BINS as f64 - 1.0) as usize;
            hist[b] += 1;
        }
        let total = mags.len() as f64;
        let raw: f64 = hist
            .iter()
            .filter(|&&cnt| cnt > 0)
            .map(|&cnt| {
                let p = cnt as f64 / total;
                -p * p.ln()
            })
            .sum();
        raw / (BINS as f64).ln()
    } else {
        0.0
    };

    IQA_W_EXPOSURE * exposure + IQA_W_CONTRAST * contrast + IQA_W_GRAD_ENTROPY * entropy
}

// ---------------------------------------------------------------------
// Full-reference metrics.
// ---------------------------------------------------------------------

/// Peak signal-to-noise ratio in dB: 10*log10(peak^2 / MSE). Identical
/// images yield +infinity, serialized as "inf" in CSV output.
pub fn psnr<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, peak: f64) -> Result<f64> {
    let diff = a.sub(b)?;
    let mse = diff
        .data()
        .iter()
        .map(|&v| v.as_f64().powi(2))
        .sum::<f64>()
        / diff.data().len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

/// Single-scale SSIM: 11x11 Gaussian window (sigma 1.5), stabilizers
/// C1 = (0.01*peak)^2 and C2 = (0.03*peak)^2, averaged over all valid
/// window positions and channels.
pub fn ssim<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, peak: f64) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Metric(format!(
            "ssim shape mismatch: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    const WIN: usize = 11;
    let (c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    if h < WIN || w < WIN {
        return Err(Error::Metric(format!(
            "ssim requires spatial dims >= {WIN}, got {h}x{w}"
        )));
    }
    let mut window = [0.0f64; WIN * WIN];
    let sigma = 1.5;
    let mut norm = 0.0;
    for i in 0..WIN {
        for j in 0..WIN {
            let dy = i as f64 - (WIN as f64 - 1.0) / 2.0;
            let dx = j as f64 - (WIN as f64 - 1.0) / 2.0;
            let g = (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp();
            window[i * WIN + j] = g;
            norm += g;
        }
    }
    for wv in window.iter_mut() {
        *wv /= norm;
    }

    let c1 = (0.01 * peak).powi(2);
    let c2 = (0.03 * peak).powi(2);
    let ad = a.data();
    let bd = b.data();
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        for oy in 0..=h - WIN {
            for ox in 0..=w - WIN {
                let (mut ma, mut mb) = (0.0, 0.0);
                let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                for i in 0..WIN {
                    for j in 0..WIN {
                        let wt = window[i * WIN + j];
                        let av = ad[(ch * h + oy + i) * w + ox + j].as_f64();
                        let bv = bd[(ch * h + oy + i) * w + ox + j].as_f64();
                        ma += wt * av;
                        mb += wt * bv;
                        va += wt * av * av;
                        vb += wt * bv * bv;
                        cov += wt * av * bv;
                    }
                }
                va -= ma * ma;
                vb -= mb * mb;
                cov -= ma * mb;
                let s = ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                total += s;
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}
