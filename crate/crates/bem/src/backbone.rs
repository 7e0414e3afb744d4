//! Small convolutional encoder-decoder used by both stages. One
//! architecture description drives a deterministic variant and a Bayesian
//! variant in which every weight tensor becomes a (mu, rho) posterior.
//!
//! Blocks are plain 3x3 convolutions with SiLU activations and no
//! normalization. Downsampling is a stride-2 conv; upsampling is bilinear
//! resize followed by a 1x1 conv; skip connections concatenate across
//! levels. Input and output heads are 1x1 convs.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::ndtensor::{Scalar, Tape, Tensor, Var};
use crate::variational::{
    sample_weights, BayesForward, BayesModule, EpsilonSource, VariationalParams,
};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Silu,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackboneSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub base_channels: usize,
    pub levels: usize,
    pub blocks_per_level: usize,
    pub activation: Activation,
}

impl BackboneSpec {
    pub fn new(in_channels: usize, out_channels: usize) -> Self {
        BackboneSpec {
            in_channels,
            out_channels,
            base_channels: 16,
            levels: 2,
            blocks_per_level: 1,
            activation: Activation::Silu,
        }
    }
}

/// One conv layer of the plan; owns a weight [out,in,k,k] and a bias [out].
#[derive(Debug, Clone)]
pub struct LayerDef {
    pub name: String,
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    /// Apply the activation after this layer.
    pub activated: bool,
}

/// Flat layer list in forward order. The forward graph consumes two vars
/// per layer (weight, then bias) in this order.
pub fn layer_plan(spec: &BackboneSpec) -> Vec<LayerDef> {
    let mut plan = Vec::new();
    let mut push = |name: String, in_c, out_c, k, stride, padding, activated| {
        plan.push(LayerDef {
            name,
            in_c,
            out_c,
            k,
            stride,
            padding,
            activated,
        });
    };
    let base = spec.base_channels;
    push("stem".into(), spec.in_channels, base, 3, 1, 1, true);
    let mut c = base;
    for l in 0..spec.levels {
        push(format!("down{l}"), c, c * 2, 3, 2, 1, true);
        c *= 2;
        for b in 0..spec.blocks_per_level {
            push(format!("enc{l}b{b}"), c, c, 3, 1, 1, true);
        }
    }
    for l in (0..spec.levels).rev() {
        push(format!("up{l}"), c, c / 2, 1, 1, 0, true);
        push(format!("fuse{l}"), c, c / 2, 3, 1, 1, true);
        c /= 2;
    }
    push("head".into(), c, spec.out_channels, 1, 1, 0, false);
    plan
}

#[derive(Debug, Clone)]
pub enum ModelWeights<T> {
    Deterministic(Vec<(String, Tensor<T>)>),
    Bayesian(BayesModule<T>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Deterministic,
    Bayesian,
}

/// A built backbone. The forward counter backs the structural
/// inference-cost checks and counts every forward, training included.
#[derive(Debug)]
pub struct Model<T> {
    pub spec: BackboneSpec,
    pub weights: ModelWeights<T>,
    forwards: AtomicU64,
}

impl<T: Scalar> Clone for Model<T> {
    fn clone(&self) -> Self {
        Model {
            spec: self.spec.clone(),
            weights: self.weights.clone(),
            forwards: AtomicU64::new(0),
        }
    }
}

/// Default posterior spread at initialization.
pub const INIT_SIGMA: f64 = 0.05;

/// Reproducible initialization: fan-in-scaled uniform means, zero biases,
/// and (for the Bayesian kind) rho giving sigma = INIT_SIGMA everywhere.
pub fn build<T: Scalar>(spec: &BackboneSpec, kind: ModelKind, seed: u64) -> Model<T> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let plan = layer_plan(spec);
    let rho0: T = VariationalParams::<T>::rho_for_sigma(INIT_SIGMA);

    let mut tensors: Vec<(String, Tensor<T>)> = Vec::new();
    for layer in &plan {
        let fan_in = (layer.in_c * layer.k * layer.k) as f64;
        let bound = (1.0 / fan_in).sqrt();
        let w = Tensor::from_fn(&[layer.out_c, layer.in_c, layer.k, layer.k], |_| {
            T::of_f64(rng.gen_range(-bound..bound))
        });
        let b = Tensor::zeros(&[layer.out_c]);
        tensors.push((format!("{}.w", layer.name), w));
        tensors.push((format!("{}.b", layer.name), b));
    }

    let weights = match kind {
        ModelKind::Deterministic => ModelWeights::Deterministic(tensors),
        ModelKind::Bayesian => ModelWeights::Bayesian(BayesModule {
            params: tensors
                .into_iter()
                .map(|(name, mu)| {
                    let rho = Tensor::full(mu.shape(), rho0);
                    (name.clone(), VariationalParams { mu, rho })
                })
                .collect(),
        }),
    };
    Model {
        spec: spec.clone(),
        weights,
        forwards: AtomicU64::new(0),
    }
}

impl<T: Scalar> Model<T> {
    pub fn kind(&self) -> ModelKind {
        match self.weights {
            ModelWeights::Deterministic(_) => ModelKind::Deterministic,
            ModelWeights::Bayesian(_) => ModelKind::Bayesian,
        }
    }

    pub fn param_count(&self) -> usize {
        match &self.weights {
            ModelWeights::Deterministic(ws) => ws.iter().map(|(_, t)| t.len()).sum(),
            ModelWeights::Bayesian(m) => m.param_count(),
        }
    }

    pub fn forward_count(&self) -> u64 {
        self.forwards.load(Ordering::Relaxed)
    }

    pub fn reset_forward_count(&self) {
        self.forwards.store(0, Ordering::Relaxed);
    }

    pub fn bayes_module(&self) -> Option<&BayesModule<T>> {
        match &self.weights {
            ModelWeights::Bayesian(m) => Some(m),
            ModelWeights::Deterministic(_) => None,
        }
    }

    pub fn bayes_module_mut(&mut self) -> Option<&mut BayesModule<T>> {
        match &mut self.weights {
            ModelWeights::Bayesian(m) => Some(m),
            ModelWeights::Deterministic(_) => None,
        }
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        if x.shape().len() != 3 || x.shape()[0] != self.spec.in_channels {
            return Err(Error::Domain(format!(
                "expected input [{}, H, W], got {:?}",
                self.spec.in_channels,
                x.shape()
            )));
        }
        let d = 1usize << self.spec.levels;
        if x.shape()[1] % d != 0 || x.shape()[2] % d != 0 {
            return Err(Error::Domain(format!(
                "spatial dims {}x{} must be divisible by 2^levels = {}",
                x.shape()[1],
                x.shape()[2],
                d
            )));
        }
        Ok(())
    }

    /// Run the architecture on an existing tape with caller-supplied weight
    /// vars (two per layer: weight, bias). Counts as one forward.
    pub fn forward_on_tape<'t>(
        &self,
        tape: &'t Tape<T>,
        x: &Tensor<T>,
        weights: &[Var<'t, T>],
    ) -> Result<Var<'t, T>> {
        self.check_input(x)?;
        self.forwards.fetch_add(1, Ordering::Relaxed);
        forward_graph(&self.spec, tape, tape.constant(x.clone()), weights)
    }

    /// Plain forward. Bayesian models resample weights on every call and
    /// require an epsilon source; deterministic models ignore it.
    pub fn forward(&self, x: &Tensor<T>, eps: Option<&mut EpsilonSource>) -> Result<Tensor<T>> {
        let tensors: Vec<Tensor<T>> = match &self.weights {
            ModelWeights::Deterministic(ws) => ws.iter().map(|(_, t)| t.clone()).collect(),
            ModelWeights::Bayesian(m) => {
                let eps = eps.ok_or_else(|| {
                    Error::Domain("bayesian forward requires an epsilon source".into())
                })?;
                m.params
                    .iter()
                    .map(|(_, p)| sample_weights(p, eps))
                    .collect()
            }
        };
        let tape = Tape::new();
        let vars: Vec<Var<'_, T>> = tensors.into_iter().map(|t| tape.constant(t)).collect();
        let out = self.forward_on_tape(&tape, x, &vars)?;
        Ok(out.value())
    }
}

impl<T: Scalar> BayesForward<T> for Model<T> {
    fn posterior(&self) -> &BayesModule<T> {
        self.bayes_module()
            .expect("BayesForward requires a bayesian model")
    }

    fn forward_vars<'t>(
        &self,
        tape: &'t Tape<T>,
        x: &Tensor<T>,
        weights: &[Var<'t, T>],
    ) -> Result<Var<'t, T>> {
        self.forward_on_tape(tape, x, weights)
    }
}

fn forward_graph<'t, T: Scalar>(
    spec: &BackboneSpec,
    _tape: &'t Tape<T>,
    x: Var<'t, T>,
    weights: &[Var<'t, T>],
) -> Result<Var<'t, T>> {
    let plan = layer_plan(spec);
    if weights.len() != 2 * plan.len() {
        return Err(Error::Domain(format!(
            "backbone expects {} weight tensors, got {}",
            2 * plan.len(),
            weights.len()
        )));
    }
    let mut idx = 0;
    let mut next = |cur: Var<'t, T>, layer: &LayerDef| -> Result<Var<'t, T>> {
        let w = weights[idx];
        let b = weights[idx + 1];
        idx += 2;
        let mut out = cur
            .conv2d(w, layer.stride, layer.padding)
            .and_then(|v| v.add_bias(b))
            .map_err(Error::Tensor)?;
        if layer.activated {
            out = out.silu().map_err(Error::Tensor)?;
        }
        Ok(out)
    };

    let mut li = 0;
    let mut cur = next(x, &plan[li])?; // stem
    li += 1;

    let mut skips: Vec<Var<'t, T>> = Vec::new();
    for _ in 0..spec.levels {
        skips.push(cur);
        cur = next(cur, &plan[li])?; // down
        li += 1;
        for _ in 0..spec.blocks_per_level {
            cur = next(cur, &plan[li])?;
            li += 1;
        }
    }
    for _ in (0..spec.levels).rev() {
        let skip = skips.pop().expect("skip per level");
        let target = skip.shape();
        cur = cur
            .bilinear(target[1], target[2])
            .map_err(Error::Tensor)?;
        cur = next(cur, &plan[li])?; // up (1x1)
        li += 1;
        cur = cur.concat_channels(skip).map_err(Error::Tensor)?;
        cur = next(cur, &plan[li])?; // fuse
        li += 1;
    }
    next(cur, &plan[li]) // head
}
