//! Mean-field Gaussian variational machinery: reparameterized weight
//! sampling, closed-form diagonal-Gaussian KL, the adaptive EMA prior,
//! and the minibatch ELBO-style loss.
//!
//! The posterior over each weight tensor is N(mu, diag(sigma^2)) with
//! sigma = softplus(rho), which keeps sigma positive for any finite rho.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::ndtensor::{
    backward, softplus_value, Scalar, Tape, Tensor, TensorError, Var,
};
use crate::{Error, Result};

/// Deterministic standard-normal source. Identical (seed, stream) and draw
/// order reproduce the same sequence; distinct streams are independent.
#[derive(Debug, Clone)]
pub struct EpsilonSource {
    seed: u64,
    stream: u64,
    rng: ChaCha12Rng,
}

/// FNV-1a hash of a label, used to derive stream ids from fixed names
/// such as "stage1" or "infer" so all randomness funnels from one seed.
pub fn stream_id(label: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in label.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

impl EpsilonSource {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        EpsilonSource { seed, stream, rng }
    }

    pub fn with_label(seed: u64, label: &str) -> Self {
        Self::new(seed, stream_id(label))
    }

    /// Same (seed, stream) but offset by `k`; used for per-candidate and
    /// per-worker streams.
    pub fn substream(&self, k: u64) -> Self {
        Self::new(self.seed, self.stream.wrapping_add(k).wrapping_mul(0x9e3779b97f4a7c15)
            | 1)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Rewind to draw index 0.
    pub fn restart(&self) -> Self {
        Self::new(self.seed, self.stream)
    }

    pub fn draw<T: Scalar>(&mut self, shape: &[usize]) -> Tensor<T> {
        Tensor::from_fn(shape, |_| T::std_normal(&mut self.rng))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }
}

/// Posterior parameters for one weight tensor: q(w) = N(mu, softplus(rho)^2).
#[derive(Debug, Clone)]
pub struct VariationalParams<T> {
    pub mu: Tensor<T>,
    pub rho: Tensor<T>,
}

impl<T: Scalar> VariationalParams<T> {
    pub fn new(mu: Tensor<T>, rho: Tensor<T>) -> Result<Self> {
        if mu.shape() != rho.shape() {
            return Err(Error::Tensor(TensorError::ShapeMismatch {
                op: "VariationalParams::new",
                expected: format!("{:?}", mu.shape()),
                got: format!("{:?}", rho.shape()),
            }));
        }
        Ok(VariationalParams { mu, rho })
    }

    /// rho value giving softplus(rho) == sigma0.
    pub fn rho_for_sigma(sigma0: f64) -> T {
        T::of_f64((sigma0.exp() - 1.0).ln())
    }

    pub fn sigma(&self) -> Tensor<T> {
        self.rho.map(softplus_value)
    }

    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }
}

/// Ordered, named collection of per-layer posteriors. Parameter count is
/// exactly twice the matching deterministic model's count.
#[derive(Debug, Clone, Default)]
pub struct BayesModule<T> {
    pub params: Vec<(String, VariationalParams<T>)>,
}

impl<T: Scalar> BayesModule<T> {
    pub fn param_count(&self) -> usize {
        self.params.iter().map(|(_, p)| 2 * p.len()).sum()
    }

    /// Posterior means only, e.g. for collapsing to a deterministic net.
    pub fn means(&self) -> Vec<(String, Tensor<T>)> {
        self.params
            .iter()
            .map(|(n, p)| (n.clone(), p.mu.clone()))
            .collect()
    }
}

/// EMA copies of the posterior parameters, serving as the KL target.
/// Never receives gradients.
#[derive(Debug, Clone)]
pub struct AdaptivePrior<T> {
    pub mu_ema: Vec<Tensor<T>>,
    pub sigma_ema: Vec<Tensor<T>>,
    pub beta: T,
    pub step: u64,
}

impl<T: Scalar> AdaptivePrior<T> {
    /// Initialize by copying the posterior, so the KL term starts at zero.
    pub fn from_posterior(posterior: &BayesModule<T>, beta: T) -> Self {
        AdaptivePrior {
            mu_ema: posterior.params.iter().map(|(_, p)| p.mu.clone()).collect(),
            sigma_ema: posterior.params.iter().map(|(_, p)| p.sigma()).collect(),
            beta,
            step: 0,
        }
    }

    /// Fixed N(0, I) prior with the same shapes; used for ablation runs.
    pub fn standard_normal(posterior: &BayesModule<T>) -> Self {
        AdaptivePrior {
            mu_ema: posterior
                .params
                .iter()
                .map(|(_, p)| Tensor::zeros(p.mu.shape()))
                .collect(),
            sigma_ema: posterior
                .params
                .iter()
                .map(|(_, p)| Tensor::ones(p.mu.shape()))
                .collect(),
            beta: T::one(),
            step: 0,
        }
    }

    /// mu_ema <- beta * mu_ema + (1 - beta) * mu, same for sigma.
    pub fn ema_update(&mut self, posterior: &BayesModule<T>) -> Result<()> {
        if posterior.params.len() != self.mu_ema.len() {
            return Err(Error::Domain(format!(
                "prior tracks {} tensors, posterior has {}",
                self.mu_ema.len(),
                posterior.params.len()
            )));
        }
        let b = self.beta;
        let ob = T::one() - b;
        for (i, (_, p)) in posterior.params.iter().enumerate() {
            self.mu_ema[i] = self.mu_ema[i]
                .zip(&p.mu, "ema_update", |e, v| b * e + ob * v)?;
            self.sigma_ema[i] = self.sigma_ema[i]
                .zip(&p.sigma(), "ema_update", |e, v| b * e + ob * v)?;
        }
        self.step += 1;
        Ok(())
    }
}

/// Reparameterized draw: mu + softplus(rho) * eps (Gaussian pathwise sample).
pub fn sample_weights<T: Scalar>(
    params: &VariationalParams<T>,
    eps: &mut EpsilonSource,
) -> Tensor<T> {
    let e: Tensor<T> = eps.draw(params.mu.shape());
    Tensor::from_fn(params.mu.shape(), |i| {
        params.mu.data()[i] + softplus_value(params.rho.data()[i]) * e.data()[i]
    })
}

/// Tape version of the reparameterized draw; differentiable w.r.t. mu and rho.
pub fn sample_weights_on_tape<'t, T: Scalar>(
    mu: Var<'t, T>,
    rho: Var<'t, T>,
    eps: Var<'t, T>,
) -> std::result::Result<Var<'t, T>, TensorError> {
    mu.add(rho.softplus()?.mul(eps)?)
}

/// Closed-form KL between diagonal Gaussians, summed over elements:
/// sum_i [ log(sp_i / sq_i) + (sq_i^2 + (mq_i - mp_i)^2) / (2 sp_i^2) - 1/2 ].
/// Evaluates to exactly zero when q == p bitwise.
pub fn kl_diag_gaussian<T: Scalar>(
    mu_q: &Tensor<T>,
    sigma_q: &Tensor<T>,
    mu_p: &Tensor<T>,
    sigma_p: &Tensor<T>,
) -> Result<T> {
    for (name, s) in [("sigma_q", sigma_q), ("sigma_p", sigma_p)] {
        if s.data().iter().any(|&v| v <= T::zero()) {
            return Err(Error::Domain(format!("{name} must be positive elementwise")));
        }
    }
    if mu_q.shape() != sigma_q.shape() || mu_q.shape() != mu_p.shape()
        || mu_q.shape() != sigma_p.shape()
    {
        return Err(Error::Tensor(TensorError::ShapeMismatch {
            op: "kl_diag_gaussian",
            expected: format!("{:?}", mu_q.shape()),
            got: "mismatched parameter shapes".into(),
        }));
    }
    let half = T::of_f64(0.5);
    let mut acc = T::zero();
    for i in 0..mu_q.len() {
        let (mq, sq) = (mu_q.data()[i], sigma_q.data()[i]);
        let (mp, sp) = (mu_p.data()[i], sigma_p.data()[i]);
        let r = sq / sp;
        let d = (mq - mp) / sp;
        acc = acc + (-(r.ln()) + r * r * half + d * d * half - half);
    }
    Ok(acc)
}

/// KL of one layer on the tape, against a gradient-stopped prior.
pub fn kl_on_tape<'t, T: Scalar>(
    tape: &'t Tape<T>,
    mu_q: Var<'t, T>,
    rho_q: Var<'t, T>,
    mu_p: &Tensor<T>,
    sigma_p: &Tensor<T>,
) -> std::result::Result<Var<'t, T>, TensorError> {
    let half = T::of_f64(0.5);
    let ln_sp = tape.constant(sigma_p.map(|v| v.ln()));
    let inv_2sp2 = tape.constant(sigma_p.map(|v| T::one() / (T::of_f64(2.0) * v * v)));
    let mu_p = tape.constant(mu_p.clone());

    let sigma_q = rho_q.softplus()?;
    let log_ratio = ln_sp.sub(sigma_q.ln()?)?;
    let d = mu_q.sub(mu_p)?;
    let quad = sigma_q.square()?.add(d.square()?)?.mul(inv_2sp2)?;
    log_ratio.add(quad)?.add_scalar(-half)?.sum()
}

/// How the data term of the loss measures reconstruction error.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataTerm {
    /// Squared L2 norm of the residual (the default).
    SquaredL2,
    /// L1 norm of the residual.
    L1,
}

/// Forward pass of a Bayesian model given already-sampled weight vars.
pub trait BayesForward<T: Scalar> {
    fn posterior(&self) -> &BayesModule<T>;

    fn forward_vars<'t>(
        &self,
        tape: &'t Tape<T>,
        x: &Tensor<T>,
        weights: &[Var<'t, T>],
    ) -> Result<Var<'t, T>>;
}

/// Evaluated minibatch loss plus gradients for every (mu, rho) pair.
pub struct ElboEval<T> {
    pub loss: T,
    pub data_term: T,
    pub kl_term: T,
    /// (grad_mu, grad_rho), aligned with the posterior's parameter order.
    /// Empty when gradients were not requested.
    pub grads: Vec<(Tensor<T>, Tensor<T>)>,
}

/// Minibatch loss: (1/M) sum_i E_w ||F(x_i; w) - y_i||^2 + kl_weight * KL[q || P],
/// with the expectation estimated from `n_mc` fresh weight draws and the
/// prior held out of the gradient path.
#[allow(clippy::too_many_arguments)]
pub fn elbo_minibatch_loss<T: Scalar>(
    batch: &[(Tensor<T>, Tensor<T>)],
    forward: &impl BayesForward<T>,
    prior: &AdaptivePrior<T>,
    kl_weight: T,
    n_mc: usize,
    data_term: DataTerm,
    eps: &mut EpsilonSource,
    compute_grads: bool,
) -> Result<ElboEval<T>> {
    if batch.is_empty() {
        return Err(Error::Domain("elbo_minibatch_loss: empty batch".into()));
    }
    if n_mc == 0 {
        return Err(Error::Domain("elbo_minibatch_loss: n_mc must be >= 1".into()));
    }
    let posterior = forward.posterior();
    let tape = Tape::new();
    let leaves: Vec<(Var<'_, T>, Var<'_, T>)> = posterior
        .params
        .iter()
        .map(|(_, p)| (tape.leaf(p.mu.clone()), tape.leaf(p.rho.clone())))
        .collect();

    let mut data_acc: Option<Var<'_, T>> = None;
    for _ in 0..n_mc {
        let weights: Vec<Var<'_, T>> = leaves
            .iter()
            .map(|(mu, rho)| {
                let e = tape.constant(eps.draw(mu.shape().as_slice()));
                sample_weights_on_tape(*mu, *rho, e)
            })
            .collect::<std::result::Result<_, _>>()?;
        for (x, y) in batch {
            let pred = forward.forward_vars(&tape, x, &weights)?;
            let resid = pred.sub(tape.constant(y.clone()))?;
            let err = match data_term {
                DataTerm::SquaredL2 => resid.square()?.sum()?,
                DataTerm::L1 => resid.abs()?.sum()?,
            };
            data_acc = Some(match data_acc {
                Some(acc) => acc.add(err)?,
                None => err,
            });
        }
    }
    let scale = T::one() / T::of_f64((batch.len() * n_mc) as f64);
    let data = data_acc.expect("non-empty batch").scale(scale)?;

    let mut kl_acc: Option<Var<'_, T>> = None;
    for (i, (mu, rho)) in leaves.iter().enumerate() {
        let kl = kl_on_tape(&tape, *mu, *rho, &prior.mu_ema[i], &prior.sigma_ema[i])?;
        kl_acc = Some(match kl_acc {
            Some(acc) => acc.add(kl)?,
            None => kl,
        });
    }
    let kl = kl_acc.expect("at least one parameter tensor");
    let total = data.add(kl.scale(kl_weight)?)?;

    let grads = if compute_grads {
        let g = backward(total).map_err(Error::Tensor)?;
        leaves
            .iter()
            .map(|(mu, rho)| (g.grad(*mu), g.grad(*rho)))
            .collect()
    } else {
        Vec::new()
    };

    Ok(ElboEval {
        loss: total.value().item().map_err(Error::Tensor)?,
        data_term: data.value().item().map_err(Error::Tensor)?,
        kl_term: kl.value().item().map_err(Error::Tensor)?,
        grads,
    })
}
