use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::network::{log_posterior_impl, sample_prior};
use super::{NetSpec, PriorSpec, WeightSample};
use crate::datasets::Dataset;
use crate::rng::{derive_seed, rng_from_seed, Rng};
use crate::{Error, Result};

/// Unnormalized log density with gradient.
pub trait LogDensity {
    fn dim(&self) -> usize;

    /// Returns `log p(w)` and writes `∇ log p(w)` into `grad`.
    fn log_density_and_grad(&self, w: &[f64], grad: &mut [f64]) -> f64;

    fn log_density(&self, w: &[f64]) -> f64 {
        let mut g = vec![0.0; self.dim()];
        self.log_density_and_grad(w, &mut g)
    }
}

/// Posterior of a network's weights given a dataset.
pub struct BnnPosterior<'a> {
    spec: &'a NetSpec,
    prior: &'a PriorSpec,
    x: DMatrix<f64>,
    y: DVector<f64>,
    noise_var: f64,
    dim: usize,
}

impl<'a> BnnPosterior<'a> {
    pub fn new(spec: &'a NetSpec, prior: &'a PriorSpec, data: &Dataset, noise_var: f64) -> Result<Self> {
        spec.validate()?;
        prior.validate()?;
        if !data.is_empty() && data.dim() != spec.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: spec.input_dim(),
                found: data.dim(),
            });
        }
        if !(noise_var > 0.0) {
            return Err(Error::invalid(format!("noise variance must be positive, got {noise_var}")));
        }
        Ok(Self {
            spec,
            prior,
            x: data.x.clone(),
            y: data.y.clone(),
            noise_var,
            dim: spec.param_count(),
        })
    }
}

impl LogDensity for BnnPosterior<'_> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn log_density_and_grad(&self, w: &[f64], grad: &mut [f64]) -> f64 {
        log_posterior_impl(self.spec, self.prior, &self.x, &self.y, self.noise_var, w, Some(grad))
    }
}

/// Velocity-Verlet integration with unit mass.
///
/// `grad` must hold `∇ log p(position)` on entry and holds the gradient at
/// the final position on exit. Returns the final log density, or the
/// incoming one when `n_steps == 0`.
fn leapfrog_cached<F>(
    position: &mut [f64],
    momentum: &mut [f64],
    grad: &mut [f64],
    mut log_p: f64,
    step_size: f64,
    n_steps: usize,
    mut grad_fn: F,
) -> f64
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    if n_steps == 0 {
        return log_p;
    }
    let half = 0.5 * step_size;
    for (p, g) in momentum.iter_mut().zip(grad.iter()) {
        *p += half * g;
    }
    for step in 0..n_steps {
        for (w, p) in position.iter_mut().zip(momentum.iter()) {
            *w += step_size * p;
        }
        log_p = grad_fn(position, grad);
        let kick = if step + 1 == n_steps { half } else { step_size };
        for (p, g) in momentum.iter_mut().zip(grad.iter()) {
            *p += kick * g;
        }
    }
    log_p
}

/// Advance `(position, momentum)` by `n_steps` leapfrog steps of size
/// `step_size` under `grad_fn`, which returns `log p(w)` and writes its
/// gradient. `n_steps == 0` leaves both untouched.
pub fn leapfrog<F>(position: &mut [f64], momentum: &mut [f64], step_size: f64, n_steps: usize, mut grad_fn: F)
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    if n_steps == 0 {
        return;
    }
    let mut grad = vec![0.0; position.len()];
    let log_p = grad_fn(position, &mut grad);
    leapfrog_cached(position, momentum, &mut grad, log_p, step_size, n_steps, grad_fn);
}

/// Sampler settings. `steps` counts every iteration of a chain, burn-in
/// included; `keep` draws are selected evenly from the pooled post-burn-in
/// draws of all chains.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HmcConfig {
    pub chains: usize,
    pub steps: usize,
    pub leapfrog_steps: usize,
    pub step_size: f64,
    pub burn_in: usize,
    pub keep: usize,
    pub seed: u64,
}

impl HmcConfig {
    /// 5 chains × 5000 steps, 50 leapfrog steps, 1000 burn-in steps and
    /// 1000 kept samples; step size 1e-3 for widths up to 50, 1e-4 above.
    pub fn default_protocol(max_width: usize, seed: u64) -> Self {
        Self {
            chains: 5,
            steps: 5000,
            leapfrog_steps: 50,
            step_size: Self::default_step_size(max_width),
            burn_in: 1000,
            keep: 1000,
            seed,
        }
    }

    pub fn default_step_size(max_width: usize) -> f64 {
        if max_width > 50 {
            1e-4
        } else {
            1e-3
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.chains == 0 {
            return Err(Error::invalid("need at least one chain"));
        }
        if self.burn_in >= self.steps {
            return Err(Error::invalid(format!(
                "burn_in ({}) must be smaller than steps ({})",
                self.burn_in, self.steps
            )));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::invalid(format!("step size must be positive, got {}", self.step_size)));
        }
        let pooled = self.chains * (self.steps - self.burn_in);
        if self.keep == 0 || self.keep > pooled {
            return Err(Error::invalid(format!(
                "keep must be in 1..={pooled}, got {}",
                self.keep
            )));
        }
        Ok(())
    }

    fn draws_per_chain(&self) -> usize {
        self.steps - self.burn_in
    }

    /// Pooled indices of the kept draws: `⌊k · pooled / keep⌋`.
    fn kept_indices(&self) -> Vec<usize> {
        let pooled = self.chains * self.draws_per_chain();
        (0..self.keep)
            .map(|k| ((k as u128 * pooled as u128) / self.keep as u128) as usize)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainReport {
    pub chain: usize,
    pub seed: u64,
    pub accepted: usize,
    pub proposals: usize,
    pub acceptance_rate: f64,
    pub init_attempts: usize,
}

#[derive(Clone, Debug)]
pub struct HmcRun {
    /// Kept draws in pooled order (chain-major).
    pub samples: Vec<Vec<f64>>,
    pub reports: Vec<ChainReport>,
}

struct ChainOutput {
    kept: Vec<Vec<f64>>,
    report: ChainReport,
}

fn run_chain<T, I>(target: &T, init: &I, config: &HmcConfig, chain: usize, kept: &[usize]) -> Result<ChainOutput>
where
    T: LogDensity,
    I: Fn(&mut Rng) -> Vec<f64>,
{
    let seed = derive_seed(config.seed, &[chain as u64]);
    let mut rng = rng_from_seed(seed);
    let dim = target.dim();
    let mut grad = vec![0.0; dim];

    let mut attempts = 0;
    let (mut w, mut log_p) = loop {
        attempts += 1;
        let w = init(&mut rng);
        let lp = target.log_density_and_grad(&w, &mut grad);
        if lp.is_finite() && grad.iter().all(|g| g.is_finite()) {
            break (w, lp);
        }
        if attempts >= 100 {
            return Err(Error::InitFailed { chain, attempts });
        }
    };

    let per_chain = config.draws_per_chain();
    let base = chain * per_chain;
    let mut wanted = kept
        .iter()
        .filter(|&&k| k >= base && k < base + per_chain)
        .map(|&k| k - base)
        .peekable();
    let mut out = Vec::new();

    let mut proposal = vec![0.0; dim];
    let mut prop_grad = vec![0.0; dim];
    let mut momentum = vec![0.0; dim];
    let mut accepted = 0;
    for step in 0..config.steps {
        for p in momentum.iter_mut() {
            *p = rng.sample(StandardNormal);
        }
        let kinetic0 = 0.5 * momentum.iter().map(|p| p * p).sum::<f64>();
        proposal.copy_from_slice(&w);
        prop_grad.copy_from_slice(&grad);
        let prop_lp = leapfrog_cached(
            &mut proposal,
            &mut momentum,
            &mut prop_grad,
            log_p,
            config.step_size,
            config.leapfrog_steps,
            |x, g| target.log_density_and_grad(x, g),
        );
        let kinetic1 = 0.5 * momentum.iter().map(|p| p * p).sum::<f64>();
        let delta_h = (-prop_lp + kinetic1) - (-log_p + kinetic0);
        if !delta_h.is_finite() {
            return Err(Error::Divergent { chain, step });
        }
        let u: f64 = rng.random();
        if u.ln() < -delta_h {
            std::mem::swap(&mut w, &mut proposal);
            std::mem::swap(&mut grad, &mut prop_grad);
            log_p = prop_lp;
            accepted += 1;
        }
        if step >= config.burn_in {
            let t = step - config.burn_in;
            while wanted.peek() == Some(&t) {
                out.push(w.clone());
                wanted.next();
            }
        }
    }
    Ok(ChainOutput {
        kept: out,
        report: ChainReport {
            chain,
            seed,
            accepted,
            proposals: config.steps,
            acceptance_rate: accepted as f64 / config.steps as f64,
            init_attempts: attempts,
        },
    })
}

/// HMC with identity mass matrix and full momentum refresh each step.
///
/// Chain `c` draws its randomness from `derive_seed(config.seed, [c])`
/// and starts from `init`; chains run in parallel, and the result is the
/// same as sequential execution.
pub fn run_hmc<T, I>(target: &T, init: I, config: &HmcConfig) -> Result<HmcRun>
where
    T: LogDensity + Sync,
    I: Fn(&mut Rng) -> Vec<f64> + Sync,
{
    config.validate()?;
    let kept = config.kept_indices();
    let outputs: Vec<ChainOutput> = (0..config.chains)
        .into_par_iter()
        .map(|c| run_chain(target, &init, config, c, &kept))
        .collect::<Result<_>>()?;
    let mut samples = Vec::with_capacity(config.keep);
    let mut reports = Vec::with_capacity(config.chains);
    for o in outputs {
        samples.extend(o.kept);
        reports.push(o.report);
    }
    Ok(HmcRun { samples, reports })
}

/// Sample network weights from their posterior, starting every chain
/// from a prior draw.
pub fn hmc_sample(
    spec: &NetSpec,
    prior: &PriorSpec,
    data: &Dataset,
    noise_var: f64,
    config: &HmcConfig,
) -> Result<(Vec<WeightSample>, Vec<ChainReport>)> {
    let target = BnnPosterior::new(spec, prior, data, noise_var)?;
    let run = run_hmc(&target, |rng: &mut Rng| sample_prior(spec, prior, rng), config)?;
    let layout = Arc::new(spec.layout());
    let samples = run
        .samples
        .into_iter()
        .map(|values| WeightSample {
            values,
            layout: Arc::clone(&layout),
        })
        .collect();
    Ok((samples, run.reports))
}
