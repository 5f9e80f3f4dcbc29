use nalgebra::{DMatrix, DMatrixView, DVector};
use rand::Rng as _;
use rand_distr::StandardNormal;

use super::{Layout, NetSpec, PriorSpec, WeightSample};
use crate::datasets::Dataset;
use crate::field::UncertaintyField;
use crate::kernels::Activation;
use crate::rng::Rng;
use crate::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

fn check_len(spec: &NetSpec, w: &[f64]) -> Result<()> {
    let expected = spec.param_count();
    if w.len() != expected {
        return Err(Error::DimensionMismatch {
            expected,
            found: w.len(),
        });
    }
    Ok(())
}

fn check_inputs(spec: &NetSpec, x: &DMatrix<f64>) -> Result<()> {
    if x.ncols() != spec.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: spec.input_dim(),
            found: x.ncols(),
        });
    }
    Ok(())
}

/// Activations of an MLP forward pass kept for backpropagation.
struct MlpTrace {
    /// `inputs[l]` is the `n × fan_in` input of hidden layer `l`.
    inputs: Vec<DMatrix<f64>>,
    /// Pre-activations of each hidden layer, `n × H_l`.
    pre: Vec<DMatrix<f64>>,
    /// Post-activation of the last hidden layer.
    last: DMatrix<f64>,
    out: DVector<f64>,
}

/// Transposed view of a row-major `rows × cols` block: a `cols × rows`
/// column-major matrix sharing the same memory.
fn block_t<'a>(w: &'a [f64], layout: &Layout, idx: usize) -> DMatrixView<'a, f64> {
    let b = &layout.blocks[idx];
    DMatrixView::from_slice(&w[b.range()], b.cols, b.rows)
}

fn mlp_forward(spec: &NetSpec, activation: Activation, w: &[f64], x: &DMatrix<f64>) -> MlpTrace {
    let layout = spec.layout();
    let hidden = (layout.blocks.len() - 2) / 2;
    let mut inputs = Vec::with_capacity(hidden);
    let mut pre = Vec::with_capacity(hidden);
    let mut a = x.clone();
    for l in 0..hidden {
        let wt = block_t(w, &layout, 2 * l);
        let bias = &w[layout.blocks[2 * l + 1].range()];
        let mut z = &a * wt;
        for (j, mut col) in z.column_iter_mut().enumerate() {
            col.add_scalar_mut(bias[j]);
        }
        let next = z.map(|v| activation.apply(v));
        inputs.push(std::mem::replace(&mut a, next));
        pre.push(z);
    }
    let wt_out = block_t(w, &layout, 2 * hidden);
    let b_out = w[layout.blocks[2 * hidden + 1].offset];
    let mut out = &a * wt_out.column(0);
    out.add_scalar_mut(b_out);
    MlpTrace {
        inputs,
        pre,
        last: a,
        out,
    }
}

/// Backpropagate `d_out = ∂L/∂f` (one entry per row) into `grad`.
fn mlp_backward(
    spec: &NetSpec,
    activation: Activation,
    w: &[f64],
    trace: &MlpTrace,
    d_out: &DVector<f64>,
    grad: &mut [f64],
) {
    let layout = spec.layout();
    let hidden = trace.pre.len();
    let out_w = &layout.blocks[2 * hidden];
    let g_wout = trace.last.tr_mul(d_out);
    grad[out_w.range()].copy_from_slice(g_wout.as_slice());
    grad[layout.blocks[2 * hidden + 1].offset] = d_out.sum();

    // δ for the last hidden layer: d_out ⊗ w_out, gated by h'(z).
    let w_out = &w[out_w.range()];
    let mut delta = DMatrix::from_fn(d_out.len(), w_out.len(), |i, j| {
        d_out[i] * w_out[j] * activation.derivative(trace.pre[hidden - 1][(i, j)])
    });
    for l in (0..hidden).rev() {
        let wb = &layout.blocks[2 * l];
        let g_w = trace.inputs[l].tr_mul(&delta); // fan_in × H
        grad[wb.range()].copy_from_slice(g_w.as_slice());
        let bb = &layout.blocks[2 * l + 1];
        for (j, g) in grad[bb.range()].iter_mut().enumerate() {
            *g = delta.column(j).sum();
        }
        if l > 0 {
            let wt = block_t(w, &layout, 2 * l);
            let mut prev = delta * wt.transpose();
            prev.zip_apply(&trace.pre[l - 1], |d, z| *d *= activation.derivative(z));
            delta = prev;
        }
    }
}

struct RbfTrace {
    /// `phi[(i, j)] = exp(-‖x_i − μ_j‖² / (2σ_g²))`.
    phi: DMatrix<f64>,
    out: DVector<f64>,
}

fn rbf_forward(spec: &NetSpec, sigma_g: f64, w: &[f64], x: &DMatrix<f64>) -> RbfTrace {
    let layout = spec.layout();
    let centers = &w[layout.blocks[0].range()];
    let weights = &w[layout.blocks[1].range()];
    let bias = w[layout.blocks[2].offset];
    let d = x.ncols();
    let inv = 1.0 / (2.0 * sigma_g * sigma_g);
    let phi = DMatrix::from_fn(x.nrows(), weights.len(), |i, j| {
        let mu = &centers[j * d..(j + 1) * d];
        let r2: f64 = (0..d).map(|k| (x[(i, k)] - mu[k]).powi(2)).sum();
        (-r2 * inv).exp()
    });
    let mut out = &phi * DVector::from_column_slice(weights);
    out.add_scalar_mut(bias);
    RbfTrace { phi, out }
}

fn rbf_backward(
    spec: &NetSpec,
    sigma_g: f64,
    w: &[f64],
    x: &DMatrix<f64>,
    trace: &RbfTrace,
    d_out: &DVector<f64>,
    grad: &mut [f64],
) {
    let layout = spec.layout();
    let (cb, wb, bb) = (&layout.blocks[0], &layout.blocks[1], &layout.blocks[2]);
    let centers = &w[cb.range()];
    let weights = &w[wb.range()];
    let d = x.ncols();
    let inv_g2 = 1.0 / (sigma_g * sigma_g);
    let g_w = trace.phi.tr_mul(d_out);
    grad[wb.range()].copy_from_slice(g_w.as_slice());
    grad[bb.offset] = d_out.sum();
    let g_c = &mut grad[cb.range()];
    g_c.fill(0.0);
    for j in 0..weights.len() {
        let mu = &centers[j * d..(j + 1) * d];
        for i in 0..x.nrows() {
            let s = d_out[i] * weights[j] * trace.phi[(i, j)] * inv_g2;
            if s == 0.0 {
                continue;
            }
            for k in 0..d {
                g_c[j * d + k] += s * (x[(i, k)] - mu[k]);
            }
        }
    }
}

fn forward_unchecked(spec: &NetSpec, w: &[f64], x: &DMatrix<f64>) -> DVector<f64> {
    match spec {
        NetSpec::Mlp(m) => mlp_forward(spec, m.activation, w, x).out,
        NetSpec::RbfNet(r) => rbf_forward(spec, r.sigma_g, w, x).out,
    }
}

/// Network outputs for every row of `x`.
pub fn forward(spec: &NetSpec, w: &WeightSample, x: &DMatrix<f64>) -> Result<DVector<f64>> {
    spec.validate()?;
    check_len(spec, &w.values)?;
    check_inputs(spec, x)?;
    Ok(forward_unchecked(spec, &w.values, x))
}

fn log_prior(spec: &NetSpec, prior: &PriorSpec, w: &[f64], grad: Option<&mut [f64]>) -> f64 {
    let layout = spec.layout();
    let mut lp = 0.0;
    let mut grad = grad;
    for b in &layout.blocks {
        let var = prior.variance(spec, b);
        let vals = &w[b.range()];
        let ss: f64 = vals.iter().map(|v| v * v).sum();
        lp += -0.5 * b.len() as f64 * (LN_2PI + var.ln()) - 0.5 * ss / var;
        if let Some(g) = grad.as_deref_mut() {
            for (gi, v) in g[b.range()].iter_mut().zip(vals) {
                *gi -= v / var;
            }
        }
    }
    lp
}

/// Log posterior density (Gaussian likelihood and prior, all normalizing
/// constants included) and, optionally, its gradient.
pub(crate) fn log_posterior_impl(
    spec: &NetSpec,
    prior: &PriorSpec,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    noise_var: f64,
    w: &[f64],
    grad: Option<&mut [f64]>,
) -> f64 {
    let n = y.len();
    let mut lp = 0.0;
    let mut grad = grad;
    if let Some(g) = grad.as_deref_mut() {
        g.fill(0.0);
    }
    if n > 0 {
        let inv = 1.0 / noise_var;
        match spec {
            NetSpec::Mlp(m) => {
                let trace = mlp_forward(spec, m.activation, w, x);
                let resid = y - &trace.out;
                lp += -0.5 * n as f64 * (LN_2PI + noise_var.ln()) - 0.5 * inv * resid.norm_squared();
                if let Some(g) = grad.as_deref_mut() {
                    mlp_backward(spec, m.activation, w, &trace, &(resid * inv), g);
                }
            }
            NetSpec::RbfNet(r) => {
                let trace = rbf_forward(spec, r.sigma_g, w, x);
                let resid = y - &trace.out;
                lp += -0.5 * n as f64 * (LN_2PI + noise_var.ln()) - 0.5 * inv * resid.norm_squared();
                if let Some(g) = grad.as_deref_mut() {
                    rbf_backward(spec, r.sigma_g, w, x, &trace, &(resid * inv), g);
                }
            }
        }
    }
    lp + log_prior(spec, prior, w, grad)
}

fn check_all(spec: &NetSpec, prior: &PriorSpec, data: &Dataset, noise_var: f64, w: &[f64]) -> Result<()> {
    spec.validate()?;
    prior.validate()?;
    check_len(spec, w)?;
    if !data.is_empty() {
        check_inputs(spec, &data.x)?;
    }
    if !(noise_var > 0.0) {
        return Err(Error::invalid(format!("noise variance must be positive, got {noise_var}")));
    }
    Ok(())
}

/// `Σᵢ log N(yᵢ | f(xᵢ; w), σ²) + log p(w)`.
pub fn log_posterior(
    spec: &NetSpec,
    prior: &PriorSpec,
    data: &Dataset,
    noise_var: f64,
    w: &WeightSample,
) -> Result<f64> {
    check_all(spec, prior, data, noise_var, &w.values)?;
    Ok(log_posterior_impl(spec, prior, &data.x, &data.y, noise_var, &w.values, None))
}

/// Exact gradient of [`log_posterior`] with respect to the flat parameters.
pub fn grad_log_posterior(
    spec: &NetSpec,
    prior: &PriorSpec,
    data: &Dataset,
    noise_var: f64,
    w: &WeightSample,
) -> Result<Vec<f64>> {
    check_all(spec, prior, data, noise_var, &w.values)?;
    let mut g = vec![0.0; w.values.len()];
    log_posterior_impl(spec, prior, &data.x, &data.y, noise_var, &w.values, Some(&mut g));
    Ok(g)
}

/// One draw from the weight prior.
pub fn sample_prior(spec: &NetSpec, prior: &PriorSpec, rng: &mut Rng) -> Vec<f64> {
    let layout = spec.layout();
    let mut w = vec![0.0; layout.len()];
    for b in &layout.blocks {
        let sd = prior.variance(spec, b).sqrt();
        for v in &mut w[b.range()] {
            *v = sd * rng.sample::<f64, _>(StandardNormal);
        }
    }
    w
}

/// Mean and population standard deviation of the network output across
/// samples at each grid point. Observation noise is not added.
pub fn predictive_moments(
    spec: &NetSpec,
    samples: &[WeightSample],
    grid: &DMatrix<f64>,
) -> Result<UncertaintyField> {
    if samples.is_empty() {
        return Err(Error::invalid("predictive moments need at least one sample"));
    }
    spec.validate()?;
    check_inputs(spec, grid)?;
    let m = grid.nrows();
    let mut outputs = Vec::with_capacity(samples.len());
    for s in samples {
        check_len(spec, &s.values)?;
        outputs.push(forward_unchecked(spec, &s.values, grid));
    }
    let count = samples.len() as f64;
    let mean = DVector::from_fn(m, |i, _| outputs.iter().map(|o| o[i]).sum::<f64>() / count);
    let std = DVector::from_fn(m, |i, _| {
        let ss: f64 = outputs.iter().map(|o| (o[i] - mean[i]).powi(2)).sum();
        (ss / count).sqrt()
    });
    UncertaintyField::new(grid.clone(), mean, std)
}
