//! Covariance functions.
//!
//! Besides the classic stationary and dot-product kernels this module
//! implements the kernel of an infinitely wide fully connected network
//! (NNGP). The NNGP kernel is evaluated by tracking the 2×2 covariance of
//! the pre-activations at `x` and `x'` through the layers:
//!
//! ```text
//! k⁰(x,x')  = σ_b² + σ_w² xᵀx' / d
//! kˡ(x,x')  = σ_b² + σ_w² E[h(u) h(v)],   (u,v) ~ N(0, [[kˡ⁻¹(x,x), kˡ⁻¹(x,x')], [.., kˡ⁻¹(x',x')]])
//! ```
//!
//! The expectation has closed forms for ReLU (arc-cosine kernel) and erf;
//! any activation can instead be estimated by Monte-Carlo with `N` draws per
//! layer.

use std::f64::consts::{FRAC_2_PI, PI};
use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng as _;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::rng::derive_seed;
use crate::{Error, Result};

/// Slack allowed on cosines and arcsin arguments before they are clamped.
pub const CLAMP_TOL: f64 = 1e-12;

/// Pointwise nonlinearity of a network layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Activation {
    #[serde(rename = "ReLU", alias = "relu")]
    ReLU,
    #[serde(rename = "Erf", alias = "erf")]
    Erf,
    #[serde(rename = "Tanh", alias = "tanh")]
    Tanh,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::ReLU => z.max(0.0),
            Activation::Erf => libm::erf(z),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative; the ReLU subgradient at 0 is 0.
    #[inline]
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::ReLU => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Erf => std::f64::consts::FRAC_2_SQRT_PI * (-z * z).exp(),
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
        }
    }

    pub fn has_closed_form(self) -> bool {
        !matches!(self, Activation::Tanh)
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "relu" => Ok(Activation::ReLU),
            "erf" => Ok(Activation::Erf),
            "tanh" => Ok(Activation::Tanh),
            other => Err(Error::invalid(format!("unknown activation {other:?}"))),
        }
    }
}

impl std::fmt::Display for Activation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Activation::ReLU => "relu",
            Activation::Erf => "erf",
            Activation::Tanh => "tanh",
        })
    }
}

fn default_periodic_l() -> f64 {
    1.0
}
fn default_period() -> f64 {
    4.0
}
fn default_sigma0_sq() -> f64 {
    1.0
}

/// A covariance function together with its (fixed) hyperparameters.
///
/// Serialized as a JSON object tagged by `"kind"`, e.g.
/// `{"kind":"NNGP","depth":2,"activation":"ReLU","sigma_w":1.0,"sigma_b":1.0,"input_dim":2}`.
/// `sigma_mu` is the standard deviation of the RBF-network centre prior.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum KernelSpec {
    #[serde(rename = "RBF")]
    Rbf { l: f64 },
    Periodic {
        #[serde(default = "default_periodic_l")]
        l: f64,
        #[serde(default = "default_period")]
        p: f64,
    },
    DotProduct {
        #[serde(default = "default_sigma0_sq")]
        sigma0_sq: f64,
    },
    #[serde(rename = "NNGP")]
    Nngp {
        depth: usize,
        activation: Activation,
        sigma_w: f64,
        sigma_b: f64,
        input_dim: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        mc_samples: Option<u64>,
        /// Master seed for Monte-Carlo layer estimates.
        #[serde(default)]
        mc_seed: u64,
    },
    #[serde(rename = "RBFNet")]
    RbfNet {
        sigma_b: f64,
        sigma_w: f64,
        sigma_g: f64,
        sigma_mu: f64,
        input_dim: usize,
    },
}

impl KernelSpec {
    pub fn rbf(l: f64) -> Self {
        KernelSpec::Rbf { l }
    }

    pub fn nngp(depth: usize, activation: Activation, sigma_w: f64, sigma_b: f64, input_dim: usize) -> Self {
        KernelSpec::Nngp {
            depth,
            activation,
            sigma_w,
            sigma_b,
            input_dim,
            mc_samples: None,
            mc_seed: 0,
        }
    }

    /// Same NNGP spec with every layer estimated from `n` Monte-Carlo draws.
    pub fn with_mc(self, n: u64, seed: u64) -> Self {
        match self {
            KernelSpec::Nngp {
                depth,
                activation,
                sigma_w,
                sigma_b,
                input_dim,
                ..
            } => KernelSpec::Nngp {
                depth,
                activation,
                sigma_w,
                sigma_b,
                input_dim,
                mc_samples: Some(n),
                mc_seed: seed,
            },
            other => other,
        }
    }

    pub fn name(&self) -> String {
        match self {
            KernelSpec::Rbf { .. } => "RBF".into(),
            KernelSpec::Periodic { .. } => "Periodic".into(),
            KernelSpec::DotProduct { .. } => "DotProduct".into(),
            KernelSpec::Nngp {
                depth,
                activation,
                mc_samples,
                ..
            } => match mc_samples {
                Some(n) => format!("NNGP-{activation}-{depth}L-MC{n}"),
                None => format!("NNGP-{activation}-{depth}L"),
            },
            KernelSpec::RbfNet { .. } => "RBFNet".into(),
        }
    }

    pub fn input_dim(&self) -> Option<usize> {
        match self {
            KernelSpec::Nngp { input_dim, .. } | KernelSpec::RbfNet { input_dim, .. } => {
                Some(*input_dim)
            }
            _ => None,
        }
    }

    /// True when evaluation draws random numbers.
    pub fn is_stochastic(&self) -> bool {
        matches!(
            self,
            KernelSpec::Nngp { mc_samples: Some(_), .. }
                | KernelSpec::Nngp {
                    activation: Activation::Tanh,
                    ..
                }
        )
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::invalid(format!("{name} must be positive, got {v}")))
            }
        };
        let non_negative = |name: &str, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(Error::invalid(format!("{name} must be non-negative, got {v}")))
            }
        };
        match *self {
            KernelSpec::Rbf { l } => positive("l", l),
            KernelSpec::Periodic { l, p } => positive("l", l).and(positive("p", p)),
            KernelSpec::DotProduct { sigma0_sq } => non_negative("sigma0_sq", sigma0_sq),
            KernelSpec::Nngp {
                depth,
                activation,
                sigma_w,
                sigma_b,
                input_dim,
                mc_samples,
                ..
            } => {
                if depth == 0 {
                    return Err(Error::invalid("NNGP depth must be at least 1"));
                }
                if input_dim == 0 {
                    return Err(Error::invalid("NNGP input_dim must be at least 1"));
                }
                non_negative("sigma_w", sigma_w)?;
                non_negative("sigma_b", sigma_b)?;
                match mc_samples {
                    Some(0) => Err(Error::invalid("mc_samples must be at least 1")),
                    None if !activation.has_closed_form() => Err(Error::invalid(format!(
                        "activation {activation} has no closed-form step; set mc_samples"
                    ))),
                    _ => Ok(()),
                }
            }
            KernelSpec::RbfNet {
                sigma_b,
                sigma_w,
                sigma_g,
                sigma_mu,
                input_dim,
            } => {
                if input_dim == 0 {
                    return Err(Error::invalid("RBFNet input_dim must be at least 1"));
                }
                non_negative("sigma_b", sigma_b)?;
                non_negative("sigma_w", sigma_w)?;
                positive("sigma_g", sigma_g)?;
                positive("sigma_mu", sigma_mu)
            }
        }
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let spec: KernelSpec = serde_json::from_reader(File::open(path)?)?;
        spec.validate()?;
        Ok(spec)
    }

    /// Evaluate `k(x, x')`. Monte-Carlo NNGP kernels use `mc_seed`.
    pub fn eval(&self, x: &[f64], x2: &[f64]) -> Result<f64> {
        let seed = match self {
            KernelSpec::Nngp { mc_seed, .. } => *mc_seed,
            _ => 0,
        };
        self.eval_seeded(x, x2, seed)
    }

    /// Evaluate with an explicit seed for the Monte-Carlo layers (ignored
    /// by deterministic kernels).
    pub fn eval_seeded(&self, x: &[f64], x2: &[f64], seed: u64) -> Result<f64> {
        if x.len() != x2.len() {
            return Err(Error::DimensionMismatch {
                expected: x.len(),
                found: x2.len(),
            });
        }
        if let Some(d) = self.input_dim() {
            if x.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    found: x.len(),
                });
            }
        }
        match *self {
            KernelSpec::Rbf { l } => Ok((-sq_dist(x, x2) / (2.0 * l * l)).exp()),
            KernelSpec::Periodic { l, p } => {
                let s = (PI * sq_dist(x, x2).sqrt() / p).sin();
                Ok((-2.0 * s * s / (l * l)).exp())
            }
            KernelSpec::DotProduct { sigma0_sq } => Ok(sigma0_sq + dot(x, x2)),
            KernelSpec::Nngp { .. } => nngp_kernel_seeded(self, x, x2, seed),
            KernelSpec::RbfNet {
                sigma_b,
                sigma_w,
                sigma_g,
                sigma_mu,
                ..
            } => Ok(rbf_net_kernel(sigma_b, sigma_w, sigma_g, sigma_mu, x, x2)),
        }
    }
}

/// `k(x, x')` for any kernel; see [`KernelSpec::eval`].
pub fn kernel_eval(spec: &KernelSpec, x: &[f64], x2: &[f64]) -> Result<f64> {
    spec.eval(x, x2)
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| u * v).sum()
}

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum()
}

/// Covariance of the first-layer pre-activations: `σ_b² + σ_w² xᵀx'/d`.
pub fn nngp_base(x: &[f64], x2: &[f64], sigma_w: f64, sigma_b: f64, d: usize) -> Result<f64> {
    if d == 0 {
        return Err(Error::invalid("input dimension must be positive"));
    }
    if x.len() != d || x2.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            found: if x.len() != d { x.len() } else { x2.len() },
        });
    }
    Ok(sigma_b * sigma_b + sigma_w * sigma_w * dot(x, x2) / d as f64)
}

/// The 2×2 pre-activation covariance at `(x, x')` for one layer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KernelTriple {
    pub k_xx: f64,
    pub k_xy: f64,
    pub k_yy: f64,
}

impl KernelTriple {
    pub fn new(k_xx: f64, k_xy: f64, k_yy: f64) -> Self {
        Self { k_xx, k_xy, k_yy }
    }

    fn diagonal(k: f64) -> Self {
        Self::new(k, k, k)
    }

    /// Cosine of the angle between `x` and `x'` in feature space, clamped
    /// into [-1, 1] when it overshoots by at most [`CLAMP_TOL`].
    fn cosine(&self) -> Result<f64> {
        if !(self.k_xx > 0.0 && self.k_yy > 0.0) {
            return Err(Error::Kernel(format!(
                "diagonal entries must be positive, got {} and {}",
                self.k_xx, self.k_yy
            )));
        }
        let c = self.k_xy / (self.k_xx * self.k_yy).sqrt();
        if c.abs() > 1.0 + CLAMP_TOL {
            return Err(Error::Kernel(format!("cosine {c} outside [-1, 1]")));
        }
        Ok(c.clamp(-1.0, 1.0))
    }
}

/// Closed-form ReLU layer (arc-cosine kernel of degree one).
pub fn nngp_relu_step(k_xx: f64, k_xy: f64, k_yy: f64, sigma_w: f64, sigma_b: f64) -> Result<f64> {
    let cos = KernelTriple::new(k_xx, k_xy, k_yy).cosine()?;
    let theta = cos.acos();
    Ok(sigma_b * sigma_b
        + sigma_w * sigma_w / (2.0 * PI)
            * (k_xx * k_yy).sqrt()
            * (theta.sin() + (PI - theta) * cos))
}

fn erf_arcsin_arg(k_xx: f64, k_xy: f64, k_yy: f64) -> Result<f64> {
    if !(k_xx >= 0.0 && k_yy >= 0.0) {
        return Err(Error::Kernel(format!(
            "diagonal entries must be non-negative, got {k_xx} and {k_yy}"
        )));
    }
    let a = 2.0 * k_xy / ((1.0 + 2.0 * k_xx) * (1.0 + 2.0 * k_yy)).sqrt();
    if a.abs() > 1.0 + CLAMP_TOL {
        return Err(Error::Kernel(format!("arcsin argument {a} outside [-1, 1]")));
    }
    Ok(a.clamp(-1.0, 1.0))
}

/// Closed-form erf layer: `σ_b² + σ_w² (2/π) asin(2k_xy / √((1+2k_xx)(1+2k_yy)))`.
pub fn nngp_erf_step(k_xx: f64, k_xy: f64, k_yy: f64, sigma_w: f64, sigma_b: f64) -> Result<f64> {
    let a = erf_arcsin_arg(k_xx, k_xy, k_yy)?;
    Ok(sigma_b * sigma_b + sigma_w * sigma_w * FRAC_2_PI * a.asin())
}

fn analytic_triple_step(
    t: KernelTriple,
    activation: Activation,
    sigma_w: f64,
    sigma_b: f64,
) -> Result<KernelTriple> {
    let (sw2, sb2) = (sigma_w * sigma_w, sigma_b * sigma_b);
    match activation {
        Activation::ReLU => {
            if !(t.k_xx > 0.0 && t.k_yy > 0.0) {
                return Err(Error::Kernel(format!(
                    "diagonal entries must be positive, got {} and {}",
                    t.k_xx, t.k_yy
                )));
            }
            Ok(KernelTriple {
                k_xx: sb2 + 0.5 * sw2 * t.k_xx,
                k_xy: nngp_relu_step(t.k_xx, t.k_xy, t.k_yy, sigma_w, sigma_b)?,
                k_yy: sb2 + 0.5 * sw2 * t.k_yy,
            })
        }
        Activation::Erf => Ok(KernelTriple {
            k_xx: nngp_erf_step(t.k_xx, t.k_xx, t.k_xx, sigma_w, sigma_b)?,
            k_xy: nngp_erf_step(t.k_xx, t.k_xy, t.k_yy, sigma_w, sigma_b)?,
            k_yy: nngp_erf_step(t.k_yy, t.k_yy, t.k_yy, sigma_w, sigma_b)?,
        }),
        Activation::Tanh => Err(Error::Kernel(
            "tanh has no closed-form layer; use Monte-Carlo".into(),
        )),
    }
}

/// Monte-Carlo layer step on the full triple.
///
/// Draws `n` pairs `(u, v)` from the bivariate normal with covariance `t`
/// and estimates `E[h(u)h(v)]`, `E[h(u)²]` and `E[h(v)²]` from the same
/// draws, so the returned triple is again a valid covariance.
pub fn nngp_mc_triple_step(
    t: KernelTriple,
    activation: Activation,
    sigma_w: f64,
    sigma_b: f64,
    n: u64,
    seed: u64,
) -> Result<KernelTriple> {
    if n == 0 {
        return Err(Error::invalid("Monte-Carlo sample count must be at least 1"));
    }
    let clamp_diag = |v: f64| {
        if v >= -CLAMP_TOL {
            Ok(v.max(0.0))
        } else {
            Err(Error::Kernel(format!("negative variance {v} in 2x2 covariance")))
        }
    };
    let a = clamp_diag(t.k_xx)?;
    let b = clamp_diag(t.k_yy)?;
    let bound = (a * b).sqrt();
    if t.k_xy.abs() > bound * (1.0 + CLAMP_TOL) + CLAMP_TOL {
        return Err(Error::Kernel(format!(
            "2x2 covariance [[{a}, {c}], [{c}, {b}]] is not positive semi-definite",
            c = t.k_xy
        )));
    }
    let c = t.k_xy.clamp(-bound, bound);
    let sb2 = sigma_b * sigma_b;
    if sigma_w == 0.0 {
        return Ok(KernelTriple::diagonal(sb2));
    }

    // Cholesky factor of [[a, c], [c, b]].
    let l11 = a.sqrt();
    let (l21, l22) = if l11 > 0.0 {
        let l21 = c / l11;
        (l21, (b - l21 * l21).max(0.0).sqrt())
    } else {
        (0.0, b.sqrt())
    };

    let mut rng = crate::rng::rng_from_seed(seed);
    let (mut suv, mut suu, mut svv) = (0.0, 0.0, 0.0);
    for _ in 0..n {
        let z1: f64 = rng.sample(StandardNormal);
        let z2: f64 = rng.sample(StandardNormal);
        let hu = activation.apply(l11 * z1);
        let hv = activation.apply(l21 * z1 + l22 * z2);
        suv += hu * hv;
        suu += hu * hu;
        svv += hv * hv;
    }
    let sw2 = sigma_w * sigma_w;
    let nf = n as f64;
    Ok(KernelTriple {
        k_xx: sb2 + sw2 * suu / nf,
        k_xy: sb2 + sw2 * suv / nf,
        k_yy: sb2 + sw2 * svv / nf,
    })
}

/// Monte-Carlo estimate of one layer's off-diagonal kernel value.
#[allow(clippy::too_many_arguments)]
pub fn nngp_mc_step(
    k_xx: f64,
    k_xy: f64,
    k_yy: f64,
    activation: Activation,
    sigma_w: f64,
    sigma_b: f64,
    n: u64,
    seed: u64,
) -> Result<f64> {
    nngp_mc_triple_step(
        KernelTriple::new(k_xx, k_xy, k_yy),
        activation,
        sigma_w,
        sigma_b,
        n,
        seed,
    )
    .map(|t| t.k_xy)
}

/// Pre-activation covariance triple after `depth` hidden layers.
///
/// Monte-Carlo layers draw from `derive_seed(seed, [layer])` for every input
/// pair, so with a fixed seed the estimate is a single deterministic
/// function of `(x, x')`. Arguments are put in lexicographic order first,
/// which makes that function exactly symmetric.
pub fn nngp_triple(spec: &KernelSpec, x: &[f64], x2: &[f64], seed: u64) -> Result<KernelTriple> {
    if spec.is_stochastic() && lex_greater(x, x2) {
        let t = nngp_triple(spec, x2, x, seed)?;
        return Ok(KernelTriple::new(t.k_yy, t.k_xy, t.k_xx));
    }
    let KernelSpec::Nngp {
        depth,
        activation,
        sigma_w,
        sigma_b,
        input_dim,
        mc_samples,
        ..
    } = *spec
    else {
        return Err(Error::invalid(format!("{} is not an NNGP kernel", spec.name())));
    };
    spec.validate()?;
    let mut t = KernelTriple {
        k_xx: nngp_base(x, x, sigma_w, sigma_b, input_dim)?,
        k_xy: nngp_base(x, x2, sigma_w, sigma_b, input_dim)?,
        k_yy: nngp_base(x2, x2, sigma_w, sigma_b, input_dim)?,
    };
    for layer in 0..depth {
        t = match mc_samples {
            Some(n) => {
                let s = derive_seed(seed, &[layer as u64]);
                nngp_mc_triple_step(t, activation, sigma_w, sigma_b, n, s)?
            }
            None => analytic_triple_step(t, activation, sigma_w, sigma_b)?,
        };
    }
    Ok(t)
}

fn lex_greater(a: &[f64], b: &[f64]) -> bool {
    a.iter()
        .zip(b)
        .map(|(u, v)| u.total_cmp(v))
        .find(|o| o.is_ne())
        .is_some_and(|o| o.is_gt())
}

fn nngp_kernel_seeded(spec: &KernelSpec, x: &[f64], x2: &[f64], seed: u64) -> Result<f64> {
    nngp_triple(spec, x, x2, seed).map(|t| t.k_xy)
}

/// NNGP kernel value: one base layer followed by `depth` activation steps.
pub fn nngp_kernel(spec: &KernelSpec, x: &[f64], x2: &[f64]) -> Result<f64> {
    spec.eval(x, x2)
}

/// Kernel of a single-hidden-layer RBF network with Gaussian centre prior
/// `N(0, σ_μ² I)` and output weights `N(0, σ_w²)`, in closed form.
pub fn rbf_net_kernel(
    sigma_b: f64,
    sigma_w: f64,
    sigma_g: f64,
    sigma_mu: f64,
    x: &[f64],
    x2: &[f64],
) -> f64 {
    let g2 = sigma_g * sigma_g;
    let mu2 = sigma_mu * sigma_mu;
    let e2 = 1.0 / (2.0 / g2 + 1.0 / mu2);
    let s2 = 2.0 * g2 + g2 * g2 / mu2;
    let m2 = 2.0 * mu2 + g2;
    let d = x.len() as f64;
    let scale = (e2 / mu2).powf(0.5 * d);
    let nx: f64 = dot(x, x);
    let ny: f64 = dot(x2, x2);
    sigma_b * sigma_b
        + sigma_w * sigma_w
            * scale
            * (-(nx + ny) / (2.0 * m2) - sq_dist(x, x2) / (2.0 * s2)).exp()
}

/// A dense kernel matrix and the jitter added to its diagonal.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelMatrix {
    pub values: DMatrix<f64>,
    pub jitter_applied: f64,
}

impl KernelMatrix {
    pub fn min_eigenvalue(&self) -> f64 {
        min_eigenvalue(&self.values)
    }

    /// Replace eigenvalues below `floor` by `floor`. Only meaningful for
    /// square symmetric matrices; used as an opt-in repair for noisy
    /// Monte-Carlo Gram matrices.
    pub fn clip_eigenvalues(&mut self, floor: f64) {
        let eig = SymmetricEigen::new(self.values.clone());
        let clipped = eig.eigenvalues.map(|v| v.max(floor));
        let q = &eig.eigenvectors;
        let mut m = q * DMatrix::from_diagonal(&clipped) * q.transpose();
        symmetrize(&mut m);
        self.values = m;
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        write_matrix_csv(&self.values, path)
    }
}

pub(crate) fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return f64::INFINITY;
    }
    SymmetricEigen::new(m.clone())
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

pub(crate) fn rows_of(x: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..x.nrows())
        .map(|i| x.row(i).iter().copied().collect())
        .collect()
}

fn master_seed(spec: &KernelSpec) -> u64 {
    match spec {
        KernelSpec::Nngp { mc_seed, .. } => *mc_seed,
        _ => 0,
    }
}

fn check_dims(spec: &KernelSpec, x: &DMatrix<f64>, x2: &DMatrix<f64>) -> Result<()> {
    if x.ncols() != x2.ncols() {
        return Err(Error::DimensionMismatch {
            expected: x.ncols(),
            found: x2.ncols(),
        });
    }
    if let Some(d) = spec.input_dim() {
        if x.ncols() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: x.ncols(),
            });
        }
    }
    Ok(())
}

/// Square Gram matrix `K(X, X) + jitter·I`.
///
/// Only the upper triangle is evaluated and then mirrored. Monte-Carlo
/// kernels use the same `mc_seed` draws for every entry, so square, cross
/// and diagonal evaluations all agree with [`KernelSpec::eval`].
pub fn gram_square(spec: &KernelSpec, x: &DMatrix<f64>, jitter: f64) -> Result<KernelMatrix> {
    spec.validate()?;
    check_dims(spec, x, x)?;
    if !(jitter >= 0.0) {
        return Err(Error::invalid(format!("jitter must be non-negative, got {jitter}")));
    }
    let rows = rows_of(x);
    let m = rows.len();
    let master = master_seed(spec);
    let upper: Vec<Vec<f64>> = (0..m)
        .into_par_iter()
        .map(|i| {
            (i..m)
                .map(|j| spec.eval_seeded(&rows[i], &rows[j], master))
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;
    let mut values = DMatrix::zeros(m, m);
    for (i, row) in upper.iter().enumerate() {
        for (off, &v) in row.iter().enumerate() {
            let j = i + off;
            values[(i, j)] = v;
            values[(j, i)] = v;
        }
        values[(i, i)] += jitter;
    }
    Ok(KernelMatrix {
        values,
        jitter_applied: jitter,
    })
}

/// Cross kernel matrix `K(X, X')` (no jitter).
pub fn gram_cross(spec: &KernelSpec, x: &DMatrix<f64>, x2: &DMatrix<f64>) -> Result<KernelMatrix> {
    spec.validate()?;
    check_dims(spec, x, x2)?;
    let a = rows_of(x);
    let b = rows_of(x2);
    let master = master_seed(spec);
    let rows: Vec<Vec<f64>> = (0..a.len())
        .into_par_iter()
        .map(|i| {
            (0..b.len())
                .map(|j| spec.eval_seeded(&a[i], &b[j], master))
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;
    let values = DMatrix::from_fn(a.len(), b.len(), |i, j| rows[i][j]);
    Ok(KernelMatrix {
        values,
        jitter_applied: 0.0,
    })
}

/// `K(X, X')` in the general case; equivalent to [`gram_square`] when both
/// arguments are the same matrix.
pub fn gram(
    spec: &KernelSpec,
    x: &DMatrix<f64>,
    x2: &DMatrix<f64>,
    jitter: f64,
) -> Result<KernelMatrix> {
    if std::ptr::eq(x, x2) || x == x2 {
        gram_square(spec, x, jitter)
    } else {
        gram_cross(spec, x, x2)
    }
}

/// Diagonal `k(x_i, x_i)` for every row, i.e. the prior variance.
pub fn gram_diag(spec: &KernelSpec, x: &DMatrix<f64>) -> Result<Vec<f64>> {
    spec.validate()?;
    check_dims(spec, x, x)?;
    let rows = rows_of(x);
    let master = master_seed(spec);
    rows.par_iter()
        .map(|r| spec.eval_seeded(r, r, master))
        .collect()
}

/// Writes a matrix as headerless CSV, one matrix row per line.
pub fn write_matrix_csv(m: &DMatrix<f64>, path: impl AsRef<Path>) -> Result<()> {
    let mut wtr = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(BufWriter::new(File::create(path)?));
    for i in 0..m.nrows() {
        wtr.write_record(m.row(i).iter().map(|v| v.to_string()))?;
    }
    wtr.flush()?;
    Ok(())
}
