//! Finite-width Bayesian networks sampled with HMC.
//!
//! Parameters live in one flat vector. For an MLP the blocks are, per
//! hidden layer, the weight matrix (row-major, `H_l × fan_in`) followed by
//! the bias, then the `1 × H_L` output weights and the output bias. An RBF
//! network stores its centres (row-major `H × d`), the output weights and
//! the bias.

mod hmc;
mod network;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::kernels::Activation;
use crate::{Error, Result};

pub use hmc::{
    hmc_sample, leapfrog, run_hmc, BnnPosterior, ChainReport, HmcConfig, HmcRun, LogDensity,
};
pub use network::{forward, grad_log_posterior, log_posterior, predictive_moments, sample_prior};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_widths: Vec<usize>,
    pub activation: Activation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RbfNetSpec {
    pub input_dim: usize,
    pub hidden_width: usize,
    pub sigma_g: f64,
}

/// Network architecture with a scalar output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "arch", rename_all = "lowercase")]
pub enum NetSpec {
    Mlp(MlpSpec),
    #[serde(rename = "rbfnet")]
    RbfNet(RbfNetSpec),
}

impl NetSpec {
    pub fn mlp(input_dim: usize, hidden_widths: &[usize], activation: Activation) -> Self {
        NetSpec::Mlp(MlpSpec {
            input_dim,
            hidden_widths: hidden_widths.to_vec(),
            activation,
        })
    }

    pub fn rbf_net(input_dim: usize, hidden_width: usize, sigma_g: f64) -> Self {
        NetSpec::RbfNet(RbfNetSpec {
            input_dim,
            hidden_width,
            sigma_g,
        })
    }

    pub fn input_dim(&self) -> usize {
        match self {
            NetSpec::Mlp(m) => m.input_dim,
            NetSpec::RbfNet(r) => r.input_dim,
        }
    }

    pub fn max_width(&self) -> usize {
        match self {
            NetSpec::Mlp(m) => m.hidden_widths.iter().copied().max().unwrap_or(0),
            NetSpec::RbfNet(r) => r.hidden_width,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            NetSpec::Mlp(m) => {
                if m.input_dim == 0 {
                    return Err(Error::invalid("input_dim must be at least 1"));
                }
                if m.hidden_widths.is_empty() || m.hidden_widths.contains(&0) {
                    return Err(Error::invalid(
                        "an MLP needs at least one hidden layer and every width must be at least 1",
                    ));
                }
                Ok(())
            }
            NetSpec::RbfNet(r) => {
                if r.input_dim == 0 || r.hidden_width == 0 {
                    return Err(Error::invalid("RBF network dimensions must be at least 1"));
                }
                if !(r.sigma_g > 0.0 && r.sigma_g.is_finite()) {
                    return Err(Error::invalid(format!("sigma_g must be positive, got {}", r.sigma_g)));
                }
                Ok(())
            }
        }
    }

    pub fn layout(&self) -> Layout {
        let mut blocks = Vec::new();
        let mut offset = 0;
        let mut push = |name: String, role: BlockRole, rows: usize, cols: usize, fan_in: usize| {
            blocks.push(Block {
                name,
                role,
                offset,
                rows,
                cols,
                fan_in,
            });
            offset += rows * cols;
        };
        match self {
            NetSpec::Mlp(m) => {
                let mut fan_in = m.input_dim;
                for (l, &h) in m.hidden_widths.iter().enumerate() {
                    push(format!("l{}.w", l + 1), BlockRole::Weight, h, fan_in, fan_in);
                    push(format!("l{}.b", l + 1), BlockRole::Bias, h, 1, fan_in);
                    fan_in = h;
                }
                push("out.w".into(), BlockRole::Weight, 1, fan_in, fan_in);
                push("out.b".into(), BlockRole::Bias, 1, 1, fan_in);
            }
            NetSpec::RbfNet(r) => {
                push("centers".into(), BlockRole::Center, r.hidden_width, r.input_dim, r.input_dim);
                push("out.w".into(), BlockRole::Weight, 1, r.hidden_width, r.hidden_width);
                push("out.b".into(), BlockRole::Bias, 1, 1, r.hidden_width);
            }
        }
        Layout { blocks }
    }

    pub fn param_count(&self) -> usize {
        self.layout().len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockRole {
    Weight,
    Bias,
    Center,
}

/// One contiguous parameter block of the flat vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub name: String,
    pub role: BlockRole,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    /// Number of inputs feeding the unit this block belongs to.
    pub fan_in: usize,
}

impl Block {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    pub blocks: Vec<Block>,
}

impl Layout {
    pub fn len(&self) -> usize {
        self.blocks.last().map_or(0, |b| b.offset + b.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Column names for sample CSVs: `block[row][col]` or `block[i]`.
    pub fn column_names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.len());
        for b in &self.blocks {
            for r in 0..b.rows {
                for c in 0..b.cols {
                    if b.rows == 1 || b.cols == 1 {
                        names.push(format!("{}[{}]", b.name, r.max(c)));
                    } else {
                        names.push(format!("{}[{r}][{c}]", b.name));
                    }
                }
            }
        }
        names
    }
}

/// Flat parameter vector tagged with its layout.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightSample {
    pub values: Vec<f64>,
    pub layout: Arc<Layout>,
}

impl WeightSample {
    pub fn new(values: Vec<f64>, layout: Arc<Layout>) -> Result<Self> {
        if values.len() != layout.len() {
            return Err(Error::DimensionMismatch {
                expected: layout.len(),
                found: values.len(),
            });
        }
        Ok(Self { values, layout })
    }

    pub fn zeros(spec: &NetSpec) -> Self {
        let layout = Arc::new(spec.layout());
        Self {
            values: vec![0.0; layout.len()],
            layout,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PriorKind {
    /// Weight variance `σ_w² / fan_in`.
    WidthAware,
    /// Weight variance `σ_w²` regardless of width.
    Standard,
}

impl std::str::FromStr for PriorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "width-aware" => Ok(PriorKind::WidthAware),
            "standard" => Ok(PriorKind::Standard),
            other => Err(Error::invalid(format!("unknown prior {other:?}"))),
        }
    }
}

/// Centred Gaussian prior over all parameters.
///
/// For RBF networks the output weights follow `N(0, σ_w²)` unless
/// `scale_rbf_output` is set, in which case they use `σ_w² / H`; centres
/// follow `N(0, σ_μ² I)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    pub kind: PriorKind,
    pub sigma_w: f64,
    pub sigma_b: f64,
    #[serde(default = "default_sigma_mu")]
    pub sigma_mu: f64,
    #[serde(default)]
    pub scale_rbf_output: bool,
}

fn default_sigma_mu() -> f64 {
    10.0
}

impl PriorSpec {
    pub fn width_aware(sigma_w: f64, sigma_b: f64) -> Self {
        Self {
            kind: PriorKind::WidthAware,
            sigma_w,
            sigma_b,
            sigma_mu: default_sigma_mu(),
            scale_rbf_output: false,
        }
    }

    pub fn standard(sigma_w: f64, sigma_b: f64) -> Self {
        Self {
            kind: PriorKind::Standard,
            ..Self::width_aware(sigma_w, sigma_b)
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("sigma_w", self.sigma_w),
            ("sigma_b", self.sigma_b),
            ("sigma_mu", self.sigma_mu),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    /// Prior variance of each parameter in `block`.
    pub fn variance(&self, spec: &NetSpec, block: &Block) -> f64 {
        let sw2 = self.sigma_w * self.sigma_w;
        match (spec, block.role) {
            (_, BlockRole::Bias) => self.sigma_b * self.sigma_b,
            (_, BlockRole::Center) => self.sigma_mu * self.sigma_mu,
            (NetSpec::Mlp(_), BlockRole::Weight) => match self.kind {
                PriorKind::WidthAware => sw2 / block.fan_in as f64,
                PriorKind::Standard => sw2,
            },
            (NetSpec::RbfNet(_), BlockRole::Weight) => {
                if self.scale_rbf_output {
                    sw2 / block.fan_in as f64
                } else {
                    sw2
                }
            }
        }
    }
}
