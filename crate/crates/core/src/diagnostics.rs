//! Monte-Carlo kernel error curves, distance-awareness scatters, field
//! comparison and simple MCMC summaries.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::field::UncertaintyField;
use crate::kernels::{rows_of, Activation, KernelSpec};
use crate::rng::derive_seed;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorCurve {
    pub activation: Activation,
    pub depth: usize,
    pub sample_counts: Vec<u64>,
    /// Mean of `|MC − analytic| / analytic` over points and repetitions.
    pub mean_abs_rel_error: Vec<f64>,
    pub std_of_error: Vec<f64>,
    /// Mean of `|MC − analytic|`.
    pub mean_abs_error: Vec<f64>,
}

impl ErrorCurve {
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
        wtr.write_record([
            "activation",
            "depth",
            "n",
            "mean_abs_rel_error",
            "std_of_error",
            "mean_abs_error",
        ])?;
        for i in 0..self.sample_counts.len() {
            wtr.write_record([
                self.activation.to_string(),
                self.depth.to_string(),
                self.sample_counts[i].to_string(),
                self.mean_abs_rel_error[i].to_string(),
                self.std_of_error[i].to_string(),
                self.mean_abs_error[i].to_string(),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Parameters of [`mc_error_study`] besides the points.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McErrorConfig {
    pub activation: Activation,
    pub depth: usize,
    pub sigma_w: f64,
    pub sigma_b: f64,
    pub sample_counts: Vec<u64>,
    pub reps: usize,
    pub seed: u64,
}

/// Error of the Monte-Carlo NNGP diagonal `k(x*, x*)` against the closed
/// form, for every sample count in the config.
///
/// Each `(N, rep, point)` evaluation uses the seed
/// `derive_seed(seed, [N-index, rep, point])`, so results do not depend on
/// scheduling.
pub fn mc_error_study(config: &McErrorConfig, points: &DMatrix<f64>) -> Result<ErrorCurve> {
    if !config.activation.has_closed_form() {
        return Err(Error::invalid(format!(
            "{} has no closed-form kernel to compare against",
            config.activation
        )));
    }
    if config.reps == 0 || points.nrows() == 0 {
        return Err(Error::invalid("need at least one repetition and one point"));
    }
    let d = points.ncols();
    let exact = KernelSpec::nngp(config.depth, config.activation, config.sigma_w, config.sigma_b, d);
    exact.validate()?;
    let rows = rows_of(points);
    let truth: Vec<f64> = rows
        .iter()
        .map(|r| exact.eval(r, r))
        .collect::<Result<_>>()?;

    let mut curve = ErrorCurve {
        activation: config.activation,
        depth: config.depth,
        sample_counts: config.sample_counts.clone(),
        mean_abs_rel_error: Vec::new(),
        std_of_error: Vec::new(),
        mean_abs_error: Vec::new(),
    };
    for (ni, &n) in config.sample_counts.iter().enumerate() {
        let mc = exact.clone().with_mc(n, 0);
        let jobs: Vec<(usize, usize)> = (0..config.reps)
            .flat_map(|r| (0..rows.len()).map(move |p| (r, p)))
            .collect();
        let errs: Vec<(f64, f64)> = jobs
            .par_iter()
            .map(|&(r, p)| {
                let seed = derive_seed(config.seed, &[ni as u64, r as u64, p as u64]);
                let v = mc.eval_seeded(&rows[p], &rows[p], seed)?;
                let abs = (v - truth[p]).abs();
                Ok((abs / truth[p], abs))
            })
            .collect::<Result<_>>()?;
        let m = errs.len() as f64;
        let mean_rel = errs.iter().map(|e| e.0).sum::<f64>() / m;
        let var = errs.iter().map(|e| (e.0 - mean_rel).powi(2)).sum::<f64>() / m;
        curve.mean_abs_rel_error.push(mean_rel);
        curve.std_of_error.push(var.sqrt());
        curve.mean_abs_error.push(errs.iter().map(|e| e.1).sum::<f64>() / m);
    }
    Ok(curve)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceScatter {
    /// `(i, j, ‖x_i − x_j‖, k(x_i, x_j))` for `i < j`.
    pub pairs: Vec<(usize, usize, f64, f64)>,
}

impl DistanceScatter {
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
        wtr.write_record(["i", "j", "distance", "kernel"])?;
        for &(i, j, d, k) in &self.pairs {
            wtr.write_record([i.to_string(), j.to_string(), d.to_string(), k.to_string()])?;
        }
        wtr.flush()?;
        Ok(())
    }

    /// A pair of pairs `(a, b)` with `d_a < d_b` but `k_a < k_b`, if any.
    pub fn monotonicity_violation(&self) -> Option<(usize, usize)> {
        let mut order: Vec<usize> = (0..self.pairs.len()).collect();
        order.sort_by(|&a, &b| self.pairs[a].2.total_cmp(&self.pairs[b].2));
        // Track the smallest kernel value among strictly closer pairs.
        let mut best: Option<usize> = None;
        let mut i = 0;
        while i < order.len() {
            let d = self.pairs[order[i]].2;
            let mut j = i;
            while j < order.len() && self.pairs[order[j]].2 == d {
                if let Some(a) = best {
                    if self.pairs[a].3 < self.pairs[order[j]].3 {
                        return Some((a, order[j]));
                    }
                }
                j += 1;
            }
            for &k in &order[i..j] {
                if best.is_none_or(|a| self.pairs[k].3 < self.pairs[a].3) {
                    best = Some(k);
                }
            }
            i = j;
        }
        None
    }
}

/// Kernel value against Euclidean distance for every unordered pair.
pub fn distance_awareness(spec: &KernelSpec, x: &DMatrix<f64>) -> Result<DistanceScatter> {
    if x.nrows() < 2 {
        return Err(Error::invalid("need at least two points"));
    }
    spec.validate()?;
    let rows = rows_of(x);
    let n = rows.len();
    let idx: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
    let pairs = idx
        .par_iter()
        .map(|&(i, j)| {
            let d = rows[i]
                .iter()
                .zip(&rows[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            Ok((i, j, d, spec.eval(&rows[i], &rows[j])?))
        })
        .collect::<Result<_>>()?;
    Ok(DistanceScatter { pairs })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldComparison {
    pub spearman_rho: f64,
    pub max_abs_diff: f64,
    pub mean_abs_diff: f64,
}

/// Compare the std fields of two uncertainty fields on the same grid.
pub fn field_compare(a: &UncertaintyField, b: &UncertaintyField) -> Result<FieldComparison> {
    if a.grid != b.grid {
        return Err(Error::invalid("fields are defined on different grids"));
    }
    let rho = spearman(a.std.as_slice(), b.std.as_slice())?;
    let diffs: Vec<f64> = a.std.iter().zip(b.std.iter()).map(|(u, v)| (u - v).abs()).collect();
    let n = diffs.len().max(1) as f64;
    Ok(FieldComparison {
        spearman_rho: rho,
        max_abs_diff: diffs.iter().copied().fold(0.0, f64::max),
        mean_abs_diff: diffs.iter().sum::<f64>() / n,
    })
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && v[order[j]] == v[order[i]] {
            j += 1;
        }
        let r = (i + j + 1) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = r;
        }
        i = j;
    }
    ranks
}

pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            found: b.len(),
        });
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if !(saa > 0.0 && sbb > 0.0) {
        return Err(Error::invalid("correlation is undefined for a constant input"));
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    pearson(&average_ranks(a), &average_ranks(b))
}

/// Effective sample size of equally long chains, from the chain-averaged
/// autocorrelation truncated at the first negative pair sum.
pub fn effective_sample_size(chains: &[Vec<f64>]) -> Result<f64> {
    let n = chains.first().map_or(0, Vec::len);
    if chains.is_empty() || n < 4 || chains.iter().any(|c| c.len() != n) {
        return Err(Error::invalid("need chains of equal length ≥ 4"));
    }
    let m = chains.len();
    let means: Vec<f64> = chains.iter().map(|c| c.iter().sum::<f64>() / n as f64).collect();
    let w = chains
        .iter()
        .zip(&means)
        .map(|(c, mu)| c.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (n - 1) as f64)
        .sum::<f64>()
        / m as f64;
    let grand = means.iter().sum::<f64>() / m as f64;
    let b_over_n = if m > 1 {
        means.iter().map(|mu| (mu - grand).powi(2)).sum::<f64>() / (m - 1) as f64
    } else {
        0.0
    };
    let var_plus = (n - 1) as f64 / n as f64 * w + b_over_n;
    if !(var_plus > 0.0) {
        return Err(Error::invalid("chains have zero variance"));
    }
    let autocov = |lag: usize| -> f64 {
        chains
            .iter()
            .zip(&means)
            .map(|(c, mu)| {
                (0..n - lag).map(|t| (c[t] - mu) * (c[t + lag] - mu)).sum::<f64>() / n as f64
            })
            .sum::<f64>()
            / m as f64
    };
    let rho = |lag: usize| 1.0 - (w - autocov(lag)) / var_plus;
    let mut sum = 0.0;
    let mut lag = 1;
    while lag + 1 < n {
        let pair = rho(lag) + rho(lag + 1);
        if pair < 0.0 {
            break;
        }
        sum += pair;
        lag += 2;
    }
    let tau = (-1.0 + 2.0 * (rho(0) + sum)).max(1.0 / ((m * n) as f64).log10().max(1.0));
    Ok((m * n) as f64 / tau)
}

/// Monte-Carlo standard error of the pooled mean.
pub fn mcse(chains: &[Vec<f64>]) -> Result<f64> {
    let ess = effective_sample_size(chains)?;
    let all: Vec<f64> = chains.iter().flatten().copied().collect();
    let mu = all.iter().sum::<f64>() / all.len() as f64;
    let var = all.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (all.len() - 1) as f64;
    Ok((var / ess).sqrt())
}
