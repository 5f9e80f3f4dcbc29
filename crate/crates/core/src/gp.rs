//! Exact GP regression with a Gaussian likelihood.
//!
//! With `A = K(X,X) + σ²I = LLᵀ`:
//!
//! ```text
//! mean(X*) = K(X*,X) A⁻¹ y
//! cov(X*)  = K(X*,X*) − V ᵀV,   V = L⁻¹ K(X,X*)
//! ```
//!
//! `A` is never inverted explicitly. Uncertainty fields only need the
//! diagonal of `cov`, which costs `O(n·m)` memory for `m` test points.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::datasets::Dataset;
use crate::kernels::{gram_cross, gram_diag, gram_square, min_eigenvalue, KernelSpec};
use crate::{Error, Result};

pub use crate::field::UncertaintyField;

/// Likelihood variance used throughout the 2-D experiments.
pub const DEFAULT_NOISE_VAR: f64 = 0.02;

/// Extra diagonal jitter tried, in order, when factorizing `K + σ²I`.
pub const JITTER_LADDER: [f64; 4] = [0.0, 1e-10, 1e-8, 1e-6];

#[derive(Clone, Debug, PartialEq)]
pub struct GPPosterior {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub train_count: usize,
    pub noise_var: f64,
}

/// Decomposition of the posterior variance at one test input into the
/// prior variance minus a kernel-weighted sum over training points.
#[derive(Clone, Debug, PartialEq)]
pub struct KdeWeights {
    pub beta: DVector<f64>,
    pub prior_var: f64,
    pub posterior_var: f64,
}

/// A GP conditioned on a dataset: the factorization of `K(X,X) + σ²I` and
/// the weights `A⁻¹y`, shareable read-only across threads.
pub struct ConditionedGp {
    spec: KernelSpec,
    train_x: DMatrix<f64>,
    noise_var: f64,
    factor: Option<Factor>,
}

struct Factor {
    chol: Cholesky<f64, Dyn>,
    l: DMatrix<f64>,
    alpha: DVector<f64>,
    jitter: f64,
}

impl ConditionedGp {
    pub fn fit(spec: &KernelSpec, data: &Dataset, noise_var: f64) -> Result<Self> {
        Self::fit_with_clipping(spec, data, noise_var, None)
    }

    /// As [`fit`](Self::fit), but when every jitter level fails and
    /// `clip_floor` is set, eigenvalues of `K + σ²I` below the floor are
    /// raised to it and the factorization is retried once.
    pub fn fit_with_clipping(
        spec: &KernelSpec,
        data: &Dataset,
        noise_var: f64,
        clip_floor: Option<f64>,
    ) -> Result<Self> {
        spec.validate()?;
        if !(noise_var > 0.0 && noise_var.is_finite()) {
            return Err(Error::invalid(format!("noise variance must be positive, got {noise_var}")));
        }
        if let Some(d) = spec.input_dim() {
            if data.dim() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    found: data.dim(),
                });
            }
        }
        let factor = if data.is_empty() {
            None
        } else {
            let mut gram = gram_square(spec, &data.x, noise_var)?;
            let mut found = try_ladder(&gram.values);
            if found.is_none() {
                if let Some(floor) = clip_floor {
                    let before = gram.min_eigenvalue();
                    gram.clip_eigenvalues(floor);
                    found = Cholesky::new(gram.values.clone()).map(|c| (c, 0.0));
                    if found.is_none() {
                        return Err(Error::NotPositiveDefinite {
                            kernel: spec.name(),
                            min_eigenvalue: before,
                        });
                    }
                }
            }
            let Some((chol, jitter)) = found else {
                return Err(Error::NotPositiveDefinite {
                    kernel: spec.name(),
                    min_eigenvalue: min_eigenvalue(&gram.values),
                });
            };
            let alpha = chol.solve(&data.y);
            let l = chol.l();
            Some(Factor {
                chol,
                l,
                alpha,
                jitter,
            })
        };
        Ok(Self {
            spec: spec.clone(),
            train_x: data.x.clone(),
            noise_var,
            factor,
        })
    }

    pub fn train_count(&self) -> usize {
        self.train_x.nrows()
    }

    /// Jitter added on top of `σ²` to make the factorization succeed.
    pub fn jitter_applied(&self) -> f64 {
        self.factor.as_ref().map_or(0.0, |f| f.jitter)
    }

    fn whitened(&self, f: &Factor, x_star: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let k_star = gram_cross(&self.spec, &self.train_x, x_star)?.values; // n × m
        let v = f
            .l
            .solve_lower_triangular(&k_star)
            .ok_or_else(|| Error::Kernel("singular Cholesky factor".into()))?;
        Ok((k_star, v))
    }

    /// Posterior mean and marginal variances (unclamped) at `x_star`.
    pub fn mean_and_variance(&self, x_star: &DMatrix<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
        let prior = DVector::from_vec(gram_diag(&self.spec, x_star)?);
        let Some(f) = &self.factor else {
            return Ok((DVector::zeros(x_star.nrows()), prior));
        };
        let (k_star, v) = self.whitened(f, x_star)?;
        let mean = k_star.tr_mul(&f.alpha);
        let var = DVector::from_fn(x_star.nrows(), |j, _| {
            prior[j] - v.column(j).norm_squared()
        });
        Ok((mean, var))
    }

    /// Full posterior over `x_star`, including the `m × m` covariance.
    pub fn posterior(&self, x_star: &DMatrix<f64>) -> Result<GPPosterior> {
        let k_ss = gram_square(&self.spec, x_star, 0.0)?.values;
        let (mean, cov) = match &self.factor {
            None => (DVector::zeros(x_star.nrows()), k_ss),
            Some(f) => {
                let (k_star, v) = self.whitened(f, x_star)?;
                let mut cov = k_ss - v.tr_mul(&v);
                // Mirror to remove rounding asymmetry.
                let m = cov.nrows();
                for i in 0..m {
                    for j in (i + 1)..m {
                        let s = 0.5 * (cov[(i, j)] + cov[(j, i)]);
                        cov[(i, j)] = s;
                        cov[(j, i)] = s;
                    }
                }
                (k_star.tr_mul(&f.alpha), cov)
            }
        };
        Ok(GPPosterior {
            mean,
            cov,
            train_count: self.train_count(),
            noise_var: self.noise_var,
        })
    }

    pub fn kde_weights(&self, x_star: &[f64]) -> Result<KdeWeights> {
        let xs = DMatrix::from_row_slice(1, x_star.len(), x_star);
        let prior_var = gram_diag(&self.spec, &xs)?[0];
        let Some(f) = &self.factor else {
            return Ok(KdeWeights {
                beta: DVector::zeros(0),
                prior_var,
                posterior_var: prior_var,
            });
        };
        let k_star = gram_cross(&self.spec, &self.train_x, &xs)?.values.column(0).into_owned();
        let beta = f.chol.solve(&k_star);
        let posterior_var = prior_var - beta.dot(&k_star);
        Ok(KdeWeights {
            beta,
            prior_var,
            posterior_var,
        })
    }

    pub fn field(&self, grid: &DMatrix<f64>) -> Result<UncertaintyField> {
        let (mean, var) = self.mean_and_variance(grid)?;
        let std = var.map(|v| v.max(0.0).sqrt());
        UncertaintyField::new(grid.clone(), mean, std)
    }
}

/// Posterior over `x_star` given `data`; see [`ConditionedGp`].
pub fn posterior(
    spec: &KernelSpec,
    data: &Dataset,
    noise_var: f64,
    x_star: &DMatrix<f64>,
) -> Result<GPPosterior> {
    ConditionedGp::fit(spec, data, noise_var)?.posterior(x_star)
}

/// `sqrt(max(diag(cov), 0))`.
pub fn predictive_std(post: &GPPosterior) -> DVector<f64> {
    post.cov.diagonal().map(|v| v.max(0.0).sqrt())
}

/// `β(x*) = A⁻¹ k(X, x*)`, the prior variance `k(x*,x*)` and the posterior
/// variance `k(x*,x*) − Σᵢ βᵢ k(x*, xᵢ)`.
pub fn kde_weights(
    spec: &KernelSpec,
    data: &Dataset,
    noise_var: f64,
    x_star: &[f64],
) -> Result<KdeWeights> {
    ConditionedGp::fit(spec, data, noise_var)?.kde_weights(x_star)
}

/// `k(x, x)` at every grid point.
pub fn prior_variance_field(spec: &KernelSpec, grid: &DMatrix<f64>) -> Result<DVector<f64>> {
    Ok(DVector::from_vec(gram_diag(spec, grid)?))
}

fn try_ladder(k: &DMatrix<f64>) -> Option<(Cholesky<f64, Dyn>, f64)> {
    JITTER_LADDER.iter().find_map(|&jitter| {
        let mut a = k.clone();
        for i in 0..a.nrows() {
            a[(i, i)] += jitter;
        }
        Cholesky::new(a).map(|c| (c, jitter))
    })
}

/// Predictive mean and standard deviation over `grid`, computed from the
/// covariance diagonal only.
pub fn field(
    spec: &KernelSpec,
    data: &Dataset,
    noise_var: f64,
    grid: &DMatrix<f64>,
) -> Result<UncertaintyField> {
    ConditionedGp::fit(spec, data, noise_var)?.field(grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{gen_gaussian_mixture, make_grid, GridSpec};
    use crate::kernels::Activation;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn single_point() -> Dataset {
        Dataset::new(
            DMatrix::from_row_slice(1, 2, &[0.5, -1.0]),
            DVector::from_element(1, 1.0),
            0,
        )
        .unwrap()
    }

    #[test]
    fn empty_data_recovers_prior() {
        let spec = KernelSpec::rbf(1.0);
        let xs = DMatrix::from_row_slice(3, 2, &[0.0, 0.0, 1.0, 0.0, 5.0, 5.0]);
        let post = posterior(&spec, &Dataset::empty(2), 0.02, &xs).unwrap();
        assert_eq!(post.mean, DVector::zeros(3));
        assert_eq!(post.cov, gram_square(&spec, &xs, 0.0).unwrap().values);
        assert_eq!(predictive_std(&post), DVector::from_element(3, 1.0));
    }

    #[test]
    fn scalar_conditioning() {
        let spec = KernelSpec::rbf(1.0);
        let xs = DMatrix::from_row_slice(1, 2, &[0.5, -1.0]);
        let post = posterior(&spec, &single_point(), 0.02, &xs).unwrap();
        assert_relative_eq!(post.mean[0], 1.0 / 1.02, max_relative = 1e-14);
        assert_relative_eq!(post.cov[(0, 0)], 1.0 - 1.0 / 1.02, max_relative = 1e-12);
        assert_relative_eq!(predictive_std(&post)[0], (1.0 - 1.0 / 1.02_f64).sqrt(), max_relative = 1e-12);

        let kde = kde_weights(&spec, &single_point(), 0.02, &[0.5, -1.0]).unwrap();
        assert_relative_eq!(kde.beta[0], 1.0 / 1.02, max_relative = 1e-14);
    }

    #[test]
    fn far_points_keep_prior_std() {
        let spec = KernelSpec::rbf(1.0);
        let ds = gen_gaussian_mixture(0, 10).unwrap();
        let xs = DMatrix::from_row_slice(1, 2, &[20.0, -20.0]);
        let f = field(&spec, &ds, 0.02, &xs).unwrap();
        assert!((f.std[0] - 1.0).abs() < 1e-4);
        let kde = kde_weights(&spec, &ds, 0.02, &[20.0, -20.0]).unwrap();
        assert!(kde.beta.iter().all(|b| b.abs() < 1e-30));
        assert!((kde.posterior_var - kde.prior_var).abs() < 1e-12);
    }

    #[test]
    fn predictive_std_clamps_negative_variance() {
        let post = GPPosterior {
            mean: DVector::zeros(2),
            cov: DMatrix::from_row_slice(2, 2, &[-1e-12, 0.0, 0.0, 4.0]),
            train_count: 0,
            noise_var: 0.02,
        };
        assert_eq!(predictive_std(&post).as_slice(), &[0.0, 2.0]);
    }

    #[test]
    fn kde_identity_on_mixture() {
        let ds = gen_gaussian_mixture(0, 10).unwrap();
        let mut rng = crate::rng::rng_from_seed(4);
        use rand::Rng as _;
        for spec in [KernelSpec::rbf(1.0), KernelSpec::nngp(2, Activation::ReLU, 1.0, 1.0, 2)] {
            let gp = ConditionedGp::fit(&spec, &ds, 0.02).unwrap();
            for _ in 0..10 {
                let p = [rng.random_range(-6.0..6.0), rng.random_range(-6.0..6.0)];
                let kde = gp.kde_weights(&p).unwrap();
                let (_, var) = gp.mean_and_variance(&DMatrix::from_row_slice(1, 2, &p)).unwrap();
                assert!((kde.posterior_var - var[0]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn field_matches_full_posterior_diagonal() {
        let ds = gen_gaussian_mixture(2, 5).unwrap();
        let grid = make_grid(&GridSpec::square(2, -4.0, 4.0, 6)).unwrap();
        let spec = KernelSpec::nngp(1, Activation::Erf, 1.0, 1.0, 2);
        let f = field(&spec, &ds, 0.02, &grid).unwrap();
        let post = posterior(&spec, &ds, 0.02, &grid).unwrap();
        for i in 0..grid.nrows() {
            assert_relative_eq!(f.std[i], predictive_std(&post)[i], max_relative = 1e-9, epsilon = 1e-12);
            assert_relative_eq!(f.mean[i], post.mean[i], max_relative = 1e-12);
        }
    }

    #[test]
    fn prior_variance_examples() {
        let grid = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        let rbf = prior_variance_field(&KernelSpec::rbf(1.0), &grid).unwrap();
        assert_eq!(rbf, DVector::from_element(2, 1.0));
        let relu = prior_variance_field(&KernelSpec::nngp(1, Activation::ReLU, 1.0, 1.0, 2), &grid).unwrap();
        assert_relative_eq!(relu[0], 1.75, max_relative = 1e-15);
        let net = KernelSpec::RbfNet { sigma_b: 1.0, sigma_w: 200.0, sigma_g: 1.0, sigma_mu: 10.0, input_dim: 2 };
        let v = prior_variance_field(&net, &grid).unwrap();
        assert_relative_eq!(v[1], 200.004_975_124_378_1, max_relative = 1e-12);
    }

    #[test]
    fn interpolates_with_tiny_noise() {
        let x = DMatrix::from_row_slice(3, 2, &[0.0, 0.0, 5.0, 0.0, 0.0, 5.0]);
        let y = DVector::from_vec(vec![0.7, -1.2, 2.0]);
        let ds = Dataset::new(x.clone(), y.clone(), 0).unwrap();
        let f = field(&KernelSpec::rbf(1.0), &ds, 1e-8, &x).unwrap();
        for i in 0..3 {
            assert!((f.mean[i] - y[i]).abs() < 1e-3);
        }
    }

    #[test]
    fn non_pd_matrix_reports_eigenvalue() {
        let ds = gen_gaussian_mixture(0, 10).unwrap();
        let spec = KernelSpec::nngp(2, Activation::ReLU, 1.0, 1.0, 2).with_mc(100, 0);
        match ConditionedGp::fit(&spec, &ds, 1e-9) {
            Err(Error::NotPositiveDefinite { kernel, min_eigenvalue }) => {
                assert!(kernel.starts_with("NNGP"));
                assert!(min_eigenvalue < 0.0);
            }
            other => panic!("expected factorization failure, got {:?}", other.map(|_| ())),
        }
        assert!(ConditionedGp::fit(&KernelSpec::rbf(1.0), &single_point(), 0.0).is_err());
        let clipped = ConditionedGp::fit_with_clipping(&spec, &ds, 1e-9, Some(1e-6)).unwrap();
        assert_eq!(clipped.jitter_applied(), 0.0);
    }

    #[test]
    fn monte_carlo_gram_factorizes_with_likelihood_variance() {
        let ds = gen_gaussian_mixture(0, 10).unwrap();
        let spec = KernelSpec::nngp(2, Activation::ReLU, 1.0, 1.0, 2).with_mc(100_000, 0);
        let gp = ConditionedGp::fit(&spec, &ds, DEFAULT_NOISE_VAR).unwrap();
        assert_eq!(gp.jitter_applied(), 0.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn std_ignores_targets_and_shrinks_with_more_data(
            pts in prop::collection::vec(-5.0..5.0f64, 4..20),
            extra in prop::collection::vec(-5.0..5.0f64, 2..8),
            ys in prop::collection::vec(-3.0..3.0f64, 10),
        ) {
            let n = pts.len() / 2;
            let x = DMatrix::from_row_slice(n, 2, &pts[..2 * n]);
            let y1 = DVector::from_fn(n, |i, _| ys[i % ys.len()]);
            let y2 = DVector::from_fn(n, |i, _| -2.0 * ys[(i + 3) % ys.len()] + 1.0);
            let d1 = Dataset::new(x.clone(), y1, 0).unwrap();
            let d2 = Dataset::new(x, y2, 0).unwrap();
            let grid = make_grid(&GridSpec::square(2, -6.0, 6.0, 7)).unwrap();
            let more = {
                let k = extra.len() / 2;
                Dataset::new(DMatrix::from_row_slice(k, 2, &extra[..2 * k]), DVector::zeros(k), 0).unwrap()
            };
            let superset = d1.concat(&more).unwrap();
            for spec in [KernelSpec::rbf(1.0), KernelSpec::nngp(2, Activation::ReLU, 1.0, 1.0, 2)] {
                let f1 = field(&spec, &d1, 0.02, &grid).unwrap();
                let f2 = field(&spec, &d2, 0.02, &grid).unwrap();
                prop_assert_eq!(&f1.std, &f2.std);
                let fs = field(&spec, &superset, 0.02, &grid).unwrap();
                for i in 0..grid.nrows() {
                    prop_assert!(fs.std[i] <= f1.std[i] + 1e-8);
                }
                let post = posterior(&spec, &d1, 0.02, &grid).unwrap();
                let prior = prior_variance_field(&spec, &grid).unwrap();
                for i in 0..grid.nrows() {
                    prop_assert!(post.cov[(i, i)] <= prior[i] + 1e-8);
                    prop_assert!(post.cov[(i, i)] >= -1e-10);
                }
            }
        }
    }
}
