//! Synthetic 2-D regression datasets, evaluation grids and CSV persistence.
//!
//! Targets are `-1` for the first mixture component (inner ring) and `+1`
//! for the second component (outer ring). The GP posterior covariance does
//! not depend on the targets, so only the mean fields are affected by this
//! labelling.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::rng::rng_from_seed;
use crate::{Error, Result};

pub const MIXTURE_MEANS: [[f64; 2]; 2] = [[-2.0, -2.0], [2.0, 2.0]];
pub const MIXTURE_VARIANCE: f64 = 0.5;
pub const INNER_RING: (f64, f64) = (3.0, 4.0);
pub const OUTER_RING: (f64, f64) = (8.0, 9.0);

/// Training inputs (one row per point) and regression targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub seed: u64,
}

impl Dataset {
    pub fn new(x: DMatrix<f64>, y: DVector<f64>, seed: u64) -> Result<Self> {
        if x.ncols() == 0 {
            return Err(Error::invalid("dataset inputs need at least one column"));
        }
        if x.nrows() != y.len() {
            return Err(Error::DimensionMismatch {
                expected: x.nrows(),
                found: y.len(),
            });
        }
        if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(Error::invalid("dataset contains non-finite values"));
        }
        Ok(Self { x, y, seed })
    }

    /// A dataset without observations. GP inference on it returns the prior.
    pub fn empty(dim: usize) -> Self {
        Self {
            x: DMatrix::zeros(0, dim),
            y: DVector::zeros(0),
            seed: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.x.row(i).iter().copied().collect()
    }

    /// Training rows concatenated with `other`'s rows.
    pub fn concat(&self, other: &Dataset) -> Result<Dataset> {
        if self.dim() != other.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: other.dim(),
            });
        }
        let n = self.len() + other.len();
        let x = DMatrix::from_fn(n, self.dim(), |i, j| {
            if i < self.len() {
                self.x[(i, j)]
            } else {
                other.x[(i - self.len(), j)]
            }
        });
        let y = DVector::from_iterator(n, self.y.iter().chain(other.y.iter()).copied());
        Ok(Dataset {
            x,
            y,
            seed: self.seed,
        })
    }
}

/// Two isotropic Gaussians at (-2,-2) and (2,2) with covariance 0.5·I.
///
/// Rows `0..n_per_component` belong to the first component (target -1), the
/// remaining rows to the second (target +1).
pub fn gen_gaussian_mixture(seed: u64, n_per_component: usize) -> Result<Dataset> {
    if n_per_component == 0 {
        return Err(Error::invalid("n_per_component must be at least 1"));
    }
    let mut rng = rng_from_seed(seed);
    let n = 2 * n_per_component;
    let scale = MIXTURE_VARIANCE.sqrt();
    let mut x = DMatrix::zeros(n, 2);
    let mut y = DVector::zeros(n);
    for i in 0..n {
        let component = i / n_per_component;
        let mean = MIXTURE_MEANS[component];
        for (j, mu) in mean.iter().enumerate() {
            let z: f64 = rng.sample(StandardNormal);
            x[(i, j)] = mu + scale * z;
        }
        y[i] = if component == 0 { -1.0 } else { 1.0 };
    }
    Dataset::new(x, y, seed)
}

fn sample_annulus(rng: &mut crate::rng::Rng, (r_in, r_out): (f64, f64)) -> [f64; 2] {
    let angle = std::f64::consts::TAU * rng.random::<f64>();
    let u: f64 = rng.random();
    let r = (u * (r_out * r_out - r_in * r_in) + r_in * r_in).sqrt();
    [r * angle.cos(), r * angle.sin()]
}

/// Two concentric annuli around the origin, sampled uniformly by area.
///
/// The first `n_total / 2` rows lie on the inner ring (radius 3..4, target
/// -1), the rest on the outer ring (radius 8..9, target +1).
pub fn gen_two_rings(seed: u64, n_total: usize) -> Result<Dataset> {
    if n_total < 2 || !n_total.is_multiple_of(2) {
        return Err(Error::invalid(format!(
            "n_total must be even and at least 2, got {n_total}"
        )));
    }
    let mut rng = rng_from_seed(seed);
    let half = n_total / 2;
    let mut x = DMatrix::zeros(n_total, 2);
    let mut y = DVector::zeros(n_total);
    for i in 0..n_total {
        let (ring, label) = if i < half {
            (INNER_RING, -1.0)
        } else {
            (OUTER_RING, 1.0)
        };
        let p = sample_annulus(&mut rng, ring);
        x[(i, 0)] = p[0];
        x[(i, 1)] = p[1];
        y[i] = label;
    }
    Dataset::new(x, y, seed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Mixture,
    Rings,
}

impl DatasetKind {
    pub fn default_size(self) -> usize {
        match self {
            DatasetKind::Mixture => 20,
            DatasetKind::Rings => 50,
        }
    }

    /// `n` is the total number of points.
    pub fn generate(self, seed: u64, n: usize) -> Result<Dataset> {
        match self {
            DatasetKind::Mixture => {
                if !n.is_multiple_of(2) {
                    return Err(Error::invalid(format!(
                        "mixture size must be even, got {n}"
                    )));
                }
                gen_gaussian_mixture(seed, n / 2)
            }
            DatasetKind::Rings => gen_two_rings(seed, n),
        }
    }

    pub fn default_grid(self) -> GridSpec {
        let extent = match self {
            DatasetKind::Mixture => 6.0,
            DatasetKind::Rings => 12.0,
        };
        GridSpec::square(2, -extent, extent, 20)
    }
}

/// Axis-aligned box sampled on a regular lattice.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub resolution: usize,
}

impl GridSpec {
    pub fn square(dim: usize, lo: f64, hi: f64, resolution: usize) -> Self {
        Self {
            lo: vec![lo; dim],
            hi: vec![hi; dim],
            resolution,
        }
    }

    /// Smallest of the two preset 2-D grids ([-6,6]² or [-12,12]²) that
    /// contains every training input with at least one unit of margin,
    /// falling back to a square grid sized to the data.
    pub fn covering(data: &Dataset) -> Self {
        let dim = data.dim().max(1);
        let reach = data.x.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        if reach + 1.0 <= 6.0 {
            Self::square(dim, -6.0, 6.0, 20)
        } else if reach + 1.0 <= 12.0 {
            Self::square(dim, -12.0, 12.0, 20)
        } else {
            let e = (reach + 1.0).ceil();
            Self::square(dim, -e, e, 20)
        }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.lo.is_empty() || self.lo.len() != self.hi.len() {
            return Err(Error::invalid("grid corners must be non-empty and of equal length"));
        }
        if self.resolution < 2 {
            return Err(Error::invalid(format!(
                "grid resolution must be at least 2, got {}",
                self.resolution
            )));
        }
        for (lo, hi) in self.lo.iter().zip(&self.hi) {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(Error::invalid(format!("grid bounds need lo < hi, got {lo} and {hi}")));
            }
        }
        Ok(())
    }

    /// Number of grid points, `resolution^dim`.
    pub fn len(&self) -> usize {
        self.resolution.pow(self.dim() as u32)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn coordinate(&self, axis: usize, k: usize) -> f64 {
        let (lo, hi) = (self.lo[axis], self.hi[axis]);
        if k + 1 == self.resolution {
            hi
        } else {
            lo + (hi - lo) * k as f64 / (self.resolution - 1) as f64
        }
    }
}

/// All grid points, one per row, with axis 0 varying fastest.
pub fn make_grid(spec: &GridSpec) -> Result<DMatrix<f64>> {
    spec.validate()?;
    let d = spec.dim();
    let m = spec.len();
    let mut grid = DMatrix::zeros(m, d);
    for i in 0..m {
        let mut rest = i;
        for axis in 0..d {
            grid[(i, axis)] = spec.coordinate(axis, rest % spec.resolution);
            rest /= spec.resolution;
        }
    }
    Ok(grid)
}

fn x_header(d: usize) -> Vec<String> {
    (1..=d).map(|j| format!("x{j}")).collect()
}

/// Writes `x1,...,xd,y` followed by one row per point. Values use the
/// shortest decimal representation that parses back to the same `f64`.
pub fn save_csv(data: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(BufWriter::new(File::create(path.as_ref())?));
    let mut header = x_header(data.dim());
    header.push("y".into());
    wtr.write_record(&header)?;
    for i in 0..data.len() {
        let mut rec: Vec<String> = data.x.row(i).iter().map(|v| v.to_string()).collect();
        rec.push(data.y[i].to_string());
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Reads a dataset written by [`save_csv`]. A file holding only the header
/// yields an empty dataset; a file without a header is an error.
pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let mut raw = String::new();
    BufReader::new(File::open(path)?).read_to_string(&mut raw)?;
    if raw.trim().is_empty() {
        return Err(Error::malformed(path, "empty file"));
    }
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(raw.as_bytes());
    let header = rdr.headers()?.clone();
    let cols = header.len();
    if cols < 2 {
        return Err(Error::malformed(path, "need at least one input column and y"));
    }
    let d = cols - 1;
    let expected: Vec<String> = x_header(d).into_iter().chain(["y".to_string()]).collect();
    if header.iter().ne(expected.iter().map(String::as_str)) {
        return Err(Error::malformed(
            path,
            format!("header must be {}", expected.join(",")),
        ));
    }
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() != cols {
            return Err(Error::malformed(
                path,
                format!("row {} has {} fields, expected {cols}", line + 1, rec.len()),
            ));
        }
        for (j, field) in rec.iter().enumerate() {
            let v: f64 = field.parse().map_err(|_| {
                Error::malformed(path, format!("row {}: cannot parse {field:?}", line + 1))
            })?;
            if j < d {
                xs.push(v);
            } else {
                ys.push(v);
            }
        }
    }
    if ys.is_empty() {
        return Ok(Dataset::empty(d));
    }
    let n = ys.len();
    Dataset::new(DMatrix::from_row_slice(n, d, &xs), DVector::from_vec(ys), 0)
}
