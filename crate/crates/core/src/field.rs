//! Per-grid-point predictive mean and standard deviation, plus CSV and PGM
//! export.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct UncertaintyField {
    pub grid: DMatrix<f64>,
    pub mean: DVector<f64>,
    pub std: DVector<f64>,
}

impl UncertaintyField {
    pub fn new(grid: DMatrix<f64>, mean: DVector<f64>, std: DVector<f64>) -> Result<Self> {
        if mean.len() != grid.nrows() || std.len() != grid.nrows() {
            return Err(Error::DimensionMismatch {
                expected: grid.nrows(),
                found: if mean.len() != grid.nrows() { mean.len() } else { std.len() },
            });
        }
        if std.iter().any(|s| !(*s >= 0.0)) {
            return Err(Error::invalid("standard deviations must be non-negative"));
        }
        Ok(Self { grid, mean, std })
    }

    pub fn len(&self) -> usize {
        self.grid.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.grid.ncols()
    }

    /// Index of the grid point closest to `p` (first one on ties).
    pub fn nearest(&self, p: &[f64]) -> usize {
        let mut best = (0, f64::INFINITY);
        for i in 0..self.len() {
            let d: f64 = self
                .grid
                .row(i)
                .iter()
                .zip(p)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            if d < best.1 {
                best = (i, d);
            }
        }
        best.0
    }

    /// `x1,...,xd,mean,std`, shortest round-trip float formatting.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
        let mut header: Vec<String> = (1..=self.dim()).map(|j| format!("x{j}")).collect();
        header.push("mean".into());
        header.push("std".into());
        wtr.write_record(&header)?;
        for i in 0..self.len() {
            let mut rec: Vec<String> = self.grid.row(i).iter().map(|v| v.to_string()).collect();
            rec.push(self.mean[i].to_string());
            rec.push(self.std[i].to_string());
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_path(path)?;
        let header = rdr.headers()?.clone();
        let cols = header.len();
        if cols < 3 || &header[cols - 2] != "mean" || &header[cols - 1] != "std" {
            return Err(Error::malformed(path, "header must be x1,...,xd,mean,std"));
        }
        let d = cols - 2;
        let mut grid = Vec::new();
        let mut mean = Vec::new();
        let mut std = Vec::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let vals: Vec<f64> = rec
                .iter()
                .map(|f| f.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::malformed(path, format!("row {}: bad number", line + 1)))?;
            grid.extend_from_slice(&vals[..d]);
            mean.push(vals[d]);
            std.push(vals[d + 1]);
        }
        let m = mean.len();
        UncertaintyField::new(
            DMatrix::from_row_slice(m, d, &grid),
            DVector::from_vec(mean),
            DVector::from_vec(std),
        )
    }

    /// Writes the standard deviation as an 8-bit PGM plus a `*_range.txt`
    /// sidecar; see [`write_pgm`].
    pub fn write_std_pgm(&self, dir: impl AsRef<Path>, resolution: usize) -> Result<()> {
        write_pgm(self.std.as_slice(), resolution, dir.as_ref(), "std")
    }

    pub fn write_mean_pgm(&self, dir: impl AsRef<Path>, resolution: usize) -> Result<()> {
        write_pgm(self.mean.as_slice(), resolution, dir.as_ref(), "mean")
    }
}

/// Binary (P5) 8-bit grayscale image of a 2-D grid field.
///
/// Pixels follow grid order: row `r` of the image holds the points whose
/// second coordinate index is `r`, with the first axis along the columns.
/// Values are rescaled over the field's own min/max, which are written to
/// `{name}_range.txt` next to `{name}.pgm`.
pub fn write_pgm(values: &[f64], resolution: usize, dir: &Path, name: &str) -> Result<()> {
    if values.len() != resolution * resolution {
        return Err(Error::invalid(format!(
            "PGM export needs a 2-D square grid of {resolution}² points, got {}",
            values.len()
        )));
    }
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let span = hi - lo;
    let pixels: Vec<u8> = values
        .iter()
        .map(|&v| {
            if span > 0.0 {
                ((v - lo) / span * 255.0).round().clamp(0.0, 255.0) as u8
            } else {
                0
            }
        })
        .collect();
    let mut out = BufWriter::new(File::create(dir.join(format!("{name}.pgm")))?);
    write!(out, "P5\n{resolution} {resolution}\n255\n")?;
    out.write_all(&pixels)?;
    out.flush()?;
    std::fs::write(
        dir.join(format!("{name}_range.txt")),
        format!("min {lo}\nmax {hi}\n"),
    )?;
    Ok(())
}
