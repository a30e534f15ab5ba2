//! Uncertainty maps over the 2D viewport [-2.5, 3.5] x [-3, 3].

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::ipf::IpfField;
use crate::net::SnMlp;

pub const GRID_SIZE: usize = 100;
pub const X_RANGE: (f64, f64) = (-2.5, 3.5);
pub const Y_RANGE: (f64, f64) = (-3.0, 3.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridMode {
    /// Grid points are mapped through the network before scoring.
    FeatureSpace,
    /// The field lives directly in the 2D input space.
    InputSpace,
}

impl fmt::Display for GridMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GridMode::FeatureSpace => "feature",
            GridMode::InputSpace => "input",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyGrid {
    pub x_values: Vec<f64>,
    pub y_values: Vec<f64>,
    /// `psi[[j, i]]` is the field at `(x_values[i], y_values[j])`.
    pub psi: Array2<f64>,
    pub mode: GridMode,
}

pub fn axis_values(range: (f64, f64), count: usize) -> Vec<f64> {
    let step = (range.1 - range.0) / (count - 1) as f64;
    (0..count).map(|i| if i + 1 == count { range.1 } else { range.0 + step * i as f64 }).collect()
}

/// Every grid node as an input row, `y` major: row `j * 100 + i`.
pub fn grid_points() -> Array2<f64> {
    let xs = axis_values(X_RANGE, GRID_SIZE);
    let ys = axis_values(Y_RANGE, GRID_SIZE);
    Array2::from_shape_fn((GRID_SIZE * GRID_SIZE, 2), |(r, c)| {
        if c == 0 {
            xs[r % GRID_SIZE]
        } else {
            ys[r / GRID_SIZE]
        }
    })
}

/// Scores every grid node against `field`.
pub fn build_grid(field: &IpfField, model: Option<&SnMlp>, mode: GridMode) -> Result<UncertaintyGrid> {
    let points = grid_points();
    let queries = match (mode, model) {
        (GridMode::InputSpace, _) => {
            if field.dim() != 2 {
                return Err(Error::invalid(format!("input-space grid needs a 2-d field, got d = {}", field.dim())));
            }
            points
        }
        (GridMode::FeatureSpace, None) => {
            return Err(Error::invalid("feature-space grid needs a model"));
        }
        (GridMode::FeatureSpace, Some(model)) => {
            if model.input_dim != 2 {
                return Err(Error::invalid(format!("feature-space grid needs a 2-input model, got {}", model.input_dim)));
            }
            if model.hidden_dim != field.dim() {
                return Err(Error::DimensionMismatch { expected: field.dim(), got: model.hidden_dim });
            }
            // rows of the grid are independent; map them through the model in parallel
            let rows: Vec<Array2<f64>> = points
                .axis_chunks_iter(ndarray::Axis(0), GRID_SIZE)
                .collect::<Vec<_>>()
                .into_par_iter()
                .map(|chunk| model.features(chunk))
                .collect::<Result<_>>()?;
            let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
            ndarray::concatenate(ndarray::Axis(0), &views).expect("equal widths")
        }
    };
    let psi = field.evaluate(queries.view())?;
    Ok(UncertaintyGrid {
        x_values: axis_values(X_RANGE, GRID_SIZE),
        y_values: axis_values(Y_RANGE, GRID_SIZE),
        psi: Array2::from_shape_vec((GRID_SIZE, GRID_SIZE), psi).expect("100 x 100"),
        mode,
    })
}

impl UncertaintyGrid {
    pub fn max_psi(&self) -> f64 {
        self.psi.iter().copied().fold(0.0, f64::max)
    }

    /// `1 - psi / max(psi)`; all ones when the whole grid underflowed.
    pub fn uncertainty(&self) -> Array2<f64> {
        let max = self.max_psi();
        if max > 0.0 {
            self.psi.mapv(|p| 1.0 - p / max)
        } else {
            Array2::ones(self.psi.dim())
        }
    }

    /// 8-bit intensities, `round(255 * (1 - uncertainty))`, with row 0 at
    /// the top of the viewport (largest y).
    pub fn pixels(&self) -> Vec<u8> {
        let u = self.uncertainty();
        let (ny, nx) = u.dim();
        let mut out = Vec::with_capacity(ny * nx);
        for j in (0..ny).rev() {
            for i in 0..nx {
                out.push((255.0 * (1.0 - u[[j, i]])).round().clamp(0.0, 255.0) as u8);
            }
        }
        out
    }

    /// Nearest grid node to `(x, y)`, as `(j, i)`, if inside the viewport.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let locate = |v: f64, range: (f64, f64), n: usize| {
            let t = (v - range.0) / (range.1 - range.0) * (n - 1) as f64;
            (t >= -0.5 && t < n as f64 - 0.5).then(|| t.round() as usize)
        };
        Some((locate(y, Y_RANGE, self.y_values.len())?, locate(x, X_RANGE, self.x_values.len())?))
    }

    pub fn count_above(&self, threshold: f64) -> usize {
        self.psi.iter().filter(|&&p| p > threshold).count()
    }

    /// Cells whose psi exceeds the grid median.
    pub fn binarize_at_median(&self) -> Array2<bool> {
        let values: Vec<f64> = self.psi.iter().copied().collect();
        let median = crate::ipf::percentile_linear(&values, 50.0);
        self.psi.mapv(|p| p > median)
    }

    pub fn csv(&self) -> String {
        let mut s = String::with_capacity(GRID_SIZE * GRID_SIZE * 60);
        s.push_str("x,y,psi\n");
        for (j, y) in self.y_values.iter().enumerate() {
            for (i, x) in self.x_values.iter().enumerate() {
                s.push_str(&format!("{x:.16e},{y:.16e},{:.16e}\n", self.psi[[j, i]]));
            }
        }
        s
    }
}

/// Writes a binary PGM (P5) image at `path` and the raw `x,y,psi` table next
/// to it with a `.csv` extension. Returns the CSV path.
pub fn render(grid: &UncertaintyGrid, path: impl AsRef<Path>) -> Result<PathBuf> {
    let path = path.as_ref();
    let (ny, nx) = grid.psi.dim();
    let mut img = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(img, "P5\n{nx} {ny}\n255\n")?;
    img.write_all(&grid.pixels())?;
    img.flush()?;
    let csv_path = path.with_extension("csv");
    std::fs::write(&csv_path, grid.csv())?;
    Ok(csv_path)
}
