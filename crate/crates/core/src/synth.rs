//! Two-moons and three-spirals toy datasets.
//!
//! Both generators draw from a ChaCha8 stream seeded with `seed`, so the
//! output is identical across platforms. Per point the stream yields the curve
//! parameter first and then two standard-normal noise draws, which means a
//! call with `noise_std = 0` and the same seed returns the exact noiseless
//! positions of a noisy call.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Archimedean spiral parameter range: about 1.5 turns.
pub const SPIRAL_T_MIN: f64 = 0.6;
pub const SPIRAL_T_MAX: f64 = 0.6 + 3.0 * PI;
/// Radial growth rate, chosen so the outer end sits at radius 2.3 and the
/// noiseless curves stay inside the [-2.5, 3.5] x [-3, 3] viewport.
pub const SPIRAL_GROWTH: f64 = 2.3 / SPIRAL_T_MAX;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset2D {
    /// N x 2
    pub points: Array2<f64>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl LabeledDataset2D {
    pub fn new(points: Array2<f64>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if points.ncols() != 2 {
            return Err(Error::DimensionMismatch { expected: 2, got: points.ncols() });
        }
        if points.nrows() != labels.len() {
            return Err(Error::DimensionMismatch { expected: points.nrows(), got: labels.len() });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::invalid(format!("label {bad} outside [0, {num_classes})")));
        }
        if points.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("dataset points"));
        }
        Ok(Self { points, labels, num_classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn class_count(&self, class: usize) -> usize {
        self.labels.iter().filter(|&&l| l == class).count()
    }

    /// Writes `x,y,label` rows with 17 significant digits.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "x,y,label")?;
        for (row, label) in self.points.rows().into_iter().zip(&self.labels) {
            writeln!(out, "{:.16e},{:.16e},{}", row[0], row[1], label)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Noiseless two-moons curve: class 0 is the upper arc, class 1 the lower
/// offset arc. `t` runs over [0, pi].
pub fn moon_point(class: usize, t: f64) -> [f64; 2] {
    match class {
        0 => [t.cos(), t.sin()],
        _ => [1.0 - t.cos(), 0.5 - t.sin()],
    }
}

/// Noiseless spiral arm `class` of three, rotated by 2*pi*class/3.
pub fn spiral_point(class: usize, t: f64) -> [f64; 2] {
    let r = SPIRAL_GROWTH * t;
    let angle = t + 2.0 * PI * class as f64 / 3.0;
    [r * angle.cos(), r * angle.sin()]
}

fn generate(
    num_classes: usize,
    n_per_class: usize,
    noise_std: f64,
    seed: u64,
    t_range: (f64, f64),
    curve: fn(usize, f64) -> [f64; 2],
) -> Result<LabeledDataset2D> {
    if n_per_class == 0 {
        return Err(Error::invalid("n_per_class must be at least 1"));
    }
    if !(noise_std >= 0.0) || !noise_std.is_finite() {
        return Err(Error::invalid(format!("noise_std must be finite and >= 0, got {noise_std}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = num_classes * n_per_class;
    let mut points = Array2::zeros((n, 2));
    let mut labels = Vec::with_capacity(n);
    for class in 0..num_classes {
        for _ in 0..n_per_class {
            let t = rng.random_range(t_range.0..=t_range.1);
            let [x, y] = curve(class, t);
            let nx: f64 = rng.sample(StandardNormal);
            let ny: f64 = rng.sample(StandardNormal);
            let row = labels.len();
            points[[row, 0]] = x + noise_std * nx;
            points[[row, 1]] = y + noise_std * ny;
            labels.push(class);
        }
    }
    LabeledDataset2D::new(points, labels, num_classes)
}

pub fn make_two_moons(n_per_class: usize, noise_std: f64, seed: u64) -> Result<LabeledDataset2D> {
    generate(2, n_per_class, noise_std, seed, (0.0, PI), moon_point)
}

pub fn make_three_spirals(n_per_class: usize, noise_std: f64, seed: u64) -> Result<LabeledDataset2D> {
    generate(3, n_per_class, noise_std, seed, (SPIRAL_T_MIN, SPIRAL_T_MAX), spiral_point)
}
