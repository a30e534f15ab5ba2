//! Information potential field.
//!
//! The field over a reference set `z_1..z_N` with kernel width `h` is
//!
//! ```text
//! psi(z) = 1/N * sum_i exp(-|z - z_i|^2 / (2 h^2))
//! ```
//!
//! The Gaussian normalization constant `(2 pi h^2)^(-d/2)` is left out, so
//! `psi` lies in (0, 1] and equals 1 only when every reference row coincides
//! with the query. Values are comparable between fields only at a fixed
//! `(d, h)`. Thresholds, AUROC and heatmaps only depend on the ordering of
//! scores, so the missing constant never changes a decision.
//!
//! Every query sums its kernel terms over the reference rows in storage order
//! with Neumaier compensation. Queries are split into chunks that may run in
//! parallel, but a query's reduction never depends on the chunking, so
//! results are bit-identical for any chunk size or thread count.

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::feature_io::FeatureMatrix;
use crate::metrics;

pub const DEFAULT_CHUNK_ROWS: usize = 64;
pub const DEFAULT_THRESHOLD_PERCENTILE: f64 = 5.0;

#[derive(Debug, Clone)]
pub struct IpfField {
    reference: Array2<f64>,
    bandwidth: f64,
    chunk_rows: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OodDecision {
    pub score: f64,
    pub threshold: f64,
    pub is_ood: bool,
}

/// Compensated running sum.
#[derive(Default, Clone, Copy)]
struct NeumaierSum {
    sum: f64,
    comp: f64,
}

impl NeumaierSum {
    #[inline]
    fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    fn value(self) -> f64 {
        self.sum + self.comp
    }
}

#[inline]
fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    match (a.as_slice(), b.as_slice()) {
        (Some(a), Some(b)) => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum(),
        _ => a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum(),
    }
}

fn validate_bandwidth(h: f64) -> Result<()> {
    if h.is_finite() && h > 0.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("bandwidth must be finite and > 0, got {h}")))
    }
}

/// Mean kernel value from a row of squared distances.
fn psi_from_sq(d2: &[f64], inv_two_h2: f64) -> f64 {
    let mut acc = NeumaierSum::default();
    for &r2 in d2 {
        acc.add((-r2 * inv_two_h2).exp());
    }
    acc.value() / d2.len() as f64
}

/// `ln psi` from a row of squared distances, stable when every term underflows.
fn log_psi_from_sq(d2: &[f64], inv_two_h2: f64) -> f64 {
    let max = d2.iter().fold(f64::NEG_INFINITY, |m, &r2| m.max(-r2 * inv_two_h2));
    let mut acc = NeumaierSum::default();
    for &r2 in d2 {
        acc.add((-r2 * inv_two_h2 - max).exp());
    }
    max + acc.value().ln() - (d2.len() as f64).ln()
}

impl IpfField {
    pub fn new(reference: Array2<f64>, bandwidth: f64) -> Result<Self> {
        if reference.nrows() == 0 || reference.ncols() == 0 {
            return Err(Error::invalid("reference set must have at least one row and one column"));
        }
        validate_bandwidth(bandwidth)?;
        if reference.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("reference features"));
        }
        let reference = if reference.is_standard_layout() {
            reference
        } else {
            reference.as_standard_layout().into_owned()
        };
        Ok(Self { reference, bandwidth, chunk_rows: DEFAULT_CHUNK_ROWS })
    }

    pub fn from_features(features: &FeatureMatrix, bandwidth: f64) -> Result<Self> {
        Self::new(features.data.clone(), bandwidth)
    }

    /// Number of query rows handed to one worker.
    pub fn with_chunk_rows(mut self, rows: usize) -> Self {
        self.chunk_rows = rows.max(1);
        self
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn reference(&self) -> ArrayView2<'_, f64> {
        self.reference.view()
    }

    pub fn len(&self) -> usize {
        self.reference.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.reference.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.reference.ncols()
    }

    fn check_queries(&self, queries: &ArrayView2<f64>) -> Result<()> {
        if queries.ncols() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), got: queries.ncols() });
        }
        if queries.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("query features"));
        }
        Ok(())
    }

    fn map_rows(&self, queries: ArrayView2<f64>, row_fn: impl Fn(&[f64]) -> f64 + Sync) -> Result<Vec<f64>> {
        self.check_queries(&queries)?;
        let m = queries.nrows();
        let mut out = vec![0.0; m];
        out.par_chunks_mut(self.chunk_rows).enumerate().for_each(|(c, chunk)| {
            let start = c * self.chunk_rows;
            let mut d2 = vec![0.0; self.len()];
            for (k, slot) in chunk.iter_mut().enumerate() {
                let q = queries.row(start + k);
                for (dst, r) in d2.iter_mut().zip(self.reference.rows()) {
                    *dst = sq_dist(q, r);
                }
                *slot = row_fn(&d2);
            }
        });
        Ok(out)
    }

    /// psi for every query row.
    pub fn evaluate(&self, queries: ArrayView2<f64>) -> Result<Vec<f64>> {
        let inv = 0.5 / (self.bandwidth * self.bandwidth);
        self.map_rows(queries, |d2| psi_from_sq(d2, inv))
    }

    /// ln psi for every query row, computed with log-sum-exp so far queries
    /// in high dimension do not collapse to `-inf`.
    pub fn evaluate_log(&self, queries: ArrayView2<f64>) -> Result<Vec<f64>> {
        let inv = 0.5 / (self.bandwidth * self.bandwidth);
        self.map_rows(queries, |d2| log_psi_from_sq(d2, inv))
    }

    pub fn evaluate_one(&self, query: &[f64]) -> Result<f64> {
        let q = ArrayView2::from_shape((1, query.len()), query).expect("1 x len view");
        Ok(self.evaluate(q)?[0])
    }

    /// Flags `query` as out-of-distribution when its psi falls below `threshold`.
    pub fn decide(&self, query: &[f64], threshold: f64) -> Result<OodDecision> {
        if !threshold.is_finite() {
            return Err(Error::invalid("threshold must be finite"));
        }
        let score = self.evaluate_one(query)?;
        Ok(OodDecision { score, threshold, is_ood: score < threshold })
    }

    pub fn decide_batch(&self, queries: ArrayView2<f64>, threshold: f64) -> Result<Vec<OodDecision>> {
        if !threshold.is_finite() {
            return Err(Error::invalid("threshold must be finite"));
        }
        Ok(self
            .evaluate(queries)?
            .into_iter()
            .map(|score| OodDecision { score, threshold, is_ood: score < threshold })
            .collect())
    }

    /// The given percentile of psi over the field's own reference rows.
    pub fn calibrate_threshold(&self, percentile: f64) -> Result<f64> {
        if !(percentile > 0.0 && percentile < 100.0) {
            return Err(Error::invalid(format!("percentile must lie in (0, 100), got {percentile}")));
        }
        let scores = self.evaluate(self.reference.view())?;
        Ok(percentile_linear(&scores, percentile))
    }
}

/// Percentile with linear interpolation between order statistics.
pub fn percentile_linear(values: &[f64], percentile: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = percentile / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Silverman's rule of thumb, using the mean per-dimension sample standard
/// deviation as the scale.
pub fn silverman_bandwidth(features: ArrayView2<f64>) -> Result<f64> {
    let (n, d) = features.dim();
    if n < 2 {
        return Err(Error::invalid("silverman bandwidth needs at least two rows"));
    }
    if d == 0 {
        return Err(Error::invalid("silverman bandwidth needs at least one column"));
    }
    let sigma = features
        .axis_iter(Axis(1))
        .map(|col| {
            let mean = col.sum() / n as f64;
            (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        })
        .sum::<f64>()
        / d as f64;
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::invalid("silverman bandwidth undefined for zero-variance data"));
    }
    let d = d as f64;
    Ok(sigma * (4.0 / ((d + 2.0) * n as f64)).powf(1.0 / (d + 4.0)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub bandwidth: f64,
    pub auroc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub best_bandwidth: f64,
    pub best_auroc: f64,
    pub table: Vec<SweepRow>,
}

impl SweepResult {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("bandwidth,auroc\n");
        for row in &self.table {
            s.push_str(&format!("{},{}\n", row.bandwidth, row.auroc));
        }
        s
    }
}

/// For each bandwidth, scores both validation sets against a field over
/// `reference` and records the AUROC with in-distribution scoring high.
/// Returns the bandwidth with the largest AUROC, preferring the smallest
/// bandwidth among ties.
///
/// Scores are taken as `ln psi`. AUROC only sees the ranking, so this gives
/// the same table as raw psi wherever psi does not underflow, and keeps far
/// queries in high dimension apart where it would.
pub fn sweep_bandwidth(
    reference: ArrayView2<f64>,
    id_val: ArrayView2<f64>,
    ood_val: ArrayView2<f64>,
    grid: &[f64],
) -> Result<SweepResult> {
    if grid.is_empty() {
        return Err(Error::invalid("bandwidth grid is empty"));
    }
    for &h in grid {
        validate_bandwidth(h)?;
    }
    let field = IpfField::new(reference.to_owned(), grid[0])?;
    let id_scores = log_scores_for_grid(&field, id_val, grid)?;
    let ood_scores = log_scores_for_grid(&field, ood_val, grid)?;

    let mut table = Vec::with_capacity(grid.len());
    for (k, &h) in grid.iter().enumerate() {
        let auroc = metrics::auroc(&id_scores[k], &ood_scores[k])?;
        table.push(SweepRow { bandwidth: h, auroc });
    }
    let best = table
        .iter()
        .fold(None::<&SweepRow>, |best, row| match best {
            Some(b) if b.auroc > row.auroc => Some(b),
            Some(b) if b.auroc == row.auroc && b.bandwidth <= row.bandwidth => Some(b),
            _ => Some(row),
        })
        .expect("grid is nonempty");
    Ok(SweepResult { best_bandwidth: best.bandwidth, best_auroc: best.auroc, table })
}

/// `ln psi` of every query for every bandwidth, computing each query's
/// distance row once. Indexed `[bandwidth][query]`.
fn log_scores_for_grid(field: &IpfField, queries: ArrayView2<f64>, grid: &[f64]) -> Result<Vec<Vec<f64>>> {
    field.check_queries(&queries)?;
    let inv: Vec<f64> = grid.iter().map(|h| 0.5 / (h * h)).collect();
    let per_query: Vec<Vec<f64>> = (0..queries.nrows())
        .into_par_iter()
        .with_min_len(field.chunk_rows)
        .map_init(
            || vec![0.0; field.len()],
            |d2, qi| {
                let q = queries.row(qi);
                for (dst, r) in d2.iter_mut().zip(field.reference.rows()) {
                    *dst = sq_dist(q, r);
                }
                inv.iter().map(|&s| log_psi_from_sq(d2, s)).collect()
            },
        )
        .collect();
    Ok((0..grid.len()).map(|k| per_query.iter().map(|row| row[k]).collect()).collect())
}

/// Evenly spaced grid including both ends.
pub fn linear_grid(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..count).map(|i| lo + (hi - lo) * i as f64 / (count - 1) as f64).collect(),
    }
}

/// Geometrically spaced grid including both ends.
pub fn log_grid(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    linear_grid(lo.ln(), hi.ln(), count).into_iter().map(f64::exp).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive(reference: &Array2<f64>, queries: &Array2<f64>, h: f64) -> Vec<f64> {
        let mut out = Vec::new();
        for q in queries.rows() {
            let mut s = 0.0;
            for r in reference.rows() {
                let mut d2 = 0.0;
                for k in 0..q.len() {
                    d2 += (q[k] - r[k]).powi(2);
                }
                s += (-d2 / (2.0 * h * h)).exp();
            }
            out.push(s / reference.nrows() as f64);
        }
        out
    }

    fn random_matrix(rng: &mut ChaCha8Rng, n: usize, d: usize, scale: f64) -> Array2<f64> {
        Array2::from_shape_fn((n, d), |_| rng.random_range(-scale..scale))
    }

    #[test]
    fn lone_reference_scores_one() {
        let f = IpfField::new(array![[0.3, -1.2]], 0.3).unwrap();
        assert_eq!(f.evaluate_one(&[0.3, -1.2]).unwrap(), 1.0);
    }

    #[test]
    fn midpoint_of_two() {
        let (dist, h) = (1.7, 0.4);
        let f = IpfField::new(array![[0.0, 0.0], [dist, 0.0]], h).unwrap();
        let got = f.evaluate_one(&[dist / 2.0, 0.0]).unwrap();
        let expected = (-dist * dist / (8.0 * h * h)).exp();
        assert!((got - expected).abs() <= 1e-12 * expected);
    }

    #[test]
    fn matches_naive_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let reference = random_matrix(&mut rng, 200, 8, 1.0);
        let queries = random_matrix(&mut rng, 50, 8, 1.0);
        let f = IpfField::new(reference.clone(), 0.3).unwrap();
        let got = f.evaluate(queries.view()).unwrap();
        for (g, e) in got.iter().zip(naive(&reference, &queries, 0.3)) {
            assert!((g - e).abs() <= 1e-9 * e, "{g} vs {e}");
        }
    }

    #[test]
    fn chunk_size_does_not_change_results() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let reference = random_matrix(&mut rng, 300, 5, 1.0);
        let queries = random_matrix(&mut rng, 97, 5, 1.5);
        let base = IpfField::new(reference.clone(), 0.5).unwrap().with_chunk_rows(1000);
        let expected = base.evaluate(queries.view()).unwrap();
        for chunk in [1, 7, 64] {
            let f = base.clone().with_chunk_rows(chunk);
            assert_eq!(f.evaluate(queries.view()).unwrap(), expected);
        }
    }

    #[test]
    fn log_mode_agrees_and_survives_underflow() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let reference = random_matrix(&mut rng, 50, 3, 1.0);
        let queries = random_matrix(&mut rng, 10, 3, 1.0);
        let f = IpfField::new(reference, 0.7).unwrap();
        let psi = f.evaluate(queries.view()).unwrap();
        let log_psi = f.evaluate_log(queries.view()).unwrap();
        for (p, l) in psi.iter().zip(&log_psi) {
            assert!((p.ln() - l).abs() < 1e-12);
        }
        let far = array![[1e3, 1e3, 1e3]];
        assert_eq!(f.evaluate(far.view()).unwrap()[0], 0.0);
        let l = f.evaluate_log(far.view()).unwrap()[0];
        assert!(l.is_finite() && l < -1e5);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(IpfField::new(Array2::zeros((0, 2)), 0.3).is_err());
        assert!(IpfField::new(array![[0.0]], 0.0).is_err());
        assert!(IpfField::new(array![[0.0]], -1.0).is_err());
        assert!(IpfField::new(array![[f64::NAN]], 1.0).is_err());
        let f = IpfField::new(array![[0.0, 0.0]], 1.0).unwrap();
        assert!(matches!(f.evaluate_one(&[0.0]), Err(Error::DimensionMismatch { expected: 2, got: 1 })));
        assert!(matches!(f.evaluate_one(&[0.0, f64::INFINITY]), Err(Error::NonFinite(_))));
        assert!(f.decide(&[0.0, 0.0], f64::NAN).is_err());
    }

    #[test]
    fn decisions() {
        let f = IpfField::new(array![[1.0, 2.0]], 0.3).unwrap();
        let d = f.decide(&[1.0, 2.0], 0.5).unwrap();
        assert_eq!(d, OodDecision { score: 1.0, threshold: 0.5, is_ood: false });

        let eps: f64 = 1e-6;
        let h = 0.3;
        let r = 10.0 * h * (2.0 * (1.0 / eps).ln()).sqrt();
        let d = f.decide(&[1.0 + r, 2.0], eps).unwrap();
        assert!(d.score < eps && d.is_ood);
    }

    #[test]
    fn threshold_calibration() {
        let f = IpfField::new(Array2::from_elem((10, 3), 0.25), 0.1).unwrap();
        assert_eq!(f.calibrate_threshold(5.0).unwrap(), 1.0);
        assert_eq!(f.calibrate_threshold(99.0).unwrap(), 1.0);
        assert!(f.calibrate_threshold(0.0).is_err());
        assert!(f.calibrate_threshold(100.0).is_err());
        assert!(f.calibrate_threshold(f64::NAN).is_err());
    }

    #[test]
    fn five_percent_of_reference_flagged() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let reference = random_matrix(&mut rng, 1000, 2, 1.0);
        let f = IpfField::new(reference.clone(), 0.2).unwrap();
        let t = f.calibrate_threshold(5.0).unwrap();
        let flagged = f.decide_batch(reference.view(), t).unwrap().iter().filter(|d| d.is_ood).count();
        assert!((45..=55).contains(&flagged), "{flagged}");
    }

    #[test]
    fn percentile_interpolates() {
        assert_eq!(percentile_linear(&[4.0, 1.0, 3.0, 2.0], 50.0), 2.5);
        assert_eq!(percentile_linear(&[1.0, 2.0, 3.0, 4.0, 5.0], 25.0), 2.0);
    }

    #[test]
    fn silverman() {
        // d = 1, N = 100 standardized data: sigma = 1 exactly
        let mut col: Vec<f64> = (0..100).map(|i| i as f64).collect();
        let mean = col.iter().sum::<f64>() / 100.0;
        let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 99.0).sqrt();
        col.iter_mut().for_each(|v| *v = (*v - mean) / sd);
        let x = Array2::from_shape_vec((100, 1), col).unwrap();
        let h = silverman_bandwidth(x.view()).unwrap();
        assert!((h - (4.0f64 / 300.0).powf(0.2)).abs() < 1e-12);
        assert!((h - 0.4217).abs() < 5e-4);

        let scaled = &x * 3.5;
        let hs = silverman_bandwidth(scaled.view()).unwrap();
        assert!((hs / h - 3.5).abs() < 1e-12);

        assert!(silverman_bandwidth(array![[1.0, 2.0]].view()).is_err());
        assert!(silverman_bandwidth(Array2::from_elem((5, 2), 1.0).view()).is_err());
    }

    #[test]
    fn silverman_high_dimension() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_matrix(&mut rng, 200, 640, 1.0);
        let h = silverman_bandwidth(x.view()).unwrap();
        assert!(h.is_finite() && h > 0.0);
    }

    #[test]
    fn sweep_identical_sets_is_chance() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let reference = random_matrix(&mut rng, 100, 2, 1.0);
        let val = random_matrix(&mut rng, 40, 2, 1.0);
        let grid = linear_grid(0.1, 1.0, 10);
        let r = sweep_bandwidth(reference.view(), val.view(), val.view(), &grid).unwrap();
        assert!(r.table.iter().all(|row| row.auroc == 0.5));
        assert_eq!(r.best_bandwidth, 0.1);
        assert!(sweep_bandwidth(reference.view(), val.view(), val.view(), &[]).is_err());
    }

    #[test]
    fn sweep_single_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let reference = random_matrix(&mut rng, 50, 2, 1.0);
        let id = random_matrix(&mut rng, 20, 2, 1.0);
        let ood = &random_matrix(&mut rng, 20, 2, 1.0) + 5.0;
        let r = sweep_bandwidth(reference.view(), id.view(), ood.view(), &[0.42]).unwrap();
        assert_eq!(r.best_bandwidth, 0.42);
        assert_eq!(r.best_auroc, 1.0);
    }

    #[test]
    fn grids() {
        let g = linear_grid(0.1, 1.0, 10);
        assert_eq!(g.len(), 10);
        assert!((g[9] - 1.0).abs() < 1e-15 && (g[1] - 0.2).abs() < 1e-15);
        let g = log_grid(0.01, 1.0, 3);
        assert!((g[1] - 0.1).abs() < 1e-15);
    }
}
