//! Accuracy, expected calibration error, AUROC and the softmax-entropy baseline.

use std::fmt::Write as _;

use ndarray::ArrayView2;

use crate::error::{Error, Result};

pub const DEFAULT_ECE_BINS: usize = 15;

/// Area under the ROC curve with in-distribution as the positive class and
/// higher scores meaning "more in-distribution". Equals the probability that
/// a random iD score beats a random OOD score, ties counting one half.
///
/// Computed from average ranks of the pooled sample (Mann-Whitney U), in
/// O(n log n). Ranks are kept doubled as integers so U is exact.
pub fn auroc(scores_id: &[f64], scores_ood: &[f64]) -> Result<f64> {
    if scores_id.is_empty() || scores_ood.is_empty() {
        return Err(Error::invalid("AUROC needs nonempty iD and OOD score lists"));
    }
    if scores_id.iter().chain(scores_ood).any(|v| v.is_nan()) {
        return Err(Error::NonFinite("AUROC scores"));
    }
    let mut pooled: Vec<(f64, bool)> = scores_id
        .iter()
        .map(|&s| (s, true))
        .chain(scores_ood.iter().map(|&s| (s, false)))
        .collect();
    pooled.sort_by(|a, b| a.0.total_cmp(&b.0));

    // sum of doubled 1-based average ranks over the iD entries
    let mut id_rank_sum2: u128 = 0;
    let mut i = 0;
    while i < pooled.len() {
        let mut j = i;
        while j + 1 < pooled.len() && pooled[j + 1].0 == pooled[i].0 {
            j += 1;
        }
        // ranks i+1 ..= j+1 share the doubled average rank (i + j + 2)
        let rank2 = (i + j + 2) as u128;
        let id_in_run = pooled[i..=j].iter().filter(|p| p.1).count() as u128;
        id_rank_sum2 += rank2 * id_in_run;
        i = j + 1;
    }
    let n_id = scores_id.len() as u128;
    let n_ood = scores_ood.len() as u128;
    // 2U = 2R - n(n+1); U counts wins plus half the ties
    let u2 = id_rank_sum2 - n_id * (n_id + 1);
    Ok((u2 as f64 / 2.0) / (n_id as f64 * n_ood as f64))
}

/// Equal-width binned ECE. Bin `b` holds confidences in `[b/B, (b+1)/B)`,
/// with 1.0 falling in the last bin. Empty bins contribute nothing.
pub fn ece(confidences: &[f64], correct: &[bool], num_bins: usize) -> Result<f64> {
    if confidences.len() != correct.len() {
        return Err(Error::DimensionMismatch { expected: confidences.len(), got: correct.len() });
    }
    if num_bins == 0 {
        return Err(Error::invalid("ECE needs at least one bin"));
    }
    if confidences.is_empty() {
        return Err(Error::invalid("ECE of an empty sample"));
    }
    if let Some(c) = confidences.iter().find(|c| !(0.0..=1.0).contains(*c)) {
        return Err(Error::invalid(format!("confidence {c} outside [0, 1]")));
    }

    let mut count = vec![0usize; num_bins];
    let mut conf_sum = vec![0.0; num_bins];
    let mut hits = vec![0usize; num_bins];
    for (&c, &ok) in confidences.iter().zip(correct) {
        let b = ((c * num_bins as f64) as usize).min(num_bins - 1);
        count[b] += 1;
        conf_sum[b] += c;
        hits[b] += usize::from(ok);
    }
    let n = confidences.len() as f64;
    let total = (0..num_bins)
        .filter(|&b| count[b] > 0)
        .map(|b| {
            let m = count[b] as f64;
            (m / n) * (hits[b] as f64 / m - conf_sum[b] / m).abs()
        })
        .sum::<f64>();
    Ok(total.clamp(0.0, 1.0))
}

pub fn accuracy<T: PartialEq>(predictions: &[T], truth: &[T]) -> Result<f64> {
    if predictions.len() != truth.len() {
        return Err(Error::DimensionMismatch { expected: truth.len(), got: predictions.len() });
    }
    if truth.is_empty() {
        return Err(Error::invalid("accuracy of an empty sample"));
    }
    let hits = predictions.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / truth.len() as f64)
}

/// Row-wise softmax with a max shift.
pub fn softmax_rows(logits: ArrayView2<f64>) -> Result<ndarray::Array2<f64>> {
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("logits"));
    }
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let z = row.sum();
        row.mapv_inplace(|v| v / z);
    }
    Ok(out)
}

/// Shannon entropy (nats) of each row's softmax distribution.
pub fn softmax_entropy(logits: ArrayView2<f64>) -> Result<Vec<f64>> {
    if logits.ncols() < 2 {
        return Err(Error::invalid("softmax entropy needs at least two classes"));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("logits"));
    }
    Ok(logits
        .rows()
        .into_iter()
        .map(|row| {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let shifted: Vec<f64> = row.iter().map(|v| v - max).collect();
            let z: f64 = shifted.iter().map(|s| s.exp()).sum();
            let log_z = z.ln();
            // H = log Z - sum p_i s_i
            let mean_shifted: f64 = shifted.iter().map(|s| (s.exp() / z) * s).sum();
            (log_z - mean_shifted).max(0.0)
        })
        .collect())
}

/// Predicted class and its softmax probability for each row.
pub fn predictions_and_confidences(logits: ArrayView2<f64>) -> Result<(Vec<usize>, Vec<f64>)> {
    let probs = softmax_rows(logits)?;
    Ok(probs
        .rows()
        .into_iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (k, &p)| if p > best.1 { (k, p) } else { best })
        })
        .unzip())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// Classifier metrics need logits, which plain feature files do not carry.
    pub accuracy: Option<f64>,
    pub ece: Option<f64>,
    pub auroc: f64,
    pub n_id: usize,
    pub n_ood: usize,
    pub bandwidth_used: f64,
}

impl EvalReport {
    /// One `metric=value` line per available metric.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        if let Some(a) = self.accuracy {
            writeln!(s, "accuracy={a}").unwrap();
        }
        if let Some(e) = self.ece {
            writeln!(s, "ece={e}").unwrap();
        }
        writeln!(s, "auroc={}", self.auroc).unwrap();
        writeln!(s, "n_id={}", self.n_id).unwrap();
        writeln!(s, "n_ood={}", self.n_ood).unwrap();
        writeln!(s, "bandwidth_used={}", self.bandwidth_used).unwrap();
        s
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut r = EvalReport { accuracy: None, ece: None, auroc: f64::NAN, n_id: 0, n_ood: 0, bandwidth_used: f64::NAN };
        let bad = |line: &str| Error::invalid(format!("malformed report line {line:?}"));
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line.split_once('=').ok_or_else(|| bad(line))?;
            let f = || v.parse::<f64>().map_err(|_| bad(line));
            let u = || v.parse::<usize>().map_err(|_| bad(line));
            match k {
                "accuracy" => r.accuracy = Some(f()?),
                "ece" => r.ece = Some(f()?),
                "auroc" => r.auroc = f()?,
                "n_id" => r.n_id = u()?,
                "n_ood" => r.n_ood = u()?,
                "bandwidth_used" => r.bandwidth_used = f()?,
                _ => return Err(bad(line)),
            }
        }
        if r.auroc.is_nan() || r.bandwidth_used.is_nan() {
            return Err(Error::invalid("report is missing auroc or bandwidth_used"));
        }
        Ok(r)
    }

    pub const CSV_HEADER: &'static str = "accuracy,ece,auroc,n_id,n_ood,bandwidth_used";

    pub fn to_csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{}",
            opt(self.accuracy),
            opt(self.ece),
            self.auroc,
            self.n_id,
            self.n_ood,
            self.bandwidth_used
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn pairwise(id: &[f64], ood: &[f64]) -> f64 {
        let mut wins = 0u64;
        let mut ties = 0u64;
        for a in id {
            for b in ood {
                if a > b {
                    wins += 1;
                } else if a == b {
                    ties += 1;
                }
            }
        }
        (wins as f64 + 0.5 * ties as f64) / (id.len() as f64 * ood.len() as f64)
    }

    #[test]
    fn auroc_basic() {
        assert_eq!(auroc(&[0.9, 0.8], &[0.2, 0.1]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.2, 0.1], &[0.9, 0.8]).unwrap(), 0.0);
        let s = [0.3, 0.1, 0.3, 0.7];
        assert_eq!(auroc(&s, &s).unwrap(), 0.5);
        assert_eq!(auroc(&[1.0, 0.0], &[0.5]).unwrap(), 0.5);
        assert!(auroc(&[], &[1.0]).is_err());
        assert!(auroc(&[f64::NAN], &[1.0]).is_err());
    }

    #[test]
    fn auroc_zero_scores_tie() {
        assert_eq!(auroc(&[0.0, 0.0, 1e-300], &[0.0]).unwrap(), pairwise(&[0.0, 0.0, 1e-300], &[0.0]));
    }

    #[test]
    fn ece_trivial() {
        assert_eq!(ece(&[1.0; 4], &[true; 4], 15).unwrap(), 0.0);
        assert_eq!(ece(&[1.0; 4], &[false; 4], 15).unwrap(), 1.0);
    }

    #[test]
    fn ece_hand_computed() {
        // 4 bins of width 0.25:
        //   0.2 -> bin 0 (wrong): |0 - 0.2| * 1/4 = 0.05
        //   0.6, 0.7 -> bin 2 (right, wrong): |0.5 - 0.65| * 2/4 = 0.075
        //   0.9 -> bin 3 (right): |1 - 0.9| * 1/4 = 0.025
        let got = ece(&[0.2, 0.6, 0.7, 0.9], &[false, true, false, true], 4).unwrap();
        assert!((got - 0.15).abs() < 1e-12);
    }

    #[test]
    fn ece_errors() {
        assert!(ece(&[0.5], &[true, false], 10).is_err());
        assert!(ece(&[1.5], &[true], 10).is_err());
        assert!(ece(&[-0.1], &[true], 10).is_err());
        assert!(ece(&[0.5], &[true], 0).is_err());
    }

    #[test]
    fn accuracy_cases() {
        assert_eq!(accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(accuracy(&[1, 2], &[3, 4]).unwrap(), 0.0);
        assert_eq!(accuracy(&[0, 1, 1, 0], &[0, 1, 1, 1]).unwrap(), 0.75);
        assert!(accuracy(&[1], &[1, 2]).is_err());
        assert!(accuracy::<i32>(&[], &[]).is_err());
    }

    #[test]
    fn entropy_cases() {
        let h = softmax_entropy(array![[0.5, 0.5, 0.5, 0.5]].view()).unwrap();
        assert!((h[0] - 4f64.ln()).abs() < 1e-15);
        let h = softmax_entropy(array![[1000.0, 0.0, 0.0]].view()).unwrap();
        assert!(h[0] < 1e-300);
        assert!(softmax_entropy(array![[1.0]].view()).is_err());
        assert!(softmax_entropy(array![[1.0, f64::NAN]].view()).is_err());
    }

    #[test]
    fn report_round_trip() {
        let r = EvalReport { accuracy: Some(0.93), ece: Some(0.028), auroc: 0.9318, n_id: 10, n_ood: 20, bandwidth_used: 0.35 };
        assert_eq!(EvalReport::from_kv(&r.to_kv()).unwrap(), r);
        let r = EvalReport { accuracy: None, ece: None, ..r };
        assert_eq!(EvalReport::from_kv(&r.to_kv()).unwrap(), r);
        assert!(r.to_kv().lines().all(|l| l.contains('=')));
        assert_eq!(r.to_csv_row(), ",,0.9318,10,20,0.35");
    }
}
