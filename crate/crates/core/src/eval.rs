//! KNN probe on frozen features and the continual-learning metrics.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::data::{ImageSet, Normalization};
use crate::error::{shape_err, Error, Result};
use crate::models::{EncoderBundle, FeatureSource};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KnnConfig {
    pub k: usize,
    pub temperature: f64,
    pub source: FeatureSource,
    /// Images per feature-extraction forward pass.
    pub batch_size: usize,
}

impl Default for KnnConfig {
    fn default() -> Self {
        Self { k: 200, temperature: 0.1, source: FeatureSource::Backbone, batch_size: 256 }
    }
}

/// Unit-normalized reference features with their labels.
#[derive(Clone, Debug, PartialEq)]
pub struct KnnBank {
    features: Tensor,
    labels: Vec<u32>,
    k: usize,
    temperature: f64,
}

fn normalized_rows(features: &Tensor) -> Tensor {
    let d = features.row_len().max(1);
    let mut out = features.clone();
    for row in out.data_mut().chunks_mut(d) {
        let n = libm::sqrt(row.iter().map(|v| v * v).sum::<f64>()).max(1e-12);
        row.iter_mut().for_each(|v| *v /= n);
    }
    out
}

impl KnnBank {
    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Neighbor count after clamping to the bank size.
    pub fn effective_k(&self) -> usize {
        self.k.clamp(1, self.len())
    }
}

pub fn fit_knn_bank(features: &Tensor, labels: &[u32], k: usize, temperature: f64) -> Result<KnnBank> {
    if features.ndim() != 2 || features.shape()[0] != labels.len() {
        return Err(shape_err!("{} labels for features {:?}", labels.len(), features.shape()));
    }
    if labels.is_empty() {
        return Err(Error::Empty("knn bank"));
    }
    if !(temperature > 0.0) {
        return Err(Error::Config("knn temperature must be positive".into()));
    }
    if features.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::Degenerate("non-finite features".into()));
    }
    Ok(KnnBank { features: normalized_rows(features), labels: labels.to_vec(), k, temperature })
}

/// Cosine top-k vote weighted by `exp(sim / T)`, summed nearest first.
/// Neighbor ties go to the lower bank index, class ties to the lower class id.
pub fn knn_predict(bank: &KnnBank, queries: &Tensor) -> Result<Vec<u32>> {
    let d = bank.features.row_len();
    if queries.ndim() != 2 || queries.shape()[1] != d {
        return Err(shape_err!("queries {:?} against a {}-dim bank", queries.shape(), d));
    }
    let q = normalized_rows(queries);
    let sims = q.matmul(&bank.features, false, true)?;
    let n = bank.len();
    let k = bank.effective_k();
    let classes = bank.labels.iter().max().map_or(0, |&m| m as usize + 1);
    let mut order: Vec<usize> = (0..n).collect();
    let mut out = Vec::with_capacity(q.shape()[0]);
    for row in sims.data().chunks(n.max(1)) {
        let cmp = |a: &usize, b: &usize| row[*b].total_cmp(&row[*a]).then(a.cmp(b));
        if k < n {
            order.select_nth_unstable_by(k - 1, cmp);
        }
        // Votes add up nearest first so exact class ties resolve the same
        // way whatever order selection left behind.
        order[..k].sort_unstable_by(cmp);
        let mut scores = vec![0.0; classes];
        for &j in &order[..k] {
            scores[bank.labels[j] as usize] += libm::exp(row[j] / bank.temperature);
        }
        let mut best = 0;
        for c in 1..classes {
            if scores[c] > scores[best] {
                best = c;
            }
        }
        out.push(best as u32);
    }
    Ok(out)
}

/// Inference-mode features for `ids`, extracted in chunks.
pub fn extract_features(
    bundle: &EncoderBundle,
    set: &ImageSet,
    ids: &[usize],
    norm: &Normalization,
    source: FeatureSource,
    batch_size: usize,
) -> Result<Tensor> {
    if ids.is_empty() {
        return Err(Error::Empty("feature extraction set"));
    }
    let mut data = Vec::new();
    let mut dim = 0;
    for chunk in ids.chunks(batch_size.max(1)) {
        let f = bundle.features(&norm.batch(set, chunk), source)?;
        dim = f.row_len();
        data.extend_from_slice(f.data());
    }
    Tensor::from_vec(&[ids.len(), dim], data)
}

/// Fraction of predictions equal to the labels.
pub fn accuracy(predicted: &[u32], labels: &[u32]) -> f64 {
    let hits = predicted.iter().zip(labels).filter(|(a, b)| a == b).count();
    hits as f64 / labels.len().max(1) as f64
}

/// KNN accuracy of a frozen encoder on one task: bank on the un-augmented
/// training examples, scored on the test examples.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_task(
    bundle: &EncoderBundle,
    train: &ImageSet,
    train_ids: &[usize],
    test: &ImageSet,
    test_ids: &[usize],
    norm: &Normalization,
    cfg: &KnnConfig,
) -> Result<f64> {
    let bank_features = extract_features(bundle, train, train_ids, norm, cfg.source, cfg.batch_size)?;
    let bank_labels: Vec<u32> = train_ids.iter().map(|&i| train.labels[i]).collect();
    let bank = fit_knn_bank(&bank_features, &bank_labels, cfg.k, cfg.temperature)?;
    let queries = extract_features(bundle, test, test_ids, norm, cfg.source, cfg.batch_size)?;
    let predicted = knn_predict(&bank, &queries)?;
    let truth: Vec<u32> = test_ids.iter().map(|&i| test.labels[i]).collect();
    Ok(accuracy(&predicted, &truth))
}

/// `a[τ][i]`: accuracy on task `i` after training through task `τ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    pub num_tasks: usize,
    pub entries: Vec<Vec<Option<f64>>>,
}

impl AccuracyMatrix {
    pub fn new(num_tasks: usize) -> Self {
        Self { num_tasks, entries: (0..num_tasks).map(|t| vec![None; t + 1]).collect() }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let mut m = Self::new(rows.len());
        for (t, row) in rows.iter().enumerate() {
            if row.len() != t + 1 {
                return Err(shape_err!("row {} has {} entries", t, row.len()));
            }
            for (i, &a) in row.iter().enumerate() {
                m.set(t, i, a)?;
            }
        }
        Ok(m)
    }

    pub fn set(&mut self, tau: usize, task: usize, acc: f64) -> Result<()> {
        if tau >= self.num_tasks || task > tau {
            return Err(Error::OutOfRange(format!("entry ({tau}, {task}) of a {}-task matrix", self.num_tasks)));
        }
        if !(0.0..=1.0).contains(&acc) {
            return Err(Error::OutOfRange(format!("accuracy {acc}")));
        }
        self.entries[tau][task] = Some(acc);
        Ok(())
    }

    pub fn get(&self, tau: usize, task: usize) -> Option<f64> {
        self.entries.get(tau).and_then(|r| r.get(task)).copied().flatten()
    }

    pub fn row_complete(&self, tau: usize) -> bool {
        self.entries.get(tau).is_some_and(|r| r.iter().all(Option::is_some))
    }

    pub fn is_complete(&self) -> bool {
        (0..self.num_tasks).all(|t| self.row_complete(t))
    }

    /// Checks shape and value invariants, e.g. after deserialization.
    pub fn validate(&self) -> Result<()> {
        if self.entries.len() != self.num_tasks {
            return Err(shape_err!("{} rows for {} tasks", self.entries.len(), self.num_tasks));
        }
        for (t, row) in self.entries.iter().enumerate() {
            if row.len() != t + 1 {
                return Err(shape_err!("row {} has {} entries", t, row.len()));
            }
            if row.iter().flatten().any(|a| !(0.0..=1.0).contains(a)) {
                return Err(Error::OutOfRange(format!("row {t} has an accuracy outside [0, 1]")));
            }
        }
        Ok(())
    }

    /// Rows are `τ`, columns task `i`; the upper triangle and missing
    /// entries are blank.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("tau");
        for i in 0..self.num_tasks {
            let _ = write!(s, ",task_{i}");
        }
        s.push('\n');
        for t in 0..self.num_tasks {
            let _ = write!(s, "{t}");
            for i in 0..self.num_tasks {
                s.push(',');
                if let Some(a) = self.get(t, i) {
                    let _ = write!(s, "{a}");
                }
            }
            s.push('\n');
        }
        s
    }
}

/// `A_τ`: mean of row `τ`.
pub fn average_accuracy(m: &AccuracyMatrix, tau: usize) -> Result<f64> {
    let row = m.entries.get(tau).ok_or_else(|| Error::OutOfRange(format!("row {tau}")))?;
    let mut sum = 0.0;
    for (i, a) in row.iter().enumerate() {
        sum += a.ok_or_else(|| Error::Missing(format!("a[{tau}][{i}]")))?;
    }
    Ok(sum / row.len() as f64)
}

/// `F`: mean over all but the last task of the drop from the best accuracy
/// ever reached to the final one.
pub fn average_forgetting(m: &AccuracyMatrix) -> Result<f64> {
    let t = m.num_tasks;
    if t < 2 {
        return Err(Error::Degenerate("forgetting needs at least two tasks".into()));
    }
    let mut total = 0.0;
    for i in 0..t - 1 {
        let mut best = f64::NEG_INFINITY;
        for tau in i..t {
            best = best.max(m.get(tau, i).ok_or_else(|| Error::Missing(format!("a[{tau}][{i}]")))?);
        }
        total += best - m.get(t - 1, i).expect("checked above");
    }
    Ok(total / (t - 1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], d: &[f64]) -> Tensor {
        Tensor::from_vec(shape, d.to_vec()).unwrap()
    }

    #[test]
    fn metric_fixtures() {
        let m = AccuracyMatrix::from_rows(&[vec![0.8], vec![0.7, 0.9], vec![0.6, 0.85, 0.95]]).unwrap();
        assert!((average_accuracy(&m, 2).unwrap() - 0.8).abs() < 1e-15);
        assert!((average_forgetting(&m).unwrap() - 0.125).abs() < 1e-15);
        assert_eq!(average_accuracy(&m, 0).unwrap(), 0.8);
        assert!(average_forgetting(&AccuracyMatrix::from_rows(&[vec![0.5]]).unwrap()).is_err());
        let mut partial = AccuracyMatrix::new(2);
        partial.set(1, 0, 0.5).unwrap();
        assert!(matches!(average_accuracy(&partial, 1), Err(Error::Missing(_))));
        assert!(partial.set(0, 1, 0.5).is_err());
    }

    #[test]
    fn csv_leaves_upper_triangle_blank() {
        let m = AccuracyMatrix::from_rows(&[vec![0.5], vec![0.25, 1.0]]).unwrap();
        assert_eq!(m.to_csv(), "tau,task_0,task_1\n0,0.5,\n1,0.25,1\n");
    }

    #[test]
    fn knn_fixtures() {
        let bank = fit_knn_bank(&t(&[1, 2], &[3.0, 4.0]), &[7], 200, 0.1).unwrap();
        assert_eq!(bank.effective_k(), 1);
        assert!((libm::sqrt(bank.features().data().iter().map(|v| v * v).sum::<f64>()) - 1.0).abs() < 1e-12);
        assert_eq!(knn_predict(&bank, &t(&[2, 2], &[-1.0, 0.0, 0.0, 1.0])).unwrap(), vec![7, 7]);

        let pts = t(&[4, 2], &[1.0, 0.0, 0.0, 1.0, 0.8, 0.6, -1.0, 0.0]);
        let bank = fit_knn_bank(&pts, &[0, 1, 1, 0], 1, 0.1).unwrap();
        assert_eq!(knn_predict(&bank, &t(&[1, 2], &[0.0, 2.0])).unwrap(), vec![1]);
        // Query (1, 0.1): neighbors 0, 2, 1 with similarities 0.995, 0.856, 0.0995.
        let bank = fit_knn_bank(&pts, &[0, 1, 1, 0], 3, 0.1).unwrap();
        assert_eq!(knn_predict(&bank, &t(&[1, 2], &[1.0, 0.1])).unwrap(), vec![0]);
        assert!(knn_predict(&bank, &t(&[1, 3], &[1.0, 0.0, 0.0])).is_err());
    }

    #[test]
    fn class_ties_go_to_lower_id() {
        let bank = fit_knn_bank(&t(&[2, 2], &[1.0, 0.0, 1.0, 0.0]), &[3, 1], 2, 0.1).unwrap();
        assert_eq!(knn_predict(&bank, &t(&[1, 2], &[1.0, 0.0])).unwrap(), vec![1]);
    }

    #[test]
    fn exact_ties_survive_summation_order() {
        // Both classes hold two aligned and one opposite neighbor, interleaved
        // differently by bank index.
        let bank = t(&[6, 1], &[1.0, -1.0, 1.0, 1.0, 1.0, -1.0]);
        let labels = [0, 0, 0, 1, 1, 1];
        let fitted = fit_knn_bank(&bank, &labels, 6, 0.1).unwrap();
        let q = t(&[1, 1], &[1.0]);
        assert_eq!(knn_predict(&fitted, &q).unwrap(), vec![0]);
        assert_eq!(knn_predict(&fitted, &q).unwrap(), crate::testing::exhaustive_knn(&bank, &labels, &q, 6, 0.1));
    }
}
