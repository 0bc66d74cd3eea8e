//! Finite-difference and fixture helpers for gradient checks.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

pub fn seeded_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Central differences of a scalar function, one coordinate at a time.
pub fn central_difference(x: &Tensor, h: f64, f: impl Fn(&Tensor) -> f64) -> Vec<f64> {
    let mut probe = x.clone();
    (0..x.len())
        .map(|i| {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + h;
            let up = f(&probe);
            probe.data_mut()[i] = orig - h;
            let down = f(&probe);
            probe.data_mut()[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Central differences plus a flag per coordinate marking a detected kink:
/// the one-sided slopes disagree by more than `kink_tol · max(1, |slope|)`,
/// which smooth curvature at step `h` cannot explain.
pub fn central_difference_kinks(x: &Tensor, h: f64, kink_tol: f64, f: impl Fn(&Tensor) -> f64) -> (Vec<f64>, Vec<bool>) {
    let f0 = f(x);
    let mut probe = x.clone();
    let mut slopes = Vec::with_capacity(x.len());
    let mut kinks = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        let slope = (up - down) / (2.0 * h);
        let (fwd, bwd) = ((up - f0) / h, (f0 - down) / h);
        slopes.push(slope);
        kinks.push(libm::fabs(fwd - bwd) > kink_tol * libm::fabs(slope).max(1.0));
    }
    (slopes, kinks)
}

/// `‖a − b‖ / max(‖a‖, ‖b‖, 1e-12)`.
pub fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    let na: f64 = a.iter().map(|x| x * x).sum();
    let nb: f64 = b.iter().map(|x| x * x).sum();
    libm::sqrt(diff) / libm::sqrt(na.max(nb)).max(1e-12)
}

/// Mean of row `tau` over tasks `0..=tau`, summed in plain order.
pub fn reference_average_accuracy(rows: &[Vec<f64>], tau: usize) -> f64 {
    rows[tau][..=tau].iter().sum::<f64>() / (tau + 1) as f64
}

/// Forgetting by direct enumeration: for each task `i < T−1`, the best
/// accuracy over every row (the final one included) minus the final one.
pub fn reference_forgetting(rows: &[Vec<f64>]) -> f64 {
    let t = rows.len();
    let last = t - 1;
    let mut total = 0.0;
    for i in 0..last {
        let mut best = f64::NEG_INFINITY;
        for row in &rows[i..] {
            best = best.max(row[i]);
        }
        total += best - rows[last][i];
    }
    total / last as f64
}

/// Scores every bank row, sorts all of them, and votes over the top `k`.
pub fn exhaustive_knn(bank: &Tensor, labels: &[u32], queries: &Tensor, k: usize, temperature: f64) -> Vec<u32> {
    let unit = |t: &Tensor, i: usize| {
        let r = t.row(i);
        let n = libm::sqrt(r.iter().map(|v| v * v).sum::<f64>()).max(1e-12);
        r.iter().map(|v| v / n).collect::<Vec<f64>>()
    };
    let n = labels.len();
    let k = k.clamp(1, n);
    let classes = labels.iter().max().map_or(0, |&m| m as usize + 1);
    let rows: Vec<Vec<f64>> = (0..n).map(|j| unit(bank, j)).collect();
    (0..queries.shape()[0])
        .map(|qi| {
            let q = unit(queries, qi);
            let mut scored: Vec<(f64, usize)> =
                rows.iter().enumerate().map(|(j, r)| (r.iter().zip(&q).map(|(a, b)| a * b).sum(), j)).collect();
            scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            let mut votes = alloc::vec![0.0; classes];
            for &(s, j) in &scored[..k] {
                votes[labels[j] as usize] += libm::exp(s / temperature);
            }
            let mut best = 0;
            for c in 1..classes {
                if votes[c] > votes[best] {
                    best = c;
                }
            }
            best as u32
        })
        .collect()
}
