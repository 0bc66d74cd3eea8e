use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};

/// Synaptic-intelligence bookkeeping over the flat trainable parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct SiState {
    pub c: f64,
    pub xi: f64,
    pub omega: Vec<f64>,
    pub star: Vec<f64>,
    pub path: Vec<f64>,
}

impl SiState {
    pub fn new(c: f64, xi: f64, initial: &[f64]) -> Result<Self> {
        if !(xi > 0.0) || !(c >= 0.0) {
            return Err(Error::Config("SI needs c ≥ 0 and ξ > 0".into()));
        }
        let n = initial.len();
        Ok(Self { c, xi, omega: vec![0.0; n], star: initial.to_vec(), path: vec![0.0; n] })
    }

    fn check(&self, n: usize) -> Result<()> {
        if n != self.omega.len() {
            return Err(shape_err!("{} values for {} SI parameters", n, self.omega.len()));
        }
        Ok(())
    }

    /// `path += −g ⊙ Δθ`.
    pub fn accumulate(&mut self, grads: &[f64], delta: &[f64]) -> Result<()> {
        self.check(grads.len())?;
        self.check(delta.len())?;
        for ((p, g), d) in self.path.iter_mut().zip(grads).zip(delta) {
            *p -= g * d;
        }
        Ok(())
    }

    /// Folds the path integral into `Ω` and re-anchors at `current`.
    pub fn consolidate(&mut self, current: &[f64]) -> Result<()> {
        self.check(current.len())?;
        for (((o, s), p), &t) in self.omega.iter_mut().zip(&mut self.star).zip(&mut self.path).zip(current) {
            let d = t - *s;
            *o = (*o + *p / (d * d + self.xi)).max(0.0);
            *s = t;
            *p = 0.0;
        }
        Ok(())
    }

    /// `c · Σ Ω ⊙ (θ − θ*)²`.
    pub fn penalty(&self, current: &[f64]) -> Result<f64> {
        self.check(current.len())?;
        let s: f64 = current.iter().zip(&self.star).zip(&self.omega).map(|((t, s), o)| o * (t - s) * (t - s)).sum();
        Ok(self.c * s)
    }

    /// `2c · Ω ⊙ (θ − θ*)`.
    pub fn penalty_grad(&self, current: &[f64]) -> Result<Vec<f64>> {
        self.check(current.len())?;
        Ok(current.iter().zip(&self.star).zip(&self.omega).map(|((t, s), o)| 2.0 * self.c * o * (t - s)).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accumulate_hand_case() {
        let mut s = SiState::new(1.0, 1.0, &[0.0, 0.0]).unwrap();
        s.accumulate(&[0.0, 0.0], &[0.3, 0.3]).unwrap();
        assert_eq!(s.path, vec![0.0, 0.0]);
        s.accumulate(&[-1.0, -1.0], &[0.1, 0.1]).unwrap();
        assert!(s.path.iter().all(|&p| (p - 0.1).abs() < 1e-15));
        s.accumulate(&[-1.0, -1.0], &[0.1, 0.1]).unwrap();
        assert!(s.path.iter().all(|&p| (p - 0.2).abs() < 1e-15));
        assert!(s.accumulate(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn consolidate_hand_case() {
        let mut s = SiState::new(1.0, 1.0, &[0.0, 0.0, 0.0]).unwrap();
        s.path = vec![0.2, 0.0, -5.0];
        s.consolidate(&[1.0, 1.0, 1.0]).unwrap();
        assert!((s.omega[0] - 0.1).abs() < 1e-15);
        assert_eq!(s.omega[1], 0.0);
        assert_eq!(s.omega[2], 0.0);
        assert_eq!(s.star, vec![1.0; 3]);
        assert_eq!(s.path, vec![0.0; 3]);
        assert_eq!(s.penalty(&[1.0, 1.0, 1.0]).unwrap(), 0.0);
    }

    #[test]
    fn penalty_hand_case() {
        let mut s = SiState::new(0.1, 1.0, &[0.0]).unwrap();
        s.omega = vec![1.0];
        assert!((s.penalty(&[2.0]).unwrap() - 0.4).abs() < 1e-15);
        assert!((s.penalty_grad(&[2.0]).unwrap()[0] - 0.4).abs() < 1e-15);
        assert!(SiState::new(1.0, 0.0, &[]).is_err());
    }
}
