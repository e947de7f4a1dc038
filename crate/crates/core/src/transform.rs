//! Orthogonal bases shared by every projected layer.
//!
//! The DCT-3 matrix of order `n` has entries
//! `Q[i][j] = sqrt(2/n) * cos(i * (2j + 1) * pi / (2n))` with row 0 further
//! divided by `sqrt(2)`, which makes `Q^T Q = I`. Its transpose is the DCT-2
//! matrix; only `Q` is ever stored.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::{Arc, RwLock};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BasisKind {
    Dct3,
    Identity,
}

/// An immutable `n x n` orthogonal matrix whose columns form the projection
/// dictionary.
#[derive(Debug, Clone)]
pub struct OrthoBasis {
    kind: BasisKind,
    entries: DMatrix<f64>,
}

impl OrthoBasis {
    /// Builds the orthonormal DCT-3 matrix of order `n`.
    pub fn dct3(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(invalid("basis order must be at least 1"));
        }
        let scale = (2.0 / n as f64).sqrt();
        let row0 = scale / 2f64.sqrt();
        // i * (2j + 1) is reduced modulo 4n, the period of cos(k * pi / 2n),
        // so the angle stays small and exact for large orders.
        let period = 4 * n as u64;
        let denom = 2.0 * n as f64;
        let entries = DMatrix::from_fn(n, n, |i, j| {
            let k = (i as u64 * (2 * j as u64 + 1)) % period;
            let c = (k as f64 * PI / denom).cos();
            if i == 0 {
                row0 * c
            } else {
                scale * c
            }
        });
        Ok(Self { kind: BasisKind::Dct3, entries })
    }

    pub fn identity(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(invalid("basis order must be at least 1"));
        }
        Ok(Self { kind: BasisKind::Identity, entries: DMatrix::identity(n, n) })
    }

    pub fn build(kind: BasisKind, n: usize) -> Result<Self> {
        match kind {
            BasisKind::Dct3 => Self::dct3(n),
            BasisKind::Identity => Self::identity(n),
        }
    }

    pub fn order(&self) -> usize {
        self.entries.nrows()
    }

    pub fn kind(&self) -> BasisKind {
        self.kind
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.entries
    }

    /// Gathers the named columns into an `n x indices.len()` matrix.
    pub fn columns(&self, indices: &[usize]) -> DMatrix<f64> {
        let n = self.order();
        DMatrix::from_fn(n, indices.len(), |i, b| self.entries[(i, indices[b])])
    }

    /// `max |Q^T Q - I|` over all entries.
    pub fn orthogonality_residual(&self) -> f64 {
        let gram = self.entries.tr_mul(&self.entries);
        let n = self.order();
        let mut worst = 0.0f64;
        for j in 0..n {
            for i in 0..n {
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((gram[(i, j)] - target).abs());
            }
        }
        worst
    }
}

/// Caches one basis per `(kind, order)` so every layer of a model shares the
/// same matrix.
#[derive(Debug, Default)]
pub struct BasisRegistry {
    bases: RwLock<HashMap<(BasisKind, usize), Arc<OrthoBasis>>>,
}

impl BasisRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, kind: BasisKind, n: usize) -> Result<Arc<OrthoBasis>> {
        if let Some(b) = self.bases.read().expect("basis registry poisoned").get(&(kind, n)) {
            return Ok(Arc::clone(b));
        }
        let built = Arc::new(OrthoBasis::build(kind, n)?);
        let mut map = self.bases.write().expect("basis registry poisoned");
        Ok(Arc::clone(map.entry((kind, n)).or_insert(built)))
    }

    pub fn len(&self) -> usize {
        self.bases.read().expect("basis registry poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_one_is_unit() {
        let q = OrthoBasis::dct3(1).unwrap();
        assert_eq!(q.matrix()[(0, 0)], 1.0);
    }

    #[test]
    fn order_two_matches_hand_values() {
        let q = OrthoBasis::dct3(2).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let expect = [[h, h], [h, -h]];
        for i in 0..2 {
            for j in 0..2 {
                assert!((q.matrix()[(i, j)] - expect[i][j]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn entries_follow_closed_form() {
        let n = 37;
        let q = OrthoBasis::dct3(n).unwrap();
        for i in 0..n {
            for j in 0..n {
                let mut e = (2.0 / n as f64).sqrt()
                    * ((i * (2 * j + 1)) as f64 * PI / (2.0 * n as f64)).cos();
                if i == 0 {
                    e /= 2f64.sqrt();
                }
                assert!((q.matrix()[(i, j)] - e).abs() < 1e-13, "({i},{j})");
            }
        }
    }

    #[test]
    fn orthogonal_for_several_orders() {
        for n in [1, 2, 3, 16, 64, 128] {
            let q = OrthoBasis::dct3(n).unwrap();
            assert!(q.orthogonality_residual() <= 1e-10 * n as f64, "n={n}");
            for c in q.matrix().column_iter() {
                assert!((c.norm() - 1.0).abs() < 1e-12);
            }
        }
        assert!(OrthoBasis::dct3(64).unwrap().orthogonality_residual() <= 1e-12);
    }

    #[test]
    fn zero_order_rejected() {
        assert!(OrthoBasis::dct3(0).is_err());
        assert!(OrthoBasis::identity(0).is_err());
    }

    #[test]
    fn identity_is_exact() {
        let q = OrthoBasis::identity(5).unwrap();
        assert_eq!(q.orthogonality_residual(), 0.0);
        assert_eq!(q.matrix(), &DMatrix::<f64>::identity(5, 5));
        assert_eq!(OrthoBasis::identity(1).unwrap().matrix()[(0, 0)], 1.0);
        assert_eq!(q.kind(), BasisKind::Identity);
    }

    #[test]
    fn registry_shares_instances() {
        let reg = BasisRegistry::new();
        let a = reg.get(BasisKind::Dct3, 8).unwrap();
        let b = reg.get(BasisKind::Dct3, 8).unwrap();
        assert!(Arc::ptr_eq(&a, &b));
        reg.get(BasisKind::Identity, 8).unwrap();
        assert_eq!(reg.len(), 2);
    }
}
