//! Reference implementations used as oracles. None of these call into the
//! code paths they check.

#![allow(dead_code)]

use dct_lowrank::DMatrix;

/// Singular values (descending) by one-sided Jacobi rotations.
pub fn jacobi_singular_values(g: &DMatrix<f64>) -> Vec<f64> {
    let a = if g.nrows() >= g.ncols() { g.clone() } else { g.transpose() };
    let (m, n) = a.shape();
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| (0..m).map(|i| a[(i, j)]).collect()).collect();
    for _sweep in 0..100 {
        let mut off = 0.0f64;
        for p in 0..n {
            for q in p + 1..n {
                let alpha: f64 = cols[p].iter().map(|x| x * x).sum();
                let beta: f64 = cols[q].iter().map(|x| x * x).sum();
                let gamma: f64 = cols[p].iter().zip(&cols[q]).map(|(x, y)| x * y).sum();
                if gamma == 0.0 {
                    continue;
                }
                off = off.max(gamma.abs() / (alpha * beta).sqrt());
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..m {
                    let (x, y) = (cols[p][i], cols[q][i]);
                    cols[p][i] = c * x - s * y;
                    cols[q][i] = s * x + c * y;
                }
            }
        }
        if off < 1e-15 {
            break;
        }
    }
    let mut sv: Vec<f64> = cols.iter().map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv
}

/// Element-wise AdamW over a flat parameter vector.
pub struct ScalarAdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl ScalarAdamW {
    pub fn new(len: usize, lr: f64, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        Self { lr, beta1, beta2, eps, weight_decay, m: vec![0.0; len], v: vec![0.0; len], t: 0 }
    }

    pub fn step(&mut self, theta: &mut [f64], grad: &[f64]) {
        self.t += 1;
        for k in 0..theta.len() {
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * grad[k];
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * grad[k] * grad[k];
            let mhat = self.m[k] / (1.0 - self.beta1.powi(self.t));
            let vhat = self.v[k] / (1.0 - self.beta2.powi(self.t));
            theta[k] = theta[k] - self.lr * mhat / (self.eps + vhat.sqrt()) - self.lr * self.weight_decay * theta[k];
        }
    }
}

/// All `r`-subsets of `0..n` in lexicographic order.
pub fn subsets(n: usize, r: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, n: usize, r: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == r {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            rec(i + 1, n, r, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(0, n, r, &mut Vec::new(), &mut out);
    out
}

/// `||G - G Q_S Q_S^T||_F^2` by explicit loops (right projection).
pub fn right_residual(g: &DMatrix<f64>, q: &DMatrix<f64>, cols: &[usize]) -> f64 {
    let (rows, m) = g.shape();
    let mut total = 0.0;
    for i in 0..rows {
        let coeffs: Vec<f64> = cols.iter().map(|&c| (0..m).map(|k| g[(i, k)] * q[(k, c)]).sum()).collect();
        for j in 0..m {
            let back: f64 = cols.iter().zip(&coeffs).map(|(&c, a)| a * q[(j, c)]).sum();
            let d = g[(i, j)] - back;
            total += d * d;
        }
    }
    total
}

/// `||q_c^T G||_2^2` for a column `c` of `q` (left projection).
pub fn left_alignment(g: &DMatrix<f64>, q: &DMatrix<f64>, c: usize) -> f64 {
    (0..g.ncols())
        .map(|j| {
            let s: f64 = (0..g.nrows()).map(|i| q[(i, c)] * g[(i, j)]).sum();
            s * s
        })
        .sum()
}

/// `||G q_c||_2^2` (right projection).
pub fn right_alignment(g: &DMatrix<f64>, q: &DMatrix<f64>, c: usize) -> f64 {
    (0..g.nrows())
        .map(|i| {
            let s: f64 = (0..g.ncols()).map(|k| g[(i, k)] * q[(k, c)]).sum();
            s * s
        })
        .sum()
}

pub enum Act {
    Tanh,
    Linear,
}

/// Two-layer network loss by explicit loops: MSE (sum over outputs, mean
/// over batch) or softmax cross-entropy.
pub fn loop_loss(w1: &DMatrix<f64>, w2: &DMatrix<f64>, x: &DMatrix<f64>, y: &DMatrix<f64>, act: &Act, ce: bool) -> f64 {
    let (b, d_in) = x.shape();
    let (d_h, d_out) = (w1.ncols(), w2.ncols());
    let mut total = 0.0;
    for s in 0..b {
        let h: Vec<f64> = (0..d_h)
            .map(|j| {
                let z: f64 = (0..d_in).map(|k| x[(s, k)] * w1[(k, j)]).sum();
                match act {
                    Act::Tanh => z.tanh(),
                    Act::Linear => z,
                }
            })
            .collect();
        let out: Vec<f64> = (0..d_out).map(|o| (0..d_h).map(|j| h[j] * w2[(j, o)]).sum()).collect();
        if ce {
            let mx = out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + out.iter().map(|z| (z - mx).exp()).sum::<f64>().ln();
            total -= (0..d_out).map(|o| y[(s, o)] * (out[o] - lse)).sum::<f64>();
        } else {
            total += (0..d_out).map(|o| (out[o] - y[(s, o)]).powi(2)).sum::<f64>();
        }
    }
    total / b as f64
}

/// Central differences of `f` with respect to every entry of `w`.
pub fn central_diff(w: &DMatrix<f64>, h: f64, mut f: impl FnMut(&DMatrix<f64>) -> f64) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(w.nrows(), w.ncols());
    let mut probe = w.clone();
    for k in 0..w.len() {
        let orig = probe[k];
        probe[k] = orig + h;
        let up = f(&probe);
        probe[k] = orig - h;
        let down = f(&probe);
        probe[k] = orig;
        out[k] = (up - down) / (2.0 * h);
    }
    out
}

/// Max-abs difference relative to the max-abs reference entry.
pub fn rel_err(got: &DMatrix<f64>, want: &DMatrix<f64>) -> f64 {
    (got - want).amax() / want.amax().max(1e-300)
}
