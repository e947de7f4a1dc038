//! Memory accounting for stored projections and selection-vs-SVD
//! measurements.

use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::projector::{
    randperm_selection, random_semi_orthogonal, reconstruction_error, select, svd_projector, thin_svd,
    DenseProjector, NormMode, Side,
};
use crate::rng::{derive_seed, gaussian_matrix, seeded};
use crate::transform::OrthoBasis;

const MIB: f64 = 1024.0 * 1024.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MemoryMethod {
    Svd,
    Dct,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryReport {
    pub method: MemoryMethod,
    pub layers: u64,
    pub order: u64,
    pub rank: u64,
    pub elem_bytes: u64,
    pub index_bytes: u64,
    pub total_elements: u64,
    pub total_bytes: u64,
    pub mib: f64,
    /// MiB rounded half-up to two decimals, e.g. `"32.22 MiB"`.
    pub human: String,
}

/// Rounds half-up to two decimals.
pub fn round2(x: f64) -> f64 {
    (x * 100.0 + 0.5).floor() / 100.0
}

/// Storage for the projection matrices of `layers` layers of order `n`.
///
/// SVD keeps one `n x r` matrix per layer (`L n r` elements); DCT keeps one
/// shared `n x n` basis plus `r` indices per layer (`n^2 + L r`).
pub fn memory_model(
    method: MemoryMethod,
    layers: u64,
    n: u64,
    r: u64,
    elem_bytes: u64,
    index_bytes: u64,
) -> MemoryReport {
    let (total_elements, total_bytes) = match method {
        MemoryMethod::Svd => {
            let e = layers * n * r;
            (e, e * elem_bytes)
        }
        MemoryMethod::Dct => (n * n + layers * r, n * n * elem_bytes + layers * r * index_bytes),
    };
    let mib = total_bytes as f64 / MIB;
    MemoryReport {
        method,
        layers,
        order: n,
        rank: r,
        elem_bytes,
        index_bytes,
        total_elements,
        total_bytes,
        mib,
        human: format!("{:.2} MiB", round2(mib)),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimingStats {
    pub mean_us: f64,
    pub median_us: f64,
    pub p90_us: f64,
}

impl TimingStats {
    fn from_samples(mut us: Vec<f64>) -> Self {
        us.sort_by(f64::total_cmp);
        let n = us.len();
        let median = if n % 2 == 1 { us[n / 2] } else { 0.5 * (us[n / 2 - 1] + us[n / 2]) };
        let p90 = us[((n as f64 * 0.9).ceil() as usize).clamp(1, n) - 1];
        Self { mean_us: us.iter().sum::<f64>() / n as f64, median_us: median, p90_us: p90 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub n: usize,
    pub rank: usize,
    pub trials: usize,
    pub dct_select: TimingStats,
    pub svd_full: TimingStats,
    /// `svd mean / dct mean`.
    pub ratio: f64,
    pub median_ratio: f64,
}

pub const MIN_TIMING_TRIALS: usize = 5;
const WARMUPS: usize = 2;

/// Times `select` (matmul, per-column norms, partial sort) against a full
/// SVD on the same random `n x n` matrices. Single-threaded; two warm-up
/// rounds are discarded.
pub fn bench_selection_vs_svd(n: usize, trials: usize, seed: u64) -> Result<TimingReport> {
    if n < 64 {
        return Err(invalid(format!("timing needs n >= 64, got {n}")));
    }
    if trials < MIN_TIMING_TRIALS {
        return Err(invalid(format!("timing needs at least {MIN_TIMING_TRIALS} trials, got {trials}")));
    }
    let basis = OrthoBasis::dct3(n)?;
    let rank = n / 4;
    let mut rng = seeded(seed);
    let mut dct = Vec::with_capacity(trials);
    let mut svd = Vec::with_capacity(trials);
    for k in 0..WARMUPS + trials {
        let g = gaussian_matrix(&mut rng, n, n);
        let t0 = Instant::now();
        let (sel, _) = select(&g, &basis, rank, NormMode::L1)?;
        let t_dct = t0.elapsed();
        let t0 = Instant::now();
        let parts = thin_svd(&g)?;
        let t_svd = t0.elapsed();
        std::hint::black_box((sel, parts));
        if k >= WARMUPS {
            dct.push(t_dct.as_secs_f64() * 1e6);
            svd.push(t_svd.as_secs_f64() * 1e6);
        }
    }
    let dct_select = TimingStats::from_samples(dct);
    let svd_full = TimingStats::from_samples(svd);
    Ok(TimingReport {
        n,
        rank,
        trials,
        ratio: svd_full.mean_us / dct_select.mean_us,
        median_ratio: svd_full.median_us / dct_select.median_us,
        dct_select,
        svd_full,
    })
}

/// A rank expressed either absolutely or relative to the order `n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RankRule {
    Absolute(usize),
    /// `n / d`
    Fraction(usize),
}

impl RankRule {
    pub fn resolve(self, n: usize) -> Option<usize> {
        let r = match self {
            RankRule::Absolute(r) => r,
            RankRule::Fraction(d) => n / d,
        };
        (1..=n).contains(&r).then_some(r)
    }
}

impl FromStr for RankRule {
    type Err = Error;

    /// Accepts `"4"`, `"n"`, or `"n/4"`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || invalid(format!("bad rank rule '{s}' (use 4, n or n/4)"));
        if s == "n" {
            return Ok(RankRule::Fraction(1));
        }
        if let Some(d) = s.strip_prefix("n/") {
            let d: usize = d.parse().map_err(|_| bad())?;
            return if d == 0 { Err(bad()) } else { Ok(RankRule::Fraction(d)) };
        }
        let r: usize = s.parse().map_err(|_| bad())?;
        if r == 0 {
            return Err(bad());
        }
        Ok(RankRule::Absolute(r))
    }
}

/// One CSV row of a projection sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub n: usize,
    pub r: usize,
    pub trial: usize,
    pub projector: String,
    pub norm_mode: String,
    /// Reconstruction error over `||G||_F^2`.
    pub ratio: f64,
    pub elapsed_us: f64,
}

fn sweep_cell(n: usize, r: usize, trial: usize, seed: u64, basis: &OrthoBasis) -> Result<Vec<SweepRow>> {
    let tag = [n as u64, r as u64, trial as u64];
    let g = gaussian_matrix(&mut seeded(derive_seed(seed, &tag)), n, n);
    let energy = g.norm_squared();
    let row = |projector: &str, norm_mode: &str, err: f64, t0: Instant| SweepRow {
        n,
        r,
        trial,
        projector: projector.to_string(),
        norm_mode: norm_mode.to_string(),
        ratio: err / energy,
        elapsed_us: t0.elapsed().as_secs_f64() * 1e6,
    };
    let dense_err = |p: &DenseProjector, g: &DMatrix<f64>| -> Result<f64> { Ok((g - p.up(&p.down(g)?)?).norm_squared()) };

    let mut rows = Vec::with_capacity(5);
    for mode in [NormMode::L1, NormMode::L2] {
        let t0 = Instant::now();
        let (sel, _) = select(&g, basis, r, mode)?;
        let err = reconstruction_error(&g, basis, &sel)?;
        rows.push(row("dct", mode.as_str(), err, t0));
    }
    let t0 = Instant::now();
    let err = dense_err(&svd_projector(&g, r)?, &g)?;
    rows.push(row("svd", "none", err, t0));

    let t0 = Instant::now();
    let p = DenseProjector { matrix: random_semi_orthogonal(n, r, derive_seed(seed ^ 0x5a5a, &tag))?, side: Side::Right };
    let err = dense_err(&p, &g)?;
    rows.push(row("random", "none", err, t0));

    let t0 = Instant::now();
    let ident = OrthoBasis::identity(n)?;
    let sel = randperm_selection(n, r, derive_seed(seed ^ 0xa5a5, &tag))?;
    let err = reconstruction_error(&g, &ident, &sel)?;
    rows.push(row("randperm", "none", err, t0));
    Ok(rows)
}

/// Reconstruction-error ratios of every projector over random square
/// gradients, one row per `(n, r, trial, projector)`. Ranks that resolve
/// outside `1..=n` are skipped.
pub fn contractivity_sweep(
    dims: &[usize],
    ranks: &[RankRule],
    trials: usize,
    seed: u64,
    parallel: bool,
) -> Result<Vec<SweepRow>> {
    let mut cells = Vec::new();
    let mut bases = Vec::new();
    for &n in dims {
        if n == 0 {
            return Err(invalid("sweep dimensions must be positive"));
        }
        bases.push(OrthoBasis::dct3(n)?);
        let mut rs: Vec<usize> = ranks.iter().filter_map(|rule| rule.resolve(n)).collect();
        rs.dedup();
        for r in rs {
            for trial in 0..trials {
                cells.push((bases.len() - 1, n, r, trial));
            }
        }
    }
    let run = |&(b, n, r, trial): &(usize, usize, usize, usize)| sweep_cell(n, r, trial, seed, &bases[b]);
    let nested: Vec<Vec<SweepRow>> = if parallel {
        cells.par_iter().map(run).collect::<Result<_>>()?
    } else {
        cells.iter().map(run).collect::<Result<_>>()?
    };
    Ok(nested.into_iter().flatten().collect())
}

/// Writes rows under the header `n,r,trial,projector,norm_mode,ratio,elapsed_us`.
pub fn write_sweep_csv<W: Write>(out: W, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}
