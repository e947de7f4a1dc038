//! Dynamic column selection against a shared orthogonal basis, together with
//! the dense baselines (SVD, random semi-orthogonal, random permutation).
//!
//! For a gradient `G` of shape `n x m`:
//! - `n >= m` is a right projection: `S = G Q`, columns of `S` are ranked and
//!   the low-rank gradient is `G Q_r` (`n x r`).
//! - `n < m` is a left projection: `S = Q^T G`, rows of `S` are ranked and
//!   the low-rank gradient is `Q_r^T G` (`r x m`).

use std::cmp::Ordering;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, invalid, Error, Result};
use crate::rng::{gaussian_matrix, seeded};
use crate::transform::OrthoBasis;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Right,
    Left,
}

impl Side {
    /// GaLore's rule: reduce the smaller dimension.
    pub fn for_shape(rows: usize, cols: usize) -> Self {
        if rows >= cols {
            Side::Right
        } else {
            Side::Left
        }
    }

    /// Order of the basis this side needs for a `rows x cols` matrix.
    pub fn basis_order(self, rows: usize, cols: usize) -> usize {
        match self {
            Side::Right => cols,
            Side::Left => rows,
        }
    }
}

/// Picks the projection side for a `rows x cols` gradient given the order of
/// the one basis that is available.
///
/// The GaLore side is used when its dimension matches the basis. Otherwise, a
/// non-square layer whose larger dimension matches the basis is projected on
/// that side instead (e.g. a `1024 x 4096` layer against a `4096` basis is
/// right-projected to `1024 x r`).
pub fn resolve_side(rows: usize, cols: usize, order: usize) -> Result<Side> {
    let natural = Side::for_shape(rows, cols);
    if natural.basis_order(rows, cols) == order {
        return Ok(natural);
    }
    let other = match natural {
        Side::Right => Side::Left,
        Side::Left => Side::Right,
    };
    if other.basis_order(rows, cols) == order {
        return Ok(other);
    }
    Err(invalid(format!(
        "no projection side of a {rows}x{cols} matrix matches basis order {order}"
    )))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormMode {
    #[default]
    L1,
    L2,
}

impl NormMode {
    pub fn as_str(self) -> &'static str {
        match self {
            NormMode::L1 => "l1",
            NormMode::L2 => "l2",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProjectorKind {
    /// Columns of the shared basis ranked by alignment with the gradient.
    DctSelect,
    /// Leading singular vectors of the gradient.
    Svd,
    /// Orthonormalized Gaussian matrix, redrawn at every refresh.
    RandomSemiOrthogonal { seed: u64 },
    /// Random subset of coordinate axes, redrawn at every refresh.
    RandPerm { seed: u64 },
    /// The first `r` columns of the shared basis, never re-ranked.
    IdentityCols,
}

impl ProjectorKind {
    pub fn name(&self) -> &'static str {
        match self {
            ProjectorKind::DctSelect => "dct",
            ProjectorKind::Svd => "svd",
            ProjectorKind::RandomSemiOrthogonal { .. } => "random",
            ProjectorKind::RandPerm { .. } => "randperm",
            ProjectorKind::IdentityCols => "identity_cols",
        }
    }
}

/// A set of basis columns, in descending score order when produced by
/// [`select`].
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Selection {
    indices: Vec<usize>,
    side: Side,
    norm_mode: NormMode,
}

impl Selection {
    pub fn new(indices: Vec<usize>, side: Side, norm_mode: NormMode, order: usize) -> Result<Self> {
        if indices.is_empty() {
            return Err(invalid("selection rank must be at least 1"));
        }
        let mut seen = vec![false; order];
        for &i in &indices {
            if i >= order {
                return Err(invalid(format!("index {i} out of range for basis order {order}")));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(invalid(format!("duplicate index {i} in selection")));
            }
        }
        Ok(Self { indices, side, norm_mode })
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn rank(&self) -> usize {
        self.indices.len()
    }

    pub fn side(&self) -> Side {
        self.side
    }

    pub fn norm_mode(&self) -> NormMode {
        self.norm_mode
    }

    pub fn with_side(mut self, side: Side) -> Self {
        self.side = side;
        self
    }
}

fn check_rank(r: usize, rows: usize, cols: usize) -> Result<()> {
    if r == 0 {
        return Err(invalid("rank must be at least 1"));
    }
    if r > rows.min(cols) {
        return Err(invalid(format!("rank {r} exceeds min({rows}, {cols})")));
    }
    Ok(())
}

/// Per-axis scores of `S`: column scores for right projection, row scores for
/// left. L2 scores are squared norms, which rank identically to norms.
pub fn scores(s: &DMatrix<f64>, side: Side, mode: NormMode) -> Vec<f64> {
    let reduce = |it: &mut dyn Iterator<Item = f64>| match mode {
        NormMode::L1 => it.map(f64::abs).sum::<f64>(),
        NormMode::L2 => it.map(|x| x * x).sum::<f64>(),
    };
    match side {
        Side::Right => s.column_iter().map(|c| reduce(&mut c.iter().copied())).collect(),
        Side::Left => s.row_iter().map(|r| reduce(&mut r.iter().copied())).collect(),
    }
}

/// Indices of the `r` largest scores, descending, ties by ascending index.
pub fn top_indices(scores: &[f64], r: usize) -> Vec<usize> {
    let cmp = |a: &usize, b: &usize| -> Ordering {
        scores[*b].total_cmp(&scores[*a]).then(a.cmp(b))
    };
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    if r < idx.len() {
        idx.select_nth_unstable_by(r, cmp);
        idx.truncate(r);
    }
    idx.sort_unstable_by(cmp);
    idx
}

/// Ranks basis columns by their alignment with `g` and keeps the top `r`.
///
/// Returns the selection together with the full score matrix `S` so callers
/// can read the low-rank gradient off it via [`low_rank_from_scores`].
pub fn select(
    g: &DMatrix<f64>,
    basis: &OrthoBasis,
    r: usize,
    norm_mode: NormMode,
) -> Result<(Selection, DMatrix<f64>)> {
    let (rows, cols) = g.shape();
    check_rank(r, rows, cols)?;
    ensure_finite(g, "gradient")?;
    let side = resolve_side(rows, cols, basis.order())?;
    let s = match side {
        Side::Right => g * basis.matrix(),
        Side::Left => basis.matrix().tr_mul(g),
    };
    let indices = top_indices(&scores(&s, side, norm_mode), r);
    Ok((Selection { indices, side, norm_mode }, s))
}

/// The selected columns (right) or rows (left) of a score matrix, which equal
/// `project_down` of the gradient that produced it.
pub fn low_rank_from_scores(s: &DMatrix<f64>, sel: &Selection) -> DMatrix<f64> {
    match sel.side {
        Side::Right => s.select_columns(sel.indices.iter()),
        Side::Left => s.select_rows(sel.indices.iter()),
    }
}

fn check_indices(basis: &OrthoBasis, sel: &Selection) -> Result<()> {
    let n = basis.order();
    if let Some(&bad) = sel.indices.iter().find(|&&i| i >= n) {
        return Err(invalid(format!("index {bad} out of range for basis order {n}")));
    }
    Ok(())
}

pub fn project_down(g: &DMatrix<f64>, basis: &OrthoBasis, sel: &Selection) -> Result<DMatrix<f64>> {
    check_indices(basis, sel)?;
    let qr = basis.columns(&sel.indices);
    match sel.side {
        Side::Right if g.ncols() == basis.order() => Ok(g * qr),
        Side::Left if g.nrows() == basis.order() => Ok(qr.tr_mul(g)),
        side => Err(invalid(format!(
            "{side:?} projection of a {}x{} matrix needs a basis of matching order, got {}",
            g.nrows(),
            g.ncols(),
            basis.order()
        ))),
    }
}

pub fn project_up(low: &DMatrix<f64>, basis: &OrthoBasis, sel: &Selection) -> Result<DMatrix<f64>> {
    check_indices(basis, sel)?;
    let qr = basis.columns(&sel.indices);
    match sel.side {
        Side::Right if low.ncols() == sel.rank() => Ok(low * qr.transpose()),
        Side::Left if low.nrows() == sel.rank() => Ok(qr * low),
        side => Err(invalid(format!(
            "low-rank matrix {}x{} does not fit a rank-{} {side:?} selection",
            low.nrows(),
            low.ncols(),
            sel.rank()
        ))),
    }
}

/// `||G - up(down(G))||_F^2`.
pub fn reconstruction_error(g: &DMatrix<f64>, basis: &OrthoBasis, sel: &Selection) -> Result<f64> {
    let back = project_up(&project_down(g, basis, sel)?, basis, sel)?;
    Ok((g - back).norm_squared())
}

/// Squared alignments `||q_i^T G||^2` (left) or `||G q_i||^2` (right) for
/// every column of the basis.
pub fn alignments(g: &DMatrix<f64>, basis: &OrthoBasis, side: Side) -> Result<Vec<f64>> {
    let s = match side {
        Side::Right if g.ncols() == basis.order() => g * basis.matrix(),
        Side::Left if g.nrows() == basis.order() => basis.matrix().tr_mul(g),
        _ => return Err(invalid("basis order does not match the projected dimension")),
    };
    Ok(scores(&s, side, NormMode::L2))
}

/// Switching matrix `R = Q_prev^T Q_crt` between two selections of one
/// orthogonal basis, built by index matching: `R[a][b] = 1` iff
/// `prev[a] == crt[b]`.
pub fn switch_matrix(prev: &Selection, crt: &Selection) -> Result<DMatrix<f64>> {
    let map = switch_map(prev, crt)?;
    let r = crt.rank();
    let mut out = DMatrix::zeros(r, r);
    for (b, a) in map.iter().enumerate() {
        if let Some(a) = a {
            out[(*a, b)] = 1.0;
        }
    }
    Ok(out)
}

/// For each current slot `b`, the previous slot holding the same basis
/// column, if any. This is the sparse form of [`switch_matrix`].
pub fn switch_map(prev: &Selection, crt: &Selection) -> Result<Vec<Option<usize>>> {
    if prev.rank() != crt.rank() {
        return Err(invalid(format!(
            "switching between rank {} and rank {} selections",
            prev.rank(),
            crt.rank()
        )));
    }
    Ok(crt
        .indices
        .iter()
        .map(|c| prev.indices.iter().position(|p| p == c))
        .collect())
}

/// Dense `Q_prev^T Q_crt`, for checking [`switch_matrix`].
pub fn switch_matrix_by_product(
    basis: &OrthoBasis,
    prev: &Selection,
    crt: &Selection,
) -> Result<DMatrix<f64>> {
    if prev.rank() != crt.rank() {
        return Err(invalid("rank mismatch"));
    }
    check_indices(basis, prev)?;
    check_indices(basis, crt)?;
    Ok(basis.columns(&prev.indices).tr_mul(&basis.columns(&crt.indices)))
}

/// A dense semi-orthogonal projector `P` (`k x r`, `P^T P = I`).
#[derive(Debug, Clone, PartialEq)]
pub struct DenseProjector {
    pub matrix: DMatrix<f64>,
    pub side: Side,
}

impl DenseProjector {
    pub fn rank(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn down(&self, g: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let k = self.matrix.nrows();
        match self.side {
            Side::Right if g.ncols() == k => Ok(g * &self.matrix),
            Side::Left if g.nrows() == k => Ok(self.matrix.tr_mul(g)),
            _ => Err(invalid("gradient shape does not match dense projector")),
        }
    }

    pub fn up(&self, low: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let r = self.rank();
        match self.side {
            Side::Right if low.ncols() == r => Ok(low * self.matrix.transpose()),
            Side::Left if low.nrows() == r => Ok(&self.matrix * low),
            _ => Err(invalid("low-rank shape does not match dense projector")),
        }
    }
}

/// Thin SVD, singular values in nonincreasing order.
pub struct SvdParts {
    pub u: DMatrix<f64>,
    pub singular_values: Vec<f64>,
    pub v: DMatrix<f64>,
}

pub fn thin_svd(g: &DMatrix<f64>) -> Result<SvdParts> {
    ensure_finite(g, "svd input")?;
    let (rows, cols) = g.shape();
    let a = faer::Mat::<f64>::from_fn(rows, cols, |i, j| g[(i, j)]);
    let svd = a.thin_svd().map_err(|e| Error::Svd(format!("{e:?}")))?;
    let (u, v, s) = (svd.U(), svd.V(), svd.S().column_vector());
    let k = rows.min(cols);
    Ok(SvdParts {
        u: DMatrix::from_fn(rows, k, |i, j| u[(i, j)]),
        singular_values: (0..k).map(|i| s[i]).collect(),
        v: DMatrix::from_fn(cols, k, |i, j| v[(i, j)]),
    })
}

/// Leading `r` singular vectors on the GaLore side: `V[:, :r]` for right
/// projection, `U[:, :r]` for left.
pub fn svd_projector(g: &DMatrix<f64>, r: usize) -> Result<DenseProjector> {
    let (rows, cols) = g.shape();
    check_rank(r, rows, cols)?;
    let parts = thin_svd(g)?;
    let side = Side::for_shape(rows, cols);
    let matrix = match side {
        Side::Right => parts.v.columns(0, r).into_owned(),
        Side::Left => parts.u.columns(0, r).into_owned(),
    };
    Ok(DenseProjector { matrix, side })
}

/// Orthonormal columns from the QR factorization of an `n x r` Gaussian draw.
pub fn random_semi_orthogonal(n: usize, r: usize, seed: u64) -> Result<DMatrix<f64>> {
    if r == 0 || r > n {
        return Err(invalid(format!("rank {r} must be in 1..={n}")));
    }
    let draw = gaussian_matrix(&mut seeded(seed), n, r);
    let qr = draw.qr();
    let mut q = qr.q();
    let rdiag = qr.r().diagonal();
    // Fix signs so the factorization is unique.
    for (j, d) in rdiag.iter().enumerate() {
        if *d < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    Ok(q)
}

/// `r` distinct coordinate axes drawn without replacement; a selection
/// against the identity basis.
pub fn randperm_selection(n: usize, r: usize, seed: u64) -> Result<Selection> {
    if r == 0 || r > n {
        return Err(invalid(format!("rank {r} must be in 1..={n}")));
    }
    let indices = sample(&mut seeded(seed), n, r).into_vec();
    Ok(Selection { indices, side: Side::Right, norm_mode: NormMode::default() })
}

/// The projection currently in force for one layer.
#[derive(Debug, Clone)]
pub enum Projection {
    Columns { basis: Arc<OrthoBasis>, selection: Selection },
    Dense(DenseProjector),
}

impl Projection {
    pub fn rank(&self) -> usize {
        match self {
            Projection::Columns { selection, .. } => selection.rank(),
            Projection::Dense(p) => p.rank(),
        }
    }

    pub fn side(&self) -> Side {
        match self {
            Projection::Columns { selection, .. } => selection.side(),
            Projection::Dense(p) => p.side,
        }
    }

    pub fn selection(&self) -> Option<&Selection> {
        match self {
            Projection::Columns { selection, .. } => Some(selection),
            Projection::Dense(_) => None,
        }
    }

    pub fn down(&self, g: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        match self {
            Projection::Columns { basis, selection } => project_down(g, basis, selection),
            Projection::Dense(p) => p.down(g),
        }
    }

    pub fn up(&self, low: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        match self {
            Projection::Columns { basis, selection } => project_up(low, basis, selection),
            Projection::Dense(p) => p.up(low),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::gaussian_matrix;

    fn dct(n: usize) -> OrthoBasis {
        OrthoBasis::dct3(n).unwrap()
    }

    #[test]
    fn rank_one_aligned_gradient_selects_its_column() {
        let q = dct(8);
        let x = gaussian_matrix(&mut seeded(3), 10, 1);
        let k = 5;
        let g = &x * q.matrix().column(k).transpose();
        for mode in [NormMode::L1, NormMode::L2] {
            let (sel, _) = select(&g, &q, 2, mode).unwrap();
            assert_eq!(sel.indices()[0], k);
            assert_eq!(sel.side(), Side::Right);
            assert!(reconstruction_error(&g, &q, &sel).unwrap() < 1e-20);
            let low = project_down(&g, &q, &sel).unwrap();
            assert!((low.column(0) - x.column(0)).norm() < 1e-12);
            assert!(low.column(1).norm() < 1e-12);
        }
    }

    #[test]
    fn wide_gradient_is_left_projected() {
        let q = dct(4);
        let g = gaussian_matrix(&mut seeded(1), 4, 6);
        let (sel, s) = select(&g, &q, 2, NormMode::L1).unwrap();
        assert_eq!(sel.side(), Side::Left);
        assert_eq!(s.shape(), (4, 6));
        let sc = scores(&s, Side::Left, NormMode::L1);
        assert_eq!(sc.len(), 4);
        assert!(sc[sel.indices()[0]] >= sc[sel.indices()[1]]);
        let low = project_down(&g, &q, &sel).unwrap();
        assert_eq!(low.shape(), (2, 6));
        assert!((low_rank_from_scores(&s, &sel) - low).amax() < 1e-13);
    }

    #[test]
    fn tall_gradient_shortcut_matches_projection() {
        let q = dct(5);
        let g = gaussian_matrix(&mut seeded(2), 9, 5);
        let (sel, s) = select(&g, &q, 3, NormMode::L2).unwrap();
        let low = project_down(&g, &q, &sel).unwrap();
        assert_eq!(low.shape(), (9, 3));
        assert!((low_rank_from_scores(&s, &sel) - low).amax() < 1e-13);
    }

    #[test]
    fn ties_break_by_ascending_index() {
        assert_eq!(top_indices(&[1.0, 3.0, 3.0, 2.0, 3.0], 3), vec![1, 2, 4]);
        assert_eq!(top_indices(&[0.0; 6], 4), vec![0, 1, 2, 3]);
        assert_eq!(top_indices(&[5.0, 1.0], 2), vec![0, 1]);
    }

    #[test]
    fn rank_and_order_checks() {
        let q = dct(4);
        let g = DMatrix::<f64>::zeros(4, 4);
        assert!(select(&g, &q, 5, NormMode::L1).is_err());
        assert!(select(&g, &q, 0, NormMode::L1).is_err());
        let g = DMatrix::<f64>::zeros(6, 5);
        assert!(select(&g, &q, 2, NormMode::L1).is_err());
        let mut g = DMatrix::<f64>::zeros(4, 4);
        g[(0, 0)] = f64::NAN;
        assert!(matches!(select(&g, &q, 2, NormMode::L1), Err(Error::NonFinite(_))));
    }

    #[test]
    fn larger_dimension_fallback() {
        // 3 x 8 layer against an order-8 basis: right projection to 3 x r.
        assert_eq!(resolve_side(3, 8, 8).unwrap(), Side::Right);
        assert_eq!(resolve_side(8, 3, 8).unwrap(), Side::Left);
        assert_eq!(resolve_side(8, 3, 3).unwrap(), Side::Right);
        assert!(resolve_side(5, 6, 7).is_err());
        let q = dct(8);
        let g = gaussian_matrix(&mut seeded(4), 3, 8);
        let (sel, _) = select(&g, &q, 2, NormMode::L1).unwrap();
        assert_eq!(sel.side(), Side::Right);
        assert_eq!(project_down(&g, &q, &sel).unwrap().shape(), (3, 2));
    }

    #[test]
    fn identity_basis_down_takes_columns() {
        let q = OrthoBasis::identity(5).unwrap();
        let g = gaussian_matrix(&mut seeded(5), 7, 5);
        let sel = Selection::new(vec![0, 1, 2], Side::Right, NormMode::L1, 5).unwrap();
        let low = project_down(&g, &q, &sel).unwrap();
        assert_eq!(low, g.columns(0, 3).into_owned());
    }

    #[test]
    fn full_rank_round_trip_with_permuted_indices() {
        let q = dct(6);
        let g = gaussian_matrix(&mut seeded(6), 6, 6);
        let sel = Selection::new(vec![3, 0, 5, 1, 4, 2], Side::Right, NormMode::L1, 6).unwrap();
        let back = project_up(&project_down(&g, &q, &sel).unwrap(), &q, &sel).unwrap();
        assert!((back - &g).norm() <= 1e-12);
    }

    #[test]
    fn planted_rank_r_reconstructs() {
        let q = dct(12);
        let cols = [1usize, 7, 10];
        let a = gaussian_matrix(&mut seeded(7), 15, 3);
        let g = &a * q.columns(&cols).transpose();
        let (sel, _) = select(&g, &q, 3, NormMode::L1).unwrap();
        let mut got = sel.indices().to_vec();
        got.sort();
        assert_eq!(got, cols);
        let back = project_up(&project_down(&g, &q, &sel).unwrap(), &q, &sel).unwrap();
        assert!((back - &g).amax() <= 1e-10);
    }

    #[test]
    fn zero_low_rank_maps_to_zero() {
        let q = dct(4);
        let sel = Selection::new(vec![1, 2], Side::Left, NormMode::L1, 4).unwrap();
        let up = project_up(&DMatrix::zeros(2, 7), &q, &sel).unwrap();
        assert_eq!(up, DMatrix::zeros(4, 7));
        assert!(project_up(&DMatrix::zeros(3, 7), &q, &sel).is_err());
    }

    #[test]
    fn identity_gradient_error_is_n_minus_r() {
        let n = 10;
        let q = dct(n);
        let g = DMatrix::<f64>::identity(n, n);
        for r in 1..=n {
            let sel = Selection::new((0..r).collect(), Side::Right, NormMode::L2, n).unwrap();
            let e = reconstruction_error(&g, &q, &sel).unwrap();
            assert!((e - (n - r) as f64).abs() < 1e-10);
        }
    }

    #[test]
    fn complete_basis_has_no_error() {
        let q = dct(16);
        let g = gaussian_matrix(&mut seeded(8), 16, 16);
        let (sel, _) = select(&g, &q, 16, NormMode::L1).unwrap();
        assert!(reconstruction_error(&g, &q, &sel).unwrap() <= 1e-10 * g.norm_squared());
    }

    #[test]
    fn contractive_example() {
        let q = dct(16);
        let g = gaussian_matrix(&mut seeded(9), 16, 16);
        let (sel, _) = select(&g, &q, 4, NormMode::L2).unwrap();
        let e = reconstruction_error(&g, &q, &sel).unwrap();
        assert!(e <= 0.75 * g.norm_squared());
    }

    #[test]
    fn switch_matrix_examples() {
        let mk = |v: Vec<usize>| Selection::new(v, Side::Right, NormMode::L1, 10).unwrap();
        let q = dct(10);
        let r = switch_matrix(&mk(vec![2, 5, 7]), &mk(vec![5, 7, 9])).unwrap();
        let expect = DMatrix::from_row_slice(3, 3, &[0., 0., 0., 1., 0., 0., 0., 1., 0.]);
        assert_eq!(r, expect);
        let dense = switch_matrix_by_product(&q, &mk(vec![2, 5, 7]), &mk(vec![5, 7, 9])).unwrap();
        assert!((dense - &expect).amax() < 1e-12);

        let same = mk(vec![4, 1, 8]);
        assert_eq!(switch_matrix(&same, &same).unwrap(), DMatrix::identity(3, 3));
        assert_eq!(switch_matrix(&mk(vec![0, 1]), &mk(vec![2, 3])).unwrap(), DMatrix::zeros(2, 2));
        assert!(switch_matrix(&mk(vec![0, 1]), &mk(vec![2])).is_err());
    }

    #[test]
    fn svd_projector_on_diagonal() {
        let g = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![3.0, 2.0, 1.0]));
        let p = svd_projector(&g, 2).unwrap();
        assert_eq!(p.side, Side::Right);
        let m = &p.matrix;
        assert!((m[(0, 0)].abs() - 1.0).abs() < 1e-12);
        assert!((m[(1, 1)].abs() - 1.0).abs() < 1e-12);
        assert!(m[(2, 0)].abs() < 1e-12 && m[(2, 1)].abs() < 1e-12);
    }

    #[test]
    fn svd_projector_full_rank_and_errors() {
        let g = gaussian_matrix(&mut seeded(10), 7, 12);
        let p = svd_projector(&g, 7).unwrap();
        assert_eq!(p.side, Side::Left);
        let back = p.up(&p.down(&g).unwrap()).unwrap();
        assert!((back - &g).norm_squared() <= 1e-8 * g.norm_squared());
        let ptp = p.matrix.tr_mul(&p.matrix);
        assert!((ptp - DMatrix::<f64>::identity(7, 7)).amax() < 1e-8);
        let mut bad = g.clone();
        bad[(1, 1)] = f64::INFINITY;
        assert!(svd_projector(&bad, 2).is_err());
        assert!(svd_projector(&g, 8).is_err());
    }

    #[test]
    fn random_projectors() {
        let p = random_semi_orthogonal(64, 16, 1).unwrap();
        let ptp = p.tr_mul(&p);
        assert!((ptp - DMatrix::<f64>::identity(16, 16)).amax() <= 1e-10);
        assert_eq!(p, random_semi_orthogonal(64, 16, 1).unwrap());
        assert_ne!(p, random_semi_orthogonal(64, 16, 2).unwrap());
        assert!(random_semi_orthogonal(4, 5, 1).is_err());

        let s = randperm_selection(20, 7, 3).unwrap();
        assert_eq!(s.rank(), 7);
        let mut v = s.indices().to_vec();
        v.sort();
        v.dedup();
        assert_eq!(v.len(), 7);
        assert!(v.iter().all(|&i| i < 20));
        assert_eq!(s, randperm_selection(20, 7, 3).unwrap());
        assert!(randperm_selection(3, 4, 1).is_err());
    }

    #[test]
    fn selection_validation() {
        assert!(Selection::new(vec![1, 1], Side::Right, NormMode::L1, 4).is_err());
        assert!(Selection::new(vec![4], Side::Right, NormMode::L1, 4).is_err());
        assert!(Selection::new(vec![], Side::Right, NormMode::L1, 4).is_err());
        let q = dct(4);
        let sel = Selection::new(vec![0, 3], Side::Right, NormMode::L1, 4).unwrap();
        assert!(project_down(&DMatrix::zeros(3, 3), &q, &sel).is_err());
        let big = dct(3);
        assert!(project_down(&DMatrix::zeros(3, 3), &big, &sel).is_err());
    }
}
