//! Permutation-invariant training losses.
//!
//! The multi-label loss is the binary cross-entropy minimised over every
//! relabelling of the target speakers; the minimiser is found with the
//! Hungarian algorithm on the `K x K` matrix of per-column BCE costs.
//! The powerset loss aligns the target in speaker space (using the
//! argmax-binarised prediction), re-encodes it and applies a softmax
//! cross-entropy over the powerset classes.

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::powerset::PowersetCodec;
use crate::timeline::{permute_columns, SpeakerPermutation};

/// Probabilities are clamped to `[EPS, 1 - EPS]` before taking logs.
pub const EPS: f64 = 1e-7;

/// A square matrix of finite costs; `cost[i][j]` is the price of matching
/// target dimension `i` with prediction dimension `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix(Array2<f64>);

impl CostMatrix {
    pub fn new(costs: Array2<f64>) -> Result<Self> {
        if costs.nrows() != costs.ncols() {
            return Err(Error::ShapeMismatch(format!(
                "cost matrix must be square, got {}x{}",
                costs.nrows(),
                costs.ncols()
            )));
        }
        if let Some(v) = costs.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("cost matrix entry {v} is not finite")));
        }
        Ok(Self(costs))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::ShapeMismatch("cost matrix rows must all have length equal to the row count".into()));
        }
        Self::new(Array2::from_shape_fn((n, n), |(i, j)| rows[i][j]))
    }

    pub fn size(&self) -> usize {
        self.0.nrows()
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.0.view()
    }

    /// Total cost of assigning row `i` to column `perm(i)`.
    pub fn assignment_cost(&self, perm: &SpeakerPermutation) -> f64 {
        perm.mapping().iter().enumerate().map(|(i, &j)| self.0[[i, j]]).sum()
    }
}

/// Loss value, the target relabelling that achieves it and the gradient
/// with respect to the prediction.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossResult {
    pub value: f64,
    pub permutation: SpeakerPermutation,
    #[serde(skip)]
    pub gradient: Array2<f64>,
}

/// Minimum-cost perfect matching (Hungarian algorithm with potentials,
/// `O(n^3)`). Returns the row-to-column assignment and its cost.
pub fn hungarian(cost: &CostMatrix) -> (SpeakerPermutation, f64) {
    let n = cost.size();
    if n == 0 {
        return (SpeakerPermutation::identity(0), 0.0);
    }
    let c = &cost.0;
    // 1-based potentials; column 0 is a sentinel
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut row_of = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];

    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let reduced = c[[i0 - 1, j - 1]] - u[i0] - v[j];
                if reduced < minv[j] {
                    minv[j] = reduced;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut mapping = vec![0usize; n];
    for j in 1..=n {
        mapping[row_of[j] - 1] = j - 1;
    }
    let perm = SpeakerPermutation::new(mapping).expect("hungarian yields a bijection");
    let total = cost.assignment_cost(&perm);
    (perm, total)
}

/// Rectangular assignment maximising total `score`; pairs are `(row, col)`.
/// Rows or columns left over when the matrix is not square stay unmatched.
pub(crate) fn max_score_assignment(score: ArrayView2<'_, f64>) -> Vec<(usize, usize)> {
    let (rows, cols) = score.dim();
    let n = rows.max(cols);
    if n == 0 {
        return Vec::new();
    }
    let padded = Array2::from_shape_fn((n, n), |(i, j)| {
        if i < rows && j < cols {
            -score[[i, j]]
        } else {
            0.0
        }
    });
    let (perm, _) = hungarian(&CostMatrix(padded));
    perm.mapping()
        .iter()
        .enumerate()
        .filter(|&(i, &j)| i < rows && j < cols)
        .map(|(i, &j)| (i, j))
        .collect()
}

fn check_binary(m: ArrayView2<'_, f64>, what: &str) -> Result<()> {
    match m.iter().find(|&&v| v != 0.0 && v != 1.0) {
        Some(v) => Err(Error::InvalidArgument(format!("{what} value {v} is not binary"))),
        None => Ok(()),
    }
}

fn check_probability(m: ArrayView2<'_, f64>) -> Result<()> {
    match m.iter().find(|&&v| !(0.0..=1.0).contains(&v)) {
        Some(v) => Err(Error::InvalidArgument(format!("prediction {v} is not a probability"))),
        None => Ok(()),
    }
}

fn check_shapes(target: ArrayView2<'_, f64>, pred: ArrayView2<'_, f64>) -> Result<()> {
    if target.dim() != pred.dim() {
        return Err(Error::ShapeMismatch(format!(
            "target is {:?}, prediction is {:?}",
            target.dim(),
            pred.dim()
        )));
    }
    if target.is_empty() {
        return Err(Error::ShapeMismatch("empty matrices".into()));
    }
    Ok(())
}

#[inline]
fn bce_term(y: f64, p: f64) -> f64 {
    let p = p.clamp(EPS, 1.0 - EPS);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

fn column_bce(y: ArrayView1<'_, f64>, p: ArrayView1<'_, f64>) -> f64 {
    y.iter().zip(p.iter()).map(|(&y, &p)| bce_term(y, p)).sum::<f64>() / y.len() as f64
}

/// Mean binary cross-entropy over all `T * K` entries.
pub fn bce(target: ArrayView2<'_, f64>, pred: ArrayView2<'_, f64>) -> Result<f64> {
    check_shapes(target, pred)?;
    check_binary(target, "target")?;
    check_probability(pred)?;
    let n = target.len() as f64;
    Ok(target.iter().zip(pred.iter()).map(|(&y, &p)| bce_term(y, p)).sum::<f64>() / n)
}

fn bce_gradient(target: ArrayView2<'_, f64>, pred: ArrayView2<'_, f64>) -> Array2<f64> {
    let n = target.len() as f64;
    let mut grad = Array2::zeros(pred.dim());
    ndarray::Zip::from(&mut grad).and(target).and(pred).for_each(|g, &y, &p| {
        // clamped region is flat
        *g = if p < EPS || p > 1.0 - EPS {
            0.0
        } else {
            (-y / p + (1.0 - y) / (1.0 - p)) / n
        };
    });
    grad
}

/// `cost[i][j]` = BCE between target column `i` and prediction column `j`.
pub fn pairwise_bce_costs(target: ArrayView2<'_, f64>, pred: ArrayView2<'_, f64>) -> Result<CostMatrix> {
    check_shapes(target, pred)?;
    check_binary(target, "target")?;
    check_probability(pred)?;
    let k = target.ncols();
    CostMatrix::new(Array2::from_shape_fn((k, k), |(i, j)| {
        column_bce(target.column(i), pred.column(j))
    }))
}

/// BCE of the best relabelling of the target speakers.
pub fn multilabel_pit_loss(target: ArrayView2<'_, f64>, pred: ArrayView2<'_, f64>) -> Result<LossResult> {
    let costs = pairwise_bce_costs(target, pred)?;
    let (permutation, _) = hungarian(&costs);
    let aligned = permute_columns(target, &permutation)?;
    let value = bce(aligned.view(), pred)?;
    let gradient = bce_gradient(aligned.view(), pred);
    Ok(LossResult {
        value,
        permutation,
        gradient,
    })
}

fn log_softmax_row(row: ArrayView1<'_, f64>) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_sum = row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln() + max;
    row.iter().map(|&x| x - log_sum).collect()
}

/// Mean softmax cross-entropy over frames and its gradient with respect to
/// the logits.
pub fn powerset_cross_entropy(target_classes: &[usize], logits: ArrayView2<'_, f64>) -> Result<(f64, Array2<f64>)> {
    let (t, k) = logits.dim();
    if target_classes.len() != t || t == 0 {
        return Err(Error::ShapeMismatch(format!(
            "{} target frames for {t} logit frames",
            target_classes.len()
        )));
    }
    if let Some(&c) = target_classes.iter().find(|&&c| c >= k) {
        return Err(Error::IndexOutOfRange { index: c, len: k });
    }
    if let Some(v) = logits.iter().find(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument(format!("logit {v} is not finite")));
    }
    let mut value = 0.0;
    let mut grad = Array2::zeros((t, k));
    for (frame, (row, &c)) in logits.axis_iter(Axis(0)).zip(target_classes).enumerate() {
        let log_probs = log_softmax_row(row);
        value -= log_probs[c];
        for (j, lp) in log_probs.iter().enumerate() {
            let onehot = if j == c { 1.0 } else { 0.0 };
            grad[[frame, j]] = (lp.exp() - onehot) / t as f64;
        }
    }
    Ok((value / t as f64, grad))
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: ArrayView1<'_, f64>) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Relabels the target speakers to best agree with the argmax prediction.
///
/// Both sides are decoded to multi-label, matched with the Hungarian
/// algorithm on pairwise BCE costs (the binary prediction acting as clamped
/// probabilities), and the permuted multi-label target is re-encoded.
pub fn powerset_pit_align(
    codec: &PowersetCodec,
    target_classes: &[usize],
    logits: ArrayView2<'_, f64>,
) -> Result<(Vec<usize>, SpeakerPermutation)> {
    let (t, k) = logits.dim();
    if k != codec.num_classes() {
        return Err(Error::ShapeMismatch(format!(
            "logits have {k} classes, codec has {}",
            codec.num_classes()
        )));
    }
    if target_classes.len() != t || t == 0 {
        return Err(Error::ShapeMismatch(format!(
            "{} target frames for {t} logit frames",
            target_classes.len()
        )));
    }

    let target_ml = decode_rows(codec, target_classes)?;
    let predicted: Vec<usize> = logits.axis_iter(Axis(0)).map(argmax).collect();
    let pred_ml = decode_rows(codec, &predicted)?;

    let costs = pairwise_bce_costs(target_ml.view(), pred_ml.view())?;
    let (permutation, _) = hungarian(&costs);

    let aligned_ml = permute_columns(target_ml.view(), &permutation)?;
    let aligned = aligned_ml
        .axis_iter(Axis(0))
        .map(|row| codec.encode_frame(row.as_slice().expect("standard layout")))
        .collect::<Result<Vec<_>>>()?;
    Ok((aligned, permutation))
}

fn decode_rows(codec: &PowersetCodec, classes: &[usize]) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((classes.len(), codec.num_speakers()));
    for (t, &c) in classes.iter().enumerate() {
        for (s, v) in codec.decode_class(c)?.into_iter().enumerate() {
            out[[t, s]] = v;
        }
    }
    Ok(out)
}

/// Powerset cross-entropy after permutation-invariant target alignment.
pub fn powerset_pit_loss(
    codec: &PowersetCodec,
    target_classes: &[usize],
    logits: ArrayView2<'_, f64>,
) -> Result<LossResult> {
    let (aligned, permutation) = powerset_pit_align(codec, target_classes, logits)?;
    let (value, gradient) = powerset_cross_entropy(&aligned, logits)?;
    Ok(LossResult {
        value,
        permutation,
        gradient,
    })
}

/// Outcome of comparing an analytic gradient with central finite differences.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheck {
    pub max_relative_error: f64,
    pub checked: usize,
    /// Coordinates where a `±h` step changed the selected permutation.
    pub skipped: usize,
}

impl GradCheck {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.checked > 0 && self.max_relative_error < tolerance
    }
}

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn finite_difference_check<F>(point: ArrayView2<'_, f64>, analytic: &Array2<f64>, h: f64, mut eval: F) -> Result<GradCheck>
where
    F: FnMut(ArrayView2<'_, f64>) -> Result<Option<f64>>,
{
    let mut probe = point.to_owned();
    let mut check = GradCheck {
        max_relative_error: 0.0,
        checked: 0,
        skipped: 0,
    };
    for idx in ndarray::indices(point.dim()) {
        let x = point[idx];
        probe[idx] = x + h;
        let plus = eval(probe.view())?;
        probe[idx] = x - h;
        let minus = eval(probe.view())?;
        probe[idx] = x;
        match (plus, minus) {
            (Some(lp), Some(lm)) => {
                let numeric = (lp - lm) / (2.0 * h);
                check.max_relative_error = check.max_relative_error.max(relative_error(analytic[idx], numeric));
                check.checked += 1;
            }
            _ => check.skipped += 1,
        }
    }
    Ok(check)
}

/// Central finite-difference check of [`multilabel_pit_loss`]'s gradient.
pub fn check_multilabel_gradient(target: ArrayView2<'_, f64>, pred: ArrayView2<'_, f64>, h: f64) -> Result<GradCheck> {
    let base = multilabel_pit_loss(target, pred)?;
    finite_difference_check(pred, &base.gradient, h, |probe| {
        if probe.iter().any(|&p| !(EPS..=1.0 - EPS).contains(&p)) {
            return Ok(None);
        }
        let r = multilabel_pit_loss(target, probe)?;
        Ok((r.permutation == base.permutation).then_some(r.value))
    })
}

/// Central finite-difference check of [`powerset_pit_loss`]'s gradient.
pub fn check_powerset_gradient(
    codec: &PowersetCodec,
    target_classes: &[usize],
    logits: ArrayView2<'_, f64>,
    h: f64,
) -> Result<GradCheck> {
    let base = powerset_pit_loss(codec, target_classes, logits)?;
    finite_difference_check(logits, &base.gradient, h, |probe| {
        let r = powerset_pit_loss(codec, target_classes, probe)?;
        Ok((r.permutation == base.permutation).then_some(r.value))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn bce_examples() {
        let y = array![[1.0, 0.0], [0.0, 1.0]];
        let half = Array2::from_elem((2, 2), 0.5);
        assert!((bce(y.view(), half.view()).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(bce(y.view(), y.view()).unwrap() <= 1e-6);
        assert!(bce(y.view(), array![[0.5]].view()).is_err());
        assert!(bce(y.view(), array![[1.5, 0.0], [0.0, 1.0]].view()).is_err());
    }

    #[test]
    fn bce_matches_scalar_loop() {
        let y = array![[1., 0., 1.], [0., 0., 1.], [1., 1., 0.], [0., 1., 0.]];
        let p = array![[0.9, 0.2, 0.6], [0.3, 0.05, 0.7], [0.55, 0.8, 0.1], [0.4, 0.65, 0.35]];
        let mut sum = 0.0;
        for t in 0..4 {
            for k in 0..3 {
                let (yy, pp): (f64, f64) = (y[[t, k]], p[[t, k]]);
                sum += if yy == 1.0 { -pp.ln() } else { -(1.0 - pp).ln() };
            }
        }
        assert!((bce(y.view(), p.view()).unwrap() - sum / 12.0).abs() < 1e-12);
    }

    #[test]
    fn pairwise_costs_closed_form() {
        let costs = pairwise_bce_costs(array![[1.0, 0.0]].view(), array![[0.9, 0.1]].view()).unwrap();
        let a = -(0.9f64).ln();
        let b = -(0.1f64).ln();
        let expected = array![[a, b], [b, a]];
        assert!(costs.view().iter().zip(expected.iter()).all(|(x, y)| (x - y).abs() < 1e-12));

        let half = Array2::from_elem((5, 3), 0.5);
        let y = Array2::from_shape_fn((5, 3), |(t, k)| ((t + k) % 2) as f64);
        let costs = pairwise_bce_costs(y.view(), half.view()).unwrap();
        assert!(costs.view().iter().all(|c| (c - std::f64::consts::LN_2).abs() < 1e-12));
    }

    #[test]
    fn hungarian_small() {
        let (p, c) = hungarian(&CostMatrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap());
        assert!(p.is_identity());
        assert_eq!(c, 0.0);
        let (p, c) = hungarian(&CostMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
        assert_eq!(p.mapping(), &[1, 0]);
        assert_eq!(c, 0.0);
        let (_, c) = hungarian(
            &CostMatrix::from_rows(&[vec![4.0, 1.0, 3.0], vec![2.0, 0.0, 5.0], vec![3.0, 2.0, 2.0]]).unwrap(),
        );
        assert_eq!(c, 5.0);
    }

    #[test]
    fn cost_matrix_validation() {
        assert!(CostMatrix::new(Array2::zeros((2, 3))).is_err());
        assert!(CostMatrix::from_rows(&[vec![f64::NAN]]).is_err());
    }

    #[test]
    fn rectangular_assignment() {
        let score = array![[0.0, 5.0, 1.0], [3.0, 4.0, 0.0]];
        let mut pairs = max_score_assignment(score.view());
        pairs.sort_unstable();
        assert_eq!(pairs, vec![(0, 1), (1, 0)]);
    }

    #[test]
    fn uniform_logits_cross_entropy() {
        let logits = Array2::zeros((4, 7));
        let (v, _) = powerset_cross_entropy(&[0, 3, 6, 2], logits.view()).unwrap();
        assert!((v - 7f64.ln()).abs() < 1e-12);
        assert!(powerset_cross_entropy(&[7, 0, 0, 0], logits.view()).is_err());
    }

    #[test]
    fn saturated_logits_cross_entropy() {
        let mut logits = Array2::zeros((3, 7));
        for (t, c) in [1usize, 4, 0].into_iter().enumerate() {
            logits[[t, c]] = 20.0;
        }
        let (v, _) = powerset_cross_entropy(&[1, 4, 0], logits.view()).unwrap();
        // With 7 classes a +20 margin leaves ln(1 + 6e-20) ~ 1.24e-8; a
        // +25 margin is needed to get below 1e-8.
        assert!((v - (6.0 * (-20f64).exp()).ln_1p()).abs() < 1e-15);
        logits.mapv_inplace(|x| x * 1.25);
        let (v, _) = powerset_cross_entropy(&[1, 4, 0], logits.view()).unwrap();
        assert!(v < 1e-8);
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(array![1.0, 3.0, 3.0].view()), 1);
        assert_eq!(argmax(array![0.0, 0.0].view()), 0);
    }

    #[test]
    fn powerset_alignment_under_swap() {
        let codec = PowersetCodec::new(3, 2).unwrap();
        let mut logits = Array2::zeros((2, 7));
        logits[[0, 2]] = 20.0;
        logits[[1, 4]] = 20.0;
        let (aligned, perm) = powerset_pit_align(&codec, &[1, 4], logits.view()).unwrap();
        assert_eq!(aligned, vec![2, 4]);
        // speaker 2 is silent in both, so only the 0<->1 part is pinned down
        assert_eq!(perm.apply(0), 1);
        assert_eq!(perm.apply(1), 0);
        let swap = SpeakerPermutation::swap(3, 0, 1).unwrap();
        let induced = codec.induced_class_permutation(&swap).unwrap();
        assert_eq!([induced[1], induced[4]], [2, 4]);
    }
}
