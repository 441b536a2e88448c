//! Training objectives: next-item cross-entropy, masked code modeling and the
//! symmetric sequence alignment loss. All three score pairs by cosine
//! similarity divided by a temperature.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{l2_norm, Matrix};

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("temperature must be positive, got {tau}")))
    }
}

fn check_rows<T: Scalar>(m: &Matrix<T>) -> Result<()> {
    if (0..m.rows()).any(|r| l2_norm(m.row(r)) == T::zero()) {
        Err(Error::DegenerateRep)
    } else {
        Ok(())
    }
}

/// `rows(a) × rows(b)` matrix of cosine similarities divided by `tau`.
fn cosine_logits<T: Scalar>(g: &mut Graph<T>, a: Var, b: Var, tau: f64) -> Result<Var> {
    check_rows(g.value(a))?;
    check_rows(g.value(b))?;
    let an = g.normalize_rows(a);
    let bn = g.normalize_rows(b);
    let sims = g.matmul_t(an, bn);
    Ok(g.scale(sims, T::of(1.0 / tau)))
}

/// Mean cross-entropy of each user row against its target among
/// `candidates`. Every candidate other than the target acts as a negative.
pub fn ce_loss<T: Scalar>(g: &mut Graph<T>, users: Var, candidates: Var, targets: Vec<usize>, tau: f64) -> Result<Var> {
    check_tau(tau)?;
    let n = targets.len();
    if n == 0 {
        return Err(Error::InvalidArgument("cross-entropy over zero rows".into()));
    }
    let logits = cosine_logits(g, users, candidates, tau)?;
    let sum = g.softmax_cross_entropy(logits, targets);
    Ok(g.scale(sum, T::of(1.0 / n as f64)))
}

/// Masked code prediction. Row `i` of `states` is the final code state at
/// table position `positions[i]`, scored against the `C` real embeddings of
/// that table inside the stacked `tables` parameter (`n_c*(C+1) × d`).
/// Returns the mean over rows, or `None` when nothing is masked.
pub fn mcm_loss<T: Scalar>(
    g: &mut Graph<T>,
    states: Var,
    tables: Var,
    positions: &[usize],
    true_codes: &[u32],
    codebook_size: usize,
    tau: f64,
) -> Result<Option<Var>> {
    check_tau(tau)?;
    assert_eq!(positions.len(), true_codes.len(), "one code per masked row");
    assert_eq!(g.value(states).rows(), positions.len(), "one state per masked row");
    if positions.is_empty() {
        return Ok(None);
    }
    let n_positions = g.value(tables).rows() / (codebook_size + 1);
    let mut by_position: Vec<Vec<usize>> = vec![Vec::new(); n_positions];
    for (i, &p) in positions.iter().enumerate() {
        by_position[p].push(i);
    }
    let mut terms = Vec::new();
    for (p, rows) in by_position.iter().enumerate().filter(|(_, r)| !r.is_empty()) {
        let table_rows = (0..codebook_size).map(|c| p * (codebook_size + 1) + c).collect();
        let codes = g.gather(tables, table_rows);
        let picked = g.gather(states, rows.clone());
        let logits = cosine_logits(g, picked, codes, tau)?;
        let targets = rows.iter().map(|&i| true_codes[i] as usize).collect();
        terms.push((g.softmax_cross_entropy(logits, targets), T::of(1.0 / positions.len() as f64)));
    }
    Ok(Some(g.weighted_sum(&terms)))
}

/// Symmetric InfoNCE between paired rows of `r` and `r_aug`. Each direction
/// uses every row of the other batch, the positive included, as the
/// denominator.
pub fn msa_loss<T: Scalar>(g: &mut Graph<T>, r: Var, r_aug: Var, tau: f64) -> Result<Var> {
    check_tau(tau)?;
    let b = g.value(r).rows();
    if b < 2 {
        return Err(Error::BatchTooSmall(b));
    }
    assert_eq!(g.value(r_aug).rows(), b, "paired batches");
    let targets: Vec<usize> = (0..b).collect();
    let aug_to_orig = cosine_logits(g, r_aug, r, tau)?;
    let orig_to_aug = cosine_logits(g, r, r_aug, tau)?;
    let first = g.softmax_cross_entropy(aug_to_orig, targets.clone());
    let second = g.softmax_cross_entropy(orig_to_aug, targets);
    let half_mean = T::of(0.5 / b as f64);
    Ok(g.weighted_sum(&[(first, half_mean), (second, half_mean)]))
}

/// `L = CE + α·MCM + β·MSA`.
pub fn loss_total<T: Scalar>(ce: T, mcm: T, msa: T, alpha: T, beta: T) -> T {
    ce + alpha * mcm + beta * msa
}

/// Cross-entropy of one user vector against its target and negatives.
pub fn loss_ce<T: Scalar>(r: &[T], target: &[T], negatives: &[Vec<T>], tau: f64) -> Result<T> {
    let mut g = Graph::new();
    let user = g.constant(Matrix::from_rows(&[r]));
    let mut rows = vec![target.to_vec()];
    rows.extend(negatives.iter().cloned());
    let cands = g.constant(Matrix::from_rows(&rows));
    let loss = ce_loss(&mut g, user, cands, vec![0], tau)?;
    Ok(g.scalar(loss))
}

/// Masked code loss for precomputed states; see [`mcm_loss`].
pub fn loss_mcm<T: Scalar>(
    states: &Matrix<T>,
    tables: &Matrix<T>,
    positions: &[usize],
    true_codes: &[u32],
    codebook_size: usize,
    tau: f64,
) -> Result<T> {
    let mut g = Graph::new();
    let s = g.constant(states.clone());
    let t = g.constant(tables.clone());
    Ok(mcm_loss(&mut g, s, t, positions, true_codes, codebook_size, tau)?
        .map_or(T::zero(), |v| g.scalar(v)))
}

/// Alignment loss for precomputed user vectors; see [`msa_loss`].
pub fn loss_msa<T: Scalar>(r: &Matrix<T>, r_aug: &Matrix<T>, tau: f64) -> Result<T> {
    let mut g = Graph::new();
    let a = g.constant(r.clone());
    let b = g.constant(r_aug.clone());
    let loss = msa_loss(&mut g, a, b, tau)?;
    Ok(g.scalar(loss))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ce_closed_forms() {
        let n = 5;
        let negs: Vec<Vec<f64>> = (0..n - 1).map(|_| vec![-1.0, 0.0]).collect();
        let l = loss_ce(&[1.0, 0.0], &[2.0, 0.0], &negs, 1.0).unwrap();
        let e = std::f64::consts::E;
        let expect = -(e / (e + (n - 1) as f64 / e)).ln();
        assert!((l - expect).abs() < 1e-12);

        let same: Vec<Vec<f64>> = (0..n - 1).map(|_| vec![0.0, 3.0]).collect();
        let l = loss_ce(&[1.0, 1.0], &[0.0, 1.0], &same, 0.3).unwrap();
        assert!((l - (n as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn zero_vector_is_degenerate() {
        let err = loss_ce(&[0.0, 0.0], &[1.0, 0.0], &[vec![0.0, 1.0]], 1.0).unwrap_err();
        assert!(matches!(err, Error::DegenerateRep));
        assert!(matches!(
            loss_ce(&[1.0], &[1.0], &[], 0.0),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn mcm_closed_form_and_single_class() {
        let tau = 0.07;
        // One position, C = 3: codes along the axes, state on code 1.
        let tables = Matrix::from_rows(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [5.0, 5.0, 5.0]]);
        let state = Matrix::from_rows(&[[0.0, 2.0, 0.0]]);
        let l = loss_mcm(&state, &tables, &[0], &[1], 3, tau).unwrap();
        let a = (1.0 / tau).exp();
        assert!((l - (-(a / (a + 2.0)).ln())).abs() < 1e-9);

        let tables = Matrix::from_rows(&[[1.0, 0.5], [9.0, 9.0]]);
        let state = Matrix::from_rows(&[[0.3, -1.0]]);
        assert_eq!(loss_mcm(&state, &tables, &[0], &[0], 1, tau).unwrap(), 0.0);
        assert_eq!(loss_mcm(&Matrix::zeros(0, 2), &tables, &[], &[], 1, tau).unwrap(), 0.0);
    }

    #[test]
    fn msa_closed_form_and_small_batch() {
        let r: Matrix<f64> = Matrix::identity(4);
        let l = loss_msa(&r, &r, 1.0).unwrap();
        let e = std::f64::consts::E;
        assert!((l - (-(e / (e + 3.0)).ln())).abs() < 1e-12);
        let one = Matrix::from_rows(&[[1.0, 0.0]]);
        assert!(matches!(loss_msa(&one, &one, 1.0), Err(Error::BatchTooSmall(1))));
    }

    #[test]
    fn total_is_weighted_sum() {
        assert!((loss_total(1.0, 2.0, 3.0, 0.4, 0.2) - 2.4f64).abs() < 1e-15);
        assert_eq!(loss_total(1.2345f64, 9.0, 7.0, 0.0, 0.0).to_bits(), 1.2345f64.to_bits());
    }
}
