//! Loss terms: the bidirectional triplet hinge, the frozen-prototype
//! compactness penalty, and their scheduled combination.

use crate::error::{Error, Result};
use crate::mat::Mat;

/// Bidirectional hinge for one anchor pair: a text negative and an image
/// negative each contribute [alpha - s_pos + s_neg]_+.
pub fn triplet_loss(s_pos: f64, s_neg_text: f64, s_neg_image: f64, alpha: f64) -> f64 {
    let text_term = (alpha - s_pos + s_neg_text).max(0.0);
    let image_term = (alpha - s_pos + s_neg_image).max(0.0);
    text_term + image_term
}

/// Compactness of one instance's token matrix against frozen centers:
/// sum_d style[d] * ||column_d - center[assignment[d]]||^2. The centers,
/// assignment and style weights come from the previous epoch's clustering
/// pass and receive no gradient; only the tokens are live.
pub fn clustering_loss_term(
    tokens: &Mat,
    assignment: &[usize],
    centers: &Mat,
    style: &[f64],
) -> Result<f64> {
    if assignment.len() != tokens.cols() || style.len() != tokens.cols() {
        return Err(Error::Shape(format!(
            "{} columns need {} assignments and {} style weights",
            tokens.cols(),
            assignment.len(),
            style.len()
        )));
    }
    if centers.cols() != tokens.rows() {
        return Err(Error::Shape(format!(
            "centers live in R^{}, token columns in R^{}",
            centers.cols(),
            tokens.rows()
        )));
    }
    let mut total = 0.0;
    for d in 0..tokens.cols() {
        let k = assignment[d];
        if k >= centers.rows() {
            return Err(Error::Shape(format!("assignment {k} out of range for column {d}")));
        }
        let center = centers.row(k);
        let mut residual = 0.0;
        for i in 0..tokens.rows() {
            let diff = tokens.get(i, d) - center[i];
            residual += diff * diff;
        }
        total += style[d] * residual;
    }
    Ok(total)
}

/// Joint objective on the epoch schedule: the compactness term only
/// enters once prototype maintenance has started.
pub fn total_loss(l_x: f64, l_c: f64, omega_c: f64, epoch: usize, j0: usize) -> f64 {
    if epoch < j0 {
        l_x
    } else {
        l_x + omega_c * l_c
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn satisfied_margin_gives_zero() {
        assert_eq!(triplet_loss(1.0, 0.0, 0.0, 0.2), 0.0);
    }

    #[test]
    fn hinge_arithmetic() {
        // Text side: 0.2 - 0.8 + 0.7 = 0.1 active; image side: -0.1 clips.
        let loss = triplet_loss(0.8, 0.7, 0.5, 0.2);
        assert!((loss - 0.1).abs() < 1e-15, "loss = {loss}");
    }

    #[test]
    fn equal_scores_give_twice_the_margin() {
        assert_eq!(triplet_loss(0.4, 0.4, 0.4, 0.2), 0.4);
        // Dyadic values keep both hinges exact.
        assert_eq!(triplet_loss(-1.5, -1.5, -1.5, 0.25), 0.5);
    }

    #[test]
    fn tokens_at_centers_cost_nothing() {
        let tokens = Mat::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        // Each column equals its assigned center exactly.
        let centers = Mat::from_rows(&[vec![1.0, 3.0], vec![2.0, 4.0]]);
        let loss = clustering_loss_term(&tokens, &[0, 1], &centers, &[0.7, 0.9]).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn single_column_residual() {
        // One token, column value 1, center 0, style weight 0.5.
        let tokens = Mat::from_rows(&[vec![1.0]]);
        let centers = Mat::from_rows(&[vec![0.0]]);
        let loss = clustering_loss_term(&tokens, &[0], &centers, &[0.5]).unwrap();
        assert_eq!(loss, 0.5);
    }

    #[test]
    fn compactness_shape_errors() {
        let tokens = Mat::from_rows(&[vec![1.0, 2.0]]);
        let centers = Mat::from_rows(&[vec![0.0]]);
        assert!(clustering_loss_term(&tokens, &[0], &centers, &[0.5, 0.5]).is_err());
        assert!(clustering_loss_term(&tokens, &[0, 9], &centers, &[0.5, 0.5]).is_err());
        let wide_centers = Mat::from_rows(&[vec![0.0, 0.0]]);
        assert!(clustering_loss_term(&tokens, &[0, 0], &wide_centers, &[0.5, 0.5]).is_err());
    }

    #[test]
    fn schedule_gates_the_compactness_term() {
        assert_eq!(total_loss(1.0, 0.2, 5.0, 0, 2), 1.0);
        assert_eq!(total_loss(1.0, 0.2, 5.0, 1, 2), 1.0);
        assert_eq!(total_loss(1.0, 0.2, 5.0, 2, 2), 2.0);
        assert_eq!(total_loss(1.0, 0.0, 5.0, 9, 2), 1.0);
    }

    proptest! {
        #[test]
        fn triplet_loss_is_nonnegative(
            s_pos in -2.0f64..2.0,
            s_nt in -2.0f64..2.0,
            s_ni in -2.0f64..2.0,
            alpha in 0.01f64..1.0,
        ) {
            prop_assert!(triplet_loss(s_pos, s_nt, s_ni, alpha) >= 0.0);
        }

        #[test]
        fn compactness_is_nonnegative(
            values in proptest::collection::vec(-3.0f64..3.0, 6),
            center in proptest::collection::vec(-3.0f64..3.0, 2),
            style in proptest::collection::vec(0.0f64..1.0, 3),
        ) {
            let tokens = Mat::from_vec(2, 3, values).unwrap();
            let centers = Mat::from_vec(1, 2, center).unwrap();
            let loss = clustering_loss_term(&tokens, &[0, 0, 0], &centers, &style).unwrap();
            prop_assert!(loss >= 0.0);
        }
    }
}
