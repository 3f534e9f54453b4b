//! Manual reverse pass for the joint objective.
//!
//! The forward chain per batch member is raw tokens -> projection ->
//! row normalization -> weighted correlation -> hinge terms, with the
//! compactness term branching off before normalization (clustering lives
//! in plain projected space). The backward pass retraces it exactly:
//! hinge gates are 0 or 1 (0 at the kink), maxima route gradients through
//! the recorded argmax indices, the per-dimension weights act as
//! constants, and the compactness term differentiates only through the
//! live tokens, never the frozen centers or probabilities. `batch_loss`
//! is the matching pure forward evaluation used by the finite-difference
//! oracle.

use std::collections::HashMap;

use crate::embeddings::{normalize_rows, project, EmbeddingSet, ProjectionHead};
use crate::error::{Error, Result};
use crate::interaction::{aggregate_score, correlation_of_weighted, CorrelationMatrix};
use crate::mat::Mat;

use super::loss::{clustering_loss_term, total_loss};
use super::negatives::BatchNegatives;

/// Frozen clustering state the compactness term measures against: the
/// previous epoch's raw cluster centers, the column-to-cluster assignment
/// per instance, and the per-column style weights. None of it receives
/// gradient.
#[derive(Debug, Clone)]
pub struct CompactnessSnapshot {
    /// Cluster centers per modality, K x token-count.
    pub centers_image: Mat,
    pub centers_text: Mat,
    /// Pseudo style probability per model-space column, length D.
    pub style_image: Vec<f64>,
    pub style_text: Vec<f64>,
    /// Column-to-cluster assignment, indexed by instance id then column.
    pub assignment_image: Vec<Vec<usize>>,
    pub assignment_text: Vec<Vec<usize>>,
}

/// Everything pinned for one gradient step: raw batch members, their
/// per-dimension semantic weights, the frozen compactness state, and the
/// loss hyper-parameters. The heads stay outside so the same context can
/// be re-evaluated at perturbed weights.
pub struct BatchContext<'a> {
    pub images: Vec<&'a EmbeddingSet>,
    pub texts: Vec<&'a EmbeddingSet>,
    /// Per-dimension semantic weights per batch member, length D each.
    pub weights_image: Vec<Vec<f64>>,
    pub weights_text: Vec<Vec<f64>>,
    pub compactness: Option<&'a CompactnessSnapshot>,
    pub alpha: f64,
    pub omega_c: f64,
    pub epoch: usize,
    pub j0: usize,
    pub normalize: bool,
}

impl<'a> BatchContext<'a> {
    pub fn batch_size(&self) -> usize {
        self.images.len()
    }
}

/// Loss values and head gradients for one batch.
#[derive(Debug, Clone)]
pub struct BatchEval {
    pub loss: f64,
    pub l_x: f64,
    pub l_c: f64,
    /// d loss / d image head weight, D_raw x D.
    pub grad_image: Mat,
    pub grad_text: Mat,
}

/// One batch member pushed through the current head.
struct Projected {
    /// Model-space tokens: normalized when normalization is on.
    tokens: Mat,
    /// Projected tokens before any normalization; the clustering and the
    /// compactness term live in this space.
    raw_tokens: Mat,
    /// Pre-normalization row norms and degeneracy flags, when it ran.
    norms: Option<(Vec<f64>, Vec<bool>)>,
    /// Tokens scaled per-dimension by the member's semantic weights.
    weighted: Mat,
}

struct Forward {
    images: Vec<Projected>,
    texts: Vec<Projected>,
    /// Score and correlation per evaluated (image, text) batch pair.
    pairs: HashMap<(usize, usize), (f64, CorrelationMatrix)>,
    l_x: f64,
    l_c: f64,
    loss: f64,
}

fn validate(ctx: &BatchContext<'_>, negatives: &BatchNegatives) -> Result<()> {
    let b = ctx.images.len();
    if b < 2 {
        return Err(Error::Shape(format!("a batch needs at least two pairs, got {b}")));
    }
    if ctx.texts.len() != b
        || ctx.weights_image.len() != b
        || ctx.weights_text.len() != b
        || negatives.text.len() != b
        || negatives.image.len() != b
    {
        return Err(Error::Shape("batch members, weights and negatives must align".into()));
    }
    if ctx.compactness.is_some() && ctx.epoch < ctx.j0 {
        return Err(Error::Config(format!(
            "compactness snapshot supplied at epoch {} before schedule start {}",
            ctx.epoch, ctx.j0
        )));
    }
    Ok(())
}

fn project_member(
    set: &EmbeddingSet,
    head: &ProjectionHead,
    weights: &[f64],
    normalize: bool,
) -> Result<Projected> {
    let projected = project(set, head)?;
    if weights.len() != projected.dim() {
        return Err(Error::Shape(format!(
            "{} semantic weights for dimension {}",
            weights.len(),
            projected.dim()
        )));
    }
    let raw_tokens = projected.tokens;
    let (tokens, norms) = if normalize {
        let (tokens, norms, degenerate_idx) = normalize_rows(&raw_tokens);
        let mut degenerate = vec![false; tokens.rows()];
        for i in degenerate_idx {
            degenerate[i] = true;
        }
        (tokens, Some((norms, degenerate)))
    } else {
        (raw_tokens.clone(), None)
    };
    let weighted = crate::interaction::weight_tokens(&tokens, weights);
    Ok(Projected { tokens, raw_tokens, norms, weighted })
}

fn forward(
    ctx: &BatchContext<'_>,
    head_image: &ProjectionHead,
    head_text: &ProjectionHead,
    negatives: &BatchNegatives,
) -> Result<Forward> {
    validate(ctx, negatives)?;
    let b = ctx.batch_size();
    let images: Vec<Projected> = ctx
        .images
        .iter()
        .zip(&ctx.weights_image)
        .map(|(set, w)| project_member(set, head_image, w, ctx.normalize))
        .collect::<Result<_>>()?;
    let texts: Vec<Projected> = ctx
        .texts
        .iter()
        .zip(&ctx.weights_text)
        .map(|(set, w)| project_member(set, head_text, w, ctx.normalize))
        .collect::<Result<_>>()?;

    let mut pairs: HashMap<(usize, usize), (f64, CorrelationMatrix)> = HashMap::new();
    {
        let mut need = |a: usize, bb: usize| -> Result<()> {
            if !pairs.contains_key(&(a, bb)) {
                let corr = correlation_of_weighted(&images[a].weighted, &texts[bb].weighted)?;
                pairs.insert((a, bb), (aggregate_score(&corr), corr));
            }
            Ok(())
        };
        for anchor in 0..b {
            need(anchor, anchor)?;
            need(anchor, negatives.text[anchor])?;
            need(negatives.image[anchor], anchor)?;
        }
    }

    let mut l_x = 0.0;
    for anchor in 0..b {
        let s_pos = pairs[&(anchor, anchor)].0;
        let s_neg_text = pairs[&(anchor, negatives.text[anchor])].0;
        let s_neg_image = pairs[&(negatives.image[anchor], anchor)].0;
        l_x += super::loss::triplet_loss(s_pos, s_neg_text, s_neg_image, ctx.alpha);
    }

    let mut l_c = 0.0;
    if let Some(snap) = ctx.compactness {
        for (member, set) in images.iter().zip(&ctx.images) {
            let assignment = snap.assignment_image.get(set.instance_id).ok_or_else(|| {
                Error::Shape(format!("no frozen assignment for image instance {}", set.instance_id))
            })?;
            l_c += clustering_loss_term(
                &member.raw_tokens,
                assignment,
                &snap.centers_image,
                &snap.style_image,
            )?;
        }
        for (member, set) in texts.iter().zip(&ctx.texts) {
            let assignment = snap.assignment_text.get(set.instance_id).ok_or_else(|| {
                Error::Shape(format!("no frozen assignment for text instance {}", set.instance_id))
            })?;
            l_c += clustering_loss_term(
                &member.raw_tokens,
                assignment,
                &snap.centers_text,
                &snap.style_text,
            )?;
        }
    }

    let loss = total_loss(l_x, l_c, ctx.omega_c, ctx.epoch, ctx.j0);
    Ok(Forward { images, texts, pairs, l_x, l_c, loss })
}

/// Pure loss evaluation for the batch: (joint loss, triplet part,
/// compactness part). This is the function the finite-difference oracle
/// probes.
pub fn batch_loss(
    ctx: &BatchContext<'_>,
    head_image: &ProjectionHead,
    head_text: &ProjectionHead,
    negatives: &BatchNegatives,
) -> Result<(f64, f64, f64)> {
    let fwd = forward(ctx, head_image, head_text, negatives)?;
    Ok((fwd.loss, fwd.l_x, fwd.l_c))
}

/// Add the gradient of `coef * S(image a, text b)` with respect to both
/// members' model-space tokens. The aggregate averages a row-max sum over
/// image tokens and a column-max sum over text tokens; each recorded
/// argmax routes its term to exactly one token on the other side.
fn accumulate_score_grad(
    coef: f64,
    image: &Projected,
    text: &Projected,
    weights_image: &[f64],
    weights_text: &[f64],
    corr: &CorrelationMatrix,
    grad_image_tokens: &mut Mat,
    grad_text_tokens: &mut Mat,
) {
    let n_v = corr.n_v();
    let n_t = corr.n_t();
    let inv_nv = 1.0 / n_v as f64;
    let inv_nt = 1.0 / n_t as f64;
    for r in 0..n_v {
        let j = corr.argmax_rows[r];
        let tw = text.weighted.row(j);
        let vw = image.weighted.row(r);
        for d in 0..weights_image.len() {
            grad_image_tokens.add_at(r, d, coef * inv_nv * weights_image[d] * tw[d]);
            grad_text_tokens.add_at(j, d, coef * inv_nv * weights_text[d] * vw[d]);
        }
    }
    for c in 0..n_t {
        let i = corr.argmax_cols[c];
        let vw = image.weighted.row(i);
        let tw = text.weighted.row(c);
        for d in 0..weights_image.len() {
            grad_text_tokens.add_at(c, d, coef * inv_nt * weights_text[d] * vw[d]);
            grad_image_tokens.add_at(i, d, coef * inv_nt * weights_image[d] * tw[d]);
        }
    }
}

/// Pull a token gradient back through row normalization, then through the
/// projection into the head weight. Degenerate rows passed through the
/// normalization unchanged, so their gradient does too.
fn accumulate_head_grad(
    raw: &EmbeddingSet,
    member: &Projected,
    grad_tokens: &Mat,
    grad_head: &mut Mat,
) {
    let d = grad_tokens.cols();
    let mut grad_row = vec![0.0; d];
    for r in 0..grad_tokens.rows() {
        let g = grad_tokens.row(r);
        match &member.norms {
            Some((norms, degenerate)) if !degenerate[r] => {
                let v = member.tokens.row(r);
                let dot: f64 = g.iter().zip(v).map(|(a, b)| a * b).sum();
                for ((out, &gi), &vi) in grad_row.iter_mut().zip(g).zip(v) {
                    *out = (gi - dot * vi) / norms[r];
                }
            }
            _ => grad_row.copy_from_slice(g),
        }
        let x = raw.tokens.row(r);
        for (a, &xa) in x.iter().enumerate() {
            if xa != 0.0 {
                for (dd, &gr) in grad_row.iter().enumerate() {
                    grad_head.add_at(a, dd, xa * gr);
                }
            }
        }
    }
}

fn compactness_grad(
    omega_c: f64,
    members: &[Projected],
    sets: &[&EmbeddingSet],
    assignments: &[Vec<usize>],
    centers: &Mat,
    style: &[f64],
    grad_head: &mut Mat,
) {
    for (member, set) in members.iter().zip(sets) {
        let assignment = &assignments[set.instance_id];
        let tokens = &member.raw_tokens;
        let d = tokens.cols();
        let mut raw_grad = Mat::zeros(tokens.rows(), d);
        for dd in 0..d {
            let center = centers.row(assignment[dd]);
            let scale = omega_c * 2.0 * style[dd];
            for r in 0..tokens.rows() {
                raw_grad.set(r, dd, scale * (tokens.get(r, dd) - center[r]));
            }
        }
        // Plain projection chain: d token / d W is the raw input row.
        for r in 0..tokens.rows() {
            let x = set.tokens.row(r);
            let g = raw_grad.row(r);
            for (a, &xa) in x.iter().enumerate() {
                if xa != 0.0 {
                    for (dd, &gr) in g.iter().enumerate() {
                        grad_head.add_at(a, dd, xa * gr);
                    }
                }
            }
        }
    }
}

/// Forward and backward for one batch: the joint loss and its exact
/// subgradients with respect to both head weights.
pub fn eval_batch(
    ctx: &BatchContext<'_>,
    head_image: &ProjectionHead,
    head_text: &ProjectionHead,
    negatives: &BatchNegatives,
) -> Result<BatchEval> {
    let fwd = forward(ctx, head_image, head_text, negatives)?;
    let b = ctx.batch_size();
    let d = head_image.d_out();

    let mut grad_image_tokens: Vec<Mat> =
        fwd.images.iter().map(|m| Mat::zeros(m.tokens.rows(), d)).collect();
    let mut grad_text_tokens: Vec<Mat> =
        fwd.texts.iter().map(|m| Mat::zeros(m.tokens.rows(), d)).collect();

    for anchor in 0..b {
        let jt = negatives.text[anchor];
        let kv = negatives.image[anchor];
        let s_pos = fwd.pairs[&(anchor, anchor)].0;
        let s_neg_text = fwd.pairs[&(anchor, jt)].0;
        let s_neg_image = fwd.pairs[&(kv, anchor)].0;

        let pair_grad = |a: usize, bb: usize, coef: f64, gi: &mut Vec<Mat>, gt: &mut Vec<Mat>| {
            let (_, corr) = &fwd.pairs[&(a, bb)];
            accumulate_score_grad(
                coef,
                &fwd.images[a],
                &fwd.texts[bb],
                &ctx.weights_image[a],
                &ctx.weights_text[bb],
                corr,
                &mut gi[a],
                &mut gt[bb],
            );
        };
        if ctx.alpha - s_pos + s_neg_text > 0.0 {
            pair_grad(anchor, anchor, -1.0, &mut grad_image_tokens, &mut grad_text_tokens);
            pair_grad(anchor, jt, 1.0, &mut grad_image_tokens, &mut grad_text_tokens);
        }
        if ctx.alpha - s_pos + s_neg_image > 0.0 {
            pair_grad(anchor, anchor, -1.0, &mut grad_image_tokens, &mut grad_text_tokens);
            pair_grad(kv, anchor, 1.0, &mut grad_image_tokens, &mut grad_text_tokens);
        }
    }

    let mut grad_image = Mat::zeros(head_image.d_raw(), d);
    let mut grad_text = Mat::zeros(head_text.d_raw(), d);
    for ((raw, member), grad_tokens) in ctx.images.iter().zip(&fwd.images).zip(&grad_image_tokens)
    {
        accumulate_head_grad(raw, member, grad_tokens, &mut grad_image);
    }
    for ((raw, member), grad_tokens) in ctx.texts.iter().zip(&fwd.texts).zip(&grad_text_tokens) {
        accumulate_head_grad(raw, member, grad_tokens, &mut grad_text);
    }

    // The compactness term reads the pre-normalization tokens, so its
    // gradient skips the normalization Jacobian and chains through the
    // projection alone.
    if let Some(snap) = ctx.compactness {
        compactness_grad(
            ctx.omega_c,
            &fwd.images,
            &ctx.images,
            &snap.assignment_image,
            &snap.centers_image,
            &snap.style_image,
            &mut grad_image,
        );
        compactness_grad(
            ctx.omega_c,
            &fwd.texts,
            &ctx.texts,
            &snap.assignment_text,
            &snap.centers_text,
            &snap.style_text,
            &mut grad_text,
        );
    }
    if !grad_image.all_finite() || !grad_text.all_finite() {
        return Err(Error::Numeric(format!(
            "non-finite gradient at epoch {} (batch of {b})",
            ctx.epoch
        )));
    }
    Ok(BatchEval { loss: fwd.loss, l_x: fwd.l_x, l_c: fwd.l_c, grad_image, grad_text })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embeddings::Modality;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    struct Fixture {
        images: Vec<EmbeddingSet>,
        texts: Vec<EmbeddingSet>,
        weights_image: Vec<Vec<f64>>,
        weights_text: Vec<Vec<f64>>,
        snapshot: CompactnessSnapshot,
        head_image: ProjectionHead,
        head_text: ProjectionHead,
        negatives: BatchNegatives,
    }

    const B: usize = 3;
    const N_V: usize = 3;
    const N_T: usize = 2;
    const D_RAW: usize = 6;
    const D: usize = 4;

    fn mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Mat {
        Mat::from_vec(
            rows,
            cols,
            (0..rows * cols).map(|_| scale * (rng.gen::<f64>() - 0.5)).collect(),
        )
        .unwrap()
    }

    fn weight_vec(rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..D).map(|_| 0.2 + 0.8 * rng.gen::<f64>()).collect()
    }

    fn fixture(seed: u64) -> Fixture {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let images: Vec<EmbeddingSet> = (0..B)
            .map(|id| EmbeddingSet::new(Modality::Image, mat(&mut rng, N_V, D_RAW, 2.0), id))
            .collect();
        let texts: Vec<EmbeddingSet> = (0..B)
            .map(|id| EmbeddingSet::new(Modality::Text, mat(&mut rng, N_T, D_RAW, 2.0), id))
            .collect();
        let head_image = ProjectionHead::new(Modality::Image, mat(&mut rng, D_RAW, D, 1.0));
        let head_text = ProjectionHead::new(Modality::Text, mat(&mut rng, D_RAW, D, 1.0));
        let weights_image: Vec<Vec<f64>> = (0..B).map(|_| weight_vec(&mut rng)).collect();
        let weights_text: Vec<Vec<f64>> = (0..B).map(|_| weight_vec(&mut rng)).collect();
        let snapshot = CompactnessSnapshot {
            centers_image: mat(&mut rng, 2, N_V, 1.0),
            centers_text: mat(&mut rng, 2, N_T, 1.0),
            style_image: (0..D).map(|_| rng.gen::<f64>()).collect(),
            style_text: (0..D).map(|_| rng.gen::<f64>()).collect(),
            assignment_image: (0..B).map(|_| (0..D).map(|_| rng.gen_range(0..2)).collect()).collect(),
            assignment_text: (0..B).map(|_| (0..D).map(|_| rng.gen_range(0..2)).collect()).collect(),
        };
        let negatives = BatchNegatives { text: vec![1, 2, 0], image: vec![2, 0, 1] };
        Fixture {
            images,
            texts,
            weights_image,
            weights_text,
            snapshot,
            head_image,
            head_text,
            negatives,
        }
    }

    fn context<'a>(fx: &'a Fixture, alpha: f64, omega_c: f64, with_snapshot: bool) -> BatchContext<'a> {
        BatchContext {
            images: fx.images.iter().collect(),
            texts: fx.texts.iter().collect(),
            weights_image: fx.weights_image.clone(),
            weights_text: fx.weights_text.clone(),
            compactness: with_snapshot.then_some(&fx.snapshot),
            alpha,
            omega_c,
            epoch: 4,
            j0: 2,
            normalize: true,
        }
    }

    /// Central finite differences against the analytic gradient on the
    /// coordinates with meaningful magnitude; returns how many were
    /// checked per head.
    fn fd_check(ctx: &BatchContext<'_>, fx: &Fixture, min_coords: usize) {
        let eval = eval_batch(ctx, &fx.head_image, &fx.head_text, &fx.negatives).unwrap();
        let (loss, _, _) = batch_loss(ctx, &fx.head_image, &fx.head_text, &fx.negatives).unwrap();
        assert_eq!(eval.loss, loss, "forward paths disagree");
        let h = 1e-4;
        for (label, grad, head, other) in [
            ("image", &eval.grad_image, &fx.head_image, &fx.head_text),
            ("text", &eval.grad_text, &fx.head_text, &fx.head_image),
        ] {
            let mut checked = 0;
            for i in 0..head.weight.rows() {
                for j in 0..head.weight.cols() {
                    let analytic = grad.get(i, j);
                    if analytic.abs() < 1e-3 {
                        continue;
                    }
                    let mut plus = head.clone();
                    plus.weight.add_at(i, j, h);
                    let mut minus = head.clone();
                    minus.weight.add_at(i, j, -h);
                    let (lp, lm) = if label == "image" {
                        (
                            batch_loss(ctx, &plus, other, &fx.negatives).unwrap().0,
                            batch_loss(ctx, &minus, other, &fx.negatives).unwrap().0,
                        )
                    } else {
                        (
                            batch_loss(ctx, other, &plus, &fx.negatives).unwrap().0,
                            batch_loss(ctx, other, &minus, &fx.negatives).unwrap().0,
                        )
                    };
                    let fd = (lp - lm) / (2.0 * h);
                    let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs());
                    assert!(
                        rel <= 1e-4,
                        "{label} head ({i},{j}): analytic {analytic}, fd {fd}, rel {rel}"
                    );
                    checked += 1;
                }
            }
            assert!(checked >= min_coords, "only {checked} {label} coordinates were probed");
        }
    }

    #[test]
    fn finite_differences_confirm_the_full_gradient() {
        let fx = fixture(42);
        // A large margin keeps every hinge strictly active, away from the
        // kink, and the compactness path is on.
        let ctx = context(&fx, 10.0, 0.7, true);
        fd_check(&ctx, &fx, 20);
    }

    #[test]
    fn finite_differences_confirm_the_unnormalized_path() {
        let fx = fixture(43);
        let mut ctx = context(&fx, 10.0, 0.7, true);
        ctx.normalize = false;
        fd_check(&ctx, &fx, 20);
    }

    #[test]
    fn satisfied_margins_and_no_snapshot_give_zero_gradient() {
        let fx = fixture(44);
        // alpha far below any score gap: every hinge clips to zero.
        let ctx = context(&fx, -10.0, 0.7, false);
        let eval = eval_batch(&ctx, &fx.head_image, &fx.head_text, &fx.negatives).unwrap();
        assert_eq!(eval.loss, 0.0);
        assert!(eval.grad_image.as_slice().iter().all(|&g| g == 0.0));
        assert!(eval.grad_text.as_slice().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn doubling_omega_doubles_the_compactness_gradient() {
        let fx = fixture(45);
        // Hinges all inactive, so the gradient is purely the compactness
        // term and must scale exactly with omega_c.
        let single = context(&fx, -10.0, 0.7, true);
        let double = context(&fx, -10.0, 1.4, true);
        let eval1 = eval_batch(&single, &fx.head_image, &fx.head_text, &fx.negatives).unwrap();
        let eval2 = eval_batch(&double, &fx.head_image, &fx.head_text, &fx.negatives).unwrap();
        assert_eq!(eval1.l_x, 0.0);
        assert!(eval1.l_c > 0.0);
        for (g1, g2) in eval1.grad_image.as_slice().iter().zip(eval2.grad_image.as_slice()) {
            assert_eq!(2.0 * g1, *g2);
        }
        for (g1, g2) in eval1.grad_text.as_slice().iter().zip(eval2.grad_text.as_slice()) {
            assert_eq!(2.0 * g1, *g2);
        }
    }

    #[test]
    fn snapshot_before_schedule_start_is_rejected() {
        let fx = fixture(46);
        let mut ctx = context(&fx, 0.2, 0.7, true);
        ctx.epoch = 1;
        assert!(eval_batch(&ctx, &fx.head_image, &fx.head_text, &fx.negatives).is_err());
    }

    #[test]
    fn misaligned_batch_is_rejected() {
        let fx = fixture(47);
        let mut ctx = context(&fx, 0.2, 0.7, false);
        ctx.weights_image.pop();
        assert!(eval_batch(&ctx, &fx.head_image, &fx.head_text, &fx.negatives).is_err());
    }
}
