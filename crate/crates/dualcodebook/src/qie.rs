//! Quantized information exchange (QIE): the bridge between the two
//! codebooks.
//!
//! One direction of the exchange takes the distinct codes selected on the
//! source side, re-targets them through a small MLP into the target
//! codebook's space, snaps each re-targeted vector to its nearest target
//! code, and blends the pair with an adaptive cosine weight. Two losses keep
//! the exchange useful: an *internal* term that spreads the re-targeted
//! vectors apart, and an *external* term that pulls each one toward its
//! matched target code.

use crate::autodiff::{Tape, Tensor, Var};
use crate::codebook::nearest_code;
use crate::error::{Error, Result};

/// Tape handles for the three linear layers of a re-targeting MLP
/// (`R -> 2R -> 2R -> R`, relu between layers).
#[derive(Debug, Clone, Copy)]
pub struct RetargetVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub w3: Var,
    pub b3: Var,
}

/// Everything produced by one direction of the exchange.
#[derive(Debug)]
pub struct ExchangeOutcome {
    /// Distinct source-code indices, first occurrence order.
    pub dedup_indices: Vec<usize>,
    /// Nearest target-code index for each re-targeted vector.
    pub target_indices: Vec<usize>,
    /// Re-targeted vectors, `T x R`.
    pub retargeted: Var,
    /// Matched target codes, `T x R`.
    pub matched: Var,
    /// Merged vectors, one `1 x R` row per deduplicated code.
    pub merged: Vec<Var>,
    /// Internal spread loss over the re-targeted vectors.
    pub internal: Var,
    /// External alignment loss between re-targeted vectors and their codes.
    pub external: Var,
    /// `internal + external`.
    pub loss: Var,
}

/// Keeps the first occurrence of every distinct code index, preserving
/// order. Deduplicating quantized codes by index is exact: equal indices mean
/// bit-identical code vectors.
pub fn deduplicate(indices: &[usize]) -> Result<Vec<usize>> {
    if indices.is_empty() {
        return Err(Error::data("deduplicate of an empty index set".to_string()));
    }
    let mut seen = std::collections::BTreeSet::new();
    let mut out = Vec::new();
    for &i in indices {
        if seen.insert(i) {
            out.push(i);
        }
    }
    Ok(out)
}

/// Applies the cascading re-targeting MLP to each row of `x` (`T x R`):
/// `relu(x W1 + b1) -> relu(.. W2 + b2) -> .. W3 + b3`.
pub fn retarget(tape: &mut Tape, x: Var, mlp: &RetargetVars) -> Result<Var> {
    let h1 = tape.matmul(x, mlp.w1)?;
    let h1 = tape.add_row(h1, mlp.b1)?;
    let h1 = tape.relu(h1);
    let h2 = tape.matmul(h1, mlp.w2)?;
    let h2 = tape.add_row(h2, mlp.b2)?;
    let h2 = tape.relu(h2);
    let h3 = tape.matmul(h2, mlp.w3)?;
    tape.add_row(h3, mlp.b3)
}

/// Cosine similarity of two vectors; the value-level twin of the tape route
/// built by [`merge`]. Zero when either vector has zero norm.
pub fn cosine_alpha(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na * nb)
}

/// Blends a re-targeted vector `z_r` with its matched code `z_s` (both
/// `1 x R`) using the unclamped cosine weight
/// `alpha = (z_r . z_s) / (|z_r| |z_s|)`:
///
/// `z_res = alpha * z_r + (1 - alpha) * z_s`
///
/// When either norm is zero the weight is defined as zero, so the result is
/// `z_s` itself. Returns the merged row and the alpha node (absent on the
/// zero-norm branch).
pub fn merge(tape: &mut Tape, z_r: Var, z_s: Var) -> Result<(Var, Option<Var>)> {
    for (v, what) in [(z_r, "z_r"), (z_s, "z_s")] {
        let t = tape.value(v);
        if !t.is_matrix() || t.rows() != 1 {
            return Err(Error::shape(format!(
                "merge expects 1 x R rows, {what} has shape {:?}",
                t.shape()
            )));
        }
    }
    if tape.value(z_r).cols() != tape.value(z_s).cols() {
        return Err(Error::shape(format!(
            "merge widths disagree: {:?} vs {:?}",
            tape.value(z_r).shape(),
            tape.value(z_s).shape()
        )));
    }
    let zero_norm = |t: &Tensor| t.row(0).iter().all(|&v| v == 0.0);
    if zero_norm(tape.value(z_r)) || zero_norm(tape.value(z_s)) {
        return Ok((z_s, None));
    }
    let prod = tape.mul(z_r, z_s)?;
    let dot = tape.sum_all(prod);
    let na = tape.l2_norm_rows(z_r)?;
    let nb = tape.l2_norm_rows(z_s)?;
    let norms = tape.mul(na, nb)?;
    let alpha = tape.div(dot, norms)?;
    let left = tape.mul_scalar(z_r, alpha)?;
    let neg = tape.scale(alpha, -1.0);
    let one_minus = tape.add_const(neg, 1.0);
    let right = tape.mul_scalar(z_s, one_minus)?;
    let merged = tape.add(left, right)?;
    Ok((merged, Some(alpha)))
}

/// Internal spread loss over `T` re-targeted rows:
/// `(1/T) * sum over ordered pairs i != j of (1 - ||z_i - z_j||)`.
///
/// Zero when `T = 1`; can be negative; bounded above by `T - 1`.
pub fn internal_loss(tape: &mut Tape, z: Var) -> Result<Var> {
    let t = tape.value(z).rows();
    if t == 0 {
        return Err(Error::data("internal_loss over an empty set".to_string()));
    }
    if t == 1 {
        return Ok(tape.leaf(Tensor::scalar(0.0)));
    }
    // Row (i*T + j) of the difference block is z_i - z_j, covering every
    // ordered pair; the diagonal contributes zero to the norm sum.
    let a = tape.repeat_rows(z, t)?;
    let b = tape.tile_rows(z, t)?;
    let d = tape.sub(a, b)?;
    let norms = tape.l2_norm_rows(d)?;
    let total = tape.sum_all(norms);
    let scaled = tape.scale(total, -1.0 / t as f64);
    Ok(tape.add_const(scaled, (t - 1) as f64))
}

/// External alignment loss: mean Euclidean distance between paired rows of
/// `z_r` and `z_s` (both `T x R`).
pub fn external_loss(tape: &mut Tape, z_r: Var, z_s: Var) -> Result<Var> {
    let (ra, rb) = (tape.value(z_r).rows(), tape.value(z_s).rows());
    if ra != rb {
        return Err(Error::data(format!(
            "external_loss counts disagree: {ra} re-targeted vs {rb} matched"
        )));
    }
    if ra == 0 {
        return Err(Error::data("external_loss over empty sets".to_string()));
    }
    let d = tape.sub(z_r, z_s)?;
    let norms = tape.l2_norm_rows(d)?;
    Ok(tape.mean_all(norms))
}

/// One direction of the exchange: deduplicate the source code indices,
/// re-target the corresponding source codes, match each against the target
/// codebook, merge, and assemble the loss pair.
///
/// `source_codebook` and `target_codebook` are the codebook tensors as
/// recorded on the tape, so gradients reach both through the selection and
/// loss paths.
pub fn qie_apply(
    tape: &mut Tape,
    source_indices: &[usize],
    source_codebook: Var,
    target_codebook: Var,
    mlp: &RetargetVars,
) -> Result<ExchangeOutcome> {
    let dedup_indices = deduplicate(source_indices)?;
    let source_rows = tape.select_rows(source_codebook, &dedup_indices)?;
    let retargeted = retarget(tape, source_rows, mlp)?;

    let target_values = tape.value(target_codebook).clone();
    let target_indices: Vec<usize> = (0..dedup_indices.len())
        .map(|t| nearest_code(tape.value(retargeted).row(t), &target_values))
        .collect();
    let matched = tape.select_rows(target_codebook, &target_indices)?;

    let mut merged = Vec::with_capacity(dedup_indices.len());
    for t in 0..dedup_indices.len() {
        let zr_row = tape.select_rows(retargeted, &[t])?;
        let zs_row = tape.select_rows(matched, &[t])?;
        let (m, _alpha) = merge(tape, zr_row, zs_row)?;
        merged.push(m);
    }

    let internal = internal_loss(tape, retargeted)?;
    let external = external_loss(tape, retargeted, matched)?;
    let loss = tape.add(internal, external)?;
    Ok(ExchangeOutcome {
        dedup_indices,
        target_indices,
        retargeted,
        matched,
        merged,
        internal,
        external,
        loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_diff_check, FdPlan};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap()
    }

    /// Registers a random `R -> 2R -> 2R -> R` MLP on the tape and returns
    /// both the handles and the underlying tensors.
    fn rand_mlp(tape: &mut Tape, r: usize, rng: &mut ChaCha8Rng) -> (RetargetVars, Vec<Tensor>) {
        let tensors = vec![
            rand_matrix(rng, r, 2 * r),
            rand_matrix(rng, 1, 2 * r),
            rand_matrix(rng, 2 * r, 2 * r),
            rand_matrix(rng, 1, 2 * r),
            rand_matrix(rng, 2 * r, r),
            rand_matrix(rng, 1, r),
        ];
        let v: Vec<Var> = tensors.iter().map(|t| tape.param(t.clone())).collect();
        (RetargetVars { w1: v[0], b1: v[1], w2: v[2], b2: v[3], w3: v[4], b3: v[5] }, tensors)
    }

    #[test]
    fn deduplicate_keeps_first_occurrences_in_order() {
        assert_eq!(deduplicate(&[3, 1, 3, 2]).unwrap(), vec![3, 1, 2]);
        let once = deduplicate(&[5, 5, 5]).unwrap();
        assert_eq!(once, vec![5]);
        assert_eq!(deduplicate(&once).unwrap(), once, "idempotent");
        assert!(deduplicate(&[]).is_err());
    }

    #[test]
    fn retarget_with_zero_weights_maps_everything_to_zero() {
        let mut tape = Tape::new();
        let r = 4;
        let zeros = |rows, cols| Tensor::zeros(vec![rows, cols]);
        let mlp = RetargetVars {
            w1: tape.param(zeros(r, 2 * r)),
            b1: tape.param(zeros(1, 2 * r)),
            w2: tape.param(zeros(2 * r, 2 * r)),
            b2: tape.param(zeros(1, 2 * r)),
            w3: tape.param(zeros(2 * r, r)),
            b3: tape.param(zeros(1, r)),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = tape.leaf(rand_matrix(&mut rng, 3, r));
        let y = retarget(&mut tape, x, &mlp).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn retarget_with_only_final_bias_outputs_that_bias() {
        let mut tape = Tape::new();
        let r = 3;
        let bias = Tensor::matrix(1, r, vec![0.5, -1.0, 2.0]).unwrap();
        let mlp = RetargetVars {
            w1: tape.param(Tensor::zeros(vec![r, 2 * r])),
            b1: tape.param(Tensor::zeros(vec![1, 2 * r])),
            w2: tape.param(Tensor::zeros(vec![2 * r, 2 * r])),
            b2: tape.param(Tensor::zeros(vec![1, 2 * r])),
            w3: tape.param(Tensor::zeros(vec![2 * r, r])),
            b3: tape.param(bias.clone()),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = tape.leaf(rand_matrix(&mut rng, 4, r));
        let y = retarget(&mut tape, x, &mlp).unwrap();
        for row in 0..4 {
            assert_eq!(tape.value(y).row(row), bias.row(0));
        }
    }

    #[test]
    fn retarget_gradients_match_finite_differences() {
        let r = 3;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0 = rand_matrix(&mut rng, 2, r);
        let mut seed_tape = Tape::new();
        let (_, tensors) = rand_mlp(&mut seed_tape, r, &mut rng);

        let eval = |ps: &[Tensor]| -> (f64, Vec<Tensor>) {
            let mut tape = Tape::new();
            let vars: Vec<Var> = ps.iter().map(|t| tape.param(t.clone())).collect();
            let mlp = RetargetVars {
                w1: vars[0], b1: vars[1], w2: vars[2], b2: vars[3], w3: vars[4], b3: vars[5],
            };
            let x = tape.leaf(x0.clone());
            let y = retarget(&mut tape, x, &mlp).unwrap();
            let sq = tape.mul(y, y).unwrap();
            let loss = tape.mean_all(sq);
            tape.backward(loss).unwrap();
            let grads = vars.iter().map(|&v| tape.grad_tensor(v)).collect();
            (tape.value(loss).scalar_value().unwrap(), grads)
        };
        let (_, analytic) = eval(&tensors);
        let report = finite_diff_check(
            |ps| Ok(eval(ps).0),
            &tensors,
            &analytic,
            1e-5,
            &FdPlan::All,
        )
        .unwrap();
        assert!(report.passes(1e-4), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn merge_matches_the_worked_example() {
        // z_r = (1, 0), z_s = (-1, 0): alpha = -1, so the blend is
        // -1 * z_r + 2 * z_s = (-3, 0).
        let mut tape = Tape::new();
        let zr = tape.leaf(Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap());
        let zs = tape.leaf(Tensor::matrix(1, 2, vec![-1.0, 0.0]).unwrap());
        let (m, alpha) = merge(&mut tape, zr, zs).unwrap();
        assert_eq!(tape.value(alpha.unwrap()).scalar_value().unwrap(), -1.0);
        assert_eq!(tape.value(m).data(), &[-3.0, 0.0]);
    }

    #[test]
    fn merge_of_a_vector_with_itself_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let z = rand_matrix(&mut rng, 1, 5);
            let mut tape = Tape::new();
            let zv = tape.leaf(z.clone());
            let (m, _) = merge(&mut tape, zv, zv).unwrap();
            assert!(tape.value(m).max_abs_diff(&z).unwrap() <= 1e-12);
        }
    }

    #[test]
    fn merge_zero_norm_falls_back_to_the_matched_code() {
        let mut tape = Tape::new();
        let zr = tape.leaf(Tensor::matrix(1, 3, vec![0.0; 3]).unwrap());
        let zs = tape.leaf(Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap());
        let (m, alpha) = merge(&mut tape, zr, zs).unwrap();
        assert!(alpha.is_none());
        assert_eq!(tape.value(m).data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn alpha_is_scale_invariant_and_agrees_with_the_value_route() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let a = rand_matrix(&mut rng, 1, 6);
            let b = rand_matrix(&mut rng, 1, 6);
            let c: f64 = rng.gen_range(0.1..10.0);
            let mut tape = Tape::new();
            let av = tape.leaf(a.clone());
            let bv = tape.leaf(b.clone());
            let (_, alpha) = merge(&mut tape, av, bv).unwrap();
            let alpha = tape.value(alpha.unwrap()).scalar_value().unwrap();
            let direct = cosine_alpha(a.row(0), b.row(0));
            assert!((alpha - direct).abs() <= 1e-12, "tape vs value route");
            let scaled: Vec<f64> = a.row(0).iter().map(|v| v * c).collect();
            let alpha_scaled = cosine_alpha(&scaled, b.row(0));
            assert!((alpha - alpha_scaled).abs() <= 1e-12, "c = {c}");
        }
    }

    #[test]
    fn internal_loss_trivial_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        // T = 1: no pairs.
        let mut tape = Tape::new();
        let single = tape.leaf(rand_matrix(&mut rng, 1, 4));
        let l = internal_loss(&mut tape, single).unwrap();
        assert_eq!(tape.value(l).scalar_value().unwrap(), 0.0);

        // Two identical rows: both ordered pairs contribute 1 - 0.
        let mut tape = Tape::new();
        let row = vec![0.3, -0.8, 0.1];
        let z = tape.leaf(Tensor::matrix(2, 3, [row.clone(), row].concat()).unwrap());
        let l = internal_loss(&mut tape, z).unwrap();
        assert!((tape.value(l).scalar_value().unwrap() - 1.0).abs() < 1e-12);

        // Two rows at unit distance: both terms vanish.
        let mut tape = Tape::new();
        let z = tape.leaf(Tensor::matrix(2, 3, vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap());
        let l = internal_loss(&mut tape, z).unwrap();
        assert!(tape.value(l).scalar_value().unwrap().abs() < 1e-12);
    }

    #[test]
    fn internal_loss_is_bounded_above_by_t_minus_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for t in 2..7 {
            let mut tape = Tape::new();
            let z = tape.leaf(rand_matrix(&mut rng, t, 5));
            let l = internal_loss(&mut tape, z).unwrap();
            let v = tape.value(l).scalar_value().unwrap();
            assert!(v <= (t - 1) as f64 + 1e-12, "T = {t}: {v}");
        }
    }

    #[test]
    fn external_loss_on_equal_sets_is_zero_and_mismatch_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let z = rand_matrix(&mut rng, 4, 5);
        let mut tape = Tape::new();
        let a = tape.leaf(z.clone());
        let b = tape.leaf(z);
        let l = external_loss(&mut tape, a, b).unwrap();
        assert_eq!(tape.value(l).scalar_value().unwrap(), 0.0);

        let c = tape.leaf(rand_matrix(&mut rng, 3, 5));
        assert!(external_loss(&mut tape, a, c).is_err());
    }

    #[test]
    fn external_loss_matches_a_hand_computed_mean() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::matrix(2, 2, vec![0.0, 0.0, 3.0, 4.0]).unwrap());
        let b = tape.leaf(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 0.0]).unwrap());
        let l = external_loss(&mut tape, a, b).unwrap();
        // Distances 1 and 5, mean 3.
        assert!((tape.value(l).scalar_value().unwrap() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn qie_apply_produces_consistent_shapes_and_finite_losses() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut tape = Tape::new();
        let source = tape.param(rand_matrix(&mut rng, 6, 4));
        let target = tape.param(rand_matrix(&mut rng, 5, 4));
        let (mlp, _) = rand_mlp(&mut tape, 4, &mut rng);
        let out = qie_apply(&mut tape, &[2, 0, 2, 5, 0], source, target, &mlp).unwrap();
        assert_eq!(out.dedup_indices, vec![2, 0, 5]);
        assert_eq!(out.target_indices.len(), 3);
        assert!(out.target_indices.iter().all(|&i| i < 5));
        assert_eq!(out.merged.len(), 3);
        assert_eq!(tape.value(out.retargeted).shape(), &[3, 4]);
        for m in &out.merged {
            assert_eq!(tape.value(*m).shape(), &[1, 4]);
        }
        let loss = tape.value(out.loss).scalar_value().unwrap();
        assert!(loss.is_finite());
        let int = tape.value(out.internal).scalar_value().unwrap();
        let ext = tape.value(out.external).scalar_value().unwrap();
        assert!((loss - (int + ext)).abs() < 1e-12);
        tape.backward(out.loss).unwrap();
        assert!(tape.grad(source).is_some(), "exchange trains the source codebook");
        assert!(tape.grad(target).is_some(), "exchange trains the target codebook");
    }

    #[test]
    fn qie_single_distinct_code_leaves_only_the_external_term() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut tape = Tape::new();
        let source = tape.param(rand_matrix(&mut rng, 4, 3));
        let target = tape.param(rand_matrix(&mut rng, 4, 3));
        let (mlp, _) = rand_mlp(&mut tape, 3, &mut rng);
        let out = qie_apply(&mut tape, &[1, 1, 1], source, target, &mlp).unwrap();
        assert_eq!(out.dedup_indices, vec![1]);
        assert_eq!(tape.value(out.internal).scalar_value().unwrap(), 0.0);
        let loss = tape.value(out.loss).scalar_value().unwrap();
        let ext = tape.value(out.external).scalar_value().unwrap();
        assert_eq!(loss, ext);
    }

    #[test]
    fn qie_gradients_match_finite_differences_end_to_end() {
        let r = 3;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let source0 = rand_matrix(&mut rng, 4, r);
        let target0 = rand_matrix(&mut rng, 4, r);
        let mut seed_tape = Tape::new();
        let (_, mlp0) = rand_mlp(&mut seed_tape, r, &mut rng);
        let mut params = vec![source0, target0];
        params.extend(mlp0);

        let eval = |ps: &[Tensor]| -> (f64, Vec<Tensor>) {
            let mut tape = Tape::new();
            let vars: Vec<Var> = ps.iter().map(|t| tape.param(t.clone())).collect();
            let mlp = RetargetVars {
                w1: vars[2], b1: vars[3], w2: vars[4], b2: vars[5], w3: vars[6], b3: vars[7],
            };
            let out = qie_apply(&mut tape, &[0, 2, 3], vars[0], vars[1], &mlp).unwrap();
            tape.backward(out.loss).unwrap();
            let grads = vars.iter().map(|&v| tape.grad_tensor(v)).collect();
            (tape.value(out.loss).scalar_value().unwrap(), grads)
        };
        let (_, analytic) = eval(&params);
        let report = finite_diff_check(
            |ps| Ok(eval(ps).0),
            &params,
            &analytic,
            1e-5,
            &FdPlan::All,
        )
        .unwrap();
        assert!(
            report.passes(1e-4),
            "max rel err {} at {:?} ({} checked, {} skipped)",
            report.max_rel_err,
            report.worst,
            report.checked,
            report.skipped_kinks.len()
        );
    }
}
