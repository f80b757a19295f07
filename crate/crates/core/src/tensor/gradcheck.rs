//! Central finite-difference gradient verification.
//!
//! The oracle perturbs each input element by `+-h`, re-runs the caller's
//! forward closure, and compares `(f(x+h) - f(x-h)) / 2h` against the tape's
//! analytic gradient. It never inspects the backward pass it checks.

use super::{Tape, TensorId};
use crate::Result;

/// One mismatch found by [`check_gradients`].
#[derive(Debug, Clone)]
pub struct GradMismatch {
    pub input: usize,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

/// Relative error with an absolute floor so near-zero pairs compare sanely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Verify analytic gradients of a scalar-valued function against central
/// finite differences at 64-bit precision.
///
/// `forward` receives a fresh tape plus leaves bound from `inputs` (in
/// order, all requiring grad) and returns the scalar loss id. Returns every
/// element whose relative error exceeds `tol`.
pub fn check_gradients(
    inputs: &[(Vec<f64>, Vec<usize>)],
    h: f64,
    tol: f64,
    mut forward: impl FnMut(&mut Tape<f64>, &[TensorId]) -> Result<TensorId>,
) -> Result<Vec<GradMismatch>> {
    let mut run = |vals: &[Vec<f64>], grad: bool| -> Result<(f64, Vec<Option<Vec<f64>>>)> {
        let mut tape: Tape<f64> = Tape::new();
        let ids: Vec<TensorId> = vals
            .iter()
            .zip(inputs)
            .map(|(v, (_, shape))| tape.leaf(v.clone(), shape, true))
            .collect::<Result<_>>()?;
        let loss = forward(&mut tape, &ids)?;
        let value = tape.item(loss);
        let grads = if grad {
            tape.backward(loss)?;
            ids.iter().map(|&id| tape.grad(id).map(|g| g.to_vec())).collect()
        } else {
            vec![None; ids.len()]
        };
        Ok((value, grads))
    };

    let base: Vec<Vec<f64>> = inputs.iter().map(|(v, _)| v.clone()).collect();
    let (_, analytic) = run(&base, true)?;

    let mut mismatches = Vec::new();
    for (pi, vals) in base.iter().enumerate() {
        let ga = analytic[pi]
            .as_ref()
            .expect("input leaf requires grad, so backward must fill it");
        for ei in 0..vals.len() {
            let mut plus = base.clone();
            plus[pi][ei] += h;
            let (fp, _) = run(&plus, false)?;
            let mut minus = base.clone();
            minus[pi][ei] -= h;
            let (fm, _) = run(&minus, false)?;
            let numeric = (fp - fm) / (2.0 * h);
            let err = rel_err(ga[ei], numeric);
            if err > tol {
                mismatches.push(GradMismatch {
                    input: pi,
                    element: ei,
                    analytic: ga[ei],
                    numeric,
                    rel_err: err,
                });
            }
        }
    }
    Ok(mismatches)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(lo..hi)).collect()
    }

    fn assert_clean(mismatches: Vec<GradMismatch>, what: &str) {
        assert!(
            mismatches.is_empty(),
            "{what}: {} gradient mismatches, worst {:?}",
            mismatches.len(),
            mismatches
                .iter()
                .max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
        );
    }

    #[test]
    fn gradcheck_matmul_relu_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = (rand_vec(&mut rng, 6, -1.0, 1.0), vec![2, 3]);
        let b = (rand_vec(&mut rng, 12, -1.0, 1.0), vec![3, 4]);
        let mis = check_gradients(&[a, b], 1e-4, 1e-4, |tape, ids| {
            let y = tape.matmul(ids[0], ids[1])?;
            let r = tape.relu(y)?;
            tape.mean(r)
        })
        .unwrap();
        assert_clean(mis, "matmul+relu+mean");
    }

    #[test]
    fn gradcheck_softmax_log_take() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = (rand_vec(&mut rng, 12, -2.0, 2.0), vec![3, 4]);
        let mis = check_gradients(&[x], 1e-5, 1e-4, |tape, ids| {
            let sm = tape.softmax(ids[0])?;
            let lg = tape.log(sm)?;
            let picked = tape.take_per_row(lg, vec![1, 0, 3])?;
            let s = tape.sum(picked)?;
            tape.scale(s, -1.0)
        })
        .unwrap();
        assert_clean(mis, "softmax+log+take");
    }

    #[test]
    fn gradcheck_conv_pool_norms() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = (rand_vec(&mut rng, 2 * 3 * 6 * 6, -1.0, 1.0), vec![2, 3, 6, 6]);
        let w = (rand_vec(&mut rng, 4 * 3 * 9, -0.5, 0.5), vec![4, 3, 3, 3]);
        let bias = (rand_vec(&mut rng, 4, -0.1, 0.1), vec![4]);
        let gamma = (rand_vec(&mut rng, 4, 0.5, 1.5), vec![4]);
        let beta = (rand_vec(&mut rng, 4, -0.2, 0.2), vec![4]);
        let mis = check_gradients(&[x, w, bias, gamma, beta], 1e-4, 1e-4, |tape, ids| {
            let y = tape.conv2d(ids[0], ids[1], Some(ids[2]), 1, 1)?;
            let (bn, _, _) = tape.batch_norm(y, ids[3], ids[4], 1e-5)?;
            let r = tape.relu(bn)?;
            let p = tape.max_pool2(r)?;
            let q = tape.avg_pool2(p)?;
            let gap = tape.global_avg_pool(q)?;
            let nm = tape.l2_normalize_rows(gap)?;
            tape.mean(nm)
        })
        .unwrap();
        assert_clean(mis, "conv+bn+pool+l2norm");
    }

    #[test]
    fn gradcheck_group_norm_and_lse() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let x = (rand_vec(&mut rng, 2 * 4 * 3 * 3, -1.0, 1.0), vec![2, 4, 3, 3]);
        let gamma = (rand_vec(&mut rng, 4, 0.5, 1.5), vec![4]);
        let beta = (rand_vec(&mut rng, 4, -0.2, 0.2), vec![4]);
        let mis = check_gradients(&[x, gamma, beta], 1e-4, 1e-4, |tape, ids| {
            let gn = tape.group_norm(ids[0], ids[1], ids[2], 2, 1e-5)?;
            let flat = tape.reshape(gn, &[2, 36])?;
            let mask = vec![true; 72];
            let lse = tape.masked_lse_rows(flat, mask)?;
            tape.mean(lse)
        })
        .unwrap();
        assert_clean(mis, "groupnorm+lse");
    }

    #[test]
    fn gradcheck_remaining_elementwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let a = (rand_vec(&mut rng, 8, 0.1, 2.0), vec![2, 4]);
        let b = (rand_vec(&mut rng, 8, 0.1, 2.0), vec![2, 4]);
        let c = (rand_vec(&mut rng, 4, -0.5, 0.5), vec![4]);
        let mis = check_gradients(&[a, b, c], 1e-5, 1e-4, |tape, ids| {
            let s = tape.sub(ids[0], ids[1])?;
            let m = tape.mul(s, ids[0])?;
            let e = tape.exp(m)?;
            let biased = tape.add_row_bias(e, ids[2])?;
            let sc = tape.scale(biased, 0.3)?;
            let added = tape.add(sc, biased)?;
            let cat = tape.concat_rows(&[added, sc])?;
            tape.sum(cat)
        })
        .unwrap();
        assert_clean(mis, "elementwise chain");
    }

    #[test]
    fn gradcheck_matmul_nt_and_bn_inference() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let a = (rand_vec(&mut rng, 6, -1.0, 1.0), vec![2, 3]);
        let b = (rand_vec(&mut rng, 12, -1.0, 1.0), vec![4, 3]);
        let gamma = (rand_vec(&mut rng, 4, 0.5, 1.5), vec![4]);
        let beta = (rand_vec(&mut rng, 4, -0.2, 0.2), vec![4]);
        let rm = rand_vec(&mut rng, 4, -0.3, 0.3);
        let rv = rand_vec(&mut rng, 4, 0.5, 1.5);
        let mis = check_gradients(&[a, b, gamma, beta], 1e-5, 1e-4, |tape, ids| {
            let y = tape.matmul_nt(ids[0], ids[1])?;
            let z = tape.batch_norm_inference(y, ids[2], ids[3], &rm, &rv, 1e-5)?;
            tape.mean(z)
        })
        .unwrap();
        assert_clean(mis, "matmul_nt+bn_inference");
    }
}
