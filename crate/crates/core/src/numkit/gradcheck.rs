//! Central finite-difference gradient checker.

use super::Matrix;

const EPSILON: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct BlockCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub worst_index: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub blocks: Vec<BlockCheck>,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.blocks
            .iter()
            .map(|b| b.max_rel_err)
            .fold(0.0, f64::max)
    }

    pub fn failing_blocks(&self) -> Vec<&str> {
        self.blocks
            .iter()
            .filter(|b| b.max_rel_err >= self.tolerance)
            .map(|b| b.name.as_str())
            .collect()
    }
}

/// Relative error with a floor so near-zero gradient pairs compare sanely:
/// `|a - b| / max(|a| + |b|, 1e-3)`.
fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-3)
}

/// Compares the reverse-mode gradients produced by `eval` against central
/// finite differences of its loss, per parameter block.
///
/// `eval` must be deterministic: given parameter values it returns the loss
/// and one gradient matrix per block, in block order. Failures are reported,
/// not raised.
pub fn grad_check<F>(eval: F, params: &[(String, Matrix)], tolerance: f64) -> GradCheckReport
where
    F: Fn(&[Matrix]) -> (f64, Vec<Matrix>),
{
    let values: Vec<Matrix> = params.iter().map(|(_, m)| m.clone()).collect();
    let (_, analytic) = eval(&values);
    assert_eq!(
        analytic.len(),
        params.len(),
        "eval returned {} gradient blocks for {} parameter blocks",
        analytic.len(),
        params.len()
    );
    let mut blocks = Vec::with_capacity(params.len());
    for (bi, (name, _)) in params.iter().enumerate() {
        let mut max_rel = 0.0f64;
        let mut worst = 0usize;
        for idx in 0..values[bi].len() {
            let mut perturbed = values.clone();
            perturbed[bi].data_mut()[idx] += EPSILON;
            let (up, _) = eval(&perturbed);
            perturbed[bi].data_mut()[idx] -= 2.0 * EPSILON;
            let (down, _) = eval(&perturbed);
            let fd = (up - down) / (2.0 * EPSILON);
            let re = rel_err(analytic[bi].data()[idx], fd);
            if re > max_rel {
                max_rel = re;
                worst = idx;
            }
        }
        blocks.push(BlockCheck {
            name: name.clone(),
            max_rel_err: max_rel,
            worst_index: worst,
        });
    }
    let passed = blocks.iter().all(|b| b.max_rel_err < tolerance);
    GradCheckReport {
        blocks,
        tolerance,
        passed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn linear_eval(params: &[Matrix]) -> (f64, Vec<Matrix>) {
        // loss = weighted_nll(x . w, target 1, weight 1)
        let mut tape = Tape::new();
        let x = tape.leaf(Matrix::from_vec(1, 3, vec![0.3, -0.7, 1.2]));
        let w = tape.leaf(params[0].clone());
        let logits = tape.matmul(x, w);
        let loss = tape.weighted_nll(logits, 1, 1.0);
        tape.backward(loss);
        (tape.value(loss).scalar_value(), vec![tape.grad(w).clone()])
    }

    #[test]
    fn linear_model_passes() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let params = vec![("w".to_string(), Matrix::randn(3, 4, 0.5, &mut rng))];
        let report = grad_check(linear_eval, &params, 1e-4);
        assert!(report.passed, "max rel err {}", report.max_rel_err());
    }

    #[test]
    fn corrupted_backward_fails_and_names_block() {
        let corrupted = |params: &[Matrix]| {
            let (loss, mut grads) = linear_eval(params);
            grads[0].data_mut()[2] += 0.5; // wrong backward rule
            (loss, grads)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let params = vec![("w".to_string(), Matrix::randn(3, 4, 0.5, &mut rng))];
        let report = grad_check(corrupted, &params, 1e-4);
        assert!(!report.passed);
        assert_eq!(report.failing_blocks(), vec!["w"]);
        assert_eq!(report.blocks[0].worst_index, 2);
    }

    /// Every primitive's backward vs central differences on random inputs,
    /// over many seeds.
    #[test]
    fn primitive_gradients_match_finite_differences() {
        for seed in 0..60u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = Matrix::randn(3, 4, 0.8, &mut rng);
            let b = Matrix::randn(4, 3, 0.8, &mut rng);
            let c = Matrix::randn(3, 4, 0.8, &mut rng);
            let table = Matrix::randn(5, 4, 0.8, &mut rng);
            let params = vec![
                ("a".to_string(), a),
                ("b".to_string(), b),
                ("c".to_string(), c),
                ("table".to_string(), table),
            ];
            let eval = |p: &[Matrix]| {
                let mut tape = Tape::new();
                let a = tape.leaf(p[0].clone());
                let b = tape.leaf(p[1].clone());
                let c = tape.leaf(p[2].clone());
                let table = tape.leaf(p[3].clone());
                // chain every primitive: matmul, add, tanh, sigmoid, relu,
                // softmax, embed, concat, weighted_nll
                let mm = tape.matmul(a, b); // 3x3
                let emb = tape.embedding_lookup(table, &[0, 2, 4]); // 3x4
                let sum = tape.add(emb, c); // 3x4
                let th = tape.tanh(sum);
                let sg = tape.sigmoid(th);
                let rl = tape.relu(sg);
                let cat = tape.concat_cols(mm, rl); // 3x7
                let sm = tape.row_softmax(cat);
                let pick = tape.leaf(Matrix::from_vec(
                    7,
                    1,
                    vec![1.0, -1.0, 0.5, 0.25, -0.75, 2.0, -0.1],
                ));
                let proj = tape.matmul(sm, pick); // 3x1
                let mixer = tape.leaf(Matrix::from_vec(1, 3, vec![0.7, 0.2, 0.4]));
                let row = tape.matmul(mixer, proj); // 1x1
                let wide = tape.concat_cols(row, row); // 1x2 logits
                let loss = tape.weighted_nll(wide, 0, 1.3);
                tape.backward(loss);
                let grads = vec![
                    tape.grad(a).clone(),
                    tape.grad(b).clone(),
                    tape.grad(c).clone(),
                    tape.grad(table).clone(),
                ];
                (tape.value(loss).scalar_value(), grads)
            };
            let report = grad_check(eval, &params, 1e-6);
            assert!(
                report.passed,
                "seed {seed}: max rel err {}",
                report.max_rel_err()
            );
        }
    }
}
