use proptest::prelude::*;
use proptest::test_runner::RngSeed;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use shefu_tensor::{grad_check, seq_max_pool, softmax, AdamState, Result, Tape, Tensor, Var};

const TOL: f64 = 1e-4;
const H: f64 = 1e-5;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

/// Reduces `y` to a scalar through fixed random weights so that every
/// output coordinate contributes to the checked gradient.
fn project(tape: &mut Tape<'_, f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
    let shape = tape.value(y).shape().to_vec();
    let w = rand_tensor(&mut rng, shape, 1.0);
    let w = tape.constant(w);
    let prod = tape.mul(y, w)?;
    tape.sum(prod)
}

fn check(seed: u64, inputs: Vec<Tensor<f64>>, f: impl Fn(&mut Tape<'_, f64>, &[Var]) -> Result<Var>) {
    check_with(seed, inputs, H, f)
}

fn check_with(
    seed: u64,
    inputs: Vec<Tensor<f64>>,
    h: f64,
    f: impl Fn(&mut Tape<'_, f64>, &[Var]) -> Result<Var>,
) {
    let report = grad_check(
        |tape, v| {
            let y = f(tape, v)?;
            project(tape, y, seed)
        },
        &inputs,
        h,
    )
    .unwrap();
    assert!(report.max_rel_error < TOL, "seed {seed}: {report:?}");
}

proptest! {
    #![proptest_config(ProptestConfig {
        cases: 128,
        rng_seed: RngSeed::Fixed(0x5EED),
        ..ProptestConfig::default()
    })]

    #[test]
    fn matmul_and_bias_gradients(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (m, k, n) = (rng.gen_range(1..5), rng.gen_range(1..5), rng.gen_range(1..5));
        let inputs = vec![
            rand_tensor(&mut rng, vec![m, k], 1.0),
            rand_tensor(&mut rng, vec![k, n], 1.0),
            rand_tensor(&mut rng, vec![n], 1.0),
        ];
        check(seed, inputs, |t, v| t.linear(v[0], v[1], v[2]));
    }

    #[test]
    fn elementwise_gradients(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = vec![rng.gen_range(1..4), rng.gen_range(1..5)];
        let inputs = vec![rand_tensor(&mut rng, shape.clone(), 2.0), rand_tensor(&mut rng, shape, 2.0)];
        check(seed, inputs, |t, v| {
            let p = t.mul(v[0], v[1])?;
            let s = t.add(p, v[0])?;
            let g = t.gelu(s)?;
            t.scale(g, 0.7)
        });
    }

    #[test]
    fn layer_norm_gradients(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (rows, cols) = (rng.gen_range(1..4), rng.gen_range(2..7));
        let inputs = vec![
            rand_tensor(&mut rng, vec![rows, cols], 2.0),
            rand_tensor(&mut rng, vec![cols], 1.5),
            rand_tensor(&mut rng, vec![cols], 1.0),
        ];
        check_with(seed, inputs, 1e-4, |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5));
    }

    #[test]
    fn softmax_and_cross_entropy_gradients(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (rows, cols) = (rng.gen_range(1..5), rng.gen_range(2..5));
        let labels: Vec<usize> = (0..rows).map(|_| rng.gen_range(0..cols)).collect();
        let inputs = vec![rand_tensor(&mut rng, vec![rows, cols], 3.0)];
        check(seed, inputs.clone(), |t, v| t.softmax(v[0]));
        let report = grad_check(
            |t, v| {
                let p = t.softmax(v[0])?;
                t.cross_entropy(p, &labels)
            },
            &inputs,
            H,
        )
        .unwrap();
        prop_assert!(report.max_rel_error < TOL, "{report:?}");
    }

    #[test]
    fn gather_concat_reshape_gradients(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cols = rng.gen_range(1..4);
        let inputs = vec![rand_tensor(&mut rng, vec![4, cols], 1.0), rand_tensor(&mut rng, vec![2, cols], 1.0)];
        let idx: Vec<usize> = (0..5).map(|_| rng.gen_range(0..6)).collect();
        check(seed, inputs, |t, v| {
            let c = t.concat_rows(&[v[0], v[1]])?;
            let g = t.gather_rows(c, &idx)?;
            let m = t.mask_rows(g, &[true, false, true, true, false])?;
            t.reshape(m, vec![5 * cols])
        });
    }

    #[test]
    fn pooling_gradients(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (batch, seq, d) = (rng.gen_range(1..3), rng.gen_range(2..7), rng.gen_range(1..4));
        let valid: Vec<bool> = (0..batch * seq).map(|_| rng.gen_bool(0.7)).collect();
        let inputs = vec![rand_tensor(&mut rng, vec![batch * seq, d], 1.0)];
        check_with(seed, inputs.clone(), H, |t, v| Ok(t.seq_max_pool(v[0], batch, seq, None)?.0));
        check_with(seed, inputs, H, |t, v| Ok(t.seq_max_pool(v[0], batch, seq, Some(&valid))?.0));
    }

    #[test]
    fn attention_gradients(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let heads = rng.gen_range(1..3);
        let d = heads * rng.gen_range(1..4);
        let (batch, seq) = (rng.gen_range(1..3), rng.gen_range(1..5));
        let mut valid: Vec<bool> = (0..batch * seq).map(|_| rng.gen_bool(0.7)).collect();
        for b in 0..batch {
            valid[b * seq] = true;
        }
        let inputs: Vec<_> = (0..3).map(|_| rand_tensor(&mut rng, vec![batch * seq, d], 1.0)).collect();
        check(seed, inputs, |t, v| t.attention(v[0], v[1], v[2], batch, seq, heads, &valid));
    }

    #[test]
    fn softmax_sums_to_one(xs in prop::collection::vec(-50.0f32..50.0, 1..32)) {
        let p = softmax(&xs).unwrap();
        let total: f64 = p.iter().map(|&v| v as f64).sum();
        prop_assert!((total - 1.0).abs() < 1e-6);
    }

    #[test]
    fn softmax_shift_invariant(xs in prop::collection::vec(-10.0f64..10.0, 1..16), c in -20.0f64..20.0) {
        let shifted: Vec<f64> = xs.iter().map(|x| x + c).collect();
        let (a, b) = (softmax(&xs).unwrap(), softmax(&shifted).unwrap());
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_shift_invariant(xs in prop::collection::vec(-10.0f64..10.0, 2..16), c in -20.0f64..20.0) {
        let n = xs.len();
        let shifted: Vec<f64> = xs.iter().map(|x| x + c).collect();
        let ones = vec![1.0; n];
        let zeros = vec![0.0; n];
        let a = shefu_tensor::layer_norm(&xs, &ones, &zeros, 1e-5).unwrap();
        let b = shefu_tensor::layer_norm(&shifted, &ones, &zeros, 1e-5).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn layer_norm_standardizes(xs in prop::collection::vec(-10.0f64..10.0, 2..16)) {
        let spread = xs.iter().cloned().fold(f64::MIN, f64::max) - xs.iter().cloned().fold(f64::MAX, f64::min);
        prop_assume!(spread > 1e-2);
        let n = xs.len();
        let y = shefu_tensor::layer_norm(&xs, &vec![1.0; n], &vec![0.0; n], 1e-12).unwrap();
        let mean = y.iter().sum::<f64>() / n as f64;
        let var = y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        prop_assert!(mean.abs() < 1e-5 && (var - 1.0).abs() < 1e-5);
    }

    #[test]
    fn pool_length_law(len in 2usize..80, width in 1usize..4) {
        let seq: Vec<Vec<f32>> = (0..len).map(|i| vec![i as f32; width]).collect();
        prop_assert_eq!(seq_max_pool(&seq).unwrap().len(), len / 2);
    }

    #[test]
    fn adam_zero_gradient_identity(steps in 1usize..20, vals in prop::collection::vec(-5.0f32..5.0, 1..8)) {
        let p0 = Tensor::new(vec![vals.len()], vals.clone()).unwrap();
        let mut params = vec![p0.clone()];
        let mut adam = AdamState::new(8e-5, 0.9, 0.999, 1e-8, &params);
        for _ in 0..steps {
            adam.step(&mut params, &[Some(Tensor::zeros(vec![vals.len()]))]).unwrap();
        }
        prop_assert_eq!(&params[0], &p0);
        prop_assert_eq!(adam.step_count(), steps as u64);
    }
}

#[test]
fn square_gradient_is_analytic() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(3.0f64).with_grad());
    let y = tape.mul(x, x).unwrap();
    let g = tape.backward(y).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[6.0]);
}

#[test]
fn sum_of_matrix_vector_product() {
    // f(W) = sum(W v): dF/dW[i][j] = v[j] for every row i
    let mut tape = Tape::new();
    let w = tape.leaf(Tensor::new(vec![2, 3], vec![1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap().with_grad());
    let v = tape.constant(Tensor::new(vec![3, 1], vec![0.5, -1.0, 2.0]).unwrap());
    let wv = tape.matmul(w, v).unwrap();
    let s = tape.sum(wv).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(w).unwrap().data(), &[0.5, -1.0, 2.0, 0.5, -1.0, 2.0]);
}

#[test]
fn unreachable_parameter_has_no_gradient() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(2.0f64).with_grad());
    let unused = tape.leaf(Tensor::scalar(5.0f64).with_grad());
    let y = tape.scale(x, 4.0).unwrap();
    let g = tape.backward(y).unwrap();
    assert!(g.get(unused).is_none());
    assert_eq!(g.get(x).unwrap().data(), &[4.0]);
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(vec![2], vec![1.0f32, 2.0]).unwrap().with_grad());
    assert!(tape.backward(x).is_err());
}

#[test]
fn nan_propagation_is_an_error() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(vec![1, 2], vec![f32::MAX, f32::MAX]).unwrap());
    assert!(tape.scale(x, 10.0).is_err());
}

#[test]
fn attention_rows_are_convex_weights() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut tape = Tape::new();
    let q = tape.leaf(rand_tensor(&mut rng, vec![6, 4], 2.0));
    let k = tape.leaf(rand_tensor(&mut rng, vec![6, 4], 2.0));
    let v = tape.leaf(rand_tensor(&mut rng, vec![6, 4], 2.0));
    let valid = [true, false, true, true, true, false];
    let out = tape.attention(q, k, v, 2, 3, 2, &valid).unwrap();
    let w = tape.attention_weights(out).unwrap();
    for (row_i, row) in w.chunks(3).enumerate() {
        let b = row_i / (2 * 3);
        let total: f64 = row.iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
        for (j, &p) in row.iter().enumerate() {
            if !valid[b * 3 + j] {
                assert_eq!(p, 0.0);
            }
        }
    }
}

#[test]
fn forward_ops_are_bitwise_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut tape = Tape::new();
        let x = tape.leaf(rand_tensor(&mut rng, vec![4, 6], 1.0).cast::<f32>());
        let w = tape.leaf(rand_tensor(&mut rng, vec![6, 6], 1.0).cast::<f32>());
        let y = tape.matmul(x, w).unwrap();
        let a = tape.attention(y, y, y, 2, 2, 3, &[true; 4]).unwrap();
        let (p, _) = tape.seq_max_pool(a, 2, 2, None).unwrap();
        tape.value(p).data().to_vec()
    };
    assert_eq!(run(), run());
}

