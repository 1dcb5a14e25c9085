use approx::assert_relative_eq;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Error;

use super::Tensor;

fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_vec(shape, data.to_vec()).unwrap()
}

#[test]
fn matmul_identity_passthrough() {
    let eye = Tensor::<f64>::eye(2);
    let b = t64(&[2, 2], &[3.0, 4.0, 5.0, 6.0]);
    let c = eye.matmul(&b).unwrap();
    assert_eq!(c.to_vec(), vec![3.0, 4.0, 5.0, 6.0]);
}

#[test]
fn matmul_hand_computed() {
    let a = t64(&[1, 2], &[1.0, 2.0]);
    let b = t64(&[2, 1], &[3.0, 4.0]);
    let c = a.matmul(&b).unwrap();
    assert_eq!(c.to_vec(), vec![11.0]);
}

#[test]
fn matmul_zero_annihilates() {
    let a = t64(&[1, 2], &[0.0, 0.0]);
    let b = t64(&[2, 1], &[3.0, 4.0]);
    assert_eq!(a.matmul(&b).unwrap().to_vec(), vec![0.0]);
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let a = t64(&[2, 3], &[0.0; 6]);
    let b = t64(&[2, 2], &[0.0; 4]);
    match a.matmul(&b) {
        Err(Error::Dim { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 2]);
        }
        other => panic!("expected dimension error, got {other:?}"),
    }
}

#[test]
fn matmul_batched_matches_per_slice() {
    let a = t64(&[2, 2, 3], &(0..12).map(|i| i as f64).collect::<Vec<_>>());
    let b = t64(&[2, 3, 2], &(0..12).map(|i| (i as f64) * 0.5).collect::<Vec<_>>());
    let c = a.matmul(&b).unwrap();
    for bi in 0..2 {
        let a2 = a.narrow(0, bi, 1).unwrap().reshape(&[2, 3]).unwrap();
        let b2 = b.narrow(0, bi, 1).unwrap().reshape(&[3, 2]).unwrap();
        let c2 = a2.matmul(&b2).unwrap();
        let cs = c.narrow(0, bi, 1).unwrap().reshape(&[2, 2]).unwrap();
        assert_eq!(c2.to_vec(), cs.to_vec());
    }
}

#[test]
fn softmax_symmetry() {
    let z = t64(&[2], &[0.0, 0.0]);
    let y = z.softmax_temp(1.0).unwrap();
    assert_relative_eq!(y.to_vec()[0], 0.5, max_relative = 1e-12);
    assert_relative_eq!(y.to_vec()[1], 0.5, max_relative = 1e-12);
}

#[test]
fn softmax_temperature_halves_logits() {
    // softmax([2, 0], T=2) == softmax([1, 0])
    let y = t64(&[2], &[2.0, 0.0]).softmax_temp(2.0).unwrap();
    let v = y.to_vec();
    assert!((v[0] - 0.7311).abs() < 1e-4, "got {v:?}");
    assert!((v[1] - 0.2689).abs() < 1e-4, "got {v:?}");
}

#[test]
fn softmax_rejects_nonpositive_temperature() {
    let z = t64(&[2], &[1.0, 2.0]);
    assert!(matches!(z.softmax_temp(0.0), Err(Error::Param(_))));
    assert!(matches!(z.softmax_temp(-1.0), Err(Error::Param(_))));
}

#[test]
fn mse_identity_and_hand_value() {
    let a = t64(&[1, 2], &[1.0, 2.0]);
    assert_eq!(a.mse(&a).unwrap().item().unwrap(), 0.0);
    let b = t64(&[1, 2], &[0.0, 0.0]);
    assert_relative_eq!(a.mse(&b).unwrap().item().unwrap(), 2.5);
}

#[test]
fn mse_shape_mismatch() {
    let a = t64(&[2], &[1.0, 2.0]);
    let b = t64(&[3], &[0.0; 3]);
    assert!(matches!(a.mse(&b), Err(Error::Dim { .. })));
}

#[test]
fn kl_identity_is_zero() {
    let p = t64(&[1, 2], &[0.3, 0.7]);
    assert_eq!(p.kl_div(&p).unwrap().item().unwrap(), 0.0);
}

#[test]
fn kl_hand_value_swapped_rows() {
    // p = softmax([1, 0]), q = softmax([0, 1]); the ratio is exactly e so
    // KL = p0 - p1 = 2 * p0 - 1.
    let p = t64(&[1, 2], &[0.7311, 0.2689]);
    let q = t64(&[1, 2], &[0.2689, 0.7311]);
    let kl = p.kl_div(&q).unwrap().item().unwrap();
    assert!((kl - 0.4622).abs() < 1e-4, "kl = {kl}");
}

#[test]
fn kl_rejects_unnormalized_rows() {
    let p = t64(&[1, 2], &[0.5, 0.6]);
    let q = t64(&[1, 2], &[0.5, 0.5]);
    assert!(matches!(p.kl_div(&q), Err(Error::Validation(_))));
    assert!(matches!(q.kl_div(&p), Err(Error::Validation(_))));
}

#[test]
fn kl_clamps_zero_q_entries() {
    let p = t64(&[1, 2], &[0.5, 0.5]);
    let q = t64(&[1, 2], &[0.0, 1.0]);
    let kl = p.kl_div(&q).unwrap().item().unwrap();
    assert!(kl.is_finite());
    // 0.5 * ln(0.5 / 1e-9) + 0.5 * ln(0.5)
    let expect = 0.5 * (0.5f64 / 1e-9).ln() + 0.5 * 0.5f64.ln();
    assert_relative_eq!(kl, expect, max_relative = 1e-9);
}

#[test]
fn cross_entropy_uniform_is_log_vocab() {
    let logits = Tensor::<f64>::zeros(&[3, 16]);
    let loss = logits.cross_entropy(&[0, 5, 15]).unwrap().item().unwrap();
    assert_relative_eq!(loss, (16f64).ln(), max_relative = 1e-12);
}

#[test]
fn cross_entropy_confident_prediction_near_zero() {
    let mut data = vec![0.0; 16];
    data[0] = 10.0;
    let logits = t64(&[1, 16], &data);
    let loss = logits.cross_entropy(&[0]).unwrap().item().unwrap();
    assert!(loss < 1e-3, "loss = {loss}");
}

#[test]
fn cross_entropy_matches_scalar_log_sum_exp() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let logits = Tensor::<f64>::randn(&[4, 9], 2.0, &mut rng);
    let labels = [3usize, 0, 8, 2];
    let loss = logits.cross_entropy(&labels).unwrap().item().unwrap();

    let z = logits.to_vec();
    let mut expect = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        let row = &z[i * 9..(i + 1) * 9];
        let lse = row.iter().map(|x| x.exp()).sum::<f64>().ln();
        expect += lse - row[label];
    }
    expect /= labels.len() as f64;
    assert_relative_eq!(loss, expect, max_relative = 1e-6);
}

#[test]
fn cross_entropy_rejects_out_of_range_label() {
    let logits = Tensor::<f64>::zeros(&[1, 4]);
    assert!(matches!(
        logits.cross_entropy(&[4]),
        Err(Error::Index(_))
    ));
}

#[test]
fn backward_of_sum_is_ones() {
    let x = t64(&[2, 3], &[1.0, -2.0, 0.5, 3.0, 4.0, -1.0]).trainable();
    x.sum().backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![1.0; 6]);
}

#[test]
fn backward_of_mse_against_zero() {
    // d/dx mean((x - 0)^2) at x = [2] is 2 * x / 1 = [4]
    let x = t64(&[1], &[2.0]).trainable();
    let zero = Tensor::<f64>::zeros(&[1]);
    x.mse(&zero).unwrap().backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![4.0]);
}

#[test]
fn backward_rejects_non_scalar_root() {
    let x = t64(&[2], &[1.0, 2.0]).trainable();
    let y = x.scale(2.0);
    assert!(matches!(y.backward(), Err(Error::Contract(_))));
}

#[test]
fn backward_accumulates_over_shared_input() {
    // y = x * x + x  => dy/dx = 2x + 1
    let x = t64(&[2], &[3.0, -1.0]).trainable();
    let y = x.mul(&x).unwrap().add(&x).unwrap().sum();
    y.backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![7.0, -1.0]);
}

#[test]
fn frozen_tensor_gets_no_gradient_and_keeps_bits() {
    let frozen = t64(&[2], &[1.25, -7.5]);
    frozen.set_requires_grad(false);
    let trainable = t64(&[2], &[2.0, 3.0]).trainable();
    let before = frozen.to_vec();
    let loss = frozen.mul(&trainable).unwrap().sum();
    let grads = loss.backward().unwrap();
    assert!(frozen.grad().is_none());
    assert!(!grads.contains(&frozen));
    assert!(grads.contains(&trainable));
    let after = frozen.to_vec();
    assert_eq!(
        before.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        after.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
}

#[test]
fn detach_blocks_gradient_flow() {
    let x = t64(&[2], &[1.0, 2.0]).trainable();
    let d = x.scale(3.0).detach();
    let loss = d.mul(&x).unwrap().sum();
    loss.backward().unwrap();
    // Only the direct use of x contributes: d(loss)/dx = d
    assert_eq!(x.grad().unwrap(), vec![3.0, 6.0]);
}

#[test]
fn causal_mask_zeroes_future_attention() {
    let scores = t64(&[1, 2, 2], &[0.0, 5.0, 1.0, 1.0]);
    let probs = scores
        .apply_causal_mask()
        .unwrap()
        .softmax_temp(1.0)
        .unwrap();
    let v = probs.to_vec();
    assert_eq!(v[0], 1.0); // first row attends only to itself
    assert_eq!(v[1], 0.0);
}

#[test]
fn broadcast_add_bias_and_rows() {
    let x = t64(&[2, 2, 2], &[0.0; 8]);
    let bias = t64(&[2], &[1.0, 2.0]);
    let y = x.broadcast_add(&bias).unwrap();
    assert_eq!(y.to_vec(), vec![1.0, 2.0, 1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);

    let rows = t64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
    let y = x.broadcast_add(&rows).unwrap();
    assert_eq!(y.to_vec(), vec![1.0, 2.0, 3.0, 4.0, 1.0, 2.0, 3.0, 4.0]);

    let bad = t64(&[3], &[0.0; 3]);
    assert!(matches!(x.broadcast_add(&bad), Err(Error::Dim { .. })));
}

#[test]
fn permute_roundtrip_restores_layout() {
    let x = t64(&[2, 3, 4], &(0..24).map(|i| i as f64).collect::<Vec<_>>());
    let p = x.permute(&[2, 0, 1]).unwrap();
    assert_eq!(p.shape(), &[4, 2, 3]);
    let back = p.permute(&[1, 2, 0]).unwrap();
    assert_eq!(back.to_vec(), x.to_vec());
}

#[test]
fn embedding_gathers_rows_and_scatters_grads() {
    let table = t64(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).trainable();
    let out = table.embedding(&[2, 0, 2], &[3]).unwrap();
    assert_eq!(out.shape(), &[3, 2]);
    assert_eq!(out.to_vec(), vec![5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);

    out.sum().backward().unwrap();
    // Row 2 used twice, row 0 once, row 1 never.
    assert_eq!(table.grad().unwrap(), vec![1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);

    assert!(matches!(
        table.embedding(&[3], &[1]),
        Err(Error::Index(_))
    ));
}

#[test]
fn gather_positions_picks_per_row() {
    let x = t64(&[2, 2, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
    let y = x.gather_positions(&[1, 0]).unwrap();
    assert_eq!(y.to_vec(), vec![3.0, 4.0, 5.0, 6.0]);
}

#[test]
fn dropout_zero_rate_is_identity_and_draws_nothing() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let before = rng.clone();
    let x = t64(&[4], &[1.0, 2.0, 3.0, 4.0]);
    let y = x.dropout(0.0, &mut rng).unwrap();
    assert_eq!(y.to_vec(), x.to_vec());
    assert_eq!(rng, before);
}

#[test]
fn identical_seeds_give_bit_identical_randn() {
    let a = Tensor::<f32>::randn(&[16], 0.02, &mut ChaCha8Rng::seed_from_u64(9));
    let b = Tensor::<f32>::randn(&[16], 0.02, &mut ChaCha8Rng::seed_from_u64(9));
    assert_eq!(
        a.to_vec().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        b.to_vec().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
}
