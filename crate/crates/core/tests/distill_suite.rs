//! Filter and distillation-objective contracts: the hand-computed loss
//! values, gradient-flow boundaries, and the mode lattice.

use approx::assert_relative_eq;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ted_core::data::Batch;
use ted_core::distill::{
    layerwise_loss, pred_distill_loss, stage2_objective, ted_loss, DistillConfig, DistillContext,
    DistillMode, FilterInit, LayerMap, MapPolicy, SideTransform, TedVariant,
};
use ted_core::error::Error;
use ted_core::filters::{
    build_bank, build_filter, stage1_loss, FilterArch, FilterSpec, Side, SubsequentDepth,
};
use ted_core::model::{HeadKind, ModelConfig, TransformerModel};
use ted_core::tensor::Tensor;

fn lm_config(depth: usize, hidden: usize) -> ModelConfig {
    ModelConfig {
        depth,
        hidden_dim: hidden,
        head_count: 2,
        ffn_dim: hidden * 2,
        vocab_size: 16,
        max_seq_len: 16,
        dropout_rate: 0.0,
        tie_embeddings: false,
        head: HeadKind::Lm,
    }
}

fn lm_batch(tokens: Vec<u32>, batch: usize) -> Batch {
    let seq_len = tokens.len() / batch;
    Batch {
        tokens,
        batch_size: batch,
        seq_len,
        labels: None,
        pool_positions: None,
        sample_indices: Vec::new(),
    }
}

fn linear_spec(in_dim: usize, out_dim: usize, seed: u64) -> FilterSpec {
    FilterSpec {
        arch: FilterArch::LinearProjection,
        in_dim,
        out_dim,
        head: HeadKind::Lm,
        vocab_size: 16,
        seed,
    }
}

/// Overwrite a linear filter's weight/bias through its parameter handles.
fn set_linear(filter: &ted_core::filters::TaskAwareFilter, w: Vec<f32>, b: Vec<f32>) {
    for (name, p) in filter.named_params("f") {
        if name == "f.w" {
            p.set_data(w.clone()).unwrap();
        } else if name == "f.b" {
            p.set_data(b.clone()).unwrap();
        }
    }
}

#[test]
fn layer_map_skip_alternate_formula() {
    let map = LayerMap::new(MapPolicy::SkipAlternate, 6, 12).unwrap();
    assert_eq!(map.indices(), vec![1, 3, 5, 8, 10, 12]);
}

#[test]
fn layer_map_identity_and_explicit() {
    let map = LayerMap::new(MapPolicy::Identity, 12, 12).unwrap();
    assert_eq!(map.map(7).unwrap(), 7);
    let map = LayerMap::new(MapPolicy::Explicit(vec![2, 4]), 2, 4).unwrap();
    assert_eq!(map.indices(), vec![2, 4]);
}

#[test]
fn layer_map_rejects_bad_inputs() {
    assert!(matches!(
        LayerMap::new(MapPolicy::SkipAlternate, 6, 11),
        Err(Error::Param(_))
    ));
    assert!(matches!(
        LayerMap::new(MapPolicy::Identity, 3, 4),
        Err(Error::Param(_))
    ));
    assert!(matches!(
        LayerMap::new(MapPolicy::Explicit(vec![3, 2]), 2, 4),
        Err(Error::Param(_))
    ));
    assert!(matches!(
        LayerMap::new(MapPolicy::Explicit(vec![1, 5]), 2, 4),
        Err(Error::Param(_))
    ));
    let map = LayerMap::new(MapPolicy::Identity, 3, 3).unwrap();
    assert!(matches!(map.map(0), Err(Error::Param(_))));
    assert!(matches!(map.map(4), Err(Error::Param(_))));
}

#[test]
fn pred_distill_is_zero_on_equal_logits_for_all_temperatures() {
    let z = Tensor::<f32>::from_vec(&[2, 4], vec![0.3, -1.0, 2.0, 0.5, 1.0, 1.0, -2.0, 0.0])
        .unwrap();
    for t in [0.5, 1.0, 2.0, 10.0] {
        let loss = pred_distill_loss(&z, &z, t, true).unwrap().item().unwrap();
        assert_eq!(loss, 0.0, "T={t}");
    }
}

#[test]
fn pred_distill_hand_value() {
    let zt = Tensor::<f32>::from_vec(&[1, 2], vec![1.0, 0.0]).unwrap();
    let zs = Tensor::<f32>::from_vec(&[1, 2], vec![0.0, 1.0]).unwrap();
    let loss = pred_distill_loss(&zt, &zs, 1.0, true).unwrap().item().unwrap();
    assert!((loss - 0.4622).abs() < 1e-4, "loss = {loss}");
}

#[test]
fn pred_distill_detaches_teacher() {
    let zt = Tensor::<f32>::from_vec(&[1, 2], vec![1.0, 0.0])
        .unwrap()
        .trainable();
    let zs = Tensor::<f32>::from_vec(&[1, 2], vec![0.0, 1.0])
        .unwrap()
        .trainable();
    pred_distill_loss(&zt, &zs, 2.0, true)
        .unwrap()
        .backward()
        .unwrap();
    assert!(zt.grad().is_none());
    let gs = zs.grad().unwrap();
    assert!(gs.iter().any(|&v| v != 0.0));
}

#[test]
fn pred_distill_gradient_matches_finite_differences() {
    // Same formula instantiated at f64 so central differences are clean:
    // T^2 * KL(softmax(z_t / T) || softmax(z_s / T)) differentiated in z_s.
    let t = 2.0;
    let zt = vec![0.4, -0.2, 1.1];
    let zs = vec![-0.3, 0.8, 0.1];
    let f = |q: &[f64]| -> f64 {
        let p = Tensor::<f64>::from_vec(&[1, 3], zt.clone()).unwrap();
        let q = Tensor::<f64>::from_vec(&[1, 3], q.to_vec()).unwrap();
        let kl = p
            .softmax_temp(t)
            .unwrap()
            .kl_div(&q.softmax_temp(t).unwrap())
            .unwrap();
        kl.scale(t * t).item().unwrap()
    };
    let q = Tensor::<f64>::from_vec(&[1, 3], zs.clone()).unwrap().trainable();
    let p = Tensor::<f64>::from_vec(&[1, 3], zt.clone()).unwrap();
    let loss = p
        .detach()
        .softmax_temp(t)
        .unwrap()
        .kl_div(&q.softmax_temp(t).unwrap())
        .unwrap()
        .scale(t * t);
    loss.backward().unwrap();
    let analytic = q.grad().unwrap();
    let h = 1e-5;
    for i in 0..3 {
        let mut plus = zs.clone();
        plus[i] += h;
        let mut minus = zs.clone();
        minus[i] -= h;
        let fd = (f(&plus) - f(&minus)) / (2.0 * h);
        assert_relative_eq!(analytic[i], fd, max_relative = 1e-4);
    }
}

#[test]
fn t_squared_rescale_keeps_gradient_magnitude_stable() {
    // Near logit equality the pred-term gradient norm should be roughly
    // temperature-invariant once the T^2 factor is applied.
    let zt = Tensor::<f32>::from_vec(&[1, 4], vec![0.5, -0.1, 0.2, 0.0]).unwrap();
    let grad_norm = |t: f64| {
        let zs = Tensor::<f32>::from_vec(&[1, 4], vec![0.52, -0.13, 0.18, 0.01])
            .unwrap()
            .trainable();
        pred_distill_loss(&zt, &zs, t, true)
            .unwrap()
            .backward()
            .unwrap();
        let g = zs.grad().unwrap();
        g.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt()
    };
    let ratio = grad_norm(1.0) / grad_norm(2.0);
    assert!((0.5..=2.0).contains(&ratio), "ratio = {ratio}");
}

fn random_hiddens(shapes: (usize, usize, usize), count: usize, seed: u64) -> Vec<Tensor<f32>> {
    let (b, l, d) = shapes;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| Tensor::randn(&[b, l, d], 1.0, &mut rng))
        .collect()
}

#[test]
fn layerwise_loss_zero_under_identity_projection_with_copied_hiddens() {
    let map = LayerMap::new(MapPolicy::Identity, 2, 2).unwrap();
    let hidden_t = random_hiddens((1, 3, 4), 3, 1);
    let hidden_s: Vec<Tensor<f32>> = hidden_t.iter().map(|t| t.detach()).collect();
    let projections = vec![Tensor::<f32>::eye(4), Tensor::<f32>::eye(4)];
    let (loss, per_layer) = layerwise_loss(&hidden_t, &hidden_s, &projections, &map).unwrap();
    assert_eq!(loss.item().unwrap(), 0.0);
    assert_eq!(per_layer, vec![0.0, 0.0]);
}

#[test]
fn layerwise_loss_matches_hand_mse() {
    let map = LayerMap::new(MapPolicy::Explicit(vec![1]), 1, 1).unwrap();
    let h0 = Tensor::<f32>::zeros(&[1, 1, 2]);
    let ht = Tensor::<f32>::from_vec(&[1, 1, 2], vec![1.0, 2.0]).unwrap();
    let hs = Tensor::<f32>::from_vec(&[1, 1, 2], vec![3.0, 4.0]).unwrap();
    // W = [[1, 0], [0, 2]] projects [3, 4] to [3, 8];
    // mse([1,2],[3,8]) = (4 + 36) / 2 = 20.
    let w = Tensor::<f32>::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 2.0]).unwrap();
    let (loss, _) =
        layerwise_loss(&[h0.clone(), ht], &[h0, hs], &[w], &map).unwrap();
    assert_relative_eq!(loss.item().unwrap(), 20.0);
}

#[test]
fn layerwise_loss_requires_all_projections() {
    let map = LayerMap::new(MapPolicy::Identity, 2, 2).unwrap();
    let hidden = random_hiddens((1, 2, 4), 3, 2);
    let err = layerwise_loss(&hidden, &hidden, &[Tensor::<f32>::eye(4)], &map);
    assert!(matches!(err, Err(Error::Contract(_))));
}

#[test]
fn filter_linear_identity_passthrough_and_matmul_oracle() {
    let spec = linear_spec(4, 4, 1);
    let filter = build_filter(&spec, None).unwrap();
    set_linear(&filter, Tensor::<f32>::eye(4).to_vec(), vec![0.0; 4]);
    let h = Tensor::<f32>::from_vec(&[1, 2, 4], (0..8).map(|i| i as f32).collect()).unwrap();
    let out = filter.forward(&h).unwrap();
    assert_eq!(out.to_vec(), h.to_vec());

    // Against the tensor-core matmul oracle with a random W.
    let spec = linear_spec(4, 3, 2);
    let filter = build_filter(&spec, None).unwrap();
    let w = filter
        .named_params("f")
        .into_iter()
        .find(|(n, _)| n == "f.w")
        .unwrap()
        .1;
    let manual = h
        .reshape(&[2, 4])
        .unwrap()
        .matmul(&w)
        .unwrap()
        .reshape(&[1, 2, 3])
        .unwrap();
    let out = filter.forward(&h).unwrap();
    for (a, b) in out.to_vec().iter().zip(manual.to_vec().iter()) {
        assert_relative_eq!(a, b);
    }
}

#[test]
fn filter_zero_input_zero_bias_gives_zero_output_and_uniform_head() {
    let spec = linear_spec(4, 4, 3);
    let filter = build_filter(&spec, None).unwrap();
    let h = Tensor::<f32>::zeros(&[1, 2, 4]);
    assert!(filter.forward(&h).unwrap().to_vec().iter().all(|&v| v == 0.0));

    // Head bias is zero-initialized, so logits over zero input are zero and
    // the induced distribution is uniform.
    let logits = filter.head_forward(&h, None).unwrap();
    assert_eq!(logits.shape(), &[1, 2, 16]);
    let probs = logits.softmax_temp(1.0).unwrap().to_vec();
    for &p in &probs {
        assert_relative_eq!(p, 1.0 / 16.0, epsilon = 1e-6);
    }
}

#[test]
fn filter_mlp_shape_contract() {
    let spec = FilterSpec {
        arch: FilterArch::TwoLayerMlp,
        ..linear_spec(4, 6, 4)
    };
    let filter = build_filter(&spec, None).unwrap();
    let h = Tensor::<f32>::from_vec(&[2, 3, 4], vec![0.5; 24]).unwrap();
    assert_eq!(filter.forward(&h).unwrap().shape(), &[2, 3, 6]);
}

#[test]
fn filter_width_mismatch_is_dimension_error() {
    let filter = build_filter(&linear_spec(4, 4, 5), None).unwrap();
    let h = Tensor::<f32>::zeros(&[1, 2, 3]);
    assert!(matches!(filter.forward(&h), Err(Error::Dim { .. })));
}

#[test]
fn subsequent_filter_equals_donor_layer_forward() {
    let model = TransformerModel::new(lm_config(3, 8), 6).unwrap();
    let spec = FilterSpec {
        arch: FilterArch::SubsequentLayers(SubsequentDepth::Count(1)),
        in_dim: 8,
        out_dim: 8,
        head: HeadKind::Lm,
        vocab_size: 16,
        seed: 6,
    };
    let filter = build_filter(&spec, Some((&model, 1))).unwrap();
    let out = model.forward(&[1, 2, 3, 4], 1, None).unwrap();
    // Filter on H^1 must equal H^2 bit-exactly: it runs a copy of block 2.
    let filtered = filter.forward(&out.hidden[1]).unwrap();
    let expect = out.hidden[2].to_vec();
    assert_eq!(
        filtered.to_vec().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        expect.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
}

#[test]
fn subsequent_filter_at_last_layer_is_a_construction_error() {
    let model = TransformerModel::new(lm_config(3, 8), 7).unwrap();
    let spec = FilterSpec {
        arch: FilterArch::SubsequentLayers(SubsequentDepth::Count(1)),
        in_dim: 8,
        out_dim: 8,
        head: HeadKind::Lm,
        vocab_size: 16,
        seed: 7,
    };
    assert!(matches!(
        build_filter(&spec, Some((&model, 3))),
        Err(Error::Contract(_))
    ));
    // Width mismatch is unsupported.
    let bad = FilterSpec { in_dim: 4, ..spec };
    assert!(matches!(
        build_filter(&bad, Some((&model, 1))),
        Err(Error::Unsupported(_))
    ));
}

#[test]
fn detached_head_is_a_contract_error() {
    let mut filter = build_filter(&linear_spec(4, 4, 8), None).unwrap();
    filter.detach_head();
    let h = Tensor::<f32>::zeros(&[1, 2, 4]);
    assert!(filter.forward(&h).is_ok());
    assert!(matches!(
        filter.head_forward(&h, None),
        Err(Error::Contract(_))
    ));
}

#[test]
fn composed_head_forward_matches_manual_oracle() {
    let filter = build_filter(&linear_spec(4, 4, 9), None).unwrap();
    let params: std::collections::HashMap<String, Tensor<f32>> =
        filter.named_params("f").into_iter().collect();
    let h = Tensor::<f32>::from_vec(&[1, 2, 4], (0..8).map(|i| i as f32 * 0.1).collect())
        .unwrap();
    let manual = h
        .reshape(&[2, 4])
        .unwrap()
        .matmul(&params["f.w"])
        .unwrap()
        .broadcast_add(&params["f.b"])
        .unwrap()
        .matmul(&params["f.head.w"])
        .unwrap()
        .broadcast_add(&params["f.head.b"])
        .unwrap();
    let composed = filter.head_forward(&h, None).unwrap();
    for (a, b) in composed.to_vec().iter().zip(manual.to_vec().iter()) {
        assert_relative_eq!(a, b, epsilon = 1e-6);
    }
}

/// Build a one-filter teacher bank whose filter is identity and whose head
/// copies the model head, so the filtered loss replicates the task loss.
#[test]
fn stage1_loss_with_replicated_head_equals_task_loss() {
    let model = TransformerModel::new(lm_config(2, 8), 10).unwrap();
    let map = LayerMap::new(MapPolicy::Explicit(vec![2]), 1, 2).unwrap();
    let bank = build_bank(
        FilterArch::LinearProjection,
        &model,
        &map,
        Side::Teacher,
        8,
        11,
        "toy",
    )
    .unwrap();
    set_linear(bank.filter(0), Tensor::<f32>::eye(8).to_vec(), vec![0.0; 8]);
    for (name, p) in bank.filter(0).named_params("f") {
        if name == "f.head.w" {
            p.set_data(model.param("head.w").unwrap().to_vec()).unwrap();
        } else if name == "f.head.b" {
            p.set_data(model.param("head.b").unwrap().to_vec()).unwrap();
        }
    }
    model.set_frozen(true);
    let batch = lm_batch(vec![1, 2, 3, 4, 5, 6], 1);
    let s1 = stage1_loss(&model, &bank, &batch).unwrap();
    let task = model.task_loss(&batch).unwrap().item().unwrap();
    assert_relative_eq!(s1.total.item().unwrap(), task, epsilon = 1e-6);
}

#[test]
fn stage1_backward_leaves_model_grads_absent_and_requires_frozen_model() {
    let model = TransformerModel::new(lm_config(2, 8), 12).unwrap();
    let map = LayerMap::new(MapPolicy::SkipAlternate, 1, 2).unwrap();
    let bank = build_bank(
        FilterArch::LinearProjection,
        &model,
        &map,
        Side::Teacher,
        8,
        13,
        "toy",
    )
    .unwrap();
    let batch = lm_batch(vec![1, 2, 3, 4], 1);

    // Unfrozen model violates the freeze contract.
    assert!(matches!(
        stage1_loss(&model, &bank, &batch),
        Err(Error::Freeze(_))
    ));

    model.set_frozen(true);
    let s1 = stage1_loss(&model, &bank, &batch).unwrap();
    s1.total.backward().unwrap();
    for (name, p) in model.named_params() {
        assert!(p.grad().is_none(), "backbone {name} received a gradient");
    }
    let filter_grads = bank
        .named_params()
        .iter()
        .filter(|(_, p)| p.grad().is_some())
        .count();
    assert_eq!(filter_grads, bank.named_params().len());
}

#[test]
fn ted_loss_zero_for_identical_models_and_filters() {
    let teacher = TransformerModel::new(lm_config(2, 8), 14).unwrap();
    let map = LayerMap::new(MapPolicy::Identity, 2, 2).unwrap();
    let student = ted_core::model::init_student_from_teacher(&teacher, &lm_config(2, 8), &map)
        .unwrap();
    let mut bank_t = build_bank(
        FilterArch::LinearProjection,
        &teacher,
        &map,
        Side::Teacher,
        8,
        15,
        "toy",
    )
    .unwrap();
    let mut bank_s = bank_t.adopt_for_student(8).unwrap();
    bank_t.detach_heads();
    bank_s.detach_heads();
    bank_t.set_frozen(true);

    let tokens = [1u32, 2, 3, 4];
    let out_t = teacher.forward(&tokens, 1, None).unwrap();
    let out_s = student.forward(&tokens, 1, None).unwrap();
    let (loss, per_layer) = ted_loss(
        &out_t.hidden,
        &out_s.hidden,
        &SideTransform::Bank(&bank_t),
        &SideTransform::Bank(&bank_s),
        &map,
        TedVariant::Mse,
        2.0,
        true,
        None,
    )
    .unwrap();
    assert_eq!(loss.item().unwrap(), 0.0);
    assert_eq!(per_layer, vec![0.0, 0.0]);
}

#[test]
fn ted_loss_k1_matches_hand_mse_of_projected_pair() {
    let map = LayerMap::new(MapPolicy::Identity, 1, 1).unwrap();
    let h0 = Tensor::<f32>::zeros(&[1, 1, 2]);
    let ht = Tensor::<f32>::from_vec(&[1, 1, 2], vec![1.0, 0.0]).unwrap();
    let hs = Tensor::<f32>::from_vec(&[1, 1, 2], vec![0.0, 1.0]).unwrap();

    let mut make = |seed: u64, w: Vec<f32>, side| {
        let model = TransformerModel::new(lm_config(1, 2), seed).unwrap();
        let bank = build_bank(FilterArch::LinearProjection, &model, &map, side, 2, seed, "t")
            .unwrap();
        set_linear(bank.filter(0), w, vec![0.0; 2]);
        bank
    };
    // W_t = I; W_s = [[0, 1], [1, 0]] swaps coordinates.
    let mut bank_t = make(1, vec![1.0, 0.0, 0.0, 1.0], Side::Teacher);
    let mut bank_s = make(2, vec![0.0, 1.0, 1.0, 0.0], Side::Student);
    bank_t.detach_heads();
    bank_s.detach_heads();
    bank_t.set_frozen(true);

    // g_t(H_t) = [1, 0]; g_s(H_s) = [1, 0]; mse = 0. Change H_s to check a
    // non-zero case: H_s = [2, 0] -> g_s = [0, 2]; mse([1,0],[0,2]) = 2.5.
    let hs2 = Tensor::<f32>::from_vec(&[1, 1, 2], vec![2.0, 0.0]).unwrap();
    let (zero, _) = ted_loss(
        &[h0.clone(), ht.clone()],
        &[h0.clone(), hs],
        &SideTransform::Bank(&bank_t),
        &SideTransform::Bank(&bank_s),
        &map,
        TedVariant::Mse,
        2.0,
        true,
        None,
    )
    .unwrap();
    assert_relative_eq!(zero.item().unwrap(), 0.0);
    let (loss, _) = ted_loss(
        &[h0.clone(), ht],
        &[h0, hs2],
        &SideTransform::Bank(&bank_t),
        &SideTransform::Bank(&bank_s),
        &map,
        TedVariant::Mse,
        2.0,
        true,
        None,
    )
    .unwrap();
    assert_relative_eq!(loss.item().unwrap(), 2.5);
}

#[test]
fn ted_loss_gradient_flow_respects_the_freeze_boundary() {
    let teacher = TransformerModel::new(lm_config(2, 8), 16).unwrap();
    let student = TransformerModel::new(lm_config(2, 8), 17).unwrap();
    let map = LayerMap::new(MapPolicy::Identity, 2, 2).unwrap();
    let mut bank_t =
        build_bank(FilterArch::LinearProjection, &teacher, &map, Side::Teacher, 8, 18, "t")
            .unwrap();
    let mut bank_s =
        build_bank(FilterArch::LinearProjection, &student, &map, Side::Student, 8, 19, "t")
            .unwrap();
    bank_t.detach_heads();
    bank_s.detach_heads();

    // Unfrozen teacher bank is rejected.
    let tokens = [1u32, 2, 3, 4];
    let out_t = teacher.forward(&tokens, 1, None).unwrap();
    let out_s = student.forward(&tokens, 1, None).unwrap();
    let err = ted_loss(
        &out_t.hidden,
        &out_s.hidden,
        &SideTransform::Bank(&bank_t),
        &SideTransform::Bank(&bank_s),
        &map,
        TedVariant::Mse,
        2.0,
        true,
        None,
    );
    assert!(matches!(err, Err(Error::Freeze(_))));

    bank_t.set_frozen(true);
    teacher.set_frozen(true);
    let out_t = teacher.forward(&tokens, 1, None).unwrap();
    let out_s = student.forward(&tokens, 1, None).unwrap();
    let (loss, _) = ted_loss(
        &out_t.hidden,
        &out_s.hidden,
        &SideTransform::Bank(&bank_t),
        &SideTransform::Bank(&bank_s),
        &map,
        TedVariant::Mse,
        2.0,
        true,
        None,
    )
    .unwrap();
    loss.backward().unwrap();

    for (name, p) in teacher.named_params() {
        assert!(p.grad().is_none(), "teacher {name} received a gradient");
    }
    for (name, p) in bank_t.named_params() {
        assert!(p.grad().is_none(), "teacher filter {name} received a gradient");
    }
    assert!(student
        .named_params()
        .iter()
        .any(|(_, p)| p.grad().is_some()));
    assert!(bank_s
        .named_params()
        .iter()
        .all(|(_, p)| p.grad().is_some()));
}

#[test]
fn ted_variant_head_state_mismatches_are_contract_errors() {
    let model = TransformerModel::new(lm_config(2, 8), 20).unwrap();
    let map = LayerMap::new(MapPolicy::Identity, 2, 2).unwrap();
    let bank_with_heads =
        build_bank(FilterArch::LinearProjection, &model, &map, Side::Teacher, 8, 21, "t")
            .unwrap();
    bank_with_heads.set_frozen(true);
    let out = model.forward(&[1, 2, 3], 1, None).unwrap();

    // MSE with retained heads: contract error.
    let err = ted_loss(
        &out.hidden,
        &out.hidden,
        &SideTransform::Bank(&bank_with_heads),
        &SideTransform::Bank(&bank_with_heads),
        &map,
        TedVariant::Mse,
        2.0,
        true,
        None,
    );
    assert!(matches!(err, Err(Error::Contract(_))));

    // KL without banks on both sides: contract error.
    let err = ted_loss(
        &out.hidden,
        &out.hidden,
        &SideTransform::Identity,
        &SideTransform::Bank(&bank_with_heads),
        &map,
        TedVariant::Kl,
        2.0,
        true,
        None,
    );
    assert!(matches!(err, Err(Error::Contract(_))));

    // KL with heads on both sides works and is zero for identical inputs.
    let (loss, _) = ted_loss(
        &out.hidden,
        &out.hidden,
        &SideTransform::Bank(&bank_with_heads),
        &SideTransform::Bank(&bank_with_heads),
        &map,
        TedVariant::Kl,
        2.0,
        true,
        None,
    )
    .unwrap();
    assert_eq!(loss.item().unwrap(), 0.0);
}

fn ft_config() -> DistillConfig {
    DistillConfig {
        mode: DistillMode::Ft,
        alpha1: 0.0,
        alpha2: 0.0,
        temperature: 2.0,
        ted_variant: TedVariant::Mse,
        t2_rescale: true,
        teacher_filter_init: FilterInit::None,
        student_filter_init: FilterInit::None,
    }
}

#[test]
fn stage2_ft_equals_task_loss_with_bit_identical_gradients() {
    let student = TransformerModel::new(lm_config(2, 8), 22).unwrap();
    let map = LayerMap::new(MapPolicy::Identity, 2, 2).unwrap();
    let batch = lm_batch(vec![1, 2, 3, 4, 5, 6, 7, 8], 2);
    let ctx = DistillContext {
        teacher: None,
        teacher_side: None,
        student_side: None,
        projections: None,
        map: &map,
    };
    let parts = stage2_objective(&ft_config(), &batch, &student, &ctx, None).unwrap();
    let task = student.task_loss(&batch).unwrap();
    assert_eq!(parts.total.item().unwrap(), task.item().unwrap());

    // Gradients bit-for-bit equal to plain fine-tuning.
    for (_, p) in student.named_params() {
        p.zero_grad();
    }
    parts.total.backward().unwrap();
    let g1: Vec<Vec<u32>> = student
        .named_params()
        .iter()
        .map(|(_, p)| p.grad().unwrap().iter().map(|v| v.to_bits()).collect())
        .collect();
    for (_, p) in student.named_params() {
        p.zero_grad();
    }
    student
        .task_loss(&batch)
        .unwrap()
        .backward()
        .unwrap();
    let g2: Vec<Vec<u32>> = student
        .named_params()
        .iter()
        .map(|(_, p)| p.grad().unwrap().iter().map(|v| v.to_bits()).collect())
        .collect();
    assert_eq!(g1, g2);
}

#[test]
fn stage2_kd_recomposes_task_plus_weighted_pred() {
    let teacher = TransformerModel::new(lm_config(2, 8), 23).unwrap();
    let student = TransformerModel::new(lm_config(2, 8), 24).unwrap();
    teacher.set_frozen(true);
    let map = LayerMap::new(MapPolicy::Identity, 2, 2).unwrap();
    let batch = lm_batch(vec![1, 2, 3, 4], 1);
    let cfg = DistillConfig {
        mode: DistillMode::Kd,
        alpha1: 2.5,
        alpha2: 0.0,
        ..ft_config()
    };
    let ctx = DistillContext {
        teacher: Some(&teacher),
        teacher_side: None,
        student_side: None,
        projections: None,
        map: &map,
    };
    let parts = stage2_objective(&cfg, &batch, &student, &ctx, None).unwrap();

    let task = student.task_loss(&batch).unwrap().item().unwrap() as f64;
    let zt = teacher.forward_batch(&batch).unwrap().logits;
    let zs = student.forward_batch(&batch).unwrap().logits;
    let pred = pred_distill_loss(&zt, &zs, 2.0, true).unwrap().item().unwrap() as f64;
    let total = parts.total.item().unwrap() as f64;
    assert_relative_eq!(total, task + 2.5 * pred, max_relative = 1e-6);
    assert_relative_eq!(parts.task, task, max_relative = 1e-6);
    assert_relative_eq!(parts.pred, pred, max_relative = 1e-6);
}

#[test]
fn stage2_ted_with_zero_filters_equals_kd_exactly() {
    let teacher = TransformerModel::new(lm_config(2, 8), 25).unwrap();
    let student = TransformerModel::new(lm_config(2, 8), 26).unwrap();
    teacher.set_frozen(true);
    let map = LayerMap::new(MapPolicy::Identity, 2, 2).unwrap();
    let batch = lm_batch(vec![3, 1, 4, 1], 1);

    let mut bank_t =
        build_bank(FilterArch::LinearProjection, &teacher, &map, Side::Teacher, 8, 27, "t")
            .unwrap();
    let mut bank_s =
        build_bank(FilterArch::LinearProjection, &student, &map, Side::Student, 8, 28, "t")
            .unwrap();
    for bank in [&bank_t, &bank_s] {
        for k in 0..bank.len() {
            set_linear(bank.filter(k), vec![0.0; 64], vec![0.0; 8]);
        }
    }
    bank_t.detach_heads();
    bank_s.detach_heads();
    bank_t.set_frozen(true);

    let ted_cfg = DistillConfig {
        mode: DistillMode::Ted,
        alpha1: 2.5,
        alpha2: 0.1,
        ..ft_config()
    };
    let kd_cfg = DistillConfig {
        mode: DistillMode::Kd,
        alpha1: 2.5,
        alpha2: 0.0,
        ..ft_config()
    };
    let ted_parts = stage2_objective(
        &ted_cfg,
        &batch,
        &student,
        &DistillContext {
            teacher: Some(&teacher),
            teacher_side: Some(SideTransform::Bank(&bank_t)),
            student_side: Some(SideTransform::Bank(&bank_s)),
            projections: None,
            map: &map,
        },
        None,
    )
    .unwrap();
    let kd_parts = stage2_objective(
        &kd_cfg,
        &batch,
        &student,
        &DistillContext {
            teacher: Some(&teacher),
            teacher_side: None,
            student_side: None,
            projections: None,
            map: &map,
        },
        None,
    )
    .unwrap();
    assert_eq!(ted_parts.distill, 0.0);
    assert_eq!(
        ted_parts.total.item().unwrap(),
        kd_parts.total.item().unwrap()
    );
}

#[test]
fn mode_lattice_ted_identity_teacher_filters_reproduce_lwd_values() {
    // TED with identity teacher filters and linear student filters equals
    // LWD when the LWD projections are set to the student filter weights.
    let teacher = TransformerModel::new(lm_config(2, 8), 29).unwrap();
    let student = TransformerModel::new(lm_config(2, 8), 30).unwrap();
    teacher.set_frozen(true);
    let map = LayerMap::new(MapPolicy::Identity, 2, 2).unwrap();
    let tokens = [2u32, 7, 1, 3];
    let out_t = teacher.forward(&tokens, 1, None).unwrap();
    let out_s = student.forward(&tokens, 1, None).unwrap();

    let mut bank_s =
        build_bank(FilterArch::LinearProjection, &student, &map, Side::Student, 8, 31, "t")
            .unwrap();
    bank_s.detach_heads();
    // Zero the biases so the student filters are pure projections.
    let mut weights = Vec::new();
    for k in 0..bank_s.len() {
        for (name, p) in bank_s.filter(k).named_params("f") {
            if name == "f.b" {
                p.set_data(vec![0.0; 8]).unwrap();
            } else if name == "f.w" {
                weights.push(p.clone());
            }
        }
    }

    let (ted, ted_layers) = ted_loss(
        &out_t.hidden,
        &out_s.hidden,
        &SideTransform::Identity,
        &SideTransform::Bank(&bank_s),
        &map,
        TedVariant::Mse,
        2.0,
        true,
        None,
    )
    .unwrap();
    let projections: Vec<Tensor<f32>> = weights;
    let (lwd, lwd_layers) =
        layerwise_loss(&out_t.hidden, &out_s.hidden, &projections, &map).unwrap();
    assert_eq!(ted.item().unwrap(), lwd.item().unwrap());
    assert_eq!(ted_layers, lwd_layers);
}

#[test]
fn stage2_missing_components_are_configuration_errors() {
    let student = TransformerModel::new(lm_config(2, 8), 32).unwrap();
    let map = LayerMap::new(MapPolicy::Identity, 2, 2).unwrap();
    let batch = lm_batch(vec![1, 2, 3, 4], 1);
    let kd_cfg = DistillConfig {
        mode: DistillMode::Kd,
        alpha1: 2.5,
        alpha2: 0.0,
        ..ft_config()
    };
    // KD without a teacher.
    let err = stage2_objective(
        &kd_cfg,
        &batch,
        &student,
        &DistillContext {
            teacher: None,
            teacher_side: None,
            student_side: None,
            projections: None,
            map: &map,
        },
        None,
    );
    assert!(matches!(err, Err(Error::Config(_))));

    // LWD without projections.
    let teacher = TransformerModel::new(lm_config(2, 8), 33).unwrap();
    teacher.set_frozen(true);
    let lwd_cfg = DistillConfig {
        mode: DistillMode::Lwd,
        alpha1: 2.5,
        alpha2: 0.1,
        ..ft_config()
    };
    let err = stage2_objective(
        &lwd_cfg,
        &batch,
        &student,
        &DistillContext {
            teacher: Some(&teacher),
            teacher_side: None,
            student_side: None,
            projections: None,
            map: &map,
        },
        None,
    );
    assert!(matches!(err, Err(Error::Config(_))));

    // Unfrozen teacher violates the freeze contract.
    let unfrozen = TransformerModel::new(lm_config(2, 8), 34).unwrap();
    let err = stage2_objective(
        &kd_cfg,
        &batch,
        &student,
        &DistillContext {
            teacher: Some(&unfrozen),
            teacher_side: None,
            student_side: None,
            projections: None,
            map: &map,
        },
        None,
    );
    assert!(matches!(err, Err(Error::Freeze(_))));
}

#[test]
fn distill_terms_are_nonnegative_and_bound_total_below_by_task() {
    let teacher = TransformerModel::new(lm_config(2, 8), 35).unwrap();
    let student = TransformerModel::new(lm_config(2, 8), 36).unwrap();
    teacher.set_frozen(true);
    let map = LayerMap::new(MapPolicy::Identity, 2, 2).unwrap();
    let batch = lm_batch(vec![5, 2, 7, 1, 3, 3, 2, 8], 2);
    let mut bank_t =
        build_bank(FilterArch::LinearProjection, &teacher, &map, Side::Teacher, 8, 37, "t")
            .unwrap();
    let mut bank_s =
        build_bank(FilterArch::LinearProjection, &student, &map, Side::Student, 8, 38, "t")
            .unwrap();
    bank_t.detach_heads();
    bank_s.detach_heads();
    bank_t.set_frozen(true);
    let cfg = DistillConfig {
        mode: DistillMode::Ted,
        alpha1: 2.5,
        alpha2: 0.1,
        ..ft_config()
    };
    let parts = stage2_objective(
        &cfg,
        &batch,
        &student,
        &DistillContext {
            teacher: Some(&teacher),
            teacher_side: Some(SideTransform::Bank(&bank_t)),
            student_side: Some(SideTransform::Bank(&bank_s)),
            projections: None,
            map: &map,
        },
        None,
    )
    .unwrap();
    assert!(parts.pred >= 0.0);
    assert!(parts.distill >= 0.0);
    assert!(parts.per_layer.iter().all(|&v| v >= 0.0));
    let total = parts.total.item().unwrap() as f64;
    assert!(total >= parts.task - 1e-6);
}
