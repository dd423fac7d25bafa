use super::*;
use approx::assert_abs_diff_eq;

fn small_config() -> EncoderConfig {
    EncoderConfig {
        d_model: 16,
        blocks: 2,
        heads: 4,
        d_ff: 16,
        dropout_embed: 0.1,
        dropout_attn: 0.1,
        dropout_ff: 0.1,
        patch: PatchConfig { patch_len: 4, stride: 4 },
        channels: 1,
        window: 20, // 5 patches + padded -> 6 tokens
    }
}

fn sample_input<F: Scalar>(config: &EncoderConfig, seed: u64) -> Tensor<F> {
    let mut rng = RngStream::new(seed);
    let n = config.num_patches() * config.token_width();
    Tensor::from_vec(
        vec![config.num_patches(), config.token_width()],
        (0..n).map(|_| F::from_f64(rng.normal())).collect(),
    )
}

#[test]
fn init_is_deterministic_per_seed() {
    let config = small_config();
    let a: EncoderParams<f64> = init_encoder(&config, 5).unwrap();
    let b: EncoderParams<f64> = init_encoder(&config, 5).unwrap();
    let mut identical = true;
    a.visit(&mut |name, t, _| {
        let mut other = None;
        b.visit(&mut |n2, t2, _| {
            if n2 == name {
                other = Some(t2.data().to_vec());
            }
        });
        if other.as_deref() != Some(t.data()) {
            identical = false;
        }
    });
    assert!(identical);

    let c: EncoderParams<f64> = init_encoder(&config, 6).unwrap();
    assert_ne!(a.w_token.data(), c.w_token.data());
}

#[test]
fn init_rejects_indivisible_heads() {
    let mut config = small_config();
    config.d_model = 8;
    config.heads = 3;
    assert!(matches!(
        init_encoder::<f64>(&config, 0),
        Err(EncoderError::ConfigInvalid(_))
    ));
}

#[test]
fn init_weight_std_near_target() {
    let mut config = small_config();
    config.d_model = 64;
    config.heads = 4;
    config.patch = PatchConfig { patch_len: 64, stride: 64 };
    config.window = 64;
    config.channels = 1;
    let params: EncoderParams<f64> = init_encoder(&config, 1).unwrap();
    // w_token is 64 x 64: Glorot uniform std = sqrt(2 / (in + out))
    let target = (2.0 / 128.0f64).sqrt();
    let data = params.w_token.data();
    let mean: f64 = data.iter().sum::<f64>() / data.len() as f64;
    let std = (data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / data.len() as f64).sqrt();
    assert!((std - target).abs() / target < 0.2, "std {std} vs target {target}");
}

#[test]
fn encoder_input_prepends_instance_token() {
    let config = small_config();
    let params: EncoderParams<f64> = init_encoder(&config, 0).unwrap();
    let mut tape = Tape::new();
    let x = sample_input::<f64>(&config, 1);
    let x_in = build_encoder_input(&mut tape, &x, &params).unwrap();
    assert_eq!(x_in.shape(), &[config.seq_len(), config.token_width()]);
    let width = config.token_width();
    assert_eq!(&x_in.data()[..width], params.cls_token.data());
    assert_eq!(&x_in.data()[width..], x.data());
}

#[test]
fn instance_token_receives_gradient_through_instance_embedding() {
    let config = small_config();
    let params: EncoderParams<f64> = init_encoder(&config, 0).unwrap();
    let mut tape = Tape::new();
    let leased = params.lease(&mut tape);
    let x = sample_input::<f64>(&config, 1);
    let x_in = build_encoder_input(&mut tape, &x, &leased).unwrap();
    let mut rng = RngStream::new(0);
    let z = encode(&mut tape, &x_in, &leased, &config, false, &mut rng).unwrap();
    let dual = split_embeddings(&mut tape, &z).unwrap();
    let loss = tape.sum_all(&dual.z_i);
    let grads = tape.backward(&loss).unwrap();
    let g = grads.wrt(&leased.cls_token).unwrap();
    assert!(g.data().iter().any(|&v| v != 0.0));
}

#[test]
fn reconstruction_path_never_touches_instance_token() {
    // a loss that reads only the patch embeddings leaves the instance token
    // with exactly zero gradient
    let config = small_config();
    let params: EncoderParams<f64> = init_encoder(&config, 0).unwrap();
    let mut tape = Tape::new();
    let leased = params.lease(&mut tape);
    let x = sample_input::<f64>(&config, 1);
    let x_in = build_encoder_input(&mut tape, &x, &leased).unwrap();
    let mut rng = RngStream::new(0);
    let z = encode(&mut tape, &x_in, &leased, &config, true, &mut rng).unwrap();
    let dual = split_embeddings(&mut tape, &z).unwrap();
    let loss = tape.sum_all(&dual.z_t);
    let grads = tape.backward(&loss).unwrap();
    let g_cls = grads.wrt(&leased.cls_token).unwrap();
    assert!(g_cls.data().iter().all(|&v| v == 0.0), "instance token leaked into patch loss");
    // row 0 of the positional encoding is likewise unreachable
    let g_pe = grads.wrt(&leased.pe).unwrap();
    let d = config.d_model;
    assert!(g_pe.data()[..d].iter().all(|&v| v == 0.0));
    // while the patch rows of PE do receive gradient
    assert!(g_pe.data()[d..].iter().any(|&v| v != 0.0));
}

#[test]
fn eval_mode_is_deterministic() {
    let config = small_config();
    let params: EncoderParams<f64> = init_encoder(&config, 0).unwrap();
    let x = sample_input::<f64>(&config, 1);
    let run = || {
        let mut tape = Tape::inference();
        let x_in = build_encoder_input(&mut tape, &x, &params).unwrap();
        let mut rng = RngStream::new(99);
        encode(&mut tape, &x_in, &params, &config, false, &mut rng).unwrap()
    };
    let z1 = run();
    let z2 = run();
    assert_eq!(z1.data(), z2.data());
}

#[test]
fn training_mode_dropout_produces_distinct_views() {
    let config = small_config();
    let params: EncoderParams<f64> = init_encoder(&config, 0).unwrap();
    let x = sample_input::<f64>(&config, 1);
    for seed in 0..10 {
        let mut tape = Tape::inference();
        let x_in = build_encoder_input(&mut tape, &x, &params).unwrap();
        let mut rng = RngStream::new(seed);
        let z1 = encode(&mut tape, &x_in, &params, &config, true, &mut rng).unwrap();
        let z2 = encode(&mut tape, &x_in, &params, &config, true, &mut rng).unwrap();
        let max_diff = z1
            .data()
            .iter()
            .zip(z2.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max_diff > 0.0, "views identical at seed {seed}");
    }
}

#[test]
fn patch_order_and_last_patch_matter() {
    let config = small_config();
    let params: EncoderParams<f64> = init_encoder(&config, 0).unwrap();
    let x = sample_input::<f64>(&config, 1);
    let rows = config.num_patches();
    let width = config.token_width();

    let encode_eval = |input: &Tensor<f64>| {
        let mut tape = Tape::inference();
        let x_in = build_encoder_input(&mut tape, input, &params).unwrap();
        let mut rng = RngStream::new(0);
        encode(&mut tape, &x_in, &params, &config, false, &mut rng).unwrap()
    };
    let z = encode_eval(&x);

    // positional encoding: swapping two patch rows changes the output
    let mut swapped = x.data().to_vec();
    for j in 0..width {
        swapped.swap(j, width + j);
    }
    let z_swapped = encode_eval(&Tensor::from_vec(vec![rows, width], swapped));
    assert_ne!(z.data(), z_swapped.data());

    // bidirectionality: perturbing the LAST patch changes the FIRST patch
    // embedding (row 1 of z, since row 0 is the instance row)
    let mut bumped = x.data().to_vec();
    bumped[(rows - 1) * width] += 1.0;
    let z_bumped = encode_eval(&Tensor::from_vec(vec![rows, width], bumped));
    let d = config.d_model;
    let first_patch_before = &z.data()[d..2 * d];
    let first_patch_after = &z_bumped.data()[d..2 * d];
    assert_ne!(first_patch_before, first_patch_after);
}

#[test]
fn split_embeddings_slices_rows() {
    let mut tape: Tape<f64> = Tape::new();
    let z = Tensor::from_vec(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    let dual = split_embeddings(&mut tape, &z).unwrap();
    assert_eq!(dual.z_i.shape(), &[2]);
    assert_eq!(dual.z_i.data(), &[1.0, 2.0]);
    assert_eq!(dual.z_t.shape(), &[2, 2]);
    assert_eq!(dual.z_t.data(), &[3.0, 4.0, 5.0, 6.0]);

    // reassembly reproduces z
    let z_i_row = tape.reshape(&dual.z_i, vec![1, 2]).unwrap();
    let back = tape.concat(&[&z_i_row, &dual.z_t], 0).unwrap();
    assert_eq!(back.data(), z.data());

    let single = Tensor::from_vec(vec![1, 2], vec![1.0, 2.0]);
    assert!(matches!(
        split_embeddings(&mut tape, &single),
        Err(EncoderError::TooFewRows(1))
    ));
}

#[test]
fn pooling_methods() {
    let mut tape: Tape<f64> = Tape::new();
    let z_t = Tensor::from_vec(vec![2, 2], vec![1.0, 1.0, 3.0, 3.0]);
    assert_eq!(pool(&mut tape, &z_t, PoolMethod::Gap).unwrap().data(), &[2.0, 2.0]);
    assert_eq!(pool(&mut tape, &z_t, PoolMethod::Last).unwrap().data(), &[3.0, 3.0]);
    let all = pool(&mut tape, &z_t, PoolMethod::All).unwrap();
    assert_eq!(all.shape(), &[4]);
    assert_eq!(all.data(), &[1.0, 1.0, 3.0, 3.0]);

    // single row: last == gap == row 0
    let one = Tensor::from_vec(vec![1, 3], vec![1.0, 2.0, 3.0]);
    assert_eq!(
        pool(&mut tape, &one, PoolMethod::Last).unwrap().data(),
        pool(&mut tape, &one, PoolMethod::Gap).unwrap().data()
    );
}

#[test]
fn anisotropy_reference_points() {
    // identical rows
    let e = [1.0, 2.0, 1.0, 2.0, 1.0, 2.0];
    assert_abs_diff_eq!(anisotropy_score(&e, 3, 2).unwrap(), 1.0, epsilon = 1e-12);
    // orthonormal basis
    let e = [1.0, 0.0, 0.0, 1.0];
    assert_abs_diff_eq!(anisotropy_score(&e, 2, 2).unwrap(), 0.0, epsilon = 1e-12);
    // antipodal pair
    let e = [1.0, 0.0, -1.0, 0.0];
    assert_abs_diff_eq!(anisotropy_score(&e, 2, 2).unwrap(), -1.0, epsilon = 1e-12);
    assert!(matches!(
        anisotropy_score(&[1.0], 1, 1),
        Err(EncoderError::TooFewEmbeddings(1))
    ));
}

#[test]
fn token_projection_gradient_matches_finite_differences() {
    // end-to-end through the whole encoder: d sum(z) / d w_token
    let mut config = small_config();
    config.dropout_embed = 0.0;
    config.dropout_attn = 0.0;
    config.dropout_ff = 0.0;
    let params: EncoderParams<f64> = init_encoder(&config, 2).unwrap();
    let x = sample_input::<f64>(&config, 3);

    let mut tape = Tape::new();
    let leased = params.lease(&mut tape);
    let x_in = build_encoder_input(&mut tape, &x, &leased).unwrap();
    let mut rng = RngStream::new(0);
    let z = encode(&mut tape, &x_in, &leased, &config, false, &mut rng).unwrap();
    let loss = tape.sum_all(&z);
    let analytic = tape.backward(&loss).unwrap().wrt(&leased.w_token).unwrap();

    let numeric = crate::tensor::finite_difference_grad(
        |w| {
            let mut probe = params.clone();
            probe.w_token = w.clone();
            let mut t = Tape::inference();
            let x_in = build_encoder_input(&mut t, &x, &probe).unwrap();
            let mut rng = RngStream::new(0);
            let z = encode(&mut t, &x_in, &probe, &config, false, &mut rng).unwrap();
            t.sum_all(&z).item()
        },
        &params.w_token,
        1e-5,
    );
    assert!(crate::tensor::max_rel_err(&analytic, &numeric) < 1e-4);
}

#[test]
fn every_gradient_leaf_is_a_registered_parameter() {
    let config = small_config();
    let params: EncoderParams<f64> = init_encoder(&config, 0).unwrap();
    let mut tape = Tape::new();
    let leased = params.lease(&mut tape);
    let mut registry = std::collections::HashSet::new();
    leased.visit(&mut |_, t, _| {
        registry.insert(t.node_id().unwrap());
    });
    let x = sample_input::<f64>(&config, 1);
    let x_in = build_encoder_input(&mut tape, &x, &leased).unwrap();
    let mut rng = RngStream::new(0);
    let z = encode(&mut tape, &x_in, &leased, &config, true, &mut rng).unwrap();
    let loss = tape.sum_all(&z);
    tape.backward(&loss).unwrap();
    for leaf in tape.grad_leaves() {
        assert!(registry.contains(&leaf), "leaf node {leaf} not in the parameter registry");
    }
}
