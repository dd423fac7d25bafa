use super::*;
use crate::data::PatchConfig;
use crate::encoder::init_encoder;
use approx::assert_abs_diff_eq;

fn config() -> EncoderConfig {
    EncoderConfig {
        d_model: 16,
        blocks: 1,
        heads: 2,
        d_ff: 16,
        dropout_embed: 0.1,
        dropout_attn: 0.1,
        dropout_ff: 0.1,
        patch: PatchConfig { patch_len: 4, stride: 4 },
        channels: 1,
        window: 16, // 4 tokens + padded -> 5
    }
}

fn batch(config: &EncoderConfig, n: usize, seed: u64) -> Vec<Tensor<f64>> {
    let mut rng = RngStream::new(seed);
    (0..n)
        .map(|_| {
            let numel = config.num_patches() * config.token_width();
            Tensor::from_vec(
                vec![config.num_patches(), config.token_width()],
                (0..numel).map(|_| rng.normal()).collect(),
            )
        })
        .collect()
}

#[test]
fn predictive_loss_zero_for_perfect_reconstruction() {
    // rig the head to the identity: d_model == token_width, w = I, b = 0
    let mut tape = Tape::new();
    let d = 4;
    let mut w = vec![0.0; d * d];
    for i in 0..d {
        w[i * d + i] = 1.0;
    }
    let head = PredictiveHead {
        w: Tensor::from_vec(vec![d, d], w),
        b: Tensor::zeros(vec![d]),
    };
    let z_t = Tensor::from_vec(vec![3, d], (0..3 * d).map(|i| i as f64 * 0.1).collect());
    let loss = predictive_loss(&mut tape, &z_t, &z_t.clone(), &head).unwrap();
    assert_eq!(loss.item(), 0.0);
}

#[test]
fn predictive_loss_unit_offset_is_one() {
    let mut tape = Tape::new();
    let d = 4;
    let mut w = vec![0.0; d * d];
    for i in 0..d {
        w[i * d + i] = 1.0;
    }
    let head = PredictiveHead {
        w: Tensor::from_vec(vec![d, d], w),
        b: Tensor::filled(vec![d], 1.0), // prediction = target + 1 everywhere
    };
    let z_t = Tensor::from_vec(vec![2, d], (0..2 * d).map(|i| i as f64).collect());
    let loss = predictive_loss(&mut tape, &z_t, &z_t.clone(), &head).unwrap();
    assert_abs_diff_eq!(loss.item(), 1.0, epsilon = 1e-12);
}

#[test]
fn predictive_loss_matches_hand_arithmetic() {
    let mut tape = Tape::new();
    let head = PredictiveHead {
        w: Tensor::from_vec(vec![4, 2], vec![0.5, -0.2, 0.3, 0.1, -0.4, 0.7, 0.2, 0.6]),
        b: Tensor::from_vec(vec![4], vec![0.1, -0.1, 0.2, 0.0]),
    };
    let z_t = Tensor::from_vec(vec![2, 2], vec![1.0, 2.0, -0.5, 0.3]);
    let target = Tensor::from_vec(vec![2, 4], vec![0.2, 0.4, -0.3, 1.0, 0.0, -0.2, 0.5, 0.1]);
    let loss = predictive_loss(&mut tape, &z_t, &target, &head).unwrap();

    // independent elementwise oracle
    let w = [0.5, -0.2, 0.3, 0.1, -0.4, 0.7, 0.2, 0.6];
    let b = [0.1, -0.1, 0.2, 0.0];
    let z = [[1.0, 2.0], [-0.5, 0.3]];
    let t = [[0.2, 0.4, -0.3, 1.0], [0.0, -0.2, 0.5, 0.1]];
    let mut acc = 0.0f64;
    for r in 0..2 {
        for o in 0..4 {
            let pred: f64 = z[r][0] * w[o * 2] + z[r][1] * w[o * 2 + 1] + b[o];
            acc += (pred - t[r][o]).powi(2);
        }
    }
    assert_abs_diff_eq!(loss.item(), acc / 8.0, epsilon = 1e-12);
}

#[test]
fn predictive_loss_shape_mismatch_errors() {
    let mut tape = Tape::new();
    let head = PredictiveHead {
        w: Tensor::<f64>::from_vec(vec![4, 2], vec![0.0; 8]),
        b: Tensor::zeros(vec![4]),
    };
    let z_t = Tensor::from_vec(vec![2, 2], vec![0.0; 4]);
    let target = Tensor::from_vec(vec![3, 4], vec![0.0; 12]);
    assert!(predictive_loss(&mut tape, &z_t, &target, &head).is_err());
}

#[test]
fn zero_dropout_makes_the_two_views_identical() {
    let mut cfg = config();
    cfg.dropout_embed = 0.0;
    cfg.dropout_attn = 0.0;
    cfg.dropout_ff = 0.0;
    let params = init_encoder::<f64>(&cfg, 0).unwrap();
    let xs = batch(&cfg, 2, 1);
    let mut tape = Tape::inference();
    let mut rng = RngStream::new(7);
    let (v1, v2) = two_view_forward(&mut tape, &xs, &params, &cfg, &mut rng).unwrap();
    for (a, b) in v1.iter().zip(&v2) {
        assert_eq!(a.z_i.data(), b.z_i.data());
        assert_eq!(a.z_t.data(), b.z_t.data());
    }
}

#[test]
fn dropout_makes_the_two_views_differ() {
    let cfg = config();
    let params = init_encoder::<f64>(&cfg, 0).unwrap();
    let xs = batch(&cfg, 2, 1);
    let mut tape = Tape::inference();
    let mut rng = RngStream::new(7);
    let (v1, v2) = two_view_forward(&mut tape, &xs, &params, &cfg, &mut rng).unwrap();
    assert_ne!(v1[0].z_i.data(), v2[0].z_i.data());
}

#[test]
fn view1_gradients_do_not_depend_on_view2_masks() {
    let cfg = config();
    let params = init_encoder::<f64>(&cfg, 0).unwrap();
    let xs = batch(&cfg, 1, 1);

    let grad_with_view2_seed = |view2_seed: u64| {
        let mut tape = Tape::new();
        let leased = params.lease(&mut tape);
        let mut rng1 = RngStream::new(42); // identical view-1 masks
        let d1 = forward_window(&mut tape, &xs[0], &leased, &cfg, true, &mut rng1).unwrap();
        let mut rng2 = RngStream::new(view2_seed); // view-2 masks vary
        let _d2 = forward_window(&mut tape, &xs[0], &leased, &cfg, true, &mut rng2).unwrap();
        let loss = tape.sum_all(&d1.z_t); // ignores view 2 entirely
        let grads = tape.backward(&loss).unwrap();
        grads.wrt(&leased.w_token).unwrap().data().to_vec()
    };
    let g_a = grad_with_view2_seed(100);
    let g_b = grad_with_view2_seed(200);
    assert_eq!(g_a, g_b);
}

fn rigged_identityish_head(dim: usize) -> ContrastiveHead<f64> {
    // maps any vector to (approximately) the all-ones direction
    let db = bottleneck_width(dim);
    ContrastiveHead {
        w1: Tensor::filled(vec![db, dim], 1.0 / dim as f64),
        b1: Tensor::zeros(vec![db]),
        bn_gamma: Tensor::filled(vec![db], 1.0),
        bn_beta: Tensor::zeros(vec![db]),
        w2: Tensor::filled(vec![dim, db], 1.0 / db as f64),
        b2: Tensor::zeros(vec![dim]),
    }
}

#[test]
fn aligned_views_through_identityish_head_reach_minus_one() {
    let dim = 16;
    let head = rigged_identityish_head(dim);
    let mut bn = RunningStats::identity(bottleneck_width(dim));
    let opts = PretextOptions { bn_training: false, ..Default::default() };
    let mut tape = Tape::new();
    // both views equal the all-ones direction, which the head preserves
    let z = Tensor::from_vec(vec![2, dim], vec![1.0; 2 * dim]);
    let (l_c1, l_c2, l_c) = contrastive_loss(&mut tape, &z, &z.clone(), &head, &mut bn, &opts).unwrap();
    assert_abs_diff_eq!(l_c1.item(), -1.0, epsilon = 1e-6);
    assert_abs_diff_eq!(l_c2.item(), -1.0, epsilon = 1e-6);
    assert_abs_diff_eq!(l_c.item(), -1.0, epsilon = 1e-6);
}

#[test]
fn orthogonal_prediction_and_target_give_zero() {
    let dim = 16;
    let head = rigged_identityish_head(dim);
    let mut bn = RunningStats::identity(bottleneck_width(dim));
    let mut tape = Tape::new();
    let z1 = Tensor::from_vec(vec![1, dim], vec![1.0; dim]);
    // target orthogonal to the all-ones direction the head produces
    let mut t = vec![0.0; dim];
    t[0] = 1.0;
    t[1] = -1.0;
    let z2 = Tensor::from_vec(vec![1, dim], t);
    let zhat1 = head.forward(&mut tape, &z1, &mut bn, false).unwrap();
    let row = tape.row(&zhat1, 0).unwrap();
    let target = tape.row(&z2, 0).unwrap();
    let c = tape.cosine_similarity(&row, &target.detach(), 1e-8).unwrap();
    assert_abs_diff_eq!(c.item(), 0.0, epsilon = 1e-9);
}

#[test]
fn detached_branch_contributes_exactly_zero_gradient() {
    let dim = 16;
    let mut rng = RngStream::new(3);
    let head = ContrastiveHead::<f64>::init(dim, &mut rng).unwrap();
    let mut bn = RunningStats::identity(bottleneck_width(dim));
    let opts = PretextOptions::default();

    let mk = |rng: &mut RngStream| {
        Tensor::from_vec(vec![2, dim], (0..2 * dim).map(|_| rng.normal()).collect())
    };
    let z1_raw = mk(&mut rng);
    let z2_raw = mk(&mut rng);

    // branch 1 alone: z2 appears only behind the stop-gradient
    let mut tape = Tape::new();
    let z1 = tape.watch(&z1_raw);
    let z2 = tape.watch(&z2_raw);
    let (l_c1, _, _) = contrastive_loss(&mut tape, &z1, &z2, &head, &mut bn, &opts).unwrap();
    let grads = tape.backward(&l_c1).unwrap();
    let g2 = grads.wrt(&z2).unwrap();
    assert!(g2.data().iter().all(|&v| v == 0.0));
    let g1 = grads.wrt(&z1).unwrap();
    assert!(g1.data().iter().any(|&v| v != 0.0));

    // branch 2 alone: now z2 flows through the head and does get gradient
    let mut tape = Tape::new();
    let z1 = tape.watch(&z1_raw);
    let z2 = tape.watch(&z2_raw);
    let (_, l_c2, _) = contrastive_loss(&mut tape, &z1, &z2, &head, &mut bn, &opts).unwrap();
    let grads = tape.backward(&l_c2).unwrap();
    let g2 = grads.wrt(&z2).unwrap();
    assert!(g2.data().iter().any(|&v| v != 0.0));
}

#[test]
fn swapping_views_swaps_the_loss_pair() {
    let dim = 16;
    let mut rng = RngStream::new(4);
    let head = ContrastiveHead::<f64>::init(dim, &mut rng).unwrap();
    let mut bn = RunningStats::identity(bottleneck_width(dim));
    let opts = PretextOptions { bn_training: false, ..Default::default() };
    let z1 = Tensor::from_vec(vec![3, dim], (0..3 * dim).map(|_| rng.normal()).collect());
    let z2 = Tensor::from_vec(vec![3, dim], (0..3 * dim).map(|_| rng.normal()).collect());

    let mut tape = Tape::new();
    let (a1, a2, ac) = contrastive_loss(&mut tape, &z1, &z2, &head, &mut bn, &opts).unwrap();
    let (b1, b2, bc) = contrastive_loss(&mut tape, &z2, &z1, &head, &mut bn, &opts).unwrap();
    assert_eq!(a1.item(), b2.item());
    assert_eq!(a2.item(), b1.item());
    assert_abs_diff_eq!(ac.item(), bc.item(), epsilon = 1e-15);

    // bounds
    for l in [a1.item(), a2.item(), b1.item(), b2.item()] {
        assert!((-1.0 - 1e-6..=1.0 + 1e-6).contains(&l));
    }
}

#[test]
fn batch_of_one_in_training_mode_is_degenerate() {
    let dim = 16;
    let mut rng = RngStream::new(5);
    let head = ContrastiveHead::<f64>::init(dim, &mut rng).unwrap();
    let mut bn = RunningStats::identity(bottleneck_width(dim));
    let opts = PretextOptions::default(); // bn_training = true
    let mut tape = Tape::new();
    let z = Tensor::from_vec(vec![1, dim], vec![1.0; dim]);
    assert!(matches!(
        contrastive_loss(&mut tape, &z, &z.clone(), &head, &mut bn, &opts),
        Err(TensorError::DegenerateBatch(1))
    ));
}

#[test]
fn lambda_zero_reduces_total_to_predictive_loss() {
    let cfg = config();
    let params = init_encoder::<f64>(&cfg, 0).unwrap();
    let mut heads =
        PretextHeads::<f64>::init(cfg.token_width(), cfg.d_model, cfg.d_model, &mut RngStream::new(1))
            .unwrap();
    let xs = batch(&cfg, 4, 2);
    let mut bn = heads.bn_stats.clone();
    let mut tape = Tape::new();
    let opts = PretextOptions { lambda: 0.0, ..Default::default() };
    let mut rng = RngStream::new(3);
    let out = pretext_losses(&mut tape, &xs, &params, &heads, &mut bn, &cfg, &opts, &mut rng).unwrap();
    assert_eq!(out.breakdown.total, out.breakdown.l_p);
    heads.bn_stats = bn;
}

#[test]
fn breakdown_identities_and_lambda_monotonicity() {
    let cfg = config();
    let params = init_encoder::<f64>(&cfg, 0).unwrap();
    let heads =
        PretextHeads::<f64>::init(cfg.token_width(), cfg.d_model, cfg.d_model, &mut RngStream::new(1))
            .unwrap();
    let xs = batch(&cfg, 4, 2);

    let run = |lambda: f64| {
        let mut bn = heads.bn_stats.clone();
        let mut tape = Tape::new();
        let opts = PretextOptions { lambda, ..Default::default() };
        let mut rng = RngStream::new(3); // same masks across lambda values
        pretext_losses(&mut tape, &xs, &params, &heads, &mut bn, &cfg, &opts, &mut rng)
            .unwrap()
            .breakdown
    };

    let base = run(1.0);
    assert_abs_diff_eq!(base.l_p, 0.5 * (base.l_p1 + base.l_p2), epsilon = 1e-15);
    assert_abs_diff_eq!(base.l_c, 0.5 * (base.l_c1 + base.l_c2), epsilon = 1e-15);
    assert_abs_diff_eq!(base.total, base.l_p + base.lambda * base.l_c, epsilon = 1e-12);

    let totals: Vec<f64> = [0.001, 0.1, 1.0, 10.0, 1000.0].iter().map(|&l| run(l).total).collect();
    if base.l_c > 0.0 {
        assert!(totals.windows(2).all(|w| w[0] < w[1]), "{totals:?}");
    } else {
        assert!(totals.windows(2).all(|w| w[0] > w[1]), "{totals:?}");
    }
}

#[test]
fn predictive_gradient_never_reaches_instance_token() {
    // compute the predictive loss alone over both views and backward
    let cfg = config();
    let params = init_encoder::<f64>(&cfg, 0).unwrap();
    let heads =
        PretextHeads::<f64>::init(cfg.token_width(), cfg.d_model, cfg.d_model, &mut RngStream::new(1))
            .unwrap();
    let xs = batch(&cfg, 2, 2);

    let mut tape = Tape::new();
    let enc = params.lease(&mut tape);
    let hds = heads.lease(&mut tape);
    let mut rng = RngStream::new(5);
    let (v1, v2) = two_view_forward(&mut tape, &xs, &enc, &cfg, &mut rng).unwrap();
    let mut acc: Option<Tensor<f64>> = None;
    for (dual, x) in v1.iter().chain(v2.iter()).zip(xs.iter().chain(xs.iter())) {
        let l = predictive_loss(&mut tape, &dual.z_t, x, &hds.predictive).unwrap();
        acc = Some(match acc {
            None => l,
            Some(a) => tape.add(&a, &l).unwrap(),
        });
    }
    let loss = acc.unwrap();
    let grads = tape.backward(&loss).unwrap();
    let g_cls = grads.wrt(&enc.cls_token).unwrap();
    assert!(g_cls.data().iter().all(|&v| v == 0.0));

    // the contrastive loss, computed alone, leaves the patch-embedding rows
    // untouched (it reads only the instance row)
    let mut tape = Tape::new();
    let enc = params.lease(&mut tape);
    let hds = heads.lease(&mut tape);
    let mut bn = heads.bn_stats.clone();
    let mut rng = RngStream::new(5);
    let (v1, v2) = two_view_forward(&mut tape, &xs, &enc, &cfg, &mut rng).unwrap();
    let stack = |view: &[DualEmbedding<f64>], tape: &mut Tape<f64>| {
        let rows: Vec<Tensor<f64>> = view.iter().map(|d| d.z_i.clone()).collect();
        tape.stack_rows(&rows).unwrap()
    };
    let z1 = stack(&v1, &mut tape);
    let z2 = stack(&v2, &mut tape);
    let (_, _, l_c) = contrastive_loss(
        &mut tape,
        &z1,
        &z2,
        &hds.contrastive,
        &mut bn,
        &PretextOptions::default(),
    )
    .unwrap();
    let grads = tape.backward(&l_c).unwrap();
    for dual in v1.iter().chain(v2.iter()) {
        assert!(!grads.touched(&dual.z_t), "contrastive loss leaked into patch embeddings");
        let g = grads.wrt(&dual.z_t).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }
}
