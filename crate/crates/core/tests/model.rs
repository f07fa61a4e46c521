use rand::seq::SliceRandom;
use rand::Rng as _;
use sign_lookup::features::{AdaptiveQueryFeatures, TargetFeatureSequence};
use sign_lookup::model::{
    default_config, encode, forward, positional_encoding, tiny_grad_check, ModelConfig, SignLookupModel,
};
use sign_lookup::numerics::{Rng, RngState, Tensor};

fn random_matrix(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

fn permute_rows(t: &Tensor, order: &[usize]) -> Tensor {
    let rows: Vec<&[f32]> = order.iter().map(|&i| t.row(i)).collect();
    Tensor::from_rows(&rows).unwrap()
}

fn small_config(rng: &mut Rng) -> ModelConfig {
    let d = [8, 16][rng.gen_range(0..2)];
    let mut cfg = default_config().with_width(d);
    cfg.d_feat = rng.gen_range(3..10);
    cfg.n_heads = [1, 2, 4][rng.gen_range(0..3)];
    cfg.n_layers = rng.gen_range(1..3);
    cfg.levels = rng.gen_range(2..6);
    cfg
}

#[test]
fn encoder_is_permutation_equivariant() {
    for seed in 0..20 {
        let mut rng = RngState::new(seed, 1).rng();
        let cfg = small_config(&mut rng);
        let model = SignLookupModel::new(cfg.clone(), seed).unwrap();
        let f = random_matrix(&mut rng, cfg.levels, cfg.d_model);
        let mut order: Vec<usize> = (0..cfg.levels).collect();
        order.shuffle(&mut rng);
        let state = RngState::new(seed, 2);
        let z = encode(&f, &model, &state, false).unwrap();
        let z_perm = encode(&permute_rows(&f, &order), &model, &state, false).unwrap();
        let diff = z_perm.max_abs_diff(&permute_rows(&z, &order));
        assert!(diff < 1e-5, "seed {seed}: {diff}");
    }
}

fn shifted(t: &Tensor) -> Vec<usize> {
    let n = t.rows();
    (0..n).map(|i| (i + 1) % n).collect()
}

fn decoder_shift_diff(positional: bool, seed: u64) -> f64 {
    let mut rng = RngState::new(seed, 3).rng();
    let mut cfg = small_config(&mut rng);
    cfg.positional_encoding = positional;
    let model = SignLookupModel::new(cfg.clone(), seed).unwrap();
    let x = AdaptiveQueryFeatures {
        x: random_matrix(&mut rng, cfg.levels, cfg.d_feat),
        strides: (0..cfg.levels).map(|m| 1 << m).collect(),
    };
    let y = random_matrix(&mut rng, 12, cfg.d_feat);
    let order = shifted(&y);
    let state = RngState::new(0, 0);
    let base = forward(&x, &TargetFeatureSequence { y: y.clone() }, &model, &state, false).unwrap();
    let moved = forward(&x, &TargetFeatureSequence { y: permute_rows(&y, &order) }, &model, &state, false).unwrap();
    moved.h.max_abs_diff(&permute_rows(&base.h, &order))
}

#[test]
fn positional_encoding_breaks_shift_equivariance() {
    for seed in 0..5 {
        let diff = decoder_shift_diff(true, seed);
        assert!(diff > 1e-3, "seed {seed}: {diff}");
    }
}

#[test]
fn without_positional_encoding_decoder_is_equivariant() {
    for seed in 0..5 {
        let diff = decoder_shift_diff(false, seed);
        assert!(diff < 1e-5, "seed {seed}: {diff}");
    }
}

#[test]
fn positional_encoding_is_bounded() {
    for t in [0, 1, 7, 63, 1000] {
        let pe = positional_encoding(t, 16).unwrap();
        assert!(pe.iter().all(|v| (-1.0..=1.0).contains(v)));
    }
    assert!(positional_encoding(0, 7).is_err());
}

#[test]
fn tiny_model_gradients_match_at_default_seed() {
    let check = tiny_grad_check(0, 1e-3).unwrap();
    assert!(check.report.max_rel_error < 1e-4, "{} at {}", check.report.max_rel_error, check.worst_name);
}

#[test]
fn inference_is_deterministic() {
    let mut rng = RngState::new(5, 0).rng();
    let cfg = small_config(&mut rng);
    let model = SignLookupModel::new(cfg.clone(), 5).unwrap();
    let x = AdaptiveQueryFeatures {
        x: random_matrix(&mut rng, cfg.levels, cfg.d_feat),
        strides: (0..cfg.levels).map(|m| 1 << m).collect(),
    };
    let y = TargetFeatureSequence { y: random_matrix(&mut rng, 9, cfg.d_feat) };
    let a = sign_lookup::model::predict(&x, &y, &model).unwrap();
    let b = sign_lookup::model::predict(&x, &y, &model).unwrap();
    assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
}
