use proptest::prelude::*;
use rand::Rng as _;
use sign_lookup::numerics::gradcheck::DEFAULT_EPS;
use sign_lookup::numerics::{
    grad_check, scaled_dot_attention, softmax, Graph, LossEval, RngState, Tensor, Var,
};
use sign_lookup::Result;

const SEEDS: u64 = 20;

fn uniform(rng: &mut sign_lookup::numerics::Rng, rows: usize, cols: usize, scale: f64) -> Tensor<f64> {
    let data = (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

/// Gradient-checks `build` under a fixed random bilinear readout
/// `r^T out w`. Scalar outputs are used as the loss directly.
fn check_primitive<F>(seed: u64, params: Vec<Tensor<f64>>, build: F) -> f64
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut probe = Graph::new();
    let pv: Vec<Var> = params.iter().map(|t| probe.input(t.clone())).collect();
    let out = build(&mut probe, &pv).unwrap();
    let (n, m) = match probe.value(out).shape() {
        [n, m] => (*n, *m),
        [1] => (1, 1),
        s => panic!("unexpected shape {s:?}"),
    };
    let mut rng = RngState::new(seed, 1000).rng();
    let r = uniform(&mut rng, 1, n, 1.0);
    let w = uniform(&mut rng, m, 1, 1.0);

    let report = grad_check(&params, DEFAULT_EPS, |p, want| {
        let mut g = Graph::new();
        let pv: Vec<Var> = p.iter().map(|t| g.input(t.clone())).collect();
        let out = build(&mut g, &pv)?;
        let loss = if g.value(out).shape().len() == 1 {
            out
        } else {
            let rv = g.input(r.clone());
            let wv = g.input(w.clone());
            let left = g.matmul(rv, out)?;
            g.matmul(left, wv)?
        };
        let value = g.value(loss).data()[0];
        let signature = Some(g.kink_signature());
        let grads = if want {
            g.backward(loss)?;
            Some(pv.iter().zip(p).map(|(&v, t)| g.grad(v).map_or(vec![0.0; t.len()], <[f64]>::to_vec)).collect())
        } else {
            None
        };
        Ok(LossEval { loss: value, grads, kink_signature: signature })
    })
    .unwrap();
    report.max_rel_error
}

fn worst_over_seeds(make: impl Fn(u64) -> f64) -> f64 {
    (0..SEEDS).map(make).fold(0.0, f64::max)
}

#[test]
fn matmul_gradients() {
    let worst = worst_over_seeds(|s| {
        let mut rng = RngState::new(s, 0).rng();
        let params = vec![uniform(&mut rng, 3, 4, 1.0), uniform(&mut rng, 4, 2, 1.0)];
        check_primitive(s, params, |g, p| g.matmul(p[0], p[1]))
    });
    assert!(worst < 1e-4, "{worst}");
}

#[test]
fn linear_and_add_gradients() {
    let worst = worst_over_seeds(|s| {
        let mut rng = RngState::new(s, 0).rng();
        let params = vec![
            uniform(&mut rng, 4, 3, 1.0),
            uniform(&mut rng, 3, 5, 1.0),
            Tensor::vector(uniform(&mut rng, 1, 5, 1.0).into_data()).unwrap(),
            uniform(&mut rng, 4, 5, 1.0),
        ];
        check_primitive(s, params, |g, p| {
            let y = g.linear(p[0], p[1], p[2])?;
            g.add(y, p[3])
        })
    });
    assert!(worst < 1e-4, "{worst}");
}

#[test]
fn relu_and_leaky_relu_gradients() {
    let worst = worst_over_seeds(|s| {
        let mut rng = RngState::new(s, 0).rng();
        let params = vec![uniform(&mut rng, 4, 6, 1.0)];
        let a = check_primitive(s, params.clone(), |g, p| g.relu(p[0]));
        let b = check_primitive(s, params, |g, p| g.leaky_relu(p[0], 0.01));
        a.max(b)
    });
    assert!(worst < 1e-4, "{worst}");
}

#[test]
fn layer_norm_gradients() {
    let worst = worst_over_seeds(|s| {
        let mut rng = RngState::new(s, 0).rng();
        let params = vec![
            uniform(&mut rng, 3, 6, 2.0),
            Tensor::vector(uniform(&mut rng, 1, 6, 1.0).into_data()).unwrap(),
            Tensor::vector(uniform(&mut rng, 1, 6, 1.0).into_data()).unwrap(),
        ];
        check_primitive(s, params, |g, p| g.layer_norm(p[0], p[1], p[2]))
    });
    assert!(worst < 1e-4, "{worst}");
}

#[test]
fn attention_gradients_one_and_two_heads() {
    let worst = worst_over_seeds(|s| {
        let mut rng = RngState::new(s, 0).rng();
        let params = vec![
            uniform(&mut rng, 3, 4, 1.0),
            uniform(&mut rng, 5, 4, 1.0),
            uniform(&mut rng, 5, 4, 1.0),
        ];
        let one = check_primitive(s, params.clone(), |g, p| g.attention(p[0], p[1], p[2], 1));
        let two = check_primitive(s, params, |g, p| g.attention(p[0], p[1], p[2], 2));
        one.max(two)
    });
    assert!(worst < 1e-4, "{worst}");
}

#[test]
fn softmax_column_and_bce_gradients() {
    let worst = worst_over_seeds(|s| {
        let mut rng = RngState::new(s, 0).rng();
        let labels: Vec<f64> = (0..5).map(|_| f64::from(rng.gen_range(0..2u8))).collect();
        let params = vec![uniform(&mut rng, 5, 2, 2.0)];
        check_primitive(s, params, move |g, p| {
            let probs = g.softmax_rows(p[0])?;
            let pos = g.column(probs, 1)?;
            g.bce_mean(pos, &labels)
        })
    });
    assert!(worst < 1e-4, "{worst}");
}

#[test]
fn dropout_gradients_with_fixed_mask() {
    let worst = worst_over_seeds(|s| {
        let mut rng = RngState::new(s, 0).rng();
        let params = vec![uniform(&mut rng, 4, 4, 1.0)];
        check_primitive(s, params, move |g, p| {
            let mut mask_rng = RngState::new(s, 7).rng();
            g.dropout(p[0], 0.3, Some(&mut mask_rng))
        })
    });
    assert!(worst < 1e-4, "{worst}");
}

fn matrix_strategy(max_rows: usize, cols: usize) -> impl Strategy<Value = Tensor<f32>> {
    (1..=max_rows).prop_flat_map(move |rows| {
        prop::collection::vec(-10.0f32..10.0, rows * cols)
            .prop_map(move |data| Tensor::matrix(rows, cols, data).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::with_cases(100) })]

    #[test]
    fn softmax_sums_to_one(v in prop::collection::vec(-50.0f32..50.0, 1..40)) {
        let p = softmax(&v).unwrap();
        let sum: f64 = p.iter().map(|&x| f64::from(x)).sum();
        prop_assert!((sum - 1.0).abs() < 1e-6, "sum {sum}");
        prop_assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn softmax_rows_each_sum_to_one(x in matrix_strategy(8, 6)) {
        let mut g: Graph<f32> = Graph::new();
        let xv = g.input(x);
        let p = g.softmax_rows(xv).unwrap();
        for r in 0..g.value(p).rows() {
            let sum: f64 = g.value(p).row(r).iter().map(|&x| f64::from(x)).sum();
            prop_assert!((sum - 1.0).abs() < 1e-6, "row {r} sum {sum}");
        }
    }

    #[test]
    fn attention_stays_in_convex_hull(
        q in matrix_strategy(6, 4),
        kv in (1usize..7).prop_flat_map(|n| (
            prop::collection::vec(-10.0f32..10.0, n * 4),
            prop::collection::vec(-10.0f32..10.0, n * 3),
        )),
    ) {
        let n = kv.0.len() / 4;
        let k = Tensor::matrix(n, 4, kv.0).unwrap();
        let v = Tensor::matrix(n, 3, kv.1).unwrap();
        let out = scaled_dot_attention(&q, &k, &v).unwrap();
        prop_assert_eq!(out.shape(), &[q.rows(), 3][..]);
        for c in 0..3 {
            let col: Vec<f32> = (0..n).map(|r| v.get(r, c)).collect();
            let lo = col.iter().copied().fold(f32::INFINITY, f32::min);
            let hi = col.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let slack = 1e-5 * (1.0 + lo.abs().max(hi.abs()));
            for r in 0..out.rows() {
                let o = out.get(r, c);
                prop_assert!(o >= lo - slack && o <= hi + slack, "{o} outside [{lo}, {hi}]");
            }
        }
    }

    #[test]
    fn dropout_inference_is_identity(x in matrix_strategy(5, 5), rate in 0.0f64..0.95) {
        let y = sign_lookup::numerics::dropout(&x, rate, &RngState::new(0, 0), false).unwrap();
        prop_assert_eq!(y.data(), x.data());
    }
}
