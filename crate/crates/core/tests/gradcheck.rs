use mtml_core::rng::rng;
use mtml_core::tensor::check::{check_gradients, RandomMlp};
use mtml_core::tensor::Tensor;
use proptest::prelude::*;
use rand::Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-5;

fn random_tensor(r: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(-scale..scale)).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn random_mlps_match_finite_differences(seed in any::<u64>()) {
        let m = RandomMlp::sample(seed);
        let r = m.check(H).unwrap();
        prop_assert!(r.max_rel_err < TOL, "seed {seed}: {:?} {:?} err {}", m.loss, m.widths, r.max_rel_err);
    }

    #[test]
    fn elementwise_ops_match_finite_differences(seed in any::<u64>()) {
        let mut r = rng(seed);
        let a = Tensor::new(vec![2, 3], (0..6).map(|_| r.random_range(0.5..2.0)).collect()).unwrap();
        let b = Tensor::new(vec![2, 3], (0..6).map(|_| r.random_range(0.5..2.0)).collect()).unwrap();
        let res = check_gradients(&[a, b], H, |g, v| {
            let q = g.div(v[0], v[1])?;
            let l = g.log(q)?;
            let e = g.exp(v[1]);
            let s = g.sub(l, e)?;
            let t = g.mul(s, v[0])?;
            let cols = g.mean(t, Some(0))?;
            g.sum(cols, None)
        })
        .unwrap();
        prop_assert!(res.max_rel_err < TOL, "err {}", res.max_rel_err);
    }
}

#[test]
fn scalar_broadcast_and_row_reductions() {
    let mut r = rng(5);
    let m = random_tensor(&mut r, &[3, 4], 1.0);
    let s = Tensor::scalar(0.7);
    let res = check_gradients(&[m, s], H, |g, v| {
        let scaled = g.mul(v[0], v[1])?;
        let rows = g.sum(scaled, Some(1))?;
        let t = g.tanh(rows);
        g.sum(t, None)
    })
    .unwrap();
    assert!(res.max_rel_err < TOL, "err {}", res.max_rel_err);
}
