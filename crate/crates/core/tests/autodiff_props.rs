use hebbsnn::autodiff::{grad_check, spike_backward, Graph, SurrogateParams};
use hebbsnn::hebbian::HebbianParams;
use hebbsnn::snn::{LifNode, LifParams};
use hebbsnn::tensor::Matrix;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn smooth_ops_match_finite_differences(p in prop::collection::vec(-1.0f64..1.0, 9)) {
        let worst = grad_check(|g, x| {
            let w = g.param(&Matrix::from_vec(2, 3, vec![0.3, -0.2, 0.5, 0.1, 0.4, -0.6]).unwrap());
            let a = g.concat(&[x, x])?;
            let first = g.tanh(x)?;
            let sq = g.square(first)?;
            let e = g.exp(sq)?;
            let m = g.mul(e, x)?;
            let s = g.softmax(m)?;
            let ls = g.log_softmax(m)?;
            let d = g.dot(s, ls)?;
            let head = {
                let v = g.constant_vec(vec![0.7, -0.1, 0.2]);
                let three = g.lincomb(&[(x, 1.0)], 0.0)?;
                let three = g.sum(three)?;
                let y = g.matvec(w, v)?;
                let ys = g.sum(y)?;
                g.mul(three, ys)?
            };
            let l = g.sum(a)?;
            let pos = g.affine(l, 0.1, 3.0)?;
            let lg = g.ln(pos)?;
            let picked = g.pick(ls, 1)?;
            let xe = g.softmax_xent(m, 2)?;
            g.lincomb(&[(d, 1.0), (head, 0.5), (lg, 1.0), (picked, 0.3), (xe, 1.0)], 0.0)
        }, &p, 1e-6).unwrap();
        prop_assert!(worst <= 1e-4, "{}", worst);
    }

    #[test]
    fn hebbian_op_matches_finite_differences(
        w in prop::collection::vec(0.0f64..1.0, 6),
        kk in prop::collection::vec(0.0f64..1.0, 3),
        kv in prop::collection::vec(0.0f64..1.0, 2),
    ) {
        let p = HebbianParams::default();
        let loss = |g: &mut Graph, wn, kn, vn| -> hebbsnn::Result<hebbsnn::autodiff::NodeId> {
            let once = g.hebbian(wn, kn, vn, p)?;
            let twice = g.hebbian(once, kn, vn, p)?;
            let sq = g.square(twice)?;
            g.sum(sq)
        };
        let wm = Matrix::from_vec(2, 3, w.clone()).unwrap();
        let kv2 = kv.clone();
        let worst_k = grad_check(|g, x| { let wn = g.constant(2, 3, w.clone())?; let vn = g.constant_vec(kv2.clone()); loss(g, wn, x, vn) }, &kk, 1e-6).unwrap();
        let kk2 = kk.clone();
        let worst_v = grad_check(|g, x| { let wn = g.constant(2, 3, w.clone())?; let kn = g.constant_vec(kk2.clone()); loss(g, wn, kn, x) }, &kv, 1e-6).unwrap();
        prop_assert!(worst_k <= 1e-4 && worst_v <= 1e-4, "{} {}", worst_k, worst_v);

        // weights: central differences by hand, since grad_check perturbs a vector leaf
        let eval = |m: &Matrix| { let mut g = Graph::new(); let wn = g.param(m); let kn = g.constant_vec(kk.clone()); let vn = g.constant_vec(kv.clone()); let l = loss(&mut g, wn, kn, vn).unwrap(); (g.scalar(l), g.backward(l).unwrap().get_or_zeros(wn, 6)) };
        let (_, analytic) = eval(&wm);
        for i in 0..6 {
            let (mut up, mut down) = (wm.clone(), wm.clone());
            up.data[i] += 1e-6;
            down.data[i] -= 1e-6;
            let numeric = (eval(&up).0 - eval(&down).0) / 2e-6;
            prop_assert!((numeric - analytic[i]).abs() / analytic[i].abs().max(1.0) <= 1e-4);
        }
    }

    #[test]
    fn surrogate_vanishes_outside_unit_band(v in -5.0f64..5.0, up in -3.0f64..3.0) {
        let p = SurrogateParams::default();
        let g = spike_backward(&[v], &[up], p)[0];
        if v.abs() >= 1.0 {
            prop_assert_eq!(g, 0.0);
        } else {
            prop_assert!((g - p.beta * (1.0 - v.abs()) * up).abs() < 1e-12);
        }
    }
}

#[test]
fn surrogate_at_threshold_is_beta_times_upstream() {
    let p = SurrogateParams { beta: 0.7, theta: 1.0 };
    assert_eq!(spike_backward(&[0.0], &[2.0], p), vec![1.4]);
}

#[test]
fn spike_counts_are_reachable_from_driving_weight() {
    let lif = LifParams::default();
    let mut g = Graph::new();
    let w = g.param(&Matrix::from_vec(1, 1, vec![0.12]).unwrap());
    let x = g.constant_vec(vec![1.0]);
    let current = g.matvec(w, x).unwrap();
    let mut layer = LifNode::fresh(&mut g, 1);
    let mut spikes = Vec::new();
    for _ in 0..60 {
        spikes.push((layer.step(&mut g, current, &lif).unwrap(), 1.0));
    }
    let total = g.lincomb(&spikes, 0.0).unwrap();
    assert!(g.scalar(total) > 0.0);
    let grads = g.backward(total).unwrap();
    assert!(grads.get(w).unwrap()[0] != 0.0);
}
