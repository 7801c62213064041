use hebbsnn::hebbian::{hebbian_update, trace_update, HebbianMemoryState, HebbianParams, MemoryWeights, StepMode};
use hebbsnn::snn::LifParams;
use hebbsnn::tensor::Matrix;
use proptest::prelude::*;

fn run_traces(w: &mut Matrix, keys: &[Vec<f64>], values: &[Vec<f64>], p: &HebbianParams) -> (Vec<f64>, Vec<f64>) {
    let mut kk = vec![0.0; w.cols];
    let mut kv = vec![0.0; w.rows];
    for (zk, zv) in keys.iter().zip(values) {
        kk = trace_update(&kk, zk, p, 1.0);
        kv = trace_update(&kv, zv, p, 1.0);
        let d = hebbian_update(w, &kk, &kv, p).unwrap();
        w.data.iter_mut().zip(&d.data).for_each(|(a, b)| *a += b);
    }
    (kk, kv)
}

fn spikes(bits: &[bool], width: usize) -> Vec<Vec<f64>> {
    bits.chunks(width).map(|c| c.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn weights_and_traces_stay_in_bounds(
        key_bits in prop::collection::vec(any::<bool>(), 6 * 300),
        value_bits in prop::collection::vec(any::<bool>(), 4 * 300),
        gp in 0.05f64..1.0,
        gm in 0.05f64..1.0,
    ) {
        let p = HebbianParams { gamma_plus: gp, gamma_minus: gm, ..HebbianParams::default() };
        let mut w = Matrix::zeros(4, 6);
        let (kk, kv) = run_traces(&mut w, &spikes(&key_bits, 6), &spikes(&value_bits, 4), &p);
        prop_assert!(w.data.iter().all(|&x| (0.0..=p.w_max).contains(&x)));
        prop_assert!(kk.iter().chain(&kv).all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn update_ignores_unrelated_entries(
        w in prop::collection::vec(0.0f64..1.0, 12),
        kk in prop::collection::vec(0.0f64..1.0, 4),
        kv in prop::collection::vec(0.0f64..1.0, 3),
        r in 0usize..3, c in 0usize..4, bump in 0.0f64..1.0,
    ) {
        let p = HebbianParams::default();
        let m = Matrix::from_vec(3, 4, w).unwrap();
        let mut m2 = m.clone();
        m2.data[r * 4 + c] = bump;
        let d1 = hebbian_update(&m, &kk, &kv, &p).unwrap();
        let d2 = hebbian_update(&m2, &kk, &kv, &p).unwrap();
        for i in 0..12 {
            if i != r * 4 + c {
                prop_assert_eq!(d1.data[i], d2.data[i]);
            }
        }
    }
}

#[test]
fn constant_traces_converge_to_fixed_point() {
    let p = HebbianParams::default();
    let mut w = Matrix::zeros(1, 1);
    for _ in 0..200 {
        let d = hebbian_update(&w, &[1.0], &[1.0], &p).unwrap();
        w.data[0] += d.data[0];
    }
    assert!((w.data[0] - p.fixed_point()).abs() < 1e-6);
    assert_eq!(p.fixed_point(), 0.5);
}

#[test]
fn newer_association_dominates() {
    let p = HebbianParams::default();
    let mut w = Matrix::zeros(2, 1);
    let key = vec![vec![1.0]; 100];
    let first: Vec<Vec<f64>> = (0..100).map(|_| vec![1.0, 0.0]).collect();
    let second: Vec<Vec<f64>> = (0..100).map(|_| vec![0.0, 1.0]).collect();
    run_traces(&mut w, &key, &first, &p);
    let mut kk = vec![1.0 - (-1.0f64 / 20.0).exp(); 1];
    let mut kv = vec![0.0, 0.0];
    for zv in &second {
        kk = trace_update(&kk, &[1.0], &p, 1.0);
        kv = trace_update(&kv, zv, &p, 1.0);
        let d = hebbian_update(&w, &kk, &kv, &p).unwrap();
        w.data.iter_mut().zip(&d.data).for_each(|(a, b)| *a += b);
    }
    assert!(w.data[1] > w.data[0], "{:?}", w.data);
}

#[test]
fn silent_keys_leave_memory_untouched() {
    let l = 6;
    let weights = MemoryWeights {
        w_s_key: Matrix::zeros(l, 5),
        w_s_value: Matrix::from_vec(l, 5, vec![0.8; l * 5]).unwrap(),
        w_r_key: Matrix::zeros(l, 5 + l),
    };
    let mut mem = HebbianMemoryState::new(weights, 1).unwrap();
    let lif = LifParams::default();
    let hebb = HebbianParams::default();
    for t in 0..300 {
        let z: Vec<f64> = (0..5).map(|i| ((t + i) % 3 == 0) as u8 as f64).collect();
        let mode = if t < 200 { StepMode::Store } else { StepMode::Recall };
        let (zk, zv) = mem.step(mode, &z, &lif, &hebb).unwrap();
        assert!(zk.iter().all(|&x| x == 0.0));
        if t >= 260 {
            assert!(zv.iter().all(|&x| x == 0.0));
        }
    }
    assert!(mem.dynamics.w_assoc.data.iter().all(|&x| x == 0.0));
}
