//! Property-based invariants: estimator symmetry and positivity, softmax
//! normalization, schedule shape, checkpoint round-trips and aggregation
//! order-independence.

use proptest::prelude::*;

use fraug_core::client::ramp_value;
use fraug_core::graph::Graph;
use fraug_core::objectives::{mmd_value, KernelSpec};
use fraug_core::params::{aggregate_mean, ParameterSet, Role, RoleMask};
use fraug_core::tensor::Tensor;

fn matrix_strategy(max_rows: usize, cols: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(
        prop::collection::vec(-3.0f64..3.0, cols..=cols),
        1..=max_rows,
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn mmd_symmetric_nonnegative_zero_on_self(
        x in matrix_strategy(12, 3),
        y in matrix_strategy(12, 3),
    ) {
        let kernel = KernelSpec::default();
        let xt = Tensor::from_rows(&x).unwrap();
        let yt = Tensor::from_rows(&y).unwrap();
        let ab = mmd_value(&xt, &yt, &kernel).unwrap();
        let ba = mmd_value(&yt, &xt, &kernel).unwrap();
        prop_assert!((ab - ba).abs() <= 1e-12);
        prop_assert!(ab >= -1e-12);
        prop_assert_eq!(mmd_value(&xt, &xt, &kernel).unwrap(), 0.0);
    }

    #[test]
    fn softmax_rows_sum_to_one(rows in matrix_strategy(6, 5)) {
        let mut g: Graph<f64> = Graph::new();
        let x = g.constant(&Tensor::from_rows(&rows).unwrap());
        let s = g.softmax(x).unwrap();
        let data = g.data(s);
        for r in 0..rows.len() {
            let sum: f64 = data[r * 5..(r + 1) * 5].iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_at_uniform_logits_is_ln_c(c in 2usize..100) {
        let mut g: Graph<f64> = Graph::new();
        let logits = g.constant_from(vec![1, c], vec![0.0; c]).unwrap();
        let loss = g.cross_entropy(logits, &[c / 2]).unwrap();
        prop_assert!((g.scalar(loss) - (c as f64).ln()).abs() < 1e-12);
        prop_assert!(g.scalar(loss) >= 0.0);
    }

    #[test]
    fn ramp_monotone_and_bounded(
        ramp_len in 1u64..200,
        v_max in 0.01f64..10.0,
        t in 0u64..400,
    ) {
        let v = ramp_value(t, ramp_len, v_max).unwrap();
        let floor = v_max * (-5.0f64).exp();
        prop_assert!(v >= floor - 1e-12);
        prop_assert!(v <= v_max + 1e-12);
        let next = ramp_value(t + 1, ramp_len, v_max).unwrap();
        prop_assert!(next >= v);
        if t >= ramp_len {
            prop_assert_eq!(v, v_max);
        }
    }

    #[test]
    fn checkpoint_roundtrip_bit_exact(
        values in prop::collection::vec(-1e6f32..1e6, 1..40),
        rows in 1usize..5,
    ) {
        let cols = values.len();
        let mut data = Vec::new();
        for _ in 0..rows {
            data.extend_from_slice(&values);
        }
        let mut set: ParameterSet<f32> = ParameterSet::new();
        set.insert(
            "f.0.w",
            Role::Extractor,
            Tensor::from_vec(vec![rows, cols], data).unwrap().with_requires_grad(true),
        )
        .unwrap();
        set.insert(
            "f.0.bn.running_var",
            Role::BatchNorm,
            Tensor::from_vec(vec![cols], values.clone()).unwrap(),
        )
        .unwrap();
        let bytes = set.to_bytes(RoleMask::EMPTY);
        let restored: ParameterSet<f32> = ParameterSet::from_bytes(&bytes).unwrap();
        for (a, b) in set.iter().zip(restored.iter()) {
            prop_assert_eq!(a.name.clone(), b.name.clone());
            prop_assert_eq!(a.role, b.role);
            prop_assert_eq!(a.tensor.shape(), b.tensor.shape());
            let left: Vec<u32> = a.tensor.data().iter().map(|v| v.to_bits()).collect();
            let right: Vec<u32> = b.tensor.data().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(left, right);
            prop_assert_eq!(a.tensor.requires_grad(), b.tensor.requires_grad());
        }
        // Re-serialization is byte-stable.
        prop_assert_eq!(bytes, restored.to_bytes(RoleMask::EMPTY));
    }

    #[test]
    fn aggregation_permutation_invariant_and_idempotent(
        base in prop::collection::vec(-10.0f32..10.0, 6..=6),
        offsets in prop::collection::vec(-1.0f32..1.0, 4),
    ) {
        let make = |offset: f32| -> ParameterSet<f32> {
            let mut set = ParameterSet::new();
            let data: Vec<f32> = base.iter().map(|v| v + offset).collect();
            set.insert(
                "h.w",
                Role::Head,
                Tensor::from_vec(vec![2, 3], data).unwrap().with_requires_grad(true),
            )
            .unwrap();
            set
        };
        let sets: Vec<ParameterSet<f32>> = offsets.iter().map(|&o| make(o)).collect();
        let forward: Vec<&ParameterSet<f32>> = sets.iter().collect();
        let mut reversed = forward.clone();
        reversed.reverse();
        let a = aggregate_mean(&forward, RoleMask::EMPTY).unwrap();
        let b = aggregate_mean(&reversed, RoleMask::EMPTY).unwrap();
        prop_assert_eq!(a.to_bytes(RoleMask::EMPTY), b.to_bytes(RoleMask::EMPTY));

        let same = make(0.123);
        let copies: Vec<&ParameterSet<f32>> = vec![&same; 5];
        let agg = aggregate_mean(&copies, RoleMask::EMPTY).unwrap();
        prop_assert_eq!(agg.to_bytes(RoleMask::EMPTY), same.to_bytes(RoleMask::EMPTY));
    }

    #[test]
    fn backward_twice_doubles_leaf_gradients(
        values in prop::collection::vec(-2.0f64..2.0, 4..=4),
    ) {
        let mut g: Graph<f64> = Graph::new();
        let x = g.param(&Tensor::from_vec(vec![2, 2], values).unwrap());
        let sq = g.mul(x, x).unwrap();
        let loss = g.mean_all(sq).unwrap();
        g.backward(loss).unwrap();
        let once = g.grad(x).unwrap().to_vec();
        g.backward(loss).unwrap();
        let twice = g.grad(x).unwrap().to_vec();
        for (a, b) in once.iter().zip(&twice) {
            prop_assert_eq!(*b, 2.0 * *a);
        }
    }
}
