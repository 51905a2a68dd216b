mod common;

use common::kv_oracle::{class_of, step, stress, FlatOracle, Op};
use hybrid_serve::kv::BlockPool;
use hybrid_serve::request::RequestClass;
use proptest::prelude::*;

fn op_strategy(ids: u64) -> impl Strategy<Value = Op> {
    prop_oneof![
        1 => (0..ids).prop_map(|req| Op::Release { req }),
        1 => (0..ids, 0..ids).prop_map(|(req, other)| Op::Stale { req, other }),
        2 => (0..ids, 1u32..=40).prop_map(|(req, tokens)| Op::Append { req, tokens }),
        4 => (0..ids).prop_map(|req| Op::Append { req, tokens: 1 }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn prop_bidirectional_pool_matches_flat_model(ops in prop::collection::vec(op_strategy(8), 1..300), blocks in 1u32..12) {
        let mut pool = BlockPool::new(blocks, 4, true);
        let mut model = FlatOracle::new(blocks, 4, true);
        for op in ops {
            if let Err(e) = step(&mut pool, &mut model, op) {
                prop_assert!(false, "{op:?}: {e}");
            }
        }
    }

    #[test]
    fn prop_exclusive_pool_matches_flat_model(ops in prop::collection::vec(op_strategy(8), 1..300), blocks in 1u32..12) {
        let mut pool = BlockPool::new(blocks, 4, false);
        let mut model = FlatOracle::new(blocks, 4, false);
        for op in ops {
            if let Err(e) = step(&mut pool, &mut model, op) {
                prop_assert!(false, "{op:?}: {e}");
            }
            prop_assert!(pool.preemptions().next().is_none());
        }
    }

    #[test]
    fn prop_release_everything_empties_pool(ops in prop::collection::vec(op_strategy(6), 1..200)) {
        let mut pool = BlockPool::new(8, 4, true);
        let mut model = FlatOracle::new(8, 4, true);
        for op in ops {
            step(&mut pool, &mut model, op).unwrap();
        }
        for req in 0..6 {
            pool.release(req);
        }
        prop_assert_eq!(pool.empty_blocks(), 8);
        prop_assert_eq!(pool.holders().count(), 0);
        prop_assert!((0..6).all(|r| pool.host_tokens(r) == 0));
    }
}

#[test]
fn test_long_stress_bidirectional() {
    let checkpoints = stress(7, 20_000, 16, 8, true).unwrap();
    assert!(checkpoints > 0, "stress never exercised overwrites");
}

#[test]
fn test_long_stress_exclusive() {
    assert_eq!(stress(8, 20_000, 16, 8, false).unwrap(), 0);
}

#[test]
fn test_model_classes_alternate() {
    assert_eq!(class_of(0), RequestClass::Rt);
    assert_eq!(class_of(1), RequestClass::Be);
}
