//! Proptest strategies for serialized artifacts.

use h2p_core::cnn::{CnnParams, Mode};
use h2p_core::deploy::{BitPlanes, DeployedHelper, LookupTable, TernaryCode};
use h2p_core::trace::{BranchRecord, Trace, TraceMeta};
use proptest::prelude::*;

pub fn finite_f64() -> impl Strategy<Value = f64> {
    prop_oneof![
        prop::num::f64::NORMAL | prop::num::f64::SUBNORMAL | prop::num::f64::ZERO,
        -10.0f64..10.0,
    ]
}

pub fn trace_strategy() -> impl Strategy<Value = Trace> {
    let records = prop::collection::vec(
        (
            prop_oneof![any::<u64>(), 0x400000u64..0x400100],
            any::<bool>(),
        )
            .prop_map(|(ip, t)| BranchRecord::new(ip, t)),
        0..300,
    );
    (
        records,
        "\\PC{0,24}",
        any::<Option<u64>>(),
        any::<Option<u32>>(),
    )
        .prop_map(|(records, id, seed, extra)| {
            let instruction_count = extra.map(|e| records.len() as u64 + e as u64);
            let meta = TraceMeta {
                workload_id: id,
                generator_seed: seed,
                instruction_count,
            };
            Trace::new(records, meta).unwrap()
        })
}

pub fn params_strategy() -> impl Strategy<Value = CnnParams> {
    (
        2u8..=6,
        1usize..=5,
        1usize..=12,
        prop_oneof![Just(Mode::Fp), Just(Mode::Tp)],
        0.05f64..0.95,
    )
        .prop_flat_map(|(p, m, len, mode, q)| {
            let rows = 1usize << p;
            let v = |n: usize| prop::collection::vec(finite_f64(), n);
            let pos = |n: usize| prop::collection::vec(1e-6f64..1e6, n);
            (
                (v(rows * m), v(m), v(m), v(m), v(m), pos(m), v(len * m)),
                (finite_f64(), finite_f64(), finite_f64(), 1e-6f64..1e6),
            )
                .prop_map(
                    move |((w1, b1, gamma1, beta1, rm1, rv1, w2), (gamma2, beta2, rm2, rv2))| {
                        CnnParams {
                            p,
                            m,
                            history_len: len,
                            mode,
                            q,
                            w1,
                            b1,
                            gamma1,
                            beta1,
                            running_mean1: rm1,
                            running_var1: rv1,
                            w2,
                            gamma2,
                            beta2,
                            running_mean2: rm2,
                            running_var2: rv2,
                        }
                    },
                )
        })
}

fn code() -> impl Strategy<Value = TernaryCode> {
    prop_oneof![
        Just(TernaryCode::Zero),
        Just(TernaryCode::Neg),
        Just(TernaryCode::Pos)
    ]
}

pub fn helper_strategy() -> impl Strategy<Value = DeployedHelper> {
    (2u8..=7, 1usize..=9, 1usize..=40).prop_flat_map(|(p, m, len)| {
        let n = (m * len) as i64;
        (
            prop::collection::vec(code(), (1usize << p) * m),
            prop::collection::vec(code(), m * len),
            -n - 1..=n,
        )
            .prop_map(move |(table, l2, t)| {
                let table = LookupTable::from_codes(p, m, &table).unwrap();
                DeployedHelper::from_parts(table, len, BitPlanes::from_codes(&l2), t).unwrap()
            })
    })
}
