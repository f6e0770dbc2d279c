use std::collections::BTreeSet;

use memtestkit::coalesce::{coalesce_group_g80, coalesce_group_gt200, for_each_m20_group, HALF_WARP, WORD_BYTES};
use memtestkit::{coalesce_g80, coalesce_gt200, trace_m20, Access, AccessKind, AccessTrace, Mapping};
use proptest::prelude::*;

fn group() -> impl Strategy<Value = Vec<Access>> {
    (
        0u64..4096,
        proptest::collection::vec((any::<bool>(), 0u64..96, any::<bool>()), HALF_WARP),
        any::<bool>(),
    )
        .prop_map(|(base, lanes, contiguous)| {
            lanes
                .into_iter()
                .enumerate()
                .map(|(lane, (active, jitter, write))| {
                    let word = if contiguous { base + lane as u64 } else { base + jitter };
                    let kind = if write { AccessKind::Write } else { AccessKind::Read };
                    let a = Access::word(lane as u8, word, kind);
                    if active {
                        a
                    } else {
                        a.inactive()
                    }
                })
                .collect()
        })
}

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn gt200_never_needs_more_transactions(groups in proptest::collection::vec(group(), 1..20)) {
        let trace = AccessTrace { groups };
        let g80 = coalesce_g80(&trace).unwrap();
        let gt200 = coalesce_gt200(&trace).unwrap();
        prop_assert!(gt200.transactions <= g80.transactions);
    }

    #[test]
    fn transactions_cover_every_requested_word(g in group()) {
        let words: BTreeSet<u64> = g.iter().filter(|a| a.active).map(|a| a.byte_address).collect();
        let need = words.len() as u64 * WORD_BYTES;
        let g80 = coalesce_group_g80(&g);
        let gt200 = coalesce_group_gt200(&g);
        prop_assert!(g80.bytes >= need && gt200.bytes >= need);
        prop_assert_eq!(g80.transactions == 0, words.is_empty());
        prop_assert_eq!(gt200.transactions == 0, words.is_empty());
        prop_assert!(gt200.bytes <= 128 * gt200.transactions);
        prop_assert!(g80.bytes <= 32 * HALF_WARP as u64);
    }

    #[test]
    fn reference_modulo20_groups_favor_gt200_bytes(region in 320u64..3000, round in 0u32..20) {
        let mut violations = 0;
        for_each_m20_group(region, round, Mapping::reference(), &mut |g| {
            if coalesce_group_gt200(g).bytes > coalesce_group_g80(g).bytes {
                violations += 1;
            }
        })
        .unwrap();
        prop_assert_eq!(violations, 0);
    }

    #[test]
    fn class_compact_rounds_favor_gt200_bytes_in_total(region in 320u64..3000, round in 0u32..20) {
        let trace = trace_m20(region, round, Mapping::ClassCompact).unwrap();
        prop_assert!(coalesce_gt200(&trace).unwrap().bytes <= coalesce_g80(&trace).unwrap().bytes);
    }
}
