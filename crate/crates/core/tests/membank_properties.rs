use std::collections::VecDeque;

use proptest::prelude::*;

use promptseg::membank::{BankSnapshot, MemoryBank, MemoryToken, TokenKind};

fn token(seq: usize, dim: usize) -> MemoryToken {
    MemoryToken {
        vector: (0..dim).map(|i| (seq * 31 + i) as f32 * 0.125 - 7.0).collect(),
        anchor: seq,
        iteration: seq / 3,
        kind: if seq % 2 == 0 { TokenKind::Label } else { TokenKind::Boundary },
    }
}

fn bits(bank: &MemoryBank) -> Vec<u32> {
    bank.tokens().flat_map(|t| t.vector.iter().map(|v| v.to_bits())).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn fifo_matches_reference_queue(
        capacity in prop::option::of(1usize..12),
        writes in prop::collection::vec(0usize..7, 0..12),
    ) {
        let mut bank = MemoryBank::new("s/0", 3, capacity).unwrap();
        let mut reference = VecDeque::new();
        let mut seq = 0;
        for n in writes {
            let batch: Vec<MemoryToken> = (seq..seq + n).map(|i| token(i, 3)).collect();
            seq += n;
            reference.extend(batch.iter().cloned());
            if let Some(c) = capacity {
                while reference.len() > c {
                    reference.pop_front();
                }
            }
            bank.write(batch).unwrap();
            let held: Vec<&MemoryToken> = bank.tokens().collect();
            prop_assert_eq!(held, reference.iter().collect::<Vec<_>>());
        }
    }
}

proptest! {
    #[test]
    fn split_writes_equal_one_concatenated_write(a in 0usize..10, b in 0usize..10) {
        let first: Vec<MemoryToken> = (0..a).map(|i| token(i, 4)).collect();
        let second: Vec<MemoryToken> = (a..a + b).map(|i| token(i, 4)).collect();
        let mut split = MemoryBank::new("s/0", 4, None).unwrap();
        split.write(first.clone()).unwrap();
        split.write(second.clone()).unwrap();
        let mut joined = MemoryBank::new("s/0", 4, None).unwrap();
        joined.write(first.into_iter().chain(second).collect()).unwrap();
        prop_assert_eq!(split.read_all::<f32>(), joined.read_all::<f32>());
    }

    #[test]
    fn reads_never_change_tokens(n in 1usize..10, reads in 1usize..5) {
        let mut bank = MemoryBank::new("s/0", 4, None).unwrap();
        bank.write((0..n).map(|i| token(i, 4)).collect()).unwrap();
        let before = bits(&bank);
        for _ in 0..reads {
            let m = bank.read_all::<f64>().unwrap();
            prop_assert_eq!(m.shape(), [n, 4]);
        }
        prop_assert_eq!(before, bits(&bank));
    }

    #[test]
    fn banks_are_isolated(n in 1usize..8, m in 0usize..8) {
        let mut a = MemoryBank::new("s/0", 2, None).unwrap();
        let mut b = MemoryBank::new("s/1", 2, None).unwrap();
        a.write((0..n).map(|i| token(i, 2)).collect()).unwrap();
        let snapshot = bits(&a);
        b.write((100..100 + m).map(|i| token(i, 2)).collect()).unwrap();
        b.reset();
        prop_assert_eq!(bits(&a), snapshot);
        prop_assert_eq!(a.len(), n);
    }

    #[test]
    fn snapshot_round_trip_is_bit_exact(
        values in prop::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), 0..40),
        capacity in prop::option::of(20usize..30),
    ) {
        let dim = 4;
        let n = values.len() / dim;
        let mut bank = MemoryBank::new("series/3", dim, capacity).unwrap();
        bank.write((0..n).map(|i| MemoryToken { vector: values[i * dim..(i + 1) * dim].to_vec(), ..token(i, dim) }).collect()).unwrap();
        let bytes = bank.snapshot().to_bytes().unwrap();
        let back = MemoryBank::restore(&BankSnapshot::from_bytes(&bytes).unwrap(), dim).unwrap();
        prop_assert_eq!(bits(&back), bits(&bank));
        prop_assert_eq!(back, bank);
    }
}
