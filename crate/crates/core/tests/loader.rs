use normlab::data::{parse_records, Dataset, Split, RECORD_BYTES};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn records_round_trip(seed in any::<u64>(), n in 1usize..6) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..10)).collect();
        let pixels: Vec<u8> = (0..n * (RECORD_BYTES - 1)).map(|_| rng.gen()).collect();
        let ds = Dataset::new(pixels, labels, 32, 10, Split::Train).unwrap();
        let bytes = ds.to_records().unwrap();
        prop_assert_eq!(bytes.len(), n * RECORD_BYTES);
        let back = parse_records(&bytes, Split::Train).unwrap();
        prop_assert_eq!(&back, &ds);
        prop_assert_eq!(back.to_records().unwrap(), bytes);
    }

    #[test]
    fn truncated_files_are_rejected(n in 1usize..4, cut in 1usize..RECORD_BYTES) {
        let ds = Dataset::new(vec![7; n * (RECORD_BYTES - 1)], vec![3; n], 32, 10, Split::Validation).unwrap();
        let bytes = ds.to_records().unwrap();
        prop_assert!(parse_records(&bytes[..bytes.len() - cut], Split::Validation).is_err());
    }
}
