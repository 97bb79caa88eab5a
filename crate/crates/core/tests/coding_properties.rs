use feds_core::bitstream_codec::{gaussian_tables, scale_index, scale_table, CdfTable, RangeDecoder, RangeEncoder, PROB_TOTAL};
use feds_core::entropy_engine::quantize_eval;
use feds_core::Tensor;
use proptest::prelude::*;

fn pmf_strategy() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..1.0, 1..40).prop_map(|w| {
        // Leave a little mass for the escape symbol some of the time.
        let total: f64 = w.iter().sum::<f64>() * 1.05 + 1e-12;
        w.into_iter().map(|v| v / total).collect()
    })
}

proptest! {
    #[test]
    fn cdf_tables_are_valid(pmf in pmf_strategy(), offset in -20i32..20) {
        let t = CdfTable::from_pmf(&pmf, offset);
        prop_assert_eq!(t.num_symbols(), pmf.len() + 1);
        prop_assert_eq!(t.cdf[0], 0);
        prop_assert_eq!(*t.cdf.last().unwrap(), PROB_TOTAL);
        prop_assert!(t.cdf.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn range_coder_round_trips(
        pmf in pmf_strategy(),
        offset in -10i32..10,
        values in prop::collection::vec(-300i32..300, 0..400),
    ) {
        let t = CdfTable::from_pmf(&pmf, offset);
        let mut enc = RangeEncoder::new();
        let mut bits = 0.0;
        for &v in &values {
            t.encode(&mut enc, v).unwrap();
            bits -= t.coded_probability(v).log2();
        }
        let bytes = enc.finish();
        prop_assert!(bytes.last() != Some(&0), "stream ends in a zero byte");
        // Two bytes of sentinel and at most a few bytes of flush on top of the ideal length.
        prop_assert!((bytes.len() as f64) <= bits / 8.0 + 6.0, "{} bytes for {bits} bits", bytes.len());
        let mut dec = RangeDecoder::new(&bytes).unwrap();
        let decoded: Vec<i32> = values.iter().map(|_| t.decode(&mut dec).unwrap()).collect();
        dec.finish().unwrap();
        prop_assert_eq!(decoded, values);
    }

    #[test]
    fn gaussian_tables_round_trip_residuals(
        symbols in prop::collection::vec((0.11f64..256.0, -2000i32..2000), 1..300),
    ) {
        let tables = gaussian_tables();
        let mut enc = RangeEncoder::new();
        for &(s, r) in &symbols {
            tables[scale_index(s)].encode(&mut enc, r).unwrap();
        }
        let bytes = enc.finish();
        let mut dec = RangeDecoder::new(&bytes).unwrap();
        for &(s, r) in &symbols {
            prop_assert_eq!(tables[scale_index(s)].decode(&mut dec).unwrap(), r);
        }
        dec.finish().unwrap();
    }

    #[test]
    fn scale_index_picks_smallest_entry_not_below(s in 0.0f64..1000.0) {
        let table = scale_table();
        let i = scale_index(s);
        prop_assert!(i < table.len());
        prop_assert!(table[i] >= s.min(table[table.len() - 1]));
        prop_assert!(i == 0 || table[i - 1] < s);
    }

    #[test]
    fn eval_quantization_is_idempotent(
        pairs in prop::collection::vec((-100.0f64..100.0, -10.0f64..10.0), 1..64),
    ) {
        let n = pairs.len();
        let v = Tensor::from_vec(&[n], pairs.iter().map(|p| p.0).collect()).unwrap();
        let mu = Tensor::from_vec(&[n], pairs.iter().map(|p| p.1).collect()).unwrap();
        let once = quantize_eval(&v, Some(&mu));
        let twice = quantize_eval(&once, Some(&mu));
        for i in 0..n {
            let r = once.data()[i] - mu.data()[i];
            prop_assert!((r - r.round()).abs() < 1e-9);
            prop_assert!((once.data()[i] - v.data()[i]).abs() <= 0.5 + 1e-9);
            prop_assert!((twice.data()[i] - once.data()[i]).abs() < 1e-9);
        }
    }
}
