use std::sync::OnceLock;

use crate::entropy_engine::discretized_gaussian;
use crate::entropy_engine::SIGMA_MIN;
use crate::error::{Error, Result};

use super::range_coder::{RangeDecoder, RangeEncoder, PROB_TOTAL};

pub const SCALE_TABLE_LEN: usize = 64;
pub const SCALE_MAX: f64 = 256.0;

/// Quantized CDF over consecutive integers starting at `offset`, followed by
/// one escape symbol. `cdf[0] = 0`, `cdf[last] = 2¹⁶`, every symbol ≥ 1 count.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CdfTable {
    pub cdf: Vec<u32>,
    pub offset: i32,
}

impl CdfTable {
    /// Build from probabilities of the in-range symbols; the escape gets the
    /// leftover mass.
    pub fn from_pmf(pmf: &[f64], offset: i32) -> Self {
        let inside: f64 = pmf.iter().sum();
        let mut probs = pmf.to_vec();
        probs.push((1.0 - inside).max(0.0));
        // One count per symbol, the rest proportionally; leftover counts go to
        // the largest fractional parts (lower index first on ties).
        let n = probs.len() as u32;
        assert!(n <= PROB_TOTAL, "too many symbols for a 16-bit table");
        let spare = f64::from(PROB_TOTAL - n);
        let norm: f64 = probs.iter().sum::<f64>().max(f64::MIN_POSITIVE);
        let scaled: Vec<f64> = probs.iter().map(|&p| p / norm * spare).collect();
        let mut counts: Vec<u32> = scaled.iter().map(|&v| 1 + v.floor() as u32).collect();
        let left = PROB_TOTAL - counts.iter().sum::<u32>();
        let mut by_frac: Vec<usize> = (0..counts.len()).collect();
        by_frac.sort_by(|&a, &b| {
            let fa = scaled[a] - scaled[a].floor();
            let fb = scaled[b] - scaled[b].floor();
            fb.partial_cmp(&fa).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
        });
        for &i in by_frac.iter().take(left as usize) {
            counts[i] += 1;
        }
        let mut cdf = Vec::with_capacity(counts.len() + 1);
        let mut acc = 0u32;
        cdf.push(0);
        for c in counts {
            acc += c;
            cdf.push(acc);
        }
        Self { cdf, offset }
    }

    pub fn num_symbols(&self) -> usize {
        self.cdf.len() - 1
    }

    fn escape_index(&self) -> usize {
        self.num_symbols() - 1
    }

    /// Probability the table assigns to `value` (including the raw-value cost
    /// for escapes).
    pub fn coded_probability(&self, value: i32) -> f64 {
        let idx = self.index_of(value);
        let p = f64::from(self.cdf[idx + 1] - self.cdf[idx]) / f64::from(PROB_TOTAL);
        if idx == self.escape_index() {
            p / f64::from(PROB_TOTAL)
        } else {
            p
        }
    }

    fn index_of(&self, value: i32) -> usize {
        let i = i64::from(value) - i64::from(self.offset);
        if i >= 0 && (i as usize) < self.escape_index() {
            i as usize
        } else {
            self.escape_index()
        }
    }

    pub fn encode(&self, enc: &mut RangeEncoder, value: i32) -> Result<()> {
        let idx = self.index_of(value);
        enc.encode(self.cdf[idx], self.cdf[idx + 1] - self.cdf[idx]);
        if idx == self.escape_index() {
            let raw = i16::try_from(value)
                .map_err(|_| Error::Bitstream(format!("value {value} exceeds the 16-bit escape range")))?;
            enc.encode_raw16(raw as u16);
        }
        Ok(())
    }

    pub fn decode(&self, dec: &mut RangeDecoder<'_>) -> Result<i32> {
        let target = dec.peek();
        // Largest index with cdf[idx] ≤ target.
        let idx = self.cdf.partition_point(|&c| c <= target) - 1;
        dec.consume(self.cdf[idx], self.cdf[idx + 1] - self.cdf[idx])?;
        if idx == self.escape_index() {
            Ok(i32::from(dec.decode_raw16()? as i16))
        } else {
            Ok(self.offset + idx as i32)
        }
    }
}

/// 64 scales log-spaced over `[0.11, 256]`.
pub fn scale_table() -> &'static [f64; SCALE_TABLE_LEN] {
    static TABLE: OnceLock<[f64; SCALE_TABLE_LEN]> = OnceLock::new();
    TABLE.get_or_init(|| {
        let (lo, hi) = (SIGMA_MIN.ln(), SCALE_MAX.ln());
        let mut t = [0.0; SCALE_TABLE_LEN];
        for (i, v) in t.iter_mut().enumerate() {
            *v = (lo + (hi - lo) * i as f64 / (SCALE_TABLE_LEN - 1) as f64).exp();
        }
        t[0] = SIGMA_MIN;
        t[SCALE_TABLE_LEN - 1] = SCALE_MAX;
        t
    })
}

/// Smallest entry not below `sigma` (the last entry for larger scales).
pub fn scale_index(sigma: f64) -> usize {
    scale_table()
        .iter()
        .position(|&s| s >= sigma)
        .unwrap_or(SCALE_TABLE_LEN - 1)
}

/// Half-width of the coded residual range at a scale.
pub fn tail_for(scale: f64) -> i32 {
    (6.0 * scale).ceil() as i32 + 1
}

/// Zero-mean discretized Gaussian table for scale-table entry `index`.
pub fn build_cdf(index: usize) -> Result<CdfTable> {
    let scale = *scale_table()
        .get(index)
        .ok_or_else(|| Error::Invalid(format!("scale index {index} outside 0..{SCALE_TABLE_LEN}")))?;
    let tail = tail_for(scale);
    let pmf: Vec<f64> = (-tail..=tail).map(|r| discretized_gaussian(f64::from(r), scale)).collect();
    Ok(CdfTable::from_pmf(&pmf, -tail))
}

/// All 64 Gaussian tables, built once.
pub fn gaussian_tables() -> &'static [CdfTable] {
    static TABLES: OnceLock<Vec<CdfTable>> = OnceLock::new();
    TABLES.get_or_init(|| (0..SCALE_TABLE_LEN).map(|i| build_cdf(i).expect("index in range")).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::entropy_engine::discretized_gaussian;

    #[test]
    fn scale_table_shape() {
        let t = scale_table();
        assert_eq!(t[0], 0.11);
        assert_eq!(t[63], 256.0);
        assert!(t.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(scale_index(0.05), 0);
        assert_eq!(scale_index(0.11), 0);
        assert_eq!(scale_index(1000.0), 63);
        let i = scale_index(1.0);
        assert!(t[i] >= 1.0 && t[i - 1] < 1.0);
    }

    #[test]
    fn tables_well_formed() {
        for (i, t) in gaussian_tables().iter().enumerate() {
            assert_eq!(t.cdf[0], 0);
            assert_eq!(*t.cdf.last().unwrap(), PROB_TOTAL);
            assert!(t.cdf.windows(2).all(|w| w[1] > w[0]), "table {i}");
            let tail = tail_for(scale_table()[i]);
            assert_eq!(t.num_symbols() as i32, 2 * tail + 2);
            // Symmetric about zero within one count.
            let f = |k: i32| i64::from(t.cdf[(k + tail + 1) as usize] - t.cdf[(k + tail) as usize]);
            for k in 1..=tail {
                assert!((f(k) - f(-k)).abs() <= 1, "table {i} at {k}");
            }
        }
    }

    #[test]
    fn smallest_scale_concentrates_on_zero() {
        let t = &gaussian_tables()[0];
        let zero = t.cdf[(t.num_symbols() / 2) as usize] - t.cdf[(t.num_symbols() / 2 - 1) as usize];
        let floors = (t.num_symbols() - 1) as f64;
        let p0 = discretized_gaussian(0.0, 0.11);
        assert!(f64::from(zero) >= (0.9999 * p0 * 65536.0 - floors).floor(), "{zero}");
    }

    #[test]
    fn escape_round_trip() {
        let t = build_cdf(5).unwrap();
        let values = [0, 1, -1, 2, 500, -32768, 32767, 3];
        let mut e = RangeEncoder::new();
        for &v in &values {
            t.encode(&mut e, v).unwrap();
        }
        let bytes = e.finish();
        let mut d = RangeDecoder::new(&bytes).unwrap();
        for &v in &values {
            assert_eq!(t.decode(&mut d).unwrap(), v);
        }
        d.finish().unwrap();
        assert!(t.encode(&mut RangeEncoder::new(), 40_000).is_err());
    }

    #[test]
    fn index_out_of_range() {
        assert!(build_cdf(64).is_err());
    }
}
