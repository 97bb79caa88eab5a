//! 32-bit renormalizing range coder with 16-bit probabilities (carry handled
//! through a one-byte cache, as in LZMA).
//!
//! Streams are flushed with as few bytes as possible: the decoder reads zeros
//! past the end, so trailing zero bytes are never written.

use crate::error::{Error, Result};

pub const PROB_BITS: u32 = 16;
pub const PROB_TOTAL: u32 = 1 << PROB_BITS;
const TOP: u32 = 1 << 24;
/// Uniform 16-bit symbol appended to every stream and checked on decode.
const SENTINEL: u16 = 0xFED5;

pub struct RangeEncoder {
    low: u64,
    range: u32,
    cache: u8,
    cache_size: u64,
    out: Vec<u8>,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        Self {
            low: 0,
            range: u32::MAX,
            cache: 0,
            cache_size: 1,
            out: Vec::new(),
        }
    }

    /// Code the interval `[start, start + freq)` of a 2¹⁶ total.
    pub fn encode(&mut self, start: u32, freq: u32) {
        debug_assert!(freq > 0 && start + freq <= PROB_TOTAL);
        let r = self.range >> PROB_BITS;
        self.low += u64::from(r) * u64::from(start);
        self.range = r * freq;
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
    }

    /// A uniform 16-bit value.
    pub fn encode_raw16(&mut self, value: u16) {
        self.encode(u32::from(value), 1);
    }

    fn shift_low(&mut self) {
        if (self.low as u32) < 0xFF00_0000 || (self.low >> 32) != 0 {
            let carry = (self.low >> 32) as u8;
            let mut temp = self.cache;
            loop {
                self.out.push(temp.wrapping_add(carry));
                temp = 0xFF;
                self.cache_size -= 1;
                if self.cache_size == 0 {
                    break;
                }
            }
            self.cache = ((self.low >> 24) & 0xFF) as u8;
        }
        self.cache_size += 1;
        self.low = (self.low & 0x00FF_FFFF) << 8;
    }

    /// Append the sentinel and flush. The final value is `low` rounded up to
    /// a multiple of 2²⁴, which stays inside the interval since range ≥ 2²⁴,
    /// so only its top byte is significant.
    pub fn finish(mut self) -> Vec<u8> {
        self.encode_raw16(SENTINEL);
        self.low = (self.low + 0xFF_FFFF) & !0xFF_FFFF;
        self.shift_low();
        self.shift_low();
        debug_assert_eq!(self.out[0], 0);
        self.out.remove(0);
        while self.out.last() == Some(&0) {
            self.out.pop();
        }
        self.out
    }
}

pub struct RangeDecoder<'a> {
    data: &'a [u8],
    pos: usize,
    code: u32,
    range: u32,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(data: &'a [u8]) -> Result<Self> {
        if data.last() == Some(&0) {
            return Err(Error::Bitstream("non-canonical stream (trailing zero byte)".into()));
        }
        let mut d = Self {
            data,
            pos: 0,
            code: 0,
            range: u32::MAX,
        };
        for _ in 0..4 {
            d.code = (d.code << 8) | u32::from(d.next_byte());
        }
        Ok(d)
    }

    fn next_byte(&mut self) -> u8 {
        let b = self.data.get(self.pos).copied().unwrap_or(0);
        self.pos += 1;
        b
    }

    /// Scaled target in `[0, 2¹⁶)`; must be followed by [`Self::consume`].
    pub fn peek(&mut self) -> u32 {
        let r = self.range >> PROB_BITS;
        (self.code / r).min(PROB_TOTAL - 1)
    }

    pub fn consume(&mut self, start: u32, freq: u32) -> Result<()> {
        let r = self.range >> PROB_BITS;
        self.code = self
            .code
            .checked_sub(r * start)
            .ok_or_else(|| Error::Bitstream("corrupt range-coded stream".into()))?;
        self.range = r * freq;
        while self.range < TOP {
            self.range <<= 8;
            self.code = (self.code << 8) | u32::from(self.next_byte());
        }
        Ok(())
    }

    pub fn decode_raw16(&mut self) -> Result<u16> {
        let v = self.peek();
        self.consume(v, 1)?;
        Ok(v as u16)
    }

    /// Check the sentinel and that every byte was used.
    pub fn finish(mut self) -> Result<()> {
        if self.decode_raw16()? != SENTINEL {
            return Err(Error::Bitstream("stream sentinel mismatch (corrupt or truncated payload)".into()));
        }
        if self.pos < self.data.len() {
            return Err(Error::Bitstream(format!(
                "{} trailing bytes after stream end",
                self.data.len() - self.pos
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_round_trip() {
        let bytes = RangeEncoder::new().finish();
        let d = RangeDecoder::new(&bytes).unwrap();
        d.finish().unwrap();
    }

    #[test]
    fn raw_values_round_trip() {
        let vals: Vec<u16> = (0..2000u32).map(|i| (i * 7919 % 65536) as u16).collect();
        let mut e = RangeEncoder::new();
        for &v in &vals {
            e.encode_raw16(v);
        }
        let bytes = e.finish();
        assert!(bytes.len() <= 2 * vals.len() + 2 + 2);
        let mut d = RangeDecoder::new(&bytes).unwrap();
        for &v in &vals {
            assert_eq!(d.decode_raw16().unwrap(), v);
        }
        d.finish().unwrap();
    }

    #[test]
    fn truncation_and_extension_detected() {
        let mut e = RangeEncoder::new();
        for v in 0..50u16 {
            e.encode_raw16(v * 1000);
        }
        let bytes = e.finish();
        let decode = |b: &[u8]| -> Result<()> {
            let mut d = RangeDecoder::new(b)?;
            for _ in 0..50 {
                d.decode_raw16()?;
            }
            d.finish()
        };
        decode(&bytes).unwrap();
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(decode(&longer).is_err());
    }
}
