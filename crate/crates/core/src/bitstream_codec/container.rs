//! On-disk layout, all integers little-endian:
//!
//! ```text
//! "FEDS" | version u8 | role u8 | lambda_index u8 | width u32 | height u32
//! z_len u32 | z payload | slice_len u32 × num_slices | slice payloads
//! ```
//!
//! The slice count is not stored; it is a property of the model that decodes
//! the file.

use crate::codec_networks::Role;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"FEDS";
pub const FORMAT_VERSION: u8 = 1;
pub const HEADER_LEN: usize = 4 + 3 + 8;
/// `lambda_index` of a model trained with a λ outside the preset table.
pub const CUSTOM_LAMBDA: u8 = u8::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ContainerHeader {
    pub version: u8,
    pub role: Role,
    pub lambda_index: u8,
    pub original_width: u32,
    pub original_height: u32,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BitstreamContainer {
    pub header: ContainerHeader,
    pub z_payload: Vec<u8>,
    pub slice_payloads: Vec<Vec<u8>>,
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.data.len()).ok_or_else(|| {
            Error::Bitstream(format!("truncated container: {what} needs {n} bytes at offset {}", self.pos))
        })?;
        let s = &self.data[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

impl ContainerHeader {
    /// Parse and validate the fixed-size header.
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { data: bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::Bitstream("not a FEDS bitstream (bad magic)".into()));
        }
        let fixed = r.take(3, "header")?;
        if fixed[0] != FORMAT_VERSION {
            return Err(Error::Bitstream(format!(
                "unsupported format version {} (expected {FORMAT_VERSION})",
                fixed[0]
            )));
        }
        let role = Role::from_code(fixed[1]).map_err(|_| Error::Bitstream(format!("bad role code {}", fixed[1])))?;
        let original_width = r.u32("width")?;
        let original_height = r.u32("height")?;
        if original_width == 0 || original_height == 0 {
            return Err(Error::Bitstream("zero image dimension".into()));
        }
        Ok(Self {
            version: fixed[0],
            role,
            lambda_index: fixed[2],
            original_width,
            original_height,
        })
    }
}

impl BitstreamContainer {
    pub fn to_bytes(&self) -> Vec<u8> {
        let h = &self.header;
        let mut out = Vec::with_capacity(self.file_len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&[h.version, h.role.code(), h.lambda_index]);
        out.extend_from_slice(&h.original_width.to_le_bytes());
        out.extend_from_slice(&h.original_height.to_le_bytes());
        out.extend_from_slice(&(self.z_payload.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.z_payload);
        for p in &self.slice_payloads {
            out.extend_from_slice(&(p.len() as u32).to_le_bytes());
        }
        for p in &self.slice_payloads {
            out.extend_from_slice(p);
        }
        out
    }

    /// Parse a file holding `num_slices` slice payloads. Lengths must account
    /// for every byte.
    pub fn from_bytes(bytes: &[u8], num_slices: usize) -> Result<Self> {
        let header = ContainerHeader::parse(bytes)?;
        let mut r = Reader {
            data: bytes,
            pos: HEADER_LEN,
        };
        let z_len = r.u32("z length")? as usize;
        let z_payload = r.take(z_len, "z payload")?.to_vec();
        let lens = (0..num_slices)
            .map(|i| r.u32(&format!("slice {i} length")).map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        let slice_payloads = lens
            .iter()
            .enumerate()
            .map(|(i, &n)| r.take(n, &format!("slice {i} payload")).map(<[u8]>::to_vec))
            .collect::<Result<Vec<_>>>()?;
        if r.pos != bytes.len() {
            return Err(Error::Bitstream(format!(
                "{} unexpected trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(Self {
            header,
            z_payload,
            slice_payloads,
        })
    }

    /// Serialized size in bytes.
    pub fn file_len(&self) -> usize {
        HEADER_LEN
            + 4
            + self.z_payload.len()
            + self.slice_payloads.iter().map(|p| 4 + p.len()).sum::<usize>()
    }

    /// Range-coded bytes only (no header or length fields).
    pub fn payload_len(&self) -> usize {
        self.z_payload.len() + self.slice_payloads.iter().map(Vec::len).sum::<usize>()
    }

    /// `8 · file bytes / (original H · W)`: every byte of the file is counted.
    pub fn bpp(&self) -> f64 {
        8.0 * self.file_len() as f64 / (f64::from(self.header.original_width) * f64::from(self.header.original_height))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> BitstreamContainer {
        BitstreamContainer {
            header: ContainerHeader {
                version: FORMAT_VERSION,
                role: Role::Student,
                lambda_index: 3,
                original_width: 751,
                original_height: 500,
            },
            z_payload: vec![1, 2, 3],
            slice_payloads: vec![vec![9; 4], vec![], vec![7]],
        }
    }

    #[test]
    fn round_trip_and_layout() {
        let c = sample();
        let b = c.to_bytes();
        assert_eq!(b.len(), c.file_len());
        assert_eq!(&b[..4], b"FEDS");
        assert_eq!(b[4..7], [1, 1, 3]);
        assert_eq!(b[7..11], 751u32.to_le_bytes());
        assert_eq!(b[11..15], 500u32.to_le_bytes());
        assert_eq!(b[15..19], 3u32.to_le_bytes());
        assert_eq!(BitstreamContainer::from_bytes(&b, 3).unwrap(), c);
        assert_eq!(c.payload_len(), 8);
    }

    #[test]
    fn corrupt_headers_rejected() {
        let b = sample().to_bytes();
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(BitstreamContainer::from_bytes(&bad, 3).is_err());
        let mut bad = b.clone();
        bad[4] = 9;
        assert!(BitstreamContainer::from_bytes(&bad, 3).is_err());
        assert!(BitstreamContainer::from_bytes(&b[..b.len() - 1], 3).is_err());
        assert!(BitstreamContainer::from_bytes(&b, 2).is_err());
        assert!(BitstreamContainer::from_bytes(&b[..10], 3).is_err());
    }
}
