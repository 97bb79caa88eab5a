//! Range coding of quantized latents and the `.feds` container.

pub mod cdf;
pub mod codec;
pub mod container;
pub mod range_coder;

pub use cdf::{build_cdf, gaussian_tables, scale_index, scale_table, CdfTable, SCALE_TABLE_LEN};
pub use codec::{compress_image, compress_image_traced, decompress_image, decompress_image_traced, CompressTrace};
pub use container::{BitstreamContainer, ContainerHeader, CUSTOM_LAMBDA, FORMAT_VERSION, MAGIC};
pub use range_coder::{RangeDecoder, RangeEncoder, PROB_BITS, PROB_TOTAL};
