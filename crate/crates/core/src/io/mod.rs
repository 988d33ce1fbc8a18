//! Dataset ingestion, portable image files and ZCA preprocessing.

pub mod cifar;
pub mod image;
pub mod ppm;
pub mod zca;

pub use cifar::{load_cifar10, load_cifar10_split, parse_cifar10, to_cifar10_bytes, LabeledDataset, Split};
pub use image::{unit_to_u8, Image};
pub use ppm::{decode_ppm, encode_ppm, read_ppm, write_ppm};
pub use zca::{zca_apply, zca_fit, ZcaTransform, DEFAULT_ZCA_EPS};
