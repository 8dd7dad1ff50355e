//! Raw binary color batches: per record one label byte, then 32×32 bytes for
//! each of the three color planes.

use std::fs;
use std::path::Path;

use super::{Dataset, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const SIDE: usize = 32;
const PLANE: usize = SIDE * SIDE;
pub const CIFAR_RECORD: usize = 1 + 3 * PLANE;

/// Decodes records into `[N, 32, 32, 3]` images scaled to `[0, 1]`.
pub fn parse_cifar_bin(bytes: &[u8]) -> Result<Dataset> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD) {
        let whole = bytes.len() / CIFAR_RECORD * CIFAR_RECORD;
        return Err(Error::parse(whole as u64, format!("trailing partial record of {} bytes", bytes.len() - whole)));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut data = vec![0f32; n * PLANE * 3];
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        labels.push(rec[0] as usize);
        let out = &mut data[i * PLANE * 3..(i + 1) * PLANE * 3];
        for ch in 0..3 {
            for (p, &b) in rec[1 + ch * PLANE..1 + (ch + 1) * PLANE].iter().enumerate() {
                out[p * 3 + ch] = b as f32 / 255.0;
            }
        }
    }
    Dataset::new(Tensor::new(vec![n, SIDE, SIDE, 3], data)?, Some(labels), None, Split::Whole)
}

pub fn load_cifar_bin(path: &Path) -> Result<Dataset> {
    parse_cifar_bin(&fs::read(path)?)
}
