use std::io::Write;

use ndarray::{ArrayD, ArrayView4};
use ndarray_npy::{ReadNpyError, ReadNpyExt, WriteNpyExt};

use super::Precision;

#[derive(Debug)]
pub(crate) enum NpyError {
    Dtype(String),
    Other(String),
}

/// Decodes an `.npy` buffer holding `<f8` or `<f4` elements.
pub(crate) fn decode(bytes: &[u8]) -> Result<(ArrayD<f64>, Precision), NpyError> {
    match ArrayD::<f64>::read_npy(bytes) {
        Ok(a) => return Ok((a, Precision::F64)),
        Err(ReadNpyError::WrongDescriptor(_)) => {}
        Err(e) => return Err(NpyError::Other(e.to_string())),
    }
    match ArrayD::<f32>::read_npy(bytes) {
        Ok(a) => Ok((a.mapv(f64::from), Precision::F32)),
        Err(ReadNpyError::WrongDescriptor(descr)) => Err(NpyError::Dtype(format!("descr {descr}"))),
        Err(e) => Err(NpyError::Other(e.to_string())),
    }
}

/// Writes one `(B, C, H, W)` block as a C-contiguous little-endian array.
pub(crate) fn encode<W: Write>(writer: W, layer: ArrayView4<'_, f64>, precision: Precision) -> Result<(), String> {
    let res = match precision {
        Precision::F64 => layer.as_standard_layout().write_npy(writer),
        Precision::F32 => layer.mapv(|v| v as f32).write_npy(writer),
    };
    res.map_err(|e| e.to_string())
}
