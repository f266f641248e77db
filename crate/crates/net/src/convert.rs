//! Conversions between `bsfa_core` containers and tensors.

use bsfa_core::{DeformationField, Image};
use candle_core::{DType, Device, Tensor};

use crate::error::{NetError, Result};

/// Stacks single-channel images into a `(b, 1, H, W)` tensor.
pub fn images_to_tensor(images: &[&Image], dtype: DType, dev: &Device) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| NetError::Shape("empty batch".into()))?;
    let (h, w) = first.dims();
    let mut data = Vec::with_capacity(images.len() * h * w);
    for img in images {
        if img.channels() != 1 || img.dims() != (h, w) {
            return Err(NetError::Shape(format!(
                "batch images must be single-channel {h}x{w}, got {}x{}x{}",
                img.channels(),
                img.height(),
                img.width()
            )));
        }
        data.extend_from_slice(img.data());
    }
    Ok(Tensor::from_vec(data, (images.len(), 1, h, w), dev)?.to_dtype(dtype)?)
}

/// Stacks fields into a `(b, 2, H, W)` tensor.
pub fn fields_to_tensor(fields: &[&DeformationField], dtype: DType, dev: &Device) -> Result<Tensor> {
    let first = fields.first().ok_or_else(|| NetError::Shape("empty batch".into()))?;
    let (h, w) = first.dims();
    let mut data = Vec::with_capacity(fields.len() * 2 * h * w);
    for f in fields {
        if f.dims() != (h, w) {
            return Err(NetError::Shape("batch fields differ in size".into()));
        }
        data.extend_from_slice(f.data());
    }
    Ok(Tensor::from_vec(data, (fields.len(), 2, h, w), dev)?.to_dtype(dtype)?)
}

/// Item `i` of a `(b, 1, H, W)` tensor, clamped into `[0, 1]`.
pub fn tensor_to_image(t: &Tensor, i: usize) -> Result<Image> {
    let (_, c, h, w) = t.dims4()?;
    let data = t.get(i)?.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    Ok(Image::from_clamped(c, h, w, data)?)
}

/// Item `i` of a `(b, 2, H, W)` tensor.
pub fn tensor_to_field(t: &Tensor, i: usize, level: u32) -> Result<DeformationField> {
    let (_, c, h, w) = t.dims4()?;
    if c != 2 {
        return Err(NetError::Shape(format!("field tensor has {c} channels")));
    }
    let data = t.get(i)?.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    Ok(DeformationField::new(h, w, level, data)?)
}
