use crate::data::{BinaryMask, CtSlice};
use crate::error::{Error, Result};
use crate::plane::Plane;
use crate::resample;

fn check_size(size: (usize, usize)) -> Result<()> {
    if size.0 == 0 || size.1 == 0 {
        return Err(Error::Argument(format!(
            "resize target {size:?} must be positive"
        )));
    }
    Ok(())
}

/// Bilinear resampling of a slice.
pub fn resize_image(slice: &CtSlice, size: (usize, usize)) -> Result<CtSlice> {
    check_size(size)?;
    let pixels = slice.pixels().resize_bilinear(size.0, size.1);
    Ok(CtSlice::from_normalized(
        slice.id().to_string(),
        pixels,
        slice.source(),
    ))
}

/// Nearest-neighbour resampling of a mask; the result stays binary.
pub fn resize_mask(mask: &BinaryMask, size: (usize, usize)) -> Result<BinaryMask> {
    check_size(size)?;
    let (h, w) = mask.dims();
    let values = resample::nearest(mask.values().as_slice(), h, w, size.0, size.1);
    BinaryMask::new(mask.id().to_string(), Plane::new(size.0, size.1, values)?)
}

pub fn resize_pair(
    slice: &CtSlice,
    mask: &BinaryMask,
    size: (usize, usize),
) -> Result<(CtSlice, BinaryMask)> {
    Ok((resize_image(slice, size)?, resize_mask(mask, size)?))
}
