use crate::data::BinaryMask;
use crate::plane::Plane;

/// Edge ground truth by 3x3 morphological gradient (dilation minus erosion).
///
/// Pixels outside the image count as background, so a full-foreground mask
/// yields a one-pixel band along the image border.
pub fn derive_edge_map(mask: &BinaryMask) -> BinaryMask {
    let m = mask.values();
    let (h, w) = m.dims();
    let at = |y: isize, x: isize| -> u8 {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0
        } else {
            m.get(y as usize, x as usize)
        }
    };
    let edges = Plane::from_fn(h, w, |y, x| {
        let (mut lo, mut hi) = (1u8, 0u8);
        for dy in -1..=1 {
            for dx in -1..=1 {
                let v = at(y as isize + dy, x as isize + dx);
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
        hi - lo
    });
    BinaryMask::new(mask.id().to_string(), edges).expect("gradient of a binary mask is binary")
}
