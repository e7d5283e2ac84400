use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let k = i % period;
    if k < n {
        k
    } else {
        period - k
    }
}

/// Reflect-pads the bottom and right edges up to multiples of `m`. Returns
/// the padded tensor and the original `(height, width)`.
pub fn pad_reflect_to_multiple<T: Scalar>(t: &Tensor<T>, m: usize) -> (Tensor<T>, (usize, usize)) {
    let s = t.shape();
    let up = |v: usize| v.div_ceil(m) * m;
    let (h, w) = (up(s.h), up(s.w));
    if (h, w) == (s.h, s.w) {
        return (t.clone(), (s.h, s.w));
    }
    let padded = Tensor::from_fn(Shape::new(s.n, s.c, h, w), |n, c, y, x| {
        t.at(n, c, reflect(y, s.h), reflect(x, s.w))
    });
    (padded, (s.h, s.w))
}

/// Top-left `height × width` window.
pub fn crop_to<T: Scalar>(t: &Tensor<T>, height: usize, width: usize) -> Result<Tensor<T>> {
    let s = t.shape();
    if height > s.h || width > s.w {
        return Err(Error::shape("crop", format!("{height}x{width} from {s}")));
    }
    if (height, width) == (s.h, s.w) {
        return Ok(t.clone());
    }
    t.crop(0, 0, height, width)
}
