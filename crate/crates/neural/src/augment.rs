//! Frame augmentations: horizontal flip and median blur.

use rand::Rng;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Mirrors a `[C, H, W]` image left to right.
pub fn hflip<T: Scalar>(img: &Tensor<T>) -> Tensor<T> {
    let (c, h, w) = dims(img);
    let src = img.data();
    Tensor::from_fn(&[c, h, w], |i| {
        let x = i % w;
        src[i - x + (w - 1 - x)]
    })
}

/// Per-channel median filter with odd `kernel` and edge replication.
pub fn median_blur<T: Scalar>(img: &Tensor<T>, kernel: usize) -> Tensor<T> {
    assert!(kernel % 2 == 1, "median kernel must be odd");
    let (c, h, w) = dims(img);
    let r = (kernel / 2) as isize;
    let src = img.data();
    let mut window = Vec::with_capacity(kernel * kernel);
    let mut out = Vec::with_capacity(src.len());
    for ch in 0..c {
        for y in 0..h as isize {
            for x in 0..w as isize {
                window.clear();
                for dy in -r..=r {
                    let yy = (y + dy).clamp(0, h as isize - 1) as usize;
                    for dx in -r..=r {
                        let xx = (x + dx).clamp(0, w as isize - 1) as usize;
                        window.push(src[(ch * h + yy) * w + xx]);
                    }
                }
                window.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
                out.push(window[window.len() / 2]);
            }
        }
    }
    Tensor::new(vec![c, h, w], out).expect("same shape")
}

/// Random flip (p = 0.5) then random median blur (p = 0.5, kernel 3 or 5).
pub fn augment_frame<T: Scalar>(img: &Tensor<T>, rng: &mut impl Rng) -> Tensor<T> {
    let mut out = if rng.random::<bool>() { hflip(img) } else { img.clone() };
    if rng.random::<bool>() {
        let k = if rng.random::<bool>() { 3 } else { 5 };
        out = median_blur(&out, k);
    }
    out
}

fn dims<T: Scalar>(img: &Tensor<T>) -> (usize, usize, usize) {
    match img.shape() {
        [c, h, w] => (*c, *h, *w),
        s => panic!("expected [C,H,W] image, got {s:?}"),
    }
}
