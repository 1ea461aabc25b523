//! Geometric transforms used by test-time augmentation.
//!
//! Rotation and affine warps map every output pixel back into the source about
//! the image center and sample bilinearly; source pixels outside the raster
//! read as zero.

use super::Image;

pub fn flip_horizontal(img: &Image) -> Image {
    let (w, c) = (img.width(), img.channels());
    let mut data = Vec::with_capacity(img.data().len());
    for row in img.data().chunks_exact(w * c) {
        for px in row.chunks_exact(c).rev() {
            data.extend_from_slice(px);
        }
    }
    Image::from_parts(img.height(), w, c, data)
}

#[inline]
fn zero_padded(img: &Image, y: isize, x: isize, c: usize) -> f64 {
    if y < 0 || x < 0 || y >= img.height() as isize || x >= img.width() as isize {
        0.0
    } else {
        f64::from(img.get(y as usize, x as usize, c))
    }
}

/// Resample `img` through an inverse map from output to source coordinates.
fn inverse_warp(img: &Image, map: impl Fn(f64, f64) -> (f64, f64)) -> Image {
    let (h, w, ch) = (img.height(), img.width(), img.channels());
    let mut data = Vec::with_capacity(h * w * ch);
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = map(y as f64, x as f64);
            let y0 = sy.floor();
            let x0 = sx.floor();
            let (fy, fx) = (sy - y0, sx - x0);
            let (y0, x0) = (y0 as isize, x0 as isize);
            for c in 0..ch {
                let top = zero_padded(img, y0, x0, c) * (1.0 - fx) + zero_padded(img, y0, x0 + 1, c) * fx;
                let bottom =
                    zero_padded(img, y0 + 1, x0, c) * (1.0 - fx) + zero_padded(img, y0 + 1, x0 + 1, c) * fx;
                data.push((top * (1.0 - fy) + bottom * fy) as f32);
            }
        }
    }
    Image::from_parts(h, w, ch, data)
}

fn center(img: &Image) -> (f64, f64) {
    ((img.height() as f64 - 1.0) / 2.0, (img.width() as f64 - 1.0) / 2.0)
}

/// Rotate counter-clockwise (in display orientation) by `degrees` about the center.
pub fn rotate(img: &Image, degrees: f64) -> Image {
    let (cy, cx) = center(img);
    let (sin, cos) = degrees.to_radians().sin_cos();
    inverse_warp(img, |y, x| {
        let (dy, dx) = (y - cy, x - cx);
        (cos * dy + sin * dx + cy, cos * dx - sin * dy + cx)
    })
}

/// Scale about the center by `scale`, then translate by `(ty, tx)` pixels.
pub fn affine_warp(img: &Image, ty: f64, tx: f64, scale: f64) -> Image {
    let (cy, cx) = center(img);
    inverse_warp(img, |y, x| ((y - cy - ty) / scale + cy, (x - cx - tx) / scale + cx))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn random(h: usize, w: usize, c: usize, seed: u64) -> Image {
        let mut rng = SplitMix64::new(seed);
        Image::new(h, w, c, (0..h * w * c).map(|_| rng.next_f64() as f32).collect()).unwrap()
    }

    #[test]
    fn flip_is_an_involution() {
        let img = random(5, 6, 3, 1);
        let flipped = flip_horizontal(&img);
        assert_ne!(flipped, img);
        assert_eq!(flipped.get(0, 0, 2), img.get(0, 5, 2));
        assert_eq!(flip_horizontal(&flipped), img);
    }

    #[test]
    fn zero_rotation_and_identity_affine() {
        for (h, w) in [(6, 6), (5, 8)] {
            let img = random(h, w, 3, 2);
            assert_eq!(rotate(&img, 0.0), img);
            assert_eq!(affine_warp(&img, 0.0, 0.0, 1.0), img);
        }
    }

    #[test]
    fn quarter_turn_on_square_grid() {
        let img = random(5, 5, 1, 3);
        let out = rotate(&img, 90.0);
        // Display-CCW quarter turn: top-right corner moves to top-left.
        assert!((out.get(0, 0, 0) - img.get(0, 4, 0)).abs() < 1e-6);
        assert!((out.get(4, 0, 0) - img.get(0, 0, 0)).abs() < 1e-6);
    }

    #[test]
    fn integer_translation_shifts_and_zero_fills() {
        let img = random(4, 4, 1, 4);
        let out = affine_warp(&img, 0.0, 1.0, 1.0);
        for y in 0..4 {
            assert_eq!(out.get(y, 0, 0), 0.0);
            for x in 1..4 {
                assert_eq!(out.get(y, x, 0), img.get(y, x - 1, 0));
            }
        }
    }
}
