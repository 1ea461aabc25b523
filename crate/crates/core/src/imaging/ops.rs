use super::{Image, ImageError, Result};

fn require_gray(img: &Image, op: &str) -> Result<()> {
    if img.channels() != 1 {
        return Err(ImageError::Invalid(format!("{op} requires a single-channel image")));
    }
    Ok(())
}

/// Source sample positions for one axis: `(i0, i1, frac)` per output index.
fn axis_samples(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    let last = (input - 1) as f64;
    (0..output)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, last);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear resampling with half-pixel centers and edge clamping.
pub fn resize_bilinear(img: &Image, out_h: usize, out_w: usize) -> Result<Image> {
    if out_h == 0 || out_w == 0 {
        return Err(ImageError::Invalid(format!("resize target {out_h}x{out_w}")));
    }
    let c = img.channels();
    let ys = axis_samples(img.height(), out_h);
    let xs = axis_samples(img.width(), out_w);
    let mut data = Vec::with_capacity(out_h * out_w * c);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            for ch in 0..c {
                let p00 = f64::from(img.get(y0, x0, ch));
                let p01 = f64::from(img.get(y0, x1, ch));
                let p10 = f64::from(img.get(y1, x0, ch));
                let p11 = f64::from(img.get(y1, x1, ch));
                let top = p00 * (1.0 - fx) + p01 * fx;
                let bottom = p10 * (1.0 - fx) + p11 * fx;
                data.push((top * (1.0 - fy) + bottom * fy) as f32);
            }
        }
    }
    Ok(Image::from_parts(out_h, out_w, c, data))
}

/// BT.601 luma. Single-channel input is returned unchanged.
pub fn to_grayscale(img: &Image) -> Image {
    if img.channels() == 1 {
        return img.clone();
    }
    let data = img
        .data()
        .chunks_exact(3)
        .map(|p| {
            (0.299 * f64::from(p[0]) + 0.587 * f64::from(p[1]) + 0.114 * f64::from(p[2])) as f32
        })
        .collect();
    Image::from_parts(img.height(), img.width(), 1, data)
}

/// Copy a single channel into three. Three-channel input is returned unchanged.
pub fn replicate_channels(img: &Image) -> Image {
    if img.channels() == 3 {
        return img.clone();
    }
    let data = img.data().iter().flat_map(|&v| [v, v, v]).collect();
    Image::from_parts(img.height(), img.width(), 3, data)
}

pub fn median_filter_3x3(img: &Image) -> Result<Image> {
    require_gray(img, "median filter")?;
    let (h, w) = (img.height() as isize, img.width() as isize);
    let mut data = Vec::with_capacity(img.data().len());
    let mut window = [0f32; 9];
    for y in 0..h {
        for x in 0..w {
            let mut k = 0;
            for dy in -1..=1 {
                for dx in -1..=1 {
                    window[k] = img.get_clamped(y + dy, x + dx, 0);
                    k += 1;
                }
            }
            window.sort_unstable_by(f32::total_cmp);
            data.push(window[4]);
        }
    }
    Ok(Image::from_parts(img.height(), img.width(), 1, data))
}

const GAUSS_3X3: [[f64; 3]; 3] = [[1.0, 2.0, 1.0], [2.0, 4.0, 2.0], [1.0, 2.0, 1.0]];

pub fn gaussian_filter_3x3(img: &Image) -> Result<Image> {
    require_gray(img, "gaussian filter")?;
    let (h, w) = (img.height() as isize, img.width() as isize);
    let mut data = Vec::with_capacity(img.data().len());
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0f64;
            for (ky, row) in GAUSS_3X3.iter().enumerate() {
                for (kx, &k) in row.iter().enumerate() {
                    acc += k * f64::from(img.get_clamped(y + ky as isize - 1, x + kx as isize - 1, 0));
                }
            }
            data.push((acc / 16.0) as f32);
        }
    }
    Ok(Image::from_parts(img.height(), img.width(), 1, data))
}

#[inline]
pub(crate) fn intensity_bin(v: f32) -> usize {
    (v.clamp(0.0, 1.0) * 255.0).round() as usize
}

/// Global 256-bin histogram equalization with the cdf-min remap.
///
/// A histogram with a single occupied bin has no spread to redistribute; its
/// pixels keep their quantized level.
pub fn hist_equalize(img: &Image) -> Result<Image> {
    require_gray(img, "histogram equalization")?;
    let mut hist = [0u64; 256];
    for &v in img.data() {
        hist[intensity_bin(v)] += 1;
    }
    let mut cdf = [0u64; 256];
    let mut running = 0;
    for (slot, &count) in cdf.iter_mut().zip(hist.iter()) {
        running += count;
        *slot = running;
    }
    let total = running;
    let cdf_min = hist.iter().zip(cdf.iter()).find(|(&h, _)| h > 0).map(|(_, &c)| c).unwrap_or(0);
    let span = total - cdf_min;
    let lut: Vec<f32> = (0..256)
        .map(|b| {
            if span == 0 {
                b as f32 / 255.0
            } else {
                let level = (255.0 * (cdf[b].saturating_sub(cdf_min)) as f64 / span as f64).round();
                (level / 255.0) as f32
            }
        })
        .collect();
    let data = img.data().iter().map(|&v| lut[intensity_bin(v)]).collect();
    Ok(Image::from_parts(img.height(), img.width(), 1, data))
}

/// Per-channel standardization `(v - mean[c]) / std[c]`.
pub fn channel_normalize(img: &Image, mean: [f32; 3], std: [f32; 3]) -> Result<Image> {
    if img.channels() != 3 {
        return Err(ImageError::Invalid("channel normalization requires three channels".into()));
    }
    if std.iter().any(|&s| s <= 0.0) {
        return Err(ImageError::Spec("normalization_std components must be > 0".into()));
    }
    let data = img
        .data()
        .chunks_exact(3)
        .flat_map(|p| [0, 1, 2].map(|c| (p[c] - mean[c]) / std[c]))
        .collect();
    Ok(Image::from_parts(img.height(), img.width(), 3, data))
}
