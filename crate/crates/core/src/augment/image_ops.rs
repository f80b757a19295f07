//! Pixel-level kernels for the augmentation set: affine warps with bilinear
//! sampling and mean-color fill, plus the value-space operations.

/// An RGB image, interleaved HWC.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub h: usize,
    pub w: usize,
    pub pixels: Vec<u8>,
}

impl Image {
    pub fn new(h: usize, w: usize, pixels: Vec<u8>) -> Self {
        debug_assert_eq!(pixels.len(), h * w * 3);
        Image { h, w, pixels }
    }

    pub fn filled(h: usize, w: usize, fill: [u8; 3]) -> Self {
        let mut pixels = Vec::with_capacity(h * w * 3);
        for _ in 0..h * w {
            pixels.extend_from_slice(&fill);
        }
        Image { h, w, pixels }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> [u8; 3] {
        let i = (y * self.w + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, px: [u8; 3]) {
        let i = (y * self.w + x) * 3;
        self.pixels[i] = px[0];
        self.pixels[i + 1] = px[1];
        self.pixels[i + 2] = px[2];
    }

    /// Normalized CHW float view for the encoder.
    pub fn to_f32_chw(&self) -> Vec<f32> {
        let plane = self.h * self.w;
        let mut out = vec![0f32; plane * 3];
        for p in 0..plane {
            for c in 0..3 {
                out[c * plane + p] = self.pixels[p * 3 + c] as f32 / 255.0;
            }
        }
        out
    }

    pub fn mean_rgb(&self) -> [u8; 3] {
        let mut acc = [0u64; 3];
        let n = (self.h * self.w) as u64;
        for px in self.pixels.chunks_exact(3) {
            acc[0] += px[0] as u64;
            acc[1] += px[1] as u64;
            acc[2] += px[2] as u64;
        }
        if n == 0 {
            return [128; 3];
        }
        [(acc[0] / n) as u8, (acc[1] / n) as u8, (acc[2] / n) as u8]
    }
}

fn clamp_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Bilinear sample at a fractional source position; out-of-bounds taps read
/// the fill color. Integer positions reproduce the source pixel exactly.
fn sample_bilinear(img: &Image, fy: f64, fx: f64, fill: [u8; 3]) -> [u8; 3] {
    let x0 = fx.floor();
    let y0 = fy.floor();
    let dx = fx - x0;
    let dy = fy - y0;
    let tap = |yy: f64, xx: f64| -> [f64; 3] {
        if yy < 0.0 || xx < 0.0 || yy as usize >= img.h || xx as usize >= img.w {
            [fill[0] as f64, fill[1] as f64, fill[2] as f64]
        } else {
            let p = img.get(yy as usize, xx as usize);
            [p[0] as f64, p[1] as f64, p[2] as f64]
        }
    };
    let p00 = tap(y0, x0);
    let p01 = tap(y0, x0 + 1.0);
    let p10 = tap(y0 + 1.0, x0);
    let p11 = tap(y0 + 1.0, x0 + 1.0);
    let mut out = [0u8; 3];
    for c in 0..3 {
        let top = p00[c] * (1.0 - dx) + p01[c] * dx;
        let bot = p10[c] * (1.0 - dx) + p11[c] * dx;
        out[c] = clamp_u8(top * (1.0 - dy) + bot * dy);
    }
    out
}

/// Warp by the inverse 2x2 matrix + translation, about the image center.
/// `inv` maps destination offsets to source offsets.
pub fn affine_warp(img: &Image, inv: [[f64; 2]; 2], shift: [f64; 2], fill: [u8; 3]) -> Image {
    let cy = (img.h as f64 - 1.0) / 2.0;
    let cx = (img.w as f64 - 1.0) / 2.0;
    let mut out = Image::filled(img.h, img.w, fill);
    for y in 0..img.h {
        for x in 0..img.w {
            let dy = y as f64 - cy;
            let dx = x as f64 - cx;
            let sx = inv[0][0] * dx + inv[0][1] * dy + shift[0] + cx;
            let sy = inv[1][0] * dx + inv[1][1] * dy + shift[1] + cy;
            out.set(y, x, sample_bilinear(img, sy, sx, fill));
        }
    }
    out
}

pub fn shear_x(img: &Image, s: f64, fill: [u8; 3]) -> Image {
    affine_warp(img, [[1.0, -s], [0.0, 1.0]], [0.0, 0.0], fill)
}

pub fn shear_y(img: &Image, s: f64, fill: [u8; 3]) -> Image {
    affine_warp(img, [[1.0, 0.0], [-s, 1.0]], [0.0, 0.0], fill)
}

pub fn translate_x(img: &Image, px: f64, fill: [u8; 3]) -> Image {
    affine_warp(img, [[1.0, 0.0], [0.0, 1.0]], [-px, 0.0], fill)
}

pub fn translate_y(img: &Image, px: f64, fill: [u8; 3]) -> Image {
    affine_warp(img, [[1.0, 0.0], [0.0, 1.0]], [0.0, -px], fill)
}

pub fn rotate(img: &Image, degrees: f64, fill: [u8; 3]) -> Image {
    let rad = degrees.to_radians();
    let (sin, cos) = rad.sin_cos();
    // Inverse rotation matrix.
    affine_warp(img, [[cos, sin], [-sin, cos]], [0.0, 0.0], fill)
}

/// Mask a square of the given side centered at (cy, cx) with the fill color.
pub fn cutout(img: &Image, side: usize, cy: usize, cx: usize, fill: [u8; 3]) -> Image {
    let mut out = img.clone();
    if side == 0 {
        return out;
    }
    let half = side as isize / 2;
    let y0 = (cy as isize - half).max(0) as usize;
    let x0 = (cx as isize - half).max(0) as usize;
    let y1 = (cy as isize - half + side as isize).clamp(0, img.h as isize) as usize;
    let x1 = (cx as isize - half + side as isize).clamp(0, img.w as isize) as usize;
    for y in y0..y1 {
        for x in x0..x1 {
            out.set(y, x, fill);
        }
    }
    out
}

pub fn invert(img: &Image) -> Image {
    Image {
        h: img.h,
        w: img.w,
        pixels: img.pixels.iter().map(|&v| 255 - v).collect(),
    }
}

/// Invert every value at or above the threshold.
pub fn solarize(img: &Image, threshold: u16) -> Image {
    Image {
        h: img.h,
        w: img.w,
        pixels: img
            .pixels
            .iter()
            .map(|&v| if (v as u16) >= threshold { 255 - v } else { v })
            .collect(),
    }
}

/// Keep the top `bits` bits of each channel value.
pub fn posterize(img: &Image, bits: u8) -> Image {
    let mask = if bits >= 8 { 0xFF } else { 0xFFu8 << (8 - bits) };
    Image {
        h: img.h,
        w: img.w,
        pixels: img.pixels.iter().map(|&v| v & mask).collect(),
    }
}

/// Per-channel histogram equalization.
pub fn equalize(img: &Image) -> Image {
    let mut out = img.clone();
    let n = img.h * img.w;
    for c in 0..3 {
        let mut hist = [0u32; 256];
        for p in 0..n {
            hist[img.pixels[p * 3 + c] as usize] += 1;
        }
        let mut cdf = [0u32; 256];
        let mut acc = 0u32;
        for v in 0..256 {
            acc += hist[v];
            cdf[v] = acc;
        }
        let cdf_min = cdf.iter().copied().find(|&v| v > 0).unwrap_or(0);
        if cdf_min as usize == n {
            continue; // single-valued channel: leave unchanged
        }
        let denom = (n as u32 - cdf_min) as f64;
        let mut lut = [0u8; 256];
        for v in 0..256 {
            let c0 = cdf[v].saturating_sub(cdf_min) as f64;
            lut[v] = clamp_u8(c0 / denom * 255.0);
        }
        for p in 0..n {
            out.pixels[p * 3 + c] = lut[img.pixels[p * 3 + c] as usize];
        }
    }
    out
}

/// Per-channel linear remap of the observed range onto the full range.
pub fn auto_contrast(img: &Image) -> Image {
    let mut out = img.clone();
    let n = img.h * img.w;
    for c in 0..3 {
        let mut lo = 255u8;
        let mut hi = 0u8;
        for p in 0..n {
            let v = img.pixels[p * 3 + c];
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if lo >= hi {
            continue;
        }
        let scale = 255.0 / (hi - lo) as f64;
        for p in 0..n {
            let v = img.pixels[p * 3 + c];
            out.pixels[p * 3 + c] = clamp_u8((v - lo) as f64 * scale);
        }
    }
    out
}

fn luma(px: [u8; 3]) -> f64 {
    0.299 * px[0] as f64 + 0.587 * px[1] as f64 + 0.114 * px[2] as f64
}

/// Blend toward black: factor 1 = identity, 0 = black.
pub fn brightness(img: &Image, factor: f64) -> Image {
    Image {
        h: img.h,
        w: img.w,
        pixels: img.pixels.iter().map(|&v| clamp_u8(v as f64 * factor)).collect(),
    }
}

/// Blend toward the mean gray of the image: factor 1 = identity.
pub fn contrast(img: &Image, factor: f64) -> Image {
    let n = (img.h * img.w) as f64;
    let mean: f64 = img.pixels.chunks_exact(3).map(|p| luma([p[0], p[1], p[2]])).sum::<f64>() / n;
    Image {
        h: img.h,
        w: img.w,
        pixels: img
            .pixels
            .iter()
            .map(|&v| clamp_u8(mean + factor * (v as f64 - mean)))
            .collect(),
    }
}

/// Blend toward the grayscale version: factor 1 = identity, 0 = grayscale.
pub fn color(img: &Image, factor: f64) -> Image {
    let mut out = img.clone();
    for (po, pi) in out.pixels.chunks_exact_mut(3).zip(img.pixels.chunks_exact(3)) {
        let g = luma([pi[0], pi[1], pi[2]]);
        for c in 0..3 {
            po[c] = clamp_u8(g + factor * (pi[c] as f64 - g));
        }
    }
    out
}

/// Blend toward a 3x3 smoothed version: factor 1 = identity, 0 = smoothed,
/// above 1 = sharpened. Border pixels stay untouched.
pub fn sharpness(img: &Image, factor: f64) -> Image {
    let mut out = img.clone();
    if img.h < 3 || img.w < 3 {
        return out;
    }
    const K: [[f64; 3]; 3] = [[1.0, 1.0, 1.0], [1.0, 5.0, 1.0], [1.0, 1.0, 1.0]];
    const KSUM: f64 = 13.0;
    for y in 1..img.h - 1 {
        for x in 1..img.w - 1 {
            let mut smooth = [0.0f64; 3];
            for (dy, row) in K.iter().enumerate() {
                for (dx, &kv) in row.iter().enumerate() {
                    let p = img.get(y + dy - 1, x + dx - 1);
                    for c in 0..3 {
                        smooth[c] += kv * p[c] as f64;
                    }
                }
            }
            let orig = img.get(y, x);
            let mut px = [0u8; 3];
            for c in 0..3 {
                let s = smooth[c] / KSUM;
                px[c] = clamp_u8(s + factor * (orig[c] as f64 - s));
            }
            out.set(y, x, px);
        }
    }
    out
}

/// Crop `[y0..y0+ch, x0..x0+cw]` and bilinearly resize to (oh, ow).
pub fn crop_resize(img: &Image, y0: usize, x0: usize, ch: usize, cw: usize, oh: usize, ow: usize) -> Image {
    debug_assert!(y0 + ch <= img.h && x0 + cw <= img.w && ch > 0 && cw > 0);
    let mut out = Image::filled(oh, ow, [0, 0, 0]);
    let fill = [0, 0, 0]; // never consulted: source positions stay in bounds
    let sy = ch as f64 / oh as f64;
    let sx = cw as f64 / ow as f64;
    for y in 0..oh {
        for x in 0..ow {
            // Align sample grid with pixel centers.
            let fy = (y as f64 + 0.5) * sy - 0.5 + y0 as f64;
            let fx = (x as f64 + 0.5) * sx - 0.5 + x0 as f64;
            let fy = fy.clamp(y0 as f64, (y0 + ch - 1) as f64);
            let fx = fx.clamp(x0 as f64, (x0 + cw - 1) as f64);
            out.set(y, x, sample_bilinear(img, fy, fx, fill));
        }
    }
    out
}

pub fn flip_horizontal(img: &Image) -> Image {
    let mut out = img.clone();
    for y in 0..img.h {
        for x in 0..img.w {
            out.set(y, x, img.get(y, img.w - 1 - x));
        }
    }
    out
}

pub fn grayscale(img: &Image) -> Image {
    let mut out = img.clone();
    for (po, pi) in out.pixels.chunks_exact_mut(3).zip(img.pixels.chunks_exact(3)) {
        let g = clamp_u8(luma([pi[0], pi[1], pi[2]]));
        po[0] = g;
        po[1] = g;
        po[2] = g;
    }
    out
}

/// Rotate hue by `shift` of the full circle (e.g. 0.1 = 36 degrees) via HSV.
pub fn hue_shift(img: &Image, shift: f64) -> Image {
    let mut out = img.clone();
    for (po, pi) in out.pixels.chunks_exact_mut(3).zip(img.pixels.chunks_exact(3)) {
        let (h, s, v) = rgb_to_hsv(pi[0], pi[1], pi[2]);
        let h = (h + shift).rem_euclid(1.0);
        let (r, g, b) = hsv_to_rgb(h, s, v);
        po[0] = r;
        po[1] = g;
        po[2] = b;
    }
    out
}

fn rgb_to_hsv(r: u8, g: u8, b: u8) -> (f64, f64, f64) {
    let r = r as f64 / 255.0;
    let g = g as f64 / 255.0;
    let b = b as f64 / 255.0;
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        (((g - b) / d).rem_euclid(6.0)) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (u8, u8, u8) {
    let h6 = h * 6.0;
    let c = v * s;
    let x = c * (1.0 - (h6.rem_euclid(2.0) - 1.0).abs());
    let (r, g, b) = match h6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    (
        clamp_u8((r + m) * 255.0),
        clamp_u8((g + m) * 255.0),
        clamp_u8((b + m) * 255.0),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient_image(h: usize, w: usize) -> Image {
        let mut px = Vec::with_capacity(h * w * 3);
        for y in 0..h {
            for x in 0..w {
                px.push((y * 23 + x * 7) as u8);
                px.push((x * 11) as u8);
                px.push((y * 5 + 13) as u8);
            }
        }
        Image::new(h, w, px)
    }

    #[test]
    fn identity_affine_is_pixel_exact() {
        let img = gradient_image(8, 8);
        let out = affine_warp(&img, [[1.0, 0.0], [0.0, 1.0]], [0.0, 0.0], [0, 0, 0]);
        assert_eq!(out, img);
    }

    #[test]
    fn full_crop_resize_is_pixel_exact() {
        let img = gradient_image(8, 8);
        let out = crop_resize(&img, 0, 0, 8, 8, 8, 8);
        assert_eq!(out, img);
    }

    #[test]
    fn double_flip_is_identity() {
        let img = gradient_image(6, 9);
        assert_eq!(flip_horizontal(&flip_horizontal(&img)), img);
    }

    #[test]
    fn invert_involution() {
        let img = gradient_image(4, 4);
        assert_eq!(invert(&invert(&img)), img);
    }

    #[test]
    fn posterize_full_bits_is_identity() {
        let img = gradient_image(4, 4);
        assert_eq!(posterize(&img, 8), img);
    }

    #[test]
    fn posterize_strength_one_keeps_four_bits() {
        // Oracle: masking with 0xF0 keeps exactly the top 4 bits.
        let img = gradient_image(4, 4);
        let out = posterize(&img, 4);
        for (o, i) in out.pixels.iter().zip(&img.pixels) {
            assert_eq!(*o, i & 0xF0);
        }
    }

    #[test]
    fn solarize_threshold_256_is_identity() {
        let img = gradient_image(4, 4);
        assert_eq!(solarize(&img, 256), img);
    }

    #[test]
    fn enhance_factor_one_is_identity() {
        let img = gradient_image(8, 8);
        assert_eq!(brightness(&img, 1.0), img);
        assert_eq!(contrast(&img, 1.0), img);
        assert_eq!(color(&img, 1.0), img);
        assert_eq!(sharpness(&img, 1.0), img);
    }

    #[test]
    fn rotate_90_moves_reference_pixel() {
        // A white dot off-center must move under rotation; the mapping for
        // -90 degrees about the center sends (y, x) to (x, h-1-y).
        let mut img = Image::filled(5, 5, [0, 0, 0]);
        img.set(0, 2, [255, 255, 255]);
        let out = rotate(&img, 90.0, [0, 0, 0]);
        assert_eq!(out.get(2, 4), [255, 255, 255]);
        assert_eq!(out.get(0, 2), [0, 0, 0]);
    }

    #[test]
    fn cutout_fills_square_with_mean() {
        let img = gradient_image(8, 8);
        let out = cutout(&img, 4, 4, 4, [9, 9, 9]);
        assert_eq!(out.get(4, 4), [9, 9, 9]);
        assert_eq!(out.get(0, 0), img.get(0, 0));
        // 4x4 block replaced
        let changed = out
            .pixels
            .chunks_exact(3)
            .zip(img.pixels.chunks_exact(3))
            .filter(|(a, b)| a != b)
            .count();
        assert_eq!(changed, 16);
    }

    #[test]
    fn translate_shifts_columns() {
        let img = gradient_image(4, 4);
        let out = translate_x(&img, 1.0, [7, 7, 7]);
        assert_eq!(out.get(0, 1), img.get(0, 0));
        assert_eq!(out.get(0, 0), [7, 7, 7]);
    }

    #[test]
    fn value_ops_stay_in_range_and_keep_geometry() {
        let img = gradient_image(8, 8);
        for out in [
            equalize(&img),
            auto_contrast(&img),
            contrast(&img, 1.9),
            brightness(&img, 1.9),
            color(&img, 0.1),
            sharpness(&img, 1.9),
            hue_shift(&img, 0.3),
        ] {
            assert_eq!((out.h, out.w), (img.h, img.w));
            assert_eq!(out.pixels.len(), img.pixels.len());
        }
    }
}
