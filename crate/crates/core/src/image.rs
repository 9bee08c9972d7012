//! Image representation and the pixel-level primitives: decode/encode,
//! linear mixing, paired augmentation, and patch extraction.
//!
//! Pixels are f32 in [0,1], RGB, row-major HWC. Files are read as 8- or
//! 16-bit RGB rasters and written as 8-bit PNG.

use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, UieError};

/// An RGB image with components in [0,1].
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    /// Row-major, channel-last: pixels[(y * width + x) * 3 + c].
    pixels: Vec<f32>,
}

impl Image {
    /// Build from raw components, validating the [0,1] / finite invariant.
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(UieError::Shape(format!(
                "image dims must be positive, got {height}x{width}"
            )));
        }
        if pixels.len() != height * width * 3 {
            return Err(UieError::Shape(format!(
                "expected {} components for {height}x{width}x3, got {}",
                height * width * 3,
                pixels.len()
            )));
        }
        for (i, v) in pixels.iter().enumerate() {
            if !v.is_finite() || *v < 0.0 || *v > 1.0 {
                return Err(UieError::Range(format!(
                    "component {i} = {v} outside [0,1]"
                )));
            }
        }
        Ok(Image {
            height,
            width,
            pixels,
        })
    }

    /// Constant-valued image.
    pub fn constant(height: usize, width: usize, v: f32) -> Result<Self> {
        Image::new(height, width, vec![v; height * width * 3])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.pixels[(y * self.width + x) * 3 + c]
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// Rec. 601 luma, one value per pixel.
    pub fn luminance(&self) -> Vec<f32> {
        self.pixels
            .chunks_exact(3)
            .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
            .collect()
    }

    /// Copy into an (h, w, 3) f64 tensor for graph computation.
    pub fn to_tensor(&self) -> crate::tensor::Tensor {
        crate::tensor::Tensor::from_vec(
            &[self.height, self.width, 3],
            self.pixels.iter().map(|&v| v as f64).collect(),
        )
        .expect("image volume always matches its shape")
    }

    /// Build from an (h, w, 3) tensor; values are clamped to [0,1] to
    /// absorb f64→f32 rounding at the boundaries.
    pub fn from_tensor(t: &crate::tensor::Tensor) -> Result<Image> {
        if t.shape().len() != 3 || t.shape()[2] != 3 {
            return Err(UieError::Shape(format!(
                "expected (h, w, 3) tensor, got {:?}",
                t.shape()
            )));
        }
        for (i, v) in t.data().iter().enumerate() {
            if !v.is_finite() {
                return Err(UieError::Range(format!("component {i} is not finite")));
            }
        }
        Image::new(
            t.shape()[0],
            t.shape()[1],
            t.data().iter().map(|&v| v.clamp(0.0, 1.0) as f32).collect(),
        )
    }

    /// Bilinear resize (half-pixel centers, no corner alignment).
    pub fn resize_bilinear(&self, new_h: usize, new_w: usize) -> Result<Image> {
        if new_h == 0 || new_w == 0 {
            return Err(UieError::Range("resize target must be positive".into()));
        }
        let sy = self.height as f64 / new_h as f64;
        let sx = self.width as f64 / new_w as f64;
        let mut out = vec![0.0f32; new_h * new_w * 3];
        for y in 0..new_h {
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let wy = fy - y0 as f64;
            for x in 0..new_w {
                let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let wx = fx - x0 as f64;
                for c in 0..3 {
                    let p00 = self.get(y0, x0, c) as f64;
                    let p01 = self.get(y0, x1, c) as f64;
                    let p10 = self.get(y1, x0, c) as f64;
                    let p11 = self.get(y1, x1, c) as f64;
                    let top = p00 * (1.0 - wx) + p01 * wx;
                    let bot = p10 * (1.0 - wx) + p11 * wx;
                    out[(y * new_w + x) * 3 + c] = (top * (1.0 - wy) + bot * wy) as f32;
                }
            }
        }
        Image::new(new_h, new_w, out)
    }
}

/// Decode an 8- or 16-bit RGB raster into [0,1] by dividing by the
/// bit-depth maximum.
pub fn load_image(path: &Path) -> Result<Image> {
    if !path.exists() {
        return Err(UieError::Load(format!("no such file: {}", path.display())));
    }
    let dynimg = image::open(path)
        .map_err(|e| UieError::Format(format!("{}: {e}", path.display())))?;

    use image::DynamicImage::*;
    let (h, w, pixels) = match dynimg {
        ImageRgb8(img) => {
            let (w, h) = (img.width() as usize, img.height() as usize);
            let px = img.as_raw().iter().map(|v| *v as f32 / 255.0).collect();
            (h, w, px)
        }
        ImageRgba8(img) => {
            let (w, h) = (img.width() as usize, img.height() as usize);
            let mut px = Vec::with_capacity(h * w * 3);
            for p in img.pixels() {
                px.push(p.0[0] as f32 / 255.0);
                px.push(p.0[1] as f32 / 255.0);
                px.push(p.0[2] as f32 / 255.0);
            }
            (h, w, px)
        }
        ImageLuma8(_) | ImageLumaA8(_) => {
            return Err(UieError::Format(format!(
                "{}: grayscale input, expected RGB",
                path.display()
            )));
        }
        ImageRgb16(img) => {
            let (w, h) = (img.width() as usize, img.height() as usize);
            let px = img
                .as_raw()
                .iter()
                .map(|v| *v as f32 / 65535.0)
                .collect();
            (h, w, px)
        }
        ImageRgba16(img) => {
            let (w, h) = (img.width() as usize, img.height() as usize);
            let mut px = Vec::with_capacity(h * w * 3);
            for p in img.pixels() {
                px.push(p.0[0] as f32 / 65535.0);
                px.push(p.0[1] as f32 / 65535.0);
                px.push(p.0[2] as f32 / 65535.0);
            }
            (h, w, px)
        }
        other => {
            let rgb = other.to_rgb8();
            let (w, h) = (rgb.width() as usize, rgb.height() as usize);
            let px = rgb.as_raw().iter().map(|v| *v as f32 / 255.0).collect();
            (h, w, px)
        }
    };
    Image::new(h, w, pixels)
}

/// Write as 8-bit PNG. Quantization rounds to the nearest step, so a
/// load/save/load roundtrip stays within one step of the original.
pub fn save_png(img: &Image, path: &Path) -> Result<()> {
    let mut buf = image::RgbImage::new(img.width as u32, img.height as u32);
    for y in 0..img.height {
        for x in 0..img.width {
            let px = [
                (img.get(y, x, 0) * 255.0).round() as u8,
                (img.get(y, x, 1) * 255.0).round() as u8,
                (img.get(y, x, 2) * 255.0).round() as u8,
            ];
            buf.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| UieError::Format(format!("{}: {e}", path.display())))
}

/// Componentwise (1-t)*clean + t*degraded. The blend is evaluated in f64
/// so the stored f32 result is correctly rounded.
pub fn linear_mix(clean: &Image, degraded: &Image, t: f64) -> Result<Image> {
    if !clean.same_shape(degraded) {
        return Err(UieError::Shape(format!(
            "mix inputs differ: {}x{} vs {}x{}",
            clean.height, clean.width, degraded.height, degraded.width
        )));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(UieError::Range(format!("mix ratio {t} outside [0,1]")));
    }
    let pixels = clean
        .pixels
        .iter()
        .zip(degraded.pixels.iter())
        .map(|(c, d)| ((1.0 - t) * *c as f64 + t * *d as f64) as f32)
        .collect();
    Image::new(clean.height, clean.width, pixels)
}

/// A degraded image with its clean (or pseudo-clean) target.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePair {
    pub input: Image,
    pub target: Image,
}

impl ImagePair {
    pub fn new(input: Image, target: Image) -> Result<Self> {
        if !input.same_shape(&target) {
            return Err(UieError::Shape(format!(
                "pair members differ: {}x{} vs {}x{}",
                input.height, input.width, target.height, target.width
            )));
        }
        Ok(ImagePair { input, target })
    }
}

fn flip_one(img: &Image, horizontal: bool, vertical: bool) -> Image {
    let (h, w) = (img.height, img.width);
    let mut out = vec![0.0f32; h * w * 3];
    for y in 0..h {
        let sy = if vertical { h - 1 - y } else { y };
        for x in 0..w {
            let sx = if horizontal { w - 1 - x } else { x };
            for c in 0..3 {
                out[(y * w + x) * 3 + c] = img.get(sy, sx, c);
            }
        }
    }
    Image {
        height: h,
        width: w,
        pixels: out,
    }
}

/// Apply the same horizontal/vertical flips to both members of a pair.
pub fn augment_flip(pair: &ImagePair, horizontal: bool, vertical: bool) -> ImagePair {
    if !horizontal && !vertical {
        return pair.clone();
    }
    ImagePair {
        input: flip_one(&pair.input, horizontal, vertical),
        target: flip_one(&pair.target, horizontal, vertical),
    }
}

/// Top-left corner drawn for `extract_patch` with this seed. Exposed so
/// callers (and tests) can reproduce the window independently.
pub fn patch_corner(h: usize, w: usize, size: usize, seed: u64) -> (usize, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let y = rng.gen_range(0..=(h - size));
    let x = rng.gen_range(0..=(w - size));
    (y, x)
}

/// Cut the same seeded square window from both members of a pair.
///
/// `align` is the divisibility required of `size` (the network's total
/// downsampling factor); pass 1 when unconstrained. Corners land on a
/// 1-pixel grid regardless of `align`.
pub fn extract_patch(pair: &ImagePair, size: usize, align: usize, seed: u64) -> Result<ImagePair> {
    let (h, w) = (pair.input.height, pair.input.width);
    if size == 0 || size > h.min(w) {
        return Err(UieError::Range(format!(
            "patch size {size} exceeds image {h}x{w}"
        )));
    }
    if align == 0 || size % align != 0 {
        return Err(UieError::Alignment(format!(
            "patch size {size} not divisible by {align}"
        )));
    }
    let (y0, x0) = patch_corner(h, w, size, seed);
    let cut = |img: &Image| {
        let mut out = vec![0.0f32; size * size * 3];
        for y in 0..size {
            let src = ((y0 + y) * w + x0) * 3;
            out[y * size * 3..(y + 1) * size * 3]
                .copy_from_slice(&img.pixels[src..src + size * 3]);
        }
        Image {
            height: size,
            width: size,
            pixels: out,
        }
    };
    Ok(ImagePair {
        input: cut(&pair.input),
        target: cut(&pair.target),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn ramp(h: usize, w: usize) -> Image {
        let mut px = Vec::with_capacity(h * w * 3);
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    px.push(((y * w + x) * 3 + c) as f32 / (h * w * 3) as f32);
                }
            }
        }
        Image::new(h, w, px).unwrap()
    }

    #[test]
    fn rejects_out_of_range_pixels() {
        assert!(Image::new(1, 1, vec![0.0, 0.5, 1.5]).is_err());
        assert!(Image::new(1, 1, vec![0.0, f32::NAN, 0.2]).is_err());
    }

    #[test]
    fn mix_endpoints_are_identities() {
        let a = ramp(4, 5);
        let b = Image::constant(4, 5, 0.75).unwrap();
        assert_eq!(linear_mix(&a, &b, 0.0).unwrap(), a);
        assert_eq!(linear_mix(&a, &b, 1.0).unwrap(), b);
    }

    #[test]
    fn mix_midpoint_of_constants() {
        let a = Image::constant(3, 3, 0.2).unwrap();
        let b = Image::constant(3, 3, 0.6).unwrap();
        let m = linear_mix(&a, &b, 0.5).unwrap();
        for v in m.pixels() {
            assert!((v - 0.4).abs() < 1e-7);
        }
    }

    #[test]
    fn mix_validates_inputs() {
        let a = ramp(4, 4);
        let b = ramp(4, 5);
        assert!(matches!(linear_mix(&a, &b, 0.5), Err(UieError::Shape(_))));
        let c = ramp(4, 4);
        assert!(matches!(linear_mix(&a, &c, 1.5), Err(UieError::Range(_))));
    }

    #[test]
    fn flip_identity_and_involution() {
        let pair = ImagePair::new(ramp(5, 4), ramp(5, 4)).unwrap();
        assert_eq!(augment_flip(&pair, false, false), pair);
        let hh = augment_flip(&augment_flip(&pair, true, false), true, false);
        assert_eq!(hh, pair);
        let vv = augment_flip(&augment_flip(&pair, false, true), false, true);
        assert_eq!(vv, pair);
    }

    #[test]
    fn horizontal_flip_swaps_columns() {
        let img = Image::new(1, 2, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        let pair = ImagePair::new(img.clone(), img).unwrap();
        let f = augment_flip(&pair, true, false);
        assert_eq!(f.input.get(0, 0, 0), 0.4);
        assert_eq!(f.input.get(0, 1, 0), 0.1);
    }

    #[test]
    fn patch_full_image_is_identity() {
        let pair = ImagePair::new(ramp(6, 6), ramp(6, 6)).unwrap();
        let p = extract_patch(&pair, 6, 1, 42).unwrap();
        assert_eq!(p, pair);
    }

    #[test]
    fn patch_same_seed_same_window() {
        let pair = ImagePair::new(ramp(16, 16), ramp(16, 16)).unwrap();
        let a = extract_patch(&pair, 8, 4, 99).unwrap();
        let b = extract_patch(&pair, 8, 4, 99).unwrap();
        assert_eq!(a, b);
    }

    // Window content checked against offsets recomputed from the seeded
    // generator by an independent code path.
    #[test]
    fn patch_window_matches_index_oracle() {
        let img = ramp(12, 10);
        let pair = ImagePair::new(img.clone(), img.clone()).unwrap();
        let size = 4;
        let seed = 1234u64;
        let p = extract_patch(&pair, size, 1, seed).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y0: usize = rng.gen_range(0..=(12 - size));
        let x0: usize = rng.gen_range(0..=(10 - size));
        for y in 0..size {
            for x in 0..size {
                for c in 0..3 {
                    assert_eq!(p.input.get(y, x, c), img.get(y0 + y, x0 + x, c));
                }
            }
        }
    }

    #[test]
    fn patch_errors() {
        let pair = ImagePair::new(ramp(8, 8), ramp(8, 8)).unwrap();
        assert!(matches!(
            extract_patch(&pair, 9, 1, 0),
            Err(UieError::Range(_))
        ));
        assert!(matches!(
            extract_patch(&pair, 6, 4, 0),
            Err(UieError::Alignment(_))
        ));
    }

    #[test]
    fn png_roundtrip_within_one_step() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.png");
        let img = ramp(9, 7);
        save_png(&img, &path).unwrap();
        let back = load_image(&path).unwrap();
        assert_eq!(back.height(), 9);
        assert_eq!(back.width(), 7);
        for (a, b) in img.pixels().iter().zip(back.pixels().iter()) {
            assert!((a - b).abs() <= 1.0 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn load_missing_file_is_load_error() {
        assert!(matches!(
            load_image(Path::new("/nonexistent/x.png")),
            Err(UieError::Load(_))
        ));
    }

    proptest! {
        // mix(a,b,t1)*(1-s) + mix(a,b,t2)*s == mix(a,b,(1-s)t1+s t2),
        // with the outer combination taken in f64.
        #[test]
        fn mix_is_affine(t1 in 0.0f64..=1.0, t2 in 0.0f64..=1.0, s in 0.0f64..=1.0,
                         seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let px = |rng: &mut ChaCha8Rng| -> Vec<f32> {
                (0..4 * 4 * 3).map(|_| rng.gen_range(0.0..=1.0)).collect()
            };
            let a = Image::new(4, 4, px(&mut rng)).unwrap();
            let b = Image::new(4, 4, px(&mut rng)).unwrap();
            let m1 = linear_mix(&a, &b, t1).unwrap();
            let m2 = linear_mix(&a, &b, t2).unwrap();
            let m3 = linear_mix(&a, &b, (1.0 - s) * t1 + s * t2).unwrap();
            for i in 0..m1.pixels().len() {
                let lhs = m1.pixels()[i] as f64 * (1.0 - s) + m2.pixels()[i] as f64 * s;
                prop_assert!((lhs - m3.pixels()[i] as f64).abs() < 1e-7);
            }
        }

        #[test]
        fn flips_apply_identically_to_both_members(h in 1usize..6, w in 1usize..6,
                                                    hor: bool, ver: bool, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mk = |rng: &mut ChaCha8Rng| -> Image {
                let px = (0..h * w * 3).map(|_| rng.gen_range(0.0..=1.0)).collect();
                Image::new(h, w, px).unwrap()
            };
            let pair = ImagePair::new(mk(&mut rng), mk(&mut rng)).unwrap();
            let f = augment_flip(&pair, hor, ver);
            // the transform map must be the same for input and target
            for y in 0..h {
                for x in 0..w {
                    let sy = if ver { h - 1 - y } else { y };
                    let sx = if hor { w - 1 - x } else { x };
                    for c in 0..3 {
                        prop_assert_eq!(f.input.get(y, x, c), pair.input.get(sy, sx, c));
                        prop_assert_eq!(f.target.get(y, x, c), pair.target.get(sy, sx, c));
                    }
                }
            }
        }
    }
}
