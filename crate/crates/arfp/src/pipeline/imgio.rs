//! Image import/export: the fixed `[-1,1] <-> [0,255]` mapping, PNG and
//! JPEG codecs, and deterministic bilinear resizing.

use std::path::Path;

use image::codecs::jpeg::JpegEncoder;
use image::{ImageEncoder, ImageReader, RgbImage};

use crate::error::{Error, Result};
use crate::nn::Tensor;

/// `[-1, 1] -> [0, 255]` with round-half-away-from-zero.
pub fn tensor_to_rgb8(t: &Tensor) -> Result<RgbImage> {
    let (c, h, w) = t.chw()?;
    if c != 3 {
        return Err(Error::invalid("expected a 3-channel image tensor"));
    }
    let mut img = RgbImage::new(w as u32, h as u32);
    for hi in 0..h {
        for wi in 0..w {
            let mut px = [0u8; 3];
            for ci in 0..3 {
                let v = t.data[(ci * h + hi) * w + wi].clamp(-1.0, 1.0);
                // f64::round rounds half away from zero.
                px[ci] = ((v + 1.0) / 2.0 * 255.0).round() as u8;
            }
            img.put_pixel(wi as u32, hi as u32, image::Rgb(px));
        }
    }
    Ok(img)
}

/// `[0, 255] -> [-1, 1]`.
pub fn rgb8_to_tensor(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut t = Tensor::zeros(&[3, h, w]);
    for hi in 0..h {
        for wi in 0..w {
            let px = img.get_pixel(wi as u32, hi as u32);
            for ci in 0..3 {
                t.data[(ci * h + hi) * w + wi] = px.0[ci] as f64 / 255.0 * 2.0 - 1.0;
            }
        }
    }
    t
}

pub fn save_png(t: &Tensor, path: &Path) -> Result<()> {
    let img = tensor_to_rgb8(t)?;
    img.save(path).map_err(|e| Error::io(path, e))
}

/// Load any supported image, resize to `size x size`, normalize to [-1, 1].
pub fn load_image(path: &Path, size: usize) -> Result<Tensor> {
    let img = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::io(path, e))?
        .to_rgb8();
    let t = rgb8_to_tensor(&img);
    bilinear_resize(&t, size, size)
}

/// Load a PNG without resizing.
pub fn load_png(path: &Path) -> Result<Tensor> {
    let img = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::io(path, e))?
        .to_rgb8();
    Ok(rgb8_to_tensor(&img))
}

/// Re-encode through the JPEG codec at the given quality and decode back.
pub fn jpeg_reencode(t: &Tensor, quality: u8) -> Result<Tensor> {
    let img = tensor_to_rgb8(t)?;
    let mut bytes: Vec<u8> = Vec::new();
    let encoder = JpegEncoder::new_with_quality(&mut bytes, quality);
    encoder
        .write_image(
            img.as_raw(),
            img.width(),
            img.height(),
            image::ExtendedColorType::Rgb8,
        )
        .map_err(|e| Error::io("<memory>", e))?;
    let decoded = image::load_from_memory(&bytes)
        .map_err(|e| Error::io("<memory>", e))?
        .to_rgb8();
    Ok(rgb8_to_tensor(&decoded))
}

/// Deterministic bilinear resize with edge clamping.
pub fn bilinear_resize(t: &Tensor, new_h: usize, new_w: usize) -> Result<Tensor> {
    let (c, h, w) = t.chw()?;
    if new_h == 0 || new_w == 0 {
        return Err(Error::invalid("target size must be positive"));
    }
    if new_h == h && new_w == w {
        return Ok(t.clone());
    }
    let mut out = Tensor::zeros(&[c, new_h, new_w]);
    for ci in 0..c {
        for hi in 0..new_h {
            // Pixel-center alignment.
            let src_y = ((hi as f64 + 0.5) * h as f64 / new_h as f64 - 0.5).max(0.0);
            let y0 = src_y.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let fy = src_y - y0 as f64;
            for wi in 0..new_w {
                let src_x = ((wi as f64 + 0.5) * w as f64 / new_w as f64 - 0.5).max(0.0);
                let x0 = src_x.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let fx = src_x - x0 as f64;
                let v00 = t.data[(ci * h + y0) * w + x0];
                let v01 = t.data[(ci * h + y0) * w + x1];
                let v10 = t.data[(ci * h + y1) * w + x0];
                let v11 = t.data[(ci * h + y1) * w + x1];
                let top = v00 + (v01 - v00) * fx;
                let bottom = v10 + (v11 - v10) * fx;
                out.data[(ci * new_h + hi) * new_w + wi] = top + (bottom - top) * fy;
            }
        }
    }
    Ok(out)
}

/// Paste a rectangle of `src` into `dst` at the same position. Used by the
/// splicing tamper protocol.
pub fn splice_patch(
    dst: &Tensor,
    src: &Tensor,
    top: usize,
    left: usize,
    ph: usize,
    pw: usize,
) -> Result<Tensor> {
    let (c, h, w) = dst.chw()?;
    if !dst.same_shape(src) {
        return Err(Error::invalid("splice images must share one shape"));
    }
    if top + ph > h || left + pw > w {
        return Err(Error::invalid("splice patch out of bounds"));
    }
    let mut out = dst.clone();
    for ci in 0..c {
        for hi in top..top + ph {
            for wi in left..left + pw {
                out.data[(ci * h + hi) * w + wi] = src.data[(ci * h + hi) * w + wi];
            }
        }
    }
    Ok(out)
}
