use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use autograd::Tensor;

use super::Mask;
use crate::error::{Error, Result};

struct Decoded {
    width: usize,
    height: usize,
    channels: usize,
    bytes: Vec<u8>,
}

fn decode(path: &Path) -> Result<Decoded> {
    let load_err = |reason: String| Error::Load { path: path.to_path_buf(), reason };
    let file = File::open(path).map_err(|e| load_err(e.to_string()))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = decoder.read_info().map_err(|e| load_err(e.to_string()))?;
    let size = reader.output_buffer_size().ok_or_else(|| load_err("image too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| load_err(e.to_string()))?;
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => return Err(load_err("unexpanded palette image".into())),
    };
    let (width, height) = (info.width as usize, info.height as usize);
    buf.truncate(width * height * channels);
    Ok(Decoded { width, height, channels, bytes: buf })
}

/// Reads an 8-bit PNG as `[H, W, 3]` floats in `[0, 1]`. Grayscale is
/// replicated, alpha dropped.
pub fn read_rgb_png(path: &Path) -> Result<Tensor<f32>> {
    let d = decode(path)?;
    let mut data = Vec::with_capacity(d.width * d.height * 3);
    for px in d.bytes.chunks(d.channels) {
        let rgb = match d.channels {
            1 | 2 => [px[0]; 3],
            _ => [px[0], px[1], px[2]],
        };
        data.extend(rgb.iter().map(|&b| b as f32 / 255.0));
    }
    Ok(Tensor::new(&[d.height, d.width, 3], data))
}

/// Reads a label PNG; any nonzero value in the first channel becomes 1.
pub fn read_mask_png(path: &Path) -> Result<Mask> {
    let d = decode(path)?;
    let data = d.bytes.chunks(d.channels).map(|px| u8::from(px[0] != 0)).collect();
    Ok(Mask { height: d.height, width: d.width, data })
}

fn encode(path: &Path, width: usize, height: usize, color: png::ColorType, bytes: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let to_io = |e: png::EncodingError| Error::io(path, std::io::Error::other(e));
    let mut writer = enc.write_header().map_err(to_io)?;
    writer.write_image_data(bytes).map_err(to_io)?;
    writer.finish().map_err(to_io)?;
    Ok(())
}

/// Writes `[H, W, 3]` floats in `[0, 1]` as an 8-bit RGB PNG.
pub fn write_rgb_png(path: &Path, image: &Tensor<f32>) -> Result<()> {
    let s = image.shape();
    if s.len() != 3 || s[2] != 3 {
        return Err(Error::Shape(format!("expected HxWx3 image, got {s:?}")));
    }
    let bytes: Vec<u8> = image.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    encode(path, s[1], s[0], png::ColorType::Rgb, &bytes)
}

/// Writes raw 8-bit grayscale bytes, row-major.
pub fn write_gray_png(path: &Path, width: usize, height: usize, bytes: &[u8]) -> Result<()> {
    if bytes.len() != width * height {
        return Err(Error::Shape(format!("{} bytes for a {width}x{height} image", bytes.len())));
    }
    encode(path, width, height, png::ColorType::Grayscale, bytes)
}

/// Writes a binary mask as 8-bit grayscale, 0 / 255.
pub fn write_mask_png(path: &Path, mask: &Mask) -> Result<()> {
    let bytes: Vec<u8> = mask.data.iter().map(|&v| if v != 0 { 255 } else { 0 }).collect();
    encode(path, mask.width, mask.height, png::ColorType::Grayscale, &bytes)
}
