//! 8-bit PNG images.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::Image;

/// Writes a 1- or 3-channel image with values clamped to [0, 1].
pub fn write_png(path: impl AsRef<Path>, image: &Image) -> Result<()> {
    let color = match image.channels() {
        1 => ::png::ColorType::Grayscale,
        3 => ::png::ColorType::Rgb,
        c => return Err(Error::Shape(format!("png export needs 1 or 3 channels, got {c}"))),
    };
    let file = BufWriter::new(File::create(path)?);
    let mut encoder = ::png::Encoder::new(file, image.width() as u32, image.height() as u32);
    encoder.set_color(color);
    encoder.set_depth(::png::BitDepth::Eight);
    let mut writer = encoder.write_header().map_err(|e| Error::Codec(e.to_string()))?;
    let bytes: Vec<u8> = image
        .data()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    writer.write_image_data(&bytes).map_err(|e| Error::Codec(e.to_string()))?;
    writer.finish().map_err(|e| Error::Codec(e.to_string()))?;
    Ok(())
}

/// Reads an 8-bit PNG as RGB in [0, 1]; grey is expanded and alpha dropped.
pub fn read_png_rgb(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let mut decoder = ::png::Decoder::new(BufReader::new(File::open(path)?));
    decoder.set_transformations(::png::Transformations::EXPAND | ::png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(|e| Error::Codec(format!("{}: {e}", path.display())))?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Codec(format!("{}: {e}", path.display())))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let stride = match info.color_type {
        ::png::ColorType::Grayscale => 1,
        ::png::ColorType::GrayscaleAlpha => 2,
        ::png::ColorType::Rgb => 3,
        ::png::ColorType::Rgba => 4,
        other => return Err(Error::Codec(format!("{}: unsupported color type {other:?}", path.display()))),
    };
    let bytes = &buf[..info.buffer_size()];
    Ok(Image::from_fn(w, h, 3, |x, y, c| {
        let p = &bytes[(y * w + x) * stride..];
        let v = if stride < 3 { p[0] } else { p[c] };
        v as f64 / 255.0
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_quantizes_to_eight_bits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        let img = Image::from_fn(5, 4, 3, |x, y, c| ((x + y + c) % 5) as f64 / 4.0);
        write_png(&path, &img).unwrap();
        let back = read_png_rgb(&path).unwrap();
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0);
        }
    }
}
