//! Float maps: `FMAP`, then height, width, channels as little-endian `u32`,
//! then `height * width * channels` little-endian `f32` values, row-major with
//! interleaved channels.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::Image;

pub const MAGIC: &[u8; 4] = b"FMAP";

pub fn write_float_map(path: impl AsRef<Path>, image: &Image) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    for d in [image.height(), image.width(), image.channels()] {
        let d = u32::try_from(d).map_err(|_| Error::Shape(format!("dimension {d} exceeds u32")))?;
        w.write_all(&d.to_le_bytes())?;
    }
    for &v in image.data() {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_float_map(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let mut r = BufReader::new(File::open(path)?);
    let mut head = [0u8; 16];
    r.read_exact(&mut head)
        .map_err(|_| Error::parse(path, 0, "float map header is truncated"))?;
    if &head[..4] != MAGIC {
        return Err(Error::parse(path, 0, "missing FMAP magic"));
    }
    let dim = |k: usize| u32::from_le_bytes(head[4 + 4 * k..8 + 4 * k].try_into().unwrap()) as usize;
    let (h, w, c) = (dim(0), dim(1), dim(2));
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() != h * w * c * 4 {
        return Err(Error::parse(
            path,
            0,
            format!("expected {} data bytes for {h}x{w}x{c}, found {}", h * w * c * 4, bytes.len()),
        ));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    Image::from_vec(w, h, c, data)
}
