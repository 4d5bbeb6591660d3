//! Image files (raw `MFID` float and 8-bit PNG) and little-endian helpers
//! shared by the other binary formats.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::image::Image;
use crate::error::{Error, Result};

pub const IMAGE_MAGIC: &[u8; 4] = b"MFID";

/// Little-endian byte sink.
#[derive(Default)]
pub struct ByteWriter {
    buf: Vec<u8>,
}

impl ByteWriter {
    pub fn new() -> Self {
        ByteWriter::default()
    }

    pub fn bytes(&mut self, b: &[u8]) -> &mut Self {
        self.buf.extend_from_slice(b);
        self
    }

    pub fn u32(&mut self, v: u32) -> &mut Self {
        self.bytes(&v.to_le_bytes())
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.bytes(&v.to_le_bytes())
    }

    pub fn f32(&mut self, v: f32) -> &mut Self {
        self.bytes(&v.to_le_bytes())
    }

    pub fn f64(&mut self, v: f64) -> &mut Self {
        self.bytes(&v.to_le_bytes())
    }

    pub fn f32s(&mut self, vs: impl IntoIterator<Item = f32>) -> &mut Self {
        for v in vs {
            self.f32(v);
        }
        self
    }

    /// Appends the CRC32 of everything written so far.
    pub fn crc(&mut self) -> &mut Self {
        let c = crc32fast::hash(&self.buf);
        self.u32(c)
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

/// Little-endian byte source with bounds checking.
pub struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        ByteReader { buf, pos: 0 }
    }

    /// Verifies and strips a trailing CRC32.
    pub fn with_crc(buf: &'a [u8]) -> Result<Self> {
        if buf.len() < 4 {
            return Err(Error::format("file too short for checksum"));
        }
        let (body, tail) = buf.split_at(buf.len() - 4);
        let want = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        if crc32fast::hash(body) != want {
            return Err(Error::format("CRC32 mismatch"));
        }
        Ok(ByteReader::new(body))
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::format("unexpected end of file"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn magic(&mut self, want: &[u8; 4]) -> Result<()> {
        let got = self.take(4)?;
        if got != want {
            return Err(Error::format(format!(
                "bad magic: expected {:?}, got {:?}",
                String::from_utf8_lossy(want),
                String::from_utf8_lossy(got)
            )));
        }
        Ok(())
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::format("length overflow"))?)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }

    pub fn is_empty(&self) -> bool {
        self.pos == self.buf.len()
    }

    pub fn expect_end(&self) -> Result<()> {
        if !self.is_empty() {
            return Err(Error::format(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

/// Writes `bytes` to `path` via a temporary sibling and rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let tmp = path.with_extension(format!("{}.tmp", path.extension().and_then(|e| e.to_str()).unwrap_or("")));
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn encode_raw(img: &Image) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.bytes(IMAGE_MAGIC)
        .u32(img.height() as u32)
        .u32(img.width() as u32)
        .u32(img.channels() as u32)
        .f32s(img.data().iter().copied());
    w.finish()
}

pub fn decode_raw(bytes: &[u8]) -> Result<Image> {
    let mut r = ByteReader::new(bytes);
    r.magic(IMAGE_MAGIC)?;
    let h = r.u32()? as usize;
    let w = r.u32()? as usize;
    let c = r.u32()? as usize;
    let data = r.f32s(h * w * c)?;
    r.expect_end()?;
    Image::new(h, w, c, data)
}

pub fn write_raw(path: &Path, img: &Image) -> Result<()> {
    write_atomic(path, &encode_raw(img))
}

pub fn read_raw(path: &Path) -> Result<Image> {
    decode_raw(&read_file(path)?)
}

/// Lossless 8-bit PNG for viewing; intensities are rounded to 1/255.
pub fn write_png(path: &Path, img: &Image) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), img.width() as u32, img.height() as u32);
    enc.set_color(if img.channels() == 3 { png::ColorType::Rgb } else { png::ColorType::Grayscale });
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| Error::format(e.to_string()))?;
    let bytes: Vec<u8> = img.data().iter().map(|&v| (v * 255.0).round() as u8).collect();
    writer.write_image_data(&bytes).map_err(|e| Error::format(e.to_string()))?;
    writer.finish().map_err(|e| Error::format(e.to_string()))?;
    Ok(())
}

pub fn read_png(path: &Path) -> Result<Image> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let decoder = png::Decoder::new(std::io::BufReader::new(file));
    let mut reader = decoder.read_info().map_err(|e| Error::format(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::format(e.to_string()))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::format("only 8-bit PNG is supported"));
    }
    let channels = match info.color_type {
        png::ColorType::Rgb => 3,
        png::ColorType::Grayscale => 1,
        other => return Err(Error::format(format!("unsupported PNG color type {other:?}"))),
    };
    let data = buf[..info.buffer_size()].iter().map(|&b| f32::from(b) / 255.0).collect();
    Image::new(info.height as usize, info.width as usize, channels, data)
}

/// Streams text to a file, creating parent directories.
pub fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())
}

pub fn flush_writer<W: Write>(w: &mut W, path: &Path) -> Result<()> {
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn raw_header_layout() {
        let img = Image::new(2, 3, 1, vec![0.0, 0.25, 0.5, 0.75, 1.0, 0.125]).unwrap();
        let bytes = encode_raw(&img);
        assert_eq!(&bytes[..4], b"MFID");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 1);
        assert_eq!(bytes.len(), 16 + 6 * 4);
        assert_eq!(decode_raw(&bytes).unwrap(), img);
    }

    #[test]
    fn corrupt_raw_is_rejected() {
        let img = Image::filled(2, 2, 3, 0.5);
        let mut bytes = encode_raw(&img);
        bytes[0] = b'X';
        assert!(decode_raw(&bytes).is_err());
        let short = &encode_raw(&img)[..20];
        assert!(decode_raw(short).is_err());
    }

    #[test]
    fn crc_detects_corruption() {
        let mut w = ByteWriter::new();
        w.bytes(b"ABCD").u32(7).crc();
        let mut bytes = w.finish();
        assert!(ByteReader::with_crc(&bytes).is_ok());
        bytes[5] ^= 1;
        assert!(ByteReader::with_crc(&bytes).is_err());
    }

    #[test]
    fn png_roundtrip_on_byte_grid() {
        let dir = tempfile::tempdir().unwrap();
        let data: Vec<f32> = (0..4 * 4 * 3).map(|i| (i * 5 % 256) as f32 / 255.0).collect();
        let img = Image::new(4, 4, 3, data).unwrap();
        let p = dir.path().join("a.png");
        write_png(&p, &img).unwrap();
        assert_eq!(read_png(&p).unwrap(), img);
    }
}
