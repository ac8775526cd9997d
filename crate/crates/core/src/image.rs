//! 8-bit RGB images and binary PPM (P6) I/O.

use std::fs;
use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        RgbImage {
            width,
            height,
            data: vec![0; width * height * 3],
        }
    }

    pub fn from_raw(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::Invalid(format!(
                "{width}x{height} RGB image needs {} bytes, got {}",
                width * height * 3,
                data.len()
            )));
        }
        Ok(RgbImage { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn as_raw(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn put(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Store a color given in `[0, 1]`, rounding to the nearest level.
    pub fn put_f(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        self.put(x, y, rgb.map(quantize));
    }

    pub fn pixels(&self) -> impl Iterator<Item = [u8; 3]> + '_ {
        self.data.chunks_exact(3).map(|c| [c[0], c[1], c[2]])
    }

    /// Planar `[3, H, W]` tensor with values in `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        let plane = self.width * self.height;
        let mut out = vec![0.0f32; 3 * plane];
        for (i, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * plane + i] = px[c] as f32 / 255.0;
            }
        }
        Tensor::new([3, self.height, self.width], out).expect("sized above")
    }

    pub fn encode_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn decode_ppm(bytes: &[u8]) -> Result<Self> {
        let (width, height, offset) = parse_header(bytes)?;
        let body = &bytes[offset..];
        if body.len() != width * height * 3 {
            return Err(Error::Format(format!(
                "PPM body has {} bytes, expected {}",
                body.len(),
                width * height * 3
            )));
        }
        RgbImage::from_raw(width, height, body.to_vec())
    }

    pub fn save_ppm(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode_ppm()).map_err(|e| Error::io(path, e))
    }

    pub fn load_ppm(path: &Path) -> Result<Self> {
        let bytes = read_asset(path)?;
        Self::decode_ppm(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}

pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn read_asset(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingAsset(path.to_path_buf()),
        _ => Error::io(path, e),
    })
}

/// Width and height from the header of a PPM file, reading only its start.
pub fn ppm_dimensions(path: &Path) -> Result<(usize, usize)> {
    let mut f = fs::File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingAsset(path.to_path_buf()),
        _ => Error::io(path, e),
    })?;
    let mut buf = [0u8; 64];
    let mut n = 0;
    while n < buf.len() {
        let got = f.read(&mut buf[n..]).map_err(|e| Error::io(path, e))?;
        if got == 0 {
            break;
        }
        n += got;
    }
    parse_header(&buf[..n])
        .map(|(w, h, _)| (w, h))
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Parse `P6 <w> <h> <maxval>` plus the single whitespace byte that ends it.
fn parse_header(bytes: &[u8]) -> Result<(usize, usize, usize)> {
    if !bytes.starts_with(b"P6") {
        return Err(Error::Format("not a binary PPM (missing P6)".into()));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(Error::Format("truncated PPM header".into())),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format("bad number in PPM header".into()))?;
    }
    if fields[2] != 255 {
        return Err(Error::Format(format!("only 8-bit PPM is supported, maxval {}", fields[2])));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::Format("truncated PPM header".into()));
    }
    Ok((fields[0], fields[1], pos + 1))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip_and_header() {
        let mut img = RgbImage::new(3, 2);
        img.put(2, 1, [10, 20, 30]);
        img.put_f(0, 0, [1.0, 0.5, -1.0]);
        let bytes = img.encode_ppm();
        assert!(bytes.starts_with(b"P6\n3 2\n255\n"));
        assert_eq!(RgbImage::decode_ppm(&bytes).unwrap(), img);
        assert_eq!(img.get(0, 0), [255, 128, 0]);
    }

    #[test]
    fn header_with_comment() {
        let mut bytes = b"P6 # made by hand\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[1, 2, 3, 4, 5, 6]);
        let img = RgbImage::decode_ppm(&bytes).unwrap();
        assert_eq!(img.get(1, 0), [4, 5, 6]);
    }

    #[test]
    fn rejects_bad_ppm() {
        assert!(RgbImage::decode_ppm(b"P3\n1 1\n255\n").is_err());
        assert!(RgbImage::decode_ppm(b"P6\n2 2\n255\n\x00\x00").is_err());
        assert!(RgbImage::decode_ppm(b"P6\n1 1\n65535\n\x00\x00\x00\x00\x00\x00").is_err());
    }

    #[test]
    fn tensor_is_planar() {
        let mut img = RgbImage::new(2, 1);
        img.put(0, 0, [255, 0, 51]);
        let t = img.to_tensor();
        assert_eq!(t.shape(), &[3, 1, 2]);
        assert_eq!(t.data(), &[1.0, 0.0, 0.0, 0.0, 0.2, 0.0]);
    }
}
