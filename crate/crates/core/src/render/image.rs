//! Binary PPM (P6, 8-bit) and little-endian PFM images.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Row-major, channel-interleaved image.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::Shape(format!(
                "{width}x{height}x{channels} image with {} values",
                data.len()
            )));
        }
        Ok(Image {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Image {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn pixel(&self, index: usize) -> &[f64] {
        &self.data[index * self.channels..(index + 1) * self.channels]
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn to_ppm(&self) -> Result<Vec<u8>> {
        if self.channels != 3 && self.channels != 1 {
            return Err(Error::Shape(format!("PPM needs 1 or 3 channels, got {}", self.channels)));
        }
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        for p in 0..self.pixel_count() {
            let px = self.pixel(p);
            for c in 0..3 {
                let v = px[c.min(self.channels - 1)];
                out.push(quantize(v));
            }
        }
        Ok(out)
    }

    pub fn from_ppm(bytes: &[u8], origin: &Path) -> Result<Image> {
        let (fields, body) = header(bytes, 4, origin)?;
        if fields[0] != "P6" {
            return Err(Error::malformed(origin, format!("expected P6 magic, found {:?}", fields[0])));
        }
        let width = parse_dim(&fields[1], origin)?;
        let height = parse_dim(&fields[2], origin)?;
        if fields[3] != "255" {
            return Err(Error::malformed(origin, "only 8-bit PPM is supported"));
        }
        let n = width * height * 3;
        if body.len() != n {
            return Err(Error::malformed(origin, format!("expected {n} pixel bytes, found {}", body.len())));
        }
        Image::new(width, height, 3, body.iter().map(|&b| f64::from(b) / 255.0).collect())
    }

    /// `Pf` for one channel, `PF` for three; rows stored bottom to top.
    pub fn to_pfm(&self) -> Result<Vec<u8>> {
        let magic = match self.channels {
            1 => "Pf",
            3 => "PF",
            c => return Err(Error::Shape(format!("PFM needs 1 or 3 channels, got {c}"))),
        };
        let mut out = format!("{magic}\n{} {}\n-1.0\n", self.width, self.height).into_bytes();
        let row = self.width * self.channels;
        for r in (0..self.height).rev() {
            for v in &self.data[r * row..(r + 1) * row] {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_pfm(bytes: &[u8], origin: &Path) -> Result<Image> {
        let (fields, body) = header(bytes, 4, origin)?;
        let channels = match fields[0].as_str() {
            "Pf" => 1,
            "PF" => 3,
            m => return Err(Error::malformed(origin, format!("expected PFM magic, found {m:?}"))),
        };
        let width = parse_dim(&fields[1], origin)?;
        let height = parse_dim(&fields[2], origin)?;
        let scale: f64 = fields[3]
            .parse()
            .map_err(|_| Error::malformed(origin, format!("bad PFM scale {:?}", fields[3])))?;
        if scale >= 0.0 {
            return Err(Error::malformed(origin, "only little-endian PFM is supported"));
        }
        let row = width * channels;
        if body.len() != row * height * 4 {
            return Err(Error::malformed(origin, format!("expected {} float bytes, found {}", row * height * 4, body.len())));
        }
        let floats: Vec<f64> = body
            .chunks_exact(4)
            .map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
            .collect();
        let mut data = Vec::with_capacity(floats.len());
        for r in (0..height).rev() {
            data.extend_from_slice(&floats[r * row..(r + 1) * row]);
        }
        Image::new(width, height, channels, data)
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_ppm()?)
    }

    pub fn write_pfm(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_pfm()?)
    }

    pub fn read_ppm(path: &Path) -> Result<Image> {
        Image::from_ppm(&std::fs::read(path).map_err(|e| Error::io(path, e))?, path)
    }

    pub fn read_pfm(path: &Path) -> Result<Image> {
        Image::from_pfm(&std::fs::read(path).map_err(|e| Error::io(path, e))?, path)
    }
}

fn quantize(v: f64) -> u8 {
    if v.is_nan() {
        0
    } else {
        (v.clamp(0.0, 1.0) * 255.0).round() as u8
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

fn parse_dim(s: &str, origin: &Path) -> Result<usize> {
    match s.parse::<usize>() {
        Ok(v) if v > 0 => Ok(v),
        _ => Err(Error::malformed(origin, format!("bad image dimension {s:?}"))),
    }
}

/// Splits `count` whitespace-separated header tokens (with `#` comments) from the payload,
/// which starts after exactly one whitespace byte.
fn header<'a>(bytes: &'a [u8], count: usize, origin: &Path) -> Result<(Vec<String>, &'a [u8])> {
    let mut fields = Vec::with_capacity(count);
    let mut i = 0;
    while fields.len() < count {
        while i < bytes.len() && (bytes[i].is_ascii_whitespace() || bytes[i] == b'#') {
            if bytes[i] == b'#' {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
            } else {
                i += 1;
            }
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(Error::malformed(origin, "truncated image header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    if i >= bytes.len() {
        return Err(Error::malformed(origin, "image has no pixel data"));
    }
    Ok((fields, &bytes[i + 1..]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip_is_exact_on_the_byte_grid() {
        let data: Vec<f64> = (0..4 * 3 * 3).map(|i| f64::from((i * 7 % 256) as u8) / 255.0).collect();
        let img = Image::new(4, 3, 3, data).unwrap();
        let bytes = img.to_ppm().unwrap();
        assert!(bytes.starts_with(b"P6\n4 3\n255\n"));
        assert_eq!(Image::from_ppm(&bytes, Path::new("x")).unwrap(), img);
    }

    #[test]
    fn ppm_clamps_and_rounds() {
        let img = Image::new(1, 1, 3, vec![-0.5, 0.5, 2.0]).unwrap();
        let bytes = img.to_ppm().unwrap();
        assert_eq!(&bytes[bytes.len() - 3..], &[0, 128, 255]);
    }

    #[test]
    fn pfm_round_trip_keeps_infinity_and_row_order() {
        let data = vec![1.5, f64::INFINITY, -2.25, 0.0, 3.0, 4.0];
        let img = Image::new(2, 3, 1, data).unwrap();
        let bytes = img.to_pfm().unwrap();
        assert!(bytes.starts_with(b"Pf\n2 3\n-1.0\n"));
        // bottom row first
        assert_eq!(&bytes[bytes.len() - 24..bytes.len() - 20], &3.0f32.to_le_bytes());
        assert_eq!(Image::from_pfm(&bytes, Path::new("x")).unwrap(), img);
    }

    #[test]
    fn malformed_headers_are_rejected() {
        let p = Path::new("bad");
        assert!(Image::from_ppm(b"P5\n1 1\n255\n\0", p).is_err());
        assert!(Image::from_ppm(b"P6\n2 2\n255\n\0\0\0", p).is_err());
        assert!(Image::from_pfm(b"Pf\n1 1\n1.0\n\0\0\0\0", p).is_err());
        assert!(Image::from_pfm(b"Pf\n1 1", p).is_err());
        let with_comment = b"P6\n# made here\n1 1\n255\n\x01\x02\x03";
        assert_eq!(Image::from_ppm(with_comment, p).unwrap().data.len(), 3);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::new(2, 1, 3, vec![0.25, 0.5, 0.75, 1.0, 0.0, 0.125]).unwrap();
        let path = dir.path().join("a.pfm");
        img.write_pfm(&path).unwrap();
        assert_eq!(Image::read_pfm(&path).unwrap(), img);
        assert!(Image::read_ppm(&dir.path().join("missing.ppm")).is_err());
    }
}
