//! RGB images in `[0, 1]` and binary PPM (P6) persistence.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Row-major, channel-interleaved RGB image.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height * 3 {
            return Err(Error::Data(format!(
                "image {width}×{height} needs {} values, got {}",
                width * height * 3,
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let data = (0..width * height).flat_map(|_| rgb).collect();
        Self { width, height, data }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let o = (y * self.width + x) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let o = (y * self.width + x) * 3;
        self.data[o..o + 3].copy_from_slice(&rgb);
    }

    /// 8-bit quantization used for PPM output.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn from_bytes(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(width, height, bytes.iter().map(|&b| b as f32 / 255.0).collect())
    }

    pub fn write_ppm(&self, w: &mut impl Write) -> Result<()> {
        write!(w, "P6\n{} {}\n255\n", self.width, self.height)?;
        w.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn save_ppm(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_ppm(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn read_ppm(r: impl Read) -> Result<Self> {
        let mut r = BufReader::new(r);
        let mut fields = Vec::new();
        let mut line = String::new();
        while fields.len() < 4 {
            line.clear();
            if r.read_line(&mut line)? == 0 {
                return Err(Error::Data("truncated PPM header".into()));
            }
            let content = line.split('#').next().unwrap_or("");
            fields.extend(content.split_whitespace().map(str::to_string));
        }
        if fields[0] != "P6" || fields[3] != "255" {
            return Err(Error::Data(format!("unsupported PPM header {fields:?}")));
        }
        let parse = |s: &str| s.parse::<usize>().map_err(|_| Error::Data(format!("bad PPM size `{s}`")));
        let (w, h) = (parse(&fields[1])?, parse(&fields[2])?);
        let mut bytes = vec![0u8; w * h * 3];
        r.read_exact(&mut bytes)?;
        Self::from_bytes(w, h, &bytes)
    }

    pub fn load_ppm(path: &Path) -> Result<Self> {
        Self::read_ppm(std::fs::File::open(path)?)
    }
}
