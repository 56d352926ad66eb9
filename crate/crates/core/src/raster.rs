//! `DPGR` raster container.
//!
//! Layout (little-endian): magic `DPGR`, version `u8`, dtype `u8`
//! (0 = f32, 1 = u8), channels `u16`, height `u32`, width `u32`, then the
//! channel-major, row-major payload.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DPGR";
pub const VERSION: u8 = 1;
const HEADER_LEN: usize = 4 + 1 + 1 + 2 + 4 + 4;

#[derive(Clone, Debug, PartialEq)]
pub enum RasterData {
    F32(Vec<f32>),
    U8(Vec<u8>),
}

impl RasterData {
    pub fn dtype_code(&self) -> u8 {
        match self {
            RasterData::F32(_) => 0,
            RasterData::U8(_) => 1,
        }
    }

    fn len(&self) -> usize {
        match self {
            RasterData::F32(v) => v.len(),
            RasterData::U8(v) => v.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RasterFile {
    pub channels: u16,
    pub height: u32,
    pub width: u32,
    pub data: RasterData,
}

impl RasterFile {
    pub fn new(channels: usize, height: usize, width: usize, data: RasterData) -> Result<Self> {
        let channels = u16::try_from(channels).map_err(|_| Error::data("too many channels"))?;
        let height = u32::try_from(height).map_err(|_| Error::data("height overflows u32"))?;
        let width = u32::try_from(width).map_err(|_| Error::data("width overflows u32"))?;
        let r = Self { channels, height, width, data };
        if r.data.len() != r.numel() {
            return Err(Error::data(format!(
                "raster payload has {} values, header says {}",
                r.data.len(),
                r.numel()
            )));
        }
        Ok(r)
    }

    /// Narrows a `[C, H, W]` (or `[H, W]`) tensor to f32.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (c, h, w) = match t.shape() {
            [h, w] => (1, *h, *w),
            [c, h, w] => (*c, *h, *w),
            s => return Err(Error::dim(format!("raster tensors are [C,H,W], got {s:?}"))),
        };
        Self::new(c, h, w, RasterData::F32(t.data().iter().map(|&v| v as f32).collect()))
    }

    pub fn from_labels(labels: &[usize], height: usize, width: usize) -> Result<Self> {
        let data = labels
            .iter()
            .map(|&l| u8::try_from(l).map_err(|_| Error::data(format!("label {l} does not fit in u8"))))
            .collect::<Result<Vec<_>>>()?;
        Self::new(1, height, width, RasterData::U8(data))
    }

    pub fn numel(&self) -> usize {
        self.channels as usize * self.height as usize * self.width as usize
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels as usize, self.height as usize, self.width as usize)
    }

    /// Widens to an f64 tensor `[C, H, W]`.
    pub fn to_tensor(&self) -> Tensor {
        let (c, h, w) = self.dims();
        let data = match &self.data {
            RasterData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            RasterData::U8(v) => v.iter().map(|&x| x as f64).collect(),
        };
        Tensor::new(&[c, h, w], data).expect("validated at construction")
    }

    pub fn to_labels(&self) -> Result<Vec<usize>> {
        match &self.data {
            RasterData::U8(v) if self.channels == 1 => Ok(v.iter().map(|&x| x as usize).collect()),
            _ => Err(Error::data("label rasters must be single-channel u8")),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.numel() * 4);
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.push(self.data.dtype_code());
        out.extend_from_slice(&self.channels.to_le_bytes());
        out.extend_from_slice(&self.height.to_le_bytes());
        out.extend_from_slice(&self.width.to_le_bytes());
        match &self.data {
            RasterData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            RasterData::U8(v) => out.extend_from_slice(v),
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::data(format!("raster truncated: {} bytes", bytes.len())));
        }
        if &bytes[0..4] != MAGIC {
            return Err(Error::data("bad raster magic"));
        }
        if bytes[4] != VERSION {
            return Err(Error::data(format!("unsupported raster version {}", bytes[4])));
        }
        let dtype = bytes[5];
        let channels = u16::from_le_bytes([bytes[6], bytes[7]]);
        let height = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        let width = u32::from_le_bytes(bytes[12..16].try_into().unwrap());
        let n = channels as usize * height as usize * width as usize;
        let payload = &bytes[HEADER_LEN..];
        let data = match dtype {
            0 => {
                if payload.len() != n * 4 {
                    return Err(Error::data(format!("f32 payload is {} bytes, expected {}", payload.len(), n * 4)));
                }
                RasterData::F32(payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
            }
            1 => {
                if payload.len() != n {
                    return Err(Error::data(format!("u8 payload is {} bytes, expected {n}", payload.len())));
                }
                RasterData::U8(payload.to_vec())
            }
            d => return Err(Error::data(format!("unknown raster dtype code {d}"))),
        };
        Ok(Self { channels, height, width, data })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Copies the window `[row, row+h) × [col, col+w)` of every channel.
    pub fn crop(&self, row: usize, col: usize, h: usize, w: usize) -> Result<Self> {
        let (c, hh, ww) = self.dims();
        if row + h > hh || col + w > ww {
            return Err(Error::data(format!("crop {h}x{w} at ({row},{col}) exceeds {hh}x{ww}")));
        }
        fn window<T: Copy>(v: &[T], c: usize, hh: usize, ww: usize, row: usize, col: usize, h: usize, w: usize) -> Vec<T> {
            let mut out = Vec::with_capacity(c * h * w);
            for ch in 0..c {
                for i in row..row + h {
                    let start = (ch * hh + i) * ww + col;
                    out.extend_from_slice(&v[start..start + w]);
                }
            }
            out
        }
        let data = match &self.data {
            RasterData::F32(v) => RasterData::F32(window(v, c, hh, ww, row, col, h, w)),
            RasterData::U8(v) => RasterData::U8(window(v, c, hh, ww, row, col, h, w)),
        };
        Self::new(c, h, w, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let r = RasterFile::new(2, 1, 3, RasterData::U8(vec![1, 2, 3, 4, 5, 6])).unwrap();
        let b = r.to_bytes();
        assert_eq!(&b[..4], b"DPGR");
        assert_eq!(b[4], VERSION);
        assert_eq!(b[5], 1);
        assert_eq!(&b[6..8], &[2, 0]);
        assert_eq!(&b[8..12], &[1, 0, 0, 0]);
        assert_eq!(&b[12..16], &[3, 0, 0, 0]);
        assert_eq!(&b[16..], &[1, 2, 3, 4, 5, 6]);
    }

    #[test]
    fn corrupt_inputs_are_data_errors() {
        let r = RasterFile::new(1, 2, 2, RasterData::F32(vec![0.0; 4])).unwrap();
        let mut b = r.to_bytes();
        b.pop();
        assert!(matches!(RasterFile::from_bytes(&b), Err(Error::Data(_))));
        let mut b = r.to_bytes();
        b[0] = b'X';
        assert!(matches!(RasterFile::from_bytes(&b), Err(Error::Data(_))));
        assert!(RasterFile::new(1, 2, 2, RasterData::U8(vec![0; 3])).is_err());
    }

    #[test]
    fn crop_picks_the_window() {
        let r = RasterFile::new(1, 3, 3, RasterData::U8((0..9).collect())).unwrap();
        let c = r.crop(1, 1, 2, 2).unwrap();
        assert_eq!(c.data, RasterData::U8(vec![4, 5, 7, 8]));
    }
}
