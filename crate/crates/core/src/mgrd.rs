//! `MGRD` grid files: magic, version 0x01, dtype (0x01 u8, 0x02 f32 LE),
//! ndim, ndim u32 LE dims, then the row-major payload.

use std::fs;
use std::path::Path;

use crate::domain::{DenseMask, ImageGrid, LabelGrid};
use crate::error::{CoreError, Result};

const MAGIC: &[u8; 4] = b"MGRD";
const VERSION: u8 = 1;
const DTYPE_U8: u8 = 1;
const DTYPE_F32: u8 = 2;

#[derive(Debug, Clone, PartialEq)]
pub enum GridData {
    U8(Vec<u8>),
    F32(Vec<f32>),
}

impl GridData {
    pub fn len(&self) -> usize {
        match self {
            GridData::U8(v) => v.len(),
            GridData::F32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub dims: Vec<usize>,
    pub data: GridData,
}

impl Grid {
    pub fn new(dims: Vec<usize>, data: GridData) -> Result<Self> {
        if dims.is_empty() || dims.len() > u8::MAX as usize {
            return Err(CoreError::Format(format!("unsupported rank {}", dims.len())));
        }
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(CoreError::Format(format!("dims {dims:?} need {n} values, got {}", data.len())));
        }
        Ok(Self { dims, data })
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(7 + 4 * self.dims.len() + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.push(match self.data {
            GridData::U8(_) => DTYPE_U8,
            GridData::F32(_) => DTYPE_F32,
        });
        out.push(self.dims.len() as u8);
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        match &self.data {
            GridData::U8(v) => out.extend_from_slice(v),
            GridData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        out
    }

    pub fn decode(buf: &[u8]) -> Result<Self> {
        if buf.len() < 7 {
            return Err(CoreError::Format(format!("truncated header ({} bytes)", buf.len())));
        }
        if &buf[..4] != MAGIC {
            return Err(CoreError::Format("bad magic".into()));
        }
        if buf[4] != VERSION {
            return Err(CoreError::Format(format!("unsupported version {}", buf[4])));
        }
        let dtype = buf[5];
        let ndim = buf[6] as usize;
        if ndim == 0 {
            return Err(CoreError::Format("zero-rank grid".into()));
        }
        let head = 7 + 4 * ndim;
        if buf.len() < head {
            return Err(CoreError::Format("truncated dims".into()));
        }
        let dims: Vec<usize> = buf[7..head]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize)
            .collect();
        let n: usize = dims.iter().product();
        let body = &buf[head..];
        let data = match dtype {
            DTYPE_U8 => {
                expect_len(body.len(), n)?;
                GridData::U8(body.to_vec())
            }
            DTYPE_F32 => {
                expect_len(body.len(), 4 * n)?;
                GridData::F32(
                    body.chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                        .collect(),
                )
            }
            other => return Err(CoreError::Format(format!("unknown dtype {other:#04x}"))),
        };
        Ok(Self { dims, data })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }

    fn dims2(&self) -> Result<(usize, usize)> {
        match self.dims[..] {
            [h, w] => Ok((h, w)),
            _ => Err(CoreError::Format(format!("expected a 2-d grid, got dims {:?}", self.dims))),
        }
    }

    pub fn from_image(img: &ImageGrid) -> Self {
        Self { dims: vec![img.height(), img.width()], data: GridData::F32(img.data().to_vec()) }
    }

    pub fn from_labels(l: &LabelGrid) -> Self {
        Self { dims: vec![l.height(), l.width()], data: GridData::U8(l.labels().to_vec()) }
    }

    pub fn from_f32(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        Self::new(dims, GridData::F32(data))
    }

    pub fn into_image(self) -> Result<ImageGrid> {
        let (h, w) = self.dims2()?;
        match self.data {
            GridData::F32(v) => ImageGrid::new(h, w, v),
            GridData::U8(_) => Err(CoreError::Format("image grid must be f32".into())),
        }
    }

    pub fn into_labels(self) -> Result<LabelGrid> {
        let (h, w) = self.dims2()?;
        match self.data {
            GridData::U8(v) => LabelGrid::new(h, w, v),
            GridData::F32(_) => Err(CoreError::Format("label grid must be u8".into())),
        }
    }

    pub fn into_mask(self) -> Result<DenseMask> {
        DenseMask::from_grid(self.into_labels()?)
    }
}

fn expect_len(got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(CoreError::Format(format!("payload size mismatch: expected {want} bytes, found {got}")));
    }
    Ok(())
}

pub fn save_image(img: &ImageGrid, path: impl AsRef<Path>) -> Result<()> {
    Grid::from_image(img).save(path)
}

pub fn load_image(path: impl AsRef<Path>) -> Result<ImageGrid> {
    Grid::load(path)?.into_image()
}

pub fn save_labels(l: &LabelGrid, path: impl AsRef<Path>) -> Result<()> {
    Grid::from_labels(l).save(path)
}

pub fn load_labels(path: impl AsRef<Path>) -> Result<LabelGrid> {
    Grid::load(path)?.into_labels()
}

pub fn load_mask(path: impl AsRef<Path>) -> Result<DenseMask> {
    Grid::load(path)?.into_mask()
}
