//! Dataset persistence.
//!
//! Binary layout (all scalars little-endian):
//!
//! ```text
//! magic        4 bytes   "TADS"
//! version      u32
//! config_hash  32 bytes  sha-256 of the canonical config text
//! width        u32       image width  (both cameras)
//! height       u32       image height
//! count        u64       number of records
//! records      count ×:
//!   group_id   u32
//!   head_yaw   f64
//!   head_pitch f64
//!   d_r        3 × f64
//!   head_img   width·height × f32, row-major
//!   torso_img  width·height × f32, row-major
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::Vector3;

use super::{DatasetError, Sample};
use crate::scene::{Image, Observation};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"TADS";

/// An in-memory dataset together with the header metadata.
#[derive(Debug, Clone)]
pub struct DatasetFile {
    pub config_hash: [u8; 32],
    pub width: u32,
    pub height: u32,
    pub samples: Vec<Sample>,
}

fn write_f32s(w: &mut impl Write, values: &[f32]) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(values.len() * 4);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)
}

pub fn write_dataset(path: &Path, dataset: &DatasetFile) -> Result<(), DatasetError> {
    for s in &dataset.samples {
        for img in [&s.observation.head_image, &s.observation.torso_image] {
            if img.width != dataset.width || img.height != dataset.height {
                return Err(DatasetError::Format(format!(
                    "image size {}x{} does not match header {}x{}",
                    img.width, img.height, dataset.width, dataset.height
                )));
            }
        }
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&dataset.config_hash)?;
    w.write_all(&dataset.width.to_le_bytes())?;
    w.write_all(&dataset.height.to_le_bytes())?;
    w.write_all(&(dataset.samples.len() as u64).to_le_bytes())?;
    for s in &dataset.samples {
        w.write_all(&s.group_id.to_le_bytes())?;
        w.write_all(&s.observation.head_yaw.to_le_bytes())?;
        w.write_all(&s.observation.head_pitch.to_le_bytes())?;
        for c in 0..3 {
            w.write_all(&s.d_r[c].to_le_bytes())?;
        }
        write_f32s(&mut w, &s.observation.head_image.pixels)?;
        write_f32s(&mut w, &s.observation.torso_image.pixels)?;
    }
    w.flush()?;
    Ok(())
}

fn read_exact_array<const N: usize>(r: &mut impl Read) -> Result<[u8; N], DatasetError> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

fn read_u32(r: &mut impl Read) -> Result<u32, DatasetError> {
    Ok(u32::from_le_bytes(read_exact_array::<4>(r)?))
}

fn read_f64(r: &mut impl Read) -> Result<f64, DatasetError> {
    Ok(f64::from_le_bytes(read_exact_array::<8>(r)?))
}

fn read_image(r: &mut impl Read, width: u32, height: u32) -> Result<Image, DatasetError> {
    let n = (width * height) as usize;
    let mut raw = vec![0u8; n * 4];
    r.read_exact(&mut raw)?;
    let pixels = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Image {
        width,
        height,
        pixels,
    })
}

pub fn read_dataset(path: &Path) -> Result<DatasetFile, DatasetError> {
    let mut r = BufReader::new(File::open(path)?);
    let magic = read_exact_array::<4>(&mut r)?;
    if &magic != MAGIC {
        return Err(DatasetError::Format("bad magic".into()));
    }
    let version = read_u32(&mut r)?;
    if version != FORMAT_VERSION {
        return Err(DatasetError::Format(format!(
            "unsupported version {version}, expected {FORMAT_VERSION}"
        )));
    }
    let config_hash = read_exact_array::<32>(&mut r)?;
    let width = read_u32(&mut r)?;
    let height = read_u32(&mut r)?;
    let count = u64::from_le_bytes(read_exact_array::<8>(&mut r)?);

    let mut samples = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let group_id = read_u32(&mut r)?;
        let head_yaw = read_f64(&mut r)?;
        let head_pitch = read_f64(&mut r)?;
        let d_r = Vector3::new(read_f64(&mut r)?, read_f64(&mut r)?, read_f64(&mut r)?);
        let head_image = read_image(&mut r, width, height)?;
        let torso_image = read_image(&mut r, width, height)?;
        samples.push(Sample {
            observation: Observation {
                head_image,
                torso_image,
                head_yaw,
                head_pitch,
            },
            d_r,
            group_id,
        });
    }
    // Trailing bytes indicate a corrupt or mismatched file.
    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        return Err(DatasetError::Format("trailing bytes after records".into()));
    }
    Ok(DatasetFile {
        config_hash,
        width,
        height,
        samples,
    })
}
