//! IDX image/label files (the MNIST container format): big-endian headers,
//! magic 0x00000803 for u8 image stacks and 0x00000801 for u8 labels.

use super::{DatasetManifest, Source, Split, VolumeSample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

fn read_u32_be(reader: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    reader.read_exact(&mut b)?;
    Ok(u32::from_be_bytes(b))
}

/// Load an images/labels file pair. Pixels are scaled by 1/255 into [0, 1];
/// labels above 0 count as the positive class.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<DatasetManifest> {
    let ioerr = |p: &Path, e: std::io::Error| Error::io(p, e);

    let mut images = BufReader::new(File::open(images_path).map_err(|e| ioerr(images_path, e))?);
    let magic = read_u32_be(&mut images).map_err(|e| ioerr(images_path, e))?;
    if magic != IMAGES_MAGIC {
        return Err(Error::BadFormat(format!(
            "{}: bad magic {magic:#010x}, expected {IMAGES_MAGIC:#010x}",
            images_path.display()
        )));
    }
    let count = read_u32_be(&mut images).map_err(|e| ioerr(images_path, e))? as usize;
    let rows = read_u32_be(&mut images).map_err(|e| ioerr(images_path, e))? as usize;
    let cols = read_u32_be(&mut images).map_err(|e| ioerr(images_path, e))? as usize;
    if count == 0 || rows == 0 || cols == 0 {
        return Err(Error::BadFormat(format!(
            "{}: degenerate dimensions {count}x{rows}x{cols}",
            images_path.display()
        )));
    }
    let mut pixels = vec![0u8; count * rows * cols];
    images.read_exact(&mut pixels).map_err(|e| {
        Error::BadFormat(format!(
            "{}: truncated image payload ({e})",
            images_path.display()
        ))
    })?;

    let mut labels = BufReader::new(File::open(labels_path).map_err(|e| ioerr(labels_path, e))?);
    let magic = read_u32_be(&mut labels).map_err(|e| ioerr(labels_path, e))?;
    if magic != LABELS_MAGIC {
        return Err(Error::BadFormat(format!(
            "{}: bad magic {magic:#010x}, expected {LABELS_MAGIC:#010x}",
            labels_path.display()
        )));
    }
    let label_count = read_u32_be(&mut labels).map_err(|e| ioerr(labels_path, e))? as usize;
    if label_count != count {
        return Err(Error::BadFormat(format!(
            "image/label count mismatch: {count} images vs {label_count} labels"
        )));
    }
    let mut label_bytes = vec![0u8; count];
    labels.read_exact(&mut label_bytes).map_err(|e| {
        Error::BadFormat(format!(
            "{}: truncated label payload ({e})",
            labels_path.display()
        ))
    })?;

    let mut samples = Vec::with_capacity(count);
    for (i, chunk) in pixels.chunks(rows * cols).enumerate() {
        let data: Vec<f32> = chunk.iter().map(|&b| b as f32 / 255.0).collect();
        samples.push(VolumeSample {
            voxels: Tensor::from_vec(&[rows, cols], data)?,
            label: u8::from(label_bytes[i] > 0),
            id: i as u64,
        });
    }
    Ok(DatasetManifest {
        samples,
        assignments: vec![Split::Train; count],
        seed: 0,
        source: Source::Idx,
    })
}

/// Write an images/labels pair. Pixel values are clamped to [0, 1] and
/// quantized to bytes; rows/cols come from the first sample.
pub fn write_idx(
    images_path: &Path,
    labels_path: &Path,
    samples: &[(Tensor<f32>, u8)],
) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("cannot write an empty IDX set".into()));
    }
    let dims = samples[0].0.dims();
    if dims.len() != 2 {
        return Err(Error::shape("write_idx", "2D images", samples[0].0.shape()));
    }
    let (rows, cols) = (dims[0], dims[1]);

    let mut images = BufWriter::new(File::create(images_path).map_err(|e| Error::io(images_path, e))?);
    let w = |f: &mut BufWriter<File>, v: u32| -> std::io::Result<()> { f.write_all(&v.to_be_bytes()) };
    w(&mut images, IMAGES_MAGIC).map_err(|e| Error::io(images_path, e))?;
    w(&mut images, samples.len() as u32).map_err(|e| Error::io(images_path, e))?;
    w(&mut images, rows as u32).map_err(|e| Error::io(images_path, e))?;
    w(&mut images, cols as u32).map_err(|e| Error::io(images_path, e))?;
    for (img, _) in samples {
        if img.dims() != dims {
            return Err(Error::shape("write_idx", format!("{dims:?}"), img.shape()));
        }
        let bytes: Vec<u8> = img
            .data()
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        images.write_all(&bytes).map_err(|e| Error::io(images_path, e))?;
    }
    images.flush().map_err(|e| Error::io(images_path, e))?;

    let mut labels = BufWriter::new(File::create(labels_path).map_err(|e| Error::io(labels_path, e))?);
    w(&mut labels, LABELS_MAGIC).map_err(|e| Error::io(labels_path, e))?;
    w(&mut labels, samples.len() as u32).map_err(|e| Error::io(labels_path, e))?;
    let label_bytes: Vec<u8> = samples.iter().map(|(_, l)| *l).collect();
    labels.write_all(&label_bytes).map_err(|e| Error::io(labels_path, e))?;
    labels.flush().map_err(|e| Error::io(labels_path, e))?;
    Ok(())
}
