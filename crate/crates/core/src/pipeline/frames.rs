//! Numbered PNG frame directories.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::numkit::Tensor;
use crate::video::FrameSequence;

pub fn frame_path(dir: &Path, index: usize) -> PathBuf {
    dir.join(format!("frame_{index:05}.png"))
}

fn frame_index(name: &str) -> Option<usize> {
    let digits = name.strip_prefix("frame_")?.strip_suffix(".png")?;
    (digits.len() == 5 && digits.bytes().all(|b| b.is_ascii_digit())).then(|| digits.parse().ok())?
}

/// Indices of `frame_NNNNN.png` files in `dir`, sorted.
pub fn list_frames(dir: &Path) -> Result<Vec<usize>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut idx = Vec::new();
    for e in entries {
        let e = e.map_err(|e| Error::io(dir, e))?;
        if let Some(i) = e.file_name().to_str().and_then(frame_index) {
            idx.push(i);
        }
    }
    idx.sort_unstable();
    Ok(idx)
}

pub fn read_png(path: &Path) -> Result<Tensor> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let rgb = match img {
        image::DynamicImage::ImageRgb8(rgb) => rgb,
        _ => return Err(Error::format(path, "expected 8-bit RGB")),
    };
    let (w, h) = rgb.dimensions();
    let data = rgb.into_raw().into_iter().map(|b| f32::from(b) / 255.0).collect();
    Tensor::new(vec![h as usize, w as usize, 3], data)
}

pub fn write_png(img: &Tensor, path: &Path) -> Result<()> {
    let s = img.shape();
    let bytes: Vec<u8> = img.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let buf = image::RgbImage::from_raw(s[1] as u32, s[0] as u32, bytes).ok_or_else(|| Error::format(path, "bad frame size"))?;
    buf.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads `frame_00000.png, frame_00001.png, ...`; numbering must start at 0
/// without gaps.
pub fn read_frames(dir: &Path) -> Result<FrameSequence> {
    let idx = list_frames(dir)?;
    if idx.is_empty() {
        return Err(Error::Contract(format!("no frame_NNNNN.png files in {}", dir.display())));
    }
    for (expect, &got) in idx.iter().enumerate() {
        if got != expect {
            return Err(Error::Integrity(format!("{}: missing frame_{expect:05}.png", dir.display())));
        }
    }
    let frames = idx.iter().map(|&i| read_png(&frame_path(dir, i))).collect::<Result<Vec<_>>>()?;
    FrameSequence::new(frames)
}

/// Writes frames as 8-bit RGB PNGs, values mapped by `round(v·255)`.
pub fn write_frames(seq: &FrameSequence, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, f) in seq.frames().iter().enumerate() {
        write_png(f, &frame_path(dir, i))?;
    }
    Ok(())
}
