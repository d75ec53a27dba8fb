//! "DYCO" frame container.
//!
//! Layout (little-endian): magic `DYCO`, u32 version (1), u32 frame length L,
//! u32 frame count, u16 class count, class names (u8 length + UTF-8), then
//! per frame: u16 label, i16 SNR in dB, 2·L f32 interleaved I₀,Q₀,I₁,Q₁,…

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{IqFrame, Modulation};
use crate::error::{Error, Result};
use crate::io::ByteReader;

const MAGIC: &[u8; 4] = b"DYCO";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct FrameFile {
    pub length: usize,
    pub classes: Vec<String>,
    pub frames: Vec<IqFrame>,
}

impl FrameFile {
    /// Wrap frames with the standard class table.
    pub fn new(length: usize, frames: Vec<IqFrame>) -> Self {
        FrameFile { length, classes: Modulation::names(), frames }
    }
}

pub fn write_frames_to<W: Write>(mut w: W, file: &FrameFile) -> Result<()> {
    if file.classes.len() > u16::MAX as usize {
        return Err(Error::invalid("too many classes for the frame header"));
    }
    for f in &file.frames {
        if f.i.len() != file.length || f.q.len() != file.length {
            return Err(Error::shape(
                "write_frames",
                format!("frame of length {}/{} in a file of length {}", f.i.len(), f.q.len(), file.length),
            ));
        }
    }
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(file.length as u32).to_le_bytes())?;
    w.write_all(&(file.frames.len() as u32).to_le_bytes())?;
    w.write_all(&(file.classes.len() as u16).to_le_bytes())?;
    for name in &file.classes {
        let b = name.as_bytes();
        if b.len() > u8::MAX as usize {
            return Err(Error::invalid(format!("class name {name:?} longer than 255 bytes")));
        }
        w.write_all(&[b.len() as u8])?;
        w.write_all(b)?;
    }
    for f in &file.frames {
        w.write_all(&f.label.to_le_bytes())?;
        w.write_all(&f.snr_db.to_le_bytes())?;
        for (i, q) in f.i.iter().zip(&f.q) {
            w.write_all(&i.to_le_bytes())?;
            w.write_all(&q.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_frames(path: impl AsRef<Path>, file: &FrameFile) -> Result<()> {
    write_frames_to(BufWriter::new(File::create(path)?), file)
}

pub fn read_frames_from<R: Read>(r: R) -> Result<FrameFile> {
    let mut r = ByteReader::new(r);
    r.expect_magic(MAGIC)?;
    let version = r.u32()?;
    if version != VERSION {
        return Err(r.error(format!("unsupported DYCO version {version}")));
    }
    let length = r.u32()? as usize;
    let count = r.u32()? as usize;
    let nclass = r.u16()? as usize;
    let mut classes = Vec::with_capacity(nclass);
    for _ in 0..nclass {
        let len = r.u8()? as usize;
        classes.push(r.string(len)?);
    }
    let mut frames = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let label = r.u16()?;
        let snr_db = r.i16()?;
        let mut i = Vec::with_capacity(length);
        let mut q = Vec::with_capacity(length);
        for _ in 0..length {
            i.push(r.f32()?);
            q.push(r.f32()?);
        }
        frames.push(IqFrame { i, q, label, snr_db });
    }
    r.expect_eof()?;
    Ok(FrameFile { length, classes, frames })
}

pub fn read_frames(path: impl AsRef<Path>) -> Result<FrameFile> {
    read_frames_from(BufReader::new(File::open(path)?))
}
