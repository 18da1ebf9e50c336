//! Packed patch archive: magic, sample count, then one shape-tagged record
//! per sample. Integers are little-endian.
//!
//! Record: raster id (u32 length + UTF-8), center row and column (u32 each),
//! rotation in degrees (f32), pixel tensor, label tensor. A tensor is its
//! rank (u8), dims (u32 each) and raw u8 values; a class label is a rank-0
//! tensor holding one value.

use std::io::{Read, Write};

use super::sampling::{Label, PatchSample};
use crate::arch::{CHANNELS, PATCH};
use crate::error::{Error, Result};

pub const ARCHIVE_MAGIC: &[u8; 8] = b"PVPATCH1";

fn put_tensor<W: Write>(w: &mut W, dims: &[usize], data: &[u8]) -> std::io::Result<()> {
    w.write_all(&[dims.len() as u8])?;
    for &d in dims {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    w.write_all(data)
}

pub fn write_archive<W: Write>(w: &mut W, samples: &[PatchSample]) -> std::io::Result<()> {
    w.write_all(ARCHIVE_MAGIC)?;
    w.write_all(&(samples.len() as u64).to_le_bytes())?;
    for s in samples {
        w.write_all(&(s.raster_id.len() as u32).to_le_bytes())?;
        w.write_all(s.raster_id.as_bytes())?;
        w.write_all(&(s.center.0 as u32).to_le_bytes())?;
        w.write_all(&(s.center.1 as u32).to_le_bytes())?;
        w.write_all(&s.rotation_deg.to_le_bytes())?;
        put_tensor(w, &[PATCH, PATCH, CHANNELS], &s.pixels)?;
        match &s.label {
            Label::Class(c) => put_tensor(w, &[], &[*c])?,
            Label::Mask(m) => put_tensor(w, &[PATCH, PATCH], m)?,
        }
    }
    Ok(())
}

struct Cursor<'a>(&'a [u8]);

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.0.len() < n {
            return Err(Error::format("patch archive", "truncated"));
        }
        let (head, tail) = self.0.split_at(n);
        self.0 = tail;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn tensor(&mut self) -> Result<(Vec<usize>, &'a [u8])> {
        let rank = self.take(1)?[0] as usize;
        if rank > 4 {
            return Err(Error::format("patch archive", format!("tensor rank {rank}")));
        }
        let dims = (0..rank)
            .map(|_| self.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n = dims.iter().product();
        Ok((dims, self.take(n)?))
    }
}

pub fn read_archive<R: Read>(r: &mut R) -> Result<Vec<PatchSample>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)
        .map_err(|e| Error::format("patch archive", e.to_string()))?;
    let mut cur = Cursor(&bytes);
    if cur.take(8)? != ARCHIVE_MAGIC {
        return Err(Error::format("patch archive", "bad magic"));
    }
    let count = u64::from_le_bytes(cur.take(8)?.try_into().unwrap()) as usize;
    let mut out = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let id_len = cur.u32()? as usize;
        let raster_id = String::from_utf8(cur.take(id_len)?.to_vec())
            .map_err(|_| Error::format("patch archive", "raster id is not UTF-8"))?;
        let center = (cur.u32()? as usize, cur.u32()? as usize);
        let rotation_deg = f32::from_le_bytes(cur.take(4)?.try_into().unwrap());
        let (dims, pixels) = cur.tensor()?;
        if dims != [PATCH, PATCH, CHANNELS] {
            return Err(Error::format("patch archive", format!("pixel tensor {dims:?}")));
        }
        let (ldims, label) = cur.tensor()?;
        let label = match ldims[..] {
            [] => Label::Class(label[0]),
            [PATCH, PATCH] => Label::Mask(label.to_vec()),
            _ => return Err(Error::format("patch archive", format!("label tensor {ldims:?}"))),
        };
        out.push(PatchSample {
            pixels: pixels.to_vec(),
            label,
            raster_id,
            center,
            rotation_deg,
        });
    }
    if !cur.0.is_empty() {
        return Err(Error::format("patch archive", "trailing bytes after last record"));
    }
    Ok(out)
}
