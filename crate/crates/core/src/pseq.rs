//! PSEQ1 clip container (little-endian).
//!
//! ```text
//! "PSEQ1\0"  u32 n  u32 T  u32 K  u32 H  u32 W
//! n x { f32 frames[T*3*H*W]  f32 joints[T*K*2]  u8 visible[T*K]  f32 bbox[T*4] }
//! ```

use std::fs;
use std::path::Path;

use rpstn_tensor::Tensor;

use crate::error::{Error, Result};
use crate::heatmap::JointSet;
use crate::synth::{Dataset, PoseSequenceSample};

pub const MAGIC: &[u8; 6] = b"PSEQ1\0";

pub fn to_bytes(data: &Dataset) -> Result<Vec<u8>> {
    data.validate()?;
    let (t, k, h, w) = (data.frames, data.joints, data.height, data.width);
    let per_sample = 4 * t * 3 * h * w + 4 * t * k * 2 + t * k + 4 * t * 4;
    let mut out = Vec::with_capacity(MAGIC.len() + 20 + data.len() * per_sample);
    out.extend_from_slice(MAGIC);
    for v in [data.len(), t, k, h, w] {
        let v = u32::try_from(v).map_err(|_| Error::Format(format!("header value {v} exceeds u32")))?;
        out.extend_from_slice(&v.to_le_bytes());
    }
    for s in &data.samples {
        for v in s.frames.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for js in &s.joints {
            for [x, y] in &js.coords {
                out.extend_from_slice(&x.to_le_bytes());
                out.extend_from_slice(&y.to_le_bytes());
            }
        }
        for js in &s.joints {
            out.extend(js.visible.iter().map(|&v| v as u8));
        }
        for b in &s.bbox {
            for v in b {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, section: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format(format!(
                "truncated file: missing {section} ({} of {n} bytes present)",
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, section: &str) -> Result<usize> {
        let b = self.take(4, section)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }

    fn f32s(&mut self, n: usize, section: &str) -> Result<Vec<f32>> {
        let b = self.take(4 * n, section)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<Dataset> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r
        .take(MAGIC.len(), "magic")
        .map_err(|_| Error::Format("not a PSEQ1 file: missing magic".into()))?;
    if magic != MAGIC {
        return Err(Error::Format("not a PSEQ1 file: wrong magic".into()));
    }
    let n = r.u32("header field n")?;
    let t = r.u32("header field T")?;
    let k = r.u32("header field K")?;
    let h = r.u32("header field H")?;
    let w = r.u32("header field W")?;
    if t == 0 || k == 0 || h == 0 || w == 0 {
        return Err(Error::Format(format!("degenerate header T={t} K={k} H={h} W={w}")));
    }
    let mut samples = Vec::with_capacity(n.min(1 << 16));
    for i in 0..n {
        let frames = r.f32s(t * 3 * h * w, &format!("frames of sample {i}"))?;
        let coords = r.f32s(t * k * 2, &format!("joints of sample {i}"))?;
        let vis = r.take(t * k, &format!("visibility of sample {i}"))?;
        let bbox = r.f32s(t * 4, &format!("bbox of sample {i}"))?;
        if let Some(bad) = vis.iter().find(|&&v| v > 1) {
            return Err(Error::Format(format!("sample {i}: visibility byte {bad} is not 0 or 1")));
        }
        let joints = (0..t)
            .map(|ti| {
                let c = (0..k)
                    .map(|ki| {
                        let o = (ti * k + ki) * 2;
                        [coords[o], coords[o + 1]]
                    })
                    .collect();
                JointSet::new(c, vis[ti * k..(ti + 1) * k].iter().map(|&v| v == 1).collect())
            })
            .collect();
        samples.push(PoseSequenceSample {
            frames: Tensor::new(&[t, 3, h, w], frames)?,
            joints,
            bbox: bbox.chunks_exact(4).map(|b| [b[0], b[1], b[2], b[3]]).collect(),
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after the last sample",
            bytes.len() - r.pos
        )));
    }
    let data = Dataset {
        frames: t,
        joints: k,
        height: h,
        width: w,
        samples,
    };
    data.validate()?;
    Ok(data)
}

pub fn write(path: &Path, data: &Dataset) -> Result<()> {
    fs::write(path, to_bytes(data)?)?;
    Ok(())
}

pub fn read(path: &Path) -> Result<Dataset> {
    from_bytes(&fs::read(path)?)
}
