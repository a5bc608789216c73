//! Four-channel block images: `k_xx`, `k_xy`, `k_yy` and cross-section.
//!
//! Planes are stored channel-major; within a plane row `j` (along y) comes
//! before column `i`. Pixels are half-open, so a point on a pixel edge belongs
//! to the pixel with the larger index.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frac_geom::Fracture;
use crate::geometry::{Point2, Rect, Segment};
use crate::random_field::{Grid, TensorField};
use crate::tensor::SymTensor2;

pub const CHANNELS: usize = 4;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub ratio: f64,
    pub lambda: f64,
    pub seed: u64,
    pub block: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RasterSample {
    pub r: usize,
    pub planes: Vec<f64>,
    pub target: Option<[f64; 3]>,
    pub meta: SampleMeta,
}

impl RasterSample {
    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.r * self.r;
        &self.planes[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn index(&self, c: usize, i: usize, j: usize) -> usize {
        (c * self.r + j) * self.r + i
    }

    pub fn get(&self, c: usize, i: usize, j: usize) -> f64 {
        self.planes[self.index(c, i, j)]
    }

    /// True where the pixel carries matrix values (cross-section exactly 1).
    pub fn is_matrix(&self, i: usize, j: usize) -> bool {
        self.get(3, i, j) == 1.0
    }

    /// The tensor channels as a field over `block` (one cell per pixel).
    pub fn tensor_field(&self, block: &Rect) -> Result<TensorField> {
        let grid = Grid::new(self.r, self.r, block.width() / self.r as f64, Point2::new(block.x0, block.y0))?;
        let mut values = Vec::with_capacity(self.r * self.r);
        for j in 0..self.r {
            for i in 0..self.r {
                values.push(SymTensor2::new(self.get(0, i, j), self.get(1, i, j), self.get(2, i, j)));
            }
        }
        Ok(TensorField { grid, values })
    }
}

/// Pixels touched by `s`, given in pixel units, clamped to `0..r`.
pub fn supercover(s: &Segment, r: usize) -> Vec<(usize, usize)> {
    let (du, dv) = s.dir();
    let mut ts = vec![0.0, 1.0];
    for (a, d) in [(s.a.x, du), (s.a.y, dv)] {
        if d != 0.0 {
            let (lo, hi) = (a.min(a + d), a.max(a + d));
            let mut k = lo.ceil();
            while k <= hi {
                let t = (k - a) / d;
                if t > 0.0 && t < 1.0 {
                    ts.push(t);
                }
                k += 1.0;
            }
        }
    }
    ts.sort_by(|a, b| a.total_cmp(b));
    let cell = |p: Point2| {
        let c = |v: f64| (v.floor().max(0.0) as usize).min(r - 1);
        (c(p.x), c(p.y))
    };
    let mut out = vec![cell(s.a), cell(s.b)];
    for w in ts.windows(2) {
        if w[1] > w[0] {
            out.push(cell(s.at(0.5 * (w[0] + w[1]))));
        }
    }
    out.sort_unstable_by_key(|&(i, j)| (j, i));
    out.dedup();
    out
}

/// Rasterize the tensor field and the fractures crossing `block` at `r × r`.
pub fn rasterize_block(field: &TensorField, fractures: &[Fracture], block: &Rect, r: usize) -> Result<RasterSample> {
    if r < 2 {
        return Err(Error::InvalidArgument(format!("raster size {r} is too small")));
    }
    let n = r * r;
    let p = block.width() / r as f64;
    let q = block.height() / r as f64;
    let mut planes = vec![0.0; CHANNELS * n];
    for j in 0..r {
        for i in 0..r {
            let c = Point2::new(block.x0 + (i as f64 + 0.5) * p, block.y0 + (j as f64 + 0.5) * q);
            let k = field.at(c);
            let at = j * r + i;
            planes[at] = k.xx;
            planes[n + at] = k.xy;
            planes[2 * n + at] = k.yy;
            planes[3 * n + at] = 1.0;
        }
    }
    let mut owner = vec![0.0_f64; n];
    for f in fractures {
        let Some(s) = f.segment().clip(block) else { continue };
        let local = Segment::new(
            Point2::new((s.a.x - block.x0) / p, (s.a.y - block.y0) / q),
            Point2::new((s.b.x - block.x0) / p, (s.b.y - block.y0) / q),
        );
        for (i, j) in supercover(&local, r) {
            let at = j * r + i;
            if f.aperture > owner[at] {
                owner[at] = f.aperture;
                planes[at] = f.conductivity;
                planes[n + at] = 0.0;
                planes[2 * n + at] = f.conductivity;
                planes[3 * n + at] = f.aperture;
            }
        }
    }
    Ok(RasterSample { r, planes, target: None, meta: SampleMeta::default() })
}

/// Write one sample: the four planes, three target values (NaN when absent)
/// as little-endian f32, then a JSON metadata line.
pub fn write_sample<W: Write>(s: &RasterSample, mut w: W) -> Result<()> {
    let target = s.target.unwrap_or([f64::NAN; 3]);
    let mut buf = Vec::with_capacity(4 * (s.planes.len() + 3));
    for v in s.planes.iter().chain(target.iter()) {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    let line = serde_json::json!({ "r": s.r, "meta": s.meta });
    writeln!(w, "{line}")?;
    Ok(())
}

pub fn read_sample<R: BufRead>(mut rd: R, r: usize) -> Result<RasterSample> {
    let count = CHANNELS * r * r + 3;
    let mut buf = vec![0u8; 4 * count];
    rd.read_exact(&mut buf)?;
    let vals: Vec<f64> = buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let mut line = String::new();
    rd.read_line(&mut line)?;
    #[derive(Deserialize)]
    struct Header {
        r: usize,
        meta: SampleMeta,
    }
    let h: Header = serde_json::from_str(&line)?;
    if h.r != r {
        return Err(Error::Shape { layer: "raster".into(), message: format!("expected R={r}, file has {}", h.r) });
    }
    let t = [vals[count - 3], vals[count - 2], vals[count - 1]];
    Ok(RasterSample {
        r,
        planes: vals[..count - 3].to_vec(),
        target: if t.iter().any(|v| v.is_nan()) { None } else { Some(t) },
        meta: h.meta,
    })
}
