#![allow(dead_code)]

use dfm_upscale::frac_geom::{generate_dfn, DfnSpec, Fracture, PowerLaw};
use dfm_upscale::geometry::{Point2, Rect};
use dfm_upscale::random_field::{sample_tensor_field, Grid, SrfParams, TensorField};
use dfm_upscale::Tensor;

/// A small random block: tensor field plus a modest fracture network.
pub fn random_block(side: f64, seed: u64) -> (TensorField, Vec<Fracture>, Rect) {
    let rect = Rect::new(0.0, 0.0, side, side);
    let spec = DfnSpec {
        power_law: PowerLaw { alpha: 2.5, r_min: 0.1 * side, r_max: side },
        density: 2.0,
        ..DfnSpec::default()
    };
    let net = generate_dfn(&spec, rect, seed).unwrap();
    let grid = Grid::covering(&rect, 32).unwrap();
    let params = SrfParams { correlation_length: 0.15 * side, ..SrfParams::default() };
    let field = sample_tensor_field(&grid, &params, seed ^ 0x5eed).unwrap();
    (field, net.fractures, rect)
}

/// Horizontal stripes alternating `k1` and `k2`, starting with `k1` at the bottom.
pub fn layered(rect: Rect, layers: usize, k1: f64, k2: f64, rotate: bool) -> TensorField {
    let n = 256;
    let g = Grid::new(n, n, rect.width() / n as f64, Point2::new(rect.x0, rect.y0)).unwrap();
    TensorField::from_fn(g, |p| {
        let s = if rotate { (p.x - rect.x0) / rect.width() } else { (p.y - rect.y0) / rect.height() };
        let l = (s * layers as f64).floor() as usize;
        Tensor::isotropic(if l % 2 == 0 { k1 } else { k2 })
    })
}

pub fn uniform(rect: Rect, k: Tensor) -> TensorField {
    TensorField::uniform(Grid::covering(&rect, 8).unwrap(), k)
}

pub fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}
