mod common;

use common::{random_block, uniform};
use dfm_upscale::frac_geom::Fracture;
use dfm_upscale::geometry::{Point2, Rect, Segment};
use dfm_upscale::rasterizer::{rasterize_block, read_sample, supercover, write_sample, CHANNELS};
use dfm_upscale::Tensor;
use proptest::prelude::*;

fn horizontal(y: f64, x0: f64, x1: f64, aperture: f64) -> Fracture {
    Fracture {
        id: 0,
        center: Point2::new((x0 + x1) / 2.0, y),
        length: x1 - x0,
        angle: 0.0,
        aperture,
        conductivity: 81.75 * (aperture / 0.01).powi(2),
    }
}

#[test]
fn uniform_field_without_fractures_is_constant() {
    let block = Rect::new(0.0, 0.0, 10.0, 10.0);
    let k = Tensor::new(2e-6, 1e-7, 1e-6);
    let s = rasterize_block(&uniform(block, k), &[], &block, 256).unwrap();
    assert_eq!(s.planes.len(), 256 * 256 * CHANNELS);
    for c in 0..3 {
        assert!(s.plane(c).iter().all(|&v| v == k.to_array()[c]));
    }
    assert!(s.plane(3).iter().all(|&v| v == 1.0));
}

#[test]
fn mid_height_fracture_fills_one_row() {
    let block = Rect::new(0.0, 0.0, 10.0, 10.0);
    let r = 16;
    let f = horizontal(5.0, -1.0, 11.0, 1e-3);
    let s = rasterize_block(&uniform(block, Tensor::isotropic(1e-6)), &[f], &block, r).unwrap();
    for j in 0..r {
        for i in 0..r {
            let frac = !s.is_matrix(i, j);
            assert_eq!(frac, j == r / 2, "pixel ({i},{j})");
            if frac {
                assert_eq!(s.get(0, i, j), f.conductivity);
                assert_eq!(s.get(1, i, j), 0.0);
                assert_eq!(s.get(2, i, j), f.conductivity);
                assert_eq!(s.get(3, i, j), f.aperture);
            }
        }
    }
}

#[test]
fn wider_aperture_wins_on_overlap() {
    let block = Rect::new(0.0, 0.0, 8.0, 8.0);
    let thin = horizontal(3.5, 0.0, 8.0, 1e-4);
    let wide = Fracture { angle: std::f64::consts::FRAC_PI_2, center: Point2::new(4.5, 4.0), ..horizontal(0.0, 0.0, 8.0, 1e-3) };
    for order in [[thin, wide], [wide, thin]] {
        let s = rasterize_block(&uniform(block, Tensor::isotropic(1e-6)), &order, &block, 8).unwrap();
        assert_eq!(s.get(3, 4, 3), 1e-3);
        assert_eq!(s.get(3, 0, 3), 1e-4);
    }
}

#[test]
fn fractures_outside_the_block_are_ignored() {
    let block = Rect::new(0.0, 0.0, 8.0, 8.0);
    let f = horizontal(20.0, 0.0, 8.0, 1e-3);
    let s = rasterize_block(&uniform(block, Tensor::isotropic(1e-6)), &[f], &block, 8).unwrap();
    assert!(s.plane(3).iter().all(|&v| v == 1.0));
}

#[test]
fn rerasterizing_a_raster_preserves_matrix_pixels() {
    let (field, fr, block) = random_block(10.0, 4);
    let a = rasterize_block(&field, &fr, &block, 32).unwrap();
    let b = rasterize_block(&a.tensor_field(&block).unwrap(), &[], &block, 32).unwrap();
    for j in 0..32 {
        for i in 0..32 {
            if a.is_matrix(i, j) {
                for c in 0..3 {
                    assert_eq!(a.get(c, i, j), b.get(c, i, j));
                }
            }
        }
    }
}

#[test]
fn rasterization_is_deterministic_and_round_trips_through_bytes() {
    let (field, fr, block) = random_block(10.0, 9);
    let mut a = rasterize_block(&field, &fr, &block, 24).unwrap();
    let b = rasterize_block(&field, &fr, &block, 24).unwrap();
    assert_eq!(a, b);
    a.target = Some([1.5e-6, -2e-8, 3e-7]);
    a.meta.lambda = 10.0;
    let mut bytes = Vec::new();
    write_sample(&a, &mut bytes).unwrap();
    let back = read_sample(std::io::Cursor::new(bytes), 24).unwrap();
    assert_eq!(back.meta, a.meta);
    for (x, y) in back.planes.iter().zip(&a.planes) {
        assert_eq!(*x, *y as f32 as f64);
    }
}

proptest! {
    #[test]
    fn supercover_count_is_bounded(ax in 0.0f64..32.0, ay in 0.0f64..32.0, bx in 0.0f64..32.0, by in 0.0f64..32.0) {
        let s = Segment::new(Point2::new(ax, ay), Point2::new(bx, by));
        let l = s.length();
        let n = supercover(&s, 32).len() as f64;
        prop_assert!(n >= l && n <= 2.0 * l + 2.0, "{} pixels for length {}", n, l);
    }
}
