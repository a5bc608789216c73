use dfm_upscale::bench::{
    bench_anisotropy, bench_aquifer, bench_speedup, block_size_for, compare_anisotropy, compare_aquifer,
    draw_macro_sample, MacroSample, SweepParam,
};
use dfm_upscale::config::RunConfig;
use dfm_upscale::dataset::{ComponentStats, PreprocessStats};
use dfm_upscale::frac_geom::PowerLaw;
use dfm_upscale::homogenizer::NumericBackend;
use dfm_upscale::random_field::{Grid, TensorField};
use dfm_upscale::{SurrogateModel, Tensor};

fn small_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.blocks.domain = 20.0;
    cfg.blocks.block = 10.0;
    cfg.blocks.coarse = 16;
    cfg.solver.resolution = 12;
    cfg.raster.size = 16;
    cfg.dfn.power_law = PowerLaw { alpha: 2.5, r_min: 2.0, r_max: 20.0 };
    cfg.dfn.density = 3.0;
    cfg.train.channels = vec![2, 3];
    cfg.train.dense = vec![8];
    cfg.validate().unwrap();
    cfg
}

fn numeric(cfg: &RunConfig) -> NumericBackend {
    NumericBackend { resolution: cfg.solver.resolution, solver: cfg.solver.options }
}

#[test]
fn identical_backends_agree_exactly() {
    let cfg = small_config();
    let b = numeric(&cfg);
    let aq = bench_aquifer(&cfg, 3, &b, &b).unwrap();
    assert_eq!(aq.r2, Some(1.0));
    assert_eq!(aq.nrmse, Some(0.0));
    assert!(aq.rows.iter().all(|r| r.y[0] == r.y[1] && r.y[0] > 0.0));
    assert_eq!(aq.config_hash, cfg.hash());

    let an = bench_anisotropy(&cfg, 3, &b, &b).unwrap();
    assert_eq!(an.metrics.unwrap().r2, [1.0; 3]);
    assert!(bench_aquifer(&cfg, 1, &b, &b).is_err());
}

#[test]
fn uniform_sample_is_backend_independent() {
    let cfg = small_config();
    let grid = cfg.block_grid().unwrap();
    let k = Tensor::new(3e-7, 5e-8, 1e-7);
    let field = TensorField::uniform(Grid::covering(&grid.extended, 48).unwrap(), k);
    let samples = vec![MacroSample { field, fractures: vec![], grid }];
    let coarse = NumericBackend { resolution: 6, ..numeric(&cfg) };
    let fine = numeric(&cfg);

    let aq = compare_aquifer(&cfg, &samples, &coarse, &fine).unwrap();
    let [ya, yb] = aq.rows[0].y;
    assert!((ya - yb).abs() <= 1e-8 * ya.abs(), "{ya} {yb}");
    assert!(aq.r2.is_none());

    let an = compare_anisotropy(&cfg, &samples, &coarse, &fine).unwrap();
    let [ka, kb] = an.rows[0].k;
    for c in 0..3 {
        assert!((ka[c] - kb[c]).abs() <= 1e-8 * k.xx, "{ka:?} {kb:?}");
        assert!((ka[c] - k.to_array()[c]).abs() <= 1e-8 * k.xx);
    }
}

#[test]
fn macro_samples_are_reproducible() {
    let cfg = small_config();
    let grid = cfg.block_grid().unwrap();
    let a = draw_macro_sample(&cfg, &grid, 2).unwrap();
    let b = draw_macro_sample(&cfg, &grid, 2).unwrap();
    let c = draw_macro_sample(&cfg, &grid, 3).unwrap();
    assert_eq!(a.field, b.field);
    assert_eq!(a.fractures, b.fractures);
    assert_ne!(a.field, c.field);
    assert_eq!(a.field.grid.nx, 3 * cfg.raster.size);
}

#[test]
fn block_counts_map_to_block_sizes() {
    assert_eq!(block_size_for(100.0, 25).unwrap(), 50.0);
    assert!((block_size_for(100.0, 1369).unwrap() - 200.0 / 36.0).abs() < 1e-12);
    assert!(block_size_for(100.0, 24).is_err());
    assert!(block_size_for(100.0, 1).is_err());
}

#[test]
fn speedup_report_accounts_both_pathways() {
    let cfg = small_config();
    let stats = PreprocessStats {
        input: ComponentStats { mean: [-15.0, 0.0, -15.0], std: [1.0, 0.1, 1.0] },
        output: ComponentStats { mean: [0.0; 3], std: [1.0; 3] },
    };
    let model = SurrogateModel::new(&cfg.architecture().unwrap(), stats, 5).unwrap();
    let rep = bench_speedup(&cfg, &model, 9, 1).unwrap();
    assert_eq!(rep.blocks, 9);
    assert_eq!(rep.block_size, 20.0);
    assert!(rep.c_h > 0.0 && rep.c_s > 0.0);
    assert!((rep.c_s - rep.rasterization - rep.inference).abs() < 1e-12);
    assert!(rep.rasterization_share > 0.0 && rep.rasterization_share < 1.0);
    assert_eq!(rep.reference_full_scale.len(), 2);
}

#[test]
fn sweep_parameter_names() {
    assert_eq!(SweepParam::parse("rho").unwrap(), SweepParam::Rho);
    assert_eq!(SweepParam::parse("lambda").unwrap(), SweepParam::Lambda);
    assert!(SweepParam::parse("alpha").is_err());
}
