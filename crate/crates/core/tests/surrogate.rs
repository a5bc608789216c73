use dfm_upscale::dataset::{
    generate_dataset, preprocess, standardize_target, ComponentStats, DatasetConfig, DatasetReader, PreprocessStats,
    TensorSet,
};
use dfm_upscale::dfm_solver::SolverOptions;
use dfm_upscale::homogenizer::BlockBackend;
use dfm_upscale::rasterizer::{RasterSample, SampleMeta};
use dfm_upscale::surrogate::{
    gradient_check, mse_loss, read_history, write_history, Architecture, Network, RasterInput, Surrogate,
    SurrogateBackend, TrainConfig,
};
use dfm_upscale::{Error, SurrogateModel};

mod common;

fn stats() -> PreprocessStats {
    PreprocessStats {
        input: ComponentStats { mean: [-0.1, 0.002, 0.05], std: [0.6, 0.04, 0.7] },
        output: ComponentStats { mean: [0.2, -0.01, 0.3], std: [0.5, 0.02, 0.4] },
    }
}

fn noise(n: usize, seed: u64) -> Vec<f64> {
    use rand::Rng;
    let mut rng = dfm_upscale::rng::substream(seed, "test.noise", 0);
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn raw_raster(r: usize, seed: u64) -> RasterSample {
    let n = r * r;
    let z = noise(3 * n, seed);
    let mut planes = vec![1.0; 4 * n];
    for p in 0..n {
        planes[p] = 1e-7 * (0.5 * z[p]).exp();
        planes[2 * n + p] = 2e-7 * (0.5 * z[2 * n + p]).exp();
        planes[n + p] = 1e-9 * z[n + p];
    }
    planes[3 * n + 5] = 1e-4;
    planes[5] = 8e-3;
    planes[2 * n + 5] = 8e-3;
    planes[n + 5] = 0.0;
    RasterSample { r, planes, target: Some([1.3e-7, 2e-9, 2.4e-7]), meta: SampleMeta::default() }
}

#[test]
fn full_layout_reproduces_layer_shapes_on_a_real_pass() {
    let arch = Architecture::full(256).unwrap();
    let net = Network::<f32>::new(&arch, 1).unwrap();
    let x = vec![0.0f32; arch.input_len()];
    let (out, trace) = net.forward_traced(&x, 1).unwrap();
    let sides: Vec<usize> = trace[..5].iter().map(|t| t.shape[2]).collect();
    assert_eq!(sides, vec![127, 62, 30, 14, 6]);
    assert_eq!(trace[5].name, "flatten");
    assert_eq!(trace[5].shape, vec![1, 9216]);
    let widths: Vec<usize> = trace[6..].iter().map(|t| t.shape[1]).collect();
    assert_eq!(widths, vec![2048, 2048, 1024, 3]);
    assert_eq!(out, vec![0.0; 3]);
}

#[test]
fn zero_input_gives_zero_output_in_both_modes() {
    let arch = Architecture::new(20, &[3, 4], &[6, 5]).unwrap();
    let net = Network::<f64>::new(&arch, 9).unwrap();
    let x = vec![0.0; 2 * arch.input_len()];
    assert_eq!(net.forward(&x, 2).unwrap(), vec![0.0; 6]);
    let cache = net.forward_train(&x, 2).unwrap();
    assert_eq!(cache.output, vec![0.0; 6]);
    let (loss, grads, _) = net.loss_and_gradients(&x, &[0.0; 6], 2).unwrap();
    assert_eq!(loss, 0.0);
    assert!(grads.tensors.iter().flatten().all(|&g| g == 0.0));
}

#[test]
fn identical_inputs_give_identical_rows() {
    let arch = Architecture::new(20, &[3, 4], &[6]).unwrap();
    let net = Network::<f32>::new(&arch, 2).unwrap();
    let one: Vec<f32> = noise(arch.input_len(), 4).into_iter().map(|v| v as f32).collect();
    let two: Vec<f32> = one.iter().chain(&one).copied().collect();
    let out = net.forward(&two, 2).unwrap();
    assert_eq!(out[..3], out[3..]);
    assert_eq!(net.forward(&one, 1).unwrap(), out[..3]);
}

#[test]
fn shape_errors_name_the_layer() {
    let arch = Architecture::new(20, &[3], &[4]).unwrap();
    let net = Network::<f64>::new(&arch, 2).unwrap();
    match net.forward(&[0.0; 10], 1) {
        Err(Error::Shape { layer, .. }) => assert_eq!(layer, "input"),
        other => panic!("unexpected {other:?}"),
    }
    let x = vec![0.0; arch.input_len()];
    match net.loss_and_gradients(&x, &[0.0; 2], 1) {
        Err(Error::Shape { layer, .. }) => assert_eq!(layer, "output"),
        other => panic!("unexpected {other:?}"),
    }
}

fn check_gradients(side: usize, channels: &[usize]) {
    let arch = Architecture::new(side, channels, &[8, 8, 8]).unwrap();
    let net = Network::<f64>::new(&arch, 17).unwrap();
    let batch = 3;
    let x = noise(batch * arch.input_len(), 5);
    let t = noise(batch * 3, 6);
    let report = gradient_check(&net, &x, &t, batch, 1e-3).unwrap();
    assert_eq!(report.len(), net.params().len());
    for c in report {
        assert!(c.rel_error < 1e-4, "{}: relative error {:e}", c.name, c.rel_error);
    }
}

#[test]
fn gradients_match_central_differences_on_shallow_net() {
    check_gradients(16, &[2, 3]);
}

#[test]
fn gradients_match_central_differences_at_full_depth() {
    check_gradients(94, &[2, 3, 4, 5, 6]);
}

#[test]
fn batch_norm_normalizes_each_channel() {
    let arch = Architecture::new(24, &[5, 3], &[4]).unwrap();
    let net = Network::<f64>::new(&arch, 3).unwrap();
    let batch = 4;
    let x: Vec<f64> = noise(batch * arch.input_len(), 8).iter().map(|v| 3.0 * v + 0.7).collect();
    let cache = net.forward_train(&x, batch).unwrap();
    for (s, sc) in net.stages.iter().zip(&cache.stages) {
        let plane = s.conv_side() * s.conv_side();
        for c in 0..s.out_channels {
            let vals: Vec<f64> =
                (0..batch).flat_map(|b| sc.xhat[(b * s.out_channels + c) * plane..][..plane].to_vec()).collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-6, "mean {m}");
            assert!((v - 1.0).abs() < 1e-4, "variance {v}");
        }
    }
}

#[test]
fn doubling_residuals_quadruples_loss() {
    let pred = [0.3, -0.2, 0.5, 1.0, 0.0, -1.0];
    let t = [0.1, 0.1, 0.1, 0.2, 0.2, 0.2];
    let t2: Vec<f64> = pred.iter().zip(&t).map(|(p, t)| p - 2.0 * (p - t)).collect();
    let (a, _) = mse_loss(&pred, &t, 2);
    let (b, _) = mse_loss(&pred, &t2, 2);
    assert!((b - 4.0 * a).abs() < 1e-14);
}

#[test]
fn raw_and_preprocessed_inputs_share_one_path() {
    let arch = Architecture::new(16, &[3, 4], &[6]).unwrap();
    let model = Surrogate::<f64>::new(&arch, stats(), 1).unwrap();
    let raw = raw_raster(16, 3);
    let pre = preprocess(&raw, &stats()).unwrap();
    let a = model.predict_tensor(RasterInput::Raw(&raw), &stats()).unwrap();
    let b = model.predict_tensor(RasterInput::Preprocessed(&pre), &stats()).unwrap();
    for (x, y) in a.k.to_array().iter().zip(b.k.to_array()) {
        assert!((x - y).abs() <= 1e-12 * x.abs().max(1e-300));
    }
}

#[test]
fn prediction_is_denormalized_and_flags_non_spd() {
    let arch = Architecture::new(16, &[3, 4], &[6]).unwrap();
    let mut model = Surrogate::<f64>::new(&arch, stats(), 1).unwrap();
    let raw = raw_raster(16, 3);
    let pre = preprocess(&raw, &stats()).unwrap();
    let out = model.network.dense.last_mut().unwrap();
    out.weight.iter_mut().for_each(|w| *w = 0.0);
    let z = standardize_target(raw.target.unwrap(), pre.xm, &stats()).unwrap();
    out.bias.copy_from_slice(&z);
    let t = model.predict_tensor(RasterInput::Raw(&raw), &stats()).unwrap();
    for (p, q) in t.k.to_array().iter().zip(raw.target.unwrap()) {
        assert!((p - q).abs() <= 1e-10 * q.abs());
    }
    assert!(t.positive_definite);
    let out = model.network.dense.last_mut().unwrap();
    out.bias[1] = 400.0;
    let t = model.predict_tensor(RasterInput::Raw(&raw), &stats()).unwrap();
    assert!(!t.positive_definite);
}

#[test]
fn mismatched_statistics_are_rejected() {
    let arch = Architecture::new(16, &[3], &[4]).unwrap();
    let model = Surrogate::<f32>::new(&arch, stats(), 1).unwrap();
    let mut other = stats();
    other.output.std[0] = 0.51;
    let raw = raw_raster(16, 3);
    assert!(matches!(model.predict_tensor(RasterInput::Raw(&raw), &other), Err(Error::StatsMismatch { .. })));
}

fn small_sets(dir: &std::path::Path) -> (TensorSet, TensorSet, TensorSet, PreprocessStats) {
    let cfg = DatasetConfig { n_samples: 40, raster: 16, solver_resolution: 12, ..DatasetConfig::default() };
    let m = generate_dataset(&cfg, 21, dir, &SolverOptions::default()).unwrap();
    let reader = DatasetReader::open(dir).unwrap();
    let load = |idx: &[usize]| TensorSet::load(&reader, idx, &m.stats).unwrap();
    (load(&m.split.train), load(&m.split.val), load(&m.split.test), m.stats)
}

#[test]
fn training_keeps_best_checkpoint_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (train, val, test, st) = small_sets(dir.path());
    let arch = Architecture::new(16, &[4, 6], &[16]).unwrap();
    let cfg = TrainConfig { epochs: 6, batch_size: 8, lr: 0.01, ..TrainConfig::default() };
    let run = || {
        let mut model = SurrogateModel::new(&arch, st.clone(), 5).unwrap();
        let report = model.train(&train, &val, &cfg, 11, |_| {}).unwrap();
        (model, report)
    };
    let (model, report) = run();
    let (again, report2) = run();
    assert_eq!(report, report2);
    assert_eq!(model, again);
    assert_eq!(report.history.len(), 6);
    let min = report.history.iter().map(|r| r.val_loss).fold(f64::INFINITY, f64::min);
    assert_eq!(report.best_val_loss, min);
    assert_eq!(model.loss(&val).unwrap(), min);
    assert_eq!(model.state.best_val_loss, Some(min));

    let ckpt = dir.path().join("ckpt");
    model.save(&ckpt).unwrap();
    let loaded = SurrogateModel::load(&ckpt).unwrap();
    assert_eq!(loaded, model);
    assert_eq!(loaded.evaluate(&test).unwrap(), model.evaluate(&test).unwrap());

    let mut buf = Vec::new();
    write_history(&report.history, &mut buf).unwrap();
    assert!(String::from_utf8_lossy(&buf).starts_with("epoch,train_loss,val_loss,lr\n"));
    assert_eq!(read_history(&buf[..]).unwrap(), report.history);
}

#[test]
fn empty_training_split_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let (_, val, _, st) = small_sets(dir.path());
    let empty = TensorSet { r: 16, inputs: vec![], targets: vec![], raw_targets: vec![], xm: vec![] };
    let arch = Architecture::new(16, &[2], &[4]).unwrap();
    let mut model = SurrogateModel::new(&arch, st, 5).unwrap();
    let err = model.train(&empty, &val, &TrainConfig::default(), 1, |_| {}).unwrap_err();
    assert!(matches!(err, Error::EmptySplit("train")));
}

#[test]
fn corrupted_weights_are_detected() {
    let dir = tempfile::tempdir().unwrap();
    let arch = Architecture::new(16, &[2], &[4]).unwrap();
    let model = SurrogateModel::new(&arch, stats(), 5).unwrap();
    model.save(dir.path()).unwrap();
    let path = dir.path().join("weights.bin");
    let mut bytes = std::fs::read(&path).unwrap();
    bytes[0] ^= 1;
    std::fs::write(&path, bytes).unwrap();
    assert!(matches!(SurrogateModel::load(dir.path()), Err(Error::Corrupt { .. })));
}

#[test]
fn backend_rasterizes_at_the_model_resolution() {
    let (field, fractures, rect) = common::random_block(10.0, 4);
    let arch = Architecture::new(16, &[2], &[4]).unwrap();
    let backend = SurrogateBackend { model: SurrogateModel::new(&arch, stats(), 5).unwrap() };
    let t = backend.block_tensor(&field, &fractures, rect).unwrap();
    assert!(t.k.xx > 0.0 && t.k.yy > 0.0);
    assert_eq!(backend.name(), "surrogate");
}
