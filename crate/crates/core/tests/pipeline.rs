use caphdr2ir::caption::{caption_input, dump_features};
use caphdr2ir::checkpoint::load_model;
use caphdr2ir::datasets::{generate_synthetic, load_split, synthetic_scene, Split};
use caphdr2ir::image_io::{
    read_pfm, read_png_ir, read_radiance_hdr, write_pfm, write_png, write_radiance_hdr, BitDepth,
};
use caphdr2ir::metrics::{evaluate_dirs, EvalOptions, LpipsBackend};
use caphdr2ir::trainer::fit;
use caphdr2ir::{CaptionSource, Error, HdrImage, Model, RunConfig, TonemapParams};

fn tiny() -> RunConfig {
    let mut c = RunConfig::default();
    c.channels = vec![4, 8, 8, 16];
    c.disc_channels = 4;
    c.train.epochs = 1;
    c.train.batch_size = 2;
    c.train.lr = 1e-3;
    c
}

#[test]
fn image_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (img, _) = synthetic_scene(32, 11).unwrap();

    let p = dir.path().join("a.pfm");
    write_pfm(&p, &img).unwrap();
    assert_eq!(read_pfm(&p).unwrap().data(), img.data());

    let r = dir.path().join("a.hdr");
    write_radiance_hdr(&r, &img).unwrap();
    let back = read_radiance_hdr(&r).unwrap();
    for (a, b) in img.pixels().zip(back.pixels()) {
        let peak = a[0].max(a[1]).max(a[2]);
        for k in 0..3 {
            assert!((a[k] - b[k]).abs() <= peak / 128.0);
        }
    }
}

#[test]
fn synthetic_generation_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let p = TonemapParams::default();
    for d in [&a, &b] {
        generate_synthetic(3, 32, 5, d.path(), Split::Test, &p).unwrap();
    }
    for sub in ["hdr/test_0002.hdr", "ir/test_0002.png", "meta.csv"] {
        assert_eq!(
            std::fs::read(a.path().join("test").join(sub)).unwrap(),
            std::fs::read(b.path().join("test").join(sub)).unwrap(),
            "{sub}"
        );
    }
}

#[test]
fn orphan_files_are_named() {
    let dir = tempfile::tempdir().unwrap();
    let spec = generate_synthetic(2, 32, 1, dir.path(), Split::Train, &TonemapParams::default()).unwrap();
    std::fs::remove_file(spec.dir().join("ir/train_0001.png")).unwrap();
    match load_split(&spec) {
        Err(Error::OrphanFile { id, kind }) => assert_eq!((id.as_str(), kind), ("train_0001", "hdr")),
        other => panic!("{other:?}"),
    }
}

#[test]
fn precomputed_features_match_the_standin() {
    let dir = tempfile::tempdir().unwrap();
    let (img, _) = synthetic_scene(32, 4).unwrap();
    let cfg = tiny();
    let standin = Model::new(&cfg).unwrap();
    let ex = standin.caption.as_ref().unwrap();
    let pyramid = ex.from_tensor(&caption_input(&img, cfg.caption_preprocess, &cfg.tonemap).unwrap());
    dump_features(&pyramid, dir.path(), "scene").unwrap();

    let mut pre = cfg.clone();
    pre.caption_kind = CaptionSource::Precomputed;
    pre.caption_features_dir = Some(dir.path().to_path_buf());
    let model = Model::new(&pre).unwrap();
    assert_eq!(
        model.infer(&img, "scene").unwrap(),
        standin.infer(&img, "scene").unwrap()
    );
    assert!(matches!(
        model.infer(&img, "other"),
        Err(Error::MissingFeatureLevel { .. } | Error::NotFound(_))
    ));
}

#[test]
fn checkpoint_reloads_the_trained_model() {
    let dir = tempfile::tempdir().unwrap();
    let spec = generate_synthetic(2, 32, 3, dir.path(), Split::Train, &TonemapParams::default()).unwrap();
    let samples = load_split(&spec).unwrap();
    let ckpt = fit(&tiny(), &samples, &dir.path().join("run")).unwrap();
    let model = load_model(&ckpt).unwrap();
    let fresh = Model::new(&tiny()).unwrap();
    let x = &samples[0].hdr;
    let trained = model.infer(x, &samples[0].id).unwrap();
    assert_ne!(trained, fresh.infer(x, &samples[0].id).unwrap());
    assert_eq!(trained, load_model(&ckpt).unwrap().infer(x, &samples[0].id).unwrap());
}

#[test]
fn evaluating_ground_truth_against_itself() {
    let dir = tempfile::tempdir().unwrap();
    let spec = generate_synthetic(2, 32, 8, dir.path(), Split::Test, &TonemapParams::default()).unwrap();
    let gt = spec.dir().join("ir");
    let opts = EvalOptions {
        lpips: Some(LpipsBackend::Proxy),
        ..Default::default()
    };
    let rep = evaluate_dirs(&gt, &gt, &opts).unwrap();
    assert!(rep.means.psnr_db.is_infinite());
    assert_eq!(rep.psnr_excluded, 2);
    assert!((rep.means.ssim - 1.0).abs() < 1e-12);
    assert_eq!(rep.means.mse, 0.0);
    assert!(rep.means.lpips.unwrap().abs() < 1e-9);
}

#[test]
fn sixteen_bit_predictions_survive_png() {
    let dir = tempfile::tempdir().unwrap();
    let ir = caphdr2ir::IrImage::new(4, 2, vec![0.0, 0.25, 0.5, 0.75, 1.0, 0.1, 0.2, 0.3]).unwrap();
    let p = dir.path().join("p.png");
    write_png(&p, &ir, BitDepth::Sixteen).unwrap();
    let back = read_png_ir(&p).unwrap();
    for (a, b) in ir.data().iter().zip(back.data()) {
        assert!((a - b).abs() <= 0.5 / 65535.0 + 1e-7);
    }
}

#[test]
fn odd_sizes_are_rejected_before_the_forward_pass() {
    let model = Model::new(&tiny()).unwrap();
    let img = HdrImage::new(24, 24, vec![1.0; 24 * 24 * 3]).unwrap();
    assert!(model.infer(&img, "odd").is_err());
}
