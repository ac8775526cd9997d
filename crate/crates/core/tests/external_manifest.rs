//! A hand-written two-record manifest with its own images runs through
//! every training stage.

use std::fs;
use std::path::Path;

use crossview::image::RgbImage;
use crossview::models::{ArchSpec, Mode, Network};
use crossview::synth::{LoadOptions, Manifest};
use crossview::trainer::{
    precompute_targets, pretrain_ground, train_crossview_multi, train_crossview_single, FeatureTable, TargetZoom,
    TrainConfig,
};
use crossview::Error;

const SIDE: usize = 16;

fn solid(rgb: [u8; 3], stripe: bool) -> RgbImage {
    let mut img = RgbImage::new(SIDE, SIDE);
    for y in 0..SIDE {
        for x in 0..SIDE {
            let px = if stripe && x % 4 == 0 { [255, 255, 255] } else { rgb };
            img.put(x, y, px);
        }
    }
    img
}

fn write_fixture(dir: &Path) {
    for sub in ["g", "a18", "a16", "a14"] {
        fs::create_dir_all(dir.join(sub)).unwrap();
    }
    for (name, rgb, stripe) in [("lake", [20, 60, 200], false), ("town", [180, 170, 160], true)] {
        solid(rgb, stripe).save_ppm(&dir.join("g").join(format!("{name}.ppm"))).unwrap();
        for (sub, shade) in [("a18", 0), ("a16", 20), ("a14", 40)] {
            let tinted = rgb.map(|c| c.saturating_sub(shade));
            solid(tinted, stripe).save_ppm(&dir.join(sub).join(format!("{name}.ppm"))).unwrap();
        }
    }
    fs::write(
        dir.join("pairs.csv"),
        "id,x,y,class,split,ground,aerial_z18,aerial_z16,aerial_z14\n\
         10,500.00,700.00,0,train,g/lake.ppm,a18/lake.ppm,a16/lake.ppm,a14/lake.ppm\n\
         11,900.00,100.00,6,train,g/town.ppm,a18/town.ppm,a16/town.ppm,a14/town.ppm\n",
    )
    .unwrap();
}

#[test]
fn two_record_manifest_trains_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture(dir.path());
    let manifest = Manifest::load(&dir.path().join("pairs.csv")).unwrap();
    assert_eq!(manifest.len(), 2);
    assert_eq!(manifest.side(), SIDE);

    let arch = ArchSpec { input_side: SIDE, conv_blocks: vec![4, 8], fc_hidden: 16, feature_dim: 8, ..ArchSpec::default() }
        .with_classes(8);
    // No validation split: the train records double as the holdout.
    let cfg = TrainConfig { batch_size: 2, epochs: 30, eval_every: 10, lr: 0.01, ..TrainConfig::default() };
    let (f_g, log) = pretrain_ground(&manifest, &arch, &cfg).unwrap();
    assert_eq!(f_g.mode, Mode::Eval);
    assert_eq!(log.val_accuracy, Some(1.0));

    let targets = precompute_targets(&f_g, &manifest).unwrap();
    assert_eq!(targets.ids, vec![10, 11]);
    let path = dir.path().join("t.cvft");
    targets.save(&path).unwrap();
    assert_eq!(FeatureTable::load(&path).unwrap(), targets);

    let cross = TrainConfig { lr: 0.001, epochs: 10, ..cfg.clone() };
    let (f_a, log) = train_crossview_single(&manifest, &targets, &f_g, &cross).unwrap();
    assert!(log.best_metric() <= log.initial_metric());
    let ckpt = dir.path().join("a.cvwt");
    f_a.save(&ckpt).unwrap();
    assert_eq!(Network::load(&ckpt).unwrap().params, f_a.params);

    let multi = TrainConfig { epochs: 2, target_zoom: TargetZoom::Multi, ..cross };
    let (net, log) = train_crossview_multi(&manifest, &targets, &f_a, &multi).unwrap();
    assert!(log.best_metric().is_finite());
    assert_eq!(net.mode, Mode::Eval);
}

#[test]
fn blocklist_and_asset_errors() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture(dir.path());
    let csv = dir.path().join("pairs.csv");
    let opts = LoadOptions { class_blocklist: vec![6], ..LoadOptions::default() };
    assert_eq!(Manifest::load_with(&csv, &opts).unwrap().len(), 1);

    let wrong = LoadOptions { expected_side: Some(32), ..LoadOptions::default() };
    assert!(matches!(Manifest::load_with(&csv, &wrong), Err(Error::ImageSide { .. })));

    fs::remove_file(dir.path().join("a16").join("town.ppm")).unwrap();
    let err = Manifest::load(&csv).unwrap_err();
    assert!(matches!(err, Error::MissingAsset(ref p) if p.ends_with("a16/town.ppm")), "{err}");
    assert!(err.is_data_error());
}
