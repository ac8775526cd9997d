//! Train a single-scale aerial network, then the three-zoom network that
//! starts from it, and compare their validation distances.

use crossview::models::{ArchSpec, Network};
use crossview::synth::{generate_dataset, World, WorldSpec};
use crossview::trainer::{precompute_targets, train_crossview_multi, train_crossview_single, TargetZoom, TrainConfig};

fn main() -> crossview::Result<()> {
    let dir = tempfile::tempdir().expect("temp dir");
    let world = World::new(WorldSpec::default().scale_ambiguous())?;
    let manifest = generate_dataset(&world, 160, 20, 20, 16, dir.path())?;

    // An untrained eval-mode network can serve as the frozen ground extractor.
    let arch = ArchSpec { input_side: 16, conv_blocks: vec![4, 8], fc_hidden: 16, feature_dim: 8, ..ArchSpec::default() }
        .with_classes(8);
    let mut f_g = Network::new(arch, 5)?;
    f_g.mode = crossview::models::Mode::Eval;
    let targets = precompute_targets(&f_g, &manifest)?;

    let cfg = TrainConfig { lr: 0.001, epochs: 3, eval_every: 10, ..TrainConfig::default() };
    let (single, log) = train_crossview_single(&manifest, &targets, &f_g, &cfg)?;
    println!("single-scale val distance {:.4}", log.best_metric());

    let multi_cfg = TrainConfig { target_zoom: TargetZoom::Multi, ..cfg };
    let (multi, log) = train_crossview_multi(&manifest, &targets, &single, &multi_cfg)?;
    println!("multi-scale val distance {:.4} over zooms {:?}", log.best_metric(), multi.zooms);
    Ok(())
}
