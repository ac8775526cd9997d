//! Pretrain a small ground network and list the images that excite each
//! class coordinate of its embedding most.

use crossview::models::ArchSpec;
use crossview::synth::{generate_dataset, World, WorldSpec, CLASS_NAMES};
use crossview::trainer::{pretrain_ground, ImageTable, TrainConfig, View};
use crossview::viz::max_activation_report;

fn main() -> crossview::Result<()> {
    let dir = tempfile::tempdir().expect("temp dir");
    let world = World::new(WorldSpec::default())?;
    let manifest = generate_dataset(&world, 240, 30, 30, 32, dir.path())?;
    let arch = ArchSpec { input_side: 32, conv_blocks: vec![8, 16], fc_hidden: 32, feature_dim: 16, ..ArchSpec::default() }
        .with_classes(8);
    let (f_g, _) = pretrain_ground(&manifest, &arch, &TrainConfig { epochs: 4, eval_every: 20, ..TrainConfig::default() })?;

    let rows: Vec<usize> = (0..manifest.len()).collect();
    let ids: Vec<u64> = manifest.records().iter().map(|r| r.id).collect();
    let images = ImageTable::from_manifest(&manifest, &rows, View::Ground)?.all();
    let reports = max_activation_report(&f_g, &ids, &images, &(0..8).collect::<Vec<_>>(), 5)?;
    for r in &reports {
        let classes: Vec<&str> = r.top.iter().map(|(id, _)| CLASS_NAMES[manifest.records()[*id as usize].scene_class]).collect();
        println!("coordinate {} ({}): {:?}", r.coordinate, CLASS_NAMES[r.coordinate], classes);
    }
    Ok(())
}
