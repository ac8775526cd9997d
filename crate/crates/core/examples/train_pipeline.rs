//! End to end at toy scale: generate data, pretrain the ground network,
//! train the aerial network against it, index the world and evaluate.

use crossview::geoindex::{build_index, evaluate, Grid};
use crossview::models::ArchSpec;
use crossview::synth::{generate_dataset, Split, World, WorldSpec};
use crossview::trainer::{precompute_targets, pretrain_ground, train_crossview_single, ImageTable, TrainConfig, View};
use crossview::Point;

fn main() -> crossview::Result<()> {
    let dir = tempfile::tempdir().expect("temp dir");
    let world = World::new(WorldSpec::default())?;
    let manifest = generate_dataset(&world, 240, 30, 30, 32, dir.path())?;

    let arch = ArchSpec { input_side: 32, conv_blocks: vec![8, 16], fc_hidden: 32, feature_dim: 16, ..ArchSpec::default() }
        .with_classes(8);
    let pre = TrainConfig { epochs: 4, eval_every: 20, ..TrainConfig::default() };
    let (f_g, log) = pretrain_ground(&manifest, &arch, &pre)?;
    println!("ground val accuracy {:.3}", log.val_accuracy.unwrap_or(0.0));

    let targets = precompute_targets(&f_g, &manifest)?;
    let cross = TrainConfig { lr: 0.001, epochs: 4, eval_every: 20, ..TrainConfig::default() };
    let (f_a, log) = train_crossview_single(&manifest, &targets, &f_g, &cross)?;
    println!("val distance {:.3} -> {:.3}", log.initial_metric(), log.best_metric());

    let index = build_index(&f_a, &world, &Grid::covering(world.spec(), 20, 20))?;
    let test = manifest.split_indices(Split::Test);
    let queries = f_g.extract_ground(&ImageTable::from_manifest(&manifest, &test, View::Ground)?.all())?;
    let truths: Vec<Point> = test.iter().map(|&i| manifest.records()[i].location).collect();
    let ev = evaluate(&index, &queries, &truths, 0.0)?;
    println!("{}", ev.summary.to_json());
    Ok(())
}
