//! Distance heatmap, fine sliding-window heatmap and false-color map from an
//! untrained network, written as PPM files with georeference sidecars.
//!
//! `cargo run --release --example visualize -- [out_dir]`

use std::path::PathBuf;

use crossview::geoindex::{build_index, Grid};
use crossview::models::{ArchSpec, Mode, Network};
use crossview::synth::{render_ground, World, WorldSpec};
use crossview::viz::{distance_heatmap, falsecolor_map, fine_heatmap, CategoryGroups, FineHeatmapSpec};
use crossview::{Point, Zoom};

fn main() -> crossview::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("crossview_viz"));
    std::fs::create_dir_all(&out).expect("output dir");
    let world = World::new(WorldSpec::default())?;
    let arch = ArchSpec { input_side: 16, conv_blocks: vec![4, 8], fc_hidden: 16, feature_dim: 8, ..ArchSpec::default() }
        .with_classes(8);
    let mut net = Network::new(arch, 3)?;
    net.zoom = Some(Zoom::Z18);
    net.mode = Mode::Eval;

    let index = build_index(&net, &world, &Grid::covering(world.spec(), 24, 24))?;
    let here = Point::new(14_000.0, 22_000.0);
    let ground = render_ground(&world, here, 16).to_tensor().reshape([1, 3, 16, 16])?;
    let query = net.extract_ground(&ground)?;

    let heat = distance_heatmap(&index, query.row(0), Some(here), 4)?;
    heat.save(&out.join("heatmap.ppm"))?;
    let fine = fine_heatmap(&net, &world, &FineHeatmapSpec::new(here, 1600.0, 200.0), query.row(0))?;
    fine.save(&out.join("fine_heatmap.ppm"))?;
    let fc = falsecolor_map(&index, &CategoryGroups::default(), 4)?;
    fc.save(&out.join("falsecolor.ppm"))?;
    println!("wrote heatmap.ppm, fine_heatmap.ppm and falsecolor.ppm to {}", out.display());
    Ok(())
}
