//! Build the default synthetic world, print its class shares and render a
//! small dataset of ground/aerial pairs into a directory.
//!
//! `cargo run --release --example synthetic_world -- [out_dir] [n]`

use std::path::PathBuf;

use crossview::synth::{generate_dataset, World, WorldSpec, CLASS_NAMES};
use crossview::Point;

fn main() -> crossview::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = args.next().map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("crossview_world"));
    let n: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(48);

    let world = World::new(WorldSpec::default())?;
    let spec = world.spec();
    let mut counts = [0usize; 8];
    let steps = 100;
    for i in 0..steps {
        for j in 0..steps {
            let t = |k: usize| spec.margin() + (spec.extent - 2.0 * spec.margin()) * (k as f64 + 0.5) / steps as f64;
            counts[world.class_at(Point::new(t(j), t(i)))] += 1;
        }
    }
    for (name, c) in CLASS_NAMES.iter().zip(counts) {
        println!("{name:<9} {:5.1}%", 100.0 * c as f64 / (steps * steps) as f64);
    }

    let manifest = generate_dataset(&world, n, n / 8, n / 8, 64, &out)?;
    println!("{} pairs written under {}", manifest.len(), out.display());
    Ok(())
}
