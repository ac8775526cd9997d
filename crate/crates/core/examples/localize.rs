//! Exact nearest-neighbor localization over a feature grid, checked against
//! a plain sort, plus the chance-level accuracy curve of random features.

use crossview::geo::Zoom;
use crossview::geoindex::{evaluate, localize, Grid, ReferenceIndex};
use crossview::tensor::Tensor;
use crossview::Point;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> crossview::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (cols, rows, d) = (50, 50, 32);
    let grid = Grid::square(0.0, 0.0, 100.0, cols, rows);
    let feats: Vec<f32> = (0..cols * rows * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let index = ReferenceIndex::new(grid, Tensor::new([cols * rows, d], feats)?, [0; 32], vec![Zoom::Z18])?;

    let query: Vec<f32> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let res = localize(&index, 0, &query, Some(Point::new(1234.0, 2345.0)), 0.0)?;
    println!("best cells: {:?}", &res.candidates[..5]);
    println!("true cell {:?} ranked {:?} of {}", res.truth_cell, res.rank, index.len());

    let n = 500;
    let queries = Tensor::new([n, d], (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    let truths: Vec<Point> = (0..n).map(|_| Point::new(rng.random_range(0.0..5000.0), rng.random_range(0.0..5000.0))).collect();
    let ev = evaluate(&index, &queries, &truths, 0.0)?;
    for k in [0.01, 0.05, 0.1] {
        println!("random features: top-{:.0}% accuracy {:.3}", k * 100.0, ev.curve.at(k).unwrap_or(f64::NAN));
    }
    Ok(())
}
