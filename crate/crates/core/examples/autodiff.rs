//! Fit a one-layer regression with the reverse-mode tape and SGD, then
//! check the gradients of a small convolutional network.

use crossview::models::{check_network, ArchSpec};
use crossview::tensor::{GradCheckOptions, Graph, ParamStore, Sgd, Tensor};

fn main() -> crossview::Result<()> {
    // y = 2 x0 - x1 + 0.5
    let xs: Vec<f32> = (0..64).flat_map(|i| [(i % 8) as f32 / 8.0, (i / 8) as f32 / 8.0]).collect();
    let ys: Vec<f32> = xs.chunks(2).map(|p| 2.0 * p[0] - p[1] + 0.5).collect();
    let x = Tensor::new([64, 2], xs)?;
    let y = Tensor::new([64, 1], ys)?;

    let mut params = ParamStore::new(0);
    params.insert("w", Tensor::zeros([2, 1]))?;
    params.insert("b", Tensor::zeros([1]))?;
    let mut opt = Sgd::new(0.5, 0.9)?;
    for step in 0..300 {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let w = g.param("w", params.get("w")?.clone());
        let b = g.param("b", params.get("b")?.clone());
        let out = g.fully_connected(xv, w, b)?;
        let t = g.constant(y.clone());
        let loss = g.euclidean_loss(out, t)?;
        g.backward(loss)?;
        opt.step(&mut params, &g.param_grads())?;
        if step % 100 == 0 {
            println!("step {step:>3} loss {:.6}", g.value(loss).item());
        }
    }
    println!("w = {:?}, b = {:?}", params.get("w")?.data(), params.get("b")?.data());

    let spec = ArchSpec { input_side: 16, conv_blocks: vec![4, 8], fc_hidden: 16, feature_dim: 8, ..ArchSpec::default() };
    let report = check_network(&spec, 2, 3, &GradCheckOptions::default())?;
    println!("conv net gradient check: max relative error {:.2e}, pass = {}", report.max_rel_error(), report.pass());
    Ok(())
}
