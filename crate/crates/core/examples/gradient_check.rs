//! Compares analytic gradients with central differences on a tiny network.

use crome::cnn::{init_weights, loss_and_grad, CnnSpec, Example, TrainedModel};
use crome::features::InputTensor;

fn main() -> crome::Result<()> {
    let spec = CnnSpec::new(4, 4, 2, 2);
    let weights = init_weights(&spec, 11);
    let model = TrainedModel::from_weights(spec, weights.clone(), 0.5)?;
    let mut input = InputTensor::zeros(4, 4, 2);
    for (i, v) in input.data.iter_mut().enumerate() {
        *v = ((i * 7) % 5) as f64 / 4.0;
    }
    let mut target = vec![0u8; 16];
    target[5] = 1;
    let batch = [Example { input, target }];
    let (loss, grad) = loss_and_grad(&model, &batch, 2.0)?;
    println!("{} parameters, loss {loss:.6}", grad.len());

    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for i in 0..weights.len() {
        let at = |d: f64| {
            let mut w = weights.clone();
            w[i] += d;
            let m = TrainedModel::from_weights(spec, w, 0.5).expect("same shape");
            loss_and_grad(&m, &batch, 2.0).expect("valid batch").0
        };
        let fd = (at(h) - at(-h)) / (2.0 * h);
        let rel = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-6);
        worst = worst.max(rel);
    }
    println!("max relative error {worst:.2e}");
    Ok(())
}
