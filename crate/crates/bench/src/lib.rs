//! Fixtures shared by the criterion benches in `benches/`.

use nanocnn::zoo::{self, Model};
use nanocnn::{Mode, Rng, Tensor};

pub const SEED: u64 = 42;

/// Standard-normal input of the given shape.
pub fn input(shape: &[usize]) -> Tensor<f32> {
    Rng::new(SEED).normal_tensor(shape, 1.0)
}

/// A named model whose batch-norm statistics have seen one train-mode batch,
/// so eval-mode timings run on realistic activations.
pub fn calibrated(name: &str, batch: usize) -> Model<f32> {
    let mut rng = Rng::new(SEED);
    let mut model = zoo::build_named::<f32>(name, &mut rng).expect("known model");
    let [c, h, w] = model.input_shape();
    let x = rng.normal_tensor(&[batch, c, h, w], 1.0);
    model.forward_logits(&x, Mode::Train).expect("calibration pass");
    model
}

/// A batch matching `model`'s input shape.
pub fn batch_for(model: &Model<f32>, batch: usize) -> Tensor<f32> {
    let [c, h, w] = model.input_shape();
    input(&[batch, c, h, w])
}
