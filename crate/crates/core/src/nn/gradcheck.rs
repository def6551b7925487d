use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Parameterized;
use crate::Result;

pub const FD_STEP: f64 = 1e-5;
pub const MAX_CHECKED: usize = 200;

/// Compares reverse-mode gradients with central differences.
///
/// `eval` runs the forward pass, returns the loss and accumulates gradients
/// into the trainable parameters. Up to
/// [`MAX_CHECKED`] trainable entries are sampled; frozen parameters are never
/// exposed by [`Parameterized::params_mut`] and so are never checked.
/// Returns the largest `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn grad_check<P, F>(model: &mut P, mut eval: F, seed: u64) -> Result<f64>
where
    P: Parameterized,
    F: FnMut(&mut P) -> Result<f64>,
{
    model.zero_grad();
    eval(model)?;
    let analytic: Vec<Vec<f64>> = model
        .params_mut()
        .iter()
        .map(|p| p.grad.clone().unwrap_or_else(|| vec![0.0; p.len()]))
        .collect();
    let index: Vec<(usize, usize)> = analytic
        .iter()
        .enumerate()
        .flat_map(|(k, g)| (0..g.len()).map(move |j| (k, j)))
        .collect();
    if index.is_empty() {
        return Ok(0.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = sample(&mut rng, index.len(), MAX_CHECKED.min(index.len()));
    let mut worst: f64 = 0.0;
    for pick in picks.iter() {
        let (k, j) = index[pick];
        let original = model.params_mut()[k].data[j];
        model.params_mut()[k].data[j] = original + FD_STEP;
        let plus = eval(model)?;
        model.params_mut()[k].data[j] = original - FD_STEP;
        let minus = eval(model)?;
        model.params_mut()[k].data[j] = original;
        let numeric = (plus - minus) / (2.0 * FD_STEP);
        let a = analytic[k][j];
        let dev = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(dev);
    }
    model.zero_grad();
    Ok(worst)
}
