//! Training losses on batches of learnt bases `[m, ...]`. Each returns the
//! value and its gradient with respect to the learnt batch.

use crate::nn::{Network, Taps, Tensor};
use crate::{Error, Result};

fn check_pair(learnt: &Tensor, targets: &Tensor) -> Result<()> {
    if learnt.shape != targets.shape {
        return Err(Error::DimensionMismatch(format!(
            "learnt {:?} vs targets {:?}",
            learnt.shape, targets.shape
        )));
    }
    Ok(())
}

/// Mean over clusters of the within-cluster mean squared distance to the
/// cluster mean. `n_clusters` counts empty clusters, which contribute zero.
pub fn loss_c(learnt: &Tensor, assignment: &[usize], n_clusters: usize) -> Result<(f64, Vec<f64>)> {
    let (m, d) = (learnt.batch(), learnt.sample_len());
    if assignment.len() != m || assignment.iter().any(|&a| a >= n_clusters) {
        return Err(Error::InvalidArgument("assignment does not cover the batch".into()));
    }
    let mut means = vec![vec![0.0; d]; n_clusters];
    let mut counts = vec![0usize; n_clusters];
    for (i, &a) in assignment.iter().enumerate() {
        counts[a] += 1;
        for (s, v) in means[a].iter_mut().zip(learnt.sample(i)) {
            *s += v;
        }
    }
    for (mean, &n) in means.iter_mut().zip(&counts) {
        if n > 0 {
            mean.iter_mut().for_each(|v| *v /= n as f64);
        }
    }
    let mut value = 0.0;
    let mut grad = vec![0.0; m * d];
    for (i, &a) in assignment.iter().enumerate() {
        let w = 1.0 / (n_clusters as f64 * counts[a] as f64);
        for ((g, y), mu) in grad[i * d..(i + 1) * d].iter_mut().zip(learnt.sample(i)).zip(&means[a]) {
            let r = y - mu;
            value += w * r * r;
            *g = 2.0 * w * r;
        }
    }
    Ok((value, grad))
}

/// Mean over samples of the squared distance to the targets.
pub fn loss_r(learnt: &Tensor, targets: &Tensor) -> Result<(f64, Vec<f64>)> {
    check_pair(learnt, targets)?;
    let m = learnt.batch().max(1) as f64;
    let mut value = 0.0;
    let grad = learnt
        .data
        .iter()
        .zip(&targets.data)
        .map(|(y, t)| {
            let r = y - t;
            value += r * r;
            2.0 * r / m
        })
        .collect();
    Ok((value / m, grad))
}

/// Tap activations of the frozen adversary for a batch.
pub fn adversary_taps(adversary: &Network, batch: &Tensor) -> Result<Taps> {
    if adversary.taps().is_empty() {
        return Err(Error::InvalidArgument("adversary has no taps".into()));
    }
    let mut net = adversary.clone();
    Ok(net.forward_until(batch, adversary.tap_depth())?.1)
}

/// Perceptual loss: mean over samples of the squared tap differences between
/// learnt and target bases. Only input gradients are taken through the
/// adversary, which must be frozen.
pub fn loss_a(adversary: &mut Network, learnt: &Tensor, target_taps: &Taps) -> Result<(f64, Vec<f64>)> {
    if adversary.taps().is_empty() {
        return Err(Error::InvalidArgument("adversary has no taps".into()));
    }
    if adversary.is_trainable() {
        return Err(Error::InvalidArgument("adversary must be frozen".into()));
    }
    let m = learnt.batch().max(1) as f64;
    let (_, taps) = adversary.forward_until(learnt, adversary.tap_depth())?;
    if taps.len() != target_taps.len() {
        return Err(Error::DimensionMismatch("target taps do not match the adversary".into()));
    }
    let mut value = 0.0;
    let mut tap_grads = Vec::with_capacity(taps.len());
    for ((name, y), (tname, t)) in taps.iter().zip(target_taps) {
        if name != tname || y.shape != t.shape {
            return Err(Error::DimensionMismatch(format!("tap `{name}` does not match target tap `{tname}`")));
        }
        let data = y
            .data
            .iter()
            .zip(&t.data)
            .map(|(a, b)| {
                let r = a - b;
                value += r * r;
                2.0 * r / m
            })
            .collect();
        tap_grads.push((name.clone(), Tensor::new(&y.shape, data)?));
    }
    let dx = adversary.backward_with_taps(None, &tap_grads)?;
    Ok((value / m, dx.data))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn c_of_identical_is_zero() {
        let y = Tensor::new(&[3, 2], vec![1.0, 2.0, 1.0, 2.0, 1.0, 2.0]).unwrap();
        let (v, g) = loss_c(&y, &[0, 0, 0], 2).unwrap();
        assert_eq!(v, 0.0);
        assert!(g.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn c_of_opposite_pair() {
        let y = Tensor::new(&[2, 3], vec![1.0, -2.0, 0.5, -1.0, 2.0, -0.5]).unwrap();
        let (v, _) = loss_c(&y, &[0, 0], 1).unwrap();
        assert!((v - 5.25).abs() < 1e-14);
    }

    #[test]
    fn r_of_unit_offset() {
        let y = Tensor::new(&[1, 3], vec![0.0, 1.0, 0.0]).unwrap();
        let t = Tensor::zeros(&[1, 3]);
        assert_eq!(loss_r(&y, &t).unwrap().0, 1.0);
        assert_eq!(loss_r(&t, &t).unwrap().0, 0.0);
    }
}
