#![allow(dead_code)]

use mscluster::fem::Solution;
use mscluster::field::PermeabilityField;
use mscluster::nn::{Layer, Network, Tensor};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const GAUSS: [f64; 2] = [0.211_324_865_405_187_1, 0.788_675_134_594_812_9];

/// Bilinear shape functions on the reference cell, nodes (0,0),(1,0),(0,1),(1,1).
pub fn shape(s: f64, t: f64) -> [f64; 4] {
    [(1.0 - s) * (1.0 - t), s * (1.0 - t), (1.0 - s) * t, s * t]
}

pub fn shape_grad(s: f64, t: f64) -> [(f64, f64); 4] {
    [(-(1.0 - t), -(1.0 - s)), (1.0 - t, -s), (-t, 1.0 - s), (t, s)]
}

pub fn cell_nodes(n: usize, i: usize, j: usize) -> [usize; 4] {
    let w = n + 1;
    [j * w + i, j * w + i + 1, (j + 1) * w + i, (j + 1) * w + i + 1]
}

/// Dense stiffness and load by tensor Gauss quadrature; Dirichlet rows
/// replaced by identity.
pub fn dense_system(n: usize, kappa: &[f64], f: impl Fn(f64, f64) -> f64) -> (DMatrix<f64>, DVector<f64>) {
    let h = 1.0 / n as f64;
    let nn = (n + 1) * (n + 1);
    let mut a = DMatrix::zeros(nn, nn);
    let mut b = DVector::zeros(nn);
    for j in 0..n {
        for i in 0..n {
            let dofs = cell_nodes(n, i, j);
            for &s in &GAUSS {
                for &t in &GAUSS {
                    let w = 0.25 * h * h;
                    let g = shape_grad(s, t);
                    let phi = shape(s, t);
                    let fx = f((i as f64 + s) * h, (j as f64 + t) * h);
                    for p in 0..4 {
                        b[dofs[p]] += w * fx * phi[p];
                        for q in 0..4 {
                            a[(dofs[p], dofs[q])] += w * kappa[j * n + i] * (g[p].0 * g[q].0 + g[p].1 * g[q].1) / (h * h);
                        }
                    }
                }
            }
        }
    }
    for k in 0..nn {
        let (x, y) = (k % (n + 1), k / (n + 1));
        if x == 0 || y == 0 || x == n || y == n {
            a.row_mut(k).fill(0.0);
            a.column_mut(k).fill(0.0);
            a[(k, k)] = 1.0;
            b[k] = 0.0;
        }
    }
    (a, b)
}

pub fn field(n: usize, values: Vec<f64>) -> PermeabilityField {
    let mut f = PermeabilityField::uniform(n, n, 1.0);
    f.values = values;
    f
}

/// True L2 error against an analytic solution, 3×3 Gauss per cell.
pub fn l2_error(u: &Solution, exact: impl Fn(f64, f64) -> f64) -> f64 {
    let n = u.nx;
    let h = 1.0 / n as f64;
    let pts = [(0.5 - 0.5 * 0.6_f64.sqrt(), 5.0 / 18.0), (0.5, 8.0 / 18.0), (0.5 + 0.5 * 0.6_f64.sqrt(), 5.0 / 18.0)];
    let mut e = 0.0;
    for j in 0..n {
        for i in 0..n {
            let dofs = cell_nodes(n, i, j);
            for &(s, ws) in &pts {
                for &(t, wt) in &pts {
                    let phi = shape(s, t);
                    let uh: f64 = (0..4).map(|p| phi[p] * u.values[dofs[p]]).sum();
                    let d = uh - exact((i as f64 + s) * h, (j as f64 + t) * h);
                    e += ws * wt * h * h * d * d;
                }
            }
        }
    }
    e.sqrt()
}

/// Generalized eigenvalues through the symmetric square root of `s`.
pub fn eigen_oracle(a: &DMatrix<f64>, s: &DMatrix<f64>) -> Vec<f64> {
    let es = SymmetricEigen::new(s.clone());
    let inv_sqrt = &es.eigenvectors
        * DMatrix::from_diagonal(&es.eigenvalues.map(|v| 1.0 / v.sqrt()))
        * es.eigenvectors.transpose();
    let c = &inv_sqrt * a * &inv_sqrt;
    let c = (&c + c.transpose()) * 0.5;
    let mut v: Vec<f64> = SymmetricEigen::new(c).eigenvalues.iter().copied().collect();
    v.sort_by(|x, y| x.partial_cmp(y).unwrap());
    v
}

pub fn random_field(n: usize, seed: u64) -> PermeabilityField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut f = PermeabilityField::uniform(n, n, 1.0);
    f.values = (0..n * n).map(|_| (rng.gen_range(-3.0..3.0_f64)).exp()).collect();
    f
}

pub fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

pub fn blobs(seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers = [[0.0, 0.0, 0.0], [10.0, 0.0, 0.0], [0.0, 10.0, 5.0]];
    let mut points = Vec::new();
    let mut labels = Vec::new();
    for i in 0..60 {
        let c = i % 3;
        points.push(centers[c].iter().map(|x| x + rng.gen_range(-1.0..1.0)).collect());
        labels.push(c);
    }
    (points, labels)
}

/// Smallest pre-activation magnitude at any leaky layer, and the output.
pub fn kink_margin(net: &Network, x: &Tensor, depth: usize) -> (f64, Tensor) {
    let mut net = net.clone();
    let mut margin = f64::INFINITY;
    for (l, layer) in net.layers().to_vec().iter().enumerate().take(depth) {
        if matches!(layer, Layer::LeakyRelu { .. }) {
            let (pre, _) = net.forward_until(x, l).unwrap();
            margin = pre.data.iter().fold(margin, |m, v| m.min(v.abs()));
        }
    }
    (margin, net.forward_until(x, depth).unwrap().0)
}
