//! Layer kernels. Every layer works on a batch `[N, sample...]` and keeps no
//! state besides its parameters; the network caches layer inputs.

use super::Tensor;

/// Row-major `C = A·B + beta·C` where `A` is `m×k` (or its transpose when
/// `ta`) and `B` is `k×n` (or its transpose when `tb`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, beta: f64, c: &mut [f64]) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides describe in-bounds row-major views of slices whose
    // lengths were checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    /// `y = W x + b` on the flattened sample; `W` is `[out, in]`.
    Dense { weight: Tensor, bias: Tensor },
    /// Square-kernel convolution; `W` is `[cout, cin, k, k]`.
    Conv2d {
        weight: Tensor,
        bias: Tensor,
        stride: usize,
        pad: usize,
    },
    LeakyRelu { slope: f64 },
    /// Nearest-neighbour resampling of `[c, h, w]` to `[c, out_h, out_w]`.
    Resize { out_h: usize, out_w: usize },
    /// Reinterprets the sample shape; data is unchanged.
    Reshape { shape: Vec<usize> },
}

impl Layer {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Dense { .. } => "dense",
            Layer::Conv2d { .. } => "conv2d",
            Layer::LeakyRelu { .. } => "activation",
            Layer::Resize { .. } => "resize",
            Layer::Reshape { .. } => "reshape",
        }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        match self {
            Layer::Dense { weight, bias } | Layer::Conv2d { weight, bias, .. } => vec![weight, bias],
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Layer::Dense { weight, bias } | Layer::Conv2d { weight, bias, .. } => vec![weight, bias],
            _ => Vec::new(),
        }
    }

    /// Per-sample output shape for a per-sample input shape, if compatible.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>, String> {
        match self {
            Layer::Dense { weight, .. } => {
                let n: usize = input.iter().product();
                if weight.shape[1] != n {
                    return Err(format!("dense expects {} inputs, got {n}", weight.shape[1]));
                }
                Ok(vec![weight.shape[0]])
            }
            Layer::Conv2d { weight, stride, pad, .. } => {
                let [c, h, w] = input else {
                    return Err(format!("conv2d needs [c, h, w] input, got {input:?}"));
                };
                let (cout, cin, k) = (weight.shape[0], weight.shape[1], weight.shape[2]);
                if *c != cin {
                    return Err(format!("conv2d expects {cin} channels, got {c}"));
                }
                if h + 2 * pad < k || w + 2 * pad < k || *stride == 0 {
                    return Err(format!("kernel {k} does not fit input {input:?}"));
                }
                Ok(vec![cout, conv_out(*h, k, *stride, *pad), conv_out(*w, k, *stride, *pad)])
            }
            Layer::LeakyRelu { .. } => Ok(input.to_vec()),
            Layer::Resize { out_h, out_w } => {
                let [c, _, _] = input else {
                    return Err(format!("resize needs [c, h, w] input, got {input:?}"));
                };
                Ok(vec![*c, *out_h, *out_w])
            }
            Layer::Reshape { shape } => {
                if shape.iter().product::<usize>() != input.iter().product::<usize>() {
                    return Err(format!("cannot reshape {input:?} to {shape:?}"));
                }
                Ok(shape.clone())
            }
        }
    }

    /// Forward pass on a batch whose per-sample shape is `in_shape`.
    pub fn forward(&self, x: &[f64], batch: usize, in_shape: &[usize], out_shape: &[usize]) -> Vec<f64> {
        let n_in: usize = in_shape.iter().product();
        let n_out: usize = out_shape.iter().product();
        match self {
            Layer::Dense { weight, bias } => {
                let mut y = Vec::with_capacity(batch * n_out);
                for _ in 0..batch {
                    y.extend_from_slice(&bias.data);
                }
                gemm(batch, n_in, n_out, x, false, &weight.data, true, 1.0, &mut y);
                y
            }
            Layer::Conv2d { weight, bias, stride, pad } => {
                let geom = ConvGeom::new(in_shape, out_shape, weight, *stride, *pad);
                let (rows, cols) = (geom.col_rows(), geom.col_cols());
                let mut y = vec![0.0; batch * n_out];
                for (start, len) in chunks(batch, rows * cols) {
                    let mut col = vec![0.0; rows * cols * len];
                    for s in 0..len {
                        let xs = &x[(start + s) * n_in..(start + s + 1) * n_in];
                        geom.im2col(xs, &mut col, s * cols, len * cols);
                    }
                    let mut out = vec![0.0; geom.cout * cols * len];
                    gemm(geom.cout, rows, cols * len, &weight.data, false, &col, false, 0.0, &mut out);
                    for s in 0..len {
                        let ys = &mut y[(start + s) * n_out..(start + s + 1) * n_out];
                        for o in 0..geom.cout {
                            let src = &out[o * cols * len + s * cols..o * cols * len + (s + 1) * cols];
                            for (d, v) in ys[o * cols..(o + 1) * cols].iter_mut().zip(src) {
                                *d = v + bias.data[o];
                            }
                        }
                    }
                }
                y
            }
            Layer::LeakyRelu { slope } => x.iter().map(|&v| if v > 0.0 { v } else { slope * v }).collect(),
            Layer::Resize { out_h, out_w } => {
                let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
                let mut y = vec![0.0; batch * n_out];
                for s in 0..batch {
                    for ch in 0..c {
                        for oy in 0..*out_h {
                            let iy = oy * h / out_h;
                            for ox in 0..*out_w {
                                let ix = ox * w / out_w;
                                y[s * n_out + (ch * out_h + oy) * out_w + ox] = x[s * n_in + (ch * h + iy) * w + ix];
                            }
                        }
                    }
                }
                y
            }
            Layer::Reshape { .. } => x.to_vec(),
        }
    }

    /// Backward pass. Returns the input gradient; when `accumulate` is set the
    /// parameter gradients are added to the parameters' grad buffers.
    #[allow(clippy::too_many_arguments)]
    pub fn backward(
        &mut self,
        x: &[f64],
        dy: &[f64],
        batch: usize,
        in_shape: &[usize],
        out_shape: &[usize],
        accumulate: bool,
    ) -> Vec<f64> {
        let n_in: usize = in_shape.iter().product();
        let n_out: usize = out_shape.iter().product();
        match self {
            Layer::Dense { weight, bias } => {
                if accumulate {
                    let gw = weight.grad_mut();
                    gemm(n_out, batch, n_in, dy, true, x, false, 1.0, gw);
                    let gb = bias.grad_mut();
                    for s in 0..batch {
                        for (g, d) in gb.iter_mut().zip(&dy[s * n_out..(s + 1) * n_out]) {
                            *g += d;
                        }
                    }
                }
                let mut dx = vec![0.0; batch * n_in];
                gemm(batch, n_out, n_in, dy, false, &weight.data, false, 0.0, &mut dx);
                dx
            }
            Layer::Conv2d { weight, bias, stride, pad } => {
                let geom = ConvGeom::new(in_shape, out_shape, weight, *stride, *pad);
                let (rows, cols) = (geom.col_rows(), geom.col_cols());
                let mut dx = vec![0.0; batch * n_in];
                for (start, len) in chunks(batch, rows * cols) {
                    let width = cols * len;
                    // dy regrouped as [cout, len * cols]
                    let mut dyt = vec![0.0; geom.cout * width];
                    for s in 0..len {
                        let dys = &dy[(start + s) * n_out..(start + s + 1) * n_out];
                        for o in 0..geom.cout {
                            dyt[o * width + s * cols..o * width + (s + 1) * cols].copy_from_slice(&dys[o * cols..(o + 1) * cols]);
                        }
                    }
                    if accumulate {
                        let mut col = vec![0.0; rows * width];
                        for s in 0..len {
                            geom.im2col(&x[(start + s) * n_in..(start + s + 1) * n_in], &mut col, s * cols, width);
                        }
                        gemm(geom.cout, width, rows, &dyt, false, &col, true, 1.0, weight.grad_mut());
                        let gb = bias.grad_mut();
                        for (o, chunk) in dyt.chunks(width).enumerate() {
                            gb[o] += chunk.iter().sum::<f64>();
                        }
                    }
                    let mut dcol = vec![0.0; rows * width];
                    gemm(rows, geom.cout, width, &weight.data, true, &dyt, false, 0.0, &mut dcol);
                    for s in 0..len {
                        geom.col2im(&dcol, s * cols, width, &mut dx[(start + s) * n_in..(start + s + 1) * n_in]);
                    }
                }
                dx
            }
            Layer::LeakyRelu { slope } => x
                .iter()
                .zip(dy)
                .map(|(&v, &d)| if v > 0.0 { d } else { *slope * d })
                .collect(),
            Layer::Resize { out_h, out_w } => {
                let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
                let mut dx = vec![0.0; batch * n_in];
                for s in 0..batch {
                    for ch in 0..c {
                        for oy in 0..*out_h {
                            let iy = oy * h / *out_h;
                            for ox in 0..*out_w {
                                let ix = ox * w / *out_w;
                                dx[s * n_in + (ch * h + iy) * w + ix] += dy[s * n_out + (ch * *out_h + oy) * *out_w + ox];
                            }
                        }
                    }
                }
                dx
            }
            Layer::Reshape { .. } => dy.to_vec(),
        }
    }
}

/// Splits a batch into runs whose patch matrices stay below a fixed size.
fn chunks(batch: usize, per_sample: usize) -> impl Iterator<Item = (usize, usize)> {
    const MAX_ENTRIES: usize = 1 << 21;
    let step = (MAX_ENTRIES / per_sample.max(1)).clamp(1, batch.max(1));
    (0..batch).step_by(step).map(move |s| (s, step.min(batch - s)))
}

pub fn conv_out(n: usize, k: usize, stride: usize, pad: usize) -> usize {
    (n + 2 * pad - k) / stride + 1
}

struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    ho: usize,
    wo: usize,
    k: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn new(in_shape: &[usize], out_shape: &[usize], weight: &Tensor, stride: usize, pad: usize) -> Self {
        Self {
            cin: in_shape[0],
            h: in_shape[1],
            w: in_shape[2],
            cout: out_shape[0],
            ho: out_shape[1],
            wo: out_shape[2],
            k: weight.shape[2],
            stride,
            pad,
        }
    }

    fn col_rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn col_cols(&self) -> usize {
        self.ho * self.wo
    }

    fn source(&self, o: usize, kk: usize, n: usize) -> Option<usize> {
        let p = (o * self.stride + kk) as isize - self.pad as isize;
        (p >= 0 && (p as usize) < n).then_some(p as usize)
    }

    /// Writes the patch matrix of one sample into columns
    /// `offset..offset + ho * wo` of a matrix with row length `stride`.
    fn im2col(&self, x: &[f64], col: &mut [f64], offset: usize, stride: usize) {
        for c in 0..self.cin {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = ((c * self.k + ky) * self.k + kx) * stride + offset;
                    for oy in 0..self.ho {
                        let iy = self.source(oy, ky, self.h);
                        for ox in 0..self.wo {
                            col[row + oy * self.wo + ox] = match (iy, self.source(ox, kx, self.w)) {
                                (Some(iy), Some(ix)) => x[(c * self.h + iy) * self.w + ix],
                                _ => 0.0,
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, col: &[f64], offset: usize, stride: usize, dx: &mut [f64]) {
        for c in 0..self.cin {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = ((c * self.k + ky) * self.k + kx) * stride + offset;
                    for oy in 0..self.ho {
                        let Some(iy) = self.source(oy, ky, self.h) else { continue };
                        for ox in 0..self.wo {
                            if let Some(ix) = self.source(ox, kx, self.w) {
                                dx[(c * self.h + iy) * self.w + ix] += col[row + oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}
