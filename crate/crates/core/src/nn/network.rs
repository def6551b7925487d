use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::layer::Layer;
use super::Tensor;
use crate::io::{Reader, Writer};
use crate::{Error, Result};

/// Anything exposing trainable parameter tensors.
pub trait Parameterized {
    fn params_mut(&mut self) -> Vec<&mut Tensor>;

    fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.grad = None;
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tap {
    pub name: String,
    /// The tap exports the output of this layer.
    pub after: usize,
}

/// A sequential network with optional named taps on intermediate outputs.
#[derive(Clone, Debug)]
pub struct Network {
    layers: Vec<Layer>,
    shapes: Vec<Vec<usize>>,
    taps: Vec<Tap>,
    trainable: bool,
    cache: Vec<Tensor>,
}

impl PartialEq for Network {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers && self.shapes == other.shapes && self.taps == other.taps && self.trainable == other.trainable
    }
}

pub type Taps = Vec<(String, Tensor)>;

impl Network {
    pub fn input_shape(&self) -> &[usize] {
        &self.shapes[0]
    }

    pub fn output_shape(&self) -> &[usize] {
        self.shapes.last().expect("shape list is never empty")
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn taps(&self) -> &[Tap] {
        &self.taps
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        self.trainable = trainable;
    }

    /// All parameters regardless of the trainable flag.
    pub fn all_params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    pub fn all_params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.all_params().iter().map(|p| p.len()).sum()
    }

    fn check_input(&self, x: &Tensor) -> Result<usize> {
        if x.shape.len() < 2 || x.shape[1..] != self.shapes[0][..] {
            return Err(Error::DimensionMismatch(format!(
                "network expects [N, {:?}], got {:?}",
                self.shapes[0], x.shape
            )));
        }
        Ok(x.batch())
    }

    fn batched(&self, batch: usize, layer_out: usize, data: Vec<f64>) -> Tensor {
        let mut shape = vec![batch];
        shape.extend_from_slice(&self.shapes[layer_out]);
        Tensor {
            shape,
            data,
            grad: None,
        }
    }

    fn run(&self, x: &Tensor, upto: usize, mut keep: Option<&mut Vec<Tensor>>) -> Result<(Tensor, Taps)> {
        let batch = self.check_input(x)?;
        let mut current = x.clone();
        current.grad = None;
        let mut taps = Vec::new();
        for (i, layer) in self.layers[..upto].iter().enumerate() {
            let y = layer.forward(&current.data, batch, &self.shapes[i], &self.shapes[i + 1]);
            let y = self.batched(batch, i + 1, y);
            for tap in self.taps.iter().filter(|t| t.after == i) {
                taps.push((tap.name.clone(), y.clone()));
            }
            let prev = std::mem::replace(&mut current, y);
            if let Some(cache) = keep.as_deref_mut() {
                cache.push(prev);
            }
        }
        Ok((current, taps))
    }

    /// Forward pass without caching; safe to call concurrently.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.run(x, self.layers.len(), None)?.0)
    }

    /// Forward pass caching layer inputs for a subsequent `backward`.
    pub fn forward(&mut self, x: &Tensor) -> Result<(Tensor, Taps)> {
        self.forward_until(x, self.layers.len())
    }

    /// Forward pass through the first `layers` layers only.
    pub fn forward_until(&mut self, x: &Tensor, layers: usize) -> Result<(Tensor, Taps)> {
        let upto = layers.min(self.layers.len());
        let mut cache = Vec::with_capacity(upto);
        let out = self.run(x, upto, Some(&mut cache))?;
        self.cache = cache;
        Ok(out)
    }

    /// Rebinds the layers to a different input shape. Only meaningful for
    /// shape-agnostic stacks such as fully convolutional networks.
    pub fn set_input_shape(&mut self, input: &[usize]) -> Result<()> {
        let mut shapes = vec![input.to_vec()];
        for (i, l) in self.layers.iter().enumerate() {
            let next = l
                .output_shape(shapes.last().expect("non-empty"))
                .map_err(|e| Error::DimensionMismatch(format!("layer {i}: {e}")))?;
            shapes.push(next);
        }
        self.shapes = shapes;
        self.cache.clear();
        Ok(())
    }

    pub fn with_input_shape(&self, input: &[usize]) -> Result<Network> {
        let mut net = self.clone();
        net.set_input_shape(input)?;
        Ok(net)
    }

    /// Number of layers needed to produce every tap.
    pub fn tap_depth(&self) -> usize {
        self.taps.iter().map(|t| t.after + 1).max().unwrap_or(0)
    }

    pub fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        self.backward_with_taps(Some(grad_out), &[])
    }

    /// Reverse pass from the last forward. Gradients may enter at the output
    /// of the last layer run and at any tap. Parameter gradients accumulate
    /// only when the network is trainable.
    pub fn backward_with_taps(&mut self, grad_out: Option<&Tensor>, tap_grads: &[(String, Tensor)]) -> Result<Tensor> {
        let depth = self.cache.len();
        if depth == 0 {
            return Err(Error::InvalidArgument("backward called without a forward pass".into()));
        }
        let batch = self.cache[0].batch();
        let top = &self.shapes[depth];
        let mut grad = match grad_out {
            Some(g) => {
                if g.shape.len() < 2 || g.shape[0] != batch || g.shape[1..] != top[..] {
                    return Err(Error::DimensionMismatch(format!(
                        "output gradient {:?} does not match [{batch}, {top:?}]",
                        g.shape
                    )));
                }
                g.data.clone()
            }
            None => vec![0.0; batch * top.iter().product::<usize>()],
        };
        for (name, g) in tap_grads {
            let tap = self
                .taps
                .iter()
                .find(|t| &t.name == name)
                .ok_or_else(|| Error::InvalidArgument(format!("unknown tap `{name}`")))?;
            if tap.after >= depth {
                return Err(Error::InvalidArgument(format!("tap `{name}` was not reached by the forward pass")));
            }
            if g.shape[0] != batch || g.shape[1..] != self.shapes[tap.after + 1][..] {
                return Err(Error::DimensionMismatch(format!("tap gradient for `{name}` has shape {:?}", g.shape)));
            }
        }
        let accumulate = self.trainable;
        for i in (0..depth).rev() {
            for (name, g) in tap_grads {
                if self.taps.iter().any(|t| &t.name == name && t.after == i) {
                    for (a, b) in grad.iter_mut().zip(&g.data) {
                        *a += b;
                    }
                }
            }
            let input = &self.cache[i];
            grad = self.layers[i].backward(&input.data, &grad, batch, &self.shapes[i], &self.shapes[i + 1], accumulate);
        }
        Ok(self.batched(batch, 0, grad))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(b"NNM1");
        w.u32(self.layers.len());
        w.u32(self.shapes[0].len());
        for &d in &self.shapes[0] {
            w.u32(d);
        }
        for layer in &self.layers {
            match layer {
                Layer::Dense { .. } => w.bytes(&[1]),
                Layer::Conv2d { stride, pad, .. } => {
                    w.bytes(&[2]);
                    w.u32(*stride);
                    w.u32(*pad);
                }
                Layer::LeakyRelu { slope } => {
                    w.bytes(&[3]);
                    w.f64(*slope);
                }
                Layer::Resize { out_h, out_w } => {
                    w.bytes(&[4]);
                    w.u32(*out_h);
                    w.u32(*out_w);
                }
                Layer::Reshape { shape } => {
                    w.bytes(&[5]);
                    w.u32(shape.len());
                    for &d in shape {
                        w.u32(d);
                    }
                }
            }
            let params = layer.params();
            for p in &params {
                w.u32(p.shape.len());
                for &d in &p.shape {
                    w.u32(d);
                }
            }
            for p in &params {
                w.f64s(&p.data);
            }
        }
        w.u32(self.taps.len());
        for t in &self.taps {
            w.u32(t.after);
            w.str(&t.name);
        }
        w.bytes(&[self.trainable as u8]);
        w.buf
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self> {
        let mut r = Reader::new(data);
        Self::read(&mut r)
    }

    pub(crate) fn read(r: &mut Reader<'_>) -> Result<Self> {
        r.expect(b"NNM1")?;
        let n_layers = r.u32()?;
        let rank = r.u32()?;
        let input: Vec<usize> = (0..rank).map(|_| r.u32()).collect::<Result<_>>()?;
        let read_shape = |r: &mut Reader<'_>| -> Result<Vec<usize>> {
            let rank = r.u32()?;
            (0..rank).map(|_| r.u32()).collect()
        };
        let mut layers = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let tag = r.u8()?;
            let param_pair = |r: &mut Reader<'_>| -> Result<(Tensor, Tensor)> {
                let ws = read_shape(r)?;
                let bs = read_shape(r)?;
                let wd = r.f64s(ws.iter().product())?;
                let bd = r.f64s(bs.iter().product())?;
                Ok((Tensor::new(&ws, wd)?, Tensor::new(&bs, bd)?))
            };
            let layer = match tag {
                1 => {
                    let (weight, bias) = param_pair(r)?;
                    Layer::Dense { weight, bias }
                }
                2 => {
                    let (stride, pad) = (r.u32()?, r.u32()?);
                    let (weight, bias) = param_pair(r)?;
                    Layer::Conv2d { weight, bias, stride, pad }
                }
                3 => Layer::LeakyRelu { slope: r.f64()? },
                4 => Layer::Resize {
                    out_h: r.u32()?,
                    out_w: r.u32()?,
                },
                5 => Layer::Reshape { shape: read_shape(r)? },
                t => return Err(Error::Parse(format!("unknown layer tag {t}"))),
            };
            layers.push(layer);
        }
        let n_taps = r.u32()?;
        let mut taps = Vec::with_capacity(n_taps);
        for _ in 0..n_taps {
            let after = r.u32()?;
            taps.push(Tap { name: r.str()?, after });
        }
        let trainable = r.u8()? != 0;
        let mut shapes = vec![input];
        for l in &layers {
            let next = l
                .output_shape(shapes.last().expect("non-empty"))
                .map_err(Error::Parse)?;
            shapes.push(next);
        }
        if taps.iter().any(|t| t.after >= layers.len()) {
            return Err(Error::Parse("tap refers to a missing layer".into()));
        }
        Ok(Self {
            layers,
            shapes,
            taps,
            trainable,
            cache: Vec::new(),
        })
    }
}

impl Parameterized for Network {
    /// Trainable parameters only; a frozen network exposes none.
    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        if self.trainable {
            self.all_params_mut()
        } else {
            Vec::new()
        }
    }
}

/// Builds a [`Network`], checking shape compatibility layer by layer.
pub struct NetworkBuilder {
    shapes: Vec<Vec<usize>>,
    layers: Vec<Layer>,
    taps: Vec<Tap>,
    rng: ChaCha8Rng,
    error: Option<String>,
}

impl NetworkBuilder {
    pub fn new(input_shape: &[usize], seed: u64) -> Self {
        Self {
            shapes: vec![input_shape.to_vec()],
            layers: Vec::new(),
            taps: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            error: None,
        }
    }

    fn current(&self) -> &[usize] {
        self.shapes.last().expect("non-empty")
    }

    fn uniform(&mut self, shape: &[usize], fan_in: usize) -> Tensor {
        // He-uniform
        let bound = (6.0 / fan_in as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.gen_range(-bound..bound)).collect();
        Tensor::new(shape, data).expect("size from shape")
    }

    pub fn layer(mut self, layer: Layer) -> Self {
        if self.error.is_some() {
            return self;
        }
        match layer.output_shape(self.current()) {
            Ok(s) => {
                self.shapes.push(s);
                self.layers.push(layer);
            }
            Err(e) => self.error = Some(format!("layer {}: {e}", self.layers.len())),
        }
        self
    }

    pub fn dense(mut self, out: usize) -> Self {
        let fan_in: usize = self.current().iter().product();
        let weight = self.uniform(&[out, fan_in], fan_in);
        self.layer(Layer::Dense {
            weight,
            bias: Tensor::zeros(&[out]),
        })
    }

    pub fn conv2d(mut self, cout: usize, k: usize, stride: usize, pad: usize) -> Self {
        let cin = self.current().first().copied().unwrap_or(0);
        let weight = self.uniform(&[cout, cin, k, k], cin * k * k);
        self.layer(Layer::Conv2d {
            weight,
            bias: Tensor::zeros(&[cout]),
            stride,
            pad,
        })
    }

    pub fn leaky_relu(self, slope: f64) -> Self {
        self.layer(Layer::LeakyRelu { slope })
    }

    pub fn resize(self, out_h: usize, out_w: usize) -> Self {
        self.layer(Layer::Resize { out_h, out_w })
    }

    pub fn reshape(self, shape: &[usize]) -> Self {
        self.layer(Layer::Reshape { shape: shape.to_vec() })
    }

    /// Exports the output of the most recently added layer under `name`.
    pub fn tap(mut self, name: &str) -> Self {
        match self.layers.len() {
            0 => self.error = Some("tap before any layer".into()),
            n => self.taps.push(Tap {
                name: name.to_string(),
                after: n - 1,
            }),
        }
        self
    }

    pub fn build(self) -> Result<Network> {
        if let Some(e) = self.error {
            return Err(Error::DimensionMismatch(e));
        }
        if self.layers.is_empty() {
            return Err(Error::InvalidArgument("network without layers".into()));
        }
        Ok(Network {
            layers: self.layers,
            shapes: self.shapes,
            taps: self.taps,
            trainable: true,
            cache: Vec::new(),
        })
    }
}
