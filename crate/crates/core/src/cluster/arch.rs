//! Network shapes used for clustering. Patches enter as `[1, ncy, ncx]`
//! cell images and bases leave as `[1, ncy + 1, ncx + 1]` node images.

use crate::nn::{Network, NetworkBuilder, Parameterized, Tensor};
use crate::Result;

pub const LATENT_DIM: usize = 16;
pub const LEAKY_SLOPE: f64 = 0.1;
pub const ADVERSARY_TAPS: [&str; 2] = ["layer1", "layer2"];

/// Two stride-2 convolutions and a dense map to the latent code.
pub fn encoder(ncy: usize, ncx: usize, latent: usize, seed: u64) -> Result<Network> {
    NetworkBuilder::new(&[1, ncy, ncx], seed)
        .conv2d(8, 3, 2, 1)
        .leaky_relu(LEAKY_SLOPE)
        .conv2d(16, 3, 2, 1)
        .leaky_relu(LEAKY_SLOPE)
        .dense(latent)
        .build()
}

/// Dense seed image, then two resize-and-convolve stages up to the node grid.
pub fn generator(latent: usize, nny: usize, nnx: usize, seed: u64) -> Result<Network> {
    let (a, b) = (nny.div_ceil(4), nnx.div_ceil(4));
    NetworkBuilder::new(&[latent], seed)
        .dense(8 * a * b)
        .leaky_relu(LEAKY_SLOPE)
        .reshape(&[8, a, b])
        .resize(nny.div_ceil(2), nnx.div_ceil(2))
        .conv2d(8, 3, 1, 1)
        .leaky_relu(LEAKY_SLOPE)
        .resize(nny, nnx)
        .conv2d(1, 3, 1, 1)
        .build()
}

/// Fully convolutional reconstruction network; works on any image size via
/// [`Network::with_input_shape`].
pub fn adversary(nny: usize, nnx: usize, seed: u64) -> Result<Network> {
    NetworkBuilder::new(&[1, nny, nnx], seed)
        .conv2d(8, 3, 1, 1)
        .leaky_relu(LEAKY_SLOPE)
        .tap(ADVERSARY_TAPS[0])
        .conv2d(16, 3, 1, 1)
        .leaky_relu(LEAKY_SLOPE)
        .tap(ADVERSARY_TAPS[1])
        .conv2d(8, 3, 1, 1)
        .leaky_relu(LEAKY_SLOPE)
        .conv2d(1, 3, 1, 1)
        .build()
}

/// Encoder and generator trained jointly.
#[derive(Clone, Debug, PartialEq)]
pub struct AutoEncoder {
    pub encoder: Network,
    pub generator: Network,
}

impl AutoEncoder {
    pub fn new(ncy: usize, ncx: usize, seed: u64) -> Result<Self> {
        Ok(Self {
            encoder: encoder(ncy, ncx, LATENT_DIM, seed)?,
            generator: generator(LATENT_DIM, ncy + 1, ncx + 1, seed.wrapping_add(1))?,
        })
    }

    pub fn latent(&self, x: &Tensor) -> Result<Tensor> {
        self.encoder.predict(x)
    }

    pub fn reconstruct(&self, x: &Tensor) -> Result<Tensor> {
        self.generator.predict(&self.encoder.predict(x)?)
    }
}

impl Parameterized for AutoEncoder {
    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.encoder.params_mut();
        p.extend(self.generator.params_mut());
        p
    }
}
