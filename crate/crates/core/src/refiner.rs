//! Shallow residual CNN that sharpens rendered images.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{bail, Result};
use crate::image::Image;
use crate::nn::{Conv2d, Init, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefinerConfig {
    pub channels: usize,
    pub blocks: usize,
    pub residual: bool,
}

impl Default for RefinerConfig {
    fn default() -> Self {
        Self {
            channels: 64,
            blocks: 4,
            residual: true,
        }
    }
}

impl RefinerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.blocks == 0 {
            bail!(Config, "refiner channels and blocks must be at least 1");
        }
        Ok(())
    }
}

pub const REFINER_PREFIX: &str = "refiner";

#[derive(Clone, Debug)]
pub struct Refiner {
    pub config: RefinerConfig,
    stem: Conv2d,
    blocks: Vec<(Conv2d, Conv2d)>,
    head: Conv2d,
}

impl Refiner {
    pub fn new(store: &mut ParamStore, cfg: &RefinerConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let he = Init::FanIn(libm::sqrt(2.0));
        let stem = Conv2d::new(store, "refiner.stem", 3, c, 3, 1, he, rng);
        let blocks = (0..cfg.blocks)
            .map(|i| {
                (
                    Conv2d::new(
                        store,
                        &alloc::format!("refiner.block{i}.conv1"),
                        c,
                        c,
                        3,
                        1,
                        he,
                        rng,
                    ),
                    Conv2d::new(
                        store,
                        &alloc::format!("refiner.block{i}.conv2"),
                        c,
                        c,
                        3,
                        1,
                        Init::FanIn(0.5),
                        rng,
                    ),
                )
            })
            .collect();
        let head = Conv2d::new(store, "refiner.head", c, 3, 3, 1, Init::Zeros, rng);
        Ok(Self {
            config: cfg.clone(),
            stem,
            blocks,
            head,
        })
    }

    /// Refine an `(height*width) x 3` image node; output has the same shape
    /// and lies in `[0, 1]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        image: Var,
        width: usize,
        height: usize,
    ) -> Var {
        let (x, _, _) = self.stem.forward(g, store, image, height, width);
        let mut x = g.relu(x);
        for (c1, c2) in &self.blocks {
            let (h, _, _) = c1.forward(g, store, x, height, width);
            let h = g.relu(h);
            let (h, _, _) = c2.forward(g, store, h, height, width);
            x = g.add(x, h);
        }
        let x = g.relu(x);
        let (delta, _, _) = self.head.forward(g, store, x, height, width);
        let out = if self.config.residual {
            g.add(image, delta)
        } else {
            delta
        };
        g.clamp(out, 0.0, 1.0)
    }

    pub fn refine(&self, store: &ParamStore, image: &Image) -> Image {
        let mut g = Graph::inference();
        let x = g.constant(Tensor::from_vec(
            image.width * image.height,
            3,
            image.data.clone(),
        ));
        let y = self.forward(&mut g, store, x, image.width, image.height);
        Image::new(image.width, image.height, 3, g.take_value(y).data)
    }
}
