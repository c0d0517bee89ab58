//! Body building blocks.

use rand::Rng;

use crate::error::{Error, Result};
use crate::model::config::{BlockKind, BlockSpec};
use crate::nn::{Backend, ConvKind, ConvLayer, ParamStore};
use crate::tensor::Element;

/// `out = F(x) + alpha * conv2(conv1(F(x)))`, with `F` a relu or identity.
#[derive(Clone, Debug)]
pub struct BasicResidual {
    pub conv1: ConvLayer,
    pub conv2: ConvLayer,
    pub activation: bool,
    pub alpha: f64,
}

/// `out = x + project(relu(depthwise(relu(expand(x)))))`, projection linear.
#[derive(Clone, Debug)]
pub struct InvertedResidual {
    pub expand: ConvLayer,
    pub depthwise: ConvLayer,
    pub project: ConvLayer,
}

#[derive(Clone, Debug)]
pub enum Block {
    Basic(BasicResidual),
    Inverted(InvertedResidual),
}

impl BasicResidual {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        channels: usize,
        activation: bool,
        alpha: f64,
    ) -> Result<Self> {
        Ok(BasicResidual {
            conv1: ConvLayer::new(store, rng, &format!("{name}.conv1"), ConvKind::Standard, channels, channels, 3)?,
            conv2: ConvLayer::new(store, rng, &format!("{name}.conv2"), ConvKind::Standard, channels, channels, 3)?,
            activation,
            alpha,
        })
    }

    pub fn forward<T: Element, B: Backend<T>>(&self, be: &mut B, x: &B::Value) -> Result<B::Value> {
        let f = if self.activation { be.relu(x) } else { x.clone() };
        let y = be.conv(&f, &self.conv1)?;
        let y = be.conv(&y, &self.conv2)?;
        be.add_scaled(&f, &y, self.alpha)
    }
}

impl InvertedResidual {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        channels: usize,
        expansion: usize,
    ) -> Result<Self> {
        let mid = channels * expansion;
        Ok(InvertedResidual {
            expand: ConvLayer::new(store, rng, &format!("{name}.expand"), ConvKind::Standard, channels, mid, 1)?,
            depthwise: ConvLayer::new(store, rng, &format!("{name}.depthwise"), ConvKind::Depthwise, mid, mid, 3)?,
            project: ConvLayer::new(store, rng, &format!("{name}.project"), ConvKind::Standard, mid, channels, 1)?,
        })
    }

    pub fn forward<T: Element, B: Backend<T>>(&self, be: &mut B, x: &B::Value) -> Result<B::Value> {
        let e = be.conv(x, &self.expand)?;
        let e = be.relu(&e);
        let d = be.conv(&e, &self.depthwise)?;
        let d = be.relu(&d);
        let p = be.conv(&d, &self.project)?;
        be.add_scaled(x, &p, 1.0)
    }
}

impl Block {
    pub fn from_spec<T: Element>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        spec: &BlockSpec,
        alpha: f64,
    ) -> Result<Self> {
        Ok(match spec.kind {
            BlockKind::BasicResidual => Block::Basic(BasicResidual::new(
                store,
                rng,
                name,
                spec.channels,
                spec.activation,
                alpha,
            )?),
            BlockKind::InvertedResidual => {
                Block::Inverted(InvertedResidual::new(store, rng, name, spec.channels, spec.expansion)?)
            }
        })
    }

    pub fn forward<T: Element, B: Backend<T>>(&self, be: &mut B, x: &B::Value) -> Result<B::Value> {
        match self {
            Block::Basic(b) => b.forward(be, x),
            Block::Inverted(b) => b.forward(be, x),
        }
    }

    pub fn layers(&self) -> Vec<&ConvLayer> {
        match self {
            Block::Basic(b) => vec![&b.conv1, &b.conv2],
            Block::Inverted(b) => vec![&b.expand, &b.depthwise, &b.project],
        }
    }
}

/// Output of a bunch together with every block output, in block order.
pub struct BunchOutput<V> {
    pub output: V,
    pub block_outputs: Vec<V>,
}

/// Group of one to three blocks with local residual learning.
///
/// With three blocks `R1, R2, R3`: `u = R1(x)`, `out = R3(u + R2(u))`.
/// A two-block bunch has no middle block (`out = R3(u)`) and a one-block
/// bunch is just `R1`.
#[derive(Clone, Debug)]
pub struct BlockBunch {
    pub blocks: Vec<Block>,
}

impl BlockBunch {
    pub fn new(blocks: Vec<Block>) -> Result<Self> {
        if !(1..=3).contains(&blocks.len()) {
            return Err(Error::config(format!("a bunch holds 1 to 3 blocks, got {}", blocks.len())));
        }
        Ok(BlockBunch { blocks })
    }

    pub fn forward<T: Element, B: Backend<T>>(&self, be: &mut B, x: &B::Value) -> Result<BunchOutput<B::Value>> {
        let u = self.blocks[0].forward(be, x)?;
        let mut block_outputs = vec![u.clone()];
        let output = match self.blocks.len() {
            1 => u,
            2 => {
                let out = self.blocks[1].forward(be, &u)?;
                block_outputs.push(out.clone());
                out
            }
            _ => {
                let r2 = self.blocks[1].forward(be, &u)?;
                let sum = be.add_scaled(&u, &r2, 1.0)?;
                let out = self.blocks[2].forward(be, &sum)?;
                block_outputs.push(r2);
                block_outputs.push(out.clone());
                out
            }
        };
        Ok(BunchOutput { output, block_outputs })
    }
}

/// Channel concatenation of the tapped features followed by a 1x1
/// reduction back to the body width.
#[derive(Clone, Debug)]
pub struct InformationPool {
    pub reduce: ConvLayer,
    pub taps: usize,
}

impl InformationPool {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        taps: usize,
        channels: usize,
    ) -> Result<Self> {
        Ok(InformationPool {
            reduce: ConvLayer::new(store, rng, &format!("{name}.reduce"), ConvKind::Standard, taps * channels, channels, 1)?,
            taps,
        })
    }

    pub fn forward<T: Element, B: Backend<T>>(&self, be: &mut B, taps: &[B::Value]) -> Result<B::Value> {
        if taps.len() != self.taps {
            return Err(Error::config(format!(
                "information pool expects {} taps, got {}",
                self.taps,
                taps.len()
            )));
        }
        let cat = be.concat(taps)?;
        be.conv(&cat, &self.reduce)
    }
}
