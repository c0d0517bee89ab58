use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::model::blocks::{Block, BlockBunch, InformationPool};
use crate::model::config::{ModelConfig, PoolMode, Tap, DIV2K_RGB_MEAN};
use crate::nn::{Backend, ConvKind, ConvLayer, Eager, ParamStore, Recorder};
use crate::tensor::{Element, Tensor};

/// One tail stage: widen by `r^2`, then pixel-shuffle by `r`.
#[derive(Clone, Debug)]
pub struct UpsampleStage {
    pub conv: ConvLayer,
    pub factor: usize,
}

/// A built network: head extractor, block bunches with the information
/// pool and mirrored skips, global residual, sub-pixel tail.
#[derive(Clone, Debug)]
pub struct Model<T: Element = f32> {
    config: ModelConfig,
    params: ParamStore<T>,
    head: ConvLayer,
    bunches: Vec<BlockBunch>,
    pool: Option<InformationPool>,
    body_conv: Option<ConvLayer>,
    upsample: Vec<UpsampleStage>,
    out: ConvLayer,
}

impl<T: Element> Model<T> {
    /// Builds the network described by `config` with seeded initial weights.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let beta = config.n_feats;
        let colors = config.out_channels;

        let head = ConvLayer::new(&mut params, &mut rng, "head", ConvKind::Standard, colors, beta, 3)?;
        let mut bunches = Vec::with_capacity(config.n_bunches);
        for (b, specs) in config.block_specs().iter().enumerate() {
            let blocks = specs
                .iter()
                .enumerate()
                .map(|(k, spec)| {
                    let name = format!("body.bunch{}.block{}", b + 1, k + 1);
                    Block::from_spec(&mut params, &mut rng, &name, spec, config.residual_scale)
                })
                .collect::<Result<Vec<_>>>()?;
            bunches.push(BlockBunch::new(blocks)?);
        }
        let taps = config.pool_taps().len();
        let pool = if taps > 0 {
            Some(InformationPool::new(&mut params, &mut rng, "pool", taps, beta)?)
        } else {
            None
        };
        let body_conv = if config.body_conv {
            Some(ConvLayer::new(&mut params, &mut rng, "body.conv", ConvKind::Standard, beta, beta, 3)?)
        } else {
            None
        };
        let upsample = config
            .upsample_factors()?
            .into_iter()
            .enumerate()
            .map(|(i, r)| {
                let conv = ConvLayer::new(
                    &mut params,
                    &mut rng,
                    &format!("tail.up{}", i + 1),
                    ConvKind::Standard,
                    beta,
                    beta * r * r,
                    3,
                )?;
                Ok(UpsampleStage { conv, factor: r })
            })
            .collect::<Result<Vec<_>>>()?;
        let out = ConvLayer::new(&mut params, &mut rng, "tail.out", ConvKind::Standard, beta, colors, 3)?;

        Ok(Model {
            config,
            params,
            head,
            bunches,
            pool,
            body_conv,
            upsample,
            out,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.numel()
    }

    pub fn scale(&self) -> usize {
        self.config.scale
    }

    pub fn head(&self) -> &ConvLayer {
        &self.head
    }

    pub fn bunches(&self) -> &[BlockBunch] {
        &self.bunches
    }

    pub fn pool(&self) -> Option<&InformationPool> {
        self.pool.as_ref()
    }

    pub fn body_conv(&self) -> Option<&ConvLayer> {
        self.body_conv.as_ref()
    }

    pub fn upsample(&self) -> &[UpsampleStage] {
        &self.upsample
    }

    pub fn out_layer(&self) -> &ConvLayer {
        &self.out
    }

    /// Every convolution in evaluation order.
    pub fn layers(&self) -> Vec<&ConvLayer> {
        let mut layers = vec![&self.head];
        for (j, bunch) in self.bunches.iter().enumerate() {
            for block in &bunch.blocks {
                layers.extend(block.layers());
            }
            if j + 1 == self.config.extractor_bunches() {
                if let Some(pool) = &self.pool {
                    layers.push(&pool.reduce);
                }
            }
        }
        layers.extend(self.body_conv.iter());
        layers.extend(self.upsample.iter().map(|s| &s.conv));
        layers.push(&self.out);
        layers
    }

    /// Runs the network on a `(N, C, h, w)` input in `[0, 1]`.
    ///
    /// The output is not clamped.
    pub fn forward<B: Backend<T>>(&self, be: &mut B, input: &B::Value) -> Result<B::Value> {
        let cfg = &self.config;
        let neg_mean: Vec<f64> = DIV2K_RGB_MEAN.iter().map(|m| -m).collect();
        let x = if cfg.mean_shift {
            be.channel_shift(input, &neg_mean)?
        } else {
            input.clone()
        };
        let head = be.conv(&x, &self.head)?;

        let extractors = cfg.extractor_bunches();
        let taps = cfg.pool_taps();
        let mut outputs: Vec<B::Value> = Vec::with_capacity(self.bunches.len());
        let mut pool_taps: Vec<Option<B::Value>> = vec![None; taps.len()];
        for (i, tap) in taps.iter().enumerate() {
            if *tap == Tap::Head {
                pool_taps[i] = Some(head.clone());
            }
        }
        let mut pooled: Option<B::Value> = None;
        let mut current = head.clone();

        for (j, bunch) in self.bunches.iter().enumerate() {
            let input = match cfg.mirror_of(j) {
                None => current.clone(),
                Some(m) => self.fuse(be, &current, pooled.as_ref(), &outputs[m])?,
            };
            let out = bunch.forward(be, &input)?;
            for (i, tap) in taps.iter().enumerate() {
                if let Tap::Block { bunch: tb, block } = *tap {
                    if tb == j {
                        pool_taps[i] = Some(out.block_outputs[block].clone());
                    }
                }
            }
            current = out.output.clone();
            outputs.push(out.output);
            if j + 1 == extractors {
                if let Some(pool) = &self.pool {
                    let collected: Vec<B::Value> = pool_taps
                        .drain(..)
                        .map(|t| t.ok_or_else(|| Error::config("pool tap was never produced")))
                        .collect::<Result<_>>()?;
                    pooled = Some(pool.forward(be, &collected)?);
                }
            }
        }

        let body = match &self.body_conv {
            Some(conv) => be.conv(&current, conv)?,
            None => current,
        };
        let mut feat = be.add_scaled(&body, &head, 1.0)?;
        for stage in &self.upsample {
            let wide = be.conv(&feat, &stage.conv)?;
            feat = be.pixel_shuffle(&wide, stage.factor)?;
        }
        let out = be.conv(&feat, &self.out)?;
        if cfg.mean_shift {
            be.channel_shift(&out, &DIV2K_RGB_MEAN)
        } else {
            Ok(out)
        }
    }

    fn fuse<B: Backend<T>>(
        &self,
        be: &mut B,
        current: &B::Value,
        pooled: Option<&B::Value>,
        skip: &B::Value,
    ) -> Result<B::Value> {
        let cfg = &self.config;
        match (cfg.pool_mode, pooled) {
            (PoolMode::None, _) => be.add_scaled(current, skip, 1.0),
            (_, Some(p)) => {
                let with_pool = be.add_scaled(current, p, cfg.pool_weight)?;
                be.add_scaled(&with_pool, skip, cfg.skip_weight)
            }
            (_, None) => Err(Error::config("latter bunch reached before the information pool")),
        }
    }

    /// Nearest-neighbour upsampler built from `config`: the body is switched
    /// off by a zero body conv, head and tail copy the colour channels.
    pub fn pixel_replicator(config: ModelConfig, seed: u64) -> Result<Self> {
        let colors = config.out_channels;
        if config.n_feats < colors {
            return Err(Error::config("pixel replicator needs n_feats >= out_channels"));
        }
        let config = ModelConfig {
            body_conv: true,
            mean_shift: false,
            ..config
        };
        let mut m = Model::new(config, seed)?;
        let set = |m: &mut Model<T>, layer: &ConvLayer, src: &dyn Fn(usize) -> Option<usize>| {
            let w = &mut m.params.get_mut(layer.weight).tensor;
            *w = Tensor::from_fn(w.shape(), |o, i, h, x| {
                if h == 1 && x == 1 && src(o) == Some(i) {
                    T::one()
                } else {
                    T::zero()
                }
            });
            m.params.get_mut(layer.bias).tensor.data_mut().fill(T::zero());
        };
        let (head, out) = (m.head.clone(), m.out.clone());
        set(&mut m, &head, &|o| (o < colors).then_some(o));
        set(&mut m, &out, &|o| Some(o));
        if let Some(body) = m.body_conv.clone() {
            set(&mut m, &body, &|_| None);
        }
        for stage in m.upsample.clone() {
            let rr = stage.factor * stage.factor;
            set(&mut m, &stage.conv, &|o| (o / rr < colors).then_some(o / rr));
        }
        Ok(m)
    }

    /// Inference without gradient bookkeeping.
    pub fn infer(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let mut be = Eager::new(&self.params);
        let out = self.forward(&mut be, &Rc::new(input.clone()))?;
        Ok(Rc::try_unwrap(out).unwrap_or_else(|rc| (*rc).clone()))
    }

    /// Records a forward pass with trainable parameter leaves.
    pub fn record(&self, graph: &mut Graph<T>, input: Tensor<T>) -> Result<Var> {
        let mut rec = Recorder::new(graph, &self.params, true);
        let x = rec.graph.constant(input);
        self.forward(&mut rec, &x)
    }

    pub fn cast<U: Element>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            head: self.head.clone(),
            bunches: self.bunches.clone(),
            pool: self.pool.clone(),
            body_conv: self.body_conv.clone(),
            upsample: self.upsample.clone(),
            out: self.out.clone(),
        }
    }
}
