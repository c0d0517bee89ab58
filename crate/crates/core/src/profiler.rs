//! Static parameter and multi-add accounting.
//!
//! Layers are enumerated from the configuration alone, so the counts can be
//! checked against a built model's parameter store.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::model::config::{BlockKind, ModelConfig};
use crate::nn::ParamStore;
use crate::tensor::Element;

/// Default reference output resolution (width, height).
pub const REFERENCE_HR: (usize, usize) = (1280, 720);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv,
    Depthwise,
    PixelShuffle,
}

impl LayerKind {
    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Conv => "conv",
            LayerKind::Depthwise => "depthwise",
            LayerKind::PixelShuffle => "pixel_shuffle",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerCost {
    pub name: String,
    pub kind: LayerKind,
    pub kernel: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub out_w: usize,
    pub out_h: usize,
    pub params: usize,
    pub multi_adds: u64,
}

/// `k * k * c_in * c_out + c_out`.
pub fn conv_params(kernel: usize, c_in: usize, c_out: usize) -> usize {
    kernel * kernel * c_in * c_out + c_out
}

/// One `k x k` single-input kernel plus a bias per channel.
pub fn depthwise_params(kernel: usize, channels: usize) -> usize {
    kernel * kernel * channels + channels
}

/// Multiply-accumulates of a layer producing `c_out` maps of `out_w x out_h`.
pub fn count_multiadds(params: usize, c_out: usize, out_w: usize, out_h: usize) -> u64 {
    ((params - c_out) as u64) * (out_w as u64) * (out_h as u64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostReport {
    pub label: String,
    pub hr_w: usize,
    pub hr_h: usize,
    pub layers: Vec<LayerCost>,
}

struct Builder {
    layers: Vec<LayerCost>,
}

impl Builder {
    fn conv(&mut self, name: String, k: usize, c_in: usize, c_out: usize, (w, h): (usize, usize)) {
        let params = conv_params(k, c_in, c_out);
        self.layers.push(LayerCost {
            name,
            kind: LayerKind::Conv,
            kernel: k,
            c_in,
            c_out,
            out_w: w,
            out_h: h,
            params,
            multi_adds: count_multiadds(params, c_out, w, h),
        });
    }

    fn depthwise(&mut self, name: String, k: usize, c: usize, (w, h): (usize, usize)) {
        let params = depthwise_params(k, c);
        self.layers.push(LayerCost {
            name,
            kind: LayerKind::Depthwise,
            kernel: k,
            c_in: c,
            c_out: c,
            out_w: w,
            out_h: h,
            params,
            multi_adds: count_multiadds(params, c, w, h),
        });
    }
}

impl CostReport {
    /// Enumerates every layer of `config` at an HR output of `hr_w x hr_h`.
    pub fn new(label: impl Into<String>, config: &ModelConfig, hr_w: usize, hr_h: usize) -> Result<Self> {
        config.validate()?;
        let s = config.scale;
        if hr_w == 0 || hr_h == 0 || hr_w % s != 0 || hr_h % s != 0 {
            return Err(Error::config(format!(
                "reference resolution {hr_w}x{hr_h} is not a positive multiple of scale {s}"
            )));
        }
        let beta = config.n_feats;
        let colors = config.out_channels;
        let lr = (hr_w / s, hr_h / s);
        let mut b = Builder { layers: Vec::new() };

        b.conv("head".into(), 3, colors, beta, lr);
        let extractors = config.extractor_bunches();
        let taps = config.pool_taps().len();
        for (j, bunch) in config.block_specs().iter().enumerate() {
            for (k, spec) in bunch.iter().enumerate() {
                let name = format!("body.bunch{}.block{}", j + 1, k + 1);
                match spec.kind {
                    BlockKind::BasicResidual => {
                        b.conv(format!("{name}.conv1"), 3, beta, beta, lr);
                        b.conv(format!("{name}.conv2"), 3, beta, beta, lr);
                    }
                    BlockKind::InvertedResidual => {
                        let wide = beta * spec.expansion;
                        b.conv(format!("{name}.expand"), 1, beta, wide, lr);
                        b.depthwise(format!("{name}.depthwise"), 3, wide, lr);
                        b.conv(format!("{name}.project"), 1, wide, beta, lr);
                    }
                }
            }
            if j + 1 == extractors && taps > 0 {
                b.conv("pool.reduce".into(), 1, taps * beta, beta, lr);
            }
        }
        if config.body_conv {
            b.conv("body.conv".into(), 3, beta, beta, lr);
        }
        let mut res = lr;
        for (i, r) in config.upsample_factors()?.into_iter().enumerate() {
            b.conv(format!("tail.up{}", i + 1), 3, beta, beta * r * r, res);
            res = (res.0 * r, res.1 * r);
            b.layers.push(LayerCost {
                name: format!("tail.shuffle{}", i + 1),
                kind: LayerKind::PixelShuffle,
                kernel: 0,
                c_in: beta * r * r,
                c_out: beta,
                out_w: res.0,
                out_h: res.1,
                params: 0,
                multi_adds: 0,
            });
        }
        b.conv("tail.out".into(), 3, beta, colors, res);

        Ok(CostReport {
            label: label.into(),
            hr_w,
            hr_h,
            layers: b.layers,
        })
    }

    pub fn total_params(&self) -> usize {
        self.layers.iter().map(|l| l.params).sum()
    }

    pub fn total_multi_adds(&self) -> u64 {
        self.layers.iter().map(|l| l.multi_adds).sum()
    }

    /// Parameters inside the residual blocks.
    pub fn block_params(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| l.name.starts_with("body.bunch"))
            .map(|l| l.params)
            .sum()
    }

    /// Checks every layer and the total against a built parameter store.
    pub fn check_against<T: Element>(&self, store: &ParamStore<T>) -> Result<()> {
        for layer in self.layers.iter().filter(|l| l.kind != LayerKind::PixelShuffle) {
            let numel = |suffix: &str| {
                store
                    .find(&format!("{}.{suffix}", layer.name))
                    .map(|id| store.get(id).tensor.numel())
                    .ok_or_else(|| Error::config(format!("model has no parameter {}.{suffix}", layer.name)))
            };
            let got = numel("weight")? + numel("bias")?;
            if got != layer.params {
                return Err(Error::config(format!(
                    "layer {} holds {got} parameters, expected {}",
                    layer.name, layer.params
                )));
            }
        }
        if store.numel() != self.total_params() {
            return Err(Error::config(format!(
                "model holds {} parameters, expected {}",
                store.numel(),
                self.total_params()
            )));
        }
        Ok(())
    }

    /// Aligned per-layer table with a totals row.
    pub fn to_table(&self) -> String {
        let width = self.layers.iter().map(|l| l.name.len()).max().unwrap_or(5).max(5);
        let mut out = format!("{} @ {}x{} HR\n", self.label, self.hr_w, self.hr_h);
        let _ = writeln!(
            out,
            "{:<width$}  {:<13}  {:>6}  {:>6}  {:>6}  {:>11}  {:>16}",
            "layer", "kind", "kernel", "c_in", "c_out", "params", "multi_adds"
        );
        for l in &self.layers {
            let _ = writeln!(
                out,
                "{:<width$}  {:<13}  {:>6}  {:>6}  {:>6}  {:>11}  {:>16}",
                l.name,
                l.kind.name(),
                l.kernel,
                l.c_in,
                l.c_out,
                l.params,
                l.multi_adds
            );
        }
        let _ = writeln!(
            out,
            "{:<width$}  {:<13}  {:>6}  {:>6}  {:>6}  {:>11}  {:>16}",
            "total",
            "",
            "",
            "",
            "",
            self.total_params(),
            self.total_multi_adds()
        );
        let _ = writeln!(
            out,
            "params {:.1}K, multi-adds {:.2}G",
            self.total_params() as f64 / 1e3,
            self.total_multi_adds() as f64 / 1e9
        );
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,kind,kernel,c_in,c_out,out_w,out_h,params,multi_adds\n");
        for l in &self.layers {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                l.name,
                l.kind.name(),
                l.kernel,
                l.c_in,
                l.c_out,
                l.out_w,
                l.out_h,
                l.params,
                l.multi_adds
            );
        }
        let _ = writeln!(out, "total,,,,,,,{},{}", self.total_params(), self.total_multi_adds());
        out
    }
}

/// One report per labelled configuration.
pub fn cost_sweep(configs: &[(String, ModelConfig)], hr_w: usize, hr_h: usize) -> Result<Vec<CostReport>> {
    configs
        .iter()
        .map(|(label, cfg)| CostReport::new(label.clone(), cfg, hr_w, hr_h))
        .collect()
}

/// Summary rows of a sweep as an aligned table.
pub fn sweep_table(reports: &[CostReport]) -> String {
    let width = reports.iter().map(|r| r.label.len()).max().unwrap_or(6).max(6);
    let mut out = format!("{:<width$}  {:>12}  {:>14}\n", "config", "params (K)", "multi-adds (G)");
    for r in reports {
        let _ = writeln!(
            out,
            "{:<width$}  {:>12.1}  {:>14.2}",
            r.label,
            r.total_params() as f64 / 1e3,
            r.total_multi_adds() as f64 / 1e9
        );
    }
    out
}

pub fn sweep_csv(reports: &[CostReport]) -> String {
    let mut out = String::from("config,hr_w,hr_h,params,multi_adds\n");
    for r in reports {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.label,
            r.hr_w,
            r.hr_h,
            r.total_params(),
            r.total_multi_adds()
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_layer_formulas() {
        assert_eq!(conv_params(3, 16, 16), 2320);
        assert_eq!(conv_params(1, 96, 16), 1552);
        assert_eq!(depthwise_params(3, 32), 320);
        assert_eq!(count_multiadds(2320, 16, 320, 180), 132_710_400);
        assert_eq!(count_multiadds(1552, 16, 10, 7), 1536 * 70);
    }

    #[test]
    fn totals_are_column_sums_and_shuffle_is_free() {
        let r = CostReport::new("b16", &ModelConfig::default(), 1280, 720).unwrap();
        let shuffles: Vec<_> = r.layers.iter().filter(|l| l.kind == LayerKind::PixelShuffle).collect();
        assert_eq!(shuffles.len(), 2);
        assert!(shuffles.iter().all(|l| l.params == 0 && l.multi_adds == 0));
        assert_eq!(r.layers.last().unwrap().out_w, 1280);
        assert_eq!(r.layers[0].out_h, 180);
        let csv = r.to_csv();
        let last = csv.lines().last().unwrap();
        assert!(last.ends_with(&format!("{},{}", r.total_params(), r.total_multi_adds())));
    }

    #[test]
    fn indivisible_reference_is_rejected() {
        assert!(CostReport::new("x", &ModelConfig::default(), 1281, 720).is_err());
    }
}
