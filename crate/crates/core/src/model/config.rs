//! Declarative architecture description and its `key = value` text form.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Which intermediate features feed the information pool.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolMode {
    /// Head features, the first block of bunches 2..=F and the second block
    /// of bunch F, where F is the number of extractor bunches.
    Normal,
    /// No pool; latter bunches are fed by their mirrored skip alone.
    None,
    /// Every block output of bunches 1..F-1.
    FormerAll,
}

/// Fraction of basic blocks that keep their leading activation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActivationKeep {
    /// First and last block only.
    Rare,
    Third,
    Half,
    TwoThirds,
    All,
}

impl ActivationKeep {
    /// Whether basic block `index` (0-based, over the whole body) keeps its
    /// leading activation.
    pub fn keeps(self, index: usize, total: usize) -> bool {
        match self {
            ActivationKeep::Rare => index == 0 || index + 1 == total,
            ActivationKeep::Third => index % 3 == 0,
            ActivationKeep::Half => index % 2 == 0,
            ActivationKeep::TwoThirds => index % 3 != 2,
            ActivationKeep::All => true,
        }
    }
}

macro_rules! text_enum {
    ($ty:ty { $($variant:path => $text:literal),+ $(,)? }) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($variant => $text),+ })
            }
        }

        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok($variant),)+
                    other => Err(Error::config(format!(
                        "unknown {} value {other:?}", stringify!($ty)
                    ))),
                }
            }
        }
    };
}

text_enum!(PoolMode {
    PoolMode::Normal => "normal",
    PoolMode::None => "none",
    PoolMode::FormerAll => "former_all",
});

text_enum!(ActivationKeep {
    ActivationKeep::Rare => "rare",
    ActivationKeep::Third => "third",
    ActivationKeep::Half => "half",
    ActivationKeep::TwoThirds => "two_thirds",
    ActivationKeep::All => "all",
});

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockKind {
    BasicResidual,
    InvertedResidual,
}

/// Resolved description of one body block.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlockSpec {
    pub kind: BlockKind,
    pub channels: usize,
    /// Leading activation of a basic block. Inverted blocks always apply
    /// their two inner activations.
    pub activation: bool,
    /// Middle width multiplier of an inverted block.
    pub expansion: usize,
}

/// A feature map the information pool concatenates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Tap {
    Head,
    Block { bunch: usize, block: usize },
}

/// DIV2K RGB channel means on a `[0, 1]` scale.
pub const DIV2K_RGB_MEAN: [f64; 3] = [0.4488, 0.4371, 0.4040];

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub n_feats: usize,
    pub scale: usize,
    pub n_bunches: usize,
    pub blocks_per_bunch: Vec<usize>,
    pub pool_mode: PoolMode,
    pub residual_scale: f64,
    pub compress_set: BTreeSet<usize>,
    pub expansion: usize,
    pub activation_keep: ActivationKeep,
    pub out_channels: usize,
    /// Weight of the information pool in the latter-bunch fusion.
    pub pool_weight: f64,
    /// Weight of the mirrored skip in the latter-bunch fusion.
    pub skip_weight: f64,
    /// 3x3 convolution closing the body before the global residual.
    pub body_conv: bool,
    /// Subtract the dataset mean on input and add it back on output.
    pub mean_shift: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_feats: 16,
            scale: 4,
            n_bunches: 9,
            blocks_per_bunch: vec![3, 3, 3, 3, 3, 3, 3, 3, 2],
            pool_mode: PoolMode::Normal,
            residual_scale: 1.0,
            compress_set: BTreeSet::new(),
            expansion: 2,
            activation_keep: ActivationKeep::Half,
            out_channels: 3,
            pool_weight: 0.5,
            skip_weight: 0.5,
            body_conv: true,
            mean_shift: true,
        }
    }
}

const KEYS: &[&str] = &[
    "n_feats",
    "scale",
    "n_bunches",
    "blocks_per_bunch",
    "pool_mode",
    "residual_scale",
    "compress_set",
    "expansion",
    "activation_keep",
    "out_channels",
    "pool_weight",
    "skip_weight",
    "body_conv",
    "mean_shift",
];

impl ModelConfig {
    /// Default 26-block layout at width `n_feats`.
    pub fn with_width(n_feats: usize) -> Self {
        ModelConfig {
            n_feats,
            ..Default::default()
        }
    }

    /// Shallow variant: six bunches of two blocks (twelve basic blocks).
    pub fn depth_variant(n_feats: usize) -> Self {
        ModelConfig {
            n_feats,
            n_bunches: 6,
            blocks_per_bunch: vec![2; 6],
            ..Default::default()
        }
    }

    /// Replaces every body block with an inverted residual.
    pub fn fully_compressed(mut self, expansion: usize) -> Self {
        self.compress_set = (0..self.total_blocks()).collect();
        self.expansion = expansion;
        self
    }

    pub fn total_blocks(&self) -> usize {
        self.blocks_per_bunch.iter().sum()
    }

    /// Number of leading bunches acting as pool sources.
    pub fn extractor_bunches(&self) -> usize {
        self.n_bunches - self.n_bunches / 2
    }

    /// Former bunch whose output is the skip input of latter bunch `j`.
    pub fn mirror_of(&self, j: usize) -> Option<usize> {
        let f = self.extractor_bunches();
        (j >= f && j < self.n_bunches).then(|| 2 * f - 1 - j)
    }

    /// Upsampling stages of the tail as pixel-shuffle factors.
    pub fn upsample_factors(&self) -> Result<Vec<usize>> {
        match self.scale {
            3 => Ok(vec![3]),
            s if s >= 2 && s.is_power_of_two() => Ok(vec![2; s.trailing_zeros() as usize]),
            s => Err(Error::config(format!("unsupported scale {s} (use 3 or a power of two)"))),
        }
    }

    pub fn pool_taps(&self) -> Vec<Tap> {
        let f = self.extractor_bunches();
        match self.pool_mode {
            PoolMode::None => vec![],
            PoolMode::Normal => {
                let mut taps = vec![Tap::Head];
                taps.extend((1..f).map(|bunch| Tap::Block { bunch, block: 0 }));
                taps.push(Tap::Block { bunch: f - 1, block: 1 });
                taps
            }
            PoolMode::FormerAll => (0..f.saturating_sub(1))
                .flat_map(|bunch| (0..self.blocks_per_bunch[bunch]).map(move |block| Tap::Block { bunch, block }))
                .collect(),
        }
    }

    /// Block specs grouped by bunch.
    pub fn block_specs(&self) -> Vec<Vec<BlockSpec>> {
        let total = self.total_blocks();
        let mut index = 0;
        self.blocks_per_bunch
            .iter()
            .map(|&count| {
                (0..count)
                    .map(|_| {
                        let compressed = self.compress_set.contains(&index);
                        let spec = BlockSpec {
                            kind: if compressed {
                                BlockKind::InvertedResidual
                            } else {
                                BlockKind::BasicResidual
                            },
                            channels: self.n_feats,
                            activation: !compressed && self.activation_keep.keeps(index, total),
                            expansion: self.expansion,
                        };
                        index += 1;
                        spec
                    })
                    .collect()
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_feats == 0 {
            return fail("n_feats must be positive".into());
        }
        if self.out_channels == 0 {
            return fail("out_channels must be positive".into());
        }
        if self.mean_shift && self.out_channels != 3 {
            return fail("mean_shift requires out_channels = 3".into());
        }
        self.upsample_factors()?;
        if self.n_bunches == 0 || self.blocks_per_bunch.len() != self.n_bunches {
            return fail(format!(
                "blocks_per_bunch lists {} bunches but n_bunches = {}",
                self.blocks_per_bunch.len(),
                self.n_bunches
            ));
        }
        if let Some(&bad) = self.blocks_per_bunch.iter().find(|&&b| !(1..=3).contains(&b)) {
            return fail(format!("a bunch holds 1 to 3 blocks, got {bad}"));
        }
        if let Some(&bad) = self.compress_set.iter().find(|&&i| i >= self.total_blocks()) {
            return fail(format!(
                "compress_set index {bad} out of range for {} blocks",
                self.total_blocks()
            ));
        }
        if self.expansion == 0 {
            return fail("expansion must be positive".into());
        }
        if !self.residual_scale.is_finite() || !self.pool_weight.is_finite() || !self.skip_weight.is_finite() {
            return fail("residual_scale, pool_weight and skip_weight must be finite".into());
        }
        let f = self.extractor_bunches();
        match self.pool_mode {
            PoolMode::Normal if self.blocks_per_bunch[f - 1] < 2 => {
                return fail(format!("pool_mode normal taps the second block of bunch {f}, which has only one"));
            }
            PoolMode::FormerAll if f < 2 => {
                return fail("pool_mode former_all needs at least two extractor bunches".into());
            }
            _ => {}
        }
        for tap in self.pool_taps() {
            if let Tap::Block { bunch, .. } = tap {
                if bunch >= f {
                    return fail(format!("pool tap in bunch {} is outside the extractor half", bunch + 1));
                }
            }
        }
        Ok(())
    }

    /// Serialises to the `key = value` text format.
    pub fn to_text(&self) -> String {
        let join = |it: &mut dyn Iterator<Item = usize>| it.map(|v| v.to_string()).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        let mut line = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        line("n_feats", self.n_feats.to_string());
        line("scale", self.scale.to_string());
        line("n_bunches", self.n_bunches.to_string());
        line("blocks_per_bunch", join(&mut self.blocks_per_bunch.iter().copied()));
        line("pool_mode", self.pool_mode.to_string());
        line("residual_scale", format!("{:?}", self.residual_scale));
        line("compress_set", join(&mut self.compress_set.iter().copied()));
        line("expansion", self.expansion.to_string());
        line("activation_keep", self.activation_keep.to_string());
        line("out_channels", self.out_channels.to_string());
        line("pool_weight", format!("{:?}", self.pool_weight));
        line("skip_weight", format!("{:?}", self.skip_weight));
        line("body_conv", self.body_conv.to_string());
        line("mean_shift", self.mean_shift.to_string());
        s
    }

    /// Parses the text format. Missing keys keep their defaults; unknown
    /// keys are rejected.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        let mut blocks_given = false;
        let mut compress_all = false;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected `key = value`", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            let ctx = |e: Error| Error::config(format!("line {} ({key}): {e}", lineno + 1));
            match key {
                "n_feats" => cfg.n_feats = parse_num(value).map_err(ctx)?,
                "scale" => cfg.scale = parse_num(value).map_err(ctx)?,
                "n_bunches" => cfg.n_bunches = parse_num(value).map_err(ctx)?,
                "blocks_per_bunch" => {
                    cfg.blocks_per_bunch = parse_list(value).map_err(ctx)?;
                    blocks_given = true;
                }
                "pool_mode" => cfg.pool_mode = value.parse().map_err(ctx)?,
                "residual_scale" => cfg.residual_scale = parse_num(value).map_err(ctx)?,
                "compress_set" => {
                    if value == "all" {
                        compress_all = true;
                    } else {
                        cfg.compress_set = parse_list(value).map_err(ctx)?.into_iter().collect();
                    }
                }
                "expansion" => cfg.expansion = parse_num(value).map_err(ctx)?,
                "activation_keep" => cfg.activation_keep = value.parse().map_err(ctx)?,
                "out_channels" => cfg.out_channels = parse_num(value).map_err(ctx)?,
                "pool_weight" => cfg.pool_weight = parse_num(value).map_err(ctx)?,
                "skip_weight" => cfg.skip_weight = parse_num(value).map_err(ctx)?,
                "body_conv" => cfg.body_conv = parse_num(value).map_err(ctx)?,
                "mean_shift" => cfg.mean_shift = parse_num(value).map_err(ctx)?,
                other => {
                    return Err(Error::config(format!(
                        "line {}: unknown key {other:?} (known: {})",
                        lineno + 1,
                        KEYS.join(", ")
                    )))
                }
            }
        }
        if !blocks_given && cfg.n_bunches != cfg.blocks_per_bunch.len() {
            // a bare n_bunches gets full bunches with the last one short
            let mut layout = vec![3; cfg.n_bunches];
            if let Some(last) = layout.last_mut() {
                *last = 2;
            }
            cfg.blocks_per_bunch = layout;
        }
        if compress_all {
            cfg.compress_set = (0..cfg.total_blocks()).collect();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_num<V: FromStr>(s: &str) -> Result<V> {
    s.parse().map_err(|_| Error::config(format!("cannot parse {s:?}")))
}

fn parse_list(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(parse_num)
        .collect()
}

impl fmt::Display for ModelConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn default_layout_has_26_blocks_and_six_taps() {
        let cfg = ModelConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.total_blocks(), 26);
        assert_eq!(cfg.extractor_bunches(), 5);
        let taps = cfg.pool_taps();
        assert_eq!(taps.len(), 6);
        assert_eq!(taps[0], Tap::Head);
        assert_eq!(taps[1], Tap::Block { bunch: 1, block: 0 });
        assert_eq!(taps[5], Tap::Block { bunch: 4, block: 1 });
        let mirrors: Vec<_> = (5..9).map(|j| cfg.mirror_of(j).unwrap() + 1).collect();
        assert_eq!(mirrors, vec![5, 4, 3, 2]);
        assert_eq!(cfg.mirror_of(2), None);
    }

    #[test]
    fn activation_ratios() {
        let count = |k: ActivationKeep| (0..26).filter(|&i| k.keeps(i, 26)).count();
        assert_eq!(count(ActivationKeep::Rare), 2);
        assert_eq!(count(ActivationKeep::Third), 9);
        assert_eq!(count(ActivationKeep::Half), 13);
        assert_eq!(count(ActivationKeep::TwoThirds), 18);
        assert_eq!(count(ActivationKeep::All), 26);
    }

    #[test]
    fn parse_with_comments_and_all() {
        let cfg = ModelConfig::parse("# width\nn_feats = 32  # beta\ncompress_set = all\nactivation_keep = rare\n").unwrap();
        assert_eq!(cfg.n_feats, 32);
        assert_eq!(cfg.compress_set.len(), 26);
        assert_eq!(cfg.activation_keep, ActivationKeep::Rare);
    }

    #[test]
    fn parse_errors() {
        assert!(ModelConfig::parse("bogus = 1").is_err());
        assert!(ModelConfig::parse("n_feats").is_err());
        assert!(ModelConfig::parse("pool_mode = sometimes").is_err());
        assert!(ModelConfig::parse("compress_set = 26").is_err());
        assert!(ModelConfig::parse("scale = 5").is_err());
        assert!(ModelConfig::parse("n_bunches = 2\nblocks_per_bunch = 3").is_err());
    }

    fn arb_config() -> impl Strategy<Value = ModelConfig> {
        (
            1usize..64,
            prop::sample::select(vec![2usize, 3, 4, 8]),
            prop::collection::vec(2usize..=3, 1..10),
            prop::sample::select(vec![PoolMode::Normal, PoolMode::None, PoolMode::FormerAll]),
            -2.0f64..2.0,
            prop::collection::btree_set(0usize..8, 0..4),
            1usize..5,
            prop::sample::select(vec![
                ActivationKeep::Rare,
                ActivationKeep::Third,
                ActivationKeep::Half,
                ActivationKeep::TwoThirds,
                ActivationKeep::All,
            ]),
            (any::<bool>(), any::<bool>(), 0.0f64..1.0, 0.0f64..1.0),
        )
            .prop_map(|(n_feats, scale, layout, pool_mode, residual_scale, compress, expansion, keep, flags)| {
                ModelConfig {
                    n_feats,
                    scale,
                    n_bunches: layout.len(),
                    compress_set: compress.into_iter().filter(|&i| i < layout.iter().sum()).collect(),
                    blocks_per_bunch: layout,
                    pool_mode,
                    residual_scale,
                    expansion,
                    activation_keep: keep,
                    out_channels: 3,
                    body_conv: flags.0,
                    mean_shift: flags.1,
                    pool_weight: flags.2,
                    skip_weight: flags.3,
                }
            })
            .prop_filter("valid", |c| c.validate().is_ok())
    }

    proptest! {
        #[test]
        fn text_round_trip(cfg in arb_config()) {
            let back = ModelConfig::parse(&cfg.to_text()).unwrap();
            prop_assert_eq!(back, cfg);
        }
    }
}
