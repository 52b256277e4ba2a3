use super::layers::{Conv, Mode};
use super::Parameters;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Conv2dSpec, Tensor};

/// Architecture of the segmentation network.
#[derive(Clone, Debug, PartialEq)]
pub struct SegConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    /// Output channels of the four encoder blocks.
    pub widths: [usize; 4],
    pub dropout: f64,
}

impl Default for SegConfig {
    fn default() -> Self {
        SegConfig {
            in_channels: 3,
            num_classes: 5,
            widths: [16, 32, 64, 64],
            dropout: 0.1,
        }
    }
}

impl SegConfig {
    /// Blocks 1 and 2 halve the resolution.
    pub const TOTAL_STRIDE: usize = 4;

    /// Canonical text form, hashed into checkpoints.
    pub fn describe(&self) -> String {
        format!(
            "seg:in={};classes={};widths={},{},{},{};dropout={}",
            self.in_channels,
            self.num_classes,
            self.widths[0],
            self.widths[1],
            self.widths[2],
            self.widths[3],
            self.dropout
        )
    }
}

/// Per-pixel class distributions of both heads, `[N, C, H, W]`, at input
/// resolution.
#[derive(Clone, Debug)]
pub struct SegOutput {
    pub aux: Tensor,
    pub primary: Tensor,
}

/// Shared four-block encoder with an auxiliary classifier after block 3 and
/// the primary classifier after block 4.
#[derive(Clone, Debug)]
pub struct SegModel {
    pub config: SegConfig,
    pub encoder: [Conv; 4],
    pub aux_head: Conv,
    pub primary_head: Conv,
}

impl SegModel {
    pub fn new(config: SegConfig, seed: u64) -> Result<Self> {
        if config.num_classes < 2 || config.num_classes > 256 {
            return Err(Error::Config(format!("num_classes {} outside [2, 256]", config.num_classes)));
        }
        let mut r = rng::seeded(seed, rng::stream::INIT);
        let w = config.widths;
        let s2 = Conv2dSpec::new(2, 1);
        let s1 = Conv2dSpec::new(1, 1);
        let encoder = [
            Conv::he(&mut r, config.in_channels, w[0], 3, s2)?,
            Conv::he(&mut r, w[0], w[1], 3, s2)?,
            Conv::he(&mut r, w[1], w[2], 3, s1)?,
            Conv::he(&mut r, w[2], w[3], 3, s1)?,
        ];
        let head = Conv2dSpec::new(1, 0);
        let aux_head = Conv::init(&mut r, w[2], config.num_classes, 1, head, 0.01)?;
        let primary_head = Conv::init(&mut r, w[3], config.num_classes, 1, head, 0.01)?;
        Ok(SegModel {
            config,
            encoder,
            aux_head,
            primary_head,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    fn check_input(&self, images: &Tensor) -> Result<()> {
        let s = images.shape();
        if s.len() != 4 || s[1] != self.config.in_channels {
            return Err(Error::shape(
                "seg_forward",
                format!("expected [N, {}, H, W], got {s:?}", self.config.in_channels),
            ));
        }
        let k = SegConfig::TOTAL_STRIDE;
        if s[2] % k != 0 || s[3] % k != 0 || s[2] == 0 || s[3] == 0 {
            return Err(Error::shape(
                "seg_forward",
                format!("spatial size {}x{} is not a positive multiple of {k}", s[2], s[3]),
            ));
        }
        Ok(())
    }

    fn head(&self, conv: &Conv, features: &Tensor, mode: &mut Mode<'_>) -> Result<Tensor> {
        let x = mode.dropout(features, self.config.dropout)?;
        conv.forward(&x)?
            .softmax(1)?
            .upsample_nearest(SegConfig::TOTAL_STRIDE)
    }

    /// Batched forward pass over `[N, C_in, H, W]` images.
    pub fn forward(&self, images: &Tensor, mut mode: Mode<'_>) -> Result<SegOutput> {
        self.check_input(images)?;
        let mut x = images.clone();
        let mut mid = None;
        for (i, block) in self.encoder.iter().enumerate() {
            x = block.forward(&x)?.relu();
            if i == 2 {
                mid = Some(x.clone());
            }
        }
        let mid = mid.expect("encoder has four blocks");
        let aux = self.head(&self.aux_head, &mid, &mut mode)?;
        let primary = self.head(&self.primary_head, &x, &mut mode)?;
        Ok(SegOutput { aux, primary })
    }

    /// Single-image forward: `[C_in, H, W]` in, two `[C, H, W]` maps out.
    pub fn seg_forward(&self, image: &Tensor, mode: Mode<'_>) -> Result<(Tensor, Tensor)> {
        let s = image.shape();
        if s.len() != 3 {
            return Err(Error::shape("seg_forward", format!("expected [C, H, W], got {s:?}")));
        }
        let out = self.forward(&image.reshape(&[1, s[0], s[1], s[2]])?, mode)?;
        let c = self.config.num_classes;
        Ok((
            out.aux.reshape(&[c, s[1], s[2]])?,
            out.primary.reshape(&[c, s[1], s[2]])?,
        ))
    }

    /// Parameters of the shared encoder only.
    pub fn encoder_parameters(&self) -> Vec<Tensor> {
        self.encoder
            .iter()
            .flat_map(|c| [c.weight.clone(), c.bias.clone()])
            .collect()
    }
}

impl Parameters for SegModel {
    fn named_parameters(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (i, c) in self.encoder.iter().enumerate() {
            c.push_named(&format!("encoder.{i}"), &mut out);
        }
        self.aux_head.push_named("aux_head", &mut out);
        self.primary_head.push_named("primary_head", &mut out);
        out
    }
}
