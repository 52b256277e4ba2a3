use super::layers::Conv;
use super::Parameters;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Conv2dSpec, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct DiscConfig {
    pub num_classes: usize,
    pub widths: [usize; 3],
    /// 1: a single stride-4 score map; 2: stride-4 and stride-8 maps.
    pub scale_count: usize,
    pub leak: f32,
}

impl Default for DiscConfig {
    fn default() -> Self {
        DiscConfig {
            num_classes: 5,
            widths: [16, 32, 32],
            scale_count: 2,
            leak: 0.2,
        }
    }
}

impl DiscConfig {
    pub fn describe(&self) -> String {
        format!(
            "disc:classes={};widths={},{},{};scales={};leak={}",
            self.num_classes, self.widths[0], self.widths[1], self.widths[2], self.scale_count, self.leak
        )
    }
}

/// Patch discriminator over class-probability maps. Each scale ends in a
/// sigmoid, so every score lies in (0, 1).
#[derive(Clone, Debug)]
pub struct Discriminator {
    pub config: DiscConfig,
    pub trunk: [Conv; 2],
    pub score4: Conv,
    pub down8: Option<Conv>,
    pub score8: Option<Conv>,
}

impl Discriminator {
    pub fn new(config: DiscConfig, seed: u64) -> Result<Self> {
        if !(1..=2).contains(&config.scale_count) {
            return Err(Error::Config(format!("scale_count must be 1 or 2, got {}", config.scale_count)));
        }
        let mut r = rng::seeded(seed, rng::stream::INIT);
        let [w0, w1, w2] = config.widths;
        let down = Conv2dSpec::new(2, 1);
        let same = Conv2dSpec::new(1, 1);
        let trunk = [
            Conv::he(&mut r, config.num_classes, w0, 3, down)?,
            Conv::he(&mut r, w0, w1, 3, down)?,
        ];
        let score4 = Conv::he(&mut r, w1, 1, 3, same)?;
        let (down8, score8) = if config.scale_count == 2 {
            (
                Some(Conv::he(&mut r, w1, w2, 3, down)?),
                Some(Conv::he(&mut r, w2, 1, 3, same)?),
            )
        } else {
            (None, None)
        };
        Ok(Discriminator {
            config,
            trunk,
            score4,
            down8,
            score8,
        })
    }

    /// Strides of the returned score maps relative to the input.
    pub fn strides(&self) -> Vec<usize> {
        if self.config.scale_count == 2 {
            vec![4, 8]
        } else {
            vec![4]
        }
    }

    /// Score maps for `[N, C, H, W]` probability maps, finest first.
    pub fn forward(&self, probs: &Tensor) -> Result<Vec<Tensor>> {
        let s = probs.shape();
        if s.len() != 4 || s[1] != self.config.num_classes {
            return Err(Error::shape(
                "disc_forward",
                format!("expected [N, {}, H, W], got {s:?}", self.config.num_classes),
            ));
        }
        let leak = self.config.leak;
        let mut x = probs.clone();
        for conv in &self.trunk {
            x = conv.forward(&x)?.leaky_relu(leak);
        }
        let mut out = vec![self.score4.forward(&x)?.sigmoid()];
        if let (Some(down), Some(score)) = (&self.down8, &self.score8) {
            let y = down.forward(&x)?.leaky_relu(leak);
            out.push(score.forward(&y)?.sigmoid());
        }
        Ok(out)
    }
}

impl Parameters for Discriminator {
    fn named_parameters(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (i, c) in self.trunk.iter().enumerate() {
            c.push_named(&format!("trunk.{i}"), &mut out);
        }
        self.score4.push_named("score4", &mut out);
        if let Some(c) = &self.down8 {
            c.push_named("down8", &mut out);
        }
        if let Some(c) = &self.score8 {
            c.push_named("score8", &mut out);
        }
        out
    }
}
