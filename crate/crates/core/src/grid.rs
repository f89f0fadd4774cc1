use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Dimensions of a latent grid. One pixel is one image token.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl GridShape {
    pub const fn new(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
        }
    }

    /// Number of image tokens, `H·W`.
    pub fn tokens(&self) -> usize {
        self.height * self.width
    }

    pub fn len(&self) -> usize {
        self.tokens() * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.height, self.width, self.channels]
    }

    pub fn index(&self, row: usize, col: usize, channel: usize) -> usize {
        (row * self.width + col) * self.channels + channel
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.channels == 0 {
            return Err(Error::InvalidConfig(format!("grid {self:?} has a zero dimension")));
        }
        Ok(())
    }

    pub fn check(&self, grid: &Tensor) -> Result<()> {
        if grid.shape() != self.dims() {
            return Err(shape_err(
                "grid",
                format!("expected {:?}, got {:?}", self.dims(), grid.shape()),
            ));
        }
        Ok(())
    }

    /// Flattens a `[H, W, C]` grid into `[H·W, C]` token rows.
    pub fn to_tokens(&self, grid: &Tensor) -> Result<Tensor> {
        self.check(grid)?;
        grid.reshape([self.tokens(), self.channels])
    }

    pub fn from_tokens(&self, tokens: &Tensor) -> Result<Tensor> {
        tokens.reshape(self.dims())
    }
}

impl Default for GridShape {
    fn default() -> Self {
        Self::new(8, 8, 3)
    }
}
