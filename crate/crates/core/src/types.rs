//! Shared domain types: feature grids, token sequences and boxes.
//!
//! Grids are stored channel-first as `(batch, C, H, W)` tensors so they can
//! feed convolutions directly; token sequences are `(batch, n, d)` with the
//! token index running row-major over the grid they came from.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};

/// Spatial layout a token sequence was flattened from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridShape {
    pub h: usize,
    pub w: usize,
}

impl GridShape {
    pub fn new(h: usize, w: usize) -> Self {
        Self { h, w }
    }

    pub fn square(side: usize) -> Self {
        Self { h: side, w: side }
    }

    pub fn cells(&self) -> usize {
        self.h * self.w
    }

    pub fn is_square(&self) -> bool {
        self.h == self.w
    }
}

/// A batch of `H x W x C` feature maps.
#[derive(Debug, Clone)]
pub struct FeatureGrid {
    tensor: Tensor,
}

impl FeatureGrid {
    /// Wraps a `(batch, C, H, W)` tensor.
    pub fn new(tensor: Tensor) -> Result<Self> {
        let dims = tensor.dims();
        if dims.len() != 4 || dims.iter().any(|&d| d == 0) {
            return Err(contract!(
                "feature grid must be a non-empty (batch, C, H, W) tensor, got {dims:?}"
            ));
        }
        Ok(Self { tensor })
    }

    /// Builds a single-sample grid from row-major `H x W x C` data.
    pub fn from_hwc(
        data: &[f64],
        h: usize,
        w: usize,
        c: usize,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        if h == 0 || w == 0 || c == 0 {
            return Err(contract!("grid dimensions must be positive, got {h}x{w}x{c}"));
        }
        if data.len() != h * w * c {
            return Err(contract!(
                "expected {} values for a {h}x{w}x{c} grid, got {}",
                h * w * c,
                data.len()
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(contract!("feature grid contains non-finite values"));
        }
        let t = Tensor::from_slice(data, (h, w, c), device)?
            .permute((2, 0, 1))?
            .unsqueeze(0)?
            .to_dtype(dtype)?
            .contiguous()?;
        Self::new(t)
    }

    /// Row-major `H x W x C` values of one batch element.
    pub fn to_hwc(&self, index: usize) -> Result<Vec<f64>> {
        let t = self
            .tensor
            .get(index)?
            .permute((1, 2, 0))?
            .to_dtype(DType::F64)?
            .flatten_all()?;
        Ok(t.to_vec1::<f64>()?)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor {
        self.tensor
    }

    pub fn batch(&self) -> usize {
        self.tensor.dims()[0]
    }

    pub fn channels(&self) -> usize {
        self.tensor.dims()[1]
    }

    pub fn height(&self) -> usize {
        self.tensor.dims()[2]
    }

    pub fn width(&self) -> usize {
        self.tensor.dims()[3]
    }

    pub fn grid_shape(&self) -> GridShape {
        GridShape::new(self.height(), self.width())
    }

    /// Row-major flatten to `(batch, H*W, C)` tokens, recording the grid.
    pub fn flatten(&self) -> Result<TokenSequence> {
        let (b, c, h, w) = self.tensor.dims4()?;
        let t = self
            .tensor
            .reshape((b, c, h * w))?
            .transpose(1, 2)?
            .contiguous()?;
        TokenSequence::with_grid(t, GridShape::new(h, w))
    }
}

/// A batch of `n x d` token sequences.
#[derive(Debug, Clone)]
pub struct TokenSequence {
    tensor: Tensor,
    grid: Option<GridShape>,
}

impl TokenSequence {
    /// Wraps a `(batch, n, d)` tensor with no grid provenance.
    pub fn new(tensor: Tensor) -> Result<Self> {
        let dims = tensor.dims();
        if dims.len() != 3 || dims.iter().any(|&d| d == 0) {
            return Err(contract!(
                "token sequence must be a non-empty (batch, n, d) tensor, got {dims:?}"
            ));
        }
        Ok(Self { tensor, grid: None })
    }

    pub fn with_grid(tensor: Tensor, grid: GridShape) -> Result<Self> {
        let seq = Self::new(tensor)?;
        if grid.cells() != seq.len() {
            return Err(contract!(
                "grid {}x{} does not cover {} tokens",
                grid.h,
                grid.w,
                seq.len()
            ));
        }
        Ok(Self {
            grid: Some(grid),
            ..seq
        })
    }

    /// Builds a single-sample sequence from row-major `n x d` data.
    pub fn from_rows(
        data: &[f64],
        n: usize,
        d: usize,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        if data.len() != n * d {
            return Err(contract!(
                "expected {} values for {n}x{d} tokens, got {}",
                n * d,
                data.len()
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(contract!("token sequence contains non-finite values"));
        }
        let t = Tensor::from_slice(data, (1, n, d), device)?.to_dtype(dtype)?;
        Self::new(t)
    }

    /// Row-major `n x d` values of one batch element.
    pub fn to_rows(&self, index: usize) -> Result<Vec<f64>> {
        let t = self
            .tensor
            .get(index)?
            .to_dtype(DType::F64)?
            .flatten_all()?;
        Ok(t.to_vec1::<f64>()?)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor {
        self.tensor
    }

    pub fn grid(&self) -> Option<GridShape> {
        self.grid
    }

    /// Same grid provenance, new data (used after row-wise transforms).
    pub fn map_tensor(&self, tensor: Tensor) -> Result<Self> {
        match self.grid {
            Some(g) => Self::with_grid(tensor, g),
            None => Self::new(tensor),
        }
    }

    pub fn batch(&self) -> usize {
        self.tensor.dims()[0]
    }

    #[allow(clippy::len_without_is_empty)]
    pub fn len(&self) -> usize {
        self.tensor.dims()[1]
    }

    pub fn width(&self) -> usize {
        self.tensor.dims()[2]
    }

    /// Inverse of [`FeatureGrid::flatten`]. Requires grid provenance.
    pub fn unflatten(&self) -> Result<FeatureGrid> {
        let grid = self
            .grid
            .ok_or_else(|| contract!("cannot unflatten tokens without grid provenance"))?;
        let (b, n, d) = self.tensor.dims3()?;
        debug_assert_eq!(n, grid.cells());
        let t = self
            .tensor
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, d, grid.h, grid.w))?;
        FeatureGrid::new(t)
    }

    /// Unflatten, requiring a square grid as the gates do.
    pub fn unflatten_square(&self) -> Result<FeatureGrid> {
        match self.grid {
            Some(g) if g.is_square() => self.unflatten(),
            Some(g) => Err(contract!(
                "gating needs a square token grid, got {}x{}",
                g.h,
                g.w
            )),
            None => Err(contract!(
                "gating needs a square token grid, got {} tokens without provenance",
                self.len()
            )),
        }
    }
}

/// Coordinate frame a box is expressed in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BoxFrame {
    /// Unit square spanning the search crop.
    NormalizedSearch,
    /// Pixels of the original frame; pixel `i` covers `[i, i + 1)`.
    ImagePixels,
}

/// Axis-aligned box in corner form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub frame: BoxFrame,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64, frame: BoxFrame) -> Result<Self> {
        let b = Self::from_corners(x1, y1, x2, y2, frame);
        if ![x1, y1, x2, y2].iter().all(|v| v.is_finite()) {
            return Err(Error::Data(format!("non-finite box {b:?}")));
        }
        if x1 > x2 || y1 > y2 {
            return Err(Error::Data(format!("box corners out of order: {b:?}")));
        }
        Ok(b)
    }

    /// Corner form without ordering checks (raw head output).
    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64, frame: BoxFrame) -> Self {
        Self {
            x1,
            y1,
            x2,
            y2,
            frame,
        }
    }

    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64, frame: BoxFrame) -> Result<Self> {
        Self::new(x, y, x + w, y + h, frame)
    }

    pub fn pixels_xywh(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        Self::from_xywh(x, y, w, h, BoxFrame::ImagePixels)
    }

    pub fn to_xywh(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2 - self.x1, self.y2 - self.y1]
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    /// Corners swapped into order where needed.
    pub fn sorted(&self) -> Self {
        Self {
            x1: self.x1.min(self.x2),
            y1: self.y1.min(self.y2),
            x2: self.x1.max(self.x2),
            y2: self.y1.max(self.y2),
            frame: self.frame,
        }
    }

    pub fn is_ordered(&self) -> bool {
        self.x1 <= self.x2 && self.y1 <= self.y2
    }

    /// Intersection over union; 0 when either box is unordered or empty.
    pub fn iou(&self, other: &BBox) -> f64 {
        if !self.is_ordered() || !other.is_ordered() {
            return 0.0;
        }
        let iw = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let ih = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        let inter = iw * ih;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}
