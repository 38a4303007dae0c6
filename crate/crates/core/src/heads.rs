//! Per-token classification and box regression heads.

use candle_core::Tensor;
use rand_chacha::ChaCha8Rng;

use crate::attention::Linear;
use crate::error::{contract, Result};
use crate::params::{path, ParamGroup, ParamStore};
use crate::tracker::CropGeometry;
use crate::types::{BBox, BoxFrame, TokenSequence};

pub const HEAD_HIDDEN: usize = 256;

/// Three fully connected layers with ReLU between them.
#[derive(Debug, Clone)]
pub struct HeadParams {
    pub layers: [Linear; 3],
}

impl HeadParams {
    pub fn build(
        store: &mut ParamStore,
        prefix: &str,
        d_in: usize,
        hidden: usize,
        d_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let mut mk = |i: usize, a: usize, b: usize| {
            Linear::build(store, &path(prefix, &format!("fc{i}")), a, b, ParamGroup::Other, rng)
        };
        Ok(Self {
            layers: [mk(1, d_in, hidden)?, mk(2, hidden, hidden)?, mk(3, hidden, d_out)?],
        })
    }

    pub fn d_in(&self) -> usize {
        self.layers[0].d_in()
    }

    pub fn d_out(&self) -> usize {
        self.layers[2].weight.dims()[1]
    }

    fn forward(&self, x: &TokenSequence) -> Result<Tensor> {
        if x.width() != self.d_in() {
            return Err(contract!(
                "head expects width {}, got {}",
                self.d_in(),
                x.width()
            ));
        }
        let h = self.layers[0].forward(x.tensor())?.relu()?;
        let h = self.layers[1].forward(&h)?.relu()?;
        self.layers[2].forward(&h)
    }
}

/// `(batch, n, 2)` logits; index 0 is foreground.
pub fn classify(s_c: &TokenSequence, p: &HeadParams) -> Result<Tensor> {
    if p.d_out() != 2 {
        return Err(contract!("classification head must output 2 logits"));
    }
    p.forward(s_c)
}

/// `(batch, n, 4)` corner boxes `(x1, y1, x2, y2)` in the unit search frame.
pub fn regress(s_p: &TokenSequence, p: &HeadParams) -> Result<Tensor> {
    if p.d_out() != 4 {
        return Err(contract!("regression head must output 4 coordinates"));
    }
    Ok(candle_nn::ops::sigmoid(&p.forward(s_p)?)?)
}

/// Maps a unit-frame box through the crop back into image pixels.
/// Unordered corners are sorted first.
pub fn decode_box(b: &BBox, geometry: &CropGeometry) -> BBox {
    let b = b.sorted();
    let (ox, oy) = geometry.origin();
    let s = geometry.side;
    BBox::from_corners(
        ox + b.x1 * s,
        oy + b.y1 * s,
        ox + b.x2 * s,
        oy + b.y2 * s,
        BoxFrame::ImagePixels,
    )
}

/// Inverse of [`decode_box`].
pub fn encode_box(b: &BBox, geometry: &CropGeometry) -> BBox {
    let (ox, oy) = geometry.origin();
    let s = geometry.side;
    BBox::from_corners(
        (b.x1 - ox) / s,
        (b.y1 - oy) / s,
        (b.x2 - ox) / s,
        (b.y2 - oy) / s,
        BoxFrame::NormalizedSearch,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};
    use rand::{Rng, SeedableRng};

    fn geometry(cx: f64, cy: f64, side: f64) -> CropGeometry {
        CropGeometry {
            center: (cx, cy),
            side,
            out_size: 256,
            pad_fill: [0.0; 3],
        }
    }

    fn zero_head(out: usize) -> HeadParams {
        let mut store = ParamStore::new(DType::F64, &Device::Cpu);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let h = HeadParams::build(&mut store, "h", 4, 8, out, &mut rng).unwrap();
        for (_, v, _) in store.iter() {
            v.set(&v.zeros_like().unwrap()).unwrap();
        }
        h
    }

    #[test]
    fn zero_regressor_centres_every_coordinate() {
        let h = zero_head(4);
        let x = TokenSequence::from_rows(&[1.0; 12], 3, 4, DType::F64, &Device::Cpu).unwrap();
        let b = regress(&x, &h).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(b, vec![0.5; 12]);
    }

    #[test]
    fn zero_classifier_emits_bias_pairs() {
        let h = zero_head(2);
        h.layers[2].bias.set(&Tensor::new(&[0.3f64, -0.2], &Device::Cpu).unwrap()).unwrap();
        let x = TokenSequence::from_rows(&[1.0; 8], 2, 4, DType::F64, &Device::Cpu).unwrap();
        let l = classify(&x, &h).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(l, vec![0.3, -0.2, 0.3, -0.2]);
    }

    #[test]
    fn width_mismatch_rejected() {
        let h = zero_head(2);
        let x = TokenSequence::from_rows(&[1.0; 6], 2, 3, DType::F64, &Device::Cpu).unwrap();
        assert!(matches!(classify(&x, &h), Err(crate::Error::Contract(_))));
        assert!(regress(&TokenSequence::from_rows(&[1.0; 8], 2, 4, DType::F64, &Device::Cpu).unwrap(), &h).is_err());
    }

    #[test]
    fn unit_box_decodes_to_crop() {
        let g = geometry(228.0, 178.0, 256.0);
        let unit = BBox::from_corners(0.0, 0.0, 1.0, 1.0, BoxFrame::NormalizedSearch);
        let d = decode_box(&unit, &g);
        assert_eq!(d.as_array(), [100.0, 50.0, 356.0, 306.0]);
    }

    #[test]
    fn quarter_box_decodes_by_hand() {
        // crop origin (100, 50), 256 px side, unit scale
        let g = geometry(228.0, 178.0, 256.0);
        let b = BBox::from_corners(0.25, 0.25, 0.75, 0.75, BoxFrame::NormalizedSearch);
        assert_eq!(decode_box(&b, &g).as_array(), [164.0, 114.0, 292.0, 242.0]);
    }

    #[test]
    fn decode_sorts_corners() {
        let g = geometry(0.5, 0.5, 1.0);
        let b = BBox::from_corners(0.75, 0.5, 0.25, 0.25, BoxFrame::NormalizedSearch);
        assert_eq!(decode_box(&b, &g).as_array(), [0.25, 0.25, 0.75, 0.5]);
    }

    #[test]
    fn encode_decode_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let g = geometry(rng.random_range(0.0..500.0), rng.random_range(0.0..500.0), rng.random_range(20.0..400.0));
            let (ox, oy) = g.origin();
            let x1 = ox + rng.random_range(0.0..0.5) * g.side;
            let y1 = oy + rng.random_range(0.0..0.5) * g.side;
            let b = BBox::new(x1, y1, x1 + rng.random_range(1.0..0.4 * g.side), y1 + rng.random_range(1.0..0.4 * g.side), BoxFrame::ImagePixels).unwrap();
            let r = decode_box(&encode_box(&b, &g), &g);
            for (a, e) in r.as_array().iter().zip(b.as_array()) {
                assert!((a - e).abs() < 0.5);
            }
        }
    }
}
