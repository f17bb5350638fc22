//! Right-angle rotations and flips applied identically to image and mask.

use rand::Rng;

use crate::data::{Mask, SampleRecord};
use crate::error::Result;
use crate::numeric::{Scalar, Tensor};

/// Rotate by `quarter_turns · 90°` counter-clockwise, then optionally flip
/// left-right and top-bottom.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct Transform {
    pub quarter_turns: u8,
    pub flip_horizontal: bool,
    pub flip_vertical: bool,
}

impl Transform {
    pub fn draw<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Transform {
            quarter_turns: rng.random_range(0..4),
            flip_horizontal: rng.random_bool(0.5),
            flip_vertical: rng.random_bool(0.5),
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == Transform::default()
    }

    /// Output `(H', W')` for an input of `(h, w)`.
    pub fn output_dims(&self, (h, w): (usize, usize)) -> (usize, usize) {
        if self.quarter_turns % 2 == 1 {
            (w, h)
        } else {
            (h, w)
        }
    }

    // Source (y, x) for output (oy, ox).
    fn source(&self, (h, w): (usize, usize), (mut oy, mut ox): (usize, usize)) -> (usize, usize) {
        let (oh, ow) = self.output_dims((h, w));
        if self.flip_vertical {
            oy = oh - 1 - oy;
        }
        if self.flip_horizontal {
            ox = ow - 1 - ox;
        }
        match self.quarter_turns % 4 {
            0 => (oy, ox),
            1 => (ox, w - 1 - oy),
            2 => (h - 1 - oy, w - 1 - ox),
            _ => (h - 1 - ox, oy),
        }
    }

    fn index_map(&self, dims: (usize, usize)) -> Vec<usize> {
        let (oh, ow) = self.output_dims(dims);
        (0..oh * ow)
            .map(|o| {
                let (y, x) = self.source(dims, (o / ow, o % ow));
                y * dims.1 + x
            })
            .collect()
    }

    /// Apply to every plane of a `(c, h, w)` tensor.
    pub fn apply_planes<F: Scalar>(&self, t: &Tensor<F>) -> Result<Tensor<F>> {
        let s = t.shape();
        let (c, h, w) = (s[0], s[1], s[2]);
        let map = self.index_map((h, w));
        let (oh, ow) = self.output_dims((h, w));
        let d = t.data();
        Tensor::new(
            [c, oh, ow],
            (0..c)
                .flat_map(|ch| map.iter().map(move |&i| d[ch * h * w + i]))
                .collect(),
        )
    }

    pub fn apply_mask(&self, m: &Mask) -> Result<Mask> {
        let dims = (m.height(), m.width());
        let (oh, ow) = self.output_dims(dims);
        Mask::new(
            oh,
            ow,
            self.index_map(dims)
                .into_iter()
                .map(|i| m.data()[i])
                .collect(),
        )
    }

    pub fn apply(&self, sample: &SampleRecord) -> Result<SampleRecord> {
        Ok(SampleRecord {
            id: sample.id.clone(),
            image: self.apply_planes(&sample.image)?,
            mask: self.apply_mask(&sample.mask)?,
            source: sample.source.clone(),
        })
    }
}

/// Draw a transform from `rng` and apply it to image and mask alike.
pub fn augment<R: Rng + ?Sized>(sample: &SampleRecord, rng: &mut R) -> Result<SampleRecord> {
    Transform::draw(rng).apply(sample)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quarter_turn_of_small_mask() {
        // 2×3 mask with a single pixel at (0, 2) lands at (0, 0) after a
        // counter-clockwise quarter turn.
        let m = Mask::from_fn(2, 3, |y, x| (y, x) == (0, 2));
        let t = Transform {
            quarter_turns: 1,
            ..Default::default()
        };
        let r = t.apply_mask(&m).unwrap();
        assert_eq!((r.height(), r.width()), (3, 2));
        assert!(r.get(0, 0));
        assert_eq!(r.positives(), 1);
    }

    #[test]
    fn four_quarter_turns_compose_to_identity() {
        let m = Mask::from_fn(3, 5, |y, x| (y * 5 + x) % 3 == 0);
        let t = Transform {
            quarter_turns: 1,
            ..Default::default()
        };
        let mut r = m.clone();
        for _ in 0..4 {
            r = t.apply_mask(&r).unwrap();
        }
        assert_eq!(r, m);
    }
}
