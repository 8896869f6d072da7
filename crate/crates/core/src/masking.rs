//! Complementary channel masks, constant over each (subsegment, channel) cell.

use ndarray::{Array2, ArrayView2};
use rand::seq::index::sample;
use rand::SeedableRng;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::signal::EpochMatrix;

/// Which of the two complementary inputs a mask describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MaskSide {
    /// `M`: the floor(C/2) selected channels of each subsegment.
    Hat,
    /// `1 - M`: the remaining channels.
    Bar,
}

impl MaskSide {
    pub fn other(self) -> Self {
        match self {
            MaskSide::Hat => MaskSide::Bar,
            MaskSide::Bar => MaskSide::Hat,
        }
    }
}

/// Compact mask pair: `selected[[i, c]]` is true when channel `c` of
/// subsegment `i` belongs to `M`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPair {
    selected: Array2<bool>,
}

impl MaskPair {
    pub fn from_selection(selected: Array2<bool>) -> Result<Self> {
        let (n_patch, c) = selected.dim();
        if c < 2 {
            return Err(Error::TooFewChannels(c));
        }
        if n_patch < 2 {
            return Err(Error::TooFewPatches(n_patch));
        }
        Ok(Self { selected })
    }

    pub fn n_patch(&self) -> usize {
        self.selected.nrows()
    }

    pub fn channels(&self) -> usize {
        self.selected.ncols()
    }

    /// Same pair with the roles of `M` and `1 - M` exchanged.
    pub fn swapped(&self) -> Self {
        Self { selected: self.selected.mapv(|b| !b) }
    }

    /// Per-cell visibility `(n_patch, C)` of one side.
    pub fn visible(&self, side: MaskSide) -> Array2<bool> {
        match side {
            MaskSide::Hat => self.selected.clone(),
            MaskSide::Bar => self.selected.mapv(|b| !b),
        }
    }

    /// Full-resolution binary matrix `(C, n_patch * l_prime)` for one side.
    pub fn expand<F: Scalar>(&self, side: MaskSide, l_prime: usize) -> Array2<F> {
        let vis = self.visible(side);
        let (n_patch, c) = vis.dim();
        Array2::from_shape_fn((c, n_patch * l_prime), |(ch, t)| {
            if vis[[t / l_prime, ch]] {
                F::one()
            } else {
                F::zero()
            }
        })
    }
}

/// Draws a uniform floor(C/2)-subset of channels for every subsegment,
/// independently, from a generator seeded with `seed`.
pub fn generate_mask_pair(c: usize, n_patch: usize, seed: u64) -> Result<MaskPair> {
    let mut rng = Rng::seed_from_u64(seed);
    generate_mask_pair_with(c, n_patch, &mut rng)
}

pub fn generate_mask_pair_with(c: usize, n_patch: usize, rng: &mut Rng) -> Result<MaskPair> {
    if c < 2 {
        return Err(Error::TooFewChannels(c));
    }
    if n_patch < 2 {
        return Err(Error::TooFewPatches(n_patch));
    }
    let k = c / 2;
    let mut selected = Array2::from_elem((n_patch, c), false);
    for mut row in selected.outer_iter_mut() {
        for ch in sample(rng, c, k).iter() {
            row[ch] = true;
        }
    }
    Ok(MaskPair { selected })
}

/// Elementwise product `mask * X`.
pub fn apply_mask<F: Scalar>(epoch: &EpochMatrix<F>, mask: ArrayView2<F>) -> Result<EpochMatrix<F>> {
    if mask.dim() != epoch.data().dim() {
        return Err(Error::DimensionMismatch(format!(
            "mask {:?} vs epoch {:?}",
            mask.dim(),
            epoch.data().dim()
        )));
    }
    let data = epoch.data() * &mask;
    EpochMatrix::new(data, epoch.sampling_hz(), epoch.epoch_seconds())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn five_channels_select_two() {
        let pair = generate_mask_pair(5, 10, 3).unwrap();
        for row in pair.visible(MaskSide::Hat).outer_iter() {
            assert_eq!(row.iter().filter(|b| **b).count(), 2);
        }
        for row in pair.visible(MaskSide::Bar).outer_iter() {
            assert_eq!(row.iter().filter(|b| **b).count(), 3);
        }
    }

    #[test]
    fn two_channels_select_one() {
        let pair = generate_mask_pair(2, 3, 11).unwrap();
        assert_eq!(pair.n_patch(), 3);
        for row in pair.visible(MaskSide::Hat).outer_iter() {
            assert_eq!(row.iter().filter(|b| **b).count(), 1);
        }
    }

    #[test]
    fn rejects_single_channel() {
        assert!(matches!(generate_mask_pair(1, 4, 0), Err(Error::TooFewChannels(1))));
        assert!(matches!(generate_mask_pair(4, 1, 0), Err(Error::TooFewPatches(1))));
    }

    #[test]
    fn apply_examples() {
        let x = EpochMatrix::from_raw(array![[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let ones = Array2::<f64>::ones((2, 2));
        assert_eq!(apply_mask(&x, ones.view()).unwrap(), x);

        let pair = MaskPair { selected: array![[true, false], [true, false]] };
        // Two one-sample subsegments so the pair is valid; channel 0 selected.
        let hat = pair.expand::<f64>(MaskSide::Hat, 1);
        assert_eq!(apply_mask(&x, hat.view()).unwrap().data(), &array![[1.0, 2.0], [0.0, 0.0]]);

        assert!(apply_mask(&x, Array2::<f64>::ones((2, 3)).view()).is_err());
    }

    #[test]
    fn expansion_is_constant_per_cell() {
        let pair = generate_mask_pair(4, 3, 5).unwrap();
        let m = pair.expand::<f32>(MaskSide::Hat, 6);
        let vis = pair.visible(MaskSide::Hat);
        for c in 0..4 {
            for t in 0..18 {
                assert_eq!(m[[c, t]] == 1.0, vis[[t / 6, c]]);
            }
        }
    }
}
