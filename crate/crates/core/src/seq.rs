//! Absorbing-state forward corruption.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::vocab::{TokenId, TokenSeq, Vocab};

/// Lower end of the diffusion-time interval. Samplers draw t from U(T_EPS, 1].
pub const T_EPS: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseSchedule {
    /// alpha(t) = 1 - t
    #[default]
    Linear,
}

impl NoiseSchedule {
    /// Probability that a token survives corruption at time `t`.
    pub fn alpha(self, t: f64) -> Result<f64> {
        if !(t > 0.0 && t <= 1.0) {
            return Err(Error::Domain(format!("diffusion time {t} outside (0, 1]")));
        }
        Ok(match self {
            NoiseSchedule::Linear => 1.0 - t,
        })
    }

    pub fn mask_prob(self, t: f64) -> Result<f64> {
        Ok(1.0 - self.alpha(t)?)
    }
}

/// Draws t ~ U(T_EPS, 1].
pub fn sample_t(rng: &mut RngStream) -> f64 {
    rng.uniform_left_open(T_EPS, 1.0)
}

/// A partially masked sequence x_t. The masked set is derived from the ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskedState {
    pub ids: Vec<TokenId>,
    pub mask_id: TokenId,
}

impl MaskedState {
    pub fn new(ids: Vec<TokenId>, mask_id: TokenId) -> Self {
        Self { ids, mask_id }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn is_masked(&self, pos: usize) -> bool {
        self.ids[pos] == self.mask_id
    }

    pub fn masked_count(&self) -> usize {
        self.ids.iter().filter(|&&t| t == self.mask_id).count()
    }
}

/// Ascending positions holding the mask token.
pub fn masked_positions(state: &MaskedState) -> Vec<usize> {
    state
        .ids
        .iter()
        .enumerate()
        .filter(|(_, &t)| t == state.mask_id)
        .map(|(i, _)| i)
        .collect()
}

/// Masks each position independently with probability 1 - alpha(t).
///
/// One uniform draw is consumed per position, in ascending order.
pub fn corrupt(x0: &TokenSeq, t: f64, sched: NoiseSchedule, vocab: &Vocab, rng: &mut RngStream) -> Result<MaskedState> {
    let p = sched.mask_prob(t)?;
    if x0.ids().contains(&vocab.mask_id) {
        return Err(Error::InvalidInput(
            "clean sequence already contains the mask token".into(),
        ));
    }
    let ids = x0
        .ids()
        .iter()
        .map(|&tok| if rng.uniform() < p { vocab.mask_id } else { tok })
        .collect();
    Ok(MaskedState::new(ids, vocab.mask_id))
}

/// Corrupts only block `block_index` (1-based) of width `block_len`; every
/// other position is left untouched.
pub fn corrupt_block(
    x0: &TokenSeq,
    block_index: usize,
    block_len: usize,
    t: f64,
    sched: NoiseSchedule,
    vocab: &Vocab,
    rng: &mut RngStream,
) -> Result<MaskedState> {
    let p = sched.mask_prob(t)?;
    if block_len == 0 || !x0.len().is_multiple_of(block_len) {
        return Err(Error::Domain(format!(
            "length {} is not divisible into blocks of {block_len}",
            x0.len()
        )));
    }
    let n_blocks = x0.len() / block_len;
    if block_index == 0 || block_index > n_blocks {
        return Err(Error::Domain(format!(
            "block index {block_index} outside 1..={n_blocks}"
        )));
    }
    if x0.ids().contains(&vocab.mask_id) {
        return Err(Error::InvalidInput(
            "clean sequence already contains the mask token".into(),
        ));
    }
    let start = (block_index - 1) * block_len;
    let mut ids = x0.ids().to_vec();
    for tok in &mut ids[start..start + block_len] {
        if rng.uniform() < p {
            *tok = vocab.mask_id;
        }
    }
    Ok(MaskedState::new(ids, vocab.mask_id))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seq(vocab: &Vocab, n: usize, rng: &mut RngStream) -> TokenSeq {
        let content: Vec<TokenId> = vocab.content_ids().collect();
        TokenSeq((0..n).map(|_| content[rng.below(content.len())]).collect())
    }

    #[test]
    fn linear_alpha() {
        let s = NoiseSchedule::Linear;
        assert_eq!(s.alpha(1.0).unwrap(), 0.0);
        assert_eq!(s.alpha(0.25).unwrap(), 0.75);
        assert!(s.alpha(0.2).unwrap() >= s.alpha(0.7).unwrap());
        assert!(s.alpha(0.0).is_err());
        assert!(s.alpha(1.5).is_err());
        assert!(s.alpha(f64::NAN).is_err());
    }

    #[test]
    fn full_and_vanishing_masking() {
        let v = Vocab::shared();
        let mut r = RngStream::new(0, "x0");
        let x0 = seq(&v, 50, &mut r);
        let all = corrupt(&x0, 1.0, NoiseSchedule::Linear, &v, &mut r).unwrap();
        assert_eq!(masked_positions(&all), (0..50).collect::<Vec<_>>());
        let none = corrupt(&x0, 1e-9, NoiseSchedule::Linear, &v, &mut r).unwrap();
        assert_eq!(none.ids, x0.0);
    }

    #[test]
    fn masked_fraction_binomial_bound() {
        let v = Vocab::shared();
        let mut r = RngStream::new(1, "frac");
        let x0 = seq(&v, 10_000, &mut r);
        let s = corrupt(&x0, 0.3, NoiseSchedule::Linear, &v, &mut r).unwrap();
        let frac = s.masked_count() as f64 / 10_000.0;
        let sigma = (0.3f64 * 0.7 / 10_000.0).sqrt();
        assert!((frac - 0.3).abs() <= 3.0 * sigma, "frac {frac}");
    }

    #[test]
    fn rejects_premasked_input() {
        let v = Vocab::shared();
        let x0 = TokenSeq(vec![v.content_ids().next().unwrap(), v.mask_id]);
        let mut r = RngStream::new(0, "c");
        assert!(matches!(
            corrupt(&x0, 0.5, NoiseSchedule::Linear, &v, &mut r),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn block_corruption_contract() {
        let v = Vocab::shared();
        let mut r = RngStream::new(2, "b");
        let x0 = seq(&v, 8, &mut r);
        let s = corrupt_block(&x0, 2, 4, 1.0, NoiseSchedule::Linear, &v, &mut r).unwrap();
        assert_eq!(&s.ids[..4], &x0.0[..4]);
        assert!(s.ids[4..].iter().all(|&t| t == v.mask_id));
        assert!(corrupt_block(&x0, 3, 4, 0.5, NoiseSchedule::Linear, &v, &mut r).is_err());
        assert!(corrupt_block(&x0, 0, 4, 0.5, NoiseSchedule::Linear, &v, &mut r).is_err());
        assert!(corrupt_block(&x0, 1, 3, 0.5, NoiseSchedule::Linear, &v, &mut r).is_err());
    }

    #[test]
    fn block_fraction_and_prefix() {
        let v = Vocab::shared();
        let mut r = RngStream::new(3, "bf");
        let x0 = seq(&v, 2000, &mut r);
        let s = corrupt_block(&x0, 2, 1000, 0.5, NoiseSchedule::Linear, &v, &mut r).unwrap();
        assert_eq!(&s.ids[..1000], &x0.0[..1000]);
        let frac = s.ids[1000..].iter().filter(|&&t| t == v.mask_id).count() as f64 / 1000.0;
        assert!((frac - 0.5).abs() <= 3.0 * (0.25f64 / 1000.0).sqrt());
    }

    #[test]
    fn masked_positions_examples() {
        let m = 1;
        assert!(masked_positions(&MaskedState::new(vec![5, 6, 7], m)).is_empty());
        assert_eq!(masked_positions(&MaskedState::new(vec![m; 3], m)), vec![0, 1, 2]);
        assert_eq!(masked_positions(&MaskedState::new(vec![5, m, 6, m], m)), vec![1, 3]);
    }

    #[test]
    fn expected_mask_count() {
        let v = Vocab::shared();
        let l = 20;
        let t = 0.4;
        let trials = 10_000;
        let mut r = RngStream::new(4, "mean");
        let x0 = seq(&v, l, &mut r);
        let total: usize = (0..trials)
            .map(|_| {
                corrupt(&x0, t, NoiseSchedule::Linear, &v, &mut r)
                    .unwrap()
                    .masked_count()
            })
            .sum();
        let mean = total as f64 / trials as f64;
        let se = (l as f64 * t * (1.0 - t) / trials as f64).sqrt();
        assert!((mean - l as f64 * t).abs() < 4.0 * se);
    }

    proptest! {
        #[test]
        fn corrupt_reproducible_and_single_block_agrees(seed in any::<u64>(), n in 1usize..40, t in 0.01f64..1.0) {
            let v = Vocab::shared();
            let mut g = RngStream::new(seed, "x0");
            let x0 = seq(&v, n, &mut g);
            let mut a = RngStream::new(seed, "c");
            let mut b = RngStream::new(seed, "c");
            let mut c = RngStream::new(seed, "c");
            let sa = corrupt(&x0, t, NoiseSchedule::Linear, &v, &mut a).unwrap();
            let sb = corrupt(&x0, t, NoiseSchedule::Linear, &v, &mut b).unwrap();
            let sc = corrupt_block(&x0, 1, n, t, NoiseSchedule::Linear, &v, &mut c).unwrap();
            prop_assert_eq!(&sa, &sb);
            prop_assert_eq!(&sa, &sc);
            // unmasked positions keep x0
            for (i, &tok) in sa.ids.iter().enumerate() {
                prop_assert!(tok == v.mask_id || tok == x0.0[i]);
            }
        }
    }
}
