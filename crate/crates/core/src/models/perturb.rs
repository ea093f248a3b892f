//! Similarity-weighted multinomial item perturbation, and the non-greedy
//! wrapper that applies it to one slot of any generator's output.

use crate::dataio::{ItemId, Slate, UserId};
use crate::numkit::sigmoid;
use crate::Result;

use super::{EmbeddingBank, SlateGenerator};

/// Draw an index proportional to the given non-negative weights.
pub(crate) fn multinomial(weights: &[f64], rng: &mut dyn rand::RngCore) -> usize {
    use rand::Rng;
    let total: f64 = weights.iter().sum();
    debug_assert!(total > 0.0, "multinomial needs positive total weight");
    let x = rng.gen::<f64>() * total;
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if x < acc {
            return i;
        }
    }
    weights.len() - 1
}

/// Sample an item with probability proportional to
/// `sigmoid(v_origin . v_i)^(1/temperature)` over the whole catalog.
/// Temperature 1 uses the raw sigmoid-dot weights.
pub fn multinomial_similar_item(
    bank: &EmbeddingBank,
    origin: ItemId,
    temperature: f64,
    rng: &mut dyn rand::RngCore,
) -> ItemId {
    let origin_vec = bank.item(origin).to_vec();
    let weights: Vec<f64> = (0..bank.n_items())
        .map(|i| {
            let s = sigmoid(bank.item_table().row_dot(i, &origin_vec));
            if temperature == 1.0 {
                s
            } else {
                s.powf(1.0 / temperature)
            }
        })
        .collect();
    multinomial(&weights, rng)
}

/// Replace the item at `position` by a similarity-weighted multinomial draw
/// relative to the original item there; other slots are untouched.
pub fn nongreedy_perturb(
    slate: &Slate,
    position: usize,
    bank: &EmbeddingBank,
    rng: &mut dyn rand::RngCore,
) -> Slate {
    let mut out = slate.clone();
    let pick = multinomial_similar_item(bank, slate.get(position), 1.0, rng);
    out.set(position, pick);
    out
}

/// The non-greedy baselines: any generator with one slot perturbed post hoc.
pub struct NonGreedyPolicy<'a, G: SlateGenerator> {
    pub inner: &'a G,
    pub position: usize,
    pub bank: &'a EmbeddingBank,
}

impl<G: SlateGenerator> SlateGenerator for NonGreedyPolicy<'_, G> {
    fn generate(&self, user: Option<UserId>, rng: &mut dyn rand::RngCore) -> Result<Slate> {
        let slate = self.inner.generate(user, rng)?;
        Ok(nongreedy_perturb(&slate, self.position, self.bank, rng))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::Tensor2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_item_universe_is_unchanged() {
        let bank = EmbeddingBank::new(Tensor2::from_vec(1, 2, vec![0.3, -0.4]).unwrap(), None);
        let slate = Slate::new(vec![0, 0, 0]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = nongreedy_perturb(&slate, 1, &bank, &mut rng);
        assert_eq!(out, slate);
    }

    #[test]
    fn self_similarity_dominates_with_scaled_embeddings() {
        // item 0 has a large-norm embedding; every other item is orthogonal
        // to it, so sigmoid(v0 . v0) is much larger than any other weight.
        let mut t = Tensor2::zeros(4, 2);
        t.set(0, 0, 5.0);
        t.set(1, 1, 1.0);
        t.set(2, 1, -1.0);
        t.set(3, 1, 0.5);
        let bank = EmbeddingBank::new(t, None);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut counts = [0usize; 4];
        for _ in 0..4000 {
            counts[multinomial_similar_item(&bank, 0, 1.0, &mut rng)] += 1;
        }
        assert!(counts[0] > counts[1]);
        assert!(counts[0] > counts[2]);
        assert!(counts[0] > counts[3]);
    }

    #[test]
    fn identical_items_sampled_equally() {
        let t = Tensor2::from_vec(2, 2, vec![0.7, -0.1, 0.7, -0.1]).unwrap();
        let bank = EmbeddingBank::new(t, None);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 10_000;
        let mut ones = 0usize;
        for _ in 0..n {
            ones += multinomial_similar_item(&bank, 0, 1.0, &mut rng);
        }
        // chi-squared with 1 dof at p=0.001 is 10.83
        let expect = n as f64 / 2.0;
        let chi2 = 2.0 * (ones as f64 - expect).powi(2) / expect;
        assert!(chi2 < 10.83, "chi2 = {chi2}, ones = {ones}");
    }

    #[test]
    fn only_target_slot_changes() {
        let t = Tensor2::randn(6, 3, 1.0, &mut ChaCha8Rng::seed_from_u64(3));
        let bank = EmbeddingBank::new(t, None);
        let slate = Slate::new(vec![0, 1, 2, 3, 4]);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for position in 0..5 {
            let out = nongreedy_perturb(&slate, position, &bank, &mut rng);
            for slot in 0..5 {
                if slot != position {
                    assert_eq!(out.get(slot), slate.get(slot));
                }
            }
        }
    }
}
