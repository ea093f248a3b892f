//! Embedding-bank pretraining checks: explicit simulator export and the
//! collaborative co-click signal.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use slategen_core::dataio::{Dataset, ItemId, Record, ResponseVector, Slate};
use slategen_core::models::{pretrain_embeddings, EmbeddingBank, PretrainConfig};
use slategen_core::simenv::{build_environment, EnvKind, SimConfig};

#[test]
fn explicit_bank_is_bit_exact_from_the_simulator() {
    let config = SimConfig::new(40, 9, 7);
    let env = build_environment(EnvKind::UrmPMr, &config).unwrap();
    let bank = EmbeddingBank::from_environment(&env).unwrap();
    assert_eq!(**bank.item_table(), env.item_vecs);
    assert_eq!(**bank.user_table().unwrap(), env.user_vecs);
}

#[test]
fn pretraining_fails_on_empty_data() {
    let d = Dataset::new(10, 5);
    assert!(pretrain_embeddings(&d, &PretrainConfig::default()).is_err());
}

#[test]
fn co_clicked_items_align_after_pretraining() {
    // items 1 and 2 are always clicked together by the same users; item 5 is
    // clicked by a disjoint user group. After training, v1 . v2 should
    // exceed v1 . v5.
    let mut d = Dataset::new(8, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for round in 0..400 {
        let user = round % 6;
        let likes_pair = user < 3;
        let mut items: Vec<ItemId> = if likes_pair {
            vec![1, 2]
        } else {
            vec![5, 6]
        };
        while items.len() < 4 {
            let filler = rng.gen_range(0..8);
            if !items.contains(&filler) {
                items.push(filler);
            }
        }
        let bits: Vec<u8> = items
            .iter()
            .map(|&i| {
                if likes_pair {
                    u8::from(i == 1 || i == 2)
                } else {
                    u8::from(i == 5 || i == 6)
                }
            })
            .collect();
        d.push(Record {
            user: Some(user),
            slate: Slate::new(items),
            response: ResponseVector::new(bits).unwrap(),
        })
        .unwrap();
    }
    let config = PretrainConfig {
        epochs: 40,
        lr: 3e-3,
        seed: 3,
        ..Default::default()
    };
    let bank = pretrain_embeddings(&d, &config).unwrap();
    let v1 = bank.item(1).to_vec();
    let aligned = bank.item_table().row_dot(2, &v1);
    let disjoint = bank.item_table().row_dot(5, &v1);
    assert!(
        aligned > disjoint,
        "dot(v1,v2) = {aligned} should exceed dot(v1,v5) = {disjoint}"
    );
}
