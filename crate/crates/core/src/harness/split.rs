use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bag::{Bag, FewShotSplit};
use crate::error::{Error, Result};

/// Draws `shots` training bags per category uniformly without replacement;
/// every other bag is a test bag. Training ids are category-major, test ids
/// keep dataset order.
pub fn few_shot_split(bags: &[Bag], num_classes: usize, shots: usize, seed: u64) -> Result<FewShotSplit> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = vec![false; bags.len()];
    let mut train_ids = Vec::with_capacity(num_classes * shots);
    for k in 0..num_classes {
        let members: Vec<usize> = (0..bags.len()).filter(|&i| bags[i].label == k).collect();
        if members.len() < shots {
            return Err(Error::ShotShortfall {
                category: k,
                available: members.len(),
                requested: shots,
            });
        }
        for j in sample(&mut rng, members.len(), shots) {
            train[members[j]] = true;
            train_ids.push(bags[members[j]].bag_id.clone());
        }
    }
    let test_ids = bags
        .iter()
        .zip(&train)
        .filter(|(_, &t)| !t)
        .map(|(b, _)| b.bag_id.clone())
        .collect();
    Ok(FewShotSplit {
        shots,
        train_ids,
        test_ids,
        seed,
    })
}
