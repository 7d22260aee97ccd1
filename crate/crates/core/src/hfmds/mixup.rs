use rand::Rng;

use super::{SyntheticDataset, SyntheticLabel, SyntheticSample};
use crate::data::Dataset;
use crate::error::{Error, Result};

/// Two-parent input-space mixup: each sample is the mean of two distinct
/// real rows with a 0.5/0.5 label. The first parent is recorded as the pair.
pub fn mixup_generate<R: Rng + ?Sized>(
    shard: &Dataset,
    count: usize,
    rng: &mut R,
    client: usize,
    round: usize,
) -> Result<SyntheticDataset> {
    if shard.len() < 2 {
        return Err(Error::contract("mixup needs at least two real samples"));
    }
    let classes = shard.classes();
    let samples = (0..count)
        .map(|_| {
            let a = rng.random_range(0..shard.len());
            let mut b = rng.random_range(0..shard.len() - 1);
            if b >= a {
                b += 1;
            }
            let input = shard
                .input(a)
                .iter()
                .zip(shard.input(b))
                .map(|(x, y)| 0.5 * x + 0.5 * y)
                .collect();
            let (ya, yb) = (shard.labels()[a], shard.labels()[b]);
            let label = if ya == yb {
                SyntheticLabel::Hard(ya)
            } else {
                let mut p = vec![0.0; classes];
                p[ya] = 0.5;
                p[yb] = 0.5;
                SyntheticLabel::Soft(p)
            };
            SyntheticSample {
                input,
                label,
                client,
                round,
                paired_index: a,
                initial_loss: None,
                final_loss: None,
            }
        })
        .collect();
    Ok(SyntheticDataset {
        samples,
        input_dim: shard.dim(),
        feature_dim: 0,
        classes,
        client: Some(client),
        round,
        model_fingerprint: String::new(),
    })
}
