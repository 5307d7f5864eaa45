//! Seeded uniform noise sequences.

use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::model::{BoxDomain, ModelError, Vector};

/// `length` samples drawn independently and uniformly from `bounds`.
///
/// Deterministic for a given seed. Degenerate components (`lower == upper`)
/// yield constants.
pub fn sample_uniform_noise(bounds: &BoxDomain, length: usize, seed: u64) -> Result<Vec<Vector>, ModelError> {
    if !bounds.is_bounded() {
        return Err(ModelError::InvalidBox("noise bounds must be finite".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dists: Vec<Option<Uniform<f64>>> = (0..bounds.dim())
        .map(|i| {
            let (l, u) = (bounds.lower()[i], bounds.upper()[i]);
            if l == u {
                None
            } else {
                Some(Uniform::new_inclusive(l, u).expect("finite ordered bounds"))
            }
        })
        .collect();
    Ok((0..length)
        .map(|_| {
            Vector::from_iterator(
                bounds.dim(),
                dists.iter().enumerate().map(|(i, d)| match d {
                    Some(d) => d.sample(&mut rng),
                    None => bounds.lower()[i],
                }),
            )
        })
        .collect())
}
