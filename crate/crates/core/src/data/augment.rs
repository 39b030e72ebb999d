use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{
    apply_rotation, inject_noise, random_rotation, Correspondence, Permutation, PointCloud, RotationMode,
};

use super::{DataError, Result, ShapeDataset};

/// Gaussian jitter on a random subset of points.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoisePolicy {
    /// Share of points perturbed, in `[0, 1]`.
    pub fraction: f64,
    pub stddev: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentPolicy {
    pub rotate: bool,
    pub permute: bool,
    pub noise: Option<NoisePolicy>,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            rotate: true,
            permute: true,
            noise: None,
        }
    }
}

impl AugmentPolicy {
    pub fn off() -> Self {
        Self {
            rotate: false,
            permute: false,
            noise: None,
        }
    }
}

/// One training pair with its ground-truth matching.
#[derive(Clone, Debug, PartialEq)]
pub struct Couple {
    pub x: PointCloud,
    pub y: PointCloud,
    pub corr: Correspondence,
    /// Dataset indices the pair came from.
    pub source: (usize, usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainBatch {
    pub couples: Vec<Couple>,
}

/// Rotates each shape by an independently drawn mode, adds noise, then
/// shuffles both clouds and re-indexes the correspondence.
pub fn augment_pair<R: Rng + ?Sized>(
    x: &PointCloud,
    y: &PointCloud,
    corr: &Correspondence,
    policy: &AugmentPolicy,
    rng: &mut R,
) -> Result<(PointCloud, PointCloud, Correspondence)> {
    let (mut x, mut y, mut corr) = (x.clone(), y.clone(), corr.clone());
    if policy.rotate {
        let rx = random_rotation(RotationMode::sample(rng), rng);
        let ry = random_rotation(RotationMode::sample(rng), rng);
        x = apply_rotation(&x, &rx);
        y = apply_rotation(&y, &ry);
    }
    if let Some(noise) = policy.noise {
        x = inject_noise(&x, noise.fraction, noise.stddev, rng)?;
        y = inject_noise(&y, noise.fraction, noise.stddev, rng)?;
    }
    if policy.permute {
        let px = Permutation::random(x.len(), rng);
        let py = Permutation::random(y.len(), rng);
        x = px.apply(&x)?;
        y = py.apply(&y)?;
        corr = corr.permute_source(&px)?.permute_target(&py)?;
    }
    Ok((x, y, corr))
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Random pairing without replacement for one epoch; an odd shape out is
/// dropped.
pub fn epoch_couples(len: usize, seed: u64, epoch: usize) -> Vec<(usize, usize)> {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut rng_for(seed, u64::MAX - epoch as u64));
    order.chunks_exact(2).map(|c| (c[0], c[1])).collect()
}

/// All augmented batches for one epoch. Batch `b` draws from its own RNG
/// stream, so any batch can be rebuilt independently of the others.
pub fn epoch_batches(
    dataset: &ShapeDataset,
    batch_shapes: usize,
    policy: &AugmentPolicy,
    seed: u64,
    epoch: usize,
) -> Result<Vec<TrainBatch>> {
    if batch_shapes < 2 || !batch_shapes.is_multiple_of(2) {
        return Err(DataError::Invalid(format!(
            "batch_shapes must be a positive even number, got {batch_shapes}"
        )));
    }
    if dataset.len() < batch_shapes {
        return Err(DataError::Invalid(format!(
            "dataset has {} shapes, fewer than one batch of {batch_shapes}",
            dataset.len()
        )));
    }
    let couples = epoch_couples(dataset.len(), seed, epoch);
    couples
        .chunks(batch_shapes / 2)
        .enumerate()
        .map(|(b, chunk)| {
            let mut rng = rng_for(seed, ((epoch as u64) << 32) | b as u64);
            let couples = chunk
                .iter()
                .map(|&(i, j)| {
                    let (x, y) = (&dataset.clouds()[i], &dataset.clouds()[j]);
                    let id = Correspondence::identity(dataset.n());
                    let (x, y, corr) = augment_pair(x, y, &id, policy, &mut rng)?;
                    Ok(Couple {
                        x,
                        y,
                        corr,
                        source: (i, j),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(TrainBatch { couples })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_synthetic_dataset;
    use crate::geometry::BlockDistanceMatrix;
    use crate::losses::{correspondence_loss, Reduction};

    fn pair() -> (PointCloud, PointCloud) {
        let ds = generate_synthetic_dataset(2, 40, 3).unwrap();
        (ds.clouds()[0].clone(), ds.clouds()[1].clone())
    }

    #[test]
    fn all_off_is_identity() {
        let (x, y) = pair();
        let id = Correspondence::identity(40);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = augment_pair(&x, &y, &id, &AugmentPolicy::off(), &mut rng).unwrap();
        assert_eq!(out, (x, y, id));
    }

    #[test]
    fn rotation_keeps_within_shape_distances() {
        let (x, y) = pair();
        let id = Correspondence::identity(40);
        let policy = AugmentPolicy {
            rotate: true,
            permute: false,
            noise: None,
        };
        let before = BlockDistanceMatrix::new(&x, &y);
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (x2, y2, _) = augment_pair(&x, &y, &id, &policy, &mut rng).unwrap();
            let after = BlockDistanceMatrix::new(&x2, &y2);
            for (a, b) in before.data().iter().zip(after.data()) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn oracle_remap_survives_augmentation() {
        let (x, y) = pair();
        let id = Correspondence::identity(40);
        let policy = AugmentPolicy {
            noise: Some(NoisePolicy {
                fraction: 0.5,
                stddev: 0.02,
            }),
            ..AugmentPolicy::default()
        };
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (x2, y2, corr) = augment_pair(&x, &y, &id, &policy, &mut rng).unwrap();
            assert_eq!((x2.len(), y2.len(), corr.len()), (40, 40, 40));
            // the perfect prediction X̂ = Y∘π, Ŷ = X∘π⁻¹
            let xh = PointCloud::new((0..40).map(|i| y2.point(corr.target(i))).collect()).unwrap();
            let inv = corr.inverse();
            let yh = PointCloud::new((0..40).map(|j| x2.point(inv.target(j))).collect()).unwrap();
            assert_eq!(correspondence_loss(&xh, &yh, &x2, &y2, &corr, Reduction::Sum).unwrap(), (0.0, 0.0));
        }
    }

    #[test]
    fn pairing_is_without_replacement_and_reproducible() {
        let c = epoch_couples(11, 4, 2);
        assert_eq!(c.len(), 5);
        let mut seen: Vec<usize> = c.iter().flat_map(|&(a, b)| [a, b]).collect();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 10);
        assert_eq!(c, epoch_couples(11, 4, 2));
        assert_ne!(c, epoch_couples(11, 4, 3));
    }

    #[test]
    fn batches_are_deterministic_and_sized() {
        let ds = generate_synthetic_dataset(10, 32, 1).unwrap();
        let a = epoch_batches(&ds, 4, &AugmentPolicy::default(), 7, 0).unwrap();
        let b = epoch_batches(&ds, 4, &AugmentPolicy::default(), 7, 0).unwrap();
        assert_eq!(a, b);
        let sizes: Vec<usize> = a.iter().map(|b| b.couples.len()).collect();
        assert_eq!(sizes, vec![2, 2, 1]);
        assert!(epoch_batches(&ds, 3, &AugmentPolicy::default(), 7, 0).is_err());
        assert!(epoch_batches(&ds, 12, &AugmentPolicy::default(), 7, 0).is_err());
    }
}
