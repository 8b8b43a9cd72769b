use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::SkeletonSequence;
use crate::error::{Error, Result};

/// Zeroes `floor(p / 100 * V)` distinct joints, chosen uniformly, across all
/// frames and subjects.
pub fn mask_joints(seq: &SkeletonSequence, percentage: f64, seed: u64) -> Result<SkeletonSequence> {
    if !(0.0..100.0).contains(&percentage) {
        return Err(Error::Argument(format!(
            "mask percentage must lie in [0, 100), got {percentage}"
        )));
    }
    let shape = seq.shape();
    let count = ((percentage * shape.joints as f64) / 100.0).floor() as usize;
    let mut out = seq.clone();
    if count == 0 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let joints = rand::seq::index::sample(&mut rng, shape.joints, count);
    for v in joints.iter() {
        for c in 0..shape.channels {
            for t in 0..shape.frames {
                for m in 0..shape.subjects {
                    let o = seq.offset(c, t, v, m);
                    out.data.data_mut()[o] = 0.0;
                }
            }
        }
    }
    Ok(out)
}
