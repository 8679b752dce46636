//! Synthetic grid-stability dataset generator.
//!
//! The public simulated dataset is not redistributable with this crate, so
//! experiments run against a generated stand-in with the same schema, the
//! same feature ranges, and the same labeling convention. The stability
//! value is a documented closed form:
//!
//! ```text
//! u_t  = (mean(tau) - 0.5) / 9.5          (normalized mean reaction time)
//! u_g  = (mean(g) - 0.05) / 0.95          (normalized mean elasticity)
//! base = 0.30 + 0.12 (u_t - 0.5) + 0.10 (u_g - 0.5) + 0.06 (u_t u_g - 0.25)
//! stab = base - 0.115 (p1 - 1.5)
//! ```
//!
//! Slower reactions and higher elasticities destabilize; committing more
//! producer power stabilizes. The form is symmetric under consumer
//! permutation, so 3!-augmentation is exact, and it is monotone in the
//! producer power so the control stage has a reachable stable region:
//! `stab < 0` whenever `p1 > 1.5 + base/0.115 ≤ 5.46`.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{Dataset, GridRecord, Label};

const PRODUCER_COEFF: f64 = 0.115;

/// Closed-form stability value for a 12-feature vector
/// (tau1..tau4, p1..p4, g1..g4).
pub fn stability_value(features: &[f64]) -> f64 {
    assert_eq!(features.len(), 12);
    let mean_tau = features[..4].iter().sum::<f64>() / 4.0;
    let mean_g = features[8..12].iter().sum::<f64>() / 4.0;
    let u_t = (mean_tau - 0.5) / 9.5;
    let u_g = (mean_g - 0.05) / 0.95;
    let base = 0.30 + 0.12 * (u_t - 0.5) + 0.10 * (u_g - 0.5) + 0.06 * (u_t * u_g - 0.25);
    base - PRODUCER_COEFF * (features[4] - 1.5)
}

/// Generate `n` observations with independent uniform draws over the
/// documented ranges. Deterministic per seed.
pub fn generate(n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(n);
    for _ in 0..n {
        let mut tau = [0.0; 4];
        let mut g = [0.0; 4];
        let mut p = [0.0; 4];
        for i in 0..4 {
            tau[i] = rng.gen_range(0.5..=10.0);
            g[i] = rng.gen_range(0.05..=1.0);
        }
        for pi in p.iter_mut().skip(1) {
            *pi = rng.gen_range(-2.0..=-0.5);
        }
        p[0] = -(p[1] + p[2] + p[3]);
        let mut record = GridRecord { tau, p, g, stab: 0.0, stabf: Label::Stable };
        let stab = stability_value(&record.features());
        record.stab = stab;
        record.stabf = if stab > 0.0 { Label::Unstable } else { Label::Stable };
        records.push(record);
    }
    Dataset::new(records)
}
