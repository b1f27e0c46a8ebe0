//! Cross-sections drawn directly from `X = A*·S + noise`.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};

use crate::seed;

/// Laplace draw with unit variance.
pub fn laplace(rng: &mut impl Rng) -> f64 {
    let a: f64 = Exp1.sample(rng);
    let b: f64 = Exp1.sample(rng);
    (a - b) / std::f64::consts::SQRT_2
}

pub struct DirectSample {
    /// p × n observations.
    pub x: DMatrix<f64>,
    /// p × k.
    pub mixing: DMatrix<f64>,
    /// k × n unit-variance Laplace sources.
    pub sources: DMatrix<f64>,
}

/// Gaussian mixing, Laplace sources and isotropic Gaussian noise.
pub fn direct_cross_sections(p: usize, k: usize, n: usize, noise: f64, seed: u64) -> DirectSample {
    let mut rng = seed::rng(seed::derive(seed, "mixing"));
    let mixing = DMatrix::from_fn(p, k, |_, _| StandardNormal.sample(&mut rng));
    let mut rng = seed::rng(seed::derive(seed, "sources"));
    let sources = DMatrix::from_fn(k, n, |_, _| laplace(&mut rng));
    let mut rng = seed::rng(seed::derive(seed, "noise"));
    let mut x = &mixing * &sources;
    for v in x.iter_mut() {
        let z: f64 = StandardNormal.sample(&mut rng);
        *v += noise * z;
    }
    DirectSample { x, mixing, sources }
}
