use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::Tensor;

/// Seeded generator; every random draw in the crate goes through one of these.
pub fn seeded(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn normal(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(rng);
        z * std
    })
}

/// Variance-scaled uniform init, `U(-sqrt(3/fan_in), sqrt(3/fan_in))`.
pub fn scaled_uniform(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let fan_in = *shape.last().unwrap() as f64;
    let bound = (3.0 / fan_in).sqrt();
    Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
}

/// Random `[rows, cols]` matrix whose rows (if rows <= cols) or columns are
/// orthonormal, scaled by `gain`.
pub fn orthogonal(rng: &mut impl Rng, rows: usize, cols: usize, gain: f64) -> Tensor {
    let (n, m) = if rows <= cols { (rows, cols) } else { (cols, rows) };
    // Gram-Schmidt on n random vectors of length m.
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(n);
    while basis.len() < n {
        let mut v: Vec<f64> = (0..m)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z
            })
            .collect();
        for _ in 0..2 {
            for b in &basis {
                let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            v.iter_mut().for_each(|x| *x /= norm);
            basis.push(v);
        }
    }
    if rows <= cols {
        Tensor::from_fn(&[rows, cols], |i| gain * basis[i / cols][i % cols])
    } else {
        Tensor::from_fn(&[rows, cols], |i| gain * basis[i % cols][i / cols])
    }
}
