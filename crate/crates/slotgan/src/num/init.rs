//! Weight initialization: Xavier-uniform for dense maps, orthogonal blocks
//! for recurrent matrices, zeros for biases.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::tensor::Tensor;

pub fn xavier_uniform(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.gen_range(-limit..limit))
        .collect();
    Tensor::new(vec![rows, cols], data).expect("xavier shape")
}

pub fn uniform(rng: &mut impl Rng, shape: &[usize], limit: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-limit..limit)).collect();
    Tensor::new(shape.to_vec(), data).expect("uniform shape")
}

/// Square orthogonal matrix via Gram-Schmidt on a random Gaussian.
fn orthogonal_square(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
    while rows.len() < n {
        let mut v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        for u in &rows {
            let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            for (vi, ui) in v.iter_mut().zip(u) {
                *vi -= dot * ui;
            }
        }
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-8 {
            continue; // essentially dependent draw, retry
        }
        for vi in v.iter_mut() {
            *vi /= norm;
        }
        rows.push(v);
    }
    rows.into_iter().flatten().collect()
}

/// `[hidden, gates * hidden]` recurrent matrix built from independent
/// orthogonal `[hidden, hidden]` blocks.
pub fn orthogonal_blocks(rng: &mut impl Rng, hidden: usize, gates: usize) -> Tensor {
    let mut data = vec![0.0; hidden * gates * hidden];
    let cols = gates * hidden;
    for gate in 0..gates {
        let block = orthogonal_square(rng, hidden);
        for r in 0..hidden {
            for c in 0..hidden {
                data[r * cols + gate * hidden + c] = block[r * hidden + c];
            }
        }
    }
    Tensor::new(vec![hidden, cols], data).expect("orthogonal shape")
}

/// LSTM bias of `4 * hidden`, zero except the forget-gate section at 1.0.
/// Gate order is input, forget, cell, output.
pub fn lstm_bias(hidden: usize) -> Tensor {
    let mut data = vec![0.0; 4 * hidden];
    for v in data[hidden..2 * hidden].iter_mut() {
        *v = 1.0;
    }
    Tensor::from_vec(data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn orthogonal_blocks_have_orthonormal_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let t = orthogonal_blocks(&mut rng, 8, 4);
        // Check the first gate block: rows orthonormal.
        for i in 0..8 {
            for j in 0..8 {
                let dot: f64 = (0..8).map(|c| t.at2(i, c) * t.at2(j, c)).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-10, "({}, {}) -> {}", i, j, dot);
            }
        }
    }

    #[test]
    fn forget_gate_bias_is_one() {
        let b = lstm_bias(3);
        assert_eq!(b.data(), &[0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    }
}
