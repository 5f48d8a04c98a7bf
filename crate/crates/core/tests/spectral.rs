use nalgebra::DMatrix;
use rand::Rng;

use integral_core::analysis::{effective_rank, entropy_effective_rank, singular_values};
use integral_core::tensor::{seeded_rng, Tensor};

fn random(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = seeded_rng(seed);
    Tensor::new(
        vec![rows, cols],
        (0..rows * cols)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect(),
    )
    .unwrap()
}

fn oracle(t: &Tensor) -> Vec<f64> {
    let m = DMatrix::from_row_slice(t.rows(), t.cols(), t.data());
    let mut sv: Vec<f64> = m
        .svd(false, false)
        .singular_values
        .iter()
        .copied()
        .collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv
}

#[test]
fn jacobi_singular_values_match_a_reference_svd() {
    for (i, (r, c)) in [(8, 8), (5, 9), (12, 3), (1, 6), (16, 16)]
        .into_iter()
        .enumerate()
    {
        let t = random(r, c, i as u64);
        let ours = singular_values(&t).unwrap();
        let want = oracle(&t);
        assert_eq!(ours.len(), want.len());
        for (a, b) in ours.iter().zip(&want) {
            assert!(
                (a - b).abs() <= 1e-10 * want[0],
                "{r}x{c}: {ours:?} vs {want:?}"
            );
        }
    }
}

#[test]
fn rank_deficient_products_have_their_inner_rank() {
    for k in 1..=8 {
        let phi = random(8, k, 100 + k as u64)
            .matmul(&random(k, 8, 200 + k as u64))
            .unwrap();
        assert_eq!(effective_rank(&phi, 1e-6).unwrap(), k);
    }
    assert_eq!(effective_rank(&Tensor::zeros(&[4, 4]), 1e-6).unwrap(), 0);
}

#[test]
fn entropy_rank_of_an_identity_is_its_size() {
    let mut eye = Tensor::zeros(&[6, 6]);
    for i in 0..6 {
        eye.data_mut()[i * 6 + i] = 1.0;
    }
    assert!((entropy_effective_rank(&eye).unwrap() - 6.0).abs() < 1e-12);
}
