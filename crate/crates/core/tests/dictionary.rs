mod common;

use cbm_core::linalg::{dot, norm};
use cbm_core::sae::{train_dictionary, SaeConfig};
use cbm_core::synth::{gaussian_matrix, low_coherence_atoms, rng, sparse_mixture};
use cbm_core::Matrix;
use common::ls_residual;
use pathfinding::prelude::{kuhn_munkres, Matrix as Weights};

struct Fixture {
    truth: Matrix,
    images: Matrix,
}

// Inputs are 2-sparse non-negative combinations of 16 known atoms in d = 32.
fn fixture(seed: u64) -> Fixture {
    let mut r = rng(seed);
    let truth = low_coherence_atoms(&mut r, 16, 32, 0.3).unwrap();
    let rows: Vec<Vec<f64>> = (0..2000)
        .map(|_| sparse_mixture(&mut r, &truth, 2, (0.5, 1.5)).vector)
        .collect();
    Fixture {
        truth,
        images: Matrix::from_rows(&rows).unwrap(),
    }
}

fn cfg(l1: f64, seed: u64) -> SaeConfig {
    SaeConfig {
        atoms: 16,
        l1_penalty: l1,
        seed,
        ..SaeConfig::default()
    }
}

// Optimal one-to-one matching of learned to true atoms on |cos|; returns the
// matched |cos| per true atom.
fn matched_cosines(learned: &Matrix, truth: &Matrix) -> Vec<f64> {
    let cos = |a: &[f64], b: &[f64]| (dot(a, b) / (norm(a) * norm(b))).abs();
    let weights: Vec<Vec<i64>> = truth
        .row_iter()
        .map(|t| learned.row_iter().map(|l| (cos(t, l) * 1e9) as i64).collect())
        .collect();
    let w = Weights::from_rows(weights).unwrap();
    let (_, assign) = kuhn_munkres(&w);
    assign
        .iter()
        .enumerate()
        .map(|(i, &j)| cos(truth.row(i), learned.row(j)))
        .collect()
}

fn mean_ls_error(atoms: &Matrix, x: &Matrix) -> f64 {
    let a: Vec<&[f64]> = atoms.row_iter().collect();
    x.row_iter().map(|row| ls_residual(&a, row)).sum::<f64>() / x.rows() as f64
}

#[test]
fn recovers_ground_truth_atoms() {
    let f = fixture(1);
    let dict = train_dictionary(&f.images, &cfg(0.1, 0)).unwrap();
    let cos = matched_cosines(dict.decoder(), &f.truth);
    let hits = cos.iter().filter(|&&c| c >= 0.9).count();
    assert!(hits as f64 >= 0.8 * 16.0, "{hits}/16 matched: {cos:?}");
}

#[test]
fn atom_direction_activates_its_own_unit() {
    let f = fixture(1);
    let dict = train_dictionary(&f.images, &cfg(0.1, 0)).unwrap();
    for j in 0..dict.atoms() {
        let u = dict.encode(dict.atom(j)).unwrap();
        let top = (0..u.values.len())
            .max_by(|&a, &b| u.values[a].total_cmp(&u.values[b]).then(b.cmp(&a)))
            .unwrap();
        assert_eq!(top, j, "activations {:?}", u.values);
    }
}

#[test]
fn full_capacity_without_penalty() {
    // Non-negative rows spanning R^d: reachable by a rectified encoder.
    let mut r = rng(2);
    let mut x = gaussian_matrix(&mut r, 500, 8);
    x.as_mut_slice().iter_mut().for_each(|v| *v = v.abs());
    cbm_core::embedding::normalize_matrix_rows(&mut x).unwrap();
    let c = SaeConfig {
        atoms: 8,
        l1_penalty: 0.0,
        epochs: 200,
        ..SaeConfig::default()
    };
    let initial = train_dictionary(&x, &SaeConfig { epochs: 0, ..c }).unwrap().evaluate(&x);
    let dict = train_dictionary(&x, &c).unwrap();
    let last = dict.trace().last().unwrap();
    assert!(
        last.reconstruction <= 0.01 * initial.reconstruction,
        "{} vs {}",
        last.reconstruction,
        initial.reconstruction
    );
}

#[test]
fn activation_mass_falls_with_penalty() {
    let f = fixture(3);
    let mut prev = f64::INFINITY;
    for l1 in [0.05, 0.1, 0.2] {
        let dict = train_dictionary(&f.images, &cfg(l1, 0)).unwrap();
        let mean_l1: f64 = f
            .images
            .row_iter()
            .map(|row| dict.encode(row).unwrap().l1())
            .sum::<f64>()
            / f.images.rows() as f64;
        assert!(mean_l1 < prev, "λ = {l1}: {mean_l1} ≥ {prev}");
        prev = mean_l1;
    }
}

#[test]
fn beats_random_dictionary() {
    let f = fixture(4);
    let dict = train_dictionary(&f.images, &cfg(0.1, 0)).unwrap();
    let learned = mean_ls_error(dict.decoder(), &f.images);
    let mut r = rng(99);
    let random = mean_ls_error(&gaussian_matrix(&mut r, 16, 32), &f.images);
    assert!(5.0 * learned <= random, "learned {learned}, random {random}");
}

#[test]
fn training_invariants() {
    let f = fixture(5);
    let a = train_dictionary(&f.images, &cfg(0.1, 7)).unwrap();
    let b = train_dictionary(&f.images, &cfg(0.1, 7)).unwrap();
    assert_eq!(a.trace(), b.trace());
    assert_eq!(a.decoder(), b.decoder());
    for j in 0..a.atoms() {
        assert!((norm(a.atom(j)) - 1.0).abs() <= 1e-4);
    }
    for w in a.trace().windows(2) {
        assert!(w[1].reconstruction <= 1.01 * w[0].reconstruction);
    }
    assert_eq!(a.trace().len(), 50);
}

#[test]
fn zero_input_gives_zero_code() {
    let f = fixture(6);
    let mut dict = train_dictionary(&f.images, &SaeConfig { epochs: 1, ..cfg(0.1, 0) }).unwrap();
    dict = cbm_core::SparseDictionary::from_parts(
        dict.decoder().clone(),
        dict.encoder_weights().clone(),
        vec![0.0; dict.atoms()],
        dict.l1_penalty(),
        Vec::new(),
    )
    .unwrap();
    let u = dict.encode(&[0.0; 32]).unwrap();
    assert!(u.values.iter().all(|&v| v == 0.0));
    assert!(dict.encode(&[0.0; 31]).is_err());
}
