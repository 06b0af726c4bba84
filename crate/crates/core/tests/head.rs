use cbm_core::head::{argmax, train, InitMode, TrainConfig};
use cbm_core::linalg::dot;
use cbm_core::synth::{gaussian_matrix, gaussian_vector, rng, unit_vector};
use cbm_core::{explain, omp_decompose, ConceptBank, LinearHead, Matrix, OmpConfig};
use rand::Rng;

fn names(c: usize) -> Vec<String> {
    (0..c).map(|i| format!("class-{i}")).collect()
}

fn random_head(seed: u64, classes: usize, d: usize) -> LinearHead {
    let mut r = rng(seed);
    LinearHead::from_parts(
        gaussian_matrix(&mut r, classes, d),
        gaussian_vector(&mut r, classes),
        names(classes),
        InitMode::Zeros,
    )
    .unwrap()
}

// Softmax cross-entropy written out independently of the crate.
fn reference_loss(w: &Matrix, b: &[f64], x: &Matrix, y: &[usize]) -> f64 {
    let mut total = 0.0;
    for (row, &label) in x.row_iter().zip(y) {
        let z: Vec<f64> = (0..w.rows()).map(|k| dot(w.row(k), row) + b[k]).collect();
        let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - z[label];
    }
    total / y.len() as f64
}

#[test]
fn gradient_matches_central_differences() {
    let (classes, d, h) = (3, 5, 1e-5);
    let mut r = rng(0);
    let head = random_head(1, classes, d);
    let x = gaussian_matrix(&mut r, 12, d);
    let y: Vec<usize> = (0..12).map(|_| r.gen_range(0..classes)).collect();
    let (loss, gw, gb) = head.loss_and_grad(&x, &y, 0.0).unwrap();
    assert!((loss - reference_loss(head.weights(), head.bias(), &x, &y)).abs() < 1e-12);

    let mut worst: f64 = 0.0;
    let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-8);
    for k in 0..classes {
        for j in 0..d {
            let mut plus = head.weights().clone();
            let mut minus = head.weights().clone();
            plus[(k, j)] += h;
            minus[(k, j)] -= h;
            let num = (reference_loss(&plus, head.bias(), &x, &y)
                - reference_loss(&minus, head.bias(), &x, &y))
                / (2.0 * h);
            worst = worst.max(rel(gw[(k, j)], num));
        }
        let mut bp = head.bias().to_vec();
        let mut bm = head.bias().to_vec();
        bp[k] += h;
        bm[k] -= h;
        let num = (reference_loss(head.weights(), &bp, &x, &y)
            - reference_loss(head.weights(), &bm, &x, &y))
            / (2.0 * h);
        worst = worst.max(rel(gb[k], num));
    }
    assert!(worst <= 1e-4, "max relative error {worst}");
}

#[test]
fn weight_decay_gradient() {
    let head = random_head(2, 3, 4);
    let mut r = rng(3);
    let x = gaussian_matrix(&mut r, 6, 4);
    let y = vec![0, 1, 2, 0, 1, 2];
    let (_, g0, _) = head.loss_and_grad(&x, &y, 0.0).unwrap();
    let (_, g1, _) = head.loss_and_grad(&x, &y, 0.3).unwrap();
    let diff = g1.sub(&g0).unwrap();
    let expect = head.weights().scale(0.3);
    assert!(diff.sub(&expect).unwrap().frobenius() < 1e-12);
}

// Two classes on either side of a hyperplane with a margin.
fn separable(seed: u64, n: usize, d: usize) -> (Matrix, Vec<usize>) {
    let mut r = rng(seed);
    let normal = unit_vector(&mut r, d);
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    while rows.len() < n {
        let v = gaussian_vector(&mut r, d);
        let s = dot(&v, &normal);
        if s.abs() < 0.2 {
            continue;
        }
        labels.push(usize::from(s > 0.0));
        rows.push(v);
    }
    (Matrix::from_rows(&rows).unwrap(), labels)
}

#[test]
fn separable_data_is_fit() {
    let (x, y) = separable(4, 256, 8);
    let head = LinearHead::zeros(8, names(2)).unwrap();
    let (trained, _) = train(
        &head,
        &x,
        &y,
        &TrainConfig {
            epochs: 200,
            learning_rate: 1e-2,
            ..TrainConfig::default()
        },
    )
    .unwrap();
    assert_eq!(trained.accuracy(&x, &y).unwrap(), 1.0);
}

#[test]
fn full_batch_loss_does_not_increase() {
    let mut r = rng(5);
    let x = gaussian_matrix(&mut r, 80, 6);
    let y: Vec<usize> = (0..80).map(|_| r.gen_range(0..4)).collect();
    let head = LinearHead::zeros(6, names(4)).unwrap();
    let cfg = TrainConfig {
        epochs: 100,
        batch_size: 80,
        learning_rate: 1e-3,
        ..TrainConfig::default()
    };
    let (_, trace) = train(&head, &x, &y, &cfg).unwrap();
    for w in trace.windows(2) {
        assert!(w[1] <= w[0] + 1e-9, "{} → {}", w[0], w[1]);
    }
}

#[test]
fn training_is_deterministic() {
    let (x, y) = separable(6, 100, 5);
    let head = LinearHead::zeros(5, names(2)).unwrap();
    let cfg = TrainConfig {
        epochs: 5,
        batch_size: 16,
        seed: 9,
        ..TrainConfig::default()
    };
    let (a, ta) = train(&head, &x, &y, &cfg).unwrap();
    let (b, tb) = train(&head, &x, &y, &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(ta, tb);
}

fn random_bank(seed: u64, m: usize, d: usize) -> ConceptBank {
    let mut r = rng(seed);
    ConceptBank::normalized(
        (0..m).map(|j| format!("concept-{j}")).collect(),
        gaussian_matrix(&mut r, m, d),
    )
    .unwrap()
}

#[test]
fn concept_weights_match_per_entry_dots() {
    let head = random_head(7, 4, 10);
    let bank = random_bank(8, 15, 10);
    let cw = head.concept_weights(&bank).unwrap();
    for j in 0..15 {
        for y in 0..4 {
            let mut s = 0.0;
            for k in 0..10 {
                s += head.weights()[(y, k)] * bank.embeddings()[(j, k)];
            }
            assert!((cw.get(j, y) - s).abs() < 1e-12);
        }
    }
}

fn top_gap(z: &[f64]) -> f64 {
    let mut s = z.to_vec();
    s.sort_by(|a, b| b.total_cmp(a));
    s[0] - s[1]
}

#[test]
fn factorization_equivalence() {
    let mut compared = 0;
    for seed in 0..100 {
        let mut r = rng(10_000 + seed);
        let head = random_head(seed, 5, 16);
        let bank = random_bank(seed + 500, 30, 16);
        let cw = head.concept_weights(&bank).unwrap();
        let image = gaussian_vector(&mut r, 16);
        let code = omp_decompose(&image, &bank, &OmpConfig::with_sparsity(8)).unwrap();
        let direct = head.logits(&code.reconstructed).unwrap();
        let concept = head.concept_logits(&code, &cw).unwrap();
        for (a, b) in direct.iter().zip(&concept) {
            assert!((a - b).abs() <= 1e-5, "seed {seed}");
        }
        if top_gap(&direct) > 1e-4 {
            assert_eq!(argmax(&direct), argmax(&concept));
            compared += 1;
        }
    }
    assert!(compared >= 90);
}

#[test]
fn zeroshot_passthrough() {
    for seed in 0..20 {
        let mut r = rng(20_000 + seed);
        let prompts = gaussian_matrix(&mut r, 6, 12);
        let head = LinearHead::init_zeroshot(&prompts, names(6)).unwrap();
        let bank = random_bank(seed + 900, 40, 12);
        let cw = head.concept_weights(&bank).unwrap();
        for _ in 0..20 {
            let image = unit_vector(&mut r, 12);
            let code = omp_decompose(&image, &bank, &OmpConfig::with_sparsity(10)).unwrap();
            // The zero-shot rule: cosine against normalized prompts.
            let direct: Vec<f64> = prompts
                .row_iter()
                .map(|p| dot(p, &code.reconstructed) / dot(p, p).sqrt())
                .collect();
            let concept = head.concept_logits(&code, &cw).unwrap();
            for (a, b) in direct.iter().zip(&concept) {
                assert!((a - b).abs() <= 1e-6);
            }
            assert_eq!(argmax(&direct), argmax(&concept));
        }
    }
}

#[test]
fn explanation_sums_to_logit() {
    for seed in 0..100 {
        let mut r = rng(30_000 + seed);
        let head = random_head(seed + 40, 4, 12);
        let bank = random_bank(seed + 41, 25, 12);
        let image = gaussian_vector(&mut r, 12);
        let code = omp_decompose(&image, &bank, &OmpConfig::with_sparsity(6)).unwrap();
        let e = explain(&head, &bank, seed as usize, &code, code.support.len()).unwrap();
        assert!(e.complete);
        // Independent recomputation of the predicted logit from Î.
        let logit = dot(head.class_weights(e.predicted), &code.reconstructed) + head.bias()[e.predicted];
        assert!((e.reconstructed_logit() - logit).abs() <= 1e-5, "seed {seed}");
        for w in e.contributions.windows(2) {
            assert!(w[0].contribution >= w[1].contribution);
        }
        assert!(e.contributions.len() <= 6);
    }
}
