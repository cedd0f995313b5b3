//! The contrastive loss against a direct scalar evaluation.

use cfclip_core::geometry::Direction;
use cfclip_core::losses::{clip_nce_loss, DirectionSet};
use cfclip_core::rng::rng_for;
use rand::Rng;

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Mean over views of `−log softmax` for each positive against the shared
/// negatives, summed over both positives.
fn brute_force(q: &[Vec<f64>], kt: &[f64], ki: &[f64], negs: &[Vec<f64>], tau: f64) -> f64 {
    let mut total = 0.0;
    for qv in q {
        let qv = unit(qv);
        for pos in [kt, ki] {
            let p = (dot(&qv, &unit(pos)) / tau).exp();
            let mut denom = p;
            for n in negs {
                denom += (dot(&qv, &unit(n)) / tau).exp();
            }
            total += -(p / denom).ln();
        }
    }
    total / q.len() as f64
}

#[test]
fn matches_brute_force_on_random_sets() {
    let mut rng = rng_for(2024, &[]);
    let started = std::time::Instant::now();
    for case in 0..100 {
        let dim = rng.random_range(2..=16);
        let n_neg = rng.random_range(1..=8);
        let n_views = rng.random_range(1..=4);
        let tau = [0.05, 0.1, 0.5][case % 3];
        let mut vec = || (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
        let q: Vec<Vec<f64>> = (0..n_views).map(|_| vec()).collect();
        let kt = vec();
        let ki = vec();
        let negs: Vec<Vec<f64>> = (0..n_neg).map(|_| vec()).collect();
        let ds = DirectionSet {
            query: q.iter().cloned().map(Direction::unlabelled).collect(),
            pos_text: Direction::unlabelled(kt.clone()),
            pos_image: Direction::unlabelled(ki.clone()),
            negatives: negs.iter().cloned().map(Direction::unlabelled).collect(),
        };
        let got = clip_nce_loss(&ds, tau).unwrap();
        let want = brute_force(&q, &kt, &ki, &negs, tau);
        assert!(
            (got - want).abs() <= 1e-6 * want.abs(),
            "case {case}: {got} vs {want} (dim {dim}, {n_neg} negatives, tau {tau})"
        );
    }
    assert!(started.elapsed().as_secs_f64() < 5.0);
}

#[test]
fn aligned_two_dimensional_case() {
    let ds = DirectionSet {
        query: vec![Direction::unlabelled(vec![1.0, 0.0])],
        pos_text: Direction::unlabelled(vec![1.0, 0.0]),
        pos_image: Direction::unlabelled(vec![1.0, 0.0]),
        negatives: vec![Direction::unlabelled(vec![0.0, 1.0])],
    };
    let want = 2.0 * (1.0 + (-10.0f64).exp()).ln();
    let got = clip_nce_loss(&ds, 0.1).unwrap();
    assert!((got - want).abs() < 1e-15);
    assert!((got - 9.07978e-5).abs() < 1e-9);
}
