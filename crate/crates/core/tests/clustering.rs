use proptest::prelude::*;
use rand_distr::{Distribution, StandardNormal};
use spkdino::clustering::{ahc, dense_labels, kmeans, pairwise_f1, pseudo_label_embeddings, purity};
use spkdino::rng;

fn normal(r: &mut rng::Rng) -> f64 {
    StandardNormal.sample(r)
}

fn blobs(centers: &[Vec<f64>], per: usize, sigma: f64, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut r = rng::seeded(seed);
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (c, ctr) in centers.iter().enumerate() {
        for _ in 0..per {
            xs.push(ctr.iter().map(|m| m + sigma * normal(&mut r)).collect());
            ys.push(c);
        }
    }
    (xs, ys)
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for i in 0..=p.len() {
            let mut q = p.clone();
            q.insert(i, n - 1);
            out.push(q);
        }
    }
    out
}

/// Best agreement over all relabelings of the predicted clusters.
fn best_permutation_accuracy(pred: &[usize], truth: &[usize], k: usize) -> f64 {
    permutations(k)
        .iter()
        .map(|p| pred.iter().zip(truth).filter(|(a, b)| p[**a] == **b).count() as f64 / pred.len() as f64)
        .fold(0.0, f64::max)
}

#[test]
fn separated_blobs_are_recovered() {
    let s = 10.0 / 2f64.sqrt();
    let centers = vec![vec![s, 0.0, 0.0], vec![0.0, s, 0.0], vec![0.0, 0.0, s]];
    let (xs, ys) = blobs(&centers, 30, 0.1, 1);
    for seed in 0..5 {
        let km = kmeans(&xs, 3, 100, seed).unwrap();
        assert_eq!(best_permutation_accuracy(&km.assignment, &ys, 3), 1.0);
        assert_eq!(purity(&km.assignment, &ys), 1.0);
    }
}

fn cos_dist(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    1.0 - d / (na * nb)
}

/// Greedy merging with average linkage recomputed from the members at every step.
fn ahc_oracle(xs: &[Vec<f64>], n_clusters: usize) -> Vec<usize> {
    let mut clusters: Vec<Vec<usize>> = (0..xs.len()).map(|i| vec![i]).collect();
    while clusters.len() > n_clusters {
        let mut best = (f64::INFINITY, 0, 0);
        for i in 0..clusters.len() {
            for j in i + 1..clusters.len() {
                let mut s = 0.0;
                for &a in &clusters[i] {
                    for &b in &clusters[j] {
                        s += cos_dist(&xs[a], &xs[b]);
                    }
                }
                let d = s / (clusters[i].len() * clusters[j].len()) as f64;
                if d < best.0 {
                    best = (d, i, j);
                }
            }
        }
        let moved = clusters.remove(best.2);
        clusters[best.1].extend(moved);
    }
    let mut labels = vec![0; xs.len()];
    for (c, m) in clusters.iter().enumerate() {
        for &i in m {
            labels[i] = c;
        }
    }
    dense_labels(&labels)
}

#[test]
fn two_tight_groups() {
    let xs = vec![
        vec![1.0, 0.05],
        vec![0.0, 1.0],
        vec![1.0, 0.0],
        vec![0.05, 1.0],
        vec![1.0, -0.05],
        vec![-0.05, 1.0],
    ];
    let got = ahc(&xs, 2).unwrap();
    assert_eq!(got, vec![0, 1, 0, 1, 0, 1]);
    assert_eq!(got, ahc_oracle(&xs, 2));
}

#[test]
fn pseudo_labels_of_blobs_match_truth() {
    let centers: Vec<Vec<f64>> = (0..4)
        .map(|c| (0..4).map(|d| if c == d { 1.0 } else { 0.0 }).collect())
        .collect();
    let (xs, ys) = blobs(&centers, 20, 0.05, 4);
    let lab = pseudo_label_embeddings(&xs, 16, 4, 0).unwrap();
    assert_eq!(purity(&lab, &ys), 1.0);
    assert_eq!(pairwise_f1(&lab, &ys), 1.0);
    assert!(pseudo_label_embeddings(&xs, 3, 4, 0).is_err());
}

fn points(n: std::ops::Range<usize>, d: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-5.0f64..5.0, d), n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn kmeans_inertia_never_increases(xs in points(5..40, 3), k in 1usize..6, seed in 0u64..100) {
        let k = k.min(xs.len());
        let km = kmeans(&xs, k, 50, seed).unwrap();
        for w in km.inertia.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-9 * w[0].abs().max(1.0));
        }
        prop_assert_eq!(km.assignment.len(), xs.len());
        prop_assert!(km.assignment.iter().all(|&a| a < k));
        prop_assert_eq!(kmeans(&xs, k, 50, seed).unwrap(), km);
    }

    #[test]
    fn ahc_matches_exhaustive_oracle(xs in points(2..9, 3), n in 1usize..5) {
        let n = n.min(xs.len());
        let got = ahc(&xs, n).unwrap();
        prop_assert_eq!(&got, &ahc_oracle(&xs, n));
        prop_assert_eq!(got.iter().max().unwrap() + 1, n);
        prop_assert_eq!(ahc(&xs, n).unwrap(), got);
    }

    #[test]
    fn metrics_ignore_label_names(pred in prop::collection::vec(0usize..4, 2..30), shift in 1usize..10) {
        let truth: Vec<usize> = (0..pred.len()).map(|i| i % 3).collect();
        let renamed: Vec<usize> = pred.iter().map(|p| (p + shift) * 7).collect();
        prop_assert_eq!(purity(&pred, &truth), purity(&renamed, &truth));
        prop_assert_eq!(pairwise_f1(&pred, &truth), pairwise_f1(&renamed, &truth));
        let p = purity(&pred, &truth);
        prop_assert!((0.0..=1.0).contains(&p));
    }
}
