use nalgebra::{DMatrix, SymmetricEigen};
use proptest::prelude::*;
use rand::RngExt;
use unitrans_core::encoder::{EncoderConfig, SentenceEncoder};
use unitrans_core::evalkit::{corpus_bleu, language_purity, project_2d, purity_summary, similarity_eval};
use unitrans_core::seeding;
use unitrans_core::synthlang::UnitLayout;
use unitrans_core::{Error, LangId, SentenceEmbedding};

#[test]
fn bleu_brevity_penalty_example() {
    let r = corpus_bleu(&[vec![1, 2, 3, 4]], &[vec![1, 2, 3, 4, 5]], 4, false).unwrap();
    assert_eq!(r.precisions, vec![1.0; 4]);
    let bp = (-0.25f64).exp();
    assert!((r.brevity_penalty - bp).abs() < 1e-12);
    assert!((r.score - 77.88).abs() < 5e-3, "{}", r.score);
}

#[test]
fn bleu_score_matches_its_components() {
    let hyps = vec![vec![1, 2, 3, 9, 5, 6], vec![7, 8, 1, 2]];
    let refs = vec![vec![1, 2, 3, 4, 5, 6, 7], vec![7, 8, 1, 2, 3]];
    let r = corpus_bleu(&hyps, &refs, 4, false).unwrap();
    let geo = (r.precisions.iter().map(|p| p.ln()).sum::<f64>() / 4.0).exp();
    assert!((r.score - r.brevity_penalty * geo * 100.0).abs() < 1e-6);
    // p4 counts: [1,2,3,9] [2,3,9,5] [3,9,5,6] and [7,8,1,2]; one match.
    assert!((r.precisions[3] - 0.25).abs() < 1e-12);
}

#[test]
fn bleu_zero_precision_and_smoothing() {
    let hyps = vec![vec![1, 2, 3]];
    let refs = vec![vec![1, 3, 2]];
    assert_eq!(corpus_bleu(&hyps, &refs, 4, false).unwrap().score, 0.0);
    assert!(corpus_bleu(&hyps, &refs, 4, true).unwrap().score > 0.0);
}

proptest! {
    #[test]
    fn bleu_self_is_100(h in proptest::collection::vec(proptest::collection::vec(0u32..30, 1..20), 1..8)) {
        prop_assert!((corpus_bleu(&h, &h, 4, false).unwrap().score - 100.0).abs() < 1e-9);
    }

    #[test]
    fn bleu_permutation_invariant(
        pairs in proptest::collection::vec(
            (proptest::collection::vec(0u32..6, 4..12), proptest::collection::vec(0u32..6, 4..12)), 2..8),
        rot in 0usize..8,
    ) {
        let (h, r): (Vec<_>, Vec<_>) = pairs.iter().cloned().unzip();
        let mut p2 = pairs.clone();
        let k = rot % p2.len();
        p2.rotate_left(k);
        p2.reverse();
        let (h2, r2): (Vec<_>, Vec<_>) = p2.into_iter().unzip();
        let a = corpus_bleu(&h, &r, 4, false).unwrap();
        let b = corpus_bleu(&h2, &r2, 4, false).unwrap();
        prop_assert_eq!(a, b);
    }
}

#[test]
fn purity_summary_counts_foreign_tokens() {
    let layout: UnitLayout = "a:0:10,b:10:10".parse().unwrap();
    let a = LangId::new("a").unwrap();
    let outs = vec![vec![1, 2, 3, 4], vec![11, 12, 13, 5], vec![]];
    let s = purity_summary(&outs, &a, &layout).unwrap();
    assert_eq!((s.tokens, s.wrong_language, s.empty), (8, 1, 1));
    assert!((s.out_of_range - 3.0 / 8.0).abs() < 1e-12);
    let p = language_purity(&[11, 12], &layout);
    assert!(p.out_of_range >= 0.0 && p.out_of_range <= 1.0);
}

#[test]
fn similarity_of_identical_lists_is_one() {
    let enc = SentenceEncoder::new(EncoderConfig::new(50), 3).unwrap();
    let seqs: Vec<Vec<u32>> = (0..20)
        .map(|i| (0..(3 + i % 7)).map(|j| (i * 3 + j) % 50).collect())
        .collect();
    let r = similarity_eval(&enc, &seqs, &seqs).unwrap();
    assert_eq!(r.count, 20);
    assert!(r.per_pair.iter().all(|c| (c - 1.0).abs() < 1e-6));
    assert!((r.mean - r.per_pair.iter().sum::<f64>() / 20.0).abs() < 1e-15);
}

#[test]
fn similarity_reports_empty_index() {
    let enc = SentenceEncoder::new(EncoderConfig::new(10), 3).unwrap();
    let t = vec![vec![1, 2], vec![]];
    let r = vec![vec![1, 2], vec![3]];
    match similarity_eval(&enc, &t, &r) {
        Err(Error::EmptyInput(msg)) => assert!(msg.contains('1'), "{msg}"),
        other => panic!("expected empty-input error, got {other:?}"),
    }
}

fn emb(v: &[f64]) -> SentenceEmbedding {
    SentenceEmbedding::new(v.iter().map(|&x| x as f32).collect()).unwrap()
}

#[test]
fn pca_matches_dense_eigensolver() {
    for seed in 0..5 {
        let mut rng = seeding::rng(seed);
        let rows: Vec<Vec<f64>> = (0..10)
            .map(|_| {
                (0..8)
                    .map(|j| rng.random_range(-1.0..1.0) * (1.0 + j as f64 * 0.3))
                    .collect()
            })
            .collect();
        let embs: Vec<SentenceEmbedding> = rows.iter().map(|r| emb(r)).collect();
        // Oracle on the same f32-rounded data.
        let data: Vec<f64> = embs
            .iter()
            .flat_map(|e| e.values.iter().map(|&x| f64::from(x)))
            .collect();
        let x = DMatrix::from_row_slice(10, 8, &data);
        let mean = x.row_mean();
        let centred = DMatrix::from_fn(10, 8, |i, j| x[(i, j)] - mean[j]);
        let cov = centred.transpose() * &centred / 10.0;
        let mut eig: Vec<f64> = SymmetricEigen::new(cov).eigenvalues.iter().copied().collect();
        eig.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let p = project_2d(&embs, 1).unwrap();
        let total: f64 = eig.iter().sum();
        let got = (p.explained[0] + p.explained[1]) / p.total_variance;
        let want = (eig[0] + eig[1]) / total;
        assert!((got - want).abs() < 1e-4, "seed {seed}: {got} vs {want}");
    }
}

#[test]
fn pca_preserves_planar_distances() {
    let pts = [[0.0, 0.0], [3.0, 0.0], [0.0, 1.0], [-2.0, -0.5], [1.0, 2.0]];
    let embs: Vec<SentenceEmbedding> = pts.iter().map(|p| emb(&[p[0], p[1], 0.0, 0.0])).collect();
    let proj = project_2d(&embs, 2).unwrap();
    for i in 0..pts.len() {
        for j in 0..pts.len() {
            let d0 = ((pts[i][0] - pts[j][0]).powi(2) + (pts[i][1] - pts[j][1]).powi(2)).sqrt();
            let (a, b) = (proj.points[i], proj.points[j]);
            let d1 = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
            assert!((d0 - d1).abs() < 1e-4, "{d0} vs {d1}");
        }
    }
}

#[test]
fn pca_keeps_collinear_points_collinear() {
    let embs: Vec<SentenceEmbedding> = [0.0, 1.0, 2.5]
        .iter()
        .map(|&t| emb(&[1.0 + t, 2.0 - 2.0 * t, 0.5 * t, 3.0]))
        .collect();
    let p = project_2d(&embs, 3).unwrap().points;
    let cross = (p[1][0] - p[0][0]) * (p[2][1] - p[0][1]) - (p[1][1] - p[0][1]) * (p[2][0] - p[0][0]);
    assert!(cross.abs() < 1e-6, "{cross}");
}

#[test]
fn pca_rejects_degenerate_and_tiny_inputs() {
    let same = vec![emb(&[1.0, 2.0]); 4];
    assert!(matches!(project_2d(&same, 1), Err(Error::DegenerateProjection(_))));
    assert!(matches!(project_2d(&same[..2], 1), Err(Error::Usage(_))));
}
