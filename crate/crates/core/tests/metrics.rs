use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spotlight_core::metrics::{
    confusion_matrix, f1_score, precision_recall_f1, sequence_overlap, top_attention_events,
    AttentionOptions, AttentionRecord,
};
use spotlight_core::model::{AttentionMask, MaskProjection};
use spotlight_core::pathway::{CodeVocabulary, InputImage, RemapTable};

/// Counts by scanning every pair for every class; no maps.
fn brute_scores(preds: &[u8], truths: &[u8]) -> Vec<(u8, f64, f64, f64)> {
    let mut classes: Vec<u8> = preds.iter().chain(truths).copied().collect();
    classes.sort();
    classes.dedup();
    classes
        .into_iter()
        .map(|c| {
            let tp = (0..preds.len())
                .filter(|&i| preds[i] == c && truths[i] == c)
                .count() as f64;
            let pp = preds.iter().filter(|&&p| p == c).count() as f64;
            let ap = truths.iter().filter(|&&t| t == c).count() as f64;
            let p = if pp == 0.0 { 0.0 } else { tp / pp };
            let r = if ap == 0.0 { 0.0 } else { tp / ap };
            let f = if p + r == 0.0 {
                0.0
            } else {
                2.0 * p * r / (p + r)
            };
            (c, p, r, f)
        })
        .collect()
}

/// Multiset intersection by repeatedly removing matched items.
fn brute_overlap(pred: &[u8], truth: &[u8]) -> (f64, f64) {
    if pred.is_empty() && truth.is_empty() {
        return (1.0, 1.0);
    }
    let mut rest = truth.to_vec();
    let mut inter = 0;
    for p in pred {
        if let Some(i) = rest.iter().position(|t| t == p) {
            rest.remove(i);
            inter += 1;
        }
    }
    let union = pred.len() + truth.len() - inter;
    (
        2.0 * inter as f64 / (pred.len() + truth.len()) as f64,
        inter as f64 / union as f64,
    )
}

#[test]
fn scores_match_brute_force_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    for case in 0..50 {
        let n = rng.random_range(1..40);
        let k = rng.random_range(1..6u8);
        let truths: Vec<u8> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let preds: Vec<u8> = (0..n).map(|_| rng.random_range(0..k)).collect();

        let got = precision_recall_f1(&preds, &truths).unwrap();
        let want = brute_scores(&preds, &truths);
        assert_eq!(got.len(), want.len(), "case {case}");
        for (g, (c, p, r, f)) in got.iter().zip(want) {
            assert_eq!(g.class, c);
            assert!(
                (g.precision - p).abs() < 1e-9
                    && (g.recall - r).abs() < 1e-9
                    && (g.f1 - f).abs() < 1e-9
            );
        }

        let cm = confusion_matrix(&preds, &truths).unwrap();
        for (ri, t) in cm.labels.iter().enumerate() {
            for (ci, p) in cm.labels.iter().enumerate() {
                let count = (0..n)
                    .filter(|&i| truths[i] == *t && preds[i] == *p)
                    .count();
                assert_eq!(cm.counts[ri][ci], count);
                let row = truths.iter().filter(|&&x| x == *t).count();
                let pct = if row == 0 {
                    0.0
                } else {
                    100.0 * count as f64 / row as f64
                };
                assert!((cm.percent[ri][ci] - pct).abs() < 1e-9);
            }
        }

        let a: Vec<u8> = (0..rng.random_range(0..4))
            .map(|_| rng.random_range(0..k))
            .collect();
        let b: Vec<u8> = (0..rng.random_range(0..4))
            .map(|_| rng.random_range(0..k))
            .collect();
        let o = sequence_overlap(&a, &b);
        let (dice, iou) = brute_overlap(&a, &b);
        assert!(
            (o.dice - dice).abs() < 1e-9 && (o.iou - iou).abs() < 1e-9,
            "{a:?} {b:?}"
        );
    }
}

#[test]
fn birth_outcome_f1_rounds_to_0_997() {
    let f = f1_score(0.999, 0.996);
    assert!((f - 0.997).abs() < 5e-4, "{f}");
    assert_eq!(format!("{f:.3}"), "0.997");
}

fn vocab(n: usize) -> CodeVocabulary {
    let mut v = CodeVocabulary::new(RemapTable::new());
    for i in 0..n {
        v.insert("SYS", &format!("C{i}"), "observations");
    }
    v
}

proptest! {
    #[test]
    fn confusion_rows_sum_to_support(pairs in proptest::collection::vec((0u8..5, 0u8..5), 1..60)) {
        let (preds, truths): (Vec<u8>, Vec<u8>) = pairs.into_iter().unzip();
        let cm = confusion_matrix(&preds, &truths).unwrap();
        let scores = precision_recall_f1(&preds, &truths).unwrap();
        for (ri, label) in cm.labels.iter().enumerate() {
            let support = truths.iter().filter(|&t| t == label).count();
            prop_assert_eq!(cm.counts[ri].iter().sum::<usize>(), support);
            if support > 0 {
                prop_assert!((cm.percent[ri].iter().sum::<f64>() - 100.0).abs() < 1e-9);
            }
            let s = scores.iter().find(|s| s.class == *label).unwrap();
            prop_assert_eq!(s.support(), support);
            prop_assert_eq!(s.true_positives, cm.counts[ri][ri]);
        }
        for s in &scores {
            prop_assert!((0.0..=1.0).contains(&s.f1));
            prop_assert!((s.f1 - f1_score(s.precision, s.recall)).abs() < 1e-12);
            prop_assert!(s.f1 <= s.precision.max(s.recall) + 1e-12);
            prop_assert!(s.f1 >= s.precision.min(s.recall) - 1e-12);
        }
    }

    #[test]
    fn overlap_is_symmetric_and_bounded(a in proptest::collection::vec(0u8..4, 0..5), b in proptest::collection::vec(0u8..4, 0..5)) {
        let ab = sequence_overlap(&a, &b);
        let ba = sequence_overlap(&b, &a);
        prop_assert_eq!(ab, ba);
        prop_assert!((0.0..=1.0).contains(&ab.dice) && ab.iou <= ab.dice + 1e-12);
        let same = sequence_overlap(&a, &a);
        prop_assert_eq!(same.dice, 1.0);
    }

    #[test]
    fn top_events_ignore_record_order(seed in 0u64..100_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w) = (2, 6);
        let projection = MaskProjection::nearest(2, 3, h, w);
        let inputs: Vec<InputImage> = (0..4)
            .map(|_| InputImage {
                height: h,
                width: w,
                cells: (0..h * w).map(|_| if rng.random_bool(0.5) { rng.random_range(1..=5) } else { 0 }).collect(),
            })
            .collect();
        let masks: Vec<Vec<AttentionMask>> = (0..4)
            .map(|_| {
                let raw: Vec<f64> = (0..6).map(|_| rng.random_range(0.0..1.0)).collect();
                let total: f64 = raw.iter().sum();
                vec![AttentionMask { rows: 2, cols: 3, values: raw.iter().map(|v| v / total).collect() }]
            })
            .collect();
        let v = vocab(5);
        let opts = AttentionOptions { threshold: 0.5, ..Default::default() };
        let records: Vec<_> = inputs.iter().zip(&masks)
            .map(|(input, m)| AttentionRecord { input, masks: m, projection: &projection })
            .collect();
        let forward = top_attention_events(&records, &v, &opts).unwrap();
        let mut reversed = records.clone();
        reversed.reverse();
        prop_assert_eq!(forward, top_attention_events(&reversed, &v, &opts).unwrap());
    }
}
