mod common;

use common::oracles::{brute_force_matching, brute_overlap, random_instance};
use ctscreen_core::eval::{
    iou, match_detections, overlap, pd_pfa, precision_recall, DetCounts, MatchMode, PfaMode,
};
use ctscreen_core::postproc::{Detection, DetectionSet};
use ctscreen_core::volume::LabelVolume;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const DIMS: [usize; 3] = [10, 10, 10];

fn det(class: u8, voxels: &[usize]) -> Detection {
    Detection::from_voxels(class, voxels.to_vec(), DIMS, [1.0; 3])
}

fn set(detections: Vec<Detection>) -> DetectionSet {
    DetectionSet {
        dims: DIMS,
        spacing_mm: [1.0; 3],
        detections,
    }
}

fn pairs(m: &[ctscreen_core::eval::MatchPair]) -> Vec<(usize, usize)> {
    let mut v: Vec<_> = m.iter().map(|p| (p.det, p.gt)).collect();
    v.sort_by_key(|p| p.1);
    v
}

fn pct(n: usize, d: usize) -> Option<f64> {
    (d > 0).then(|| 100.0 * n as f64 / d as f64)
}

#[test]
fn matching_agrees_with_exhaustive_assignment() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut nontrivial = 0;
    for _ in 0..50 {
        let (dets, gts) = random_instance(&mut rng);
        for (mode, strict) in [(MatchMode::ClassRequired, true), (MatchMode::ClassAgnostic, false)] {
            let got = match_detections(&dets, &gts, mode).unwrap();
            let expect = brute_force_matching(&dets, &gts, strict);
            assert_eq!(pairs(&got), expect);
            if !expect.is_empty() {
                nontrivial += 1;
            }
            for m in &got {
                assert_eq!(m.overlap, brute_overlap(&dets.detections[m.det], &gts.detections[m.gt]));
            }
        }

        // Metrics recomputed by direct counting over the oracle matchings.
        let strict = brute_force_matching(&dets, &gts, true);
        let loose = brute_force_matching(&dets, &gts, false);
        let pr = precision_recall(&match_detections(&dets, &gts, MatchMode::ClassRequired).unwrap(), &dets, &gts);
        for c in 1..4u8 {
            let tp = strict.iter().filter(|p| gts.detections[p.1].class == c).count();
            let nd = dets.detections.iter().filter(|d| d.class == c).count();
            let ng = gts.detections.iter().filter(|d| d.class == c).count();
            assert_eq!(pr.per_class[c as usize], (pct(tp, nd), pct(tp, ng)));
        }
        assert_eq!(
            pr.overall,
            (pct(strict.len(), dets.detections.len()), pct(strict.len(), gts.detections.len()))
        );
        let pp = pd_pfa(&match_detections(&dets, &gts, MatchMode::ClassAgnostic).unwrap(), &dets, &gts);
        assert_eq!(pp.pd, pct(loose.len(), gts.detections.len()));
        assert_eq!(pp.pfa, pct(dets.detections.len() - loose.len(), dets.detections.len()).unwrap_or(0.0));
    }
    assert!(nontrivial > 20, "only {nontrivial} instances had matches");
}

#[test]
fn matching_examples() {
    let a = det(1, &[0, 1, 2, 3]);
    let b = det(2, &[50, 51]);
    let gts = set(vec![a.clone(), b.clone()]);
    let m = match_detections(&set(vec![b.clone(), a.clone()]), &gts, MatchMode::ClassRequired).unwrap();
    assert_eq!(pairs(&m), vec![(1, 0), (0, 1)]);
    assert!(match_detections(&set(vec![]), &gts, MatchMode::ClassAgnostic).unwrap().is_empty());

    // Two candidates cover 80% and 60% of one object.
    let g: Vec<usize> = (0..10).collect();
    let d80 = det(1, &[0, 1, 2, 3, 4, 5, 6, 7, 100]);
    let d60 = det(1, &[4, 5, 6, 7, 8, 9, 200]);
    let dets = set(vec![d60, d80]);
    let gts = set(vec![det(1, &g)]);
    let m = match_detections(&dets, &gts, MatchMode::ClassAgnostic).unwrap();
    assert_eq!(pairs(&m), vec![(1, 0)]);
    let pp = pd_pfa(&m, &dets, &gts);
    assert_eq!((pp.pd, pp.pfa), (Some(100.0), 50.0));
}

#[test]
fn precision_recall_examples() {
    let objs: Vec<Detection> = (0..3).map(|i| det(1 + i as u8, &[i * 100, i * 100 + 1])).collect();
    let gts = set(objs.clone());
    let m = match_detections(&gts, &gts, MatchMode::ClassRequired).unwrap();
    let pr = precision_recall(&m, &gts, &gts);
    for c in 1..4 {
        assert_eq!(pr.per_class[c], (Some(100.0), Some(100.0)));
    }

    let one = set(vec![objs[0].clone()]);
    let pr = precision_recall(&[], &set(vec![]), &one);
    assert_eq!(pr.per_class[1], (None, Some(0.0)));
    assert_eq!(pr.per_class[2], (None, None));

    let mut four = objs.clone();
    four.push(det(1, &[900]));
    let dets = set(four);
    let m = match_detections(&dets, &gts, MatchMode::ClassRequired).unwrap();
    let pr = precision_recall(&m, &dets, &gts);
    assert_eq!(pr.overall, (Some(75.0), Some(100.0)));
}

#[test]
fn pd_pfa_examples() {
    // Wrong class still counts toward PD, not recall.
    let gts = set(vec![det(1, &[0, 1, 2])]);
    let dets = set(vec![det(3, &[0, 1, 2])]);
    let mut counts = DetCounts::default();
    counts.add(&dets, &gts).unwrap();
    let pp = counts.pd_pfa(PfaMode::PerDetection);
    assert_eq!((pp.pd, pp.pd_per_class[1], pp.pfa), (Some(100.0), Some(100.0), 0.0));
    assert_eq!(counts.precision_recall().per_class[1].1, Some(0.0));

    // 10 detections, 8 matched.
    let gts = set((0..8).map(|i| det(1, &[i * 10])).collect());
    let dets = set((0..10).map(|i| det(1, &[i * 10])).collect());
    let mut counts = DetCounts::default();
    counts.add(&dets, &gts).unwrap();
    assert_eq!(counts.pd_pfa(PfaMode::PerDetection).pfa, 20.0);
    assert_eq!(counts.pd_pfa(PfaMode::PerBag).pfa, 100.0);

    let empty = DetCounts::default();
    assert_eq!(empty.pd_pfa(PfaMode::PerDetection).pfa, 0.0);
}

#[test]
fn iou_examples() {
    let a = LabelVolume::new([1, 1, 4], vec![1, 1, 0, 0]).unwrap();
    let b = LabelVolume::new([1, 1, 4], vec![0, 1, 1, 0]).unwrap();
    assert_eq!(iou(&a, &b).unwrap().per_class[1], 1.0 / 3.0);
    let s = iou(&a, &a).unwrap();
    assert_eq!((s.per_class, s.mean), ([1.0; 4], 1.0));
    let c = LabelVolume::new([1, 1, 4], vec![0, 0, 1, 1]).unwrap();
    assert_eq!(iou(&a, &c).unwrap().per_class[1], 0.0);
    assert!(iou(&a, &LabelVolume::background([1, 1, 3])).is_err());
}

/// Drops voxels already claimed by an earlier detection of any class, as
/// for components of a single label map.
fn disjoint(s: &DetectionSet) -> DetectionSet {
    let mut taken = std::collections::HashSet::new();
    let mut out = Vec::new();
    for d in &s.detections {
        let v: Vec<usize> = d.voxels.iter().copied().filter(|v| !taken.contains(v)).collect();
        taken.extend(v.iter().copied());
        if !v.is_empty() {
            out.push(det(d.class, &v));
        }
    }
    set(out)
}

fn shuffled(s: &DetectionSet, rng: &mut ChaCha8Rng) -> DetectionSet {
    let mut d = s.detections.clone();
    d.shuffle(rng);
    set(d)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn pd_at_least_recall(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (dets, gts) = random_instance(&mut rng);
        let dets = disjoint(&dets);
        let mut counts = DetCounts::default();
        counts.add(&dets, &gts).unwrap();
        let recall = counts.precision_recall().overall.1;
        let pd = counts.pd_pfa(PfaMode::PerDetection).pd;
        prop_assert_eq!(recall.is_some(), pd.is_some());
        if let (Some(r), Some(p)) = (recall, pd) {
            prop_assert!(p >= r);
        }
    }

    #[test]
    fn metrics_ignore_detection_order(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (dets, gts) = random_instance(&mut rng);
        let mut a = DetCounts::default();
        a.add(&dets, &gts).unwrap();
        let mut b = DetCounts::default();
        b.add(&shuffled(&dets, &mut rng), &shuffled(&gts, &mut rng)).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn iou_symmetric_and_bounded(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = LabelVolume::new([4, 4, 4], (0..64).map(|_| rng.random_range(0..4)).collect()).unwrap();
        let g = LabelVolume::new([4, 4, 4], (0..64).map(|_| rng.random_range(0..4)).collect()).unwrap();
        let a = iou(&p, &g).unwrap();
        let b = iou(&g, &p).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert!(a.per_class.iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert!((a.mean - a.per_class.iter().sum::<f64>() / 4.0).abs() < 1e-15);
    }

    #[test]
    fn overlap_matches_brute_force(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (dets, gts) = random_instance(&mut rng);
        for d in &dets.detections {
            for g in &gts.detections {
                prop_assert_eq!(overlap(d, g), brute_overlap(d, g));
            }
        }
    }
}
