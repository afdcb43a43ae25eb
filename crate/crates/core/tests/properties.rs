use std::path::Path;

use cashash::feature_io::{
    decode_features, encode_features, format_matches, load_matches, Descriptor, FeatureSet,
    Keypoint, MatchRecord,
};
use cashash::hashing::{
    build_hash_family, decode_code_cache, dot128, encode_code_cache, set_centering, LongCode,
    SwitchRounds,
};
use proptest::prelude::*;

fn keypoint() -> impl Strategy<Value = Keypoint> {
    (0.0f32..4000.0, 0.0f32..3000.0, 0.1f32..64.0, -3.14f32..3.14)
        .prop_map(|(x, y, s, o)| Keypoint::new(x, y, s, o))
}

fn descriptor() -> impl Strategy<Value = Descriptor> {
    proptest::collection::vec(any::<u8>(), 128)
        .prop_map(|v| Descriptor(v.try_into().unwrap()))
}

fn feature_set(max: usize) -> impl Strategy<Value = FeatureSet> {
    proptest::collection::vec((keypoint(), descriptor()), 0..max).prop_map(|points| {
        let (kps, descs) = points.into_iter().unzip();
        FeatureSet::new("img", kps, descs).unwrap()
    })
}

fn long_code() -> impl Strategy<Value = LongCode> {
    (any::<[u64; 2]>(), 1u32..=128).prop_map(|(w, len)| LongCode::from_words(w, len))
}

proptest! {
    #[test]
    fn features_round_trip(fs in feature_set(20)) {
        let bytes = encode_features(&fs).unwrap();
        let back = decode_features(&bytes, Path::new("mem")).unwrap();
        prop_assert_eq!(back.keypoints, fs.keypoints);
        prop_assert_eq!(back.descriptors, fs.descriptors);
    }

    #[test]
    fn truncated_features_are_rejected(fs in feature_set(6), cut in 1usize..200) {
        let bytes = encode_features(&fs).unwrap();
        let keep = bytes.len().saturating_sub(cut);
        prop_assert!(decode_features(&bytes[..keep], Path::new("mem")).is_err());
    }

    #[test]
    fn matches_round_trip(records in proptest::collection::vec((any::<u32>(), any::<u32>(), 0.0f32..1e7), 0..40)) {
        let matches: Vec<MatchRecord> = records.into_iter().map(|(q, t, d)| MatchRecord::new(q, t, d)).collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.txt");
        std::fs::write(&path, format_matches(("a", "b"), &matches)).unwrap();
        let ((i, j), back) = load_matches(&path).unwrap();
        prop_assert_eq!((i.as_str(), j.as_str()), ("a", "b"));
        prop_assert_eq!(back, matches);
    }

    #[test]
    fn hamming_is_a_metric(a in long_code(), bw in any::<[u64; 2]>(), cw in any::<[u64; 2]>()) {
        let b = LongCode::from_words(bw, a.len());
        let c = LongCode::from_words(cw, a.len());
        prop_assert_eq!(a.distance(&a), 0);
        prop_assert_eq!(a.distance(&b), b.distance(&a));
        prop_assert!(a.distance(&c) <= a.distance(&b) + b.distance(&c));
        prop_assert_eq!(a.distance(&a.complement()), a.len());
        prop_assert_eq!(a.distance(&b) + a.distance(&b.complement()), a.len());
    }

    #[test]
    fn code_cache_round_trip(fs in feature_set(12), seed in any::<u64>()) {
        prop_assume!(!fs.is_empty());
        let family = set_centering(build_hash_family(seed, 8, 128, 6).unwrap(), &fs.descriptors).unwrap();
        let codes = family.encode(&fs).unwrap();
        let bytes = encode_code_cache(&codes);
        let back = decode_code_cache(&bytes, &family.echo(), Some(fs.len()), Path::new("mem")).unwrap();
        prop_assert_eq!(back, Some(codes));
    }

    /// Code bits do not depend on the reduction switch point unless the
    /// projection is within rounding noise of the hyperplane.
    #[test]
    fn code_signs_are_stable_across_switch_points(fs in feature_set(8), seed in any::<u64>()) {
        prop_assume!(!fs.is_empty());
        let family = set_centering(build_hash_family(seed, 8, 64, 2).unwrap(), &fs.descriptors).unwrap();
        for d in &fs.descriptors {
            let c = family.center(d);
            let norm: f32 = c.iter().map(|v| v * v).sum::<f32>().sqrt();
            for bit in 0..64 {
                let plane = family.long_hyperplane(bit);
                let reference = dot128(&c, plane, SwitchRounds::DEFAULT);
                if reference.abs() <= 1e-3 * norm.max(1.0) {
                    continue;
                }
                for r in SwitchRounds::all() {
                    prop_assert_eq!(dot128(&c, plane, r) > 0.0, reference > 0.0);
                }
            }
        }
    }
}
