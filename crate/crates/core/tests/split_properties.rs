use std::collections::{BTreeSet, HashSet};

use proptest::prelude::*;
use voxkit::corpus::{
    corpus_stats, identification_split, verification_split, Gender, Manifest, ManifestRecord,
};
use voxkit::Error;

const NAMES: [&str; 6] = ["Ada", "Eve", "bob", "emil", "Zed", " Ezra"];

/// Per POI: name index and utterance counts per video.
fn layout() -> impl Strategy<Value = Vec<(usize, Vec<usize>)>> {
    prop::collection::vec((0..NAMES.len(), prop::collection::vec(1usize..9, 1..5)), 1..8)
}

fn manifest(layout: &[(usize, Vec<usize>)]) -> Manifest {
    let mut records = Vec::new();
    for (p, (name, videos)) in layout.iter().enumerate() {
        for (v, &count) in videos.iter().enumerate() {
            for u in 0..count {
                records.push(ManifestRecord {
                    poi_id: format!("p{p}"),
                    poi_name: NAMES[*name].to_string(),
                    gender: if p % 2 == 0 { Gender::Male } else { Gender::Female },
                    nationality: "UK".into(),
                    video_id: format!("p{p}v{v}"),
                    utterance_id: format!("p{p}v{v}u{u}"),
                    audio_path: format!("p{p}v{v}u{u}.wav"),
                    duration_s: 1.0 + (u as f64) * 0.5,
                });
            }
        }
    }
    Manifest::new(records).unwrap()
}

fn ids(m: &Manifest) -> HashSet<String> {
    m.records.iter().map(|r| r.utterance_id.clone()).collect()
}

fn pois(m: &Manifest) -> BTreeSet<String> {
    m.records.iter().map(|r| r.poi_id.clone()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn identification_split_partitions(l in layout()) {
        let m = manifest(&l);
        let feasible = l.iter().all(|(_, v)| v.len() >= 2 && v.iter().any(|&n| n >= 5));
        match identification_split(&m) {
            Ok((dev, test)) => {
                prop_assert!(feasible);
                let (d, t) = (ids(&dev), ids(&test));
                prop_assert!(d.is_disjoint(&t));
                prop_assert_eq!(d.union(&t).cloned().collect::<HashSet<_>>(), ids(&m));
                prop_assert_eq!(pois(&dev), pois(&m));
                prop_assert_eq!(pois(&test), pois(&m));
                for poi in pois(&m) {
                    let vids: BTreeSet<_> = test.records.iter().filter(|r| r.poi_id == poi).map(|r| &r.video_id).collect();
                    prop_assert_eq!(vids.len(), 1);
                    prop_assert!(test.records.iter().filter(|r| r.poi_id == poi).count() >= 5);
                }
            }
            Err(Error::SplitInfeasible(_)) => prop_assert!(!feasible),
            Err(e) => prop_assert!(false, "unexpected error {e}"),
        }
    }

    #[test]
    fn verification_split_partitions(l in layout()) {
        let m = manifest(&l);
        let is_e = |i: usize| NAMES[i].trim().to_lowercase().starts_with('e');
        let has_e = l.iter().any(|(n, _)| is_e(*n));
        let has_other = l.iter().any(|(n, _)| !is_e(*n));
        match verification_split(&m) {
            Ok((dev, test)) => {
                prop_assert!(has_e && has_other);
                let (d, t) = (ids(&dev), ids(&test));
                prop_assert!(d.is_disjoint(&t));
                prop_assert_eq!(d.len() + t.len(), m.len());
                prop_assert!(pois(&dev).is_disjoint(&pois(&test)));
                prop_assert!(test.records.iter().all(|r| r.poi_name.trim().to_lowercase().starts_with('e')));
            }
            Err(Error::SplitInfeasible(_)) => prop_assert!(!(has_e && has_other)),
            Err(e) => prop_assert!(false, "unexpected error {e}"),
        }
    }

    #[test]
    fn stats_triples_are_ordered(l in layout()) {
        let s = corpus_stats(&manifest(&l)).unwrap();
        for t in [s.videos_per_poi, s.utterances_per_poi, s.utterance_length_s] {
            prop_assert!(t.min <= t.avg + 1e-12 && t.avg <= t.max + 1e-12);
        }
        prop_assert_eq!(s.pois, l.len());
        prop_assert_eq!(s.male_pois, l.len().div_ceil(2));
    }
}

#[test]
fn forty_of_1251_pois_are_held_out() {
    let mut records = Vec::new();
    for p in 0..1251 {
        let name = if p % 31 == 7 && p / 31 < 40 { format!("E{p}") } else { format!("N{p}") };
        records.push(ManifestRecord {
            poi_id: format!("id{p:05}"),
            poi_name: name,
            gender: Gender::Female,
            nationality: "USA".into(),
            video_id: format!("v{p}"),
            utterance_id: format!("u{p}"),
            audio_path: format!("u{p}.wav"),
            duration_s: 8.2,
        });
    }
    let m = Manifest::new(records).unwrap();
    let (dev, test) = verification_split(&m).unwrap();
    assert_eq!(pois(&test).len(), 40);
    assert_eq!(pois(&dev).len(), 1211);
}
