//! Search and Recall@N against exhaustive double-loop references.

use std::collections::HashMap;

use lgcn_core::head::Descriptor;
use lgcn_core::manifest::{Manifest, Record, Split};
use lgcn_core::retrieval::{brute_force_recall, evaluate, geodistance, search};
use lgcn_core::synth::offset_coord;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const N_VALUES: [usize; 4] = [1, 2, 5, 10];

fn unit(v: Vec<f64>) -> Descriptor {
    Descriptor::normalized(v).unwrap()
}

/// Random geotagged instance with at most `max_images` records. Some records
/// carry no place id, some places have no database image, and descriptors
/// are drawn from a tiny integer lattice so that similarity ties occur.
fn instance(seed: u64, max_images: usize) -> (Manifest, HashMap<u64, Descriptor>) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let places = r.random_range(2..=12);
    let n = r.random_range(4..=max_images);
    let mut records = Vec::new();
    let mut desc = HashMap::new();
    for id in 0..n as u64 {
        let place = r.random_range(0..places) as u64;
        let (lat, lon) = offset_coord(
            40.0 * place as f64 + r.random_range(-8.0..8.0),
            r.random_range(-8.0..8.0),
        );
        records.push(Record {
            id: id * 3 + 1,
            path: format!("{id}.ppm"),
            lat,
            lon,
            place_id: r.random_bool(0.7).then_some(place),
            split: if r.random_bool(0.5) { Split::Database } else { Split::Query },
        });
        let v: Vec<f64> = loop {
            let v: Vec<f64> = (0..4).map(|_| r.random_range(-2i32..=2) as f64).collect();
            if v.iter().any(|&x| x != 0.0) {
                break v;
            }
        };
        desc.insert(id * 3 + 1, unit(v));
    }
    let has_db = records.iter().any(|x| x.split == Split::Database);
    let has_q = records.iter().any(|x| x.split == Split::Query);
    if !has_db {
        records[0].split = Split::Database;
    }
    if !has_q {
        records[1].split = Split::Query;
    }
    (Manifest::new("inst", records).unwrap(), desc)
}

/// Double loop: for every query and every N, does any of the N most similar
/// database records (ties to the lower id) match?
fn oracle(m: &Manifest, d: &HashMap<u64, Descriptor>, threshold: f64) -> Option<Vec<f64>> {
    let matches = |q: &Record, x: &Record| {
        (q.place_id.is_some() && q.place_id == x.place_id) || geodistance(q.coord(), x.coord()).unwrap() <= threshold
    };
    let db: Vec<&Record> = m.records.iter().filter(|x| x.split == Split::Database).collect();
    let mut hits = [0usize; N_VALUES.len()];
    let mut total = 0;
    for q in m.records.iter().filter(|x| x.split == Split::Query) {
        if !db.iter().any(|x| matches(q, x)) {
            continue;
        }
        total += 1;
        for (i, &n) in N_VALUES.iter().enumerate() {
            let mut found = false;
            for x in &db {
                // rank of x = number of db items strictly ahead of it
                let sx = d[&q.id].dot(&d[&x.id]);
                let ahead = db
                    .iter()
                    .filter(|y| {
                        let sy = d[&q.id].dot(&d[&y.id]);
                        sy > sx || (sy == sx && y.id < x.id)
                    })
                    .count();
                if ahead < n && matches(q, x) {
                    found = true;
                }
            }
            hits[i] += found as usize;
        }
    }
    (total > 0).then(|| hits.iter().map(|&h| h as f64 / total as f64).collect())
}

#[test]
fn recall_equals_oracle_on_200_instances() {
    for seed in 0..200 {
        let (m, d) = instance(seed, 100);
        let want = oracle(&m, &d, 25.0);
        let got = evaluate(&m, &d, &N_VALUES, 25.0, false);
        match want {
            None => assert!(got.is_err(), "seed {seed}"),
            Some(w) => {
                let got = got.unwrap();
                assert_eq!(got.recalls, w, "seed {seed}");
                assert!(got.recalls.windows(2).all(|p| p[0] <= p[1]));
                assert_eq!(brute_force_recall(&m, &d, &N_VALUES, 25.0).unwrap(), w);
            }
        }
    }
}

#[test]
fn true_matches_at_rank_two() {
    // each query's true neighbour sits behind one distractor from a far place
    let mut records = Vec::new();
    let mut d = HashMap::new();
    for p in 0..3u64 {
        let base = offset_coord(100.0 * p as f64, 0.0);
        let far = offset_coord(100.0 * p as f64 + 5000.0, 0.0);
        records.push(Record { id: 10 * p, path: String::new(), lat: base.0, lon: base.1, place_id: Some(p), split: Split::Query });
        records.push(Record { id: 10 * p + 1, path: String::new(), lat: base.0, lon: base.1, place_id: Some(p), split: Split::Database });
        records.push(Record { id: 10 * p + 2, path: String::new(), lat: far.0, lon: far.1, place_id: Some(100 + p), split: Split::Database });
        let mut q = vec![0.0; 8];
        q[p as usize] = 1.0;
        let mut t = q.clone();
        t[4] = 0.5;
        let mut distractor = q.clone();
        distractor[4] = 0.1;
        d.insert(10 * p, unit(q));
        d.insert(10 * p + 1, unit(t));
        d.insert(10 * p + 2, unit(distractor));
    }
    let m = Manifest::new("adv", records).unwrap();
    let r = evaluate(&m, &d, &[1, 5], 25.0, false).unwrap();
    assert_eq!(r.recalls, vec![0.0, 1.0]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn search_equals_full_sort(seed in any::<u64>(), k in 1usize..=12) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let db: Vec<(u64, Descriptor)> = (0..50u64)
            .map(|i| (i, unit((0..16).map(|_| r.random_range(-1.0..1.0)).collect())))
            .collect();
        let qs: Vec<Descriptor> = (0..5).map(|_| unit((0..16).map(|_| r.random_range(-1.0..1.0)).collect())).collect();
        let got = search(&qs, &db, k).unwrap();
        for (q, hits) in qs.iter().zip(got) {
            let mut all: Vec<(f64, u64)> = db.iter().map(|(id, x)| (q.dot(x), *id)).collect();
            all.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            let want: Vec<u64> = all.iter().take(k).map(|x| x.1).collect();
            let ids: Vec<u64> = hits.iter().map(|h| h.id).collect();
            prop_assert_eq!(ids, want);
        }
    }

    #[test]
    fn search_ignores_database_order(seed in any::<u64>()) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        // lattice values force ties, which the id rule must settle
        let mut db: Vec<(u64, Descriptor)> = (0..30u64)
            .map(|i| (i * 7 % 31, unit((0..3).map(|_| r.random_range(0i32..=2) as f64 + 0.5).collect())))
            .collect();
        let q = vec![unit(vec![1.0, 0.5, 0.25])];
        let a = search(&q, &db, 10).unwrap();
        for i in (1..db.len()).rev() {
            let j = r.random_range(0..=i);
            db.swap(i, j);
        }
        let b = search(&q, &db, 10).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn geodistance_is_symmetric(lat1 in -89.0f64..89.0, lon1 in -179.0f64..179.0, lat2 in -89.0f64..89.0, lon2 in -179.0f64..179.0) {
        let ab = geodistance((lat1, lon1), (lat2, lon2)).unwrap();
        let ba = geodistance((lat2, lon2), (lat1, lon1)).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() < 1e-9);
    }

    #[test]
    fn recall_is_monotone(seed in any::<u64>()) {
        let (m, d) = instance(seed, 60);
        if let Ok(r) = evaluate(&m, &d, &N_VALUES, 25.0, false) {
            prop_assert!(r.recalls.windows(2).all(|p| p[0] <= p[1]));
        }
    }
}

#[test]
fn orthogonal_query_ties_break_by_id() {
    let db = vec![(9, unit(vec![0.0, 1.0, 0.0])), (4, unit(vec![0.0, 0.0, 1.0]))];
    let hits = search(&[unit(vec![1.0, 0.0, 0.0])], &db, 2).unwrap();
    assert_eq!(hits[0].iter().map(|h| h.id).collect::<Vec<_>>(), vec![4, 9]);
    assert_eq!(hits[0][0].similarity, 0.0);
}
