//! Generator contracts: separable places, geotag audit, determinism.

use lgcn_core::io::sha256_hex;
use lgcn_core::manifest::Split;
use lgcn_core::synth::*;
use lgcn_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn dist(a: &Tensor, b: &Tensor) -> f64 {
    a.sub(b).unwrap().sq_norm().sqrt()
}

#[test]
fn inter_place_distance_is_twice_intra() {
    let w = generate_world(7, 200, 6, 64).unwrap();
    let views = 6;
    let (mut intra, mut ni) = (0.0, 0usize);
    for p in 0..200 {
        for i in 0..views {
            for j in i + 1..views {
                intra += dist(&w.views[p * views + i].image, &w.views[p * views + j].image);
                ni += 1;
            }
        }
    }
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let (mut inter, mut ne) = (0.0, 0usize);
    while ne < ni {
        let a = r.random_range(0..w.views.len());
        let b = r.random_range(0..w.views.len());
        if a / views == b / views {
            continue;
        }
        inter += dist(&w.views[a].image, &w.views[b].image);
        ne += 1;
    }
    let ratio = (inter / ne as f64) / (intra / ni as f64);
    assert!(ni >= 100);
    assert!(ratio >= 2.0, "inter/intra ratio {ratio:.3}");
}

#[test]
fn geotags_pass_the_threshold_audit() {
    let w = generate_world(7, 50, 6, 16).unwrap();
    let a = audit(&w.manifest("a")).unwrap();
    assert!(a.ok(), "{a:?}");
    assert!(a.max_intra_m <= 2.0 * MAX_JITTER_M);
    assert_eq!(a.pairs, 300 * 299 / 2);
}

#[test]
fn half_of_each_place_is_database() {
    let w = generate_world(3, 10, 6, 16).unwrap();
    for p in 0..10u64 {
        let db = w
            .views
            .iter()
            .filter(|v| v.record.place_id == Some(p) && v.record.split == Split::Database)
            .count();
        assert_eq!(db, 3);
    }
}

#[test]
fn conditions_stay_in_range() {
    let w = generate_world(5, 40, 6, 16).unwrap();
    for v in &w.views {
        let c = &v.condition;
        assert!(c.offset >= OFFSET_RANGE.0 && c.offset <= OFFSET_RANGE.1);
        assert!(c.gain >= GAIN_RANGE.0 && c.gain <= GAIN_RANGE.1);
        assert!(c.bias >= BIAS_RANGE.0 && c.bias <= BIAS_RANGE.1);
        assert!(v.image.data().iter().all(|&x| (0.0..=1.0).contains(&x)));
    }
}

#[test]
fn same_seed_writes_identical_files() {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let mut digests = Vec::new();
    for d in &dirs {
        let root = d.path().join("world");
        let w = generate_world(9, 4, 4, 32).unwrap();
        let manifest = w.write(&root).unwrap();
        let mut files = vec![sha256_hex(&std::fs::read(&manifest).unwrap())];
        for v in &w.views {
            files.push(sha256_hex(&std::fs::read(root.join(&v.record.path)).unwrap()));
        }
        digests.push(files);
    }
    assert_eq!(digests[0], digests[1]);
    let other = generate_world(10, 4, 4, 32).unwrap();
    assert_ne!(other.views[0].image, generate_world(9, 4, 4, 32).unwrap().views[0].image);
}

#[test]
fn identical_condition_renders_identically() {
    let p = place_spec(1, 3, 10);
    let c = ViewCondition::sample(&mut ChaCha8Rng::seed_from_u64(2));
    assert_eq!(render_view(&p, &c, 32), render_view(&p, &c, 32));
}
