//! Round trips of every on-disk format, and decoders fed arbitrary bytes.

use lgcn_core::config::{Architecture, ModelConfig};
use lgcn_core::head::Descriptor;
use lgcn_core::io::checkpoint::Checkpoint;
use lgcn_core::io::descriptors::{DescriptorDump, Precision};
use lgcn_core::io::ppm::Ppm;
use lgcn_core::manifest::{Manifest, Record, Split};
use lgcn_core::model::Lgcn;
use lgcn_core::params::named;
use proptest::prelude::*;

fn record() -> impl Strategy<Value = Record> {
    (
        any::<u64>(),
        "[a-z0-9_/]{1,12}\\.ppm",
        -90.0f64..=90.0,
        -180.0f64..=180.0,
        proptest::option::of(any::<u64>()),
        any::<bool>(),
    )
        .prop_map(|(id, path, lat, lon, place_id, db)| Record {
            id,
            path,
            lat,
            lon,
            place_id,
            split: if db { Split::Database } else { Split::Query },
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ppm_round_trip(w in 1usize..8, h in 1usize..8, wide in any::<bool>(), seed in any::<u64>()) {
        let maxval: u16 = if wide { 1000 } else { 255 };
        let bytes = if wide { 2 } else { 1 };
        let data: Vec<u8> = (0..w * h * 3 * bytes)
            .map(|i| if wide && i % 2 == 0 { (seed as usize + i) as u8 % 3 } else { (seed as usize ^ i) as u8 })
            .collect();
        let p = Ppm { width: w, height: h, maxval, data };
        prop_assert_eq!(Ppm::decode(&p.encode()).unwrap(), p);
    }

    #[test]
    fn manifest_round_trip(mut records in proptest::collection::vec(record(), 0..12)) {
        records.sort_by_key(|r| r.id);
        records.dedup_by_key(|r| r.id);
        let m = Manifest::new("m", records).unwrap();
        let mut buf = Vec::new();
        m.to_writer(&mut buf).unwrap();
        let back = Manifest::from_reader("m", buf.as_slice()).unwrap();
        prop_assert_eq!(back, m);
    }

    #[test]
    fn descriptor_dump_round_trip(rows in proptest::collection::vec((any::<u64>(), proptest::collection::vec(-1.0f64..1.0, 5)), 0..8)) {
        let rows: Vec<(u64, Descriptor)> = rows
            .into_iter()
            .filter_map(|(id, v)| Descriptor::normalized(v).ok().map(|d| (id, d)))
            .collect();
        let dump = DescriptorDump { precision: Precision::F64, dim: 5, rows };
        prop_assert_eq!(DescriptorDump::decode(&dump.encode()).unwrap(), dump.clone());
        let narrow = DescriptorDump { precision: Precision::F32, ..dump.clone() };
        let back = DescriptorDump::decode(&narrow.encode()).unwrap();
        for ((_, a), (_, b)) in back.rows.iter().zip(&dump.rows) {
            for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
                prop_assert!((x - y).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn decoders_never_panic(bytes in proptest::collection::vec(any::<u8>(), 0..256)) {
        let _ = Ppm::decode(&bytes);
        let _ = Checkpoint::decode(&bytes);
        let _ = DescriptorDump::decode(&bytes);
        let _ = Manifest::from_reader("x", bytes.as_slice());
        let _ = serde_json::from_slice::<ModelConfig>(&bytes);
    }

    #[test]
    fn corrupted_checkpoints_error_cleanly(pos in any::<prop::sample::Index>(), byte in any::<u8>(), cut in any::<prop::sample::Index>()) {
        let model = Lgcn::new(ModelConfig::micro(), 0).unwrap();
        let mut bytes = Checkpoint::from_model(&model, "x").encode();
        let i = pos.index(bytes.len());
        bytes[i] = byte;
        let _ = Checkpoint::decode(&bytes).and_then(Checkpoint::into_model);
        let n = cut.index(bytes.len());
        prop_assert!(Checkpoint::decode(&bytes[..n]).is_err());
    }
}

#[test]
fn checkpoint_round_trip_for_every_architecture() {
    for arch in [
        Architecture::full(),
        Architecture::baseline(),
        Architecture::fsa_only(),
        Architecture::cnn_stream_only(),
        Architecture::dfm_only(),
    ] {
        let model = Lgcn::new(ModelConfig::micro().with_arch(arch), 1).unwrap();
        let bytes = Checkpoint::from_model(&model, "note").encode();
        let back = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(back.encode(), bytes);
        let restored = back.into_model().unwrap();
        assert_eq!(restored.cfg, model.cfg);
        assert_eq!(named(&restored, ""), named(&model, ""));
    }
}
