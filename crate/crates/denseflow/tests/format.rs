use denseflow::format::{
    decode_checkpoint, decode_dataset, encode_checkpoint, encode_dataset, encode_ppm, import_planar, read_dataset,
    write_checkpoint, write_dataset,
};
use denseflow::Error;
use denseflow_core::data::{synth_textures, ImageDataset, Split};
use denseflow_core::flow::{FlowConfig, FlowModel};
use denseflow_core::trainer::{ArrayData, Checkpoint, Record, TrainConfig, Trainer};
use proptest::prelude::*;

const DFIM_HEADER: usize = 18;

fn small_checkpoint() -> Checkpoint {
    let data = synth_textures(16, 8, 8, 3, 0).unwrap();
    let model = FlowModel::<f32>::build(&FlowConfig::desk()).unwrap();
    let mut tr = Trainer::new(model, TrainConfig { batch_size: 8, ..TrainConfig::desk() }).unwrap();
    tr.step(&data).unwrap();
    tr.to_checkpoint("checkpoint_every = 0\n".into())
}

fn offset_of(e: Error) -> u64 {
    match e {
        Error::Format { offset, .. } => offset,
        other => panic!("expected a format error, got {}", other),
    }
}

#[test]
fn single_white_pixel_round_trips_through_a_file() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("one.dfim");
    let d = ImageDataset::new(1, 1, 1, 1, vec![255], Split::Unspecified).unwrap();
    write_dataset(&p, &d).unwrap();
    let bytes = std::fs::read(&p).unwrap();
    assert_eq!(bytes.len(), DFIM_HEADER + 1);
    assert_eq!(&bytes[..4], b"DFIM");
    let back = read_dataset(&p, Split::Test).unwrap();
    assert_eq!(back.pixels(), &[255]);
    assert_eq!(back.split, Split::Test);
}

#[test]
fn dfim_stores_channels_interleaved() {
    let planar: Vec<u8> = (0..12).collect();
    let d = ImageDataset::new(1, 3, 2, 2, planar, Split::Unspecified).unwrap();
    let bytes = encode_dataset(&d).unwrap();
    assert_eq!(&bytes[DFIM_HEADER..], &[0, 4, 8, 1, 5, 9, 2, 6, 10, 3, 7, 11]);
}

#[test]
fn truncated_dfim_fails_at_the_end_of_the_input() {
    let d = synth_textures(3, 4, 4, 3, 1).unwrap();
    let bytes = encode_dataset(&d).unwrap();
    for cut in [2, 10, DFIM_HEADER, DFIM_HEADER + 50, bytes.len() - 1] {
        let e = decode_dataset(&bytes[..cut], Split::Test).unwrap_err();
        assert_eq!(e.exit_code(), 2);
        assert_eq!(offset_of(e), cut as u64);
    }
}

#[test]
fn trailing_bytes_and_bad_headers_are_rejected() {
    let d = synth_textures(2, 4, 4, 1, 1).unwrap();
    let mut bytes = encode_dataset(&d).unwrap();
    let n = bytes.len();
    bytes.extend_from_slice(&[0, 0]);
    assert_eq!(offset_of(decode_dataset(&bytes, Split::Test).unwrap_err()), n as u64);
    let mut bad = encode_dataset(&d).unwrap();
    bad[0] = b'X';
    assert_eq!(offset_of(decode_dataset(&bad, Split::Test).unwrap_err()), 0);
    let mut v2 = encode_dataset(&d).unwrap();
    v2[4] = 2;
    assert_eq!(offset_of(decode_dataset(&v2, Split::Test).unwrap_err()), 4);
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let ck = small_checkpoint();
    let a = encode_checkpoint(&ck).unwrap();
    let back = decode_checkpoint(&a).unwrap();
    assert_eq!(back, ck);
    assert_eq!(encode_checkpoint(&back).unwrap(), a);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.dfck");
    write_checkpoint(&p, &ck).unwrap();
    assert_eq!(std::fs::read(&p).unwrap(), a);
}

#[test]
fn every_truncation_of_a_checkpoint_is_a_format_error() {
    let ck = Checkpoint {
        records: vec![
            Record::new("a", vec![2], ArrayData::F32(vec![1.0, 2.0])).unwrap(),
            Record::new("b", vec![1, 1], ArrayData::F64(vec![3.0])).unwrap(),
        ],
        config: "x = 1\n".into(),
        rng: small_checkpoint().rng,
    };
    let bytes = encode_checkpoint(&ck).unwrap();
    for cut in 0..bytes.len() {
        let e = decode_checkpoint(&bytes[..cut]).unwrap_err();
        assert_eq!(offset_of(e), cut as u64, "cut {}", cut);
    }
    let mut long = bytes.clone();
    long.push(7);
    assert_eq!(offset_of(decode_checkpoint(&long).unwrap_err()), bytes.len() as u64);
}

#[test]
fn ppm_has_a_p6_header_and_interleaved_pixels() {
    let planar = [10u8, 20, 30, 40, 50, 60];
    let ppm = encode_ppm(&planar, 1, 2);
    assert_eq!(ppm, b"P6\n2 1\n255\n\x0a\x1e\x32\x14\x28\x3c".to_vec());
}

#[test]
fn import_checks_the_byte_count() {
    assert!(import_planar(vec![0; 11], 1, 3, 2, 2).is_err());
    let d = import_planar((0..12).collect(), 1, 3, 2, 2).unwrap();
    assert_eq!(d.image(0)[4], 4);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn random_datasets_round_trip(n in 1usize..6, c in 1usize..4, h in 1usize..6, w in 1usize..6, seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let pixels: Vec<u8> = (0..n * c * h * w).map(|_| r.random()).collect();
        let d = ImageDataset::new(n, c, h, w, pixels, Split::Unspecified).unwrap();
        let a = encode_dataset(&d).unwrap();
        let back = decode_dataset(&a, Split::Unspecified).unwrap();
        prop_assert_eq!(&back, &d);
        prop_assert_eq!(encode_dataset(&back).unwrap(), a);
    }
}
