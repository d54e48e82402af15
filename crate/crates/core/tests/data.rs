use denseflow_core::data::{synth_textures, ImageDataset, Split};
use denseflow_core::Error;
use proptest::prelude::*;

#[test]
fn same_seed_gives_the_same_dataset() {
    let a = synth_textures(20, 8, 8, 3, 5).unwrap();
    let b = synth_textures(20, 8, 8, 3, 5).unwrap();
    let c = synth_textures(20, 8, 8, 3, 6).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.pixels(), c.pixels());
}

#[test]
fn images_do_not_depend_on_the_dataset_size() {
    let small = synth_textures(3, 8, 8, 3, 1).unwrap();
    let large = synth_textures(10, 8, 8, 3, 1).unwrap();
    for i in 0..3 {
        assert_eq!(small.image(i), large.image(i));
    }
}

#[test]
fn channel_means_stay_mid_range() {
    let d = synth_textures(2000, 8, 8, 3, 7).unwrap();
    for m in d.channel_means() {
        assert!((64.0..=192.0).contains(&m), "{}", m);
    }
    let d = synth_textures(200, 32, 32, 3, 0).unwrap();
    for m in d.channel_means() {
        assert!((64.0..=192.0).contains(&m), "{}", m);
    }
}

#[test]
fn empty_requests_are_errors() {
    assert!(matches!(synth_textures(0, 8, 8, 3, 0), Err(Error::Data(_))));
    assert!(matches!(synth_textures(1, 0, 8, 3, 0), Err(Error::Data(_))));
    assert!(matches!(ImageDataset::new(2, 1, 2, 2, vec![0; 7], Split::Train), Err(Error::Data(_))));
}

#[test]
fn batches_are_planar_and_flips_mirror_rows() {
    let pixels: Vec<u8> = (0..24).collect();
    let d = ImageDataset::new(2, 3, 2, 2, pixels, Split::Train).unwrap();
    let x = d.batch::<f64>(&[1], None).unwrap();
    assert_eq!(x.shape(), &[1, 3, 2, 2]);
    assert_eq!(x.data()[0], 12.0);
    let f = d.batch::<f64>(&[0, 1], Some(&[true, false])).unwrap();
    assert_eq!(&f.data()[..4], &[1.0, 0.0, 3.0, 2.0]);
    assert_eq!(f.data()[12], 12.0);
    assert!(d.batch::<f64>(&[2], None).is_err());
}

#[test]
fn slices_keep_images_in_order() {
    let d = synth_textures(6, 4, 4, 1, 0).unwrap();
    let s = d.slice(2, 5, Split::Test).unwrap();
    assert_eq!(s.count, 3);
    assert_eq!(s.split, Split::Test);
    assert_eq!(s.image(0), d.image(2));
    assert!(d.slice(4, 7, Split::Test).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn any_shape_is_generated_deterministically(n in 1usize..5, h in 1usize..9, w in 1usize..9, c in 1usize..4, seed in 0u64..1000) {
        let a = synth_textures(n, h, w, c, seed).unwrap();
        prop_assert_eq!(a.pixels().len(), n * c * h * w);
        prop_assert_eq!(&a, &synth_textures(n, h, w, c, seed).unwrap());
    }
}
