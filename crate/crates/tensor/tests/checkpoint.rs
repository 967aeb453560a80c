use irfusion_tensor::checkpoint::{self, CheckpointError};
use irfusion_tensor::{ParamStore, Tensor};
use proptest::prelude::*;

fn entry() -> impl Strategy<Value = (String, Tensor<f32>)> {
    ("[a-z][a-z0-9_.]{0,12}", prop::collection::vec(1usize..4, 0..4)).prop_flat_map(
        |(name, shape)| {
            let n: usize = shape.iter().product();
            prop::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), n)
                .prop_map(move |data| (name.clone(), Tensor::new(&shape, data).unwrap()))
        },
    )
}

proptest! {
    #[test]
    fn write_then_read_is_identity(entries in prop::collection::vec(entry(), 0..5)) {
        let bytes = checkpoint::to_bytes(&entries);
        let back = checkpoint::read(&bytes[..]).unwrap();
        prop_assert_eq!(back, entries);
    }
}

#[test]
fn reload_through_a_file_restores_params() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.irff");

    let mut store = ParamStore::<f32>::new();
    store.add("enc.w", Tensor::from_fn(&[2, 3], |i| i as f32 * 0.25));
    store.add("enc.b", Tensor::from_fn(&[3], |i| -(i as f32)));
    checkpoint::write(std::fs::File::create(&path).unwrap(), &store.export()).unwrap();

    let mut fresh = ParamStore::<f32>::new();
    fresh.add("enc.w", Tensor::zeros(&[2, 3]));
    fresh.add("enc.b", Tensor::zeros(&[3]));
    let entries = checkpoint::read(std::fs::File::open(&path).unwrap()).unwrap();
    fresh.load_values(&entries).unwrap();
    for (a, b) in store.iter().zip(fresh.iter()) {
        assert_eq!(a.value, b.value);
    }

    let mut renamed = ParamStore::<f32>::new();
    renamed.add("enc.weight", Tensor::zeros(&[2, 3]));
    renamed.add("enc.b", Tensor::zeros(&[3]));
    let err = renamed.load_values(&entries).unwrap_err().to_string();
    assert!(err.contains("enc.weight"), "{err}");
}

#[test]
fn unknown_version_is_rejected() {
    let mut bytes = checkpoint::to_bytes(&[]);
    bytes[4] = 9;
    assert!(matches!(
        checkpoint::read(&bytes[..]),
        Err(CheckpointError::Version(9))
    ));
}
