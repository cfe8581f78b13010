use std::collections::HashMap;

use deltaforge::checkpoint::{decode, encode, LoadOptions};
use deltaforge::tensor::Storage;
use deltaforge::{load_tensor_map, save_tensor_map, DType, Tensor, TensorMap};
use half::{bf16, f16};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use safetensors::tensor::TensorView;
use safetensors::{Dtype, SafeTensors};

fn le_bytes(t: &Tensor) -> Vec<u8> {
    match t.storage() {
        Storage::F16(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
        Storage::BF16(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
        Storage::F32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
        Storage::F64(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
    }
}

fn st_dtype(d: DType) -> Dtype {
    match d {
        DType::F16 => Dtype::F16,
        DType::BF16 => Dtype::BF16,
        DType::F32 => Dtype::F32,
        DType::F64 => Dtype::F64,
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, dtype: DType) -> Tensor {
    let rank = rng.random_range(0..4);
    let shape: Vec<usize> = (0..rank).map(|_| rng.random_range(1..6)).collect();
    let n: usize = shape.iter().product();
    let vals: Vec<f64> = (0..n).map(|_| rng.random_range(-10.0..10.0)).collect();
    let storage = match dtype {
        DType::F16 => Storage::F16(vals.iter().map(|&v| f16::from_f64(v)).collect()),
        DType::BF16 => Storage::BF16(vals.iter().map(|&v| bf16::from_f64(v)).collect()),
        DType::F32 => Storage::F32(vals.iter().map(|&v| v as f32).collect()),
        DType::F64 => Storage::F64(vals),
    };
    Tensor::new(shape, storage).unwrap()
}

fn random_map(seed: u64, count: usize) -> TensorMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dtypes = [DType::F16, DType::BF16, DType::F32, DType::F64];
    let mut tm = TensorMap::new();
    for i in 0..count {
        let dt = dtypes[rng.random_range(0..4)];
        tm.insert(format!("layers.{i}.weight"), random_tensor(&mut rng, dt))
            .unwrap();
    }
    tm.metadata_mut().insert("format".into(), "pt".into());
    tm
}

#[test]
fn our_files_read_in_reference_reader() {
    let tm = random_map(1, 40);
    let bytes = encode(&tm).unwrap();
    let st = SafeTensors::deserialize(&bytes).unwrap();
    assert_eq!(st.len(), tm.len());
    for (name, t) in tm.iter() {
        let view = st.tensor(name).unwrap();
        assert_eq!(view.dtype(), st_dtype(t.dtype()), "{name}");
        assert_eq!(view.shape(), t.shape(), "{name}");
        assert_eq!(view.data(), &le_bytes(t)[..], "{name}");
    }
    let (_, meta) = SafeTensors::read_metadata(&bytes).unwrap();
    assert_eq!(
        meta.metadata().as_ref().unwrap().get("format").unwrap(),
        "pt"
    );
}

#[test]
fn reference_files_read_here() {
    let tm = random_map(2, 40);
    let raw: Vec<(String, Vec<u8>, Tensor)> = tm
        .iter()
        .map(|(n, t)| (n.to_string(), le_bytes(t), t.clone()))
        .collect();
    let views: Vec<(String, TensorView)> = raw
        .iter()
        .map(|(n, b, t)| {
            (
                n.clone(),
                TensorView::new(st_dtype(t.dtype()), t.shape().to_vec(), b).unwrap(),
            )
        })
        .collect();
    let meta: HashMap<String, String> = [("format".to_string(), "pt".to_string())].into();
    let bytes = safetensors::serialize(views, &Some(meta)).unwrap();
    let back = decode(&bytes, LoadOptions::default()).unwrap();
    assert!(back.bitwise_eq(&tm));
}

#[test]
fn thousand_tensor_round_trip() {
    let tm = random_map(3, 1000);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("big.safetensors");
    save_tensor_map(&tm, &p).unwrap();
    let back = load_tensor_map(&p).unwrap();
    assert!(back.bitwise_eq(&tm));
    // writing again reproduces the file exactly
    let p2 = dir.path().join("again.safetensors");
    save_tensor_map(&back, &p2).unwrap();
    assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&p2).unwrap());
}

#[test]
fn header_is_padded_to_eight_bytes() {
    let bytes = encode(&random_map(4, 7)).unwrap();
    let n = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
    assert_eq!(n % 8, 0);
    let header = std::str::from_utf8(&bytes[8..8 + n]).unwrap();
    serde_json::from_str::<serde_json::Value>(header.trim_end()).unwrap();
}

#[test]
fn half_precision_values_survive() {
    let specials = [0.0f32, -0.0, 1.0, -2.5, 65504.0, 6.1e-5, 5.96e-8];
    let mut tm = TensorMap::new();
    let h: Vec<f16> = specials.iter().map(|&v| f16::from_f32(v)).collect();
    tm.insert(
        "h",
        Tensor::new(vec![specials.len()], Storage::F16(h.clone())).unwrap(),
    )
    .unwrap();
    let back = decode(&encode(&tm).unwrap(), LoadOptions::default()).unwrap();
    match back.get("h").unwrap().storage() {
        Storage::F16(v) => {
            assert_eq!(
                v.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                h.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
            )
        }
        s => panic!("wrong storage {:?}", s.dtype()),
    }
}

#[test]
fn corrupt_files_are_rejected() {
    let bytes = encode(&random_map(5, 3)).unwrap();
    assert!(decode(&bytes[..4], LoadOptions::default()).is_err());
    assert!(decode(&bytes[..bytes.len() - 1], LoadOptions::default()).is_err());
    let mut huge = bytes.clone();
    huge[..8].copy_from_slice(&u64::MAX.to_le_bytes());
    assert!(decode(&huge, LoadOptions::default()).is_err());
}

#[test]
fn nonfinite_values_need_opt_in() {
    let mut tm = TensorMap::new();
    tm.insert(
        "x",
        Tensor::from_f32(vec![3], vec![1.0, f32::NAN, 2.0]).unwrap(),
    )
    .unwrap();
    let bytes = encode(&tm).unwrap();
    let err = decode(&bytes, LoadOptions::default())
        .unwrap_err()
        .to_string();
    assert!(err.contains("'x'") && err.contains("element 1"), "{err}");
    let ok = decode(
        &bytes,
        LoadOptions {
            allow_nonfinite: true,
        },
    )
    .unwrap();
    assert!(ok.bitwise_eq(&tm));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn f32_round_trip(vals in prop::collection::vec(-1e30f32..1e30, 0..64), cols in 1usize..4) {
        let rows = vals.len() / cols;
        let vals = vals[..rows * cols].to_vec();
        let mut tm = TensorMap::new();
        tm.insert("w", Tensor::from_f32(vec![rows, cols], vals).unwrap()).unwrap();
        let back = decode(&encode(&tm).unwrap(), LoadOptions::default()).unwrap();
        prop_assert!(back.bitwise_eq(&tm));
    }
}
