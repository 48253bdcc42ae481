//! Property-based invariants: convolution against its im2col/GEMM oracle,
//! serialization round trips, and injection involutions.

use milr_core::fault::{apply_flips, inject_bitflips};
use milr_core::linalg::{conv2d, im2col, matmul, Padding};
use milr_core::milr::sidecar::{load_sidecar_from, save_sidecar_to};
use milr_core::milr::{initialize, MilrConfig};
use milr_core::network::{BiasAttach, LayerSpec, Network};
use milr_core::rng::SplitMix64;
use milr_core::tensor::{Dtype, Tensor};
use milr_core::weights::{load_weights_from, save_weights_to};
use proptest::prelude::*;

fn nets_bit_eq(a: &Network, b: &Network) -> bool {
    a.layers().iter().zip(b.layers()).all(|(x, y)| {
        match (x.spec.params(), y.spec.params()) {
            (Some(p), Some(q)) => p.bit_eq(q),
            (None, None) => true,
            _ => false,
        }
    })
}

fn small_net(seed: u64, h: usize, z: usize, y: usize, dtype: Dtype) -> Network {
    let mut rng = SplitMix64::new(seed);
    Network::new(
        vec![
            LayerSpec::Input { shape: vec![h, h, z] },
            LayerSpec::Conv2D {
                filters: rng.fill_tensor(&[3, 3, z, y], dtype),
                stride: 1,
                padding: Padding::Valid,
            },
            LayerSpec::Bias {
                params: rng.fill_tensor(&[y], dtype),
                attach: BiasAttach::Conv,
            },
            LayerSpec::ReLU,
            LayerSpec::Flatten,
            LayerSpec::Dense {
                params: rng.fill_tensor(&[(h - 2) * (h - 2) * y, 5], dtype),
            },
            LayerSpec::Bias {
                params: rng.fill_tensor(&[5], dtype),
                attach: BiasAttach::Dense,
            },
        ],
        dtype,
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv2d_matches_im2col_gemm(
        seed in 0u64..1_000_000,
        h in 4usize..9,
        z in 1usize..4,
        y in 1usize..6,
        stride in 1usize..3,
        same in proptest::bool::ANY,
    ) {
        let padding = if same { Padding::Same } else { Padding::Valid };
        prop_assume!(milr_core::linalg::conv_axis(h, 3, stride, padding).is_ok());
        let mut rng = SplitMix64::new(seed);
        let x = rng.fill_tensor(&[h, h, z], Dtype::F64);
        let filters = rng.fill_tensor(&[3, 3, z, y], Dtype::F64);

        let direct = conv2d(&x, &filters, stride, padding).unwrap();
        let patches = im2col(&x, 3, stride, padding).unwrap();
        let flat = filters.reshaped(vec![9 * z, y]).unwrap();
        let gemm = matmul(&patches, &flat).unwrap();

        prop_assert_eq!(direct.len(), gemm.len());
        for i in 0..direct.len() {
            let (a, b) = (direct.get(i), gemm.get(i));
            prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn weights_roundtrip_is_bit_exact(
        seed in 0u64..1_000_000,
        h in 4usize..8,
        z in 1usize..3,
        y in 1usize..5,
        f64_params in proptest::bool::ANY,
    ) {
        let dtype = if f64_params { Dtype::F64 } else { Dtype::F32 };
        let net = small_net(seed, h, z, y, dtype);
        let mut bytes = Vec::new();
        save_weights_to(&net, &mut bytes).unwrap();
        let loaded = load_weights_from(&mut bytes.as_slice()).unwrap();
        prop_assert!(nets_bit_eq(&net, &loaded));
        prop_assert_eq!(net.dtype(), loaded.dtype());

        let mut rng = SplitMix64::new(seed ^ 0xABCD);
        let x = rng.fill_tensor(&[h, h, z], dtype);
        prop_assert!(net.forward(&x).unwrap().bit_eq(&loaded.forward(&x).unwrap()));
    }

    #[test]
    fn sidecar_roundtrip_preserves_state(
        seed in 0u64..1_000_000,
        batch in 1usize..3,
    ) {
        let net = small_net(seed, 6, 2, 4, Dtype::F32);
        let state = initialize(&net, MilrConfig { batch, ..MilrConfig::default() }).unwrap();
        let mut bytes = Vec::new();
        save_sidecar_to(&state, &mut bytes).unwrap();
        let loaded = load_sidecar_from(&mut bytes.as_slice()).unwrap();
        let mut again = Vec::new();
        save_sidecar_to(&loaded, &mut again).unwrap();
        prop_assert_eq!(bytes, again);
    }

    #[test]
    fn bitflip_injection_is_an_involution(
        seed in 0u64..1_000_000,
        rate in 1e-5f64..1e-2,
    ) {
        let mut net = small_net(seed, 7, 2, 4, Dtype::F32);
        let pristine = net.clone();
        let mut rng = SplitMix64::new(seed.wrapping_mul(31) ^ 7);
        let records = inject_bitflips(&mut net, rate, &mut rng);
        if !records.is_empty() {
            prop_assert!(!nets_bit_eq(&net, &pristine));
        }
        apply_flips(&mut net, &records);
        prop_assert!(nets_bit_eq(&net, &pristine));
    }

    #[test]
    fn tensor_payload_roundtrip(
        seed in 0u64..1_000_000,
        len in 1usize..64,
        f64_params in proptest::bool::ANY,
    ) {
        let dtype = if f64_params { Dtype::F64 } else { Dtype::F32 };
        let mut rng = SplitMix64::new(seed);
        let t = rng.fill_tensor(&[len], dtype);
        let back = Tensor::from_payload_bytes(vec![len], dtype, &t.payload_bytes()).unwrap();
        prop_assert!(t.bit_eq(&back));
    }
}
