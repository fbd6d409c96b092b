mod common;

use common::{rng, uniform32};
use licw_core::coder::{
    compress_file, decode_latents, decode_stream, decompress_file, encode_stream, table_bits, Bitstream, SENTINEL_BITS,
};
use licw_core::diffcore::Tensor;
use licw_core::entropy::{build_cdf, CdfTable, ContinuousModel, SymbolRange};
use licw_core::models::{CompressionModel, Family};
use licw_core::Error;
use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, Normal};

fn gaussian_table(mean: f64, scale: f64) -> CdfTable {
    build_cdf(&ContinuousModel::Gaussian { mean, scale }, SymbolRange::LATENT, true).unwrap()
}

fn uniform_table(n: i32) -> CdfTable {
    let range = SymbolRange::new(0, n - 1).unwrap();
    CdfTable::from_pmf(range, &vec![1.0; n as usize], None).unwrap()
}

#[test]
fn empty_stream_is_fixed_size() {
    let a = encode_stream(&[], &[uniform_table(4)]).unwrap();
    let b = encode_stream(&[], &[gaussian_table(0.0, 3.0)]).unwrap();
    assert_eq!(a, b);
    assert!(a.len() <= 6, "{} bytes", a.len());
    assert!(decode_stream(&a, &[uniform_table(4)], 0).unwrap().is_empty());
}

#[test]
fn uniform_byte_symbols_cost_one_byte_each() {
    let mut r = rng(1);
    let symbols: Vec<i32> = (0..1000).map(|_| r.gen_range(0..256)).collect();
    let table = uniform_table(256);
    let bytes = encode_stream(&symbols, &[table.clone()]).unwrap();
    let payload = bytes.len() as f64 - (SENTINEL_BITS / 8) as f64;
    assert!((payload - 1000.0).abs() <= 10.0, "{} bytes", bytes.len());
    assert_eq!(decode_stream(&bytes, &[table], 1000).unwrap(), symbols);
}

#[test]
fn thousand_random_roundtrips() {
    let mut r = rng(2);
    for trial in 0..1000 {
        let n = r.gen_range(0..200);
        let tables: Vec<CdfTable> = (0..n).map(|_| gaussian_table(r.gen_range(-20.0..20.0), r.gen_range(0.04..30.0))).collect();
        let symbols: Vec<i32> = (0..n)
            .map(|i| {
                // occasional far outliers exercise the escape path
                if r.gen_bool(0.02) {
                    r.gen_range(-100_000..100_000)
                } else {
                    let (lo, hi) = (-128, 127);
                    let cdf = tables[i].cumulative();
                    let target = r.gen_range(0..*cdf.last().unwrap());
                    (lo + tables[i].find(target) as i32).clamp(lo, hi)
                }
            })
            .collect();
        let bytes = encode_stream(&symbols, &tables).unwrap();
        assert_eq!(decode_stream(&bytes, &tables, n).unwrap(), symbols, "trial {trial}");
    }
}

#[test]
fn gaussian_symbols_are_coded_near_their_entropy() {
    let mut r = rng(3);
    let normal = Normal::new(0.0, 4.0).unwrap();
    let symbols: Vec<i32> = (0..5000).map(|_| (normal.sample(&mut r) as f64).round() as i32).collect();
    let table = gaussian_table(0.0, 4.0);
    let ideal = table_bits(&symbols, &[table.clone()]).unwrap();
    let bytes = encode_stream(&symbols, &[table.clone()]).unwrap();
    let realized = (bytes.len() * 8 - SENTINEL_BITS) as f64;
    assert!(realized <= ideal + 32.0, "{realized} vs {ideal}");
    assert!(realized >= ideal - 1.0);
    assert_eq!(decode_stream(&bytes, &[table], symbols.len()).unwrap(), symbols);
}

#[test]
fn out_of_range_without_escape_is_rejected() {
    let t = uniform_table(4);
    assert!(matches!(encode_stream(&[1, 7], &[t]), Err(Error::SymbolOutOfRange { symbol: 7, .. })));
}

#[test]
fn truncated_stream_is_an_error() {
    let mut r = rng(4);
    let symbols: Vec<i32> = (0..300).map(|_| r.gen_range(0..256)).collect();
    let t = [uniform_table(256)];
    let bytes = encode_stream(&symbols, &t).unwrap();
    for cut in [1, 2, 5, 50, bytes.len()] {
        let res = decode_stream(&bytes[..bytes.len() - cut], &t, symbols.len());
        assert!(res.is_err(), "cut {cut} decoded");
    }
    let mut longer = bytes.clone();
    longer.push(0);
    assert!(decode_stream(&longer, &t, symbols.len()).is_err());
}

#[test]
fn wrong_table_trips_the_sentinel() {
    let mut r = rng(5);
    let symbols: Vec<i32> = (0..500).map(|_| r.gen_range(-3..4)).collect();
    let right = [gaussian_table(0.0, 2.0)];
    let wrong = [gaussian_table(0.3, 2.0)];
    let bytes = encode_stream(&symbols, &right).unwrap();
    let res = decode_stream(&bytes, &wrong, symbols.len());
    assert!(matches!(res, Err(Error::SentinelMismatch)), "{res:?}");
}

fn test_image(seed: u64) -> Tensor {
    let mut r = rng(seed);
    // smooth gradient plus mild noise keeps latents in a realistic range
    let noise = uniform32(&mut r, &[1, 3, 32, 32], -0.05, 0.05);
    Tensor::from_fn(vec![1, 3, 32, 24], |i| {
        let (c, y, x) = (i / (32 * 24), (i / 24) % 32, i % 24);
        (0.2 + 0.6 * (x as f32 / 24.0) * (y as f32 / 32.0) + 0.1 * c as f32 + noise.data()[i % noise.numel()]).clamp(0.0, 1.0)
    })
}

#[test]
fn file_roundtrip_matches_direct_decode_for_every_family() {
    let x = test_image(6);
    for family in Family::ALL {
        let model = CompressionModel::new(family, 0.01, 7).unwrap();
        let bs = compress_file(&model, 0, &x).unwrap();
        let parsed = Bitstream::from_bytes(&bs.to_bytes()).unwrap();
        assert_eq!(parsed, bs);
        assert_eq!((parsed.height, parsed.width), (32, 24));
        let bundle = model.encode(&x).unwrap();
        assert_eq!(decode_latents(&model, &parsed).unwrap(), bundle.y_hat, "{family}");
        let via_file = decompress_file(std::slice::from_ref(&model), &parsed).unwrap();
        let direct = model.decode(&bundle.y_hat).unwrap();
        assert!(via_file.bit_eq(&direct), "{family}");

        let estimate = bundle.bpp() * (32.0 * 24.0);
        let realized = parsed.payload_bits() as f64;
        assert!(realized <= 1.02 * estimate + 64.0, "{family}: {realized} vs {estimate}");
    }
}

#[test]
fn missing_submodel_is_reported() {
    let x = test_image(8);
    let model = CompressionModel::new(Family::HyperS, 0.01, 1).unwrap();
    let bs = compress_file(&model, 3, &x).unwrap();
    assert!(matches!(decompress_file(std::slice::from_ref(&model), &bs), Err(Error::MissingModel(_))));
    let other = CompressionModel::new(Family::Factorized, 0.01, 1).unwrap();
    let mut grid = vec![other.clone(), other.clone(), other.clone(), other];
    assert!(matches!(decompress_file(&grid, &bs), Err(Error::MissingModel(_))));
    grid[3] = model;
    assert!(decompress_file(&grid, &bs).is_ok());
}

#[test]
fn corrupt_container_is_rejected() {
    let x = test_image(9);
    let model = CompressionModel::new(Family::Factorized, 0.01, 1).unwrap();
    let bytes = compress_file(&model, 0, &x).unwrap().to_bytes();
    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    assert!(matches!(Bitstream::from_bytes(&bad_magic), Err(Error::Format { .. })));
    assert!(matches!(Bitstream::from_bytes(&bytes[..bytes.len() - 1]), Err(Error::Format { .. })));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn shared_table_roundtrip(symbols in proptest::collection::vec(-300i32..300, 0..300), mean in -5.0f64..5.0, scale in 0.04f64..50.0) {
        let t = [gaussian_table(mean, scale)];
        let bytes = encode_stream(&symbols, &t).unwrap();
        prop_assert_eq!(decode_stream(&bytes, &t, symbols.len()).unwrap(), symbols);
    }
}
