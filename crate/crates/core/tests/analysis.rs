mod common;

use common::{rng, uniform32};
use licw_core::analysis::{
    aggregate, aggregate_all, eci, final_cdmr, ldmr_cdmr, local_maps, measure, perf_variation, sanitize,
    spatial_kurtosis, DoSet, Grouping, RdReport,
};
use licw_core::attacks::gaussian_control;
use licw_core::diffcore::Tensor;
use licw_core::models::{CompressionModel, Family};
use licw_core::Error;

fn image(seed: u64) -> Tensor {
    let noise = uniform32(&mut rng(seed), &[1, 3, 32, 32], -0.1, 0.1);
    Tensor::from_fn(vec![1, 3, 32, 32], |i| {
        let (y, x) = ((i / 32) % 32, i % 32);
        (0.4 + 0.3 * ((x as f32 * 0.3).sin() + (y as f32 * 0.2).cos()) * 0.5 + noise.data()[i]).clamp(0.0, 1.0)
    })
}

fn noisy(x: &Tensor, seed: u64) -> Tensor {
    gaussian_control(x, 0.05, seed)
}

#[test]
fn sanitize_replaces_invalid_values() {
    let t = Tensor::new(vec![5], vec![f32::NAN, 1.3, -0.2, 0.25, f32::INFINITY]).unwrap();
    assert_eq!(sanitize(&t).data(), &[1.0, 1.0, 0.0, 0.25, 1.0]);
}

#[test]
fn identical_inputs_show_no_variation() {
    let x = image(1);
    for family in Family::ALL {
        let m = CompressionModel::new(family, 0.01, 1).unwrap();
        let r = perf_variation(&m, &x, &x).unwrap();
        assert_eq!(r.delta_rate, 0.0);
        assert_eq!(r.delta_distortion, 0.0);
        let rd = m.evaluate(&x).unwrap();
        assert!((r.rate - rd.bpp).abs() <= 1e-5 * rd.bpp, "{family}");
        assert!((r.psnr - 10.0 * (65025.0 / r.distortion).log10()).abs() < 1e-12);
    }
}

fn report(dr: f64, dd: f64, direction: (f64, f64), lambda_index: usize) -> RdReport {
    RdReport {
        family: Family::HyperS,
        lambda_index,
        direction,
        image_id: "img".into(),
        method: "SRDA".into(),
        rate: 1.0,
        rate_adv: 1.0 + dr,
        distortion: 10.0,
        distortion_adv: 10.0 + dd,
        delta_rate: dr,
        delta_distortion: dd,
        psnr: 0.0,
        psnr_adv: 0.0,
    }
}

#[test]
fn aggregation_uses_population_statistics() {
    let rs = vec![report(1.0, 10.0, (1.0, 0.0), 0), report(3.0, 30.0, (1.0, 0.0), 1), report(5.0, 0.0, (0.0, 1.0), 0)];
    let all = aggregate_all(&rs[..2]).unwrap();
    assert_eq!((all.mean_delta_rate, all.std_delta_rate), (2.0, 1.0));
    assert_eq!((all.mean_delta_distortion, all.std_delta_distortion), (20.0, 10.0));

    let by_dir = aggregate(&rs, Grouping::Direction).unwrap();
    assert_eq!(by_dir.len(), 2);
    assert_eq!(by_dir["(1, 0)"].count, 2);
    assert_eq!(by_dir["(0, 1)"].std_delta_rate, 0.0);
    let by_model = aggregate(&rs, Grouping::Submodel).unwrap();
    assert_eq!(by_model.keys().collect::<Vec<_>>(), ["HYPER_S/0", "HYPER_S/1"]);
    assert!(matches!(aggregate(&[], Grouping::All), Err(Error::EmptyGroup(_))));
}

#[test]
fn local_maps_sum_to_the_global_change() {
    let x = image(2);
    let x_a = noisy(&x, 3);
    for family in Family::ALL {
        let m = CompressionModel::new(family, 0.01, 2).unwrap();
        let r = perf_variation(&m, &x, &x_a).unwrap();
        let maps = local_maps(&m, &x, &x_a).unwrap();
        assert_eq!(maps.rate_dims, (4, 4));
        assert_eq!(maps.distortion_dims, (32, 32));
        assert!((maps.rate_total_bpp() - r.delta_rate).abs() <= 1e-6 * r.rate, "{family}");
        assert!((maps.distortion_mean() - r.delta_distortion).abs() <= 1e-6 * r.distortion, "{family}");
    }
}

#[test]
fn kurtosis_separates_concentrated_from_spread_maps() {
    let mut peaked = vec![0.0; 64];
    peaked[10] = 5.0;
    let spread: Vec<f64> = (0..64).map(|i| (i as f64 * 0.7).sin()).collect();
    assert!(spatial_kurtosis(&peaked) > 3.0 * spatial_kurtosis(&spread));
    assert_eq!(spatial_kurtosis(&[1.0; 8]), 0.0);
}

#[test]
fn full_intervention_restores_the_benign_rate() {
    let x = image(4);
    let x_a = noisy(&x, 5);
    for family in Family::ALL {
        let m = CompressionModel::new(family, 0.01, 3).unwrap();
        let benign = measure(&m, &x).unwrap();
        let adv = measure(&m, &x_a).unwrap();
        let full = eci(&m, &x, &x_a, DoSet::all_for(family)).unwrap();
        assert!((full.total - benign.bpp()).abs() <= 1e-9 * benign.bpp(), "{family}");
        let none = eci(&m, &x, &x_a, DoSet::NONE).unwrap();
        assert!((none.total - adv.bpp()).abs() <= 1e-9 * adv.bpp(), "{family}");
        assert_eq!(none.bitrate_z.is_some(), family.has_hyper());
        assert_eq!(full.delta_mean, if family.has_context() { Some(0.0) } else { None });
        assert_eq!(full.scale.is_some(), family.has_hyper());
        for d in DoSet::singles(family) {
            assert!(eci(&m, &x, &x_a, d).unwrap().total.is_finite());
        }
    }
}

#[test]
fn unsupported_interventions_are_rejected() {
    let x = image(6);
    let fac = CompressionModel::new(Family::Factorized, 0.01, 1).unwrap();
    let hs = CompressionModel::new(Family::HyperS, 0.01, 1).unwrap();
    assert!(matches!(eci(&fac, &x, &x, DoSet::HYPER), Err(Error::UnsupportedIntervention { .. })));
    assert!(matches!(eci(&hs, &x, &x, DoSet::CONTEXT), Err(Error::UnsupportedIntervention { .. })));
    assert_eq!(DoSet::singles(Family::HyperMc).len(), 3);
    assert_eq!(DoSet::all_for(Family::HyperMc).to_string(), "do(y_s)+do(y_c)+do(y_h)");
}

#[test]
fn magnification_ratios_telescope() {
    let x = image(7);
    let x_a = noisy(&x, 8);
    for family in Family::ALL {
        let m = CompressionModel::new(family, 0.01, 4).unwrap();
        let p = ldmr_cdmr(&m, &x, &x_a).unwrap();
        assert_eq!(p.ldmr.len(), 13);
        let product: f64 = p.ldmr.iter().product();
        assert!((product - p.interval[0]).abs() <= 1e-9 * p.interval[0], "{family}");
        assert!((p.final_cdmr() - p.interval[0]).abs() <= 1e-9 * p.interval[0]);
        assert!((p.final_cdmr() - final_cdmr(&m, &x, &x_a).unwrap()).abs() <= 1e-9 * p.final_cdmr());
        assert_eq!(p.cdmr[0], p.ldmr[0]);
        assert!(p.to_csv().starts_with("layer,ldmr,cdmr\nga.conv0,"));
    }
}

#[test]
fn identical_inputs_have_no_defined_magnification() {
    let x = image(9);
    let m = CompressionModel::new(Family::HyperS, 0.01, 5).unwrap();
    match ldmr_cdmr(&m, &x, &x) {
        Err(Error::ZeroDistance { layer }) => assert_eq!(layer, "ga.conv0"),
        other => panic!("{other:?}"),
    }
    assert!(matches!(final_cdmr(&m, &x, &x), Err(Error::ZeroDistance { .. })));
}
