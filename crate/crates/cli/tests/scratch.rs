//! Temporary diagnostics, not part of the suite.

use geovae::datahub;
use geovae::geointerp::{
    decode_curve, fit_geodesic, linear_baseline, CurveSampling, FitConfig,
};
use geovae::rng;
use geovae::vae::{train, TrainConfig, VaeConfig, VaeModel};
use geovae::{Tape, Tensor, Var};

fn min_radius(path: &geovae::geointerp::DecodedPath) -> f64 {
    let pts = path.points().data();
    (0..path.sample_count())
        .map(|i| (pts[2 * i].powi(2) + pts[2 * i + 1].powi(2)).sqrt())
        .fold(f64::INFINITY, f64::min)
}

fn probe(tag: &str, inner: f64, outer: f64, gd: f64, lr: f64, epochs: usize) {
    let dataset = datahub::make_donut(2000, inner, outer, 606).unwrap();
    let data = dataset.flat().unwrap();
    let config = VaeConfig::vectors(2, 2);
    let train_cfg = TrainConfig {
        learning_rate: lr,
        epochs,
        gd_weight: gd,
        seed: 606,
        ..TrainConfig::default()
    };
    let mut model = VaeModel::new(config, 606).unwrap();
    let t0 = std::time::Instant::now();
    let report = train(&mut model, &data, &train_cfg).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    let last = report.metrics.last().unwrap();

    let mut r = rng::seeded(1);
    let mut radius_sum = 0.0;
    for i in (0..2000).step_by(40) {
        let x = Tensor::vector(data.data()[2 * i..2 * i + 2].to_vec());
        let rec = model.reconstruct(&x).unwrap();
        radius_sum += (rec.data()[0].powi(2) + rec.data()[1].powi(2)).sqrt();
    }

    // One opposite pair: encode, fit, decode, min radii for both paths.
    let n = 2000;
    let angle = |i: usize| {
        let p = &data.data()[2 * i..2 * i + 2];
        p[1].atan2(p[0])
    };
    let target = 0.3f64;
    let wrap = |a: f64| {
        let mut v = a;
        while v > std::f64::consts::PI {
            v -= std::f64::consts::TAU;
        }
        while v < -std::f64::consts::PI {
            v += std::f64::consts::TAU;
        }
        v
    };
    let from = (0..n)
        .min_by(|&a, &b| wrap(angle(a) - target).abs().total_cmp(&wrap(angle(b) - target).abs()))
        .unwrap();
    let to = (0..n)
        .min_by(|&a, &b| {
            wrap(angle(a) - target - std::f64::consts::PI)
                .abs()
                .total_cmp(&wrap(angle(b) - target - std::f64::consts::PI).abs())
        })
        .unwrap();
    let zmean = |i: usize, r: &mut rng::ChaCha8Rng| {
        let x = Tensor::vector(data.data()[2 * i..2 * i + 2].to_vec());
        let p = model.encode(&x, r).unwrap();
        let mut z = p.posterior_a.mean().data().to_vec();
        z.extend(p.posterior_b.mean().data());
        Tensor::vector(z)
    };
    let z1 = zmean(from, &mut r);
    let z2 = zmean(to, &mut r);
    let decoder = |tape: &Tape, z: &Var| model.decode_var(tape, z);
    let sampling = CurveSampling::default();
    let cfg = FitConfig { learning_rate: 0.02, steps: 250, ..FitConfig::default() };
    let fit = fit_geodesic(&decoder, &z1, &z2, &sampling, &cfg).unwrap();
    let geo = decode_curve(&decoder, &fit.curve, &sampling).unwrap();
    let lin = linear_baseline(&decoder, &z1, &z2, &sampling).unwrap();

    println!(
        "{tag:16} recon {:8.4} pair {:8.4} kl {:7.3} | recon radius {:6.3} | geo min r {:6.3} lin min r {:6.3} | {:.0}s",
        last.recon,
        last.pair,
        last.kl,
        radius_sum / 50.0,
        min_radius(&geo),
        min_radius(&lin),
        secs
    );
}

#[test]
#[ignore]
fn donut_probe() {
    probe("s4-6 gd1 120", 4.0, 6.0, 1.0, 1e-3, 120);
    probe("s4-6 gd.3 120", 4.0, 6.0, 0.3, 1e-3, 120);
    probe("s8-12 gd1 120", 8.0, 12.0, 1.0, 1e-3, 120);
    probe("s4-6 gd1 lr3e-3", 4.0, 6.0, 1.0, 3e-3, 120);
}
