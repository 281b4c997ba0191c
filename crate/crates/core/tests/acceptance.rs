//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::Rng;
use teleport_core::analysis::{
    analytic_teleported_gradient, curvature_proxy, expected_squared_ratio, interpolate_networks,
    level_curve_probe, micro_angle_experiment, normalized_gradient_gap, AngleSample, MicroAngleConfig, PairKind,
};
use teleport_core::cob::{compose_cob, invert_cob};
use teleport_core::config::ExperimentConfig;
use teleport_core::data::{load_mnist, make_random_dataset, Dataset, Split};
use teleport_core::experiments::{self, teleport_for_interpolation};
use teleport_core::network::{
    backward, forward, ActivationDescriptor, ActivationKind, BatchNormMode, LossKind, Preset, Target,
};
use teleport_core::rng;
use teleport_core::trainer::{
    initialize, train, InitScheme, TeleportEvent, TeleportMode, TeleportTiming, TrainConfig,
};
use teleport_core::{pseudo_teleport, sample_cob, teleport, validate_cob, CobKind, CobSamplingSpec, Tensor};

struct Outcome {
    pass: bool,
    detail: String,
}

fn data_root() -> PathBuf {
    std::env::var_os("TELEPORT_LAB_DATA")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data"))
}

fn mnist(split: Split, n: usize) -> Dataset {
    load_mnist(&data_root().join("mnist"), split, Some(n), experiments::DATA_SEED).expect("MNIST under the data root")
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn rel_diff(a: &[f64], b: &[f64]) -> f64 {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&d) / norm(b).max(f64::MIN_POSITIVE)
}

fn std_dev(v: &[f64]) -> f64 {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn within(elapsed: Duration, limit_secs: u64) -> bool {
    elapsed <= Duration::from_secs(limit_secs)
}

fn level_curves() -> Outcome {
    let start = Instant::now();
    let net = initialize(&Preset::MlpSmall.build(&[784], 10).unwrap(), InitScheme::Kaiming, 0);
    let data = make_random_dataset(2048, &[784], 10, 0).unwrap();
    let spec = CobSamplingSpec::new(CobKind::Inter, 0.9, 0).unwrap();
    let rows = level_curve_probe(&net, &data, 100, &spec, LossKind::CrossEntropy).unwrap();
    let max = rows.iter().map(|r| r.loss_diff).fold(0.0, f64::max);
    let l1 = rows.iter().map(|r| r.weight_l1_diff).sum::<f64>() / rows.len() as f64;
    let w = net.parameters();
    let magnitude = w.iter().map(|x| x.abs()).sum::<f64>() / w.len() as f64;
    let t = start.elapsed();
    Outcome {
        pass: max <= 1e-8 && l1 >= 0.1 * magnitude && within(t, 60),
        detail: format!(
            "max |dL| {max:.2e} <= 1e-8, mean L1 diff {l1:.4} vs 0.1 x magnitude {:.4}, {:.1}s < 60s",
            0.1 * magnitude,
            t.as_secs_f64()
        ),
    }
}

fn gradient_oracle() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for (p, shape) in [
        (Preset::MlpSmall, vec![784]),
        (Preset::SmallConvNet, vec![1, 28, 28]),
        (Preset::SmallResNet, vec![1, 28, 28]),
    ] {
        let mut net = initialize(&p.build(&shape, 10).unwrap(), InitScheme::Kaiming, 1);
        net.set_batchnorm_mode(BatchNormMode::Train);
        let data = make_random_dataset(8, &shape, 10, 2).unwrap();
        let (x, y) = data.slice(0, 8);
        let target = Target::Labels(y);
        let g = backward(&net, &forward(&net, &x).unwrap(), &target, LossKind::CrossEntropy).unwrap();
        for i in 0..10u64 {
            let kind = if i % 2 == 0 { CobKind::Intra } else { CobKind::Inter };
            let cob = sample_cob(&net, &CobSamplingSpec::new(kind, 0.5, i).unwrap()).unwrap();
            let (v, _) = teleport(&net, &cob).unwrap();
            let gv = backward(&v, &forward(&v, &x).unwrap(), &target, LossKind::CrossEntropy).unwrap();
            let analytic = analytic_teleported_gradient(&net, &g, &cob).unwrap();
            let global = gv.flatten().iter().fold(0.0f64, |m, v| m.max(v.abs()));
            for (a, b) in analytic.layers.iter().zip(&gv.layers) {
                for (s, u) in a.slices().iter().zip(b.slices()) {
                    // Elementwise relative error, scaled per parameter slice;
                    // slices that vanish identically use a floor tied to the
                    // whole gradient.
                    let scale = s.iter().chain(u).fold(1e-6 * global, |m, v| m.max(v.abs()));
                    let e = s.iter().zip(u).fold(0.0f64, |m, (p, q)| m.max((p - q).abs())) / scale;
                    worst = worst.max(e);
                }
            }
        }
    }
    let t = start.elapsed();
    Outcome {
        pass: worst <= 1e-9 && within(t, 120),
        detail: format!("worst relative error {worst:.2e} <= 1e-9 over 3 presets x 10 CoBs, {:.1}s < 120s", t.as_secs_f64()),
    }
}

fn micro_vs_grad(samples: &[AngleSample]) -> Vec<f64> {
    samples
        .iter()
        .filter(|s| s.pair_kind == PairKind::MicroVsGrad)
        .map(|s| s.angle_degrees)
        .collect()
}

fn micro_orthogonality() -> Outcome {
    let start = Instant::now();
    let random = make_random_dataset(2048, &[784], 10, 0).unwrap();
    let digits = mnist(Split::Train, 5000);
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, data) in [("random", &random), ("mnist", &digits)] {
        let net = initialize(
            &Preset::MlpSmall.build(data.sample_shape(), 10).unwrap(),
            InitScheme::Gaussian,
            1,
        );
        let cfg = MicroAngleConfig::new(vec![8, 64], 0.001, 100, 3);
        let s = micro_angle_experiment(&net, data, &cfg).unwrap();
        let mg = micro_vs_grad(&s);
        let rr: Vec<f64> = s
            .iter()
            .filter(|a| a.pair_kind == PairKind::RandomVsRandom)
            .map(|a| a.angle_degrees)
            .collect();
        let max_dev = mg.iter().map(|a| (a - 90.0).abs()).fold(0.0, f64::max);
        let ratio = std_dev(&rr) / std_dev(&mg);

        let mut with_l2 = cfg.clone();
        with_l2.l2 = 0.01;
        let shifted = median(micro_vs_grad(&micro_angle_experiment(&net, data, &with_l2).unwrap())
            .iter()
            .map(|a| (a - 90.0).abs())
            .collect());
        pass &= mg.len() == 200 && max_dev <= 0.5 && ratio >= 10.0 && shifted > 0.5;
        parts.push(format!(
            "{name}: max |angle-90| {max_dev:.1e} <= 0.5, sd ratio {ratio:.0} >= 10, l2 median shift {shifted:.2} > 0.5"
        ));
    }
    let t = start.elapsed();
    pass &= within(t, 180);
    Outcome {
        pass,
        detail: format!("{}, {:.1}s < 180s", parts.join("; "), t.as_secs_f64()),
    }
}

fn expectation_formula() -> Outcome {
    let start = Instant::now();
    let mut pass = true;
    let mut parts = Vec::new();
    for (i, sigma) in [0.1, 0.5, 0.9].into_iter().enumerate() {
        let mut r = rng::stream(i as u64, 100);
        let n = 1_000_000;
        let mc = (0..n)
            .map(|_| {
                let a: f64 = r.gen_range(1.0 - sigma..=1.0 + sigma);
                let b: f64 = r.gen_range(1.0 - sigma..=1.0 + sigma);
                (a / b).powi(2)
            })
            .sum::<f64>()
            / n as f64;
        let closed = expected_squared_ratio(sigma).unwrap();
        let rel = (closed - mc).abs() / closed;
        pass &= rel <= 0.01;
        parts.push(format!("sigma {sigma}: {closed:.4} vs MC {mc:.4} ({:.2}%)", rel * 100.0));
    }
    let at_09 = expected_squared_ratio(0.9).unwrap();
    pass &= (at_09 - 6.684).abs() < 5e-4;
    let t = start.elapsed();
    pass &= within(t, 10);
    Outcome {
        pass,
        detail: format!("{}, {:.1}s < 10s", parts.join(", "), t.as_secs_f64()),
    }
}

fn gradient_trend() -> Outcome {
    let start = Instant::now();
    let net = initialize(&Preset::MlpSmall.build(&[784], 10).unwrap(), InitScheme::Kaiming, 0);
    let data = make_random_dataset(2048, &[784], 10, 0).unwrap();
    let (x, y) = data.slice(0, 64);
    let target = Target::Labels(y);
    let sigmas = [0.1, 0.3, 0.5, 0.7, 0.9];
    let means: Vec<f64> = sigmas
        .iter()
        .enumerate()
        .map(|(si, &s)| {
            (0..20)
                .map(|r| {
                    let seed = rng::child_seed(0, (si * 20 + r) as u64);
                    let cob = sample_cob(&net, &CobSamplingSpec::new(CobKind::Inter, s, seed).unwrap()).unwrap();
                    normalized_gradient_gap(&net, &cob, &x, &target, LossKind::CrossEntropy).unwrap()
                })
                .sum::<f64>()
                / 20.0
        })
        .collect();
    let increasing = means.windows(2).all(|w| w[1] > w[0]);
    let t = start.elapsed();
    Outcome {
        pass: increasing && within(t, 60),
        detail: format!(
            "mean gaps {} strictly increasing, {:.1}s < 60s",
            means.iter().map(|m| format!("{m:.2e}")).collect::<Vec<_>>().join(" < "),
            t.as_secs_f64()
        ),
    }
}

fn sharpening() -> Outcome {
    let start = Instant::now();
    let tr = mnist(Split::Train, 5000);
    let va = mnist(Split::Test, 1000);
    let base = Preset::MlpSmall.build(tr.sample_shape(), 10).unwrap();
    let small = train(&base, &tr, &va, &TrainConfig::new(0.01, 10, 8, 1)).unwrap().network;
    let large = train(&base, &tr, &va, &TrainConfig::new(0.01, 10, 128, 1)).unwrap().network;
    let curvatures: Vec<f64> = [0.0, 0.6, 0.9]
        .into_iter()
        .map(|s| {
            let a = teleport_for_interpolation(&small, s, 10).unwrap();
            let b = teleport_for_interpolation(&large, s, 11).unwrap();
            let pts = interpolate_networks(&a, &b, 25, &tr, &va, LossKind::CrossEntropy).unwrap();
            curvature_proxy(&pts.iter().map(|p| p.val_loss).collect::<Vec<_>>()).unwrap()
        })
        .collect();
    let t = start.elapsed();
    Outcome {
        pass: curvatures.windows(2).all(|w| w[1] > w[0]) && within(t, 600),
        detail: format!(
            "val curvature at sigma 0 / 0.6 / 0.9: {:.3} < {:.3} < {:.3}, {:.1}s < 600s",
            curvatures[0],
            curvatures[1],
            curvatures[2],
            t.as_secs_f64()
        ),
    }
}

fn training_dynamics() -> Outcome {
    let start = Instant::now();
    let tr = mnist(Split::Train, 5000);
    let va = mnist(Split::Test, 1000);
    let base = Preset::MlpSmall.build(tr.sample_shape(), 10).unwrap();
    let (mut max_jump, mut grew, mut grew_normalized) = (0.0f64, 0, 0);
    let (mut worst_radius, mut min_pseudo_diff) = (0.0f64, f64::INFINITY);
    for seed in 0..20u64 {
        let spec = CobSamplingSpec::new(CobKind::Inter, 0.9, rng::child_seed(seed, 0)).unwrap();
        let mut cfg = TrainConfig::new(0.01, 6, 64, seed);
        cfg.teleport = Some(TeleportEvent {
            timing: TeleportTiming::AtEpoch(5),
            spec,
            mode: TeleportMode::Teleport,
        });
        let out = train(&base, &tr, &va, &cfg).unwrap();
        let r = out.teleport.expect("event recorded");
        max_jump = max_jump.max((r.val_loss_after - r.val_loss_before).abs());
        grew += usize::from(r.grad_norm_after >= r.grad_norm_before);
        grew_normalized += usize::from(r.normalized_grad_after >= r.normalized_grad_before);

        // Pseudo-teleport the network as it stood before the event.
        let mut before = train(&base, &tr, &va, &TrainConfig::new(0.01, 5, 64, seed)).unwrap().network;
        before.set_batchnorm_mode(BatchNormMode::Eval);
        let cob = sample_cob(&before, &spec).unwrap();
        let (_, report) = teleport(&before, &cob).unwrap();
        let p = pseudo_teleport(&before, &cob, seed).unwrap();
        let disp: Vec<f64> = p.parameters().iter().zip(before.parameters()).map(|(a, b)| a - b).collect();
        let radius = report.displacement_norm();
        worst_radius = worst_radius.max((norm(&disp) - radius).abs() / radius);
        let l0 = teleport_core::trainer::evaluate(&before, &va, LossKind::CrossEntropy).unwrap().0;
        let l1 = teleport_core::trainer::evaluate(&p, &va, LossKind::CrossEntropy).unwrap().0;
        min_pseudo_diff = min_pseudo_diff.min((l1 - l0).abs());
    }
    let t = start.elapsed();
    let pass = max_jump <= 1e-6 && grew >= 18 && worst_radius <= 1e-12 && min_pseudo_diff > 1e-6 && within(t, 600);
    Outcome {
        pass,
        detail: format!(
            "(a) max val-loss jump {max_jump:.1e} <= 1e-6, grad norm grew in {grew}/20 >= 18 (normalized: {grew_normalized}/20); \
             (b) radius error {worst_radius:.1e} <= 1e-12, min pseudo loss change {min_pseudo_diff:.2e} > 1e-6; {:.1}s < 600s",
            t.as_secs_f64()
        ),
    }
}

fn algebra() -> Outcome {
    let start = Instant::now();
    let presets = [
        (Preset::MlpSmall, vec![784]),
        (Preset::SmallConvNet, vec![1, 28, 28]),
        (Preset::SmallResNet, vec![1, 28, 28]),
    ];
    let (mut round_trip, mut composition) = (0.0f64, 0.0f64);
    let mut invalid = 0;
    for (pi, (p, shape)) in presets.iter().enumerate() {
        let mut net = initialize(&p.build(shape, 10).unwrap(), InitScheme::Kaiming, pi as u64);
        net.set_batchnorm_mode(BatchNormMode::Eval);
        for seed in 0..100u64 {
            for kind in [CobKind::Intra, CobKind::Inter, CobKind::Micro] {
                let sigma = if kind == CobKind::Micro { 0.005 } else { 0.9 };
                let cob = sample_cob(&net, &CobSamplingSpec::new(kind, sigma, seed).unwrap()).unwrap();
                invalid += usize::from(!validate_cob(&net, &cob).is_empty());
            }
        }
        for seed in 0..5u64 {
            let a = sample_cob(&net, &CobSamplingSpec::new(CobKind::Inter, 0.9, seed).unwrap()).unwrap();
            let b = sample_cob(&net, &CobSamplingSpec::new(CobKind::Inter, 0.5, seed + 100).unwrap()).unwrap();
            let (ta, _) = teleport(&net, &a).unwrap();
            let (back, _) = teleport(&ta, &invert_cob(&a)).unwrap();
            round_trip = round_trip.max(rel_diff(&back.parameters(), &net.parameters()));
            let (tba, _) = teleport(&ta, &b).unwrap();
            let (direct, _) = teleport(&net, &compose_cob(&b, &a).unwrap()).unwrap();
            composition = composition.max(rel_diff(&tba.parameters(), &direct.parameters()));
        }
    }
    let flipped = ActivationDescriptor::with_scales(ActivationKind::Relu, vec![-1.0]).unwrap();
    let mut r = rng::stream(9, 100);
    let xs: Vec<f64> = (0..10_000).map(|_| r.gen_range(-5.0..5.0)).chain([0.0, -0.0, 1e-300, -1e-300]).collect();
    let n = xs.len();
    let out = flipped.eval(&Tensor::new(vec![n, 1], xs.clone()).unwrap()).unwrap();
    let exact = out.data().iter().zip(&xs).all(|(y, x)| *y == x.min(0.0));
    let t = start.elapsed();
    Outcome {
        pass: round_trip <= 1e-12 && composition <= 1e-12 && exact && invalid == 0 && within(t, 60),
        detail: format!(
            "round trip {round_trip:.1e}, composition {composition:.1e} <= 1e-12; relu at -1 exact: {exact}; \
             invalid sampled CoBs {invalid}/900; {:.1}s < 60s",
            t.as_secs_f64()
        ),
    }
}

fn determinism() -> Outcome {
    let start = Instant::now();
    let configs = [
        "experiment=verify model=mlp-s dataset=random sigma=0.9 n_teleports=20",
        "experiment=level-curve model=small-resnet dataset=random subset_size=64 sigma=0.5 n_teleports=5 epochs=1",
        "experiment=micro-angles model=mlp-s dataset=mnist subset_size=500 sigma=0.001 n_samples=10",
        "experiment=grad-scale model=small-convnet dataset=random subset_size=64 runs=3",
        "experiment=interpolate model=mlp-s dataset=mnist subset_size=500 epochs=2 sigma=0.6 steps=7",
        "experiment=train model=mlp-s dataset=mnist subset_size=500 epochs=3 teleport_epoch=1 optimizer=sgd-momentum",
        "experiment=pseudo model=small-convnet dataset=random subset_size=64 epochs=2 teleport_epoch=1",
        "experiment=feature-maps model=small-resnet dataset=random subset_size=4",
    ];
    let dir = tempfile::tempdir().unwrap();
    let mut mismatched = Vec::new();
    for (i, text) in configs.iter().enumerate() {
        let cfg = ExperimentConfig::parse(text).unwrap();
        let runs: Vec<_> = (0..2)
            .map(|r| {
                let out = dir.path().join(format!("{i}-{r}"));
                experiments::run(&cfg, &out, &data_root()).unwrap()
            })
            .collect();
        for (a, b) in runs[0].files.iter().zip(&runs[1].files) {
            if fs::read(a).unwrap() != fs::read(b).unwrap() {
                mismatched.push(a.file_name().unwrap().to_string_lossy().into_owned());
            }
        }
    }
    Outcome {
        pass: mismatched.is_empty(),
        detail: format!(
            "{} experiment kinds rerun, differing outputs: {:?}, {:.1}s",
            configs.len(),
            mismatched,
            start.elapsed().as_secs_f64()
        ),
    }
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("level curves", level_curves),
        ("teleported gradient oracle", gradient_oracle),
        ("micro-teleportation orthogonality", micro_orthogonality),
        ("expectation formula", expectation_formula),
        ("gradient magnitude trend", gradient_trend),
        ("interpolation sharpening", sharpening),
        ("training dynamics", training_dynamics),
        ("algebraic suite", algebra),
        ("determinism", determinism),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !filter.is_empty() && !filter.iter().any(|f| *f == n.to_string()) {
            continue;
        }
        let o = check();
        failed += usize::from(!o.pass);
        println!("criterion {n} ({name}): {} | {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}
