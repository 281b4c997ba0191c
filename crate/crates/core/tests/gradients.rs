mod common;

use common::{concat_net, perturbed, random_input, rng, with_mode};
use rand::seq::index;
use teleport_core::cob::{sample_cob, CobKind, CobSamplingSpec};
use teleport_core::network::{
    backward, forward, loss, ActivationKind, BatchNormMode, LossKind, Network, Preset, Target,
};
use teleport_core::{teleport, Tensor};

const H: f64 = 1e-6;
const TOL: f64 = 1e-5;
const CHECKED: usize = 25;

fn loss_at(net: &Network, x: &Tensor, t: &Target, kind: LossKind) -> f64 {
    loss(forward(net, x).unwrap().output(), t, kind).unwrap()
}

/// Relative error with a floor so that near-zero gradients are compared
/// on an absolute scale.
fn rel(fd: f64, g: f64) -> f64 {
    (fd - g).abs() / fd.abs().max(g.abs()).max(1e-4)
}

fn check(net: &Network, x: &Tensor, t: &Target, kind: LossKind, seed: u64, label: &str) {
    let grads = backward(net, &forward(net, x).unwrap(), t, kind).unwrap();
    let g = grads.flatten();
    let w = net.parameters();
    assert_eq!(g.len(), w.len());
    let mut r = rng(seed);
    let picks = index::sample(&mut r, w.len(), CHECKED.min(w.len())).into_vec();
    let mut probe = net.clone();
    for i in picks {
        let mut p = w.clone();
        p[i] = w[i] + H;
        probe.set_parameters(&p).unwrap();
        let up = loss_at(&probe, x, t, kind);
        p[i] = w[i] - H;
        probe.set_parameters(&p).unwrap();
        let down = loss_at(&probe, x, t, kind);
        let fd = (up - down) / (2.0 * H);
        assert!(rel(fd, g[i]) <= TOL, "{label}: param {i} fd {fd} vs analytic {}", g[i]);
    }
    // A few input coordinates through the node gradient.
    let dx = &grads.nodes[0];
    let mut picks_x = index::sample(&mut r, x.len(), 5.min(x.len())).into_vec();
    picks_x.sort_unstable();
    for j in picks_x {
        let mut xp = x.data().to_vec();
        xp[j] += H;
        let up = loss_at(net, &Tensor::new(x.shape().to_vec(), xp.clone()).unwrap(), t, kind);
        xp[j] -= 2.0 * H;
        let down = loss_at(net, &Tensor::new(x.shape().to_vec(), xp).unwrap(), t, kind);
        let fd = (up - down) / (2.0 * H);
        assert!(rel(fd, dx.data()[j]) <= TOL, "{label}: input {j} fd {fd} vs {}", dx.data()[j]);
    }
}

fn cases() -> Vec<(&'static str, Network)> {
    let mut out = Vec::new();
    for kind in ActivationKind::ALL {
        out.push(("mlp-s", Preset::MlpSmall.build_with(&[6], 3, kind).unwrap()));
        out.push(("small-convnet", Preset::SmallConvNet.build_with(&[2, 4, 4], 3, kind).unwrap()));
        out.push(("small-resnet", Preset::SmallResNet.build_with(&[2, 4, 4], 3, kind).unwrap()));
        out.push(("concat", concat_net(kind)));
    }
    out
}

#[test]
fn cross_entropy_gradients_match_finite_differences() {
    for (i, (name, net)) in cases().into_iter().enumerate() {
        let net = perturbed(&net, i as u64);
        let x = random_input(net.input_shape(), 4, 1.0, 100 + i as u64);
        let t = Target::Labels(vec![0, 1, 2, 1]);
        for mode in [BatchNormMode::Train, BatchNormMode::Eval] {
            let n = with_mode(&net, mode);
            check(&n, &x, &t, LossKind::CrossEntropy, i as u64, &format!("{name} {mode:?}"));
        }
    }
}

#[test]
fn mse_gradients_match_finite_differences() {
    let net = perturbed(&Preset::MlpSmall.build_with(&[5], 4, ActivationKind::Tanh).unwrap(), 3);
    let x = random_input(&[5], 3, 1.0, 4);
    let t = Target::Values(random_input(&[4], 3, 1.0, 5));
    check(&net, &x, &t, LossKind::Mse, 6, "mlp-s mse");
}

#[test]
fn gradients_with_non_unit_activation_scales() {
    for (i, (name, net)) in cases().into_iter().enumerate() {
        let net = with_mode(&perturbed(&net, 40 + i as u64), BatchNormMode::Eval);
        let cob = sample_cob(&net, &CobSamplingSpec::new(CobKind::Inter, 0.5, i as u64).unwrap()).unwrap();
        let (v, _) = teleport(&net, &cob).unwrap();
        assert!(!v.activations_equal_base());
        let x = random_input(v.input_shape(), 3, 1.0, 200 + i as u64);
        check(&v, &x, &Target::Labels(vec![2, 0, 1]), LossKind::CrossEntropy, 70 + i as u64, name);
    }
}
