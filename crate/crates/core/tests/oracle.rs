mod common;

use common::{concat_net, max_rel_diff, oracle_forward, perturbed, random_input, with_mode};
use teleport_core::analysis::analytic_teleported_gradient;
use teleport_core::cob::{sample_cob, CobKind, CobSamplingSpec};
use teleport_core::network::{
    backward, extract_feature_maps, forward, ActivationKind, BatchNormMode, Layer, LossKind, Network, Preset,
    Target,
};
use teleport_core::{teleport, ChangeOfBasis, Tensor};

fn nets() -> Vec<Network> {
    let mut out = Vec::new();
    for kind in ActivationKind::ALL {
        out.push(Preset::MlpSmall.build_with(&[7], 4, kind).unwrap());
        out.push(Preset::SmallConvNet.build_with(&[2, 5, 5], 4, kind).unwrap());
        out.push(Preset::SmallResNet.build_with(&[1, 4, 4], 4, kind).unwrap());
        out.push(concat_net(kind));
    }
    out
}

fn flat(rows: &[Vec<f64>]) -> Vec<f64> {
    rows.iter().flatten().copied().collect()
}

#[test]
fn forward_matches_direct_loops() {
    for (i, net) in nets().iter().enumerate() {
        for mode in [BatchNormMode::Train, BatchNormMode::Eval] {
            let net = with_mode(&perturbed(net, i as u64), mode);
            let x = random_input(net.input_shape(), 3, 2.0, i as u64);
            let got = forward(&net, &x).unwrap().into_output();
            let want = flat(&oracle_forward(&net, &x));
            assert!(max_rel_diff(got.data(), &want) <= 1e-12, "net {i} {mode:?}");
        }
    }
}

#[test]
fn forward_matches_direct_loops_after_teleport() {
    for (i, net) in nets().iter().enumerate() {
        let net = with_mode(&perturbed(net, 10 + i as u64), BatchNormMode::Eval);
        let cob = sample_cob(&net, &CobSamplingSpec::new(CobKind::Inter, 0.9, i as u64).unwrap()).unwrap();
        let (v, _) = teleport(&net, &cob).unwrap();
        let x = random_input(net.input_shape(), 2, 1.0, 50 + i as u64);
        let got = forward(&v, &x).unwrap().into_output();
        assert!(max_rel_diff(got.data(), &flat(&oracle_forward(&v, &x))) <= 1e-12);
    }
}

#[test]
fn teleportation_preserves_the_function() {
    for (i, net) in nets().iter().enumerate() {
        for mode in [BatchNormMode::Train, BatchNormMode::Eval] {
            let net = with_mode(&perturbed(net, 20 + i as u64), mode);
            let x = random_input(net.input_shape(), 4, 1.0, 70 + i as u64);
            let before = forward(&net, &x).unwrap().into_output();
            for kind in [CobKind::Intra, CobKind::Inter] {
                let cob = sample_cob(&net, &CobSamplingSpec::new(kind, 0.9, 3 + i as u64).unwrap()).unwrap();
                let (v, _) = teleport(&net, &cob).unwrap();
                let after = forward(&v, &x).unwrap().into_output();
                assert!(max_rel_diff(before.data(), after.data()) <= 1e-9, "net {i} {kind} {mode:?}");
            }
        }
    }
}

fn gradient_oracle_error(net: &Network, cob: &ChangeOfBasis, x: &Tensor, t: &Target) -> f64 {
    let g = backward(net, &forward(net, x).unwrap(), t, LossKind::CrossEntropy).unwrap();
    let (v, _) = teleport(net, cob).unwrap();
    let gv = backward(&v, &forward(&v, x).unwrap(), t, LossKind::CrossEntropy).unwrap();
    let analytic = analytic_teleported_gradient(net, &g, cob).unwrap();
    // Compare every slice on its own scale so a small layer is not hidden
    // by a large one. Slices that vanish identically (biases feeding a
    // train-mode batch norm with linear activations) fall back to a floor
    // tied to the whole gradient.
    let global = gv.flatten().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let rel = |p: &[f64], q: &[f64]| {
        let scale = p.iter().chain(q).fold(1e-6 * global, |m, v| m.max(v.abs()));
        p.iter().zip(q).fold(0.0f64, |m, (a, b)| m.max((a - b).abs())) / scale
    };
    let mut worst: f64 = 0.0;
    for (a, b) in analytic.layers.iter().zip(&gv.layers) {
        for (p, q) in a.slices().iter().zip(b.slices()) {
            worst = worst.max(rel(p, q));
        }
    }
    for (a, b) in analytic.nodes.iter().zip(&gv.nodes) {
        worst = worst.max(rel(a.data(), b.data()));
    }
    worst
}

#[test]
fn teleported_gradient_matches_backprop() {
    for (i, net) in nets().iter().enumerate() {
        for mode in [BatchNormMode::Train, BatchNormMode::Eval] {
            let net = with_mode(&perturbed(net, 30 + i as u64), mode);
            let x = random_input(net.input_shape(), 5, 1.0, 90 + i as u64);
            let classes = net.output_shape()[0];
            let t = Target::Labels((0..5).map(|j| j % classes).collect());
            for (j, kind) in [CobKind::Intra, CobKind::Inter].into_iter().enumerate() {
                let cob = sample_cob(&net, &CobSamplingSpec::new(kind, 0.5, (i * 2 + j) as u64).unwrap()).unwrap();
                let err = gradient_oracle_error(&net, &cob, &x, &t);
                assert!(err <= 1e-9, "net {i} {kind} {mode:?}: {err:e}");
            }
        }
    }
}

#[test]
fn hidden_nodes_scale_with_the_cob() {
    for (i, net) in nets().iter().enumerate() {
        let net = with_mode(&perturbed(net, 60 + i as u64), BatchNormMode::Eval);
        let cob = sample_cob(&net, &CobSamplingSpec::new(CobKind::Inter, 0.7, i as u64).unwrap()).unwrap();
        let (v, _) = teleport(&net, &cob).unwrap();
        let x = random_input(net.input_shape(), 2, 1.0, i as u64);
        for node in 0..net.node_count() {
            let a = extract_feature_maps(&net, &x, node).unwrap();
            let b = extract_feature_maps(&v, &x, node).unwrap();
            let tau = cob.node(node);
            let inner: usize = net.node_shapes()[node][1..].iter().product();
            let scaled: Vec<f64> = a
                .data()
                .iter()
                .enumerate()
                .map(|(j, val)| val * tau[(j / inner) % tau.len()])
                .collect();
            assert!(max_rel_diff(&scaled, b.data()) <= 1e-12, "net {i} node {node}");
        }
    }
}

#[test]
fn train_mode_batchnorm_ignores_input_rescaling() {
    // Large-variance inputs keep eps negligible next to the batch variance.
    let net = with_mode(&perturbed(&Preset::SmallConvNet.build(&[1, 5, 5], 3).unwrap(), 4), BatchNormMode::Train);
    let x = random_input(net.input_shape(), 6, 100.0, 5);
    let before = forward(&net, &x).unwrap().into_output();
    let mut layers = net.layers().to_vec();
    if let Layer::Conv2d(c) = &mut layers[0] {
        c.kernel = c.kernel.scale(3.7);
    }
    let scaled = Network::new(net.input_shape().to_vec(), layers).unwrap();
    let after = forward(&scaled, &x).unwrap().into_output();
    assert!(max_rel_diff(before.data(), after.data()) <= 1e-9);
}
