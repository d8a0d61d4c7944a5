#![allow(dropping_copy_types, clippy::drop_non_drop)]
//! Finite-difference validation of every differentiable component.
//!
//! Each layer's analytic backward pass is compared against central
//! differences of a scalar projection of its output, for both parameter and
//! input gradients, at 64-bit precision.

mod common;

use common::*;
use isgfan::nn::decoder::Decoder;
use isgfan::nn::extractor::{Extractor, ExtractorConfig};
use isgfan::nn::heads::{HeadConfig, MlpHead, SdcHead};
use isgfan::nn::layers::{
    global_avg_pool, global_avg_pool_backward, ChannelLinear, ConvTranspose1d, Dense,
    DepthwiseConv1d, Grn, LayerNormChannels, StridedConv1d,
};
use isgfan::nn::params::ParamEntry;
use isgfan::seed;
use ndarray::{Array2, Array3};

const TOL: f64 = 1e-3;

/// Collects `(name, index)`-addressable copies of all parameter entries.
fn snapshot_grads(visit: &mut dyn FnMut(&mut dyn FnMut(ParamEntry))) -> Vec<(String, Vec<f64>)> {
    let mut out = Vec::new();
    visit(&mut |e: ParamEntry| {
        out.push((e.name.clone(), e.grad.to_vec()));
    });
    out
}

fn param_sizes(visit: &mut dyn FnMut(&mut dyn FnMut(ParamEntry))) -> Vec<(String, usize)> {
    let mut out = Vec::new();
    visit(&mut |e: ParamEntry| {
        out.push((e.name.clone(), e.value.len()));
    });
    out
}

fn set_param(
    visit: &mut dyn FnMut(&mut dyn FnMut(ParamEntry)),
    tensor: usize,
    index: usize,
    value: f64,
) {
    let mut k = 0usize;
    visit(&mut |mut e: ParamEntry| {
        if k == tensor {
            e.value[index] = value;
        }
        let _ = &mut e;
        k += 1;
    });
}

fn get_param(visit: &mut dyn FnMut(&mut dyn FnMut(ParamEntry)), tensor: usize, index: usize) -> f64 {
    let mut k = 0usize;
    let mut out = 0.0;
    visit(&mut |e: ParamEntry| {
        if k == tensor {
            out = e.value[index];
        }
        k += 1;
    });
    out
}

fn zero_grads(visit: &mut dyn FnMut(&mut dyn FnMut(ParamEntry))) {
    visit(&mut |e: ParamEntry| e.grad.fill(0.0));
}

/// Full FD-vs-analytic check of one map layer `(B, C, L) -> (B, C', L')`.
///
/// `forward` evaluates the layer; `backward` runs the layer's backward pass
/// with the given upstream gradient and returns the input gradient.
macro_rules! check_map_layer {
    ($name:expr, $ty:ty, $layer:expr, $x:expr, $rng:expr,
     forward: |$l_f:ident, $x_f:ident| $fwd:expr,
     backward: |$l_b:ident, $x_b:ident, $r_b:ident| $bwd:expr) => {{
        let mut layer = $layer;
        let x = $x;
        let probe = {
            let $l_f: &$ty = &layer;
            let $x_f = &x;
            let y = $fwd;
            rand_array3($rng, y.dim().0, y.dim().1, y.dim().2, 1.0)
        };
        let loss = |layer: &$ty, x: &Array3<f64>| -> f64 {
            let $l_f = layer;
            let $x_f = x;
            let y = $fwd;
            (&y * &probe).sum()
        };

        // Analytic pass.
        let mut visit = |f: &mut dyn FnMut(ParamEntry)| layer.visit("p", f);
        zero_grads(&mut visit);
        drop(visit);
        let grad_in = {
            let $l_b = &mut layer;
            let $x_b = &x;
            let $r_b = &probe;
            $bwd
        };
        let mut visit = |f: &mut dyn FnMut(ParamEntry)| layer.visit("p", f);
        let analytic = snapshot_grads(&mut visit);
        let sizes = param_sizes(&mut visit);
        drop(visit);

        // Parameter gradients.
        for (tensor, (name, size)) in sizes.iter().enumerate() {
            for index in 0..*size {
                let mut visit = |f: &mut dyn FnMut(ParamEntry)| layer.visit("p", f);
                let orig = get_param(&mut visit, tensor, index);
                drop(visit);
                let numeric = central_diff(
                    |v| {
                        let mut visit = |f: &mut dyn FnMut(ParamEntry)| layer.visit("p", f);
                        set_param(&mut visit, tensor, index, v);
                        drop(visit);
                        loss(&layer, &x)
                    },
                    orig,
                );
                let mut visit = |f: &mut dyn FnMut(ParamEntry)| layer.visit("p", f);
                set_param(&mut visit, tensor, index, orig);
                drop(visit);
                assert_grad(
                    analytic[tensor].1[index],
                    numeric,
                    TOL,
                    &format!("{} param {name}[{index}]", $name),
                );
            }
        }

        // Input gradients (subsample for large inputs).
        let flat: Vec<usize> = (0..x.len()).step_by(1 + x.len() / 64).collect();
        let mut x_mut = x.clone();
        for &i in &flat {
            let orig = x_mut.as_slice().unwrap()[i];
            let numeric = central_diff(
                |v| {
                    x_mut.as_slice_mut().unwrap()[i] = v;
                    loss(&layer, &x_mut)
                },
                orig,
            );
            x_mut.as_slice_mut().unwrap()[i] = orig;
            assert_grad(
                grad_in.as_slice().unwrap()[i],
                numeric,
                TOL,
                &format!("{} input[{i}]", $name),
            );
        }
    }};
}

#[test]
fn dense_gradients() {
    let mut rng = seed::rng(101);
    let layer = Dense::new(&mut rng, 5, 3);
    let x = rand_array2(&mut rng, 4, 5, 1.0);
    let probe = rand_array2(&mut rng, 4, 3, 1.0);

    let mut layer = layer;
    let loss = |l: &Dense, x: &Array2<f64>| (&l.forward(x).0 * &probe).sum();

    let mut visit = |f: &mut dyn FnMut(ParamEntry)| layer.visit("p", f);
    zero_grads(&mut visit);
    drop(visit);
    let (_, cache) = layer.forward(&x);
    let grad_in = layer.backward(&cache, &probe);
    let mut visit = |f: &mut dyn FnMut(ParamEntry)| layer.visit("p", f);
    let analytic = snapshot_grads(&mut visit);
    let sizes = param_sizes(&mut visit);
    drop(visit);

    for (tensor, (name, size)) in sizes.iter().enumerate() {
        for index in 0..*size {
            let mut visit = |f: &mut dyn FnMut(ParamEntry)| layer.visit("p", f);
            let orig = get_param(&mut visit, tensor, index);
            drop(visit);
            let numeric = central_diff(
                |v| {
                    let mut visit = |f: &mut dyn FnMut(ParamEntry)| layer.visit("p", f);
                    set_param(&mut visit, tensor, index, v);
                    drop(visit);
                    loss(&layer, &x)
                },
                orig,
            );
            let mut visit = |f: &mut dyn FnMut(ParamEntry)| layer.visit("p", f);
            set_param(&mut visit, tensor, index, orig);
            drop(visit);
            assert_grad(analytic[tensor].1[index], numeric, TOL, &format!("dense {name}[{index}]"));
        }
    }
    let mut x_mut = x.clone();
    for i in 0..x.len() {
        let orig = x_mut.as_slice().unwrap()[i];
        let numeric = central_diff(
            |v| {
                x_mut.as_slice_mut().unwrap()[i] = v;
                loss(&layer, &x_mut)
            },
            orig,
        );
        x_mut.as_slice_mut().unwrap()[i] = orig;
        assert_grad(grad_in.as_slice().unwrap()[i], numeric, TOL, &format!("dense input[{i}]"));
    }
}

#[test]
fn channel_linear_gradients() {
    let mut rng = seed::rng(102);
    let layer = ChannelLinear::new(&mut rng, 3, 4);
    let x = rand_array3(&mut rng, 2, 3, 5, 1.0);
    check_map_layer!(
        "channel_linear", ChannelLinear, layer, x, &mut rng,
        forward: |l, x| l.forward(x).0,
        backward: |l, x, r| {
            let (_, cache) = l.forward(x);
            l.backward(&cache, r)
        }
    );
}

#[test]
fn depthwise_conv_gradients() {
    let mut rng = seed::rng(103);
    let layer = DepthwiseConv1d::new(&mut rng, 3, 7);
    let x = rand_array3(&mut rng, 2, 3, 9, 1.0);
    check_map_layer!(
        "depthwise", DepthwiseConv1d, layer, x, &mut rng,
        forward: |l, x| l.forward(x).0,
        backward: |l, x, r| {
            let (_, cache) = l.forward(x);
            l.backward(&cache, r)
        }
    );
}

#[test]
fn strided_conv_gradients() {
    let mut rng = seed::rng(104);
    let layer = StridedConv1d::new(&mut rng, 2, 3, 4);
    let x = rand_array3(&mut rng, 2, 2, 16, 1.0);
    check_map_layer!(
        "strided", StridedConv1d, layer, x, &mut rng,
        forward: |l, x| l.forward(x).0,
        backward: |l, x, r| {
            let (_, cache) = l.forward(x);
            l.backward(&cache, r)
        }
    );
}

#[test]
fn conv_transpose_gradients() {
    let mut rng = seed::rng(105);
    let layer = ConvTranspose1d::new(&mut rng, 3, 2, 4, 2, 1);
    let x = rand_array3(&mut rng, 2, 3, 6, 1.0);
    check_map_layer!(
        "transpose", ConvTranspose1d, layer, x, &mut rng,
        forward: |l, x| l.forward(x).0,
        backward: |l, x, r| {
            let (_, cache) = l.forward(x);
            l.backward(&cache, r)
        }
    );
}

#[test]
fn layer_norm_gradients() {
    let mut rng = seed::rng(106);
    let mut layer = LayerNormChannels::new(4);
    // Random affine parameters so both branches carry gradient.
    layer.gamma = rand_array1(&mut rng, 4, 1.0);
    layer.beta = rand_array1(&mut rng, 4, 0.5);
    let x = rand_array3(&mut rng, 2, 4, 3, 1.0);
    check_map_layer!(
        "layer_norm", LayerNormChannels, layer, x, &mut rng,
        forward: |l, x| l.forward(x).0,
        backward: |l, x, r| {
            let (_, cache) = l.forward(x);
            l.backward(&cache, r)
        }
    );
}

#[test]
fn grn_gradients() {
    let mut rng = seed::rng(107);
    let mut layer = Grn::new(3);
    layer.gamma = rand_array1(&mut rng, 3, 1.0);
    layer.beta = rand_array1(&mut rng, 3, 0.5);
    let x = rand_array3(&mut rng, 2, 3, 5, 1.0);
    check_map_layer!(
        "grn", Grn, layer, x, &mut rng,
        forward: |l, x| l.forward(x).0,
        backward: |l, x, r| {
            let (_, cache) = l.forward(x);
            l.backward(&cache, r)
        }
    );
}

#[test]
fn extractor_end_to_end_gradients() {
    let mut rng = seed::rng(108);
    let cfg = ExtractorConfig::scaled([2, 3, 4, 5]);
    let extractor = Extractor::new(cfg, &mut rng).unwrap();
    let x = rand_array3(&mut rng, 2, 1, 64, 0.7);
    check_map_layer!(
        "extractor", Extractor, extractor, x, &mut rng,
        forward: |l, x| l.forward(x).unwrap().0,
        backward: |l, x, r| {
            let (_, trace) = l.forward(x).unwrap();
            l.backward(&trace, r)
        }
    );
}

#[test]
fn pooled_head_gradients() {
    // Extractor + pooling + MLP head: checks the unpooling backward glue.
    let mut rng = seed::rng(109);
    let cfg = ExtractorConfig::scaled([2, 3, 4, 5]);
    let extractor = Extractor::new(cfg, &mut rng).unwrap();
    let head = MlpHead::new(HeadConfig::compressing(5, 3), &mut rng);
    let x = rand_array3(&mut rng, 2, 1, 64, 0.7);
    let probe = rand_array2(&mut rng, 2, 3, 1.0);

    let loss = |ex: &Extractor, h: &MlpHead, x: &Array3<f64>| -> f64 {
        let (map, _) = ex.forward(x).unwrap();
        let pooled = global_avg_pool(&map);
        let (logits, _) = h.forward(&pooled).unwrap();
        (&logits * &probe).sum()
    };

    let mut extractor = extractor;
    let mut head = head;
    let mut visit_ex = |f: &mut dyn FnMut(ParamEntry)| extractor.visit("ex", f);
    zero_grads(&mut visit_ex);
    drop(visit_ex);
    let (map, trace) = extractor.forward(&x).unwrap();
    let pooled = global_avg_pool(&map);
    let (_, head_trace) = head.forward(&pooled).unwrap();
    let d_pooled = head.backward(&head_trace, &probe);
    let d_map = global_avg_pool_backward(&d_pooled, map.dim().2);
    extractor.backward(&trace, &d_map);

    let mut visit_ex = |f: &mut dyn FnMut(ParamEntry)| extractor.visit("ex", f);
    let analytic = snapshot_grads(&mut visit_ex);
    let sizes = param_sizes(&mut visit_ex);
    drop(visit_ex);

    // Check a deterministic sample of extractor parameters.
    for (tensor, (name, size)) in sizes.iter().enumerate() {
        for index in (0..*size).step_by(1 + size / 6) {
            let mut visit = |f: &mut dyn FnMut(ParamEntry)| extractor.visit("ex", f);
            let orig = get_param(&mut visit, tensor, index);
            drop(visit);
            let numeric = central_diff(
                |v| {
                    let mut visit = |f: &mut dyn FnMut(ParamEntry)| extractor.visit("ex", f);
                    set_param(&mut visit, tensor, index, v);
                    drop(visit);
                    loss(&extractor, &head, &x)
                },
                orig,
            );
            let mut visit = |f: &mut dyn FnMut(ParamEntry)| extractor.visit("ex", f);
            set_param(&mut visit, tensor, index, orig);
            drop(visit);
            assert_grad(
                analytic[tensor].1[index],
                numeric,
                TOL,
                &format!("pooled-head {name}[{index}]"),
            );
        }
    }
}

#[test]
fn decoder_gradients() {
    let mut rng = seed::rng(110);
    let decoder = Decoder::new(4, 7, &mut rng);
    let x = rand_array3(&mut rng, 1, 8, 2, 0.8);
    check_map_layer!(
        "decoder", Decoder, decoder, x, &mut rng,
        forward: |l, x| l.forward(x).unwrap().0,
        backward: |l, x, r| {
            let (_, trace) = l.forward(x).unwrap();
            l.backward(&trace, r)
        }
    );
}

#[test]
fn sdc_gradients() {
    let mut rng = seed::rng(111);
    let mut sdc = SdcHead::new(4, &mut rng);
    let x = rand_array2(&mut rng, 3, 4, 1.0);
    let probe = rand_array2(&mut rng, 3, 1, 1.0);

    let mut visit = |f: &mut dyn FnMut(ParamEntry)| sdc.visit("s", f);
    zero_grads(&mut visit);
    drop(visit);
    let (_, cache) = sdc.forward(&x).unwrap();
    let grad_in = sdc.backward(&cache, &probe);
    let mut visit = |f: &mut dyn FnMut(ParamEntry)| sdc.visit("s", f);
    let analytic = snapshot_grads(&mut visit);
    let sizes = param_sizes(&mut visit);
    drop(visit);

    for (tensor, (name, size)) in sizes.iter().enumerate() {
        for index in 0..*size {
            let mut visit = |f: &mut dyn FnMut(ParamEntry)| sdc.visit("s", f);
            let orig = get_param(&mut visit, tensor, index);
            drop(visit);
            let numeric = central_diff(
                |v| {
                    let mut visit = |f: &mut dyn FnMut(ParamEntry)| sdc.visit("s", f);
                    set_param(&mut visit, tensor, index, v);
                    drop(visit);
                    (&sdc.forward(&x).unwrap().0 * &probe).sum()
                },
                orig,
            );
            let mut visit = |f: &mut dyn FnMut(ParamEntry)| sdc.visit("s", f);
            set_param(&mut visit, tensor, index, orig);
            drop(visit);
            assert_grad(analytic[tensor].1[index], numeric, TOL, &format!("sdc {name}[{index}]"));
        }
    }
    let mut x_mut = x.clone();
    for i in 0..x.len() {
        let orig = x_mut.as_slice().unwrap()[i];
        let numeric = central_diff(
            |v| {
                x_mut.as_slice_mut().unwrap()[i] = v;
                (&sdc.forward(&x_mut).unwrap().0 * &probe).sum()
            },
            orig,
        );
        x_mut.as_slice_mut().unwrap()[i] = orig;
        assert_grad(grad_in.as_slice().unwrap()[i], numeric, TOL, &format!("sdc input[{i}]"));
    }
}
