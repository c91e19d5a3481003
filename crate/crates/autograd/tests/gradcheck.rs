//! Central finite differences against the tape for every op, in f64.

use std::rc::Rc;

use jigwm_autograd::{Graph, PixelMask, Tensor, Var};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

const H: f64 = 1e-5;

fn rand_tensor(rng: &mut StdRng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Contracts the op output with fixed random weights so every output
/// element contributes a distinct coefficient to the scalar loss.
fn loss_value<F>(inputs: &[Tensor<f64>], weights: &mut Option<Tensor<f64>>, seed: u64, build: &F) -> (f64, Vec<Tensor<f64>>)
where
    F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Var<'g, f64>,
{
    let g = Graph::new();
    let vars: Vec<_> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = build(&g, &vars);
    let w = weights
        .get_or_insert_with(|| {
            let mut rng = StdRng::seed_from_u64(seed ^ 0xABCD);
            rand_tensor(&mut rng, &out.shape(), -1.0, 1.0)
        })
        .clone();
    let loss = out.mul(g.constant(w)).sum();
    let value = loss.value().item();
    let grads = g.backward(loss);
    (value, vars.iter().map(|&v| grads.get_or_zeros(v)).collect())
}

fn check<F>(name: &str, inputs: Vec<Tensor<f64>>, build: F)
where
    F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Var<'g, f64>,
{
    let mut weights = None;
    let (_, analytic) = loss_value(&inputs, &mut weights, 7, &build);
    let mut rng = StdRng::seed_from_u64(11);
    for (which, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let picks: Vec<usize> = if n <= 48 { (0..n).collect() } else { (0..48).map(|_| rng.random_range(0..n)).collect() };
        for i in picks {
            let mut plus = inputs.clone();
            plus[which].data_mut()[i] += H;
            let mut minus = inputs.clone();
            minus[which].data_mut()[i] -= H;
            let fp = loss_value(&plus, &mut weights, 7, &build).0;
            let fm = loss_value(&minus, &mut weights, 7, &build).0;
            let numeric = (fp - fm) / (2.0 * H);
            let a = analytic[which].data()[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
            assert!(err < 1e-4, "{name}: input {which} elem {i}: analytic {a} numeric {numeric}");
        }
    }
}

fn rng() -> StdRng {
    StdRng::seed_from_u64(3)
}

#[test]
fn binary_arithmetic() {
    let mut r = rng();
    let a = rand_tensor(&mut r, &[2, 3, 4, 4], -1.0, 1.0);
    let b = rand_tensor(&mut r, &[2, 3, 4, 4], 0.5, 2.0);
    check("add", vec![a.clone(), b.clone()], |_, v| v[0].add(v[1]));
    check("sub", vec![a.clone(), b.clone()], |_, v| v[0].sub(v[1]));
    check("mul", vec![a.clone(), b.clone()], |_, v| v[0].mul(v[1]));
    check("div", vec![a.clone(), b.clone()], |_, v| v[0].div(v[1]));
    check("affine", vec![a], |_, v| v[0].neg().scale(1.7).add_scalar(0.3));
}

#[test]
fn unary_maths() {
    let mut r = rng();
    let x = rand_tensor(&mut r, &[2, 2, 3, 3], -2.0, 2.0);
    let pos = rand_tensor(&mut r, &[2, 2, 3, 3], 0.2, 3.0);
    check("square", vec![x.clone()], |_, v| v[0].square());
    check("abs", vec![x.clone()], |_, v| v[0].abs());
    check("exp", vec![x.clone()], |_, v| v[0].exp());
    check("ln", vec![pos.clone()], |_, v| v[0].ln());
    check("sqrt", vec![pos], |_, v| v[0].sqrt());
    check("tanh", vec![x], |_, v| v[0].tanh());
}

#[test]
fn activations() {
    let mut r = rng();
    let x = rand_tensor(&mut r, &[3, 2, 4, 4], -4.0, 4.0);
    check("relu", vec![x.clone()], |_, v| v[0].relu());
    check("sigmoid", vec![x.clone()], |_, v| v[0].sigmoid());
    check("softplus", vec![x.clone()], |_, v| v[0].softplus());
    check("gelu", vec![x.clone()], |_, v| v[0].gelu());
    check("hardswish", vec![x.clone()], |_, v| v[0].hardswish());
    check("hardsigmoid", vec![x.clone()], |_, v| v[0].hardsigmoid());
    check("smooth_l1", vec![x.clone()], |_, v| v[0].smooth_l1());
    check("clamp", vec![x], |_, v| v[0].clamp(-1.0, 1.5));
}

#[test]
fn masked_merge_routes_gradients() {
    let mut r = rng();
    let a = rand_tensor(&mut r, &[2, 3, 4, 5], -1.0, 1.0);
    let b = rand_tensor(&mut r, &[2, 3, 4, 5], -1.0, 1.0);
    let mask = PixelMask::new(4, 5, (0..20).map(|i| i % 3 == 0).collect());
    check("masked_merge", vec![a, b], move |_, v| v[0].masked_merge(v[1], &mask));
}

#[test]
fn reductions_and_channel_ops() {
    let mut r = rng();
    let x = rand_tensor(&mut r, &[2, 3, 4, 4], -1.0, 1.0);
    let c = rand_tensor(&mut r, &[3], -1.0, 1.0);
    let nc = rand_tensor(&mut r, &[2, 3], -1.0, 1.0);
    check("sum", vec![x.clone()], |_, v| v[0].sum());
    check("mean", vec![x.clone()], |_, v| v[0].mean());
    check("mean_spatial", vec![x.clone()], |_, v| v[0].mean_spatial());
    check("add_channel", vec![x.clone(), c.clone()], |_, v| v[0].add_channel(v[1]));
    check("mul_channel", vec![x.clone(), c.clone()], |_, v| v[0].mul_channel(v[1]));
    check("mul_nc", vec![x.clone(), nc.clone()], |_, v| v[0].mul_nc(v[1]));
    check("add_channel_rank2", vec![nc.clone(), c], |_, v| v[0].add_channel(v[1]));
    let w = rand_tensor(&mut r, &[5, 3], -1.0, 1.0);
    check("matmul_t", vec![nc, w], |_, v| v[0].matmul_t(v[1]));
}

#[test]
fn convolutions() {
    let mut r = rng();
    let x = rand_tensor(&mut r, &[2, 3, 6, 6], -1.0, 1.0);
    let w3 = rand_tensor(&mut r, &[4, 3, 3, 3], -0.5, 0.5);
    let w1 = rand_tensor(&mut r, &[4, 3, 1, 1], -0.5, 0.5);
    let w2 = rand_tensor(&mut r, &[4, 3, 2, 2], -0.5, 0.5);
    check("conv3x3", vec![x.clone(), w3.clone()], |_, v| v[0].conv2d(v[1], 1, 1));
    check("conv3x3_s2", vec![x.clone(), w3], |_, v| v[0].conv2d(v[1], 2, 1));
    check("conv1x1", vec![x.clone(), w1], |_, v| v[0].conv2d(v[1], 1, 0));
    check("conv2x2_s2", vec![x.clone(), w2], |_, v| v[0].conv2d(v[1], 2, 0));
    let dw = rand_tensor(&mut r, &[3, 1, 7, 7], -0.5, 0.5);
    check("depthwise7", vec![x.clone(), dw], |_, v| v[0].depthwise_conv2d(v[1], 1, 3));
    let dw3 = rand_tensor(&mut r, &[3, 1, 3, 3], -0.5, 0.5);
    check("depthwise3_s2", vec![x, dw3], |_, v| v[0].depthwise_conv2d(v[1], 2, 1));
}

#[test]
fn normalizations() {
    let mut r = rng();
    let x = rand_tensor(&mut r, &[2, 4, 3, 3], -1.0, 1.0);
    let gamma = rand_tensor(&mut r, &[4], 0.5, 1.5);
    let beta = rand_tensor(&mut r, &[4], -0.5, 0.5);
    check("group_norm", vec![x.clone(), gamma.clone(), beta.clone()], |_, v| v[0].group_norm(2, v[1], v[2], 1e-5));
    check("layer_norm", vec![x.clone(), gamma.clone(), beta.clone()], |_, v| {
        v[0].layer_norm_channels(v[1], v[2], 1e-6)
    });
    check("grn", vec![x, gamma, beta], |_, v| v[0].grn(v[1], v[2], 1e-6));
}

#[test]
fn shape_ops() {
    let mut r = rng();
    let a = rand_tensor(&mut r, &[2, 2, 4, 4], -1.0, 1.0);
    let b = rand_tensor(&mut r, &[1, 2, 4, 4], -1.0, 1.0);
    let c = rand_tensor(&mut r, &[2, 3, 4, 4], -1.0, 1.0);
    check("cat_batch", vec![a.clone(), b], |g, v| g.cat_batch(&[v[0], v[1]]));
    check("concat_channels", vec![a.clone(), c], |_, v| v[0].concat_channels(v[1]));
    check("slice_batch", vec![a.clone()], |_, v| v[0].slice_batch(1, 1));
    check("flatten", vec![a.clone()], |_, v| v[0].flatten());
    check("upsample", vec![a.clone()], |_, v| v[0].upsample_nearest(2));
    check("avg_pool", vec![a.clone()], |_, v| v[0].avg_pool(2));
    let d = rand_tensor(&mut r, &[2, 8, 2, 3], -1.0, 1.0);
    check("depth_to_space", vec![d], |_, v| v[0].depth_to_space(2));
    let src: Vec<usize> = (0..16).map(|i| (i * 5 + 3) % 16).collect();
    let src = Rc::new(src);
    check("permute_pixels", vec![a.clone()], move |_, v| v[0].permute_pixels(src.clone()));
    let many: Rc<Vec<usize>> = Rc::new((0..16).map(|i| i / 2).collect());
    check("gather_repeated", vec![a], move |_, v| v[0].permute_pixels(many.clone()));
}

#[test]
fn composite_block() {
    let mut r = rng();
    let x = rand_tensor(&mut r, &[2, 4, 4, 4], -1.0, 1.0);
    let dw = rand_tensor(&mut r, &[4, 1, 3, 3], -0.5, 0.5);
    let pw = rand_tensor(&mut r, &[8, 4, 1, 1], -0.5, 0.5);
    let g = rand_tensor(&mut r, &[8], 0.5, 1.5);
    check("block", vec![x, dw, pw, g], |graph, v| {
        let gamma = graph.constant(Tensor::ones(&[4]));
        let beta = graph.constant(Tensor::zeros(&[4]));
        let y = v[0].depthwise_conv2d(v[1], 1, 1).layer_norm_channels(gamma, beta, 1e-6);
        let y = y.conv2d(v[2], 1, 0).gelu();
        let zero = graph.constant(Tensor::zeros(&[8]));
        y.grn(v[3], zero, 1e-6).mean_spatial().sigmoid()
    });
}

#[test]
fn constants_receive_no_gradient_and_detach_blocks_flow() {
    let g = Graph::<f64>::new();
    let x = g.leaf(Tensor::new(&[1, 1, 1, 2], vec![1.0, 2.0]));
    let c = g.constant(Tensor::new(&[1, 1, 1, 2], vec![3.0, 4.0]));
    let y = x.mul(c).add(x.detach().square()).sum();
    let grads = g.backward(y);
    assert_eq!(grads.get(x).unwrap().data(), &[3.0, 4.0]);
    assert!(grads.get(c).is_none());
}
