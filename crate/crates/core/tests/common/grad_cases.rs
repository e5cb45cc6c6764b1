//! One finite-difference case per differentiable primitive.

use ofa_core::autograd::{BnInput, Tape, Target, Var};
use ofa_core::elastic::transform_kernel_var;
use ofa_core::error::Result;
use ofa_core::layers::squeeze_excitation;
use ofa_core::tensor::Tensor;
use rand::Rng;

use super::{away_from, gradcheck, randn, rng, FdReport};

pub struct GradCase {
    pub name: &'static str,
    pub run: Box<dyn Fn() -> Result<FdReport>>,
}

fn case<F>(name: &'static str, inputs: Vec<Tensor>, train: bool, f: F) -> GradCase
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var> + 'static,
{
    let seed = name.bytes().map(u64::from).sum();
    GradCase {
        name,
        run: Box::new(move || gradcheck(&inputs, train, seed, &f)),
    }
}

fn bn(gamma: Var, beta: Var, c: usize, mean: Vec<f32>, var: Vec<f32>) -> BnInput {
    assert_eq!(mean.len(), c);
    BnInput {
        gamma,
        beta,
        running_mean: mean,
        running_var: var,
        target: None,
    }
}

/// Distinct values spaced at least `gap` apart, shuffled.
fn distinct(shape: &[usize], gap: f32, r: &mut impl Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let mut v: Vec<f32> = (0..n).map(|i| (i as f32 - n as f32 / 2.0) * gap).collect();
    for i in (1..n).rev() {
        v.swap(i, r.gen_range(0..=i));
    }
    Tensor::new(shape.to_vec(), v).unwrap()
}

pub fn all() -> Vec<GradCase> {
    let mut g = rng(1000);
    let mut cases = Vec::new();
    for &(c_in, c_out, k, stride, groups, name) in &[
        (3, 4, 3, 1, 1, "conv2d 3x3 dense"),
        (3, 4, 3, 2, 1, "conv2d 3x3 dense stride 2"),
        (4, 6, 1, 1, 1, "conv2d 1x1 pointwise"),
        (4, 4, 5, 2, 2, "conv2d 5x5 grouped stride 2"),
        (4, 4, 3, 1, 4, "conv2d 3x3 depthwise"),
        (3, 3, 7, 2, 3, "conv2d 7x7 depthwise stride 2"),
    ] {
        let x = randn(&[2, c_in, 6, 6], &mut g);
        let w = randn(&[c_out, c_in / groups, k, k], &mut g);
        cases.push(case(name, vec![x, w], false, move |t, v| {
            t.conv2d(v[0], v[1], stride, (k - 1) / 2, groups)
        }));
    }
    cases.push(case(
        "lin_comb",
        vec![randn(&[2, 3], &mut g), randn(&[2, 3], &mut g)],
        false,
        |t, v| t.lin_comb(&[(v[0], 0.7), (v[1], -1.3)]),
    ));
    cases.push(case("add_const", vec![randn(&[5], &mut g)], false, |t, v| {
        Ok(t.add_const(v[0], 2.5))
    }));
    cases.push(case(
        "mul",
        vec![randn(&[2, 4], &mut g), randn(&[2, 4], &mut g)],
        false,
        |t, v| t.mul(v[0], v[1]),
    ));
    let c: Vec<f32> = (0..6).map(|i| i as f32 * 0.5 - 1.0).collect();
    cases.push(case("mul_const", vec![randn(&[2, 3], &mut g)], false, move |t, v| {
        t.mul_const(v[0], c.clone())
    }));
    cases.push(case(
        "channel_gate",
        vec![randn(&[2, 3, 2, 2], &mut g), randn(&[2, 3], &mut g)],
        false,
        |t, v| t.channel_gate(v[0], v[1]),
    ));
    cases.push(case("relu", vec![away_from(&[3, 5], &[0.0], 0.01, &mut g)], false, |t, v| {
        Ok(t.relu(v[0]))
    }));
    cases.push(case(
        "hswish",
        vec![away_from(&[4, 5], &[-3.0, 3.0], 0.01, &mut g)],
        false,
        |t, v| Ok(t.hswish(v[0])),
    ));
    cases.push(case(
        "hsigmoid",
        vec![away_from(&[4, 5], &[-3.0, 3.0], 0.01, &mut g)],
        false,
        |t, v| Ok(t.hsigmoid(v[0])),
    ));
    cases.push(case(
        "batch_norm train",
        vec![randn(&[3, 2, 3, 3], &mut g), randn(&[2], &mut g), randn(&[2], &mut g)],
        true,
        |t, v| t.batch_norm(v[0], bn(v[1], v[2], 2, vec![0.0; 2], vec![1.0; 2])),
    ));
    cases.push(case(
        "batch_norm inference",
        vec![randn(&[2, 3, 2, 2], &mut g), randn(&[3], &mut g), randn(&[3], &mut g)],
        false,
        |t, v| t.batch_norm(v[0], bn(v[1], v[2], 3, vec![0.1, -0.2, 0.3], vec![0.5, 1.5, 2.0])),
    ));
    cases.push(case("global_avg_pool", vec![randn(&[2, 3, 3, 3], &mut g)], false, |t, v| {
        t.global_avg_pool(v[0])
    }));
    cases.push(case("max_pool2", vec![distinct(&[2, 2, 5, 5], 0.05, &mut g)], false, |t, v| {
        t.max_pool2(v[0])
    }));
    cases.push(case(
        "linear with bias",
        vec![randn(&[3, 5], &mut g), randn(&[4, 5], &mut g), randn(&[4], &mut g)],
        false,
        |t, v| t.linear(v[0], v[1], Some(v[2])),
    ));
    cases.push(case(
        "linear without bias",
        vec![randn(&[3, 5], &mut g), randn(&[2, 5], &mut g)],
        false,
        |t, v| t.linear(v[0], v[1], None),
    ));
    cases.push(case("gather", vec![randn(&[2, 5, 3], &mut g)], false, |t, v| {
        t.gather(v[0], 1, &[4, 0, 2])
    }));
    cases.push(case("center_crop", vec![randn(&[2, 7, 7], &mut g)], false, |t, v| {
        t.center_crop(v[0], 3)
    }));
    cases.push(case("reshape", vec![randn(&[2, 6], &mut g)], false, |t, v| {
        t.reshape(v[0], &[3, 4])
    }));
    cases.push(case("sum_all", vec![randn(&[3, 4], &mut g)], false, |t, v| Ok(t.sum_all(v[0]))));
    cases.push(case("cross_entropy labels", vec![randn(&[3, 4], &mut g)], false, |t, v| {
        t.cross_entropy(v[0], Target::Labels(&[0, 3, 1]))
    }));
    let soft = vec![0.1, 0.2, 0.3, 0.4, 0.25, 0.25, 0.25, 0.25];
    cases.push(case("cross_entropy soft", vec![randn(&[2, 4], &mut g)], false, move |t, v| {
        t.cross_entropy(v[0], Target::Soft(&soft))
    }));
    // weights drawn large enough that the hard-sigmoid gate is rarely saturated
    cases.push(case(
        "squeeze_excitation",
        vec![
            randn(&[2, 4, 3, 3], &mut g),
            Tensor::randn(&[8, 4], 0.5, &mut g),
            Tensor::randn(&[8], 0.5, &mut g),
            Tensor::randn(&[4, 8], 0.5, &mut g),
            Tensor::randn(&[4], 0.5, &mut g),
        ],
        false,
        |t, v| squeeze_excitation(t, v[0], (v[1], v[2]), (v[3], v[4])),
    ));
    for target in [5usize, 3] {
        let name = if target == 5 { "kernel transform 7->5" } else { "kernel transform 7->5->3" };
        cases.push(case(
            name,
            vec![
                randn(&[2, 1, 7, 7], &mut g),
                Tensor::randn(&[25, 25], 0.3, &mut g),
                Tensor::randn(&[9, 9], 0.3, &mut g),
            ],
            false,
            move |t, v| transform_kernel_var(t, v[0], v[1], v[2], target),
        ));
    }
    cases
}
