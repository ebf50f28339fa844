//! Reverse-mode gradients against central finite differences (h = 1e-3,
//! f64) for every differentiable tape operation.

mod common;

use common::{away_from_zero, distinct, grad_rel_errors, project};
use xdseg::tensor::{NormGroups, Tensor};

const H: f64 = 1e-3;
const TOL: f64 = 1e-3;

fn rand(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::uniform(shape.to_vec(), -1.0, 1.0, seed)
}

fn assert_close(name: &str, errs: &[f64]) {
    for (i, e) in errs.iter().enumerate() {
        assert!(*e < TOL, "{name}: input {i} relative error {e:e}");
    }
}

#[test]
fn conv2d_same_padding() {
    let inputs = [rand(&[2, 3, 6, 5], 1), rand(&[4, 3, 3, 3], 2), rand(&[4], 3)];
    let errs = grad_rel_errors(&inputs, H, |t, v| {
        let y = t.conv2d(v[0], v[1], Some(v[2]), 1, 1).unwrap();
        project(t, y, 9)
    });
    assert_close("conv2d", &errs);
}

#[test]
fn conv2d_strided_and_pointwise() {
    let inputs = [rand(&[2, 2, 7, 7], 4), rand(&[3, 2, 3, 3], 5), rand(&[3], 6)];
    let errs = grad_rel_errors(&inputs, H, |t, v| {
        let y = t.conv2d(v[0], v[1], Some(v[2]), 2, 1).unwrap();
        project(t, y, 10)
    });
    assert_close("conv2d stride 2", &errs);

    let inputs = [rand(&[2, 3, 4, 4], 7), rand(&[2, 3, 1, 1], 8)];
    let errs = grad_rel_errors(&inputs, H, |t, v| {
        let y = t.conv2d(v[0], v[1], None, 1, 0).unwrap();
        project(t, y, 11)
    });
    assert_close("conv2d 1x1", &errs);
}

#[test]
fn batch_norm_train_mode() {
    let inputs = [rand(&[4, 4, 8, 8], 12)];
    let errs = grad_rel_errors(&inputs, H, |t, v| {
        let (y, _) = t.normalize(v[0], NormGroups::PerChannel, 1e-5, None).unwrap();
        project(t, y, 13)
    });
    assert_close("batch norm", &errs);
}

#[test]
fn instance_norm() {
    let inputs = [rand(&[3, 2, 5, 4], 14)];
    let errs = grad_rel_errors(&inputs, H, |t, v| {
        let (y, _) = t.normalize(v[0], NormGroups::PerSampleChannel, 1e-5, None).unwrap();
        project(t, y, 15)
    });
    assert_close("instance norm", &errs);
}

#[test]
fn norm_with_fixed_statistics() {
    let inputs = [rand(&[2, 3, 3, 3], 16)];
    let errs = grad_rel_errors(&inputs, H, |t, v| {
        let (y, _) = t
            .normalize(v[0], NormGroups::PerChannel, 1e-5, Some((&[0.1, -0.2, 0.3], &[0.5, 1.5, 2.0])))
            .unwrap();
        project(t, y, 17)
    });
    assert_close("fixed-stat norm", &errs);
}

#[test]
fn prelu_input_and_slope() {
    let inputs = [away_from_zero(&[2, 3, 4, 4], 0.01, 18), rand(&[3], 19)];
    let errs = grad_rel_errors(&inputs, H, |t, v| {
        let y = t.prelu(v[0], v[1]).unwrap();
        project(t, y, 20)
    });
    assert_close("prelu", &errs);
}

#[test]
fn resampling() {
    let inputs = [distinct(&[4, 4, 8, 8], 21)];
    let errs = grad_rel_errors(&inputs, H, |t, v| {
        let y = t.downsample2(v[0]).unwrap();
        project(t, y, 22)
    });
    assert_close("max pool", &errs);

    let inputs = [rand(&[2, 3, 3, 2], 23)];
    let errs = grad_rel_errors(&inputs, H, |t, v| {
        let y = t.upsample2(v[0]).unwrap();
        project(t, y, 24)
    });
    assert_close("upsample", &errs);
}

#[test]
fn softmax_and_cross_entropy() {
    let inputs = [rand(&[2, 3, 4, 4], 25)];
    let errs = grad_rel_errors(&inputs, H, |t, v| {
        let y = t.softmax_channels(v[0]).unwrap();
        project(t, y, 26)
    });
    assert_close("softmax", &errs);

    let mut labels = Tensor::<f64>::zeros(vec![2, 3, 4, 4]);
    for s in 0..2 {
        for p in 0..16 {
            let c = (p * 7 + s) % 3;
            labels.data_mut()[(s * 3 + c) * 16 + p] = 1.0;
        }
    }
    let inputs = [rand(&[2, 3, 4, 4], 27).cast::<f64>()];
    let errs = grad_rel_errors(&inputs, H, |t, v| {
        t.softmax_cross_entropy(v[0], &labels, Some(&[1.0, 0.5])).unwrap()
    });
    assert_close("softmax cross-entropy", &errs);
}

#[test]
fn discriminator_head_ops() {
    let inputs = [rand(&[3, 4, 4, 4], 28)];
    let errs = grad_rel_errors(&inputs, H, |t, v| {
        let g = t.global_avg_pool(v[0]).unwrap();
        let s = t.sigmoid(g).unwrap();
        project(t, s, 29)
    });
    assert_close("global avg + sigmoid", &errs);
}

#[test]
fn channel_plumbing() {
    let inputs = [rand(&[2, 1, 3, 3], 30), rand(&[2, 2, 3, 3], 31)];
    let errs = grad_rel_errors(&inputs, H, |t, v| {
        let c = t.concat_channels(v[0], v[1]).unwrap();
        let s = t.slice_channels(c, 1, 2).unwrap();
        let m = t.mul(s, s).unwrap();
        project(t, m, 32)
    });
    assert_close("concat/slice", &errs);
}

#[test]
fn elementwise_with_broadcasts() {
    for (bshape, seed) in [(vec![2, 3, 2, 2], 40u64), (vec![1], 41), (vec![3], 42), (vec![2, 3], 43)] {
        let a = rand(&[2, 3, 2, 2], seed);
        let mut b = rand(&bshape, seed + 100);
        for x in b.data_mut() {
            *x = 1.0 + x.abs(); // keep divisors away from zero
        }
        let inputs = [a, b];
        for op in 0..4 {
            let errs = grad_rel_errors(&inputs, H, |t, v| {
                let y = match op {
                    0 => t.add(v[0], v[1]),
                    1 => t.sub(v[0], v[1]),
                    2 => t.mul(v[0], v[1]),
                    _ => t.div(v[0], v[1]),
                }
                .unwrap();
                project(t, y, 44)
            });
            assert_close(&format!("binary op {op} with b {bshape:?}"), &errs);
        }
    }
}

#[test]
fn composed_normalization_primitives() {
    let inputs = [rand(&[3, 2, 3, 3], 50)];
    let errs = grad_rel_errors(&inputs, H, |t, v| {
        let (m, var) = t.reduce_stats(v[0], &[0, 2, 3]).unwrap();
        let c = t.sub(v[0], m).unwrap();
        let ve = t.add_scalar(var, 1e-5).unwrap();
        let sd = t.sqrt(ve).unwrap();
        let y = t.div(c, sd).unwrap();
        let y = t.mul_scalar(y, 0.7).unwrap();
        let p = project(t, y, 51);
        let mean = t.mean(v[0]).unwrap();
        t.add(p, mean).unwrap()
    });
    assert_close("composed normalization", &errs);
}
