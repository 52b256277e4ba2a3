use super::*;
use crate::rng;

fn t(data: &[f64], shape: &[usize]) -> Tensor<f64> {
    Tensor::from_vec(data.to_vec(), shape).unwrap()
}

fn p(data: &[f64], shape: &[usize]) -> Tensor<f64> {
    Tensor::parameter(data.to_vec(), shape).unwrap()
}

#[test]
fn relu_clips_negatives() {
    assert_eq!(t(&[-1.0, 0.0, 2.0], &[3]).relu().to_vec(), vec![0.0, 0.0, 2.0]);
}

#[test]
fn softmax_of_equal_logits_is_uniform() {
    let y = t(&[0.0, 0.0], &[2]).softmax(0).unwrap();
    assert_eq!(y.to_vec(), vec![0.5, 0.5]);
}

#[test]
fn conv_of_ones_sums_window() {
    let x = Tensor::<f32>::ones(&[1, 1, 3, 3]);
    let w = Tensor::<f32>::ones(&[1, 1, 2, 2]);
    let y = x.conv2d(&w, None, Conv2dSpec::new(1, 0)).unwrap();
    assert_eq!(y.shape(), &[1, 1, 2, 2]);
    assert_eq!(y.to_vec(), vec![4.0; 4]);
}

#[test]
fn conv_padding_and_stride_match_direct_sum() {
    // 1 input channel, 4x4 ramp, 3x3 kernel of ones, pad 1, stride 2.
    let xs: Vec<f64> = (0..16).map(f64::from).collect();
    let x = t(&xs, &[1, 1, 4, 4]);
    let w = t(&[1.0; 9], &[1, 1, 3, 3]);
    let y = x.conv2d(&w, None, Conv2dSpec::new(2, 1)).unwrap();
    assert_eq!(y.shape(), &[1, 1, 2, 2]);
    let mut expected = vec![];
    for oy in 0..2i64 {
        for ox in 0..2i64 {
            let mut s = 0.0;
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (iy, ix) = (oy * 2 + dy, ox * 2 + dx);
                    if (0..4).contains(&iy) && (0..4).contains(&ix) {
                        s += xs[(iy * 4 + ix) as usize];
                    }
                }
            }
            expected.push(s);
        }
    }
    assert_eq!(y.to_vec(), expected);
}

#[test]
fn conv_rejects_channel_mismatch() {
    let x = Tensor::<f32>::ones(&[1, 2, 4, 4]);
    let w = Tensor::<f32>::ones(&[1, 3, 3, 3]);
    let err = x.conv2d(&w, None, Conv2dSpec::default()).unwrap_err();
    assert!(matches!(err, crate::Error::Shape { op: "conv2d", .. }), "{err}");
}

#[test]
fn binary_ops_reject_shape_mismatch() {
    let a = t(&[1.0, 2.0], &[2]);
    let b = t(&[1.0, 2.0, 3.0], &[3]);
    assert!(a.add(&b).is_err());
    assert!(a.mul(&b).is_err());
    assert!(t(&[1.0; 6], &[2, 3]).matmul(&t(&[1.0; 6], &[2, 3])).is_err());
}

#[test]
fn backward_of_sum_is_ones() {
    let x = p(&[1.0, 2.0, 3.0], &[3]);
    x.sum().backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![1.0, 1.0, 1.0]);
}

#[test]
fn backward_of_square_is_twice_x() {
    let x = p(&[1.0, 2.0], &[2]);
    x.mul(&x).unwrap().sum().backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![2.0, 4.0]);
}

#[test]
fn repeated_backward_accumulates() {
    let x = p(&[1.0, 2.0], &[2]);
    for _ in 0..3 {
        x.mul(&x).unwrap().sum().backward().unwrap();
    }
    assert_eq!(x.grad().unwrap(), vec![6.0, 12.0]);
    x.zero_grad();
    assert_eq!(x.grad().unwrap(), vec![0.0, 0.0]);
}

#[test]
fn backward_rejects_non_scalar() {
    let x = p(&[1.0, 2.0], &[2]);
    let err = x.scale(2.0).backward().unwrap_err();
    assert!(matches!(err, crate::Error::Argument(_)));
}

#[test]
fn backward_rejects_disconnected_loss() {
    let x = t(&[1.0, 2.0], &[2]);
    assert!(x.sum().backward().is_err());
}

#[test]
fn no_grad_skips_recording() {
    let x = p(&[1.0, 2.0], &[2]);
    let y = no_grad(|| x.scale(3.0));
    assert!(!y.requires_grad());
    assert!(grad_enabled());
    assert!(x.scale(3.0).requires_grad());
}

#[test]
fn shared_subexpression_gets_both_paths() {
    // y = a * a + a, dy/da = 2a + 1
    let a = p(&[3.0], &[1]);
    let y = a.mul(&a).unwrap().add(&a).unwrap().sum();
    y.backward().unwrap();
    assert_eq!(a.grad().unwrap(), vec![7.0]);
}

#[test]
fn detach_blocks_gradient() {
    let a = p(&[2.0], &[1]);
    let y = a.mul(&a.detach()).unwrap().sum();
    y.backward().unwrap();
    assert_eq!(a.grad().unwrap(), vec![2.0]);
}

#[test]
fn softmax_rows_are_distributions() {
    let mut r = rng::seeded(3, 0);
    use rand::Rng;
    let data: Vec<f32> = (0..2 * 5 * 4 * 4).map(|_| r.random_range(-8.0..8.0)).collect();
    let y = Tensor::from_vec(data, &[2, 5, 4, 4]).unwrap().softmax(1).unwrap();
    let v = y.to_vec();
    for n in 0..2 {
        for i in 0..16 {
            let s: f32 = (0..5).map(|c| v[(n * 5 + c) * 16 + i]).sum();
            assert!((s - 1.0).abs() < 1e-6);
            assert!((0..5).all(|c| v[(n * 5 + c) * 16 + i] > 0.0));
        }
    }
}

#[test]
fn dropout_inference_is_identity() {
    let x = t(&[1.0, -2.0, 3.0], &[3]);
    let mut r = rng::seeded(1, rng::stream::DROPOUT);
    assert_eq!(x.dropout(0.5, false, &mut r).unwrap().to_vec(), x.to_vec());
}

#[test]
fn dropout_keeps_expected_fraction_and_rescales() {
    let x = Tensor::<f64>::ones(&[200_000]);
    let mut r = rng::seeded(9, rng::stream::DROPOUT);
    let y = x.dropout(0.25, true, &mut r).unwrap().to_vec();
    let kept = y.iter().filter(|&&v| v != 0.0).count() as f64 / y.len() as f64;
    assert!((kept - 0.75).abs() < 0.005, "kept fraction {kept}");
    assert!(y.iter().all(|&v| v == 0.0 || (v - 1.0 / 0.75).abs() < 1e-12));
}

#[test]
fn dropout_rejects_bad_rate() {
    let x = t(&[1.0], &[1]);
    let mut r = rng::seeded(1, 0);
    assert!(x.dropout(1.0, true, &mut r).is_err());
    assert!(x.dropout(-0.1, true, &mut r).is_err());
    assert!(x.dropout(f64::NAN, true, &mut r).is_err());
}

#[test]
fn upsample_repeats_pixels() {
    let x = t(&[1.0, 2.0, 3.0, 4.0], &[1, 1, 2, 2]);
    let y = x.upsample_nearest(2).unwrap();
    assert_eq!(
        y.to_vec(),
        vec![1., 1., 2., 2., 1., 1., 2., 2., 3., 3., 4., 4., 3., 3., 4., 4.]
    );
}

#[test]
fn concat_along_channels() {
    let a = t(&[1.0, 2.0], &[1, 1, 1, 2]);
    let b = t(&[3.0, 4.0, 5.0, 6.0], &[1, 2, 1, 2]);
    let y = Tensor::concat(&[&a, &b], 1).unwrap();
    assert_eq!(y.shape(), &[1, 3, 1, 2]);
    assert_eq!(y.to_vec(), vec![1., 2., 3., 4., 5., 6.]);
}

#[test]
fn identical_seeds_give_identical_results() {
    let run = || {
        let mut r = rng::seeded(42, rng::stream::DROPOUT);
        let x = Tensor::<f32>::full(&[1, 2, 8, 8], 0.7);
        let w = Tensor::<f32>::full(&[3, 2, 3, 3], 0.1);
        x.dropout(0.1, true, &mut r)
            .unwrap()
            .conv2d(&w, None, Conv2dSpec::new(1, 1))
            .unwrap()
            .softmax(1)
            .unwrap()
            .to_vec()
    };
    let (a, b) = (run(), run());
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
}
