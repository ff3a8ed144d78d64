//! Forward-path contracts: known products, shape errors, invariances.

use latentsr_tensor::{no_grad, Tensor, TensorError};

#[test]
fn matmul_identity_padded_product() {
    // [[1,0,0],[0,1,0]] @ [[1,0],[0,1],[0,0]] = I2
    let a = Tensor::from_vec(vec![1.0f32, 0.0, 0.0, 0.0, 1.0, 0.0], &[2, 3]).unwrap();
    let b = Tensor::from_vec(vec![1.0f32, 0.0, 0.0, 1.0, 0.0, 0.0], &[3, 2]).unwrap();
    let c = a.matmul(&b).unwrap();
    assert_eq!(c.shape(), &[2, 2]);
    assert_eq!(c.to_vec(), vec![1.0, 0.0, 0.0, 1.0]);
}

#[test]
fn conv2d_constant_image_averaging_kernel() {
    // Constant input through an averaging kernel stays constant away
    // from the zero-padded border.
    let x = Tensor::full(&[1, 1, 6, 6], 0.8f32);
    let w = Tensor::full(&[1, 1, 3, 3], 1.0 / 9.0f32);
    let y = x.conv2d(&w, 1, 1).unwrap();
    assert_eq!(y.shape(), &[1, 1, 6, 6]);
    for iy in 1..5 {
        for ix in 1..5 {
            let v = y.data()[iy * 6 + ix];
            assert!((v - 0.8).abs() < 1e-6, "interior ({iy},{ix}) = {v}");
        }
    }
}

#[test]
fn shape_mismatch_errors_name_op_and_shapes() {
    let a = Tensor::<f32>::zeros(&[2, 3]);
    let b = Tensor::<f32>::zeros(&[3, 2]);
    match a.add(&b) {
        Err(TensorError::ShapeMismatch { op, lhs, rhs }) => {
            assert_eq!(op, "add");
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![3, 2]);
        }
        other => panic!("expected ShapeMismatch, got {other:?}"),
    }
    let msg = a.add(&b).unwrap_err().to_string();
    assert!(msg.contains("add") && msg.contains("[2, 3]") && msg.contains("[3, 2]"));
}

#[test]
fn from_vec_rejects_inconsistent_shape() {
    assert!(Tensor::from_vec(vec![0.0f32; 5], &[2, 3]).is_err());
}

#[test]
fn softmax_rows_sum_to_one() {
    let x = Tensor::from_vec(vec![0.1f32, 2.0, -1.0, 3.0, 0.0, 0.5], &[2, 3]).unwrap();
    let y = x.softmax_last().unwrap();
    for r in 0..2 {
        let s: f32 = y.data()[r * 3..(r + 1) * 3].iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
    }
}

#[test]
fn upsample_nearest_replicates_blocks() {
    let x = Tensor::from_vec(vec![1.0f32, 2.0, 3.0, 4.0], &[1, 1, 2, 2]).unwrap();
    let y = x.upsample_nearest_2x().unwrap();
    assert_eq!(
        y.to_vec(),
        vec![1., 1., 2., 2., 1., 1., 2., 2., 3., 3., 4., 4., 3., 3., 4., 4.]
    );
}

#[test]
fn token_layout_round_trips() {
    let x = Tensor::from_vec((0..24).map(|v| v as f32).collect(), &[2, 3, 2, 2]).unwrap();
    let t = x.nchw_to_tokens().unwrap();
    assert_eq!(t.shape(), &[2, 4, 3]);
    let back = t.tokens_to_nchw(2, 2).unwrap();
    assert_eq!(back.to_vec(), x.to_vec());
}

#[test]
fn no_grad_suppresses_recording() {
    let x = Tensor::<f32>::var(vec![1.0; 4], &[4]).unwrap();
    let y = no_grad(|| x.silu().unwrap());
    assert!(!y.tracked());
    let z = x.silu().unwrap();
    assert!(z.tracked());
}

#[test]
fn group_norm_rejects_indivisible_groups() {
    let x = Tensor::<f32>::zeros(&[1, 3, 2, 2]);
    let g = Tensor::<f32>::ones(&[3]);
    let b = Tensor::<f32>::zeros(&[3]);
    assert!(x.group_norm(&g, &b, 2, 1e-5).is_err());
}
