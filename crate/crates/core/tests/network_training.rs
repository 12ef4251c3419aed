use strokeseg_core::autograd::Tape;
use strokeseg_core::loss::{combined_loss, LossConfig};
use strokeseg_core::network::{UNet3d, UNetConfig};
use strokeseg_core::optim::{adam_step, AdamState, OptimConfig};
use strokeseg_core::Tensor;

fn tiny() -> UNetConfig {
    UNetConfig {
        levels: 2,
        base_channels: 4,
        patch_size: 8,
        se_reduction: 2,
        ..UNetConfig::desk()
    }
}

/// A bright cube on a dark background, and its mask.
fn batch() -> (Tensor<f32>, Tensor<f32>) {
    let p = 8;
    let mut x = vec![0.1f32; 2 * p * p * p];
    let mut y = vec![0f32; x.len()];
    for b in 0..2 {
        for z in 2..5 + b {
            for yy in 3..6 {
                for xx in 1..5 {
                    let i = b * p * p * p + xx + p * (yy + p * z);
                    x[i] = 0.9;
                    y[i] = 1.0;
                }
            }
        }
    }
    let s = [2, 1, p, p, p];
    (
        Tensor::from_vec(&s, x).unwrap(),
        Tensor::from_vec(&s, y).unwrap(),
    )
}

#[test]
fn adam_fits_a_fixed_batch() {
    let mut model = UNet3d::<f32>::new(tiny(), 1).unwrap();
    let mut adam = AdamState::new(model.params().tensors());
    let opt = OptimConfig {
        lr0: 1e-2,
        lr_floor: 1e-3,
        ..OptimConfig::default()
    };
    let (x, y) = batch();
    let ones = y.data().iter().filter(|v| **v == 1.0).count() as u64;
    let loss_cfg = LossConfig {
        n0: y.len() as u64 - ones,
        n1: ones,
        ..LossConfig::default()
    };
    let mut losses = Vec::new();
    for it in 0..60 {
        let mut tape = Tape::new();
        let params = model.bind(&mut tape, true);
        let xv = tape.constant(x.clone());
        let yv = tape.constant(y.clone());
        let logits = model.forward(&mut tape, &params, xv).unwrap();
        let terms = combined_loss(&mut tape, logits, yv, &loss_cfg).unwrap();
        losses.push(terms.total_value(&tape));
        tape.backward(terms.total).unwrap();
        let grads: Vec<Vec<f32>> = params
            .iter()
            .map(|v| tape.grad(*v).unwrap().to_vec())
            .collect();
        let refs: Vec<&[f32]> = grads.iter().map(Vec::as_slice).collect();
        adam_step(model.params_mut().tensors_mut(), &refs, &mut adam, &opt, it).unwrap();
    }
    assert!(losses.iter().all(|l| l.is_finite()));
    assert!(
        losses[59] < 0.2 * losses[0],
        "{} -> {}",
        losses[0],
        losses[59]
    );
    assert_eq!(adam.step, 60);
}

#[test]
fn predict_matches_tape_forward_and_f64_agrees() {
    let model = UNet3d::<f32>::new(tiny(), 4).unwrap();
    let (x, _) = batch();
    let mut tape = Tape::new();
    let params = model.bind(&mut tape, false);
    let xv = tape.constant(x.clone());
    let out = model.forward(&mut tape, &params, xv).unwrap();
    let pred = model.predict(&x).unwrap();
    assert_eq!(tape.value(out).data(), pred.data());
    assert_eq!(pred.shape(), x.shape());

    let wide = model.cast::<f64>().predict(&x.cast::<f64>()).unwrap();
    let max = pred
        .data()
        .iter()
        .zip(wide.data())
        .map(|(a, b)| (*a as f64 - b).abs())
        .fold(0.0, f64::max);
    assert!(max < 1e-4, "{max}");
}

#[test]
fn same_seed_same_weights() {
    let a = UNet3d::<f32>::new(UNetConfig::desk(), 9).unwrap();
    let b = UNet3d::<f32>::new(UNetConfig::desk(), 9).unwrap();
    let c = UNet3d::<f32>::new(UNetConfig::desk(), 10).unwrap();
    assert_eq!(a.params().tensors(), b.params().tensors());
    assert_ne!(a.params().tensors(), c.params().tensors());
    assert_eq!(a.params().names(), b.params().names());
}
