//! Overlap-averaged sliding-window inference and voxel overlap metrics.

use alloc::{format, vec, vec::Vec};

use serde::{Deserialize, Serialize};

use crate::autograd::sigmoid;
use crate::error::{Error, Result};
use crate::network::UNet3d;
use crate::sampling::{grid_patches, pad_to, padded_dims, unpad, GridSpec};
use crate::tensor::Tensor;
use crate::volume::{linear_index, voxel_count, Dims, Mask, Volume};
use crate::Scalar;

/// Anything that maps a batch of `(N, 1, P, P, P)` patches to logits of the
/// same shape.
pub trait Segmenter {
    fn patch_size(&self) -> usize;
    fn logits(&self, batch: &Tensor<f32>) -> Result<Tensor<f32>>;
}

impl<T: Scalar> Segmenter for UNet3d<T> {
    fn patch_size(&self) -> usize {
        self.config().patch_size
    }

    fn logits(&self, batch: &Tensor<f32>) -> Result<Tensor<f32>> {
        Ok(self.predict(&batch.cast::<T>())?.cast())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityVolume {
    dims: Dims,
    data: Vec<f32>,
}

impl ProbabilityVolume {
    pub fn new(dims: Dims, data: Vec<f32>) -> Result<Self> {
        if data.len() != voxel_count(dims) {
            return Err(Error::Volume(format!(
                "probability volume {:?} vs {} values",
                dims,
                data.len()
            )));
        }
        if data.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Volume("probabilities must lie in [0, 1]".into()));
        }
        Ok(Self { dims, data })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }
}

/// Number of grid patches covering each voxel of the padded volume.
pub fn coverage_counts(dims: Dims, spec: &GridSpec) -> Result<Vec<u16>> {
    let p = spec.patch_size;
    let pd = padded_dims(dims, p);
    let mut count = vec![0u16; voxel_count(pd)];
    for o in grid_patches(pd, spec)? {
        for_patch(pd, o, p, |i, _| count[i] = count[i].saturating_add(1));
    }
    Ok(count)
}

fn for_patch(dims: Dims, o: [usize; 3], p: usize, mut f: impl FnMut(usize, usize)) {
    let mut k = 0;
    for z in o[2]..o[2] + p {
        for y in o[1]..o[1] + p {
            let base = linear_index(dims, o[0], y, z);
            for i in base..base + p {
                f(i, k);
                k += 1;
            }
        }
    }
}

/// Grid-tiles `vol`, runs the model on `batch`-sized groups of patches and
/// averages the sigmoid outputs wherever patches overlap.
///
/// The per-voxel average is kept as a running mean (`m += (x - m) / n`) so
/// that identical predictions average to exactly themselves.
pub fn sliding_window_predict<S: Segmenter + ?Sized>(
    model: &S,
    vol: &Volume,
    spec: &GridSpec,
    batch: usize,
) -> Result<ProbabilityVolume> {
    spec.validate()?;
    let p = spec.patch_size;
    if model.patch_size() != p {
        return Err(Error::Config(format!(
            "model patch size {} but grid uses {}",
            model.patch_size(),
            p
        )));
    }
    let dims = vol.dims();
    let pd = padded_dims(dims, p);
    let src = pad_to(&vol.to_f32(), dims, p);
    let origins = grid_patches(pd, spec)?;
    let per_voxel_max = (p.div_ceil(spec.stride()) + 1).pow(3);
    if per_voxel_max > u16::MAX as usize {
        return Err(Error::Config(format!(
            "overlap {} gives up to {} predictions per voxel",
            spec.overlap, per_voxel_max
        )));
    }
    let mut mean = vec![0f32; voxel_count(pd)];
    let mut count = vec![0u16; voxel_count(pd)];
    let pv = p * p * p;
    let batch = batch.max(1);
    for group in origins.chunks(batch) {
        let mut x = vec![0f32; group.len() * pv];
        for (b, o) in group.iter().enumerate() {
            let dst = &mut x[b * pv..(b + 1) * pv];
            for_patch(pd, *o, p, |i, k| dst[k] = src[i]);
        }
        let x = Tensor::from_vec(&[group.len(), 1, p, p, p], x)?;
        let logits = model.logits(&x)?;
        if logits.shape() != x.shape() {
            return Err(Error::Shape {
                op: "sliding_window_predict",
                detail: format!("model returned {:?}", logits.shape()),
            });
        }
        for (b, o) in group.iter().enumerate() {
            let out = &logits.data()[b * pv..(b + 1) * pv];
            for_patch(pd, *o, p, |i, k| {
                count[i] += 1;
                mean[i] += (sigmoid(out[k]) - mean[i]) / count[i] as f32;
            });
        }
    }
    debug_assert!(count.iter().all(|c| *c >= 1));
    let data = unpad(&mean, dims, p)
        .into_iter()
        .map(|v| v.clamp(0.0, 1.0))
        .collect();
    ProbabilityVolume::new(dims, data)
}

/// `1` where `p >= threshold`.
pub fn binarize(p: &ProbabilityVolume, threshold: f32) -> Mask {
    let data = p.data.iter().map(|v| (*v >= threshold) as u8).collect();
    Mask::from_raw(p.dims, data).expect("dims already validated")
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

pub fn confusion(pred: &Mask, gt: &Mask) -> Result<ConfusionCounts> {
    if pred.dims() != gt.dims() {
        return Err(Error::Dims(pred.dims(), gt.dims()));
    }
    let mut c = ConfusionCounts::default();
    for (p, g) in pred.data().iter().zip(gt.data()) {
        match (*p != 0, *g != 0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub dsc: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub precision: f64,
}

impl Metrics {
    pub const NAMES: [&'static str; 4] = ["dsc", "sensitivity", "specificity", "precision"];

    pub fn as_array(&self) -> [f64; 4] {
        [self.dsc, self.sensitivity, self.specificity, self.precision]
    }
}

/// Standard voxel metrics. A zero denominator yields 1 when the ground
/// truth has no lesion and 0 otherwise.
pub fn metrics(c: &ConfusionCounts) -> Metrics {
    let gt_empty = c.tp + c.fn_ == 0;
    let ratio = |num: u64, den: u64| {
        if den == 0 {
            log::debug!("event=zero_denominator gt_empty={gt_empty}");
            if gt_empty {
                1.0
            } else {
                0.0
            }
        } else {
            num as f64 / den as f64
        }
    };
    Metrics {
        dsc: ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_),
        sensitivity: ratio(c.tp, c.tp + c.fn_),
        specificity: ratio(c.tn, c.tn + c.fp),
        precision: ratio(c.tp, c.tp + c.fp),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Population standard deviation (0 for a single value).
    pub std: f64,
}

pub fn mean_std(values: &[f64]) -> MeanStd {
    if values.is_empty() {
        return MeanStd {
            mean: f64::NAN,
            std: f64::NAN,
        };
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    MeanStd {
        mean,
        std: libm::sqrt(var),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::IntensityKind;

    struct Constant(usize, f32);

    impl Segmenter for Constant {
        fn patch_size(&self) -> usize {
            self.0
        }
        fn logits(&self, batch: &Tensor<f32>) -> Result<Tensor<f32>> {
            Ok(Tensor::full(batch.shape(), self.1))
        }
    }

    /// Logit equal to the input value, so every patch agrees.
    struct Identity(usize);

    impl Segmenter for Identity {
        fn patch_size(&self) -> usize {
            self.0
        }
        fn logits(&self, batch: &Tensor<f32>) -> Result<Tensor<f32>> {
            Ok(batch.clone())
        }
    }

    fn vol(dims: Dims, f: impl Fn(usize) -> f32) -> Volume {
        Volume::from_f32(
            dims,
            [1.0; 3],
            (0..voxel_count(dims)).map(f).collect(),
            IntensityKind::Normalized,
        )
        .unwrap()
    }

    #[test]
    fn constant_logit_is_overlap_independent() {
        let v = vol([20, 13, 9], |i| (i % 7) as f32 / 7.0);
        let expected = sigmoid(0.3f32);
        for ov in [0.0, 0.25, 0.5, 0.75] {
            let p =
                sliding_window_predict(&Constant(8, 0.3), &v, &GridSpec::new(8, ov).unwrap(), 3)
                    .unwrap();
            assert_eq!(p.dims(), [20, 13, 9]);
            assert!(p.data().iter().all(|x| *x == expected));
        }
    }

    #[test]
    fn pointwise_model_agrees_across_overlaps() {
        let v = vol([17, 17, 17], |i| ((i * 37) % 101) as f32 / 101.0);
        let a =
            sliding_window_predict(&Identity(8), &v, &GridSpec::new(8, 0.25).unwrap(), 2).unwrap();
        let b =
            sliding_window_predict(&Identity(8), &v, &GridSpec::new(8, 0.75).unwrap(), 5).unwrap();
        assert_eq!(a, b);
        for (p, x) in a.data().iter().zip(v.to_f32()) {
            assert_eq!(*p, sigmoid(x));
        }
    }

    #[test]
    fn single_patch_volume() {
        let v = vol([8, 8, 8], |i| i as f32 / 512.0);
        let p =
            sliding_window_predict(&Identity(8), &v, &GridSpec::new(8, 0.5).unwrap(), 1).unwrap();
        let direct: Vec<f32> = v.to_f32().into_iter().map(sigmoid).collect();
        assert_eq!(p.data(), &direct[..]);
    }

    #[test]
    fn small_volume_is_padded_and_cropped_back() {
        let v = vol([5, 8, 3], |i| i as f32 / 120.0);
        let p =
            sliding_window_predict(&Identity(8), &v, &GridSpec::new(8, 0.25).unwrap(), 1).unwrap();
        assert_eq!(p.dims(), [5, 8, 3]);
        assert_eq!(p.data()[7], sigmoid(7.0 / 120.0));
    }

    #[test]
    fn mismatched_patch_size_is_rejected() {
        let v = vol([8, 8, 8], |_| 0.0);
        assert!(
            sliding_window_predict(&Constant(4, 0.0), &v, &GridSpec::new(8, 0.25).unwrap(), 1)
                .is_err()
        );
    }

    #[test]
    fn binarize_boundary() {
        let p = ProbabilityVolume::new([3, 1, 1], vec![0.5, 0.49, 0.51]).unwrap();
        assert_eq!(binarize(&p, 0.5).data(), &[1, 0, 1]);
        let low = ProbabilityVolume::new([2, 1, 1], vec![0.49; 2]).unwrap();
        assert_eq!(binarize(&low, 0.5).count_ones(), 0);
        let m = binarize(&p, 0.5);
        let again =
            ProbabilityVolume::new(m.dims(), m.data().iter().map(|v| *v as f32).collect()).unwrap();
        assert_eq!(binarize(&again, 0.5), m);
    }

    #[test]
    fn confusion_examples() {
        let mut g = vec![0u8; 100];
        g[..5].fill(1);
        let gt = Mask::new([100, 1, 1], g.clone()).unwrap();
        let c = confusion(&gt, &gt).unwrap();
        assert_eq!(
            c,
            ConfusionCounts {
                tp: 5,
                fp: 0,
                tn: 95,
                fn_: 0
            }
        );
        let inv = Mask::new([100, 1, 1], g.iter().map(|v| 1 - v).collect()).unwrap();
        let c = confusion(&inv, &gt).unwrap();
        assert_eq!((c.tp, c.tn), (0, 0));
        assert!(confusion(&gt, &Mask::zeros([10, 10, 1])).is_err());
    }

    #[test]
    fn metric_examples() {
        let m = metrics(&ConfusionCounts {
            tp: 3,
            fp: 1,
            tn: 58,
            fn_: 2,
        });
        assert!((m.dsc - 6.0 / 9.0).abs() < 1e-12);
        assert!((m.sensitivity - 0.6).abs() < 1e-12);
        assert!((m.specificity - 58.0 / 59.0).abs() < 1e-12);
        assert!((m.precision - 0.75).abs() < 1e-12);

        let perfect = metrics(&ConfusionCounts {
            tp: 4,
            fp: 0,
            tn: 10,
            fn_: 0,
        });
        assert_eq!(perfect.as_array(), [1.0; 4]);

        let miss = metrics(&ConfusionCounts {
            tp: 0,
            fp: 0,
            tn: 10,
            fn_: 4,
        });
        assert_eq!(miss.as_array(), [0.0, 0.0, 1.0, 0.0]);

        let both_empty = metrics(&ConfusionCounts {
            tp: 0,
            fp: 0,
            tn: 10,
            fn_: 0,
        });
        assert_eq!(both_empty.as_array(), [1.0; 4]);
    }

    #[test]
    fn mean_std_population() {
        assert_eq!(
            mean_std(&[0.7]),
            MeanStd {
                mean: 0.7,
                std: 0.0
            }
        );
        let m = mean_std(&[1.0, 3.0]);
        assert_eq!((m.mean, m.std), (2.0, 1.0));
    }
}
