//! Training objective: Dice on affordances plus weighted binary
//! cross-entropy on the arm and object masks.
//!
//! Predictions use the model's NCHW layout: affordance probabilities are
//! `[B, C, H, W]`, masks `[B, 1, H, W]`. Pixel index `l` is row-major,
//! `l = y * W + x`.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::model::OutputGrads;
use crate::tensor::{Scalar, Tensor};
use crate::types::SegmentationMap;

/// Binary `B x WH x C` target with exactly one 1 per pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OneHotTarget {
    batch: usize,
    pixels: usize,
    classes: usize,
    values: Vec<u8>,
}

impl OneHotTarget {
    /// Encodes a batch of equally sized maps.
    pub fn from_maps(maps: &[SegmentationMap], num_classes: usize) -> Result<Self> {
        let first = maps
            .first()
            .ok_or_else(|| Error::Argument("cannot one-hot encode an empty batch".into()))?;
        let pixels = first.width() * first.height();
        let mut values = vec![0u8; maps.len() * pixels * num_classes];
        for (b, map) in maps.iter().enumerate() {
            if (map.width(), map.height()) != (first.width(), first.height()) {
                return Err(shape_err!(
                    "map {b} is {}x{}, expected {}x{}",
                    map.width(),
                    map.height(),
                    first.width(),
                    first.height()
                ));
            }
            map.validate(num_classes)?;
            for (l, &class) in map.values().iter().enumerate() {
                values[(b * pixels + l) * num_classes + class as usize] = 1;
            }
        }
        Ok(OneHotTarget {
            batch: maps.len(),
            pixels,
            classes: num_classes,
            values,
        })
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn pixels(&self) -> usize {
        self.pixels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn get(&self, b: usize, l: usize, c: usize) -> u8 {
        self.values[(b * self.pixels + l) * self.classes + c]
    }

    /// Row `l` of item `b`.
    pub fn row(&self, b: usize, l: usize) -> &[u8] {
        let start = (b * self.pixels + l) * self.classes;
        &self.values[start..start + self.classes]
    }
}

/// One-hot encodes a single map (batch of one).
pub fn one_hot_encode(map: &SegmentationMap, num_classes: usize) -> Result<OneHotTarget> {
    OneHotTarget::from_maps(std::slice::from_ref(map), num_classes)
}

/// Score of a class absent from both prediction and target.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AbsentClass {
    /// `2I / (eps + S)`: an absent class scores 0.
    #[default]
    Literal,
    /// `(2I + eps) / (eps + S)`: an absent class scores 1.
    Smoothed,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiceConfig {
    pub epsilon: f64,
    pub absent_class: AbsentClass,
}

impl Default for DiceConfig {
    fn default() -> Self {
        DiceConfig {
            epsilon: 1e-7,
            absent_class: AbsentClass::Literal,
        }
    }
}

impl DiceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(Error::Config(format!(
                "dice epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_o: f64,
    pub lambda_h: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_o: 1.0,
            lambda_h: 1.0,
        }
    }
}

impl LossWeights {
    pub fn new(lambda_o: f64, lambda_h: f64) -> Result<Self> {
        let w = LossWeights { lambda_o, lambda_h };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_o", self.lambda_o), ("lambda_h", self.lambda_h)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }

    /// `affordance + lambda_o * object + lambda_h * arm`.
    pub fn combine<T: Scalar>(&self, affordance: T, object: T, arm: T) -> T {
        affordance + T::lit(self.lambda_o) * object + T::lit(self.lambda_h) * arm
    }
}

/// Pixel reduction for binary cross-entropy.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    /// Sum over pixels, mean over the batch.
    SumPixelsMeanBatch,
    /// Mean over pixels and batch.
    #[default]
    MeanAll,
}

/// Clamp applied to mask probabilities before taking logarithms.
pub const BCE_DELTA: f64 = 1e-7;

fn check_dice_inputs<T: Scalar>(pred: &Tensor<T>, target: &OneHotTarget) -> Result<()> {
    let [b, c, h, w] = pred.shape();
    if b != target.batch || c != target.classes || h * w != target.pixels {
        return Err(shape_err!(
            "dice prediction {:?} does not match target {}x{}x{}",
            pred.shape(),
            target.batch,
            target.pixels,
            target.classes
        ));
    }
    Ok(())
}

/// Per-class intersection `I_c` and total mass `S_c`, pooled over the batch.
fn dice_sums<T: Scalar>(pred: &Tensor<T>, target: &OneHotTarget) -> (Vec<T>, Vec<T>) {
    let [b, c, _, _] = pred.shape();
    let mut inter = vec![T::zero(); c];
    let mut mass = vec![T::zero(); c];
    for n in 0..b {
        for class in 0..c {
            let plane = pred.channel_plane(n, class);
            let (mut i, mut s) = (T::zero(), T::zero());
            for (l, &p) in plane.iter().enumerate() {
                let y = target.get(n, l, class);
                if y == 1 {
                    i += p;
                    s += p + T::one();
                } else {
                    s += p;
                }
            }
            inter[class] += i;
            mass[class] += s;
        }
    }
    (inter, mass)
}

fn dice_scores<T: Scalar>(inter: &[T], mass: &[T], cfg: &DiceConfig) -> Vec<T> {
    let eps = T::lit(cfg.epsilon);
    let two = T::lit(2.0);
    inter
        .iter()
        .zip(mass)
        .map(|(&i, &s)| match cfg.absent_class {
            AbsentClass::Literal => two * i / (eps + s),
            AbsentClass::Smoothed => (two * i + eps) / (eps + s),
        })
        .collect()
}

/// `1 - mean_c dice_c`, each class pooled over the whole batch.
pub fn dice_loss<T: Scalar>(pred: &Tensor<T>, target: &OneHotTarget, cfg: &DiceConfig) -> Result<T> {
    check_dice_inputs(pred, target)?;
    let (inter, mass) = dice_sums(pred, target);
    let scores = dice_scores(&inter, &mass, cfg);
    let c = T::from_usize(scores.len()).expect("class count fits");
    Ok(T::one() - scores.into_iter().sum::<T>() / c)
}

/// Dice loss and its gradient with respect to `pred`.
pub fn dice_loss_grad<T: Scalar>(
    pred: &Tensor<T>,
    target: &OneHotTarget,
    cfg: &DiceConfig,
) -> Result<(T, Tensor<T>)> {
    check_dice_inputs(pred, target)?;
    let (inter, mass) = dice_sums(pred, target);
    let scores = dice_scores(&inter, &mass, cfg);
    let [b, c, _, _] = pred.shape();
    let cf = T::from_usize(c).expect("class count fits");
    let loss = T::one() - scores.iter().copied().sum::<T>() / cf;
    let eps = T::lit(cfg.epsilon);
    let two = T::lit(2.0);
    let mut grad = Tensor::zeros(pred.shape());
    let plane = pred.plane();
    for class in 0..c {
        let denom = eps + mass[class];
        let numer = match cfg.absent_class {
            AbsentClass::Literal => two * inter[class],
            AbsentClass::Smoothed => two * inter[class] + eps,
        };
        // d dice / d p = (2 y denom - numer) / denom^2
        let on = -(two * denom - numer) / (denom * denom * cf);
        let off = numer / (denom * denom * cf);
        for n in 0..b {
            let start = grad.index(n, class, 0, 0);
            let dst = &mut grad.data_mut()[start..start + plane];
            for (l, g) in dst.iter_mut().enumerate() {
                *g = if target.get(n, l, class) == 1 { on } else { off };
            }
        }
    }
    Ok((loss, grad))
}

fn check_bce_inputs<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<()> {
    if pred.shape() != target.shape() {
        return Err(shape_err!(
            "mask prediction {:?} does not match target {:?}",
            pred.shape(),
            target.shape()
        ));
    }
    if target.data().iter().any(|&v| v != T::zero() && v != T::one()) {
        return Err(Error::Argument("binary target must contain only 0 and 1".into()));
    }
    Ok(())
}

fn bce_scale<T: Scalar>(pred: &Tensor<T>, reduction: Reduction) -> T {
    let denom = match reduction {
        Reduction::SumPixelsMeanBatch => pred.batch(),
        Reduction::MeanAll => pred.len(),
    };
    T::one() / T::from_usize(denom.max(1)).expect("size fits")
}

/// Pixel-wise binary cross-entropy with predictions clamped to
/// `[BCE_DELTA, 1 - BCE_DELTA]`.
pub fn binary_cross_entropy<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>, reduction: Reduction) -> Result<T> {
    check_bce_inputs(pred, target)?;
    let lo = T::lit(BCE_DELTA);
    let hi = T::one() - lo;
    let mut total = T::zero();
    for (&p, &v) in pred.data().iter().zip(target.data()) {
        let p = p.max(lo).min(hi);
        total -= if v == T::one() { p.ln() } else { (T::one() - p).ln() };
    }
    Ok(total * bce_scale(pred, reduction))
}

/// BCE and its gradient with respect to `pred`; zero where the clamp is
/// active.
pub fn binary_cross_entropy_grad<T: Scalar>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
    reduction: Reduction,
) -> Result<(T, Tensor<T>)> {
    let loss = binary_cross_entropy(pred, target, reduction)?;
    let lo = T::lit(BCE_DELTA);
    let hi = T::one() - lo;
    let scale = bce_scale(pred, reduction);
    let grad = pred.zip_map(target, |p, v| {
        if p < lo || p > hi {
            T::zero()
        } else if v == T::one() {
            -scale / p
        } else {
            scale / (T::one() - p)
        }
    })?;
    Ok((loss, grad))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub dice: DiceConfig,
    pub bce_reduction: Reduction,
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.dice.validate()
    }
}

/// A predicted mask with its binary target.
#[derive(Clone, Copy)]
pub struct MaskPair<'a, T> {
    pub pred: &'a Tensor<T>,
    pub target: &'a Tensor<T>,
}

pub struct LossInputs<'a, T> {
    pub affordance: &'a Tensor<T>,
    pub affordance_target: &'a OneHotTarget,
    /// Absent for the single-decoder baseline.
    pub object: Option<MaskPair<'a, T>>,
    pub arm: Option<MaskPair<'a, T>>,
}

/// Total loss and its components; mask terms are `None` when their
/// branch is absent.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossComponents<T> {
    pub total: T,
    pub affordance: T,
    pub object: Option<T>,
    pub arm: Option<T>,
}

/// `L_a + lambda_o * L_o + lambda_h * L_h`.
pub fn combined_loss<T: Scalar>(inputs: &LossInputs<'_, T>, cfg: &LossConfig) -> Result<LossComponents<T>> {
    let affordance = dice_loss(inputs.affordance, inputs.affordance_target, &cfg.dice)?;
    let object = inputs
        .object
        .map(|m| binary_cross_entropy(m.pred, m.target, cfg.bce_reduction))
        .transpose()?;
    let arm = inputs
        .arm
        .map(|m| binary_cross_entropy(m.pred, m.target, cfg.bce_reduction))
        .transpose()?;
    Ok(LossComponents {
        total: cfg
            .weights
            .combine(affordance, object.unwrap_or_default(), arm.unwrap_or_default()),
        affordance,
        object,
        arm,
    })
}

/// Combined loss with gradients for every model output.
pub fn combined_loss_grad<T: Scalar>(
    inputs: &LossInputs<'_, T>,
    cfg: &LossConfig,
) -> Result<(LossComponents<T>, OutputGrads<T>)> {
    let (affordance, g_aff) = dice_loss_grad(inputs.affordance, inputs.affordance_target, &cfg.dice)?;
    let mask_term = |pair: Option<MaskPair<'_, T>>, weight: f64| -> Result<Option<(T, Tensor<T>)>> {
        pair.map(|m| {
            let (l, mut g) = binary_cross_entropy_grad(m.pred, m.target, cfg.bce_reduction)?;
            g.scale(T::lit(weight));
            Ok((l, g))
        })
        .transpose()
    };
    let object = mask_term(inputs.object, cfg.weights.lambda_o)?;
    let arm = mask_term(inputs.arm, cfg.weights.lambda_h)?;
    let lo = object.as_ref().map(|(l, _)| *l);
    let lh = arm.as_ref().map(|(l, _)| *l);
    let components = LossComponents {
        total: cfg
            .weights
            .combine(affordance, lo.unwrap_or_default(), lh.unwrap_or_default()),
        affordance,
        object: lo,
        arm: lh,
    };
    Ok((
        components,
        OutputGrads {
            affordance: g_aff,
            arm: arm.map(|(_, g)| g),
            object: object.map(|(_, g)| g),
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn map(w: usize, h: usize, v: Vec<u8>) -> SegmentationMap {
        SegmentationMap::new(w, h, v).unwrap()
    }

    #[test]
    fn one_hot_rows() {
        let t = one_hot_encode(&map(2, 1, vec![0, 3]), 4).unwrap();
        assert_eq!(t.row(0, 0), &[1, 0, 0, 0]);
        assert_eq!(t.row(0, 1), &[0, 0, 0, 1]);
        let z = one_hot_encode(&map(3, 2, vec![0; 6]), 2).unwrap();
        for l in 0..6 {
            assert_eq!(z.row(0, l), &[1, 0]);
        }
        assert!(matches!(
            one_hot_encode(&map(1, 1, vec![5]), 4),
            Err(Error::Encoding(_))
        ));
    }

    fn hard(target: &OneHotTarget, h: usize, w: usize) -> Tensor<f64> {
        Tensor::from_fn([target.batch(), target.classes(), h, w], |[n, c, y, x]| {
            f64::from(target.get(n, y * w + x, c))
        })
    }

    #[test]
    fn dice_perfect_prediction_is_zero() {
        let m = map(2, 2, vec![0, 1, 2, 3]);
        let t = one_hot_encode(&m, 4).unwrap();
        let loss = dice_loss(&hard(&t, 2, 2), &t, &DiceConfig::default()).unwrap();
        assert!(loss < 1e-6);
    }

    #[test]
    fn dice_uniform_two_class_case() {
        let n = 7;
        let t = one_hot_encode(&map(n, 1, vec![0; n]), 2).unwrap();
        let pred = Tensor::full([1, 2, 1, n], 0.5f64);
        let loss = dice_loss(&pred, &t, &DiceConfig::default()).unwrap();
        assert!((loss - 2.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn absent_class_scores_zero_literal_one_smoothed() {
        let t = one_hot_encode(&map(2, 1, vec![0, 0]), 2).unwrap();
        let pred = hard(&t, 1, 2);
        let literal = dice_loss(&pred, &t, &DiceConfig::default()).unwrap();
        assert!(literal.is_finite());
        assert!((literal - 0.5).abs() < 1e-6);
        let smoothed = DiceConfig {
            absent_class: AbsentClass::Smoothed,
            ..DiceConfig::default()
        };
        assert!(dice_loss(&pred, &t, &smoothed).unwrap() < 1e-6);
    }

    #[test]
    fn dice_shape_mismatch() {
        let t = one_hot_encode(&map(2, 2, vec![0; 4]), 4).unwrap();
        assert!(matches!(
            dice_loss(&Tensor::<f64>::zeros([1, 3, 2, 2]), &t, &DiceConfig::default()),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn bce_values() {
        let pred = Tensor::full([2, 1, 3, 5], 0.5f64);
        let target = Tensor::from_fn([2, 1, 3, 5], |[_, _, y, x]| ((x + y) % 2) as f64);
        let mean = binary_cross_entropy(&pred, &target, Reduction::MeanAll).unwrap();
        assert!((mean - std::f64::consts::LN_2).abs() < 1e-9);
        let sum = binary_cross_entropy(&pred, &target, Reduction::SumPixelsMeanBatch).unwrap();
        assert!((sum - 15.0 * std::f64::consts::LN_2).abs() < 1e-9);

        let one = Tensor::full([1, 1, 1, 1], 0.25f64);
        let v = Tensor::full([1, 1, 1, 1], 1.0f64);
        let l = binary_cross_entropy(&one, &v, Reduction::MeanAll).unwrap();
        assert!((l - 1.3863).abs() < 1e-4);

        let perfect = binary_cross_entropy(&target, &target, Reduction::SumPixelsMeanBatch).unwrap();
        assert!((perfect - 15.0 * -(1.0 - BCE_DELTA).ln()).abs() < 1e-12);
        assert!(perfect < 1e-5);
    }

    #[test]
    fn bce_rejects_bad_inputs() {
        let p = Tensor::full([1, 1, 2, 2], 0.5f64);
        assert!(matches!(
            binary_cross_entropy(&p, &Tensor::zeros([1, 1, 2, 3]), Reduction::MeanAll),
            Err(Error::Shape(_))
        ));
        assert!(binary_cross_entropy(&p, &Tensor::full([1, 1, 2, 2], 0.5), Reduction::MeanAll).is_err());
    }

    #[test]
    fn combine_arithmetic() {
        let w = LossWeights::new(2.0, 0.5).unwrap();
        assert!((w.combine(0.4f64, 0.2, 0.6) - 1.1).abs() < 1e-12);
        let zero = LossWeights::new(0.0, 0.0).unwrap();
        assert_eq!(zero.combine(0.37f64, 5.0, 9.0), 0.37);
        assert!(LossWeights::new(-1.0, 0.0).is_err());
        assert!(LossWeights::new(f64::NAN, 0.0).is_err());
    }

    #[test]
    fn combined_without_mask_branches_is_dice() {
        let t = one_hot_encode(&map(2, 2, vec![0, 1, 2, 3]), 4).unwrap();
        let pred = Tensor::full([1, 4, 2, 2], 0.25f64);
        let c = combined_loss(
            &LossInputs {
                affordance: &pred,
                affordance_target: &t,
                object: None,
                arm: None,
            },
            &LossConfig::default(),
        )
        .unwrap();
        assert_eq!(c.total, c.affordance);
        assert_eq!(c.object, None);
    }

    fn relative(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    fn softish(seed: u64, shape: [usize; 4]) -> Tensor<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(0.05..0.95))
    }

    #[test]
    fn gradients_match_finite_differences() {
        let m = map(4, 4, (0..16).map(|i| (i * 7 % 4) as u8).collect());
        let t = one_hot_encode(&m, 4).unwrap();
        let aff = softish(1, [1, 4, 4, 4]);
        let obj = softish(2, [1, 1, 4, 4]);
        let arm = softish(3, [1, 1, 4, 4]);
        let obj_t = Tensor::from_fn([1, 1, 4, 4], |[_, _, y, x]| f64::from(m.get(x, y) == 1 || m.get(x, y) == 2));
        let arm_t = Tensor::from_fn([1, 1, 4, 4], |[_, _, y, x]| f64::from(m.get(x, y) == 3));
        for absent_class in [AbsentClass::Literal, AbsentClass::Smoothed] {
            for bce_reduction in [Reduction::MeanAll, Reduction::SumPixelsMeanBatch] {
                let cfg = LossConfig {
                    weights: LossWeights::new(0.7, 1.3).unwrap(),
                    dice: DiceConfig {
                        absent_class,
                        ..DiceConfig::default()
                    },
                    bce_reduction,
                };
                let eval = |a: &Tensor<f64>, o: &Tensor<f64>, h: &Tensor<f64>| {
                    combined_loss(
                        &LossInputs {
                            affordance: a,
                            affordance_target: &t,
                            object: Some(MaskPair { pred: o, target: &obj_t }),
                            arm: Some(MaskPair { pred: h, target: &arm_t }),
                        },
                        &cfg,
                    )
                    .unwrap()
                    .total
                };
                let (_, g) = combined_loss_grad(
                    &LossInputs {
                        affordance: &aff,
                        affordance_target: &t,
                        object: Some(MaskPair { pred: &obj, target: &obj_t }),
                        arm: Some(MaskPair { pred: &arm, target: &arm_t }),
                    },
                    &cfg,
                )
                .unwrap();
                let h = 1e-6;
                for i in 0..aff.len() {
                    let (mut p, mut q) = (aff.clone(), aff.clone());
                    p.data_mut()[i] += h;
                    q.data_mut()[i] -= h;
                    let fd = (eval(&p, &obj, &arm) - eval(&q, &obj, &arm)) / (2.0 * h);
                    assert!(relative(fd, g.affordance.data()[i]) < 1e-5);
                }
                for i in 0..obj.len() {
                    let (mut p, mut q) = (obj.clone(), obj.clone());
                    p.data_mut()[i] += h;
                    q.data_mut()[i] -= h;
                    let fd = (eval(&aff, &p, &arm) - eval(&aff, &q, &arm)) / (2.0 * h);
                    assert!(relative(fd, g.object.as_ref().unwrap().data()[i]) < 1e-5);
                    let (mut p, mut q) = (arm.clone(), arm.clone());
                    p.data_mut()[i] += h;
                    q.data_mut()[i] -= h;
                    let fd = (eval(&aff, &obj, &p) - eval(&aff, &obj, &q)) / (2.0 * h);
                    assert!(relative(fd, g.arm.as_ref().unwrap().data()[i]) < 1e-5);
                }
            }
        }
    }

    fn case() -> impl Strategy<Value = (usize, usize, Vec<u8>, Vec<f64>)> {
        (1usize..4, 1usize..20).prop_flat_map(|(b, n)| {
            (
                Just(b),
                Just(n),
                proptest::collection::vec(0u8..3, b * n),
                proptest::collection::vec(0.0f64..=1.0, b * 3 * n),
            )
        })
    }

    fn build(b: usize, n: usize, labels: &[u8], probs: &[f64]) -> (Tensor<f64>, OneHotTarget) {
        let maps: Vec<_> = labels.chunks(n).map(|c| map(n, 1, c.to_vec())).collect();
        let t = OneHotTarget::from_maps(&maps, 3).unwrap();
        (Tensor::from_vec([b, 3, 1, n], probs.to_vec()).unwrap(), t)
    }

    proptest! {
        #[test]
        fn dice_is_bounded((b, n, labels, probs) in case()) {
            let (pred, t) = build(b, n, &labels, &probs);
            for cfg in [DiceConfig::default(), DiceConfig { absent_class: AbsentClass::Smoothed, ..DiceConfig::default() }] {
                let l = dice_loss(&pred, &t, &cfg).unwrap();
                prop_assert!((-1e-12..=1.0 + 1e-12).contains(&l));
            }
        }

        #[test]
        fn dice_is_permutation_invariant((b, n, labels, probs) in case(), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let (pred, t) = build(b, n, &labels, &probs);
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let labels2: Vec<u8> = (0..b).flat_map(|i| order.iter().map(move |&l| (i, l))).map(|(i, l)| labels[i * n + l]).collect();
            let probs2: Vec<f64> = (0..b * 3).flat_map(|row| order.iter().map(move |&l| (row, l))).map(|(row, l)| probs[row * n + l]).collect();
            let (pred2, t2) = build(b, n, &labels2, &probs2);
            let cfg = DiceConfig::default();
            prop_assert!((dice_loss(&pred, &t, &cfg).unwrap() - dice_loss(&pred2, &t2, &cfg).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn bce_is_nonnegative_and_monotone(p in 0.0f64..=1.0, q in 0.0f64..=1.0) {
            let (lo, hi) = if p < q { (p, q) } else { (q, p) };
            let one = |v: f64, t: f64| binary_cross_entropy(&Tensor::full([1, 1, 1, 1], v), &Tensor::full([1, 1, 1, 1], t), Reduction::MeanAll).unwrap();
            prop_assert!(one(p, 1.0) >= 0.0 && one(p, 0.0) >= 0.0);
            prop_assert!(one(lo, 1.0) >= one(hi, 1.0));
            prop_assert!(one(lo, 0.0) <= one(hi, 0.0));
        }

        #[test]
        fn combine_is_linear(a in 0.0f64..5.0, o in 0.0f64..5.0, h in 0.0f64..5.0, lo in 0.0f64..3.0, lh in 0.0f64..3.0) {
            let w = LossWeights::new(lo, lh).unwrap();
            let base = w.combine(a, 0.0, 0.0);
            prop_assert!((w.combine(a, o, 0.0) - base - lo * o).abs() < 1e-12);
            prop_assert!((w.combine(a, 0.0, h) - base - lh * h).abs() < 1e-12);
            prop_assert!((w.combine(a, 2.0 * o, h) - w.combine(a, o, h) - lo * o).abs() < 1e-9);
        }
    }
}
