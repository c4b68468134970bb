//! Supervised training: the two segmentation losses (sigmoid cross entropy
//! for the 2-class head, class-weighted softmax cross entropy for the 3-class
//! head), the Adam parameter update, and the epoch/mini-batch loop with
//! per-epoch loss logging.
//!
//! Both losses are fused with the terminal activation: they consume the
//! network's probability output but return the gradient with respect to the
//! terminal convolution's **pre-activation** scores, which is the form
//! `Model::backward` expects. The fused gradients — `(ŷ − y)/count` for
//! sigmoid, `w_true·(ŷ − y)/count` for weighted softmax — are algebraically
//! exact and never evaluate `log(0)`.

use std::path::Path;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::network::{Gradients, LayerGrads, LayerParams, Model};
use crate::rng::{substream, Stream};
use crate::tensor::{Real, Tensor4};

/// Hyper-parameters of one training run.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Adam's denominator fudge term.
    pub epsilon: f64,
    /// Per-class loss weights for the 3-class head, indexed in label-plane
    /// order (mango, boundary, background). The default `[1, 60, 1]` weights
    /// boundary pixels 60× — they are rare and carry the crown-separation
    /// signal. Ignored by the 2-class loss.
    pub class_weights: [f64; 3],
    pub seed: u64,
    pub num_classes: u8,
}

impl TrainConfig {
    pub fn new(num_classes: u8) -> TrainConfig {
        TrainConfig {
            batch_size: 16,
            epochs: 200,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            class_weights: [1.0, 60.0, 1.0],
            seed: 0,
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("TrainConfig", "batch_size must be at least 1"));
        }
        if self.epochs == 0 {
            return Err(Error::invalid("TrainConfig", "epochs must be at least 1"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::invalid("TrainConfig", "learning_rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::invalid("TrainConfig", "beta1 and beta2 must lie in [0, 1)"));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::invalid("TrainConfig", "epsilon must be positive"));
        }
        if self.class_weights.iter().any(|&w| !(w > 0.0)) {
            return Err(Error::invalid("TrainConfig", "class weights must be positive"));
        }
        if self.num_classes != 2 && self.num_classes != 3 {
            return Err(Error::invalid("TrainConfig", "num_classes must be 2 or 3"));
        }
        Ok(())
    }
}

/// Mean sigmoid cross entropy over all pixels and examples, plus the loss
/// gradient with respect to the pre-sigmoid scores.
///
/// `y` holds hard labels (exactly 0 or 1, single channel). The loss term for
/// a pixel is `−y·ln(ŷ) − (1−y)·ln(1−ŷ)`, accumulated in f64; probabilities
/// that have saturated to exactly 0 or 1 in the working precision are nudged
/// by one representable step inside the logarithm only, so a perfect
/// prediction scores 0 rather than NaN.
pub fn sigmoid_ce_loss<T: Real>(y_hat: &Tensor4<T>, y: &Tensor4<T>) -> Result<(f64, Tensor4<T>)> {
    check_congruent("sigmoid_ce_loss", y_hat, y, 1)?;
    let count = y_hat.data.len() as f64;
    let mut loss = 0.0f64;
    let mut grad = y_hat.zeros_like();
    for ((&p, &t), g) in y_hat.data.iter().zip(&y.data).zip(&mut grad.data) {
        let tv = t.as_f64();
        if tv != 0.0 && tv != 1.0 {
            return Err(Error::invalid(
                "sigmoid_ce_loss",
                format!("labels must be exactly 0 or 1, found {tv}"),
            ));
        }
        let pv = p.as_f64();
        loss -= if tv == 1.0 { clamped_ln(pv) } else { clamped_ln(1.0 - pv) };
        *g = T::from_f64((pv - tv) / count);
    }
    Ok((loss / count, grad))
}

/// Mean class-weighted softmax cross entropy, plus the gradient with respect
/// to the pre-softmax scores.
///
/// `y` is one-hot over the 3 label planes (mango, boundary, background);
/// `weights` follow the same plane order. A pixel whose true class has
/// weight `w` contributes `−w·ln(ŷ_true)`, and its score gradient is
/// `w·(ŷ − y)/count` with `count` the number of (pixel, example) pairs.
pub fn weighted_softmax_ce_loss<T: Real>(
    y_hat: &Tensor4<T>,
    y: &Tensor4<T>,
    weights: &[f64; 3],
) -> Result<(f64, Tensor4<T>)> {
    check_congruent("weighted_softmax_ce_loss", y_hat, y, 3)?;
    if weights.iter().any(|&w| !(w > 0.0)) {
        return Err(Error::invalid("weighted_softmax_ce_loss", "class weights must be positive"));
    }
    let count = (y_hat.b * y_hat.h * y_hat.w) as f64;
    let mut loss = 0.0f64;
    let mut grad = y_hat.zeros_like();
    for (px, (ppix, tpix)) in y_hat.data.chunks_exact(3).zip(y.data.chunks_exact(3)).enumerate() {
        let mut true_class = None;
        for (k, &t) in tpix.iter().enumerate() {
            let tv = t.as_f64();
            if tv == 1.0 {
                if true_class.replace(k).is_some() {
                    return Err(Error::invalid(
                        "weighted_softmax_ce_loss",
                        format!("pixel {px} has more than one active label plane"),
                    ));
                }
            } else if tv != 0.0 {
                return Err(Error::invalid(
                    "weighted_softmax_ce_loss",
                    format!("pixel {px} label plane holds {tv}; one-hot labels must be 0 or 1"),
                ));
            }
        }
        let Some(true_class) = true_class else {
            return Err(Error::invalid(
                "weighted_softmax_ce_loss",
                format!("pixel {px} has no active label plane"),
            ));
        };
        let w = weights[true_class];
        loss -= w * clamped_ln(ppix[true_class].as_f64());
        let gpix = &mut grad.data[3 * px..3 * px + 3];
        for k in 0..3 {
            let delta = if k == true_class { 1.0 } else { 0.0 };
            gpix[k] = T::from_f64(w * (ppix[k].as_f64() - delta) / count);
        }
    }
    Ok((loss / count, grad))
}

/// ln with the argument nudged away from 0 by the smallest positive normal,
/// so saturated probabilities yield a large finite penalty instead of ∞.
fn clamped_ln(x: f64) -> f64 {
    x.max(f64::MIN_POSITIVE).ln()
}

fn check_congruent<T: Real>(
    op: &'static str,
    y_hat: &Tensor4<T>,
    y: &Tensor4<T>,
    channels: usize,
) -> Result<()> {
    if y_hat.b != y.b || y_hat.h != y.h || y_hat.w != y.w || y_hat.c != y.c {
        return Err(Error::shape(
            op,
            format!(
                "prediction is {}x{}x{}x{}, labels are {}x{}x{}x{}",
                y_hat.b, y_hat.h, y_hat.w, y_hat.c, y.b, y.h, y.w, y.c
            ),
        ));
    }
    if y_hat.c != channels {
        return Err(Error::shape(
            op,
            format!("expected {channels} channel(s), got {}", y_hat.c),
        ));
    }
    Ok(())
}

/// First/second-moment accumulators for every trainable parameter, congruent
/// with the model's parameter arrays, plus the shared step counter.
#[derive(Clone, Debug)]
pub struct AdamState<T: Real> {
    pub t: u64,
    m: Gradients<T>,
    v: Gradients<T>,
}

impl<T: Real> AdamState<T> {
    pub fn new(model: &Model<T>) -> AdamState<T> {
        let zeros_like = |model: &Model<T>| Gradients {
            layers: model
                .layers
                .iter()
                .map(|l| match l {
                    LayerParams::MaxPool => LayerGrads {
                        kernel: Vec::new(),
                        bias: Vec::new(),
                        gamma: Vec::new(),
                        beta: Vec::new(),
                    },
                    LayerParams::Conv { conv, bn } => LayerGrads {
                        kernel: vec![T::zero(); conv.kernel.len()],
                        bias: vec![T::zero(); conv.bias.len()],
                        gamma: vec![T::zero(); bn.as_ref().map_or(0, |b| b.gamma.len())],
                        beta: vec![T::zero(); bn.as_ref().map_or(0, |b| b.beta.len())],
                    },
                    LayerParams::TConv(conv) | LayerParams::TerminalConv(conv) => LayerGrads {
                        kernel: vec![T::zero(); conv.kernel.len()],
                        bias: vec![T::zero(); conv.bias.len()],
                        gamma: Vec::new(),
                        beta: Vec::new(),
                    },
                })
                .collect(),
        };
        AdamState { t: 0, m: zeros_like(model), v: zeros_like(model) }
    }
}

/// One bias-corrected Adam update over every trainable parameter. Fails fast
/// on any non-finite gradient; running batch-norm statistics are not touched
/// (they are not trainable).
pub fn adam_step<T: Real>(
    model: &mut Model<T>,
    grads: &Gradients<T>,
    state: &mut AdamState<T>,
    cfg: &TrainConfig,
) -> Result<()> {
    if grads.layers.len() != model.layers.len() {
        return Err(Error::shape(
            "adam_step",
            format!("{} gradient layers for {} model layers", grads.layers.len(), model.layers.len()),
        ));
    }
    for (i, g) in grads.layers.iter().enumerate() {
        let finite = g
            .kernel
            .iter()
            .chain(&g.bias)
            .chain(&g.gamma)
            .chain(&g.beta)
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::non_finite("adam_step", format!("gradient of layer {i}")));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);

    for ((layer, g), (ms, vs)) in model
        .layers
        .iter_mut()
        .zip(&grads.layers)
        .zip(state.m.layers.iter_mut().zip(state.v.layers.iter_mut()))
    {
        let update = |p: &mut [T], g: &[T], m: &mut [T], v: &mut [T]| {
            debug_assert_eq!(p.len(), g.len(), "optimizer state congruence");
            for i in 0..p.len() {
                let gv = g[i].as_f64();
                let mv = cfg.beta1 * m[i].as_f64() + (1.0 - cfg.beta1) * gv;
                let vv = cfg.beta2 * v[i].as_f64() + (1.0 - cfg.beta2) * gv * gv;
                m[i] = T::from_f64(mv);
                v[i] = T::from_f64(vv);
                let step = cfg.learning_rate * (mv / bc1) / ((vv / bc2).sqrt() + cfg.epsilon);
                p[i] = T::from_f64(p[i].as_f64() - step);
            }
        };
        match layer {
            LayerParams::MaxPool => {}
            LayerParams::Conv { conv, bn } => {
                update(&mut conv.kernel, &g.kernel, &mut ms.kernel, &mut vs.kernel);
                update(&mut conv.bias, &g.bias, &mut ms.bias, &mut vs.bias);
                if let Some(bn) = bn {
                    update(&mut bn.gamma, &g.gamma, &mut ms.gamma, &mut vs.gamma);
                    update(&mut bn.beta, &g.beta, &mut ms.beta, &mut vs.beta);
                }
            }
            LayerParams::TConv(conv) | LayerParams::TerminalConv(conv) => {
                update(&mut conv.kernel, &g.kernel, &mut ms.kernel, &mut vs.kernel);
                update(&mut conv.bias, &g.bias, &mut ms.bias, &mut vs.bias);
            }
        }
    }
    Ok(())
}

/// Training images paired with their per-pixel labels: a single 0/1 channel
/// for the 2-class task, or 3 one-hot planes (mango, boundary, background)
/// for the 3-class task.
#[derive(Clone, Debug)]
pub struct TrainSet<T: Real> {
    pub images: Tensor4<T>,
    pub labels: Tensor4<T>,
}

impl<T: Real> TrainSet<T> {
    pub fn new(images: Tensor4<T>, labels: Tensor4<T>) -> Result<TrainSet<T>> {
        if images.b != labels.b || images.h != labels.h || images.w != labels.w {
            return Err(Error::shape(
                "TrainSet::new",
                format!(
                    "{} images of {}x{} with {} labels of {}x{}",
                    images.b, images.h, images.w, labels.b, labels.h, labels.w
                ),
            ));
        }
        if labels.c != 1 && labels.c != 3 {
            return Err(Error::shape(
                "TrainSet::new",
                format!("labels must have 1 or 3 channels, got {}", labels.c),
            ));
        }
        Ok(TrainSet { images, labels })
    }

    pub fn len(&self) -> usize {
        self.images.b
    }

    pub fn is_empty(&self) -> bool {
        self.images.b == 0
    }
}

/// Averaged loss per completed epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct LossTrace {
    pub epoch_loss: Vec<f64>,
}

impl LossTrace {
    /// CSV with an `epoch,avg_loss` header and 6 significant digits per loss.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,avg_loss\n");
        for (i, loss) in self.epoch_loss.iter().enumerate() {
            out.push_str(&format!("{},{:.5e}\n", i + 1, loss));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Whole batches per epoch; the ragged tail is dropped.
pub fn iters_per_epoch(n_examples: usize, batch_size: usize) -> usize {
    n_examples / batch_size
}

/// Run the full training loop: `epochs × ⌊N/B⌋` iterations, re-shuffling the
/// example order every epoch from a seeded substream, batch normalization in
/// train mode throughout. Aborts with context if the loss turns non-finite.
pub fn train<T: Real>(model: &mut Model<T>, data: &TrainSet<T>, cfg: &TrainConfig) -> Result<LossTrace> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("train", "dataset is empty"));
    }
    let expected_c = if cfg.num_classes == 2 { 1 } else { 3 };
    if data.labels.c != expected_c {
        return Err(Error::shape(
            "train",
            format!(
                "{}-class training needs {expected_c}-channel labels, got {}",
                cfg.num_classes, data.labels.c
            ),
        ));
    }
    if model.spec.num_classes != cfg.num_classes {
        return Err(Error::invalid(
            "train",
            format!(
                "model has a {}-class head, config asks for {} classes",
                model.spec.num_classes, cfg.num_classes
            ),
        ));
    }
    let iters = iters_per_epoch(data.len(), cfg.batch_size);
    if iters == 0 {
        return Err(Error::invalid(
            "train",
            format!("batch size {} exceeds dataset size {}", cfg.batch_size, data.len()),
        ));
    }

    let mut state = AdamState::new(model);
    let mut trace = LossTrace { epoch_loss: Vec::with_capacity(cfg.epochs) };
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.epochs {
        let mut rng = substream(cfg.seed, Stream::Shuffle, epoch as u64);
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0f64;
        for iter in 0..iters {
            let idx = &order[iter * cfg.batch_size..(iter + 1) * cfg.batch_size];
            let images = gather(&data.images, idx);
            let labels = gather(&data.labels, idx);
            let (probs, cache) = model.forward(&images, crate::layers::Mode::Train)?;
            let (loss, grad) = if cfg.num_classes == 2 {
                sigmoid_ce_loss(&probs, &labels)?
            } else {
                weighted_softmax_ce_loss(&probs, &labels, &cfg.class_weights)?
            };
            if !loss.is_finite() {
                return Err(Error::non_finite(
                    "train",
                    format!("loss at epoch {}, iteration {}", epoch + 1, iter + 1),
                ));
            }
            let grads = model.backward(&cache, &grad)?;
            adam_step(model, &grads, &mut state, cfg)?;
            epoch_loss += loss;
        }
        trace.epoch_loss.push(epoch_loss / iters as f64);
    }
    Ok(trace)
}

/// Copy the selected examples into a fresh batch tensor, in index order.
fn gather<T: Real>(t: &Tensor4<T>, idx: &[usize]) -> Tensor4<T> {
    let len = t.example_len();
    let mut out = Tensor4::zeros(idx.len(), t.h, t.w, t.c);
    for (slot, &i) in idx.iter().enumerate() {
        out.data[slot * len..(slot + 1) * len].copy_from_slice(&t.data[i * len..(i + 1) * len]);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::Mode;
    use crate::network::{init_params, ArchId, LayerSpec, NetworkSpec};
    use crate::rng::{substream, Stream};
    use rand::Rng;

    fn tensor_from(b: usize, h: usize, w: usize, c: usize, vals: &[f64]) -> Tensor4<f64> {
        Tensor4::from_vec(b, h, w, c, vals.iter().copied().collect()).unwrap()
    }

    #[test]
    fn sigmoid_loss_at_half_is_ln2() {
        let y_hat = tensor_from(1, 1, 1, 1, &[0.5]);
        let y = tensor_from(1, 1, 1, 1, &[1.0]);
        let (loss, grad) = sigmoid_ce_loss(&y_hat, &y).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12, "got {loss}");
        assert!((grad.data[0] - (-0.5)).abs() < 1e-12, "gradient (ŷ−y)/count, got {}", grad.data[0]);
    }

    #[test]
    fn sigmoid_loss_vanishes_for_perfect_prediction() {
        let y_hat = tensor_from(1, 1, 2, 1, &[1.0 - 1e-9, 1e-9]);
        let y = tensor_from(1, 1, 2, 1, &[1.0, 0.0]);
        let (loss, _) = sigmoid_ce_loss(&y_hat, &y).unwrap();
        assert!(loss >= 0.0 && loss < 1e-6, "got {loss}");
        // Fully saturated predictions still give a finite (huge) penalty.
        let y_hat = tensor_from(1, 1, 2, 1, &[1.0, 0.0]);
        let (loss, _) = sigmoid_ce_loss(&y_hat, &y).unwrap();
        assert_eq!(loss, 0.0, "exactly right saturated predictions score zero");
        let y_wrong = tensor_from(1, 1, 2, 1, &[0.0, 1.0]);
        let (loss, _) = sigmoid_ce_loss(&y_wrong, &y).unwrap();
        assert!(loss.is_finite() && loss > 100.0, "saturated mistakes are finite, got {loss}");
    }

    #[test]
    fn sigmoid_loss_rejects_soft_labels() {
        let y_hat = tensor_from(1, 1, 1, 1, &[0.5]);
        let y = tensor_from(1, 1, 1, 1, &[0.25]);
        assert!(sigmoid_ce_loss(&y_hat, &y).is_err());
    }

    #[test]
    fn sigmoid_loss_matches_direct_evaluation_and_finite_differences() {
        let mut rng = substream(7, Stream::Synth, 0);
        // Scores → probabilities → loss, with FD on the scores.
        let scores: Vec<f64> = (0..2 * 3 * 4).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let labels: Vec<f64> = (0..2 * 3 * 4).map(|_| f64::from(rng.gen_range(0..2))).collect();
        let y = tensor_from(2, 3, 4, 1, &labels);
        let fwd = |s: &[f64]| -> (f64, Tensor4<f64>) {
            let probs: Vec<f64> = s.iter().map(|&z| 1.0 / (1.0 + (-z).exp())).collect();
            let y_hat = tensor_from(2, 3, 4, 1, &probs);
            sigmoid_ce_loss(&y_hat, &y).unwrap()
        };
        let (loss, grad) = fwd(&scores);
        // Direct 64-bit evaluation of the per-pixel formula.
        let direct: f64 = scores
            .iter()
            .zip(&labels)
            .map(|(&z, &t)| {
                let p = 1.0 / (1.0 + (-z).exp());
                -t * p.ln() - (1.0 - t) * (1.0 - p).ln()
            })
            .sum::<f64>()
            / scores.len() as f64;
        assert!((loss - direct).abs() < 1e-6, "loss {loss} vs direct {direct}");
        let h = 1e-6;
        for i in 0..scores.len() {
            let mut plus = scores.clone();
            plus[i] += h;
            let mut minus = scores.clone();
            minus[i] -= h;
            let fd = (fwd(&plus).0 - fwd(&minus).0) / (2.0 * h);
            assert!(
                (grad.data[i] - fd).abs() < 1e-6,
                "score {i}: analytic {} vs fd {fd}",
                grad.data[i]
            );
        }
    }

    #[test]
    fn weighted_loss_hand_values() {
        // One boundary pixel predicted at 0.5 for its true class.
        let y_hat = tensor_from(1, 1, 1, 3, &[0.3, 0.5, 0.2]);
        let y = tensor_from(1, 1, 1, 3, &[0.0, 1.0, 0.0]);
        let (loss, _) = weighted_softmax_ce_loss(&y_hat, &y, &[1.0, 60.0, 1.0]).unwrap();
        assert!((loss - 60.0 * std::f64::consts::LN_2).abs() < 1e-9, "got {loss}");
        // A background pixel at 0.5 carries weight 1.
        let y_bg = tensor_from(1, 1, 1, 3, &[0.0, 0.0, 1.0]);
        let y_hat_bg = tensor_from(1, 1, 1, 3, &[0.3, 0.2, 0.5]);
        let (loss, _) = weighted_softmax_ce_loss(&y_hat_bg, &y_bg, &[1.0, 60.0, 1.0]).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-9, "got {loss}");
    }

    #[test]
    fn unit_weights_reduce_to_plain_cross_entropy() {
        let mut rng = substream(8, Stream::Synth, 1);
        let n = 5 * 4;
        let mut probs = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..n {
            let a: f64 = rng.gen_range(0.05..0.9);
            let b: f64 = rng.gen_range(0.05..(0.95 - a));
            probs.extend_from_slice(&[a, b, 1.0 - a - b]);
            let t = rng.gen_range(0..3);
            labels.extend((0..3).map(|k| if k == t { 1.0 } else { 0.0 }));
        }
        let y_hat = tensor_from(1, 5, 4, 3, &probs);
        let y = tensor_from(1, 5, 4, 3, &labels);
        let (loss, _) = weighted_softmax_ce_loss(&y_hat, &y, &[1.0, 1.0, 1.0]).unwrap();
        let plain: f64 = probs
            .chunks_exact(3)
            .zip(labels.chunks_exact(3))
            .map(|(p, t)| -(0..3).map(|k| t[k] * p[k].ln()).sum::<f64>())
            .sum::<f64>()
            / n as f64;
        assert!((loss - plain).abs() < 1e-6, "weighted {loss} vs plain {plain}");
    }

    #[test]
    fn scaling_weights_scales_loss_and_gradient_exactly() {
        let y_hat = tensor_from(1, 2, 2, 3, &[0.5, 0.3, 0.2, 0.1, 0.8, 0.1, 0.2, 0.2, 0.6, 0.7, 0.1, 0.2]);
        let y = tensor_from(1, 2, 2, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
        let (l1, g1) = weighted_softmax_ce_loss(&y_hat, &y, &[1.0, 60.0, 1.0]).unwrap();
        let (l2, g2) = weighted_softmax_ce_loss(&y_hat, &y, &[2.0, 120.0, 2.0]).unwrap();
        assert_eq!(l2, 2.0 * l1, "doubling every weight doubles the loss exactly");
        for (a, b) in g1.data.iter().zip(&g2.data) {
            assert_eq!(*b, 2.0 * *a, "and the gradient");
        }
    }

    #[test]
    fn weighted_loss_rejects_non_one_hot_labels() {
        let y_hat = tensor_from(1, 1, 1, 3, &[0.3, 0.3, 0.4]);
        for bad in [[0.5, 0.5, 0.0], [1.0, 1.0, 0.0], [0.0, 0.0, 0.0]] {
            let y = tensor_from(1, 1, 1, 3, &bad);
            assert!(
                weighted_softmax_ce_loss(&y_hat, &y, &[1.0, 1.0, 1.0]).is_err(),
                "labels {bad:?} should be rejected"
            );
        }
    }

    /// A one-parameter model for optimizer unit tests: arch1 with everything
    /// ignored except a single probed weight would be overkill, so these tests
    /// drive `adam_step` through a real (tiny) model instead.
    fn tiny_model(seed: u64) -> Model<f64> {
        let spec = NetworkSpec {
            name: ArchId::Arch1,
            layers: vec![LayerSpec::terminal(2)],
            num_classes: 2,
        };
        init_params(&spec, seed)
    }

    fn zero_grads(model: &Model<f64>) -> Gradients<f64> {
        let state = AdamState::new(model);
        state.m // zero-initialized, congruent by construction
    }

    #[test]
    fn adam_leaves_params_alone_for_zero_gradient() {
        let mut m = tiny_model(1);
        let before = m.layers.clone();
        let grads = zero_grads(&m);
        let mut state = AdamState::new(&m);
        let cfg = TrainConfig::new(2);
        adam_step(&mut m, &grads, &mut state, &cfg).unwrap();
        for (a, b) in m.layers.iter().zip(&before) {
            if let (LayerParams::TerminalConv(ca), LayerParams::TerminalConv(cb)) = (a, b) {
                assert_eq!(ca.kernel, cb.kernel);
                assert_eq!(ca.bias, cb.bias);
            }
        }
        assert_eq!(state.t, 1, "the step counter still advances");
    }

    #[test]
    fn adam_two_hand_computed_steps() {
        // Single weight, g = 1, lr = 0.1: each bias-corrected step moves the
        // parameter by 0.1/(1 + 1e-8); two steps from 0 land at
        // −0.19999999800000002 (64-bit hand calculation).
        let mut m = tiny_model(2);
        if let LayerParams::TerminalConv(c) = &mut m.layers[0] {
            c.kernel = vec![0.0; c.kernel.len()];
        }
        let mut grads = zero_grads(&m);
        grads.layers[0].kernel[0] = 1.0;
        let mut state = AdamState::new(&m);
        let mut cfg = TrainConfig::new(2);
        cfg.learning_rate = 0.1;
        adam_step(&mut m, &grads, &mut state, &cfg).unwrap();
        adam_step(&mut m, &grads, &mut state, &cfg).unwrap();
        let LayerParams::TerminalConv(c) = &m.layers[0] else { unreachable!() };
        let expect = -0.19999999800000002;
        assert!(
            (c.kernel[0] - expect).abs() < 1e-9,
            "two steps gave {}, hand calculation {expect}",
            c.kernel[0]
        );
    }

    #[test]
    fn adam_constant_gradient_approaches_lr_sized_steps() {
        let mut m = tiny_model(3);
        let mut grads = zero_grads(&m);
        grads.layers[0].kernel[0] = 0.37; // any constant
        let mut state = AdamState::new(&m);
        let cfg = TrainConfig::new(2);
        let mut prev = match &m.layers[0] {
            LayerParams::TerminalConv(c) => c.kernel[0],
            _ => unreachable!(),
        };
        let mut last_step = 0.0;
        for _ in 0..500 {
            adam_step(&mut m, &grads, &mut state, &cfg).unwrap();
            let cur = match &m.layers[0] {
                LayerParams::TerminalConv(c) => c.kernel[0],
                _ => unreachable!(),
            };
            last_step = prev - cur;
            prev = cur;
        }
        assert!(
            (last_step - cfg.learning_rate).abs() < 1e-6,
            "per-step magnitude {last_step} should approach lr {}",
            cfg.learning_rate
        );
    }

    #[test]
    fn adam_rejects_non_finite_gradients() {
        let mut m = tiny_model(4);
        let mut grads = zero_grads(&m);
        grads.layers[0].kernel[0] = f64::NAN;
        let mut state = AdamState::new(&m);
        let cfg = TrainConfig::new(2);
        let err = adam_step(&mut m, &grads, &mut state, &cfg).unwrap_err();
        assert!(err.to_string().contains("layer 0"), "unexpected message: {err}");
    }

    #[test]
    fn iteration_count_drops_ragged_tail() {
        assert_eq!(iters_per_epoch(100, 16), 6);
        assert_eq!(iters_per_epoch(16, 16), 1);
        assert_eq!(iters_per_epoch(15, 16), 0);
    }

    /// Toy hourglass used by the end-to-end gradient checks: conv(3×3/4 with
    /// batch norm) → pool → tconv(4) → terminal head, on 8×8 inputs.
    fn toy_spec(num_classes: u8) -> NetworkSpec {
        NetworkSpec {
            name: ArchId::MangoTreeNet,
            layers: vec![
                LayerSpec::conv(3, 4),
                LayerSpec::maxpool(),
                LayerSpec::tconv(4),
                LayerSpec::terminal(num_classes),
            ],
            num_classes,
        }
    }

    /// Borrow one scalar parameter: `slot` selects kernel/bias/gamma/beta.
    fn param_mut(m: &mut Model<f64>, li: usize, slot: usize, pi: usize) -> &mut f64 {
        let arr: &mut Vec<f64> = match (&mut m.layers[li], slot) {
            (LayerParams::Conv { conv, .. }, 0) => &mut conv.kernel,
            (LayerParams::Conv { conv, .. }, 1) => &mut conv.bias,
            (LayerParams::Conv { bn: Some(bn), .. }, 2) => &mut bn.gamma,
            (LayerParams::Conv { bn: Some(bn), .. }, 3) => &mut bn.beta,
            (LayerParams::TConv(c), 0) | (LayerParams::TerminalConv(c), 0) => &mut c.kernel,
            (LayerParams::TConv(c), 1) | (LayerParams::TerminalConv(c), 1) => &mut c.bias,
            _ => unreachable!("empty gradient arrays are skipped"),
        };
        &mut arr[pi]
    }

    /// Central finite differences through the whole network and loss for one
    /// seed; checks every parameter of every layer.
    fn check_end_to_end_gradients(num_classes: u8, seed: u64, tol: f64) {
        let spec = toy_spec(num_classes);
        let mut model: Model<f64> = init_params(&spec, seed);
        let mut rng = substream(seed, Stream::Synth, 99);
        let mut x = Tensor4::<f64>::zeros(2, 8, 8, 3);
        for v in &mut x.data {
            *v = rng.gen::<f64>();
        }
        let label_c = if num_classes == 2 { 1 } else { 3 };
        let mut y = Tensor4::<f64>::zeros(2, 8, 8, label_c);
        if num_classes == 2 {
            for v in &mut y.data {
                *v = f64::from(rng.gen_range(0..2));
            }
        } else {
            for px in y.data.chunks_exact_mut(3) {
                px[rng.gen_range(0..3)] = 1.0;
            }
        }
        let weights = [1.0, 60.0, 1.0];
        let loss_of = |model: &mut Model<f64>| -> f64 {
            let (probs, _) = model.forward(&x, Mode::Train).unwrap();
            if num_classes == 2 {
                sigmoid_ce_loss(&probs, &y).unwrap().0
            } else {
                weighted_softmax_ce_loss(&probs, &y, &weights).unwrap().0
            }
        };
        let (probs, cache) = model.forward(&x, Mode::Train).unwrap();
        let grad = if num_classes == 2 {
            sigmoid_ce_loss(&probs, &y).unwrap().1
        } else {
            weighted_softmax_ce_loss(&probs, &y, &weights).unwrap().1
        };
        let analytic = model.backward(&cache, &grad).unwrap();

        // Small enough that perturbations almost never cross a ReLU or pool
        // kink (which would bias the difference by O(h)); 64-bit evaluation
        // keeps roundoff far below the tolerance at this step size.
        let h = 1e-6;
        let n_layers = model.layers.len();
        for li in 0..n_layers {
            // (array selector, analytic gradient) pairs for this layer
            for (slot, ga) in [
                (0, analytic.layers[li].kernel.clone()),
                (1, analytic.layers[li].bias.clone()),
                (2, analytic.layers[li].gamma.clone()),
                (3, analytic.layers[li].beta.clone()),
            ] {
                for pi in 0..ga.len() {
                    let orig = *param_mut(&mut model, li, slot, pi);
                    *param_mut(&mut model, li, slot, pi) = orig + h;
                    let up = loss_of(&mut model);
                    *param_mut(&mut model, li, slot, pi) = orig - h;
                    let down = loss_of(&mut model);
                    *param_mut(&mut model, li, slot, pi) = orig;
                    let fd = (up - down) / (2.0 * h);
                    let denom = (ga[pi].abs() + fd.abs()).max(1e-3);
                    assert!(
                        (ga[pi] - fd).abs() / denom < tol,
                        "{num_classes}-class layer {li} slot {slot} param {pi}: analytic {} vs fd {fd}",
                        ga[pi]
                    );
                }
            }
        }
    }

    #[test]
    fn end_to_end_gradients_match_finite_differences_2_class() {
        for seed in [1, 2, 3] {
            check_end_to_end_gradients(2, seed, 1e-3);
        }
    }

    #[test]
    fn end_to_end_gradients_match_finite_differences_3_class() {
        for seed in [4, 5, 6] {
            check_end_to_end_gradients(3, seed, 1e-3);
        }
    }

    /// 16 identical, trivially separable patches: bright mango-green left
    /// half, dark soil right half.
    fn separable_set() -> TrainSet<f32> {
        let (h, w) = (16, 16);
        let mut img = Tensor4::<f32>::zeros(1, h, w, 3);
        let mut lab = Tensor4::<f32>::zeros(1, h, w, 1);
        for y in 0..h {
            for x in 0..w {
                let left = x < w / 2;
                let px = (y * w + x) * 3;
                if left {
                    img.data[px] = 0.2;
                    img.data[px + 1] = 0.8;
                    img.data[px + 2] = 0.2;
                    lab.data[y * w + x] = 1.0;
                } else {
                    img.data[px] = 0.45;
                    img.data[px + 1] = 0.35;
                    img.data[px + 2] = 0.25;
                }
            }
        }
        let images = Tensor4::from_vec(16, h, w, 3, img.data.repeat(16)).unwrap();
        let labels = Tensor4::from_vec(16, h, w, 1, lab.data.repeat(16)).unwrap();
        TrainSet::new(images, labels).unwrap()
    }

    #[test]
    fn training_separates_a_trivial_dataset() {
        let spec = NetworkSpec::build(ArchId::Arch1, 2).unwrap();
        let mut model: Model<f32> = init_params(&spec, 1);
        let mut cfg = TrainConfig::new(2);
        cfg.epochs = 30;
        cfg.learning_rate = 1e-2; // tiny dataset; the default 1e-3 also converges, just slower
        cfg.seed = 1;
        let trace = train(&mut model, &separable_set(), &cfg).unwrap();
        assert_eq!(trace.epoch_loss.len(), 30);
        let last = *trace.epoch_loss.last().unwrap();
        assert!(last < 0.05, "final epoch loss {last} should fall below 0.05");
        for layer in &model.layers {
            if let LayerParams::Conv { conv, .. } = layer {
                assert!(conv.kernel.iter().all(|v| v.is_finite()), "training kept weights finite");
            }
        }
    }

    #[test]
    fn training_is_bit_deterministic_given_a_seed() {
        let spec = NetworkSpec::build(ArchId::Arch1, 2).unwrap();
        let run = || {
            let mut model: Model<f32> = init_params(&spec, 9);
            let mut cfg = TrainConfig::new(2);
            cfg.epochs = 3;
            cfg.seed = 5;
            let trace = train(&mut model, &separable_set(), &cfg).unwrap();
            (trace, model)
        };
        let (t1, m1) = run();
        let (t2, m2) = run();
        assert_eq!(t1, t2, "loss traces must be bit-identical");
        for (a, b) in m1.layers.iter().zip(&m2.layers) {
            if let (LayerParams::Conv { conv: ca, .. }, LayerParams::Conv { conv: cb, .. }) = (a, b) {
                assert_eq!(ca.kernel, cb.kernel, "trained weights must be bit-identical");
            }
        }
    }

    #[test]
    fn loss_trace_csv_has_header_and_six_significant_digits() {
        let trace = LossTrace { epoch_loss: vec![0.69314718056, 0.0123456789] };
        let csv = trace.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "epoch,avg_loss");
        assert_eq!(lines[1], "1,6.93147e-1");
        assert_eq!(lines[2], "2,1.23457e-2");
    }
}
