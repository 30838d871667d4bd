//! From-scratch convolutional network: two same-padded conv/pool stages and
//! two dense layers, generic over the scalar so the same code runs in `f32`
//! for training and `f64` for finite-difference verification.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{real, softmax, Classifier, Real};
use crate::error::{Error, Result};
use crate::warp::Image;

/// Network dimensions. Both spatial dims must be divisible by 4 (two 2x2
/// pooling stages) and the kernel must be odd so same-padding is symmetric.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CnnConfig {
    pub input_h: usize,
    pub input_w: usize,
    pub conv1_channels: usize,
    pub conv2_channels: usize,
    pub kernel: usize,
    pub fc1_units: usize,
    pub num_classes: usize,
}

impl CnnConfig {
    /// Full-scale configuration: 32/64 conv channels, 1024-unit dense layer.
    pub fn full() -> Self {
        Self {
            input_h: 28,
            input_w: 28,
            conv1_channels: 32,
            conv2_channels: 64,
            kernel: 5,
            fc1_units: 1024,
            num_classes: 10,
        }
    }

    /// Desk-scale configuration: 8/16 conv channels, 128-unit dense layer.
    pub fn small() -> Self {
        Self {
            input_h: 28,
            input_w: 28,
            conv1_channels: 8,
            conv2_channels: 16,
            kernel: 5,
            fc1_units: 128,
            num_classes: 10,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_h % 4 != 0 || self.input_w % 4 != 0 {
            return Err(Error::Config(format!(
                "input {}x{} not divisible by 4",
                self.input_h, self.input_w
            )));
        }
        if self.kernel % 2 == 0 || self.kernel == 0 {
            return Err(Error::Config(format!("kernel {} must be odd", self.kernel)));
        }
        if [self.conv1_channels, self.conv2_channels, self.fc1_units, self.num_classes]
            .contains(&0)
        {
            return Err(Error::Config("zero-sized layer".into()));
        }
        Ok(())
    }

    /// Flattened size after the second pooling stage.
    pub fn fc_input(&self) -> usize {
        self.conv2_channels * (self.input_h / 4) * (self.input_w / 4)
    }

    pub fn param_count(&self) -> usize {
        let k2 = self.kernel * self.kernel;
        self.conv1_channels * k2
            + self.conv1_channels
            + self.conv2_channels * self.conv1_channels * k2
            + self.conv2_channels
            + self.fc1_units * self.fc_input()
            + self.fc1_units
            + self.num_classes * self.fc1_units
            + self.num_classes
    }
}

/// Parameter tensors in canonical order; shared by the model, its
/// gradients, and optimizer state.
///
/// Layouts: conv weights `[out_ch][in_ch][ky][kx]`, dense weights
/// `[out][in]`, feature maps `[ch][y][x]`, all row-major.
#[derive(Debug, Clone)]
pub struct Cnn<T> {
    cfg: CnnConfig,
    conv1_w: Vec<T>,
    conv1_b: Vec<T>,
    conv2_w: Vec<T>,
    conv2_b: Vec<T>,
    fc1_w: Vec<T>,
    fc1_b: Vec<T>,
    fc2_w: Vec<T>,
    fc2_b: Vec<T>,
}

/// Per-tensor gradients in the same canonical order as [`Cnn::tensors`].
pub struct Gradients<T> {
    tensors: Vec<Vec<T>>,
}

impl<T: Real> Gradients<T> {
    fn zeros(cfg: &CnnConfig) -> Self {
        let k2 = cfg.kernel * cfg.kernel;
        let sizes = [
            cfg.conv1_channels * k2,
            cfg.conv1_channels,
            cfg.conv2_channels * cfg.conv1_channels * k2,
            cfg.conv2_channels,
            cfg.fc1_units * cfg.fc_input(),
            cfg.fc1_units,
            cfg.num_classes * cfg.fc1_units,
            cfg.num_classes,
        ];
        Self { tensors: sizes.iter().map(|n| vec![T::zero(); *n]).collect() }
    }

    pub fn tensors(&self) -> &[Vec<T>] {
        &self.tensors
    }

    fn scale(&mut self, factor: T) {
        for t in &mut self.tensors {
            for g in t {
                *g *= factor;
            }
        }
    }
}

const INIT_STD: f64 = 0.1;
const INIT_BIAS: f64 = 0.1;

impl<T: Real> Cnn<T> {
    /// Fresh network: weights from a truncated normal (std 0.1, redrawn
    /// beyond two standard deviations), biases at 0.1, reproducible from
    /// the seed.
    pub fn new(cfg: CnnConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut draw = |n: usize| -> Vec<T> {
            (0..n)
                .map(|_| {
                    let z = loop {
                        let z = normal.sample(&mut rng);
                        if z.abs() <= 2.0 * INIT_STD {
                            break z;
                        }
                    };
                    real(z)
                })
                .collect()
        };
        let k2 = cfg.kernel * cfg.kernel;
        let conv1_w = draw(cfg.conv1_channels * k2);
        let conv2_w = draw(cfg.conv2_channels * cfg.conv1_channels * k2);
        let fc1_w = draw(cfg.fc1_units * cfg.fc_input());
        let fc2_w = draw(cfg.num_classes * cfg.fc1_units);
        Ok(Self {
            conv1_b: vec![real(INIT_BIAS); cfg.conv1_channels],
            conv2_b: vec![real(INIT_BIAS); cfg.conv2_channels],
            fc1_b: vec![real(INIT_BIAS); cfg.fc1_units],
            fc2_b: vec![real(INIT_BIAS); cfg.num_classes],
            conv1_w,
            conv2_w,
            fc1_w,
            fc2_w,
            cfg,
        })
    }

    pub fn config(&self) -> &CnnConfig {
        &self.cfg
    }

    pub fn tensors(&self) -> [&[T]; 8] {
        [
            &self.conv1_w,
            &self.conv1_b,
            &self.conv2_w,
            &self.conv2_b,
            &self.fc1_w,
            &self.fc1_b,
            &self.fc2_w,
            &self.fc2_b,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Vec<T>; 8] {
        [
            &mut self.conv1_w,
            &mut self.conv1_b,
            &mut self.conv2_w,
            &mut self.conv2_b,
            &mut self.fc1_w,
            &mut self.fc1_b,
            &mut self.fc2_w,
            &mut self.fc2_b,
        ]
    }

    pub fn param_count(&self) -> usize {
        self.cfg.param_count()
    }

    /// Reads a parameter by its position in the flattened tensor list.
    pub fn param(&self, mut index: usize) -> T {
        for t in self.tensors() {
            if index < t.len() {
                return t[index];
            }
            index -= t.len();
        }
        panic!("parameter index out of range");
    }

    pub fn set_param(&mut self, mut index: usize, value: T) {
        for t in self.tensors_mut() {
            if index < t.len() {
                t[index] = value;
                return;
            }
            index -= t.len();
        }
        panic!("parameter index out of range");
    }

    fn image_to_input(&self, image: &Image) -> Vec<T> {
        image.pixels().iter().map(|p| real(f64::from(*p))).collect()
    }

    /// Class logits for one image.
    pub fn logits_generic(&self, image: &Image) -> Vec<T> {
        let cfg = &self.cfg;
        let (h, w) = (cfg.input_h, cfg.input_w);
        let input = self.image_to_input(image);

        let mut a1 = conv2d_same(&input, 1, h, w, &self.conv1_w, &self.conv1_b, cfg.conv1_channels, cfg.kernel);
        relu_in_place(&mut a1);
        let (p1, _) = maxpool2(&a1, cfg.conv1_channels, h, w);

        let (h2, w2) = (h / 2, w / 2);
        let mut a2 = conv2d_same(&p1, cfg.conv1_channels, h2, w2, &self.conv2_w, &self.conv2_b, cfg.conv2_channels, cfg.kernel);
        relu_in_place(&mut a2);
        let (p2, _) = maxpool2(&a2, cfg.conv2_channels, h2, w2);

        let mut f1 = dense(&self.fc1_w, &self.fc1_b, &p2);
        relu_in_place(&mut f1);
        dense(&self.fc2_w, &self.fc2_b, &f1)
    }

    /// Mean cross-entropy over a batch, forward only.
    pub fn batch_mean_loss(&self, batch: &[(&Image, usize)]) -> Result<T> {
        if batch.is_empty() {
            return Err(Error::Shape("empty batch".into()));
        }
        let mut total = T::zero();
        for (image, label) in batch {
            if *label >= self.cfg.num_classes {
                return Err(Error::Bounds(format!("label {label} out of range")));
            }
            let logits = self.logits_generic(image);
            total += super::cross_entropy(&logits, *label);
        }
        Ok(total / real(batch.len() as f64))
    }

    /// Mean loss and mean parameter gradients over a batch via
    /// backpropagation.
    pub fn batch_gradients(&self, batch: &[(&Image, usize)]) -> Result<(Gradients<T>, T)> {
        if batch.is_empty() {
            return Err(Error::Shape("empty batch".into()));
        }
        let mut grads = Gradients::zeros(&self.cfg);
        let mut total = T::zero();
        for (image, label) in batch {
            if *label >= self.cfg.num_classes {
                return Err(Error::Bounds(format!("label {label} out of range")));
            }
            total += self.accumulate_example(image, *label, &mut grads);
        }
        let inv = T::one() / real(batch.len() as f64);
        grads.scale(inv);
        Ok((grads, total * inv))
    }

    fn accumulate_example(&self, image: &Image, label: usize, grads: &mut Gradients<T>) -> T {
        let cfg = &self.cfg;
        let (h, w) = (cfg.input_h, cfg.input_w);
        let (h2, w2) = (h / 2, w / 2);
        let k = cfg.kernel;
        let input = self.image_to_input(image);

        // Forward, keeping everything backward needs.
        let conv1_pre = conv2d_same(&input, 1, h, w, &self.conv1_w, &self.conv1_b, cfg.conv1_channels, k);
        let mut r1 = conv1_pre.clone();
        relu_in_place(&mut r1);
        let (p1, arg1) = maxpool2(&r1, cfg.conv1_channels, h, w);

        let conv2_pre = conv2d_same(&p1, cfg.conv1_channels, h2, w2, &self.conv2_w, &self.conv2_b, cfg.conv2_channels, k);
        let mut r2 = conv2_pre.clone();
        relu_in_place(&mut r2);
        let (p2, arg2) = maxpool2(&r2, cfg.conv2_channels, h2, w2);

        let fc1_pre = dense(&self.fc1_w, &self.fc1_b, &p2);
        let mut f1 = fc1_pre.clone();
        relu_in_place(&mut f1);
        let logits = dense(&self.fc2_w, &self.fc2_b, &f1);
        let loss = super::cross_entropy(&logits, label);

        // d loss / d logits for softmax cross-entropy.
        let mut dlogits = softmax(&logits);
        dlogits[label] -= T::one();

        let mut tensors = grads.tensors.iter_mut();
        let (g_c1w, g_c1b) = (tensors.next().unwrap(), tensors.next().unwrap());
        let (g_c2w, g_c2b) = (tensors.next().unwrap(), tensors.next().unwrap());
        let (g_f1w, g_f1b) = (tensors.next().unwrap(), tensors.next().unwrap());
        let (g_f2w, g_f2b) = (tensors.next().unwrap(), tensors.next().unwrap());

        // fc2
        dense_backward(&f1, &dlogits, g_f2w, g_f2b);
        let mut df1 = vec![T::zero(); cfg.fc1_units];
        dense_input_grad(&self.fc2_w, &dlogits, &mut df1);
        relu_backward(&fc1_pre, &mut df1);

        // fc1
        dense_backward(&p2, &df1, g_f1w, g_f1b);
        let mut dp2 = vec![T::zero(); cfg.fc_input()];
        dense_input_grad(&self.fc1_w, &df1, &mut dp2);

        // pool2 + relu2
        let mut dr2 = vec![T::zero(); cfg.conv2_channels * h2 * w2];
        unpool2(&dp2, &arg2, &mut dr2);
        relu_backward(&conv2_pre, &mut dr2);

        // conv2
        conv2d_weight_grad(&p1, cfg.conv1_channels, h2, w2, &dr2, cfg.conv2_channels, k, g_c2w, g_c2b);
        let mut dp1 = vec![T::zero(); cfg.conv1_channels * h2 * w2];
        conv2d_input_grad(&self.conv2_w, cfg.conv1_channels, h2, w2, &dr2, cfg.conv2_channels, k, &mut dp1);

        // pool1 + relu1
        let mut dr1 = vec![T::zero(); cfg.conv1_channels * h * w];
        unpool2(&dp1, &arg1, &mut dr1);
        relu_backward(&conv1_pre, &mut dr1);

        // conv1 (input gradient not needed: pixels are data, not params)
        conv2d_weight_grad(&input, 1, h, w, &dr1, cfg.conv1_channels, k, g_c1w, g_c1b);

        loss
    }
}

impl Classifier for Cnn<f32> {
    fn num_classes(&self) -> usize {
        self.cfg.num_classes
    }

    fn logits(&self, image: &Image) -> Vec<f32> {
        self.logits_generic(image)
    }
}

fn relu_in_place<T: Real>(xs: &mut [T]) {
    for x in xs {
        if *x < T::zero() {
            *x = T::zero();
        }
    }
}

/// Zeroes gradient entries where the pre-activation was not positive.
fn relu_backward<T: Real>(pre: &[T], grad: &mut [T]) {
    for (g, p) in grad.iter_mut().zip(pre) {
        if *p <= T::zero() {
            *g = T::zero();
        }
    }
}

/// Same-padded 2-D correlation of `[in_ch][h][w]` features with
/// `[out_ch][in_ch][k][k]` weights.
fn conv2d_same<T: Real>(
    input: &[T],
    in_ch: usize,
    h: usize,
    w: usize,
    weights: &[T],
    bias: &[T],
    out_ch: usize,
    k: usize,
) -> Vec<T> {
    let pad = k / 2;
    let mut out = vec![T::zero(); out_ch * h * w];
    for oc in 0..out_ch {
        out[oc * h * w..(oc + 1) * h * w].fill(bias[oc]);
    }
    for oc in 0..out_ch {
        for ic in 0..in_ch {
            let w_base = ((oc * in_ch) + ic) * k * k;
            for ky in 0..k {
                let y_lo = pad.saturating_sub(ky);
                let y_hi = (h + pad - ky).min(h);
                for y in y_lo..y_hi {
                    let in_row = &input[(ic * h + y + ky - pad) * w..][..w];
                    let out_row = &mut out[(oc * h + y) * w..][..w];
                    for kx in 0..k {
                        let wgt = weights[w_base + ky * k + kx];
                        let x_lo = pad.saturating_sub(kx);
                        let x_hi = (w + pad - kx).min(w);
                        for x in x_lo..x_hi {
                            out_row[x] += wgt * in_row[x + kx - pad];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Accumulates weight and bias gradients of [`conv2d_same`] given the
/// output-side gradient.
#[allow(clippy::too_many_arguments)]
fn conv2d_weight_grad<T: Real>(
    input: &[T],
    in_ch: usize,
    h: usize,
    w: usize,
    dout: &[T],
    out_ch: usize,
    k: usize,
    g_weights: &mut [T],
    g_bias: &mut [T],
) {
    let pad = k / 2;
    for oc in 0..out_ch {
        let plane = &dout[oc * h * w..(oc + 1) * h * w];
        g_bias[oc] += plane.iter().fold(T::zero(), |a, b| a + *b);
        for ic in 0..in_ch {
            let w_base = ((oc * in_ch) + ic) * k * k;
            for ky in 0..k {
                let y_lo = pad.saturating_sub(ky);
                let y_hi = (h + pad - ky).min(h);
                for kx in 0..k {
                    let x_lo = pad.saturating_sub(kx);
                    let x_hi = (w + pad - kx).min(w);
                    let mut acc = T::zero();
                    for y in y_lo..y_hi {
                        let in_row = &input[(ic * h + y + ky - pad) * w..][..w];
                        let d_row = &plane[y * w..][..w];
                        for x in x_lo..x_hi {
                            acc += d_row[x] * in_row[x + kx - pad];
                        }
                    }
                    g_weights[w_base + ky * k + kx] += acc;
                }
            }
        }
    }
}

/// Propagates the output-side gradient of [`conv2d_same`] back to its
/// input (the transpose of the forward index map).
fn conv2d_input_grad<T: Real>(
    weights: &[T],
    in_ch: usize,
    h: usize,
    w: usize,
    dout: &[T],
    out_ch: usize,
    k: usize,
    din: &mut [T],
) {
    let pad = k / 2;
    for oc in 0..out_ch {
        for ic in 0..in_ch {
            let w_base = ((oc * in_ch) + ic) * k * k;
            for ky in 0..k {
                let y_lo = pad.saturating_sub(ky);
                let y_hi = (h + pad - ky).min(h);
                for y in y_lo..y_hi {
                    let d_row = &dout[(oc * h + y) * w..][..w];
                    let din_row = &mut din[(ic * h + y + ky - pad) * w..][..w];
                    for kx in 0..k {
                        let wgt = weights[w_base + ky * k + kx];
                        let x_lo = pad.saturating_sub(kx);
                        let x_hi = (w + pad - kx).min(w);
                        for x in x_lo..x_hi {
                            din_row[x + kx - pad] += wgt * d_row[x];
                        }
                    }
                }
            }
        }
    }
}

/// 2x2 max pooling; returns pooled features and, per pooled cell, the flat
/// index of its source (first occurrence wins ties).
fn maxpool2<T: Real>(input: &[T], ch: usize, h: usize, w: usize) -> (Vec<T>, Vec<u32>) {
    debug_assert!(h % 2 == 0 && w % 2 == 0);
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![T::zero(); ch * oh * ow];
    let mut arg = vec![0u32; ch * oh * ow];
    for c in 0..ch {
        for y in 0..oh {
            for x in 0..ow {
                let mut best_idx = (c * h + 2 * y) * w + 2 * x;
                let mut best = input[best_idx];
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = (c * h + 2 * y + dy) * w + 2 * x + dx;
                    if input[idx] > best {
                        best = input[idx];
                        best_idx = idx;
                    }
                }
                let o = (c * oh + y) * ow + x;
                out[o] = best;
                arg[o] = best_idx as u32;
            }
        }
    }
    (out, arg)
}

/// Routes pooled-side gradients back to the recorded argmax positions.
fn unpool2<T: Real>(dpooled: &[T], arg: &[u32], dinput: &mut [T]) {
    for (g, idx) in dpooled.iter().zip(arg) {
        dinput[*idx as usize] += *g;
    }
}

/// `out = W x + b` with `[out][in]` row-major weights.
fn dense<T: Real>(weights: &[T], bias: &[T], input: &[T]) -> Vec<T> {
    let n_in = input.len();
    bias.iter()
        .enumerate()
        .map(|(o, b)| {
            let row = &weights[o * n_in..][..n_in];
            let mut acc = *b;
            for (w, x) in row.iter().zip(input) {
                acc += *w * *x;
            }
            acc
        })
        .collect()
}

/// Accumulates dense-layer weight/bias gradients.
fn dense_backward<T: Real>(input: &[T], dout: &[T], g_weights: &mut [T], g_bias: &mut [T]) {
    let n_in = input.len();
    for (o, d) in dout.iter().enumerate() {
        g_bias[o] += *d;
        let row = &mut g_weights[o * n_in..][..n_in];
        for (g, x) in row.iter_mut().zip(input) {
            *g += *d * *x;
        }
    }
}

/// `din = W^T dout` for a dense layer.
fn dense_input_grad<T: Real>(weights: &[T], dout: &[T], din: &mut [T]) {
    let n_in = din.len();
    for (o, d) in dout.iter().enumerate() {
        let row = &weights[o * n_in..][..n_in];
        for (di, w) in din.iter_mut().zip(row) {
            *di += *d * *w;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_digits;
    use crate::model::{predict, train_step, Optimizer, OptimizerKind};

    fn tiny_cfg() -> CnnConfig {
        CnnConfig {
            input_h: 12,
            input_w: 12,
            conv1_channels: 4,
            conv2_channels: 5,
            kernel: 5,
            fc1_units: 10,
            num_classes: 10,
        }
    }

    fn tiny_image(seed: u64) -> Image {
        let mut img = Image::zeros(12, 12);
        let mut state = seed.wrapping_mul(0x2545_F491_4F6C_DD1D).wrapping_add(1);
        for v in 0..12 {
            for u in 0..12 {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                img.set(u, v, ((state >> 40) & 0xFF) as f32 / 255.0);
            }
        }
        img
    }

    #[test]
    fn init_is_seeded_and_truncated() {
        let a = Cnn::<f32>::new(tiny_cfg(), 42).unwrap();
        let b = Cnn::<f32>::new(tiny_cfg(), 42).unwrap();
        let c = Cnn::<f32>::new(tiny_cfg(), 43).unwrap();
        assert_eq!(a.tensors()[0], b.tensors()[0]);
        assert_ne!(a.tensors()[0], c.tensors()[0]);
        for (i, t) in a.tensors().iter().enumerate() {
            if i % 2 == 0 {
                assert!(t.iter().all(|w| w.abs() <= 0.2), "weights beyond 2 std");
                assert!(t.iter().any(|w| w.abs() > 1e-4), "weights all near zero");
            } else {
                assert!(t.iter().all(|b| (*b - 0.1).abs() < 1e-7), "bias not 0.1");
            }
        }
    }

    #[test]
    fn param_count_matches_tensor_sizes() {
        let model = Cnn::<f32>::new(tiny_cfg(), 0).unwrap();
        let total: usize = model.tensors().iter().map(|t| t.len()).sum();
        assert_eq!(total, model.param_count());
        assert_eq!(total, tiny_cfg().param_count());
        assert_eq!(CnnConfig::full().fc_input(), 64 * 7 * 7);
        assert_eq!(CnnConfig::small().fc_input(), 16 * 7 * 7);
    }

    #[test]
    fn param_accessors_round_trip() {
        let mut model = Cnn::<f64>::new(tiny_cfg(), 1).unwrap();
        let n = model.param_count();
        for idx in [0, 1, n / 2, n - 1] {
            let old = model.param(idx);
            model.set_param(idx, old + 1.5);
            assert_eq!(model.param(idx), old + 1.5);
            model.set_param(idx, old);
        }
    }

    #[test]
    fn logits_have_class_count_and_respond_to_input() {
        let model = Cnn::<f32>::new(tiny_cfg(), 3).unwrap();
        let a = model.logits_generic(&tiny_image(0));
        let b = model.logits_generic(&tiny_image(9));
        assert_eq!(a.len(), 10);
        assert!(a.iter().all(|l| l.is_finite()));
        assert_ne!(a, b, "different inputs should give different logits");
    }

    #[test]
    fn conv_same_padding_matches_naive_oracle() {
        // Naive oracle: direct five-loop correlation with explicit bounds
        // checks, no row slicing.
        let (in_ch, h, w, out_ch, k) = (2usize, 6usize, 5usize, 3usize, 3usize);
        let pad = k / 2;
        let input: Vec<f64> = (0..in_ch * h * w).map(|i| (i as f64 * 0.37).sin()).collect();
        let weights: Vec<f64> =
            (0..out_ch * in_ch * k * k).map(|i| (i as f64 * 0.11).cos()).collect();
        let bias: Vec<f64> = (0..out_ch).map(|i| i as f64 * 0.5).collect();
        let got = conv2d_same(&input, in_ch, h, w, &weights, &bias, out_ch, k);
        for oc in 0..out_ch {
            for y in 0..h {
                for x in 0..w {
                    let mut want = bias[oc];
                    for ic in 0..in_ch {
                        for ky in 0..k {
                            for kx in 0..k {
                                let yy = y as i64 + ky as i64 - pad as i64;
                                let xx = x as i64 + kx as i64 - pad as i64;
                                if yy < 0 || xx < 0 || yy >= h as i64 || xx >= w as i64 {
                                    continue;
                                }
                                want += weights[((oc * in_ch + ic) * k + ky) * k + kx]
                                    * input[(ic * h + yy as usize) * w + xx as usize];
                            }
                        }
                    }
                    let idx = (oc * h + y) * w + x;
                    assert!(
                        (got[idx] - want).abs() < 1e-12,
                        "({oc},{y},{x}): {} vs {want}",
                        got[idx]
                    );
                }
            }
        }
    }

    #[test]
    fn maxpool_picks_maximum_and_first_tie() {
        let input = vec![
            1.0f64, 2.0, /**/ 0.0, 0.0, //
            3.0, 0.5, /**/ 0.0, 0.0,
        ];
        let (out, arg) = maxpool2(&input, 1, 2, 4);
        assert_eq!(out, vec![3.0, 0.0]);
        assert_eq!(arg[0], 4);
        // All-equal window: first scanned index (top-left) wins.
        assert_eq!(arg[1], 2);
    }

    #[test]
    fn gradients_match_central_differences() {
        let cfg = tiny_cfg();
        let mut model = Cnn::<f64>::new(cfg, 7).unwrap();
        let images = [tiny_image(1), tiny_image(2), tiny_image(3)];
        let batch: Vec<(&Image, usize)> = images.iter().zip([0usize, 4, 9]).collect();
        let (grads, _) = model.batch_gradients(&batch).unwrap();
        let flat_grads: Vec<f64> =
            grads.tensors().iter().flat_map(|t| t.iter().copied()).collect();

        let n = model.param_count();
        let step = 1e-5;
        // A spread of parameters from every tensor.
        let picks: Vec<usize> = (0..n).step_by(n / 60).collect();
        for idx in picks {
            let orig = model.param(idx);
            model.set_param(idx, orig + step);
            let up = model.batch_mean_loss(&batch).unwrap();
            model.set_param(idx, orig - step);
            let down = model.batch_mean_loss(&batch).unwrap();
            model.set_param(idx, orig);
            let numeric = (up - down) / (2.0 * step);
            let analytic = flat_grads[idx];
            let denom = numeric.abs().max(analytic.abs()).max(1e-8);
            let rel = (numeric - analytic).abs() / denom;
            assert!(
                rel < 1e-4,
                "param {idx}: analytic {analytic}, numeric {numeric}, rel {rel}"
            );
        }
    }

    #[test]
    fn sgd_applies_exact_update() {
        let cfg = tiny_cfg();
        let mut model = Cnn::<f64>::new(cfg, 0).unwrap();
        let before = model.param(0);
        let mut grads = Gradients::zeros(&cfg);
        grads.tensors[0][0] = 2.0;
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.5, &model);
        opt.step(&mut model, &grads);
        assert!((model.param(0) - (before - 1.0)).abs() < 1e-12);
    }

    #[test]
    fn adam_first_step_is_learning_rate_sized() {
        let cfg = tiny_cfg();
        let mut model = Cnn::<f64>::new(cfg, 0).unwrap();
        let before = model.param(0);
        let mut grads = Gradients::zeros(&cfg);
        grads.tensors[0][0] = 0.37;
        let mut opt = Optimizer::new(OptimizerKind::Adam, 1e-3, &model);
        opt.step(&mut model, &grads);
        let moved = before - model.param(0);
        assert!((moved - 1e-3).abs() < 1e-6, "first Adam step was {moved}");
    }

    #[test]
    fn training_overfits_a_tiny_batch() {
        let ds = synthetic_digits(8, 5);
        let cfg = CnnConfig {
            input_h: 28,
            input_w: 28,
            conv1_channels: 4,
            conv2_channels: 8,
            kernel: 5,
            fc1_units: 32,
            num_classes: 10,
        };
        let mut model = Cnn::<f32>::new(cfg, 11).unwrap();
        let mut opt = Optimizer::new(OptimizerKind::Adam, 1e-3, &model);
        let batch: Vec<(&Image, usize)> =
            ds.examples().iter().map(|e| (&e.image, usize::from(e.label))).collect();
        let first = train_step(&mut model, &mut opt, &batch).unwrap();
        let mut last = first;
        for _ in 0..60 {
            last = train_step(&mut model, &mut opt, &batch).unwrap();
        }
        assert!(
            last < first * 0.5,
            "loss did not drop: first {first}, last {last}"
        );
        let correct = batch
            .iter()
            .filter(|(img, label)| predict(&model.logits(img)) == *label)
            .count();
        assert!(correct >= 6, "only {correct}/8 fit after 60 steps");
    }

    #[test]
    fn train_step_flags_divergence() {
        let cfg = tiny_cfg();
        let mut model = Cnn::<f32>::new(cfg, 0).unwrap();
        model.set_param(0, f32::NAN);
        let img = tiny_image(0);
        let batch = vec![(&img, 0usize)];
        let mut opt = Optimizer::new(OptimizerKind::Adam, 1e-3, &model);
        let err = train_step(&mut model, &mut opt, &batch).unwrap_err();
        assert!(matches!(err, Error::Divergence(_)));
    }

    #[test]
    fn rejects_invalid_configs() {
        let mut cfg = tiny_cfg();
        cfg.input_h = 13;
        assert!(Cnn::<f32>::new(cfg, 0).is_err());
        let mut cfg = tiny_cfg();
        cfg.kernel = 4;
        assert!(Cnn::<f32>::new(cfg, 0).is_err());
        let mut cfg = tiny_cfg();
        cfg.fc1_units = 0;
        assert!(Cnn::<f32>::new(cfg, 0).is_err());
    }

    #[test]
    fn batch_apis_validate_inputs() {
        let model = Cnn::<f32>::new(tiny_cfg(), 0).unwrap();
        assert!(model.batch_mean_loss(&[]).is_err());
        let img = tiny_image(0);
        assert!(model.batch_gradients(&[(&img, 10)]).is_err());
    }
}
