//! The eight-layer GAP classifier and class activation maps.
//!
//! Layer table of the standard architecture (3×3 kernels, padding 1, SiLU
//! after every convolution):
//!
//! | layer | in  | out | stride |
//! |-------|-----|-----|--------|
//! | 1     | 1   | 32  | 1      |
//! | 2     | 32  | 32  | 2      |
//! | 3     | 32  | 64  | 1      |
//! | 4     | 64  | 64  | 2      |
//! | 5     | 64  | 128 | 1      |
//! | 6     | 128 | 128 | 2      |
//! | 7     | 128 | 256 | 1      |
//! | 8     | 256 | 256 | 2      |
//!
//! followed by global average pooling and a single linear head whose rows are
//! the per-class CAM weights. Parameter count: `Σ (9·in + 1)·out + (C + 1)·K`,
//! which is 1 172 194 for the table above with two classes.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{col2im, conv_backward, conv_forward, im2col, silu, silu_grad, ConvGeom, Real};
use crate::volume::View;

pub const NUM_LAYERS: usize = 8;
pub const DOWNSAMPLE: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvLayerSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    /// `(height, width)` of the single-channel input image.
    pub input_shape: [usize; 2],
    pub convs: Vec<ConvLayerSpec>,
    pub num_classes: usize,
}

impl Architecture {
    /// Widths `b, b, 2b, 2b, 4b, 4b, 8b, 8b`, stride 2 at every even layer.
    pub fn with_base_width(input_shape: [usize; 2], num_classes: usize, base: usize) -> Self {
        let widths = [base, base, 2 * base, 2 * base, 4 * base, 4 * base, 8 * base, 8 * base];
        Self::from_widths(input_shape, num_classes, &widths)
    }

    pub fn from_widths(input_shape: [usize; 2], num_classes: usize, widths: &[usize]) -> Self {
        let mut convs = Vec::with_capacity(widths.len());
        let mut cin = 1;
        for (i, &w) in widths.iter().enumerate() {
            let stride = if i % 2 == 1 { 2 } else { 1 };
            convs.push(ConvLayerSpec { in_channels: cin, out_channels: w, kernel: 3, stride });
            cin = w;
        }
        Architecture { input_shape, convs, num_classes }
    }

    /// The documented 32-to-256 table.
    pub fn standard(input_shape: [usize; 2], num_classes: usize) -> Self {
        Self::with_base_width(input_shape, num_classes, 32)
    }

    pub fn validate(&self) -> Result<()> {
        let [h, w] = self.input_shape;
        if h == 0 || w == 0 || h % DOWNSAMPLE != 0 || w % DOWNSAMPLE != 0 {
            return Err(Error::Config(format!("input shape {h}x{w} must be a positive multiple of {DOWNSAMPLE}")));
        }
        if self.convs.len() != NUM_LAYERS {
            return Err(Error::Config(format!("expected {NUM_LAYERS} conv layers, got {}", self.convs.len())));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        let mut cin = 1;
        let mut factor = 1;
        for (i, c) in self.convs.iter().enumerate() {
            if c.kernel != 3 || !(c.stride == 1 || c.stride == 2) || c.out_channels == 0 || c.in_channels != cin {
                return Err(Error::Config(format!("conv layer {} is malformed: {c:?}", i + 1)));
            }
            cin = c.out_channels;
            factor *= c.stride;
        }
        if factor != DOWNSAMPLE {
            return Err(Error::Config(format!("total downsampling is {factor}, must be {DOWNSAMPLE}")));
        }
        Ok(())
    }

    pub fn feature_channels(&self) -> usize {
        self.convs.last().map_or(1, |c| c.out_channels)
    }

    pub fn feature_shape(&self) -> [usize; 2] {
        [self.input_shape[0] / DOWNSAMPLE, self.input_shape[1] / DOWNSAMPLE]
    }

    pub fn param_count(&self) -> usize {
        let convs: usize = self.convs.iter().map(|c| (c.in_channels * 9 + 1) * c.out_channels).sum();
        convs + (self.feature_channels() + 1) * self.num_classes
    }

    fn geometries(&self) -> Vec<ConvGeom> {
        let [mut h, mut w] = self.input_shape;
        self.convs
            .iter()
            .map(|c| {
                let g = ConvGeom { cin: c.in_channels, cout: c.out_channels, stride: c.stride, h_in: h, w_in: w };
                h = g.h_out();
                w = g.w_out();
                g
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Slot {
    weight: usize,
    bias: usize,
}

/// Output of the last convolution for one image, `channels × h × w`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T> {
    pub data: Array3<T>,
}

impl<T: Real> FeatureMap<T> {
    pub fn channels(&self) -> usize {
        self.data.dim().0
    }

    pub fn spatial(&self) -> (usize, usize) {
        let (_, h, w) = self.data.dim();
        (h, w)
    }
}

/// A normalized class activation map.
#[derive(Clone, Debug, PartialEq)]
pub struct CamMap<T> {
    pub data: Array2<T>,
    pub class: Option<usize>,
    pub view: Option<View>,
    /// Set when no raw activation was positive; `data` is then all zero.
    pub degenerate: bool,
}

impl<T: Real> CamMap<T> {
    pub fn shape(&self) -> (usize, usize) {
        self.data.dim()
    }

    pub fn for_class(mut self, class: usize) -> Self {
        self.class = Some(class);
        self
    }

    pub fn in_view(mut self, view: View) -> Self {
        self.view = Some(view);
        self
    }

    pub fn peak(&self) -> T {
        self.data.iter().copied().fold(T::zero(), T::max)
    }
}

/// `raw(x) = W_c · f(x)` at every spatial location.
pub fn cam_raw<T: Real>(features: &FeatureMap<T>, w_c: &[T]) -> Result<Array2<T>> {
    let (c, h, w) = features.data.dim();
    if c != w_c.len() {
        return Err(Error::Shape(format!("feature map has {c} channels but weight vector has {}", w_c.len())));
    }
    let mut raw = Array2::zeros((h, w));
    for (ch, plane) in features.data.outer_iter().enumerate() {
        raw.scaled_add(w_c[ch], &plane);
    }
    Ok(raw)
}

/// Rectify (optionally) and divide by the peak so the maximum is exactly one.
/// Returns the all-zero map and `true` when nothing is positive.
pub fn normalize_cam<T: Real>(raw: &Array2<T>, rectify: bool) -> (Array2<T>, bool) {
    let peak = raw.iter().copied().fold(T::neg_infinity(), T::max);
    if !(peak > T::zero()) {
        return (Array2::zeros(raw.raw_dim()), true);
    }
    let map = raw.mapv(|r| {
        let r = if rectify { r.max(T::zero()) } else { r };
        if r == peak { T::one() } else { r / peak }
    });
    (map, false)
}

/// Pull a gradient on the normalized map back onto the raw map.
pub fn normalize_cam_backward<T: Real>(raw: &Array2<T>, rectify: bool, grad: &Array2<T>) -> Array2<T> {
    let mut out = Array2::zeros(raw.raw_dim());
    let (mut arg, mut peak) = (None, T::neg_infinity());
    for (i, &r) in raw.iter().enumerate() {
        if r > peak {
            peak = r;
            arg = Some(i);
        }
    }
    let Some(arg) = arg else { return out };
    if !(peak > T::zero()) {
        return out;
    }
    let inv = T::one() / peak;
    let mut d_peak = T::zero();
    for ((o, &r), &g) in out.iter_mut().zip(raw.iter()).zip(grad.iter()) {
        let pass = !rectify || r > T::zero();
        let rr = if pass { r } else { T::zero() };
        d_peak -= g * rr * inv * inv;
        if pass {
            *o = g * inv;
        }
    }
    if let Some(o) = out.iter_mut().nth(arg) {
        *o += d_peak;
    }
    out
}

/// Class activation map from a feature map and one row of the head.
pub fn compute_cam<T: Real>(features: &FeatureMap<T>, w_c: &[T], rectify: bool) -> Result<CamMap<T>> {
    let raw = cam_raw(features, w_c)?;
    let (data, degenerate) = normalize_cam(&raw, rectify);
    if degenerate {
        log::warn!("degenerate CAM: no positive activation");
    }
    Ok(CamMap { data, class: None, view: None, degenerate })
}

/// Separable linear interpolation weights for one axis (half-pixel centers).
#[derive(Clone, Debug)]
struct Interp1d<T> {
    lo: Vec<usize>,
    hi: Vec<usize>,
    frac: Vec<T>,
}

impl<T: Real> Interp1d<T> {
    fn new(n_in: usize, n_out: usize) -> Self {
        let scale = n_in as f64 / n_out as f64;
        let mut lo = Vec::with_capacity(n_out);
        let mut hi = Vec::with_capacity(n_out);
        let mut frac = Vec::with_capacity(n_out);
        for i in 0..n_out {
            let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
            let l = src.floor() as usize;
            let h = (l + 1).min(n_in - 1);
            lo.push(l);
            hi.push(h);
            frac.push(T::lit(src - l as f64));
        }
        Interp1d { lo, hi, frac }
    }
}

/// Bilinear upsampling of a coarse map (and its adjoint).
#[derive(Clone, Debug)]
pub struct Upsampler<T> {
    src: (usize, usize),
    dst: (usize, usize),
    rows: Interp1d<T>,
    cols: Interp1d<T>,
}

impl<T: Real> Upsampler<T> {
    pub fn new(src: (usize, usize), dst: (usize, usize)) -> Result<Self> {
        if src.0 == 0 || src.1 == 0 || dst.0 != src.0 * DOWNSAMPLE || dst.1 != src.1 * DOWNSAMPLE {
            return Err(Error::Shape(format!(
                "upsampling target {dst:?} must be {DOWNSAMPLE}x the map grid {src:?}"
            )));
        }
        Ok(Upsampler { src, dst, rows: Interp1d::new(src.0, dst.0), cols: Interp1d::new(src.1, dst.1) })
    }

    pub fn output_shape(&self) -> (usize, usize) {
        self.dst
    }

    pub fn apply(&self, map: &Array2<T>) -> Array2<T> {
        assert_eq!(map.dim(), self.src);
        // Interpolate along columns first, then rows.
        let mut tmp = Array2::zeros((self.src.0, self.dst.1));
        for r in 0..self.src.0 {
            for j in 0..self.dst.1 {
                let a = map[[r, self.cols.lo[j]]];
                let b = map[[r, self.cols.hi[j]]];
                tmp[[r, j]] = a + self.cols.frac[j] * (b - a);
            }
        }
        let mut out = Array2::zeros(self.dst);
        for i in 0..self.dst.0 {
            let (l, h, t) = (self.rows.lo[i], self.rows.hi[i], self.rows.frac[i]);
            for j in 0..self.dst.1 {
                let a = tmp[[l, j]];
                let b = tmp[[h, j]];
                out[[i, j]] = a + t * (b - a);
            }
        }
        out
    }

    /// Transpose of [`Upsampler::apply`].
    pub fn adjoint(&self, grad: &Array2<T>) -> Array2<T> {
        assert_eq!(grad.dim(), self.dst);
        let mut tmp = Array2::zeros((self.src.0, self.dst.1));
        for i in 0..self.dst.0 {
            let (l, h, t) = (self.rows.lo[i], self.rows.hi[i], self.rows.frac[i]);
            for j in 0..self.dst.1 {
                let g = grad[[i, j]];
                tmp[[l, j]] += (T::one() - t) * g;
                tmp[[h, j]] += t * g;
            }
        }
        let mut out = Array2::zeros(self.src);
        for r in 0..self.src.0 {
            for j in 0..self.dst.1 {
                let g = tmp[[r, j]];
                let t = self.cols.frac[j];
                out[[r, self.cols.lo[j]]] += (T::one() - t) * g;
                out[[r, self.cols.hi[j]]] += t * g;
            }
        }
        out
    }
}

/// Bilinear upsampling of a CAM to image resolution (exactly 16× its grid).
pub fn upsample_cam<T: Real>(cam: &CamMap<T>, target: (usize, usize)) -> Result<CamMap<T>> {
    let up = Upsampler::new(cam.shape(), target)?;
    Ok(CamMap { data: up.apply(&cam.data), class: cam.class, view: cam.view, degenerate: cam.degenerate })
}

struct LayerCache<T> {
    cols: Vec<T>,
    pre: Vec<T>,
}

/// One image's forward pass with everything back-propagation needs.
pub struct ForwardPass<T> {
    caches: Vec<LayerCache<T>>,
    features: Vec<T>,
    pooled: Vec<T>,
    pub logits: Vec<T>,
}

impl<T: Real> ForwardPass<T> {
    pub fn features(&self) -> &[T] {
        &self.features
    }
}

/// Gradient signal arriving from the CAM path: `d loss / d raw` for the
/// activation map of `class`.
pub struct CamGrad<'a, T> {
    pub class: usize,
    pub d_raw: &'a Array2<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierModel<T> {
    arch: Architecture,
    geoms: Vec<ConvGeom>,
    slots: Vec<Slot>,
    head: Slot,
    params: Vec<T>,
}

/// Build the standard classifier for `input_shape` images.
pub fn build_classifier(input_shape: [usize; 2], num_classes: usize, seed: u64) -> Result<ClassifierModel<f32>> {
    ClassifierModel::new(Architecture::standard(input_shape, num_classes), seed)
}

impl<T: Real> ClassifierModel<T> {
    /// Fan-in scaled uniform initialization, biases at zero.
    ///
    /// Conv weights have variance `4 / fan_in`. SiLU has slope 1/2 at the
    /// origin, so this keeps small activations at a constant scale through
    /// the stack; the usual `2 / fan_in` halves them at every layer.
    pub fn new(arch: Architecture, seed: u64) -> Result<Self> {
        let mut model = Self::zeroed(arch)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (slot, conv) in model.slots.clone().iter().zip(model.arch.convs.clone()) {
            let fan_in = conv.in_channels * 9;
            let bound = (12.0 / fan_in as f64).sqrt();
            let n = conv.out_channels * fan_in;
            for p in &mut model.params[slot.weight..slot.weight + n] {
                *p = T::lit(rng.random_range(-bound..bound));
            }
        }
        let c = model.arch.feature_channels();
        let bound = 1.0 / (c as f64).sqrt();
        let head = model.head.weight;
        for p in &mut model.params[head..head + c * model.arch.num_classes] {
            *p = T::lit(rng.random_range(-bound..bound));
        }
        Ok(model)
    }

    fn zeroed(arch: Architecture) -> Result<Self> {
        arch.validate()?;
        let geoms = arch.geometries();
        let mut slots = Vec::with_capacity(geoms.len());
        let mut off = 0;
        for c in &arch.convs {
            let weight = off;
            off += c.out_channels * c.in_channels * 9;
            slots.push(Slot { weight, bias: off });
            off += c.out_channels;
        }
        let head = Slot { weight: off, bias: off + arch.feature_channels() * arch.num_classes };
        off = head.bias + arch.num_classes;
        debug_assert_eq!(off, arch.param_count());
        Ok(ClassifierModel { arch, geoms, slots, head, params: vec![T::zero(); off] })
    }

    pub fn from_params(arch: Architecture, params: Vec<T>) -> Result<Self> {
        let mut model = Self::zeroed(arch)?;
        if params.len() != model.params.len() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                model.params.len(),
                params.len()
            )));
        }
        model.params = params;
        Ok(model)
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn num_classes(&self) -> usize {
        self.arch.num_classes
    }

    /// Row `class` of the head: the CAM weight vector `W_c`.
    pub fn class_weights(&self, class: usize) -> &[T] {
        let c = self.arch.feature_channels();
        &self.params[self.head.weight + class * c..self.head.weight + (class + 1) * c]
    }

    pub fn head_bias(&self) -> &[T] {
        &self.params[self.head.bias..self.head.bias + self.arch.num_classes]
    }

    /// Mutable weight and bias slices of conv layer `layer` (0-based).
    pub fn conv_params_mut(&mut self, layer: usize) -> (&mut [T], &mut [T]) {
        let s = self.slots[layer];
        let c = self.arch.convs[layer];
        let (w, rest) = self.params[s.weight..].split_at_mut(s.bias - s.weight);
        (w, &mut rest[..c.out_channels])
    }

    pub fn head_params_mut(&mut self) -> (&mut [T], &mut [T]) {
        let (w, rest) = self.params[self.head.weight..].split_at_mut(self.head.bias - self.head.weight);
        (w, &mut rest[..self.arch.num_classes])
    }

    pub fn cast<U: Real>(&self) -> ClassifierModel<U> {
        ClassifierModel {
            arch: self.arch.clone(),
            geoms: self.geoms.clone(),
            slots: self.slots.clone(),
            head: self.head,
            params: self.params.iter().map(|p| U::lit(p.to_f64().unwrap_or(0.0))).collect(),
        }
    }

    fn check_image(&self, shape: (usize, usize)) -> Result<()> {
        let [h, w] = self.arch.input_shape;
        if shape != (h, w) {
            return Err(Error::InvalidArgument(format!("image is {}x{}, model expects {h}x{w}", shape.0, shape.1)));
        }
        Ok(())
    }

    /// Forward one image (row-major `h × w`). Caches are kept when `train` is set.
    pub fn forward_image(&self, image: &Array2<T>, train: bool) -> Result<ForwardPass<T>> {
        self.check_image(image.dim())?;
        let mut x: Vec<T> = image.iter().copied().collect();
        let mut caches = Vec::with_capacity(if train { self.geoms.len() } else { 0 });
        let mut cols = Vec::new();
        let mut pre = Vec::new();
        for (g, s) in self.geoms.iter().zip(&self.slots) {
            im2col(g, &x, &mut cols);
            let w = &self.params[s.weight..s.bias];
            let b = &self.params[s.bias..s.bias + g.cout];
            conv_forward(g, w, b, &cols, &mut pre);
            x = pre.iter().map(|&z| silu(z)).collect();
            if train {
                caches.push(LayerCache { cols: std::mem::take(&mut cols), pre: std::mem::take(&mut pre) });
            }
        }
        let c = self.arch.feature_channels();
        let hw = x.len() / c;
        let inv = T::one() / T::lit(hw as f64);
        let pooled: Vec<T> = x.chunks(hw).map(|p| p.iter().copied().sum::<T>() * inv).collect();
        let logits = (0..self.arch.num_classes)
            .map(|k| {
                let wk = self.class_weights(k);
                self.head_bias()[k] + wk.iter().zip(&pooled).map(|(a, b)| *a * *b).sum::<T>()
            })
            .collect();
        Ok(ForwardPass { caches, features: x, pooled, logits })
    }

    pub fn feature_map(&self, pass: &ForwardPass<T>) -> FeatureMap<T> {
        let [h, w] = self.arch.feature_shape();
        let data = Array3::from_shape_vec((self.arch.feature_channels(), h, w), pass.features.clone())
            .expect("feature buffer matches architecture");
        FeatureMap { data }
    }

    /// Raw (un-normalized) CAM for `class` straight from a forward pass.
    pub fn raw_cam(&self, pass: &ForwardPass<T>, class: usize) -> Array2<T> {
        let [h, w] = self.arch.feature_shape();
        let hw = h * w;
        let mut raw = Array2::zeros((h, w));
        let wc = self.class_weights(class);
        for (ch, plane) in pass.features.chunks(hw).enumerate() {
            for (r, f) in raw.iter_mut().zip(plane) {
                *r += wc[ch] * *f;
            }
        }
        raw
    }

    /// Normalized, rectified CAM for `class`.
    pub fn cam(&self, pass: &ForwardPass<T>, class: usize) -> CamMap<T> {
        let (data, degenerate) = normalize_cam(&self.raw_cam(pass, class), true);
        CamMap { data, class: Some(class), view: None, degenerate }
    }

    /// Batched evaluation forward: logits `batch × classes` plus feature maps.
    pub fn forward(&self, batch: &[Array2<T>]) -> Result<(Array2<T>, Vec<FeatureMap<T>>)> {
        let mut logits = Array2::zeros((batch.len(), self.arch.num_classes));
        let mut feats = Vec::with_capacity(batch.len());
        for (i, img) in batch.iter().enumerate() {
            let pass = self.forward_image(img, false)?;
            for (k, l) in pass.logits.iter().enumerate() {
                logits[[i, k]] = *l;
            }
            feats.push(self.feature_map(&pass));
        }
        Ok((logits, feats))
    }

    /// Accumulate `∂loss/∂params` into `grads` given the loss gradient on the
    /// logits and, optionally, on one class's raw CAM.
    pub fn backward(&self, pass: &ForwardPass<T>, d_logits: &[T], cam: Option<CamGrad<'_, T>>, grads: &mut [T]) {
        assert_eq!(grads.len(), self.params.len());
        assert_eq!(pass.caches.len(), self.geoms.len(), "forward pass was not run in training mode");
        let c = self.arch.feature_channels();
        let hw = pass.features.len() / c;
        let k = self.arch.num_classes;

        // Head and pooling.
        let mut d_feat = vec![T::zero(); pass.features.len()];
        let inv = T::one() / T::lit(hw as f64);
        for (cls, &dl) in d_logits.iter().enumerate().take(k) {
            grads[self.head.bias + cls] += dl;
            let wrow = self.head.weight + cls * c;
            for ch in 0..c {
                grads[wrow + ch] += dl * pass.pooled[ch];
                let d = dl * self.params[wrow + ch] * inv;
                for v in &mut d_feat[ch * hw..(ch + 1) * hw] {
                    *v += d;
                }
            }
        }

        // CAM path: raw = W_cls · f.
        if let Some(CamGrad { class, d_raw }) = cam {
            let wrow = self.head.weight + class * c;
            let d_raw = d_raw.as_slice().expect("contiguous CAM gradient");
            for ch in 0..c {
                let plane = &pass.features[ch * hw..(ch + 1) * hw];
                grads[wrow + ch] += plane.iter().zip(d_raw).map(|(f, d)| *f * *d).sum::<T>();
                let wc = self.params[wrow + ch];
                for (v, d) in d_feat[ch * hw..(ch + 1) * hw].iter_mut().zip(d_raw) {
                    *v += wc * *d;
                }
            }
        }

        // Convolution stack.
        let mut d_act = d_feat;
        let mut d_cols = Vec::new();
        for i in (0..self.geoms.len()).rev() {
            let g = &self.geoms[i];
            let s = self.slots[i];
            let cache = &pass.caches[i];
            let d_pre: Vec<T> = d_act.iter().zip(&cache.pre).map(|(d, z)| *d * silu_grad(*z)).collect();
            let (gw, gb) = grads[s.weight..].split_at_mut(s.bias - s.weight);
            let weight = &self.params[s.weight..s.bias];
            if i > 0 {
                conv_backward(g, weight, &cache.cols, &d_pre, gw, &mut gb[..g.cout], Some(&mut d_cols));
                let mut d_in = vec![T::zero(); g.cin * g.h_in * g.w_in];
                col2im(g, &d_cols, &mut d_in);
                d_act = d_in;
            } else {
                conv_backward(g, weight, &cache.cols, &d_pre, gw, &mut gb[..g.cout], None);
            }
        }
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"MIPCAMCK";
const CHECKPOINT_VERSION: u32 = 1;

impl ClassifierModel<f32> {
    /// Serialize as `magic | version | arch-json length | arch json | n params | f32 LE blob`.
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        let arch = serde_json::to_vec(&self.arch).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut buf = Vec::with_capacity(32 + arch.len() + self.params.len() * 4);
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(arch.len() as u32).to_le_bytes());
        buf.extend_from_slice(&arch);
        buf.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for p in &self.params {
            buf.extend_from_slice(&p.to_le_bytes());
        }
        w.write_all(&buf).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        let mut cur = bytes.as_slice();
        let mut take = |n: usize| -> Result<&[u8]> {
            if cur.len() < n {
                return Err(bad("truncated checkpoint"));
            }
            let (head, tail) = cur.split_at(n);
            cur = tail;
            Ok(head)
        };
        if take(8)? != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let arch_len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let arch: Architecture =
            serde_json::from_slice(take(arch_len)?).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let n = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        let blob = take(n.checked_mul(4).ok_or_else(|| bad("parameter count overflow"))?)?;
        let params = blob.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        if !take(0)?.is_empty() || !cur.is_empty() {
            return Err(bad("trailing bytes after parameters"));
        }
        ClassifierModel::from_params(arch, params).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_checkpoint(std::io::BufWriter::new(file))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_checkpoint(std::io::BufReader::new(file))
    }
}
