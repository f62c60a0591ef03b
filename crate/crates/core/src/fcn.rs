//! Fully convolutional network mapping per-antenna channel features to
//! per-antenna phase shifts, with hand-written backpropagation.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::WsrHead;
use crate::numerics::RealTensor3;
use crate::precoding::PhaseField;
use crate::seed::rng_for;

const LEAKY_SLOPE: f64 = 0.01;

/// One zero-padded, stride-1 convolution with odd square or rectangular
/// kernels. Kernels are stored `[out][in][ky][kx]` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub out_maps: usize,
    pub in_maps: usize,
    pub kh: usize,
    pub kw: usize,
    pub kernels: Vec<f64>,
    pub biases: Vec<f64>,
}

impl ConvLayer {
    pub fn new(
        out_maps: usize,
        in_maps: usize,
        kh: usize,
        kw: usize,
        kernels: Vec<f64>,
        biases: Vec<f64>,
    ) -> Result<Self> {
        if kh.is_multiple_of(2) || kw.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "kernel {kh}x{kw} must have odd sides"
            )));
        }
        if kernels.len() != out_maps * in_maps * kh * kw || biases.len() != out_maps {
            return Err(Error::dims(
                "ConvLayer::new",
                format!(
                    "{} kernel and {} bias values for {out_maps}x{in_maps}x{kh}x{kw}",
                    kernels.len(),
                    biases.len()
                ),
            ));
        }
        Ok(Self {
            out_maps,
            in_maps,
            kh,
            kw,
            kernels,
            biases,
        })
    }

    pub fn zeros(out_maps: usize, in_maps: usize, kh: usize, kw: usize) -> Result<Self> {
        Self::new(
            out_maps,
            in_maps,
            kh,
            kw,
            vec![0.0; out_maps * in_maps * kh * kw],
            vec![0.0; out_maps],
        )
    }

    pub fn pad(&self) -> (usize, usize) {
        ((self.kh - 1) / 2, (self.kw - 1) / 2)
    }

    pub fn param_count(&self) -> usize {
        self.kernels.len() + self.biases.len()
    }

    fn kernel(&self, o: usize, i: usize) -> &[f64] {
        let len = self.kh * self.kw;
        let start = (o * self.in_maps + i) * len;
        &self.kernels[start..start + len]
    }
}

/// Valid `(out_start, in_start, len)` of a 1-D window shift: the output index
/// range whose input index `out + d - pad` lies in `[0, n)`.
fn overlap(n: usize, d: usize, pad: usize) -> (usize, usize, usize) {
    let shift = d as isize - pad as isize;
    let lo = (-shift).max(0) as usize;
    let hi = (n as isize - shift).min(n as isize).max(0) as usize;
    if hi <= lo {
        return (0, 0, 0);
    }
    (lo, (lo as isize + shift) as usize, hi - lo)
}

/// Cross-correlation with zero padding; output spatial size equals input.
pub fn conv2d_padded(layer: &ConvLayer, input: &RealTensor3) -> Result<RealTensor3> {
    let (k, h, w) = input.dims();
    if k != layer.in_maps {
        return Err(Error::dims(
            "conv2d_padded",
            format!("layer expects {} input maps, got {k}", layer.in_maps),
        ));
    }
    let (ph, pw) = layer.pad();
    let mut out = RealTensor3::zeros(layer.out_maps, h, w);
    for o in 0..layer.out_maps {
        let dst = out.map_mut(o);
        dst.fill(layer.biases[o]);
        for i in 0..k {
            let src = input.map(i);
            let ker = layer.kernel(o, i);
            for dy in 0..layer.kh {
                let (y0, sy0, ny) = overlap(h, dy, ph);
                for dx in 0..layer.kw {
                    let wgt = ker[dy * layer.kw + dx];
                    if wgt == 0.0 {
                        continue;
                    }
                    let (x0, sx0, nx) = overlap(w, dx, pw);
                    for y in 0..ny {
                        let d = &mut dst[(y0 + y) * w + x0..(y0 + y) * w + x0 + nx];
                        let s = &src[(sy0 + y) * w + sx0..(sy0 + y) * w + sx0 + nx];
                        for (a, b) in d.iter_mut().zip(s) {
                            *a += wgt * b;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of one layer: kernel and bias adjoints, and optionally the
/// adjoint of the layer input.
fn conv2d_backward(
    layer: &ConvLayer,
    input: &RealTensor3,
    grad_out: &RealTensor3,
    grads: &mut LayerGrad,
    want_input: bool,
) -> Option<RealTensor3> {
    let (k, h, w) = input.dims();
    let (ph, pw) = layer.pad();
    let mut grad_in = want_input.then(|| RealTensor3::zeros(k, h, w));
    let ksz = layer.kh * layer.kw;
    for o in 0..layer.out_maps {
        let go = grad_out.map(o);
        grads.biases[o] += go.iter().sum::<f64>();
        for i in 0..k {
            let src = input.map(i);
            let base = (o * layer.in_maps + i) * ksz;
            for dy in 0..layer.kh {
                let (y0, sy0, ny) = overlap(h, dy, ph);
                for dx in 0..layer.kw {
                    let (x0, sx0, nx) = overlap(w, dx, pw);
                    let mut acc = 0.0;
                    for y in 0..ny {
                        let g = &go[(y0 + y) * w + x0..(y0 + y) * w + x0 + nx];
                        let s = &src[(sy0 + y) * w + sx0..(sy0 + y) * w + sx0 + nx];
                        acc += g.iter().zip(s).map(|(a, b)| a * b).sum::<f64>();
                    }
                    grads.kernels[base + dy * layer.kw + dx] += acc;
                    if let Some(gi) = grad_in.as_mut() {
                        let wgt = layer.kernels[base + dy * layer.kw + dx];
                        if wgt == 0.0 {
                            continue;
                        }
                        let dst = gi.map_mut(i);
                        for y in 0..ny {
                            let g = &go[(y0 + y) * w + x0..(y0 + y) * w + x0 + nx];
                            let d = &mut dst[(sy0 + y) * w + sx0..(sy0 + y) * w + sx0 + nx];
                            for (a, b) in d.iter_mut().zip(g) {
                                *a += wgt * b;
                            }
                        }
                    }
                }
            }
        }
    }
    grad_in
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSpec {
    pub ris_width: usize,
    pub ris_height: usize,
    pub users: usize,
    pub layers: usize,
    pub kernel: usize,
    pub hidden_maps: usize,
    pub dropout: f64,
    #[serde(default = "default_activation")]
    pub activation: String,
}

fn default_activation() -> String {
    "leaky_relu".into()
}

impl ArchSpec {
    /// Eight 5x5 layers, dropout 0.1 (16x16 RIS).
    pub fn table1_16x16(users: usize) -> Self {
        Self {
            ris_width: 16,
            ris_height: 16,
            users,
            layers: 8,
            kernel: 5,
            hidden_maps: 32,
            dropout: 0.1,
            activation: default_activation(),
        }
    }

    /// Eight 13x13 layers, dropout 0.35 (32x32 RIS).
    pub fn table1_32x32(users: usize) -> Self {
        Self {
            ris_width: 32,
            ris_height: 32,
            kernel: 13,
            dropout: 0.35,
            ..Self::table1_16x16(users)
        }
    }

    pub fn input_maps(&self) -> usize {
        4 * self.users
    }

    pub fn pad(&self) -> usize {
        (self.kernel.saturating_sub(1)) / 2
    }

    /// One-sided reach of the stacked receptive field, in antennas.
    pub fn reach(&self) -> usize {
        self.layers * self.pad()
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "kernel size {} is even",
                self.kernel
            )));
        }
        if self.users == 0 || self.ris_width == 0 || self.ris_height == 0 {
            return Err(Error::InvalidArgument(
                "architecture needs users and a nonempty RIS".into(),
            ));
        }
        if self.layers == 0 || (self.layers > 1 && self.hidden_maps == 0) {
            return Err(Error::InvalidArgument(
                "architecture needs layers >= 1 and hidden maps >= 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidArgument(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        if self.activation != "leaky_relu" {
            return Err(Error::InvalidArgument(format!(
                "unknown activation {:?}",
                self.activation
            )));
        }
        let span = self.ris_width.max(self.ris_height);
        if self.reach() < span {
            return Err(Error::InvalidArgument(format!(
                "{} layers of {k}x{k} reach {} antennas, less than the RIS span {span}",
                self.layers,
                self.reach(),
                k = self.kernel
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FcnModel {
    pub arch: ArchSpec,
    pub layers: Vec<ConvLayer>,
}

impl FcnModel {
    pub fn param_count(&self) -> usize {
        self.layers.iter().map(ConvLayer::param_count).sum()
    }

    /// All parameters in declaration order: per layer, kernels then biases.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(&l.kernels);
            out.extend_from_slice(&l.biases);
        }
        out
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a model with {} parameters",
                params.len(),
                self.param_count()
            )));
        }
        let mut pos = 0;
        for l in &mut self.layers {
            let nk = l.kernels.len();
            l.kernels.copy_from_slice(&params[pos..pos + nk]);
            pos += nk;
            let nb = l.biases.len();
            l.biases.copy_from_slice(&params[pos..pos + nb]);
            pos += nb;
        }
        Ok(())
    }

    pub fn param_slices_mut(&mut self) -> impl Iterator<Item = &mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.kernels.as_mut_slice(), l.biases.as_mut_slice()])
    }
}

/// Xavier-uniform kernels, zero biases.
pub fn init_model(arch: &ArchSpec, seed: u64) -> Result<FcnModel> {
    arch.validate()?;
    let mut layers = Vec::with_capacity(arch.layers);
    for l in 0..arch.layers {
        let in_maps = if l == 0 {
            arch.input_maps()
        } else {
            arch.hidden_maps
        };
        let out_maps = if l + 1 == arch.layers {
            1
        } else {
            arch.hidden_maps
        };
        let area = arch.kernel * arch.kernel;
        let limit = (6.0 / ((in_maps + out_maps) * area) as f64).sqrt();
        let mut rng = rng_for(seed, "init-layer", l as u64);
        let kernels = (0..out_maps * in_maps * area)
            .map(|_| rng.random_range(-limit..limit))
            .collect();
        layers.push(ConvLayer::new(
            out_maps,
            in_maps,
            arch.kernel,
            arch.kernel,
            kernels,
            vec![0.0; out_maps],
        )?);
    }
    Ok(FcnModel {
        arch: arch.clone(),
        layers,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Eval,
    /// Dropout active with masks drawn from this seed.
    Train {
        seed: u64,
    },
}

/// Activations kept for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    /// Input to each layer (after activation and dropout of the previous one).
    inputs: Vec<RealTensor3>,
    /// Pre-activation output of each hidden layer.
    pre: Vec<RealTensor3>,
    /// Inverted-dropout multipliers per hidden layer, empty when inactive.
    masks: Vec<Vec<f64>>,
}

pub fn fcn_forward(
    model: &FcnModel,
    features: &RealTensor3,
    mode: Mode,
) -> Result<(PhaseField, ForwardCache)> {
    let arch = &model.arch;
    if features.dims() != (arch.input_maps(), arch.ris_height, arch.ris_width) {
        return Err(Error::dims(
            "fcn_forward",
            format!(
                "features {:?}, model expects ({}, {}, {})",
                features.dims(),
                arch.input_maps(),
                arch.ris_height,
                arch.ris_width
            ),
        ));
    }
    let rate = arch.dropout;
    let mut rng = match mode {
        Mode::Train { seed } if rate > 0.0 => Some(rng_for(seed, "dropout", 0)),
        _ => None,
    };
    let last = model.layers.len() - 1;
    let mut cache = ForwardCache {
        inputs: Vec::with_capacity(model.layers.len()),
        pre: Vec::with_capacity(last),
        masks: Vec::with_capacity(last),
    };
    let mut x = features.clone();
    for (l, layer) in model.layers.iter().enumerate() {
        let y = conv2d_padded(layer, &x)?;
        debug_assert_eq!((y.height(), y.width()), (x.height(), x.width()));
        cache.inputs.push(x);
        if l == last {
            let psi = PhaseField::new(arch.ris_height, arch.ris_width, y.into_vec())
                .map_err(|_| Error::Diverged("fcn output".into()))?;
            return Ok((psi, cache));
        }
        let mut act = y.clone();
        for v in act.as_mut_slice() {
            if *v < 0.0 {
                *v *= LEAKY_SLOPE;
            }
        }
        let mask = match rng.as_mut() {
            Some(r) => {
                let keep = 1.0 / (1.0 - rate);
                let m: Vec<f64> = (0..act.as_slice().len())
                    .map(|_| if r.random::<f64>() < rate { 0.0 } else { keep })
                    .collect();
                for (a, s) in act.as_mut_slice().iter_mut().zip(&m) {
                    *a *= s;
                }
                m
            }
            None => Vec::new(),
        };
        cache.pre.push(y);
        cache.masks.push(mask);
        x = act;
    }
    unreachable!("model has at least one layer")
}

/// Per-layer adjoints.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrad {
    pub kernels: Vec<f64>,
    pub biases: Vec<f64>,
}

/// Gradient of a scalar objective with respect to every model parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientBundle {
    pub value: f64,
    pub layers: Vec<LayerGrad>,
}

impl GradientBundle {
    pub fn zeros_like(model: &FcnModel) -> Self {
        Self {
            value: 0.0,
            layers: model
                .layers
                .iter()
                .map(|l| LayerGrad {
                    kernels: vec![0.0; l.kernels.len()],
                    biases: vec![0.0; l.biases.len()],
                })
                .collect(),
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend_from_slice(&l.kernels);
            out.extend_from_slice(&l.biases);
        }
        out
    }

    pub fn slices(&self) -> impl Iterator<Item = &[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.kernels.as_slice(), l.biases.as_slice()])
    }

    /// `self += other`, value included.
    pub fn accumulate(&mut self, other: &GradientBundle) -> Result<()> {
        if self.layers.len() != other.layers.len() {
            return Err(Error::ShapeMismatch(
                "gradient bundles differ in layer count".into(),
            ));
        }
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            if a.kernels.len() != b.kernels.len() || a.biases.len() != b.biases.len() {
                return Err(Error::ShapeMismatch(
                    "gradient bundles differ in layer shape".into(),
                ));
            }
            for (x, y) in a.kernels.iter_mut().zip(&b.kernels) {
                *x += y;
            }
            for (x, y) in a.biases.iter_mut().zip(&b.biases) {
                *x += y;
            }
        }
        self.value += other.value;
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        for l in &mut self.layers {
            l.kernels.iter_mut().for_each(|x| *x *= s);
            l.biases.iter_mut().for_each(|x| *x *= s);
        }
        self.value *= s;
    }

    pub fn is_finite(&self) -> bool {
        self.value.is_finite() && self.slices().all(|s| s.iter().all(|x| x.is_finite()))
    }
}

/// Backpropagates `d objective / d psi` through the network.
pub fn fcn_backward(
    model: &FcnModel,
    cache: &ForwardCache,
    grad_psi: &[f64],
) -> Result<GradientBundle> {
    let arch = &model.arch;
    let mut bundle = GradientBundle::zeros_like(model);
    let mut g = RealTensor3::from_vec(1, arch.ris_height, arch.ris_width, grad_psi.to_vec())?;
    for l in (0..model.layers.len()).rev() {
        let want_input = l > 0;
        let gi = conv2d_backward(
            &model.layers[l],
            &cache.inputs[l],
            &g,
            &mut bundle.layers[l],
            want_input,
        );
        let Some(mut gi) = gi else { break };
        // back through dropout and activation of layer l-1
        let mask = &cache.masks[l - 1];
        let pre = cache.pre[l - 1].as_slice();
        for (idx, v) in gi.as_mut_slice().iter_mut().enumerate() {
            if !mask.is_empty() {
                *v *= mask[idx];
            }
            if pre[idx] < 0.0 {
                *v *= LEAKY_SLOPE;
            }
        }
        g = gi;
    }
    Ok(bundle)
}

/// Forward, objective head and backward in one call.
pub fn fcn_gradient(
    model: &FcnModel,
    features: &RealTensor3,
    head: &WsrHead<'_>,
    mode: Mode,
) -> Result<GradientBundle> {
    head.check_differentiable()?;
    let (psi, cache) = fcn_forward(model, features, mode)?;
    let (val, grad_psi) = head.value_and_grad(&psi)?;
    let mut bundle = fcn_backward(model, &cache, &grad_psi)?;
    bundle.value = val.objective;
    Ok(bundle)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    format: String,
    arch: ArchSpec,
    seed_lineage: Vec<u64>,
    param_count: usize,
}

const CHECKPOINT_FORMAT: &str = "ris-muxer-fcn/1";

/// A JSON header line followed by the parameters as little-endian doubles.
pub fn save_checkpoint(
    model: &FcnModel,
    seed_lineage: &[u64],
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let header = CheckpointHeader {
        format: CHECKPOINT_FORMAT.into(),
        arch: model.arch.clone(),
        seed_lineage: seed_lineage.to_vec(),
        param_count: model.param_count(),
    };
    let mut buf = serde_json::to_vec(&header).expect("header serializes");
    buf.push(b'\n');
    for p in model.params() {
        buf.write_all(&p.to_le_bytes()).expect("writing to a Vec");
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Loads a checkpoint; returns the model and its seed lineage.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(FcnModel, Vec<u64>)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Parse {
            offset: bytes.len(),
            field: "header".into(),
            message: "missing header line".into(),
        })?;
    let header: CheckpointHeader =
        serde_json::from_slice(&bytes[..nl]).map_err(|e| Error::Parse {
            offset: e.column().saturating_sub(1),
            field: "header".into(),
            message: e.to_string(),
        })?;
    if header.format != CHECKPOINT_FORMAT {
        return Err(Error::Parse {
            offset: 0,
            field: "format".into(),
            message: format!("unsupported checkpoint format {:?}", header.format),
        });
    }
    let body = &bytes[nl + 1..];
    if body.len() != header.param_count * 8 {
        return Err(Error::Parse {
            offset: nl + 1,
            field: "params".into(),
            message: format!(
                "expected {} parameter bytes, found {}",
                header.param_count * 8,
                body.len()
            ),
        });
    }
    let params: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    let mut model = init_model(&header.arch, 0)?;
    model.set_params(&params)?;
    Ok((model, header.seed_lineage))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{build_features, Geometry};
    use crate::head::PrecoderMode;
    use crate::numerics::finite_difference_gradient;
    use crate::precoding::tests::random_set;
    use crate::precoding::{LinkBudget, UserWeights};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_arch(w: usize, h: usize, users: usize, hidden: usize, dropout: f64) -> ArchSpec {
        ArchSpec {
            ris_width: w,
            ris_height: h,
            users,
            layers: 2,
            kernel: 5,
            hidden_maps: hidden,
            dropout,
            activation: default_activation(),
        }
    }

    #[test]
    fn identity_kernel_copies_input() {
        let mut layer = ConvLayer::zeros(1, 1, 3, 3).unwrap();
        layer.kernels[4] = 1.0;
        let x = RealTensor3::from_vec(1, 2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(conv2d_padded(&layer, &x).unwrap(), x);
    }

    #[test]
    fn zero_input_gives_bias() {
        let mut layer = ConvLayer::zeros(2, 3, 3, 5).unwrap();
        layer.kernels.iter_mut().for_each(|k| *k = 0.3);
        layer.biases = vec![1.5, -2.0];
        let out = conv2d_padded(&layer, &RealTensor3::zeros(3, 4, 4)).unwrap();
        assert!(out.map(0).iter().all(|&v| v == 1.5));
        assert!(out.map(1).iter().all(|&v| v == -2.0));
    }

    #[test]
    fn ones_kernel_sums_neighbourhood() {
        let mut layer = ConvLayer::zeros(1, 1, 3, 3).unwrap();
        layer.kernels.iter_mut().for_each(|k| *k = 1.0);
        let vals: Vec<f64> = (1..=9).map(f64::from).collect();
        let x = RealTensor3::from_vec(1, 3, 3, vals).unwrap();
        let out = conv2d_padded(&layer, &x).unwrap();
        assert_eq!(out.get(0, 1, 1), 45.0);
        assert_eq!(out.get(0, 0, 0), 1.0 + 2.0 + 4.0 + 5.0);
        assert_eq!(out.get(0, 2, 2), 5.0 + 6.0 + 8.0 + 9.0);
    }

    #[test]
    fn matches_naive_cross_correlation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (k, h, w) = (2, 4, 5);
        let kernels = (0..3 * k * 3 * 5)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let layer = ConvLayer::new(3, k, 3, 5, kernels, vec![0.1, 0.2, 0.3]).unwrap();
        let x = RealTensor3::from_vec(
            k,
            h,
            w,
            (0..k * h * w)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
        )
        .unwrap();
        let out = conv2d_padded(&layer, &x).unwrap();
        for o in 0..3 {
            for y in 0..h as isize {
                for xx in 0..w as isize {
                    let mut s = layer.biases[o];
                    for i in 0..k {
                        for dy in 0..3isize {
                            for dx in 0..5isize {
                                let (sy, sx) = (y + dy - 1, xx + dx - 2);
                                if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                                    s += layer.kernel(o, i)[(dy * 5 + dx) as usize]
                                        * x.get(i, sy as usize, sx as usize);
                                }
                            }
                        }
                    }
                    assert!((out.get(o, y as usize, xx as usize) - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn map_count_mismatch_is_error() {
        let layer = ConvLayer::zeros(1, 2, 3, 3).unwrap();
        assert!(conv2d_padded(&layer, &RealTensor3::zeros(3, 2, 2)).is_err());
    }

    #[test]
    fn two_layer_composition() {
        let arch = tiny_arch(3, 3, 1, 1, 0.0);
        let mut model = init_model(&arch, 0).unwrap();
        let mut first = ConvLayer::zeros(1, 4, 3, 3).unwrap();
        first.kernels[4] = -2.0; // centre of map 0
        first.biases[0] = 0.5;
        let mut second = ConvLayer::zeros(1, 1, 3, 3).unwrap();
        second.kernels[1] = 1.0; // pixel above
        model.layers = vec![first.clone(), second.clone()];
        let x = RealTensor3::from_vec(4, 3, 3, (0..36).map(|v| v as f64 / 10.0).collect()).unwrap();
        let (psi, _) = fcn_forward(&model, &x, Mode::Eval).unwrap();
        let mut mid = conv2d_padded(&first, &x).unwrap();
        for v in mid.as_mut_slice() {
            if *v < 0.0 {
                *v *= LEAKY_SLOPE;
            }
        }
        let expect = conv2d_padded(&second, &mid).unwrap();
        assert_eq!(psi.as_slice(), expect.as_slice());
        assert_eq!(psi.as_slice()[0], 0.0);
        assert_eq!(psi.as_slice()[3], 0.5);
    }

    #[test]
    fn init_is_seeded_and_validated() {
        let arch = ArchSpec::table1_16x16(2);
        let a = init_model(&arch, 1).unwrap();
        assert_eq!(a, init_model(&arch, 1).unwrap());
        assert_ne!(a, init_model(&arch, 2).unwrap());
        assert_eq!(a.layers.len(), 8);
        assert!(a.layers.iter().all(|l| l.pad() == (2, 2)));
        assert_eq!(a.layers[0].in_maps, 8);
        assert_eq!(a.layers[7].out_maps, 1);
        assert!(a.layers.iter().all(|l| l.biases.iter().all(|&b| b == 0.0)));
        let limit = (6.0f64 / ((8 + 32) * 25) as f64).sqrt();
        assert!(a.layers[0].kernels.iter().all(|k| k.abs() <= limit));
        assert_eq!(arch.reach(), 16);

        let big = ArchSpec::table1_32x32(2);
        assert_eq!(big.pad(), 6);
        assert_eq!(big.dropout, 0.35);
        assert!(big.validate().is_ok());

        let even = ArchSpec {
            kernel: 4,
            ..arch.clone()
        };
        assert!(init_model(&even, 0).is_err());
        let short = ArchSpec { layers: 3, ..arch };
        assert!(init_model(&short, 0).is_err());
    }

    #[test]
    fn modes_and_dropout() {
        let arch = tiny_arch(3, 3, 1, 4, 0.5);
        let model = init_model(&arch, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = RealTensor3::from_vec(
            4,
            3,
            3,
            (0..36).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let e1 = fcn_forward(&model, &x, Mode::Eval).unwrap().0;
        assert_eq!(e1, fcn_forward(&model, &x, Mode::Eval).unwrap().0);
        let t1 = fcn_forward(&model, &x, Mode::Train { seed: 9 }).unwrap().0;
        assert_eq!(
            t1,
            fcn_forward(&model, &x, Mode::Train { seed: 9 }).unwrap().0
        );
        assert_ne!(t1, e1);

        let no_drop = init_model(&tiny_arch(3, 3, 1, 4, 0.0), 4).unwrap();
        assert_eq!(
            fcn_forward(&no_drop, &x, Mode::Eval).unwrap().0,
            fcn_forward(&no_drop, &x, Mode::Train { seed: 9 })
                .unwrap()
                .0
        );
    }

    fn fd_check(model: &FcnModel, x: &RealTensor3, head: &WsrHead<'_>, mode: Mode) {
        let bundle = fcn_gradient(model, x, head, mode).unwrap();
        let analytic = bundle.flat();
        let p0 = model.params();
        let fd = finite_difference_gradient(
            |p| {
                let mut m = model.clone();
                m.set_params(p).unwrap();
                let (psi, _) = fcn_forward(&m, x, mode).unwrap();
                head.value(&psi).unwrap().objective
            },
            &p0,
            1e-6,
        )
        .unwrap();
        let scale = fd.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-8);
        for (a, n) in analytic.iter().zip(&fd) {
            let err = (a - n).abs() / a.abs().max(n.abs()).max(1e-3 * scale);
            assert!(err < 1e-4, "analytic {a} vs fd {n}");
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let geo = Geometry::new(3, 3, 2, 2).unwrap();
        let w = UserWeights::new(vec![0.4, 0.6]).unwrap();
        let lb = LinkBudget::new(2.0, 2.0).unwrap();
        for seed in 0..3u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cs = random_set(&mut rng, geo);
            let x = build_features(&cs);
            let model = init_model(&tiny_arch(3, 3, 2, 3, 0.3), seed).unwrap();
            let head = WsrHead::new(&cs, &w, lb, PrecoderMode::Mmse);
            fd_check(&model, &x, &head, Mode::Eval);
            fd_check(&model, &x, &head, Mode::Train { seed: 7 });
        }
    }

    #[test]
    fn constant_objective_and_linearity() {
        let geo = Geometry::new(3, 3, 2, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cs = random_set(&mut rng, geo);
        let w = UserWeights::equal(2);
        let lb = LinkBudget::new(1.0, 2.0).unwrap();
        let x = build_features(&cs);
        let model = init_model(&tiny_arch(3, 3, 2, 3, 0.0), 1).unwrap();
        let zero = WsrHead::new(&cs, &w, lb, PrecoderMode::Mmse).with_scale(0.0);
        assert!(fcn_gradient(&model, &x, &zero, Mode::Eval)
            .unwrap()
            .flat()
            .iter()
            .all(|&g| g == 0.0));
        let one = fcn_gradient(
            &model,
            &x,
            &WsrHead::new(&cs, &w, lb, PrecoderMode::Mmse),
            Mode::Eval,
        )
        .unwrap();
        let two = fcn_gradient(
            &model,
            &x,
            &WsrHead::new(&cs, &w, lb, PrecoderMode::Mmse).with_scale(2.0),
            Mode::Eval,
        )
        .unwrap();
        for (a, b) in one.flat().iter().zip(two.flat()) {
            assert_eq!(2.0 * a, b);
        }
        let wm = WsrHead::new(&cs, &w, lb, PrecoderMode::Wmmse(Default::default()));
        assert!(matches!(
            fcn_gradient(&model, &x, &wm, Mode::Eval),
            Err(Error::UnsupportedPrimitive(_))
        ));
    }

    #[test]
    fn checkpoint_round_trip() {
        let model = init_model(&tiny_arch(3, 3, 2, 3, 0.1), 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&model, &[5, 6], &path).unwrap();
        let (back, lineage) = load_checkpoint(&path).unwrap();
        assert_eq!(back, model);
        assert_eq!(lineage, vec![5, 6]);
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Parse { .. })));
    }
}
