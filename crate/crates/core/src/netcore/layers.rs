//! Layer kinds with single-sample forward and backward passes.
//!
//! Activations are stored per sample as flat row-major slices; the
//! per-sample shape is `(C, H, W)` for spatial layers and `(N,)` after
//! flattening.

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

/// Parameter-free description of a layer, used for serialization and
/// model construction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        padding: usize,
    },
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Relu,
    Maxpool {
        size: usize,
    },
    Flatten,
}

impl LayerSpec {
    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Relu => "relu",
            LayerSpec::Maxpool { .. } => "maxpool",
            LayerSpec::Flatten => "flatten",
        }
    }

    pub fn weight_len(&self) -> usize {
        match *self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => out_channels * in_channels * kernel * kernel,
            LayerSpec::Dense { inputs, outputs } => inputs * outputs,
            _ => 0,
        }
    }

    pub fn bias_len(&self) -> usize {
        match *self {
            LayerSpec::Conv2d { out_channels, .. } => out_channels,
            LayerSpec::Dense { outputs, .. } => outputs,
            _ => 0,
        }
    }

    pub fn param_len(&self) -> usize {
        self.weight_len() + self.bias_len()
    }

    /// Per-sample output shape, or a description of why `input` is rejected.
    pub fn output_shape(&self, input: &[usize]) -> std::result::Result<Vec<usize>, String> {
        match *self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                padding,
            } => {
                let [c, h, w] = spatial(input)?;
                if c != in_channels {
                    return Err(format!("expects {in_channels} input channels, got {c}"));
                }
                if kernel == 0 || h + 2 * padding < kernel || w + 2 * padding < kernel {
                    return Err(format!(
                        "kernel {kernel} with padding {padding} does not fit a {h}x{w} input"
                    ));
                }
                Ok(vec![
                    out_channels,
                    h + 2 * padding - kernel + 1,
                    w + 2 * padding - kernel + 1,
                ])
            }
            LayerSpec::Dense { inputs, outputs } => {
                if input.len() != 1 || input[0] != inputs {
                    return Err(format!("expects a flat input of {inputs}, got {input:?}"));
                }
                Ok(vec![outputs])
            }
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::Maxpool { size } => {
                let [c, h, w] = spatial(input)?;
                if size == 0 || h < size || w < size {
                    return Err(format!("pool size {size} does not fit a {h}x{w} input"));
                }
                Ok(vec![c, h / size, w / size])
            }
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
        }
    }
}

fn spatial(input: &[usize]) -> std::result::Result<[usize; 3], String> {
    match input {
        &[c, h, w] => Ok([c, h, w]),
        other => Err(format!("expects a (C, H, W) input, got {other:?}")),
    }
}

/// A layer together with its parameters (weights first, then bias).
#[derive(Debug, Clone, PartialEq)]
pub struct Layer<T> {
    pub spec: LayerSpec,
    pub params: Vec<T>,
}

impl<T: Scalar> Layer<T> {
    pub fn new(spec: LayerSpec, params: Vec<T>) -> Self {
        assert_eq!(params.len(), spec.param_len(), "parameter count for {}", spec.name());
        Self { spec, params }
    }

    pub fn weights(&self) -> &[T] {
        &self.params[..self.spec.weight_len()]
    }

    pub fn bias(&self) -> &[T] {
        &self.params[self.spec.weight_len()..]
    }

    /// Computes the output for one sample with per-sample input shape `in_shape`.
    pub fn forward(&self, in_shape: &[usize], x: &[T], out: &mut Vec<T>) {
        out.clear();
        match self.spec {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                padding,
            } => {
                let (h, w) = (in_shape[1], in_shape[2]);
                let oh = h + 2 * padding - kernel + 1;
                let ow = w + 2 * padding - kernel + 1;
                let weight = self.weights();
                let bias = self.bias();
                let mut acc = vec![0f64; oh * ow];
                out.reserve(out_channels * oh * ow);
                for oc in 0..out_channels {
                    acc.fill(bias[oc].widen());
                    for ic in 0..in_channels {
                        let plane = &x[ic * h * w..(ic + 1) * h * w];
                        let wbase = (oc * in_channels + ic) * kernel * kernel;
                        for ky in 0..kernel {
                            let (y0, y1) = valid_range(ky, padding, h, oh);
                            for kx in 0..kernel {
                                let (x0, x1) = valid_range(kx, padding, w, ow);
                                let wv = weight[wbase + ky * kernel + kx].widen();
                                for oy in y0..y1 {
                                    let src = &plane[(oy + ky - padding) * w..];
                                    let dst = &mut acc[oy * ow..(oy + 1) * ow];
                                    for ox in x0..x1 {
                                        dst[ox] += wv * src[ox + kx - padding].widen();
                                    }
                                }
                            }
                        }
                    }
                    out.extend(acc.iter().map(|&v| T::narrow(v)));
                }
            }
            LayerSpec::Dense { inputs, outputs } => {
                let weight = self.weights();
                let bias = self.bias();
                out.reserve(outputs);
                for o in 0..outputs {
                    let row = &weight[o * inputs..(o + 1) * inputs];
                    let mut acc = bias[o].widen();
                    for (wv, xv) in row.iter().zip(x) {
                        acc += wv.widen() * xv.widen();
                    }
                    out.push(T::narrow(acc));
                }
            }
            LayerSpec::Relu => {
                out.extend(x.iter().map(|&v| if v > T::zero() { v } else { T::zero() }));
            }
            LayerSpec::Maxpool { size } => {
                let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
                let (oh, ow) = (h / size, w / size);
                out.reserve(c * oh * ow);
                for ch in 0..c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let idx = pool_argmax(x, ch, oy, ox, size, h, w);
                            out.push(x[idx]);
                        }
                    }
                }
            }
            LayerSpec::Flatten => out.extend_from_slice(x),
        }
    }

    /// Propagates `grad_out` back through the layer.
    ///
    /// Writes the input gradient into `grad_in`. When `param_grad` is given
    /// it must have length `param_len()` and receives accumulated parameter
    /// gradients in the same layout as `params`.
    pub fn backward(
        &self,
        in_shape: &[usize],
        x: &[T],
        grad_out: &[T],
        grad_in: &mut Vec<T>,
        param_grad: Option<&mut [T]>,
    ) {
        grad_in.clear();
        grad_in.resize(x.len(), T::zero());
        match self.spec {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                padding,
            } => {
                let (h, w) = (in_shape[1], in_shape[2]);
                let oh = h + 2 * padding - kernel + 1;
                let ow = w + 2 * padding - kernel + 1;
                let wlen = self.spec.weight_len();
                let weight = self.weights();
                let mut pg = param_grad;
                for oc in 0..out_channels {
                    let gplane = &grad_out[oc * oh * ow..(oc + 1) * oh * ow];
                    if let Some(pg) = pg.as_deref_mut() {
                        pg[wlen + oc] += T::narrow(gplane.iter().map(|g| g.widen()).sum());
                    }
                    for ic in 0..in_channels {
                        let plane = &x[ic * h * w..(ic + 1) * h * w];
                        let gin = &mut grad_in[ic * h * w..(ic + 1) * h * w];
                        let wbase = (oc * in_channels + ic) * kernel * kernel;
                        for ky in 0..kernel {
                            let (y0, y1) = valid_range(ky, padding, h, oh);
                            for kx in 0..kernel {
                                let (x0, x1) = valid_range(kx, padding, w, ow);
                                let wi = wbase + ky * kernel + kx;
                                let wv = weight[wi];
                                let mut wgrad = 0f64;
                                for oy in y0..y1 {
                                    let row = (oy + ky - padding) * w;
                                    let g = &gplane[oy * ow..(oy + 1) * ow];
                                    for ox in x0..x1 {
                                        let xi = row + ox + kx - padding;
                                        gin[xi] += wv * g[ox];
                                        wgrad += plane[xi].widen() * g[ox].widen();
                                    }
                                }
                                if let Some(pg) = pg.as_deref_mut() {
                                    pg[wi] += T::narrow(wgrad);
                                }
                            }
                        }
                    }
                }
            }
            LayerSpec::Dense { inputs, outputs } => {
                let weight = self.weights();
                let mut acc = vec![0f64; inputs];
                for o in 0..outputs {
                    let g = grad_out[o].widen();
                    if g == 0.0 {
                        continue;
                    }
                    let row = &weight[o * inputs..(o + 1) * inputs];
                    for (a, wv) in acc.iter_mut().zip(row) {
                        *a += wv.widen() * g;
                    }
                }
                for (gi, a) in grad_in.iter_mut().zip(&acc) {
                    *gi = T::narrow(*a);
                }
                if let Some(pg) = param_grad {
                    let wlen = inputs * outputs;
                    for o in 0..outputs {
                        let g = grad_out[o];
                        pg[wlen + o] += g;
                        if g == T::zero() {
                            continue;
                        }
                        let row = &mut pg[o * inputs..(o + 1) * inputs];
                        for (p, xv) in row.iter_mut().zip(x) {
                            *p += *xv * g;
                        }
                    }
                }
            }
            LayerSpec::Relu => {
                for ((gi, &g), &v) in grad_in.iter_mut().zip(grad_out).zip(x) {
                    *gi = if v > T::zero() { g } else { T::zero() };
                }
            }
            LayerSpec::Maxpool { size } => {
                let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
                let (oh, ow) = (h / size, w / size);
                for ch in 0..c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let idx = pool_argmax(x, ch, oy, ox, size, h, w);
                            grad_in[idx] += grad_out[(ch * oh + oy) * ow + ox];
                        }
                    }
                }
            }
            LayerSpec::Flatten => grad_in.copy_from_slice(grad_out),
        }
    }
}

/// Output positions `o` in `0..out_len` for which input row/column
/// `o + k - padding` lies inside `0..in_len`.
#[inline]
fn valid_range(k: usize, padding: usize, in_len: usize, out_len: usize) -> (usize, usize) {
    let lo = padding.saturating_sub(k);
    let hi = (in_len + padding).saturating_sub(k).min(out_len);
    (lo, hi.max(lo))
}

/// Index of the window maximum; ties resolve to the first position in
/// row-major order.
#[inline]
fn pool_argmax<T: Scalar>(
    x: &[T],
    ch: usize,
    oy: usize,
    ox: usize,
    size: usize,
    h: usize,
    w: usize,
) -> usize {
    let base = ch * h * w;
    let mut best = base + oy * size * w + ox * size;
    for dy in 0..size {
        for dx in 0..size {
            let idx = base + (oy * size + dy) * w + ox * size + dx;
            if x[idx] > x[best] {
                best = idx;
            }
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_inference() {
        let conv = LayerSpec::Conv2d {
            in_channels: 1,
            out_channels: 4,
            kernel: 3,
            padding: 1,
        };
        assert_eq!(conv.output_shape(&[1, 8, 8]).unwrap(), vec![4, 8, 8]);
        assert!(conv.output_shape(&[2, 8, 8]).is_err());
        let pool = LayerSpec::Maxpool { size: 2 };
        assert_eq!(pool.output_shape(&[4, 8, 8]).unwrap(), vec![4, 4, 4]);
        assert_eq!(LayerSpec::Flatten.output_shape(&[4, 4, 4]).unwrap(), vec![64]);
        let dense = LayerSpec::Dense { inputs: 64, outputs: 10 };
        assert!(dense.output_shape(&[4, 4, 4]).is_err());
    }

    #[test]
    fn maxpool_routes_gradient_to_first_max() {
        let layer = Layer::<f64>::new(LayerSpec::Maxpool { size: 2 }, vec![]);
        let x = [1.0, 3.0, 3.0, 0.0];
        let mut out = Vec::new();
        layer.forward(&[1, 2, 2], &x, &mut out);
        assert_eq!(out, vec![3.0]);
        let mut gin = Vec::new();
        layer.backward(&[1, 2, 2], &x, &[2.0], &mut gin, None);
        assert_eq!(gin, vec![0.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn conv_identity_kernel() {
        // 1x1 conv with weight 2 and bias 1.
        let spec = LayerSpec::Conv2d {
            in_channels: 1,
            out_channels: 1,
            kernel: 1,
            padding: 0,
        };
        let layer = Layer::<f32>::new(spec, vec![2.0, 1.0]);
        let mut out = Vec::new();
        layer.forward(&[1, 2, 2], &[0.0, 1.0, 2.0, 3.0], &mut out);
        assert_eq!(out, vec![1.0, 3.0, 5.0, 7.0]);
    }
}
