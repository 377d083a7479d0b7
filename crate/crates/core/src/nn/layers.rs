//! Layer kernels with hand-written backward passes.
//!
//! Activations carry no batch axis: dense layers see `[n]`, 2D layers
//! `[c, h, w]`, 3D layers `[c, d, h, w]`. Batching is a loop in the trainer.

use serde::{Deserialize, Serialize};

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum LayerSpec {
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Conv2d {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Conv3d {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    /// Weight layout `[in_ch, out_ch, k, k, k]`.
    ConvTranspose3d {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    Sigmoid,
    /// Mean over every axis after the first: `[c, ...] -> [c]`.
    GlobalAvgPool,
    Reshape(Vec<usize>),
}

/// Borrowed weight and bias of a parametric layer.
pub type ParamRefs<'a, T> = (&'a Tensor<T>, &'a Tensor<T>);
pub type GradRefs<'a, T> = (&'a mut Tensor<T>, &'a mut Tensor<T>);

impl LayerSpec {
    /// `(weight shape, bias shape)` for parametric layers.
    pub fn param_shapes(&self) -> Option<(Vec<usize>, Vec<usize>)> {
        match *self {
            LayerSpec::Dense { inputs, outputs } => Some((vec![outputs, inputs], vec![outputs])),
            LayerSpec::Conv2d {
                in_ch,
                out_ch,
                kernel,
                ..
            } => Some((vec![out_ch, in_ch, kernel, kernel], vec![out_ch])),
            LayerSpec::Conv3d {
                in_ch,
                out_ch,
                kernel,
                ..
            } => Some((vec![out_ch, in_ch, kernel, kernel, kernel], vec![out_ch])),
            LayerSpec::ConvTranspose3d {
                in_ch,
                out_ch,
                kernel,
                ..
            } => Some((vec![in_ch, out_ch, kernel, kernel, kernel], vec![out_ch])),
            _ => None,
        }
    }

    /// Number of input connections feeding one output unit, for He scaling.
    pub fn fan_in(&self) -> usize {
        match *self {
            LayerSpec::Dense { inputs, .. } => inputs,
            LayerSpec::Conv2d { in_ch, kernel, .. } => in_ch * kernel * kernel,
            LayerSpec::Conv3d { in_ch, kernel, .. } => in_ch * kernel.pow(3),
            LayerSpec::ConvTranspose3d {
                in_ch,
                kernel,
                stride,
                ..
            } => (in_ch * kernel.pow(3) / stride.pow(3)).max(1),
            _ => 0,
        }
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match self {
            LayerSpec::Dense { inputs, outputs } => {
                if input != [*inputs] {
                    return Err(shape_err(self, input));
                }
                Ok(vec![*outputs])
            }
            LayerSpec::Conv2d { .. } => {
                let s = self.geometry(input)?.small_shape();
                Ok(vec![s[0], s[2], s[3]])
            }
            LayerSpec::Conv3d { .. } => Ok(self.geometry(input)?.small_shape()),
            LayerSpec::ConvTranspose3d { .. } => Ok(self.geometry(input)?.big_shape()),
            LayerSpec::Relu | LayerSpec::Sigmoid => Ok(input.to_vec()),
            LayerSpec::GlobalAvgPool => {
                if input.len() < 2 {
                    return Err(shape_err(self, input));
                }
                Ok(vec![input[0]])
            }
            LayerSpec::Reshape(to) => {
                if to.iter().product::<usize>() != input.iter().product::<usize>() {
                    return Err(shape_err(self, input));
                }
                Ok(to.clone())
            }
        }
    }

    fn geometry(&self, input: &[usize]) -> Result<ConvGeom> {
        match *self {
            LayerSpec::Conv2d {
                in_ch,
                out_ch,
                kernel,
                stride,
                padding,
            } => {
                if input.len() != 3 || input[0] != in_ch {
                    return Err(shape_err(self, input));
                }
                ConvGeom::forward_conv(
                    in_ch,
                    out_ch,
                    [1, input[1], input[2]],
                    [1, kernel, kernel],
                    [1, stride, stride],
                    [0, padding, padding],
                )
                .ok_or_else(|| shape_err(self, input))
            }
            LayerSpec::Conv3d {
                in_ch,
                out_ch,
                kernel,
                stride,
                padding,
            } => {
                if input.len() != 4 || input[0] != in_ch {
                    return Err(shape_err(self, input));
                }
                ConvGeom::forward_conv(
                    in_ch,
                    out_ch,
                    [input[1], input[2], input[3]],
                    [kernel; 3],
                    [stride; 3],
                    [padding; 3],
                )
                .ok_or_else(|| shape_err(self, input))
            }
            LayerSpec::ConvTranspose3d {
                in_ch,
                out_ch,
                kernel,
                stride,
                padding,
            } => {
                if input.len() != 4 || input[0] != in_ch {
                    return Err(shape_err(self, input));
                }
                ConvGeom::transposed(
                    in_ch,
                    out_ch,
                    [input[1], input[2], input[3]],
                    kernel,
                    stride,
                    padding,
                )
                .ok_or_else(|| shape_err(self, input))
            }
            _ => Err(shape_err(self, input)),
        }
    }

    pub fn forward<T: Real>(
        &self,
        input: &Tensor<T>,
        params: Option<ParamRefs<'_, T>>,
    ) -> Result<Tensor<T>> {
        let out_shape = self.output_shape(input.shape())?;
        match self {
            LayerSpec::Dense { inputs, outputs } => {
                let (w, b) = params.ok_or_else(|| missing_params(self))?;
                let x = input.data();
                let mut out = b.data().to_vec();
                for (o, acc) in out.iter_mut().enumerate().take(*outputs) {
                    let row = &w.data()[o * inputs..(o + 1) * inputs];
                    *acc += dot(row, x);
                }
                Tensor::from_vec(&out_shape, out)
            }
            LayerSpec::Conv2d { .. } | LayerSpec::Conv3d { .. } => {
                let (w, b) = params.ok_or_else(|| missing_params(self))?;
                let g = self.geometry(input.shape())?;
                let mut out = Tensor::zeros(&out_shape);
                add_bias(out.data_mut(), b.data());
                g.gather(input.data(), w.data(), out.data_mut());
                Ok(out)
            }
            LayerSpec::ConvTranspose3d { .. } => {
                let (w, b) = params.ok_or_else(|| missing_params(self))?;
                let g = self.geometry(input.shape())?;
                let mut out = Tensor::zeros(&out_shape);
                add_bias(out.data_mut(), b.data());
                g.scatter(input.data(), w.data(), out.data_mut());
                Ok(out)
            }
            LayerSpec::Relu => {
                let data = input.data().iter().map(|&v| v.max(T::zero())).collect();
                Tensor::from_vec(&out_shape, data)
            }
            LayerSpec::Sigmoid => {
                let data = input.data().iter().map(|&v| sigmoid(v)).collect();
                Tensor::from_vec(&out_shape, data)
            }
            LayerSpec::GlobalAvgPool => {
                let c = input.shape()[0];
                let per = input.len() / c;
                let inv = T::one() / T::from_f64(per as f64);
                let data = input
                    .data()
                    .chunks(per)
                    .map(|ch| ch.iter().copied().sum::<T>() * inv)
                    .collect();
                Tensor::from_vec(&out_shape, data)
            }
            LayerSpec::Reshape(_) => input.clone().reshaped(&out_shape),
        }
    }

    /// Returns the gradient with respect to `input` and accumulates parameter
    /// gradients into `grads`. `output` must be the result of `forward(input)`.
    pub fn backward<T: Real>(
        &self,
        input: &Tensor<T>,
        output: &Tensor<T>,
        grad_out: &Tensor<T>,
        params: Option<ParamRefs<'_, T>>,
        grads: Option<GradRefs<'_, T>>,
    ) -> Result<Tensor<T>> {
        if grad_out.shape() != output.shape() {
            return Err(Error::DimMismatch(format!(
                "{self:?}: upstream gradient {:?} vs output {:?}",
                grad_out.shape(),
                output.shape()
            )));
        }
        match self {
            LayerSpec::Dense { inputs, outputs } => {
                let (w, _) = params.ok_or_else(|| missing_params(self))?;
                let (gw, gb) = grads.ok_or_else(|| missing_params(self))?;
                let x = input.data();
                let gy = grad_out.data();
                let mut gx = vec![T::zero(); *inputs];
                for o in 0..*outputs {
                    let g = gy[o];
                    gb.data_mut()[o] += g;
                    if g == T::zero() {
                        continue;
                    }
                    axpy(&mut gw.data_mut()[o * inputs..(o + 1) * inputs], x, g);
                    axpy(&mut gx, &w.data()[o * inputs..(o + 1) * inputs], g);
                }
                Tensor::from_vec(input.shape(), gx)
            }
            LayerSpec::Conv2d { .. } | LayerSpec::Conv3d { .. } => {
                let (w, _) = params.ok_or_else(|| missing_params(self))?;
                let (gw, gb) = grads.ok_or_else(|| missing_params(self))?;
                let g = self.geometry(input.shape())?;
                accumulate_bias_grad(gb.data_mut(), grad_out.data());
                g.weight_grad(input.data(), grad_out.data(), gw.data_mut());
                let mut gx = Tensor::zeros(input.shape());
                g.scatter(grad_out.data(), w.data(), gx.data_mut());
                Ok(gx)
            }
            LayerSpec::ConvTranspose3d { .. } => {
                let (w, _) = params.ok_or_else(|| missing_params(self))?;
                let (gw, gb) = grads.ok_or_else(|| missing_params(self))?;
                let g = self.geometry(input.shape())?;
                accumulate_bias_grad(gb.data_mut(), grad_out.data());
                g.weight_grad(grad_out.data(), input.data(), gw.data_mut());
                let mut gx = Tensor::zeros(input.shape());
                g.gather(grad_out.data(), w.data(), gx.data_mut());
                Ok(gx)
            }
            LayerSpec::Relu => {
                let data = input
                    .data()
                    .iter()
                    .zip(grad_out.data())
                    .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
                    .collect();
                Tensor::from_vec(input.shape(), data)
            }
            LayerSpec::Sigmoid => {
                let data = output
                    .data()
                    .iter()
                    .zip(grad_out.data())
                    .map(|(&y, &g)| g * y * (T::one() - y))
                    .collect();
                Tensor::from_vec(input.shape(), data)
            }
            LayerSpec::GlobalAvgPool => {
                let c = input.shape()[0];
                let per = input.len() / c;
                let inv = T::one() / T::from_f64(per as f64);
                let mut gx = Tensor::zeros(input.shape());
                for (ch, block) in gx.data_mut().chunks_mut(per).enumerate() {
                    let g = grad_out.data()[ch] * inv;
                    block.iter_mut().for_each(|v| *v = g);
                }
                Ok(gx)
            }
            LayerSpec::Reshape(_) => grad_out.clone().reshaped(input.shape()),
        }
    }
}

#[inline]
pub fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

fn add_bias<T: Real>(out: &mut [T], bias: &[T]) {
    let per = out.len() / bias.len();
    for (block, &b) in out.chunks_mut(per).zip(bias) {
        block.iter_mut().for_each(|v| *v = b);
    }
}

fn accumulate_bias_grad<T: Real>(gb: &mut [T], gy: &[T]) {
    let per = gy.len() / gb.len();
    for (g, block) in gb.iter_mut().zip(gy.chunks(per)) {
        *g += block.iter().copied().sum::<T>();
    }
}

fn shape_err(spec: &LayerSpec, input: &[usize]) -> Error {
    Error::DimMismatch(format!("{spec:?} cannot take input of shape {input:?}"))
}

fn missing_params(spec: &LayerSpec) -> Error {
    Error::Invalid(format!("{spec:?} requires parameters"))
}

/// Strided correlation between a "big" grid X `[cb, x0, x1, x2]` and a
/// "small" grid Y `[cs, y0, y1, y2]` through weights W `[cs, cb, k0, k1, k2]`:
///
/// `Y[cs][o] = sum_{cb,k} W[cs,cb,k] * X[cb][o*s + k - p]`
///
/// A convolution maps X→Y (gather), a transposed convolution maps Y→X
/// (scatter); the weight gradient is the same correlation in both cases.
#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    cb: usize,
    cs: usize,
    xs: [usize; 3],
    ys: [usize; 3],
    k: [usize; 3],
    s: [usize; 3],
    p: [usize; 3],
}

impl ConvGeom {
    fn forward_conv(
        cin: usize,
        cout: usize,
        xs: [usize; 3],
        k: [usize; 3],
        s: [usize; 3],
        p: [usize; 3],
    ) -> Option<Self> {
        let mut ys = [0; 3];
        for a in 0..3 {
            if s[a] == 0 || xs[a] + 2 * p[a] < k[a] {
                return None;
            }
            ys[a] = (xs[a] + 2 * p[a] - k[a]) / s[a] + 1;
        }
        Some(ConvGeom {
            cb: cin,
            cs: cout,
            xs,
            ys,
            k,
            s,
            p,
        })
    }

    fn transposed(
        cin: usize,
        cout: usize,
        ys: [usize; 3],
        k: usize,
        s: usize,
        p: usize,
    ) -> Option<Self> {
        let mut xs = [0; 3];
        for a in 0..3 {
            let full = (ys[a].checked_sub(1)?) * s + k;
            if s == 0 || full < 2 * p + 1 {
                return None;
            }
            xs[a] = full - 2 * p;
        }
        Some(ConvGeom {
            cb: cout,
            cs: cin,
            xs,
            ys,
            k: [k; 3],
            s: [s; 3],
            p: [p; 3],
        })
    }

    fn small_shape(&self) -> Vec<usize> {
        vec![self.cs, self.ys[0], self.ys[1], self.ys[2]]
    }

    fn big_shape(&self) -> Vec<usize> {
        vec![self.cb, self.xs[0], self.xs[1], self.xs[2]]
    }

    fn kvol(&self) -> usize {
        self.k.iter().product()
    }

    fn yvol(&self) -> usize {
        self.ys.iter().product()
    }

    fn xvol(&self) -> usize {
        self.xs.iter().product()
    }

    /// For every small-grid position and kernel tap, the offset into one
    /// big-grid channel, or `PAD` where the tap lands in the padding.
    fn taps(&self) -> Vec<usize> {
        let [y0, y1, y2] = self.ys;
        let [k0, k1, k2] = self.k;
        let mut taps = Vec::with_capacity(self.yvol() * self.kvol());
        let coord = |o: usize, kk: usize, a: usize| {
            let i = (o * self.s[a] + kk) as isize - self.p[a] as isize;
            (0..self.xs[a] as isize).contains(&i).then_some(i as usize)
        };
        for o0 in 0..y0 {
            for o1 in 0..y1 {
                for o2 in 0..y2 {
                    for a in 0..k0 {
                        for b in 0..k1 {
                            for c in 0..k2 {
                                taps.push(match (coord(o0, a, 0), coord(o1, b, 1), coord(o2, c, 2)) {
                                    (Some(i0), Some(i1), Some(i2)) => (i0 * self.xs[1] + i1) * self.xs[2] + i2,
                                    _ => PAD,
                                });
                            }
                        }
                    }
                }
            }
        }
        taps
    }

    /// Patch matrix `[yvol, cb * kvol]`: row `o` holds every big-grid value
    /// that small-grid position `o` correlates with.
    fn im2col<T: Real>(&self, x: &[T], taps: &[usize]) -> Vec<T> {
        let (kvol, xvol) = (self.kvol(), self.xvol());
        let kk = self.cb * kvol;
        let mut cols = vec![T::zero(); self.yvol() * kk];
        for (row, tap) in cols.chunks_mut(kk).zip(taps.chunks(kvol)) {
            for (cb, seg) in row.chunks_mut(kvol).enumerate() {
                let xc = &x[cb * xvol..(cb + 1) * xvol];
                for (v, &t) in seg.iter_mut().zip(tap) {
                    if t != PAD {
                        *v = xc[t];
                    }
                }
            }
        }
        cols
    }

    fn col2im<T: Real>(&self, cols: &[T], taps: &[usize], x: &mut [T]) {
        let (kvol, xvol) = (self.kvol(), self.xvol());
        let kk = self.cb * kvol;
        for (row, tap) in cols.chunks(kk).zip(taps.chunks(kvol)) {
            for (cb, seg) in row.chunks(kvol).enumerate() {
                let xc = &mut x[cb * xvol..(cb + 1) * xvol];
                for (&v, &t) in seg.iter().zip(tap) {
                    if t != PAD {
                        xc[t] += v;
                    }
                }
            }
        }
    }

    fn gather<T: Real>(&self, x: &[T], w: &[T], y: &mut [T]) {
        let taps = self.taps();
        let cols = self.im2col(x, &taps);
        let (kk, yvol) = (self.cb * self.kvol(), self.yvol());
        for (wrow, yrow) in w.chunks(kk).zip(y.chunks_mut(yvol)) {
            for (yv, col) in yrow.iter_mut().zip(cols.chunks(kk)) {
                *yv += dot(wrow, col);
            }
        }
    }

    fn scatter<T: Real>(&self, y: &[T], w: &[T], x: &mut [T]) {
        let taps = self.taps();
        let (kk, yvol) = (self.cb * self.kvol(), self.yvol());
        let mut cols = vec![T::zero(); yvol * kk];
        for (wrow, yrow) in w.chunks(kk).zip(y.chunks(yvol)) {
            for (&yv, col) in yrow.iter().zip(cols.chunks_mut(kk)) {
                if yv != T::zero() {
                    axpy(col, wrow, yv);
                }
            }
        }
        self.col2im(&cols, &taps, x);
    }

    fn weight_grad<T: Real>(&self, x: &[T], gy: &[T], gw: &mut [T]) {
        let taps = self.taps();
        let cols = self.im2col(x, &taps);
        let (kk, yvol) = (self.cb * self.kvol(), self.yvol());
        for (grow, yrow) in gw.chunks_mut(kk).zip(gy.chunks(yvol)) {
            for (&g, col) in yrow.iter().zip(cols.chunks(kk)) {
                if g != T::zero() {
                    axpy(grow, col, g);
                }
            }
        }
    }
}

const PAD: usize = usize::MAX;

/// Dot product with eight independent accumulators so the loop vectorizes.
#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: T = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(&x, &y)| x * y)
        .sum();
    for (x, y) in ca.zip(cb) {
        for j in 0..8 {
            acc[j] += x[j] * y[j];
        }
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// `y += a * x`.
#[inline]
fn axpy<T: Real>(y: &mut [T], x: &[T], a: T) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += a * xv;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(shape, v).unwrap()
    }

    #[test]
    fn dense_identity_weights_pass_input_through() {
        let spec = LayerSpec::Dense {
            inputs: 3,
            outputs: 3,
        };
        let mut w = Tensor::zeros(&[3, 3]);
        for i in 0..3 {
            w.data_mut()[i * 3 + i] = 1.0;
        }
        let b = Tensor::zeros(&[3]);
        let x = t(&[3], vec![0.5, -2.0, 7.0]);
        assert_eq!(spec.forward(&x, Some((&w, &b))).unwrap(), x);
    }

    #[test]
    fn unit_1x1_convolutions_are_identity() {
        let x2 = t(&[1, 2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let c2 = LayerSpec::Conv2d {
            in_ch: 1,
            out_ch: 1,
            kernel: 1,
            stride: 1,
            padding: 0,
        };
        let w = t(&[1, 1, 1, 1], vec![1.0]);
        let b = Tensor::zeros(&[1]);
        assert_eq!(c2.forward(&x2, Some((&w, &b))).unwrap(), x2);

        let x3 = t(&[1, 2, 2, 2], (0..8).map(f64::from).collect());
        let c3 = LayerSpec::Conv3d {
            in_ch: 1,
            out_ch: 1,
            kernel: 1,
            stride: 1,
            padding: 0,
        };
        let w3 = t(&[1, 1, 1, 1, 1], vec![1.0]);
        assert_eq!(c3.forward(&x3, Some((&w3, &b))).unwrap(), x3);
    }

    #[test]
    fn strided_shapes_halve_and_double() {
        let c = LayerSpec::Conv3d {
            in_ch: 1,
            out_ch: 4,
            kernel: 4,
            stride: 2,
            padding: 1,
        };
        assert_eq!(c.output_shape(&[1, 16, 16, 16]).unwrap(), vec![4, 8, 8, 8]);
        let ct = LayerSpec::ConvTranspose3d {
            in_ch: 4,
            out_ch: 2,
            kernel: 4,
            stride: 2,
            padding: 1,
        };
        assert_eq!(ct.output_shape(&[4, 8, 8, 8]).unwrap(), vec![2, 16, 16, 16]);
        let c2 = LayerSpec::Conv2d {
            in_ch: 2,
            out_ch: 8,
            kernel: 4,
            stride: 2,
            padding: 1,
        };
        assert_eq!(c2.output_shape(&[2, 32, 32]).unwrap(), vec![8, 16, 16]);
        assert!(c2.output_shape(&[3, 32, 32]).is_err());
    }

    #[test]
    fn conv3d_matches_naive_loop() {
        let spec = LayerSpec::Conv3d {
            in_ch: 2,
            out_ch: 3,
            kernel: 3,
            stride: 2,
            padding: 1,
        };
        let n = 5;
        let x: Vec<f64> = (0..2 * n * n * n).map(|i| ((i * 37 % 11) as f64) - 5.0).collect();
        let w: Vec<f64> = (0..3 * 2 * 27).map(|i| ((i * 13 % 7) as f64) * 0.1 - 0.3).collect();
        let b = vec![0.1, -0.2, 0.3];
        let xt = t(&[2, n, n, n], x.clone());
        let wt = t(&[3, 2, 3, 3, 3], w.clone());
        let bt = t(&[3], b.clone());
        let out = spec.forward(&xt, Some((&wt, &bt))).unwrap();
        let m = (n + 2 - 3) / 2 + 1;
        assert_eq!(out.shape(), &[3, m, m, m]);
        for co in 0..3 {
            for o0 in 0..m {
                for o1 in 0..m {
                    for o2 in 0..m {
                        let mut acc = b[co];
                        for ci in 0..2 {
                            for a in 0..3 {
                                for bb in 0..3 {
                                    for c in 0..3 {
                                        let (i0, i1, i2) = (
                                            (o0 * 2 + a) as isize - 1,
                                            (o1 * 2 + bb) as isize - 1,
                                            (o2 * 2 + c) as isize - 1,
                                        );
                                        let inside = |v: isize| v >= 0 && v < n as isize;
                                        if inside(i0) && inside(i1) && inside(i2) {
                                            let xi = ((ci * n + i0 as usize) * n + i1 as usize) * n
                                                + i2 as usize;
                                            let wi = (((co * 2 + ci) * 3 + a) * 3 + bb) * 3 + c;
                                            acc += w[wi] * x[xi];
                                        }
                                    }
                                }
                            }
                        }
                        let oi = ((co * m + o0) * m + o1) * m + o2;
                        assert!((out.data()[oi] - acc).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn global_pool_averages_each_channel() {
        let x = t(&[2, 2, 2], vec![1.0, 2.0, 3.0, 4.0, 10.0, 10.0, 10.0, 10.0]);
        let out = LayerSpec::GlobalAvgPool.forward(&x, None).unwrap();
        assert_eq!(out.data(), &[2.5, 10.0]);
    }
}
