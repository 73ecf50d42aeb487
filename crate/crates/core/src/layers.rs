//! Layer definitions and their forward/backward kernels.
//!
//! Dense weights are stored `in × out` (row `j` holds the outgoing weights of
//! input unit `j`), convolution weights `out_channels × in_channels × kh × kw`.
//! Spatial tensors are laid out `channels × height × width`.

use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LayerKind {
    Dense,
    Conv2D,
    ReLU,
    SumPool,
    AvgPool,
    MaxPool,
    Flatten,
}

impl LayerKind {
    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Dense => "Dense",
            LayerKind::Conv2D => "Conv2D",
            LayerKind::ReLU => "ReLU",
            LayerKind::SumPool => "SumPool",
            LayerKind::AvgPool => "AvgPool",
            LayerKind::MaxPool => "MaxPool",
            LayerKind::Flatten => "Flatten",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Some(match name {
            "Dense" => LayerKind::Dense,
            "Conv2D" => LayerKind::Conv2D,
            "ReLU" => LayerKind::ReLU,
            "SumPool" => LayerKind::SumPool,
            "AvgPool" => LayerKind::AvgPool,
            "MaxPool" => LayerKind::MaxPool,
            "Flatten" => LayerKind::Flatten,
            _ => return None,
        })
    }

    pub fn is_pool(self) -> bool {
        matches!(
            self,
            LayerKind::SumPool | LayerKind::AvgPool | LayerKind::MaxPool
        )
    }

    pub fn has_params(self) -> bool {
        matches!(self, LayerKind::Dense | LayerKind::Conv2D)
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Pooling window geometry. Pools never pad.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolSpec {
    pub window: [usize; 2],
    pub stride: usize,
}

impl PoolSpec {
    pub fn new(window: [usize; 2], stride: usize) -> Self {
        PoolSpec { window, stride }
    }

    /// Non-overlapping square pool.
    pub fn square(size: usize) -> Self {
        PoolSpec {
            window: [size, size],
            stride: size,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Dense {
        weights: Tensor,
        bias: Tensor,
    },
    Conv2D {
        weights: Tensor,
        bias: Tensor,
        stride: usize,
        padding: usize,
    },
    ReLU,
    SumPool(PoolSpec),
    AvgPool(PoolSpec),
    MaxPool(PoolSpec),
    Flatten,
}

impl Layer {
    pub fn dense(weights: Tensor, bias: Tensor) -> Self {
        Layer::Dense { weights, bias }
    }

    pub fn conv2d(weights: Tensor, bias: Tensor, stride: usize, padding: usize) -> Self {
        Layer::Conv2D {
            weights,
            bias,
            stride,
            padding,
        }
    }

    pub fn kind(&self) -> LayerKind {
        match self {
            Layer::Dense { .. } => LayerKind::Dense,
            Layer::Conv2D { .. } => LayerKind::Conv2D,
            Layer::ReLU => LayerKind::ReLU,
            Layer::SumPool(_) => LayerKind::SumPool,
            Layer::AvgPool(_) => LayerKind::AvgPool,
            Layer::MaxPool(_) => LayerKind::MaxPool,
            Layer::Flatten => LayerKind::Flatten,
        }
    }

    pub fn weights(&self) -> Option<&Tensor> {
        match self {
            Layer::Dense { weights, .. } | Layer::Conv2D { weights, .. } => Some(weights),
            _ => None,
        }
    }

    pub fn bias(&self) -> Option<&Tensor> {
        match self {
            Layer::Dense { bias, .. } | Layer::Conv2D { bias, .. } => Some(bias),
            _ => None,
        }
    }

    pub(crate) fn params_mut(&mut self) -> Option<(&mut Tensor, &mut Tensor)> {
        match self {
            Layer::Dense { weights, bias } | Layer::Conv2D { weights, bias, .. } => {
                Some((weights, bias))
            }
            _ => None,
        }
    }

    pub fn pool_spec(&self) -> Option<PoolSpec> {
        match self {
            Layer::SumPool(p) | Layer::AvgPool(p) | Layer::MaxPool(p) => Some(*p),
            _ => None,
        }
    }

    /// Output shape for the given input shape, validating parameter shapes.
    pub fn output_shape(&self, input: &[usize], index: usize) -> Result<Vec<usize>> {
        match self {
            Layer::Dense { weights, bias } => {
                let ws = weights.shape();
                if ws.len() != 2 {
                    return Err(Error::layer(
                        index,
                        format!("dense weights must be 2-D (in × out), got {ws:?}"),
                    ));
                }
                if input != [ws[0]] {
                    return Err(Error::layer(
                        index,
                        format!("dense layer expects input [{}], got {input:?}", ws[0]),
                    ));
                }
                if bias.shape() != [ws[1]] {
                    return Err(Error::layer(
                        index,
                        format!(
                            "bias shape {:?} does not match {} outputs",
                            bias.shape(),
                            ws[1]
                        ),
                    ));
                }
                Ok(vec![ws[1]])
            }
            Layer::Conv2D {
                weights,
                bias,
                stride,
                padding,
            } => {
                let g = ConvGeometry::new(weights.shape(), input, *stride, *padding)
                    .map_err(|m| Error::layer(index, m))?;
                if bias.shape() != [g.out_c] {
                    return Err(Error::layer(
                        index,
                        format!(
                            "bias shape {:?} does not match {} output channels",
                            bias.shape(),
                            g.out_c
                        ),
                    ));
                }
                Ok(vec![g.out_c, g.oh, g.ow])
            }
            Layer::ReLU => Ok(input.to_vec()),
            Layer::SumPool(p) | Layer::AvgPool(p) | Layer::MaxPool(p) => {
                let g = PoolGeometry::new(p, input).map_err(|m| Error::layer(index, m))?;
                Ok(vec![g.c, g.oh, g.ow])
            }
            Layer::Flatten => Ok(vec![input.iter().product()]),
        }
    }

    /// Applies the layer. Max-pooling additionally returns, per output unit,
    /// the linear input index of the pool winner.
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Option<Vec<usize>>)> {
        let out_shape = self.output_shape(x.shape(), 0)?;
        let out = match self {
            Layer::Dense { weights, bias } => {
                let mut z = self.linear_forward(weights.data(), x)?;
                for (zk, bk) in z.iter_mut().zip(bias.data()) {
                    *zk += bk;
                }
                z
            }
            Layer::Conv2D { weights, bias, .. } => {
                let mut z = self.linear_forward(weights.data(), x)?;
                let per_channel = z.len() / bias.len();
                for (zc, bk) in z.chunks_mut(per_channel).zip(bias.data()) {
                    zc.iter_mut().for_each(|v| *v += bk);
                }
                z
            }
            Layer::ReLU => x.data().iter().map(|&v| v.max(0.0)).collect(),
            Layer::SumPool(p) => PoolGeometry::new(p, x.shape())
                .map_err(Error::invalid)?
                .sum(x.data()),
            Layer::AvgPool(p) => {
                let g = PoolGeometry::new(p, x.shape()).map_err(Error::invalid)?;
                let n = (p.window[0] * p.window[1]) as f64;
                g.sum(x.data()).into_iter().map(|v| v / n).collect()
            }
            Layer::MaxPool(p) => {
                let g = PoolGeometry::new(p, x.shape()).map_err(Error::invalid)?;
                let winners = g.argmax(x.data());
                let out = winners.iter().map(|&i| x.data()[i]).collect();
                return Ok((Tensor::new(out_shape, out)?, Some(winners)));
            }
            Layer::Flatten => x.data().to_vec(),
        };
        Ok((Tensor::new(out_shape, out)?, None))
    }

    /// Vector-Jacobian product with respect to the layer input.
    ///
    /// The ReLU derivative at zero is taken to be zero.
    pub fn backward_input(
        &self,
        input: &Tensor,
        winners: Option<&[usize]>,
        grad_out: &Tensor,
    ) -> Result<Tensor> {
        let data = match self {
            Layer::Dense { weights, .. } | Layer::Conv2D { weights, .. } => {
                self.linear_transpose(weights.data(), input.shape(), grad_out.data())?
            }
            Layer::ReLU => input
                .data()
                .iter()
                .zip(grad_out.data())
                .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
                .collect(),
            Layer::SumPool(p) => PoolGeometry::new(p, input.shape())
                .map_err(Error::invalid)?
                .sum_transpose(grad_out.data()),
            Layer::AvgPool(p) => {
                let n = (p.window[0] * p.window[1]) as f64;
                PoolGeometry::new(p, input.shape())
                    .map_err(Error::invalid)?
                    .sum_transpose(grad_out.data())
                    .into_iter()
                    .map(|v| v / n)
                    .collect()
            }
            Layer::MaxPool(_) => {
                let winners =
                    winners.ok_or_else(|| Error::invalid("max-pool backward needs winners"))?;
                let mut g = vec![0.0; input.len()];
                for (&w, &go) in winners.iter().zip(grad_out.data()) {
                    g[w] += go;
                }
                g
            }
            Layer::Flatten => grad_out.data().to_vec(),
        };
        Tensor::new(input.shape().to_vec(), data)
    }

    /// Gradients of `<grad_out, layer(input)>` with respect to weights and bias.
    pub fn param_grads(&self, input: &Tensor, grad_out: &Tensor) -> Option<(Tensor, Tensor)> {
        match self {
            Layer::Dense { weights, bias } => {
                let (n_in, n_out) = (weights.shape()[0], weights.shape()[1]);
                let mut dw = vec![0.0; n_in * n_out];
                for (j, &xj) in input.data().iter().enumerate() {
                    if xj == 0.0 {
                        continue;
                    }
                    let row = &mut dw[j * n_out..(j + 1) * n_out];
                    for (d, &g) in row.iter_mut().zip(grad_out.data()) {
                        *d += xj * g;
                    }
                }
                Some((
                    Tensor::new(weights.shape().to_vec(), dw).ok()?,
                    Tensor::new(bias.shape().to_vec(), grad_out.data().to_vec()).ok()?,
                ))
            }
            Layer::Conv2D {
                weights,
                bias,
                stride,
                padding,
            } => {
                let g =
                    ConvGeometry::new(weights.shape(), input.shape(), *stride, *padding).ok()?;
                let dw = g.weight_grad(input.data(), grad_out.data());
                let plane = g.oh * g.ow;
                let db = grad_out
                    .data()
                    .chunks(plane)
                    .map(|c| c.iter().sum())
                    .collect();
                Some((
                    Tensor::new(weights.shape().to_vec(), dw).ok()?,
                    Tensor::new(bias.shape().to_vec(), db).ok()?,
                ))
            }
            _ => None,
        }
    }

    /// Bias-free linear map `x ↦ Wᵀx` (dense) or `x ↦ W ⋆ x` (convolution),
    /// evaluated with an arbitrary weight array of the layer's weight shape.
    pub(crate) fn linear_forward(&self, weights: &[f64], x: &Tensor) -> Result<Vec<f64>> {
        match self {
            Layer::Dense { weights: w, .. } => {
                let (n_in, n_out) = (w.shape()[0], w.shape()[1]);
                Ok(dense_forward(weights, n_in, n_out, x.data()))
            }
            Layer::Conv2D {
                weights: w,
                stride,
                padding,
                ..
            } => {
                let g = ConvGeometry::new(w.shape(), x.shape(), *stride, *padding)
                    .map_err(Error::invalid)?;
                Ok(g.forward(weights, x.data()))
            }
            _ => Err(Error::invalid(format!(
                "{} layer has no linear map",
                self.kind()
            ))),
        }
    }

    /// Transpose of [`Layer::linear_forward`].
    pub(crate) fn linear_transpose(
        &self,
        weights: &[f64],
        input_shape: &[usize],
        s: &[f64],
    ) -> Result<Vec<f64>> {
        match self {
            Layer::Dense { weights: w, .. } => {
                let (n_in, n_out) = (w.shape()[0], w.shape()[1]);
                Ok(dense_transpose(weights, n_in, n_out, s))
            }
            Layer::Conv2D {
                weights: w,
                stride,
                padding,
                ..
            } => {
                let g = ConvGeometry::new(w.shape(), input_shape, *stride, *padding)
                    .map_err(Error::invalid)?;
                Ok(g.transpose(weights, s))
            }
            _ => Err(Error::invalid(format!(
                "{} layer has no linear map",
                self.kind()
            ))),
        }
    }
}

/// `z_k = Σ_j x_j w_jk` for an `n_in × n_out` row-major matrix.
pub(crate) fn dense_forward(w: &[f64], n_in: usize, n_out: usize, x: &[f64]) -> Vec<f64> {
    debug_assert_eq!(w.len(), n_in * n_out);
    let mut z = vec![0.0; n_out];
    for (j, &xj) in x.iter().enumerate().take(n_in) {
        let row = &w[j * n_out..(j + 1) * n_out];
        for (zk, &wjk) in z.iter_mut().zip(row) {
            *zk += xj * wjk;
        }
    }
    z
}

/// `c_j = Σ_k w_jk s_k`.
pub(crate) fn dense_transpose(w: &[f64], n_in: usize, n_out: usize, s: &[f64]) -> Vec<f64> {
    (0..n_in)
        .map(|j| {
            w[j * n_out..(j + 1) * n_out]
                .iter()
                .zip(s)
                .map(|(a, b)| a * b)
                .sum()
        })
        .collect()
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeometry {
    pub in_c: usize,
    pub h: usize,
    pub w: usize,
    pub out_c: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeometry {
    pub fn new(
        weight_shape: &[usize],
        input: &[usize],
        stride: usize,
        pad: usize,
    ) -> std::result::Result<Self, String> {
        if weight_shape.len() != 4 {
            return Err(format!(
                "conv weights must be 4-D (out × in × kh × kw), got {weight_shape:?}"
            ));
        }
        if input.len() != 3 {
            return Err(format!("conv input must be 3-D (c × h × w), got {input:?}"));
        }
        if stride == 0 {
            return Err("conv stride must be positive".into());
        }
        let (out_c, in_c, kh, kw) = (
            weight_shape[0],
            weight_shape[1],
            weight_shape[2],
            weight_shape[3],
        );
        if input[0] != in_c {
            return Err(format!(
                "conv expects {in_c} input channels, got {}",
                input[0]
            ));
        }
        let (h, w) = (input[1], input[2]);
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(format!(
                "kernel {kh}×{kw} larger than padded input {}×{}",
                h + 2 * pad,
                w + 2 * pad
            ));
        }
        Ok(ConvGeometry {
            in_c,
            h,
            w,
            out_c,
            kh,
            kw,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (w + 2 * pad - kw) / stride + 1,
        })
    }

    /// Calls `visit(out_index, in_index, weight_index)` for every edge of the
    /// convolution that touches a real (non-padding) input.
    #[inline]
    fn for_each_edge(&self, mut visit: impl FnMut(usize, usize, usize)) {
        let plane_in = self.h * self.w;
        let plane_out = self.oh * self.ow;
        for o in 0..self.out_c {
            for c in 0..self.in_c {
                for ki in 0..self.kh {
                    for kj in 0..self.kw {
                        let widx = ((o * self.in_c + c) * self.kh + ki) * self.kw + kj;
                        for oy in 0..self.oh {
                            let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                            if iy < 0 || iy >= self.h as isize {
                                continue;
                            }
                            for ox in 0..self.ow {
                                let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                                if ix < 0 || ix >= self.w as isize {
                                    continue;
                                }
                                visit(
                                    o * plane_out + oy * self.ow + ox,
                                    c * plane_in + iy as usize * self.w + ix as usize,
                                    widx,
                                );
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, weights: &[f64], x: &[f64]) -> Vec<f64> {
        let mut z = vec![0.0; self.out_c * self.oh * self.ow];
        self.for_each_edge(|o, i, w| z[o] += weights[w] * x[i]);
        z
    }

    pub fn transpose(&self, weights: &[f64], s: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; self.in_c * self.h * self.w];
        self.for_each_edge(|o, i, w| c[i] += weights[w] * s[o]);
        c
    }

    pub fn weight_grad(&self, x: &[f64], g: &[f64]) -> Vec<f64> {
        let mut dw = vec![0.0; self.out_c * self.in_c * self.kh * self.kw];
        self.for_each_edge(|o, i, w| dw[w] += x[i] * g[o]);
        dw
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct PoolGeometry {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub ph: usize,
    pub pw: usize,
    pub stride: usize,
    pub oh: usize,
    pub ow: usize,
}

impl PoolGeometry {
    pub fn new(spec: &PoolSpec, input: &[usize]) -> std::result::Result<Self, String> {
        if input.len() != 3 {
            return Err(format!("pool input must be 3-D (c × h × w), got {input:?}"));
        }
        let [ph, pw] = spec.window;
        if ph == 0 || pw == 0 || spec.stride == 0 {
            return Err("pool window and stride must be positive".into());
        }
        let (c, h, w) = (input[0], input[1], input[2]);
        if h < ph || w < pw {
            return Err(format!("pool window {ph}×{pw} larger than input {h}×{w}"));
        }
        Ok(PoolGeometry {
            c,
            h,
            w,
            ph,
            pw,
            stride: spec.stride,
            oh: (h - ph) / spec.stride + 1,
            ow: (w - pw) / spec.stride + 1,
        })
    }

    pub fn out_len(&self) -> usize {
        self.c * self.oh * self.ow
    }

    /// Linear input indices of the pool feeding output unit `o`, in row-major
    /// window order.
    pub fn members(&self, o: usize) -> impl Iterator<Item = usize> + '_ {
        let plane = self.oh * self.ow;
        let (ch, rem) = (o / plane, o % plane);
        let (oy, ox) = (rem / self.ow, rem % self.ow);
        let base = ch * self.h * self.w;
        (0..self.ph).flat_map(move |i| {
            (0..self.pw).map(move |j| base + (oy * self.stride + i) * self.w + ox * self.stride + j)
        })
    }

    pub fn sum(&self, x: &[f64]) -> Vec<f64> {
        (0..self.out_len())
            .map(|o| self.members(o).map(|i| x[i]).sum())
            .collect()
    }

    pub fn sum_transpose(&self, s: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.c * self.h * self.w];
        for (o, &so) in s.iter().enumerate() {
            for i in self.members(o) {
                out[i] += so;
            }
        }
        out
    }

    /// Winner per pool; ties go to the lowest linear input index.
    pub fn argmax(&self, x: &[f64]) -> Vec<usize> {
        (0..self.out_len())
            .map(|o| {
                let mut best = usize::MAX;
                for i in self.members(o) {
                    if best == usize::MAX || x[i] > x[best] || (x[i] == x[best] && i < best) {
                        best = i;
                    }
                }
                best
            })
            .collect()
    }
}
