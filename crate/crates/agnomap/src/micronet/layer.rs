//! Layer menu: Conv2d (stride 1), ReLU, MaxPool2d (2x2), Flatten, Dense.
//!
//! Tensors are HWC row-major. Conv weights are [out_c, kh, kw, in_c] so the
//! innermost accumulation runs over the contiguous channel axis.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Same,
    Valid,
}

#[derive(Debug, Clone)]
pub enum Layer {
    Conv2d {
        weight: Tensor, // [out_c, kh, kw, in_c]
        bias: Tensor,   // [out_c]
        padding: Padding,
    },
    ReLU,
    MaxPool2d,
    Flatten,
    Dense {
        weight: Tensor, // [out, in]
        bias: Tensor,   // [out]
    },
}

/// Parameter gradients for one layer; empty for parameterless layers.
#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub tensors: Vec<Tensor>,
}

impl Layer {
    pub fn is_conv(&self) -> bool {
        matches!(self, Layer::Conv2d { .. })
    }

    /// Parameter tensors in a fixed order (weight, bias).
    pub fn params(&self) -> Vec<&Tensor> {
        match self {
            Layer::Conv2d { weight, bias, .. } | Layer::Dense { weight, bias } => {
                vec![weight, bias]
            }
            _ => vec![],
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Layer::Conv2d { weight, bias, .. } | Layer::Dense { weight, bias } => {
                vec![weight, bias]
            }
            _ => vec![],
        }
    }

    pub fn zero_grads(&self) -> LayerGrads {
        LayerGrads {
            tensors: self.params().iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    pub fn out_shape(&self, in_shape: &[usize]) -> Result<Vec<usize>> {
        match self {
            Layer::Conv2d { weight, padding, .. } => {
                let [h, w, c] = dims3(in_shape)?;
                let ws = weight.shape();
                let (out_c, kh, kw, in_c) = (ws[0], ws[1], ws[2], ws[3]);
                if in_c != c {
                    return Err(Error::Config(format!(
                        "conv expects {} input channels, got {}",
                        in_c, c
                    )));
                }
                match padding {
                    Padding::Same => Ok(vec![h, w, out_c]),
                    Padding::Valid => {
                        if h < kh || w < kw {
                            return Err(Error::Config("input smaller than kernel".into()));
                        }
                        Ok(vec![h - kh + 1, w - kw + 1, out_c])
                    }
                }
            }
            Layer::ReLU => Ok(in_shape.to_vec()),
            Layer::MaxPool2d => {
                let [h, w, c] = dims3(in_shape)?;
                if h < 2 || w < 2 {
                    return Err(Error::Config("input too small for 2x2 pool".into()));
                }
                Ok(vec![h / 2, w / 2, c])
            }
            Layer::Flatten => Ok(vec![in_shape.iter().product()]),
            Layer::Dense { weight, .. } => {
                let n: usize = in_shape.iter().product();
                let ws = weight.shape();
                if ws[1] != n {
                    return Err(Error::Config(format!(
                        "dense expects {} inputs, got {}",
                        ws[1], n
                    )));
                }
                Ok(vec![ws[0]])
            }
        }
    }

    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        match self {
            Layer::Conv2d {
                weight,
                bias,
                padding,
            } => conv_forward(input, weight, bias, *padding),
            Layer::ReLU => {
                let mut out = input.clone();
                for v in out.data_mut() {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
                Ok(out)
            }
            Layer::MaxPool2d => pool_forward(input),
            Layer::Flatten => {
                let n = input.len();
                input.clone().reshape(&[n])
            }
            Layer::Dense { weight, bias } => dense_forward(input, weight, bias),
        }
    }

    /// Gradient of the loss w.r.t. this layer's input, given the gradient
    /// w.r.t. its output. When `grads` is Some, parameter gradients are
    /// accumulated into it.
    pub fn backward(
        &self,
        input: &Tensor,
        dout: &Tensor,
        grads: Option<&mut LayerGrads>,
    ) -> Result<Tensor> {
        match self {
            Layer::Conv2d {
                weight, padding, ..
            } => conv_backward(input, weight, dout, *padding, grads),
            Layer::ReLU => {
                let mut din = dout.clone();
                for (d, x) in din.data_mut().iter_mut().zip(input.data()) {
                    if *x <= 0.0 {
                        *d = 0.0;
                    }
                }
                Ok(din)
            }
            Layer::MaxPool2d => pool_backward(input, dout),
            Layer::Flatten => dout.clone().reshape(input.shape()),
            Layer::Dense { weight, .. } => dense_backward(input, weight, dout, grads),
        }
    }
}

fn dims3(shape: &[usize]) -> Result<[usize; 3]> {
    if shape.len() != 3 {
        return Err(Error::Config(format!("expected h,w,c shape, got {:?}", shape)));
    }
    Ok([shape[0], shape[1], shape[2]])
}

fn conv_forward(input: &Tensor, weight: &Tensor, bias: &Tensor, padding: Padding) -> Result<Tensor> {
    let [h, w, c] = dims3(input.shape())?;
    let ws = weight.shape();
    let (out_c, kh, kw, in_c) = (ws[0], ws[1], ws[2], ws[3]);
    if in_c != c {
        return Err(Error::Config("channel mismatch in conv".into()));
    }
    let (oh, ow, pad_y, pad_x) = match padding {
        Padding::Same => (h, w, (kh / 2) as isize, (kw / 2) as isize),
        Padding::Valid => (h - kh + 1, w - kw + 1, 0, 0),
    };
    let mut out = Tensor::zeros(&[oh, ow, out_c]);
    let x = input.data();
    let wd = weight.data();
    let bd = bias.data();
    let od = out.data_mut();
    for v in od.chunks_exact_mut(out_c) {
        v.copy_from_slice(bd);
    }
    let span = kw * in_c;
    for oy in 0..oh {
        for ky in 0..kh {
            let iy = oy as isize + ky as isize - pad_y;
            if iy < 0 || iy >= h as isize {
                continue;
            }
            let xrow = &x[iy as usize * w * c..(iy as usize + 1) * w * c];
            for oc in 0..out_c {
                let wrow = &wd[(oc * kh + ky) * span..(oc * kh + ky + 1) * span];
                for ox in 0..ow {
                    let ix0 = ox as isize - pad_x;
                    let o = (oy * ow + ox) * out_c + oc;
                    if ix0 >= 0 && ix0 as usize + kw <= w {
                        // interior: one contiguous dot over the kx,ic span
                        let xs = &xrow[ix0 as usize * c..ix0 as usize * c + span];
                        let mut acc = 0.0;
                        for (xv, wv) in xs.iter().zip(wrow) {
                            acc += xv * wv;
                        }
                        od[o] += acc;
                    } else {
                        for kx in 0..kw {
                            let ix = ix0 + kx as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let xs = &xrow[ix as usize * c..ix as usize * c + in_c];
                            let ws = &wrow[kx * in_c..(kx + 1) * in_c];
                            for (xv, wv) in xs.iter().zip(ws) {
                                od[o] += xv * wv;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

fn conv_backward(
    input: &Tensor,
    weight: &Tensor,
    dout: &Tensor,
    padding: Padding,
    grads: Option<&mut LayerGrads>,
) -> Result<Tensor> {
    let [h, w, c] = dims3(input.shape())?;
    let ws = weight.shape();
    let (out_c, kh, kw, in_c) = (ws[0], ws[1], ws[2], ws[3]);
    let [oh, ow, _] = dims3(dout.shape())?;
    let (pad_y, pad_x) = match padding {
        Padding::Same => ((kh / 2) as isize, (kw / 2) as isize),
        Padding::Valid => (0, 0),
    };
    let mut din = Tensor::zeros(input.shape());
    let x = input.data();
    let wd = weight.data();
    let dod = dout.data();
    let did = din.data_mut();
    let (mut dw, mut db): (Option<&mut [f32]>, Option<&mut [f32]>) = match grads {
        Some(g) => {
            let (ws, bs) = g.tensors.split_at_mut(1);
            (Some(ws[0].data_mut()), Some(bs[0].data_mut()))
        }
        None => (None, None),
    };
    if let Some(b) = db.as_mut() {
        for chunk in dod.chunks_exact(out_c) {
            for (bv, g) in b.iter_mut().zip(chunk) {
                *bv += g;
            }
        }
    }
    let span = kw * in_c;
    for oy in 0..oh {
        for ky in 0..kh {
            let iy = oy as isize + ky as isize - pad_y;
            if iy < 0 || iy >= h as isize {
                continue;
            }
            let rbase = iy as usize * w * c;
            for oc in 0..out_c {
                let wbase = (oc * kh + ky) * span;
                for ox in 0..ow {
                    let g = dod[(oy * ow + ox) * out_c + oc];
                    if g == 0.0 {
                        continue;
                    }
                    let ix0 = ox as isize - pad_x;
                    if ix0 >= 0 && ix0 as usize + kw <= w {
                        // interior: axpy over the contiguous kx,ic span
                        let base = rbase + ix0 as usize * c;
                        let wrow = &wd[wbase..wbase + span];
                        for (d, wv) in did[base..base + span].iter_mut().zip(wrow) {
                            *d += g * wv;
                        }
                        if let Some(dwd) = dw.as_mut() {
                            let xs = &x[base..base + span];
                            for (d, xv) in dwd[wbase..wbase + span].iter_mut().zip(xs) {
                                *d += g * xv;
                            }
                        }
                    } else {
                        for kx in 0..kw {
                            let ix = ix0 + kx as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let xi = rbase + ix as usize * c;
                            let wi = wbase + kx * in_c;
                            for ic in 0..in_c {
                                did[xi + ic] += g * wd[wi + ic];
                            }
                            if let Some(dwd) = dw.as_mut() {
                                for ic in 0..in_c {
                                    dwd[wi + ic] += g * x[xi + ic];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(din)
}

fn pool_forward(input: &Tensor) -> Result<Tensor> {
    let [h, w, c] = dims3(input.shape())?;
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[oh, ow, c]);
    let x = input.data();
    let od = out.data_mut();
    for oy in 0..oh {
        for ox in 0..ow {
            for ch in 0..c {
                let mut best = f32::NEG_INFINITY;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let v = x[((oy * 2 + dy) * w + ox * 2 + dx) * c + ch];
                        if v > best {
                            best = v;
                        }
                    }
                }
                od[(oy * ow + ox) * c + ch] = best;
            }
        }
    }
    Ok(out)
}

fn pool_backward(input: &Tensor, dout: &Tensor) -> Result<Tensor> {
    let [h, w, c] = dims3(input.shape())?;
    let (oh, ow) = (h / 2, w / 2);
    let mut din = Tensor::zeros(input.shape());
    let x = input.data();
    let dod = dout.data();
    let did = din.data_mut();
    for oy in 0..oh {
        for ox in 0..ow {
            for ch in 0..c {
                // route to the first argmax, matching the forward tie order
                let mut best = f32::NEG_INFINITY;
                let mut best_idx = 0;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let idx = ((oy * 2 + dy) * w + ox * 2 + dx) * c + ch;
                        if x[idx] > best {
                            best = x[idx];
                            best_idx = idx;
                        }
                    }
                }
                did[best_idx] += dod[(oy * ow + ox) * c + ch];
            }
        }
    }
    Ok(din)
}

fn dense_forward(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let n = input.len();
    let ws = weight.shape();
    let (out_n, in_n) = (ws[0], ws[1]);
    if in_n != n {
        return Err(Error::Config("dense input size mismatch".into()));
    }
    let mut out = Tensor::zeros(&[out_n]);
    let x = input.data();
    let wd = weight.data();
    let od = out.data_mut();
    for o in 0..out_n {
        let row = &wd[o * in_n..(o + 1) * in_n];
        let mut acc = bias.data()[o];
        for (wv, xv) in row.iter().zip(x) {
            acc += wv * xv;
        }
        od[o] = acc;
    }
    Ok(out)
}

fn dense_backward(
    input: &Tensor,
    weight: &Tensor,
    dout: &Tensor,
    grads: Option<&mut LayerGrads>,
) -> Result<Tensor> {
    let n = input.len();
    let ws = weight.shape();
    let (out_n, in_n) = (ws[0], ws[1]);
    let mut din = Tensor::zeros(input.shape());
    let x = input.data();
    let wd = weight.data();
    let dod = dout.data();
    let did = din.data_mut();
    for o in 0..out_n {
        let g = dod[o];
        if g == 0.0 {
            continue;
        }
        let row = &wd[o * in_n..(o + 1) * in_n];
        for i in 0..n {
            did[i] += g * row[i];
        }
    }
    if let Some(gr) = grads {
        let dwd = gr.tensors[0].data_mut();
        for o in 0..out_n {
            let g = dod[o];
            let drow = &mut dwd[o * in_n..(o + 1) * in_n];
            for i in 0..n {
                drow[i] += g * x[i];
            }
        }
        let dbd = gr.tensors[1].data_mut();
        for o in 0..out_n {
            dbd[o] += dod[o];
        }
    }
    Ok(din)
}
