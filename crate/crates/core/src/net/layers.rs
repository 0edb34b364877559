use rand::Rng;

use super::{ParamId, ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};

pub fn conv_out_size(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

fn im2col<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize, ho: usize, wo: usize) -> Vec<T> {
    let cols_n = ho * wo;
    let mut cols = vec![T::zero(); c * k * k * cols_n];
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let dst = &mut cols[row * cols_n..(row + 1) * cols_n];
                for oi in 0..ho {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let src_row = &plane[ii as usize * w..(ii as usize + 1) * w];
                    let out_row = &mut dst[oi * wo..(oi + 1) * wo];
                    if pad == 0 && stride == 1 {
                        out_row.copy_from_slice(&src_row[kj..kj + wo]);
                        continue;
                    }
                    for (oj, o) in out_row.iter_mut().enumerate() {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj >= 0 && jj < w as isize {
                            *o = src_row[jj as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(cols: &[T], c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize, ho: usize, wo: usize) -> Vec<T> {
    let cols_n = ho * wo;
    let mut x = vec![T::zero(); c * h * w];
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let src = &cols[row * cols_n..(row + 1) * cols_n];
                for oi in 0..ho {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let base = ci * h * w + ii as usize * w;
                    for oj in 0..wo {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj >= 0 && jj < w as isize {
                            x[base + jj as usize] += src[oi * wo + oj];
                        }
                    }
                }
            }
        }
    }
    x
}

/// Cached im2col buffer from a convolution forward pass.
#[derive(Debug, Clone)]
pub struct ConvCache<T> {
    pub cols: Vec<T>,
    pub in_shape: [usize; 3],
    pub out_hw: [usize; 2],
}

/// Cross-correlation of a `C×H×W` input with `O×C×k×k` kernels.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&[T]>,
    stride: usize,
    pad: usize,
) -> Result<(Tensor<T>, ConvCache<T>)> {
    let (c, h, w) = x.dims3()?;
    let (o, kc, k) = match weight.shape()[..] {
        [o, kc, k1, k2] if k1 == k2 => (o, kc, k1),
        _ => return Err(Error::ShapeMismatch(format!("bad kernel shape {:?}", weight.shape()))),
    };
    if kc != c {
        return Err(Error::ShapeMismatch(format!("kernel expects {kc} channels, input has {c}")));
    }
    if bias.is_some_and(|b| b.len() != o) {
        return Err(Error::ShapeMismatch("bias length differs from output channels".into()));
    }
    let (ho, wo) = match (conv_out_size(h, k, stride, pad), conv_out_size(w, k, stride, pad)) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(Error::ShapeMismatch(format!("kernel {k} does not fit input {h}×{w}"))),
    };
    let cols = im2col(x.data(), c, h, w, k, stride, pad, ho, wo);
    let n = ho * wo;
    let mut out = vec![T::zero(); o * n];
    if let Some(b) = bias {
        for (oc, &bv) in b.iter().enumerate() {
            out[oc * n..(oc + 1) * n].iter_mut().for_each(|v| *v = bv);
        }
    }
    T::gemm(o, c * k * k, n, weight.data(), false, &cols, false, &mut out, bias.is_some());
    Ok((
        Tensor::new(vec![o, ho, wo], out)?,
        ConvCache {
            cols,
            in_shape: [c, h, w],
            out_hw: [ho, wo],
        },
    ))
}

/// Accumulates kernel (and bias) gradients and returns the input gradient
/// when `need_dx`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Scalar>(
    weight: &Tensor<T>,
    cache: &ConvCache<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    pad: usize,
    dweight: &mut [T],
    dbias: Option<&mut [T]>,
    need_dx: bool,
) -> Result<Option<Tensor<T>>> {
    let [c, h, w] = cache.in_shape;
    let [ho, wo] = cache.out_hw;
    let o = weight.shape()[0];
    let k = weight.shape()[2];
    let n = ho * wo;
    if grad_out.shape() != [o, ho, wo] {
        return Err(Error::ShapeMismatch(format!(
            "conv grad {:?} does not match output {:?}",
            grad_out.shape(),
            [o, ho, wo]
        )));
    }
    let g = grad_out.data();
    T::gemm(o, n, c * k * k, g, false, &cache.cols, true, dweight, true);
    if let Some(db) = dbias {
        for (oc, d) in db.iter_mut().enumerate() {
            *d += g[oc * n..(oc + 1) * n].iter().copied().sum::<T>();
        }
    }
    if !need_dx {
        return Ok(None);
    }
    let mut dcols = vec![T::zero(); c * k * k * n];
    T::gemm(c * k * k, o, n, weight.data(), true, g, false, &mut dcols, false);
    let dx = col2im(&dcols, c, h, w, k, stride, pad, ho, wo);
    Ok(Some(Tensor::new(vec![c, h, w], dx)?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoolCache {
    pub argmax: Vec<usize>,
    pub in_shape: [usize; 3],
}

pub fn max_pool2d<T: Scalar>(x: &Tensor<T>, k: usize, stride: usize) -> Result<(Tensor<T>, PoolCache)> {
    let (c, h, w) = x.dims3()?;
    let (ho, wo) = match (conv_out_size(h, k, stride, 0), conv_out_size(w, k, stride, 0)) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(Error::ShapeMismatch(format!("pool {k} does not fit {h}×{w}"))),
    };
    let xd = x.data();
    let mut out = Vec::with_capacity(c * ho * wo);
    let mut argmax = Vec::with_capacity(c * ho * wo);
    for ci in 0..c {
        for oi in 0..ho {
            for oj in 0..wo {
                let mut best = ci * h * w + oi * stride * w + oj * stride;
                for di in 0..k {
                    for dj in 0..k {
                        let idx = ci * h * w + (oi * stride + di) * w + oj * stride + dj;
                        if xd[idx] > xd[best] {
                            best = idx;
                        }
                    }
                }
                out.push(xd[best]);
                argmax.push(best);
            }
        }
    }
    Ok((
        Tensor::new(vec![c, ho, wo], out)?,
        PoolCache {
            argmax,
            in_shape: [c, h, w],
        },
    ))
}

pub fn max_pool2d_backward<T: Scalar>(cache: &PoolCache, grad_out: &Tensor<T>) -> Tensor<T> {
    let [c, h, w] = cache.in_shape;
    let mut dx = vec![T::zero(); c * h * w];
    for (&i, &g) in cache.argmax.iter().zip(grad_out.data()) {
        dx[i] += g;
    }
    Tensor::new(vec![c, h, w], dx).expect("pool input shape")
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let data = x.data().iter().map(|&v| v.max(T::zero())).collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

/// ReLU backward given the ReLU *output*.
pub fn relu_backward<T: Scalar>(out: &Tensor<T>, grad: &Tensor<T>) -> Tensor<T> {
    let data = out
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&o, &g)| if o > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::new(out.shape().to_vec(), data).expect("same shape")
}

/// Depthwise valid cross-correlation of a `D×th×tw` template over a
/// `D×sh×sw` search map.
pub fn cross_correlate<T: Scalar>(template: &Tensor<T>, search: &Tensor<T>) -> Result<Tensor<T>> {
    let (d, th, tw) = template.dims3()?;
    let (ds, sh, sw) = search.dims3()?;
    if d != ds || th > sh || tw > sw {
        return Err(Error::ShapeMismatch(format!(
            "cannot correlate template {:?} over search {:?}",
            template.shape(),
            search.shape()
        )));
    }
    let (oh, ow) = (sh - th + 1, sw - tw + 1);
    let t = template.data();
    let s = search.data();
    let mut out = vec![T::zero(); d * oh * ow];
    for c in 0..d {
        let tp = &t[c * th * tw..(c + 1) * th * tw];
        let sp = &s[c * sh * sw..(c + 1) * sh * sw];
        let op = &mut out[c * oh * ow..(c + 1) * oh * ow];
        for a in 0..th {
            for b in 0..tw {
                let tv = tp[a * tw + b];
                for i in 0..oh {
                    let srow = &sp[(i + a) * sw + b..(i + a) * sw + b + ow];
                    for (o, &sv) in op[i * ow..(i + 1) * ow].iter_mut().zip(srow) {
                        *o += tv * sv;
                    }
                }
            }
        }
    }
    Tensor::new(vec![d, oh, ow], out)
}

/// Returns `(d_template, d_search)`.
pub fn cross_correlate_backward<T: Scalar>(
    template: &Tensor<T>,
    search: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (d, th, tw) = template.dims3()?;
    let (_, sh, sw) = search.dims3()?;
    let (oh, ow) = (sh - th + 1, sw - tw + 1);
    if grad_out.shape() != [d, oh, ow] {
        return Err(Error::ShapeMismatch("correlation grad shape".into()));
    }
    let t = template.data();
    let s = search.data();
    let g = grad_out.data();
    let mut dt = vec![T::zero(); t.len()];
    let mut dsr = vec![T::zero(); s.len()];
    for c in 0..d {
        let tp = &t[c * th * tw..(c + 1) * th * tw];
        let sp = &s[c * sh * sw..(c + 1) * sh * sw];
        let gp = &g[c * oh * ow..(c + 1) * oh * ow];
        let dsp = &mut dsr[c * sh * sw..(c + 1) * sh * sw];
        for a in 0..th {
            for b in 0..tw {
                let tv = tp[a * tw + b];
                let mut acc = T::zero();
                for i in 0..oh {
                    let base = (i + a) * sw + b;
                    for j in 0..ow {
                        let gv = gp[i * ow + j];
                        acc += gv * sp[base + j];
                        dsp[base + j] += gv * tv;
                    }
                }
                dt[c * th * tw + a * tw + b] = acc;
            }
        }
    }
    Ok((Tensor::new(template.shape().to_vec(), dt)?, Tensor::new(search.shape().to_vec(), dsr)?))
}

/// `y = x · Wᵀ + b` for `x: n×in`, `W: out×in`.
pub fn linear<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, bias: Option<&[T]>) -> Result<Tensor<T>> {
    let (n, i) = x.dims2()?;
    let (o, wi) = weight.dims2()?;
    if i != wi {
        return Err(Error::ShapeMismatch(format!("linear expects {wi} inputs, got {i}")));
    }
    let mut out = vec![T::zero(); n * o];
    if let Some(b) = bias {
        for row in out.chunks_mut(o) {
            row.copy_from_slice(b);
        }
    }
    T::gemm(n, i, o, x.data(), false, weight.data(), true, &mut out, bias.is_some());
    Tensor::new(vec![n, o], out)
}

/// Accumulates weight/bias gradients and returns the input gradient.
pub fn linear_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    dweight: &mut [T],
    dbias: Option<&mut [T]>,
    need_dx: bool,
) -> Result<Option<Tensor<T>>> {
    let (n, i) = x.dims2()?;
    let (o, _) = weight.dims2()?;
    if grad_out.shape() != [n, o] {
        return Err(Error::ShapeMismatch("linear grad shape".into()));
    }
    let g = grad_out.data();
    T::gemm(o, n, i, g, true, x.data(), false, dweight, true);
    if let Some(db) = dbias {
        for row in g.chunks(o) {
            for (d, &v) in db.iter_mut().zip(row) {
                *d += v;
            }
        }
    }
    if !need_dx {
        return Ok(None);
    }
    let mut dx = vec![T::zero(); n * i];
    T::gemm(n, o, i, g, false, weight.data(), false, &mut dx, false);
    Ok(Some(Tensor::new(vec![n, i], dx)?))
}

/// A convolution layer whose parameters live in a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        with_bias: bool,
        rng: &mut R,
    ) -> Self {
        let weight = store.add_he(
            &format!("{name}.weight"),
            vec![out_ch, in_ch, kernel, kernel],
            in_ch * kernel * kernel,
            rng,
        );
        let bias = with_bias.then(|| store.add_zeros(&format!("{name}.bias"), vec![out_ch]));
        Self {
            weight,
            bias,
            in_ch,
            out_ch,
            kernel,
            stride,
            padding,
        }
    }

    pub fn out_size(&self, input: usize) -> Option<usize> {
        conv_out_size(input, self.kernel, self.stride, self.padding)
    }

    fn weight_tensor<T: Scalar>(&self, store: &ParamStore<T>) -> Tensor<T> {
        let p = store.get(self.weight);
        Tensor::new(p.shape.clone(), p.value.clone()).expect("parameter shape")
    }

    pub fn forward<T: Scalar>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<(Tensor<T>, ConvCache<T>)> {
        let w = self.weight_tensor(store);
        conv2d(x, &w, self.bias.map(|b| store.value(b)), self.stride, self.padding)
    }

    pub fn backward<T: Scalar>(
        &self,
        store: &mut ParamStore<T>,
        cache: &ConvCache<T>,
        grad_out: &Tensor<T>,
        need_dx: bool,
    ) -> Result<Option<Tensor<T>>> {
        let w = self.weight_tensor(store);
        let mut dw = store.take_grad(self.weight);
        let mut db = self.bias.map(|b| store.take_grad(b));
        let dx = conv2d_backward(&w, cache, grad_out, self.stride, self.padding, &mut dw, db.as_deref_mut(), need_dx);
        store.put_grad(self.weight, dw);
        if let (Some(b), Some(db)) = (self.bias, db) {
            store.put_grad(b, db);
        }
        dx
    }
}

/// A fully-connected layer whose parameters live in a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let weight = store.add_he(&format!("{name}.weight"), vec![out_dim, in_dim], in_dim, rng);
        let bias = store.add_zeros(&format!("{name}.bias"), vec![out_dim]);
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    fn weight_tensor<T: Scalar>(&self, store: &ParamStore<T>) -> Tensor<T> {
        Tensor::new(vec![self.out_dim, self.in_dim], store.value(self.weight).to_vec()).expect("parameter shape")
    }

    pub fn forward<T: Scalar>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        linear(x, &self.weight_tensor(store), Some(store.value(self.bias)))
    }

    pub fn backward<T: Scalar>(
        &self,
        store: &mut ParamStore<T>,
        x: &Tensor<T>,
        grad_out: &Tensor<T>,
        need_dx: bool,
    ) -> Result<Option<Tensor<T>>> {
        let w = self.weight_tensor(store);
        let mut dw = store.take_grad(self.weight);
        let mut db = store.take_grad(self.bias);
        let dx = linear_backward(x, &w, grad_out, &mut dw, Some(&mut db), need_dx);
        store.put_grad(self.weight, dw);
        store.put_grad(self.bias, db);
        dx
    }
}

/// Per-point MLP with ReLU after every layer, followed by a max-pool over
/// points.
#[derive(Debug, Clone, PartialEq)]
pub struct SharedMlp {
    pub layers: Vec<Linear>,
}

/// Activations kept for [`SharedMlp::backward`].
#[derive(Debug, Clone)]
pub struct SharedMlpCache<T> {
    /// Layer inputs: the points, then each hidden activation.
    pub activations: Vec<Tensor<T>>,
    /// Point index that won the max for every output channel.
    pub argmax: Vec<usize>,
}

impl SharedMlp {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, in_dim: usize, widths: &[usize], rng: &mut R) -> Self {
        let mut layers = Vec::with_capacity(widths.len());
        let mut prev = in_dim;
        for (i, &w) in widths.iter().enumerate() {
            layers.push(Linear::new(store, &format!("{name}.{i}"), prev, w, rng));
            prev = w;
        }
        Self { layers }
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_dim)
    }

    /// Returns the per-point features (`n × out`), the global max-pooled
    /// feature and the cache.
    pub fn forward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        points: &Tensor<T>,
    ) -> Result<(Tensor<T>, Vec<T>, SharedMlpCache<T>)> {
        let (n, _) = points.dims2()?;
        if n == 0 {
            return Err(Error::InvalidInput("shared MLP needs at least one point".into()));
        }
        let mut activations = vec![points.clone()];
        let mut h = points.clone();
        for layer in &self.layers {
            h = relu(&layer.forward(store, &h)?);
            activations.push(h.clone());
        }
        let feats = activations.pop().expect("at least the input");
        activations.push(feats.clone());
        let d = self.out_dim();
        let mut global = feats.data()[..d].to_vec();
        let mut argmax = vec![0usize; d];
        for (p, row) in feats.data().chunks(d).enumerate().skip(1) {
            for ((g, a), &v) in global.iter_mut().zip(argmax.iter_mut()).zip(row) {
                if v > *g {
                    *g = v;
                    *a = p;
                }
            }
        }
        Ok((feats, global, SharedMlpCache { activations, argmax }))
    }

    /// Backpropagates a gradient on the pooled feature. Only the points that
    /// won a max receive gradient, so the pass runs on those rows alone.
    /// Returns `(point_index, d_point)` pairs for the contributing points.
    pub fn backward<T: Scalar>(
        &self,
        store: &mut ParamStore<T>,
        cache: &SharedMlpCache<T>,
        grad_global: &[T],
    ) -> Result<Vec<(usize, Vec<T>)>> {
        let d = self.out_dim();
        if grad_global.len() != d {
            return Err(Error::ShapeMismatch("pooled gradient length".into()));
        }
        let mut rows: Vec<usize> = cache.argmax.clone();
        rows.sort_unstable();
        rows.dedup();
        let slot = |p: usize| rows.binary_search(&p).expect("argmax row");
        let mut g = vec![T::zero(); rows.len() * d];
        for (ch, (&p, &gv)) in cache.argmax.iter().zip(grad_global).enumerate() {
            g[slot(p) * d + ch] += gv;
        }
        let gather = |t: &Tensor<T>| -> Tensor<T> {
            let w = t.shape()[1];
            let mut out = Vec::with_capacity(rows.len() * w);
            for &r in &rows {
                out.extend_from_slice(&t.data()[r * w..(r + 1) * w]);
            }
            Tensor::new(vec![rows.len(), w], out).expect("gather shape")
        };
        let mut grad = Tensor::new(vec![rows.len(), d], g)?;
        for (li, layer) in self.layers.iter().enumerate().rev() {
            let out = gather(&cache.activations[li + 1]);
            grad = relu_backward(&out, &grad);
            let input = gather(&cache.activations[li]);
            grad = layer
                .backward(store, &input, &grad, true)?
                .expect("input gradient requested");
        }
        let w = grad.shape()[1];
        Ok(rows
            .iter()
            .enumerate()
            .map(|(i, &r)| (r, grad.data()[i * w..(i + 1) * w].to_vec()))
            .collect())
    }
}
