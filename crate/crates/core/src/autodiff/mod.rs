//! Minimal reverse-mode automatic differentiation over dense f64 tensors.
//!
//! A [`Graph`] records operations define-by-run; [`Graph::backward`]
//! propagates a scalar loss back to every parameter leaf and accumulates
//! into the bound [`ParamStore`]. Shapes are plain dimension lists; the only
//! broadcasting is scalar-with-tensor. Spectral transforms participate as
//! linear ops whose backward applies the exact adjoint.

mod adam;
mod checkpoint;
mod fd;
mod store;

pub use adam::AdamState;
pub use checkpoint::{load_store, save_store, CHECKPOINT_VERSION};
pub use fd::{fd_check, FdReport};
pub use store::{ParamId, ParamStore};

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::stft::{istft_adjoint_raw, istft_raw, stft_adjoint_raw, stft_raw, StftConfig};

/// Dense row-major buffer plus its shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Array {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Array {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Array {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(Error::ShapeError(format!(
                "shape {:?} wants {} values, got {}",
                shape,
                expect,
                data.len()
            )));
        }
        Ok(Array {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn scalar(v: f64) -> Self {
        Array {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Tensor(usize);

enum Op {
    Leaf { param: Option<ParamId> },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddScalar(usize),
    MulScalar(usize, f64),
    MulScalarT { x: usize, s: usize },
    Recip(usize),
    Sqrt(usize),
    Log(usize),
    Tanh(usize),
    OneMinusTanh(usize),
    Sigmoid(usize),
    Relu(usize),
    ClampMin(usize, f64),
    Softmax(usize),
    Sum(usize),
    Mean(usize),
    MeanPoolHw(usize),
    Matmul(usize, usize),
    Conv2d {
        x: usize,
        k: usize,
        bias: Option<usize>,
        stride: usize,
        pad: usize,
    },
    Conv1d {
        x: usize,
        k: usize,
        bias: Option<usize>,
        stride: usize,
        pad: usize,
    },
    Concat0(Vec<usize>),
    SliceAxis0 {
        x: usize,
        start: usize,
    },
    CropHw {
        x: usize,
        h0: usize,
        w0: usize,
    },
    Upsample2(usize),
    Reshape(usize),
    Stft {
        x: usize,
        cfg: StftConfig,
    },
    Istft {
        x: usize,
        cfg: StftConfig,
        frames: usize,
        source_len: usize,
    },
}

struct Node {
    value: Array,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run computation graph.
pub struct Graph {
    nodes: Vec<Node>,
    param_cache: HashMap<ParamId, Tensor>,
    track_grad: bool,
}

impl Graph {
    /// Graph that tracks gradients for parameter leaves.
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            param_cache: HashMap::new(),
            track_grad: true,
        }
    }

    /// Forward-only graph; parameter leaves behave like constants.
    pub fn inference() -> Self {
        Graph {
            track_grad: false,
            ..Graph::new()
        }
    }

    pub fn value(&self, t: Tensor) -> &Array {
        &self.nodes[t.0].value
    }

    pub fn shape(&self, t: Tensor) -> &[usize] {
        self.nodes[t.0].value.shape()
    }

    pub fn requires_grad(&self, t: Tensor) -> bool {
        self.nodes[t.0].requires_grad
    }

    pub fn scalar_value(&self, t: Tensor) -> f64 {
        debug_assert_eq!(self.nodes[t.0].value.len(), 1);
        self.nodes[t.0].value.data()[0]
    }

    fn push(&mut self, value: Array, op: Op, requires_grad: bool) -> Result<Tensor> {
        if !value.is_finite() {
            return Err(Error::NumericError(op_name(&op).into()));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad: requires_grad && self.track_grad,
        });
        Ok(Tensor(self.nodes.len() - 1))
    }

    fn rg(&self, t: Tensor) -> bool {
        self.nodes[t.0].requires_grad
    }

    pub fn constant(&mut self, value: Array) -> Result<Tensor> {
        self.push(value, Op::Leaf { param: None }, false)
    }

    pub fn constant_vec(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let a = Array::from_vec(shape, data)?;
        self.constant(a)
    }

    pub fn constant_scalar(&mut self, v: f64) -> Result<Tensor> {
        self.constant(Array::scalar(v))
    }

    /// Leaf carrying a parameter's current value. Repeated requests for the
    /// same parameter share one node so gradients accumulate naturally.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Tensor> {
        if let Some(&t) = self.param_cache.get(&id) {
            return Ok(t);
        }
        let t = self.push(store.value(id).clone(), Op::Leaf { param: Some(id) }, true)?;
        self.param_cache.insert(id, t);
        Ok(t)
    }

    fn same_shape(&self, a: Tensor, b: Tensor, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeError(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_ew(&mut self, a: Tensor, b: Tensor, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let data: Vec<f64> = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        self.push(Array::from_vec(&shape, data)?, op, rg)
    }

    pub fn add(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.same_shape(a, b, "add")?;
        self.zip_ew(a, b, Op::Add(a.0, b.0), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.same_shape(a, b, "sub")?;
        self.zip_ew(a, b, Op::Sub(a.0, b.0), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.same_shape(a, b, "mul")?;
        self.zip_ew(a, b, Op::Mul(a.0, b.0), |x, y| x * y)
    }

    pub fn div(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.same_shape(a, b, "div")?;
        self.zip_ew(a, b, Op::Div(a.0, b.0), |x, y| x / y)
    }

    fn map_ew(&mut self, a: Tensor, op: Op, f: impl Fn(f64) -> f64) -> Result<Tensor> {
        let data: Vec<f64> = self.nodes[a.0].value.data().iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(Array::from_vec(&shape, data)?, op, rg)
    }

    pub fn add_scalar(&mut self, a: Tensor, c: f64) -> Result<Tensor> {
        self.map_ew(a, Op::AddScalar(a.0), |x| x + c)
    }

    pub fn mul_scalar(&mut self, a: Tensor, c: f64) -> Result<Tensor> {
        self.map_ew(a, Op::MulScalar(a.0, c), |x| x * c)
    }

    /// Multiply a tensor by a one-element tensor (the only broadcast form).
    pub fn mul_scalar_t(&mut self, x: Tensor, s: Tensor) -> Result<Tensor> {
        if self.nodes[s.0].value.len() != 1 {
            return Err(Error::ShapeError(format!(
                "scalar operand must have one element, got {:?}",
                self.shape(s)
            )));
        }
        let sv = self.nodes[s.0].value.data()[0];
        let data: Vec<f64> = self.nodes[x.0].value.data().iter().map(|&v| v * sv).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(s);
        self.push(
            Array::from_vec(&shape, data)?,
            Op::MulScalarT { x: x.0, s: s.0 },
            rg,
        )
    }

    pub fn recip(&mut self, a: Tensor) -> Result<Tensor> {
        self.map_ew(a, Op::Recip(a.0), |x| 1.0 / x)
    }

    pub fn sqrt(&mut self, a: Tensor) -> Result<Tensor> {
        self.map_ew(a, Op::Sqrt(a.0), f64::sqrt)
    }

    pub fn log(&mut self, a: Tensor) -> Result<Tensor> {
        self.map_ew(a, Op::Log(a.0), f64::ln)
    }

    pub fn tanh(&mut self, a: Tensor) -> Result<Tensor> {
        self.map_ew(a, Op::Tanh(a.0), f64::tanh)
    }

    /// 1 - tanh(x) computed as 2 / (e^{2x} + 1), which stays strictly
    /// positive far beyond where `1.0 - tanh(x)` would round to zero.
    pub fn one_minus_tanh(&mut self, a: Tensor) -> Result<Tensor> {
        self.map_ew(a, Op::OneMinusTanh(a.0), one_minus_tanh_stable)
    }

    pub fn sigmoid(&mut self, a: Tensor) -> Result<Tensor> {
        self.map_ew(a, Op::Sigmoid(a.0), |x| 1.0 / (1.0 + (-x).exp()))
    }

    pub fn relu(&mut self, a: Tensor) -> Result<Tensor> {
        self.map_ew(a, Op::Relu(a.0), |x| x.max(0.0))
    }

    pub fn clamp_min(&mut self, a: Tensor, c: f64) -> Result<Tensor> {
        self.map_ew(a, Op::ClampMin(a.0, c), |x| x.max(c))
    }

    /// Numerically-stable softmax over a 1-D tensor.
    pub fn softmax(&mut self, a: Tensor) -> Result<Tensor> {
        if self.shape(a).len() != 1 {
            return Err(Error::ShapeError(format!(
                "softmax wants a 1-D tensor, got {:?}",
                self.shape(a)
            )));
        }
        let v = self.nodes[a.0].value.data();
        let max = v.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        let exps: Vec<f64> = v.iter().map(|&x| (x - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        let data: Vec<f64> = exps.iter().map(|&e| e / sum).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(Array::from_vec(&shape, data)?, Op::Softmax(a.0), rg)
    }

    pub fn sum(&mut self, a: Tensor) -> Result<Tensor> {
        let s: f64 = self.nodes[a.0].value.data().iter().sum();
        let rg = self.rg(a);
        self.push(Array::scalar(s), Op::Sum(a.0), rg)
    }

    pub fn mean(&mut self, a: Tensor) -> Result<Tensor> {
        if self.nodes[a.0].value.is_empty() {
            return Err(Error::ShapeError("mean of empty tensor".into()));
        }
        let v = self.nodes[a.0].value.data();
        let m: f64 = v.iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(a);
        self.push(Array::scalar(m), Op::Mean(a.0), rg)
    }

    /// [C, H, W] -> [C], averaging each channel plane.
    pub fn mean_pool_hw(&mut self, a: Tensor) -> Result<Tensor> {
        let sh = self.shape(a).to_vec();
        if sh.len() != 3 {
            return Err(Error::ShapeError(format!("mean_pool_hw wants CHW, got {sh:?}")));
        }
        let (c, hw) = (sh[0], sh[1] * sh[2]);
        let v = self.nodes[a.0].value.data();
        let data: Vec<f64> = (0..c)
            .map(|ch| v[ch * hw..(ch + 1) * hw].iter().sum::<f64>() / hw as f64)
            .collect();
        let rg = self.rg(a);
        self.push(Array::from_vec(&[c], data)?, Op::MeanPoolHw(a.0), rg)
    }

    /// [m, k] x [k, n] -> [m, n], or [m, k] x [k] -> [m].
    pub fn matmul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let (m, k) = match sa.as_slice() {
            [m, k] => (*m, *k),
            _ => return Err(Error::ShapeError(format!("matmul lhs must be 2-D, got {sa:?}"))),
        };
        let (k2, n, vec_rhs) = match sb.as_slice() {
            [k2, n] => (*k2, *n, false),
            [k2] => (*k2, 1, true),
            _ => return Err(Error::ShapeError(format!("matmul rhs must be 1-D or 2-D, got {sb:?}"))),
        };
        if k != k2 {
            return Err(Error::ShapeError(format!("matmul inner dims {k} vs {k2}")));
        }
        let va = self.nodes[a.0].value.data();
        let vb = self.nodes[b.0].value.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for l in 0..k {
                let ail = va[i * k + l];
                if ail == 0.0 {
                    continue;
                }
                let row_b = &vb[l * n..(l + 1) * n];
                let row_o = &mut out[i * n..(i + 1) * n];
                for (o, &bv) in row_o.iter_mut().zip(row_b) {
                    *o += ail * bv;
                }
            }
        }
        let shape: Vec<usize> = if vec_rhs { vec![m] } else { vec![m, n] };
        let rg = self.rg(a) || self.rg(b);
        self.push(Array::from_vec(&shape, out)?, Op::Matmul(a.0, b.0), rg)
    }

    /// 2-D convolution: x [C, H, W], k [O, C, KH, KW], optional bias [O].
    pub fn conv2d(
        &mut self,
        x: Tensor,
        k: Tensor,
        bias: Option<Tensor>,
        stride: usize,
        pad: usize,
    ) -> Result<Tensor> {
        let sx = self.shape(x).to_vec();
        let sk = self.shape(k).to_vec();
        let ([c, h, w], [o, ck, kh, kw]) = (match sx.as_slice() {
            [a, b, c] => [*a, *b, *c],
            _ => return Err(Error::ShapeError(format!("conv2d input must be CHW, got {sx:?}"))),
        }, match sk.as_slice() {
            [a, b, c, d] => [*a, *b, *c, *d],
            _ => return Err(Error::ShapeError(format!("conv2d kernel must be OIHW, got {sk:?}"))),
        });
        if ck != c {
            return Err(Error::ShapeError(format!("conv2d channels {c} vs kernel {ck}")));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::ShapeError(format!(
                "conv2d input {h}x{w} too small for kernel {kh}x{kw} at pad {pad}"
            )));
        }
        if let Some(b) = bias {
            if self.shape(b) != [o] {
                return Err(Error::ShapeError(format!(
                    "conv2d bias {:?}, want [{o}]",
                    self.shape(b)
                )));
            }
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        let vx = self.nodes[x.0].value.data();
        let vk = self.nodes[k.0].value.data();
        let mut out = vec![0.0; o * ho * wo];
        if let Some(b) = bias {
            let vb = self.nodes[b.0].value.data();
            for oc in 0..o {
                out[oc * ho * wo..(oc + 1) * ho * wo].fill(vb[oc]);
            }
        }
        conv2d_forward(vx, vk, &mut out, c, h, w, o, kh, kw, ho, wo, stride, pad);
        let rg = self.rg(x) || self.rg(k) || bias.map(|b| self.rg(b)).unwrap_or(false);
        self.push(
            Array::from_vec(&[o, ho, wo], out)?,
            Op::Conv2d {
                x: x.0,
                k: k.0,
                bias: bias.map(|b| b.0),
                stride,
                pad,
            },
            rg,
        )
    }

    /// 1-D convolution: x [C, L], k [O, C, K], optional bias [O].
    pub fn conv1d(
        &mut self,
        x: Tensor,
        k: Tensor,
        bias: Option<Tensor>,
        stride: usize,
        pad: usize,
    ) -> Result<Tensor> {
        let sx = self.shape(x).to_vec();
        let sk = self.shape(k).to_vec();
        let (c, l) = match sx.as_slice() {
            [c, l] => (*c, *l),
            _ => return Err(Error::ShapeError(format!("conv1d input must be CL, got {sx:?}"))),
        };
        let (o, ck, kk) = match sk.as_slice() {
            [o, ck, kk] => (*o, *ck, *kk),
            _ => return Err(Error::ShapeError(format!("conv1d kernel must be OIK, got {sk:?}"))),
        };
        if ck != c {
            return Err(Error::ShapeError(format!("conv1d channels {c} vs kernel {ck}")));
        }
        if l + 2 * pad < kk {
            return Err(Error::ShapeError("conv1d input shorter than kernel".into()));
        }
        let lo = (l + 2 * pad - kk) / stride + 1;
        let vx = self.nodes[x.0].value.data();
        let vk = self.nodes[k.0].value.data();
        let mut out = vec![0.0; o * lo];
        if let Some(b) = bias {
            if self.shape(b) != [o] {
                return Err(Error::ShapeError("conv1d bias shape".into()));
            }
            let vb = self.nodes[b.0].value.data();
            for oc in 0..o {
                out[oc * lo..(oc + 1) * lo].fill(vb[oc]);
            }
        }
        for oc in 0..o {
            for ic in 0..c {
                for ki in 0..kk {
                    let wgt = vk[(oc * c + ic) * kk + ki];
                    if wgt == 0.0 {
                        continue;
                    }
                    for li in 0..lo {
                        let src = li as isize * stride as isize + ki as isize - pad as isize;
                        if src >= 0 && (src as usize) < l {
                            out[oc * lo + li] += wgt * vx[ic * l + src as usize];
                        }
                    }
                }
            }
        }
        let rg = self.rg(x) || self.rg(k) || bias.map(|b| self.rg(b)).unwrap_or(false);
        self.push(
            Array::from_vec(&[o, lo], out)?,
            Op::Conv1d {
                x: x.0,
                k: k.0,
                bias: bias.map(|b| b.0),
                stride,
                pad,
            },
            rg,
        )
    }

    /// Concatenate along the first axis; remaining dims must match.
    pub fn concat0(&mut self, parts: &[Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::ShapeError("concat of nothing".into()));
        }
        let tail = self.shape(parts[0])[1..].to_vec();
        let mut dim0 = 0;
        for &p in parts {
            if self.shape(p)[1..] != tail[..] {
                return Err(Error::ShapeError(format!(
                    "concat tail dims differ: {:?} vs {:?}",
                    &self.shape(p)[1..],
                    tail
                )));
            }
            dim0 += self.shape(p)[0];
        }
        let mut shape = vec![dim0];
        shape.extend_from_slice(&tail);
        let mut data = Vec::with_capacity(shape.iter().product());
        for &p in parts {
            data.extend_from_slice(self.nodes[p.0].value.data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(
            Array::from_vec(&shape, data)?,
            Op::Concat0(parts.iter().map(|p| p.0).collect()),
            rg,
        )
    }

    /// Take `len` slabs starting at `start` along the first axis.
    pub fn slice_axis0(&mut self, x: Tensor, start: usize, len: usize) -> Result<Tensor> {
        let sh = self.shape(x).to_vec();
        if sh.is_empty() || start + len > sh[0] {
            return Err(Error::ShapeError(format!(
                "slice [{start}, {}) out of axis-0 extent {:?}",
                start + len,
                sh
            )));
        }
        let slab: usize = sh[1..].iter().product();
        let data = self.nodes[x.0].value.data()[start * slab..(start + len) * slab].to_vec();
        let mut shape = vec![len];
        shape.extend_from_slice(&sh[1..]);
        let rg = self.rg(x);
        self.push(
            Array::from_vec(&shape, data)?,
            Op::SliceAxis0 { x: x.0, start },
            rg,
        )
    }

    /// Crop a CHW tensor to `[C, hlen, wlen]` starting at (h0, w0).
    pub fn crop_hw(&mut self, x: Tensor, h0: usize, hlen: usize, w0: usize, wlen: usize) -> Result<Tensor> {
        let sh = self.shape(x).to_vec();
        let (c, h, w) = match sh.as_slice() {
            [c, h, w] => (*c, *h, *w),
            _ => return Err(Error::ShapeError(format!("crop_hw wants CHW, got {sh:?}"))),
        };
        if h0 + hlen > h || w0 + wlen > w {
            return Err(Error::ShapeError(format!(
                "crop ({h0}+{hlen}, {w0}+{wlen}) exceeds {h}x{w}"
            )));
        }
        let v = self.nodes[x.0].value.data();
        let mut data = Vec::with_capacity(c * hlen * wlen);
        for ch in 0..c {
            for i in 0..hlen {
                let row = (ch * h + h0 + i) * w + w0;
                data.extend_from_slice(&v[row..row + wlen]);
            }
        }
        let rg = self.rg(x);
        self.push(
            Array::from_vec(&[c, hlen, wlen], data)?,
            Op::CropHw { x: x.0, h0, w0 },
            rg,
        )
    }

    /// Nearest-neighbor 2x upsampling of a CHW tensor.
    pub fn upsample2(&mut self, x: Tensor) -> Result<Tensor> {
        let sh = self.shape(x).to_vec();
        let (c, h, w) = match sh.as_slice() {
            [c, h, w] => (*c, *h, *w),
            _ => return Err(Error::ShapeError(format!("upsample2 wants CHW, got {sh:?}"))),
        };
        let v = self.nodes[x.0].value.data();
        let mut data = vec![0.0; c * 4 * h * w];
        let (h2, w2) = (2 * h, 2 * w);
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let val = v[(ch * h + i) * w + j];
                    let base = (ch * h2 + 2 * i) * w2 + 2 * j;
                    data[base] = val;
                    data[base + 1] = val;
                    data[base + w2] = val;
                    data[base + w2 + 1] = val;
                }
            }
        }
        let rg = self.rg(x);
        self.push(Array::from_vec(&[c, h2, w2], data)?, Op::Upsample2(x.0), rg)
    }

    /// Reinterpret the buffer under a new shape of identical length.
    pub fn reshape(&mut self, x: Tensor, shape: &[usize]) -> Result<Tensor> {
        let expect: usize = shape.iter().product();
        if expect != self.nodes[x.0].value.len() {
            return Err(Error::ShapeError(format!(
                "reshape {:?} -> {:?} changes element count",
                self.shape(x),
                shape
            )));
        }
        let data = self.nodes[x.0].value.data().to_vec();
        let rg = self.rg(x);
        self.push(Array::from_vec(shape, data)?, Op::Reshape(x.0), rg)
    }

    /// STFT of a 1-D tensor as a [2, F, T] tensor (real plane, imag plane).
    pub fn stft(&mut self, x: Tensor, cfg: &StftConfig) -> Result<Tensor> {
        let sh = self.shape(x).to_vec();
        let n = match sh.as_slice() {
            [n] => *n,
            _ => return Err(Error::ShapeError(format!("stft wants 1-D, got {sh:?}"))),
        };
        if n < cfg.win_len {
            return Err(Error::SignalTooShort {
                len: n,
                min: cfg.win_len,
            });
        }
        let (re, im, f, t) = stft_raw(self.nodes[x.0].value.data(), cfg);
        let mut data = re;
        data.extend_from_slice(&im);
        let rg = self.rg(x);
        self.push(
            Array::from_vec(&[2, f, t], data)?,
            Op::Stft { x: x.0, cfg: *cfg },
            rg,
        )
    }

    /// Inverse STFT of a [2, F, T] tensor back to `source_len` samples.
    pub fn istft(&mut self, x: Tensor, cfg: &StftConfig, source_len: usize) -> Result<Tensor> {
        let sh = self.shape(x).to_vec();
        let (f, t) = match sh.as_slice() {
            [2, f, t] => (*f, *t),
            _ => return Err(Error::ShapeError(format!("istft wants [2,F,T], got {sh:?}"))),
        };
        if f != cfg.bins() || t != cfg.frames(source_len) {
            return Err(Error::GeometryMismatch(format!(
                "[2,{f},{t}] does not match config for {source_len} samples"
            )));
        }
        let v = self.nodes[x.0].value.data();
        let y = istft_raw(&v[..f * t], &v[f * t..], cfg, t, source_len);
        let rg = self.rg(x);
        self.push(
            Array::from_vec(&[source_len], y)?,
            Op::Istft {
                x: x.0,
                cfg: *cfg,
                frames: t,
                source_len,
            },
            rg,
        )
    }

    /// Mean squared error between two same-shape tensors.
    pub fn mse(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        self.mean(sq)
    }

    /// Backpropagate from a scalar `loss`, scaling the seed gradient by
    /// `seed`. Accumulates into the grads of `store` and consumes the graph.
    pub fn backward(self, loss: Tensor, seed: f64, store: &mut ParamStore) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::ShapeError(format!(
                "backward needs a scalar loss, got {:?}",
                self.shape(loss)
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![seed]);
        for i in (0..n).rev() {
            if !self.nodes[i].requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NumericError(format!(
                    "gradient of {}",
                    op_name(&self.nodes[i].op)
                )));
            }
            self.propagate(i, &g, &mut grads, store)?;
        }
        Ok(())
    }

    fn grad_slot<'a>(
        grads: &'a mut [Option<Vec<f64>>],
        nodes: &[Node],
        idx: usize,
    ) -> Option<&'a mut Vec<f64>> {
        if !nodes[idx].requires_grad {
            return None;
        }
        Some(grads[idx].get_or_insert_with(|| vec![0.0; nodes[idx].value.len()]))
    }

    fn propagate(
        &self,
        i: usize,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        store: &mut ParamStore,
    ) -> Result<()> {
        // Split borrows: values read-only, grads mutable.
        let nodes = &self.nodes;
        macro_rules! slot {
            ($idx:expr) => {
                Graph::grad_slot(grads, nodes, $idx)
            };
        }
        match &nodes[i].op {
            Op::Leaf { param } => {
                if let Some(pid) = param {
                    store.accumulate_grad(*pid, g)?;
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = slot!(*a) {
                    axpy(ga, g, 1.0);
                }
                if let Some(gb) = slot!(*b) {
                    axpy(gb, g, 1.0);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = slot!(*a) {
                    axpy(ga, g, 1.0);
                }
                if let Some(gb) = slot!(*b) {
                    axpy(gb, g, -1.0);
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                if let Some(ga) = slot!(a) {
                    let vb = nodes[b].value.data();
                    for ((ga, &g), &vb) in ga.iter_mut().zip(g).zip(vb) {
                        *ga += g * vb;
                    }
                }
                if let Some(gb) = slot!(b) {
                    let va = nodes[a].value.data();
                    for ((gb, &g), &va) in gb.iter_mut().zip(g).zip(va) {
                        *gb += g * va;
                    }
                }
            }
            Op::Div(a, b) => {
                let (a, b) = (*a, *b);
                if let Some(ga) = slot!(a) {
                    let vb = nodes[b].value.data();
                    for ((ga, &g), &vb) in ga.iter_mut().zip(g).zip(vb) {
                        *ga += g / vb;
                    }
                }
                if let Some(gb) = slot!(b) {
                    let va = nodes[a].value.data();
                    let vb = nodes[b].value.data();
                    for (((gb, &g), &va), &vb) in gb.iter_mut().zip(g).zip(va).zip(vb) {
                        *gb -= g * va / (vb * vb);
                    }
                }
            }
            Op::AddScalar(a) => {
                if let Some(ga) = slot!(*a) {
                    axpy(ga, g, 1.0);
                }
            }
            Op::MulScalar(a, c) => {
                let c = *c;
                if let Some(ga) = slot!(*a) {
                    axpy(ga, g, c);
                }
            }
            Op::MulScalarT { x, s } => {
                let (x, s) = (*x, *s);
                let sv = nodes[s].value.data()[0];
                if let Some(gx) = slot!(x) {
                    axpy(gx, g, sv);
                }
                if let Some(gs) = slot!(s) {
                    let vx = nodes[x].value.data();
                    gs[0] += g.iter().zip(vx).map(|(&g, &v)| g * v).sum::<f64>();
                }
            }
            Op::Recip(a) => {
                let a = *a;
                if let Some(ga) = slot!(a) {
                    let z = nodes[i].value.data();
                    for ((ga, &g), &z) in ga.iter_mut().zip(g).zip(z) {
                        *ga -= g * z * z;
                    }
                }
            }
            Op::Sqrt(a) => {
                let a = *a;
                if let Some(ga) = slot!(a) {
                    let z = nodes[i].value.data();
                    for ((ga, &g), &z) in ga.iter_mut().zip(g).zip(z) {
                        *ga += 0.5 * g / z;
                    }
                }
            }
            Op::Log(a) => {
                let a = *a;
                if let Some(ga) = slot!(a) {
                    let va = nodes[a].value.data();
                    for ((ga, &g), &v) in ga.iter_mut().zip(g).zip(va) {
                        *ga += g / v;
                    }
                }
            }
            Op::Tanh(a) => {
                let a = *a;
                if let Some(ga) = slot!(a) {
                    let z = nodes[i].value.data();
                    for ((ga, &g), &z) in ga.iter_mut().zip(g).zip(z) {
                        *ga += g * (1.0 - z * z);
                    }
                }
            }
            Op::OneMinusTanh(a) => {
                // d/dx [1 - tanh(x)] = -(1 - tanh^2) = -m(2 - m) for m = 1 - tanh.
                let a = *a;
                if let Some(ga) = slot!(a) {
                    let z = nodes[i].value.data();
                    for ((ga, &g), &z) in ga.iter_mut().zip(g).zip(z) {
                        *ga -= g * z * (2.0 - z);
                    }
                }
            }
            Op::Sigmoid(a) => {
                let a = *a;
                if let Some(ga) = slot!(a) {
                    let z = nodes[i].value.data();
                    for ((ga, &g), &z) in ga.iter_mut().zip(g).zip(z) {
                        *ga += g * z * (1.0 - z);
                    }
                }
            }
            Op::Relu(a) => {
                let a = *a;
                if let Some(ga) = slot!(a) {
                    let va = nodes[a].value.data();
                    for ((ga, &g), &v) in ga.iter_mut().zip(g).zip(va) {
                        if v > 0.0 {
                            *ga += g;
                        }
                    }
                }
            }
            Op::ClampMin(a, c) => {
                let (a, c) = (*a, *c);
                if let Some(ga) = slot!(a) {
                    let va = nodes[a].value.data();
                    for ((ga, &g), &v) in ga.iter_mut().zip(g).zip(va) {
                        if v > c {
                            *ga += g;
                        }
                    }
                }
            }
            Op::Softmax(a) => {
                let a = *a;
                if let Some(ga) = slot!(a) {
                    let z = nodes[i].value.data();
                    let gz: f64 = g.iter().zip(z).map(|(&g, &z)| g * z).sum();
                    for ((ga, &g), &z) in ga.iter_mut().zip(g).zip(z) {
                        *ga += z * (g - gz);
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = slot!(*a) {
                    for ga in ga.iter_mut() {
                        *ga += g[0];
                    }
                }
            }
            Op::Mean(a) => {
                let a = *a;
                let n = nodes[a].value.len() as f64;
                if let Some(ga) = slot!(a) {
                    let s = g[0] / n;
                    for ga in ga.iter_mut() {
                        *ga += s;
                    }
                }
            }
            Op::MeanPoolHw(a) => {
                let a = *a;
                let sh = nodes[a].value.shape();
                let (c, hw) = (sh[0], sh[1] * sh[2]);
                if let Some(ga) = slot!(a) {
                    for ch in 0..c {
                        let s = g[ch] / hw as f64;
                        for v in ga[ch * hw..(ch + 1) * hw].iter_mut() {
                            *v += s;
                        }
                    }
                }
            }
            Op::Matmul(a, b) => {
                let (a, b) = (*a, *b);
                let sa = nodes[a].value.shape();
                let (m, k) = (sa[0], sa[1]);
                let n = nodes[i].value.len() / m;
                if let Some(ga) = slot!(a) {
                    let vb = nodes[b].value.data();
                    for ii in 0..m {
                        for l in 0..k {
                            let row_b = &vb[l * n..(l + 1) * n];
                            let row_g = &g[ii * n..(ii + 1) * n];
                            ga[ii * k + l] += row_g.iter().zip(row_b).map(|(&x, &y)| x * y).sum::<f64>();
                        }
                    }
                }
                if let Some(gb) = slot!(b) {
                    let va = nodes[a].value.data();
                    for ii in 0..m {
                        let row_g = &g[ii * n..(ii + 1) * n];
                        for l in 0..k {
                            let ail = va[ii * k + l];
                            if ail == 0.0 {
                                continue;
                            }
                            let row_gb = &mut gb[l * n..(l + 1) * n];
                            for (gb, &gv) in row_gb.iter_mut().zip(row_g) {
                                *gb += ail * gv;
                            }
                        }
                    }
                }
            }
            Op::Conv2d {
                x,
                k,
                bias,
                stride,
                pad,
            } => {
                let (x, k, bias, stride, pad) = (*x, *k, *bias, *stride, *pad);
                let sx = nodes[x].value.shape().to_vec();
                let sk = nodes[k].value.shape().to_vec();
                let (c, h, w) = (sx[0], sx[1], sx[2]);
                let (o, kh, kw) = (sk[0], sk[2], sk[3]);
                let ho = (h + 2 * pad - kh) / stride + 1;
                let wo = (w + 2 * pad - kw) / stride + 1;
                if let Some(gx) = slot!(x) {
                    conv2d_backward_input(nodes[k].value.data(), g, gx, c, h, w, o, kh, kw, ho, wo, stride, pad);
                }
                if let Some(gk) = slot!(k) {
                    conv2d_backward_kernel(nodes[x].value.data(), g, gk, c, h, w, o, kh, kw, ho, wo, stride, pad);
                }
                if let Some(b) = bias {
                    if let Some(gb) = slot!(b) {
                        for oc in 0..o {
                            gb[oc] += g[oc * ho * wo..(oc + 1) * ho * wo].iter().sum::<f64>();
                        }
                    }
                }
            }
            Op::Conv1d {
                x,
                k,
                bias,
                stride,
                pad,
            } => {
                let (x, k, bias, stride, pad) = (*x, *k, *bias, *stride, *pad);
                let sx = nodes[x].value.shape().to_vec();
                let sk = nodes[k].value.shape().to_vec();
                let (c, l) = (sx[0], sx[1]);
                let (o, kk) = (sk[0], sk[2]);
                let lo = (l + 2 * pad - kk) / stride + 1;
                if let Some(gx) = slot!(x) {
                    let vk = nodes[k].value.data();
                    for oc in 0..o {
                        for ic in 0..c {
                            for ki in 0..kk {
                                let wgt = vk[(oc * c + ic) * kk + ki];
                                if wgt == 0.0 {
                                    continue;
                                }
                                for li in 0..lo {
                                    let src = li as isize * stride as isize + ki as isize - pad as isize;
                                    if src >= 0 && (src as usize) < l {
                                        gx[ic * l + src as usize] += wgt * g[oc * lo + li];
                                    }
                                }
                            }
                        }
                    }
                }
                if let Some(gk) = slot!(k) {
                    let vx = nodes[x].value.data();
                    for oc in 0..o {
                        for ic in 0..c {
                            for ki in 0..kk {
                                let mut acc = 0.0;
                                for li in 0..lo {
                                    let src = li as isize * stride as isize + ki as isize - pad as isize;
                                    if src >= 0 && (src as usize) < l {
                                        acc += vx[ic * l + src as usize] * g[oc * lo + li];
                                    }
                                }
                                gk[(oc * c + ic) * kk + ki] += acc;
                            }
                        }
                    }
                }
                if let Some(b) = bias {
                    if let Some(gb) = slot!(b) {
                        for oc in 0..o {
                            gb[oc] += g[oc * lo..(oc + 1) * lo].iter().sum::<f64>();
                        }
                    }
                }
            }
            Op::Concat0(parts) => {
                let parts = parts.clone();
                let mut off = 0;
                for p in parts {
                    let len = nodes[p].value.len();
                    if let Some(gp) = slot!(p) {
                        axpy(gp, &g[off..off + len], 1.0);
                    }
                    off += len;
                }
            }
            Op::SliceAxis0 { x, start } => {
                let (x, start) = (*x, *start);
                let slab: usize = nodes[x].value.shape()[1..].iter().product();
                if let Some(gx) = slot!(x) {
                    axpy(&mut gx[start * slab..start * slab + g.len()], g, 1.0);
                }
            }
            Op::CropHw { x, h0, w0 } => {
                let (x, h0, w0) = (*x, *h0, *w0);
                let sh = nodes[x].value.shape().to_vec();
                let (h, w) = (sh[1], sh[2]);
                let so = nodes[i].value.shape().to_vec();
                let (c, hlen, wlen) = (so[0], so[1], so[2]);
                if let Some(gx) = slot!(x) {
                    for ch in 0..c {
                        for ii in 0..hlen {
                            let dst = (ch * h + h0 + ii) * w + w0;
                            let src = (ch * hlen + ii) * wlen;
                            axpy(&mut gx[dst..dst + wlen], &g[src..src + wlen], 1.0);
                        }
                    }
                }
            }
            Op::Upsample2(x) => {
                let x = *x;
                let sh = nodes[x].value.shape().to_vec();
                let (c, h, w) = (sh[0], sh[1], sh[2]);
                let (h2, w2) = (2 * h, 2 * w);
                if let Some(gx) = slot!(x) {
                    for ch in 0..c {
                        for ii in 0..h {
                            for jj in 0..w {
                                let base = (ch * h2 + 2 * ii) * w2 + 2 * jj;
                                gx[(ch * h + ii) * w + jj] +=
                                    g[base] + g[base + 1] + g[base + w2] + g[base + w2 + 1];
                            }
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = slot!(*x) {
                    axpy(gx, g, 1.0);
                }
            }
            Op::Stft { x, cfg } => {
                let (x, cfg) = (*x, *cfg);
                let n = nodes[x].value.len();
                let ft = nodes[i].value.len() / 2;
                if nodes[x].requires_grad {
                    let gx_contrib = stft_adjoint_raw(&g[..ft], &g[ft..], &cfg, n);
                    if let Some(gx) = slot!(x) {
                        axpy(gx, &gx_contrib, 1.0);
                    }
                }
            }
            Op::Istft {
                x,
                cfg,
                frames,
                source_len,
            } => {
                let (x, cfg, frames, source_len) = (*x, *cfg, *frames, *source_len);
                if nodes[x].requires_grad {
                    let (gre, gim) = istft_adjoint_raw(g, &cfg, frames, source_len);
                    if let Some(gx) = slot!(x) {
                        let ft = gre.len();
                        axpy(&mut gx[..ft], &gre, 1.0);
                        axpy(&mut gx[ft..], &gim, 1.0);
                    }
                }
            }
        }
        Ok(())
    }
}

impl Default for Graph {
    fn default() -> Self {
        Graph::new()
    }
}

/// 1 - tanh(x) without catastrophic cancellation; floors at a tiny positive
/// value once e^{2x} overflows.
pub fn one_minus_tanh_stable(x: f64) -> f64 {
    let e = (2.0 * x).exp();
    if e.is_finite() {
        2.0 / (e + 1.0)
    } else {
        1e-300
    }
}

fn axpy(acc: &mut [f64], g: &[f64], c: f64) {
    debug_assert_eq!(acc.len(), g.len());
    for (a, &v) in acc.iter_mut().zip(g) {
        *a += c * v;
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf { .. } => "leaf",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Div(..) => "div",
        Op::AddScalar(..) => "add_scalar",
        Op::MulScalar(..) => "mul_scalar",
        Op::MulScalarT { .. } => "mul_scalar_t",
        Op::Recip(..) => "recip",
        Op::Sqrt(..) => "sqrt",
        Op::Log(..) => "log",
        Op::Tanh(..) => "tanh",
        Op::OneMinusTanh(..) => "one_minus_tanh",
        Op::Sigmoid(..) => "sigmoid",
        Op::Relu(..) => "relu",
        Op::ClampMin(..) => "clamp_min",
        Op::Softmax(..) => "softmax",
        Op::Sum(..) => "sum",
        Op::Mean(..) => "mean",
        Op::MeanPoolHw(..) => "mean_pool_hw",
        Op::Matmul(..) => "matmul",
        Op::Conv2d { .. } => "conv2d",
        Op::Conv1d { .. } => "conv1d",
        Op::Concat0(..) => "concat",
        Op::SliceAxis0 { .. } => "slice",
        Op::CropHw { .. } => "crop",
        Op::Upsample2(..) => "upsample2",
        Op::Reshape(..) => "reshape",
        Op::Stft { .. } => "stft",
        Op::Istft { .. } => "istft",
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_forward(
    x: &[f64],
    k: &[f64],
    out: &mut [f64],
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
) {
    for oc in 0..o {
        for ic in 0..c {
            for ki in 0..kh {
                for kj in 0..kw {
                    let wgt = k[((oc * c + ic) * kh + ki) * kw + kj];
                    if wgt == 0.0 {
                        continue;
                    }
                    let (lo, hi) = col_bounds(w, wo, kj, stride, pad);
                    for yo in 0..ho {
                        let y = (yo * stride + ki) as isize - pad as isize;
                        if y < 0 || y as usize >= h {
                            continue;
                        }
                        let row_x = &x[(ic * h + y as usize) * w..(ic * h + y as usize + 1) * w];
                        let row_o = &mut out[(oc * ho + yo) * wo..(oc * ho + yo + 1) * wo];
                        let mut xi = lo * stride + kj - pad;
                        for ov in row_o[lo..hi].iter_mut() {
                            *ov += wgt * row_x[xi];
                            xi += stride;
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward_input(
    k: &[f64],
    g: &[f64],
    gx: &mut [f64],
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
) {
    for oc in 0..o {
        for ic in 0..c {
            for ki in 0..kh {
                for kj in 0..kw {
                    let wgt = k[((oc * c + ic) * kh + ki) * kw + kj];
                    if wgt == 0.0 {
                        continue;
                    }
                    let (lo, hi) = col_bounds(w, wo, kj, stride, pad);
                    for yo in 0..ho {
                        let y = (yo * stride + ki) as isize - pad as isize;
                        if y < 0 || y as usize >= h {
                            continue;
                        }
                        let row_g = &g[(oc * ho + yo) * wo..(oc * ho + yo + 1) * wo];
                        let row_gx = &mut gx[(ic * h + y as usize) * w..(ic * h + y as usize + 1) * w];
                        let mut xi = lo * stride + kj - pad;
                        for &gv in row_g[lo..hi].iter() {
                            row_gx[xi] += wgt * gv;
                            xi += stride;
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward_kernel(
    x: &[f64],
    g: &[f64],
    gk: &mut [f64],
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
) {
    for oc in 0..o {
        for ic in 0..c {
            for ki in 0..kh {
                for kj in 0..kw {
                    let (lo, hi) = col_bounds(w, wo, kj, stride, pad);
                    let mut acc = 0.0;
                    for yo in 0..ho {
                        let y = (yo * stride + ki) as isize - pad as isize;
                        if y < 0 || y as usize >= h {
                            continue;
                        }
                        let row_x = &x[(ic * h + y as usize) * w..(ic * h + y as usize + 1) * w];
                        let row_g = &g[(oc * ho + yo) * wo..(oc * ho + yo + 1) * wo];
                        let mut xi = lo * stride + kj - pad;
                        for &gv in row_g[lo..hi].iter() {
                            acc += gv * row_x[xi];
                            xi += stride;
                        }
                    }
                    gk[((oc * c + ic) * kh + ki) * kw + kj] += acc;
                }
            }
        }
    }
}

/// Output-column range [lo, hi) whose source column stays inside [0, w).
fn col_bounds(w: usize, wo: usize, kj: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if kj >= pad {
        0
    } else {
        (pad - kj).div_ceil(stride)
    };
    // need  wo*stride + kj - pad <= w-1
    let hi = if w + pad > kj {
        ((w + pad - kj - 1) / stride + 1).min(wo)
    } else {
        0
    };
    (lo.min(hi), hi)
}
