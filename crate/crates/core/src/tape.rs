//! Reverse-mode automatic differentiation on a per-step tape.
//!
//! Every primitive records its parents and a backward closure that maps the
//! output gradient to parent gradients. Node ids are issued in construction
//! order, so a single reverse sweep over ids is a valid topological replay.
//! A tape lives for one forward/backward step and is dropped afterwards, so
//! gradients can never leak between training steps.

use std::cell::RefCell;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

type BackwardFn = Box<dyn Fn(&Tensor) -> Vec<Tensor>>;

struct Node {
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone)]
pub struct Var {
    pub id: usize,
    pub value: Tensor,
}

impl Var {
    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by node id.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn wrt(&self, var: &Var) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, parents: Vec<usize>, backward: Option<BackwardFn>, value: Tensor) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node { parents, backward });
        Var { id, value }
    }

    /// Record an input tensor. Gradients are produced for every leaf that
    /// participates in the loss; callers read out only the ones they need.
    pub fn leaf(&self, value: Tensor) -> Var {
        self.push(Vec::new(), None, value)
    }

    pub fn add(&self, a: &Var, b: &Var) -> Result<Var> {
        let value = a.value.add(&b.value)?;
        let bw: BackwardFn = Box::new(|g: &Tensor| vec![g.clone(), g.clone()]);
        Ok(self.push(vec![a.id, b.id], Some(bw), value))
    }

    pub fn sub(&self, a: &Var, b: &Var) -> Result<Var> {
        let value = a.value.sub(&b.value)?;
        let bw: BackwardFn = Box::new(|g: &Tensor| vec![g.clone(), g.scale(-1.0)]);
        Ok(self.push(vec![a.id, b.id], Some(bw), value))
    }

    pub fn mul(&self, a: &Var, b: &Var) -> Result<Var> {
        let value = a.value.zip(&b.value, |x, y| x * y)?;
        let (av, bv) = (a.value.clone(), b.value.clone());
        let bw: BackwardFn = Box::new(move |g: &Tensor| {
            vec![
                g.zip(&bv, |x, y| x * y).unwrap(),
                g.zip(&av, |x, y| x * y).unwrap(),
            ]
        });
        Ok(self.push(vec![a.id, b.id], Some(bw), value))
    }

    pub fn scale(&self, a: &Var, c: f64) -> Var {
        let value = a.value.scale(c);
        let bw: BackwardFn = Box::new(move |g: &Tensor| vec![g.scale(c)]);
        self.push(vec![a.id], Some(bw), value)
    }

    pub fn exp(&self, a: &Var) -> Var {
        let value = a.value.map(f64::exp);
        let saved = value.clone();
        let bw: BackwardFn = Box::new(move |g: &Tensor| vec![g.zip(&saved, |x, y| x * y).unwrap()]);
        self.push(vec![a.id], Some(bw), value)
    }

    pub fn relu(&self, a: &Var) -> Var {
        let value = a.value.map(|v| if v > 0.0 { v } else { 0.0 });
        let saved = a.value.clone();
        let bw: BackwardFn = Box::new(move |g: &Tensor| {
            vec![g
                .zip(&saved, |gv, xv| if xv > 0.0 { gv } else { 0.0 })
                .unwrap()]
        });
        self.push(vec![a.id], Some(bw), value)
    }

    pub fn sum(&self, a: &Var) -> Var {
        let value = Tensor::scalar(a.value.sum());
        let shape = a.value.shape().to_vec();
        let bw: BackwardFn = Box::new(move |g: &Tensor| vec![Tensor::full(&shape, g.item())]);
        self.push(vec![a.id], Some(bw), value)
    }

    pub fn mean(&self, a: &Var) -> Var {
        let n = a.value.len() as f64;
        let value = Tensor::scalar(a.value.sum() / n);
        let shape = a.value.shape().to_vec();
        let bw: BackwardFn = Box::new(move |g: &Tensor| vec![Tensor::full(&shape, g.item() / n)]);
        self.push(vec![a.id], Some(bw), value)
    }

    /// Matrix product of `a` (r x k) and `b` (k x c).
    pub fn matmul(&self, a: &Var, b: &Var) -> Result<Var> {
        let (ash, bsh) = (a.value.shape().to_vec(), b.value.shape().to_vec());
        if ash.len() != 2 || bsh.len() != 2 || ash[1] != bsh[0] {
            return Err(Error::Dim(format!(
                "matmul shape mismatch: {:?} x {:?}",
                ash, bsh
            )));
        }
        let (r, k, c) = (ash[0], ash[1], bsh[1]);
        let out = matmul_nn(a.value.data(), b.value.data(), r, k, c);
        let value = Tensor::new(vec![r, c], out)?;
        let (av, bv) = (a.value.clone(), b.value.clone());
        let bw: BackwardFn = Box::new(move |g: &Tensor| {
            // da = g . b^T, db = a^T . g
            let da = matmul_nt(g.data(), bv.data(), r, c, k);
            let db = matmul_tn(av.data(), g.data(), k, r, c);
            vec![
                Tensor::new(vec![r, k], da).unwrap(),
                Tensor::new(vec![k, c], db).unwrap(),
            ]
        });
        Ok(self.push(vec![a.id, b.id], Some(bw), value))
    }

    /// 2-D cross-correlation of NCHW input with (c_out x c_in x k x k) kernel.
    pub fn conv2d(&self, x: &Var, kernel: &Var, stride: usize, padding: usize) -> Result<Var> {
        let xs = x.value.shape().to_vec();
        let ks = kernel.value.shape().to_vec();
        if xs.len() != 4 || ks.len() != 4 {
            return Err(Error::Dim(format!(
                "conv2d expects 4-D input and kernel, got {:?} / {:?}",
                xs, ks
            )));
        }
        if xs[1] != ks[1] {
            return Err(Error::Dim(format!(
                "conv2d channel mismatch: input {:?} vs kernel {:?}",
                xs, ks
            )));
        }
        if ks[2] != ks[3] {
            return Err(Error::Dim(format!("conv2d kernel must be square: {:?}", ks)));
        }
        if stride < 1 {
            return Err(Error::Dim("conv2d stride must be >= 1".into()));
        }
        let (n, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, k) = (ks[0], ks[2]);
        if k > h + 2 * padding || k > w + 2 * padding {
            return Err(Error::Dim(format!(
                "kernel {}x{} larger than padded input {}x{}",
                k,
                k,
                h + 2 * padding,
                w + 2 * padding
            )));
        }
        let oh = (h + 2 * padding - k) / stride + 1;
        let ow = (w + 2 * padding - k) / stride + 1;
        let ckk = cin * k * k;
        let hw = oh * ow;

        // One column matrix [ckk x n*hw] for the whole batch, so each conv
        // reduces to a single row-major matmul with the flattened kernel
        // [cout x ckk].
        let nhw = n * hw;
        let mut col = vec![0.0; ckk * nhw];
        for s in 0..n {
            im2col_into(
                &x.value.data()[s * cin * h * w..(s + 1) * cin * h * w],
                cin,
                h,
                w,
                k,
                stride,
                padding,
                oh,
                ow,
                &mut col,
                nhw,
                s * hw,
            );
        }
        let wmat = kernel.value.data();
        // o is [cout x n*hw]; reorder into [n, cout, hw]
        let o = matmul_nn(wmat, &col, cout, ckk, nhw);
        let mut out = vec![0.0; n * cout * hw];
        for s in 0..n {
            for co in 0..cout {
                out[(s * cout + co) * hw..(s * cout + co + 1) * hw]
                    .copy_from_slice(&o[co * nhw + s * hw..co * nhw + (s + 1) * hw]);
            }
        }
        let value = Tensor::new(vec![n, cout, oh, ow], out)?;

        let xv = x.value.clone();
        let kernel_data = kernel.value.clone();
        let bw: BackwardFn = Box::new(move |g: &Tensor| {
            let wmat = kernel_data.data();
            // gmat [cout x n*hw] mirrors the forward layout
            let mut gmat = vec![0.0; cout * nhw];
            for s in 0..n {
                for co in 0..cout {
                    gmat[co * nhw + s * hw..co * nhw + (s + 1) * hw]
                        .copy_from_slice(&g.data()[(s * cout + co) * hw..(s * cout + co + 1) * hw]);
                }
            }
            // dw = gmat . col^T; dcol = w^T . gmat
            let dw = matmul_nt(&gmat, &col, cout, nhw, ckk);
            let dcol = matmul_tn(wmat, &gmat, ckk, cout, nhw);
            let mut dx = vec![0.0; xv.len()];
            for s in 0..n {
                col2im_from(
                    &dcol,
                    nhw,
                    s * hw,
                    &mut dx[s * cin * h * w..(s + 1) * cin * h * w],
                    cin,
                    h,
                    w,
                    k,
                    stride,
                    padding,
                    oh,
                    ow,
                );
            }
            vec![
                Tensor::new(xv.shape().to_vec(), dx).unwrap(),
                Tensor::new(vec![cout, cin, k, k], dw).unwrap(),
            ]
        });
        Ok(self.push(vec![x.id, kernel.id], Some(bw), value))
    }

    /// 2x2 max pooling with stride 2 on NCHW input; spatial dims must be even.
    pub fn maxpool2(&self, x: &Var) -> Result<Var> {
        let xs = x.value.shape().to_vec();
        if xs.len() != 4 {
            return Err(Error::Dim(format!("maxpool2 expects 4-D, got {:?}", xs)));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Dim(format!(
                "maxpool2 needs even spatial dims, got {}x{}",
                h, w
            )));
        }
        let (oh, ow) = (h / 2, w / 2);
        let mut out = vec![0.0; n * c * oh * ow];
        let mut arg = vec![0usize; n * c * oh * ow];
        let d = x.value.data();
        for nc in 0..n * c {
            let base = nc * h * w;
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut bidx = 0;
                    for di in 0..2 {
                        for dj in 0..2 {
                            let idx = base + (2 * i + di) * w + (2 * j + dj);
                            if d[idx] > best {
                                best = d[idx];
                                bidx = idx;
                            }
                        }
                    }
                    let o = nc * oh * ow + i * ow + j;
                    out[o] = best;
                    arg[o] = bidx;
                }
            }
        }
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        let in_len = d.len();
        let bw: BackwardFn = Box::new(move |g: &Tensor| {
            let mut dx = vec![0.0; in_len];
            for (o, &src) in arg.iter().enumerate() {
                dx[src] += g.data()[o];
            }
            vec![Tensor::new(xs.clone(), dx).unwrap()]
        });
        Ok(self.push(vec![x.id], Some(bw), value))
    }

    /// Mean over the spatial dims of NCHW input, producing (n x c).
    pub fn global_avg_pool(&self, x: &Var) -> Result<Var> {
        let xs = x.value.shape().to_vec();
        if xs.len() != 4 {
            return Err(Error::Dim(format!(
                "global_avg_pool expects 4-D, got {:?}",
                xs
            )));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let hw = (h * w) as f64;
        let d = x.value.data();
        let mut out = vec![0.0; n * c];
        for nc in 0..n * c {
            out[nc] = d[nc * h * w..(nc + 1) * h * w].iter().sum::<f64>() / hw;
        }
        let value = Tensor::new(vec![n, c], out)?;
        let bw: BackwardFn = Box::new(move |g: &Tensor| {
            let mut dx = vec![0.0; n * c * h * w];
            for nc in 0..n * c {
                let gv = g.data()[nc] / hw;
                for p in dx[nc * h * w..(nc + 1) * h * w].iter_mut() {
                    *p = gv;
                }
            }
            vec![Tensor::new(xs.clone(), dx).unwrap()]
        });
        Ok(self.push(vec![x.id], Some(bw), value))
    }

    /// Add a length-C bias to every row of an (n x C) tensor.
    pub fn bias_add_row(&self, a: &Var, bias: &Var) -> Result<Var> {
        let ash = a.value.shape().to_vec();
        let bsh = bias.value.shape().to_vec();
        if ash.len() != 2 || bsh != vec![ash[1]] {
            return Err(Error::Dim(format!(
                "bias_add_row: {:?} with bias {:?}",
                ash, bsh
            )));
        }
        let (n, c) = (ash[0], ash[1]);
        let mut out = a.value.data().to_vec();
        for i in 0..n {
            for j in 0..c {
                out[i * c + j] += bias.value.data()[j];
            }
        }
        let value = Tensor::new(ash, out)?;
        let bw: BackwardFn = Box::new(move |g: &Tensor| {
            let mut db = vec![0.0; c];
            for i in 0..n {
                for j in 0..c {
                    db[j] += g.data()[i * c + j];
                }
            }
            vec![g.clone(), Tensor::new(vec![c], db).unwrap()]
        });
        Ok(self.push(vec![a.id, bias.id], Some(bw), value))
    }

    /// Add a per-channel bias to an NCHW tensor.
    pub fn bias_add_chan(&self, x: &Var, bias: &Var) -> Result<Var> {
        let xs = x.value.shape().to_vec();
        let bsh = bias.value.shape().to_vec();
        if xs.len() != 4 || bsh != vec![xs[1]] {
            return Err(Error::Dim(format!(
                "bias_add_chan: {:?} with bias {:?}",
                xs, bsh
            )));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let hw = h * w;
        let mut out = x.value.data().to_vec();
        for s in 0..n {
            for ch in 0..c {
                let b = bias.value.data()[ch];
                for p in out[(s * c + ch) * hw..(s * c + ch + 1) * hw].iter_mut() {
                    *p += b;
                }
            }
        }
        let value = Tensor::new(xs, out)?;
        let bw: BackwardFn = Box::new(move |g: &Tensor| {
            let mut db = vec![0.0; c];
            for s in 0..n {
                for ch in 0..c {
                    db[ch] += g.data()[(s * c + ch) * hw..(s * c + ch + 1) * hw]
                        .iter()
                        .sum::<f64>();
                }
            }
            vec![g.clone(), Tensor::new(vec![c], db).unwrap()]
        });
        Ok(self.push(vec![x.id, bias.id], Some(bw), value))
    }

    /// Temperature-scaled log-softmax over rows: f/T - logsumexp(f/T).
    pub fn log_softmax_temp(&self, f: &Var, t: f64) -> Result<Var> {
        if t <= 0.0 {
            return Err(Error::Domain(format!("temperature must be > 0, got {t}")));
        }
        let fs = f.value.shape().to_vec();
        if fs.len() != 2 {
            return Err(Error::Dim(format!(
                "log_softmax_temp expects 2-D logits, got {:?}",
                fs
            )));
        }
        let (n, c) = (fs[0], fs[1]);
        let d = f.value.data();
        let mut out = vec![0.0; n * c];
        let mut probs = vec![0.0; n * c];
        for i in 0..n {
            let row = &d[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..c {
                z += ((row[j] - m) / t).exp();
            }
            let lz = z.ln();
            for j in 0..c {
                let ls = (row[j] - m) / t - lz;
                out[i * c + j] = ls;
                probs[i * c + j] = ls.exp();
            }
        }
        let value = Tensor::new(vec![n, c], out)?;
        let bw: BackwardFn = Box::new(move |g: &Tensor| {
            let mut df = vec![0.0; n * c];
            for i in 0..n {
                let gs: f64 = g.data()[i * c..(i + 1) * c].iter().sum();
                for j in 0..c {
                    df[i * c + j] = (g.data()[i * c + j] - probs[i * c + j] * gs) / t;
                }
            }
            vec![Tensor::new(vec![n, c], df).unwrap()]
        });
        Ok(self.push(vec![f.id], Some(bw), value))
    }

    /// Mean negative log-likelihood of log-probabilities at the given labels.
    pub fn nll_mean(&self, log_probs: &Var, labels: &[usize]) -> Result<Var> {
        let ls = log_probs.value.shape().to_vec();
        if ls.len() != 2 || ls[0] != labels.len() {
            return Err(Error::Dim(format!(
                "nll_mean: log-probs {:?} with {} labels",
                ls,
                labels.len()
            )));
        }
        let (n, c) = (ls[0], ls[1]);
        for (i, &y) in labels.iter().enumerate() {
            if y >= c {
                return Err(Error::Contract(format!(
                    "label {} at index {} out of range for {} classes",
                    y, i, c
                )));
            }
        }
        let d = log_probs.value.data();
        let mut acc = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            acc -= d[i * c + y];
        }
        let value = Tensor::scalar(acc / n as f64);
        let labels = labels.to_vec();
        let bw: BackwardFn = Box::new(move |g: &Tensor| {
            let mut dl = vec![0.0; n * c];
            let gv = g.item() / n as f64;
            for (i, &y) in labels.iter().enumerate() {
                dl[i * c + y] = -gv;
            }
            vec![Tensor::new(vec![n, c], dl).unwrap()]
        });
        Ok(self.push(vec![log_probs.id], Some(bw), value))
    }

    /// Reverse sweep from a scalar loss; accumulates gradients by summation
    /// over all paths. Deterministic: replaying the same tape twice yields
    /// bitwise-identical gradients.
    pub fn backward(&self, loss: &Var) -> Result<Gradients> {
        if !loss.value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                loss.value.shape()
            )));
        }
        let nodes = self.nodes.borrow();
        if loss.id >= nodes.len() {
            return Err(Error::Contract("loss is not on this tape".into()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[loss.id] = Some(Tensor::scalar(1.0));
        for id in (0..=loss.id).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &nodes[id];
            if let Some(bw) = &node.backward {
                let parent_grads = bw(&g);
                debug_assert_eq!(parent_grads.len(), node.parents.len());
                for (pid, pg) in node.parents.iter().zip(parent_grads) {
                    grads[*pid] = Some(match grads[*pid].take() {
                        Some(existing) => existing.add(&pg)?,
                        None => pg,
                    });
                }
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

// ---- raw matmul kernels (row-major) ----

/// out[r x c] = a[r x k] . b[k x c]
pub(crate) fn matmul_nn(a: &[f64], b: &[f64], r: usize, k: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for kk in 0..k {
            let aik = a[i * k + kk];
            if aik == 0.0 {
                continue;
            }
            let brow = &b[kk * c..(kk + 1) * c];
            let orow = &mut out[i * c..(i + 1) * c];
            for j in 0..c {
                orow[j] += aik * brow[j];
            }
        }
    }
    out
}

/// out[r x c] = a[r x k] . b^T where b is [c x k]
fn matmul_nt(a: &[f64], b: &[f64], r: usize, k: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..c {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for kk in 0..k {
                acc += arow[kk] * brow[kk];
            }
            out[i * c + j] = acc;
        }
    }
    out
}

/// out[r x c] = a^T . b where a is [k x r], b is [k x c]
fn matmul_tn(a: &[f64], b: &[f64], r: usize, k: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for kk in 0..k {
        let brow = &b[kk * c..(kk + 1) * c];
        for i in 0..r {
            let aki = a[kk * r + i];
            if aki == 0.0 {
                continue;
            }
            let orow = &mut out[i * c..(i + 1) * c];
            for j in 0..c {
                orow[j] += aki * brow[j];
            }
        }
    }
    out
}

/// Writes one sample's [cin*k*k x oh*ow] column block into a shared batch
/// column matrix with `ncols` total columns, starting at `col_off`.
#[allow(clippy::too_many_arguments)]
fn im2col_into(
    x: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
    col: &mut [f64],
    ncols: usize,
    col_off: usize,
) {
    for ci in 0..cin {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let dst = &mut col[row * ncols + col_off..row * ncols + col_off + oh * ow];
                for oi in 0..oh {
                    let ih = (oi * stride + ki) as isize - padding as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    for oj in 0..ow {
                        let iw = (oj * stride + kj) as isize - padding as isize;
                        if iw < 0 || iw >= w as isize {
                            continue;
                        }
                        dst[oi * ow + oj] = x[ci * h * w + ih as usize * w + iw as usize];
                    }
                }
            }
        }
    }
}

/// Scatter-add one sample's column block of the gradient back into its
/// input gradient.
#[allow(clippy::too_many_arguments)]
fn col2im_from(
    dcol: &[f64],
    ncols: usize,
    col_off: usize,
    dx: &mut [f64],
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
) {
    for ci in 0..cin {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let src = &dcol[row * ncols + col_off..row * ncols + col_off + oh * ow];
                for oi in 0..oh {
                    let ih = (oi * stride + ki) as isize - padding as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    for oj in 0..ow {
                        let iw = (oj * stride + kj) as isize - padding as isize;
                        if iw < 0 || iw >= w as isize {
                            continue;
                        }
                        dx[ci * h * w + ih as usize * w + iw as usize] += src[oi * ow + oj];
                    }
                }
            }
        }
    }
}

/// Central finite-difference check of a scalar-valued graph builder.
///
/// `build` receives a fresh tape and one leaf per input point and must return
/// a scalar. The analytic gradient from `backward` is compared per coordinate
/// against (f(x+h) - f(x-h)) / 2h with relative error measured against
/// max(1, |analytic|). Returns the maximum relative error over all
/// coordinates of all inputs.
pub fn finite_diff_check<F>(build: F, points: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    if step <= 0.0 {
        return Err(Error::Domain(format!("step must be > 0, got {step}")));
    }
    let eval = |pts: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var> = pts.iter().map(|p| tape.leaf(p.clone())).collect();
        let out = build(&tape, &vars)?;
        if !out.value.is_scalar() {
            return Err(Error::Contract(
                "finite_diff_check requires a scalar-valued builder".into(),
            ));
        }
        let v = out.value.item();
        if !v.is_finite() {
            return Err(Error::Eval(format!("non-finite forward value {v}")));
        }
        Ok(v)
    };

    // Analytic gradients at the base point.
    let tape = Tape::new();
    let vars: Vec<Var> = points.iter().map(|p| tape.leaf(p.clone())).collect();
    let out = build(&tape, &vars)?;
    if !out.value.is_scalar() {
        return Err(Error::Contract(
            "finite_diff_check requires a scalar-valued builder".into(),
        ));
    }
    if !out.value.item().is_finite() {
        return Err(Error::Eval(format!(
            "non-finite forward value {}",
            out.value.item()
        )));
    }
    let grads = tape.backward(&out)?;

    let mut max_rel = 0.0f64;
    let mut work: Vec<Vec<f64>> = points.iter().map(|p| p.data().to_vec()).collect();
    for (pi, point) in points.iter().enumerate() {
        let analytic = grads
            .wrt(&vars[pi])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(point.shape()));
        for ci in 0..point.len() {
            let orig = work[pi][ci];
            work[pi][ci] = orig + step;
            let plus = {
                let pts: Vec<Tensor> = work
                    .iter()
                    .zip(points)
                    .map(|(d, p)| Tensor::new(p.shape().to_vec(), d.clone()).unwrap())
                    .collect();
                eval(&pts)?
            };
            work[pi][ci] = orig - step;
            let minus = {
                let pts: Vec<Tensor> = work
                    .iter()
                    .zip(points)
                    .map(|(d, p)| Tensor::new(p.shape().to_vec(), d.clone()).unwrap())
                    .collect();
                eval(&pts)?
            };
            work[pi][ci] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic.data()[ci];
            let rel = (a - numeric).abs() / a.abs().max(1.0);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}
