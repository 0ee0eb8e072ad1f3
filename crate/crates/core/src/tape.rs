//! A small reverse-mode differentiation tape over `f64` arrays.
//!
//! Every operation the model needs is a fused node with a hand-written
//! backward rule. A tape is built per forward pass and thrown away after
//! `backward`.

use ndarray::{s, Array1, Array2, Array3, ArrayD, ArrayView1, ArrayView2, ArrayView3, Axis, Ix1, Ix2, Ix3, IxDyn};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    AddBias(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Relu(Var),
    Scale(Var, f64),
    MulConst(Var, ArrayD<f64>),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        pad: usize,
        cols: Array2<f64>,
    },
    RegionMax {
        input: Var,
        argmax: Vec<usize>,
    },
    Stack(Vec<Var>),
    SliceCols {
        input: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    SoftmaxRows(Var),
    LayerNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Array2<f64>,
        inv_std: Array1<f64>,
    },
    MeanRows(Var),
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Array2<f64>,
        inv_std: Array1<f64>,
    },
    SoftCrossEntropy {
        logits: Var,
        targets: Array2<f64>,
        probs: Array2<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: ArrayD<f64>,
    op: Op,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients(Vec<Option<ArrayD<f64>>>);

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&ArrayD<f64>> {
        self.0.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<ArrayD<f64>> {
        self.0.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn v2(a: &ArrayD<f64>) -> ArrayView2<'_, f64> {
    a.view().into_dimensionality::<Ix2>().expect("expected a matrix")
}

fn v1(a: &ArrayD<f64>) -> ArrayView1<'_, f64> {
    a.view().into_dimensionality::<Ix1>().expect("expected a vector")
}

fn v3(a: &ArrayD<f64>) -> ArrayView3<'_, f64> {
    a.view().into_dimensionality::<Ix3>().expect("expected a 3-d tensor")
}

/// Output side length of a 3x3-style convolution.
pub fn conv_out_len(len: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (len + 2 * pad - kernel) / stride + 1
}

fn im2col(x: ArrayView3<f64>, kh: usize, kw: usize, stride: usize, pad: usize) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let oh = conv_out_len(h, kh, stride, pad);
    let ow = conv_out_len(w, kw, stride, pad);
    let mut cols = Array2::<f64>::zeros((c * kh * kw, oh * ow));
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let mut dst = cols.row_mut(row);
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dst[oy * ow + ox] = x[[ci, iy as usize, ix as usize]];
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: ArrayView2<f64>,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array3<f64> {
    let oh = conv_out_len(h, kh, stride, pad);
    let ow = conv_out_len(w, kw, stride, pad);
    let mut x = Array3::<f64>::zeros((c, h, w));
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = cols.row((ci * kh + ky) * kw + kx);
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        x[[ci, iy as usize, ix as usize]] += row[oy * ow + ox];
                    }
                }
            }
        }
    }
    x
}

fn layer_norm_rows(x: ArrayView2<f64>, eps: f64) -> (Array2<f64>, Array1<f64>) {
    let n = x.ncols() as f64;
    let mut xhat = x.to_owned();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, inv) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / n;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|v| v * v).sum::<f64>() / n;
        *inv = 1.0 / (var + eps).sqrt();
        let s = *inv;
        row.mapv_inplace(|v| v * s);
    }
    (xhat, inv_std)
}

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const BATCH_NORM_EPS: f64 = 1e-5;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: ArrayD<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &ArrayD<f64> {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, value: ArrayD<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) + self.value(b);
        self.push(out, Op::Add(a, b))
    }

    /// `m x n` matrix plus a length-`n` row vector.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Var {
        let out = &v2(self.value(a)) + &v1(self.value(bias));
        self.push(out.into_dyn(), Op::AddBias(a, bias))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = v2(self.value(a)).dot(&v2(self.value(b)));
        self.push(out.into_dyn(), Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = v2(self.value(a)).t().to_owned();
        self.push(out.into_dyn(), Op::Transpose(a))
    }

    /// `x W + b` for `x: m x in`, `W: in x out`, `b: out`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Var {
        let h = self.matmul(x, weight);
        self.add_bias(h, bias)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|v| v.max(0.0));
        self.push(out, Op::Relu(a))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a) * s;
        self.push(out, Op::Scale(a, s))
    }

    /// Elementwise product with a constant (e.g. a dropout mask).
    pub fn mul_const(&mut self, a: Var, c: ArrayD<f64>) -> Var {
        let out = self.value(a) * &c;
        self.push(out, Op::MulConst(a, c))
    }

    /// 2-d convolution of a `C x H x W` input with an `O x C x kh x kw`
    /// weight and a length-`O` bias.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, pad: usize) -> Var {
        let x = v3(self.value(input));
        let w = self.value(weight);
        let (o, _c, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
        let (_, h, wd) = x.dim();
        let oh = conv_out_len(h, kh, stride, pad);
        let ow = conv_out_len(wd, kw, stride, pad);
        let cols = im2col(x, kh, kw, stride, pad);
        let wmat = w
            .view()
            .into_shape_with_order((o, cols.nrows()))
            .expect("conv weight layout");
        let mut out = wmat.dot(&cols);
        out += &v1(self.value(bias)).insert_axis(Axis(1));
        let out = out
            .into_shape_with_order((o, oh, ow))
            .expect("conv output layout")
            .into_dyn();
        self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
                cols,
            },
        )
    }

    /// Per-channel maximum over the cells `[y0, y1) x [x0, x1)` of a
    /// `C x H x W` map. Ties resolve to the first cell in row-major order.
    pub fn region_max(&mut self, input: Var, y0: usize, y1: usize, x0: usize, x1: usize) -> Var {
        let x = v3(self.value(input));
        let (c, _h, w) = x.dim();
        assert!(y0 < y1 && x0 < x1, "empty pooling region");
        let mut out = Array1::<f64>::zeros(c);
        let mut argmax = vec![0usize; c];
        for ci in 0..c {
            let mut best = f64::NEG_INFINITY;
            let mut best_idx = 0;
            for yy in y0..y1 {
                for xx in x0..x1 {
                    let v = x[[ci, yy, xx]];
                    if v > best {
                        best = v;
                        best_idx = yy * w + xx;
                    }
                }
            }
            out[ci] = best;
            argmax[ci] = best_idx;
        }
        self.push(out.into_dyn(), Op::RegionMax { input, argmax })
    }

    /// Stack equal-length vectors as the rows of a matrix.
    pub fn stack(&mut self, rows: &[Var]) -> Var {
        assert!(!rows.is_empty(), "stack of zero rows");
        let n = v1(self.value(rows[0])).len();
        let mut out = Array2::<f64>::zeros((rows.len(), n));
        for (i, &r) in rows.iter().enumerate() {
            out.row_mut(i).assign(&v1(self.value(r)));
        }
        self.push(out.into_dyn(), Op::Stack(rows.to_vec()))
    }

    pub fn slice_cols(&mut self, input: Var, start: usize, len: usize) -> Var {
        let out = v2(self.value(input)).slice(s![.., start..start + len]).to_owned();
        self.push(out.into_dyn(), Op::SliceCols { input, start })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| v2(self.value(p))).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("row counts differ");
        self.push(out.into_dyn(), Op::ConcatCols(parts.to_vec()))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut out = v2(self.value(a)).to_owned();
        for mut row in out.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |acc, &v| acc.max(v));
            row.mapv_inplace(|v| (v - m).exp());
            let s = row.sum();
            row.mapv_inplace(|v| v / s);
        }
        self.push(out.into_dyn(), Op::SoftmaxRows(a))
    }

    /// Row-wise layer normalization with affine parameters.
    pub fn layer_norm(&mut self, input: Var, gamma: Var, beta: Var) -> Var {
        let (xhat, inv_std) = layer_norm_rows(v2(self.value(input)), LAYER_NORM_EPS);
        let out = &xhat * &v1(self.value(gamma)) + v1(self.value(beta));
        self.push(
            out.into_dyn(),
            Op::LayerNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    /// Mean of the rows of a matrix.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let out = v2(self.value(a)).mean_axis(Axis(0)).expect("mean of zero rows");
        self.push(out.into_dyn(), Op::MeanRows(a))
    }

    /// Batch normalization using the statistics of this batch (rows).
    /// Returns the output and the batch mean and biased variance.
    pub fn batch_norm(&mut self, input: Var, gamma: Var, beta: Var) -> (Var, Array1<f64>, Array1<f64>) {
        let x = v2(self.value(input));
        let b = x.nrows() as f64;
        let mean = x.mean_axis(Axis(0)).expect("empty batch");
        let centered = &x - &mean;
        let var = centered.mapv(|v| v * v).sum_axis(Axis(0)) / b;
        let inv_std = var.mapv(|v| 1.0 / (v + BATCH_NORM_EPS).sqrt());
        let xhat = &centered * &inv_std;
        let out = &xhat * &v1(self.value(gamma)) + v1(self.value(beta));
        let node = self.push(
            out.into_dyn(),
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        );
        (node, mean, var)
    }

    /// Mean over rows of `-sum_j p_j log softmax(z)_j`.
    pub fn soft_cross_entropy(&mut self, logits: Var, targets: Array2<f64>) -> Var {
        let z = v2(self.value(logits));
        assert_eq!(z.dim(), targets.dim(), "target shape mismatch");
        let mut probs = z.to_owned();
        let mut loss = 0.0;
        for (mut row, t) in probs.rows_mut().into_iter().zip(targets.rows()) {
            let m = row.fold(f64::NEG_INFINITY, |acc, &v| acc.max(v));
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
            loss -= row.iter().zip(t).map(|(&zj, &pj)| pj * (zj - lse)).sum::<f64>();
            row.mapv_inplace(|v| (v - lse).exp());
        }
        loss /= z.nrows() as f64;
        let out = ArrayD::from_elem(IxDyn(&[]), loss);
        self.push(
            out,
            Op::SoftCrossEntropy {
                logits,
                targets,
                probs,
            },
        )
    }

    /// Reverse pass from `root` seeded with `seed` (same shape as the root's
    /// value). Only nodes at or before `root` are visited.
    pub fn backward_with(&self, root: Var, seed: ArrayD<f64>) -> Gradients {
        assert_eq!(seed.shape(), self.value(root).shape(), "seed shape mismatch");
        let mut grads: Vec<Option<ArrayD<f64>>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(seed);

        fn acc(grads: &mut [Option<ArrayD<f64>>], v: Var, g: ArrayD<f64>) {
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot => *slot = Some(g),
            }
        }

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::AddBias(a, bias) => {
                    let gb = v2(&g).sum_axis(Axis(0)).into_dyn();
                    acc(&mut grads, *bias, gb);
                    acc(&mut grads, *a, g);
                }
                Op::MatMul(a, b) => {
                    let g2 = v2(&g);
                    let ga = g2.dot(&v2(self.value(*b)).t());
                    let gb = v2(self.value(*a)).t().dot(&g2);
                    acc(&mut grads, *a, ga.into_dyn());
                    acc(&mut grads, *b, gb.into_dyn());
                }
                Op::Transpose(a) => {
                    let ga = v2(&g).t().to_owned();
                    acc(&mut grads, *a, ga.into_dyn());
                }
                Op::Relu(a) => {
                    let mut ga = g;
                    ga.zip_mut_with(self.value(*a), |gv, &x| {
                        if x <= 0.0 {
                            *gv = 0.0
                        }
                    });
                    acc(&mut grads, *a, ga);
                }
                Op::Scale(a, s) => acc(&mut grads, *a, g * *s),
                Op::MulConst(a, c) => acc(&mut grads, *a, g * c),
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                    stride,
                    pad,
                    cols,
                } => {
                    let w = self.value(*weight);
                    let wshape = w.shape().to_vec();
                    let (o, c, kh, kw) = (wshape[0], wshape[1], wshape[2], wshape[3]);
                    let gy = g
                        .view()
                        .into_shape_with_order((o, cols.ncols()))
                        .expect("conv grad layout");
                    let gb = gy.sum_axis(Axis(1)).into_dyn();
                    let gw = gy.dot(&cols.t()).into_shape_with_order(IxDyn(&wshape)).expect("weight grad");
                    let wmat = w.view().into_shape_with_order((o, cols.nrows())).expect("weight");
                    let gcols = wmat.t().dot(&gy);
                    let ishape = self.value(*input).shape();
                    let gx = col2im(gcols.view(), c, ishape[1], ishape[2], kh, kw, *stride, *pad);
                    acc(&mut grads, *bias, gb);
                    acc(&mut grads, *weight, gw);
                    acc(&mut grads, *input, gx.into_dyn());
                }
                Op::RegionMax { input, argmax } => {
                    let shape = self.value(*input).shape().to_vec();
                    let hw = shape[1] * shape[2];
                    let mut gx = ArrayD::<f64>::zeros(IxDyn(&shape));
                    {
                        let flat = gx.as_slice_mut().expect("contiguous");
                        let gv = v1(&g);
                        for (ci, &pos) in argmax.iter().enumerate() {
                            flat[ci * hw + pos] += gv[ci];
                        }
                    }
                    acc(&mut grads, *input, gx);
                }
                Op::Stack(rows) => {
                    let g2 = v2(&g);
                    for (i, &r) in rows.iter().enumerate() {
                        acc(&mut grads, r, g2.row(i).to_owned().into_dyn());
                    }
                }
                Op::SliceCols { input, start } => {
                    let shape = self.value(*input).shape().to_vec();
                    let mut gx = Array2::<f64>::zeros((shape[0], shape[1]));
                    let g2 = v2(&g);
                    gx.slice_mut(s![.., *start..*start + g2.ncols()]).assign(&g2);
                    acc(&mut grads, *input, gx.into_dyn());
                }
                Op::ConcatCols(parts) => {
                    let g2 = v2(&g);
                    let mut off = 0;
                    for &p in parts {
                        let w = self.value(p).shape()[1];
                        acc(&mut grads, p, g2.slice(s![.., off..off + w]).to_owned().into_dyn());
                        off += w;
                    }
                }
                Op::SoftmaxRows(a) => {
                    let y = v2(&node.value);
                    let g2 = v2(&g);
                    let mut ga = Array2::<f64>::zeros(y.dim());
                    for ((yr, gr), mut out) in y.rows().into_iter().zip(g2.rows()).zip(ga.rows_mut()) {
                        let dot = yr.dot(&gr);
                        out.assign(&(&yr * &(&gr - dot)));
                    }
                    acc(&mut grads, *a, ga.into_dyn());
                }
                Op::LayerNorm {
                    input,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let g2 = v2(&g);
                    let gamma_v = v1(self.value(*gamma));
                    let gbeta = g2.sum_axis(Axis(0));
                    let ggamma = (&g2 * xhat).sum_axis(Axis(0));
                    let gxhat = &g2 * &gamma_v;
                    let n = xhat.ncols() as f64;
                    let mut gx = Array2::<f64>::zeros(xhat.dim());
                    for (((gxh, xh), mut out), &inv) in gxhat
                        .rows()
                        .into_iter()
                        .zip(xhat.rows())
                        .zip(gx.rows_mut())
                        .zip(inv_std.iter())
                    {
                        let mean_g = gxh.sum() / n;
                        let mean_gx = gxh.dot(&xh) / n;
                        out.assign(&((&gxh - mean_g - &(&xh * mean_gx)) * inv));
                    }
                    acc(&mut grads, *gamma, ggamma.into_dyn());
                    acc(&mut grads, *beta, gbeta.into_dyn());
                    acc(&mut grads, *input, gx.into_dyn());
                }
                Op::MeanRows(a) => {
                    let rows = self.value(*a).shape()[0];
                    let gv = v1(&g);
                    let ga = Array2::from_shape_fn((rows, gv.len()), |(_, j)| gv[j] / rows as f64);
                    acc(&mut grads, *a, ga.into_dyn());
                }
                Op::BatchNorm {
                    input,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let g2 = v2(&g);
                    let gamma_v = v1(self.value(*gamma));
                    let gbeta = g2.sum_axis(Axis(0));
                    let ggamma = (&g2 * xhat).sum_axis(Axis(0));
                    let gxhat = &g2 * &gamma_v;
                    let b = xhat.nrows() as f64;
                    let mean_g = gxhat.sum_axis(Axis(0)) / b;
                    let mean_gx = (&gxhat * xhat).sum_axis(Axis(0)) / b;
                    let gx = (&gxhat - &mean_g - &(xhat * &mean_gx)) * inv_std;
                    acc(&mut grads, *gamma, ggamma.into_dyn());
                    acc(&mut grads, *beta, gbeta.into_dyn());
                    acc(&mut grads, *input, gx.into_dyn());
                }
                Op::SoftCrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let scale = g.iter().next().copied().unwrap_or(0.0) / probs.nrows() as f64;
                    // d/dz of -sum p log softmax(z) is softmax(z) * sum(p) - p.
                    let tsum = targets.sum_axis(Axis(1)).insert_axis(Axis(1));
                    let gz = (probs * &tsum - targets) * scale;
                    acc(&mut grads, *logits, gz.into_dyn());
                }
            }
        }
        Gradients(grads)
    }

    /// Reverse pass from a scalar root.
    pub fn backward(&self, root: Var) -> Gradients {
        let seed = ArrayD::from_elem(self.value(root).raw_dim(), 1.0);
        self.backward_with(root, seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_arr(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<f64> {
        Array::from_shape_fn(IxDyn(shape), |_| rng.random_range(-1.0..1.0))
    }

    /// Checks d(sum(w * f(inputs)))/d(inputs) against central differences.
    fn check(shapes: &[&[usize]], f: impl Fn(&mut Tape, &[Var]) -> Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let inputs: Vec<ArrayD<f64>> = shapes.iter().map(|s| rand_arr(&mut rng, s)).collect();
        let eval = |vals: &[ArrayD<f64>]| -> (Tape, Vec<Var>, Var) {
            let mut t = Tape::new();
            let vars: Vec<Var> = vals.iter().map(|v| t.leaf(v.clone())).collect();
            let out = f(&mut t, &vars);
            (t, vars, out)
        };
        let (t, vars, out) = eval(&inputs);
        let mut wrng = ChaCha8Rng::seed_from_u64(5);
        let w = rand_arr(&mut wrng, t.value(out).shape());
        let grads = t.backward_with(out, w.clone());
        let objective = |vals: &[ArrayD<f64>]| {
            let (t, _, o) = eval(vals);
            (t.value(o) * &w).sum()
        };
        let eps = 1e-6;
        for (i, var) in vars.iter().enumerate() {
            let analytic = grads.get(*var).cloned().unwrap_or_else(|| ArrayD::zeros(inputs[i].raw_dim()));
            for j in 0..inputs[i].len() {
                let mut plus = inputs.clone();
                plus[i].as_slice_mut().unwrap()[j] += eps;
                let mut minus = inputs.clone();
                minus[i].as_slice_mut().unwrap()[j] -= eps;
                let numeric = (objective(&plus) - objective(&minus)) / (2.0 * eps);
                let a = analytic.as_slice().unwrap()[j];
                let denom = a.abs().max(numeric.abs()).max(1e-6);
                assert!(
                    (a - numeric).abs() / denom < 1e-5,
                    "input {i} elem {j}: analytic {a} numeric {numeric}"
                );
            }
        }
    }

    #[test]
    fn grad_matmul_bias_relu() {
        check(&[&[3, 4], &[4, 5], &[5]], |t, v| {
            let h = t.linear(v[0], v[1], v[2]);
            t.relu(h)
        });
    }

    #[test]
    fn grad_conv() {
        check(&[&[2, 5, 6], &[3, 2, 3, 3], &[3]], |t, v| t.conv2d(v[0], v[1], v[2], 2, 1));
        check(&[&[2, 4, 4], &[3, 2, 3, 3], &[3]], |t, v| t.conv2d(v[0], v[1], v[2], 1, 1));
    }

    #[test]
    fn grad_softmax_transpose_slices() {
        check(&[&[3, 4], &[3, 4]], |t, v| {
            let a = t.slice_cols(v[0], 1, 2);
            let b = t.slice_cols(v[1], 0, 2);
            let bt = t.transpose(b);
            let s = t.matmul(a, bt);
            let s = t.scale(s, 0.7);
            let p = t.softmax_rows(s);
            t.concat_cols(&[p, a])
        });
    }

    #[test]
    fn grad_norms() {
        check(&[&[4, 5], &[5], &[5]], |t, v| t.layer_norm(v[0], v[1], v[2]));
        check(&[&[4, 5], &[5], &[5]], |t, v| t.batch_norm(v[0], v[1], v[2]).0);
    }

    #[test]
    fn grad_stack_mean_region_max_ce() {
        check(&[&[3, 4, 4], &[3]], |t, v| {
            let a = t.region_max(v[0], 0, 2, 1, 3);
            let b = t.region_max(v[0], 0, 4, 0, 4);
            let m = t.stack(&[a, b, v[1]]);
            t.mean_rows(m)
        });
        check(&[&[3, 4]], |t, v| {
            let targets = ndarray::arr2(&[[1.0, 0.0, 0.0, 0.0], [0.0, 0.3, 0.7, 0.0], [0.25; 4]]);
            t.soft_cross_entropy(v[0], targets)
        });
    }

    #[test]
    fn grad_mul_const_and_add() {
        check(&[&[2, 3], &[2, 3]], |t, v| {
            let m = t.mul_const(v[0], ndarray::arr2(&[[0.0, 2.0, 1.0], [1.0, 0.0, 2.0]]).into_dyn());
            t.add(m, v[1])
        });
    }

    #[test]
    fn conv_output_size_follows_stride() {
        assert_eq!(conv_out_len(64, 3, 2, 1), 32);
        assert_eq!(conv_out_len(32, 3, 2, 1), 16);
        assert_eq!(conv_out_len(5, 3, 2, 1), 3);
    }

    #[test]
    fn softmax_rows_are_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut t = Tape::new();
        let x = t.leaf(rand_arr(&mut rng, &[4, 7]) * 20.0);
        let p = t.softmax_rows(x);
        for row in v2(t.value(p)).rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }
}
