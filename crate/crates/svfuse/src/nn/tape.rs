//! Reverse-mode differentiation over an eager operation tape.
//!
//! Forward values are computed when an op is pushed; `backward` replays the
//! record in exact reverse order, accumulating gradients additively. One tape
//! spans one training step.

use thiserror::Error;

use super::tensor::Tensor;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("{op}: shape mismatch between {a:?} and {b:?}")]
    ShapeMismatch {
        op: &'static str,
        a: Vec<usize>,
        b: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> NnError {
    NnError::ShapeMismatch {
        op,
        a: a.to_vec(),
        b: b.to_vec(),
    }
}

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Row index sentinel meaning "no source row, contribute zero".
pub const GATHER_PAD: usize = usize::MAX;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul,
    Add,
    Sub,
    Mul,
    /// [n,f] + [1,f]
    AddBcastRow,
    /// [1,f] -> [rows,f]
    Broadcast,
    Scale(f64),
    AddScalar,
    Sigmoid,
    Tanh,
    Relu,
    Rsqrt,
    Clamp {
        lo: f64,
        hi: f64,
    },
    SoftmaxLastDim,
    ConcatRows,
    ConcatCols,
    SliceRows {
        start: usize,
    },
    SliceCols {
        start: usize,
    },
    Reshape,
    GatherRows {
        indices: Vec<usize>,
    },
    MeanAll,
    SumAll,
    MeanRows,
    MaxRows {
        argmax: Vec<usize>,
    },
    /// Rows are pre-grouped into consecutive segments; one output row per
    /// segment.
    SegmentMean {
        lens: Vec<usize>,
    },
    SegmentSum {
        lens: Vec<usize>,
    },
    SegmentMax {
        lens: Vec<usize>,
        argmax: Vec<usize>,
    },
    /// Softmax over each consecutive segment of an [n, 1] column.
    SegmentSoftmax {
        lens: Vec<usize>,
    },
    /// 3x3 zero-padded convolution over an [h*w, cin] pixel-major map.
    /// Inputs: x, weight [9*cin, cout], bias [cout].
    Conv2d {
        h: usize,
        w: usize,
    },
    /// Gathered-neighborhood convolution over sparse voxels.
    /// `neighbors` holds out_cells * k row indices into x, -1 for missing.
    /// Inputs: x [n, cin], weight [k*cin, cout], bias [cout].
    SparseConv3 {
        neighbors: Vec<i64>,
        k: usize,
    },
    /// Interpolation over 8 cell-center corners; differentiable in both the
    /// corner features and the sample position.
    /// Inputs: features [n, f], position [1, 3].
    Trilinear {
        rows: [usize; 8],
        weights: [f64; 8],
        dweights: [[f64; 3]; 8],
    },
    AvgPool2 {
        h: usize,
        w: usize,
    },
    /// Bilinear x2 upsampling of an [h*w, c] map.
    Interp2x {
        h: usize,
        w: usize,
    },
    Mse {
        target: Tensor,
    },
    L1 {
        target: Tensor,
    },
    BceWithLogits {
        labels: Tensor,
    },
}

struct Node {
    op: Op,
    inputs: Vec<Var>,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads[var.0].as_deref()
    }
}

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

    pub fn value(&self, var: Var) -> &[f64] {
        &self.nodes[var.0].data
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        &self.nodes[var.0].shape
    }

    pub fn tensor(&self, var: Var) -> Tensor {
        Tensor::from_vec(self.shape(var), self.value(var).to_vec())
    }

    fn push(&mut self, op: Op, inputs: Vec<Var>, shape: Vec<usize>, data: Vec<f64>) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            op,
            inputs,
            shape,
            data,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(Op::Leaf, vec![], t.shape.clone(), t.data.clone())
    }

    pub fn leaf_owned(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, vec![], t.shape, t.data)
    }

    /// Copies a value into a fresh leaf, cutting the gradient path.
    pub fn detach(&mut self, x: Var) -> Var {
        let t = self.tensor(x);
        self.leaf_owned(t)
    }

    // ---- elementwise and linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        {
            let av = self.value(a);
            let bv = self.value(b);
            for i in 0..m {
                for p in 0..k {
                    let x = av[i * k + p];
                    if x == 0.0 {
                        continue;
                    }
                    let brow = &bv[p * n..(p + 1) * n];
                    let orow = &mut out[i * n..(i + 1) * n];
                    for j in 0..n {
                        orow[j] += x * brow[j];
                    }
                }
            }
        }
        Ok(self.push(Op::MatMul, vec![a, b], vec![m, n], out))
    }

    fn binary_same_shape(
        &mut self,
        op: Op,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var, NnError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(name, self.shape(a), self.shape(b)));
        }
        let data: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(op, vec![a, b], shape, data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.binary_same_shape(Op::Add, "add", a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.binary_same_shape(Op::Sub, "sub", a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.binary_same_shape(Op::Mul, "mul", a, b, |x, y| x * y)
    }

    /// Adds a [1, f] row (e.g. a bias) to every row of an [n, f] matrix.
    pub fn add_bcast_row(&mut self, x: Var, row: Var) -> Result<Var, NnError> {
        let (sx, sr) = (self.shape(x).to_vec(), self.shape(row).to_vec());
        let f = *sx.last().unwrap_or(&0);
        if sr != [1, f] && sr != [f] {
            return Err(shape_err("add_bcast_row", &sx, &sr));
        }
        let rv = self.value(row).to_vec();
        let data: Vec<f64> = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + rv[i % f])
            .collect();
        Ok(self.push(Op::AddBcastRow, vec![x, row], sx, data))
    }

    /// Repeats a [1, f] row `rows` times.
    pub fn broadcast(&mut self, row: Var, rows: usize) -> Result<Var, NnError> {
        let sr = self.shape(row).to_vec();
        if sr.len() != 2 || sr[0] != 1 {
            return Err(shape_err("broadcast", &sr, &[1, 0]));
        }
        let f = sr[1];
        let mut data = Vec::with_capacity(rows * f);
        for _ in 0..rows {
            data.extend_from_slice(self.value(row));
        }
        Ok(self.push(Op::Broadcast, vec![row], vec![rows, f], data))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let data: Vec<f64> = self.value(x).iter().map(|&v| v * c).collect();
        let shape = self.shape(x).to_vec();
        self.push(Op::Scale(c), vec![x], shape, data)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let data: Vec<f64> = self.value(x).iter().map(|&v| v + c).collect();
        let shape = self.shape(x).to_vec();
        self.push(Op::AddScalar, vec![x], shape, data)
    }

    fn unary(&mut self, op: Op, x: Var, f: impl Fn(f64) -> f64) -> Var {
        let data: Vec<f64> = self.value(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(op, vec![x], shape, data)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(Op::Sigmoid, x, |v| 1.0 / (1.0 + (-v).exp()))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(Op::Tanh, x, f64::tanh)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(Op::Relu, x, |v| v.max(0.0))
    }

    pub fn rsqrt(&mut self, x: Var) -> Var {
        self.unary(Op::Rsqrt, x, |v| 1.0 / v.sqrt())
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(Op::Clamp { lo, hi }, x, |v| v.clamp(lo, hi))
    }

    /// Row-wise softmax over the last dimension of an [n, k] matrix.
    pub fn softmax_lastdim(&mut self, x: Var) -> Result<Var, NnError> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 {
            return Err(NnError::Invalid {
                op: "softmax_lastdim",
                msg: format!("expected 2D input, got {shape:?}"),
            });
        }
        let (n, k) = (shape[0], shape[1]);
        let xv = self.value(x);
        let mut data = vec![0.0; n * k];
        for r in 0..n {
            let row = &xv[r * k..(r + 1) * k];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (j, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                data[r * k + j] = e;
                sum += e;
            }
            for j in 0..k {
                data[r * k + j] /= sum;
            }
        }
        Ok(self.push(Op::SoftmaxLastDim, vec![x], shape, data))
    }

    /// Stacks [n_i, f] matrices vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NnError> {
        let f = self.shape(parts[0]).last().copied().unwrap_or(0);
        let mut rows = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[1] != f {
                return Err(shape_err("concat_rows", self.shape(parts[0]), s));
            }
            rows += s[0];
        }
        let mut data = Vec::with_capacity(rows * f);
        for &p in parts {
            data.extend_from_slice(self.value(p));
        }
        Ok(self.push(Op::ConcatRows, parts.to_vec(), vec![rows, f], data))
    }

    /// Concatenates [n, f_i] matrices along the feature axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NnError> {
        let n = self.shape(parts[0])[0];
        let mut width = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != n {
                return Err(shape_err("concat_cols", self.shape(parts[0]), s));
            }
            width += s[1];
        }
        let mut data = vec![0.0; n * width];
        let mut col = 0;
        for &p in parts {
            let f = self.shape(p)[1];
            let pv = self.value(p);
            for r in 0..n {
                data[r * width + col..r * width + col + f]
                    .copy_from_slice(&pv[r * f..(r + 1) * f]);
            }
            col += f;
        }
        Ok(self.push(Op::ConcatCols, parts.to_vec(), vec![n, width], data))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var, NnError> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || start + len > s[0] {
            return Err(NnError::Invalid {
                op: "slice_rows",
                msg: format!("rows {start}..{} out of {s:?}", start + len),
            });
        }
        let f = s[1];
        let data = self.value(x)[start * f..(start + len) * f].to_vec();
        Ok(self.push(Op::SliceRows { start }, vec![x], vec![len, f], data))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, NnError> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || start + len > s[1] {
            return Err(NnError::Invalid {
                op: "slice_cols",
                msg: format!("cols {start}..{} out of {s:?}", start + len),
            });
        }
        let (n, f) = (s[0], s[1]);
        let mut data = Vec::with_capacity(n * len);
        let xv = self.value(x);
        for r in 0..n {
            data.extend_from_slice(&xv[r * f + start..r * f + start + len]);
        }
        Ok(self.push(Op::SliceCols { start }, vec![x], vec![n, len], data))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, NnError> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(shape_err("reshape", self.shape(x), shape));
        }
        let data = self.value(x).to_vec();
        Ok(self.push(Op::Reshape, vec![x], shape.to_vec(), data))
    }

    /// Collects rows of x by index; [`GATHER_PAD`] yields a zero row.
    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var, NnError> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(NnError::Invalid {
                op: "gather_rows",
                msg: format!("expected 2D input, got {s:?}"),
            });
        }
        let (n, f) = (s[0], s[1]);
        let mut data = vec![0.0; indices.len() * f];
        let xv = self.value(x);
        for (out_r, &idx) in indices.iter().enumerate() {
            if idx == GATHER_PAD {
                continue;
            }
            if idx >= n {
                return Err(NnError::Invalid {
                    op: "gather_rows",
                    msg: format!("index {idx} out of {n} rows"),
                });
            }
            data[out_r * f..(out_r + 1) * f].copy_from_slice(&xv[idx * f..(idx + 1) * f]);
        }
        Ok(self.push(
            Op::GatherRows {
                indices: indices.to_vec(),
            },
            vec![x],
            vec![indices.len(), f],
            data,
        ))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1);
        let m = self.value(x).iter().sum::<f64>() / n as f64;
        self.push(Op::MeanAll, vec![x], vec![1], vec![m])
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum::<f64>();
        self.push(Op::SumAll, vec![x], vec![1], vec![s])
    }

    /// Column means of an [n, f] matrix -> [1, f].
    pub fn mean_rows(&mut self, x: Var) -> Result<Var, NnError> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || s[0] == 0 {
            return Err(NnError::Invalid {
                op: "mean_rows",
                msg: format!("expected non-empty 2D input, got {s:?}"),
            });
        }
        let (n, f) = (s[0], s[1]);
        let xv = self.value(x);
        let mut data = vec![0.0; f];
        for r in 0..n {
            for c in 0..f {
                data[c] += xv[r * f + c];
            }
        }
        for v in &mut data {
            *v /= n as f64;
        }
        Ok(self.push(Op::MeanRows, vec![x], vec![1, f], data))
    }

    /// Column-wise max of an [n, f] matrix -> [1, f]; ties route the gradient
    /// to the first maximal row.
    pub fn max_rows(&mut self, x: Var) -> Result<Var, NnError> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || s[0] == 0 {
            return Err(NnError::Invalid {
                op: "max_rows",
                msg: format!("expected non-empty 2D input, got {s:?}"),
            });
        }
        let (n, f) = (s[0], s[1]);
        let xv = self.value(x);
        let mut data = vec![f64::NEG_INFINITY; f];
        let mut argmax = vec![0usize; f];
        for r in 0..n {
            for c in 0..f {
                let v = xv[r * f + c];
                if v > data[c] {
                    data[c] = v;
                    argmax[c] = r;
                }
            }
        }
        Ok(self.push(Op::MaxRows { argmax }, vec![x], vec![1, f], data))
    }

    fn check_segments(
        &self,
        op: &'static str,
        x: Var,
        lens: &[usize],
    ) -> Result<(usize, usize), NnError> {
        let s = self.shape(x).to_vec();
        let total: usize = lens.iter().sum();
        if s.len() != 2 || s[0] != total {
            return Err(NnError::Invalid {
                op,
                msg: format!("segments cover {total} rows but input is {s:?}"),
            });
        }
        Ok((s[0], s[1]))
    }

    /// Mean over each consecutive row segment; one output row per segment.
    /// Every segment must be non-empty.
    pub fn segment_mean(&mut self, x: Var, lens: Vec<usize>) -> Result<Var, NnError> {
        let (_, f) = self.check_segments("segment_mean", x, &lens)?;
        if lens.iter().any(|&l| l == 0) {
            return Err(NnError::Invalid {
                op: "segment_mean",
                msg: "empty segment".into(),
            });
        }
        let xv = self.value(x);
        let mut data = vec![0.0; lens.len() * f];
        let mut row = 0;
        for (g, &len) in lens.iter().enumerate() {
            for _ in 0..len {
                for c in 0..f {
                    data[g * f + c] += xv[row * f + c];
                }
                row += 1;
            }
            for c in 0..f {
                data[g * f + c] /= len as f64;
            }
        }
        let g = lens.len();
        Ok(self.push(Op::SegmentMean { lens }, vec![x], vec![g, f], data))
    }

    pub fn segment_sum(&mut self, x: Var, lens: Vec<usize>) -> Result<Var, NnError> {
        let (_, f) = self.check_segments("segment_sum", x, &lens)?;
        let xv = self.value(x);
        let mut data = vec![0.0; lens.len() * f];
        let mut row = 0;
        for (g, &len) in lens.iter().enumerate() {
            for _ in 0..len {
                for c in 0..f {
                    data[g * f + c] += xv[row * f + c];
                }
                row += 1;
            }
        }
        let g = lens.len();
        Ok(self.push(Op::SegmentSum { lens }, vec![x], vec![g, f], data))
    }

    /// Column-wise max per segment; gradients route to the first maximal row.
    pub fn segment_max(&mut self, x: Var, lens: Vec<usize>) -> Result<Var, NnError> {
        let (_, f) = self.check_segments("segment_max", x, &lens)?;
        if lens.iter().any(|&l| l == 0) {
            return Err(NnError::Invalid {
                op: "segment_max",
                msg: "empty segment".into(),
            });
        }
        let xv = self.value(x);
        let mut data = vec![f64::NEG_INFINITY; lens.len() * f];
        let mut argmax = vec![0usize; lens.len() * f];
        let mut row = 0;
        for (g, &len) in lens.iter().enumerate() {
            for _ in 0..len {
                for c in 0..f {
                    let v = xv[row * f + c];
                    if v > data[g * f + c] {
                        data[g * f + c] = v;
                        argmax[g * f + c] = row;
                    }
                }
                row += 1;
            }
        }
        let g = lens.len();
        Ok(self.push(Op::SegmentMax { lens, argmax }, vec![x], vec![g, f], data))
    }

    /// Softmax over each consecutive segment of an [n, 1] column.
    pub fn segment_softmax(&mut self, x: Var, lens: Vec<usize>) -> Result<Var, NnError> {
        let (n, f) = self.check_segments("segment_softmax", x, &lens)?;
        if f != 1 {
            return Err(NnError::Invalid {
                op: "segment_softmax",
                msg: format!("expected a column vector, got {} columns", f),
            });
        }
        let xv = self.value(x);
        let mut data = vec![0.0; n];
        let mut row = 0;
        for &len in &lens {
            let seg = &xv[row..row + len];
            let max = seg.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (j, &v) in seg.iter().enumerate() {
                let e = (v - max).exp();
                data[row + j] = e;
                sum += e;
            }
            for j in 0..len {
                data[row + j] /= sum;
            }
            row += len;
        }
        Ok(self.push(Op::SegmentSoftmax { lens }, vec![x], vec![n, 1], data))
    }

    // ---- structured ops ----

    /// 3x3 zero-padded convolution on a pixel-major [h*w, cin] map.
    pub fn conv2d(
        &mut self,
        x: Var,
        weight: Var,
        bias: Var,
        h: usize,
        w: usize,
    ) -> Result<Var, NnError> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(weight).to_vec();
        if sx.len() != 2 || sx[0] != h * w {
            return Err(NnError::Invalid {
                op: "conv2d",
                msg: format!("input {sx:?} does not cover {h}x{w} pixels"),
            });
        }
        let cin = sx[1];
        if sw.len() != 2 || sw[0] != 9 * cin {
            return Err(shape_err("conv2d", &sx, &sw));
        }
        let cout = sw[1];
        if self.shape(bias) != [1, cout] {
            return Err(shape_err("conv2d", &sw, self.shape(bias)));
        }
        let mut out = vec![0.0; h * w * cout];
        {
            let xv = self.value(x);
            let wv = self.value(weight);
            let bv = self.value(bias);
            for r in 0..h {
                for c in 0..w {
                    let orow = (r * w + c) * cout;
                    out[orow..orow + cout].copy_from_slice(bv);
                    for o in 0..9 {
                        let rr = r as isize + (o / 3) as isize - 1;
                        let cc = c as isize + (o % 3) as isize - 1;
                        if rr < 0 || rr >= h as isize || cc < 0 || cc >= w as isize {
                            continue;
                        }
                        let xrow = (rr as usize * w + cc as usize) * cin;
                        for ci in 0..cin {
                            let v = xv[xrow + ci];
                            if v == 0.0 {
                                continue;
                            }
                            let wrow = (o * cin + ci) * cout;
                            for co in 0..cout {
                                out[orow + co] += v * wv[wrow + co];
                            }
                        }
                    }
                }
            }
        }
        Ok(self.push(
            Op::Conv2d { h, w },
            vec![x, weight, bias],
            vec![h * w, cout],
            out,
        ))
    }

    /// Sparse voxel convolution: each output row sums `weight` applied to its
    /// k gathered neighbor rows (index -1 = unoccupied, contributes zero).
    pub fn sparse_conv3(
        &mut self,
        x: Var,
        weight: Var,
        bias: Var,
        neighbors: Vec<i64>,
        k: usize,
    ) -> Result<Var, NnError> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(weight).to_vec();
        let cin = sx[1];
        if sw.len() != 2 || sw[0] != k * cin {
            return Err(shape_err("sparse_conv3", &sx, &sw));
        }
        let cout = sw[1];
        if self.shape(bias) != [1, cout] {
            return Err(shape_err("sparse_conv3", &sw, self.shape(bias)));
        }
        if neighbors.len() % k != 0 {
            return Err(NnError::Invalid {
                op: "sparse_conv3",
                msg: format!("neighbor table {} not divisible by k={k}", neighbors.len()),
            });
        }
        let out_cells = neighbors.len() / k;
        let mut out = vec![0.0; out_cells * cout];
        {
            let xv = self.value(x);
            let wv = self.value(weight);
            let bv = self.value(bias);
            for m in 0..out_cells {
                let orow = m * cout;
                out[orow..orow + cout].copy_from_slice(bv);
                for o in 0..k {
                    let src = neighbors[m * k + o];
                    if src < 0 {
                        continue;
                    }
                    let xrow = src as usize * cin;
                    for ci in 0..cin {
                        let v = xv[xrow + ci];
                        if v == 0.0 {
                            continue;
                        }
                        let wrow = (o * cin + ci) * cout;
                        for co in 0..cout {
                            out[orow + co] += v * wv[wrow + co];
                        }
                    }
                }
            }
        }
        Ok(self.push(
            Op::SparseConv3 { neighbors, k },
            vec![x, weight, bias],
            vec![out_cells, cout],
            out,
        ))
    }

    /// Trilinear interpolation of grid features at a sample position.
    ///
    /// `rows` are feature-row indices of the 8 surrounding cell centers
    /// ([`GATHER_PAD`] = unoccupied), `weights` their trilinear weights, and
    /// `dweights` the weight gradients with respect to the position. Corner
    /// resolution happens at call time from the position's forward value.
    pub fn trilinear(
        &mut self,
        features: Var,
        position: Var,
        rows: [usize; 8],
        weights: [f64; 8],
        dweights: [[f64; 3]; 8],
    ) -> Result<Var, NnError> {
        let sf = self.shape(features).to_vec();
        if sf.len() != 2 {
            return Err(NnError::Invalid {
                op: "trilinear",
                msg: format!("features must be 2D, got {sf:?}"),
            });
        }
        if self.shape(position) != [1, 3] {
            return Err(shape_err("trilinear", &sf, self.shape(position)));
        }
        let f = sf[1];
        let mut out = vec![0.0; f];
        let fv = self.value(features);
        for c in 0..8 {
            if rows[c] == GATHER_PAD {
                continue;
            }
            let src = &fv[rows[c] * f..(rows[c] + 1) * f];
            for (dst, &v) in out.iter_mut().zip(src) {
                *dst += weights[c] * v;
            }
        }
        Ok(self.push(
            Op::Trilinear {
                rows,
                weights,
                dweights,
            },
            vec![features, position],
            vec![1, f],
            out,
        ))
    }

    /// 2x2 average pooling; h and w must be even.
    pub fn avg_pool2(&mut self, x: Var, h: usize, w: usize) -> Result<Var, NnError> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || s[0] != h * w || h % 2 != 0 || w % 2 != 0 {
            return Err(NnError::Invalid {
                op: "avg_pool2",
                msg: format!("input {s:?} incompatible with even {h}x{w}"),
            });
        }
        let c = s[1];
        let (oh, ow) = (h / 2, w / 2);
        let mut out = vec![0.0; oh * ow * c];
        let xv = self.value(x);
        for r in 0..oh {
            for q in 0..ow {
                let orow = (r * ow + q) * c;
                for (dr, dc) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let xrow = ((2 * r + dr) * w + 2 * q + dc) * c;
                    for ch in 0..c {
                        out[orow + ch] += 0.25 * xv[xrow + ch];
                    }
                }
            }
        }
        Ok(self.push(Op::AvgPool2 { h, w }, vec![x], vec![oh * ow, c], out))
    }

    /// Bilinear x2 upsampling of an [h*w, c] map to [2h*2w, c].
    pub fn interp2x(&mut self, x: Var, h: usize, w: usize) -> Result<Var, NnError> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || s[0] != h * w {
            return Err(NnError::Invalid {
                op: "interp2x",
                msg: format!("input {s:?} does not cover {h}x{w} pixels"),
            });
        }
        let c = s[1];
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![0.0; oh * ow * c];
        let xv = self.value(x);
        for (orow, (sr0, sc0, wr, wc)) in Interp2xIter::new(h, w).enumerate() {
            let sr1 = (sr0 + 1).min(h - 1);
            let sc1 = (sc0 + 1).min(w - 1);
            let taps = [
                (sr0 * w + sc0, (1.0 - wr) * (1.0 - wc)),
                (sr0 * w + sc1, (1.0 - wr) * wc),
                (sr1 * w + sc0, wr * (1.0 - wc)),
                (sr1 * w + sc1, wr * wc),
            ];
            for (src, weight) in taps {
                for ch in 0..c {
                    out[orow * c + ch] += weight * xv[src * c + ch];
                }
            }
        }
        Ok(self.push(Op::Interp2x { h, w }, vec![x], vec![oh * ow, c], out))
    }

    // ---- losses (targets are constants) ----

    pub fn mse(&mut self, x: Var, target: &Tensor) -> Result<Var, NnError> {
        if self.shape(x) != target.shape.as_slice() {
            return Err(shape_err("mse", self.shape(x), &target.shape));
        }
        let n = target.numel().max(1) as f64;
        let loss = self
            .value(x)
            .iter()
            .zip(&target.data)
            .map(|(&p, &t)| (p - t) * (p - t))
            .sum::<f64>()
            / n;
        Ok(self.push(
            Op::Mse {
                target: target.clone(),
            },
            vec![x],
            vec![1],
            vec![loss],
        ))
    }

    pub fn l1(&mut self, x: Var, target: &Tensor) -> Result<Var, NnError> {
        if self.shape(x) != target.shape.as_slice() {
            return Err(shape_err("l1", self.shape(x), &target.shape));
        }
        let n = target.numel().max(1) as f64;
        let loss = self
            .value(x)
            .iter()
            .zip(&target.data)
            .map(|(&p, &t)| (p - t).abs())
            .sum::<f64>()
            / n;
        Ok(self.push(
            Op::L1 {
                target: target.clone(),
            },
            vec![x],
            vec![1],
            vec![loss],
        ))
    }

    /// Numerically stable mean binary cross-entropy on logits.
    pub fn bce_with_logits(&mut self, logits: Var, labels: &Tensor) -> Result<Var, NnError> {
        if self.shape(logits) != labels.shape.as_slice() {
            return Err(shape_err("bce_with_logits", self.shape(logits), &labels.shape));
        }
        let n = labels.numel().max(1) as f64;
        let loss = self
            .value(logits)
            .iter()
            .zip(&labels.data)
            .map(|(&z, &y)| z.max(0.0) - z * y + (1.0 + (-z.abs()).exp()).ln())
            .sum::<f64>()
            / n;
        Ok(self.push(
            Op::BceWithLogits {
                labels: labels.clone(),
            },
            vec![logits],
            vec![1],
            vec![loss],
        ))
    }

    // ---- backward ----

    /// Reverse pass from a scalar loss; gradients accumulate additively in
    /// exact reverse push order.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(
            self.value(loss).len(),
            1,
            "backward expects a scalar loss, got shape {:?}",
            self.shape(loss)
        );
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(up) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(idx, &up, &mut grads);
            grads[idx] = Some(up);
        }
        Gradients { grads }
    }

    fn accum(grads: &mut [Option<Vec<f64>>], var: Var, len: usize, f: impl FnOnce(&mut [f64])) {
        let slot = grads[var.0].get_or_insert_with(|| vec![0.0; len]);
        f(slot);
    }

    fn backprop_node(&self, idx: usize, up: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let ins = &node.inputs;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul => {
                let (a, b) = (ins[0], ins[1]);
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                let av = self.value(a);
                let bv = self.value(b);
                Self::accum(grads, a, m * k, |ga| {
                    for i in 0..m {
                        for p in 0..k {
                            let mut acc = 0.0;
                            let urow = &up[i * n..(i + 1) * n];
                            let brow = &bv[p * n..(p + 1) * n];
                            for j in 0..n {
                                acc += urow[j] * brow[j];
                            }
                            ga[i * k + p] += acc;
                        }
                    }
                });
                Self::accum(grads, b, k * n, |gb| {
                    for i in 0..m {
                        for p in 0..k {
                            let x = av[i * k + p];
                            if x == 0.0 {
                                continue;
                            }
                            let urow = &up[i * n..(i + 1) * n];
                            let grow = &mut gb[p * n..(p + 1) * n];
                            for j in 0..n {
                                grow[j] += x * urow[j];
                            }
                        }
                    }
                });
            }
            Op::Add => {
                for &v in ins {
                    Self::accum(grads, v, up.len(), |g| {
                        for (gi, &u) in g.iter_mut().zip(up) {
                            *gi += u;
                        }
                    });
                }
            }
            Op::Sub => {
                Self::accum(grads, ins[0], up.len(), |g| {
                    for (gi, &u) in g.iter_mut().zip(up) {
                        *gi += u;
                    }
                });
                Self::accum(grads, ins[1], up.len(), |g| {
                    for (gi, &u) in g.iter_mut().zip(up) {
                        *gi -= u;
                    }
                });
            }
            Op::Mul => {
                let av = self.value(ins[0]).to_vec();
                let bv = self.value(ins[1]).to_vec();
                Self::accum(grads, ins[0], up.len(), |g| {
                    for i in 0..up.len() {
                        g[i] += up[i] * bv[i];
                    }
                });
                Self::accum(grads, ins[1], up.len(), |g| {
                    for i in 0..up.len() {
                        g[i] += up[i] * av[i];
                    }
                });
            }
            Op::AddBcastRow => {
                let f = *node.shape.last().unwrap();
                Self::accum(grads, ins[0], up.len(), |g| {
                    for (gi, &u) in g.iter_mut().zip(up) {
                        *gi += u;
                    }
                });
                let rlen = self.value(ins[1]).len();
                Self::accum(grads, ins[1], rlen, |g| {
                    for (i, &u) in up.iter().enumerate() {
                        g[i % f] += u;
                    }
                });
            }
            Op::Broadcast => {
                let f = *node.shape.last().unwrap();
                Self::accum(grads, ins[0], f, |g| {
                    for (i, &u) in up.iter().enumerate() {
                        g[i % f] += u;
                    }
                });
            }
            Op::Scale(c) => {
                let c = *c;
                Self::accum(grads, ins[0], up.len(), |g| {
                    for (gi, &u) in g.iter_mut().zip(up) {
                        *gi += c * u;
                    }
                });
            }
            Op::AddScalar => {
                Self::accum(grads, ins[0], up.len(), |g| {
                    for (gi, &u) in g.iter_mut().zip(up) {
                        *gi += u;
                    }
                });
            }
            Op::Sigmoid => {
                let y = &node.data;
                Self::accum(grads, ins[0], up.len(), |g| {
                    for i in 0..up.len() {
                        g[i] += up[i] * y[i] * (1.0 - y[i]);
                    }
                });
            }
            Op::Tanh => {
                let y = &node.data;
                Self::accum(grads, ins[0], up.len(), |g| {
                    for i in 0..up.len() {
                        g[i] += up[i] * (1.0 - y[i] * y[i]);
                    }
                });
            }
            Op::Relu => {
                let x = self.value(ins[0]).to_vec();
                Self::accum(grads, ins[0], up.len(), |g| {
                    for i in 0..up.len() {
                        if x[i] > 0.0 {
                            g[i] += up[i];
                        }
                    }
                });
            }
            Op::Rsqrt => {
                let x = self.value(ins[0]).to_vec();
                Self::accum(grads, ins[0], up.len(), |g| {
                    for i in 0..up.len() {
                        g[i] += up[i] * (-0.5) * x[i].powf(-1.5);
                    }
                });
            }
            Op::Clamp { lo, hi } => {
                let x = self.value(ins[0]).to_vec();
                let (lo, hi) = (*lo, *hi);
                Self::accum(grads, ins[0], up.len(), |g| {
                    for i in 0..up.len() {
                        if x[i] > lo && x[i] < hi {
                            g[i] += up[i];
                        }
                    }
                });
            }
            Op::SoftmaxLastDim => {
                let k = *node.shape.last().unwrap();
                let y = &node.data;
                Self::accum(grads, ins[0], up.len(), |g| {
                    for r in 0..node.shape[0] {
                        let ys = &y[r * k..(r + 1) * k];
                        let us = &up[r * k..(r + 1) * k];
                        let dot: f64 = ys.iter().zip(us).map(|(&a, &b)| a * b).sum();
                        for j in 0..k {
                            g[r * k + j] += ys[j] * (us[j] - dot);
                        }
                    }
                });
            }
            Op::ConcatRows => {
                let mut offset = 0;
                for &p in ins {
                    let len = self.value(p).len();
                    Self::accum(grads, p, len, |g| {
                        for i in 0..len {
                            g[i] += up[offset + i];
                        }
                    });
                    offset += len;
                }
            }
            Op::ConcatCols => {
                let n = node.shape[0];
                let width = node.shape[1];
                let mut col = 0;
                for &p in ins {
                    let f = self.shape(p)[1];
                    Self::accum(grads, p, n * f, |g| {
                        for r in 0..n {
                            for c in 0..f {
                                g[r * f + c] += up[r * width + col + c];
                            }
                        }
                    });
                    col += f;
                }
            }
            Op::SliceRows { start } => {
                let f = node.shape[1];
                let total = self.value(ins[0]).len();
                let offset = start * f;
                Self::accum(grads, ins[0], total, |g| {
                    for i in 0..up.len() {
                        g[offset + i] += up[i];
                    }
                });
            }
            Op::SliceCols { start } => {
                let (n, len) = (node.shape[0], node.shape[1]);
                let f = self.shape(ins[0])[1];
                let total = self.value(ins[0]).len();
                let start = *start;
                Self::accum(grads, ins[0], total, |g| {
                    for r in 0..n {
                        for c in 0..len {
                            g[r * f + start + c] += up[r * len + c];
                        }
                    }
                });
            }
            Op::Reshape => {
                Self::accum(grads, ins[0], up.len(), |g| {
                    for (gi, &u) in g.iter_mut().zip(up) {
                        *gi += u;
                    }
                });
            }
            Op::GatherRows { indices } => {
                let f = node.shape[1];
                let total = self.value(ins[0]).len();
                Self::accum(grads, ins[0], total, |g| {
                    for (out_r, &idx) in indices.iter().enumerate() {
                        if idx == GATHER_PAD {
                            continue;
                        }
                        for c in 0..f {
                            g[idx * f + c] += up[out_r * f + c];
                        }
                    }
                });
            }
            Op::MeanAll => {
                let n = self.value(ins[0]).len();
                let scale = up[0] / n as f64;
                Self::accum(grads, ins[0], n, |g| {
                    for gi in g.iter_mut() {
                        *gi += scale;
                    }
                });
            }
            Op::SumAll => {
                let n = self.value(ins[0]).len();
                Self::accum(grads, ins[0], n, |g| {
                    for gi in g.iter_mut() {
                        *gi += up[0];
                    }
                });
            }
            Op::MeanRows => {
                let f = node.shape[1];
                let n = self.shape(ins[0])[0];
                let inv = 1.0 / n as f64;
                Self::accum(grads, ins[0], n * f, |g| {
                    for r in 0..n {
                        for c in 0..f {
                            g[r * f + c] += up[c] * inv;
                        }
                    }
                });
            }
            Op::MaxRows { argmax } => {
                let f = node.shape[1];
                let total = self.value(ins[0]).len();
                Self::accum(grads, ins[0], total, |g| {
                    for c in 0..f {
                        g[argmax[c] * f + c] += up[c];
                    }
                });
            }
            Op::SegmentMean { lens } => {
                let f = node.shape[1];
                let total = self.value(ins[0]).len();
                Self::accum(grads, ins[0], total, |g| {
                    let mut row = 0;
                    for (seg, &len) in lens.iter().enumerate() {
                        let inv = 1.0 / len as f64;
                        for _ in 0..len {
                            for c in 0..f {
                                g[row * f + c] += up[seg * f + c] * inv;
                            }
                            row += 1;
                        }
                    }
                });
            }
            Op::SegmentSum { lens } => {
                let f = node.shape[1];
                let total = self.value(ins[0]).len();
                Self::accum(grads, ins[0], total, |g| {
                    let mut row = 0;
                    for (seg, &len) in lens.iter().enumerate() {
                        for _ in 0..len {
                            for c in 0..f {
                                g[row * f + c] += up[seg * f + c];
                            }
                            row += 1;
                        }
                    }
                });
            }
            Op::SegmentMax { lens, argmax } => {
                let f = node.shape[1];
                let total = self.value(ins[0]).len();
                Self::accum(grads, ins[0], total, |g| {
                    for seg in 0..lens.len() {
                        for c in 0..f {
                            g[argmax[seg * f + c] * f + c] += up[seg * f + c];
                        }
                    }
                });
            }
            Op::SegmentSoftmax { lens } => {
                let y = &node.data;
                Self::accum(grads, ins[0], y.len(), |g| {
                    let mut row = 0;
                    for &len in lens {
                        let ys = &y[row..row + len];
                        let us = &up[row..row + len];
                        let dot: f64 = ys.iter().zip(us).map(|(&a, &b)| a * b).sum();
                        for j in 0..len {
                            g[row + j] += ys[j] * (us[j] - dot);
                        }
                        row += len;
                    }
                });
            }
            Op::Conv2d { h, w } => {
                let (h, w) = (*h, *w);
                let (x, weight, bias) = (ins[0], ins[1], ins[2]);
                let cin = self.shape(x)[1];
                let cout = node.shape[1];
                let xv = self.value(x);
                let wv = self.value(weight);
                Self::accum(grads, bias, cout, |g| {
                    for p in 0..h * w {
                        for co in 0..cout {
                            g[co] += up[p * cout + co];
                        }
                    }
                });
                Self::accum(grads, weight, 9 * cin * cout, |g| {
                    for r in 0..h {
                        for c in 0..w {
                            let urow = (r * w + c) * cout;
                            for o in 0..9 {
                                let rr = r as isize + (o / 3) as isize - 1;
                                let cc = c as isize + (o % 3) as isize - 1;
                                if rr < 0 || rr >= h as isize || cc < 0 || cc >= w as isize {
                                    continue;
                                }
                                let xrow = (rr as usize * w + cc as usize) * cin;
                                for ci in 0..cin {
                                    let v = xv[xrow + ci];
                                    if v == 0.0 {
                                        continue;
                                    }
                                    let grow = (o * cin + ci) * cout;
                                    for co in 0..cout {
                                        g[grow + co] += v * up[urow + co];
                                    }
                                }
                            }
                        }
                    }
                });
                Self::accum(grads, x, h * w * cin, |g| {
                    for r in 0..h {
                        for c in 0..w {
                            let urow = (r * w + c) * cout;
                            for o in 0..9 {
                                let rr = r as isize + (o / 3) as isize - 1;
                                let cc = c as isize + (o % 3) as isize - 1;
                                if rr < 0 || rr >= h as isize || cc < 0 || cc >= w as isize {
                                    continue;
                                }
                                let xrow = (rr as usize * w + cc as usize) * cin;
                                for ci in 0..cin {
                                    let wrow = (o * cin + ci) * cout;
                                    let mut acc = 0.0;
                                    for co in 0..cout {
                                        acc += wv[wrow + co] * up[urow + co];
                                    }
                                    g[xrow + ci] += acc;
                                }
                            }
                        }
                    }
                });
            }
            Op::SparseConv3 { neighbors, k } => {
                let k = *k;
                let (x, weight, bias) = (ins[0], ins[1], ins[2]);
                let cin = self.shape(x)[1];
                let cout = node.shape[1];
                let out_cells = node.shape[0];
                let xv = self.value(x);
                let wv = self.value(weight);
                Self::accum(grads, bias, cout, |g| {
                    for m in 0..out_cells {
                        for co in 0..cout {
                            g[co] += up[m * cout + co];
                        }
                    }
                });
                Self::accum(grads, weight, k * cin * cout, |g| {
                    for m in 0..out_cells {
                        let urow = m * cout;
                        for o in 0..k {
                            let src = neighbors[m * k + o];
                            if src < 0 {
                                continue;
                            }
                            let xrow = src as usize * cin;
                            for ci in 0..cin {
                                let v = xv[xrow + ci];
                                if v == 0.0 {
                                    continue;
                                }
                                let grow = (o * cin + ci) * cout;
                                for co in 0..cout {
                                    g[grow + co] += v * up[urow + co];
                                }
                            }
                        }
                    }
                });
                Self::accum(grads, x, xv.len(), |g| {
                    for m in 0..out_cells {
                        let urow = m * cout;
                        for o in 0..k {
                            let src = neighbors[m * k + o];
                            if src < 0 {
                                continue;
                            }
                            let xrow = src as usize * cin;
                            for ci in 0..cin {
                                let wrow = (o * cin + ci) * cout;
                                let mut acc = 0.0;
                                for co in 0..cout {
                                    acc += wv[wrow + co] * up[urow + co];
                                }
                                g[xrow + ci] += acc;
                            }
                        }
                    }
                });
            }
            Op::Trilinear {
                rows,
                weights,
                dweights,
            } => {
                let (features, position) = (ins[0], ins[1]);
                let f = node.shape[1];
                let fv = self.value(features);
                let flen = fv.len();
                Self::accum(grads, features, flen, |g| {
                    for c in 0..8 {
                        if rows[c] == GATHER_PAD {
                            continue;
                        }
                        for j in 0..f {
                            g[rows[c] * f + j] += weights[c] * up[j];
                        }
                    }
                });
                Self::accum(grads, position, 3, |g| {
                    for c in 0..8 {
                        if rows[c] == GATHER_PAD {
                            continue;
                        }
                        let frow = &fv[rows[c] * f..(rows[c] + 1) * f];
                        let dot: f64 = frow.iter().zip(up).map(|(&a, &b)| a * b).sum();
                        for a in 0..3 {
                            g[a] += dweights[c][a] * dot;
                        }
                    }
                });
            }
            Op::AvgPool2 { h, w } => {
                let (h, w) = (*h, *w);
                let c = node.shape[1];
                let ow = w / 2;
                Self::accum(grads, ins[0], h * w * c, |g| {
                    for r in 0..h / 2 {
                        for q in 0..ow {
                            let urow = (r * ow + q) * c;
                            for (dr, dc) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                                let xrow = ((2 * r + dr) * w + 2 * q + dc) * c;
                                for ch in 0..c {
                                    g[xrow + ch] += 0.25 * up[urow + ch];
                                }
                            }
                        }
                    }
                });
            }
            Op::Interp2x { h, w } => {
                let (h, w) = (*h, *w);
                let c = node.shape[1];
                Self::accum(grads, ins[0], h * w * c, |g| {
                    for (orow, (sr0, sc0, wr, wc)) in Interp2xIter::new(h, w).enumerate() {
                        let sr1 = (sr0 + 1).min(h - 1);
                        let sc1 = (sc0 + 1).min(w - 1);
                        let taps = [
                            (sr0 * w + sc0, (1.0 - wr) * (1.0 - wc)),
                            (sr0 * w + sc1, (1.0 - wr) * wc),
                            (sr1 * w + sc0, wr * (1.0 - wc)),
                            (sr1 * w + sc1, wr * wc),
                        ];
                        for (src, weight) in taps {
                            for ch in 0..c {
                                g[src * c + ch] += weight * up[orow * c + ch];
                            }
                        }
                    }
                });
            }
            Op::Mse { target } => {
                let n = target.numel().max(1) as f64;
                let x = self.value(ins[0]).to_vec();
                Self::accum(grads, ins[0], x.len(), |g| {
                    for i in 0..x.len() {
                        g[i] += up[0] * 2.0 * (x[i] - target.data[i]) / n;
                    }
                });
            }
            Op::L1 { target } => {
                let n = target.numel().max(1) as f64;
                let x = self.value(ins[0]).to_vec();
                Self::accum(grads, ins[0], x.len(), |g| {
                    for i in 0..x.len() {
                        let d = x[i] - target.data[i];
                        if d != 0.0 {
                            g[i] += up[0] * d.signum() / n;
                        }
                    }
                });
            }
            Op::BceWithLogits { labels } => {
                let n = labels.numel().max(1) as f64;
                let z = self.value(ins[0]).to_vec();
                Self::accum(grads, ins[0], z.len(), |g| {
                    for i in 0..z.len() {
                        let s = 1.0 / (1.0 + (-z[i]).exp());
                        g[i] += up[0] * (s - labels.data[i]) / n;
                    }
                });
            }
        }
    }
}

/// Yields (src_row0, src_col0, weight_row, weight_col) per output pixel of a
/// half-pixel-aligned 2x bilinear upsampling.
struct Interp2xIter {
    h: usize,
    w: usize,
    idx: usize,
}

impl Interp2xIter {
    fn new(h: usize, w: usize) -> Self {
        Self { h, w, idx: 0 }
    }
}

impl Iterator for Interp2xIter {
    type Item = (usize, usize, f64, f64);

    fn next(&mut self) -> Option<Self::Item> {
        let total = 4 * self.h * self.w;
        if self.idx >= total {
            return None;
        }
        let ow = 2 * self.w;
        let (r, c) = (self.idx / ow, self.idx % ow);
        self.idx += 1;
        let sr = ((r as f64 + 0.5) / 2.0 - 0.5).max(0.0);
        let sc = ((c as f64 + 0.5) / 2.0 - 0.5).max(0.0);
        let sr0 = sr.floor().min((self.h - 1) as f64);
        let sc0 = sc.floor().min((self.w - 1) as f64);
        Some((sr0 as usize, sc0 as usize, sr - sr0, sc - sc0))
    }
}
