//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its value and
//! enough information to push gradients back to its inputs. Graphs are built
//! fresh for every forward pass and dropped afterwards. Parameters live in a
//! [`ParamStore`](crate::params::ParamStore) and enter a graph through
//! [`Graph::param`]; gradients come back keyed by [`ParamId`].

use std::cell::{Ref, RefCell};
use std::collections::HashMap;

use ndarray::{s, Array2, Axis, Zip};

use crate::params::{ParamId, ParamStore};

pub type Mat = Array2<f64>;

const NORM_EPS: f64 = 1e-12;
const LAYER_NORM_EPS: f64 = 1e-5;
const SIXD_EPS: f64 = 1e-9;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Constant,
    Input,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Transpose(Var),
    Gelu(Var),
    Relu(Var),
    Square(Var),
    SoftmaxRows(Var),
    LayerNormRows(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    BroadcastRow(Var),
    GroupMax(Var, Vec<usize>),
    MeanRows(Var),
    SumAll(Var),
    SumCols(Var),
    Reshape(Var),
    InterpRows(Var, Vec<[usize; 3]>, Vec<[f64; 3]>),
    BlockLeftMul(Var, Var),
    RowNormAbs(Var),
    SixdToRot(Var),
    RotateVecs(Var, Var, bool),
    TileCols(Var),
    RowNorms(Var),
    GeodesicAngle(Var, Mat),
}

struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    nodes: Vec<Option<Mat>>,
    params: HashMap<ParamId, Mat>,
}

impl Gradients {
    /// Gradient with respect to an input or intermediate node.
    pub fn wrt(&self, v: Var) -> Option<&Mat> {
        self.nodes.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, id: ParamId) -> Option<&Mat> {
        self.params.get(&id)
    }

    pub fn params(&self) -> &HashMap<ParamId, Mat> {
        &self.params
    }

    pub fn into_params(self) -> HashMap<ParamId, Mat> {
        self.params
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    param_cache: RefCell<HashMap<ParamId, Var>>,
}

// ½(1 + tanh z) = σ(2z), and exp is much cheaper than tanh.
fn gelu(x: f64) -> f64 {
    const C2: f64 = 1.595_769_121_605_731; // 2·sqrt(2/pi)
    x / (1.0 + (-C2 * (x + 0.044715 * x * x * x)).exp())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let s = 1.0 / (1.0 + (-2.0 * C * (x + 0.044715 * x * x * x)).exp());
    // 1 − tanh² = 4σ(1 − σ)
    s + 2.0 * x * s * (1.0 - s) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn norm(a: [f64; 3]) -> f64 {
    dot(a, a).sqrt()
}

/// Unit vector orthogonal to `b`, used when the second 6D half collapses onto the first.
fn any_perpendicular(b: [f64; 3]) -> [f64; 3] {
    let axis = if b[0].abs() < 0.9 {
        [1.0, 0.0, 0.0]
    } else {
        [0.0, 1.0, 0.0]
    };
    let d = dot(axis, b);
    let u = [axis[0] - d * b[0], axis[1] - d * b[1], axis[2] - d * b[2]];
    let n = norm(u);
    [u[0] / n, u[1] / n, u[2] / n]
}

/// Forward pieces of the Gram-Schmidt 6D decode for one row.
struct SixdParts {
    b1: [f64; 3],
    b2: [f64; 3],
    b3: [f64; 3],
    n1: f64,
    n2: f64,
    a2: [f64; 3],
    degenerate1: bool,
    degenerate2: bool,
}

fn sixd_parts(row: &[f64]) -> SixdParts {
    let a1 = [row[0], row[1], row[2]];
    let a2 = [row[3], row[4], row[5]];
    let n1 = norm(a1);
    let degenerate1 = !(n1 > SIXD_EPS);
    let b1 = if degenerate1 {
        [1.0, 0.0, 0.0]
    } else {
        [a1[0] / n1, a1[1] / n1, a1[2] / n1]
    };
    let d = dot(b1, a2);
    let u = [a2[0] - d * b1[0], a2[1] - d * b1[1], a2[2] - d * b1[2]];
    let n2 = norm(u);
    let degenerate2 = !(n2 > SIXD_EPS);
    let b2 = if degenerate2 {
        if degenerate1 {
            [0.0, 1.0, 0.0]
        } else {
            any_perpendicular(b1)
        }
    } else {
        [u[0] / n2, u[1] / n2, u[2] / n2]
    };
    let b3 = cross(b1, b2);
    SixdParts {
        b1,
        b2,
        b3,
        n1,
        n2,
        a2,
        degenerate1,
        degenerate2,
    }
}

/// Decode a 6D rotation encoding into a row-major 3×3 matrix whose columns are
/// the Gram-Schmidt frame of the two halves. Degenerate halves fall back to the
/// identity axes.
pub fn sixd_to_matrix(row: &[f64]) -> [f64; 9] {
    let p = sixd_parts(row);
    let mut out = [0.0; 9];
    for r in 0..3 {
        out[3 * r] = p.b1[r];
        out[3 * r + 1] = p.b2[r];
        out[3 * r + 2] = p.b3[r];
    }
    out
}

fn geodesic_parts(r: &[f64], t: &[f64]) -> ([[f64; 3]; 3], f64, [f64; 3]) {
    // M = Rᵀ T
    let mut m = [[0.0; 3]; 3];
    for (i, mi) in m.iter_mut().enumerate() {
        for (j, mij) in mi.iter_mut().enumerate() {
            *mij = (0..3).map(|k| r[3 * k + i] * t[3 * k + j]).sum();
        }
    }
    let c = (m[0][0] + m[1][1] + m[2][2] - 1.0) / 2.0;
    let v = [
        (m[2][1] - m[1][2]) / 2.0,
        (m[0][2] - m[2][0]) / 2.0,
        (m[1][0] - m[0][1]) / 2.0,
    ];
    (m, c, v)
}

/// Geodesic angle between two row-major rotation matrices.
pub fn geodesic_angle(r: &[f64], t: &[f64]) -> f64 {
    let (_, c, v) = geodesic_parts(r, t);
    norm(v).atan2(c)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Mat, op: Op, needs_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> Ref<'_, Mat> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    /// Scalar value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.dim(), (1, 1), "scalar() on non-scalar node");
        m[[0, 0]]
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, value: Mat) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// A leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn input(&self, value: Mat) -> Var {
        self.push(value, Op::Input, true)
    }

    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.param_cache.borrow().get(&id) {
            return *v;
        }
        let v = self.push(store.get(id).clone(), Op::Param(id), true);
        self.param_cache.borrow_mut().insert(id, v);
        v
    }

    pub fn zeros(&self, rows: usize, cols: usize) -> Var {
        self.constant(Mat::zeros((rows, cols)))
    }

    // ----- elementwise -----

    pub fn add(&self, a: Var, b: Var) -> Var {
        let value = {
            let (va, vb) = (self.value(a), self.value(b));
            assert_eq!(va.dim(), vb.dim(), "add shape mismatch");
            &*va + &*vb
        };
        self.push(value, Op::Add(a, b), self.ng(a) || self.ng(b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let value = {
            let (va, vb) = (self.value(a), self.value(b));
            assert_eq!(va.dim(), vb.dim(), "sub shape mismatch");
            &*va - &*vb
        };
        self.push(value, Op::Sub(a, b), self.ng(a) || self.ng(b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let value = {
            let (va, vb) = (self.value(a), self.value(b));
            assert_eq!(va.dim(), vb.dim(), "mul shape mismatch");
            &*va * &*vb
        };
        self.push(value, Op::Mul(a, b), self.ng(a) || self.ng(b))
    }

    /// Adds a 1×c row to every row of `a`.
    pub fn add_row(&self, a: Var, row: Var) -> Var {
        let value = {
            let (va, vr) = (self.value(a), self.value(row));
            assert_eq!(vr.nrows(), 1, "add_row expects a single row");
            assert_eq!(va.ncols(), vr.ncols(), "add_row width mismatch");
            &*va + &*vr
        };
        self.push(value, Op::AddRow(a, row), self.ng(a) || self.ng(row))
    }

    /// Multiplies every row of `a` elementwise by a 1×c row.
    pub fn mul_row(&self, a: Var, row: Var) -> Var {
        let value = {
            let (va, vr) = (self.value(a), self.value(row));
            assert_eq!(vr.nrows(), 1, "mul_row expects a single row");
            assert_eq!(va.ncols(), vr.ncols(), "mul_row width mismatch");
            &*va * &*vr
        };
        self.push(value, Op::MulRow(a, row), self.ng(a) || self.ng(row))
    }

    pub fn scale(&self, a: Var, k: f64) -> Var {
        let value = &*self.value(a) * k;
        self.push(value, Op::Scale(a, k), self.ng(a))
    }

    pub fn gelu(&self, a: Var) -> Var {
        let value = self.value(a).mapv(gelu);
        self.push(value, Op::Gelu(a), self.ng(a))
    }

    pub fn relu(&self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.max(0.0));
        self.push(value, Op::Relu(a), self.ng(a))
    }

    pub fn square(&self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x * x);
        self.push(value, Op::Square(a), self.ng(a))
    }

    // ----- linear algebra -----

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let value = {
            let (va, vb) = (self.value(a), self.value(b));
            assert_eq!(va.ncols(), vb.nrows(), "matmul inner dimension mismatch");
            va.dot(&*vb)
        };
        self.push(value, Op::MatMul(a, b), self.ng(a) || self.ng(b))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&self, a: Var, b: Var) -> Var {
        let value = {
            let (va, vb) = (self.value(a), self.value(b));
            assert_eq!(va.ncols(), vb.ncols(), "matmul_t inner dimension mismatch");
            va.dot(&vb.t())
        };
        self.push(value, Op::MatMulT(a, b), self.ng(a) || self.ng(b))
    }

    pub fn transpose(&self, a: Var) -> Var {
        let value = self.value(a).t().as_standard_layout().into_owned();
        self.push(value, Op::Transpose(a), self.ng(a))
    }

    // ----- normalization -----

    pub fn softmax_rows(&self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for mut row in value.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            row.mapv_inplace(|x| (x - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|x| x / sum);
        }
        self.push(value, Op::SoftmaxRows(a), self.ng(a))
    }

    /// Row-wise standardization without affine parameters.
    pub fn layer_norm_rows(&self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for mut row in value.rows_mut() {
            let n = row.len() as f64;
            let mean = row.sum() / n;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            row.mapv_inplace(|x| (x - mean) * inv);
        }
        self.push(value, Op::LayerNormRows(a), self.ng(a))
    }

    /// Divides each row by the sum of its absolute values.
    pub fn row_norm_abs(&self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for mut row in value.rows_mut() {
            let s: f64 = row.iter().map(|x| x.abs()).sum();
            let s = s.max(NORM_EPS);
            row.mapv_inplace(|x| x / s);
        }
        self.push(value, Op::RowNormAbs(a), self.ng(a))
    }

    // ----- structure -----

    pub fn concat_cols(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let value = {
            let views: Vec<Ref<'_, Mat>> = parts.iter().map(|&p| self.value(p)).collect();
            let rows = views[0].nrows();
            assert!(views.iter().all(|v| v.nrows() == rows), "concat_cols row mismatch");
            let v: Vec<_> = views.iter().map(|m| m.view()).collect();
            ndarray::concatenate(Axis(1), &v).expect("concat_cols")
        };
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(value, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let value = {
            let views: Vec<Ref<'_, Mat>> = parts.iter().map(|&p| self.value(p)).collect();
            let cols = views[0].ncols();
            assert!(views.iter().all(|v| v.ncols() == cols), "concat_rows col mismatch");
            let v: Vec<_> = views.iter().map(|m| m.view()).collect();
            ndarray::concatenate(Axis(0), &v).expect("concat_rows")
        };
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(value, Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn slice_cols(&self, a: Var, start: usize, end: usize) -> Var {
        let value = self.value(a).slice(s![.., start..end]).to_owned();
        self.push(value, Op::SliceCols(a, start), self.ng(a))
    }

    pub fn slice_rows(&self, a: Var, start: usize, end: usize) -> Var {
        let value = self.value(a).slice(s![start..end, ..]).to_owned();
        self.push(value, Op::SliceRows(a, start), self.ng(a))
    }

    pub fn gather_rows(&self, a: Var, idx: &[usize]) -> Var {
        let value = self.value(a).select(Axis(0), idx);
        self.push(value, Op::GatherRows(a, idx.to_vec()), self.ng(a))
    }

    /// Repeats a 1×c row `rows` times.
    pub fn broadcast_row(&self, a: Var, rows: usize) -> Var {
        let value = {
            let va = self.value(a);
            assert_eq!(va.nrows(), 1, "broadcast_row expects a single row");
            va.broadcast((rows, va.ncols())).expect("broadcast").to_owned()
        };
        self.push(value, Op::BroadcastRow(a), self.ng(a))
    }

    /// Column-wise maximum over consecutive groups of `group` rows.
    pub fn group_max(&self, a: Var, group: usize) -> Var {
        let (value, arg) = {
            let va = self.value(a);
            let (rows, cols) = va.dim();
            assert!(group > 0 && rows % group == 0, "group_max: rows not divisible");
            let groups = rows / group;
            let mut value = Mat::zeros((groups, cols));
            let mut arg = vec![0usize; groups * cols];
            for gi in 0..groups {
                for c in 0..cols {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_r = gi * group;
                    for r in gi * group..(gi + 1) * group {
                        let x = va[[r, c]];
                        if x > best {
                            best = x;
                            best_r = r;
                        }
                    }
                    value[[gi, c]] = best;
                    arg[gi * cols + c] = best_r;
                }
            }
            (value, arg)
        };
        self.push(value, Op::GroupMax(a, arg), self.ng(a))
    }

    pub fn max_rows(&self, a: Var) -> Var {
        let rows = self.value(a).nrows();
        self.group_max(a, rows)
    }

    pub fn mean_rows(&self, a: Var) -> Var {
        let value = self
            .value(a)
            .mean_axis(Axis(0))
            .expect("mean_rows of empty")
            .insert_axis(Axis(0));
        self.push(value, Op::MeanRows(a), self.ng(a))
    }

    pub fn sum_all(&self, a: Var) -> Var {
        let value = Mat::from_elem((1, 1), self.value(a).sum());
        self.push(value, Op::SumAll(a), self.ng(a))
    }

    pub fn mean_all(&self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Per-row sums, r×c → r×1.
    pub fn sum_cols(&self, a: Var) -> Var {
        let value = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(value, Op::SumCols(a), self.ng(a))
    }

    /// Row-major reshape.
    pub fn reshape(&self, a: Var, rows: usize, cols: usize) -> Var {
        let value = {
            let va = self.value(a);
            assert_eq!(va.len(), rows * cols, "reshape size mismatch");
            let flat: Vec<f64> = va.iter().copied().collect();
            Mat::from_shape_vec((rows, cols), flat).expect("reshape")
        };
        self.push(value, Op::Reshape(a), self.ng(a))
    }

    /// Each output row is a weighted sum of three input rows.
    pub fn interp_rows(&self, a: Var, idx: Vec<[usize; 3]>, w: Vec<[f64; 3]>) -> Var {
        assert_eq!(idx.len(), w.len());
        let value = {
            let va = self.value(a);
            let mut out = Mat::zeros((idx.len(), va.ncols()));
            for (r, (ids, ws)) in idx.iter().zip(&w).enumerate() {
                let mut row = out.row_mut(r);
                for k in 0..3 {
                    row.scaled_add(ws[k], &va.row(ids[k]));
                }
            }
            out
        };
        self.push(value, Op::InterpRows(a, idx, w), self.ng(a))
    }

    /// For `h` laid out as stacked blocks of `adj.nrows()` rows, returns `adj · h_b` per block.
    pub fn block_left_mul(&self, adj: Var, h: Var) -> Var {
        let value = {
            let (va, vh) = (self.value(adj), self.value(h));
            let k = va.nrows();
            assert_eq!(va.ncols(), k, "block_left_mul expects a square matrix");
            assert_eq!(vh.nrows() % k, 0, "block_left_mul: rows not divisible");
            let mut out = Mat::zeros(vh.dim());
            for b in 0..vh.nrows() / k {
                let blk = vh.slice(s![b * k..(b + 1) * k, ..]);
                out.slice_mut(s![b * k..(b + 1) * k, ..]).assign(&va.dot(&blk));
            }
            out
        };
        self.push(value, Op::BlockLeftMul(adj, h), self.ng(adj) || self.ng(h))
    }

    /// Horizontal tiling: r×c → r×(c·times).
    pub fn tile_cols(&self, a: Var, times: usize) -> Var {
        let value = {
            let va = self.value(a);
            let views: Vec<_> = (0..times).map(|_| va.view()).collect();
            ndarray::concatenate(Axis(1), &views).expect("tile_cols")
        };
        self.push(value, Op::TileCols(a), self.ng(a))
    }

    /// Euclidean norm of each row, r×c → r×1. The gradient at a zero row is zero.
    pub fn row_norms(&self, a: Var) -> Var {
        let value = self
            .value(a)
            .map_axis(Axis(1), |r| r.dot(&r).sqrt())
            .insert_axis(Axis(1));
        self.push(value, Op::RowNorms(a), self.ng(a))
    }

    // ----- rotations -----

    /// F×6 continuous rotation encodings → F×9 row-major rotation matrices.
    pub fn sixd_to_rot(&self, a: Var) -> Var {
        let value = {
            let va = self.value(a);
            assert_eq!(va.ncols(), 6, "sixd_to_rot expects 6 columns");
            let mut out = Mat::zeros((va.nrows(), 9));
            for (r, row) in va.rows().into_iter().enumerate() {
                let m = sixd_to_matrix(row.as_slice().expect("contiguous"));
                out.row_mut(r).assign(&ndarray::ArrayView1::from(&m[..]));
            }
            out
        };
        self.push(value, Op::SixdToRot(a), self.ng(a))
    }

    /// Rotates every packed 3-vector in row `f` of `vecs` (F×3m) by rotation row
    /// `f` of `rot` (F×9), or by its transpose when `transpose` is set.
    pub fn rotate_vecs(&self, vecs: Var, rot: Var, transpose: bool) -> Var {
        let value = {
            let (vv, vr) = (self.value(vecs), self.value(rot));
            assert_eq!(vv.nrows(), vr.nrows(), "rotate_vecs frame mismatch");
            assert_eq!(vr.ncols(), 9);
            assert_eq!(vv.ncols() % 3, 0);
            let mut out = Mat::zeros(vv.dim());
            for f in 0..vv.nrows() {
                let r = vr.row(f);
                let v = vv.row(f);
                let mut o = out.row_mut(f);
                for j in 0..vv.ncols() / 3 {
                    let x = [v[3 * j], v[3 * j + 1], v[3 * j + 2]];
                    for i in 0..3 {
                        o[3 * j + i] = if transpose {
                            r[i] * x[0] + r[3 + i] * x[1] + r[6 + i] * x[2]
                        } else {
                            r[3 * i] * x[0] + r[3 * i + 1] * x[1] + r[3 * i + 2] * x[2]
                        };
                    }
                }
            }
            out
        };
        let ng = self.ng(vecs) || self.ng(rot);
        self.push(value, Op::RotateVecs(vecs, rot, transpose), ng)
    }

    /// Geodesic angle between each predicted rotation row (F×9) and a fixed target.
    pub fn geodesic_to(&self, rot: Var, target: Mat) -> Var {
        let value = {
            let vr = self.value(rot);
            assert_eq!(vr.dim(), target.dim(), "geodesic_to shape mismatch");
            let mut out = Mat::zeros((vr.nrows(), 1));
            for f in 0..vr.nrows() {
                out[[f, 0]] = geodesic_angle(
                    vr.row(f).as_slice().expect("contiguous"),
                    target.row(f).as_slice().expect("contiguous"),
                );
            }
            out
        };
        self.push(value, Op::GeodesicAngle(rot, target), self.ng(rot))
    }

    // ----- composites -----

    /// `x · w + b` with `w` stored input-major (in × out).
    pub fn linear(&self, x: Var, w: Var, b: Option<Var>) -> Var {
        let y = self.matmul(x, w);
        match b {
            Some(b) => self.add_row(y, b),
            None => y,
        }
    }

    // ----- backward -----

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.0].value.dim(), (1, 1), "backward from non-scalar");
        let mut grads: Vec<Option<Mat>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Mat::from_elem((1, 1), 1.0));

        fn acc(grads: &mut [Option<Mat>], nodes: &[Node], v: Var, g: Mat) {
            if !nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.needs_grad {
                continue;
            }
            let y = &node.value;
            match &node.op {
                Op::Constant | Op::Input | Op::Param(_) => {
                    grads[i] = Some(gy);
                    continue;
                }
                Op::Add(a, b) => {
                    acc(&mut grads, &nodes, *a, gy.clone());
                    acc(&mut grads, &nodes, *b, gy);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, &nodes, *b, -&gy);
                    acc(&mut grads, &nodes, *a, gy);
                }
                Op::Mul(a, b) => {
                    let ga = &gy * &nodes[b.0].value;
                    let gb = &gy * &nodes[a.0].value;
                    acc(&mut grads, &nodes, *a, ga);
                    acc(&mut grads, &nodes, *b, gb);
                }
                Op::AddRow(a, r) => {
                    let gr = gy.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, &nodes, *r, gr);
                    acc(&mut grads, &nodes, *a, gy);
                }
                Op::MulRow(a, r) => {
                    let gr = (&gy * &nodes[a.0].value)
                        .sum_axis(Axis(0))
                        .insert_axis(Axis(0));
                    let ga = &gy * &nodes[r.0].value;
                    acc(&mut grads, &nodes, *r, gr);
                    acc(&mut grads, &nodes, *a, ga);
                }
                Op::Scale(a, k) => acc(&mut grads, &nodes, *a, gy * *k),
                Op::MatMul(a, b) => {
                    if nodes[a.0].needs_grad {
                        acc(&mut grads, &nodes, *a, gy.dot(&nodes[b.0].value.t()));
                    }
                    if nodes[b.0].needs_grad {
                        acc(&mut grads, &nodes, *b, nodes[a.0].value.t().dot(&gy));
                    }
                }
                Op::MatMulT(a, b) => {
                    if nodes[a.0].needs_grad {
                        acc(&mut grads, &nodes, *a, gy.dot(&nodes[b.0].value));
                    }
                    if nodes[b.0].needs_grad {
                        acc(&mut grads, &nodes, *b, gy.t().dot(&nodes[a.0].value));
                    }
                }
                Op::Transpose(a) => acc(&mut grads, &nodes, *a, gy.t().as_standard_layout().into_owned()),
                Op::Gelu(a) => {
                    let mut g = gy;
                    Zip::from(&mut g)
                        .and(&nodes[a.0].value)
                        .for_each(|g, &x| *g *= gelu_grad(x));
                    acc(&mut grads, &nodes, *a, g);
                }
                Op::Relu(a) => {
                    let mut g = gy;
                    Zip::from(&mut g).and(&nodes[a.0].value).for_each(|g, &x| {
                        if x <= 0.0 {
                            *g = 0.0
                        }
                    });
                    acc(&mut grads, &nodes, *a, g);
                }
                Op::Square(a) => {
                    let g = &gy * &nodes[a.0].value * 2.0;
                    acc(&mut grads, &nodes, *a, g);
                }
                Op::SoftmaxRows(a) => {
                    let mut g = &gy * y;
                    for (mut grow, yrow) in g.rows_mut().into_iter().zip(y.rows()) {
                        let s = grow.sum();
                        Zip::from(&mut grow).and(&yrow).for_each(|gv, &yv| *gv -= yv * s);
                    }
                    acc(&mut grads, &nodes, *a, g);
                }
                Op::LayerNormRows(a) => {
                    let x = &nodes[a.0].value;
                    let mut g = Mat::zeros(x.dim());
                    let n = x.ncols() as f64;
                    for r in 0..x.nrows() {
                        let xr = x.row(r);
                        let mean = xr.sum() / n;
                        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                        let yr = y.row(r);
                        let gr = gy.row(r);
                        let mg = gr.sum() / n;
                        let mgy = gr.dot(&yr) / n;
                        let mut out = g.row_mut(r);
                        for c in 0..x.ncols() {
                            out[c] = inv * (gr[c] - mg - yr[c] * mgy);
                        }
                    }
                    acc(&mut grads, &nodes, *a, g);
                }
                Op::RowNormAbs(a) => {
                    let x = &nodes[a.0].value;
                    let mut g = Mat::zeros(x.dim());
                    for r in 0..x.nrows() {
                        let xr = x.row(r);
                        let s = xr.iter().map(|v| v.abs()).sum::<f64>().max(NORM_EPS);
                        let gr = gy.row(r);
                        let inner = gr.dot(&xr) / (s * s);
                        let mut out = g.row_mut(r);
                        for c in 0..x.ncols() {
                            out[c] = gr[c] / s - xr[c].signum() * inner;
                        }
                    }
                    acc(&mut grads, &nodes, *a, g);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let w = nodes[p.0].value.ncols();
                        if nodes[p.0].needs_grad {
                            acc(
                                &mut grads,
                                &nodes,
                                *p,
                                gy.slice(s![.., off..off + w]).to_owned(),
                            );
                        }
                        off += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let h = nodes[p.0].value.nrows();
                        if nodes[p.0].needs_grad {
                            acc(
                                &mut grads,
                                &nodes,
                                *p,
                                gy.slice(s![off..off + h, ..]).to_owned(),
                            );
                        }
                        off += h;
                    }
                }
                Op::SliceCols(a, start) => {
                    let mut g = Mat::zeros(nodes[a.0].value.dim());
                    g.slice_mut(s![.., *start..*start + gy.ncols()]).assign(&gy);
                    acc(&mut grads, &nodes, *a, g);
                }
                Op::SliceRows(a, start) => {
                    let mut g = Mat::zeros(nodes[a.0].value.dim());
                    g.slice_mut(s![*start..*start + gy.nrows(), ..]).assign(&gy);
                    acc(&mut grads, &nodes, *a, g);
                }
                Op::GatherRows(a, idx) => {
                    let mut g = Mat::zeros(nodes[a.0].value.dim());
                    for (r, &src) in idx.iter().enumerate() {
                        let mut row = g.row_mut(src);
                        row += &gy.row(r);
                    }
                    acc(&mut grads, &nodes, *a, g);
                }
                Op::BroadcastRow(a) => {
                    let g = gy.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, &nodes, *a, g);
                }
                Op::GroupMax(a, arg) => {
                    let mut g = Mat::zeros(nodes[a.0].value.dim());
                    let cols = gy.ncols();
                    for gi in 0..gy.nrows() {
                        for c in 0..cols {
                            g[[arg[gi * cols + c], c]] += gy[[gi, c]];
                        }
                    }
                    acc(&mut grads, &nodes, *a, g);
                }
                Op::MeanRows(a) => {
                    let rows = nodes[a.0].value.nrows();
                    let g = gy
                        .broadcast((rows, gy.ncols()))
                        .expect("broadcast")
                        .to_owned()
                        / rows as f64;
                    acc(&mut grads, &nodes, *a, g);
                }
                Op::SumAll(a) => {
                    let g = Mat::from_elem(nodes[a.0].value.dim(), gy[[0, 0]]);
                    acc(&mut grads, &nodes, *a, g);
                }
                Op::SumCols(a) => {
                    let dim = nodes[a.0].value.dim();
                    let g = gy.broadcast(dim).expect("broadcast").to_owned();
                    acc(&mut grads, &nodes, *a, g);
                }
                Op::Reshape(a) => {
                    let dim = nodes[a.0].value.dim();
                    let flat: Vec<f64> = gy.iter().copied().collect();
                    acc(
                        &mut grads,
                        &nodes,
                        *a,
                        Mat::from_shape_vec(dim, flat).expect("reshape"),
                    );
                }
                Op::InterpRows(a, idx, w) => {
                    let mut g = Mat::zeros(nodes[a.0].value.dim());
                    for (r, (ids, ws)) in idx.iter().zip(w).enumerate() {
                        for k in 0..3 {
                            let mut row = g.row_mut(ids[k]);
                            row.scaled_add(ws[k], &gy.row(r));
                        }
                    }
                    acc(&mut grads, &nodes, *a, g);
                }
                Op::BlockLeftMul(adj, h) => {
                    let va = &nodes[adj.0].value;
                    let vh = &nodes[h.0].value;
                    let k = va.nrows();
                    let blocks = vh.nrows() / k;
                    if nodes[h.0].needs_grad {
                        let mut gh = Mat::zeros(vh.dim());
                        for b in 0..blocks {
                            let gb = gy.slice(s![b * k..(b + 1) * k, ..]);
                            gh.slice_mut(s![b * k..(b + 1) * k, ..])
                                .assign(&va.t().dot(&gb));
                        }
                        acc(&mut grads, &nodes, *h, gh);
                    }
                    if nodes[adj.0].needs_grad {
                        let mut ga = Mat::zeros(va.dim());
                        for b in 0..blocks {
                            let gb = gy.slice(s![b * k..(b + 1) * k, ..]);
                            let hb = vh.slice(s![b * k..(b + 1) * k, ..]);
                            ga += &gb.dot(&hb.t());
                        }
                        acc(&mut grads, &nodes, *adj, ga);
                    }
                }
                Op::TileCols(a) => {
                    let c = nodes[a.0].value.ncols();
                    let times = gy.ncols() / c;
                    let mut g = Mat::zeros(nodes[a.0].value.dim());
                    for t in 0..times {
                        g += &gy.slice(s![.., t * c..(t + 1) * c]);
                    }
                    acc(&mut grads, &nodes, *a, g);
                }
                Op::RowNorms(a) => {
                    let x = &nodes[a.0].value;
                    let mut g = Mat::zeros(x.dim());
                    for r in 0..x.nrows() {
                        let n = y[[r, 0]];
                        if n > 0.0 {
                            let k = gy[[r, 0]] / n;
                            g.row_mut(r).assign(&(&x.row(r) * k));
                        }
                    }
                    acc(&mut grads, &nodes, *a, g);
                }
                Op::SixdToRot(a) => {
                    let x = &nodes[a.0].value;
                    let mut g = Mat::zeros(x.dim());
                    for r in 0..x.nrows() {
                        let p = sixd_parts(x.row(r).as_slice().expect("contiguous"));
                        let gr = gy.row(r);
                        let mut gb1 = [gr[0], gr[3], gr[6]];
                        let mut gb2 = [gr[1], gr[4], gr[7]];
                        let gb3 = [gr[2], gr[5], gr[8]];
                        let c1 = cross(p.b2, gb3);
                        let c2 = cross(gb3, p.b1);
                        for k in 0..3 {
                            gb1[k] += c1[k];
                            gb2[k] += c2[k];
                        }
                        let mut ga1 = [0.0; 3];
                        let mut ga2 = [0.0; 3];
                        if !p.degenerate2 {
                            let d = dot(p.b2, gb2);
                            let gu = [
                                (gb2[0] - p.b2[0] * d) / p.n2,
                                (gb2[1] - p.b2[1] * d) / p.n2,
                                (gb2[2] - p.b2[2] * d) / p.n2,
                            ];
                            let b1gu = dot(p.b1, gu);
                            let b1a2 = dot(p.b1, p.a2);
                            for k in 0..3 {
                                ga2[k] = gu[k] - p.b1[k] * b1gu;
                                gb1[k] -= b1a2 * gu[k] + p.a2[k] * b1gu;
                            }
                        }
                        if !p.degenerate1 {
                            let d = dot(p.b1, gb1);
                            for k in 0..3 {
                                ga1[k] = (gb1[k] - p.b1[k] * d) / p.n1;
                            }
                        }
                        let mut out = g.row_mut(r);
                        for k in 0..3 {
                            out[k] = ga1[k];
                            out[3 + k] = ga2[k];
                        }
                    }
                    acc(&mut grads, &nodes, *a, g);
                }
                Op::RotateVecs(vecs, rot, transpose) => {
                    let vv = &nodes[vecs.0].value;
                    let vr = &nodes[rot.0].value;
                    let mut gv = Mat::zeros(vv.dim());
                    let mut gr = Mat::zeros(vr.dim());
                    for f in 0..vv.nrows() {
                        let r = vr.row(f);
                        for j in 0..vv.ncols() / 3 {
                            let x = [vv[[f, 3 * j]], vv[[f, 3 * j + 1]], vv[[f, 3 * j + 2]]];
                            let go = [gy[[f, 3 * j]], gy[[f, 3 * j + 1]], gy[[f, 3 * j + 2]]];
                            for i in 0..3 {
                                for c in 0..3 {
                                    if *transpose {
                                        // out[c] = sum_i R[i][c] x[i]
                                        gv[[f, 3 * j + i]] += r[3 * i + c] * go[c];
                                        gr[[f, 3 * i + c]] += go[c] * x[i];
                                    } else {
                                        // out[i] = sum_c R[i][c] x[c]
                                        gv[[f, 3 * j + c]] += r[3 * i + c] * go[i];
                                        gr[[f, 3 * i + c]] += go[i] * x[c];
                                    }
                                }
                            }
                        }
                    }
                    acc(&mut grads, &nodes, *vecs, gv);
                    acc(&mut grads, &nodes, *rot, gr);
                }
                Op::GeodesicAngle(rot, target) => {
                    let vr = &nodes[rot.0].value;
                    let mut g = Mat::zeros(vr.dim());
                    for f in 0..vr.nrows() {
                        let rr = vr.row(f);
                        let tr = target.row(f);
                        let rs = rr.as_slice().expect("contiguous");
                        let ts = tr.as_slice().expect("contiguous");
                        let (_, c, v) = geodesic_parts(rs, ts);
                        let sn = norm(v);
                        let denom = sn * sn + c * c;
                        let dc = -sn / denom;
                        let ds = c / denom;
                        let gf = gy[[f, 0]];
                        // dθ/dM
                        let mut dm = [[0.0; 3]; 3];
                        for (k, row) in dm.iter_mut().enumerate() {
                            row[k] += gf * dc * 0.5;
                        }
                        if sn > 0.0 {
                            let dv = [
                                gf * ds * v[0] / sn,
                                gf * ds * v[1] / sn,
                                gf * ds * v[2] / sn,
                            ];
                            dm[2][1] += dv[0] / 2.0;
                            dm[1][2] -= dv[0] / 2.0;
                            dm[0][2] += dv[1] / 2.0;
                            dm[2][0] -= dv[1] / 2.0;
                            dm[1][0] += dv[2] / 2.0;
                            dm[0][1] -= dv[2] / 2.0;
                        }
                        // dR = T · dMᵀ
                        for k in 0..3 {
                            for i in 0..3 {
                                g[[f, 3 * k + i]] = (0..3).map(|j| ts[3 * k + j] * dm[i][j]).sum();
                            }
                        }
                    }
                    acc(&mut grads, &nodes, *rot, g);
                }
            }
        }

        let mut params = HashMap::new();
        for (i, node) in nodes.iter().enumerate() {
            if let Op::Param(id) = node.op {
                let g = grads[i]
                    .take()
                    .unwrap_or_else(|| Mat::zeros(node.value.dim()));
                params.insert(id, g);
            }
        }
        Gradients {
            nodes: grads,
            params,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    /// Checks d(sum(w ∘ f(x)))/dx by central differences for every input entry.
    fn check<F>(inputs: Vec<Mat>, f: F)
    where
        F: Fn(&Graph, &[Var]) -> Var,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|m| g.input(m.clone())).collect();
        let out = f(&g, &vars);
        let weights = rand_mat(&mut rng, g.shape(out).0, g.shape(out).1);
        let wv = g.constant(weights.clone());
        let loss = g.sum_all(g.mul(out, wv));
        let grads = g.backward(loss);

        let eval = |ins: &[Mat]| -> f64 {
            let g = Graph::new();
            let vars: Vec<Var> = ins.iter().map(|m| g.input(m.clone())).collect();
            let out = f(&g, &vars);
            let total = (&*g.value(out) * &weights).sum();
            total
        };
        let h = 1e-6;
        for (k, m) in inputs.iter().enumerate() {
            let analytic = grads
                .wrt(vars[k])
                .cloned()
                .unwrap_or_else(|| Mat::zeros(m.dim()));
            for idx in 0..m.len() {
                let mut plus = inputs.clone();
                let mut minus = inputs.clone();
                plus[k].as_slice_mut().unwrap()[idx] += h;
                minus[k].as_slice_mut().unwrap()[idx] -= h;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic.as_slice().unwrap()[idx];
                let err = (a - numeric).abs() / (1.0f64).max(a.abs().max(numeric.abs()));
                assert!(err < 1e-5, "input {k} entry {idx}: analytic {a} numeric {numeric}");
            }
        }
    }

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    #[test]
    fn elementwise_ops() {
        let mut r = rng();
        let (a, b) = (rand_mat(&mut r, 3, 4), rand_mat(&mut r, 3, 4));
        check(vec![a.clone(), b.clone()], |g, v| g.add(v[0], v[1]));
        check(vec![a.clone(), b.clone()], |g, v| g.sub(v[0], v[1]));
        check(vec![a.clone(), b.clone()], |g, v| g.mul(v[0], v[1]));
        check(vec![a.clone()], |g, v| g.gelu(v[0]));
        check(vec![a.clone()], |g, v| g.square(v[0]));
        check(vec![a], |g, v| g.scale(v[0], -2.5));
    }

    #[test]
    fn row_broadcast_ops() {
        let mut r = rng();
        let (a, row) = (rand_mat(&mut r, 4, 3), rand_mat(&mut r, 1, 3));
        check(vec![a.clone(), row.clone()], |g, v| g.add_row(v[0], v[1]));
        check(vec![a, row.clone()], |g, v| g.mul_row(v[0], v[1]));
        check(vec![row], |g, v| g.broadcast_row(v[0], 5));
    }

    #[test]
    fn matmul_family() {
        let mut r = rng();
        let (a, b, c) = (
            rand_mat(&mut r, 3, 4),
            rand_mat(&mut r, 4, 2),
            rand_mat(&mut r, 5, 4),
        );
        check(vec![a.clone(), b], |g, v| g.matmul(v[0], v[1]));
        check(vec![a.clone(), c], |g, v| g.matmul_t(v[0], v[1]));
        check(vec![a], |g, v| g.transpose(v[0]));
    }

    #[test]
    fn normalizations() {
        let mut r = rng();
        let a = rand_mat(&mut r, 3, 5);
        check(vec![a.clone()], |g, v| g.softmax_rows(v[0]));
        check(vec![a.clone()], |g, v| g.layer_norm_rows(v[0]));
        check(vec![a.mapv(|x| x + 2.0)], |g, v| g.row_norm_abs(v[0]));
        check(vec![a], |g, v| g.row_norms(v[0]));
    }

    #[test]
    fn structural_ops() {
        let mut r = rng();
        let (a, b) = (rand_mat(&mut r, 4, 3), rand_mat(&mut r, 4, 2));
        check(vec![a.clone(), b], |g, v| g.concat_cols(&[v[0], v[1], v[0]]));
        check(vec![a.clone()], |g, v| {
            let x = g.slice_rows(v[0], 1, 3);
            g.concat_rows(&[x, v[0]])
        });
        check(vec![a.clone()], |g, v| g.slice_cols(v[0], 1, 3));
        check(vec![a.clone()], |g, v| g.gather_rows(v[0], &[3, 0, 3, 1]));
        check(vec![a.clone()], |g, v| g.group_max(v[0], 2));
        check(vec![a.clone()], |g, v| g.mean_rows(v[0]));
        check(vec![a.clone()], |g, v| g.sum_cols(v[0]));
        check(vec![a.clone()], |g, v| g.reshape(v[0], 2, 6));
        check(vec![a.clone()], |g, v| g.tile_cols(v[0], 3));
        check(vec![a], |g, v| {
            g.interp_rows(
                v[0],
                vec![[0, 1, 2], [3, 3, 1]],
                vec![[0.2, 0.3, 0.5], [0.6, 0.1, 0.3]],
            )
        });
    }

    #[test]
    fn block_left_mul_grad() {
        let mut r = rng();
        let (adj, h) = (rand_mat(&mut r, 3, 3), rand_mat(&mut r, 6, 2));
        check(vec![adj, h], |g, v| g.block_left_mul(v[0], v[1]));
    }

    #[test]
    fn rotation_ops() {
        let mut r = rng();
        let six = rand_mat(&mut r, 4, 6);
        check(vec![six.clone()], |g, v| g.sixd_to_rot(v[0]));
        let vecs = rand_mat(&mut r, 4, 6);
        check(vec![vecs.clone(), six.clone()], |g, v| {
            let rot = g.sixd_to_rot(v[1]);
            g.rotate_vecs(v[0], rot, false)
        });
        check(vec![vecs, six.clone()], |g, v| {
            let rot = g.sixd_to_rot(v[1]);
            g.rotate_vecs(v[0], rot, true)
        });
        let target_six = rand_mat(&mut r, 4, 6);
        let mut target = Mat::zeros((4, 9));
        for f in 0..4 {
            let m = sixd_to_matrix(target_six.row(f).as_slice().unwrap());
            target.row_mut(f).assign(&ndarray::ArrayView1::from(&m[..]));
        }
        check(vec![six], move |g, v| {
            let rot = g.sixd_to_rot(v[0]);
            g.geodesic_to(rot, target.clone())
        });
    }

    #[test]
    fn sixd_decode_is_orthonormal() {
        let m = sixd_to_matrix(&[2.0, 0.0, 0.0, 0.0, 3.0, 0.0]);
        let id = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        for (a, b) in m.iter().zip(id) {
            assert!((a - b).abs() < 1e-15);
        }
        // zero input falls back to identity
        let z = sixd_to_matrix(&[0.0; 6]);
        for (a, b) in z.iter().zip(id) {
            assert!((a - b).abs() < 1e-15);
        }
        // parallel halves still give a proper rotation
        let p = sixd_to_matrix(&[0.0, 0.0, 1.0, 0.0, 0.0, 2.0]);
        let det = p[0] * (p[4] * p[8] - p[5] * p[7]) - p[1] * (p[3] * p[8] - p[5] * p[6])
            + p[2] * (p[3] * p[7] - p[4] * p[6]);
        assert!((det - 1.0).abs() < 1e-12);
    }

    #[test]
    fn params_are_shared_within_a_graph() {
        let mut store = ParamStore::new();
        let id = store.insert("w", Mat::eye(2));
        let g = Graph::new();
        let a = g.param(&store, id);
        let b = g.param(&store, id);
        assert_eq!(a, b);
        let x = g.constant(Mat::from_elem((1, 2), 1.0));
        let y = g.add(g.matmul(x, a), g.matmul(x, b));
        let grads = g.backward(g.sum_all(y));
        assert_eq!(grads.param(id).unwrap(), &Mat::from_elem((2, 2), 2.0));
    }
}
