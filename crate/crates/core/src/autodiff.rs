//! Tensor-level reverse-mode differentiation.
//!
//! A [`Tape`] records every forward operation as a node holding its value
//! (a row-major `rows x cols` buffer). [`Tape::backward`] walks the nodes in
//! reverse order and accumulates adjoints into every node that transitively
//! depends on a leaf created with `requires_grad = true`.
//!
//! Besides the generic dense ops (matmul, activations, concatenation) the tape
//! knows the handful of domain kernels that the rendering pipeline needs:
//! trilinear scaffold lookups, 3D convolution, ray compositing, silhouette
//! accumulation, camera ray generation and the scalar losses.

use std::rc::Rc;

use crate::error::{shape_err, Result};
use crate::math::{so3_exp, so3_exp_derivatives, Aabb, Camera, Mat3, Vec3};
use crate::render::{composite_ray, silhouette_ray};
use crate::voxel::{self, TrilinearStencil};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Per-ray sample ranges and quadrature widths shared by compositing ops.
#[derive(Clone, Debug, Default)]
pub struct RayLayout {
    /// `offsets[r]..offsets[r + 1]` are the samples of ray `r`.
    pub offsets: Vec<usize>,
    pub deltas: Vec<f64>,
}

impl RayLayout {
    pub fn n_rays(&self) -> usize {
        self.offsets.len().saturating_sub(1)
    }

    pub fn n_samples(&self) -> usize {
        self.offsets.last().copied().unwrap_or(0)
    }

    pub fn range(&self, ray: usize) -> std::ops::Range<usize> {
        self.offsets[ray]..self.offsets[ray + 1]
    }
}

/// Fixed per-sample camera-space directions and ray depths; the pose that maps
/// them into the world is the differentiable input.
#[derive(Clone, Debug)]
pub struct CameraSamples {
    pub base: Camera,
    pub dirs_cam: Vec<Vec3>,
    pub depths: Vec<f64>,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Reshape(Var),
    Relu(Var),
    Sigmoid(Var),
    Softplus(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    PosEnc(Var, usize),
    Trilinear {
        grid: Var,
        points: Var,
        stencils: Vec<Option<TrilinearStencil>>,
    },
    MirrorX(Var, [usize; 3]),
    Upsample2(Var, [usize; 3]),
    Conv3d {
        x: Var,
        w: Var,
        b: Var,
        dims: [usize; 3],
        k: usize,
    },
    Composite {
        sigma: Var,
        color: Var,
        layout: Rc<RayLayout>,
        background: [f64; 3],
    },
    Silhouette {
        alpha: Var,
        layout: Rc<RayLayout>,
    },
    SqErrMean(Var, Rc<Vec<f64>>),
    MeanSqDiff(Var, Var),
    WeightedBce {
        pred: Var,
        target: Rc<Vec<f64>>,
        gamma: f64,
        eps: f64,
    },
    LinComb(Vec<(Var, f64)>),
    CameraRays {
        pose: Var,
        samples: Rc<CameraSamples>,
    },
}

struct Node {
    value: Vec<f64>,
    rows: usize,
    cols: usize,
    requires_grad: bool,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`].
pub struct TapeGrads {
    grads: Vec<Option<Vec<f64>>>,
}

impl TapeGrads {
    /// Gradient for `v`; `None` when `v` does not influence the root.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v).map_or_else(|| vec![0.0; len], <[f64]>::to_vec)
    }
}

/// `c = a * b (+ beta * c)` for strided row-major views.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n);
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
    assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    // SAFETY: bounds of every strided access are asserted above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.max(0.0) + (-x.abs()).exp().ln_1p()
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

    fn push(&mut self, value: Vec<f64>, rows: usize, cols: usize, requires_grad: bool, op: Op) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node {
            value,
            rows,
            cols,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Vec<f64>, rows: usize, cols: usize, requires_grad: bool) -> Var {
        assert_eq!(value.len(), rows * cols, "leaf value length");
        self.push(value, rows, cols, requires_grad, Op::Leaf)
    }

    pub fn param(&mut self, value: Vec<f64>, rows: usize, cols: usize) -> Var {
        self.leaf(value, rows, cols, true)
    }

    pub fn constant(&mut self, value: Vec<f64>, rows: usize, cols: usize) -> Var {
        self.leaf(value, rows, cols, false)
    }

    pub fn scalar_const(&mut self, v: f64) -> Var {
        self.constant(vec![v], 1, 1)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = self.node(v);
        (n.rows, n.cols)
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.node(v).value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (n, k) = self.shape(a);
        let (k2, m) = self.shape(b);
        assert_eq!(k, k2, "matmul inner dims");
        let mut out = vec![0.0; n * m];
        gemm(n, k, m, self.value(a), (k, 1), self.value(b), (m, 1), 0.0, &mut out);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, n, m, rg, Op::MatMul(a, b))
    }

    /// Adds a `1 x m` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (n, m) = self.shape(a);
        assert_eq!(self.shape(row), (1, m), "add_row shape");
        let r = self.value(row).to_vec();
        let mut out = self.value(a).to_vec();
        for chunk in out.chunks_exact_mut(m) {
            chunk.iter_mut().zip(&r).for_each(|(o, b)| *o += b);
        }
        let rg = self.rg(a) || self.rg(row);
        self.push(out, n, m, rg, Op::AddRow(a, row))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape");
        let (n, m) = self.shape(a);
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let rg = self.rg(a) || self.rg(b);
        self.push(out, n, m, rg, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shape");
        let (n, m) = self.shape(a);
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let rg = self.rg(a) || self.rg(b);
        self.push(out, n, m, rg, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let (n, m) = self.shape(a);
        let out = self.value(a).iter().map(|x| x * s).collect();
        let rg = self.rg(a);
        self.push(out, n, m, rg, Op::Scale(a, s))
    }

    /// Reinterprets the row-major buffer of `a` as `rows x cols`.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        assert_eq!(self.value(a).len(), rows * cols, "reshape size");
        let out = self.value(a).to_vec();
        let rg = self.rg(a);
        self.push(out, rows, cols, rg, Op::Reshape(a))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let (n, m) = self.shape(a);
        let out = self.value(a).iter().map(|x| f(*x)).collect();
        let rg = self.rg(a);
        self.push(out, n, m, rg, op)
    }

    /// Fingerprint of every piecewise branch taken by the recorded graph:
    /// ReLU input signs and trilinear cells. Two evaluations with equal
    /// fingerprints lie on the same smooth piece.
    pub fn branch_signature(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |x: u64| {
            h ^= x;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        };
        for node in &self.nodes {
            match &node.op {
                Op::Relu(a) => self.value(*a).iter().for_each(|v| feed((*v > 0.0) as u64)),
                Op::Trilinear { stencils, .. } => {
                    for s in stencils {
                        match s {
                            None => feed(u64::MAX),
                            Some(s) => s.index.iter().for_each(|i| feed(i.map_or(u64::MAX - 1, |i| i as u64))),
                        }
                    }
                }
                _ => {}
            }
        }
        h
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let n = self.shape(parts[0]).0;
        assert!(parts.iter().all(|p| self.shape(*p).0 == n), "concat rows");
        let widths: Vec<usize> = parts.iter().map(|p| self.shape(*p).1).collect();
        let m: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * m);
        for r in 0..n {
            for (p, w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(*p)[r * w..(r + 1) * w]);
            }
        }
        let rg = parts.iter().any(|p| self.rg(*p));
        self.push(out, n, m, rg, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Var {
        let (n, m) = self.shape(a);
        assert!(start + width <= m, "slice_cols range");
        let src = self.value(a);
        let mut out = Vec::with_capacity(n * width);
        for r in 0..n {
            out.extend_from_slice(&src[r * m + start..r * m + start + width]);
        }
        let rg = self.rg(a);
        self.push(out, n, width, rg, Op::SliceCols(a, start))
    }

    /// Row-wise positional encoding of `n x 3` points.
    pub fn pos_enc(&mut self, points: Var, frequencies: usize) -> Var {
        let (n, c) = self.shape(points);
        assert_eq!(c, 3, "pos_enc expects n x 3");
        let width = crate::math::encoding_len(frequencies);
        let mut out = Vec::with_capacity(n * width);
        for p in self.value(points).chunks_exact(3) {
            crate::math::positional_encode_into([p[0], p[1], p[2]], frequencies, &mut out);
        }
        let rg = self.rg(points);
        self.push(out, n, width, rg, Op::PosEnc(points, frequencies))
    }

    /// Samples a `1 x N` grid at `n x 3` points; output is `n x 1`.
    pub fn trilinear(&mut self, grid: Var, dims: [usize; 3], bounds: &Aabb, points: Var) -> Var {
        assert_eq!(self.shape(grid), (1, dims.iter().product()), "trilinear grid");
        let (n, c) = self.shape(points);
        assert_eq!(c, 3, "trilinear points");
        let stencils: Vec<_> = self
            .value(points)
            .chunks_exact(3)
            .map(|p| voxel::stencil(dims, bounds, Vec3::from_slice(p)))
            .collect();
        let g = self.value(grid);
        let out = stencils
            .iter()
            .map(|s| match s {
                None => 0.0,
                Some(s) => s
                    .index
                    .iter()
                    .zip(s.weight)
                    .filter_map(|(i, w)| i.map(|i| w * g[i]))
                    .sum(),
            })
            .collect();
        let rg = self.rg(grid) || self.rg(points);
        self.push(out, n, 1, rg, Op::Trilinear { grid, points, stencils })
    }

    /// Mirrors every row of `a` (a channel of `dims` voxels) along x.
    pub fn mirror_x(&mut self, a: Var, dims: [usize; 3]) -> Var {
        let (n, m) = self.shape(a);
        assert_eq!(m, dims.iter().product::<usize>(), "mirror_x dims");
        let out = self
            .value(a)
            .chunks_exact(m)
            .flat_map(|ch| voxel::mirror_values(dims, ch))
            .collect();
        let rg = self.rg(a);
        self.push(out, n, m, rg, Op::MirrorX(a, dims))
    }

    /// Nearest-neighbour x2 upsampling of each `[nx, ny, nz]` channel.
    pub fn upsample2(&mut self, a: Var, dims: [usize; 3]) -> Var {
        let (c, m) = self.shape(a);
        assert_eq!(m, dims.iter().product::<usize>(), "upsample dims");
        let [nx, ny, nz] = dims;
        let (ox, oy, oz) = (2 * nx, 2 * ny, 2 * nz);
        let src = self.value(a);
        let mut out = vec![0.0; c * ox * oy * oz];
        for ch in 0..c {
            let s = &src[ch * m..(ch + 1) * m];
            let d = &mut out[ch * ox * oy * oz..(ch + 1) * ox * oy * oz];
            for z in 0..oz {
                for y in 0..oy {
                    let srow = &s[nx * (y / 2 + ny * (z / 2))..];
                    let drow = &mut d[ox * (y + oy * z)..ox * (y + oy * z) + ox];
                    for (x, v) in drow.iter_mut().enumerate() {
                        *v = srow[x / 2];
                    }
                }
            }
        }
        let rg = self.rg(a);
        self.push(out, c, ox * oy * oz, rg, Op::Upsample2(a, dims))
    }

    /// Same-padded 3D convolution. `x` is `cin x V`, `w` is
    /// `cout x (cin * k^3)`, `b` is `1 x cout`; output is `cout x V`.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Var, dims: [usize; 3], k: usize) -> Var {
        let (cin, vox) = self.shape(x);
        assert_eq!(vox, dims.iter().product::<usize>(), "conv3d dims");
        let (cout, wk) = self.shape(w);
        assert_eq!(wk, cin * k * k * k, "conv3d weight shape");
        assert_eq!(self.shape(b), (1, cout), "conv3d bias shape");
        let mut out = vec![0.0; cout * vox];
        for (co, chunk) in out.chunks_exact_mut(vox).enumerate() {
            chunk.fill(self.value(b)[co]);
        }
        conv_taps(dims, k, cin, cout, |ci, co, tap, range| {
            let wv = self.value(w)[co * wk + ci * k * k * k + tap];
            let src = &self.value(x)[ci * vox..];
            let ConvRange { dst, src_off, len } = range;
            let d = &mut out[co * vox + dst..co * vox + dst + len];
            for (o, s) in d.iter_mut().zip(&src[src_off..src_off + len]) {
                *o += wv * s;
            }
        });
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(out, cout, vox, rg, Op::Conv3d { x, w, b, dims, k })
    }

    /// Volume-rendering quadrature per ray. `sigma` is `n x 1`, `color` is
    /// `n x 3`; output is `rays x 3` including the background term.
    pub fn composite(&mut self, sigma: Var, color: Var, layout: Rc<RayLayout>, background: [f64; 3]) -> Var {
        let n = layout.n_samples();
        assert_eq!(self.shape(sigma), (n, 1), "composite sigma");
        assert_eq!(self.shape(color), (n, 3), "composite color");
        let s = self.value(sigma);
        let c = self.value(color);
        let mut out = Vec::with_capacity(layout.n_rays() * 3);
        for r in 0..layout.n_rays() {
            let rg = layout.range(r);
            let (rgb, _) = composite_ray(&s[rg.clone()], &c[rg.start * 3..rg.end * 3], &layout.deltas[rg], background);
            out.extend_from_slice(&rgb);
        }
        let rows = layout.n_rays();
        let rg = self.rg(sigma) || self.rg(color);
        self.push(
            out,
            rows,
            3,
            rg,
            Op::Composite {
                sigma,
                color,
                layout,
                background,
            },
        )
    }

    /// Occupancy accumulated as per-sample opacity; output is `rays x 1`.
    pub fn silhouette(&mut self, alpha: Var, layout: Rc<RayLayout>) -> Var {
        assert_eq!(self.shape(alpha), (layout.n_samples(), 1), "silhouette alpha");
        let a = self.value(alpha);
        let out: Vec<f64> = (0..layout.n_rays()).map(|r| silhouette_ray(&a[layout.range(r)])).collect();
        let rows = out.len();
        let rg = self.rg(alpha);
        self.push(out, rows, 1, rg, Op::Silhouette { alpha, layout })
    }

    /// Mean over rows of the squared Euclidean row distance to `target`.
    pub fn sq_err_mean(&mut self, a: Var, target: Rc<Vec<f64>>) -> Var {
        let (n, _) = self.shape(a);
        assert_eq!(self.value(a).len(), target.len(), "sq_err_mean length");
        let s: f64 = self.value(a).iter().zip(target.iter()).map(|(x, t)| (x - t).powi(2)).sum();
        let v = if n == 0 { 0.0 } else { s / n as f64 };
        let rg = self.rg(a);
        self.push(vec![v], 1, 1, rg, Op::SqErrMean(a, target))
    }

    /// Mean over all elements of `(a - b)^2`.
    pub fn mean_sq_diff(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mean_sq_diff shape");
        let len = self.value(a).len();
        let s: f64 = self.value(a).iter().zip(self.value(b)).map(|(x, y)| (x - y).powi(2)).sum();
        let rg = self.rg(a) || self.rg(b);
        self.push(vec![s / len as f64], 1, 1, rg, Op::MeanSqDiff(a, b))
    }

    /// Weighted binary cross entropy (positive), predictions clamped to `[eps, 1 - eps]`.
    pub fn weighted_bce(&mut self, pred: Var, target: Rc<Vec<f64>>, gamma: f64, eps: f64) -> Var {
        let p = self.value(pred);
        assert_eq!(p.len(), target.len(), "bce length");
        let mut s = 0.0;
        for (q, t) in p.iter().zip(target.iter()) {
            let q = q.clamp(eps, 1.0 - eps);
            s += gamma * t * q.ln() + (1.0 - gamma) * (1.0 - t) * (1.0 - q).ln();
        }
        let v = -s / p.len() as f64;
        let rg = self.rg(pred);
        self.push(
            vec![v],
            1,
            1,
            rg,
            Op::WeightedBce {
                pred,
                target,
                gamma,
                eps,
            },
        )
    }

    /// `sum_i c_i * v_i` over scalar nodes.
    pub fn lin_comb(&mut self, terms: &[(Var, f64)]) -> Var {
        assert!(terms.iter().all(|(v, _)| self.shape(*v) == (1, 1)), "lin_comb expects scalars");
        let v = terms.iter().map(|(v, c)| c * self.scalar(*v)).sum();
        let rg = terms.iter().any(|(v, _)| self.rg(*v));
        self.push(vec![v], 1, 1, rg, Op::LinComb(terms.to_vec()))
    }

    /// World-space sample points and ray directions (`n x 6`: `p | d`) for a
    /// camera perturbed by `pose = [w (axis-angle), dt]` applied as
    /// `R = exp(w) R0`, `t = t0 + dt`.
    pub fn camera_rays(&mut self, pose: Var, samples: Rc<CameraSamples>) -> Var {
        assert_eq!(self.shape(pose), (1, 6), "camera pose is 1 x 6");
        let pv = self.value(pose);
        let w = Vec3::from_slice(&pv[..3]);
        let dt = Vec3::from_slice(&pv[3..]);
        let r = so3_exp(w).mul_mat(&samples.base.rotation);
        let t = samples.base.translation + dt;
        let origin = -r.tmul_vec(t);
        let mut out = Vec::with_capacity(samples.depths.len() * 6);
        for (dc, depth) in samples.dirs_cam.iter().zip(&samples.depths) {
            let d = r.tmul_vec(*dc);
            let p = origin + d * *depth;
            out.extend_from_slice(&p.to_array());
            out.extend_from_slice(&d.to_array());
        }
        let n = samples.depths.len();
        let rg = self.rg(pose);
        self.push(out, n, 6, rg, Op::CameraRays { pose, samples })
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<(f64, TapeGrads)> {
        if self.shape(root) != (1, 1) {
            return shape_err(format!("backward root must be scalar, got {:?}", self.shape(root)));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }
        Ok((self.scalar(root), TapeGrads { grads }))
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.rg(v) {
                return;
            }
            let len = self.value(v).len();
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (n, k) = self.shape(*a);
                let m = node.cols;
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, &mut |ga| gemm(n, m, k, g, (m, 1), bv, (1, m), 1.0, ga));
                acc(*b, &mut |gb| gemm(k, n, m, av, (1, k), g, (m, 1), 1.0, gb));
            }
            Op::AddRow(a, row) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                let m = node.cols;
                acc(*row, &mut |gr| {
                    for chunk in g.chunks_exact(m) {
                        gr.iter_mut().zip(chunk).for_each(|(x, y)| *x += y);
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, &mut |ga| {
                    for ((x, gy), bb) in ga.iter_mut().zip(g).zip(bv) {
                        *x += gy * bb;
                    }
                });
                acc(*b, &mut |gb| {
                    for ((x, gy), aa) in gb.iter_mut().zip(g).zip(av) {
                        *x += gy * aa;
                    }
                });
            }
            Op::Scale(a, s) => acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += s * y)),
            Op::Reshape(a) => acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y)),
            Op::Relu(a) => acc(*a, &mut |ga| {
                for ((x, gy), y) in ga.iter_mut().zip(g).zip(&node.value) {
                    if *y > 0.0 {
                        *x += gy;
                    }
                }
            }),
            Op::Sigmoid(a) => acc(*a, &mut |ga| {
                for ((x, gy), y) in ga.iter_mut().zip(g).zip(&node.value) {
                    *x += gy * y * (1.0 - y);
                }
            }),
            Op::Softplus(a) => {
                let av = self.value(*a);
                acc(*a, &mut |ga| {
                    for ((x, gy), z) in ga.iter_mut().zip(g).zip(av) {
                        *x += gy * sigmoid(*z);
                    }
                })
            }
            Op::ConcatCols(parts) => {
                let m = node.cols;
                let mut start = 0;
                for p in parts {
                    let w = self.shape(*p).1;
                    acc(*p, &mut |gp| {
                        for (r, row) in gp.chunks_exact_mut(w).enumerate() {
                            row.iter_mut()
                                .zip(&g[r * m + start..r * m + start + w])
                                .for_each(|(x, y)| *x += y);
                        }
                    });
                    start += w;
                }
            }
            Op::SliceCols(a, start) => {
                let m = self.shape(*a).1;
                let w = node.cols;
                acc(*a, &mut |ga| {
                    for (r, row) in g.chunks_exact(w).enumerate() {
                        ga[r * m + start..r * m + start + w]
                            .iter_mut()
                            .zip(row)
                            .for_each(|(x, y)| *x += y);
                    }
                });
            }
            Op::PosEnc(points, freqs) => {
                let w = node.cols;
                acc(*points, &mut |gp| {
                    for (r, gr) in gp.chunks_exact_mut(3).enumerate() {
                        let out = &node.value[r * w..(r + 1) * w];
                        let go = &g[r * w..(r + 1) * w];
                        let mut scale = std::f64::consts::PI;
                        for j in 0..3 {
                            gr[j] += go[j];
                        }
                        for l in 0..*freqs {
                            let base = 3 + 6 * l;
                            for j in 0..3 {
                                let (sin, cos) = (out[base + j], out[base + 3 + j]);
                                gr[j] += scale * (go[base + j] * cos - go[base + 3 + j] * sin);
                            }
                            scale *= 2.0;
                        }
                    }
                });
            }
            Op::Trilinear { grid, points, stencils } => {
                acc(*grid, &mut |gg| {
                    for (s, gy) in stencils.iter().zip(g) {
                        if let Some(s) = s {
                            for (i, w) in s.index.iter().zip(s.weight) {
                                if let Some(i) = i {
                                    gg[*i] += gy * w;
                                }
                            }
                        }
                    }
                });
                let gv = self.value(*grid);
                acc(*points, &mut |gp| {
                    for ((s, gy), gr) in stencils.iter().zip(g).zip(gp.chunks_exact_mut(3)) {
                        if let Some(s) = s {
                            for (i, dw) in s.index.iter().zip(s.dweight) {
                                if let Some(i) = i {
                                    for j in 0..3 {
                                        gr[j] += gy * gv[*i] * dw[j];
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::MirrorX(a, dims) => {
                let m = node.cols;
                acc(*a, &mut |ga| {
                    for (ga_ch, g_ch) in ga.chunks_exact_mut(m).zip(g.chunks_exact(m)) {
                        let flipped = voxel::mirror_values(*dims, g_ch);
                        ga_ch.iter_mut().zip(flipped).for_each(|(x, y)| *x += y);
                    }
                });
            }
            Op::Upsample2(a, dims) => {
                let [nx, ny, nz] = *dims;
                let (ox, oy, oz) = (2 * nx, 2 * ny, 2 * nz);
                let m = nx * ny * nz;
                let om = ox * oy * oz;
                acc(*a, &mut |ga| {
                    for (ga_ch, g_ch) in ga.chunks_exact_mut(m).zip(g.chunks_exact(om)) {
                        for z in 0..oz {
                            for y in 0..oy {
                                let srow = nx * (y / 2 + ny * (z / 2));
                                let grow = &g_ch[ox * (y + oy * z)..ox * (y + oy * z) + ox];
                                for (x, gy) in grow.iter().enumerate() {
                                    ga_ch[srow + x / 2] += gy;
                                }
                            }
                        }
                    }
                });
            }
            Op::Conv3d { x, w, b, dims, k } => {
                let (cin, vox) = self.shape(*x);
                let cout = node.rows;
                let wk = cin * k * k * k;
                let (xv, wv) = (self.value(*x), self.value(*w));
                acc(*b, &mut |gb| {
                    for (co, chunk) in g.chunks_exact(vox).enumerate() {
                        gb[co] += chunk.iter().sum::<f64>();
                    }
                });
                acc(*w, &mut |gw| {
                    conv_taps(*dims, *k, cin, cout, |ci, co, tap, r| {
                        let go = &g[co * vox + r.dst..co * vox + r.dst + r.len];
                        let xs = &xv[ci * vox + r.src_off..ci * vox + r.src_off + r.len];
                        gw[co * wk + ci * k * k * k + tap] += go.iter().zip(xs).map(|(a, b)| a * b).sum::<f64>();
                    });
                });
                acc(*x, &mut |gx| {
                    conv_taps(*dims, *k, cin, cout, |ci, co, tap, r| {
                        let wt = wv[co * wk + ci * k * k * k + tap];
                        let go = &g[co * vox + r.dst..co * vox + r.dst + r.len];
                        let dst = &mut gx[ci * vox + r.src_off..ci * vox + r.src_off + r.len];
                        for (d, gy) in dst.iter_mut().zip(go) {
                            *d += wt * gy;
                        }
                    });
                });
            }
            Op::Composite {
                sigma,
                color,
                layout,
                background,
            } => {
                let (sv, cv) = (self.value(*sigma), self.value(*color));
                let n = sv.len();
                let mut gs = vec![0.0; n];
                let mut gc = vec![0.0; n * 3];
                let mut trans = Vec::new();
                for r in 0..layout.n_rays() {
                    let range = layout.range(r);
                    let gr = &g[r * 3..r * 3 + 3];
                    composite_ray_backward(
                        &sv[range.clone()],
                        &cv[range.start * 3..range.end * 3],
                        &layout.deltas[range.clone()],
                        *background,
                        gr,
                        &mut gs[range.clone()],
                        &mut gc[range.start * 3..range.end * 3],
                        &mut trans,
                    );
                }
                acc(*sigma, &mut |x| x.iter_mut().zip(&gs).for_each(|(a, b)| *a += b));
                acc(*color, &mut |x| x.iter_mut().zip(&gc).for_each(|(a, b)| *a += b));
            }
            Op::Silhouette { alpha, layout } => {
                let av = self.value(*alpha);
                acc(*alpha, &mut |ga| {
                    for r in 0..layout.n_rays() {
                        let range = layout.range(r);
                        let a = &av[range.clone()];
                        let out = &mut ga[range];
                        // d acc / d a_k = prod_{j != k} (1 - a_j)
                        let mut prefix = 1.0;
                        let mut suffix = vec![1.0; a.len() + 1];
                        for k in (0..a.len()).rev() {
                            suffix[k] = suffix[k + 1] * (1.0 - a[k]);
                        }
                        for k in 0..a.len() {
                            out[k] += g[r] * prefix * suffix[k + 1];
                            prefix *= 1.0 - a[k];
                        }
                    }
                });
            }
            Op::SqErrMean(a, target) => {
                let rows = self.shape(*a).0.max(1) as f64;
                let av = self.value(*a);
                acc(*a, &mut |ga| {
                    for ((x, v), t) in ga.iter_mut().zip(av).zip(target.iter()) {
                        *x += g[0] * 2.0 * (v - t) / rows;
                    }
                });
            }
            Op::MeanSqDiff(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let len = av.len() as f64;
                acc(*a, &mut |ga| {
                    for ((x, p), q) in ga.iter_mut().zip(av).zip(bv) {
                        *x += g[0] * 2.0 * (p - q) / len;
                    }
                });
                acc(*b, &mut |gb| {
                    for ((x, p), q) in gb.iter_mut().zip(av).zip(bv) {
                        *x -= g[0] * 2.0 * (p - q) / len;
                    }
                });
            }
            Op::WeightedBce {
                pred,
                target,
                gamma,
                eps,
            } => {
                let pv = self.value(*pred);
                let len = pv.len() as f64;
                acc(*pred, &mut |gp| {
                    for ((x, q), t) in gp.iter_mut().zip(pv).zip(target.iter()) {
                        if *q > *eps && *q < 1.0 - eps {
                            let d = gamma * t / q - (1.0 - gamma) * (1.0 - t) / (1.0 - q);
                            *x -= g[0] * d / len;
                        }
                    }
                });
            }
            Op::LinComb(terms) => {
                for (v, c) in terms {
                    acc(*v, &mut |gv| gv[0] += c * g[0]);
                }
            }
            Op::CameraRays { pose, samples } => {
                let pv = self.value(*pose);
                let w = Vec3::from_slice(&pv[..3]);
                let dt = Vec3::from_slice(&pv[3..]);
                let r0 = &samples.base.rotation;
                let r = so3_exp(w).mul_mat(r0);
                let t = samples.base.translation + dt;
                let dr: [Mat3; 3] = so3_exp_derivatives(w).map(|m| m.mul_mat(r0));
                let mut gw = [0.0; 3];
                let mut gt = Vec3::ZERO;
                for (i, (dc, depth)) in samples.dirs_cam.iter().zip(&samples.depths).enumerate() {
                    let gp = Vec3::from_slice(&g[i * 6..i * 6 + 3]);
                    let gd = Vec3::from_slice(&g[i * 6 + 3..i * 6 + 6]);
                    // p = -Rᵀ t + depth * Rᵀ dc ; d = Rᵀ dc
                    for (j, m) in dr.iter().enumerate() {
                        let dp = -m.tmul_vec(t) + m.tmul_vec(*dc) * *depth;
                        let dd = m.tmul_vec(*dc);
                        gw[j] += gp.dot(dp) + gd.dot(dd);
                    }
                    gt += -r.mul_vec(gp);
                }
                acc(*pose, &mut |gpose| {
                    for j in 0..3 {
                        gpose[j] += gw[j];
                        gpose[3 + j] += gt[j];
                    }
                });
            }
        }
    }
}

/// Contiguous x-run touched by one convolution tap on one (z, y) row.
struct ConvRange {
    dst: usize,
    src_off: usize,
    len: usize,
}

/// Enumerates every (input channel, output channel, tap, x-run) of a
/// same-padded convolution so forward and backward share one index walk.
fn conv_taps(dims: [usize; 3], k: usize, cin: usize, cout: usize, mut f: impl FnMut(usize, usize, usize, ConvRange)) {
    let [nx, ny, nz] = dims;
    let pad = (k / 2) as isize;
    for co in 0..cout {
        for ci in 0..cin {
            for kz in 0..k {
                for ky in 0..k {
                    for kx in 0..k {
                        let tap = kx + k * (ky + k * kz);
                        let (dx, dy, dz) = (kx as isize - pad, ky as isize - pad, kz as isize - pad);
                        let x0 = (-dx).max(0) as usize;
                        let x1 = (nx as isize - dx).min(nx as isize).max(0) as usize;
                        if x1 <= x0 {
                            continue;
                        }
                        for z in 0..nz {
                            let sz = z as isize + dz;
                            if sz < 0 || sz >= nz as isize {
                                continue;
                            }
                            for y in 0..ny {
                                let sy = y as isize + dy;
                                if sy < 0 || sy >= ny as isize {
                                    continue;
                                }
                                let dst = nx * (y + ny * z) + x0;
                                let src_off = (nx * (sy as usize + ny * sz as usize)) as isize + x0 as isize + dx;
                                f(
                                    ci,
                                    co,
                                    tap,
                                    ConvRange {
                                        dst,
                                        src_off: src_off as usize,
                                        len: x1 - x0,
                                    },
                                );
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`composite_ray`] for one ray.
#[allow(clippy::too_many_arguments)]
fn composite_ray_backward(
    sigma: &[f64],
    color: &[f64],
    deltas: &[f64],
    background: [f64; 3],
    g: &[f64],
    g_sigma: &mut [f64],
    g_color: &mut [f64],
    trans: &mut Vec<f64>,
) {
    let k = sigma.len();
    trans.clear();
    trans.push(1.0);
    for i in 0..k {
        let t = trans[i] * (-sigma[i] * deltas[i]).exp();
        trans.push(t);
    }
    let t_end = trans[k];
    // suffix = sum_{j>i} w_j c_j + T_end * background
    let mut suffix = [t_end * background[0], t_end * background[1], t_end * background[2]];
    for i in (0..k).rev() {
        let w = trans[i] - trans[i + 1];
        let c = &color[i * 3..i * 3 + 3];
        let gc: f64 = (0..3).map(|j| g[j] * c[j]).sum();
        let gs: f64 = (0..3).map(|j| g[j] * suffix[j]).sum();
        g_sigma[i] += deltas[i] * (trans[i + 1] * gc - gs);
        for j in 0..3 {
            g_color[i * 3 + j] += w * g[j];
            suffix[j] += w * c[j];
        }
    }
}
