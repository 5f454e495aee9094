//! Define-by-run operation tape with reverse-mode differentiation.

use std::f32::consts::PI;
use std::rc::Rc;

use super::bn::BnState;
use super::kernels;
use super::params::{ParamId, ParamStore};
use super::tensor::{numel, strides, Tensor};
use super::ComputeError;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

/// Backward rule: (grad_out, own value, parent values) -> gradient per parent.
///
/// Entries for parents that do not require gradients may be dummies; the
/// engine never accumulates them.
pub type BackwardFn = Rc<dyn Fn(&Tensor, &Tensor, &[&Tensor]) -> Vec<Tensor>>;

struct Node {
    value: Tensor,
    parents: Vec<TensorId>,
    backward: Option<BackwardFn>,
    param: Option<ParamId>,
    needs_grad: bool,
    /// f64 value of scalar reductions, kept so finite-difference tests can
    /// difference losses without the f32 rounding of the stored value.
    precise: Option<f64>,
}

/// Gradients produced by one backward pass, indexed by tape node.
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, id: TensorId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}

/// Operation registered from a forward rule and a substitute backward rule.
///
/// The forward is used exactly as given; the backward replaces whatever the
/// true derivative would be, which is how the surrogate spike gradient and
/// the rotary rotation plug into the tape.
pub struct CustomOp {
    forward: Box<dyn Fn(&[&Tensor]) -> Result<Tensor, ComputeError>>,
    backward: BackwardFn,
}

impl CustomOp {
    pub fn new(
        forward: impl Fn(&[&Tensor]) -> Result<Tensor, ComputeError> + 'static,
        backward: impl Fn(&Tensor, &Tensor, &[&Tensor]) -> Vec<Tensor> + 'static,
    ) -> Self {
        Self {
            forward: Box::new(forward),
            backward: Rc::new(backward),
        }
    }

    pub fn apply(&self, tape: &mut Tape, inputs: &[TensorId]) -> Result<TensorId, ComputeError> {
        let values: Vec<&Tensor> = inputs.iter().map(|&i| tape.value(i)).collect();
        let out = (self.forward)(&values)?;
        Ok(tape.push(out, inputs.to_vec(), Some(self.backward.clone()), None))
    }
}

/// Define-by-run graph for one forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn push(
        &mut self,
        value: Tensor,
        parents: Vec<TensorId>,
        backward: Option<BackwardFn>,
        param: Option<ParamId>,
    ) -> TensorId {
        let needs_grad =
            param.is_some() || parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value,
            parents,
            backward: if needs_grad { backward } else { None },
            param,
            needs_grad,
            precise: None,
        });
        TensorId(self.nodes.len() - 1)
    }

    /// Scalar value at f64 precision when the node is a tracked reduction,
    /// otherwise the widened f32 value.
    pub fn precise_value(&self, id: TensorId) -> f64 {
        let node = &self.nodes[id.0];
        node.precise.unwrap_or(node.value.item() as f64)
    }

    fn precise_of(&self, id: TensorId) -> Option<f64> {
        let node = &self.nodes[id.0];
        if node.value.len() == 1 {
            Some(node.precise.unwrap_or(node.value.item() as f64))
        } else {
            None
        }
    }

    fn set_precise(&mut self, id: TensorId, value: f64) {
        self.nodes[id.0].precise = Some(value);
    }

    /// Leaf that never receives a gradient (data, frozen targets).
    pub fn constant(&mut self, value: Tensor) -> TensorId {
        self.push(value, vec![], None, None)
    }

    /// Leaf that participates in differentiation (test probes).
    pub fn leaf(&mut self, value: Tensor) -> TensorId {
        let id = self.push(value, vec![], None, None);
        self.nodes[id.0].needs_grad = true;
        id
    }

    /// Lease a stored parameter onto the tape.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> TensorId {
        self.push(store.value(id).clone(), vec![], None, Some(id))
    }

    pub fn needs_grad(&self, id: TensorId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn parent_needs(&self, id: TensorId) -> bool {
        self.nodes[id.0].needs_grad
    }

    // ── Elementwise and scalar ops ──────────────────────────────────

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, ComputeError> {
        let v = self.value(a).zip(self.value(b), |x, y| x + y).map_err(|_| {
            ComputeError::ShapeMismatch {
                op: "add",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            }
        })?;
        let bw: BackwardFn = Rc::new(|g: &Tensor, _out: &Tensor, _ps: &[&Tensor]| {
            vec![g.clone(), g.clone()]
        });
        let id = self.push(v, vec![a, b], Some(bw), None);
        if let (Some(pa), Some(pb)) = (self.precise_of(a), self.precise_of(b)) {
            self.set_precise(id, pa + pb);
        }
        Ok(id)
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, ComputeError> {
        let v = self.value(a).zip(self.value(b), |x, y| x - y).map_err(|_| {
            ComputeError::ShapeMismatch {
                op: "sub",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            }
        })?;
        let bw: BackwardFn = Rc::new(|g: &Tensor, _o: &Tensor, _ps: &[&Tensor]| {
            vec![g.clone(), g.map(|v| -v)]
        });
        let id = self.push(v, vec![a, b], Some(bw), None);
        if let (Some(pa), Some(pb)) = (self.precise_of(a), self.precise_of(b)) {
            self.set_precise(id, pa - pb);
        }
        Ok(id)
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, ComputeError> {
        let v = self.value(a).zip(self.value(b), |x, y| x * y).map_err(|_| {
            ComputeError::ShapeMismatch {
                op: "mul",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            }
        })?;
        let bw: BackwardFn = Rc::new(|g: &Tensor, _o: &Tensor, ps: &[&Tensor]| {
            vec![
                g.zip(ps[1], |gv, bv| gv * bv).expect("shape fixed"),
                g.zip(ps[0], |gv, av| gv * av).expect("shape fixed"),
            ]
        });
        let id = self.push(v, vec![a, b], Some(bw), None);
        if let (Some(pa), Some(pb)) = (self.precise_of(a), self.precise_of(b)) {
            self.set_precise(id, pa * pb);
        }
        Ok(id)
    }

    pub fn scale(&mut self, a: TensorId, c: f32) -> TensorId {
        let v = self.value(a).map(|x| x * c);
        let bw: BackwardFn =
            Rc::new(move |g: &Tensor, _o: &Tensor, _ps: &[&Tensor]| vec![g.map(|x| x * c)]);
        let id = self.push(v, vec![a], Some(bw), None);
        if let Some(pa) = self.precise_of(a) {
            self.set_precise(id, pa * c as f64);
        }
        id
    }

    pub fn add_scalar(&mut self, a: TensorId, c: f32) -> TensorId {
        let v = self.value(a).map(|x| x + c);
        let bw: BackwardFn =
            Rc::new(|g: &Tensor, _o: &Tensor, _ps: &[&Tensor]| vec![g.clone()]);
        let id = self.push(v, vec![a], Some(bw), None);
        if let Some(pa) = self.precise_of(a) {
            self.set_precise(id, pa + c as f64);
        }
        id
    }

    /// Identity in the forward pass; blocks every gradient.
    pub fn detach(&mut self, a: TensorId) -> TensorId {
        self.push(self.value(a).clone(), vec![], None, None)
    }

    // ── Structural ops ──────────────────────────────────────────────

    pub fn reshape(&mut self, a: TensorId, shape: &[usize]) -> Result<TensorId, ComputeError> {
        let v = self.value(a).reshaped(shape)?;
        let in_shape = self.shape(a).to_vec();
        let bw: BackwardFn = Rc::new(move |g: &Tensor, _o: &Tensor, _ps: &[&Tensor]| {
            vec![g.reshaped(&in_shape).expect("same numel")]
        });
        Ok(self.push(v, vec![a], Some(bw), None))
    }

    pub fn permute(&mut self, a: TensorId, axes: &[usize]) -> Result<TensorId, ComputeError> {
        let in_shape = self.shape(a).to_vec();
        let ndim = in_shape.len();
        let mut seen = vec![false; ndim];
        for &ax in axes {
            if ax >= ndim || seen[ax] {
                return Err(ComputeError::InvalidAxis { axis: ax, ndim });
            }
            seen[ax] = true;
        }
        if axes.len() != ndim {
            return Err(ComputeError::InvalidAxis { axis: axes.len(), ndim });
        }
        let v = permute_tensor(self.value(a), axes);
        let mut inverse = vec![0usize; ndim];
        for (new_ax, &old_ax) in axes.iter().enumerate() {
            inverse[old_ax] = new_ax;
        }
        let bw: BackwardFn = Rc::new(move |g: &Tensor, _o: &Tensor, _ps: &[&Tensor]| {
            vec![permute_tensor(g, &inverse)]
        });
        Ok(self.push(v, vec![a], Some(bw), None))
    }

    /// Contiguous slice `[start, start+len)` along one axis.
    pub fn narrow(
        &mut self,
        a: TensorId,
        axis: usize,
        start: usize,
        len: usize,
    ) -> Result<TensorId, ComputeError> {
        let in_shape = self.shape(a).to_vec();
        if axis >= in_shape.len() {
            return Err(ComputeError::InvalidAxis { axis, ndim: in_shape.len() });
        }
        if start + len > in_shape[axis] {
            return Err(ComputeError::InvalidGeometry {
                op: "narrow",
                detail: format!(
                    "slice {}..{} exceeds axis {} of {:?}",
                    start,
                    start + len,
                    axis,
                    in_shape
                ),
            });
        }
        let mut out_shape = in_shape.clone();
        out_shape[axis] = len;
        let v = copy_slice(self.value(a), axis, start, len);
        let bw: BackwardFn = Rc::new(move |g: &Tensor, _o: &Tensor, _ps: &[&Tensor]| {
            let mut full = Tensor::zeros(&in_shape);
            scatter_slice(&mut full, g, axis, start);
            vec![full]
        });
        Ok(self.push(v, vec![a], Some(bw), None))
    }

    // ── Linear algebra ──────────────────────────────────────────────

    /// Batched matrix product.
    ///
    /// Accepts `[..., m, k] · [..., k, n]` with identical leading dims, or a
    /// rank-2 right operand shared across every leading panel of the left.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, ComputeError> {
        let ashape = self.shape(a).to_vec();
        let bshape = self.shape(b).to_vec();
        let mismatch = || ComputeError::ShapeMismatch {
            op: "matmul",
            left: ashape.clone(),
            right: bshape.clone(),
        };
        if ashape.len() < 2 || bshape.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (ashape[ashape.len() - 2], ashape[ashape.len() - 1]);
        let (kb, n) = (bshape[bshape.len() - 2], bshape[bshape.len() - 1]);
        if k != kb {
            return Err(mismatch());
        }
        let shared_b = bshape.len() == 2 && ashape.len() > 2;
        if !shared_b && ashape[..ashape.len() - 2] != bshape[..bshape.len() - 2] {
            return Err(mismatch());
        }
        let batch: usize = ashape[..ashape.len() - 2].iter().product();
        let mut out_shape = ashape[..ashape.len() - 2].to_vec();
        out_shape.push(m);
        out_shape.push(n);

        let av = self.value(a);
        let bv = self.value(b);
        let mut out = vec![0.0f32; batch * m * n];
        for p in 0..batch {
            let bpanel = if shared_b { &bv.data()[..] } else { &bv.data()[p * k * n..(p + 1) * k * n] };
            kernels::matmul_panel(
                &av.data()[p * m * k..(p + 1) * m * k],
                bpanel,
                &mut out[p * m * n..(p + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let value = Tensor::new(out_shape, out).expect("sized");
        let need_a = self.parent_needs(a);
        let need_b = self.parent_needs(b);
        let (ash, bsh) = (ashape.clone(), bshape.clone());
        let bw: BackwardFn = Rc::new(move |g: &Tensor, _o: &Tensor, ps: &[&Tensor]| {
            let (av, bv) = (ps[0], ps[1]);
            let mut ga = Tensor::zeros(&ash);
            let mut gb = Tensor::zeros(&bsh);
            for p in 0..batch {
                let gpanel = &g.data()[p * m * n..(p + 1) * m * n];
                let bpanel = if shared_b {
                    &bv.data()[..]
                } else {
                    &bv.data()[p * k * n..(p + 1) * k * n]
                };
                if need_a {
                    kernels::matmul_grad_a(
                        gpanel,
                        bpanel,
                        &mut ga.data_mut()[p * m * k..(p + 1) * m * k],
                        m,
                        k,
                        n,
                    );
                }
                if need_b {
                    let gb_panel = if shared_b {
                        &mut gb.data_mut()[..]
                    } else {
                        &mut gb.data_mut()[p * k * n..(p + 1) * k * n]
                    };
                    kernels::matmul_grad_b(
                        &av.data()[p * m * k..(p + 1) * m * k],
                        gpanel,
                        gb_panel,
                        m,
                        k,
                        n,
                    );
                }
            }
            vec![ga, gb]
        });
        Ok(self.push(value, vec![a, b], Some(bw), None))
    }

    /// Broadcast a rank-1 bias over the last axis.
    pub fn add_bias(&mut self, a: TensorId, bias: TensorId) -> Result<TensorId, ComputeError> {
        let ashape = self.shape(a).to_vec();
        let bshape = self.shape(bias).to_vec();
        let last = *ashape.last().unwrap_or(&0);
        if bshape.len() != 1 || bshape[0] != last {
            return Err(ComputeError::ShapeMismatch {
                op: "add_bias",
                left: ashape,
                right: bshape,
            });
        }
        let bv = self.value(bias).data().to_vec();
        let mut v = self.value(a).clone();
        for row in v.data_mut().chunks_exact_mut(last) {
            for (x, &b) in row.iter_mut().zip(&bv) {
                *x += b;
            }
        }
        let bw: BackwardFn = Rc::new(move |g: &Tensor, _o: &Tensor, _ps: &[&Tensor]| {
            let mut gb = vec![0.0f64; last];
            for row in g.data().chunks_exact(last) {
                for (acc, &gv) in gb.iter_mut().zip(row) {
                    *acc += gv as f64;
                }
            }
            vec![
                g.clone(),
                Tensor::new(vec![last], gb.into_iter().map(|v| v as f32).collect())
                    .expect("sized"),
            ]
        });
        Ok(self.push(v, vec![a, bias], Some(bw), None))
    }

    /// 1-D cross-correlation: x `[B, C_in, L]`, w `[C_out, C_in/groups, K]`.
    pub fn conv1d(
        &mut self,
        x: TensorId,
        w: TensorId,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<TensorId, ComputeError> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let bad = |detail: String| ComputeError::InvalidGeometry { op: "conv1d", detail };
        if xs.len() != 3 || ws.len() != 3 {
            return Err(bad(format!("expected rank-3 operands, got {xs:?} and {ws:?}")));
        }
        let (b, c_in, l) = (xs[0], xs[1], xs[2]);
        let (c_out, cig, k) = (ws[0], ws[1], ws[2]);
        if groups == 0 || c_in % groups != 0 || c_out % groups != 0 {
            return Err(bad(format!("groups {groups} must divide C_in {c_in} and C_out {c_out}")));
        }
        if cig != c_in / groups {
            return Err(bad(format!(
                "weight expects {cig} channels per group, input provides {}",
                c_in / groups
            )));
        }
        let l_out = kernels::conv1d_out_len(l, k, stride, padding)
            .ok_or_else(|| bad(format!("no valid output for L={l}, k={k}, stride={stride}, padding={padding}")))?;

        let mut out = vec![0.0f32; b * c_out * l_out];
        kernels::conv1d_forward(
            self.value(x).data(),
            self.value(w).data(),
            &mut out,
            b,
            c_in,
            l,
            c_out,
            k,
            stride,
            padding,
            groups,
        );
        let value = Tensor::new(vec![b, c_out, l_out], out).expect("sized");
        let need_x = self.parent_needs(x);
        let need_w = self.parent_needs(w);
        let (xss, wss) = (xs.clone(), ws.clone());
        let bw: BackwardFn = Rc::new(move |g: &Tensor, _o: &Tensor, ps: &[&Tensor]| {
            let mut gx = Tensor::zeros(&xss);
            let mut gw = Tensor::zeros(&wss);
            if need_x || need_w {
                kernels::conv1d_backward(
                    ps[0].data(),
                    ps[1].data(),
                    g.data(),
                    gx.data_mut(),
                    gw.data_mut(),
                    b,
                    c_in,
                    l,
                    c_out,
                    k,
                    stride,
                    padding,
                    groups,
                );
            }
            vec![gx, gw]
        });
        Ok(self.push(value, vec![x, w], Some(bw), None))
    }

    // ── Normalization and reductions ────────────────────────────────

    /// Batch normalization over the channel `axis`.
    ///
    /// Training mode normalizes with batch statistics and updates the running
    /// estimates in `state`; eval mode applies the running estimates.
    pub fn batchnorm(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        state: &mut BnState,
        axis: usize,
        training: bool,
    ) -> Result<TensorId, ComputeError> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(ComputeError::InvalidAxis { axis, ndim: shape.len() });
        }
        let c = shape[axis];
        if c != state.channels() || self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(ComputeError::ShapeMismatch {
                op: "batchnorm",
                left: vec![c],
                right: vec![state.channels()],
            });
        }
        let st = strides(&shape);
        let stride_axis = st[axis];
        let channel_of = move |i: usize| (i / stride_axis) % c;

        let xv = self.value(x);
        let n_per_channel = xv.len() / c;
        let (mean, var): (Vec<f64>, Vec<f64>) = if training {
            let (m, v) = kernels::channel_stats(xv.data(), c, channel_of);
            state.update_running(&m, &v, n_per_channel);
            (m, v)
        } else {
            (
                state.running_mean.iter().map(|&v| v as f64).collect(),
                state.running_var.iter().map(|&v| v as f64).collect(),
            )
        };
        let invstd: Vec<f32> = var
            .iter()
            .map(|&v| (1.0 / (v + state.eps as f64).sqrt()) as f32)
            .collect();
        let mean32: Vec<f32> = mean.iter().map(|&m| m as f32).collect();

        let gv = self.value(gamma).data().to_vec();
        let bv = self.value(beta).data().to_vec();
        let mut xhat = vec![0.0f32; xv.len()];
        let mut out = vec![0.0f32; xv.len()];
        for (i, &v) in xv.data().iter().enumerate() {
            let ch = channel_of(i);
            let h = (v - mean32[ch]) * invstd[ch];
            xhat[i] = h;
            out[i] = gv[ch] * h + bv[ch];
        }
        let value = Tensor::new(shape.clone(), out).expect("sized");
        let xhat = Tensor::new(shape, xhat).expect("sized");

        let bw: BackwardFn = Rc::new(move |g: &Tensor, _o: &Tensor, ps: &[&Tensor]| {
            let gamma_v = ps[1];
            let n = n_per_channel as f64;
            // Per-channel reductions of g and g·x̂.
            let mut sum_g = vec![0.0f64; c];
            let mut sum_gx = vec![0.0f64; c];
            for (i, &gvv) in g.data().iter().enumerate() {
                let ch = channel_of(i);
                sum_g[ch] += gvv as f64;
                sum_gx[ch] += (gvv * xhat.data()[i]) as f64;
            }
            let mut gx = Tensor::zeros(g.shape());
            {
                let gxd = gx.data_mut();
                if training {
                    for (i, &gvv) in g.data().iter().enumerate() {
                        let ch = channel_of(i);
                        let term = n * gvv as f64
                            - sum_g[ch]
                            - xhat.data()[i] as f64 * sum_gx[ch];
                        gxd[i] =
                            (gamma_v.data()[ch] as f64 * invstd[ch] as f64 / n * term) as f32;
                    }
                } else {
                    for (i, &gvv) in g.data().iter().enumerate() {
                        let ch = channel_of(i);
                        gxd[i] = gvv * gamma_v.data()[ch] * invstd[ch];
                    }
                }
            }
            let ggamma = Tensor::new(
                vec![c],
                sum_gx.iter().map(|&v| v as f32).collect(),
            )
            .expect("sized");
            let gbeta = Tensor::new(
                vec![c],
                sum_g.iter().map(|&v| v as f32).collect(),
            )
            .expect("sized");
            vec![gx, ggamma, gbeta]
        });
        Ok(self.push(value, vec![x, gamma, beta], Some(bw), None))
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: TensorId, axis: usize) -> Result<TensorId, ComputeError> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(ComputeError::InvalidAxis { axis, ndim: shape.len() });
        }
        let v = lanes_map(self.value(x), axis, |lane, out| {
            let max = lane.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let mut denom = 0.0f64;
            for (&xv, ov) in lane.iter().zip(out.iter_mut()) {
                let e = (xv - max).exp();
                *ov = e;
                denom += e as f64;
            }
            let inv = (1.0 / denom) as f32;
            for ov in out.iter_mut() {
                *ov *= inv;
            }
        });
        let bw: BackwardFn = Rc::new(move |g: &Tensor, out: &Tensor, _ps: &[&Tensor]| {
            // dx = y ⊙ (g − Σ g·y) per lane
            let gx = lanes_zip_map(g, out, axis, |glane, ylane, dst| {
                let dot: f64 = glane
                    .iter()
                    .zip(ylane.iter())
                    .map(|(&gv, &yv)| (gv * yv) as f64)
                    .sum();
                for ((d, &gv), &yv) in dst.iter_mut().zip(glane).zip(ylane) {
                    *d = yv * (gv - dot as f32);
                }
            });
            vec![gx]
        });
        Ok(self.push(v, vec![x], Some(bw), None))
    }

    /// log(softmax(x)) along `axis`.
    pub fn log_softmax(&mut self, x: TensorId, axis: usize) -> Result<TensorId, ComputeError> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(ComputeError::InvalidAxis { axis, ndim: shape.len() });
        }
        let v = lanes_map(self.value(x), axis, |lane, out| {
            let max = lane.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let denom: f64 = lane.iter().map(|&xv| ((xv - max).exp()) as f64).sum();
            let log_denom = denom.ln() as f32;
            for (&xv, ov) in lane.iter().zip(out.iter_mut()) {
                *ov = xv - max - log_denom;
            }
        });
        let bw: BackwardFn = Rc::new(move |g: &Tensor, out: &Tensor, _ps: &[&Tensor]| {
            // dx = g − softmax(x) · Σ g per lane
            let gx = lanes_zip_map(g, out, axis, |glane, llane, dst| {
                let gsum: f64 = glane.iter().map(|&gv| gv as f64).sum();
                for ((d, &gv), &lv) in dst.iter_mut().zip(glane).zip(llane) {
                    *d = gv - lv.exp() * gsum as f32;
                }
            });
            vec![gx]
        });
        Ok(self.push(v, vec![x], Some(bw), None))
    }

    /// Sum of all elements (f64 accumulation) as a scalar node.
    pub fn sum(&mut self, x: TensorId) -> TensorId {
        let total = self.value(x).sum_f64();
        let shape = self.shape(x).to_vec();
        let bw: BackwardFn = Rc::new(move |g: &Tensor, _o: &Tensor, _ps: &[&Tensor]| {
            vec![Tensor::full(&shape, g.item())]
        });
        let id = self.push(Tensor::scalar(total as f32), vec![x], Some(bw), None);
        self.set_precise(id, total);
        id
    }

    /// Mean of all elements as a scalar node.
    pub fn mean(&mut self, x: TensorId) -> TensorId {
        let n = self.value(x).len();
        let total = self.value(x).sum_f64() / n as f64;
        let shape = self.shape(x).to_vec();
        let bw: BackwardFn = Rc::new(move |g: &Tensor, _o: &Tensor, _ps: &[&Tensor]| {
            vec![Tensor::full(&shape, g.item() / n as f32)]
        });
        let id = self.push(Tensor::scalar(total as f32), vec![x], Some(bw), None);
        self.set_precise(id, total);
        id
    }

    /// Sum along one axis (axis removed from the shape).
    pub fn sum_axis(&mut self, x: TensorId, axis: usize) -> Result<TensorId, ComputeError> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(ComputeError::InvalidAxis { axis, ndim: shape.len() });
        }
        let dim = shape[axis];
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let xv = self.value(x);
        let mut out = vec![0.0f32; outer * inner];
        for o in 0..outer {
            for d in 0..dim {
                let base = o * dim * inner + d * inner;
                let dst = &mut out[o * inner..(o + 1) * inner];
                let src = &xv.data()[base..base + inner];
                for (ov, &sv) in dst.iter_mut().zip(src) {
                    *ov += sv;
                }
            }
        }
        let value = Tensor::new(out_shape, out).expect("sized");
        let bw: BackwardFn = Rc::new(move |g: &Tensor, _o: &Tensor, _ps: &[&Tensor]| {
            let mut gx = Tensor::zeros(&shape);
            {
                let gd = gx.data_mut();
                for o in 0..outer {
                    let grow = &g.data()[o * inner..(o + 1) * inner];
                    for d in 0..dim {
                        let base = o * dim * inner + d * inner;
                        for (gv, &gg) in gd[base..base + inner].iter_mut().zip(grow) {
                            *gv = gg;
                        }
                    }
                }
            }
            vec![gx]
        });
        Ok(self.push(value, vec![x], Some(bw), None))
    }

    /// Spike nonlinearity with surrogate backward.
    ///
    /// Hard mode emits Θ(x) ∈ {0,1} with Θ(0)=1; soft mode emits the smooth
    /// arctangent sigmoid whose true derivative equals the surrogate, which
    /// makes finite-difference checks meaningful.
    pub fn spike(&mut self, x: TensorId, alpha: f32, soft: bool) -> TensorId {
        let v = if soft {
            self.value(x)
                .map(|h| 0.5 + (PI * alpha * h / 2.0).atan() / PI)
        } else {
            self.value(x).map(|h| if h >= 0.0 { 1.0 } else { 0.0 })
        };
        let bw: BackwardFn = Rc::new(move |g: &Tensor, _o: &Tensor, ps: &[&Tensor]| {
            let grad = g
                .zip(ps[0], |gv, h| gv * surrogate_derivative(h, alpha))
                .expect("shape fixed");
            vec![grad]
        });
        self.push(v, vec![x], Some(bw), None)
    }

    /// Mean softmax cross-entropy of `logits[B, Y]` against integer labels.
    pub fn cross_entropy(
        &mut self,
        logits: TensorId,
        labels: &[u32],
    ) -> Result<TensorId, ComputeError> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(ComputeError::ShapeMismatch {
                op: "cross_entropy",
                left: shape,
                right: vec![labels.len()],
            });
        }
        let (b, y) = (shape[0], shape[1]);
        for &l in labels {
            if l as usize >= y {
                return Err(ComputeError::LabelOutOfRange { label: l, classes: y });
            }
        }
        let xv = self.value(logits);
        let mut probs = vec![0.0f32; b * y];
        kernels::softmax_rows(xv.data(), &mut probs, y);
        let mut loss = 0.0f64;
        for (bi, &l) in labels.iter().enumerate() {
            // NaN or zero probabilities surface as a non-finite loss, which
            // training treats as divergence.
            loss -= (probs[bi * y + l as usize] as f64).ln();
        }
        let precise = loss / b as f64;
        let value = Tensor::scalar(precise as f32);
        let labels = labels.to_vec();
        let bw: BackwardFn = Rc::new(move |g: &Tensor, _o: &Tensor, _ps: &[&Tensor]| {
            let scale = g.item() / b as f32;
            let mut gx = probs.clone();
            for (bi, &l) in labels.iter().enumerate() {
                gx[bi * y + l as usize] -= 1.0;
            }
            for v in gx.iter_mut() {
                *v *= scale;
            }
            vec![Tensor::new(vec![b, y], gx).expect("sized")]
        });
        let id = self.push(value, vec![logits], Some(bw), None);
        self.set_precise(id, precise);
        Ok(id)
    }

    /// Arbitrary node with a caller-supplied backward rule.
    pub fn custom(
        &mut self,
        parents: &[TensorId],
        value: Tensor,
        backward: impl Fn(&Tensor, &Tensor, &[&Tensor]) -> Vec<Tensor> + 'static,
    ) -> TensorId {
        self.push(value, parents.to_vec(), Some(Rc::new(backward)), None)
    }

    // ── Differentiation ─────────────────────────────────────────────

    /// Reverse-mode sweep from a scalar root.
    pub fn backward(&self, root: TensorId) -> Grads {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        let root_node = &self.nodes[root.0];
        assert_eq!(
            root_node.value.len(),
            1,
            "backward root must be scalar, got shape {:?}",
            root_node.value.shape()
        );
        grads[root.0] = Some(Tensor::full(root_node.value.shape(), 1.0));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(bw) = &node.backward else {
                continue; // leaf: keep its gradient for the caller
            };
            let Some(g) = grads[i].take() else {
                continue;
            };
            let parent_values: Vec<&Tensor> =
                node.parents.iter().map(|p| &self.nodes[p.0].value).collect();
            let pgrads = bw(&g, &node.value, &parent_values);
            debug_assert_eq!(pgrads.len(), node.parents.len());
            for (p, pg) in node.parents.iter().zip(pgrads) {
                if !self.nodes[p.0].needs_grad {
                    continue;
                }
                match &mut grads[p.0] {
                    Some(existing) => {
                        let dst = existing.data_mut();
                        for (d, &s) in dst.iter_mut().zip(pg.data()) {
                            *d += s;
                        }
                    }
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Grads { grads }
    }

    /// Scatter leaf-parameter gradients back into the store.
    pub fn accumulate_param_grads(&self, grads: &Grads, store: &mut ParamStore) {
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Some(pid), Some(g)) = (node.param, &grads.grads[i]) {
                store.accumulate_grad(pid, g);
            }
        }
    }
}

/// Surrogate derivative of the spike nonlinearity: α / (2·(1 + (π·α·x/2)²)).
pub fn surrogate_derivative(x: f32, alpha: f32) -> f32 {
    let t = PI * alpha * x / 2.0;
    alpha / (2.0 * (1.0 + t * t))
}

fn permute_tensor(x: &Tensor, axes: &[usize]) -> Tensor {
    let in_shape = x.shape();
    let in_strides = strides(in_shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let out_strides_in: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = numel(&out_shape);
    let mut out = vec![0.0f32; n];
    let ndim = out_shape.len();
    if ndim == 0 {
        return x.clone();
    }
    let mut coords = vec![0usize; ndim];
    let mut src = 0usize;
    for slot in out.iter_mut() {
        *slot = x.data()[src];
        // Increment the output coordinate counter, tracking the source index.
        for d in (0..ndim).rev() {
            coords[d] += 1;
            src += out_strides_in[d];
            if coords[d] < out_shape[d] {
                break;
            }
            src -= out_strides_in[d] * out_shape[d];
            coords[d] = 0;
        }
    }
    Tensor::new(out_shape, out).expect("sized")
}

fn copy_slice(x: &Tensor, axis: usize, start: usize, len: usize) -> Tensor {
    let shape = x.shape();
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let dim = shape[axis];
    let mut out_shape = shape.to_vec();
    out_shape[axis] = len;
    let mut out = vec![0.0f32; outer * len * inner];
    for o in 0..outer {
        let src = &x.data()[(o * dim + start) * inner..(o * dim + start + len) * inner];
        out[o * len * inner..(o + 1) * len * inner].copy_from_slice(src);
    }
    Tensor::new(out_shape, out).expect("sized")
}

fn scatter_slice(full: &mut Tensor, part: &Tensor, axis: usize, start: usize) {
    let shape = full.shape().to_vec();
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let dim = shape[axis];
    let len = part.shape()[axis];
    let dst = full.data_mut();
    for o in 0..outer {
        let src = &part.data()[o * len * inner..(o + 1) * len * inner];
        dst[(o * dim + start) * inner..(o * dim + start + len) * inner].copy_from_slice(src);
    }
}

/// Apply `f` to each lane along `axis`, writing into a fresh tensor.
fn lanes_map(x: &Tensor, axis: usize, f: impl Fn(&[f32], &mut [f32])) -> Tensor {
    let shape = x.shape();
    let dim = shape[axis];
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out = vec![0.0f32; x.len()];
    let mut lane = vec![0.0f32; dim];
    let mut lane_out = vec![0.0f32; dim];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * dim * inner + i;
            for d in 0..dim {
                lane[d] = x.data()[base + d * inner];
            }
            f(&lane, &mut lane_out);
            for d in 0..dim {
                out[base + d * inner] = lane_out[d];
            }
        }
    }
    Tensor::new(shape.to_vec(), out).expect("sized")
}

/// Apply `f` to paired lanes of `a` and `b` along `axis`.
fn lanes_zip_map(
    a: &Tensor,
    b: &Tensor,
    axis: usize,
    f: impl Fn(&[f32], &[f32], &mut [f32]),
) -> Tensor {
    let shape = a.shape();
    let dim = shape[axis];
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out = vec![0.0f32; a.len()];
    let mut lane_a = vec![0.0f32; dim];
    let mut lane_b = vec![0.0f32; dim];
    let mut lane_out = vec![0.0f32; dim];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * dim * inner + i;
            for d in 0..dim {
                lane_a[d] = a.data()[base + d * inner];
                lane_b[d] = b.data()[base + d * inner];
            }
            f(&lane_a, &lane_b, &mut lane_out);
            for d in 0..dim {
                out[base + d * inner] = lane_out[d];
            }
        }
    }
    Tensor::new(shape.to_vec(), out).expect("sized")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compute::bn::BnState;
    use crate::testkit::fd_gradient_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_case() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = tape.constant(t(&[2, 1], &[3.0, 4.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[3.0, 4.0]);
    }

    #[test]
    fn matmul_hand_case() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(t(&[2, 1], &[5.0, 6.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 4]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[2, 4]"), "{err}");
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = Tensor::rand_uniform(&[3, 4], -1.0, 1.0, &mut rng);
        let b = Tensor::rand_uniform(&[4, 2], -1.0, 1.0, &mut rng);
        let report = fd_gradient_check(
            "matmul",
            &[a, b],
            |tape, ids| {
                let c = tape.matmul(ids[0], ids[1]).unwrap();
                tape.sum(c)
            },
            1e-3,
            1e-3,
        );
        assert!(report.pass, "{}", report.json_line());
    }

    #[test]
    fn batched_matmul_matches_per_panel() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::rand_uniform(&[2, 3, 2, 4], -1.0, 1.0, &mut rng);
        let b = Tensor::rand_uniform(&[2, 3, 4, 5], -1.0, 1.0, &mut rng);
        let mut tape = Tape::new();
        let ai = tape.constant(a.clone());
        let bi = tape.constant(b.clone());
        let c = tape.matmul(ai, bi).unwrap();
        assert_eq!(tape.shape(c), &[2, 3, 2, 5]);
        // check panel 4 of 6 by hand
        let p = 4;
        for i in 0..2 {
            for j in 0..5 {
                let mut acc = 0.0f32;
                for k in 0..4 {
                    acc += a.data()[p * 8 + i * 4 + k] * b.data()[p * 20 + k * 5 + j];
                }
                let got = tape.value(c).data()[p * 10 + i * 5 + j];
                assert!((acc - got).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn conv1d_identity_and_hand_case() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 1, 3], &[1.0, 2.0, 3.0]));
        let w = tape.constant(t(&[1, 1, 1], &[1.0]));
        let y = tape.conv1d(x, w, 1, 0, 1).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0]);

        let x = tape.constant(t(&[1, 1, 4], &[1.0, 2.0, 3.0, 4.0]));
        let w = tape.constant(t(&[1, 1, 2], &[1.0, 1.0]));
        let y = tape.conv1d(x, w, 1, 0, 1).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 5.0, 7.0]);
    }

    #[test]
    fn conv1d_invalid_geometry_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 4, 8]));
        let w = tape.constant(Tensor::zeros(&[6, 4, 3]));
        assert!(tape.conv1d(x, w, 1, 0, 3).is_err()); // groups don't divide
        let w = tape.constant(Tensor::zeros(&[6, 2, 3]));
        assert!(tape.conv1d(x, w, 1, 0, 1).is_err()); // channel mismatch
        let w = tape.constant(Tensor::zeros(&[6, 4, 11]));
        assert!(tape.conv1d(x, w, 1, 0, 1).is_err()); // kernel exceeds input
    }

    #[test]
    fn depthwise_channels_are_independent() {
        // groups == C: perturbing channel 0 of x must not change channel 1,
        // and the cross-channel gradient is exactly zero.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::rand_uniform(&[1, 2, 6], -1.0, 1.0, &mut rng);
        let w = Tensor::rand_uniform(&[2, 1, 3], -1.0, 1.0, &mut rng);

        let mut tape = Tape::new();
        let xi = tape.leaf(x.clone());
        let wi = tape.constant(w.clone());
        let y = tape.conv1d(xi, wi, 1, 1, 2).unwrap();
        // loss = sum of channel 1 only
        let ch1 = tape.narrow(y, 1, 1, 1).unwrap();
        let loss = tape.sum(ch1);
        let grads = tape.backward(loss);
        let gx = grads.get(xi).unwrap();
        assert!(gx.data()[0..6].iter().all(|&v| v == 0.0), "cross-channel grad leaked");
        assert!(gx.data()[6..12].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn conv1d_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let x = Tensor::rand_uniform(&[2, 3, 7], -1.0, 1.0, &mut rng);
        let w = Tensor::rand_uniform(&[4, 3, 3], -1.0, 1.0, &mut rng);
        let report = fd_gradient_check(
            "conv1d",
            &[x, w],
            |tape, ids| {
                let y = tape.conv1d(ids[0], ids[1], 1, 1, 1).unwrap();
                let sq = tape.mul(y, y).unwrap();
                tape.sum(sq)
            },
            1e-3,
            1e-3,
        );
        assert!(report.pass, "{}", report.json_line());
    }

    #[test]
    fn softmax_symmetry_closed_form_and_stability() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[4.2, 4.2, 4.2]));
        let y = tape.softmax(x, 0).unwrap();
        for &v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-6);
        }

        let x = tape.constant(t(&[2], &[0.0, 3.0f32.ln()]));
        let y = tape.softmax(x, 0).unwrap();
        assert!((tape.value(y).data()[0] - 0.25).abs() < 1e-6);
        assert!((tape.value(y).data()[1] - 0.75).abs() < 1e-6);

        let x = tape.constant(t(&[2], &[1000.0, 0.0]));
        let y = tape.softmax(x, 0).unwrap();
        let v = tape.value(y).data();
        assert!(v.iter().all(|x| x.is_finite()));
        assert!(v[0] > 0.999 && v[1] < 1e-6);
    }

    #[test]
    fn softmax_rows_sum_to_one_for_random_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let x = Tensor::rand_uniform(&[4, 3, 5], -30.0, 30.0, &mut rng);
        let mut tape = Tape::new();
        let xi = tape.constant(x);
        let y = tape.softmax(xi, 2).unwrap();
        for row in tape.value(y).data().chunks_exact(5) {
            let s: f64 = row.iter().map(|&v| v as f64).sum();
            assert!((s - 1.0).abs() < 1e-6, "row sums to {s}");
        }
    }

    #[test]
    fn softmax_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let x = Tensor::rand_uniform(&[2, 4], -2.0, 2.0, &mut rng);
        let r = Tensor::rand_uniform(&[2, 4], 0.5, 1.5, &mut rng);
        let report = fd_gradient_check(
            "softmax",
            &[x],
            move |tape, ids| {
                let y = tape.softmax(ids[0], 1).unwrap();
                let rc = tape.constant(r.clone());
                let weighted = tape.mul(y, rc).unwrap();
                tape.sum(weighted)
            },
            1e-3,
            1e-3,
        );
        assert!(report.pass, "{}", report.json_line());
    }

    #[test]
    fn log_softmax_and_sum_axis_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let x = Tensor::rand_uniform(&[2, 2, 3], -1.5, 1.5, &mut rng);
        let r = Tensor::rand_uniform(&[2, 3], 0.5, 1.5, &mut rng);
        let report = fd_gradient_check(
            "log_softmax+sum_axis",
            &[x],
            move |tape, ids| {
                let y = tape.log_softmax(ids[0], 2).unwrap();
                let pooled = tape.sum_axis(y, 1).unwrap();
                let rc = tape.constant(r.clone());
                let weighted = tape.mul(pooled, rc).unwrap();
                tape.sum(weighted)
            },
            1e-3,
            1e-3,
        );
        assert!(report.pass, "{}", report.json_line());
    }

    #[test]
    fn batchnorm_passthrough_when_already_normalized() {
        // zero-mean unit-variance per channel, γ=1, β=0 → output ≈ input
        let x = t(&[2, 2], &[-1.0, 2.0, 1.0, -2.0]); // channel axis 1: means 0, vars 1 and 4
        let xn = t(&[2, 2], &[-1.0, 1.0, 1.0, -1.0]); // both channels variance 1
        let _ = x;
        let mut tape = Tape::new();
        let xi = tape.constant(xn.clone());
        let g = tape.constant(Tensor::full(&[2], 1.0));
        let b = tape.constant(Tensor::zeros(&[2]));
        let mut state = BnState::new(2);
        let y = tape.batchnorm(xi, g, b, &mut state, 1, true).unwrap();
        for (a, e) in tape.value(y).data().iter().zip(xn.data()) {
            assert!((a - e).abs() < 1e-4, "{a} vs {e}");
        }
    }

    #[test]
    fn batchnorm_constant_channel_yields_beta() {
        let x = Tensor::full(&[3, 2], 7.5);
        let mut tape = Tape::new();
        let xi = tape.constant(x);
        let g = tape.constant(Tensor::full(&[2], 1.0));
        let b = tape.constant(t(&[2], &[0.25, -0.5]));
        let mut state = BnState::new(2);
        let y = tape.batchnorm(xi, g, b, &mut state, 1, true).unwrap();
        for row in tape.value(y).data().chunks_exact(2) {
            assert!((row[0] - 0.25).abs() < 1e-6);
            assert!((row[1] + 0.5).abs() < 1e-6);
        }
    }

    #[test]
    fn batchnorm_training_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let x = Tensor::rand_uniform(&[4, 3], -1.0, 1.0, &mut rng);
        let g = Tensor::rand_uniform(&[3], 0.5, 1.5, &mut rng);
        let b = Tensor::rand_uniform(&[3], -0.5, 0.5, &mut rng);
        let r = Tensor::rand_uniform(&[4, 3], 0.5, 1.5, &mut rng);
        let report = fd_gradient_check(
            "batchnorm",
            &[x, g, b],
            move |tape, ids| {
                let mut state = BnState::new(3);
                let y = tape
                    .batchnorm(ids[0], ids[1], ids[2], &mut state, 1, true)
                    .unwrap();
                let rc = tape.constant(r.clone());
                let weighted = tape.mul(y, rc).unwrap();
                tape.sum(weighted)
            },
            1e-3,
            1e-3,
        );
        assert!(report.pass, "{}", report.json_line());
    }

    #[test]
    fn folded_bn_matches_two_layer_pipeline() {
        use crate::compute::bn::{fold_conv_bn, fold_linear_bn};
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        // Train a BN for a few batches so running stats are non-trivial.
        let w = Tensor::rand_uniform(&[5, 4], -0.5, 0.5, &mut rng);
        let gamma = Tensor::rand_uniform(&[4], 0.5, 1.5, &mut rng);
        let beta = Tensor::rand_uniform(&[4], -0.5, 0.5, &mut rng);
        let mut state = BnState::new(4);
        for _ in 0..5 {
            let x = Tensor::rand_uniform(&[8, 5], -1.0, 1.0, &mut rng);
            let mut tape = Tape::new();
            let xi = tape.constant(x);
            let wi = tape.constant(w.clone());
            let gi = tape.constant(gamma.clone());
            let bi = tape.constant(beta.clone());
            let h = tape.matmul(xi, wi).unwrap();
            let _ = tape.batchnorm(h, gi, bi, &mut state, 1, true).unwrap();
        }
        // Eval: unfused linear→BN vs fused single linear.
        let x = Tensor::rand_uniform(&[6, 5], -1.0, 1.0, &mut rng);
        let mut tape = Tape::new();
        let xi = tape.constant(x.clone());
        let wi = tape.constant(w.clone());
        let gi = tape.constant(gamma.clone());
        let bi = tape.constant(beta.clone());
        let h = tape.matmul(xi, wi).unwrap();
        let unfused = tape.batchnorm(h, gi, bi, &mut state, 1, false).unwrap();

        let (wf, bf) = fold_linear_bn(&w, None, gamma.data(), beta.data(), &state);
        let wfi = tape.constant(wf);
        let bfi = tape.constant(bf);
        let hf = tape.matmul(xi, wfi).unwrap();
        let fused = tape.add_bias(hf, bfi).unwrap();

        let scale = tape
            .value(unfused)
            .data()
            .iter()
            .fold(1.0f32, |m, v| m.max(v.abs())) as f64;
        for (&a, &b) in tape.value(unfused).data().iter().zip(tape.value(fused).data()) {
            assert!((a as f64 - b as f64).abs() < 1e-5 * scale, "{a} vs {b}");
        }

        // Same check for a conv weight.
        let wc = Tensor::rand_uniform(&[4, 3, 3], -0.5, 0.5, &mut rng);
        let mut cstate = BnState::new(4);
        let gc = Tensor::rand_uniform(&[4], 0.5, 1.5, &mut rng);
        let bc = Tensor::rand_uniform(&[4], -0.5, 0.5, &mut rng);
        for _ in 0..5 {
            let x = Tensor::rand_uniform(&[2, 3, 9], -1.0, 1.0, &mut rng);
            let mut tp = Tape::new();
            let xi = tp.constant(x);
            let wi = tp.constant(wc.clone());
            let gi = tp.constant(gc.clone());
            let bi = tp.constant(bc.clone());
            let h = tp.conv1d(xi, wi, 1, 1, 1).unwrap();
            let _ = tp.batchnorm(h, gi, bi, &mut cstate, 1, true).unwrap();
        }
        let x = Tensor::rand_uniform(&[2, 3, 9], -1.0, 1.0, &mut rng);
        let mut tp = Tape::new();
        let xi = tp.constant(x);
        let wi = tp.constant(wc.clone());
        let gi = tp.constant(gc.clone());
        let bi = tp.constant(bc.clone());
        let h = tp.conv1d(xi, wi, 1, 1, 1).unwrap();
        let unfused = tp.batchnorm(h, gi, bi, &mut cstate, 1, false).unwrap();
        let (wf, bf) = fold_conv_bn(&wc, None, gc.data(), bc.data(), &cstate);
        let wfi = tp.constant(wf);
        let hf = tp.conv1d(xi, wfi, 1, 1, 1).unwrap();
        // conv output is [B, C, L]; add the per-channel bias by hand
        let fused_pre = tp.value(hf).clone();
        let mut fused = fused_pre.clone();
        {
            let l = fused.shape()[2];
            let c = fused.shape()[1];
            let d = fused.data_mut();
            for (i, v) in d.iter_mut().enumerate() {
                *v += bf.data()[(i / l) % c];
            }
        }
        let scale = tp
            .value(unfused)
            .data()
            .iter()
            .fold(1.0f32, |m, v| m.max(v.abs())) as f64;
        for (&a, &b) in tp.value(unfused).data().iter().zip(fused.data()) {
            assert!((a as f64 - b as f64).abs() < 1e-5 * scale, "{a} vs {b}");
        }
    }

    #[test]
    fn custom_grad_zero_rule_and_surrogate_value() {
        // Heaviside with a zero backward: gradient is exactly 0 everywhere.
        let zero_rule = CustomOp::new(
            |inputs| Ok(inputs[0].map(|v| if v >= 0.0 { 1.0 } else { 0.0 })),
            |_g, _o, ps| vec![Tensor::zeros(ps[0].shape())],
        );
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[-1.0, 0.0, 2.0]));
        let y = zero_rule.apply(&mut tape, &[x]).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 1.0, 1.0]);
        let loss = tape.sum(y);
        let grads = tape.backward(loss);
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 0.0, 0.0]);

        // Surrogate at x=0, α=5 → 2.5.
        assert!((surrogate_derivative(0.0, 5.0) - 2.5).abs() < 1e-7);
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1], &[0.0]));
        let s = tape.spike(x, 5.0, false);
        let loss = tape.sum(s);
        let grads = tape.backward(loss);
        assert!((grads.get(x).unwrap().data()[0] - 2.5).abs() < 1e-6);
    }

    #[test]
    fn custom_op_composes_with_matmul_chain_rule() {
        // y = W·σ(x); dL/dx must equal Wᵀ·1 ⊙ σ'(x) computed by hand.
        let alpha = 5.0;
        let mut tape = Tape::new();
        let xv = t(&[2, 1], &[0.1, -0.2]);
        let wv = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let x = tape.leaf(xv.clone());
        let w = tape.constant(wv.clone());
        let s = tape.spike(x, alpha, false);
        let y = tape.matmul(w, s).unwrap();
        let loss = tape.sum(y);
        let grads = tape.backward(loss);
        let gx = grads.get(x).unwrap();
        // column sums of W are (4, 6); chain through surrogate
        let expect = [
            4.0 * surrogate_derivative(0.1, alpha),
            6.0 * surrogate_derivative(-0.2, alpha),
        ];
        for (a, e) in gx.data().iter().zip(&expect) {
            assert!((a - e).abs() < 1e-5, "{a} vs {e}");
        }
    }

    #[test]
    fn reused_output_accumulates_both_contributions() {
        // loss = sum(x·x) + sum(x) uses x twice; grad = 2x + 1.
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.5, -0.5]));
        let sq = tape.mul(x, x).unwrap();
        let s1 = tape.sum(sq);
        let s2 = tape.sum(x);
        let loss = tape.add(s1, s2).unwrap();
        let grads = tape.backward(loss);
        assert_eq!(grads.get(x).unwrap().data(), &[4.0, 0.0]);
    }

    #[test]
    fn detach_blocks_gradients() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]));
        let d = tape.detach(x);
        let prod = tape.mul(x, d).unwrap();
        let loss = tape.sum(prod);
        let grads = tape.backward(loss);
        // only the live path contributes: grad = detached value
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn permute_narrow_reshape_roundtrip_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let x = Tensor::rand_uniform(&[2, 3, 4, 2], -1.0, 1.0, &mut rng);
        let report = fd_gradient_check(
            "structural",
            &[x],
            |tape, ids| {
                let p = tape.permute(ids[0], &[0, 2, 1, 3]).unwrap();
                let n = tape.narrow(p, 1, 1, 2).unwrap();
                let r = tape.reshape(n, &[2, 2, 6]).unwrap();
                let sq = tape.mul(r, r).unwrap();
                tape.sum(sq)
            },
            1e-3,
            1e-3,
        );
        assert!(report.pass, "{}", report.json_line());
    }

    #[test]
    fn cross_entropy_rejects_bad_labels() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(tape.cross_entropy(x, &[0, 3]).is_err());
        assert!(tape.cross_entropy(x, &[0, 2]).is_ok());
    }
}
