//! Small fully connected ReLU networks with hand-coded reverse-mode
//! gradients, plus the finite-difference second-order products needed to
//! differentiate through unrolled inner optimization.
//!
//! Outer parameters live inside a [`Dataset`]: any input coordinate or label
//! logit marked learnable is packed, in point order, into one flat vector.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::linalg::{DenseMatrix, Vector};

/// Finite-difference guardrail: refuse outer spaces larger than this.
const MAX_OUTER_DIM: usize = 4096;
/// Central-difference step for second-order products.
const FD_STEP: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum MlpError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid network spec: {0}")]
    BadSpec(String),
    #[error("outer dimension {0} exceeds the finite-difference guardrail {MAX_OUTER_DIM}")]
    OuterDimTooLarge(usize),
}

/// Layer sizes from input to output. Hidden layers use ReLU, the output
/// layer is linear.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpSpec {
    layer_sizes: Vec<usize>,
}

impl MlpSpec {
    pub fn new(layer_sizes: Vec<usize>) -> Result<Self, MlpError> {
        if layer_sizes.len() < 2 {
            return Err(MlpError::BadSpec("need at least input and output sizes".into()));
        }
        if layer_sizes.iter().any(|&s| s == 0) {
            return Err(MlpError::BadSpec("all layer sizes must be at least 1".into()));
        }
        Ok(Self { layer_sizes })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn num_weight_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn param_count(&self) -> usize {
        self.layer_sizes
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }
}

/// Per-layer weights (`fan_out x fan_in`) and biases.
#[derive(Debug, Clone)]
pub struct MlpParams {
    pub weights: Vec<DenseMatrix>,
    pub biases: Vec<Vector>,
}

impl MlpParams {
    /// Glorot-style uniform init in `±sqrt(6/(fan_in+fan_out))`, zero biases,
    /// drawn from a seeded generator layer by layer.
    pub fn init_seeded(spec: &MlpSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for win in spec.layer_sizes.windows(2) {
            let (fan_in, fan_out) = (win[0], win[1]);
            let lim = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let data: Vec<f64> = (0..fan_in * fan_out).map(|_| rng.random_range(-lim..lim)).collect();
            weights.push(DenseMatrix::new(fan_out, fan_in, data).unwrap());
            biases.push(Vector::zeros(fan_out));
        }
        Self { weights, biases }
    }

    pub fn zeros(spec: &MlpSpec) -> Self {
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for win in spec.layer_sizes.windows(2) {
            weights.push(DenseMatrix::zeros(win[1], win[0]));
            biases.push(Vector::zeros(win[1]));
        }
        Self { weights, biases }
    }

    /// Packs all layers into one vector: weights row-major, then the bias,
    /// layer by layer.
    pub fn flatten(&self) -> Vector {
        let mut data = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            data.extend_from_slice(w.as_slice());
            data.extend_from_slice(b.as_slice());
        }
        Vector::from_slice(&data)
    }

    pub fn from_flat(spec: &MlpSpec, flat: &Vector) -> Result<Self, MlpError> {
        if flat.len() != spec.param_count() {
            return Err(MlpError::ShapeMismatch(format!(
                "flat vector has length {}, spec wants {}",
                flat.len(),
                spec.param_count()
            )));
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        let mut offset = 0;
        let src = flat.as_slice();
        for win in spec.layer_sizes.windows(2) {
            let (fan_in, fan_out) = (win[0], win[1]);
            let wlen = fan_in * fan_out;
            weights.push(DenseMatrix::new(fan_out, fan_in, src[offset..offset + wlen].to_vec()).unwrap());
            offset += wlen;
            biases.push(Vector::from_slice(&src[offset..offset + fan_out]));
            offset += fan_out;
        }
        Ok(Self { weights, biases })
    }

    /// `self += s * other` over all layers.
    pub fn axpy(&mut self, s: f64, other: &MlpParams) {
        for (w, ow) in self.weights.iter_mut().zip(&other.weights) {
            *w = w.add(&ow.scaled(s));
        }
        for (b, ob) in self.biases.iter_mut().zip(&other.biases) {
            b.axpy(s, ob);
        }
    }
}

/// Per-point target: a hard class index or a learnable logit vector that is
/// pushed through a softmax inside the cross-entropy loss (and used raw as
/// the regression target under squared error).
#[derive(Debug, Clone)]
pub enum Label {
    Class(usize),
    SoftLogits(Vector),
}

#[derive(Debug, Clone)]
pub struct DataPoint {
    pub input: Vector,
    /// Learnability flag per input coordinate.
    pub coord_learnable: Vec<bool>,
    pub label: Label,
    pub label_learnable: bool,
}

impl DataPoint {
    /// A fully fixed point (nothing learnable).
    pub fn fixed(input: Vector, label: Label) -> Self {
        let coord_learnable = vec![false; input.len()];
        Self { input, coord_learnable, label, label_learnable: false }
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub points: Vec<DataPoint>,
}

impl Dataset {
    pub fn new(points: Vec<DataPoint>) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Number of packed outer parameters (learnable coords plus logits).
    pub fn outer_dim(&self) -> usize {
        self.points
            .iter()
            .map(|p| {
                let coords = p.coord_learnable.iter().filter(|&&l| l).count();
                let logits = if p.label_learnable {
                    match &p.label {
                        Label::SoftLogits(l) => l.len(),
                        Label::Class(_) => 0,
                    }
                } else {
                    0
                };
                coords + logits
            })
            .sum()
    }

    /// Reads the current learnable values, in point order, coords before logits.
    pub fn read_outer(&self) -> Vector {
        let mut out = Vec::with_capacity(self.outer_dim());
        for p in &self.points {
            for (x, &learn) in p.input.as_slice().iter().zip(&p.coord_learnable) {
                if learn {
                    out.push(*x);
                }
            }
            if p.label_learnable {
                if let Label::SoftLogits(l) = &p.label {
                    out.extend_from_slice(l.as_slice());
                }
            }
        }
        Vector::from_slice(&out)
    }

    /// Writes a packed outer vector back into the learnable slots.
    pub fn write_outer(&mut self, u: &Vector) -> Result<(), MlpError> {
        if u.len() != self.outer_dim() {
            return Err(MlpError::ShapeMismatch(format!(
                "outer vector has length {}, dataset wants {}",
                u.len(),
                self.outer_dim()
            )));
        }
        let mut idx = 0;
        let src = u.as_slice();
        for p in &mut self.points {
            for (x, &learn) in p.input.as_mut_slice().iter_mut().zip(&p.coord_learnable) {
                if learn {
                    *x = src[idx];
                    idx += 1;
                }
            }
            if p.label_learnable {
                if let Label::SoftLogits(l) = &mut p.label {
                    for v in l.as_mut_slice() {
                        *v = src[idx];
                        idx += 1;
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossKind {
    SquaredError,
    SoftmaxCrossEntropy,
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let exp: Vec<f64> = z.iter().map(|&x| (x - m).exp()).collect();
    let sum: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / sum).collect()
}

/// Target distribution / regression target for a label.
fn target_vector(label: &Label, out_dim: usize, loss: LossKind) -> Result<Vec<f64>, MlpError> {
    match label {
        Label::Class(c) => {
            if *c >= out_dim {
                return Err(MlpError::ShapeMismatch(format!(
                    "class index {c} out of range for output size {out_dim}"
                )));
            }
            let mut t = vec![0.0; out_dim];
            t[*c] = 1.0;
            Ok(t)
        }
        Label::SoftLogits(l) => {
            if l.len() != out_dim {
                return Err(MlpError::ShapeMismatch(format!(
                    "label logits have length {}, output size is {out_dim}",
                    l.len()
                )));
            }
            Ok(match loss {
                LossKind::SquaredError => l.as_slice().to_vec(),
                LossKind::SoftmaxCrossEntropy => softmax(l.as_slice()),
            })
        }
    }
}

/// Deterministic feed-forward pass: ReLU on hidden layers, linear output.
pub fn forward(spec: &MlpSpec, params: &MlpParams, x: &Vector) -> Result<Vector, MlpError> {
    if x.len() != spec.input_dim() {
        return Err(MlpError::ShapeMismatch(format!(
            "input has length {}, spec wants {}",
            x.len(),
            spec.input_dim()
        )));
    }
    let mut a = x.clone();
    let last = spec.num_weight_layers() - 1;
    for (l, (w, b)) in params.weights.iter().zip(&params.biases).enumerate() {
        let mut z = w.matvec(&a);
        z.axpy(1.0, b);
        if l < last {
            for v in z.as_mut_slice() {
                *v = v.max(0.0);
            }
        }
        a = z;
    }
    Ok(a)
}

struct ForwardTrace {
    /// Post-activation per layer; index 0 is the input itself.
    activations: Vec<Vector>,
    /// Pre-activation per weight layer.
    pre_activations: Vec<Vector>,
}

fn forward_trace(spec: &MlpSpec, params: &MlpParams, x: &Vector) -> ForwardTrace {
    let mut activations = vec![x.clone()];
    let mut pre_activations = Vec::new();
    let last = spec.num_weight_layers() - 1;
    for (l, (w, b)) in params.weights.iter().zip(&params.biases).enumerate() {
        let mut z = w.matvec(activations.last().unwrap());
        z.axpy(1.0, b);
        pre_activations.push(z.clone());
        if l < last {
            for v in z.as_mut_slice() {
                *v = v.max(0.0);
            }
        }
        activations.push(z);
    }
    ForwardTrace { activations, pre_activations }
}

/// What the backward pass should produce.
enum GradSink<'a> {
    /// Accumulate the full flattened gradient.
    Full(&'a mut [f64]),
    /// Accumulate only `∇_w f · v` against a flattened direction.
    Dot { v: &'a [f64], acc: &'a mut f64 },
}

/// Shared engine: mean loss over the dataset and, per `sink`, either the
/// flattened parameter gradient or its inner product with a direction.
fn loss_and_backward(
    spec: &MlpSpec,
    params: &MlpParams,
    data: &Dataset,
    loss: LossKind,
    mut sink: Option<GradSink<'_>>,
) -> Result<f64, MlpError> {
    if data.is_empty() {
        return Err(MlpError::ShapeMismatch("dataset is empty".into()));
    }
    let out_dim = spec.output_dim();
    let n = data.len() as f64;
    let mut total = 0.0;

    // Flat layout offsets of each layer's weight block and bias block.
    let mut offsets = Vec::with_capacity(spec.num_weight_layers());
    {
        let mut off = 0;
        for win in spec.layer_sizes().windows(2) {
            offsets.push((off, off + win[0] * win[1]));
            off += win[0] * win[1] + win[1];
        }
    }

    for point in &data.points {
        let trace = forward_trace(spec, params, &point.input);
        let out = trace.activations.last().unwrap();
        let target = target_vector(&point.label, out_dim, loss)?;

        let (point_loss, mut delta): (f64, Vec<f64>) = match loss {
            LossKind::SquaredError => {
                let resid: Vec<f64> =
                    out.as_slice().iter().zip(&target).map(|(o, t)| o - t).collect();
                let l = 0.5 * resid.iter().map(|r| r * r).sum::<f64>();
                (l, resid)
            }
            LossKind::SoftmaxCrossEntropy => {
                let p = softmax(out.as_slice());
                let l = -target
                    .iter()
                    .zip(&p)
                    .map(|(q, pi)| if *q > 0.0 { q * pi.max(1e-300).ln() } else { 0.0 })
                    .sum::<f64>();
                (l, p.iter().zip(&target).map(|(pi, q)| pi - q).collect())
            }
        };
        total += point_loss / n;

        if sink.is_none() {
            continue;
        }
        for d in &mut delta {
            *d /= n;
        }
        // Reverse sweep through the layers.
        for l in (0..spec.num_weight_layers()).rev() {
            let a_prev = &trace.activations[l];
            match sink.as_mut().unwrap() {
                GradSink::Full(grad) => {
                    let (w_off, b_off) = offsets[l];
                    let fan_in = a_prev.len();
                    for (i, di) in delta.iter().enumerate() {
                        let row = &mut grad[w_off + i * fan_in..w_off + (i + 1) * fan_in];
                        for (g, aj) in row.iter_mut().zip(a_prev.as_slice()) {
                            *g += di * aj;
                        }
                        grad[b_off + i] += di;
                    }
                }
                GradSink::Dot { v, acc } => {
                    let (w_off, b_off) = offsets[l];
                    let fan_in = a_prev.len();
                    for (i, di) in delta.iter().enumerate() {
                        let row = &v[w_off + i * fan_in..w_off + (i + 1) * fan_in];
                        let dot: f64 =
                            row.iter().zip(a_prev.as_slice()).map(|(vj, aj)| vj * aj).sum();
                        **acc += di * dot + di * v[b_off + i];
                    }
                }
            }
            if l > 0 {
                // delta <- Wᵀ delta, gated by the ReLU mask of layer l-1.
                let w = &params.weights[l];
                let pre = &trace.pre_activations[l - 1];
                let mut next = vec![0.0; w.cols()];
                for (i, di) in delta.iter().enumerate() {
                    if *di == 0.0 {
                        continue;
                    }
                    for (nj, wij) in next.iter_mut().zip(w.row(i)) {
                        *nj += di * wij;
                    }
                }
                for (nj, z) in next.iter_mut().zip(pre.as_slice()) {
                    if *z <= 0.0 {
                        *nj = 0.0;
                    }
                }
                delta = next;
            }
        }
    }
    Ok(total)
}

/// Mean loss of the network on `data` under the given loss kind.
pub fn loss_only(
    spec: &MlpSpec,
    params: &MlpParams,
    data: &Dataset,
    loss: LossKind,
) -> Result<f64, MlpError> {
    loss_and_backward(spec, params, data, loss, None)
}

/// Mean loss and flattened parameter gradient on the (synthetic) dataset.
pub fn inner_loss_and_grad(
    spec: &MlpSpec,
    params: &MlpParams,
    data: &Dataset,
    loss: LossKind,
) -> Result<(f64, Vector), MlpError> {
    let mut grad = vec![0.0; spec.param_count()];
    let l = loss_and_backward(spec, params, data, loss, Some(GradSink::Full(&mut grad)))?;
    Ok((l, Vector::from_slice(&grad)))
}

/// Mean loss and flattened parameter gradient on the fixed original dataset.
/// Same computation as [`inner_loss_and_grad`]; the split mirrors the two
/// roles the quantities play.
pub fn outer_loss_and_grad_w(
    spec: &MlpSpec,
    params: &MlpParams,
    original: &Dataset,
    loss: LossKind,
) -> Result<(f64, Vector), MlpError> {
    inner_loss_and_grad(spec, params, original, loss)
}

/// `∇_w f(u, w) · v` without materializing the full gradient.
pub fn inner_grad_dot(
    spec: &MlpSpec,
    params: &MlpParams,
    data: &Dataset,
    loss: LossKind,
    v: &Vector,
) -> Result<f64, MlpError> {
    if v.len() != spec.param_count() {
        return Err(MlpError::ShapeMismatch(format!(
            "direction has length {}, spec wants {}",
            v.len(),
            spec.param_count()
        )));
    }
    let mut acc = 0.0;
    loss_and_backward(spec, params, data, loss, Some(GradSink::Dot { v: v.as_slice(), acc: &mut acc }))?;
    Ok(acc)
}

/// `∇_u (∇_w f(u, w) · v)` by central finite differences in the outer
/// coordinates, step `1e-5 · (1 + |u_i|)` per coordinate.
pub fn mixed_vjp(
    spec: &MlpSpec,
    params: &MlpParams,
    dataset: &Dataset,
    loss: LossKind,
    v: &Vector,
) -> Result<Vector, MlpError> {
    let dim = dataset.outer_dim();
    if dim > MAX_OUTER_DIM {
        return Err(MlpError::OuterDimTooLarge(dim));
    }
    let u = dataset.read_outer();
    let mut probe = dataset.clone();
    let mut out = vec![0.0; dim];
    let mut u_pert = u.clone();
    for i in 0..dim {
        let eps = FD_STEP * (1.0 + u[i].abs());
        u_pert[i] = u[i] + eps;
        probe.write_outer(&u_pert)?;
        let plus = inner_grad_dot(spec, params, &probe, loss, v)?;
        u_pert[i] = u[i] - eps;
        probe.write_outer(&u_pert)?;
        let minus = inner_grad_dot(spec, params, &probe, loss, v)?;
        u_pert[i] = u[i];
        out[i] = (plus - minus) / (2.0 * eps);
    }
    Ok(Vector::from_slice(&out))
}

/// Hessian-vector product `H(w)·v` by central differences of the inner
/// gradient along `v`, with the perturbation scaled to norm `1e-5`.
pub fn hessian_vec_product(
    spec: &MlpSpec,
    params: &MlpParams,
    data: &Dataset,
    loss: LossKind,
    v: &Vector,
) -> Result<Vector, MlpError> {
    let vnorm = v.norm();
    if vnorm == 0.0 {
        return Ok(Vector::zeros(v.len()));
    }
    let eps = FD_STEP / vnorm;
    let flat = params.flatten();
    let mut plus = flat.clone();
    plus.axpy(eps, v);
    let mut minus = flat;
    minus.axpy(-eps, v);
    let (_, gp) = inner_loss_and_grad(spec, &MlpParams::from_flat(spec, &plus)?, data, loss)?;
    let (_, gm) = inner_loss_and_grad(spec, &MlpParams::from_flat(spec, &minus)?, data, loss)?;
    Ok(gp.sub(&gm).scaled(1.0 / (2.0 * eps)))
}

/// Hypergradient through `k` unrolled inner gradient-descent steps.
///
/// Forward-simulates the `k` steps recording each iterate, then accumulates
/// the reverse sweep with Hessian-vector products and mixed products at the
/// recorded iterates. Returns the gradient of
/// `u ↦ F(u, Ξ^(k)(u, w))` with respect to the packed outer vector.
pub fn unrolled_hypergrad_mlp(
    spec: &MlpSpec,
    params: &MlpParams,
    dataset: &Dataset,
    original: &Dataset,
    loss: LossKind,
    alpha: f64,
    k: usize,
) -> Result<Vector, MlpError> {
    if k == 0 {
        return Err(MlpError::BadSpec("unroll length must be at least 1".into()));
    }
    let dim = dataset.outer_dim();
    if dim > MAX_OUTER_DIM {
        return Err(MlpError::OuterDimTooLarge(dim));
    }

    let mut iterates = Vec::with_capacity(k);
    let mut cur = params.clone();
    for _ in 0..k {
        iterates.push(cur.clone());
        let (_, g) = inner_loss_and_grad(spec, &cur, dataset, loss)?;
        let step = MlpParams::from_flat(spec, &g)?;
        cur.axpy(-alpha, &step);
    }

    let (_, mut v) = outer_loss_and_grad_w(spec, &cur, original, loss)?;
    let mut gu = Vector::zeros(dim);
    for i in (0..k).rev() {
        let m = mixed_vjp(spec, &iterates[i], dataset, loss, &v)?;
        gu.axpy(-alpha, &m);
        if i > 0 {
            let hv = hessian_vec_product(spec, &iterates[i], dataset, loss, &v)?;
            v.axpy(-alpha, &hv);
        }
    }
    Ok(gu)
}

/// Fraction of points whose argmax output matches their label class.
pub fn accuracy(spec: &MlpSpec, params: &MlpParams, data: &Dataset) -> Result<f64, MlpError> {
    if data.is_empty() {
        return Err(MlpError::ShapeMismatch("dataset is empty".into()));
    }
    let mut correct = 0usize;
    for p in &data.points {
        let out = forward(spec, params, &p.input)?;
        let pred = argmax(out.as_slice());
        let label = match &p.label {
            Label::Class(c) => *c,
            Label::SoftLogits(l) => argmax(l.as_slice()),
        };
        if pred == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate() {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}
