//! Affine coupling layers with hand-written backpropagation.
//!
//! All parameters live in one flat vector; each layer's scale and
//! translation networks are `tanh` MLPs with two hidden layers whose
//! matrices are column-major views into it. Batches are `d x n` matrices,
//! one column per point.

use nalgebra::{DMatrix, DMatrixView, DVector, DVectorView};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::domain::Bounds;
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
struct MlpLayout {
    inputs: usize,
    outputs: usize,
    hidden: usize,
    offset: usize,
}

impl MlpLayout {
    fn size(inputs: usize, outputs: usize, hidden: usize) -> usize {
        hidden * inputs + hidden + hidden * hidden + hidden + outputs * hidden + outputs
    }

    fn len(&self) -> usize {
        Self::size(self.inputs, self.outputs, self.hidden)
    }

    // Offsets of w1, b1, w2, b2, w3, b3.
    fn offsets(&self) -> [usize; 6] {
        let (a, b, h) = (self.inputs, self.outputs, self.hidden);
        let w1 = self.offset;
        let b1 = w1 + h * a;
        let w2 = b1 + h;
        let b2 = w2 + h * h;
        let w3 = b2 + h;
        let b3 = w3 + b * h;
        [w1, b1, w2, b2, w3, b3]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Coupling {
    cond: Vec<usize>,
    trans: Vec<usize>,
    scale_net: MlpLayout,
    shift_net: MlpLayout,
}

/// Activations of one MLP evaluation, kept for the backward pass.
struct MlpTrace {
    a1: DMatrix<f64>,
    a2: DMatrix<f64>,
    out: DMatrix<f64>,
}

struct LayerTrace {
    xa: DMatrix<f64>,
    xb: DMatrix<f64>,
    exp_s: DMatrix<f64>,
    s: MlpTrace,
    t: MlpTrace,
}

/// Input whitening followed by `layers` alternating affine couplings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CouplingFlow {
    dim: usize,
    hidden: usize,
    shift: Vec<f64>,
    scale: Vec<f64>,
    layers: Vec<Coupling>,
    params: Vec<f64>,
}

fn mat<'a>(p: &'a [f64], off: usize, rows: usize, cols: usize) -> DMatrixView<'a, f64> {
    DMatrixView::from_slice(&p[off..off + rows * cols], rows, cols)
}

fn vecv<'a>(p: &'a [f64], off: usize, n: usize) -> DVectorView<'a, f64> {
    DVectorView::from_slice(&p[off..off + n], n)
}

/// `tanh` through a single `exp`; noticeably cheaper than `f64::tanh`.
#[inline]
fn fast_tanh(x: f64) -> f64 {
    if x.abs() < 1e-3 {
        // Series avoids cancellation near zero.
        let x2 = x * x;
        x * (1.0 - x2 / 3.0 + 2.0 * x2 * x2 / 15.0)
    } else {
        let e = (-2.0 * x.abs()).exp();
        ((1.0 - e) / (1.0 + e)).copysign(x)
    }
}

fn add_bias(m: &mut DMatrix<f64>, b: &DVectorView<f64>) {
    for mut col in m.column_iter_mut() {
        col += b;
    }
}

impl CouplingFlow {
    /// Whitening from `bounds` (zero mean, unit range per axis), then
    /// `layers` couplings of hidden width `hidden`. Output layers start at
    /// zero so the couplings are initially the identity.
    pub fn new(bounds: &Bounds, layers: usize, hidden: usize, rng: &mut Rng) -> Result<Self> {
        let dim = bounds.dim();
        if dim < 2 {
            return Err(Error::InvalidInput("a coupling flow needs at least 2 dimensions".into()));
        }
        if layers == 0 || hidden == 0 {
            return Err(Error::InvalidInput("flow needs at least one layer and positive width".into()));
        }
        if (0..dim).any(|j| !(bounds.width(j) > 0.0)) {
            return Err(Error::InvalidInput("flow whitening needs bounds of positive width".into()));
        }
        let mut couplings = Vec::with_capacity(layers);
        let mut offset = 0;
        for l in 0..layers {
            let cond: Vec<usize> = (0..dim).filter(|j| j % 2 == l % 2).collect();
            let trans: Vec<usize> = (0..dim).filter(|j| j % 2 != l % 2).collect();
            let (a, b) = (cond.len(), trans.len());
            let scale_net = MlpLayout { inputs: a, outputs: b, hidden, offset };
            offset += scale_net.len();
            let shift_net = MlpLayout { inputs: a, outputs: b, hidden, offset };
            offset += shift_net.len();
            couplings.push(Coupling { cond, trans, scale_net, shift_net });
        }
        let mut params = vec![0.0; offset];
        for c in &couplings {
            for net in [c.scale_net, c.shift_net] {
                let [w1, _, w2, _, _, _] = net.offsets();
                let (a, h) = (net.inputs, net.hidden);
                let lim1 = (6.0 / (a + h) as f64).sqrt();
                for p in &mut params[w1..w1 + h * a] {
                    *p = rng.random_range(-lim1..lim1);
                }
                let lim2 = (6.0 / (2 * h) as f64).sqrt();
                for p in &mut params[w2..w2 + h * h] {
                    *p = rng.random_range(-lim2..lim2);
                }
            }
        }
        Ok(Self {
            dim,
            hidden,
            shift: bounds.center(),
            scale: (0..dim).map(|j| bounds.width(j)).collect(),
            layers: couplings,
            params,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let expected: usize = self.layers.iter().map(|c| c.scale_net.len() + c.shift_net.len()).sum();
        if self.params.len() != expected
            || self.shift.len() != self.dim
            || self.scale.len() != self.dim
            || self.scale.iter().any(|s| !(*s > 0.0))
        {
            return Err(Error::InvalidInput("inconsistent coupling flow record".into()));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// `log |det|` of the whitening step alone.
    pub fn whitening_logdet(&self) -> f64 {
        -self.scale.iter().map(|s| s.ln()).sum::<f64>()
    }

    fn mlp(&self, net: &MlpLayout, x: &DMatrix<f64>) -> MlpTrace {
        let p = &self.params;
        let [w1, b1, w2, b2, w3, b3] = net.offsets();
        let (a, b, h) = (net.inputs, net.outputs, net.hidden);
        let mut a1 = mat(p, w1, h, a) * x;
        add_bias(&mut a1, &vecv(p, b1, h));
        a1.apply(|v| *v = fast_tanh(*v));
        let mut a2 = mat(p, w2, h, h) * &a1;
        add_bias(&mut a2, &vecv(p, b2, h));
        a2.apply(|v| *v = fast_tanh(*v));
        let mut out = mat(p, w3, b, h) * &a2;
        add_bias(&mut out, &vecv(p, b3, b));
        MlpTrace { a1, a2, out }
    }

    /// Writes parameter gradients into `grad` and returns `dL/dx`.
    fn mlp_backward(
        &self,
        net: &MlpLayout,
        x: &DMatrix<f64>,
        tr: &MlpTrace,
        d_out: &DMatrix<f64>,
        grad: &mut [f64],
    ) -> DMatrix<f64> {
        let p = &self.params;
        let [w1, b1, w2, b2, w3, b3] = net.offsets();
        let (a, b, h) = (net.inputs, net.outputs, net.hidden);
        let put = |grad: &mut [f64], off: usize, m: &DMatrix<f64>| {
            for (g, v) in grad[off..off + m.len()].iter_mut().zip(m.as_slice()) {
                *g += v;
            }
        };
        put(grad, w3, &(d_out * tr.a2.transpose()));
        put(grad, b3, &DMatrix::from_column_slice(b, 1, d_out.column_sum().as_slice()));
        let mut dz2 = mat(p, w3, b, h).transpose() * d_out;
        dz2.zip_apply(&tr.a2, |g, a| *g *= 1.0 - a * a);
        put(grad, w2, &(&dz2 * tr.a1.transpose()));
        put(grad, b2, &DMatrix::from_column_slice(h, 1, dz2.column_sum().as_slice()));
        let mut dz1 = mat(p, w2, h, h).transpose() * &dz2;
        dz1.zip_apply(&tr.a1, |g, a| *g *= 1.0 - a * a);
        put(grad, w1, &(&dz1 * x.transpose()));
        put(grad, b1, &DMatrix::from_column_slice(h, 1, dz1.column_sum().as_slice()));
        mat(p, w1, h, a).transpose() * dz1
    }

    fn whiten(&self, z: &DMatrix<f64>) -> DMatrix<f64> {
        let mut u = z.clone();
        for (j, mut row) in u.row_iter_mut().enumerate() {
            row.apply(|v| *v = (*v - self.shift[j]) / self.scale[j]);
        }
        u
    }

    fn inverse_traced(&self, z: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>, Vec<LayerTrace>) {
        let mut x = self.whiten(z);
        let n = x.ncols();
        let mut logdet = DVector::from_element(n, self.whitening_logdet());
        let mut traces = Vec::with_capacity(self.layers.len());
        for c in &self.layers {
            let xa = x.select_rows(&c.cond);
            let xb = x.select_rows(&c.trans);
            let s = self.mlp(&c.scale_net, &xa);
            let t = self.mlp(&c.shift_net, &xa);
            let exp_s = s.out.map(f64::exp);
            let yb = xb.component_mul(&exp_s) + &t.out;
            for (k, &r) in c.trans.iter().enumerate() {
                x.row_mut(r).copy_from(&yb.row(k));
            }
            logdet += s.out.row_sum().transpose();
            traces.push(LayerTrace { xa, xb, exp_s, s, t });
        }
        (x, logdet, traces)
    }

    /// `w = g^-1(z)` for each column, with the per-column log-determinant.
    pub fn inverse_batch(&self, z: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>) {
        let (w, ld, _) = self.inverse_traced(z);
        (w, ld)
    }

    /// `z = g(w)` for each column.
    pub fn forward_batch(&self, w: &DMatrix<f64>) -> DMatrix<f64> {
        let mut y = w.clone();
        for c in self.layers.iter().rev() {
            let ya = y.select_rows(&c.cond);
            let yb = y.select_rows(&c.trans);
            let s = self.mlp(&c.scale_net, &ya).out;
            let t = self.mlp(&c.shift_net, &ya).out;
            let mut xb = yb - t;
            xb.zip_apply(&s, |v, s| *v *= (-s).exp());
            for (k, &r) in c.trans.iter().enumerate() {
                y.row_mut(r).copy_from(&xb.row(k));
            }
        }
        for (j, mut row) in y.row_iter_mut().enumerate() {
            row.apply(|v| *v = *v * self.scale[j] + self.shift[j]);
        }
        y
    }

    pub fn forward(&self, w: &[f64]) -> Vec<f64> {
        self.forward_batch(&DMatrix::from_column_slice(self.dim, 1, w)).as_slice().to_vec()
    }

    pub fn inverse(&self, z: &[f64]) -> (Vec<f64>, f64) {
        let (w, ld) = self.inverse_batch(&DMatrix::from_column_slice(self.dim, 1, z));
        (w.as_slice().to_vec(), ld[0])
    }

    /// Backpropagates `dL/dw` (per column) and `dL/dlogdet` (per point)
    /// from the inverse pass; returns the flat parameter gradient.
    pub(crate) fn inverse_with_grad<F>(&self, z: &DMatrix<f64>, loss: F) -> (f64, Vec<f64>)
    where
        F: FnOnce(&DMatrix<f64>, &DVector<f64>) -> (f64, DMatrix<f64>, DVector<f64>),
    {
        let (w, logdet, traces) = self.inverse_traced(z);
        let (value, mut g, g_logdet) = loss(&w, &logdet);
        let g_ld_row = g_logdet.transpose();
        let mut grad = vec![0.0; self.params.len()];
        for (c, tr) in self.layers.iter().zip(traces.iter()).rev() {
            let g_yb = g.select_rows(&c.trans);
            // y_b = x_b * exp(s) + t, and log det gains sum(s).
            let mut d_s = g_yb.component_mul(&tr.xb).component_mul(&tr.exp_s);
            for mut row in d_s.row_iter_mut() {
                row += &g_ld_row;
            }
            let g_xb = g_yb.component_mul(&tr.exp_s);
            let dxa_s = self.mlp_backward(&c.scale_net, &tr.xa, &tr.s, &d_s, &mut grad);
            let dxa_t = self.mlp_backward(&c.shift_net, &tr.xa, &tr.t, &g_yb, &mut grad);
            let g_xa = g.select_rows(&c.cond) + dxa_s + dxa_t;
            for (k, &r) in c.trans.iter().enumerate() {
                g.row_mut(r).copy_from(&g_xb.row(k));
            }
            for (k, &r) in c.cond.iter().enumerate() {
                g.row_mut(r).copy_from(&g_xa.row(k));
            }
        }
        (value, grad)
    }
}
