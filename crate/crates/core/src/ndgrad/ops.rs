//! Differentiable ops recorded on a [`Tape`]. Forward values are computed
//! eagerly; each op registers the rule that maps the upstream gradient to
//! gradients of its inputs.

use super::matrix::Matrix;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

fn same_shape(op: &'static str, a: &Matrix, b: &Matrix) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

impl<'p> Tape<'p> {
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.custom(
            "matmul",
            &[a, b],
            value,
            Box::new(|ctx| {
                let (a, b, g) = (ctx.inputs[0], ctx.inputs[1], ctx.grad_out);
                vec![
                    ctx.needs[0].then(|| g.matmul_t(b).expect("shape checked")),
                    ctx.needs[1].then(|| a.t_matmul(g).expect("shape checked")),
                ]
            }),
        ))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul_t(self.value(b))?;
        Ok(self.custom(
            "matmul_t",
            &[a, b],
            value,
            Box::new(|ctx| {
                let (a, b, g) = (ctx.inputs[0], ctx.inputs[1], ctx.grad_out);
                vec![
                    ctx.needs[0].then(|| g.matmul(b).expect("shape checked")),
                    ctx.needs[1].then(|| g.t_matmul(a).expect("shape checked")),
                ]
            }),
        ))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        self.custom(
            "transpose",
            &[a],
            value,
            Box::new(|ctx| vec![Some(ctx.grad_out.transpose())]),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a), self.value(b))?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.custom(
            "add",
            &[a, b],
            value,
            Box::new(|ctx| {
                vec![
                    ctx.needs[0].then(|| ctx.grad_out.clone()),
                    ctx.needs[1].then(|| ctx.grad_out.clone()),
                ]
            }),
        ))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("sub", self.value(a), self.value(b))?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.custom(
            "sub",
            &[a, b],
            value,
            Box::new(|ctx| {
                vec![
                    ctx.needs[0].then(|| ctx.grad_out.clone()),
                    ctx.needs[1].then(|| ctx.grad_out.map(|g| -g)),
                ]
            }),
        ))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.value(a), self.value(b))?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.custom(
            "mul",
            &[a, b],
            value,
            Box::new(|ctx| {
                let (a, b, g) = (ctx.inputs[0], ctx.inputs[1], ctx.grad_out);
                vec![
                    ctx.needs[0].then(|| g.zip_map(b, |g, y| g * y)),
                    ctx.needs[1].then(|| g.zip_map(a, |g, x| g * x)),
                ]
            }),
        ))
    }

    /// Elementwise product with a constant matrix.
    pub fn mul_const(&mut self, a: Var, c: Matrix) -> Result<Var> {
        same_shape("mul_const", self.value(a), &c)?;
        let value = self.value(a).zip_map(&c, |x, y| x * y);
        Ok(self.custom(
            "mul_const",
            &[a],
            value,
            Box::new(move |ctx| vec![Some(ctx.grad_out.zip_map(&c, |g, y| g * y))]),
        ))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x * s);
        self.custom(
            "scale",
            &[a],
            value,
            Box::new(move |ctx| vec![Some(ctx.grad_out.map(|g| g * s))]),
        )
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x + s);
        self.custom(
            "add_scalar",
            &[a],
            value,
            Box::new(|ctx| vec![Some(ctx.grad_out.clone())]),
        )
    }

    /// Broadcast-adds a `1×n` bias to every row of an `m×n` input.
    pub fn add_row_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (x, b) = (self.value(a), self.value(bias));
        if b.rows() != 1 || b.cols() != x.cols() {
            return Err(Error::dim(
                "add_row_bias",
                format!("bias {:?} for input {:?}", b.shape(), x.shape()),
            ));
        }
        let mut value = x.clone();
        for r in 0..value.rows() {
            for (v, bb) in value.row_mut(r).iter_mut().zip(b.as_slice()) {
                *v += bb;
            }
        }
        Ok(self.custom(
            "add_row_bias",
            &[a, bias],
            value,
            Box::new(|ctx| {
                let g = ctx.grad_out;
                let bias_grad = ctx.needs[1].then(|| {
                    let mut acc = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (s, v) in acc.as_mut_slice().iter_mut().zip(g.row(r)) {
                            *s += v;
                        }
                    }
                    acc
                });
                vec![ctx.needs[0].then(|| g.clone()), bias_grad]
            }),
        ))
    }

    /// `max(0, x)`; the subgradient at exactly 0 is 0.
    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        self.custom(
            "relu",
            &[a],
            value,
            Box::new(|ctx| {
                vec![Some(
                    ctx.grad_out
                        .zip_map(ctx.inputs[0], |g, x| if x > 0.0 { g } else { 0.0 }),
                )]
            }),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        self.custom(
            "sigmoid",
            &[a],
            value,
            Box::new(|ctx| {
                vec![Some(
                    ctx.grad_out.zip_map(ctx.output, |g, s| g * s * (1.0 - s)),
                )]
            }),
        )
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x * x);
        self.custom(
            "square",
            &[a],
            value,
            Box::new(|ctx| {
                vec![Some(
                    ctx.grad_out.zip_map(ctx.inputs[0], |g, x| 2.0 * g * x),
                )]
            }),
        )
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.as_slice().iter().any(|&v| v <= 0.0) {
            return Err(Error::Numeric("sqrt of a non-positive value".into()));
        }
        let value = x.map(f64::sqrt);
        Ok(self.custom(
            "sqrt",
            &[a],
            value,
            Box::new(|ctx| {
                vec![Some(
                    ctx.grad_out.zip_map(ctx.output, |g, s| 0.5 * g / s),
                )]
            }),
        ))
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.as_slice().iter().any(|&v| v <= 0.0) {
            return Err(Error::Numeric("log of a non-positive value".into()));
        }
        let value = x.map(f64::ln);
        Ok(self.custom(
            "ln",
            &[a],
            value,
            Box::new(|ctx| vec![Some(ctx.grad_out.zip_map(ctx.inputs[0], |g, x| g / x))]),
        ))
    }

    /// `max(x, floor)`; gradient passes only where `x > floor`.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Var {
        let value = self.value(a).map(|x| x.max(floor));
        self.custom(
            "clamp_min",
            &[a],
            value,
            Box::new(move |ctx| {
                vec![Some(
                    ctx.grad_out
                        .zip_map(ctx.inputs[0], |g, x| if x > floor { g } else { 0.0 }),
                )]
            }),
        )
    }

    /// Horizontal concatenation `[a | b]`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.rows() != y.rows() {
            return Err(Error::dim(
                "concat_cols",
                format!("{} rows vs {} rows", x.rows(), y.rows()),
            ));
        }
        let (p, q) = (x.cols(), y.cols());
        let mut value = Matrix::zeros(x.rows(), p + q);
        for r in 0..x.rows() {
            let row = value.row_mut(r);
            row[..p].copy_from_slice(x.row(r));
            row[p..].copy_from_slice(y.row(r));
        }
        Ok(self.custom(
            "concat_cols",
            &[a, b],
            value,
            Box::new(move |ctx| {
                let g = ctx.grad_out;
                let split = |lo: usize, w: usize| {
                    let mut out = Matrix::zeros(g.rows(), w);
                    for r in 0..g.rows() {
                        out.row_mut(r).copy_from_slice(&g.row(r)[lo..lo + w]);
                    }
                    out
                };
                vec![
                    ctx.needs[0].then(|| split(0, p)),
                    ctx.needs[1].then(|| split(p, q)),
                ]
            }),
        ))
    }

    /// `Σ mask ⊙ (pred − target)²` as a 1x1 value.
    pub fn masked_sq_error(&mut self, pred: Var, target: Var, mask: Var) -> Result<Var> {
        let (p, t, m) = (self.value(pred), self.value(target), self.value(mask));
        same_shape("masked_sq_error", p, t)?;
        same_shape("masked_sq_error", p, m)?;
        let mut total = 0.0;
        for ((&p, &t), &m) in p.as_slice().iter().zip(t.as_slice()).zip(m.as_slice()) {
            if m != 0.0 {
                let d = p - t;
                total += m * d * d;
            }
        }
        Ok(self.custom(
            "masked_sq_error",
            &[pred, target, mask],
            Matrix::scalar(total),
            Box::new(|ctx| {
                let (p, t, m) = (ctx.inputs[0], ctx.inputs[1], ctx.inputs[2]);
                let g = ctx.grad_out.item();
                let mut dp = Matrix::zeros(p.rows(), p.cols());
                for (k, d) in dp.as_mut_slice().iter_mut().enumerate() {
                    let w = m.as_slice()[k];
                    if w != 0.0 {
                        *d = 2.0 * g * w * (p.as_slice()[k] - t.as_slice()[k]);
                    }
                }
                let dt = ctx.needs[1].then(|| dp.map(|v| -v));
                vec![ctx.needs[0].then_some(dp), dt, None]
            }),
        ))
    }

    /// Sum of all entries as a 1x1 value.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).sum());
        self.custom(
            "sum",
            &[a],
            value,
            Box::new(|ctx| {
                let x = ctx.inputs[0];
                vec![Some(Matrix::filled(x.rows(), x.cols(), ctx.grad_out.item()))]
            }),
        )
    }

    /// Per-row sums: `m×n → m×1`.
    pub fn row_sums(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let data = (0..x.rows()).map(|r| x.row(r).iter().sum()).collect();
        let value = Matrix::from_vec(x.rows(), 1, data).expect("row count");
        self.custom(
            "row_sums",
            &[a],
            value,
            Box::new(|ctx| {
                let x = ctx.inputs[0];
                let mut out = Matrix::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    let g = ctx.grad_out.get(r, 0);
                    out.row_mut(r).fill(g);
                }
                vec![Some(out)]
            }),
        )
    }
}

/// Logistic function, kept strictly inside (0, 1) when saturated.
pub fn sigmoid(x: f64) -> f64 {
    let s = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    s.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}
