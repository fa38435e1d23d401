//! Broadcasting binary arithmetic and elementwise unary maps.

use super::shape::{broadcast_shapes, broadcast_strides, for_each_broadcast};
use super::{Result, Tensor};

#[derive(Clone, Copy)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinOp {
    fn name(self) -> &'static str {
        match self {
            BinOp::Add => "add",
            BinOp::Sub => "sub",
            BinOp::Mul => "mul",
            BinOp::Div => "div",
        }
    }

    #[inline]
    fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            BinOp::Add => a + b,
            BinOp::Sub => a - b,
            BinOp::Mul => a * b,
            BinOp::Div => a / b,
        }
    }

    /// Partials (d/da, d/db) at (a, b).
    #[inline]
    fn partials(self, a: f64, b: f64) -> (f64, f64) {
        match self {
            BinOp::Add => (1.0, 1.0),
            BinOp::Sub => (1.0, -1.0),
            BinOp::Mul => (b, a),
            BinOp::Div => (1.0 / b, -a / (b * b)),
        }
    }
}

fn binary(op: BinOp, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() == b.shape() {
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| op.apply(x, y))
            .collect();
        let (ac, bc) = (a.clone(), b.clone());
        return Tensor::from_op(op.name(), a.shape().to_vec(), data, &[a, b], move |_, g, needs| {
            let (ad, bd) = (ac.data(), bc.data());
            let mut ga = needs[0].then(|| vec![0.0; g.len()]);
            let mut gb = needs[1].then(|| vec![0.0; g.len()]);
            for i in 0..g.len() {
                let (pa, pb) = op.partials(ad[i], bd[i]);
                if let Some(v) = ga.as_mut() {
                    v[i] = g[i] * pa;
                }
                if let Some(v) = gb.as_mut() {
                    v[i] = g[i] * pb;
                }
            }
            vec![ga, gb]
        });
    }
    let out = broadcast_shapes(op.name(), a.shape(), b.shape())?;
    let sa = broadcast_strides(a.shape(), &out);
    let sb = broadcast_strides(b.shape(), &out);
    let mut data = vec![0.0; out.iter().product()];
    let (ad, bd) = (a.data(), b.data());
    for_each_broadcast(&out, &sa, &sb, |o, ia, ib| data[o] = op.apply(ad[ia], bd[ib]));
    let (ac, bc) = (a.clone(), b.clone());
    let out_shape = out.clone();
    Tensor::from_op(op.name(), out, data, &[a, b], move |_, g, needs| {
        let (ad, bd) = (ac.data(), bc.data());
        let mut ga = needs[0].then(|| vec![0.0; ad.len()]);
        let mut gb = needs[1].then(|| vec![0.0; bd.len()]);
        for_each_broadcast(&out_shape, &sa, &sb, |o, ia, ib| {
            let (pa, pb) = op.partials(ad[ia], bd[ib]);
            if let Some(v) = ga.as_mut() {
                v[ia] += g[o] * pa;
            }
            if let Some(v) = gb.as_mut() {
                v[ib] += g[o] * pb;
            }
        });
        vec![ga, gb]
    })
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        binary(BinOp::Add, self, other)
    }
    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        binary(BinOp::Sub, self, other)
    }
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        binary(BinOp::Mul, self, other)
    }
    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        binary(BinOp::Div, self, other)
    }

    /// Elementwise map `y = f(x)` with derivative `df(x, y)`.
    pub(crate) fn map(
        &self,
        op: &'static str,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Result<Tensor> {
        let data: Vec<f64> = self.data().iter().map(|&x| f(x)).collect();
        let xc = self.clone();
        Tensor::from_op(op, self.shape().to_vec(), data, &[self], move |y, g, _| {
            let gx = xc
                .data()
                .iter()
                .zip(y)
                .zip(g)
                .map(|((&x, &y), &g)| g * df(x, y))
                .collect();
            vec![Some(gx)]
        })
    }

    pub fn scale(&self, c: f64) -> Result<Tensor> {
        self.map("scale", |x| x * c, move |_, _| c)
    }
    pub fn add_scalar(&self, c: f64) -> Result<Tensor> {
        self.map("add_scalar", |x| x + c, |_, _| 1.0)
    }
    pub fn neg(&self) -> Result<Tensor> {
        self.scale(-1.0)
    }
    pub fn exp(&self) -> Result<Tensor> {
        self.map("exp", f64::exp, |_, y| y)
    }
    pub fn ln(&self) -> Result<Tensor> {
        self.map("ln", f64::ln, |x, _| 1.0 / x)
    }
    pub fn sqrt(&self) -> Result<Tensor> {
        self.map("sqrt", f64::sqrt, |_, y| 0.5 / y)
    }
    pub fn square(&self) -> Result<Tensor> {
        self.map("square", |x| x * x, |x, _| 2.0 * x)
    }
    pub fn recip(&self) -> Result<Tensor> {
        self.map("recip", |x| 1.0 / x, |_, y| -y * y)
    }
}
