//! Batched matrix product with broadcast leading dimensions.

use super::shape::{broadcast_shapes, broadcast_strides, for_each_broadcast};
use super::{numel, Result, Tensor};
use crate::error::TensorError;

/// `c[m,n] += a[m,k] * b[k,n]`
fn gemm_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            crow.iter_mut().zip(brow).for_each(|(c, &b)| *c += av * b);
        }
    }
}

/// `ga[m,k] += g[m,n] * b[k,n]^T`
fn grad_a_acc(g: &[f64], b: &[f64], ga: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            ga[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `gb[k,n] += a[m,k]^T * g[m,n]`
fn grad_b_acc(a: &[f64], g: &[f64], gb: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let gbrow = &mut gb[p * n..(p + 1) * n];
            gbrow.iter_mut().zip(grow).for_each(|(x, &y)| *x += av * y);
        }
    }
}

impl Tensor {
    /// `[..., m, k] x [..., k, n] -> [..., m, n]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (a, b) = (self, other);
        let mismatch = || TensorError::Shape {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        };
        if a.rank() < 2 || b.rank() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (a.shape()[a.rank() - 2], a.shape()[a.rank() - 1]);
        let (k2, n) = (b.shape()[b.rank() - 2], b.shape()[b.rank() - 1]);
        if k != k2 {
            return Err(mismatch());
        }
        let ba = &a.shape()[..a.rank() - 2];
        let bb = &b.shape()[..b.rank() - 2];
        let batch = broadcast_shapes("matmul", ba, bb).map_err(|_| mismatch())?;
        let sa: Vec<usize> = broadcast_strides(ba, &batch).iter().map(|s| s * m * k).collect();
        let sb: Vec<usize> = broadcast_strides(bb, &batch).iter().map(|s| s * k * n).collect();
        let nb = numel(&batch);
        let mut pairs = Vec::with_capacity(nb);
        for_each_broadcast(&batch, &sa, &sb, |_, ia, ib| pairs.push((ia, ib)));
        let mut data = vec![0.0; nb * m * n];
        for (bi, &(ia, ib)) in pairs.iter().enumerate() {
            gemm_acc(
                &a.data()[ia..ia + m * k],
                &b.data()[ib..ib + k * n],
                &mut data[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let mut shape = batch;
        shape.extend([m, n]);
        let (ac, bc) = (a.clone(), b.clone());
        Tensor::from_op("matmul", shape, data, &[a, b], move |_, g, needs| {
            let (ad, bd) = (ac.data(), bc.data());
            let mut ga = needs[0].then(|| vec![0.0; ad.len()]);
            let mut gb = needs[1].then(|| vec![0.0; bd.len()]);
            for (bi, &(ia, ib)) in pairs.iter().enumerate() {
                let gs = &g[bi * m * n..(bi + 1) * m * n];
                if let Some(ga) = ga.as_mut() {
                    grad_a_acc(gs, &bd[ib..ib + k * n], &mut ga[ia..ia + m * k], m, k, n);
                }
                if let Some(gb) = gb.as_mut() {
                    grad_b_acc(&ad[ia..ia + m * k], gs, &mut gb[ib..ib + k * n], m, k, n);
                }
            }
            vec![ga, gb]
        })
    }
}
