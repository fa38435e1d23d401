//! Row gathers and ragged-segment reductions. These let variable-length
//! sequences share one flat token matrix.

use std::rc::Rc;

use super::{Result, Tensor};
use crate::error::TensorError;

fn check_offsets(op: &str, offsets: &[usize], len: usize) -> Result<()> {
    let ok = offsets.first() == Some(&0)
        && offsets.last() == Some(&len)
        && offsets.windows(2).all(|w| w[0] < w[1]);
    if !ok {
        return Err(TensorError::Argument(format!(
            "{op}: offsets must rise strictly from 0 to {len}"
        )));
    }
    Ok(())
}

impl Tensor {
    /// Selects rows of a `[R, C]` tensor; indices may repeat.
    pub fn gather_rows(&self, index: &Rc<Vec<usize>>) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(TensorError::Argument("gather_rows needs a matrix".into()));
        }
        let (rows, cols) = (self.shape()[0], self.shape()[1]);
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(TensorError::Argument(format!(
                "gather_rows: index {bad} out of {rows} rows"
            )));
        }
        if index.is_empty() {
            return Err(TensorError::Argument("gather_rows: empty index".into()));
        }
        let src = self.data();
        let mut data = Vec::with_capacity(index.len() * cols);
        for &i in index.iter() {
            data.extend_from_slice(&src[i * cols..(i + 1) * cols]);
        }
        let index = Rc::clone(index);
        Tensor::from_op("gather_rows", vec![index.len(), cols], data, &[self], move |_, g, _| {
            let mut gi = vec![0.0; rows * cols];
            for (r, &i) in index.iter().enumerate() {
                gi[i * cols..(i + 1) * cols]
                    .iter_mut()
                    .zip(&g[r * cols..(r + 1) * cols])
                    .for_each(|(a, &b)| *a += b);
            }
            vec![Some(gi)]
        })
    }

    /// Softmax of a `[T]` vector within each segment `offsets[s]..offsets[s+1]`.
    pub fn segment_softmax(&self, offsets: &Rc<Vec<usize>>) -> Result<Tensor> {
        if self.rank() != 1 {
            return Err(TensorError::Argument("segment_softmax needs a vector".into()));
        }
        check_offsets("segment_softmax", offsets, self.numel())?;
        let x = self.data();
        let mut y = vec![0.0; x.len()];
        for w in offsets.windows(2) {
            let seg = &x[w[0]..w[1]];
            let max = seg.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (t, &v) in seg.iter().enumerate() {
                let e = (v - max).exp();
                y[w[0] + t] = e;
                z += e;
            }
            y[w[0]..w[1]].iter_mut().for_each(|v| *v /= z);
        }
        let offsets = Rc::clone(offsets);
        Tensor::from_op("segment_softmax", vec![x.len()], y, &[self], move |y, g, _| {
            let mut gx = vec![0.0; y.len()];
            for w in offsets.windows(2) {
                let dot: f64 = (w[0]..w[1]).map(|t| g[t] * y[t]).sum();
                for t in w[0]..w[1] {
                    gx[t] = y[t] * (g[t] - dot);
                }
            }
            vec![Some(gx)]
        })
    }

    /// Sums the rows of a `[T, C]` tensor within each segment, giving `[S, C]`.
    pub fn segment_sum(&self, offsets: &Rc<Vec<usize>>) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(TensorError::Argument("segment_sum needs a matrix".into()));
        }
        let cols = self.shape()[1];
        check_offsets("segment_sum", offsets, self.shape()[0])?;
        let segs = offsets.len() - 1;
        let src = self.data();
        let mut data = vec![0.0; segs * cols];
        for (s, w) in offsets.windows(2).enumerate() {
            let acc = &mut data[s * cols..(s + 1) * cols];
            for t in w[0]..w[1] {
                acc.iter_mut()
                    .zip(&src[t * cols..(t + 1) * cols])
                    .for_each(|(a, &b)| *a += b);
            }
        }
        let offsets = Rc::clone(offsets);
        let n = self.numel();
        Tensor::from_op("segment_sum", vec![segs, cols], data, &[self], move |_, g, _| {
            let mut gx = vec![0.0; n];
            for (s, w) in offsets.windows(2).enumerate() {
                for t in w[0]..w[1] {
                    gx[t * cols..(t + 1) * cols].copy_from_slice(&g[s * cols..(s + 1) * cols]);
                }
            }
            vec![Some(gx)]
        })
    }

    /// Attention pooling of ragged segments. Segment `s` of the `[T, C]` rows
    /// scores each row against query row `query_of[s]` of `q` (`[G, C]`),
    /// takes a softmax within the segment and returns the weighted row sum,
    /// giving `[S, C]`. The second result holds the `[T]` weights (not
    /// differentiable).
    pub fn segment_attend(
        &self,
        q: &Tensor,
        query_of: &Rc<Vec<usize>>,
        offsets: &Rc<Vec<usize>>,
    ) -> Result<(Tensor, Tensor)> {
        if self.rank() != 2 || q.rank() != 2 || q.shape()[1] != self.shape()[1] {
            return Err(TensorError::Shape {
                op: "segment_attend",
                lhs: self.shape().to_vec(),
                rhs: q.shape().to_vec(),
            });
        }
        let cols = self.shape()[1];
        check_offsets("segment_attend", offsets, self.shape()[0])?;
        let segs = offsets.len() - 1;
        if query_of.len() != segs || query_of.iter().any(|&g| g >= q.shape()[0]) {
            return Err(TensorError::Argument(format!(
                "segment_attend: need {segs} query indices below {}",
                q.shape()[0]
            )));
        }
        let (x, qd) = (self.data(), q.data());
        let row = |t: usize| &x[t * cols..(t + 1) * cols];
        let mut weights = vec![0.0; self.shape()[0]];
        let mut pooled = vec![0.0; segs * cols];
        for (s, w) in offsets.windows(2).enumerate() {
            let qs = &qd[query_of[s] * cols..(query_of[s] + 1) * cols];
            let a = &mut weights[w[0]..w[1]];
            for (t, v) in (w[0]..w[1]).zip(a.iter_mut()) {
                *v = row(t).iter().zip(qs).map(|(x, q)| x * q).sum();
            }
            let max = a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in a.iter_mut() {
                *v = (*v - max).exp();
                z += *v;
            }
            let acc = &mut pooled[s * cols..(s + 1) * cols];
            for (t, v) in (w[0]..w[1]).zip(a.iter_mut()) {
                *v /= z;
                acc.iter_mut().zip(row(t)).for_each(|(p, &x)| *p += *v * x);
            }
        }
        let attn = Tensor::new(&[weights.len()], weights.clone(), self.dtype())?;
        let (xc, qc) = (self.clone(), q.clone());
        let (query_of, offsets) = (Rc::clone(query_of), Rc::clone(offsets));
        let out = Tensor::from_op("segment_attend", vec![segs, cols], pooled, &[self, q], move |_, g, needs| {
            let (x, qd) = (xc.data(), qc.data());
            let mut gx = needs[0].then(|| vec![0.0; x.len()]);
            let mut gq = needs[1].then(|| vec![0.0; qd.len()]);
            let mut ds = Vec::new();
            for (s, w) in offsets.windows(2).enumerate() {
                let gs = &g[s * cols..(s + 1) * cols];
                let qi = query_of[s];
                ds.clear();
                ds.extend((w[0]..w[1]).map(|t| x[t * cols..(t + 1) * cols].iter().zip(gs).map(|(x, g)| x * g).sum::<f64>()));
                let mean: f64 = (w[0]..w[1]).zip(&ds).map(|(t, d)| weights[t] * d).sum();
                for (t, d) in (w[0]..w[1]).zip(ds.iter_mut()) {
                    *d = weights[t] * (*d - mean);
                }
                for (t, &d) in (w[0]..w[1]).zip(ds.iter()) {
                    let xr = &x[t * cols..(t + 1) * cols];
                    if let Some(gx) = gx.as_mut() {
                        let a = weights[t];
                        let qs = &qd[qi * cols..(qi + 1) * cols];
                        for c in 0..cols {
                            gx[t * cols + c] += a * gs[c] + d * qs[c];
                        }
                    }
                    if let Some(gq) = gq.as_mut() {
                        gq[qi * cols..(qi + 1) * cols].iter_mut().zip(xr).for_each(|(q, &x)| *q += d * x);
                    }
                }
            }
            vec![gx, gq]
        })?;
        Ok((out, attn))
    }
}
