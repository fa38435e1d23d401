//! Sums and means.

use super::shape::check_axis;
use super::{numel, Result, Tensor};

impl Tensor {
    pub fn sum_all(&self) -> Result<Tensor> {
        let s = self.data().iter().sum();
        let n = self.numel();
        Tensor::from_op("sum_all", vec![1], vec![s], &[self], move |_, g, _| {
            vec![Some(vec![g[0]; n])]
        })
    }

    pub fn mean_all(&self) -> Result<Tensor> {
        let n = self.numel();
        self.sum_all()?.scale(1.0 / n as f64)
    }

    /// Sum over `axis`; the axis is kept with extent 1 when `keepdim`.
    pub fn sum_axis(&self, axis: usize, keepdim: bool) -> Result<Tensor> {
        check_axis("sum_axis", axis, self.rank())?;
        let outer = numel(&self.shape()[..axis]);
        let dim = self.shape()[axis];
        let inner = numel(&self.shape()[axis + 1..]);
        let src = self.data();
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..dim {
                let row = &src[(o * dim + k) * inner..(o * dim + k + 1) * inner];
                let acc = &mut data[o * inner..(o + 1) * inner];
                acc.iter_mut().zip(row).for_each(|(a, &x)| *a += x);
            }
        }
        let mut shape = self.shape().to_vec();
        if keepdim || shape.len() == 1 {
            shape[axis] = 1;
        } else {
            shape.remove(axis);
        }
        let n = self.numel();
        Tensor::from_op("sum_axis", shape, data, &[self], move |_, g, _| {
            let mut gi = vec![0.0; n];
            for o in 0..outer {
                for k in 0..dim {
                    gi[(o * dim + k) * inner..(o * dim + k + 1) * inner]
                        .copy_from_slice(&g[o * inner..(o + 1) * inner]);
                }
            }
            vec![Some(gi)]
        })
    }

    pub fn mean_axis(&self, axis: usize, keepdim: bool) -> Result<Tensor> {
        check_axis("mean_axis", axis, self.rank())?;
        let dim = self.shape()[axis];
        self.sum_axis(axis, keepdim)?.scale(1.0 / dim as f64)
    }
}
