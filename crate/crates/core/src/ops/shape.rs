use crate::error::{ensure, Result};
use crate::tape::Var;
use crate::tensor::Tensor;

impl<'t> Var<'t> {
    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let out = x.reshape(shape)?;
        Ok(self.tape().record("reshape", out, &[self], |ctx| {
            let in_shape = ctx.inputs[0].shape();
            vec![Some(Tensor::from_parts(in_shape.to_vec(), ctx.grad.data().to_vec()))]
        }))
    }

    /// Output axis `i` is input axis `perm[i]`.
    pub fn permute(self, perm: &[usize]) -> Result<Var<'t>> {
        let out = self.value().permute(perm)?;
        let mut inverse = vec![0; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        Ok(self.tape().record("permute", out, &[self], move |ctx| {
            vec![Some(ctx.grad.permute(&inverse).expect("inverse permutation"))]
        }))
    }

    /// Rows `[start, start+len)` along axis 0.
    pub fn narrow0(self, start: usize, len: usize) -> Result<Var<'t>> {
        let shape = self.shape();
        ensure!(
            len > 0 && start + len <= shape[0],
            "narrow0: range {start}..{} outside axis of length {}",
            start + len,
            shape[0]
        );
        let row: usize = shape[1..].iter().product();
        let mut out_shape = shape.clone();
        out_shape[0] = len;
        let data = self.value().data()[start * row..(start + len) * row].to_vec();
        Ok(self.tape().record(
            "narrow0",
            Tensor::from_parts(out_shape, data),
            &[self],
            move |ctx| {
                let mut g = Tensor::zeros(ctx.inputs[0].shape());
                g.data_mut()[start * row..(start + len) * row].copy_from_slice(ctx.grad.data());
                vec![Some(g)]
            },
        ))
    }
}
