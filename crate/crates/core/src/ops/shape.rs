//! Channel concatenation and slicing.

use crate::autograd::Var;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Concatenates NCHW tensors along the channel axis.
pub fn concat_channels<T: Scalar>(parts: &[Var<T>]) -> Var<T> {
    assert!(!parts.is_empty(), "concat of zero tensors");
    let (n, _, h, w) = parts[0].dims4();
    let chans: Vec<usize> = parts
        .iter()
        .map(|p| {
            let (pn, pc, ph, pw) = p.dims4();
            assert_eq!((pn, ph, pw), (n, h, w), "concat operands differ in batch or spatial size");
            pc
        })
        .collect();
    let total: usize = chans.iter().sum();
    let hw = h * w;
    let mut data = Vec::with_capacity(n * total * hw);
    for b in 0..n {
        for (p, &c) in parts.iter().zip(&chans) {
            data.extend_from_slice(&p.value().data()[b * c * hw..(b + 1) * c * hw]);
        }
    }
    Var::from_op(Tensor::from_vec(&[n, total, h, w], data), parts.to_vec(), move |gy, _| {
        let g = gy.data();
        let mut offset = 0;
        chans
            .iter()
            .map(|&c| {
                let mut d = Vec::with_capacity(n * c * hw);
                for b in 0..n {
                    let start = (b * total + offset) * hw;
                    d.extend_from_slice(&g[start..start + c * hw]);
                }
                offset += c;
                Some(Tensor::from_vec(&[n, c, h, w], d))
            })
            .collect()
    })
}

impl<T: Scalar> Var<T> {
    /// Channels `start..start + len`.
    pub fn narrow_channels(&self, start: usize, len: usize) -> Var<T> {
        let (n, c, h, w) = self.dims4();
        assert!(start + len <= c, "channel slice {start}+{len} out of {c}");
        let hw = h * w;
        let src = self.value().data();
        let mut data = Vec::with_capacity(n * len * hw);
        for b in 0..n {
            data.extend_from_slice(&src[(b * c + start) * hw..(b * c + start + len) * hw]);
        }
        Var::from_op(Tensor::from_vec(&[n, len, h, w], data), vec![self.clone()], move |gy, _| {
            let mut dx = Tensor::zeros(&[n, c, h, w]);
            let d = dx.data_mut();
            for b in 0..n {
                d[(b * c + start) * hw..(b * c + start + len) * hw]
                    .copy_from_slice(&gy.data()[b * len * hw..(b + 1) * len * hw]);
            }
            vec![Some(dx)]
        })
    }

    /// Splits the channel axis into `parts` equal chunks.
    pub fn chunk_channels(&self, parts: usize) -> Vec<Var<T>> {
        let c = self.dims4().1;
        assert!(parts > 0 && c % parts == 0, "cannot split {c} channels into {parts} chunks");
        let size = c / parts;
        (0..parts).map(|i| self.narrow_channels(i * size, size)).collect()
    }
}
