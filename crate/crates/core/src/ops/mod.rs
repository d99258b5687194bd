//! Raw compute kernels for the recorded ops.
//!
//! Every kernel is a pure function of its inputs. Reductions for a given
//! output element always run in the same sequential order, so results are
//! bit-identical no matter how many threads the pool has.

pub mod conv;
pub mod corr;
pub mod resize;
pub mod warp;

use crate::error::{Error, Result};
use rayon::prelude::*;

/// Convolution / deconvolution geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub padding: usize,
}

impl ConvSpec {
    pub fn new(
        kernel: usize,
        stride: usize,
        in_channels: usize,
        out_channels: usize,
        padding: usize,
    ) -> Result<Self> {
        if kernel < 1 || stride < 1 {
            return Err(Error::Config(format!(
                "conv spec requires kernel >= 1 and stride >= 1, got k={kernel} s={stride}"
            )));
        }
        if in_channels < 1 || out_channels < 1 {
            return Err(Error::Config(format!(
                "conv spec requires at least one channel, got {in_channels}/{out_channels}"
            )));
        }
        Ok(ConvSpec {
            kernel,
            stride,
            in_channels,
            out_channels,
            padding,
        })
    }

    /// "Same"-style padding of floor(k/2).
    pub fn same(kernel: usize, stride: usize, in_channels: usize, out_channels: usize) -> Self {
        ConvSpec::new(kernel, stride, in_channels, out_channels, kernel / 2)
            .expect("valid same-padding spec")
    }

    /// Output extent of a convolution along one axis.
    pub fn conv_out(&self, input: usize) -> Result<usize> {
        let padded = input + 2 * self.padding;
        if padded < self.kernel {
            return Err(Error::Config(format!(
                "conv input extent {input} too small for kernel {} with padding {}",
                self.kernel, self.padding
            )));
        }
        Ok((padded - self.kernel) / self.stride + 1)
    }

    /// Output extent of a transposed convolution along one axis.
    pub fn deconv_out(&self, input: usize) -> Result<usize> {
        let grown = (input - 1) * self.stride + self.kernel;
        if grown < 2 * self.padding {
            return Err(Error::Config(format!(
                "deconv input extent {input} too small for padding {}",
                self.padding
            )));
        }
        Ok(grown - 2 * self.padding)
    }
}

/// Run `f` once per `row_len`-sized chunk of `out`, in parallel when the
/// buffer is large enough to pay for it. Chunk index is the row id.
pub(crate) fn for_each_row<S: Send>(
    out: &mut [S],
    row_len: usize,
    f: impl Fn(usize, &mut [S]) + Sync + Send,
) {
    debug_assert!(row_len > 0 && out.len() % row_len == 0);
    if out.len() >= 1 << 13 {
        out.par_chunks_mut(row_len)
            .enumerate()
            .for_each(|(i, row)| f(i, row));
    } else {
        for (i, row) in out.chunks_mut(row_len).enumerate() {
            f(i, row);
        }
    }
}
