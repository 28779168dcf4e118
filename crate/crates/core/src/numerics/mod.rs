//! Dense `f32` tensors, a reverse-mode autodiff tape, the smoothed
//! cross-entropy objective and Adam with warmup / inverse-sqrt decay.

mod gemm;
mod ops;
mod optim;
mod params;
mod tape;
mod tensor;

pub use ops::dropout;
pub use optim::{Adam, AdamConfig, LrSchedule};
pub use params::{Bound, ParamId, ParamStore};
pub use tape::{Tape, Var};
pub use tensor::{Segments, Tensor};

/// Fixed sinusoidal position encodings, `[len × dim]`.
pub fn sinusoidal_positions(len: usize, dim: usize) -> Tensor {
    Tensor::from_fn(&[len, dim], |i| {
        let (pos, j) = ((i / dim) as f64, i % dim);
        let freq = 10_000f64.powf(-((j / 2 * 2) as f64) / dim as f64);
        let a = pos * freq;
        (if j % 2 == 0 { a.sin() } else { a.cos() }) as f32
    })
    .expect("finite encodings")
}
