use super::{calendar_features, TimeSeriesDataset};
use crate::error::{PirError, Result};
use crate::tensor::Tensor;

/// One forecasting instance: `L_in` steps of history and the `L_out` steps
/// that follow, both channel-major (`N x L`).
#[derive(Clone, Debug, PartialEq)]
pub struct WindowInstance {
    /// Position within its split, starting at 0.
    pub id: usize,
    pub x: Tensor,
    pub y: Tensor,
    /// Calendar features of the target steps, `L_out x 5`.
    pub exo: Tensor,
    /// Absolute row of the first target step in the unsplit series.
    pub origin: usize,
}

/// Sliding windows over `dataset`; consecutive windows start `stride` rows apart.
pub fn make_windows(
    dataset: &TimeSeriesDataset,
    l_in: usize,
    l_out: usize,
    stride: usize,
) -> Result<Vec<WindowInstance>> {
    if l_in == 0 || l_out == 0 || stride == 0 {
        return Err(PirError::invalid("window lengths and stride must be positive"));
    }
    let t = dataset.len();
    if t < l_in + l_out {
        return Err(PirError::invalid(format!(
            "series of {t} rows is shorter than L_in + L_out = {}",
            l_in + l_out
        )));
    }
    let n = dataset.num_channels();
    let v = dataset.values().data();
    let block = |start: usize, len: usize| {
        let mut out = Vec::with_capacity(n * len);
        for c in 0..n {
            out.extend((start..start + len).map(|i| v[i * n + c]));
        }
        Tensor::matrix(n, len, out).expect("window shape")
    };
    Ok((0..=t - l_in - l_out)
        .step_by(stride)
        .enumerate()
        .map(|(id, s)| WindowInstance {
            id,
            x: block(s, l_in),
            y: block(s + l_in, l_out),
            exo: calendar_features(&dataset.timestamps()[s + l_in..s + l_in + l_out]),
            origin: dataset.start_index() + s + l_in,
        })
        .collect())
}
