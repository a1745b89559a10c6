use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// Sinusoidal code of `t`: `[sin(t·f_0..f_{h-1}), cos(t·f_0..f_{h-1})]`
/// with `h = dim/2` and geometric frequencies `f_i = 10000^(-i/(h-1))`.
pub fn sinusoidal_embed(t: usize, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::InvalidParameter(format!("embedding dimension {dim} must be positive and even")));
    }
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = if half == 1 { 1.0 } else { 10000f64.powf(-(i as f64) / (half - 1) as f64) };
        let arg = t as f64 * freq;
        out[i] = arg.sin();
        out[half + i] = arg.cos();
    }
    Ok(out)
}

/// `[n, dim]` batch of codes.
pub fn embed_batch<T: Float>(ts: &[usize], dim: usize) -> Result<Tensor<T>> {
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        data.extend(sinusoidal_embed(t, dim)?.into_iter().map(T::lit));
    }
    Ok(Tensor::new(vec![ts.len(), dim], data))
}
