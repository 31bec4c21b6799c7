//! Reference baselines: bicubic spatial upsampling for downscaling and
//! persistence for forecasting.

use crate::data_io::grid::GridField;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Keys cubic-convolution weights (a = −1/2) for fractional offset `s`.
fn keys_weights(s: f64) -> [f64; 4] {
    let s2 = s * s;
    let s3 = s2 * s;
    [
        (-s3 + 2.0 * s2 - s) * 0.5,
        (3.0 * s3 - 5.0 * s2 + 2.0) * 0.5,
        (-3.0 * s3 + 4.0 * s2 + s) * 0.5,
        (s3 - s2) * 0.5,
    ]
}

/// Interpolates one line of samples onto `factor·(n−1)+1` points.
///
/// Ghost samples use Keys' boundary condition `u₋₁ = 3u₀ − 3u₁ + u₂`,
/// which keeps quadratic reproduction up to the edges.
fn upsample_line(src: &[f64], factor: usize, out: &mut Vec<f64>) {
    let n = src.len();
    let at = |i: isize| -> f64 {
        if i < 0 {
            3.0 * src[0] - 3.0 * src[1] + src[2]
        } else if i as usize >= n {
            3.0 * src[n - 1] - 3.0 * src[n - 2] + src[n - 3]
        } else {
            src[i as usize]
        }
    };
    out.clear();
    for j in 0..factor * (n - 1) + 1 {
        let i = j / factor;
        let r = j % factor;
        if r == 0 {
            out.push(src[i]);
            continue;
        }
        let w = keys_weights(r as f64 / factor as f64);
        let i = i as isize;
        out.push(w[0] * at(i - 1) + w[1] * at(i) + w[2] * at(i + 1) + w[3] * at(i + 2));
    }
}

/// Separable bicubic interpolation of every frame and variable onto the
/// endpoint-preserving grid refined by `factor`.
pub fn bicubic_upsample<T: Scalar>(coarse: &GridField<T>, factor: usize) -> Result<GridField<T>> {
    if factor == 0 {
        return Err(Error::config("upsampling factor must be positive"));
    }
    let (nt, ny, nx, h) = coarse.dims();
    if nx < 4 || ny < 4 {
        return Err(Error::StencilTooShort {
            axis: if nx < 4 { "x" } else { "y" },
            needed: 4,
            found: nx.min(ny),
        });
    }
    let mut meta = coarse.meta().clone();
    meta.x = meta.x.refined(factor);
    meta.y = meta.y.refined(factor);
    let (fx, fy) = (meta.x.len, meta.y.len);
    let mut out = GridField::zeros(meta, coarse.names().to_vec())?;

    let mut line = Vec::new();
    let mut buf = Vec::new();
    let mut rows = vec![0.0; ny * fx];
    for t in 0..nt {
        for v in 0..h {
            for y in 0..ny {
                line.clear();
                line.extend((0..nx).map(|x| coarse.get(t, y, x, v).f64()));
                upsample_line(&line, factor, &mut buf);
                rows[y * fx..(y + 1) * fx].copy_from_slice(&buf);
            }
            for x in 0..fx {
                line.clear();
                line.extend((0..ny).map(|y| rows[y * fx + x]));
                upsample_line(&line, factor, &mut buf);
                for (y, &val) in buf.iter().enumerate().take(fy) {
                    out.set(t, y, x, v, T::lit(val));
                }
            }
        }
    }
    Ok(out)
}

/// Persistence forecast: the last history frame repeated `horizon` times.
pub fn persistence<T: Scalar>(history: &GridField<T>, horizon: usize) -> Result<GridField<T>> {
    if horizon == 0 {
        return Err(Error::config("forecast horizon must be at least 1"));
    }
    let last = history.frame(history.nt() - 1);
    let mut meta = history.meta().clone();
    meta.t.origin = history.meta().t.coord(history.nt());
    meta.t.len = horizon;
    let mut data = Vec::with_capacity(last.len() * horizon);
    for _ in 0..horizon {
        data.extend_from_slice(last);
    }
    GridField::new(meta, history.names().to_vec(), data)
}
