use ndarray::{Array1, Array2, Axis, Zip};

pub(crate) const RMS_EPS: f64 = 1e-6;

/// Row-wise RMS normalization; returns the output and `1/rms` per row.
pub(crate) fn rmsnorm(x: &Array2<f64>, gain: &Array1<f64>) -> (Array2<f64>, Array1<f64>) {
    let dm = x.ncols() as f64;
    let inv = x.map_axis(Axis(1), |row| 1.0 / (row.iter().map(|v| v * v).sum::<f64>() / dm + RMS_EPS).sqrt());
    let mut y = x.clone();
    Zip::from(y.rows_mut()).and(&inv).for_each(|mut row, &s| {
        row *= s;
        row *= gain;
    });
    (y, inv)
}

/// Returns `(dx, dgain)`.
pub(crate) fn rmsnorm_backward(
    dy: &Array2<f64>,
    x: &Array2<f64>,
    inv: &Array1<f64>,
    gain: &Array1<f64>,
) -> (Array2<f64>, Array1<f64>) {
    let dm = x.ncols() as f64;
    let mut dgain = Array1::zeros(gain.len());
    let mut dx = Array2::zeros(x.raw_dim());
    Zip::from(dx.rows_mut())
        .and(dy.rows())
        .and(x.rows())
        .and(inv)
        .for_each(|mut dxr, dyr, xr, &s| {
            let gy = &dyr * gain;
            let dot: f64 = gy.iter().zip(xr.iter()).map(|(a, b)| a * b).sum();
            let coef = s * s * s * dot / dm;
            Zip::from(&mut dxr).and(&gy).and(&xr).for_each(|d, &g, &xv| *d = s * g - xv * coef);
            Zip::from(&mut dgain).and(&dyr).and(&xr).for_each(|dg, &d, &xv| *dg += d * xv * s);
        });
    (dx, dgain)
}

/// Rotary embedding tables for one head dimension.
#[derive(Debug, Clone)]
pub(crate) struct Rope {
    inv_freq: Vec<f64>,
}

impl Rope {
    pub(crate) fn new(head_dim: usize, theta: f64) -> Self {
        let half = head_dim / 2;
        Self {
            inv_freq: (0..half).map(|i| theta.powf(-2.0 * i as f64 / head_dim as f64)).collect(),
        }
    }

    /// Rotates every head of every row in place. Pairs are `(i, i + D/2)`.
    /// `inverse` applies the transpose rotation (used for gradients).
    pub(crate) fn apply(&self, x: &mut [f64], positions: &[usize], heads: usize, inverse: bool) {
        let half = self.inv_freq.len();
        let d = 2 * half;
        let sign = if inverse { -1.0 } else { 1.0 };
        for (row, &pos) in x.chunks_mut(heads * d).zip(positions) {
            for (i, f) in self.inv_freq.iter().enumerate() {
                let (sin, cos) = (pos as f64 * f).sin_cos();
                let sin = sign * sin;
                for head in row.chunks_mut(d) {
                    let (a, b) = (head[i], head[i + half]);
                    head[i] = a * cos - b * sin;
                    head[i + half] = a * sin + b * cos;
                }
            }
        }
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub(crate) fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
pub(crate) fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}
