//! Monotone piecewise cubic Hermite interpolation (Fritsch–Carlson family).

/// Shape-preserving cubic interpolant through strictly increasing knots.
///
/// Interior slopes are weighted harmonic means of the adjacent secants (zero
/// at local extrema); endpoint slopes use the one-sided three-point formula
/// with sign clamping. Outside the knot range the interpolant is held at the
/// boundary values.
#[derive(Clone, Debug)]
pub struct Pchip {
    x: Vec<f64>,
    y: Vec<f64>,
    d: Vec<f64>,
}

fn endpoint_slope(h0: f64, h1: f64, s0: f64, s1: f64) -> f64 {
    let d = ((2.0 * h0 + h1) * s0 - h0 * s1) / (h0 + h1);
    if d.signum() != s0.signum() || s0 == 0.0 {
        0.0
    } else if s0.signum() != s1.signum() && d.abs() > 3.0 * s0.abs() {
        3.0 * s0
    } else {
        d
    }
}

impl Pchip {
    /// `x` must be strictly increasing and non-empty, `y` the same length.
    pub fn new(x: Vec<f64>, y: Vec<f64>) -> Self {
        assert!(!x.is_empty() && x.len() == y.len(), "pchip needs matching non-empty knots");
        let n = x.len();
        if n == 1 {
            return Pchip { x, y, d: vec![0.0] };
        }
        let h: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
        debug_assert!(h.iter().all(|v| *v > 0.0));
        let delta: Vec<f64> = (0..n - 1).map(|k| (y[k + 1] - y[k]) / h[k]).collect();

        let mut d = vec![0.0; n];
        if n == 2 {
            d[0] = delta[0];
            d[1] = delta[0];
            return Pchip { x, y, d };
        }
        for k in 1..n - 1 {
            let (s1, s2) = (delta[k - 1], delta[k]);
            if s1 == 0.0 || s2 == 0.0 || s1.signum() != s2.signum() {
                d[k] = 0.0;
            } else {
                let w1 = 2.0 * h[k] + h[k - 1];
                let w2 = h[k] + 2.0 * h[k - 1];
                d[k] = (w1 + w2) / (w1 / s1 + w2 / s2);
            }
        }
        d[0] = endpoint_slope(h[0], h[1], delta[0], delta[1]);
        d[n - 1] = endpoint_slope(h[n - 2], h[n - 3], delta[n - 2], delta[n - 3]);
        Pchip { x, y, d }
    }

    pub fn eval(&self, xq: f64) -> f64 {
        let n = self.x.len();
        if xq <= self.x[0] {
            return self.y[0];
        }
        if xq >= self.x[n - 1] {
            return self.y[n - 1];
        }
        let k = self.x.partition_point(|&xi| xi <= xq) - 1;
        let h = self.x[k + 1] - self.x[k];
        let t = (xq - self.x[k]) / h;
        let t2 = t * t;
        let t3 = t2 * t;
        let h00 = 2.0 * t3 - 3.0 * t2 + 1.0;
        let h10 = t3 - 2.0 * t2 + t;
        let h01 = -2.0 * t3 + 3.0 * t2;
        let h11 = t3 - t2;
        let v = h00 * self.y[k] + h10 * h * self.d[k] + h01 * self.y[k + 1] + h11 * h * self.d[k + 1];
        // The interpolant stays within its knot values; clamping removes rounding overshoot.
        v.clamp(self.y[k].min(self.y[k + 1]), self.y[k].max(self.y[k + 1]))
    }
}
