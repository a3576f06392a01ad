#![allow(dead_code)]

use pgap::nn::GradientField;
use pgap::quality::{s1, s2, SsimConstants};
use pgap::Image;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn row(values: Vec<f64>) -> Image {
    Image::new_unbounded(1, values.len(), 1, values).unwrap()
}

pub fn shaped_like(x: &Image, data: Vec<f64>) -> Image {
    Image::new_unbounded(x.height(), x.width(), x.channels(), data).unwrap()
}

pub fn field_like(x: &Image, data: Vec<f64>) -> GradientField {
    GradientField {
        height: x.height(),
        width: x.width(),
        channels: x.channels(),
        data,
    }
}

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn centered(v: &[f64]) -> Vec<f64> {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| x - m).collect()
}

/// Largest `t` in `[0, hi]` with `ok(t)`, assuming `ok` holds on a prefix.
fn bisect(mut ok_lo: f64, mut bad_hi: f64, ok: impl Fn(f64) -> bool) -> f64 {
    for _ in 0..200 {
        let mid = 0.5 * (ok_lo + bad_hi);
        if ok(mid) {
            ok_lo = mid;
        } else {
            bad_hi = mid;
        }
    }
    ok_lo
}

/// Feasible set `{y : S1(x,y) ≥ 1−ε1², S2(x,y) ≥ 1−ε2²}` measured purely
/// through `s1`/`s2`: the admissible means form an interval and the
/// admissible centered parts a ball whose center lies on the ray through
/// the centered `x`.
pub struct FittedSet {
    pub x: Image,
    pub eps1: f64,
    pub eps2: f64,
    pub consts: SsimConstants,
    pub mean_lo: f64,
    pub mean_hi: f64,
    pub center: Vec<f64>,
    pub radius: f64,
}

impl FittedSet {
    pub fn fit(x: &Image, eps1: f64, eps2: f64, consts: SsimConstants) -> Self {
        let n = x.len();
        let xc = centered(x.data());
        let mu = x.mean();
        let b1 = 1.0 - eps1 * eps1;
        let b2 = 1.0 - eps2 * eps2;
        let s1_ok = |m: f64| s1(x, &shaped_like(x, vec![m; n]), &consts).unwrap() >= b1;
        let big = 10.0 * (1.0 + mu.abs());
        let mean_hi = mu + bisect(0.0, big, |t| s1_ok(mu + t));
        let mean_lo = mu - bisect(0.0, big, |t| s1_ok(mu - t));

        // Chord of the S2 region along the centered x direction.
        let xn = norm(&xc);
        let dir: Vec<f64> = xc.iter().map(|v| v / xn).collect();
        let at = |t: f64| shaped_like(x, xc.iter().zip(&dir).map(|(c, d)| c + t * d).collect());
        let s2_ok = |t: f64| s2(x, &at(t), &consts).unwrap() >= b2;
        let scale = 10.0 * (1.0 + xn);
        let up = bisect(0.0, scale, s2_ok);
        let down = bisect(0.0, scale, |t| s2_ok(-t));
        let mid = 0.5 * (up - down);
        let center: Vec<f64> = xc.iter().zip(&dir).map(|(c, d)| c + mid * d).collect();
        FittedSet {
            x: x.clone(),
            eps1,
            eps2,
            consts,
            mean_lo,
            mean_hi,
            center,
            radius: 0.5 * (up + down),
        }
    }

    pub fn feasible(&self, y: &Image, slack: f64) -> bool {
        s1(&self.x, y, &self.consts).unwrap() >= 1.0 - self.eps1 * self.eps1 - slack
            && s2(&self.x, y, &self.consts).unwrap() >= 1.0 - self.eps2 * self.eps2 - slack
    }

    pub fn compose(&self, m: f64, z: &[f64]) -> Image {
        shaped_like(&self.x, z.iter().map(|v| m + v).collect())
    }

    /// Projected gradient ascent on `gᵀy` with Euclidean projection onto
    /// the fitted interval × ball.
    pub fn projected_ascent(&self, g: &[f64], iters: usize, step: f64) -> Image {
        let n = g.len() as f64;
        let gm = g.iter().sum::<f64>() / n;
        let gc = centered(g);
        let mut m = self.x.mean();
        let mut z = centered(self.x.data());
        for _ in 0..iters {
            m = (m + step * n * gm).clamp(self.mean_lo, self.mean_hi);
            for (zi, gi) in z.iter_mut().zip(&gc) {
                *zi += step * gi;
            }
            let d: Vec<f64> = z.iter().zip(&self.center).map(|(a, b)| a - b).collect();
            let dn = norm(&d);
            if dn > self.radius {
                for ((zi, di), ci) in z.iter_mut().zip(&d).zip(&self.center) {
                    *zi = ci + di * self.radius / dn;
                }
            }
        }
        self.compose(m, &z)
    }

    /// Uniform draw from the interval × ball (slightly shrunk so rounding
    /// cannot push it outside).
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> Image {
        let n = self.center.len();
        let m = rng.gen_range(self.mean_lo..=self.mean_hi);
        let u = centered(&(0..n).map(|_| normal(rng)).collect::<Vec<_>>());
        let un = norm(&u);
        let r = self.radius * (1.0 - 1e-9) * rng.gen::<f64>().powf(1.0 / (n - 1) as f64);
        let z: Vec<f64> = self.center.iter().zip(&u).map(|(c, v)| c + r * v / un).collect();
        self.compose(m, &z)
    }
}
