//! Single- and multi-scale SSIM with analytic gradients.

use crate::error::{Error, Result};
use crate::image::Image;

pub const WINDOW: usize = 11;
pub const WINDOW_SIGMA: f64 = 1.5;
pub const C1: f64 = 0.01 * 0.01;
pub const C2: f64 = 0.03 * 0.03;
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
/// Lower clamp applied to per-scale factors before raising them to a power.
const FACTOR_FLOOR: f64 = 1e-6;

fn window() -> [f64; WINDOW] {
    let half = (WINDOW / 2) as f64;
    let mut w = [0.0; WINDOW];
    for (k, v) in w.iter_mut().enumerate() {
        let d = k as f64 - half;
        *v = (-d * d / (2.0 * WINDOW_SIGMA * WINDOW_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// A single-channel plane.
#[derive(Clone, Debug)]
struct Plane {
    w: usize,
    h: usize,
    data: Vec<f64>,
}

impl Plane {
    fn from_channel(img: &Image, c: usize) -> Self {
        let n = img.channels();
        Self {
            w: img.width(),
            h: img.height(),
            data: img.data().iter().skip(c).step_by(n).copied().collect(),
        }
    }

    fn zip(&self, other: &Plane, f: impl Fn(f64, f64) -> f64) -> Plane {
        Plane {
            w: self.w,
            h: self.h,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    /// Valid separable convolution with the Gaussian window.
    fn blur(&self, win: &[f64; WINDOW]) -> Plane {
        let ow = self.w + 1 - WINDOW;
        let oh = self.h + 1 - WINDOW;
        let mut rows = vec![0.0; ow * self.h];
        for y in 0..self.h {
            let src = &self.data[y * self.w..(y + 1) * self.w];
            for x in 0..ow {
                rows[y * ow + x] = win.iter().zip(&src[x..x + WINDOW]).map(|(a, b)| a * b).sum();
            }
        }
        let mut out = vec![0.0; ow * oh];
        for y in 0..oh {
            for (k, wk) in win.iter().enumerate() {
                let src = &rows[(y + k) * ow..(y + k + 1) * ow];
                for (o, s) in out[y * ow..(y + 1) * ow].iter_mut().zip(src) {
                    *o += wk * s;
                }
            }
        }
        Plane { w: ow, h: oh, data: out }
    }

    /// Adjoint of [`Plane::blur`] back onto a `w x h` plane.
    fn blur_adjoint(&self, win: &[f64; WINDOW], w: usize, h: usize) -> Plane {
        let ow = self.w;
        let mut rows = vec![0.0; ow * h];
        for y in 0..self.h {
            for (k, wk) in win.iter().enumerate() {
                let dst = &mut rows[(y + k) * ow..(y + k + 1) * ow];
                for (d, s) in dst.iter_mut().zip(&self.data[y * ow..(y + 1) * ow]) {
                    *d += wk * s;
                }
            }
        }
        let mut out = vec![0.0; w * h];
        for y in 0..h {
            let dst = &mut out[y * w..(y + 1) * w];
            for x in 0..ow {
                let g = rows[y * ow + x];
                for (d, wk) in dst[x..x + WINDOW].iter_mut().zip(win) {
                    *d += wk * g;
                }
            }
        }
        Plane { w, h, data: out }
    }

    /// 2x2 mean pooling; a trailing odd row or column is dropped.
    fn downsample(&self) -> Plane {
        let (w, h) = (self.w / 2, self.h / 2);
        let mut data = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let a = self.data[2 * y * self.w + 2 * x];
                let b = self.data[2 * y * self.w + 2 * x + 1];
                let c = self.data[(2 * y + 1) * self.w + 2 * x];
                let d = self.data[(2 * y + 1) * self.w + 2 * x + 1];
                data.push(0.25 * (a + b + c + d));
            }
        }
        Plane { w, h, data }
    }

    fn downsample_adjoint(&self, w: usize, h: usize) -> Plane {
        let mut data = vec![0.0; w * h];
        for y in 0..self.h {
            for x in 0..self.w {
                let g = 0.25 * self.data[y * self.w + x];
                data[2 * y * w + 2 * x] += g;
                data[2 * y * w + 2 * x + 1] += g;
                data[(2 * y + 1) * w + 2 * x] += g;
                data[(2 * y + 1) * w + 2 * x + 1] += g;
            }
        }
        Plane { w, h, data }
    }
}

/// Windowed statistics of one channel pair at one scale.
struct Statistics {
    mu_x: Plane,
    mu_y: Plane,
    l: Vec<f64>,
    cs: Vec<f64>,
}

impl Statistics {
    fn new(x: &Plane, y: &Plane, win: &[f64; WINDOW]) -> Self {
        let mu_x = x.blur(win);
        let mu_y = y.blur(win);
        let exx = x.zip(x, |a, b| a * b).blur(win);
        let eyy = y.zip(y, |a, b| a * b).blur(win);
        let exy = x.zip(y, |a, b| a * b).blur(win);
        let n = mu_x.data.len();
        let mut l = Vec::with_capacity(n);
        let mut cs = Vec::with_capacity(n);
        for k in 0..n {
            let (mx, my) = (mu_x.data[k], mu_y.data[k]);
            let vx = exx.data[k] - mx * mx;
            let vy = eyy.data[k] - my * my;
            let cov = exy.data[k] - mx * my;
            l.push((2.0 * mx * my + C1) / (mx * mx + my * my + C1));
            cs.push((2.0 * cov + C2) / (vx + vy + C2));
        }
        Self { mu_x, mu_y, l, cs }
    }

    /// Gradient with respect to `x` given per-position upstream gradients on
    /// the luminance and contrast-structure maps.
    fn backward(&self, x: &Plane, y: &Plane, win: &[f64; WINDOW], g_l: &[f64], g_cs: &[f64]) -> Plane {
        let exx = x.zip(x, |a, b| a * b).blur(win);
        let eyy = y.zip(y, |a, b| a * b).blur(win);
        let exy = x.zip(y, |a, b| a * b).blur(win);
        let (ow, oh) = (self.mu_x.w, self.mu_x.h);
        let n = ow * oh;
        let mut g_mu = vec![0.0; n];
        let mut g_exx = vec![0.0; n];
        let mut g_exy = vec![0.0; n];
        for k in 0..n {
            let (mx, my) = (self.mu_x.data[k], self.mu_y.data[k]);
            let a1 = 2.0 * mx * my + C1;
            let b1 = mx * mx + my * my + C1;
            let vx = exx.data[k] - mx * mx;
            let vy = eyy.data[k] - my * my;
            let cov = exy.data[k] - mx * my;
            let a2 = 2.0 * cov + C2;
            let b2 = vx + vy + C2;
            let dl_dmx = (2.0 * my * b1 - 2.0 * mx * a1) / (b1 * b1);
            let dcs_dcov = 2.0 / b2;
            let dcs_dvx = -a2 / (b2 * b2);
            g_mu[k] = g_l[k] * dl_dmx + g_cs[k] * (dcs_dcov * -my + dcs_dvx * -2.0 * mx);
            g_exx[k] = g_cs[k] * dcs_dvx;
            g_exy[k] = g_cs[k] * dcs_dcov;
        }
        let wrap = |data| Plane { w: ow, h: oh, data };
        let t_mu = wrap(g_mu).blur_adjoint(win, x.w, x.h);
        let t_exx = wrap(g_exx).blur_adjoint(win, x.w, x.h);
        let t_exy = wrap(g_exy).blur_adjoint(win, x.w, x.h);
        Plane {
            w: x.w,
            h: x.h,
            data: (0..x.data.len())
                .map(|i| t_mu.data[i] + 2.0 * x.data[i] * t_exx.data[i] + y.data[i] * t_exy.data[i])
                .collect(),
        }
    }
}

fn check_inputs(x: &Image, y: &Image) -> Result<()> {
    x.ensure_same_shape(y, "ssim inputs")?;
    if x.width() < WINDOW || x.height() < WINDOW {
        return Err(Error::Shape(format!(
            "ssim needs at least {WINDOW}x{WINDOW} pixels, got {}x{}",
            x.width(),
            x.height()
        )));
    }
    Ok(())
}

fn scatter(grad: &mut Image, c: usize, plane: &Plane, scale: f64) {
    let n = grad.channels();
    for (dst, v) in grad.data_mut().iter_mut().skip(c).step_by(n).zip(&plane.data) {
        *dst = v * scale;
    }
}

/// Mean SSIM over channels and gradient with respect to `x`.
pub fn ssim(x: &Image, y: &Image) -> Result<(f64, Image)> {
    check_inputs(x, y)?;
    let win = window();
    let channels = x.channels();
    let mut grad = Image::new(x.width(), x.height(), channels);
    let mut total = 0.0;
    for c in 0..channels {
        let (px, py) = (Plane::from_channel(x, c), Plane::from_channel(y, c));
        let stats = Statistics::new(&px, &py, &win);
        let n = stats.l.len() as f64;
        total += stats.l.iter().zip(&stats.cs).map(|(a, b)| a * b).sum::<f64>() / n;
        let g_l: Vec<f64> = stats.cs.iter().map(|v| v / n).collect();
        let g_cs: Vec<f64> = stats.l.iter().map(|v| v / n).collect();
        let g = stats.backward(&px, &py, &win, &g_l, &g_cs);
        scatter(&mut grad, c, &g, 1.0 / channels as f64);
    }
    Ok((total / channels as f64, grad))
}

/// Scales used for a `width x height` image and their renormalized weights.
pub fn ms_ssim_weights(width: usize, height: usize) -> Result<Vec<f64>> {
    let mut size = width.min(height);
    if size < WINDOW {
        return Err(Error::Shape(format!(
            "ms-ssim needs at least {WINDOW}x{WINDOW} pixels, got {width}x{height}"
        )));
    }
    let mut scales = 1;
    while scales < MS_SSIM_WEIGHTS.len() && size / 2 >= WINDOW {
        size /= 2;
        scales += 1;
    }
    let used = &MS_SSIM_WEIGHTS[..scales];
    let sum: f64 = used.iter().sum();
    Ok(used.iter().map(|w| w / sum).collect())
}

/// Mean MS-SSIM over channels and gradient with respect to `x`.
pub fn ms_ssim(x: &Image, y: &Image) -> Result<(f64, Image)> {
    check_inputs(x, y)?;
    let weights = ms_ssim_weights(x.width(), x.height())?;
    let scales = weights.len();
    let win = window();
    let channels = x.channels();
    let mut grad = Image::new(x.width(), x.height(), channels);
    let mut total = 0.0;
    for c in 0..channels {
        let mut pyramid = vec![(Plane::from_channel(x, c), Plane::from_channel(y, c))];
        for _ in 1..scales {
            let (a, b) = pyramid.last().unwrap();
            pyramid.push((a.downsample(), b.downsample()));
        }
        let stats: Vec<Statistics> = pyramid.iter().map(|(a, b)| Statistics::new(a, b, &win)).collect();
        let factors: Vec<f64> = stats
            .iter()
            .enumerate()
            .map(|(s, st)| {
                let n = st.cs.len() as f64;
                if s + 1 == scales {
                    st.l.iter().zip(&st.cs).map(|(a, b)| a * b).sum::<f64>() / n
                } else {
                    st.cs.iter().sum::<f64>() / n
                }
            })
            .collect();
        let value: f64 = factors
            .iter()
            .zip(&weights)
            .map(|(f, w)| f.max(FACTOR_FLOOR).powf(*w))
            .product();
        total += value;

        let mut carried: Option<Plane> = None;
        for s in (0..scales).rev() {
            let (px, py) = &pyramid[s];
            let st = &stats[s];
            let f = factors[s];
            let mut g = match carried.take() {
                Some(up) => up.downsample_adjoint(px.w, px.h),
                None => Plane {
                    w: px.w,
                    h: px.h,
                    data: vec![0.0; px.data.len()],
                },
            };
            if f > FACTOR_FLOOR {
                let n = st.cs.len() as f64;
                let d_factor = value * weights[s] / f / n;
                let (g_l, g_cs): (Vec<f64>, Vec<f64>) = if s + 1 == scales {
                    (
                        st.cs.iter().map(|v| v * d_factor).collect(),
                        st.l.iter().map(|v| v * d_factor).collect(),
                    )
                } else {
                    (vec![0.0; st.cs.len()], vec![d_factor; st.cs.len()])
                };
                let local = st.backward(px, py, &win, &g_l, &g_cs);
                for (a, b) in g.data.iter_mut().zip(&local.data) {
                    *a += b;
                }
            }
            carried = Some(g);
        }
        scatter(&mut grad, c, &carried.unwrap(), 1.0 / channels as f64);
    }
    Ok((total / channels as f64, grad))
}
