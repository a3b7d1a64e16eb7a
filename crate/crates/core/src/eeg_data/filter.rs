//! Rational polyphase resampling and zero-phase Butterworth band-pass.

use super::EegRecording;
use crate::error::{invalid, Result};

const KAISER_BETA: f64 = 5.0;
const HALF_LEN_PER_FACTOR: usize = 10;

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

fn integral_rate(rate: f64) -> Result<u64> {
    let r = rate.round();
    if !(rate > 0.0) || (rate - r).abs() > 1e-9 || r > 1e7 {
        return Err(invalid(format!(
            "sampling rate {rate} Hz is not a positive integer; rational resampling needs integer rates"
        )));
    }
    Ok(r as u64)
}

/// Zeroth-order modified Bessel function of the first kind (power series).
fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let q = x * x / 4.0;
    for k in 1..200 {
        term *= q / (k as f64 * k as f64);
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

/// Kaiser-windowed sinc low-pass for an up-by-`up`, down-by-`down` resampler,
/// cutoff at the narrower of the two Nyquist bands; DC gain equals `up`.
fn design_lowpass(up: usize, down: usize) -> Vec<f64> {
    let factor = up.max(down);
    let half = HALF_LEN_PER_FACTOR * factor;
    let n = 2 * half + 1;
    let cutoff = 1.0 / factor as f64;
    let denom = bessel_i0(KAISER_BETA);
    let mut h: Vec<f64> = (0..n)
        .map(|i| {
            let m = i as f64 - half as f64;
            let x = cutoff * m;
            let sinc = if x == 0.0 {
                1.0
            } else {
                (std::f64::consts::PI * x).sin() / (std::f64::consts::PI * x)
            };
            let r = m / half as f64;
            let w = bessel_i0(KAISER_BETA * (1.0 - r * r).max(0.0).sqrt()) / denom;
            cutoff * sinc * w
        })
        .collect();
    let s: f64 = h.iter().sum();
    for v in &mut h {
        *v *= up as f64 / s;
    }
    h
}

/// Odd (point-symmetric) extension of `x` at index `i`, which may lie
/// outside `0..x.len()`.
fn odd_ext(x: &[f64], i: isize) -> f64 {
    let n = x.len() as isize;
    if n == 1 {
        return x[0];
    }
    if i < 0 {
        let j = (-i).min(n - 1);
        2.0 * x[0] - x[j as usize]
    } else if i >= n {
        let j = (2 * (n - 1) - i).max(0);
        2.0 * x[(n - 1) as usize] - x[j as usize]
    } else {
        x[i as usize]
    }
}

fn resample_channel(x: &[f64], up: usize, down: usize, h: &[f64], out_len: usize) -> Vec<f64> {
    let half = (h.len() / 2) as isize;
    let (up_i, down_i) = (up as isize, down as isize);
    (0..out_len)
        .map(|n| {
            // Upsampled-domain centre of output sample n.
            let centre = n as isize * down_i;
            let lo = centre - half;
            let hi = centre + half;
            // Input samples j sit at upsampled index j*up.
            let j_lo = lo.div_euclid(up_i) + if lo.rem_euclid(up_i) == 0 { 0 } else { 1 };
            let j_hi = hi.div_euclid(up_i);
            let mut acc = 0.0;
            for j in j_lo..=j_hi {
                let tap = (half + centre - j * up_i) as usize;
                acc += h[tap] * odd_ext(x, j);
            }
            acc
        })
        .collect()
}

/// Polyphase rational resampling with a Kaiser-windowed anti-aliasing
/// filter. Output length is `round(T · target / rate)`.
pub fn resample(rec: &EegRecording, target_rate: f64) -> Result<EegRecording> {
    rec.ensure_finite()?;
    if !(target_rate > 0.0) {
        return Err(invalid(format!("target rate {target_rate} must be positive")));
    }
    if rec.n_samples() == 0 {
        return Err(invalid("cannot resample a zero-length signal"));
    }
    if (rec.sample_rate - target_rate).abs() < 1e-9 {
        return Ok(rec.clone());
    }
    let src = integral_rate(rec.sample_rate)?;
    let dst = integral_rate(target_rate)?;
    let g = gcd(src, dst);
    let (up, down) = ((dst / g) as usize, (src / g) as usize);
    let h = design_lowpass(up, down);
    let t = rec.n_samples();
    let out_len = ((t as f64) * up as f64 / down as f64).round() as usize;
    let mut data = Vec::with_capacity(out_len * rec.n_channels());
    for c in 0..rec.n_channels() {
        let x: Vec<f64> = rec.channel(c).iter().map(|&v| v as f64).collect();
        data.extend(resample_channel(&x, up, down, &h, out_len).into_iter().map(|v| v as f32));
    }
    Ok(rec.replace_data(data, target_rate))
}

/// Second-order section in transposed direct form II.
#[derive(Clone, Copy, Debug)]
struct Biquad {
    b: [f64; 3],
    a: [f64; 2],
}

impl Biquad {
    const Q: f64 = std::f64::consts::FRAC_1_SQRT_2;

    fn highpass(cut: f64, fs: f64) -> Self {
        let w0 = 2.0 * std::f64::consts::PI * cut / fs;
        let (s, c) = w0.sin_cos();
        let alpha = s / (2.0 * Self::Q);
        let a0 = 1.0 + alpha;
        Self {
            b: [(1.0 + c) / 2.0 / a0, -(1.0 + c) / a0, (1.0 + c) / 2.0 / a0],
            a: [-2.0 * c / a0, (1.0 - alpha) / a0],
        }
    }

    fn lowpass(cut: f64, fs: f64) -> Self {
        let w0 = 2.0 * std::f64::consts::PI * cut / fs;
        let (s, c) = w0.sin_cos();
        let alpha = s / (2.0 * Self::Q);
        let a0 = 1.0 + alpha;
        Self {
            b: [(1.0 - c) / 2.0 / a0, (1.0 - c) / a0, (1.0 - c) / 2.0 / a0],
            a: [-2.0 * c / a0, (1.0 - alpha) / a0],
        }
    }

    fn dc_gain(&self) -> f64 {
        (self.b[0] + self.b[1] + self.b[2]) / (1.0 + self.a[0] + self.a[1])
    }

    /// Filters in place, starting from the steady state for a constant input
    /// equal to `x[0]`.
    fn run(&self, x: &mut [f64]) {
        let x0 = x[0];
        let y0 = self.dc_gain() * x0;
        let mut z2 = self.b[2] * x0 - self.a[1] * y0;
        let mut z1 = y0 - self.b[0] * x0;
        for v in x.iter_mut() {
            let xin = *v;
            let y = self.b[0] * xin + z1;
            z1 = self.b[1] * xin - self.a[0] * y + z2;
            z2 = self.b[2] * xin - self.a[1] * y;
            *v = y;
        }
    }

    /// Magnitude response at `freq` Hz.
    #[cfg(test)]
    fn magnitude(&self, freq: f64, fs: f64) -> f64 {
        let w = 2.0 * std::f64::consts::PI * freq / fs;
        let z1 = num_complex_exp(-w);
        let z2 = num_complex_exp(-2.0 * w);
        let num = (
            self.b[0] + self.b[1] * z1.0 + self.b[2] * z2.0,
            self.b[1] * z1.1 + self.b[2] * z2.1,
        );
        let den = (1.0 + self.a[0] * z1.0 + self.a[1] * z2.0, self.a[0] * z1.1 + self.a[1] * z2.1);
        (num.0.hypot(num.1)) / (den.0.hypot(den.1))
    }
}

#[cfg(test)]
fn num_complex_exp(w: f64) -> (f64, f64) {
    (w.cos(), w.sin())
}

fn band_sections(low: f64, high: f64, fs: f64) -> [Biquad; 2] {
    [Biquad::highpass(low, fs), Biquad::lowpass(high, fs)]
}

fn filtfilt(x: &[f64], sections: &[Biquad], padlen: usize) -> Vec<f64> {
    let n = x.len();
    let pad = padlen.min(n.saturating_sub(1));
    let mut ext: Vec<f64> = (-(pad as isize)..(n + pad) as isize)
        .map(|i| odd_ext(x, i))
        .collect();
    for s in sections {
        s.run(&mut ext);
    }
    ext.reverse();
    for s in sections {
        s.run(&mut ext);
    }
    ext.reverse();
    ext[pad..pad + n].to_vec()
}

/// Zero-phase band-pass: a 2nd-order Butterworth high-pass at `low` and a
/// 2nd-order Butterworth low-pass at `high`, applied forward and backward.
pub fn bandpass(rec: &EegRecording, low: f64, high: f64) -> Result<EegRecording> {
    rec.ensure_finite()?;
    let nyq = rec.sample_rate / 2.0;
    if !(low > 0.0 && low < high && high < nyq) {
        return Err(invalid(format!(
            "band ({low}, {high}) Hz must satisfy 0 < low < high < Nyquist ({nyq} Hz)"
        )));
    }
    let sections = band_sections(low, high, rec.sample_rate);
    let padlen = (3.0 * rec.sample_rate / low).ceil() as usize;
    let mut data = Vec::with_capacity(rec.data().len());
    for c in 0..rec.n_channels() {
        let x: Vec<f64> = rec.channel(c).iter().map(|&v| v as f64).collect();
        data.extend(filtfilt(&x, &sections, padlen).into_iter().map(|v| v as f32));
    }
    Ok(rec.replace_data(data, rec.sample_rate))
}
