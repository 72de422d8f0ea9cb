//! Radix-2 FFT over interleaved-free split real/imaginary buffers.
//!
//! Only power-of-two sizes are supported, which the feature extractor
//! guarantees by construction. Accuracy is checked in tests against a direct
//! O(n^2) summation DFT.

use std::f64::consts::PI;

/// In-place iterative radix-2 decimation-in-time FFT.
///
/// Panics if `re.len() != im.len()` or the length is not a power of two.
pub fn fft_in_place(re: &mut [f64], im: &mut [f64]) {
    let n = re.len();
    assert_eq!(n, im.len(), "fft buffers must have equal length");
    assert!(n.is_power_of_two(), "fft size must be a power of two");
    if n <= 1 {
        return;
    }

    // Bit-reversal permutation.
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = i.reverse_bits() >> (usize::BITS - bits);
        if j > i {
            re.swap(i, j);
            im.swap(i, j);
        }
    }

    let mut len = 2;
    while len <= n {
        let ang = -2.0 * PI / len as f64;
        let (w_re, w_im) = (ang.cos(), ang.sin());
        for start in (0..n).step_by(len) {
            let mut cur_re = 1.0;
            let mut cur_im = 0.0;
            for k in 0..len / 2 {
                let a = start + k;
                let b = start + k + len / 2;
                let t_re = re[b] * cur_re - im[b] * cur_im;
                let t_im = re[b] * cur_im + im[b] * cur_re;
                re[b] = re[a] - t_re;
                im[b] = im[a] - t_im;
                re[a] += t_re;
                im[a] += t_im;
                let next_re = cur_re * w_re - cur_im * w_im;
                cur_im = cur_re * w_im + cur_im * w_re;
                cur_re = next_re;
            }
        }
        len <<= 1;
    }
}

/// Power spectrum (|X_k|^2) of a real signal, bins 0..=n/2.
pub fn power_spectrum(signal: &[f64], fft_size: usize) -> Vec<f64> {
    let mut re = vec![0.0; fft_size];
    let mut im = vec![0.0; fft_size];
    let copy = signal.len().min(fft_size);
    re[..copy].copy_from_slice(&signal[..copy]);
    fft_in_place(&mut re, &mut im);
    (0..=fft_size / 2)
        .map(|k| re[k] * re[k] + im[k] * im[k])
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct-summation DFT oracle, deliberately independent of the FFT path.
    fn dft_oracle(signal: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
        let mut re = vec![0.0; n];
        let mut im = vec![0.0; n];
        for (k, (rk, ik)) in re.iter_mut().zip(im.iter_mut()).enumerate() {
            for (t, &x) in signal.iter().enumerate() {
                let ang = -2.0 * PI * (k as f64) * (t as f64) / n as f64;
                *rk += x * ang.cos();
                *ik += x * ang.sin();
            }
        }
        (re, im)
    }

    #[test]
    fn fft_matches_direct_summation_dft() {
        use rand::Rng;
        let mut rng = crate::seeds::rng_from(11);
        for &n in &[8usize, 64, 512] {
            let signal: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let (ore, oim) = dft_oracle(&signal, n);
            let mut re = signal.clone();
            let mut im = vec![0.0; n];
            fft_in_place(&mut re, &mut im);
            let scale = signal.iter().map(|x| x.abs()).sum::<f64>().max(1.0);
            for k in 0..n {
                assert!(
                    (re[k] - ore[k]).abs() / scale < 1e-6,
                    "re mismatch at n={n} k={k}: fft={} dft={}",
                    re[k],
                    ore[k]
                );
                assert!(
                    (im[k] - oim[k]).abs() / scale < 1e-6,
                    "im mismatch at n={n} k={k}: fft={} dft={}",
                    im[k],
                    oim[k]
                );
            }
        }
    }

    #[test]
    fn impulse_has_flat_spectrum() {
        let mut signal = vec![0.0; 16];
        signal[0] = 1.0;
        let power = power_spectrum(&signal, 16);
        for (k, p) in power.iter().enumerate() {
            assert!((p - 1.0).abs() < 1e-12, "bin {k}: {p}");
        }
    }
}
