//! Removal of the linear phase ramp caused by an off-centre virtual source.

use num_complex::Complex64;
use std::f64::consts::PI;

use super::{phase_only, wrap, AberrationLaw};
use crate::field::Basis;

/// Rate g such that a lateral shift x₀ shows up as exp(−i g x₀): k_c u / 2z
/// in the transducer basis and k / 2 in the plane-wave basis.
pub fn ramp_kernel_rate(basis: Basis, coord: f64, z: f64, kc: f64) -> f64 {
    match basis {
        Basis::Transducer => kc * coord / (2.0 * z),
        Basis::PlaneWave | Basis::Focused => coord / 2.0,
    }
}

/// Estimates the shift x₀ from the peak of the autoconvolution of |H₁|²,
/// H₁(x) = Σ Û₁ exp(i g x), and multiplies the law by exp(+i g x₀).
///
/// Invalid laws pass through untouched. A competing autoconvolution peak
/// within 3 dB keeps the correction but flags the law as ambiguous.
pub fn ramp_removal(law: &AberrationLaw, z: f64, kc: f64) -> AberrationLaw {
    let mut out = law.clone();
    if !law.valid {
        return out;
    }
    let idx: Vec<usize> = (0..law.phase.len()).filter(|&i| law.support[i]).collect();
    if idx.len() < 2 {
        return out;
    }
    let g: Vec<f64> = idx.iter().map(|&i| ramp_kernel_rate(law.basis, law.coords[i], z, kc)).collect();
    let (gmin, gmax) = g.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = gmax - gmin;
    if !(span > 0.0) {
        return out;
    }
    let lobe = 2.0 * PI / span;
    let period = 2.0 * PI * (idx.len() - 1) as f64 / span;
    let reach = (8.0 * lobe).min(0.45 * period);
    let h = lobe / 16.0;
    let m = (reach / h).floor() as i64;
    let xs: Vec<f64> = (-m..=m).map(|i| i as f64 * h).collect();
    let u: Vec<Complex64> = idx.iter().map(|&i| Complex64::from_polar(1.0, law.phase[i])).collect();
    let p: Vec<f64> = xs
        .iter()
        .map(|&x| u.iter().zip(&g).map(|(a, gi)| a * Complex64::from_polar(1.0, gi * x)).sum::<Complex64>().norm_sqr())
        .collect();
    let np = p.len();
    // autoconvolution on s = x + x′, sample n ↔ s = (n − 2m) h
    let a: Vec<f64> = (0..2 * np - 1)
        .map(|n| {
            let lo = n.saturating_sub(np - 1);
            let hi = n.min(np - 1);
            (lo..=hi).map(|k| p[k] * p[n - k]).sum()
        })
        .collect();
    let best = (0..a.len()).max_by(|&i, &j| a[i].total_cmp(&a[j])).expect("non-empty autoconvolution");
    let mut s = (best as f64 - 2.0 * m as f64) * h;
    if best > 0 && best + 1 < a.len() {
        let den = a[best - 1] - 2.0 * a[best] + a[best + 1];
        if den < 0.0 {
            s += 0.5 * (a[best - 1] - a[best + 1]) / den * h;
        }
    }
    let x0 = s / 2.0;
    let rival = (1..a.len() - 1)
        .filter(|&i| i != best && a[i] > a[i - 1] && a[i] >= a[i + 1])
        .map(|i| a[i])
        .fold(0.0, f64::max);
    out.ambiguous = rival >= 0.5 * a[best];
    let shifted: Vec<Complex64> = law
        .phase
        .iter()
        .enumerate()
        .map(|(i, &ph)| {
            let extra = if law.support[i] { ramp_kernel_rate(law.basis, law.coords[i], z, kc) * x0 } else { 0.0 };
            Complex64::from_polar(1.0, wrap(ph + extra))
        })
        .collect();
    out.phase = phase_only(&shifted, &law.support);
    out.ramp_corrected = true;
    out.shift = x0;
    out
}
