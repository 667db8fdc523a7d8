use super::sample::SitsSample;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Gap-filling windows in days, narrowest first.
pub const RBF_WINDOWS: [u16; 4] = [11, 23, 63, 127];
pub const DEFAULT_MAX_GAP: u16 = 5;

/// Source coordinate and interpolation taps for output index `i` under the
/// half-pixel-center convention.
fn taps(i: usize, n_in: usize, n_out: usize) -> (usize, usize, f64) {
    let src = (i as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5;
    let src = src.clamp(0.0, (n_in - 1) as f64);
    let i0 = src.floor() as usize;
    let i1 = (i0 + 1).min(n_in - 1);
    (i0, i1, src - i0 as f64)
}

/// `a + f(b - a)`, kept inside `[min(a, b), max(a, b)]` against rounding.
fn lerp<S: Scalar>(a: S, b: S, f: S) -> S {
    let v = a + f * (b - a);
    v.max(a.min(b)).min(a.max(b))
}

/// Bilinear resize of `[T, H, W, C]` to `[T, h_out, w_out, C]`.
pub fn bilinear_upsample<S: Scalar>(x: &Tensor<S>, h_out: usize, w_out: usize) -> Result<Tensor<S>> {
    if x.rank() != 4 {
        return Err(Error::dim("bilinear_upsample", format!("expected [T, H, W, C], got {:?}", x.shape())));
    }
    let (t, h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    if h == 0 || w == 0 {
        return Err(Error::Config("cannot resample an empty grid".into()));
    }
    if h_out < h || w_out < w {
        return Err(Error::Config(format!(
            "downscaling {h}×{w} to {h_out}×{w_out} is not supported"
        )));
    }
    if (h_out, w_out) == (h, w) {
        return Ok(x.clone());
    }
    let rows: Vec<_> = (0..h_out).map(|i| taps(i, h, h_out)).collect();
    let cols: Vec<_> = (0..w_out).map(|j| taps(j, w, w_out)).collect();
    let src = x.data();
    let mut out = Vec::with_capacity(t * h_out * w_out * c);
    for ti in 0..t {
        let frame = &src[ti * h * w * c..(ti + 1) * h * w * c];
        let px = |y: usize, x: usize, ch: usize| frame[(y * w + x) * c + ch];
        for &(y0, y1, fy) in &rows {
            let fy = S::of(fy);
            for &(x0, x1, fx) in &cols {
                let fx = S::of(fx);
                for ch in 0..c {
                    let top = lerp(px(y0, x0, ch), px(y0, x1, ch), fx);
                    let bottom = lerp(px(y1, x0, ch), px(y1, x1, ch), fx);
                    out.push(lerp(top, bottom, fy));
                }
            }
        }
    }
    Tensor::new(vec![t, h_out, w_out, c], out)
}

/// For each target date, the index of the frame closest in time; ties go
/// to the earlier frame.
pub fn nearest_frames(dates: &[u16], targets: &[u16], max_gap: u16) -> Result<Vec<usize>> {
    targets
        .iter()
        .map(|&target| {
            let best = dates
                .iter()
                .enumerate()
                .min_by_key(|&(_, &d)| (d.abs_diff(target), d))
                .ok_or_else(|| Error::Data("no frames to align".into()))?;
            let gap = best.1.abs_diff(target);
            if gap > max_gap {
                return Err(Error::Data(format!(
                    "nearest frame to day {target} is {gap} days away (max {max_gap})"
                )));
            }
            Ok(best.0)
        })
        .collect()
}

/// Picks the nearest dense frame for every target date.
pub fn temporal_align<S: Scalar>(dense: &SitsSample<S>, targets: &[u16], max_gap: u16) -> Result<SitsSample<S>> {
    let picks = nearest_frames(dense.dates(), targets, max_gap)?;
    let (_, h, w, c) = dense.dims();
    let frame = h * w * c;
    let src = dense.x().data();
    let mut data = Vec::with_capacity(picks.len() * frame);
    for &i in &picks {
        data.extend_from_slice(&src[i * frame..(i + 1) * frame]);
    }
    SitsSample::new(
        dense.modality.clone(),
        Tensor::new(vec![picks.len(), h, w, c], data)?,
        targets.to_vec(),
    )
}

/// Normalized Gaussian weights, `σ = window / 2`, over observations within
/// `±window` of `target`; `None` if the window is empty.
pub fn rbf_kernel_weights(dates: &[u16], target: u16, window: u16) -> Option<Vec<(usize, f64)>> {
    let sigma = window as f64 / 2.0;
    let raw: Vec<(usize, f64)> = dates
        .iter()
        .enumerate()
        .filter(|(_, &d)| d.abs_diff(target) <= window)
        .map(|(i, &d)| {
            let dt = d as f64 - target as f64;
            (i, (-dt * dt / (2.0 * sigma * sigma)).exp())
        })
        .collect();
    if raw.is_empty() {
        return None;
    }
    let total: f64 = raw.iter().map(|(_, w)| w).sum();
    Some(raw.into_iter().map(|(i, w)| (i, w / total)).collect())
}

/// Combined weight per observation for one target date: the mean of the
/// non-empty kernels.
pub fn rbf_ensemble_weights(dates: &[u16], target: u16, windows: &[u16]) -> Result<Vec<f64>> {
    let kernels: Vec<_> = windows
        .iter()
        .filter_map(|&w| rbf_kernel_weights(dates, target, w))
        .collect();
    if kernels.is_empty() {
        let widest = windows.iter().max().copied().unwrap_or(0);
        return Err(Error::Data(format!(
            "no observation within ±{widest} days of day {target}"
        )));
    }
    let mut weights = vec![0.0; dates.len()];
    let n = kernels.len() as f64;
    for kernel in &kernels {
        for &(i, w) in kernel {
            weights[i] += w / n;
        }
    }
    Ok(weights)
}

/// Resamples an irregular series onto `targets` with the RBF ensemble.
pub fn rbf_gapfill<S: Scalar>(irregular: &SitsSample<S>, targets: &[u16], windows: &[u16]) -> Result<SitsSample<S>> {
    let (_, h, w, c) = irregular.dims();
    let frame = h * w * c;
    let src = irregular.x().data();
    let mut data = Vec::with_capacity(targets.len() * frame);
    for &target in targets {
        let weights = rbf_ensemble_weights(irregular.dates(), target, windows)?;
        let start = data.len();
        data.resize(start + frame, S::zero());
        for (i, &wt) in weights.iter().enumerate() {
            if wt == 0.0 {
                continue;
            }
            let wt = S::of(wt);
            for (o, &v) in data[start..].iter_mut().zip(&src[i * frame..(i + 1) * frame]) {
                *o += wt * v;
            }
        }
    }
    SitsSample::new(
        irregular.modality.clone(),
        Tensor::new(vec![targets.len(), h, w, c], data)?,
        targets.to_vec(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_image_upsamples_exactly() {
        let v = 0.1f64 + 0.2;
        let x = Tensor::full(&[2, 3, 3, 2], v);
        let y = bilinear_upsample(&x, 10, 10).unwrap();
        assert!(y.data().iter().all(|&o| o == v));
    }

    #[test]
    fn ramp_follows_half_pixel_line() {
        let x = Tensor::new(vec![1, 2, 1, 1], vec![0.0, 3.0]).unwrap();
        let y = bilinear_upsample(&x, 4, 1).unwrap();
        // output centres map to source -0.25, 0.25, 0.75, 1.25; clamped to [0, 1]
        let expected: Vec<f64> = [-0.25f64, 0.25, 0.75, 1.25]
            .iter()
            .map(|s| 3.0 * s.clamp(0.0, 1.0))
            .collect();
        for (a, b) in y.data().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
    }

    #[test]
    fn upsampling_stays_in_range() {
        let x = Tensor::from_fn(&[1, 3, 3, 1], |i| ((i * 7919) % 13) as f64 * 0.731 - 2.0);
        let (lo, hi) = x.data().iter().fold((f64::MAX, f64::MIN), |(l, h), &v| (l.min(v), h.max(v)));
        let y = bilinear_upsample(&x, 10, 10).unwrap();
        assert!(y.data().iter().all(|&v| v >= lo && v <= hi));
    }

    #[test]
    fn downscaling_is_rejected() {
        let x = Tensor::<f64>::zeros(&[1, 4, 4, 1]);
        assert!(matches!(bilinear_upsample(&x, 2, 4), Err(Error::Config(_))));
    }

    #[test]
    fn align_picks_nearest_earlier_on_tie() {
        assert_eq!(nearest_frames(&[13, 16], &[15], 5).unwrap(), vec![1]);
        assert_eq!(nearest_frames(&[14, 16], &[15], 5).unwrap(), vec![0]);
        assert!(nearest_frames(&[1, 30], &[15], 5).is_err());
        let daily: Vec<u16> = (1..=60).collect();
        let x = Tensor::from_fn(&[60, 1, 1, 1], |i| i as f64);
        let s = SitsSample::new("pf", x, daily).unwrap();
        let a = temporal_align(&s, &[15, 25, 35], 5).unwrap();
        assert_eq!(a.x().data(), &[14.0, 24.0, 34.0]);
        assert_eq!(a.dates(), &[15, 25, 35]);
    }

    #[test]
    fn gapfill_single_observation_and_constants() {
        let s = SitsSample::new("s2", Tensor::from_fn(&[1, 1, 2, 1], |i| i as f64 + 0.5), vec![40]).unwrap();
        let out = rbf_gapfill(&s, &[40], &RBF_WINDOWS).unwrap();
        assert_eq!(out.x().data(), s.x().data());
        let c = SitsSample::new("s2", Tensor::full(&[3, 1, 1, 1], 0.25), vec![10, 33, 70]).unwrap();
        let out = rbf_gapfill(&c, &[20, 50, 90], &RBF_WINDOWS).unwrap();
        assert!(out.x().data().iter().all(|v: &f64| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn gapfill_matches_hand_weights() {
        // observations 5 and 20 days before/after target 100
        let s = SitsSample::new("s1", Tensor::new(vec![2, 1, 1, 1], vec![1.0, 4.0]).unwrap(), vec![95, 120]).unwrap();
        let out = rbf_gapfill(&s, &[100], &RBF_WINDOWS).unwrap();
        let g = |dt: f64, win: f64| (-dt * dt / (2.0 * (win / 2.0).powi(2))).exp();
        // ±11 sees only day 95
        let k11 = 1.0;
        let mut ks = vec![k11];
        for win in [23.0, 63.0, 127.0] {
            let (a, b) = (g(5.0, win), g(20.0, win));
            ks.push((a * 1.0 + b * 4.0) / (a + b));
        }
        let expected = ks.iter().sum::<f64>() / 4.0;
        assert!((out.x().data()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn kernel_weights_are_normalized() {
        let dates = [3, 9, 17, 30, 41, 60, 88];
        for target in [1u16, 20, 45, 100] {
            for w in RBF_WINDOWS {
                if let Some(k) = rbf_kernel_weights(&dates, target, w) {
                    let s: f64 = k.iter().map(|(_, w)| w).sum();
                    assert!((s - 1.0).abs() < 1e-12);
                }
            }
        }
        assert!(rbf_ensemble_weights(&[300], 10, &RBF_WINDOWS).is_err());
    }
}
