//! Evaluation metrics. Ratios in dB are clamped to `[-CAP_DB, CAP_DB]`.

use crate::error::{check_len, Error, Result};

pub const CAP_DB: f64 = 100.0;

fn energy(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `10 log10(num / den)` clamped to the metric cap.
pub fn ratio_db(num: f64, den: f64) -> f64 {
    if num <= 0.0 && den <= 0.0 {
        return 0.0;
    }
    if den <= 0.0 {
        return CAP_DB;
    }
    if num <= 0.0 {
        return -CAP_DB;
    }
    (10.0 * (num / den).log10()).clamp(-CAP_DB, CAP_DB)
}

/// Ungated ERLE over aligned signals.
pub fn erle(d: &[f64], e: &[f64]) -> Result<f64> {
    check_len(d.len(), e.len())?;
    let pd = energy(d);
    if pd <= 0.0 {
        return Err(Error::Degenerate("ERLE of a silent mixture is undefined".into()));
    }
    Ok(ratio_db(pd, energy(e)))
}

/// ERLE restricted to frames of `frame` samples where `mask` is true.
pub fn erle_masked(d: &[f64], e: &[f64], mask: &[bool], frame: usize) -> Result<f64> {
    check_len(d.len(), e.len())?;
    check_len(d.len().div_ceil(frame), mask.len())?;
    let (mut pd, mut pe) = (0.0, 0.0);
    for ((dc, ec), &m) in d.chunks(frame).zip(e.chunks(frame)).zip(mask) {
        if m {
            pd += energy(dc);
            pe += energy(ec);
        }
    }
    if pd <= 0.0 {
        return Err(Error::Degenerate("no active frames for ERLE".into()));
    }
    Ok(ratio_db(pd, pe))
}

/// Frames whose energy lies within `gate_db` of the loudest frame.
pub fn activity(x: &[f64], frame: usize, gate_db: f64) -> Vec<bool> {
    let energies: Vec<f64> = x.chunks(frame).map(energy).collect();
    let peak = energies.iter().copied().fold(0.0, f64::max);
    let floor = peak * 10f64.powf(-gate_db.abs() / 10.0);
    energies.iter().map(|&e| peak > 0.0 && e >= floor).collect()
}

/// Gated ERLE: `e` is the raw pipeline output lagging `d` by `latency`
/// samples; frames count when `far` (aligned with `d`) is within 40 dB of its
/// peak.
pub fn erle_gated(d: &[f64], e: &[f64], far: &[f64], latency: usize, frame: usize) -> Result<f64> {
    check_len(d.len(), e.len())?;
    check_len(d.len(), far.len())?;
    if latency >= d.len() {
        return Err(Error::Degenerate("signal shorter than the pipeline latency".into()));
    }
    let n = d.len() - latency;
    let d = &d[..n];
    let e = &e[latency..];
    let mask = activity(&far[..n], frame, 40.0);
    erle_masked(d, e, &mask, frame)
}

/// ERLE over single-talk frames: the far end is within 40 dB of its peak
/// and the near-end talker is silent (more than 40 dB below its own peak, or
/// absent). `e` lags `d` by `latency` samples as in [`erle_gated`].
pub fn erle_single_talk(d: &[f64], e: &[f64], far: &[f64], near: &[f64], latency: usize, frame: usize) -> Result<f64> {
    check_len(d.len(), e.len())?;
    check_len(d.len(), far.len())?;
    check_len(d.len(), near.len())?;
    if latency >= d.len() {
        return Err(Error::Degenerate("signal shorter than the pipeline latency".into()));
    }
    let n = d.len() - latency;
    let far_on = activity(&far[..n], frame, 40.0);
    let near_on = activity(&near[..n], frame, 40.0);
    let mask: Vec<bool> = far_on.iter().zip(&near_on).map(|(&f, &s)| f && !s).collect();
    erle_masked(&d[..n], &e[latency..], &mask, frame)
}

/// Scale-invariant SDR of `e` against the reference `s`.
pub fn si_sdr(s: &[f64], e: &[f64]) -> Result<f64> {
    check_len(s.len(), e.len())?;
    let ss = energy(s);
    if ss <= 0.0 {
        return Err(Error::Degenerate("SI-SDR needs a nonzero reference".into()));
    }
    let alpha = dot(e, s) / ss;
    let target = alpha * alpha * ss;
    if target <= 0.0 {
        return Ok(-CAP_DB);
    }
    let resid: f64 = e.iter().zip(s).map(|(x, y)| (x - alpha * y).powi(2)).sum();
    Ok(ratio_db(target, resid))
}

/// Solves the symmetric positive semi-definite system `g x = b` by Gaussian
/// elimination with partial pivoting; near-singular directions are dropped.
fn solve(mut g: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    let scale = (0..n).map(|i| g[i][i].abs()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    for c in 0..n {
        let piv = (c..n).max_by(|&i, &j| g[i][c].abs().total_cmp(&g[j][c].abs())).unwrap();
        g.swap(c, piv);
        b.swap(c, piv);
        if g[c][c].abs() <= 1e-12 * scale {
            g[c].iter_mut().for_each(|v| *v = 0.0);
            b[c] = 0.0;
            continue;
        }
        for r in c + 1..n {
            let f = g[r][c] / g[c][c];
            for k in c..n {
                g[r][k] -= f * g[c][k];
            }
            b[r] -= f * b[c];
        }
    }
    let mut x = vec![0.0; n];
    for c in (0..n).rev() {
        if g[c][c] == 0.0 {
            continue;
        }
        let s: f64 = (c + 1..n).map(|k| g[c][k] * x[k]).sum();
        x[c] = (b[c] - s) / g[c][c];
    }
    x
}

/// Least-squares projection of `e` onto the span of `refs`.
pub fn project(refs: &[&[f64]], e: &[f64]) -> Vec<f64> {
    let n = refs.len();
    let g: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| dot(refs[i], refs[j])).collect()).collect();
    let b: Vec<f64> = refs.iter().map(|r| dot(r, e)).collect();
    let x = solve(g, b);
    let mut out = vec![0.0; e.len()];
    for (r, c) in refs.iter().zip(x) {
        for (o, v) in out.iter_mut().zip(r.iter()) {
            *o += c * v;
        }
    }
    out
}

/// Signal-to-interference and signal-to-artifact ratios by projection onto
/// the known target and interference signals.
pub fn sir_sar(s: &[f64], interference: &[&[f64]], e: &[f64]) -> Result<(f64, f64)> {
    check_len(s.len(), e.len())?;
    if energy(s) <= 0.0 {
        return Err(Error::Degenerate("target reference is silent".into()));
    }
    for i in interference {
        check_len(s.len(), i.len())?;
    }
    if interference.iter().all(|i| energy(i) <= 0.0) {
        return Err(Error::Degenerate("interference references are silent".into()));
    }
    let s_target = project(&[s], e);
    let mut all: Vec<&[f64]> = vec![s];
    all.extend_from_slice(interference);
    let p_all = project(&all, e);
    let e_interf: Vec<f64> = p_all.iter().zip(&s_target).map(|(a, b)| a - b).collect();
    let e_artif: Vec<f64> = e.iter().zip(&p_all).map(|(a, b)| a - b).collect();
    let t = energy(&s_target);
    Ok((ratio_db(t, energy(&e_interf)), ratio_db(t, energy(&e_artif))))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sig(n: usize, f: f64) -> Vec<f64> {
        (0..n).map(|i| (i as f64 * f).sin()).collect()
    }

    #[test]
    fn erle_examples() {
        let d = sig(1000, 0.1);
        assert!(erle(&d, &d).unwrap().abs() < 1e-12);
        let e: Vec<f64> = d.iter().map(|v| v / 10.0).collect();
        assert!((erle(&d, &e).unwrap() - 20.0).abs() < 1e-9);
        assert!(erle(&[0.0; 4], &[1.0; 4]).is_err());
    }

    #[test]
    fn si_sdr_examples() {
        let s = sig(1000, 0.1);
        let e: Vec<f64> = s.iter().map(|v| 3.0 * v).collect();
        assert_eq!(si_sdr(&s, &e).unwrap(), CAP_DB);
        let o = sig(1000, 0.0).iter().map(|_| 0.0).collect::<Vec<_>>();
        assert_eq!(si_sdr(&s, &o).unwrap(), -CAP_DB);
        assert!(si_sdr(&o, &s).is_err());
    }

    #[test]
    fn sir_sar_equal_power_interference() {
        let n = 4096;
        let s: Vec<f64> = (0..n).map(|i| if i % 2 == 0 { 1.0 } else { 0.0 }).collect();
        let i: Vec<f64> = (0..n).map(|i| if i % 2 == 1 { 1.0 } else { 0.0 }).collect();
        let e: Vec<f64> = s.iter().zip(&i).map(|(a, b)| a + b).collect();
        let (sir, sar) = sir_sar(&s, &[&i], &e).unwrap();
        assert!(sir.abs() < 1e-9);
        assert_eq!(sar, CAP_DB);
    }
}
