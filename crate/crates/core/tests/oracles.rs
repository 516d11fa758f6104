//! Each component checked against an independent, deliberately naive
//! computation of the same quantity.

use std::f64::consts::PI;

use afopt::adapt::{FilterSetup, StepMode, Stream};
use afopt::classic::{Kalman, Nlms, Rls};
use afopt::filters::{gsc_forward, mdf_forward, GscParams, MdfInputBuffer, MdfParams, SteeringVector};
use afopt::metrics;
use afopt::neural::{init_params, Hidden, LearnedOptimizer, NetShape, GROUP, POWER_FLOOR};
use afopt::scenes::{self, gen_aec_scene, gen_gsc_scene, AecSceneConfig, GscSceneConfig, SourceKind};
use afopt::signal::{Dft, OlaSynth, StreamBuffer};
use afopt::train::{adam_step, loss_sup_echo, AdamState};
use afopt::update::{FilterKind, NullUpdate, UpdateInput, UpdateRule};
use afopt::{FrameConfig, C64};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn noise(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()
}

fn cnoise(r: &mut ChaCha8Rng, n: usize) -> Vec<C64> {
    (0..n).map(|_| C64::new(r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0))).collect()
}

fn naive_dft(x: &[f64]) -> Vec<C64> {
    let n = x.len();
    (0..n / 2 + 1)
        .map(|k| {
            x.iter()
                .enumerate()
                .map(|(t, &v)| C64::from_polar(v, -2.0 * PI * (k * t) as f64 / n as f64))
                .sum()
        })
        .collect()
}

#[test]
fn dft_matches_naive_sum() {
    let x = noise(&mut rng(1), 512);
    let got = Dft::with_len(512).forward_vec(&x).unwrap();
    let want = naive_dft(&x);
    let scale = want.iter().map(|c| c.norm()).fold(0.0, f64::max);
    for (g, w) in got.iter().zip(&want) {
        assert!((g - w).norm() <= 1e-9 * scale, "{g} vs {w}");
    }
}

#[test]
fn inverse_dft_matches_naive_sum() {
    let n = 512;
    let mut spec = cnoise(&mut rng(2), n / 2 + 1);
    spec[0].im = 0.0;
    spec[n / 2].im = 0.0;
    let got = Dft::with_len(n).inverse_vec(&spec).unwrap();
    for (t, g) in got.iter().enumerate() {
        // full conjugate-symmetric sum
        let mut acc = 0.0;
        for k in 0..n {
            let c = if k <= n / 2 { spec[k] } else { spec[n - k].conj() };
            acc += (c * C64::from_polar(1.0, 2.0 * PI * (k * t) as f64 / n as f64)).re;
        }
        acc /= n as f64;
        assert!((g - acc).abs() < 1e-12, "sample {t}: {g} vs {acc}");
    }
}

#[test]
fn analysis_identity_synthesis_delays_input() {
    let cfg = FrameConfig::default();
    let (n, r) = (cfg.fft_len(), cfg.hop());
    let x = noise(&mut rng(3), 40 * r);
    let mut buf = StreamBuffer::new(cfg);
    let mut dft = Dft::new(cfg);
    let mut ola = OlaSynth::new(cfg);
    let mut out = Vec::new();
    for block in x.chunks(r) {
        let frame = buf.push(block).unwrap().to_vec();
        let spec = dft.forward_vec(&frame).unwrap();
        let back = dft.inverse_vec(&spec).unwrap();
        assert_eq!(back.len(), n);
        out.extend(ola.synthesize_vec(&back).unwrap());
    }
    let lat = cfg.latency();
    for i in lat..x.len() {
        assert!((out[i] - x[i - lat]).abs() <= 1e-6);
    }
}

/// MDF output of the newest hop against the direct convolution sum and a
/// single long transform covering the whole filter.
#[test]
fn mdf_matches_convolution_and_long_transform() {
    let cfg = FrameConfig::new(64, 32).unwrap();
    let (n, r, blocks) = (cfg.fft_len(), cfg.hop(), 4);
    let mut g = rng(4);
    let ir = noise(&mut g, blocks * r);
    let u = noise(&mut g, 20 * r);
    let theta = MdfParams::from_impulse_response(&ir, blocks, cfg).unwrap();

    let mut buf = StreamBuffer::new(cfg);
    let mut dft = Dft::new(cfg);
    let mut line = MdfInputBuffer::new(blocks, cfg.bins());
    let zero_d = vec![C64::default(); cfg.bins()];
    for (f, block) in u.chunks(r).enumerate() {
        let frame = buf.push(block).unwrap().to_vec();
        line.push(&dft.forward_vec(&frame).unwrap()).unwrap();
        let (y, e) = mdf_forward(&theta, &line, &zero_d).unwrap();
        assert!(y.iter().zip(&e).all(|(a, b)| (a + b).norm() < 1e-12));
        let y_time = dft.inverse_vec(&y).unwrap();
        let newest = f * r;

        // direct sum over the full response
        for i in 0..r {
            let t = newest + i;
            let want: f64 = (0..ir.len()).filter(|&j| j <= t).map(|j| ir[j] * u[t - j]).sum();
            assert!((y_time[n - r + i] - want).abs() < 1e-10, "frame {f} sample {i}");
        }

        // one transform of length 2 B R over the most recent window
        let long = 2 * blocks * r;
        if newest + r >= long {
            let start = newest + r - long;
            let mut dl = Dft::with_len(long);
            let mut h = ir.clone();
            h.resize(long, 0.0);
            let hs = dl.forward_vec(&h).unwrap();
            let us = dl.forward_vec(&u[start..start + long]).unwrap();
            let prod: Vec<C64> = hs.iter().zip(&us).map(|(a, b)| a * b).collect();
            let yl = dl.inverse_vec(&prod).unwrap();
            for i in 0..r {
                assert!((yl[long - r + i] - y_time[n - r + i]).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn injected_true_path_cancels_linear_echo() {
    let cfg = FrameConfig::default();
    let path = scenes::gen_echo_path(9, 0.3).unwrap();
    let far = SourceKind::Speech.draw(&mut rng(5), 4 * 16000);
    let echo = scenes::convolve(&far, &path);
    let mic = echo[..far.len()].to_vec();
    let setup = FilterSetup::aec(cfg, 8).unwrap();
    let mut s = Stream::new(setup, &NullUpdate, StepMode::P);
    s.state_mut().theta = MdfParams::from_impulse_response(&path, 8, cfg).unwrap().into_weights();
    let out = s.run(&[&far, &mic]).unwrap();
    let erle = metrics::erle_gated(&mic, &out, &far, cfg.latency(), cfg.hop()).unwrap();
    assert!(erle >= 50.0, "{erle}");
}

#[test]
fn gsc_matches_dense_projection() {
    let cfg = FrameConfig::new(32, 16).unwrap();
    let m = 4;
    let k_n = cfg.bins();
    let v = SteeringVector::from_delays(&[-2e-4, -0.7e-4, 0.7e-4, 2e-4], cfg);
    let mut g = rng(6);
    let u = cnoise(&mut g, m * k_n);
    let mut p = GscParams::zeros(v.clone());
    p.weights = cnoise(&mut g, m * k_n);
    let got = gsc_forward(&p, &u).unwrap();
    let vals = v.values();
    for k in 0..k_n {
        let vk: Vec<C64> = (0..m).map(|i| vals[i * k_n + k]).collect();
        let uk: Vec<C64> = (0..m).map(|i| u[i * k_n + k]).collect();
        // P = I - v v^H / M as a dense matrix
        let mut proj = vec![C64::default(); m * m];
        for i in 0..m {
            for j in 0..m {
                let id = if i == j { 1.0 } else { 0.0 };
                proj[i * m + j] = C64::new(id, 0.0) - vk[i] * vk[j].conj() / m as f64;
            }
        }
        let z: Vec<C64> = (0..m).map(|i| (0..m).map(|j| proj[i * m + j] * uk[j]).sum()).collect();
        let fixed: C64 = (0..m).map(|i| vk[i].conj() * uk[i]).sum::<C64>() / m as f64;
        let want = fixed - (0..m).map(|i| p.weights[i * k_n + k].conj() * z[i]).sum::<C64>();
        assert!((got[k] - want).norm() < 1e-12, "bin {k}");
    }
}

fn scalar_input<'a>(kind: FilterKind, x: &'a [C64], e: &'a [C64], th: &'a [C64]) -> UpdateInput<'a> {
    UpdateInput {
        kind,
        taps: x.len(),
        bins: 1,
        input: x,
        error: e,
        theta: th,
    }
}

#[test]
fn kalman_matches_scalar_recursion() {
    let kf = Kalman::default();
    let mut st = kf.init_state(1, 1);
    let mut g = rng(7);
    let w_true = 0.7;
    let mut theta = 0.0;
    let (a2, q0) = (kf.transition * kf.transition, kf.process_floor);
    let (mut p, mut psi) = (kf.initial_covariance, 0.0);
    let mut th_oracle = 0.0;
    for step in 0..100 {
        let u: f64 = g.gen_range(-2.0..2.0);
        let d = w_true * u + 0.05 * g.gen_range(-1.0..1.0);
        let e = d - theta * u;
        let mut delta = [C64::default()];
        let (x, ev, th) = ([C64::new(u, 0.0)], [C64::new(e, 0.0)], [C64::new(theta, 0.0)]);
        kf.step(&mut st, &scalar_input(FilterKind::Mdf, &x, &ev, &th), &mut delta).unwrap();

        // textbook scalar filter
        let e_o = d - th_oracle * u;
        p = a2 * p + (1.0 - a2) * th_oracle * th_oracle + q0;
        let gain = p * u / (u * u * p + psi + kf.eps);
        let dlt = gain * e_o;
        p *= 1.0 - gain * u;
        psi = kf.noise_smoothing * psi + (1.0 - kf.noise_smoothing) * e_o * e_o;
        th_oracle += dlt;

        assert!((delta[0].re - dlt).abs() <= 1e-12 * (1.0 + dlt.abs()), "step {step}");
        assert_eq!(delta[0].im, 0.0);
        assert!((st.covariance[0] - p).abs() <= 1e-15 + 1e-9 * p, "step {step}");
        theta += delta[0].re;
    }
    assert!((theta - w_true).abs() < 0.05, "{theta}");
}

/// `M x M` complex solve by Gaussian elimination with partial pivoting.
fn solve(mut a: Vec<C64>, mut b: Vec<C64>, m: usize) -> Vec<C64> {
    for c in 0..m {
        let piv = (c..m).max_by(|&i, &j| a[i * m + c].norm().total_cmp(&a[j * m + c].norm())).unwrap();
        for j in 0..m {
            a.swap(c * m + j, piv * m + j);
        }
        b.swap(c, piv);
        for r in c + 1..m {
            let f = a[r * m + c] / a[c * m + c];
            for j in c..m {
                let v = a[c * m + j];
                a[r * m + j] -= f * v;
            }
            let v = b[c];
            b[r] -= f * v;
        }
    }
    let mut x = vec![C64::default(); m];
    for c in (0..m).rev() {
        let s: C64 = (c + 1..m).map(|j| a[c * m + j] * x[j]).sum();
        x[c] = (b[c] - s) / a[c * m + c];
    }
    x
}

#[test]
fn rls_matches_weighted_least_squares() {
    for m in [1, 3] {
        let rls = Rls::new(0.95, 0.5).unwrap();
        let mut st = rls.init_state(m, 1);
        let mut g = rng(8 + m as u64);
        let w_true = cnoise(&mut g, m);
        let mut theta = vec![C64::default(); m];
        let (mut zs, mut ys) = (Vec::new(), Vec::new());
        for step in 0..60 {
            let z = cnoise(&mut g, m);
            let y: C64 = w_true.iter().zip(&z).map(|(w, z)| w.conj() * z).sum::<C64>() + cnoise(&mut g, 1)[0] * 0.1;
            let e = y - theta.iter().zip(&z).map(|(t, z)| t.conj() * z).sum::<C64>();
            let mut delta = vec![C64::default(); m];
            rls.step(&mut st, &scalar_input(FilterKind::Gsc, &z, &[e], &theta), &mut delta).unwrap();
            theta.iter_mut().zip(&delta).for_each(|(t, d)| *t += d);
            zs.push(z);
            ys.push(y);

            // argmin sum_i g^(n-i) |y_i - theta^H z_i|^2 + g^n delta |theta|^2
            let n = zs.len();
            let gam = rls.forgetting;
            let mut phi = vec![C64::default(); m * m];
            let mut rhs = vec![C64::default(); m];
            for i in 0..m {
                phi[i * m + i] = C64::new(gam.powi(n as i32) * rls.regularizer, 0.0);
            }
            for (i, (z, y)) in zs.iter().zip(&ys).enumerate() {
                let wgt = gam.powi((n - 1 - i) as i32);
                for a in 0..m {
                    for b in 0..m {
                        phi[a * m + b] += z[a] * z[b].conj() * wgt;
                    }
                    rhs[a] += z[a] * y.conj() * wgt;
                }
            }
            let want = solve(phi, rhs, m);
            for (t, w) in theta.iter().zip(&want) {
                assert!((t - w).norm() < 1e-6, "M={m} step {step}: {t} vs {w}");
            }
        }
    }
}

// ---- straight-line network --------------------------------------------

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn gate(p: C64) -> f64 {
    sigmoid(p.re) * sigmoid(p.im)
}

fn matvec(w: &[C64], rows: usize, x: &[C64]) -> Vec<C64> {
    let cols = x.len();
    (0..rows).map(|i| (0..cols).map(|j| w[i * cols + j] * x[j]).sum()).collect()
}

fn gru(w: &[C64], u: &[C64], b: &[C64], x: &[C64], h: &[C64]) -> Vec<C64> {
    let hd = h.len();
    let wx = matvec(w, 3 * hd, x);
    let uh = matvec(u, 3 * hd, h);
    (0..hd)
        .map(|i| {
            let r = gate(wx[i] + uh[i] + b[i]);
            let z = gate(wx[hd + i] + uh[hd + i] + b[hd + i]);
            let p = wx[2 * hd + i] + uh[2 * hd + i] * r + b[2 * hd + i];
            let n = C64::new(p.re.tanh(), p.im.tanh());
            h[i] * (1.0 - z) + n * z
        })
        .collect()
}

/// One optimizer step written out band by band from the parameter blocks.
fn reference_step(
    net: &LearnedOptimizer,
    kind: FilterKind,
    x: &[C64],
    e: &[C64],
    th: &[C64],
    h1: &mut [Vec<C64>],
    h2: &mut [Vec<C64>],
) -> Vec<C64> {
    let s = net.shape();
    let (t_n, k_n, hd) = (s.taps, s.bins, s.hidden);
    let p = net.params();
    let blk = |n: &str| p.block(n).unwrap();
    let enc = |c: C64| C64::new(c.re.asinh(), c.im.asinh());
    let mut delta = vec![C64::default(); t_n * k_n];
    for band in 0..k_n.div_ceil(GROUP) {
        let mut feat = Vec::new();
        for j in 0..GROUP {
            let k = band * GROUP + j;
            for f in 0..2 * t_n + 1 {
                let v = if k >= k_n {
                    C64::default()
                } else if f < t_n {
                    x[f * k_n + k]
                } else if f == t_n {
                    e[k]
                } else {
                    th[(f - t_n - 1) * k_n + k]
                };
                feat.push(enc(v));
            }
        }
        let a: Vec<C64> = matvec(blk("down.w"), hd, &feat).iter().zip(blk("down.b")).map(|(a, b)| a + b).collect();
        h1[band] = gru(blk("gru1.w"), blk("gru1.u"), blk("gru1.b"), &a, &h1[band]);
        h2[band] = gru(blk("gru2.w"), blk("gru2.u"), blk("gru2.b"), &h1[band], &h2[band]);
        let o: Vec<C64> = matvec(blk("up.w"), GROUP * t_n, &h2[band]).iter().zip(blk("up.b")).map(|(a, b)| a + b).collect();
        for j in 0..GROUP {
            let k = band * GROUP + j;
            if k >= k_n {
                continue;
            }
            let pw: f64 = (0..t_n).map(|t| x[t * k_n + k].norm_sqr()).sum::<f64>() + POWER_FLOOR;
            for t in 0..t_n {
                let xv = x[t * k_n + k];
                let dir = match kind {
                    FilterKind::Mdf => xv.conj() * e[k],
                    FilterKind::Gsc => xv * e[k].conj(),
                };
                delta[t * k_n + k] = o[j * t_n + t] * dir / pw;
            }
        }
    }
    delta
}

#[test]
fn learned_step_matches_straight_line_network() {
    let shape = NetShape::new(6, 3, 13).unwrap();
    let mut params = init_params(shape, 21);
    // nonzero biases so every term is exercised
    let mut g = rng(22);
    for name in ["down.b", "gru1.b", "gru2.b", "up.b"] {
        for c in params.block_mut(name).unwrap() {
            *c = C64::new(g.gen_range(-0.3..0.3), g.gen_range(-0.3..0.3));
        }
    }
    let net = LearnedOptimizer::new(params);
    let (t_n, k_n): (usize, usize) = (3, 13);
    for kind in [FilterKind::Mdf, FilterKind::Gsc] {
        let mut hidden = Hidden::zeros(shape);
        let bands = k_n.div_ceil(GROUP);
        let mut h1 = vec![vec![C64::default(); 6]; bands];
        let mut h2 = h1.clone();
        for step in 0..3 {
            let x: Vec<C64> = cnoise(&mut g, t_n * k_n).iter().map(|c| c * 20.0).collect();
            let e: Vec<C64> = cnoise(&mut g, k_n).iter().map(|c| c * 5.0).collect();
            let th = cnoise(&mut g, t_n * k_n);
            let input = UpdateInput {
                kind,
                taps: t_n,
                bins: k_n,
                input: &x,
                error: &e,
                theta: &th,
            };
            let mut got = vec![C64::default(); t_n * k_n];
            net.step(&mut hidden, &input, &mut got).unwrap();
            let want = reference_step(&net, kind, &x, &e, &th, &mut h1, &mut h2);
            for (i, (a, b)) in got.iter().zip(&want).enumerate() {
                assert!((a - b).norm() <= 1e-12 * (1.0 + b.norm()), "{kind:?} step {step} entry {i}: {a} vs {b}");
            }
            // hidden layout is [H x bands]
            for band in 0..bands {
                for i in 0..6 {
                    assert!((hidden.h2[i * bands + band] - h2[band][i]).norm() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn adam_matches_reference_and_descends_a_bowl() {
    let mut g = rng(23);
    let target: Vec<f64> = (0..8).map(|_| g.gen_range(-1.0..1.0)).collect();
    let curv: Vec<f64> = (0..8).map(|_| g.gen_range(0.5..4.0)).collect();
    let loss = |p: &[f64]| p.iter().zip(&target).zip(&curv).map(|((p, t), c)| c * (p - t).powi(2)).sum::<f64>();
    let mut p = vec![0.0; 8];
    let mut st = AdamState::new(8);
    let (mut q, mut m, mut v) = (p.clone(), vec![0.0; 8], vec![0.0; 8]);
    let start = loss(&p);
    for step in 1..=400 {
        let lr = if step <= 100 { 0.05 } else { 0.05 * 0.97f64.powi(step - 100) };
        let grad: Vec<f64> = p.iter().zip(&target).zip(&curv).map(|((p, t), c)| 2.0 * c * (p - t)).collect();
        adam_step(&mut st, &mut p, &grad, lr).unwrap();

        let gq: Vec<f64> = q.iter().zip(&target).zip(&curv).map(|((p, t), c)| 2.0 * c * (p - t)).collect();
        for i in 0..8 {
            m[i] = 0.9 * m[i] + 0.1 * gq[i];
            v[i] = 0.999 * v[i] + 0.001 * gq[i] * gq[i];
            let mh = m[i] / (1.0 - 0.9f64.powi(step));
            let vh = v[i] / (1.0 - 0.999f64.powi(step));
            q[i] -= lr * mh / (vh.sqrt() + 1e-8);
        }
        for (a, b) in p.iter().zip(&q) {
            assert!((a - b).abs() < 1e-12, "step {step}");
        }
    }
    assert!(loss(&p) < 1e-6 * start, "{} from {start}", loss(&p));
}

#[test]
fn echo_path_truncation_loses_under_one_percent() {
    // amplitude exp(-6.9 t / T60): tail energy fraction beyond 2048 taps
    let (rt60, fs, taps): (f64, f64, f64) = (0.3, 16000.0, 2048.0);
    let rate = 2.0 * 6.9 / rt60;
    let lost = (-rate * taps / fs).exp();
    assert!(lost < 0.01, "{lost}");

    // the generated paths follow that envelope: fit the decay of their
    // energy per 256-tap window and extrapolate past the last tap
    let mut slopes = Vec::new();
    for seed in 0..20 {
        let w = scenes::gen_echo_path(seed, rt60).unwrap();
        let e: Vec<f64> = w.chunks(256).map(|c| c.iter().map(|v| v * v).sum::<f64>()).collect();
        // skip the first window (direct-path onset)
        let ys: Vec<f64> = e[1..].iter().map(|v| v.ln()).collect();
        let xs: Vec<f64> = (1..e.len()).map(|i| (i * 256) as f64 / fs).collect();
        let (mx, my) = (xs.iter().sum::<f64>() / xs.len() as f64, ys.iter().sum::<f64>() / ys.len() as f64);
        let num: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
        let den: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
        slopes.push(-num / den);
    }
    let mean = slopes.iter().sum::<f64>() / slopes.len() as f64;
    assert!((mean - rate).abs() < 0.1 * rate, "fitted {mean}, expected {rate}");
    assert!((-mean * taps / fs).exp() < 0.01);
}

#[test]
fn delay_and_sum_gains_ten_log_m() {
    let frames = FrameConfig::default();
    for (mics, seed) in [(4, 31), (6, 32)] {
        let cfg = GscSceneConfig {
            mics,
            doa_deg: 25.0,
            interferer_doa_deg: None,
            tail_db: None,
            snr_db: 10.0,
            ..GscSceneConfig::default()
        };
        let sc = gen_gsc_scene(seed, &cfg, &SourceKind::Speech, frames).unwrap();
        let setup = FilterSetup::gsc(frames, sc.steering.clone()).unwrap();
        let run = |sig: &[Vec<f64>]| {
            let views: Vec<&[f64]> = sig.iter().map(Vec::as_slice).collect();
            Stream::new(setup.clone(), &NullUpdate, StepMode::P).run(&views).unwrap()
        };
        let energy = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>();
        let snr_in = sc.target_images.iter().map(|x| energy(x)).sum::<f64>() / sc.noise.iter().map(|x| energy(x)).sum::<f64>();
        let snr_out = energy(&run(&sc.target_images)) / energy(&run(&sc.noise));
        let gain = 10.0 * (snr_out / snr_in).log10();
        let want = 10.0 * (mics as f64).log10();
        assert!((gain - want).abs() <= 0.5, "M={mics}: {gain:.2} dB vs {want:.2} dB");
    }
}

#[test]
fn gated_erle_matches_hand_segmentation() {
    let frame = 256;
    let n = 32 * frame;
    let mut g = rng(33);
    let mut far = noise(&mut g, n);
    far[..n / 2].iter_mut().for_each(|v| *v = 0.0);
    let d: Vec<f64> = (0..n).map(|i| far[i] * 0.8 + 0.05 * g.gen_range(-1.0..1.0)).collect();
    let e: Vec<f64> = (0..n).map(|i| if i < n / 2 { d[i] } else { d[i] * 0.1 }).collect();

    let gated = metrics::erle_gated(&d, &e, &far, 0, frame).unwrap();
    let ungated = metrics::erle(&d, &e).unwrap();
    let active = n / 2..n;
    let hand = 10.0 * (d[active.clone()].iter().map(|v| v * v).sum::<f64>() / e[active].iter().map(|v| v * v).sum::<f64>()).log10();
    assert!((gated - hand).abs() < 1e-9, "{gated} vs {hand}");
    assert!((gated - 20.0).abs() < 1e-9);
    assert!(ungated < gated - 1.0);
}

#[test]
fn sir_sar_matches_gram_schmidt_projection() {
    let mut g = rng(34);
    let n = 4000;
    let s = noise(&mut g, n);
    let i1 = noise(&mut g, n);
    let i2: Vec<f64> = noise(&mut g, n).iter().zip(&s).map(|(a, b)| a + 0.3 * b).collect();
    let art = noise(&mut g, n);
    let (a, b, c, d) = (0.9, 0.4, -0.25, 0.1);
    let e: Vec<f64> = (0..n).map(|k| a * s[k] + b * i1[k] + c * i2[k] + d * art[k]).collect();
    let (sir, sar) = metrics::sir_sar(&s, &[&i1, &i2], &e).unwrap();

    // orthonormal bases by modified Gram-Schmidt
    fn basis(vs: &[&[f64]]) -> Vec<Vec<f64>> {
        let mut out: Vec<Vec<f64>> = Vec::new();
        for v in vs {
            let mut w = v.to_vec();
            for q in &out {
                let p: f64 = q.iter().zip(&w).map(|(a, b)| a * b).sum();
                w.iter_mut().zip(q).for_each(|(x, y)| *x -= p * y);
            }
            let nrm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            w.iter_mut().for_each(|x| *x /= nrm);
            out.push(w);
        }
        out
    }
    let project = |q: &[Vec<f64>], x: &[f64]| {
        let mut out = vec![0.0; x.len()];
        for b in q {
            let p: f64 = b.iter().zip(x).map(|(a, b)| a * b).sum();
            out.iter_mut().zip(b).for_each(|(o, v)| *o += p * v);
        }
        out
    };
    let e_target = project(&basis(&[&s]), &e);
    let e_all = project(&basis(&[&s, &i1, &i2]), &e);
    let e_interf: Vec<f64> = e_all.iter().zip(&e_target).map(|(a, b)| a - b).collect();
    let e_artif: Vec<f64> = e.iter().zip(&e_all).map(|(a, b)| a - b).collect();
    let en = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>();
    let sir_o = 10.0 * (en(&e_target) / en(&e_interf)).log10();
    let sar_o = 10.0 * (en(&e_target) / en(&e_artif)).log10();
    assert!((sir - sir_o).abs() < 1e-6, "{sir} vs {sir_o}");
    assert!((sar - sar_o).abs() < 1e-6, "{sar} vs {sar_o}");
}

#[test]
fn losses_match_their_formulas() {
    let mut g = rng(35);
    for _ in 0..20 {
        let n = g.gen_range(10..300);
        let s = noise(&mut g, n);
        let e = noise(&mut g, n);
        let dot: f64 = s.iter().zip(&e).map(|(a, b)| a * b).sum();
        let ss: f64 = s.iter().map(|v| v * v).sum();
        let alpha = dot / ss;
        let num: f64 = s.iter().map(|v| (alpha * v).powi(2)).sum();
        let den: f64 = s.iter().zip(&e).map(|(a, b)| (b - alpha * a).powi(2)).sum();
        let want = 10.0 * (num / den).log10();
        assert!((metrics::si_sdr(&s, &e).unwrap() - want).abs() < 1e-9);

        let mse: f64 = s.iter().zip(&e).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n as f64;
        assert!((loss_sup_echo(&s, &e).unwrap() - (mse + 1e-12).ln()).abs() < 1e-12);
    }
}

/// A rule that always proposes the same increment.
#[derive(Clone)]
struct Fixed(Vec<C64>);

impl UpdateRule for Fixed {
    type State = ();

    fn init_state(&self, _: usize, _: usize) {}

    fn step(&self, _: &mut (), _: &UpdateInput<'_>, delta: &mut [C64]) -> afopt::Result<()> {
        delta.copy_from_slice(&self.0);
        Ok(())
    }
}

#[test]
fn final_update_pass_adds_the_filtered_increment() {
    let cfg = FrameConfig::new(64, 32).unwrap();
    let setup = FilterSetup::aec(cfg, 3).unwrap();
    let mut g = rng(36);
    let inc: Vec<C64> = cnoise(&mut g, setup.weights_len()).iter().map(|c| c * 0.01).collect();
    let far = noise(&mut g, 30 * 32);
    let mic = noise(&mut g, 30 * 32);
    let rule = Fixed(inc.clone());
    let p = Stream::new(setup.clone(), &rule, StepMode::P).run(&[&far, &mic]).unwrap();
    let pu = Stream::new(setup.clone(), &rule, StepMode::PU).run(&[&far, &mic]).unwrap();

    let mut fixed = Stream::new(setup.clone(), &NullUpdate, StepMode::P);
    fixed.state_mut().theta = inc;
    let with = fixed.run(&[&far, &mic]).unwrap();
    let without = Stream::new(setup, &NullUpdate, StepMode::P).run(&[&far, &mic]).unwrap();
    for i in 0..p.len() {
        let want = with[i] - without[i];
        assert!(((pu[i] - p[i]) - want).abs() < 1e-12, "sample {i}");
    }
}

#[test]
fn two_predict_steps_reduce_the_residual_at_least_as_much_as_one() {
    let cfg = FrameConfig::default();
    let setup = FilterSetup::aec(cfg, 8).unwrap();
    let nlms = Nlms::default();
    let scene_cfg = AecSceneConfig {
        duration: 3.0,
        ..AecSceneConfig::default()
    };
    let mean_residual = |mode: StepMode| {
        let mut total = 0.0;
        for seed in 0..6 {
            let sc = gen_aec_scene(40 + seed, &scene_cfg, &SourceKind::Speech).unwrap();
            let out = Stream::new(setup.clone(), &nlms, mode).run(&[&sc.u, &sc.d]).unwrap();
            total += out.iter().map(|v| v * v).sum::<f64>() / out.len() as f64;
        }
        total / 6.0
    };
    for final_update in [false, true] {
        let one = mean_residual(StepMode::new(1, final_update).unwrap());
        let two = mean_residual(StepMode::new(2, final_update).unwrap());
        assert!(two <= one, "final_update={final_update}: C=2 {two} vs C=1 {one}");
    }
}
