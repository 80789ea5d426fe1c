//! Acceptance suite. Every criterion runs in order and prints one
//! `PASS`/`FAIL` line; the process exits non-zero if any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use classm::datapipe::{point_in_polygon, random_polygon, BalancedSampler, BatchComposition, Dataset, Point, Split, SyntheticDataset};
use classm::dual_encoder::{softmax, softmax_backward, DualEncoder, DualGrads, EncoderSpec, OptimizerConfig, Part};
use classm::linalg::angle_deg;
use classm::od_color::{od_to_rgb, rgb_to_od, RgbImage};
use classm::separation::{compute_norm, reconstruct_rgb, separate_concentrations, separate_tile};
use classm::ssl_losses::{
    average_predictions, contrastive_loss, contrastive_loss_grad, lambda_prime, mixup, sharpen, total_loss, total_loss_grad, FeaturePair,
    HeSample, LabelDistribution, Scored, SslHyperParams,
};
use classm::stain_model::{build_basis, estimate_basis_for_slide, percentile_in_place, StainParams};
use classm::synthetic::{perturbed_stains, reference_stains, uniform_two_stain_slide, TextureStyle};
use classm::trainer::{StepRecord, TrainConfig, Trainer};
use classm::augment::AugmentPolicy;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------------------
// Color model, stain estimation, separation

fn od_round_trip() -> Outcome {
    let t = Instant::now();
    let mut r = rng(1);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let (w, h) = (r.random_range(1..48), r.random_range(1..48));
        let px: Vec<[f64; 3]> = (0..w * h)
            .map(|_| [r.random_range(1.0..=255.0), r.random_range(1.0..=255.0), r.random_range(1.0..=255.0)])
            .collect();
        let img = RgbImage::new(w, h, px, [255.0; 3]).map_err(|e| e.to_string())?;
        let od = rgb_to_od(&img, 1.0).map_err(|e| e.to_string())?;
        let back = od_to_rgb(&od, [255.0; 3]).map_err(|e| e.to_string())?;
        for (a, b) in img.pixels().iter().zip(back.pixels()) {
            for c in 0..3 {
                worst = worst.max((a[c] - b[c]).abs());
            }
        }
    }
    let secs = t.elapsed().as_secs_f64();
    check(worst < 1e-6 && secs < 5.0, format!("max abs error {worst:.2e}, {secs:.2} s"))
}

fn stain_recovery() -> Outcome {
    let mut worst_angle = 0.0f64;
    let mut worst_norm = 0.0f64;
    let mut slowest = 0.0f64;
    let mut r = rng(2);
    for s in 0..20u64 {
        let (vh, ve) = perturbed_stains(&mut r, 8.0);
        let slide = uniform_two_stain_slide(512, 512, vh, ve, r.random_range(0.8..1.5), 100 + s);
        let t = Instant::now();
        let basis = estimate_basis_for_slide(&slide.rgb, &format!("slide-{s}"), &StainParams::default()).map_err(|e| e.to_string())?;
        slowest = slowest.max(t.elapsed().as_secs_f64());
        worst_angle = worst_angle.max(angle_deg(&basis.v_h, &vh)).max(angle_deg(&basis.v_e, &ve));
        let true_h = percentile_in_place(&mut slide.conc_h.clone(), 0.99).expect("non-empty");
        let true_e = percentile_in_place(&mut slide.conc_e.clone(), 0.99).expect("non-empty");
        let rel = |est: f64, truth: f64| (est - truth).abs() / truth;
        worst_norm = worst_norm
            .max(rel(basis.norm_h().map_err(|e| e.to_string())?, true_h))
            .max(rel(basis.norm_e().map_err(|e| e.to_string())?, true_e));
    }
    check(
        worst_angle < 2.0 && worst_norm < 0.05 && slowest < 1.0,
        format!("max angle {worst_angle:.3} deg, max norm error {:.2}%, slowest {slowest:.3} s", worst_norm * 100.0),
    )
}

fn separation_round_trip() -> Outcome {
    let mut r = rng(3);
    let mut worst_conc = 0.0f64;
    let mut worst_rgb = 0.0f64;
    for s in 0..10u64 {
        let (vh, ve) = perturbed_stains(&mut r, 8.0);
        let slide = uniform_two_stain_slide(128, 128, vh, ve, 1.2, 200 + s);
        let basis = build_basis(vh, ve, None).map_err(|e| e.to_string())?;
        let raw = separate_concentrations(&slide.rgb, &basis);
        for i in 0..raw.h.len() {
            worst_conc = worst_conc.max((raw.h[i] - slide.conc_h[i]).abs()).max((raw.e[i] - slide.conc_e[i]).abs());
        }
        let basis = basis
            .with_norms(compute_norm(&raw.h).map_err(|e| e.to_string())?, compute_norm(&raw.e).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
        let (h, e) = separate_tile(&slide.rgb, &basis).map_err(|e| e.to_string())?;
        let rec = reconstruct_rgb(&h, &e, &basis).map_err(|e| e.to_string())?.image;
        let (a8, b8) = (slide.rgb.to_rgb8(), rec.to_rgb8());
        for (a, b) in a8.pixels().zip(b8.pixels()) {
            for c in 0..3 {
                worst_rgb = worst_rgb.max((a.0[c] as f64 - b.0[c] as f64).abs());
            }
        }
    }
    check(
        worst_conc < 1e-8 && worst_rgb < 1.0,
        format!("max concentration error {worst_conc:.2e}, max 8-bit RGB error {worst_rgb}"),
    )
}

// ---------------------------------------------------------------------------
// Loss functions against scalar oracles

mod oracle {
    pub fn contrastive(fh: &[f64], fe: &[f64], fk: &[f64], m: f64) -> f64 {
        let mut a = 0.0;
        let mut b = 0.0;
        for j in 0..fh.len() {
            a += (fh[j] - fe[j]) * (fh[j] - fe[j]);
            b += (fh[j] - fk[j]) * (fh[j] - fk[j]);
        }
        let v = a.sqrt() - b.sqrt() + m;
        if v > 0.0 {
            v
        } else {
            0.0
        }
    }

    pub fn sharpen(p: &[f64], t: f64) -> Vec<f64> {
        let mut out = vec![0.0; p.len()];
        let mut z = 0.0;
        for j in 0..p.len() {
            out[j] = p[j].powf(1.0 / t);
            z += out[j];
        }
        for v in out.iter_mut() {
            *v /= z;
        }
        out
    }

    pub fn average(ps: &[Vec<f64>]) -> Vec<f64> {
        let mut out = vec![0.0; ps[0].len()];
        for p in ps {
            for j in 0..p.len() {
                out[j] += p[j];
            }
        }
        for v in out.iter_mut() {
            *v /= ps.len() as f64;
        }
        out
    }

    pub fn mix(a: &[f64], b: &[f64], lambda: f64) -> Vec<f64> {
        let l = if lambda > 1.0 - lambda { lambda } else { 1.0 - lambda };
        let mut out = vec![0.0; a.len()];
        for j in 0..a.len() {
            out[j] = l * a[j] + (1.0 - l) * b[j];
        }
        out
    }

    /// `(prediction, target)` pairs as plain vectors.
    pub fn total(lab: &[(Vec<f64>, Vec<f64>)], unl: &[(Vec<f64>, Vec<f64>)], terms: &[f64], lu: f64, lc: f64) -> f64 {
        let mut ce = 0.0;
        for (p, y) in lab {
            for j in 0..p.len() {
                if y[j] != 0.0 {
                    let q = if p[j] < 1e-12 { 1e-12 } else { p[j] };
                    ce -= y[j] * q.ln();
                }
            }
        }
        ce /= lab.len() as f64;
        let mut l2 = 0.0;
        if !unl.is_empty() {
            let c = unl[0].0.len();
            for (p, y) in unl {
                for j in 0..c {
                    l2 += (y[j] - p[j]) * (y[j] - p[j]);
                }
            }
            l2 /= (c * unl.len()) as f64;
        }
        let mut ct = 0.0;
        for t in terms {
            ct += t;
        }
        ce + lu * l2 + lc * ct
    }
}

fn random_simplex(r: &mut impl Rng, c: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..c).map(|_| r.random_range(1e-3..1.0)).collect();
    let z: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / z).collect()
}

fn random_vec(r: &mut impl Rng, d: usize, scale: f64) -> Vec<f64> {
    (0..d).map(|_| r.random_range(-scale..scale)).collect()
}

fn ld(p: Vec<f64>) -> LabelDistribution {
    LabelDistribution::new(p).expect("valid distribution")
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn loss_oracle() -> Outcome {
    const N: usize = 10_000;
    let mut r = rng(4);
    let mut worst = [0.0f64; 5];
    for _ in 0..N {
        let d = r.random_range(1..64);
        let scale = r.random_range(0.01..50.0);
        let (fh, fe, fk) = (random_vec(&mut r, d, scale), random_vec(&mut r, d, scale), random_vec(&mut r, d, scale));
        let m = r.random_range(0.0..60.0);
        let pair = FeaturePair::new(fh.clone(), fe.clone()).map_err(|e| e.to_string())?;
        let got = contrastive_loss(&pair, &fk, m).map_err(|e| e.to_string())?;
        worst[0] = worst[0].max((got - oracle::contrastive(&fh, &fe, &fk, m)).abs());
    }
    for _ in 0..N {
        let c = r.random_range(2..=10);
        let p = random_simplex(&mut r, c);
        let t = r.random_range(0.05..1.0);
        let got = sharpen(&ld(p.clone()), t).map_err(|e| e.to_string())?;
        worst[1] = worst[1].max(max_diff(got.probs(), &oracle::sharpen(&p, t)));
    }
    for _ in 0..N {
        let c = r.random_range(2..=10);
        let k = r.random_range(1..=8);
        let ps: Vec<Vec<f64>> = (0..k).map(|_| random_simplex(&mut r, c)).collect();
        let got = average_predictions(&ps.iter().cloned().map(ld).collect::<Vec<_>>()).map_err(|e| e.to_string())?;
        worst[2] = worst[2].max(max_diff(got.probs(), &oracle::average(&ps)));
    }
    let beta = Beta::new(2.0, 2.0).expect("valid");
    for _ in 0..N {
        let c = r.random_range(2..=10);
        let (w, h) = (r.random_range(1..6), r.random_range(1..6));
        let xa = HeSample::new(w, h, random_vec(&mut r, w * h, 1.0), random_vec(&mut r, w * h, 1.0)).map_err(|e| e.to_string())?;
        let xb = HeSample::new(w, h, random_vec(&mut r, w * h, 1.0), random_vec(&mut r, w * h, 1.0)).map_err(|e| e.to_string())?;
        let (ya, yb) = (random_simplex(&mut r, c), random_simplex(&mut r, c));
        let lambda = beta.sample(&mut r);
        let got = mixup(&xa, &xb, &ld(ya.clone()), &ld(yb.clone()), lambda, true).map_err(|e| e.to_string())?;
        let err = max_diff(&got.x.h, &oracle::mix(&xa.h, &xb.h, lambda))
            .max(max_diff(&got.x.e, &oracle::mix(&xa.e, &xb.e, lambda)))
            .max(max_diff(got.y.probs(), &oracle::mix(&ya, &yb, lambda)));
        worst[3] = worst[3].max(err);
    }
    for _ in 0..N {
        let c = r.random_range(2..=10);
        let nl = r.random_range(1..12);
        let nu = r.random_range(0..24);
        let target = |r: &mut ChaCha8Rng| {
            if r.random_bool(0.5) {
                LabelDistribution::one_hot(r.random_range(0..c), c).probs().to_vec()
            } else {
                random_simplex(r, c)
            }
        };
        let lab: Vec<(Vec<f64>, Vec<f64>)> = (0..nl).map(|_| (random_simplex(&mut r, c), target(&mut r))).collect();
        let unl: Vec<(Vec<f64>, Vec<f64>)> = (0..nu).map(|_| (random_simplex(&mut r, c), random_simplex(&mut r, c))).collect();
        let terms: Vec<f64> = (0..nl + nu).map(|_| r.random_range(0.0..40.0)).collect();
        let params = SslHyperParams {
            lambda_u: r.random_range(0.0..10.0),
            lambda_c: r.random_range(0.0..1.0),
            ..Default::default()
        };
        let conv = |v: &[(Vec<f64>, Vec<f64>)]| -> Vec<Scored> { v.iter().map(|(p, y)| (ld(p.clone()), ld(y.clone()))).collect() };
        let got = total_loss(&conv(&lab), &conv(&unl), &terms, &params).map_err(|e| e.to_string())?;
        let want = oracle::total(&lab, &unl, &terms, params.lambda_u, params.lambda_c);
        worst[4] = worst[4].max((got.total - want).abs() / want.abs().max(1.0));
    }
    let ok = worst.iter().all(|w| *w < 1e-10);
    check(
        ok,
        format!(
            "max deviation contrastive {:.1e}, sharpen {:.1e}, average {:.1e}, mixup {:.1e}, total {:.1e} ({N} cases each)",
            worst[0], worst[1], worst[2], worst[3], worst[4]
        ),
    )
}

// ---------------------------------------------------------------------------
// Gradient checks

const FD_STEP: f64 = 1e-5;

fn rel_err(a: f64, n: f64) -> Option<f64> {
    let scale = a.abs().max(n.abs());
    (scale >= 1e-7).then(|| (a - n).abs() / scale)
}

fn gradient_checks() -> Outcome {
    let mut r = rng(5);
    let mut worst = [0.0f64; 4];
    let mut counts = [0usize; 4];

    // contrastive loss w.r.t. all three feature vectors
    for _ in 0..500 {
        let d = r.random_range(2..16);
        let (fh, fe, fk) = (random_vec(&mut r, d, 3.0), random_vec(&mut r, d, 3.0), random_vec(&mut r, d, 3.0));
        let m = r.random_range(0.0..5.0);
        let arg = |fh: &[f64], fe: &[f64], fk: &[f64]| {
            let pos: f64 = fh.iter().zip(fe).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            let neg: f64 = fh.iter().zip(fk).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            pos - neg + m
        };
        if arg(&fh, &fe, &fk).abs() < 1e-6 {
            continue;
        }
        let g = contrastive_loss_grad(&FeaturePair::new(fh.clone(), fe.clone()).unwrap(), &fk, m).unwrap();
        let loss = |fh: &[f64], fe: &[f64], fk: &[f64]| contrastive_loss(&FeaturePair::new(fh.to_vec(), fe.to_vec()).unwrap(), fk, m).unwrap();
        for which in 0..3 {
            for j in 0..d {
                let mut v = [fh.clone(), fe.clone(), fk.clone()];
                v[which][j] += FD_STEP;
                let plus = v.clone();
                v[which][j] -= 2.0 * FD_STEP;
                let minus = v;
                // skip stencils that straddle the kink
                if arg(&plus[0], &plus[1], &plus[2]).signum() != arg(&minus[0], &minus[1], &minus[2]).signum() {
                    continue;
                }
                let numeric = (loss(&plus[0], &plus[1], &plus[2]) - loss(&minus[0], &minus[1], &minus[2])) / (2.0 * FD_STEP);
                let analytic = [&g.d_f_h_i, &g.d_f_e_i, &g.d_f_e_k][which][j];
                if let Some(e) = rel_err(analytic, numeric) {
                    worst[0] = worst[0].max(e);
                    counts[0] += 1;
                }
            }
        }
    }

    // cross-entropy and L2 terms, through the softmax, w.r.t. logits
    for _ in 0..500 {
        let c = r.random_range(2..8);
        let logits = |r: &mut ChaCha8Rng, n: usize| -> Vec<Vec<f64>> { (0..n).map(|_| random_vec(r, c, 4.0)).collect() };
        let (zl, zu) = (logits(&mut r, 3), logits(&mut r, 4));
        let yl: Vec<Vec<f64>> = (0..3).map(|_| random_simplex(&mut r, c)).collect();
        let yu: Vec<Vec<f64>> = (0..4).map(|_| random_simplex(&mut r, c)).collect();
        let params = SslHyperParams { lambda_u: r.random_range(0.5..10.0), lambda_c: 0.0, ..Default::default() };
        let scored = |z: &[Vec<f64>], y: &[Vec<f64>]| -> Vec<Scored> { z.iter().zip(y).map(|(z, y)| (ld(softmax(z)), ld(y.clone()))).collect() };
        let g = total_loss_grad(&scored(&zl, &yl), &scored(&zu, &yu), &[], &params).unwrap();
        let eval = |zl: &[Vec<f64>], zu: &[Vec<f64>]| total_loss(&scored(zl, &yl), &scored(zu, &yu), &[], &params).unwrap().total;
        for (term, labeled) in [(1usize, true), (2, false)] {
            for i in 0..3 {
                let analytic = if labeled {
                    softmax_backward(&softmax(&zl[i]), &g.d_labeled[i])
                } else {
                    softmax_backward(&softmax(&zu[i]), &g.d_unlabeled[i])
                };
                for j in 0..c {
                    let (mut pl, mut ml, mut pu, mut mu) = (zl.clone(), zl.clone(), zu.clone(), zu.clone());
                    if labeled {
                        pl[i][j] += FD_STEP;
                        ml[i][j] -= FD_STEP;
                    } else {
                        pu[i][j] += FD_STEP;
                        mu[i][j] -= FD_STEP;
                    }
                    let numeric = (eval(&pl, &pu) - eval(&ml, &mu)) / (2.0 * FD_STEP);
                    if let Some(e) = rel_err(analytic[j], numeric) {
                        worst[term] = worst[term].max(e);
                        counts[term] += 1;
                    }
                }
            }
        }
    }

    // tiny reference network, full objective
    let spec = EncoderSpec { input_channels: 1, stem_width: 4, stage_widths: vec![8], feature_dim: 8 };
    for seed in 0..3u64 {
        let m = DualEncoder::new(&spec, 3, seed).unwrap();
        let xs: Vec<HeSample> = (0..3)
            .map(|i| {
                let mut rr = rng(100 * seed + i);
                HeSample::new(8, 8, (0..64).map(|_| rr.random()).collect(), (0..64).map(|_| rr.random()).collect()).unwrap()
            })
            .collect();
        let targets = [ld(vec![0.0, 1.0, 0.0]), ld(vec![0.2, 0.5, 0.3]), ld(vec![0.7, 0.1, 0.2])];
        let p = SslHyperParams { margin: 1.0, lambda_u: 2.0, lambda_c: 0.3, ..Default::default() };
        let g = network_grads(&m, &xs, &targets, &p);
        for part in [Part::EncH, Part::EncE, Part::Head] {
            let n = m.params(part).len();
            for _ in 0..20 {
                let idx = r.random_range(0..n);
                let mut plus = m.clone();
                plus.params_mut(part)[idx] += FD_STEP;
                let mut minus = m.clone();
                minus.params_mut(part)[idx] -= FD_STEP;
                let (lp, kp) = network_loss(&plus, &xs, &targets, &p);
                let (lm, km) = network_loss(&minus, &xs, &targets, &p);
                if kp != km {
                    continue;
                }
                let numeric = (lp - lm) / (2.0 * FD_STEP);
                let analytic = match part {
                    Part::EncH => g.enc_h[idx],
                    Part::EncE => g.enc_e[idx],
                    Part::Head => g.head[idx],
                };
                if let Some(e) = rel_err(analytic, numeric) {
                    worst[3] = worst[3].max(e);
                    counts[3] += 1;
                }
            }
        }
    }
    let ok = worst.iter().all(|w| *w < 1e-4) && counts.iter().all(|c| *c > 50);
    check(
        ok,
        format!(
            "max relative error contrastive {:.1e} ({}), cross-entropy {:.1e} ({}), L2 {:.1e} ({}), network {:.1e} ({})",
            worst[0], counts[0], worst[1], counts[1], worst[2], counts[2], worst[3], counts[3]
        ),
    )
}

/// Objective over a 3-sample batch (sample 0 labeled) with shift-by-one
/// negatives, plus the sign pattern of the hinge arguments.
fn network_loss(m: &DualEncoder, xs: &[HeSample], targets: &[LabelDistribution], p: &SslHyperParams) -> (f64, Vec<bool>) {
    let outs: Vec<_> = xs.iter().map(|x| m.predict(x).unwrap()).collect();
    let lab = vec![(outs[0].1.clone(), targets[0].clone())];
    let unl: Vec<_> = (1..xs.len()).map(|i| (outs[i].1.clone(), targets[i].clone())).collect();
    let mut active = vec![];
    let terms: Vec<f64> = (0..xs.len())
        .map(|i| {
            let t = contrastive_loss(&outs[i].0, &outs[(i + 1) % xs.len()].0.f_e, p.margin).unwrap();
            active.push(t > 0.0);
            t
        })
        .collect();
    (total_loss(&lab, &unl, &terms, p).unwrap().total, active)
}

fn network_grads(m: &DualEncoder, xs: &[HeSample], targets: &[LabelDistribution], p: &SslHyperParams) -> DualGrads {
    let fwds: Vec<_> = xs.iter().map(|x| m.forward(x).unwrap()).collect();
    let lab = vec![(fwds[0].pred.clone(), targets[0].clone())];
    let unl: Vec<_> = (1..xs.len()).map(|i| (fwds[i].pred.clone(), targets[i].clone())).collect();
    let (n, d) = (xs.len(), m.spec().feature_dim);
    let mut d_fh = vec![vec![0.0; d]; n];
    let mut d_fe = vec![vec![0.0; d]; n];
    let mut terms = vec![];
    for i in 0..n {
        let k = (i + 1) % n;
        let cg = contrastive_loss_grad(&fwds[i].pair, &fwds[k].pair.f_e, p.margin).unwrap();
        terms.push(cg.loss);
        for j in 0..d {
            d_fh[i][j] += p.lambda_c * cg.d_f_h_i[j];
            d_fe[i][j] += p.lambda_c * cg.d_f_e_i[j];
            d_fe[k][j] += p.lambda_c * cg.d_f_e_k[j];
        }
    }
    let tg = total_loss_grad(&lab, &unl, &terms, p).unwrap();
    let mut g = DualGrads::zeros_for(m);
    for i in 0..n {
        let d_pred = if i == 0 { &tg.d_labeled[0] } else { &tg.d_unlabeled[i - 1] };
        m.backward(&fwds[i], d_pred, &d_fh[i], &d_fe[i], &mut g);
    }
    g
}

// ---------------------------------------------------------------------------
// Invariants

fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|v| **v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}

fn argmax(p: &[f64]) -> usize {
    (0..p.len()).fold(0, |best, j| if p[j] > p[best] { j } else { best })
}

fn simplex_invariants() -> Outcome {
    let mut r = rng(6);
    let mut violations = Vec::new();
    for case in 0..10_000 {
        let c = r.random_range(2..=10);
        let p = random_simplex(&mut r, c);
        let t = r.random_range(0.01..1.0);
        let s = sharpen(&ld(p.clone()), t).unwrap();
        let s = s.probs();
        let sum: f64 = s.iter().sum();
        if (sum - 1.0).abs() > 1e-12 || s.iter().any(|v| *v < 0.0) {
            violations.push(format!("sharpen left the simplex at case {case}"));
        }
        if argmax(s) != argmax(&p) {
            violations.push(format!("sharpen changed the argmax at case {case}"));
        }
        if entropy(s) > entropy(&p) + 1e-12 {
            violations.push(format!("sharpen increased entropy at case {case}"));
        }
    }
    let beta = Beta::new(2.0, 2.0).expect("valid");
    for case in 0..10_000 {
        let lambda = beta.sample(&mut r);
        let lp = lambda_prime(lambda);
        if !(0.5..=1.0).contains(&lp) {
            violations.push(format!("lambda' = {lp} at case {case}"));
        }
        let c = r.random_range(2..=10);
        let (ya, yb) = (random_simplex(&mut r, c), random_simplex(&mut r, c));
        let x = HeSample::new(1, 1, vec![0.0], vec![0.0]).unwrap();
        let m = mixup(&x, &x, &ld(ya.clone()), &ld(yb.clone()), lambda, false).unwrap();
        let y = m.y.probs();
        let convex = (0..c).all(|j| {
            let (lo, hi) = (ya[j].min(yb[j]), ya[j].max(yb[j]));
            y[j] >= lo - 1e-15 && y[j] <= hi + 1e-15 && (y[j] - (lp * ya[j] + (1.0 - lp) * yb[j])).abs() < 1e-15
        });
        if !convex || (y.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            violations.push(format!("mixed label is not the convex combination at case {case}"));
        }
    }
    check(
        violations.is_empty(),
        if violations.is_empty() {
            "10000 sharpen cases, 10000 Beta(2,2) mixup draws".into()
        } else {
            format!("{} violations, first: {}", violations.len(), violations[0])
        },
    )
}

// ---------------------------------------------------------------------------
// Sampling and geometry

fn ray_cast(p: Point, poly: &[Point]) -> bool {
    let mut inside = false;
    let n = poly.len();
    let mut j = n - 1;
    for i in 0..n {
        let (xi, yi) = (poly[i][0], poly[i][1]);
        let (xj, yj) = (poly[j][0], poly[j][1]);
        if (yi > p[1]) != (yj > p[1]) && p[0] < (xj - xi) * (p[1] - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

fn sampler_and_geometry() -> Outcome {
    let comp = BatchComposition::four_class();
    let pools: Vec<Vec<usize>> = vec![(0..37).collect(), (100..105).collect(), (200..260).collect(), (300..301).collect()];
    let unlabeled: Vec<usize> = (1000..1500).collect();
    let names: Vec<String> = (0..4).map(|c| format!("c{c}")).collect();
    let sampler = BalancedSampler::new(pools.clone(), unlabeled.clone(), comp.clone(), 11, &names).map_err(|e| e.to_string())?;
    let mut bad_batches = 0;
    for b in 0..1000u64 {
        let batch = sampler.batch(b);
        let mut per_class = [0usize; 4];
        let mut ok = batch.unlabeled.len() == 32 && batch.labeled.len() == 32;
        for &(i, c) in &batch.labeled {
            per_class[c] += 1;
            ok &= pools[c].contains(&i);
        }
        ok &= per_class == [8, 8, 8, 8];
        ok &= batch.unlabeled.iter().all(|i| unlabeled.contains(i));
        let mut u = batch.unlabeled.clone();
        u.sort_unstable();
        u.dedup();
        ok &= u.len() <= 32;
        if !ok {
            bad_batches += 1;
        }
    }

    let mut r = rng(7);
    let mut disagreements = 0;
    for _ in 0..10_000 {
        let n = r.random_range(3..16);
        let radius = r.random_range(5.0..45.0);
        let poly = random_polygon(&mut r, n, 50.0, 50.0, radius);
        let p = [r.random_range(0.0..100.0), r.random_range(0.0..100.0)];
        if point_in_polygon(p, poly.vertices()) != ray_cast(p, poly.vertices()) {
            disagreements += 1;
        }
    }
    check(
        bad_batches == 0 && disagreements == 0,
        format!("{bad_batches}/1000 inexact 8/8/8/8+32 batches, {disagreements}/10000 point-in-polygon disagreements"),
    )
}

// ---------------------------------------------------------------------------
// Training

fn small_data(seed: u64) -> Dataset {
    SyntheticDataset { unlabeled: 200, val: 60, test: 60, seed, ..Default::default() }
        .build()
        .expect("synthetic data")
}

fn small_config(seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        iterations_per_epoch: 25,
        max_iterations: Some(50),
        ssl: SslHyperParams { margin: 1.0, ..Default::default() },
        augment: AugmentPolicy { crop_size: 24, ..Default::default() },
        batch: BatchComposition { per_class_labeled: vec![2, 2, 2], unlabeled_count: 6 },
        encoder: EncoderSpec { input_channels: 1, stem_width: 4, stage_widths: vec![4, 8], feature_dim: 8 },
        ..Default::default()
    }
}

fn trajectory(records: &[StepRecord]) -> Vec<[f64; 4]> {
    records.iter().map(|r| [r.ce, r.l2, r.contrastive, r.total]).collect()
}

fn determinism() -> Outcome {
    let data = small_data(9);
    let run = |deterministic: bool| -> Result<Vec<[f64; 4]>, String> {
        let cfg = TrainConfig { deterministic, ..small_config(21) };
        let mut t = Trainer::new(cfg, &data).map_err(|e| e.to_string())?;
        let report = t.fit(None).map_err(|e| e.to_string())?;
        Ok(trajectory(&report.loss_curve))
    };
    let a = run(true)?;
    let b = run(true)?;
    let c = run(false)?;
    let mut worst = 0.0f64;
    for (x, y) in a.iter().zip(&b).chain(a.iter().zip(&c)) {
        for k in 0..4 {
            worst = worst.max((x[k] - y[k]).abs());
        }
    }
    let lengths_ok = a.len() == 50 && b.len() == 50 && c.len() == 50;

    let (vh, ve) = reference_stains();
    let slide = uniform_two_stain_slide(256, 256, vh, ve, 1.0, 5);
    let json = || estimate_basis_for_slide(&slide.rgb, "rerun", &StainParams::default()).map(|b| b.to_json());
    let j1 = json().map_err(|e| e.to_string())?;
    let j2 = json().map_err(|e| e.to_string())?;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().map_err(|e| e.to_string())?;
    let j3 = pool.install(json).map_err(|e| e.to_string())?;
    let same_json = j1 == j2 && j1 == j3;
    check(
        lengths_ok && worst <= 1e-6 && same_json,
        format!("50-iteration loss trajectories differ by at most {worst:.1e}; basis JSON identical: {same_json}"),
    )
}

fn overfit_sanity() -> Outcome {
    let mut data = SyntheticDataset { labeled_per_class: 17, unlabeled: 0, val: 30, test: 30, seed: 77, ..Default::default() }
        .build()
        .map_err(|e| e.to_string())?;
    data.train_labeled.truncate(50);
    let cfg = TrainConfig {
        seed: 3,
        iterations_per_epoch: 100,
        max_iterations: Some(2000),
        mixup: false,
        ssl: SslHyperParams { lambda_u: 0.0, lambda_c: 0.0, ..Default::default() },
        augment: AugmentPolicy::identity(32),
        batch: BatchComposition { per_class_labeled: vec![4, 4, 4], unlabeled_count: 0 },
        optimizer: OptimizerConfig { learning_rate: 2e-3, ..Default::default() },
        encoder: EncoderSpec { input_channels: 1, stem_width: 8, stage_widths: vec![8, 16, 16], feature_dim: 16 },
        ..Default::default()
    };
    let mut t = Trainer::new(cfg, &data).map_err(|e| e.to_string())?;
    let mut reached = None;
    let mut last = 0.0;
    for it in 1..=2000u64 {
        t.step().map_err(|e| e.to_string())?;
        if it % 50 == 0 {
            let m = t.evaluate(Split::TrainLabeled).map_err(|e| e.to_string())?;
            last = m.accuracy;
            if m.accuracy == 1.0 {
                reached = Some(it);
                break;
            }
        }
    }
    match reached {
        Some(it) => Ok(format!("100% train accuracy on {} tiles after {it} iterations", data.train_labeled.len())),
        None => Err(format!("train accuracy {:.1}% after 2000 iterations", last * 100.0)),
    }
}

// ---------------------------------------------------------------------------
// Semi-supervised benefit

#[derive(Clone, Copy, Debug)]
enum Variant {
    Supervised,
    NoContrastive,
    Full,
}

fn desk_data(seed: u64) -> SyntheticDataset {
    SyntheticDataset { seed: 1000 + seed, style: TextureStyle::Interleaved, ..Default::default() }
}

fn desk_config(seed: u64, variant: Variant) -> TrainConfig {
    let mut cfg = TrainConfig {
        seed,
        iterations_per_epoch: 50,
        patience_epochs: 1000,
        max_epochs: 1000,
        max_iterations: Some(3000),
        rampup_iterations: 1000,
        ssl: SslHyperParams { margin: 1.0, lambda_c: 0.01, alpha: 0.75, ..Default::default() },
        augment: AugmentPolicy { crop_size: 24, ..Default::default() },
        batch: BatchComposition { per_class_labeled: vec![4, 4, 4], unlabeled_count: 20 },
        optimizer: OptimizerConfig { learning_rate: 2e-3, ..Default::default() },
        encoder: EncoderSpec { input_channels: 1, stem_width: 8, stage_widths: vec![8, 16, 16], feature_dim: 16 },
        ..Default::default()
    };
    match variant {
        Variant::Supervised => {
            cfg.ssl.lambda_u = 0.0;
            cfg.ssl.lambda_c = 0.0;
            cfg.mixup = false;
            cfg.batch.unlabeled_count = 0;
        }
        Variant::NoContrastive => cfg.ssl.lambda_c = 0.0,
        Variant::Full => {}
    }
    cfg
}

fn semi_supervised_benefit() -> Outcome {
    let t = Instant::now();
    let variants = [Variant::Supervised, Variant::NoContrastive, Variant::Full];
    let mut acc = [[0.0f64; 3]; 3];
    for seed in 0..3u64 {
        let full = desk_data(seed).build().map_err(|e| e.to_string())?;
        let labeled_only = Dataset { train_unlabeled: Vec::new(), ..full.clone() };
        for (v, variant) in variants.iter().enumerate() {
            let data = if matches!(variant, Variant::Supervised) { &labeled_only } else { &full };
            let mut trainer = Trainer::new(desk_config(seed, *variant), data).map_err(|e| e.to_string())?;
            let report = trainer.fit(None).map_err(|e| e.to_string())?;
            acc[v][seed as usize] = report.test.ok_or("no test metrics")?.balanced_accuracy;
        }
    }
    let mean = |v: usize| acc[v].iter().sum::<f64>() / 3.0;
    let (sup, noc, full) = (mean(0), mean(1), mean(2));
    let minutes = t.elapsed().as_secs_f64() / 60.0;
    let detail = format!(
        "mean balanced test accuracy: supervised {:.1}%, without contrastive {:.1}%, full {:.1}% (gain {:+.1} pp); per seed {:?}; {minutes:.1} min",
        sup * 100.0,
        noc * 100.0,
        full * 100.0,
        (full - sup) * 100.0,
        acc.map(|a| a.map(|x| (x * 1000.0).round() / 10.0)),
    );
    check(full - sup >= 0.05 && noc < full, detail)
}

// ---------------------------------------------------------------------------
// CLI golden files

fn golden_dir() -> &'static Path {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/tests/golden"))
}

fn run_cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_classm"))
        .args(["--deterministic", "--seed", "7"])
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("classm {} failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr)))
    }
}

fn same_bytes(produced: &Path, golden: &Path) -> Result<bool, String> {
    let a = std::fs::read(produced).map_err(|e| format!("{}: {e}", produced.display()))?;
    let b = std::fs::read(golden).map_err(|e| format!("{}: {e}", golden.display()))?;
    Ok(a == b)
}

fn cli_golden() -> Outcome {
    let g = golden_dir();
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let out = tmp.path();
    let p = |name: &str| out.join(name).to_string_lossy().into_owned();
    let gp = |name: &str| g.join(name).to_string_lossy().into_owned();

    run_cli(&["stain-estimate", "--input", &gp("slide.png"), "--out", &p("basis.json"), "--slide-id", "golden"])?;
    run_cli(&["separate", "--input", &gp("slide.png"), "--basis", &gp("basis.json"), "--out-h", &p("h.png"), "--out-e", &p("e.png")])?;
    run_cli(&[
        "tile", "--image", &gp("slide.png"), "--annotations", &gp("annotations.json"), "--size", "32", "--stride", "16",
        "--unlabeled-stride", "32", "--out", &p("tiles"),
    ])?;

    let mut mismatched = Vec::new();
    let mut compared = 0;
    for name in ["basis.json", "h.png", "e.png"] {
        compared += 1;
        if !same_bytes(&out.join(name), &g.join(name))? {
            mismatched.push(name.to_string());
        }
    }
    let golden_tiles = g.join("tiles");
    let mut names: Vec<String> = std::fs::read_dir(&golden_tiles)
        .map_err(|e| e.to_string())?
        .map(|e| e.map(|e| e.file_name().to_string_lossy().into_owned()).map_err(|e| e.to_string()))
        .collect::<Result<_, _>>()?;
    names.sort();
    // the run manifest records temporary paths and is not part of the golden set
    let produced = std::fs::read_dir(out.join("tiles")).map_err(|e| e.to_string())?.filter(|e| e.as_ref().map_or(true, |e| e.file_name() != "manifest.json")).count();
    if produced != names.len() {
        mismatched.push(format!("tiles/ holds {produced} files, golden has {}", names.len()));
    }
    for name in &names {
        compared += 1;
        if !same_bytes(&out.join("tiles").join(name), &golden_tiles.join(name))? {
            mismatched.push(format!("tiles/{name}"));
        }
    }
    check(
        mismatched.is_empty(),
        if mismatched.is_empty() {
            format!("{compared} files bit-identical")
        } else {
            format!("mismatched: {}", mismatched.join(", "))
        },
    )
}

// ---------------------------------------------------------------------------

fn main() {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("od round trip", od_round_trip),
        ("stain recovery", stain_recovery),
        ("separation round trip", separation_round_trip),
        ("loss oracle equivalence", loss_oracle),
        ("gradient checks", gradient_checks),
        ("simplex and mixup invariants", simplex_invariants),
        ("sampler exactness and point-in-polygon", sampler_and_geometry),
        ("determinism", determinism),
        ("overfit sanity", overfit_sanity),
        ("cli golden files", cli_golden),
        ("semi-supervised benefit", semi_supervised_benefit),
    ];
    let only: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, f) in criteria {
        if !only.is_empty() && !only.iter().any(|o| name.contains(o.as_str())) {
            continue;
        }
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into());
            Err(msg)
        });
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("PASS  {name}: {d} [{secs:.1} s]"),
            Err(d) => {
                failed += 1;
                println!("FAIL  {name}: {d} [{secs:.1} s]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
