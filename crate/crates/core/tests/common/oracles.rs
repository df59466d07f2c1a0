//! Independent reference computations shared by the integration tests and
//! the acceptance run.

use std::collections::HashMap;

use idemcodec::audio::time_shift;
use idemcodec::codec::{quantize_level, Codebook};
use idemcodec::harness::mock::{EnergyCodec, SignCodec};
use idemcodec::harness::{eval_phase, EvalReport, Trace};
use idemcodec::metrics::{codebook_use, match_rate, pearson_corr, si_sdr};
use idemcodec::training::{lambda_sweep_with, LAMBDA_CANDIDATES, QUALITY_TOLERANCE};
use idemcodec::{AudioBuffer, Codec, Tensor, TokenGrid};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

/// Exhaustive search: smallest distance between unit vectors, first index
/// on ties. A zero query compares raw vectors.
pub fn brute_force_nearest(codebook: &Tensor, q: &[f64]) -> usize {
    let zero = q.iter().all(|&x| x == 0.0);
    let qn = if zero { q.to_vec() } else { unit(q) };
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for i in 0..codebook.rows() {
        let row = codebook.row(i);
        let e = if zero { row.to_vec() } else { unit(row) };
        let d: f64 = qn.iter().zip(&e).map(|(a, b)| (a - b).powi(2)).sum();
        if d < best_d {
            best = i;
            best_d = d;
        }
    }
    best
}

pub struct QuantizerAgreement {
    pub queries: usize,
    pub agreed: usize,
    pub ties: usize,
}

/// Random codebook of `k` rows (dimension `d`) with exact duplicates and
/// power-of-two rescaled copies, queried with random vectors, codebook rows
/// (ties), rescaled rows and zero.
pub fn quantizer_agreement(seed: u64, k: usize, d: usize, n_queries: usize) -> QuantizerAgreement {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows: Vec<f64> = (0..k * d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let copy = |rows: &mut Vec<f64>, from: usize, to: usize, scale: f64| {
        for j in 0..d {
            rows[to * d + j] = rows[from * d + j] * scale;
        }
    };
    copy(&mut rows, 3, k - 1, 1.0);
    copy(&mut rows, 7, k / 2, 4.0);
    copy(&mut rows, 11, k / 3, 0.5);
    let vectors = Tensor::matrix(k, d, rows).unwrap();
    let tied = [3, 7, 11, k - 1, k / 2, k / 3];
    let mut queries = Vec::with_capacity(n_queries * d);
    let mut ties = 0;
    for i in 0..n_queries {
        let q: Vec<f64> = match i % 5 {
            0 => {
                ties += 1;
                let r = tied[rng.random_range(0..tied.len())];
                let s = [1.0, 2.0, 0.25][rng.random_range(0..3)];
                vectors.row(r).iter().map(|v| v * s).collect()
            }
            1 if i % 50 == 1 => vec![0.0; d],
            _ => (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect(),
        };
        queries.extend(q);
    }
    let queries = Tensor::matrix(n_queries, d, queries).unwrap();
    let codebook = Codebook { vectors: vectors.clone() };
    let (indices, selected) = quantize_level(&codebook, &queries).unwrap();
    let agreed = (0..n_queries)
        .filter(|&i| {
            let want = brute_force_nearest(&vectors, queries.row(i));
            indices[i] == want && selected.row(i) == vectors.row(want)
        })
        .count();
    QuantizerAgreement {
        queries: n_queries,
        agreed,
        ties,
    }
}

pub fn random_signal(rng: &mut ChaCha8Rng, n: usize) -> AudioBuffer {
    AudioBuffer::new((0..n).map(|_| rng.random_range(-1.0..1.0)).collect(), 8000).unwrap()
}

/// Largest change of SI-SDR under rescaling of the estimate, in dB.
pub fn si_sdr_scale_deviation(seeds: std::ops::Range<u64>) -> f64 {
    let mut worst = 0.0f64;
    for seed in seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_signal(&mut rng, 400);
        let noise = random_signal(&mut rng, 400);
        let y = AudioBuffer::new(x.samples().iter().zip(noise.samples()).map(|(a, b)| a + 0.3 * b).collect(), 8000).unwrap();
        let base = si_sdr(&x, &y).unwrap();
        for scale in [1e-3, 0.37, 2.0, 55.0, 1e3] {
            let scaled = AudioBuffer::new(y.samples().iter().map(|v| v * scale).collect(), 8000).unwrap();
            worst = worst.max((si_sdr(&x, &scaled).unwrap() - base).abs());
        }
    }
    worst
}

pub fn random_tokens(rng: &mut ChaCha8Rng, levels: usize, frames: usize, k: usize) -> TokenGrid {
    let lv = (0..levels).map(|_| (0..frames).map(|_| rng.random_range(0..k as u32)).collect()).collect();
    TokenGrid::from_levels(lv, k).unwrap()
}

pub fn brute_match_rate(a: &TokenGrid, b: &TokenGrid) -> Vec<f64> {
    (0..a.n_levels())
        .map(|l| {
            let mut same = 0;
            for f in 0..a.n_frames() {
                if a.get(l, f) == b.get(l, f) {
                    same += 1;
                }
            }
            same as f64 / a.n_frames() as f64
        })
        .collect()
}

pub fn brute_codebook_use(t: &TokenGrid) -> Vec<f64> {
    (0..t.n_levels())
        .map(|l| {
            let mut counts: HashMap<u32, usize> = HashMap::new();
            for f in 0..t.n_frames() {
                *counts.entry(t.get(l, f)).or_default() += 1;
            }
            let n = t.n_frames() as f64;
            let h: f64 = counts.values().map(|&c| c as f64 / n).map(|p| -p * p.ln()).sum();
            100.0 * h / (t.codebook_size() as f64).ln()
        })
        .collect()
}

/// Largest deviation of `match_rate` and `codebook_use` from the brute-force
/// versions over random grids (some with forced agreement).
pub fn token_metric_deviation(seeds: std::ops::Range<u64>) -> f64 {
    let mut worst = 0.0f64;
    for seed in seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (levels, frames, k) = (rng.random_range(1..5), rng.random_range(1..200), [2, 8, 64][rng.random_range(0..3)]);
        let a = random_tokens(&mut rng, levels, frames, k);
        let mut codes: Vec<Vec<u32>> = (0..levels).map(|l| a.level(l).to_vec()).collect();
        for level in &mut codes {
            for c in level.iter_mut() {
                if rng.random_bool(0.4) {
                    *c = rng.random_range(0..k as u32);
                }
            }
        }
        let b = TokenGrid::from_levels(codes, k).unwrap();
        for (x, y) in match_rate(&a, &b).unwrap().iter().zip(brute_match_rate(&a, &b)) {
            worst = worst.max((x - y).abs());
        }
        for (x, y) in codebook_use(&a).iter().zip(brute_codebook_use(&a)) {
            worst = worst.max((x - y).abs());
        }
    }
    worst
}

/// Sample covariance over the product of sample standard deviations.
pub fn covariance_pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let cov = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>() / (n - 1.0);
    let sx = (xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let sy = (ys.iter().map(|y| (y - my).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    cov / (sx * sy)
}

pub fn pearson_deviation(seeds: std::ops::Range<u64>) -> f64 {
    let mut worst = 0.0f64;
    for seed in seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(2..50);
        let xs: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 0.5 * x + rng.random_range(-3.0..3.0)).collect();
        worst = worst.max((pearson_corr(&xs, &ys).unwrap() - covariance_pearson(&xs, &ys)).abs());
    }
    worst
}

/// Every one of the 2^4 qualify/fail patterns over the candidates, with the
/// selection the rule prescribes.
pub fn sweep_patterns() -> Vec<(Vec<bool>, f64, f64)> {
    let base = 2.0;
    (0..16u32)
        .map(|mask| {
            let qualifies: Vec<bool> = (0..4).map(|i| mask >> i & 1 == 1).collect();
            let expected = LAMBDA_CANDIDATES
                .iter()
                .zip(&qualifies)
                .filter(|(_, q)| **q)
                .map(|(l, _)| *l)
                .next_back()
                .unwrap_or(LAMBDA_CANDIDATES[0]);
            let losses: HashMap<u64, f64> = LAMBDA_CANDIDATES
                .iter()
                .zip(&qualifies)
                .enumerate()
                .map(|(i, (l, q))| {
                    // Just inside or just outside the tolerance.
                    let ratio = if *q { 1.0 + QUALITY_TOLERANCE * (0.1 + 0.2 * i as f64) } else { 1.0 + QUALITY_TOLERANCE * 1.05 };
                    (l.to_bits(), base * ratio)
                })
                .collect();
            let got = lambda_sweep_with(base, &LAMBDA_CANDIDATES, |l| Ok(losses[&l.to_bits()])).unwrap();
            assert_eq!(got.warning.is_some(), !qualifies.iter().any(|&q| q));
            (qualifies, expected, got.selected)
        })
        .collect()
}

pub struct PhaseSanity {
    pub energy_rate: f64,
    pub sign_rate: f64,
    /// Match rate at -1 ms and +1 ms.
    pub energy_edges: (f64, f64),
    pub sign_edges: (f64, f64),
    pub correlation: Option<f64>,
    pub oracle_correlation: f64,
}

/// Direct recomputation of a codec's mean shift match rate.
pub fn brute_shift_rate(codec: &dyn Codec, clips: &[AudioBuffer], shifts: &[i64]) -> f64 {
    let mut total = 0.0;
    for x in clips {
        let base = codec.encode_tokens(x).unwrap();
        for &s in shifts {
            let t = codec.encode_tokens(&time_shift(x, s).unwrap()).unwrap();
            total += brute_match_rate(&t, &base).iter().sum::<f64>() / t.n_levels() as f64;
        }
    }
    total / (clips.len() * shifts.len()) as f64
}

/// Direct recomputation of mean SI-SDR after `n` re-encodings.
pub fn brute_si_sdr_after(codec: &dyn Codec, clips: &[AudioBuffer], n: usize) -> f64 {
    let mut acc = 0.0;
    for x0 in clips {
        let mut x = x0.clone();
        for _ in 0..n {
            let y = codec.decode_tokens(&codec.encode_tokens(&x).unwrap(), x0.len()).unwrap();
            let gain = x0.rms() / y.rms();
            x = AudioBuffer::new(y.samples().iter().map(|v| v * gain).collect(), 8000).unwrap();
        }
        acc += si_sdr(x0, &x).unwrap().clamp(-100.0, 100.0);
    }
    acc / clips.len() as f64
}

pub fn phase_sanity(clips: &[AudioBuffer], iterations: usize) -> PhaseSanity {
    let energy = EnergyCodec::new(8000, 80);
    let sign = SignCodec::new(8000, 80, 6);
    let pair: [&dyn Codec; 2] = [&energy, &sign];
    let report = eval_phase(&pair, clips, 1.0, iterations).unwrap();
    let edges = |m: usize| {
        let at = |s| report.models[m].per_shift[report.shift_index(s).unwrap()];
        (at(-8), at(8))
    };

    let sign_a = SignCodec::with_levels(8000, 80, 1, 1);
    let sign_b = SignCodec::with_levels(8000, 80, 3, 2);
    let sign_c = SignCodec::with_levels(8000, 80, 6, 4);
    let four: [&dyn Codec; 4] = [&energy, &sign_a, &sign_b, &sign_c];
    let set = eval_phase(&four, clips, 1.0, iterations).unwrap();
    let xs: Vec<f64> = four.iter().map(|c| brute_shift_rate(*c, clips, &set.shifts)).collect();
    let ys: Vec<f64> = four.iter().map(|c| brute_si_sdr_after(*c, clips, iterations)).collect();
    PhaseSanity {
        energy_rate: report.models[0].mean_match_rate,
        sign_rate: report.models[1].mean_match_rate,
        energy_edges: edges(0),
        sign_edges: edges(1),
        correlation: set.correlation,
        oracle_correlation: covariance_pearson(&xs, &ys),
    }
}

pub struct Persistence {
    /// Clips whose match rate reached 1.0 at some iteration.
    pub reached: usize,
    pub violations: Vec<String>,
}

/// Once every level matches the previous iteration, later iterations must
/// match too and produce bitwise identical audio.
pub fn fixed_point_persistence(report: &EvalReport, trace: &Trace) -> Persistence {
    let mut reached = 0;
    let mut violations = Vec::new();
    for clip in 0..report.clip_ids.len() {
        let rows: Vec<_> = report.clip_rows(clip).collect();
        let first = rows
            .iter()
            .position(|r| r.match_rate_per_level.as_ref().is_some_and(|m| m.iter().all(|&v| v == 1.0)));
        let Some(start) = first else { continue };
        reached += 1;
        for n in start..rows.len() {
            if !rows[n].match_rate_per_level.as_ref().is_some_and(|m| m.iter().all(|&v| v == 1.0)) {
                violations.push(format!("clip {clip}: match rate below 1 at iteration {}", n + 1));
            }
            let (prev, cur) = (&trace.audio[clip][n - 1], &trace.audio[clip][n]);
            if prev.samples().iter().zip(cur.samples()).any(|(a, b)| a.to_bits() != b.to_bits()) {
                violations.push(format!("clip {clip}: audio changed at iteration {}", n + 1));
            }
        }
    }
    Persistence { reached, violations }
}
