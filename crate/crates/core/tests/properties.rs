use idemcodec::audio::{match_rms, read_wav, synth_corpus, time_shift, write_wav};
use idemcodec::autodiff::{ParamId, Tape, Tensor};
use idemcodec::codec::{quantize_level, Codebook, CodecConfig, CodecModel};
use idemcodec::metrics::{codebook_use, match_rate, pearson_corr, si_sdr};
use idemcodec::training::{loss_idem_code, loss_idem_enc, loss_idem_proj, loss_reconstruction, LossWeights};
use idemcodec::{AudioBuffer, CorpusSpec, TokenGrid};
use proptest::prelude::*;

fn buffer(v: Vec<f64>) -> AudioBuffer {
    AudioBuffer::new(v, 8000).unwrap()
}

fn signal(len: std::ops::Range<usize>) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, len)
}

fn grid() -> impl Strategy<Value = TokenGrid> {
    (1usize..4, 1usize..60, prop::sample::select(vec![2usize, 5, 64])).prop_flat_map(|(l, f, k)| {
        prop::collection::vec(prop::collection::vec(0..k as u32, f), l)
            .prop_map(move |levels| TokenGrid::from_levels(levels, k).unwrap())
    })
}

fn data_chunk(bytes: &[u8]) -> Vec<u8> {
    let at = bytes.windows(4).position(|w| w == b"data").unwrap();
    let len = u32::from_le_bytes(bytes[at + 4..at + 8].try_into().unwrap()) as usize;
    bytes[at + 8..at + 8 + len].to_vec()
}

fn small_config() -> CodecConfig {
    CodecConfig {
        frame_size: 32,
        hop: 16,
        latent_dim: 8,
        code_dim: 4,
        n_levels: 2,
        codebook_size: 8,
        encoder_hidden: vec![16],
        ..CodecConfig::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn wav_rewrite_is_byte_identical(v in signal(1..400)) {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.wav"), dir.path().join("b.wav"));
        write_wav(&buffer(v.iter().map(|x| x * 1.3).collect()), &a).unwrap();
        write_wav(&read_wav(&a).unwrap(), &b).unwrap();
        prop_assert_eq!(data_chunk(&std::fs::read(&a).unwrap()), data_chunk(&std::fs::read(&b).unwrap()));
    }

    #[test]
    fn match_rms_is_idempotent(o in signal(1..300), gain in 0.01f64..10.0, r in signal(1..300)) {
        prop_assume!(o.iter().any(|&x| x != 0.0) && r.iter().any(|&x| x != 0.0));
        let o = buffer(o.iter().map(|x| x * gain).collect());
        let r = buffer(r);
        let once = match_rms(&o, &r).unwrap().audio;
        let twice = match_rms(&once, &r).unwrap().audio;
        prop_assert_eq!(once, twice);
    }

    #[test]
    fn zero_shift_is_identity(v in signal(1..300)) {
        let b = buffer(v);
        prop_assert_eq!(time_shift(&b, 0).unwrap(), b);
    }

    #[test]
    fn corpus_is_a_function_of_its_spec(seed in 0u64..1000, n in 1usize..4) {
        let spec = CorpusSpec { n_clips: n, clip_seconds: 0.05, seed, ..CorpusSpec::default() };
        prop_assert_eq!(synth_corpus(&spec).unwrap(), synth_corpus(&spec.clone()).unwrap());
    }

    #[test]
    fn si_sdr_ignores_estimate_gain(r in signal(8..200), e in signal(8..200), c in 1e-3f64..1e3) {
        let n = r.len().min(e.len());
        let (r, e) = (buffer(r[..n].to_vec()), buffer(e[..n].to_vec()));
        prop_assume!(r.rms() > 1e-3);
        let base = si_sdr(&r, &e).unwrap();
        prop_assume!(base.is_finite());
        let scaled = buffer(e.samples().iter().map(|x| x * c).collect());
        prop_assert!((si_sdr(&r, &scaled).unwrap() - base).abs() < 1e-9);
    }

    #[test]
    fn match_rate_is_symmetric_and_bounded(a in grid(), seed in any::<u64>()) {
        let mut codes: Vec<Vec<u32>> = (0..a.n_levels()).map(|l| a.level(l).to_vec()).collect();
        let k = a.codebook_size() as u64;
        for (i, c) in codes.iter_mut().flatten().enumerate() {
            if (seed >> (i % 64)) & 1 == 1 {
                *c = ((*c as u64 + seed % k) % k) as u32;
            }
        }
        let b = TokenGrid::from_levels(codes, a.codebook_size()).unwrap();
        let ab = match_rate(&a, &b).unwrap();
        prop_assert_eq!(&ab, &match_rate(&b, &a).unwrap());
        prop_assert!(ab.iter().all(|&m| (0.0..=1.0).contains(&m)));
    }

    #[test]
    fn codebook_use_ignores_order_and_labels(g in grid(), rot in 0usize..60, shift in 0u32..64) {
        let k = g.codebook_size();
        let permuted: Vec<Vec<u32>> = (0..g.n_levels())
            .map(|l| {
                let mut v: Vec<u32> = g.level(l).iter().map(|&c| (c + shift) % k as u32).collect();
                let n = v.len();
                v.rotate_left(rot % n);
                v
            })
            .collect();
        let h = TokenGrid::from_levels(permuted, k).unwrap();
        let (a, b) = (codebook_use(&g), codebook_use(&h));
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-9);
            prop_assert!((0.0..=100.0).contains(x));
        }
    }

    #[test]
    fn pearson_of_affine_image_is_the_sign(xs in prop::collection::vec(-10.0f64..10.0, 2..40), a in -5.0f64..5.0, b in -5.0f64..5.0) {
        prop_assume!(a.abs() > 1e-3);
        let spread = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - xs.iter().cloned().fold(f64::INFINITY, f64::min);
        prop_assume!(spread > 1e-3);
        let ys: Vec<f64> = xs.iter().map(|x| a * x + b).collect();
        prop_assert!((pearson_corr(&xs, &ys).unwrap() - a.signum()).abs() < 1e-9);
    }

    #[test]
    fn gradients_are_linear_in_the_loss(v in prop::collection::vec(-1.0f64..1.0, 6), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let x = Tensor::matrix(2, 3, v).unwrap();
        let grad = |wa: f64, wb: f64| {
            let t = Tape::new();
            let p = t.param(ParamId(0), x.clone());
            let l1 = t.sum(t.tanh(p).unwrap()).unwrap();
            let l2 = t.mean(t.square(p).unwrap()).unwrap();
            let l = t.add(t.scale(l1, wa).unwrap(), t.scale(l2, wb).unwrap()).unwrap();
            t.backward(l).unwrap().get(ParamId(0)).unwrap().data().to_vec()
        };
        let (g1, g2, g) = (grad(1.0, 0.0), grad(0.0, 1.0), grad(a, b));
        for i in 0..6 {
            prop_assert!((g[i] - (a * g1[i] + b * g2[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn straight_through_forward_exact_backward_identity(c in prop::collection::vec(-2.0f64..2.0, 4), q in prop::collection::vec(-2.0f64..2.0, 4)) {
        let t = Tape::new();
        let cv = t.param(ParamId(0), Tensor::vector(c));
        let qv = t.constant(Tensor::vector(q.clone()));
        let st = t.straight_through(cv, qv).unwrap();
        let forward = t.value(st);
        prop_assert_eq!(forward.data(), &q[..]);
        let g = t.backward(t.sum(st).unwrap()).unwrap();
        prop_assert_eq!(g.get(ParamId(0)).unwrap().data(), &[1.0; 4][..]);
    }

    #[test]
    fn exact_codebook_rows_quantize_to_themselves(rows in prop::collection::vec(-1.0f64..1.0, 8 * 4), pick in 0usize..8) {
        let vectors = Tensor::matrix(8, 4, rows).unwrap();
        let normed: Vec<Vec<f64>> = (0..8).map(|i| {
            let r = vectors.row(i);
            let n = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            r.iter().map(|x| x / n).collect()
        }).collect();
        // Distinct directions only.
        for i in 0..8 {
            for j in 0..i {
                let d: f64 = normed[i].iter().zip(&normed[j]).map(|(a, b)| (a - b).powi(2)).sum();
                prop_assume!(d > 1e-6);
            }
        }
        let q = Tensor::matrix(1, 4, vectors.row(pick).to_vec()).unwrap();
        let (idx, sel) = quantize_level(&Codebook { vectors: vectors.clone() }, &q).unwrap();
        prop_assert_eq!(idx, vec![pick]);
        prop_assert_eq!(sel.row(0), vectors.row(pick));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn encode_decode_shapes(seed in 0u64..50, len in 1usize..300) {
        let model = CodecModel::new(CodecConfig { seed, ..small_config() }).unwrap();
        let x = buffer((0..len).map(|i| (i as f64 * 0.05 + seed as f64).sin() * 0.5).collect());
        let t = model.encode_tokens(&x).unwrap();
        prop_assert_eq!(t.n_frames(), len.div_ceil(16));
        prop_assert_eq!(t.n_levels(), 2);
        prop_assert!(t.codes().iter().all(|&c| c < 8));
        let y = model.decode(&t, len).unwrap();
        prop_assert_eq!(y.len(), len);
        prop_assert!(y.samples().iter().all(|v| v.is_finite()));
        prop_assert_eq!(model.encode_tokens(&x).unwrap(), t);
    }

    #[test]
    fn losses_are_nonnegative_and_zero_at_minimum(seed in 0u64..50) {
        let model = CodecModel::new(CodecConfig { seed, ..small_config() }).unwrap();
        let x = buffer((0..200).map(|i| (i as f64 * 0.07 + seed as f64).sin() * 0.5).collect());
        let y = model.roundtrip(&x).unwrap();
        let w = LossWeights::default();
        prop_assert!(loss_reconstruction(&x, &y, &w).unwrap() >= 0.0);
        prop_assert_eq!(loss_reconstruction(&x, &x, &w).unwrap(), 0.0);
        prop_assert_eq!(loss_idem_enc(&model, &x, &x).unwrap(), 0.0);
        prop_assert_eq!(loss_idem_proj(&model, &x, &x).unwrap(), 0.0);
        prop_assert!(loss_idem_enc(&model, &x, &y).unwrap() >= 0.0);
        prop_assert!(loss_idem_proj(&model, &x, &y).unwrap() >= 0.0);
        prop_assert!(loss_idem_code(&model, &x, &y).unwrap() >= 0.0);
    }
}
