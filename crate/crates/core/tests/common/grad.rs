//! Analytic gradients against central finite differences.
//!
//! Detached quantities (stop-gradient outputs, straight-through offsets and
//! nearest-neighbor choices) are held at their values from the unperturbed
//! pass, so the differences are taken on the same function the backward
//! pass differentiates.

use std::sync::Arc;

use idemcodec::autodiff::{ParamId, SparseMap, Tape, Tensor, Var};
use idemcodec::codec::{CodecConfig, CodecModel, EncodeOptions};
use idemcodec::training::{idem_graph, match_rms_graph, reconstruction_graph, vq_graph, Batch, LossWeights, SpectralBank};
use idemcodec::{AudioBuffer, IdemKind, Result};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const INSTANCES: u64 = 20;
pub const TOLERANCE: f64 = 1e-4;
const STEP: f64 = 1e-6;

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale < 1e-9 { norm(&diff) } else { norm(&diff) / scale }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Values bounded away from zero, with random sign.
fn signed(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let mut t = random(rng, shape, 0.2, 1.5);
    for v in t.data_mut() {
        if rng.random_bool(0.5) {
            *v = -*v;
        }
    }
    t
}

type Build = dyn Fn(&Tape, &[Var]) -> Result<Var>;

/// Reduces any output to a scalar with fixed pseudo-random weights.
fn reduce(tape: &Tape, out: Var) -> Result<Var> {
    let shape = tape.value(out).shape().to_vec();
    if shape.iter().product::<usize>() == 1 {
        return tape.sum(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let w = random(&mut rng, &shape, -1.0, 1.0);
    tape.sum(tape.mul(out, tape.constant(w))?)
}

fn eval(inputs: &[Tensor], build: &Build, tape: &Tape) -> Result<Var> {
    let vars: Vec<Var> = inputs.iter().enumerate().map(|(i, t)| tape.param(ParamId(i), t.clone())).collect();
    reduce(tape, build(tape, &vars)?)
}

fn op_error(inputs: &[Tensor], build: &Build) -> f64 {
    let tape = Tape::recording();
    let loss = eval(inputs, build, &tape).unwrap();
    let detached = tape.take_detached();
    let grads = tape.backward(loss).unwrap();
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            analytic.push(grads.get(ParamId(i)).map_or(0.0, |g| g.data()[j]));
            let at = |delta: f64| {
                let mut moved = inputs.to_vec();
                moved[i].data_mut()[j] += delta;
                let t = Tape::replaying(detached.clone());
                let l = eval(&moved, build, &t).unwrap();
                t.item(l)
            };
            numeric.push((at(STEP) - at(-STEP)) / (2.0 * STEP));
        }
    }
    relative_error(&analytic, &numeric)
}

struct OpCase {
    name: &'static str,
    inputs: fn(&mut ChaCha8Rng) -> Vec<Tensor>,
    build: Box<Build>,
}

fn case(name: &'static str, inputs: fn(&mut ChaCha8Rng) -> Vec<Tensor>, build: impl Fn(&Tape, &[Var]) -> Result<Var> + 'static) -> OpCase {
    OpCase {
        name,
        inputs,
        build: Box::new(build),
    }
}

fn sparse_map(seed: u64) -> Arc<SparseMap> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let entries = (0..30)
        .map(|_| (rng.random_range(0..6u32), rng.random_range(0..12u32), rng.random_range(-1.0..1.0)))
        .collect();
    Arc::new(SparseMap::new(12, 6, entries).unwrap())
}

fn op_cases() -> Vec<OpCase> {
    let m34 = |r: &mut ChaCha8Rng| vec![random(r, &[3, 4], -1.0, 1.0)];
    let m34x2 = |r: &mut ChaCha8Rng| vec![random(r, &[3, 4], -1.0, 1.0), random(r, &[3, 4], -1.0, 1.0)];
    let positive = |r: &mut ChaCha8Rng| vec![random(r, &[3, 4], 0.5, 2.0)];
    let map = sparse_map(5);
    vec![
        case("matmul", |r| vec![random(r, &[3, 4], -1.0, 1.0), random(r, &[4, 2], -1.0, 1.0)], |t, v| t.matmul(v[0], v[1])),
        case(
            "affine",
            |r| vec![random(r, &[3, 4], -1.0, 1.0), random(r, &[4, 2], -1.0, 1.0), random(r, &[2], -1.0, 1.0)],
            |t, v| t.affine(v[0], v[1], v[2]),
        ),
        case("add", m34x2, |t, v| t.add(v[0], v[1])),
        case("sub", m34x2, |t, v| t.sub(v[0], v[1])),
        case("mul", m34x2, |t, v| t.mul(v[0], v[1])),
        case("scale", m34, |t, v| t.scale(v[0], -1.7)),
        case("add_scalar", m34, |t, v| t.add_scalar(t.square(v[0])?, 0.3)),
        case("tanh", |r| vec![random(r, &[3, 4], -2.0, 2.0)], |t, v| t.tanh(v[0])),
        case("square", m34, |t, v| t.square(v[0])),
        case("sqrt", positive, |t, v| t.sqrt(v[0])),
        case("ln", positive, |t, v| t.ln(v[0])),
        case("recip", positive, |t, v| t.recip(v[0])),
        case("abs", |r| vec![signed(r, &[3, 4])], |t, v| t.abs(v[0])),
        case("sum", m34, |t, v| t.sum(t.square(v[0])?)),
        case("mean", m34, |t, v| t.mean(t.square(v[0])?)),
        case("mean_over_axis_0", m34, |t, v| t.mean_over_axis(v[0], 0)),
        case("mean_over_axis_1", m34, |t, v| t.mean_over_axis(v[0], 1)),
        case("mse", m34x2, |t, v| t.mse(v[0], v[1])),
        case("l2_norm_rows", |r| vec![signed(r, &[3, 4])], |t, v| t.l2_norm_rows(v[0])),
        case("scale_rows", |r| vec![random(r, &[3, 4], -1.0, 1.0), random(r, &[3], -1.0, 1.0)], |t, v| t.scale_rows(v[0], v[1])),
        case("concat_rows", |r| vec![random(r, &[2, 3], -1.0, 1.0), random(r, &[4, 3], -1.0, 1.0)], |t, v| t.concat(&[v[0], v[1], v[0]])),
        case("concat_vectors", |r| vec![random(r, &[3], -1.0, 1.0), random(r, &[2], -1.0, 1.0)], |t, v| t.concat(&[v[1], v[0]])),
        case("gather_rows", |r| vec![random(r, &[5, 3], -1.0, 1.0)], |t, v| t.gather_rows(v[0], vec![4, 0, 4, 2])),
        case("linear_map", |r| vec![random(r, &[3, 4], -1.0, 1.0)], move |t, v| t.linear_map(v[0], map.clone(), &[2, 3])),
        case("reshape", m34, |t, v| t.reshape(t.square(v[0])?, &[2, 6])),
        case("stop_gradient", m34, |t, v| {
            let frozen = t.stop_gradient(t.square(v[0])?);
            t.mul(v[0], frozen)
        }),
        case("straight_through", m34x2, |t, v| {
            let st = t.straight_through(t.tanh(v[0])?, t.square(v[1])?)?;
            t.square(st)
        }),
    ]
}


// Full loss graphs on a small codec.

#[derive(Clone, Copy, Debug)]
pub enum Graph {
    Reconstruction,
    Vq,
    Idem(IdemKind),
}

pub fn small_config(seed: u64) -> CodecConfig {
    CodecConfig {
        frame_size: 32,
        hop: 16,
        latent_dim: 8,
        code_dim: 4,
        n_levels: 2,
        codebook_size: 8,
        encoder_hidden: vec![16],
        seed,
        ..CodecConfig::default()
    }
}

pub fn signal_batch(seed: u64, n: usize) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let items: Vec<AudioBuffer> = (0..2)
        .map(|_| {
            let f = rng.random_range(0.02..0.2);
            let phase = rng.random_range(0.0..6.0);
            let s = (0..n)
                .map(|i| 0.6 * (f * i as f64 + phase).sin() + rng.random_range(-0.1..0.1))
                .collect();
            AudioBuffer::new(s, 8000).unwrap()
        })
        .collect();
    Batch::new(&items).unwrap()
}

/// Builds the loss; returns it with every nearest-neighbor choice made.
pub fn loss_graph(tape: &Tape, model: &CodecModel, batch: &Batch, graph: Graph) -> Result<(Var, Vec<Vec<usize>>)> {
    let cfg = model.config();
    let (n, b) = (batch.n_samples(), batch.len());
    let n_frames = cfg.n_frames(n);
    let bound = model.bind(tape, |_| true);
    let x = tape.constant(batch.signals().clone());
    let opts = EncodeOptions {
        frames_per_item: n_frames,
        ..EncodeOptions::default()
    };
    let first = bound.encode_graph(bound.frames(x, n, b)?, &opts)?;
    let mut choices: Vec<Vec<usize>> = first.levels.iter().map(|l| l.indices.clone()).collect();
    let x_hat = bound.decoder(first.z_hat, n_frames, n, b)?;
    let weights = LossWeights::default();
    let loss = match graph {
        Graph::Reconstruction => {
            let bank = SpectralBank::new(n, b)?;
            let r = reconstruction_graph(tape, &bank, x, x_hat, &weights)?;
            tape.add(r.wave.unwrap(), r.spec.unwrap())?
        }
        Graph::Vq => {
            let vq = vq_graph(tape, &first.levels, None, weights.codebook, weights.commit)?;
            tape.add(vq.codebook.unwrap(), vq.commit.unwrap())?
        }
        Graph::Idem(kind) => {
            let x_prime = match_rms_graph(tape, x_hat, batch)?;
            let second = bound.encode_graph(bound.frames(x_prime, n, b)?, &opts)?;
            choices.extend(second.levels.iter().map(|l| l.indices.clone()));
            idem_graph(tape, kind, &first, &second)?.unwrap()
        }
    };
    Ok((loss, choices))
}

/// Relative error over a few coordinates of every parameter tensor, and
/// the number of coordinates skipped because a perturbation changed a
/// nearest-neighbor choice.
fn graph_error(seed: u64, graph: Graph) -> (f64, usize) {
    let mut model = CodecModel::new(small_config(seed)).unwrap();
    let batch = signal_batch(seed, 96);
    let tape = Tape::recording();
    let (loss, base_choices) = loss_graph(&tape, &model, &batch, graph).unwrap();
    let detached = tape.take_detached();
    let grads = tape.backward(loss).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfeed);
    let ids: Vec<ParamId> = model.params().ids().collect();
    let (mut analytic, mut numeric, mut skipped) = (Vec::new(), Vec::new(), 0);
    for id in ids {
        let len = model.params().get(id).numel();
        for _ in 0..3 {
            let j = rng.random_range(0..len);
            let original = model.params().get(id).data()[j];
            let mut at = |delta: f64| {
                model.params_mut().get_mut(id).data_mut()[j] = original + delta;
                let t = Tape::replaying(detached.clone());
                let (l, choices) = loss_graph(&t, &model, &batch, graph).unwrap();
                (t.item(l), choices == base_choices)
            };
            let (plus, same_plus) = at(STEP);
            let (minus, same_minus) = at(-STEP);
            model.params_mut().get_mut(id).data_mut()[j] = original;
            if !(same_plus && same_minus) {
                skipped += 1;
                continue;
            }
            analytic.push(grads.get(id).map_or(0.0, |g| g.data()[j]));
            numeric.push((plus - minus) / (2.0 * STEP));
        }
    }
    (relative_error(&analytic, &numeric), skipped)
}

/// Worst relative error over all instances of one check.
#[derive(Clone, Debug)]
pub struct Check {
    pub name: String,
    pub worst: f64,
    /// Coordinates left out because a perturbation changed a quantizer choice.
    pub skipped: usize,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.worst < TOLERANCE && self.skipped < 10
    }
}

pub fn op_checks() -> Vec<Check> {
    op_cases()
        .into_iter()
        .map(|c| {
            let worst = (0..INSTANCES)
                .map(|i| {
                    let mut rng = ChaCha8Rng::seed_from_u64(1000 + i);
                    op_error(&(c.inputs)(&mut rng), c.build.as_ref())
                })
                .fold(0.0, f64::max);
            Check {
                name: c.name.into(),
                worst,
                skipped: 0,
            }
        })
        .collect()
}

pub const GRAPHS: [Graph; 6] = [
    Graph::Reconstruction,
    Graph::Vq,
    Graph::Idem(IdemKind::Enc),
    Graph::Idem(IdemKind::Proj),
    Graph::Idem(IdemKind::Code),
    Graph::Idem(IdemKind::EncQuantized),
];

pub fn graph_check(graph: Graph) -> Check {
    let mut worst = 0.0f64;
    let mut skipped = 0;
    for i in 0..INSTANCES {
        let (e, s) = graph_error(2000 + i, graph);
        worst = worst.max(e);
        skipped += s;
    }
    Check {
        name: format!("{graph:?}"),
        worst,
        skipped,
    }
}
