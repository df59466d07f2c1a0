//! Reverse-mode gradients on a small graph, compared against central
//! finite differences.

use idemcodec::autodiff::{ParamId, Tape, Tensor};

fn loss(w: &Tensor, x: &Tensor) -> (f64, Option<Tensor>) {
    let t = Tape::new();
    let wv = t.param(ParamId(0), w.clone());
    let xv = t.constant(x.clone());
    let h = t.tanh(t.matmul(xv, wv).unwrap()).unwrap();
    let l = t.mean(t.l2_norm_rows(h).unwrap()).unwrap();
    let g = t.backward(l).unwrap().get(ParamId(0)).cloned();
    (t.item(l), g)
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let x = Tensor::matrix(3, 4, (0..12).map(|i| (i as f64 * 0.37).sin()).collect())?;
    let w = Tensor::matrix(4, 2, (0..8).map(|i| (i as f64 * 0.91).cos()).collect())?;
    let (value, grad) = loss(&w, &x);
    let grad = grad.expect("parameter reaches the loss");
    println!("loss {value:.6}");
    let h = 1e-6;
    for i in 0..w.numel() {
        let (mut up, mut down) = (w.clone(), w.clone());
        up.data_mut()[i] += h;
        down.data_mut()[i] -= h;
        let fd = (loss(&up, &x).0 - loss(&down, &x).0) / (2.0 * h);
        let an = grad.data()[i];
        println!("w[{i}] analytic {an:+.8} numeric {fd:+.8} rel {:.1e}", (an - fd).abs() / an.abs().max(fd.abs()).max(1e-12));
    }
    Ok(())
}
