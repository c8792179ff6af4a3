//! Tape gradients against central finite differences computed from plain
//! forward passes.

use oslo_lab::data::InputShape;
use oslo_lab::models::{ArchSpec, Family, Mode, ModelHandle};
use oslo_lab::rng::stage_rng;
use oslo_lab::tensor::{Tape, Tensor};
use rand::Rng;

const STEP: f64 = 1e-5;
/// Entries smaller than this on both sides are not compared.
pub const FLOOR: f64 = 1e-6;

pub struct GradReport {
    pub checked: usize,
    pub worst: f64,
    pub worst_at: String,
}

fn mean_ce(m: &ModelHandle, xs: &[Tensor], ys: &[usize]) -> f64 {
    xs.iter()
        .zip(ys)
        .map(|(x, &y)| {
            let l = m.logits(x).unwrap();
            let mx = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + l.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            lse - l[y]
        })
        .sum::<f64>()
        / xs.len() as f64
}

fn tape_grads(m: &ModelHandle, xs: &[Tensor], ys: &[usize]) -> Vec<Tensor> {
    let d = m.input.dims();
    let mut data = Vec::new();
    for x in xs {
        data.extend_from_slice(x.data());
    }
    let batch = Tensor::new(vec![xs.len(), d[0], d[1], d[2]], data).unwrap();
    let tape = Tape::new();
    let params = m.bind(&tape, true);
    let xv = tape.constant(batch);
    let loss = m.forward(&params, xv, Mode::Eval).unwrap().cross_entropy(ys).unwrap();
    let mut g = tape.backward(loss).unwrap();
    params.iter().map(|&p| g.take(p)).collect()
}

/// Alternating mlp / cnn-a networks of width 2..=4 on 1x8x8 inputs with
/// four classes; every parameter and every input pixel is checked.
pub fn check_random_networks(nets: u64) -> GradReport {
    let input = InputShape::new(1, 8, 8);
    let mut rep = GradReport {
        checked: 0,
        worst: 0.0,
        worst_at: String::new(),
    };
    let mut note = |a: f64, fd: f64, at: &dyn Fn() -> String| {
        if a.abs().max(fd.abs()) > FLOOR {
            let e = (a - fd).abs() / a.abs().max(fd.abs());
            if e > rep.worst {
                rep.worst = e;
                rep.worst_at = at();
            }
            rep.checked += 1;
        }
    };
    for net in 0..nets {
        let mut rng = stage_rng(net, "gradcheck");
        let family = if net % 2 == 0 { Family::Mlp } else { Family::CnnA };
        let arch = ArchSpec {
            family,
            width: 2 + (net as usize % 3),
            dropout: 0.0,
        };
        let m = ModelHandle::init(arch, input, 4, &mut rng).unwrap();
        let xs: Vec<Tensor> = (0..2)
            .map(|_| Tensor::new(vec![1, 8, 8], (0..64).map(|_| rng.random::<f64>()).collect()).unwrap())
            .collect();
        let ys: Vec<usize> = (0..2).map(|_| rng.random_range(0..4)).collect();
        for (pi, g) in tape_grads(&m, &xs, &ys).iter().enumerate() {
            for i in 0..g.len() {
                let mut up = m.clone();
                up.weights[pi].data_mut()[i] += STEP;
                let mut down = m.clone();
                down.weights[pi].data_mut()[i] -= STEP;
                let fd = (mean_ce(&up, &xs, &ys) - mean_ce(&down, &xs, &ys)) / (2.0 * STEP);
                note(g.data()[i], fd, &|| format!("net {net} ({family}) param {pi}[{i}]"));
            }
        }
        // the input gradient the attacks use
        let (_, gx) = m.input_gradient(&xs[0], ys[0]).unwrap();
        for i in 0..64 {
            let mut up = xs[0].clone();
            up.data_mut()[i] += STEP;
            let mut down = xs[0].clone();
            down.data_mut()[i] -= STEP;
            let fd = (mean_ce(&m, &[up], &ys[..1]) - mean_ce(&m, &[down], &ys[..1])) / (2.0 * STEP);
            note(gx.data()[i], fd, &|| format!("net {net} input[{i}]"));
        }
    }
    rep
}
