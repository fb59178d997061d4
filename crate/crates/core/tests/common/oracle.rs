//! Double-precision reference forward passes, written independently of the
//! library's tape, for finite-difference gradient checks.

use std::collections::BTreeMap;

use flowlift::autograd::{ParamStore, Tensor};

#[derive(Clone, Debug)]
pub struct Oracle {
    pub params: BTreeMap<String, (Vec<usize>, Vec<f64>)>,
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

/// `w x + b` for `w` stored `[out, in]`.
fn linear(w: &(Vec<usize>, Vec<f64>), b: &(Vec<usize>, Vec<f64>), x: &[f64]) -> Vec<f64> {
    let (out, inp) = (w.0[0], w.0[1]);
    assert_eq!(inp, x.len());
    (0..out)
        .map(|o| b.1[o] + (0..inp).map(|i| w.1[o * inp + i] * x[i]).sum::<f64>())
        .collect()
}

impl Oracle {
    pub fn from_store(store: &ParamStore) -> Self {
        let params = store
            .iter()
            .map(|(_, p)| {
                (
                    p.name.clone(),
                    (
                        p.value.shape().to_vec(),
                        p.value.data().iter().map(|&v| v as f64).collect(),
                    ),
                )
            })
            .collect();
        Oracle { params }
    }

    fn p(&self, name: &str) -> &(Vec<usize>, Vec<f64>) {
        self.params.get(name).unwrap_or_else(|| panic!("missing {name}"))
    }

    /// Graph-conditioned encoder for one sample: `z` is `J` rows of `2k`.
    pub fn encode(&self, z: &[Vec<f64>]) -> Vec<f64> {
        let h: Vec<Vec<f64>> = z
            .iter()
            .map(|row| linear(self.p("encoder.embed.weight"), self.p("encoder.embed.bias"), row))
            .collect();
        let j = z.len();
        let d = h[0].len();
        let a = &self.p("encoder.gcn.adjacency").1;
        let w = &self.p("encoder.gcn.weight").1;
        let mut flat = Vec::with_capacity(j * d);
        for r in 0..j {
            // (A h)_r
            let ah: Vec<f64> = (0..d).map(|c| (0..j).map(|q| a[r * j + q] * h[q][c]).sum()).collect();
            for c in 0..d {
                let v: f64 = (0..d).map(|e| ah[e] * w[e * d + c]).sum();
                flat.push(silu(v));
            }
        }
        linear(self.p("encoder.out.weight"), self.p("encoder.out.bias"), &flat)
    }

    /// Velocity network without dropout.
    pub fn velocity(&self, x: &[f64], t: f64, c: &[f64], blocks: usize) -> Vec<f64> {
        let mut inp = x.to_vec();
        inp.push(t);
        inp.extend_from_slice(c);
        let mut h: Vec<f64> = linear(self.p("flow.input.weight"), self.p("flow.input.bias"), &inp)
            .into_iter()
            .map(silu)
            .collect();
        for b in 0..blocks {
            let y: Vec<f64> = linear(
                self.p(&format!("flow.block{b}.fc1.weight")),
                self.p(&format!("flow.block{b}.fc1.bias")),
                &h,
            )
            .into_iter()
            .map(silu)
            .collect();
            let y: Vec<f64> = linear(
                self.p(&format!("flow.block{b}.fc2.weight")),
                self.p(&format!("flow.block{b}.fc2.bias")),
                &y,
            )
            .into_iter()
            .map(silu)
            .collect();
            for (hi, yi) in h.iter_mut().zip(y) {
                *hi += yi;
            }
        }
        linear(self.p("flow.output.weight"), self.p("flow.output.bias"), &h)
    }

    /// Central differences of `loss` with respect to every entry of
    /// parameter `name`.
    pub fn fd_gradient(&self, name: &str, h: f64, loss: &dyn Fn(&Oracle) -> f64) -> Vec<f64> {
        let n = self.p(name).1.len();
        let mut probe = self.clone();
        (0..n)
            .map(|i| {
                let base = self.p(name).1[i];
                probe.params.get_mut(name).unwrap().1[i] = base + h;
                let up = loss(&probe);
                probe.params.get_mut(name).unwrap().1[i] = base - h;
                let down = loss(&probe);
                probe.params.get_mut(name).unwrap().1[i] = base;
                (up - down) / (2.0 * h)
            })
            .collect()
    }
}

/// `||g - reference|| / max(||reference||, 1e-8)`.
pub fn relative_error(g: &Tensor, reference: &[f64]) -> f64 {
    let diff: f64 = g
        .data()
        .iter()
        .zip(reference)
        .map(|(&a, &b)| (a as f64 - b).powi(2))
        .sum::<f64>()
        .sqrt();
    let norm: f64 = reference.iter().map(|v| v * v).sum::<f64>().sqrt();
    diff / norm.max(1e-8)
}

pub fn mse(pred: &[f64], target: &[f64]) -> f64 {
    pred.iter().zip(target).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / pred.len() as f64
}
