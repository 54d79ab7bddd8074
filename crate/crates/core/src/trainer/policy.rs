use rand::Rng;
use serde::{Deserialize, Serialize};

/// ReLU trunk with one Hardtanh head per input channel.
///
/// Weights are stored row-major (`out × in`). The last layer has `m`
/// outputs, each clamped to its input bounds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyNet {
    pub sizes: Vec<usize>,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
    pub u_min: Vec<f64>,
    pub u_max: Vec<f64>,
}

/// Pre-activations of every layer from one forward pass.
#[derive(Clone, Debug, Default)]
pub struct Trace {
    pub inputs: Vec<Vec<f64>>,
    pub pre: Vec<Vec<f64>>,
}

impl PolicyNet {
    pub fn zeros(n: usize, hidden: &[usize], u_min: Vec<f64>, u_max: Vec<f64>) -> Self {
        let mut sizes = vec![n];
        sizes.extend_from_slice(hidden);
        sizes.push(u_min.len());
        let weights = sizes.windows(2).map(|w| vec![0.0; w[0] * w[1]]).collect();
        let biases = sizes[1..].iter().map(|&d| vec![0.0; d]).collect();
        PolicyNet {
            sizes,
            weights,
            biases,
            u_min,
            u_max,
        }
    }

    /// Fan-in scaled uniform initialization.
    pub fn init<R: Rng>(&mut self, rng: &mut R) {
        for (l, w) in self.sizes.windows(2).enumerate() {
            let bound = 1.0 / (w[0] as f64).sqrt();
            for v in self.weights[l].iter_mut().chain(self.biases[l].iter_mut()) {
                *v = rng.gen_range(-bound..=bound);
            }
        }
    }

    pub fn n_params(&self) -> usize {
        self.weights.iter().chain(&self.biases).map(Vec::len).sum()
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.forward_trace(x, &mut Trace::default())
    }

    pub fn forward_trace(&self, x: &[f64], trace: &mut Trace) -> Vec<f64> {
        trace.inputs.clear();
        trace.pre.clear();
        let layers = self.weights.len();
        let mut a = x.to_vec();
        for l in 0..layers {
            let (din, dout) = (self.sizes[l], self.sizes[l + 1]);
            let z: Vec<f64> = (0..dout)
                .map(|o| {
                    let row = &self.weights[l][o * din..(o + 1) * din];
                    self.biases[l][o] + row.iter().zip(&a).map(|(w, v)| w * v).sum::<f64>()
                })
                .collect();
            trace.inputs.push(std::mem::take(&mut a));
            a = if l + 1 < layers {
                z.iter().map(|&v| v.max(0.0)).collect()
            } else {
                z.iter()
                    .enumerate()
                    .map(|(j, &v)| v.clamp(self.u_min[j], self.u_max[j]))
                    .collect()
            };
            trace.pre.push(z);
        }
        a
    }

    /// Accumulate `dL/dκ` into `grad` (flat layout of [`PolicyNet::flatten`])
    /// given `dL/du`. Kinks get derivative zero.
    pub fn backward(&self, trace: &Trace, du: &[f64], grad: &mut [f64]) {
        let layers = self.weights.len();
        let offsets = self.offsets();
        let mut delta: Vec<f64> = du
            .iter()
            .enumerate()
            .map(|(j, &g)| {
                let z = trace.pre[layers - 1][j];
                if z > self.u_min[j] && z < self.u_max[j] {
                    g
                } else {
                    0.0
                }
            })
            .collect();
        for l in (0..layers).rev() {
            let (din, dout) = (self.sizes[l], self.sizes[l + 1]);
            let a = &trace.inputs[l];
            let (wo, bo) = offsets[l];
            for o in 0..dout {
                if delta[o] == 0.0 {
                    continue;
                }
                for i in 0..din {
                    grad[wo + o * din + i] += delta[o] * a[i];
                }
                grad[bo + o] += delta[o];
            }
            if l == 0 {
                break;
            }
            let mut next = vec![0.0; din];
            for (i, nx) in next.iter_mut().enumerate() {
                if trace.pre[l - 1][i] <= 0.0 {
                    continue;
                }
                *nx = (0..dout).map(|o| delta[o] * self.weights[l][o * din + i]).sum();
            }
            delta = next;
        }
    }

    /// Offsets of each layer's weights and biases in the flat layout
    /// `[W0, b0, W1, b1, ...]`.
    fn offsets(&self) -> Vec<(usize, usize)> {
        let mut off = 0;
        self.weights
            .iter()
            .zip(&self.biases)
            .map(|(w, b)| {
                let r = (off, off + w.len());
                off += w.len() + b.len();
                r
            })
            .collect()
    }

    pub fn flatten(&self, out: &mut Vec<f64>) {
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w);
            out.extend_from_slice(b);
        }
    }

    pub fn unflatten(&mut self, flat: &[f64]) {
        let mut off = 0;
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            let (lw, lb) = (w.len(), b.len());
            w.copy_from_slice(&flat[off..off + lw]);
            off += lw;
            b.copy_from_slice(&flat[off..off + lb]);
            off += lb;
        }
    }

    /// Smallest distance of any activation argument to a kink.
    pub fn kink_margin(&self, trace: &Trace) -> f64 {
        let layers = self.weights.len();
        let mut m = f64::INFINITY;
        for (l, z) in trace.pre.iter().enumerate() {
            for (j, &v) in z.iter().enumerate() {
                m = m.min(if l + 1 < layers {
                    v.abs()
                } else {
                    (v - self.u_min[j]).abs().min((v - self.u_max[j]).abs())
                });
            }
        }
        m
    }
}
