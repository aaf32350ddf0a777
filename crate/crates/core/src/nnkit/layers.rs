use rand::Rng;

use super::{sigmoid, Mat, NnError, ParamId, ParamStore};

/// Token embedding table of shape `vocab x dim`. Row 0 (padding) is an
/// ordinary trainable row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Embedding {
    pub table: ParamId,
    pub vocab: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        vocab: usize,
        dim: usize,
        rng: &mut R,
    ) -> Result<Self, NnError> {
        let table = store.add_uniform(name, vocab, dim, 0.1, rng)?;
        Ok(Self { table, vocab, dim })
    }

    pub fn forward(&self, store: &ParamStore, ids: &[u32]) -> Result<Vec<Vec<f64>>, NnError> {
        let table = store.value(self.table);
        ids.iter()
            .map(|&id| {
                let id = id as usize;
                if id >= self.vocab {
                    Err(NnError::Bounds {
                        index: id,
                        size: self.vocab,
                    })
                } else {
                    Ok(table.row(id).to_vec())
                }
            })
            .collect()
    }

    /// Scatters row gradients back into the table. Ids were validated by `forward`.
    pub fn backward(&self, store: &mut ParamStore, ids: &[u32], d_out: &[Vec<f64>]) {
        let grad = store.grad_mut(self.table);
        for (&id, d) in ids.iter().zip(d_out) {
            for (g, v) in grad.row_mut(id as usize).iter_mut().zip(d) {
                *g += v;
            }
        }
    }
}

/// Affine layer `y = W x + b`, `W` is `output x input`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub output: usize,
}

/// Input kept by the caller for [`Dense::backward`].
pub type DenseCache = Vec<f64>;

impl Dense {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        rng: &mut R,
    ) -> Result<Self, NnError> {
        let scale = (6.0 / (input + output) as f64).sqrt();
        let w = store.add_uniform(&format!("{name}.w"), output, input, scale, rng)?;
        let b = store.add(&format!("{name}.b"), Mat::zeros(output, 1))?;
        Ok(Self {
            w,
            b,
            input,
            output,
        })
    }

    pub fn forward(&self, store: &ParamStore, x: &[f64]) -> Result<Vec<f64>, NnError> {
        if x.len() != self.input {
            return Err(NnError::Shape(format!(
                "dense layer expects {} inputs, got {}",
                self.input,
                x.len()
            )));
        }
        let w = store.value(self.w);
        let b = store.value(self.b);
        Ok((0..self.output)
            .map(|o| b.data[o] + dot(w.row(o), x))
            .collect())
    }

    /// Accumulates parameter gradients and returns `dL/dx`.
    pub fn backward(&self, store: &mut ParamStore, x: &[f64], dy: &[f64]) -> Vec<f64> {
        let mut dx = vec![0.0; self.input];
        {
            let w = store.value(self.w);
            for (o, &d) in dy.iter().enumerate() {
                if d != 0.0 {
                    axpy(d, w.row(o), &mut dx);
                }
            }
        }
        self.backward_params(store, x, dy);
        dx
    }

    /// Parameter gradients only, for layers whose input needs no gradient.
    pub fn backward_params(&self, store: &mut ParamStore, x: &[f64], dy: &[f64]) {
        {
            let gw = store.grad_mut(self.w);
            for (o, &d) in dy.iter().enumerate() {
                if d != 0.0 {
                    axpy(d, x, gw.row_mut(o));
                }
            }
        }
        let gb = store.grad_mut(self.b);
        for (g, d) in gb.data.iter_mut().zip(dy) {
            *g += d;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LstmLayer {
    /// `4h x input`, gate blocks in order input, forget, output, candidate.
    pub w_ih: ParamId,
    /// `4h x h`, same gate order.
    pub w_hh: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub hidden: usize,
}

/// Stacked LSTM with zero initial state. Gates use sigmoid for
/// input/forget/output and tanh for the candidate and cell output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Lstm {
    pub layers: Vec<LstmLayer>,
    pub hidden: usize,
}

#[derive(Debug, Clone)]
struct LstmStep {
    x: Vec<f64>,
    h_prev: Vec<f64>,
    c_prev: Vec<f64>,
    /// Activated gates `[i, f, o, g]`.
    gates: Vec<f64>,
    tanh_c: Vec<f64>,
}

/// Per-layer, per-step activations recorded by [`Lstm::forward`].
#[derive(Debug, Clone, Default)]
pub struct LstmCache {
    steps: Vec<Vec<LstmStep>>,
}

impl Lstm {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        num_layers: usize,
        rng: &mut R,
    ) -> Result<Self, NnError> {
        let scale = 1.0 / (hidden as f64).sqrt();
        let mut layers = Vec::with_capacity(num_layers);
        for l in 0..num_layers {
            let in_dim = if l == 0 { input } else { hidden };
            let w_ih = store.add_uniform(&format!("{name}.l{l}.w_ih"), 4 * hidden, in_dim, scale, rng)?;
            let w_hh = store.add_uniform(&format!("{name}.l{l}.w_hh"), 4 * hidden, hidden, scale, rng)?;
            let mut bias = Mat::zeros(4 * hidden, 1);
            for (i, x) in bias.data.iter_mut().enumerate() {
                *x = rng.gen_range(-scale..scale) + if (hidden..2 * hidden).contains(&i) { 1.0 } else { 0.0 };
            }
            let b = store.add(&format!("{name}.l{l}.b"), bias)?;
            layers.push(LstmLayer {
                w_ih,
                w_hh,
                b,
                input: in_dim,
                hidden,
            });
        }
        Ok(Self { layers, hidden })
    }

    /// Returns the top layer's final hidden state (zeros for an empty
    /// sequence), every top-layer hidden state, and the backward cache.
    pub fn forward(
        &self,
        store: &ParamStore,
        inputs: &[Vec<f64>],
    ) -> Result<(Vec<f64>, Vec<Vec<f64>>, LstmCache), NnError> {
        let h = self.hidden;
        let mut cache = LstmCache {
            steps: Vec::with_capacity(self.layers.len()),
        };
        let mut seq: Vec<Vec<f64>> = inputs.to_vec();
        for layer in &self.layers {
            let w_ih = store.value(layer.w_ih);
            let w_hh = store.value(layer.w_hh);
            let b = store.value(layer.b);
            let mut h_prev = vec![0.0; h];
            let mut c_prev = vec![0.0; h];
            let mut steps = Vec::with_capacity(seq.len());
            let mut outputs = Vec::with_capacity(seq.len());
            for x in seq {
                if x.len() != layer.input {
                    return Err(NnError::Shape(format!(
                        "lstm layer expects {} inputs, got {}",
                        layer.input,
                        x.len()
                    )));
                }
                let mut gates = b.data.clone();
                for (r, z) in gates.iter_mut().enumerate() {
                    *z += dot(w_ih.row(r), &x) + dot(w_hh.row(r), &h_prev);
                }
                for (k, z) in gates.iter_mut().enumerate() {
                    *z = if k < 3 * h { sigmoid(*z) } else { z.tanh() };
                }
                let mut c = vec![0.0; h];
                let mut tanh_c = vec![0.0; h];
                let mut h_new = vec![0.0; h];
                for j in 0..h {
                    let (i, f, o, g) = (gates[j], gates[h + j], gates[2 * h + j], gates[3 * h + j]);
                    c[j] = f * c_prev[j] + i * g;
                    tanh_c[j] = c[j].tanh();
                    h_new[j] = o * tanh_c[j];
                }
                steps.push(LstmStep {
                    x,
                    h_prev: std::mem::replace(&mut h_prev, h_new.clone()),
                    c_prev: std::mem::replace(&mut c_prev, c),
                    gates,
                    tanh_c,
                });
                outputs.push(h_new);
            }
            cache.steps.push(steps);
            seq = outputs;
        }
        let last = seq.last().cloned().unwrap_or_else(|| vec![0.0; h]);
        Ok((last, seq, cache))
    }

    /// Backpropagates `dL/d(final hidden)` through time and layers.
    /// Returns `dL/d(inputs)`.
    pub fn backward(&self, store: &mut ParamStore, cache: &LstmCache, d_final: &[f64]) -> Vec<Vec<f64>> {
        let h = self.hidden;
        let len = cache.steps.first().map_or(0, Vec::len);
        if len == 0 {
            return Vec::new();
        }
        let mut d_ext: Vec<Vec<f64>> = vec![vec![0.0; h]; len];
        d_ext[len - 1].copy_from_slice(d_final);

        for (layer, steps) in self.layers.iter().zip(&cache.steps).rev() {
            let mut d_in: Vec<Vec<f64>> = vec![vec![0.0; layer.input]; len];
            let mut dh_next = vec![0.0; h];
            let mut dc_next = vec![0.0; h];
            let mut dz_all: Vec<Vec<f64>> = vec![Vec::new(); len];
            for t in (0..len).rev() {
                let st = &steps[t];
                let mut dz = vec![0.0; 4 * h];
                for j in 0..h {
                    let (i, f, o, g) = (
                        st.gates[j],
                        st.gates[h + j],
                        st.gates[2 * h + j],
                        st.gates[3 * h + j],
                    );
                    let dh = d_ext[t][j] + dh_next[j];
                    let tc = st.tanh_c[j];
                    let dc = dc_next[j] + dh * o * (1.0 - tc * tc);
                    dz[j] = dc * g * i * (1.0 - i);
                    dz[h + j] = dc * st.c_prev[j] * f * (1.0 - f);
                    dz[2 * h + j] = dh * tc * o * (1.0 - o);
                    dz[3 * h + j] = dc * i * (1.0 - g * g);
                    dc_next[j] = dc * f;
                }
                let w_ih = store.value(layer.w_ih);
                let w_hh = store.value(layer.w_hh);
                dh_next.fill(0.0);
                for (r, &d) in dz.iter().enumerate() {
                    if d != 0.0 {
                        axpy(d, w_ih.row(r), &mut d_in[t]);
                        axpy(d, w_hh.row(r), &mut dh_next);
                    }
                }
                dz_all[t] = dz;
            }
            for (st, dz) in steps.iter().zip(&dz_all) {
                {
                    let g_ih = store.grad_mut(layer.w_ih);
                    for (r, &d) in dz.iter().enumerate() {
                        if d != 0.0 {
                            axpy(d, &st.x, g_ih.row_mut(r));
                        }
                    }
                }
                {
                    let g_hh = store.grad_mut(layer.w_hh);
                    for (r, &d) in dz.iter().enumerate() {
                        if d != 0.0 {
                            axpy(d, &st.h_prev, g_hh.row_mut(r));
                        }
                    }
                }
                let gb = store.grad_mut(layer.b);
                for (g, d) in gb.data.iter_mut().zip(dz) {
                    *g += d;
                }
            }
            d_ext = d_in;
        }
        d_ext
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}


#[cfg(test)]
mod lstm_grad_tests {
    use super::*;
    use crate::nnkit::{grad_check, GradCheckOptions, Precision};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn lstm_matches_finite_differences() {
        for seed in 0..5 {
            let mut store = ParamStore::new(Precision::F64);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let lstm = Lstm::new(&mut store, "lstm", 3, 4, 2, &mut rng).unwrap();
            let xs: Vec<Vec<f64>> = (0..4).map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
            let proj: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let loss = |s: &ParamStore| dot(&lstm.forward(s, &xs).unwrap().0, &proj);
            let rep = grad_check(
                &mut store,
                loss,
                |s| {
                    let (_, _, cache) = lstm.forward(s, &xs).unwrap();
                    lstm.backward(s, &cache, &proj);
                    0.0
                },
                &GradCheckOptions { seed, ..Default::default() },
            );
            assert!(rep.max_rel_error < 1e-5, "{rep:?}");
        }
    }
}
