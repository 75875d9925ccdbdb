//! LSTM over `[N, T, D]` sequences.
//!
//! Gates are ordered input, forget, output, candidate. Each gate owns an
//! input map, a recurrent map and one bias. In bilinear mode the hidden
//! state is an `h1 x (alpha*h2)` matrix stored row-major, with
//! `(h1, h2) = factorize(H)`; only the second factor is scaled.

use crate::error::{Error, Result};
use crate::param::Param;
use crate::projections::{factorize_dim, sigmoid};
use crate::scalar::Scalar;
use crate::tensor::{Rng, Tensor};

use super::{missing_cache, LinearMap, Module, ProjectionMode};

const GATES: [&str; 4] = ["i", "f", "o", "g"];

#[derive(Clone, Debug)]
struct Gate<S> {
    x: LinearMap<S>,
    h: LinearMap<S>,
    bias: Param<S>,
}

/// Hidden and cell state, each `[N, H]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmState<S = f64> {
    pub h: Tensor<S>,
    pub c: Tensor<S>,
}

#[derive(Clone, Debug)]
struct Step<S> {
    x: Vec<S>,
    h_prev: Vec<S>,
    c_prev: Vec<S>,
    /// i, f, o, g activations
    gates: [Vec<S>; 4],
    tanh_c: Vec<S>,
}

#[derive(Clone, Debug)]
struct LstmCache<S> {
    n: usize,
    steps: Vec<Step<S>>,
}

#[derive(Clone, Debug)]
pub struct Lstm<S = f64> {
    input_dim: usize,
    base_hidden: usize,
    alpha: usize,
    return_sequences: bool,
    gates: Vec<Gate<S>>,
    cache: Option<LstmCache<S>>,
}

fn name_params<S: Scalar>(gate: &mut Gate<S>, g: &str) {
    for p in gate.x.params_mut() {
        p.name = format!("{g}x.{}", p.name);
    }
    for p in gate.h.params_mut() {
        p.name = format!("{g}h.{}", p.name);
    }
    gate.bias.name = format!("b_{g}");
}

impl<S: Scalar> Lstm<S> {
    /// Biases start at zero except the forget gate, which starts at 1.
    pub fn new(
        rng: &mut Rng,
        mode: ProjectionMode,
        input_dim: usize,
        hidden: usize,
        alpha: usize,
        return_sequences: bool,
        init_std: f64,
    ) -> Result<Self> {
        if input_dim == 0 || hidden == 0 {
            return Err(Error::Param("lstm extents must be positive".into()));
        }
        if alpha == 0 {
            return Err(Error::Param("alpha must be at least 1".into()));
        }
        if mode == ProjectionMode::Full && alpha != 1 {
            return Err(Error::Param(
                "alpha only applies to bilinear projections".into(),
            ));
        }
        let mut gates = Vec::with_capacity(4);
        for (k, g) in GATES.iter().enumerate() {
            let (x, h, bias_shape) = match mode {
                ProjectionMode::Full => (
                    LinearMap::full(rng, input_dim, hidden, init_std)?,
                    LinearMap::full(rng, hidden, hidden, init_std)?,
                    vec![hidden],
                ),
                ProjectionMode::Bilinear => {
                    let (h1, h2) = factorize_dim(hidden);
                    let hm = (h1, alpha * h2);
                    (
                        LinearMap::bilinear(rng, factorize_dim(input_dim), hm, init_std)?,
                        LinearMap::bilinear(rng, hm, hm, init_std)?,
                        vec![h1, alpha * h2],
                    )
                }
            };
            let fill = if k == 1 { S::one() } else { S::zero() };
            let mut gate = Gate {
                x,
                h,
                bias: Param::bias("bias", Tensor::full(&bias_shape, fill)),
            };
            name_params(&mut gate, g);
            gates.push(gate);
        }
        Ok(Self {
            input_dim,
            base_hidden: hidden,
            alpha,
            return_sequences,
            gates,
            cache: None,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    /// Effective hidden width (`alpha * H` in bilinear mode).
    pub fn hidden(&self) -> usize {
        self.gates[0].h.out_dim()
    }

    pub fn base_hidden(&self) -> usize {
        self.base_hidden
    }

    pub fn return_sequences(&self) -> bool {
        self.return_sequences
    }

    pub fn to_full(&self) -> Result<Self> {
        let hidden = self.hidden();
        let mut gates = Vec::with_capacity(4);
        for (gate, g) in self.gates.iter().zip(GATES) {
            let mut full = Gate {
                x: gate.x.to_full()?,
                h: gate.h.to_full()?,
                bias: Param::bias("bias", gate.bias.value.reshape(&[hidden])?),
            };
            name_params(&mut full, g);
            gates.push(full);
        }
        Ok(Self {
            input_dim: self.input_dim,
            base_hidden: hidden,
            alpha: 1,
            return_sequences: self.return_sequences,
            gates,
            cache: None,
        })
    }

    pub fn zero_state(&self, n: usize) -> LstmState<S> {
        LstmState {
            h: Tensor::zeros(&[n, self.hidden()]),
            c: Tensor::zeros(&[n, self.hidden()]),
        }
    }

    /// Gate activations for one step over `n` rows.
    fn gates_at(&self, x: &[S], h_prev: &[S], n: usize) -> [Vec<S>; 4] {
        let hd = self.hidden();
        let mut out: [Vec<S>; 4] = Default::default();
        for (k, gate) in self.gates.iter().enumerate() {
            let mut a = Vec::with_capacity(n * hd);
            for _ in 0..n {
                a.extend_from_slice(gate.bias.value.data());
            }
            gate.x.apply_rows(x, &mut a, n);
            gate.h.apply_rows(h_prev, &mut a, n);
            if k == 3 {
                a.iter_mut().for_each(|v| *v = v.tanh());
            } else {
                a.iter_mut().for_each(|v| *v = sigmoid(*v));
            }
            out[k] = a;
        }
        out
    }

    fn cell(gates: &[Vec<S>; 4], c_prev: &[S]) -> (Vec<S>, Vec<S>, Vec<S>) {
        let [i, f, o, g] = gates;
        let c: Vec<S> = (0..c_prev.len()).map(|j| f[j] * c_prev[j] + i[j] * g[j]).collect();
        let tanh_c: Vec<S> = c.iter().map(|v| v.tanh()).collect();
        let h = (0..c.len()).map(|j| o[j] * tanh_c[j]).collect();
        (h, c, tanh_c)
    }

    /// One time step: `x_t: [N, D]` with the previous state.
    pub fn step(&self, x_t: &Tensor<S>, state: &LstmState<S>) -> Result<LstmState<S>> {
        let n = x_t.shape()[0];
        let hd = self.hidden();
        if x_t.shape() != [n, self.input_dim]
            || state.h.shape() != [n, hd]
            || state.c.shape() != [n, hd]
        {
            return Err(Error::shape(format!(
                "lstm step expects x [{n}, {}] and state [{n}, {hd}], got {:?}, {:?}, {:?}",
                self.input_dim,
                x_t.shape(),
                state.h.shape(),
                state.c.shape()
            )));
        }
        let gates = self.gates_at(x_t.data(), state.h.data(), n);
        let (h, c, _) = Self::cell(&gates, state.c.data());
        Ok(LstmState {
            h: Tensor::new(vec![n, hd], h)?,
            c: Tensor::new(vec![n, hd], c)?,
        })
    }

    fn split_time(&self, x: &Tensor<S>) -> Result<(usize, usize)> {
        match x.shape()[..] {
            [n, t, d] if d == self.input_dim && t > 0 => Ok((n, t)),
            _ => Err(Error::shape(format!(
                "lstm expects [N, T, {}], got {:?}",
                self.input_dim,
                x.shape()
            ))),
        }
    }
}

impl<S: Scalar> Module<S> for Lstm<S> {
    fn kind(&self) -> &'static str {
        "lstm"
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match input[..] {
            [t, d] if d == self.input_dim && t > 0 => Ok(if self.return_sequences {
                vec![t, self.hidden()]
            } else {
                vec![self.hidden()]
            }),
            _ => Err(Error::shape(format!(
                "lstm expects [T, {}], got {input:?}",
                self.input_dim
            ))),
        }
    }

    fn forward(&mut self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let (n, t) = self.split_time(x)?;
        let (d, hd) = (self.input_dim, self.hidden());
        let mut h = vec![S::zero(); n * hd];
        let mut c = vec![S::zero(); n * hd];
        let mut steps = Vec::with_capacity(t);
        let mut outputs = if self.return_sequences {
            vec![S::zero(); n * t * hd]
        } else {
            Vec::new()
        };
        for step in 0..t {
            let mut xt = Vec::with_capacity(n * d);
            for s in 0..n {
                let o = (s * t + step) * d;
                xt.extend_from_slice(&x.data()[o..o + d]);
            }
            let gates = self.gates_at(&xt, &h, n);
            let (h_new, c_new, tanh_c) = Self::cell(&gates, &c);
            if h_new.iter().chain(&c_new).any(|v| !v.is_finite()) {
                return Err(Error::Numeric {
                    layer: 0,
                    name: "lstm".into(),
                    msg: format!("non-finite state at time step {step}"),
                });
            }
            if self.return_sequences {
                for s in 0..n {
                    let o = (s * t + step) * hd;
                    outputs[o..o + hd].copy_from_slice(&h_new[s * hd..(s + 1) * hd]);
                }
            }
            steps.push(Step {
                x: xt,
                h_prev: std::mem::replace(&mut h, h_new),
                c_prev: std::mem::replace(&mut c, c_new),
                gates,
                tanh_c,
            });
        }
        self.cache = Some(LstmCache { n, steps });
        if self.return_sequences {
            Tensor::new(vec![n, t, hd], outputs)
        } else {
            Tensor::new(vec![n, hd], h)
        }
    }

    fn backward(&mut self, upstream: &Tensor<S>) -> Result<Tensor<S>> {
        let cache = self.cache.take().ok_or_else(|| missing_cache("lstm"))?;
        let (n, t) = (cache.n, cache.steps.len());
        let (d, hd) = (self.input_dim, self.hidden());
        let expected = if self.return_sequences {
            vec![n, t, hd]
        } else {
            vec![n, hd]
        };
        if upstream.shape() != expected {
            return Err(Error::shape(format!(
                "lstm upstream {:?} does not match {expected:?}",
                upstream.shape()
            )));
        }
        let mut dx = vec![S::zero(); n * t * d];
        let mut dh_next = vec![S::zero(); n * hd];
        let mut dc_next = vec![S::zero(); n * hd];
        let one = S::one();
        for step in (0..t).rev() {
            let st = &cache.steps[step];
            let mut dh = dh_next;
            if self.return_sequences {
                for s in 0..n {
                    let o = (s * t + step) * hd;
                    for j in 0..hd {
                        dh[s * hd + j] += upstream.data()[o + j];
                    }
                }
            } else if step == t - 1 {
                for (a, &b) in dh.iter_mut().zip(upstream.data()) {
                    *a += b;
                }
            }
            let [i, f, o, g] = &st.gates;
            let mut da: [Vec<S>; 4] = std::array::from_fn(|_| vec![S::zero(); n * hd]);
            for j in 0..n * hd {
                let dc = dh[j] * o[j] * (one - st.tanh_c[j] * st.tanh_c[j]) + dc_next[j];
                da[0][j] = dc * g[j] * i[j] * (one - i[j]);
                da[1][j] = dc * st.c_prev[j] * f[j] * (one - f[j]);
                da[2][j] = dh[j] * st.tanh_c[j] * o[j] * (one - o[j]);
                da[3][j] = dc * i[j] * (one - g[j] * g[j]);
                dc_next[j] = dc * f[j];
            }
            let mut dxt = vec![S::zero(); n * d];
            let mut dh_prev = vec![S::zero(); n * hd];
            for (gate, delta) in self.gates.iter_mut().zip(&da) {
                let bg = gate.bias.grad.data_mut();
                for row in delta.chunks(hd) {
                    for (b, &v) in bg.iter_mut().zip(row) {
                        *b += v;
                    }
                }
                gate.x.backward_rows(&st.x, delta, Some(&mut dxt), n);
                gate.h.backward_rows(&st.h_prev, delta, Some(&mut dh_prev), n);
            }
            for s in 0..n {
                let o = (s * t + step) * d;
                dx[o..o + d].copy_from_slice(&dxt[s * d..(s + 1) * d]);
            }
            dh_next = dh_prev;
        }
        Tensor::new(vec![n, t, d], dx)
    }

    fn params(&self) -> Vec<&Param<S>> {
        let mut p = Vec::new();
        for gate in &self.gates {
            p.extend(gate.x.params());
            p.extend(gate.h.params());
            p.push(&gate.bias);
        }
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param<S>> {
        let mut p = Vec::new();
        for gate in &mut self.gates {
            p.extend(gate.x.params_mut());
            p.extend(gate.h.params_mut());
            p.push(&mut gate.bias);
        }
        p
    }

    fn clear_cache(&mut self) {
        self.cache = None;
    }

    /// Per step: the eight maps plus 9 element-wise operations per hidden
    /// unit (four gate nonlinearities, three for the cell update, tanh of
    /// the cell, the output product).
    fn flops(&self, input: &[usize]) -> Result<usize> {
        Module::<S>::output_shape(self, input)?;
        let maps: usize = self
            .gates
            .iter()
            .map(|g| g.x.flops_per_row() + g.h.flops_per_row())
            .sum();
        Ok(input[0] * (maps + 9 * self.hidden()))
    }

    fn mode(&self) -> Option<ProjectionMode> {
        Some(self.gates[0].x.mode())
    }

    fn alpha(&self) -> usize {
        self.alpha
    }
}
