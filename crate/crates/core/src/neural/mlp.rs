use crate::error::{Error, Result};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use std::fmt::Write as _;

/// Fully connected network with rectifier hidden layers and a linear output
/// layer. Parameters are stored flat, layer by layer, each layer as a
/// row-major `out × in` weight matrix followed by its bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    params: Vec<f64>,
}

/// Activations recorded by [`Mlp::forward_trace`]: `acts[0]` is the input
/// and `acts[l + 1]` the output of layer `l`.
#[derive(Debug, Clone)]
pub struct Trace {
    pub acts: Vec<Vec<f64>>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        self.acts.last().expect("trace has an input")
    }
}

fn param_count(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| w[1] * w[0] + w[1]).sum()
}

impl Mlp {
    /// All-zero network.
    pub fn zeros(sizes: &[usize]) -> Result<Self> {
        Self::from_params(sizes.to_vec(), vec![0.0; param_count(sizes)])
    }

    /// He-initialised weights, zero biases.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(sizes)?;
        let mut off = 0;
        for w in sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            if fan_in > 0 {
                let sd = (2.0 / fan_in as f64).sqrt();
                let normal = Normal::new(0.0, sd).expect("positive sd");
                for p in &mut net.params[off..off + fan_in * fan_out] {
                    *p = normal.sample(rng);
                }
            }
            off += fan_in * fan_out + fan_out;
        }
        Ok(net)
    }

    pub fn from_params(sizes: Vec<usize>, params: Vec<f64>) -> Result<Self> {
        if sizes.len() < 2 || sizes[1..].contains(&0) {
            return Err(Error::InvalidInput(format!("bad layer sizes {sizes:?}")));
        }
        if params.len() != param_count(&sizes) {
            return Err(Error::DimensionMismatch {
                expected: param_count(&sizes),
                found: params.len(),
            });
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Numerical("non-finite network parameter".into()));
        }
        Ok(Self { sizes, params })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().expect("at least two layers")
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_trace(x)?.acts.pop().expect("non-empty trace"))
    }

    pub fn forward_trace(&self, x: &[f64]) -> Result<Trace> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                found: x.len(),
            });
        }
        let layers = self.sizes.len() - 1;
        let mut acts = Vec::with_capacity(layers + 1);
        acts.push(x.to_vec());
        let mut off = 0;
        for l in 0..layers {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let w = &self.params[off..off + n_in * n_out];
            let b = &self.params[off + n_in * n_out..off + n_in * n_out + n_out];
            let input = &acts[l];
            let mut out = Vec::with_capacity(n_out);
            for r in 0..n_out {
                let row = &w[r * n_in..(r + 1) * n_in];
                let mut z = b[r];
                for (wi, xi) in row.iter().zip(input) {
                    z += wi * xi;
                }
                out.push(if l + 1 < layers { z.max(0.0) } else { z });
            }
            off += n_in * n_out + n_out;
            acts.push(out);
        }
        if acts[layers].iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("NaN in forward pass".into()));
        }
        Ok(Trace { acts })
    }

    /// Reverse-mode pass for the output cotangent `dout`. Parameter
    /// gradients are added to `grad`; the input gradient is returned. The
    /// rectifier derivative at 0 is taken as 0.
    pub fn backward(&self, trace: &Trace, dout: &[f64], grad: &mut [f64]) -> Vec<f64> {
        debug_assert_eq!(grad.len(), self.params.len());
        self.reverse(trace, dout, Some(grad))
    }

    /// Input gradient only.
    pub fn input_gradient(&self, trace: &Trace, dout: &[f64]) -> Vec<f64> {
        self.reverse(trace, dout, None)
    }

    fn reverse(&self, trace: &Trace, dout: &[f64], mut grad: Option<&mut [f64]>) -> Vec<f64> {
        let layers = self.sizes.len() - 1;
        let mut offsets = Vec::with_capacity(layers);
        let mut off = 0;
        for l in 0..layers {
            offsets.push(off);
            off += self.sizes[l] * self.sizes[l + 1] + self.sizes[l + 1];
        }
        let mut delta = dout.to_vec();
        for l in (0..layers).rev() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            if l + 1 < layers {
                for (d, a) in delta.iter_mut().zip(&trace.acts[l + 1]) {
                    if *a <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            let off = offsets[l];
            let input = &trace.acts[l];
            let mut next = vec![0.0; n_in];
            for r in 0..n_out {
                let dr = delta[r];
                if dr == 0.0 {
                    continue;
                }
                let row = off + r * n_in;
                if let Some(g) = grad.as_deref_mut() {
                    for c in 0..n_in {
                        g[row + c] += dr * input[c];
                    }
                    g[off + n_in * n_out + r] += dr;
                }
                for c in 0..n_in {
                    next[c] += dr * self.params[row + c];
                }
            }
            delta = next;
        }
        delta
    }

    /// Plain-text dump: a `sizes` header, then per layer one line per
    /// weight row and one bias line.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        let sizes: Vec<String> = self.sizes.iter().map(|v| v.to_string()).collect();
        writeln!(s, "sizes {}", sizes.join(" ")).unwrap();
        let mut off = 0;
        for w in self.sizes.windows(2) {
            let (n_in, n_out) = (w[0], w[1]);
            writeln!(s, "layer {n_in} {n_out}").unwrap();
            for r in 0..n_out {
                let row: Vec<String> = self.params[off + r * n_in..off + (r + 1) * n_in]
                    .iter()
                    .map(|v| format!("{v:?}"))
                    .collect();
                writeln!(s, "w {}", row.join(" ")).unwrap();
            }
            off += n_in * n_out;
            let b: Vec<String> = self.params[off..off + n_out]
                .iter()
                .map(|v| format!("{v:?}"))
                .collect();
            writeln!(s, "b {}", b.join(" ")).unwrap();
            off += n_out;
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut sizes = None;
        let mut params = Vec::new();
        for (k, line) in text.lines().enumerate() {
            let mut it = line.split_whitespace();
            let Some(tag) = it.next() else { continue };
            let bad = |m: String| Error::Parse {
                line: k + 1,
                message: m,
            };
            match tag {
                "sizes" => {
                    let v: std::result::Result<Vec<usize>, _> = it.map(str::parse).collect();
                    sizes = Some(v.map_err(|e| bad(e.to_string()))?);
                }
                "layer" => {}
                "w" | "b" => {
                    for tok in it {
                        params.push(tok.parse::<f64>().map_err(|e| bad(e.to_string()))?);
                    }
                }
                other => return Err(bad(format!("unknown record `{other}`"))),
            }
        }
        let sizes = sizes.ok_or(Error::Parse {
            line: 1,
            message: "missing sizes header".into(),
        })?;
        Self::from_params(sizes, params)
    }
}

/// Bias-corrected Adam for minimisation.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(n: usize, lr: f64) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(Error::DimensionMismatch {
                expected: self.m.len(),
                found: grad.len(),
            });
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for k in 0..params.len() {
            let g = grad[k];
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g;
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g;
            let mh = self.m[k] / c1;
            let vh = self.v[k] / c2;
            params[k] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
        Ok(())
    }
}
