//! Small dense networks with tanh hidden layers and a linear output layer,
//! trained by backpropagation with Adam.

use std::io::{BufRead, Write};

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;

use crate::error::{Error, Result};
use crate::fmt::exact;
use crate::rng;

/// Weight matrices are stored `(fan_in, fan_out)` so a batch `X` of shape
/// `(n, fan_in)` maps to `X · W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub sizes: Vec<usize>,
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

#[derive(Debug, Clone)]
pub struct Grads {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

/// Activations of every layer from one forward pass, input first.
pub struct Trace {
    pub layers: Vec<Array2<f64>>,
}

impl Trace {
    pub fn output(&self) -> &Array2<f64> {
        self.layers.last().expect("non-empty trace")
    }

    pub fn last_hidden(&self) -> &Array2<f64> {
        &self.layers[self.layers.len() - 2]
    }
}

impl Mlp {
    /// Glorot-uniform weights, zero biases.
    pub fn new(sizes: &[usize], seed: u64) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::Config(format!("invalid layer sizes {sizes:?}")));
        }
        let mut rng = rng::stream(seed, &[0x6d6c70]);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in sizes.windows(2) {
            let bound = (6.0 / (w[0] + w[1]) as f64).sqrt();
            weights.push(Array2::from_shape_fn((w[0], w[1]), |_| rng.random_range(-bound..bound)));
            biases.push(Array1::zeros(w[1]));
        }
        Ok(Self { sizes: sizes.to_vec(), weights, biases })
    }

    pub fn zeros(sizes: &[usize]) -> Self {
        Self {
            sizes: sizes.to_vec(),
            weights: sizes.windows(2).map(|w| Array2::zeros((w[0], w[1]))).collect(),
            biases: sizes.windows(2).map(|w| Array1::zeros(w[1])).collect(),
        }
    }

    pub fn n_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn forward_trace(&self, x: ArrayView2<f64>) -> Trace {
        let mut layers = Vec::with_capacity(self.n_layers() + 1);
        layers.push(x.to_owned());
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = layers[l].dot(w);
            z += b;
            if l + 1 < self.n_layers() {
                z.mapv_inplace(f64::tanh);
            }
            layers.push(z);
        }
        Trace { layers }
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut a = x.to_owned();
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = a.dot(w);
            z += b;
            if l + 1 < self.n_layers() {
                z.mapv_inplace(f64::tanh);
            }
            a = z;
        }
        a
    }

    /// Activations of the last hidden layer.
    pub fn last_hidden(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut a = x.to_owned();
        for (w, b) in self.weights.iter().zip(&self.biases).take(self.n_layers() - 1) {
            let mut z = a.dot(w);
            z += b;
            z.mapv_inplace(f64::tanh);
            a = z;
        }
        a
    }

    /// Gradients of `sum(d_out ⊙ output)` with respect to every parameter.
    pub fn backward(&self, trace: &Trace, d_out: &Array2<f64>) -> Grads {
        let n_layers = self.n_layers();
        let mut gw = Vec::with_capacity(n_layers);
        let mut gb = Vec::with_capacity(n_layers);
        let mut delta = d_out.clone();
        for l in (0..n_layers).rev() {
            gw.push(trace.layers[l].t().dot(&delta));
            gb.push(delta.sum_axis(Axis(0)));
            if l > 0 {
                let mut back = delta.dot(&self.weights[l].t());
                // tanh' = 1 - a^2 on the stored activation.
                back.zip_mut_with(&trace.layers[l], |d, &a| *d *= 1.0 - a * a);
                delta = back;
            }
        }
        gw.reverse();
        gb.reverse();
        Grads { weights: gw, biases: gb }
    }

    pub fn n_params(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>() + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    /// Parameters flattened layer by layer, weights before biases.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter());
            out.extend(b.iter());
        }
        out
    }

    pub fn set_params(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.n_params());
        let mut it = flat.iter();
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            w.iter_mut().chain(b.iter_mut()).for_each(|p| *p = *it.next().unwrap());
        }
    }

    pub fn squared_norm(&self) -> f64 {
        self.weights.iter().map(|w| w.iter().map(|v| v * v).sum::<f64>()).sum::<f64>()
            + self.biases.iter().map(|b| b.iter().map(|v| v * v).sum::<f64>()).sum::<f64>()
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|p| p.is_finite())
    }

    pub fn write<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        let sizes: Vec<String> = self.sizes.iter().map(|s| s.to_string()).collect();
        writeln!(w, "layers {}", sizes.join(" "))?;
        for (l, (wm, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            // Row-major (fan_out x fan_in): row j holds the weights feeding unit j.
            writeln!(w, "W {l}")?;
            for j in 0..wm.ncols() {
                let row: Vec<String> = wm.column(j).iter().map(|&v| exact(v)).collect();
                writeln!(w, "{}", row.join(" "))?;
            }
            writeln!(w, "b {l}")?;
            let row: Vec<String> = b.iter().map(|&v| exact(v)).collect();
            writeln!(w, "{}", row.join(" "))?;
        }
        Ok(())
    }

    pub fn read<I: Iterator<Item = std::io::Result<String>>>(lines: &mut I) -> Result<Self> {
        let mut next = || -> Result<String> {
            lines.next().ok_or_else(|| Error::Parse("unexpected end of weights file".into()))?.map_err(Error::from)
        };
        let header = next()?;
        let sizes: Vec<usize> = header
            .strip_prefix("layers ")
            .ok_or_else(|| Error::Parse(format!("expected 'layers', got '{header}'")))?
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| Error::Parse(format!("bad layer size '{t}'"))))
            .collect::<Result<_>>()?;
        let mut net = Mlp::zeros(&sizes);
        if sizes.len() < 2 {
            return Err(Error::Parse("need at least two layer sizes".into()));
        }
        for l in 0..net.n_layers() {
            let tag = next()?;
            if tag != format!("W {l}") {
                return Err(Error::Parse(format!("expected 'W {l}', got '{tag}'")));
            }
            for j in 0..sizes[l + 1] {
                let row = parse_row(&next()?, sizes[l])?;
                net.weights[l].column_mut(j).assign(&Array1::from(row));
            }
            let tag = next()?;
            if tag != format!("b {l}") {
                return Err(Error::Parse(format!("expected 'b {l}', got '{tag}'")));
            }
            net.biases[l] = Array1::from(parse_row(&next()?, sizes[l + 1])?);
        }
        Ok(net)
    }
}

fn parse_row(line: &str, expect: usize) -> Result<Vec<f64>> {
    let row: Vec<f64> = line
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| Error::Parse(format!("bad number '{t}'"))))
        .collect::<Result<_>>()?;
    if row.len() != expect {
        return Err(Error::Parse(format!("expected {expect} values, got {}", row.len())));
    }
    Ok(row)
}

/// Reads `key value...` metadata lines until the `layers` header.
pub fn read_versioned<R: BufRead>(r: R, magic: &str) -> Result<(Vec<(String, Vec<f64>)>, Mlp)> {
    let mut lines = r.lines().peekable();
    let first = lines.next().ok_or_else(|| Error::Parse("empty weights file".into()))??;
    if first.trim() != magic {
        return Err(Error::Parse(format!("expected header '{magic}', got '{first}'")));
    }
    let mut meta = Vec::new();
    while let Some(Ok(line)) = lines.peek() {
        if line.starts_with("layers ") {
            break;
        }
        let line = lines.next().unwrap()?;
        let mut toks = line.split_whitespace();
        let key = toks.next().ok_or_else(|| Error::Parse("blank metadata line".into()))?.to_string();
        let vals = toks
            .map(|t| t.parse().map_err(|_| Error::Parse(format!("bad metadata value '{t}'"))))
            .collect::<Result<Vec<f64>>>()?;
        meta.push((key, vals));
    }
    let net = Mlp::read(&mut lines)?;
    Ok((meta, net))
}

pub fn write_versioned<W: Write>(w: &mut W, magic: &str, meta: &[(&str, Vec<f64>)], net: &Mlp) -> std::io::Result<()> {
    writeln!(w, "{magic}")?;
    for (k, vals) in meta {
        let vals: Vec<String> = vals.iter().map(|&v| exact(v)).collect();
        writeln!(w, "{k} {}", vals.join(" "))?;
    }
    net.write(w)
}

/// Adam first/second moment estimates for one network.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(net: &Mlp, lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: vec![0.0; net.n_params()], v: vec![0.0; net.n_params()] }
    }

    pub fn step(&mut self, net: &mut Mlp, grads: &Grads) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let mut i = 0;
        for l in 0..net.n_layers() {
            let params = net.weights[l].iter_mut().chain(net.biases[l].iter_mut());
            let gs = grads.weights[l].iter().chain(grads.biases[l].iter());
            for (p, &g) in params.zip(gs) {
                self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
                self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
                *p -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + self.eps);
                i += 1;
            }
        }
    }
}

/// Fisher-Yates permutation of `0..n` from a seeded stream.
pub fn shuffled(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = rng::stream(seed, &[0x5348, epoch]);
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    idx
}
