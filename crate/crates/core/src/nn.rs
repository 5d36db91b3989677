//! Time-conditioned fully-connected network with SELU activations,
//! hand-written reverse-mode gradients and an AdamW optimizer.
//!
//! The input is `[x, t]` (time appended as a raw scalar). Parameters are one
//! flat buffer: for each layer, the `out × in` weight matrix (row-major)
//! followed by the `out` biases.

use std::io::{Read, Write};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{invalid, Error, Result};
use crate::points::Points;

pub const SELU_ALPHA: f64 = 1.673_263_242_354_377_2;
pub const SELU_SCALE: f64 = 1.050_700_987_355_480_5;

pub const DEFAULT_HIDDEN: [usize; 2] = [64, 64];

const MAGIC: &[u8; 8] = b"MMSFMNN\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[inline]
fn selu(z: f64) -> f64 {
    if z > 0.0 {
        SELU_SCALE * z
    } else {
        SELU_SCALE * SELU_ALPHA * z.exp_m1()
    }
}

#[inline]
fn selu_grad(z: f64) -> f64 {
    if z > 0.0 {
        SELU_SCALE
    } else {
        SELU_SCALE * SELU_ALPHA * z.exp()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    widths: Vec<usize>,
    params: Vec<f64>,
}

impl Mlp {
    /// Network for `dim`-dimensional data with the given hidden widths,
    /// LeCun-normal weights and zero biases.
    pub fn new<R: Rng + ?Sized>(dim: usize, hidden: &[usize], rng: &mut R) -> Result<Self> {
        if dim == 0 {
            return Err(invalid("data dimension must be positive"));
        }
        let mut widths = Vec::with_capacity(hidden.len() + 2);
        widths.push(dim + 1);
        widths.extend_from_slice(hidden);
        widths.push(dim);
        if widths.iter().any(|&w| w == 0) {
            return Err(invalid("layer widths must be positive"));
        }
        let mut params = Vec::with_capacity(param_count(&widths));
        for w in widths.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let std = (1.0 / fan_in as f64).sqrt();
            for _ in 0..fan_in * fan_out {
                let z: f64 = StandardNormal.sample(rng);
                params.push(std * z);
            }
            params.extend(std::iter::repeat_n(0.0, fan_out));
        }
        Ok(Self { widths, params })
    }

    pub fn from_parts(widths: Vec<usize>, params: Vec<f64>) -> Result<Self> {
        if widths.len() < 2 || widths.iter().any(|&w| w == 0) {
            return Err(invalid("need at least two positive layer widths"));
        }
        if widths[0] != widths[widths.len() - 1] + 1 {
            return Err(invalid(format!(
                "input width {} must equal output width {} + 1",
                widths[0],
                widths[widths.len() - 1]
            )));
        }
        if params.len() != param_count(&widths) {
            return Err(invalid(format!(
                "expected {} parameters, got {}",
                param_count(&widths),
                params.len()
            )));
        }
        Ok(Self { widths, params })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn dim(&self) -> usize {
        self.widths[self.widths.len() - 1]
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Sets the output layer's weights and biases to zero.
    pub fn zero_output_layer(&mut self) {
        let n = self.widths.len();
        let last = self.widths[n - 1] * (self.widths[n - 2] + 1);
        let len = self.params.len();
        self.params[len - last..].fill(0.0);
    }

    fn layers(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        // (offset, fan_in, fan_out)
        let mut off = 0;
        self.widths.windows(2).map(move |w| {
            let o = off;
            off += w[0] * w[1] + w[1];
            (o, w[0], w[1])
        })
    }

    fn check_input(&self, x: &[f64], t: f64) -> Result<()> {
        if x.len() != self.dim() {
            return Err(invalid(format!(
                "input has {} dimensions, network expects {}",
                x.len(),
                self.dim()
            )));
        }
        if !t.is_finite() || x.iter().any(|v| !v.is_finite()) {
            return Err(invalid("network input must be finite"));
        }
        Ok(())
    }

    /// Forward pass without validation, using caller-provided scratch.
    pub fn forward_into(&self, x: &[f64], t: f64, scratch: &mut Scratch, out: &mut [f64]) {
        let Scratch { a, b } = scratch;
        a.clear();
        a.extend_from_slice(x);
        a.push(t);
        let n_layers = self.widths.len() - 1;
        for (l, (off, fan_in, fan_out)) in self.layers().enumerate() {
            let w = &self.params[off..off + fan_in * fan_out];
            let bias = &self.params[off + fan_in * fan_out..off + fan_in * fan_out + fan_out];
            b.clear();
            for o in 0..fan_out {
                let row = &w[o * fan_in..(o + 1) * fan_in];
                let z = bias[o] + dot(row, a);
                b.push(if l + 1 < n_layers { selu(z) } else { z });
            }
            std::mem::swap(a, b);
        }
        out.copy_from_slice(a);
    }

    pub fn forward(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        self.check_input(x, t)?;
        let mut out = vec![0.0; self.dim()];
        self.forward_into(x, t, &mut Scratch::default(), &mut out);
        Ok(out)
    }

    /// Batched forward pass; row `i` of the result is `f(xs_i, ts_i)`.
    pub fn forward_batch(&self, xs: &Points, ts: &[f64]) -> Result<Points> {
        let tape = self.record(xs, ts)?;
        Ok(tape.output().clone())
    }

    /// Forward pass over a batch that keeps every pre-activation for
    /// [`Mlp::backward`].
    pub fn record(&self, xs: &Points, ts: &[f64]) -> Result<Tape> {
        if xs.rows() != ts.len() {
            return Err(invalid(format!(
                "{} inputs but {} times",
                xs.rows(),
                ts.len()
            )));
        }
        for (x, &t) in xs.iter_rows().zip(ts) {
            self.check_input(x, t)?;
        }
        let n = xs.rows();
        let n_layers = self.widths.len() - 1;
        // activations[0] is the input, activations[l + 1] the output of layer l
        let mut activations = Vec::with_capacity(n_layers + 1);
        let mut pre = Vec::with_capacity(n_layers);
        let mut input = Vec::with_capacity(n * self.widths[0]);
        for (x, &t) in xs.iter_rows().zip(ts) {
            input.extend_from_slice(x);
            input.push(t);
        }
        activations.push(input);
        for (l, (off, fan_in, fan_out)) in self.layers().enumerate() {
            let w = &self.params[off..off + fan_in * fan_out];
            let bias = &self.params[off + fan_in * fan_out..off + fan_in * fan_out + fan_out];
            let prev = &activations[l];
            let mut z = Vec::with_capacity(n * fan_out);
            for s in 0..n {
                let a = &prev[s * fan_in..(s + 1) * fan_in];
                for o in 0..fan_out {
                    z.push(bias[o] + dot(&w[o * fan_in..(o + 1) * fan_in], a));
                }
            }
            let act = if l + 1 < n_layers {
                z.iter().map(|&v| selu(v)).collect()
            } else {
                z.clone()
            };
            pre.push(z);
            activations.push(act);
        }
        let out = activations.last().expect("at least one layer").clone();
        Ok(Tape {
            rows: n,
            pre,
            activations,
            output: Points::new(out, n, self.dim())?,
        })
    }

    /// Accumulates `Σ_i (∂L/∂out_i)ᵀ ∂out_i/∂θ` into `grads`.
    pub fn backward(&self, tape: &Tape, dout: &Points, grads: &mut [f64]) -> Result<()> {
        if dout.rows() != tape.rows || dout.dim() != self.dim() {
            return Err(invalid("output gradient does not match the recorded batch"));
        }
        if grads.len() != self.params.len() {
            return Err(invalid(
                "gradient buffer does not match the parameter count",
            ));
        }
        let layers: Vec<_> = self.layers().collect();
        let n_layers = layers.len();
        let mut delta = dout.as_slice().to_vec();
        for l in (0..n_layers).rev() {
            let (off, fan_in, fan_out) = layers[l];
            if l + 1 < n_layers {
                for (d, &z) in delta.iter_mut().zip(&tape.pre[l]) {
                    *d *= selu_grad(z);
                }
            }
            let prev = &tape.activations[l];
            let w = &self.params[off..off + fan_in * fan_out];
            let (gw, gb) =
                grads[off..off + fan_in * fan_out + fan_out].split_at_mut(fan_in * fan_out);
            let mut next = if l > 0 {
                vec![0.0; tape.rows * fan_in]
            } else {
                Vec::new()
            };
            for s in 0..tape.rows {
                let a = &prev[s * fan_in..(s + 1) * fan_in];
                let ds = &delta[s * fan_out..(s + 1) * fan_out];
                for o in 0..fan_out {
                    let g = ds[o];
                    gb[o] += g;
                    let row = &mut gw[o * fan_in..(o + 1) * fan_in];
                    for (r, ai) in row.iter_mut().zip(a) {
                        *r += g * ai;
                    }
                }
                if l > 0 {
                    let dn = &mut next[s * fan_in..(s + 1) * fan_in];
                    for o in 0..fan_out {
                        let g = ds[o];
                        if g != 0.0 {
                            for (d, wi) in dn.iter_mut().zip(&w[o * fan_in..(o + 1) * fan_in]) {
                                *d += g * wi;
                            }
                        }
                    }
                }
            }
            delta = next;
        }
        Ok(())
    }

    /// Pre-activations of every hidden unit for one input; used to keep
    /// finite-difference checks away from the SELU kink.
    pub fn hidden_preactivations(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        let xs = Points::new(x.to_vec(), 1, x.len())?;
        let tape = self.record(&xs, &[t])?;
        let n = tape.pre.len();
        Ok(tape.pre[..n - 1].concat())
    }

    pub fn write_checkpoint<W: Write>(&self, opt: Option<&AdamW>, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(self.widths.len() as u32).to_le_bytes())?;
        for &x in &self.widths {
            w.write_all(&(x as u64).to_le_bytes())?;
        }
        w.write_all(&(self.params.len() as u64).to_le_bytes())?;
        write_f64s(&mut w, &self.params)?;
        match opt {
            None => w.write_all(&[0])?,
            Some(o) => {
                w.write_all(&[1])?;
                w.write_all(&o.step.to_le_bytes())?;
                write_f64s(&mut w, &[o.lr, o.beta1, o.beta2, o.eps, o.weight_decay])?;
                write_f64s(&mut w, &o.m)?;
                write_f64s(&mut w, &o.v)?;
            }
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(Self, Option<AdamW>)> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Checkpoint("file too short".into()))?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("not a network checkpoint".into()));
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
            )));
        }
        let n_widths = read_u32(&mut r)? as usize;
        if n_widths > 1024 {
            return Err(Error::Checkpoint("implausible layer count".into()));
        }
        let widths = (0..n_widths)
            .map(|_| read_u64(&mut r).map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        let n_params = read_u64(&mut r)? as usize;
        if widths.len() < 2 || n_params != param_count(&widths) {
            return Err(Error::Checkpoint(
                "parameter count does not match widths".into(),
            ));
        }
        let params = read_f64s(&mut r, n_params)?;
        let net = Self::from_parts(widths, params).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut flag = [0u8; 1];
        read_exact(&mut r, &mut flag)?;
        let opt = match flag[0] {
            0 => None,
            1 => {
                let step = read_u64(&mut r)?;
                let h = read_f64s(&mut r, 5)?;
                let m = read_f64s(&mut r, n_params)?;
                let v = read_f64s(&mut r, n_params)?;
                Some(AdamW {
                    lr: h[0],
                    beta1: h[1],
                    beta2: h[2],
                    eps: h[3],
                    weight_decay: h[4],
                    step,
                    m,
                    v,
                })
            }
            other => return Err(Error::Checkpoint(format!("bad optimizer flag {other}"))),
        };
        Ok((net, opt))
    }
}

pub fn param_count(widths: &[usize]) -> usize {
    widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Reusable buffers for [`Mlp::forward_into`].
#[derive(Debug, Default, Clone)]
pub struct Scratch {
    a: Vec<f64>,
    b: Vec<f64>,
}

/// Recorded forward pass over a batch.
#[derive(Debug, Clone)]
pub struct Tape {
    rows: usize,
    pre: Vec<Vec<f64>>,
    activations: Vec<Vec<f64>>,
    output: Points,
}

impl Tape {
    pub fn output(&self) -> &Points {
        &self.output
    }
}

/// Adam with decoupled weight decay and bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamW {
    pub fn new(num_params: usize, lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(invalid("optimizer state does not match parameter shape"));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let decay = 1.0 - self.lr * self.weight_decay;
        for (((p, &g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p = *p * decay - self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

fn write_f64s<W: Write>(w: &mut W, xs: &[f64]) -> Result<()> {
    let mut buf = Vec::with_capacity(xs.len() * 8);
    for x in xs {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Checkpoint("truncated checkpoint".into()))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    read_exact(r, &mut buf)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn net(seed: u64) -> Mlp {
        Mlp::new(2, &DEFAULT_HIDDEN, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn parameter_count_for_2d() {
        let layers = (3 * 64 + 64) + (64 * 64 + 64) + (64 * 2 + 2);
        assert_eq!(layers, 4546);
        assert_eq!(net(0).num_params(), layers);
    }

    #[test]
    fn zero_output_layer_gives_zero() {
        let mut n = net(1);
        n.zero_output_layer();
        assert_eq!(n.forward(&[3.0, -1.0], 0.4).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn rejects_bad_inputs() {
        let n = net(2);
        assert!(n.forward(&[f64::NAN, 0.0], 0.1).is_err());
        assert!(n.forward(&[0.0], 0.1).is_err());
        assert!(n.forward(&[0.0, 0.0], f64::INFINITY).is_err());
    }

    #[test]
    fn same_seed_same_init() {
        assert_eq!(net(9), net(9));
        assert_ne!(net(9), net(10));
    }

    #[test]
    fn zero_grad_zero_decay_is_noop() {
        let mut n = net(3);
        let before = n.params().to_vec();
        let mut opt = AdamW::new(n.num_params(), 1e-3, 0.0);
        let zeros = vec![0.0; n.num_params()];
        opt.step(n.params_mut(), &zeros).unwrap();
        assert_eq!(n.params(), &before[..]);
    }

    #[test]
    fn descends_on_square() {
        let mut theta = [1.0];
        let mut opt = AdamW::new(1, 0.1, 0.0);
        let g = [2.0 * theta[0]];
        opt.step(&mut theta, &g).unwrap();
        assert!(theta[0] < 1.0);
    }

    #[test]
    fn bad_checkpoint_version() {
        let n = net(4);
        let mut buf = Vec::new();
        n.write_checkpoint(None, &mut buf).unwrap();
        buf[8] = 2;
        assert!(matches!(
            Mlp::read_checkpoint(&buf[..]),
            Err(Error::Checkpoint(_))
        ));
        assert!(Mlp::read_checkpoint(&buf[..5]).is_err());
    }
}
