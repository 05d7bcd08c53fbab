//! Bidirectional GRU encoder with an affine output head.
//!
//! All parameters of one node live in a single flat `Vec<f64>` so the
//! optimizer, checkpointing and finite-difference checks can treat them
//! uniformly. Per direction the layout is `W` (3H x in), `U` (3H x H) and
//! `b` (3H), gate blocks ordered update, reset, candidate. The head follows
//! the two directions: `A` (out x 2H) then `a` (out).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetShape {
    pub input: usize,
    pub hidden: usize,
    pub outputs: usize,
}

impl NetShape {
    fn dir_len(&self) -> usize {
        3 * self.hidden * (self.input + self.hidden + 1)
    }

    fn head_offset(&self) -> usize {
        2 * self.dir_len()
    }

    pub fn encoding_len(&self) -> usize {
        2 * self.hidden
    }

    pub fn param_count(&self) -> usize {
        self.head_offset() + self.outputs * (self.encoding_len() + 1)
    }

    /// Parameter range of the recurrent part (both directions).
    pub fn recurrent_range(&self) -> std::ops::Range<usize> {
        0..self.head_offset()
    }

    /// Parameter range of the head bias vector.
    pub fn head_bias_range(&self) -> std::ops::Range<usize> {
        let start = self.head_offset() + self.outputs * self.encoding_len();
        start..start + self.outputs
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Per-direction activations kept for the backward pass.
#[derive(Debug, Clone, Default)]
struct DirCache {
    /// Hidden states `h_0..h_L`, `(L + 1) x H`.
    hs: Vec<f64>,
    zs: Vec<f64>,
    rs: Vec<f64>,
    ns: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct NetCache {
    window: Vec<f64>,
    dirs: [DirCache; 2],
    encoding: Vec<f64>,
}

impl NetCache {
    pub fn encoding(&self) -> &[f64] {
        &self.encoding
    }
}

struct DirView<'a> {
    w: &'a [f64],
    u: &'a [f64],
    b: &'a [f64],
}

fn dir_view<'a>(shape: &NetShape, p: &'a [f64]) -> DirView<'a> {
    let h = shape.hidden;
    let (w, rest) = p.split_at(3 * h * shape.input);
    let (u, rest) = rest.split_at(3 * h * h);
    DirView {
        w,
        u,
        b: &rest[..3 * h],
    }
}

fn run_direction(
    shape: &NetShape,
    p: &[f64],
    window: &[f64],
    reverse: bool,
    mut cache: Option<&mut DirCache>,
) -> Vec<f64> {
    let (h, nin) = (shape.hidden, shape.input);
    let steps = window.len() / nin;
    let v = dir_view(shape, p);
    let mut state = vec![0.0; h];
    let mut pre = vec![0.0; 3 * h];
    let mut rh = vec![0.0; h];
    if let Some(c) = cache.as_deref_mut() {
        c.hs.clear();
        c.hs.extend_from_slice(&state);
        c.zs.clear();
        c.rs.clear();
        c.ns.clear();
    }
    for step in 0..steps {
        let idx = if reverse { steps - 1 - step } else { step };
        let x = &window[idx * nin..(idx + 1) * nin];
        pre.copy_from_slice(v.b);
        for (k, out) in pre.iter_mut().enumerate() {
            let row = &v.w[k * nin..(k + 1) * nin];
            *out += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        }
        for (k, out) in pre[..2 * h].iter_mut().enumerate() {
            let row = &v.u[k * h..(k + 1) * h];
            *out += row.iter().zip(&state).map(|(a, b)| a * b).sum::<f64>();
        }
        let (gates, cand) = pre.split_at_mut(2 * h);
        for g in gates.iter_mut() {
            *g = sigmoid(*g);
        }
        let (z, r) = gates.split_at(h);
        for j in 0..h {
            rh[j] = r[j] * state[j];
        }
        for (k, out) in cand.iter_mut().enumerate() {
            let row = &v.u[(2 * h + k) * h..(2 * h + k + 1) * h];
            *out = (*out + row.iter().zip(&rh).map(|(a, b)| a * b).sum::<f64>()).tanh();
        }
        for j in 0..h {
            state[j] = (1.0 - z[j]) * state[j] + z[j] * cand[j];
        }
        if let Some(c) = cache.as_deref_mut() {
            c.zs.extend_from_slice(z);
            c.rs.extend_from_slice(r);
            c.ns.extend_from_slice(cand);
            c.hs.extend_from_slice(&state);
        }
    }
    state
}

fn backward_direction(
    shape: &NetShape,
    p: &[f64],
    window: &[f64],
    reverse: bool,
    cache: &DirCache,
    d_final: &[f64],
    grad: &mut [f64],
) {
    let (h, nin) = (shape.hidden, shape.input);
    let steps = window.len() / nin;
    let v = dir_view(shape, p);
    let (gw, rest) = grad.split_at_mut(3 * h * nin);
    let (gu, rest) = rest.split_at_mut(3 * h * h);
    let gb = &mut rest[..3 * h];

    let mut dh = d_final.to_vec();
    let mut dh_prev = vec![0.0; h];
    let mut da = vec![0.0; 3 * h];
    let mut rh = vec![0.0; h];
    let mut drh = vec![0.0; h];
    for step in (0..steps).rev() {
        let idx = if reverse { steps - 1 - step } else { step };
        let x = &window[idx * nin..(idx + 1) * nin];
        let h_prev = &cache.hs[step * h..(step + 1) * h];
        let z = &cache.zs[step * h..(step + 1) * h];
        let r = &cache.rs[step * h..(step + 1) * h];
        let n = &cache.ns[step * h..(step + 1) * h];

        for j in 0..h {
            let dz = dh[j] * (n[j] - h_prev[j]);
            let dn = dh[j] * z[j];
            dh_prev[j] = dh[j] * (1.0 - z[j]);
            da[j] = dz * z[j] * (1.0 - z[j]);
            da[2 * h + j] = dn * (1.0 - n[j] * n[j]);
            rh[j] = r[j] * h_prev[j];
        }
        // candidate block: U_n acts on r * h_prev
        drh.iter_mut().for_each(|v| *v = 0.0);
        for k in 0..h {
            let dan = da[2 * h + k];
            if dan == 0.0 {
                continue;
            }
            let row = (2 * h + k) * h;
            let urow = &v.u[row..row + h];
            let grow = &mut gu[row..row + h];
            for j in 0..h {
                grow[j] += dan * rh[j];
                drh[j] += urow[j] * dan;
            }
        }
        for j in 0..h {
            let dr = drh[j] * h_prev[j];
            dh_prev[j] += drh[j] * r[j];
            da[h + j] = dr * r[j] * (1.0 - r[j]);
        }
        // update and reset blocks: U acts on h_prev
        for k in 0..2 * h {
            let dak = da[k];
            if dak == 0.0 {
                continue;
            }
            let urow = &v.u[k * h..(k + 1) * h];
            let grow = &mut gu[k * h..(k + 1) * h];
            for j in 0..h {
                grow[j] += dak * h_prev[j];
                dh_prev[j] += urow[j] * dak;
            }
        }
        for k in 0..3 * h {
            gb[k] += da[k];
            let grow = &mut gw[k * nin..(k + 1) * nin];
            for (g, xi) in grow.iter_mut().zip(x) {
                *g += da[k] * xi;
            }
        }
        std::mem::swap(&mut dh, &mut dh_prev);
    }
}

/// One node's encoder and head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeNet {
    pub shape: NetShape,
    pub params: Vec<f64>,
}

impl NodeNet {
    pub fn zeros(shape: NetShape) -> Self {
        NodeNet {
            shape,
            params: vec![0.0; shape.param_count()],
        }
    }

    /// Recurrent weights and biases uniform in `+-1/sqrt(H)`, head weights
    /// uniform in `+-1/sqrt(2H)`, head bias zero.
    pub fn init<R: Rng>(shape: NetShape, rng: &mut R) -> Self {
        let mut net = Self::zeros(shape);
        let k = 1.0 / (shape.hidden as f64).sqrt();
        for p in &mut net.params[shape.recurrent_range()] {
            *p = rng.random_range(-k..k);
        }
        let kh = 1.0 / (shape.encoding_len() as f64).sqrt();
        let head_w = shape.head_offset()..shape.head_bias_range().start;
        for p in &mut net.params[head_w] {
            *p = rng.random_range(-kh..kh);
        }
        net
    }

    fn check_window(&self, window: &[f64]) -> Result<()> {
        if window.is_empty() {
            return Err(Error::invalid("empty input window"));
        }
        if !window.len().is_multiple_of(self.shape.input) {
            return Err(Error::invalid(format!(
                "window length {} is not a multiple of the input size {}",
                window.len(),
                self.shape.input
            )));
        }
        Ok(())
    }

    /// Concatenated final forward and backward hidden states (2H values).
    /// `window` is row-major, `input` values per time step.
    pub fn encode(&self, window: &[f64]) -> Result<Vec<f64>> {
        self.check_window(window)?;
        let dl = self.shape.dir_len();
        let mut enc = run_direction(&self.shape, &self.params[..dl], window, false, None);
        enc.extend(run_direction(
            &self.shape,
            &self.params[dl..2 * dl],
            window,
            true,
            None,
        ));
        Ok(enc)
    }

    /// Affine head applied to an encoding.
    pub fn head(&self, encoding: &[f64]) -> Vec<f64> {
        let e = self.shape.encoding_len();
        let off = self.shape.head_offset();
        let bias = self.shape.head_bias_range();
        (0..self.shape.outputs)
            .map(|o| {
                let row = &self.params[off + o * e..off + (o + 1) * e];
                self.params[bias.start + o]
                    + row.iter().zip(encoding).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect()
    }

    /// Encoder plus head, keeping activations for [`NodeNet::backward`].
    pub fn forward_cached(&self, window: &[f64]) -> Result<(Vec<f64>, NetCache)> {
        self.check_window(window)?;
        let dl = self.shape.dir_len();
        let mut cache = NetCache {
            window: window.to_vec(),
            ..Default::default()
        };
        let [fwd, bwd] = &mut cache.dirs;
        let mut enc = run_direction(&self.shape, &self.params[..dl], window, false, Some(fwd));
        enc.extend(run_direction(
            &self.shape,
            &self.params[dl..2 * dl],
            window,
            true,
            Some(bwd),
        ));
        let out = self.head(&enc);
        cache.encoding = enc;
        Ok((out, cache))
    }

    /// Accumulates into `grad` the gradient given `d_out`, the gradient with
    /// respect to the head outputs. `head_only` stops at the head.
    pub fn backward(&self, cache: &NetCache, d_out: &[f64], grad: &mut [f64], head_only: bool) {
        let shape = &self.shape;
        let e = shape.encoding_len();
        let off = shape.head_offset();
        let bias = shape.head_bias_range();
        let mut d_enc = vec![0.0; e];
        for (o, &g) in d_out.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grad[bias.start + o] += g;
            let row = off + o * e;
            for j in 0..e {
                grad[row + j] += g * cache.encoding[j];
                d_enc[j] += g * self.params[row + j];
            }
        }
        if head_only {
            return;
        }
        let dl = shape.dir_len();
        let h = shape.hidden;
        let (g_fwd, rest) = grad.split_at_mut(dl);
        backward_direction(
            shape,
            &self.params[..dl],
            &cache.window,
            false,
            &cache.dirs[0],
            &d_enc[..h],
            g_fwd,
        );
        backward_direction(
            shape,
            &self.params[dl..2 * dl],
            &cache.window,
            true,
            &cache.dirs[1],
            &d_enc[h..],
            &mut rest[..dl],
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn shape() -> NetShape {
        NetShape {
            input: 2,
            hidden: 5,
            outputs: 3,
        }
    }

    #[test]
    fn zero_parameters_encode_to_zero() {
        let net = NodeNet::zeros(NetShape {
            input: 1,
            hidden: 60,
            outputs: 2,
        });
        let enc = net.encode(&[3.0, -1.0, 7.5, 2.0]).unwrap();
        assert_eq!(enc.len(), 120);
        assert!(enc.iter().all(|&v| v == 0.0));
        assert!(net.encode(&[]).is_err());
    }

    #[test]
    fn deterministic_encoding() {
        let a = NodeNet::init(shape(), &mut ChaCha8Rng::seed_from_u64(3));
        let b = NodeNet::init(shape(), &mut ChaCha8Rng::seed_from_u64(3));
        let w = [0.5, 1.0, -0.2, 0.3, 0.9, 0.1];
        assert_eq!(a.encode(&w).unwrap(), b.encode(&w).unwrap());
    }

    #[test]
    fn single_step_directions_agree_with_hand_trace() {
        let mut net = NodeNet::init(shape(), &mut ChaCha8Rng::seed_from_u64(9));
        // give both directions the same weights
        let dl = shape().dir_len();
        let (a, b) = net.params.split_at_mut(dl);
        b[..dl].copy_from_slice(a);
        let x = [0.7, -0.4];
        let enc = net.encode(&x).unwrap();
        let h = shape().hidden;
        assert_eq!(&enc[..h], &enc[h..]);

        // from h = 0: z = s(Wz x + bz), n = tanh(Wn x + bn), h' = z * n
        let v = dir_view(&shape(), &net.params[..dl]);
        for j in 0..h {
            let dot = |k: usize| v.w[k * 2] * x[0] + v.w[k * 2 + 1] * x[1] + v.b[k];
            let z = sigmoid(dot(j));
            let n = dot(2 * h + j).tanh();
            assert!((enc[j] - z * n).abs() < 1e-14);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let net = NodeNet::init(shape(), &mut ChaCha8Rng::seed_from_u64(1));
        let window = [0.3, 1.2, -0.7, 0.4, 0.9, -0.1, 0.2, 0.5];
        let d_out = [0.7, -1.3, 0.4];
        let loss = |n: &NodeNet| -> f64 {
            let (o, _) = n.forward_cached(&window).unwrap();
            o.iter().zip(&d_out).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = net.forward_cached(&window).unwrap();
        let mut grad = vec![0.0; net.params.len()];
        net.backward(&cache, &d_out, &mut grad, false);
        for k in 0..net.params.len() {
            let mut p = net.clone();
            p.params[k] += 1e-5;
            let up = loss(&p);
            p.params[k] -= 2e-5;
            let down = loss(&p);
            let fd = (up - down) / 2e-5;
            let scale = fd.abs().max(grad[k].abs()).max(1e-6);
            assert!((fd - grad[k]).abs() / scale < 1e-5, "param {k}: {fd} vs {}", grad[k]);
        }
    }
}
