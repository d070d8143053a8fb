use rand::Rng;

use super::params::{ParamId, ParamStore};
use super::tape::{Axis, Tape, Var};
use crate::error::Result;

/// A tape plus read access to the parameters, binding each parameter onto
/// the tape at most once.
pub struct Session<'a> {
    pub tape: Tape,
    store: &'a ParamStore,
    bound: Vec<Option<Var>>,
}

impl<'a> Session<'a> {
    pub fn new(store: &'a ParamStore, tape: Tape) -> Self {
        Self {
            tape,
            store,
            bound: vec![None; store.len()],
        }
    }

    pub fn inference(store: &'a ParamStore) -> Self {
        Self::new(store, Tape::new())
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.index()] {
            return v;
        }
        let v = self.tape.param(self.store, id);
        self.bound[id.index()] = Some(v);
        v
    }

    pub fn param_rows(&mut self, id: ParamId, rows: &[usize]) -> Result<Var> {
        self.tape.param_rows(self.store, id, rows)
    }
}

/// `y = x W + b`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut R) -> Self {
        Self {
            weight: store.glorot(format!("{name}.weight"), d_in, d_out, rng),
            bias: Some(store.zeros(format!("{name}.bias"), &[1, d_out])),
        }
    }

    pub fn without_bias<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            weight: store.glorot(format!("{name}.weight"), d_in, d_out, rng),
            bias: None,
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let y = s.tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = s.param(b);
                s.tape.add(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Gelu,
}

/// Two-layer feed-forward block: `Linear -> activation -> Linear`.
#[derive(Debug, Clone, Copy)]
pub struct TwoLayer {
    pub first: Linear,
    pub second: Linear,
    pub activation: Activation,
}

impl TwoLayer {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        dims: (usize, usize, usize),
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        Self {
            first: Linear::new(store, &format!("{name}.0"), dims.0, dims.1, rng),
            second: Linear::new(store, &format!("{name}.1"), dims.1, dims.2, rng),
            activation,
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let h = self.first.forward(s, x)?;
        let h = match self.activation {
            Activation::Relu => s.tape.relu(h)?,
            Activation::Gelu => s.tape.gelu(h)?,
        };
        self.second.forward(s, h)
    }
}

/// Gated recurrent unit over row vectors.
///
/// `z = σ(x Wz + h Uz + bz)`, `r = σ(x Wr + h Ur + br)`,
/// `n = tanh(x Wn + bn + r ⊙ (h Un + bhn))`, `h' = (1 - z) ⊙ n + z ⊙ h`.
#[derive(Debug, Clone, Copy)]
pub struct GruCell {
    pub input: Linear,
    pub hidden: Linear,
    pub d: usize,
}

impl GruCell {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d_in: usize, d: usize, rng: &mut R) -> Self {
        Self {
            input: Linear::new(store, &format!("{name}.input"), d_in, 3 * d, rng),
            hidden: Linear::new(store, &format!("{name}.hidden"), d, 3 * d, rng),
            d,
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var, h: Var) -> Result<Var> {
        let d = self.d;
        let gx = self.input.forward(s, x)?;
        let gh = self.hidden.forward(s, h)?;
        let t = &mut s.tape;
        let xz = t.slice(gx, Axis::Cols, 0, d)?;
        let xr = t.slice(gx, Axis::Cols, d, d)?;
        let xn = t.slice(gx, Axis::Cols, 2 * d, d)?;
        let hz = t.slice(gh, Axis::Cols, 0, d)?;
        let hr = t.slice(gh, Axis::Cols, d, d)?;
        let hn = t.slice(gh, Axis::Cols, 2 * d, d)?;
        let z = t.add(xz, hz)?;
        let z = t.sigmoid(z)?;
        let r = t.add(xr, hr)?;
        let r = t.sigmoid(r)?;
        let rn = t.mul(r, hn)?;
        let n = t.add(xn, rn)?;
        let n = t.tanh(n)?;
        // h' = n + z (h - n)
        let diff = t.sub(h, n)?;
        let zd = t.mul(z, diff)?;
        t.add(n, zd)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zero_all(store: &mut ParamStore) {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            store.value_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    #[test]
    fn gru_at_zero_parameters_halves_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let gru = GruCell::new(&mut store, "gru", 3, 4, &mut rng);
        zero_all(&mut store);
        let mut s = Session::inference(&store);
        let x = s.tape.constant(Tensor::row(vec![0.3, -0.2, 0.9]));
        let h = s.tape.constant(Tensor::row(vec![0.5, -0.4, 0.1, 0.8]));
        let out = gru.forward(&mut s, x, h).unwrap();
        assert_eq!(s.tape.value(out).data(), &[0.25, -0.2, 0.05, 0.4]);
    }

    /// Reference cell evaluated with plain loops, sharing nothing with the
    /// tape path but the parameter values.
    fn reference_gru(store: &ParamStore, gru: &GruCell, x: &[f64], h: &[f64]) -> Vec<f64> {
        let d = gru.d;
        let affine = |lin: &Linear, v: &[f64]| -> Vec<f64> {
            let w = store.value(lin.weight);
            let b = store.value(lin.bias.unwrap());
            (0..3 * d)
                .map(|j| b.data()[j] + v.iter().enumerate().map(|(i, vi)| vi * w.get(i, j)).sum::<f64>())
                .collect()
        };
        let gx = affine(&gru.input, x);
        let gh = affine(&gru.hidden, h);
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        (0..d)
            .map(|k| {
                let z = sig(gx[k] + gh[k]);
                let r = sig(gx[d + k] + gh[d + k]);
                let n = (gx[2 * d + k] + r * gh[2 * d + k]).tanh();
                (1.0 - z) * n + z * h[k]
            })
            .collect()
    }

    #[test]
    fn gru_matches_reference_and_stays_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let gru = GruCell::new(&mut store, "gru", 4, 4, &mut rng);
        let bias = gru.input.bias.unwrap();
        for (k, v) in store.value_mut(bias).data_mut().iter_mut().enumerate() {
            *v = (k as f64 * 0.7).sin();
        }
        let x = vec![1.5, -2.0, 0.25, 3.0];
        let h = vec![0.9, -0.99, 0.0, 0.5];
        let mut s = Session::inference(&store);
        let xv = s.tape.constant(Tensor::row(x.clone()));
        let hv = s.tape.constant(Tensor::row(h.clone()));
        let out = gru.forward(&mut s, xv, hv).unwrap();
        let expected = reference_gru(&store, &gru, &x, &h);
        for (a, b) in s.tape.value(out).data().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-14);
            assert!(a.abs() < 1.0);
        }
    }
}
