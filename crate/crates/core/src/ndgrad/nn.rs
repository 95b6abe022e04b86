//! Parameterized layers built from tape ops.

use rand::Rng;

use super::params::{BufferId, ParamId, ParamStore, Session};
use super::tape::{Conv1dSpec, Var};
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Kaiming-uniform bound for a given fan-in.
pub fn kaiming_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in.max(1) as f64).sqrt()
}

#[derive(Clone, Debug)]
pub struct Conv1d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub spec: Conv1dSpec,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
}

impl Conv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        spec: Conv1dSpec,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let bound = kaiming_bound(cin * kernel);
        let w = store.add(
            format!("{name}.w"),
            Tensor::uniform(vec![cout, cin, kernel], bound, rng),
        )?;
        let b = if bias {
            Some(store.add(format!("{name}.b"), Tensor::zeros(vec![cout]))?)
        } else {
            None
        };
        Ok(Conv1d {
            w,
            b,
            spec,
            cin,
            cout,
            kernel,
        })
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let w = s.param(self.w);
        let b = self.b.map(|b| s.param(b));
        s.tape.conv1d(x, w, b, self.spec)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        din: usize,
        dout: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        Self::with_bound(store, name, din, dout, bias, kaiming_bound(din), rng)
    }

    pub fn with_bound<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        din: usize,
        dout: usize,
        bias: bool,
        bound: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let w = if bound > 0.0 {
            Tensor::uniform(vec![dout, din], bound, rng)
        } else {
            Tensor::zeros(vec![dout, din])
        };
        let w = store.add(format!("{name}.w"), w)?;
        let b = if bias {
            Some(store.add(format!("{name}.b"), Tensor::zeros(vec![dout]))?)
        } else {
            None
        };
        Ok(Linear { w, b, din, dout })
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let w = s.param(self.w);
        let b = self.b.map(|b| s.param(b));
        s.tape.linear(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm1d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm1d {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Result<Self> {
        Ok(BatchNorm1d {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(vec![channels], T::one()))?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(vec![channels]))?,
            running_mean: store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(vec![channels]))?,
            running_var: store.add_buffer(
                format!("{name}.running_var"),
                Tensor::full(vec![channels], T::one()),
            )?,
            momentum: 0.1,
            eps: 1e-5,
        })
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        s.batch_norm(x, self)
    }
}

/// `[B, C, L]` to a list of `L` tensors of shape `[B, C]`.
pub fn unstack_time<T: Real>(s: &mut Session<'_, T>, x: Var) -> Result<Vec<Var>> {
    let shape = s.tape.shape(x).to_vec();
    if shape.len() != 3 {
        return Err(Error::shape("unstack_time", format!("expected [B,C,L], got {shape:?}")));
    }
    let (b, c, l) = (shape[0], shape[1], shape[2]);
    let tm = s.tape.permute(x, &[2, 0, 1])?;
    (0..l)
        .map(|t| {
            let step = s.tape.slice(tm, 0, t, t + 1)?;
            s.tape.reshape(step, &[b, c])
        })
        .collect()
}

/// Gated recurrent unit layer (reset gate applied after the hidden matmul).
#[derive(Clone, Debug)]
pub struct Gru {
    pub wx: Linear,
    pub wh: Linear,
    pub hidden: usize,
}

impl Gru {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let bound = 1.0 / (hidden as f64).sqrt();
        Ok(Gru {
            wx: Linear::with_bound(store, &format!("{name}.wx"), input, 3 * hidden, true, bound, rng)?,
            wh: Linear::with_bound(store, &format!("{name}.wh"), hidden, 3 * hidden, true, bound, rng)?,
            hidden,
        })
    }

    /// Run over a sequence of `[B, In]` inputs, returning every hidden state.
    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, xs: &[Var]) -> Result<Vec<Var>> {
        let first = *xs.first().ok_or_else(|| Error::shape("gru", "empty sequence"))?;
        let b = s.tape.shape(first)[0];
        let hdim = self.hidden;
        let mut h = s.input(Tensor::zeros(vec![b, hdim]));
        let mut out = Vec::with_capacity(xs.len());
        for &x in xs {
            let gx = self.wx.forward(s, x)?;
            let gh = self.wh.forward(s, h)?;
            let t = &mut s.tape;
            let xz = t.slice(gx, 1, 0, hdim)?;
            let xr = t.slice(gx, 1, hdim, 2 * hdim)?;
            let xn = t.slice(gx, 1, 2 * hdim, 3 * hdim)?;
            let hz = t.slice(gh, 1, 0, hdim)?;
            let hr = t.slice(gh, 1, hdim, 2 * hdim)?;
            let hn = t.slice(gh, 1, 2 * hdim, 3 * hdim)?;
            let z = t.add(xz, hz)?;
            let z = t.sigmoid(z);
            let r = t.add(xr, hr)?;
            let r = t.sigmoid(r);
            let rn = t.mul(r, hn)?;
            let n = t.add(xn, rn)?;
            let n = t.tanh(n);
            // h' = n + z * (h - n)
            let d = t.sub(h, n)?;
            let zd = t.mul(z, d)?;
            h = t.add(n, zd)?;
            out.push(h);
        }
        Ok(out)
    }
}

/// Long short-term memory layer with input, forget, cell and output gates.
#[derive(Clone, Debug)]
pub struct Lstm {
    pub wx: Linear,
    pub wh: Linear,
    pub hidden: usize,
}

impl Lstm {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let bound = 1.0 / (hidden as f64).sqrt();
        let wx = Linear::with_bound(store, &format!("{name}.wx"), input, 4 * hidden, true, bound, rng)?;
        let wh = Linear::with_bound(store, &format!("{name}.wh"), hidden, 4 * hidden, false, bound, rng)?;
        // forget-gate bias starts at 1
        if let Some(b) = wx.b {
            let bias = store.get_mut(b).data_mut();
            bias[hidden..2 * hidden].iter_mut().for_each(|v| *v = T::one());
        }
        Ok(Lstm { wx, wh, hidden })
    }

    /// Final hidden state after consuming the sequence.
    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| Error::shape("lstm", "empty sequence"))?;
        let b = s.tape.shape(first)[0];
        let hd = self.hidden;
        let mut h = s.input(Tensor::zeros(vec![b, hd]));
        let mut c = s.input(Tensor::zeros(vec![b, hd]));
        for &x in xs {
            let gx = self.wx.forward(s, x)?;
            let gh = self.wh.forward(s, h)?;
            let t = &mut s.tape;
            let g = t.add(gx, gh)?;
            let i = t.slice(g, 1, 0, hd)?;
            let i = t.sigmoid(i);
            let f = t.slice(g, 1, hd, 2 * hd)?;
            let f = t.sigmoid(f);
            let u = t.slice(g, 1, 2 * hd, 3 * hd)?;
            let u = t.tanh(u);
            let o = t.slice(g, 1, 3 * hd, 4 * hd)?;
            let o = t.sigmoid(o);
            let fc = t.mul(f, c)?;
            let iu = t.mul(i, u)?;
            c = t.add(fc, iu)?;
            let tc = t.tanh(c);
            h = t.mul(o, tc)?;
        }
        Ok(h)
    }
}
