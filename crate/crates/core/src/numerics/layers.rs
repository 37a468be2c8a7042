//! Small building blocks shared by the sequence model and the policies.

use rand::Rng;

use super::{ConvGeometry, NumericsError, ParamId, ParamStore, Session, Tensor, Var};

/// Fully connected layer, `y = x·W + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        let w = store.add_glorot(format!("{name}.w"), in_dim, out_dim, in_dim, out_dim, rng);
        let b = store.add(format!("{name}.b"), Tensor::zeros(1, out_dim));
        Linear {
            w,
            b,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<'t>(&self, s: &Session<'t, '_>, x: Var<'t>) -> Result<Var<'t>, NumericsError> {
        x.matmul(s.param(self.w))?.add(s.param(self.b))
    }
}

/// Stride-2 "same"-padded convolutions followed by softplus.
#[derive(Clone, Debug)]
pub struct ConvStack {
    layers: Vec<(ParamId, ParamId, ConvGeometry)>,
    out_len: usize,
}

impl ConvStack {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        (height, width): (usize, usize),
        channels: &[usize],
        kernel: usize,
        rng: &mut R,
    ) -> Self {
        let mut layers = Vec::new();
        let (mut h, mut w, mut cin) = (height, width, 1);
        for (i, &cout) in channels.iter().enumerate() {
            let geom = ConvGeometry {
                in_channels: cin,
                height: h,
                width: w,
                out_channels: cout,
                kernel,
                stride: 2,
                padding: kernel / 2,
            };
            let fan_in = cin * kernel * kernel;
            let wid = store.add_glorot(
                format!("{name}.conv{i}.w"),
                cout,
                fan_in,
                fan_in,
                cout * kernel * kernel,
                rng,
            );
            let bid = store.add(format!("{name}.conv{i}.b"), Tensor::zeros(1, cout));
            layers.push((wid, bid, geom));
            h = geom.out_height();
            w = geom.out_width();
            cin = cout;
        }
        ConvStack {
            layers,
            out_len: cin * h * w,
        }
    }

    pub fn out_len(&self) -> usize {
        self.out_len
    }

    pub fn forward<'t>(&self, s: &Session<'t, '_>, x: Var<'t>) -> Result<Var<'t>, NumericsError> {
        let mut h = x;
        for (w, b, geom) in &self.layers {
            h = h.conv2d(s.param(*w), s.param(*b), *geom)?.softplus();
        }
        Ok(h)
    }
}

/// One LSTM cell over batched inputs; gate order is `[i, f, g, o]`.
#[derive(Clone, Debug)]
pub struct LstmCell {
    wx: ParamId,
    wh: ParamId,
    b: ParamId,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let wx = store.add_glorot(format!("{name}.wx"), in_dim, 4 * hidden, in_dim, hidden, rng);
        let wh = store.add_glorot(format!("{name}.wh"), hidden, 4 * hidden, hidden, hidden, rng);
        let mut bias = vec![0.0; 4 * hidden];
        // forget gate starts open
        bias[hidden..2 * hidden].iter_mut().for_each(|v| *v = 1.0);
        let b = store.add(format!("{name}.b"), Tensor::matrix(1, 4 * hidden, bias));
        LstmCell { wx, wh, b, hidden }
    }

    pub fn step<'t>(
        &self,
        s: &Session<'t, '_>,
        x: Var<'t>,
        h: Var<'t>,
        c: Var<'t>,
    ) -> Result<(Var<'t>, Var<'t>), NumericsError> {
        let n = self.hidden;
        let z = x
            .matmul(s.param(self.wx))?
            .add(h.matmul(s.param(self.wh))?)?
            .add(s.param(self.b))?;
        let i = z.slice_cols(0, n)?.sigmoid();
        let f = z.slice_cols(n, 2 * n)?.sigmoid();
        let g = z.slice_cols(2 * n, 3 * n)?.tanh();
        let o = z.slice_cols(3 * n, 4 * n)?.sigmoid();
        let c_next = f.mul(c)?.add(i.mul(g)?)?;
        let h_next = o.mul(c_next.tanh())?;
        Ok((h_next, c_next))
    }

    /// Run over `inputs` in order, returning the hidden state after each.
    pub fn run<'t>(
        &self,
        s: &Session<'t, '_>,
        inputs: &[Var<'t>],
    ) -> Result<Vec<Var<'t>>, NumericsError> {
        let Some(first) = inputs.first() else {
            return Ok(Vec::new());
        };
        let rows = first.rows();
        let mut h = s.constant(Tensor::zeros(rows, self.hidden));
        let mut c = s.constant(Tensor::zeros(rows, self.hidden));
        let mut out = Vec::with_capacity(inputs.len());
        for x in inputs {
            (h, c) = self.step(s, *x, h, c)?;
            out.push(h);
        }
        Ok(out)
    }
}

/// Bidirectional recurrent pass: for each position, the forward state
/// after reading `1..=t` and the backward state after reading `T..=t`.
#[derive(Clone, Debug)]
pub struct BiLstm {
    pub forward: LstmCell,
    pub backward: LstmCell,
}

pub struct BiStates<'t> {
    pub left: Vec<Var<'t>>,
    pub right: Vec<Var<'t>>,
}

impl BiLstm {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        BiLstm {
            forward: LstmCell::new(store, &format!("{name}.fwd"), in_dim, hidden, rng),
            backward: LstmCell::new(store, &format!("{name}.bwd"), in_dim, hidden, rng),
        }
    }

    pub fn hidden(&self) -> usize {
        self.forward.hidden
    }

    pub fn run<'t>(
        &self,
        s: &Session<'t, '_>,
        inputs: &[Var<'t>],
    ) -> Result<BiStates<'t>, NumericsError> {
        let left = self.forward.run(s, inputs)?;
        let reversed: Vec<_> = inputs.iter().rev().copied().collect();
        let mut right = self.backward.run(s, &reversed)?;
        right.reverse();
        Ok(BiStates { left, right })
    }
}

/// Linear layers each followed by softplus.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        widths: &[usize],
        rng: &mut R,
    ) -> Self {
        let mut layers = Vec::with_capacity(widths.len());
        let mut d = in_dim;
        for (i, &w) in widths.iter().enumerate() {
            layers.push(Linear::new(store, &format!("{name}.fc{i}"), d, w, rng));
            d = w;
        }
        Mlp { layers }
    }

    pub fn out_dim(&self, in_dim: usize) -> usize {
        self.layers.last().map_or(in_dim, |l| l.out_dim)
    }

    pub fn forward<'t>(&self, s: &Session<'t, '_>, x: Var<'t>) -> Result<Var<'t>, NumericsError> {
        let mut h = x;
        for l in &self.layers {
            h = l.forward(s, h)?.softplus();
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn bilstm_shapes_and_direction() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let bi = BiLstm::new(&mut store, "enc", 3, 4, &mut rng);
        let tape = Tape::new();
        let s = Session::new(&tape, &store);
        let xs: Vec<_> = (0..5)
            .map(|t| s.constant(Tensor::full(2, 3, t as f64 * 0.1)))
            .collect();
        let states = bi.run(&s, &xs).unwrap();
        assert_eq!(states.left.len(), 5);
        assert_eq!(states.right.len(), 5);
        assert_eq!(states.left[0].shape(), (2, 4));
        // The backward state at the last position has seen only the last input.
        let only_last = bi.backward.run(&s, &xs[4..]).unwrap();
        assert_eq!(states.right[4].value(), only_last[0].value());
    }

    #[test]
    fn conv_stack_halves_extent() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let conv = ConvStack::new(&mut store, "c", (16, 16), &[4, 8], 5, &mut rng);
        assert_eq!(conv.out_len(), 8 * 4 * 4);
        let tape = Tape::new();
        let s = Session::new(&tape, &store);
        let x = s.constant(Tensor::full(3, 256, 0.5));
        assert_eq!(conv.forward(&s, x).unwrap().shape(), (3, 128));
    }
}
