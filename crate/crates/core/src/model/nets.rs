//! Parallel-branch networks used for every head of the sequence model.

use rand::Rng;

use crate::numerics::layers::{BiLstm, ConvStack, Linear, Mlp};
use crate::numerics::{DiagGaussian, NumericsError, ParamStore, Session, Var};

/// Output nonlinearity of a mean head.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MeanAct {
    Identity,
    Sigmoid,
    Tanh,
}

impl MeanAct {
    fn apply<'t>(self, v: Var<'t>) -> Var<'t> {
        match self {
            MeanAct::Identity => v,
            MeanAct::Sigmoid => v.sigmoid(),
            MeanAct::Tanh => v.tanh(),
        }
    }
}

/// `{FC per input} → concat → trunk → {mean, variance}`.
///
/// The two heads share every layer except their final projection.
#[derive(Clone, Debug)]
pub struct PairedNet {
    branches: Vec<Linear>,
    trunk: Mlp,
    mean: Linear,
    var: Linear,
    act: MeanAct,
}

impl PairedNet {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        inputs: &[usize],
        branch_width: usize,
        trunk: &[usize],
        out: usize,
        act: MeanAct,
        rng: &mut R,
    ) -> Self {
        let branches: Vec<_> = inputs
            .iter()
            .enumerate()
            .map(|(i, &d)| Linear::new(store, &format!("{name}.in{i}"), d, branch_width, rng))
            .collect();
        let concat = branch_width * branches.len();
        let trunk = Mlp::new(store, &format!("{name}.trunk"), concat, trunk, rng);
        let feat = trunk.out_dim(concat);
        PairedNet {
            branches,
            mean: Linear::new(store, &format!("{name}.mean"), feat, out, rng),
            var: Linear::new(store, &format!("{name}.var"), feat, out, rng),
            trunk,
            act,
        }
    }

    pub fn forward<'t>(
        &self,
        s: &Session<'t, '_>,
        inputs: &[Var<'t>],
    ) -> Result<DiagGaussian<'t>, NumericsError> {
        assert_eq!(inputs.len(), self.branches.len(), "one input per branch");
        let parts = self
            .branches
            .iter()
            .zip(inputs)
            .map(|(b, x)| Ok(b.forward(s, *x)?.softplus()))
            .collect::<Result<Vec<_>, NumericsError>>()?;
        let h = if parts.len() == 1 {
            parts[0]
        } else {
            Var::concat(&parts)?
        };
        let h = self.trunk.forward(s, h)?;
        let mean = self.act.apply(self.mean.forward(s, h)?);
        Ok(DiagGaussian::from_raw(mean, self.var.forward(s, h)?))
    }
}

/// Convolutional frame features, or the raw pixels when no channels are
/// configured.
#[derive(Clone, Debug)]
pub struct FrameEncoder {
    conv: Option<ConvStack>,
    out_len: usize,
}

impl FrameEncoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        (height, width): (usize, usize),
        channels: &[usize],
        kernel: usize,
        rng: &mut R,
    ) -> Self {
        if channels.is_empty() {
            return FrameEncoder {
                conv: None,
                out_len: height * width,
            };
        }
        let conv = ConvStack::new(store, name, (height, width), channels, kernel, rng);
        FrameEncoder {
            out_len: conv.out_len(),
            conv: Some(conv),
        }
    }

    pub fn out_len(&self) -> usize {
        self.out_len
    }

    pub fn forward<'t>(&self, s: &Session<'t, '_>, x: Var<'t>) -> Result<Var<'t>, NumericsError> {
        match &self.conv {
            Some(c) => c.forward(s, x),
            None => Ok(x),
        }
    }
}

/// Per-step embedding of `(x_t, a_t, r_{t+1})` followed by a bidirectional
/// LSTM over the sequence.
#[derive(Clone, Debug)]
pub struct SequenceEncoder {
    frame: FrameEncoder,
    branches: [Linear; 3],
    trunk: Mlp,
    pub lstm: BiLstm,
}

pub struct EncodedSequence<'t> {
    pub left: Vec<Var<'t>>,
    pub right: Vec<Var<'t>>,
}

impl SequenceEncoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        frame: FrameEncoder,
        d_a: usize,
        d_r: usize,
        width: usize,
        trunk: &[usize],
        lstm: usize,
        rng: &mut R,
    ) -> Self {
        let branches = [
            Linear::new(store, &format!("{name}.in_x"), frame.out_len(), width, rng),
            Linear::new(store, &format!("{name}.in_a"), d_a, width, rng),
            Linear::new(store, &format!("{name}.in_r"), d_r, width, rng),
        ];
        let trunk = Mlp::new(store, &format!("{name}.trunk"), 3 * width, trunk, rng);
        let feat = trunk.out_dim(3 * width);
        let lstm = BiLstm::new(store, &format!("{name}.lstm"), feat, lstm, rng);
        SequenceEncoder {
            frame,
            branches,
            trunk,
            lstm,
        }
    }

    pub fn forward<'t>(
        &self,
        s: &Session<'t, '_>,
        x: &[Var<'t>],
        a: &[Var<'t>],
        r: &[Var<'t>],
    ) -> Result<EncodedSequence<'t>, NumericsError> {
        let mut feats = Vec::with_capacity(x.len());
        for t in 0..x.len() {
            let fx = self.frame.forward(s, x[t])?;
            let parts = [
                self.branches[0].forward(s, fx)?.softplus(),
                self.branches[1].forward(s, a[t])?.softplus(),
                self.branches[2].forward(s, r[t])?.softplus(),
            ];
            feats.push(self.trunk.forward(s, Var::concat(&parts)?)?);
        }
        let st = self.lstm.run(s, &feats)?;
        Ok(EncodedSequence {
            left: st.left,
            right: st.right,
        })
    }
}
