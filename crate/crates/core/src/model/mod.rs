//! A desk-scale transducer with hand-written backpropagation.
//!
//! The encoder and predictor are single-layer tanh recurrences. The joiner
//! sums their outputs, applies a ReLU and an affine map onto `V̄`.

use ndarray::{
    s, Array1, Array2, Array3, ArrayView1, ArrayView2, ArrayViewD, ArrayViewMutD, Axis, Zip,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::TransducerScorer;
use crate::error::{Error, Result};
use crate::hat::{internal_lm_score, InternalLmScore};
use crate::lattice::{JointLattice, LabelSequence, Vocab};

pub mod checkpoint;
pub mod optim;
pub mod synth;
pub mod train;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub input: usize,
    pub encoder_hidden: usize,
    pub predictor_hidden: usize,
    pub embedding: usize,
    pub vocab_size: usize,
}

impl ModelDims {
    /// The default toy architecture for a synthetic task: 32-wide recurrent
    /// layers and 8-dimensional label embeddings.
    pub fn for_synth(vocab_size: usize) -> Self {
        Self {
            input: synth::feature_dim(vocab_size),
            encoder_hidden: 32,
            predictor_hidden: 32,
            embedding: 8,
            vocab_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder_hidden != self.predictor_hidden {
            return Err(Error::Config(format!(
                "encoder ({}) and predictor ({}) outputs must have the same width",
                self.encoder_hidden, self.predictor_hidden
            )));
        }
        if self.input == 0 || self.encoder_hidden == 0 || self.embedding == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        Vocab::new(self.vocab_size)?;
        Ok(())
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::new(self.vocab_size).expect("validated vocabulary")
    }

    pub fn hidden(&self) -> usize {
        self.encoder_hidden
    }
}

/// `T` frames of `d_in`-dimensional features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Array2<f64>", into = "Array2<f64>")]
pub struct FeatureSequence(Array2<f64>);

impl FeatureSequence {
    pub fn new(frames: Array2<f64>) -> Result<Self> {
        if frames.nrows() == 0 {
            return Err(Error::EmptyInput);
        }
        if frames.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidRange("features must be finite".into()));
        }
        Ok(Self(frames))
    }

    pub fn frames(&self) -> usize {
        self.0.nrows()
    }

    pub fn dim(&self) -> usize {
        self.0.ncols()
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.0.view()
    }
}

impl TryFrom<Array2<f64>> for FeatureSequence {
    type Error = Error;

    fn try_from(a: Array2<f64>) -> Result<Self> {
        Self::new(a)
    }
}

impl From<FeatureSequence> for Array2<f64> {
    fn from(f: FeatureSequence) -> Self {
        f.0
    }
}

/// Parameters of the toy model. The same type holds gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModelParams {
    dims: ModelDims,
    pub enc_w_input: Array2<f64>,
    pub enc_w_hidden: Array2<f64>,
    pub enc_bias: Array1<f64>,
    /// One row per label `1..=|V|`; row `k - 1` embeds label `k`.
    pub embedding: Array2<f64>,
    pub pred_w_input: Array2<f64>,
    pub pred_w_hidden: Array2<f64>,
    pub pred_bias: Array1<f64>,
    pub join_weight: Array2<f64>,
    pub join_bias: Array1<f64>,
}

pub const TENSOR_NAMES: [&str; 9] = [
    "encoder.w_input",
    "encoder.w_hidden",
    "encoder.bias",
    "predictor.embedding",
    "predictor.w_input",
    "predictor.w_hidden",
    "predictor.bias",
    "joiner.weight",
    "joiner.bias",
];

impl ToyModelParams {
    pub fn zeros(dims: ModelDims) -> Result<Self> {
        dims.validate()?;
        let h = dims.hidden();
        let k = dims.vocab_size + 1;
        Ok(Self {
            dims,
            enc_w_input: Array2::zeros((h, dims.input)),
            enc_w_hidden: Array2::zeros((h, h)),
            enc_bias: Array1::zeros(h),
            embedding: Array2::zeros((dims.vocab_size, dims.embedding)),
            pred_w_input: Array2::zeros((h, dims.embedding)),
            pred_w_hidden: Array2::zeros((h, h)),
            pred_bias: Array1::zeros(h),
            join_weight: Array2::zeros((k, h)),
            join_bias: Array1::zeros(k),
        })
    }

    /// Uniform `±1/√fan_in` weights, unit-scale embeddings, zero biases.
    pub fn init(dims: ModelDims, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(dims)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fill = |a: &mut Array2<f64>, fan_in: usize| {
            let r = 1.0 / (fan_in as f64).sqrt();
            a.mapv_inplace(|_| rng.random_range(-r..r));
        };
        fill(&mut p.enc_w_input, dims.input);
        fill(&mut p.enc_w_hidden, dims.hidden());
        fill(&mut p.embedding, 1);
        fill(&mut p.pred_w_input, dims.embedding);
        fill(&mut p.pred_w_hidden, dims.hidden());
        fill(&mut p.join_weight, dims.hidden());
        Ok(p)
    }

    pub fn dims(&self) -> ModelDims {
        self.dims
    }

    pub fn vocab(&self) -> Vocab {
        self.dims.vocab()
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.dims).expect("dims already validated")
    }

    /// Named views in [`TENSOR_NAMES`] order.
    pub fn tensors(&self) -> Vec<(&'static str, ArrayViewD<'_, f64>)> {
        let views = [
            self.enc_w_input.view().into_dyn(),
            self.enc_w_hidden.view().into_dyn(),
            self.enc_bias.view().into_dyn(),
            self.embedding.view().into_dyn(),
            self.pred_w_input.view().into_dyn(),
            self.pred_w_hidden.view().into_dyn(),
            self.pred_bias.view().into_dyn(),
            self.join_weight.view().into_dyn(),
            self.join_bias.view().into_dyn(),
        ];
        TENSOR_NAMES.into_iter().zip(views).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, ArrayViewMutD<'_, f64>)> {
        let views = [
            self.enc_w_input.view_mut().into_dyn(),
            self.enc_w_hidden.view_mut().into_dyn(),
            self.enc_bias.view_mut().into_dyn(),
            self.embedding.view_mut().into_dyn(),
            self.pred_w_input.view_mut().into_dyn(),
            self.pred_w_hidden.view_mut().into_dyn(),
            self.pred_bias.view_mut().into_dyn(),
            self.join_weight.view_mut().into_dyn(),
            self.join_bias.view_mut().into_dyn(),
        ];
        TENSOR_NAMES.into_iter().zip(views).collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// `self += scale · other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &Self, scale: f64) {
        for ((_, mut a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.scaled_add(scale, &b);
        }
    }

    /// All entries in [`TENSOR_NAMES`] order, each tensor row-major.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors()
            .iter()
            .flat_map(|(_, t)| t.iter().copied())
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    fn check_features(&self, x: &FeatureSequence) -> Result<()> {
        if x.dim() != self.dims.input {
            return Err(Error::Config(format!(
                "features have dimension {} but the model expects {}",
                x.dim(),
                self.dims.input
            )));
        }
        Ok(())
    }

    /// Encoder outputs `f_t`, one row per frame.
    pub fn encode(&self, x: &FeatureSequence) -> Result<Array2<f64>> {
        self.check_features(x)?;
        let h = self.dims.hidden();
        let mut out = Array2::zeros((x.frames(), h));
        let mut prev = Array1::zeros(h);
        for (t, row) in x.view().outer_iter().enumerate() {
            let next = (self.enc_w_input.dot(&row) + self.enc_w_hidden.dot(&prev) + &self.enc_bias)
                .mapv(f64::tanh);
            out.row_mut(t).assign(&next);
            prev = next;
        }
        Ok(out)
    }

    /// The predictor state before any label.
    pub fn initial_prediction(&self) -> Array1<f64> {
        self.pred_bias.mapv(f64::tanh)
    }

    /// Predictor state after consuming `label`.
    pub fn predict_step(&self, state: &Array1<f64>, label: usize) -> Array1<f64> {
        let e = self.embedding.row(label - 1);
        (self.pred_w_input.dot(&e) + self.pred_w_hidden.dot(state) + &self.pred_bias)
            .mapv(f64::tanh)
    }

    /// Predictor outputs `g_0..g_U`.
    pub fn predict(&self, labels: &LabelSequence) -> Result<Array2<f64>> {
        let vocab = self.vocab();
        for &k in labels.tokens() {
            vocab.check_label(k)?;
        }
        let mut out = Array2::zeros((labels.len() + 1, self.dims.hidden()));
        let mut state = self.initial_prediction();
        out.row_mut(0).assign(&state);
        for (u, &k) in labels.tokens().iter().enumerate() {
            state = self.predict_step(&state, k);
            out.row_mut(u + 1).assign(&state);
        }
        Ok(out)
    }

    /// Joint logits for one `(f, g)` pair.
    pub fn join(&self, f: ArrayView1<'_, f64>, g: ArrayView1<'_, f64>) -> Vec<f64> {
        let r = Zip::from(&f).and(&g).map_collect(|&a, &b| (a + b).max(0.0));
        (self.join_weight.dot(&r) + &self.join_bias).to_vec()
    }

    /// The joint with the acoustic contribution removed, used for the
    /// internal LM.
    pub fn ilm_logits(&self, g: ArrayView1<'_, f64>) -> Vec<f64> {
        let r = g.mapv(|v| v.max(0.0));
        (self.join_weight.dot(&r) + &self.join_bias).to_vec()
    }

    pub fn internal_lm(&self, labels: &LabelSequence) -> Result<InternalLmScore> {
        let g = self.predict(labels)?;
        let logits: Vec<Vec<f64>> = g.outer_iter().map(|row| self.ilm_logits(row)).collect();
        internal_lm_score(&logits, labels, &self.vocab())
    }

    fn joiner_hidden(f: &Array2<f64>, g: &Array2<f64>) -> Array2<f64> {
        let (t_len, u_len, h) = (f.nrows(), g.nrows(), f.ncols());
        let mut r = Array2::zeros((t_len * u_len, h));
        for t in 0..t_len {
            for u in 0..u_len {
                Zip::from(r.row_mut(t * u_len + u))
                    .and(f.row(t))
                    .and(g.row(u))
                    .for_each(|r, &a, &b| *r = (a + b).max(0.0));
            }
        }
        r
    }

    pub fn lattice_from_parts(&self, f: &Array2<f64>, g: &Array2<f64>) -> JointLattice {
        let r = Self::joiner_hidden(f, g);
        let z = r.dot(&self.join_weight.t()) + &self.join_bias;
        let k = z.ncols();
        let z = z
            .into_shape_with_order((f.nrows(), g.nrows(), k))
            .expect("row-major joiner output");
        JointLattice::new(z)
    }

    pub fn forward(&self, x: &FeatureSequence, labels: &LabelSequence) -> Result<JointLattice> {
        let f = self.encode(x)?;
        let g = self.predict(labels)?;
        Ok(self.lattice_from_parts(&f, &g))
    }

    /// Gradients of a scalar loss given `∂L/∂z` for the lattice of `labels`.
    pub fn backward(
        &self,
        x: &FeatureSequence,
        labels: &LabelSequence,
        dz: &Array3<f64>,
    ) -> Result<Self> {
        self.backward_many(x, &[(labels, dz)])
    }

    /// Like [`backward`](Self::backward) for several label sequences over the
    /// same features, summing their contributions.
    pub fn backward_many(
        &self,
        x: &FeatureSequence,
        items: &[(&LabelSequence, &Array3<f64>)],
    ) -> Result<Self> {
        let f = self.encode(x)?;
        let mut grad = self.zeros_like();
        let mut df = Array2::zeros(f.raw_dim());
        for &(labels, dz) in items {
            let g = self.predict(labels)?;
            let expect = (f.nrows(), g.nrows(), self.dims.vocab_size + 1);
            if dz.dim() != expect {
                return Err(Error::Mismatch(format!(
                    "gradient has shape {:?} but the lattice is {:?}",
                    dz.dim(),
                    expect
                )));
            }
            let dg = self.joiner_backward(&f, &g, dz, &mut grad, &mut df);
            self.predictor_backward(labels, &g, dg, &mut grad);
        }
        self.encoder_backward(x, &f, df, &mut grad);
        Ok(grad)
    }

    /// Accumulates joiner gradients and `∂L/∂f` into `df`; returns `∂L/∂g`.
    fn joiner_backward(
        &self,
        f: &Array2<f64>,
        g: &Array2<f64>,
        dz: &Array3<f64>,
        grad: &mut Self,
        df: &mut Array2<f64>,
    ) -> Array2<f64> {
        let (t_len, u_len, k) = dz.dim();
        let r = Self::joiner_hidden(f, g);
        let dz2 = dz
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((t_len * u_len, k))
            .expect("row-major gradient");
        grad.join_weight += &dz2.t().dot(&r);
        grad.join_bias += &dz2.sum_axis(Axis(0));
        let mut da = dz2.dot(&self.join_weight);
        Zip::from(&mut da).and(&r).for_each(|d, &r| {
            if r <= 0.0 {
                *d = 0.0;
            }
        });
        let da = da
            .into_shape_with_order((t_len, u_len, self.dims.hidden()))
            .expect("row-major");
        *df += &da.sum_axis(Axis(1));
        da.sum_axis(Axis(0))
    }

    fn encoder_backward(
        &self,
        x: &FeatureSequence,
        f: &Array2<f64>,
        df: Array2<f64>,
        grad: &mut Self,
    ) {
        let h = self.dims.hidden();
        let mut carry = Array1::zeros(h);
        for t in (0..f.nrows()).rev() {
            let dh = &df.row(t) + &carry;
            let dpre = Zip::from(&dh)
                .and(f.row(t))
                .map_collect(|&d, &y| d * (1.0 - y * y));
            outer_add(&mut grad.enc_w_input, &dpre, x.view().row(t));
            if t > 0 {
                outer_add(&mut grad.enc_w_hidden, &dpre, f.row(t - 1));
            }
            grad.enc_bias += &dpre;
            carry = self.enc_w_hidden.t().dot(&dpre);
        }
    }

    fn predictor_backward(
        &self,
        labels: &LabelSequence,
        g: &Array2<f64>,
        dg: Array2<f64>,
        grad: &mut Self,
    ) {
        let h = self.dims.hidden();
        let tokens = labels.tokens();
        let mut carry = Array1::zeros(h);
        for u in (1..g.nrows()).rev() {
            let ds = &dg.row(u) + &carry;
            let dpre = Zip::from(&ds)
                .and(g.row(u))
                .map_collect(|&d, &y| d * (1.0 - y * y));
            let k = tokens[u - 1];
            outer_add(&mut grad.pred_w_input, &dpre, self.embedding.row(k - 1));
            outer_add(&mut grad.pred_w_hidden, &dpre, g.row(u - 1));
            grad.pred_bias += &dpre;
            let de = self.pred_w_input.t().dot(&dpre);
            let mut row = grad.embedding.row_mut(k - 1);
            row += &de;
            carry = self.pred_w_hidden.t().dot(&dpre);
        }
        let ds = &dg.row(0) + &carry;
        let dpre = Zip::from(&ds)
            .and(g.row(0))
            .map_collect(|&d, &y| d * (1.0 - y * y));
        grad.pred_bias += &dpre;
    }
}

/// Central-difference gradient of `loss` with respect to every parameter.
pub fn numeric_gradient<F>(params: &ToyModelParams, epsilon: f64, mut loss: F) -> ToyModelParams
where
    F: FnMut(&ToyModelParams) -> f64,
{
    let mut probe = params.clone();
    let mut grad = params.zeros_like();
    let sizes: Vec<usize> = params.tensors().iter().map(|(_, t)| t.len()).collect();
    for (i, &n) in sizes.iter().enumerate() {
        for j in 0..n {
            let orig = params.tensors()[i]
                .1
                .iter()
                .nth(j)
                .copied()
                .expect("index in range");
            let set = |p: &mut ToyModelParams, v: f64| {
                *p.tensors_mut()[i]
                    .1
                    .iter_mut()
                    .nth(j)
                    .expect("index in range") = v;
            };
            set(&mut probe, orig + epsilon);
            let plus = loss(&probe);
            set(&mut probe, orig - epsilon);
            let minus = loss(&probe);
            set(&mut probe, orig);
            *grad.tensors_mut()[i]
                .1
                .iter_mut()
                .nth(j)
                .expect("index in range") = (plus - minus) / (2.0 * epsilon);
        }
    }
    grad
}

fn outer_add(target: &mut Array2<f64>, col: &Array1<f64>, row: ArrayView1<'_, f64>) {
    for (i, &c) in col.iter().enumerate() {
        if c != 0.0 {
            target.slice_mut(s![i, ..]).scaled_add(c, &row);
        }
    }
}

/// Decoding view of a model over one utterance's encoder outputs.
pub struct ModelScorer<'a> {
    params: &'a ToyModelParams,
    encoded: Array2<f64>,
}

impl<'a> ModelScorer<'a> {
    pub fn new(params: &'a ToyModelParams, x: &FeatureSequence) -> Result<Self> {
        Ok(Self {
            params,
            encoded: params.encode(x)?,
        })
    }

    pub fn encoded(&self) -> &Array2<f64> {
        &self.encoded
    }
}

impl TransducerScorer for ModelScorer<'_> {
    type State = Array1<f64>;

    fn vocab(&self) -> Vocab {
        self.params.vocab()
    }

    fn frames(&self) -> usize {
        self.encoded.nrows()
    }

    fn initial_state(&self) -> Array1<f64> {
        self.params.initial_prediction()
    }

    fn advance(&self, state: &Array1<f64>, token: usize) -> Array1<f64> {
        self.params.predict_step(state, token)
    }

    fn joint_logits(&self, t: usize, state: &Array1<f64>) -> Vec<f64> {
        self.params.join(self.encoded.row(t), state.view())
    }

    fn ilm_logits(&self, state: &Array1<f64>) -> Vec<f64> {
        self.params.ilm_logits(state.view())
    }
}

#[cfg(test)]
mod tests;
