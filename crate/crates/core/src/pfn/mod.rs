//! The set-transformer surrogate: a variable-length context of (x, y) pairs
//! and a set of query inputs go in, one discretized predictive distribution
//! per query comes out. Context positions attend to each other, queries only
//! to the context, so query outputs are mutually independent and invariant to
//! context order.

mod checkpoint;
mod train;

pub use checkpoint::{load, save, FORMAT_VERSION};
pub use train::{
    build_layout_from_prior, loss_on_batch, marginal_nll, train, train_steps, BatchProvider,
    PlainPriorProvider, TrainItem, TrainReport,
};

use std::sync::Arc;

use ndarray::{Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::priors::UserPriorSpec;
use crate::riemann::{BucketLayout, RiemannDistribution};
use crate::tensor::{NodeId, ParamStore, Tape};

/// Step sizes covered by the default tuning grid.
pub const STEP_SIZE_GRID: [f64; 4] = [1e-3, 3e-4, 1e-4, 5e-5];

/// What kind of side information the style position carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StyleVocab {
    /// No style position at all; checkpoints stay style-free.
    None,
    /// Per-dimension optimum-location beliefs.
    UserPrior,
    /// A head-mode flag distinguishing the plain predictive head from the
    /// mean-distribution and lookahead heads.
    Mode,
}

/// Head modes for models with the [`StyleVocab::Mode`] vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadMode {
    Plain,
    Mean,
    Lookahead,
}

/// Side information for one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub enum StyleInput {
    None,
    UserPrior(UserPriorSpec),
    Mode(HeadMode),
}

/// Model and training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PfnConfig {
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ff_dim: usize,
    /// Feature capacity; inputs are zero-padded and rescaled to this width.
    pub capacity: usize,
    /// Interior buckets of the output distribution (two tail classes are
    /// added on top).
    pub num_buckets: usize,
    pub style: StyleVocab,
    pub step_size: f64,
    pub batch_size: usize,
    pub total_steps: usize,
    /// Fraction of steps spent on linear warmup before cosine annealing.
    pub warmup_frac: f64,
    /// Dataset sizes are drawn uniformly from this range during training.
    pub min_points: usize,
    pub max_points: usize,
    /// Prior output draws used to place the bucket borders.
    pub layout_samples: usize,
    /// Emit a checkpoint every this many steps; zero disables.
    pub checkpoint_every: usize,
}

impl Default for PfnConfig {
    fn default() -> Self {
        Self {
            embed_dim: 128,
            num_layers: 4,
            num_heads: 4,
            ff_dim: 256,
            capacity: 18,
            num_buckets: 100,
            style: StyleVocab::None,
            step_size: 3e-4,
            batch_size: 64,
            total_steps: 8000,
            warmup_frac: 0.02,
            min_points: 1,
            max_points: 60,
            layout_samples: 100_000,
            checkpoint_every: 0,
        }
    }
}

impl PfnConfig {
    pub fn num_classes(&self) -> usize {
        self.num_buckets + 2
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.embed_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "embedding size {} not divisible by {} heads",
                self.embed_dim, self.num_heads
            )));
        }
        if self.capacity == 0 {
            return Err(Error::Config("capacity must be at least 1".into()));
        }
        if self.num_buckets < 2 {
            return Err(Error::Config("need at least 2 buckets".into()));
        }
        if self.min_points == 0 || self.min_points > self.max_points {
            return Err(Error::Config("invalid dataset size range".into()));
        }
        Ok(())
    }

    fn style_dim(&self) -> usize {
        match self.style {
            StyleVocab::None => 0,
            StyleVocab::UserPrior => 3 * self.capacity,
            StyleVocab::Mode => 3,
        }
    }

    fn input_dim(&self) -> usize {
        // Features, the observed output, and a query indicator.
        self.capacity + 2
    }
}

/// A trained (or freshly initialized) surrogate.
#[derive(Debug, Clone)]
pub struct PfnModel {
    config: PfnConfig,
    params: ParamStore,
    layout: Arc<BucketLayout>,
    trained_steps: u64,
}

impl PfnModel {
    /// Fresh model with random weights.
    pub fn new(config: PfnConfig, layout: BucketLayout, seed: u64) -> Result<Self> {
        config.validate()?;
        if layout.num_buckets() != config.num_buckets {
            return Err(Error::Config(format!(
                "layout has {} buckets, config wants {}",
                layout.num_buckets(),
                config.num_buckets
            )));
        }
        let mut params = ParamStore::new();
        register_params(&config, &mut params);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        params.init(1.0, &mut rng);
        params.quantize_to_f32();
        Ok(Self {
            config,
            params,
            layout: Arc::new(layout),
            trained_steps: 0,
        })
    }

    pub(crate) fn from_parts(
        config: PfnConfig,
        params: ParamStore,
        layout: BucketLayout,
        trained_steps: u64,
    ) -> Self {
        Self {
            config,
            params,
            layout: Arc::new(layout),
            trained_steps,
        }
    }

    pub fn config(&self) -> &PfnConfig {
        &self.config
    }

    pub fn layout(&self) -> &BucketLayout {
        &self.layout
    }

    pub fn layout_arc(&self) -> Arc<BucketLayout> {
        Arc::clone(&self.layout)
    }

    pub fn trained_steps(&self) -> u64 {
        self.trained_steps
    }

    pub(crate) fn params(&self) -> &ParamStore {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub(crate) fn add_trained_steps(&mut self, steps: u64) {
        self.trained_steps += steps;
    }

    /// Zero-pads raw unit-cube features to capacity and rescales them.
    pub fn preprocess(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        crate::priors::pad_and_scale(&x.to_owned(), self.config.capacity)
    }

    /// One predictive distribution per query row. Both `train_x` and
    /// `queries` must already be preprocessed to capacity width.
    pub fn forward(
        &self,
        train_x: ArrayView2<'_, f64>,
        train_y: &[f64],
        queries: ArrayView2<'_, f64>,
        style: &StyleInput,
    ) -> Result<Vec<RiemannDistribution>> {
        let mut tape = Tape::new(&self.params);
        let pass = self.build_forward(&mut tape, train_x, train_y, queries, style)?;
        let logits = tape.value(pass.logits);
        let mut out = Vec::with_capacity(logits.nrows());
        for row in logits.rows() {
            out.push(self.logits_to_distribution(row.as_slice().unwrap())?);
        }
        Ok(out)
    }

    fn logits_to_distribution(&self, logits: &[f64]) -> Result<RiemannDistribution> {
        let max = logits.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v));
        let mut probs: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
        let sum: f64 = probs.iter().sum();
        for p in &mut probs {
            *p /= sum;
        }
        RiemannDistribution::new(Arc::clone(&self.layout), probs)
    }

    /// Value of a scalar functional of one query's predictive distribution
    /// together with its gradient with respect to the preprocessed query
    /// features.
    pub fn grad_query(
        &self,
        train_x: ArrayView2<'_, f64>,
        train_y: &[f64],
        query: &[f64],
        style: &StyleInput,
        functional: &dyn DistFunctional,
    ) -> Result<(f64, Vec<f64>)> {
        let q = Array2::from_shape_vec((1, query.len()), query.to_vec())
            .map_err(|e| Error::Domain(e.to_string()))?;
        let mut tape = Tape::new(&self.params);
        let pass = self.build_forward(&mut tape, train_x, train_y, q.view(), style)?;

        let logits_view = tape.value(pass.logits);
        let logits: Vec<f64> = logits_view.row(0).to_vec();
        let dist = self.logits_to_distribution(&logits)?;
        let value = functional.value(&dist);
        let g = functional.grad_probs(&dist);
        let probs = dist.probs();
        let dot: f64 = g.iter().zip(probs.iter()).map(|(gi, pi)| gi * pi).sum();
        let seed_row: Vec<f64> = probs
            .iter()
            .zip(g.iter())
            .map(|(p, gi)| p * (gi - dot))
            .collect();
        let seed = Array2::from_shape_vec((1, seed_row.len()), seed_row)
            .map_err(|e| Error::Domain(e.to_string()))?;

        let mut param_grads = vec![0.0; self.params.len()];
        let node_grads = tape.backward(pass.logits, seed, &mut param_grads);
        let input_grad = node_grads[pass.input.index()]
            .as_ref()
            .expect("input gradient");
        let n_train = train_y.len();
        let grad = input_grad
            .row(n_train)
            .iter()
            .take(self.config.capacity)
            .copied()
            .collect();
        Ok((value, grad))
    }

    fn style_vector(&self, style: &StyleInput) -> Result<Option<Vec<f64>>> {
        match (self.config.style, style) {
            (StyleVocab::None, StyleInput::None) => Ok(None),
            (StyleVocab::UserPrior, StyleInput::UserPrior(spec)) => {
                spec.validate()?;
                if spec.dims.len() > self.config.capacity {
                    return Err(Error::Capacity {
                        got: spec.dims.len(),
                        capacity: self.config.capacity,
                    });
                }
                let mut v = Vec::with_capacity(3 * self.config.capacity);
                for j in 0..self.config.capacity {
                    match spec.dims.get(j).copied().flatten() {
                        Some(dp) => v.extend([dp.lo, dp.hi, dp.rho]),
                        None => v.extend([0.0, 1.0, 0.0]),
                    }
                }
                Ok(Some(v))
            }
            (StyleVocab::Mode, StyleInput::Mode(mode)) => {
                let mut v = vec![0.0; 3];
                v[match mode {
                    HeadMode::Plain => 0,
                    HeadMode::Mean => 1,
                    HeadMode::Lookahead => 2,
                }] = 1.0;
                Ok(Some(v))
            }
            (vocab, _) => Err(Error::Config(format!(
                "style input does not match the model's {vocab:?} vocabulary"
            ))),
        }
    }

    /// Builds the full computation graph; exposed within the crate so the
    /// trainer can seed gradients at the logits.
    pub(crate) fn build_forward<'t>(
        &self,
        tape: &mut Tape<'t>,
        train_x: ArrayView2<'_, f64>,
        train_y: &[f64],
        queries: ArrayView2<'_, f64>,
        style: &StyleInput,
    ) -> Result<ForwardPass> {
        let cfg = &self.config;
        let k = cfg.capacity;
        if train_x.ncols() != k || queries.ncols() != k {
            return Err(Error::Capacity {
                got: train_x.ncols().max(queries.ncols()),
                capacity: k,
            });
        }
        if train_x.nrows() != train_y.len() || train_y.is_empty() {
            return Err(Error::Domain("context must be nonempty and aligned".into()));
        }
        let n = train_y.len();
        let q = queries.nrows();

        let mut input = Array2::zeros((n + q, cfg.input_dim()));
        for i in 0..n {
            for j in 0..k {
                input[[i, j]] = train_x[[i, j]];
            }
            input[[i, k]] = train_y[i];
        }
        for i in 0..q {
            for j in 0..k {
                input[[n + i, j]] = queries[[i, j]];
            }
            input[[n + i, k + 1]] = 1.0;
        }

        let input_id = tape.input(input);
        let p = |name: &str| self.params.id(name).expect("registered param");
        let enc_w = tape.param(p("enc.weight"));
        let enc_b = tape.param(p("enc.bias"));
        let mut h = tape.linear(input_id, enc_w, enc_b);

        let style_vec = self.style_vector(style)?;
        let ctx = n + usize::from(style_vec.is_some());
        if let Some(v) = style_vec {
            let style_in = tape.input(
                Array2::from_shape_vec((1, v.len()), v).map_err(|e| Error::Domain(e.to_string()))?,
            );
            let sw = tape.param(p("style.weight"));
            let sb = tape.param(p("style.bias"));
            let style_row = tape.linear(style_in, sw, sb);
            h = tape.concat_rows(&[style_row, h]);
        }

        let head_dim = cfg.embed_dim / cfg.num_heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        for layer in 0..cfg.num_layers {
            let name = |part: &str| format!("layer{layer}.{part}");
            let ln1_g = tape.param(p(&name("ln1.gain")));
            let ln1_b = tape.param(p(&name("ln1.bias")));
            let ln1 = tape.layer_norm(h, ln1_g, ln1_b);

            let ctx_rows = tape.slice_rows(ln1, 0, ctx);
            let wq = tape.param(p(&name("attn.wq")));
            let bq = tape.param(p(&name("attn.bq.bias")));
            let wk = tape.param(p(&name("attn.wk")));
            let bk = tape.param(p(&name("attn.bk.bias")));
            let wv = tape.param(p(&name("attn.wv")));
            let bv = tape.param(p(&name("attn.bv.bias")));
            let q_all = tape.linear(ln1, wq, bq);
            let k_ctx = tape.linear(ctx_rows, wk, bk);
            let v_ctx = tape.linear(ctx_rows, wv, bv);

            let mut head_outs = Vec::with_capacity(cfg.num_heads);
            for head in 0..cfg.num_heads {
                let from = head * head_dim;
                let to = from + head_dim;
                let qh = tape.slice_cols(q_all, from, to);
                let kh = tape.slice_cols(k_ctx, from, to);
                let vh = tape.slice_cols(v_ctx, from, to);
                let scores = tape.matmul_tb(qh, kh);
                let scaled = tape.scale(scores, scale);
                let attn = tape.softmax_rows(scaled);
                head_outs.push(tape.matmul(attn, vh));
            }
            let merged = tape.concat_cols(&head_outs);
            let wo = tape.param(p(&name("attn.wo")));
            let bo = tape.param(p(&name("attn.bo.bias")));
            let attn_out = tape.linear(merged, wo, bo);
            h = tape.add(h, attn_out);

            let ln2_g = tape.param(p(&name("ln2.gain")));
            let ln2_b = tape.param(p(&name("ln2.bias")));
            let ln2 = tape.layer_norm(h, ln2_g, ln2_b);
            let w1 = tape.param(p(&name("ff.w1")));
            let b1 = tape.param(p(&name("ff.b1.bias")));
            let w2 = tape.param(p(&name("ff.w2")));
            let b2 = tape.param(p(&name("ff.b2.bias")));
            let f1 = tape.linear(ln2, w1, b1);
            let f1g = tape.gelu(f1);
            let f2 = tape.linear(f1g, w2, b2);
            h = tape.add(h, f2);
        }

        let fg = tape.param(p("final_ln.gain"));
        let fb = tape.param(p("final_ln.bias"));
        let final_ln = tape.layer_norm(h, fg, fb);
        let query_rows = tape.slice_rows(final_ln, ctx, ctx + q);
        let hw = tape.param(p("head.weight"));
        let hb = tape.param(p("head.bias"));
        let logits = tape.linear(query_rows, hw, hb);

        Ok(ForwardPass {
            logits,
            input: input_id,
        })
    }
}

/// Node handles of one recorded forward pass.
pub(crate) struct ForwardPass {
    pub logits: NodeId,
    pub input: NodeId,
}

fn register_params(cfg: &PfnConfig, params: &mut ParamStore) {
    params.register("enc.weight", cfg.input_dim(), cfg.embed_dim);
    params.register("enc.bias", 1, cfg.embed_dim);
    if cfg.style_dim() > 0 {
        params.register("style.weight", cfg.style_dim(), cfg.embed_dim);
        params.register("style.bias", 1, cfg.embed_dim);
    }
    for layer in 0..cfg.num_layers {
        let name = |part: &str| format!("layer{layer}.{part}");
        params.register(&name("ln1.gain"), 1, cfg.embed_dim);
        params.register(&name("ln1.bias"), 1, cfg.embed_dim);
        params.register(&name("attn.wq"), cfg.embed_dim, cfg.embed_dim);
        params.register(&name("attn.bq.bias"), 1, cfg.embed_dim);
        params.register(&name("attn.wk"), cfg.embed_dim, cfg.embed_dim);
        params.register(&name("attn.bk.bias"), 1, cfg.embed_dim);
        params.register(&name("attn.wv"), cfg.embed_dim, cfg.embed_dim);
        params.register(&name("attn.bv.bias"), 1, cfg.embed_dim);
        params.register(&name("attn.wo"), cfg.embed_dim, cfg.embed_dim);
        params.register(&name("attn.bo.bias"), 1, cfg.embed_dim);
        params.register(&name("ln2.gain"), 1, cfg.embed_dim);
        params.register(&name("ln2.bias"), 1, cfg.embed_dim);
        params.register(&name("ff.w1"), cfg.embed_dim, cfg.ff_dim);
        params.register(&name("ff.b1.bias"), 1, cfg.ff_dim);
        params.register(&name("ff.w2"), cfg.ff_dim, cfg.embed_dim);
        params.register(&name("ff.b2.bias"), 1, cfg.embed_dim);
    }
    params.register("final_ln.gain", 1, cfg.embed_dim);
    params.register("final_ln.bias", 1, cfg.embed_dim);
    params.register("head.weight", cfg.embed_dim, cfg.num_classes());
    params.register("head.bias", 1, cfg.num_classes());
}

/// A differentiable scalar functional of a predictive distribution.
pub trait DistFunctional: Sync {
    fn value(&self, dist: &RiemannDistribution) -> f64;
    /// Gradient of the value with respect to the class masses.
    fn grad_probs(&self, dist: &RiemannDistribution) -> Vec<f64>;
}

/// Constant functional, useful for gradient checks.
pub struct ConstFunctional(pub f64);

impl DistFunctional for ConstFunctional {
    fn value(&self, _dist: &RiemannDistribution) -> f64 {
        self.0
    }

    fn grad_probs(&self, dist: &RiemannDistribution) -> Vec<f64> {
        vec![0.0; dist.probs().len()]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::priors::{BatchConfig, PriorConfig};
    use ndarray::array;
    use rand::Rng;

    fn tiny_config() -> PfnConfig {
        PfnConfig {
            embed_dim: 32,
            num_layers: 2,
            num_heads: 2,
            ff_dim: 64,
            capacity: 2,
            num_buckets: 12,
            style: StyleVocab::None,
            step_size: 1e-3,
            batch_size: 16,
            total_steps: 50,
            warmup_frac: 0.05,
            min_points: 2,
            max_points: 16,
            layout_samples: 4_000,
            checkpoint_every: 0,
        }
    }

    fn tiny_layout(buckets: usize) -> BucketLayout {
        let mut rng = ChaCha8Rng::seed_from_u64(100);
        let draws: Vec<f64> = (0..20_000)
            .map(|_| {
                let u: f64 = rng.gen();
                2.0 * u - 1.0 + 0.3 * rng.gen::<f64>()
            })
            .collect();
        crate::riemann::build_borders(&draws, buckets + 2).unwrap()
    }

    fn tiny_model(seed: u64) -> PfnModel {
        let cfg = tiny_config();
        PfnModel::new(cfg.clone(), tiny_layout(cfg.num_buckets), seed).unwrap()
    }

    fn example_context() -> (Array2<f64>, Vec<f64>) {
        (
            array![[0.1, 0.8], [0.6, 0.3], [0.9, 0.5], [0.35, 0.95]],
            vec![0.4, -0.2, 0.9, 0.1],
        )
    }

    #[test]
    fn untrained_model_emits_normalized_distributions() {
        let model = tiny_model(1);
        let (x, y) = example_context();
        let q = array![[0.5, 0.5], [0.2, 0.7]];
        let dists = model
            .forward(x.view(), &y, q.view(), &StyleInput::None)
            .unwrap();
        assert_eq!(dists.len(), 2);
        for d in dists {
            let total: f64 = d.probs().iter().sum();
            assert!((total - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn context_permutation_leaves_queries_unchanged() {
        let model = tiny_model(2);
        let (x, y) = example_context();
        let q = array![[0.5, 0.5]];
        let base = model
            .forward(x.view(), &y, q.view(), &StyleInput::None)
            .unwrap();

        let perm = [2usize, 0, 3, 1];
        let mut xp = Array2::zeros(x.raw_dim());
        let mut yp = vec![0.0; y.len()];
        for (to, from) in perm.iter().enumerate() {
            xp.row_mut(to).assign(&x.row(*from));
            yp[to] = y[*from];
        }
        let permuted = model
            .forward(xp.view(), &yp, q.view(), &StyleInput::None)
            .unwrap();
        for (a, b) in base[0].probs().iter().zip(permuted[0].probs()) {
            // Exact up to the reordered floating-point reductions inside the
            // attention sums.
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn queries_are_mutually_independent() {
        let model = tiny_model(3);
        let (x, y) = example_context();
        let single = model
            .forward(x.view(), &y, array![[0.5, 0.5]].view(), &StyleInput::None)
            .unwrap();
        let pair = model
            .forward(
                x.view(),
                &y,
                array![[0.5, 0.5], [0.9, 0.1]].view(),
                &StyleInput::None,
            )
            .unwrap();
        assert_eq!(single[0].probs(), pair[0].probs());
    }

    #[test]
    fn capacity_overflow_is_an_error() {
        let model = tiny_model(4);
        let x = array![[0.1, 0.2, 0.3]];
        let err = model
            .forward(x.view(), &[0.5], x.view(), &StyleInput::None)
            .unwrap_err();
        assert!(matches!(err, Error::Capacity { got: 3, capacity: 2 }));
    }

    #[test]
    fn style_vocabulary_mismatch_is_an_error() {
        let model = tiny_model(5);
        let (x, y) = example_context();
        let err = model
            .forward(
                x.view(),
                &y,
                x.view(),
                &StyleInput::Mode(HeadMode::Plain),
            )
            .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn zeroed_model_is_the_equal_mass_marginal() {
        let mut model = tiny_model(6);
        model.params_mut().values_mut().fill(0.0);
        let (x, y) = example_context();
        let dists = model
            .forward(x.view(), &y, array![[0.3, 0.3]].view(), &StyleInput::None)
            .unwrap();
        let classes = model.config().num_classes();
        for p in dists[0].probs() {
            // Uniform class masses; bucket-level cross-entropy of any target
            // is ln(classes).
            assert!((p - 1.0 / classes as f64).abs() < 1e-12);
        }
        assert!(((1.0f64 / classes as f64).ln().abs() - (classes as f64).ln()).abs() < 1e-12);

        // Against arbitrary targets, the zeroed model's full loss equals the
        // marginal predictor's.
        let item = TrainItem {
            features: x.clone(),
            y_context: y.clone(),
            queries: array![[0.3, 0.3], [0.8, 0.2]],
            targets: vec![0.25, -0.4],
            style: StyleInput::None,
        };
        let loss = loss_on_batch(&model, std::slice::from_ref(&item)).unwrap();
        let marginal = marginal_nll(model.layout(), &item.targets);
        assert!((loss - marginal).abs() < 1e-9, "{loss} vs {marginal}");
    }

    #[test]
    fn batch_loss_is_mean_of_pointwise_losses() {
        let model = tiny_model(7);
        let (x, y) = example_context();
        let queries = array![[0.3, 0.3], [0.8, 0.2], [0.55, 0.66]];
        let targets = vec![0.25, -0.4, 0.7];
        let item = TrainItem {
            features: x.clone(),
            y_context: y.clone(),
            queries: queries.clone(),
            targets: targets.clone(),
            style: StyleInput::None,
        };
        let joint = loss_on_batch(&model, std::slice::from_ref(&item)).unwrap();
        let mut separate = 0.0;
        for i in 0..targets.len() {
            let single = TrainItem {
                features: x.clone(),
                y_context: y.clone(),
                queries: queries.slice(ndarray::s![i..i + 1, ..]).to_owned(),
                targets: vec![targets[i]],
                style: StyleInput::None,
            };
            separate += loss_on_batch(&model, std::slice::from_ref(&single)).unwrap();
        }
        assert!((joint - separate / 3.0).abs() < 1e-9);
    }

    #[test]
    fn step_size_grid_default() {
        assert_eq!(STEP_SIZE_GRID, [1e-3, 3e-4, 1e-4, 5e-5]);
    }

    #[test]
    fn short_training_beats_marginal_predictor() {
        let mut cfg = tiny_config();
        cfg.capacity = 1;
        cfg.total_steps = 220;
        let batch = BatchConfig {
            prior: PriorConfig::simple_gp(),
            capacity: 1,
            max_dim: 1,
            min_points: 2,
            max_points: 16,
            group_size: 8,
        };
        let layout =
            build_layout_from_prior(&batch, cfg.num_buckets, cfg.layout_samples, 11).unwrap();
        let provider = PlainPriorProvider::new(batch.clone(), cfg.style);
        let (model, report) = train(&provider, layout, cfg, 11, None).unwrap();

        // Held-out evaluation batch.
        let mut rng = ChaCha8Rng::seed_from_u64(999);
        let items = provider.sample(64, &mut rng).unwrap();
        let loss = loss_on_batch(&model, &items).unwrap();
        let targets: Vec<f64> = items.iter().flat_map(|i| i.targets.clone()).collect();
        let marginal = marginal_nll(model.layout(), &targets);
        assert!(
            loss < marginal,
            "trained loss {loss} not below marginal {marginal}"
        );

        // The loss trend over training is decreasing in moving average.
        let third = report.ce.len() / 3;
        let head: f64 = report.ce[..third].iter().sum::<f64>() / third as f64;
        let tail: f64 = report.ce[report.ce.len() - third..].iter().sum::<f64>() / third as f64;
        assert!(tail < head, "loss trend {head} -> {tail}");
    }

    #[test]
    fn divergent_loss_reports_error() {
        let mut model = tiny_model(8);
        for v in model.params_mut().values_mut().iter_mut() {
            *v = f64::NAN;
        }
        let batch = BatchConfig {
            prior: PriorConfig::simple_gp(),
            capacity: 2,
            max_dim: 2,
            min_points: 2,
            max_points: 8,
            group_size: 8,
        };
        let provider = PlainPriorProvider::new(batch, StyleVocab::None);
        let err = train_steps(&mut model, &provider, 1, 1, None).unwrap_err();
        assert!(matches!(err, Error::Divergence { .. }));
    }

    struct MeanFunctional;

    impl DistFunctional for MeanFunctional {
        fn value(&self, dist: &RiemannDistribution) -> f64 {
            dist.mean()
        }

        fn grad_probs(&self, dist: &RiemannDistribution) -> Vec<f64> {
            dist.class_conditional_mean()
        }
    }

    #[test]
    fn constant_functional_has_zero_gradient() {
        let model = tiny_model(9);
        let (x, y) = example_context();
        let (value, grad) = model
            .grad_query(x.view(), &y, &[0.4, 0.6], &StyleInput::None, &ConstFunctional(2.5))
            .unwrap();
        assert_eq!(value, 2.5);
        assert!(grad.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn query_gradient_matches_finite_differences() {
        let functional = MeanFunctional;
        for seed in 0..20u64 {
            let model = tiny_model(50 + seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.gen_range(2..8);
            let x = Array2::from_shape_fn((n, 2), |_| rng.gen::<f64>());
            let y: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
            let q: Vec<f64> = vec![rng.gen(), rng.gen()];

            let (_, grad) = model
                .grad_query(x.view(), &y, &q, &StyleInput::None, &functional)
                .unwrap();

            let h = 1e-4;
            let mut fd = vec![0.0; 2];
            for j in 0..2 {
                let eval = |v: f64| {
                    let mut qq = q.clone();
                    qq[j] = v;
                    let qm = Array2::from_shape_vec((1, 2), qq).unwrap();
                    let d = model
                        .forward(x.view(), &y, qm.view(), &StyleInput::None)
                        .unwrap();
                    functional.value(&d[0])
                };
                fd[j] = (eval(q[j] + h) - eval(q[j] - h)) / (2.0 * h);
            }
            let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
            let diff: Vec<f64> = grad.iter().zip(fd.iter()).map(|(a, b)| a - b).collect();
            let rel = norm(&diff) / norm(&fd).max(1e-12);
            assert!(rel < 1e-3, "seed {seed}: grad {grad:?} vs fd {fd:?} (rel {rel})");
        }
    }

    #[test]
    fn checkpoint_roundtrip_preserves_forward_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.pfn");
        let model = tiny_model(10);
        save(&model, &path).unwrap();
        let loaded = load(&path).unwrap();
        let (x, y) = example_context();
        let q = array![[0.4, 0.2]];
        let a = model
            .forward(x.view(), &y, q.view(), &StyleInput::None)
            .unwrap();
        let b = loaded
            .forward(x.view(), &y, q.view(), &StyleInput::None)
            .unwrap();
        assert_eq!(a[0].probs(), b[0].probs());
        assert_eq!(model.trained_steps(), loaded.trained_steps());
    }

    #[test]
    fn truncated_checkpoint_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.pfn");
        save(&tiny_model(11), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        let err = load(&path).unwrap_err();
        assert!(matches!(err, Error::CorruptCheckpoint(_)));
    }

    #[test]
    fn version_mismatch_is_reported_explicitly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.pfn");
        save(&tiny_model(12), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[7] = 99;
        std::fs::write(&path, &bytes).unwrap();
        let err = load(&path).unwrap_err();
        assert!(matches!(err, Error::CheckpointVersion { got: 99, .. }));
    }
}
