//! The six networks and their wiring.
//!
//! ```text
//!            +--> C  (softmax)                       label classifier
//!  x --> F --+
//!            +--> G(., A^) --+--> GRL --> D  (sigmoid)   adversarial discriminator
//!                            +--> sg --> C' (softmax)    auxiliary classifier
//!                            +--> sg --> D' (sigmoid)    auxiliary discriminator
//! ```
//!
//! `sg` is a stop-gradient unless auxiliary coupling is switched on. `C`
//! reads `F` directly, so inference needs no graph.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, softmax_rows, Gradients, Tape, Tensor, TensorError, Var};
use crate::crg::{self, CrgError, GraphStack};

#[derive(Debug, thiserror::Error)]
pub enum NetworkError {
    #[error("architecture: {0}")]
    Spec(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Graph(#[from] CrgError),
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Role {
    #[serde(rename = "f")]
    Extractor,
    #[serde(rename = "g")]
    Graph,
    #[serde(rename = "c")]
    Classifier,
    #[serde(rename = "c_aux")]
    AuxClassifier,
    #[serde(rename = "d")]
    Discriminator,
    #[serde(rename = "d_aux")]
    AuxDiscriminator,
}

impl Role {
    /// Whether the role trains at the head learning rate.
    pub fn is_head(self) -> bool {
        self != Role::Extractor
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputKind {
    /// Relu on the final layer too.
    Features,
    Logits,
    SigmoidProb,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub layer_widths: Vec<usize>,
    pub output: OutputKind,
}

impl MlpSpec {
    pub fn new(layer_widths: Vec<usize>, output: OutputKind) -> Self {
        MlpSpec {
            layer_widths,
            output,
        }
    }

    fn validate(&self, what: &str) -> Result<(), NetworkError> {
        if self.layer_widths.len() < 2 || self.layer_widths.contains(&0) {
            return Err(NetworkError::Spec(format!(
                "{what}: widths {:?} need at least one positive layer",
                self.layer_widths
            )));
        }
        Ok(())
    }

    fn input(&self) -> usize {
        self.layer_widths[0]
    }

    fn output_width(&self) -> usize {
        *self.layer_widths.last().expect("validated")
    }
}

/// Layer widths for every role.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub extractor: MlpSpec,
    /// Input width followed by each graph layer's output width.
    pub graph_widths: Vec<usize>,
    pub classifier: MlpSpec,
    pub aux_classifier: MlpSpec,
    pub discriminator: MlpSpec,
    pub aux_discriminator: MlpSpec,
}

impl Architecture {
    /// `F = [d, 64, 64]`, two graph layers of width `graph_width`,
    /// `C, C' = [g, N_c]`, `D, D' = [g, 32, 1]`.
    pub fn standard(input_dim: usize, num_classes: usize, graph_layers: usize, graph_width: usize) -> Self {
        let feat = 64;
        let mut graph_widths = vec![feat];
        graph_widths.extend(std::iter::repeat_n(graph_width, graph_layers));
        let g = graph_width;
        Architecture {
            extractor: MlpSpec::new(vec![input_dim, feat, feat], OutputKind::Features),
            graph_widths,
            classifier: MlpSpec::new(vec![feat, num_classes], OutputKind::Logits),
            aux_classifier: MlpSpec::new(vec![g, num_classes], OutputKind::Logits),
            discriminator: MlpSpec::new(vec![g, 32, 1], OutputKind::SigmoidProb),
            aux_discriminator: MlpSpec::new(vec![g, 32, 1], OutputKind::SigmoidProb),
        }
    }

    pub fn validate(&self, num_classes: usize) -> Result<(), NetworkError> {
        self.extractor.validate("extractor")?;
        self.classifier.validate("classifier")?;
        self.aux_classifier.validate("aux classifier")?;
        self.discriminator.validate("discriminator")?;
        self.aux_discriminator.validate("aux discriminator")?;
        if self.graph_widths.len() < 2 || self.graph_widths.contains(&0) {
            return Err(NetworkError::Spec(format!(
                "graph widths {:?} need at least one layer",
                self.graph_widths
            )));
        }
        let feat = self.extractor.output_width();
        let g = *self.graph_widths.last().expect("validated");
        let check = |ok: bool, msg: String| if ok { Ok(()) } else { Err(NetworkError::Spec(msg)) };
        check(self.graph_widths[0] == feat, format!("graph input {} != feature width {feat}", self.graph_widths[0]))?;
        check(self.classifier.input() == feat, "classifier must read extractor features".into())?;
        for (name, spec) in [
            ("aux classifier", &self.aux_classifier),
            ("discriminator", &self.discriminator),
            ("aux discriminator", &self.aux_discriminator),
        ] {
            check(spec.input() == g, format!("{name} input {} != graph width {g}", spec.input()))?;
        }
        for (name, spec) in [("classifier", &self.classifier), ("aux classifier", &self.aux_classifier)] {
            check(
                spec.output_width() == num_classes && spec.output == OutputKind::Logits,
                format!("{name} must emit {num_classes} logits, has {} ({:?})", spec.output_width(), spec.output),
            )?;
        }
        for (name, spec) in [("discriminator", &self.discriminator), ("aux discriminator", &self.aux_discriminator)] {
            check(
                spec.output_width() == 1 && spec.output == OutputKind::SigmoidProb,
                format!("{name} must emit one sigmoid probability"),
            )?;
        }
        Ok(())
    }
}

/// `[fan_in, fan_out]` weights drawn from `U(-sqrt(6/fan_in), sqrt(6/fan_in))`.
pub fn he_uniform(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    Tensor::matrix(fan_in, fan_out, data).expect("positive widths")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    /// `[in, out]`
    pub weight: Tensor,
    /// `[1, out]`
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    pub output: OutputKind,
}

impl Mlp {
    fn init(spec: &MlpSpec, rng: &mut impl Rng) -> Self {
        let layers = spec
            .layer_widths
            .windows(2)
            .map(|w| Dense {
                weight: he_uniform(w[0], w[1], rng),
                bias: Tensor::zeros(&[1, w[1]]),
            })
            .collect();
        Mlp {
            layers,
            output: spec.output,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.weight.cols())
    }

    fn validate(&self, what: &str) -> Result<(), NetworkError> {
        if self.layers.is_empty() {
            return Err(NetworkError::Spec(format!("{what}: no layers")));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if !l.weight.is_matrix() || l.bias.numel() != l.weight.cols() {
                return Err(NetworkError::Spec(format!("{what}: layer {i} has inconsistent shapes")));
            }
        }
        for pair in self.layers.windows(2) {
            if pair[0].weight.cols() != pair[1].weight.rows() {
                return Err(NetworkError::Spec(format!("{what}: layers do not chain")));
            }
        }
        Ok(())
    }

    /// Untracked forward pass; the output activation follows `output`
    /// except that logits are left raw.
    pub fn forward_values(&self, x: &Tensor) -> Result<Tensor, TensorError> {
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = h.matmul(&layer.weight)?;
            let m = h.cols();
            let b = layer.bias.data();
            for (k, v) in h.data_mut().iter_mut().enumerate() {
                *v += b[k % m];
            }
            let act = if i < last { Some(OutputKind::Features) } else { Some(self.output) };
            match act {
                Some(OutputKind::Features) => h.data_mut().iter_mut().for_each(|v| *v = v.max(0.0)),
                Some(OutputKind::SigmoidProb) => h.data_mut().iter_mut().for_each(|v| *v = sigmoid(*v)),
                _ => {}
            }
        }
        Ok(h)
    }
}

/// All trainable parameters, grouped by role.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    #[serde(rename = "f")]
    pub extractor: Mlp,
    #[serde(rename = "g")]
    pub graph: GraphStack,
    #[serde(rename = "c")]
    pub classifier: Mlp,
    #[serde(rename = "c_aux")]
    pub aux_classifier: Mlp,
    #[serde(rename = "d")]
    pub discriminator: Mlp,
    #[serde(rename = "d_aux")]
    pub aux_discriminator: Mlp,
}

/// He-uniform weights and zero biases, deterministic in `seed`.
pub fn init_params(arch: &Architecture, num_classes: usize, seed: u64) -> Result<ParamSet, NetworkError> {
    arch.validate(num_classes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(ParamSet {
        extractor: Mlp::init(&arch.extractor, &mut rng),
        graph: GraphStack::init(&arch.graph_widths, &mut rng)?,
        classifier: Mlp::init(&arch.classifier, &mut rng),
        aux_classifier: Mlp::init(&arch.aux_classifier, &mut rng),
        discriminator: Mlp::init(&arch.discriminator, &mut rng),
        aux_discriminator: Mlp::init(&arch.aux_discriminator, &mut rng),
    })
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    params: ParamSet,
}

const CHECKPOINT_FORMAT: &str = "apda-checkpoint";

impl ParamSet {
    pub fn input_dim(&self) -> usize {
        self.extractor.input_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.output_dim()
    }

    /// Checks that the pieces fit together, as after loading a checkpoint.
    pub fn validate(&self) -> Result<(), NetworkError> {
        self.extractor.validate("f")?;
        self.graph.validate()?;
        self.classifier.validate("c")?;
        self.aux_classifier.validate("c_aux")?;
        self.discriminator.validate("d")?;
        self.aux_discriminator.validate("d_aux")?;
        let feat = self.extractor.output_dim();
        let g = self.graph.output_dim();
        let n_c = self.num_classes();
        let ok = self.graph.input_dim() == feat
            && self.classifier.input_dim() == feat
            && self.aux_classifier.input_dim() == g
            && self.discriminator.input_dim() == g
            && self.aux_discriminator.input_dim() == g
            && self.aux_classifier.output_dim() == n_c
            && self.discriminator.output_dim() == 1
            && self.aux_discriminator.output_dim() == 1;
        if !ok {
            return Err(NetworkError::Spec("parameter shapes do not chain".into()));
        }
        if self.tensors().iter().any(|(_, t)| !t.is_finite()) {
            return Err(NetworkError::Spec("non-finite parameter".into()));
        }
        Ok(())
    }

    /// Every parameter tensor in a fixed order.
    pub fn tensors(&self) -> Vec<(Role, &Tensor)> {
        let mut out = Vec::new();
        fn mlp<'a>(out: &mut Vec<(Role, &'a Tensor)>, role: Role, m: &'a Mlp) {
            for l in &m.layers {
                out.push((role, &l.weight));
                out.push((role, &l.bias));
            }
        }
        mlp(&mut out, Role::Extractor, &self.extractor);
        for w in &self.graph.weights {
            out.push((Role::Graph, w));
        }
        mlp(&mut out, Role::Classifier, &self.classifier);
        mlp(&mut out, Role::AuxClassifier, &self.aux_classifier);
        mlp(&mut out, Role::Discriminator, &self.discriminator);
        mlp(&mut out, Role::AuxDiscriminator, &self.aux_discriminator);
        out
    }

    /// Mutable view in the same order as [`ParamSet::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<(Role, &mut Tensor)> {
        let mut out = Vec::new();
        fn mlp<'a>(out: &mut Vec<(Role, &'a mut Tensor)>, role: Role, m: &'a mut Mlp) {
            for l in &mut m.layers {
                out.push((role, &mut l.weight));
                out.push((role, &mut l.bias));
            }
        }
        mlp(&mut out, Role::Extractor, &mut self.extractor);
        for w in &mut self.graph.weights {
            out.push((Role::Graph, w));
        }
        mlp(&mut out, Role::Classifier, &mut self.classifier);
        mlp(&mut out, Role::AuxClassifier, &mut self.aux_classifier);
        mlp(&mut out, Role::Discriminator, &mut self.discriminator);
        mlp(&mut out, Role::AuxDiscriminator, &mut self.aux_discriminator);
        out
    }

    pub fn register(&self, tape: &mut Tape) -> ParamVars {
        let mlp = |tape: &mut Tape, m: &Mlp| MlpVars {
            layers: m
                .layers
                .iter()
                .map(|l| (tape.leaf(l.weight.clone()), tape.leaf(l.bias.clone())))
                .collect(),
            output: m.output,
        };
        ParamVars {
            extractor: mlp(tape, &self.extractor),
            graph: self.graph.weights.iter().map(|w| tape.leaf(w.clone())).collect(),
            classifier: mlp(tape, &self.classifier),
            aux_classifier: mlp(tape, &self.aux_classifier),
            discriminator: mlp(tape, &self.discriminator),
            aux_discriminator: mlp(tape, &self.aux_discriminator),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: 1,
            params: self.clone(),
        })
        .expect("parameters serialize")
    }

    pub fn from_json(s: &str) -> Result<Self, NetworkError> {
        let err = |message: String| NetworkError::Checkpoint {
            path: "<json>".into(),
            message,
        };
        let ck: Checkpoint = serde_json::from_str(s).map_err(|e| err(e.to_string()))?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != 1 {
            return Err(err(format!("unsupported format {} v{}", ck.format, ck.version)));
        }
        ck.params.validate()?;
        Ok(ck.params)
    }

    pub fn save(&self, path: &Path) -> Result<(), NetworkError> {
        std::fs::write(path, self.to_json()).map_err(|e| NetworkError::Checkpoint {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, NetworkError> {
        let s = std::fs::read_to_string(path).map_err(|e| NetworkError::Checkpoint {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        ParamSet::from_json(&s).map_err(|e| match e {
            NetworkError::Checkpoint { message, .. } => NetworkError::Checkpoint {
                path: path.display().to_string(),
                message,
            },
            other => other,
        })
    }
}

#[derive(Debug, Clone)]
pub struct MlpVars {
    layers: Vec<(Var, Var)>,
    output: OutputKind,
}

impl MlpVars {
    /// Forward pass on the tape; logits stay raw.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var, TensorError> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let hw = tape.matmul(h, w)?;
            h = tape.add_bias(hw, b)?;
            let act = if i < last { OutputKind::Features } else { self.output };
            h = match act {
                OutputKind::Features => tape.relu(h),
                OutputKind::SigmoidProb => tape.sigmoid(h),
                OutputKind::Logits => h,
            };
        }
        Ok(h)
    }

    fn vars(&self) -> impl Iterator<Item = Var> + '_ {
        self.layers.iter().flat_map(|&(w, b)| [w, b])
    }
}

/// Parameters registered on a tape, mirroring [`ParamSet`].
#[derive(Debug, Clone)]
pub struct ParamVars {
    pub extractor: MlpVars,
    pub graph: Vec<Var>,
    pub classifier: MlpVars,
    pub aux_classifier: MlpVars,
    pub discriminator: MlpVars,
    pub aux_discriminator: MlpVars,
}

impl ParamVars {
    /// Variables in [`ParamSet::tensors`] order.
    pub fn vars(&self) -> Vec<Var> {
        let mut out: Vec<Var> = self.extractor.vars().collect();
        out.extend(&self.graph);
        out.extend(self.classifier.vars());
        out.extend(self.aux_classifier.vars());
        out.extend(self.discriminator.vars());
        out.extend(self.aux_discriminator.vars());
        out
    }

    /// Gradients in [`ParamSet::tensors`] order.
    pub fn gradients(&self, grads: &Gradients) -> Vec<Tensor> {
        self.vars().into_iter().map(|v| grads.wrt(v)).collect()
    }
}

/// Options for [`forward_main`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForwardOptions {
    pub grl_lambda: f64,
    /// Let auxiliary-head gradients reach `F` and `G`.
    pub couple_aux: bool,
}

/// Outputs of the extractor and label classifier.
#[derive(Debug, Clone, Copy)]
pub struct ClassifierOutputs {
    pub feat_f: Var,
    pub probs_c: Var,
}

/// Outputs of the graph module and the three heads that read it.
#[derive(Debug, Clone, Copy)]
pub struct GraphOutputs {
    pub feat_g: Var,
    pub prob_d: Var,
    pub probs_c_aux: Var,
    pub prob_d_aux: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct MainOutputs {
    pub feat_f: Var,
    pub feat_g: Var,
    pub probs_c: Var,
    pub prob_d: Var,
    pub probs_c_aux: Var,
    pub prob_d_aux: Var,
}

/// `F` then `C` with a row softmax.
pub fn forward_classifier(tape: &mut Tape, vars: &ParamVars, x: Var) -> Result<ClassifierOutputs, NetworkError> {
    let feat_f = vars.extractor.forward(tape, x)?;
    let logits = vars.classifier.forward(tape, feat_f)?;
    let probs_c = tape.softmax_rows(logits)?;
    Ok(ClassifierOutputs { feat_f, probs_c })
}

/// `G` over `feat_f` with adjacency `a_hat`, then `D` (through gradient
/// reversal), `C'` and `D'`.
pub fn forward_graph_heads(
    tape: &mut Tape,
    vars: &ParamVars,
    feat_f: Var,
    a_hat: &Tensor,
    opts: ForwardOptions,
) -> Result<GraphOutputs, NetworkError> {
    let feat_g = crg::propagate(tape, feat_f, a_hat, &vars.graph)?;
    let reversed = tape.grad_reverse(feat_g, opts.grl_lambda)?;
    let prob_d = vars.discriminator.forward(tape, reversed)?;
    let aux_in = if opts.couple_aux { feat_g } else { tape.stop_gradient(feat_g) };
    let aux_logits = vars.aux_classifier.forward(tape, aux_in)?;
    let probs_c_aux = tape.softmax_rows(aux_logits)?;
    let prob_d_aux = vars.aux_discriminator.forward(tape, aux_in)?;
    Ok(GraphOutputs {
        feat_g,
        prob_d,
        probs_c_aux,
        prob_d_aux,
    })
}

pub fn forward_main(
    tape: &mut Tape,
    vars: &ParamVars,
    x: Var,
    a_hat: &Tensor,
    opts: ForwardOptions,
) -> Result<MainOutputs, NetworkError> {
    let rows = tape.value(x).rows();
    if a_hat.rows() != rows {
        return Err(NetworkError::Spec(format!(
            "adjacency has {} nodes for a batch of {rows}",
            a_hat.rows()
        )));
    }
    let c = forward_classifier(tape, vars, x)?;
    let g = forward_graph_heads(tape, vars, c.feat_f, a_hat, opts)?;
    Ok(MainOutputs {
        feat_f: c.feat_f,
        feat_g: g.feat_g,
        probs_c: c.probs_c,
        prob_d: g.prob_d,
        probs_c_aux: g.probs_c_aux,
        prob_d_aux: g.prob_d_aux,
    })
}

/// `softmax(C(F(x)))` without graph or discriminators; works for any row count.
pub fn forward_inference(params: &ParamSet, x: &Tensor) -> Result<Tensor, NetworkError> {
    if x.cols() != params.input_dim() {
        return Err(NetworkError::Spec(format!(
            "input has {} features, network expects {}",
            x.cols(),
            params.input_dim()
        )));
    }
    let feat = params.extractor.forward_values(x)?;
    let logits = params.classifier.forward_values(&feat)?;
    Ok(softmax_rows(&logits))
}
