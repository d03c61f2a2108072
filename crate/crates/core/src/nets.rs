//! Teacher and student networks: specs, initialization and functional
//! application over a [`ParamVars`] so gradients flow to whatever parameters
//! (initial or task-adapted) are passed in.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{conv2d, Graph, Tensor, Var};
use crate::error::{Error, Result};
pub use crate::params::{ParamSet, ParamVars};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Architecture {
    /// Fully connected relu layers.
    Mlp { hidden: Vec<usize> },
    /// Stride-2 `kernel × kernel` conv + relu blocks, then a linear head on the
    /// flattened features.
    Conv { channels: Vec<usize>, kernel: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub arch: Architecture,
    /// Per-example input shape: `[d]` for MLPs, `[C, H, W]` for conv nets.
    pub input_shape: Vec<usize>,
    pub n_classes: usize,
    /// Hidden layer (or conv block) whose activation is returned as the
    /// embedding. Defaults to the last one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding_layer: Option<usize>,
}

/// Output of one forward pass.
#[derive(Clone, Debug)]
pub struct NetOutput {
    pub logits: Var,
    pub embedding: Var,
}

struct ParamShape {
    name: String,
    shape: Vec<usize>,
    fan_in: usize,
    bias: bool,
}

impl NetworkSpec {
    pub fn mlp(input_dim: usize, hidden: &[usize], n_classes: usize) -> Self {
        NetworkSpec {
            arch: Architecture::Mlp {
                hidden: hidden.to_vec(),
            },
            input_shape: vec![input_dim],
            n_classes,
            embedding_layer: None,
        }
    }

    pub fn conv(input_shape: [usize; 3], channels: &[usize], kernel: usize, n_classes: usize) -> Self {
        NetworkSpec {
            arch: Architecture::Conv {
                channels: channels.to_vec(),
                kernel,
            },
            input_shape: input_shape.to_vec(),
            n_classes,
            embedding_layer: None,
        }
    }

    /// Desk-scale teacher, about ten times the default student: 2 hidden
    /// layers of 134 (MLP) or 3 conv blocks of 28.
    pub fn default_teacher(input_shape: &[usize], n_classes: usize) -> Self {
        match input_shape {
            &[c, h, w] => NetworkSpec::conv([c, h, w], &[28; 3], 3, n_classes),
            _ => NetworkSpec::mlp(input_shape.iter().product(), &[134; 2], n_classes),
        }
    }

    /// Desk-scale student: 2 hidden layers of 32 (MLP) or 2 conv blocks of 8.
    pub fn default_student(input_shape: &[usize], n_classes: usize) -> Self {
        match input_shape {
            &[c, h, w] => NetworkSpec::conv([c, h, w], &[8; 2], 3, n_classes),
            _ => NetworkSpec::mlp(input_shape.iter().product(), &[32; 2], n_classes),
        }
    }

    /// Same network with a differently sized classifier head.
    pub fn with_classes(&self, n_classes: usize) -> Self {
        NetworkSpec {
            n_classes,
            ..self.clone()
        }
    }

    fn layer_count(&self) -> usize {
        match &self.arch {
            Architecture::Mlp { hidden } => hidden.len(),
            Architecture::Conv { channels, .. } => channels.len(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes == 0 {
            return Err(Error::invalid("network must have at least one output class"));
        }
        if self.input_shape.contains(&0) || self.input_shape.is_empty() {
            return Err(Error::invalid(format!("invalid input shape {:?}", self.input_shape)));
        }
        match &self.arch {
            Architecture::Mlp { hidden } => {
                if hidden.contains(&0) {
                    return Err(Error::invalid("zero-width hidden layer"));
                }
            }
            Architecture::Conv { channels, kernel } => {
                if channels.is_empty() || channels.contains(&0) {
                    return Err(Error::invalid("conv net needs non-zero channel counts"));
                }
                if self.input_shape.len() != 3 {
                    return Err(Error::invalid("conv net input shape must be [C, H, W]"));
                }
                if *kernel == 0 || *kernel > crate::autodiff::MAX_KERNEL || kernel % 2 == 0 {
                    return Err(Error::invalid(format!("unsupported conv kernel {kernel}")));
                }
            }
        }
        if let Some(e) = self.embedding_layer {
            if e >= self.layer_count() {
                return Err(Error::invalid(format!(
                    "embedding layer {e} out of range for {} layers",
                    self.layer_count()
                )));
            }
        }
        Ok(())
    }

    /// Spatial size after each stride-2 conv block, including the input.
    fn conv_sizes(&self) -> Vec<(usize, usize)> {
        let Architecture::Conv { channels, kernel } = &self.arch else {
            return vec![];
        };
        let pad = kernel / 2;
        let mut sizes = vec![(self.input_shape[1], self.input_shape[2])];
        for _ in channels {
            let (h, w) = *sizes.last().unwrap();
            sizes.push(((h + 2 * pad - kernel) / 2 + 1, (w + 2 * pad - kernel) / 2 + 1));
        }
        sizes
    }

    fn embedding_index(&self) -> Option<usize> {
        let n = self.layer_count();
        if n == 0 {
            None
        } else {
            Some(self.embedding_layer.unwrap_or(n - 1))
        }
    }

    /// Width of the embedding returned by [`apply`].
    pub fn embedding_dim(&self) -> usize {
        match (&self.arch, self.embedding_index()) {
            (Architecture::Mlp { hidden }, Some(i)) => hidden[i],
            (Architecture::Mlp { .. }, None) => self.input_shape.iter().product(),
            (Architecture::Conv { channels, .. }, Some(i)) => {
                let (h, w) = self.conv_sizes()[i + 1];
                channels[i] * h * w
            }
            (Architecture::Conv { .. }, None) => unreachable!("validated conv nets have blocks"),
        }
    }

    fn param_shapes(&self) -> Vec<ParamShape> {
        let mut out = Vec::new();
        let mut push_layer = |prefix: String, wshape: Vec<usize>, fan_in: usize, width: usize| {
            out.push(ParamShape {
                name: format!("{prefix}.weight"),
                shape: wshape,
                fan_in,
                bias: false,
            });
            out.push(ParamShape {
                name: format!("{prefix}.bias"),
                shape: vec![width],
                fan_in,
                bias: true,
            });
        };
        let features = match &self.arch {
            Architecture::Mlp { hidden } => {
                let mut width = self.input_shape.iter().product::<usize>();
                for (i, &h) in hidden.iter().enumerate() {
                    push_layer(format!("layer{i}"), vec![width, h], width, h);
                    width = h;
                }
                width
            }
            Architecture::Conv { channels, kernel } => {
                let mut c_in = self.input_shape[0];
                for (i, &c) in channels.iter().enumerate() {
                    let fan_in = c_in * kernel * kernel;
                    push_layer(format!("conv{i}"), vec![c, c_in, *kernel, *kernel], fan_in, c);
                    c_in = c;
                }
                let (h, w) = *self.conv_sizes().last().unwrap();
                c_in * h * w
            }
        };
        push_layer("head".into(), vec![features, self.n_classes], features, self.n_classes);
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|p| p.shape.iter().product::<usize>())
            .sum()
    }
}

/// Fresh parameters: weights uniform in `±sqrt(6 / fan_in)`, biases zero.
/// Deterministic in `seed`.
pub fn init_params(spec: &NetworkSpec, seed: u64) -> Result<ParamSet> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let entries = spec
        .param_shapes()
        .into_iter()
        .map(|p| {
            let t = if p.bias {
                Tensor::zeros(&p.shape)
            } else {
                let bound = (6.0 / p.fan_in as f64).sqrt();
                Tensor::from_fn(&p.shape, |_| rng.random_range(-bound..bound))
            };
            (p.name, t)
        })
        .collect();
    ParamSet::new(entries)
}

/// Copies every layer but the classifier head, which is zeroed and resized to
/// `spec.n_classes`.
pub fn reset_head(spec: &NetworkSpec, params: &ParamSet) -> Result<ParamSet> {
    spec.validate()?;
    let entries = spec
        .param_shapes()
        .into_iter()
        .map(|p| {
            if p.name.starts_with("head.") {
                return Ok((p.name, Tensor::zeros(&p.shape)));
            }
            let t = params
                .get(&p.name)
                .ok_or_else(|| Error::invalid(format!("missing parameter {}", p.name)))?;
            if t.shape() != p.shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    op: "reset_head",
                    lhs: t.shape().to_vec(),
                    rhs: p.shape,
                });
            }
            Ok((p.name, t.clone()))
        })
        .collect::<Result<Vec<_>>>()?;
    ParamSet::new(entries)
}

/// Checks that `params` has exactly the names and shapes `spec` requires.
pub fn check_params(spec: &NetworkSpec, params: &ParamSet) -> Result<()> {
    let shapes = spec.param_shapes();
    if shapes.len() != params.len() {
        return Err(Error::invalid(format!(
            "spec expects {} tensors, parameter set has {}",
            shapes.len(),
            params.len()
        )));
    }
    for (p, (name, t)) in shapes.iter().zip(params.iter()) {
        if p.name != name || p.shape.as_slice() != t.shape() {
            return Err(Error::ShapeMismatch {
                op: "check_params",
                lhs: p.shape.clone(),
                rhs: t.shape().to_vec(),
            });
        }
    }
    Ok(())
}

/// Asserts the teacher has strictly more parameters than the student and that
/// both share the label space.
pub fn check_teacher_student(teacher: &NetworkSpec, student: &NetworkSpec) -> Result<()> {
    teacher.validate()?;
    student.validate()?;
    if teacher.n_classes != student.n_classes {
        return Err(Error::invalid(format!(
            "teacher predicts {} classes, student {}",
            teacher.n_classes, student.n_classes
        )));
    }
    if teacher.param_count() <= student.param_count() {
        return Err(Error::invalid(format!(
            "teacher ({} params) must be larger than student ({} params)",
            teacher.param_count(),
            student.param_count()
        )));
    }
    Ok(())
}

fn linear(x: &Var, params: &ParamVars, prefix: &str) -> Result<Var> {
    x.matmul(params.get(&format!("{prefix}.weight"))?)?
        .add(params.get(&format!("{prefix}.bias"))?)
}

/// Runs the network on a batch `x: [B, ...input_shape]`.
///
/// Purely functional: the output is a graph over `params`, so gradients reach
/// them whether they are leaves or the result of earlier updates.
pub fn apply(spec: &NetworkSpec, params: &ParamVars, x: &Var) -> Result<NetOutput> {
    let xs = x.shape();
    if xs.len() != spec.input_shape.len() + 1 || xs[1..] != spec.input_shape[..] {
        return Err(Error::ShapeMismatch {
            op: "apply",
            lhs: xs,
            rhs: spec.input_shape.clone(),
        });
    }
    let embed_at = spec.embedding_index();
    let mut embedding = None;
    let features = match &spec.arch {
        Architecture::Mlp { hidden } => {
            let mut h = x.flatten()?;
            if embed_at.is_none() {
                embedding = Some(h.clone());
            }
            for i in 0..hidden.len() {
                h = linear(&h, params, &format!("layer{i}"))?.relu()?;
                if embed_at == Some(i) {
                    embedding = Some(h.clone());
                }
            }
            h
        }
        Architecture::Conv { channels, kernel } => {
            let mut h = x.clone();
            for i in 0..channels.len() {
                let w = params.get(&format!("conv{i}.weight"))?;
                let b = params.get(&format!("conv{i}.bias"))?.reshape(&[channels[i], 1, 1])?;
                h = conv2d(&h, w, 2, kernel / 2)?.add(&b)?.relu()?;
                if embed_at == Some(i) {
                    embedding = Some(h.flatten()?);
                }
            }
            h.flatten()?
        }
    };
    let logits = linear(&features, params, "head")?;
    Ok(NetOutput {
        logits,
        embedding: embedding.expect("embedding layer validated"),
    })
}

/// Forward pass on plain tensors; returns `(logits, embedding)` values.
pub fn apply_tensors(spec: &NetworkSpec, params: &ParamSet, x: &Tensor) -> Result<(Tensor, Tensor)> {
    let g = Graph::new();
    let vars = params.to_constants(&g)?;
    let out = apply(spec, &vars, &g.constant(x.clone())?)?;
    Ok((out.logits.value(), out.embedding.value()))
}
