//! Parameter storage: a flat, canonically ordered list of named tensors
//! derived from the config. The same enumeration drives initialization,
//! taping for autodiff, the optimizer, and the checkpoint manifest.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::config::{FfnKind, ModelConfig, PosKind};
use crate::tensor::{Tape, Tensor, Var};

pub const INIT_STD: f64 = 0.02;

/// Walk every base parameter of the architecture in canonical order.
pub(crate) fn enumerate_params(config: &ModelConfig, mut f: impl FnMut(String, Vec<usize>)) {
    let (d, dh, dffn, v) = (config.d, config.d_head(), config.d_ffn, config.vocab_size);
    f("embed.tok".into(), vec![v, d]);
    match &config.pos_kind {
        PosKind::Learned => f("embed.pos".into(), vec![config.max_len, d]),
        PosKind::T5Bias { n_buckets, .. } => {
            f("pos.t5_table".into(), vec![n_buckets + 1, config.n_head])
        }
        _ => {}
    }
    for l in 0..config.n_layer {
        let bias = config.use_bias;
        f(format!("layers.{l}.norm1.gain"), vec![d]);
        if bias {
            f(format!("layers.{l}.norm1.bias"), vec![d]);
        }
        for j in 0..config.n_head {
            f(format!("layers.{l}.attn.wq.{j}"), vec![d, dh]);
            if bias {
                f(format!("layers.{l}.attn.bq.{j}"), vec![dh]);
            }
        }
        for g in 0..config.n_kv_head {
            f(format!("layers.{l}.attn.wk.{g}"), vec![d, dh]);
            if bias {
                f(format!("layers.{l}.attn.bk.{g}"), vec![dh]);
            }
            f(format!("layers.{l}.attn.wv.{g}"), vec![d, dh]);
            if bias {
                f(format!("layers.{l}.attn.bv.{g}"), vec![dh]);
            }
        }
        f(format!("layers.{l}.attn.w_head"), vec![d, d]);
        if bias {
            f(format!("layers.{l}.attn.b_head"), vec![d]);
        }
        f(format!("layers.{l}.norm2.gain"), vec![d]);
        if bias {
            f(format!("layers.{l}.norm2.bias"), vec![d]);
        }
        match config.ffn_kind {
            FfnKind::Relu | FfnKind::Gelu => {
                f(format!("layers.{l}.ffn.w_h"), vec![d, dffn]);
                if bias {
                    f(format!("layers.{l}.ffn.b_h"), vec![dffn]);
                }
            }
            FfnKind::Geglu | FfnKind::Swiglu => {
                f(format!("layers.{l}.ffn.w1"), vec![d, dffn]);
                if bias {
                    f(format!("layers.{l}.ffn.b1"), vec![dffn]);
                }
                f(format!("layers.{l}.ffn.w2"), vec![d, dffn]);
                if bias {
                    f(format!("layers.{l}.ffn.b2"), vec![dffn]);
                }
            }
        }
        f(format!("layers.{l}.ffn.w_f"), vec![dffn, d]);
        if bias {
            f(format!("layers.{l}.ffn.b_f"), vec![d]);
        }
    }
    f("out.w".into(), vec![d, v]);
}

/// Standard normal draw via Box–Muller over the ChaCha stream, so that
/// initialization is bit-reproducible from the seed.
pub(crate) fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn init_tensor(name: &str, shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    // 1-D parameters are norm gains (init 1) or biases (init 0); everything
    // 2-D is a weight matrix or embedding/bias table.
    let data: Vec<f64> = if name.ends_with(".gain") {
        vec![1.0; n]
    } else if shape.len() == 1 {
        vec![0.0; n]
    } else {
        (0..n).map(|_| INIT_STD * normal(rng)).collect()
    };
    Tensor::new(shape.to_vec(), data).expect("init tensors are finite by construction")
}

/// All trainable state of one model: base architecture parameters plus any
/// attached heads (reward/value), each a named tensor.
#[derive(Clone)]
pub struct ModelParams {
    pub config: ModelConfig,
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ModelParams {
    /// Fresh parameters drawn from the seed: weights ~ N(0, 0.02²),
    /// gains 1, biases 0.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        enumerate_params(&config, |name, shape| {
            tensors.push(init_tensor(&name, &shape, &mut rng));
            names.push(name);
        });
        Ok(ModelParams { config, names, tensors })
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensor(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn by_name(&self, name: &str) -> &Tensor {
        let i = self
            .index_of(name)
            .unwrap_or_else(|| panic!("parameter {name} missing from model"));
        &self.tensors[i]
    }

    /// Attach an extra named head (e.g. a d×1 reward projection). Appended
    /// after the base parameters; checkpointed like any other tensor.
    pub fn add_head(&mut self, name: &str, shape: &[usize], seed: u64) -> Result<usize> {
        if self.index_of(name).is_some() {
            return Err(Error::Config(format!("parameter {name} already exists")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| INIT_STD * normal(&mut rng)).collect();
        self.tensors.push(Tensor::new(shape.to_vec(), data)?);
        self.names.push(name.to_string());
        Ok(self.tensors.len() - 1)
    }

    pub fn has(&self, name: &str) -> bool {
        self.index_of(name).is_some()
    }

    /// Record every parameter on a tape, optionally as differentiation leaves.
    pub fn leaf_all(&self, tape: &mut Tape, trainable: bool) -> ParamVars {
        self.leaf_selective(tape, |_| trainable)
    }

    /// Record every parameter, marking only those whose name passes the
    /// predicate as trainable (prompt tuning freezes the backbone this way).
    pub fn leaf_selective(&self, tape: &mut Tape, trainable: impl Fn(&str) -> bool) -> ParamVars {
        let vars = self
            .names
            .iter()
            .zip(&self.tensors)
            .map(|(name, t)| {
                let mut c = t.clone();
                if trainable(name) {
                    c = c.with_grad();
                }
                tape.leaf(c)
            })
            .collect();
        ParamVars { vars }
    }

    /// Overwrite a parameter's values in place (optimizer step).
    pub fn update(&mut self, i: usize, f: impl FnOnce(&mut [f64])) {
        f(self.tensors[i].data_mut());
    }

    /// Replace a tensor wholesale, validating the shape.
    pub fn set_tensor(&mut self, i: usize, t: Tensor) -> Result<()> {
        if t.shape() != self.tensors[i].shape() {
            return Err(Error::Shape {
                op: "set_tensor",
                detail: format!("{:?} vs {:?}", t.shape(), self.tensors[i].shape()),
            });
        }
        self.tensors[i] = t;
        Ok(())
    }
}

/// Tape handles for every parameter, parallel to `ModelParams` order.
pub struct ParamVars {
    pub vars: Vec<Var>,
}

impl ParamVars {
    pub fn get(&self, params: &ModelParams, name: &str) -> Var {
        let i = params
            .index_of(name)
            .unwrap_or_else(|| panic!("parameter {name} missing from model"));
        self.vars[i]
    }
}
