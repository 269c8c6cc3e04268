//! Parameter ownership and tape binding.

use std::cell::RefCell;
use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{NnError, Result};
use crate::tensor::checkpoint::TensorMap;
use crate::tensor::{Tape, Tensor};

/// Handle to one named parameter in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Param(usize);

impl Param {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Weight initialization schemes.
pub enum Init {
    Zeros,
    Const(f64),
    /// Kaiming/He normal with gain 2 (for conv + relu-family stacks); the
    /// argument is the fan-in.
    HeNormal(usize),
    /// Xavier/Glorot uniform; arguments are (fan_in, fan_out).
    XavierUniform(usize, usize),
    /// Explicit values.
    Data(Vec<f64>),
}

/// Owns the master `f64` copies of every learnable tensor.
pub struct ParamStore {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    values: Vec<Vec<f64>>,
    by_name: HashMap<String, usize>,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(rng: ChaCha8Rng) -> Self {
        Self {
            names: Vec::new(),
            shapes: Vec::new(),
            values: Vec::new(),
            by_name: HashMap::new(),
            rng,
        }
    }

    pub fn add(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Param> {
        if self.by_name.contains_key(name) {
            return Err(NnError::DuplicateName(name.to_owned()));
        }
        let numel: usize = shape.iter().product();
        let data = match init {
            Init::Zeros => vec![0.0; numel],
            Init::Const(c) => vec![c; numel],
            Init::HeNormal(fan_in) => {
                let std = (2.0 / fan_in as f64).sqrt();
                (0..numel).map(|_| gauss(&mut self.rng) * std).collect()
            }
            Init::XavierUniform(fan_in, fan_out) => {
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                (0..numel)
                    .map(|_| self.rng.gen_range(-bound..bound))
                    .collect()
            }
            Init::Data(d) => {
                assert_eq!(d.len(), numel, "init data must match the shape");
                d
            }
        };
        let id = self.names.len();
        self.names.push(name.to_owned());
        self.shapes.push(shape.to_vec());
        self.values.push(data);
        self.by_name.insert(name.to_owned(), id);
        Ok(Param(id))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Vec::len).sum()
    }

    pub fn name(&self, p: Param) -> &str {
        &self.names[p.0]
    }

    pub fn shape(&self, p: Param) -> &[usize] {
        &self.shapes[p.0]
    }

    pub fn value(&self, p: Param) -> &[f64] {
        &self.values[p.0]
    }

    pub fn value_mut(&mut self, p: Param) -> &mut [f64] {
        &mut self.values[p.0]
    }

    pub fn set_value(&mut self, p: Param, data: Vec<f64>) {
        assert_eq!(data.len(), self.values[p.0].len());
        self.values[p.0] = data;
    }

    /// Sets every parameter to zero (used by identity/ablation tests).
    pub fn zero_all(&mut self) {
        for v in &mut self.values {
            v.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    pub fn params(&self) -> impl Iterator<Item = Param> + '_ {
        (0..self.names.len()).map(Param)
    }

    /// Snapshot for the checkpoint writer.
    pub fn to_map(&self) -> TensorMap {
        let mut map = TensorMap::new();
        for i in 0..self.names.len() {
            map.insert(
                self.names[i].clone(),
                (self.shapes[i].clone(), self.values[i].clone()),
            );
        }
        map
    }

    /// Installs checkpointed values. Every stored entry must match a declared
    /// parameter in name and shape, and vice versa.
    pub fn load_map(&mut self, map: &TensorMap) -> Result<()> {
        if map.len() != self.names.len() {
            return Err(NnError::CheckpointMismatch(format!(
                "checkpoint has {} tensors, model declares {}",
                map.len(),
                self.names.len()
            )));
        }
        for (name, (shape, data)) in map {
            let Some(&id) = self.by_name.get(name) else {
                return Err(NnError::CheckpointMismatch(format!(
                    "unknown tensor {name} in checkpoint"
                )));
            };
            if self.shapes[id] != *shape {
                return Err(NnError::CheckpointMismatch(format!(
                    "{name}: checkpoint shape {shape:?} vs declared {:?}",
                    self.shapes[id]
                )));
            }
            self.values[id] = data.clone();
        }
        Ok(())
    }

    pub(crate) fn rng_mut(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

/// Standard normal from two uniforms (Box–Muller, deterministic per rng state).
fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    (-2.0 * u1.ln()).sqrt() * u2.cos()
}

/// Binds parameters onto one tape for a single forward/backward pass.
pub struct Forward<'a> {
    tape: Tape,
    store: &'a ParamStore,
    bound: RefCell<Vec<Option<Tensor>>>,
}

impl<'a> Forward<'a> {
    pub fn new(tape: Tape, store: &'a ParamStore) -> Self {
        let bound = RefCell::new(vec![None; store.len()]);
        Self { tape, store, bound }
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    /// The parameter as a differentiable leaf of this pass's tape (bound once,
    /// then reused so gradients accumulate on a single node).
    pub fn param(&self, p: Param) -> Tensor {
        let mut bound = self.bound.borrow_mut();
        if let Some(t) = &bound[p.index()] {
            return t.clone();
        }
        let t = self
            .tape
            .leaf(self.store.value(p).to_vec(), self.store.shape(p))
            .expect("parameter shapes are valid by construction");
        bound[p.index()] = Some(t.clone());
        t
    }

    /// Collects `d loss / d param` for every parameter bound during this pass
    /// (entries are `None` for parameters that never joined the graph).
    pub fn grads(&self) -> Vec<Option<Vec<f64>>> {
        self.bound
            .borrow()
            .iter()
            .map(|slot| slot.as_ref().and_then(|t| t.grad()))
            .collect()
    }
}
