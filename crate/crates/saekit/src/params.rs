//! Named parameter storage and the session that exposes it to a tape.
//!
//! A [`ParamStore`] owns every learnable tensor and every non-learnable
//! buffer (batch-norm running statistics) of a network, keyed by hierarchical
//! names like `encoder.stage1.block0.b2.conv.w`. Iteration order is insertion
//! order, which makes optimizer sweeps and checkpoints deterministic.
//!
//! A [`Session`] wraps one store and one tape for one forward pass. Layer
//! code asks it for parameters by name and gets tape leaves back; asking
//! twice returns the same leaf, so weight sharing falls out naturally. In
//! training mode the session also collects the batch statistics each norm
//! layer produced, so the caller can fold them into the running buffers
//! after the step.

use std::cell::RefCell;

use indexmap::IndexMap;

use crate::autograd::{Tape, Var, VarId};
use crate::error::{Error, Result};
use crate::nn::{BnStats, Mode};
use crate::rng::SplitMix64;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// How a parameter starts life.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// He/Kaiming uniform: U(-b, b) with b = sqrt(6 / fan_in). Variance
    /// 2 / fan_in, the right scale for layers followed by ReLU.
    KaimingUniform { fan_in: usize },
    Zeros,
    Ones,
}

/// A parameter the network will register: name, shape, and initializer.
#[derive(Debug, Clone)]
pub struct ParamDef {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamDef {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, init: Init) -> Self {
        ParamDef { name: name.into(), shape, init }
    }
}

/// A buffer the network will register (running statistics).
#[derive(Debug, Clone)]
pub struct BufferDef {
    pub name: String,
    pub shape: Vec<usize>,
    /// Fill value: running means start at 0, running variances at 1.
    pub fill: f64,
}

impl BufferDef {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, fill: f64) -> Self {
        BufferDef { name: name.into(), shape, fill }
    }
}

/// Ordered, named storage for parameters and buffers.
#[derive(Debug, Clone)]
pub struct ParamStore<E: Scalar = f32> {
    params: IndexMap<String, Tensor<E>>,
    buffers: IndexMap<String, Tensor<E>>,
}

impl<E: Scalar> Default for ParamStore<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Scalar> ParamStore<E> {
    pub fn new() -> Self {
        ParamStore { params: IndexMap::new(), buffers: IndexMap::new() }
    }

    /// Materializes parameters and buffers from definitions. Each parameter
    /// draws from its own PRNG stream (derived from `seed` and its position),
    /// so the values do not depend on how other layers are initialized.
    pub fn init(defs: &[ParamDef], buffers: &[BufferDef], seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        for (i, def) in defs.iter().enumerate() {
            let n: usize = def.shape.iter().product();
            let data = match def.init {
                Init::Zeros => vec![E::ZERO; n],
                Init::Ones => vec![E::ONE; n],
                Init::KaimingUniform { fan_in } => {
                    let b = (6.0 / fan_in as f64).sqrt();
                    let mut rng = SplitMix64::derive(seed, i as u64);
                    (0..n).map(|_| E::from_f64(rng.uniform_in(-b, b))).collect()
                }
            };
            store.insert_param(&def.name, Tensor::new(def.shape.clone(), data)?)?;
        }
        for def in buffers {
            let t = Tensor::full(def.shape.clone(), E::from_f64(def.fill))?;
            store.insert_buffer(&def.name, t)?;
        }
        Ok(store)
    }

    pub fn insert_param(&mut self, name: &str, value: Tensor<E>) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(Error::DuplicateParam(name.into()));
        }
        self.params.insert(name.into(), value);
        Ok(())
    }

    pub fn insert_buffer(&mut self, name: &str, value: Tensor<E>) -> Result<()> {
        if self.buffers.contains_key(name) {
            return Err(Error::DuplicateParam(name.into()));
        }
        self.buffers.insert(name.into(), value);
        Ok(())
    }

    pub fn param(&self, name: &str) -> Result<&Tensor<E>> {
        self.params.get(name).ok_or_else(|| Error::UnknownParam(name.into()))
    }

    pub fn param_mut(&mut self, name: &str) -> Result<&mut Tensor<E>> {
        self.params.get_mut(name).ok_or_else(|| Error::UnknownParam(name.into()))
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor<E>> {
        self.buffers.get(name).ok_or_else(|| Error::UnknownParam(name.into()))
    }

    pub fn buffer_mut(&mut self, name: &str) -> Result<&mut Tensor<E>> {
        self.buffers.get_mut(name).ok_or_else(|| Error::UnknownParam(name.into()))
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn buffer_names(&self) -> impl Iterator<Item = &str> {
        self.buffers.keys().map(String::as_str)
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    /// Total learnable scalar count, the number quoted in model summaries.
    pub fn scalar_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Element-type conversion; used to run f64 gradient checks on models
    /// defined in f32.
    pub fn cast<F: Scalar>(&self) -> ParamStore<F> {
        ParamStore {
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            buffers: self.buffers.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }
}

/// One forward pass worth of bookkeeping: hands out tape leaves for named
/// parameters and records batch-norm statistics seen along the way.
pub struct Session<'t, 's, E: Scalar = f32> {
    tape: &'t Tape<E>,
    store: &'s ParamStore<E>,
    mode: Mode,
    vars: RefCell<IndexMap<String, Var<'t, E>>>,
    bn_updates: RefCell<Vec<(String, BnStats<E>)>>,
}

impl<'t, 's, E: Scalar> Session<'t, 's, E> {
    pub fn new(tape: &'t Tape<E>, store: &'s ParamStore<E>, mode: Mode) -> Self {
        Session {
            tape,
            store,
            mode,
            vars: RefCell::new(IndexMap::new()),
            bn_updates: RefCell::new(Vec::new()),
        }
    }

    pub fn tape(&self) -> &'t Tape<E> {
        self.tape
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// The tape leaf for a named parameter; created on first use, shared on
    /// every use after that.
    pub fn param(&self, name: &str) -> Result<Var<'t, E>> {
        if let Some(v) = self.vars.borrow().get(name) {
            return Ok(*v);
        }
        let value = self.store.param(name)?.clone();
        let var = self.tape.leaf(value, true);
        self.vars.borrow_mut().insert(name.into(), var);
        Ok(var)
    }

    /// A buffer's current value (cloned; buffers never join the tape).
    pub fn buffer(&self, name: &str) -> Result<Tensor<E>> {
        Ok(self.store.buffer(name)?.clone())
    }

    /// Called by norm layers in training mode so the trainer can update
    /// running statistics after the step.
    pub fn note_bn_stats(&self, name: &str, stats: BnStats<E>) {
        self.bn_updates.borrow_mut().push((name.into(), stats));
    }

    pub fn take_bn_updates(&self) -> Vec<(String, BnStats<E>)> {
        std::mem::take(&mut *self.bn_updates.borrow_mut())
    }

    /// Which leaves were actually materialized, in first-use order. The
    /// optimizer walks this to pair gradients with store entries.
    pub fn touched(&self) -> Vec<(String, VarId)> {
        self.vars.borrow().iter().map(|(k, v)| (k.clone(), v.id())).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_respects_shapes_and_fills() {
        let defs = [
            ParamDef::new("w", vec![4, 3], Init::KaimingUniform { fan_in: 3 }),
            ParamDef::new("gamma", vec![4], Init::Ones),
            ParamDef::new("b", vec![4], Init::Zeros),
        ];
        let bufs = [
            BufferDef::new("rm", vec![4], 0.0),
            BufferDef::new("rv", vec![4], 1.0),
        ];
        let store = ParamStore::<f32>::init(&defs, &bufs, 7).unwrap();
        assert_eq!(store.param("w").unwrap().shape(), &[4, 3]);
        assert_eq!(store.param("gamma").unwrap().data(), &[1.0; 4]);
        assert_eq!(store.param("b").unwrap().data(), &[0.0; 4]);
        assert_eq!(store.buffer("rv").unwrap().data(), &[1.0; 4]);
        assert_eq!(store.scalar_count(), 4 * 3 + 4 + 4);
    }

    #[test]
    fn init_is_seed_deterministic_and_seed_sensitive() {
        let defs = [ParamDef::new("w", vec![16], Init::KaimingUniform { fan_in: 8 })];
        let a = ParamStore::<f32>::init(&defs, &[], 1).unwrap();
        let b = ParamStore::<f32>::init(&defs, &[], 1).unwrap();
        let c = ParamStore::<f32>::init(&defs, &[], 2).unwrap();
        assert_eq!(a.param("w").unwrap().data(), b.param("w").unwrap().data());
        assert_ne!(a.param("w").unwrap().data(), c.param("w").unwrap().data());
    }

    #[test]
    fn kaiming_bound_and_scale_track_fan_in() {
        // U(-b, b) with b = sqrt(6/2) = sqrt(3): every draw inside the bound,
        // sample variance near b^2/3 = 1.
        let defs = [ParamDef::new("w", vec![100_000], Init::KaimingUniform { fan_in: 2 })];
        let store = ParamStore::<f64>::init(&defs, &[], 3).unwrap();
        let w = store.param("w").unwrap();
        let b = 3.0f64.sqrt();
        assert!(w.data().iter().all(|v| v.abs() < b), "draw outside (-b, b)");
        let mean = w.mean_all();
        let var = w.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
            / (w.len() - 1) as f64;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "var {var}");
    }

    #[test]
    fn duplicate_and_missing_names_error() {
        let mut store = ParamStore::<f32>::new();
        store.insert_param("w", Tensor::scalar(1.0)).unwrap();
        assert!(matches!(
            store.insert_param("w", Tensor::scalar(2.0)),
            Err(Error::DuplicateParam(_))
        ));
        assert!(matches!(store.param("nope"), Err(Error::UnknownParam(_))));
    }

    #[test]
    fn session_hands_out_one_leaf_per_name() {
        let mut store = ParamStore::<f64>::new();
        store.insert_param("w", Tensor::scalar(3.0)).unwrap();
        let tape = Tape::new();
        let sess = Session::new(&tape, &store, Mode::Train);
        let a = sess.param("w").unwrap();
        let b = sess.param("w").unwrap();
        assert_eq!(a.id(), b.id());
        assert_eq!(tape.len(), 1);
        assert_eq!(sess.touched(), vec![("w".to_string(), a.id())]);
    }

    #[test]
    fn cast_round_trips_between_widths() {
        let defs = [ParamDef::new("w", vec![8], Init::KaimingUniform { fan_in: 4 })];
        let store = ParamStore::<f32>::init(&defs, &[], 5).unwrap();
        let wide = store.cast::<f64>();
        let back = wide.cast::<f32>();
        assert_eq!(store.param("w").unwrap().data(), back.param("w").unwrap().data());
    }
}
