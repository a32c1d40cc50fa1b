use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::tape::{BnStats, Mode, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StatsId(usize);

impl ParamId {
    /// Position in [`ParamStore::params`].
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named trainable tensor with its gradient and Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Vec<T>,
    pub first_moment: Vec<T>,
    pub second_moment: Vec<T>,
    pub step: u64,
    pub trainable: bool,
}

impl<T: Element> Parameter<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        let n = value.len();
        Self {
            name: name.into(),
            value,
            grad: vec![T::zero(); n],
            first_moment: vec![T::zero(); n],
            second_moment: vec![T::zero(); n],
            step: 0,
            trainable: true,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }

    fn cast<U: Element>(&self) -> Parameter<U> {
        let conv = |v: &[T]| v.iter().map(|x| U::from_f64(x.as_f64())).collect();
        Parameter {
            name: self.name.clone(),
            value: self.value.cast(),
            grad: conv(&self.grad),
            first_moment: conv(&self.first_moment),
            second_moment: conv(&self.second_moment),
            step: self.step,
            trainable: self.trainable,
        }
    }
}

/// Named running statistics of one batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedStats<T> {
    pub name: String,
    pub stats: BnStats<T>,
}

/// Owner of every parameter and batch-norm buffer of a model.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    stats: Vec<NamedStats<T>>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            stats: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.params.push(Parameter::new(name, value));
        ParamId(self.params.len() - 1)
    }

    pub fn add_stats(&mut self, name: impl Into<String>, channels: usize) -> StatsId {
        self.stats.push(NamedStats {
            name: name.into(),
            stats: BnStats::identity(channels),
        });
        StatsId(self.stats.len() - 1)
    }

    pub fn param(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn stats(&self, id: StatsId) -> &BnStats<T> {
        &self.stats[id.0].stats
    }

    pub fn stats_mut(&mut self, id: StatsId) -> &mut BnStats<T> {
        &mut self.stats[id.0].stats
    }

    pub fn params(&self) -> &[Parameter<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter<T>] {
        &mut self.params
    }

    pub fn all_stats(&self) -> &[NamedStats<T>] {
        &self.stats
    }

    pub fn all_stats_mut(&mut self) -> &mut [NamedStats<T>] {
        &mut self.stats
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(Parameter::zero_grad);
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            params: self.params.iter().map(Parameter::cast).collect(),
            stats: self
                .stats
                .iter()
                .map(|s| NamedStats {
                    name: s.name.clone(),
                    stats: BnStats {
                        mean: s.stats.mean.iter().map(|x| U::from_f64(x.as_f64())).collect(),
                        var: s.stats.var.iter().map(|x| U::from_f64(x.as_f64())).collect(),
                    },
                })
                .collect(),
        }
    }
}

/// One forward/backward pass over a [`ParamStore`].
///
/// Each parameter is placed on the tape at most once, so a parameter used
/// several times in one pass accumulates a single gradient.
pub struct Session<'s, T: Element> {
    tape: Tape<T>,
    store: &'s mut ParamStore<T>,
    bound: Vec<Option<Var>>,
    mode: Mode,
}

impl<'s, T: Element> Session<'s, T> {
    pub fn new(store: &'s mut ParamStore<T>, mode: Mode) -> Self {
        let n = store.params.len();
        Self {
            tape: Tape::new(),
            store,
            bound: vec![None; n],
            mode,
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn tape(&self) -> &Tape<T> {
        &self.tape
    }

    pub fn tape_mut(&mut self) -> &mut Tape<T> {
        &mut self.tape
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        if let Some(v) = self.bound[id.0] {
            return Ok(v);
        }
        let p = &self.store.params[id.0];
        let v = self.tape.leaf(p.value.clone(), p.trainable)?;
        self.bound[id.0] = Some(v);
        Ok(v)
    }

    pub fn input(&mut self, value: Tensor<T>) -> Result<Var> {
        self.tape.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.tape.value(v)
    }

    /// The tape together with one layer's running statistics.
    pub fn tape_and_stats(&mut self, stats: StatsId) -> (&mut Tape<T>, &mut BnStats<T>) {
        (&mut self.tape, &mut self.store.stats[stats.0].stats)
    }

    /// Batch norm with parameters and running statistics from the store.
    pub fn batchnorm(&mut self, x: Var, gamma: ParamId, beta: ParamId, stats: StatsId) -> Result<Var> {
        let g = self.param(gamma)?;
        let b = self.param(beta)?;
        let mode = self.mode;
        self.tape
            .batchnorm2d(x, g, b, &mut self.store.stats[stats.0].stats, mode)
    }

    /// Backpropagate `loss` and add the resulting gradients to the store.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.mode != Mode::Train {
            return Err(TensorError::Usage("backward in eval mode".into()));
        }
        self.tape.backward(loss)?;
        for (i, bound) in self.bound.iter().enumerate() {
            let Some(v) = bound else { continue };
            if let Some(g) = self.tape.grad(*v) {
                let p = &mut self.store.params[i];
                p.grad.iter_mut().zip(g.data()).for_each(|(a, &b)| *a = *a + b);
            }
        }
        Ok(())
    }
}
