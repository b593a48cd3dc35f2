use rand::Rng;

use crate::scalar::Scalar;

/// Handle to one named parameter block inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Flat parameter vector plus the layout that maps named blocks onto it.
///
/// Registration order is deterministic, so the flat layout is a pure
/// function of the model spec.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    data: Vec<T>,
    entries: Vec<ParamEntry>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// How a freshly registered block is filled.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    /// U(-b, b) with b = 1/sqrt(fan_in).
    FanInUniform { fan_in: usize },
    Normal { sd: f64 },
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            data: Vec::new(),
            entries: Vec::new(),
        }
    }

    pub fn register<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        init: Init,
        rng: &mut R,
    ) -> ParamId {
        let offset = self.data.len();
        let n: usize = shape.iter().product();
        match init {
            Init::Zeros => self.data.extend(std::iter::repeat_n(T::zero(), n)),
            Init::Ones => self.data.extend(std::iter::repeat_n(T::one(), n)),
            Init::FanInUniform { fan_in } => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                for _ in 0..n {
                    let u: f64 = rng.random();
                    self.data.push(T::of((2.0 * u - 1.0) * bound));
                }
            }
            Init::Normal { sd } => {
                for _ in 0..n {
                    self.data.push(T::of(sd * standard_normal(rng)));
                }
            }
        }
        self.entries.push(ParamEntry {
            name: name.into(),
            shape: shape.to_vec(),
            offset,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn slice(&self, id: ParamId) -> &[T] {
        let e = &self.entries[id.0];
        &self.data[e.offset..e.offset + e.len()]
    }

    pub fn slice_mut(&mut self, id: ParamId) -> &mut [T] {
        let e = &self.entries[id.0];
        let (lo, hi) = (e.offset, e.offset + e.len());
        &mut self.data[lo..hi]
    }

    pub fn flat(&self) -> &[T] {
        &self.data
    }

    pub fn flat_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Replace the flat vector, keeping the layout.
    pub fn set_flat(&mut self, values: Vec<T>) -> Result<(), crate::NnError> {
        if values.len() != self.data.len() {
            return Err(crate::NnError::Shape(format!(
                "parameter vector has {} values, layout needs {}",
                values.len(),
                self.data.len()
            )));
        }
        self.data = values;
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            data: self.data.iter().map(|x| U::of(x.as_f64())).collect(),
            entries: self.entries.clone(),
        }
    }
}

/// Box-Muller; keeps the crate free of a distributions dependency.
pub(crate) fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}
