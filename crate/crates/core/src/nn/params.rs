use std::collections::HashMap;

use ndarray::Array2;
use rand::Rng;

use super::tape::Float;

/// Named parameter tensors, addressed by insertion index.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Array2<T>>,
    index: HashMap<String, usize>,
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> ParamStore<T> {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, value: Array2<T>) -> usize {
        assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        self.names.push(name.to_string());
        self.values.push(value);
        self.index.insert(name.to_string(), self.values.len() - 1);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, id: usize) -> &Array2<T> {
        &self.values[id]
    }

    pub fn value_mut(&mut self, id: usize) -> &mut Array2<T> {
        &mut self.values[id]
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn zeros_like(&self) -> Vec<Array2<T>> {
        self.values
            .iter()
            .map(|v| Array2::zeros(v.raw_dim()))
            .collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<T>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Converts every tensor to another element type.
    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self
                .values
                .iter()
                .map(|v| v.mapv(|x| U::of(num_traits::ToPrimitive::to_f64(&x).unwrap())))
                .collect(),
            index: self.index.clone(),
        }
    }
}

/// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
pub fn xavier<T: Float>(rows: usize, cols: usize, rng: &mut impl Rng) -> Array2<T> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| T::of(rng.random_range(-bound..bound)))
}

/// Uniform in `±scale`.
pub fn uniform<T: Float>(rows: usize, cols: usize, scale: f64, rng: &mut impl Rng) -> Array2<T> {
    Array2::from_shape_fn((rows, cols), |_| T::of(rng.random_range(-scale..scale)))
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: Vec<Array2<T>>,
    v: Vec<Array2<T>>,
}

impl<T: Float> Adam<T> {
    pub fn new(store: &ParamStore<T>, lr: f64) -> Adam<T> {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: store.zeros_like(),
            v: store.zeros_like(),
        }
    }

    /// Applies one update from `grads`, which are scaled by `scale` first.
    pub fn update(&mut self, store: &mut ParamStore<T>, grads: &[Array2<T>], scale: f64) {
        self.step += 1;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let c1 = T::of(1.0 - self.beta1.powi(self.step));
        let c2 = T::of(1.0 - self.beta2.powi(self.step));
        let (lr, eps, scale) = (T::of(self.lr), T::of(self.eps), T::of(scale));
        for (id, g) in grads.iter().enumerate() {
            let (m, v) = (&mut self.m[id], &mut self.v[id]);
            ndarray::Zip::from(store.value_mut(id))
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    let g = g * scale;
                    *m = b1 * *m + (T::one() - b1) * g;
                    *v = b2 * *v + (T::one() - b2) * g * g;
                    let mh = *m / c1;
                    let vh = *v / c2;
                    *p -= lr * mh / (vh.sqrt() + eps);
                });
        }
    }
}
