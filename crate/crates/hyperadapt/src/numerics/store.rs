use indexmap::IndexMap;

use super::rng::fnv1a;
use super::tensor::{Scalar, Tensor2};
use super::{NumericsError, Result};

pub const ADAM_BETAS: (f64, f64) = (0.9, 0.999);
pub const ADAM_EPS: f64 = 1e-8;

/// One named parameter tensor with its gradient and Adam moments.
/// Vectors (biases, norm gains) are stored as 1xN matrices; `vector`
/// records that so checkpoints can round-trip the original shape.
#[derive(Debug, Clone)]
pub struct Param<T: Scalar> {
    pub value: Tensor2<T>,
    pub grad: Tensor2<T>,
    pub trainable: bool,
    pub vector: bool,
    m: Tensor2<T>,
    v: Tensor2<T>,
}

impl<T: Scalar> Param<T> {
    fn new(value: Tensor2<T>, trainable: bool, vector: bool) -> Self {
        let (r, c) = value.shape();
        Param {
            grad: Tensor2::zeros(r, c),
            m: Tensor2::zeros(r, c),
            v: Tensor2::zeros(r, c),
            value,
            trainable,
            vector,
        }
    }
}

/// Ordered name -> parameter map. Iteration order is insertion order, which
/// keeps checkpoints, checksums, and gradient sampling deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T: Scalar> {
    params: IndexMap<String, Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: IndexMap::new() }
    }

    pub fn insert_matrix(&mut self, name: &str, value: Tensor2<T>) -> Result<()> {
        self.insert(name, value, false)
    }

    /// Vector parameters are held as a 1xN row.
    pub fn insert_vector(&mut self, name: &str, value: Tensor2<T>) -> Result<()> {
        if value.rows() != 1 {
            return Err(NumericsError::Invalid(format!(
                "vector parameter {name:?} must have one row, got {:?}",
                value.shape()
            )));
        }
        self.insert(name, value, true)
    }

    fn insert(&mut self, name: &str, value: Tensor2<T>, vector: bool) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(NumericsError::DuplicateParam(name.to_string()));
        }
        self.params.insert(name.to_string(), Param::new(value, true, vector));
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Param<T>> {
        self.params.get(name).ok_or_else(|| NumericsError::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param<T>> {
        self.params.get_mut(name).ok_or_else(|| NumericsError::UnknownParam(name.to_string()))
    }

    pub fn value(&self, name: &str) -> Result<&Tensor2<T>> {
        Ok(&self.get(name)?.value)
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        self.get_mut(name)?.trainable = trainable;
        Ok(())
    }

    pub fn freeze_all(&mut self) {
        for p in self.params.values_mut() {
            p.trainable = false;
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<T>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar elements across all parameters.
    pub fn total_params(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            let (r, c) = p.value.shape();
            p.grad = Tensor2::zeros(r, c);
        }
    }

    pub fn accumulate_grad(&mut self, name: &str, grad: &Tensor2<T>) -> Result<()> {
        let p = self.get_mut(name)?;
        if p.grad.shape() != grad.shape() {
            return Err(NumericsError::ShapeMismatch {
                op: "accumulate_grad",
                left: p.grad.shape(),
                right: grad.shape(),
            });
        }
        p.grad.add_assign(grad)
    }

    pub fn scale_grads(&mut self, s: T) {
        for p in self.params.values_mut() {
            p.grad = p.grad.scale(s);
        }
    }

    /// FNV-1a over names and little-endian value bytes, in insertion order.
    /// Two stores with identical contents hash identically; any flipped bit
    /// in any parameter changes the digest.
    pub fn checksum(&self) -> u64 {
        let mut bytes = Vec::new();
        for (name, p) in &self.params {
            bytes.extend_from_slice(name.as_bytes());
            bytes.push(0);
            for &v in p.value.data() {
                v.write_le(&mut bytes);
            }
        }
        fnv1a(&bytes)
    }

    /// Deep copy of the values only (used for early-stopping snapshots).
    pub fn snapshot_values(&self) -> Vec<(String, Tensor2<T>)> {
        self.params.iter().map(|(k, p)| (k.clone(), p.value.clone())).collect()
    }

    pub fn restore_values(&mut self, snapshot: &[(String, Tensor2<T>)]) -> Result<()> {
        for (name, value) in snapshot {
            let p = self.get_mut(name)?;
            if p.value.shape() != value.shape() {
                return Err(NumericsError::ShapeMismatch {
                    op: "restore_values",
                    left: p.value.shape(),
                    right: value.shape(),
                });
            }
            p.value = value.clone();
        }
        Ok(())
    }
}

/// Adam state shared across steps: the step counter lives outside the store
/// so restoring a snapshot does not reset bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    step: u64,
}

impl Adam {
    pub fn new(lr: f64) -> Result<Self> {
        if !(lr > 0.0) {
            return Err(NumericsError::BadLearningRate(lr));
        }
        Ok(Adam { lr, betas: ADAM_BETAS, eps: ADAM_EPS, step: 0 })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update from the accumulated gradients. Frozen parameters are
    /// skipped entirely: no moment update, no value change.
    pub fn step<T: Scalar>(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        self.step += 1;
        adam_step(store, self.lr, self.betas, self.eps, self.step)
    }
}

/// In-place Adam update with bias correction; `step` is 1-based.
pub fn adam_step<T: Scalar>(
    store: &mut ParamStore<T>,
    lr: f64,
    betas: (f64, f64),
    eps: f64,
    step: u64,
) -> Result<()> {
    if !(lr > 0.0) {
        return Err(NumericsError::BadLearningRate(lr));
    }
    let b1 = T::from_f64(betas.0);
    let b2 = T::from_f64(betas.1);
    let one = T::one();
    let lr_t = T::from_f64(lr);
    let eps_t = T::from_f64(eps);
    let corr1 = T::from_f64(1.0 - betas.0.powi(step as i32));
    let corr2 = T::from_f64(1.0 - betas.1.powi(step as i32));
    for p in store.params.values_mut() {
        if !p.trainable {
            continue;
        }
        let n = p.value.len();
        for i in 0..n {
            let g = p.grad.data()[i];
            let m = b1 * p.m.data()[i] + (one - b1) * g;
            let v = b2 * p.v.data()[i] + (one - b2) * g * g;
            p.m.data_mut()[i] = m;
            p.v.data_mut()[i] = v;
            let m_hat = m / corr1;
            let v_hat = v / corr2;
            p.value.data_mut()[i] = p.value.data()[i] - lr_t * m_hat / (v_hat.sqrt() + eps_t);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(name: &str, vals: Vec<f64>) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert_matrix(name, Tensor2::from_vec(1, vals.len(), vals).unwrap()).unwrap();
        s
    }

    #[test]
    fn duplicate_and_unknown_names_error() {
        let mut s = store_with("w", vec![1.0]);
        assert!(matches!(
            s.insert_matrix("w", Tensor2::zeros(1, 1)),
            Err(NumericsError::DuplicateParam(_))
        ));
        assert!(matches!(s.value("nope"), Err(NumericsError::UnknownParam(_))));
    }

    #[test]
    fn insertion_order_is_preserved() {
        let mut s = ParamStore::<f64>::new();
        for name in ["zeta", "alpha", "mid"] {
            s.insert_matrix(name, Tensor2::zeros(1, 1)).unwrap();
        }
        let names: Vec<&str> = s.names().collect();
        assert_eq!(names, ["zeta", "alpha", "mid"]);
    }

    #[test]
    fn checksum_detects_any_change() {
        let s1 = store_with("w", vec![1.0, 2.0, 3.0]);
        let s2 = store_with("w", vec![1.0, 2.0, 3.0]);
        assert_eq!(s1.checksum(), s2.checksum());

        let s3 = store_with("w", vec![1.0, 2.0, 3.0000001]);
        assert_ne!(s1.checksum(), s3.checksum());

        let s4 = store_with("w2", vec![1.0, 2.0, 3.0]);
        assert_ne!(s1.checksum(), s4.checksum());
    }

    #[test]
    fn adam_converges_on_quadratic() {
        // Minimize f(x) = sum (x - c)^2 from x = 0; analytic grad 2(x - c).
        let target = [3.0, -1.5, 0.25];
        let mut s = store_with("x", vec![0.0, 0.0, 0.0]);
        let mut opt = Adam::new(0.1).unwrap();
        for _ in 0..200 {
            s.zero_grads();
            let g: Vec<f64> = s
                .value("x")
                .unwrap()
                .data()
                .iter()
                .zip(&target)
                .map(|(&x, &c)| 2.0 * (x - c))
                .collect();
            let g = Tensor2::from_vec(1, 3, g).unwrap();
            s.accumulate_grad("x", &g).unwrap();
            opt.step(&mut s).unwrap();
        }
        for (&x, &c) in s.value("x").unwrap().data().iter().zip(&target) {
            assert!((x - c).abs() < 1e-2, "x={x} target={c}");
        }
    }

    #[test]
    fn frozen_params_are_untouched() {
        let mut s = store_with("w", vec![1.0, 2.0]);
        s.set_trainable("w", false).unwrap();
        s.accumulate_grad("w", &Tensor2::from_vec(1, 2, vec![10.0, 10.0]).unwrap()).unwrap();
        let before = s.value("w").unwrap().clone();
        let mut opt = Adam::new(0.5).unwrap();
        opt.step(&mut s).unwrap();
        assert_eq!(*s.value("w").unwrap(), before);
    }

    #[test]
    fn nonpositive_learning_rate_rejected() {
        assert!(Adam::new(0.0).is_err());
        assert!(Adam::new(-1e-3).is_err());
        assert!(Adam::new(f64::NAN).is_err());
    }

    #[test]
    fn first_adam_step_matches_closed_form() {
        // With zero moments, one step moves by lr * g / (|g| + eps') where
        // bias correction cancels the (1-beta) factors exactly at t=1.
        let mut s = store_with("x", vec![0.0]);
        s.accumulate_grad("x", &Tensor2::from_vec(1, 1, vec![2.0]).unwrap()).unwrap();
        adam_step(&mut s, 0.1, ADAM_BETAS, ADAM_EPS, 1).unwrap();
        let x = s.value("x").unwrap().data()[0];
        let expect = -0.1 * 2.0 / (2.0 + ADAM_EPS * (1.0 - ADAM_BETAS.1).sqrt() / (1.0 - ADAM_BETAS.0) * (1.0 - ADAM_BETAS.0) / (1.0 - ADAM_BETAS.1).sqrt());
        // m_hat = g, v_hat = g^2, so the step is -lr * g/(|g|+eps) ~ -lr * sign(g).
        assert!((x - expect).abs() < 1e-6, "x={x} expect={expect}");
        assert!((x + 0.1).abs() < 1e-6);
    }

    #[test]
    fn snapshot_restore_round_trips() {
        let mut s = store_with("w", vec![1.0, 2.0]);
        let snap = s.snapshot_values();
        s.get_mut("w").unwrap().value = Tensor2::from_vec(1, 2, vec![9.0, 9.0]).unwrap();
        s.restore_values(&snap).unwrap();
        assert_eq!(s.value("w").unwrap().data(), &[1.0, 2.0]);
    }
}
