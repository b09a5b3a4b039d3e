use crate::numerics::{relu, Graph, Scalar, Tensor2, Var};

use super::{ModelError, Result};

/// One layer's bottleneck adapter: down-project h -> a, ReLU, up-project
/// a -> h, residual around the whole block. All-zero parameters make the
/// block an exact identity.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterParams<T: Scalar> {
    /// h x a
    pub w_down: Tensor2<T>,
    /// 1 x a
    pub b_down: Tensor2<T>,
    /// a x h
    pub w_up: Tensor2<T>,
    /// 1 x h
    pub b_up: Tensor2<T>,
}

impl<T: Scalar> AdapterParams<T> {
    pub fn zeros(h: usize, a: usize) -> Self {
        AdapterParams {
            w_down: Tensor2::zeros(h, a),
            b_down: Tensor2::zeros(1, a),
            w_up: Tensor2::zeros(a, h),
            b_up: Tensor2::zeros(1, h),
        }
    }

    pub fn validate(&self, h: usize, a: usize) -> Result<()> {
        let want = [
            ("w_down", self.w_down.shape(), (h, a)),
            ("b_down", self.b_down.shape(), (1, a)),
            ("w_up", self.w_up.shape(), (a, h)),
            ("b_up", self.b_up.shape(), (1, h)),
        ];
        for (name, got, expect) in want {
            if got != expect {
                return Err(ModelError::Config(format!(
                    "adapter {name}: shape {got:?}, expected {expect:?} for h={h} a={a}"
                )));
            }
        }
        Ok(())
    }

    pub fn is_zero(&self) -> bool {
        [&self.w_down, &self.b_down, &self.w_up, &self.b_up]
            .iter()
            .all(|t| t.data().iter().all(|&v| v == T::zero()))
    }
}

/// One adapter per transformer layer: encoder layers first, then decoder
/// layers.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterSet<T: Scalar>(pub Vec<AdapterParams<T>>);

impl<T: Scalar> AdapterSet<T> {
    pub fn zeros(n_layers: usize, h: usize, a: usize) -> Self {
        AdapterSet((0..n_layers).map(|_| AdapterParams::zeros(h, a)).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn validate(&self, n_layers: usize, h: usize, a: usize) -> Result<()> {
        if self.0.len() != n_layers {
            return Err(ModelError::Config(format!(
                "adapter set has {} layers, model has {n_layers}",
                self.0.len()
            )));
        }
        for p in &self.0 {
            p.validate(h, a)?;
        }
        Ok(())
    }

    /// Mounts the set on a graph as constant inputs (no gradients flow to
    /// the adapter values; used for evaluation and decoding).
    pub fn to_vars(&self, g: &mut Graph<T>) -> Vec<AdapterVars> {
        self.0
            .iter()
            .map(|p| AdapterVars {
                w_down: g.input(p.w_down.clone()),
                b_down: g.input(p.b_down.clone()),
                w_up: g.input(p.w_up.clone()),
                b_up: g.input(p.b_up.clone()),
            })
            .collect()
    }
}

/// Graph handles for one layer's adapter. They may come from constants
/// (evaluation), a parameter store (the jointly-trained baseline), or a
/// hypernetwork's outputs (stage 2); the forward pass is identical.
#[derive(Debug, Clone, Copy)]
pub struct AdapterVars {
    pub w_down: Var,
    pub b_down: Var,
    pub w_up: Var,
    pub b_up: Var,
}

/// `x + (ReLU(x W_down + b_down) W_up + b_up)` on the tape.
pub fn apply_adapter_graph<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    ad: &AdapterVars,
) -> crate::numerics::Result<Var> {
    let down = g.matmul(x, ad.w_down)?;
    let down = g.add_row(down, ad.b_down)?;
    let hidden = g.relu(down)?;
    let up = g.matmul(hidden, ad.w_up)?;
    let up = g.add_row(up, ad.b_up)?;
    g.add(x, up)
}

/// Tensor-level version of the adapter block, for tests and oracles.
pub fn adapter_apply<T: Scalar>(x: &Tensor2<T>, p: &AdapterParams<T>) -> Result<Tensor2<T>> {
    let down = x.matmul(&p.w_down)?.add_row(&p.b_down)?;
    let up = relu(&down).matmul(&p.w_up)?.add_row(&p.b_up)?;
    Ok(x.add(&up)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    #[test]
    fn zero_adapter_is_exact_identity() {
        let mut rng = Rng::new(11);
        let p = AdapterParams::zeros(6, 3);
        for _ in 0..10 {
            let data: Vec<f64> = (0..2 * 6).map(|_| rng.range_f64(-5.0, 5.0)).collect();
            let x = Tensor2::from_vec(2, 6, data).unwrap();
            let y = adapter_apply(&x, &p).unwrap();
            assert_eq!(x, y);
        }
    }

    #[test]
    fn hand_computed_instance() {
        // h=2, a=1, x = [1, 2]:
        // down = 1*1 + 2*1 + 0.5 = 3.5; relu keeps it;
        // up = 3.5*[2, -1] + [0.25, 0.25] = [7.25, -3.25];
        // y = x + up = [8.25, -1.25].
        let p = AdapterParams {
            w_down: Tensor2::from_vec(2, 1, vec![1.0, 1.0]).unwrap(),
            b_down: Tensor2::from_vec(1, 1, vec![0.5]).unwrap(),
            w_up: Tensor2::from_vec(1, 2, vec![2.0, -1.0]).unwrap(),
            b_up: Tensor2::from_vec(1, 2, vec![0.25, 0.25]).unwrap(),
        };
        let x = Tensor2::from_vec(1, 2, vec![1.0, 2.0]).unwrap();
        let y = adapter_apply(&x, &p).unwrap();
        assert_eq!(y.data(), &[8.25, -1.25]);
    }

    #[test]
    fn output_shape_matches_input_shape() {
        for (h, a) in [(4, 1), (8, 2), (64, 32)] {
            let p = AdapterParams::<f32>::zeros(h, a);
            let x = Tensor2::zeros(3, h);
            assert_eq!(adapter_apply(&x, &p).unwrap().shape(), (3, h));
        }
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let p = AdapterParams::<f64>::zeros(4, 2);
        let x = Tensor2::zeros(3, 5);
        assert!(adapter_apply(&x, &p).is_err());
        assert!(p.validate(4, 2).is_ok());
        assert!(p.validate(5, 2).is_err());
    }

    #[test]
    fn graph_and_tensor_paths_agree() {
        let mut rng = Rng::new(3);
        let h = 5;
        let a = 2;
        let rand = |rng: &mut Rng, r: usize, c: usize| {
            let data: Vec<f64> = (0..r * c).map(|_| rng.range_f64(-1.0, 1.0)).collect();
            Tensor2::from_vec(r, c, data).unwrap()
        };
        let p = AdapterParams {
            w_down: rand(&mut rng, h, a),
            b_down: rand(&mut rng, 1, a),
            w_up: rand(&mut rng, a, h),
            b_up: rand(&mut rng, 1, h),
        };
        let x = rand(&mut rng, 3, h);
        let direct = adapter_apply(&x, &p).unwrap();

        let mut g = Graph::new();
        let xv = g.input(x);
        let set = AdapterSet(vec![p]);
        let vars = set.to_vars(&mut g);
        let y = apply_adapter_graph(&mut g, xv, &vars[0]).unwrap();
        assert_eq!(*g.value(y), direct);
    }

    #[test]
    fn set_validation() {
        let set = AdapterSet::<f32>::zeros(4, 8, 2);
        assert!(set.validate(4, 8, 2).is_ok());
        assert!(set.validate(3, 8, 2).is_err());
        assert!(set.validate(4, 8, 3).is_err());
        assert!(set.0.iter().all(AdapterParams::is_zero));
    }
}
