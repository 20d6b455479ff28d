use crate::diffengine::Tensor;

/// Adam moments for a list of parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Completed updates.
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(shapes: &[[usize; 2]], beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = || shapes.iter().map(|s| Tensor::zeros(s[0], s[1])).collect();
        Self { beta1, beta2, eps, t: 0, m: zeros(), v: zeros() }
    }

    /// One bias-corrected update of every parameter.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor], lr: f64) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = p.data_mut();
            assert_eq!(g.len(), p.len(), "gradient shape of parameter {i}");
            for k in 0..p.len() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                let m_hat = m[k] / c1;
                let v_hat = v[k] / c2;
                p[k] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Textbook Adam on scalars.
    fn reference(x0: [f64; 3], grad: impl Fn([f64; 3]) -> [f64; 3], steps: usize, lr: f64) -> [f64; 3] {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let (mut x, mut m, mut v) = (x0, [0.0; 3], [0.0; 3]);
        for t in 1..=steps {
            let g = grad(x);
            for i in 0..3 {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let mh = m[i] / (1.0 - b1.powi(t as i32));
                let vh = v[i] / (1.0 - b2.powi(t as i32));
                x[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        x
    }

    #[test]
    fn matches_scalar_reference() {
        // f = (x - 1)² + 3 (y + 2)² + 0.5 z⁴
        let grad = |x: [f64; 3]| [2.0 * (x[0] - 1.0), 6.0 * (x[1] + 2.0), 2.0 * x[2].powi(3)];
        let x0 = [0.3, 0.1, -0.8];
        let mut params = vec![Tensor::scalar(x0[0]), Tensor::scalar(x0[1]), Tensor::scalar(x0[2])];
        let mut adam = Adam::new(&[[1, 1]; 3], 0.9, 0.999, 1e-8);
        for _ in 0..200 {
            let x = [params[0].item(), params[1].item(), params[2].item()];
            let g = grad(x).map(Tensor::scalar);
            let mut refs: Vec<&mut Tensor> = params.iter_mut().collect();
            adam.step(&mut refs, &[&g[0], &g[1], &g[2]], 0.01);
        }
        let want = reference(x0, grad, 200, 0.01);
        for i in 0..3 {
            assert!((params[i].item() - want[i]).abs() < 1e-12);
        }
        assert_eq!(adam.t, 200);
    }
}
