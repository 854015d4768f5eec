use super::{DiffError, Matrix};

/// Adam optimizer state over an ordered list of parameter matrices.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Matrix>,
    second: Vec<Matrix>,
}

impl AdamState {
    /// Fresh state with β1=0.9, β2=0.999, ε=1e-8 and zero moments shaped like `params`.
    pub fn new<'a>(lr: f64, params: impl IntoIterator<Item = &'a Matrix>) -> Self {
        let (first, second): (Vec<_>, Vec<_>) = params
            .into_iter()
            .map(|p| (Matrix::zeros(p.rows(), p.cols()), Matrix::zeros(p.rows(), p.cols())))
            .unzip();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first,
            second,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one bias-corrected Adam update in place.
    pub fn step(&mut self, mut params: Vec<&mut Matrix>, grads: &[Matrix]) -> Result<(), DiffError> {
        if params.len() != self.first.len() || grads.len() != self.first.len() {
            return Err(DiffError::Domain {
                op: "adam_step",
                detail: format!(
                    "expected {} tensors, got {} params and {} grads",
                    self.first.len(),
                    params.len(),
                    grads.len()
                ),
            });
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.first[i].shape() {
                return Err(DiffError::ShapeMismatch {
                    op: "adam_step",
                    left: p.shape(),
                    right: g.shape(),
                });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first.iter_mut().zip(self.second.iter_mut()))
        {
            for (((w, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *w -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = Matrix::from_rows(&[[0.5, -1.0]]).unwrap();
        let before = p.clone();
        let mut adam = AdamState::new(3e-4, [&p]);
        for _ in 0..5 {
            adam.step(vec![&mut p], &[Matrix::zeros(1, 2)]).unwrap();
        }
        for (a, b) in p.data().iter().zip(before.data()) {
            assert!((a - b).abs() < 1e-9);
        }
        assert_eq!(adam.step_count(), 5);
    }

    #[test]
    fn constant_gradient_descends() {
        let mut p = Matrix::from_rows(&[[0.0, 0.0]]).unwrap();
        let mut adam = AdamState::new(1e-2, [&p]);
        let g = Matrix::from_rows(&[[2.0, -0.5]]).unwrap();
        for _ in 0..100 {
            adam.step(vec![&mut p], std::slice::from_ref(&g)).unwrap();
        }
        assert!(p.get(0, 0) < 0.0);
        assert!(p.get(0, 1) > 0.0);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m̂ = g, v̂ = g², so the step is lr·g/(|g|+ε).
        let mut p = Matrix::from_rows(&[[1.0]]).unwrap();
        let mut adam = AdamState::new(3e-4, [&p]);
        adam.step(vec![&mut p], &[Matrix::scalar(0.37)]).unwrap();
        let expected = 1.0 - 3e-4 * 0.37 / (0.37 + 1e-8);
        assert!((p.item() - expected).abs() < 1e-15);
        assert!(((1.0 - p.item()) - 3e-4).abs() < 1e-10);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut p = Matrix::zeros(1, 2);
        let mut adam = AdamState::new(1e-3, [&p]);
        assert!(adam.step(vec![&mut p], &[Matrix::zeros(2, 1)]).is_err());
    }
}
