use super::Tensor;

/// SGD with heavy-ball momentum: `v <- momentum * v + g; p <- p - lr * v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64) -> Self {
        assert!(
            (0.0..1.0).contains(&momentum),
            "momentum must lie in [0, 1), got {momentum}"
        );
        Sgd {
            momentum,
            velocity: Vec::new(),
        }
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    /// Updates each parameter with its own learning rate.
    ///
    /// `params`, `grads` and `lrs` are aligned by position; the order must stay
    /// the same across calls so velocities line up.
    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Tensor], lrs: &[f64]) {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), lrs.len());
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        }
        assert_eq!(self.velocity.len(), params.len(), "parameter list changed");
        for (((p, g), &lr), v) in params
            .into_iter()
            .zip(grads)
            .zip(lrs)
            .zip(self.velocity.iter_mut())
        {
            assert!(lr > 0.0, "learning rate must be positive");
            assert_eq!(p.shape(), g.shape());
            for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
                *vv = self.momentum * *vv + gv;
                *pv -= lr * *vv;
            }
        }
    }
}
